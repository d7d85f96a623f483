//! Training loops: cross-entropy pretraining on frame labels, then
//! sequence-level fine-tuning where each positive example pits the target
//! command's CTC likelihood against a sampled confusing set, mixed with a
//! cross-entropy regularizer. Gradients are accumulated over a batch in
//! parallel and reduced in example order, so runs are bit-reproducible for
//! a fixed seed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::lexicon::{build_pss_sets, draw_confusers, CommandSet, ConfusionSetConfig};
use crate::losses::{ce_frame_loss, msce_example_loss, MsceLossConfig};
use crate::model::{
    backward, forward, init_parameters, save_checkpoint, update_running_stats, Gradients, Mode,
    ModelConfig, ModelParameters,
};
use crate::numerics::{stream_rng, streams, Matrix};

/// Adam with bias correction; moments are kept per trainable scalar.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, len: usize) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ce,
    Msce,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Ce => write!(f, "ce"),
            Stage::Msce => write!(f, "msce"),
        }
    }
}

/// Training-run parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Gradient-accumulation count per optimizer step.
    pub batch_size: usize,
    /// Confusing-set strategy; required for the sequence stage.
    pub confusion: Option<ConfusionSetConfig>,
    pub loss: MsceLossConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
    /// How many trailing checkpoints the final model averages.
    pub average_last_k: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.average_last_k == 0 {
            return Err(Error::Config(
                "batch_size, checkpoint_every and average_last_k must be >= 1".into(),
            ));
        }
        if self.stage == Stage::Msce && self.confusion.is_none() {
            return Err(Error::Config(
                "sequence stage needs a confusion-set strategy".into(),
            ));
        }
        self.loss.validate()
    }
}

/// One optimizer-step record of the JSON-lines run log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_mean: Option<f64>,
    pub dropped_confusers: usize,
    pub skipped_examples: usize,
    pub wall_ms: u64,
}

/// Aggregates the run for callers that want convergence checks.
#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean CE loss per epoch.
    pub epoch_ce: Vec<f64>,
    /// Mean measure value per epoch (sequence stage only).
    pub epoch_d: Vec<f64>,
    pub total_dropped_confusers: usize,
    pub total_skipped_examples: usize,
    /// Epoch checkpoints written (empty when no out_dir was given).
    pub checkpoint_paths: Vec<PathBuf>,
}

struct Example {
    label: Option<usize>,
    features: Matrix,
    frame_states: Option<Vec<usize>>,
}

struct ExampleResult {
    grads: Option<(Gradients, crate::model::ForwardCache)>,
    ce: f64,
    msce: Option<f64>,
    d: Option<f64>,
    dropped: usize,
    skipped: bool,
}

/// Runs one training stage over the manifest and returns the average of the
/// last k epoch checkpoints plus a summary. `init` is required for the
/// sequence stage and optional for cross-entropy (fresh initialization from
/// the seed otherwise). Epoch checkpoints go to `out_dir` when given.
pub fn run_training(
    manifest: &Manifest,
    command_set: &CommandSet,
    model_config: &ModelConfig,
    init: Option<ModelParameters>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    log_sink: &mut dyn Write,
) -> Result<(ModelParameters, TrainSummary)> {
    config.validate()?;
    model_config.validate()?;
    if manifest.header.inventory_hash != command_set.inventory_hash() {
        return Err(Error::Config(
            "manifest was generated for a different lexicon or state expansion".into(),
        ));
    }
    if model_config.output_units != command_set.num_output_units() {
        return Err(Error::Config(format!(
            "model has {} output units, command set needs {}",
            model_config.output_units,
            command_set.num_output_units()
        )));
    }
    if config.stage == Stage::Msce && init.is_none() {
        return Err(Error::Config(
            "sequence stage requires an initial checkpoint".into(),
        ));
    }

    let blank = command_set.blank_id();
    let examples = load_examples(manifest, config.stage, blank)?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples in manifest".into()));
    }

    let pss = match &config.confusion {
        Some(cc) => Some(build_pss_sets(command_set, cc.n)?),
        None => None,
    };

    let mut params = match init {
        Some(p) => p,
        None => init_parameters(model_config, &mut stream_rng(config.seed, streams::INIT))?,
    };

    let mut adam = Adam::new(
        config.learning_rate,
        ModelParameters::trainable_len(model_config),
    );
    let mut summary = TrainSummary::default();
    let mut recent: Vec<ModelParameters> = Vec::new();
    let mut example_counter: u64 = 0;
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut stream_rng(
            config.seed,
            streams::SHUFFLE + epoch as u64,
        ));

        let mut epoch_ce = 0.0;
        let mut epoch_ce_n = 0usize;
        let mut epoch_d = 0.0;
        let mut epoch_d_n = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let started = Instant::now();
            // Counters are assigned before dispatch so parallelism cannot
            // perturb any random stream.
            let tagged: Vec<(usize, u64)> = chunk
                .iter()
                .map(|&idx| {
                    let c = example_counter;
                    example_counter += 1;
                    (idx, c)
                })
                .collect();

            let results: Vec<ExampleResult> = tagged
                .par_iter()
                .map(|&(idx, counter)| {
                    process_example(
                        &examples[idx],
                        &params,
                        model_config,
                        command_set,
                        config,
                        pss.as_ref(),
                        blank,
                        counter,
                    )
                })
                .collect::<Result<_>>()?;

            let mut total = Gradients::zeros(model_config);
            let mut contributing = 0usize;
            let mut batch_ce = 0.0;
            let mut batch_ce_n = 0usize;
            let mut batch_msce = 0.0;
            let mut batch_msce_n = 0usize;
            let mut batch_d = 0.0;
            let mut batch_d_n = 0usize;
            let mut dropped = 0usize;
            let mut skipped = 0usize;
            for r in results {
                dropped += r.dropped;
                skipped += usize::from(r.skipped);
                if let Some((g, cache)) = r.grads {
                    total.add_scaled(&g, 1.0);
                    update_running_stats(&mut params, &cache);
                    contributing += 1;
                }
                if !r.skipped {
                    batch_ce += r.ce;
                    batch_ce_n += 1;
                    if let Some(m) = r.msce {
                        batch_msce += m;
                        batch_msce_n += 1;
                    }
                    if let Some(d) = r.d {
                        batch_d += d;
                        batch_d_n += 1;
                    }
                }
            }
            if contributing > 0 {
                let mut flat = params.flat_trainable();
                let mut gflat = total.to_flat();
                let scale = 1.0 / contributing as f64;
                for g in &mut gflat {
                    *g *= scale;
                }
                adam.step(&mut flat, &gflat);
                params.load_trainable(&flat);
            }
            step += 1;

            let record = StepRecord {
                step,
                stage: config.stage,
                epoch,
                ce: if batch_ce_n > 0 {
                    batch_ce / batch_ce_n as f64
                } else {
                    0.0
                },
                msce: (batch_msce_n > 0).then(|| batch_msce / batch_msce_n as f64),
                d_mean: (batch_d_n > 0).then(|| batch_d / batch_d_n as f64),
                dropped_confusers: dropped,
                skipped_examples: skipped,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            serde_json::to_writer(&mut *log_sink, &record)?;
            log_sink.write_all(b"\n")?;

            epoch_ce += batch_ce;
            epoch_ce_n += batch_ce_n;
            epoch_d += batch_d;
            epoch_d_n += batch_d_n;
            summary.total_dropped_confusers += dropped;
            summary.total_skipped_examples += skipped;
        }

        summary
            .epoch_ce
            .push(if epoch_ce_n > 0 { epoch_ce / epoch_ce_n as f64 } else { 0.0 });
        if epoch_d_n > 0 {
            summary.epoch_d.push(epoch_d / epoch_d_n as f64);
        }

        let last_epoch = epoch + 1 == config.epochs;
        if (epoch + 1) % config.checkpoint_every == 0 || last_epoch {
            recent.push(params.clone());
            if recent.len() > config.average_last_k {
                recent.remove(0);
            }
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("ckpt_epoch{:03}.ckpt", epoch + 1));
                save_checkpoint(&params, model_config, &path)?;
                summary.checkpoint_paths.push(path);
            }
        }
    }

    summary.steps = step;
    let averaged = crate::model::average_parameters(&recent)?;
    Ok((averaged, summary))
}

fn load_examples(manifest: &Manifest, stage: Stage, blank: usize) -> Result<Vec<Example>> {
    let mut examples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let (features, frame_states) = manifest.load_features(rec)?;
        if rec.label.is_some() && frame_states.is_none() {
            // Positives must carry frame labels: CE needs them directly and
            // the sequence stage uses them for its regularizer.
            return Err(Error::Config(format!(
                "{}: positive utterance has no frame states",
                rec.utt_id
            )));
        }
        if let Some(states) = &frame_states {
            if states.iter().any(|&s| s > blank) {
                return Err(Error::LabelOutOfRange {
                    label: *states.iter().max().unwrap(),
                    units: blank + 1,
                });
            }
        }
        examples.push(Example {
            label: rec.label,
            features,
            frame_states,
        });
    }
    let _ = stage;
    Ok(examples)
}

#[allow(clippy::too_many_arguments)]
fn process_example(
    example: &Example,
    params: &ModelParameters,
    model_config: &ModelConfig,
    command_set: &CommandSet,
    config: &TrainConfig,
    pss: Option<&crate::lexicon::PssTable>,
    blank: usize,
    counter: u64,
) -> Result<ExampleResult> {
    let mut dropout_rng = stream_rng(config.seed, streams::DROPOUT + counter);
    let (out, cache) = forward(
        params,
        model_config,
        &example.features,
        Mode::Train,
        Some(&mut dropout_rng),
    )?;
    let t_len = example.features.rows();

    // Frame targets: labeled states for positives, all-blank for negatives.
    let all_blank;
    let frame_targets: &[usize] = match (&example.frame_states, example.label) {
        (Some(states), _) => states,
        (None, None) => {
            all_blank = vec![blank; t_len];
            &all_blank
        }
        (None, Some(_)) => unreachable!("checked at load"),
    };
    let (ce, ce_grad) = ce_frame_loss(&out.log_post, frame_targets)?;

    match (config.stage, example.label) {
        (Stage::Ce, _) => {
            let grads = backward(params, model_config, &cache, &ce_grad)?;
            Ok(ExampleResult {
                grads: Some((grads, cache)),
                ce,
                msce: None,
                d: None,
                dropped: 0,
                skipped: false,
            })
        }
        (Stage::Msce, None) => {
            // Negatives contribute the regularizer only.
            let mut grad = ce_grad;
            let w = 1.0 - config.loss.beta_mix;
            for v in grad.as_mut_slice() {
                *v *= w;
            }
            let grads = backward(params, model_config, &cache, &grad)?;
            Ok(ExampleResult {
                grads: Some((grads, cache)),
                ce,
                msce: None,
                d: None,
                dropped: 0,
                skipped: false,
            })
        }
        (Stage::Msce, Some(target)) => {
            let cc = config.confusion.as_ref().expect("validated");
            let mut confuser_rng =
                stream_rng(config.seed, streams::CONFUSER + cc.rng_stream + counter);
            let ids = draw_confusers(
                command_set,
                target,
                cc,
                pss.expect("built for sequence stage"),
                &mut confuser_rng,
            )?;
            let confuser_states: Vec<&[usize]> = ids
                .iter()
                .map(|&id| command_set.commands[id].states.as_slice())
                .collect();
            let target_states = command_set.commands[target].states.as_slice();
            let msce = match msce_example_loss(
                &out.log_post,
                target_states,
                &confuser_states,
                &config.loss,
                blank,
            ) {
                Ok(m) => m,
                Err(Error::CtcInfeasible { .. }) => {
                    // Target does not fit in T frames: skip with a counter.
                    return Ok(ExampleResult {
                        grads: None,
                        ce,
                        msce: None,
                        d: None,
                        dropped: 0,
                        skipped: true,
                    });
                }
                Err(e) => return Err(e),
            };
            let beta = config.loss.beta_mix;
            let mut grad = msce.grad_logits;
            {
                let g = grad.as_mut_slice();
                for (gv, cv) in g.iter_mut().zip(ce_grad.as_slice()) {
                    *gv = beta * *gv + (1.0 - beta) * cv;
                }
            }
            let grads = backward(params, model_config, &cache, &grad)?;
            Ok(ExampleResult {
                grads: Some((grads, cache)),
                ce,
                msce: Some(msce.loss),
                d: msce.d,
                dropped: msce.dropped_confusers,
                skipped: false,
            })
        }
    }
}
