//! scr: train, decode and evaluate a small speech command recognizer.
//!
//! Subcommands cover the whole pipeline: `build-graph`, `synth-data`,
//! `train`, `evaluate`, `roc`, `compare` and `confusion-sets`. Every
//! subcommand takes `--seed` and an optional `--config <json>` whose keys
//! (snake_case flag names) override the command-line values. Logs go to
//! stderr; artifacts go to the paths given by `--out`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scr_core::corpus::{
    dial_at_distance, load_manifest, manifest_file_hash, synth_corpus, toy_preset, CorpusCounts,
    Manifest, SynthesisProfile,
};
use scr_core::decoder::DecoderConfig;
use scr_core::eval::{
    compute_metrics, descending_thresholds, format_confusion_csv, format_event_log,
    format_roc_csv, relative_gain_value, roc_sweep, score_dataset, RocReport,
};
use scr_core::graph::{build_graph, format_graph_dump, graph_stats};
use scr_core::lexicon::{
    build_pss_sets, format_pss_dump, parse_commands, CommandSet, ConfusionSetConfig, Lexicon,
    Strategy,
};
use scr_core::losses::MsceLossConfig;
use scr_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use scr_core::numerics::{stream_rng, streams};
use scr_core::train::{run_training, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "scr", version, about = "Speech command recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the prefix-trie decoding graph and write its dump.
    BuildGraph(BuildGraphArgs),
    /// Synthesize a labeled corpus (features + manifest).
    SynthData(SynthDataArgs),
    /// Train a model (cross-entropy stage or sequence stage).
    Train(TrainArgs),
    /// Decode a manifest and write metrics and the confusion matrix.
    Evaluate(EvaluateArgs),
    /// Threshold sweep: write the ROC CSV and its JSON twin.
    Roc(RocArgs),
    /// Compare two ROC reports at matched FAR operating points.
    Compare(CompareArgs),
    /// Dump the pronunciation-similarity confusing sets.
    ConfusionSets(ConfusionSetsArgs),
}

#[derive(Parser, Serialize, Deserialize)]
struct BuildGraphArgs {
    #[arg(long)]
    commands: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = 5)]
    states_per_phone: usize,
    /// Graph dump output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file whose keys override these flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Parser, Serialize, Deserialize)]
struct SynthDataArgs {
    /// Command list file; omit with --preset.
    #[arg(long)]
    commands: Option<PathBuf>,
    /// Lexicon file; omit with --preset.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Built-in setup: `toy` (8 commands, 2 confusable pairs). Writes
    /// commands.txt and lexicon.txt next to the generated data.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 5)]
    states_per_phone: usize,
    /// Output directory for feature files and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    positives_per_command: usize,
    #[arg(long, default_value_t = 40)]
    negatives: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 3.0)]
    mean_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    state_jitter: f64,
    #[arg(long, default_value_t = 1.0)]
    feature_std: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 2)]
    dur_min: usize,
    #[arg(long, default_value_t = 6)]
    dur_max: usize,
    #[arg(long, default_value_t = 5)]
    pad_max: usize,
    /// Extra confusability dial entries `phoneA:phoneB:distance`.
    #[arg(long)]
    confusable: Vec<String>,
    /// Distance applied to the preset's dialed phone pairs.
    #[arg(long, default_value_t = 3.0)]
    dial_distance: f64,
    /// Emit one extra noisy copy of each positive per listed SNR (dB).
    #[arg(long)]
    augment_snr_db: Vec<f64>,
    /// Fraction of negatives drawn as command near-misses. Keep 0 for
    /// training sets; raise for evaluation sets so the FAR curve has
    /// command-like material to work with.
    #[arg(long, default_value_t = 0.0)]
    near_miss_fraction: f64,
    /// Seed of the synthesis profile (state means, dial directions). Train
    /// and eval sets of one experiment must share it; vary --seed for the
    /// utterances.
    #[arg(long, default_value_t = 0)]
    profile_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Parser, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    commands: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = 5)]
    states_per_phone: usize,
    /// `ce` or `msce`.
    #[arg(long)]
    stage: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Defaults to 1e-3 for the ce stage and 1e-4 for msce.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Gradient-accumulation count per optimizer step.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Confusing-set strategy for the msce stage: pss, rss or hs.
    #[arg(long, default_value = "hs")]
    strategy: String,
    #[arg(long, default_value_t = 4)]
    n_confusers: usize,
    #[arg(long, default_value_t = 0.8)]
    beta_mix: f64,
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 3)]
    average_last_k: usize,
    /// Starting checkpoint; required for msce (its config wins over the
    /// shape flags below).
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    num_blocks: usize,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    /// Comma-separated per-block dilations; default cycles 1,2,4,4,2,1.
    #[arg(long)]
    dilations: Option<String>,
    /// Comma-separated causal block indices; default 6,7,8,9 when the model
    /// has at least ten blocks, empty otherwise.
    #[arg(long)]
    causal_blocks: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    dropout_rate: f64,
    /// Output directory: epoch checkpoints, final.ckpt, train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Parser, Serialize, Deserialize)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    commands: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = 5)]
    states_per_phone: usize,
    /// Trigger threshold θ (average per-state log-score).
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    theta: f64,
    #[arg(long, default_value_t = 12.0)]
    beam: f64,
    #[arg(long, default_value_t = true)]
    blank_absorb: bool,
    #[arg(long, default_value_t = 2000)]
    max_tokens: usize,
    /// Output directory: report.json and confusion.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Parser, Serialize, Deserialize)]
struct RocArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    commands: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = 5)]
    states_per_phone: usize,
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    theta_min: f64,
    #[arg(long, default_value_t = -0.01, allow_negative_numbers = true)]
    theta_max: f64,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 12.0)]
    beam: f64,
    #[arg(long, default_value_t = true)]
    blank_absorb: bool,
    #[arg(long, default_value_t = 2000)]
    max_tokens: usize,
    /// Output directory: roc.csv and roc.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Parser, Serialize, Deserialize)]
struct CompareArgs {
    /// Baseline roc.json.
    #[arg(long)]
    baseline: PathBuf,
    /// Candidate roc.json.
    #[arg(long)]
    candidate: PathBuf,
    /// FAR operating points to match, comma-separated.
    #[arg(long, default_value = "0.01,0.02,0.05")]
    far_points: String,
    /// Optional JSON output of the gains table.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Parser, Serialize, Deserialize)]
struct ConfusionSetsArgs {
    #[arg(long)]
    commands: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = 5)]
    states_per_phone: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Dump file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::BuildGraph(args) => cmd_build_graph(args),
        Cmd::SynthData(args) => cmd_synth_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Roc(args) => cmd_roc(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::ConfusionSets(args) => cmd_confusion_sets(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Overrides flag values with the keys of a JSON config file.
fn apply_config<T>(args: T) -> Result<T>
where
    T: Serialize + DeserializeOwned + HasConfig,
{
    let Some(path) = args.config_path() else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let overrides: serde_json::Value = serde_json::from_str(&text)?;
    let mut base = serde_json::to_value(&args)?;
    let (Some(base_map), serde_json::Value::Object(over_map)) =
        (base.as_object_mut(), overrides)
    else {
        bail!("config file must contain a JSON object");
    };
    for (key, value) in over_map {
        if !base_map.contains_key(&key) {
            bail!("unknown config key '{key}'");
        }
        base_map.insert(key, value);
    }
    Ok(serde_json::from_value(base)?)
}

trait HasConfig {
    fn config_path(&self) -> Option<PathBuf>;
}

macro_rules! has_config {
    ($($t:ty),*) => {
        $(impl HasConfig for $t {
            fn config_path(&self) -> Option<PathBuf> {
                self.config.clone()
            }
        })*
    };
}
has_config!(
    BuildGraphArgs,
    SynthDataArgs,
    TrainArgs,
    EvaluateArgs,
    RocArgs,
    CompareArgs,
    ConfusionSetsArgs
);

fn load_command_set(
    commands: &Path,
    lexicon: &Path,
    states_per_phone: usize,
) -> Result<CommandSet> {
    let lexicon_text = fs::read_to_string(lexicon)
        .with_context(|| format!("reading lexicon {}", lexicon.display()))?;
    let commands_text = fs::read_to_string(commands)
        .with_context(|| format!("reading commands {}", commands.display()))?;
    let lex = Lexicon::parse(&lexicon_text)?;
    let cmds = parse_commands(&commands_text)?;
    Ok(CommandSet::build(&cmds, &lex, states_per_phone)?)
}

fn check_manifest_matches(manifest: &Manifest, command_set: &CommandSet) -> Result<()> {
    if manifest.header.inventory_hash != command_set.inventory_hash() {
        bail!(
            "manifest inventory hash {} does not match the given lexicon/states-per-phone ({})",
            manifest.header.inventory_hash,
            command_set.inventory_hash()
        );
    }
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    let args = apply_config(args)?;
    let cs = load_command_set(&args.commands, &args.lexicon, args.states_per_phone)?;
    let graph = build_graph(&cs)?;
    let stats = graph_stats(&graph, &cs);
    fs::write(&args.out, format_graph_dump(&graph))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    log::info!(
        "graph: {} nodes, {} finals, sharing ratio {:.3} -> {}",
        stats.nodes,
        stats.finals,
        stats.sharing_ratio,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let args = apply_config(args)?;
    fs::create_dir_all(&args.out)?;

    let mut dial: Vec<(String, String, f64)> = Vec::new();
    let (commands_text, lexicon_text) = match args.preset.as_deref() {
        Some("toy") => {
            let preset = toy_preset();
            dial.extend(dial_at_distance(
                preset.confusable_phone_pairs,
                args.dial_distance,
            ));
            let commands_path = args.out.join("commands.txt");
            let lexicon_path = args.out.join("lexicon.txt");
            fs::write(&commands_path, preset.commands)?;
            fs::write(&lexicon_path, preset.lexicon)?;
            log::info!(
                "preset toy: wrote {} and {}",
                commands_path.display(),
                lexicon_path.display()
            );
            (preset.commands.to_string(), preset.lexicon.to_string())
        }
        Some(other) => bail!("unknown preset '{other}'"),
        None => {
            let commands = args
                .commands
                .as_ref()
                .context("--commands required without --preset")?;
            let lexicon = args
                .lexicon
                .as_ref()
                .context("--lexicon required without --preset")?;
            (fs::read_to_string(commands)?, fs::read_to_string(lexicon)?)
        }
    };
    for entry in &args.confusable {
        let parts: Vec<&str> = entry.split(':').collect();
        if parts.len() != 3 {
            bail!("bad --confusable entry '{entry}' (want phoneA:phoneB:distance)");
        }
        dial.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parts[2].parse().context("bad dial distance")?,
        ));
    }

    let lex = Lexicon::parse(&lexicon_text)?;
    let cmds = parse_commands(&commands_text)?;
    let cs = CommandSet::build(&cmds, &lex, args.states_per_phone)?;

    let mut profile_rng = stream_rng(args.profile_seed, streams::PROFILE);
    let mut profile = SynthesisProfile::generate(
        &cs,
        args.feature_dim,
        args.mean_scale,
        args.state_jitter,
        &dial,
        &mut profile_rng,
    )?;
    profile.feature_std = args.feature_std;
    profile.noise_std = args.noise_std;
    profile.dur_min = args.dur_min;
    profile.dur_max = args.dur_max;
    profile.pad_max = args.pad_max;

    let manifest = synth_corpus(
        &cs,
        &profile,
        CorpusCounts {
            positives_per_command: args.positives_per_command,
            negatives: args.negatives,
            near_miss_fraction: args.near_miss_fraction,
        },
        &args.augment_snr_db,
        args.seed,
        &args.out,
    )?;
    log::info!(
        "wrote {} utterances ({} per command positive, {} negatives) to {}",
        manifest.records.len(),
        args.positives_per_command,
        args.negatives,
        args.out.display()
    );
    println!("{}", args.out.join("manifest.jsonl").display());
    Ok(())
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| p.trim().parse::<usize>().context("bad list entry"))
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let args = apply_config(args)?;
    let stage: Stage = match args.stage.as_str() {
        "ce" => Stage::Ce,
        "msce" => Stage::Msce,
        other => bail!("unknown stage '{other}' (expected ce or msce)"),
    };
    let cs = load_command_set(&args.commands, &args.lexicon, args.states_per_phone)?;
    let manifest = load_manifest(&args.manifest)?;
    check_manifest_matches(&manifest, &cs)?;

    let (init_params, model_config) = match (&args.init_checkpoint, stage) {
        (Some(path), _) => {
            let (params, config) = load_checkpoint(path)?;
            (Some(params), config)
        }
        (None, Stage::Msce) => bail!("msce stage requires --init-checkpoint"),
        (None, Stage::Ce) => {
            let dilations = match &args.dilations {
                Some(text) => parse_usize_list(text)?,
                None => {
                    let cycle = [1usize, 2, 4, 4, 2, 1];
                    (0..args.num_blocks).map(|i| cycle[i % cycle.len()]).collect()
                }
            };
            let causal_blocks: BTreeSet<usize> = match &args.causal_blocks {
                Some(text) => parse_usize_list(text)?.into_iter().collect(),
                None if args.num_blocks >= 10 => [6, 7, 8, 9].into_iter().collect(),
                None => BTreeSet::new(),
            };
            let config = ModelConfig {
                num_blocks: args.num_blocks,
                kernel_size: args.kernel_size,
                channels: args.channels,
                dilations,
                causal_blocks,
                input_dim: manifest.header.feature_dim,
                output_units: cs.num_output_units(),
                dropout_rate: args.dropout_rate,
            };
            (None, config)
        }
    };

    let strategy: Strategy = args.strategy.parse()?;
    let learning_rate = args.learning_rate.unwrap_or(match stage {
        Stage::Ce => 1e-3,
        Stage::Msce => 1e-4,
    });
    let train_config = TrainConfig {
        stage,
        epochs: args.epochs,
        learning_rate,
        batch_size: args.batch_size,
        confusion: match stage {
            Stage::Ce => None,
            Stage::Msce => Some(ConfusionSetConfig {
                strategy,
                n: args.n_confusers,
                rng_stream: 0,
            }),
        },
        loss: MsceLossConfig {
            xi: args.xi,
            alpha_shift: args.alpha_shift,
            beta_mix: args.beta_mix,
        },
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        average_last_k: args.average_last_k,
    };

    fs::create_dir_all(&args.out)?;
    let mut log_file = std::io::BufWriter::new(fs::File::create(args.out.join("train_log.jsonl"))?);
    let (params, summary) = run_training(
        &manifest,
        &cs,
        &model_config,
        init_params,
        &train_config,
        Some(&args.out),
        &mut log_file,
    )?;
    std::io::Write::flush(&mut log_file)?;

    let final_path = args.out.join("final.ckpt");
    save_checkpoint(&params, &model_config, &final_path)?;
    log::info!(
        "stage {stage}: {} steps, epoch CE {:?}, skipped {}, dropped confusers {}",
        summary.steps,
        summary
            .epoch_ce
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>(),
        summary.total_skipped_examples,
        summary.total_dropped_confusers
    );
    println!("{}", final_path.display());
    Ok(())
}

struct EvalSetup {
    cs: CommandSet,
    manifest: Manifest,
    manifest_hash: String,
    params: scr_core::model::ModelParameters,
    model_config: ModelConfig,
    graph: scr_core::graph::DecodingGraph,
}

fn eval_setup(
    manifest_path: &Path,
    checkpoint: &Path,
    commands: &Path,
    lexicon: &Path,
    states_per_phone: usize,
) -> Result<EvalSetup> {
    let cs = load_command_set(commands, lexicon, states_per_phone)?;
    let manifest = load_manifest(manifest_path)?;
    check_manifest_matches(&manifest, &cs)?;
    let manifest_hash = manifest_file_hash(manifest_path)?;
    let (params, model_config) = load_checkpoint(checkpoint)?;
    if model_config.output_units != cs.num_output_units() {
        bail!(
            "checkpoint has {} output units, command set needs {}",
            model_config.output_units,
            cs.num_output_units()
        );
    }
    if model_config.input_dim != manifest.header.feature_dim {
        bail!(
            "checkpoint expects {}-dim features, manifest provides {}",
            model_config.input_dim,
            manifest.header.feature_dim
        );
    }
    let graph = build_graph(&cs)?;
    Ok(EvalSetup {
        cs,
        manifest,
        manifest_hash,
        params,
        model_config,
        graph,
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let args = apply_config(args)?;
    let setup = eval_setup(
        &args.manifest,
        &args.checkpoint,
        &args.commands,
        &args.lexicon,
        args.states_per_phone,
    )?;
    let decoder_config = DecoderConfig {
        beam: args.beam,
        trigger_threshold: args.theta,
        blank_absorb: args.blank_absorb,
        max_tokens: args.max_tokens,
    };
    let outcomes = score_dataset(
        &setup.params,
        &setup.model_config,
        &setup.graph,
        &setup.manifest,
        &decoder_config,
    )?;
    let report = compute_metrics(
        &outcomes,
        args.theta,
        setup.cs.commands.len(),
        &setup.manifest_hash,
    );
    fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    fs::write(
        args.out.join("confusion.csv"),
        format_confusion_csv(&report, &setup.cs),
    )?;
    fs::write(args.out.join("events.jsonl"), format_event_log(&outcomes))?;
    log::info!(
        "theta {}: frr {:?} far {:?} confusions {} (of {} positives, {} negatives)",
        args.theta,
        report.frr,
        report.far,
        report.confusions,
        report.positives,
        report.negatives
    );
    println!("{}", report_path.display());
    Ok(())
}

fn cmd_roc(args: RocArgs) -> Result<()> {
    let args = apply_config(args)?;
    if !(args.theta_min < args.theta_max) || args.steps < 2 {
        bail!(
            "bad sweep: need theta_min < theta_max and steps >= 2 (got [{}, {}], {})",
            args.theta_min,
            args.theta_max,
            args.steps
        );
    }
    let setup = eval_setup(
        &args.manifest,
        &args.checkpoint,
        &args.commands,
        &args.lexicon,
        args.states_per_phone,
    )?;
    // Decode once at the loosest threshold; sweep by re-thresholding scores.
    let decoder_config = DecoderConfig {
        beam: args.beam,
        trigger_threshold: args.theta_min,
        blank_absorb: args.blank_absorb,
        max_tokens: args.max_tokens,
    };
    let outcomes = score_dataset(
        &setup.params,
        &setup.model_config,
        &setup.graph,
        &setup.manifest,
        &decoder_config,
    )?;
    let thresholds = descending_thresholds(args.theta_min, args.theta_max, args.steps)?;
    let report = roc_sweep(
        &outcomes,
        &thresholds,
        setup.cs.commands.len(),
        &setup.manifest_hash,
    )?;
    fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("roc.csv");
    fs::write(&csv_path, format_roc_csv(&report))?;
    fs::write(
        args.out.join("roc.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    log::info!("{} sweep points -> {}", report.points.len(), csv_path.display());
    println!("{}", csv_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct OperatingPointGains {
    far_target: f64,
    baseline_threshold: f64,
    candidate_threshold: f64,
    baseline_far: f64,
    candidate_far: f64,
    baseline_frr: f64,
    candidate_frr: f64,
    baseline_confusions: usize,
    candidate_confusions: usize,
    frr_gain_percent: Option<f64>,
    far_gain_percent: Option<f64>,
    confusion_gain_percent: Option<f64>,
}

fn nearest_point(report: &RocReport, far_target: f64) -> Result<&scr_core::eval::RocPoint> {
    report
        .points
        .iter()
        .filter(|p| p.far.is_some() && p.frr.is_some())
        .min_by(|a, b| {
            let da = (a.far.unwrap() - far_target).abs();
            let db = (b.far.unwrap() - far_target).abs();
            da.total_cmp(&db)
        })
        .context("ROC report has no usable points")
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let args = apply_config(args)?;
    let baseline: RocReport = serde_json::from_str(&fs::read_to_string(&args.baseline)?)
        .with_context(|| format!("parsing {}", args.baseline.display()))?;
    let candidate: RocReport = serde_json::from_str(&fs::read_to_string(&args.candidate)?)
        .with_context(|| format!("parsing {}", args.candidate.display()))?;
    if baseline.manifest_hash != candidate.manifest_hash {
        bail!(
            "reports evaluate different manifests ({} vs {})",
            baseline.manifest_hash,
            candidate.manifest_hash
        );
    }
    let far_points: Vec<f64> = args
        .far_points
        .split(',')
        .map(|p| p.trim().parse::<f64>().context("bad --far-points entry"))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    println!(
        "{:>6} {:>10} {:>10} {:>9} {:>11} {:>11} {:>10}",
        "FAR", "base_frr", "cand_frr", "frr_gain%", "base_conf", "cand_conf", "conf_gain%"
    );
    for far_target in far_points {
        let b = nearest_point(&baseline, far_target)?;
        let c = nearest_point(&candidate, far_target)?;
        let (b_frr, c_frr) = (b.frr.unwrap(), c.frr.unwrap());
        let frr_gain = relative_gain_value(b_frr, c_frr).ok();
        let far_gain = relative_gain_value(b.far.unwrap(), c.far.unwrap()).ok();
        let conf_gain =
            relative_gain_value(b.confusions as f64, c.confusions as f64).ok();
        println!(
            "{:>6.3} {:>10.4} {:>10.4} {:>9} {:>11} {:>11} {:>10}",
            far_target,
            b_frr,
            c_frr,
            frr_gain.map_or("n/a".into(), |g| format!("{g:.2}")),
            b.confusions,
            c.confusions,
            conf_gain.map_or("n/a".into(), |g| format!("{g:.2}")),
        );
        rows.push(OperatingPointGains {
            far_target,
            baseline_threshold: b.threshold,
            candidate_threshold: c.threshold,
            baseline_far: b.far.unwrap(),
            candidate_far: c.far.unwrap(),
            baseline_frr: b_frr,
            candidate_frr: c_frr,
            baseline_confusions: b.confusions,
            candidate_confusions: c.confusions,
            frr_gain_percent: frr_gain,
            far_gain_percent: far_gain,
            confusion_gain_percent: conf_gain,
        });
    }
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&rows)?)?;
        log::info!("gains table -> {}", out.display());
    }
    Ok(())
}

fn cmd_confusion_sets(args: ConfusionSetsArgs) -> Result<()> {
    let args = apply_config(args)?;
    let cs = load_command_set(&args.commands, &args.lexicon, args.states_per_phone)?;
    let table = build_pss_sets(&cs, args.n)?;
    let dump = format_pss_dump(&cs, &table);
    match &args.out {
        Some(path) => {
            fs::write(path, dump)?;
            log::info!("confusing sets -> {}", path.display());
        }
        None => print!("{dump}"),
    }
    Ok(())
}
