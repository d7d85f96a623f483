//! End-to-end library pipeline: synthesize a corpus, train a small model,
//! and drive the streaming decoder on fresh utterances.

use rand::Rng;

use scr_core::corpus::{
    dial_at_distance, synth_corpus, synth_utterance, toy_preset, CorpusCounts, SynthesisProfile,
};
use scr_core::decoder::{decode_utterance, decoder_new, peak_decode, DecoderConfig};
use scr_core::graph::build_graph;
use scr_core::lexicon::{parse_commands, CommandSet, Lexicon};
use scr_core::losses::MsceLossConfig;
use scr_core::model::{forward, Mode, ModelConfig, ModelParameters};
use scr_core::numerics::{stream_rng, streams, Matrix};
use scr_core::train::{run_training, Stage, TrainConfig};

struct Trained {
    cs: CommandSet,
    profile: SynthesisProfile,
    params: ModelParameters,
    config: ModelConfig,
}

/// Trains a small but competent model on an easy (widely separated) version
/// of the toy setup.
fn train_toy() -> Trained {
    let preset = toy_preset();
    let lex = Lexicon::parse(preset.lexicon).unwrap();
    let cmds = parse_commands(preset.commands).unwrap();
    let cs = CommandSet::build(&cmds, &lex, 1).unwrap();
    let dial = dial_at_distance(preset.confusable_phone_pairs, 3.0);
    let mut profile = SynthesisProfile::generate(
        &cs,
        10,
        3.0,
        1.0,
        &dial,
        &mut stream_rng(77, streams::PROFILE),
    )
    .unwrap();
    profile.dur_min = 2;
    profile.dur_max = 4;

    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(
        &cs,
        &profile,
        CorpusCounts {
            positives_per_command: 30,
            negatives: 60,
            near_miss_fraction: 0.0,
        },
        &[],
        77,
        dir.path(),
    )
    .unwrap();

    // Training must not touch its inputs.
    let before: Vec<Vec<u8>> = manifest
        .records
        .iter()
        .map(|r| std::fs::read(manifest.feature_path(r)).unwrap())
        .collect();

    let config = ModelConfig {
        num_blocks: 2,
        kernel_size: 3,
        channels: 16,
        dilations: vec![1, 2],
        causal_blocks: Default::default(),
        input_dim: 10,
        output_units: cs.num_output_units(),
        dropout_rate: 0.05,
    };
    let train_config = TrainConfig {
        stage: Stage::Ce,
        epochs: 12,
        learning_rate: 1e-3,
        batch_size: 16,
        confusion: None,
        loss: MsceLossConfig::default(),
        seed: 77,
        checkpoint_every: 4,
        average_last_k: 2,
    };
    let mut sink = std::io::sink();
    let (params, summary) = run_training(
        &manifest,
        &cs,
        &config,
        None,
        &train_config,
        None,
        &mut sink,
    )
    .unwrap();
    assert!(summary.epoch_ce.last().unwrap() < &0.4, "{:?}", summary.epoch_ce);

    let after: Vec<Vec<u8>> = manifest
        .records
        .iter()
        .map(|r| std::fs::read(manifest.feature_path(r)).unwrap())
        .collect();
    assert_eq!(before, after, "training mutated input files");

    Trained {
        cs,
        profile,
        params,
        config,
    }
}

#[test]
fn streaming_decode_on_trained_model() {
    let t = train_toy();
    let graph = build_graph(&t.cs).unwrap();
    let decoder_config = DecoderConfig {
        beam: 12.0,
        trigger_threshold: -1.0,
        blank_absorb: true,
        max_tokens: 2000,
    };

    // Fresh utterances of the non-dialed commands decode to exactly one
    // event carrying the right command.
    for cmd_id in 4..8 {
        let cmd = &t.cs.commands[cmd_id];
        let mut rng = stream_rng(5000 + cmd_id as u64, streams::SYNTH);
        let (features, _) =
            synth_utterance(&cmd.states, t.cs.blank_id(), &t.profile, &mut rng, 1.0);
        let (out, _) = forward(&t.params, &t.config, &features, Mode::Infer, None).unwrap();
        let mut decoder = decoder_new(&graph, decoder_config).unwrap();
        let events = decode_utterance(&mut decoder, &out.log_post).unwrap();
        assert_eq!(events.len(), 1, "command {cmd_id}: {events:?}");
        assert_eq!(events[0].command, cmd_id);
        assert_eq!(events[0].states_path, cmd.states);

        // The peak decision agrees with the streaming trigger.
        let mut decoder = decoder_new(&graph, decoder_config).unwrap();
        let peak = peak_decode(&mut decoder, &out.log_post).unwrap().unwrap();
        assert_eq!(peak.command, cmd_id);
        assert!(peak.score >= events[0].score - 1e-12);
    }

    // A concatenation of two command utterances triggers twice, in order.
    let (a_cmd, b_cmd) = (4usize, 6usize);
    let mut rng = stream_rng(6000, streams::SYNTH);
    let (fa, _) = synth_utterance(
        &t.cs.commands[a_cmd].states,
        t.cs.blank_id(),
        &t.profile,
        &mut rng,
        1.0,
    );
    let (fb, _) = synth_utterance(
        &t.cs.commands[b_cmd].states,
        t.cs.blank_id(),
        &t.profile,
        &mut rng,
        1.0,
    );
    let mut joined = Matrix::zeros(fa.rows() + fb.rows(), fa.cols());
    for r in 0..fa.rows() {
        joined.row_mut(r).copy_from_slice(fa.row(r));
    }
    for r in 0..fb.rows() {
        joined.row_mut(fa.rows() + r).copy_from_slice(fb.row(r));
    }
    let (out, _) = forward(&t.params, &t.config, &joined, Mode::Infer, None).unwrap();
    let mut decoder = decoder_new(&graph, decoder_config).unwrap();
    let events = decode_utterance(&mut decoder, &out.log_post).unwrap();
    assert_eq!(events.len(), 2, "{events:?}");
    assert_eq!(events[0].command, a_cmd);
    assert_eq!(events[1].command, b_cmd);
    assert!(events[0].end_frame < events[1].end_frame);

    // Noise-only input produces no events at a tight threshold.
    let mut rng = stream_rng(6001, streams::SYNTH);
    let noise = Matrix::from_fn(25, 10, |_, _| rng.gen_range(-1.0..1.0));
    let (out, _) = forward(&t.params, &t.config, &noise, Mode::Infer, None).unwrap();
    let tight = DecoderConfig {
        trigger_threshold: -0.2,
        ..decoder_config
    };
    let mut decoder = decoder_new(&graph, tight).unwrap();
    let events = decode_utterance(&mut decoder, &out.log_post).unwrap();
    assert!(events.is_empty(), "{events:?}");
}
