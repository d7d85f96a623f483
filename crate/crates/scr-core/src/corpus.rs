//! Synthetic corpus generation and dataset I/O.
//!
//! Utterances are parametric: each emission state owns a mean vector; frames
//! are that mean plus diagonal gaussian noise, with noise-only padding on
//! both ends. Frame-level state labels are therefore known by construction.
//! A confusability dial places chosen phone pairs at a controlled Euclidean
//! distance so evaluation sets contain genuinely confusable commands.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lexicon::CommandSet;
use crate::numerics::{stream_rng, streams, Matrix};

/// Per-state gaussian synthesis parameters.
#[derive(Debug, Clone)]
pub struct SynthesisProfile {
    /// One mean vector per emission state (blank/silence is implicit zero).
    state_means: Matrix,
    pub feature_dim: usize,
    /// Diagonal std of state frames.
    pub feature_std: f64,
    /// Frames per state ~ uniform[dur_min, dur_max].
    pub dur_min: usize,
    pub dur_max: usize,
    /// Leading/trailing noise-only padding ~ uniform[0, pad_max] frames.
    pub pad_max: usize,
    /// Std of the noise-only padding frames.
    pub noise_std: f64,
}

impl SynthesisProfile {
    /// Draws state means: a gaussian base mean per phone (scaled by
    /// `mean_scale`), per-state jitter of `state_jitter`, and for every
    /// `(a, b, distance)` dial entry phone b's states are placed exactly
    /// `distance` away from phone a's along one random direction.
    pub fn generate(
        command_set: &CommandSet,
        feature_dim: usize,
        mean_scale: f64,
        state_jitter: f64,
        confusable: &[(String, String, f64)],
        rng: &mut ChaCha8Rng,
    ) -> Result<SynthesisProfile> {
        let phones = &command_set.phone_inventory;
        let s = command_set.states_per_phone;
        let num_states = command_set.num_states();

        let mut phone_means = Matrix::zeros(phones.len(), feature_dim);
        for p in 0..phones.len() {
            let row = phone_means.row_mut(p);
            for v in row.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = mean_scale * g;
            }
        }
        let mut jitter = Matrix::zeros(num_states, feature_dim);
        for st in 0..num_states {
            let row = jitter.row_mut(st);
            for v in row.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = state_jitter * g;
            }
        }

        let mut state_means = Matrix::zeros(num_states, feature_dim);
        for p in 0..phones.len() {
            for k in 0..s {
                let st = p * s + k;
                for f in 0..feature_dim {
                    state_means[(st, f)] = phone_means[(p, f)] + jitter[(st, f)];
                }
            }
        }

        // Confusability dial: b's states copy a's, displaced by `distance`
        // along a random unit direction (one direction per pair, so every
        // corresponding state pair sits at exactly that distance).
        for (a, b, distance) in confusable {
            let pa = phones
                .iter()
                .position(|p| p == a)
                .ok_or_else(|| Error::Config(format!("dial phone '{a}' not in inventory")))?;
            let pb = phones
                .iter()
                .position(|p| p == b)
                .ok_or_else(|| Error::Config(format!("dial phone '{b}' not in inventory")))?;
            let mut dir: Vec<f64> = (0..feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut dir {
                *v /= norm;
            }
            for k in 0..s {
                let (src, dst) = (pa * s + k, pb * s + k);
                for f in 0..feature_dim {
                    state_means[(dst, f)] = state_means[(src, f)] + distance * dir[f];
                }
            }
        }

        Ok(SynthesisProfile {
            state_means,
            feature_dim,
            feature_std: 1.0,
            dur_min: 2,
            dur_max: 6,
            pad_max: 5,
            noise_std: 1.0,
        })
    }

    pub fn state_mean(&self, state: usize) -> &[f64] {
        self.state_means.row(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_std < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("negative std in synthesis profile".into()));
        }
        if self.dur_min < 1 || self.dur_min > self.dur_max {
            return Err(Error::Config(format!(
                "bad duration range [{}, {}]",
                self.dur_min, self.dur_max
            )));
        }
        Ok(())
    }
}

/// Synthesizes one utterance for a state sequence. Returns the feature
/// matrix and per-frame emission-state labels; padding frames are labeled
/// with the blank id.
pub fn synth_utterance(
    states: &[usize],
    blank_id: usize,
    profile: &SynthesisProfile,
    rng: &mut ChaCha8Rng,
    noise_std: f64,
) -> (Matrix, Vec<usize>) {
    let lead = rng.gen_range(0..=profile.pad_max);
    let trail = rng.gen_range(0..=profile.pad_max);
    let durations: Vec<usize> = states
        .iter()
        .map(|_| rng.gen_range(profile.dur_min..=profile.dur_max))
        .collect();
    let t_total = lead + durations.iter().sum::<usize>() + trail;

    fn pad_frame(
        features: &mut Matrix,
        frame_states: &mut Vec<usize>,
        t: &mut usize,
        blank_id: usize,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let row = features.row_mut(*t);
        for v in row.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = noise_std * g;
        }
        frame_states.push(blank_id);
        *t += 1;
    }

    let mut features = Matrix::zeros(t_total, profile.feature_dim);
    let mut frame_states = Vec::with_capacity(t_total);
    let mut t = 0;
    for _ in 0..lead {
        pad_frame(&mut features, &mut frame_states, &mut t, blank_id, noise_std, rng);
    }
    for (&state, &dur) in states.iter().zip(&durations) {
        for _ in 0..dur {
            let mean = profile.state_means.row(state);
            let row = features.row_mut(t);
            for (v, &m) in row.iter_mut().zip(mean) {
                let g: f64 = rng.sample(StandardNormal);
                *v = m + profile.feature_std * g;
            }
            frame_states.push(state);
            t += 1;
        }
    }
    for _ in 0..trail {
        pad_frame(&mut features, &mut frame_states, &mut t, blank_id, noise_std, rng);
    }
    debug_assert_eq!(t, t_total);
    (features, frame_states)
}

/// Random non-command state babble: a state sequence that never equals any
/// command's expansion. With probability `near_miss_fraction` the draw is a
/// near-miss — a command's state sequence with one to three positions
/// substituted — and a uniform random sequence otherwise. Near-misses give
/// evaluation sets command-like negative material (real non-command speech
/// contains such stretches); training negatives should stay at fraction 0,
/// since their all-blank frame targets would otherwise fight the states they
/// share with real commands.
pub fn sample_babble(
    command_set: &CommandSet,
    near_miss_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let num_states = command_set.num_states();
    let max_len = command_set.max_command_states().max(3);
    loop {
        let babble: Vec<usize> = if !rng.gen_bool(near_miss_fraction) {
            let len = rng.gen_range(2..=max_len);
            (0..len).map(|_| rng.gen_range(0..num_states)).collect()
        } else {
            let cmd = &command_set.commands[rng.gen_range(0..command_set.commands.len())];
            let mut states = cmd.states.clone();
            // At least two substituted positions: one-edit misses score
            // nearly as well as the command itself once self-loops absorb
            // blank, which would make FAR and FRR inseparable.
            let hi = 3.min(states.len()).max(2);
            let edits = rng.gen_range(2..=hi).min(states.len());
            let mut positions: Vec<usize> = (0..states.len()).collect();
            for i in 0..edits {
                let j = rng.gen_range(i..positions.len());
                positions.swap(i, j);
                states[positions[i]] = rng.gen_range(0..num_states);
            }
            states
        };
        if !command_set.commands.iter().any(|c| c.states == babble) {
            return babble;
        }
    }
}

/// Adds gaussian noise scaled so that 10·log10(signal/noise power) equals
/// `snr_db` exactly (the drawn noise is renormalized to the exact target
/// power). `f64::INFINITY` means no noise. Power is the mean squared value
/// over all cells; zero-power input is an error.
pub fn augment_noise(features: &Matrix, rng: &mut ChaCha8Rng, snr_db: f64) -> Result<Matrix> {
    if !snr_db.is_finite() {
        if snr_db == f64::INFINITY {
            return Ok(features.clone());
        }
        return Err(Error::Config(format!("bad snr_db {snr_db}")));
    }
    let n = features.as_slice().len();
    let signal_power = features.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
    if signal_power <= 0.0 {
        return Err(Error::ZeroPower);
    }
    let target_power = signal_power / 10f64.powf(snr_db / 10.0);
    let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let raw_power = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = (target_power / raw_power).sqrt();
    let mut out = features.clone();
    for (o, nz) in out.as_mut_slice().iter_mut().zip(&noise) {
        *o += scale * nz;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Feature file: little-endian, magic "FEAT", u32 version = 1, u32 T, u32 F,
// then T*F f32 row-major; optionally magic "STAT", u32 T, T u32 frame states.
// ---------------------------------------------------------------------------

pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";
pub const STATES_MAGIC: [u8; 4] = *b"STAT";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(
    path: impl AsRef<Path>,
    features: &Matrix,
    frame_states: Option<&[usize]>,
) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::Invalid("refusing to write empty features".into()));
    }
    if let Some(states) = frame_states {
        if states.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} frame states for {} frames",
                states.len(),
                features.rows()
            )));
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(features.rows() as u32).to_le_bytes())?;
    w.write_all(&(features.cols() as u32).to_le_bytes())?;
    for &v in features.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    if let Some(states) = frame_states {
        w.write_all(&STATES_MAGIC)?;
        w.write_all(&(states.len() as u32).to_le_bytes())?;
        for &s in states {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(what.to_string()))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(Matrix, Option<Vec<usize>>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "feature magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "feature version")?;
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion {
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let t = read_u32(&mut r, "frame count")? as usize;
    let f = read_u32(&mut r, "feature dim")? as usize;
    let mut data = Vec::with_capacity(t * f);
    let mut b = [0u8; 4];
    for _ in 0..t * f {
        read_exact(&mut r, &mut b, "feature data")?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    let features = Matrix::from_vec(t, f, data);

    // Optional trailing frame-state block.
    let mut stat_magic = [0u8; 4];
    match r.read_exact(&mut stat_magic) {
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok((features, None)),
        Err(e) => return Err(e.into()),
        Ok(()) => {}
    }
    if stat_magic != STATES_MAGIC {
        return Err(Error::BadMagic {
            expected: STATES_MAGIC,
            found: stat_magic,
        });
    }
    let st = read_u32(&mut r, "state count")? as usize;
    if st != t {
        return Err(Error::ShapeMismatch(format!(
            "{st} frame states for {t} frames"
        )));
    }
    let mut states = Vec::with_capacity(st);
    for _ in 0..st {
        states.push(read_u32(&mut r, "frame states")? as usize);
    }
    Ok((features, Some(states)))
}

// ---------------------------------------------------------------------------
// Manifest: JSON-lines; first line a header object, then one record per line.
// Feature paths are relative to the manifest's directory.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestHeader {
    pub feature_dim: usize,
    pub inventory_hash: String,
    pub states_per_phone: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub path: String,
    /// Command id; `None` marks a negative (non-command) utterance.
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<UtteranceRecord>,
    /// Directory feature paths are resolved against (the manifest's parent).
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn feature_path(&self, record: &UtteranceRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    /// Loads a record's features, enforcing the header dimension and the
    /// frame-state length invariant.
    pub fn load_features(&self, record: &UtteranceRecord) -> Result<(Matrix, Option<Vec<usize>>)> {
        let (features, states) = read_features(self.feature_path(record))?;
        if features.cols() != self.header.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} feature columns, manifest says {}",
                record.utt_id,
                features.cols(),
                self.header.feature_dim
            )));
        }
        Ok((features, states))
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &manifest.header)?;
    w.write_all(b"\n")?;
    for rec in &manifest.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Hash of a manifest file's bytes; reports carry it so comparisons can
/// verify both sides evaluated the same data.
pub fn manifest_file_hash(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(32);
    for byte in &digest[..16] {
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(hex)
}

/// Reads a manifest and verifies utt_id uniqueness and that every referenced
/// feature file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Truncated("manifest header".into()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)?;
        if !seen.insert(rec.utt_id.clone()) {
            return Err(Error::Invalid(format!("duplicate utt_id '{}'", rec.utt_id)));
        }
        let full = base_dir.join(&rec.path);
        if !full.is_file() {
            return Err(Error::MissingFile(full.display().to_string()));
        }
        records.push(rec);
    }
    Ok(Manifest {
        header,
        records,
        base_dir,
    })
}

/// How many utterances to synthesize and how the negatives are composed.
#[derive(Debug, Clone, Copy)]
pub struct CorpusCounts {
    pub positives_per_command: usize,
    pub negatives: usize,
    /// Fraction of negatives drawn as command near-misses (see
    /// [`sample_babble`]).
    pub near_miss_fraction: f64,
}

/// Generates a corpus: `positives_per_command` utterances per command (in id
/// order), then `negatives` babble utterances, optionally one extra noisy
/// copy of every positive per entry of `augment_snrs_db`. Deterministic in
/// (command set, profile, counts, seed): utterance i draws from stream
/// SYNTH + i. Writes `utt_{index:06}.feat` files plus `manifest.jsonl` into
/// `out_dir` and returns the manifest.
pub fn synth_corpus(
    command_set: &CommandSet,
    profile: &SynthesisProfile,
    counts: CorpusCounts,
    augment_snrs_db: &[f64],
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    profile.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let blank = command_set.blank_id();
    let mut records = Vec::new();
    let mut index = 0usize;

    let emit = |records: &mut Vec<UtteranceRecord>,
                    features: &Matrix,
                    states: Option<&[usize]>,
                    label: Option<usize>,
                    snr_db: Option<f64>,
                    index: &mut usize|
     -> Result<()> {
        let name = format!("utt_{:06}.feat", *index);
        write_features(out_dir.join(&name), features, states)?;
        records.push(UtteranceRecord {
            utt_id: format!("utt_{:06}", *index),
            path: name,
            label,
            snr_db,
        });
        *index += 1;
        Ok(())
    };

    for cmd in &command_set.commands {
        for _ in 0..counts.positives_per_command {
            let mut rng = stream_rng(seed, streams::SYNTH + index as u64);
            let (features, states) =
                synth_utterance(&cmd.states, blank, profile, &mut rng, profile.noise_std);
            emit(&mut records, &features, Some(&states), Some(cmd.id), None, &mut index)?;
            for &snr in augment_snrs_db {
                let mut aug_rng = stream_rng(seed, streams::AUGMENT + index as u64);
                let noisy = augment_noise(&features, &mut aug_rng, snr)?;
                emit(&mut records, &noisy, Some(&states), Some(cmd.id), Some(snr), &mut index)?;
            }
        }
    }
    for _ in 0..counts.negatives {
        let mut rng = stream_rng(seed, streams::SYNTH + index as u64);
        let babble = sample_babble(command_set, counts.near_miss_fraction, &mut rng);
        let (features, _) = synth_utterance(&babble, blank, profile, &mut rng, profile.noise_std);
        emit(&mut records, &features, None, None, None, &mut index)?;
    }

    let manifest = Manifest {
        header: ManifestHeader {
            feature_dim: profile.feature_dim,
            inventory_hash: command_set.inventory_hash(),
            states_per_phone: command_set.states_per_phone,
        },
        records,
        base_dir: out_dir.to_path_buf(),
    };
    write_manifest(out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

/// The built-in toy setup: eight two-word commands over a small Mandarin-ish
/// phone inventory, with two deliberately confusable command pairs
/// (kai ji / guan ji and sheng wen / jiang wen) driven by four dialed phone
/// pairs. All commands expand to four phones, so their state chains have
/// equal length.
pub struct ToyPreset {
    pub commands: &'static str,
    pub lexicon: &'static str,
    /// Phone pairs the confusability dial pulls together.
    pub confusable_phone_pairs: &'static [(&'static str, &'static str)],
}

pub fn toy_preset() -> ToyPreset {
    ToyPreset {
        commands: "\
kai ji
guan ji
sheng wen
jiang wen
zhi re
zhi leng
song feng
chu shi
",
        lexicon: "\
kai\tk ai
guan\tg uan
ji\tj i
sheng\tsh eng
jiang\tj iang
wen\tw en
zhi\tzh i
re\tr e
leng\tl eng
song\ts ong
feng\tf eng
chu\tch u
shi\tsh i
",
        confusable_phone_pairs: &[("k", "g"), ("ai", "uan"), ("sh", "j"), ("eng", "iang")],
    }
}

/// Formats the dial entries for [`SynthesisProfile::generate`] at one
/// common distance.
pub fn dial_at_distance(pairs: &[(&str, &str)], distance: f64) -> Vec<(String, String, f64)> {
    pairs
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string(), distance))
        .collect()
}

/// Inspection dump of a profile's pairwise phone-mean distances (debugging
/// aid for the confusability dial).
pub fn format_state_distances(profile: &SynthesisProfile, command_set: &CommandSet) -> String {
    let s = command_set.states_per_phone;
    let mut out = String::new();
    let phones = &command_set.phone_inventory;
    for a in 0..phones.len() {
        for b in (a + 1)..phones.len() {
            let mut d2 = 0.0;
            for k in 0..s {
                let (ra, rb) = (
                    profile.state_means.row(a * s + k),
                    profile.state_means.row(b * s + k),
                );
                d2 += ra
                    .iter()
                    .zip(rb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
            let _ = writeln!(
                out,
                "{} {} {:.3}",
                phones[a],
                phones[b],
                (d2 / s as f64).sqrt()
            );
        }
    }
    out
}
