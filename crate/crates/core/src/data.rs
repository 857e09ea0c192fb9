//! Synthetic multichannel datasets and their on-disk format.
//!
//! A dataset directory holds `manifest.json`, `epochs.f32` (little-endian,
//! index order `[trial][epoch][channel][sample]`) and `labels.u8`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::EpochSequence;
use crate::random::random_stiefel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCHS_FILE: &str = "epochs.f32";
pub const LABELS_FILE: &str = "labels.u8";

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("split ratios must be nonnegative and sum to 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_trials: usize,
    pub channels: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub sample_rate: f64,
    pub num_classes: usize,
    pub seed: u64,
    /// Trials per class.
    pub class_counts: Vec<usize>,
    pub splits: SplitRatios,
}

impl DatasetManifest {
    /// Desk-scale default: 400 trials of 8 channels × 6 epochs × 64 samples at
    /// 128 Hz, two balanced classes.
    pub fn new(num_trials: usize, channels: usize, epochs: usize, samples: usize, num_classes: usize, seed: u64) -> Self {
        let class_counts = if num_classes == 0 {
            Vec::new()
        } else {
            (0..num_classes)
                .map(|c| num_trials / num_classes + usize::from(c < num_trials % num_classes))
                .collect()
        };
        Self {
            format_version: FORMAT_VERSION,
            num_trials,
            channels,
            epochs,
            samples_per_epoch: samples,
            sample_rate: 128.0,
            num_classes,
            seed,
            class_counts,
            splits: SplitRatios::default(),
        }
    }

    pub fn default_desk(seed: u64) -> Self {
        Self::new(400, 8, 6, 64, 2, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::IncompatibleFormat(format!(
                "dataset format version {} (supported: {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (name, v) in [
            ("num_trials", self.num_trials),
            ("channels", self.channels),
            ("epochs", self.epochs),
            ("samples_per_epoch", self.samples_per_epoch),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(invalid(format!("manifest: {name} must be positive")));
            }
        }
        if self.num_classes > 256 {
            return Err(invalid("manifest: at most 256 classes fit the label format"));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(invalid("manifest: sample_rate must be positive"));
        }
        if self.class_counts.len() != self.num_classes || self.class_counts.iter().sum::<usize>() != self.num_trials {
            return Err(invalid("manifest: class_counts must list one count per class summing to num_trials"));
        }
        self.splits.validate()
    }

    pub fn trial_values(&self) -> usize {
        self.epochs * self.channels * self.samples_per_epoch
    }
}

/// Generative description of each class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Per-class `N × K` mixing of `K` oscillators, used before the switch epoch.
    pub mixing: Vec<DMatrix<f64>>,
    /// Per-class mixing used from the switch epoch on.
    pub switched_mixing: Vec<DMatrix<f64>>,
    /// Per-class, per-oscillator frequency band `(low, high)` in Hz.
    pub bands: Vec<Vec<(f64, f64)>>,
    /// Per-class epoch index at which the mixing changes; `epochs` or more
    /// means never.
    pub switch_epoch: Vec<usize>,
    pub noise: f64,
}

fn full_column_rank(m: &DMatrix<f64>) -> bool {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    max > 0.0 && sv.iter().all(|&s| s > 1e-10 * max)
}

fn class_switch(c: usize, classes: usize, epochs: usize) -> usize {
    (((c + 1) * epochs) / (classes + 1)).clamp(1, epochs.saturating_sub(1).max(1))
}

fn default_bands(c: usize, oscillators: usize, nyquist: f64) -> Vec<(f64, f64)> {
    (0..oscillators)
        .map(|k| {
            let lo = (4.0 + 6.0 * k as f64 + 2.0 * c as f64) % (0.8 * nyquist);
            (lo.max(1.0), lo.max(1.0) + 3.0)
        })
        .collect()
}

/// Random channel permutation applied to the rows of a mixing matrix.
fn permute_rows<R: Rng + ?Sized>(rng: &mut R, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut perm: Vec<usize> = (0..m.nrows()).collect();
    perm.shuffle(rng);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)])
}

impl SynthSpec {
    /// Classes with independent random orthonormal mixing, class-shifted
    /// bands and class-dependent switch epochs.
    pub fn default_for(manifest: &DatasetManifest) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed ^ 0x5eed_5eed);
        let n = manifest.channels;
        let k = (n / 2).max(1);
        let nyquist = manifest.sample_rate / 2.0;
        let mixing: Vec<DMatrix<f64>> = (0..manifest.num_classes).map(|_| random_stiefel(&mut rng, n, k)).collect();
        let switched_mixing = mixing.iter().map(|m| permute_rows(&mut rng, m)).collect();
        Self {
            mixing,
            switched_mixing,
            bands: (0..manifest.num_classes).map(|c| default_bands(c, k, nyquist)).collect(),
            switch_epoch: (0..manifest.num_classes)
                .map(|c| class_switch(c, manifest.num_classes, manifest.epochs))
                .collect(),
            noise: 0.1,
        }
    }

    /// Variant where every channel carries its own independent oscillator and
    /// classes differ only in which channels share a frequency band. Per-epoch
    /// covariances are near-diagonal for every class, so the label lives in the
    /// spectral topology that the graph view sees directly.
    pub fn alignment_sensitive(manifest: &DatasetManifest) -> Self {
        let n = manifest.channels;
        let nyquist = manifest.sample_rate / 2.0;
        let low = (0.12 * nyquist, 0.17 * nyquist);
        let high = (0.32 * nyquist, 0.37 * nyquist);
        let classes = manifest.num_classes;
        let identity = DMatrix::identity(n, n);
        // Class c groups channels into runs of length 2^(c+1)/2 alternating
        // between the two bands.
        let bands = (0..classes)
            .map(|c| {
                let run = 1usize << (c % usize::BITS as usize).min(n.max(1).ilog2() as usize);
                (0..n).map(|i| if (i / run) % 2 == 0 { low } else { high }).collect()
            })
            .collect();
        Self {
            mixing: vec![identity.clone(); classes],
            switched_mixing: vec![identity; classes],
            bands,
            switch_epoch: vec![manifest.epochs; classes],
            noise: 10.0,
        }
    }

    pub fn oscillators(&self) -> usize {
        self.mixing.first().map_or(0, |m| m.ncols())
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let c = manifest.num_classes;
        if self.mixing.len() != c || self.switched_mixing.len() != c || self.bands.len() != c || self.switch_epoch.len() != c {
            return Err(invalid(format!("synth spec must describe {c} classes")));
        }
        let k = self.oscillators();
        if k == 0 {
            return Err(invalid("synth spec needs at least one oscillator"));
        }
        for m in self.mixing.iter().chain(&self.switched_mixing) {
            if m.shape() != (manifest.channels, k) {
                return Err(invalid(format!("mixing matrices must be {}x{k}", manifest.channels)));
            }
            if !full_column_rank(m) {
                return Err(invalid("mixing matrix is rank deficient"));
            }
        }
        let nyquist = manifest.sample_rate / 2.0;
        for bands in &self.bands {
            if bands.len() != k {
                return Err(invalid("one band per oscillator required"));
            }
            for &(lo, hi) in bands {
                if !(lo > 0.0 && hi >= lo && hi < nyquist) {
                    return Err(invalid(format!("band ({lo}, {hi}) Hz outside (0, {nyquist}) Hz")));
                }
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(invalid("noise level must be nonnegative"));
        }
        Ok(())
    }
}

/// Trials in memory with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<EpochSequence>,
    pub labels: Vec<usize>,
}

const COMPONENTS_PER_OSCILLATOR: usize = 3;

fn synth_trial<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &SynthSpec,
    manifest: &DatasetManifest,
    class: usize,
) -> EpochSequence {
    let (l, t_len) = (manifest.samples_per_epoch, manifest.epochs);
    let k = spec.oscillators();
    let dt = 1.0 / manifest.sample_rate;
    // Each oscillator is a few random sinusoids inside its band, with a
    // per-trial gain.
    let comps: Vec<Vec<(f64, f64, f64)>> = spec.bands[class]
        .iter()
        .map(|&(lo, hi)| {
            let gain = 1.0 + 0.2 * (rng.gen::<f64>() - 0.5);
            (0..COMPONENTS_PER_OSCILLATOR)
                .map(|_| {
                    let f = lo + (hi - lo) * rng.gen::<f64>();
                    let phase = std::f64::consts::TAU * rng.gen::<f64>();
                    (f, phase, gain * (0.5 + rng.gen::<f64>()))
                })
                .collect()
        })
        .collect();
    let epochs = (0..t_len)
        .map(|t| {
            let mixing = if t >= spec.switch_epoch[class] {
                &spec.switched_mixing[class]
            } else {
                &spec.mixing[class]
            };
            let osc = DMatrix::from_fn(k, l, |j, s| {
                let time = (t * l + s) as f64 * dt;
                comps[j]
                    .iter()
                    .map(|&(f, ph, a)| a * (std::f64::consts::TAU * f * time + ph).sin())
                    .sum::<f64>()
            });
            let mut x = mixing * osc;
            if spec.noise > 0.0 {
                for v in x.iter_mut() {
                    *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            // Values are stored as f32; round here so memory and disk agree.
            x.map(|v| v as f32 as f64)
        })
        .collect();
    EpochSequence::new(epochs).expect("synthetic epochs share one shape")
}

/// Generates a dataset in memory, deterministically from `manifest.seed`.
pub fn synthesize(spec: &SynthSpec, manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    spec.validate(manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut labels: Vec<usize> = manifest
        .class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &count)| std::iter::repeat(c).take(count))
        .collect();
    labels.shuffle(&mut rng);
    let trials = labels.iter().map(|&c| synth_trial(&mut rng, spec, manifest, c)).collect();
    Ok(Dataset {
        manifest: manifest.clone(),
        trials,
        labels,
    })
}

/// Generates a dataset and writes it to `dir`.
pub fn generate(spec: &SynthSpec, manifest: &DatasetManifest, dir: &Path) -> Result<Dataset> {
    let data = synthesize(spec, manifest)?;
    save(&data, dir)?;
    Ok(data)
}

pub fn save(data: &Dataset, dir: &Path) -> Result<()> {
    data.manifest.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&data.manifest).map_err(|e| invalid(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    let mut w = BufWriter::new(File::create(dir.join(EPOCHS_FILE))?);
    for trial in &data.trials {
        for epoch in trial.epochs() {
            for c in 0..epoch.nrows() {
                for s in 0..epoch.ncols() {
                    w.write_all(&(epoch[(c, s)] as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    let labels: Vec<u8> = data.labels.iter().map(|&y| y as u8).collect();
    fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptData(format!("manifest.json: {e}")))?;
    if let Some(v) = value.get("format_version").and_then(|v| v.as_u64()) {
        if v != u64::from(FORMAT_VERSION) {
            return Err(Error::IncompatibleFormat(format!(
                "dataset format version {v} (supported: {FORMAT_VERSION})"
            )));
        }
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::CorruptData(format!("manifest.json: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Streams trials from a dataset directory in manifest order.
pub struct TrialReader {
    manifest: DatasetManifest,
    epochs: BufReader<File>,
    labels: Vec<u8>,
    next: usize,
}

impl TrialReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let epochs_path: PathBuf = dir.join(EPOCHS_FILE);
        let file = File::open(&epochs_path)?;
        let expected = (manifest.num_trials * manifest.trial_values() * 4) as u64;
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(Error::CorruptData(format!(
                "{EPOCHS_FILE} holds {actual} bytes, manifest implies {expected}"
            )));
        }
        let labels = fs::read(dir.join(LABELS_FILE))?;
        if labels.len() != manifest.num_trials {
            return Err(Error::CorruptData(format!(
                "{LABELS_FILE} holds {} labels, manifest declares {} trials",
                labels.len(),
                manifest.num_trials
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| usize::from(y) >= manifest.num_classes) {
            return Err(Error::CorruptData(format!("label {y} out of range")));
        }
        Ok(Self {
            manifest,
            epochs: BufReader::new(file),
            labels,
            next: 0,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn read_trial(&mut self) -> Result<EpochSequence> {
        let m = &self.manifest;
        let (n, l) = (m.channels, m.samples_per_epoch);
        let mut buf = vec![0u8; n * l * 4];
        let mut epochs = Vec::with_capacity(m.epochs);
        for _ in 0..m.epochs {
            self.epochs.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::CorruptData(format!("{EPOCHS_FILE} is truncated")),
                _ => Error::Io(e),
            })?;
            let vals: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            epochs.push(DMatrix::from_row_slice(n, l, &vals));
        }
        EpochSequence::new(epochs)
    }
}

impl Iterator for TrialReader {
    type Item = Result<(EpochSequence, usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.num_trials {
            return None;
        }
        let label = usize::from(self.labels[self.next]);
        self.next += 1;
        Some(self.read_trial().map(|t| (t, label)))
    }
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let reader = TrialReader::open(dir)?;
    let manifest = reader.manifest().clone();
    let mut trials = Vec::with_capacity(manifest.num_trials);
    let mut labels = Vec::with_capacity(manifest.num_trials);
    for item in reader {
        let (t, y) = item?;
        trials.push(t);
        labels.push(y);
    }
    Ok(Dataset {
        manifest,
        trials,
        labels,
    })
}

/// Index sets of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified partition: each class is shuffled with `seed` and divided by
/// the ratios, so class proportions carry over to every part.
pub fn stratified_split(labels: &[usize], ratios: &SplitRatios, seed: u64) -> Result<Split> {
    ratios.validate()?;
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = ((n * ratios.train).round() as usize).min(idx.len());
        let n_val = ((n * ratios.val).round() as usize).min(idx.len() - n_train);
        split.train.extend(&idx[..n_train]);
        split.val.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
