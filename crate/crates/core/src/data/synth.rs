//! Deterministic synthetic datasets shaped like MOSI / CH-SIMS records.
//!
//! Each modality sequence hides two informative tokens among distractors:
//! a *focus* token carrying the modality's sentiment `s` and an *onset*
//! token carrying `r`. A token is addressed by a random key vector stored in
//! its leading feature dims; the value lives in the channel right after the
//! key. The paired explanation (comments for text) points at those tokens:
//! explanation row 0 repeats the onset key and the remaining rows repeat the
//! focus key. The label is
//!
//! ```text
//! y = text·s_t + audio·s_a + video·s_v + onset·(r_a + r_v) + noise·ε
//! ```
//!
//! clamped to the label scale (divided by 3 first for the one-scale).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{ExplanationState, Manifest, RecordEntry, Splits};
use super::record::{write_feature_file, FeatureDims, FeatureRecord, LabelScale};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSignal {
    pub text: f64,
    pub audio: f64,
    pub video: f64,
    pub onset: f64,
}

impl PlantedSignal {
    pub fn strong() -> Self {
        Self {
            text: 0.5,
            audio: 1.0,
            video: 1.0,
            onset: 0.6,
        }
    }

    pub fn none() -> Self {
        Self {
            text: 0.0,
            audio: 0.0,
            video: 0.0,
            onset: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dims: FeatureDims,
    /// Rows per explanation / comment embedding.
    pub expl_len: usize,
    /// Inclusive range of raw modality sequence lengths.
    pub min_len: usize,
    pub max_len: usize,
    pub key_dim: usize,
    pub key_norm: f64,
    /// Upper bound on the cosine between a distractor key and the focus or onset key.
    pub max_key_cos: f64,
    pub feature_noise: f64,
    pub signal: PlantedSignal,
    pub label_noise: f64,
    pub scale: LabelScale,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_val: 32,
            n_test: 32,
            dims: FeatureDims {
                text: 8,
                audio: 8,
                video: 8,
            },
            expl_len: 8,
            min_len: 40,
            max_len: 60,
            key_dim: 6,
            key_norm: 3.0,
            max_key_cos: 0.3,
            feature_noise: 0.1,
            signal: PlantedSignal::strong(),
            label_noise: 0.02,
            scale: LabelScale::Three,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(Error::Config("synthetic dataset needs at least one sample".into()));
        }
        let d = self.dims;
        if self.key_dim == 0 || d.text < self.key_dim + 1 || d.audio < self.key_dim + 1 || d.video < self.key_dim + 1 {
            return Err(Error::Config(format!(
                "feature widths {d:?} must exceed key_dim {}",
                self.key_dim
            )));
        }
        if !(self.max_key_cos > 0.0 && self.max_key_cos <= 1.0) {
            return Err(Error::Config("max_key_cos must lie in (0, 1]".into()));
        }
        if self.expl_len < 2 {
            return Err(Error::Config("expl_len must be at least 2 (onset row + focus row)".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sequence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Hidden per-record quantities the label was built from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedFactors {
    pub text: f64,
    pub audio: f64,
    pub video: f64,
    pub onset_audio: f64,
    pub onset_video: f64,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub records: Vec<FeatureRecord>,
    pub factors: Vec<PlantedFactors>,
}

struct Modality {
    features: Tensor<f32>,
    explanation: Tensor<f32>,
    focus: f64,
    onset: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Random key of norm `key_norm` whose cosine with every key in `avoid` stays below `max_key_cos`.
fn random_key(rng: &mut ChaCha8Rng, spec: &SynthSpec, avoid: &[&Vec<f64>]) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..spec.key_dim).map(|_| gaussian(rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        let key: Vec<f64> = raw.iter().map(|v| v / norm * spec.key_norm).collect();
        let clear = avoid.iter().all(|a| {
            let dot: f64 = a.iter().zip(&key).map(|(x, y)| x * y).sum();
            dot / (spec.key_norm * spec.key_norm) < spec.max_key_cos
        });
        if clear {
            return key;
        }
    }
}

fn modality(rng: &mut ChaCha8Rng, spec: &SynthSpec, width: usize) -> Modality {
    let k = spec.key_dim;
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let visible = len.min(super::sequence::CONTENT_TOKENS);
    let focus_at = rng.random_range(0..visible);
    let onset_at = loop {
        let j = rng.random_range(0..visible);
        if j != focus_at {
            break j;
        }
    };
    let focus = rng.random_range(-1.0..1.0);
    let onset = rng.random_range(-1.0..1.0);

    let focus_key = random_key(rng, spec, &[]);
    let onset_key = random_key(rng, spec, &[&focus_key]);
    let mut keys = Vec::with_capacity(len);
    let mut feats = Vec::with_capacity(len * width);
    for j in 0..len {
        let (key, value) = if j == focus_at {
            (focus_key.clone(), focus)
        } else if j == onset_at {
            (onset_key.clone(), onset)
        } else {
            (random_key(rng, spec, &[&focus_key, &onset_key]), rng.random_range(-1.0..1.0))
        };
        feats.extend(key.iter().map(|&v| v as f32));
        feats.push(value as f32);
        for _ in k + 1..width {
            feats.push((gaussian(rng) * spec.feature_noise) as f32);
        }
        keys.push(key);
    }

    let dt = spec.dims.text;
    let mut expl = Vec::with_capacity(spec.expl_len * dt);
    for row in 0..spec.expl_len {
        let key = if row == 0 { &keys[onset_at] } else { &keys[focus_at] };
        for &v in key {
            expl.push((v + gaussian(rng) * spec.feature_noise) as f32);
        }
        for _ in k..dt {
            expl.push((gaussian(rng) * spec.feature_noise) as f32);
        }
    }

    Modality {
        features: Tensor::new(&[len, width], feats).expect("synthetic feature shape"),
        explanation: Tensor::new(&[spec.expl_len, dt], expl).expect("synthetic explanation shape"),
        focus,
        onset,
    }
}

/// Generates a dataset that is a pure function of `spec`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.n_train + spec.n_val + spec.n_test;
    let mut records = Vec::with_capacity(total);
    let mut factors = Vec::with_capacity(total);
    let mut entries = Vec::with_capacity(total);
    let mut splits = Splits::default();

    for i in 0..total {
        let text = modality(&mut rng, spec, spec.dims.text);
        let audio = modality(&mut rng, spec, spec.dims.audio);
        let video = modality(&mut rng, spec, spec.dims.video);
        let sig = spec.signal;
        let raw = sig.text * text.focus
            + sig.audio * audio.focus
            + sig.video * video.focus
            + sig.onset * (audio.onset + video.onset)
            + spec.label_noise * gaussian(&mut rng);
        let label = match spec.scale {
            LabelScale::Three => raw.clamp(-3.0, 3.0),
            LabelScale::One => (raw / 3.0).clamp(-1.0, 1.0),
        };
        let id = format!("syn{i:05}");
        factors.push(PlantedFactors {
            text: text.focus,
            audio: audio.focus,
            video: video.focus,
            onset_audio: audio.onset,
            onset_video: video.onset,
        });
        records.push(FeatureRecord {
            id: id.clone(),
            text: text.features,
            audio: audio.features,
            video: video.features,
            expl_audio: audio.explanation,
            expl_video: video.explanation,
            comments: text.explanation,
            label: label as f32,
            label_scale: spec.scale,
        });
        entries.push(RecordEntry {
            id: id.clone(),
            path: PathBuf::from("records").join(format!("{id}.txf")),
            explanations: ExplanationState::Embedded,
            explanation_trail: Vec::new(),
            explanation_error: None,
        });
        if i < spec.n_train {
            splits.train.push(id);
        } else if i < spec.n_train + spec.n_val {
            splits.val.push(id);
        } else {
            splits.test.push(id);
        }
    }

    let manifest = Manifest {
        scale: spec.scale,
        dims: spec.dims,
        splits,
        records: entries,
        root: PathBuf::new(),
    };
    manifest.validate_structure()?;
    Ok(SynthDataset {
        manifest,
        records,
        factors,
    })
}

impl SynthDataset {
    /// Writes `manifest.json` and `records/*.txf` under `dir`; returns the manifest path.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let rec_dir = dir.join("records");
        fs::create_dir_all(&rec_dir).map_err(Error::at_path(&rec_dir))?;
        for (rec, entry) in self.records.iter().zip(&self.manifest.records) {
            write_feature_file(rec, dir.join(&entry.path))?;
        }
        self.manifest.root = dir.to_path_buf();
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{load_manifest, Split};

    /// Recovers focus/onset values from the raw files using only the
    /// documented layout: match explanation keys against token keys.
    fn probe(rec: &FeatureRecord, k: usize) -> [f64; 4] {
        let read = |feats: &Tensor<f32>, expl: &Tensor<f32>, row: usize| -> f64 {
            let q = &expl.row(row)[..k];
            let best = (0..feats.rows().min(50))
                .max_by(|&a, &b| {
                    let da: f32 = feats.row(a)[..k].iter().zip(q).map(|(x, y)| x * y).sum();
                    let db: f32 = feats.row(b)[..k].iter().zip(q).map(|(x, y)| x * y).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            feats.row(best)[k] as f64
        };
        [
            read(&rec.text, &rec.comments, 1),
            read(&rec.audio, &rec.expl_audio, 1),
            read(&rec.video, &rec.expl_video, 1),
            read(&rec.audio, &rec.expl_audio, 0) + read(&rec.video, &rec.expl_video, 0),
        ]
    }

    /// Ordinary least squares via normal equations (Gauss-Jordan), bias last.
    fn ols(x: &[[f64; 4]], y: &[f64]) -> [f64; 5] {
        let n = 5;
        let mut a = vec![vec![0.0; n + 1]; n];
        for (row, &t) in x.iter().zip(y) {
            let f = [row[0], row[1], row[2], row[3], 1.0];
            for i in 0..n {
                for j in 0..n {
                    a[i][j] += f[i] * f[j];
                }
                a[i][n] += f[i] * t;
            }
        }
        for i in 0..n {
            let p = (i..n).max_by(|&r, &s| a[r][i].abs().total_cmp(&a[s][i].abs())).unwrap();
            a.swap(i, p);
            let piv = a[i][i];
            for v in a[i].iter_mut() {
                *v /= piv;
            }
            for r in 0..n {
                if r != i {
                    let f = a[r][i];
                    for col in 0..=n {
                        a[r][col] -= f * a[i][col];
                    }
                }
            }
        }
        [a[0][n], a[1][n], a[2][n], a[3][n], a[4][n]]
    }

    fn probe_mae(ds: &SynthDataset, k: usize, fit: std::ops::Range<usize>, eval: std::ops::Range<usize>) -> f64 {
        let feats: Vec<[f64; 4]> = ds.records.iter().map(|r| probe(r, k)).collect();
        let labels: Vec<f64> = ds.records.iter().map(|r| r.label as f64).collect();
        let w = ols(&feats[fit.clone()], &labels[fit]);
        let n = eval.len() as f64;
        eval.map(|i| {
            let f = feats[i];
            let p = w[0] * f[0] + w[1] * f[1] + w[2] * f[2] + w[3] * f[3] + w[4];
            (p - labels[i]).abs()
        })
        .sum::<f64>()
            / n
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = SynthSpec {
            n_train: 6,
            n_val: 2,
            n_test: 2,
            ..SynthSpec::default()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let p1 = synth_dataset(&spec).unwrap().write(d1.path()).unwrap();
        let p2 = synth_dataset(&spec).unwrap().write(d2.path()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        for id in ["syn00000", "syn00005", "syn00009"] {
            let f = format!("records/{id}.txf");
            assert_eq!(fs::read(d1.path().join(&f)).unwrap(), fs::read(d2.path().join(&f)).unwrap());
        }
        let other = synth_dataset(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(other.records[0], synth_dataset(&SynthSpec::default()).unwrap().records[0]);
    }

    #[test]
    fn zero_samples_is_a_config_error() {
        let spec = SynthSpec {
            n_train: 0,
            n_val: 0,
            n_test: 0,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn strong_signal_is_linearly_recoverable() {
        let ds = synth_dataset(&SynthSpec {
            n_train: 64,
            n_val: 0,
            n_test: 0,
            ..SynthSpec::default()
        })
        .unwrap();
        let mae = probe_mae(&ds, 6, 0..64, 0..64);
        assert!(mae < 0.1, "probe MAE {mae}");
    }

    #[test]
    fn null_signal_leaves_labels_unpredictable() {
        let ds = synth_dataset(&SynthSpec {
            n_train: 200,
            n_val: 200,
            n_test: 0,
            signal: PlantedSignal::none(),
            label_noise: 1.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let labels: Vec<f64> = ds.records.iter().map(|r| r.label as f64).collect();
        let mean = labels[..200].iter().sum::<f64>() / 200.0;
        let floor = labels[200..].iter().map(|y| (y - mean).abs()).sum::<f64>() / 200.0;
        let probe = probe_mae(&ds, 6, 0..200, 200..400);
        assert!(probe > 0.9 * floor, "probe {probe} vs floor {floor}");
    }

    #[test]
    fn generated_manifest_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_dataset(&SynthSpec {
            n_train: 4,
            n_val: 2,
            n_test: 1,
            scale: LabelScale::One,
            ..SynthSpec::default()
        })
        .unwrap();
        let path = ds.write(dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.splits.train.len(), 4);
        let val = m.load_split(Split::Val).unwrap();
        assert_eq!(val, ds.records[4..6].to_vec());
        assert!(val.iter().all(|r| r.label.abs() <= 1.0));
    }
}
