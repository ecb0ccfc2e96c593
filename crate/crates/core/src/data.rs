//! Synthetic pseudo-acoustic domains and the on-disk dataset format.
//!
//! Every label owns a fixed random feature template. An utterance is a label
//! sequence rendered as consecutive runs of its templates plus Gaussian
//! noise. Shifted domains transform the features (acoustic shift), replace
//! some templates (vocabulary shift), or switch to short single-label
//! utterances (keyword domain).
//!
//! On disk a dataset is a directory holding `manifest.jsonl` (one JSON
//! object per utterance) and one feature file per utterance: the magic bytes
//! `XFF1`, two little-endian `u32` (frames, features) and the row-major
//! little-endian `f32` values.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Example;

pub const FEATURE_MAGIC: &[u8; 4] = b"XFF1";
pub const MANIFEST: &str = "manifest.jsonl";

/// Rotation generator scale per unit of `rotation_strength`. At strength 1
/// the largest rotation angle is roughly 1.4 radians for the default
/// feature dimension, enough to break a base model without making the
/// shift unlearnable by a small adapter.
const ROTATION_SCALE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shift {
    None,
    /// Every frame `x` becomes `R x + o`, where `R` is a random rotation whose
    /// angles scale with `rotation_strength` and `o` a fixed random offset
    /// scaled by `channel_offset`. Labels are unchanged.
    Acoustic {
        rotation_strength: f64,
        channel_offset: f64,
    },
    /// The first `new_token_count` labels get fresh templates.
    Vocabulary {
        new_token_count: usize,
    },
    /// One label per utterance with its own frame-run range. The first
    /// `new_token_count` labels get fresh templates (new words) and the
    /// optional acoustic transform is the same as for `Acoustic`.
    Keyword {
        min_frames: usize,
        max_frames: usize,
        #[serde(default)]
        new_token_count: usize,
        #[serde(default)]
        rotation_strength: f64,
        #[serde(default)]
        channel_offset: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub template_seed: u64,
    pub noise_sigma: f64,
    pub shift: Shift,
    /// Seed of the shift transform and of the replacement templates.
    #[serde(default)]
    pub shift_seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            vocab_size: 16,
            min_tokens: 3,
            max_tokens: 8,
            min_frames: 3,
            max_frames: 6,
            feature_dim: 16,
            template_seed: 1,
            noise_sigma: 0.1,
            shift: Shift::None,
            shift_seed: 2,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain spec: {m}")));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.feature_dim < 4 {
            return bad("feature_dim must be at least 4");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range invalid");
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return bad("frames per token must be a range starting at 2 or more");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        match self.shift {
            Shift::Keyword {
                min_frames,
                max_frames,
                ..
            } if min_frames < 2 || min_frames > max_frames => bad("keyword frame range invalid"),
            Shift::Vocabulary { new_token_count }
            | Shift::Keyword {
                new_token_count, ..
            } if new_token_count > self.vocab_size => bad("new_token_count exceeds vocabulary"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub n_frames: usize,
    pub n_feats: usize,
    /// Row-major `[n_frames x n_feats]`.
    pub features: Vec<f32>,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn to_example<S: Scalar>(&self) -> Example<S> {
        let data = self
            .features
            .iter()
            .map(|&v| S::lit(f64::from(v)))
            .collect();
        Example {
            features: Tensor::new(vec![self.n_frames, self.n_feats], data)
                .expect("consistent utterance"),
            tokens: self.tokens.clone(),
        }
    }
}

pub fn to_examples<S: Scalar>(utts: &[Utterance]) -> Vec<Example<S>> {
    utts.iter().map(Utterance::to_example).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let x = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += x * b[k * n + j];
            }
        }
    }
    out
}

/// `exp(m)` by scaling and squaring a truncated Taylor series.
fn mat_exp(m: &[f64], n: usize) -> Vec<f64> {
    let norm = m.iter().map(|v| v.abs()).sum::<f64>();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let a: Vec<f64> = m.iter().map(|v| v * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..30 {
        term = mat_mul(&term, &a, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result, n);
    }
    result
}

/// Fixed per-domain feature transform.
struct AcousticTransform {
    rotation: Vec<f64>,
    offset: Vec<f64>,
}

impl AcousticTransform {
    fn new(seed: u64, f: usize, strength: f64, offset_scale: f64) -> Self {
        let seeds = SeedTree::new(seed);
        let g = gaussian_vec(&mut seeds.stream("rotation", 0), f * f);
        let norm = ROTATION_SCALE * strength / (2.0 * f as f64).sqrt();
        let mut skew = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                skew[i * f + j] = (g[i * f + j] - g[j * f + i]) * norm;
            }
        }
        let rotation = mat_exp(&skew, f);
        let offset = gaussian_vec(&mut seeds.stream("offset", 0), f)
            .into_iter()
            .map(|v| v * offset_scale)
            .collect();
        AcousticTransform { rotation, offset }
    }

    fn apply(&self, frame: &mut [f64]) {
        let f = frame.len();
        let out: Vec<f64> = (0..f)
            .map(|i| {
                let row = &self.rotation[i * f..(i + 1) * f];
                row.iter()
                    .zip(frame.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.offset[i]
            })
            .collect();
        frame.copy_from_slice(&out);
    }
}

fn templates(spec: &DomainSpec) -> Vec<Vec<f64>> {
    let base = SeedTree::new(spec.template_seed);
    let fresh = SeedTree::new(spec.shift_seed).child("templates");
    (0..spec.vocab_size)
        .map(|k| match spec.shift {
            Shift::Vocabulary { new_token_count }
            | Shift::Keyword {
                new_token_count, ..
            } if k < new_token_count => {
                gaussian_vec(&mut fresh.stream("template", k as u64), spec.feature_dim)
            }
            _ => gaussian_vec(&mut base.stream("template", k as u64), spec.feature_dim),
        })
        .collect()
}

fn render(
    spec: &DomainSpec,
    templates: &[Vec<f64>],
    transform: Option<&AcousticTransform>,
    id: String,
    rng: &mut impl Rng,
) -> Utterance {
    let (n_tokens, frames) = match spec.shift {
        Shift::Keyword {
            min_frames,
            max_frames,
            ..
        } => (1, (min_frames, max_frames)),
        _ => (
            rng.gen_range(spec.min_tokens..=spec.max_tokens),
            (spec.min_frames, spec.max_frames),
        ),
    };
    // No immediate repeats: a repeated label would be a single longer run.
    let mut tokens = Vec::with_capacity(n_tokens);
    while tokens.len() < n_tokens {
        let k = rng.gen_range(0..spec.vocab_size);
        if tokens.last() != Some(&k) {
            tokens.push(k);
        }
    }
    let f = spec.feature_dim;
    let mut features = Vec::new();
    let mut n_frames = 0;
    for &k in &tokens {
        let run = rng.gen_range(frames.0..=frames.1);
        for _ in 0..run {
            let mut frame: Vec<f64> = templates[k]
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + spec.noise_sigma * z
                })
                .collect();
            if let Some(t) = transform {
                t.apply(&mut frame);
            }
            features.extend(frame.iter().map(|&v| v as f32));
            n_frames += 1;
        }
    }
    Utterance {
        id,
        n_frames,
        n_feats: f,
        features,
        tokens,
    }
}

/// Draws disjoint train and eval sets for a domain.
pub fn generate_domain(
    spec: &DomainSpec,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<DomainSplit> {
    spec.validate()?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("utterance counts must be at least 1".into()));
    }
    let templates = templates(spec);
    let transform = match spec.shift {
        Shift::Acoustic {
            rotation_strength,
            channel_offset,
        }
        | Shift::Keyword {
            rotation_strength,
            channel_offset,
            ..
        } if rotation_strength != 0.0 || channel_offset != 0.0 => Some(AcousticTransform::new(
            spec.shift_seed,
            spec.feature_dim,
            rotation_strength,
            channel_offset,
        )),
        _ => None,
    };
    let seeds = SeedTree::new(seed);
    let draw = |split: &str, n: usize| -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let mut rng = seeds.stream(split, i as u64);
                render(
                    spec,
                    &templates,
                    transform.as_ref(),
                    format!("{split}-{i:05}"),
                    &mut rng,
                )
            })
            .collect()
    };
    Ok(DomainSplit {
        train: draw("train", n_train),
        eval: draw("eval", n_eval),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub phase: String,
    pub path: PathBuf,
}

/// Records every dataset file opened, tagged with the current phase.
#[derive(Debug, Default)]
pub struct AccessLog {
    inner: Mutex<(String, Vec<AccessRecord>)>,
}

impl AccessLog {
    pub fn new(phase: &str) -> Self {
        AccessLog {
            inner: Mutex::new((phase.to_string(), Vec::new())),
        }
    }

    pub fn set_phase(&self, phase: &str) {
        self.inner.lock().expect("access log poisoned").0 = phase.to_string();
    }

    pub fn record(&self, path: &Path) {
        let mut g = self.inner.lock().expect("access log poisoned");
        let phase = g.0.clone();
        g.1.push(AccessRecord {
            phase,
            path: path.to_path_buf(),
        });
    }

    pub fn entries(&self) -> Vec<AccessRecord> {
        self.inner.lock().expect("access log poisoned").1.clone()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    features: String,
    n_frames: usize,
    n_feats: usize,
    tokens: Vec<usize>,
}

fn feature_file_name(id: &str) -> String {
    format!("feats/{id}.xff")
}

pub fn write_dataset(utts: &[Utterance], dir: &Path) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = String::new();
    for u in utts {
        if u.features.len() != u.n_frames * u.n_feats {
            return Err(Error::Input(format!(
                "utterance {} has inconsistent features",
                u.id
            )));
        }
        let rel = feature_file_name(&u.id);
        let mut bytes = Vec::with_capacity(12 + 4 * u.features.len());
        bytes.extend_from_slice(FEATURE_MAGIC);
        bytes.extend_from_slice(&(u.n_frames as u32).to_le_bytes());
        bytes.extend_from_slice(&(u.n_feats as u32).to_le_bytes());
        for v in &u.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let line = ManifestLine {
            id: u.id.clone(),
            features: rel,
            n_frames: u.n_frames,
            n_feats: u.n_feats,
            tokens: u.tokens.clone(),
        };
        manifest.push_str(&serde_json::to_string(&line)?);
        manifest.push('\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

fn read_features(path: &Path, n_frames: usize, n_feats: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt("missing XFF1 header".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if (t, f) != (n_frames, n_feats) {
        return Err(corrupt(format!(
            "header says {t}x{f}, manifest says {n_frames}x{n_feats}"
        )));
    }
    if bytes.len() != 12 + 4 * t * f {
        return Err(corrupt(format!(
            "expected {} payload bytes, found {}",
            4 * t * f,
            bytes.len() - 12
        )));
    }
    Ok(bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads a dataset directory, recording every opened file in `log`.
pub fn read_dataset_logged(dir: &Path, log: &AccessLog) -> Result<Vec<Utterance>> {
    let manifest_path = dir.join(MANIFEST);
    log.record(&manifest_path);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut utts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if entry.n_frames == 0 || entry.n_feats == 0 {
            return Err(Error::Parse {
                path: manifest_path.clone(),
                line: i + 1,
                msg: "empty feature matrix".into(),
            });
        }
        let path = dir.join(&entry.features);
        log.record(&path);
        let features = read_features(&path, entry.n_frames, entry.n_feats)?;
        utts.push(Utterance {
            id: entry.id,
            n_frames: entry.n_frames,
            n_feats: entry.n_feats,
            features,
            tokens: entry.tokens,
        });
    }
    Ok(utts)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Utterance>> {
    read_dataset_logged(dir, &AccessLog::default())
}
