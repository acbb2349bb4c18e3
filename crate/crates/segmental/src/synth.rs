//! Synthetic segmental data: Markov label sequences, uniform durations and
//! Gaussian frame emissions around per-label means.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segmental_core::math::Mat;
use segmental_core::model::Utterance;
use segmental_core::params::rng_from_seed;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::formats::Alphabet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub labels: usize,
    /// Extra pure-noise feature dimensions.
    pub noise_dims: usize,
    /// Distance of each label mean from the origin along its own axis.
    pub separation: f64,
    /// Per-dimension emission standard deviation.
    pub sigma: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 200,
            dev: 50,
            test: 50,
            labels: 5,
            noise_dims: 3,
            separation: 1.0,
            sigma: 0.2,
            min_duration: 2,
            max_duration: 6,
            min_segments: 3,
            max_segments: 6,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        self.labels + self.noise_dims
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.labels >= 2, "need at least two labels");
        ensure!(
            1 <= self.min_duration && self.min_duration <= self.max_duration,
            "durations must satisfy 1 <= min <= max"
        );
        ensure!(
            1 <= self.min_segments && self.min_segments <= self.max_segments,
            "segment counts must satisfy 1 <= min <= max"
        );
        ensure!(self.sigma >= 0.0 && self.separation > 0.0, "sigma must be >= 0 and separation > 0");
        Ok(())
    }

    /// Error rate of the nearest-mean frame classifier, which is the Bayes
    /// error under equal label priors:
    /// `1 − ∫ φ(z) Φ(z + m/σ)^(L−1) dz`.
    pub fn bayes_frame_error(&self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let a = self.separation / self.sigma;
        let k = (self.labels - 1) as i32;
        let (lo, hi, n) = (-12.0f64, 12.0 + a, 20_000usize);
        let h = (hi - lo) / n as f64;
        let f = |z: f64| std_normal_pdf(z) * (1.0 - std_normal_cdf(z + a).powi(k));
        // Integrate the error directly to keep precision when it is tiny.
        let mut sum = f(lo) + f(hi);
        for i in 1..n {
            let z = lo + i as f64 * h;
            sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        sum * h / 3.0
    }
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Label transition matrix without self-loops, rows drawn at random.
fn bigram(labels: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..labels)
        .map(|from| {
            let mut row: Vec<f64> = (0..labels)
                .map(|to| if to == from { 0.0 } else { 0.2 + rng.random::<f64>() })
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// One emitted frame for `label`. Values are rounded to `f32`, the on-disk
/// precision, so generated and reloaded data agree exactly.
pub fn emit_frame(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..cfg.feature_dim())
        .map(|j| {
            let mean = if j == label { cfg.separation } else { 0.0 };
            let noise: f64 = StandardNormal.sample(rng);
            (mean + cfg.sigma * noise) as f32 as f64
        })
        .collect()
}

fn utterance(cfg: &SynthConfig, id: String, trans: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Utterance {
    let k = rng.random_range(cfg.min_segments..=cfg.max_segments);
    let mut labels = Vec::with_capacity(k);
    let mut label = rng.random_range(0..cfg.labels);
    for i in 0..k {
        if i > 0 {
            label = sample_index(&trans[label], rng);
        }
        labels.push(label);
    }
    let mut segments = Vec::with_capacity(k);
    let mut data = Vec::new();
    let mut t = 0;
    for &l in &labels {
        let d = rng.random_range(cfg.min_duration..=cfg.max_duration);
        segments.push((l, t, t + d));
        for _ in 0..d {
            data.extend(emit_frame(cfg, l, rng));
        }
        t += d;
    }
    Utterance {
        id,
        features: Mat::from_vec(t, cfg.feature_dim(), data),
        labels,
        segments: Some(segments),
    }
}

pub fn alphabet(labels: usize) -> Alphabet {
    Alphabet::new((0..labels).map(|i| format!("p{i}")).collect()).expect("generated tokens are distinct")
}

/// Generates every split in memory. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let trans = bigram(cfg.labels, &mut rng);
    let mut splits = Vec::new();
    for (name, n) in [("train", cfg.train), ("dev", cfg.dev), ("test", cfg.test)] {
        let utts = (0..n)
            .map(|i| utterance(cfg, format!("{name}{i:05}"), &trans, &mut rng))
            .collect();
        splits.push(Split {
            name: name.into(),
            utterances: utts,
        });
    }
    Ok(Dataset {
        alphabet: alphabet(cfg.labels),
        collapse: None,
        splits,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub config: SynthConfig,
    pub bayes_frame_error: f64,
}

/// Generates and writes a dataset plus `generator.json`.
pub fn synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Dataset> {
    let data = generate(cfg)?;
    data.write(dir)?;
    let info = GeneratorInfo {
        config: cfg.clone(),
        bayes_frame_error: cfg.bayes_frame_error(),
    };
    let path = dir.join("generator.json");
    fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").with_context(|| path.display().to_string())?;
    Ok(data)
}
