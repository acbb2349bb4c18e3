//! Gradient wall-time per loss, weight function and encoder layout, on
//! identical synthetic inputs.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use segmental_core::encoder::{EncoderConfig, Mode, Subsample};
use segmental_core::lattice::RepeatPolicy;
use segmental_core::model::{Model, ModelConfig, Objective, Partition, SegmentalLoss, Utterance};
use segmental_core::weights::{DecoderConfig, WeightFnKind};
use serde::Serialize;

use crate::synth::{generate, SynthConfig};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub utterances: usize,
    pub labels: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Maximum segment duration without and with the pyramid.
    pub max_duration: usize,
    pub pyramid_max_duration: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Input frame shift in seconds, for the real-time factor.
    pub frame_shift: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            utterances: 4,
            labels: 10,
            hidden: 32,
            layers: 3,
            max_duration: 30,
            pyramid_max_duration: 8,
            repeats: 5,
            seed: 5,
            frame_shift: 0.01,
        }
    }
}

pub const LOSSES: [SegmentalLoss; 3] = [SegmentalLoss::Hinge, SegmentalLoss::Log, SegmentalLoss::MarginalLog];

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub weight_fn: &'static str,
    pub pyramid: bool,
    pub loss: &'static str,
    /// Fastest of the repeats, seconds per utterance.
    pub min_seconds: f64,
    pub median_seconds: f64,
    /// `median_seconds` over the audio duration.
    pub real_time_factor: f64,
}

pub fn loss_name(l: SegmentalLoss) -> &'static str {
    match l {
        SegmentalLoss::Hinge => "hinge",
        SegmentalLoss::Log => "log",
        SegmentalLoss::MarginalLog => "mll",
    }
}

pub fn weight_fn_name(k: WeightFnKind) -> &'static str {
    match k {
        WeightFnKind::Fc => "fc",
        WeightFnKind::Srnn => "srnn",
    }
}

fn inputs(cfg: &BenchConfig) -> Result<Vec<Utterance>> {
    let synth = SynthConfig {
        train: cfg.utterances,
        dev: 0,
        test: 0,
        labels: cfg.labels,
        min_segments: 30,
        max_segments: 30,
        // Long enough to survive 4x subsampling.
        min_duration: 8,
        max_duration: 16,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    Ok(generate(&synth)?.splits.swap_remove(0).utterances)
}

fn model(cfg: &BenchConfig, input_dim: usize, kind: WeightFnKind, pyramid: bool) -> Result<Model> {
    let d = if pyramid { cfg.pyramid_max_duration } else { cfg.max_duration };
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            hidden: cfg.hidden,
            layers: cfg.layers,
            pyramid,
            subsample: Subsample::Select,
            dropout: 0.0,
            num_labels: cfg.labels,
        },
        decoder: DecoderConfig::new(kind, d),
        repeats: RepeatPolicy::Verbatim,
        cost_scale: 1.0,
    };
    Ok(Model::init(config, cfg.seed)?)
}

/// Times one full gradient (encoder, weight function and loss) per
/// utterance for every combination.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let utts = inputs(cfg)?;
    let frames: usize = utts.iter().map(Utterance::frames).sum();
    let input_dim = utts[0].features.cols();
    let mut rows = Vec::new();
    for kind in [WeightFnKind::Fc, WeightFnKind::Srnn] {
        for pyramid in [false, true] {
            let m = model(cfg, input_dim, kind, pyramid)?;
            // Losses alternate within each repeat so slow drift affects all
            // of them alike.
            let mut times = vec![Vec::with_capacity(cfg.repeats); LOSSES.len()];
            for _ in 0..cfg.repeats.max(1) {
                for (i, loss) in LOSSES.into_iter().enumerate() {
                    let objective = Objective::Segmental(loss);
                    let start = Instant::now();
                    for u in &utts {
                        std::hint::black_box(m.evaluate(u, &objective, Mode::Eval, Partition::All)?);
                    }
                    times[i].push(start.elapsed().as_secs_f64() / utts.len() as f64);
                }
            }
            for (loss, mut times) in LOSSES.into_iter().zip(times) {
                times.sort_by(f64::total_cmp);
                let median = times[times.len() / 2];
                rows.push(BenchRow {
                    weight_fn: weight_fn_name(kind),
                    pyramid,
                    loss: loss_name(loss),
                    min_seconds: times[0],
                    median_seconds: median,
                    real_time_factor: median * utts.len() as f64 / (frames as f64 * cfg.frame_shift),
                });
            }
        }
    }
    Ok(rows)
}

/// One line per weight function and layout, one column per loss.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:<8} {:>12} {:>12} {:>12}   (real-time factor)", "weight", "pyramid", "hinge", "log", "mll");
    for kind in ["fc", "srnn"] {
        for pyramid in [false, true] {
            let cell = |loss: &str| {
                rows.iter()
                    .find(|r| r.weight_fn == kind && r.pyramid == pyramid && r.loss == loss)
                    .map_or(f64::NAN, |r| r.real_time_factor)
            };
            let _ = writeln!(
                out,
                "{:<6} {:<8} {:>12.5} {:>12.5} {:>12.5}",
                kind,
                if pyramid { "yes" } else { "no" },
                cell("hinge"),
                cell("log"),
                cell("mll")
            );
        }
    }
    out
}

/// Checks the expected ordering: hinge < log < marginal log loss for each
/// weight function and layout, and pyramid faster than no pyramid for each
/// loss. Compares the fastest repeat. Returns the violated comparisons.
pub fn ordering_violations(rows: &[BenchRow]) -> Vec<String> {
    let get = |k: &str, p: bool, l: &str| {
        rows.iter()
            .find(|r| r.weight_fn == k && r.pyramid == p && r.loss == l)
            .map_or(f64::NAN, |r| r.min_seconds)
    };
    let mut bad = Vec::new();
    for k in ["fc", "srnn"] {
        for p in [false, true] {
            let (h, l, m) = (get(k, p, "hinge"), get(k, p, "log"), get(k, p, "mll"));
            if !(h < l) {
                bad.push(format!("{k} pyramid={p}: hinge {h:.3e} !< log {l:.3e}"));
            }
            if !(l < m) {
                bad.push(format!("{k} pyramid={p}: log {l:.3e} !< mll {m:.3e}"));
            }
        }
        for loss in ["hinge", "log", "mll"] {
            let (y, n) = (get(k, true, loss), get(k, false, loss));
            if !(y < n) {
                bad.push(format!("{k} {loss}: pyramid {y:.3e} !< no pyramid {n:.3e}"));
            }
        }
    }
    bad
}

/// Weight-function comparisons where SRNN is not slower than FC.
pub fn srnn_not_slower(rows: &[BenchRow]) -> Vec<String> {
    let mut bad = Vec::new();
    for fc in rows.iter().filter(|r| r.weight_fn == "fc") {
        if let Some(srnn) = rows
            .iter()
            .find(|r| r.weight_fn == "srnn" && r.pyramid == fc.pyramid && r.loss == fc.loss)
        {
            if !(srnn.min_seconds > fc.min_seconds) {
                bad.push(format!(
                    "{} pyramid={}: srnn {:.3e} !> fc {:.3e}",
                    fc.loss, fc.pyramid, srnn.min_seconds, fc.min_seconds
                ));
            }
        }
    }
    bad
}
