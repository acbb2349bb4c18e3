//! Central finite-difference checks of every analytic gradient, on random
//! small configurations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dp::{edge_posteriors, forward_backward, Path};
use crate::encoder::{encode, encoder_backward, EncoderConfig, EncoderOutputs, EncoderParams, Mode, Subsample};
use crate::error::Result;
use crate::lattice::{build_label_chain, build_segmental_space, RepeatPolicy, SearchSpace};
use crate::losses::{
    cost_augmented_decode, ctc_loss, frame_cross_entropy, hinge_loss, log_loss, marginal_log_loss, CostFunction,
};
use crate::math::{log_softmax_in_place, Mat};
use crate::model::{
    segments_to_frames, EncoderLoss, Model, ModelConfig, Objective, Partition, SegmentalLoss, Utterance,
};
use crate::params::{rng_from_seed, ParamSet};
use crate::weights::{
    backprop_edges, score_all_edges, DecoderConfig, DecoderParams, SrnnConfig, WeightFnKind,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Dp,
    Losses,
    Weights,
    Encoder,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Dp, Component::Losses, Component::Weights, Component::Encoder];

    pub fn name(self) -> &'static str {
        match self {
            Component::Dp => "dp",
            Component::Losses => "losses",
            Component::Weights => "weights",
            Component::Encoder => "encoder",
        }
    }
}

/// Largest error seen by one named check across all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub component: Component,
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.checks.iter().all(|c| c.max_rel_err <= tolerance)
    }
}

#[derive(Default)]
struct Tally {
    trials: usize,
    total: Comparison,
}

impl Tally {
    fn add(&mut self, c: Comparison) {
        self.trials += 1;
        self.total.coordinates += c.coordinates;
        self.total.kinks += c.kinks;
        self.total.max_rel_err = self.total.max_rel_err.max(c.max_rel_err);
    }

    fn finish(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.into(),
            trials: self.trials,
            coordinates: self.total.coordinates,
            kinks: self.total.kinks,
            max_rel_err: self.total.max_rel_err,
        }
    }
}

/// Outcome of comparing one analytic gradient against finite differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Comparison {
    pub max_rel_err: f64,
    pub coordinates: usize,
    /// Coordinates skipped because the function is not differentiable
    /// within one step of the point (a ReLU or argmax switch).
    pub kinks: usize,
}

/// Central difference at `STEP`, or `None` when it disagrees with the one at
/// `STEP / 2` by more than [`KINK`]. Smooth functions agree to
/// `O(STEP^2)`; a ReLU or argmax switch within the step does not.
fn central(fp: f64, fm: f64, fp_half: f64, fm_half: f64) -> Option<f64> {
    let c = (fp - fm) / (2.0 * STEP);
    let c_half = (fp_half - fm_half) / STEP;
    ((c - c_half).abs() <= KINK * 1f64.max(c.abs())).then_some(c)
}

/// Relative disagreement between the two step sizes treated as a kink.
pub const KINK: f64 = 1e-7;

fn compare(cmp: &mut Comparison, analytic: f64, values: [f64; 4]) {
    match central(values[0], values[1], values[2], values[3]) {
        Some(c) => {
            cmp.max_rel_err = cmp.max_rel_err.max(rel_err(analytic, c));
            cmp.coordinates += 1;
        }
        None => cmp.kinks += 1,
    }
}

const OFFSETS: [f64; 4] = [STEP, -STEP, STEP / 2.0, -STEP / 2.0];

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_vector(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Comparison {
    let mut x = x.to_vec();
    let mut cmp = Comparison::default();
    for i in 0..x.len() {
        let orig = x[i];
        let values = OFFSETS.map(|d| {
            x[i] = orig + d;
            f(&x)
        });
        x[i] = orig;
        compare(&mut cmp, analytic[i], values);
    }
    cmp
}

/// Compares `analytic` against central differences of `f` for up to
/// `per_tensor` randomly chosen entries of every tensor of `params`.
pub fn check_params<P: ParamSet + Clone>(
    params: &P,
    analytic: &P,
    per_tensor: usize,
    rng: &mut impl Rng,
    mut f: impl FnMut(&P) -> f64,
) -> Comparison {
    let mut p = params.clone();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
    let mut cmp = Comparison::default();
    for (ti, g) in grads.iter().enumerate() {
        let n = g.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for ei in picks {
            let orig = p.tensors_mut()[ti].as_slice()[ei];
            let values = OFFSETS.map(|d| {
                p.tensors_mut()[ti].as_mut_slice()[ei] = orig + d;
                f(&p)
            });
            p.tensors_mut()[ti].as_mut_slice()[ei] = orig;
            compare(&mut cmp, g[ei], values);
        }
    }
    cmp
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Irwin-Hall approximation; only the spread matters here.
    (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0
}

fn random_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Random segmentation of `[0, frames)` with durations in `1..=max_d`.
fn random_segments(frames: usize, labels: usize, max_d: usize, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < frames {
        let d = rng.random_range(1..=max_d.min(frames - s));
        out.push((rng.random_range(0..labels), s, s + d));
        s += d;
    }
    out
}

struct Lattice {
    space: SearchSpace,
    weights: Vec<f64>,
    truth: Path,
}

fn random_lattice(rng: &mut ChaCha8Rng) -> Result<Lattice> {
    let frames = rng.random_range(1..=6);
    let labels = rng.random_range(1..=3);
    let max_d = rng.random_range(1..=3);
    let space = build_segmental_space(frames, labels, max_d)?;
    let weights = random_weights(space.num_edges(), rng);
    let truth = Path::from_segments(&space, &random_segments(frames, labels, max_d, rng))?;
    Ok(Lattice { space, weights, truth })
}

fn dp_suite(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut t = Tally::default();
    for _ in 0..trials {
        let lat = random_lattice(rng)?;
        let m = forward_backward(&lat.space, &lat.weights)?;
        let gamma = edge_posteriors(&lat.space, &lat.weights, &m);
        t.add(check_vector(&lat.weights, &gamma, |w| {
            forward_backward(&lat.space, w).map_or(f64::NAN, |m| m.log_partition)
        }));
    }
    Ok(vec![t.finish("log_partition")])
}

fn losses_suite(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (mut hinge, mut log, mut mll, mut ce, mut ctc) =
        (Tally::default(), Tally::default(), Tally::default(), Tally::default(), Tally::default());
    let mut kinks = 0;
    while hinge.trials < trials {
        let lat = random_lattice(rng)?;
        let frames = segments_to_frames(&lat.truth.segments(), lat.space.num_frames())?;
        let cost = CostFunction::from_frame_labels(frames, lat.space.num_labels());
        let base = cost_augmented_decode(&lat.space, &lat.weights, &cost)?.0;
        // The hinge loss is piecewise linear; differences are only taken
        // where the cost-augmented argmax is stable.
        let stable = (0..lat.weights.len()).all(|i| {
            [STEP, -STEP].iter().all(|&h| {
                let mut w = lat.weights.clone();
                w[i] += h;
                cost_augmented_decode(&lat.space, &w, &cost).is_ok_and(|(p, _)| p.edges == base.edges)
            })
        });
        if !stable {
            kinks += 1;
            if kinks > 10 * trials {
                break;
            }
            continue;
        }
        let r = hinge_loss(&lat.space, &lat.weights, &lat.truth, &cost)?;
        hinge.add(check_vector(&lat.weights, &r.grads, |w| {
            hinge_loss(&lat.space, w, &lat.truth, &cost).map_or(f64::NAN, |r| r.value)
        }));

        let r = log_loss(&lat.space, &lat.weights, &lat.truth)?;
        log.add(check_vector(&lat.weights, &r.grads, |w| {
            log_loss(&lat.space, w, &lat.truth).map_or(f64::NAN, |r| r.value)
        }));

        let chain = build_label_chain(&lat.truth.labels)?;
        let r = marginal_log_loss(&lat.space, &lat.weights, &chain)?;
        mll.add(check_vector(&lat.weights, &r.grads, |w| {
            marginal_log_loss(&lat.space, w, &chain).map_or(f64::NAN, |r| r.value)
        }));
    }
    for _ in 0..trials {
        let frames = rng.random_range(1..=8);
        let symbols = rng.random_range(2..=5);
        let logits = random_weights(frames * symbols, rng);
        let log_probs = |x: &[f64]| {
            let mut m = Mat::from_vec(frames, symbols, x.to_vec());
            for i in 0..frames {
                log_softmax_in_place(m.row_mut(i));
            }
            m
        };
        let labels: Vec<usize> = (0..frames).map(|_| rng.random_range(0..symbols)).collect();
        let r = frame_cross_entropy(&log_probs(&logits), &labels)?;
        ce.add(check_vector(&logits, &r.grads, |x| {
            frame_cross_entropy(&log_probs(x), &labels).map_or(f64::NAN, |r| r.value)
        }));

        let blank = symbols - 1;
        let k = rng.random_range(0..=frames.min(3));
        let target: Vec<usize> = (0..k).map(|_| rng.random_range(0..blank.max(1))).filter(|&l| l != blank).collect();
        let policy = if rng.random() { RepeatPolicy::Verbatim } else { RepeatPolicy::Strict };
        let Ok(r) = ctc_loss(&log_probs(&logits), &target, blank, policy) else {
            continue;
        };
        ctc.add(check_vector(&logits, &r.grads, |x| {
            ctc_loss(&log_probs(x), &target, blank, policy).map_or(f64::NAN, |r| r.value)
        }));
    }
    Ok(vec![
        hinge.finish("hinge"),
        log.finish("log"),
        mll.finish("marginal_log"),
        ce.finish("frame_cross_entropy"),
        ctc.finish("ctc"),
    ])
}

fn random_encoder_outputs(frames: usize, dim: usize, rng: &mut impl Rng) -> EncoderOutputs {
    EncoderOutputs {
        h: Mat::from_vec(frames, dim, random_weights(frames * dim, rng)),
    }
}

fn small_decoder(kind: WeightFnKind, max_d: usize) -> DecoderConfig {
    let mut cfg = DecoderConfig::new(kind, max_d);
    cfg.srnn = SrnnConfig {
        label_dim: 3,
        duration_dim: 2,
        hidden1: 5,
        hidden2: 4,
    };
    cfg
}

fn weights_suite(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in [WeightFnKind::Fc, WeightFnKind::Srnn] {
        let (mut params_t, mut h_t) = (Tally::default(), Tally::default());
        for _ in 0..trials {
            let frames = rng.random_range(1..=7);
            let labels = rng.random_range(1..=3);
            let max_d = rng.random_range(1..=4);
            let dim = rng.random_range(1..=3);
            let cfg = small_decoder(kind, max_d);
            let params = DecoderParams::init(&cfg, labels, dim, rng);
            let enc = random_encoder_outputs(frames, dim, rng);
            let space = build_segmental_space(frames, labels, max_d)?;
            // A random linear functional of the edge weights.
            let c = random_weights(space.num_edges(), rng);
            let f = |p: &DecoderParams, e: &EncoderOutputs| {
                score_all_edges(&space, e, p, &cfg).map_or(f64::NAN, |(t, _)| {
                    t.values.iter().zip(&c).map(|(w, c)| w * c).sum()
                })
            };
            let (_, cache) = score_all_edges(&space, &enc, &params, &cfg)?;
            let (pg, dh) = backprop_edges(&space, &enc, &params, &cfg, &cache, &c)?;
            params_t.add(check_params(&params, &pg, 12, rng, |p| f(p, &enc)));
            h_t.add(check_vector(enc.h.as_slice(), dh.as_slice(), |x| {
                f(&params, &EncoderOutputs {
                    h: Mat::from_vec(frames, dim, x.to_vec()),
                })
            }));
        }
        let name = match kind {
            WeightFnKind::Fc => "fc",
            WeightFnKind::Srnn => "srnn",
        };
        out.push(params_t.finish(&format!("{name}.params")));
        out.push(h_t.finish(&format!("{name}.encoder_outputs")));
    }
    Ok(out)
}

fn random_encoder_config(rng: &mut impl Rng) -> EncoderConfig {
    EncoderConfig {
        input_dim: rng.random_range(1..=3),
        hidden: rng.random_range(1..=4),
        layers: rng.random_range(1..=3),
        pyramid: rng.random(),
        subsample: if rng.random() { Subsample::Select } else { Subsample::Concat },
        dropout: 0.0,
        num_labels: rng.random_range(2..=3),
    }
}

fn encoder_suite(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (mut params_t, mut input_t, mut model_t) = (Tally::default(), Tally::default(), Tally::default());
    for _ in 0..trials {
        let cfg = random_encoder_config(rng);
        let frames = rng.random_range(1..=6);
        let params = EncoderParams::init(&cfg, rng.random());
        let x = Mat::from_vec(frames, cfg.input_dim, random_weights(frames * cfg.input_dim, rng));
        let (out, cache) = encode(&x, &params, &cfg, Mode::Eval)?;
        let c = random_weights(out.h.len(), rng);
        let f = |p: &EncoderParams, x: &Mat| {
            encode(x, p, &cfg, Mode::Eval).map_or(f64::NAN, |(o, _)| {
                o.h.as_slice().iter().zip(&c).map(|(h, c)| h * c).sum()
            })
        };
        let g = encoder_backward(&params, &cfg, &cache, &Mat::from_vec(out.frames(), out.dim(), c.clone()))?;
        params_t.add(check_params(&params, &g.params, 12, rng, |p| f(p, &x)));
        input_t.add(check_vector(x.as_slice(), g.input.as_slice(), |v| {
            f(&params, &Mat::from_vec(frames, cfg.input_dim, v.to_vec()))
        }));

        // Whole model: encoder, weight function and a loss together.
        let kind = if rng.random() { WeightFnKind::Fc } else { WeightFnKind::Srnn };
        let config = ModelConfig {
            encoder: cfg.clone(),
            decoder: small_decoder(kind, 3),
            repeats: RepeatPolicy::Verbatim,
            cost_scale: 1.0,
        };
        let model = Model::init(config, rng.random())?;
        let segments = random_segments(frames, cfg.num_labels, 3, rng);
        let utt = Utterance {
            id: String::new(),
            features: x.clone(),
            labels: segments.iter().map(|s| s.0).collect(),
            segments: Some(segments),
        };
        let objective = match rng.random_range(0..3) {
            0 => Objective::Segmental(SegmentalLoss::Log),
            1 => Objective::Segmental(SegmentalLoss::MarginalLog),
            _ => Objective::Multitask {
                segmental: SegmentalLoss::MarginalLog,
                encoder: if rng.random() { EncoderLoss::Ctc } else { EncoderLoss::FrameCrossEntropy },
                lambda: rng.random(),
            },
        };
        let Ok(ev) = model.evaluate(&utt, &objective, Mode::Eval, Partition::All) else {
            continue;
        };
        model_t.add(check_params(&model.params, &ev.grads, 6, rng, |p| {
            let m = Model {
                config: model.config.clone(),
                params: p.clone(),
            };
            m.evaluate(&utt, &objective, Mode::Eval, Partition::Nothing).map_or(f64::NAN, |e| e.value)
        }));
    }
    Ok(vec![
        params_t.finish("encoder.params"),
        input_t.finish("encoder.inputs"),
        model_t.finish("model.end_to_end"),
    ])
}

/// Runs the suite for one component.
pub fn run(component: Component, trials: usize, seed: u64) -> Result<Report> {
    let mut rng = rng_from_seed(seed);
    let checks = match component {
        Component::Dp => dp_suite(trials, &mut rng)?,
        Component::Losses => losses_suite(trials, &mut rng)?,
        Component::Weights => weights_suite(trials, &mut rng)?,
        Component::Encoder => encoder_suite(trials, &mut rng)?,
    };
    Ok(Report { component, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1e-9, 0.0), 1e-9);
        assert_eq!(rel_err(200.0, 202.0), 2.0 / 202.0);
    }

    #[test]
    fn suites_pass_on_a_few_trials() {
        for c in Component::ALL {
            let r = run(c, 4, 7).unwrap();
            assert!(r.passed(TOLERANCE), "{c:?}: {r:?}");
        }
    }
}
