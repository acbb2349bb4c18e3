//! Optimizers, the multitask combination, and the staged training driver
//! with early stopping on development-set PER.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::encoder::Mode;
use crate::error::{invalid, Error, Result};
use crate::lattice::LabelId;
use crate::losses::edit_distance;
use crate::math::sqrt;
use crate::model::{is_unrepresentable, DecodeKind, Evaluated, Model, Objective, Partition, Utterance};
use crate::params::{rng_from_seed, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OptimizerKind {
    Sgd,
    RmsProp { decay: f64, epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub step_size: f64,
    /// Global gradient-norm threshold.
    pub clip: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            step_size: 0.1,
            clip: 5.0,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp {
                decay: 0.9,
                epsilon: 1e-8,
            },
            step_size: 1e-4,
            clip: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.clip > 0.0) {
            return Err(invalid("step size and clip threshold must be positive"));
        }
        if let OptimizerKind::RmsProp { decay, epsilon } = self.kind {
            if !(0.0..1.0).contains(&decay) || !(epsilon > 0.0) {
                return Err(invalid("RMSprop needs decay in [0, 1) and positive epsilon"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Current step size; the schedule rescales it between epochs.
    pub step_size: f64,
    /// RMSprop running averages of squared gradients, one per tensor.
    pub second_moments: Vec<Vec<f64>>,
    pub steps: u64,
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            step_size: config.step_size,
            config,
            second_moments: Vec::new(),
            steps: 0,
            skipped: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Gradient norm before clipping.
    pub norm: f64,
    /// Factor applied to the gradient (1 when not clipped).
    pub scale: f64,
    pub applied: bool,
}

/// Scales `grads` so their global 2-norm is at most the clip threshold.
/// Returns the original norm and the factor applied.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, clip: f64) -> (f64, f64) {
    let norm = sqrt(grads.sum_sq());
    let scale = if norm > clip { clip / norm } else { 1.0 };
    if scale != 1.0 {
        grads.scale(scale);
    }
    (norm, scale)
}

/// Clips `grads` in place and applies one update to `params`. Non-finite
/// gradients leave everything untouched.
pub fn clip_and_step<P: ParamSet>(params: &mut P, grads: &mut P, state: &mut OptimizerState) -> StepReport {
    if !grads.is_finite() {
        state.skipped += 1;
        return StepReport {
            norm: f64::NAN,
            scale: 0.0,
            applied: false,
        };
    }
    let (norm, scale) = clip_global_norm(grads, state.config.clip);
    let eta = state.step_size;
    let grad_tensors: Vec<_> = grads.tensors().into_iter().map(|(_, m)| m.as_slice()).collect();
    match state.config.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(&grad_tensors) {
                for (w, &d) in p.as_mut_slice().iter_mut().zip(g.iter()) {
                    *w -= eta * d;
                }
            }
        }
        OptimizerKind::RmsProp { decay, epsilon } => {
            if state.second_moments.len() != grad_tensors.len() {
                state.second_moments = grad_tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            for ((p, g), acc) in params
                .tensors_mut()
                .into_iter()
                .zip(&grad_tensors)
                .zip(state.second_moments.iter_mut())
            {
                for ((w, &d), a) in p.as_mut_slice().iter_mut().zip(g.iter()).zip(acc.iter_mut()) {
                    *a = decay * *a + (1.0 - decay) * d * d;
                    *w -= eta * d / (sqrt(*a) + epsilon);
                }
            }
        }
    }
    state.steps += 1;
    StepReport {
        norm,
        scale,
        applied: true,
    }
}

/// `λ·seg + (1 − λ)·enc` for values and gradients computed separately on
/// the same utterance.
pub fn multitask_loss(lambda: f64, seg: &Evaluated, enc: &Evaluated) -> Result<Evaluated> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda outside [0, 1]"));
    }
    let mut grads = seg.grads.zeros_like();
    grads.add_scaled(lambda, &seg.grads);
    grads.add_scaled(1.0 - lambda, &enc.grads);
    Ok(Evaluated {
        value: lambda * seg.value + (1.0 - lambda) * enc.value,
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    /// Encoder alone on its own loss.
    EncoderPretrain,
    /// Decoder on a segmental loss with the encoder frozen.
    DecoderFrozen,
    /// Both partitions, continuing from the frozen-encoder stage.
    Finetune,
    /// Both partitions from random initialization.
    EndToEnd,
    /// Both partitions on a weighted sum of a segmental and an encoder loss.
    Multitask,
}

impl Stage {
    pub fn partition(self) -> Partition {
        match self {
            Stage::EncoderPretrain => Partition::Encoder,
            Stage::DecoderFrozen => Partition::Decoder,
            _ => Partition::All,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::EncoderPretrain => "enc",
            Stage::DecoderFrozen => "dec",
            Stage::Finetune => "finetune",
            Stage::EndToEnd => "e2e",
            Stage::Multitask => "multitask",
        }
    }

    /// Checks that the objective fits the stage.
    pub fn check_objective(self, objective: &Objective) -> Result<()> {
        let ok = match self {
            Stage::EncoderPretrain => matches!(objective, Objective::Encoder(_)),
            Stage::DecoderFrozen | Stage::Finetune | Stage::EndToEnd => matches!(objective, Objective::Segmental(_)),
            Stage::Multitask => matches!(objective, Objective::Multitask { .. }),
        };
        if ok {
            objective.validate()
        } else {
            Err(invalid("objective does not match training stage"))
        }
    }
}

/// Fixed-step epochs, then a restart from the best of those with the step
/// multiplied by `decay` after each further epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Schedule {
    pub constant_epochs: usize,
    pub decay_epochs: usize,
    pub decay: f64,
}

impl Schedule {
    pub fn paper() -> Self {
        Schedule {
            constant_epochs: 20,
            decay_epochs: 20,
            decay: 0.75,
        }
    }

    pub fn desk() -> Self {
        Schedule {
            constant_epochs: 5,
            decay_epochs: 5,
            decay: 0.75,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.constant_epochs + self.decay_epochs
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub stage: Stage,
    pub objective: Objective,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Utterances whose gradients are averaged per update.
    pub batch_size: usize,
    pub shuffle: bool,
    /// Maps labels to evaluation classes before scoring PER.
    pub eval_map: Option<Vec<LabelId>>,
    pub decode: Option<DecodeKind>,
}

impl TrainConfig {
    pub fn new(stage: Stage, objective: Objective, optimizer: OptimizerConfig, schedule: Schedule, seed: u64) -> Self {
        TrainConfig {
            stage,
            objective,
            optimizer,
            schedule,
            seed,
            batch_size: 1,
            shuffle: true,
            eval_map: None,
            decode: None,
        }
    }

    pub fn decode_kind(&self) -> DecodeKind {
        self.decode.unwrap_or_else(|| self.objective.decode_kind())
    }

    pub fn validate(&self) -> Result<()> {
        self.stage.check_objective(&self.objective)?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.schedule.decay > 0.0) {
            return Err(invalid("decay must be positive"));
        }
        Ok(())
    }
}

/// Evaluates utterances independently; implementations may run them in
/// parallel but must return results in input order.
pub trait Executor {
    fn evaluate_batch(
        &self,
        model: &Model,
        batch: &[(&Utterance, Mode)],
        objective: &Objective,
        wrt: Partition,
    ) -> Vec<Result<Evaluated>>;

    fn decode_batch(&self, model: &Model, utts: &[Utterance], kind: DecodeKind) -> Vec<Result<Vec<LabelId>>>;
}

/// Runs everything on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn evaluate_batch(
        &self,
        model: &Model,
        batch: &[(&Utterance, Mode)],
        objective: &Objective,
        wrt: Partition,
    ) -> Vec<Result<Evaluated>> {
        batch.iter().map(|(u, mode)| model.evaluate(u, objective, *mode, wrt)).collect()
    }

    fn decode_batch(&self, model: &Model, utts: &[Utterance], kind: DecodeKind) -> Vec<Result<Vec<LabelId>>> {
        utts.iter().map(|u| model.decode(&u.features, kind)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step_size: f64,
    /// Mean loss over the utterances seen during the epoch.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_per: f64,
    /// Utterances skipped because their supervision is unrepresentable.
    pub skipped: usize,
    /// Updates dropped because of non-finite gradients.
    pub nonfinite: u64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_per: f64,
}

/// Callbacks for the driver. `clock` returns seconds from any fixed origin;
/// without it wall times are reported as zero.
#[derive(Default)]
pub struct Hooks<'a> {
    pub clock: Option<&'a dyn Fn() -> f64>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord, &Model)>,
}

impl Hooks<'_> {
    fn now(&self) -> f64 {
        self.clock.map_or(0.0, |c| c())
    }
}

/// PER and the decoded sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per: f64,
    pub errors: usize,
    pub reference_length: usize,
    pub hypotheses: Vec<Vec<LabelId>>,
}

/// Maps each token through the evaluation map. Labels outside the map pass
/// through unchanged.
pub fn map_labels(labels: &[LabelId], map: Option<&[LabelId]>) -> Vec<LabelId> {
    match map {
        Some(m) => labels.iter().map(|&l| m.get(l).copied().unwrap_or(l)).collect(),
        None => labels.to_vec(),
    }
}

/// `Σ edit(ŷ, y) / Σ |y|` after mapping both sides. An empty reference set
/// scores 0.
pub fn phone_error_rate(hyps: &[Vec<LabelId>], refs: &[Vec<LabelId>], map: Option<&[LabelId]>) -> Result<(f64, usize, usize)> {
    if hyps.len() != refs.len() {
        return Err(invalid("hypothesis and reference counts differ"));
    }
    let mut errors = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (map_labels(h, map), map_labels(r, map));
        errors += edit_distance(&h, &r);
        total += r.len();
    }
    let per = if total == 0 { 0.0 } else { errors as f64 / total as f64 };
    Ok((per, errors, total))
}

/// Decodes every utterance and scores PER against its labels.
pub fn evaluate(
    model: &Model,
    data: &[Utterance],
    kind: DecodeKind,
    map: Option<&[LabelId]>,
    exec: &dyn Executor,
) -> Result<EvalReport> {
    let hypotheses = exec
        .decode_batch(model, data, kind)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = data.iter().map(|u| u.labels.clone()).collect();
    let (per, errors, reference_length) = phone_error_rate(&hypotheses, &refs, map)?;
    Ok(EvalReport {
        per,
        errors,
        reference_length,
        hypotheses,
    })
}

/// Mean evaluation-mode loss over the representable utterances, and how
/// many were skipped.
pub fn dataset_loss(model: &Model, data: &[Utterance], objective: &Objective, exec: &dyn Executor) -> Result<(f64, usize)> {
    let batch: Vec<_> = data.iter().map(|u| (u, Mode::Eval)).collect();
    let mut sum = 0.0;
    let mut n = 0;
    let mut skipped = 0;
    for r in exec.evaluate_batch(model, &batch, objective, Partition::Nothing) {
        match r {
            Ok(ev) => {
                sum += ev.value;
                n += 1;
            }
            Err(e) if is_unrepresentable(&e) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((if n == 0 { f64::NAN } else { sum / n as f64 }, skipped))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

struct EpochStats {
    train_loss: f64,
    skipped: usize,
}

fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    train: &[Utterance],
    cfg: &TrainConfig,
    epoch: usize,
    exec: &dyn Executor,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    if cfg.shuffle {
        order.shuffle(&mut rng_from_seed(mix(cfg.seed, cfg.stage as u64, epoch as u64)));
    }
    let wrt = cfg.stage.partition();
    let mut loss_sum = 0.0;
    let mut seen = 0;
    let mut skipped = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<_> = chunk
            .iter()
            .map(|&i| {
                let seed = mix(cfg.seed, epoch as u64 + 1, i as u64);
                (&train[i], Mode::Train { seed })
            })
            .collect();
        let mut total: Option<crate::model::ModelParams> = None;
        let mut count = 0;
        for r in exec.evaluate_batch(model, &batch, &cfg.objective, wrt) {
            match r {
                Ok(ev) => {
                    loss_sum += ev.value;
                    seen += 1;
                    count += 1;
                    match &mut total {
                        Some(t) => t.add_scaled(1.0, &ev.grads),
                        None => total = Some(ev.grads),
                    }
                }
                Err(e) if is_unrepresentable(&e) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let Some(mut grads) = total else { continue };
        if count > 1 {
            grads.scale(1.0 / count as f64);
        }
        match wrt {
            Partition::All => {
                clip_and_step(&mut model.params, &mut grads, opt);
            }
            Partition::Encoder => {
                clip_and_step(&mut model.params.encoder, &mut grads.encoder, opt);
            }
            Partition::Decoder => {
                clip_and_step(&mut model.params.decoder, &mut grads.decoder, opt);
            }
            Partition::Nothing => {}
        }
    }
    Ok(EpochStats {
        train_loss: if seen == 0 { f64::NAN } else { loss_sum / seen as f64 },
        skipped,
    })
}

/// Trains one stage in place, leaving `model` at the epoch with the lowest
/// development PER (ties go to the earlier epoch). Parameters outside the
/// stage's partition are never written.
pub fn run_stage(
    model: &mut Model,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    exec: &dyn Executor,
    hooks: &mut Hooks<'_>,
) -> Result<StageReport> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(invalid("training and development sets must be non-empty"));
    }
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let kind = cfg.decode_kind();
    let map = cfg.eval_map.as_deref();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut run_epoch = |model: &mut Model, opt: &mut OptimizerState, epoch: usize| -> Result<EpochRecord> {
        let start = hooks.now();
        let stats = train_epoch(model, opt, train, cfg, epoch, exec)?;
        let (dev_loss, _) = dataset_loss(model, dev, &cfg.objective, exec)?;
        let report = evaluate(model, dev, kind, map, exec)?;
        let record = EpochRecord {
            stage: cfg.stage,
            epoch,
            step_size: opt.step_size,
            train_loss: stats.train_loss,
            dev_loss,
            dev_per: report.per,
            skipped: stats.skipped,
            nonfinite: opt.skipped,
            wall_time: hooks.now() - start,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record, model);
        }
        Ok(record)
    };
    let s = cfg.schedule;
    for epoch in 1..=s.constant_epochs {
        let rec = run_epoch(model, &mut opt, epoch)?;
        if rec.dev_per < best.0 {
            best = (rec.dev_per, epoch, model.clone());
        }
        epochs.push(rec);
    }
    if s.decay_epochs > 0 && s.constant_epochs > 0 {
        *model = best.2.clone();
    }
    for k in 1..=s.decay_epochs {
        opt.step_size *= s.decay;
        let epoch = s.constant_epochs + k;
        let rec = run_epoch(model, &mut opt, epoch)?;
        if rec.dev_per < best.0 {
            best = (rec.dev_per, epoch, model.clone());
        }
        epochs.push(rec);
    }
    if !epochs.is_empty() {
        *model = best.2;
    }
    Ok(StageReport {
        epochs,
        best_epoch: best.1,
        best_dev_per: best.0,
    })
}

/// Rejects a stage that needs an upstream checkpoint when none was loaded.
pub fn require_upstream(stage: Stage, have_checkpoint: bool) -> Result<()> {
    match stage {
        Stage::DecoderFrozen | Stage::Finetune if !have_checkpoint => Err(Error::InvalidArgument(alloc::format!(
            "stage {} needs a checkpoint from the previous stage",
            stage.name()
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat;

    #[derive(Clone, Debug)]
    struct One(Mat);

    impl ParamSet for One {
        fn tensors(&self) -> Vec<(alloc::string::String, &Mat)> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Mat> {
            vec![&mut self.0]
        }
    }

    fn one(v: &[f64]) -> One {
        One(Mat::from_vec(v.len(), 1, v.to_vec()))
    }

    #[test]
    fn clipping_scales_large_norms_only() {
        let mut g = one(&[6.0, 8.0]);
        assert_eq!(clip_global_norm(&mut g, 5.0), (10.0, 0.5));
        assert_eq!(g.0.as_slice(), &[3.0, 4.0]);
        let mut g = one(&[0.0, 3.0]);
        assert_eq!(clip_global_norm(&mut g, 5.0), (3.0, 1.0));
        assert_eq!(g.0.as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn sgd_step() {
        let mut p = one(&[1.0, 1.0]);
        let mut g = one(&[6.0, 8.0]);
        let mut s = OptimizerState::new(OptimizerConfig::sgd()).unwrap();
        let r = clip_and_step(&mut p, &mut g, &mut s);
        assert!(r.applied);
        assert!((p.0.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((p.0.get(1, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_is_skipped() {
        let mut p = one(&[1.0]);
        let mut g = one(&[f64::NAN]);
        let mut s = OptimizerState::new(OptimizerConfig::sgd()).unwrap();
        assert!(!clip_and_step(&mut p, &mut g, &mut s).applied);
        assert_eq!(p.0.get(0, 0), 1.0);
        assert_eq!(s.skipped, 1);
    }

    #[test]
    fn rmsprop_descends_quadratic() {
        // f(x) = (x - 3)^2 / 2
        let mut p = one(&[0.0]);
        let mut cfg = OptimizerConfig::rmsprop();
        cfg.step_size = 1e-2;
        let mut s = OptimizerState::new(cfg).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let x = p.0.get(0, 0);
            let f = (x - 3.0) * (x - 3.0) / 2.0;
            assert!(f < prev);
            prev = f;
            let mut g = one(&[x - 3.0]);
            clip_and_step(&mut p, &mut g, &mut s);
        }
    }

    #[test]
    fn per_fixtures() {
        let refs = vec![vec![0, 1, 2], vec![1, 1], vec![2, 0, 1, 0]];
        assert_eq!(phone_error_rate(&refs, &refs, None).unwrap().0, 0.0);
        let empty = vec![vec![]; 3];
        assert_eq!(phone_error_rate(&empty, &refs, None).unwrap().0, 1.0);
        // 1 substitution, 1 deletion, 1 insertion over 9 reference tokens.
        let hyps = vec![vec![0, 2, 2], vec![1], vec![2, 0, 1, 0, 0]];
        let (per, errors, total) = phone_error_rate(&hyps, &refs, None).unwrap();
        assert_eq!((errors, total), (3, 9));
        assert!((per - 1.0 / 3.0).abs() < 1e-15);
        // Collapsing 2 onto 1 turns the substitution into a match.
        let map = [0, 1, 1];
        assert_eq!(phone_error_rate(&hyps, &refs, Some(&map)).unwrap().1, 2);
    }

    #[test]
    fn upstream_required() {
        assert!(require_upstream(Stage::Finetune, false).is_err());
        assert!(require_upstream(Stage::DecoderFrozen, true).is_ok());
        assert!(require_upstream(Stage::EndToEnd, false).is_ok());
    }
}
