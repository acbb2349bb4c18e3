//! A complete model (encoder plus segment weight function), per-utterance
//! objectives with gradients for every parameter, and decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dp::{max_path, Path};
use crate::encoder::{
    classifier_head, encode, encoder_backward, head_backward, EncoderConfig, EncoderOutputs, EncoderParams, Mode,
};
use crate::error::{invalid, Error, Result};
use crate::lattice::{build_ctc_space, build_label_chain, build_segmental_space, LabelId, RepeatPolicy, SearchSpace};
use crate::losses::{ctc_collapse, ctc_loss, frame_cross_entropy, hinge_loss, log_loss, marginal_log_loss, CostFunction};
use crate::math::Mat;
use crate::params::{rng_from_seed, ParamSet};
use crate::weights::{backprop_edges, score_all_edges, DecoderConfig, DecoderParams};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub repeats: RepeatPolicy,
    /// Multiplier on the overlap cost in the hinge loss.
    pub cost_scale: f64,
}

impl ModelConfig {
    pub fn num_labels(&self) -> usize {
        self.encoder.num_labels
    }

    /// Index of the CTC blank: one past the last label.
    pub fn blank(&self) -> LabelId {
        self.encoder.num_labels
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.max_duration == 0 {
            return Err(invalid("max duration must be positive"));
        }
        if !(self.cost_scale >= 0.0) {
            return Err(invalid("cost scale must be non-negative"));
        }
        Ok(())
    }
}

/// All trainable parameters, split into the encoder and decoder partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = self.encoder.tensors();
        out.extend(self.decoder.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(&config.encoder, seed);
        let mut rng = rng_from_seed(seed ^ 0x5EC0_DE12);
        let decoder = DecoderParams::init(&config.decoder, config.num_labels(), config.encoder.output_dim(), &mut rng);
        Ok(Model {
            config,
            params: ModelParams { encoder, decoder },
        })
    }

    /// Copies the encoder's frame head into the FC classifier, so a
    /// pretrained encoder starts the decoder from its own posteriors.
    pub fn seed_fc_classifier(&mut self) {
        if let DecoderParams::Fc(fc) = &mut self.params.decoder {
            fc.classifier = self.params.encoder.frame_head.clone();
        }
    }

    pub fn encode(&self, features: &Mat, mode: Mode) -> Result<EncoderOutputs> {
        Ok(encode(features, &self.params.encoder, &self.config.encoder, mode)?.0)
    }

    pub fn segmental_space(&self, frames: usize) -> Result<SearchSpace> {
        build_segmental_space(frames, self.config.num_labels(), self.config.decoder.max_duration)
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x d` features.
    pub features: Mat,
    pub labels: Vec<LabelId>,
    /// `(label, start, end)` triples tiling `[0, T)`, when known.
    pub segments: Option<Vec<(LabelId, usize, usize)>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Per-frame labels from the segmentation.
    pub fn frame_labels(&self) -> Result<Vec<LabelId>> {
        let segs = self
            .segments
            .as_ref()
            .ok_or_else(|| invalid(format!("utterance {} has no segmentation", self.id)))?;
        segments_to_frames(segs, self.frames())
    }
}

pub fn segments_to_frames(segments: &[(LabelId, usize, usize)], frames: usize) -> Result<Vec<LabelId>> {
    let mut out = Vec::with_capacity(frames);
    for &(l, s, t) in segments {
        if s != out.len() || t <= s {
            return Err(invalid(format!("segment ({l}, {s}, {t}) does not continue the tiling")));
        }
        out.extend(core::iter::repeat_n(l, t - s));
    }
    if out.len() != frames {
        return Err(invalid(format!("segments cover {} of {frames} frames", out.len())));
    }
    Ok(out)
}

/// Keeps every `factor`-th frame label, starting at frame 0.
pub fn subsample_frame_labels(labels: &[LabelId], factor: usize) -> Vec<LabelId> {
    labels.iter().step_by(factor.max(1)).copied().collect()
}

/// Maps a segmentation at input resolution onto subsampled frames: frame `i`
/// of the output reads input frame `factor * i`, so segment `[s, t)` becomes
/// `[⌈s/f⌉, ⌈t/f⌉)`. Segments that vanish are dropped.
pub fn subsample_segments(segments: &[(LabelId, usize, usize)], factor: usize) -> Vec<(LabelId, usize, usize)> {
    let f = factor.max(1);
    segments
        .iter()
        .map(|&(l, s, t)| (l, s.div_ceil(f), t.div_ceil(f)))
        .filter(|&(_, s, t)| t > s)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SegmentalLoss {
    Hinge,
    Log,
    MarginalLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EncoderLoss {
    FrameCrossEntropy,
    Ctc,
}

/// What a training step minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Objective {
    Segmental(SegmentalLoss),
    Encoder(EncoderLoss),
    /// `λ·segmental + (1 − λ)·encoder`.
    Multitask {
        segmental: SegmentalLoss,
        encoder: EncoderLoss,
        lambda: f64,
    },
}

impl Objective {
    fn parts(&self) -> (Option<(SegmentalLoss, f64)>, Option<(EncoderLoss, f64)>) {
        match *self {
            Objective::Segmental(s) => (Some((s, 1.0)), None),
            Objective::Encoder(e) => (None, Some((e, 1.0))),
            Objective::Multitask {
                segmental,
                encoder,
                lambda,
            } => (
                (lambda != 0.0).then_some((segmental, lambda)),
                (lambda != 1.0).then_some((encoder, 1.0 - lambda)),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Objective::Multitask { lambda, .. } = self {
            if !(0.0..=1.0).contains(lambda) {
                return Err(invalid(format!("lambda {lambda} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The decoder that matches what this objective trains.
    pub fn decode_kind(&self) -> DecodeKind {
        match self {
            Objective::Segmental(_) | Objective::Multitask { .. } => DecodeKind::Segmental,
            Objective::Encoder(EncoderLoss::Ctc) => DecodeKind::Ctc,
            Objective::Encoder(EncoderLoss::FrameCrossEntropy) => DecodeKind::Frame,
        }
    }
}

/// Which partition needs gradients. Skipping the encoder avoids the
/// backward pass through time when it is frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Partition {
    All,
    Encoder,
    Decoder,
    /// Loss value only.
    Nothing,
}

impl Partition {
    pub fn includes_encoder(self) -> bool {
        matches!(self, Partition::All | Partition::Encoder)
    }

    pub fn includes_decoder(self) -> bool {
        matches!(self, Partition::All | Partition::Decoder)
    }
}

/// A loss value and its gradient with respect to every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub value: f64,
    pub grads: ModelParams,
}

impl Model {
    fn segmental_term(
        &self,
        utt: &Utterance,
        enc: &EncoderOutputs,
        loss: SegmentalLoss,
        need_grads: bool,
    ) -> Result<(f64, Option<(DecoderParams, Mat)>)> {
        let space = self.segmental_space(enc.frames())?;
        let (table, cache) = score_all_edges(&space, enc, &self.params.decoder, &self.config.decoder)?;
        let w = &table.values;
        let factor = self.config.encoder.time_factor();
        let result = match loss {
            SegmentalLoss::MarginalLog => marginal_log_loss(&space, w, &build_label_chain(&utt.labels)?)?,
            SegmentalLoss::Hinge | SegmentalLoss::Log => {
                let segs = utt
                    .segments
                    .as_ref()
                    .ok_or_else(|| invalid(format!("utterance {} has no segmentation", utt.id)))?;
                let truth = Path::from_segments(&space, &subsample_segments(segs, factor))?;
                if loss == SegmentalLoss::Hinge {
                    let frames = subsample_frame_labels(&utt.frame_labels()?, factor);
                    let cost =
                        CostFunction::from_frame_labels(frames, self.config.num_labels()).with_scale(self.config.cost_scale);
                    hinge_loss(&space, w, &truth, &cost)?
                } else {
                    log_loss(&space, w, &truth)?
                }
            }
        };
        if !need_grads {
            return Ok((result.value, None));
        }
        let (grads, d_h) = backprop_edges(
            &space,
            enc,
            &self.params.decoder,
            &self.config.decoder,
            &cache,
            &result.grads,
        )?;
        Ok((result.value, Some((grads, d_h))))
    }

    /// Encoder-loss term; head gradients scaled by `weight` are added to
    /// `grads`, and the returned `∂L/∂h` is already scaled.
    fn encoder_term(
        &self,
        utt: &Utterance,
        enc: &EncoderOutputs,
        loss: EncoderLoss,
        weight: f64,
        grads: &mut EncoderParams,
    ) -> Result<(f64, Mat)> {
        let p = &self.params.encoder;
        let (result, head, head_grads) = match loss {
            EncoderLoss::FrameCrossEntropy => {
                let z = classifier_head(enc, &p.frame_head);
                let labels = subsample_frame_labels(&utt.frame_labels()?, self.config.encoder.time_factor());
                (frame_cross_entropy(&z, &labels)?, &p.frame_head, &mut grads.frame_head)
            }
            EncoderLoss::Ctc => {
                let z = classifier_head(enc, &p.ctc_head);
                (
                    ctc_loss(&z, &utt.labels, self.config.blank(), self.config.repeats)?,
                    &p.ctc_head,
                    &mut grads.ctc_head,
                )
            }
        };
        let mut d_logits = result.grads;
        d_logits.iter_mut().for_each(|g| *g *= weight);
        let d_h = head_backward(enc, head, &d_logits, head_grads);
        Ok((result.value, d_h))
    }

    /// Loss and gradients for one utterance. Gradients outside `wrt` are
    /// left at zero.
    pub fn evaluate(&self, utt: &Utterance, objective: &Objective, mode: Mode, wrt: Partition) -> Result<Evaluated> {
        objective.validate()?;
        let (enc, cache) = encode(&utt.features, &self.params.encoder, &self.config.encoder, mode)?;
        let (seg, enc_loss) = objective.parts();
        let mut grads = self.params.zeros_like();
        let mut d_h = Mat::zeros(enc.frames(), enc.dim());
        let mut value = 0.0;
        if let Some((loss, weight)) = seg {
            let need = wrt != Partition::Nothing;
            let (v, g) = self.segmental_term(utt, &enc, loss, need)?;
            value += weight * v;
            if let Some((dg, dh)) = g {
                if wrt.includes_decoder() {
                    grads.decoder.add_scaled(weight, &dg);
                }
                d_h.add_scaled(weight, &dh);
            }
        }
        if let Some((loss, weight)) = enc_loss {
            let (v, dh) = self.encoder_term(utt, &enc, loss, weight, &mut grads.encoder)?;
            value += weight * v;
            d_h.add_scaled(1.0, &dh);
        }
        if wrt.includes_encoder() {
            let eg = encoder_backward(&self.params.encoder, &self.config.encoder, &cache, &d_h)?;
            grads.encoder.add_scaled(1.0, &eg.params);
        } else {
            grads.encoder.zero();
        }
        Ok(Evaluated { value, grads })
    }

    /// Loss only, in evaluation mode.
    pub fn loss(&self, utt: &Utterance, objective: &Objective) -> Result<f64> {
        Ok(self.evaluate(utt, objective, Mode::Eval, Partition::Nothing)?.value)
    }

    /// Best segmental path under the current weights.
    pub fn decode_path(&self, features: &Mat) -> Result<(Path, SearchSpace)> {
        let enc = self.encode(features, Mode::Eval)?;
        let space = self.segmental_space(enc.frames())?;
        let (table, _) = score_all_edges(&space, &enc, &self.params.decoder, &self.config.decoder)?;
        let (path, _) = max_path(&space, &table.values)?;
        Ok((path, space))
    }

    pub fn decode(&self, features: &Mat, kind: DecodeKind) -> Result<Vec<LabelId>> {
        match kind {
            DecodeKind::Segmental => Ok(self.decode_path(features)?.0.labels),
            DecodeKind::Ctc => {
                let enc = self.encode(features, Mode::Eval)?;
                let z = classifier_head(&enc, &self.params.encoder.ctc_head);
                let space = build_ctc_space(z.rows(), z.cols(), self.config.blank())?;
                let (path, _) = max_path(&space, z.as_slice())?;
                Ok(ctc_collapse(&path.labels, self.config.blank()))
            }
            DecodeKind::Frame => {
                let enc = self.encode(features, Mode::Eval)?;
                let z = classifier_head(&enc, &self.params.encoder.frame_head);
                let frames: Vec<LabelId> = (0..z.rows()).map(|i| argmax(z.row(i))).collect();
                // No blank symbol exists here, so only runs are merged.
                Ok(ctc_collapse(&frames, usize::MAX))
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DecodeKind {
    /// Best segmental path, label sequence read off its edges.
    Segmental,
    /// Best CTC path with duplicates and blanks removed.
    Ctc,
    /// Per-frame argmax of the frame classifier with runs merged.
    Frame,
}

/// Reports whether `err` means the supervision cannot be expressed in the
/// search space (too many labels or too-long segments), rather than a bug.
pub fn is_unrepresentable(err: &Error) -> bool {
    matches!(err, Error::EmptyLanguage | Error::PathNotInSpace(_))
}
