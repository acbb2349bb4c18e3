//! Segment weight functions and the dispatch between them.

pub mod fc;
pub mod srnn;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::dp::EdgeWeightTable;
use crate::encoder::EncoderOutputs;
use crate::error::{Error, Result};
use crate::lattice::SearchSpace;
use crate::math::Mat;
use crate::params::ParamSet;

pub use fc::{fc_score, FcConfig, FcParams};
pub use srnn::{srnn_score, SrnnConfig, SrnnParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WeightFnKind {
    Fc,
    #[default]
    Srnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecoderConfig {
    pub kind: WeightFnKind,
    pub max_duration: usize,
    pub fc: FcConfig,
    pub srnn: SrnnConfig,
}

impl DecoderConfig {
    pub fn new(kind: WeightFnKind, max_duration: usize) -> Self {
        DecoderConfig {
            kind,
            max_duration,
            fc: FcConfig::default(),
            srnn: SrnnConfig::default(),
        }
    }
}

/// Decoder parameters for whichever weight function is active.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderParams {
    Fc(FcParams),
    Srnn(SrnnParams),
}

impl DecoderParams {
    pub fn init(config: &DecoderConfig, num_labels: usize, enc_dim: usize, rng: &mut impl Rng) -> Self {
        match config.kind {
            WeightFnKind::Fc => DecoderParams::Fc(FcParams::init(num_labels, enc_dim, config.max_duration, rng)),
            WeightFnKind::Srnn => DecoderParams::Srnn(SrnnParams::init(
                num_labels,
                enc_dim,
                config.max_duration,
                &config.srnn,
                rng,
            )),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            DecoderParams::Fc(p) => DecoderParams::Fc(p.zeros_like()),
            DecoderParams::Srnn(p) => DecoderParams::Srnn(p.zeros_like()),
        }
    }

    pub fn kind(&self) -> WeightFnKind {
        match self {
            DecoderParams::Fc(_) => WeightFnKind::Fc,
            DecoderParams::Srnn(_) => WeightFnKind::Srnn,
        }
    }
}

impl ParamSet for DecoderParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        match self {
            DecoderParams::Fc(p) => p.tensors(),
            DecoderParams::Srnn(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            DecoderParams::Fc(p) => p.tensors_mut(),
            DecoderParams::Srnn(p) => p.tensors_mut(),
        }
    }
}

/// Per-utterance intermediate values shared by scoring and backprop.
#[derive(Clone, Debug)]
pub enum ScoreCache {
    Fc(fc::FcCache),
    Srnn(srnn::SrnnCache),
}

fn check_space(space: &SearchSpace, enc: &EncoderOutputs, params: &DecoderParams, max_duration: usize) -> Result<()> {
    if space.num_frames() != enc.frames() {
        return Err(Error::ShapeMismatch(format!(
            "space spans {} frames, encoder produced {}",
            space.num_frames(),
            enc.frames()
        )));
    }
    let labels = match params {
        DecoderParams::Fc(p) => p.num_labels(),
        DecoderParams::Srnn(p) => p.label_embeddings.rows(),
    };
    for e in space.edges() {
        if e.label >= labels {
            return Err(Error::ShapeMismatch(format!("edge label {} outside alphabet of {labels}", e.label)));
        }
        if e.duration() == 0 || e.duration() > max_duration {
            return Err(Error::ShapeMismatch(format!(
                "edge duration {} outside 1..={max_duration}",
                e.duration()
            )));
        }
    }
    Ok(())
}

fn max_duration(params: &DecoderParams) -> usize {
    match params {
        DecoderParams::Fc(p) => p.max_duration(),
        DecoderParams::Srnn(p) => {
            // Largest duration whose bucket has an embedding row.
            let buckets = p.duration_embeddings.rows();
            (1usize << buckets) - 1
        }
    }
}

/// Scores every edge of `space` once.
pub fn score_all_edges(
    space: &SearchSpace,
    enc: &EncoderOutputs,
    params: &DecoderParams,
    config: &DecoderConfig,
) -> Result<(EdgeWeightTable, ScoreCache)> {
    check_space(space, enc, params, max_duration(params))?;
    Ok(match params {
        DecoderParams::Fc(p) => {
            let cache = fc::precompute(enc, p);
            let w = fc::score_edges(space, &cache, p, &config.fc);
            (EdgeWeightTable::new(w), ScoreCache::Fc(cache))
        }
        DecoderParams::Srnn(p) => {
            let cache = srnn::precompute(enc, p);
            let w = srnn::score_edges(space, &cache, p);
            (EdgeWeightTable::new(w), ScoreCache::Srnn(cache))
        }
    })
}

/// Gradients of the decoder parameters and encoder outputs given `∂L/∂w(e)`
/// for every edge.
pub fn backprop_edges(
    space: &SearchSpace,
    enc: &EncoderOutputs,
    params: &DecoderParams,
    config: &DecoderConfig,
    cache: &ScoreCache,
    edge_grads: &[f64],
) -> Result<(DecoderParams, Mat)> {
    if edge_grads.len() != space.num_edges() {
        return Err(Error::ShapeMismatch(format!(
            "{} edge gradients for {} edges",
            edge_grads.len(),
            space.num_edges()
        )));
    }
    let mut grads = params.zeros_like();
    let d_h = match (params, cache, &mut grads) {
        (DecoderParams::Fc(p), ScoreCache::Fc(c), DecoderParams::Fc(g)) => {
            fc::backprop(space, enc, c, p, &config.fc, edge_grads, g)
        }
        (DecoderParams::Srnn(p), ScoreCache::Srnn(c), DecoderParams::Srnn(g)) => {
            srnn::backprop(space, enc, c, p, edge_grads, g)
        }
        _ => return Err(Error::ShapeMismatch("score cache does not match weight function".into())),
    };
    Ok((grads, d_h))
}
