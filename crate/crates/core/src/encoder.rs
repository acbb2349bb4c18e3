//! Multi-layer bidirectional LSTM encoder with optional pyramid subsampling
//! and the two classifier heads (frame labels, CTC symbols).
//!
//! Each layer runs a forward and a backward LSTM over its input and combines
//! the directional outputs as `h_t = W_f h^f_t + W_b h^b_t`. With the pyramid
//! enabled, the output of every layer after the first is subsampled by two
//! before it reaches the next layer (or the weight function).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::math::{log_softmax_in_place, sigmoid, tanh, Mat};
use crate::params::{glorot, rng_from_seed, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Subsample {
    /// Keep even-indexed frames.
    #[default]
    Select,
    /// Concatenate frame pairs (the last frame of an odd-length input is
    /// paired with zeros).
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Units per direction; also the width of each layer's combined output.
    pub hidden: usize,
    pub layers: usize,
    pub pyramid: bool,
    pub subsample: Subsample,
    pub dropout: f64,
    /// Frame-label alphabet size. The CTC head has one extra output (blank).
    pub num_labels: usize,
}

impl EncoderConfig {
    fn subsamples_after(&self, layer: usize) -> bool {
        self.pyramid && layer >= 1
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layer_output_dim(layer - 1)
        }
    }

    fn layer_output_dim(&self, layer: usize) -> usize {
        if self.subsamples_after(layer) && self.subsample == Subsample::Concat {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    /// Width of the encoder outputs `h_i`.
    pub fn output_dim(&self) -> usize {
        self.layer_output_dim(self.layers - 1)
    }

    /// Number of encoder outputs for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        (0..self.layers)
            .filter(|&l| self.subsamples_after(l))
            .fold(frames, |t, _| t.div_ceil(2))
    }

    /// Subsampling factor between input frames and encoder outputs.
    pub fn time_factor(&self) -> usize {
        (0..self.layers)
            .filter(|&l| self.subsamples_after(l))
            .fold(1, |f, _| f * 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(invalid("encoder needs at least one layer, one unit and one input dim"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate rows are ordered input, forget, output,
/// candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: Mat,
    pub w_recurrent: Mat,
    pub bias: Mat,
}

impl LstmParams {
    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            w_input: glorot(4 * hidden, input, rng),
            w_recurrent: glorot(4 * hidden, hidden, rng),
            bias: Mat::zeros(4 * hidden, 1),
        }
    }

    fn zeros_like(&self) -> Self {
        LstmParams {
            w_input: self.w_input.zeros_like(),
            w_recurrent: self.w_recurrent.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn hidden(&self) -> usize {
        self.w_recurrent.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub combine_forward: Mat,
    pub combine_backward: Mat,
}

/// Linear projection followed by log-softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Mat,
    pub bias: Mat,
}

impl HeadParams {
    pub fn init(outputs: usize, inputs: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            weight: glorot(outputs, inputs, rng),
            bias: Mat::zeros(outputs, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

/// Encoder parameters: LSTM layers, combination matrices, and both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
    pub frame_head: HeadParams,
    pub ctc_head: HeadParams,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|l| {
                let input = config.layer_input_dim(l);
                LayerParams {
                    forward: LstmParams::init(input, h, &mut rng),
                    backward: LstmParams::init(input, h, &mut rng),
                    combine_forward: glorot(h, h, &mut rng),
                    combine_backward: glorot(h, h, &mut rng),
                }
            })
            .collect();
        let out = config.output_dim();
        EncoderParams {
            layers,
            frame_head: HeadParams::init(config.num_labels, out, &mut rng),
            ctc_head: HeadParams::init(config.num_labels + 1, out, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    forward: l.forward.zeros_like(),
                    backward: l.backward.zeros_like(),
                    combine_forward: l.combine_forward.zeros_like(),
                    combine_backward: l.combine_backward.zeros_like(),
                })
                .collect(),
            frame_head: self.frame_head.zeros_like(),
            ctc_head: self.ctc_head.zeros_like(),
        }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (dir, p) in [("fwd", &l.forward), ("bwd", &l.backward)] {
                out.push((format!("enc.layer{i}.{dir}.w_input"), &p.w_input));
                out.push((format!("enc.layer{i}.{dir}.w_recurrent"), &p.w_recurrent));
                out.push((format!("enc.layer{i}.{dir}.bias"), &p.bias));
            }
            out.push((format!("enc.layer{i}.combine_fwd"), &l.combine_forward));
            out.push((format!("enc.layer{i}.combine_bwd"), &l.combine_backward));
        }
        out.push(("enc.frame_head.weight".into(), &self.frame_head.weight));
        out.push(("enc.frame_head.bias".into(), &self.frame_head.bias));
        out.push(("enc.ctc_head.weight".into(), &self.ctc_head.weight));
        out.push(("enc.ctc_head.bias".into(), &self.ctc_head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            for p in [&mut l.forward, &mut l.backward] {
                out.push(&mut p.w_input);
                out.push(&mut p.w_recurrent);
                out.push(&mut p.bias);
            }
            out.push(&mut l.combine_forward);
            out.push(&mut l.combine_backward);
        }
        out.push(&mut self.frame_head.weight);
        out.push(&mut self.frame_head.bias);
        out.push(&mut self.ctc_head.weight);
        out.push(&mut self.ctc_head.bias);
        out
    }
}

/// Training mode draws dropout masks from the given seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Encoder outputs `h_1..h_T̃`, one row per output frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutputs {
    pub h: Mat,
}

impl EncoderOutputs {
    pub fn frames(&self) -> usize {
        self.h.rows()
    }

    pub fn dim(&self) -> usize {
        self.h.cols()
    }
}

#[derive(Clone, Debug)]
struct DirectionCache {
    /// Post-activation gates per frame, `4H` wide.
    gates: Mat,
    cells: Mat,
    outputs: Mat,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Mat,
    forward: DirectionCache,
    backward: DirectionCache,
    /// Inverted-dropout multipliers on the combined output (before
    /// subsampling).
    output_mask: Option<Mat>,
    full_frames: usize,
    subsampled: bool,
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input_frames: usize,
    input_mask: Option<Mat>,
    layers: Vec<LayerCache>,
}

/// Gradients from [`encoder_backward`].
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub params: EncoderParams,
    pub input: Mat,
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Mat {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Mat::from_vec(rows, cols, data)
}

fn apply_mask(x: &mut Mat, mask: &Mat) {
    for (v, &m) in x.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v *= m;
    }
}

fn run_direction(p: &LstmParams, input: &Mat, reverse: bool) -> DirectionCache {
    let frames = input.rows();
    let h = p.hidden();
    let mut gates = Mat::zeros(frames, 4 * h);
    let mut cells = Mat::zeros(frames, h);
    let mut outputs = Mat::zeros(frames, h);
    let mut prev_h = vec![0.0; h];
    let mut prev_c = vec![0.0; h];
    let mut pre = vec![0.0; 4 * h];
    for step in 0..frames {
        let t = if reverse { frames - 1 - step } else { step };
        pre.copy_from_slice(p.bias.as_slice());
        p.w_input.matvec_add(input.row(t), &mut pre);
        p.w_recurrent.matvec_add(&prev_h, &mut pre);
        let g = gates.row_mut(t);
        for k in 0..h {
            g[k] = sigmoid(pre[k]);
            g[h + k] = sigmoid(pre[h + k]);
            g[2 * h + k] = sigmoid(pre[2 * h + k]);
            g[3 * h + k] = tanh(pre[3 * h + k]);
        }
        for k in 0..h {
            let c = g[h + k] * prev_c[k] + g[k] * g[3 * h + k];
            prev_c[k] = c;
            prev_h[k] = g[2 * h + k] * tanh(c);
        }
        cells.row_mut(t).copy_from_slice(&prev_c);
        outputs.row_mut(t).copy_from_slice(&prev_h);
    }
    DirectionCache {
        gates,
        cells,
        outputs,
    }
}

/// Backpropagation through time for one direction. Accumulates parameter
/// gradients into `grads` and input gradients into `d_input`.
fn backprop_direction(
    p: &LstmParams,
    cache: &DirectionCache,
    input: &Mat,
    d_outputs: &Mat,
    reverse: bool,
    grads: &mut LstmParams,
    d_input: &mut Mat,
) {
    let frames = input.rows();
    let h = p.hidden();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut d_pre = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for step in (0..frames).rev() {
        let t = if reverse { frames - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let g = cache.gates.row(t);
        let c = cache.cells.row(t);
        let prev_c = prev.map_or(&zeros[..], |s| cache.cells.row(s));
        let prev_h = prev.map_or(&zeros[..], |s| cache.outputs.row(s));
        let dout = d_outputs.row(t);
        for k in 0..h {
            let dh = dout[k] + dh_next[k];
            let (i, f, o, cand) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = tanh(c[k]);
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            d_pre[k] = dc * cand * i * (1.0 - i);
            d_pre[h + k] = dc * prev_c[k] * f * (1.0 - f);
            d_pre[2 * h + k] = dh * tc * o * (1.0 - o);
            d_pre[3 * h + k] = dc * i * (1.0 - cand * cand);
            dc_next[k] = dc * f;
        }
        grads.w_input.add_outer(1.0, &d_pre, input.row(t));
        grads.w_recurrent.add_outer(1.0, &d_pre, prev_h);
        crate::math::axpy(1.0, &d_pre, grads.bias.as_mut_slice());
        p.w_input.matvec_t_add(&d_pre, d_input.row_mut(t));
        dh_next.iter_mut().for_each(|x| *x = 0.0);
        p.w_recurrent.matvec_t_add(&d_pre, &mut dh_next);
    }
}

fn subsample(x: &Mat, mode: Subsample) -> Mat {
    let frames = x.rows().div_ceil(2);
    match mode {
        Subsample::Select => {
            let mut out = Mat::zeros(frames, x.cols());
            for j in 0..frames {
                out.row_mut(j).copy_from_slice(x.row(2 * j));
            }
            out
        }
        Subsample::Concat => {
            let d = x.cols();
            let mut out = Mat::zeros(frames, 2 * d);
            for j in 0..frames {
                out.row_mut(j)[..d].copy_from_slice(x.row(2 * j));
                if 2 * j + 1 < x.rows() {
                    out.row_mut(j)[d..].copy_from_slice(x.row(2 * j + 1));
                }
            }
            out
        }
    }
}

fn unsubsample(d: &Mat, full_frames: usize, width: usize, mode: Subsample) -> Mat {
    let mut out = Mat::zeros(full_frames, width);
    for j in 0..d.rows() {
        match mode {
            Subsample::Select => out.row_mut(2 * j).copy_from_slice(d.row(j)),
            Subsample::Concat => {
                out.row_mut(2 * j).copy_from_slice(&d.row(j)[..width]);
                if 2 * j + 1 < full_frames {
                    out.row_mut(2 * j + 1).copy_from_slice(&d.row(j)[width..]);
                }
            }
        }
    }
    out
}

/// Runs the encoder on a `T x d` feature matrix.
pub fn encode(
    x: &Mat,
    params: &EncoderParams,
    config: &EncoderConfig,
    mode: Mode,
) -> Result<(EncoderOutputs, ForwardCache)> {
    if x.rows() == 0 {
        return Err(invalid("empty input"));
    }
    if x.cols() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} dims, encoder expects {}",
            x.cols(),
            config.input_dim
        )));
    }
    if params.layers.len() != config.layers {
        return Err(Error::ShapeMismatch("layer count differs from config".into()));
    }
    let mut rng = match mode {
        Mode::Train { seed } if config.dropout > 0.0 => Some(rng_from_seed(seed)),
        _ => None,
    };
    let mut cur = x.clone();
    let input_mask = rng
        .as_mut()
        .map(|r| dropout_mask(cur.rows(), cur.cols(), config.dropout, r));
    if let Some(m) = &input_mask {
        apply_mask(&mut cur, m);
    }
    let mut caches = Vec::with_capacity(config.layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let fwd = run_direction(&lp.forward, &cur, false);
        let bwd = run_direction(&lp.backward, &cur, true);
        let frames = cur.rows();
        let mut out = Mat::zeros(frames, config.hidden);
        for t in 0..frames {
            let row = out.row_mut(t);
            lp.combine_forward.matvec_add(fwd.outputs.row(t), row);
            lp.combine_backward.matvec_add(bwd.outputs.row(t), row);
        }
        let output_mask = rng
            .as_mut()
            .map(|r| dropout_mask(out.rows(), out.cols(), config.dropout, r));
        if let Some(m) = &output_mask {
            apply_mask(&mut out, m);
        }
        let subsampled = config.subsamples_after(l);
        if subsampled {
            out = subsample(&out, config.subsample);
        }
        caches.push(LayerCache {
            input: core::mem::replace(&mut cur, out),
            forward: fwd,
            backward: bwd,
            output_mask,
            full_frames: frames,
            subsampled,
        });
    }
    Ok((
        EncoderOutputs { h: cur },
        ForwardCache {
            input_frames: x.rows(),
            input_mask,
            layers: caches,
        },
    ))
}

/// Exact gradients of a scalar loss with respect to every encoder parameter
/// and the input features, given `∂L/∂h`. Head gradients are left at zero;
/// see [`head_backward`].
pub fn encoder_backward(
    params: &EncoderParams,
    config: &EncoderConfig,
    cache: &ForwardCache,
    d_outputs: &Mat,
) -> Result<EncoderGrads> {
    if cache.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch("cache does not match parameters".into()));
    }
    let expected = cache
        .layers
        .last()
        .map(|l| {
            if l.subsampled {
                (l.full_frames.div_ceil(2), config.output_dim())
            } else {
                (l.full_frames, config.hidden)
            }
        })
        .unwrap_or((0, 0));
    if d_outputs.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "output gradient is {:?}, encoder produced {:?}",
            d_outputs.shape(),
            expected
        )));
    }
    let mut grads = params.zeros_like();
    let mut d_cur = d_outputs.clone();
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let mut d_out = if lc.subsampled {
            unsubsample(&d_cur, lc.full_frames, config.hidden, config.subsample)
        } else {
            d_cur
        };
        if let Some(m) = &lc.output_mask {
            apply_mask(&mut d_out, m);
        }
        let h = config.hidden;
        let frames = lc.full_frames;
        let mut d_fwd = Mat::zeros(frames, h);
        let mut d_bwd = Mat::zeros(frames, h);
        let lg = &mut grads.layers[l];
        for t in 0..frames {
            let g = d_out.row(t);
            lg.combine_forward.add_outer(1.0, g, lc.forward.outputs.row(t));
            lg.combine_backward.add_outer(1.0, g, lc.backward.outputs.row(t));
            lp.combine_forward.matvec_t_add(g, d_fwd.row_mut(t));
            lp.combine_backward.matvec_t_add(g, d_bwd.row_mut(t));
        }
        let mut d_input = Mat::zeros(frames, lc.input.cols());
        backprop_direction(&lp.forward, &lc.forward, &lc.input, &d_fwd, false, &mut lg.forward, &mut d_input);
        backprop_direction(&lp.backward, &lc.backward, &lc.input, &d_bwd, true, &mut lg.backward, &mut d_input);
        d_cur = d_input;
    }
    if let Some(m) = &cache.input_mask {
        apply_mask(&mut d_cur, m);
    }
    debug_assert_eq!(d_cur.rows(), cache.input_frames);
    Ok(EncoderGrads {
        params: grads,
        input: d_cur,
    })
}

/// `z_i = logsoftmax(W h_i + b)` for every encoder output.
pub fn classifier_head(enc: &EncoderOutputs, head: &HeadParams) -> Mat {
    let k = head.outputs();
    let mut out = Mat::zeros(enc.frames(), k);
    for i in 0..enc.frames() {
        let row = out.row_mut(i);
        row.copy_from_slice(head.bias.as_slice());
        head.weight.matvec_add(enc.h.row(i), row);
        log_softmax_in_place(row);
    }
    out
}

/// Given `∂L/∂logits` (row per frame), accumulates head gradients and
/// returns `∂L/∂h`.
pub fn head_backward(
    enc: &EncoderOutputs,
    head: &HeadParams,
    d_logits: &[f64],
    grads: &mut HeadParams,
) -> Mat {
    let k = head.outputs();
    let mut d_h = Mat::zeros(enc.frames(), enc.dim());
    for i in 0..enc.frames() {
        let g = &d_logits[i * k..(i + 1) * k];
        grads.weight.add_outer(1.0, g, enc.h.row(i));
        crate::math::axpy(1.0, g, grads.bias.as_mut_slice());
        head.weight.matvec_t_add(g, d_h.row_mut(i));
    }
    d_h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_sum_exp;

    fn config(pyramid: bool) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden: 4,
            layers: 3,
            pyramid,
            subsample: Subsample::Select,
            dropout: 0.0,
            num_labels: 5,
        }
    }

    fn features(frames: usize, dim: usize) -> Mat {
        let data = (0..frames * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        Mat::from_vec(frames, dim, data)
    }

    #[test]
    fn pyramid_output_frames() {
        let c = config(true);
        assert_eq!(c.output_frames(12), 3);
        assert_eq!(c.output_frames(13), 4);
        let p = EncoderParams::init(&c, 1);
        let (out, _) = encode(&features(13, 3), &p, &c, Mode::Eval).unwrap();
        assert_eq!(out.frames(), 4);
        assert_eq!(config(false).output_frames(13), 13);
    }

    #[test]
    fn pyramid_halving_is_iterated_ceiling() {
        for layers in 1..=4 {
            let c = EncoderConfig { layers, ..config(true) };
            for t in 1..=100usize {
                let mut expect = t;
                for _ in 1..layers {
                    expect = expect.div_ceil(2);
                }
                assert_eq!(c.output_frames(t), expect);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let c = config(false);
        let mut p = EncoderParams::init(&c, 1);
        p.zero();
        let (out, _) = encode(&features(6, 3), &p, &c, Mode::Eval).unwrap();
        assert!(out.h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let c = EncoderConfig { dropout: 0.2, ..config(true) };
        let p = EncoderParams::init(&c, 9);
        let x = features(9, 3);
        let a = encode(&x, &p, &c, Mode::Train { seed: 4 }).unwrap().0;
        let b = encode(&x, &p, &c, Mode::Train { seed: 4 }).unwrap().0;
        assert_eq!(a, b);
        let e = encode(&x, &p, &c, Mode::Eval).unwrap().0;
        assert_ne!(a, e);
    }

    #[test]
    fn concat_subsampling_doubles_width() {
        let c = EncoderConfig { subsample: Subsample::Concat, ..config(true) };
        assert_eq!(c.output_dim(), 8);
        let p = EncoderParams::init(&c, 2);
        let (out, cache) = encode(&features(7, 3), &p, &c, Mode::Eval).unwrap();
        assert_eq!(out.h.shape(), (2, 8));
        let g = encoder_backward(&p, &c, &cache, &Mat::zeros(2, 8)).unwrap();
        assert_eq!(g.params.sum_sq(), 0.0);
    }

    #[test]
    fn classifier_rows_normalized() {
        let c = config(false);
        let p = EncoderParams::init(&c, 5);
        let (out, _) = encode(&features(5, 3), &p, &c, Mode::Eval).unwrap();
        let z = classifier_head(&out, &p.frame_head);
        for i in 0..z.rows() {
            assert!(log_sum_exp(z.row(i)).abs() < 1e-12);
        }
        let mut zero = p.frame_head.clone();
        zero.weight.fill(0.0);
        let z = classifier_head(&out, &zero);
        assert!(z.as_slice().iter().all(|&v| (v + 5f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = config(false);
        let p = EncoderParams::init(&c, 5);
        assert!(encode(&Mat::zeros(0, 3), &p, &c, Mode::Eval).is_err());
        assert!(encode(&Mat::zeros(4, 2), &p, &c, Mode::Eval).is_err());
        let (_, cache) = encode(&features(4, 3), &p, &c, Mode::Eval).unwrap();
        assert!(encoder_backward(&p, &c, &cache, &Mat::zeros(3, 4)).is_err());
    }
}
