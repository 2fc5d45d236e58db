//! Convolutional LSTM cell with Hadamard peephole connections, sequence
//! unrolling, and the reshape plumbing between frame-batched `[B*T,C,H,W]`
//! and clip-batched `[B,T,C,H,W]` layouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Padding};
use crate::tensor::{GraphTape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLstmConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: (usize, usize),
    /// Spatial extent of the feature maps; fixes the peephole map shapes.
    pub spatial: (usize, usize),
    /// Eq.-literal peephole connections; switchable off since published
    /// implementations commonly drop them.
    #[serde(default = "default_peephole")]
    pub peephole: bool,
}

fn default_peephole() -> bool {
    true
}

/// The full weight set of the cell: four input-conv kernels, four
/// hidden-conv kernels, three peephole maps, four gate biases.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub cfg: ConvLstmConfig,
    pub w_xi: Tensor,
    pub w_xf: Tensor,
    pub w_xc: Tensor,
    pub w_xo: Tensor,
    pub w_hi: Tensor,
    pub w_hf: Tensor,
    pub w_hc: Tensor,
    pub w_ho: Tensor,
    pub w_ci: Tensor,
    pub w_cf: Tensor,
    pub w_co: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

/// Canonical parameter names, in serialization order.
pub const PARAM_NAMES: [&str; 15] = [
    "W_xi", "W_xf", "W_xc", "W_xo", "W_hi", "W_hf", "W_hc", "W_ho", "W_ci", "W_cf", "W_co",
    "b_i", "b_f", "b_c", "b_o",
];

impl ConvLstmCell {
    /// Input/hidden kernels from a seeded uniform `+-1/sqrt(fan_in)`;
    /// peepholes and biases zero, so the first steps behave like a plain
    /// ConvLSTM.
    pub fn init(cfg: ConvLstmConfig, rng: &mut impl Rng) -> Self {
        let (kh, kw) = cfg.kernel;
        let x_limit = 1.0 / ((cfg.in_channels * kh * kw) as f64).sqrt();
        let h_limit = 1.0 / ((cfg.hidden_channels * kh * kw) as f64).sqrt();
        let mut cell = Self::zeros(cfg);
        for name in ["W_xi", "W_xf", "W_xc", "W_xo"] {
            let t = cell.param_mut(name).unwrap();
            *t = Tensor::uniform(t.shape().to_vec(), x_limit, rng);
        }
        for name in ["W_hi", "W_hf", "W_hc", "W_ho"] {
            let t = cell.param_mut(name).unwrap();
            *t = Tensor::uniform(t.shape().to_vec(), h_limit, rng);
        }
        cell
    }

    pub fn zeros(cfg: ConvLstmConfig) -> Self {
        let (kh, kw) = cfg.kernel;
        let (h, w) = cfg.spatial;
        let hid = cfg.hidden_channels;
        let x_shape = vec![hid, cfg.in_channels, kh, kw];
        let h_shape = vec![hid, hid, kh, kw];
        ConvLstmCell {
            w_xi: Tensor::zeros(x_shape.clone()),
            w_xf: Tensor::zeros(x_shape.clone()),
            w_xc: Tensor::zeros(x_shape.clone()),
            w_xo: Tensor::zeros(x_shape),
            w_hi: Tensor::zeros(h_shape.clone()),
            w_hf: Tensor::zeros(h_shape.clone()),
            w_hc: Tensor::zeros(h_shape.clone()),
            w_ho: Tensor::zeros(h_shape),
            w_ci: Tensor::zeros(vec![hid, h, w]),
            w_cf: Tensor::zeros(vec![hid, h, w]),
            w_co: Tensor::zeros(vec![hid, h, w]),
            b_i: Tensor::zeros(vec![hid]),
            b_f: Tensor::zeros(vec![hid]),
            b_c: Tensor::zeros(vec![hid]),
            b_o: Tensor::zeros(vec![hid]),
            cfg,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("W_xi", &self.w_xi),
            ("W_xf", &self.w_xf),
            ("W_xc", &self.w_xc),
            ("W_xo", &self.w_xo),
            ("W_hi", &self.w_hi),
            ("W_hf", &self.w_hf),
            ("W_hc", &self.w_hc),
            ("W_ho", &self.w_ho),
            ("W_ci", &self.w_ci),
            ("W_cf", &self.w_cf),
            ("W_co", &self.w_co),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "W_xi" => &mut self.w_xi,
            "W_xf" => &mut self.w_xf,
            "W_xc" => &mut self.w_xc,
            "W_xo" => &mut self.w_xo,
            "W_hi" => &mut self.w_hi,
            "W_hf" => &mut self.w_hf,
            "W_hc" => &mut self.w_hc,
            "W_ho" => &mut self.w_ho,
            "W_ci" => &mut self.w_ci,
            "W_cf" => &mut self.w_cf,
            "W_co" => &mut self.w_co,
            "b_i" => &mut self.b_i,
            "b_f" => &mut self.b_f,
            "b_c" => &mut self.b_c,
            "b_o" => &mut self.b_o,
            _ => return None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every weight as a tape leaf and returns the tracked cell.
    pub fn tracked(&self, tape: &mut GraphTape, requires_grad: bool) -> ConvLstmCell {
        let mut cell = self.clone();
        for name in PARAM_NAMES {
            let tracked = tape.leaf(cell.param_mut(name).unwrap(), requires_grad);
            *cell.param_mut(name).unwrap() = tracked;
        }
        cell
    }

    pub fn zero_state(&self, batch: usize) -> (Tensor, Tensor) {
        let (h, w) = self.cfg.spatial;
        let shape = vec![batch, self.cfg.hidden_channels, h, w];
        (Tensor::zeros(shape.clone()), Tensor::zeros(shape))
    }
}

/// Clip-batched tensor `[B, T, C, H, W]`.
#[derive(Clone, Debug)]
pub struct SequenceTensor {
    tensor: Tensor,
}

impl SequenceTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 5 {
            return Err(Error::shape(
                "SequenceTensor",
                format!("expected [B,T,C,H,W], got {:?}", tensor.shape()),
            ));
        }
        Ok(SequenceTensor { tensor })
    }

    pub fn clips(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }
}

fn check_step_geometry(cell: &ConvLstmCell, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<usize> {
    let (n, c_in, h, w) = x.dims4()?;
    let cfg = &cell.cfg;
    if c_in != cfg.in_channels || (h, w) != cfg.spatial {
        return Err(Error::shape(
            "convlstm_step",
            format!(
                "input {:?} does not match cell geometry (in_channels {}, spatial {:?})",
                x.shape(),
                cfg.in_channels,
                cfg.spatial
            ),
        ));
    }
    let want = [n, cfg.hidden_channels, h, w];
    if h_prev.shape() != want || c_prev.shape() != want {
        return Err(Error::shape(
            "convlstm_step",
            format!("state shapes {:?}/{:?} != {:?}", h_prev.shape(), c_prev.shape(), want),
        ));
    }
    Ok(n)
}

/// One recurrence step:
///
/// ```text
/// i  = sigma(W_xi*x + W_hi*h + W_ci o c + b_i)
/// f  = sigma(W_xf*x + W_hf*h + W_cf o c + b_f)
/// c' = f o c + i o tanh(W_xc*x + W_hc*h + b_c)
/// o  = sigma(W_xo*x + W_ho*h + W_co o c' + b_o)
/// h' = o o tanh(c')
/// ```
pub fn convlstm_step(
    tape: &mut GraphTape,
    cell: &ConvLstmCell,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_step_geometry(cell, x, h_prev, c_prev)?;
    let conv = |tape: &mut GraphTape, inp: &Tensor, w: &Tensor, b: Option<&Tensor>| {
        ops::conv2d(tape, inp, w, b, 1, 1, Padding::Same)
    };

    let mut i_pre = {
        let xi = conv(tape, x, &cell.w_xi, Some(&cell.b_i))?;
        let hi = conv(tape, h_prev, &cell.w_hi, None)?;
        ops::add(tape, &xi, &hi)?
    };
    let mut f_pre = {
        let xf = conv(tape, x, &cell.w_xf, Some(&cell.b_f))?;
        let hf = conv(tape, h_prev, &cell.w_hf, None)?;
        ops::add(tape, &xf, &hf)?
    };
    if cell.cfg.peephole {
        let ci = ops::mul_map(tape, c_prev, &cell.w_ci)?;
        i_pre = ops::add(tape, &i_pre, &ci)?;
        let cf = ops::mul_map(tape, c_prev, &cell.w_cf)?;
        f_pre = ops::add(tape, &f_pre, &cf)?;
    }
    let i_gate = ops::sigmoid(tape, &i_pre);
    let f_gate = ops::sigmoid(tape, &f_pre);

    let cand = {
        let xc = conv(tape, x, &cell.w_xc, Some(&cell.b_c))?;
        let hc = conv(tape, h_prev, &cell.w_hc, None)?;
        let pre = ops::add(tape, &xc, &hc)?;
        ops::tanh(tape, &pre)
    };
    let c_new = {
        let keep = ops::mul(tape, &f_gate, c_prev)?;
        let write = ops::mul(tape, &i_gate, &cand)?;
        ops::add(tape, &keep, &write)?
    };

    let mut o_pre = {
        let xo = conv(tape, x, &cell.w_xo, Some(&cell.b_o))?;
        let ho = conv(tape, h_prev, &cell.w_ho, None)?;
        ops::add(tape, &xo, &ho)?
    };
    if cell.cfg.peephole {
        let co = ops::mul_map(tape, &c_new, &cell.w_co)?;
        o_pre = ops::add(tape, &o_pre, &co)?;
    }
    let o_gate = ops::sigmoid(tape, &o_pre);
    let c_tanh = ops::tanh(tape, &c_new);
    let h_new = ops::mul(tape, &o_gate, &c_tanh)?;
    Ok((h_new, c_new))
}

/// Unrolls the recurrence over `t = 1..T` of a clip batch. States start
/// at zero unless supplied; nothing leaks across the batch (clip)
/// dimension, and nothing carries over between calls.
pub fn convlstm_sequence(
    tape: &mut GraphTape,
    cell: &ConvLstmCell,
    xs: &SequenceTensor,
    init: Option<(&Tensor, &Tensor)>,
) -> Result<SequenceTensor> {
    let t_total = xs.frames();
    if t_total == 0 {
        return Err(Error::arg("convlstm_sequence", "sequence has zero frames".to_string()));
    }
    let (zero_h, zero_c) = cell.zero_state(xs.clips());
    let (mut h, mut c) = match init {
        Some((h0, c0)) => (h0.clone(), c0.clone()),
        None => (zero_h, zero_c),
    };
    let mut outputs = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let x_t = ops::time_slice(tape, xs.tensor(), t)?;
        let (h_new, c_new) = convlstm_step(tape, cell, &x_t, &h, &c)?;
        h = h_new;
        c = c_new;
        outputs.push(h.clone());
    }
    SequenceTensor::new(ops::time_stack(tape, &outputs)?)
}

/// `[B*T, C, H, W]` -> `[B, T, C, H, W]`. Frames of one clip stay
/// contiguous; the reshape is bijective and gradient-transparent.
pub fn reshape_frames_to_clips(tape: &mut GraphTape, x: &Tensor, t: usize) -> Result<SequenceTensor> {
    let (bt, c, h, w) = x.dims4()?;
    if t == 0 || bt % t != 0 {
        return Err(Error::shape(
            "reshape_frames_to_clips",
            format!("batch of {} frames is not divisible by T={}", bt, t),
        ));
    }
    let reshaped = ops::reshape(tape, x, vec![bt / t, t, c, h, w])?;
    SequenceTensor::new(reshaped)
}

/// Inverse of [`reshape_frames_to_clips`].
pub fn reshape_clips_to_frames(tape: &mut GraphTape, xs: &SequenceTensor) -> Result<Tensor> {
    let s = xs.tensor().shape();
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    ops::reshape(tape, xs.tensor(), vec![b * t, c, h, w])
}
