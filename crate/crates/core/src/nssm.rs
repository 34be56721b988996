//! Neural state-space model.
//!
//! ```text
//! z_t     = f_enc(u_{t-H+1..t}, y_{t-H+1..t})
//! z_{k+1} = A_z z_k + B_z u_{k+1}
//! ŷ_{k+1} = C_z z_{k+1}
//! ```
//!
//! The encoder is a ReLU MLP over the time-interleaved history
//! `[u_{t-H+1}, y_{t-H+1}, ..., u_t, y_t]`, followed by a linear map to the
//! latent dimension. The loss over a batch of windows is the mean over windows
//! of `(1/T) Σ_k ‖y_k − ŷ_k‖²` with predictions starting one step after the
//! history window.
//!
//! Gradients are computed by a hand-written reverse pass; Hessian-vector
//! products by differentiating that reverse pass along a tangent direction
//! (forward-over-reverse). The ReLU masks are piecewise constant, so their
//! tangent vanishes.

use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diff::{Layout, Objective, ParamVector, Segment};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Standard deviation of the random initialization of `A_z`, `B_z`, `C_z`.
const LATENT_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NssmConfig {
    pub n_u: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// History window length H.
    pub history: usize,
    /// Prediction horizon T.
    pub horizon: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl NssmConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_u", self.n_u),
            ("n_y", self.n_y),
            ("n_z", self.n_z),
            ("history", self.history),
            ("horizon", self.horizon),
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("nssm.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.history * (self.n_u + self.n_y)
    }

    pub fn layout(&self) -> Layout {
        let mut segs = Vec::with_capacity(2 * self.hidden_layers + 5);
        let mut fan_in = self.encoder_input_dim();
        for l in 0..self.hidden_layers {
            segs.push(Segment::new(format!("encoder.{l}.weight"), &[self.hidden_width, fan_in]));
            segs.push(Segment::new(format!("encoder.{l}.bias"), &[self.hidden_width]));
            fan_in = self.hidden_width;
        }
        segs.push(Segment::new("encoder.out.weight", &[self.n_z, fan_in]));
        segs.push(Segment::new("encoder.out.bias", &[self.n_z]));
        segs.push(Segment::new("A_z", &[self.n_z, self.n_z]));
        segs.push(Segment::new("B_z", &[self.n_z, self.n_u]));
        segs.push(Segment::new("C_z", &[self.n_y, self.n_z]));
        Layout::new(segs)
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

/// Offsets of every tensor in the flat vector, derived from the config.
#[derive(Debug, Clone)]
struct Offsets {
    // (weight offset, bias offset, rows, cols) per affine map, output map last
    affine: Vec<(usize, usize, usize, usize)>,
    a: usize,
    b: usize,
    c: usize,
}

impl Offsets {
    fn new(cfg: &NssmConfig) -> Self {
        let mut affine = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut off = 0;
        let mut fan_in = cfg.encoder_input_dim();
        for l in 0..=cfg.hidden_layers {
            let rows = if l == cfg.hidden_layers { cfg.n_z } else { cfg.hidden_width };
            let w = off;
            off += rows * fan_in;
            let b = off;
            off += rows;
            affine.push((w, b, rows, fan_in));
            fan_in = rows;
        }
        let a = off;
        let b = a + cfg.n_z * cfg.n_z;
        let c = b + cfg.n_z * cfg.n_u;
        Offsets { affine, a, b, c }
    }
}

/// Column-major matrix views into a flat parameter slice.
struct View<'a> {
    cfg: &'a NssmConfig,
    off: Offsets,
    w: &'a [f64],
}

impl<'a> View<'a> {
    fn new(cfg: &'a NssmConfig, w: &'a [f64]) -> Self {
        View {
            cfg,
            off: Offsets::new(cfg),
            w,
        }
    }

    fn weight(&self, l: usize) -> DMatrixView<'a, f64> {
        let (o, _, r, c) = self.off.affine[l];
        DMatrixView::from_slice(&self.w[o..o + r * c], r, c)
    }

    fn bias(&self, l: usize) -> &'a [f64] {
        let (_, o, r, _) = self.off.affine[l];
        &self.w[o..o + r]
    }

    fn a(&self) -> DMatrixView<'a, f64> {
        let n = self.cfg.n_z;
        DMatrixView::from_slice(&self.w[self.off.a..self.off.a + n * n], n, n)
    }

    fn b(&self) -> DMatrixView<'a, f64> {
        let (n, p) = (self.cfg.n_z, self.cfg.n_u);
        DMatrixView::from_slice(&self.w[self.off.b..self.off.b + n * p], n, p)
    }

    fn c(&self) -> DMatrixView<'a, f64> {
        let (m, n) = (self.cfg.n_y, self.cfg.n_z);
        DMatrixView::from_slice(&self.w[self.off.c..self.off.c + m * n], m, n)
    }

    fn layers(&self) -> usize {
        self.off.affine.len()
    }
}

/// Trainable weights of one NSSM.
#[derive(Debug, Clone, PartialEq)]
pub struct NssmParams {
    config: NssmConfig,
    weights: ParamVector,
}

impl NssmParams {
    pub fn new(config: NssmConfig, weights: ParamVector) -> Result<Self> {
        config.validate()?;
        let expected = config.layout();
        if let Some(segment) = expected.first_difference(weights.layout()) {
            return Err(Error::LayoutMismatch { segment });
        }
        Ok(NssmParams { config, weights })
    }

    pub fn zeros(config: NssmConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(config.layout());
        Ok(NssmParams {
            config,
            weights: ParamVector::zeros(layout),
        })
    }

    /// Glorot-uniform encoder weights, zero biases, `N(0, 0.1²)` latent matrices.
    pub fn init<R: Rng + ?Sized>(config: NssmConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let off = Offsets::new(&p.config);
        let latent = Normal::new(0.0, LATENT_INIT_STD).expect("valid std");
        let w = p.weights.values_mut();
        for &(o, _, rows, cols) in &off.affine {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            for v in &mut w[o..o + rows * cols] {
                *v = dist.sample(rng);
            }
        }
        for v in &mut w[off.a..] {
            *v = latent.sample(rng);
        }
        Ok(p)
    }

    pub fn config(&self) -> &NssmConfig {
        &self.config
    }

    pub fn weights(&self) -> &ParamVector {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamVector {
        &mut self.weights
    }

    pub fn into_weights(self) -> ParamVector {
        self.weights
    }

    /// Same config, new weights.
    pub fn with_weights(&self, weights: ParamVector) -> Result<Self> {
        self.weights.check_compatible(&weights)?;
        Ok(NssmParams {
            config: self.config.clone(),
            weights,
        })
    }

    fn view(&self) -> View<'_> {
        View::new(&self.config, self.weights.values())
    }

    pub fn a_z(&self) -> DMatrix<f64> {
        self.view().a().into_owned()
    }

    pub fn b_z(&self) -> DMatrix<f64> {
        self.view().b().into_owned()
    }

    pub fn c_z(&self) -> DMatrix<f64> {
        self.view().c().into_owned()
    }

    pub fn set_latent(&mut self, a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
        let cfg = &self.config;
        if a.shape() != (cfg.n_z, cfg.n_z) || b.shape() != (cfg.n_z, cfg.n_u) || c.shape() != (cfg.n_y, cfg.n_z) {
            return Err(Error::Shape("latent matrices do not match the config".into()));
        }
        let off = Offsets::new(cfg);
        let w = self.weights.values_mut();
        w[off.a..off.b].copy_from_slice(a.as_slice());
        w[off.b..off.c].copy_from_slice(b.as_slice());
        w[off.c..].copy_from_slice(c.as_slice());
        Ok(())
    }

    pub fn to_checkpoint_json(&self) -> String {
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            layout: (**self.weights.layout()).clone(),
            values: encode_f64s(self.weights.values()),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        doc.config.validate()?;
        if let Some(segment) = doc.config.layout().first_difference(&doc.layout) {
            return Err(Error::LayoutMismatch { segment });
        }
        let values = decode_f64s(&doc.values)?;
        if values.len() != doc.layout.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, layout needs {}",
                values.len(),
                doc.layout.len()
            )));
        }
        let weights = ParamVector::unflatten(Arc::new(doc.layout), values)?;
        Ok(NssmParams {
            config: doc.config,
            weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

/// Little-endian IEEE-754 bytes, base64 encoded.
pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(text.as_bytes())
        .map_err(|e| Error::Format(format!("base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    version: u32,
    config: NssmConfig,
    layout: Layout,
    values: String,
}

/// Extracted (history, future) windows. Tensors are stored row-major as
/// `[window][step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    n_u: usize,
    n_y: usize,
    history: usize,
    horizon: usize,
    starts: Vec<usize>,
    history_u: Vec<f64>,
    history_y: Vec<f64>,
    future_u: Vec<f64>,
    future_y: Vec<f64>,
}

impl WindowBatch {
    pub fn new(n_u: usize, n_y: usize, history: usize, horizon: usize) -> Self {
        WindowBatch {
            n_u,
            n_y,
            history,
            horizon,
            starts: Vec::new(),
            history_u: Vec::new(),
            history_y: Vec::new(),
            future_u: Vec::new(),
            future_y: Vec::new(),
        }
    }

    /// Appends one window; `start` is its first sample index in the source trajectory.
    pub fn push(&mut self, start: usize, hu: &[f64], hy: &[f64], fu: &[f64], fy: &[f64]) -> Result<()> {
        let (h, t) = (self.history, self.horizon);
        if hu.len() != h * self.n_u || hy.len() != h * self.n_y || fu.len() != t * self.n_u || fy.len() != t * self.n_y {
            return Err(Error::Shape(format!(
                "window sizes ({}, {}, {}, {}) do not match H={h}, T={t}, n_u={}, n_y={}",
                hu.len(),
                hy.len(),
                fu.len(),
                fy.len(),
                self.n_u,
                self.n_y
            )));
        }
        self.starts.push(start);
        self.history_u.extend_from_slice(hu);
        self.history_y.extend_from_slice(hy);
        self.future_u.extend_from_slice(fu);
        self.future_y.extend_from_slice(fy);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn history_u(&self, b: usize) -> &[f64] {
        let n = self.history * self.n_u;
        &self.history_u[b * n..(b + 1) * n]
    }

    pub fn history_y(&self, b: usize) -> &[f64] {
        let n = self.history * self.n_y;
        &self.history_y[b * n..(b + 1) * n]
    }

    pub fn future_u(&self, b: usize) -> &[f64] {
        let n = self.horizon * self.n_u;
        &self.future_u[b * n..(b + 1) * n]
    }

    pub fn future_y(&self, b: usize) -> &[f64] {
        let n = self.horizon * self.n_y;
        &self.future_y[b * n..(b + 1) * n]
    }

    /// Sub-batch with the given window indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        let mut out = WindowBatch::new(self.n_u, self.n_y, self.history, self.horizon);
        for &b in indices {
            out.push(
                self.starts[b],
                self.history_u(b),
                self.history_y(b),
                self.future_u(b),
                self.future_y(b),
            )
            .expect("sizes already validated");
        }
        out
    }

    fn check_config(&self, cfg: &NssmConfig) -> Result<()> {
        if self.n_u != cfg.n_u || self.n_y != cfg.n_y || self.history != cfg.history || self.horizon != cfg.horizon {
            return Err(Error::Shape(format!(
                "batch (n_u={}, n_y={}, H={}, T={}) does not match model (n_u={}, n_y={}, H={}, T={})",
                self.n_u, self.n_y, self.history, self.horizon, cfg.n_u, cfg.n_y, cfg.history, cfg.horizon
            )));
        }
        Ok(())
    }

    /// Packs the batch into column-per-window matrices.
    pub fn matrices(&self) -> BatchMatrices {
        let nb = self.len();
        let (h, t, nu, ny) = (self.history, self.horizon, self.n_u, self.n_y);
        let mut x = DMatrix::zeros(h * (nu + ny), nb);
        for b in 0..nb {
            let (hu, hy) = (self.history_u(b), self.history_y(b));
            let mut col = x.column_mut(b);
            for s in 0..h {
                let base = s * (nu + ny);
                for c in 0..nu {
                    col[base + c] = hu[s * nu + c];
                }
                for c in 0..ny {
                    col[base + nu + c] = hy[s * ny + c];
                }
            }
        }
        let u = (0..t)
            .map(|k| DMatrix::from_fn(nu, nb, |c, b| self.future_u(b)[k * nu + c]))
            .collect();
        let y = (0..t)
            .map(|k| DMatrix::from_fn(ny, nb, |c, b| self.future_y(b)[k * ny + c]))
            .collect();
        BatchMatrices { x, u, y }
    }
}

/// A window batch packed for the batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchMatrices {
    /// Encoder inputs, one column per window.
    pub x: DMatrix<f64>,
    /// Future inputs per prediction step (`n_u × B`).
    pub u: Vec<DMatrix<f64>>,
    /// Future outputs per prediction step (`n_y × B`).
    pub y: Vec<DMatrix<f64>>,
}

impl BatchMatrices {
    pub fn batch_size(&self) -> usize {
        self.x.ncols()
    }
}

/// Interleaves a history `[step][channel]` pair into one encoder input column.
fn history_column(cfg: &NssmConfig, hu: &[f64], hy: &[f64]) -> Result<DMatrix<f64>> {
    let (h, nu, ny) = (cfg.history, cfg.n_u, cfg.n_y);
    if hu.len() != h * nu || hy.len() != h * ny {
        return Err(Error::Shape(format!(
            "history must hold {h} steps ({} inputs, {} outputs), got {} and {}",
            h * nu,
            h * ny,
            hu.len(),
            hy.len()
        )));
    }
    Ok(DMatrix::from_fn(h * (nu + ny), 1, |i, _| {
        let (s, c) = (i / (nu + ny), i % (nu + ny));
        if c < nu {
            hu[s * nu + c]
        } else {
            hy[s * ny + c - nu]
        }
    }))
}

fn add_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    for mut col in m.column_iter_mut() {
        for (v, b) in col.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn relu_mask(pre: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    pre.zip_map(m, |a, v| if a > 0.0 { v } else { 0.0 })
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_sum()
}

/// Encoder pass keeping the intermediates needed by the reverse passes.
struct EncoderTrace {
    pre: Vec<DMatrix<f64>>,
    act: Vec<DMatrix<f64>>,
    z0: DMatrix<f64>,
}

fn encoder_forward(v: &View<'_>, x: &DMatrix<f64>) -> EncoderTrace {
    let hidden = v.layers() - 1;
    let mut pre = Vec::with_capacity(hidden);
    let mut act: Vec<DMatrix<f64>> = Vec::with_capacity(hidden);
    for l in 0..hidden {
        let input = if l == 0 { x } else { &act[l - 1] };
        let mut a = v.weight(l) * input;
        add_bias(&mut a, v.bias(l));
        let h = a.map(|e| e.max(0.0));
        pre.push(a);
        act.push(h);
    }
    let last = act.last().unwrap_or(x);
    let mut z0 = v.weight(hidden) * last;
    add_bias(&mut z0, v.bias(hidden));
    EncoderTrace { pre, act, z0 }
}

struct Forward {
    enc: EncoderTrace,
    /// z_0 .. z_T
    z: Vec<DMatrix<f64>>,
    /// ŷ_k − y_k for k = 1..T
    resid: Vec<DMatrix<f64>>,
    loss: f64,
}

fn forward(v: &View<'_>, data: &BatchMatrices) -> Forward {
    let enc = encoder_forward(v, &data.x);
    let (a, b, c) = (v.a(), v.b(), v.c());
    let t = data.u.len();
    let mut z = Vec::with_capacity(t + 1);
    z.push(enc.z0.clone());
    let mut resid = Vec::with_capacity(t);
    let mut sq = 0.0;
    for k in 0..t {
        let next = a * &z[k] + b * &data.u[k];
        let r = c * &next - &data.y[k];
        sq += r.norm_squared();
        z.push(next);
        resid.push(r);
    }
    let loss = sq / (t as f64 * data.batch_size() as f64);
    Forward { enc, z, resid, loss }
}

struct Backward {
    grad: Vec<f64>,
    /// λ_1 .. λ_T (stored at index k-1)
    lambda: Vec<DMatrix<f64>>,
    g_z0: DMatrix<f64>,
    /// dL/d(pre-activation) per hidden layer
    g_pre: Vec<DMatrix<f64>>,
}

fn loss_scale(data: &BatchMatrices) -> f64 {
    2.0 / (data.u.len() as f64 * data.batch_size() as f64)
}

fn write_block(out: &mut [f64], offset: usize, m: &DMatrix<f64>) {
    out[offset..offset + m.len()].copy_from_slice(m.as_slice());
}

fn write_vec(out: &mut [f64], offset: usize, v: &DVector<f64>) {
    out[offset..offset + v.len()].copy_from_slice(v.as_slice());
}

fn backward(v: &View<'_>, data: &BatchMatrices, fwd: &Forward) -> Backward {
    let cfg = v.cfg;
    let scale = loss_scale(data);
    let t = data.u.len();
    let (a, c) = (v.a(), v.c());
    let mut grad = vec![0.0; v.w.len()];

    let mut lambda: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); t];
    let mut d_a = DMatrix::zeros(cfg.n_z, cfg.n_z);
    let mut d_b = DMatrix::zeros(cfg.n_z, cfg.n_u);
    let mut d_c = DMatrix::zeros(cfg.n_y, cfg.n_z);
    for k in (1..=t).rev() {
        let gy = &fwd.resid[k - 1] * scale;
        d_c += &gy * fwd.z[k].transpose();
        let mut lam = c.transpose() * &gy;
        if k < t {
            lam += a.transpose() * &lambda[k];
        }
        d_a += &lam * fwd.z[k - 1].transpose();
        d_b += &lam * data.u[k - 1].transpose();
        lambda[k - 1] = lam;
    }
    write_block(&mut grad, v.off.a, &d_a);
    write_block(&mut grad, v.off.b, &d_b);
    write_block(&mut grad, v.off.c, &d_c);

    let g_z0 = if t > 0 {
        a.transpose() * &lambda[0]
    } else {
        DMatrix::zeros(cfg.n_z, data.batch_size())
    };

    let hidden = v.layers() - 1;
    let input_of = |l: usize| if l == 0 { &data.x } else { &fwd.enc.act[l - 1] };
    let (wo, bo, _, _) = v.off.affine[hidden];
    write_block(&mut grad, wo, &(&g_z0 * input_of(hidden).transpose()));
    write_vec(&mut grad, bo, &row_sums(&g_z0));

    let mut g_pre: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); hidden];
    let mut g_h = v.weight(hidden).transpose() * &g_z0;
    for l in (0..hidden).rev() {
        let g_a = relu_mask(&fwd.enc.pre[l], &g_h);
        let (wo, bo, _, _) = v.off.affine[l];
        write_block(&mut grad, wo, &(&g_a * input_of(l).transpose()));
        write_vec(&mut grad, bo, &row_sums(&g_a));
        if l > 0 {
            g_h = v.weight(l).transpose() * &g_a;
        }
        g_pre[l] = g_a;
    }

    Backward {
        grad,
        lambda,
        g_z0,
        g_pre,
    }
}

fn hvp_impl(v: &View<'_>, dir: &View<'_>, data: &BatchMatrices) -> Vec<f64> {
    let cfg = v.cfg;
    let fwd = forward(v, data);
    let bwd = backward(v, data, &fwd);
    let scale = loss_scale(data);
    let t = data.u.len();
    let hidden = v.layers() - 1;
    let nb = data.batch_size();
    let (a, c) = (v.a(), v.c());
    let (da, db, dc) = (dir.a(), dir.b(), dir.c());
    let mut out = vec![0.0; v.w.len()];

    // tangent forward through the encoder
    let input_of = |l: usize| if l == 0 { &data.x } else { &fwd.enc.act[l - 1] };
    let mut d_act: Vec<DMatrix<f64>> = Vec::with_capacity(hidden);
    for l in 0..hidden {
        let mut d_pre = dir.weight(l) * input_of(l);
        if l > 0 {
            d_pre += v.weight(l) * &d_act[l - 1];
        }
        add_bias(&mut d_pre, dir.bias(l));
        d_act.push(relu_mask(&fwd.enc.pre[l], &d_pre));
    }
    let mut dz0 = dir.weight(hidden) * input_of(hidden);
    if hidden > 0 {
        dz0 += v.weight(hidden) * &d_act[hidden - 1];
    }
    add_bias(&mut dz0, dir.bias(hidden));

    // tangent forward through the rollout
    let mut dz = Vec::with_capacity(t + 1);
    dz.push(dz0);
    let mut dgy = Vec::with_capacity(t);
    for k in 1..=t {
        let next = da * &fwd.z[k - 1] + a * &dz[k - 1] + db * &data.u[k - 1];
        let dyhat = dc * &fwd.z[k] + c * &next;
        dgy.push(dyhat * scale);
        dz.push(next);
    }

    // tangent reverse through the rollout
    let mut h_a = DMatrix::zeros(cfg.n_z, cfg.n_z);
    let mut h_b = DMatrix::zeros(cfg.n_z, cfg.n_u);
    let mut h_c = DMatrix::zeros(cfg.n_y, cfg.n_z);
    let mut dlam_next: Option<DMatrix<f64>> = None;
    let mut dlam_first = DMatrix::zeros(cfg.n_z, nb);
    for k in (1..=t).rev() {
        let gy = &fwd.resid[k - 1] * scale;
        h_c += &dgy[k - 1] * fwd.z[k].transpose() + &gy * dz[k].transpose();
        let mut dlam = dc.transpose() * &gy + c.transpose() * &dgy[k - 1];
        if k < t {
            dlam += da.transpose() * &bwd.lambda[k];
            dlam += a.transpose() * dlam_next.as_ref().expect("set on previous step");
        }
        h_a += &dlam * fwd.z[k - 1].transpose() + &bwd.lambda[k - 1] * dz[k - 1].transpose();
        h_b += &dlam * data.u[k - 1].transpose();
        if k == 1 {
            dlam_first = dlam.clone();
        }
        dlam_next = Some(dlam);
    }
    write_block(&mut out, v.off.a, &h_a);
    write_block(&mut out, v.off.b, &h_b);
    write_block(&mut out, v.off.c, &h_c);

    let dg_z0 = if t > 0 {
        da.transpose() * &bwd.lambda[0] + a.transpose() * &dlam_first
    } else {
        DMatrix::zeros(cfg.n_z, nb)
    };

    // tangent reverse through the encoder
    let (wo, bo, _, _) = v.off.affine[hidden];
    let mut h_wo = &dg_z0 * input_of(hidden).transpose();
    if hidden > 0 {
        h_wo += &bwd.g_z0 * d_act[hidden - 1].transpose();
    }
    write_block(&mut out, wo, &h_wo);
    write_vec(&mut out, bo, &row_sums(&dg_z0));

    let mut dg_h = dir.weight(hidden).transpose() * &bwd.g_z0 + v.weight(hidden).transpose() * &dg_z0;
    for l in (0..hidden).rev() {
        let dg_a = relu_mask(&fwd.enc.pre[l], &dg_h);
        let (wo, bo, _, _) = v.off.affine[l];
        let mut h_w = &dg_a * input_of(l).transpose();
        if l > 0 {
            h_w += &bwd.g_pre[l] * d_act[l - 1].transpose();
        }
        write_block(&mut out, wo, &h_w);
        write_vec(&mut out, bo, &row_sums(&dg_a));
        if l > 0 {
            dg_h = dir.weight(l).transpose() * &bwd.g_pre[l] + v.weight(l).transpose() * &dg_a;
        }
    }
    out
}

/// Latent state for every window of `batch` (`n_z × B`).
pub fn encode(params: &NssmParams, batch: &WindowBatch) -> Result<DMatrix<f64>> {
    batch.check_config(&params.config)?;
    Ok(encoder_forward(&params.view(), &batch.matrices().x).z0)
}

/// Latent state for one history window given as `[step][channel]` slices.
pub fn encode_history(params: &NssmParams, history_u: &[f64], history_y: &[f64]) -> Result<DVector<f64>> {
    let x = history_column(&params.config, history_u, history_y)?;
    let z = encoder_forward(&params.view(), &x).z0;
    Ok(z.column(0).into_owned())
}

/// Runs the latent recurrence from `z0` over `future_u` (`[step][channel]`)
/// and returns the predicted outputs `ŷ_1..ŷ_T`.
pub fn rollout(params: &NssmParams, z0: &DVector<f64>, future_u: &[f64]) -> Result<Vec<DVector<f64>>> {
    let cfg = &params.config;
    if z0.len() != cfg.n_z || !future_u.len().is_multiple_of(cfg.n_u) {
        return Err(Error::Shape(format!(
            "rollout expects z0 of length {} and inputs in multiples of {}",
            cfg.n_z, cfg.n_u
        )));
    }
    let v = params.view();
    let (a, b, c) = (v.a(), v.b(), v.c());
    let mut z = z0.clone();
    Ok(future_u
        .chunks(cfg.n_u)
        .map(|u| {
            z = a * &z + b * DVector::from_column_slice(u);
            c * &z
        })
        .collect())
}

pub fn loss(params: &NssmParams, batch: &WindowBatch) -> Result<f64> {
    NssmObjective::new(params.config.clone(), batch)?.value(&params.weights)
}

pub fn loss_grad(params: &NssmParams, batch: &WindowBatch) -> Result<ParamVector> {
    NssmObjective::new(params.config.clone(), batch)?.gradient(&params.weights)
}

pub fn loss_hvp(params: &NssmParams, batch: &WindowBatch, v: &ParamVector) -> Result<ParamVector> {
    NssmObjective::new(params.config.clone(), batch)?.hvp(&params.weights, v)
}

/// The prediction loss on a fixed batch, as a function of the flat weights.
#[derive(Debug, Clone)]
pub struct NssmObjective {
    config: NssmConfig,
    layout: Arc<Layout>,
    data: BatchMatrices,
}

impl NssmObjective {
    pub fn new(config: NssmConfig, batch: &WindowBatch) -> Result<Self> {
        config.validate()?;
        batch.check_config(&config)?;
        if batch.is_empty() {
            return Err(Error::Shape("loss needs at least one window".into()));
        }
        let layout = Arc::new(config.layout());
        Ok(NssmObjective {
            config,
            layout,
            data: batch.matrices(),
        })
    }

    pub fn config(&self) -> &NssmConfig {
        &self.config
    }

    pub fn batch_size(&self) -> usize {
        self.data.batch_size()
    }

    fn check(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "model has {} parameters, vector has {}",
                self.layout.len(),
                w.len()
            )));
        }
        Ok(())
    }
}

impl Objective for NssmObjective {
    fn value(&self, w: &ParamVector) -> Result<f64> {
        self.check(w)?;
        Ok(forward(&View::new(&self.config, w.values()), &self.data).loss)
    }

    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        Ok(self.value_and_gradient(w)?.1)
    }

    fn value_and_gradient(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        self.check(w)?;
        let view = View::new(&self.config, w.values());
        let fwd = forward(&view, &self.data);
        let bwd = backward(&view, &self.data, &fwd);
        Ok((fwd.loss, w.with_values(bwd.grad)?))
    }

    fn hvp(&self, w: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        self.check(w)?;
        w.check_compatible(v)?;
        let out = hvp_impl(
            &View::new(&self.config, w.values()),
            &View::new(&self.config, v.values()),
            &self.data,
        );
        w.with_values(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{fd_gradient, fd_hvp, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NssmConfig {
        NssmConfig {
            n_u: 1,
            n_y: 2,
            n_z: 3,
            history: 3,
            horizon: 4,
            hidden_width: 6,
            hidden_layers: 2,
        }
    }

    fn random_batch(cfg: &NssmConfig, n: usize, rng: &mut ChaCha8Rng) -> WindowBatch {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut batch = WindowBatch::new(cfg.n_u, cfg.n_y, cfg.history, cfg.horizon);
        let mut draw = |len: usize| (0..len).map(|_| dist.sample(rng)).collect::<Vec<_>>();
        for b in 0..n {
            let hu = draw(cfg.history * cfg.n_u);
            let hy = draw(cfg.history * cfg.n_y);
            let fu = draw(cfg.horizon * cfg.n_u);
            let fy = draw(cfg.horizon * cfg.n_y);
            batch.push(b, &hu, &hy, &fu, &fy).unwrap();
        }
        batch
    }

    /// Replaces the future outputs with the model's own predictions.
    fn self_consistent_batch(params: &NssmParams, batch: &WindowBatch) -> WindowBatch {
        let cfg = params.config();
        let mut out = WindowBatch::new(cfg.n_u, cfg.n_y, cfg.history, cfg.horizon);
        for b in 0..batch.len() {
            let z0 = encode_history(params, batch.history_u(b), batch.history_y(b)).unwrap();
            let yhat: Vec<f64> = rollout(params, &z0, batch.future_u(b))
                .unwrap()
                .iter()
                .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
                .collect();
            out.push(b, batch.history_u(b), batch.history_y(b), batch.future_u(b), &yhat)
                .unwrap();
        }
        out
    }

    #[test]
    fn layout_matches_offsets() {
        let cfg = tiny_config();
        let layout = cfg.layout();
        let off = Offsets::new(&cfg);
        assert_eq!(layout.range("A_z").unwrap().start, off.a);
        assert_eq!(layout.range("B_z").unwrap().start, off.b);
        assert_eq!(layout.range("C_z").unwrap().start, off.c);
        assert_eq!(layout.range("encoder.out.weight").unwrap().start, off.affine[2].0);
        assert_eq!(layout.range("encoder.1.bias").unwrap().start, off.affine[1].1);
        assert_eq!(layout.len(), off.c + cfg.n_y * cfg.n_z);
    }

    #[test]
    fn zero_weights_encode_to_output_bias() {
        let cfg = tiny_config();
        let mut p = NssmParams::zeros(cfg.clone()).unwrap();
        p.weights_mut()
            .segment_mut("encoder.out.bias")
            .unwrap()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let z = encode_history(&p, &[1.0, 2.0, 3.0], &[4.0; 6]).unwrap();
        assert_eq!(z.as_slice(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn hand_built_encoder() {
        // H=1, n_u=1, n_y=1: input column [u, y]; one hidden unit relu(u - y); z = 2 h + 1.
        let cfg = NssmConfig {
            n_u: 1,
            n_y: 1,
            n_z: 1,
            history: 1,
            horizon: 1,
            hidden_width: 1,
            hidden_layers: 1,
        };
        let mut p = NssmParams::zeros(cfg).unwrap();
        let w = p.weights_mut();
        w.segment_mut("encoder.0.weight").unwrap().copy_from_slice(&[1.0, -1.0]);
        w.segment_mut("encoder.out.weight").unwrap()[0] = 2.0;
        w.segment_mut("encoder.out.bias").unwrap()[0] = 1.0;
        assert_eq!(encode_history(&p, &[1.0], &[0.0]).unwrap()[0], 3.0);
        assert_eq!(encode_history(&p, &[0.0], &[1.0]).unwrap()[0], 1.0);
        assert_eq!(encode_history(&p, &[3.0], &[0.5]).unwrap()[0], 6.0);
    }

    #[test]
    fn identical_history_rows_encode_identically() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let one = random_batch(&cfg, 1, &mut rng);
        let two = one.select(&[0, 0]);
        let z = encode(&p, &two).unwrap();
        assert_eq!(z.column(0), z.column(1));
    }

    #[test]
    fn encode_rejects_wrong_history_length() {
        let p = NssmParams::zeros(tiny_config()).unwrap();
        assert!(encode_history(&p, &[0.0; 2], &[0.0; 6]).is_err());
    }

    #[test]
    fn rollout_examples() {
        let cfg = NssmConfig {
            n_u: 1,
            n_y: 1,
            n_z: 1,
            history: 1,
            horizon: 3,
            hidden_width: 1,
            hidden_layers: 1,
        };
        let mut p = NssmParams::zeros(cfg).unwrap();
        let z0 = DVector::from_element(1, 1.0);
        let zero = rollout(&p, &z0, &[1.0, 2.0, 3.0]).unwrap();
        assert!(zero.iter().all(|y| y[0] == 0.0));

        p.set_latent(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let y = rollout(&p, &z0, &[0.0; 3]).unwrap();
        assert_eq!(y.iter().map(|v| v[0]).collect::<Vec<_>>(), vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn rollout_matches_stepwise_recurrence() {
        let cfg = NssmConfig {
            n_z: 3,
            horizon: 4,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let (a, b, c) = (p.a_z(), p.b_z(), p.c_z());
        let z0 = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let u = [0.5, -0.25, 1.0, 2.0];
        let got = rollout(&p, &z0, &u).unwrap();
        // independent scalar loops over the raw column-major buffers
        let (a, b, c) = (a.as_slice(), b.as_slice(), c.as_slice());
        let mut z = z0.as_slice().to_vec();
        for (k, &uk) in u.iter().enumerate() {
            let mut next = vec![0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    next[i] += a[j * 3 + i] * z[j];
                }
                next[i] += b[i] * uk;
            }
            z = next;
            for r in 0..2 {
                let mut y = 0.0;
                for j in 0..3 {
                    y += c[j * 2 + r] * z[j];
                }
                assert!((got[k][r] - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let cfg = NssmConfig {
            n_u: 1,
            n_y: 1,
            n_z: 1,
            history: 1,
            horizon: 1,
            hidden_width: 1,
            hidden_layers: 1,
        };
        let p = NssmParams::zeros(cfg.clone()).unwrap();
        let mut batch = WindowBatch::new(1, 1, 1, 1);
        batch.push(0, &[0.0], &[0.0], &[0.0], &[2.0]).unwrap();
        assert_eq!(loss(&p, &batch).unwrap(), 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_config();
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let batch = self_consistent_batch(&p, &random_batch(&cfg, 3, &mut rng));
        assert!(loss(&p, &batch).unwrap() < 1e-24);
    }

    #[test]
    fn loss_matches_recomposition() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 5, &mut rng);
        let mut total = 0.0;
        for b in 0..batch.len() {
            let z0 = encode_history(&p, batch.history_u(b), batch.history_y(b)).unwrap();
            let yhat = rollout(&p, &z0, batch.future_u(b)).unwrap();
            let fy = batch.future_y(b);
            let per: f64 = yhat
                .iter()
                .enumerate()
                .map(|(k, y)| (0..cfg.n_y).map(|c| (fy[k * cfg.n_y + c] - y[c]).powi(2)).sum::<f64>())
                .sum();
            total += per / cfg.horizon as f64;
        }
        let expected = total / batch.len() as f64;
        assert!((loss(&p, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny_config();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
            let batch = random_batch(&cfg, 3, &mut rng);
            let obj = NssmObjective::new(cfg.clone(), &batch).unwrap();
            let g = obj.gradient(p.weights()).unwrap();
            let fd = fd_gradient(|w| obj.value(w).unwrap(), p.weights(), 1e-5).unwrap();
            assert!(relative_error(g.values(), fd.values(), 1e-12) < 1e-4);
        }
    }

    #[test]
    fn gradient_vanishes_at_zero_loss() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let batch = self_consistent_batch(&p, &random_batch(&cfg, 4, &mut rng));
        let g = loss_grad(&p, &batch).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn duplicating_the_window_keeps_the_gradient() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let one = random_batch(&cfg, 1, &mut rng);
        let g1 = loss_grad(&p, &one).unwrap();
        let g2 = loss_grad(&p, &one.select(&[0, 0])).unwrap();
        assert!(relative_error(g2.values(), g1.values(), 1e-12) < 1e-14);
    }

    #[test]
    fn hvp_matches_finite_differences() {
        let cfg = tiny_config();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
            let batch = random_batch(&cfg, 3, &mut rng);
            let obj = NssmObjective::new(cfg.clone(), &batch).unwrap();
            let dist = Normal::new(0.0, 1.0).unwrap();
            let v = p
                .weights()
                .with_values((0..p.weights().len()).map(|_| dist.sample(&mut rng)).collect())
                .unwrap();
            let hv = obj.hvp(p.weights(), &v).unwrap();
            let fd = fd_hvp(|w| obj.gradient(w), p.weights(), &v, 1e-4).unwrap();
            assert!(relative_error(hv.values(), fd.values(), 1e-12) < 1e-3);
        }
    }

    #[test]
    fn hvp_of_zero_direction_is_zero() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = NssmParams::init(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 2, &mut rng);
        let hv = loss_hvp(&p, &batch, &p.weights().zeros_like()).unwrap();
        assert!(hv.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hvp_on_output_map_matches_quadratic_hessian() {
        // Encoder weights zero, output bias b gives z_0 = b. With A=1, B=0 the
        // loss in c = C_z is (1/T) Σ_k (y_k − c b)², whose second derivative
        // along c is 2 b². Cross terms with the remaining weights are checked
        // through the C_z component only.
        let cfg = NssmConfig {
            n_u: 1,
            n_y: 1,
            n_z: 1,
            history: 2,
            horizon: 3,
            hidden_width: 2,
            hidden_layers: 1,
        };
        let mut p = NssmParams::zeros(cfg.clone()).unwrap();
        let bias = 1.5;
        p.weights_mut().segment_mut("encoder.out.bias").unwrap()[0] = bias;
        p.set_latent(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.0),
            &DMatrix::from_element(1, 1, 0.4),
        )
        .unwrap();
        let mut batch = WindowBatch::new(1, 1, 2, 3);
        batch.push(0, &[0.1, 0.2], &[0.3, 0.4], &[0.0; 3], &[1.0, -1.0, 0.5]).unwrap();
        let mut v = p.weights().zeros_like();
        v.segment_mut("C_z").unwrap()[0] = 1.0;
        let hv = loss_hvp(&p, &batch, &v).unwrap();
        assert!((hv.segment("C_z").unwrap()[0] - 2.0 * bias * bias).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = NssmParams::init(cfg, &mut rng).unwrap();
        let back = NssmParams::from_checkpoint_json(&p.to_checkpoint_json()).unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in back.weights().values().iter().zip(p.weights().values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_truncated_values() {
        let p = NssmParams::zeros(tiny_config()).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&p.to_checkpoint_json()).unwrap();
        doc["values"] = serde_json::Value::String(BASE64.encode([0u8; 16]));
        assert!(NssmParams::from_checkpoint_json(&doc.to_string()).is_err());
    }
}
