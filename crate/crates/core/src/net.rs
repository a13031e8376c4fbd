//! The trainable raw network F and its per-sample gradient engine.
//!
//! F is a small residual dense network on 2D points: the input is the
//! concatenation of the (preconditioned) point, Fourier features of the
//! noise conditioning value, and a learned class embedding (with one extra
//! row for the null token). Residual blocks use a single dense layer with a
//! SiLU nonlinearity; the output head is zero-initialized so that the
//! denoiser starts out as `c_skip(sigma) * x`.
//!
//! Gradients are computed by an explicit reverse pass per batch element,
//! which keeps every row of the per-sample gradient matrix exact — the
//! property DP-SGD's sensitivity argument rests on. Training noise draws
//! are keyed by (seed, step, element index, k), so each element's draws are
//! independent of which other elements happen to be in the batch.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dm::{denoise, DmConfig, RawNet};
use crate::error::{Error, Result};
use crate::gmm::{LabeledSample, Point2};
use crate::rng::{domain, stream};

/// Architecture descriptor. `num_classes` counts real classes; the
/// embedding table holds one extra row for the null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden_width: usize,
    pub depth: usize,
    pub fourier_features: usize,
    pub class_embed_dim: usize,
    pub num_classes: usize,
}

impl NetSpec {
    /// The default toy architecture: ~73k parameters.
    pub fn toy_default() -> Self {
        NetSpec {
            hidden_width: 128,
            depth: 4,
            fourier_features: 16,
            class_embed_dim: 16,
            num_classes: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("degenerate architecture: {self:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 + 2 * self.fourier_features + self.class_embed_dim
    }

    fn stem_w(&self) -> usize {
        0
    }

    fn stem_b(&self) -> usize {
        self.hidden_width * self.input_dim()
    }

    fn block_w(&self, d: usize) -> usize {
        let w = self.hidden_width;
        self.stem_b() + w + d * (w * w + w)
    }

    fn block_b(&self, d: usize) -> usize {
        self.block_w(d) + self.hidden_width * self.hidden_width
    }

    fn head_w(&self) -> usize {
        self.block_w(self.depth)
    }

    fn head_b(&self) -> usize {
        self.head_w() + 2 * self.hidden_width
    }

    fn embed(&self) -> usize {
        self.head_b() + 2
    }

    pub fn param_count(&self) -> usize {
        self.embed() + (self.num_classes + 1) * self.class_embed_dim
    }

    fn embed_row(&self, label: Option<usize>) -> usize {
        match label {
            Some(k) => {
                debug_assert!(k < self.num_classes, "label {k} out of range");
                k
            }
            None => self.num_classes,
        }
    }
}

/// Fixed geometric ladder of Fourier frequencies. The ladder spans several
/// octaves below and above 1 so that both small conditioning values (EDM,
/// v-prediction) and large ones (VP's discrete-time index) resolve.
fn fourier_frequency(j: usize, total: usize) -> f64 {
    2f64.powi(j as i32 - (total / 2) as i32)
}

/// Scratch buffers plus the forward trace needed for a reverse pass.
pub struct Workspace {
    input: Vec<f64>,
    h_layers: Vec<f64>,
    pre: Vec<f64>,
    dh: Vec<f64>,
    ds: Vec<f64>,
    embed_row: usize,
}

impl Workspace {
    pub fn new(spec: &NetSpec) -> Self {
        let w = spec.hidden_width;
        Workspace {
            input: vec![0.0; spec.input_dim()],
            h_layers: vec![0.0; (spec.depth + 1) * w],
            pre: vec![0.0; spec.depth * w],
            dh: vec![0.0; w],
            ds: vec![0.0; w],
            embed_row: 0,
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Flat parameter vector plus its architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub spec: NetSpec,
    pub theta: Vec<f64>,
}

impl DenoiserParams {
    /// Wraps an existing parameter vector, checking it against the descriptor.
    pub fn new(spec: NetSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.param_count(),
                got: theta.len(),
            });
        }
        Ok(DenoiserParams { spec, theta })
    }

    /// Fan-in-scaled uniform init, zero biases, zero output head (so the
    /// initial denoiser is exactly `c_skip * x`), uniform class embeddings.
    pub fn init(spec: NetSpec, seed: u64) -> Self {
        spec.validate().expect("valid architecture");
        let mut rng = stream(seed, &[domain::PARAM_INIT]);
        let mut theta = vec![0.0; spec.param_count()];
        let w = spec.hidden_width;
        let in_dim = spec.input_dim();
        let stem_scale = 1.0 / (in_dim as f64).sqrt();
        for v in &mut theta[spec.stem_w()..spec.stem_b()] {
            *v = rng.gen_range(-stem_scale..stem_scale);
        }
        let block_scale = 1.0 / (w as f64).sqrt();
        for d in 0..spec.depth {
            for v in &mut theta[spec.block_w(d)..spec.block_w(d) + w * w] {
                *v = rng.gen_range(-block_scale..block_scale);
            }
        }
        for v in &mut theta[spec.embed()..] {
            *v = rng.gen_range(-1.0..1.0);
        }
        DenoiserParams { spec, theta }
    }

    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Forward pass recording the trace in `ws`.
    pub fn raw_eval(
        &self,
        x_in: Point2,
        c_noise: f64,
        label: Option<usize>,
        ws: &mut Workspace,
    ) -> Point2 {
        let spec = &self.spec;
        let w = spec.hidden_width;
        let in_dim = spec.input_dim();
        let nf = spec.fourier_features;
        ws.input[0] = x_in.x;
        ws.input[1] = x_in.y;
        for j in 0..nf {
            let angle = fourier_frequency(j, nf) * c_noise;
            ws.input[2 + j] = angle.sin();
            ws.input[2 + nf + j] = angle.cos();
        }
        let row = spec.embed_row(label);
        ws.embed_row = row;
        let emb = &self.theta[spec.embed() + row * spec.class_embed_dim..];
        ws.input[2 + 2 * nf..in_dim].copy_from_slice(&emb[..spec.class_embed_dim]);

        // Stem.
        let sw = &self.theta[spec.stem_w()..spec.stem_b()];
        let sb = &self.theta[spec.stem_b()..spec.stem_b() + w];
        for u in 0..w {
            let wrow = &sw[u * in_dim..(u + 1) * in_dim];
            let mut acc = sb[u];
            for (wi, vi) in wrow.iter().zip(&ws.input) {
                acc += wi * vi;
            }
            ws.h_layers[u] = acc;
        }

        // Residual blocks: h <- h + silu(W h + b).
        for d in 0..spec.depth {
            let bw = &self.theta[spec.block_w(d)..spec.block_w(d) + w * w];
            let bb = &self.theta[spec.block_b(d)..spec.block_b(d) + w];
            let (hin, hout) = {
                let (a, b) = ws.h_layers.split_at_mut((d + 1) * w);
                (&a[d * w..], &mut b[..w])
            };
            let pre = &mut ws.pre[d * w..(d + 1) * w];
            for u in 0..w {
                let wrow = &bw[u * w..(u + 1) * w];
                let mut acc = bb[u];
                for (wi, hi) in wrow.iter().zip(hin.iter()) {
                    acc += wi * hi;
                }
                pre[u] = acc;
                hout[u] = hin[u] + silu(acc);
            }
        }

        // Head.
        let hw = &self.theta[spec.head_w()..spec.head_w() + 2 * w];
        let hb = &self.theta[spec.head_b()..spec.head_b() + 2];
        let h_final = &ws.h_layers[spec.depth * w..(spec.depth + 1) * w];
        let mut out = [hb[0], hb[1]];
        for (o, outv) in out.iter_mut().enumerate() {
            let wrow = &hw[o * w..(o + 1) * w];
            for (wi, hi) in wrow.iter().zip(h_final) {
                *outv += wi * hi;
            }
        }
        Point2::new(out[0], out[1])
    }

    /// Accumulates d(seed . F)/dtheta into `grad`, using the trace left in
    /// `ws` by the preceding [`raw_eval`].
    pub fn backward_params(&self, ws: &mut Workspace, seed: Point2, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.spec.param_count());
        let spec = &self.spec;
        let w = spec.hidden_width;
        let in_dim = spec.input_dim();
        let g = [seed.x, seed.y];

        // Head.
        let h_final = &ws.h_layers[spec.depth * w..(spec.depth + 1) * w];
        for o in 0..2 {
            let grow = &mut grad[spec.head_w() + o * w..spec.head_w() + (o + 1) * w];
            for (gi, hi) in grow.iter_mut().zip(h_final) {
                *gi += g[o] * hi;
            }
            grad[spec.head_b() + o] += g[o];
        }
        let hw = &self.theta[spec.head_w()..spec.head_w() + 2 * w];
        for u in 0..w {
            ws.dh[u] = g[0] * hw[u] + g[1] * hw[w + u];
        }

        // Blocks in reverse.
        for d in (0..spec.depth).rev() {
            let bw = &self.theta[spec.block_w(d)..spec.block_w(d) + w * w];
            let pre = &ws.pre[d * w..(d + 1) * w];
            let hin = &ws.h_layers[d * w..(d + 1) * w];
            for ((ds, dh), p) in ws.ds.iter_mut().zip(&ws.dh).zip(pre) {
                *ds = dh * silu_deriv(*p);
            }
            let gw = &mut grad[spec.block_w(d)..spec.block_w(d) + w * w];
            for u in 0..w {
                let s = ws.ds[u];
                if s != 0.0 {
                    let grow = &mut gw[u * w..(u + 1) * w];
                    for (gi, hi) in grow.iter_mut().zip(hin) {
                        *gi += s * hi;
                    }
                }
            }
            let gb = &mut grad[spec.block_b(d)..spec.block_b(d) + w];
            for (gi, s) in gb.iter_mut().zip(&ws.ds) {
                *gi += s;
            }
            // dh_in = dh_out + W^T ds
            for u in 0..w {
                let s = ws.ds[u];
                if s != 0.0 {
                    let wrow = &bw[u * w..(u + 1) * w];
                    for (dv, wi) in ws.dh.iter_mut().zip(wrow) {
                        *dv += s * wi;
                    }
                }
            }
        }

        // Stem.
        let gw = &mut grad[spec.stem_w()..spec.stem_b()];
        for u in 0..w {
            let s = ws.dh[u];
            if s != 0.0 {
                let grow = &mut gw[u * in_dim..(u + 1) * in_dim];
                for (gi, vi) in grow.iter_mut().zip(&ws.input) {
                    *gi += s * vi;
                }
            }
        }
        let gb = &mut grad[spec.stem_b()..spec.stem_b() + w];
        for (gi, s) in gb.iter_mut().zip(&ws.dh) {
            *gi += s;
        }

        // Embedding row: d input = W0^T dh restricted to the embedding slice.
        let sw = &self.theta[spec.stem_w()..spec.stem_b()];
        let emb_off = 2 + 2 * spec.fourier_features;
        let ge = &mut grad[spec.embed() + ws.embed_row * spec.class_embed_dim
            ..spec.embed() + (ws.embed_row + 1) * spec.class_embed_dim];
        for u in 0..w {
            let s = ws.dh[u];
            if s != 0.0 {
                let wrow = &sw[u * in_dim + emb_off..(u + 1) * in_dim];
                for (gi, wi) in ge.iter_mut().zip(wrow) {
                    *gi += s * wi;
                }
            }
        }
    }

    /// d(seed . F)/d(x_in): the gradient with respect to the two point
    /// coordinates of the (already preconditioned) input.
    pub fn backward_input(&self, ws: &mut Workspace, seed: Point2) -> Point2 {
        let spec = &self.spec;
        let w = spec.hidden_width;
        let in_dim = spec.input_dim();
        let hw = &self.theta[spec.head_w()..spec.head_w() + 2 * w];
        for u in 0..w {
            ws.dh[u] = seed.x * hw[u] + seed.y * hw[w + u];
        }
        for d in (0..spec.depth).rev() {
            let bw = &self.theta[spec.block_w(d)..spec.block_w(d) + w * w];
            let pre = &ws.pre[d * w..(d + 1) * w];
            for ((ds, dh), p) in ws.ds.iter_mut().zip(&ws.dh).zip(pre) {
                *ds = dh * silu_deriv(*p);
            }
            for u in 0..w {
                let s = ws.ds[u];
                if s != 0.0 {
                    let wrow = &bw[u * w..(u + 1) * w];
                    for (dv, wi) in ws.dh.iter_mut().zip(wrow) {
                        *dv += s * wi;
                    }
                }
            }
        }
        let sw = &self.theta[spec.stem_w()..spec.stem_b()];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for u in 0..w {
            let s = ws.dh[u];
            gx += s * sw[u * in_dim];
            gy += s * sw[u * in_dim + 1];
        }
        Point2::new(gx, gy)
    }
}

thread_local! {
    // Sampler loops evaluate the network millions of times; keep one
    // scratch workspace per thread instead of allocating per call.
    static SCRATCH: std::cell::RefCell<Option<(NetSpec, Workspace)>> =
        const { std::cell::RefCell::new(None) };
}

impl RawNet for DenoiserParams {
    fn eval(&self, x_in: Point2, c_noise: f64, label: Option<usize>) -> Point2 {
        SCRATCH.with(|cell| {
            let mut slot = cell.borrow_mut();
            match slot.as_mut() {
                Some((spec, ws)) if *spec == self.spec => self.raw_eval(x_in, c_noise, label, ws),
                _ => {
                    let mut ws = Workspace::new(&self.spec);
                    let out = self.raw_eval(x_in, c_noise, label, &mut ws);
                    *slot = Some((self.spec, ws));
                    out
                }
            }
        })
    }
}

/// Denoiser output D(x; sigma) for the given config and parameters.
pub fn forward(
    params: &DenoiserParams,
    cfg: &DmConfig,
    x: Point2,
    sigma: f64,
    label: Option<usize>,
) -> Result<Point2> {
    denoise(cfg, params, x, sigma, label)
}

/// Denoiser output together with d(seed . D)/dtheta. Used by tests and the
/// gradient-variance metric.
pub fn forward_param_grad(
    params: &DenoiserParams,
    cfg: &DmConfig,
    x: Point2,
    sigma: f64,
    label: Option<usize>,
    seed: Point2,
) -> Result<(Point2, Vec<f64>)> {
    let p = cfg.precondition(sigma)?;
    let mut ws = Workspace::new(&params.spec);
    let f = params.raw_eval(x.scale(p.c_in), p.c_noise, label, &mut ws);
    let d = x.scale(p.c_skip).add(f.scale(p.c_out));
    let mut grad = vec![0.0; params.spec.param_count()];
    params.backward_params(&mut ws, seed.scale(p.c_out), &mut grad);
    Ok((d, grad))
}

/// Exact input Jacobian of the denoiser, via two reverse passes:
/// dD/dx = c_skip I + c_out c_in dF/du.
pub fn denoiser_input_jacobian(
    params: &DenoiserParams,
    cfg: &DmConfig,
    x: Point2,
    sigma: f64,
    label: Option<usize>,
) -> Result<[[f64; 2]; 2]> {
    let p = cfg.precondition(sigma)?;
    let mut ws = Workspace::new(&params.spec);
    params.raw_eval(x.scale(p.c_in), p.c_noise, label, &mut ws);
    let gx = params.backward_input(&mut ws, Point2::new(1.0, 0.0));
    let gy = params.backward_input(&mut ws, Point2::new(0.0, 1.0));
    let cc = p.c_out * p.c_in;
    Ok([
        [p.c_skip + cc * gx.x, cc * gx.y],
        [cc * gy.x, p.c_skip + cc * gy.y],
    ])
}

/// One (sigma, n) training draw, keyed by (seed, step, element index, k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub sigma: f64,
    pub noise: Point2,
}

pub fn noise_draw(cfg: &DmConfig, seed: u64, step: u64, element: u64, k: u64) -> NoiseDraw {
    let mut rng = stream(seed, &[domain::NOISE_PAIR, step, element, k]);
    let sigma = cfg.sample_training_sigma(&mut rng);
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    NoiseDraw {
        sigma,
        noise: Point2::new(z1, z2).scale(sigma),
    }
}

/// A training sample tagged with its dataset index; the index keys the
/// element's noise draws.
#[derive(Debug, Clone, Copy)]
pub struct IndexedSample {
    pub index: u64,
    pub sample: LabeledSample,
}

/// Row-major (batch x param) matrix of per-sample gradients.
pub struct PerSampleGrads {
    data: Vec<f64>,
    dim: usize,
}

impl PerSampleGrads {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        PerSampleGrads {
            data: vec![0.0; rows * dim],
            dim,
        }
    }

    /// Resizes for reuse across steps, keeping the allocation. Row contents
    /// are unspecified afterwards; the fill happens inside the per-element
    /// gradient passes.
    fn reset(&mut self, rows: usize, dim: usize) {
        self.dim = dim;
        self.data.resize(rows * dim, 0.0);
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// The underlying row-major storage.
    pub fn raw_data(&self) -> &[f64] {
        &self.data
    }
}

/// Identifies the step whose draws are being generated.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext {
    pub seed: u64,
    pub step: u64,
}

/// Per-element noise-multiplicity loss and its exact parameter gradient:
/// l_i = (1/K) sum_k lambda(sigma_ik) |D(x_i + n_ik, sigma_ik) - x_i|^2.
///
/// Elements are processed in parallel; results are deterministic because
/// every draw is keyed by (seed, step, element index, k) and the reduction
/// order is fixed.
pub fn per_sample_loss_and_grads(
    params: &DenoiserParams,
    cfg: &DmConfig,
    batch: &[IndexedSample],
    multiplicity: usize,
    ctx: BatchContext,
) -> Result<(Vec<f64>, PerSampleGrads)> {
    let mut grads = PerSampleGrads::zeros(0, 0);
    let losses = per_sample_loss_and_grads_into(params, cfg, batch, multiplicity, ctx, &mut grads)?;
    Ok((losses, grads))
}

/// Buffer-reusing variant for tight training loops; `grads` is resized and
/// overwritten.
pub fn per_sample_loss_and_grads_into(
    params: &DenoiserParams,
    cfg: &DmConfig,
    batch: &[IndexedSample],
    multiplicity: usize,
    ctx: BatchContext,
    grads: &mut PerSampleGrads,
) -> Result<Vec<f64>> {
    if multiplicity == 0 {
        return Err(Error::InvalidArgument(
            "noise multiplicity K must be >= 1".into(),
        ));
    }
    let dim = params.spec.param_count();
    grads.reset(batch.len(), dim);
    batch
        .par_iter()
        .zip(grads.data.par_chunks_mut(dim.max(1)))
        .map_init(
            || Workspace::new(&params.spec),
            |ws, (item, row)| {
                row.fill(0.0);
                element_loss_and_grad(params, cfg, item, multiplicity, ctx, ws, row)
            },
        )
        .collect()
}

fn element_loss_and_grad(
    params: &DenoiserParams,
    cfg: &DmConfig,
    item: &IndexedSample,
    multiplicity: usize,
    ctx: BatchContext,
    ws: &mut Workspace,
    row: &mut [f64],
) -> Result<f64> {
    let x = item.sample.point;
    let label = item.sample.label;
    let inv_k = 1.0 / multiplicity as f64;
    let mut loss = 0.0;
    for k in 0..multiplicity {
        let draw = noise_draw(cfg, ctx.seed, ctx.step, item.index, k as u64);
        let p = cfg.precondition(draw.sigma)?;
        let lam = cfg.loss_weight(draw.sigma)?;
        let xt = x.add(draw.noise);
        let f = params.raw_eval(xt.scale(p.c_in), p.c_noise, label, ws);
        let d = xt.scale(p.c_skip).add(f.scale(p.c_out));
        let resid = d.sub(x);
        loss += lam * resid.norm2();
        let seed = resid.scale(2.0 * lam * p.c_out * inv_k);
        params.backward_params(ws, seed, row);
    }
    Ok(loss * inv_k)
}

/// EMA shadow of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    pub decay: f64,
    pub theta: Vec<f64>,
}

impl EmaParams {
    /// Shadow initialized as a copy of the current parameters.
    pub fn new(params: &DenoiserParams, decay: f64) -> Self {
        EmaParams {
            decay,
            theta: params.theta.clone(),
        }
    }

    /// theta_ema <- decay * theta_ema + (1 - decay) * theta.
    pub fn update(&mut self, params: &DenoiserParams) -> Result<()> {
        if self.theta.len() != params.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                got: params.theta.len(),
            });
        }
        let d = self.decay;
        for (s, &t) in self.theta.iter_mut().zip(&params.theta) {
            *s = d * *s + (1.0 - d) * t;
        }
        Ok(())
    }

    /// The shadow as usable denoiser parameters.
    pub fn as_params(&self, spec: NetSpec) -> Result<DenoiserParams> {
        DenoiserParams::new(spec, self.theta.clone())
    }
}
