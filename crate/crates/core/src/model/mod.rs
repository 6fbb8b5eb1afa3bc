//! Per-target forecasting block.
//!
//! A block owns a Transformer trunk, a conditional latent Gaussian module, a
//! causal Gaussian head, residual heads for the auxiliary path and a vector
//! of gate logits. The causal path sees only parent columns (hard mask); the
//! auxiliary path sees every column scaled by the detached gate and reuses the
//! trunk without propagating derivatives into it.

pub mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{invalid, CgtError, Result};
use crate::graph::ParentMask;
use layers::{
    join, sigmoid, visit1, visit1_mut, EncoderLayer, EncoderLayerCache, LayerNorm,
    LayerNormCache, Linear, Mlp, MlpCache, Params, Visitor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalEncoding {
    None,
    Sinusoidal,
}

impl FromStr for PositionalEncoding {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sinusoidal" => Ok(Self::Sinusoidal),
            _ => Err(invalid(format!("unknown positional encoding {s:?}"))),
        }
    }
}

impl fmt::Display for PositionalEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Sinusoidal => "sinusoidal",
        })
    }
}

/// Normalisation applied to each token before the input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputNorm {
    /// Layer normalisation over the `P` features of each token.
    Layer,
    /// Identity; inputs are already Min-Max scaled.
    None,
}

impl FromStr for InputNorm {
    type Err = CgtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "none" => Ok(Self::None),
            _ => Err(invalid(format!("unknown input normalisation {s:?}"))),
        }
    }
}

impl fmt::Display for InputNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Layer => "layer",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub window: usize,
    pub max_lag: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub d_latent: usize,
    pub mc_samples: usize,
    pub logvar_lo: f64,
    pub logvar_hi: f64,
    pub positional_encoding: PositionalEncoding,
    pub input_norm: InputNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 30,
            max_lag: 7,
            channels: 1,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            d_latent: 8,
            mc_samples: 4,
            logvar_lo: -8.0,
            logvar_hi: 8.0,
            positional_encoding: PositionalEncoding::None,
            input_norm: InputNorm::None,
        }
    }
}

impl ModelConfig {
    pub fn features(&self) -> usize {
        self.channels * self.max_lag
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("max_lag", self.max_lag),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_latent", self.d_latent),
            ("mc_samples", self.mc_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CgtError::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CgtError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.logvar_lo < self.logvar_hi) {
            return Err(CgtError::Config(format!(
                "log-variance bounds [{}, {}] are empty",
                self.logvar_lo, self.logvar_hi
            )));
        }
        Ok(())
    }

    pub fn clamp_logvar(&self, v: f64) -> f64 {
        v.clamp(self.logvar_lo, self.logvar_hi)
    }

    /// Derivative of the clamp (1 strictly inside the bounds, else 0).
    pub fn clamp_pass(&self, raw: f64) -> f64 {
        if raw > self.logvar_lo && raw < self.logvar_hi {
            1.0
        } else {
            0.0
        }
    }
}

/// Parameter groups used by the gradient isolation rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Trunk,
    Latent,
    CausalHead,
    Residual,
    Gate,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or("") {
            "trunk" => Self::Trunk,
            "prior" | "posterior" => Self::Latent,
            "head" => Self::CausalHead,
            "residual" => Self::Residual,
            "gate_logits" => Self::Gate,
            other => panic!("unknown parameter group {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub input_ln: LayerNorm,
    pub proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    input_ln: Option<LayerNormCache>,
    normed: Array2<f64>,
    layers: Vec<EncoderLayerCache>,
    final_ln: LayerNormCache,
    rows: usize,
}

/// How the trunk input is derived from the raw design matrix.
#[derive(Debug, Clone, Copy)]
pub enum InputGate<'a> {
    /// Hard selection of parent columns.
    Mask(&'a [bool]),
    /// Elementwise scaling by (detached) gate values.
    Soft(&'a [f64]),
}

impl Trunk {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            input_ln: LayerNorm::new(cfg.features()),
            proj: Linear::xavier(cfg.features(), cfg.d_model, rng),
            layers: (0..cfg.n_layers)
                .map(|_| EncoderLayer::new(cfg.d_model, cfg.n_heads, cfg.d_ff, rng))
                .collect(),
            final_ln: LayerNorm::new(cfg.d_model),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            input_ln: LayerNorm::zeros(self.input_ln.gamma.len()),
            proj: Linear::zeros(self.proj.w.nrows(), self.proj.w.ncols()),
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
            final_ln: LayerNorm::zeros(self.final_ln.gamma.len()),
        }
    }

    /// Flattens `B x W x P` to `(B * W) x P` and applies the input gate.
    fn gated_tokens(x: &Array3<f64>, gate: InputGate<'_>) -> Array2<f64> {
        let (b, w, p) = x.dim();
        let mut tokens = x
            .to_shape((b * w, p))
            .expect("contiguous input")
            .into_owned();
        match gate {
            InputGate::Mask(mask) => {
                for mut row in tokens.rows_mut() {
                    for (v, &keep) in row.iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
            }
            InputGate::Soft(alpha) => {
                for mut row in tokens.rows_mut() {
                    for (v, &a) in row.iter_mut().zip(alpha) {
                        *v *= a;
                    }
                }
            }
        }
        tokens
    }

    fn embed(&self, cfg: &ModelConfig, tokens: &Array2<f64>) -> (Array2<f64>, Option<LayerNormCache>, Array2<f64>) {
        let (normed, ln_cache) = match cfg.input_norm {
            InputNorm::Layer => {
                let (y, c) = self.input_ln.forward(tokens);
                (y, Some(c))
            }
            InputNorm::None => (tokens.clone(), None),
        };
        let mut e = self.proj.forward(&normed);
        if cfg.positional_encoding == PositionalEncoding::Sinusoidal {
            let pe = sinusoidal(cfg.window, cfg.d_model);
            for (r, mut row) in e.rows_mut().into_iter().enumerate() {
                row += &pe.row(r % cfg.window);
            }
        }
        (e, ln_cache, normed)
    }

    fn last_rows(h: &Array2<f64>, window: usize) -> Array2<f64> {
        let idx: Vec<usize> = (0..h.nrows() / window).map(|b| b * window + window - 1).collect();
        h.select(Axis(0), &idx)
    }

    pub fn forward(
        &self,
        cfg: &ModelConfig,
        x: &Array3<f64>,
        gate: InputGate<'_>,
    ) -> (Array2<f64>, TrunkCache) {
        let tokens = Self::gated_tokens(x, gate);
        let (mut h, input_ln, normed) = self.embed(cfg, &tokens);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&h, cfg.window);
            caches.push(cache);
            h = next;
        }
        let (summary, final_ln) = self.final_ln.forward(&Self::last_rows(&h, cfg.window));
        let cache = TrunkCache {
            input_ln,
            normed,
            layers: caches,
            final_ln,
            rows: h.nrows(),
        };
        (summary, cache)
    }

    /// Forward pass without retaining intermediates; returns `B x d`.
    pub fn infer(&self, cfg: &ModelConfig, x: &Array3<f64>, gate: InputGate<'_>) -> Array2<f64> {
        let tokens = Self::gated_tokens(x, gate);
        let (mut h, _, _) = self.embed(cfg, &tokens);
        for layer in &self.layers {
            h = layer.infer(&h, cfg.window);
        }
        self.final_ln.forward(&Self::last_rows(&h, cfg.window)).0
    }

    pub fn backward(
        &self,
        cfg: &ModelConfig,
        cache: &TrunkCache,
        dsummary: &Array2<f64>,
        grad: &mut Trunk,
    ) {
        let dlast = self
            .final_ln
            .backward(&cache.final_ln, dsummary, &mut grad.final_ln);
        let mut dh = Array2::zeros((cache.rows, dsummary.ncols()));
        for (b, row) in dlast.rows().into_iter().enumerate() {
            dh.row_mut(b * cfg.window + cfg.window - 1).assign(&row);
        }
        for ((layer, lcache), lgrad) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            dh = layer.backward(lcache, &dh, cfg.window, lgrad);
        }
        match &cache.input_ln {
            Some(ln_cache) => {
                let dnormed = self.proj.backward(&cache.normed, &dh, &mut grad.proj);
                self.input_ln.backward(ln_cache, &dnormed, &mut grad.input_ln);
            }
            None => self.proj.backward_params(&cache.normed, &dh, &mut grad.proj),
        }
    }
}

impl Params for Trunk {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.input_ln.visit(&join(prefix, "input_ln"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.final_ln.visit(&join(prefix, "final_ln"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.input_ln.visit_mut(&join(prefix, "input_ln"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.final_ln.visit_mut(&join(prefix, "final_ln"), f);
    }
}

fn sinusoidal(window: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((window, d), |(pos, k)| {
        let rate = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Gate logit initialisation for parent and non-parent columns.
pub const GATE_INIT_PARENT: f64 = 0.9;
pub const GATE_INIT_OTHER: f64 = 0.05;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// All parameters of one target block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub trunk: Trunk,
    /// `h -> (mu_p, raw log v_p)`.
    pub prior: Mlp,
    /// `[h; y] -> (mu_q, raw log v_q)`.
    pub posterior: Mlp,
    /// `[h; z] -> (mu_c, raw log v_c)`.
    pub head: Mlp,
    /// `[h_o; z] -> (delta mu, delta log v)`.
    pub residual: Mlp,
    pub gate_logits: Array1<f64>,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, mask: &ParentMask, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let dz = cfg.d_latent;
        Self {
            trunk: Trunk::new(cfg, rng),
            prior: Mlp::new(d, d, 2 * dz, rng),
            posterior: Mlp::new(d + 1, d, 2 * dz, rng),
            head: Mlp::new(d + dz, d, 2, rng),
            residual: Mlp::new(d + dz, d, 2, rng),
            gate_logits: mask
                .bits
                .iter()
                .map(|&p| logit(if p { GATE_INIT_PARENT } else { GATE_INIT_OTHER }))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            prior: self.prior.zeros_like(),
            posterior: self.posterior.zeros_like(),
            head: self.head.zeros_like(),
            residual: self.residual.zeros_like(),
            gate_logits: Array1::zeros(self.gate_logits.len()),
        }
    }

    pub fn gates(&self) -> Array1<f64> {
        self.gate_logits.mapv(sigmoid)
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// Parameters as one flat vector in visitation order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    pub fn names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, s, _| out.push((n.to_string(), s.to_vec())));
        out
    }

    /// Applies `f(group, values)` to every tensor.
    pub fn for_each_group_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        self.visit_mut("", &mut |name, v| f(ParamGroup::of(name), v));
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit("", &mut |_, _, v| sq += v.iter().map(|x| x * x).sum::<f64>());
        sq.sqrt()
    }
}

impl Params for BlockParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.prior.visit(&join(prefix, "prior"), f);
        self.posterior.visit(&join(prefix, "posterior"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.residual.visit(&join(prefix, "residual"), f);
        visit1(&self.gate_logits, join(prefix, "gate_logits"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.prior.visit_mut(&join(prefix, "prior"), f);
        self.posterior.visit_mut(&join(prefix, "posterior"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.residual.visit_mut(&join(prefix, "residual"), f);
        visit1_mut(&mut self.gate_logits, join(prefix, "gate_logits"), f);
    }
}

/// Mean and bounded log-variance of a scalar Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub log_var: f64,
}

/// Diagonal Gaussian over the latent variable, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl LatentGaussian {
    /// Splits a raw `B x 2dz` output, clamping the log-variance half.
    fn from_raw(cfg: &ModelConfig, raw: &Array2<f64>) -> Self {
        let dz = cfg.d_latent;
        Self {
            mean: raw.slice(s![.., ..dz]).to_owned(),
            log_var: raw.slice(s![.., dz..]).mapv(|v| cfg.clamp_logvar(v)),
        }
    }
}

fn check_inputs(cfg: &ModelConfig, x: &Array3<f64>, mask_len: usize) -> Result<()> {
    let (_, w, p) = x.dim();
    if w != cfg.window || p != cfg.features() || mask_len != p {
        return Err(CgtError::Shape(format!(
            "expected inputs of shape _ x {} x {} with mask length {}, got _ x {w} x {p} with mask length {mask_len}",
            cfg.window,
            cfg.features(),
            cfg.features()
        )));
    }
    Ok(())
}

/// Causal summary `h_c` for every sample of a `B x W x P` stack.
pub fn encode_causal(
    cfg: &ModelConfig,
    params: &BlockParams,
    x: &Array3<f64>,
    mask: &ParentMask,
) -> Result<Array2<f64>> {
    check_inputs(cfg, x, mask.len())?;
    Ok(params.trunk.infer(cfg, x, InputGate::Mask(&mask.bits)))
}

pub fn latent_prior(cfg: &ModelConfig, params: &BlockParams, h: &Array2<f64>) -> LatentGaussian {
    LatentGaussian::from_raw(cfg, &params.prior.infer(h))
}

pub fn latent_posterior(
    cfg: &ModelConfig,
    params: &BlockParams,
    h: &Array2<f64>,
    y: &Array1<f64>,
) -> LatentGaussian {
    let input = concatenate![Axis(1), *h, y.view().insert_axis(Axis(1))];
    LatentGaussian::from_raw(cfg, &params.posterior.infer(&input))
}

/// Reparameterised draw `mu + exp(log_var / 2) * eps`.
pub fn sample_latent(
    mean: ArrayView2<'_, f64>,
    log_var: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut z = log_var.mapv(|lv| (0.5 * lv).exp());
    z *= &eps;
    z += &mean;
    z
}

fn split_gaussian(cfg: &ModelConfig, raw: &Array2<f64>) -> Vec<GaussianPrediction> {
    raw.rows()
        .into_iter()
        .map(|r| GaussianPrediction {
            mean: r[0],
            log_var: cfg.clamp_logvar(r[1]),
        })
        .collect()
}

pub fn causal_head(
    cfg: &ModelConfig,
    params: &BlockParams,
    h: &Array2<f64>,
    z: &Array2<f64>,
) -> Vec<GaussianPrediction> {
    split_gaussian(cfg, &params.head.infer(&concatenate![Axis(1), *h, *z]))
}

/// Residual corrections and the corrected (auxiliary) prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowOutputs {
    pub delta_mean: Array1<f64>,
    pub delta_log_var: Array1<f64>,
    pub aux: Vec<GaussianPrediction>,
}

/// Auxiliary summary `h_o`: all columns scaled by the current gate.
pub fn encode_aux(cfg: &ModelConfig, params: &BlockParams, x: &Array3<f64>) -> Result<Array2<f64>> {
    check_inputs(cfg, x, params.gate_logits.len())?;
    let alpha = params.gates().to_vec();
    Ok(params.trunk.infer(cfg, x, InputGate::Soft(&alpha)))
}

/// Residual heads applied to an auxiliary summary, a latent sample and the
/// causal prediction they correct.
pub fn shadow_from_summary(
    cfg: &ModelConfig,
    params: &BlockParams,
    h_aux: &Array2<f64>,
    z: &Array2<f64>,
    causal: &[GaussianPrediction],
) -> ShadowOutputs {
    let raw = params.residual.infer(&concatenate![Axis(1), *h_aux, *z]);
    let delta_mean = raw.column(0).to_owned();
    let delta_log_var = raw.column(1).to_owned();
    let aux = causal
        .iter()
        .zip(delta_mean.iter().zip(&delta_log_var))
        .map(|(c, (&dm, &dv))| GaussianPrediction {
            mean: c.mean + dm,
            log_var: cfg.clamp_logvar(c.log_var + dv),
        })
        .collect();
    ShadowOutputs {
        delta_mean,
        delta_log_var,
        aux,
    }
}

pub fn shadow_forward(
    cfg: &ModelConfig,
    params: &BlockParams,
    x: &Array3<f64>,
    z: &Array2<f64>,
    causal: &[GaussianPrediction],
) -> Result<ShadowOutputs> {
    let h_aux = encode_aux(cfg, params, x)?;
    Ok(shadow_from_summary(cfg, params, &h_aux, z, causal))
}

/// Causal and auxiliary predictions for one latent draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionPair {
    pub causal: GaussianPrediction,
    pub aux: GaussianPrediction,
}

/// Inference with `S` prior draws; `noise` is `B x S x dz`. Returns
/// `predictions[b][s]`. The trunk runs once per sample and path.
pub fn forward_infer(
    cfg: &ModelConfig,
    params: &BlockParams,
    x: &Array3<f64>,
    mask: &ParentMask,
    noise: &Array3<f64>,
) -> Result<Vec<Vec<PredictionPair>>> {
    let h_c = encode_causal(cfg, params, x, mask)?;
    let h_o = encode_aux(cfg, params, x)?;
    forward_from_summaries(cfg, params, &h_c, &h_o, noise)
}

/// Head-level inference given precomputed causal and auxiliary summaries.
pub fn forward_from_summaries(
    cfg: &ModelConfig,
    params: &BlockParams,
    h_c: &Array2<f64>,
    h_o: &Array2<f64>,
    noise: &Array3<f64>,
) -> Result<Vec<Vec<PredictionPair>>> {
    let (b, s_count, dz) = noise.dim();
    if b != h_c.nrows() || dz != cfg.d_latent {
        return Err(CgtError::Shape(format!(
            "noise {b}x{s_count}x{dz} does not match {} samples with d_latent {}",
            h_c.nrows(),
            cfg.d_latent
        )));
    }
    let prior = latent_prior(cfg, params, h_c);
    let mut out = vec![Vec::with_capacity(s_count); b];
    for s in 0..s_count {
        let eps = noise.index_axis(Axis(1), s);
        let z = sample_latent(prior.mean.view(), prior.log_var.view(), eps);
        let causal = causal_head(cfg, params, h_c, &z);
        let shadow = shadow_from_summary(cfg, params, h_o, &z, &causal);
        for (row, (c, a)) in out.iter_mut().zip(causal.iter().zip(&shadow.aux)) {
            row.push(PredictionPair {
                causal: *c,
                aux: *a,
            });
        }
    }
    Ok(out)
}

/// Cached intermediates of a training forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub trunk: TrunkCache,
    pub h: Array2<f64>,
    pub prior_raw: Array2<f64>,
    pub prior_cache: MlpCache,
    pub posterior_raw: Array2<f64>,
    pub posterior_cache: MlpCache,
    pub prior: LatentGaussian,
    pub posterior: LatentGaussian,
    pub eps: Array2<f64>,
    pub z: Array2<f64>,
    pub head_raw: Array2<f64>,
    pub head_cache: MlpCache,
    pub causal: Vec<GaussianPrediction>,
    pub residual_raw: Array2<f64>,
    pub residual_cache: MlpCache,
    pub detached: Detached,
}

/// Values that enter the auxiliary path through stop-gradient points.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub gate: Array1<f64>,
    pub h_aux: Array2<f64>,
    pub z: Array2<f64>,
    pub causal_mean: Array1<f64>,
    pub causal_log_var: Array1<f64>,
}

/// Full training forward pass with the posterior latent.
///
/// When `frozen` is given, every stop-gradient input of the auxiliary path is
/// taken from it instead of being recomputed; the loss is then the surrogate
/// whose exact derivative is what [`train_backward`] computes.
pub fn train_forward(
    cfg: &ModelConfig,
    params: &BlockParams,
    x: &Array3<f64>,
    y: &Array1<f64>,
    mask: &ParentMask,
    eps: &Array2<f64>,
    frozen: Option<&Detached>,
) -> Result<TrainForward> {
    check_inputs(cfg, x, mask.len())?;
    if y.len() != x.dim().0 || eps.nrows() != y.len() || eps.ncols() != cfg.d_latent {
        return Err(CgtError::Shape(format!(
            "batch of {} inputs, {} targets, noise {}x{}",
            x.dim().0,
            y.len(),
            eps.nrows(),
            eps.ncols()
        )));
    }
    let (h, trunk) = params.trunk.forward(cfg, x, InputGate::Mask(&mask.bits));
    let (prior_raw, prior_cache) = params.prior.forward(h.clone());
    let post_in = concatenate![Axis(1), h, y.view().insert_axis(Axis(1))];
    let (posterior_raw, posterior_cache) = params.posterior.forward(post_in);
    let prior = LatentGaussian::from_raw(cfg, &prior_raw);
    let posterior = LatentGaussian::from_raw(cfg, &posterior_raw);
    let z = sample_latent(posterior.mean.view(), posterior.log_var.view(), eps.view());
    let (head_raw, head_cache) = params.head.forward(concatenate![Axis(1), h, z]);
    let causal = split_gaussian(cfg, &head_raw);

    let detached = match frozen {
        Some(d) => d.clone(),
        None => {
            let gate = params.gates();
            let alpha = gate.to_vec();
            let h_aux = params.trunk.infer(cfg, x, InputGate::Soft(&alpha));
            Detached {
                gate,
                h_aux,
                z: z.clone(),
                causal_mean: causal.iter().map(|c| c.mean).collect(),
                causal_log_var: causal.iter().map(|c| c.log_var).collect(),
            }
        }
    };
    let (residual_raw, residual_cache) = params
        .residual
        .forward(concatenate![Axis(1), detached.h_aux, detached.z]);

    Ok(TrainForward {
        trunk,
        h,
        prior_raw,
        prior_cache,
        posterior_raw,
        posterior_cache,
        prior,
        posterior,
        eps: eps.clone(),
        z,
        head_raw,
        head_cache,
        causal,
        residual_raw,
        residual_cache,
        detached,
    })
}

/// Upstream derivatives of the objective with respect to block outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    /// `d/d mu_c` and `d/d log v_c` (post-clamp), per sample.
    pub causal_mean: Array1<f64>,
    pub causal_log_var: Array1<f64>,
    pub prior_mean: Array2<f64>,
    pub prior_log_var: Array2<f64>,
    pub posterior_mean: Array2<f64>,
    pub posterior_log_var: Array2<f64>,
    /// `d/d delta mu` and `d/d delta log v`, per sample.
    pub delta_mean: Array1<f64>,
    pub delta_log_var: Array1<f64>,
    /// `d/d gate logits` from the regularisers.
    pub gate_logits: Array1<f64>,
}

/// Backpropagates `grads` through the causal path, the latent module and the
/// residual heads. The auxiliary path contributes only to residual-head
/// parameters; gate logits receive only `grads.gate_logits`.
pub fn train_backward(
    cfg: &ModelConfig,
    params: &BlockParams,
    fwd: &TrainForward,
    grads: &OutputGrads,
) -> BlockParams {
    let mut g = params.zeros_like();
    let d = cfg.d_model;
    let dz = cfg.d_latent;
    let b = fwd.h.nrows();

    // Causal head.
    let mut dhead = Array2::zeros((b, 2));
    for k in 0..b {
        dhead[[k, 0]] = grads.causal_mean[k];
        dhead[[k, 1]] = grads.causal_log_var[k] * cfg.clamp_pass(fwd.head_raw[[k, 1]]);
    }
    let du = params.head.backward(&fwd.head_cache, &dhead, &mut g.head);
    let mut dh = du.slice(s![.., ..d]).to_owned();
    let dzs = du.slice(s![.., d..]);

    // Reparameterisation into the posterior.
    let mut dpost = Array2::zeros((b, 2 * dz));
    for k in 0..b {
        for m in 0..dz {
            let lv = fwd.posterior.log_var[[k, m]];
            let dmean = dzs[[k, m]] + grads.posterior_mean[[k, m]];
            let dlv = dzs[[k, m]] * fwd.eps[[k, m]] * 0.5 * (0.5 * lv).exp()
                + grads.posterior_log_var[[k, m]];
            dpost[[k, m]] = dmean;
            dpost[[k, dz + m]] = dlv * cfg.clamp_pass(fwd.posterior_raw[[k, dz + m]]);
        }
    }
    let dpost_in = params
        .posterior
        .backward(&fwd.posterior_cache, &dpost, &mut g.posterior);
    dh += &dpost_in.slice(s![.., ..d]);

    let mut dprior = Array2::zeros((b, 2 * dz));
    for k in 0..b {
        for m in 0..dz {
            dprior[[k, m]] = grads.prior_mean[[k, m]];
            dprior[[k, dz + m]] =
                grads.prior_log_var[[k, m]] * cfg.clamp_pass(fwd.prior_raw[[k, dz + m]]);
        }
    }
    dh += &params.prior.backward(&fwd.prior_cache, &dprior, &mut g.prior);

    params.trunk.backward(cfg, &fwd.trunk, &dh, &mut g.trunk);

    // Residual heads: inputs are detached, so only their parameters move.
    let mut dres = Array2::zeros((b, 2));
    for k in 0..b {
        dres[[k, 0]] = grads.delta_mean[k];
        dres[[k, 1]] = grads.delta_log_var[k];
    }
    params
        .residual
        .backward(&fwd.residual_cache, &dres, &mut g.residual);

    g.gate_logits.assign(&grads.gate_logits);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> ModelConfig {
        ModelConfig {
            window: 4,
            max_lag: 2,
            channels: 3,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 12,
            d_latent: 2,
            mc_samples: 2,
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((b, cfg.window, cfg.features()), || {
            StandardNormal.sample(&mut rng)
        })
    }

    fn mask(bits: &[bool]) -> ParentMask {
        ParentMask {
            target: 0,
            bits: bits.to_vec(),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.logvar_lo = 8.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_mask_summary_is_data_independent() {
        let cfg = tiny();
        let m = mask(&[false; 6]);
        let p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(0));
        let a = encode_causal(&cfg, &p, &inputs(&cfg, 1, 1), &m).unwrap();
        let b = encode_causal(&cfg, &p, &inputs(&cfg, 1, 2), &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mask_equals_unmasked_encoding() {
        let cfg = tiny();
        let m = mask(&[true; 6]);
        let p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(0));
        let x = inputs(&cfg, 3, 5);
        let masked = encode_causal(&cfg, &p, &x, &m).unwrap();
        let ones = vec![1.0; 6];
        let plain = p.trunk.infer(&cfg, &x, InputGate::Soft(&ones));
        assert_eq!(masked, plain);
    }

    #[test]
    fn non_parent_perturbation_leaves_summary_bitwise() {
        let cfg = tiny();
        let m = mask(&[true, false, false, true, true, false]);
        let p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(3));
        let x = inputs(&cfg, 2, 9);
        let mut x2 = x.clone();
        for c in [1, 2, 5] {
            x2.slice_mut(s![.., .., c]).mapv_inplace(|v| v * -7.0 + 3.0);
        }
        let a = encode_causal(&cfg, &p, &x, &m).unwrap();
        let b = encode_causal(&cfg, &p, &x2, &m).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn zero_initialised_outputs() {
        let cfg = tiny();
        let m = mask(&[true; 6]);
        let p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(0));
        let h = encode_causal(&cfg, &p, &inputs(&cfg, 2, 1), &m).unwrap();
        let prior = latent_prior(&cfg, &p, &h);
        assert!(prior.mean.iter().chain(prior.log_var.iter()).all(|&v| v == 0.0));
        let z = Array2::from_elem((2, 2), 0.3);
        for g in causal_head(&cfg, &p, &h, &z) {
            assert_eq!((g.mean, g.log_var), (0.0, 0.0));
        }
    }

    #[test]
    fn log_variance_is_clamped() {
        let cfg = tiny();
        let raw = array![[0.0, 0.0, 50.0, -50.0]];
        let g = LatentGaussian::from_raw(&cfg, &raw);
        assert_eq!(g.log_var, array![[8.0, -8.0]]);
    }

    #[test]
    fn posterior_depends_on_target_prior_does_not() {
        let cfg = tiny();
        let m = mask(&[true; 6]);
        let mut p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.posterior.out = Linear::xavier(cfg.d_model, 2 * cfg.d_latent, &mut rng);
        p.prior.out = Linear::xavier(cfg.d_model, 2 * cfg.d_latent, &mut rng);
        let h = encode_causal(&cfg, &p, &inputs(&cfg, 1, 1), &m).unwrap();
        let q1 = latent_posterior(&cfg, &p, &h, &array![0.1]);
        let q2 = latent_posterior(&cfg, &p, &h, &array![0.9]);
        assert_ne!(q1, q2);
        assert_eq!(latent_prior(&cfg, &p, &h), latent_prior(&cfg, &p, &h));
    }

    #[test]
    fn reparameterisation_cases() {
        let mu = array![[0.5, -1.0]];
        let z = sample_latent(mu.view(), array![[3.0, -2.0]].view(), Array2::zeros((1, 2)).view());
        assert_eq!(z, mu);
        let z = sample_latent(mu.view(), Array2::zeros((1, 2)).view(), Array2::ones((1, 2)).view());
        assert_eq!(z, array![[1.5, 0.0]]);
    }

    #[test]
    fn reparameterised_moments() {
        // Monte-Carlo moment check against the generating (mu, sigma).
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eps = Array2::from_shape_simple_fn((n, 1), || StandardNormal.sample(&mut rng));
        let (mu, lv) = (0.7_f64, 2.0_f64.ln());
        let z = sample_latent(
            Array2::from_elem((n, 1), mu).view(),
            Array2::from_elem((n, 1), lv).view(),
            eps.view(),
        );
        let sigma = (0.5 * lv).exp();
        let mean = z.mean().unwrap();
        let sd = z.std(1.0);
        let se_mean = sigma / (n as f64).sqrt();
        let se_sd = sigma / (2.0 * n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((sd - sigma).abs() < 3.0 * se_sd, "sd {sd}");
    }

    #[test]
    fn causal_head_depends_on_latent() {
        let cfg = tiny();
        let m = mask(&[true; 6]);
        let mut p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(0));
        p.head.out = Linear::xavier(cfg.d_model, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let h = encode_causal(&cfg, &p, &inputs(&cfg, 1, 1), &m).unwrap();
        let a = causal_head(&cfg, &p, &h, &array![[0.0, 0.0]]);
        let a2 = causal_head(&cfg, &p, &h, &array![[0.0, 0.0]]);
        let b = causal_head(&cfg, &p, &h, &array![[1.0, -1.0]]);
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn zero_residual_heads_copy_causal_prediction() {
        let cfg = tiny();
        let m = mask(&[true, false, true, false, true, false]);
        let p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(2));
        let x = inputs(&cfg, 2, 3);
        let causal = vec![
            GaussianPrediction { mean: 0.3, log_var: -1.0 },
            GaussianPrediction { mean: -0.2, log_var: 0.5 },
        ];
        let out = shadow_forward(&cfg, &p, &x, &Array2::zeros((2, 2)), &causal).unwrap();
        assert_eq!(out.aux, causal);
    }

    #[test]
    fn saturated_gate_blanks_auxiliary_input() {
        let cfg = tiny();
        let m = mask(&[true; 6]);
        let mut p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(2));
        p.gate_logits.fill(-800.0);
        let a = encode_aux(&cfg, &p, &inputs(&cfg, 1, 1)).unwrap();
        let b = encode_aux(&cfg, &p, &inputs(&cfg, 1, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_structure_and_determinism() {
        let cfg = tiny();
        let m = mask(&[true; 6]);
        let mut p = BlockParams::new(&cfg, &m, &mut ChaCha8Rng::seed_from_u64(2));
        p.prior.out = Linear::xavier(cfg.d_model, 4, &mut ChaCha8Rng::seed_from_u64(5));
        p.head.out = Linear::xavier(cfg.d_model, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let x = inputs(&cfg, 3, 1);
        let noise = inputs(&ModelConfig { window: 4, max_lag: 1, channels: 2, ..tiny() }, 3, 9);
        let a = forward_infer(&cfg, &p, &x, &m, &noise).unwrap();
        let b = forward_infer(&cfg, &p, &x, &m, &noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|r| r.len() == 4));
        assert_ne!(a[0][0], a[0][1]);

        // Tiny prior variance collapses the draws.
        p.prior.out.b[2] = -1e3;
        p.prior.out.b[3] = -1e3;
        let c = forward_infer(&cfg, &p, &x, &m, &noise).unwrap();
        let spread = c[0]
            .iter()
            .map(|pp| (pp.causal.mean - c[0][0].causal.mean).abs())
            .fold(0.0, f64::max);
        assert!(spread < 0.05, "spread {spread}");
    }

    #[test]
    fn parameter_groups_cover_all_tensors() {
        let cfg = tiny();
        let p = BlockParams::new(&cfg, &mask(&[true; 6]), &mut ChaCha8Rng::seed_from_u64(0));
        let names = p.names();
        assert!(names.iter().any(|(n, _)| ParamGroup::of(n) == ParamGroup::Gate));
        for (n, _) in &names {
            let _ = ParamGroup::of(n);
        }
        assert_eq!(p.flatten().len(), p.n_params());
    }
}
