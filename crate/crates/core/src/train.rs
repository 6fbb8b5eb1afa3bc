//! Training objective, gate regularisers and the per-block optimisation loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{iterate_target_batches, LagSpec, SeriesFrame, TargetBatch};
use crate::error::{CgtError, Result};
use crate::graph::ParentMask;
use crate::model::layers::{sigmoid, Params};
use crate::model::{
    train_backward, train_forward, BlockParams, Detached, ModelConfig, OutputGrads, TrainForward,
};
use crate::seed::{self, tag};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Cap of the auxiliary weight.
    pub gamma: f64,
    /// Cap of the KL weight.
    pub beta: f64,
    pub lambda_res: f64,
    pub lambda_prior: f64,
    pub lambda_other: f64,
    pub lambda_push: f64,
    pub lambda_margin: f64,
    pub margin: f64,
    pub lambda_group: f64,
    pub parent_bce_weight: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            warmup_epochs: 5,
            gamma: 0.0206,
            beta: 1.0,
            lambda_res: 0.01,
            lambda_prior: 0.1,
            lambda_other: 0.05,
            lambda_push: 0.05,
            lambda_margin: 0.1,
            margin: 0.1,
            lambda_group: 0.01,
            parent_bce_weight: 5.0,
            learning_rate: 3.9e-4,
            clip_norm: 0.823,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("beta", self.beta),
            ("lambda_res", self.lambda_res),
            ("lambda_prior", self.lambda_prior),
            ("lambda_other", self.lambda_other),
            ("lambda_push", self.lambda_push),
            ("lambda_margin", self.lambda_margin),
            ("margin", self.margin),
            ("lambda_group", self.lambda_group),
            ("parent_bce_weight", self.parent_bce_weight),
        ];
        if let Some((name, v)) = lambdas.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(CgtError::Config(format!("train.{name} = {v} must be non-negative")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CgtError::Config(format!("train.gamma = {} outside [0, 1]", self.gamma)));
        }
        if self.warmup_epochs == 0 {
            return Err(CgtError::Config("train.warmup_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(CgtError::Config(
                "train.batch_size, learning_rate and clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn gaussian_nll(y: f64, mean: f64, log_var: f64) -> f64 {
    let r = y - mean;
    HALF_LN_2PI + 0.5 * (log_var + r * r * (-log_var).exp())
}

/// `(d/d mean, d/d log_var)` of [`gaussian_nll`].
fn gaussian_nll_grad(y: f64, mean: f64, log_var: f64) -> (f64, f64) {
    let r = y - mean;
    let prec = (-log_var).exp();
    (-r * prec, 0.5 * (1.0 - r * r * prec))
}

/// KL divergence between diagonal Gaussians `q` and `p`.
pub fn kl_diag_gaussians(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(lv_q)
        .zip(mu_p.iter().zip(lv_p))
        .map(|((&mq, &vq), (&mp, &vp))| {
            let d = mq - mp;
            0.5 * (vp - vq + (vq.exp() + d * d) * (-vp).exp() - 1.0)
        })
        .sum()
}

/// Weighted gate regularisers; each value already includes its lambda.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateRegularizers {
    pub prior: f64,
    pub other: f64,
    pub push: f64,
    pub margin: f64,
    pub group: f64,
}

impl GateRegularizers {
    pub fn total(&self) -> f64 {
        self.prior + self.other + self.push + self.margin + self.group
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn split_means(alpha: &[f64], mask: &[bool]) -> (f64, usize, f64, usize) {
    let (mut sp, mut np, mut so, mut no) = (0.0, 0, 0.0, 0);
    for (&a, &m) in alpha.iter().zip(mask) {
        if m {
            sp += a;
            np += 1;
        } else {
            so += a;
            no += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(sp, np), np, mean(so, no), no)
}

/// Regulariser values and their gradient with respect to the gate logits.
pub fn gate_regularizers(
    logits: &[f64],
    mask: &ParentMask,
    max_lag: usize,
    cfg: &TrainConfig,
) -> (GateRegularizers, Array1<f64>) {
    let p = logits.len();
    let bits = &mask.bits;
    let alpha: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let slope: Vec<f64> = alpha.iter().map(|a| a * (1.0 - a)).collect();
    let mut grad = Array1::zeros(p);
    let mut r = GateRegularizers::default();
    if p == 0 {
        return (r, grad);
    }

    let mut bce = 0.0;
    for c in 0..p {
        let (w, loss) = if bits[c] {
            (cfg.parent_bce_weight, softplus(-logits[c]))
        } else {
            (1.0, softplus(logits[c]))
        };
        bce += w * loss;
        let target = if bits[c] { 1.0 } else { 0.0 };
        grad[c] += cfg.lambda_prior * w * (alpha[c] - target) / p as f64;
    }
    r.prior = cfg.lambda_prior * bce / p as f64;

    let (mean_par, n_par, mean_oth, n_oth) = split_means(&alpha, bits);
    if n_oth > 0 {
        r.other = cfg.lambda_other * mean_oth;
    }
    if n_par > 0 {
        r.push = cfg.lambda_push * (1.0 - mean_par);
    }
    let hinge = mean_oth - mean_par + cfg.margin;
    if hinge > 0.0 {
        r.margin = cfg.lambda_margin * hinge;
    }
    for c in 0..p {
        if bits[c] {
            let d = slope[c] / n_par as f64;
            grad[c] -= cfg.lambda_push * d;
            if hinge > 0.0 {
                grad[c] -= cfg.lambda_margin * d;
            }
        } else {
            let d = slope[c] / n_oth as f64;
            grad[c] += cfg.lambda_other * d;
            if hinge > 0.0 {
                grad[c] += cfg.lambda_margin * d;
            }
        }
    }

    let sensors = p / max_lag;
    let mut group = 0.0;
    for j in 0..sensors {
        let cols = j * max_lag..(j + 1) * max_lag;
        let norm = alpha[cols.clone()].iter().map(|a| a * a).sum::<f64>().sqrt();
        group += norm;
        if norm > 0.0 {
            for c in cols {
                grad[c] += cfg.lambda_group / sensors as f64 * alpha[c] / norm * slope[c];
            }
        }
    }
    r.group = cfg.lambda_group * group / sensors as f64;
    (r, grad)
}

/// Warm-up schedule: `(gamma_t, beta_t)` for 0-based epoch `e`.
pub fn schedules(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let ramp = (epoch + 1) as f64 / cfg.warmup_epochs.max(1) as f64;
    (cfg.gamma.min(ramp * cfg.gamma), cfg.beta * ramp.min(1.0))
}

/// Which terms of the objective are active and with what weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub causal: f64,
    pub aux: f64,
    pub kl: f64,
    pub residual: f64,
    pub gate: bool,
}

impl ObjectiveWeights {
    pub fn at_epoch(epoch: usize, cfg: &TrainConfig) -> Self {
        let (gamma, beta) = schedules(epoch, cfg);
        Self {
            causal: 1.0 - gamma,
            aux: gamma,
            kl: beta,
            residual: cfg.lambda_res,
            gate: true,
        }
    }

    /// Only the auxiliary likelihood and the residual penalty.
    pub fn auxiliary_only(lambda_res: f64) -> Self {
        Self {
            causal: 0.0,
            aux: 1.0,
            kl: 0.0,
            residual: lambda_res,
            gate: false,
        }
    }

    /// Only the gate regularisers.
    pub fn gate_only() -> Self {
        Self {
            causal: 0.0,
            aux: 0.0,
            kl: 0.0,
            residual: 0.0,
            gate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub causal_nll: f64,
    pub aux_nll: f64,
    pub kl: f64,
    pub residual: f64,
    pub reg: GateRegularizers,
    pub total: f64,
    pub skipped_batches: usize,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.causal_nll += other.causal_nll;
        self.aux_nll += other.aux_nll;
        self.kl += other.kl;
        self.residual += other.residual;
        self.reg.prior += other.reg.prior;
        self.reg.other += other.reg.other;
        self.reg.push += other.reg.push;
        self.reg.margin += other.reg.margin;
        self.reg.group += other.reg.group;
        self.total += other.total;
    }

    fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            causal_nll: self.causal_nll * f,
            aux_nll: self.aux_nll * f,
            kl: self.kl * f,
            residual: self.residual * f,
            reg: GateRegularizers {
                prior: self.reg.prior * f,
                other: self.reg.other * f,
                push: self.reg.push * f,
                margin: self.reg.margin * f,
                group: self.reg.group * f,
            },
            total: self.total * f,
            skipped_batches: self.skipped_batches,
        }
    }
}

/// Objective value, optional gradient and the detached values used.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: LossBreakdown,
    pub grad: Option<BlockParams>,
    pub detached: Detached,
}

/// Evaluates the training objective on one batch.
///
/// With `frozen`, stop-gradient inputs of the auxiliary path come from the
/// supplied values, so the returned loss is exactly the function whose
/// derivative the returned gradient is.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    model: &ModelConfig,
    cfg: &TrainConfig,
    weights: ObjectiveWeights,
    params: &BlockParams,
    batch: &TargetBatch,
    mask: &ParentMask,
    eps: &Array2<f64>,
    frozen: Option<&Detached>,
    with_grad: bool,
) -> Result<Objective> {
    let fwd = train_forward(model, params, &batch.inputs, &batch.targets, mask, eps, frozen)?;
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let dz = model.d_latent;
    let y = &batch.targets;
    let det = &fwd.detached;

    let mut loss = LossBreakdown::default();
    let mut og = OutputGrads {
        causal_mean: Array1::zeros(b),
        causal_log_var: Array1::zeros(b),
        prior_mean: Array2::zeros((b, dz)),
        prior_log_var: Array2::zeros((b, dz)),
        posterior_mean: Array2::zeros((b, dz)),
        posterior_log_var: Array2::zeros((b, dz)),
        delta_mean: Array1::zeros(b),
        delta_log_var: Array1::zeros(b),
        gate_logits: Array1::zeros(params.gate_logits.len()),
    };

    for k in 0..b {
        let c = fwd.causal[k];
        loss.causal_nll += gaussian_nll(y[k], c.mean, c.log_var) * inv_b;
        let (gm, gv) = gaussian_nll_grad(y[k], c.mean, c.log_var);
        og.causal_mean[k] = weights.causal * gm * inv_b;
        og.causal_log_var[k] = weights.causal * gv * inv_b;

        let dm = fwd.residual_raw[[k, 0]];
        let dv = fwd.residual_raw[[k, 1]];
        let raw_lv = det.causal_log_var[k] + dv;
        let aux_mean = det.causal_mean[k] + dm;
        let aux_lv = model.clamp_logvar(raw_lv);
        loss.aux_nll += gaussian_nll(y[k], aux_mean, aux_lv) * inv_b;
        loss.residual += (dm * dm + dv * dv) * inv_b;
        let (am, av) = gaussian_nll_grad(y[k], aux_mean, aux_lv);
        og.delta_mean[k] = (weights.aux * am + weights.residual * 2.0 * dm) * inv_b;
        og.delta_log_var[k] =
            (weights.aux * av * model.clamp_pass(raw_lv) + weights.residual * 2.0 * dv) * inv_b;

        let q = &fwd.posterior;
        let p = &fwd.prior;
        for m in 0..dz {
            let (mq, vq, mp, vp) = (q.mean[[k, m]], q.log_var[[k, m]], p.mean[[k, m]], p.log_var[[k, m]]);
            let d = mq - mp;
            let ivp = (-vp).exp();
            loss.kl += 0.5 * (vp - vq + (vq.exp() + d * d) * ivp - 1.0) * inv_b;
            let s = weights.kl * inv_b;
            og.posterior_mean[[k, m]] = s * d * ivp;
            og.prior_mean[[k, m]] = -s * d * ivp;
            og.posterior_log_var[[k, m]] = s * 0.5 * ((vq - vp).exp() - 1.0);
            og.prior_log_var[[k, m]] = s * 0.5 * (1.0 - (vq.exp() + d * d) * ivp);
        }
    }

    if weights.gate {
        let (reg, g) = gate_regularizers(
            params.gate_logits.as_slice().expect("contiguous"),
            mask,
            model.max_lag,
            cfg,
        );
        loss.reg = reg;
        og.gate_logits = g;
    }
    loss.total = weights.causal * loss.causal_nll
        + weights.aux * loss.aux_nll
        + weights.kl * loss.kl
        + weights.residual * loss.residual
        + loss.reg.total();

    let grad = if with_grad && loss.total.is_finite() {
        Some(train_backward(model, params, &fwd, &og))
    } else {
        None
    };
    let TrainForward { detached, .. } = fwd;
    Ok(Objective {
        loss,
        grad,
        detached,
    })
}

/// Rescales `grad` in place so its global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grad: &mut BlockParams, max_norm: f64) -> f64 {
    let norm = grad.global_norm();
    if norm > max_norm {
        let f = max_norm / norm;
        grad.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x *= f));
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut BlockParams, grad: &BlockParams) {
        let g = grad.flatten();
        debug_assert_eq!(g.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut k = 0;
        params.visit_mut("", &mut |_, values| {
            for x in values.iter_mut() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if update != 0.0 {
                    *x -= update;
                }
                k += 1;
            }
        });
    }
}

/// Standard-normal noise of shape `rows x cols`.
pub fn normal_noise<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Trained parameters and per-epoch mean losses of one block.
#[derive(Debug, Clone)]
pub struct TrainedBlock {
    pub target: usize,
    pub params: BlockParams,
    pub history: Vec<LossBreakdown>,
}

/// Optimises one block over the batches produced by `batches(epoch)`.
pub fn train_block<F>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut params: BlockParams,
    mask: &ParentMask,
    mut batches: F,
) -> Result<TrainedBlock>
where
    F: FnMut(usize) -> Result<Vec<TargetBatch>>,
{
    cfg.validate()?;
    let mut adam = Adam::new(params.n_params(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let weights = ObjectiveWeights::at_epoch(epoch, cfg);
        let mut sum = LossBreakdown::default();
        let mut used = 0usize;
        let mut skipped = 0usize;
        let epoch_batches = batches(epoch)?;
        let mut rng = seed::stream(cfg.seed, &[tag::TRAIN_NOISE, mask.target as u64, epoch as u64]);
        for batch in &epoch_batches {
            let eps = normal_noise(&mut rng, batch.len(), model.d_latent);
            let obj = objective(model, cfg, weights, &params, batch, mask, &eps, None, true)?;
            let Some(mut grad) = obj.grad.filter(|_| obj.loss.total.is_finite()) else {
                skipped += 1;
                continue;
            };
            if !grad.global_norm().is_finite() {
                skipped += 1;
                continue;
            }
            clip_global_norm(&mut grad, cfg.clip_norm);
            adam.step(&mut params, &grad);
            sum.accumulate(&obj.loss);
            used += 1;
        }
        if used == 0 {
            return Err(CgtError::Training {
                target: mask.target,
                message: format!("every batch of epoch {epoch} was skipped"),
            });
        }
        let mut mean = sum.scaled(1.0 / used as f64);
        mean.skipped_batches = skipped;
        log::debug!(
            "target {} epoch {epoch}: total {:.5} causal {:.5}",
            mask.target,
            mean.total,
            mean.causal_nll
        );
        history.push(mean);
    }
    Ok(TrainedBlock {
        target: mask.target,
        params,
        history,
    })
}

/// Fresh parameters for target `mask.target` under `cfg.seed`.
pub fn init_block(model: &ModelConfig, cfg: &TrainConfig, mask: &ParentMask) -> BlockParams {
    let mut rng = seed::stream(cfg.seed, &[tag::INIT, mask.target as u64]);
    BlockParams::new(model, mask, &mut rng)
}

/// Trains one block on a scaled training frame with per-epoch shuffling.
pub fn train_target(
    model: &ModelConfig,
    cfg: &TrainConfig,
    frame: &SeriesFrame,
    mask: &ParentMask,
) -> Result<TrainedBlock> {
    let spec = LagSpec::new(model.window, model.max_lag)?;
    let target = mask.target;
    train_block(model, cfg, init_block(model, cfg, mask), mask, |epoch| {
        let shuffle = seed::derive_seed(cfg.seed, &[tag::SHUFFLE, target as u64, epoch as u64]);
        Ok(iterate_target_batches(frame, target, spec, cfg.batch_size, Some(shuffle))?.collect())
    })
}

/// Trains every block, `workers` at a time. Results do not depend on `workers`.
pub fn train_all(
    model: &ModelConfig,
    cfg: &TrainConfig,
    frame: &SeriesFrame,
    masks: &[ParentMask],
    workers: usize,
) -> Result<Vec<TrainedBlock>> {
    model.validate()?;
    cfg.validate()?;
    if frame.channels() != model.channels {
        return Err(CgtError::Shape(format!(
            "training frame has {} channels, model expects {}",
            frame.channels(),
            model.channels
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CgtError::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        masks
            .par_iter()
            .map(|m| train_target(model, cfg, frame, m))
            .collect()
    })
}

pub const TRAINING_LOG_HEADER: &str =
    "target,epoch,causal_nll,aux_nll,kl,residual,r_prior,r_other,r_push,r_margin,r_group,total,skipped_batches";

pub fn training_log_csv(blocks: &[TrainedBlock]) -> String {
    let mut out = String::from(TRAINING_LOG_HEADER);
    out.push('\n');
    for b in blocks {
        for (e, l) in b.history.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                b.target,
                l.causal_nll,
                l.aux_nll,
                l.kl,
                l.residual,
                l.reg.prior,
                l.reg.other,
                l.reg.push,
                l.reg.margin,
                l.reg.group,
                l.total,
                l.skipped_batches
            );
        }
    }
    out
}

pub fn write_training_log(path: impl AsRef<Path>, blocks: &[TrainedBlock]) -> Result<()> {
    fs::write(path, training_log_csv(blocks))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[bool]) -> ParentMask {
        ParentMask {
            target: 0,
            bits: bits.to_vec(),
        }
    }

    #[test]
    fn nll_closed_forms() {
        assert!((gaussian_nll(0.3, 0.3, 0.0) - 0.918_938_5).abs() < 1e-7);
        assert!((gaussian_nll(1.0, 0.0, 0.0) - 1.418_938_5).abs() < 1e-7);
        assert!((gaussian_nll(2.0, 0.0, 4f64.ln()) - 2.112_085_713).abs() < 1e-8);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag_gaussians(&[0.2, -1.0], &[0.3, 1.0], &[0.2, -1.0], &[0.3, 1.0]), 0.0);
        assert!((kl_diag_gaussians(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn schedule_cases() {
        let cfg = TrainConfig::default();
        let (g, b) = schedules(0, &cfg);
        assert!((g - cfg.gamma / 5.0).abs() < 1e-15 && (b - cfg.beta / 5.0).abs() < 1e-15);
        assert_eq!(schedules(4, &cfg), (cfg.gamma, cfg.beta));
        assert_eq!(schedules(9, &cfg), (cfg.gamma, cfg.beta));
        let one = TrainConfig { warmup_epochs: 1, ..cfg.clone() };
        assert_eq!(schedules(0, &one), (cfg.gamma, cfg.beta));
    }

    #[test]
    fn regularizers_at_zero_logits() {
        let cfg = TrainConfig::default();
        let m = mask(&[true, false, false, true, false, false]);
        let (r, _) = gate_regularizers(&[0.0; 6], &m, 2, &cfg);
        assert!((r.margin - cfg.lambda_margin * cfg.margin).abs() < 1e-15);
        assert!((r.group - cfg.lambda_group * 0.5 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn regularizers_at_separation_limit() {
        let cfg = TrainConfig::default();
        let m = mask(&[true, false, true, false]);
        let (r, _) = gate_regularizers(&[60.0, -60.0, 60.0, -60.0], &m, 2, &cfg);
        assert!(r.other < 1e-20 && r.push < 1e-20 && r.margin == 0.0);
    }

    #[test]
    fn all_parent_mask_has_no_other_term() {
        let cfg = TrainConfig::default();
        let (r, _) = gate_regularizers(&[0.3, -0.2, 1.0, 0.0], &mask(&[true; 4]), 2, &cfg);
        assert_eq!(r.other, 0.0);
    }

    #[test]
    fn regularizer_gradient_matches_differences() {
        let cfg = TrainConfig::default();
        let m = mask(&[true, false, false, true, true, false]);
        let logits = [0.4, -1.3, 0.2, 2.0, -0.5, 0.9];
        let (_, g) = gate_regularizers(&logits, &m, 3, &cfg);
        for c in 0..logits.len() {
            let h = 1e-6;
            let mut up = logits;
            up[c] += h;
            let mut dn = logits;
            dn[c] -= h;
            let f = |l: &[f64]| gate_regularizers(l, &m, 3, &cfg).0.total();
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-8, "column {c}: {fd} vs {}", g[c]);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let model = ModelConfig {
            window: 2,
            max_lag: 1,
            channels: 2,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 4,
            d_latent: 1,
            ..ModelConfig::default()
        };
        let m = mask(&[true, false]);
        let p = init_block(&model, &TrainConfig::default(), &m);
        let mut g = p.clone();
        g.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x += 1e3));
        let before = clip_global_norm(&mut g, 0.823);
        assert!(before > 0.823);
        assert!(g.global_norm() <= 0.823 + 1e-6);
    }
}
