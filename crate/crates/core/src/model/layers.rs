//! Dense layers with hand-written reverse-mode derivatives.
//!
//! Every layer stores its parameters in plain `ndarray` containers. The same
//! struct doubles as the gradient accumulator for that layer.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Callback receiving `(name, shape, values)` for each tensor.
pub type Visitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;

/// Uniform visitation of named parameter tensors.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit1(a: &Array1<f64>, name: String, f: &mut Visitor<'_>) {
    f(&name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit2(a: &Array2<f64>, name: String, f: &mut Visitor<'_>) {
    f(&name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit1_mut(a: &mut Array1<f64>, name: String, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(&name, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit2_mut(a: &mut Array2<f64>, name: String, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(&name, a.as_slice_mut().expect("standard layout"));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
        Self {
            w: Array2::from_shape_simple_fn((n_in, n_out), || dist.sample(rng)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        visit2(&self.w, join(prefix, "w"), f);
        visit1(&self.b, join(prefix, "b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit2_mut(&mut self.w, join(prefix, "w"), f);
        visit1_mut(&mut self.b, join(prefix, "b"), f);
    }
}

/// Row-wise layer normalisation with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum = row.sum();
            let dot = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            for (v, &h) in row.iter_mut().zip(xh.iter()) {
                *v = inv / n * (n * *v - sum - h * dot);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        visit1(&self.gamma, join(prefix, "gamma"), f);
        visit1(&self.beta, join(prefix, "beta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit1_mut(&mut self.gamma, join(prefix, "gamma"), f);
        visit1_mut(&mut self.beta, join(prefix, "beta"), f);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    /// Xavier hidden layer and a zero output layer.
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::xavier(n_in, n_hidden, rng),
            out: Linear::zeros(n_hidden, n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: Linear::zeros(self.hidden.w.nrows(), self.hidden.w.ncols()),
            out: Linear::zeros(self.out.w.nrows(), self.out.w.ncols()),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let act = self.hidden.forward(&x).mapv_into(f64::tanh);
        let y = self.out.forward(&act);
        (y, MlpCache { input: x, act })
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.out.forward(&self.hidden.forward(x).mapv_into(f64::tanh))
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dact = self.out.backward(&cache.act, dy, &mut grad.out);
        let dpre = dact * &cache.act.mapv(|a| 1.0 - a * a);
        self.hidden.backward(&cache.input, &dpre, &mut grad.hidden)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm Transformer encoder layer: self-attention and a GELU
/// feed-forward network, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub n_heads: usize,
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    ln_attn: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities, `(B * heads * W) x W`.
    probs: Array2<f64>,
    ctx: Array2<f64>,
    ln_ff: LayerNormCache,
    b: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(d_model: usize, n_heads: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            n_heads,
            ln_attn: LayerNorm::new(d_model),
            q: Linear::xavier(d_model, d_model, rng),
            k: Linear::xavier(d_model, d_model, rng),
            v: Linear::xavier(d_model, d_model, rng),
            o: Linear::xavier(d_model, d_model, rng),
            ln_ff: LayerNorm::new(d_model),
            ff_in: Linear::xavier(d_model, d_ff, rng),
            ff_out: Linear::xavier(d_ff, d_model, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.q.w.nrows();
        let d_ff = self.ff_in.w.ncols();
        Self {
            n_heads: self.n_heads,
            ln_attn: LayerNorm::zeros(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            ln_ff: LayerNorm::zeros(d),
            ff_in: Linear::zeros(d, d_ff),
            ff_out: Linear::zeros(d_ff, d),
        }
    }

    /// Multi-head self-attention over each length-`window` sequence in `q/k/v`.
    fn attend(
        &self,
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        window: usize,
        keep_probs: bool,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let rows = q.nrows();
        let d = q.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / window;
        let mut ctx = Array2::zeros((rows, d));
        let mut probs = keep_probs.then(|| Array2::zeros((batch * self.n_heads * window, window)));
        for b in 0..batch {
            let r = b * window..(b + 1) * window;
            for h in 0..self.n_heads {
                let c = h * dh..(h + 1) * dh;
                let qh = q.slice(s![r.clone(), c.clone()]);
                let kh = k.slice(s![r.clone(), c.clone()]);
                let vh = v.slice(s![r.clone(), c.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for mut row in scores.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                }
                ctx.slice_mut(s![r.clone(), c.clone()]).assign(&scores.dot(&vh));
                if let Some(p) = probs.as_mut() {
                    let start = (b * self.n_heads + h) * window;
                    p.slice_mut(s![start..start + window, ..]).assign(&scores);
                }
            }
        }
        (ctx, probs)
    }

    pub fn forward(&self, x: &Array2<f64>, window: usize) -> (Array2<f64>, EncoderLayerCache) {
        let (a, ln_attn) = self.ln_attn.forward(x);
        let q = self.q.forward(&a);
        let k = self.k.forward(&a);
        let v = self.v.forward(&a);
        let (ctx, probs) = self.attend(&q, &k, &v, window, true);
        let h1 = x + &self.o.forward(&ctx);
        let (b, ln_ff) = self.ln_ff.forward(&h1);
        let ff_pre = self.ff_in.forward(&b);
        let ff_act = ff_pre.mapv(gelu);
        let out = &h1 + &self.ff_out.forward(&ff_act);
        let cache = EncoderLayerCache {
            ln_attn,
            a,
            q,
            k,
            v,
            probs: probs.expect("requested"),
            ctx,
            ln_ff,
            b,
            ff_pre,
            ff_act,
        };
        (out, cache)
    }

    /// Forward pass without retaining intermediates.
    pub fn infer(&self, x: &Array2<f64>, window: usize) -> Array2<f64> {
        let (a, _) = self.ln_attn.forward(x);
        let (ctx, _) = self.attend(
            &self.q.forward(&a),
            &self.k.forward(&a),
            &self.v.forward(&a),
            window,
            false,
        );
        let h1 = x + &self.o.forward(&ctx);
        let (b, _) = self.ln_ff.forward(&h1);
        &h1 + &self.ff_out.forward(&self.ff_in.forward(&b).mapv_into(gelu))
    }

    pub fn backward(
        &self,
        cache: &EncoderLayerCache,
        dout: &Array2<f64>,
        window: usize,
        grad: &mut EncoderLayer,
    ) -> Array2<f64> {
        // Feed-forward branch.
        let dact = self.ff_out.backward(&cache.ff_act, dout, &mut grad.ff_out);
        let dpre = dact * &cache.ff_pre.mapv(gelu_grad);
        let db = self.ff_in.backward(&cache.b, &dpre, &mut grad.ff_in);
        let mut dh1 = dout + &self.ln_ff.backward(&cache.ln_ff, &db, &mut grad.ln_ff);

        // Attention branch.
        let dctx = self.o.backward(&cache.ctx, &dh1, &mut grad.o);
        let rows = dctx.nrows();
        let d = dctx.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros((rows, d));
        let mut dk = Array2::zeros((rows, d));
        let mut dv = Array2::zeros((rows, d));
        for b in 0..rows / window {
            let r = b * window..(b + 1) * window;
            for h in 0..self.n_heads {
                let c = h * dh..(h + 1) * dh;
                let start = (b * self.n_heads + h) * window;
                let p = cache.probs.slice(s![start..start + window, ..]);
                let dctx_h = dctx.slice(s![r.clone(), c.clone()]);
                let vh = cache.v.slice(s![r.clone(), c.clone()]);
                dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&dctx_h));
                let dp = dctx_h.dot(&vh.t());
                let mut ds = &dp * &p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let sum = row.sum();
                    for (x, &pp) in row.iter_mut().zip(prow.iter()) {
                        *x -= pp * sum;
                    }
                }
                ds *= scale;
                let qh = cache.q.slice(s![r.clone(), c.clone()]);
                let kh = cache.k.slice(s![r.clone(), c.clone()]);
                dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![r.clone(), c.clone()]).assign(&ds.t().dot(&qh));
            }
        }
        let mut da = self.q.backward(&cache.a, &dq, &mut grad.q);
        da += &self.k.backward(&cache.a, &dk, &mut grad.k);
        da += &self.v.backward(&cache.a, &dv, &mut grad.v);
        dh1 += &self.ln_attn.backward(&cache.ln_attn, &da, &mut grad.ln_attn);
        dh1
    }
}

impl Params for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.ln_attn.visit(&join(prefix, "ln_attn"), f);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        self.ln_ff.visit(&join(prefix, "ln_ff"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.ln_attn.visit_mut(&join(prefix, "ln_attn"), f);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
        self.ln_ff.visit_mut(&join(prefix, "ln_ff"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}
