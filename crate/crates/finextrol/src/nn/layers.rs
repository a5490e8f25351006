//! Transformer building blocks with explicit caches and manual backward
//! passes. Forwards take `&self` so a frozen model can serve concurrent
//! callers; backwards take `&mut self` only to accumulate gradients.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::{softmax_rows_inplace, Activation, Param};

/// Dense layer `y = x W + b` with `x: (n, in)`, `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Linear {
        Linear {
            w: Param::xavier(rng, input, output),
            b: Param::zeros(1, output),
        }
    }

    /// All-zero weights and biases; the layer maps everything to zero until
    /// trained.
    pub fn new_zero(input: usize, output: usize) -> Linear {
        Linear {
            w: Param::zeros(input, output),
            b: Param::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.v) + &self.b.v
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// `x` must be the forward input.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        self.w.g += &x.t().dot(gy);
        self.b.g += &gy.sum_axis(Axis(0)).insert_axis(Axis(0));
        gy.dot(&self.w.v.t())
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Param::from_value(Array2::ones((1, dim))),
            beta: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>, cache: Option<&mut Option<LnCache>>) -> Array2<f64> {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std[i] = is;
        }
        let y = &xhat * &self.gamma.v + &self.beta.v;
        if let Some(slot) = cache {
            *slot = Some(LnCache { xhat, inv_std });
        }
        y
    }

    pub fn backward(&mut self, cache: &LnCache, gy: &Array2<f64>) -> Array2<f64> {
        let d = gy.ncols() as f64;
        self.gamma.g += &(gy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.g += &gy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let ghat = gy * &self.gamma.v;
        let mut gx = Array2::zeros(gy.raw_dim());
        for i in 0..gy.nrows() {
            let gh = ghat.row(i);
            let xh = cache.xhat.row(i);
            let mean_gh = gh.sum() / d;
            let mean_ghx = gh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let is = cache.inv_std[i];
            for c in 0..gy.ncols() {
                gx[[i, c]] = is * (gh[c] - mean_gh - xh[c] * mean_ghx);
            }
        }
        gx
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Token embedding table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Embedding {
        Embedding {
            table: Param::normal(rng, vocab, dim, 0.02),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Array2<f64> {
        let dim = self.table.v.ncols();
        let mut out = Array2::zeros((ids.len(), dim));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.table.v.row(id));
        }
        out
    }

    pub fn backward(&mut self, ids: &[usize], gy: &Array2<f64>) {
        for (i, &id) in ids.iter().enumerate() {
            let mut row = self.table.g.row_mut(id);
            row += &gy.row(i);
        }
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(format!("{prefix}.table"), &mut self.table);
    }
}

/// Position-wise two-layer MLP with a nonlinearity.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> FeedForward {
        FeedForward {
            lin1: Linear::new(rng, dim, hidden),
            lin2: Linear::new(rng, hidden, dim),
            act: Activation::Gelu,
        }
    }

    pub fn forward(&self, x: &Array2<f64>, cache: Option<&mut Option<FfnCache>>) -> Array2<f64> {
        let pre = self.lin1.forward(x);
        let hidden = pre.mapv(|v| self.act.apply(v));
        let y = self.lin2.forward(&hidden);
        if let Some(slot) = cache {
            *slot = Some(FfnCache {
                x: x.clone(),
                pre,
                hidden,
            });
        }
        y
    }

    pub fn backward(&mut self, cache: &FfnCache, gy: &Array2<f64>) -> Array2<f64> {
        let ghidden = self.lin2.backward(&cache.hidden, gy);
        let gpre = &ghidden * &cache.pre.mapv(|v| self.act.derivative(v));
        self.lin1.backward(&cache.x, &gpre)
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }
}

/// Multi-head self-attention with optional key padding.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, n_heads: usize) -> MultiHeadAttention {
        assert!(dim % n_heads == 0, "dim {dim} not divisible by {n_heads} heads");
        MultiHeadAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
            n_heads,
        }
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        key_pad: Option<&[bool]>,
        cache: Option<&mut Option<AttnCache>>,
    ) -> Array2<f64> {
        let (len, dim) = x.dim();
        let dk = dim / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut ctx = Array2::zeros((len, dim));
        let mut attn = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            if let Some(pad) = key_pad {
                for (j, &is_pad) in pad.iter().enumerate() {
                    if is_pad {
                        scores.column_mut(j).fill(-1e30);
                    }
                }
            }
            softmax_rows_inplace(&mut scores);
            let ch = scores.dot(&vh);
            ctx.slice_mut(cols).assign(&ch);
            attn.push(scores);
        }
        let y = self.wo.forward(&ctx);
        if let Some(slot) = cache {
            *slot = Some(AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                ctx,
            });
        }
        y
    }

    pub fn backward(&mut self, cache: &AttnCache, gy: &Array2<f64>) -> Array2<f64> {
        let (len, dim) = cache.x.dim();
        let dk = dim / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let gctx = self.wo.backward(&cache.ctx, gy);
        let mut gq = Array2::zeros((len, dim));
        let mut gk = Array2::zeros((len, dim));
        let mut gv = Array2::zeros((len, dim));
        for h in 0..self.n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let a = &cache.attn[h];
            let gctx_h = gctx.slice(cols);
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);

            let ga = gctx_h.dot(&vh.t());
            gv.slice_mut(cols).assign(&a.t().dot(&gctx_h));

            // softmax backward: gs = a * (ga - rowsum(ga * a))
            let rowsum = (&ga * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let gs = a * &(&ga - &rowsum) * scale;

            gq.slice_mut(cols).assign(&gs.dot(&kh));
            gk.slice_mut(cols).assign(&gs.t().dot(&qh));
        }
        let mut gx = self.wq.backward(&cache.x, &gq);
        gx += &self.wk.backward(&cache.x, &gk);
        gx += &self.wv.backward(&cache.x, &gv);
        gx
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))` then `a + ffn(ln2(a))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: Option<LnCache>,
    attn: Option<AttnCache>,
    ln2: Option<LnCache>,
    ffn: Option<FfnCache>,
}

impl TransformerBlock {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, n_heads: usize, ffn_hidden: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, n_heads),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, ffn_hidden),
        }
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        key_pad: Option<&[bool]>,
        cache: Option<&mut Option<BlockCache>>,
    ) -> Array2<f64> {
        match cache {
            None => {
                let a = x + &self.attn.forward(&self.ln1.forward(x, None), key_pad, None);
                &a + &self.ffn.forward(&self.ln2.forward(&a, None), None)
            }
            Some(slot) => {
                let mut c = BlockCache {
                    ln1: None,
                    attn: None,
                    ln2: None,
                    ffn: None,
                };
                let n1 = self.ln1.forward(x, Some(&mut c.ln1));
                let a = x + &self.attn.forward(&n1, key_pad, Some(&mut c.attn));
                let n2 = self.ln2.forward(&a, Some(&mut c.ln2));
                let y = &a + &self.ffn.forward(&n2, Some(&mut c.ffn));
                *slot = Some(c);
                y
            }
        }
    }

    pub fn backward(&mut self, cache: &BlockCache, gy: &Array2<f64>) -> Array2<f64> {
        let gffn = self.ffn.backward(cache.ffn.as_ref().unwrap(), gy);
        let ga = gy + &self.ln2.backward(cache.ln2.as_ref().unwrap(), &gffn);
        let gattn = self.attn.backward(cache.attn.as_ref().unwrap(), &ga);
        &ga + &self.ln1.backward(cache.ln1.as_ref().unwrap(), &gattn)
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_gradient_named, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_squares(y: &Array2<f64>) -> f64 {
        y.iter().map(|v| v * v).sum()
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(&mut rng, 5, 3);
        let x = crate::nn::rand_normal_array(4, 5, &mut rng);

        let y = lin.forward(&x);
        let gy = 2.0 * &y;
        lin.backward(&x, &gy);

        for name in ["lin.w", "lin.b"] {
            let analytic = {
                let mut found = None;
                lin.visit("lin", &mut |n, p| {
                    if n == name {
                        found = Some(p.g.clone());
                    }
                });
                found.unwrap()
            };
            let numeric = numeric_gradient_named(
                &mut lin,
                name,
                1e-6,
                |m, f| m.visit("lin", f),
                |m| sum_squares(&m.forward(&x)),
            );
            assert!(relative_error(&analytic, &numeric) < 1e-7, "{name}");
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = TransformerBlock::new(&mut rng, 8, 2, 16);
        let x = crate::nn::rand_normal_array(5, 8, &mut rng);

        let mut cache = None;
        let y = block.forward(&x, None, Some(&mut cache));
        let gy = 2.0 * &y;
        block.backward(cache.as_ref().unwrap(), &gy);

        let analytic: Vec<(String, Array2<f64>)> = {
            let mut named = Vec::new();
            block.visit("block", &mut |name, p| named.push((name, p.g.clone())));
            named
        };
        for (name, grad) in &analytic {
            let numeric = numeric_gradient_named(
                &mut block,
                name,
                1e-6,
                |m, f| m.visit("block", f),
                |m| sum_squares(&m.forward(&x, None, None)),
            );
            let err = relative_error(grad, &numeric);
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn padded_keys_do_not_change_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = TransformerBlock::new(&mut rng, 8, 2, 16);
        let x = crate::nn::rand_normal_array(4, 8, &mut rng);
        let mut padded = Array2::zeros((7, 8));
        padded.slice_mut(s![..4, ..]).assign(&x);
        let pad = [false, false, false, false, true, true, true];

        let y = block.forward(&x, None, None);
        let y_padded = block.forward(&padded, Some(&pad), None);
        for i in 0..4 {
            for j in 0..8 {
                assert_eq!(y[[i, j]], y_padded[[i, j]]);
            }
        }
    }
}
