//! Layers with explicit forward caches and backward passes.
//!
//! All activations are row-major `rows x width` buffers. Backward functions
//! accumulate parameter gradients into a [`ParamStore`] with the same layout
//! as the parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use crate::linalg::{gemm, MatMut, MatRef, Real};
#[allow(unused_imports)]
use num_traits::Float as _;

pub(crate) struct Init<'a> {
    pub rng: &'a mut crate::rng::Rng,
}

impl Init<'_> {
    fn uniform<T: Real>(&mut self, n: usize, bound: f64) -> Vec<T> {
        use rand::Rng as _;
        (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect()
    }

    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Vec<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in * fan_out, bound)
    }

    /// Uniform with standard deviation `std`.
    pub fn small<T: Real>(&mut self, n: usize, std: f64) -> Vec<T> {
        self.uniform(n, std * 3f64.sqrt())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn register<T: Real>(ps: &mut ParamStore<T>, init: &mut Init<'_>, name: &str, inp: usize, out: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), &[inp, out], init.xavier(inp, out));
        let b = ps.add(format!("{name}.bias"), &[out], vec![T::zero(); out]);
        Self { w, b, inp, out }
    }

    pub fn register_with<T: Real>(ps: &mut ParamStore<T>, name: &str, inp: usize, out: usize, w: Vec<T>) -> Self {
        let w = ps.add(format!("{name}.weight"), &[inp, out], w);
        let b = ps.add(format!("{name}.bias"), &[out], vec![T::zero(); out]);
        Self { w, b, inp, out }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let bias = ps.get(self.b);
        let mut y: Vec<T> = Vec::with_capacity(rows * self.out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            T::one(),
            MatRef::new(x, rows, self.inp),
            MatRef::new(ps.get(self.w), self.inp, self.out),
            T::one(),
            MatMut::new(&mut y, rows, self.out),
        );
        y
    }

    /// Accumulates weight and bias gradients; returns `dx` when asked.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        gs: &mut ParamStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        want_dx: bool,
    ) -> Vec<T> {
        gemm(
            T::one(),
            MatRef::new(x, rows, self.inp).t(),
            MatRef::new(dy, rows, self.out),
            T::one(),
            MatMut::new(gs.get_mut(self.w), self.inp, self.out),
        );
        let db = gs.get_mut(self.b);
        for row in dy.chunks_exact(self.out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += *d;
            }
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); rows * self.inp];
        gemm(
            T::one(),
            MatRef::new(dy, rows, self.out),
            MatRef::new(ps.get(self.w), self.inp, self.out).t(),
            T::zero(),
            MatMut::new(&mut dx, rows, self.inp),
        );
        dx
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn register<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), &[dim], vec![T::one(); dim]);
        let b = ps.add(format!("{name}.bias"), &[dim], vec![T::zero(); dim]);
        Self { w, b, dim }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> (Vec<T>, NormCache<T>) {
        let (gamma, beta) = (ps.get(self.w), ps.get(self.b));
        let d = T::from_usize(self.dim).unwrap();
        let eps = T::lit(LN_EPS);
        let rows = x.len() / self.dim;
        let mut y = Vec::with_capacity(x.len());
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in x.chunks_exact(self.dim) {
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (k, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                y.push(h * gamma[k] + beta[k]);
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, gs: &mut ParamStore<T>, c: &NormCache<T>, dy: &[T]) -> Vec<T> {
        let gamma = ps.get(self.w);
        let d = T::from_usize(self.dim).unwrap();
        {
            let dg = gs.get_mut(self.w);
            for (row_dy, row_h) in dy.chunks_exact(self.dim).zip(c.xhat.chunks_exact(self.dim)) {
                for k in 0..self.dim {
                    dg[k] += row_dy[k] * row_h[k];
                }
            }
        }
        {
            let db = gs.get_mut(self.b);
            for row_dy in dy.chunks_exact(self.dim) {
                for k in 0..self.dim {
                    db[k] += row_dy[k];
                }
            }
        }
        let mut dx = Vec::with_capacity(dy.len());
        let mut dxhat = vec![T::zero(); self.dim];
        for ((row_dy, row_h), r) in dy.chunks_exact(self.dim).zip(c.xhat.chunks_exact(self.dim)).zip(&c.rstd) {
            let mut mean_d = T::zero();
            let mut mean_dh = T::zero();
            for k in 0..self.dim {
                dxhat[k] = row_dy[k] * gamma[k];
                mean_d += dxhat[k];
                mean_dh += dxhat[k] * row_h[k];
            }
            mean_d = mean_d / d;
            mean_dh = mean_dh / d;
            for k in 0..self.dim {
                dx.push(*r * (dxhat[k] - mean_d - row_h[k] * mean_dh));
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `sigmoid(2u)` with `u = c (x + a x³)`, so that the tanh approximation of
/// GELU is `x · s`. One `exp` instead of a `tanh`, which is several times
/// slower in libm.
fn gelu_gate<T: Real>(v: T) -> T {
    let (c, a, two) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(2.0));
    let u = c * (v + a * v * v * v);
    T::one() / (T::one() + (-two * u).exp())
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * gelu_gate(v)).collect()
}

pub(crate) fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let (c, a, two, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(2.0), T::lit(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = gelu_gate(v);
            let du = c * (T::one() + three * a * v * v);
            d * (s + v * two * s * (T::one() - s) * du)
        })
        .collect()
}

/// Pre-norm transformer block: `h = x + attn(ln1(x))`, `y = h + mlp(ln2(h))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub(crate) struct BlockCache<T> {
    ln1: NormCache<T>,
    y1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2: NormCache<T>,
    y2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    rows: usize,
}

impl Block {
    pub fn register<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::register(ps, &format!("{name}.norm1"), dim),
            qkv: Linear::register(ps, init, &format!("{name}.attn.qkv"), dim, 3 * dim),
            proj: Linear::register(ps, init, &format!("{name}.attn.proj"), dim, dim),
            norm2: LayerNorm::register(ps, &format!("{name}.norm2"), dim),
            fc1: Linear::register(ps, init, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim),
            fc2: Linear::register(ps, init, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim),
            heads,
            dim,
        }
    }

    /// Runs the block on `x + pos`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], pos: &[T]) -> (Vec<T>, BlockCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let inp: Vec<T> = x.iter().zip(pos).map(|(a, b)| *a + *b).collect();
        let (y1, ln1) = self.norm1.forward(ps, &inp);
        let qkv = self.qkv.forward(ps, &y1, rows);
        let (ctx, probs) = attention(&qkv, rows, d, self.heads);
        let a = self.proj.forward(ps, &ctx, rows);
        let h: Vec<T> = inp.iter().zip(&a).map(|(x, a)| *x + *a).collect();
        let (y2, ln2) = self.norm2.forward(ps, &h);
        let u = self.fc1.forward(ps, &y2, rows);
        let g = gelu(&u);
        let m = self.fc2.forward(ps, &g, rows);
        let out = h.iter().zip(&m).map(|(h, m)| *h + *m).collect();
        (out, BlockCache { ln1, y1, qkv, probs, ctx, ln2, y2, u, g, rows })
    }

    /// Gradient with respect to the block input `x + pos`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, gs: &mut ParamStore<T>, c: &BlockCache<T>, dout: &[T]) -> Vec<T> {
        let rows = c.rows;
        let dg = self.fc2.backward(ps, gs, &c.g, dout, rows, true);
        let du = gelu_backward(&c.u, &dg);
        let dy2 = self.fc1.backward(ps, gs, &c.y2, &du, rows, true);
        let mut dh = self.norm2.backward(ps, gs, &c.ln2, &dy2);
        dh.iter_mut().zip(dout).for_each(|(a, b)| *a += *b);
        let dctx = self.proj.backward(ps, gs, &c.ctx, &dh, rows, true);
        let dqkv = attention_backward(&c.qkv, &c.probs, &dctx, rows, self.dim, self.heads);
        let dy1 = self.qkv.backward(ps, gs, &c.y1, &dqkv, rows, true);
        let mut dinp = self.norm1.backward(ps, gs, &c.ln1, &dy1);
        dinp.iter_mut().zip(&dh).for_each(|(a, b)| *a += *b);
        dinp
    }
}

/// Multi-head scaled dot-product self-attention over a packed `rows x 3d`
/// `[q | k | v]` buffer. Returns the context (`rows x d`) and the softmax
/// probabilities (`heads x rows x rows`).
pub(crate) fn attention<T: Real>(qkv: &[T], rows: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut probs = vec![T::zero(); heads * rows * rows];
    let mut ctx = vec![T::zero(); rows * d];
    for h in 0..heads {
        let q = MatRef::strided(&qkv[h * hd..], rows, hd, 3 * d, 1);
        let k = MatRef::strided(&qkv[d + h * hd..], rows, hd, 3 * d, 1);
        let v = MatRef::strided(&qkv[2 * d + h * hd..], rows, hd, 3 * d, 1);
        let p = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        gemm(scale, q, k.t(), T::zero(), MatMut::new(p, rows, rows));
        for row in p.chunks_exact_mut(rows) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        gemm(
            T::one(),
            MatRef::new(p, rows, rows),
            v,
            T::zero(),
            MatMut::strided(&mut ctx[h * hd..], rows, hd, d, 1),
        );
    }
    (ctx, probs)
}

pub(crate) fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dctx: &[T],
    rows: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut dqkv = vec![T::zero(); rows * 3 * d];
    let mut ds = vec![T::zero(); rows * rows];
    for h in 0..heads {
        let q = MatRef::strided(&qkv[h * hd..], rows, hd, 3 * d, 1);
        let k = MatRef::strided(&qkv[d + h * hd..], rows, hd, 3 * d, 1);
        let v = MatRef::strided(&qkv[2 * d + h * hd..], rows, hd, 3 * d, 1);
        let p = &probs[h * rows * rows..(h + 1) * rows * rows];
        let dc = MatRef::strided(&dctx[h * hd..], rows, hd, d, 1);
        // dV = Pᵀ dC
        gemm(
            T::one(),
            MatRef::new(p, rows, rows).t(),
            dc,
            T::zero(),
            MatMut::strided(&mut dqkv[2 * d + h * hd..], rows, hd, 3 * d, 1),
        );
        // dP = dC Vᵀ, then the softmax Jacobian
        gemm(T::one(), dc, v.t(), T::zero(), MatMut::new(&mut ds, rows, rows));
        for (drow, prow) in ds.chunks_exact_mut(rows).zip(p.chunks_exact(rows)) {
            let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
            for (x, pv) in drow.iter_mut().zip(prow) {
                *x = *pv * (*x - dot);
            }
        }
        gemm(
            scale,
            MatRef::new(&ds, rows, rows),
            k,
            T::zero(),
            MatMut::strided(&mut dqkv[h * hd..], rows, hd, 3 * d, 1),
        );
        gemm(
            scale,
            MatRef::new(&ds, rows, rows).t(),
            q,
            T::zero(),
            MatMut::strided(&mut dqkv[d + h * hd..], rows, hd, 3 * d, 1),
        );
    }
    dqkv
}

/// Shared point-wise MLP with max pooling over each patch, then a
/// projection to the token width.
#[derive(Debug, Clone)]
pub(crate) struct PatchEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
    pub proj: Linear,
}

pub(crate) struct PatchEmbedCache<T> {
    points: Vec<T>,
    u1: Vec<T>,
    g1: Vec<T>,
    argmax: Vec<usize>,
    pooled: Vec<T>,
    patches: usize,
    m: usize,
}

impl PatchEmbed {
    /// `patches` is `count x m x 3`, flattened.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, points: Vec<T>, m: usize) -> (Vec<T>, PatchEmbedCache<T>) {
        let rows = points.len() / 3;
        let patches = rows / m;
        let u1 = self.fc1.forward(ps, &points, rows);
        let g1 = gelu(&u1);
        let u2 = self.fc2.forward(ps, &g1, rows);
        let w = self.fc2.out;
        let mut pooled = vec![T::zero(); patches * w];
        let mut argmax = vec![0usize; patches * w];
        for p in 0..patches {
            for c in 0..w {
                let mut best = T::neg_infinity();
                let mut at = 0;
                for j in 0..m {
                    let v = u2[(p * m + j) * w + c];
                    if v > best {
                        best = v;
                        at = j;
                    }
                }
                pooled[p * w + c] = best;
                argmax[p * w + c] = at;
            }
        }
        let tokens = self.proj.forward(ps, &pooled, patches);
        (tokens, PatchEmbedCache { points, u1, g1, argmax, pooled, patches, m })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, gs: &mut ParamStore<T>, c: &PatchEmbedCache<T>, dtok: &[T]) {
        let dpooled = self.proj.backward(ps, gs, &c.pooled, dtok, c.patches, true);
        let w = self.fc2.out;
        let rows = c.patches * c.m;
        let mut du2 = vec![T::zero(); rows * w];
        for p in 0..c.patches {
            for ch in 0..w {
                du2[(p * c.m + c.argmax[p * w + ch]) * w + ch] = dpooled[p * w + ch];
            }
        }
        let dg1 = self.fc2.backward(ps, gs, &c.g1, &du2, rows, true);
        let du1 = gelu_backward(&c.u1, &dg1);
        self.fc1.backward(ps, gs, &c.points, &du1, rows, false);
    }
}

/// Learned positional embedding: a two-layer MLP on 3D centers.
#[derive(Debug, Clone)]
pub(crate) struct PosEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) struct PosEmbedCache<T> {
    centers: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

impl PosEmbed {
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, centers: Vec<T>) -> (Vec<T>, PosEmbedCache<T>) {
        let rows = centers.len() / 3;
        let u = self.fc1.forward(ps, &centers, rows);
        let g = gelu(&u);
        let out = self.fc2.forward(ps, &g, rows);
        (out, PosEmbedCache { centers, u, g })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, gs: &mut ParamStore<T>, c: &PosEmbedCache<T>, dout: &[T]) {
        let rows = c.centers.len() / 3;
        let dg = self.fc2.backward(ps, gs, &c.g, dout, rows, true);
        let du = gelu_backward(&c.u, &dg);
        self.fc1.backward(ps, gs, &c.centers, &du, rows, false);
    }
}
