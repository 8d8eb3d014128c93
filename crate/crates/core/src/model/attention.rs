//! Transformer encoders and the dual-path (frequency/time) stack.
//!
//! Attention runs independently inside each block of `L` rows; all projections,
//! feed-forward layers and normalizations are shared across blocks and applied
//! to the whole stack at once.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{apply_mask, dropout_mask, relu, relu_backward, Grid, LayerNorm, LayerNormCache, Linear};
use super::params::{Grads, ParamStore};
use crate::error::{param, Result};

/// Sinusoidal table: `E[p, 2i] = sin(p / 10000^(2i/N))`, `E[p, 2i+1] = cos(…)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Array2<f64>> {
    if !dim.is_multiple_of(2) {
        return param(format!("positional encoding needs an even dimension, got {dim}"));
    }
    Ok(Array2::from_shape_fn((len, dim), |(p, c)| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

fn softmax_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    x
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights, indexed `block * heads + head`.
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return param(format!("feature dimension {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn head_view<'a>(&self, x: &'a Array2<f64>, rows: (usize, usize), head: usize) -> ArrayView2<'a, f64> {
        let d = self.head_dim();
        x.slice(s![rows.0..rows.1, head * d..(head + 1) * d])
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>, blocks: usize) -> (Array2<f64>, AttentionCache) {
        let len = x.nrows() / blocks;
        let q = self.query.forward(ps, x);
        let k = self.key.forward(ps, x);
        let v = self.value.forward(ps, x);
        let scale = 1.0 / (self.head_dim() as f64).sqrt();

        let per_block: Vec<(Array2<f64>, Vec<Array2<f64>>)> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let rows = (b * len, (b + 1) * len);
                let mut ctx = Array2::zeros((len, self.dim));
                let mut probs = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let scores = self.head_view(&q, rows, h).dot(&self.head_view(&k, rows, h).t()) * scale;
                    let p = softmax_rows(scores);
                    let d = self.head_dim();
                    ctx.slice_mut(s![.., h * d..(h + 1) * d]).assign(&p.dot(&self.head_view(&v, rows, h)));
                    probs.push(p);
                }
                (ctx, probs)
            })
            .collect();

        let views: Vec<_> = per_block.iter().map(|(c, _)| c.view()).collect();
        let context = concatenate(Axis(0), &views).expect("block shapes");
        let probs = per_block.into_iter().flat_map(|(_, p)| p).collect();
        let out = self.output.forward(ps, &context);
        (
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    pub fn backward(&self, ps: &ParamStore, cache: &AttentionCache, dy: &Array2<f64>, blocks: usize, g: &mut Grads) -> Array2<f64> {
        let len = dy.nrows() / blocks;
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let dctx = self.output.backward(ps, &cache.context, dy, g);

        let per_block: Vec<[Array2<f64>; 3]> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let rows = (b * len, (b + 1) * len);
                let mut dq = Array2::zeros((len, self.dim));
                let mut dk = Array2::zeros((len, self.dim));
                let mut dv = Array2::zeros((len, self.dim));
                for h in 0..self.heads {
                    let p = &cache.probs[b * self.heads + h];
                    let dc = self.head_view(&dctx, rows, h);
                    let dp = dc.dot(&self.head_view(&cache.v, rows, h).t());
                    dv.slice_mut(s![.., h * d..(h + 1) * d]).assign(&p.t().dot(&dc));
                    let mut ds = &dp * p;
                    for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                        let total = row.sum();
                        row.zip_mut_with(&prow, |v, &pv| *v -= pv * total);
                    }
                    ds *= scale;
                    dq.slice_mut(s![.., h * d..(h + 1) * d]).assign(&ds.dot(&self.head_view(&cache.k, rows, h)));
                    dk.slice_mut(s![.., h * d..(h + 1) * d]).assign(&ds.t().dot(&self.head_view(&cache.q, rows, h)));
                }
                [dq, dk, dv]
            })
            .collect();

        let stack = |i: usize| {
            let views: Vec<_> = per_block.iter().map(|t| t[i].view()).collect();
            concatenate(Axis(0), &views).expect("block shapes")
        };
        let (dq, dk, dv) = (stack(0), stack(1), stack(2));
        let mut dx = self.query.backward(ps, &cache.input, &dq, g);
        dx += &self.key.backward(ps, &cache.input, &dk, g);
        dx += &self.value.backward(ps, &cache.input, &dv, g);
        dx
    }
}

/// One post-norm Transformer encoder layer: attention and feed-forward sublayers,
/// each with dropout, residual addition and layer normalization.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    attention: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm1: LayerNormCache,
    z2: Array2<f64>,
    hidden: Array2<f64>,
    drop2: Option<Array2<f64>>,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffw_dim: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, rng),
            ff_in: Linear::new(store, &format!("{name}.ffw_in"), dim, ffw_dim, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ffw_out"), ffw_dim, dim, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, rng),
            dropout,
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        z1: &Array2<f64>,
        blocks: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, EncoderLayerCache) {
        let (a, attention) = self.attention.forward(ps, z1, blocks);
        let drop1 = dropout_mask(a.dim(), self.dropout, rng.as_deref_mut());
        let (z2, norm1) = self.norm1.forward(ps, &(apply_mask(a, drop1.as_ref()) + z1));
        let hidden = relu(&self.ff_in.forward(ps, &z2));
        let f = self.ff_out.forward(ps, &hidden);
        let drop2 = dropout_mask(f.dim(), self.dropout, rng.as_deref_mut());
        let (z3, norm2) = self.norm2.forward(ps, &(apply_mask(f, drop2.as_ref()) + &z2));
        (
            z3,
            EncoderLayerCache {
                attention,
                drop1,
                norm1,
                z2,
                hidden,
                drop2,
                norm2,
            },
        )
    }

    pub fn backward(&self, ps: &ParamStore, c: &EncoderLayerCache, dz3: &Array2<f64>, blocks: usize, g: &mut Grads) -> Array2<f64> {
        let ds2 = self.norm2.backward(ps, &c.norm2, dz3, g);
        let df = apply_mask(ds2.clone(), c.drop2.as_ref());
        let dh = relu_backward(&c.hidden, &self.ff_out.backward(ps, &c.hidden, &df, g));
        let dz2 = self.ff_in.backward(ps, &c.z2, &dh, g) + &ds2;
        let ds1 = self.norm1.backward(ps, &c.norm1, &dz2, g);
        let da = apply_mask(ds1.clone(), c.drop1.as_ref());
        self.attention.backward(ps, &c.attention, &da, blocks, g) + &ds1
    }
}

/// Positional encoding, `I` encoder layers and a residual around the whole block.
/// The same weights process every block of the stack.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoderCache {
    layers: Vec<EncoderLayerCache>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, layers: usize, dim: usize, heads: usize, ffw_dim: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ffw_dim, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `z` holds `blocks` consecutive blocks of `pe.nrows()` rows each.
    pub fn forward(
        &self,
        ps: &ParamStore,
        z: &Array2<f64>,
        pe: &Array2<f64>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, TransformerEncoderCache) {
        let len = pe.nrows();
        let blocks = z.nrows() / len;
        let mut h = z.clone();
        for b in 0..blocks {
            let mut rows = h.slice_mut(s![b * len..(b + 1) * len, ..]);
            rows += pe;
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(ps, &h, blocks, rng);
            h = next;
            caches.push(cache);
        }
        (h + z, TransformerEncoderCache { layers: caches })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &TransformerEncoderCache, dout: &Array2<f64>, blocks: usize, g: &mut Grads) -> Array2<f64> {
        let mut d = dout.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(ps, c, &d, blocks, g);
        }
        d + dout
    }
}

/// `J` pairs of frequency-path and time-path encoders applied in series.
#[derive(Debug, Clone)]
pub struct DualPath {
    pub stacks: Vec<(TransformerEncoder, TransformerEncoder)>,
}

#[derive(Debug, Clone)]
pub struct DualPathCache {
    stacks: Vec<(TransformerEncoderCache, TransformerEncoderCache)>,
}

impl DualPath {
    /// Frequency-path pass only: one encoder over each of the `w` columns (blocks of `h × N`).
    pub fn frequency_pass(
        encoder: &TransformerEncoder,
        ps: &ParamStore,
        x: &Grid,
        pe_freq: &Array2<f64>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Grid, TransformerEncoderCache) {
        let columns = x.transposed();
        let (out, cache) = encoder.forward(ps, &columns.data, pe_freq, rng);
        (Grid::new(x.w, x.h, out).transposed(), cache)
    }

    /// Time-path pass only: one encoder over each of the `h` rows (blocks of `w × N`).
    pub fn time_pass(
        encoder: &TransformerEncoder,
        ps: &ParamStore,
        x: &Grid,
        pe_time: &Array2<f64>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Grid, TransformerEncoderCache) {
        let (out, cache) = encoder.forward(ps, &x.data, pe_time, rng);
        (Grid::new(x.h, x.w, out), cache)
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Grid,
        pe_freq: &Array2<f64>,
        pe_time: &Array2<f64>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Grid, DualPathCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.stacks.len());
        for (freq, time) in &self.stacks {
            let (a, cf) = Self::frequency_pass(freq, ps, &h, pe_freq, rng);
            let (b, ct) = Self::time_pass(time, ps, &a, pe_time, rng);
            h = b;
            caches.push((cf, ct));
        }
        (h, DualPathCache { stacks: caches })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &DualPathCache, dout: &Grid, g: &mut Grads) -> Grid {
        let mut d = dout.clone();
        for ((freq, time), (cf, ct)) in self.stacks.iter().zip(&cache.stacks).rev() {
            d = Grid::new(d.h, d.w, time.backward(ps, ct, &d.data, d.h, g));
            let cols = d.transposed();
            let back = freq.backward(ps, cf, &cols.data, cols.h, g);
            d = Grid::new(cols.h, cols.w, back).transposed();
        }
        d
    }
}
