//! Layers with explicit forward and backward passes.
//!
//! Spatial feature maps are [`Grid`]s: `h × w` positions stored row-major as
//! the rows of a matrix whose columns are channels. Every backward pass takes
//! the cached forward input, accumulates parameter gradients into [`Grads`]
//! and returns the gradient with respect to its input.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::{Grads, Init, ParamId, ParamStore};
use crate::error::{dim, Result};

/// A spatial feature map: `h × w` positions (row-major) by channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Self {
        debug_assert_eq!(data.nrows(), h * w);
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::new(h, w, Array2::zeros((h * w, c)))
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.channels())
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[[i * self.w + j, c]]
    }

    /// Swaps the two spatial axes.
    pub fn transposed(&self) -> Grid {
        let c = self.channels();
        let mut out = Array2::zeros((self.h * self.w, c));
        for i in 0..self.h {
            for j in 0..self.w {
                out.row_mut(j * self.h + i).assign(&self.data.row(i * self.w + j));
            }
        }
        Grid::new(self.w, self.h, out)
    }

    pub fn map(&self, mut f: impl FnMut(&Array2<f64>) -> Array2<f64>) -> Grid {
        Grid::new(self.h, self.w, f(&self.data))
    }
}

/// Dense projection over the last axis (also serves as a 1×1 convolution).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[inputs, outputs],
            Init::GlorotUniform {
                fan_in: inputs,
                fan_out: outputs,
            },
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[outputs], Init::Zeros, rng));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&ps.matrix(self.weight));
        if let Some(b) = self.bias {
            y += &ps.vector(b);
        }
        y
    }

    pub fn backward(&self, ps: &ParamStore, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let dw = x.t().dot(dy);
        g.accumulate(self.weight, 0, dw.iter().copied());
        if let Some(b) = self.bias {
            g.accumulate(b, 0, dy.sum_axis(Axis(0)).iter().copied());
        }
        dy.dot(&ps.matrix(self.weight).t())
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis of every row.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), &[dim], Init::Zeros, rng),
            dim,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let y = &normalized * &ps.vector(self.gain) + ps.vector(self.bias);
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &LayerNormCache, dy: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        g.accumulate(self.gain, 0, (dy * &cache.normalized).sum_axis(Axis(0)).iter().copied());
        g.accumulate(self.bias, 0, dy.sum_axis(Axis(0)).iter().copied());
        let n = dy.ncols() as f64;
        let mut dx = dy * &ps.vector(self.gain);
        for ((mut row, xh), s) in dx.outer_iter_mut().zip(cache.normalized.outer_iter()).zip(cache.inv_std.iter()) {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            row.zip_mut_with(&xh, |d, &h| *d = s * (*d - mean_d - h * mean_dx));
        }
        dx
    }
}

/// Output size and leading pad of a "same"-padded strided window.
fn same_geometry(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

/// Depthwise `k × k` convolution (depth multiplier 1, no bias) with "same" padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub size: usize,
    pub stride: usize,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, size: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            &[size, size, channels],
            Init::GlorotUniform {
                fan_in: size * size * channels,
                fan_out: size * size,
            },
            rng,
        );
        Self {
            kernel,
            size,
            stride,
            channels,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (same_geometry(h, self.size, self.stride).0, same_geometry(w, self.size, self.stride).0)
    }

    /// (output row, input row, kernel offset) for every valid tap.
    fn taps(&self, x: &Grid) -> Vec<(usize, usize, usize)> {
        let (oh, pt) = same_geometry(x.h, self.size, self.stride);
        let (ow, pl) = same_geometry(x.w, self.size, self.stride);
        let mut taps = Vec::new();
        for oi in 0..oh {
            for oj in 0..ow {
                for a in 0..self.size {
                    let Some(ii) = (oi * self.stride + a).checked_sub(pt).filter(|&v| v < x.h) else {
                        continue;
                    };
                    for b in 0..self.size {
                        let Some(jj) = (oj * self.stride + b).checked_sub(pl).filter(|&v| v < x.w) else {
                            continue;
                        };
                        taps.push((oi * ow + oj, ii * x.w + jj, (a * self.size + b) * self.channels));
                    }
                }
            }
        }
        taps
    }

    pub fn forward(&self, ps: &ParamStore, x: &Grid) -> Result<Grid> {
        if x.channels() != self.channels {
            return dim(format!("depthwise conv expects {} channels, got {}", self.channels, x.channels()));
        }
        let (oh, ow) = self.output_dims(x.h, x.w);
        let c = self.channels;
        let k = &ps.get(self.kernel).data;
        let xs = x.data.as_slice().expect("standard layout");
        let (_, pt) = same_geometry(x.h, self.size, self.stride);
        let (_, pl) = same_geometry(x.w, self.size, self.stride);
        let mut out = vec![0.0; oh * ow * c];
        out.par_chunks_mut(ow * c).enumerate().for_each(|(oi, row)| {
            for oj in 0..ow {
                let acc = &mut row[oj * c..(oj + 1) * c];
                for a in 0..self.size {
                    let Some(ii) = (oi * self.stride + a).checked_sub(pt).filter(|&v| v < x.h) else {
                        continue;
                    };
                    for b in 0..self.size {
                        let Some(jj) = (oj * self.stride + b).checked_sub(pl).filter(|&v| v < x.w) else {
                            continue;
                        };
                        let src = &xs[(ii * x.w + jj) * c..(ii * x.w + jj + 1) * c];
                        let ker = &k[(a * self.size + b) * c..(a * self.size + b + 1) * c];
                        for ((o, s), kv) in acc.iter_mut().zip(src).zip(ker) {
                            *o += s * kv;
                        }
                    }
                }
            }
        });
        Ok(Grid::new(oh, ow, Array2::from_shape_vec((oh * ow, c), out).expect("shape")))
    }

    pub fn backward(&self, ps: &ParamStore, x: &Grid, dy: &Grid, g: &mut Grads, need_input_grad: bool) -> Grid {
        let c = self.channels;
        let k = &ps.get(self.kernel).data;
        let xs = x.data.as_slice().expect("standard layout");
        let ds = dy.data.as_slice().expect("standard layout");
        let mut dk = vec![0.0; k.len()];
        let mut dx = vec![0.0; if need_input_grad { xs.len() } else { 0 }];
        for (orow, irow, koff) in self.taps(x) {
            let d = &ds[orow * c..(orow + 1) * c];
            let src = &xs[irow * c..(irow + 1) * c];
            for ((acc, s), dv) in dk[koff..koff + c].iter_mut().zip(src).zip(d) {
                *acc += s * dv;
            }
            if need_input_grad {
                let ker = &k[koff..koff + c];
                for ((acc, kv), dv) in dx[irow * c..(irow + 1) * c].iter_mut().zip(ker).zip(d) {
                    *acc += kv * dv;
                }
            }
        }
        g.accumulate(self.kernel, 0, dk);
        if need_input_grad {
            Grid::new(x.h, x.w, Array2::from_shape_vec((x.h * x.w, c), dx).expect("shape"))
        } else {
            Grid::zeros(0, 0, c)
        }
    }
}

/// Transposed `k × k` convolution with stride `s` and "same" padding (output `s·h × s·w`).
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub size: usize,
    pub stride: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl ConvTranspose {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, size: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[size, size, inputs, outputs],
            Init::GlorotUniform {
                fan_in: size * size * inputs,
                fan_out: size * size * outputs,
            },
            rng,
        );
        let bias = store.add(format!("{name}.bias"), &[outputs], Init::Zeros, rng);
        Self {
            weight,
            bias,
            size,
            stride,
            inputs,
            outputs,
        }
    }

    fn lead_pad(&self) -> usize {
        self.size.saturating_sub(self.stride) / 2
    }

    fn tap_weight<'a>(&self, ps: &'a ParamStore, a: usize, b: usize) -> ArrayView2<'a, f64> {
        ps.matrix_at(self.weight, (a * self.size + b) * self.inputs * self.outputs, self.inputs, self.outputs)
    }

    /// For kernel tap (a, b): pairs of (input row, output row) that it connects.
    fn pairs(&self, h: usize, w: usize, a: usize, b: usize) -> Vec<(usize, usize)> {
        let (oh, ow) = (h * self.stride, w * self.stride);
        let p = self.lead_pad();
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            let Some(oi) = (i * self.stride + a).checked_sub(p).filter(|&v| v < oh) else {
                continue;
            };
            for j in 0..w {
                let Some(oj) = (j * self.stride + b).checked_sub(p).filter(|&v| v < ow) else {
                    continue;
                };
                out.push((i * w + j, oi * ow + oj));
            }
        }
        out
    }

    pub fn forward(&self, ps: &ParamStore, x: &Grid) -> Result<Grid> {
        if x.channels() != self.inputs {
            return dim(format!("transposed conv expects {} channels, got {}", self.inputs, x.channels()));
        }
        let (oh, ow) = (x.h * self.stride, x.w * self.stride);
        let mut y = Array2::zeros((oh * ow, self.outputs));
        for a in 0..self.size {
            for b in 0..self.size {
                let contrib = x.data.dot(&self.tap_weight(ps, a, b));
                for (src, dst) in self.pairs(x.h, x.w, a, b) {
                    let mut row = y.row_mut(dst);
                    row += &contrib.row(src);
                }
            }
        }
        y += &ps.vector(self.bias);
        Ok(Grid::new(oh, ow, y))
    }

    pub fn backward(&self, ps: &ParamStore, x: &Grid, dy: &Grid, g: &mut Grads) -> Grid {
        g.accumulate(self.bias, 0, dy.data.sum_axis(Axis(0)).iter().copied());
        let mut dx = Array2::zeros((x.h * x.w, self.inputs));
        let mut gathered = Array2::zeros((x.h * x.w, self.outputs));
        for a in 0..self.size {
            for b in 0..self.size {
                gathered.fill(0.0);
                for (src, dst) in self.pairs(x.h, x.w, a, b) {
                    gathered.row_mut(src).assign(&dy.data.row(dst));
                }
                let w = self.tap_weight(ps, a, b);
                dx += &gathered.dot(&w.t());
                let dw = x.data.t().dot(&gathered);
                g.accumulate(self.weight, (a * self.size + b) * self.inputs * self.outputs, dw.iter().copied());
            }
        }
        Grid::new(x.h, x.w, dx)
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Inverted dropout mask (`None` when inactive).
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }))
}

pub fn apply_mask(x: Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn random_grid(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Grid {
        Grid::new(h, w, Array2::from_shape_simple_fn((h * w, c), || r.random_range(-1.0..1.0)))
    }

    /// Central-difference check of d<out, probe>/d(input) and d/d(params).
    fn check<F>(store: &mut ParamStore, input: &Grid, forward: F, backward: impl Fn(&ParamStore, &Grid, &mut Grads) -> Grid)
    where
        F: Fn(&ParamStore, &Grid) -> Grid,
    {
        let mut r = rng();
        let out = forward(store, input);
        let probe = Array2::from_shape_simple_fn(out.data.dim(), || r.random_range(-1.0..1.0));
        let objective = |s: &ParamStore, x: &Grid| (&forward(s, x).data * &probe).sum();
        let mut g = Grads::zeros_like(store);
        let dx = backward(store, &Grid::new(out.h, out.w, probe.clone()), &mut g);
        let h = 1e-6;
        for idx in 0..input.data.len().min(40) {
            let (row, col) = (idx / input.channels(), idx % input.channels());
            let mut p = input.clone();
            p.data[[row, col]] += h;
            let mut m = input.clone();
            m.data[[row, col]] -= h;
            let num = (objective(store, &p) - objective(store, &m)) / (2.0 * h);
            let a = dx.data[[row, col]];
            assert!((a - num).abs() <= 1e-6 * (1.0 + num.abs()), "input {idx}: {a} vs {num}");
        }
        for id in store.ids().collect::<Vec<_>>() {
            for e in 0..store.get(id).len().min(20) {
                let orig = store.get(id).data[e];
                store.get_mut(id).data[e] = orig + h;
                let fp = objective(store, input);
                store.get_mut(id).data[e] = orig - h;
                let fm = objective(store, input);
                store.get_mut(id).data[e] = orig;
                let num = (fp - fm) / (2.0 * h);
                let a = g.get(id)[e];
                assert!((a - num).abs() <= 1e-6 * (1.0 + num.abs()), "{} [{e}]: {a} vs {num}", store.get(id).name);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 5, true, &mut r);
        store.get_mut(lin.bias.unwrap()).data = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let x = random_grid(2, 3, 3, &mut r);
        let xd = x.clone();
        check(
            &mut store,
            &x,
            |s, x| x.map(|d| lin.forward(s, d)),
            |s, dy, g| xd.map(|d| lin.backward(s, d, &dy.data, g)),
        );
    }

    #[test]
    fn layer_norm_gradients_and_zero_input() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut r);
        store.get_mut(ln.gain).data = vec![1.5, 0.5, -1.0, 2.0];
        store.get_mut(ln.bias).data = vec![0.1, 0.0, -0.3, 0.2];
        let x = random_grid(3, 2, 4, &mut r);
        let xd = x.clone();
        check(
            &mut store,
            &x,
            |s, x| x.map(|d| ln.forward(s, d).0),
            |s, dy, g| {
                let (_, c) = ln.forward(s, &xd.data);
                xd.map(|_| ln.backward(s, &c, &dy.data, g))
            },
        );
        let (y, _) = ln.forward(&store, &Array2::zeros((2, 4)));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn depthwise_shapes_and_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let conv = DepthwiseConv::new(&mut store, "dw", 3, 4, 2, &mut r);
        assert_eq!(conv.output_dims(10, 8), (5, 4));
        assert_eq!(conv.output_dims(258, 256), (129, 128));
        let x = random_grid(6, 5, 3, &mut r);
        let xd = x.clone();
        check(
            &mut store,
            &x,
            |s, x| conv.forward(s, x).unwrap(),
            |s, dy, g| conv.backward(s, &xd, dy, g, true),
        );
        let mut store = ParamStore::new();
        let conv = DepthwiseConv::new(&mut store, "dw", 2, 4, 1, &mut r);
        assert_eq!(conv.output_dims(9, 7), (9, 7));
        let x = random_grid(4, 5, 2, &mut r);
        let xd = x.clone();
        check(
            &mut store,
            &x,
            |s, x| conv.forward(s, x).unwrap(),
            |s, dy, g| conv.backward(s, &xd, dy, g, true),
        );
    }

    #[test]
    fn depthwise_same_padding_places_kernel_center() {
        // A single impulse convolved with a kernel holding 1 at tap (1, 1) is unchanged
        // when the leading pad is 1 (stride 1, kernel 4: pad 1 before, 2 after).
        let mut store = ParamStore::new();
        let conv = DepthwiseConv::new(&mut store, "dw", 1, 4, 1, &mut rng());
        store.get_mut(conv.kernel).data = vec![0.0; 16];
        store.get_mut(conv.kernel).data[5] = 1.0;
        let mut x = Grid::zeros(5, 5, 1);
        x.data[[2 * 5 + 3, 0]] = 1.0;
        let y = conv.forward(&store, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transposed_conv_shapes_and_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let conv = ConvTranspose::new(&mut store, "tc", 3, 2, 4, 2, &mut r);
        store.get_mut(conv.bias).data = vec![0.3, -0.1];
        let x = random_grid(3, 2, 3, &mut r);
        let y = conv.forward(&store, &x).unwrap();
        assert_eq!(y.shape(), (6, 4, 2));
        let xd = x.clone();
        check(
            &mut store,
            &x,
            |s, x| conv.forward(s, x).unwrap(),
            |s, dy, g| conv.backward(s, &xd, dy, g),
        );
    }

    #[test]
    fn dropout_is_inactive_without_rng() {
        assert!(dropout_mask((2, 2), 0.5, None).is_none());
        let mut r = rng();
        let m = dropout_mask((100, 10), 0.5, Some(&mut r)).unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(m.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn grid_transpose_roundtrip() {
        let g = random_grid(3, 4, 2, &mut rng());
        let t = g.transposed();
        assert_eq!(t.shape(), (4, 3, 2));
        assert_eq!(t.at(1, 2, 1), g.at(2, 1, 1));
        assert_eq!(t.transposed(), g);
    }
}
