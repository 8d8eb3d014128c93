//! The separation network: feature extractor, dual-path Transformer, gated
//! projection and mask head, wrapped between the fixed STFT front and back ends.
//!
//! All tensors are `f64`. Every stage has a hand-written backward pass; a
//! [`ForwardTape`] keeps what the backward pass needs.

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod params;

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Result};
use crate::signal::WINDOW_LEN;
use crate::tf_transform::{decode_masks, decode_masks_backward, encode_logamp_phase, mask_spectrograms, ComplexSpectrogram, Stft, StftConfig};
use attention::{positional_encoding, DualPath, DualPathCache, TransformerEncoder};
use layers::{relu, relu_backward, sigmoid, ConvTranspose, DepthwiseConv, Grid, LayerNorm, LayerNormCache, Linear};
use params::{Grads, ParamStore};

/// Mask parameters per position: two log-amplitudes and two phases.
pub const MASK_CHANNELS: usize = 4;
const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension `N`.
    pub feature_dim: usize,
    /// Encoder layers `I` inside each F-TE / T-TE.
    pub encoder_layers: usize,
    /// Number `J` of dual-path stacks.
    pub dual_path_stacks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffw_dim: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub stft: StftConfig,
    /// Samples per network input window.
    pub window_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            feature_dim: 128,
            encoder_layers: 2,
            dual_path_stacks: 2,
            heads: 2,
            dropout: 0.1,
            ffw_dim: 128,
            kernel_size: 4,
            stride: 2,
            stft: StftConfig::default(),
            window_len: WINDOW_LEN,
            init_seed: 0,
        }
    }

    /// Small configuration used for gradient checks and quick overfitting runs.
    pub fn tiny() -> Self {
        Self {
            feature_dim: 8,
            encoder_layers: 1,
            dual_path_stacks: 1,
            heads: 2,
            dropout: 0.1,
            ffw_dim: 8,
            kernel_size: 4,
            stride: 2,
            stft: StftConfig::new(64, 32),
            window_len: 2048,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.feature_dim == 0 || self.ffw_dim == 0 || self.kernel_size == 0 || self.stride == 0 {
            return param("feature, feed-forward, kernel and stride sizes must be positive");
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return param(format!("feature dimension {} not divisible by {} heads", self.feature_dim, self.heads));
        }
        if !self.feature_dim.is_multiple_of(2) {
            return param(format!("feature dimension {} must be even for positional encoding", self.feature_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return param(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let frames = self.stft.frames(self.window_len)?;
        Ok(Geometry::new(self.stft.bins(), frames, self.stride))
    }
}

/// Grid sizes at each resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub bins: usize,
    pub frames: usize,
    /// Bins and frames after zero padding to a multiple of the stride.
    pub padded_bins: usize,
    pub padded_frames: usize,
    /// `F'` and `T'`.
    pub reduced_bins: usize,
    pub reduced_frames: usize,
}

impl Geometry {
    pub fn new(bins: usize, frames: usize, stride: usize) -> Self {
        let padded_bins = bins.div_ceil(stride) * stride;
        let padded_frames = frames.div_ceil(stride) * stride;
        Self {
            bins,
            frames,
            padded_bins,
            padded_frames,
            reduced_bins: padded_bins / stride,
            reduced_frames: padded_frames / stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Dropout disabled; deterministic.
    #[default]
    Inference,
    /// Dropout masks drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

impl Mode {
    fn rng(self) -> Option<ChaCha8Rng> {
        match self {
            Mode::Inference => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extractor {
    pub depthwise1: DepthwiseConv,
    pub pointwise1: Linear,
    pub norm1: LayerNorm,
    pub depthwise2: DepthwiseConv,
    pub pointwise2: Linear,
    pub norm2: LayerNorm,
    pub projection: Linear,
    pub norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ExtractorCache {
    input: Grid,
    d1: Grid,
    c1: LayerNormCache,
    e1: Grid,
    d2: Grid,
    c2: LayerNormCache,
    e2: Array2<f64>,
    c3: LayerNormCache,
}

#[derive(Debug, Clone)]
pub struct Gate {
    pub tanh_conv: Linear,
    pub sigmoid_conv: Linear,
    pub projection: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    input: Array2<f64>,
    tanh: Array2<f64>,
    sig: Array2<f64>,
    gated: Array2<f64>,
    norm: LayerNormCache,
}

#[derive(Debug, Clone)]
pub struct MaskHead {
    pub upsample: ConvTranspose,
    pub norm: LayerNorm,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct MaskHeadCache {
    input: Grid,
    norm: LayerNormCache,
    activated: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    mixture: ComplexSpectrogram,
    extractor: ExtractorCache,
    dual_path: DualPathCache,
    gate: GateCache,
    head: MaskHeadCache,
    raw_masks: Array3<f64>,
}

impl ForwardTape {
    pub fn raw_masks(&self) -> &Array3<f64> {
        &self.raw_masks
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub extractor: Extractor,
    pub dual_path: DualPath,
    pub gate: Gate,
    pub head: MaskHead,
    stft: Stft,
    geometry: Geometry,
    pe_freq: Array2<f64>,
    pe_time: Array2<f64>,
}

impl Model {
    /// Builds a freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let n = config.feature_dim;
        let (k, st) = (config.kernel_size, config.stride);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let r = &mut rng;
        let s = &mut store;

        let extractor = Extractor {
            depthwise1: DepthwiseConv::new(s, "extractor.sepconv1.depthwise", INPUT_CHANNELS, k, 1, r),
            pointwise1: Linear::new(s, "extractor.sepconv1.pointwise", INPUT_CHANNELS, n, true, r),
            norm1: LayerNorm::new(s, "extractor.norm1", n, r),
            depthwise2: DepthwiseConv::new(s, "extractor.sepconv2.depthwise", n, k, st, r),
            pointwise2: Linear::new(s, "extractor.sepconv2.pointwise", n, n, true, r),
            norm2: LayerNorm::new(s, "extractor.norm2", n, r),
            projection: Linear::new(s, "extractor.conv3", n, n, true, r),
            norm3: LayerNorm::new(s, "extractor.norm3", n, r),
        };
        let mut stacks = Vec::with_capacity(config.dual_path_stacks);
        for j in 0..config.dual_path_stacks {
            let make = |s: &mut ParamStore, r: &mut ChaCha8Rng, path: &str| {
                TransformerEncoder::new(s, &format!("dual_path{j}.{path}"), config.encoder_layers, n, config.heads, config.ffw_dim, config.dropout, r)
            };
            let freq = make(s, r, "freq")?;
            let time = make(s, r, "time")?;
            stacks.push((freq, time));
        }
        let gate = Gate {
            tanh_conv: Linear::new(s, "gate.tanh_conv", n, n, true, r),
            sigmoid_conv: Linear::new(s, "gate.sigmoid_conv", n, n, true, r),
            projection: Linear::new(s, "gate.conv", n, n, true, r),
            norm: LayerNorm::new(s, "gate.norm", n, r),
        };
        let head = MaskHead {
            upsample: ConvTranspose::new(s, "separator.tconv", n, n, k, st, r),
            norm: LayerNorm::new(s, "separator.norm", n, r),
            output: Linear::new(s, "separator.conv", n, MASK_CHANNELS, true, r),
        };
        Ok(Self {
            stft: Stft::new(config.stft)?,
            pe_freq: positional_encoding(geometry.reduced_bins, n)?,
            pe_time: positional_encoding(geometry.reduced_frames, n)?,
            geometry,
            config,
            store,
            extractor,
            dual_path: DualPath { stacks },
            gate,
            head,
        })
    }

    /// Rebuilds the layer structure for `config` around existing parameters.
    pub fn with_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.store.len() != store.len() {
            return dim(format!("expected {} parameter tensors, got {}", model.store.len(), store.len()));
        }
        for (a, b) in model.store.iter().zip(store.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return dim(format!("parameter {} {:?} does not match {} {:?}", b.name, b.shape, a.name, a.shape));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn count_params(&self) -> usize {
        self.store.scalar_count()
    }

    /// Encodes a mixture spectrogram as a zero-padded `F_pad × T_pad × 2` grid.
    pub fn input_features(&self, spec: &ComplexSpectrogram) -> Result<Grid> {
        let g = self.geometry;
        if spec.values.dim() != (g.bins, g.frames) {
            return dim(format!("spectrogram {:?} does not match model grid {}×{}", spec.values.dim(), g.bins, g.frames));
        }
        let enc = encode_logamp_phase(spec).values;
        let mut grid = Grid::zeros(g.padded_bins, g.padded_frames, INPUT_CHANNELS);
        for f in 0..g.bins {
            for t in 0..g.frames {
                for c in 0..INPUT_CHANNELS {
                    grid.data[[f * g.padded_frames + t, c]] = enc[[f, t, c]];
                }
            }
        }
        Ok(grid)
    }

    fn extract(&self, x: &Grid) -> Result<(Grid, ExtractorCache)> {
        let ps = &self.store;
        let e = &self.extractor;
        let d1 = e.depthwise1.forward(ps, x)?;
        let (e1, c1) = e.norm1.forward(ps, &e.pointwise1.forward(ps, &d1.data));
        let e1 = Grid::new(x.h, x.w, e1);
        let d2 = e.depthwise2.forward(ps, &e1)?;
        let (n2, c2) = e.norm2.forward(ps, &e.pointwise2.forward(ps, &d2.data));
        let e2 = relu(&n2);
        let (xe, c3) = e.norm3.forward(ps, &e.projection.forward(ps, &e2));
        let out = Grid::new(d2.h, d2.w, xe);
        Ok((
            out,
            ExtractorCache {
                input: x.clone(),
                d1,
                c1,
                e1,
                d2,
                c2,
                e2,
                c3,
            },
        ))
    }

    fn extract_backward(&self, c: &ExtractorCache, dout: &Array2<f64>, g: &mut Grads) {
        let ps = &self.store;
        let e = &self.extractor;
        let dp3 = e.norm3.backward(ps, &c.c3, dout, g);
        let de2 = e.projection.backward(ps, &c.e2, &dp3, g);
        let dn2 = relu_backward(&c.e2, &de2);
        let dp2 = e.norm2.backward(ps, &c.c2, &dn2, g);
        let dd2 = e.pointwise2.backward(ps, &c.d2.data, &dp2, g);
        let de1 = e.depthwise2.backward(ps, &c.e1, &Grid::new(c.d2.h, c.d2.w, dd2), g, true);
        let dp1 = e.norm1.backward(ps, &c.c1, &de1.data, g);
        let dd1 = e.pointwise1.backward(ps, &c.d1.data, &dp1, g);
        e.depthwise1.backward(ps, &c.input, &Grid::new(c.d1.h, c.d1.w, dd1), g, false);
    }

    /// `X_e`: separable convolutions, downsampling and projection.
    pub fn feature_extract(&self, x: &Grid) -> Result<Grid> {
        Ok(self.extract(x)?.0)
    }

    fn check_reduced(&self, x: &Grid) -> Result<()> {
        let g = self.geometry;
        let want = (g.reduced_bins, g.reduced_frames, self.config.feature_dim);
        if x.shape() != want {
            return dim(format!("feature tensor {:?} does not match {:?}", x.shape(), want));
        }
        Ok(())
    }

    /// The `J` dual-path stacks.
    pub fn dp_tf_transform(&self, x: &Grid) -> Result<Grid> {
        self.check_reduced(x)?;
        Ok(self.dual_path.forward(&self.store, x, &self.pe_freq, &self.pe_time, &mut None).0)
    }

    fn gate_forward(&self, x: &Array2<f64>) -> (Array2<f64>, GateCache) {
        let ps = &self.store;
        let tanh = self.gate.tanh_conv.forward(ps, x).mapv(f64::tanh);
        let sig = self.gate.sigmoid_conv.forward(ps, x).mapv(sigmoid);
        let gated = &tanh * &sig;
        let (out, norm) = self.gate.norm.forward(ps, &self.gate.projection.forward(ps, &gated));
        (
            out,
            GateCache {
                input: x.clone(),
                tanh,
                sig,
                gated,
                norm,
            },
        )
    }

    fn gate_backward(&self, c: &GateCache, dout: &Array2<f64>, g: &mut Grads) -> Array2<f64> {
        let ps = &self.store;
        let dp = self.gate.norm.backward(ps, &c.norm, dout, g);
        let dgated = self.gate.projection.backward(ps, &c.gated, &dp, g);
        let mut du = &dgated * &c.sig;
        du.zip_mut_with(&c.tanh, |d, &t| *d *= 1.0 - t * t);
        let mut dv = &dgated * &c.tanh;
        dv.zip_mut_with(&c.sig, |d, &s| *d *= s * (1.0 - s));
        self.gate.tanh_conv.backward(ps, &c.input, &du, g) + self.gate.sigmoid_conv.backward(ps, &c.input, &dv, g)
    }

    /// The gated activation `X_t2 = tanh(conv(X)) ∘ σ(conv'(X))`.
    pub fn gate_activation(&self, x: &Grid) -> Result<Grid> {
        self.check_reduced(x)?;
        Ok(Grid::new(x.h, x.w, self.gate_forward(&x.data).1.gated))
    }

    /// `X_t = LN(conv(X_t2))`.
    pub fn gate_and_project(&self, x: &Grid) -> Result<Grid> {
        self.check_reduced(x)?;
        Ok(Grid::new(x.h, x.w, self.gate_forward(&x.data).0))
    }

    fn head_forward(&self, x: &Grid) -> Result<(Array3<f64>, MaskHeadCache)> {
        let ps = &self.store;
        let up = self.head.upsample.forward(ps, x)?;
        let (n, norm) = self.head.norm.forward(ps, &up.data);
        let activated = relu(&n);
        let out = self.head.output.forward(ps, &activated);
        let g = self.geometry;
        let full = out
            .into_shape_with_order((up.h, up.w, MASK_CHANNELS))
            .expect("head output shape");
        let raw = full.slice(s![..g.bins, ..g.frames, ..]).to_owned();
        Ok((
            raw,
            MaskHeadCache {
                input: x.clone(),
                norm,
                activated,
            },
        ))
    }

    fn head_backward(&self, c: &MaskHeadCache, draw: &Array3<f64>, g: &mut Grads) -> Array2<f64> {
        let ps = &self.store;
        let geo = self.geometry;
        let mut dfull = Array3::zeros((geo.padded_bins, geo.padded_frames, MASK_CHANNELS));
        dfull.slice_mut(s![..geo.bins, ..geo.frames, ..]).assign(draw);
        let dout = dfull
            .into_shape_with_order((geo.padded_bins * geo.padded_frames, MASK_CHANNELS))
            .expect("head gradient shape");
        let dact = self.head.output.backward(ps, &c.activated, &dout, g);
        let dn = relu_backward(&c.activated, &dact);
        let dup = self.head.norm.backward(ps, &c.norm, &dn, g);
        let dup = Grid::new(geo.padded_bins, geo.padded_frames, dup);
        self.head.upsample.backward(ps, &c.input, &dup, g).data
    }

    /// Upsamples `X_t` back to the padded grid, maps to mask parameters and crops to `F × T × 4`.
    pub fn separate(&self, x: &Grid) -> Result<Array3<f64>> {
        self.check_reduced(x)?;
        Ok(self.head_forward(x)?.0)
    }

    /// Mask parameters for a mixture spectrogram, from the input grid onward.
    pub fn mask_parameters(&self, spec: &ComplexSpectrogram, mode: Mode) -> Result<Array3<f64>> {
        Ok(self.forward_spectrogram(spec, mode)?.raw_masks)
    }

    fn forward_spectrogram(&self, spec: &ComplexSpectrogram, mode: Mode) -> Result<ForwardTape> {
        let input = self.input_features(spec)?;
        let (xe, extractor) = self.extract(&input)?;
        let mut rng = mode.rng();
        let (xt1, dual_path) = self.dual_path.forward(&self.store, &xe, &self.pe_freq, &self.pe_time, &mut rng.as_mut());
        let (xt, gate) = self.gate_forward(&xt1.data);
        let (raw_masks, head) = self.head_forward(&Grid::new(xt1.h, xt1.w, xt))?;
        Ok(ForwardTape {
            mixture: spec.clone(),
            extractor,
            dual_path,
            gate,
            head,
            raw_masks,
        })
    }

    /// Full forward pass returning the tape and the two separated signals.
    pub fn forward_with_tape(&self, mixture: &[f64], mode: Mode) -> Result<(ForwardTape, [Vec<f64>; 2])> {
        if mixture.len() != self.config.window_len {
            return dim(format!("model expects {} samples, got {}", self.config.window_len, mixture.len()));
        }
        let spec = self.stft.forward(mixture)?;
        let tape = self.forward_spectrogram(&spec, mode)?;
        let masks = decode_masks(&tape.raw_masks)?;
        let [a, b] = mask_spectrograms(&masks, &spec)?;
        let outputs = [self.stft.inverse(&a)?, self.stft.inverse(&b)?];
        Ok((tape, outputs))
    }

    /// Separates one window into two signals.
    pub fn forward(&self, mixture: &[f64], mode: Mode) -> Result<[Vec<f64>; 2]> {
        Ok(self.forward_with_tape(mixture, mode)?.1)
    }

    /// Accumulates into `g` the parameter gradient given `∂L/∂output` for both signals.
    pub fn backward(&self, tape: &ForwardTape, grad_outputs: [&[f64]; 2], g: &mut Grads) -> Result<()> {
        let frames = tape.mixture.frames();
        let dy: [Array2<Complex64>; 2] = [
            self.stft.inverse_backward(grad_outputs[0], frames)?,
            self.stft.inverse_backward(grad_outputs[1], frames)?,
        ];
        let draw = decode_masks_backward(&tape.raw_masks, &tape.mixture, [&dy[0], &dy[1]]);
        let dxt = self.head_backward(&tape.head, &draw, g);
        let dxt1 = self.gate_backward(&tape.gate, &dxt, g);
        let geo = self.geometry;
        let dxe = self.dual_path.backward(
            &self.store,
            &tape.dual_path,
            &Grid::new(geo.reduced_bins, geo.reduced_frames, dxt1),
            g,
        );
        self.extract_backward(&tape.extractor, &dxe.data, g);
        Ok(())
    }
}
