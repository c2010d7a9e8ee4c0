//! Small differentiable maps and the model bundle built from them.
//!
//! Activations travel as `(batch, features)` matrices; convolutional layers
//! carry their own `(channels, height, width)` geometry and read rows in
//! channel-major order. Every [`ParamMap`] can run a forward pass that keeps
//! a tape, and replay that tape backwards to produce input gradients plus a
//! flat parameter gradient laid out like [`ParamMap::params`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Spatial bookkeeping shared by convolutions and up-convolutions. For an
/// up-convolution the "image" side is the larger output and the "grid" side
/// is the input, the mirror image of an ordinary convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn grid(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds each `(C, H, W)` row of `x` into patch columns:
/// result is `(C*k*k, N*gh*gw)`.
fn im2col(x: ArrayView2<f64>, g: &ConvGeometry) -> Array2<f64> {
    let n = x.nrows();
    let (gh, gw) = g.grid();
    let positions = gh * gw;
    let mut cols = Array2::<f64>::zeros((g.patch_len(), n * positions));
    let ncols = n * positions;
    let out = cols.as_slice_mut().expect("standard layout");
    for (sample, row) in x.rows().into_iter().enumerate() {
        let row = row.to_slice().expect("contiguous rows");
        for c in 0..g.channels {
            let plane = &row[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let r = (c * g.kernel + ki) * g.kernel + kj;
                    let dst = &mut out[r * ncols + sample * positions..][..positions];
                    for oy in 0..gh {
                        let y = (oy * g.stride + ki) as isize - g.padding as isize;
                        if y < 0 || y >= g.height as isize {
                            continue;
                        }
                        let src = &plane[y as usize * g.width..][..g.width];
                        for ox in 0..gw {
                            let xx = (ox * g.stride + kj) as isize - g.padding as isize;
                            if xx >= 0 && xx < g.width as isize {
                                dst[oy * gw + ox] = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `n` images.
fn col2im(cols: ArrayView2<f64>, n: usize, g: &ConvGeometry) -> Array2<f64> {
    let (gh, gw) = g.grid();
    let positions = gh * gw;
    let ncols = n * positions;
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().expect("standard layout");
    let mut images = Array2::<f64>::zeros((n, g.image_len()));
    for (sample, mut row) in images.rows_mut().into_iter().enumerate() {
        let row = row.as_slice_mut().expect("contiguous rows");
        for c in 0..g.channels {
            let plane = &mut row[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let r = (c * g.kernel + ki) * g.kernel + kj;
                    let src = &src_all[r * ncols + sample * positions..][..positions];
                    for oy in 0..gh {
                        let y = (oy * g.stride + ki) as isize - g.padding as isize;
                        if y < 0 || y >= g.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * g.width..][..g.width];
                        for ox in 0..gw {
                            let xx = (ox * g.stride + kj) as isize - g.padding as isize;
                            if xx >= 0 && xx < g.width as isize {
                                dst[xx as usize] += src[oy * gw + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    images
}

/// `(N, C*P)` rows to a `(C, N*P)` matrix.
fn rows_to_channels(x: ArrayView2<f64>, channels: usize, positions: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros((channels, n * positions));
    for (sample, row) in x.rows().into_iter().enumerate() {
        for c in 0..channels {
            out.slice_mut(s![c, sample * positions..(sample + 1) * positions])
                .assign(&row.slice(s![c * positions..(c + 1) * positions]));
        }
    }
    out
}

/// Inverse of [`rows_to_channels`].
fn channels_to_rows(m: ArrayView2<f64>, n: usize, positions: usize) -> Array2<f64> {
    let channels = m.nrows();
    let mut out = Array2::zeros((n, channels * positions));
    for sample in 0..n {
        for c in 0..channels {
            out.slice_mut(s![sample, c * positions..(c + 1) * positions])
                .assign(&m.slice(s![c, sample * positions..(sample + 1) * positions]));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b`, `W` is `(out, in)`.
    Dense {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    /// Strided convolution; `weight` is `(out_channels, C*k*k)`.
    Conv {
        input: ConvGeometry,
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    /// Transposed convolution; `output` describes the produced image and
    /// `weight` is `(in_channels, out_channels*k*k)`.
    UpConv {
        output: ConvGeometry,
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Act(Activation),
}

enum LayerTape {
    Input(Array2<f64>),
    Cols(Array2<f64>),
    Output(Array2<f64>),
}

impl Layer {
    fn param_arrays(&self) -> Option<(&Array2<f64>, &Array1<f64>)> {
        match self {
            Layer::Dense { weight, bias }
            | Layer::Conv { weight, bias, .. }
            | Layer::UpConv { weight, bias, .. } => Some((weight, bias)),
            Layer::Act(_) => None,
        }
    }

    fn param_arrays_mut(&mut self) -> Option<(&mut Array2<f64>, &mut Array1<f64>)> {
        match self {
            Layer::Dense { weight, bias }
            | Layer::Conv { weight, bias, .. }
            | Layer::UpConv { weight, bias, .. } => Some((weight, bias)),
            Layer::Act(_) => None,
        }
    }

    fn num_params(&self) -> usize {
        self.param_arrays()
            .map(|(w, b)| w.len() + b.len())
            .unwrap_or(0)
    }

    fn in_dim(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } => Some(weight.ncols()),
            Layer::Conv { input, .. } => Some(input.image_len()),
            Layer::UpConv { output, weight, .. } => {
                let (gh, gw) = output.grid();
                Some(weight.nrows() * gh * gw)
            }
            Layer::Act(_) => None,
        }
    }

    fn out_dim(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } => Some(weight.nrows()),
            Layer::Conv { input, weight, .. } => {
                let (gh, gw) = input.grid();
                Some(weight.nrows() * gh * gw)
            }
            Layer::UpConv { output, .. } => Some(output.image_len()),
            Layer::Act(_) => None,
        }
    }

    fn forward(&self, x: ArrayView2<f64>, keep: bool) -> (Array2<f64>, Option<LayerTape>) {
        match self {
            Layer::Dense { weight, bias } => {
                let y = x.dot(&weight.t()) + bias;
                (y, keep.then(|| LayerTape::Input(x.to_owned())))
            }
            Layer::Conv {
                input,
                weight,
                bias,
            } => {
                let n = x.nrows();
                let (gh, gw) = input.grid();
                let cols = im2col(x, input);
                let mut m = weight.dot(&cols);
                m += &bias.view().insert_axis(Axis(1));
                let y = channels_to_rows(m.view(), n, gh * gw);
                (y, keep.then_some(LayerTape::Cols(cols)))
            }
            Layer::UpConv {
                output,
                weight,
                bias,
            } => {
                let n = x.nrows();
                let (gh, gw) = output.grid();
                let xm = rows_to_channels(x, weight.nrows(), gh * gw);
                let cols = weight.t().dot(&xm);
                let mut y = col2im(cols.view(), n, output);
                let plane = output.height * output.width;
                for mut row in y.rows_mut() {
                    for (c, &b) in bias.iter().enumerate() {
                        row.slice_mut(s![c * plane..(c + 1) * plane])
                            .mapv_inplace(|v| v + b);
                    }
                }
                (y, keep.then_some(LayerTape::Input(xm)))
            }
            Layer::Act(act) => {
                let y = x.mapv(|v| act.apply(v));
                let tape = match act {
                    Activation::Sigmoid => LayerTape::Output(y.clone()),
                    _ => LayerTape::Input(x.to_owned()),
                };
                (y, keep.then_some(tape))
            }
        }
    }

    /// Returns the input gradient and, when `grads` is given, writes this
    /// layer's parameter gradient (weight then bias) into it.
    fn backward(
        &self,
        tape: &LayerTape,
        dy: ArrayView2<f64>,
        grads: Option<&mut [f64]>,
    ) -> Array2<f64> {
        match (self, tape) {
            (Layer::Dense { weight, .. }, LayerTape::Input(x)) => {
                if let Some(g) = grads {
                    let dw = dy.t().dot(x);
                    let db = dy.sum_axis(Axis(0));
                    write_grads(g, &dw, &db);
                }
                dy.dot(weight)
            }
            (Layer::Conv { input, weight, .. }, LayerTape::Cols(cols)) => {
                let n = dy.nrows();
                let (gh, gw) = input.grid();
                let dm = rows_to_channels(dy, weight.nrows(), gh * gw);
                if let Some(g) = grads {
                    let dw = dm.dot(&cols.t());
                    let db = dm.sum_axis(Axis(1));
                    write_grads(g, &dw, &db);
                }
                let dcols = weight.t().dot(&dm);
                col2im(dcols.view(), n, input)
            }
            (Layer::UpConv { output, weight, .. }, LayerTape::Input(xm)) => {
                let n = dy.nrows();
                let (gh, gw) = output.grid();
                let dcols = im2col(dy, output);
                if let Some(g) = grads {
                    let dw = xm.dot(&dcols.t());
                    let plane = output.height * output.width;
                    let mut db = Array1::zeros(output.channels);
                    for row in dy.rows() {
                        for (c, v) in db.iter_mut().enumerate() {
                            *v += row.slice(s![c * plane..(c + 1) * plane]).sum();
                        }
                    }
                    write_grads(g, &dw, &db);
                }
                let dxm = weight.dot(&dcols);
                channels_to_rows(dxm.view(), n, gh * gw)
            }
            (Layer::Act(act), tape) => match (act, tape) {
                (Activation::Sigmoid, LayerTape::Output(y)) => {
                    let mut dx = dy.to_owned();
                    dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
                    dx
                }
                (Activation::Relu, LayerTape::Input(x)) => {
                    let mut dx = dy.to_owned();
                    dx.zip_mut_with(x, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    dx
                }
                (Activation::LeakyRelu(a), LayerTape::Input(x)) => {
                    let mut dx = dy.to_owned();
                    dx.zip_mut_with(x, |d, &v| {
                        if v <= 0.0 {
                            *d *= *a
                        }
                    });
                    dx
                }
                _ => unreachable!("activation tape mismatch"),
            },
            _ => unreachable!("layer tape mismatch"),
        }
    }
}

fn write_grads(g: &mut [f64], dw: &Array2<f64>, db: &Array1<f64>) {
    let (gw, gb) = g.split_at_mut(dw.len());
    for (dst, src) in gw.iter_mut().zip(dw.iter()) {
        *dst = *src;
    }
    for (dst, src) in gb.iter_mut().zip(db.iter()) {
        *dst = *src;
    }
}

/// Per-layer record of a taped forward pass.
pub struct Tape {
    layers: Vec<LayerTape>,
    batch: usize,
}

/// A named stack of layers with a fixed input and output width.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub name: String,
    pub layers: Vec<Layer>,
    pub trainable: bool,
    input_dim: usize,
    output_dim: usize,
}

impl ParamMap {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>, trainable: bool) -> Result<Self> {
        let name = name.into();
        let mut input_dim = None;
        let mut current: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Some(d_in) = layer.in_dim() {
                if let Some(cur) = current {
                    if cur != d_in {
                        return Err(Error::shape(
                            &name,
                            format!("layer {i} input {cur}"),
                            d_in,
                        ));
                    }
                }
                input_dim.get_or_insert(d_in);
                current = layer.out_dim();
            }
        }
        let (Some(input_dim), Some(output_dim)) = (input_dim, current) else {
            return Err(Error::Config(format!("map {name} has no parametric layer")));
        };
        Ok(ParamMap {
            name,
            layers,
            trainable,
            input_dim,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Flat copy of all parameters, layer by layer, weight before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.layers.iter().filter_map(Layer::param_arrays) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(&self.name, self.num_params(), flat.len()));
        }
        let mut i = 0;
        self.for_each_param_mut(|p| {
            *p = flat[i];
            i += 1;
        });
        Ok(())
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for (w, b) in self.layers.iter_mut().filter_map(Layer::param_arrays_mut) {
            w.iter_mut().for_each(&mut f);
            b.iter_mut().for_each(&mut f);
        }
    }

    pub fn max_abs_param(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(Layer::param_arrays)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(&self.name, self.input_dim, x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = layer.forward(cur.view(), false).0;
        }
        Ok(cur)
    }

    pub fn forward_taped(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(x)?;
        let mut cur = x.to_owned();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, tape) = layer.forward(cur.view(), true);
            tapes.push(tape.expect("taped forward"));
            cur = y;
        }
        Ok((
            cur,
            Tape {
                layers: tapes,
                batch: x.nrows(),
            },
        ))
    }

    /// Input gradient only; parameter gradients are skipped.
    pub fn backward_input(&self, tape: &Tape, dy: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.backward_impl(tape, dy, None)
    }

    /// Input gradient and the flat parameter gradient.
    pub fn backward(&self, tape: &Tape, dy: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.num_params()];
        let dx = self.backward_impl(tape, dy, Some(&mut grads))?;
        Ok((dx, grads))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        dy: ArrayView2<f64>,
        mut grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>> {
        if dy.ncols() != self.output_dim || dy.nrows() != tape.batch {
            return Err(Error::shape(
                &self.name,
                format!("{}x{} output gradient", tape.batch, self.output_dim),
                format!("{}x{}", dy.nrows(), dy.ncols()),
            ));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.num_params();
        }
        let mut cur = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = grads
                .as_deref_mut()
                .map(|g| &mut g[offsets[i]..offsets[i] + layer.num_params()]);
            cur = layer.backward(&tape.layers[i], cur.view(), slot);
        }
        Ok(cur)
    }
}

// ---------------------------------------------------------------------------
// construction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Zero-mean normal with variance `2 / fan_in`.
    Msra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Embedding width, equal to the number of class attributes.
    pub d: usize,
    pub image_size: usize,
    pub channels: usize,
    pub trunk_channels: [usize; 2],
    pub head_hidden: usize,
    pub f_channels: [usize; 2],
    pub f_hidden: usize,
    pub g_channels: [usize; 3],
    pub critic_hidden: usize,
    pub phi_channels: [usize; 3],
    pub leaky_slope: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d: 24,
            image_size: 32,
            channels: 3,
            trunk_channels: [8, 16],
            head_hidden: 128,
            f_channels: [16, 32],
            f_hidden: 128,
            g_channels: [32, 16, 8],
            critic_hidden: 64,
            phi_channels: [8, 16, 16],
            leaky_slope: 0.2,
            init: InitScheme::Msra,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.d,
            self.channels,
            self.head_hidden,
            self.f_hidden,
            self.critic_hidden,
        ];
        if widths.contains(&0)
            || self.trunk_channels.contains(&0)
            || self.f_channels.contains(&0)
            || self.g_channels.contains(&0)
            || self.phi_channels.contains(&0)
        {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Which training wiring a bundle is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Classification, reconstruction through an independent encoder, and
    /// adversarial alignment of the two embeddings.
    SpAen,
    ClsOnly,
    /// Classifier trained first, then a decoder on its frozen embedding.
    DirectMap,
    /// One encoder shared by classification and reconstruction.
    Sae,
    /// Encoder emits two branches; only the first is classified, both are decoded.
    SplitBranch,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SpAen,
        Variant::ClsOnly,
        Variant::DirectMap,
        Variant::Sae,
        Variant::SplitBranch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SpAen => "spaen",
            Variant::ClsOnly => "cls-only",
            Variant::DirectMap => "direct-map",
            Variant::Sae => "sae",
            Variant::SplitBranch => "split-branch",
        }
    }

    pub fn has_decoder(self) -> bool {
        self != Variant::ClsOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected one of spaen, cls-only, direct-map, sae, split-branch)"
                ))
            })
    }
}

struct Builder {
    rng: ChaCha8Rng,
    init: InitScheme,
}

impl Builder {
    fn new(seed: u64, stream: u64, init: InitScheme) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Builder { rng, init }
    }

    fn normal(&mut self, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
        let InitScheme::Msra = self.init;
        let std = (2.0 / fan_in as f64).sqrt();
        Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }

    fn dense(&mut self, input: usize, output: usize) -> Layer {
        Layer::Dense {
            weight: self.normal((output, input), input),
            bias: Array1::zeros(output),
        }
    }

    /// 4x4 kernel, stride 2, padding 1: halves the spatial size.
    fn conv_down(&mut self, channels: usize, size: usize, out_channels: usize) -> Layer {
        let input = ConvGeometry {
            channels,
            height: size,
            width: size,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        Layer::Conv {
            input,
            weight: self.normal((out_channels, input.patch_len()), input.patch_len()),
            bias: Array1::zeros(out_channels),
        }
    }

    /// 4x4 kernel, stride 2, padding 1: doubles the spatial size.
    fn conv_up(&mut self, channels: usize, size: usize, out_channels: usize) -> Layer {
        let output = ConvGeometry {
            channels: out_channels,
            height: size * 2,
            width: size * 2,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        // each output pixel sees channels * (k / stride)^2 inputs
        let fan_in = channels * 4;
        Layer::UpConv {
            output,
            weight: self.normal((channels, output.patch_len()), fan_in),
            bias: Array1::zeros(out_channels),
        }
    }

    fn uniform_unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

const STREAM_TRUNK: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_F: u64 = 3;
const STREAM_G: u64 = 4;
const STREAM_D: u64 = 5;
const STREAM_PHI: u64 = 6;
const STREAM_BRANCH: u64 = 7;

fn conv_stack(
    b: &mut Builder,
    cfg: &NetConfig,
    widths: &[usize],
    act: Activation,
) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut channels = cfg.channels;
    let mut size = cfg.image_size;
    for &w in widths {
        layers.push(b.conv_down(channels, size, w));
        layers.push(Layer::Act(act));
        channels = w;
        size /= 2;
    }
    layers
}

pub fn build_trunk(cfg: &NetConfig) -> Result<ParamMap> {
    let mut b = Builder::new(cfg.seed, STREAM_TRUNK, cfg.init);
    let layers = conv_stack(
        &mut b,
        cfg,
        &cfg.trunk_channels,
        Activation::LeakyRelu(cfg.leaky_slope),
    );
    ParamMap::new("E-trunk", layers, false)
}

fn trunk_out(cfg: &NetConfig) -> usize {
    let size = cfg.image_size / 4;
    cfg.trunk_channels[1] * size * size
}

pub fn build_head(cfg: &NetConfig, out: usize) -> Result<ParamMap> {
    let mut b = Builder::new(cfg.seed, STREAM_HEAD, cfg.init);
    let layers = vec![
        b.dense(trunk_out(cfg), cfg.head_hidden),
        Layer::Act(Activation::LeakyRelu(cfg.leaky_slope)),
        b.dense(cfg.head_hidden, out),
    ];
    ParamMap::new("E-head", layers, true)
}

pub fn build_f(cfg: &NetConfig) -> Result<ParamMap> {
    let mut b = Builder::new(cfg.seed, STREAM_F, cfg.init);
    let act = Activation::LeakyRelu(cfg.leaky_slope);
    let mut layers = conv_stack(&mut b, cfg, &cfg.f_channels, act);
    let size = cfg.image_size / 4;
    layers.push(b.dense(cfg.f_channels[1] * size * size, cfg.f_hidden));
    layers.push(Layer::Act(act));
    layers.push(b.dense(cfg.f_hidden, cfg.d));
    ParamMap::new("F", layers, true)
}

pub fn build_g(cfg: &NetConfig) -> Result<ParamMap> {
    let mut b = Builder::new(cfg.seed, STREAM_G, cfg.init);
    let act = Activation::LeakyRelu(cfg.leaky_slope);
    let base = cfg.image_size / 8;
    let [c0, c1, c2] = cfg.g_channels;
    let layers = vec![
        b.dense(cfg.d, c0 * base * base),
        Layer::Act(act),
        b.conv_up(c0, base, c1),
        Layer::Act(act),
        b.conv_up(c1, base * 2, c2),
        Layer::Act(act),
        b.conv_up(c2, base * 4, cfg.channels),
        Layer::Act(Activation::Sigmoid),
    ];
    ParamMap::new("G", layers, true)
}

pub fn build_critic(cfg: &NetConfig) -> Result<ParamMap> {
    let mut b = Builder::new(cfg.seed, STREAM_D, cfg.init);
    let layers = vec![
        b.dense(cfg.d, cfg.critic_hidden),
        Layer::Act(Activation::Relu),
        b.dense(cfg.critic_hidden, 1),
    ];
    ParamMap::new("D", layers, true)
}

pub fn build_phi(cfg: &NetConfig) -> Result<ParamMap> {
    let mut b = Builder::new(cfg.seed, STREAM_PHI, cfg.init);
    let layers = conv_stack(&mut b, cfg, &cfg.phi_channels, Activation::Relu);
    ParamMap::new("phi", layers, false)
}

/// Per-branch affine maps and the merge layer of the split-branch encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBranches {
    /// `d -> d` applied to the classified half.
    pub cls_branch: ParamMap,
    /// `d -> d` applied to the second half.
    pub rec_branch: ParamMap,
    /// `2d -> d` feeding the decoder.
    pub merge: ParamMap,
}

fn build_branches(cfg: &NetConfig) -> Result<SplitBranches> {
    let mut b = Builder::new(cfg.seed, STREAM_BRANCH, cfg.init);
    let d = cfg.d;
    Ok(SplitBranches {
        cls_branch: ParamMap::new("branch-cls", vec![b.dense(d, d)], true)?,
        rec_branch: ParamMap::new("branch-rec", vec![b.dense(d, d)], true)?,
        merge: ParamMap::new(
            "branch-merge",
            vec![b.dense(2 * d, d), Layer::Act(Activation::LeakyRelu(cfg.leaky_slope))],
            true,
        )?,
    })
}

/// The maps of one model: embedder `E` (frozen trunk plus trainable head),
/// reconstructive encoder `F`, decoder `G`, critic `D` and the frozen
/// perceptual extractor `phi`. Maps a variant does not use are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub variant: Variant,
    pub e_trunk: ParamMap,
    pub e_head: ParamMap,
    pub f: Option<ParamMap>,
    pub g: Option<ParamMap>,
    pub d: Option<ParamMap>,
    pub phi: ParamMap,
    pub branches: Option<SplitBranches>,
}

/// Builds the full model.
pub fn build_models(cfg: &NetConfig) -> Result<ModelBundle> {
    build_variant(cfg, Variant::SpAen)
}

pub fn build_variant(cfg: &NetConfig, variant: Variant) -> Result<ModelBundle> {
    cfg.validate()?;
    let head_out = if variant == Variant::SplitBranch {
        2 * cfg.d
    } else {
        cfg.d
    };
    Ok(ModelBundle {
        config: cfg.clone(),
        variant,
        e_trunk: build_trunk(cfg)?,
        e_head: build_head(cfg, head_out)?,
        f: (variant == Variant::SpAen).then(|| build_f(cfg)).transpose()?,
        g: variant.has_decoder().then(|| build_g(cfg)).transpose()?,
        d: (variant == Variant::SpAen).then(|| build_critic(cfg)).transpose()?,
        phi: build_phi(cfg)?,
        branches: (variant == Variant::SplitBranch)
            .then(|| build_branches(cfg))
            .transpose()?,
    })
}

impl ModelBundle {
    /// Checks that the embedding width matches a dataset's attribute count.
    pub fn check_attributes(&self, num_attributes: usize) -> Result<()> {
        if num_attributes != self.config.d {
            return Err(Error::Config(format!(
                "embedding width {} does not match {} class attributes",
                self.config.d, num_attributes
            )));
        }
        Ok(())
    }

    pub fn trunk_features(&self, images: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.e_trunk.forward(images)
    }

    /// The classified embedding `E(x)` from precomputed trunk features.
    pub fn embed_from_trunk(&self, trunk: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.e_head.forward(trunk)?;
        Ok(self.classified_part(out))
    }

    pub fn embed(&self, images: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.embed_from_trunk(self.trunk_features(images)?.view())
    }

    pub(crate) fn classified_part(&self, head_out: Array2<f64>) -> Array2<f64> {
        if self.variant == Variant::SplitBranch {
            head_out.slice(s![.., ..self.config.d]).to_owned()
        } else {
            head_out
        }
    }

    /// Decoder input for each variant's reconstruction path.
    pub fn code_for_decoder(&self, images: ArrayView2<f64>) -> Result<Option<Array2<f64>>> {
        Ok(match self.variant {
            Variant::SpAen => Some(self.f.as_ref().expect("F").forward(images)?),
            Variant::ClsOnly => None,
            Variant::DirectMap | Variant::Sae => Some(self.embed(images)?),
            Variant::SplitBranch => {
                let br = self.branches.as_ref().expect("branches");
                let head = self.e_head.forward(self.trunk_features(images)?.view())?;
                let d = self.config.d;
                let a = br.cls_branch.forward(head.slice(s![.., ..d]))?;
                let b = br.rec_branch.forward(head.slice(s![.., d..]))?;
                let cat = ndarray::concatenate(Axis(1), &[a.view(), b.view()])
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
                Some(br.merge.forward(cat.view())?)
            }
        })
    }

    /// Reconstructions of `images` (CHW rows), or `None` without a decoder.
    pub fn reconstruct(&self, images: ArrayView2<f64>) -> Result<Option<Array2<f64>>> {
        match self.code_for_decoder(images)? {
            Some(code) => Ok(Some(self.g.as_ref().expect("G").forward(code.view())?)),
            None => Ok(None),
        }
    }

    /// Named references to every map present, frozen ones included.
    pub fn maps(&self) -> Vec<&ParamMap> {
        let mut maps = vec![&self.e_trunk, &self.e_head];
        maps.extend(self.f.iter());
        maps.extend(self.g.iter());
        maps.extend(self.d.iter());
        maps.push(&self.phi);
        if let Some(br) = &self.branches {
            maps.extend([&br.cls_branch, &br.rec_branch, &br.merge]);
        }
        maps
    }

    pub fn maps_mut(&mut self) -> Vec<&mut ParamMap> {
        let mut maps = vec![&mut self.e_trunk, &mut self.e_head];
        maps.extend(self.f.iter_mut());
        maps.extend(self.g.iter_mut());
        maps.extend(self.d.iter_mut());
        maps.push(&mut self.phi);
        if let Some(br) = &mut self.branches {
            maps.extend([&mut br.cls_branch, &mut br.rec_branch, &mut br.merge]);
        }
        maps
    }

    pub fn map(&self, name: &str) -> Option<&ParamMap> {
        self.maps().into_iter().find(|m| m.name == name)
    }

    pub fn map_mut(&mut self, name: &str) -> Option<&mut ParamMap> {
        self.maps_mut().into_iter().find(|m| m.name == name)
    }
}

/// Stacks CHW rows of images into a batch matrix.
pub fn images_to_batch<'a>(
    images: impl IntoIterator<Item = &'a crate::data::Image>,
) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = images.into_iter().map(|im| im.to_chw()).collect();
    let width = rows.first().map(Vec::len).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), width));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&Array1::from(src));
    }
    out
}

// ---------------------------------------------------------------------------
// gradient verification

/// Relative error with a small absolute floor so that two vanishing
/// gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central differences of `f` at `x` along the listed coordinates.
pub fn central_differences(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + eps;
            let up = f(&probe)?;
            probe[i] = x[i] - eps;
            let down = f(&probe)?;
            probe[i] = x[i];
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

/// Up to `count` distinct coordinates of `0..len`, chosen with `seed`.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, len, count).into_vec()
}

/// Loss on a map's output: returns the value and its gradient with respect
/// to that output.
pub type OutputLoss<'a> = dyn Fn(ArrayView2<f64>) -> Result<(f64, Array2<f64>)> + 'a;

/// Compares back-propagated gradients of `loss(map(input))` with central
/// differences and returns the largest relative error. Trainable maps are
/// checked on a random subset of parameters and inputs, frozen maps on
/// inputs only.
pub fn grad_check(
    map: &ParamMap,
    loss: &OutputLoss<'_>,
    input: ArrayView2<f64>,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step {eps} must be > 0")));
    }
    let (out, tape) = map.forward_taped(input)?;
    let (value, dout) = loss(out.view())?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            component: format!("{} grad-check", map.name),
            step: 0,
            detail: format!("loss = {value}"),
        });
    }
    let mut worst: f64 = 0.0;

    let (dx, dparams) = if map.trainable {
        let (dx, g) = map.backward(&tape, dout.view())?;
        (dx, Some(g))
    } else {
        (map.backward_input(&tape, dout.view())?, None)
    };

    if let Some(dparams) = dparams {
        let params = map.params();
        let coords = sample_coords(params.len(), 40, seed);
        let mut probe_map = map.clone();
        let mut eval = |p: &[f64]| -> Result<f64> {
            probe_map.set_params(p)?;
            Ok(loss(probe_map.forward(input)?.view())?.0)
        };
        let numeric = central_differences(&mut eval, &params, &coords, eps)?;
        for (&i, n) in coords.iter().zip(numeric) {
            worst = worst.max(relative_error(dparams[i], n));
        }
    }

    let flat: Vec<f64> = input.iter().copied().collect();
    let coords = sample_coords(flat.len(), 20, seed ^ 0x9e37_79b9);
    let shape = input.raw_dim();
    let mut eval = |x: &[f64]| -> Result<f64> {
        let xs = Array2::from_shape_vec(shape, x.to_vec())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(loss(map.forward(xs.view())?.view())?.0)
    };
    let numeric = central_differences(&mut eval, &flat, &coords, eps)?;
    let dx_flat: Vec<f64> = dx.iter().copied().collect();
    for (&i, n) in coords.iter().zip(numeric) {
        worst = worst.max(relative_error(dx_flat[i], n));
    }
    Ok(worst)
}

#[doc(hidden)]
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut b = Builder::new(seed, 99, InitScheme::Msra);
    Array2::from_shape_simple_fn((rows, cols), || b.uniform_unit())
}
