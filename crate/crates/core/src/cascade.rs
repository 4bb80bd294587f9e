//! Data-fidelity unit and the unrolled cascade network, with the seven
//! reconstruction strategy presets expressed as cascade configurations.
//!
//! Complex data runs through network layers as a two-channel real view and
//! returns to complex before each DF step. Per-cascade weights are unshared
//! unless the config says otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmlp::{dmlp_backward, dmlp_forward, DmlpConfig, DmlpError, FcBlockParams};
use crate::fourier::{
    apply_mask_volume, fft_centered, ifft_centered, sense_adjoint, CoilSensitivities,
    FourierError, MultiCoilKSpace, SamplingMask,
};
use crate::nn::{
    activation_backward, activation_forward, conv_backward, conv_forward, Activation, ConvParams,
    NnError,
};
use crate::scalar::{Cplx, Real};
use crate::volume::{Axis, ChannelVolume, ComplexVolume, VolumeError};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("unknown variant '{0}'; valid names: SC-CNN, MC-CNN, MC-CNN-dMLP, MC-CNN-1DCNN-L, MC-dMLP, MC-1DCNN, MC-1DCNN-L")]
    UnknownVariant(String),
    #[error("invalid cascade config: {0}")]
    BadConfig(String),
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    TensorShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor {0} missing from parameter set")]
    MissingTensor(String),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dmlp(#[from] DmlpError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// How the DF unit treats coils.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfMode {
    MultiCoil,
    /// Coil-split reconstruction: the network runs per coil with S = I in
    /// the DF step and the coil images combine by root sum of squares.
    SingleCoil,
}

/// One entry of a cascade's layer list. Every layer maps the 2-channel
/// complex view back to 2 channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layer")]
pub enum LayerSpec {
    ConvBlock { depth: usize, channels: usize, kernel: usize },
    Dmlp { cfg: DmlpConfig },
    Conv1d { axis: Axis, kernel_len: usize, channels: usize },
}

/// Unrolled network shape: the same layer list repeats in every cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub n_cascades: usize,
    pub layers: Vec<LayerSpec>,
    pub df: DfMode,
    pub shared_weights: bool,
}

/// The seven reconstruction strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    ScCnn,
    McCnn,
    McCnnDmlp,
    McCnn1dcnnL,
    McDmlp,
    Mc1dcnn,
    Mc1dcnnL,
}

const CONV_BLOCK_DEPTH: usize = 5;
const CONV1D_DEPTH: usize = 4;
const DESK_CHANNELS: usize = 16;

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::ScCnn,
        Variant::McCnn,
        Variant::McCnnDmlp,
        Variant::McCnn1dcnnL,
        Variant::McDmlp,
        Variant::Mc1dcnn,
        Variant::Mc1dcnnL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ScCnn => "SC-CNN",
            Variant::McCnn => "MC-CNN",
            Variant::McCnnDmlp => "MC-CNN-dMLP",
            Variant::McCnn1dcnnL => "MC-CNN-1DCNN-L",
            Variant::McDmlp => "MC-dMLP",
            Variant::Mc1dcnn => "MC-1DCNN",
            Variant::Mc1dcnnL => "MC-1DCNN-L",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, CascadeError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| CascadeError::UnknownVariant(name.to_string()))
    }

    /// Desk-scale expansion: five cascades, 16-channel conv blocks with
    /// 3x3x3 kernels, patch-8 dMLP modules, unshared weights.
    pub fn expand(self) -> CascadeConfig {
        let conv_block =
            LayerSpec::ConvBlock { depth: CONV_BLOCK_DEPTH, channels: DESK_CHANNELS, kernel: 3 };
        let dmlp = |axis| LayerSpec::Dmlp { cfg: DmlpConfig::standard(axis, 2, 2) };
        let conv1d = |axis, k| LayerSpec::Conv1d { axis, kernel_len: k, channels: DESK_CHANNELS };
        let (df, layers) = match self {
            Variant::ScCnn => (DfMode::SingleCoil, vec![conv_block]),
            Variant::McCnn => (DfMode::MultiCoil, vec![conv_block]),
            Variant::McCnnDmlp => {
                (DfMode::MultiCoil, vec![conv_block, dmlp(Axis::Pe), dmlp(Axis::Spe)])
            }
            Variant::McCnn1dcnnL => (
                DfMode::MultiCoil,
                vec![conv_block, conv1d(Axis::Pe, 64), conv1d(Axis::Spe, 64)],
            ),
            Variant::McDmlp => {
                (DfMode::MultiCoil, vec![dmlp(Axis::Ro), dmlp(Axis::Pe), dmlp(Axis::Spe)])
            }
            Variant::Mc1dcnn => (
                DfMode::MultiCoil,
                vec![conv1d(Axis::Ro, 3), conv1d(Axis::Pe, 3), conv1d(Axis::Spe, 3)],
            ),
            Variant::Mc1dcnnL => (
                DfMode::MultiCoil,
                vec![conv1d(Axis::Ro, 64), conv1d(Axis::Pe, 64), conv1d(Axis::Spe, 64)],
            ),
        };
        CascadeConfig { n_cascades: 5, layers, df, shared_weights: false }
    }
}

pub fn expand_variant(name: &str) -> Result<CascadeConfig, CascadeError> {
    Ok(Variant::from_name(name)?.expand())
}

/// Named, shaped parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { name, shape, data: vec![T::zero(); len] }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor { name: self.name.clone(), shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }
}

/// Channel widths through a conv stack: 2 -> hidden x (depth-1) -> 2.
fn conv_chain_channels(depth: usize, hidden: usize) -> Vec<usize> {
    let mut seq = vec![hidden; depth + 1];
    seq[0] = 2;
    seq[depth] = 2;
    seq
}

fn conv1d_kshape(axis: Axis, k: usize) -> (usize, usize, usize) {
    match axis {
        Axis::Ro => (k, 1, 1),
        Axis::Pe => (1, k, 1),
        Axis::Spe => (1, 1, k),
    }
}

fn layer_tensor_shapes(spec: &LayerSpec) -> Result<Vec<(String, Vec<usize>)>, CascadeError> {
    let mut out = Vec::new();
    match spec {
        LayerSpec::ConvBlock { depth, channels, kernel } => {
            if *depth == 0 || *channels == 0 || *kernel == 0 {
                return Err(CascadeError::BadConfig("conv block needs positive depth/channels/kernel".into()));
            }
            let seq = conv_chain_channels(*depth, *channels);
            for d in 0..*depth {
                out.push((format!("conv{d}.kernel"), vec![seq[d + 1], seq[d], *kernel, *kernel, *kernel]));
                out.push((format!("conv{d}.bias"), vec![seq[d + 1]]));
            }
        }
        LayerSpec::Dmlp { cfg } => {
            cfg.validate()?;
            if cfg.channels[0] != 2 || cfg.channels[cfg.n_blocks] != 2 {
                return Err(CascadeError::BadConfig(
                    "dMLP cascade layers must map 2 channels to 2 channels".into(),
                ));
            }
            for n in 0..cfg.n_blocks {
                out.push((format!("fc{n}.weight"), vec![cfg.p_vec(n + 1), cfg.p_vec(n)]));
                out.push((format!("fc{n}.bias"), vec![cfg.p_vec(n + 1)]));
            }
        }
        LayerSpec::Conv1d { axis, kernel_len, channels } => {
            if *kernel_len == 0 || *channels == 0 {
                return Err(CascadeError::BadConfig("conv1d needs positive kernel/channels".into()));
            }
            let seq = conv_chain_channels(CONV1D_DEPTH, *channels);
            let (kr, kp, ks) = conv1d_kshape(*axis, *kernel_len);
            for d in 0..CONV1D_DEPTH {
                out.push((format!("conv{d}.kernel"), vec![seq[d + 1], seq[d], kr, kp, ks]));
                out.push((format!("conv{d}.bias"), vec![seq[d + 1]]));
            }
        }
    }
    Ok(out)
}

/// Deterministic name/shape listing of every parameter tensor the config
/// owns, in initialization order.
pub fn parameter_layout(config: &CascadeConfig) -> Result<Vec<(String, Vec<usize>)>, CascadeError> {
    let n_param_cascades = if config.shared_weights { 1.min(config.n_cascades) } else { config.n_cascades };
    let mut out = Vec::new();
    for ci in 0..n_param_cascades {
        for (li, spec) in config.layers.iter().enumerate() {
            for (suffix, shape) in layer_tensor_shapes(spec)? {
                out.push((format!("c{ci}.l{li}.{suffix}"), shape));
            }
        }
    }
    Ok(out)
}

/// Cascade network parameters bound to their config.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: CascadeConfig,
    pub tensors: Vec<Tensor<T>>,
    /// Tensor index ranges per (effective cascade, layer).
    slots: Vec<std::ops::Range<usize>>,
}

impl<T: Real> Model<T> {
    /// Seeded initialization: kernels and FC weights uniform in
    /// +-sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(config: CascadeConfig, seed: u64) -> Result<Self, CascadeError> {
        let layout = parameter_layout(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(11);
        use rand::Rng;
        let tensors = layout
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::<T>::zeros(name, shape);
                if t.name.ends_with(".kernel") {
                    // fan_in = c_in * taps, fan_out = c_out * taps
                    let taps: usize = t.shape[2..].iter().product();
                    let bound = (6.0 / ((t.shape[0] + t.shape[1]) * taps) as f64).sqrt();
                    for v in t.data.iter_mut() {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                } else if t.name.ends_with(".weight") {
                    let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                    for v in t.data.iter_mut() {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                }
                t
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Binds existing tensors (checkpoint load), validating every name and
    /// shape against the config's layout.
    pub fn from_tensors(config: CascadeConfig, tensors: Vec<Tensor<T>>) -> Result<Self, CascadeError> {
        let layout = parameter_layout(&config)?;
        if let Some((name, _)) = layout.iter().find(|(name, _)| {
            tensors.iter().all(|t| &t.name != name)
        }) {
            return Err(CascadeError::MissingTensor(name.clone()));
        }
        if tensors.len() != layout.len() {
            return Err(CascadeError::BadConfig(format!(
                "parameter set has {} tensors, config expects {}",
                tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if &t.name != name {
                return Err(CascadeError::MissingTensor(name.clone()));
            }
            if &t.shape != shape {
                return Err(CascadeError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape.clone(),
                });
            }
            let len: usize = shape.iter().product();
            if t.data.len() != len {
                return Err(CascadeError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: vec![t.data.len()],
                });
            }
        }

        // Slot table: contiguous tensor ranges per (cascade, layer).
        let mut slots = Vec::new();
        let mut at = 0;
        let n_param_cascades = if config.shared_weights { 1.min(config.n_cascades) } else { config.n_cascades };
        for _ in 0..n_param_cascades {
            for spec in &config.layers {
                let n = layer_tensor_shapes(spec)?.len();
                slots.push(at..at + n);
                at += n;
            }
        }
        Ok(Model { config, tensors, slots })
    }

    fn slot_range(&self, cascade: usize, layer: usize) -> std::ops::Range<usize> {
        let ci = if self.config.shared_weights { 0 } else { cascade };
        self.slots[ci * self.config.layers.len() + layer].clone()
    }

    pub fn layer_tensors(&self, cascade: usize, layer: usize) -> &[Tensor<T>] {
        &self.tensors[self.slot_range(cascade, layer)]
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(Tensor::zeros_like).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|&v| U::of(v.as_f64())).collect(),
            })
            .collect();
        Model::from_tensors(self.config.clone(), tensors).expect("cast preserves layout")
    }
}

fn mul_map<T: Real>(x: &ComplexVolume<T>, s: &ComplexVolume<T>, conjugate: bool) -> ComplexVolume<T> {
    let mut out = x.clone();
    for (o, &sv) in out.data_mut().iter_mut().zip(s.data()) {
        *o = *o * if conjugate { sv.conj() } else { sv };
    }
    out
}

fn add_into<T: Real>(acc: &mut ComplexVolume<T>, v: &ComplexVolume<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(v.data()) {
        *a = *a + b;
    }
}

fn check_df_dims<T: Real>(
    z: &ComplexVolume<T>,
    y: &MultiCoilKSpace<T>,
    s: &CoilSensitivities<T>,
) -> Result<(), CascadeError> {
    if z.dims() != s.dims() || y.dims() != s.dims() {
        return Err(FourierError::DimMismatch { a: z.dims(), b: s.dims() }.into());
    }
    if y.n_coils() != s.n_coils() {
        return Err(FourierError::CoilMismatch { a: y.n_coils(), b: s.n_coils() }.into());
    }
    Ok(())
}

/// Multi-coil data-fidelity step: S^H F^H [ (I - M) F S z + y ].
///
/// Sampled k-space of the network estimate is replaced by the measurements;
/// linear in z, affine in y.
pub fn df_step<T: Real>(
    z: &ComplexVolume<T>,
    y: &MultiCoilKSpace<T>,
    s: &CoilSensitivities<T>,
    m: &SamplingMask,
) -> Result<ComplexVolume<T>, CascadeError> {
    check_df_dims(z, y, s)?;
    let per_coil: Vec<ComplexVolume<T>> = s
        .maps()
        .par_iter()
        .zip(y.coils().par_iter())
        .map(|(sc, yc)| {
            let k = fft_centered(&mul_map(z, sc, false), &Axis::ALL);
            let mut k = apply_mask_volume(&k, m, true)?;
            add_into(&mut k, yc);
            Ok(mul_map(&ifft_centered(&k, &Axis::ALL), sc, true))
        })
        .collect::<Result<_, CascadeError>>()?;
    let mut acc = ComplexVolume::zeros(z.dims());
    for v in &per_coil {
        add_into(&mut acc, v);
    }
    Ok(acc)
}

/// Gradient of [`df_step`] in z: the linear part S^H F^H (I - M) F S is
/// self-adjoint, so it is its own reverse-mode map.
pub fn df_input_grad<T: Real>(
    g: &ComplexVolume<T>,
    s: &CoilSensitivities<T>,
    m: &SamplingMask,
) -> Result<ComplexVolume<T>, CascadeError> {
    let per_coil: Vec<ComplexVolume<T>> = s
        .maps()
        .par_iter()
        .map(|sc| {
            let k = fft_centered(&mul_map(g, sc, false), &Axis::ALL);
            let k = apply_mask_volume(&k, m, true)?;
            Ok(mul_map(&ifft_centered(&k, &Axis::ALL), sc, true))
        })
        .collect::<Result<_, CascadeError>>()?;
    let mut acc = ComplexVolume::zeros(g.dims());
    for v in &per_coil {
        add_into(&mut acc, v);
    }
    Ok(acc)
}

/// Single-coil DF: F^H [ (I - M) F z + y_c ].
pub fn df_step_single<T: Real>(
    z: &ComplexVolume<T>,
    y_c: &ComplexVolume<T>,
    m: &SamplingMask,
) -> Result<ComplexVolume<T>, CascadeError> {
    let k = fft_centered(z, &Axis::ALL);
    let mut k = apply_mask_volume(&k, m, true)?;
    add_into(&mut k, y_c);
    Ok(ifft_centered(&k, &Axis::ALL))
}

fn df_single_grad<T: Real>(
    g: &ComplexVolume<T>,
    m: &SamplingMask,
) -> Result<ComplexVolume<T>, CascadeError> {
    let k = fft_centered(g, &Axis::ALL);
    let k = apply_mask_volume(&k, m, true)?;
    Ok(ifft_centered(&k, &Axis::ALL))
}

/// 1D kernels longer than the axis fold onto it circularly: taps that land
/// on the same residue class sum into one effective tap, which keeps the
/// parameter count fixed while the layer runs on any axis size.
fn fold_conv_1d<T: Real>(
    p: &ConvParams<T>,
    axis: Axis,
    n_axis: usize,
) -> (ConvParams<T>, Option<Vec<usize>>) {
    let k = match axis {
        Axis::Ro => p.k.0,
        Axis::Pe => p.k.1,
        Axis::Spe => p.k.2,
    };
    if k <= n_axis {
        return (p.clone(), None);
    }
    let c = (k - 1) / 2;
    let c_eff = (n_axis - 1) / 2;
    // tap u at offset (u - c) lands on effective index ((u - c) + c_eff) mod n.
    let map: Vec<usize> = (0..k)
        .map(|u| (((u as isize - c as isize) + c_eff as isize).rem_euclid(n_axis as isize)) as usize)
        .collect();
    let mut kernel = vec![T::zero(); p.c_out * p.c_in * n_axis];
    for co in 0..p.c_out {
        for ci in 0..p.c_in {
            let src = (co * p.c_in + ci) * k;
            let dst = (co * p.c_in + ci) * n_axis;
            for u in 0..k {
                kernel[dst + map[u]] = kernel[dst + map[u]] + p.kernel[src + u];
            }
        }
    }
    let folded = ConvParams {
        c_out: p.c_out,
        c_in: p.c_in,
        k: conv1d_kshape(axis, n_axis),
        kernel,
        bias: p.bias.clone(),
    };
    (folded, Some(map))
}

/// Distributes folded-kernel gradients back to the original taps.
fn unfold_kernel_grad<T: Real>(
    folded_grad: &[T],
    map: &[usize],
    c_out: usize,
    c_in: usize,
    k: usize,
    n_axis: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c_out * c_in * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            let src = (co * c_in + ci) * n_axis;
            let dst = (co * c_in + ci) * k;
            for u in 0..k {
                out[dst + u] = folded_grad[src + map[u]];
            }
        }
    }
    out
}

fn conv_params_from_tensors<T: Real>(kernel: &Tensor<T>, bias: &Tensor<T>) -> ConvParams<T> {
    ConvParams {
        c_out: kernel.shape[0],
        c_in: kernel.shape[1],
        k: (kernel.shape[2], kernel.shape[3], kernel.shape[4]),
        kernel: kernel.data.clone(),
        bias: bias.data.clone(),
    }
}

fn fc_params_from_tensors<T: Real>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    activation: Activation,
) -> FcBlockParams<T> {
    FcBlockParams::new(
        weight.shape[0],
        weight.shape[1],
        weight.data.clone(),
        bias.data.clone(),
        activation,
    )
}

/// Residual conv stack shared by ConvBlock and Conv1d layers: rectifiers
/// between convolutions, linear output, skip connection around the stack.
fn conv_stack_forward<T: Real>(
    x: &ChannelVolume<T>,
    tensors: &[Tensor<T>],
    depth: usize,
    fold_axis: Option<Axis>,
) -> Result<ChannelVolume<T>, CascadeError> {
    let mut h = x.clone();
    for d in 0..depth {
        let p = conv_params_from_tensors(&tensors[2 * d], &tensors[2 * d + 1]);
        let p = match fold_axis {
            Some(axis) => fold_conv_1d(&p, axis, x.dims().axis_len(axis)).0,
            None => p,
        };
        h = conv_forward(&h, &p)?;
        if d + 1 < depth {
            h = activation_forward(&h, Activation::Rectifier);
        }
    }
    h.add_assign(x)?;
    Ok(h)
}

fn conv_stack_backward<T: Real>(
    x: &ChannelVolume<T>,
    tensors: &[Tensor<T>],
    depth: usize,
    fold_axis: Option<Axis>,
    upstream: &ChannelVolume<T>,
) -> Result<(ChannelVolume<T>, Vec<Vec<T>>), CascadeError> {
    // Recompute the chain, keeping each conv input and pre-activation.
    let n_axis = fold_axis.map(|a| x.dims().axis_len(a));
    let mut params = Vec::with_capacity(depth);
    let mut maps = Vec::with_capacity(depth);
    for d in 0..depth {
        let p = conv_params_from_tensors(&tensors[2 * d], &tensors[2 * d + 1]);
        match fold_axis {
            Some(axis) => {
                let (folded, map) = fold_conv_1d(&p, axis, n_axis.unwrap());
                params.push(folded);
                maps.push(map);
            }
            None => {
                params.push(p);
                maps.push(None);
            }
        }
    }
    let mut inputs = Vec::with_capacity(depth);
    let mut pres = Vec::with_capacity(depth);
    let mut h = x.clone();
    for (d, p) in params.iter().enumerate() {
        inputs.push(h.clone());
        let z = conv_forward(&h, p)?;
        pres.push(z.clone());
        h = if d + 1 < depth { activation_forward(&z, Activation::Rectifier) } else { z };
    }

    let mut d_h = upstream.clone();
    let mut grads: Vec<Vec<T>> = vec![Vec::new(); 2 * depth];
    for d in (0..depth).rev() {
        let dz = if d + 1 < depth {
            activation_backward(&pres[d], Activation::Rectifier, &d_h)
        } else {
            d_h.clone()
        };
        let (dx, dk, db) = conv_backward(&inputs[d], &params[d], &dz)?;
        let dk = match (&maps[d], fold_axis) {
            (Some(map), Some(_)) => {
                let orig = &tensors[2 * d];
                let taps: usize = orig.shape[2..].iter().product();
                unfold_kernel_grad(&dk, map, orig.shape[0], orig.shape[1], taps, n_axis.unwrap())
            }
            _ => dk,
        };
        grads[2 * d] = dk;
        grads[2 * d + 1] = db;
        d_h = dx;
    }
    // Residual skip.
    d_h.add_assign(upstream)?;
    Ok((d_h, grads))
}

fn layer_forward<T: Real>(
    spec: &LayerSpec,
    tensors: &[Tensor<T>],
    x: &ChannelVolume<T>,
) -> Result<ChannelVolume<T>, CascadeError> {
    match spec {
        LayerSpec::ConvBlock { depth, .. } => conv_stack_forward(x, tensors, *depth, None),
        LayerSpec::Conv1d { axis, .. } => conv_stack_forward(x, tensors, CONV1D_DEPTH, Some(*axis)),
        LayerSpec::Dmlp { cfg } => {
            let params: Vec<FcBlockParams<T>> = (0..cfg.n_blocks)
                .map(|n| {
                    let act = if n + 1 == cfg.n_blocks { Activation::Identity } else { Activation::Rectifier };
                    fc_params_from_tensors(&tensors[2 * n], &tensors[2 * n + 1], act)
                })
                .collect();
            Ok(dmlp_forward(x, &params, cfg)?)
        }
    }
}

fn layer_backward<T: Real>(
    spec: &LayerSpec,
    tensors: &[Tensor<T>],
    x: &ChannelVolume<T>,
    upstream: &ChannelVolume<T>,
) -> Result<(ChannelVolume<T>, Vec<Vec<T>>), CascadeError> {
    match spec {
        LayerSpec::ConvBlock { depth, .. } => conv_stack_backward(x, tensors, *depth, None, upstream),
        LayerSpec::Conv1d { axis, .. } => {
            conv_stack_backward(x, tensors, CONV1D_DEPTH, Some(*axis), upstream)
        }
        LayerSpec::Dmlp { cfg } => {
            let params: Vec<FcBlockParams<T>> = (0..cfg.n_blocks)
                .map(|n| {
                    let act = if n + 1 == cfg.n_blocks { Activation::Identity } else { Activation::Rectifier };
                    fc_params_from_tensors(&tensors[2 * n], &tensors[2 * n + 1], act)
                })
                .collect();
            let (dx, gs) = dmlp_backward(x, &params, cfg, upstream)?;
            let mut flat = Vec::with_capacity(2 * gs.len());
            for g in gs {
                flat.push(g.d_weights);
                flat.push(g.d_bias);
            }
            Ok((dx, flat))
        }
    }
}

/// Everything the backward pass needs from a forward run.
pub struct ForwardTrace<T: Real> {
    /// One chain for multi-coil DF; one per coil for coil-split DF.
    chains: Vec<ChainTrace<T>>,
}

struct ChainTrace<T: Real> {
    /// chains[cascade][layer] = input that layer saw.
    layer_inputs: Vec<Vec<ChannelVolume<T>>>,
    final_x: ComplexVolume<T>,
}

fn run_chain<T: Real>(
    model: &Model<T>,
    x0: ComplexVolume<T>,
    df: impl Fn(&ComplexVolume<T>) -> Result<ComplexVolume<T>, CascadeError>,
) -> Result<ChainTrace<T>, CascadeError> {
    let mut x = x0;
    let mut layer_inputs = Vec::with_capacity(model.config.n_cascades);
    for ci in 0..model.config.n_cascades {
        let mut h = x.to_channels();
        let mut inputs = Vec::with_capacity(model.config.layers.len());
        for (li, spec) in model.config.layers.iter().enumerate() {
            inputs.push(h.clone());
            h = layer_forward(spec, model.layer_tensors(ci, li), &h)?;
        }
        layer_inputs.push(inputs);
        let z = h.to_complex()?;
        x = df(&z)?;
    }
    Ok(ChainTrace { layer_inputs, final_x: x })
}

fn chain_backward<T: Real>(
    model: &Model<T>,
    trace: &ChainTrace<T>,
    upstream: &ComplexVolume<T>,
    df_grad: impl Fn(&ComplexVolume<T>) -> Result<ComplexVolume<T>, CascadeError>,
    grads: &mut [Tensor<T>],
) -> Result<ComplexVolume<T>, CascadeError> {
    let mut d_x = upstream.clone();
    for ci in (0..model.config.n_cascades).rev() {
        let dz = df_grad(&d_x)?;
        let mut d_h = dz.to_channels();
        for li in (0..model.config.layers.len()).rev() {
            let (dx, layer_grads) = layer_backward(
                &model.config.layers[li],
                model.layer_tensors(ci, li),
                &trace.layer_inputs[ci][li],
                &d_h,
            )?;
            let range = model.slot_range(ci, li);
            for (tensor_grad, new) in grads[range].iter_mut().zip(layer_grads) {
                for (a, b) in tensor_grad.data.iter_mut().zip(new) {
                    *a = *a + b;
                }
            }
            d_h = dx;
        }
        d_x = d_h.to_complex()?;
    }
    Ok(d_x)
}

/// Root sum of squares across coil reconstructions (imaginary part zero).
fn rss_combine<T: Real>(coils: &[ComplexVolume<T>]) -> ComplexVolume<T> {
    let dims = coils[0].dims();
    let mut out = ComplexVolume::zeros(dims);
    for i in 0..dims.len() {
        let s: T = coils.iter().map(|c| c.data()[i].norm_sqr()).sum();
        out.data_mut()[i] = Cplx::new(s.sqrt(), T::zero());
    }
    out
}

/// Runs the unrolled network from measured k-space. x0 is the zero-filled
/// SENSE adjoint (per-coil inverse FFT in coil-split mode).
pub fn cascade_forward<T: Real>(
    y: &MultiCoilKSpace<T>,
    s: &CoilSensitivities<T>,
    m: &SamplingMask,
    model: &Model<T>,
) -> Result<(ComplexVolume<T>, ForwardTrace<T>), CascadeError> {
    check_df_dims(&ComplexVolume::zeros(s.dims()), y, s)?;
    match model.config.df {
        DfMode::MultiCoil => {
            let x0 = sense_adjoint(y, s, m)?;
            let chain = run_chain(model, x0, |z| df_step(z, y, s, m))?;
            let out = chain.final_x.clone();
            Ok((out, ForwardTrace { chains: vec![chain] }))
        }
        DfMode::SingleCoil => {
            let chains = y
                .coils()
                .iter()
                .map(|yc| {
                    let x0 = ifft_centered(&apply_mask_volume(yc, m, false)?, &Axis::ALL);
                    run_chain(model, x0, |z| df_step_single(z, yc, m))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let finals: Vec<ComplexVolume<T>> =
                chains.iter().map(|c| c.final_x.clone()).collect();
            Ok((rss_combine(&finals), ForwardTrace { chains }))
        }
    }
}

/// Reverse-mode pass through every cascade; parameter gradients accumulate
/// into `grads` (aligned with `model.tensors`).
pub fn cascade_backward<T: Real>(
    model: &Model<T>,
    s: &CoilSensitivities<T>,
    m: &SamplingMask,
    trace: &ForwardTrace<T>,
    upstream: &ComplexVolume<T>,
    grads: &mut [Tensor<T>],
) -> Result<(), CascadeError> {
    match model.config.df {
        DfMode::MultiCoil => {
            chain_backward(model, &trace.chains[0], upstream, |g| df_input_grad(g, s, m), grads)?;
        }
        DfMode::SingleCoil => {
            // Through the root-sum-of-squares combine: d x_c = u_re * x_c / rss.
            let finals: Vec<ComplexVolume<T>> =
                trace.chains.iter().map(|c| c.final_x.clone()).collect();
            let rss = rss_combine(&finals);
            for chain in &trace.chains {
                let mut d_xc = chain.final_x.clone();
                for i in 0..d_xc.dims().len() {
                    let r = rss.data()[i].re;
                    let scale = if r > T::zero() { upstream.data()[i].re / r } else { T::zero() };
                    d_xc.data_mut()[i] = d_xc.data()[i].scale(scale);
                }
                chain_backward(model, chain, &d_xc, |g| df_single_grad(g, m), grads)?;
            }
        }
    }
    Ok(())
}
