//! Dynamic MLP operator: circular padding, patch-wise FC blocks with
//! circular window shifting, shift alignment and cropping.
//!
//! The patch vector folds the channel dimension in (P_n = p * C_n), so an
//! FC block mixes channels as well as positions; the spatial patch length is
//! fixed across blocks and only the channel width varies. Because padding,
//! patching and shifting adapt to the input, one trained parameter set runs
//! on any axis size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Activation;
use crate::scalar::Real;
use crate::volume::{Axis, ChannelVolume, PatchMatrix, VolumeError};

#[derive(Debug, Error)]
pub enum DmlpError {
    #[error("patch structure mismatch: block expects P_n = {expected}, input gives {got}")]
    PatchShape { expected: usize, got: usize },
    #[error("config lists {blocks} blocks but {params} parameter sets were given")]
    BlockCount { blocks: usize, params: usize },
    #[error("input has {got} channels, config starts at {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("upstream gradient has {got} channels, config ends at {expected}")]
    UpstreamChannels { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// One FC block: affine map over patch vectors (weights shared across all
/// patches) followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FcBlockParams<T: Real> {
    pub p_out: usize,
    pub p_in: usize,
    /// Row-major (p_out x p_in).
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> FcBlockParams<T> {
    pub fn new(
        p_out: usize,
        p_in: usize,
        weights: Vec<T>,
        bias: Vec<T>,
        activation: Activation,
    ) -> Self {
        assert_eq!(weights.len(), p_out * p_in);
        assert_eq!(bias.len(), p_out);
        FcBlockParams { p_out, p_in, weights, bias, activation }
    }

    pub fn identity(p: usize) -> Self {
        let mut weights = vec![T::zero(); p * p];
        for i in 0..p {
            weights[i * p + i] = T::one();
        }
        FcBlockParams { p_out: p, p_in: p, weights, bias: vec![T::zero(); p], activation: Activation::Identity }
    }
}

/// Shape of a whole dMLP module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlpConfig {
    pub axis: Axis,
    pub p_spatial: usize,
    pub n_blocks: usize,
    /// Channel widths C_0 .. C_{n_blocks}.
    pub channels: Vec<usize>,
    /// Per-block window shifts, each in (0, p_spatial).
    pub shifts: Vec<usize>,
    pub residual: bool,
}

impl DmlpConfig {
    /// Desk-scale default: patch 8, four blocks, hidden width 16,
    /// half-patch shifts, residual on.
    pub fn standard(axis: Axis, in_channels: usize, out_channels: usize) -> Self {
        Self::with_patch(axis, in_channels, out_channels, 8, 16)
    }

    pub fn with_patch(
        axis: Axis,
        in_channels: usize,
        out_channels: usize,
        p_spatial: usize,
        hidden: usize,
    ) -> Self {
        let n_blocks = 4;
        let mut channels = vec![hidden; n_blocks + 1];
        channels[0] = in_channels;
        channels[n_blocks] = out_channels;
        DmlpConfig {
            axis,
            p_spatial,
            n_blocks,
            channels,
            shifts: vec![p_spatial / 2; n_blocks],
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<(), DmlpError> {
        if self.n_blocks == 0 {
            return Err(DmlpError::BadConfig("need at least one block".into()));
        }
        if self.p_spatial == 0 {
            return Err(DmlpError::BadConfig("patch size must be positive".into()));
        }
        if self.channels.len() != self.n_blocks + 1 {
            return Err(DmlpError::BadConfig(format!(
                "channels lists {} entries for {} blocks",
                self.channels.len(),
                self.n_blocks
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(DmlpError::BadConfig("channel widths must be positive".into()));
        }
        if self.shifts.len() != self.n_blocks {
            return Err(DmlpError::BadConfig(format!(
                "shifts lists {} entries for {} blocks",
                self.shifts.len(),
                self.n_blocks
            )));
        }
        if self.shifts.iter().any(|&s| s == 0 || s >= self.p_spatial) {
            return Err(DmlpError::BadConfig(
                "shifts must lie strictly between 0 and the patch size".into(),
            ));
        }
        Ok(())
    }

    pub fn p_vec(&self, n: usize) -> usize {
        self.p_spatial * self.channels[n]
    }

    /// Seeded uniform init in +-sqrt(6 / (P_n + P_{n+1})); biases zero;
    /// rectifier activations with a linear output head.
    pub fn init_params<T: Real, R: rand::Rng>(&self, rng: &mut R) -> Vec<FcBlockParams<T>> {
        (0..self.n_blocks)
            .map(|n| {
                let (p_in, p_out) = (self.p_vec(n), self.p_vec(n + 1));
                let bound = (6.0 / (p_in + p_out) as f64).sqrt();
                let weights = (0..p_out * p_in)
                    .map(|_| T::of(rng.random_range(-bound..bound)))
                    .collect();
                let activation = if n + 1 == self.n_blocks {
                    Activation::Identity
                } else {
                    Activation::Rectifier
                };
                FcBlockParams::new(p_out, p_in, weights, vec![T::zero(); p_out], activation)
            })
            .collect()
    }
}

/// y_col = A x_col + b for every column, in parallel over columns.
fn affine_columns<T: Real>(
    a: &[T],
    bias: &[T],
    p_out: usize,
    p_in: usize,
    x: &PatchMatrix<T>,
) -> Vec<T> {
    let q = x.q();
    let mut out = vec![T::zero(); p_out * q];
    out.par_chunks_mut(p_out).enumerate().for_each(|(qi, col)| {
        let xc = x.column(qi);
        for i in 0..p_out {
            let row = &a[i * p_in..(i + 1) * p_in];
            col[i] = bias[i] + crate::nn::dot_lanes(row, xc);
        }
    });
    out
}

/// Forward pass of one FC block: patch, affine, activation, unpatch with
/// the new channel width, then circular window shift by cfg.shifts[n].
pub fn fc_block_forward<T: Real>(
    x: &ChannelVolume<T>,
    params: &FcBlockParams<T>,
    cfg: &DmlpConfig,
    n: usize,
) -> Result<ChannelVolume<T>, DmlpError> {
    let xm = x.patch(cfg.axis, cfg.p_spatial)?;
    if xm.p() != params.p_in {
        return Err(DmlpError::PatchShape { expected: params.p_in, got: xm.p() });
    }
    let mut z = affine_columns(&params.weights, &params.bias, params.p_out, params.p_in, &xm);
    for v in z.iter_mut() {
        *v = params.activation.apply(*v);
    }
    let ym = PatchMatrix::from_parts(params.p_out, xm.q(), z, xm.origin())?;
    let y = ym.unpatch()?;
    Ok(y.circular_shift(cfg.axis, cfg.shifts[n] as isize))
}

/// Gradients of one FC block.
pub struct FcBlockGrads<T: Real> {
    pub d_weights: Vec<T>,
    pub d_bias: Vec<T>,
}

/// Reverse-mode pass of one FC block: unshift, re-patch, activation
/// derivative, transposed-weight products.
pub fn fc_block_backward<T: Real>(
    x: &ChannelVolume<T>,
    params: &FcBlockParams<T>,
    cfg: &DmlpConfig,
    n: usize,
    upstream: &ChannelVolume<T>,
) -> Result<(ChannelVolume<T>, FcBlockGrads<T>), DmlpError> {
    let xm = x.patch(cfg.axis, cfg.p_spatial)?;
    if xm.p() != params.p_in {
        return Err(DmlpError::PatchShape { expected: params.p_in, got: xm.p() });
    }
    let (p_in, p_out) = (params.p_in, params.p_out);
    let q = xm.q();

    let unshifted = upstream.circular_shift(cfg.axis, -(cfg.shifts[n] as isize));
    let um = unshifted.patch(cfg.axis, cfg.p_spatial)?;
    if um.p() != p_out {
        return Err(DmlpError::PatchShape { expected: p_out, got: um.p() });
    }

    // Recompute pre-activations, then dZ = f'(Z) .* dY.
    let z = affine_columns(&params.weights, &params.bias, p_out, p_in, &xm);
    let mut dz = um.data().to_vec();
    for (g, &pre) in dz.iter_mut().zip(&z) {
        *g = *g * params.activation.deriv(pre);
    }

    // dX = A^T dZ, column by column.
    let mut dx = vec![T::zero(); p_in * q];
    dx.par_chunks_mut(p_in).enumerate().for_each(|(qi, col)| {
        let dzc = &dz[qi * p_out..(qi + 1) * p_out];
        for i in 0..p_out {
            let row = &params.weights[i * p_in..(i + 1) * p_in];
            let g = dzc[i];
            for (o, &w) in col.iter_mut().zip(row) {
                *o = *o + w * g;
            }
        }
    });

    // dA = dZ X^T, row by row; db = row sums of dZ.
    let mut d_weights = vec![T::zero(); p_out * p_in];
    d_weights.par_chunks_mut(p_in).enumerate().for_each(|(i, row)| {
        for qi in 0..q {
            let g = dz[qi * p_out + i];
            let xc = xm.column(qi);
            for (o, &v) in row.iter_mut().zip(xc) {
                *o = *o + g * v;
            }
        }
    });
    let mut d_bias = vec![T::zero(); p_out];
    for qi in 0..q {
        for i in 0..p_out {
            d_bias[i] = d_bias[i] + dz[qi * p_out + i];
        }
    }

    let dxm = PatchMatrix::from_parts(p_in, q, dx, xm.origin())?;
    Ok((dxm.unpatch()?, FcBlockGrads { d_weights, d_bias }))
}

fn check_module<T: Real>(
    x: &ChannelVolume<T>,
    params: &[FcBlockParams<T>],
    cfg: &DmlpConfig,
) -> Result<(), DmlpError> {
    cfg.validate()?;
    if params.len() != cfg.n_blocks {
        return Err(DmlpError::BlockCount { blocks: cfg.n_blocks, params: params.len() });
    }
    if x.n_channels() != cfg.channels[0] {
        return Err(DmlpError::InputChannels { expected: cfg.channels[0], got: x.n_channels() });
    }
    Ok(())
}

/// Whole dMLP module: circular pad, FC blocks, shift alignment (one
/// aggregate inverse shift), crop, optional residual. Output spatial dims
/// equal input dims for every input size.
pub fn dmlp_forward<T: Real>(
    x: &ChannelVolume<T>,
    params: &[FcBlockParams<T>],
    cfg: &DmlpConfig,
) -> Result<ChannelVolume<T>, DmlpError> {
    check_module(x, params, cfg)?;
    let (mut h, pad_len) = x.circular_pad(cfg.axis, cfg.p_spatial);
    for (n, p) in params.iter().enumerate() {
        h = fc_block_forward(&h, p, cfg, n)?;
    }
    let total: usize = cfg.shifts.iter().sum();
    h = h.circular_shift(cfg.axis, -(total as isize));
    let mut out = h.crop_pad(cfg.axis, pad_len)?;
    if cfg.residual && cfg.channels[0] == cfg.channels[cfg.n_blocks] {
        out.add_assign(x)?;
    }
    Ok(out)
}

/// Reverse-mode pass of the whole module; gradients come back per block in
/// forward order.
pub fn dmlp_backward<T: Real>(
    x: &ChannelVolume<T>,
    params: &[FcBlockParams<T>],
    cfg: &DmlpConfig,
    upstream: &ChannelVolume<T>,
) -> Result<(ChannelVolume<T>, Vec<FcBlockGrads<T>>), DmlpError> {
    check_module(x, params, cfg)?;
    if upstream.n_channels() != cfg.channels[cfg.n_blocks] {
        return Err(DmlpError::UpstreamChannels {
            expected: cfg.channels[cfg.n_blocks],
            got: upstream.n_channels(),
        });
    }
    if upstream.dims() != x.dims() {
        return Err(DmlpError::Volume(VolumeError::DimMismatch {
            a: upstream.dims(),
            b: x.dims(),
        }));
    }

    // Recompute and keep each block input.
    let (padded, pad_len) = x.circular_pad(cfg.axis, cfg.p_spatial);
    let mut inputs = Vec::with_capacity(cfg.n_blocks);
    let mut h = padded;
    for (n, p) in params.iter().enumerate() {
        inputs.push(h.clone());
        h = fc_block_forward(&h, p, cfg, n)?;
    }

    let total: usize = cfg.shifts.iter().sum();
    let mut d = upstream.crop_pad_backward(cfg.axis, pad_len);
    d = d.circular_shift(cfg.axis, total as isize);

    let mut grads: Vec<Option<FcBlockGrads<T>>> = (0..cfg.n_blocks).map(|_| None).collect();
    for n in (0..cfg.n_blocks).rev() {
        let (dx, g) = fc_block_backward(&inputs[n], &params[n], cfg, n, &d)?;
        d = dx;
        grads[n] = Some(g);
    }
    let mut input_grad = d.circular_pad_backward(cfg.axis, pad_len);
    if cfg.residual && cfg.channels[0] == cfg.channels[cfg.n_blocks] {
        input_grad.add_assign(upstream)?;
    }
    Ok((input_grad, grads.into_iter().map(|g| g.unwrap()).collect()))
}
