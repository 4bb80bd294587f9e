//! Convolutional and pointwise layers with hand-derived backward passes,
//! plus the finite-difference harness every layer is checked against.
//!
//! Boundary handling is circular everywhere, consistent with the aliasing
//! model (sub-sampling acts as circular convolution), which also makes
//! shift equivariance exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::volume::{ChannelVolume, VolumeError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("kernel extent {k} exceeds axis size {n}")]
    KernelTooLarge { k: usize, n: usize },
    #[error("upstream gradient shape does not match layer output")]
    UpstreamShape,
    #[error("parameter has non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Pointwise nonlinearity; the derivative at 0 is the left limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Rectifier,
    LeakyRectifier { slope: f64 },
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Rectifier => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRectifier { slope } => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(slope)
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn deriv<T: Real>(self, x: T) -> T {
        match self {
            Activation::Rectifier => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRectifier { slope } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(slope)
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Convolution kernel + bias. 1D-oriented convolutions are the degenerate
/// shapes (k,1,1) / (1,k,1) / (1,1,k); even extents center at k/2 - 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real> {
    pub c_out: usize,
    pub c_in: usize,
    pub k: (usize, usize, usize),
    /// Layout [c_out][c_in][k_ro][k_pe][k_spe].
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(
        c_out: usize,
        c_in: usize,
        k: (usize, usize, usize),
        kernel: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self, NnError> {
        assert_eq!(kernel.len(), c_out * c_in * k.0 * k.1 * k.2);
        assert_eq!(bias.len(), c_out);
        if kernel.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(ConvParams { c_out, c_in, k, kernel, bias })
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.len()
    }

    fn kernel_at(&self, co: usize, ci: usize, kr: usize, kp: usize, ks: usize) -> T {
        let (k_ro, k_pe, k_spe) = self.k;
        self.kernel[(((co * self.c_in + ci) * k_ro + kr) * k_pe + kp) * k_spe + ks]
    }
}

/// Center index along one kernel axis: (k-1)/2, so even kernels center one
/// step left of the midpoint.
fn kcenter(k: usize) -> usize {
    (k - 1) / 2
}

/// Copies one channel into a buffer with circular halos, so every kernel
/// tap becomes a plain offset read: padded[(ro + kr), (pe + kp), (spe + ks)]
/// maps to x[(ro + kr - c_ro) mod n_ro, ...].
fn pad_channel<T: Real>(
    src: &[T],
    dims: (usize, usize, usize),
    k: (usize, usize, usize),
    center: (usize, usize, usize),
    out: &mut Vec<T>,
) {
    let (n_ro, n_pe, n_spe) = dims;
    let (p_pe, p_spe) = (n_pe + k.1 - 1, n_spe + k.2 - 1);
    let p_ro = n_ro + k.0 - 1;
    out.clear();
    out.resize(p_ro * p_pe * p_spe, T::zero());
    for ro in 0..p_ro {
        let sro = (ro + n_ro - center.0 % n_ro) % n_ro;
        for pe in 0..p_pe {
            let spe_row = (sro * n_pe + (pe + n_pe - center.1 % n_pe) % n_pe) * n_spe;
            let dst_row = (ro * p_pe + pe) * p_spe;
            for spe in 0..p_spe {
                let sspe = (spe + n_spe - center.2 % n_spe) % n_spe;
                out[dst_row + spe] = src[spe_row + sspe];
            }
        }
    }
}

/// Dot product with a fixed 8-lane accumulator split. The lane count and
/// fold order never change, so the sum is deterministic while the lanes
/// vectorize.
pub(crate) fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let chunks = n / LANES;
    let mut acc = [T::zero(); LANES];
    for c in 0..chunks {
        let (va, vb) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] = acc[l] + va[l] * vb[l];
        }
    }
    let mut total = T::zero();
    for i in chunks * LANES..n {
        total = total + a[i] * b[i];
    }
    for l in 0..LANES {
        total = total + acc[l];
    }
    total
}


fn check_conv_shapes<T: Real>(x: &ChannelVolume<T>, p: &ConvParams<T>) -> Result<(), NnError> {
    if x.n_channels() != p.c_in {
        return Err(NnError::ChannelMismatch { expected: p.c_in, got: x.n_channels() });
    }
    let dims = x.dims();
    for (k, n) in [(p.k.0, dims.ro), (p.k.1, dims.pe), (p.k.2, dims.spe)] {
        if k > n {
            return Err(NnError::KernelTooLarge { k, n });
        }
    }
    Ok(())
}

/// One output row of a padded-buffer correlation: for every spe, the taps
/// along spe read consecutive entries of the padded source row.
#[inline(always)]
fn conv_row_accumulate<T: Real>(dst_row: &mut [T], src_row: &[T], taps: &[T]) {
    match taps.len() {
        1 => {
            let w = taps[0];
            for (o, &v) in dst_row.iter_mut().zip(src_row) {
                *o = *o + w * v;
            }
        }
        3 => {
            let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
            for (s, o) in dst_row.iter_mut().enumerate() {
                *o = *o + w0 * src_row[s] + w1 * src_row[s + 1] + w2 * src_row[s + 2];
            }
        }
        _ => {
            for (ks, &w) in taps.iter().enumerate() {
                for (o, &v) in dst_row.iter_mut().zip(&src_row[ks..]) {
                    *o = *o + w * v;
                }
            }
        }
    }
}

/// Circular cross-correlation, stride 1, output dims equal input dims:
/// out[co, v] = bias[co] + sum_{ci,u} kernel[co,ci,u] * x[ci, v + u - center].
pub fn conv_forward<T: Real>(
    x: &ChannelVolume<T>,
    p: &ConvParams<T>,
) -> Result<ChannelVolume<T>, NnError> {
    check_conv_shapes(x, p)?;
    let dims = x.dims();
    let spatial = dims.len();
    let d3 = (dims.ro, dims.pe, dims.spe);
    let center = (kcenter(p.k.0), kcenter(p.k.1), kcenter(p.k.2));
    let (p_pe, p_spe) = (dims.pe + p.k.1 - 1, dims.spe + p.k.2 - 1);

    let mut padded: Vec<Vec<T>> = vec![Vec::new(); p.c_in];
    for (ci, buf) in padded.iter_mut().enumerate() {
        pad_channel(x.channel(ci), d3, p.k, center, buf);
    }

    let mut out = ChannelVolume::zeros(p.c_out, dims);
    out.data_mut()
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(co, dst)| {
            dst.fill(p.bias[co]);
            for (ci, xp) in padded.iter().enumerate() {
                for kr in 0..p.k.0 {
                    for kp in 0..p.k.1 {
                        let tap0 = (((co * p.c_in + ci) * p.k.0 + kr) * p.k.1 + kp) * p.k.2;
                        let taps = &p.kernel[tap0..tap0 + p.k.2];
                        for ro in 0..dims.ro {
                            for pe in 0..dims.pe {
                                let src0 = ((ro + kr) * p_pe + pe + kp) * p_spe;
                                let dst0 = (ro * dims.pe + pe) * dims.spe;
                                conv_row_accumulate(
                                    &mut dst[dst0..dst0 + dims.spe],
                                    &xp[src0..src0 + dims.spe + p.k.2 - 1],
                                    taps,
                                );
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Exact adjoint/gradients of [`conv_forward`].
pub fn conv_backward<T: Real>(
    x: &ChannelVolume<T>,
    p: &ConvParams<T>,
    upstream: &ChannelVolume<T>,
) -> Result<(ChannelVolume<T>, Vec<T>, Vec<T>), NnError> {
    check_conv_shapes(x, p)?;
    if upstream.n_channels() != p.c_out || upstream.dims() != x.dims() {
        return Err(NnError::UpstreamShape);
    }
    let dims = x.dims();
    let spatial = dims.len();
    let d3 = (dims.ro, dims.pe, dims.spe);
    let (cr, cp, cs) = (kcenter(p.k.0), kcenter(p.k.1), kcenter(p.k.2));

    let bias_grad: Vec<T> =
        (0..p.c_out).map(|co| upstream.channel(co).iter().copied().sum()).collect();

    // Input gradient: correlation becomes convolution. Padding the upstream
    // with mirrored halos turns the negated offsets into plain reads, with
    // the tap order reversed.
    let flipped_center = (p.k.0 - 1 - cr, p.k.1 - 1 - cp, p.k.2 - 1 - cs);
    let (p_pe, p_spe) = (dims.pe + p.k.1 - 1, dims.spe + p.k.2 - 1);
    let mut up_padded: Vec<Vec<T>> = vec![Vec::new(); p.c_out];
    for (co, buf) in up_padded.iter_mut().enumerate() {
        pad_channel(upstream.channel(co), d3, p.k, flipped_center, buf);
    }
    let mut input_grad = ChannelVolume::zeros(p.c_in, dims);
    input_grad
        .data_mut()
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(ci, dst)| {
            for (co, up) in up_padded.iter().enumerate() {
                for kr in 0..p.k.0 {
                    for kp in 0..p.k.1 {
                        let tap0 = (((co * p.c_in + ci) * p.k.0 + (p.k.0 - 1 - kr)) * p.k.1
                            + (p.k.1 - 1 - kp))
                            * p.k.2;
                        let taps: Vec<T> =
                            (0..p.k.2).map(|ks| p.kernel[tap0 + p.k.2 - 1 - ks]).collect();
                        for ro in 0..dims.ro {
                            for pe in 0..dims.pe {
                                let src0 = ((ro + kr) * p_pe + pe + kp) * p_spe;
                                let dst0 = (ro * dims.pe + pe) * dims.spe;
                                conv_row_accumulate(
                                    &mut dst[dst0..dst0 + dims.spe],
                                    &up[src0..src0 + dims.spe + p.k.2 - 1],
                                    &taps,
                                );
                            }
                        }
                    }
                }
            }
        });

    // Kernel gradient: per tap, the dot of upstream with the shifted input,
    // swept once per (co, ci, kr, kp) with per-tap lane accumulators.
    let center = (cr, cp, cs);
    let mut x_padded: Vec<Vec<T>> = vec![Vec::new(); p.c_in];
    for (ci, buf) in x_padded.iter_mut().enumerate() {
        pad_channel(x.channel(ci), d3, p.k, center, buf);
    }
    let per_out = p.c_in * p.k.0 * p.k.1 * p.k.2;
    let mut kernel_grad = vec![T::zero(); p.kernel.len()];
    kernel_grad
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(co, chunk)| {
            let up = upstream.channel(co);
            for (ci, xp) in x_padded.iter().enumerate() {
                for kr in 0..p.k.0 {
                    for kp in 0..p.k.1 {
                        let out0 = ((ci * p.k.0 + kr) * p.k.1 + kp) * p.k.2;
                        let acc = &mut chunk[out0..out0 + p.k.2];
                        for ro in 0..dims.ro {
                            for pe in 0..dims.pe {
                                let src0 = ((ro + kr) * p_pe + pe + kp) * p_spe;
                                let up0 = (ro * dims.pe + pe) * dims.spe;
                                let up_row = &up[up0..up0 + dims.spe];
                                for (ks, a) in acc.iter_mut().enumerate() {
                                    *a = *a + dot_lanes(up_row, &xp[src0 + ks..src0 + ks + dims.spe]);
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((input_grad, kernel_grad, bias_grad))
}

pub fn activation_forward<T: Real>(x: &ChannelVolume<T>, act: Activation) -> ChannelVolume<T> {
    x.map(|v| act.apply(v))
}

/// upstream * f'(pre-activation input).
pub fn activation_backward<T: Real>(
    x: &ChannelVolume<T>,
    act: Activation,
    upstream: &ChannelVolume<T>,
) -> ChannelVolume<T> {
    let mut out = upstream.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = *o * act.deriv(v);
    }
    out
}

/// A differentiable fragment: flat parameter and input views plus analytic
/// forward/backward, as consumed by [`grad_check`].
pub trait Differentiable<T: Real> {
    fn params(&self) -> Vec<T>;
    fn set_params(&mut self, p: &[T]);
    fn forward(&self, x: &[T]) -> Vec<T>;
    /// Returns (d_input, d_params) for the probe loss <upstream, forward(x)>.
    fn backward(&self, x: &[T], upstream: &[T]) -> (Vec<T>, Vec<T>);
}

/// Per-entry relative errors of analytic gradients against central
/// finite differences.
#[derive(Clone, Debug)]
pub struct GradReport<T: Real> {
    pub step: T,
    pub param_err: Vec<T>,
    pub input_err: Vec<T>,
}

impl<T: Real> GradReport<T> {
    pub fn max_param_err(&self) -> T {
        self.param_err.iter().fold(T::zero(), |a, &b| a.max(b))
    }

    pub fn max_input_err(&self) -> T {
        self.input_err.iter().fold(T::zero(), |a, &b| a.max(b))
    }

    pub fn max_err(&self) -> T {
        self.max_param_err().max(self.max_input_err())
    }
}

fn rel_err<T: Real>(a: T, b: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(T::of(1e-8))
}

/// Central finite differences on every parameter and input entry against
/// the analytic gradients, under the probe loss <u, forward(x)> with a
/// fixed seeded probe vector u.
pub fn grad_check<T: Real, F: Differentiable<T>>(
    frag: &mut F,
    input: &[T],
    step: T,
    seed: u64,
) -> GradReport<T> {
    use rand::{Rng, SeedableRng};
    let out_len = frag.forward(input).len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let probe: Vec<T> = (0..out_len).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();

    let loss = |frag: &F, x: &[T]| -> T {
        frag.forward(x).iter().zip(&probe).map(|(&f, &u)| f * u).sum()
    };

    let (d_input, d_params) = frag.backward(input, &probe);
    let p0 = frag.params();

    let mut param_err = Vec::with_capacity(p0.len());
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] = p0[k] + step;
        frag.set_params(&p);
        let up = loss(frag, input);
        p[k] = p0[k] - step;
        frag.set_params(&p);
        let dn = loss(frag, input);
        let fd = (up - dn) / (step + step);
        param_err.push(rel_err(fd, d_params[k]));
    }
    frag.set_params(&p0);

    let mut input_err = Vec::with_capacity(input.len());
    for k in 0..input.len() {
        let mut x = input.to_vec();
        x[k] = input[k] + step;
        let up = loss(frag, &x);
        x[k] = input[k] - step;
        let dn = loss(frag, &x);
        let fd = (up - dn) / (step + step);
        input_err.push(rel_err(fd, d_input[k]));
    }

    GradReport { step, param_err, input_err }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Axis, Dims};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_volume(rng: &mut StdRng, ch: usize, dims: Dims) -> ChannelVolume<f64> {
        let data = (0..ch * dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        ChannelVolume::new(ch, dims, data).unwrap()
    }

    fn random_conv(rng: &mut StdRng, c_out: usize, c_in: usize, k: (usize, usize, usize)) -> ConvParams<f64> {
        let kernel = (0..c_out * c_in * k.0 * k.1 * k.2)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let bias = (0..c_out).map(|_| rng.random_range(-0.2..0.2)).collect();
        ConvParams::new(c_out, c_in, k, kernel, bias).unwrap()
    }

    #[test]
    fn pointwise_identity_kernels() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = random_volume(&mut rng, 1, Dims::new(4, 3, 2));
        let one = ConvParams::new(1, 1, (1, 1, 1), vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv_forward(&x, &one).unwrap(), x);

        let centered = ConvParams::new(1, 1, (3, 1, 1), vec![0.0, 1.0, 0.0], vec![0.0]).unwrap();
        assert_eq!(conv_forward(&x, &centered).unwrap(), x);
    }

    /// Direct-sum convolution oracle, written straight from the definition.
    fn brute_force_conv(x: &ChannelVolume<f64>, p: &ConvParams<f64>) -> ChannelVolume<f64> {
        let dims = x.dims();
        let (cr, cp, cs) = (kcenter(p.k.0), kcenter(p.k.1), kcenter(p.k.2));
        let mut out = ChannelVolume::zeros(p.c_out, dims);
        for co in 0..p.c_out {
            for ro in 0..dims.ro {
                for pe in 0..dims.pe {
                    for spe in 0..dims.spe {
                        let mut acc = p.bias[co];
                        for ci in 0..p.c_in {
                            for kr in 0..p.k.0 {
                                for kp in 0..p.k.1 {
                                    for ks in 0..p.k.2 {
                                        let sro = (ro + dims.ro + kr - cr) % dims.ro;
                                        let spe2 = (pe + dims.pe + kp - cp) % dims.pe;
                                        let sspe = (spe + dims.spe + ks - cs) % dims.spe;
                                        acc += p.kernel_at(co, ci, kr, kp, ks)
                                            * x.at(ci, sro, spe2, sspe);
                                    }
                                }
                            }
                        }
                        let idx = co * dims.len() + dims.offset(ro, pe, spe);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn impulse_yields_flipped_centered_kernel() {
        let dims = Dims::new(5, 1, 1);
        let mut x = ChannelVolume::<f64>::zeros(1, dims);
        x.data_mut()[2] = 1.0; // impulse at the center
        let p = ConvParams::new(1, 1, (3, 1, 1), vec![0.1, 0.2, 0.7], vec![0.0]).unwrap();
        let out = conv_forward(&x, &p).unwrap();
        // Correlation of an impulse reads the kernel out backwards around
        // the impulse location.
        let got: Vec<f64> = (0..5).map(|i| out.at(0, i, 0, 0)).collect();
        assert_eq!(got, vec![0.0, 0.7, 0.2, 0.1, 0.0]);
        assert_eq!(out, brute_force_conv(&x, &p));
    }

    #[test]
    fn forward_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(2);
        for &k in &[(1, 1, 1), (3, 1, 1), (1, 3, 3), (3, 3, 3), (1, 4, 1)] {
            let x = random_volume(&mut rng, 2, Dims::new(4, 5, 6));
            let p = random_conv(&mut rng, 3, 2, k);
            let fast = conv_forward(&x, &p).unwrap();
            let slow = brute_force_conv(&x, &p);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "kernel {k:?}");
            }
        }
    }

    #[test]
    fn kernel_larger_than_axis_is_rejected() {
        let x = ChannelVolume::<f64>::zeros(1, Dims::new(4, 4, 2));
        let p = ConvParams::new(1, 1, (1, 1, 3), vec![0.0; 3], vec![0.0]).unwrap();
        assert!(matches!(conv_forward(&x, &p), Err(NnError::KernelTooLarge { .. })));
    }

    #[test]
    fn zero_kernel_maps_to_bias_field() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = random_volume(&mut rng, 2, Dims::new(3, 3, 3));
        let p = ConvParams::new(2, 2, (3, 3, 3), vec![0.0; 2 * 2 * 27], vec![0.5, -1.0]).unwrap();
        let out = conv_forward(&x, &p).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.5));
        assert!(out.channel(1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn conv_commutes_with_circular_shift() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = random_volume(&mut rng, 2, Dims::new(5, 4, 3));
        let p = random_conv(&mut rng, 2, 2, (3, 3, 1));
        for &(axis, s) in &[(Axis::Ro, 2isize), (Axis::Pe, 1), (Axis::Spe, 2)] {
            let a = conv_forward(&x.circular_shift(axis, s), &p).unwrap();
            let b = conv_forward(&x, &p).unwrap().circular_shift(axis, s);
            assert_eq!(a, b, "axis {axis:?} shift {s}");
        }
    }

    #[test]
    fn bias_grad_is_upstream_sum() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = random_volume(&mut rng, 1, Dims::new(4, 4, 2));
        let p = random_conv(&mut rng, 2, 1, (3, 1, 1));
        let up = random_volume(&mut rng, 2, x.dims());
        let (_, _, bias_grad) = conv_backward(&x, &p, &up).unwrap();
        for co in 0..2 {
            let want: f64 = up.channel(co).iter().sum();
            assert!((bias_grad[co] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_jacobian_oracle_small_conv() {
        // 1-channel (6,1,1) input, (3,1,1) kernel: assemble J column by
        // column from forward evaluations and compare J^T u to backward.
        let mut rng = StdRng::seed_from_u64(6);
        let dims = Dims::new(6, 1, 1);
        let p = random_conv(&mut rng, 1, 1, (3, 1, 1));
        let x = random_volume(&mut rng, 1, dims);
        let n = dims.len();
        let mut jac = vec![vec![0.0f64; n]; n];
        for j in 0..n {
            let mut e = ChannelVolume::<f64>::zeros(1, dims);
            e.data_mut()[j] = 1.0;
            // Linear layer: J column = forward(e) - forward(0).
            let fe = conv_forward(&e, &p).unwrap();
            let f0 = conv_forward(&ChannelVolume::zeros(1, dims), &p).unwrap();
            for i in 0..n {
                jac[i][j] = fe.data()[i] - f0.data()[i];
            }
        }
        let up = random_volume(&mut rng, 1, dims);
        let (input_grad, _, _) = conv_backward(&x, &p, &up).unwrap();
        for j in 0..n {
            let want: f64 = (0..n).map(|i| jac[i][j] * up.data()[i]).sum();
            assert!((input_grad.data()[j] - want).abs() < 1e-12);
        }
    }

    struct ConvFragment {
        p: ConvParams<f64>,
        ch: usize,
        dims: Dims,
    }

    impl Differentiable<f64> for ConvFragment {
        fn params(&self) -> Vec<f64> {
            let mut v = self.p.kernel.clone();
            v.extend_from_slice(&self.p.bias);
            v
        }
        fn set_params(&mut self, p: &[f64]) {
            let nk = self.p.kernel.len();
            self.p.kernel.copy_from_slice(&p[..nk]);
            self.p.bias.copy_from_slice(&p[nk..]);
        }
        fn forward(&self, x: &[f64]) -> Vec<f64> {
            let xv = ChannelVolume::new(self.ch, self.dims, x.to_vec()).unwrap();
            let h = conv_forward(&xv, &self.p).unwrap();
            activation_forward(&h, Activation::Rectifier).data().to_vec()
        }
        fn backward(&self, x: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let xv = ChannelVolume::new(self.ch, self.dims, x.to_vec()).unwrap();
            let pre = conv_forward(&xv, &self.p).unwrap();
            let up = ChannelVolume::new(self.p.c_out, self.dims, upstream.to_vec()).unwrap();
            let d_pre = activation_backward(&pre, Activation::Rectifier, &up);
            let (dx, dk, db) = conv_backward(&xv, &self.p, &d_pre).unwrap();
            let mut dp = dk;
            dp.extend_from_slice(&db);
            (dx.data().to_vec(), dp)
        }
    }

    #[test]
    fn conv_rectifier_passes_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        let dims = Dims::new(6, 1, 1);
        let frag = ConvFragment { p: random_conv(&mut rng, 1, 1, (3, 1, 1)), ch: 1, dims };
        let mut frag = frag;
        let x: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Keep pre-activations away from the rectifier kink so the central
        // difference never crosses it.
        let xv = ChannelVolume::new(1, dims, x.clone()).unwrap();
        let pre = conv_forward(&xv, &frag.p).unwrap();
        let min_pre = pre.data().iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
        assert!(min_pre > 5e-3, "seed lands a pre-activation on the kink: {min_pre}");

        let report = grad_check(&mut frag, &x, 1e-3, 99);
        assert!(report.max_err() < 1e-4, "max err {}", report.max_err());
    }

    #[test]
    fn linear_layer_fd_error_is_machine_precision() {
        let mut rng = StdRng::seed_from_u64(9);
        struct Linear {
            p: ConvParams<f64>,
            dims: Dims,
        }
        impl Differentiable<f64> for Linear {
            fn params(&self) -> Vec<f64> {
                let mut v = self.p.kernel.clone();
                v.extend_from_slice(&self.p.bias);
                v
            }
            fn set_params(&mut self, p: &[f64]) {
                let nk = self.p.kernel.len();
                self.p.kernel.copy_from_slice(&p[..nk]);
                self.p.bias.copy_from_slice(&p[nk..]);
            }
            fn forward(&self, x: &[f64]) -> Vec<f64> {
                let xv = ChannelVolume::new(1, self.dims, x.to_vec()).unwrap();
                conv_forward(&xv, &self.p).unwrap().data().to_vec()
            }
            fn backward(&self, x: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
                let xv = ChannelVolume::new(1, self.dims, x.to_vec()).unwrap();
                let up = ChannelVolume::new(1, self.dims, upstream.to_vec()).unwrap();
                let (dx, dk, db) = conv_backward(&xv, &self.p, &up).unwrap();
                let mut dp = dk;
                dp.extend_from_slice(&db);
                (dx.data().to_vec(), dp)
            }
        }
        let dims = Dims::new(5, 1, 1);
        let mut frag = Linear { p: random_conv(&mut rng, 1, 1, (3, 1, 1)), dims };
        let x: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(&mut frag, &x, 1e-3, 7);
        assert!(report.max_err() < 1e-8, "max err {}", report.max_err());
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = StdRng::seed_from_u64(10);
        struct Corrupted(ConvFragment);
        impl Differentiable<f64> for Corrupted {
            fn params(&self) -> Vec<f64> {
                self.0.params()
            }
            fn set_params(&mut self, p: &[f64]) {
                self.0.set_params(p)
            }
            fn forward(&self, x: &[f64]) -> Vec<f64> {
                self.0.forward(x)
            }
            fn backward(&self, x: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
                let (dx, mut dp) = self.0.backward(x, upstream);
                dp[0] += 0.5; // injected fault
                (dx, dp)
            }
        }
        let dims = Dims::new(6, 1, 1);
        let mut frag = Corrupted(ConvFragment {
            p: random_conv(&mut rng, 1, 1, (3, 1, 1)),
            ch: 1,
            dims,
        });
        let x: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(&mut frag, &x, 1e-3, 11);
        assert!(report.max_param_err() > 1e-2);
    }

    #[test]
    fn activation_values_and_derivatives() {
        assert_eq!(Activation::Rectifier.apply(-1.0), 0.0);
        assert_eq!(Activation::Rectifier.apply(0.0), 0.0);
        assert_eq!(Activation::Rectifier.apply(2.0), 2.0);
        assert_eq!(Activation::LeakyRectifier { slope: 0.1 }.apply(-1.0), -0.1);
        // Derivative at 0 is the left limit.
        assert_eq!(Activation::Rectifier.deriv(0.0), 0.0);
        assert_eq!(Activation::LeakyRectifier { slope: 0.1 }.deriv(0.0), 0.1);

        // Central differences away from the kink.
        for x0 in [-0.7f64, 0.4, 1.3] {
            let h = 1e-6;
            for act in [Activation::Rectifier, Activation::LeakyRectifier { slope: 0.1 }] {
                let fd = (act.apply(x0 + h) - act.apply(x0 - h)) / (2.0 * h);
                assert!((fd - act.deriv(x0)).abs() < 1e-6);
            }
        }
    }
}
