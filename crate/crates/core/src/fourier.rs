//! Centered unitary Fourier transforms, sampling masks and SENSE encoding.
//!
//! The DFT is normalized by 1/sqrt(N) in both directions so the adjoint of
//! the forward transform is exactly its inverse, and k-space is kept centered
//! with DC at floor(N/2) to match how the masks are laid out.

use rayon::prelude::*;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::scalar::{Cplx, Real};
use crate::volume::{Axis, ComplexVolume, Dims, VolumeError};

#[derive(Debug, Error)]
pub enum FourierError {
    #[error("mask dims ({m_pe}, {m_spe}) do not match k-space ({k_pe}, {k_spe})")]
    MaskDimMismatch { m_pe: usize, m_spe: usize, k_pe: usize, k_spe: usize },
    #[error("volume dims differ: {a:?} vs {b:?}")]
    DimMismatch { a: Dims, b: Dims },
    #[error("coil counts differ: {a} vs {b}")]
    CoilMismatch { a: usize, b: usize },
    #[error("sampling mask must contain at least one sampled location")]
    EmptyMask,
    #[error("sampling mask values must be 0 or 1, got {0}")]
    MaskValue(u8),
    #[error("sensitivity maps are not normalized: sum |s|^2 = {sum} at voxel {voxel}")]
    NotNormalized { voxel: usize, sum: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Binary sampling pattern over the PE x SPE plane, broadcast along RO.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    n_pe: usize,
    n_spe: usize,
    bits: Vec<u8>,
}

impl SamplingMask {
    pub fn new(n_pe: usize, n_spe: usize, bits: Vec<u8>) -> Result<Self, FourierError> {
        assert_eq!(bits.len(), n_pe * n_spe, "mask bit count must match dims");
        for &b in &bits {
            if b > 1 {
                return Err(FourierError::MaskValue(b));
            }
        }
        if !bits.iter().any(|&b| b == 1) {
            return Err(FourierError::EmptyMask);
        }
        Ok(SamplingMask { n_pe, n_spe, bits })
    }

    pub fn full(n_pe: usize, n_spe: usize) -> Self {
        SamplingMask { n_pe, n_spe, bits: vec![1; n_pe * n_spe] }
    }

    /// All-unsampled pattern. Generated and serialized masks always carry at
    /// least one sample; this degenerate pattern exists to exercise the
    /// I - M = I limit of the data-fidelity unit.
    pub fn empty(n_pe: usize, n_spe: usize) -> Self {
        SamplingMask { n_pe, n_spe, bits: vec![0; n_pe * n_spe] }
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn n_spe(&self) -> usize {
        self.n_spe
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_sampled(&self, pe: usize, spe: usize) -> bool {
        self.bits[pe * self.n_spe + spe] == 1
    }

    pub fn n_sampled(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.n_sampled() as f64 / (self.n_pe * self.n_spe) as f64
    }

    fn check_dims(&self, dims: Dims) -> Result<(), FourierError> {
        if self.n_pe != dims.pe || self.n_spe != dims.spe {
            return Err(FourierError::MaskDimMismatch {
                m_pe: self.n_pe,
                m_spe: self.n_spe,
                k_pe: dims.pe,
                k_spe: dims.spe,
            });
        }
        Ok(())
    }
}

/// Coil-indexed complex sensitivity maps, voxelwise normalized so that
/// sum_c |s_c|^2 == 1 everywhere.
#[derive(Clone, Debug)]
pub struct CoilSensitivities<T: Real> {
    maps: Vec<ComplexVolume<T>>,
}

impl<T: Real> CoilSensitivities<T> {
    /// Wraps already-normalized maps, verifying the normalization to 1e-6.
    pub fn new(maps: Vec<ComplexVolume<T>>) -> Result<Self, FourierError> {
        let first = maps.first().ok_or(VolumeError::EmptyStack)?.dims();
        for m in &maps {
            if m.dims() != first {
                return Err(VolumeError::DimMismatch { a: first, b: m.dims() }.into());
            }
        }
        for v in 0..first.len() {
            let sum: f64 = maps.iter().map(|m| m.data()[v].norm_sqr().as_f64()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(FourierError::NotNormalized { voxel: v, sum });
            }
        }
        Ok(CoilSensitivities { maps })
    }

    /// Normalizes arbitrary nonzero maps voxelwise.
    pub fn from_unnormalized(maps: Vec<ComplexVolume<T>>) -> Result<Self, FourierError> {
        let first = maps.first().ok_or(VolumeError::EmptyStack)?.dims();
        for m in &maps {
            if m.dims() != first {
                return Err(VolumeError::DimMismatch { a: first, b: m.dims() }.into());
            }
        }
        let mut maps = maps;
        for v in 0..first.len() {
            let sum: T = maps.iter().map(|m| m.data()[v].norm_sqr()).sum();
            let scale = T::one() / sum.sqrt();
            for m in maps.iter_mut() {
                m.data_mut()[v] = m.data()[v].scale(scale);
            }
        }
        Ok(CoilSensitivities { maps })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn dims(&self) -> Dims {
        self.maps[0].dims()
    }

    pub fn map(&self, c: usize) -> &ComplexVolume<T> {
        &self.maps[c]
    }

    pub fn maps(&self) -> &[ComplexVolume<T>] {
        &self.maps
    }

    pub fn cast<U: Real>(&self) -> CoilSensitivities<U> {
        CoilSensitivities { maps: self.maps.iter().map(|m| m.cast()).collect() }
    }
}

/// Coil-indexed complex k-space grids.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilKSpace<T: Real> {
    grids: Vec<ComplexVolume<T>>,
}

impl<T: Real> MultiCoilKSpace<T> {
    pub fn new(grids: Vec<ComplexVolume<T>>) -> Result<Self, FourierError> {
        let first = grids.first().ok_or(VolumeError::EmptyStack)?.dims();
        for g in &grids {
            if g.dims() != first {
                return Err(VolumeError::DimMismatch { a: first, b: g.dims() }.into());
            }
        }
        Ok(MultiCoilKSpace { grids })
    }

    pub fn n_coils(&self) -> usize {
        self.grids.len()
    }

    pub fn dims(&self) -> Dims {
        self.grids[0].dims()
    }

    pub fn coil(&self, c: usize) -> &ComplexVolume<T> {
        &self.grids[c]
    }

    pub fn coils(&self) -> &[ComplexVolume<T>] {
        &self.grids
    }

    pub fn cast<U: Real>(&self) -> MultiCoilKSpace<U> {
        MultiCoilKSpace { grids: self.grids.iter().map(|g| g.cast()).collect() }
    }
}

/// One centered unitary pass along `axis`.
///
/// Layout: buf[i] = line[(i + N/2) mod N] centers the spatial origin at
/// index 0 before the DFT, and the inverse rotation re-centers k afterwards.
fn transform_axis<T: Real>(x: &mut ComplexVolume<T>, axis: Axis, forward: bool) {
    let dims = x.dims();
    let n = dims.axis_len(axis);
    let mut planner = FftPlanner::<T>::new();
    let fft = if forward { planner.plan_fft_forward(n) } else { planner.plan_fft_inverse(n) };
    let scale = T::one() / T::of((n as f64).sqrt());
    let half = n / 2;

    // Line geometry along the axis.
    let (n_a, stride_a, n_b, stride_b, stride) = match axis {
        Axis::Ro => (dims.pe, dims.spe, dims.spe, 1, dims.pe * dims.spe),
        Axis::Pe => (dims.ro, dims.pe * dims.spe, dims.spe, 1, dims.spe),
        Axis::Spe => (dims.ro, dims.pe * dims.spe, dims.pe, dims.spe, 1),
    };

    let mut scratch = vec![Cplx::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut buf = vec![Cplx::new(T::zero(), T::zero()); n];
    let data = x.data_mut();
    for a in 0..n_a {
        for b in 0..n_b {
            let base = a * stride_a + b * stride_b;
            // ifftshift into the work buffer.
            for i in 0..n {
                buf[i] = data[base + ((i + half) % n) * stride];
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            // fftshift + unitary scaling back into place.
            for i in 0..n {
                data[base + i * stride] = buf[(i + n - half) % n].scale(scale);
            }
        }
    }
}

/// Centered unitary DFT along the given axes (DC lands at floor(N/2)).
pub fn fft_centered<T: Real>(x: &ComplexVolume<T>, axes: &[Axis]) -> ComplexVolume<T> {
    let mut out = x.clone();
    for &axis in axes {
        transform_axis(&mut out, axis, true);
    }
    out
}

/// Exact inverse and adjoint of [`fft_centered`].
pub fn ifft_centered<T: Real>(x: &ComplexVolume<T>, axes: &[Axis]) -> ComplexVolume<T> {
    let mut out = x.clone();
    for &axis in axes {
        transform_axis(&mut out, axis, false);
    }
    out
}

fn masked_volume<T: Real>(
    v: &ComplexVolume<T>,
    m: &SamplingMask,
    keep_sampled: bool,
) -> ComplexVolume<T> {
    let dims = v.dims();
    let mut out = ComplexVolume::zeros(dims);
    let zero = Cplx::new(T::zero(), T::zero());
    for ro in 0..dims.ro {
        for pe in 0..dims.pe {
            for spe in 0..dims.spe {
                let keep = m.is_sampled(pe, spe) == keep_sampled;
                let idx = dims.offset(ro, pe, spe);
                out.data_mut()[idx] = if keep { v.data()[idx] } else { zero };
            }
        }
    }
    out
}

/// Zeroes every unsampled k-space location (all coils, all RO indices).
pub fn apply_mask<T: Real>(
    k: &MultiCoilKSpace<T>,
    m: &SamplingMask,
) -> Result<MultiCoilKSpace<T>, FourierError> {
    m.check_dims(k.dims())?;
    Ok(MultiCoilKSpace { grids: k.grids.iter().map(|g| masked_volume(g, m, true)).collect() })
}

/// Zeroes every sampled k-space location (the I - M projection).
pub fn apply_mask_complement<T: Real>(
    k: &MultiCoilKSpace<T>,
    m: &SamplingMask,
) -> Result<MultiCoilKSpace<T>, FourierError> {
    m.check_dims(k.dims())?;
    Ok(MultiCoilKSpace { grids: k.grids.iter().map(|g| masked_volume(g, m, false)).collect() })
}

/// Single-volume mask application, used on per-coil grids.
pub fn apply_mask_volume<T: Real>(
    v: &ComplexVolume<T>,
    m: &SamplingMask,
    complement: bool,
) -> Result<ComplexVolume<T>, FourierError> {
    m.check_dims(v.dims())?;
    Ok(masked_volume(v, m, !complement))
}

fn mul_pointwise<T: Real>(a: &ComplexVolume<T>, b: &ComplexVolume<T>) -> ComplexVolume<T> {
    let mut out = a.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * s;
    }
    out
}

/// SENSE forward model: per coil c, M F (s_c * x).
pub fn sense_forward<T: Real>(
    x: &ComplexVolume<T>,
    s: &CoilSensitivities<T>,
    m: &SamplingMask,
) -> Result<MultiCoilKSpace<T>, FourierError> {
    if x.dims() != s.dims() {
        return Err(FourierError::DimMismatch { a: x.dims(), b: s.dims() });
    }
    m.check_dims(x.dims())?;
    let grids: Vec<_> = s
        .maps
        .par_iter()
        .map(|sc| masked_volume(&fft_centered(&mul_pointwise(x, sc), &Axis::ALL), m, true))
        .collect();
    Ok(MultiCoilKSpace { grids })
}

/// SENSE adjoint: sum_c conj(s_c) * F^H (M y_c). Coils are summed in coil
/// order so the result does not depend on scheduling.
pub fn sense_adjoint<T: Real>(
    y: &MultiCoilKSpace<T>,
    s: &CoilSensitivities<T>,
    m: &SamplingMask,
) -> Result<ComplexVolume<T>, FourierError> {
    if y.dims() != s.dims() {
        return Err(FourierError::DimMismatch { a: y.dims(), b: s.dims() });
    }
    if y.n_coils() != s.n_coils() {
        return Err(FourierError::CoilMismatch { a: y.n_coils(), b: s.n_coils() });
    }
    m.check_dims(y.dims())?;
    let per_coil: Vec<ComplexVolume<T>> = y
        .grids
        .par_iter()
        .zip(s.maps.par_iter())
        .map(|(yc, sc)| {
            let img = ifft_centered(&masked_volume(yc, m, true), &Axis::ALL);
            let mut out = img;
            for (o, &sv) in out.data_mut().iter_mut().zip(sc.data()) {
                *o = *o * sv.conj();
            }
            out
        })
        .collect();
    let mut acc = ComplexVolume::zeros(y.dims());
    for v in &per_coil {
        for (a, &b) in acc.data_mut().iter_mut().zip(v.data()) {
            *a = *a + b;
        }
    }
    Ok(acc)
}

/// Image-domain convolution kernel equivalent to sampling with `m`.
///
/// This is the plain inverse DFT (1/N normalization) of the mask indicator
/// broadcast along RO, placed with zero lag at the volume center: circular
/// convolution of an image with this kernel reproduces its zero-filled
/// reconstruction exactly. The center peak equals the sampled fraction.
pub fn psf_of_mask<T: Real>(m: &SamplingMask, n_ro: usize) -> ComplexVolume<T> {
    let dims = Dims::new(n_ro.max(1), m.n_pe, m.n_spe);
    let mut indicator = ComplexVolume::zeros(dims);
    for ro in 0..dims.ro {
        for pe in 0..dims.pe {
            for spe in 0..dims.spe {
                if m.is_sampled(pe, spe) {
                    *indicator.at_mut(ro, pe, spe) = Cplx::new(T::one(), T::zero());
                }
            }
        }
    }
    let mut kernel = ifft_centered(&indicator, &Axis::ALL);
    let scale = T::one() / T::of((dims.len() as f64).sqrt());
    for v in kernel.data_mut() {
        *v = v.scale(scale);
    }
    kernel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_volume(rng: &mut StdRng, dims: Dims) -> ComplexVolume<f64> {
        let data = (0..dims.len())
            .map(|_| Cplx::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexVolume::new(dims, data).unwrap()
    }

    fn random_mask(rng: &mut StdRng, n_pe: usize, n_spe: usize) -> SamplingMask {
        loop {
            let bits: Vec<u8> = (0..n_pe * n_spe).map(|_| rng.random_range(0..2u8)).collect();
            if bits.iter().any(|&b| b == 1) {
                return SamplingMask::new(n_pe, n_spe, bits).unwrap();
            }
        }
    }

    fn random_sens(rng: &mut StdRng, n_coils: usize, dims: Dims) -> CoilSensitivities<f64> {
        let maps = (0..n_coils)
            .map(|_| {
                let data = (0..dims.len())
                    .map(|_| {
                        Cplx::new(rng.random_range(0.2..1.0), rng.random_range(-0.5..0.5))
                    })
                    .collect();
                ComplexVolume::new(dims, data).unwrap()
            })
            .collect();
        CoilSensitivities::from_unnormalized(maps).unwrap()
    }

    fn rel_err(a: &ComplexVolume<f64>, b: &ComplexVolume<f64>) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den = b.norm_l2().max(1e-300);
        num / den
    }

    fn inner(a: &ComplexVolume<f64>, b: &ComplexVolume<f64>) -> Cplx<f64> {
        a.data().iter().zip(b.data()).map(|(x, y)| x.conj() * y).sum()
    }

    #[test]
    fn centered_delta_transforms_to_flat_spectrum() {
        for n in [4usize, 5, 8, 9] {
            let dims = Dims::new(n, 1, 1);
            let mut x = ComplexVolume::<f64>::zeros(dims);
            *x.at_mut(n / 2, 0, 0) = Cplx::new(1.0, 0.0);
            let k = fft_centered(&x, &[Axis::Ro]);
            let expect = 1.0 / (n as f64).sqrt();
            for v in k.data() {
                assert!((v.re - expect).abs() < 1e-12 && v.im.abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn fft_round_trip_and_parseval() {
        let mut rng = StdRng::seed_from_u64(1);
        for dims in [Dims::new(4, 6, 2), Dims::new(5, 3, 7), Dims::new(32, 32, 32)] {
            let x = random_volume(&mut rng, dims);
            let k = fft_centered(&x, &Axis::ALL);
            let back = ifft_centered(&k, &Axis::ALL);
            assert!(rel_err(&back, &x) < 1e-6);
            assert!((k.norm_l2() - x.norm_l2()).abs() / x.norm_l2() < 1e-6);
        }
    }

    #[test]
    fn mask_partition_and_idempotence() {
        let mut rng = StdRng::seed_from_u64(2);
        let dims = Dims::new(4, 6, 5);
        let k = MultiCoilKSpace::new(vec![random_volume(&mut rng, dims); 2]).unwrap();
        let m = random_mask(&mut rng, dims.pe, dims.spe);

        let full = SamplingMask::full(dims.pe, dims.spe);
        assert_eq!(apply_mask(&k, &full).unwrap(), k);
        let comp = apply_mask_complement(&k, &full).unwrap();
        assert!(comp.coils().iter().all(|g| g.data().iter().all(|c| c.norm() == 0.0)));

        let a = apply_mask(&k, &m).unwrap();
        let b = apply_mask_complement(&k, &m).unwrap();
        for c in 0..k.n_coils() {
            for i in 0..dims.len() {
                let sum = a.coil(c).data()[i] + b.coil(c).data()[i];
                assert_eq!(sum, k.coil(c).data()[i]);
            }
        }
        assert_eq!(apply_mask(&a, &m).unwrap(), a);
    }

    #[test]
    fn mask_dim_mismatch_is_rejected() {
        let k = MultiCoilKSpace::new(vec![ComplexVolume::<f64>::zeros(Dims::new(2, 4, 4))]).unwrap();
        let m = SamplingMask::full(3, 4);
        assert!(matches!(apply_mask(&k, &m), Err(FourierError::MaskDimMismatch { .. })));
    }

    #[test]
    fn single_coil_trivial_sense_reduces_to_fft() {
        let mut rng = StdRng::seed_from_u64(3);
        let dims = Dims::new(4, 4, 2);
        let x = random_volume(&mut rng, dims);
        let ones = vec![ComplexVolume::new(
            dims,
            vec![Cplx::new(1.0, 0.0); dims.len()],
        )
        .unwrap()];
        let s = CoilSensitivities::new(ones).unwrap();
        let m = SamplingMask::full(dims.pe, dims.spe);
        let y = sense_forward(&x, &s, &m).unwrap();
        assert!(rel_err(y.coil(0), &fft_centered(&x, &Axis::ALL)) < 1e-12);
        let back = sense_adjoint(&y, &s, &m).unwrap();
        assert!(rel_err(&back, &x) < 1e-10);

        let zero = ComplexVolume::zeros(dims);
        let y0 = sense_forward(&zero, &s, &m).unwrap();
        assert!(y0.coil(0).norm_l2() == 0.0);
    }

    #[test]
    fn sense_adjoint_identity_over_random_draws() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let dims = Dims::new(
                rng.random_range(2..=6usize),
                rng.random_range(2..=6usize),
                rng.random_range(1..=4usize),
            );
            let coils = rng.random_range(1..=4usize);
            let x = random_volume(&mut rng, dims);
            let s = random_sens(&mut rng, coils, dims);
            let m = random_mask(&mut rng, dims.pe, dims.spe);
            let y = MultiCoilKSpace::new(
                (0..coils).map(|_| random_volume(&mut rng, dims)).collect(),
            )
            .unwrap();
            let ax = sense_forward(&x, &s, &m).unwrap();
            let aty = sense_adjoint(&y, &s, &m).unwrap();
            let lhs: Cplx<f64> = (0..coils).map(|c| inner(ax.coil(c), y.coil(c))).sum();
            let rhs = inner(&x, &aty);
            let scale = lhs.norm().max(rhs.norm()).max(1e-12);
            assert!((lhs - rhs).norm() / scale < 1e-6);
        }
    }

    #[test]
    fn normalized_sense_inverts_on_full_mask() {
        let mut rng = StdRng::seed_from_u64(5);
        let dims = Dims::new(6, 5, 4);
        let x = random_volume(&mut rng, dims);
        let s = random_sens(&mut rng, 3, dims);
        let m = SamplingMask::full(dims.pe, dims.spe);
        let back = sense_adjoint(&sense_forward(&x, &s, &m).unwrap(), &s, &m).unwrap();
        assert!(rel_err(&back, &x) < 1e-6);
    }

    /// Applies the operator to standard basis vectors to get its dense matrix.
    fn dense_forward(
        s: &CoilSensitivities<f64>,
        m: &SamplingMask,
        dims: Dims,
    ) -> Vec<Vec<Cplx<f64>>> {
        let n = dims.len();
        let rows = s.n_coils() * n;
        let mut mat = vec![vec![Cplx::new(0.0, 0.0); n]; rows];
        for j in 0..n {
            let mut e = ComplexVolume::zeros(dims);
            e.data_mut()[j] = Cplx::new(1.0, 0.0);
            let y = sense_forward(&e, s, m).unwrap();
            for c in 0..s.n_coils() {
                for i in 0..n {
                    mat[c * n + i][j] = y.coil(c).data()[i];
                }
            }
        }
        mat
    }

    #[test]
    fn dense_oracle_adjoint_is_conjugate_transpose() {
        let mut rng = StdRng::seed_from_u64(6);
        let dims = Dims::new(8, 8, 1);
        let coils = 2;
        let s = random_sens(&mut rng, coils, dims);
        let m = random_mask(&mut rng, dims.pe, dims.spe);
        let fwd = dense_forward(&s, &m, dims);

        // Forward on a random x equals the dense matrix product.
        let x = random_volume(&mut rng, dims);
        let y = sense_forward(&x, &s, &m).unwrap();
        let n = dims.len();
        for (row, mrow) in fwd.iter().enumerate() {
            let want: Cplx<f64> = mrow.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let got = y.coil(row / n).data()[row % n];
            assert!((want - got).norm() < 1e-9);
        }

        // Adjoint matrix column by column equals the conjugate transpose.
        for c in 0..coils {
            for i in 0..n {
                let mut grids = vec![ComplexVolume::zeros(dims); coils];
                grids[c].data_mut()[i] = Cplx::new(1.0, 0.0);
                let e = MultiCoilKSpace::new(grids).unwrap();
                let col = sense_adjoint(&e, &s, &m).unwrap();
                for j in 0..n {
                    let want = fwd[c * n + i][j].conj();
                    assert!((col.data()[j] - want).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn psf_of_full_mask_is_centered_impulse() {
        let m = SamplingMask::full(6, 4);
        let psf = psf_of_mask::<f64>(&m, 5);
        let dims = psf.dims();
        for ro in 0..dims.ro {
            for pe in 0..dims.pe {
                for spe in 0..dims.spe {
                    let v = psf.at(ro, pe, spe);
                    let center = (ro, pe, spe) == (dims.ro / 2, dims.pe / 2, dims.spe / 2);
                    if center {
                        assert!((v.re - 1.0).abs() < 1e-9 && v.im.abs() < 1e-9);
                    } else {
                        assert!(v.norm() < 1e-9);
                    }
                }
            }
        }
    }

    /// Brute-force plain inverse DFT of the broadcast mask indicator.
    fn brute_force_psf(m: &SamplingMask, n_ro: usize) -> ComplexVolume<f64> {
        let dims = Dims::new(n_ro, m.n_pe(), m.n_spe());
        let mut out = ComplexVolume::zeros(dims);
        let (cr, cp, cs) = (dims.ro / 2, dims.pe / 2, dims.spe / 2);
        let tau = std::f64::consts::TAU;
        for ro in 0..dims.ro {
            for pe in 0..dims.pe {
                for spe in 0..dims.spe {
                    let mut acc = Cplx::new(0.0, 0.0);
                    for kr in 0..dims.ro {
                        for kp in 0..dims.pe {
                            for ks in 0..dims.spe {
                                if !m.is_sampled(kp, ks) {
                                    continue;
                                }
                                let ph = tau
                                    * ((ro as f64 - cr as f64) * (kr as f64 - cr as f64)
                                        / dims.ro as f64
                                        + (pe as f64 - cp as f64) * (kp as f64 - cp as f64)
                                            / dims.pe as f64
                                        + (spe as f64 - cs as f64) * (ks as f64 - cs as f64)
                                            / dims.spe as f64);
                                acc += Cplx::new(ph.cos(), ph.sin());
                            }
                        }
                    }
                    *out.at_mut(ro, pe, spe) = acc.scale(1.0 / dims.len() as f64);
                }
            }
        }
        out
    }

    #[test]
    fn psf_of_rate3_comb_has_three_impulses_along_pe() {
        // Uniform rate-3 comb along PE, DC line sampled.
        let n_pe = 12;
        let bits: Vec<u8> = (0..n_pe).map(|pe| u8::from((pe + n_pe / 2) % 3 == 0)).collect();
        let m = SamplingMask::new(n_pe, 1, bits).unwrap();
        let psf = psf_of_mask::<f64>(&m, 4);
        let oracle = brute_force_psf(&m, 4);
        assert!(rel_err(&psf, &oracle) < 1e-9);

        // Exactly 3 nonzero locations along PE in the central RO plane,
        // spaced 12/3 = 4 apart.
        let ro_c = psf.dims().ro / 2;
        let nonzero: Vec<usize> =
            (0..n_pe).filter(|&pe| psf.at(ro_c, pe, 0).norm() > 1e-9).collect();
        assert_eq!(nonzero, vec![2, 6, 10]);
        for &pe in &nonzero {
            assert!((psf.at(ro_c, pe, 0).re - 1.0 / 3.0).abs() < 1e-9);
        }

        // Off the central RO plane the kernel vanishes: RO is fully sampled.
        for ro in 0..psf.dims().ro {
            if ro == ro_c {
                continue;
            }
            for pe in 0..n_pe {
                assert!(psf.at(ro, pe, 0).norm() < 1e-9);
            }
        }
    }
}
