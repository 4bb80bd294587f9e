//! Complex volumes, channel views and the 1D patch algebra.
//!
//! Axis order is fixed as (ro, pe, spe), row-major with spe fastest; coils
//! and channels sit outside the spatial index. Readout is never sub-sampled,
//! so it stays first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Cplx, Real};

/// Spatial axes of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Ro,
    Pe,
    Spe,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Ro, Axis::Pe, Axis::Spe];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Ro => "ro",
            Axis::Pe => "pe",
            Axis::Spe => "spe",
        }
    }
}

/// Spatial dimensions (n_ro, n_pe, n_spe).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub ro: usize,
    pub pe: usize,
    pub spe: usize,
}

impl Dims {
    pub fn new(ro: usize, pe: usize, spe: usize) -> Self {
        Dims { ro, pe, spe }
    }

    pub fn len(self) -> usize {
        self.ro * self.pe * self.spe
    }

    pub fn axis_len(self, axis: Axis) -> usize {
        match axis {
            Axis::Ro => self.ro,
            Axis::Pe => self.pe,
            Axis::Spe => self.spe,
        }
    }

    pub fn with_axis_len(mut self, axis: Axis, len: usize) -> Self {
        match axis {
            Axis::Ro => self.ro = len,
            Axis::Pe => self.pe = len,
            Axis::Spe => self.spe = len,
        }
        self
    }

    /// Linear offset of (ro, pe, spe) in row-major order.
    pub fn offset(self, ro: usize, pe: usize, spe: usize) -> usize {
        (ro * self.pe + pe) * self.spe + spe
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { len: usize, dims: Dims },
    #[error("all dims must be at least 1, got {0:?}")]
    EmptyDims(Dims),
    #[error("unpadded input: axis {axis} of size {len} is not divisible by patch size {p}")]
    UnpaddedInput { axis: &'static str, len: usize, p: usize },
    #[error("inconsistent patch matrix: {0}")]
    BadPatchMatrix(String),
    #[error("crop of {pad_len} entries does not leave a positive axis of size {len}")]
    CropTooLarge { pad_len: usize, len: usize },
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("volume dims differ: {a:?} vs {b:?}")]
    DimMismatch { a: Dims, b: Dims },
    #[error("coil stack must hold at least one volume")]
    EmptyStack,
}

/// 3D complex-valued image or feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume<T: Real> {
    dims: Dims,
    data: Vec<Cplx<T>>,
}

impl<T: Real> ComplexVolume<T> {
    pub fn new(dims: Dims, data: Vec<Cplx<T>>) -> Result<Self, VolumeError> {
        if dims.ro == 0 || dims.pe == 0 || dims.spe == 0 {
            return Err(VolumeError::EmptyDims(dims));
        }
        if data.len() != dims.len() {
            return Err(VolumeError::LengthMismatch { len: data.len(), dims });
        }
        Ok(ComplexVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        ComplexVolume { dims, data: vec![Cplx::new(T::zero(), T::zero()); dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[Cplx<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Cplx<T>] {
        &mut self.data
    }

    pub fn at(&self, ro: usize, pe: usize, spe: usize) -> Cplx<T> {
        self.data[self.dims.offset(ro, pe, spe)]
    }

    pub fn at_mut(&mut self, ro: usize, pe: usize, spe: usize) -> &mut Cplx<T> {
        &mut self.data[self.dims.offset(ro, pe, spe)]
    }

    pub fn norm_l2(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum::<T>().sqrt()
    }

    /// Voxelwise magnitudes.
    pub fn magnitude(&self) -> RealVolume<T> {
        RealVolume { dims: self.dims, data: self.data.iter().map(|c| c.norm()).collect() }
    }

    /// Splits the complex field into a two-channel real view
    /// (channel 0 real, channel 1 imaginary).
    pub fn to_channels(&self) -> ChannelVolume<T> {
        let n = self.dims.len();
        let mut data = Vec::with_capacity(2 * n);
        data.extend(self.data.iter().map(|c| c.re));
        data.extend(self.data.iter().map(|c| c.im));
        ChannelVolume { n_channels: 2, dims: self.dims, data }
    }

    pub fn cast<U: Real>(&self) -> ComplexVolume<U> {
        ComplexVolume {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|c| Cplx::new(U::of(c.re.as_f64()), U::of(c.im.as_f64())))
                .collect(),
        }
    }
}

/// Real-valued 3D volume (magnitude images, PSF exports).
#[derive(Clone, Debug, PartialEq)]
pub struct RealVolume<T: Real> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> RealVolume<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self, VolumeError> {
        if dims.ro == 0 || dims.pe == 0 || dims.spe == 0 {
            return Err(VolumeError::EmptyDims(dims));
        }
        if data.len() != dims.len() {
            return Err(VolumeError::LengthMismatch { len: data.len(), dims });
        }
        Ok(RealVolume { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn at(&self, ro: usize, pe: usize, spe: usize) -> T {
        self.data[self.dims.offset(ro, pe, spe)]
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a.max(b))
    }
}

/// Coil-indexed image stack; all coils share one set of dims.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilImage<T: Real> {
    volumes: Vec<ComplexVolume<T>>,
}

impl<T: Real> MultiCoilImage<T> {
    pub fn new(volumes: Vec<ComplexVolume<T>>) -> Result<Self, VolumeError> {
        let first = volumes.first().ok_or(VolumeError::EmptyStack)?.dims();
        for v in &volumes {
            if v.dims() != first {
                return Err(VolumeError::DimMismatch { a: first, b: v.dims() });
            }
        }
        Ok(MultiCoilImage { volumes })
    }

    pub fn n_coils(&self) -> usize {
        self.volumes.len()
    }

    pub fn dims(&self) -> Dims {
        self.volumes[0].dims()
    }

    pub fn coil(&self, c: usize) -> &ComplexVolume<T> {
        &self.volumes[c]
    }

    pub fn coils(&self) -> &[ComplexVolume<T>] {
        &self.volumes
    }

    pub fn into_coils(self) -> Vec<ComplexVolume<T>> {
        self.volumes
    }
}

/// Multi-channel real volume, channel-major over the spatial layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVolume<T: Real> {
    n_channels: usize,
    dims: Dims,
    data: Vec<T>,
}

/// Geometry of the 1D lines a volume decomposes into along one axis.
///
/// Lines are enumerated lexicographically over the two remaining axes in
/// (ro, pe, spe) order, which also fixes the patch-column ordering.
#[derive(Clone, Copy, Debug)]
struct LineDecomp {
    n_a: usize,
    stride_a: usize,
    n_b: usize,
    stride_b: usize,
    len: usize,
    stride: usize,
}

fn line_decomp(dims: Dims, axis: Axis) -> LineDecomp {
    let stride_spe = 1;
    let stride_pe = dims.spe;
    let stride_ro = dims.pe * dims.spe;
    match axis {
        Axis::Ro => LineDecomp {
            n_a: dims.pe,
            stride_a: stride_pe,
            n_b: dims.spe,
            stride_b: stride_spe,
            len: dims.ro,
            stride: stride_ro,
        },
        Axis::Pe => LineDecomp {
            n_a: dims.ro,
            stride_a: stride_ro,
            n_b: dims.spe,
            stride_b: stride_spe,
            len: dims.pe,
            stride: stride_pe,
        },
        Axis::Spe => LineDecomp {
            n_a: dims.ro,
            stride_a: stride_ro,
            n_b: dims.pe,
            stride_b: stride_pe,
            len: dims.spe,
            stride: stride_spe,
        },
    }
}

impl<T: Real> ChannelVolume<T> {
    pub fn new(n_channels: usize, dims: Dims, data: Vec<T>) -> Result<Self, VolumeError> {
        if dims.ro == 0 || dims.pe == 0 || dims.spe == 0 {
            return Err(VolumeError::EmptyDims(dims));
        }
        if n_channels == 0 || data.len() != n_channels * dims.len() {
            return Err(VolumeError::LengthMismatch { len: data.len(), dims });
        }
        Ok(ChannelVolume { n_channels, dims, data })
    }

    pub fn zeros(n_channels: usize, dims: Dims) -> Self {
        ChannelVolume { n_channels, dims, data: vec![T::zero(); n_channels * dims.len()] }
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, ch: usize, ro: usize, pe: usize, spe: usize) -> T {
        self.data[ch * self.dims.len() + self.dims.offset(ro, pe, spe)]
    }

    /// Reassembles a complex volume from a two-channel real view.
    pub fn to_complex(&self) -> Result<ComplexVolume<T>, VolumeError> {
        if self.n_channels != 2 {
            return Err(VolumeError::ChannelCount { expected: 2, got: self.n_channels });
        }
        let n = self.dims.len();
        let data = (0..n).map(|i| Cplx::new(self.data[i], self.data[n + i])).collect();
        Ok(ComplexVolume { dims: self.dims, data })
    }

    /// Vectorizes non-overlapping 1D patches of length `p_spatial` along
    /// `axis` into matrix columns; channels of one patch are concatenated
    /// channel-major, so rows = n_channels * p_spatial.
    pub fn patch(&self, axis: Axis, p_spatial: usize) -> Result<PatchMatrix<T>, VolumeError> {
        let n = self.dims.axis_len(axis);
        if p_spatial == 0 || n % p_spatial != 0 {
            return Err(VolumeError::UnpaddedInput { axis: axis.name(), len: n, p: p_spatial });
        }
        let ld = line_decomp(self.dims, axis);
        let n_patches = ld.len / p_spatial;
        let p = self.n_channels * p_spatial;
        let q = self.dims.len() / p_spatial;
        let spatial = self.dims.len();
        let mut data = vec![T::zero(); p * q];
        for ch in 0..self.n_channels {
            let src = &self.data[ch * spatial..(ch + 1) * spatial];
            for a in 0..ld.n_a {
                for b in 0..ld.n_b {
                    let line_index = a * ld.n_b + b;
                    let start = a * ld.stride_a + b * ld.stride_b;
                    for patch in 0..n_patches {
                        let q_idx = line_index * n_patches + patch;
                        let col = q_idx * p + ch * p_spatial;
                        for j in 0..p_spatial {
                            data[col + j] = src[start + (patch * p_spatial + j) * ld.stride];
                        }
                    }
                }
            }
        }
        Ok(PatchMatrix {
            p,
            q,
            data,
            origin: PatchOrigin { dims: self.dims, axis, p_spatial },
        })
    }

    /// Pads the axis up to the next multiple of `p_spatial` by circularly
    /// replicating the start of each line; returns the pad length.
    pub fn circular_pad(&self, axis: Axis, p_spatial: usize) -> (ChannelVolume<T>, usize) {
        let n = self.dims.axis_len(axis);
        let pad_len = (p_spatial - n % p_spatial) % p_spatial;
        if pad_len == 0 {
            return (self.clone(), 0);
        }
        let out_dims = self.dims.with_axis_len(axis, n + pad_len);
        let mut out = ChannelVolume::zeros(self.n_channels, out_dims);
        let src_ld = line_decomp(self.dims, axis);
        let dst_ld = line_decomp(out_dims, axis);
        let (src_sp, dst_sp) = (self.dims.len(), out_dims.len());
        for ch in 0..self.n_channels {
            let src = &self.data[ch * src_sp..(ch + 1) * src_sp];
            let dst = &mut out.data[ch * dst_sp..(ch + 1) * dst_sp];
            for a in 0..src_ld.n_a {
                for b in 0..src_ld.n_b {
                    let s0 = a * src_ld.stride_a + b * src_ld.stride_b;
                    let d0 = a * dst_ld.stride_a + b * dst_ld.stride_b;
                    for i in 0..n {
                        dst[d0 + i * dst_ld.stride] = src[s0 + i * src_ld.stride];
                    }
                    for j in 0..pad_len {
                        dst[d0 + (n + j) * dst_ld.stride] = src[s0 + (j % n) * src_ld.stride];
                    }
                }
            }
        }
        (out, pad_len)
    }

    /// Adjoint of [`circular_pad`](Self::circular_pad): folds the gradient of
    /// every padded copy back onto its source entry.
    pub fn circular_pad_backward(&self, axis: Axis, pad_len: usize) -> ChannelVolume<T> {
        let padded = self.dims.axis_len(axis);
        let n = padded - pad_len;
        if pad_len == 0 {
            return self.clone();
        }
        let out_dims = self.dims.with_axis_len(axis, n);
        let mut out = ChannelVolume::zeros(self.n_channels, out_dims);
        let src_ld = line_decomp(self.dims, axis);
        let dst_ld = line_decomp(out_dims, axis);
        let (src_sp, dst_sp) = (self.dims.len(), out_dims.len());
        for ch in 0..self.n_channels {
            let src = &self.data[ch * src_sp..(ch + 1) * src_sp];
            let dst = &mut out.data[ch * dst_sp..(ch + 1) * dst_sp];
            for a in 0..src_ld.n_a {
                for b in 0..src_ld.n_b {
                    let s0 = a * src_ld.stride_a + b * src_ld.stride_b;
                    let d0 = a * dst_ld.stride_a + b * dst_ld.stride_b;
                    for i in 0..n {
                        dst[d0 + i * dst_ld.stride] = src[s0 + i * src_ld.stride];
                    }
                    for j in 0..pad_len {
                        let t = d0 + (j % n) * dst_ld.stride;
                        dst[t] = dst[t] + src[s0 + (n + j) * src_ld.stride];
                    }
                }
            }
        }
        out
    }

    /// Removes the last `pad_len` entries along `axis`.
    pub fn crop_pad(&self, axis: Axis, pad_len: usize) -> Result<ChannelVolume<T>, VolumeError> {
        let n = self.dims.axis_len(axis);
        if pad_len >= n {
            return Err(VolumeError::CropTooLarge { pad_len, len: n });
        }
        if pad_len == 0 {
            return Ok(self.clone());
        }
        let out_dims = self.dims.with_axis_len(axis, n - pad_len);
        let mut out = ChannelVolume::zeros(self.n_channels, out_dims);
        let src_ld = line_decomp(self.dims, axis);
        let dst_ld = line_decomp(out_dims, axis);
        let (src_sp, dst_sp) = (self.dims.len(), out_dims.len());
        for ch in 0..self.n_channels {
            let src = &self.data[ch * src_sp..(ch + 1) * src_sp];
            let dst = &mut out.data[ch * dst_sp..(ch + 1) * dst_sp];
            for a in 0..src_ld.n_a {
                for b in 0..src_ld.n_b {
                    let s0 = a * src_ld.stride_a + b * src_ld.stride_b;
                    let d0 = a * dst_ld.stride_a + b * dst_ld.stride_b;
                    for i in 0..n - pad_len {
                        dst[d0 + i * dst_ld.stride] = src[s0 + i * src_ld.stride];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`crop_pad`](Self::crop_pad): zero-extends the gradient
    /// into the removed pad region.
    pub fn crop_pad_backward(&self, axis: Axis, pad_len: usize) -> ChannelVolume<T> {
        if pad_len == 0 {
            return self.clone();
        }
        let n = self.dims.axis_len(axis);
        let out_dims = self.dims.with_axis_len(axis, n + pad_len);
        let mut out = ChannelVolume::zeros(self.n_channels, out_dims);
        let src_ld = line_decomp(self.dims, axis);
        let dst_ld = line_decomp(out_dims, axis);
        let (src_sp, dst_sp) = (self.dims.len(), out_dims.len());
        for ch in 0..self.n_channels {
            let src = &self.data[ch * src_sp..(ch + 1) * src_sp];
            let dst = &mut out.data[ch * dst_sp..(ch + 1) * dst_sp];
            for a in 0..src_ld.n_a {
                for b in 0..src_ld.n_b {
                    let s0 = a * src_ld.stride_a + b * src_ld.stride_b;
                    let d0 = a * dst_ld.stride_a + b * dst_ld.stride_b;
                    for i in 0..n {
                        dst[d0 + i * dst_ld.stride] = src[s0 + i * src_ld.stride];
                    }
                }
            }
        }
        out
    }

    /// Circular shift along `axis`: out[i] = in[(i - s) mod N], so content
    /// moves toward increasing index for s > 0. All channels shift together.
    pub fn circular_shift(&self, axis: Axis, s: isize) -> ChannelVolume<T> {
        let n = self.dims.axis_len(axis) as isize;
        let s = s.rem_euclid(n) as usize;
        if s == 0 {
            return self.clone();
        }
        let n = n as usize;
        let mut out = ChannelVolume::zeros(self.n_channels, self.dims);
        let ld = line_decomp(self.dims, axis);
        let spatial = self.dims.len();
        for ch in 0..self.n_channels {
            let src = &self.data[ch * spatial..(ch + 1) * spatial];
            let dst = &mut out.data[ch * spatial..(ch + 1) * spatial];
            for a in 0..ld.n_a {
                for b in 0..ld.n_b {
                    let base = a * ld.stride_a + b * ld.stride_b;
                    for i in 0..n {
                        let j = (i + n - s) % n;
                        dst[base + i * ld.stride] = src[base + j * ld.stride];
                    }
                }
            }
        }
        out
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> ChannelVolume<T> {
        ChannelVolume {
            n_channels: self.n_channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ChannelVolume<T>) -> Result<(), VolumeError> {
        if self.dims != other.dims || self.n_channels != other.n_channels {
            return Err(VolumeError::DimMismatch { a: self.dims, b: other.dims });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }
}

/// Where a patch matrix came from, sufficient to invert the vectorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub dims: Dims,
    pub axis: Axis,
    pub p_spatial: usize,
}

/// Column-per-patch matrix produced by [`ChannelVolume::patch`].
///
/// Columns are stored contiguously (column-major), which is also the layout
/// the FC blocks multiply against.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix<T: Real> {
    p: usize,
    q: usize,
    data: Vec<T>,
    origin: PatchOrigin,
}

impl<T: Real> PatchMatrix<T> {
    pub fn from_parts(
        p: usize,
        q: usize,
        data: Vec<T>,
        origin: PatchOrigin,
    ) -> Result<Self, VolumeError> {
        if data.len() != p * q {
            return Err(VolumeError::BadPatchMatrix(format!(
                "data length {} != p*q = {}",
                data.len(),
                p * q
            )));
        }
        Ok(PatchMatrix { p, q, data, origin })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn origin(&self) -> PatchOrigin {
        self.origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, q_idx: usize) -> &[T] {
        &self.data[q_idx * self.p..(q_idx + 1) * self.p]
    }

    /// Inverse of [`ChannelVolume::patch`]. The channel count is recovered
    /// from the row count, so a block that widened the patch vector unpatches
    /// into more channels.
    pub fn unpatch(&self) -> Result<ChannelVolume<T>, VolumeError> {
        let PatchOrigin { dims, axis, p_spatial } = self.origin;
        if self.p % p_spatial != 0 {
            return Err(VolumeError::BadPatchMatrix(format!(
                "row count {} not divisible by patch length {}",
                self.p, p_spatial
            )));
        }
        let n_channels = self.p / p_spatial;
        let n = dims.axis_len(axis);
        if n % p_spatial != 0 || self.q != dims.len() / p_spatial {
            return Err(VolumeError::BadPatchMatrix(format!(
                "column count {} inconsistent with origin dims {:?}",
                self.q, dims
            )));
        }
        let ld = line_decomp(dims, axis);
        let n_patches = ld.len / p_spatial;
        let spatial = dims.len();
        let mut out = ChannelVolume::zeros(n_channels, dims);
        for ch in 0..n_channels {
            let dst = &mut out.data[ch * spatial..(ch + 1) * spatial];
            for a in 0..ld.n_a {
                for b in 0..ld.n_b {
                    let line_index = a * ld.n_b + b;
                    let start = a * ld.stride_a + b * ld.stride_b;
                    for patch in 0..n_patches {
                        let col = (line_index * n_patches + patch) * self.p + ch * p_spatial;
                        for j in 0..p_spatial {
                            dst[start + (patch * p_spatial + j) * ld.stride] = self.data[col + j];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
