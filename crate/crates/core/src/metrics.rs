//! SSIM and PSNR on magnitude volumes.
//!
//! SSIM runs volumetrically with a 3D Gaussian window (sigma 1.5, extent
//! 7^3) truncated and renormalized at the borders; the data range L is the
//! maximum of the reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::volume::{Dims, RealVolume};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("volume dims differ: {a:?} vs {b:?}")]
    DimMismatch { a: Dims, b: Dims },
    #[error("undefined data range: reference volume is all zero")]
    UndefinedDataRange,
    #[error("infinite PSNR: images are identical")]
    InfinitePsnr,
}

const WINDOW_RADIUS: usize = 3;
const WINDOW_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut taps = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *t = (-0.5 * (d / WINDOW_SIGMA).powi(2)).exp();
    }
    taps
}

/// Border-truncated, renormalized Gaussian smoothing along every axis.
/// Separability makes this exactly the box-truncated 3D window: the valid
/// region is a box, so the per-voxel normalizer factorizes per axis.
fn smooth(x: &[f64], dims: Dims) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = WINDOW_RADIUS as isize;
    let mut cur = x.to_vec();
    for axis in 0..3 {
        let (n, stride, n_a, stride_a, n_b, stride_b) = match axis {
            0 => (dims.ro, dims.pe * dims.spe, dims.pe, dims.spe, dims.spe, 1),
            1 => (dims.pe, dims.spe, dims.ro, dims.pe * dims.spe, dims.spe, 1),
            _ => (dims.spe, 1, dims.ro, dims.pe * dims.spe, dims.pe, dims.spe),
        };
        let mut next = vec![0.0f64; cur.len()];
        for a in 0..n_a {
            for b in 0..n_b {
                let base = a * stride_a + b * stride_b;
                for i in 0..n {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for (ti, &t) in taps.iter().enumerate() {
                        let j = i as isize + ti as isize - r;
                        if j >= 0 && (j as usize) < n {
                            acc += t * cur[base + j as usize * stride];
                            norm += t;
                        }
                    }
                    next[base + i * stride] = acc / norm;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Mean structural-similarity index over all voxels.
/// Constants C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = max(ref).
pub fn ssim<T: Real>(ref_mag: &RealVolume<T>, test_mag: &RealVolume<T>) -> Result<f64, MetricsError> {
    if ref_mag.dims() != test_mag.dims() {
        return Err(MetricsError::DimMismatch { a: ref_mag.dims(), b: test_mag.dims() });
    }
    let dims = ref_mag.dims();
    let x: Vec<f64> = ref_mag.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = test_mag.data().iter().map(|v| v.as_f64()).collect();
    let l = x.iter().fold(0.0f64, |a, &b| a.max(b));
    if l <= 0.0 {
        return Err(MetricsError::UndefinedDataRange);
    }
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);

    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mu_x = smooth(&x, dims);
    let mu_y = smooth(&y, dims);
    let mu_xx = smooth(&xx, dims);
    let mu_yy = smooth(&yy, dims);
    let mu_xy = smooth(&xy, dims);

    let mut acc = 0.0;
    for i in 0..x.len() {
        let var_x = mu_xx[i] - mu_x[i] * mu_x[i];
        let var_y = mu_yy[i] - mu_y[i] * mu_y[i];
        let cov = mu_xy[i] - mu_x[i] * mu_y[i];
        let num = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * cov + c2);
        let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / x.len() as f64)
}

/// 20 log10( max(ref) / RMSE ). Identical inputs are an error rather than
/// an infinity.
pub fn psnr<T: Real>(ref_mag: &RealVolume<T>, test_mag: &RealVolume<T>) -> Result<f64, MetricsError> {
    if ref_mag.dims() != test_mag.dims() {
        return Err(MetricsError::DimMismatch { a: ref_mag.dims(), b: test_mag.dims() });
    }
    let l = ref_mag.data().iter().fold(0.0f64, |a, &b| a.max(b.as_f64()));
    if l <= 0.0 {
        return Err(MetricsError::UndefinedDataRange);
    }
    let mse: f64 = ref_mag
        .data()
        .iter()
        .zip(test_mag.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / ref_mag.data().len() as f64;
    if mse == 0.0 {
        return Err(MetricsError::InfinitePsnr);
    }
    Ok(20.0 * (l / mse.sqrt()).log10())
}

/// Metrics for one reconstructed volume; PSNR is None when the volumes are
/// identical (infinite PSNR, flagged rather than faked).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub ssim: f64,
    pub psnr_db: Option<f64>,
}

/// Aggregated evaluation output, including the zero-filled baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub mean_psnr_db: f64,
    pub std_psnr_db: f64,
    pub baseline: Option<Box<MetricReport>>,
}

impl MetricReport {
    pub fn from_volumes(per_volume: Vec<VolumeMetrics>) -> Self {
        let n = per_volume.len().max(1) as f64;
        let mean_ssim = per_volume.iter().map(|m| m.ssim).sum::<f64>() / n;
        let std_ssim = (per_volume.iter().map(|m| (m.ssim - mean_ssim).powi(2)).sum::<f64>() / n).sqrt();
        let psnrs: Vec<f64> = per_volume.iter().filter_map(|m| m.psnr_db).collect();
        let np = psnrs.len().max(1) as f64;
        let mean_psnr_db = psnrs.iter().sum::<f64>() / np;
        let std_psnr_db = (psnrs.iter().map(|p| (p - mean_psnr_db).powi(2)).sum::<f64>() / np).sqrt();
        MetricReport { per_volume, mean_ssim, std_ssim, mean_psnr_db, std_psnr_db, baseline: None }
    }
}
