//! Synthetic acquisition: undersampling masks, phantoms, coil sensitivity
//! maps and the forward simulator that ties them together.
//!
//! Every generator is a pure function of its spec and seed; repeated calls
//! agree bitwise, which the training pipeline relies on.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::{sense_forward, CoilSensitivities, FourierError, MultiCoilKSpace, SamplingMask};
use crate::scalar::{Cplx, Real};
use crate::volume::{ComplexVolume, Dims};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("center rectangle ({c_pe}, {c_spe}) exceeds grid ({n_pe}, {n_spe})")]
    CenterTooLarge { c_pe: usize, c_spe: usize, n_pe: usize, n_spe: usize },
    #[error("acceleration must exceed 1, got {0}")]
    BadAcceleration(f64),
    #[error("sub-sampling rate must be at least 1")]
    BadRate,
    #[error(
        "could not calibrate Poisson-disk radius: achieved fraction {achieved:.4}, target {target:.4}"
    )]
    PoissonUnreachable { achieved: f64, target: f64 },
    #[error("phantom dims must be at least (8, 8, 4), got {0:?}")]
    PhantomTooSmall(Dims),
    #[error(transparent)]
    Fourier(#[from] FourierError),
}

/// Mask generator selection, as carried in sidecar metadata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskKind {
    Uniform { rate: u32 },
    PoissonDisk { accel: f64 },
}

/// Full description of a sampling mask to generate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_pe: usize,
    pub n_spe: usize,
    #[serde(flatten)]
    pub kind: MaskKind,
    pub center: (usize, usize),
    pub seed: u64,
}

impl MaskSpec {
    pub fn build(&self) -> Result<SamplingMask, SimError> {
        match self.kind {
            MaskKind::Uniform { rate } => {
                make_uniform_mask(self.n_pe, self.n_spe, rate, self.center, self.seed)
            }
            MaskKind::PoissonDisk { accel } => {
                make_poisson_mask(self.n_pe, self.n_spe, accel, self.center, self.seed)
            }
        }
    }
}

fn center_range(n: usize, c: usize) -> std::ops::Range<usize> {
    let start = (n - c) / 2;
    start..start + c
}

fn check_center(
    n_pe: usize,
    n_spe: usize,
    center: (usize, usize),
) -> Result<(), SimError> {
    if center.0 > n_pe || center.1 > n_spe {
        return Err(SimError::CenterTooLarge {
            c_pe: center.0,
            c_spe: center.1,
            n_pe,
            n_spe,
        });
    }
    Ok(())
}

/// Separable comb: every rate-th line along PE and SPE, phased so the DC
/// line at floor(N/2) is sampled, with the center rectangle forced on.
pub fn make_uniform_mask(
    n_pe: usize,
    n_spe: usize,
    rate: u32,
    center: (usize, usize),
    _seed: u64,
) -> Result<SamplingMask, SimError> {
    if rate < 1 {
        return Err(SimError::BadRate);
    }
    check_center(n_pe, n_spe, center)?;
    let rate = rate as usize;
    let (pe_c, spe_c) = (center_range(n_pe, center.0), center_range(n_spe, center.1));
    let mut bits = vec![0u8; n_pe * n_spe];
    for pe in 0..n_pe {
        let on_pe = (pe + rate - n_pe / 2 % rate) % rate == 0;
        for spe in 0..n_spe {
            let on_spe = (spe + rate - n_spe / 2 % rate) % rate == 0;
            let in_center = pe_c.contains(&pe) && spe_c.contains(&spe);
            if (on_pe && on_spe) || in_center {
                bits[pe * n_spe + spe] = 1;
            }
        }
    }
    Ok(SamplingMask::new(n_pe, n_spe, bits)?)
}

/// Dart-throwing over the grid in a seeded order; a point is kept when no
/// previously kept point outside the center lies within `radius`.
fn throw_darts(
    order: &[(usize, usize)],
    n_spe: usize,
    radius: f64,
    center_bits: &[u8],
) -> Vec<u8> {
    let mut bits = center_bits.to_vec();
    let r2 = radius * radius;
    let cell = radius.max(1.0);
    let mut kept: Vec<(usize, usize)> = Vec::new();
    // Coarse bucket grid so the neighbor scan stays local.
    let nb_pe = |p: usize| (p as f64 / cell) as i64;
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for &(pe, spe) in order {
        let (bp, bs) = (nb_pe(pe), nb_pe(spe));
        let mut ok = true;
        'scan: for dp in -1..=1 {
            for ds in -1..=1 {
                if let Some(ids) = buckets.get(&(bp + dp, bs + ds)) {
                    for &i in ids {
                        let (qp, qs) = kept[i];
                        let d2 = (pe as f64 - qp as f64).powi(2)
                            + (spe as f64 - qs as f64).powi(2);
                        if d2 < r2 {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if ok {
            buckets.entry((bp, bs)).or_default().push(kept.len());
            kept.push((pe, spe));
            bits[pe * n_spe + spe] = 1;
        }
    }
    bits
}

/// Calibration report for a generated Poisson-disk mask.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoissonInfo {
    /// Minimum distance enforced between sampled points outside the center.
    pub radius: f64,
    pub sampled_fraction: f64,
}

/// Poisson-disk mask at the requested acceleration.
///
/// The minimum-distance radius is calibrated by bisection; because the
/// achievable fraction is a step function of the radius on an integer grid,
/// the densest admissible packing at or above the target is then thinned by
/// seeded random removal until the sampled fraction lands within +-5% of
/// 1/accel. The center rectangle is fully sampled and takes no part in the
/// distance constraint.
pub fn make_poisson_mask(
    n_pe: usize,
    n_spe: usize,
    accel: f64,
    center: (usize, usize),
    seed: u64,
) -> Result<SamplingMask, SimError> {
    make_poisson_mask_detailed(n_pe, n_spe, accel, center, seed).map(|(m, _)| m)
}

pub fn make_poisson_mask_detailed(
    n_pe: usize,
    n_spe: usize,
    accel: f64,
    center: (usize, usize),
    seed: u64,
) -> Result<(SamplingMask, PoissonInfo), SimError> {
    if !(accel > 1.0) {
        return Err(SimError::BadAcceleration(accel));
    }
    check_center(n_pe, n_spe, center)?;
    let target = 1.0 / accel;
    let tol = 0.05 * target;
    let total = (n_pe * n_spe) as f64;

    let (pe_c, spe_c) = (center_range(n_pe, center.0), center_range(n_spe, center.1));
    let mut center_bits = vec![0u8; n_pe * n_spe];
    for pe in pe_c.clone() {
        for spe in spe_c.clone() {
            center_bits[pe * n_spe + spe] = 1;
        }
    }
    let n_center: usize = center_bits.iter().map(|&b| b as usize).sum();

    let mut order: Vec<(usize, usize)> = (0..n_pe)
        .flat_map(|pe| (0..n_spe).map(move |spe| (pe, spe)))
        .filter(|&(pe, spe)| !(pe_c.contains(&pe) && spe_c.contains(&spe)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let count = |bits: &[u8]| bits.iter().map(|&b| b as usize).sum::<usize>();

    // Bisect toward the largest radius whose packing still reaches the
    // target fraction; keep the densest such packing.
    let mut lo = 0.0f64;
    let mut hi = ((n_pe * n_pe + n_spe * n_spe) as f64).sqrt();
    let mut keep: (f64, Vec<u8>) = (lo, throw_darts(&order, n_spe, lo, &center_bits));
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let bits = throw_darts(&order, n_spe, mid, &center_bits);
        let f = count(&bits) as f64 / total;
        if f >= target {
            if count(&bits) <= count(&keep.1) {
                keep = (mid, bits);
            }
            lo = mid; // still dense enough, enlarge the radius
        } else {
            hi = mid;
        }
    }
    let (radius, mut bits) = keep;

    // Thin the surplus (never the center) down to the target count.
    let want = ((target * total).round() as usize).max(n_center.max(1));
    let have = count(&bits);
    if have > want {
        let mut removable: Vec<usize> = (0..bits.len())
            .filter(|&i| bits[i] == 1 && center_bits[i] == 0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        removable.shuffle(&mut rng);
        for &i in removable.iter().take(have - want) {
            bits[i] = 0;
        }
    }

    let achieved = count(&bits) as f64 / total;
    if (achieved - target).abs() > tol {
        return Err(SimError::PoissonUnreachable { achieved, target });
    }
    let info = PoissonInfo { radius, sampled_fraction: achieved };
    Ok((SamplingMask::new(n_pe, n_spe, bits)?, info))
}

/// Phantom families available to the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Ellipsoids,
    Blocks,
}

/// Piecewise-smooth synthetic ground truth with magnitude in [0, 1], a
/// smooth low-order phase, and deliberate edges along PE and SPE.
pub fn make_phantom<T: Real>(
    dims: Dims,
    kind: PhantomKind,
    seed: u64,
) -> Result<ComplexVolume<T>, SimError> {
    if dims.ro < 8 || dims.pe < 8 || dims.spe < 4 {
        return Err(SimError::PhantomTooSmall(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let n_shapes = rng.random_range(8..=12usize);
    let mut shapes: Vec<([f64; 3], [f64; 3], f64)> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let center = [
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
        ];
        let semi = [
            rng.random_range(0.10..0.32),
            rng.random_range(0.10..0.32),
            rng.random_range(0.10..0.32),
        ];
        let amp = rng.random_range(0.25..0.65) * if rng.random_bool(0.25) { -1.0 } else { 1.0 };
        shapes.push((center, semi, amp));
    }
    let phase_coef: Vec<f64> = (0..7).map(|_| rng.random_range(-0.6..0.6)).collect();

    let nd = [dims.ro as f64, dims.pe as f64, dims.spe as f64];
    let mut mag = vec![0.0f64; dims.len()];
    let mut idx = 0;
    for ro in 0..dims.ro {
        for pe in 0..dims.pe {
            for spe in 0..dims.spe {
                let u = [(ro as f64 + 0.5) / nd[0], (pe as f64 + 0.5) / nd[1], (spe as f64 + 0.5) / nd[2]];
                let mut v = 0.0;
                for (c, s, a) in &shapes {
                    let inside = match kind {
                        PhantomKind::Ellipsoids => {
                            let d: f64 = (0..3)
                                .map(|i| ((u[i] - c[i]) / s[i]).powi(2))
                                .sum();
                            d <= 1.0
                        }
                        PhantomKind::Blocks => {
                            (0..3).all(|i| (u[i] - c[i]).abs() <= s[i] * 0.8)
                        }
                    };
                    if inside {
                        v += a;
                    }
                }
                mag[idx] = v;
                idx += 1;
            }
        }
    }
    let (lo, hi) = mag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);

    let mut data = Vec::with_capacity(dims.len());
    let mut idx = 0;
    for ro in 0..dims.ro {
        for pe in 0..dims.pe {
            for spe in 0..dims.spe {
                let u = [(ro as f64 + 0.5) / nd[0], (pe as f64 + 0.5) / nd[1], (spe as f64 + 0.5) / nd[2]];
                let m = (mag[idx] - lo) / span;
                let ph = phase_coef[0]
                    + phase_coef[1] * u[0]
                    + phase_coef[2] * u[1]
                    + phase_coef[3] * u[2]
                    + phase_coef[4] * u[0] * u[1]
                    + phase_coef[5] * u[1] * u[2]
                    + phase_coef[6] * u[0] * u[2];
                data.push(Cplx::new(T::of(m * ph.cos()), T::of(m * ph.sin())));
                idx += 1;
            }
        }
    }
    Ok(ComplexVolume::new(dims, data).expect("generated data matches dims"))
}

/// Smooth complex Gaussian-lobe coil profiles centered around the FOV
/// boundary, voxelwise normalized so sum_c |s_c|^2 = 1.
pub fn make_sensitivities<T: Real>(
    dims: Dims,
    n_coils: usize,
    seed: u64,
) -> CoilSensitivities<T> {
    assert!(n_coils >= 1, "need at least one coil");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let nd = [dims.ro as f64, dims.pe as f64, dims.spe as f64];
    let mut maps = Vec::with_capacity(n_coils);
    for c in 0..n_coils {
        let theta = std::f64::consts::TAU * (c as f64 / n_coils as f64)
            + rng.random_range(-0.2..0.2);
        // Lobe centers ring the PE/SPE boundary with mild RO spread.
        let center = [
            0.5 + 0.25 * (theta * 0.5).sin(),
            0.5 + 0.55 * theta.cos(),
            0.5 + 0.55 * theta.sin(),
        ];
        let width = rng.random_range(0.8..1.1);
        let phase0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let phase_grad: Vec<f64> = (0..3).map(|_| rng.random_range(-0.8..0.8)).collect();

        let mut data = Vec::with_capacity(dims.len());
        for ro in 0..dims.ro {
            for pe in 0..dims.pe {
                for spe in 0..dims.spe {
                    let u = [
                        (ro as f64 + 0.5) / nd[0],
                        (pe as f64 + 0.5) / nd[1],
                        (spe as f64 + 0.5) / nd[2],
                    ];
                    let d2: f64 = (0..3).map(|i| ((u[i] - center[i]) / width).powi(2)).sum();
                    let mag = (-0.5 * d2).exp();
                    let ph = phase0
                        + phase_grad[0] * u[0]
                        + phase_grad[1] * u[1]
                        + phase_grad[2] * u[2];
                    data.push(Cplx::new(T::of(mag * ph.cos()), T::of(mag * ph.sin())));
                }
            }
        }
        maps.push(ComplexVolume::new(dims, data).expect("generated data matches dims"));
    }
    CoilSensitivities::from_unnormalized(maps).expect("gaussian lobes are nonzero everywhere")
}

/// One synthetic acquisition: ground truth, coils, mask and measured k-space.
#[derive(Clone, Debug)]
pub struct SimSample<T: Real> {
    pub ground_truth: ComplexVolume<T>,
    pub sens: CoilSensitivities<T>,
    pub mask: SamplingMask,
    pub kspace: MultiCoilKSpace<T>,
    pub seed: u64,
}

/// Spec for [`simulate`]; noise_std is the standard deviation of the
/// circularly symmetric complex noise added on sampled locations only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSpec {
    pub dims: Dims,
    pub n_coils: usize,
    pub phantom: PhantomKind,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn simulate<T: Real>(spec: &SimSpec, mask: &SamplingMask) -> Result<SimSample<T>, SimError> {
    let ground_truth = make_phantom::<T>(spec.dims, spec.phantom, spec.seed)?;
    let sens = make_sensitivities::<T>(spec.dims, spec.n_coils, spec.seed);
    let mut kspace = sense_forward(&ground_truth, &sens, mask)?;

    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(4);
        // Per-component sigma/sqrt(2) makes E|n|^2 = noise_std^2.
        let normal = Normal::new(0.0, spec.noise_std / std::f64::consts::SQRT_2).unwrap();
        let dims = kspace.dims();
        let grids: Vec<ComplexVolume<T>> = kspace
            .coils()
            .iter()
            .map(|g| {
                let mut g = g.clone();
                for ro in 0..dims.ro {
                    for pe in 0..dims.pe {
                        for spe in 0..dims.spe {
                            if mask.is_sampled(pe, spe) {
                                let n = Cplx::new(
                                    T::of(normal.sample(&mut rng)),
                                    T::of(normal.sample(&mut rng)),
                                );
                                let idx = dims.offset(ro, pe, spe);
                                g.data_mut()[idx] = g.data()[idx] + n;
                            }
                        }
                    }
                }
                g
            })
            .collect();
        kspace = MultiCoilKSpace::new(grids)?;
    }

    Ok(SimSample { ground_truth, sens, mask: mask.clone(), kspace, seed: spec.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::sense_adjoint;

    #[test]
    fn uniform_rate1_is_full() {
        let m = make_uniform_mask(6, 4, 1, (0, 0), 0).unwrap();
        assert_eq!(m.n_sampled(), 24);
    }

    #[test]
    fn uniform_rate3_comb_count() {
        let m = make_uniform_mask(12, 12, 3, (0, 0), 0).unwrap();
        assert_eq!(m.n_sampled(), 16);
        // DC line is sampled by construction.
        assert!(m.is_sampled(6, 6));
    }

    #[test]
    fn uniform_center_is_forced() {
        let m = make_uniform_mask(12, 12, 3, (10, 10), 0).unwrap();
        for pe in 1..11 {
            for spe in 1..11 {
                assert!(m.is_sampled(pe, spe));
            }
        }
    }

    #[test]
    fn uniform_center_too_large_is_rejected() {
        assert!(matches!(
            make_uniform_mask(8, 8, 2, (9, 4), 0),
            Err(SimError::CenterTooLarge { .. })
        ));
    }

    #[test]
    fn poisson_mask_is_deterministic_and_calibrated() {
        let a = make_poisson_mask(64, 64, 4.0, (10, 10), 7).unwrap();
        let b = make_poisson_mask(64, 64, 4.0, (10, 10), 7).unwrap();
        assert_eq!(a, b);
        let f = a.sampled_fraction();
        assert!((0.2375..=0.2625).contains(&f), "fraction {f}");
    }

    #[test]
    fn poisson_minimum_distance_holds_outside_center() {
        let n_pe = 48;
        let n_spe = 48;
        let (m, info) = make_poisson_mask_detailed(n_pe, n_spe, 4.0, (10, 10), 3).unwrap();
        // All-pairs check: sampled points outside the center are never
        // closer than the calibrated radius.
        let pe_c = center_range(n_pe, 10);
        let spe_c = center_range(n_spe, 10);
        let pts: Vec<(usize, usize)> = (0..n_pe)
            .flat_map(|pe| (0..n_spe).map(move |spe| (pe, spe)))
            .filter(|&(pe, spe)| m.is_sampled(pe, spe))
            .filter(|&(pe, spe)| !(pe_c.contains(&pe) && spe_c.contains(&spe)))
            .collect();
        let mut min_d2 = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d2 = (pts[i].0 as f64 - pts[j].0 as f64).powi(2)
                    + (pts[i].1 as f64 - pts[j].1 as f64).powi(2);
                min_d2 = min_d2.min(d2);
            }
        }
        assert!(info.radius > 1.0, "calibrated radius {}", info.radius);
        assert!(
            min_d2.sqrt() >= info.radius,
            "min distance {} < radius {}",
            min_d2.sqrt(),
            info.radius
        );
    }

    #[test]
    fn phantom_magnitude_range_and_determinism() {
        let dims = Dims::new(12, 16, 8);
        let a = make_phantom::<f64>(dims, PhantomKind::Ellipsoids, 5).unwrap();
        let b = make_phantom::<f64>(dims, PhantomKind::Ellipsoids, 5).unwrap();
        assert_eq!(a, b);
        for v in a.data() {
            let m = v.norm();
            assert!((0.0..=1.0 + 1e-12).contains(&m));
        }
    }

    #[test]
    fn phantom_has_edge_content() {
        for seed in 0..10u64 {
            for kind in [PhantomKind::Ellipsoids, PhantomKind::Blocks] {
                let dims = Dims::new(16, 16, 8);
                let p = make_phantom::<f64>(dims, kind, seed).unwrap();
                let mag = p.magnitude();
                let mut strong = 0usize;
                for ro in 0..dims.ro - 1 {
                    for pe in 0..dims.pe - 1 {
                        for spe in 0..dims.spe - 1 {
                            let v = mag.at(ro, pe, spe);
                            let g = (mag.at(ro + 1, pe, spe) - v)
                                .abs()
                                .max((mag.at(ro, pe + 1, spe) - v).abs())
                                .max((mag.at(ro, pe, spe + 1) - v).abs());
                            if g > 0.1 {
                                strong += 1;
                            }
                        }
                    }
                }
                let frac = strong as f64 / dims.len() as f64;
                assert!(frac >= 0.05, "edge fraction {frac} seed {seed} kind {kind:?}");
            }
        }
    }

    #[test]
    fn sensitivities_normalized_and_smooth() {
        let dims = Dims::new(32, 32, 32);
        let s = make_sensitivities::<f64>(dims, 4, 9);
        for v in 0..dims.len() {
            let sum: f64 = s.maps().iter().map(|m| m.data()[v].norm_sqr()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        for m in s.maps() {
            let mag = m.magnitude();
            let mut max_step: f64 = 0.0;
            for ro in 0..dims.ro - 1 {
                for pe in 0..dims.pe - 1 {
                    for spe in 0..dims.spe - 1 {
                        let v = mag.at(ro, pe, spe);
                        max_step = max_step
                            .max((mag.at(ro + 1, pe, spe) - v).abs())
                            .max((mag.at(ro, pe + 1, spe) - v).abs())
                            .max((mag.at(ro, pe, spe + 1) - v).abs());
                    }
                }
            }
            assert!(max_step < 0.2, "max step {max_step}");
        }
    }

    #[test]
    fn single_coil_normalizes_to_unit_magnitude() {
        let dims = Dims::new(8, 8, 4);
        let s = make_sensitivities::<f64>(dims, 1, 0);
        for v in s.map(0).data() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn simulate_consistency_and_zero_fill() {
        let dims = Dims::new(8, 12, 6);
        let mask = make_poisson_mask(12, 6, 2.0, (4, 2), 1).unwrap();
        let spec = SimSpec { dims, n_coils: 3, phantom: PhantomKind::Ellipsoids, noise_std: 0.0, seed: 2 };
        let s = simulate::<f64>(&spec, &mask).unwrap();
        let expect = sense_forward(&s.ground_truth, &s.sens, &mask).unwrap();
        for c in 0..3 {
            for (a, b) in s.kspace.coil(c).data().iter().zip(expect.coil(c).data()) {
                assert_eq!(a, b);
            }
        }
        // Unsampled locations are exactly zero.
        let d = s.kspace.dims();
        for c in 0..3 {
            for ro in 0..d.ro {
                for pe in 0..d.pe {
                    for spe in 0..d.spe {
                        if !mask.is_sampled(pe, spe) {
                            assert_eq!(s.kspace.coil(c).at(ro, pe, spe).norm(), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noise_lands_on_sampled_locations_only() {
        let dims = Dims::new(8, 8, 4);
        let mask = make_uniform_mask(8, 4, 2, (2, 2), 0).unwrap();
        let spec = SimSpec { dims, n_coils: 2, phantom: PhantomKind::Blocks, noise_std: 0.05, seed: 3 };
        let s = simulate::<f64>(&spec, &mask).unwrap();
        let clean = sense_forward(&s.ground_truth, &s.sens, &mask).unwrap();
        let d = dims;
        let mut touched = 0usize;
        for c in 0..2 {
            for ro in 0..d.ro {
                for pe in 0..d.pe {
                    for spe in 0..d.spe {
                        let a = s.kspace.coil(c).at(ro, pe, spe);
                        let b = clean.coil(c).at(ro, pe, spe);
                        if mask.is_sampled(pe, spe) {
                            if a != b {
                                touched += 1;
                            }
                        } else {
                            assert_eq!(a.norm(), 0.0);
                        }
                    }
                }
            }
        }
        assert!(touched > 0);
    }

    #[test]
    fn aliasing_shows_displaced_copies_along_pe() {
        // Rate-3 comb along PE replicates a bright blob at spacing N/3.
        let dims = Dims::new(8, 12, 4);
        let n_pe = dims.pe;
        let bits: Vec<u8> = (0..n_pe * dims.spe)
            .map(|i| {
                let pe = i / dims.spe;
                u8::from((pe + n_pe / 2 % 3) % 3 == 0)
            })
            .collect();
        let mask = SamplingMask::new(n_pe, dims.spe, bits).unwrap();
        // Small bright blob at the center, zero phase, single uniform coil.
        let mut gt = ComplexVolume::<f64>::zeros(dims);
        *gt.at_mut(4, 6, 2) = Cplx::new(1.0, 0.0);
        *gt.at_mut(4, 7, 2) = Cplx::new(0.8, 0.0);
        let ones = ComplexVolume::new(dims, vec![Cplx::new(1.0, 0.0); dims.len()]).unwrap();
        let sens = CoilSensitivities::new(vec![ones]).unwrap();
        let y = sense_forward(&gt, &sens, &mask).unwrap();
        let zf = sense_adjoint(&y, &sens, &mask).unwrap();
        // Copies appear at pe = 6, 6+4, 6-4 with 1/3 amplitude each.
        let peak = zf.at(4, 6, 2).norm();
        for pe in [2usize, 10] {
            let copy = zf.at(4, pe, 2).norm();
            assert!((copy - peak).abs() / peak < 1e-9, "copy at pe={pe}");
        }
        assert!((peak - 1.0 / 3.0).abs() < 1e-9);
    }
}
