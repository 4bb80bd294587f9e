//! Desk-scale training and evaluation: complex-MSE loss, adaptive moment
//! estimation, a bitwise-reproducible training loop, and metric reporting.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{
    cascade_backward, cascade_forward, CascadeError, DfMode, Model, Tensor, Variant,
};
use crate::checkpoint::CheckpointError;
use crate::fourier::{sense_adjoint, CoilSensitivities, FourierError, MultiCoilKSpace};
use crate::io::CvolError;
use crate::metrics::{psnr, ssim, MetricReport, MetricsError, VolumeMetrics};
use crate::scalar::{Cplx, Real};
use crate::sim::SimSample;
use crate::volume::{ComplexVolume, RealVolume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training spec invalid: {0}")]
    BadSpec(String),
    #[error("volume dims differ: {a:?} vs {b:?}")]
    DimMismatch { a: crate::volume::Dims, b: crate::volume::Dims },
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Cvol(#[from] CvolError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean squared error over real and imaginary parts jointly, normalized by
/// the number of complex entries; gradient 2 (pred - target) / n.
pub fn loss_mse<T: Real>(
    pred: &ComplexVolume<T>,
    target: &ComplexVolume<T>,
) -> Result<(T, ComplexVolume<T>), TrainError> {
    if pred.dims() != target.dims() {
        return Err(TrainError::DimMismatch { a: pred.dims(), b: target.dims() });
    }
    let n = T::of(pred.data().len() as f64);
    let mut grad = ComplexVolume::zeros(pred.dims());
    let mut acc = T::zero();
    let two_over_n = T::of(2.0) / n;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        acc = acc + d.norm_sqr();
        grad.data_mut()[i] = d.scale(two_over_n);
    }
    Ok((acc / n, grad))
}

/// Adaptive moment estimation with the standard constants.
pub struct Adam<T: Real> {
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, tensors: &[Tensor<T>]) -> Self {
        Adam {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            m: tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
            v: tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, tensors: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let b1t = T::one() - self.beta1.powi(self.t as i32);
        let b2t = T::one() - self.beta2.powi(self.t as i32);
        for ((tensor, grad), (m, v)) in
            tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..tensor.data.len() {
                let g = grad.data[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                tensor.data[i] = tensor.data[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Training request. Precision is chosen by the scalar type [`train`] is
/// instantiated at.
#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate; zero is allowed as the degenerate no-update case.
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainSpec {
    fn validate(&self) -> Result<(), TrainError> {
        if self.steps < 1 {
            return Err(TrainError::BadSpec("steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadSpec("batch size must be at least 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::BadSpec("learning rate must not be negative".into()));
        }
        Ok(())
    }
}

/// In-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    pub samples: Vec<SimSample<T>>,
}

/// JSON manifest listing the CVOL files of each sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ground_truth: PathBuf,
    pub sens: PathBuf,
    pub mask: PathBuf,
    pub kspace: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Manifest {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), TrainError> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

/// Reads every sample in a manifest; relative paths resolve against the
/// manifest's own directory.
pub fn load_dataset<T: Real, P: AsRef<Path>>(manifest_path: P) -> Result<Dataset<T>, TrainError> {
    let manifest = Manifest::load(&manifest_path)?;
    let base = manifest_path.as_ref().parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let ground_truth =
            crate::io::read_volume::<T, _>(resolve(&entry.ground_truth))?.into_complex()?;
        let sens_maps =
            crate::io::read_volume::<T, _>(resolve(&entry.sens))?.into_complex_stack()?;
        let mask = crate::io::read_volume::<T, _>(resolve(&entry.mask))?.into_mask()?;
        let kspace =
            crate::io::read_volume::<T, _>(resolve(&entry.kspace))?.into_complex_stack()?;
        samples.push(SimSample {
            ground_truth,
            sens: CoilSensitivities::new(sens_maps)?,
            mask,
            kspace: MultiCoilKSpace::new(kspace)?,
            seed: entry.seed,
        });
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(Dataset { samples })
}

/// Coil-split models reconstruct a root-sum-of-squares magnitude, so they
/// train against |ground truth| instead of the complex image.
fn target_for<T: Real>(df: DfMode, gt: &ComplexVolume<T>) -> ComplexVolume<T> {
    match df {
        DfMode::MultiCoil => gt.clone(),
        DfMode::SingleCoil => {
            let mut out = ComplexVolume::zeros(gt.dims());
            for (o, &g) in out.data_mut().iter_mut().zip(gt.data()) {
                *o = Cplx::new(g.norm(), T::zero());
            }
            out
        }
    }
}

/// One (step, loss) entry of the training log.
pub type LossPoint = (usize, f64);

pub fn loss_csv(log: &[LossPoint]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in log {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

/// Runs forward/backward/update for the requested number of steps. The
/// whole loop is a pure function of (spec, dataset): the same seed gives a
/// bitwise-identical model and loss log.
pub fn train<T: Real>(
    spec: &TrainSpec,
    dataset: &Dataset<T>,
) -> Result<(Model<T>, Vec<LossPoint>), TrainError> {
    spec.validate()?;
    if dataset.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = Model::<T>::init(spec.variant.expand(), spec.seed)?;
    let mut adam = Adam::new(T::of(spec.learning_rate), &model.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(20);

    let mut log = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut grads = model.zero_grads();
        let mut loss_acc = T::zero();
        for _ in 0..spec.batch_size {
            let sample = &dataset.samples[rng.random_range(0..dataset.samples.len())];
            let (pred, trace) = cascade_forward(&sample.kspace, &sample.sens, &sample.mask, &model)?;
            let target = target_for(model.config.df, &sample.ground_truth);
            let (loss, grad) = loss_mse(&pred, &target)?;
            loss_acc = loss_acc + loss;
            cascade_backward(&model, &sample.sens, &sample.mask, &trace, &grad, &mut grads)?;
        }
        let scale = T::one() / T::of(spec.batch_size as f64);
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v = *v * scale;
            }
        }
        let loss = (loss_acc * scale).as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        adam.step(&mut model.tensors, &grads);
        log.push((step, loss));
    }
    Ok((model, log))
}

fn magnitude_metrics<T: Real>(
    reference: &RealVolume<T>,
    test: &RealVolume<T>,
) -> Result<VolumeMetrics, TrainError> {
    let s = ssim(reference, test)?;
    let p = match psnr(reference, test) {
        Ok(v) => Some(v),
        Err(MetricsError::InfinitePsnr) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(VolumeMetrics { ssim: s, psnr_db: p })
}

/// Reconstructs every sample and reports magnitude-domain SSIM/PSNR against
/// the ground truth, with the zero-filled adjoint as baseline.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset<T>) -> Result<MetricReport, TrainError> {
    let mut recon_metrics = Vec::with_capacity(dataset.samples.len());
    let mut baseline_metrics = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let reference = sample.ground_truth.magnitude();
        let (pred, _) = cascade_forward(&sample.kspace, &sample.sens, &sample.mask, model)?;
        recon_metrics.push(magnitude_metrics(&reference, &pred.magnitude())?);
        let zf = sense_adjoint(&sample.kspace, &sample.sens, &sample.mask)?;
        baseline_metrics.push(magnitude_metrics(&reference, &zf.magnitude())?);
    }
    let mut report = MetricReport::from_volumes(recon_metrics);
    report.baseline = Some(Box::new(MetricReport::from_volumes(baseline_metrics)));
    Ok(report)
}

/// Plain-text table of a metric report.
pub fn metric_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str("volume    ssim      psnr_db\n");
    for (i, m) in report.per_volume.iter().enumerate() {
        let psnr = m.psnr_db.map_or("inf".to_string(), |p| format!("{p:.3}"));
        out.push_str(&format!("{i:<9} {:<9.4} {psnr}\n", m.ssim));
    }
    out.push_str(&format!(
        "mean      {:<9.4} {:.3}\nstd       {:<9.4} {:.3}\n",
        report.mean_ssim, report.mean_psnr_db, report.std_ssim, report.std_psnr_db
    ));
    if let Some(b) = &report.baseline {
        out.push_str(&format!(
            "zero-filled baseline: ssim {:.4}, psnr {:.3} dB\n",
            b.mean_ssim, b.mean_psnr_db
        ));
    }
    out
}
