//! Command-line pipeline: mask generation, acquisition simulation, PSF
//! inspection, training, reconstruction and evaluation.
//!
//! Exit codes are a stable contract for scripting: 0 success, 2 usage,
//! 3 data/shape errors, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dmlp_mri::cascade::{cascade_forward, expand_variant, Variant};
use dmlp_mri::checkpoint::{load_checkpoint, save_checkpoint};
use dmlp_mri::fourier::{psf_of_mask, CoilSensitivities, MultiCoilKSpace};
use dmlp_mri::io::{read_volume, write_coil_stack, write_complex_volume, write_mask, Volume};
use dmlp_mri::metrics::{psnr, ssim};
use dmlp_mri::scalar::Real;
use dmlp_mri::sim::{
    make_poisson_mask_detailed, make_uniform_mask, simulate, MaskKind, PhantomKind, SimSpec,
};
use dmlp_mri::train::{
    load_dataset, loss_csv, train, Manifest, ManifestEntry, TrainError, TrainSpec,
};
use dmlp_mri::volume::Dims;

#[derive(Parser)]
#[command(name = "dmlp-mri", version, about = "Unrolled CNN + dynamic-MLP MRI reconstruction")]
struct Cli {
    /// Base seed for all randomized stages.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory relative paths resolve against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Floating-point precision of the compute path.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker thread cap (at least 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskType {
    Uniform,
    Poisson,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomArg {
    Ellipsoids,
    Blocks,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a sampling mask plus sidecar metadata.
    Mask {
        /// PE,SPE grid size.
        #[arg(long, value_parser = parse_pair)]
        dims: (usize, usize),
        #[arg(long = "type", value_enum)]
        mask_type: MaskType,
        /// Acceleration (uniform masks take the integer rate).
        #[arg(long)]
        accel: f64,
        /// Fully sampled center rectangle PE,SPE.
        #[arg(long, value_parser = parse_pair, default_value = "0,0")]
        center: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate ground truth, sensitivities and k-space for a mask.
    Simulate {
        /// RO,PE,SPE volume size.
        #[arg(long, value_parser = parse_triple)]
        dims: (usize, usize, usize),
        #[arg(long)]
        coils: usize,
        #[arg(long)]
        mask: PathBuf,
        /// Complex noise standard deviation on sampled locations.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = PhantomArg::Ellipsoids)]
        phantom: PhantomArg,
        /// Number of samples (seeds seed..seed+count-1).
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output directory; receives CVOLs and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the image-domain point-spread function of a mask.
    Psf {
        #[arg(long)]
        mask: PathBuf,
        /// PNG or PGM output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a reconstruction variant on a dataset manifest.
    Train {
        /// One of the seven strategy names, e.g. MC-CNN-dMLP.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Checkpoint output path; the loss CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a volume from measured k-space with a trained model.
    Recon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        sens: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-slice PE-SPE grayscale exports.
        #[arg(long)]
        slices: Option<PathBuf>,
    },
    /// SSIM/PSNR of a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected two comma-separated integers".into());
    }
    let a = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let b = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated integers".into());
    }
    let mut it = parts.iter().map(|p| p.trim().parse().map_err(|e| format!("{e}")));
    Ok((it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?))
}

/// Errors mapped onto the exit-code contract.
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads < 1 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.precision {
        Precision::F32 => dispatch::<f32>(cli),
        Precision::F64 => dispatch::<f64>(cli),
    }
}

fn resolve(base: &Option<PathBuf>, path: &Path) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Serialize)]
struct MaskMeta {
    spec: dmlp_mri::sim::MaskSpec,
    achieved_accel: f64,
    sampled_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    poisson_radius: Option<f64>,
}

#[derive(Serialize)]
struct WindowMeta {
    min: f64,
    max: f64,
    log_scaled: bool,
}

fn dispatch<T: Real>(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Mask { dims, mask_type, accel, center, out } => {
            cmd_mask(cli, *dims, *mask_type, *accel, *center, out)
        }
        Cmd::Simulate { dims, coils, mask, noise, phantom, count, out } => {
            cmd_simulate::<T>(cli, *dims, *coils, mask, *noise, *phantom, *count, out)
        }
        Cmd::Psf { mask, out } => cmd_psf(cli, mask, out),
        Cmd::Train { variant, data, steps, lr, batch, out } => {
            cmd_train::<T>(cli, variant, data, *steps, *lr, *batch, out)
        }
        Cmd::Recon { ckpt, kspace, sens, mask, out, slices } => {
            cmd_recon::<T>(cli, ckpt, kspace, sens, mask, out, slices.as_deref())
        }
        Cmd::Eval { pred, truth, out } => cmd_eval::<T>(cli, pred, truth, out.as_deref()),
    }
}

fn cmd_mask(
    cli: &Cli,
    dims: (usize, usize),
    mask_type: MaskType,
    accel: f64,
    center: (usize, usize),
    out: &Path,
) -> Result<(), CliError> {
    let (n_pe, n_spe) = dims;
    let (mask, kind, radius) = match mask_type {
        MaskType::Uniform => {
            if accel < 1.0 || accel.fract() != 0.0 {
                return Err(CliError::Usage(format!(
                    "uniform masks take an integer rate >= 1, got {accel}"
                )));
            }
            let rate = accel as u32;
            let m = make_uniform_mask(n_pe, n_spe, rate, center, cli.seed).map_err(data_err)?;
            (m, MaskKind::Uniform { rate }, None)
        }
        MaskType::Poisson => {
            let (m, info) = make_poisson_mask_detailed(n_pe, n_spe, accel, center, cli.seed)
                .map_err(data_err)?;
            (m, MaskKind::PoissonDisk { accel }, Some(info.radius))
        }
    };
    let out = resolve(&cli.out_dir, out);
    write_mask(&out, &mask).map_err(data_err)?;
    let fraction = mask.sampled_fraction();
    let meta = MaskMeta {
        spec: dmlp_mri::sim::MaskSpec { n_pe, n_spe, kind, center, seed: cli.seed },
        achieved_accel: 1.0 / fraction,
        sampled_fraction: fraction,
        poisson_radius: radius,
    };
    write_json(&sidecar(&out), &meta)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate<T: Real>(
    cli: &Cli,
    dims: (usize, usize, usize),
    coils: usize,
    mask_path: &Path,
    noise: f64,
    phantom: PhantomArg,
    count: usize,
    out: &Path,
) -> Result<(), CliError> {
    let dims = Dims::new(dims.0, dims.1, dims.2);
    let mask = read_mask(&resolve(&cli.out_dir, mask_path))?;
    let out = resolve(&cli.out_dir, out);
    std::fs::create_dir_all(&out).map_err(data_err)?;
    let phantom = match phantom {
        PhantomArg::Ellipsoids => PhantomKind::Ellipsoids,
        PhantomArg::Blocks => PhantomKind::Blocks,
    };
    write_mask(out.join("mask.cvol"), &mask).map_err(data_err)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec =
            SimSpec { dims, n_coils: coils, phantom, noise_std: noise, seed: cli.seed + i as u64 };
        let sample = simulate::<T>(&spec, &mask).map_err(data_err)?;
        let gt = format!("sample{i:03}_gt.cvol");
        let sens = format!("sample{i:03}_sens.cvol");
        let kspace = format!("sample{i:03}_kspace.cvol");
        write_complex_volume(out.join(&gt), &sample.ground_truth).map_err(data_err)?;
        write_coil_stack(out.join(&sens), sample.sens.maps()).map_err(data_err)?;
        write_coil_stack(out.join(&kspace), sample.kspace.coils()).map_err(data_err)?;
        entries.push(ManifestEntry {
            ground_truth: gt.into(),
            sens: sens.into(),
            mask: "mask.cvol".into(),
            kspace: kspace.into(),
            seed: spec.seed,
        });
    }
    Manifest { samples: entries }.save(out.join("manifest.json")).map_err(data_err)?;
    Ok(())
}

fn cmd_psf(cli: &Cli, mask_path: &Path, out: &Path) -> Result<(), CliError> {
    let mask = read_mask(&resolve(&cli.out_dir, mask_path))?;
    // One RO plane: along RO the kernel is a centered impulse anyway.
    let psf = psf_of_mask::<f64>(&mask, 1);
    let dims = psf.dims();
    let mag: Vec<f64> = psf.data().iter().map(|c| c.norm()).collect();
    let out = resolve(&cli.out_dir, out);
    write_grayscale(&out, dims.pe, dims.spe, &mag, true)?;
    Ok(())
}

fn cmd_train<T: Real>(
    cli: &Cli,
    variant: &str,
    data: &Path,
    steps: usize,
    lr: f64,
    batch: usize,
    out: &Path,
) -> Result<(), CliError> {
    let variant = Variant::from_name(variant).map_err(|e| CliError::Usage(e.to_string()))?;
    expand_variant(variant.name()).map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset = load_dataset::<T, _>(resolve(&cli.out_dir, data)).map_err(data_err)?;
    let spec = TrainSpec { variant, steps, batch_size: batch, learning_rate: lr, seed: cli.seed };
    let (model, log) = match train(&spec, &dataset) {
        Ok(r) => r,
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            return Err(CliError::Numerical(e.to_string()));
        }
        Err(e) => return Err(data_err(e)),
    };
    let out = resolve(&cli.out_dir, out);
    save_checkpoint(&out, &model).map_err(data_err)?;
    std::fs::write(out.with_extension("loss.csv"), loss_csv(&log)).map_err(data_err)?;
    Ok(())
}

fn cmd_recon<T: Real>(
    cli: &Cli,
    ckpt: &Path,
    kspace: &Path,
    sens: &Path,
    mask: &Path,
    out: &Path,
    slices: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_checkpoint::<T, _>(resolve(&cli.out_dir, ckpt)).map_err(data_err)?;
    let kspace = read_volume::<T, _>(resolve(&cli.out_dir, kspace))
        .and_then(Volume::into_complex_stack)
        .map_err(data_err)?;
    let sens = read_volume::<T, _>(resolve(&cli.out_dir, sens))
        .and_then(Volume::into_complex_stack)
        .map_err(data_err)?;
    let mask = read_mask(&resolve(&cli.out_dir, mask))?;
    let y = MultiCoilKSpace::new(kspace).map_err(data_err)?;
    let s = CoilSensitivities::new(sens).map_err(data_err)?;
    let (recon, _) = cascade_forward(&y, &s, &mask, &model).map_err(data_err)?;
    let out = resolve(&cli.out_dir, out);
    write_complex_volume(&out, &recon).map_err(data_err)?;

    if let Some(slices) = slices {
        let slices = resolve(&cli.out_dir, slices);
        std::fs::create_dir_all(&slices).map_err(data_err)?;
        let dims = recon.dims();
        let mag = recon.magnitude();
        for ro in 0..dims.ro {
            let plane: Vec<f64> = (0..dims.pe)
                .flat_map(|pe| (0..dims.spe).map(move |spe| (pe, spe)))
                .map(|(pe, spe)| mag.at(ro, pe, spe).as_f64())
                .collect();
            write_grayscale(
                &slices.join(format!("slice{ro:03}.pgm")),
                dims.pe,
                dims.spe,
                &plane,
                false,
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    ssim: f64,
    psnr_db: Option<f64>,
    infinite_psnr: bool,
}

fn cmd_eval<T: Real>(
    cli: &Cli,
    pred: &Path,
    truth: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let pred = read_volume::<T, _>(resolve(&cli.out_dir, pred))
        .and_then(Volume::into_complex)
        .map_err(data_err)?;
    let truth = read_volume::<T, _>(resolve(&cli.out_dir, truth))
        .and_then(Volume::into_complex)
        .map_err(data_err)?;
    let (pm, tm) = (pred.magnitude(), truth.magnitude());
    let s = ssim(&tm, &pm).map_err(data_err)?;
    let (psnr_db, infinite) = match psnr(&tm, &pm) {
        Ok(v) => (Some(v), false),
        Err(dmlp_mri::metrics::MetricsError::InfinitePsnr) => (None, true),
        Err(e) => return Err(data_err(e)),
    };
    let report = EvalReport { ssim: s, psnr_db, infinite_psnr: infinite };
    println!("ssim     {s:.6}");
    match psnr_db {
        Some(p) => println!("psnr_db  {p:.3}"),
        None => println!("psnr_db  inf (volumes identical)"),
    }
    if let Some(out) = out {
        write_json(&resolve(&cli.out_dir, out), &report)?;
    }
    Ok(())
}

fn read_mask(path: &Path) -> Result<dmlp_mri::fourier::SamplingMask, CliError> {
    read_volume::<f32, _>(path).and_then(Volume::into_mask).map_err(data_err)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data_err)?;
    std::fs::write(path, text).map_err(data_err)
}

/// 8-bit grayscale export with min-max windowing (optionally log-scaled);
/// the window lands in a JSON sidecar. PGM is written directly, PNG through
/// the image crate, chosen by extension.
fn write_grayscale(
    path: &Path,
    rows_pe: usize,
    cols_spe: usize,
    values: &[f64],
    log_scale: bool,
) -> Result<(), CliError> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            let t = (v - lo) / span;
            let t = if log_scale { (1.0 + 999.0 * t).log10() / 3.0 } else { t };
            (t.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    // Rows run over PE, columns over SPE: the (pe, spe) plane of the masks.
    let (w, h) = (cols_spe, rows_pe);
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => {
            let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer matches dimensions");
            img.save(path).map_err(data_err)?;
        }
        _ => {
            let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
            pgm.extend_from_slice(&bytes);
            std::fs::write(path, pgm).map_err(data_err)?;
        }
    }
    write_json(&sidecar(path), &WindowMeta { min: lo, max: hi, log_scaled: log_scale })?;
    Ok(())
}
