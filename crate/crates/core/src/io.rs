//! CVOL binary container for volumes and masks.
//!
//! Little-endian layout: magic "CVOL", u8 version = 1, u8 dtype
//! (0 = complex pair f32, 1 = real f32, 2 = mask u8), u8 ndim, u8 reserved,
//! ndim x u32 dims outermost first (coil, ro, pe, spe), then the payload in
//! row-major order with complex entries as interleaved re/im f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use thiserror::Error;

use crate::fourier::{FourierError, SamplingMask};
use crate::scalar::{Cplx, Real};
use crate::volume::{ComplexVolume, Dims, RealVolume, VolumeError};

const MAGIC: [u8; 4] = *b"CVOL";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CvolError {
    #[error("bad magic: not a CVOL file")]
    BadMagic,
    #[error("unsupported CVOL version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("dtype {dtype} does not admit ndim {ndim}")]
    BadNdim { dtype: u8, ndim: u8 },
    #[error("dimension overflow: dims exceed addressable size")]
    DimOverflow,
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("expected {expected} volume, file holds {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Mask(#[from] FourierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tagged content of a CVOL file.
#[derive(Clone, Debug)]
pub enum Volume<T: Real> {
    Complex(ComplexVolume<T>),
    /// Coil-indexed complex stack, coil outermost.
    ComplexStack(Vec<ComplexVolume<T>>),
    Real(RealVolume<T>),
    Mask(SamplingMask),
}

impl<T: Real> Volume<T> {
    fn kind(&self) -> &'static str {
        match self {
            Volume::Complex(_) => "complex",
            Volume::ComplexStack(_) => "complex stack",
            Volume::Real(_) => "real",
            Volume::Mask(_) => "mask",
        }
    }

    pub fn into_complex(self) -> Result<ComplexVolume<T>, CvolError> {
        match self {
            Volume::Complex(v) => Ok(v),
            other => Err(CvolError::WrongKind { expected: "complex", found: other.kind() }),
        }
    }

    pub fn into_complex_stack(self) -> Result<Vec<ComplexVolume<T>>, CvolError> {
        match self {
            Volume::ComplexStack(v) => Ok(v),
            // A single volume reads fine as a one-coil stack.
            Volume::Complex(v) => Ok(vec![v]),
            other => Err(CvolError::WrongKind { expected: "complex stack", found: other.kind() }),
        }
    }

    pub fn into_real(self) -> Result<RealVolume<T>, CvolError> {
        match self {
            Volume::Real(v) => Ok(v),
            other => Err(CvolError::WrongKind { expected: "real", found: other.kind() }),
        }
    }

    pub fn into_mask(self) -> Result<SamplingMask, CvolError> {
        match self {
            Volume::Mask(v) => Ok(v),
            other => Err(CvolError::WrongKind { expected: "mask", found: other.kind() }),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: u8, dims: &[u32]) -> Result<(), CvolError> {
    w.write_all(&MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u8(dtype)?;
    w.write_u8(dims.len() as u8)?;
    w.write_u8(0)?;
    for &d in dims {
        w.write_u32::<LittleEndian>(d)?;
    }
    Ok(())
}

fn dims_u32(dims: Dims) -> Result<[u32; 3], CvolError> {
    let c = |v: usize| u32::try_from(v).map_err(|_| CvolError::DimOverflow);
    Ok([c(dims.ro)?, c(dims.pe)?, c(dims.spe)?])
}

fn write_complex_payload<T: Real, W: Write>(
    w: &mut W,
    data: &[Cplx<T>],
) -> Result<(), CvolError> {
    for c in data {
        w.write_f32::<LittleEndian>(c.re.as_f64() as f32)?;
        w.write_f32::<LittleEndian>(c.im.as_f64() as f32)?;
    }
    Ok(())
}

pub fn write_complex_volume<T: Real, P: AsRef<Path>>(
    path: P,
    v: &ComplexVolume<T>,
) -> Result<(), CvolError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, 0, &dims_u32(v.dims())?)?;
    write_complex_payload(&mut w, v.data())?;
    Ok(())
}

/// Writes a coil stack as a 4D complex CVOL (coil outermost).
pub fn write_coil_stack<T: Real, P: AsRef<Path>>(
    path: P,
    coils: &[ComplexVolume<T>],
) -> Result<(), CvolError> {
    let first = coils.first().ok_or(VolumeError::EmptyStack)?;
    let d = dims_u32(first.dims())?;
    let n = u32::try_from(coils.len()).map_err(|_| CvolError::DimOverflow)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, 0, &[n, d[0], d[1], d[2]])?;
    for c in coils {
        if c.dims() != first.dims() {
            return Err(VolumeError::DimMismatch { a: first.dims(), b: c.dims() }.into());
        }
        write_complex_payload(&mut w, c.data())?;
    }
    Ok(())
}

pub fn write_real_volume<T: Real, P: AsRef<Path>>(
    path: P,
    v: &RealVolume<T>,
) -> Result<(), CvolError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, 1, &dims_u32(v.dims())?)?;
    for x in v.data() {
        w.write_f32::<LittleEndian>(x.as_f64() as f32)?;
    }
    Ok(())
}

pub fn write_mask<P: AsRef<Path>>(path: P, m: &SamplingMask) -> Result<(), CvolError> {
    let pe = u32::try_from(m.n_pe()).map_err(|_| CvolError::DimOverflow)?;
    let spe = u32::try_from(m.n_spe()).map_err(|_| CvolError::DimOverflow)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, 2, &[pe, spe])?;
    w.write_all(m.bits())?;
    Ok(())
}

pub fn write_volume<T: Real, P: AsRef<Path>>(path: P, v: &Volume<T>) -> Result<(), CvolError> {
    match v {
        Volume::Complex(c) => write_complex_volume(path, c),
        Volume::ComplexStack(s) => write_coil_stack(path, s),
        Volume::Real(r) => write_real_volume(path, r),
        Volume::Mask(m) => write_mask(path, m),
    }
}

fn checked_len(dims: &[u32]) -> Result<usize, CvolError> {
    let mut total: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(CvolError::DimOverflow);
        }
        total = total.checked_mul(d as usize).ok_or(CvolError::DimOverflow)?;
    }
    // Payload byte counts must stay addressable too (8 bytes per complex).
    total.checked_mul(8).ok_or(CvolError::DimOverflow)?;
    Ok(total)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CvolError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CvolError::TruncatedPayload
        } else {
            CvolError::Io(e)
        }
    })
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, CvolError> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_or_truncated(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn complex_from_f32s<T: Real>(raw: &[f32]) -> Vec<Cplx<T>> {
    raw.chunks_exact(2)
        .map(|p| Cplx::new(T::of(p[0] as f64), T::of(p[1] as f64)))
        .collect()
}

pub fn read_volume<T: Real, P: AsRef<Path>>(path: P) -> Result<Volume<T>, CvolError> {
    let mut r = BufReader::new(File::open(path)?);
    read_volume_from(&mut r)
}

pub fn read_volume_from<T: Real, R: Read>(r: &mut R) -> Result<Volume<T>, CvolError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if magic != MAGIC {
        return Err(CvolError::BadMagic);
    }
    let mut head = [0u8; 4];
    read_exact_or_truncated(r, &mut head)?;
    let (version, dtype, ndim) = (head[0], head[1], head[2]);
    if version != VERSION {
        return Err(CvolError::UnsupportedVersion(version));
    }
    if ndim == 0 || ndim > 4 {
        return Err(CvolError::BadNdim { dtype, ndim });
    }
    let mut dims = vec![0u32; ndim as usize];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        read_exact_or_truncated(r, &mut b)?;
        *d = u32::from_le_bytes(b);
    }
    let total = checked_len(&dims)?;

    let vol = match (dtype, ndim) {
        (0, 3) => {
            let raw = read_f32s(r, total * 2)?;
            let dims3 = Dims::new(dims[0] as usize, dims[1] as usize, dims[2] as usize);
            Volume::Complex(ComplexVolume::new(dims3, complex_from_f32s(&raw))?)
        }
        (0, 4) => {
            let n_coils = dims[0] as usize;
            let dims3 = Dims::new(dims[1] as usize, dims[2] as usize, dims[3] as usize);
            let per = dims3.len();
            let mut coils = Vec::with_capacity(n_coils);
            for _ in 0..n_coils {
                let raw = read_f32s(r, per * 2)?;
                coils.push(ComplexVolume::new(dims3, complex_from_f32s(&raw))?);
            }
            Volume::ComplexStack(coils)
        }
        (1, 3) => {
            let raw = read_f32s(r, total)?;
            let dims3 = Dims::new(dims[0] as usize, dims[1] as usize, dims[2] as usize);
            let data = raw.into_iter().map(|x| T::of(x as f64)).collect();
            Volume::Real(RealVolume::new(dims3, data)?)
        }
        (2, 2) => {
            let mut bits = vec![0u8; total];
            read_exact_or_truncated(r, &mut bits)?;
            Volume::Mask(SamplingMask::new(dims[0] as usize, dims[1] as usize, bits)?)
        }
        (d, n) if d <= 2 => return Err(CvolError::BadNdim { dtype: d, ndim: n }),
        (d, _) => return Err(CvolError::UnsupportedDtype(d)),
    };

    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(vol),
        _ => Err(CvolError::TrailingBytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::io::Cursor;

    fn random_complex(rng: &mut StdRng, dims: Dims) -> ComplexVolume<f32> {
        let data = (0..dims.len())
            .map(|_| Cplx::new(rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)))
            .collect();
        ComplexVolume::new(dims, data).unwrap()
    }

    #[test]
    fn complex_round_trip_is_elementwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.cvol");
        let mut rng = StdRng::seed_from_u64(1);
        let v = random_complex(&mut rng, Dims::new(3, 4, 5));
        write_complex_volume(&path, &v).unwrap();
        let back = read_volume::<f32, _>(&path).unwrap().into_complex().unwrap();
        assert_eq!(back, v);

        // A second write of the re-read volume is byte-identical.
        let path2 = dir.path().join("v2.cvol");
        write_complex_volume(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn coil_stack_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let dims = Dims::new(2, 3, 2);
        let coils = vec![random_complex(&mut rng, dims), random_complex(&mut rng, dims)];
        let p = dir.path().join("k.cvol");
        write_coil_stack(&p, &coils).unwrap();
        let back = read_volume::<f32, _>(&p).unwrap().into_complex_stack().unwrap();
        assert_eq!(back, coils);

        let m = SamplingMask::new(3, 2, vec![1, 0, 1, 1, 0, 0]).unwrap();
        let pm = dir.path().join("m.cvol");
        write_mask(&pm, &m).unwrap();
        assert_eq!(read_volume::<f32, _>(&pm).unwrap().into_mask().unwrap(), m);
    }

    #[test]
    fn hand_assembled_file_parses_to_known_values() {
        // 2x1x1 complex volume with entries 1+2i and 3+4i, laid out by hand.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CVOL");
        bytes.extend_from_slice(&[1u8, 0, 3, 0]); // version, dtype, ndim, reserved
        for d in [2u32, 1, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for f in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&f.to_le_bytes());
        }
        let v = read_volume_from::<f64, _>(&mut Cursor::new(bytes))
            .unwrap()
            .into_complex()
            .unwrap();
        assert_eq!(v.dims(), Dims::new(2, 1, 1));
        assert_eq!(v.data()[0], Cplx::new(1.0, 2.0));
        assert_eq!(v.data()[1], Cplx::new(3.0, 4.0));
    }

    #[test]
    fn distinct_error_codes() {
        let bad_magic = b"XVOL\x01\x00\x03\x00".to_vec();
        assert!(matches!(
            read_volume_from::<f32, _>(&mut Cursor::new(bad_magic)),
            Err(CvolError::BadMagic)
        ));

        let mut truncated = Vec::new();
        truncated.extend_from_slice(b"CVOL");
        truncated.extend_from_slice(&[1u8, 0, 3, 0]);
        for d in [2u32, 1, 1] {
            truncated.extend_from_slice(&d.to_le_bytes());
        }
        truncated.extend_from_slice(&1.0f32.to_le_bytes()); // payload cut short
        assert!(matches!(
            read_volume_from::<f32, _>(&mut Cursor::new(truncated)),
            Err(CvolError::TruncatedPayload)
        ));

        let mut overflow = Vec::new();
        overflow.extend_from_slice(b"CVOL");
        overflow.extend_from_slice(&[1u8, 0, 4, 0]);
        for d in [u32::MAX, u32::MAX, u32::MAX, 2] {
            overflow.extend_from_slice(&d.to_le_bytes());
        }
        assert!(matches!(
            read_volume_from::<f32, _>(&mut Cursor::new(overflow)),
            Err(CvolError::DimOverflow)
        ));

        let mut bad_version = Vec::new();
        bad_version.extend_from_slice(b"CVOL");
        bad_version.extend_from_slice(&[9u8, 0, 3, 0]);
        assert!(matches!(
            read_volume_from::<f32, _>(&mut Cursor::new(bad_version)),
            Err(CvolError::UnsupportedVersion(9))
        ));
    }
}
