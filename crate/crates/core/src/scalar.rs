//! Scalar abstraction over the floating-point types the library runs on.
//!
//! All numerical code is generic over [`Real`]; `f32` is the runtime default
//! and `f64` is used wherever gradient checks need the extra headroom.

use std::fmt::{Debug, Display};
use std::iter::{Product, Sum};

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Element type tag carried by serialized tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarKind {
    F32,
    F64,
}

impl ScalarKind {
    pub fn code(self) -> u8 {
        match self {
            ScalarKind::F32 => 0,
            ScalarKind::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScalarKind::F32),
            1 => Some(ScalarKind::F64),
            _ => None,
        }
    }

    pub fn byte_len(self) -> usize {
        match self {
            ScalarKind::F32 => 4,
            ScalarKind::F64 => 8,
        }
    }
}

/// Floating-point scalar the library is generic over.
pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Product
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    const KIND: ScalarKind;

    /// Lossy conversion from `f64`; panics only for values a float cannot
    /// represent at all, which `f64` literals used in this crate never are.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 convertible to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {
    const KIND: ScalarKind = ScalarKind::F32;
}

impl Real for f64 {
    const KIND: ScalarKind = ScalarKind::F64;
}

/// Complex value over the generic scalar.
pub type Cplx<T> = Complex<T>;
