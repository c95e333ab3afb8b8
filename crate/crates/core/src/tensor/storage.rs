use std::cell::Cell;
use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a tensor buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static DEFAULT_PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

/// Precision used for newly created arrays on this thread.
pub fn default_precision() -> Precision {
    DEFAULT_PRECISION.with(|p| p.get())
}

pub fn set_default_precision(p: Precision) {
    DEFAULT_PRECISION.with(|c| c.set(p));
}

/// Restores the previous default precision when dropped.
pub struct PrecisionGuard {
    previous: Precision,
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set_default_precision(self.previous);
    }
}

/// Switch the thread's default precision until the guard is dropped.
pub fn precision_scope(p: Precision) -> PrecisionGuard {
    let previous = default_precision();
    set_default_precision(p);
    PrecisionGuard { previous }
}

pub trait Scalar: num_traits::Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Apply a generic expression to whichever buffer variant is present.
macro_rules! map_storage {
    ($s:expr, $v:ident => $e:expr) => {
        match $s {
            $crate::tensor::Storage::F32($v) => $crate::tensor::Storage::F32($e),
            $crate::tensor::Storage::F64($v) => $crate::tensor::Storage::F64($e),
        }
    };
}

macro_rules! zip_storage {
    ($a:expr, $b:expr, ($x:ident, $y:ident) => $e:expr) => {
        match ($a, $b) {
            ($crate::tensor::Storage::F32($x), $crate::tensor::Storage::F32($y)) => {
                $crate::tensor::Storage::F32($e)
            }
            ($crate::tensor::Storage::F64($x), $crate::tensor::Storage::F64($y)) => {
                $crate::tensor::Storage::F64($e)
            }
            _ => panic!("precision mismatch between operands"),
        }
    };
}

pub(crate) use map_storage;
pub(crate) use zip_storage;

impl Storage {
    pub fn zeros(p: Precision, n: usize) -> Self {
        match p {
            Precision::F32 => Storage::F32(vec![0.0; n]),
            Precision::F64 => Storage::F64(vec![0.0; n]),
        }
    }

    pub fn from_f64(p: Precision, values: &[f64]) -> Self {
        match p {
            Precision::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            Precision::F64 => Storage::F64(values.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Storage::F32(_) => Precision::F32,
            Storage::F64(_) => Precision::F64,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn cast(&self, p: Precision) -> Storage {
        match (self, p) {
            (Storage::F32(v), Precision::F32) => Storage::F32(v.clone()),
            (Storage::F64(v), Precision::F64) => Storage::F64(v.clone()),
            (Storage::F32(v), Precision::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (Storage::F64(v), Precision::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        match self {
            Storage::F32(v) => v[i] = value as f32,
            Storage::F64(v) => v[i] = value,
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            (Storage::F64(a), Storage::F64(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            _ => panic!("precision mismatch between operands"),
        }
    }

    /// Little-endian bytes of the buffer in its native width.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

/// A dense row-major buffer with an explicit shape and no gradient record.
///
/// Arrays are cheap to clone (shared buffer) and may be sent across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<Storage>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Storage) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("array", &shape, &[data.len()]));
        }
        Ok(Array {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Array::new(shape.to_vec(), Storage::from_f64(default_precision(), values))
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        Array::new(shape.to_vec(), Storage::F32(values))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::zeros_with(shape, default_precision())
    }

    pub fn zeros_with(shape: &[usize], p: Precision) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: Arc::new(Storage::zeros(p, n)),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Array::from_f64(shape, &vec![value; n]).expect("shape and length agree")
    }

    pub fn scalar(value: f64) -> Self {
        Array::from_f64(&[], &[value]).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn storage_mut(&mut self) -> &mut Storage {
        Arc::make_mut(&mut self.data)
    }

    pub fn precision(&self) -> Precision {
        self.data.precision()
    }

    pub fn cast(&self, p: Precision) -> Array {
        if self.precision() == p {
            return self.clone();
        }
        Array {
            shape: self.shape.clone(),
            data: Arc::new(self.data.cast(p)),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data.get(i)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Copy rows `[start, end)` of a 2-D array.
    pub fn rows(&self, start: usize, end: usize) -> Array {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D array");
        let cols = self.shape[1];
        let data = map_storage!(&*self.data, v => v[start * cols..end * cols].to_vec());
        Array {
            shape: vec![end - start, cols],
            data: Arc::new(data),
        }
    }

    /// Gather the listed rows of a 2-D array into a new array.
    pub fn select_rows(&self, idx: &[usize]) -> Array {
        assert_eq!(self.shape.len(), 2, "select_rows() needs a 2-D array");
        let cols = self.shape[1];
        let data = map_storage!(&*self.data, v => {
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                out.extend_from_slice(&v[r * cols..(r + 1) * cols]);
            }
            out
        });
        Array {
            shape: vec![idx.len(), cols],
            data: Arc::new(data),
        }
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        self.to_f64_vec()
            .iter()
            .zip(other.to_f64_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when both arrays have the same shape and bit-identical contents.
    pub fn bit_eq(&self, other: &Array) -> bool {
        self.shape == other.shape && self.data.to_le_bytes() == other.data.to_le_bytes()
    }
}
