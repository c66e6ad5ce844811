//! Dense arrays with a runtime element type, as stored on disk.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element types the toolkit stores and computes with.
pub trait Element: ndarray::NdFloat + num_traits::Float + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn wrap(array: ArrayD<Self>) -> DynArray;
    fn unwrap(array: DynArray) -> Option<ArrayD<Self>>;

    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn wrap(array: ArrayD<Self>) -> DynArray {
        DynArray::F32(array)
    }

    fn unwrap(array: DynArray) -> Option<ArrayD<Self>> {
        match array {
            DynArray::F32(a) => Some(a),
            DynArray::F64(_) => None,
        }
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn wrap(array: ArrayD<Self>) -> DynArray {
        DynArray::F64(array)
    }

    fn unwrap(array: DynArray) -> Option<ArrayD<Self>> {
        match array {
            DynArray::F64(a) => Some(a),
            DynArray::F32(_) => None,
        }
    }
}

/// An n-dimensional array whose element type is known only at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum DynArray {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl DynArray {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynArray::F32(_) => Dtype::F32,
            DynArray::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynArray::F32(a) => a.shape(),
            DynArray::F64(a) => a.shape(),
        }
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        match self {
            DynArray::F32(a) => a.mapv(|v| v as f64),
            DynArray::F64(a) => a.clone(),
        }
    }

    /// Row-major little-endian bytes of the elements.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            DynArray::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DynArray::F64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Option<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.size() {
            return None;
        }
        let dim = IxDyn(shape);
        Some(match dtype {
            Dtype::F32 => {
                let v = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                DynArray::F32(ArrayD::from_shape_vec(dim, v).ok()?)
            }
            Dtype::F64 => {
                let v = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                DynArray::F64(ArrayD::from_shape_vec(dim, v).ok()?)
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        match self {
            DynArray::F32(a) => a.iter().all(|v| v.is_finite()),
            DynArray::F64(a) => a.iter().all(|v| v.is_finite()),
        }
    }
}
