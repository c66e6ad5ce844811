use ndarray::{ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::array::Element;
use crate::backbone::FeatureTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosinePooling {
    /// Cosine at every spatial position, then the spatial mean.
    #[default]
    PerPosition,
    /// Spatially mean-pooled vectors, then one cosine.
    MeanPooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosineResult {
    pub value: f64,
    /// Positions where either vector is zero; they contribute 0 to the mean.
    pub zero_positions: usize,
}

pub fn pair_cosine_similarity<T: Element>(
    a: &FeatureTensor<T>,
    b: &FeatureTensor<T>,
    pooling: CosinePooling,
) -> Result<CosineResult> {
    cosine_similarity(a.values.view(), b.values.view(), pooling)
}

fn cos(x: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (a, b) in x {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some((dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity<T: Element>(
    a: ArrayView3<T>,
    b: ArrayView3<T>,
    pooling: CosinePooling,
) -> Result<CosineResult> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w, _) = a.dim();
    if h * w == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    let f = |v: &T| v.to_f64().unwrap();
    match pooling {
        CosinePooling::PerPosition => {
            let mut sum = 0.0;
            let mut zeros = 0;
            for (va, vb) in a.lanes(Axis(2)).into_iter().zip(b.lanes(Axis(2))) {
                match cos(va.iter().map(f).zip(vb.iter().map(f))) {
                    Some(c) => sum += c,
                    None => zeros += 1,
                }
            }
            Ok(CosineResult {
                value: sum / (h * w) as f64,
                zero_positions: zeros,
            })
        }
        CosinePooling::MeanPooled => {
            let ma = a.mapv(|v| v.to_f64().unwrap()).mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
            let mb = b.mapv(|v| v.to_f64().unwrap()).mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
            let c = cos(ma.iter().copied().zip(mb.iter().copied()));
            Ok(CosineResult {
                value: c.unwrap_or(0.0),
                zero_positions: usize::from(c.is_none()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn loop_oracle(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let (h, w, c) = a.dim();
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..c {
                    dot += a[[i, j, k]] * b[[i, j, k]];
                    na += a[[i, j, k]] * a[[i, j, k]];
                    nb += b[[i, j, k]] * b[[i, j, k]];
                }
                if na > 0.0 && nb > 0.0 {
                    total += dot / (na.sqrt() * nb.sqrt());
                }
            }
        }
        total / (h * w) as f64
    }

    fn arr(v: Vec<f64>) -> Array3<f64> {
        Array3::from_shape_vec((4, 4, 3), v).unwrap()
    }

    #[test]
    fn endpoints_and_zero_positions() {
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| 1.0 + (i * 7 + j * 3 + k) as f64);
        let r = cosine_similarity(a.view(), a.view(), CosinePooling::PerPosition).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        let neg = -&a;
        let r = cosine_similarity(a.view(), neg.view(), CosinePooling::PerPosition).unwrap();
        assert!((r.value + 1.0).abs() < 1e-15);

        let mut z = a.clone();
        z.slice_mut(ndarray::s![0, 0, ..]).fill(0.0);
        let r = cosine_similarity(a.view(), z.view(), CosinePooling::PerPosition).unwrap();
        assert_eq!(r.zero_positions, 1);
        assert!((r.value - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mean_pooled_option() {
        let a = Array3::from_shape_fn((2, 2, 2), |(i, _, k)| if k == i { 1.0 } else { 0.0 });
        let b = Array3::from_elem((2, 2, 2), 1.0);
        let r = cosine_similarity(a.view(), b.view(), CosinePooling::MeanPooled).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        let p = cosine_similarity(a.view(), b.view(), CosinePooling::PerPosition).unwrap();
        assert!((p.value - 0.5f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_loop_oracle(va in prop::collection::vec(-5.0f64..5.0, 48), vb in prop::collection::vec(-5.0f64..5.0, 48)) {
            let a = arr(va);
            let b = arr(vb);
            let got = cosine_similarity(a.view(), b.view(), CosinePooling::PerPosition).unwrap().value;
            prop_assert!((got - loop_oracle(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn symmetric_bounded_scale_invariant(
            va in prop::collection::vec(-5.0f64..5.0, 48),
            vb in prop::collection::vec(-5.0f64..5.0, 48),
            lambda in 0.01f64..100.0,
        ) {
            let a = arr(va);
            let b = arr(vb);
            let ab = cosine_similarity(a.view(), b.view(), CosinePooling::PerPosition).unwrap().value;
            let ba = cosine_similarity(b.view(), a.view(), CosinePooling::PerPosition).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = &b * lambda;
            let abs = cosine_similarity(a.view(), scaled.view(), CosinePooling::PerPosition).unwrap().value;
            prop_assert!((ab - abs).abs() < 1e-12);
        }
    }
}
