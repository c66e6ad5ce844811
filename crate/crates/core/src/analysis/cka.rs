use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::array::Element;
use crate::backbone::FeatureTensor;
use crate::error::{Error, Result};
use crate::guidance::{amplify, GuidancePair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CkaResult {
    pub value: f64,
    pub n_samples: usize,
    pub centered: bool,
}

fn center(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    &x - &mean
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear CKA between `(n, p)` and `(n, q)` sample matrices, using the
/// feature-space form `|Yc' Xc|^2 / (|Xc' Xc| |Yc' Yc|)`.
pub fn linear_cka<T: Element>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<CkaResult> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::Shape(format!("sample counts differ: {n} vs {}", y.nrows())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("CKA needs at least 2 samples".into()));
    }
    let xf = x.mapv(|v| v.to_f64().unwrap());
    let yf = y.mapv(|v| v.to_f64().unwrap());
    let xc = center(xf.view());
    let yc = center(yf.view());
    for (raw, c, name) in [(&xf, &xc, "X"), (&yf, &yc, "Y")] {
        let scale = frob(raw);
        if scale == 0.0 || frob(c) <= 1e-12 * scale {
            return Err(Error::Degenerate(format!("{name} is constant across samples")));
        }
    }
    let value = if xf == yf {
        1.0
    } else {
        let cross = frob(&yc.t().dot(&xc));
        cross * cross / (frob(&xc.t().dot(&xc)) * frob(&yc.t().dot(&yc)))
    };
    Ok(CkaResult {
        value,
        n_samples: n,
        centered: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaMatrix {
    pub blocks: Vec<String>,
    /// Symmetric, unit diagonal. Entries not requested via `pairs` are NaN.
    pub values: Array2<f64>,
}

impl CkaMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block");
        for b in &self.blocks {
            out.push(',');
            out.push_str(b);
        }
        out.push('\n');
        for (i, b) in self.blocks.iter().enumerate() {
            out.push_str(b);
            for j in 0..self.blocks.len() {
                out.push_str(&format!(",{}", self.values[[i, j]]));
            }
            out.push('\n');
        }
        out
    }
}

/// CKA between every pair of blocks (or only the listed index pairs).
pub fn blockwise_cka_matrix(sets: &[(String, Array2<f64>)], pairs: Option<&[(usize, usize)]>) -> Result<CkaMatrix> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument("block-wise CKA needs at least 2 blocks".into()));
    }
    let n = sets[0].1.nrows();
    let mismatched: Vec<&str> = sets.iter().filter(|(_, m)| m.nrows() != n).map(|(b, _)| b.as_str()).collect();
    if !mismatched.is_empty() {
        return Err(Error::Shape(format!(
            "blocks {mismatched:?} have sample counts differing from {} ({n})",
            sets[0].0
        )));
    }
    let m = sets.len();
    let all: Vec<(usize, usize)>;
    let pairs = match pairs {
        Some(p) => p,
        None => {
            all = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut values = Array2::from_elem((m, m), f64::NAN);
    for i in 0..m {
        values[[i, i]] = 1.0;
    }
    for &(i, j) in pairs {
        if i >= m || j >= m {
            return Err(Error::InvalidArgument(format!("pair ({i}, {j}) out of range")));
        }
        if i == j {
            continue;
        }
        let v = linear_cka(sets[i].1.view(), sets[j].1.view())?.value;
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    Ok(CkaMatrix {
        blocks: sets.iter().map(|(b, _)| b.clone()).collect(),
        values,
    })
}

/// Stacks `(H, W, C)` maps into an `(n * H * W, C)` sample matrix.
pub fn flatten_features<T: Element>(features: &[FeatureTensor<T>]) -> Result<Array2<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("no features to flatten".into()))?
        .dims();
    let (h, w, c) = first;
    if let Some(bad) = features.iter().find(|f| f.dims() != first) {
        return Err(Error::Shape(format!("{:?} vs {:?} at {}", bad.dims(), first, bad.provenance)));
    }
    let mut out = Array2::zeros((features.len() * h * w, c));
    for (i, f) in features.iter().enumerate() {
        let flat = f.values.to_shape((h * w, c)).unwrap();
        out.slice_mut(ndarray::s![i * h * w..(i + 1) * h * w, ..])
            .assign(&flat.mapv(|v| v.to_f64().unwrap()));
    }
    Ok(out)
}

/// CKA of unconditional features against amplified features at each scale.
/// Scale 0 must be present and anchors the curve at exactly 1.
pub fn guidance_cka_curve<T: Element>(pairs: &[GuidancePair<T>], scales: &[f64]) -> Result<Vec<(f64, CkaResult)>> {
    if !scales.contains(&0.0) {
        return Err(Error::InvalidArgument("guidance scales must include 0".into()));
    }
    let reference: Vec<FeatureTensor<T>> = pairs.iter().map(|p| p.uncond().clone()).collect();
    let x = flatten_features(&reference)?;
    scales
        .iter()
        .map(|&s| {
            let amplified = pairs.iter().map(|p| amplify(p, s)).collect::<Result<Vec<_>>>()?;
            let y = flatten_features(&amplified)?;
            Ok((s, linear_cka(x.view(), y.view())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, QR};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// HSIC form on n x n Gram matrices: HSIC(K, L) = tr(K H L H).
    fn hsic_cka(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let n = x.nrows();
        let h = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
        let k = x.dot(&x.t());
        let l = y.dot(&y.t());
        let hsic = |a: &Array2<f64>, b: &Array2<f64>| {
            let m = a.dot(&h).dot(b).dot(&h);
            (0..n).map(|i| m[[i, i]]).sum::<f64>()
        };
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let q = QR::new(m).q();
        Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
    }

    #[test]
    fn matches_hsic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random(&mut rng, 6, 3);
            let y = random(&mut rng, 6, 4);
            let got = linear_cka(x.view(), y.view()).unwrap().value;
            assert!((got - hsic_cka(&x, &y)).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_and_shape_errors() {
        let x = Array2::from_elem((5, 3), 1.7);
        let y = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64);
        assert!(matches!(linear_cka(x.view(), y.view()), Err(Error::Degenerate(_))));
        let z = Array2::<f64>::zeros((4, 2));
        assert!(matches!(linear_cka(y.view(), z.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn blockwise_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, 10, 4);
        let same = blockwise_cka_matrix(&[("a".into(), a.clone()), ("b".into(), a.clone())], None).unwrap();
        assert!(same.values.iter().all(|&v| v == 1.0));

        let sets: Vec<(String, Array2<f64>)> = (0..3).map(|i| (format!("b{i}"), random(&mut rng, 10, 3 + i))).collect();
        let m = blockwise_cka_matrix(&sets, None).unwrap();
        for i in 0..3 {
            assert_eq!(m.values[[i, i]], 1.0);
            for j in 0..3 {
                assert!((m.values[[i, j]] - m.values[[j, i]]).abs() < 1e-12);
                if i != j {
                    let direct = linear_cka(sets[i].1.view(), sets[j].1.view()).unwrap().value;
                    assert!((m.values[[i, j]] - direct).abs() < 1e-12);
                }
            }
        }
        let partial = blockwise_cka_matrix(&sets, Some(&[(0, 2)])).unwrap();
        assert!(partial.values[[0, 1]].is_nan());
        assert!(!partial.values[[2, 0]].is_nan());

        let bad = vec![("x".to_string(), random(&mut rng, 10, 2)), ("y".to_string(), random(&mut rng, 9, 2))];
        let err = blockwise_cka_matrix(&bad, None).unwrap_err().to_string();
        assert!(err.contains('y') && err.contains('x'), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn invariances(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 8, 3);
            let y = random(&mut rng, 8, 5);
            let base = linear_cka(x.view(), y.view()).unwrap().value;
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&base));
            let sym = linear_cka(y.view(), x.view()).unwrap().value;
            prop_assert!((base - sym).abs() < 1e-9);
            let q = orthogonal(&mut rng, 3);
            let xq = x.dot(&q);
            prop_assert!((linear_cka(x.view(), xq.view()).unwrap().value - 1.0).abs() < 1e-9);
            prop_assert!((linear_cka(xq.view(), y.view()).unwrap().value - base).abs() < 1e-9);
            let xs = &x * c;
            prop_assert!((linear_cka(xs.view(), y.view()).unwrap().value - base).abs() < 1e-9);
            prop_assert_eq!(linear_cka(x.view(), x.view()).unwrap().value, 1.0);
        }
    }
}
