use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use serde::Serialize;

use crate::array::Element;
use crate::backbone::FeatureTensor;
use crate::error::{Error, Result};

/// Projection of one input onto the jointly fitted components, min-max scaled
/// to `[0, 1]` per component across the whole fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaMap {
    /// `(H, W, k)`; `k = 3` gives an RGB image.
    pub rgb: Array3<f64>,
    pub explained_variance: Vec<f64>,
    pub source_keys: Vec<String>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointPca {
    pub maps: Vec<PcaMap>,
    /// `(k, C)`, rows orthonormal.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    /// Covariance eigenvalues (divisor `N - 1`), non-increasing.
    pub explained_variance: Vec<f64>,
    /// Number of components with non-zero variance, at most `k`.
    pub rank: usize,
}

impl JointPca {
    pub fn degenerate(&self) -> bool {
        self.rank < self.components.nrows()
    }
}

pub fn joint_pca_rgb<T: Element>(features: &[FeatureTensor<T>], k: usize) -> Result<JointPca> {
    let arrays: Vec<Array3<f64>> = features.iter().map(|f| f.values.mapv(|v| v.to_f64().unwrap())).collect();
    let views: Vec<ArrayView3<f64>> = arrays.iter().map(|a| a.view()).collect();
    let keys = features.iter().map(|f| f.provenance.to_string()).collect();
    joint_pca(&views, keys, k)
}

/// Fits one PCA basis on the pixels of all inputs and projects each input.
pub fn joint_pca(inputs: &[ArrayView3<f64>], source_keys: Vec<String>, k: usize) -> Result<JointPca> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("PCA needs at least one feature map".into()));
    }
    let c = inputs[0].dim().2;
    if let Some(bad) = inputs.iter().find(|a| a.dim().2 != c) {
        return Err(Error::Shape(format!(
            "channel counts differ: {c} vs {}",
            bad.dim().2
        )));
    }
    let n: usize = inputs.iter().map(|a| a.dim().0 * a.dim().1).sum();
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={c}")));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!("{n} pixels, need more than k = {k}")));
    }

    let mut data = Array2::<f64>::zeros((n, c));
    let mut row = 0;
    for a in inputs {
        let (h, w, _) = a.dim();
        let flat = a.to_shape((h * w, c)).unwrap();
        data.slice_mut(s![row..row + h * w, ..]).assign(&flat);
        row += h * w;
    }
    let mean = data.mean_axis(Axis(0)).unwrap();
    data -= &mean;
    let cov = data.t().dot(&data) / (n - 1) as f64;

    let eig = SymmetricEigen::new(DMatrix::from_fn(c, c, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = (top * 1e-12).max(f64::MIN_POSITIVE);
    let mut components = Array2::<f64>::zeros((k, c));
    let mut explained = Vec::with_capacity(k);
    let mut rank = 0;
    for (r, &i) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[i].max(0.0);
        explained.push(lambda);
        if lambda > floor {
            rank += 1;
        }
        let v = eig.eigenvectors.column(i);
        // Sign: largest-magnitude coordinate positive.
        let pivot = (0..c).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..c {
            components[[r, j]] = sign * v[j];
        }
    }

    let mut scores = data.dot(&components.t());
    for r in 0..k {
        let mut col = scores.column_mut(r);
        if r >= rank {
            col.fill(0.5);
            continue;
        }
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            col.mapv_inplace(|v| (v - lo) / (hi - lo));
        } else {
            col.fill(0.5);
        }
    }

    let mut maps = Vec::with_capacity(inputs.len());
    let mut row = 0;
    for a in inputs {
        let (h, w, _) = a.dim();
        let rgb = scores
            .slice(s![row..row + h * w, ..])
            .to_owned()
            .into_shape_with_order((h, w, k))
            .unwrap();
        row += h * w;
        maps.push(PcaMap {
            rgb,
            explained_variance: explained.clone(),
            source_keys: source_keys.clone(),
            degenerate: rank < k,
        });
    }
    Ok(JointPca {
        maps,
        components,
        mean,
        explained_variance: explained,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigenvalue iteration on a dense symmetric matrix.
    fn jacobi_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * cs;
                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = cs * akp - sn * akq;
                        a[[k, q]] = sn * akp + cs * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = cs * apk - sn * aqk;
                        a[[q, k]] = sn * apk + cs * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
        // Correlated channels so the spectrum is non-trivial.
        let mix = Array2::from_shape_fn((c, c), |(i, j)| if i == j { 1.0 + i as f64 } else { 0.3 * ((i + 2 * j) % 3) as f64 });
        let z = Array2::from_shape_fn((h * w, c), |_| rng.gen_range(-1.0..1.0));
        z.dot(&mix).into_shape_with_order((h, w, c)).unwrap()
    }

    #[test]
    fn eigenvalues_match_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_map(&mut rng, 8, 8, 4);
        let fit = joint_pca(&[x.view()], vec![], 3).unwrap();
        // Oracle covariance from explicit sums.
        let n = 64.0;
        let flat = x.to_shape((64, 4)).unwrap();
        let mean: Vec<f64> = (0..4).map(|j| flat.column(j).sum() / n).collect();
        let cov = Array2::from_shape_fn((4, 4), |(i, j)| {
            (0..64).map(|r| (flat[[r, i]] - mean[i]) * (flat[[r, j]] - mean[j])).sum::<f64>() / (n - 1.0)
        });
        let oracle = jacobi_eigenvalues(cov);
        for (a, b) in fit.explained_variance.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let gram = fit.components.dot(&fit.components.t());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-8);
            }
        }
        assert!(!fit.degenerate());
    }

    #[test]
    fn constant_input_is_degenerate() {
        let x = Array3::from_elem((4, 4, 5), 2.5);
        let fit = joint_pca(&[x.view()], vec![], 3).unwrap();
        assert!(fit.degenerate());
        assert!(fit.maps[0].rgb.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_inputs_identical_maps_and_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(&mut rng, 4, 4, 6);
        let b = random_map(&mut rng, 4, 4, 6);
        let fit = joint_pca(&[a.view(), a.view()], vec![], 3).unwrap();
        assert_eq!(fit.maps[0].rgb, fit.maps[1].rgb);

        let ab = joint_pca(&[a.view(), b.view()], vec![], 3).unwrap();
        let ba = joint_pca(&[b.view(), a.view()], vec![], 3).unwrap();
        for (x, y) in ab.maps[0].rgb.iter().zip(ba.maps[1].rgb.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        let lo = ab.maps.iter().flat_map(|m| m.rgb.iter()).copied().fold(f64::INFINITY, f64::min);
        let hi = ab.maps.iter().flat_map(|m| m.rgb.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_fills_missing_channels() {
        // Two channels carry all variance; third principal component is zero.
        let x = Array3::from_shape_fn((4, 4, 3), |(i, j, c)| match c {
            0 => i as f64,
            1 => j as f64,
            _ => 1.0,
        });
        let fit = joint_pca(&[x.view()], vec![], 3).unwrap();
        assert_eq!(fit.rank, 2);
        assert!(fit.maps[0].degenerate);
        assert!(fit.maps[0].rgb.slice(s![.., .., 2]).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Array3::<f64>::zeros((2, 2, 3));
        let b = Array3::<f64>::zeros((2, 2, 4));
        assert!(joint_pca(&[a.view(), b.view()], vec![], 3).is_err());
        assert!(joint_pca(&[], vec![], 3).is_err());
        let tiny = Array3::<f64>::zeros((1, 2, 3));
        assert!(joint_pca(&[tiny.view()], vec![], 3).is_err());
    }
}
