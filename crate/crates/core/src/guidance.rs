//! Guidance amplification of tapped features:
//! `X(s) = X_uncond + s * (X_cond - X_uncond)`, applied post hoc to two stored
//! passes that share image, tap, timestep and noise seed.

use ndarray::Array3;

use crate::analysis::{joint_pca, JointPca};
use crate::array::Element;
use crate::backbone::FeatureTensor;
use crate::error::{Error, Result};

/// Unconditional and conditional features of the same pass geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePair<T = f32> {
    uncond: FeatureTensor<T>,
    cond: FeatureTensor<T>,
}

impl<T: Element> GuidancePair<T> {
    pub fn new(uncond: FeatureTensor<T>, cond: FeatureTensor<T>) -> Result<Self> {
        let (u, c) = (&uncond.provenance, &cond.provenance);
        let mut differing = Vec::new();
        if u.image_id != c.image_id {
            differing.push("image_id");
        }
        if u.block != c.block {
            differing.push("block");
        }
        if u.timestep != c.timestep {
            differing.push("timestep");
        }
        if u.seed != c.seed {
            differing.push("seed");
        }
        if uncond.values.dim() != cond.values.dim() {
            differing.push("shape");
        }
        if !differing.is_empty() {
            return Err(Error::ProvenanceMismatch(differing));
        }
        Ok(Self { uncond, cond })
    }

    pub fn uncond(&self) -> &FeatureTensor<T> {
        &self.uncond
    }

    pub fn cond(&self) -> &FeatureTensor<T> {
        &self.cond
    }

    /// Exchanges the two roles.
    pub fn swapped(&self) -> Self {
        Self {
            uncond: self.cond.clone(),
            cond: self.uncond.clone(),
        }
    }
}

/// Evaluated as `(1 - s) * X_u + s * X_c`, which is exact at `s = 0` and `s = 1`.
pub fn amplify<T: Element>(pair: &GuidancePair<T>, scale: f64) -> Result<FeatureTensor<T>> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("guidance scale {scale} must be finite and >= 0")));
    }
    let s = T::lit(scale);
    let one_minus = T::lit(1.0 - scale);
    let mut values = pair.uncond.values.mapv(|u| one_minus * u);
    values.zip_mut_with(&pair.cond.values, |v, &c| *v = *v + s * c);
    let mut provenance = pair.cond.provenance.clone();
    provenance.guidance_scale = scale;
    FeatureTensor::new(values, provenance)
}

/// `X_cond - X_uncond`, carrying the conditional provenance.
pub fn conditional_delta<T: Element>(pair: &GuidancePair<T>) -> FeatureTensor<T> {
    FeatureTensor {
        values: &pair.cond.values - &pair.uncond.values,
        provenance: pair.cond.provenance.clone(),
    }
}

fn to_f64<T: Element>(a: &Array3<T>) -> Array3<f64> {
    a.mapv(|v| v.to_f64().unwrap())
}

/// Joint PCA over the deltas of several pairs.
pub fn delta_pca_map<T: Element>(pairs: &[GuidancePair<T>], k: usize) -> Result<JointPca> {
    let deltas: Vec<_> = pairs.iter().map(conditional_delta).collect();
    let arrays: Vec<Array3<f64>> = deltas.iter().map(|d| to_f64(&d.values)).collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    joint_pca(&views, deltas.iter().map(|d| format!("delta:{}", d.provenance)).collect(), k)
}

/// One map per scale, all projected on a basis fitted jointly across the sweep.
pub fn amplified_sweep_pca<T: Element>(pair: &GuidancePair<T>, scales: &[f64], k: usize) -> Result<JointPca> {
    let amplified = scales.iter().map(|&s| amplify(pair, s)).collect::<Result<Vec<_>>>()?;
    let arrays: Vec<Array3<f64>> = amplified.iter().map(|f| to_f64(&f.values)).collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    joint_pca(&views, amplified.iter().map(|f| f.provenance.to_string()).collect(), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Provenance;
    use proptest::prelude::*;

    fn tensor<T: Element>(values: Array3<T>, prompt: &str, scale: f64) -> FeatureTensor<T> {
        FeatureTensor::new(
            values,
            Provenance {
                image_id: "img".into(),
                block: "U-L1-R1-B0-Cross-Q".parse().unwrap(),
                timestep: 50,
                guidance_scale: scale,
                prompt_hash: crate::hashing::prompt_hash(prompt),
                seed: 0,
            },
        )
        .unwrap()
    }

    fn pair_f64(u: Vec<f64>, c: Vec<f64>) -> GuidancePair<f64> {
        GuidancePair::new(
            tensor(Array3::from_shape_vec((2, 2, 3), u).unwrap(), "", 0.0),
            tensor(Array3::from_shape_vec((2, 2, 3), c).unwrap(), "a cat", 1.0),
        )
        .unwrap()
    }

    #[test]
    fn closed_form_and_provenance() {
        let v = Array3::from_shape_fn((2, 2, 3), |(i, j, k)| (i + 2 * j + 3 * k) as f64 - 2.5);
        let pair = GuidancePair::new(tensor(Array3::zeros((2, 2, 3)), "", 0.0), tensor(v.clone(), "a cat", 1.0)).unwrap();
        let out = amplify(&pair, 7.0).unwrap();
        assert_eq!(out.values, v.mapv(|x| 7.0 * x));
        assert_eq!(out.provenance.guidance_scale, 7.0);
        assert_eq!(out.provenance.prompt_hash, crate::hashing::prompt_hash("a cat"));
        assert!(amplify(&pair, -1.0).is_err());
        assert!(amplify(&pair, f64::NAN).is_err());
    }

    #[test]
    fn zero_delta() {
        let v = Array3::from_elem((2, 2, 3), 0.5);
        let pair = GuidancePair::new(tensor(v.clone(), "", 0.0), tensor(v, "", 1.0)).unwrap();
        assert!(conditional_delta(&pair).values.iter().all(|&x| x == 0.0));
        let fit = delta_pca_map(&[pair], 3).unwrap();
        assert!(fit.degenerate());
        assert!(fit.maps[0].rgb.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn mismatch_lists_fields() {
        let u = tensor(Array3::<f32>::zeros((2, 2, 3)), "", 0.0);
        let mut c = tensor(Array3::<f32>::zeros((2, 2, 4)), "x", 1.0);
        c.provenance.seed = 1;
        c.provenance.timestep = 10;
        match GuidancePair::new(u, c) {
            Err(Error::ProvenanceMismatch(f)) => assert_eq!(f, vec!["timestep", "seed", "shape"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_shares_basis() {
        let pair = pair_f64((0..12).map(|i| (i as f64).sin()).collect(), (0..12).map(|i| (i as f64).cos()).collect());
        let fit = amplified_sweep_pca(&pair, &[0.0, 1.0, 4.0, 7.0], 3).unwrap();
        assert_eq!(fit.maps.len(), 4);
        assert!(fit.maps.iter().all(|m| m.explained_variance == fit.explained_variance));
    }

    proptest! {
        #[test]
        fn endpoints_exact_and_affine(
            u in prop::collection::vec(-100.0f64..100.0, 12),
            c in prop::collection::vec(-100.0f64..100.0, 12),
            s1 in 0.0f64..8.0,
            s2 in 0.0f64..8.0,
        ) {
            let pair = pair_f64(u, c);
            prop_assert_eq!(&amplify(&pair, 0.0).unwrap().values, &pair.uncond().values);
            prop_assert_eq!(&amplify(&pair, 1.0).unwrap().values, &pair.cond().values);

            let delta = conditional_delta(&pair);
            let a = amplify(&pair, s1).unwrap();
            for ((x, u), d) in a.values.iter().zip(pair.uncond().values.iter()).zip(delta.values.iter()) {
                prop_assert!((x - u - s1 * d).abs() <= 1e-9 * (1.0 + x.abs()));
            }
            let back = conditional_delta(&pair.swapped());
            prop_assert_eq!(back.values, delta.values.mapv(|v| -v));

            let pf = GuidancePair::new(
                tensor(pair.uncond().values.mapv(|v| v as f32), "", 0.0),
                tensor(pair.cond().values.mapv(|v| v as f32), "a", 1.0),
            ).unwrap();
            let a1 = amplify(&pf, s1).unwrap().values;
            let a2 = amplify(&pf, s2).unwrap().values;
            let am = amplify(&pf, (s1 + s2) / 2.0).unwrap().values;
            let scale = 1.0 + pf.uncond().values.iter().chain(pf.cond().values.iter()).fold(0.0f32, |m, v| m.max(v.abs()));
            for ((x, y), z) in a1.iter().zip(a2.iter()).zip(am.iter()) {
                // f32 residual relative to the feature magnitude.
                prop_assert!(((x + y - 2.0 * z) / (scale * 8.0)).abs() <= 1e-6);
            }
        }
    }
}
