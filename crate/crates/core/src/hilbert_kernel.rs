//! Second-level kernels acting on mean embeddings, and their continuity
//! moduli `‖Φ(x) − Φ(x')‖ ≤ α_k(‖x − x'‖)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kme::{distance_from_inners, inner, EmpiricalEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HilbertFamily {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHilbertKernel")]
pub struct HilbertKernel {
    pub family: HilbertFamily,
    /// Length scale in embedding-space norm units; `None` for the linear kernel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

#[derive(Deserialize)]
struct RawHilbertKernel {
    family: HilbertFamily,
    width: Option<f64>,
}

impl TryFrom<RawHilbertKernel> for HilbertKernel {
    type Error = Error;

    fn try_from(raw: RawHilbertKernel) -> Result<Self> {
        match raw.family {
            HilbertFamily::Gaussian => HilbertKernel::gaussian(
                raw.width.ok_or_else(|| Error::input("gaussian second-level kernel needs a width"))?,
            ),
            HilbertFamily::Linear => Ok(HilbertKernel::linear()),
        }
    }
}

impl HilbertKernel {
    pub fn gaussian(width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::input(format!("second-level width must be positive, got {width}")));
        }
        Ok(HilbertKernel { family: HilbertFamily::Gaussian, width: Some(width) })
    }

    pub fn linear() -> Self {
        HilbertKernel { family: HilbertFamily::Linear, width: None }
    }

    /// Same family with a different width (used by width schedules).
    pub fn with_width(&self, width: f64) -> Result<Self> {
        match self.family {
            HilbertFamily::Gaussian => Self::gaussian(width),
            HilbertFamily::Linear => Err(Error::unsupported("the linear kernel has no width")),
        }
    }

    pub fn eval(&self, e1: &EmpiricalEmbedding, e2: &EmpiricalEmbedding) -> Result<f64> {
        match self.family {
            HilbertFamily::Gaussian => self.eval_from_inners(inner(e1, e1)?, inner(e1, e2)?, inner(e2, e2)?),
            HilbertFamily::Linear => inner(e1, e2),
        }
    }

    /// Kernel value from the three base-RKHS inner products `⟨a,a⟩`,
    /// `⟨a,b⟩`, `⟨b,b⟩`.
    pub fn eval_from_inners(&self, aa: f64, ab: f64, bb: f64) -> Result<f64> {
        match self.family {
            HilbertFamily::Gaussian => {
                let d = distance_from_inners(aa, ab, bb)?;
                Ok(self.eval_at_distance(d))
            }
            HilbertFamily::Linear => Ok(ab),
        }
    }

    /// `exp(−s²/γ²)`; only meaningful for the Gaussian family.
    pub fn eval_at_distance(&self, s: f64) -> f64 {
        let w = self.width.unwrap_or(f64::INFINITY);
        (-(s * s) / (w * w)).exp()
    }

    /// Upper bound of `k(x, x)` over the input space, i.e. `‖k‖²_∞`.
    pub fn sup_norm(&self) -> Option<f64> {
        match self.family {
            HilbertFamily::Gaussian => Some(1.0),
            HilbertFamily::Linear => None,
        }
    }

    /// Feature-space distance `‖Φ(e1) − Φ(e2)‖ = √(2 − 2k(e1, e2))`.
    pub fn feature_distance(&self, e1: &EmpiricalEmbedding, e2: &EmpiricalEmbedding) -> Result<f64> {
        self.require_gaussian()?;
        let k = self.eval(e1, e2)?;
        Ok((2.0 - 2.0 * k).max(0.0).sqrt())
    }

    /// The exact modulus `s ↦ √(2 − 2e^{−s²/γ²})`.
    pub fn exact_modulus(&self, s: f64) -> Result<f64> {
        self.require_gaussian()?;
        Ok((2.0 - 2.0 * self.eval_at_distance(s)).max(0.0).sqrt())
    }

    /// Linear majorant of the exact modulus: from `1 − e^{−u} ≤ u`,
    /// `√(2 − 2e^{−s²/γ²}) ≤ (√2/γ)·s`.
    pub fn lipschitz_modulus(&self) -> Result<HolderModulus> {
        self.require_gaussian()?;
        HolderModulus::new(std::f64::consts::SQRT_2 / self.width.unwrap(), 1.0)
    }

    fn require_gaussian(&self) -> Result<()> {
        match self.family {
            HilbertFamily::Gaussian => Ok(()),
            HilbertFamily::Linear => Err(Error::unsupported("operation defined for the Gaussian second-level kernel only")),
        }
    }
}

/// Power-law modulus `α_k(s) = C_k s^α` with `α ∈ (0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderModulus {
    pub coefficient: f64,
    pub exponent: f64,
}

impl HolderModulus {
    pub fn new(coefficient: f64, exponent: f64) -> Result<Self> {
        if !(coefficient.is_finite() && coefficient > 0.0) {
            return Err(Error::input(format!("modulus coefficient must be positive, got {coefficient}")));
        }
        if !(exponent > 0.0 && exponent <= 2.0) {
            return Err(Error::input(format!("modulus exponent must lie in (0, 2], got {exponent}")));
        }
        Ok(HolderModulus { coefficient, exponent })
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.coefficient * s.max(0.0).powf(self.exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_kernels::BaseKernel;
    use crate::kme::{embed, rkhs_distance, SampleSet};
    use crate::rng::{tag, StreamRng};
    use nalgebra::DMatrix;

    fn atom(k: &BaseKernel, x: f64) -> EmpiricalEmbedding {
        EmpiricalEmbedding::from_atoms(k, vec![vec![x]], vec![1.0]).unwrap()
    }

    fn random_embeddings(n: usize, seed: u64) -> Vec<EmpiricalEmbedding> {
        let k = BaseKernel::gaussian(1.0, 2).unwrap();
        (0..n as u64)
            .map(|i| {
                let mut rng = StreamRng::new(seed, tag::AUX, i);
                let shift = 2.0 * rng.normal();
                let m = 1 + (rng.uniform() * 6.0) as usize;
                let data = (0..2 * m).map(|j| if j % 2 == 0 { shift } else { 0.0 } + 0.7 * rng.normal()).collect();
                embed(&k, &SampleSet::from_flat(data, 2).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn gaussian_examples() {
        let k = BaseKernel::gaussian(1.0, 1).unwrap();
        let hk = HilbertKernel::gaussian(1.0).unwrap();
        let (a, b) = (atom(&k, 0.0), atom(&k, 1.0));
        assert!((hk.eval(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((hk.eval(&a, &b).unwrap() - 0.282_453_563_850_540_3).abs() < 1e-10);
        let mut last = 0.0;
        for w in [0.5, 1.0, 2.0, 10.0, 100.0] {
            let v = HilbertKernel::gaussian(w).unwrap().eval(&a, &b).unwrap();
            assert!(v > last);
            last = v;
        }
        assert!(last > 0.9998);
    }

    #[test]
    fn linear_is_base_inner() {
        let k = BaseKernel::gaussian(1.0, 1).unwrap();
        let hk = HilbertKernel::linear();
        let (a, b) = (atom(&k, 0.0), atom(&k, 1.0));
        assert!((hk.eval(&a, &b).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(hk.lipschitz_modulus(), Err(Error::Unsupported(_))));
        assert!(matches!(hk.feature_distance(&a, &b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn feature_distance_examples() {
        let k = BaseKernel::gaussian(1.0, 1).unwrap();
        let hk = HilbertKernel::gaussian(1.0).unwrap();
        let a = atom(&k, 0.0);
        assert_eq!(hk.feature_distance(&a, &a).unwrap(), 0.0);
        // Embedding distance equal to γ.
        let v = hk.exact_modulus(1.0).unwrap();
        assert!((v - 1.124_384_772_956_800_3).abs() < 1e-7);
        let b = atom(&k, 3.0);
        assert!(hk.feature_distance(&a, &b).unwrap() <= 2f64.sqrt());
    }

    #[test]
    fn lipschitz_modulus_values_and_domination() {
        let m1 = HilbertKernel::gaussian(1.0).unwrap().lipschitz_modulus().unwrap();
        assert!((m1.coefficient - 1.414_213_562_373_095).abs() < 1e-7);
        assert_eq!(m1.exponent, 1.0);
        let hk2 = HilbertKernel::gaussian(2.0).unwrap();
        let m2 = hk2.lipschitz_modulus().unwrap();
        assert!((m2.coefficient - 0.707_106_781_186_547_5).abs() < 1e-7);
        for s in [0.01, 0.1, 1.0, 10.0] {
            assert!(hk2.exact_modulus(s).unwrap() <= m2.eval(s));
            assert!(HilbertKernel::gaussian(1.0).unwrap().exact_modulus(s).unwrap() <= m1.eval(s));
        }
    }

    #[test]
    fn holder_modulus_validation() {
        assert!(HolderModulus::new(1.0, 0.0).is_err());
        assert!(HolderModulus::new(1.0, 2.5).is_err());
        assert!(HolderModulus::new(0.0, 1.0).is_err());
        let m = HolderModulus::new(2.0, 0.5).unwrap();
        assert_eq!(m.eval(0.0), 0.0);
        assert!(m.eval(0.5) < m.eval(1.0));
    }

    #[test]
    fn config_parsing() {
        let hk: HilbertKernel = serde_json::from_str(r#"{"family": "gaussian", "width": 0.5}"#).unwrap();
        assert_eq!(hk, HilbertKernel::gaussian(0.5).unwrap());
        assert!(serde_json::from_str::<HilbertKernel>(r#"{"family": "gaussian"}"#).is_err());
        let lin: HilbertKernel = serde_json::from_str(r#"{"family": "linear"}"#).unwrap();
        assert_eq!(lin.family, HilbertFamily::Linear);
    }

    #[test]
    fn gram_is_psd() {
        let es = random_embeddings(20, 1);
        let hk = HilbertKernel::gaussian(0.6).unwrap();
        let g = DMatrix::from_fn(20, 20, |i, j| hk.eval(&es[i], &es[j]).unwrap());
        assert!(g.symmetric_eigenvalues().min() >= -1e-8 * 20.0);
    }

    #[test]
    fn feature_distance_is_a_metric_and_dominated() {
        let es = random_embeddings(150, 2);
        let hk = HilbertKernel::gaussian(0.8).unwrap();
        let modulus = hk.lipschitz_modulus().unwrap();
        for t in es.chunks(3).take(50) {
            let d01 = hk.feature_distance(&t[0], &t[1]).unwrap();
            let d12 = hk.feature_distance(&t[1], &t[2]).unwrap();
            let d02 = hk.feature_distance(&t[0], &t[2]).unwrap();
            assert!(d02 <= d01 + d12 + 1e-9);
        }
        for p in es.chunks(2).take(75) {
            let s = rkhs_distance(&p[0], &p[1]).unwrap();
            assert!(hk.feature_distance(&p[0], &p[1]).unwrap() <= modulus.eval(s) + 1e-15);
        }
    }
}
