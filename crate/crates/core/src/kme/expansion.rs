//! Finite feature expansion of the Gaussian base kernel.
//!
//! With `u = x/γ₁`, `exp(−‖u − v‖²) = e^{−‖u‖²} e^{−‖v‖²} Σₙ (2⟨u, v⟩)ⁿ / n!`,
//! which factors into tensor-product features
//! `φₙ(u) = Πₖ e^{−uₖ²} (√2 uₖ)^{nₖ} / √(nₖ!)` over multi-indices `n`.
//! Truncating at total degree `P` leaves an error bounded by the upper tail
//! `P[Poisson(2R²) > P]`, where `R` bounds the scaled norms of all atoms, and
//! the sum of absolute terms never exceeds 1, so there is no cancellation.
//!
//! Mean embeddings then become fixed-length vectors whose dot products equal
//! the Gram double sums to within the truncation tolerance. This is what
//! makes bag sizes in the millions affordable: a bag costs `M·len()` work
//! instead of `M²` per pair.

use crate::base_kernels::{BaseFamily, BaseKernel};
use crate::error::{Error, Result};

use super::EmpiricalEmbedding;

const MAX_FEATURES: usize = 250_000;
const MAX_DEGREE: usize = 400;

#[derive(Debug, Clone)]
pub struct GaussianExpansion {
    kernel: BaseKernel,
    degree: usize,
    /// Multi-indices of total degree ≤ `degree`, flattened `len × dim`.
    indices: Vec<u16>,
    /// `√(2/n)` for n = 1..=degree.
    ratios: Vec<f64>,
}

impl GaussianExpansion {
    /// Builds an expansion accurate to `tol` (absolute, per kernel value) for
    /// all atoms whose norm is at most `radius` in sampling-space units.
    pub fn new(kernel: &BaseKernel, radius: f64, tol: f64) -> Result<Self> {
        if kernel.family != BaseFamily::Gaussian {
            return Err(Error::unsupported("feature expansion exists only for the Gaussian base kernel"));
        }
        if !(radius >= 0.0 && radius.is_finite()) || !(tol > 0.0 && tol < 1.0) {
            return Err(Error::input("expansion radius must be finite and tolerance in (0, 1)"));
        }
        let scaled = radius / kernel.width;
        let degree = degree_for(2.0 * scaled * scaled, tol)
            .ok_or_else(|| Error::unsupported(format!("radius {radius} needs degree above {MAX_DEGREE}")))?;
        Self::with_degree(kernel, degree)
    }

    pub fn with_degree(kernel: &BaseKernel, degree: usize) -> Result<Self> {
        if kernel.family != BaseFamily::Gaussian {
            return Err(Error::unsupported("feature expansion exists only for the Gaussian base kernel"));
        }
        let dim = kernel.dim;
        let count = binomial(degree + dim, dim);
        if count > MAX_FEATURES {
            return Err(Error::unsupported(format!(
                "expansion of degree {degree} in dimension {dim} needs {count} features"
            )));
        }
        let mut indices = Vec::with_capacity(count * dim);
        let mut current = vec![0u16; dim];
        for total in 0..=degree {
            push_compositions(total, 0, &mut current, &mut indices);
        }
        let ratios = (1..=degree).map(|n| (2.0 / n as f64).sqrt()).collect();
        Ok(GaussianExpansion { kernel: *kernel, degree, indices, ratios })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.kernel.dim
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn kernel(&self) -> &BaseKernel {
        &self.kernel
    }

    /// Adds `weight · φ(x)` into `acc`.
    pub fn accumulate_point(&self, x: &[f64], weight: f64, acc: &mut [f64], scratch: &mut Vec<f64>) {
        let dim = self.kernel.dim;
        let stride = self.degree + 1;
        scratch.resize(dim * stride, 0.0);
        for (k, &xk) in x.iter().enumerate() {
            let u = xk / self.kernel.width;
            let row = &mut scratch[k * stride..(k + 1) * stride];
            row[0] = (-u * u).exp();
            for n in 1..stride {
                row[n] = row[n - 1] * u * self.ratios[n - 1];
            }
        }
        self.combine(scratch, weight, acc);
    }

    /// Adds `weight · Σ φ(x)` over a flat row-major batch of points into `acc`.
    /// In one dimension the power recursion runs across the batch, which
    /// vectorizes; otherwise this is [`Self::accumulate_point`] per row.
    pub fn accumulate_points(&self, flat: &[f64], weight: f64, acc: &mut [f64], scratch: &mut Vec<f64>) {
        let dim = self.kernel.dim;
        if dim != 1 {
            for x in flat.chunks_exact(dim) {
                self.accumulate_point(x, weight, acc, scratch);
            }
            return;
        }
        let n = flat.len();
        scratch.resize(2 * n, 0.0);
        let (u, p) = scratch.split_at_mut(n);
        let inv = 1.0 / self.kernel.width;
        for ((ub, pb), &x) in u.iter_mut().zip(p.iter_mut()).zip(flat) {
            *ub = x * inv;
            *pb = (-*ub * *ub).exp();
        }
        acc[0] += weight * p.iter().sum::<f64>();
        // p holds e^{-u²}uⁿ; the factor √(2ⁿ/n!) is applied to the sum.
        let mut coef = weight;
        for k in 1..=self.degree {
            coef *= self.ratios[k - 1];
            let mut sum = 0.0;
            for (pb, ub) in p.iter_mut().zip(u.iter()) {
                *pb *= ub;
                sum += *pb;
            }
            acc[k] += coef * sum;
        }
    }

    /// Adds `weight · E[φ(X)]` for `X ~ N(mean, spread² I)` into `acc`.
    pub fn accumulate_gaussian(&self, mean: &[f64], spread: f64, weight: f64, acc: &mut [f64], scratch: &mut Vec<f64>) {
        let dim = self.kernel.dim;
        let stride = self.degree + 1;
        scratch.resize(dim * stride, 0.0);
        let tau2 = (spread / self.kernel.width).powi(2);
        let shrink = 1.0 + 2.0 * tau2;
        for (k, &mk) in mean.iter().enumerate() {
            let mu = mk / self.kernel.width;
            let row = &mut scratch[k * stride..(k + 1) * stride];
            // e^{-u²} N(u | μ, τ²) = Z · N(u | μ', τ'²)
            let z = (-mu * mu / shrink).exp() / shrink.sqrt();
            let mu_p = mu / shrink;
            let tau2_p = tau2 / shrink;
            row[0] = z;
            if stride > 1 {
                row[1] = mu_p * self.ratios[0] * z;
            }
            for n in 2..stride {
                let nf = n as f64;
                row[n] = mu_p * self.ratios[n - 1] * row[n - 1]
                    + 2.0 * tau2_p * ((nf - 1.0) / nf).sqrt() * row[n - 2];
            }
        }
        self.combine(scratch, weight, acc);
    }

    fn combine(&self, rows: &[f64], weight: f64, acc: &mut [f64]) {
        let dim = self.kernel.dim;
        let stride = self.degree + 1;
        if dim == 1 {
            for (a, r) in acc.iter_mut().zip(rows) {
                *a += weight * r;
            }
            return;
        }
        for (a, idx) in acc.iter_mut().zip(self.indices.chunks_exact(dim)) {
            let mut p = weight;
            for (k, &n) in idx.iter().enumerate() {
                p *= rows[k * stride + n as usize];
            }
            *a += p;
        }
    }

    /// Mean feature vector of a bag given as a flat row-major buffer.
    pub fn bag_features(&self, flat_points: &[f64]) -> Vec<f64> {
        let dim = self.kernel.dim;
        let m = flat_points.len() / dim;
        let mut acc = vec![0.0; self.len()];
        let mut scratch = Vec::new();
        self.accumulate_points(flat_points, 1.0 / m as f64, &mut acc, &mut scratch);
        acc
    }

    /// Feature vector of an arbitrary expansion (point and Gaussian atoms).
    pub fn features(&self, e: &EmpiricalEmbedding) -> Result<Vec<f64>> {
        if e.kernel() != &self.kernel {
            return Err(Error::input("embedding uses a different base kernel than the expansion"));
        }
        let mut acc = vec![0.0; self.len()];
        let mut scratch = Vec::new();
        for i in 0..e.len() {
            let s = e.spreads()[i];
            if s == 0.0 {
                self.accumulate_point(e.point(i), e.weights()[i], &mut acc, &mut scratch);
            } else {
                self.accumulate_gaussian(e.point(i), s, e.weights()[i], &mut acc, &mut scratch);
            }
        }
        Ok(acc)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn push_compositions(remaining: usize, pos: usize, current: &mut [u16], out: &mut Vec<u16>) {
    let dim = current.len();
    if pos == dim - 1 {
        current[pos] = remaining as u16;
        out.extend_from_slice(current);
        return;
    }
    for n in (0..=remaining).rev() {
        current[pos] = n as u16;
        push_compositions(remaining - n, pos + 1, current, out);
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
        if r > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    r as usize
}

/// Smallest `P` with `P[Poisson(rate) > P] ≤ tol`.
fn degree_for(rate: f64, tol: f64) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&p| poisson_upper_tail(rate, p) <= tol)
}

fn poisson_upper_tail(rate: f64, p: usize) -> f64 {
    if rate == 0.0 {
        return 0.0;
    }
    let ln_rate = rate.ln();
    let mut ln_pmf = -rate;
    for n in 1..=p + 1 {
        ln_pmf += ln_rate - (n as f64).ln();
    }
    let mut tail = 0.0;
    let mut n = p + 1;
    loop {
        let term = ln_pmf.exp();
        tail += term;
        n += 1;
        ln_pmf += ln_rate - (n as f64).ln();
        if (n as f64) > rate && term < tail * 1e-17 {
            break;
        }
        if n > p + 10_000 {
            break;
        }
    }
    tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kme::{embed, gaussian_family_kme_inner, inner, SampleSet};
    use crate::rng::{tag, StreamRng};

    #[test]
    fn feature_counts() {
        let k1 = BaseKernel::gaussian(1.0, 1).unwrap();
        assert_eq!(GaussianExpansion::with_degree(&k1, 10).unwrap().len(), 11);
        let k2 = BaseKernel::gaussian(1.0, 2).unwrap();
        assert_eq!(GaussianExpansion::with_degree(&k2, 10).unwrap().len(), 66);
        let k3 = BaseKernel::gaussian(1.0, 3).unwrap();
        assert_eq!(GaussianExpansion::with_degree(&k3, 4).unwrap().len(), 35);
    }

    #[test]
    fn poisson_tail_is_monotone_and_small() {
        assert!(poisson_upper_tail(5.0, 5) > poisson_upper_tail(5.0, 10));
        assert!(poisson_upper_tail(5.0, 40) < 1e-15);
        assert_eq!(degree_for(0.0, 1e-12), Some(0));
    }

    #[test]
    fn batched_points_match_single_points() {
        let k = BaseKernel::gaussian(2.0, 1).unwrap();
        let x = GaussianExpansion::new(&k, 5.0, 1e-12).unwrap();
        let mut rng = StreamRng::new(4, tag::AUX, 0);
        let pts: Vec<f64> = (0..257).map(|_| 1.5 * rng.normal()).collect();
        let mut batched = vec![0.0; x.len()];
        let mut single = vec![0.0; x.len()];
        let mut scratch = Vec::new();
        x.accumulate_points(&pts, 0.25, &mut batched, &mut scratch);
        for p in &pts {
            x.accumulate_point(std::slice::from_ref(p), 0.25, &mut single, &mut scratch);
        }
        for (a, b) in batched.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_laplacian() {
        let k = BaseKernel::laplacian(1.0, 1).unwrap();
        assert!(matches!(GaussianExpansion::new(&k, 1.0, 1e-12), Err(Error::Unsupported(_))));
    }

    #[test]
    fn point_features_reproduce_kernel_values() {
        for dim in [1usize, 2, 3] {
            let k = BaseKernel::gaussian(1.3, dim).unwrap();
            let ex = GaussianExpansion::new(&k, 2.5, 1e-13).unwrap();
            let mut rng = StreamRng::new(3, tag::AUX, dim as u64);
            let mut scratch = Vec::new();
            for _ in 0..50 {
                let x: Vec<f64> = (0..dim).map(|_| rng.uniform() * 2.8 / (dim as f64).sqrt() - 1.4 / (dim as f64).sqrt()).collect();
                let y: Vec<f64> = (0..dim).map(|_| rng.uniform() * 2.8 / (dim as f64).sqrt() - 1.4 / (dim as f64).sqrt()).collect();
                let mut fx = vec![0.0; ex.len()];
                let mut fy = vec![0.0; ex.len()];
                ex.accumulate_point(&x, 1.0, &mut fx, &mut scratch);
                ex.accumulate_point(&y, 1.0, &mut fy, &mut scratch);
                let direct = k.eval(&x, &y).unwrap();
                assert!((dot(&fx, &fy) - direct).abs() < 1e-12, "dim {dim}");
            }
        }
    }

    #[test]
    fn bag_features_match_direct_double_sums() {
        let k = BaseKernel::gaussian(1.0, 1).unwrap();
        let ex = GaussianExpansion::new(&k, 4.0, 1e-13).unwrap();
        let mut rng = StreamRng::new(4, tag::AUX, 0);
        let a: Vec<f64> = (0..300).map(|_| 0.8 + 0.5 * rng.normal()).map(|v: f64| v.clamp(-4.0, 4.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| -0.8 + 0.5 * rng.normal()).map(|v: f64| v.clamp(-4.0, 4.0)).collect();
        let ea = embed(&k, &SampleSet::from_flat(a.clone(), 1).unwrap()).unwrap();
        let eb = embed(&k, &SampleSet::from_flat(b.clone(), 1).unwrap()).unwrap();
        let (fa, fb) = (ex.bag_features(&a), ex.bag_features(&b));
        assert!((dot(&fa, &fb) - inner(&ea, &eb).unwrap()).abs() < 1e-12);
        assert!((dot(&fa, &fa) - inner(&ea, &ea).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_atom_features_match_closed_form() {
        for dim in [1usize, 2] {
            let k = BaseKernel::gaussian(1.0, dim).unwrap();
            let ex = GaussianExpansion::new(&k, 4.5, 1e-14).unwrap();
            let cases = [(0.7, 0.5, -0.9, 0.3), (1.2, 0.25, 1.5, 0.25), (-1.0, 0.0, 0.4, 0.6)];
            for (m1, s1, m2, s2) in cases {
                let a = vec![m1; dim];
                let b = vec![m2 / dim as f64; dim];
                let ea = EmpiricalEmbedding::exact_gaussian(&k, &a, s1).unwrap();
                let eb = EmpiricalEmbedding::exact_gaussian(&k, &b, s2).unwrap();
                let v = dot(&ex.features(&ea).unwrap(), &ex.features(&eb).unwrap());
                let exact = gaussian_family_kme_inner(&a, s1, &b, s2, &k).unwrap();
                assert!((v - exact).abs() < 1e-12, "dim {dim}: {v} vs {exact}");
            }
        }
    }
}
