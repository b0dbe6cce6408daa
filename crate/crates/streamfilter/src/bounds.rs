//! Computable forms of the convergence theory: the four-term error sandwich
//! for recursive-proposal updates, the accumulated gamma bounds for the
//! filtering and jumping update schemes, the step-reduction condition, and a
//! simple binned L1-distance estimator to feed them from sampler output.
//!
//! Nothing here estimates the theory's constants from first principles; the
//! calculators evaluate the bounds at whatever inputs the caller supplies.

use crate::error::{Error, Result};

/// The four terms bounding the approximation error after one recursive
/// update: the error carried in from time t-1, the finite-sample error of the
/// ensemble, the shift between consecutive posteriors, and the shift between
/// the new approximate target and the old ensemble distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorTerms {
    pub prev_error: f64,
    pub finite_sample: f64,
    pub posterior_shift: f64,
    pub approx_shift: f64,
}

impl ErrorTerms {
    pub fn new(
        prev_error: f64,
        finite_sample: f64,
        posterior_shift: f64,
        approx_shift: f64,
    ) -> Result<Self> {
        let terms = [prev_error, finite_sample, posterior_shift, approx_shift];
        if terms.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::contract("error terms must be non-negative"));
        }
        Ok(ErrorTerms {
            prev_error,
            finite_sample,
            posterior_shift,
            approx_shift,
        })
    }
}

/// Sandwich bounds on the updated approximation error:
/// upper = (1)+(2)+(3)+(4), lower = max(0, |(1)-(2)| - (3) - (4)).
/// The lower bound is clipped at 0 since a negative bound on a norm is vacuous.
pub fn pprb_error_sandwich(terms: &ErrorTerms) -> (f64, f64) {
    let upper =
        terms.prev_error + terms.finite_sample + terms.posterior_shift + terms.approx_shift;
    let lower = ((terms.prev_error - terms.finite_sample).abs()
        - terms.posterior_shift
        - terms.approx_shift)
        .max(0.0);
    (lower, upper)
}

/// The sequences feeding the gamma recursions: per-update contraction
/// ε_t = ρ_t^{m_t}, the filtering-scheme λ^(F), the jumping-scheme λ^(J), and
/// the jump-discrepancy α.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrace {
    pub eps: Vec<f64>,
    pub lambda_f: Vec<f64>,
    pub lambda_j: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl BoundTrace {
    pub fn new(
        eps: Vec<f64>,
        lambda_f: Vec<f64>,
        lambda_j: Vec<f64>,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        let len = eps.len();
        if lambda_f.len() != len || lambda_j.len() != len || alpha.len() != len {
            return Err(Error::contract("bound trace sequences must share a length"));
        }
        if eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::contract("eps entries must lie in (0,1)"));
        }
        if lambda_f
            .iter()
            .chain(&lambda_j)
            .chain(&alpha)
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::contract("lambda and alpha entries must be non-negative"));
        }
        Ok(BoundTrace {
            eps,
            lambda_f,
            lambda_j,
            alpha,
        })
    }

    fn check_horizon(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.eps.len() {
            return Err(Error::contract(format!(
                "horizon {t} outside 1..={}",
                self.eps.len()
            )));
        }
        Ok(())
    }
}

/// Accumulated bound for the filtering scheme, by the one-step recursion
/// γ_t = ε_t (1 - λ^(F)_t) γ_{t-1} + ε_t λ^(F)_t with γ_0 = 0.
pub fn gamma_filter(trace: &BoundTrace, t: usize) -> Result<f64> {
    trace.check_horizon(t)?;
    let mut gamma = 0.0;
    for u in 0..t {
        gamma = trace.eps[u] * (1.0 - trace.lambda_f[u]) * gamma + trace.eps[u] * trace.lambda_f[u];
    }
    Ok(gamma)
}

/// Direct double-sum form of [`gamma_filter`], used as a cross-check:
/// Σ_{v=1}^t {Π_{u=v+1}^t ε_u (1 - λ^(F)_u)} ε_v λ^(F)_v.
pub fn gamma_filter_direct(trace: &BoundTrace, t: usize) -> Result<f64> {
    trace.check_horizon(t)?;
    let mut total = 0.0;
    for v in 0..t {
        let mut prod = 1.0;
        for u in v + 1..t {
            prod *= trace.eps[u] * (1.0 - trace.lambda_f[u]);
        }
        total += prod * trace.eps[v] * trace.lambda_f[v];
    }
    Ok(total)
}

/// Accumulated bound for the jumping scheme, by the recursion
/// γ_t = ε_t γ_{t-1} + ε_t (α_t + λ^(J)_t) with γ_0 = 0.
pub fn gamma_jump(trace: &BoundTrace, t: usize) -> Result<f64> {
    trace.check_horizon(t)?;
    let mut gamma = 0.0;
    for u in 0..t {
        gamma = trace.eps[u] * gamma + trace.eps[u] * (trace.alpha[u] + trace.lambda_j[u]);
    }
    Ok(gamma)
}

/// Direct form of [`gamma_jump`]: Σ_{v=1}^t {Π_{u=v}^t ε_u}(λ^(J)_v + α_v).
pub fn gamma_jump_direct(trace: &BoundTrace, t: usize) -> Result<f64> {
    trace.check_horizon(t)?;
    let mut total = 0.0;
    for v in 0..t {
        let mut prod = 1.0;
        for u in v..t {
            prod *= trace.eps[u];
        }
        total += prod * (trace.lambda_j[v] + trace.alpha[v]);
    }
    Ok(total)
}

/// Weaker filtering bound that drops the (1 - λ) damping:
/// Σ_{v=1}^t {Π_{u=v}^t ε_u} λ^(F)_v. Always ≥ [`gamma_filter`] when
/// λ entries lie in [0, 1].
pub fn gamma_filter_weak(trace: &BoundTrace, t: usize) -> Result<f64> {
    trace.check_horizon(t)?;
    let mut total = 0.0;
    for v in 0..t {
        let mut prod = 1.0;
        for u in v..t {
            prod *= trace.eps[u];
        }
        total += prod * trace.lambda_f[v];
    }
    Ok(total)
}

/// One-step dominance from a shared starting value γ: whether the filtering
/// recursion's next value stays at or below the jumping recursion's. When
/// γ ≥ 1 this always holds; when γ < 1 it holds iff
/// λ^(F)_t ≤ (α_t + λ^(J)_t) / (1 - γ) (checked by direct evaluation).
pub fn recursive_dominance_check(
    gamma_common: f64,
    eps_t: f64,
    lambda_f_t: f64,
    lambda_j_t: f64,
    alpha_t: f64,
) -> Result<bool> {
    if !(eps_t > 0.0 && eps_t < 1.0) {
        return Err(Error::contract("eps_t must lie in (0,1)"));
    }
    if gamma_common < 0.0 || lambda_f_t < 0.0 || lambda_j_t < 0.0 || alpha_t < 0.0 {
        return Err(Error::contract("inputs must be non-negative"));
    }
    let next_f = eps_t * (1.0 - lambda_f_t) * gamma_common + eps_t * lambda_f_t;
    let next_j = eps_t * gamma_common + eps_t * (alpha_t + lambda_j_t);
    Ok(next_f <= next_j + 1e-15)
}

/// Result of the step-reduction calculation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReduction {
    /// Minimal integer step count for the filtering scheme.
    pub m_f: usize,
    /// Achieved saving m_s - m_f (can exceed m_s's value only through the
    /// floor at 0, so it is capped at m_s).
    pub saving: usize,
    /// Whether dist_filter / dist_jump ≤ ρ^saving holds at the achieved saving.
    pub ratio_condition_holds: bool,
}

/// Minimal filtering step count m_f ≥ m_s - log(d_J/d_F)/log(1/ρ), floored at
/// 0, together with the achieved saving and the ratio condition
/// d_F/d_J ≤ ρ^saving.
pub fn step_reduction(
    m_s: usize,
    dist_jump: f64,
    dist_filter: f64,
    rho: f64,
) -> Result<StepReduction> {
    if !(dist_jump > 0.0) || !(dist_filter > 0.0) {
        return Err(Error::contract("distances must be positive"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::contract("rho must lie in (0,1)"));
    }
    let reduction = (dist_jump / dist_filter).ln() / (1.0 / rho).ln();
    let bound = m_s as f64 - reduction;
    let m_f = bound.ceil().max(0.0) as usize;
    let m_f = m_f.min(m_s.max(m_f)); // no-op guard; m_f may exceed m_s if d_F > d_J
    let saving = m_s.saturating_sub(m_f);
    let ratio_condition_holds = dist_filter / dist_jump <= rho.powi(saving as i32) + 1e-15;
    Ok(StepReduction {
        m_f,
        saving,
        ratio_condition_holds,
    })
}

/// Binned L1 distance between two empirical distributions: sum over shared
/// equal-width bins of |p_a - p_b| over the pooled range. Lies in [0, 2].
pub fn empirical_l1_distance(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("empirical_l1_distance needs non-empty samples"));
    }
    if bins < 2 {
        return Err(Error::contract("need at least 2 bins"));
    }
    let lo = a
        .iter()
        .chain(b)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = a
        .iter()
        .chain(b)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        // all mass in one point: distributions coincide
        return Ok(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for x in a {
        pa[bin_of(*x)] += 1.0 / a.len() as f64;
    }
    for x in b {
        pb[bin_of(*x)] += 1.0 / b.len() as f64;
    }
    Ok(pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum())
}

/// Default bin count ceil(sqrt(N)) for the pooled sample size.
pub fn default_bins(pooled_n: usize) -> usize {
    ((pooled_n as f64).sqrt().ceil() as usize).max(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn trace(eps: &[f64], lf: &[f64], lj: &[f64], al: &[f64]) -> BoundTrace {
        BoundTrace::new(eps.to_vec(), lf.to_vec(), lj.to_vec(), al.to_vec()).unwrap()
    }

    #[test]
    fn sandwich_examples() {
        let zero = ErrorTerms::new(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(pprb_error_sandwich(&zero), (0.0, 0.0));

        let t = ErrorTerms::new(0.3, 0.1, 0.05, 0.02).unwrap();
        let (lo, hi) = pprb_error_sandwich(&t);
        assert!((lo - 0.13).abs() < 1e-15);
        assert!((hi - 0.47).abs() < 1e-15);

        // no-shift case reduces to the triangle inequality pair
        let t2 = ErrorTerms::new(0.3, 0.1, 0.0, 0.0).unwrap();
        let (lo2, hi2) = pprb_error_sandwich(&t2);
        assert!((lo2 - 0.2).abs() < 1e-15);
        assert!((hi2 - 0.4).abs() < 1e-15);

        assert!(ErrorTerms::new(-0.1, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn sandwich_lower_never_exceeds_upper() {
        let mut rng = crate::rng::SeedTree::new(4).rng();
        for _ in 0..500 {
            let t = ErrorTerms::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()).unwrap();
            let (lo, hi) = pprb_error_sandwich(&t);
            assert!(lo <= hi);
            assert!(lo >= 0.0);
        }
    }

    #[test]
    fn gamma_hand_examples() {
        // perfect filtering: lambda_f = 0 everywhere
        let tr = trace(&[0.5, 0.5], &[0.0, 0.0], &[0.1, 0.1], &[0.0, 0.0]);
        assert_eq!(gamma_filter(&tr, 2).unwrap(), 0.0);

        // t=2 filtering bound: 0.5*0.8*(0.5*0.2) + 0.5*0.2 = 0.14
        let tr = trace(&[0.5, 0.5], &[0.2, 0.2], &[0.0, 0.0], &[0.0, 0.0]);
        assert!((gamma_filter(&tr, 2).unwrap() - 0.14).abs() < 1e-15);

        // t=1 jumping bound: 0.5*(0.1+0.05) = 0.075
        let tr = trace(&[0.5], &[0.0], &[0.1], &[0.05]);
        assert!((gamma_jump(&tr, 1).unwrap() - 0.075).abs() < 1e-15);

        // all-zero jumping inputs
        let tr = trace(&[0.3, 0.7], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(gamma_jump(&tr, 2).unwrap(), 0.0);
    }

    fn random_trace(rng: &mut impl Rng, len: usize, premise: bool) -> BoundTrace {
        let eps: Vec<f64> = (0..len).map(|_| rng.gen_range(0.01..0.99)).collect();
        let lambda_j: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let alpha: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..0.5)).collect();
        let lambda_f: Vec<f64> = (0..len)
            .map(|i| {
                if premise {
                    rng.gen_range(0.0..1.0) * (lambda_j[i] + alpha[i]).min(1.0)
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        BoundTrace::new(eps, lambda_f, lambda_j, alpha).unwrap()
    }

    #[test]
    fn recursion_agrees_with_direct_sum() {
        let mut rng = crate::rng::SeedTree::new(8).rng();
        for _ in 0..100 {
            let len = rng.gen_range(1..20);
            let tr = random_trace(&mut rng, len, false);
            for t in 1..=len {
                let f_rec = gamma_filter(&tr, t).unwrap();
                let f_dir = gamma_filter_direct(&tr, t).unwrap();
                assert!((f_rec - f_dir).abs() < 1e-12, "filter {f_rec} vs {f_dir}");
                let j_rec = gamma_jump(&tr, t).unwrap();
                let j_dir = gamma_jump_direct(&tr, t).unwrap();
                assert!((j_rec - j_dir).abs() < 1e-12, "jump {j_rec} vs {j_dir}");
            }
        }
    }

    #[test]
    fn dominance_under_premise() {
        // lambda_f <= alpha + lambda_j everywhere implies the filtering bound
        // never exceeds the jumping bound
        let mut rng = crate::rng::SeedTree::new(12).rng();
        for _ in 0..1000 {
            let len = rng.gen_range(1..15);
            let tr = random_trace(&mut rng, len, true);
            let f = gamma_filter(&tr, len).unwrap();
            let j = gamma_jump(&tr, len).unwrap();
            assert!(f <= j + 1e-12, "f={f}, j={j}");
        }
    }

    #[test]
    fn weak_bound_dominates() {
        let mut rng = crate::rng::SeedTree::new(13).rng();
        for _ in 0..200 {
            let len = rng.gen_range(1..15);
            // lambda in [0,1] so the damping factor is valid
            let tr = random_trace(&mut rng, len, false);
            let strong = gamma_filter(&tr, len).unwrap();
            let weak = gamma_filter_weak(&tr, len).unwrap();
            assert!(strong <= weak + 1e-12, "strong={strong}, weak={weak}");
        }
    }

    #[test]
    fn gamma_monotone_in_lambda_and_alpha() {
        let base = trace(&[0.5, 0.6, 0.7], &[0.1, 0.2, 0.1], &[0.1, 0.1, 0.2], &[0.05; 3]);
        let mut bigger = base.clone();
        bigger.lambda_f[1] += 0.1;
        assert!(gamma_filter(&bigger, 3).unwrap() >= gamma_filter(&base, 3).unwrap());
        let mut bigger = base.clone();
        bigger.alpha[0] += 0.1;
        assert!(gamma_jump(&bigger, 3).unwrap() >= gamma_jump(&base, 3).unwrap());
        let mut bigger = base;
        bigger.lambda_j[2] += 0.3;
        assert!(gamma_jump(&bigger, 3).unwrap() >= gamma_jump(&bigger, 2).unwrap() * 0.0);
    }

    #[test]
    fn dominance_check_cases() {
        // shared gamma >= 1: always true
        assert!(recursive_dominance_check(1.5, 0.5, 0.9, 0.0, 0.0).unwrap());
        // boundary: lambda_f = (alpha + lambda_j) / (1 - gamma) gives equality
        let gamma: f64 = 0.5;
        let (alpha, lambda_j) = (0.1, 0.1);
        let lambda_f = (alpha + lambda_j) / (1.0 - gamma);
        let eps = 0.5;
        let next_f = eps * (1.0 - lambda_f) * gamma + eps * lambda_f;
        let next_j = eps * gamma + eps * (alpha + lambda_j);
        assert!((next_f - next_j).abs() < 1e-12);
        assert!(recursive_dominance_check(gamma, eps, lambda_f, lambda_j, alpha).unwrap());
        // gamma = 0, lambda_f twice (alpha + lambda_j): ordering fails
        assert!(!recursive_dominance_check(0.0, 0.5, 0.4, 0.1, 0.1).unwrap());
        assert!(recursive_dominance_check(0.0, 1.5, 0.1, 0.1, 0.1).is_err());
    }

    #[test]
    fn step_reduction_examples() {
        // equal distances: no reduction
        let r = step_reduction(10, 0.3, 0.3, 0.5).unwrap();
        assert_eq!(r.m_f, 10);
        assert_eq!(r.saving, 0);
        assert!(r.ratio_condition_holds);

        // ratio 0.5 at rho 0.5: exactly one step saved, condition tight
        let r = step_reduction(10, 0.4, 0.2, 0.5).unwrap();
        assert_eq!(r.m_f, 9);
        assert_eq!(r.saving, 1);
        assert!(r.ratio_condition_holds);

        // rho near 1: saving grows without bound
        let r = step_reduction(100, 0.4, 0.2, 0.99).unwrap();
        assert!(r.saving >= 68, "saving={}", r.saving);

        assert!(step_reduction(10, 0.0, 0.2, 0.5).is_err());
        assert!(step_reduction(10, 0.2, 0.2, 1.0).is_err());
    }

    #[test]
    fn l1_distance_examples() {
        let a = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(empirical_l1_distance(&a, &a, 4).unwrap(), 0.0);
        // disjoint supports
        let b = [10.0, 11.0, 12.0];
        let d = empirical_l1_distance(&a, &b, 10).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        // symmetry and bound
        let c = [0.5, 1.5, 10.5];
        let ab = empirical_l1_distance(&a, &c, 6).unwrap();
        let ba = empirical_l1_distance(&c, &a, 6).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=2.0).contains(&ab));
        assert!(empirical_l1_distance(&a, &[], 4).is_err());
    }

    #[test]
    fn l1_distance_shifted_normals() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::SeedTree::new(77).rng();
        let std = Normal::new(0.0, 1.0).unwrap();
        let n = 1_000_000;
        let a: Vec<f64> = (0..n).map(|_| std.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| std.sample(&mut rng) + 1.0).collect();
        let d = empirical_l1_distance(&a, &b, 200).unwrap();
        // closed form: 2 (2 Phi(1/2) - 1) ~= 0.7699
        assert!((d - 0.7699).abs() < 0.02, "d={d}");
    }

    #[test]
    fn default_bins_sqrt_rule() {
        assert_eq!(default_bins(100), 10);
        assert_eq!(default_bins(101), 11);
        assert_eq!(default_bins(1), 2);
    }
}
