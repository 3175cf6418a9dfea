//! Closed-form guarantees and empirical performance metrics.
//!
//! Covers the horizon-truncation constants, the probability bounds on the
//! feasible-set sandwich and on FTAL's final selection, the gap structure
//! behind the expected-regret bounds, and the regret/rate measurements they
//! are compared against.

use crate::error::{Error, Result};
use crate::model::CmdpModel;
use crate::selector::IterationRecord;

/// Worst-case tail of a truncated discounted sum: `discount^h * bound / (1 - discount)`.
pub fn truncation_tail(discount: f64, bound: f64, horizon: usize) -> f64 {
    discount.powi(horizon as i32) * bound / (1.0 - discount)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationConstants {
    /// Cost truncation error, `beta^H C_max / (1 - beta)`.
    pub alpha_h: f64,
    /// Reward truncation error, `gamma^H R_max / (1 - gamma)`.
    pub r_h: f64,
}

pub fn truncation_constants(model: &CmdpModel, horizon: usize) -> TruncationConstants {
    TruncationConstants {
        alpha_h: truncation_tail(model.beta, model.c_max, horizon),
        r_h: truncation_tail(model.gamma, model.r_max, horizon),
    }
}

/// A probability lower bound; `raw` may fall outside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityBound {
    pub raw: f64,
    pub clamped: f64,
}

impl ProbabilityBound {
    fn new(raw: f64) -> Self {
        Self {
            raw,
            clamped: raw.clamp(0.0, 1.0),
        }
    }
}

/// Lower bound on the probability that the estimated feasible set after `n`
/// iterations sits between the `-epsilon` and `+epsilon` feasible sets:
/// `1 - 2|Pi| exp(-2 (epsilon - alpha_h)^2 n)`.
pub fn theorem1_bound(num_policies: usize, epsilon: f64, alpha_h: f64, n: u64) -> Result<ProbabilityBound> {
    if !(epsilon > alpha_h) {
        return Err(Error::Precondition(format!(
            "epsilon ({epsilon}) must exceed alpha_H ({alpha_h})"
        )));
    }
    if n < 1 {
        return Err(Error::Precondition("N must be at least 1".into()));
    }
    let gap = epsilon - alpha_h;
    let raw = 1.0 - 2.0 * num_policies as f64 * (-2.0 * gap * gap * n as f64).exp();
    Ok(ProbabilityBound::new(raw))
}

/// Smallest `n` whose sandwich bound reaches `target`.
pub fn theorem1_min_n(num_policies: usize, epsilon: f64, alpha_h: f64, target: f64) -> Result<u64> {
    if !(target < 1.0) {
        return Err(Error::Precondition(format!("target {target} must be below 1")));
    }
    let reaches = |n: u64| theorem1_bound(num_policies, epsilon, alpha_h, n).map(|b| b.raw >= target);
    let mut hi = 1u64;
    while !reaches(hi)? {
        hi = hi.checked_mul(2).ok_or_else(|| Error::Precondition("target unreachable".into()))?;
    }
    let mut lo = 0u64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// The constant in the exponential feasible-set convergence rate,
/// `c(epsilon, H) = exp(-2 (epsilon - alpha_H)^2)`, so the sandwich failure
/// probability is at most `2|Pi| c^N`.
pub fn rate_constant(epsilon: f64, alpha_h: f64) -> f64 {
    (-2.0 * (epsilon - alpha_h).powi(2)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Bound {
    pub feasibility: ProbabilityBound,
    /// `1 - sum of 2 exp(-2 (gap/2 - r_H)^2 N)` over the non-best estimated-feasible policies.
    pub selection: ProbabilityBound,
    pub product: ProbabilityBound,
    /// Maximizer of the exact value over the estimated feasible set.
    pub best: usize,
    /// Policies whose half gap does not exceed `r_H`; their term is taken as 1.
    pub vacuous: Vec<usize>,
}

/// Lower bound on the probability that FTAL's final choice is sandwiched
/// between the best `-epsilon`- and `+epsilon`-feasible values.
///
/// `values` are exact infinite-horizon values of every policy and must be
/// pairwise distinct; `feasible_estimate` is the estimated feasible set after
/// `n` iterations.
pub fn theorem2_bound(
    values: &[f64],
    feasible_estimate: &[usize],
    epsilon: f64,
    constants: TruncationConstants,
    n: u64,
) -> Result<Theorem2Bound> {
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if values[i] == values[j] {
                return Err(Error::Precondition(format!(
                    "policies {i} and {j} have equal values {}",
                    values[i]
                )));
            }
        }
    }
    let best = *feasible_estimate
        .iter()
        .max_by(|&&a, &&b| values[a].total_cmp(&values[b]))
        .ok_or_else(|| Error::Precondition("estimated feasible set is empty".into()))?;
    let feasibility = theorem1_bound(values.len(), epsilon, constants.alpha_h, n)?;
    let mut sum = 0.0;
    let mut vacuous = Vec::new();
    for &p in feasible_estimate.iter().filter(|&&p| p != best) {
        let margin = (values[best] - values[p]) / 2.0 - constants.r_h;
        if margin > 0.0 {
            sum += 2.0 * (-2.0 * margin * margin * n as f64).exp();
        } else {
            vacuous.push(p);
            sum += 1.0;
        }
    }
    let selection = ProbabilityBound::new(1.0 - sum);
    Ok(Theorem2Bound {
        feasibility,
        selection,
        product: ProbabilityBound::new(feasibility.clamped * selection.clamped),
        best,
        vacuous,
    })
}

/// Ordering and gap bookkeeping over policies' finite-horizon values.
/// Positions are 0-based: `order[0]` is the best policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GapStructure {
    pub values: Vec<f64>,
    pub order: Vec<usize>,
    pub y: f64,
    /// `i_y[j]`: first position `i <= j` whose gap to position `j` is at most `y`.
    pub i_y: Vec<usize>,
    /// `j_y[i]`: last position `j >= i` whose gap from position `i` is at most `y`.
    pub j_y: Vec<usize>,
    pub min_positive_gap: Option<f64>,
}

impl GapStructure {
    /// `V(a) - V(b)` for policies `a`, `b`.
    pub fn gap(&self, a: usize, b: usize) -> f64 {
        self.values[a] - self.values[b]
    }

    /// Gap between the policies at sorted positions `i` and `j`.
    pub fn gap_at(&self, i: usize, j: usize) -> f64 {
        self.gap(self.order[i], self.order[j])
    }

    /// Smallest `n` from which the O(1/N) and O(ln N / N) rates are claimed.
    pub fn rate_threshold(&self) -> Option<u64> {
        self.min_positive_gap.map(|g| (1.0 / g).ceil() as u64)
    }
}

pub fn gap_structure(values: &[f64], y: f64) -> GapStructure {
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let gap_at = |i: usize, j: usize| values[order[i]] - values[order[j]];
    let i_y = (0..m)
        .map(|j| (0..=j).find(|&i| gap_at(i, j) <= y).unwrap_or(j))
        .collect();
    let j_y = (0..m)
        .map(|i| (i..m).rev().find(|&j| gap_at(i, j) <= y).unwrap_or(i))
        .collect();
    let mut min_positive_gap: Option<f64> = None;
    for a in values {
        for b in values {
            let d = a - b;
            if d > 0.0 && min_positive_gap.is_none_or(|g| d < g) {
                min_positive_gap = Some(d);
            }
        }
    }
    GapStructure {
        values: values.to_vec(),
        order,
        y,
        i_y,
        j_y,
        min_positive_gap,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RateModel {
    /// `g(N) = 1/N`, the FTAL rate.
    InverseN,
    /// `g(N) = ln N / N`, the AUER rate.
    LogNOverN,
}

impl RateModel {
    pub fn eval(self, n: u64) -> f64 {
        let n = n as f64;
        match self {
            RateModel::InverseN => 1.0 / n,
            RateModel::LogNOverN => n.ln() / n,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RateModel::InverseN => "1/N",
            RateModel::LogNOverN => "lnN/N",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretBoundRhs {
    pub value: f64,
    /// Sorted positions whose neighbouring gap was missing and replaced by `delta`.
    pub flagged: Vec<usize>,
}

/// Right-hand side of the expected-regret bounds with every hidden constant
/// set to 1: `2 delta + sum_j g/(N max(delta, gap)) + sum_i g/(N max(delta, gap))`,
/// where `g` is 1 for FTAL and `ln N` for AUER.
pub fn regret_bound_rhs(gaps: &GapStructure, delta: f64, n: u64, model: RateModel) -> RegretBoundRhs {
    let m = gaps.values.len();
    let scale = match model {
        RateModel::InverseN => 1.0,
        RateModel::LogNOverN => (n as f64).ln(),
    };
    let nf = n as f64;
    let mut flagged = Vec::new();
    let mut value = 2.0 * delta;
    let g0 = gap_structure(&gaps.values, 0.0);
    for j in g0.j_y[0] + 1..m {
        let i = g0.i_y[j];
        let gap = if i == 0 {
            flagged.push(j);
            delta
        } else {
            g0.gap_at(i - 1, i)
        };
        value += scale / (nf * delta.max(gap));
    }
    for i in 0..g0.j_y[m - 1] {
        let j = g0.j_y[i];
        let gap = if j + 1 >= m {
            flagged.push(i);
            delta
        } else {
            g0.gap_at(j, j + 1)
        };
        value += scale / (nf * delta.max(gap));
    }
    RegretBoundRhs { value, flagged }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretMetric {
    /// Mean over counted iterations of the best awake finite-horizon value.
    pub avg_best: f64,
    /// Mean over counted iterations of the chosen policy's finite-horizon value.
    pub avg_chosen: f64,
    pub regret: f64,
    /// Iterations with a nonempty estimated feasible set.
    pub counted: usize,
}

/// Average regret against the best awake policy. Iterations flagged
/// infeasible are excluded; `None` when every iteration is.
pub fn regret_metric(records: &[IterationRecord], values_h: &[f64]) -> Option<RegretMetric> {
    let mut best = 0.0;
    let mut chosen = 0.0;
    let mut counted = 0usize;
    for r in records.iter().filter(|r| !r.infeasible) {
        best += r
            .feasible
            .iter()
            .map(|&p| values_h[p])
            .fold(f64::NEG_INFINITY, f64::max);
        chosen += values_h[r.chosen];
        counted += 1;
    }
    (counted > 0).then(|| {
        let n = counted as f64;
        let (avg_best, avg_chosen) = (best / n, chosen / n);
        RegretMetric {
            avg_best,
            avg_chosen,
            regret: (avg_best - avg_chosen).max(0.0),
            counted,
        }
    })
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let count = samples.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                count,
            };
        }
        let n = count as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let stderr = if count > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            count,
        }
    }

    /// Frequency of `hits` out of `trials` with binomial standard error.
    pub fn binomial(hits: usize, trials: usize) -> Self {
        let p = hits as f64 / trials as f64;
        Self {
            mean: p,
            stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            count: trials,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateCheck {
    Fit {
        model: RateModel,
        c: f64,
        /// Root-mean-square residual of the fit.
        residual: f64,
        points: usize,
        /// Some point exceeds `2 C g(N)`.
        violation: bool,
    },
    /// No positive gap between policy values, so the rate threshold is undefined.
    Skipped,
}

/// Least-squares fit of `regret(N) ~ C g(N)` over points with `N` at or above
/// the min-gap threshold.
pub fn rate_check(curve: &[(u64, f64)], model: RateModel, min_gap: Option<f64>) -> Result<RateCheck> {
    let Some(gap) = min_gap else {
        return Ok(RateCheck::Skipped);
    };
    let threshold = (1.0 / gap).ceil() as u64;
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(n, _)| *n >= threshold)
        .map(|&(n, r)| (model.eval(n), r))
        .collect();
    if pts.len() < 5 {
        return Err(Error::Precondition(format!(
            "rate check needs at least 5 points with N >= {threshold}, got {}",
            pts.len()
        )));
    }
    let c = pts.iter().map(|(g, r)| g * r).sum::<f64>() / pts.iter().map(|(g, _)| g * g).sum::<f64>();
    let residual = (pts.iter().map(|(g, r)| (r - c * g).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    let violation = pts.iter().any(|(g, r)| *r > 2.0 * c * g);
    Ok(RateCheck::Fit {
        model,
        c,
        residual,
        points: pts.len(),
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::single_state;
    use proptest::prelude::*;

    #[test]
    fn truncation_examples() {
        let mut m = single_state(0.1, 1.0, 0.9);
        m.beta = 0.5;
        m.r_max = 0.1;
        let c = truncation_constants(&m, 3);
        assert!((c.alpha_h - 0.25).abs() < 1e-15);
        assert_eq!(truncation_constants(&m, 0).alpha_h, 2.0);
        let r = truncation_constants(&m, 50).r_h;
        assert!((r - 0.9f64.powi(50)).abs() < 1e-15);
        assert!((r - 5.1538e-3).abs() < 1e-7);
    }

    #[test]
    fn theorem1_examples() {
        let b = theorem1_bound(10, 0.2, 0.1, 1000).unwrap();
        assert!((b.raw - (1.0 - 20.0 * (-20f64).exp())).abs() < 1e-15);
        assert!((b.raw - 0.99999995878).abs() < 1e-10);
        let tiny = theorem1_bound(10, 0.101, 0.1, 1).unwrap();
        assert!(tiny.raw < 0.0);
        assert_eq!(tiny.clamped, 0.0);
        assert!(theorem1_bound(10, 0.1, 0.1, 5).is_err());
    }

    #[test]
    fn theorem1_min_n_example() {
        // Integer search over the formula, independent of the bisection.
        let brute = (1u64..)
            .find(|&n| 1.0 - 20.0 * (-2.0 * 0.01 * n as f64).exp() >= 0.99)
            .unwrap();
        assert_eq!(brute, 381);
        assert_eq!(theorem1_min_n(10, 0.3, 0.2, 0.99).unwrap(), brute);
    }

    #[test]
    fn theorem2_examples() {
        let c = TruncationConstants {
            alpha_h: 0.01,
            r_h: 0.05,
        };
        let single = theorem2_bound(&[0.9, 0.2, 0.5], &[0], 0.1, c, 500).unwrap();
        assert_eq!(single.selection.raw, 1.0);
        assert_eq!(single.best, 0);

        let two = theorem2_bound(&[0.5, 0.8], &[0, 1], 0.1, c, 500).unwrap();
        assert!((two.selection.raw - (1.0 - 2.0 * (-10f64).exp())).abs() < 1e-12);
        assert_eq!(two.best, 1);

        let err = theorem2_bound(&[0.5, 0.7, 0.5], &[0, 1], 0.1, c, 500).unwrap_err();
        assert!(err.to_string().contains("policies 0 and 2"));
        assert!(theorem2_bound(&[0.5, 0.7], &[], 0.1, c, 500).is_err());

        let close = theorem2_bound(&[0.5, 0.55], &[0, 1], 0.1, c, 500).unwrap();
        assert_eq!(close.vacuous, vec![0]);
        assert_eq!(close.selection.clamped, 0.0);
    }

    #[test]
    fn gap_structure_all_equal() {
        let g = gap_structure(&[0.4; 5], 0.0);
        assert!(g.i_y.iter().all(|&i| i == 0));
        assert!(g.j_y.iter().all(|&j| j == 4));
        assert_eq!(g.min_positive_gap, None);
        assert_eq!(g.rate_threshold(), None);
    }

    #[test]
    fn gap_structure_with_ties() {
        let v = [0.7, 0.2, 0.9, 0.7];
        let g = gap_structure(&v, 0.0);
        assert_eq!(g.order, vec![2, 0, 3, 1]);
        // Exhaustive pairwise scan.
        let brute = v
            .iter()
            .flat_map(|a| v.iter().map(move |b| a - b))
            .filter(|d| *d > 0.0)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(g.min_positive_gap, Some(brute));
        assert!((brute - 0.2).abs() < 1e-12);
        assert_eq!(g.i_y, vec![0, 1, 1, 3]);
        assert_eq!(g.j_y, vec![0, 2, 2, 3]);
    }

    #[test]
    fn large_y_collapses_i_y() {
        let g = gap_structure(&[0.1, 0.5, 0.3, 0.9], 1.0);
        assert!(g.i_y.iter().all(|&i| i == 0));
    }

    #[test]
    fn regret_rhs_shapes() {
        let g = gap_structure(&[0.9, 0.7, 0.7, 0.2], 0.0);
        let ftal = regret_bound_rhs(&g, 0.0, 100, RateModel::InverseN);
        // j sum: positions 1,2 (gap 0.2), 3 (gap 0.5); i sum: position 0 (gap 0.2), 1,2 (gap 0.5).
        let expected = (1.0 / 0.2 + 1.0 / 0.2 + 1.0 / 0.5 + 1.0 / 0.2 + 2.0 / 0.5) / 100.0;
        assert!((ftal.value - expected).abs() < 1e-9);
        assert!(ftal.flagged.is_empty());
        let auer = regret_bound_rhs(&g, 0.0, 100, RateModel::LogNOverN);
        assert!((auer.value - expected * 100f64.ln()).abs() < 1e-9);
        // With every value tied, the second sum still runs over positions 0 and 1
        // whose right-hand neighbour gap does not exist; delta stands in.
        let flat = regret_bound_rhs(&gap_structure(&[0.5; 3], 0.0), 0.01, 100, RateModel::InverseN);
        assert_eq!(flat.flagged, vec![0, 1]);
        assert!((flat.value - 2.02).abs() < 1e-12);
    }

    fn rec(feasible: Vec<usize>, chosen: usize) -> IterationRecord {
        IterationRecord {
            n: 0,
            infeasible: feasible.is_empty(),
            feasible,
            chosen,
            chosen_value_mean: None,
        }
    }

    #[test]
    fn regret_of_leader_is_zero() {
        let v = [0.3, 0.6, 0.9];
        let records = vec![rec(vec![0, 1], 1), rec(vec![0, 1, 2], 2), rec(vec![0], 0)];
        let m = regret_metric(&records, &v).unwrap();
        assert_eq!(m.regret, 0.0);
        let single = vec![rec(vec![0], 0); 4];
        assert_eq!(regret_metric(&single, &[0.4]).unwrap().regret, 0.0);
    }

    #[test]
    fn regret_skips_infeasible_iterations() {
        let v = [0.3, 0.6];
        let records = vec![rec(vec![], 0), rec(vec![0, 1], 0), rec(vec![0, 1], 1)];
        let m = regret_metric(&records, &v).unwrap();
        assert_eq!(m.counted, 2);
        assert!((m.regret - 0.15).abs() < 1e-12);
        assert_eq!(regret_metric(&records[..1], &v), None);
    }

    #[test]
    fn rate_check_recovers_exact_curve() {
        let curve: Vec<(u64, f64)> = [10, 20, 40, 80, 160].iter().map(|&n| (n, 3.0 / n as f64)).collect();
        match rate_check(&curve, RateModel::InverseN, Some(0.1)).unwrap() {
            RateCheck::Fit {
                c,
                residual,
                violation,
                ..
            } => {
                assert!((c - 3.0).abs() < 1e-12);
                assert!(residual < 1e-15);
                assert!(!violation);
            }
            RateCheck::Skipped => panic!("fit skipped"),
        }
    }

    #[test]
    fn rate_check_flags_constant_curve() {
        let curve: Vec<(u64, f64)> = [10, 20, 40, 80, 160].iter().map(|&n| (n, 0.1)).collect();
        for model in [RateModel::InverseN, RateModel::LogNOverN] {
            match rate_check(&curve, model, Some(0.1)).unwrap() {
                RateCheck::Fit { violation, .. } => assert!(violation),
                RateCheck::Skipped => panic!("fit skipped"),
            }
        }
    }

    #[test]
    fn rate_check_needs_gap_and_points() {
        assert_eq!(rate_check(&[], RateModel::InverseN, None).unwrap(), RateCheck::Skipped);
        let curve = [(1, 0.5), (2, 0.3), (100, 0.01)];
        assert!(rate_check(&curve, RateModel::InverseN, Some(0.5)).is_err());
    }

    #[test]
    fn binomial_stderr() {
        let m = MeanEstimate::binomial(90, 100);
        assert!((m.stderr - 0.03).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn theorem1_monotone(n in 1u64..5000, dn in 0u64..5000, e in 0.011f64..0.5, de in 0.0f64..0.5, p in 1usize..30) {
            let base = theorem1_bound(p, e, 0.01, n).unwrap().raw;
            prop_assert!(theorem1_bound(p, e, 0.01, n + dn).unwrap().raw >= base);
            prop_assert!(theorem1_bound(p, e + de, 0.01, n).unwrap().raw >= base);
        }

        #[test]
        fn gap_structure_invariants(values in prop::collection::vec(0u8..6, 1..12)) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64 / 5.0).collect();
            let g = gap_structure(&v, 0.0);
            let mut sorted = g.order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..v.len()).collect::<Vec<_>>());
            for j in 0..v.len() {
                prop_assert!(g.i_y[j] <= j && j <= g.j_y[j]);
                for i in 0..=j {
                    prop_assert!(g.gap_at(i, j) >= 0.0);
                }
                if g.i_y[j] > 0 {
                    prop_assert!(g.gap_at(g.i_y[j] - 1, g.i_y[j]) > 0.0);
                }
            }
            let brute = v.iter()
                .flat_map(|a| v.iter().map(move |b| a - b))
                .filter(|d| *d > 0.0)
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
            prop_assert_eq!(g.min_positive_gap, brute);
        }
    }
}
