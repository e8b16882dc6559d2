//! Nonparametric effect sizes, rank tests, agreement and interval estimates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;
/// Largest pooled sample size accepted by exact enumeration.
pub const EXACT_MAX_N: usize = 16;
/// Number of ordinal categories on the task-completion scale.
pub const KAPPA_CATEGORIES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("exact enumeration needs n+m <= {EXACT_MAX_N}, got {0}")]
    SampleTooLargeForExact(usize),
    #[error("at least two rating pairs are required")]
    TooFewPairs,
    #[error("rating {0} outside 0..{KAPPA_CATEGORIES}")]
    RatingOutOfRange(u8),
    #[error("a rater used a single category; kappa is undefined")]
    DegenerateMarginals,
    #[error("binomial interval needs n > 0")]
    ZeroTrials,
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Wins and ties of `x` over `y`, counted pairwise.
fn dominance(x: &[f64], y: &[f64]) -> (u64, u64, u64) {
    let ys = sorted(y);
    let (mut gt, mut lt) = (0u64, 0u64);
    for &xi in x {
        let below = ys.partition_point(|&v| v < xi);
        let not_above = ys.partition_point(|&v| v <= xi);
        gt += below as u64;
        lt += (ys.len() - not_above) as u64;
    }
    let ties = (x.len() * y.len()) as u64 - gt - lt;
    (gt, lt, ties)
}

/// Cliff's δ = P(X>Y) − P(X<Y).
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let (gt, lt, _) = dominance(x, y);
    Ok((gt as f64 - lt as f64) / (x.len() * y.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectLabel {
    Negligible,
    Small,
    Medium,
    Large,
}

pub fn effect_label(delta: f64) -> EffectLabel {
    match delta.abs() {
        d if d < 0.147 => EffectLabel::Negligible,
        d if d < 0.33 => EffectLabel::Small,
        d if d < 0.474 => EffectLabel::Medium,
        _ => EffectLabel::Large,
    }
}

/// Probability that a draw from X beats a draw from Y, ties split evenly.
pub fn prob_superiority(delta: f64) -> f64 {
    (delta + 1.0) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MwMode {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// X wins plus half the ties.
    pub u: f64,
    pub p_two_sided: f64,
}

/// Mid-ranks (1-based) of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn tie_sizes(pooled: &[f64]) -> Vec<usize> {
    let s = sorted(pooled);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let j = s[i..].iter().take_while(|&&v| v == s[i]).count();
        sizes.push(j);
        i += j;
    }
    sizes
}

pub fn mann_whitney_u(x: &[f64], y: &[f64], mode: MwMode) -> Result<MannWhitney, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let (n, m) = (x.len(), y.len());
    let (gt, _, ties) = dominance(x, y);
    let u = gt as f64 + ties as f64 / 2.0;
    let mean = (n * m) as f64 / 2.0;
    let p = match mode {
        MwMode::Exact => exact_p(x, y, u)?,
        MwMode::NormalApprox => {
            let big_n = (n + m) as f64;
            let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
            let tie_term: f64 = tie_sizes(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum();
            let var = (n * m) as f64 / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
            if var <= 0.0 {
                1.0
            } else {
                let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
                let normal = Normal::standard();
                (2.0 * normal.sf(z)).min(1.0)
            }
        }
    };
    Ok(MannWhitney { u, p_two_sided: p })
}

fn exact_p(x: &[f64], y: &[f64], u_obs: f64) -> Result<f64, StatsError> {
    let (n, m) = (x.len(), y.len());
    let total = n + m;
    if total > EXACT_MAX_N {
        return Err(StatsError::SampleTooLargeForExact(total));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    let mean = (n * m) as f64 / 2.0;
    let obs = (u_obs - mean).abs();
    let offset = (n * (n + 1)) as f64 / 2.0;
    let (mut extreme, mut count) = (0u64, 0u64);
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let rank_sum: f64 = (0..total).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        let u = rank_sum - offset;
        count += 1;
        if (u - mean).abs() >= obs - 1e-9 {
            extreme += 1;
        }
    }
    Ok(extreme as f64 / count as f64)
}

/// Quadratically weighted Cohen's κ over a 0..4 scale.
pub fn weighted_kappa(pairs: &[(u8, u8)]) -> Result<f64, StatsError> {
    const K: usize = KAPPA_CATEGORIES;
    if pairs.len() < 2 {
        return Err(StatsError::TooFewPairs);
    }
    let mut obs = [[0.0f64; K]; K];
    for &(a, b) in pairs {
        for r in [a, b] {
            if r as usize >= K {
                return Err(StatsError::RatingOutOfRange(r));
            }
        }
        obs[a as usize][b as usize] += 1.0;
    }
    let n = pairs.len() as f64;
    let row: Vec<f64> = (0..K).map(|i| obs[i].iter().sum::<f64>() / n).collect();
    let col: Vec<f64> = (0..K).map(|j| (0..K).map(|i| obs[i][j]).sum::<f64>() / n).collect();
    let used = |m: &[f64]| m.iter().filter(|&&p| p > 0.0).count();
    if used(&row) < 2 || used(&col) < 2 {
        return Err(StatsError::DegenerateMarginals);
    }
    let w = |i: usize, j: usize| ((i as f64 - j as f64) / (K - 1) as f64).powi(2);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..K {
        for j in 0..K {
            num += w(i, j) * obs[i][j] / n;
            den += w(i, j) * row[i] * col[j];
        }
    }
    Ok(1.0 - num / den)
}

pub fn within_one_point_rate(pairs: &[(u8, u8)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let close = pairs.iter().filter(|(a, b)| a.abs_diff(*b) <= 1).count();
    Some(close as f64 / pairs.len() as f64)
}

/// Wald interval, clamped to [0, 1].
pub fn binomial_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 {
        return Err(StatsError::ZeroTrials);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    let z = if (level - 0.95).abs() < 1e-12 {
        Z_95
    } else {
        Normal::standard().inverse_cdf(0.5 + level / 2.0)
    };
    let p = successes as f64 / n as f64;
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    Ok(((p - half).max(0.0), (p + half).min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Linear interpolation between order statistics at h = (n−1)·p.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let s = sorted(values);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    Some(Quartiles {
        q1,
        median,
        q3,
        iqr: q3 - q1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_delta(x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0i64;
        for a in x {
            for b in y {
                s += if a > b { 1 } else if a < b { -1 } else { 0 };
            }
        }
        s as f64 / (x.len() * y.len()) as f64
    }

    #[test]
    fn delta_examples() {
        assert_eq!(cliffs_delta(&[5.0; 3], &[5.0; 3]).unwrap(), 0.0);
        assert_eq!(cliffs_delta(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cliffs_delta(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cliffs_delta(&[], &[1.0]), Err(StatsError::EmptySample));
    }

    #[test]
    fn labels_and_superiority() {
        assert_eq!(effect_label(0.81), EffectLabel::Large);
        assert_eq!(effect_label(0.10), EffectLabel::Negligible);
        assert_eq!(effect_label(-0.40), EffectLabel::Medium);
        assert_eq!(effect_label(0.2), EffectLabel::Small);
        assert!((prob_superiority(0.81) - 0.905).abs() < 1e-12);
        assert_eq!(prob_superiority(0.0), 0.5);
        assert_eq!(prob_superiority(1.0), 1.0);
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], MwMode::Exact).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_two_sided - 1.0 / 3.0).abs() < 1e-12);
        for mode in [MwMode::Exact, MwMode::NormalApprox] {
            let t = mann_whitney_u(&[2.0], &[2.0], mode).unwrap();
            assert_eq!(t.u, 0.5);
            assert_eq!(t.p_two_sided, 1.0);
        }
        assert_eq!(
            mann_whitney_u(&[0.0; 9], &[1.0; 8], MwMode::Exact),
            Err(StatsError::SampleTooLargeForExact(17))
        );
    }

    #[test]
    fn kappa_examples() {
        let perfect: Vec<(u8, u8)> = (0..5).map(|i| (i, i)).collect();
        assert_eq!(weighted_kappa(&perfect).unwrap(), 1.0);
        let worst = [(0, 4), (4, 0), (0, 4), (4, 0)];
        assert!((weighted_kappa(&worst).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(weighted_kappa(&[(3, 3), (3, 2)]), Err(StatsError::DegenerateMarginals));
        assert_eq!(weighted_kappa(&[(1, 1)]), Err(StatsError::TooFewPairs));
        assert_eq!(weighted_kappa(&[(1, 7), (2, 2)]), Err(StatsError::RatingOutOfRange(7)));
    }

    /// κ from the agreement-form definition: (p_o − p_e)/(1 − p_e) with
    /// agreement weights 1 − (i−j)²/(k−1)².
    fn kappa_agreement_form(pairs: &[(u8, u8)]) -> f64 {
        let n = pairs.len() as f64;
        let w = |i: u8, j: u8| 1.0 - ((i as f64 - j as f64) / 4.0).powi(2);
        let po: f64 = pairs.iter().map(|&(a, b)| w(a, b)).sum::<f64>() / n;
        let mut pe = 0.0;
        for &(a, _) in pairs {
            for &(_, b) in pairs {
                pe += w(a, b);
            }
        }
        pe /= n * n;
        (po - pe) / (1.0 - pe)
    }

    #[test]
    fn kappa_matches_agreement_form_and_is_near_zero_by_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pairs: Vec<(u8, u8)> = (0..40).map(|_| (rng.random_range(0..5), rng.random_range(0..5))).collect();
            let a = weighted_kappa(&pairs).unwrap();
            assert!((a - kappa_agreement_form(&pairs)).abs() < 1e-9);
        }
        let pairs: Vec<(u8, u8)> = (0..10_000).map(|_| (rng.random_range(0..5), rng.random_range(0..5))).collect();
        assert!(weighted_kappa(&pairs).unwrap().abs() < 0.05);
    }

    #[test]
    fn within_one_point() {
        assert_eq!(within_one_point_rate(&[(2, 2), (4, 4)]), Some(1.0));
        assert_eq!(within_one_point_rate(&[(0, 2)]), Some(0.0));
        assert!((within_one_point_rate(&[(0, 1), (3, 3), (4, 2)]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(within_one_point_rate(&[]), None);
    }

    #[test]
    fn wald_intervals() {
        let r3 = |v: f64| (v * 1000.0).round() / 1000.0;
        let (lo, hi) = binomial_ci(139, 150, 0.95).unwrap();
        assert_eq!((r3(lo), r3(hi)), (0.885, 0.968));
        let (lo, hi) = binomial_ci(116, 150, 0.95).unwrap();
        assert_eq!((r3(lo), r3(hi)), (0.706, 0.840));
        let (lo, hi) = binomial_ci(104, 150, 0.95).unwrap();
        assert_eq!((r3(lo), r3(hi)), (0.620, 0.767));
        assert_eq!(binomial_ci(0, 0, 0.95), Err(StatsError::ZeroTrials));
        assert_eq!(binomial_ci(10, 10, 0.95).unwrap(), (1.0, 1.0));
        let (lo90, hi90) = binomial_ci(50, 100, 0.90).unwrap();
        assert!((hi90 - lo90 - 2.0 * 1.644854 * 0.05).abs() < 1e-5);
    }

    #[test]
    fn quartiles_interpolate() {
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
        assert_eq!(quartiles(&[7.0]).unwrap().iqr, 0.0);
        assert!(quartiles(&[]).is_none());
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..=10).prop_map(f64::from), 1..=50)
    }

    proptest! {
        #[test]
        fn delta_matches_brute_force_and_u(x in sample(), y in sample()) {
            let d = cliffs_delta(&x, &y).unwrap();
            prop_assert_eq!(d, brute_delta(&x, &y));
            prop_assert_eq!(d, -cliffs_delta(&y, &x).unwrap());
            prop_assert!(d.abs() <= 1.0);
            let u = mann_whitney_u(&x, &y, MwMode::NormalApprox).unwrap().u;
            let nm = (x.len() * y.len()) as f64;
            prop_assert!((d - (2.0 * u / nm - 1.0)).abs() < 1e-12);
        }

        #[test]
        fn kappa_invariant_under_monotone_relabel(pairs in prop::collection::vec((0u8..3, 0u8..3), 2..40)) {
            let relabel = |v: u8| [0u8, 2, 4][v as usize];
            let mapped: Vec<(u8, u8)> = pairs.iter().map(|&(a, b)| (relabel(a), relabel(b))).collect();
            match (weighted_kappa(&pairs), weighted_kappa(&mapped)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn perfect_agreement_is_one(v in prop::collection::vec(0u8..5, 2..40)) {
            let pairs: Vec<(u8, u8)> = v.iter().map(|&a| (a, a)).collect();
            if let Ok(k) = weighted_kappa(&pairs) {
                prop_assert!((k - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn wald_width_shrinks_with_root_n(n in 10u64..=10_000, p in 0.05f64..0.95) {
            let s = (p * n as f64).round() as u64;
            let (lo, hi) = binomial_ci(s, n, 0.95).unwrap();
            let ph = s as f64 / n as f64;
            let expected = 2.0 * Z_95 * (ph * (1.0 - ph)).sqrt() / (n as f64).sqrt();
            if lo > 0.0 && hi < 1.0 {
                prop_assert!((hi - lo - expected).abs() < 1e-12);
            }
            let (lo4, hi4) = binomial_ci(4 * s, 4 * n, 0.95).unwrap();
            if lo > 0.0 && hi < 1.0 && lo4 > 0.0 && hi4 < 1.0 {
                prop_assert!(((hi - lo) / (hi4 - lo4) - 2.0).abs() < 1e-9);
            }
        }
    }
}
