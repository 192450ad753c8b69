//! Exact collision probabilities for the same-day, span, boy-girl and
//! boy-girl span birthday problems, threshold searches over them, and the
//! usual closed-form approximations.
//!
//! A "span of d" collision means two days strictly fewer than `d` apart, so
//! `d = 1` is the same-day problem. Years are linear: day 1 and day n are
//! `n - 1` apart.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exactnum::{
    binomial, falling_factorial, falling_factorial_signed, pow, stirling2, BigNat, Prob,
};

/// Population searches give up past this many members per label.
pub const MAX_SEARCH_POPULATION: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BirthdayError {
    #[error("invalid collision spec: {0}")]
    InvalidSpec(String),
    #[error("target probability must be positive")]
    ZeroTarget,
    #[error("target {target} is never reached by {family}")]
    Unattainable { target: String, family: String },
    #[error("no population up to {cap} reaches target {target} for {family}")]
    SearchCapExceeded {
        target: String,
        family: String,
        cap: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Population {
    Unlabeled(u64),
    BoyGirl { boys: u64, girls: u64 },
}

impl Population {
    pub fn total(&self) -> u64 {
        match *self {
            Population::Unlabeled(k) => k,
            Population::BoyGirl { boys, girls } => boys + girls,
        }
    }
}

/// One birthday-problem instance: `days` in the year, collision span
/// `span`, and who is drawing birthdays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollisionSpec {
    days: u64,
    span: u64,
    population: Population,
}

impl CollisionSpec {
    pub fn new(days: u64, span: u64, population: Population) -> Result<Self, BirthdayError> {
        if days == 0 {
            return Err(BirthdayError::InvalidSpec("days must be at least 1".into()));
        }
        if span == 0 {
            return Err(BirthdayError::InvalidSpec("span must be at least 1".into()));
        }
        match population {
            Population::Unlabeled(0) => {
                return Err(BirthdayError::InvalidSpec(
                    "population must be at least 1".into(),
                ))
            }
            Population::BoyGirl { boys, girls } if boys == 0 || girls == 0 => {
                return Err(BirthdayError::InvalidSpec(
                    "boys and girls must each be at least 1".into(),
                ))
            }
            _ => {}
        }
        Ok(CollisionSpec {
            days,
            span,
            population,
        })
    }

    pub fn unlabeled(days: u64, span: u64, k: u64) -> Result<Self, BirthdayError> {
        Self::new(days, span, Population::Unlabeled(k))
    }

    pub fn boy_girl(days: u64, span: u64, boys: u64, girls: u64) -> Result<Self, BirthdayError> {
        Self::new(days, span, Population::BoyGirl { boys, girls })
    }

    pub fn days(&self) -> u64 {
        self.days
    }

    pub fn span(&self) -> u64 {
        self.span
    }

    pub fn population(&self) -> Population {
        self.population
    }

    /// Closed-form collision probability for this instance.
    pub fn exact_prob(&self) -> Prob {
        match (self.span, self.population) {
            (1, Population::Unlabeled(k)) => birthday_prob(self.days, k),
            (d, Population::Unlabeled(k)) => span_birthday_prob(self.days, d, k),
            (1, Population::BoyGirl { boys, girls }) => boygirl_prob(self.days, boys, girls),
            (d, Population::BoyGirl { boys, girls }) => {
                boygirl_span_prob(self.days, d, boys, girls)
            }
        }
    }
}

impl fmt::Display for CollisionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.span, self.population) {
            (1, Population::Unlabeled(k)) => write!(f, "B({},{})", self.days, k),
            (d, Population::Unlabeled(k)) => write!(f, "B_{}({},{})", d, self.days, k),
            (1, Population::BoyGirl { boys, girls }) => {
                write!(f, "B({},{},{})", self.days, boys, girls)
            }
            (d, Population::BoyGirl { boys, girls }) => {
                write!(f, "B_{}({},{},{})", d, self.days, boys, girls)
            }
        }
    }
}

fn check_positive(args: &[(&str, u64)]) {
    for (name, v) in args {
        assert!(*v >= 1, "{name} must be at least 1");
    }
}

/// Probability that `k` uniform birthdays over `n` days contain a shared day.
pub fn birthday_prob(n: u64, k: u64) -> Prob {
    check_positive(&[("n", n), ("k", k)]);
    if k > n {
        return Prob::one();
    }
    Prob::complement_of_count(falling_factorial(n, k), pow(n, k))
        .expect("injective placements never exceed all placements")
}

/// Probability that some pair among `k` birthdays lies fewer than `d` days apart.
pub fn span_birthday_prob(n: u64, d: u64, k: u64) -> Prob {
    check_positive(&[("n", n), ("d", d), ("k", k)]);
    let blocked = (k - 1) * (d - 1);
    if n < blocked + k {
        return Prob::one();
    }
    Prob::complement_of_count(falling_factorial(n - blocked, k), pow(n, k))
        .expect("separated placements never exceed all placements")
}

/// Probability that at least one of `b` boys shares a birthday with at least
/// one of `g` girls. Single sum over the number of distinct girl days.
pub fn boygirl_prob(n: u64, b: u64, g: u64) -> Prob {
    check_positive(&[("n", n), ("b", b), ("g", g)]);
    let free = (1..=g.min(n)).fold(BigNat::zero(), |acc, i| {
        acc + pow(n - i, b) * stirling2(g, i) * falling_factorial(n, i)
    });
    Prob::complement_of_count(free, pow(n, b + g)).expect("count bounded by n^(b+g)")
}

/// Same quantity as [`boygirl_prob`], through the symmetric double sum over
/// the number of distinct boy days and distinct girl days.
pub fn boygirl_prob_double_sum(n: u64, b: u64, g: u64) -> Prob {
    check_positive(&[("n", n), ("b", b), ("g", g)]);
    let mut free = BigNat::zero();
    for i in 1..=g {
        let girls = stirling2(g, i);
        for j in 1..=b {
            free += stirling2(b, j) * &girls * falling_factorial(n, i + j);
        }
    }
    Prob::complement_of_count(free, pow(n, b + g)).expect("count bounded by n^(b+g)")
}

/// Boy-girl collision probability within a span of `d` days, using the
/// block-separation count: the `i` distinct boy days and `j` distinct girl
/// days are placed with at least `d - 1` empty days between neighbours.
///
/// Terms whose separated placement cannot fit contribute nothing. The
/// block rule also separates distinct same-label days, so for `d > 1` and
/// more than one boy or girl this overstates the probability that a boy
/// and a girl land fewer than `d` days apart.
pub fn boygirl_span_prob(n: u64, d: u64, b: u64, g: u64) -> Prob {
    check_positive(&[("n", n), ("d", d), ("b", b), ("g", g)]);
    let mut free = BigNat::zero();
    for i in 1..=b {
        let boys = stirling2(b, i);
        for j in 1..=g {
            let points = i + j;
            let base = n as i64 - ((points - 1) * (d - 1)) as i64;
            let placements = falling_factorial_signed(base, points);
            if placements.is_zero() {
                continue;
            }
            free += &boys * stirling2(g, j) * placements;
        }
    }
    let total = pow(n, b + g);
    if free > total {
        return Prob::zero();
    }
    Prob::complement_of_count(free, total).expect("count bounded by n^(b+g)")
}

/// A population-indexed probability family for threshold searches.
/// Boy-girl families are balanced: `h` boys and `h` girls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Birthday { days: u64 },
    Span { days: u64, span: u64 },
    BoyGirlBalanced { days: u64 },
    BoyGirlSpanBalanced { days: u64, span: u64 },
}

impl Family {
    pub fn prob_at(&self, population: u64) -> Prob {
        match *self {
            Family::Birthday { days } => birthday_prob(days, population),
            Family::Span { days, span } => span_birthday_prob(days, span, population),
            Family::BoyGirlBalanced { days } => boygirl_prob(days, population, population),
            Family::BoyGirlSpanBalanced { days, span } => {
                boygirl_span_prob(days, span, population, population)
            }
        }
    }

    /// Smallest population whose probability is exactly one, if any.
    pub fn saturation(&self) -> Option<u64> {
        match *self {
            Family::Birthday { days } => Some(days + 1),
            Family::Span { days, span } => {
                // smallest k with days < (k-1)(span-1) + k
                let step = span;
                Some((days + span - 1) / step + 1)
            }
            Family::BoyGirlBalanced { days } => (days == 1).then_some(1),
            Family::BoyGirlSpanBalanced { days, span } => (days <= span).then_some(1),
        }
    }

    fn validate(&self) -> Result<(), BirthdayError> {
        let (days, span) = match *self {
            Family::Birthday { days } | Family::BoyGirlBalanced { days } => (days, 1),
            Family::Span { days, span } | Family::BoyGirlSpanBalanced { days, span } => {
                (days, span)
            }
        };
        if days == 0 || span == 0 {
            return Err(BirthdayError::InvalidSpec(
                "days and span must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Family::Birthday { days } => write!(f, "B({days},k)"),
            Family::Span { days, span } => write!(f, "B_{span}({days},k)"),
            Family::BoyGirlBalanced { days } => write!(f, "B({days},h,h)"),
            Family::BoyGirlSpanBalanced { days, span } => write!(f, "B_{span}({days},h,h)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThresholdResult {
    pub k_star: u64,
    pub prob_at_k_star: Prob,
    /// Probability one step below `k_star`; zero when `k_star` is 1.
    pub prob_below: Prob,
}

/// Smallest population whose collision probability reaches `target`.
/// Linear scan from 1; the families are nondecreasing in population.
pub fn min_k_at_least(target: &Prob, family: Family) -> Result<ThresholdResult, BirthdayError> {
    family.validate()?;
    if target.is_zero() {
        return Err(BirthdayError::ZeroTarget);
    }
    let saturation = family.saturation();
    if target.is_one() && saturation.is_none() {
        return Err(BirthdayError::Unattainable {
            target: target.to_string(),
            family: family.to_string(),
        });
    }
    let cap = saturation.unwrap_or(MAX_SEARCH_POPULATION);
    let mut below = Prob::zero();
    for k in 1..=cap {
        let p = family.prob_at(k);
        if &p >= target {
            return Ok(ThresholdResult {
                k_star: k,
                prob_at_k_star: p,
                prob_below: below,
            });
        }
        below = p;
    }
    Err(BirthdayError::SearchCapExceeded {
        target: target.to_string(),
        family: family.to_string(),
        cap,
    })
}

/// `sqrt(2 ln 2 n)`, the usual estimate of the population giving even odds.
pub fn approx_k_half(n: u64) -> f64 {
    (2.0 * std::f64::consts::LN_2 * n as f64).sqrt()
}

/// `1 - exp(-C(k,2)/n)`.
pub fn poisson_approx_prob(n: u64, k: u64) -> f64 {
    let pairs = binomial(k, 2);
    let lambda = BigRational::new(BigInt::from(pairs), BigInt::from(n));
    -(-crate::exactnum::rational_to_f64(&lambda)).exp_m1()
}

/// Even-odds population estimates for the span problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpanApprox {
    /// `0.83 sqrt(n / (d - 4))`; `None` when `d <= 4`.
    pub linear: Option<f64>,
    /// `1.2 sqrt(n / (2d + 1))`, the cyclic-year estimate.
    pub cyclic: f64,
}

pub fn approx_k_half_span(n: u64, d: u64) -> SpanApprox {
    let n = n as f64;
    let linear = (d > 4).then(|| 0.83 * (n / (d - 4) as f64).sqrt());
    SpanApprox {
        linear,
        cyclic: 1.2 * (n / (2 * d + 1) as f64).sqrt(),
    }
}

/// Upper bound `exp(-c^2 / (2t))` on the chance that `t` fair buy/sell signs
/// sum to more than `c`.
pub fn chernoff_imbalance_bound(t: u64, c: f64) -> f64 {
    (-(c * c) / (2.0 * t as f64)).exp()
}

/// `num/den` as a probability. Panics unless `0 <= num <= den` and `den > 0`.
pub fn prob_ratio(num: u64, den: u64) -> Prob {
    Prob::new(BigNat::from(num), BigNat::from(den)).expect("valid ratio")
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent enumeration over all n^(population) assignments, kept
    // local so these tests don't lean on the montecarlo module.
    fn brute_force(n: u64, d: u64, boys: usize, girls: Option<usize>) -> Prob {
        let total = boys + girls.unwrap_or(0);
        let mut days = vec![0u64; total];
        let mut hits = 0u64;
        let mut count = 0u64;
        loop {
            count += 1;
            let collide = match girls {
                None => (0..total).any(|a| (a + 1..total).any(|c| days[a].abs_diff(days[c]) < d)),
                Some(_) => (0..boys).any(|a| (boys..total).any(|c| days[a].abs_diff(days[c]) < d)),
            };
            hits += collide as u64;
            let mut pos = 0;
            loop {
                if pos == total {
                    return prob_ratio(hits, count);
                }
                days[pos] += 1;
                if days[pos] < n {
                    break;
                }
                days[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn same_day_examples() {
        let p = birthday_prob(365, 23);
        assert_eq!(p.to_decimal(6), "0.507297");
        assert!(birthday_prob(40, 1).is_zero());
        assert!(birthday_prob(5, 6).is_one());
        assert_eq!(birthday_prob(2, 2), prob_ratio(1, 2));
    }

    #[test]
    fn span_examples() {
        assert!(span_birthday_prob(10, 4, 4).is_one());
        assert_eq!(span_birthday_prob(8, 2, 3), brute_force(8, 2, 3, None));
        for n in 1..=40 {
            for k in 1..=10 {
                assert_eq!(span_birthday_prob(n, 1, k), birthday_prob(n, k));
            }
        }
    }

    #[test]
    fn span_saturates_below_block_requirement() {
        for n in 1..=30u64 {
            for d in 1..=6u64 {
                for k in 1..=10u64 {
                    if n < (k - 1) * (d - 1) + k {
                        assert!(span_birthday_prob(n, d, k).is_one());
                    }
                }
            }
        }
    }

    #[test]
    fn boygirl_published_values() {
        assert_eq!(boygirl_prob(252, 13, 13).to_decimal(4), "0.4891");
        assert_eq!(boygirl_prob(252, 14, 14).to_decimal(4), "0.5410");
        assert_eq!(boygirl_prob(365, 1, 1), prob_ratio(1, 365));
    }

    #[test]
    fn boygirl_forms_agree() {
        assert_eq!(
            boygirl_prob(252, 13, 13),
            boygirl_prob_double_sum(252, 13, 13)
        );
        for n in 1..=25 {
            for b in 1..=6 {
                for g in 1..=6 {
                    let single = boygirl_prob(n, b, g);
                    assert_eq!(
                        single,
                        boygirl_prob_double_sum(n, b, g),
                        "n={n} b={b} g={g}"
                    );
                    assert_eq!(single, boygirl_prob(n, g, b));
                }
            }
        }
    }

    #[test]
    fn boygirl_matches_enumeration() {
        assert_eq!(
            boygirl_prob_double_sum(7, 3, 2),
            brute_force(7, 1, 3, Some(2))
        );
        assert_eq!(boygirl_prob(5, 2, 3), brute_force(5, 1, 2, Some(3)));
        assert_eq!(boygirl_prob_double_sum(9, 1, 1), prob_ratio(1, 9));
    }

    #[test]
    fn boygirl_span_published_table() {
        let row = |n| {
            [1, 2, 3, 4]
                .map(|h| boygirl_span_prob(n, 30, h, h))
                .map(|p| p.to_f64())
        };
        let expected_252 = [0.220, 0.819, 0.994, 0.99998];
        let expected_365 = [0.155, 0.667, 0.953, 0.99840];
        for (h, (a, b)) in row(252).iter().zip(row(365)).enumerate() {
            let tol = if h == 3 { 5e-6 } else { 5e-4 };
            assert!((a - expected_252[h]).abs() <= tol, "252 h={} {a}", h + 1);
            assert!((b - expected_365[h]).abs() <= tol, "365 h={} {b}", h + 1);
        }
    }

    #[test]
    fn boygirl_span_reduces_to_same_day() {
        for n in 1..=40 {
            for b in 1..=6 {
                for g in 1..=6 {
                    assert_eq!(boygirl_span_prob(n, 1, b, g), boygirl_prob(n, b, g));
                }
            }
        }
    }

    #[test]
    fn boygirl_span_single_pair_is_exact() {
        for n in 1..=12 {
            for d in 1..=5 {
                assert_eq!(boygirl_span_prob(n, d, 1, 1), brute_force(n, d, 1, Some(1)));
            }
        }
    }

    #[test]
    fn boygirl_span_overstates_cross_label_probability() {
        // The block count also separates distinct days within one label,
        // so with d > 1 and two or more of one label it is strictly larger
        // than the chance of a boy-girl pair fewer than d days apart.
        assert_eq!(boygirl_span_prob(6, 2, 2, 2), prob_ratio(307, 324));
        assert_eq!(brute_force(6, 2, 2, Some(2)), prob_ratio(283, 324));
        for n in 3..=7 {
            for d in 2..=3 {
                for (b, g) in [(2, 1), (1, 2), (2, 2), (3, 1)] {
                    assert!(
                        boygirl_span_prob(n, d, b as u64, g as u64)
                            >= brute_force(n, d, b, Some(g))
                    );
                }
            }
        }
    }

    #[test]
    fn symmetry_in_labels() {
        for n in 1..=20 {
            for d in 1..=4 {
                for b in 1..=5 {
                    for g in 1..=5 {
                        assert_eq!(boygirl_span_prob(n, d, b, g), boygirl_span_prob(n, d, g, b));
                    }
                }
            }
        }
    }

    #[test]
    fn families_are_monotone() {
        for n in 1..=40u64 {
            for d in 1..=5u64 {
                let mut prev = [Prob::zero(), Prob::zero(), Prob::zero(), Prob::zero()];
                for k in 1..=8u64 {
                    let now = [
                        birthday_prob(n, k),
                        span_birthday_prob(n, d, k),
                        boygirl_prob(n, k, k.div_ceil(2)),
                        boygirl_span_prob(n, d, k, k.div_ceil(2)),
                    ];
                    for (p, q) in prev.iter().zip(&now) {
                        assert!(p <= q, "n={n} d={d} k={k}");
                    }
                    prev = now;
                }
                for g in 1..=7 {
                    assert!(boygirl_span_prob(n, d, 3, g) <= boygirl_span_prob(n, d, 3, g + 1));
                }
            }
        }
    }

    #[test]
    fn threshold_searches() {
        let half = prob_ratio(1, 2);
        let r = min_k_at_least(&half, Family::Birthday { days: 365 }).unwrap();
        assert_eq!(r.k_star, 23);
        assert!(r.prob_below < half && half <= r.prob_at_k_star);
        assert_eq!(r.prob_below, birthday_prob(365, 22));

        let r = min_k_at_least(&half, Family::BoyGirlBalanced { days: 252 }).unwrap();
        assert_eq!(r.k_star, 14);

        let r = min_k_at_least(&Prob::one(), Family::Birthday { days: 365 }).unwrap();
        assert_eq!(r.k_star, 366);
        let r = min_k_at_least(&Prob::one(), Family::Span { days: 10, span: 4 }).unwrap();
        assert_eq!(r.k_star, 4);
        assert!(!span_birthday_prob(10, 4, 3).is_one());

        assert_eq!(
            min_k_at_least(&Prob::zero(), Family::Birthday { days: 5 }),
            Err(BirthdayError::ZeroTarget)
        );
        assert!(matches!(
            min_k_at_least(&Prob::one(), Family::BoyGirlBalanced { days: 252 }),
            Err(BirthdayError::Unattainable { .. })
        ));
        let r = min_k_at_least(
            &half,
            Family::BoyGirlSpanBalanced {
                days: 252,
                span: 30,
            },
        )
        .unwrap();
        assert_eq!(r.k_star, 2);
    }

    #[test]
    fn saturation_points_are_exact() {
        for days in 1..=30 {
            for span in 1..=6 {
                let fam = Family::Span { days, span };
                let k = fam.saturation().unwrap();
                assert!(fam.prob_at(k).is_one());
                if k > 1 {
                    assert!(!fam.prob_at(k - 1).is_one());
                }
            }
        }
    }

    #[test]
    fn approximations() {
        assert!((approx_k_half(365) - 22.49).abs() < 0.01);
        assert!((approx_k_half(1) - 1.177).abs() < 1e-3);
        assert!((approx_k_half(252) - 18.69).abs() < 0.01);

        let exact = birthday_prob(365, 23).to_f64();
        assert!((poisson_approx_prob(365, 23) - exact).abs() < 0.01);
        assert!((poisson_approx_prob(252, 14) - (1.0 - (-91.0f64 / 252.0).exp())).abs() < 1e-15);
        let n = 1_000_000u64;
        assert!((poisson_approx_prob(n, 2) * n as f64 - 1.0).abs() < 1e-5);

        let a = approx_k_half_span(365, 30);
        assert!((a.linear.unwrap() - 3.11).abs() < 0.01);
        assert_eq!(
            approx_k_half_span(365, 5).linear,
            Some(0.83 * 365f64.sqrt())
        );
        assert!((approx_k_half_span(252, 30).cyclic - 2.44).abs() < 0.01);
        let low = approx_k_half_span(100, 4);
        assert_eq!(low.linear, None);
        assert!(low.cyclic > 0.0);
    }

    #[test]
    fn chernoff_table_values() {
        assert!((chernoff_imbalance_bound(10, 1.0) - 0.951).abs() < 5e-4);
        assert!((chernoff_imbalance_bound(50, 1.0) - 0.990).abs() < 5e-4);
        assert!((chernoff_imbalance_bound(7, 1e-9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(CollisionSpec::unlabeled(0, 1, 2).is_err());
        assert!(CollisionSpec::unlabeled(3, 0, 2).is_err());
        assert!(CollisionSpec::unlabeled(3, 1, 0).is_err());
        assert!(CollisionSpec::boy_girl(3, 1, 0, 2).is_err());
        let s = CollisionSpec::boy_girl(252, 30, 1, 1).unwrap();
        assert_eq!(s.exact_prob(), boygirl_span_prob(252, 30, 1, 1));
        assert_eq!(s.to_string(), "B_30(252,1,1)");
    }
}
