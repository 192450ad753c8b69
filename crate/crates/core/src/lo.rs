//! Signed sums of gain/loss magnitudes under fair random signs.
//!
//! A multiset `V = {v_1..v_n}` of positive integers is turned into
//! `S = sum xi_i v_i` with independent fair signs `xi_i`. The exact
//! distribution of `S` is kept as counts out of `2^n` sign patterns.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::birthday::boygirl_span_prob;
use crate::exactnum::{rational_from_f64, rational_to_f64, BigNat, Prob};

/// Sign-pattern enumeration refuses more values than this.
pub const ENUMERATION_GUARD: usize = 24;

/// Counts are `u128`, so the number of sign patterns must fit.
pub const MAX_VALUES: usize = 127;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoError {
    #[error("gain multiset must not be empty")]
    Empty,
    #[error("gain magnitudes must be positive integers, got {0:?}")]
    BadValue(String),
    #[error("{0} values exceed the enumeration guard of {ENUMERATION_GUARD}")]
    EnumerationGuard(usize),
    #[error("{0} values exceed the supported maximum of {MAX_VALUES}")]
    TooManyValues(usize),
    #[error("magnitude total {0} is too large for the sum table")]
    TotalTooLarge(String),
    #[error("the wash-adjusted mean is only defined for all-ones multisets")]
    NotAllOnes,
    #[error("minimal-sum verification supports 1 to {max} values, got {got}")]
    OutOfDeskRange { got: u32, max: u32 },
    #[error("tail threshold must be positive and finite")]
    BadThreshold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GainMultiset(Vec<u64>);

impl GainMultiset {
    pub fn new(values: Vec<u64>) -> Result<Self, LoError> {
        if values.is_empty() {
            return Err(LoError::Empty);
        }
        if values.contains(&0) {
            return Err(LoError::BadValue("0".into()));
        }
        if values.len() > MAX_VALUES {
            return Err(LoError::TooManyValues(values.len()));
        }
        Ok(GainMultiset(values))
    }

    pub fn all_ones(n: usize) -> Result<Self, LoError> {
        Self::new(vec![1; n])
    }

    /// `{1, 2, 4, ..., 2^(n-1)}`.
    pub fn powers_of_two(n: usize) -> Result<Self, LoError> {
        if n >= 64 {
            return Err(LoError::TotalTooLarge(format!("2^{n} - 1")));
        }
        Self::new((0..n).map(|i| 1u64 << i).collect())
    }

    pub fn values(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u128 {
        self.0.iter().map(|&v| v as u128).sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.0.iter().all(|&v| v == 1)
    }
}

impl FromStr for GainMultiset {
    type Err = LoError;

    /// Comma-separated positive integers, e.g. `1,2,4`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                part.parse::<u64>()
                    .map_err(|_| LoError::BadValue(part.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        GainMultiset::new(values)
    }
}

impl fmt::Display for GainMultiset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Exact distribution of the signed sum: achievable sums mapped to the
/// number of sign patterns producing them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignedSumDist {
    source: GainMultiset,
    counts: BTreeMap<i128, u128>,
}

impl SignedSumDist {
    pub fn source(&self) -> &GainMultiset {
        &self.source
    }

    pub fn counts(&self) -> &BTreeMap<i128, u128> {
        &self.counts
    }

    pub fn count(&self, x: i128) -> u128 {
        self.counts.get(&x).copied().unwrap_or(0)
    }

    /// `2^n`.
    pub fn patterns(&self) -> BigNat {
        BigNat::one() << self.source.len()
    }

    pub fn prob_of(&self, x: i128) -> Prob {
        Prob::new(BigNat::from(self.count(x)), self.patterns()).expect("count within 2^n")
    }

    /// All `2^n` sums in non-increasing order, repeated by multiplicity.
    /// Only sensible for small `n`.
    pub fn sorted_sums(&self) -> Vec<i128> {
        self.counts
            .iter()
            .rev()
            .flat_map(|(&x, &c)| std::iter::repeat_n(x, c as usize))
            .collect()
    }

    /// Exact `E[S]` from the distribution.
    pub fn mean(&self) -> BigRational {
        let weighted = self.counts.iter().fold(BigInt::zero(), |acc, (&x, &c)| {
            acc + BigInt::from(x) * BigInt::from(c)
        });
        BigRational::new(weighted, BigInt::from(self.patterns()))
    }

    /// Exact `E[S^2]` from the distribution.
    pub fn second_moment(&self) -> BigRational {
        let weighted = self.counts.iter().fold(BigInt::zero(), |acc, (&x, &c)| {
            let x = BigInt::from(x);
            acc + &x * &x * BigInt::from(c)
        });
        BigRational::new(weighted, BigInt::from(self.patterns()))
    }

    /// Exact `P[S > t * sigma]` with `sigma^2 = sum v_i^2`. Compared as
    /// `x > 0 and x^2 > t^2 sigma^2` using the exact value of `t`.
    pub fn tail_above_sigma_multiple(&self, t: f64) -> Result<Prob, LoError> {
        if !(t.is_finite() && t > 0.0) {
            return Err(LoError::BadThreshold);
        }
        let t = rational_from_f64(t).ok_or(LoError::BadThreshold)?;
        let bound = &t * &t * BigRational::from_integer(BigInt::from(sigma_squared(&self.source)));
        let mass = self
            .counts
            .range(1..)
            .filter(|(&x, _)| BigRational::from_integer(BigInt::from(x) * BigInt::from(x)) > bound)
            .fold(BigNat::zero(), |acc, (_, &c)| acc + c);
        Ok(Prob::new(mass, self.patterns()).expect("tail mass within 2^n"))
    }
}

fn check_total(v: &GainMultiset) -> Result<usize, LoError> {
    let total = v.total();
    // dense table of 2 * total + 1 entries
    if total > (1u128 << 26) {
        return Err(LoError::TotalTooLarge(total.to_string()));
    }
    Ok(total as usize)
}

/// Exact distribution by convolving one `+-v_i` at a time over a dense
/// table of partial sums. Work is `O(n * sum v_i)`.
pub fn signed_sum_distribution(v: &GainMultiset) -> Result<SignedSumDist, LoError> {
    let total = check_total(v)?;
    let width = 2 * total + 1;
    // index = sum + total
    let mut table = vec![0u128; width];
    let mut next = vec![0u128; width];
    table[total] = 1;
    let mut reach = 0usize;
    for &value in v.values() {
        let value = value as usize;
        let new_reach = reach + value;
        for slot in &mut next[total - new_reach..=total + new_reach] {
            *slot = 0;
        }
        for idx in total - reach..=total + reach {
            let c = table[idx];
            if c != 0 {
                next[idx + value] += c;
                next[idx - value] += c;
            }
        }
        std::mem::swap(&mut table, &mut next);
        reach = new_reach;
    }
    let counts = table
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0)
        .map(|(idx, &c)| (idx as i128 - total as i128, c))
        .collect();
    Ok(SignedSumDist {
        source: v.clone(),
        counts,
    })
}

/// Walks the `2^n` sign patterns in Gray-code order. Each step flips one
/// sign, moving the running sum by `2 v_i`.
fn for_each_pattern_sum(
    v: &GainMultiset,
    mut visit: impl FnMut(i128) -> bool,
) -> Result<(), LoError> {
    let n = v.len();
    if n > ENUMERATION_GUARD {
        return Err(LoError::EnumerationGuard(n));
    }
    let values = v.values();
    let mut positive = vec![true; n];
    let mut sum = v.total() as i128;
    if !visit(sum) {
        return Ok(());
    }
    for step in 1u64..(1u64 << n) {
        let i = step.trailing_zeros() as usize;
        let delta = 2 * values[i] as i128;
        sum += if positive[i] { -delta } else { delta };
        positive[i] = !positive[i];
        if !visit(sum) {
            break;
        }
    }
    Ok(())
}

/// Same result as [`signed_sum_distribution`], built by visiting every sign
/// pattern. Refuses more than [`ENUMERATION_GUARD`] values.
pub fn enumerate_signed_sums(v: &GainMultiset) -> Result<SignedSumDist, LoError> {
    let mut counts = BTreeMap::new();
    for_each_pattern_sum(v, |s| {
        *counts.entry(s).or_insert(0u128) += 1;
        true
    })?;
    Ok(SignedSumDist {
        source: v.clone(),
        counts,
    })
}

/// Most likely sum and its probability. Ties go to the smallest `|x|`,
/// then to the positive value.
pub fn max_point_probability(dist: &SignedSumDist) -> (i128, Prob) {
    let (&x, _) = dist
        .counts
        .iter()
        .max_by(|(xa, ca), (xb, cb)| {
            ca.cmp(cb)
                .then_with(|| xb.abs().cmp(&xa.abs()))
                .then_with(|| xa.cmp(xb))
        })
        .expect("distribution is never empty");
    (x, dist.prob_of(x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanSigma {
    #[serde(serialize_with = "crate::exactnum::serialize_display")]
    pub mean: BigRational,
    #[serde(serialize_with = "crate::exactnum::serialize_display")]
    pub sigma_sq: BigNat,
    pub sigma: f64,
}

pub fn sigma_squared(v: &GainMultiset) -> BigNat {
    v.values()
        .iter()
        .fold(BigNat::zero(), |acc, &x| acc + BigNat::from(x) * x)
}

/// Mean (always zero under fair signs) and variance `sum v_i^2`.
pub fn mean_and_sigma(v: &GainMultiset) -> MeanSigma {
    let sigma_sq = sigma_squared(v);
    let sigma = sigma_sq.to_f64().unwrap_or(f64::INFINITY).sqrt();
    MeanSigma {
        mean: BigRational::zero(),
        sigma_sq,
        sigma,
    }
}

/// Whether two different sign patterns give the same sum.
pub fn has_equal_distinct_sums(v: &GainMultiset) -> Result<bool, LoError> {
    Ok(signed_sum_distribution(v)?.counts.values().any(|&c| c >= 2))
}

/// Pattern-enumeration route for [`has_equal_distinct_sums`], stopping at
/// the first repeated sum.
pub fn has_equal_distinct_sums_enumerated(v: &GainMultiset) -> Result<bool, LoError> {
    let mut seen = HashSet::new();
    let mut repeated = false;
    for_each_pattern_sum(v, |s| {
        repeated = !seen.insert(s);
        !repeated
    })?;
    Ok(repeated)
}

/// Largest size accepted by [`verify_minimal_sum_theorem`].
pub const MINIMAL_SUM_MAX_N: u32 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MinimalSumReport {
    pub n: u32,
    /// Sets with total strictly below this were checked; `2^n - 1`.
    pub sum_cap: u64,
    pub sets_checked: u64,
    /// Sets below the cap whose sign patterns give all-distinct sums.
    pub counterexamples: Vec<Vec<u64>>,
    /// Whether `{1, 2, ..., 2^(n-1)}` has all-distinct sums.
    pub powers_of_two_distinct: bool,
    pub powers_of_two_total: u64,
}

impl MinimalSumReport {
    pub fn holds(&self) -> bool {
        self.counterexamples.is_empty()
            && self.powers_of_two_distinct
            && self.powers_of_two_total == self.sum_cap
    }
}

/// Checks that every set of `n` distinct positive integers with total below
/// `2^n - 1` has two sign patterns with equal sums, and that the powers of
/// two reach `2^n - 1` without any.
pub fn verify_minimal_sum_theorem(n: u32) -> Result<MinimalSumReport, LoError> {
    if n == 0 || n > MINIMAL_SUM_MAX_N {
        return Err(LoError::OutOfDeskRange {
            got: n,
            max: MINIMAL_SUM_MAX_N,
        });
    }
    let sum_cap = (1u64 << n) - 1;
    let mut report = MinimalSumReport {
        n,
        sum_cap,
        sets_checked: 0,
        counterexamples: Vec::new(),
        powers_of_two_distinct: false,
        powers_of_two_total: 0,
    };

    // increasing sequences a_1 < ... < a_n with total < sum_cap
    fn extend(
        current: &mut Vec<u64>,
        n: usize,
        total: u64,
        cap: u64,
        report: &mut MinimalSumReport,
    ) -> Result<(), LoError> {
        if current.len() == n {
            report.sets_checked += 1;
            let set = GainMultiset::new(current.clone())?;
            if !has_equal_distinct_sums_enumerated(&set)? {
                report.counterexamples.push(current.clone());
            }
            return Ok(());
        }
        let start = current.last().map_or(1, |&x| x + 1);
        let remaining = (n - current.len()) as u64;
        let mut next = start;
        // smallest completion: next, next+1, ..., next+remaining-1
        while total + remaining * next + remaining * (remaining - 1) / 2 < cap {
            current.push(next);
            extend(current, n, total + next, cap, report)?;
            current.pop();
            next += 1;
        }
        Ok(())
    }

    extend(&mut Vec::new(), n as usize, 0, sum_cap, &mut report)?;

    let powers = GainMultiset::powers_of_two(n as usize)?;
    report.powers_of_two_total = powers.total() as u64;
    report.powers_of_two_distinct = !has_equal_distinct_sums_enumerated(&powers)?;
    Ok(report)
}

/// `(2^n - 1) / n`: the mean washed loss when each of the losses
/// `1, 2, ..., 2^(n-1)` is equally likely to be the one disallowed.
pub fn expected_disallowed_loss_pow2(n: u32) -> BigRational {
    assert!(n >= 1, "n must be at least 1");
    let numer = (BigInt::one() << n) - 1;
    BigRational::new(numer, BigInt::from(n))
}

/// Mean of `s + 1` over every sum except the single all-gains one, for
/// identical unit gains and losses: one loss is washed away.
pub fn wash_adjusted_mean(dist: &SignedSumDist) -> Result<BigRational, LoError> {
    if !dist.source.is_all_ones() {
        return Err(LoError::NotAllOnes);
    }
    let n = dist.source.len() as i128;
    let mut weighted = BigInt::zero();
    for (&x, &c) in &dist.counts {
        // the top sum n occurs once and is dropped
        let c = if x == n { c - 1 } else { c };
        weighted += BigInt::from(x + 1) * BigInt::from(c);
    }
    let others = BigInt::from(dist.patterns()) - BigInt::one();
    if others.is_zero() {
        return Ok(BigRational::zero());
    }
    Ok(BigRational::new(weighted, others))
}

/// `1 - n / (2^n - 1)`.
pub fn wash_adjustment_factor(n: u32) -> BigRational {
    assert!(n >= 1, "n must be at least 1");
    let others = (BigInt::one() << n) - 1;
    BigRational::one() - BigRational::new(BigInt::from(n), others)
}

/// Expected total gain with unit gains and losses when at most one wash
/// sale occurs, exactly: `B_d(calendar_n, g, b) * (1 - n / (2^n - 1))`.
pub fn expected_gain_single_wash_exact(
    n: u32,
    g: u64,
    b: u64,
    calendar_n: u64,
    d: u64,
) -> BigRational {
    boygirl_span_prob(calendar_n, d, b, g).into_rational() * wash_adjustment_factor(n)
}

/// Float value of [`expected_gain_single_wash_exact`]. The usual instance is
/// `calendar_n = 252`, `d = 30`.
pub fn expected_gain_single_wash(n: u32, g: u64, b: u64, calendar_n: u64, d: u64) -> f64 {
    rational_to_f64(&expected_gain_single_wash_exact(n, g, b, calendar_n, d))
}

/// `exp(-t^2 / 2)`, bounding `P[S > t sigma]`.
pub fn rademacher_tail_bound(t: f64) -> f64 {
    (-(t * t) / 2.0).exp()
}
