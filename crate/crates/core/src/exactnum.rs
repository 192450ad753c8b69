//! Exact integer and rational arithmetic plus the combinatorial primitives
//! the closed-form probabilities are assembled from.

use std::fmt;
use std::sync::{OnceLock, RwLock};

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Serialize, Serializer};
use thiserror::Error;

/// Arbitrary-precision nonnegative integer.
pub type BigNat = BigUint;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProbError {
    #[error("probability denominator must be positive")]
    ZeroDenominator,
    #[error("probability {0} lies outside [0, 1]")]
    OutOfRange(String),
}

/// m(m-1)...(m-k+1). Empty product for k = 0; zero when k > m.
pub fn falling_factorial(m: u64, k: u64) -> BigNat {
    if k > m {
        return BigNat::zero();
    }
    let mut acc = BigNat::one();
    for factor in (m - k + 1)..=m {
        acc *= factor;
    }
    acc
}

/// Falling factorial with a possibly negative base. A base below `k`
/// (including any negative base) yields zero.
pub fn falling_factorial_signed(m: i64, k: u64) -> BigNat {
    if m < 0 {
        return BigNat::zero();
    }
    falling_factorial(m as u64, k)
}

pub fn factorial(k: u64) -> BigNat {
    falling_factorial(k, k)
}

pub fn binomial(m: u64, k: u64) -> BigNat {
    if k > m {
        return BigNat::zero();
    }
    let k = k.min(m - k);
    let mut acc = BigNat::one();
    for i in 1..=k {
        // exact at every step: acc * (m-k+i) is divisible by i
        acc = acc * (m - k + i) / i;
    }
    acc
}

pub fn pow(base: u64, exp: u64) -> BigNat {
    num_traits::pow(BigNat::from(base), exp as usize)
}

/// Growable memo table for Stirling numbers of the second kind.
///
/// Row `m` holds `{m, 0..=m}`. Rows are only ever appended, so a filled
/// cell never changes.
#[derive(Debug, Clone)]
pub struct Stirling2Table {
    rows: Vec<Vec<BigNat>>,
}

impl Default for Stirling2Table {
    fn default() -> Self {
        Self::new()
    }
}

impl Stirling2Table {
    pub fn new() -> Self {
        Stirling2Table {
            rows: vec![vec![BigNat::one()]],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    /// Extend the table until row `m` exists.
    pub fn grow_to(&mut self, m: usize) {
        while self.rows.len() <= m {
            let prev = self.rows.last().expect("table has row 0");
            let len = prev.len();
            let mut row = Vec::with_capacity(len + 1);
            row.push(BigNat::zero());
            for i in 1..len {
                row.push(&prev[i] * i as u64 + &prev[i - 1]);
            }
            row.push(prev[len - 1].clone());
            self.rows.push(row);
        }
    }

    /// `{m, i}`, or `None` if row `m` has not been built yet.
    pub fn lookup(&self, m: usize, i: usize) -> Option<BigNat> {
        let row = self.rows.get(m)?;
        Some(row.get(i).cloned().unwrap_or_else(BigNat::zero))
    }

    pub fn get(&mut self, m: usize, i: usize) -> BigNat {
        self.grow_to(m);
        self.lookup(m, i).expect("row was just grown")
    }

    pub fn row(&mut self, m: usize) -> &[BigNat] {
        self.grow_to(m);
        &self.rows[m]
    }
}

fn shared_stirling() -> &'static RwLock<Stirling2Table> {
    static TABLE: OnceLock<RwLock<Stirling2Table>> = OnceLock::new();
    TABLE.get_or_init(|| RwLock::new(Stirling2Table::new()))
}

/// Stirling number of the second kind `{m, i}`: partitions of an m-set into
/// i non-empty blocks. Backed by a process-wide memo table.
pub fn stirling2(m: u64, i: u64) -> BigNat {
    if i > m {
        return BigNat::zero();
    }
    let (m, i) = (m as usize, i as usize);
    if let Some(v) = shared_stirling()
        .read()
        .expect("stirling table lock poisoned")
        .lookup(m, i)
    {
        return v;
    }
    let mut table = shared_stirling()
        .write()
        .expect("stirling table lock poisoned");
    table.get(m, i)
}

/// Checks `m^n = sum_{i=1..n} {n,i} m^(falling i)` exactly.
pub fn surjection_identity_check(n: u64, m: u64) -> bool {
    let lhs = pow(m, n);
    let rhs = (1..=n).fold(BigNat::zero(), |acc, i| {
        acc + stirling2(n, i) * falling_factorial(m, i)
    });
    lhs == rhs
}

/// Exact probability: a rational in `[0, 1]`, always in lowest terms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prob(BigRational);

impl Prob {
    pub fn new(numer: BigNat, denom: BigNat) -> Result<Prob, ProbError> {
        if denom.is_zero() {
            return Err(ProbError::ZeroDenominator);
        }
        Prob::from_rational(BigRational::new(
            BigInt::from_biguint(Sign::Plus, numer),
            BigInt::from_biguint(Sign::Plus, denom),
        ))
    }

    pub fn from_rational(value: BigRational) -> Result<Prob, ProbError> {
        if value.is_negative() || value > BigRational::one() {
            return Err(ProbError::OutOfRange(value.to_string()));
        }
        Ok(Prob(value))
    }

    pub fn zero() -> Prob {
        Prob(BigRational::zero())
    }

    pub fn one() -> Prob {
        Prob(BigRational::one())
    }

    /// `1 - favourable/total` for a count of favourable outcomes out of `total`.
    pub fn complement_of_count(favourable: BigNat, total: BigNat) -> Result<Prob, ProbError> {
        Ok(Prob::new(favourable, total)?.complement())
    }

    pub fn complement(&self) -> Prob {
        Prob(BigRational::one() - &self.0)
    }

    pub fn is_one(&self) -> bool {
        self.0.is_one()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn as_rational(&self) -> &BigRational {
        &self.0
    }

    pub fn into_rational(self) -> BigRational {
        self.0
    }

    pub fn numer(&self) -> BigNat {
        self.0.numer().magnitude().clone()
    }

    pub fn denom(&self) -> BigNat {
        self.0.denom().magnitude().clone()
    }

    pub fn to_f64(&self) -> f64 {
        rational_to_f64(&self.0)
    }

    /// Decimal rendering rounded half away from zero.
    pub fn to_decimal(&self, places: u32) -> String {
        format_decimal(&self.0, places)
    }
}

impl Serialize for Prob {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl fmt::Display for Prob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Serializes any displayable value as its string form.
pub fn serialize_display<T: fmt::Display, S: Serializer>(
    value: &T,
    serializer: S,
) -> Result<S::Ok, S::Error> {
    serializer.collect_str(value)
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Exact rational value of a finite float.
pub fn rational_from_f64(x: f64) -> Option<BigRational> {
    BigRational::from_float(x)
}

/// Rounds `value * 10^places` to an integer, ties away from zero.
pub fn round_half_away_scaled(value: &BigRational, places: u32) -> BigInt {
    let scale = num_traits::pow(BigInt::from(10), places as usize);
    let scaled = value * BigRational::from_integer(scale);
    let magnitude = scaled.abs();
    let (whole, rem) = magnitude.numer().div_rem(magnitude.denom());
    let twice_rem: BigInt = rem * 2;
    let rounded = if &twice_rem >= magnitude.denom() {
        whole + 1
    } else {
        whole
    };
    if scaled.is_negative() {
        -rounded
    } else {
        rounded
    }
}

/// Fixed-point rendering with ties rounded away from zero.
pub fn format_decimal(value: &BigRational, places: u32) -> String {
    let scaled = round_half_away_scaled(value, places);
    let negative = scaled.is_negative();
    let digits = scaled.magnitude().to_string();
    let places = places as usize;
    let body = if places == 0 {
        digits
    } else {
        let padded = format!("{digits:0>width$}", width = places + 1);
        let (int_part, frac_part) = padded.split_at(padded.len() - places);
        format!("{int_part}.{frac_part}")
    };
    if negative {
        format!("-{body}")
    } else {
        body
    }
}

/// Same rounding rule as [`format_decimal`], applied to the exact value of a float.
pub fn format_f64(value: f64, places: u32) -> String {
    match rational_from_f64(value) {
        Some(r) => format_decimal(&r, places),
        None => value.to_string(),
    }
}

/// Parses a decimal such as `0.5` or `-12.375`, or a fraction `p/q`, exactly.
pub fn parse_exact(text: &str) -> Option<BigRational> {
    let text = text.trim();
    if text.contains('/') {
        return text.parse::<BigRational>().ok();
    }
    let d = rust_decimal::Decimal::from_str_exact(text).ok()?;
    let scale = num_traits::pow(BigInt::from(10), d.scale() as usize);
    Some(BigRational::new(BigInt::from(d.mantissa()), scale))
}

/// Exact text for a rational: a terminating decimal when the denominator
/// has only factors 2 and 5, otherwise `p/q`.
pub fn format_exact(value: &BigRational) -> String {
    let mut d = value.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let (mut twos, mut fives) = (0u32, 0u32);
    while d.is_even() {
        d /= &two;
        twos += 1;
    }
    while (&d % &five).is_zero() {
        d /= &five;
        fives += 1;
    }
    if !d.is_one() {
        return value.to_string();
    }
    let places = twos.max(fives);
    let s = format_decimal(value, places);
    if places == 0 {
        s
    } else {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
