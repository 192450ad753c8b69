//! Exhaustive and seeded Monte Carlo oracles for the collision
//! probabilities, and the fair buy/sell sign process.
//!
//! # Random streams
//!
//! All randomness comes from SplitMix64 (Steele, Lea and Flood, 2014; the
//! reference `next` adds `0x9e3779b97f4a7c15` to the state and applies the
//! `30/27/31` xor-shift-multiply finaliser). A simulation seed is first
//! turned into a stream key, the first SplitMix64 output of a generator
//! whose state is the seed. Trial `t` then runs its own SplitMix64 with
//! state `key ^ t`. Each trial draws its boys first, then its girls (or its
//! `k` unlabeled members), one day per draw.
//!
//! Days are drawn uniformly from `0..n` with Lemire's multiply-shift
//! rejection method: `m = x * n` as a 128-bit product, reject while the low
//! 64 bits are below `(2^64 - n) mod n`, return the high 64 bits.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Signed;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::birthday::{CollisionSpec, Population};
use crate::exactnum::{BigNat, Prob};

/// Default cap on the number of assignments the exhaustive oracle visits.
pub const DEFAULT_EXHAUSTIVE_GUARD: u64 = 10_000_000;

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.576;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonteCarloError {
    #[error("trial count must be at least 1")]
    ZeroTrials,
    #[error("{assignments} assignments exceed the exhaustive guard of {guard}")]
    GuardExceeded { assignments: String, guard: u64 },
    #[error("portfolio value must be positive")]
    ZeroPortfolio,
    #[error("asset value must lie in (0, portfolio value]")]
    AssetOutOfRange,
}

/// Which outcomes count as a collision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CollisionRule {
    /// Unlabeled: any two members fewer than `d` days apart. Boy-girl: some
    /// boy and some girl fewer than `d` days apart.
    CrossLabel,
    /// The separation condition behind the block-counting formulas. For
    /// boy-girl populations, any boy-girl pair sharing a day, or any two
    /// distinct occupied days fewer than `d` apart regardless of label.
    /// Identical to `CrossLabel` for unlabeled populations and for `d = 1`.
    BlockSeparation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SimConfig {
    pub spec: CollisionSpec,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimResult {
    pub hits: u64,
    pub trials: u64,
    pub estimate: f64,
    /// `2.576 * sqrt(p (1 - p) / trials)` around the estimate.
    pub ci99_halfwidth: f64,
}

impl SimResult {
    fn from_counts(hits: u64, trials: u64) -> Self {
        let estimate = hits as f64 / trials as f64;
        SimResult {
            hits,
            trials,
            estimate,
            ci99_halfwidth: Z_99 * (estimate * (1.0 - estimate) / trials as f64).sqrt(),
        }
    }

    /// Whether `value` lies within `multiple` half-widths of the estimate.
    pub fn covers(&self, value: f64, multiple: f64) -> bool {
        (self.estimate - value).abs() <= multiple * self.ci99_halfwidth
    }
}

/// Key from which every per-trial stream of a simulation is derived.
pub fn stream_key(seed: u64) -> u64 {
    SplitMix64::seed_from_u64(seed).next_u64()
}

/// Generator for trial `trial` of a simulation seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(stream_key(seed) ^ trial)
}

/// Uniform integer in `0..n`, `n >= 1`.
pub fn uniform_below<R: RngCore>(rng: &mut R, n: u64) -> u64 {
    debug_assert!(n > 0);
    let mut m = rng.next_u64() as u128 * n as u128;
    if (m as u64) < n {
        let threshold = n.wrapping_neg() % n;
        while (m as u64) < threshold {
            m = rng.next_u64() as u128 * n as u128;
        }
    }
    (m >> 64) as u64
}

const BITSET_MAX_DAYS: u64 = 1 << 16;

/// Reusable buffers for collision checks.
#[derive(Debug, Default)]
struct Scratch {
    days: Vec<u64>,
    labeled: Vec<(u64, bool)>,
    bits: Vec<u64>,
}

impl Scratch {
    fn same_day_unlabeled(&mut self, n: u64) -> bool {
        self.bits.clear();
        self.bits.resize(n.div_ceil(64) as usize, 0);
        for &day in &self.days {
            let (w, b) = ((day / 64) as usize, day % 64);
            if self.bits[w] >> b & 1 == 1 {
                return true;
            }
            self.bits[w] |= 1 << b;
        }
        false
    }

    fn same_day_boy_girl(&mut self, n: u64, boys: usize) -> bool {
        self.bits.clear();
        self.bits.resize(n.div_ceil(64) as usize, 0);
        for &day in &self.days[..boys] {
            self.bits[(day / 64) as usize] |= 1 << (day % 64);
        }
        self.days[boys..]
            .iter()
            .any(|&day| self.bits[(day / 64) as usize] >> (day % 64) & 1 == 1)
    }

    /// Collision test for the days currently in `self.days`, boys first.
    fn collides(&mut self, spec: &CollisionSpec, rule: CollisionRule) -> bool {
        let (n, d) = (spec.days(), spec.span());
        match spec.population() {
            Population::Unlabeled(_) => {
                if d == 1 && n <= BITSET_MAX_DAYS {
                    return self.same_day_unlabeled(n);
                }
                self.labeled.clear();
                self.labeled.extend(self.days.iter().map(|&x| (x, false)));
                self.labeled.sort_unstable();
                self.labeled.windows(2).any(|w| w[1].0 - w[0].0 < d)
            }
            Population::BoyGirl { boys, .. } => {
                let boys = boys as usize;
                if d == 1 && n <= BITSET_MAX_DAYS {
                    return self.same_day_boy_girl(n, boys);
                }
                self.labeled.clear();
                self.labeled
                    .extend(self.days.iter().enumerate().map(|(i, &x)| (x, i >= boys)));
                self.labeled.sort_unstable();
                match rule {
                    // the closest boy-girl pair is adjacent in sorted order
                    CollisionRule::CrossLabel => self
                        .labeled
                        .windows(2)
                        .any(|w| w[0].1 != w[1].1 && w[1].0 - w[0].0 < d),
                    CollisionRule::BlockSeparation => {
                        self.labeled.dedup();
                        self.labeled.windows(2).any(|w| w[1].0 - w[0].0 < d)
                    }
                }
            }
        }
    }
}

/// Estimates the collision probability of `config.spec` from
/// `config.trials` independent draws. Deterministic for a fixed seed and
/// independent of how trials are scheduled across threads.
pub fn simulate_collision(config: &SimConfig) -> Result<SimResult, MonteCarloError> {
    if config.trials == 0 {
        return Err(MonteCarloError::ZeroTrials);
    }
    let spec = config.spec;
    let key = stream_key(config.seed);
    let (n, size) = (spec.days(), spec.population().total() as usize);
    let hits = (0..config.trials)
        .into_par_iter()
        .map_init(Scratch::default, |scratch, trial| {
            let mut rng = SplitMix64::seed_from_u64(key ^ trial);
            scratch.days.clear();
            scratch
                .days
                .extend((0..size).map(|_| uniform_below(&mut rng, n)));
            scratch.collides(&spec, CollisionRule::CrossLabel) as u64
        })
        .sum();
    Ok(SimResult::from_counts(hits, config.trials))
}

fn assignment_count(spec: &CollisionSpec, guard: u64) -> Result<u64, MonteCarloError> {
    let exponent = spec.population().total();
    let exceeded = || MonteCarloError::GuardExceeded {
        assignments: format!("{}^{}", spec.days(), exponent),
        guard,
    };
    let count = u32::try_from(exponent)
        .ok()
        .and_then(|e| spec.days().checked_pow(e))
        .ok_or_else(exceeded)?;
    if count > guard {
        return Err(exceeded());
    }
    Ok(count)
}

/// Exact collision probability by visiting every day assignment, under the
/// default guard and the cross-label rule.
pub fn exhaustive_collision_prob(spec: &CollisionSpec) -> Result<Prob, MonteCarloError> {
    exhaustive_collision_prob_with(spec, CollisionRule::CrossLabel, DEFAULT_EXHAUSTIVE_GUARD)
}

/// Exhaustive count under an explicit rule and guard.
pub fn exhaustive_collision_prob_with(
    spec: &CollisionSpec,
    rule: CollisionRule,
    guard: u64,
) -> Result<Prob, MonteCarloError> {
    let total = assignment_count(spec, guard)?;
    let n = spec.days();
    let size = spec.population().total() as usize;
    let mut odometer = vec![0u64; size];
    let mut scratch = Scratch::default();
    let mut hits = 0u64;
    for _ in 0..total {
        scratch.days.clear();
        scratch.days.extend_from_slice(&odometer);
        hits += scratch.collides(spec, rule) as u64;
        for digit in odometer.iter_mut() {
            *digit += 1;
            if *digit < n {
                break;
            }
            *digit = 0;
        }
    }
    Ok(Prob::new(BigNat::from(hits), BigNat::from(total)).expect("hits never exceed total"))
}

/// A run of fair buy (+1) / sell (-1) signs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TradeSignPath {
    pub signs: Vec<i8>,
    pub buys: u64,
    pub sells: u64,
}

impl TradeSignPath {
    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Buys minus sells.
    pub fn imbalance(&self) -> i64 {
        self.buys as i64 - self.sells as i64
    }
}

/// `t` independent fair signs from SplitMix64 seeded with `seed`; a draw is
/// a buy when its top bit is set.
pub fn simulate_trade_signs(t: u64, seed: u64) -> TradeSignPath {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let signs: Vec<i8> = (0..t)
        .map(|_| if rng.next_u64() >> 63 == 1 { 1 } else { -1 })
        .collect();
    let buys = signs.iter().filter(|&&s| s == 1).count() as u64;
    TradeSignPath {
        buys,
        sells: t - buys,
        signs,
    }
}

/// Trades expected in one asset when `total_trades` are spread in
/// proportion to starting market value.
pub fn expected_trades_per_asset(
    total_trades: u64,
    asset_value: &BigRational,
    portfolio_value: &BigRational,
) -> Result<BigRational, MonteCarloError> {
    if !portfolio_value.is_positive() {
        return Err(MonteCarloError::ZeroPortfolio);
    }
    if !asset_value.is_positive() || asset_value > portfolio_value {
        return Err(MonteCarloError::AssetOutOfRange);
    }
    Ok(BigRational::from_integer(BigInt::from(total_trades)) * asset_value / portfolio_value)
}
