//! Exact birthday-problem probabilities, Littlewood-Offord signed-sum
//! analysis and wash-sale ledger accounting, with exhaustive and seeded
//! Monte Carlo oracles for every closed form.

pub mod birthday;
pub mod exactnum;
pub mod ledger;
pub mod lo;
pub mod montecarlo;
