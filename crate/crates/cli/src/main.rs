//! `washprob`: published tables, exact and simulated collision probabilities,
//! signed-sum analysis and wash-sale ledger processing from the shell.
//!
//! Exit status is 0 on success, 2 for usage errors and 3 for data or
//! ledger-integrity errors.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use render::Format;

const SPAN_NOTE: &str = "\
Spans: two days collide when they are fewer than d days apart, i.e. at most
d - 1 apart. A wash-sale window of 30 calendar days either side (inclusive)
is therefore d = 31; the published tables use d = 30. Those tables also pair
a calendar-day span with n = 252 trading days, and that mix is reproduced
unchanged.";

#[derive(Debug, Parser)]
#[command(
    name = "washprob",
    version,
    about = "Birthday-problem odds of wash sales, exactly",
    after_help = SPAN_NOTE
)]
pub struct Cli {
    /// Output layout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,

    /// Decimal places for rounded figures; each command has its own default.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..=12))]
    pub precision: Option<u32>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact collision probability for one instance.
    #[command(subcommand)]
    Prob(ProbCmd),
    /// Regenerate the published probability tables.
    Tables {
        #[arg(value_enum)]
        which: TableKind,
    },
    /// Smallest population reaching a target probability.
    Search(SearchArgs),
    /// Seeded Monte Carlo estimate, compared with the exact value.
    Simulate(SimulateArgs),
    /// Exact probability by visiting every day assignment.
    Exhaustive(ExhaustiveArgs),
    /// Signed sums of gains and losses.
    #[command(subcommand)]
    Lo(LoCmd),
    /// Detect wash sales in a CSV ledger and write the adjustments and gain report.
    Wash {
        ledger: PathBuf,
        /// Directory for `adjustments.csv` and `report.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbCmd {
    /// Some pair shares a day: B(n,k).
    Birthday {
        #[arg(short)]
        n: u64,
        #[arg(short)]
        k: u64,
    },
    /// Some pair lands fewer than d days apart: B_d(n,k).
    Span {
        #[arg(short)]
        n: u64,
        #[arg(short)]
        d: u64,
        #[arg(short)]
        k: u64,
    },
    /// Some boy shares a day with some girl: B(n,b,g).
    Boygirl {
        #[arg(short)]
        n: u64,
        #[arg(short)]
        b: u64,
        #[arg(short)]
        g: u64,
    },
    /// Block-counting boy-girl probability within d days: B_d(n,b,g).
    BoygirlSpan {
        #[arg(short)]
        n: u64,
        #[arg(short)]
        d: u64,
        #[arg(short)]
        b: u64,
        #[arg(short)]
        g: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableKind {
    /// B(252,h,h) and B(365,h,h) for h = 1, 5, ..., 35.
    Example1,
    /// B_30(252,h,h) and B_30(365,h,h) for h = 1..4.
    Example2,
    /// exp(-1/(2t)) for t = 10, 20, ..., 50.
    Chernoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyKind {
    Birthday,
    Span,
    BoygirlBalanced,
    BoygirlSpanBalanced,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_enum)]
    pub family: FamilyKind,
    #[arg(short)]
    pub n: u64,
    /// Span, for the span families.
    #[arg(short)]
    pub d: Option<u64>,
    /// Target probability in (0, 1], as a decimal or `p/q`.
    #[arg(long)]
    pub target: String,
}

#[derive(Debug, Args)]
pub struct PopulationArgs {
    #[arg(long)]
    pub n: u64,
    #[arg(long, default_value_t = 1)]
    pub d: u64,
    /// Unlabeled population size.
    #[arg(long, conflicts_with_all = ["b", "g"], required_unless_present_all = ["b", "g"])]
    pub k: Option<u64>,
    #[arg(long, requires = "g")]
    pub b: Option<u64>,
    #[arg(long, requires = "b")]
    pub g: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub population: PopulationArgs,
    #[arg(long, default_value_t = 1_000_000)]
    pub trials: u64,
    #[arg(long)]
    pub seed: u64,
    /// Assignment cap for the exhaustive comparison, where no closed form applies.
    #[arg(long, env = "WASHPROB_GUARD", default_value_t = washprob_core::montecarlo::DEFAULT_EXHAUSTIVE_GUARD)]
    pub guard: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleKind {
    CrossLabel,
    BlockSeparation,
}

#[derive(Debug, Args)]
pub struct ExhaustiveArgs {
    #[command(flatten)]
    pub population: PopulationArgs,
    #[arg(long, value_enum, default_value_t = RuleKind::CrossLabel)]
    pub rule: RuleKind,
    #[arg(long, env = "WASHPROB_GUARD", default_value_t = washprob_core::montecarlo::DEFAULT_EXHAUSTIVE_GUARD)]
    pub guard: u64,
}

#[derive(Debug, Subcommand)]
pub enum LoCmd {
    /// Distribution of the signed sum.
    Dist {
        values: String,
        /// One row per sign pattern, sums in non-increasing order.
        #[arg(long)]
        expand: bool,
    },
    /// Mean and standard deviation of the signed sum.
    Sigma { values: String },
    /// Most likely signed sum and its probability.
    Maxprob { values: String },
    /// Whether two sign patterns give the same sum.
    Distinct { values: String },
    /// Check that no n distinct values summing below 2^n - 1 avoid equal sums.
    VerifyMinsum {
        #[arg(long)]
        n: u32,
    },
    /// Expected gain with unit gains and losses and at most one wash sale.
    ExpectedGain {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        g: u64,
        #[arg(long)]
        b: u64,
        #[arg(long, default_value_t = 252)]
        calendar: u64,
        #[arg(long, default_value_t = 30)]
        d: u64,
    },
    /// Mean signed sum of n unit values after one loss is washed.
    AdjustedMean {
        #[arg(long)]
        n: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(table) => {
            print!("{}", table.render(cli.format));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("washprob: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
