use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;

use washprob_core::birthday::{
    chernoff_imbalance_bound, min_k_at_least, BirthdayError, CollisionSpec, Family, Population,
};
use washprob_core::exactnum::{format_decimal, format_exact, format_f64, parse_exact, Prob};
use washprob_core::ledger::{self, LedgerError};
use washprob_core::lo::{self, GainMultiset, LoError};
use washprob_core::montecarlo::{
    exhaustive_collision_prob_with, simulate_collision, CollisionRule, MonteCarloError, SimConfig,
};

use crate::render::Table;
use crate::{
    Cli, Command, ExhaustiveArgs, FamilyKind, LoCmd, PopulationArgs, ProbCmd, RuleKind, SearchArgs,
    SimulateArgs, TableKind,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<BirthdayError> for CliError {
    fn from(e: BirthdayError) -> Self {
        match e {
            BirthdayError::InvalidSpec(_) | BirthdayError::ZeroTarget => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LoError> for CliError {
    fn from(e: LoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<MonteCarloError> for CliError {
    fn from(e: MonteCarloError) -> Self {
        match e {
            MonteCarloError::GuardExceeded { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<Table> {
    let precision = |default: u32| cli.precision.unwrap_or(default);
    match &cli.command {
        Command::Prob(cmd) => prob(cmd, &precision),
        Command::Tables { which } => tables(*which, cli.precision),
        Command::Search(args) => search(args, &precision),
        Command::Simulate(args) => simulate(args, precision(4)),
        Command::Exhaustive(args) => exhaustive(args, precision(4)),
        Command::Lo(cmd) => lo_cmd(cmd, precision(4)),
        Command::Wash { ledger, out } => wash(ledger, out),
    }
}

fn prob(cmd: &ProbCmd, precision: &dyn Fn(u32) -> u32) -> Result<Table> {
    let (spec, places) = match *cmd {
        ProbCmd::Birthday { n, k } => (CollisionSpec::unlabeled(n, 1, k)?, precision(4)),
        ProbCmd::Span { n, d, k } => (CollisionSpec::unlabeled(n, d, k)?, precision(4)),
        ProbCmd::Boygirl { n, b, g } => (CollisionSpec::boy_girl(n, 1, b, g)?, precision(4)),
        ProbCmd::BoygirlSpan { n, d, b, g } => (CollisionSpec::boy_girl(n, d, b, g)?, precision(3)),
    };
    let p = spec.exact_prob();
    let mut table = Table::new(&["spec", "exact", "decimal"]);
    table.push(vec![spec.to_string(), p.to_string(), p.to_decimal(places)]);
    Ok(table)
}

fn tables(which: TableKind, precision: Option<u32>) -> Result<Table> {
    let bg = |n, d, h| CollisionSpec::boy_girl(n, d, h, h).map(|s| s.exact_prob());
    let table = match which {
        TableKind::Example1 => {
            let mut t = Table::new(&["h", "B(252,h,h)", "B(365,h,h)"]);
            let places = precision.unwrap_or(4);
            for h in [1, 5, 10, 15, 20, 25, 30, 35] {
                t.push(vec![
                    h.to_string(),
                    bg(252, 1, h)?.to_decimal(places),
                    bg(365, 1, h)?.to_decimal(places),
                ]);
            }
            t
        }
        TableKind::Example2 => {
            let mut t = Table::new(&["h", "B_30(252,h,h)", "B_30(365,h,h)"]);
            for h in 1..=4 {
                let places = precision.unwrap_or(if h == 4 { 5 } else { 3 });
                t.push(vec![
                    h.to_string(),
                    bg(252, 30, h)?.to_decimal(places),
                    bg(365, 30, h)?.to_decimal(places),
                ]);
            }
            t
        }
        TableKind::Chernoff => {
            let mut t = Table::new(&["t", "exp(-1/(2t))"]);
            let places = precision.unwrap_or(3);
            for step in 1..=5 {
                let trades = 10 * step;
                t.push(vec![
                    trades.to_string(),
                    format_f64(chernoff_imbalance_bound(trades, 1.0), places),
                ]);
            }
            t
        }
    };
    Ok(table)
}

fn search(args: &SearchArgs, precision: &dyn Fn(u32) -> u32) -> Result<Table> {
    let span = || {
        args.d.ok_or_else(|| {
            CliError::Usage(format!("-d is required for the {:?} family", args.family))
        })
    };
    let (family, places) = match args.family {
        FamilyKind::Birthday => (Family::Birthday { days: args.n }, precision(4)),
        FamilyKind::Span => (
            Family::Span {
                days: args.n,
                span: span()?,
            },
            precision(4),
        ),
        FamilyKind::BoygirlBalanced => (Family::BoyGirlBalanced { days: args.n }, precision(4)),
        FamilyKind::BoygirlSpanBalanced => (
            Family::BoyGirlSpanBalanced {
                days: args.n,
                span: span()?,
            },
            precision(3),
        ),
    };
    let target = parse_exact(&args.target)
        .and_then(|r| Prob::from_rational(r).ok())
        .filter(|p| !p.is_zero())
        .ok_or_else(|| {
            CliError::Usage(format!("target must lie in (0, 1], got `{}`", args.target))
        })?;
    let found = min_k_at_least(&target, family)?;
    let mut table = Table::new(&["family", "target", "k_star", "prob_below", "prob_at_k_star"]);
    table.push(vec![
        family.to_string(),
        format_exact(target.as_rational()),
        found.k_star.to_string(),
        found.prob_below.to_decimal(places),
        found.prob_at_k_star.to_decimal(places),
    ]);
    Ok(table)
}

fn collision_spec(p: &PopulationArgs) -> Result<CollisionSpec> {
    let population = match (p.k, p.b, p.g) {
        (Some(k), None, None) => Population::Unlabeled(k),
        (None, Some(boys), Some(girls)) => Population::BoyGirl { boys, girls },
        _ => {
            return Err(CliError::Usage(
                "give either --k or both --b and --g".into(),
            ))
        }
    };
    Ok(CollisionSpec::new(p.n, p.d, population)?)
}

/// The closed form counts block separation, which differs from the
/// simulated cross-label event once a label has two members and d > 1.
fn closed_form_matches_simulation(spec: &CollisionSpec) -> bool {
    match spec.population() {
        Population::Unlabeled(_) => true,
        Population::BoyGirl { boys, girls } => spec.span() == 1 || (boys <= 1 && girls <= 1),
    }
}

fn simulate(args: &SimulateArgs, places: u32) -> Result<Table> {
    let spec = collision_spec(&args.population)?;
    let result = simulate_collision(&SimConfig {
        spec,
        trials: args.trials,
        seed: args.seed,
    })?;
    let exact = if closed_form_matches_simulation(&spec) {
        Some(spec.exact_prob())
    } else {
        exhaustive_collision_prob_with(&spec, CollisionRule::CrossLabel, args.guard).ok()
    };
    let (exact_text, within) = match &exact {
        Some(p) => (
            p.to_decimal(places),
            if result.covers(p.to_f64(), 3.0) {
                "yes"
            } else {
                "no"
            }
            .to_string(),
        ),
        None => ("-".to_string(), "-".to_string()),
    };
    let mut table = Table::new(&[
        "spec",
        "trials",
        "seed",
        "hits",
        "estimate",
        "ci99_halfwidth",
        "exact",
        "within_3ci",
    ]);
    table.push(vec![
        spec.to_string(),
        result.trials.to_string(),
        args.seed.to_string(),
        result.hits.to_string(),
        format_f64(result.estimate, places),
        format_f64(result.ci99_halfwidth, places + 2),
        exact_text,
        within,
    ]);
    Ok(table)
}

fn exhaustive(args: &ExhaustiveArgs, places: u32) -> Result<Table> {
    let spec = collision_spec(&args.population)?;
    let (rule, rule_name) = match args.rule {
        RuleKind::CrossLabel => (CollisionRule::CrossLabel, "cross-label"),
        RuleKind::BlockSeparation => (CollisionRule::BlockSeparation, "block-separation"),
    };
    let p = exhaustive_collision_prob_with(&spec, rule, args.guard)?;
    let closed = spec.exact_prob();
    let mut table = Table::new(&["spec", "rule", "exact", "decimal", "closed_form", "agrees"]);
    table.push(vec![
        spec.to_string(),
        rule_name.to_string(),
        p.to_string(),
        p.to_decimal(places),
        closed.to_string(),
        if p == closed { "yes" } else { "no" }.to_string(),
    ]);
    Ok(table)
}

fn multiset(text: &str) -> Result<GainMultiset> {
    Ok(text.parse::<GainMultiset>()?)
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn lo_cmd(cmd: &LoCmd, places: u32) -> Result<Table> {
    let table = match cmd {
        LoCmd::Dist { values, expand } => {
            let v = multiset(values)?;
            let dist = lo::signed_sum_distribution(&v)?;
            if *expand {
                if v.len() > lo::ENUMERATION_GUARD {
                    return Err(LoError::EnumerationGuard(v.len()).into());
                }
                let mut t = Table::new(&["i", "s_v"]);
                for (i, x) in dist.sorted_sums().into_iter().enumerate() {
                    t.push(vec![(i + 1).to_string(), x.to_string()]);
                }
                t
            } else {
                let mut t = Table::new(&["x", "count", "prob", "decimal"]);
                for (&x, &c) in dist.counts().iter().rev() {
                    let p = dist.prob_of(x);
                    t.push(vec![
                        x.to_string(),
                        c.to_string(),
                        p.to_string(),
                        p.to_decimal(places),
                    ]);
                }
                t
            }
        }
        LoCmd::Sigma { values } => {
            let v = multiset(values)?;
            let ms = lo::mean_and_sigma(&v);
            let mut t = Table::new(&["values", "mean", "sigma_sq", "sigma"]);
            t.push(vec![
                v.to_string(),
                format_exact(&ms.mean),
                ms.sigma_sq.to_string(),
                format_f64(ms.sigma, places),
            ]);
            t
        }
        LoCmd::Maxprob { values } => {
            let v = multiset(values)?;
            let dist = lo::signed_sum_distribution(&v)?;
            let (x, p) = lo::max_point_probability(&dist);
            let mut t = Table::new(&["values", "x", "count", "prob", "decimal"]);
            t.push(vec![
                v.to_string(),
                x.to_string(),
                dist.count(x).to_string(),
                p.to_string(),
                p.to_decimal(places),
            ]);
            t
        }
        LoCmd::Distinct { values } => {
            let v = multiset(values)?;
            let mut t = Table::new(&["values", "equal_distinct_sums"]);
            t.push(vec![
                v.to_string(),
                yes_no(lo::has_equal_distinct_sums(&v)?),
            ]);
            t
        }
        LoCmd::VerifyMinsum { n } => {
            let report = lo::verify_minimal_sum_theorem(*n)?;
            if !report.holds() {
                return Err(CliError::Data(format!(
                    "minimal-sum check fails for n = {n}: counterexamples {:?}",
                    report.counterexamples
                )));
            }
            let mut t = Table::new(&[
                "n",
                "sum_cap",
                "sets_checked",
                "counterexamples",
                "powers_of_two_distinct",
            ]);
            t.push(vec![
                report.n.to_string(),
                report.sum_cap.to_string(),
                report.sets_checked.to_string(),
                report.counterexamples.len().to_string(),
                yes_no(report.powers_of_two_distinct),
            ]);
            t
        }
        LoCmd::ExpectedGain {
            n,
            g,
            b,
            calendar,
            d,
        } => {
            if *n == 0 || *g == 0 || *b == 0 || *calendar == 0 || *d == 0 {
                return Err(CliError::Usage("all parameters must be at least 1".into()));
            }
            let exact = lo::expected_gain_single_wash_exact(*n, *g, *b, *calendar, *d);
            let mut t = Table::new(&["n", "g", "b", "calendar", "d", "exact", "decimal"]);
            t.push(vec![
                n.to_string(),
                g.to_string(),
                b.to_string(),
                calendar.to_string(),
                d.to_string(),
                format_exact(&exact),
                format_decimal(&exact, places),
            ]);
            t
        }
        LoCmd::AdjustedMean { n } => {
            let v = GainMultiset::all_ones(*n as usize)?;
            let mean = lo::wash_adjusted_mean(&lo::signed_sum_distribution(&v)?)?;
            let factor = lo::wash_adjustment_factor(*n);
            let mut t = Table::new(&["n", "adjusted_mean", "decimal", "factor"]);
            t.push(vec![
                n.to_string(),
                format_exact(&mean),
                format_decimal(&mean, places),
                format_exact(&factor),
            ]);
            t
        }
    };
    Ok(table)
}

fn wash(path: &std::path::Path, out: &std::path::Path) -> Result<Table> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let trades = ledger::parse_ledger(file)?;
    let (adjustments, _, report) = ledger::analyze(&trades)?;

    let io = |e: std::io::Error| CliError::Data(format!("cannot write to {}: {e}", out.display()));
    fs::create_dir_all(out).map_err(io)?;
    let csv_path = out.join("adjustments.csv");
    let json_path = out.join("report.json");
    ledger::write_adjustments_csv(
        BufWriter::new(File::create(&csv_path).map_err(io)?),
        &adjustments,
    )?;
    let json = report
        .to_json()
        .map_err(|e| CliError::Data(format!("cannot encode report: {e}")))?;
    fs::write(&json_path, json + "\n").map_err(io)?;

    let total = &report.total;
    let mut t = Table::new(&["item", "value"]);
    for (item, value) in [
        ("trades", trades.len().to_string()),
        ("adjustments", adjustments.len().to_string()),
        (
            "partial_replacement_sales",
            report.partial_replacement_sales.len().to_string(),
        ),
        ("realized", format_exact(&total.realized)),
        ("allowed_loss", format_exact(&total.allowed_loss)),
        ("disallowed_loss", format_exact(&total.disallowed_loss)),
        ("taxable_rounded", total.taxable_rounded.to_string()),
        ("adjustments_csv", csv_path.display().to_string()),
        ("report_json", json_path.display().to_string()),
    ] {
        t.push(vec![item.to_string(), value]);
    }
    Ok(t)
}
