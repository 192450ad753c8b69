//! Trade ledger ingestion, FIFO lot accounting and wash-sale adjustment.
//!
//! A closing trade that realizes a loss (a sell below a long lot's basis,
//! or a cover above a short lot's basis) is matched against acquisitions of
//! the same asset on the same side (buys for long losses, shorts for short
//! losses) dated within 30 calendar days either way. Matching is share by
//! share in chronological order of the replacement, and each replacement
//! share absorbs at most one disallowed loss share. The disallowed loss per
//! share moves into the replacement share's basis and the replacement
//! inherits the sold lot's holding-period start.
//!
//! Acquisitions whose lots are closed by the loss sale itself never count
//! as replacements, and an earlier acquisition only counts while some of
//! its shares are still held.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::exactnum::{format_exact, parse_exact};

/// Calendar days on either side of a loss sale in which a purchase replaces it.
pub const WASH_WINDOW_DAYS: i64 = 30;

/// Holding periods longer than this many days are long-term.
pub const LONG_TERM_DAYS: i64 = 365;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("bad header: expected `date,asset,side,quantity,price[,origin]`, got `{0}`")]
    Header(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trade {trade} sells {requested} {asset} but only {open} are open")]
    Oversell {
        trade: String,
        asset: String,
        requested: u64,
        open: u64,
    },
    #[error("ledger integrity: {0}")]
    Integrity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
    Short,
    Cover,
}

impl Side {
    fn opens(self) -> bool {
        matches!(self, Side::Buy | Side::Short)
    }

    fn direction(self) -> Direction {
        match self {
            Side::Buy | Side::Sell => Direction::Long,
            Side::Short | Side::Cover => Direction::Short,
        }
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "buy" => Ok(Side::Buy),
            "sell" => Ok(Side::Sell),
            "short" => Ok(Side::Short),
            "cover" => Ok(Side::Cover),
            other => Err(format!("unknown side `{other}`")),
        }
    }
}

/// How a trade came about. Annotation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    #[default]
    Market,
    PutExercise,
    CallExercise,
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "" | "market" => Ok(Origin::Market),
            "put-exercise" => Ok(Origin::PutExercise),
            "call-exercise" => Ok(Origin::CallExercise),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Long,
    Short,
}

fn exact<S: Serializer>(value: &BigRational, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.collect_str(&format_exact(value))
}

fn integer<S: Serializer>(value: &BigInt, serializer: S) -> Result<S::Ok, S::Error> {
    match value.to_i64() {
        Some(v) => serializer.serialize_i64(v),
        None => serializer.collect_str(value),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trade {
    pub id: String,
    pub date: NaiveDate,
    pub asset: String,
    pub side: Side,
    pub quantity: u64,
    #[serde(serialize_with = "exact")]
    pub price: BigRational,
    pub origin: Origin,
}

impl Trade {
    pub fn new(
        id: impl Into<String>,
        date: NaiveDate,
        asset: impl Into<String>,
        side: Side,
        quantity: u64,
        price: BigRational,
    ) -> Trade {
        Trade {
            id: id.into(),
            date,
            asset: asset.into(),
            side,
            quantity,
            price,
            origin: Origin::Market,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Trade {
        self.origin = origin;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lot {
    pub asset: String,
    pub open_date: NaiveDate,
    pub quantity: u64,
    /// Cost per share for long lots, proceeds per share for short lots.
    #[serde(serialize_with = "exact")]
    pub basis_per_share: BigRational,
    pub direction: Direction,
    pub holding_start: NaiveDate,
    /// Trade that opened the lot.
    pub source_trade: String,
    /// Disallowed loss per share folded into the basis; zero if none.
    #[serde(serialize_with = "exact")]
    pub deferred_loss_per_share: BigRational,
}

impl Lot {
    pub fn is_adjusted(&self) -> bool {
        !self.deferred_loss_per_share.is_zero()
    }

    pub fn is_long_term(&self, as_of: NaiveDate) -> bool {
        (as_of - self.holding_start).num_days() > LONG_TERM_DAYS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WashSaleAdjustment {
    pub loss_sale_id: String,
    pub replacement_id: String,
    #[serde(serialize_with = "exact")]
    pub disallowed_loss: BigRational,
    pub matched_quantity: u64,
    #[serde(serialize_with = "exact")]
    pub new_basis_per_share: BigRational,
    pub holding_period_start: NaiveDate,
}

impl WashSaleAdjustment {
    fn loss_per_share(&self) -> BigRational {
        &self.disallowed_loss / BigRational::from_integer(BigInt::from(self.matched_quantity))
    }
}

/// One closed portion of a lot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Realization {
    pub trade_id: String,
    pub asset: String,
    pub direction: Direction,
    pub source_trade: String,
    pub quantity: u64,
    pub holding_start: NaiveDate,
    pub close_date: NaiveDate,
    pub long_term: bool,
    /// Gain before any wash-sale disallowance; negative for a loss.
    #[serde(serialize_with = "exact")]
    pub gain: BigRational,
    #[serde(serialize_with = "exact")]
    pub disallowed: BigRational,
    /// `gain + disallowed`: the amount that counts for tax.
    #[serde(serialize_with = "exact")]
    pub recognized: BigRational,
}

/// A closing trade that took only part of a lot carrying a deferred loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartialReplacementSale {
    pub trade_id: String,
    pub replacement_id: String,
    pub closed: u64,
    pub remaining: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssetLine {
    pub asset: String,
    /// Net recognized gain or loss.
    #[serde(serialize_with = "exact")]
    pub realized: BigRational,
    #[serde(serialize_with = "exact")]
    pub allowed_loss: BigRational,
    #[serde(serialize_with = "exact")]
    pub disallowed_loss: BigRational,
    /// Sum of the whole-currency rounding of each recognized amount.
    #[serde(serialize_with = "integer")]
    pub taxable_rounded: BigInt,
    #[serde(serialize_with = "exact")]
    pub gross_gain: BigRational,
    #[serde(serialize_with = "exact")]
    pub gross_loss: BigRational,
}

impl AssetLine {
    fn empty(asset: &str) -> AssetLine {
        AssetLine {
            asset: asset.to_string(),
            realized: BigRational::zero(),
            allowed_loss: BigRational::zero(),
            disallowed_loss: BigRational::zero(),
            taxable_rounded: BigInt::zero(),
            gross_gain: BigRational::zero(),
            gross_loss: BigRational::zero(),
        }
    }

    fn add_realization(&mut self, r: &Realization) {
        self.realized += &r.recognized;
        self.taxable_rounded += round_tax_amount(&r.recognized);
        self.disallowed_loss += &r.disallowed;
        if r.gain.is_negative() {
            self.gross_loss -= &r.gain;
            self.allowed_loss += -&r.gain - &r.disallowed;
        } else {
            self.gross_gain += &r.gain;
        }
    }

    fn add_line(&mut self, other: &AssetLine) {
        self.realized += &other.realized;
        self.allowed_loss += &other.allowed_loss;
        self.disallowed_loss += &other.disallowed_loss;
        self.taxable_rounded += &other.taxable_rounded;
        self.gross_gain += &other.gross_gain;
        self.gross_loss += &other.gross_loss;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GainReport {
    pub assets: Vec<AssetLine>,
    pub total: AssetLine,
    pub realizations: Vec<Realization>,
    pub partial_replacement_sales: Vec<PartialReplacementSale>,
}

impl GainReport {
    fn build(
        realizations: Vec<Realization>,
        partial_replacement_sales: Vec<PartialReplacementSale>,
    ) -> GainReport {
        let mut by_asset: BTreeMap<String, AssetLine> = BTreeMap::new();
        for r in &realizations {
            by_asset
                .entry(r.asset.clone())
                .or_insert_with(|| AssetLine::empty(&r.asset))
                .add_realization(r);
        }
        let mut total = AssetLine::empty("TOTAL");
        for line in by_asset.values() {
            total.add_line(line);
        }
        GainReport {
            assets: by_asset.into_values().collect(),
            total,
            realizations,
            partial_replacement_sales,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Whole-currency rounding: a fractional part of one half or less is
/// dropped, anything above one half rounds up in magnitude. Losses round
/// the same way as gains.
pub fn round_tax_amount(x: &BigRational) -> BigInt {
    let magnitude = x.abs();
    let (whole, rem) = magnitude.numer().div_rem(magnitude.denom());
    let rounded = if rem * 2 > *magnitude.denom() {
        whole + 1
    } else {
        whole
    };
    if x.is_negative() {
        -rounded
    } else {
        rounded
    }
}

fn parse_price(text: &str) -> Result<BigRational, String> {
    if text.contains('/') {
        return Err(format!("bad price `{text}`"));
    }
    let price = parse_exact(text).ok_or_else(|| format!("bad price `{text}`"))?;
    if !price.is_positive() {
        return Err(format!("price must be positive, got {text}"));
    }
    Ok(price)
}

const HEADER: [&str; 5] = ["date", "asset", "side", "quantity", "price"];

/// Reads a `date,asset,side,quantity,price[,origin]` CSV ledger. Each trade
/// is identified as `L<line>`. The result is sorted by date, keeping file
/// order within a date.
pub fn parse_ledger<R: Read>(source: R) -> Result<Vec<Trade>, LedgerError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(str::to_ascii_lowercase)
        .collect();
    let with_origin = match headers.len() {
        5 => false,
        6 if headers[5] == "origin" => true,
        _ => return Err(LedgerError::Header(headers.join(","))),
    };
    if headers[..5] != HEADER {
        return Err(LedgerError::Header(headers.join(",")));
    }

    let mut trades = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let row = |message: String| LedgerError::Row { line, message };
        if record.iter().all(str::is_empty) {
            continue;
        }
        let expected = if with_origin { 6 } else { 5 };
        if record.len() != expected && !(with_origin && record.len() == 5) {
            return Err(row(format!(
                "expected {expected} fields, found {}",
                record.len()
            )));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| row(format!("bad date `{}`: {e}", &record[0])))?;
        let asset = record[1].to_string();
        if asset.is_empty() {
            return Err(row("empty asset".into()));
        }
        let side = record[2].parse::<Side>().map_err(row)?;
        let quantity = record[3]
            .parse::<i64>()
            .map_err(|_| row(format!("bad quantity `{}`", &record[3])))?;
        if quantity <= 0 {
            return Err(row(format!("quantity must be positive, got {quantity}")));
        }
        let price = parse_price(&record[4]).map_err(row)?;
        let origin = match record.get(5) {
            Some(text) => text.parse::<Origin>().map_err(row)?,
            None => Origin::Market,
        };
        trades.push(Trade {
            id: format!("L{line}"),
            date,
            asset,
            side,
            quantity: quantity as u64,
            price,
            origin,
        });
    }
    trades.sort_by_key(|t| t.date);
    Ok(trades)
}

/// Writes adjustments as CSV, one column per field in declaration order.
pub fn write_adjustments_csv<W: Write>(
    sink: W,
    adjustments: &[WashSaleAdjustment],
) -> Result<(), LedgerError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record([
        "loss_sale_id",
        "replacement_id",
        "disallowed_loss",
        "matched_quantity",
        "new_basis_per_share",
        "holding_period_start",
    ])?;
    for a in adjustments {
        writer.write_record([
            a.loss_sale_id.clone(),
            a.replacement_id.clone(),
            format_exact(&a.disallowed_loss),
            a.matched_quantity.to_string(),
            format_exact(&a.new_basis_per_share),
            a.holding_period_start.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn qty(q: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(q))
}

#[derive(Debug, Clone)]
struct OpenLot {
    lot: Lot,
    trade_idx: usize,
}

#[derive(Debug, Clone)]
struct PendingAdjustment {
    quantity: u64,
    loss_per_share: BigRational,
    holding_start: NaiveDate,
}

/// How loss shares find their replacements.
enum Matching<'a> {
    Detect,
    Replay(HashMap<&'a str, VecDeque<&'a WashSaleAdjustment>>),
}

struct Engine<'a> {
    trades: Vec<&'a Trade>,
    index_of: HashMap<&'a str, usize>,
    books: HashMap<(&'a str, Direction), VecDeque<OpenLot>>,
    pending: HashMap<usize, Vec<PendingAdjustment>>,
    /// Replacement shares not yet promised to a loss, for trades not yet opened.
    future_capacity: Vec<u64>,
    matching: Matching<'a>,
    adjustments: Vec<WashSaleAdjustment>,
    realizations: Vec<Realization>,
    partials: Vec<PartialReplacementSale>,
}

impl<'a> Engine<'a> {
    fn new(trades: &'a [Trade], matching: Matching<'a>) -> Result<Self, LedgerError> {
        let mut sorted: Vec<&Trade> = trades.iter().collect();
        sorted.sort_by_key(|t| t.date);
        let mut index_of = HashMap::new();
        for (i, t) in sorted.iter().enumerate() {
            if t.quantity == 0 || !t.price.is_positive() {
                return Err(LedgerError::Integrity(format!(
                    "trade {} needs positive quantity and price",
                    t.id
                )));
            }
            if index_of.insert(t.id.as_str(), i).is_some() {
                return Err(LedgerError::Integrity(format!(
                    "duplicate trade id {}",
                    t.id
                )));
            }
        }
        let future_capacity = sorted.iter().map(|t| t.quantity).collect();
        Ok(Engine {
            trades: sorted,
            index_of,
            books: HashMap::new(),
            pending: HashMap::new(),
            future_capacity,
            matching,
            adjustments: Vec::new(),
            realizations: Vec::new(),
            partials: Vec::new(),
        })
    }

    fn run(mut self) -> Result<Self, LedgerError> {
        for i in 0..self.trades.len() {
            if self.trades[i].side.opens() {
                self.open(i);
            } else {
                self.close(i)?;
            }
        }
        if let Matching::Replay(remaining) = &self.matching {
            if let Some((sale, _)) = remaining.iter().find(|(_, q)| !q.is_empty()) {
                return Err(LedgerError::Integrity(format!(
                    "adjustment for {sale} does not match any realized loss"
                )));
            }
        }
        Ok(self)
    }

    fn new_lot(
        &self,
        i: usize,
        quantity: u64,
        deferred: BigRational,
        holding: NaiveDate,
    ) -> OpenLot {
        let t = self.trades[i];
        let direction = t.side.direction();
        let basis = match direction {
            Direction::Long => &t.price + &deferred,
            Direction::Short => &t.price - &deferred,
        };
        OpenLot {
            lot: Lot {
                asset: t.asset.clone(),
                open_date: t.date,
                quantity,
                basis_per_share: basis,
                direction,
                holding_start: holding,
                source_trade: t.id.clone(),
                deferred_loss_per_share: deferred,
            },
            trade_idx: i,
        }
    }

    fn open(&mut self, i: usize) {
        let t = self.trades[i];
        let mut lots = Vec::new();
        let mut remaining = t.quantity;
        for p in self.pending.remove(&i).unwrap_or_default() {
            lots.push(self.new_lot(i, p.quantity, p.loss_per_share, p.holding_start));
            remaining -= p.quantity;
        }
        if remaining > 0 {
            lots.push(self.new_lot(i, remaining, BigRational::zero(), t.date));
        }
        self.books
            .entry((t.asset.as_str(), t.side.direction()))
            .or_default()
            .extend(lots);
    }

    fn close(&mut self, i: usize) -> Result<(), LedgerError> {
        let t = self.trades[i];
        let key = (t.asset.as_str(), t.side.direction());
        let book = self.books.entry(key).or_default();
        let open: u64 = book.iter().map(|l| l.lot.quantity).sum();
        if open < t.quantity {
            return Err(LedgerError::Oversell {
                trade: t.id.clone(),
                asset: t.asset.clone(),
                requested: t.quantity,
                open,
            });
        }

        let mut portions = Vec::new();
        let mut left = t.quantity;
        while left > 0 {
            let front = book.front_mut().expect("open quantity checked");
            let take = left.min(front.lot.quantity);
            let mut portion = front.clone();
            portion.lot.quantity = take;
            front.lot.quantity -= take;
            if front.lot.quantity == 0 {
                book.pop_front();
            } else if portion.lot.is_adjusted() {
                self.partials.push(PartialReplacementSale {
                    trade_id: t.id.clone(),
                    replacement_id: portion.lot.source_trade.clone(),
                    closed: take,
                    remaining: front.lot.quantity,
                });
            }
            left -= take;
            portions.push(portion);
        }

        let excluded: HashSet<usize> = portions.iter().map(|p| p.trade_idx).collect();
        for portion in portions {
            let lot = &portion.lot;
            let per_share = match lot.direction {
                Direction::Long => &t.price - &lot.basis_per_share,
                Direction::Short => &lot.basis_per_share - &t.price,
            };
            let gain = &per_share * qty(lot.quantity);
            let mut disallowed = BigRational::zero();
            if per_share.is_negative() {
                let loss = -per_share;
                let matched = self.match_loss(i, &portion, &loss, &excluded)?;
                disallowed = &loss * qty(matched);
            }
            self.realizations.push(Realization {
                trade_id: t.id.clone(),
                asset: t.asset.clone(),
                direction: lot.direction,
                source_trade: lot.source_trade.clone(),
                quantity: lot.quantity,
                holding_start: lot.holding_start,
                close_date: t.date,
                long_term: (t.date - lot.holding_start).num_days() > LONG_TERM_DAYS,
                recognized: &gain + &disallowed,
                gain,
                disallowed,
            });
        }
        Ok(())
    }

    fn is_candidate(
        &self,
        sale: usize,
        portion: &OpenLot,
        j: usize,
        excluded: &HashSet<usize>,
    ) -> bool {
        let (s, r) = (self.trades[sale], self.trades[j]);
        let side = match portion.lot.direction {
            Direction::Long => Side::Buy,
            Direction::Short => Side::Short,
        };
        j != sale
            && !excluded.contains(&j)
            && r.side == side
            && r.asset == s.asset
            && (r.date - s.date).num_days().abs() <= WASH_WINDOW_DAYS
            && r.date >= portion.lot.open_date
    }

    /// Open shares of trade `j` that have not absorbed a loss yet.
    fn unabsorbed_open(&self, key: (&str, Direction), j: usize) -> u64 {
        self.books.get(&key).map_or(0, |book| {
            book.iter()
                .filter(|l| l.trade_idx == j && !l.lot.is_adjusted())
                .map(|l| l.lot.quantity)
                .sum()
        })
    }

    fn available(&self, sale: usize, direction: Direction, j: usize) -> u64 {
        if j < sale {
            self.unabsorbed_open((self.trades[sale].asset.as_str(), direction), j)
        } else {
            self.future_capacity[j]
        }
    }

    /// Matches up to `portion.quantity` loss shares and returns how many
    /// were disallowed.
    fn match_loss(
        &mut self,
        sale: usize,
        portion: &OpenLot,
        loss: &BigRational,
        excluded: &HashSet<usize>,
    ) -> Result<u64, LedgerError> {
        let direction = portion.lot.direction;
        let mut plan: Vec<(usize, u64)> = Vec::new();
        let mut left = portion.lot.quantity;
        match &mut self.matching {
            Matching::Detect => {
                let candidates: Vec<usize> = (0..self.trades.len())
                    .filter(|&j| self.is_candidate(sale, portion, j, excluded))
                    .collect();
                for j in candidates {
                    if left == 0 {
                        break;
                    }
                    let take = left.min(self.available(sale, direction, j));
                    if take > 0 {
                        plan.push((j, take));
                        left -= take;
                    }
                }
            }
            Matching::Replay(by_sale) => {
                let sale_id = self.trades[sale].id.as_str();
                let queue = by_sale.get_mut(sale_id);
                let mut given = Vec::new();
                if let Some(queue) = queue {
                    while left > 0 {
                        let Some(adj) = queue.front() else { break };
                        if adj.matched_quantity > left || &adj.loss_per_share() != loss {
                            break;
                        }
                        left -= adj.matched_quantity;
                        given.push(*adj);
                        queue.pop_front();
                    }
                }
                for adj in given {
                    let j = *self
                        .index_of
                        .get(adj.replacement_id.as_str())
                        .ok_or_else(|| {
                            LedgerError::Integrity(format!(
                                "adjustment names unknown replacement {}",
                                adj.replacement_id
                            ))
                        })?;
                    if !self.is_candidate(sale, portion, j, excluded)
                        || self.available(sale, direction, j) < adj.matched_quantity
                    {
                        return Err(LedgerError::Integrity(format!(
                            "{} cannot replace {} shares sold by {}",
                            adj.replacement_id, adj.matched_quantity, adj.loss_sale_id
                        )));
                    }
                    plan.push((j, adj.matched_quantity));
                }
            }
        }

        let mut matched = 0;
        for (j, take) in plan {
            self.absorb(sale, portion, loss, j, take);
            matched += take;
        }
        Ok(matched)
    }

    fn absorb(&mut self, sale: usize, portion: &OpenLot, loss: &BigRational, j: usize, take: u64) {
        let (s, r) = (self.trades[sale], self.trades[j]);
        let holding = portion.lot.holding_start;
        let new_basis = match portion.lot.direction {
            Direction::Long => &r.price + loss,
            Direction::Short => &r.price - loss,
        };
        self.adjustments.push(WashSaleAdjustment {
            loss_sale_id: s.id.clone(),
            replacement_id: r.id.clone(),
            disallowed_loss: loss * qty(take),
            matched_quantity: take,
            new_basis_per_share: new_basis,
            holding_period_start: holding,
        });

        if j > sale {
            self.future_capacity[j] -= take;
            self.pending.entry(j).or_default().push(PendingAdjustment {
                quantity: take,
                loss_per_share: loss.clone(),
                holding_start: holding,
            });
            return;
        }

        // split already-open shares of trade j
        let adjusted_template = self.new_lot(j, 0, loss.clone(), holding);
        let book = self
            .books
            .get_mut(&(s.asset.as_str(), portion.lot.direction))
            .expect("candidate lots are open");
        let mut need = take;
        let mut pos = 0;
        while need > 0 && pos < book.len() {
            let lot = &mut book[pos];
            if lot.trade_idx != j || lot.lot.is_adjusted() {
                pos += 1;
                continue;
            }
            let part = need.min(lot.lot.quantity);
            lot.lot.quantity -= part;
            let mut adjusted = adjusted_template.clone();
            adjusted.lot.quantity = part;
            if lot.lot.quantity == 0 {
                book[pos] = adjusted;
            } else {
                book.insert(pos, adjusted);
                pos += 1;
            }
            need -= part;
            pos += 1;
        }
    }

    fn open_lots(&self) -> Vec<Lot> {
        let mut lots: Vec<&OpenLot> = self.books.values().flatten().collect();
        lots.sort_by_key(|l| (l.lot.asset.clone(), l.lot.open_date, l.trade_idx));
        lots.into_iter().map(|l| l.lot.clone()).collect()
    }
}

/// Finds every wash sale in the ledger.
pub fn detect_wash_sales(trades: &[Trade]) -> Result<Vec<WashSaleAdjustment>, LedgerError> {
    Ok(Engine::new(trades, Matching::Detect)?.run()?.adjustments)
}

/// Replays the ledger with the given adjustments, returning the open lots
/// and the gain report. Adjustments that do not line up with a realized
/// loss and an eligible replacement are rejected.
pub fn apply_adjustments(
    trades: &[Trade],
    adjustments: &[WashSaleAdjustment],
) -> Result<(Vec<Lot>, GainReport), LedgerError> {
    let mut by_sale: HashMap<&str, VecDeque<&WashSaleAdjustment>> = HashMap::new();
    for a in adjustments {
        if a.matched_quantity == 0 || !a.disallowed_loss.is_positive() {
            return Err(LedgerError::Integrity(format!(
                "adjustment {} -> {} must disallow a positive loss on at least one share",
                a.loss_sale_id, a.replacement_id
            )));
        }
        by_sale
            .entry(a.loss_sale_id.as_str())
            .or_default()
            .push_back(a);
    }
    let engine = Engine::new(trades, Matching::Replay(by_sale))?.run()?;
    let lots = engine.open_lots();
    let report = GainReport::build(engine.realizations, engine.partials);
    Ok((lots, report))
}

/// Detects and applies in one pass.
pub fn analyze(
    trades: &[Trade],
) -> Result<(Vec<WashSaleAdjustment>, Vec<Lot>, GainReport), LedgerError> {
    let adjustments = detect_wash_sales(trades)?;
    let (lots, report) = apply_adjustments(trades, &adjustments)?;
    Ok((adjustments, lots, report))
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
            Side::Short => "short",
            Side::Cover => "cover",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::{RngCore, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn day(offset: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, 2).unwrap() + chrono::Duration::days(offset)
    }

    fn r(n: i64) -> BigRational {
        BigRational::from_integer(BigInt::from(n))
    }

    fn t(id: &str, d: i64, side: Side, q: u64, p: i64) -> Trade {
        Trade::new(id, day(d), "XYZ", side, q, r(p))
    }

    fn chain(rebuy_gap: i64) -> Vec<Trade> {
        vec![
            t("a", 0, Side::Buy, 100, 100),
            t("b", 20, Side::Sell, 100, 90),
            t("c", 20 + rebuy_gap, Side::Buy, 100, 95),
            t("d", 120, Side::Sell, 100, 120),
        ]
    }

    #[test]
    fn parses_single_row_and_empty_ledger() {
        let trades = parse_ledger(
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,100,50.00\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(trades.len(), 1);
        assert_eq!(trades[0].id, "L2");
        assert_eq!(trades[0].price, r(50));
        assert_eq!(trades[0].side, Side::Buy);
        assert!(parse_ledger("date,asset,side,quantity,price\n".as_bytes())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let cases = [
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,100,1\n2024-01-03,XYZ,buy,0,1\n",
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,100,1\n2024-01-03,XYZ,buy,-5,1\n",
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,100,1\n2024-01-03,XYZ,hold,5,1\n",
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,100,1\n2024-01-03,XYZ,buy,5,0\n",
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,100,1\n2024-02-30,XYZ,buy,5,1\n",
        ];
        for text in cases {
            match parse_ledger(text.as_bytes()) {
                Err(LedgerError::Row { line, .. }) => assert_eq!(line, 3, "{text}"),
                other => panic!("expected row error for {text:?}, got {other:?}"),
            }
        }
        assert!(matches!(
            parse_ledger("when,asset,side,quantity,price\n".as_bytes()),
            Err(LedgerError::Header(_))
        ));
    }

    #[test]
    fn parse_keeps_file_order_within_a_date() {
        let text = "date,asset,side,quantity,price,origin\n\
                    2024-03-01,XYZ,sell,10,5,call-exercise\n\
                    2024-01-01,XYZ,buy,10,4,\n\
                    2024-03-01,XYZ,buy,10,6,put-exercise\n";
        let trades = parse_ledger(text.as_bytes()).unwrap();
        let ids: Vec<_> = trades.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["L3", "L2", "L4"]);
        assert_eq!(trades[0].origin, Origin::Market);
        assert_eq!(trades[2].origin, Origin::PutExercise);
        assert_eq!(
            trades[1].price,
            BigRational::new(BigInt::from(5), BigInt::from(1))
        );
    }

    #[test]
    fn fractional_prices_are_exact() {
        let trades = parse_ledger(
            "date,asset,side,quantity,price\n2024-01-02,XYZ,buy,3,10.105\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(
            trades[0].price,
            BigRational::new(BigInt::from(2021), BigInt::from(200))
        );
    }

    #[test]
    fn loss_rebuy_chain() {
        let trades = chain(10);
        let (adjs, lots, report) = analyze(&trades).unwrap();
        assert_eq!(adjs.len(), 1);
        let a = &adjs[0];
        assert_eq!(
            (a.loss_sale_id.as_str(), a.replacement_id.as_str()),
            ("b", "c")
        );
        assert_eq!(a.disallowed_loss, r(1000));
        assert_eq!(a.matched_quantity, 100);
        assert_eq!(a.new_basis_per_share, r(105));
        assert_eq!(a.holding_period_start, day(0));
        assert!(lots.is_empty());

        let last = report
            .realizations
            .iter()
            .find(|x| x.trade_id == "d")
            .unwrap();
        assert_eq!(last.recognized, r(1500));
        assert_eq!(last.holding_start, day(0));
        assert_eq!(report.total.disallowed_loss, r(1000));
        assert_eq!(report.total.allowed_loss, r(0));
        assert_eq!(report.total.realized, r(1500));
        assert_eq!(report.total.taxable_rounded, BigInt::from(1500));

        // lifetime gain equals (p4 - p1) s; the round trip shifts (p3 - p2) s
        assert_eq!(r(2000) - &report.total.realized, r(500));
        assert_eq!(r(2000), (r(120) - r(100)) * r(100));
    }

    #[test]
    fn rebuy_after_thirty_one_days_is_allowed() {
        let (adjs, _, report) = analyze(&chain(31)).unwrap();
        assert!(adjs.is_empty());
        assert_eq!(report.total.allowed_loss, r(1000));
        assert!(analyze(&chain(30)).unwrap().0.len() == 1);
    }

    #[test]
    fn replacement_before_the_sale_counts() {
        let trades = vec![
            t("a", 0, Side::Buy, 100, 100),
            t("c", 10, Side::Buy, 100, 95),
            t("b", 20, Side::Sell, 100, 90),
        ];
        let (adjs, lots, _) = analyze(&trades).unwrap();
        assert_eq!(adjs.len(), 1);
        assert_eq!(adjs[0].replacement_id, "c");
        assert_eq!(lots.len(), 1);
        assert_eq!(lots[0].basis_per_share, r(105));
        assert_eq!(lots[0].holding_start, day(0));
    }

    #[test]
    fn opening_lot_never_replaces_itself() {
        let trades = vec![
            t("a", 0, Side::Buy, 100, 100),
            t("b", 5, Side::Sell, 100, 90),
        ];
        assert!(detect_wash_sales(&trades).unwrap().is_empty());
    }

    #[test]
    fn short_chain_mirrors_long() {
        let trades = vec![
            t("s", 0, Side::Short, 100, 50),
            t("c", 10, Side::Cover, 100, 55),
            t("s2", 25, Side::Short, 100, 52),
            t("c2", 60, Side::Cover, 100, 40),
        ];
        let (adjs, _, report) = analyze(&trades).unwrap();
        assert_eq!(adjs.len(), 1);
        assert_eq!(adjs[0].disallowed_loss, r(500));
        assert_eq!(adjs[0].new_basis_per_share, r(47));
        let last = report
            .realizations
            .iter()
            .find(|x| x.trade_id == "c2")
            .unwrap();
        assert_eq!(last.recognized, r(700));
        // lifetime: -500 + 1200 either way
        assert_eq!(report.total.realized, r(700));
    }

    #[test]
    fn option_chains_flag_only_the_second() {
        let text = "date,asset,side,quantity,price,origin\n\
                    2024-01-10,XYZ,buy,100,100,put-exercise\n\
                    2024-02-20,XYZ,sell,100,110,call-exercise\n\
                    2024-06-10,XYZ,buy,100,100,put-exercise\n\
                    2024-07-19,XYZ,sell,100,90,call-exercise\n\
                    2024-08-09,XYZ,buy,100,90,put-exercise\n";
        let trades = parse_ledger(text.as_bytes()).unwrap();
        let adjs = detect_wash_sales(&trades).unwrap();
        assert_eq!(adjs.len(), 1);
        assert_eq!(adjs[0].loss_sale_id, "L5");
        assert_eq!(adjs[0].replacement_id, "L6");
        assert_eq!(adjs[0].disallowed_loss, r(1000));
        assert_eq!(adjs[0].new_basis_per_share, r(100));
    }

    #[test]
    fn gains_only_ledger() {
        let trades = vec![t("a", 0, Side::Buy, 10, 5), t("b", 3, Side::Sell, 10, 7)];
        let (adjs, lots, report) = analyze(&trades).unwrap();
        assert!(adjs.is_empty() && lots.is_empty());
        assert_eq!(report.total.gross_gain, r(20));
        assert!(report.total.gross_loss.is_zero());
    }

    #[test]
    fn oversell_is_an_integrity_error() {
        let trades = vec![t("a", 0, Side::Buy, 10, 5), t("b", 3, Side::Sell, 11, 7)];
        match detect_wash_sales(&trades) {
            Err(LedgerError::Oversell { trade, open, .. }) => {
                assert_eq!((trade.as_str(), open), ("b", 10))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_match_leaves_loss_allowed() {
        let trades = vec![
            t("a", 0, Side::Buy, 100, 100),
            t("b", 20, Side::Sell, 100, 90),
            t("c", 25, Side::Buy, 30, 95),
            t("e", 28, Side::Buy, 50, 96),
            t("f", 29, Side::Buy, 50, 97),
        ];
        let (adjs, lots, report) = analyze(&trades).unwrap();
        let q: Vec<_> = adjs
            .iter()
            .map(|a| (a.replacement_id.as_str(), a.matched_quantity))
            .collect();
        assert_eq!(q, [("c", 30), ("e", 50), ("f", 20)]);
        assert_eq!(report.total.disallowed_loss, r(1000));
        let f_lots: Vec<_> = lots.iter().filter(|l| l.source_trade == "f").collect();
        assert_eq!(f_lots.len(), 2);
        assert_eq!(f_lots.iter().map(|l| l.quantity).sum::<u64>(), 50);

        let short = vec![
            t("a", 0, Side::Buy, 100, 100),
            t("b", 20, Side::Sell, 100, 90),
            t("c", 25, Side::Buy, 40, 95),
        ];
        let (_, _, report) = analyze(&short).unwrap();
        assert_eq!(report.total.disallowed_loss, r(400));
        assert_eq!(report.total.allowed_loss, r(600));
    }

    #[test]
    fn replacement_share_absorbs_one_loss_share() {
        let trades = vec![
            t("a", 0, Side::Buy, 50, 100),
            t("a2", 1, Side::Buy, 50, 100),
            t("b", 40, Side::Sell, 50, 90),
            t("b2", 41, Side::Sell, 50, 80),
            t("c", 45, Side::Buy, 60, 95),
        ];
        let adjs = detect_wash_sales(&trades).unwrap();
        let q: Vec<_> = adjs
            .iter()
            .map(|a| {
                (
                    a.loss_sale_id.as_str(),
                    a.matched_quantity,
                    a.disallowed_loss.clone(),
                )
            })
            .collect();
        assert_eq!(q, [("b", 50, r(500)), ("b2", 10, r(200))]);
    }

    #[test]
    fn partial_sale_of_adjusted_lot_is_flagged() {
        let mut trades = chain(10);
        trades[3].quantity = 40;
        let (_, lots, report) = analyze(&trades).unwrap();
        assert_eq!(report.partial_replacement_sales.len(), 1);
        let flag = &report.partial_replacement_sales[0];
        assert_eq!((flag.closed, flag.remaining), (40, 60));
        assert_eq!(lots[0].holding_start, day(0));
        assert_eq!(lots[0].basis_per_share, r(105));
    }

    #[test]
    fn long_term_flag_uses_tacked_holding_period() {
        let trades = vec![
            t("a", 0, Side::Buy, 10, 100),
            t("b", 300, Side::Sell, 10, 90),
            t("c", 305, Side::Buy, 10, 95),
            t("d", 400, Side::Sell, 10, 120),
        ];
        let (_, _, report) = analyze(&trades).unwrap();
        let last = report
            .realizations
            .iter()
            .find(|x| x.trade_id == "d")
            .unwrap();
        assert!(last.long_term);
        assert!(!report.realizations[0].long_term);
    }

    #[test]
    fn replay_rejects_foreign_adjustments() {
        let trades = chain(10);
        let mut adjs = detect_wash_sales(&trades).unwrap();
        adjs[0].replacement_id = "zz".into();
        assert!(matches!(
            apply_adjustments(&trades, &adjs),
            Err(LedgerError::Integrity(_))
        ));

        let mut adjs = detect_wash_sales(&trades).unwrap();
        adjs[0].disallowed_loss = r(999);
        assert!(matches!(
            apply_adjustments(&trades, &adjs),
            Err(LedgerError::Integrity(_))
        ));

        let adjs = detect_wash_sales(&chain(10)).unwrap();
        assert!(matches!(
            apply_adjustments(&chain(31), &adjs),
            Err(LedgerError::Integrity(_))
        ));
    }

    #[test]
    fn rounding_rule() {
        let q = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        assert_eq!(round_tax_amount(&q(1050, 100)), BigInt::from(10));
        assert_eq!(round_tax_amount(&q(1051, 100)), BigInt::from(11));
        assert_eq!(round_tax_amount(&q(-350, 100)), BigInt::from(-3));
        assert_eq!(round_tax_amount(&q(-351, 100)), BigInt::from(-4));
        assert_eq!(round_tax_amount(&q(49, 100)), BigInt::from(0));
        assert_eq!(round_tax_amount(&r(7)), BigInt::from(7));
    }

    #[test]
    fn adjustment_csv_columns() {
        let adjs = detect_wash_sales(&chain(10)).unwrap();
        let mut out = Vec::new();
        write_adjustments_csv(&mut out, &adjs).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "loss_sale_id,replacement_id,disallowed_loss,matched_quantity,new_basis_per_share,holding_period_start\n\
             b,c,1000,100,105,2024-01-02\n"
        );
        let json: serde_json::Value =
            serde_json::from_str(&analyze(&chain(10)).unwrap().2.to_json().unwrap()).unwrap();
        let line = &json["assets"][0];
        for key in [
            "asset",
            "realized",
            "allowed_loss",
            "disallowed_loss",
            "taxable_rounded",
        ] {
            assert!(line.get(key).is_some(), "{key}");
        }
        assert_eq!(line["taxable_rounded"], 1500);
    }

    /// Random two-asset ledger with long and short activity and no oversells.
    fn random_ledger(seed: u64, min_gap: i64, max_gap: i64) -> Vec<Trade> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut below = |n: u64| rng.next_u64() % n;
        let mut held: HashMap<(&str, Direction), u64> = HashMap::new();
        let mut date = 0;
        let mut trades = Vec::new();
        for k in 0..40 {
            date += min_gap + below((max_gap - min_gap + 1) as u64) as i64;
            let asset = if below(2) == 0 { "AAA" } else { "BBB" };
            let direction = if below(3) == 0 {
                Direction::Short
            } else {
                Direction::Long
            };
            let open = held.entry((asset, direction)).or_default();
            let closing = *open > 0 && below(2) == 0;
            let (side, q) = match (direction, closing) {
                (Direction::Long, false) => (Side::Buy, 1 + below(60)),
                (Direction::Short, false) => (Side::Short, 1 + below(60)),
                (Direction::Long, true) => (Side::Sell, 1 + below(*open)),
                (Direction::Short, true) => (Side::Cover, 1 + below(*open)),
            };
            if closing {
                *open -= q;
            } else {
                *open += q;
            }
            let price =
                BigRational::new(BigInt::from(8000 + below(4000) as i64), BigInt::from(100));
            trades.push(Trade::new(
                format!("T{k}"),
                day(date),
                asset,
                side,
                q,
                price,
            ));
        }
        trades
    }

    /// Plain FIFO gains with no wash-sale rule.
    fn plain_fifo_total(trades: &[Trade]) -> BigRational {
        let mut books: HashMap<(String, Direction), VecDeque<(u64, BigRational)>> = HashMap::new();
        let mut total = BigRational::zero();
        for tr in trades {
            let book = books
                .entry((tr.asset.clone(), tr.side.direction()))
                .or_default();
            if tr.side.opens() {
                book.push_back((tr.quantity, tr.price.clone()));
                continue;
            }
            let mut left = tr.quantity;
            while left > 0 {
                let front = book.front_mut().unwrap();
                let take = left.min(front.0);
                let per = match tr.side {
                    Side::Sell => &tr.price - &front.1,
                    _ => &front.1 - &tr.price,
                };
                total += per * qty(take);
                front.0 -= take;
                left -= take;
                if front.0 == 0 {
                    book.pop_front();
                }
            }
        }
        total
    }

    #[test]
    fn conservation_on_random_ledgers() {
        let mut with_washes = 0;
        for seed in 0..100 {
            let trades = random_ledger(seed, 0, 12);
            let (adjs, lots, report) = analyze(&trades).unwrap();
            with_washes += usize::from(!adjs.is_empty());

            for line in report.assets.iter().chain([&report.total]) {
                assert_eq!(line.gross_loss, &line.allowed_loss + &line.disallowed_loss);
                assert!(!line.allowed_loss.is_negative());
                assert_eq!(line.realized, &line.gross_gain - &line.allowed_loss);
            }
            let total_adj: BigRational = adjs.iter().map(|a| a.disallowed_loss.clone()).sum();
            assert_eq!(total_adj, report.total.disallowed_loss);

            let deferred: BigRational = lots
                .iter()
                .map(|l| &l.deferred_loss_per_share * qty(l.quantity))
                .sum();
            assert_eq!(
                &report.total.realized - deferred,
                plain_fifo_total(&trades),
                "seed {seed}"
            );

            for a in &adjs {
                let sale = trades.iter().find(|x| x.id == a.loss_sale_id).unwrap();
                let rep = trades.iter().find(|x| x.id == a.replacement_id).unwrap();
                assert!((rep.date - sale.date).num_days().abs() <= WASH_WINDOW_DAYS);
                assert!(a.matched_quantity <= sale.quantity.min(rep.quantity));
                let per = a.loss_per_share();
                let expected = match rep.side {
                    Side::Buy => &rep.price + &per,
                    _ => &rep.price - &per,
                };
                assert_eq!(a.new_basis_per_share, expected);
            }
            let mut per_rep: HashMap<&str, u64> = HashMap::new();
            let mut per_sale: HashMap<&str, u64> = HashMap::new();
            for a in &adjs {
                *per_rep.entry(&a.replacement_id).or_default() += a.matched_quantity;
                *per_sale.entry(&a.loss_sale_id).or_default() += a.matched_quantity;
            }
            for (id, m) in per_rep.into_iter().chain(per_sale) {
                assert!(m <= trades.iter().find(|x| x.id == id).unwrap().quantity);
            }
        }
        assert!(
            with_washes > 50,
            "generator should exercise the rule ({with_washes})"
        );
    }

    #[test]
    fn wide_gaps_never_wash() {
        for seed in 0..100 {
            let trades = random_ledger(seed, WASH_WINDOW_DAYS + 1, 90);
            assert!(detect_wash_sales(&trades).unwrap().is_empty());
        }
    }

    #[test]
    fn idempotent_on_adjusted_lot_ledger() {
        for seed in 0..50 {
            let trades = random_ledger(seed, 0, 12);
            let (adjs, lots, report) = analyze(&trades).unwrap();
            assert_eq!(detect_wash_sales(&trades).unwrap(), adjs);
            assert_eq!(
                apply_adjustments(&trades, &adjs).unwrap(),
                (lots.clone(), report)
            );

            let carried: Vec<Trade> = lots
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    let side = if l.direction == Direction::Long {
                        Side::Buy
                    } else {
                        Side::Short
                    };
                    Trade::new(
                        format!("O{k}"),
                        l.open_date,
                        &l.asset,
                        side,
                        l.quantity,
                        l.basis_per_share.clone(),
                    )
                })
                .collect();
            assert!(detect_wash_sales(&carried).unwrap().is_empty());
        }
    }

    proptest! {
        #[test]
        fn loss_split_is_exact(p1 in 2i64..500, drop in 1i64..100, p3 in 1i64..600, s in 1u64..500, gap in 0i64..=30) {
            let p2 = (p1 - drop).max(1);
            prop_assume!(p2 < p1);
            let trades = vec![
                t("a", 0, Side::Buy, s, p1),
                t("b", 40, Side::Sell, s, p2),
                t("c", 40 + gap, Side::Buy, s, p3),
                t("d", 200, Side::Sell, s, p1 + 1000),
            ];
            let (adjs, _, report) = analyze(&trades).unwrap();
            prop_assert_eq!(adjs.len(), 1);
            prop_assert_eq!(&adjs[0].new_basis_per_share, &r(p3 + p1 - p2));
            prop_assert_eq!(report.total.realized, r(p1 + 1000 - p1) * qty(s) - (r(p3) - r(p2)) * qty(s));
        }
    }
}
