//! Exact cost accounting.
//!
//! Per-million-token prices make sub-cent precision load-bearing, so nothing
//! in this module touches floating point. [`Money`] is an integer count of
//! picodollars: prices are configured in micro-dollar precision per million
//! tokens, and a per-token cost of `tokens * price / 1e6` is then always a
//! whole number of picodollars. Sums, totals, and scaled report figures stay
//! exact end to end.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Role, TokenUsage};

/// Picodollars per dollar.
const PICOS_PER_DOLLAR: i128 = 1_000_000_000_000;
/// Picodollars per micro-dollar.
const PICOS_PER_MICRO: i128 = 1_000_000;

/// An exact amount of currency, stored as integer picodollars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i128);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MoneyError {
    #[error("malformed currency amount {0:?}")]
    Malformed(String),
    #[error("currency amount {0:?} has more than {1} decimal places")]
    TooPrecise(String, u32),
    #[error("currency arithmetic overflowed")]
    Overflow,
}

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_picos(picos: i128) -> Self {
        Money(picos)
    }

    pub fn from_micros(micros: i64) -> Self {
        Money(micros as i128 * PICOS_PER_MICRO)
    }

    pub fn picos(&self) -> i128 {
        self.0
    }

    /// Parses a decimal dollar amount exactly. At most 12 decimal places.
    pub fn parse_dollars(text: &str) -> Result<Self, MoneyError> {
        let picos = parse_fixed_decimal(text, 12)?;
        Ok(Money(picos))
    }

    pub fn checked_add(self, rhs: Money) -> Result<Money, MoneyError> {
        self.0.checked_add(rhs.0).map(Money).ok_or(MoneyError::Overflow)
    }
}

impl std::ops::Add for Money {
    type Output = Money;

    fn add(self, rhs: Money) -> Money {
        Money(self.0.checked_add(rhs.0).expect("money addition overflowed"))
    }
}

impl std::ops::AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |acc, m| acc + m)
    }
}

impl fmt::Display for Money {
    /// Renders as a plain decimal dollar amount with no trailing zeros,
    /// e.g. `0.0075` or `-2.5` or `0`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_fixed_decimal(self.0, 12))
    }
}

impl Serialize for Money {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Money::parse_dollars(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses `text` as a signed decimal with at most `max_places` fractional
/// digits, returning the value scaled by `10^max_places`.
fn parse_fixed_decimal(text: &str, max_places: u32) -> Result<i128, MoneyError> {
    let trimmed = text.trim();
    let malformed = || MoneyError::Malformed(text.to_string());
    let (negative, digits) = match trimmed.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, trimmed.strip_prefix('+').unwrap_or(trimmed)),
    };
    if digits.is_empty() {
        return Err(malformed());
    }
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(malformed());
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return Err(malformed());
    }
    if frac_part.len() as u32 > max_places {
        return Err(MoneyError::TooPrecise(text.to_string(), max_places));
    }
    let scale = 10i128.pow(max_places);
    let int_value: i128 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().map_err(|_| malformed())?
    };
    let mut frac_value: i128 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().map_err(|_| malformed())?
    };
    frac_value *= 10i128.pow(max_places - frac_part.len() as u32);
    let magnitude = int_value
        .checked_mul(scale)
        .and_then(|v| v.checked_add(frac_value))
        .ok_or(MoneyError::Overflow)?;
    Ok(if negative { -magnitude } else { magnitude })
}

/// Renders a value scaled by `10^places` as a decimal string with trailing
/// zeros trimmed.
fn render_fixed_decimal(value: i128, places: u32) -> String {
    let scale = 10i128.pow(places);
    let sign = if value < 0 { "-" } else { "" };
    let magnitude = value.unsigned_abs();
    let int_part = magnitude / scale.unsigned_abs();
    let frac_part = magnitude % scale.unsigned_abs();
    if frac_part == 0 {
        return format!("{sign}{int_part}");
    }
    let mut frac = format!("{frac_part:0width$}", width = places as usize);
    while frac.ends_with('0') {
        frac.pop();
    }
    format!("{sign}{int_part}.{frac}")
}

/// Price of one model, in dollars per million tokens, held exactly as
/// integer micro-dollars per million tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PricePerMillion(u64);

impl PricePerMillion {
    /// Parses a decimal dollar price with at most 6 decimal places.
    pub fn parse(text: &str) -> Result<Self, MoneyError> {
        let micros = parse_fixed_decimal(text, 6)?;
        if micros < 0 {
            return Err(MoneyError::Malformed(text.to_string()));
        }
        u64::try_from(micros)
            .map(PricePerMillion)
            .map_err(|_| MoneyError::Overflow)
    }

    pub fn micros_per_million(&self) -> u64 {
        self.0
    }
}

impl fmt::Display for PricePerMillion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_fixed_decimal(self.0 as i128, 6))
    }
}

impl Serialize for PricePerMillion {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PricePerMillion {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        PricePerMillion::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Pricing for one model name: either explicit per-million-token rates or an
/// explicit declaration that the model is free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceEntry {
    Priced {
        input_per_million: PricePerMillion,
        output_per_million: PricePerMillion,
    },
    Free {
        free: bool,
    },
}

impl PriceEntry {
    pub fn priced(input: &str, output: &str) -> Result<Self, MoneyError> {
        Ok(PriceEntry::Priced {
            input_per_million: PricePerMillion::parse(input)?,
            output_per_million: PricePerMillion::parse(output)?,
        })
    }

    pub fn free() -> Self {
        PriceEntry::Free { free: true }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("no price entry for model {0:?} and it is not marked free")]
    UnknownModel(String),
    #[error("price entry for model {0:?} sets free = false without rates")]
    NotActuallyFree(String),
    #[error(transparent)]
    Money(#[from] MoneyError),
}

/// Prices one call exactly: `tokens * price_per_million / 1e6` per side,
/// which in picodollars is just `tokens * price_in_micros`.
pub fn price_call(usage: &TokenUsage, price: &PriceEntry) -> Result<Money, CostError> {
    match price {
        PriceEntry::Free { .. } => Ok(Money::ZERO),
        PriceEntry::Priced { input_per_million, output_per_million } => {
            let prompt = (usage.prompt_tokens as i128)
                .checked_mul(input_per_million.micros_per_million() as i128)
                .ok_or(MoneyError::Overflow)?;
            let completion = (usage.completion_tokens as i128)
                .checked_mul(output_per_million.micros_per_million() as i128)
                .ok_or(MoneyError::Overflow)?;
            let picos = prompt.checked_add(completion).ok_or(MoneyError::Overflow)?;
            Ok(Money::from_picos(picos))
        }
    }
}

/// Looks up a model's price entry, treating an absent entry as an error
/// rather than silently pricing calls at zero.
pub fn lookup_price<'a>(
    pricing: &'a BTreeMap<String, PriceEntry>,
    model: &str,
) -> Result<&'a PriceEntry, CostError> {
    let entry = pricing
        .get(model)
        .ok_or_else(|| CostError::UnknownModel(model.to_string()))?;
    if let PriceEntry::Free { free: false } = entry {
        return Err(CostError::NotActuallyFree(model.to_string()));
    }
    Ok(entry)
}

/// One priced model call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub task_id: String,
    /// Position of the task in its dataset; orders exported entries.
    pub task_index: usize,
    /// Call sequence number within the task.
    pub seq: usize,
    /// 1-based pipeline stage the call served.
    pub stage: usize,
    pub role: Role,
    pub model: String,
    pub usage: TokenUsage,
    /// True when usage was estimated rather than reported by the backend.
    pub estimated: bool,
    pub cost: Money,
}

/// Append-only record of every priced call in a run.
///
/// Totals are maintained incrementally and always equal the exact sum of the
/// entries; addition of integers is order-independent, so concurrent runs
/// that assemble entries in different orders still agree on every total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
    total: Money,
    by_model: BTreeMap<String, Money>,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    pub fn append(&mut self, entry: LedgerEntry) {
        self.total += entry.cost;
        *self.by_model.entry(entry.model.clone()).or_insert(Money::ZERO) += entry.cost;
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> Money {
        self.total
    }

    pub fn by_model(&self) -> &BTreeMap<String, Money> {
        &self.by_model
    }

    pub fn any_estimated(&self) -> bool {
        self.entries.iter().any(|e| e.estimated)
    }

    /// Sorts entries into their canonical export order: dataset position,
    /// then call sequence within the task.
    pub fn sort_canonical(&mut self) {
        self.entries.sort_by(|a, b| {
            (a.task_index, a.seq).cmp(&(b.task_index, b.seq))
        });
    }

    /// Writes the per-call table as CSV. Fields contain no commas, so no
    /// quoting is needed.
    pub fn export_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "task_id,stage,role,model,prompt_tokens,completion_tokens,estimated,cost_usd"
        )?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.task_id,
                e.stage,
                e.role,
                e.model,
                e.usage.prompt_tokens,
                e.usage.completion_tokens,
                e.estimated,
                e.cost
            )?;
        }
        Ok(())
    }
}

/// An exact cost-per-million-tasks figure: `total * 1e6 / num_tasks`,
/// kept as a reduced rational number of dollars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerMillion {
    /// Numerator in picodollars.
    num: i128,
    /// Denominator (the task count).
    den: u64,
}

impl PerMillion {
    /// Scales a run total to a per-million-tasks figure. `num_tasks` must be
    /// nonzero.
    pub fn new(total: Money, num_tasks: u64) -> Self {
        assert!(num_tasks > 0, "per-million figures need at least one task");
        let mut num = total.picos().checked_mul(1_000_000).expect("per-million overflow");
        let mut den = num_tasks;
        let g = gcd_i128(num.unsigned_abs(), den as u128);
        if g > 1 {
            num /= g as i128;
            den /= g as u64;
        }
        PerMillion { num, den }
    }

    /// The figure in dollars, exact only when the denominator divides out.
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64 / PICOS_PER_DOLLAR as f64
    }

    /// Exact picodollar numerator and task-count denominator.
    pub fn as_ratio(&self) -> (i128, u64) {
        (self.num, self.den)
    }

    /// True when the figure is a whole number of picodollars.
    pub fn is_exact(&self) -> bool {
        self.num % self.den as i128 == 0
    }
}

impl fmt::Display for PerMillion {
    /// Renders in dollars. Exact values print in full; repeating values are
    /// rounded half-up at 6 decimal places.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_exact() {
            return f.write_str(&render_fixed_decimal(self.num / self.den as i128, 12));
        }
        // Scale to 6 decimal places of a dollar and round half-up.
        let scale = 1_000_000i128;
        let scaled = self.num.checked_mul(scale).expect("per-million render overflow");
        let den = self.den as i128 * PICOS_PER_DOLLAR;
        let mut q = scaled / den;
        let r = scaled % den;
        if r.abs() * 2 >= den {
            q += if scaled < 0 { -1 } else { 1 };
        }
        f.write_str(&render_fixed_decimal(q, 6))
    }
}

fn gcd_i128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn priced(input: &str, output: &str) -> PriceEntry {
        PriceEntry::priced(input, output).unwrap()
    }

    #[test]
    fn prices_the_documented_example_exactly() {
        let usage = TokenUsage::new(1000, 500);
        let cost = price_call(&usage, &priced("2.50", "10.00")).unwrap();
        assert_eq!(cost, Money::parse_dollars("0.0075").unwrap());
        assert_eq!(cost.to_string(), "0.0075");
    }

    #[test]
    fn fractional_micro_dollar_costs_stay_exact() {
        // One token at $2.50 per million is 2.5 micro-dollars; the
        // picodollar representation holds it without rounding.
        let cost = price_call(&TokenUsage::new(1, 0), &priced("2.50", "0")).unwrap();
        assert_eq!(cost.picos(), 2_500_000);
        assert_eq!(cost.to_string(), "0.0000025");
    }

    #[test]
    fn free_models_cost_nothing() {
        let cost = price_call(&TokenUsage::new(9999, 9999), &PriceEntry::free()).unwrap();
        assert_eq!(cost, Money::ZERO);
    }

    #[test]
    fn unknown_model_is_an_error() {
        let pricing = BTreeMap::new();
        let err = lookup_price(&pricing, "mystery").unwrap_err();
        assert_eq!(err, CostError::UnknownModel("mystery".into()));
    }

    #[test]
    fn ledger_total_equals_entry_sum_in_any_order() {
        let entry = |seq: usize, picos: i128| LedgerEntry {
            task_id: format!("t{seq}"),
            task_index: seq,
            seq: 0,
            stage: 1,
            role: Role::Small,
            model: "m".into(),
            usage: TokenUsage::new(1, 1),
            estimated: false,
            cost: Money::from_picos(picos),
        };
        let costs = [17i128, 250_000, 3, 999_999_999_999];
        let mut forward = CostLedger::new();
        for (i, c) in costs.iter().enumerate() {
            forward.append(entry(i, *c));
        }
        let mut backward = CostLedger::new();
        for (i, c) in costs.iter().enumerate().rev() {
            backward.append(entry(i, *c));
        }
        let direct: Money = costs.iter().map(|c| Money::from_picos(*c)).sum();
        assert_eq!(forward.total(), direct);
        assert_eq!(forward.total(), backward.total());
    }

    #[test]
    fn per_million_scales_exactly() {
        // $0.000355 for one task is $355 per million tasks.
        let total = Money::parse_dollars("0.000355").unwrap();
        let figure = PerMillion::new(total, 1);
        assert!(figure.is_exact());
        assert_eq!(figure.to_string(), "355");

        // $0.000424 over two tasks is $212 per million tasks.
        let total = Money::parse_dollars("0.000424").unwrap();
        let figure = PerMillion::new(total, 2);
        assert_eq!(figure.to_string(), "212");
    }

    #[test]
    fn per_million_rounds_repeating_values() {
        // $1 over 3 tasks: 333333.333... dollars per million tasks.
        let figure = PerMillion::new(Money::parse_dollars("1").unwrap(), 3);
        assert!(!figure.is_exact());
        assert_eq!(figure.to_string(), "333333.333333");
    }

    #[test]
    fn money_parse_rejects_junk() {
        assert!(Money::parse_dollars("").is_err());
        assert!(Money::parse_dollars("1.2.3").is_err());
        assert!(Money::parse_dollars("12a").is_err());
        assert!(matches!(
            Money::parse_dollars("0.1234567890123"),
            Err(MoneyError::TooPrecise(_, 12))
        ));
        assert_eq!(Money::parse_dollars("-1.5").unwrap().picos(), -1_500_000_000_000);
        assert_eq!(Money::parse_dollars(".5").unwrap().picos(), 500_000_000_000);
    }

    #[test]
    fn price_round_trips_through_serde() {
        let entry = priced("0.15", "0.60");
        let json = serde_json::to_string(&entry).unwrap();
        let back: PriceEntry = serde_json::from_str(&json).unwrap();
        assert_eq!(entry, back);
    }
}
