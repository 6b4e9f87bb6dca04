use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::Serialize;

use crate::error::{MsgcaError, Result};

/// Daily prices of one stock. `close` is the adjusted close.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    pub symbol: String,
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub close: Vec<f64>,
}

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Checks ordering, positivity, and equal column lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.dates.len();
        if self.open.len() != n || self.high.len() != n || self.close.len() != n {
            return Err(MsgcaError::Data(format!(
                "{}: price columns have unequal lengths",
                self.symbol
            )));
        }
        if let Some(w) = self.dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(MsgcaError::Data(format!(
                "{}: dates not strictly increasing at {}",
                self.symbol, w[1]
            )));
        }
        for i in 0..n {
            for (col, v) in [
                ("open", self.open[i]),
                ("high", self.high[i]),
                ("close", self.close[i]),
            ] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(MsgcaError::Data(format!(
                        "{} {}: {col} price {v} is not strictly positive",
                        self.symbol, self.dates[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

const REQUIRED: [&str; 5] = ["date", "symbol", "open", "high", "close"];

pub fn load_prices(path: impl AsRef<Path>) -> Result<Vec<PriceSeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| MsgcaError::io(path, e))?;
    parse_prices(file)
}

/// Parses `date,symbol,open,high,close` CSV into one sorted series per
/// symbol. Series are returned in symbol order.
pub fn parse_prices<R: Read>(reader: R) -> Result<Vec<PriceSeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MsgcaError::Format(format!("prices: unreadable header: {e}")))?
        .clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(REQUIRED) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MsgcaError::Format(format!("prices: missing column `{name}`")))?;
    }

    let mut grouped: BTreeMap<String, Vec<(NaiveDate, f64, f64, f64)>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| MsgcaError::Format(format!("prices line {line}: {e}")))?;
        let field = |k: usize| record.get(cols[k]).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|e| {
            MsgcaError::Format(format!("prices line {line}: bad date `{}`: {e}", field(0)))
        })?;
        let symbol = field(1).to_string();
        if symbol.is_empty() {
            return Err(MsgcaError::Format(format!(
                "prices line {line}: empty symbol"
            )));
        }
        let mut vals = [0.0f64; 3];
        for (j, v) in vals.iter_mut().enumerate() {
            let raw = field(j + 2);
            *v = raw.parse().map_err(|_| {
                MsgcaError::Format(format!(
                    "prices line {line}: `{}` is not a number: `{raw}`",
                    REQUIRED[j + 2]
                ))
            })?;
            if !(v.is_finite() && *v > 0.0) {
                return Err(MsgcaError::Data(format!(
                    "prices line {line}: {} price {v} is not strictly positive",
                    REQUIRED[j + 2]
                )));
            }
        }
        if !seen.insert((symbol.clone(), date)) {
            return Err(MsgcaError::Data(format!(
                "prices line {line}: duplicate entry for {symbol} on {date}"
            )));
        }
        grouped
            .entry(symbol)
            .or_default()
            .push((date, vals[0], vals[1], vals[2]));
    }

    Ok(grouped
        .into_iter()
        .map(|(symbol, mut rows)| {
            rows.sort_by_key(|r| r.0);
            PriceSeries {
                symbol,
                dates: rows.iter().map(|r| r.0).collect(),
                open: rows.iter().map(|r| r.1).collect(),
                high: rows.iter().map(|r| r.2).collect(),
                close: rows.iter().map(|r| r.3).collect(),
            }
        })
        .collect())
}

#[derive(Serialize)]
struct PriceRow<'a> {
    date: String,
    symbol: &'a str,
    open: f64,
    high: f64,
    close: f64,
}

/// Writes series in the same CSV layout [`load_prices`] reads, ordered by
/// date then symbol.
pub fn write_prices<W: Write>(writer: W, series: &[PriceSeries]) -> Result<()> {
    let mut rows: Vec<PriceRow> = series
        .iter()
        .flat_map(|s| {
            (0..s.len()).map(move |i| PriceRow {
                date: s.dates[i].format("%Y-%m-%d").to_string(),
                symbol: &s.symbol,
                open: s.open[i],
                high: s.high[i],
                close: s.close[i],
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.date, a.symbol).cmp(&(&b.date, b.symbol)));
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)
            .map_err(|e| MsgcaError::Format(format!("prices: write failed: {e}")))?;
    }
    w.flush().map_err(|e| MsgcaError::io("prices.csv", e))?;
    Ok(())
}
