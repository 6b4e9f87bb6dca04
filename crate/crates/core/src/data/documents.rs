use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::prices::PriceSeries;
use crate::compute::Matrix;
use crate::error::{MsgcaError, Result};

/// All documents published about one stock on one date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentDay {
    pub symbol: String,
    pub date: NaiveDate,
    #[serde(default)]
    pub texts: Vec<String>,
}

impl DocumentDay {
    /// Texts that are non-empty after trimming.
    pub fn nonempty_texts(&self) -> impl Iterator<Item = &str> {
        self.texts
            .iter()
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
    }

    pub fn has_text(&self) -> bool {
        self.nonempty_texts().next().is_some()
    }
}

pub type EmbeddingKey = (String, NaiveDate);

/// Pooled document embedding per (symbol, date).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<EmbeddingKey, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct EmbeddingLine {
    pub symbol: String,
    pub date: NaiveDate,
    pub vector: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, symbol: &str, date: NaiveDate, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(MsgcaError::Contract {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(MsgcaError::Data(format!(
                "embedding for {symbol} on {date} has non-finite entries"
            )));
        }
        self.entries.insert((symbol.to_string(), date), vector);
        Ok(())
    }

    pub fn get(&self, symbol: &str, date: NaiveDate) -> Option<&[f64]> {
        self.entries
            .get(&(symbol.to_string(), date))
            .map(Vec::as_slice)
    }

    pub fn contains(&self, symbol: &str, date: NaiveDate) -> bool {
        self.entries.contains_key(&(symbol.to_string(), date))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EmbeddingKey, &Vec<f64>)> {
        self.entries.iter()
    }

    /// Reads `embeddings.jsonl`. With `dim = None` the width is taken from
    /// the first line; an empty file yields an empty table of width 0.
    pub fn load(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| MsgcaError::io(path, e))?;
        let mut table: Option<EmbeddingTable> = dim.map(EmbeddingTable::new);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| MsgcaError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine = serde_json::from_str(&line).map_err(|e| {
                MsgcaError::Format(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(rec.vector.len()));
            t.insert(&rec.symbol, rec.date, rec.vector)
                .map_err(|e| match e {
                    MsgcaError::Contract { expected, actual } => MsgcaError::Data(format!(
                        "{} line {}: vector width {actual}, expected {expected}",
                        path.display(),
                        i + 1
                    )),
                    other => other,
                })?;
        }
        Ok(table.unwrap_or_else(|| EmbeddingTable::new(0)))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for ((symbol, date), vector) in &self.entries {
            write_embedding_line(&mut w, symbol, *date, vector)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| MsgcaError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| MsgcaError::io(path, e))
    }
}

pub(crate) fn write_embedding_line<W: Write>(
    w: &mut W,
    symbol: &str,
    date: NaiveDate,
    vector: &[f64],
) -> Result<()> {
    let line = serde_json::to_string(&EmbeddingLine {
        symbol: symbol.to_string(),
        date,
        vector: vector.to_vec(),
    })
    .map_err(|e| MsgcaError::Format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| MsgcaError::io("embeddings.jsonl", e))
}

/// Reads `documents.jsonl`: one `{"symbol","date","texts":[...]}` per line.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<DocumentDay>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| MsgcaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MsgcaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                MsgcaError::Format(format!("{} line {}: {e}", path.display(), i + 1))
            })?,
        );
    }
    Ok(out)
}

pub fn write_documents<W: Write>(mut w: W, days: &[DocumentDay]) -> Result<()> {
    for d in days {
        let line = serde_json::to_string(d).map_err(|e| MsgcaError::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| MsgcaError::io("documents.jsonl", e))?;
    }
    Ok(())
}

/// Lays document embeddings onto a stock's trading calendar.
///
/// Returns a `len x dim` matrix and a presence mask. Days without documents
/// are zero rows with mask `false`. Documents dated outside the stock's
/// calendar are dropped with a warning.
pub fn align_documents(
    series: &PriceSeries,
    days: &[DocumentDay],
    table: &EmbeddingTable,
) -> Result<(Matrix, Vec<bool>)> {
    let n = series.len();
    let mut docs = Array2::zeros((n, table.dim()));
    let mut mask = vec![false; n];
    let mut missing = Vec::new();
    for day in days.iter().filter(|d| d.symbol == series.symbol) {
        if !day.has_text() {
            continue;
        }
        let Ok(row) = series.dates.binary_search(&day.date) else {
            log::warn!(
                "dropping documents for {} on {}: not a trading day",
                day.symbol,
                day.date
            );
            continue;
        };
        if mask[row] {
            continue;
        }
        match table.get(&series.symbol, day.date) {
            Some(v) => {
                docs.row_mut(row).assign(&ndarray::ArrayView1::from(v));
                mask[row] = true;
            }
            None => missing.push(format!("{}@{}", series.symbol, day.date)),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(MsgcaError::MissingEmbedding(missing));
    }
    Ok((docs, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize) -> PriceSeries {
        let start = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
        PriceSeries {
            symbol: "AAA".into(),
            dates: (0..n)
                .map(|i| start + chrono::Days::new(i as u64))
                .collect(),
            open: vec![1.0; n],
            high: vec![1.0; n],
            close: vec![1.0; n],
        }
    }

    fn day(s: &PriceSeries, i: usize, texts: &[&str]) -> DocumentDay {
        DocumentDay {
            symbol: s.symbol.clone(),
            date: s.dates[i],
            texts: texts.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn zero_fill_on_missing_days() {
        let s = series(5);
        let mut table = EmbeddingTable::new(3);
        table
            .insert("AAA", s.dates[1], vec![1.0, 2.0, 3.0])
            .unwrap();
        table
            .insert("AAA", s.dates[3], vec![4.0, 5.0, 6.0])
            .unwrap();
        let days = vec![day(&s, 1, &["a"]), day(&s, 3, &["b"])];
        let (m, mask) = align_documents(&s, &days, &table).unwrap();
        assert_eq!(mask, vec![false, true, false, true, false]);
        for r in [0, 2, 4] {
            assert!(m.row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(m.row(3).to_vec(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn no_documents_is_all_zero() {
        let s = series(4);
        let (m, mask) = align_documents(&s, &[], &EmbeddingTable::new(2)).unwrap();
        assert_eq!(m.dim(), (4, 2));
        assert!(m.iter().all(|&v| v == 0.0));
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn missing_embedding_lists_keys() {
        let s = series(3);
        let days = vec![day(&s, 0, &["x"]), day(&s, 2, &["y"])];
        let err = align_documents(&s, &days, &EmbeddingTable::new(2)).unwrap_err();
        match err {
            MsgcaError::MissingEmbedding(keys) => assert_eq!(keys.len(), 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn blank_texts_count_as_absent() {
        let s = series(2);
        let days = vec![day(&s, 0, &["  ", ""])];
        let (_, mask) = align_documents(&s, &days, &EmbeddingTable::new(2)).unwrap();
        assert_eq!(mask, vec![false, false]);
    }

    #[test]
    fn off_calendar_documents_are_dropped() {
        let s = series(2);
        let days = vec![DocumentDay {
            symbol: "AAA".into(),
            date: NaiveDate::from_ymd_opt(2030, 1, 1).unwrap(),
            texts: vec!["late".into()],
        }];
        let (_, mask) = align_documents(&s, &days, &EmbeddingTable::new(2)).unwrap();
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn table_rejects_wrong_width() {
        let mut t = EmbeddingTable::new(2);
        let d = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
        assert!(matches!(
            t.insert("A", d, vec![1.0]),
            Err(MsgcaError::Contract {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn table_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let mut t = EmbeddingTable::new(2);
        let d = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
        t.insert("A", d, vec![0.1, -1.0 / 3.0]).unwrap();
        t.save(&path).unwrap();
        assert_eq!(EmbeddingTable::load(&path, None).unwrap(), t);
    }
}
