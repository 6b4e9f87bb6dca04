use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{LabelSpec, Trend};
use super::panel::WindowSample;
use crate::error::{MsgcaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(MsgcaError::Config(format!(
                "split ratios must be positive: {all:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MsgcaError::Config(format!(
                "split ratios must sum to 1: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Train/valid/test windows, separated in time by label date.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub valid: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub label_spec: LabelSpec,
    pub calendar: Vec<NaiveDate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[WindowSample] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

/// Partitions windows by quantiles of their distinct label dates. Within a
/// part, samples are ordered by (label date, stock).
pub fn chronological_split(
    mut samples: Vec<WindowSample>,
    ratios: SplitRatios,
    label_spec: LabelSpec,
    calendar: Vec<NaiveDate>,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let dates: Vec<usize> = samples
        .iter()
        .map(|s| s.label_cal)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = dates.len() as f64;
    let train_end = (n * ratios.train + 1e-9).floor() as usize;
    let valid_end = (n * (ratios.train + ratios.valid) + 1e-9).floor() as usize;
    if train_end == 0 || valid_end <= train_end || valid_end >= dates.len() {
        return Err(MsgcaError::Config(format!(
            "{} distinct label dates cannot form three non-empty chronological splits",
            dates.len()
        )));
    }
    let (valid_from, test_from) = (dates[train_end], dates[valid_end]);
    samples.sort_by_key(|s| (s.label_cal, s.stock, s.start));
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        label_spec,
        calendar,
    };
    for s in samples {
        if s.label_cal >= test_from {
            split.test.push(s);
        } else if s.label_cal >= valid_from {
            split.valid.push(s);
        } else {
            split.train.push(s);
        }
    }
    Ok(split)
}

/// Shuffled index batches for one epoch. The order depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Batches made of whole label dates. Dates are visited in a shuffled
/// order (samples within a date are shuffled too) and packed greedily while
/// the batch stays within `batch_size`; a date with more samples than that
/// is cut into `batch_size` chunks. Keeping dates together bounds the graph
/// nodes a batch needs.
pub fn date_batches(
    label_cals: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in label_cals.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    groups.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        if current.len() + g.len() > batch_size && !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        if g.len() > batch_size {
            out.extend(g.chunks(batch_size).map(<[usize]>::to_vec));
        } else {
            current.extend(g);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

pub const SPLIT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    symbol: String,
    start_date: NaiveDate,
    label_date: NaiveDate,
    label: i8,
}

/// JSON container for a split. Samples are stored by reference (symbol,
/// first window date, label date, signed label) and resolved against a
/// panel on load.
#[derive(Serialize, Deserialize)]
struct SplitFile {
    format_version: u32,
    window: usize,
    label_spec: LabelSpec,
    calendar_start: Option<NaiveDate>,
    calendar_end: Option<NaiveDate>,
    calendar_len: usize,
    train: Vec<SampleRecord>,
    valid: Vec<SampleRecord>,
    test: Vec<SampleRecord>,
}

impl DatasetSplit {
    pub fn to_json(&self, panel: &super::panel::Panel) -> Result<String> {
        let rec = |v: &[WindowSample]| -> Vec<SampleRecord> {
            v.iter()
                .map(|s| SampleRecord {
                    symbol: s.symbol.clone(),
                    start_date: s.dates(panel)[0],
                    label_date: s.label_date,
                    label: s.label.code(),
                })
                .collect()
        };
        let file = SplitFile {
            format_version: SPLIT_FORMAT_VERSION,
            window: self.train.first().map(|s| s.ws).unwrap_or(0),
            label_spec: self.label_spec,
            calendar_start: self.calendar.first().copied(),
            calendar_end: self.calendar.last().copied(),
            calendar_len: self.calendar.len(),
            train: rec(&self.train),
            valid: rec(&self.valid),
            test: rec(&self.test),
        };
        serde_json::to_string_pretty(&file).map_err(|e| MsgcaError::Format(e.to_string()))
    }

    pub fn save(&self, panel: &super::panel::Panel, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(panel)?).map_err(|e| MsgcaError::io(path, e))
    }

    /// Resolves a saved split against `panel`.
    pub fn from_json(json: &str, panel: &super::panel::Panel) -> Result<DatasetSplit> {
        let file: SplitFile = serde_json::from_str(json)
            .map_err(|e| MsgcaError::Format(format!("split file: {e}")))?;
        if file.format_version != SPLIT_FORMAT_VERSION {
            return Err(MsgcaError::Format(format!(
                "split file format version {} unsupported (expected {SPLIT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let resolve = |recs: Vec<SampleRecord>| -> Result<Vec<WindowSample>> {
            recs.into_iter()
                .map(|r| {
                    let stock = panel
                        .stocks
                        .iter()
                        .position(|f| f.symbol == r.symbol)
                        .ok_or_else(|| {
                            MsgcaError::Data(format!("split references unknown stock {}", r.symbol))
                        })?;
                    let frame = &panel.stocks[stock];
                    let start = frame.dates.binary_search(&r.start_date).map_err(|_| {
                        MsgcaError::Data(format!("{}: no trading day {}", r.symbol, r.start_date))
                    })?;
                    let label_row = start + file.window;
                    if frame.dates.get(label_row) != Some(&r.label_date) {
                        return Err(MsgcaError::Data(format!(
                            "{}: window from {} does not end before {}",
                            r.symbol, r.start_date, r.label_date
                        )));
                    }
                    let label = Trend::from_code(r.label)
                        .ok_or_else(|| MsgcaError::Format(format!("bad label code {}", r.label)))?;
                    Ok(WindowSample {
                        stock,
                        symbol: r.symbol,
                        start,
                        ws: file.window,
                        label,
                        label_date: r.label_date,
                        label_cal: frame.calendar_index[label_row],
                    })
                })
                .collect()
        };
        Ok(DatasetSplit {
            train: resolve(file.train)?,
            valid: resolve(file.valid)?,
            test: resolve(file.test)?,
            label_spec: file.label_spec,
            calendar: panel.calendar.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label_cal: usize, stock: usize) -> WindowSample {
        WindowSample {
            stock,
            symbol: format!("S{stock}"),
            start: label_cal,
            ws: 2,
            label: Trend::Flat,
            label_date: NaiveDate::from_ymd_opt(2022, 1, 1).unwrap()
                + chrono::Days::new(label_cal as u64),
            label_cal,
        }
    }

    fn calendar(n: usize) -> Vec<NaiveDate> {
        (0..n)
            .map(|i| NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Days::new(i as u64))
            .collect()
    }

    #[test]
    fn ten_dates_eight_one_one() {
        let samples: Vec<_> = (0..10).map(|d| sample(d, 0)).collect();
        let split = chronological_split(
            samples,
            SplitRatios::default(),
            LabelSpec::default(),
            calendar(10),
        )
        .unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.valid.len(), 1);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.valid[0].label_cal, 8);
        assert_eq!(split.test[0].label_cal, 9);
    }

    #[test]
    fn single_date_cannot_split() {
        let samples: Vec<_> = (0..5).map(|s| sample(3, s)).collect();
        let err = chronological_split(
            samples,
            SplitRatios::default(),
            LabelSpec::default(),
            calendar(5),
        );
        assert!(matches!(err, Err(MsgcaError::Config(_))));
    }

    #[test]
    fn ratios_are_validated() {
        let bad = SplitRatios {
            train: 0.5,
            valid: 0.5,
            test: 0.5,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batches_keep_partial_tail() {
        let sizes: Vec<usize> = batch_iter(10, 4, 3, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn date_batches_cover_every_sample_once() {
        let cals = vec![3, 1, 3, 2, 1, 3, 2, 2];
        let batches = date_batches(&cals, 3, 5, 1);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        let first: BTreeSet<usize> = batches[0].iter().map(|&i| cals[i]).collect();
        assert_eq!(first.len(), 1);
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(batch_iter(50, 7, 11, 2), batch_iter(50, 7, 11, 2));
        assert_ne!(batch_iter(50, 50, 11, 0), batch_iter(50, 50, 11, 1));
    }
}
