use std::collections::BTreeSet;

use chrono::NaiveDate;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::documents::{align_documents, DocumentDay, EmbeddingTable};
use super::labels::{compute_labels, LabelSpec, Trend};
use super::prices::PriceSeries;
use crate::compute::Matrix;
use crate::error::{MsgcaError, Result};

/// How raw prices become the three indicator channels fed to the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorTransform {
    /// close, open, and high each as percent change from the previous
    /// close (the first day uses its own open as the previous close).
    #[default]
    PctReturn,
    /// Prices as given.
    Raw,
}

/// One stock's data aligned on its own trading dates.
#[derive(Clone, Debug)]
pub struct StockFrame {
    pub symbol: String,
    pub dates: Vec<NaiveDate>,
    /// Position of each date in the panel calendar.
    pub calendar_index: Vec<usize>,
    pub close: Vec<f64>,
    /// `len x 3`: close, open, high channels after the indicator transform.
    pub indicators: Matrix,
    /// `len x dim`, zero rows where `doc_mask` is false.
    pub docs: Matrix,
    pub doc_mask: Vec<bool>,
    /// Trend of each date relative to the previous close; `None` on day one.
    pub labels: Vec<Option<Trend>>,
}

impl StockFrame {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Every stock of a dataset on a shared calendar.
#[derive(Clone, Debug)]
pub struct Panel {
    pub calendar: Vec<NaiveDate>,
    pub stocks: Vec<StockFrame>,
    pub dim: usize,
    pub label_spec: LabelSpec,
    pub transform: IndicatorTransform,
    by_date: Vec<Vec<(usize, usize)>>,
}

fn transform_indicators(series: &PriceSeries, transform: IndicatorTransform) -> Matrix {
    let n = series.len();
    let mut m = Array2::zeros((n, 3));
    for i in 0..n {
        let row = [series.close[i], series.open[i], series.high[i]];
        match transform {
            IndicatorTransform::Raw => {
                for (j, v) in row.into_iter().enumerate() {
                    m[[i, j]] = v;
                }
            }
            IndicatorTransform::PctReturn => {
                let prev = if i == 0 {
                    series.open[0]
                } else {
                    series.close[i - 1]
                };
                for (j, v) in row.into_iter().enumerate() {
                    m[[i, j]] = 100.0 * (v / prev - 1.0);
                }
            }
        }
    }
    m
}

impl Panel {
    pub fn build(
        prices: &[PriceSeries],
        documents: &[DocumentDay],
        table: &EmbeddingTable,
        label_spec: LabelSpec,
        transform: IndicatorTransform,
    ) -> Result<Panel> {
        label_spec.validate()?;
        if prices.is_empty() {
            return Err(MsgcaError::Data("no price series".into()));
        }
        let mut symbols = BTreeSet::new();
        for p in prices {
            p.validate()?;
            if !symbols.insert(p.symbol.as_str()) {
                return Err(MsgcaError::Data(format!(
                    "symbol {} appears twice",
                    p.symbol
                )));
            }
        }
        let calendar: Vec<NaiveDate> = prices
            .iter()
            .flat_map(|p| p.dates.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut stocks = Vec::with_capacity(prices.len());
        for p in prices {
            let (docs, doc_mask) = align_documents(p, documents, table)?;
            let mut labels = vec![None; p.len()];
            for (slot, (_, trend)) in labels
                .iter_mut()
                .skip(1)
                .zip(compute_labels(p, &label_spec))
            {
                *slot = Some(trend);
            }
            stocks.push(StockFrame {
                symbol: p.symbol.clone(),
                dates: p.dates.clone(),
                calendar_index: p
                    .dates
                    .iter()
                    .map(|d| calendar.binary_search(d).expect("calendar is the union"))
                    .collect(),
                close: p.close.clone(),
                indicators: transform_indicators(p, transform),
                docs,
                doc_mask,
                labels,
            });
        }
        let mut by_date = vec![Vec::new(); calendar.len()];
        for (s, f) in stocks.iter().enumerate() {
            for (row, &c) in f.calendar_index.iter().enumerate() {
                by_date[c].push((s, row));
            }
        }
        Ok(Panel {
            calendar,
            stocks,
            dim: table.dim(),
            label_spec,
            transform,
            by_date,
        })
    }

    pub fn symbols(&self) -> Vec<String> {
        self.stocks.iter().map(|s| s.symbol.clone()).collect()
    }

    pub fn num_stocks(&self) -> usize {
        self.stocks.len()
    }

    /// `(stock, row)` pairs trading on calendar day `cal`.
    pub fn stocks_at(&self, cal: usize) -> &[(usize, usize)] {
        &self.by_date[cal]
    }

    pub fn row_at(&self, stock: usize, cal: usize) -> Option<usize> {
        self.stocks[stock].calendar_index.binary_search(&cal).ok()
    }

    /// Sliding stride-1 windows for every stock.
    pub fn windows(&self, ws: usize) -> Result<Vec<WindowSample>> {
        if ws < 2 {
            return Err(MsgcaError::Config(format!(
                "window size must be >= 2, got {ws}"
            )));
        }
        Ok(self
            .stocks
            .iter()
            .enumerate()
            .flat_map(|(i, f)| build_windows(f, i, ws))
            .collect())
    }
}

/// One training instance: rows `start..start + ws` of a stock frame, labelled
/// with the trend of the following trading day.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub stock: usize,
    pub symbol: String,
    pub start: usize,
    pub ws: usize,
    pub label: Trend,
    pub label_date: NaiveDate,
    pub label_cal: usize,
}

impl WindowSample {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.ws
    }

    pub fn dates<'a>(&self, panel: &'a Panel) -> &'a [NaiveDate] {
        &panel.stocks[self.stock].dates[self.rows()]
    }

    /// Calendar positions of the window rows.
    pub fn calendar_indices<'a>(&self, panel: &'a Panel) -> &'a [usize] {
        &panel.stocks[self.stock].calendar_index[self.rows()]
    }

    /// `ws x 3` indicator window (close, open, high).
    pub fn indicators<'a>(&self, panel: &'a Panel) -> ArrayView2<'a, f64> {
        panel.stocks[self.stock]
            .indicators
            .slice(s![self.rows(), ..])
    }

    /// `ws x dim` document embeddings; masked rows are zero.
    pub fn doc_embeddings<'a>(&self, panel: &'a Panel) -> ArrayView2<'a, f64> {
        panel.stocks[self.stock].docs.slice(s![self.rows(), ..])
    }

    pub fn doc_mask<'a>(&self, panel: &'a Panel) -> &'a [bool] {
        &panel.stocks[self.stock].doc_mask[self.rows()]
    }
}

/// Windows over one stock frame. Yields `len - ws` samples; frames shorter
/// than `ws + 1` yield none and log a warning.
pub fn build_windows(frame: &StockFrame, stock: usize, ws: usize) -> Vec<WindowSample> {
    if frame.len() < ws + 1 {
        log::warn!(
            "skipping {}: {} trading days is shorter than window {} + 1",
            frame.symbol,
            frame.len(),
            ws
        );
        return Vec::new();
    }
    (0..frame.len() - ws)
        .map(|start| {
            let label_row = start + ws;
            WindowSample {
                stock,
                symbol: frame.symbol.clone(),
                start,
                ws,
                label: frame.labels[label_row].expect("rows after the first are labelled"),
                label_date: frame.dates[label_row],
                label_cal: frame.calendar_index[label_row],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_series(symbol: &str, n: usize) -> PriceSeries {
        let start = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
        let close: Vec<f64> = (0..n).map(|i| 100.0 + ((i * 7) % 5) as f64).collect();
        PriceSeries {
            symbol: symbol.into(),
            dates: (0..n)
                .map(|i| start + chrono::Days::new(i as u64))
                .collect(),
            open: close.iter().map(|c| c - 0.5).collect(),
            high: close.iter().map(|c| c + 1.0).collect(),
            close,
        }
    }

    fn panel(n: usize) -> Panel {
        Panel::build(
            &[toy_series("AAA", n)],
            &[],
            &EmbeddingTable::new(2),
            LabelSpec::default(),
            IndicatorTransform::PctReturn,
        )
        .unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(panel(25).windows(20).unwrap().len(), 5);
        assert_eq!(panel(20).windows(20).unwrap().len(), 0);
        assert!(panel(25).windows(1).is_err());
    }

    #[test]
    fn consecutive_windows_overlap() {
        let p = panel(30);
        let w = p.windows(6).unwrap();
        for pair in w.windows(2) {
            let a = pair[0].indicators(&p);
            let b = pair[1].indicators(&p);
            assert_eq!(a.slice(s![1.., ..]), b.slice(s![..5, ..]));
        }
    }

    #[test]
    fn label_is_day_after_window() {
        let p = panel(10);
        let w = &p.windows(3).unwrap()[2];
        assert_eq!(w.label_date, p.stocks[0].dates[5]);
        assert_eq!(Some(w.label), p.stocks[0].labels[5]);
    }

    #[test]
    fn pct_return_transform() {
        let s = toy_series("AAA", 3);
        let m = transform_indicators(&s, IndicatorTransform::PctReturn);
        let expect = 100.0 * (s.close[1] / s.close[0] - 1.0);
        assert!((m[[1, 0]] - expect).abs() < 1e-12);
        let expect_high = 100.0 * (s.high[2] / s.close[1] - 1.0);
        assert!((m[[2, 2]] - expect_high).abs() < 1e-12);
    }

    #[test]
    fn duplicate_symbol_rejected() {
        let s = toy_series("AAA", 3);
        let err = Panel::build(
            &[s.clone(), s],
            &[],
            &EmbeddingTable::new(1),
            LabelSpec::default(),
            IndicatorTransform::Raw,
        );
        assert!(err.is_err());
    }
}
