//! Synthetic trimodal market with a planted, modality-specific signal.
//!
//! Each stock-day carries a latent class that sets the next day's return.
//! The class comes from one of two sources:
//!
//! * a persistent momentum regime, shared within a sector for coupled
//!   stocks, which is only visible through past prices (and, via the graph,
//!   through sector peers' prices);
//! * on news days, a fresh shock whose direction is only visible in that
//!   day's documents.
//!
//! Documents on news days embed a class prototype scaled by `doc_signal`
//! plus unit Gaussian noise; a `conflict_rate` share of them show a wrong
//! class. Documents on other days are pure noise. A `doc_missing_rate` share
//! of days has no documents at all.

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::documents::{write_documents, DocumentDay, EmbeddingTable};
use super::graph::RelationalGraph;
use super::labels::Trend;
use super::prices::{write_prices, PriceSeries};
use crate::error::{MsgcaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_stocks: usize,
    pub n_days: usize,
    pub dim: usize,
    pub doc_signal: f64,
    pub doc_missing_rate: f64,
    pub conflict_rate: f64,
    pub n_sectors: usize,
    pub seed: u64,
    /// Share of stock-days whose next move is set by a news shock.
    pub news_share: f64,
    /// Daily probability that a momentum regime continues.
    pub regime_persistence: f64,
    /// Share of stocks that follow their sector's regime.
    pub sector_coupling: f64,
    /// Mean absolute return of an up or down day.
    pub trend_size: f64,
    /// Standard deviation of the daily return noise.
    pub return_noise: f64,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stocks: 12,
            n_days: 120,
            dim: 32,
            doc_signal: 1.0,
            doc_missing_rate: 0.3,
            conflict_rate: 0.2,
            n_sectors: 3,
            seed: 7,
            news_share: 0.4,
            regime_persistence: 0.95,
            sector_coupling: 0.5,
            trend_size: 0.02,
            return_noise: 0.004,
            start_date: NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("doc_missing_rate", self.doc_missing_rate),
            ("conflict_rate", self.conflict_rate),
            ("news_share", self.news_share),
            ("regime_persistence", self.regime_persistence),
            ("sector_coupling", self.sector_coupling),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MsgcaError::Config(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.n_stocks == 0 || self.n_days < 2 || self.dim == 0 || self.n_sectors == 0 {
            return Err(MsgcaError::Config(
                "synthetic dataset needs stocks, at least 2 days, a positive dim and sectors"
                    .into(),
            ));
        }
        if !(self.doc_signal >= 0.0 && self.trend_size > 0.0 && self.return_noise >= 0.0) {
            return Err(MsgcaError::Config(
                "signal and return scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub prices: Vec<PriceSeries>,
    pub documents: Vec<DocumentDay>,
    pub embeddings: EmbeddingTable,
    pub graph_edges: Vec<(String, String, String)>,
    /// Sector index per stock.
    pub sectors: Vec<usize>,
    /// Latent class per stock and day; day `t` drives the return into `t + 1`.
    pub latent: Vec<Vec<Trend>>,
    /// Whether the latent class of a stock-day came from a news shock.
    pub news_day: Vec<Vec<bool>>,
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

fn other_class<R: Rng>(rng: &mut R, c: usize) -> usize {
    (c + rng.gen_range(1..3)) % 3
}

fn step_regime<R: Rng>(rng: &mut R, cur: usize, persistence: f64) -> usize {
    if rng.gen::<f64>() < persistence {
        cur
    } else {
        other_class(rng, cur)
    }
}

fn symbol(i: usize) -> String {
    format!("S{i:03}")
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dates = business_days(cfg.start_date, cfg.n_days);
    let (n, t_len) = (cfg.n_stocks, cfg.n_days);

    let prototypes: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let sectors: Vec<usize> = (0..n).map(|s| s % cfg.n_sectors).collect();
    let coupled: Vec<bool> = (0..n)
        .map(|_| rng.gen::<f64>() < cfg.sector_coupling)
        .collect();

    let mut sector_regime = vec![vec![0usize; t_len]; cfg.n_sectors];
    for chain in sector_regime.iter_mut() {
        chain[0] = rng.gen_range(0..3);
        for t in 1..t_len {
            chain[t] = step_regime(&mut rng, chain[t - 1], cfg.regime_persistence);
        }
    }

    let mut latent = Vec::with_capacity(n);
    let mut news_day = Vec::with_capacity(n);
    for s in 0..n {
        let mut own = rng.gen_range(0..3);
        let mut classes = Vec::with_capacity(t_len);
        let mut news = Vec::with_capacity(t_len);
        for (t, &shared) in sector_regime[sectors[s]].iter().enumerate().take(t_len) {
            if t > 0 {
                own = step_regime(&mut rng, own, cfg.regime_persistence);
            }
            let regime = if coupled[s] { shared } else { own };
            let is_news = rng.gen::<f64>() < cfg.news_share;
            let shock = rng.gen_range(0..3);
            let c = if is_news { shock } else { regime };
            classes.push(Trend::from_index(c).expect("class < 3"));
            news.push(is_news);
        }
        latent.push(classes);
        news_day.push(news);
    }

    let mut prices = Vec::with_capacity(n);
    let mut documents = Vec::new();
    let mut embeddings = EmbeddingTable::new(cfg.dim);
    for s in 0..n {
        let sym = symbol(s);
        let mut open = Vec::with_capacity(t_len);
        let mut high = Vec::with_capacity(t_len);
        let mut close = Vec::with_capacity(t_len);
        let mut prev = 100.0 * (0.1 * rng.sample::<f64, _>(StandardNormal)).exp();
        for t in 0..t_len {
            let o = prev * (1.0 + 0.002 * rng.sample::<f64, _>(StandardNormal));
            let c = if t == 0 {
                prev
            } else {
                let drift = (latent[s][t - 1].index() as f64 - 1.0) * cfg.trend_size;
                let r = drift + cfg.return_noise * rng.sample::<f64, _>(StandardNormal);
                prev * (1.0 + r).max(0.05)
            };
            let h = o.max(c) * (1.0 + (0.003 * rng.sample::<f64, _>(StandardNormal)).abs());
            open.push(o);
            high.push(h);
            close.push(c);
            prev = c;
        }

        for (t, &date) in dates.iter().enumerate() {
            if rng.gen::<f64>() < cfg.doc_missing_rate {
                continue;
            }
            let n_texts = rng.gen_range(1..=2);
            let shown = if news_day[s][t] {
                let truth = latent[s][t].index();
                Some(if rng.gen::<f64>() < cfg.conflict_rate {
                    other_class(&mut rng, truth)
                } else {
                    truth
                })
            } else {
                None
            };
            let mut pooled = vec![0.0; cfg.dim];
            for _ in 0..n_texts {
                for (k, p) in pooled.iter_mut().enumerate() {
                    let signal = shown.map_or(0.0, |c| cfg.doc_signal * prototypes[c][k]);
                    *p += signal + rng.sample::<f64, _>(StandardNormal);
                }
            }
            for p in pooled.iter_mut() {
                *p /= n_texts as f64;
            }
            documents.push(DocumentDay {
                symbol: sym.clone(),
                date,
                texts: (0..n_texts)
                    .map(|k| format!("{sym} daily report {k} for {date}"))
                    .collect(),
            });
            embeddings.insert(&sym, date, pooled)?;
        }

        prices.push(PriceSeries {
            symbol: sym,
            dates: dates.clone(),
            open,
            high,
            close,
        });
    }

    let graph_edges = (0..n)
        .map(|s| {
            (
                symbol(s),
                "industry".to_string(),
                format!("SECTOR{}", sectors[s]),
            )
        })
        .collect();

    Ok(SynthDataset {
        prices,
        documents,
        embeddings,
        graph_edges,
        sectors,
        latent,
        news_day,
    })
}

impl SynthDataset {
    pub fn symbols(&self) -> Vec<String> {
        self.prices.iter().map(|p| p.symbol.clone()).collect()
    }

    pub fn graph(&self) -> RelationalGraph {
        RelationalGraph::from_edges(&self.symbols(), self.graph_edges.clone())
    }

    /// Writes `prices.csv`, `documents.jsonl`, `embeddings.jsonl`,
    /// `graph.tsv`, and `latent.csv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| MsgcaError::io(dir, e))?;
        let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            let p = dir.join(name);
            Ok(std::io::BufWriter::new(
                std::fs::File::create(&p).map_err(|e| MsgcaError::io(&p, e))?,
            ))
        };
        write_prices(create("prices.csv")?, &self.prices)?;
        write_documents(create("documents.jsonl")?, &self.documents)?;
        let mut w = create("embeddings.jsonl")?;
        self.embeddings.write(&mut w)?;
        w.flush()
            .map_err(|e| MsgcaError::io(dir.join("embeddings.jsonl"), e))?;
        self.graph().write_tsv(create("graph.tsv")?)?;
        let mut w = create("latent.csv")?;
        let io = |e| MsgcaError::io(dir.join("latent.csv"), e);
        writeln!(w, "symbol,date,latent,news").map_err(io)?;
        for (s, p) in self.prices.iter().enumerate() {
            for (t, d) in p.dates.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    p.symbol,
                    d,
                    self.latent[s][t].code(),
                    u8::from(self.news_day[s][t])
                )
                .map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}
