//! Metrics, multi-seed variant reports, and the fusion stability diagnostic.

mod metrics;
mod pca;

use std::io::Write;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, chance_band, mcc, mean_var, ConfusionMatrix};
pub use pca::{pca_project_1d, top_eigenpair, Projection1d};

use crate::compute::Graph;
use crate::data::{Dataset, WindowSample};
use crate::error::{MsgcaError, Result};
use crate::model::{forward, Batch, Model, Variant};
use crate::training::{confusion, train_model, TrainConfig};

/// Test metrics of one variant over several seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub test_acc: Vec<f64>,
    pub test_mcc: Vec<f64>,
    pub acc_mean: f64,
    pub acc_var: f64,
    pub mcc_mean: f64,
    pub mcc_var: f64,
    pub seconds_per_epoch: f64,
    pub peak_mem_bytes: u64,
    /// Accuracy a majority-class guesser stays under with high probability.
    pub chance_band: f64,
}

impl VariantReport {
    pub fn acc_above_chance(&self) -> bool {
        self.acc_mean > self.chance_band
    }
}

/// Rows of an ablation run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub variants: Vec<VariantReport>,
}

pub const REPORT_HEADER: &str =
    "variant,seeds,acc_mean,acc_var,mcc_mean,mcc_var,seconds_per_epoch,peak_mem_bytes,chance_band";

impl EvalReport {
    pub fn get(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| MsgcaError::io("report.csv", e);
        writeln!(w, "{REPORT_HEADER}").map_err(io)?;
        for r in &self.variants {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.6},{},{}",
                r.variant,
                r.seeds.len(),
                r.acc_mean,
                r.acc_var,
                r.mcc_mean,
                r.mcc_var,
                r.seconds_per_epoch,
                r.peak_mem_bytes,
                r.chance_band
            )
            .map_err(io)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MsgcaError::Format(e.to_string()))
    }
}

/// Trains `variant` once per seed and reports test ACC and MCC.
pub fn run_variant(
    variant: Variant,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<VariantReport> {
    if seeds.is_empty() {
        return Err(MsgcaError::Config(
            "run_variant needs at least one seed".into(),
        ));
    }
    let test = &dataset.split.test;
    if test.is_empty() {
        return Err(MsgcaError::Data("empty test split".into()));
    }
    let mut acc = Vec::new();
    let mut m = Vec::new();
    let mut secs = Vec::new();
    let mut peak = 0u64;
    for &seed in seeds {
        let mut c = cfg.clone();
        c.model.variant = variant;
        c.seed = seed;
        let out = train_model(dataset, &c)?;
        let cm = confusion(&out.model.params, &c.model, dataset, test, c.eval_batch)?;
        acc.push(accuracy(&cm)?);
        m.push(mcc(&cm));
        for r in out.history() {
            secs.push(r.seconds);
            peak = peak.max(r.peak_mem_bytes);
        }
        log::info!(
            "{variant} seed {seed}: test acc {:.4} mcc {:.4}",
            acc.last().unwrap(),
            m.last().unwrap()
        );
    }
    let mut counts = [0u64; 3];
    for s in test {
        counts[s.label.index()] += 1;
    }
    let (acc_mean, acc_var) = mean_var(&acc);
    let (mcc_mean, mcc_var) = mean_var(&m);
    Ok(VariantReport {
        variant,
        seeds: seeds.to_vec(),
        test_acc: acc,
        test_mcc: m,
        acc_mean,
        acc_var,
        mcc_mean,
        mcc_var,
        seconds_per_epoch: if secs.is_empty() {
            0.0
        } else {
            secs.iter().sum::<f64>() / secs.len() as f64
        },
        peak_mem_bytes: peak,
        chance_band: chance_band(&counts),
    })
}

/// Mean squared first difference of the z-scored series; 0 for a constant
/// or too-short series.
pub fn smoothness(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let sd = (series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return 0.0;
    }
    series
        .windows(2)
        .map(|w| ((w[1] - w[0]) / sd).powi(2))
        .sum::<f64>()
        / (n - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Unstable,
    Stable,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Unstable => "unstable",
            FeatureKind::Stable => "stable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub date: NaiveDate,
    pub close: f64,
    pub stage: u8,
    pub kind: FeatureKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilitySeries {
    pub stage: u8,
    pub kind: FeatureKind,
    /// PCA-1D values, one per window.
    pub series: Vec<f64>,
    pub smoothness: f64,
    pub explained_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub symbol: String,
    pub dates: Vec<NaiveDate>,
    pub close: Vec<f64>,
    pub series: Vec<StabilitySeries>,
}

impl StabilityReport {
    pub fn smoothness(&self, stage: u8, kind: FeatureKind) -> Option<f64> {
        self.series
            .iter()
            .find(|s| s.stage == stage && s.kind == kind)
            .map(|s| s.smoothness)
    }

    /// Whether the stable series of `stage` is at least as smooth as the
    /// unstable one.
    pub fn stable_is_smoother(&self, stage: u8) -> Option<bool> {
        Some(
            self.smoothness(stage, FeatureKind::Stable)?
                <= self.smoothness(stage, FeatureKind::Unstable)?,
        )
    }

    pub fn rows(&self) -> Vec<StabilityRow> {
        let mut out = Vec::new();
        for (i, (&date, &close)) in self.dates.iter().zip(&self.close).enumerate() {
            for s in &self.series {
                out.push(StabilityRow {
                    date,
                    close,
                    stage: s.stage,
                    kind: s.kind,
                    value: s.series[i],
                });
            }
        }
        out
    }

    /// CSV with columns `date,close,stage,kind,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| MsgcaError::io("stability.csv", e);
        writeln!(w, "date,close,stage,kind,value").map_err(io)?;
        for r in self.rows() {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.date,
                r.close,
                r.stage,
                r.kind.name(),
                r.value
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

/// Projects the fused features at the last step of each window of one
/// stock on their first principal axis, per stage and kind, and scores the
/// smoothness of each projected series.
pub fn stability_report(
    model: &Model,
    dataset: &Dataset,
    samples: &[WindowSample],
    chunk: usize,
) -> Result<StabilityReport> {
    let Some(first) = samples.first() else {
        return Err(MsgcaError::Data(
            "stability report needs at least one window".into(),
        ));
    };
    if samples.iter().any(|s| s.stock != first.stock) {
        return Err(MsgcaError::Data(
            "stability report windows must come from one stock".into(),
        ));
    }
    let cfg = &model.config;
    let t = cfg.ws;
    let panel = &dataset.panel;
    let frame = &panel.stocks[first.stock];
    let keys: Vec<(u8, FeatureKind)> =
        [(1, cfg.variant.uses_docs()), (2, cfg.variant.uses_graph())]
            .into_iter()
            .filter(|&(_, on)| on)
            .flat_map(|(s, _)| [(s, FeatureKind::Unstable), (s, FeatureKind::Stable)])
            .collect();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); keys.len()];
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&WindowSample> = part.iter().collect();
        let batch = Batch::build(panel, &dataset.graph, &refs, cfg)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let out = forward(&mut g, &p, cfg, &batch)?;
        for (k, &(stage, kind)) in keys.iter().enumerate() {
            let st = if stage == 1 { out.stage1 } else { out.stage2 }.expect("stage present");
            let v = g.value(match kind {
                FeatureKind::Unstable => st.unstable,
                FeatureKind::Stable => st.stable,
            });
            for i in 0..part.len() {
                rows[k].push(v.row(i * t + t - 1).to_vec());
            }
        }
    }
    let mut series = Vec::with_capacity(keys.len());
    for (k, &(stage, kind)) in keys.iter().enumerate() {
        let width = rows[k].first().map_or(0, Vec::len);
        let m =
            Array2::from_shape_vec((rows[k].len(), width), rows[k].concat()).expect("uniform rows");
        let (s, ratio) = if m.nrows() >= 2 {
            let p = pca_project_1d(&m)?;
            (p.series, p.explained_ratio)
        } else {
            (vec![0.0; m.nrows()], 0.0)
        };
        series.push(StabilitySeries {
            stage,
            kind,
            smoothness: smoothness(&s),
            series: s,
            explained_ratio: ratio,
        });
    }
    let last_rows: Vec<usize> = samples.iter().map(|s| s.start + s.ws - 1).collect();
    Ok(StabilityReport {
        symbol: first.symbol.clone(),
        dates: last_rows.iter().map(|&r| frame.dates[r]).collect(),
        close: last_rows.iter().map(|&r| frame.close[r]).collect(),
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, LabelSpec, SplitRatios, SynthConfig};
    use crate::ModelConfig;

    #[test]
    fn constant_series_is_perfectly_smooth() {
        assert_eq!(smoothness(&[2.0; 6]), 0.0);
        assert!((smoothness(&[1.0, -1.0, 1.0, -1.0]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn report_has_one_row_per_window_and_series() {
        let synth = synth_dataset(&SynthConfig {
            n_stocks: 3,
            n_days: 40,
            dim: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let ds =
            Dataset::from_synth(&synth, LabelSpec::default(), 4, SplitRatios::default()).unwrap();
        let model = Model::new(
            ModelConfig {
                d: 3,
                ws: 4,
                doc_dim: 3,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let windows: Vec<WindowSample> = ds
            .split
            .test
            .iter()
            .filter(|s| s.stock == 1)
            .cloned()
            .collect();
        let rep = stability_report(&model, &ds, &windows, 3).unwrap();
        assert_eq!(rep.dates.len(), windows.len());
        assert_eq!(rep.series.len(), 4);
        assert_eq!(rep.rows().len(), 4 * windows.len());
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            1 + 4 * windows.len()
        );
    }
}
