use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::prices::PriceSeries;
use crate::error::{MsgcaError, Result};

/// Three-way movement class. The index mapping (down 0, flat 1, up 2) is
/// used everywhere tensors or confusion matrices are indexed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Down,
    Flat,
    Up,
}

impl Trend {
    pub const ALL: [Trend; 3] = [Trend::Down, Trend::Flat, Trend::Up];

    pub fn index(self) -> usize {
        match self {
            Trend::Down => 0,
            Trend::Flat => 1,
            Trend::Up => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Trend> {
        Trend::ALL.get(i).copied()
    }

    /// Signed code used in reports: -1, 0, 1.
    pub fn code(self) -> i8 {
        self.index() as i8 - 1
    }

    pub fn from_code(c: i8) -> Option<Trend> {
        match c {
            -1 => Some(Trend::Down),
            0 => Some(Trend::Flat),
            1 => Some(Trend::Up),
            _ => None,
        }
    }
}

/// Return band for the flat class: `lower < r < upper` is flat, the bounds
/// themselves belong to down/up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub lower: f64,
    pub upper: f64,
}

/// Absorbs representation error of returns computed from decimal prices, so
/// that e.g. 100.5 / 100 - 1 still lands on a 0.5% boundary.
const BOUNDARY_TOL: f64 = 1e-12;

impl LabelSpec {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let spec = LabelSpec { lower, upper };
        spec.validate()?;
        Ok(spec)
    }

    pub fn symmetric(band: f64) -> Result<Self> {
        Self::new(-band, band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < 0.0 && 0.0 < self.upper) {
            return Err(MsgcaError::Config(format!(
                "label thresholds must satisfy lower < 0 < upper, got ({}, {})",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    /// Named dataset presets.
    pub fn preset(name: &str) -> Option<Self> {
        let band = match name.to_ascii_lowercase().as_str() {
            "innostock" => 0.01,
            "bigdata22" => 0.005,
            "acl18" => 0.004,
            "cikm18" => 0.003,
            _ => return None,
        };
        Some(LabelSpec {
            lower: -band,
            upper: band,
        })
    }

    pub fn classify(&self, r: f64) -> Trend {
        if r >= self.upper - BOUNDARY_TOL {
            Trend::Up
        } else if r <= self.lower + BOUNDARY_TOL {
            Trend::Down
        } else {
            Trend::Flat
        }
    }
}

impl Default for LabelSpec {
    fn default() -> Self {
        LabelSpec {
            lower: -0.01,
            upper: 0.01,
        }
    }
}

/// Labels every date after the first from its close-to-close return.
pub fn compute_labels(series: &PriceSeries, spec: &LabelSpec) -> Vec<(NaiveDate, Trend)> {
    series
        .close
        .windows(2)
        .zip(&series.dates[1.min(series.dates.len())..])
        .map(|(w, &date)| (date, spec.classify(w[1] / w[0] - 1.0)))
        .collect()
}
