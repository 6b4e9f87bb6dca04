use serde::{Deserialize, Serialize};

use crate::error::{MsgcaError, Result};

/// Square count matrix; rows are true classes, columns predicted ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(MsgcaError::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_predictions(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(MsgcaError::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(MsgcaError::Data(format!(
                    "class index out of range for {k} classes"
                )));
            }
            cm.add(t, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|i| (0..self.k).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.k.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }
}

/// Share of correct predictions. Undefined (error) on an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(MsgcaError::Data(
            "accuracy of an empty confusion matrix is undefined".into(),
        ));
    }
    Ok(cm.trace() as f64 / n as f64)
}

/// Multiclass Matthews correlation
/// `(c s - sum p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2))`, 0 when a
/// factor under the root vanishes. The integer parts are computed exactly.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as i128;
    let c = cm.trace() as i128;
    let p: Vec<i128> = cm.col_sums().into_iter().map(i128::from).collect();
    let t: Vec<i128> = cm.row_sums().into_iter().map(i128::from).collect();
    let num = c * s - p.iter().zip(&t).map(|(a, b)| a * b).sum::<i128>();
    let fp = s * s - p.iter().map(|a| a * a).sum::<i128>();
    let ft = s * s - t.iter().map(|a| a * a).sum::<i128>();
    if fp == 0 || ft == 0 {
        return 0.0;
    }
    num as f64 / ((fp * ft) as f64).sqrt()
}

/// Largest class prior plus three binomial standard errors.
pub fn chance_band(label_counts: &[u64]) -> f64 {
    let n: u64 = label_counts.iter().sum();
    if n == 0 {
        return 1.0;
    }
    let p = *label_counts.iter().max().expect("nonempty") as f64 / n as f64;
    p + 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Mean and unbiased variance (0 for fewer than two values).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
