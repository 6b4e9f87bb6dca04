use ndarray::{Array1, Array2, Axis};

use crate::compute::Matrix;
use crate::error::{MsgcaError, Result};

/// One-dimensional principal-component projection.
#[derive(Clone, Debug)]
pub struct Projection1d {
    /// Centered rows projected on the loading, one value per row.
    pub series: Vec<f64>,
    /// Unit top eigenvector of the covariance; largest-magnitude entry
    /// positive. All zero when the covariance vanishes.
    pub loading: Vec<f64>,
    pub eigenvalue: f64,
    /// Top eigenvalue over the covariance trace.
    pub explained_ratio: f64,
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
    n
}

/// Top eigenpair of a symmetric positive semi-definite matrix. Repeated
/// squaring separates the leading eigenvalue quickly; power iterations on
/// the original matrix then polish the vector.
pub fn top_eigenpair(cov: &Matrix) -> (f64, Array1<f64>) {
    let d = cov.nrows();
    let scale = cov.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if d == 0 || scale == 0.0 {
        return (0.0, Array1::zeros(d));
    }
    let mut b = cov / scale;
    for _ in 0..40 {
        let next = b.dot(&b);
        let n = next.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        if n == 0.0 || !n.is_finite() {
            break;
        }
        b = next / n;
    }
    let col = (0..d)
        .max_by(|&i, &j| {
            let ni = b.column(i).dot(&b.column(i));
            let nj = b.column(j).dot(&b.column(j));
            ni.total_cmp(&nj)
        })
        .expect("d > 0");
    let mut v = b.column(col).to_owned();
    if normalize(&mut v) == 0.0 {
        v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    }
    for _ in 0..50 {
        let mut w = cov.dot(&v);
        if normalize(&mut w) == 0.0 {
            break;
        }
        let delta = (&w - &v).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        v = w;
        if delta < 1e-15 {
            break;
        }
    }
    let lambda = v.dot(&cov.dot(&v));
    (lambda, v)
}

/// Projects `features` (`t x d`, `t >= 2`) on their first principal axis.
pub fn pca_project_1d(features: &Matrix) -> Result<Projection1d> {
    let (t, d) = features.dim();
    if t < 2 {
        return Err(MsgcaError::Shape(format!(
            "PCA needs at least 2 rows, got {t}"
        )));
    }
    let mean = features.mean_axis(Axis(0)).expect("t >= 2");
    let centered: Array2<f64> = features - &mean;
    let cov = centered.t().dot(&centered) / (t as f64 - 1.0);
    let trace: f64 = cov.diag().sum();
    let (lambda, mut v) = top_eigenpair(&cov);
    if lambda <= 0.0 || trace <= 0.0 {
        log::warn!("PCA input has zero covariance; projection is all zeros");
        return Ok(Projection1d {
            series: vec![0.0; t],
            loading: vec![0.0; d],
            eigenvalue: 0.0,
            explained_ratio: 0.0,
        });
    }
    let lead = (0..d)
        .max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs()))
        .expect("d > 0");
    if v[lead] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    Ok(Projection1d {
        series: centered.dot(&v).to_vec(),
        loading: v.to_vec(),
        eigenvalue: lambda,
        explained_ratio: lambda / trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_series_follows_u() {
        let u = [1.0, -2.0, 0.5, 3.0, -1.5];
        let w = [0.3, -0.4, 0.8];
        let x = Array2::from_shape_fn((5, 3), |(i, j)| u[i] * w[j]);
        let p = pca_project_1d(&x).unwrap();
        let um = u.iter().sum::<f64>() / 5.0;
        let uc: Vec<f64> = u.iter().map(|a| a - um).collect();
        let dot: f64 = uc.iter().zip(&p.series).map(|(a, b)| a * b).sum();
        let n1 = uc.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n2 = p.series.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((dot / (n1 * n2)).abs() > 1.0 - 1e-8);
        assert!((p.explained_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_give_zero_series() {
        let p = pca_project_1d(&Array2::from_elem((4, 2), 3.0)).unwrap();
        assert!(p.series.iter().all(|&x| x == 0.0));
        assert!(pca_project_1d(&Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn sign_convention() {
        let x = ndarray::array![[0.0, 1.0], [0.0, -1.0], [0.0, 2.0]];
        let p = pca_project_1d(&x).unwrap();
        assert!(p.loading[1] > 0.0);
    }
}
