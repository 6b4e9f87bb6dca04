//! Prediction head: shrink the time axis, then the feature axis, to three
//! trend logits.

use rand::Rng;

use crate::compute::{Graph, ModelParams, ParamVars, Var};
use crate::error::{MsgcaError, Result};

/// Time-axis widths `t -> ceil(t/2) -> ceil(t/4) -> 1`.
pub fn time_widths(t: usize) -> [usize; 4] {
    [t, t.div_ceil(2).max(1), t.div_ceil(4).max(1), 1]
}

/// Feature-axis widths `2d -> d -> ceil(d/2) -> 3`.
pub fn feature_widths(d: usize) -> [usize; 4] {
    [2 * d, d, d.div_ceil(2).max(1), 3]
}

pub fn init_predictor<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    t: usize,
    d: usize,
) -> Result<()> {
    if t == 0 || d == 0 {
        return Err(MsgcaError::Config(
            "predictor needs positive window and width".into(),
        ));
    }
    if t < 4 {
        log::warn!("window {t} is shorter than 4; time layer widths clamp at 1");
    }
    for (prefix, widths) in [("pred.t", time_widths(t)), ("pred.f", feature_widths(d))] {
        for i in 0..3 {
            let name = format!("{prefix}{}.w", i + 1);
            params.insert_weight(&name, rng, widths[i], widths[i + 1])?;
            // Later time layers see ReLU outputs only; a unit with all-negative
            // weights there never fires, and the last one is a single unit.
            if prefix == "pred.t" && i > 0 {
                if let Some(w) = params.get_mut(&name) {
                    w.values_mut().mapv_inplace(f64::abs);
                }
            }
            params.insert_bias(&format!("{prefix}{}.b", i + 1), widths[i + 1])?;
        }
    }
    Ok(())
}

fn dense(g: &mut Graph, p: &ParamVars, name: &str, x: Var, relu: bool) -> Result<Var> {
    let z = g.matmul(x, p[format!("{name}.w").as_str()])?;
    let z = g.add(z, p[format!("{name}.b").as_str()])?;
    Ok(if relu { g.relu(z) } else { z })
}

/// Collapses each `t x d` window of `x` (windows stacked on rows) to a
/// `d` vector: transpose to `d x t`, three ReLU layers down to `d x 1`.
/// Returns `windows x d`.
pub fn aggregate_time(g: &mut Graph, p: &ParamVars, x: Var, t: usize) -> Result<Var> {
    let (rows, d) = g.shape(x);
    if t == 0 || rows % t != 0 {
        return Err(MsgcaError::Shape(format!(
            "aggregate_time: {rows} rows with window {t}"
        )));
    }
    let mut h = g.block_transpose(x, t)?;
    for i in 1..=3 {
        h = dense(g, p, &format!("pred.t{i}"), h, true)?;
    }
    g.reshape(h, rows / t, d)
}

/// Three layers `2d -> d -> ceil(d/2) -> 3`, ReLU after the first two.
pub fn aggregate_features(g: &mut Graph, p: &ParamVars, h: Var) -> Result<Var> {
    let h = dense(g, p, "pred.f1", h, true)?;
    let h = dense(g, p, "pred.f2", h, true)?;
    dense(g, p, "pred.f3", h, false)
}

/// Logits from the fused features and the indicator bypass, both shaped
/// `(windows * t) x d`. The time layers are shared by the two branches.
pub fn predict_logits(
    g: &mut Graph,
    p: &ParamVars,
    fused: Var,
    bypass: Var,
    t: usize,
) -> Result<Var> {
    let a = aggregate_time(g, p, fused, t)?;
    let b = aggregate_time(g, p, bypass, t)?;
    let h = g.concat_cols(&[a, b])?;
    aggregate_features(g, p, h)
}

/// Batch-mean softmax cross-entropy.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn width_schedules() {
        assert_eq!(time_widths(20), [20, 10, 5, 1]);
        assert_eq!(time_widths(5), [5, 3, 2, 1]);
        assert_eq!(time_widths(1), [1, 1, 1, 1]);
        assert_eq!(feature_widths(64), [128, 64, 32, 3]);
        assert_eq!(feature_widths(3), [6, 3, 2, 3]);
    }

    #[test]
    fn swapping_inputs_swaps_halves() {
        let mut params = ModelParams::new();
        init_predictor(&mut params, &mut ChaCha8Rng::seed_from_u64(3), 4, 2).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let a = g.constant(Array2::from_shape_fn((4, 2), |(i, j)| {
            (i + 2 * j) as f64 * 0.3
        }));
        let b = g.constant(Array2::from_shape_fn((4, 2), |(i, j)| {
            (i as f64 - j as f64) * 0.5
        }));
        let ta = aggregate_time(&mut g, &pv, a, 4).unwrap();
        let tb = aggregate_time(&mut g, &pv, b, 4).unwrap();
        let ab = g.concat_cols(&[ta, tb]).unwrap();
        let ba = g.concat_cols(&[tb, ta]).unwrap();
        let (ab, ba) = (g.value(ab).clone(), g.value(ba).clone());
        assert_eq!(
            ab.slice(ndarray::s![.., ..2]),
            ba.slice(ndarray::s![.., 2..])
        );
    }

    #[test]
    fn zero_input_zero_logits() {
        let mut params = ModelParams::new();
        init_predictor(&mut params, &mut ChaCha8Rng::seed_from_u64(3), 6, 3).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let z = g.constant(Array2::zeros((12, 3)));
        let logits = predict_logits(&mut g, &pv, z, z, 6).unwrap();
        assert_eq!(g.shape(logits), (2, 3));
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_loss_is_ln3() {
        let mut g = Graph::new();
        let l = g.constant(array![[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]);
        let loss = cross_entropy_loss(&mut g, l, &[0, 2]).unwrap();
        assert!((g.scalar(loss) - 3f64.ln()).abs() < 1e-12);
        let l = g.constant(array![[10.0, -10.0, -10.0]]);
        let loss = cross_entropy_loss(&mut g, l, &[0]).unwrap();
        assert!(g.scalar(loss) < 1e-4);
    }
}
