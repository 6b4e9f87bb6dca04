use super::graph::{Graph, Var};
use super::params::{ModelParams, ParamVars};
use crate::error::{MsgcaError, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |analytic|)
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub entries_checked: usize,
}

/// Checks the gradient of the scalar built by `f` with respect to every entry
/// of every parameter in `params`, using central differences with step `eps`.
///
/// `f` must be deterministic; it is invoked once with trainable bindings and
/// twice per parameter entry with frozen ones.
pub fn grad_check<F>(params: &mut ModelParams, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamVars) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(MsgcaError::Config(format!(
            "grad_check step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let mut graph = Graph::new();
    let vars = params.bind(&mut graph, true);
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    params.collect_grads(&graph, &vars);
    let analytic: Vec<_> = params
        .iter()
        .map(|p| p.grad().expect("collected above").clone())
        .collect();

    let mut eval = |params: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        entries_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for (name, grad) in names.iter().zip(&analytic) {
        let (rows, cols) = grad.dim();
        for r in 0..rows {
            for c in 0..cols {
                let original = params.get(name).expect("name listed").values()[[r, c]];
                params.get_mut(name).expect("name listed").values_mut()[(r, c)] = original + eps;
                let plus = eval(params)?;
                params.get_mut(name).expect("name listed").values_mut()[(r, c)] = original - eps;
                let minus = eval(params)?;
                params.get_mut(name).expect("name listed").values_mut()[(r, c)] = original;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(MsgcaError::NonFinite(format!(
                        "objective is not finite when perturbing `{name}`[{r},{c}]"
                    )));
                }
                let numeric = (plus - minus) / (2.0 * eps);
                let a = grad[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(1.0);
                report.entries_checked += 1;
                if err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst_param = name.clone();
                    report.worst_index = (r, c);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_passes() {
        let mut p = ModelParams::new();
        p.insert("w", array![[1.0, 2.0]]).unwrap();
        let report = grad_check(&mut p, 1e-5, |g, v| {
            let sq = g.mul(v["w"], v["w"])?;
            let m = g.mean(sq);
            Ok(g.scale(m, 2.0))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let mut p = ModelParams::new();
        p.insert("w", array![[1.0]]).unwrap();
        assert!(grad_check(&mut p, 1e-2, |g, v| Ok(g.mean(v["w"]))).is_err());
    }

    #[test]
    fn reports_non_finite_objective() {
        let mut p = ModelParams::new();
        p.insert("w", array![[0.0]]).unwrap();
        let err = grad_check(&mut p, 1e-5, |g, v| {
            let w = g.value(v["w"])[[0, 0]];
            let c = g.constant(array![[if w > 0.0 { f64::NAN } else { 0.0 }]]);
            let s = g.add(v["w"], c)?;
            Ok(g.mean(s))
        })
        .unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }
}
