//! Gated cross-attention fusion.
//!
//! A stage attends from a query modality into a key/value modality (the
//! "unstable" features) and then gates the result element-wise with a
//! sigmoid driven by a guide modality (the "stable" features). Inputs are
//! windows of `t` rows stacked along the row axis; attention never crosses
//! window boundaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, ModelParams, ParamVars, Rows, Var};
use crate::error::{MsgcaError, Result};

/// Which half of the fusion block is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Cross-attention followed by the gate.
    #[default]
    Gated,
    /// Gate over a linear map of the key/value modality, no attention.
    Glu,
    /// Cross-attention with the gate fixed open.
    AttentionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Attention heads `M`; each head is `d` wide, so `d' = M * d`.
    pub heads: usize,
    /// Blocks stacked per stage.
    pub layers: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 2,
            layers: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.layers == 0 {
            return Err(MsgcaError::Config(
                "fusion needs at least one head and one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Adds the weights of one stage under `prefix` (e.g. `fusion.s1`).
pub fn init_fusion_stage<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    rng: &mut R,
    d: usize,
    cfg: &FusionConfig,
    mode: FusionMode,
) -> Result<()> {
    cfg.validate()?;
    let dp = cfg.heads * d;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        if mode == FusionMode::Glu {
            params.insert_weight(&format!("{p}.w_glu"), rng, d, dp)?;
        } else {
            for w in ["wq", "wk", "wv"] {
                params.insert_weight(&format!("{p}.{w}"), rng, d, dp)?;
            }
        }
        params.insert_weight(&format!("{p}.w_a"), rng, dp, d)?;
        params.insert_bias(&format!("{p}.b_a"), d)?;
        if mode != FusionMode::AttentionOnly {
            params.insert_weight(&format!("{p}.w_b"), rng, d, d)?;
            params.insert_bias(&format!("{p}.b_b"), d)?;
        }
    }
    Ok(())
}

fn check_pair(g: &Graph, a: Rows, b: Rows, t: usize, what: &str) -> Result<()> {
    a.check_bias(g)?;
    b.check_bias(g)?;
    let (sa, sb) = (a.shape(g), b.shape(g));
    if sa != sb || t == 0 || sa.0 % t != 0 {
        return Err(MsgcaError::Shape(format!(
            "{what}: inputs {}x{} and {}x{} with window {t}",
            sa.0, sa.1, sb.0, sb.1
        )));
    }
    Ok(())
}

/// Multi-head cross-attention over windows of `t` rows. Head score matrices
/// `Q_m K_m^T / sqrt(d')` are averaged, one row softmax is taken, and the
/// shared attention matrix is applied to every head's values; the head
/// outputs are concatenated. Returns `(unstable, attention)`.
pub fn cross_attention(
    g: &mut Graph,
    p: &ParamVars,
    layer_prefix: &str,
    query: impl Into<Rows>,
    kv: impl Into<Rows>,
    t: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let (query, kv) = (query.into(), kv.into());
    check_pair(g, query, kv, t, "cross_attention")?;
    let wq = p[format!("{layer_prefix}.wq").as_str()];
    let dp = g.shape(wq).1;
    let q = query.project(g, wq)?;
    let k = kv.project(g, p[format!("{layer_prefix}.wk").as_str()])?;
    let v = kv.project(g, p[format!("{layer_prefix}.wv").as_str()])?;
    // sum over heads of Q_m K_m^T is Q K^T when heads are column blocks
    let scores = g.block_matmul_nt(q, k, t)?;
    let scores = g.scale(scores, 1.0 / (heads as f64 * (dp as f64).sqrt()));
    let attn = g.softmax_rows(scores);
    Ok((g.block_matmul(attn, v, t)?, attn))
}

/// `(unstable W_a + b_a) * sigmoid(guide W_b + b_b)`. Returns
/// `(stable, gate)`.
pub fn gated_selection(
    g: &mut Graph,
    p: &ParamVars,
    layer_prefix: &str,
    unstable: Var,
    guide: impl Into<Rows>,
) -> Result<(Var, Var)> {
    let h_a = project_unstable(g, p, layer_prefix, unstable)?;
    let pre = guide
        .into()
        .project(g, p[format!("{layer_prefix}.w_b").as_str()])?;
    let pre = g.add(pre, p[format!("{layer_prefix}.b_b").as_str()])?;
    let gate = g.sigmoid(pre);
    Ok((g.mul(h_a, gate)?, gate))
}

fn project_unstable(
    g: &mut Graph,
    p: &ParamVars,
    layer_prefix: &str,
    unstable: Var,
) -> Result<Var> {
    let h = g.matmul(unstable, p[format!("{layer_prefix}.w_a").as_str()])?;
    g.add(h, p[format!("{layer_prefix}.b_a").as_str()])
}

/// Tensors of the last block of a stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// `rows x d'` before the gate.
    pub unstable: Var,
    /// `rows x d` after the gate.
    pub stable: Var,
    pub gate: Option<Var>,
    pub attention: Option<Var>,
}

/// One fusion stage. The first block uses `query` and `guide`; stacked
/// blocks take the previous stable output as both.
#[allow(clippy::too_many_arguments)]
pub fn fusion_stage(
    g: &mut Graph,
    p: &ParamVars,
    prefix: &str,
    query: impl Into<Rows>,
    kv: impl Into<Rows>,
    guide: impl Into<Rows>,
    t: usize,
    cfg: &FusionConfig,
    mode: FusionMode,
) -> Result<StageOutput> {
    cfg.validate()?;
    let (query, kv, guide) = (query.into(), kv.into(), guide.into());
    check_pair(g, query, guide, t, "fusion_stage")?;
    let (mut q, mut gd) = (query, guide);
    let mut out = None;
    for l in 0..cfg.layers {
        let lp = format!("{prefix}.l{l}");
        let (unstable, attention) = match mode {
            FusionMode::Glu => {
                check_pair(g, q, kv, t, "fusion_stage")?;
                (kv.project(g, p[format!("{lp}.w_glu").as_str()])?, None)
            }
            _ => {
                let (u, a) = cross_attention(g, p, &lp, q, kv, t, cfg.heads)?;
                (u, Some(a))
            }
        };
        let (stable, gate) = match mode {
            FusionMode::AttentionOnly => (project_unstable(g, p, &lp, unstable)?, None),
            _ => {
                let (s, gt) = gated_selection(g, p, &lp, unstable, gd)?;
                (s, Some(gt))
            }
        };
        out = Some(StageOutput {
            unstable,
            stable,
            gate,
            attention,
        });
        q = stable.into();
        gd = stable.into();
    }
    Ok(out.expect("at least one layer"))
}

/// Both stages of the trimodal chain.
#[derive(Clone, Copy, Debug)]
pub struct FusionDiagnostics {
    pub stage1: StageOutput,
    pub stage2: StageOutput,
}

/// Indicators attend into documents (guided by indicators), then the fused
/// result attends into graph features (guided by itself). Returns
/// `(H_id, H_idg, diagnostics)`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_trimodal(
    g: &mut Graph,
    p: &ParamVars,
    v_i: Var,
    v_d: Var,
    v_g: Var,
    t: usize,
    cfg: &FusionConfig,
    mode: FusionMode,
) -> Result<(Var, Var, FusionDiagnostics)> {
    let stage1 = fusion_stage(g, p, "fusion.s1", v_i, v_d, v_i, t, cfg, mode)?;
    let h_id = stage1.stable;
    let stage2 = fusion_stage(g, p, "fusion.s2", h_id, v_g, h_id, t, cfg, mode)?;
    Ok((h_id, stage2.stable, FusionDiagnostics { stage1, stage2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, mode: FusionMode) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::new();
        let cfg = FusionConfig::default();
        init_fusion_stage(&mut params, "fusion.s1", &mut rng, d, &cfg, mode).unwrap();
        init_fusion_stage(&mut params, "fusion.s2", &mut rng, d, &cfg, mode).unwrap();
        params
    }

    fn input(t: usize, d: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |(i, j)| ((i * d + j) as f64 * 0.71 + seed).sin())
    }

    #[test]
    fn single_step_attention_is_one() {
        let params = setup(3, FusionMode::Gated);
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let q = g.constant(input(1, 3, 0.1));
        let kv = g.constant(input(1, 3, 0.9));
        let (u, a) = cross_attention(&mut g, &pv, "fusion.s1.l0", q, kv, 1, 2).unwrap();
        assert_eq!(g.value(a)[[0, 0]], 1.0);
        let expect = input(1, 3, 0.9).dot(params.get("fusion.s1.l0.wv").unwrap().values());
        for (x, y) in g.value(u).iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_kv_gives_zero_attention_output() {
        let params = setup(2, FusionMode::Gated);
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let q = g.constant(input(4, 2, 0.3));
        let kv = g.constant(Array2::zeros((4, 2)));
        let (u, _) = cross_attention(&mut g, &pv, "fusion.s1.l0", q, kv, 4, 2).unwrap();
        assert!(g.value(u).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn neutral_gate_halves() {
        let params = setup(2, FusionMode::Gated);
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let u = g.constant(input(3, 4, 0.2));
        let guide = g.constant(Array2::zeros((3, 2)));
        let (s, gate) = gated_selection(&mut g, &pv, "fusion.s1.l0", u, guide).unwrap();
        assert!(g.value(gate).iter().all(|&x| x == 0.5));
        let h_a = input(3, 4, 0.2).dot(params.get("fusion.s1.l0.w_a").unwrap().values());
        for (x, y) in g.value(s).iter().zip(h_a.iter()) {
            assert!((x - y / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn chain_is_not_commutative_in_modalities() {
        let params = setup(3, FusionMode::Gated);
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let (a, b, c) = (
            g.constant(input(4, 3, 0.1)),
            g.constant(input(4, 3, 1.7)),
            g.constant(input(4, 3, 2.9)),
        );
        let cfg = FusionConfig::default();
        let (_, x, _) = fuse_trimodal(&mut g, &pv, a, b, c, 4, &cfg, FusionMode::Gated).unwrap();
        let (_, y, _) = fuse_trimodal(&mut g, &pv, a, c, b, 4, &cfg, FusionMode::Gated).unwrap();
        let diff: f64 = (g.value(x) - g.value(y)).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn variants_produce_t_by_d() {
        for mode in [
            FusionMode::Gated,
            FusionMode::Glu,
            FusionMode::AttentionOnly,
        ] {
            let params = setup(3, mode);
            let mut g = Graph::new();
            let pv = params.bind(&mut g, false);
            let a = g.constant(input(10, 3, 0.4));
            let b = g.constant(input(10, 3, 0.8));
            let (h1, h2, diag) =
                fuse_trimodal(&mut g, &pv, a, b, b, 5, &FusionConfig::default(), mode).unwrap();
            assert_eq!(g.shape(h1), (10, 3));
            assert_eq!(g.shape(h2), (10, 3));
            assert_eq!(g.shape(diag.stage1.unstable), (10, 6));
            assert_eq!(
                diag.stage1.gate.is_some(),
                mode != FusionMode::AttentionOnly
            );
        }
    }

    #[test]
    fn stacked_layers_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ModelParams::new();
        let cfg = FusionConfig {
            heads: 1,
            layers: 3,
        };
        init_fusion_stage(&mut params, "x", &mut rng, 2, &cfg, FusionMode::Gated).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let a = g.constant(input(6, 2, 0.4));
        let b = g.constant(input(6, 2, 0.8));
        let out = fusion_stage(&mut g, &pv, "x", a, b, a, 3, &cfg, FusionMode::Gated).unwrap();
        assert_eq!(g.shape(out.stable), (6, 2));
        assert!(fusion_stage(&mut g, &pv, "x", a, b, a, 4, &cfg, FusionMode::Gated).is_err());
    }
}
