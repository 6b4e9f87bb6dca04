//! Per-modality encoders into the shared `d`-wide latent space.
//!
//! Every encoder works row-wise, so the same call handles one `t x ...`
//! window or many windows stacked along the row axis.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, ModelParams, ParamVars, Rows, Var};
use crate::error::{MsgcaError, Result};

fn require_cols(g: &Graph, v: Var, cols: usize, what: &str) -> Result<()> {
    let s = g.shape(v);
    if s.1 != cols {
        return Err(MsgcaError::Shape(format!(
            "{what}: expected {cols} columns, got {}x{}",
            s.0, s.1
        )));
    }
    Ok(())
}

pub fn init_indicator_encoder<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    d: usize,
) -> Result<()> {
    for ch in ["close", "open", "high"] {
        params.insert_weight(&format!("ind.w_{ch}"), rng, 1, d)?;
        params.insert_bias(&format!("ind.b_{ch}"), d)?;
    }
    params.insert_weight("ind.w_fuse", rng, 3 * d, d)?;
    params.insert_bias("ind.b_fuse", d)
}

/// Lifts each of the close/open/high columns of `x` (`n x 3`) to `d` wide,
/// concatenates them to `n x 3d` and projects back to `n x d`.
///
/// The whole map is affine in the three inputs, so it is evaluated as
/// `x W + b` with `W` (`3 x d`) and `b` composed from the parameters first;
/// gradients still reach every original parameter.
pub fn encode_indicators(g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
    indicator_rows(g, p, x)?.materialize(g)
}

/// The indicator encoding of `x` as an unevaluated affine block.
pub fn indicator_rows(g: &mut Graph, p: &ParamVars, x: Var) -> Result<Rows> {
    require_cols(g, x, 3, "encode_indicators")?;
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(MsgcaError::Data(
            "indicator input contains a non-finite value".into(),
        ));
    }
    let (w, b) = indicator_map(g, p)?;
    Ok(Rows::Affine { x, w, b })
}

/// Composed `(W, b)` of the indicator encoder, `3 x d` and `1 x d`.
pub fn indicator_map(g: &mut Graph, p: &ParamVars) -> Result<(Var, Var)> {
    let d = g.shape(p["ind.w_fuse"]).1;
    let mut rows = Vec::with_capacity(3);
    let mut bias = p["ind.b_fuse"];
    for (j, ch) in ["close", "open", "high"].into_iter().enumerate() {
        let block = g.gather_rows(p["ind.w_fuse"], (j * d..(j + 1) * d).collect::<Vec<_>>())?;
        rows.push(g.matmul(p[format!("ind.w_{ch}").as_str()], block)?);
        let b = g.matmul(p[format!("ind.b_{ch}").as_str()], block)?;
        bias = g.add(bias, b)?;
    }
    Ok((g.concat_rows(&rows)?, bias))
}

pub fn init_doc_encoder<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    dim: usize,
    d: usize,
) -> Result<()> {
    params.insert_weight("doc.w", rng, dim, d)?;
    params.insert_bias("doc.b", d)
}

/// Affine projection of document embeddings; rows whose mask is false come
/// out exactly zero (the bias is suppressed too).
pub fn encode_documents(g: &mut Graph, p: &ParamVars, docs: Var, mask: &[bool]) -> Result<Var> {
    let (n, _) = g.shape(docs);
    if mask.len() != n {
        return Err(MsgcaError::Shape(format!(
            "encode_documents: mask has {} entries for {n} rows",
            mask.len()
        )));
    }
    let z = g.matmul(docs, p["doc.w"])?;
    let z = g.add(z, p["doc.b"])?;
    if mask.iter().all(|&m| m) {
        return Ok(z);
    }
    let m = Array2::from_shape_fn((n, 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
    let m = g.constant(m);
    g.mul(z, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub heads: usize,
    pub layers: usize,
    pub negative_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            heads: 2,
            layers: 1,
            negative_slope: 0.2,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.layers == 0 {
            return Err(MsgcaError::Config(
                "graph attention needs at least one head and one layer".into(),
            ));
        }
        Ok(())
    }
}

pub fn init_gat<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    d: usize,
    cfg: &GatConfig,
) -> Result<()> {
    cfg.validate()?;
    for l in 0..cfg.layers {
        for k in 0..cfg.heads {
            params.insert_weight(&format!("gat.l{l}.h{k}.w"), rng, d, d)?;
            params.insert_weight(&format!("gat.l{l}.h{k}.a"), rng, 2 * d, 1)?;
        }
    }
    Ok(())
}

/// Directed edge list in compressed-row form: the neighbours of node `c`
/// are `index[offsets[c]..offsets[c + 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub offsets: Rc<[usize]>,
    pub index: Rc<[usize]>,
    /// Centre node of each edge.
    pub centers: Rc<[usize]>,
}

impl Adjacency {
    /// Builds the edge list from per-node neighbour lists. A node with no
    /// neighbours gets a self-loop.
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(neighbors.len() + 1);
        let mut index = Vec::new();
        let mut centers = Vec::new();
        offsets.push(0);
        for (c, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                index.push(c);
                centers.push(c);
            }
            for &j in nbrs {
                index.push(j);
                centers.push(c);
            }
            offsets.push(index.len());
        }
        Adjacency {
            offsets: offsets.into(),
            index: index.into(),
            centers: centers.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.index.len()
    }
}

/// Graph attention output plus the per-edge attention coefficients of every
/// layer and head (`[layer][head]`, each `edges x 1`).
pub struct GatOutput {
    pub output: Var,
    pub attention: Vec<Vec<Var>>,
}

/// Multi-head graph attention over `h` (`nodes x d`). Per head,
/// `e(i, j) = LeakyReLU(a . [h_i W || h_j W])` is softmax-normalised over the
/// neighbours of `i`; heads are averaged and passed through ELU.
pub fn gat_encode_graph(
    g: &mut Graph,
    p: &ParamVars,
    h: impl Into<Rows>,
    adj: &Adjacency,
    cfg: &GatConfig,
) -> Result<GatOutput> {
    cfg.validate()?;
    let h = h.into();
    h.check_bias(g)?;
    let (n, d) = h.shape(g);
    if n != adj.num_nodes() {
        return Err(MsgcaError::Shape(format!(
            "gat_encode_graph: {n} feature rows for {} graph nodes",
            adj.num_nodes()
        )));
    }
    let first: Rc<[usize]> = (0..d).collect();
    let second: Rc<[usize]> = (d..2 * d).collect();
    let mut x = h;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut alphas = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let z = x.project(g, p[format!("gat.l{l}.h{k}.w").as_str()])?;
            let a = p[format!("gat.l{l}.h{k}.a").as_str()];
            let a_src = g.gather_rows(a, first.clone())?;
            let a_dst = g.gather_rows(a, second.clone())?;
            let s_src = g.matmul(z, a_src)?;
            let s_dst = g.matmul(z, a_dst)?;
            let e_src = g.gather_rows(s_src, adj.centers.clone())?;
            let e_dst = g.gather_rows(s_dst, adj.index.clone())?;
            let e = g.add(e_src, e_dst)?;
            let e = g.leaky_relu(e, cfg.negative_slope);
            let alpha = g.segment_softmax(e, adj.offsets.clone())?;
            heads.push(g.sparse_aggregate(alpha, z, adj.index.clone(), adj.offsets.clone())?);
            alphas.push(alpha);
        }
        let mut sum = heads[0];
        for &hk in &heads[1..] {
            sum = g.add(sum, hk)?;
        }
        let avg = g.scale(sum, 1.0 / cfg.heads as f64);
        x = g.elu(avg).into();
        attention.push(alphas);
    }
    let output = x.materialize(g)?;
    Ok(GatOutput { output, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn zero_prices_zero_output() {
        let mut params = ModelParams::new();
        init_indicator_encoder(&mut params, &mut rng(), 4).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let x = g.constant(Array2::zeros((5, 3)));
        let v = encode_indicators(&mut g, &pv, x).unwrap();
        assert_eq!(g.shape(v), (5, 4));
        assert!(g.value(v).iter().all(|&z| z == 0.0));
    }

    #[test]
    fn composed_map_matches_lift_then_fuse() {
        let d = 3;
        let mut params = ModelParams::new();
        init_indicator_encoder(&mut params, &mut rng(), d).unwrap();
        for (i, p) in params.iter_mut().enumerate() {
            if p.name.contains(".b_") {
                p.values_mut().fill(0.1 * (i as f64 + 1.0));
            }
        }
        let x0 = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let x = g.constant(x0.clone());
        let v = encode_indicators(&mut g, &pv, x).unwrap();
        let val = |n: &str| params.get(n).unwrap().values().clone();
        let mut lifted = Array2::zeros((2, 3 * d));
        for (j, ch) in ["close", "open", "high"].into_iter().enumerate() {
            let col = x0.column(j).to_owned().insert_axis(ndarray::Axis(1));
            let z = col.dot(&val(&format!("ind.w_{ch}"))) + val(&format!("ind.b_{ch}")).row(0);
            lifted
                .slice_mut(ndarray::s![.., j * d..(j + 1) * d])
                .assign(&z);
        }
        let expect = lifted.dot(&val("ind.w_fuse")) + val("ind.b_fuse").row(0);
        for (a, b) in g.value(v).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_indicators_rejected() {
        let mut params = ModelParams::new();
        init_indicator_encoder(&mut params, &mut rng(), 2).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let x = g.constant(array![[1.0, f64::NAN, 0.0]]);
        assert!(matches!(
            encode_indicators(&mut g, &pv, x),
            Err(MsgcaError::Data(_))
        ));
    }

    #[test]
    fn masked_document_row_is_exactly_zero() {
        let mut params = ModelParams::new();
        init_doc_encoder(&mut params, &mut rng(), 3, 2).unwrap();
        params.get_mut("doc.b").unwrap().values_mut().fill(0.7);
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let docs = g.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let v = encode_documents(&mut g, &pv, docs, &[true, false]).unwrap();
        assert!(g.value(v).row(1).iter().all(|&z| z == 0.0));
        assert!(g.value(v).row(0).iter().any(|&z| z != 0.0));
        assert!(encode_documents(&mut g, &pv, docs, &[true]).is_err());
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let cfg = GatConfig::default();
        let mut params = ModelParams::new();
        init_gat(&mut params, &mut rng(), 3, &cfg).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let h0 = array![[0.3, -0.2, 0.5]];
        let h = g.constant(h0.clone());
        let adj = Adjacency::from_neighbors(&[vec![]]);
        let out = gat_encode_graph(&mut g, &pv, h, &adj, &cfg).unwrap();
        let w0 = params.get("gat.l0.h0.w").unwrap().values();
        let w1 = params.get("gat.l0.h1.w").unwrap().values();
        let avg = (h0.dot(w0) + h0.dot(w1)) / 2.0;
        let expect = avg.mapv(|v| if v > 0.0 { v } else { v.exp_m1() });
        for (a, b) in g.value(out.output).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.value(out.attention[0][0])[[0, 0]], 1.0);
    }

    #[test]
    fn gat_grad_check() {
        let cfg = GatConfig {
            heads: 2,
            layers: 2,
            negative_slope: 0.2,
        };
        let mut params = ModelParams::new();
        init_gat(&mut params, &mut rng(), 3, &cfg).unwrap();
        let adj = Adjacency::from_neighbors(&[vec![0, 1], vec![0, 1, 2], vec![1, 2], vec![3]]);
        let h0 = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let report = crate::compute::grad_check(&mut params, 1e-6, |g, pv| {
            let h = g.constant(h0.clone());
            let out = gat_encode_graph(g, pv, h, &adj, &cfg)?.output;
            let sq = g.mul(out, out)?;
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
