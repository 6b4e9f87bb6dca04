//! The full network: three encoders, two fusion stages, and the prediction
//! head, evaluated on batches of windows.

use std::collections::VecDeque;

use rustc_hash::{FxHashMap, FxHashSet};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Matrix, ModelParams, ParamVars, Rows, Var};
use crate::data::{Panel, RelationalGraph, WindowSample};
use crate::encoders::{
    encode_documents, gat_encode_graph, indicator_rows, init_doc_encoder, init_gat,
    init_indicator_encoder, Adjacency, GatConfig,
};
use crate::error::{MsgcaError, Result};
use crate::fusion::{fusion_stage, init_fusion_stage, FusionConfig, FusionMode, StageOutput};
use crate::predictor::{init_predictor, predict_logits};

/// Architecture variants used in ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Gate over a linear map of the key/value modality, no attention.
    GluFusion,
    /// Attention with the gate fixed open.
    CaFusion,
    DropGraph,
    DropDocs,
    DropIndicators,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::GluFusion,
        Variant::CaFusion,
        Variant::DropGraph,
        Variant::DropDocs,
        Variant::DropIndicators,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GluFusion => "glu_fusion",
            Variant::CaFusion => "ca_fusion",
            Variant::DropGraph => "drop_graph",
            Variant::DropDocs => "drop_docs",
            Variant::DropIndicators => "drop_indicators",
        }
    }

    pub fn fusion_mode(self) -> FusionMode {
        match self {
            Variant::GluFusion => FusionMode::Glu,
            Variant::CaFusion => FusionMode::AttentionOnly,
            _ => FusionMode::Gated,
        }
    }

    pub fn uses_indicators(self) -> bool {
        self != Variant::DropIndicators
    }

    pub fn uses_docs(self) -> bool {
        self != Variant::DropDocs
    }

    pub fn uses_graph(self) -> bool {
        self != Variant::DropGraph
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MsgcaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                MsgcaError::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Latent width `d`.
    pub d: usize,
    /// Window length `t`.
    pub ws: usize,
    /// Document embedding width.
    pub doc_dim: usize,
    pub fusion: FusionConfig,
    pub gat: GatConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            ws: 20,
            doc_dim: 1536,
            fusion: FusionConfig::default(),
            gat: GatConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(MsgcaError::Config("hidden width d must be positive".into()));
        }
        if self.ws < 2 {
            return Err(MsgcaError::Config(format!(
                "window size must be >= 2, got {}",
                self.ws
            )));
        }
        self.fusion.validate()?;
        self.gat.validate()
    }

    fn runs_gat(&self) -> bool {
        // with indicators dropped the node features are zero and so is the
        // attention output, so the encoder is skipped outright
        self.variant.uses_graph() && self.variant.uses_indicators()
    }
}

/// Fresh parameters for `cfg`, drawn from `seed`. Only the sub-networks the
/// variant uses are created.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    let v = cfg.variant;
    let mode = v.fusion_mode();
    if v.uses_indicators() {
        init_indicator_encoder(&mut params, &mut rng, cfg.d)?;
    }
    if v.uses_docs() {
        init_doc_encoder(&mut params, &mut rng, cfg.doc_dim, cfg.d)?;
        init_fusion_stage(&mut params, "fusion.s1", &mut rng, cfg.d, &cfg.fusion, mode)?;
    }
    if cfg.runs_gat() {
        init_gat(&mut params, &mut rng, cfg.d, &cfg.gat)?;
    }
    if v.uses_graph() {
        init_fusion_stage(&mut params, "fusion.s2", &mut rng, cfg.d, &cfg.fusion, mode)?;
    }
    init_predictor(&mut params, &mut rng, cfg.ws, cfg.d)?;
    Ok(params)
}

/// Inputs for one forward pass. Encoders run once per distinct
/// `(stock, date)` node; sample rows gather from the node features.
#[derive(Clone, Debug)]
pub struct Batch {
    pub t: usize,
    pub labels: Vec<usize>,
    /// `nodes x 3`.
    pub indicators: Matrix,
    /// `nodes x doc_dim`.
    pub docs: Matrix,
    pub doc_mask: Vec<bool>,
    /// Same-date relations between nodes, when the graph is used.
    pub adjacency: Option<Adjacency>,
    /// Node of every sample row, `samples * t` entries.
    pub sample_rows: Rc<[usize]>,
}

impl Batch {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.doc_mask.len()
    }

    /// Collects the nodes `samples` need. With the graph in use, every stock
    /// within `gat.layers` hops of a sample stock is included on each date a
    /// sample touches, so attention sees full neighbourhoods.
    pub fn build(
        panel: &Panel,
        graph: &RelationalGraph,
        samples: &[&WindowSample],
        cfg: &ModelConfig,
    ) -> Result<Batch> {
        if samples.is_empty() {
            return Err(MsgcaError::Data("empty batch".into()));
        }
        if graph.num_stocks() != panel.num_stocks() {
            return Err(MsgcaError::Shape(format!(
                "graph has {} stocks, panel has {}",
                graph.num_stocks(),
                panel.num_stocks()
            )));
        }
        let t = cfg.ws;
        let mut nodes: Vec<(usize, usize)> = Vec::new();
        let mut node_of: FxHashMap<(usize, usize), usize> = FxHashMap::default();
        let mut add = |stock: usize, cal: usize, nodes: &mut Vec<(usize, usize)>| -> usize {
            *node_of.entry((stock, cal)).or_insert_with(|| {
                nodes.push((stock, cal));
                nodes.len() - 1
            })
        };
        let mut sample_rows = Vec::with_capacity(samples.len() * t);
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if s.ws != t {
                return Err(MsgcaError::Shape(format!(
                    "sample window {} differs from model window {t}",
                    s.ws
                )));
            }
            for &cal in s.calendar_indices(panel) {
                sample_rows.push(add(s.stock, cal, &mut nodes));
            }
            labels.push(s.label.index());
        }

        let adjacency = if cfg.runs_gat() {
            let closure = hop_closure(graph, samples.iter().map(|s| s.stock), cfg.gat.layers);
            let dates: Vec<usize> = {
                let mut v: Vec<usize> = nodes
                    .iter()
                    .map(|&(_, c)| c)
                    .collect::<FxHashSet<_>>()
                    .into_iter()
                    .collect();
                v.sort_unstable();
                v
            };
            for &cal in &dates {
                for &(stock, _) in panel.stocks_at(cal) {
                    if closure.contains(&stock) {
                        add(stock, cal, &mut nodes);
                    }
                }
            }
            let neighbors: Vec<Vec<usize>> = nodes
                .iter()
                .map(|&(stock, cal)| {
                    graph
                        .neighbors_of(stock)
                        .iter()
                        .filter_map(|&j| node_of.get(&(j, cal)).copied())
                        .collect()
                })
                .collect();
            Some(Adjacency::from_neighbors(&neighbors))
        } else {
            None
        };

        let dim = panel.dim;
        let mut indicators = Array2::zeros((nodes.len(), 3));
        let mut docs = Array2::zeros((nodes.len(), if cfg.variant.uses_docs() { dim } else { 0 }));
        let mut doc_mask = vec![false; nodes.len()];
        for (i, &(stock, cal)) in nodes.iter().enumerate() {
            let frame = &panel.stocks[stock];
            let row = panel
                .row_at(stock, cal)
                .expect("node built from a trading day");
            indicators.row_mut(i).assign(&frame.indicators.row(row));
            doc_mask[i] = frame.doc_mask[row];
            if cfg.variant.uses_docs() && dim > 0 {
                docs.row_mut(i).assign(&frame.docs.row(row));
            }
        }
        if cfg.variant.uses_docs() && dim != cfg.doc_dim {
            return Err(MsgcaError::Contract {
                expected: cfg.doc_dim,
                actual: dim,
            });
        }
        Ok(Batch {
            t,
            labels,
            indicators,
            docs,
            doc_mask,
            adjacency,
            sample_rows: sample_rows.into(),
        })
    }
}

fn hop_closure(
    graph: &RelationalGraph,
    seeds: impl Iterator<Item = usize>,
    hops: usize,
) -> FxHashSet<usize> {
    let mut seen: FxHashSet<usize> = FxHashSet::default();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for s in seeds {
        if seen.insert(s) {
            queue.push_back((s, 0));
        }
    }
    while let Some((s, depth)) = queue.pop_front() {
        if depth == hops {
            continue;
        }
        for &j in graph.neighbors_of(s) {
            if seen.insert(j) {
                queue.push_back((j, depth + 1));
            }
        }
    }
    seen
}

/// Handles into the graph of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `samples x 3`.
    pub logits: Var,
    /// Sample-row indicator features (the prediction bypass).
    pub v_i: Var,
    pub stage1: Option<StageOutput>,
    pub stage2: Option<StageOutput>,
}

fn zeros(g: &mut Graph, rows: usize, cols: usize) -> Var {
    g.constant(Array2::zeros((rows, cols)))
}

pub fn forward(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<ForwardOutput> {
    let v = cfg.variant;
    let (n_nodes, rows, t, d) = (batch.num_nodes(), batch.sample_rows.len(), batch.t, cfg.d);
    let mode = v.fusion_mode();

    // Indicator features stay in factored form until needed, so the
    // stage-1 and GAT projections touch only the three raw channels.
    let v_i_nodes = if v.uses_indicators() {
        let x = g.constant(batch.indicators.clone());
        Some(indicator_rows(g, p, x)?)
    } else {
        None
    };
    let v_i_rows = match v_i_nodes {
        Some(all) => all.gather(g, batch.sample_rows.clone())?,
        None => Rows::Dense(zeros(g, rows, d)),
    };
    let v_i = v_i_rows.materialize(g)?;

    let stage1 = if v.uses_docs() {
        let docs = g.constant(batch.docs.clone());
        let v_d_nodes = encode_documents(g, p, docs, &batch.doc_mask)?;
        let v_d = g.gather_rows(v_d_nodes, batch.sample_rows.clone())?;
        let q = if v.uses_indicators() {
            v_i_rows
        } else {
            Rows::Dense(v_d)
        };
        Some(fusion_stage(
            g,
            p,
            "fusion.s1",
            q,
            v_d,
            q,
            t,
            &cfg.fusion,
            mode,
        )?)
    } else {
        None
    };
    let h_id = stage1.map_or(v_i, |s| s.stable);

    let stage2 = if v.uses_graph() {
        let v_g = match (v_i_nodes, &batch.adjacency) {
            (Some(all), Some(adj)) => {
                let out = gat_encode_graph(g, p, all, adj, &cfg.gat)?.output;
                g.gather_rows(out, batch.sample_rows.clone())?
            }
            (None, _) => zeros(g, rows, d),
            (Some(_), None) => {
                return Err(MsgcaError::Shape(format!(
                    "batch of {n_nodes} nodes was built without graph adjacency"
                )))
            }
        };
        Some(fusion_stage(
            g,
            p,
            "fusion.s2",
            h_id,
            v_g,
            h_id,
            t,
            &cfg.fusion,
            mode,
        )?)
    } else {
        None
    };
    let h_idg = stage2.map_or(h_id, |s| s.stable);

    let logits = predict_logits(g, p, h_idg, v_i, t)?;
    Ok(ForwardOutput {
        logits,
        v_i,
        stage1,
        stage2,
    })
}

/// Mean cross-entropy of a batch.
pub fn batch_loss(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(Var, ForwardOutput)> {
    let out = forward(g, p, cfg, batch)?;
    let loss = g.cross_entropy(out.logits, batch.labels.clone())?;
    Ok((loss, out))
}

/// A configured network with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn predict_proba(
        &self,
        panel: &Panel,
        graph: &RelationalGraph,
        samples: &[WindowSample],
        chunk: usize,
    ) -> Result<Matrix> {
        predict_proba_with(&self.params, &self.config, panel, graph, samples, chunk)
    }

    pub fn predict(
        &self,
        panel: &Panel,
        graph: &RelationalGraph,
        samples: &[WindowSample],
        chunk: usize,
    ) -> Result<Vec<usize>> {
        predict_with(&self.params, &self.config, panel, graph, samples, chunk)
    }
}

/// Class probabilities for `samples`, evaluated `chunk` windows at a time.
pub fn predict_proba_with(
    params: &ModelParams,
    cfg: &ModelConfig,
    panel: &Panel,
    graph: &RelationalGraph,
    samples: &[WindowSample],
    chunk: usize,
) -> Result<Matrix> {
    let mut out = Array2::zeros((samples.len(), 3));
    // Date-contiguous chunks share most window dates, which keeps the graph
    // node set of each chunk small.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].label_cal);
    for part in order.chunks(chunk.max(1)) {
        let refs: Vec<&WindowSample> = part.iter().map(|&i| &samples[i]).collect();
        let batch = Batch::build(panel, graph, &refs, cfg)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let fwd = forward(&mut g, &p, cfg, &batch)?;
        for (i, row) in g.value(fwd.logits).rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..3 {
                out[[part[i], k]] = e[k] / s;
            }
        }
    }
    Ok(out)
}

/// Predicted class indices (argmax, first index on ties).
pub fn predict_with(
    params: &ModelParams,
    cfg: &ModelConfig,
    panel: &Panel,
    graph: &RelationalGraph,
    samples: &[WindowSample],
    chunk: usize,
) -> Result<Vec<usize>> {
    let proba = predict_proba_with(params, cfg, panel, graph, samples, chunk)?;
    Ok(proba
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for k in 1..3 {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}
