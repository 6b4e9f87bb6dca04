//! Loading, labelling, aligning, windowing, and splitting market data, plus
//! a synthetic generator with planted multimodal signal.

mod documents;
mod graph;
mod labels;
mod panel;
mod prices;
mod split;
mod synth;

use std::path::{Path, PathBuf};

pub(crate) use documents::write_embedding_line;
pub use documents::{
    align_documents, load_documents, write_documents, DocumentDay, EmbeddingKey, EmbeddingTable,
};
pub use graph::{load_graph, parse_graph, RelationalGraph};
pub use labels::{compute_labels, LabelSpec, Trend};
pub use panel::{build_windows, IndicatorTransform, Panel, StockFrame, WindowSample};
pub use prices::{load_prices, parse_prices, write_prices, PriceSeries};
pub use split::{
    batch_iter, chronological_split, date_batches, DatasetSplit, SplitPart, SplitRatios,
    SPLIT_FORMAT_VERSION,
};
pub use synth::{synth_dataset, SynthConfig, SynthDataset};

use crate::error::Result;

/// Locations of the four input files.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataPaths {
    pub prices: PathBuf,
    pub documents: PathBuf,
    pub embeddings: PathBuf,
    pub graph: PathBuf,
}

impl DataPaths {
    /// Default file names inside one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DataPaths {
            prices: dir.join("prices.csv"),
            documents: dir.join("documents.jsonl"),
            embeddings: dir.join("embeddings.jsonl"),
            graph: dir.join("graph.tsv"),
        }
    }
}

/// A loaded dataset: aligned panel, relational graph, and chronological split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub panel: Panel,
    pub graph: RelationalGraph,
    pub split: DatasetSplit,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        prices: &[PriceSeries],
        documents: &[DocumentDay],
        table: &EmbeddingTable,
        graph_edges: Vec<(String, String, String)>,
        label_spec: LabelSpec,
        transform: IndicatorTransform,
        ws: usize,
        ratios: SplitRatios,
    ) -> Result<Dataset> {
        let panel = Panel::build(prices, documents, table, label_spec, transform)?;
        let graph = RelationalGraph::from_edges(&panel.symbols(), graph_edges);
        let windows = panel.windows(ws)?;
        let split = chronological_split(windows, ratios, label_spec, panel.calendar.clone())?;
        Ok(Dataset {
            panel,
            graph,
            split,
        })
    }

    pub fn load(
        paths: &DataPaths,
        label_spec: LabelSpec,
        transform: IndicatorTransform,
        ws: usize,
        ratios: SplitRatios,
    ) -> Result<Dataset> {
        let prices = load_prices(&paths.prices)?;
        let documents = if paths.documents.exists() {
            load_documents(&paths.documents)?
        } else {
            log::warn!(
                "{} not found; running without documents",
                paths.documents.display()
            );
            Vec::new()
        };
        let table = if paths.embeddings.exists() {
            EmbeddingTable::load(&paths.embeddings, None)?
        } else {
            EmbeddingTable::new(0)
        };
        let symbols: Vec<String> = prices.iter().map(|p| p.symbol.clone()).collect();
        let graph = if paths.graph.exists() {
            load_graph(&paths.graph, &symbols)?
        } else {
            log::warn!(
                "{} not found; every stock is isolated",
                paths.graph.display()
            );
            RelationalGraph::isolated(&symbols)
        };
        Self::from_parts(
            &prices,
            &documents,
            &table,
            graph.edges,
            label_spec,
            transform,
            ws,
            ratios,
        )
    }

    pub fn from_synth(
        synth: &SynthDataset,
        label_spec: LabelSpec,
        ws: usize,
        ratios: SplitRatios,
    ) -> Result<Dataset> {
        Self::from_parts(
            &synth.prices,
            &synth.documents,
            &synth.embeddings,
            synth.graph_edges.clone(),
            label_spec,
            IndicatorTransform::PctReturn,
            ws,
            ratios,
        )
    }
}
