use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{MsgcaError, Result};

/// Static stock relations. Group nodes (sectors, industries) are collapsed
/// so that stocks sharing a group become mutual neighbours; every stock is
/// its own neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalGraph {
    /// Stock symbols, in the dataset's stock order.
    pub stocks: Vec<String>,
    /// Non-stock nodes that appeared in edges, sorted.
    pub groups: Vec<String>,
    /// Raw triples `(src, relation, dst)` that were kept.
    pub edges: Vec<(String, String, String)>,
    /// Sorted neighbour indices per stock (self included).
    pub neighbors: Vec<Vec<usize>>,
}

impl RelationalGraph {
    /// Collapses `edges` over `stocks`. An edge whose endpoints are both
    /// unknown stocks is dropped with a warning.
    pub fn from_edges(stocks: &[String], edges: Vec<(String, String, String)>) -> Self {
        let index: HashMap<&str, usize> = stocks
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut adj: Vec<BTreeSet<usize>> =
            (0..stocks.len()).map(|i| BTreeSet::from([i])).collect();
        let mut members: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        let mut kept = Vec::new();
        for (src, rel, dst) in edges {
            match (index.get(src.as_str()), index.get(dst.as_str())) {
                (Some(&a), Some(&b)) => {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
                (Some(&a), None) => {
                    members.entry(dst.clone()).or_default().insert(a);
                }
                (None, Some(&b)) => {
                    members.entry(src.clone()).or_default().insert(b);
                }
                (None, None) => {
                    log::warn!("dropping edge {src} -[{rel}]-> {dst}: references no known stock");
                    continue;
                }
            }
            kept.push((src, rel, dst));
        }
        for group in members.values() {
            for &a in group {
                adj[a].extend(group.iter().copied());
            }
        }
        RelationalGraph {
            stocks: stocks.to_vec(),
            groups: members.keys().cloned().collect(),
            edges: kept,
            neighbors: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    /// Graph with self-loops only.
    pub fn isolated(stocks: &[String]) -> Self {
        Self::from_edges(stocks, Vec::new())
    }

    pub fn num_stocks(&self) -> usize {
        self.stocks.len()
    }

    pub fn neighbors_of(&self, stock: usize) -> &[usize] {
        &self.neighbors[stock]
    }

    pub fn num_nodes(&self) -> usize {
        self.stocks.len() + self.groups.len()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (s, r, d) in &self.edges {
            writeln!(w, "{s}\t{r}\t{d}").map_err(|e| MsgcaError::io("graph.tsv", e))?;
        }
        Ok(())
    }
}

/// Reads `src<TAB>relation<TAB>dst` rows and collapses them over `stocks`.
pub fn load_graph(path: impl AsRef<Path>, stocks: &[String]) -> Result<RelationalGraph> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| MsgcaError::io(path, e))?;
    parse_graph(BufReader::new(file), stocks)
}

pub fn parse_graph<R: BufRead>(reader: R, stocks: &[String]) -> Result<RelationalGraph> {
    let mut edges = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MsgcaError::io("graph.tsv", e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(MsgcaError::Format(format!(
                "graph line {}: expected src<TAB>relation<TAB>dst",
                i + 1
            )));
        }
        edges.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parts[2].to_string(),
        ));
    }
    Ok(RelationalGraph::from_edges(stocks, edges))
}
