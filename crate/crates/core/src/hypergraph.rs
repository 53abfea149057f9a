//! Hypergraph data model, degrees, incidence layout and the JSON dataset format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// An undirected hypergraph over dense node indices `0..n`.
///
/// Hyperedge members are stored sorted ascending, which fixes the canonical
/// incidence order used for restriction-map storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    num_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
    /// Offset of each hyperedge's first incidence in the canonical incidence list.
    offsets: Vec<usize>,
    features: Option<Mat>,
    labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeProfile {
    pub node_degrees: Vec<usize>,
    pub edge_degrees: Vec<usize>,
}

/// A node-hyperedge incidence `v ⊴ e`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Incidence {
    pub node: usize,
    pub edge: usize,
}

impl Hypergraph {
    pub fn new(num_nodes: usize, hyperedges: Vec<Vec<usize>>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Validation("num_nodes must be positive".into()));
        }
        let mut edges = Vec::with_capacity(hyperedges.len());
        for (e, mut members) in hyperedges.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validation(format!("hyperedge {e} is empty")));
            }
            members.sort_unstable();
            for w in members.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::Validation(format!(
                        "hyperedge {e} lists node {} twice",
                        w[0]
                    )));
                }
            }
            if let Some(&last) = members.last() {
                if last >= num_nodes {
                    return Err(Error::Validation(format!(
                        "hyperedge {e} references node {last} but num_nodes is {num_nodes}"
                    )));
                }
            }
            edges.push(members);
        }
        let mut offsets = Vec::with_capacity(edges.len() + 1);
        let mut acc = 0;
        for e in &edges {
            offsets.push(acc);
            acc += e.len();
        }
        offsets.push(acc);
        Ok(Hypergraph {
            num_nodes,
            hyperedges: edges,
            offsets,
            features: None,
            labels: None,
        })
    }

    pub fn with_features(mut self, features: Mat) -> Result<Self> {
        if features.rows() != self.num_nodes {
            return Err(Error::Validation(format!(
                "features have {} rows but num_nodes is {}",
                features.rows(),
                self.num_nodes
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::Validation(format!(
                "labels have length {} but num_nodes is {}",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Appends a singleton hyperedge `{v}` for every node that has none yet.
    pub fn with_self_loops(&self) -> Self {
        let mut looped = vec![false; self.num_nodes];
        for e in self.hyperedges.iter().filter(|e| e.len() == 1) {
            looped[e[0]] = true;
        }
        let mut edges = self.hyperedges.clone();
        edges.extend((0..self.num_nodes).filter(|&v| !looped[v]).map(|v| vec![v]));
        let mut out = Hypergraph::new(self.num_nodes, edges).expect("adding singletons keeps a valid hypergraph");
        out.features = self.features.clone();
        out.labels = self.labels.clone();
        out
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    #[inline]
    pub fn num_hyperedges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn hyperedges(&self) -> &[Vec<usize>] {
        &self.hyperedges
    }

    #[inline]
    pub fn hyperedge(&self, e: usize) -> &[usize] {
        &self.hyperedges[e]
    }

    pub fn features(&self) -> Option<&Mat> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_incidences(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    /// Index of the first incidence of hyperedge `e`; member `k` of `e` sits at
    /// `incidence_offset(e) + k`.
    #[inline]
    pub fn incidence_offset(&self, e: usize) -> usize {
        self.offsets[e]
    }

    pub fn degrees(&self) -> DegreeProfile {
        let mut node_degrees = vec![0; self.num_nodes];
        for e in &self.hyperedges {
            for &v in e {
                node_degrees[v] += 1;
            }
        }
        DegreeProfile {
            node_degrees,
            edge_degrees: self.hyperedges.iter().map(Vec::len).collect(),
        }
    }

    /// Incidences ordered by hyperedge, then node index ascending.
    pub fn incidence_pairs(&self) -> Vec<Incidence> {
        self.hyperedges
            .iter()
            .enumerate()
            .flat_map(|(edge, members)| members.iter().map(move |&node| Incidence { node, edge }))
            .collect()
    }

    /// For every node, the incidence indices it takes part in, ascending.
    pub fn node_incidences(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes];
        for (e, members) in self.hyperedges.iter().enumerate() {
            for (k, &v) in members.iter().enumerate() {
                out[v].push(self.offsets[e] + k);
            }
        }
        out
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self> {
        let mut text = String::new();
        source
            .read_to_string(&mut text)
            .map_err(|e| Error::Parse(format!("input is not UTF-8 text: {e}")))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut h = Hypergraph::new(file.num_nodes, file.hyperedges)?;
        if let Some(rows) = file.features {
            let m = Mat::from_rows(&rows).map_err(|e| Error::Validation(e.to_string()))?;
            h = h.with_features(m)?;
        }
        if let Some(labels) = file.labels {
            h = h.with_labels(labels)?;
        }
        Ok(h)
    }

    /// Canonical serialization: fixed key order, no whitespace, shortest
    /// round-trip numbers.
    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            num_nodes: self.num_nodes,
            hyperedges: self.hyperedges.clone(),
            features: self.features.as_ref().map(Mat::to_rows),
            labels: self.labels.clone(),
        };
        serde_json::to_string(&file).expect("dataset serialization is infallible")
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(self.to_json().as_bytes())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    num_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}
