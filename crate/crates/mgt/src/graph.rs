//! Graph data model, JSON document ingestion, and permutation machinery.
//!
//! Graphs are undirected, node- and edge-attributed, with a dense symmetric
//! binary adjacency matrix. Node ordering in documents is authoritative; no
//! canonicalization is performed, so relabeling tests can rely on controlled
//! orderings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("edge {index}: self-loop at node {node}")]
    SelfLoop { index: usize, node: usize },
    #[error("edge {index}: duplicate unordered pair {{{a}, {b}}}")]
    DuplicateEdge { index: usize, a: usize, b: usize },
    #[error("edge {index}: node index {node} out of range (n = {n})")]
    NodeIndexOutOfRange { index: usize, node: usize, n: usize },
    #[error("node {index}: feature width {got} differs from width {expected} of node 0")]
    NodeFeatureWidth {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("edge {index}: feature width {got} differs from width {expected} of edge 0")]
    EdgeFeatureWidth {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("positional row {index}: width {got} differs from width {expected} of row 0")]
    PositionalWidth {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("positional matrix has {got} rows, expected {expected}")]
    PositionalRows { got: usize, expected: usize },
    #[error("permutation length {got} does not match node count {expected}")]
    PermutationLength { got: usize, expected: usize },
    #[error("permutation is not a bijection: index {0} appears more than once or is out of range")]
    NotBijective(usize),
}

/// One undirected edge with its feature vector. `src`/`dst` keep the
/// orientation the document used; the pair is unique as an unordered set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub feat: Vec<f64>,
}

/// On-disk JSON form of a graph.
///
/// ```json
/// { "nodes": [[f64,...],...],
///   "edges": [{"src":u,"dst":u,"feat":[f64,...]},...],
///   "target": [f64,...],        // optional
///   "positional": [[f64,...]] } // optional, flagged when supplied
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positional: Option<Vec<Vec<f64>>>,
}

/// Validated undirected attributed graph. Immutable after construction;
/// all operations on it are pure functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    adjacency: Mat,
    node_features: Mat,
    edges: Vec<Edge>,
    edge_feature_width: usize,
    /// Positional channels supplied by the document. The model computes its
    /// own positional encodings; a supplied matrix is carried along but
    /// callers should treat it as external data (see [`Graph::positional`]).
    positional: Option<Mat>,
    target: Option<Vec<f64>>,
}

impl Graph {
    /// Parse and validate a graph document from raw bytes.
    pub fn from_json(bytes: &[u8]) -> Result<Graph, GraphError> {
        let doc: GraphDocument =
            serde_json::from_slice(bytes).map_err(|e| GraphError::Malformed(e.to_string()))?;
        Graph::from_document(doc)
    }

    /// Validate a parsed document and build the dense graph.
    pub fn from_document(doc: GraphDocument) -> Result<Graph, GraphError> {
        let n = doc.nodes.len();
        let d = doc.nodes.first().map_or(0, Vec::len);
        for (index, row) in doc.nodes.iter().enumerate() {
            if row.len() != d {
                return Err(GraphError::NodeFeatureWidth {
                    index,
                    got: row.len(),
                    expected: d,
                });
            }
        }
        let mut node_features = Mat::zeros(n, d);
        for (i, row) in doc.nodes.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                node_features.set(i, j, v);
            }
        }

        let d_e = doc.edges.first().map_or(0, |e| e.feat.len());
        let mut adjacency = Mat::zeros(n, n);
        for (index, e) in doc.edges.iter().enumerate() {
            for &node in &[e.src, e.dst] {
                if node >= n {
                    return Err(GraphError::NodeIndexOutOfRange { index, node, n });
                }
            }
            if e.src == e.dst {
                return Err(GraphError::SelfLoop {
                    index,
                    node: e.src,
                });
            }
            if e.feat.len() != d_e {
                return Err(GraphError::EdgeFeatureWidth {
                    index,
                    got: e.feat.len(),
                    expected: d_e,
                });
            }
            if adjacency.get(e.src, e.dst) != 0.0 {
                let (a, b) = (e.src.min(e.dst), e.src.max(e.dst));
                return Err(GraphError::DuplicateEdge { index, a, b });
            }
            adjacency.set(e.src, e.dst, 1.0);
            adjacency.set(e.dst, e.src, 1.0);
        }

        let positional = match &doc.positional {
            None => None,
            Some(rows) => {
                if rows.len() != n {
                    return Err(GraphError::PositionalRows {
                        got: rows.len(),
                        expected: n,
                    });
                }
                let p = rows.first().map_or(0, Vec::len);
                for (index, row) in rows.iter().enumerate() {
                    if row.len() != p {
                        return Err(GraphError::PositionalWidth {
                            index,
                            got: row.len(),
                            expected: p,
                        });
                    }
                }
                Some(Mat::from_rows(rows))
            }
        };

        Ok(Graph {
            n,
            adjacency,
            node_features,
            edges: doc.edges,
            edge_feature_width: d_e,
            positional,
            target: doc.target,
        })
    }

    /// Serialize back to the document form. `from_document(to_document(g))`
    /// reproduces `g` exactly.
    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            nodes: (0..self.n).map(|i| self.node_features.row(i).to_vec()).collect(),
            edges: self.edges.clone(),
            target: self.target.clone(),
            positional: self
                .positional
                .as_ref()
                .map(|p| (0..self.n).map(|i| p.row(i).to_vec()).collect()),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_document()).expect("graph document serialization")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn node_features(&self) -> &Mat {
        &self.node_features
    }

    pub fn node_feature_width(&self) -> usize {
        self.node_features.cols()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_feature_width(&self) -> usize {
        self.edge_feature_width
    }

    pub fn positional(&self) -> Option<&Mat> {
        self.positional.as_ref()
    }

    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adjacency.row(i).iter().sum()
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.degree(i)).collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..self.n {
                if !seen[j] && self.adjacency.get(i, j) != 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabel nodes: node `i` becomes node `sigma(i)`. The adjacency is
    /// conjugated, feature and positional rows move with their nodes, and
    /// edge endpoints are rewritten in place (list order is preserved).
    pub fn apply_permutation(&self, sigma: &Permutation) -> Result<Graph, GraphError> {
        if sigma.len() != self.n {
            return Err(GraphError::PermutationLength {
                got: sigma.len(),
                expected: self.n,
            });
        }
        let adjacency = sigma.conjugate(&self.adjacency);
        let node_features = sigma.permute_rows(&self.node_features);
        let positional = self.positional.as_ref().map(|p| sigma.permute_rows(p));
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: sigma.map(e.src),
                dst: sigma.map(e.dst),
                feat: e.feat.clone(),
            })
            .collect();
        Ok(Graph {
            n: self.n,
            adjacency,
            node_features,
            edges,
            edge_feature_width: self.edge_feature_width,
            positional,
            target: self.target.clone(),
        })
    }

    /// Symmetrically normalized Laplacian `I - D^{-1/2} A D^{-1/2}`.
    ///
    /// Isolated nodes get an all-zero row and column (diagonal 0, not 1), so
    /// they carry a zero-frequency component and their heat-kernel wavelet
    /// row stays the identity row.
    pub fn normalized_laplacian(&self) -> Mat {
        let inv_sqrt: Vec<f64> = (0..self.n)
            .map(|i| {
                let d = self.degree(i);
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut lap = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            if inv_sqrt[i] > 0.0 {
                lap.set(i, i, 1.0);
            }
            for j in 0..self.n {
                if i != j && self.adjacency.get(i, j) != 0.0 {
                    lap.set(i, j, -1.0 * inv_sqrt[i] * inv_sqrt[j]);
                }
            }
        }
        lap
    }
}

/// A bijection on `{0..n-1}`; `mapping[i]` is the new label of node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Permutation, GraphError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(GraphError::NotBijective(m));
            }
            seen[m] = true;
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Permutation {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    #[inline]
    pub fn map(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// Row action on a first-order tensor: row `i` moves to row `sigma(i)`.
    pub fn permute_rows(&self, m: &Mat) -> Mat {
        assert_eq!(m.rows(), self.len(), "row count mismatch");
        let mut out = Mat::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let ti = self.map(i);
            for j in 0..m.cols() {
                out.set(ti, j, m.get(i, j));
            }
        }
        out
    }

    /// Conjugation action on a second-order tensor:
    /// `out[sigma(i)][sigma(j)] = m[i][j]`.
    pub fn conjugate(&self, m: &Mat) -> Mat {
        assert_eq!(m.rows(), self.len(), "row count mismatch");
        assert_eq!(m.cols(), self.len(), "column count mismatch");
        let mut out = Mat::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(self.map(i), self.map(j), m.get(i, j));
            }
        }
        out
    }
}
