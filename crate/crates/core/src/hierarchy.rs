//! The multi-level label taxonomy: parsing, validation, node indexing, and
//! the graph adjacency used by the label-embedding GCN.
//!
//! Nodes get global indices level-major (all level-1 labels first, in file
//! order, then level 2, ...). The taxonomy is a tree at every level except
//! the deepest, where a node may have several parents.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk hierarchy document: label names per level (top level first) and
/// `[child, parent]` edges between adjacent levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyDoc {
    pub levels: Vec<Vec<String>>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct LabelHierarchy {
    /// Label names per level.
    levels: Vec<Vec<String>>,
    /// Global node index of each (level, within-level) label.
    offsets: Vec<usize>,
    /// Parent global indices per global node index (empty for level 1).
    parents: Vec<Vec<usize>>,
    /// (level, within-level index) by label name, per level.
    by_name: Vec<HashMap<String, usize>>,
}

impl LabelHierarchy {
    /// Parse and validate a hierarchy document from its JSON text.
    pub fn parse(document: &str) -> Result<Self> {
        let doc: HierarchyDoc = serde_json::from_str(document).map_err(|e| {
            Error::hierarchy(format!(
                "malformed hierarchy document at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        Self::from_doc(&doc)
    }

    pub fn from_doc(doc: &HierarchyDoc) -> Result<Self> {
        if doc.levels.is_empty() {
            return Err(Error::hierarchy("hierarchy has no levels"));
        }
        let mut by_name: Vec<HashMap<String, usize>> = Vec::new();
        for (li, level) in doc.levels.iter().enumerate() {
            if level.is_empty() {
                return Err(Error::hierarchy(format!("level {} is empty", li + 1)));
            }
            let mut map = HashMap::new();
            for (i, name) in level.iter().enumerate() {
                if map.insert(name.clone(), i).is_some() {
                    return Err(Error::hierarchy(format!(
                        "duplicate label '{name}' at level {}",
                        li + 1
                    )));
                }
            }
            by_name.push(map);
        }

        let mut offsets = Vec::with_capacity(doc.levels.len());
        let mut total = 0;
        for level in &doc.levels {
            offsets.push(total);
            total += level.len();
        }

        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); total];
        for (child, parent) in &doc.edges {
            // A child's level determines the edge's placement: the parent must
            // sit one level up.
            let mut placed = false;
            for li in 1..doc.levels.len() {
                if let Some(&ci) = by_name[li].get(child) {
                    match by_name[li - 1].get(parent) {
                        Some(&pi) => {
                            let cg = offsets[li] + ci;
                            let pg = offsets[li - 1] + pi;
                            if !parents[cg].contains(&pg) {
                                parents[cg].push(pg);
                            }
                            placed = true;
                            break;
                        }
                        None => {
                            return Err(Error::hierarchy(format!(
                                "edge ['{child}', '{parent}']: unknown parent '{parent}' at level {li}"
                            )));
                        }
                    }
                }
            }
            if !placed {
                return Err(Error::hierarchy(format!(
                    "edge ['{child}', '{parent}']: '{child}' is not a label below the top level"
                )));
            }
        }

        let h = LabelHierarchy { levels: doc.levels.clone(), offsets, parents, by_name };
        for m in 2..=h.num_levels() {
            for (i, name) in h.levels[m - 1].iter().enumerate() {
                let g = h.offsets[m - 1] + i;
                let np = h.parents[g].len();
                if np == 0 {
                    return Err(Error::hierarchy(format!(
                        "label '{name}' at level {m} has no parent"
                    )));
                }
                if np > 1 && m != h.num_levels() {
                    return Err(Error::hierarchy(format!(
                        "label '{name}' at level {m} has {np} parents; multiple parents are only allowed at the deepest level"
                    )));
                }
            }
        }
        Ok(h)
    }

    /// Serialize back to the document form (canonical order: levels as stored,
    /// edges sorted by child then parent global index).
    pub fn to_doc(&self) -> HierarchyDoc {
        let mut edges = Vec::new();
        for (child, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                edges.push((child, p));
            }
        }
        edges.sort();
        HierarchyDoc {
            levels: self.levels.clone(),
            edges: edges
                .into_iter()
                .map(|(c, p)| (self.node_name(c).to_string(), self.node_name(p).to_string()))
                .collect(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Total number of nodes across levels.
    pub fn num_nodes(&self) -> usize {
        self.offsets.last().unwrap() + self.levels.last().unwrap().len()
    }

    /// Number of labels at 1-based level `m`.
    pub fn level_size(&self, m: usize) -> usize {
        self.levels[m - 1].len()
    }

    /// Global node index of the first label at 1-based level `m`.
    pub fn level_offset(&self, m: usize) -> usize {
        self.offsets[m - 1]
    }

    /// Ordered `(name, global index)` pairs at 1-based level `m`.
    pub fn labels_at_level(&self, m: usize) -> Result<Vec<(&str, usize)>> {
        if m == 0 || m > self.num_levels() {
            return Err(Error::hierarchy(format!(
                "level {m} out of range 1..={}",
                self.num_levels()
            )));
        }
        Ok(self.levels[m - 1]
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), self.offsets[m - 1] + i))
            .collect())
    }

    pub fn node_name(&self, global: usize) -> &str {
        let (m, i) = self.split_index(global);
        &self.levels[m - 1][i]
    }

    /// (1-based level, within-level index) of a global node index.
    pub fn split_index(&self, global: usize) -> (usize, usize) {
        for m in (1..=self.num_levels()).rev() {
            if global >= self.offsets[m - 1] {
                return (m, global - self.offsets[m - 1]);
            }
        }
        unreachable!("index {global} below all level offsets")
    }

    /// Within-level index of `name` at 1-based level `m`.
    pub fn label_index(&self, m: usize, name: &str) -> Result<usize> {
        if m == 0 || m > self.num_levels() {
            return Err(Error::hierarchy(format!("level {m} out of range")));
        }
        self.by_name[m - 1].get(name).copied().ok_or_else(|| {
            Error::hierarchy(format!("label '{name}' not found at level {m}"))
        })
    }

    pub fn label_name(&self, m: usize, index: usize) -> &str {
        &self.levels[m - 1][index]
    }

    /// Parent global indices of a node.
    pub fn parents_of(&self, global: usize) -> &[usize] {
        &self.parents[global]
    }

    /// Number of distinct parent-child pairs.
    pub fn parent_pair_count(&self) -> usize {
        self.parents.iter().map(|p| p.len()).sum()
    }

    /// Edge count including one self-loop per node, the convention under
    /// which each node also neighbors itself.
    pub fn edge_count_with_self_loops(&self) -> usize {
        self.parent_pair_count() + self.num_nodes()
    }

    /// True iff `path` (one within-level label index per level, top first)
    /// follows parent-child edges at every step.
    pub fn is_valid_path(&self, path: &[usize]) -> Result<bool> {
        if path.len() != self.num_levels() {
            return Err(Error::hierarchy(format!(
                "path length {} does not match {} levels",
                path.len(),
                self.num_levels()
            )));
        }
        for (m, &idx) in path.iter().enumerate() {
            if idx >= self.levels[m].len() {
                return Err(Error::hierarchy(format!(
                    "label index {idx} not at level {}",
                    m + 1
                )));
            }
        }
        for m in 1..path.len() {
            let child = self.offsets[m] + path[m];
            let parent = self.offsets[m - 1] + path[m - 1];
            if !self.parents[child].contains(&parent) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Resolve a path of label names (one per level) to within-level indices.
    pub fn resolve_path(&self, names: &[String]) -> Result<Vec<usize>> {
        if names.len() != self.num_levels() {
            return Err(Error::hierarchy(format!(
                "expected {} labels, got {}",
                self.num_levels(),
                names.len()
            )));
        }
        names
            .iter()
            .enumerate()
            .map(|(m, n)| self.label_index(m + 1, n))
            .collect()
    }
}

/// Symmetric {0,1} adjacency with unit diagonal: nodes neighbor themselves
/// and their parents/children.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<u8>,
}

impl AdjacencyMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn at(&self, j: usize, k: usize) -> u8 {
        self.entries[j * self.n + k]
    }

    /// Dense f64 copy, optionally symmetrically normalized
    /// (`D^-1/2 A D^-1/2`).
    pub fn to_tensor(&self, normalized: bool) -> Tensor {
        let n = self.n;
        let mut values: Vec<f64> = self.entries.iter().map(|&v| v as f64).collect();
        if normalized {
            let degrees: Vec<f64> = (0..n)
                .map(|j| values[j * n..(j + 1) * n].iter().sum::<f64>())
                .collect();
            for j in 0..n {
                for k in 0..n {
                    values[j * n + k] /= (degrees[j] * degrees[k]).sqrt();
                }
            }
        }
        Tensor::from_vec(vec![n, n], values).expect("adjacency tensor")
    }
}

/// The adjacency of the label graph: `A[j][k] = 1` iff `j == k` or one of the
/// two nodes is a parent of the other.
pub fn build_adjacency(h: &LabelHierarchy) -> AdjacencyMatrix {
    let n = h.num_nodes();
    let mut entries = vec![0u8; n * n];
    for j in 0..n {
        entries[j * n + j] = 1;
        for &p in h.parents_of(j) {
            entries[j * n + p] = 1;
            entries[p * n + j] = 1;
        }
    }
    AdjacencyMatrix { n, entries }
}

/// The bundled four-way top level and eleven-way second level of the PDTB
/// sense taxonomy.
pub const PDTB_TOP_SECOND_JSON: &str = include_str!("../data/pdtb_top_second.json");

pub fn pdtb_top_second() -> LabelHierarchy {
    LabelHierarchy::parse(PDTB_TOP_SECOND_JSON).expect("bundled PDTB hierarchy is valid")
}
