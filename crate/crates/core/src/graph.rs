//! Finite directed multigraphs: the skeleton `(V, E, i, t)` of a Markov system.
//!
//! Vertices are numbered `1..=N`. Edges carry a user-facing [`EdgeId`] and are
//! stored sorted by id; most hot paths work with the edge *index* (position in
//! that sorted order) instead.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, CmsError, Result};

/// Identifier of an edge as it appears in configs, reports and symbol streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub initial: usize,
    pub terminal: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureFlags {
    pub irreducible: bool,
    pub aperiodic: bool,
    pub i_surjective: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedMultigraph {
    vertex_count: usize,
    edges: Vec<Edge>,
    // out_edges[v - 1] = indices of edges with initial vertex v, in id order
    out_edges: Vec<Vec<usize>>,
}

impl DirectedMultigraph {
    /// Builds a graph, checking vertex ranges and id uniqueness.
    ///
    /// Surjectivity of the initial-vertex map is *not* enforced here; it is
    /// reported by [`structure_flags`](Self::structure_flags) and required by
    /// [`MarkovSystem`](crate::system::MarkovSystem).
    pub fn new(vertex_count: usize, mut edges: Vec<Edge>) -> Result<Self> {
        if vertex_count == 0 {
            return input_err("graph needs at least one vertex");
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for e in &edges {
            if !seen.insert(e.id) {
                return input_err(format!("duplicate edge id {}", e.id));
            }
            for v in [e.initial, e.terminal] {
                if v == 0 || v > vertex_count {
                    return input_err(format!(
                        "edge {} references vertex {v}, outside 1..={vertex_count}",
                        e.id
                    ));
                }
            }
        }
        edges.sort_by_key(|e| e.id);
        let mut out_edges = vec![Vec::new(); vertex_count];
        for (k, e) in edges.iter().enumerate() {
            out_edges[e.initial - 1].push(k);
        }
        Ok(Self {
            vertex_count,
            edges,
            out_edges,
        })
    }

    /// Convenience constructor from `(initial, terminal)` pairs; edge ids are
    /// assigned `1, 2, ...` in order.
    pub fn from_pairs(vertex_count: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let edges = pairs
            .iter()
            .enumerate()
            .map(|(k, &(initial, terminal))| Edge {
                id: EdgeId(k as u32 + 1),
                initial,
                terminal,
            })
            .collect();
        Self::new(vertex_count, edges)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges in id order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> &Edge {
        &self.edges[index]
    }

    pub fn index_of(&self, id: EdgeId) -> Result<usize> {
        self.edges
            .binary_search_by_key(&id, |e| e.id)
            .map_err(|_| CmsError::UnknownEdge(id))
    }

    /// Indices of the edges leaving `vertex`, in id order.
    pub fn out_edges(&self, vertex: usize) -> &[usize] {
        &self.out_edges[vertex - 1]
    }

    pub fn max_out_degree(&self) -> usize {
        self.out_edges.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// True iff the word is empty or `t(e_k) = i(e_{k+1})` for every adjacent pair.
    pub fn validate_path(&self, word: &[EdgeId]) -> Result<bool> {
        let indices = word
            .iter()
            .map(|&id| self.index_of(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.is_index_path(&indices))
    }

    pub(crate) fn is_index_path(&self, indices: &[usize]) -> bool {
        indices
            .windows(2)
            .all(|w| self.edges[w[0]].terminal == self.edges[w[1]].initial)
    }

    pub fn structure_flags(&self) -> StructureFlags {
        let i_surjective = self.out_edges.iter().all(|o| !o.is_empty());
        let forward = self.bfs_levels(false);
        let backward = self.bfs_levels(true);
        let irreducible =
            forward.iter().all(Option::is_some) && backward.iter().all(Option::is_some);
        let aperiodic = irreducible && self.period_from_levels(&forward) == 1;
        StructureFlags {
            irreducible,
            aperiodic,
            i_surjective,
        }
    }

    /// Period of a strongly connected graph: the gcd over all edges `u -> v` of
    /// `level(u) + 1 - level(v)`, where levels are BFS distances from vertex 1.
    /// Returns `None` when the graph is not strongly connected.
    pub fn period(&self) -> Option<u64> {
        let forward = self.bfs_levels(false);
        let backward = self.bfs_levels(true);
        if forward.iter().chain(&backward).any(Option::is_none) {
            return None;
        }
        Some(self.period_from_levels(&forward))
    }

    fn period_from_levels(&self, levels: &[Option<u64>]) -> u64 {
        let mut g = 0u64;
        for e in &self.edges {
            let (Some(lu), Some(lv)) = (levels[e.initial - 1], levels[e.terminal - 1]) else {
                continue;
            };
            g = gcd(g, (lu + 1).abs_diff(lv));
        }
        g
    }

    fn bfs_levels(&self, reversed: bool) -> Vec<Option<u64>> {
        let mut adjacency = vec![Vec::new(); self.vertex_count];
        for e in &self.edges {
            let (from, to) = if reversed {
                (e.terminal, e.initial)
            } else {
                (e.initial, e.terminal)
            };
            adjacency[from - 1].push(to - 1);
        }
        let mut levels = vec![None; self.vertex_count];
        levels[0] = Some(0);
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            let next = levels[u].map(|l| l + 1);
            for &v in &adjacency[u] {
                if levels[v].is_none() {
                    levels[v] = next;
                    queue.push_back(v);
                }
            }
        }
        levels
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
