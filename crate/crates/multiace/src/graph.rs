//! Atomic configurations, neighbor graphs under a cutoff, element tables
//! and dataset statistics.
//!
//! Open boundary conditions only: these are molecular systems, periodic
//! cells are rejected at the parsing layer. Neighbor search is the exact
//! O(N^2) double loop; edge lists are kept in a canonical order (receiver,
//! then displacement, lexicographically) so that summations downstream are
//! bitwise reproducible under atom relabeling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MaceError, Result};
use crate::radial::R_MIN;

/// A molecular configuration, optionally labeled with a reference total
/// energy (eV) and per-atom forces (eV/A).
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub positions: Vec<[f64; 3]>,
    pub elements: Vec<String>,
    pub energy: Option<f64>,
    pub forces: Option<Vec<[f64; 3]>>,
}

impl Configuration {
    pub fn new(positions: Vec<[f64; 3]>, elements: Vec<String>) -> Configuration {
        Configuration { positions, elements, energy: None, forces: None }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.elements.len() {
            return Err(MaceError::data(format!(
                "{} positions but {} element labels",
                self.positions.len(),
                self.elements.len()
            )));
        }
        if let Some(f) = &self.forces {
            if f.len() != self.positions.len() {
                return Err(MaceError::data(format!(
                    "forces array has {} rows for {} atoms",
                    f.len(),
                    self.positions.len()
                )));
            }
        }
        for p in &self.positions {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(MaceError::data("non-finite position"));
            }
        }
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let d = distance(&self.positions[i], &self.positions[j]);
                if d < R_MIN {
                    return Err(MaceError::data(format!(
                        "atoms {i} and {j} are {d:.6} A apart, below the {R_MIN} A guard"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Atom visit order keyed by position instead of index, so that sums
    /// over atoms do not depend on the labeling.
    pub fn canonical_atom_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let pa = &self.positions[a];
            let pb = &self.positions[b];
            pa.partial_cmp(pb).unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// A directed edge `sender -> receiver` with displacement
/// `r_sender - r_receiver`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub receiver: usize,
    pub sender: usize,
    pub disp: [f64; 3],
    pub dist: f64,
}

/// Directed neighbor graph under a cutoff; `(i, j)` and `(j, i)` are stored
/// independently.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub n_atoms: usize,
    pub r_cut: f64,
    /// Sorted by `(receiver, disp)` lexicographically.
    pub edges: Vec<Edge>,
    /// Half-open ranges into `edges`, one per receiver atom.
    pub ranges: Vec<(usize, usize)>,
}

impl NeighborGraph {
    pub fn edges_of(&self, receiver: usize) -> &[Edge] {
        let (a, b) = self.ranges[receiver];
        &self.edges[a..b]
    }

    pub fn neighbor_count(&self, receiver: usize) -> usize {
        let (a, b) = self.ranges[receiver];
        b - a
    }
}

/// Exact directed neighbor graph: an edge exists iff the distance is
/// strictly below `r_cut` and the atoms are distinct.
pub fn build_neighbor_graph(cfg: &Configuration, r_cut: f64) -> Result<NeighborGraph> {
    if r_cut <= 0.0 {
        return Err(MaceError::config("r_cut must be positive"));
    }
    cfg.validate()?;
    let n = cfg.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distance(&cfg.positions[i], &cfg.positions[j]);
            if d < r_cut {
                let disp = [
                    cfg.positions[j][0] - cfg.positions[i][0],
                    cfg.positions[j][1] - cfg.positions[i][1],
                    cfg.positions[j][2] - cfg.positions[i][2],
                ];
                edges.push(Edge { receiver: i, sender: j, disp, dist: d });
            }
        }
    }
    edges.sort_by(|a, b| {
        (a.receiver, a.disp)
            .partial_cmp(&(b.receiver, b.disp))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranges = vec![(0, 0); n];
    let mut start = 0;
    for i in 0..n {
        let mut end = start;
        while end < edges.len() && edges[end].receiver == i {
            end += 1;
        }
        ranges[i] = (start, end);
        start = end;
    }
    Ok(NeighborGraph { n_atoms: n, r_cut, edges, ranges })
}

/// Ordered element vocabulary with optional per-element reference energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementTable {
    pub symbols: Vec<String>,
    /// Isolated-atom reference energies (eV), aligned with `symbols`.
    pub e0: Option<Vec<f64>>,
}

impl ElementTable {
    pub fn new(symbols: Vec<String>) -> Result<ElementTable> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.clone()) {
                return Err(MaceError::data(format!("duplicate element symbol '{s}'")));
            }
        }
        Ok(ElementTable { symbols, e0: None })
    }

    /// Vocabulary collected from a set of frames, sorted for determinism.
    pub fn from_frames(frames: &[Configuration]) -> Result<ElementTable> {
        let mut symbols: Vec<String> = frames
            .iter()
            .flat_map(|f| f.elements.iter().cloned())
            .collect();
        symbols.sort();
        symbols.dedup();
        ElementTable::new(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| MaceError::data(format!("element '{symbol}' not in table")))
    }

    pub fn e0_of(&self, symbol: &str) -> Result<f64> {
        let idx = self.index_of(symbol)?;
        self.e0
            .as_ref()
            .map(|v| v[idx])
            .ok_or_else(|| MaceError::data("element table carries no reference energies"))
    }
}

/// Standard basis vector at the element's table position.
pub fn one_hot(element: &str, table: &ElementTable) -> Result<Vec<f64>> {
    let idx = table.index_of(element)?;
    let mut v = vec![0.0; table.len()];
    v[idx] = 1.0;
    Ok(v)
}

/// Aggregate statistics of a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Mean over all atoms of the neighbor count under `r_cut`.
    pub avg_neighbors: f64,
    /// Arithmetic mean of total energies, when any frame carries one.
    pub mean_energy: Option<f64>,
    /// Standard deviation of total energies.
    pub energy_std: Option<f64>,
    /// Root mean square over all force components.
    pub force_rms: Option<f64>,
    pub per_element_counts: BTreeMap<String, usize>,
    pub n_frames: usize,
    pub n_atoms: usize,
}

pub fn dataset_statistics(frames: &[Configuration], r_cut: f64) -> Result<DatasetStats> {
    if frames.is_empty() {
        return Err(MaceError::data("dataset is empty"));
    }
    let mut neighbor_sum = 0usize;
    let mut n_atoms = 0usize;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut energies = Vec::new();
    let mut force_sq_sum = 0.0;
    let mut n_force_components = 0usize;
    for f in frames {
        let g = build_neighbor_graph(f, r_cut)?;
        for i in 0..f.len() {
            neighbor_sum += g.neighbor_count(i);
        }
        n_atoms += f.len();
        for e in &f.elements {
            *counts.entry(e.clone()).or_insert(0) += 1;
        }
        if let Some(e) = f.energy {
            energies.push(e);
        }
        if let Some(forces) = &f.forces {
            for row in forces {
                for v in row {
                    force_sq_sum += v * v;
                    n_force_components += 1;
                }
            }
        }
    }
    let mean_energy = if energies.is_empty() {
        None
    } else {
        Some(energies.iter().sum::<f64>() / energies.len() as f64)
    };
    let energy_std = mean_energy.map(|m| {
        (energies.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / energies.len() as f64).sqrt()
    });
    let force_rms = if n_force_components == 0 {
        None
    } else {
        Some((force_sq_sum / n_force_components as f64).sqrt())
    };
    Ok(DatasetStats {
        avg_neighbors: neighbor_sum as f64 / n_atoms as f64,
        mean_energy,
        energy_std,
        force_rms,
        per_element_counts: counts,
        n_frames: frames.len(),
        n_atoms,
    })
}
