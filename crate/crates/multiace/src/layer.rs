//! One message-passing layer: one-particle basis, density projection,
//! product basis, Clebsch-Gordan symmetrization and the feature update.
//!
//! Two coupling modes cover the spectrum between the classic linear model
//! and equivariant message passing:
//!
//! * **feature contraction** - the neighbor's equivariant features enter the
//!   coupled index; with correlation order 1 this is exactly the equivariant
//!   convolution, with a per-`(l1, l2, L)` learnable radial;
//! * **discrete elements** - the coupled index enumerates
//!   `(radial n, neighbor element)` with an index-selector attribute
//!   function, the classic linear expansion.
//!
//! Products of the density projection are taken only over lexicographically
//! sorted index tuples; permutation multiplicity is absorbed into the
//! coupling coefficients.
//!
//! The functions here are the eager reference implementations used by the
//! verification suites; models execute the same math through compiled
//! programs (see `model::build`), and the two paths are tested against each
//! other.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::PathShape;
use crate::error::{MaceError, Result};
use crate::radial::RadialVariant;
use crate::so3::{generalized_coupling, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfConnection {
    /// Element-conditioned bilinear map added to the fresh features.
    Residual,
    /// Element-conditioned bilinear map replacing the fresh features.
    Simplified,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageNorm {
    None,
    SqrtAvgNeighbors,
    AvgNeighbors,
}

impl MessageNorm {
    pub fn lambda(&self, avg_neighbors: f64) -> f64 {
        match self {
            MessageNorm::None => 1.0,
            MessageNorm::SqrtAvgNeighbors => avg_neighbors.max(1e-12).sqrt(),
            MessageNorm::AvgNeighbors => avg_neighbors.max(1e-12),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMode {
    FeatureContraction,
    DiscreteElements,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Correlation order of this layer's message.
    pub nu: usize,
    /// Angular order of the spherical harmonics in the one-particle basis.
    pub l_max: usize,
    /// Maximum equivariance order of the output message.
    pub l_max_out: usize,
    /// Uncoupled channel count.
    pub n_channels: usize,
    pub coupling: CouplingMode,
    pub radial: RadialVariant,
    pub self_connection: SelfConnection,
    pub message_norm: MessageNorm,
    /// Cap on the summed polynomial degree `sum(n_i + l_i)` of discrete-mode
    /// basis functions.
    pub max_total_degree: Option<usize>,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nu == 0 {
            return Err(MaceError::config("correlation order nu must be at least 1"));
        }
        if self.l_max_out > self.l_max * self.nu + self.l_max {
            // with feature contraction each factor contributes up to
            // 2*l_max; the simple bound catches plainly impossible requests
            return Err(MaceError::config(format!(
                "l_max_out {} unreachable with nu {} and l_max {}",
                self.l_max_out, self.nu, self.l_max
            )));
        }
        Ok(())
    }
}

/// One `(l1, l2) -> L` contraction path of the correlation-order-1
/// convolution. Parity-allowed (`l1 + l2 + L` even) and triangle-valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvPath {
    pub l1: usize,
    pub l2: usize,
    pub l_out: usize,
}

/// Enumerate convolution paths from the spherical harmonics (`l1 <= l_max`)
/// and the input feature orders into output orders `<= l_out_max`.
pub fn conv_paths(l_max: usize, input_ls: &[usize], l_out_max: usize) -> Vec<ConvPath> {
    let mut paths = Vec::new();
    for l_out in 0..=l_out_max {
        for l1 in 0..=l_max {
            for &l2 in input_ls {
                let triangle = l_out + l2 >= l1 && l_out + l1 >= l2 && l1 + l2 >= l_out;
                let parity = (l1 + l2 + l_out) % 2 == 0;
                if triangle && parity {
                    paths.push(ConvPath { l1, l2, l_out });
                }
            }
        }
    }
    paths
}

/// Path shape of the per-atom coupled tensor for a path list.
pub fn conv_path_shape(k: usize, paths: &[ConvPath]) -> Arc<PathShape> {
    Arc::new(PathShape::new(k, paths.iter().map(|p| p.l_out).collect()))
}

/// One factor species of the general product basis.
///
/// * discrete mode: `(n, l, z)` - radial index, harmonic order, neighbor
///   element; contributes `l` to the coupling chain;
/// * feature mode: `(l1, l2)` - harmonic order and neighbor feature order;
///   contributes `(l1, l2)` to the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Species {
    Discrete { n: usize, l: usize, z: usize },
    Feature { l1: usize, l2: usize },
}

impl Species {
    pub fn chain_ls(&self) -> Vec<usize> {
        match self {
            Species::Discrete { l, .. } => vec![*l],
            Species::Feature { l1, l2 } => vec![*l1, *l2],
        }
    }

    /// Number of components of the species' `m` axis.
    pub fn m_dim(&self) -> usize {
        match self {
            Species::Discrete { l, .. } => 2 * l + 1,
            Species::Feature { l1, l2 } => (2 * l1 + 1) * (2 * l2 + 1),
        }
    }

    fn degree(&self) -> usize {
        match self {
            Species::Discrete { n, l, .. } => n + l,
            Species::Feature { l1, .. } => 1 + l1,
        }
    }
}

/// Index space of the density projection `A_{i,kv}` for one layer: species
/// blocks with their component counts.
#[derive(Debug, Clone)]
pub struct DensityIndex {
    pub species: Vec<Species>,
    pub offsets: Vec<usize>,
    pub len: usize,
}

impl DensityIndex {
    pub fn new(species: Vec<Species>) -> DensityIndex {
        let mut offsets = Vec::with_capacity(species.len());
        let mut len = 0;
        for s in &species {
            offsets.push(len);
            len += s.m_dim();
        }
        DensityIndex { species, offsets, len }
    }

    pub fn species_index(&self, s: &Species) -> Option<usize> {
        self.species.iter().position(|q| q == s)
    }

    /// Flat index of one species component.
    pub fn flat(&self, species_idx: usize, m_component: usize) -> usize {
        self.offsets[species_idx] + m_component
    }
}

/// Species set of the discrete one-particle basis.
pub fn discrete_species(n_basis: usize, l_max: usize, n_elements: usize) -> Vec<Species> {
    let mut out = Vec::new();
    for z in 0..n_elements {
        for l in 0..=l_max {
            for n in 1..=n_basis {
                out.push(Species::Discrete { n, l, z });
            }
        }
    }
    out
}

/// Species set of the feature-contraction one-particle basis.
pub fn feature_species(l_max: usize, input_ls: &[usize]) -> Vec<Species> {
    let mut out = Vec::new();
    for &l2 in input_ls {
        for l1 in 0..=l_max {
            out.push(Species::Feature { l1, l2 });
        }
    }
    out
}

/// One symmetrized basis function: a sorted species multiset with one
/// admissible coupling chain.
#[derive(Debug, Clone)]
pub struct BasisFunction {
    pub species: Vec<usize>,
    pub chain: Vec<usize>,
    pub l_out: usize,
}

/// Sparse coefficients taking monomial products to symmetrized basis
/// values: `(product index, m_out index, coefficient)` per basis function.
#[derive(Debug, Clone)]
pub struct BasisPlan {
    pub index: DensityIndex,
    pub nu: usize,
    /// sorted tuples of flat A-indices, one per materialized product
    pub products: Vec<Vec<u32>>,
    pub functions: Vec<BasisFunction>,
    /// per basis function: entries `(product, m_out, coeff)`
    pub coefficients: Vec<Vec<(u32, u8, f64)>>,
}

impl BasisPlan {
    /// Enumerate sorted species multisets up to order `nu`, their coupling
    /// chains into every parity-allowed output order `<= l_out_max`, and
    /// the sparse product coefficients with permutation multiplicity
    /// absorbed onto sorted product tuples.
    pub fn build(
        index: DensityIndex,
        nu: usize,
        l_out_max: usize,
        max_total_degree: Option<usize>,
    ) -> Result<BasisPlan> {
        let n_species = index.species.len();
        let mut products: Vec<Vec<u32>> = Vec::new();
        let mut product_ids: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut functions = Vec::new();
        let mut coefficients = Vec::new();

        // sorted multisets of species indices, orders 1..=nu
        let mut multisets: Vec<Vec<usize>> = Vec::new();
        let mut stack: Vec<Vec<usize>> = (0..n_species).map(|s| vec![s]).collect();
        while let Some(ms) = stack.pop() {
            let degree: usize = ms.iter().map(|&s| index.species[s].degree()).sum();
            if let Some(cap) = max_total_degree {
                if degree > cap {
                    continue;
                }
            }
            multisets.push(ms.clone());
            if ms.len() < nu {
                let last = *ms.last().unwrap();
                for s in last..n_species {
                    let mut next = ms.clone();
                    next.push(s);
                    stack.push(next);
                }
            }
        }
        multisets.sort();

        for ms in &multisets {
            let chain_ls: Vec<usize> =
                ms.iter().flat_map(|&s| index.species[s].chain_ls()).collect();
            let total_l: usize = chain_ls.iter().sum();
            for l_out in 0..=l_out_max {
                if (total_l + l_out) % 2 != 0 {
                    continue;
                }
                let table = generalized_coupling(&chain_ls, l_out)?;
                for path in &table.paths {
                    let mut entry_map: HashMap<(u32, u8), f64> = HashMap::new();
                    for e in &path.entries {
                        // split the flat m-list back into per-factor
                        // component indices and build the sorted product
                        // tuple of flat A indices
                        let mut tuple: Vec<u32> = Vec::with_capacity(ms.len());
                        let mut mi = 0;
                        for &s in ms {
                            let sp = index.species[s];
                            let comp = match sp {
                                Species::Discrete { l, .. } => {
                                    let m = e.m[mi];
                                    mi += 1;
                                    (m + l as i8) as usize
                                }
                                Species::Feature { l1, l2 } => {
                                    let m1 = e.m[mi];
                                    let m2 = e.m[mi + 1];
                                    mi += 2;
                                    ((m1 + l1 as i8) as usize) * (2 * l2 + 1)
                                        + (m2 + l2 as i8) as usize
                                }
                            };
                            tuple.push(index.flat(s, comp) as u32);
                        }
                        debug_assert_eq!(mi, e.m.len());
                        tuple.sort_unstable();
                        let next_id = products.len() as u32;
                        let pid = *product_ids.entry(tuple.clone()).or_insert_with(|| {
                            products.push(tuple);
                            next_id
                        });
                        let m_out = (e.m_out + l_out as i8) as u8;
                        *entry_map.entry((pid, m_out)).or_insert(0.0) += e.coeff;
                    }
                    let mut entries: Vec<(u32, u8, f64)> = entry_map
                        .into_iter()
                        .filter(|(_, c)| c.abs() > 1e-14)
                        .map(|((p, m), c)| (p, m, c))
                        .collect();
                    if entries.is_empty() {
                        continue;
                    }
                    entries.sort_by_key(|(p, m, _)| (*p, *m));
                    functions.push(BasisFunction {
                        species: ms.clone(),
                        chain: path.chain.clone(),
                        l_out,
                    });
                    coefficients.push(entries);
                }
            }
        }
        Ok(BasisPlan { index, nu, products, functions, coefficients })
    }

    /// Message path shape: one path per basis function, carrying its
    /// output order.
    pub fn path_shape(&self, k: usize) -> Arc<PathShape> {
        Arc::new(PathShape::new(k, self.functions.iter().map(|f| f.l_out).collect()))
    }

    /// Evaluate the monomial products of one channel's density vector.
    pub fn eval_products(&self, a: &[f64]) -> Vec<f64> {
        assert_eq!(a.len(), self.index.len);
        self.products
            .iter()
            .map(|tuple| tuple.iter().map(|&i| a[i as usize]).product())
            .collect()
    }

    /// Evaluate all symmetrized basis values from the products of one
    /// channel: output is `[function][m_out]` flattened.
    pub fn eval_symmetrized(&self, products: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for (f, entries) in self.functions.iter().zip(&self.coefficients) {
            let dim = 2 * f.l_out + 1;
            let mut block = vec![0.0; dim];
            for &(p, m, c) in entries {
                block[m as usize] += c * products[p as usize];
            }
            out.extend_from_slice(&block);
        }
        out
    }
}

/// Eager density projection: canonical-order sum of per-edge basis vectors
/// divided by the message normalization. Empty neighborhoods yield zeros.
///
/// Edge vectors must share a length; they are summed in the order given,
/// so callers pass them in the graph's canonical edge order.
pub fn density_projection(edge_values: &[Vec<f64>], len: usize, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for v in edge_values {
        debug_assert_eq!(v.len(), len);
        for (o, x) in out.iter_mut().zip(v) {
            *o += *x;
        }
    }
    if lambda != 1.0 {
        let inv = 1.0 / lambda;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Eager correlation-order-1 message: scale each path block by its
/// learnable weight and pool into canonical `L` blocks.
pub fn mix_paths(shape: &PathShape, weights: &[f64], coupled: &[f64]) -> Vec<f64> {
    assert_eq!(weights.len(), shape.weights_len());
    assert_eq!(coupled.len(), shape.tensor_len());
    let mut out = vec![0.0; shape.out_layout.len()];
    let mut off = 0;
    for (p, &l) in shape.path_ls.iter().enumerate() {
        let dim = 2 * l + 1;
        let block = shape.out_layout.block_for_l(l).unwrap();
        let out_off = shape.out_layout.offset(block);
        for k in 0..shape.k {
            let w = weights[p * shape.k + k];
            for m in 0..dim {
                out[out_off + k * dim + m] += w * coupled[off + k * dim + m];
            }
        }
        off += shape.k * dim;
    }
    out
}

/// Canonical message layout for a path list.
pub fn message_layout(shape: &PathShape) -> Arc<Layout> {
    shape.out_layout.clone()
}
