//! Compilation of one configuration into an executable program.
//!
//! The program topology depends only on the neighbor graph, so compiled
//! frames are cached across a training run and re-executed with fresh
//! parameter values. Summations run in the graph's canonical edge order
//! and in position-sorted atom order, which makes results bitwise
//! reproducible under atom relabeling.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Builder, NodeId, Program, SparseLinearMap};
use crate::error::{MaceError, Result};
use crate::graph::{build_neighbor_graph, Configuration, NeighborGraph};
use crate::layer::{CouplingMode, SelfConnection};
use crate::model::{block_linear_shape, LayerMode, Model, Preset, Readout};
use crate::radial::RadialVariant;
use crate::so3::Layout;

/// A configuration compiled against a model architecture.
#[derive(Debug)]
pub struct CompiledFrame {
    pub program: Program,
    pub graph: NeighborGraph,
    /// element table index per atom
    pub z: Vec<usize>,
    pub n_atoms: usize,
}

/// Block-diagonal map `input -> output` that silently skips output blocks
/// whose order is absent from the input (used by residual self-connections
/// when the feature set grows between layers).
fn partial_block_shape(
    input: &Layout,
    output: &Layout,
) -> Arc<crate::autodiff::BlockLinearShape> {
    use crate::autodiff::{BlockLinearShape, BlockMM};
    let mut blocks = Vec::new();
    let mut w_off = 0;
    for (bi, ob) in output.blocks().iter().enumerate() {
        if let Some(ib_idx) = input.block_for_l(ob.l) {
            let ib = input.blocks()[ib_idx];
            blocks.push(BlockMM {
                dim: 2 * ob.l + 1,
                k_out: ob.channels,
                k_in: ib.channels,
                w_off,
                x_off: input.offset(ib_idx),
                y_off: output.offset(bi),
            });
            w_off += ob.channels * ib.channels;
        }
    }
    Arc::new(BlockLinearShape { blocks, w_len: w_off, x_len: input.len(), y_len: output.len() })
}

pub fn compile(model: &Model, cfg: &Configuration) -> Result<CompiledFrame> {
    let arch = &model.arch;
    let spec = &arch.spec;
    let graph = build_neighbor_graph(cfg, spec.r_cut())?;
    let n = cfg.len();
    let z: Vec<usize> = cfg
        .elements
        .iter()
        .map(|e| model.elements.index_of(e))
        .collect::<Result<_>>()?;

    let mut b = Builder::new();
    let pos = b.positions(3 * n);

    // declare every parameter block so gradients stay congruent
    let param_nodes: Vec<NodeId> = arch
        .blocks
        .iter()
        .enumerate()
        .map(|(i, blk)| b.param(i, blk.len()))
        .collect();

    // displacements of all edges in canonical order
    let n_edges = graph.edges.len();
    let mut disp_entries = Vec::with_capacity(6 * n_edges);
    for (e, edge) in graph.edges.iter().enumerate() {
        for d in 0..3 {
            disp_entries.push(((3 * edge.sender + d) as u32, (3 * e + d) as u32, 1.0));
            disp_entries.push(((3 * edge.receiver + d) as u32, (3 * e + d) as u32, -1.0));
        }
    }
    let disp_all = if n_edges > 0 {
        Some(b.sparse_linear(
            Arc::new(SparseLinearMap { n_in: 3 * n, n_out: 3 * n_edges, entries: disp_entries }),
            pos,
        ))
    } else {
        None
    };

    struct EdgeGeom {
        y: NodeId,
        bessel: NodeId,
    }
    let mut edges_geom = Vec::with_capacity(n_edges);
    for e in 0..n_edges {
        let disp = b.slice(disp_all.unwrap(), 3 * e, 3);
        let r = b.norm3(disp);
        let u = b.normalize3(disp);
        let y = b.ylm(u, arch.ylm.clone());
        let bessel = b.bessel(
            r,
            spec.radial.n_basis,
            spec.radial.r_cut,
            spec.radial.envelope_degree,
        );
        edges_geom.push(EdgeGeom { y, bessel });
    }

    let mut aux: BTreeMap<String, NodeId> = BTreeMap::new();
    let is_linear_basis = spec.preset == Preset::LinearAce;

    // chemical embedding
    let k0 = spec.layers[0].n_channels;
    let mut h: Vec<NodeId> = Vec::new();
    if !is_linear_basis {
        let embed = param_nodes[arch.block_id("embed.w").unwrap()];
        h = (0..n).map(|i| b.slice(embed, z[i] * k0, k0)).collect();
    }

    // per-atom readout contributions, assembled along the way
    let mut site_terms: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    let mut term_layers: Vec<Vec<NodeId>> = Vec::new(); // per readout, per atom
    let mut residual_sites: Option<Vec<NodeId>> = None;
    let mut basis_nodes: Vec<NodeId> = Vec::new();

    for (t, larch) in arch.layers.iter().enumerate() {
        let lspec = &larch.spec;
        let k = lspec.n_channels;
        let lambda = lspec.message_norm.lambda(model.avg_neighbors);

        // premix input features
        let hp: Vec<NodeId> = if let Some(premix) = larch.premix {
            let premix_out = Arc::new(Layout::new(
                larch
                    .input_layout
                    .blocks()
                    .iter()
                    .map(|blk| crate::so3::Block { channels: k, l: blk.l })
                    .collect(),
            ));
            let shape = partial_block_shape(&larch.input_layout, &premix_out);
            let w = param_nodes[premix];
            h.iter().map(|&hi| b.block_linear(shape.clone(), w, hi)).collect()
        } else {
            h.clone()
        };

        // per-edge radial values
        let radial_per_edge: Vec<Option<NodeId>> = (0..n_edges)
            .map(|e| {
                if larch.radial_n_out == 0 && lspec.radial != RadialVariant::FixedOrthogonal {
                    return None;
                }
                match lspec.radial {
                    RadialVariant::FixedOrthogonal => Some(edges_geom[e].bessel),
                    RadialVariant::AgnosticMlp => {
                        let mut x = edges_geom[e].bessel;
                        let mut prev = spec.radial.n_basis;
                        let n_blocks = larch.radial_blocks.len();
                        for (bi, &blk) in larch.radial_blocks.iter().enumerate() {
                            let rows = arch.blocks[blk].shape[0];
                            let w = param_nodes[blk];
                            x = b.matvec(w, x, rows, prev);
                            if bi + 1 < n_blocks {
                                x = b.activation(
                                    x,
                                    crate::act::Act::Silu,
                                    1.0 / crate::act::Act::Silu.normal_rms(),
                                );
                            }
                            prev = rows;
                        }
                        Some(x)
                    }
                    RadialVariant::ElementDependent => {
                        let blk = larch.radial_blocks[0];
                        let n_out = arch.blocks[blk].shape[1];
                        let n_basis = arch.blocks[blk].shape[2];
                        let zj = z[graph.edges[e].sender];
                        let w_all = param_nodes[blk];
                        let w = b.slice(w_all, zj * n_out * n_basis, n_out * n_basis);
                        Some(b.matvec(w, edges_geom[e].bessel, n_out, n_basis))
                    }
                }
            })
            .collect();

        // message per atom
        let messages: Vec<NodeId> = match &larch.mode {
            LayerMode::Conv { shape, edge_map, .. } => {
                let mut phi: Vec<NodeId> = Vec::with_capacity(n_edges);
                for e in 0..n_edges {
                    let sender = graph.edges[e].sender;
                    let u = b.sparse_bilinear(edge_map.clone(), edges_geom[e].y, hp[sender]);
                    let r = radial_per_edge[e].expect("conv layers carry a radial map");
                    phi.push(b.path_scale(shape.clone(), r, u));
                }
                let tensor_len = shape.tensor_len();
                let w_mix = param_nodes[larch.path_mix.unwrap()];
                (0..n)
                    .map(|i| {
                        let (a0, a1) = graph.ranges[i];
                        let a = if a0 == a1 {
                            b.zeros(tensor_len)
                        } else {
                            let summed = b.sum(&phi[a0..a1].to_vec());
                            b.scale(summed, 1.0 / lambda)
                        };
                        b.path_mix(shape.clone(), w_mix, a)
                    })
                    .collect()
            }
            LayerMode::General { plan, shape, scatter } => {
                debug_assert_eq!(lspec.coupling, CouplingMode::DiscreteElements);
                let mut phi: Vec<NodeId> = Vec::with_capacity(n_edges);
                for e in 0..n_edges {
                    let zj = z[graph.edges[e].sender];
                    phi.push(b.sparse_bilinear(
                        scatter[zj].clone(),
                        edges_geom[e].bessel,
                        edges_geom[e].y,
                    ));
                }
                let density: Vec<NodeId> = (0..n)
                    .map(|i| {
                        let (a0, a1) = graph.ranges[i];
                        if a0 == a1 {
                            b.zeros(plan.index.len)
                        } else {
                            let summed = b.sum(&phi[a0..a1].to_vec());
                            if lambda != 1.0 {
                                b.scale(summed, 1.0 / lambda)
                            } else {
                                summed
                            }
                        }
                    })
                    .collect();
                let monomials = Arc::new(crate::autodiff::MonomialMap {
                    n_in: plan.index.len,
                    terms: plan.products.clone(),
                });
                if is_linear_basis {
                    // invariant basis values feed the linear readout directly
                    let mut entries = Vec::new();
                    let mut col = 0usize;
                    for (f, func) in plan.functions.iter().enumerate() {
                        if func.l_out != 0 {
                            continue;
                        }
                        for &(p, _m, c) in &plan.coefficients[f] {
                            entries.push((p, col as u32, c));
                        }
                        col += 1;
                    }
                    let basis_map = Arc::new(SparseLinearMap {
                        n_in: plan.products.len(),
                        n_out: col,
                        entries,
                    });
                    let coeffs = param_nodes[arch.block_id("ace.coeffs").unwrap()];
                    for i in 0..n {
                        let prods = b.monomials(monomials.clone(), density[i]);
                        let basis = b.sparse_linear(basis_map.clone(), prods);
                        aux.insert(format!("basis.{i}"), basis);
                        basis_nodes.push(basis);
                        let ci = b.slice(coeffs, z[i] * col, col);
                        let site = b.dot(ci, basis);
                        site_terms[i].push(site);
                    }
                    // per-element aggregated basis: one design-matrix column
                    // block per element
                    for zz in 0..model.elements.len() {
                        let members: Vec<NodeId> = (0..n)
                            .filter(|&i| z[i] == zz)
                            .map(|i| basis_nodes[i])
                            .collect();
                        let node = if members.is_empty() {
                            b.zeros(col)
                        } else {
                            b.sum(&members)
                        };
                        aux.insert(format!("basis_sum.{zz}"), node);
                    }
                    // correlation-order-resolved contributions
                    for order in 1..=lspec.nu {
                        let selected: Vec<u32> = plan
                            .functions
                            .iter()
                            .filter(|f| f.l_out == 0)
                            .enumerate()
                            .filter(|(_, f)| f.species.len() == order)
                            .map(|(c, _)| c as u32)
                            .collect();
                        if selected.is_empty() {
                            continue;
                        }
                        let select_map = Arc::new(SparseLinearMap {
                            n_in: col,
                            n_out: selected.len(),
                            entries: selected
                                .iter()
                                .enumerate()
                                .map(|(row, &src)| (src, row as u32, 1.0))
                                .collect(),
                        });
                        let per_atom: Vec<NodeId> = (0..n)
                            .map(|i| {
                                let ci = b.slice(coeffs, z[i] * col, col);
                                let bsel = b.sparse_linear(select_map.clone(), basis_nodes[i]);
                                let csel = b.sparse_linear(select_map.clone(), ci);
                                b.dot(csel, bsel)
                            })
                            .collect();
                        term_layers.push(per_atom);
                    }
                    continue;
                }
                // general discrete message (custom specs)
                let mut entries = Vec::new();
                for (f, func) in plan.functions.iter().enumerate() {
                    let dim = 2 * func.l_out + 1;
                    let off = shape.path_offset(f);
                    for &(p, m, c) in &plan.coefficients[f] {
                        debug_assert!((m as usize) < dim);
                        entries.push((p, (off + m as usize) as u32, c));
                    }
                }
                let sym_map = Arc::new(SparseLinearMap {
                    n_in: plan.products.len(),
                    n_out: shape.tensor_len(),
                    entries,
                });
                let w_mix = param_nodes[larch.path_mix.unwrap()];
                (0..n)
                    .map(|i| {
                        let prods = b.monomials(monomials.clone(), density[i]);
                        let bt = b.sparse_linear(sym_map.clone(), prods);
                        b.path_mix(shape.clone(), w_mix, bt)
                    })
                    .collect()
            }
        };

        if is_linear_basis {
            continue;
        }

        // update: equivariant linear, optional gate, self-connection
        let update_shape = block_linear_shape(&larch.out_layout, &larch.out_layout)?;
        let w_upd = param_nodes[larch.update.unwrap()];
        let gate_act = spec.nonlinearity.act();
        let mut h_new: Vec<NodeId> = Vec::with_capacity(n);
        for i in 0..n {
            let mut fresh = b.block_linear(update_shape.clone(), w_upd, messages[i]);
            if let Some(act) = gate_act {
                fresh = b.gate(larch.out_layout.clone(), act, fresh);
            }
            let hi = match lspec.self_connection {
                SelfConnection::None => fresh,
                SelfConnection::Residual => {
                    let sc_shape = partial_block_shape(&larch.input_layout, &larch.out_layout);
                    let w_all = param_nodes[larch.self_conn.unwrap()];
                    let w = b.slice(w_all, z[i] * sc_shape.w_len, sc_shape.w_len);
                    let sc = b.block_linear(sc_shape, w, h[i]);
                    b.sum(&[fresh, sc])
                }
                SelfConnection::Simplified => {
                    let sc_shape = partial_block_shape(&larch.out_layout, &larch.out_layout);
                    let w_all = param_nodes[larch.self_conn.unwrap()];
                    let w = b.slice(w_all, z[i] * sc_shape.w_len, sc_shape.w_len);
                    b.block_linear(sc_shape, w, fresh)
                }
            };
            aux.insert(format!("h{t}.{i}"), hi);
            h_new.push(hi);
        }

        // per-layer linear readout
        if let Some(rblk) = larch.readout {
            let w = param_nodes[rblk];
            let l0 = larch.out_layout.block_for_l(0).ok_or_else(|| {
                MaceError::config(format!("layer {t} has no invariant block to read out"))
            })?;
            let off = larch.out_layout.offset(l0);
            let per_atom: Vec<NodeId> = (0..n)
                .map(|i| {
                    let x = b.slice(h_new[i], off, k);
                    let s = b.dot(w, x);
                    site_terms[i].push(s);
                    s
                })
                .collect();
            if spec.readout == Readout::FinalOnly && spec.nonlinearity != super::Nonlinearity::None
            {
                residual_sites = Some(per_atom);
            } else {
                term_layers.push(per_atom);
            }
        }

        // final nonlinear readout
        if spec.readout == Readout::PerLayerLinearFinalMlp && t + 1 == arch.layers.len() {
            let w1 = param_nodes[arch.block_id("readout_final.w1").unwrap()];
            let w2 = param_nodes[arch.block_id("readout_final.w2").unwrap()];
            let hidden = spec.readout_hidden;
            let l0 = larch.out_layout.block_for_l(0).unwrap();
            let off = larch.out_layout.offset(l0);
            let per_atom: Vec<NodeId> = (0..n)
                .map(|i| {
                    let x = b.slice(h_new[i], off, k);
                    let a1 = b.matvec(w1, x, hidden, k);
                    let a1n = b.activation(
                        a1,
                        spec.final_activation,
                        1.0 / spec.final_activation.normal_rms(),
                    );
                    let s = b.dot(w2, a1n);
                    site_terms[i].push(s);
                    s
                })
                .collect();
            residual_sites = Some(per_atom);
        }

        h = h_new;
    }

    // site energies and totals in position-canonical order
    let order = cfg.canonical_atom_order();
    let sites: Vec<NodeId> = (0..n)
        .map(|i| {
            let s = if site_terms[i].is_empty() {
                b.zeros(1)
            } else if site_terms[i].len() == 1 {
                site_terms[i][0]
            } else {
                b.sum(&site_terms[i])
            };
            aux.insert(format!("site.{i}"), s);
            s
        })
        .collect();
    let total = {
        let ordered: Vec<NodeId> = order.iter().map(|&i| sites[i]).collect();
        b.sum(&ordered)
    };
    for (ti, per_atom) in term_layers.iter().enumerate() {
        let ordered: Vec<NodeId> = order.iter().map(|&i| per_atom[i]).collect();
        let v = b.sum(&ordered);
        aux.insert(format!("term.{ti}"), v);
    }
    if let Some(res) = &residual_sites {
        let ordered: Vec<NodeId> = order.iter().map(|&i| res[i]).collect();
        let v = b.sum(&ordered);
        aux.insert("residual".into(), v);
    }

    Ok(CompiledFrame { program: b.finish(total, aux), graph, z, n_atoms: n })
}
