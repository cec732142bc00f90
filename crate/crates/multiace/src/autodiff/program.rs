//! A compiled computation graph over vector-valued nodes.
//!
//! Model evaluation is expressed once as a [`Program`] (topologically
//! ordered primitive ops with fixed sparsity), then executed on a reusable
//! [`Tape`] holding the node values. The executor is generic over
//! [`Scalar`], so one program serves the double-precision reference path,
//! the float32 evaluation path, and dual-number runs where a forward
//! tangent rides along both sweeps (reverse mode over duals yields exact
//! Hessian-vector products for the force-term parameter gradients).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::act::Act;
use crate::scalar::Scalar;
use crate::so3::{Layout, YlmTables};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct SparseLinearMap {
    pub n_in: usize,
    pub n_out: usize,
    /// `(input index, output index, coefficient)`
    pub entries: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct SparseBilinearMap {
    pub n_a: usize,
    pub n_b: usize,
    pub n_out: usize,
    /// `(a index, b index, output index, coefficient)`
    pub entries: Vec<(u32, u32, u32, f64)>,
}

/// Monomial products within a single input vector: one term per output.
#[derive(Debug, Clone)]
pub struct MonomialMap {
    pub n_in: usize,
    /// factor index lists; repeated factors allowed
    pub terms: Vec<Vec<u32>>,
}

/// One dense channel-mixing block of an equivariant linear map.
#[derive(Debug, Clone, Copy)]
pub struct BlockMM {
    pub dim: usize,
    pub k_out: usize,
    pub k_in: usize,
    pub w_off: usize,
    pub x_off: usize,
    pub y_off: usize,
}

#[derive(Debug, Clone)]
pub struct BlockLinearShape {
    pub blocks: Vec<BlockMM>,
    pub w_len: usize,
    pub x_len: usize,
    pub y_len: usize,
}

/// Path structure of a per-atom coupled tensor `[path][k][M]` with one
/// output order per path.
#[derive(Debug, Clone)]
pub struct PathShape {
    pub k: usize,
    pub path_ls: Vec<usize>,
    /// canonical layout (sorted distinct orders, `k` channels each)
    pub out_layout: Arc<Layout>,
}

impl PathShape {
    pub fn new(k: usize, path_ls: Vec<usize>) -> PathShape {
        let mut ls: Vec<usize> = path_ls.clone();
        ls.sort();
        ls.dedup();
        let out_layout = Arc::new(Layout::new(
            ls.iter().map(|&l| crate::so3::Block { channels: k, l }).collect(),
        ));
        PathShape { k, path_ls, out_layout }
    }

    pub fn tensor_len(&self) -> usize {
        self.path_ls.iter().map(|l| self.k * (2 * l + 1)).sum()
    }

    pub fn weights_len(&self) -> usize {
        self.k * self.path_ls.len()
    }

    pub fn path_offset(&self, p: usize) -> usize {
        self.path_ls[..p].iter().map(|l| self.k * (2 * l + 1)).sum()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf fed from the positions input (length fixed at build time).
    Positions,
    /// Leaf fed from one named parameter block.
    Param(usize),
    Constant(Arc<Vec<f64>>),
    Slice { offset: usize, len: usize },
    Concat,
    /// Elementwise sum of all inputs.
    Sum,
    Scale(f64),
    /// Pointwise activation followed by a fixed rescale.
    Activation { act: Act, scale: f64 },
    /// Euclidean norm of a 3-vector.
    Norm3,
    /// 3-vector scaled to unit length.
    Normalize3,
    /// Spherical harmonics of a unit vector, blocks `l = 0..=l_max`.
    Ylm(Arc<YlmTables>),
    /// Enveloped Bessel embedding of a distance.
    Bessel { n_basis: usize, r_cut: f64, p: u32 },
    /// Dense matrix-vector product, inputs `(w, x)`, `w` row-major.
    MatVec { rows: usize, cols: usize },
    /// Scalar product of two equal-length inputs.
    Dot,
    /// Block-diagonal equivariant linear map, inputs `(w, x)`.
    BlockLinear(Arc<BlockLinearShape>),
    /// Per-(path, channel) scaling of a coupled tensor, inputs `(r, u)`.
    PathScale(Arc<PathShape>),
    /// Learnable path mixing into canonical blocks, inputs `(w, b)`.
    PathMix(Arc<PathShape>),
    /// Gated nonlinearity on a canonical layout.
    Gate { layout: Arc<Layout>, act: Act },
    SparseLinear(Arc<SparseLinearMap>),
    SparseBilinear(Arc<SparseBilinearMap>),
    Monomials(Arc<MonomialMap>),
}

#[derive(Debug, Clone)]
pub struct OpNode {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Program {
    pub nodes: Vec<OpNode>,
    pub n_positions: usize,
    pub param_lens: Vec<usize>,
    pub position_node: Option<NodeId>,
    pub param_nodes: Vec<Option<NodeId>>,
    pub output: NodeId,
    /// Named auxiliary nodes (site energies, per-layer features, ...).
    pub aux: BTreeMap<String, NodeId>,
}

impl Program {
    pub fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id].len
    }
}

/// Incremental program builder; nodes are appended in topological order.
#[derive(Debug, Default)]
pub struct Builder {
    nodes: Vec<OpNode>,
    n_positions: usize,
    param_lens: Vec<usize>,
    position_node: Option<NodeId>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Builder {
    pub fn new() -> Builder {
        Builder::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, len: usize) -> NodeId {
        for &i in &inputs {
            debug_assert!(i < self.nodes.len(), "input must precede the node");
        }
        self.nodes.push(OpNode { op, inputs, len });
        self.nodes.len() - 1
    }

    pub fn positions(&mut self, n_coords: usize) -> NodeId {
        assert!(self.position_node.is_none(), "positions leaf already declared");
        self.n_positions = n_coords;
        let id = self.push(Op::Positions, vec![], n_coords);
        self.position_node = Some(id);
        id
    }

    /// Declare a parameter block leaf. Blocks must be declared in order of
    /// their index.
    pub fn param(&mut self, block: usize, len: usize) -> NodeId {
        while self.param_lens.len() <= block {
            self.param_lens.push(0);
            self.param_nodes.push(None);
        }
        assert!(self.param_nodes[block].is_none(), "parameter block declared twice");
        self.param_lens[block] = len;
        let id = self.push(Op::Param(block), vec![], len);
        self.param_nodes[block] = Some(id);
        id
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let len = values.len();
        self.push(Op::Constant(Arc::new(values)), vec![], len)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.constant(vec![0.0; len])
    }

    pub fn slice(&mut self, x: NodeId, offset: usize, len: usize) -> NodeId {
        debug_assert!(offset + len <= self.nodes[x].len);
        self.push(Op::Slice { offset, len }, vec![x], len)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let len = xs.iter().map(|&x| self.nodes[x].len).sum();
        self.push(Op::Concat, xs.to_vec(), len)
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let len = self.nodes[xs[0]].len;
        debug_assert!(xs.iter().all(|&x| self.nodes[x].len == len));
        self.push(Op::Sum, xs.to_vec(), len)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Scale(c), vec![x], len)
    }

    pub fn activation(&mut self, x: NodeId, act: Act, scale: f64) -> NodeId {
        let len = self.nodes[x].len;
        self.push(Op::Activation { act, scale }, vec![x], len)
    }

    pub fn norm3(&mut self, v: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[v].len, 3);
        self.push(Op::Norm3, vec![v], 1)
    }

    pub fn normalize3(&mut self, v: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[v].len, 3);
        self.push(Op::Normalize3, vec![v], 3)
    }

    pub fn ylm(&mut self, unit: NodeId, tables: Arc<YlmTables>) -> NodeId {
        let len = tables.output_len();
        self.push(Op::Ylm(tables), vec![unit], len)
    }

    pub fn bessel(&mut self, r: NodeId, n_basis: usize, r_cut: f64, p: u32) -> NodeId {
        debug_assert_eq!(self.nodes[r].len, 1);
        self.push(Op::Bessel { n_basis, r_cut, p }, vec![r], n_basis)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.nodes[w].len, rows * cols);
        debug_assert_eq!(self.nodes[x].len, cols);
        self.push(Op::MatVec { rows, cols }, vec![w, x], rows)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].len, self.nodes[b].len);
        self.push(Op::Dot, vec![a, b], 1)
    }

    pub fn block_linear(&mut self, shape: Arc<BlockLinearShape>, w: NodeId, x: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[w].len, shape.w_len);
        debug_assert_eq!(self.nodes[x].len, shape.x_len);
        let len = shape.y_len;
        self.push(Op::BlockLinear(shape), vec![w, x], len)
    }

    pub fn path_scale(&mut self, shape: Arc<PathShape>, r: NodeId, u: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[r].len, shape.weights_len());
        debug_assert_eq!(self.nodes[u].len, shape.tensor_len());
        let len = shape.tensor_len();
        self.push(Op::PathScale(shape), vec![r, u], len)
    }

    pub fn path_mix(&mut self, shape: Arc<PathShape>, w: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[w].len, shape.weights_len());
        debug_assert_eq!(self.nodes[b].len, shape.tensor_len());
        let len = shape.out_layout.len();
        self.push(Op::PathMix(shape), vec![w, b], len)
    }

    pub fn gate(&mut self, layout: Arc<Layout>, act: Act, x: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[x].len, layout.len());
        let len = layout.len();
        self.push(Op::Gate { layout, act }, vec![x], len)
    }

    pub fn sparse_linear(&mut self, map: Arc<SparseLinearMap>, x: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[x].len, map.n_in);
        let len = map.n_out;
        self.push(Op::SparseLinear(map), vec![x], len)
    }

    pub fn sparse_bilinear(&mut self, map: Arc<SparseBilinearMap>, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].len, map.n_a);
        debug_assert_eq!(self.nodes[b].len, map.n_b);
        let len = map.n_out;
        self.push(Op::SparseBilinear(map), vec![a, b], len)
    }

    pub fn monomials(&mut self, map: Arc<MonomialMap>, x: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[x].len, map.n_in);
        let len = map.terms.len();
        self.push(Op::Monomials(map), vec![x], len)
    }

    pub fn len_of(&self, x: NodeId) -> usize {
        self.nodes[x].len
    }

    pub fn finish(self, output: NodeId, aux: BTreeMap<String, NodeId>) -> Program {
        Program {
            nodes: self.nodes,
            n_positions: self.n_positions,
            param_lens: self.param_lens,
            position_node: self.position_node,
            param_nodes: self.param_nodes,
            output,
            aux,
        }
    }
}

/// Reusable execution state: node values from the latest forward sweep and
/// adjoints from the latest reverse sweep. Replaying the forward pass on
/// the same inputs reproduces the recorded values bitwise.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    pub values: Vec<Vec<S>>,
    pub adjoints: Vec<Vec<S>>,
    live: Vec<bool>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape { values: Vec::new(), adjoints: Vec::new(), live: Vec::new() }
    }

    fn ensure(&mut self, prog: &Program) {
        if self.values.len() != prog.nodes.len() {
            self.values = prog.nodes.iter().map(|n| vec![S::zero(); n.len]).collect();
            self.adjoints = prog.nodes.iter().map(|n| vec![S::zero(); n.len]).collect();
            self.live = vec![false; prog.nodes.len()];
        }
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.values[id]
    }

    pub fn adjoint(&self, id: NodeId) -> &[S] {
        &self.adjoints[id]
    }
}

/// Run the forward sweep, filling `tape.values`.
pub fn forward<S: Scalar>(prog: &Program, positions: &[S], params: &[Vec<S>], tape: &mut Tape<S>) {
    tape.ensure(prog);
    debug_assert_eq!(positions.len(), prog.n_positions);
    debug_assert_eq!(params.len(), prog.param_lens.len());
    for id in 0..prog.nodes.len() {
        // split borrow: previous values are read-only while node `id` is written
        let (done, rest) = tape.values.split_at_mut(id);
        let out = &mut rest[0];
        let node = &prog.nodes[id];
        let input = |k: usize| -> &[S] { &done[node.inputs[k]] };
        match &node.op {
            Op::Positions => out.copy_from_slice(positions),
            Op::Param(b) => out.copy_from_slice(&params[*b]),
            Op::Constant(v) => {
                for (o, c) in out.iter_mut().zip(v.iter()) {
                    *o = S::from_f64(*c);
                }
            }
            Op::Slice { offset, len } => {
                out.copy_from_slice(&input(0)[*offset..*offset + *len]);
            }
            Op::Concat => {
                let mut pos = 0;
                for k in 0..node.inputs.len() {
                    let x = input(k);
                    out[pos..pos + x.len()].copy_from_slice(x);
                    pos += x.len();
                }
            }
            Op::Sum => {
                out.copy_from_slice(input(0));
                for k in 1..node.inputs.len() {
                    for (o, v) in out.iter_mut().zip(input(k)) {
                        *o += *v;
                    }
                }
            }
            Op::Scale(c) => {
                let c = S::from_f64(*c);
                for (o, v) in out.iter_mut().zip(input(0)) {
                    *o = c * *v;
                }
            }
            Op::Activation { act, scale } => {
                let sc = S::from_f64(*scale);
                for (o, v) in out.iter_mut().zip(input(0)) {
                    *o = act.eval(*v) * sc;
                }
            }
            Op::Norm3 => {
                let v = input(0);
                out[0] = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            }
            Op::Normalize3 => {
                let v = input(0);
                let inv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().recip();
                out[0] = v[0] * inv;
                out[1] = v[1] * inv;
                out[2] = v[2] * inv;
            }
            Op::Ylm(tables) => {
                let u = input(0);
                let y = tables.eval([u[0], u[1], u[2]]);
                out.copy_from_slice(&y);
            }
            Op::Bessel { n_basis, r_cut, p } => {
                let r = input(0)[0];
                let b = crate::radial::bessel_kernel(r, *n_basis, *r_cut, *p);
                out.copy_from_slice(&b);
            }
            Op::MatVec { rows, cols } => {
                let w = input(0);
                let x = input(1);
                for r in 0..*rows {
                    let mut acc = S::zero();
                    for c in 0..*cols {
                        acc += w[r * cols + c] * x[c];
                    }
                    out[r] = acc;
                }
            }
            Op::Dot => {
                let a = input(0);
                let b = input(1);
                let mut acc = S::zero();
                for (x, y) in a.iter().zip(b) {
                    acc += *x * *y;
                }
                out[0] = acc;
            }
            Op::BlockLinear(shape) => {
                let w = input(0);
                let x = input(1);
                out.iter_mut().for_each(|o| *o = S::zero());
                for b in &shape.blocks {
                    for ko in 0..b.k_out {
                        for ki in 0..b.k_in {
                            let coeff = w[b.w_off + ko * b.k_in + ki];
                            let xo = b.x_off + ki * b.dim;
                            let yo = b.y_off + ko * b.dim;
                            for m in 0..b.dim {
                                out[yo + m] += coeff * x[xo + m];
                            }
                        }
                    }
                }
            }
            Op::PathScale(shape) => {
                let r = input(0);
                let u = input(1);
                let mut off = 0;
                for (p, &l) in shape.path_ls.iter().enumerate() {
                    let dim = 2 * l + 1;
                    for k in 0..shape.k {
                        let c = r[p * shape.k + k];
                        for m in 0..dim {
                            out[off + k * dim + m] = c * u[off + k * dim + m];
                        }
                    }
                    off += shape.k * dim;
                }
            }
            Op::PathMix(shape) => {
                let w = input(0);
                let b = input(1);
                out.iter_mut().for_each(|o| *o = S::zero());
                let mut off = 0;
                for (p, &l) in shape.path_ls.iter().enumerate() {
                    let dim = 2 * l + 1;
                    let block = shape.out_layout.block_for_l(l).unwrap();
                    let out_off = shape.out_layout.offset(block);
                    for k in 0..shape.k {
                        let c = w[p * shape.k + k];
                        for m in 0..dim {
                            out[out_off + k * dim + m] += c * b[off + k * dim + m];
                        }
                    }
                    off += shape.k * dim;
                }
            }
            Op::Gate { layout, act } => {
                let x = input(0);
                for (bi, blk) in layout.blocks().iter().enumerate() {
                    let dim = 2 * blk.l + 1;
                    let base = layout.offset(bi);
                    for k in 0..blk.channels {
                        let o = base + k * dim;
                        if blk.l == 0 {
                            out[o] = act.eval(x[o]);
                        } else {
                            let mut n2 = S::zero();
                            for m in 0..dim {
                                n2 += x[o + m] * x[o + m];
                            }
                            let g = act.eval(n2);
                            for m in 0..dim {
                                out[o + m] = g * x[o + m];
                            }
                        }
                    }
                }
            }
            Op::SparseLinear(map) => {
                let x = input(0);
                out.iter_mut().for_each(|o| *o = S::zero());
                for &(i, o, c) in &map.entries {
                    out[o as usize] += S::from_f64(c) * x[i as usize];
                }
            }
            Op::SparseBilinear(map) => {
                let a = input(0);
                let b = input(1);
                out.iter_mut().for_each(|o| *o = S::zero());
                for &(ia, ib, o, c) in &map.entries {
                    out[o as usize] += S::from_f64(c) * a[ia as usize] * b[ib as usize];
                }
            }
            Op::Monomials(map) => {
                let x = input(0);
                for (t, factors) in map.terms.iter().enumerate() {
                    let mut acc = S::one();
                    for &f in factors {
                        acc = acc * x[f as usize];
                    }
                    out[t] = acc;
                }
            }
        }
    }
}

/// Reverse sweep from `seed_node` with the given cotangent. Requires a
/// preceding [`forward`] on the same tape.
pub fn backward<S: Scalar>(prog: &Program, tape: &mut Tape<S>, seed_node: NodeId, seed: &[S]) {
    tape.ensure(prog);
    for (adj, live) in tape.adjoints.iter_mut().zip(tape.live.iter_mut()) {
        if *live {
            adj.iter_mut().for_each(|a| *a = S::zero());
        }
        *live = false;
    }
    debug_assert_eq!(seed.len(), prog.nodes[seed_node].len);
    tape.adjoints[seed_node].copy_from_slice(seed);
    tape.live[seed_node] = true;

    for id in (0..=seed_node).rev() {
        if !tape.live[id] {
            continue;
        }
        let node = &prog.nodes[id];
        if node.inputs.is_empty() {
            continue;
        }
        // take this node's adjoint out to satisfy the borrow checker;
        // nothing below reads it again
        let grad = std::mem::take(&mut tape.adjoints[id]);
        {
            let values = &tape.values;
            let add_to = |tape_adj: &mut Vec<Vec<S>>, live: &mut Vec<bool>, input: NodeId, idx: usize, v: S| {
                tape_adj[input][idx] += v;
                live[input] = true;
            };
            // local aliases
            let adjoints = &mut tape.adjoints;
            let live = &mut tape.live;
            match &node.op {
                Op::Positions | Op::Param(_) | Op::Constant(_) => unreachable!(),
                Op::Slice { offset, len } => {
                    let inp = node.inputs[0];
                    for i in 0..*len {
                        add_to(adjoints, live, inp, offset + i, grad[i]);
                    }
                }
                Op::Concat => {
                    let mut pos = 0;
                    for &inp in &node.inputs {
                        let l = prog.nodes[inp].len;
                        for i in 0..l {
                            add_to(adjoints, live, inp, i, grad[pos + i]);
                        }
                        pos += l;
                    }
                }
                Op::Sum => {
                    for &inp in &node.inputs {
                        for (i, g) in grad.iter().enumerate() {
                            add_to(adjoints, live, inp, i, *g);
                        }
                    }
                }
                Op::Scale(c) => {
                    let c = S::from_f64(*c);
                    let inp = node.inputs[0];
                    for (i, g) in grad.iter().enumerate() {
                        add_to(adjoints, live, inp, i, c * *g);
                    }
                }
                Op::Activation { act, scale } => {
                    let inp = node.inputs[0];
                    let x = &values[inp];
                    let sc = S::from_f64(*scale);
                    for (i, g) in grad.iter().enumerate() {
                        add_to(adjoints, live, inp, i, act.grad(x[i]) * sc * *g);
                    }
                }
                Op::Norm3 => {
                    let inp = node.inputs[0];
                    let v = &values[inp];
                    let r = values[id][0];
                    let inv = r.recip();
                    for d in 0..3 {
                        add_to(adjoints, live, inp, d, v[d] * inv * grad[0]);
                    }
                }
                Op::Normalize3 => {
                    let inp = node.inputs[0];
                    let v = &values[inp];
                    let u = &values[id];
                    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    let inv = r.recip();
                    let mut udotg = S::zero();
                    for d in 0..3 {
                        udotg += u[d] * grad[d];
                    }
                    for d in 0..3 {
                        add_to(adjoints, live, inp, d, (grad[d] - u[d] * udotg) * inv);
                    }
                }
                Op::Ylm(tables) => {
                    let inp = node.inputs[0];
                    let u = &values[inp];
                    let (_, jac) = tables.eval_with_jacobian([u[0], u[1], u[2]]);
                    let n = tables.output_len();
                    for d in 0..3 {
                        let mut acc = S::zero();
                        for i in 0..n {
                            acc += jac[i * 3 + d] * grad[i];
                        }
                        add_to(adjoints, live, inp, d, acc);
                    }
                }
                Op::Bessel { n_basis, r_cut, p } => {
                    let inp = node.inputs[0];
                    let r = values[inp][0];
                    let db = crate::radial::bessel_kernel_deriv(r, *n_basis, *r_cut, *p);
                    let mut acc = S::zero();
                    for (d, g) in db.iter().zip(grad.iter()) {
                        acc += *d * *g;
                    }
                    add_to(adjoints, live, inp, 0, acc);
                }
                Op::MatVec { rows, cols } => {
                    let (wn, xn) = (node.inputs[0], node.inputs[1]);
                    for r in 0..*rows {
                        let g = grad[r];
                        if g == S::zero() {
                            continue;
                        }
                        for c in 0..*cols {
                            let x = values[xn][c];
                            let w = values[wn][r * cols + c];
                            add_to(adjoints, live, wn, r * cols + c, g * x);
                            add_to(adjoints, live, xn, c, g * w);
                        }
                    }
                }
                Op::Dot => {
                    let (an, bn) = (node.inputs[0], node.inputs[1]);
                    let g = grad[0];
                    for i in 0..prog.nodes[an].len {
                        let a = values[an][i];
                        let b = values[bn][i];
                        add_to(adjoints, live, an, i, g * b);
                        add_to(adjoints, live, bn, i, g * a);
                    }
                }
                Op::BlockLinear(shape) => {
                    let (wn, xn) = (node.inputs[0], node.inputs[1]);
                    for b in &shape.blocks {
                        for ko in 0..b.k_out {
                            for ki in 0..b.k_in {
                                let widx = b.w_off + ko * b.k_in + ki;
                                let w = values[wn][widx];
                                let xo = b.x_off + ki * b.dim;
                                let yo = b.y_off + ko * b.dim;
                                let mut wacc = S::zero();
                                for m in 0..b.dim {
                                    let g = grad[yo + m];
                                    wacc += g * values[xn][xo + m];
                                    add_to(adjoints, live, xn, xo + m, g * w);
                                }
                                add_to(adjoints, live, wn, widx, wacc);
                            }
                        }
                    }
                }
                Op::PathScale(shape) => {
                    let (rn, un) = (node.inputs[0], node.inputs[1]);
                    let mut off = 0;
                    for (p, &l) in shape.path_ls.iter().enumerate() {
                        let dim = 2 * l + 1;
                        for k in 0..shape.k {
                            let ridx = p * shape.k + k;
                            let c = values[rn][ridx];
                            let mut racc = S::zero();
                            for m in 0..dim {
                                let g = grad[off + k * dim + m];
                                racc += g * values[un][off + k * dim + m];
                                add_to(adjoints, live, un, off + k * dim + m, g * c);
                            }
                            add_to(adjoints, live, rn, ridx, racc);
                        }
                        off += shape.k * dim;
                    }
                }
                Op::PathMix(shape) => {
                    let (wn, bn) = (node.inputs[0], node.inputs[1]);
                    let mut off = 0;
                    for (p, &l) in shape.path_ls.iter().enumerate() {
                        let dim = 2 * l + 1;
                        let block = shape.out_layout.block_for_l(l).unwrap();
                        let out_off = shape.out_layout.offset(block);
                        for k in 0..shape.k {
                            let widx = p * shape.k + k;
                            let c = values[wn][widx];
                            let mut wacc = S::zero();
                            for m in 0..dim {
                                let g = grad[out_off + k * dim + m];
                                wacc += g * values[bn][off + k * dim + m];
                                add_to(adjoints, live, bn, off + k * dim + m, g * c);
                            }
                            add_to(adjoints, live, wn, widx, wacc);
                        }
                        off += shape.k * dim;
                    }
                }
                Op::Gate { layout, act } => {
                    let inp = node.inputs[0];
                    for (bi, blk) in layout.blocks().iter().enumerate() {
                        let dim = 2 * blk.l + 1;
                        let base = layout.offset(bi);
                        for k in 0..blk.channels {
                            let o = base + k * dim;
                            if blk.l == 0 {
                                let x = values[inp][o];
                                add_to(adjoints, live, inp, o, act.grad(x) * grad[o]);
                            } else {
                                let mut n2 = S::zero();
                                let mut xdotg = S::zero();
                                for m in 0..dim {
                                    let x = values[inp][o + m];
                                    n2 += x * x;
                                    xdotg += x * grad[o + m];
                                }
                                let g = act.eval(n2);
                                let dg = act.grad(n2);
                                let two = S::from_f64(2.0);
                                for m in 0..dim {
                                    let x = values[inp][o + m];
                                    add_to(
                                        adjoints,
                                        live,
                                        inp,
                                        o + m,
                                        g * grad[o + m] + two * dg * xdotg * x,
                                    );
                                }
                            }
                        }
                    }
                }
                Op::SparseLinear(map) => {
                    let inp = node.inputs[0];
                    for &(i, o, c) in &map.entries {
                        add_to(adjoints, live, inp, i as usize, S::from_f64(c) * grad[o as usize]);
                    }
                }
                Op::SparseBilinear(map) => {
                    let (an, bn) = (node.inputs[0], node.inputs[1]);
                    for &(ia, ib, o, c) in &map.entries {
                        let g = S::from_f64(c) * grad[o as usize];
                        let a = values[an][ia as usize];
                        let b = values[bn][ib as usize];
                        add_to(adjoints, live, an, ia as usize, g * b);
                        add_to(adjoints, live, bn, ib as usize, g * a);
                    }
                }
                Op::Monomials(map) => {
                    let inp = node.inputs[0];
                    for (t, factors) in map.terms.iter().enumerate() {
                        let g = grad[t];
                        if g == S::zero() {
                            continue;
                        }
                        for (fi, &f) in factors.iter().enumerate() {
                            let mut others = S::one();
                            for (fj, &f2) in factors.iter().enumerate() {
                                if fi != fj {
                                    others = others * values[inp][f2 as usize];
                                }
                            }
                            add_to(adjoints, live, inp, f as usize, g * others);
                        }
                    }
                }
            }
        }
        tape.adjoints[id] = grad;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// finite-difference check of d(output)/d(leaves) for a scalar-output
    /// program
    fn check_gradients(prog: &Program, positions: Vec<f64>, params: Vec<Vec<f64>>, tol: f64) {
        let mut tape = Tape::<f64>::new();
        forward(prog, &positions, &params, &mut tape);
        backward(prog, &mut tape, prog.output, &[1.0]);
        let eval = |positions: &[f64], params: &[Vec<f64>]| -> f64 {
            let mut t = Tape::<f64>::new();
            forward(prog, positions, params, &mut t);
            t.value(prog.output)[0]
        };
        let h = 1e-6;
        if let Some(pn) = prog.position_node {
            for i in 0..positions.len() {
                let mut up = positions.clone();
                let mut dn = positions.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (eval(&up, &params) - eval(&dn, &params)) / (2.0 * h);
                assert_abs_diff_eq!(tape.adjoint(pn)[i], fd, epsilon = tol);
            }
        }
        for (b, pnode) in prog.param_nodes.iter().enumerate() {
            let Some(pnode) = *pnode else { continue };
            for i in 0..params[b].len() {
                let mut up = params.clone();
                let mut dn = params.clone();
                up[b][i] += h;
                dn[b][i] -= h;
                let fd = (eval(&positions, &up) - eval(&positions, &dn)) / (2.0 * h);
                assert_abs_diff_eq!(tape.adjoint(pnode)[i], fd, epsilon = tol);
            }
        }
    }

    #[test]
    fn gradients_of_geometry_chain() {
        // r = |p1 - p0|, u = (p1 - p0)/r, out = dot(w, [bessel(r), ylm(u)])
        let mut b = Builder::new();
        let pos = b.positions(6);
        let p0 = b.slice(pos, 0, 3);
        let p1 = b.slice(pos, 3, 3);
        let neg = b.scale(p0, -1.0);
        let disp = b.sum(&[p1, neg]);
        let r = b.norm3(disp);
        let u = b.normalize3(disp);
        let tables = Arc::new(YlmTables::new(3));
        let y = b.ylm(u, tables);
        let bes = b.bessel(r, 4, 5.0, 4);
        let feat = b.concat(&[bes, y]);
        let n = b.len_of(feat);
        let w = b.param(0, n);
        let out = b.dot(w, feat);
        let prog = b.finish(out, Default::default());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let positions = vec![0.1, -0.2, 0.05, 1.4, 0.9, -1.1];
        let params = vec![(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()];
        check_gradients(&prog, positions, params, 1e-6);
    }

    #[test]
    fn gradients_of_dense_and_sparse_ops() {
        let mut b = Builder::new();
        let x = b.param(0, 4);
        let w1 = b.param(1, 12);
        let h1 = b.matvec(w1, x, 3, 4);
        let h1a = b.activation(h1, Act::Silu, 1.2);
        let map = Arc::new(SparseBilinearMap {
            n_a: 3,
            n_b: 4,
            n_out: 5,
            entries: vec![
                (0, 0, 0, 0.5),
                (0, 1, 1, -1.1),
                (1, 2, 2, 2.0),
                (2, 3, 3, 0.7),
                (2, 0, 4, -0.3),
                (1, 1, 0, 0.9),
            ],
        });
        let sb = b.sparse_bilinear(map, h1a, x);
        let lin = Arc::new(SparseLinearMap {
            n_in: 5,
            n_out: 3,
            entries: vec![(0, 0, 1.0), (1, 0, -2.0), (2, 1, 0.5), (3, 2, 1.5), (4, 1, 1.0)],
        });
        let sl = b.sparse_linear(lin, sb);
        let mono = Arc::new(MonomialMap {
            n_in: 3,
            terms: vec![vec![0], vec![0, 1], vec![1, 1, 2], vec![2, 2]],
        });
        let mo = b.monomials(mono, sl);
        let wf = b.param(2, 4);
        let out = b.dot(wf, mo);
        let prog = b.finish(out, Default::default());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut randv = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let params = vec![randv(4), randv(12), randv(4)];
        check_gradients(&prog, vec![], params, 1e-5);
    }

    #[test]
    fn gradients_of_equivariant_ops() {
        let k = 2;
        let shape = Arc::new(PathShape::new(k, vec![0, 1, 1, 2]));
        let tensor_len = shape.tensor_len();
        let layout = shape.out_layout.clone();
        let bl_shape = Arc::new(BlockLinearShape {
            blocks: layout
                .blocks()
                .iter()
                .enumerate()
                .map(|(bi, blk)| BlockMM {
                    dim: 2 * blk.l + 1,
                    k_out: k,
                    k_in: k,
                    w_off: bi * k * k,
                    x_off: layout.offset(bi),
                    y_off: layout.offset(bi),
                })
                .collect(),
            w_len: layout.blocks().len() * k * k,
            x_len: layout.len(),
            y_len: layout.len(),
        });

        let mut b = Builder::new();
        let u = b.param(0, tensor_len);
        let r = b.param(1, shape.weights_len());
        let wmix = b.param(2, shape.weights_len());
        let wupd = b.param(3, bl_shape.w_len);
        let scaled = b.path_scale(shape.clone(), r, u);
        let mixed = b.path_mix(shape.clone(), wmix, scaled);
        let upd = b.block_linear(bl_shape.clone(), wupd, mixed);
        let gated = b.gate(layout.clone(), Act::Silu, upd);
        let wread = b.param(4, layout.len());
        let out = b.dot(wread, gated);
        let prog = b.finish(out, Default::default());

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut randv = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let params = vec![
            randv(tensor_len),
            randv(shape.weights_len()),
            randv(shape.weights_len()),
            randv(bl_shape.w_len),
            randv(layout.len()),
        ];
        check_gradients(&prog, vec![], params, 1e-5);
    }

    #[test]
    fn forward_replay_is_bitwise_identical() {
        let mut b = Builder::new();
        let pos = b.positions(3);
        let r = b.norm3(pos);
        let bes = b.bessel(r, 6, 4.0, 4);
        let w = b.param(0, 6);
        let out = b.dot(w, bes);
        let prog = b.finish(out, Default::default());
        let positions = vec![0.3, 1.2, -0.4];
        let params = vec![vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.05]];
        let mut t1 = Tape::<f64>::new();
        forward(&prog, &positions, &params, &mut t1);
        let v1: Vec<Vec<f64>> = t1.values.clone();
        forward(&prog, &positions, &params, &mut t1);
        for (a, b) in v1.iter().zip(&t1.values) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dual_reverse_gives_hessian_vector_products() {
        use crate::scalar::Dual;
        // f(x, p) = silu(p0 * r) * p1 with r = |x|; check d/dp of (v . df/dx)
        // via dual-over-reverse against finite differences of the gradient
        let mut b = Builder::new();
        let pos = b.positions(3);
        let r = b.norm3(pos);
        let p = b.param(0, 2);
        let p0 = b.slice(p, 0, 1);
        let p1 = b.slice(p, 1, 1);
        let pr = b.dot(p0, r);
        let a = b.activation(pr, Act::Silu, 1.0);
        let out = b.dot(a, p1);
        let prog = b.finish(out, Default::default());

        let x0 = [0.7, -0.3, 1.1];
        let params0 = [0.9, 1.4];
        let dir = [0.25, -0.6, 0.45];

        let mut tape = Tape::<Dual>::new();
        let pos_dual: Vec<Dual> = x0.iter().zip(&dir).map(|(v, d)| Dual::new(*v, *d)).collect();
        let params_dual = vec![params0.iter().map(|v| Dual::constant(*v)).collect::<Vec<_>>()];
        forward(&prog, &pos_dual, &params_dual, &mut tape);
        backward(&prog, &mut tape, prog.output, &[Dual::constant(1.0)]);
        let param_node = prog.param_nodes[0].unwrap();
        let hvp: Vec<f64> = tape.adjoint(param_node).iter().map(|d| d.dx).collect();

        // finite differences of grad_p(out) along dir in x
        let grad_p = |x: &[f64; 3]| -> Vec<f64> {
            let mut t = Tape::<f64>::new();
            forward(&prog, x, &[params0.to_vec()], &mut t);
            backward(&prog, &mut t, prog.output, &[1.0]);
            t.adjoint(param_node).to_vec()
        };
        let h = 1e-6;
        let xp = [x0[0] + h * dir[0], x0[1] + h * dir[1], x0[2] + h * dir[2]];
        let xm = [x0[0] - h * dir[0], x0[1] - h * dir[1], x0[2] - h * dir[2]];
        let gp = grad_p(&xp);
        let gm = grad_p(&xm);
        for i in 0..2 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert_abs_diff_eq!(hvp[i], fd, epsilon = 1e-6);
        }
    }
}
