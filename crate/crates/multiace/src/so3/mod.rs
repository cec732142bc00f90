//! O(3) representation machinery: real spherical harmonics, Wigner
//! matrices, Clebsch-Gordan coupling and the equivariant array primitives
//! built on top of them.
//!
//! Conventions (fixed once, everything else is pinned by tests):
//! * features carry angular order `l` with parity `(-1)^l`; components are
//!   ordered `m = -l..=l`;
//! * `l = 1` components are the Cartesian `(y, z, x)` so that
//!   `D^1(Q) = P Q P^T` for the documented permutation `P`;
//! * spherical harmonics satisfy `sum_m Y_lm(x)^2 = 2l + 1` on the unit
//!   sphere, with `Y_l0(z) = +sqrt(2l+1)`.

pub mod cg;
pub mod coupling;
pub mod wigner;
pub mod ylm;

use std::sync::Arc;

use crate::act::Act;
use crate::error::{MaceError, Result};

pub use cg::{clebsch_gordan_real, CgTensor};
pub use coupling::{generalized_coupling, CouplingPath, CouplingTable};
pub use wigner::{wigner_d, wigner_d_o3, WignerD};
pub use ylm::{real_spherical_harmonics, YlmTables};

/// An O(3) irreducible representation label. Parity is always `(-1)^l`;
/// pseudo-tensor irreps are out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Irrep {
    pub l: usize,
}

impl Irrep {
    pub fn dim(&self) -> usize {
        2 * self.l + 1
    }
    pub fn parity(&self) -> i32 {
        if self.l % 2 == 0 {
            1
        } else {
            -1
        }
    }
}

/// One feature block: `channels` independent copies of the irrep `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub channels: usize,
    pub l: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.channels * (2 * self.l + 1)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered block structure of an [`IrrepArray`]. Within a block values are
/// channel-major: component `(k, m)` sits at `offset + k*(2l+1) + (m + l)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<Block>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(blocks: Vec<Block>) -> Layout {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut total = 0;
        for b in &blocks {
            offsets.push(total);
            total += b.len();
        }
        Layout { blocks, offsets, total }
    }

    /// Layout with one block per `l = 0..=l_max`, all with `channels`.
    pub fn dense(channels: usize, l_max: usize) -> Layout {
        Layout::new((0..=l_max).map(|l| Block { channels, l }).collect())
    }

    /// Layout holding a single scalar block.
    pub fn scalars(channels: usize) -> Layout {
        Layout::new(vec![Block { channels, l: 0 }])
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }
    pub fn len(&self) -> usize {
        self.total
    }
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    /// Index of the (unique) block with angular order `l`, if present.
    pub fn block_for_l(&self, l: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.l == l)
    }

    /// Flat index of component `(block, k, m)`.
    pub fn index(&self, block: usize, k: usize, m: isize) -> usize {
        let b = self.blocks[block];
        debug_assert!(k < b.channels && m.unsigned_abs() <= b.l);
        self.offsets[block] + k * (2 * b.l + 1) + (m + b.l as isize) as usize
    }

    /// A layout is canonical when each `l` appears in at most one block.
    pub fn is_canonical(&self) -> bool {
        let mut seen = [false; 64];
        for b in &self.blocks {
            if seen[b.l] {
                return false;
            }
            seen[b.l] = true;
        }
        true
    }

    pub fn max_l(&self) -> usize {
        self.blocks.iter().map(|b| b.l).max().unwrap_or(0)
    }
}

/// A concatenation of irrep feature blocks: the universal tensor currency
/// between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct IrrepArray {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl IrrepArray {
    pub fn zeros(layout: Arc<Layout>) -> IrrepArray {
        let n = layout.len();
        IrrepArray { layout, values: vec![0.0; n] }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<IrrepArray> {
        if values.len() != layout.len() {
            return Err(MaceError::shape(format!(
                "value length {} does not match layout length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(IrrepArray { layout, values })
    }

    /// View of one `(block, channel)` irrep vector, length `2l+1`.
    pub fn channel(&self, block: usize, k: usize) -> &[f64] {
        let b = self.layout.blocks()[block];
        let start = self.layout.offset(block) + k * (2 * b.l + 1);
        &self.values[start..start + 2 * b.l + 1]
    }

    pub fn channel_mut(&mut self, block: usize, k: usize) -> &mut [f64] {
        let b = self.layout.blocks()[block];
        let start = self.layout.offset(block) + k * (2 * b.l + 1);
        &mut self.values[start..start + 2 * b.l + 1]
    }

    /// Apply the Wigner action of an O(3) element blockwise (test utility;
    /// models use the compiled execution path).
    pub fn wigner_transformed(&self, q: &[[f64; 3]; 3]) -> Result<IrrepArray> {
        let mut out = IrrepArray::zeros(self.layout.clone());
        let mut mats: Vec<Option<WignerD>> = vec![None; self.layout.max_l() + 1];
        for (bi, b) in self.layout.blocks().iter().enumerate() {
            if mats[b.l].is_none() {
                mats[b.l] = Some(wigner_d_o3(b.l, q)?);
            }
            let d = mats[b.l].as_ref().unwrap();
            let dim = 2 * b.l + 1;
            for k in 0..b.channels {
                let src = self.channel(bi, k).to_vec();
                let dst = out.channel_mut(bi, k);
                for r in 0..dim {
                    let mut acc = 0.0;
                    for c in 0..dim {
                        acc += d.matrix[r * dim + c] * src[c];
                    }
                    dst[r] = acc;
                }
            }
        }
        Ok(out)
    }
}

/// Block-diagonal weights for an equivariant linear map: one dense
/// `(k_out, k_in)` matrix per angular order, no cross-`l` blocks.
#[derive(Debug, Clone)]
pub struct BlockDiagWeights {
    /// `(l, k_out, k_in, row-major matrix)`
    pub per_l: Vec<(usize, usize, usize, Vec<f64>)>,
}

impl BlockDiagWeights {
    pub fn identity(layout: &Layout) -> BlockDiagWeights {
        let per_l = layout
            .blocks()
            .iter()
            .map(|b| {
                let mut w = vec![0.0; b.channels * b.channels];
                for i in 0..b.channels {
                    w[i * b.channels + i] = 1.0;
                }
                (b.l, b.channels, b.channels, w)
            })
            .collect();
        BlockDiagWeights { per_l }
    }
}

/// Equivariant linear map: mixes channels within each `l` block only, so it
/// commutes with the Wigner action by construction.
pub fn equivariant_linear(weights: &BlockDiagWeights, x: &IrrepArray) -> Result<IrrepArray> {
    if !x.layout.is_canonical() {
        return Err(MaceError::shape("equivariant_linear requires a canonical layout"));
    }
    let mut out_blocks = Vec::with_capacity(weights.per_l.len());
    for &(l, k_out, k_in, ref w) in &weights.per_l {
        if w.len() != k_out * k_in {
            return Err(MaceError::shape(format!(
                "weight block for l={l} has {} entries, expected {}",
                w.len(),
                k_out * k_in
            )));
        }
        let bi = x
            .layout
            .block_for_l(l)
            .ok_or_else(|| MaceError::shape(format!("input has no block with l={l}")))?;
        if x.layout.blocks()[bi].channels != k_in {
            return Err(MaceError::shape(format!(
                "weight block for l={l} expects {k_in} input channels, layout has {}",
                x.layout.blocks()[bi].channels
            )));
        }
        out_blocks.push(Block { channels: k_out, l });
    }
    let layout = Arc::new(Layout::new(out_blocks));
    let mut out = IrrepArray::zeros(layout);
    for (wi, &(l, k_out, k_in, ref w)) in weights.per_l.iter().enumerate() {
        let bi = x.layout.block_for_l(l).unwrap();
        let dim = 2 * l + 1;
        for ko in 0..k_out {
            let dst = out.channel_mut(wi, ko);
            for ki in 0..k_in {
                let coeff = w[ko * k_in + ki];
                if coeff == 0.0 {
                    continue;
                }
                let src = x.channel(bi, ki);
                for m in 0..dim {
                    dst[m] += coeff * src[m];
                }
            }
        }
    }
    Ok(out)
}

/// Gated nonlinearity: scalar blocks pass through the activation pointwise;
/// `l > 0` channels are scaled by the activation of their squared norm.
pub fn gated_nonlinearity(x: &IrrepArray, activation: Act) -> IrrepArray {
    let mut out = IrrepArray::zeros(x.layout.clone());
    for (bi, b) in x.layout.blocks().iter().enumerate() {
        for k in 0..b.channels {
            let src = x.channel(bi, k).to_vec();
            let dst = out.channel_mut(bi, k);
            if b.l == 0 {
                dst[0] = activation.eval(src[0]);
            } else {
                let norm2: f64 = src.iter().map(|v| v * v).sum();
                let gate = activation.eval(norm2);
                for (d, s) in dst.iter_mut().zip(&src) {
                    *d = gate * s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_irrep_array, random_rotation};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_indexing_is_dense_and_disjoint() {
        let layout = Layout::new(vec![
            Block { channels: 2, l: 0 },
            Block { channels: 3, l: 1 },
            Block { channels: 1, l: 2 },
        ]);
        assert_eq!(layout.len(), 2 + 9 + 5);
        let mut seen = std::collections::HashSet::new();
        for (bi, b) in layout.blocks().iter().enumerate() {
            for k in 0..b.channels {
                for m in -(b.l as isize)..=(b.l as isize) {
                    assert!(seen.insert(layout.index(bi, k, m)));
                }
            }
        }
        assert_eq!(seen.len(), layout.len());
    }

    #[test]
    fn equivariant_linear_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layout = Arc::new(Layout::dense(3, 2));
        let x = random_irrep_array(&layout, &mut rng);
        let id = BlockDiagWeights::identity(&layout);
        let y = equivariant_linear(&id, &x).unwrap();
        assert_eq!(x.values, y.values);

        let zero = BlockDiagWeights {
            per_l: layout
                .blocks()
                .iter()
                .map(|b| (b.l, b.channels, b.channels, vec![0.0; b.channels * b.channels]))
                .collect(),
        };
        let z = equivariant_linear(&zero, &x).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equivariant_linear_commutes_with_wigner_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = Arc::new(Layout::dense(2, 3));
        let x = random_irrep_array(&layout, &mut rng);
        let w = BlockDiagWeights {
            per_l: layout
                .blocks()
                .iter()
                .map(|b| {
                    let vals = (0..b.channels * b.channels)
                        .map(|i| ((i * 37 + b.l * 11) % 13) as f64 / 7.0 - 0.8)
                        .collect();
                    (b.l, b.channels, b.channels, vals)
                })
                .collect(),
        };
        for seed in 0..5 {
            let q = random_rotation(&mut rng, seed % 2 == 0);
            let lhs = equivariant_linear(&w, &x.wigner_transformed(&q).unwrap()).unwrap();
            let rhs = equivariant_linear(&w, &x).unwrap().wigner_transformed(&q).unwrap();
            for (a, b) in lhs.values.iter().zip(&rhs.values) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn layout_mismatch_is_a_shape_error() {
        let layout = Arc::new(Layout::dense(2, 1));
        let x = IrrepArray::zeros(layout);
        let w = BlockDiagWeights { per_l: vec![(0, 2, 3, vec![0.0; 6]), (1, 2, 2, vec![0.0; 4])] };
        assert!(equivariant_linear(&w, &x).is_err());
    }

    #[test]
    fn gate_zero_input_and_scalar_identity() {
        let layout = Arc::new(Layout::dense(2, 2));
        let x = IrrepArray::zeros(layout);
        let y = gated_nonlinearity(&x, Act::Silu);
        assert!(y.values.iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scalars = Arc::new(Layout::scalars(4));
        let x = random_irrep_array(&scalars, &mut rng);
        let y = gated_nonlinearity(&x, Act::Identity);
        assert_eq!(x.values, y.values);
    }

    #[test]
    fn gate_commutes_with_wigner_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = Arc::new(Layout::dense(2, 3));
        let x = random_irrep_array(&layout, &mut rng);
        for seed in 0..5 {
            let q = random_rotation(&mut rng, seed % 2 == 1);
            let lhs = gated_nonlinearity(&x.wigner_transformed(&q).unwrap(), Act::Silu);
            let rhs = gated_nonlinearity(&x, Act::Silu).wigner_transformed(&q).unwrap();
            for (a, b) in lhs.values.iter().zip(&rhs.values) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }
}
