//! Real spherical harmonics normalized to `sum_m Y_lm^2 = 2l + 1`.
//!
//! `Y^{l+1}` is generated from `Y^l (x) Y^1` through the stretched real
//! Clebsch-Gordan channel, rescaled so the norm convention holds and
//! `Y_l0(z) > 0`. Equivariance and parity are then automatic, and the same
//! sparse tables drive both the value and the Jacobian evaluation.

use std::sync::Arc;

use super::cg::clebsch_gordan_real;
use super::{IrrepArray, Layout};
use crate::error::{MaceError, Result};
use crate::scalar::Scalar;

const SQRT_3: f64 = 1.7320508075688772;

/// One sparse entry of a stretched-coupling step: `(i_prev, i_vec, i_out, coeff)`.
type Step = Vec<(u32, u32, u32, f64)>;

#[derive(Debug)]
pub struct YlmTables {
    pub l_max: usize,
    /// `steps[l-2]` maps `Y^{l-1} (x) Y^1 -> Y^l`, scale included.
    steps: Vec<Step>,
    layout: Arc<Layout>,
}

impl YlmTables {
    pub fn new(l_max: usize) -> YlmTables {
        let mut steps = Vec::new();
        for l in 2..=l_max {
            let cg = clebsch_gordan_real(l - 1, 1, l).expect("stretched channel always valid");
            let (d1, d2, d3) = cg.dim();
            let mut entries: Step = Vec::new();
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    for i3 in 0..d3 {
                        let c = cg.coeffs[i1 * d2 * d3 + i2 * d3 + i3];
                        if c.abs() > 1e-14 {
                            entries.push((i1 as u32, i2 as u32, i3 as u32, c));
                        }
                    }
                }
            }
            // Fix the scale at the pole: only the m = 0 component survives
            // there and must equal +sqrt(2l+1).
            let prev_pole = pole_values(l - 1, &steps);
            let vec_pole = [0.0, SQRT_3, 0.0];
            let mut raw0 = 0.0;
            for &(i1, i2, i3, c) in &entries {
                if i3 as usize == l {
                    raw0 += c * prev_pole[i1 as usize] * vec_pole[i2 as usize];
                }
            }
            let scale = ((2 * l + 1) as f64).sqrt() / raw0;
            for e in entries.iter_mut() {
                e.3 *= scale;
            }
            steps.push(entries);
        }
        YlmTables { l_max, steps, layout: Arc::new(Layout::dense(1, l_max)) }
    }

    /// Output layout: one single-channel block per `l = 0..=l_max`.
    pub fn layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    pub fn output_len(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    /// Evaluate all harmonics for a unit vector, concatenated `l = 0..=l_max`.
    pub fn eval<S: Scalar>(&self, unit: [S; 3]) -> Vec<S> {
        let mut out = Vec::with_capacity(self.output_len());
        out.push(S::one());
        if self.l_max == 0 {
            return out;
        }
        let s3 = S::from_f64(SQRT_3);
        let y1 = [s3 * unit[1], s3 * unit[2], s3 * unit[0]];
        out.extend_from_slice(&y1);
        let mut prev = y1.to_vec();
        for (li, step) in self.steps.iter().enumerate() {
            let l = li + 2;
            let mut cur = vec![S::zero(); 2 * l + 1];
            for &(i1, i2, i3, c) in step {
                cur[i3 as usize] += S::from_f64(c) * prev[i1 as usize] * y1[i2 as usize];
            }
            out.extend_from_slice(&cur);
            prev = cur;
        }
        out
    }

    /// Values together with the Jacobian with respect to the three ambient
    /// components of the unit vector (row-major `[component][xyz]`). The
    /// caller is responsible for projecting out the radial direction when
    /// chaining through a normalization.
    pub fn eval_with_jacobian<S: Scalar>(&self, unit: [S; 3]) -> (Vec<S>, Vec<S>) {
        let n = self.output_len();
        let mut val = Vec::with_capacity(n);
        let mut jac = vec![S::zero(); n * 3];
        val.push(S::one());
        if self.l_max == 0 {
            return (val, jac);
        }
        let s3 = S::from_f64(SQRT_3);
        let y1 = [s3 * unit[1], s3 * unit[2], s3 * unit[0]];
        // dY1[a][d]
        let mut j1 = [[S::zero(); 3]; 3];
        j1[0][1] = s3;
        j1[1][2] = s3;
        j1[2][0] = s3;
        val.extend_from_slice(&y1);
        for a in 0..3 {
            for d in 0..3 {
                jac[(1 + a) * 3 + d] = j1[a][d];
            }
        }
        let mut prev = y1.to_vec();
        let mut prev_j: Vec<S> = j1.iter().flatten().copied().collect();
        let mut offset = 4;
        for (li, step) in self.steps.iter().enumerate() {
            let l = li + 2;
            let dim = 2 * l + 1;
            let mut cur = vec![S::zero(); dim];
            let mut cur_j = vec![S::zero(); dim * 3];
            for &(i1, i2, i3, c) in step {
                let c = S::from_f64(c);
                let (i1, i2, i3) = (i1 as usize, i2 as usize, i3 as usize);
                cur[i3] += c * prev[i1] * y1[i2];
                for d in 0..3 {
                    cur_j[i3 * 3 + d] +=
                        c * (prev_j[i1 * 3 + d] * y1[i2] + prev[i1] * j1[i2][d]);
                }
            }
            val.extend_from_slice(&cur);
            jac[offset * 3..(offset + dim) * 3].copy_from_slice(&cur_j);
            offset += dim;
            prev = cur;
            prev_j = cur_j;
        }
        (val, jac)
    }
}

/// Values of `Y^l` at the north pole, built recursively from the tables for
/// lower orders (used only during table construction).
fn pole_values(l: usize, steps: &[Step]) -> Vec<f64> {
    if l == 0 {
        return vec![1.0];
    }
    if l == 1 {
        return vec![0.0, SQRT_3, 0.0];
    }
    let prev = pole_values(l - 1, steps);
    let y1 = [0.0, SQRT_3, 0.0];
    let mut cur = vec![0.0; 2 * l + 1];
    for &(i1, i2, i3, c) in &steps[l - 2] {
        cur[i3 as usize] += c * prev[i1 as usize] * y1[i2 as usize];
    }
    cur
}

/// Real spherical harmonics of a unit vector as an [`IrrepArray`] with one
/// single-channel block per `l`.
///
/// Errors when the input is not normalized within `1e-8`.
pub fn real_spherical_harmonics(l_max: usize, v: [f64; 3]) -> Result<IrrepArray> {
    let norm2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    if (norm2.sqrt() - 1.0).abs() > 1e-8 {
        return Err(MaceError::geometry(format!(
            "direction must be a unit vector, got |v| = {}",
            norm2.sqrt()
        )));
    }
    let tables = YlmTables::new(l_max);
    let values = tables.eval(v);
    Ok(IrrepArray { layout: tables.layout(), values })
}
