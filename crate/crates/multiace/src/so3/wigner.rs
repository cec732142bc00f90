//! Wigner matrices for the real spherical-harmonic basis.
//!
//! The defining contract is `Y_l(Q v) = D^l(Q) Y_l(v)`; it fixes every phase
//! convention. `D^1` is the rotation matrix conjugated by the fixed
//! `(x,y,z) -> (y,z,x)` component permutation, higher orders follow by the
//! stretched Clebsch-Gordan recursion, which keeps them exactly orthogonal.

use super::cg::clebsch_gordan_real;
use crate::error::{MaceError, Result};

/// Real orthogonal Wigner matrix for one angular order, row-major
/// `(2l+1) x (2l+1)`.
#[derive(Debug, Clone)]
pub struct WignerD {
    pub l: usize,
    pub matrix: Vec<f64>,
}

impl WignerD {
    pub fn dim(&self) -> usize {
        2 * self.l + 1
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(x.len(), d);
        let mut out = vec![0.0; d];
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += self.matrix[r * d + c] * x[c];
            }
            out[r] = acc;
        }
        out
    }
}

fn check_orthogonal(q: &[[f64; 3]; 3]) -> Result<f64> {
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for k in 0..3 {
                dot += q[k][i] * q[k][j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((dot - target).abs());
        }
    }
    if max_dev > 1e-10 {
        return Err(MaceError::geometry(format!(
            "matrix is not orthogonal (deviation {max_dev:.3e})"
        )));
    }
    let det = q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1])
        - q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0])
        + q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0]);
    Ok(det)
}

/// Wigner matrix of a proper rotation (determinant +1 required).
pub fn wigner_d(l: usize, q: &[[f64; 3]; 3]) -> Result<WignerD> {
    let det = check_orthogonal(q)?;
    if (det - 1.0).abs() > 1e-10 {
        return Err(MaceError::geometry(format!(
            "expected a proper rotation with det = +1, got det = {det}"
        )));
    }
    Ok(wigner_rotation_unchecked(l, q))
}

/// Wigner action of an arbitrary O(3) element on the parity-`(-1)^l`
/// irreps: improper elements pick up the `(-1)^l` factor of the inversion.
pub fn wigner_d_o3(l: usize, q: &[[f64; 3]; 3]) -> Result<WignerD> {
    let det = check_orthogonal(q)?;
    if (det - 1.0).abs() < 1e-10 {
        Ok(wigner_rotation_unchecked(l, q))
    } else if (det + 1.0).abs() < 1e-10 {
        let r = [
            [-q[0][0], -q[0][1], -q[0][2]],
            [-q[1][0], -q[1][1], -q[1][2]],
            [-q[2][0], -q[2][1], -q[2][2]],
        ];
        let mut d = wigner_rotation_unchecked(l, &r);
        if l % 2 == 1 {
            for v in d.matrix.iter_mut() {
                *v = -*v;
            }
        }
        Ok(d)
    } else {
        Err(MaceError::geometry(format!("determinant {det} is not +/-1")))
    }
}

fn wigner_rotation_unchecked(l: usize, q: &[[f64; 3]; 3]) -> WignerD {
    if l == 0 {
        return WignerD { l, matrix: vec![1.0] };
    }
    // slot ordering (m = -1, 0, 1) corresponds to Cartesian (y, z, x)
    const CART: [usize; 3] = [1, 2, 0];
    let mut d1 = vec![0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            d1[a * 3 + b] = q[CART[a]][CART[b]];
        }
    }
    if l == 1 {
        return WignerD { l, matrix: d1 };
    }
    let mut prev = d1.clone();
    for cur_l in 2..=l {
        let cg = clebsch_gordan_real(cur_l - 1, 1, cur_l).expect("stretched channel");
        let (d1n, d2n, d3n) = cg.dim();
        let dim_prev = d1n;
        let dim = d3n;
        // D^l_{M'M} = sum C[a',b',M'] Dprev[a'a] D1[b'b] C[a,b,M]
        let mut cur = vec![0.0; dim * dim];
        // contract in two stages to keep it O(dim^4)
        // t[a', b, M] = sum_a,b' C[a', b', M'].. better explicit:
        let mut tmp = vec![0.0; dim_prev * d2n * dim]; // [a'][b'][M]
        for a in 0..dim_prev {
            for b in 0..d2n {
                for m in 0..dim {
                    let c = cg.coeffs[a * d2n * dim + b * dim + m];
                    if c != 0.0 {
                        tmp[a * d2n * dim + b * dim + m] = c;
                    }
                }
            }
        }
        // u[a', b', M] = sum_{a,b} Dprev[a'a] D1[b'b] tmp[a,b,M]
        let mut u = vec![0.0; dim_prev * d2n * dim];
        for ap in 0..dim_prev {
            for bp in 0..d2n {
                for a in 0..dim_prev {
                    let da = prev[ap * dim_prev + a];
                    if da == 0.0 {
                        continue;
                    }
                    for b in 0..d2n {
                        let f = da * d1[bp * 3 + b];
                        if f == 0.0 {
                            continue;
                        }
                        for m in 0..dim {
                            u[ap * d2n * dim + bp * dim + m] += f * tmp[a * d2n * dim + b * dim + m];
                        }
                    }
                }
            }
        }
        for mp in 0..dim {
            for m in 0..dim {
                let mut acc = 0.0;
                for ap in 0..dim_prev {
                    for bp in 0..d2n {
                        acc += tmp[ap * d2n * dim + bp * dim + mp] * u[ap * d2n * dim + bp * dim + m];
                    }
                }
                cur[mp * dim + m] = acc;
            }
        }
        prev = cur;
    }
    WignerD { l, matrix: prev }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_rotation;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_rotation_gives_identity_matrix() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for l in 0..=4 {
            let d = wigner_d(l, &id).unwrap();
            let dim = d.dim();
            for r in 0..dim {
                for c in 0..dim {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(d.matrix[r * dim + c], want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn l1_is_permuted_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = random_rotation(&mut rng, false);
        let d = wigner_d(1, &q).unwrap();
        const CART: [usize; 3] = [1, 2, 0];
        for a in 0..3 {
            for b in 0..3 {
                assert_abs_diff_eq!(d.matrix[a * 3 + b], q[CART[a]][CART[b]], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn matrices_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in 0..=4usize {
            let q = random_rotation(&mut rng, false);
            let d = wigner_d(l, &q).unwrap();
            let dim = d.dim();
            for i in 0..dim {
                for j in 0..dim {
                    let mut dot = 0.0;
                    for k in 0..dim {
                        dot += d.matrix[i * dim + k] * d.matrix[j * dim + k];
                    }
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(dot, want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn composition_is_a_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for l in [1usize, 2, 3] {
            let q1 = random_rotation(&mut rng, false);
            let q2 = random_rotation(&mut rng, false);
            let q12 = matmul3(&q1, &q2);
            let d1 = wigner_d(l, &q1).unwrap();
            let d2 = wigner_d(l, &q2).unwrap();
            let d12 = wigner_d(l, &q12).unwrap();
            let dim = d1.dim();
            for r in 0..dim {
                for c in 0..dim {
                    let mut acc = 0.0;
                    for k in 0..dim {
                        acc += d1.matrix[r * dim + k] * d2.matrix[k * dim + c];
                    }
                    assert_abs_diff_eq!(d12.matrix[r * dim + c], acc, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn non_orthogonal_input_rejected() {
        let bad = [[1.0, 0.2, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(wigner_d(2, &bad).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let improper = random_rotation(&mut rng, true);
        assert!(wigner_d(2, &improper).is_err());
        assert!(wigner_d_o3(2, &improper).is_ok());
    }
}
