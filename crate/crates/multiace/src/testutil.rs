//! Independent numerical oracles and randomized inputs backing the
//! verification suites.
//!
//! Everything in here deliberately avoids the crate's own evaluation paths:
//! the spherical harmonics use the associated-Legendre closed form, the
//! Clebsch-Gordan oracle uses the Racah sum, and geometry comes from plain
//! rejection sampling. These are compared against the production
//! implementations by the test and acceptance suites.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;

use crate::so3::cg::{real_transform, CgTensor};
use crate::so3::{IrrepArray, Layout};

/// Uniform random unit vector.
pub fn random_unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Random element of O(3); proper rotation from a normalized quaternion,
/// composed with the inversion when `improper` is set.
pub fn random_rotation<R: Rng>(rng: &mut R, improper: bool) -> [[f64; 3]; 3] {
    let q: [f64; 4] = {
        loop {
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n2: f64 = q.iter().map(|x| x * x).sum();
            if n2 > 1e-3 && n2 <= 1.0 {
                let n = n2.sqrt();
                break [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            }
        }
    };
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let mut m = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    if improper {
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }
    m
}

/// Standard-normal filled array on the given layout.
pub fn random_irrep_array<R: Rng>(layout: &Arc<Layout>, rng: &mut R) -> IrrepArray {
    let values = (0..layout.len())
        .map(|_| {
            // Box-Muller keeps us independent of rand_distr
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    IrrepArray { layout: layout.clone(), values }
}

/// Real spherical harmonics (norm convention `sum_m Y^2 = 2l+1`) evaluated
/// through the associated-Legendre closed form. Independent oracle for the
/// recursion-based production path.
pub fn legendre_ylm_oracle(l_max: usize, u: [f64; 3]) -> Vec<f64> {
    let (x, y, z) = (u[0], u[1], u[2]);
    let cos_t = z;
    let sin_t = (x * x + y * y).sqrt();
    let phi = y.atan2(x);
    // CS-free associated Legendre P[l][m] via the standard recurrences
    let mut p = vec![vec![0.0; l_max + 1]; l_max + 1];
    p[0][0] = 1.0;
    for m in 1..=l_max {
        p[m][m] = p[m - 1][m - 1] * (2 * m - 1) as f64 * sin_t;
    }
    for m in 0..l_max {
        p[m + 1][m] = (2 * m + 1) as f64 * cos_t * p[m][m];
    }
    for m in 0..=l_max {
        for l in (m + 2)..=l_max {
            p[l][m] = ((2 * l - 1) as f64 * cos_t * p[l - 1][m]
                - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    let mut out = Vec::with_capacity((l_max + 1) * (l_max + 1));
    for l in 0..=l_max {
        let mut block = vec![0.0; 2 * l + 1];
        block[l] = ((2 * l + 1) as f64).sqrt() * p[l][0];
        for m in 1..=l {
            let mut ratio = 1.0; // (l-m)!/(l+m)!
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as f64;
            }
            let norm = ((2 * l + 1) as f64 * ratio).sqrt() * std::f64::consts::SQRT_2;
            block[l + m] = norm * p[l][m] * (m as f64 * phi).cos();
            block[l - m] = norm * p[l][m] * (m as f64 * phi).sin();
        }
        out.extend_from_slice(&block);
    }
    out
}

fn factorial(n: i64) -> f64 {
    debug_assert!(n >= 0);
    let mut acc = 1.0;
    for k in 2..=n {
        acc *= k as f64;
    }
    acc
}

/// Complex-basis Clebsch-Gordan coefficient from the closed-form Racah sum
/// (Condon-Shortley convention).
pub fn racah_cg_complex(
    l1: i64,
    m1: i64,
    l2: i64,
    m2: i64,
    l: i64,
    m: i64,
) -> f64 {
    if m1 + m2 != m || m.abs() > l || m1.abs() > l1 || m2.abs() > l2 {
        return 0.0;
    }
    if l < (l1 - l2).abs() || l > l1 + l2 {
        return 0.0;
    }
    let delta = factorial(l1 + l2 - l) * factorial(l1 - l2 + l) * factorial(-l1 + l2 + l)
        / factorial(l1 + l2 + l + 1);
    let pref = ((2 * l + 1) as f64
        * delta
        * factorial(l + m)
        * factorial(l - m)
        * factorial(l1 - m1)
        * factorial(l1 + m1)
        * factorial(l2 - m2)
        * factorial(l2 + m2))
    .sqrt();
    let k_min = 0.max(l2 - l - m1).max(l1 + m2 - l);
    let k_max = (l1 + l2 - l).min(l1 - m1).min(l2 + m2);
    let mut sum = 0.0;
    let mut k = k_min;
    while k <= k_max {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign
            / (factorial(k)
                * factorial(l1 + l2 - l - k)
                * factorial(l1 - m1 - k)
                * factorial(l2 + m2 - k)
                * factorial(l - l2 + m1 + k)
                * factorial(l - l1 - m2 + k));
        k += 1;
    }
    pref * sum
}

/// Real-basis Clebsch-Gordan oracle: Racah closed form followed by the same
/// real change of basis used in production (the CG values themselves come
/// from an entirely different algorithm).
pub fn racah_cg_real(l1: usize, l2: usize, l_out: usize) -> CgTensor {
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l_out + 1);
    let mut cc = vec![0.0; d1 * d2 * d3];
    for m1 in -(l1 as i64)..=l1 as i64 {
        for m2 in -(l2 as i64)..=l2 as i64 {
            for m in -(l_out as i64)..=l_out as i64 {
                let v = racah_cg_complex(l1 as i64, m1, l2 as i64, m2, l_out as i64, m);
                let i1 = (m1 + l1 as i64) as usize;
                let i2 = (m2 + l2 as i64) as usize;
                let i3 = (m + l_out as i64) as usize;
                cc[i1 * d2 * d3 + i2 * d3 + i3] = v;
            }
        }
    }
    real_transform(l1, l2, l_out, &cc)
}

/// Complex Wigner matrix elements are not needed anywhere; keep the module
/// focused on what the suites consume.
pub fn complex_zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotations_are_orthogonal_with_expected_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for improper in [false, true] {
            let q = random_rotation(&mut rng, improper);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| q[k][i] * q[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(dot, want, epsilon = 1e-12);
                }
            }
            let det = q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1])
                - q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0])
                + q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0]);
            assert_abs_diff_eq!(det, if improper { -1.0 } else { 1.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn racah_special_values() {
        // <1 1 1 -1 | 0 0> = 1/sqrt(3)
        assert_abs_diff_eq!(
            racah_cg_complex(1, 1, 1, -1, 0, 0),
            1.0 / 3.0_f64.sqrt(),
            epsilon = 1e-14
        );
        // <1 0 1 0 | 2 0> = sqrt(2/3)
        assert_abs_diff_eq!(
            racah_cg_complex(1, 0, 1, 0, 2, 0),
            (2.0_f64 / 3.0).sqrt(),
            epsilon = 1e-14
        );
        // <1 0 1 0 | 1 0> = 0
        assert_abs_diff_eq!(racah_cg_complex(1, 0, 1, 0, 1, 0), 0.0, epsilon = 1e-14);
    }
}
