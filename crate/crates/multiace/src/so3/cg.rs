//! Clebsch-Gordan coefficients in the real spherical-harmonic basis.
//!
//! The complex-basis coefficients are generated by a ladder construction:
//! the stretched state is obtained from the raising-operator null condition,
//! and lower projections follow by repeated application of the lowering
//! operator. This route is deliberately different from the closed-form
//! Racah sum, which serves as the independent oracle in the test suite.

use num_complex::Complex64;

use crate::error::{MaceError, Result};

/// Dense coupling tensor for one `(l1, l2) -> L` channel.
///
/// `coeffs[(m1 + l1) * (2*l2+1) * (2*L+1) + (m2 + l2) * (2*L+1) + (M + L)]`
/// holds the coefficient multiplying `x[l1,m1] * y[l2,m2]` in the `M`
/// component of the coupled output. All indices run `m = -l..=l`.
#[derive(Debug, Clone)]
pub struct CgTensor {
    pub l1: usize,
    pub l2: usize,
    pub l_out: usize,
    pub coeffs: Vec<f64>,
}

impl CgTensor {
    pub fn dim(&self) -> (usize, usize, usize) {
        (2 * self.l1 + 1, 2 * self.l2 + 1, 2 * self.l_out + 1)
    }

    #[inline]
    pub fn get(&self, m1: isize, m2: isize, m_out: isize) -> f64 {
        let (d1, d2, d3) = self.dim();
        let i1 = (m1 + self.l1 as isize) as usize;
        let i2 = (m2 + self.l2 as isize) as usize;
        let i3 = (m_out + self.l_out as isize) as usize;
        debug_assert!(i1 < d1 && i2 < d2 && i3 < d3);
        self.coeffs[i1 * d2 * d3 + i2 * d3 + i3]
    }

    /// Contract the tensor with two input blocks, producing the coupled
    /// output block of length `2*l_out + 1`.
    pub fn contract(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let (d1, d2, d3) = self.dim();
        assert_eq!(x.len(), d1);
        assert_eq!(y.len(), d2);
        let mut out = vec![0.0; d3];
        for i1 in 0..d1 {
            if x[i1] == 0.0 {
                continue;
            }
            for i2 in 0..d2 {
                let xy = x[i1] * y[i2];
                for i3 in 0..d3 {
                    out[i3] += self.coeffs[i1 * d2 * d3 + i2 * d3 + i3] * xy;
                }
            }
        }
        out
    }
}

pub fn triangle_ok(l1: usize, l2: usize, l_out: usize) -> bool {
    l_out + l2 >= l1 && l_out + l1 >= l2 && l1 + l2 >= l_out
}

/// Matrix element factor of the raising operator, `<l,m+1|J+|l,m>`.
fn ladder_up(l: usize, m: isize) -> f64 {
    let l = l as f64;
    let m = m as f64;
    ((l - m) * (l + m + 1.0)).max(0.0).sqrt()
}

/// Matrix element factor of the lowering operator, `<l,m-1|J-|l,m>`.
fn ladder_down(l: usize, m: isize) -> f64 {
    let l = l as f64;
    let m = m as f64;
    ((l + m) * (l - m + 1.0)).max(0.0).sqrt()
}

/// Complex-basis Clebsch-Gordan coefficients `<l1 m1 l2 m2 | L M>` in the
/// Condon-Shortley convention (all values real).
///
/// Layout matches [`CgTensor`].
pub fn clebsch_gordan_complex(l1: usize, l2: usize, l_out: usize) -> Result<Vec<f64>> {
    if !triangle_ok(l1, l2, l_out) {
        return Err(MaceError::config(format!(
            "triangle inequality violated for ({l1}, {l2}) -> {l_out}"
        )));
    }
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l_out + 1);
    let mut c = vec![0.0; d1 * d2 * d3];
    let idx = |m1: isize, m2: isize, mm: isize| -> usize {
        let i1 = (m1 + l1 as isize) as usize;
        let i2 = (m2 + l2 as isize) as usize;
        let i3 = (mm + l_out as isize) as usize;
        i1 * d2 * d3 + i2 * d3 + i3
    };

    let il1 = l1 as isize;
    let il2 = l2 as isize;
    let ll = l_out as isize;

    // Stretched state |L, L>: expand over m1 with m2 = L - m1. The raising
    // operator annihilates it, which gives a two-term recurrence along the
    // anti-diagonal.
    let m1_min = (-il1).max(ll - il2);
    let m1_max = il1.min(ll + il2);
    let n = (m1_max - m1_min + 1) as usize;
    let mut a = vec![0.0; n];
    a[0] = 1.0;
    for k in 1..n {
        let m1 = m1_min + k as isize;
        let denom = ladder_up(l2, ll - m1);
        debug_assert!(denom > 0.0);
        a[k] = -a[k - 1] * ladder_up(l1, m1 - 1) / denom;
    }
    let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Condon-Shortley sign: the coefficient at m1 = l1 is positive.
    let sign = if a[n - 1] > 0.0 { 1.0 } else { -1.0 };
    for (k, v) in a.iter().enumerate() {
        let m1 = m1_min + k as isize;
        c[idx(m1, ll - m1, ll)] = sign * v / norm;
    }

    // Walk down in M with the lowering operator on both sides.
    for mm in (-ll + 1..=ll).rev() {
        let scale = 1.0 / ladder_down(l_out, mm);
        for m1 in -il1..=il1 {
            for m2 in -il2..=il2 {
                if m1 + m2 != mm - 1 {
                    continue;
                }
                let mut v = 0.0;
                if m1 + 1 <= il1 {
                    v += ladder_down(l1, m1 + 1) * c[idx(m1 + 1, m2, mm)];
                }
                if m2 + 1 <= il2 {
                    v += ladder_down(l2, m2 + 1) * c[idx(m1, m2 + 1, mm)];
                }
                c[idx(m1, m2, mm - 1)] = scale * v;
            }
        }
    }
    Ok(c)
}

/// Unitary change of basis from complex to real spherical harmonics for
/// angular order `l`. Row index is the real component `mu`, column index the
/// complex `m`, both stored with offset `+l`.
pub fn real_from_complex_matrix(l: usize) -> Vec<Complex64> {
    let d = 2 * l + 1;
    let mut u = vec![Complex64::new(0.0, 0.0); d * d];
    let at = |mu: isize, m: isize| -> usize {
        ((mu + l as isize) as usize) * d + (m + l as isize) as usize
    };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    u[at(0, 0)] = Complex64::new(1.0, 0.0);
    for mu in 1..=l as isize {
        let cs = if mu % 2 == 0 { 1.0 } else { -1.0 };
        // real cosine-like component (mu > 0)
        u[at(mu, mu)] = Complex64::new(cs * s, 0.0);
        u[at(mu, -mu)] = Complex64::new(s, 0.0);
        // real sine-like component (mu < 0)
        u[at(-mu, mu)] = Complex64::new(0.0, -cs * s);
        u[at(-mu, -mu)] = Complex64::new(0.0, s);
    }
    u
}

/// Clebsch-Gordan coefficients in the real spherical-harmonic basis.
///
/// Obtained from the complex-basis coefficients by the unitary change of
/// basis. The transformed tensor is purely real when `l1 + l2 + l_out` is
/// even and purely imaginary when odd; the nonvanishing part is taken in
/// either case, so the result always satisfies the Wigner equivariance
/// identity and stays normalized to `sum_{m1,m2} C^2 = 1` per output `M`.
pub fn clebsch_gordan_real(l1: usize, l2: usize, l_out: usize) -> Result<CgTensor> {
    let cc = clebsch_gordan_complex(l1, l2, l_out)?;
    Ok(real_transform(l1, l2, l_out, &cc))
}

/// Apply the real change of basis to a complex-basis CG tensor.
pub fn real_transform(l1: usize, l2: usize, l_out: usize, cc: &[f64]) -> CgTensor {
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l_out + 1);
    let u1 = real_from_complex_matrix(l1);
    let u2 = real_from_complex_matrix(l2);
    let u3 = real_from_complex_matrix(l_out);
    let mut t = vec![Complex64::new(0.0, 0.0); d1 * d2 * d3];
    // C_real[mu1, mu2, Mu] = sum U_L[Mu, M] C_c[m1, m2, M]
    //                        conj(U_l1[mu1, m1]) conj(U_l2[mu2, m2])
    for i1 in 0..d1 {
        for j1 in 0..d1 {
            let f1 = u1[i1 * d1 + j1].conj();
            if f1.norm_sqr() == 0.0 {
                continue;
            }
            for i2 in 0..d2 {
                for j2 in 0..d2 {
                    let f12 = f1 * u2[i2 * d2 + j2].conj();
                    if f12.norm_sqr() == 0.0 {
                        continue;
                    }
                    for i3 in 0..d3 {
                        for j3 in 0..d3 {
                            let f = f12 * u3[i3 * d3 + j3];
                            if f.norm_sqr() == 0.0 {
                                continue;
                            }
                            t[i1 * d2 * d3 + i2 * d3 + i3] += f * cc[j1 * d2 * d3 + j2 * d3 + j3];
                        }
                    }
                }
            }
        }
    }
    let take_imag = (l1 + l2 + l_out) % 2 == 1;
    let coeffs: Vec<f64> = t
        .iter()
        .map(|z| if take_imag { z.im } else { z.re })
        .collect();
    if cfg!(debug_assertions) {
        let dropped: f64 = t
            .iter()
            .map(|z| if take_imag { z.re.abs() } else { z.im.abs() })
            .fold(0.0, f64::max);
        debug_assert!(dropped < 1e-12, "real transform left residue {dropped}");
    }
    CgTensor { l1, l2, l_out, coeffs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_coupling_is_unity() {
        let t = clebsch_gordan_real(0, 0, 0).unwrap();
        assert_eq!(t.coeffs.len(), 1);
        assert_abs_diff_eq!(t.coeffs[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn triangle_violation_rejected() {
        assert!(clebsch_gordan_real(1, 1, 3).is_err());
        assert!(clebsch_gordan_real(0, 2, 1).is_err());
    }

    #[test]
    fn unitarity_per_output_component() {
        for (l1, l2, l_out) in [(1, 1, 0), (1, 1, 2), (2, 1, 1), (2, 2, 2), (3, 2, 1)] {
            let t = clebsch_gordan_real(l1, l2, l_out).unwrap();
            let (d1, d2, d3) = t.dim();
            for i3 in 0..d3 {
                let mut s = 0.0;
                for i1 in 0..d1 {
                    for i2 in 0..d2 {
                        let v = t.coeffs[i1 * d2 * d3 + i2 * d3 + i3];
                        s += v * v;
                    }
                }
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn vector_coupling_to_scalar_is_dot_product() {
        let t = clebsch_gordan_real(1, 1, 0).unwrap();
        let a = [0.3, -1.2, 0.7];
        let b = [-0.5, 0.25, 2.0];
        let out = t.contract(&a, &b);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        // proportional to the euclidean dot product
        let scale = out[0] / dot;
        for _ in 0..4 {
            let a2 = [1.0, 2.0, 3.0];
            let b2 = [4.0, -1.0, 0.5];
            let dot2: f64 = a2.iter().zip(&b2).map(|(x, y)| x * y).sum();
            let out2 = t.contract(&a2, &b2);
            assert_abs_diff_eq!(out2[0], scale * dot2, epsilon = 1e-12);
        }
        assert!(scale.abs() > 0.1);
    }

    #[test]
    fn matches_racah_oracle_for_all_low_orders() {
        for l1 in 0..=3usize {
            for l2 in 0..=3usize {
                for l_out in l1.abs_diff(l2)..=(l1 + l2).min(3) {
                    let ours = clebsch_gordan_real(l1, l2, l_out).unwrap();
                    let oracle = crate::testutil::racah_cg_real(l1, l2, l_out);
                    for (a, b) in ours.coeffs.iter().zip(&oracle.coeffs) {
                        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn equivariance_identity_holds() {
        use crate::so3::wigner::wigner_d;
        use crate::testutil::random_rotation;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for (l1, l2, l_out) in [(1, 1, 1), (2, 1, 2), (2, 2, 1), (3, 2, 2), (3, 3, 0)] {
            let t = clebsch_gordan_real(l1, l2, l_out).unwrap();
            let q = random_rotation(&mut rng, false);
            let d1 = wigner_d(l1, &q).unwrap();
            let d2 = wigner_d(l2, &q).unwrap();
            let dl = wigner_d(l_out, &q).unwrap();
            // C contracted with (D1 x, D2 y) must equal D_L (C contracted with (x, y))
            let x: Vec<f64> = (0..2 * l1 + 1).map(|i| (i as f64 * 0.37).sin() + 0.2).collect();
            let y: Vec<f64> = (0..2 * l2 + 1).map(|i| (i as f64 * 0.61).cos() - 0.1).collect();
            let lhs = t.contract(&d1.apply(&x), &d2.apply(&y));
            let rhs = dl.apply(&t.contract(&x, &y));
            for (a, b) in lhs.iter().zip(&rhs) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn vector_coupling_to_vector_is_antisymmetric() {
        let t = clebsch_gordan_real(1, 1, 1).unwrap();
        let a = [0.3, -1.2, 0.7];
        let b = [-0.5, 0.25, 2.0];
        let ab = t.contract(&a, &b);
        let ba = t.contract(&b, &a);
        let mag: f64 = ab.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mag > 1e-3, "cross-product-like coupling should not vanish");
        for (x, y) in ab.iter().zip(&ba) {
            assert_abs_diff_eq!(*x, -*y, epsilon = 1e-12);
        }
    }
}
