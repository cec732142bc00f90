//! Radial embeddings: the Bessel basis under a smooth polynomial cutoff
//! envelope, plus the learnable maps built on top of it (element-agnostic
//! multilayer map and element-dependent linear map).
//!
//! Everything vanishes identically for `r >= r_cut`; the learnable maps
//! carry no additive constants anywhere so the compact support survives
//! them exactly.

use serde::{Deserialize, Serialize};

use crate::act::Act;
use crate::error::{MaceError, Result};
use crate::scalar::Scalar;

/// Distances below this guard (in Angstrom) are rejected as data errors.
pub const R_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadialVariant {
    /// Fixed orthogonal Bessel functions, no learnable map.
    FixedOrthogonal,
    /// Shared multilayer map from the Bessel embedding, blind to elements.
    AgnosticMlp,
    /// Per-neighbor-element linear combination of Bessel functions.
    ElementDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialConfig {
    pub r_cut: f64,
    pub n_basis: usize,
    pub variant: RadialVariant,
    pub mlp_widths: Vec<usize>,
    /// `p` of the polynomial envelope; the envelope is a degree `p + 2`
    /// polynomial with value 1 at the origin and a triple zero at `r_cut`.
    pub envelope_degree: u32,
}

impl Default for RadialConfig {
    fn default() -> Self {
        RadialConfig {
            r_cut: 5.0,
            n_basis: 8,
            variant: RadialVariant::AgnosticMlp,
            mlp_widths: vec![64, 64, 64],
            envelope_degree: 4,
        }
    }
}

impl RadialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_cut <= 0.0 {
            return Err(MaceError::config("r_cut must be positive"));
        }
        if self.n_basis == 0 {
            return Err(MaceError::config("n_basis must be at least 1"));
        }
        if self.envelope_degree < 2 {
            return Err(MaceError::config("envelope_degree must be at least 2"));
        }
        Ok(())
    }
}

/// Smooth cutoff envelope: value 1 at `x = 0`, value and first two
/// derivatives 0 at `x = 1`, identically 0 beyond.
pub fn envelope<S: Scalar>(x: S, p: u32) -> S {
    if x.value() >= 1.0 {
        return S::zero();
    }
    let pf = p as f64;
    let a = S::from_f64(-(pf + 1.0) * (pf + 2.0) / 2.0);
    let b = S::from_f64(pf * (pf + 2.0));
    let c = S::from_f64(-pf * (pf + 1.0) / 2.0);
    let xp = x.powi(p as i32);
    S::one() + xp * (a + x * (b + x * c))
}

/// Derivative of [`envelope`] with respect to `x`.
pub fn envelope_deriv<S: Scalar>(x: S, p: u32) -> S {
    if x.value() >= 1.0 {
        return S::zero();
    }
    let pf = p as f64;
    // -p(p+1)(p+2)/2 * x^{p-1} (1 - x)^2
    let k = S::from_f64(-pf * (pf + 1.0) * (pf + 2.0) / 2.0);
    let one_minus = S::one() - x;
    k * x.powi(p as i32 - 1) * one_minus * one_minus
}

/// Raw Bessel component without the envelope:
/// `sqrt(2/r_cut) * sin(n pi r / r_cut) / r`.
pub fn bessel_raw<S: Scalar>(n: usize, r: S, r_cut: f64) -> S {
    let amp = S::from_f64((2.0 / r_cut).sqrt());
    let freq = S::from_f64(n as f64 * std::f64::consts::PI / r_cut);
    amp * (freq * r).sin() / r
}

/// Enveloped Bessel embedding of one distance, components `n = 1..=n_basis`.
pub fn bessel_kernel<S: Scalar>(r: S, n_basis: usize, r_cut: f64, p: u32) -> Vec<S> {
    if r.value() >= r_cut {
        return vec![S::zero(); n_basis];
    }
    let env = envelope(r / S::from_f64(r_cut), p);
    (1..=n_basis).map(|n| bessel_raw(n, r, r_cut) * env).collect()
}

/// Derivatives of the enveloped components with respect to `r`.
pub fn bessel_kernel_deriv<S: Scalar>(r: S, n_basis: usize, r_cut: f64, p: u32) -> Vec<S> {
    if r.value() >= r_cut {
        return vec![S::zero(); n_basis];
    }
    let inv_rc = 1.0 / r_cut;
    let x = r * S::from_f64(inv_rc);
    let env = envelope(x, p);
    let denv = envelope_deriv(x, p) * S::from_f64(inv_rc);
    let amp = S::from_f64((2.0 * inv_rc).sqrt());
    let inv_r = S::one() / r;
    (1..=n_basis)
        .map(|n| {
            let freq = S::from_f64(n as f64 * std::f64::consts::PI * inv_rc);
            let s = (freq * r).sin();
            let c = (freq * r).cos();
            let raw = amp * s * inv_r;
            let draw = amp * (freq * c - s * inv_r) * inv_r;
            draw * env + raw * denv
        })
        .collect()
}

/// Bessel embedding of a distance, checked against the configuration.
///
/// Errors on distances at or below the minimum-distance guard.
pub fn bessel_embed(r: f64, cfg: &RadialConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(r > R_MIN) {
        return Err(MaceError::data(format!(
            "distance {r} is at or below the minimum-distance guard {R_MIN}"
        )));
    }
    Ok(bessel_kernel(r, cfg.n_basis, cfg.r_cut, cfg.envelope_degree))
}

/// Weights of the element-agnostic multilayer radial map. All layers are
/// bias-free; `matrices[i]` is row-major `(widths[i], widths[i-1])` with
/// `widths[-1] = n_basis` and the final row count equal to the number of
/// output paths.
#[derive(Debug, Clone)]
pub struct RadialMlpWeights {
    pub matrices: Vec<(usize, usize, Vec<f64>)>,
    pub activation: Act,
}

/// Evaluate the agnostic multilayer radial map on a Bessel embedding.
/// Hidden layers use the activation scaled to preserve second moments; the
/// output layer is linear.
pub fn agnostic_radial(bessel: &[f64], weights: &RadialMlpWeights) -> Result<Vec<f64>> {
    let mut x = bessel.to_vec();
    let n_layers = weights.matrices.len();
    for (i, (rows, cols, w)) in weights.matrices.iter().enumerate() {
        if *cols != x.len() || w.len() != rows * cols {
            return Err(MaceError::config(format!(
                "radial map layer {i} expects {cols} inputs, got {}",
                x.len()
            )));
        }
        let mut y = vec![0.0; *rows];
        for r in 0..*rows {
            let mut acc = 0.0;
            for c in 0..*cols {
                acc += w[r * cols + c] * x[c];
            }
            y[r] = acc;
        }
        if i + 1 < n_layers {
            let inv_rms = 1.0 / weights.activation.normal_rms();
            for v in y.iter_mut() {
                *v = weights.activation.eval(*v) * inv_rms;
            }
        }
        x = y;
    }
    Ok(x)
}

/// Element-dependent linear radial map: selects the weight slice of the
/// neighbor element and contracts it with the Bessel embedding.
/// `weights` is `[n_elements][n_out][n_basis]`, flattened row-major.
pub fn element_dependent_radial(
    bessel: &[f64],
    neighbor_one_hot: &[f64],
    weights: &[f64],
    n_out: usize,
) -> Result<Vec<f64>> {
    let n_basis = bessel.len();
    let n_elem = neighbor_one_hot.len();
    if weights.len() != n_elem * n_out * n_basis {
        return Err(MaceError::config(format!(
            "element-dependent radial weights have {} entries, expected {}",
            weights.len(),
            n_elem * n_out * n_basis
        )));
    }
    let z = neighbor_one_hot
        .iter()
        .position(|v| *v == 1.0)
        .ok_or_else(|| MaceError::data("neighbor one-hot is not a valid basis vector"))?;
    let slice = &weights[z * n_out * n_basis..(z + 1) * n_out * n_basis];
    let mut out = vec![0.0; n_out];
    for o in 0..n_out {
        let mut acc = 0.0;
        for n in 0..n_basis {
            acc += slice[o * n_basis + n] * bessel[n];
        }
        out[o] = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> RadialConfig {
        RadialConfig { r_cut: 5.0, n_basis: 8, ..Default::default() }
    }

    #[test]
    fn all_components_vanish_at_and_beyond_cutoff() {
        let cfg = cfg();
        for r in [5.0, 5.0001, 6.0, 50.0] {
            let b = bessel_embed(r, &cfg).unwrap();
            assert!(b.iter().all(|v| *v == 0.0), "expected exact zeros at r = {r}");
        }
    }

    #[test]
    fn raw_component_closed_form_at_half_cutoff() {
        // envelope factored out: the sine part alone has the closed form
        // sqrt(2/r_cut) * 2 / r_cut for n = 1 at r = r_cut / 2
        let r_cut = 5.0;
        let want = (2.0_f64 / r_cut).sqrt() * 2.0 / r_cut;
        let got = bessel_raw(1, r_cut / 2.0, r_cut);
        assert_abs_diff_eq!(got, want, epsilon = 1e-14);
        // independent numerical evaluation of the same definition
        let direct = (2.0 / r_cut).sqrt()
            * (1.0 * std::f64::consts::PI * (r_cut / 2.0) / r_cut).sin()
            / (r_cut / 2.0);
        assert_abs_diff_eq!(got, direct, epsilon = 1e-15);
    }

    #[test]
    fn cutoff_approach_is_at_least_cubic() {
        // the envelope alone has a triple zero at the cutoff: log-log slope 3
        let p = 4;
        let eps: [f64; 3] = [1e-2, 1e-3, 1e-4];
        let env_mags: Vec<f64> = eps.iter().map(|e| envelope(1.0 - e, p).abs()).collect();
        let slope =
            (env_mags[2].ln() - env_mags[0].ln()) / (eps[2].ln() - eps[0].ln());
        assert_abs_diff_eq!(slope, 3.0, epsilon = 0.05);

        // the full embedding obeys |embed(r_cut - eps)| < C eps^3 (the sine
        // factor vanishes there too, so the decay is in fact one order
        // faster; the bound is what matters)
        let cfg = cfg();
        let mags: Vec<f64> =
            eps.iter().map(|e| bessel_embed(cfg.r_cut - e, &cfg).unwrap()[0].abs()).collect();
        let c = 10.0 * mags[0] / eps[0].powi(3);
        for (m, e) in mags.iter().zip(&eps) {
            assert!(*m < c * e.powi(3), "embedding not cubically small at eps={e}");
        }
        let slope = (mags[2].ln() - mags[0].ln()) / (eps[2].ln() - eps[0].ln());
        assert!(slope >= 2.9, "log-log slope {slope} should be at least 3");
    }

    #[test]
    fn envelope_boundary_conditions() {
        for p in [2u32, 4, 6] {
            assert_abs_diff_eq!(envelope(0.0, p), 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(envelope(1.0 - 1e-9, p), 0.0, epsilon = 1e-8);
            assert_eq!(envelope(1.0, p), 0.0);
            // derivative formula matches finite differences
            let h = 1e-6;
            for x in [0.1, 0.5, 0.9] {
                let fd: f64 = (envelope(x + h, p) - envelope(x - h, p)) / (2.0 * h);
                assert_abs_diff_eq!(envelope_deriv(x, p), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn kernel_derivative_matches_finite_differences() {
        let cfg = cfg();
        let h = 1e-6;
        for r in [0.3, 1.7, 4.2, 4.99] {
            let d = bessel_kernel_deriv(r, cfg.n_basis, cfg.r_cut, cfg.envelope_degree);
            let up = bessel_kernel(r + h, cfg.n_basis, cfg.r_cut, cfg.envelope_degree);
            let dn = bessel_kernel(r - h, cfg.n_basis, cfg.r_cut, cfg.envelope_degree);
            for n in 0..cfg.n_basis {
                assert_abs_diff_eq!(d[n], (up[n] - dn[n]) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn second_derivative_continuous_at_cutoff() {
        // C^2 at r_cut: second finite difference just inside tends to zero
        let cfg = cfg();
        let h = 1e-3;
        let f = |r: f64| bessel_embed(r, &cfg).unwrap()[2];
        let second = |r: f64| (f(r + h) - 2.0 * f(r) + f(r - h)) / (h * h);
        let inside = second(cfg.r_cut - 4.0 * h);
        let scale = second(cfg.r_cut / 2.0).abs().max(1e-6);
        assert!(
            (inside / scale).abs() < 1e-1,
            "second derivative should vanish approaching the cutoff"
        );
        // and exactly zero beyond
        assert_eq!(second(cfg.r_cut + 4.0 * h), 0.0);
    }

    #[test]
    fn minimum_distance_guard() {
        let cfg = cfg();
        assert!(bessel_embed(1e-4, &cfg).is_err());
        assert!(bessel_embed(0.0, &cfg).is_err());
        assert!(bessel_embed(-1.0, &cfg).is_err());
        assert!(bessel_embed(2e-3, &cfg).is_ok());
    }

    #[test]
    fn agnostic_map_zero_weights_and_compact_support() {
        let cfg = cfg();
        let w = RadialMlpWeights {
            matrices: vec![(4, 8, vec![0.0; 32]), (3, 4, vec![0.0; 12])],
            activation: Act::Silu,
        };
        let b = bessel_embed(2.0, &cfg).unwrap();
        assert!(agnostic_radial(&b, &w).unwrap().iter().all(|v| *v == 0.0));

        // nonzero weights, input beyond cutoff: still exactly zero because
        // the embedding is zero and no layer has a constant term
        let w = RadialMlpWeights {
            matrices: vec![
                (4, 8, (0..32).map(|i| (i as f64) * 0.01 - 0.2).collect()),
                (3, 4, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect()),
            ],
            activation: Act::Silu,
        };
        let b = bessel_embed(cfg.r_cut + 1.0, &cfg).unwrap_or(vec![0.0; 8]);
        let b = if b.is_empty() { vec![0.0; 8] } else { b };
        let out = agnostic_radial(&b, &w).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn element_dependent_selects_slices_and_degenerates_to_shared() {
        let cfg = cfg();
        let b = bessel_embed(2.3, &cfg).unwrap();
        let n_out = 3;
        let slice: Vec<f64> = (0..n_out * cfg.n_basis).map(|i| (i as f64 * 0.37).sin()).collect();
        // identical slices for two elements
        let mut shared = slice.clone();
        shared.extend_from_slice(&slice);
        let a = element_dependent_radial(&b, &[1.0, 0.0], &shared, n_out).unwrap();
        let c = element_dependent_radial(&b, &[0.0, 1.0], &shared, n_out).unwrap();
        assert_eq!(a, c);
        // degenerate case equals a plain linear agnostic map
        let linear = RadialMlpWeights {
            matrices: vec![(n_out, cfg.n_basis, slice.clone())],
            activation: Act::Silu,
        };
        let d = agnostic_radial(&b, &linear).unwrap();
        assert_eq!(a, d);

        // distinct slices differ
        let mut distinct = slice.clone();
        distinct.extend(slice.iter().map(|v| v * 2.0));
        let a = element_dependent_radial(&b, &[1.0, 0.0], &distinct, n_out).unwrap();
        let c = element_dependent_radial(&b, &[0.0, 1.0], &distinct, n_out).unwrap();
        assert_ne!(a, c);

        // invalid one-hot
        assert!(element_dependent_radial(&b, &[0.5, 0.5], &distinct, n_out).is_err());
    }
}
