//! Executable verification of the models' structural claims: symmetry
//! under O(3), permutation determinism, body ordering via vanishing mixed
//! partials, locality/extensivity, gradient consistency, initialization
//! statistics, and smoothness across float precisions.
//!
//! Every suite is deterministic under its seed and reports the maximum
//! observed violation next to its tolerance.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{forces, SparseBilinearMap};
use crate::error::Result;
use crate::graph::Configuration;
use crate::model::build::compile;
use crate::model::{
    forward_energy, forward_energy_at_precision, ForwardOptions, LayerMode, Model, Nonlinearity,
};
use crate::testutil::random_rotation;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_violation: f64, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            max_violation,
            tolerance,
            pass: max_violation < tolerance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub precision: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Plot- and diff-friendly delimited text: one line per check.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("suite\tcheck\tmax_violation\ttolerance\tstatus\tseed\tprecision\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{}\t{}\t{:e}\t{:e}\t{}\t{}\t{}\n",
                self.suite,
                c.name,
                c.max_violation,
                c.tolerance,
                if c.pass { "pass" } else { "FAIL" },
                self.seed,
                self.precision
            ));
        }
        out
    }
}

/// Random atoms uniform in a ball of radius `0.8 * r_cut`, rejecting pairs
/// closer than 0.7 A.
pub fn random_environment(
    rng: &mut ChaCha8Rng,
    n_atoms: usize,
    r_cut: f64,
    symbols: &[String],
) -> Configuration {
    let radius = 0.8 * r_cut;
    let mut positions: Vec<[f64; 3]> = Vec::new();
    while positions.len() < n_atoms {
        let p = [
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
        ];
        let norm2: f64 = p.iter().map(|v| v * v).sum();
        if norm2 > radius * radius {
            continue;
        }
        let ok = positions.iter().all(|q| {
            let d2: f64 = (0..3).map(|i| (q[i] - p[i]) * (q[i] - p[i])).sum();
            d2.sqrt() > 0.7
        });
        if ok {
            positions.push(p);
        }
    }
    let elements = (0..n_atoms)
        .map(|_| symbols[rng.gen_range(0..symbols.len())].clone())
        .collect();
    Configuration::new(positions, elements)
}

fn rotate_cfg(cfg: &Configuration, q: &[[f64; 3]; 3]) -> Configuration {
    Configuration::new(
        cfg.positions
            .iter()
            .map(|p| {
                let mut o = [0.0; 3];
                for r in 0..3 {
                    o[r] = q[r][0] * p[0] + q[r][1] * p[1] + q[r][2] * p[2];
                }
                o
            })
            .collect(),
        cfg.elements.clone(),
    )
}

/// Energy invariance, per-order feature equivariance and force covariance
/// under random O(3) elements (proper and improper).
pub fn check_equivariance(model: &Model, n_geometries: usize, n_group: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOptions { need_features: true };
    let mut e_viol: f64 = 0.0;
    let mut h_viol: f64 = 0.0;
    let mut f_viol: f64 = 0.0;
    for _ in 0..n_geometries {
        let cfg = random_environment(&mut rng, 5, model.r_cut(), &model.elements.symbols);
        let base = forward_energy(model, &cfg, opts)?;
        let f_base = forces(model, &cfg)?;
        for gi in 0..n_group {
            let q = random_rotation(&mut rng, gi % 2 == 1);
            let moved = rotate_cfg(&cfg, &q);
            let out = forward_energy(model, &moved, opts)?;
            e_viol = e_viol.max((out.total_energy - base.total_energy).abs());
            if let (Some(h0), Some(h1)) = (&base.features, &out.features) {
                for (layer0, layer1) in h0.iter().zip(h1) {
                    for (a, b) in layer0.iter().zip(layer1) {
                        let expected = a.wigner_transformed(&q)?;
                        for (x, y) in expected.values.iter().zip(&b.values) {
                            h_viol = h_viol.max((x - y).abs());
                        }
                    }
                }
            }
            let f_rot = forces(model, &moved)?;
            for (fi, f0) in f_rot.iter().zip(&f_base) {
                for r in 0..3 {
                    let want = q[r][0] * f0[0] + q[r][1] * f0[1] + q[r][2] * f0[2];
                    f_viol = f_viol.max((fi[r] - want).abs());
                }
            }
        }
    }
    Ok(SuiteReport {
        suite: "equivariance".into(),
        seed,
        precision: "f64".into(),
        checks: vec![
            CheckResult::new("energy-invariance", e_viol, 1e-9),
            CheckResult::new("feature-equivariance", h_viol, 1e-10),
            CheckResult::new("force-covariance", f_viol, 1e-9),
        ],
    })
}

/// Bitwise reproducibility of energies, site energies and features under
/// atom relabeling.
pub fn check_permutation(model: &Model, n_cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOptions { need_features: true };
    let mut viol: f64 = 0.0;
    for _ in 0..n_cases {
        let cfg = random_environment(&mut rng, 6, model.r_cut(), &model.elements.symbols);
        let out = forward_energy(model, &cfg, opts)?;
        let mut perm: Vec<usize> = (0..cfg.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = Configuration::new(
            perm.iter().map(|&i| cfg.positions[i]).collect(),
            perm.iter().map(|&i| cfg.elements[i].clone()).collect(),
        );
        let out_p = forward_energy(model, &permuted, opts)?;
        if out.total_energy.to_bits() != out_p.total_energy.to_bits() {
            viol = viol.max((out.total_energy - out_p.total_energy).abs().max(f64::MIN_POSITIVE));
        }
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            if out.site_energies[old_idx].to_bits() != out_p.site_energies[new_idx].to_bits() {
                viol = viol.max(
                    (out.site_energies[old_idx] - out_p.site_energies[new_idx])
                        .abs()
                        .max(f64::MIN_POSITIVE),
                );
            }
        }
        if let (Some(h), Some(hp)) = (&out.features, &out_p.features) {
            for (layer, layer_p) in h.iter().zip(hp) {
                for (new_idx, &old_idx) in perm.iter().enumerate() {
                    for (a, b) in layer[old_idx].values.iter().zip(&layer_p[new_idx].values) {
                        if a.to_bits() != b.to_bits() {
                            viol = viol.max((a - b).abs().max(f64::MIN_POSITIVE));
                        }
                    }
                }
            }
        }
    }
    Ok(SuiteReport {
        suite: "permutation".into(),
        seed,
        precision: "f64".into(),
        checks: vec![CheckResult::new("bitwise-relabeling-invariance", viol, f64::MIN_POSITIVE)],
    })
}

/// Mixed finite-difference partial of the site energy of atom 0 with
/// respect to the x coordinates of the given atoms, with one Richardson
/// step. The difference operator annihilates any function that depends
/// jointly on fewer atoms, so the vanishing test has no truncation error.
fn mixed_partial_site0(model: &Model, cfg: &Configuration, atoms: &[usize], h: f64) -> Result<f64> {
    let n = atoms.len();
    let eval = |displacements: &[f64]| -> Result<f64> {
        let mut c = cfg.clone();
        for (a, d) in atoms.iter().zip(displacements) {
            c.positions[*a][0] += d;
        }
        Ok(forward_energy(model, &c, Default::default())?.site_energies[0])
    };
    let mut total = 0.0;
    // all sign combinations of the central difference stencil
    for mask in 0..(1usize << n) {
        let mut disp = vec![0.0; n];
        let mut sign = 1.0;
        for (bit, d) in disp.iter_mut().enumerate() {
            if mask & (1 << bit) != 0 {
                *d = h;
            } else {
                *d = -h;
                sign = -sign;
            }
        }
        total += sign * eval(&disp)?;
    }
    Ok(total / (2.0 * h).powi(n as i32))
}

fn richardson_mixed_partial(
    model: &Model,
    cfg: &Configuration,
    atoms: &[usize],
    h: f64,
) -> Result<f64> {
    let d_h = mixed_partial_site0(model, cfg, atoms, h)?;
    let d_h2 = mixed_partial_site0(model, cfg, atoms, h / 2.0)?;
    Ok((4.0 * d_h2 - d_h) / 3.0)
}

/// Body-order check: the site energy's mixed partial over `order` distinct
/// neighbors must be resolvable, and the one over `order + 1` neighbors
/// must vanish (scale-relative). Models with gated nonlinearities are
/// expected to fail the vanishing test; for them the suite asserts the
/// failure (infinite body order).
pub fn check_body_order(model: &Model, order: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // tight cluster: every atom inside every other atom's cutoff
    let n_atoms = order + 2;
    let cfg = loop {
        let c = random_environment(&mut rng, n_atoms, 0.45 * model.r_cut(), &model.elements.symbols);
        let g = crate::graph::build_neighbor_graph(&c, model.r_cut())?;
        if (0..n_atoms).all(|i| g.neighbor_count(i) == n_atoms - 1) {
            break c;
        }
    };
    let h = 0.04;
    let atoms_low: Vec<usize> = (1..=order).collect();
    let atoms_high: Vec<usize> = (1..=order + 1).collect();
    let d_low = richardson_mixed_partial(model, &cfg, &atoms_low, h)?;
    let d_high = richardson_mixed_partial(model, &cfg, &atoms_high, h)?;
    let scale = d_low.abs().max(1e-12);
    let ratio = d_high.abs() / scale;
    let gated = model.spec().nonlinearity != Nonlinearity::None;
    let mut checks = vec![CheckResult {
        name: format!("order-{order}-partial-resolves"),
        max_violation: if d_low.abs() > 1e-9 { 0.0 } else { 1.0 },
        tolerance: 0.5,
        pass: d_low.abs() > 1e-9,
    }];
    if gated {
        checks.push(CheckResult {
            name: format!("order-{}-vanishing-expected-fail", order + 1),
            max_violation: ratio,
            tolerance: 1e-6,
            // infinite body order: the vanishing test must fail
            pass: ratio >= 1e-6,
        });
    } else {
        checks.push(CheckResult::new(
            format!("order-{}-partial-vanishes", order + 1),
            ratio,
            1e-6,
        ));
    }
    Ok(SuiteReport {
        suite: "body-order".into(),
        seed,
        precision: "f64".into(),
        checks,
    })
}

/// Initialization statistics: per-layer feature second moments over random
/// environments stay within an order of magnitude of one; spherical
/// harmonic block norms are exact; the message normalization scales as
/// declared.
pub fn check_normalization_statistics(model: &Model, n_samples: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOptions { need_features: true };
    let n_layers = model.arch.layers.len();
    let mut sums = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    for _ in 0..n_samples {
        let cfg = random_environment(&mut rng, 6, model.r_cut(), &model.elements.symbols);
        let out = forward_energy(model, &cfg, opts)?;
        if let Some(layers) = &out.features {
            for (t, per_atom) in layers.iter().enumerate() {
                for h in per_atom {
                    for v in &h.values {
                        sums[t] += v * v;
                        counts[t] += 1;
                    }
                }
            }
        }
    }
    let mut checks = Vec::new();
    for t in 0..n_layers {
        if counts[t] == 0 {
            continue;
        }
        let moment = sums[t] / counts[t] as f64;
        // violation measured as distance outside [0.2, 5.0] in log space
        let viol = if (0.2..=5.0).contains(&moment) {
            0.0
        } else {
            (moment.ln().abs() - 5.0f64.ln()).max(0.0)
        };
        checks.push(CheckResult {
            name: format!("layer-{t}-second-moment ({moment:.3})"),
            max_violation: viol,
            tolerance: 1e-9,
            pass: (0.2..=5.0).contains(&moment),
        });
    }
    // exact harmonic norms per sample
    let t = crate::so3::YlmTables::new(3);
    let mut y_viol: f64 = 0.0;
    for _ in 0..100 {
        let u = crate::testutil::random_unit(&mut rng);
        let y = t.eval::<f64>(u);
        let mut off = 0;
        for l in 0..=3usize {
            let dim = 2 * l + 1;
            let n2: f64 = y[off..off + dim].iter().map(|v| v * v).sum();
            y_viol = y_viol.max((n2 - dim as f64).abs());
            off += dim;
        }
    }
    checks.push(CheckResult::new("harmonic-block-norms", y_viol, 1e-10));
    Ok(SuiteReport {
        suite: "normalization-statistics".into(),
        seed,
        precision: "f64".into(),
        checks,
    })
}

/// Message-scaling contract: dividing the neighbor sum by the average
/// neighbor count shrinks first-layer features by that factor.
pub fn check_message_norm_scaling(seed: u64) -> Result<SuiteReport> {
    use crate::graph::ElementTable;
    use crate::layer::MessageNorm;
    use crate::model::ModelSpec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = ElementTable::new(vec!["C".into()]).unwrap();
    let n_neighbors = 20;
    let mut spec_none = ModelSpec::botnet(1, 4, 1, 6.0);
    for l in spec_none.layers.iter_mut() {
        l.message_norm = MessageNorm::None;
        l.self_connection = crate::layer::SelfConnection::None;
    }
    let mut spec_avg = spec_none.clone();
    for l in spec_avg.layers.iter_mut() {
        l.message_norm = MessageNorm::AvgNeighbors;
    }
    let m_none = Model::new(spec_none, table.clone(), 42)?;
    let mut m_avg = Model::new(spec_avg, table, 42)?;
    m_avg.avg_neighbors = n_neighbors as f64;
    // central atom plus exactly n_neighbors neighbors
    let mut positions = vec![[0.0, 0.0, 0.0]];
    while positions.len() < n_neighbors + 1 {
        let p = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let r: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r < 1.0 || r > 4.5 {
            continue;
        }
        if positions.iter().all(|q| {
            (0..3)
                .map(|i| (q[i] - p[i]) * (q[i] - p[i]))
                .sum::<f64>()
                .sqrt()
                > 0.8
        }) {
            positions.push(p);
        }
    }
    let n = positions.len();
    let cfg = Configuration::new(positions, vec!["C".into(); n]);
    let opts = ForwardOptions { need_features: true };
    let f_none = forward_energy(&m_none, &cfg, opts)?.features.unwrap();
    let f_avg = forward_energy(&m_avg, &cfg, opts)?.features.unwrap();
    let norm = |vals: &[f64]| -> f64 { vals.iter().map(|v| v * v).sum::<f64>().sqrt() };
    let n_none = norm(&f_none[0][0].values);
    let n_avg = norm(&f_avg[0][0].values);
    let ratio = n_none / n_avg.max(1e-300);
    let rel_err = (ratio - n_neighbors as f64).abs() / n_neighbors as f64;
    Ok(SuiteReport {
        suite: "normalization-statistics".into(),
        seed,
        precision: "f64".into(),
        checks: vec![CheckResult::new(
            format!("message-scaling-ratio ({ratio:.2} vs {n_neighbors})"),
            rel_err,
            0.2,
        )],
    })
}

/// Maximum absolute second difference of a sampled curve.
pub fn roughness(values: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 1..values.len().saturating_sub(1) {
        worst = worst.max((values[i + 1] - 2.0 * values[i] + values[i - 1]).abs());
    }
    worst
}

/// Evaluate a bond scan at both precisions and compare roughness. The
/// float64 curve must be smooth below the tolerance; the float32 roughness
/// is reported alongside (strictly larger for any nontrivial model).
pub fn check_smoothness(model: &Model, n_points: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sym = &model.elements.symbols;
    let a = sym[0].clone();
    let b = sym[rng.gen_range(0..sym.len())].clone();
    let r0 = 0.35 * model.r_cut();
    let window = 0.2;
    let mut e64 = Vec::with_capacity(n_points);
    let mut e32 = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let r = r0 + window * (i as f64 / (n_points - 1) as f64);
        let cfg = Configuration::new(
            vec![[0.0, 0.0, 0.0], [0.0, 0.0, r]],
            vec![a.clone(), b.clone()],
        );
        let frame = compile(model, &cfg)?;
        e64.push(forward_energy_at_precision::<f64>(model, &cfg, &frame)?);
        e32.push(forward_energy_at_precision::<f32>(model, &cfg, &frame)?);
    }
    let r64 = roughness(&e64);
    let r32 = roughness(&e32);
    Ok(SuiteReport {
        suite: "smoothness".into(),
        seed,
        precision: "f64-vs-f32".into(),
        checks: vec![
            CheckResult::new("float64-roughness-ev", r64, 1e-6),
            CheckResult {
                name: format!("float32-exceeds-float64 (ratio {:.1})", r32 / r64.max(1e-300)),
                max_violation: if r32 > r64 { 0.0 } else { 1.0 },
                tolerance: 0.5,
                pass: r32 > r64,
            },
        ],
    })
}

/// Deliberately corrupt one Clebsch-Gordan coefficient of the first
/// convolution layer. Negative control: the equivariance suite must fail
/// on the returned model.
#[doc(hidden)]
pub fn corrupt_coupling_for_test(model: &Model) -> Model {
    let mut m = model.clone();
    let mut arch = (*m.arch).clone();
    for layer in arch.layers.iter_mut() {
        if let LayerMode::Conv { edge_map, .. } = &mut layer.mode {
            let mut map = (**edge_map).clone();
            // perturb a single coefficient inside an l >= 1 harmonic block;
            // rescaling the scalar (0,0)->0 channel would stay equivariant
            if let Some(e) = map.entries.iter_mut().find(|e| e.0 > 0 && e.3.abs() > 0.1) {
                e.3 += 0.25;
            }
            *edge_map = Arc::new(SparseBilinearMap { ..map });
            break;
        }
    }
    m.arch = Arc::new(arch);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ElementTable;
    use crate::model::ModelSpec;

    fn table() -> ElementTable {
        ElementTable::new(vec!["H".into(), "O".into()]).unwrap()
    }

    #[test]
    fn fresh_model_passes_equivariance() {
        let model = Model::new(ModelSpec::botnet(2, 3, 2, 4.0), table(), 1).unwrap();
        let report = check_equivariance(&model, 2, 4, 7).unwrap();
        assert!(report.passed(), "{}", report.to_delimited());
        // identity transform leaves zero violation: covered by the suite
        // comparing a geometry against itself under Q = I is trivial; the
        // random draws above already include near-identity cases
    }

    #[test]
    fn corrupted_coupling_fails_equivariance() {
        let model = Model::new(ModelSpec::botnet(2, 3, 2, 4.0), table(), 1).unwrap();
        let bad = corrupt_coupling_for_test(&model);
        let report = check_equivariance(&bad, 2, 4, 7).unwrap();
        assert!(!report.passed(), "negative control must fail");
    }

    #[test]
    fn body_order_of_linear_two_layer_model() {
        let model = Model::new(ModelSpec::botnet_linear(2, 3, 1, 5.0), table(), 3).unwrap();
        let report = check_body_order(&model, 2, 11).unwrap();
        assert!(report.passed(), "{}", report.to_delimited());
    }

    #[test]
    fn gated_model_fails_the_vanishing_test_as_expected() {
        let model = Model::new(ModelSpec::nequip(2, 3, 1, 5.0), table(), 3).unwrap();
        let report = check_body_order(&model, 2, 11).unwrap();
        assert!(report.passed(), "{}", report.to_delimited());
    }

    #[test]
    fn roughness_of_a_linear_curve_is_zero() {
        let values: Vec<f64> = (0..100).map(|i| 3.0 + 0.25 * i as f64).collect();
        assert_eq!(roughness(&values), 0.0);
    }

    #[test]
    fn report_renders_delimited_text() {
        let report = SuiteReport {
            suite: "demo".into(),
            seed: 5,
            precision: "f64".into(),
            checks: vec![CheckResult::new("anything", 1e-12, 1e-9)],
        };
        let text = report.to_delimited();
        assert!(text.contains("demo\tanything"));
        assert!(text.contains("pass"));
    }
}
