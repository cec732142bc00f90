//! Closed-form ridge fit of the single-layer linear expansion.
//!
//! The design matrix couples energy rows (per-element aggregated basis
//! values) with force rows obtained from reverse sweeps through each basis
//! column, solved jointly by a singular-value-filtered ridge least squares.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{backward, forward, Tape};
use crate::error::{MaceError, Result};
use crate::graph::{Configuration, ElementTable};
use crate::model::build::compile;
use crate::model::forward::flatten_positions;
use crate::model::{apply_normalization, Model, ModelSpec, NormScheme, Preset};

#[derive(Debug, Clone)]
pub struct FitReport {
    pub n_rows: usize,
    pub n_columns: usize,
    pub ridge: f64,
    /// training residuals in eV / eV per A
    pub energy_rmse: f64,
    pub force_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub ridge: f64,
    pub include_forces: bool,
    /// relative weight of force rows against energy rows
    pub force_row_weight: f64,
    pub normalization: Option<NormScheme>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: 1e-8,
            include_forces: true,
            force_row_weight: 1.0,
            normalization: Some(NormScheme::E0),
            seed: 0,
        }
    }
}

/// Fit the linear expansion's coefficients to energies (and forces when
/// labeled) by regularized least squares.
pub fn fit_linear_ace(
    frames: &[Configuration],
    spec: ModelSpec,
    elements: ElementTable,
    opts: &FitOptions,
) -> Result<(Model, FitReport)> {
    if spec.preset != Preset::LinearAce {
        return Err(MaceError::config("closed-form fitting applies to the linear preset"));
    }
    if frames.is_empty() {
        return Err(MaceError::data("empty training set"));
    }
    let mut model = Model::new(spec, elements, opts.seed)?;

    // label transform
    let (train_frames, norm) = match opts.normalization {
        Some(scheme) => {
            let (f, n) = apply_normalization(frames, scheme, &model.elements, model.r_cut())?;
            (f, n)
        }
        None => (frames.to_vec(), crate::model::NormalizationState::identity()),
    };
    model.norm = norm;

    let n_elem = model.elements.len();
    let n_basis = model.arch.linear_basis_size().expect("linear preset");
    let n_cols = n_elem * n_basis;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut n_energy_rows = 0usize;
    let mut n_force_rows = 0usize;

    let params = model.params.as_scalar::<f64>();
    for cfg in &train_frames {
        let frame = compile(&model, cfg)?;
        let positions = flatten_positions(cfg);
        let mut tape = Tape::<f64>::new();
        forward(&frame.program, &positions, &params, &mut tape);

        if let Some(e) = cfg.energy {
            let mut row = vec![0.0; n_cols];
            for z in 0..n_elem {
                let node = frame.program.aux[&format!("basis_sum.{z}")];
                let vals = tape.value(node);
                row[z * n_basis..(z + 1) * n_basis].copy_from_slice(vals);
            }
            rows.push(row);
            rhs.push(e);
            n_energy_rows += 1;
        }

        if opts.include_forces {
            if let Some(forces) = &cfg.forces {
                // d(basis column)/d(positions) by one reverse sweep per column
                let w = opts.force_row_weight.sqrt();
                let pos_node = frame.program.position_node.unwrap();
                let n_coords = 3 * cfg.len();
                let mut force_rows = vec![vec![0.0; n_cols]; n_coords];
                for z in 0..n_elem {
                    let node = frame.program.aux[&format!("basis_sum.{z}")];
                    for c in 0..n_basis {
                        let mut seed = vec![0.0; n_basis];
                        seed[c] = 1.0;
                        backward(&frame.program, &mut tape, node, &seed);
                        let adj = tape.adjoint(pos_node);
                        let col = z * n_basis + c;
                        for (x, row) in adj.iter().zip(force_rows.iter_mut()) {
                            // F = -dE/dr
                            row[col] = -w * x;
                        }
                    }
                }
                for (i, row) in force_rows.into_iter().enumerate() {
                    rows.push(row);
                    rhs.push(w * forces[i / 3][i % 3]);
                    n_force_rows += 1;
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(MaceError::data("no labeled rows to fit"));
    }

    let a = DMatrix::from_fn(rows.len(), n_cols, |r, c| rows[r][c]);
    let b = DVector::from_vec(rhs);
    let coeffs = ridge_solve(&a, &b, opts.ridge)?;

    {
        let blk = model
            .params
            .block_mut("ace.coeffs")
            .expect("linear preset has a coefficient block");
        blk.values.copy_from_slice(coeffs.as_slice());
    }

    // training residuals, reported in physical units
    let resid = &a * &coeffs - &b;
    let mut e_sq = 0.0;
    let mut f_sq = 0.0;
    for (i, r) in resid.iter().enumerate() {
        if i < n_energy_rows {
            e_sq += r * r;
        } else {
            f_sq += r * r;
        }
    }
    let w2 = opts.force_row_weight;
    let report = FitReport {
        n_rows: rows.len(),
        n_columns: n_cols,
        ridge: opts.ridge,
        energy_rmse: if n_energy_rows > 0 {
            (e_sq / n_energy_rows as f64).sqrt() * model.norm.alpha
        } else {
            0.0
        },
        force_rmse: if n_force_rows > 0 {
            (f_sq / w2 / n_force_rows as f64).sqrt() * model.norm.alpha
        } else {
            0.0
        },
    };
    Ok((model, report))
}

/// Minimize `|A x - b|^2 + ridge |x|^2` through the SVD filter
/// `x = V diag(s / (s^2 + ridge)) U^T b`.
pub fn ridge_solve(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if ridge < 0.0 {
        return Err(MaceError::config("ridge must be nonnegative"));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| MaceError::solver("SVD failed to produce U"))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| MaceError::solver("SVD failed to produce V"))?;
    let s = &svd.singular_values;
    if ridge == 0.0 {
        let tol = 1e-12 * s.max();
        if s.iter().any(|x| *x <= tol) {
            return Err(MaceError::solver(
                "rank-deficient least-squares system without regularization",
            ));
        }
    }
    let utb = u.transpose() * b;
    let mut filtered = DVector::zeros(s.len());
    for i in 0..s.len() {
        let si = s[i];
        filtered[i] = si / (si * si + ridge) * utb[i];
    }
    Ok(v_t.transpose() * filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_energy;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(rng: &mut ChaCha8Rng, n_frames: usize, n_atoms: usize) -> Vec<Configuration> {
        (0..n_frames)
            .map(|_| {
                let mut positions: Vec<[f64; 3]> = Vec::new();
                while positions.len() < n_atoms {
                    let p = [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ];
                    if positions.iter().all(|q: &[f64; 3]| {
                        (0..3)
                            .map(|i| (q[i] - p[i]) * (q[i] - p[i]))
                            .sum::<f64>()
                            .sqrt()
                            > 0.85
                    }) {
                        positions.push(p);
                    }
                }
                let elements =
                    (0..n_atoms).map(|i| if i % 2 == 0 { "H".into() } else { "O".into() }).collect();
                Configuration::new(positions, elements)
            })
            .collect()
    }

    #[test]
    fn recovers_a_random_linear_model_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let table = ElementTable::new(vec!["H".into(), "O".into()]).unwrap();
        let spec = ModelSpec::linear_ace(2, 3, 2, 4.0, 6);
        // generating model with random coefficients
        let mut truth = Model::new(spec.clone(), table.clone(), 1).unwrap();
        {
            let blk = truth.params.block_mut("ace.coeffs").unwrap();
            for v in blk.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut frames = random_frames(&mut rng, 36, 3);
        for f in frames.iter_mut() {
            let out = forward_energy(&truth, f, Default::default()).unwrap();
            f.energy = Some(out.total_energy);
            f.forces = Some(crate::autodiff::forces(&truth, f).unwrap());
        }
        let opts = FitOptions { ridge: 1e-12, normalization: None, ..Default::default() };
        let (fit, report) = fit_linear_ace(&frames, spec, table, &opts).unwrap();
        assert!(report.energy_rmse < 1e-8, "energy residual {}", report.energy_rmse);
        assert!(report.force_rmse < 1e-7, "force residual {}", report.force_rmse);
        // and on held-out geometry
        let test = &random_frames(&mut rng, 4, 3)[0];
        let e_truth = forward_energy(&truth, test, Default::default()).unwrap().total_energy;
        let e_fit = forward_energy(&fit, test, Default::default()).unwrap().total_energy;
        assert_abs_diff_eq!(e_truth, e_fit, epsilon = 1e-7);
    }

    #[test]
    fn constant_energy_dataset_yields_constant_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = ElementTable::new(vec!["H".into(), "O".into()]).unwrap();
        let spec = ModelSpec::linear_ace(2, 3, 1, 4.0, 5);
        let mut frames = random_frames(&mut rng, 12, 4);
        for f in frames.iter_mut() {
            f.energy = Some(-3.5);
        }
        let opts = FitOptions {
            ridge: 1e-10,
            include_forces: false,
            normalization: Some(NormScheme::SshForcesRms),
            ..Default::default()
        };
        let (fit, _) = fit_linear_ace(&frames, spec, table, &opts).unwrap();
        for f in &frames {
            let e = forward_energy(&fit, f, Default::default()).unwrap().total_energy;
            assert_abs_diff_eq!(e, -3.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn duplicated_frames_leave_the_solution_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = ElementTable::new(vec!["H".into(), "O".into()]).unwrap();
        let spec = ModelSpec::linear_ace(2, 2, 1, 4.0, 5);
        let mut frames = random_frames(&mut rng, 10, 3);
        for (i, f) in frames.iter_mut().enumerate() {
            f.energy = Some(-1.0 - 0.1 * i as f64);
        }
        let opts = FitOptions {
            ridge: 1e-10,
            include_forces: false,
            normalization: None,
            ..Default::default()
        };
        let (fit1, _) = fit_linear_ace(&frames, spec.clone(), table.clone(), &opts).unwrap();
        let mut doubled = frames.clone();
        doubled.extend(frames.iter().cloned());
        // consistent duplication doubles the quadratic data term, so the
        // ridge scales along with it
        let opts2 = FitOptions { ridge: 2.0 * opts.ridge, ..opts.clone() };
        let (fit2, _) = fit_linear_ace(&doubled, spec, table, &opts2).unwrap();
        let c1 = &fit1.params.block("ace.coeffs").unwrap().values;
        let c2 = &fit2.params.block("ace.coeffs").unwrap().values;
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn rank_deficiency_without_ridge_is_a_solver_error() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(ridge_solve(&a, &b, 0.0).is_err());
        assert!(ridge_solve(&a, &b, 1e-10).is_ok());
    }
}
