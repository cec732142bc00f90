//! Data normalization: scale-shift standardization and the physical
//! per-element reference-energy transform with the correct dissociation
//! limit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MaceError, Result};
use crate::graph::{dataset_statistics, Configuration, ElementTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScheme {
    /// Standardize energies to zero mean; scale is the force RMS.
    SshForcesRms,
    /// Standardize energies to zero mean; scale is the energy standard
    /// deviation.
    SshEnergyStd,
    /// Subtract per-element isolated-atom energies.
    E0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shift {
    MeanEnergy(f64),
    PerElement {
        e0: Vec<f64>,
        /// whether the values were regressed from the dataset rather than
        /// provided
        estimated: bool,
    },
}

/// Affine map between model-internal energies and eV:
/// `E_out = alpha * E_model + shift(configuration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub scheme: Option<NormScheme>,
    pub alpha: f64,
    pub shift: Shift,
}

impl NormalizationState {
    pub fn identity() -> NormalizationState {
        NormalizationState { scheme: None, alpha: 1.0, shift: Shift::MeanEnergy(0.0) }
    }

    /// Additive shift of one configuration in eV.
    pub fn shift_of(&self, cfg: &Configuration, elements: &ElementTable) -> Result<f64> {
        match &self.shift {
            Shift::MeanEnergy(m) => Ok(*m),
            Shift::PerElement { e0, .. } => {
                let mut s = 0.0;
                for sym in &cfg.elements {
                    s += e0[elements.index_of(sym)?];
                }
                Ok(s)
            }
        }
    }

    /// Per-atom share of the shift, aligned with site energies.
    pub fn shift_per_atom(&self, cfg: &Configuration, elements: &ElementTable) -> Result<Vec<f64>> {
        match &self.shift {
            Shift::MeanEnergy(m) => Ok(vec![m / cfg.len() as f64; cfg.len()]),
            Shift::PerElement { e0, .. } => cfg
                .elements
                .iter()
                .map(|sym| elements.index_of(sym).map(|i| e0[i]))
                .collect(),
        }
    }

    pub fn denormalize_energy(&self, model_energy: f64, cfg: &Configuration, elements: &ElementTable) -> Result<f64> {
        Ok(self.alpha * model_energy + self.shift_of(cfg, elements)?)
    }

    /// Map a reference energy into model-internal units.
    pub fn normalize_energy(&self, energy: f64, cfg: &Configuration, elements: &ElementTable) -> Result<f64> {
        Ok((energy - self.shift_of(cfg, elements)?) / self.alpha)
    }
}

/// Least-squares estimate of per-element reference energies from total
/// energies and composition counts.
pub fn estimate_e0(frames: &[Configuration], elements: &ElementTable) -> Result<Vec<f64>> {
    let labeled: Vec<&Configuration> = frames.iter().filter(|f| f.energy.is_some()).collect();
    if labeled.is_empty() {
        return Err(MaceError::data("no labeled frames to estimate reference energies from"));
    }
    let n_elem = elements.len();
    let a = DMatrix::from_fn(labeled.len(), n_elem, |r, c| {
        let sym = &elements.symbols[c];
        labeled[r].elements.iter().filter(|e| *e == sym).count() as f64
    });
    let b = nalgebra::DVector::from_fn(labeled.len(), |r, _| labeled[r].energy.unwrap());
    let svd = a.svd(true, true);
    let rank = svd.rank(1e-9);
    if rank < n_elem {
        return Err(MaceError::data(
            "reference energies are not identifiable from the dataset compositions \
             (rank-deficient least-squares system); provide them explicitly",
        ));
    }
    let sol = svd
        .solve(&b, 1e-12)
        .map_err(|e| MaceError::solver(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

/// Transform labels per the scheme and return the transformed frames with
/// the inverse transform.
pub fn apply_normalization(
    frames: &[Configuration],
    scheme: NormScheme,
    elements: &ElementTable,
    r_cut: f64,
) -> Result<(Vec<Configuration>, NormalizationState)> {
    let stats = dataset_statistics(frames, r_cut)?;
    let alpha = match scheme {
        NormScheme::SshForcesRms | NormScheme::E0 => match stats.force_rms {
            Some(v) if v > 0.0 => v,
            _ => 1.0,
        },
        NormScheme::SshEnergyStd => match stats.energy_std {
            Some(v) if v > 0.0 => v,
            _ => {
                return Err(MaceError::data(
                    "energy standard deviation unavailable or zero; cannot scale-shift",
                ))
            }
        },
    };
    let shift = match scheme {
        NormScheme::SshForcesRms | NormScheme::SshEnergyStd => {
            let mean = stats.mean_energy.ok_or_else(|| {
                MaceError::data("scale shifting needs labeled energies")
            })?;
            Shift::MeanEnergy(mean)
        }
        NormScheme::E0 => match &elements.e0 {
            Some(e0) => Shift::PerElement { e0: e0.clone(), estimated: false },
            None => {
                let e0 = estimate_e0(frames, elements)?;
                Shift::PerElement { e0, estimated: true }
            }
        },
    };
    let state = NormalizationState { scheme: Some(scheme), alpha, shift };
    let transformed = frames
        .iter()
        .map(|f| {
            let mut g = f.clone();
            if let Some(e) = f.energy {
                g.energy = Some(state.normalize_energy(e, f, elements)?);
            }
            if let Some(forces) = &f.forces {
                g.forces = Some(
                    forces
                        .iter()
                        .map(|row| {
                            [row[0] / state.alpha, row[1] / state.alpha, row[2] / state.alpha]
                        })
                        .collect(),
                );
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((transformed, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn frames() -> (Vec<Configuration>, ElementTable) {
        let mk = |d: f64, e: f64, elems: Vec<&str>| {
            let n = elems.len();
            let mut c = Configuration::new(
                (0..n).map(|i| [0.0, 0.0, d * i as f64]).collect(),
                elems.into_iter().map(String::from).collect(),
            );
            c.energy = Some(e);
            c.forces = Some(vec![[0.3, -0.2, 0.1]; n]);
            c
        };
        let frames = vec![
            mk(1.0, -10.0, vec!["H", "H"]),
            mk(1.2, -12.5, vec!["H", "O"]),
            mk(1.4, -20.0, vec!["O", "H", "H"]),
        ];
        let table = ElementTable::new(vec!["H".into(), "O".into()]).unwrap();
        (frames, table)
    }

    #[test]
    fn ssh_zero_mean_and_unit_force_rms() {
        let (frames, table) = frames();
        let (out, state) = apply_normalization(&frames, NormScheme::SshForcesRms, &table, 5.0).unwrap();
        let mean: f64 =
            out.iter().map(|f| f.energy.unwrap()).sum::<f64>() / out.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        let mut sq = 0.0;
        let mut count = 0;
        for f in &out {
            for row in f.forces.as_ref().unwrap() {
                for v in row {
                    sq += v * v;
                    count += 1;
                }
            }
        }
        assert_abs_diff_eq!((sq / count as f64).sqrt(), 1.0, epsilon = 1e-12);
        // round trip through the inverse transform
        for (orig, norm) in frames.iter().zip(&out) {
            let back = state
                .denormalize_energy(norm.energy.unwrap(), orig, &table)
                .unwrap();
            assert_abs_diff_eq!(back, orig.energy.unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn e0_estimation_and_isolated_atoms() {
        let (frames, table) = frames();
        // energies above were arbitrary; build exactly representable ones
        let e0_h = -2.0;
        let e0_o = -5.0;
        let mut exact = frames.clone();
        for f in exact.iter_mut() {
            let e: f64 = f
                .elements
                .iter()
                .map(|s| if s == "H" { e0_h } else { e0_o })
                .sum();
            f.energy = Some(e);
        }
        let (out, state) = apply_normalization(&exact, NormScheme::E0, &table, 5.0).unwrap();
        match &state.shift {
            Shift::PerElement { e0, estimated } => {
                assert!(*estimated);
                assert_abs_diff_eq!(e0[0], e0_h, epsilon = 1e-9);
                assert_abs_diff_eq!(e0[1], e0_o, epsilon = 1e-9);
            }
            _ => panic!("expected per-element shift"),
        }
        for f in &out {
            assert_abs_diff_eq!(f.energy.unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn e0_unestimable_composition_is_an_error() {
        // every frame has the same H:O ratio -> rank deficient
        let mut f1 = Configuration::new(
            vec![[0.0; 3], [0.0, 0.0, 1.0]],
            vec!["H".into(), "O".into()],
        );
        f1.energy = Some(-3.0);
        let mut f2 = Configuration::new(
            vec![[0.0; 3], [0.0, 0.0, 1.1]],
            vec!["H".into(), "O".into()],
        );
        f2.energy = Some(-3.1);
        let table = ElementTable::new(vec!["H".into(), "O".into()]).unwrap();
        assert!(apply_normalization(&[f1, f2], NormScheme::E0, &table, 5.0).is_err());
    }
}
