//! Energy evaluation: compile, execute, denormalize, decompose.


use crate::autodiff::{forward as run_forward, Tape};
use crate::error::Result;
use crate::graph::Configuration;
use crate::model::build::{compile, CompiledFrame};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::so3::IrrepArray;

/// Additive split of a total energy: reference part, body-ordered terms in
/// layer order, and the residual of the truncated expansion. The parts
/// reassemble to the total exactly (up to summation-order rounding).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDecomposition {
    pub e0: f64,
    pub terms: Vec<f64>,
    pub residual: f64,
}

impl EnergyDecomposition {
    pub fn total(&self) -> f64 {
        self.e0 + self.terms.iter().sum::<f64>() + self.residual
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub need_features: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Total energy in eV (denormalized).
    pub total_energy: f64,
    /// Per-atom site energies in eV, including each atom's share of the
    /// normalization shift.
    pub site_energies: Vec<f64>,
    pub decomposition: EnergyDecomposition,
    /// Per-layer, per-atom equivariant features (model-internal units).
    pub features: Option<Vec<Vec<IrrepArray>>>,
}

pub fn flatten_positions(cfg: &Configuration) -> Vec<f64> {
    cfg.positions.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Evaluate total energy, site energies and the decomposition for one
/// configuration.
pub fn forward_energy(
    model: &Model,
    cfg: &Configuration,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let frame = compile(model, cfg)?;
    forward_energy_compiled(model, cfg, &frame, opts)
}

pub fn forward_energy_compiled(
    model: &Model,
    cfg: &Configuration,
    frame: &CompiledFrame,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let mut tape = Tape::<f64>::new();
    let positions = flatten_positions(cfg);
    let params = model.params.as_scalar::<f64>();
    run_forward(&frame.program, &positions, &params, &mut tape);
    extract_output(model, cfg, frame, &tape, opts)
}

pub fn extract_output(
    model: &Model,
    cfg: &Configuration,
    frame: &CompiledFrame,
    tape: &Tape<f64>,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let n = frame.n_atoms;
    let alpha = model.norm.alpha;
    let model_total = tape.value(frame.program.output)[0];
    let shift_total = model.norm.shift_of(cfg, &model.elements)?;
    let per_atom_shift = model.norm.shift_per_atom(cfg, &model.elements)?;

    let mut site_energies = Vec::with_capacity(n);
    for i in 0..n {
        let node = frame.program.aux[&format!("site.{i}")];
        site_energies.push(alpha * tape.value(node)[0] + per_atom_shift[i]);
    }
    let mut terms = Vec::new();
    let mut ti = 0;
    while let Some(&node) = frame.program.aux.get(&format!("term.{ti}")) {
        terms.push(alpha * tape.value(node)[0]);
        ti += 1;
    }
    let residual = frame
        .program
        .aux
        .get("residual")
        .map(|&node| alpha * tape.value(node)[0])
        .unwrap_or(0.0);
    let decomposition = EnergyDecomposition { e0: shift_total, terms, residual };

    let features = if opts.need_features {
        let mut layers = Vec::new();
        for (t, larch) in model.arch.layers.iter().enumerate() {
            let mut per_atom = Vec::with_capacity(n);
            let mut any = false;
            for i in 0..n {
                if let Some(&node) = frame.program.aux.get(&format!("h{t}.{i}")) {
                    any = true;
                    per_atom.push(IrrepArray {
                        layout: larch.out_layout.clone(),
                        values: tape.value(node).to_vec(),
                    });
                }
            }
            if any {
                layers.push(per_atom);
            }
        }
        Some(layers)
    } else {
        None
    };

    Ok(ForwardOutput {
        total_energy: alpha * model_total + shift_total,
        site_energies,
        decomposition,
        features,
    })
}

/// Total energy evaluated at reduced (or full) precision; the affine
/// denormalization is applied in f64 either way.
pub fn forward_energy_at_precision<S: Scalar>(
    model: &Model,
    cfg: &Configuration,
    frame: &CompiledFrame,
) -> Result<f64> {
    let mut tape = Tape::<S>::new();
    let positions: Vec<S> = flatten_positions(cfg).iter().map(|v| S::from_f64(*v)).collect();
    let params = model.params.as_scalar::<S>();
    run_forward(&frame.program, &positions, &params, &mut tape);
    let model_total = tape.value(frame.program.output)[0].value();
    model.norm.denormalize_energy(model_total, cfg, &model.elements)
}
