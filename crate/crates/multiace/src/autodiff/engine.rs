//! Forces and gradients of models: reverse sweeps over compiled frames.

use crate::autodiff::{backward, forward, Tape};
use crate::error::Result;
use crate::graph::Configuration;
use crate::model::build::{compile, CompiledFrame};
use crate::model::forward::flatten_positions;
use crate::model::Model;
use crate::scalar::Dual;

/// Forces in eV/A: `F = -dE/dr` by a reverse sweep from the total energy.
pub fn forces(model: &Model, cfg: &Configuration) -> Result<Vec<[f64; 3]>> {
    let frame = compile(model, cfg)?;
    let (_, f) = energy_and_forces_compiled(model, cfg, &frame)?;
    Ok(f)
}

/// Total energy (eV) and forces (eV/A) for a pre-compiled frame.
pub fn energy_and_forces_compiled(
    model: &Model,
    cfg: &Configuration,
    frame: &CompiledFrame,
) -> Result<(f64, Vec<[f64; 3]>)> {
    let positions = flatten_positions(cfg);
    let params = model.params.as_scalar::<f64>();
    let mut tape = Tape::<f64>::new();
    forward(&frame.program, &positions, &params, &mut tape);
    backward(&frame.program, &mut tape, frame.program.output, &[1.0]);
    let model_total = tape.value(frame.program.output)[0];
    let total = model.norm.denormalize_energy(model_total, cfg, &model.elements)?;
    let f = collect_forces(model, frame, &tape);
    Ok((total, f))
}

fn collect_forces(model: &Model, frame: &CompiledFrame, tape: &Tape<f64>) -> Vec<[f64; 3]> {
    let pos_node = frame.program.position_node.expect("programs carry a positions leaf");
    let adj = tape.adjoint(pos_node);
    let alpha = model.norm.alpha;
    (0..frame.n_atoms)
        .map(|i| {
            [
                -alpha * adj[3 * i],
                -alpha * adj[3 * i + 1],
                -alpha * adj[3 * i + 2],
            ]
        })
        .collect()
}

/// One frame's contribution to training gradients, model-internal units.
///
/// * `energy`: model-internal total energy;
/// * `dedr`: model-internal `dE/dr` (flattened);
/// * `de_dp`: `dE/dparam` per block;
/// * `hvp`: tangent part of the parameter adjoints when the positions carry
///   the forward tangent `g`, i.e. `d/dparam (g . dE/dr)` - the exact
///   second-order term of a force-matching loss.
pub struct FrameGradients {
    pub energy: f64,
    pub dedr: Vec<f64>,
    pub de_dp: Vec<Vec<f64>>,
    pub hvp: Option<Vec<Vec<f64>>>,
}

/// Plain first-order pass: energy, position gradient, parameter gradient.
pub fn frame_gradients(
    model: &Model,
    frame: &CompiledFrame,
    positions: &[f64],
) -> FrameGradients {
    let params = model.params.as_scalar::<f64>();
    let mut tape = Tape::<f64>::new();
    frame_gradients_cached(model, frame, positions, &params, &mut tape)
}

/// Same as [`frame_gradients`] with caller-owned tape and converted
/// parameters, for reuse across a training run.
pub fn frame_gradients_cached(
    model: &Model,
    frame: &CompiledFrame,
    positions: &[f64],
    params: &[Vec<f64>],
    tape: &mut Tape<f64>,
) -> FrameGradients {
    forward(&frame.program, positions, params, tape);
    backward(&frame.program, tape, frame.program.output, &[1.0]);
    let energy = tape.value(frame.program.output)[0];
    let pos_node = frame.program.position_node.unwrap();
    let dedr = tape.adjoint(pos_node).to_vec();
    let de_dp = frame
        .program
        .param_nodes
        .iter()
        .map(|n| n.map(|id| tape.adjoint(id).to_vec()).unwrap_or_default())
        .collect();
    let _ = model;
    FrameGradients { energy, dedr, de_dp, hvp: None }
}

/// Dual pass with a forward tangent `g` on the positions: the value parts
/// reproduce the plain pass, the tangent parts of the parameter adjoints
/// are `d/dparam (g . dE/dr)`.
pub fn frame_gradients_with_tangent(
    model: &Model,
    frame: &CompiledFrame,
    positions: &[f64],
    tangent: &[f64],
) -> FrameGradients {
    let params = model.params.as_scalar::<Dual>();
    let mut tape = Tape::<Dual>::new();
    frame_gradients_with_tangent_cached(model, frame, positions, tangent, &params, &mut tape)
}

/// Same as [`frame_gradients_with_tangent`] with caller-owned state.
pub fn frame_gradients_with_tangent_cached(
    model: &Model,
    frame: &CompiledFrame,
    positions: &[f64],
    tangent: &[f64],
    params: &[Vec<Dual>],
    tape: &mut Tape<Dual>,
) -> FrameGradients {
    debug_assert_eq!(positions.len(), tangent.len());
    let pos: Vec<Dual> = positions
        .iter()
        .zip(tangent)
        .map(|(v, t)| Dual::new(*v, *t))
        .collect();
    forward(&frame.program, &pos, params, tape);
    backward(&frame.program, tape, frame.program.output, &[Dual::constant(1.0)]);
    let energy = tape.value(frame.program.output)[0].re;
    let pos_node = frame.program.position_node.unwrap();
    let dedr = tape.adjoint(pos_node).iter().map(|d| d.re).collect();
    let mut de_dp = Vec::with_capacity(frame.program.param_nodes.len());
    let mut hvp = Vec::with_capacity(frame.program.param_nodes.len());
    for n in &frame.program.param_nodes {
        match n {
            Some(id) => {
                let adj = tape.adjoint(*id);
                de_dp.push(adj.iter().map(|d| d.re).collect());
                hvp.push(adj.iter().map(|d| d.dx).collect());
            }
            None => {
                de_dp.push(Vec::new());
                hvp.push(Vec::new());
            }
        }
    }
    let _ = model;
    FrameGradients { energy, dedr, de_dp, hvp: Some(hvp) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Configuration, ElementTable};
    use crate::model::{Model, ModelSpec};
    use approx::assert_abs_diff_eq;

    fn water_like() -> Configuration {
        Configuration::new(
            vec![[0.0, 0.0, 0.0], [0.76, 0.59, 0.0], [-0.76, 0.59, 0.0]],
            vec!["O".into(), "H".into(), "H".into()],
        )
    }

    fn small_model() -> Model {
        let table = ElementTable::new(vec!["H".into(), "O".into()]).unwrap();
        Model::new(ModelSpec::botnet(2, 3, 2, 4.0), table, 5).unwrap()
    }

    #[test]
    fn isolated_atom_has_zero_force() {
        let model = small_model();
        let cfg = Configuration::new(vec![[0.0; 3]], vec!["O".into()]);
        let f = forces(&model, &cfg).unwrap();
        assert_eq!(f, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn forces_match_finite_differences() {
        let model = small_model();
        let cfg = water_like();
        let f = forces(&model, &cfg).unwrap();
        let h = 1e-5;
        for atom in 0..cfg.len() {
            for d in 0..3 {
                let mut up = cfg.clone();
                let mut dn = cfg.clone();
                up.positions[atom][d] += h;
                dn.positions[atom][d] -= h;
                let e_up = crate::model::forward_energy(&model, &up, Default::default())
                    .unwrap()
                    .total_energy;
                let e_dn = crate::model::forward_energy(&model, &dn, Default::default())
                    .unwrap()
                    .total_energy;
                let fd = -(e_up - e_dn) / (2.0 * h);
                assert_abs_diff_eq!(f[atom][d], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn newton_third_law_and_zero_torque() {
        let model = small_model();
        let cfg = water_like();
        let f = forces(&model, &cfg).unwrap();
        for d in 0..3 {
            let sum: f64 = f.iter().map(|v| v[d]).sum();
            assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
        }
        let mut torque = [0.0; 3];
        for (p, fi) in cfg.positions.iter().zip(&f) {
            torque[0] += p[1] * fi[2] - p[2] * fi[1];
            torque[1] += p[2] * fi[0] - p[0] * fi[2];
            torque[2] += p[0] * fi[1] - p[1] * fi[0];
        }
        for t in torque {
            assert_abs_diff_eq!(t, 0.0, epsilon = 1e-10);
        }
    }
}
