//! Structural properties of assembled models: symmetry, locality,
//! decomposition consistency, permutation determinism.

use approx::assert_abs_diff_eq;
use multiace::graph::{Configuration, ElementTable};
use multiace::model::{
    forward_energy, Model, ModelSpec, NormScheme, NormalizationState, Shift,
};
use multiace::so3::wigner_d_o3;
use multiace::testutil::random_rotation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_molecule(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Configuration {
    let symbols = ["H", "C", "O"];
    let mut positions: Vec<[f64; 3]> = Vec::new();
    while positions.len() < n {
        let p = [
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
        ];
        let ok = positions.iter().all(|q| {
            let d2: f64 = (0..3).map(|i| (q[i] - p[i]) * (q[i] - p[i])).sum();
            d2.sqrt() > 0.75
        });
        if ok {
            positions.push(p);
        }
    }
    let elements = (0..n).map(|i| symbols[i % 3].to_string()).collect();
    Configuration::new(positions, elements)
}

fn transform(cfg: &Configuration, q: &[[f64; 3]; 3], t: &[f64; 3]) -> Configuration {
    let positions = cfg
        .positions
        .iter()
        .map(|p| {
            let mut o = [0.0; 3];
            for r in 0..3 {
                o[r] = q[r][0] * p[0] + q[r][1] * p[1] + q[r][2] * p[2] + t[r];
            }
            o
        })
        .collect();
    Configuration::new(positions, cfg.elements.clone())
}

fn table() -> ElementTable {
    ElementTable::new(vec!["C".into(), "H".into(), "O".into()]).unwrap()
}

fn presets() -> Vec<(&'static str, Model)> {
    let t = table();
    vec![
        ("botnet", Model::new(ModelSpec::botnet(2, 4, 2, 4.0), t.clone(), 3).unwrap()),
        (
            "botnet-linear",
            Model::new(ModelSpec::botnet_linear(2, 4, 2, 4.0), t.clone(), 4).unwrap(),
        ),
        ("nequip", Model::new(ModelSpec::nequip(2, 4, 2, 4.0), t.clone(), 5).unwrap()),
        (
            "linear-ace",
            {
                let mut m =
                    Model::new(ModelSpec::linear_ace(2, 3, 2, 4.0, 7), t.clone(), 6).unwrap();
                // random coefficients so the energy is nontrivial
                let mut rng = ChaCha8Rng::seed_from_u64(8);
                let blk = m.params.block_mut("ace.coeffs").unwrap();
                for v in blk.values.iter_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
                m
            },
        ),
    ]
}

#[test]
fn total_energy_is_e3_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for (name, model) in presets() {
        for trial in 0..6 {
            let cfg = random_molecule(&mut rng, 5, 2.2);
            let e0 = forward_energy(&model, &cfg, Default::default()).unwrap().total_energy;
            let q = random_rotation(&mut rng, trial % 2 == 1);
            let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let moved = transform(&cfg, &q, &t);
            let e1 = forward_energy(&model, &moved, Default::default()).unwrap().total_energy;
            assert_abs_diff_eq!(e0, e1, epsilon = 1e-9);
            let _ = name;
        }
    }
}

#[test]
fn features_transform_per_irrep_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let opts = multiace::model::ForwardOptions { need_features: true };
    for (name, model) in presets() {
        if name == "linear-ace" {
            continue; // invariant basis only, no equivariant features
        }
        let cfg = random_molecule(&mut rng, 5, 2.0);
        let out = forward_energy(&model, &cfg, opts).unwrap();
        let feats = out.features.unwrap();
        for trial in 0..3 {
            let q = random_rotation(&mut rng, trial == 1);
            let moved = transform(&cfg, &q, &[0.0; 3]);
            let out_rot = forward_energy(&model, &moved, opts).unwrap();
            let feats_rot = out_rot.features.unwrap();
            for (layer, layer_rot) in feats.iter().zip(&feats_rot) {
                for (h, h_rot) in layer.iter().zip(layer_rot) {
                    let expected = h.wigner_transformed(&q).unwrap();
                    for (a, b) in expected.values.iter().zip(&h_rot.values) {
                        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
                    }
                }
            }
        }
        let _ = wigner_d_o3(1, &random_rotation(&mut rng, false)).unwrap();
    }
}

#[test]
fn permutation_relabeling_is_bitwise_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let opts = multiace::model::ForwardOptions { need_features: true };
    for (_name, model) in presets() {
        for _ in 0..4 {
            let cfg = random_molecule(&mut rng, 6, 2.2);
            let out = forward_energy(&model, &cfg, opts).unwrap();
            // random permutation
            let mut perm: Vec<usize> = (0..cfg.len()).collect();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted = Configuration::new(
                perm.iter().map(|&i| cfg.positions[i]).collect(),
                perm.iter().map(|&i| cfg.elements[i].clone()).collect(),
            );
            let out_p = forward_energy(&model, &permuted, opts).unwrap();
            assert_eq!(out.total_energy, out_p.total_energy, "total must be bitwise equal");
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                assert_eq!(
                    out.site_energies[old_idx], out_p.site_energies[new_idx],
                    "site energies must relabel bitwise"
                );
            }
            if let (Some(f), Some(fp)) = (&out.features, &out_p.features) {
                for (layer, layer_p) in f.iter().zip(fp) {
                    for (new_idx, &old_idx) in perm.iter().enumerate() {
                        assert_eq!(layer[old_idx].values, layer_p[new_idx].values);
                    }
                }
            }
        }
    }
}

#[test]
fn isolated_atom_energy_is_exactly_e0_for_body_ordered_preset() {
    let t = table();
    let mut model = Model::new(ModelSpec::botnet(3, 4, 2, 4.0), t, 9).unwrap();
    let e0 = vec![-7.5, -13.25, -75.0];
    model.norm = NormalizationState {
        scheme: Some(NormScheme::E0),
        alpha: 2.3,
        shift: Shift::PerElement { e0: e0.clone(), estimated: false },
    };
    for (i, sym) in ["C", "H", "O"].iter().enumerate() {
        let cfg = Configuration::new(vec![[0.0; 3]], vec![sym.to_string()]);
        let out = forward_energy(&model, &cfg, Default::default()).unwrap();
        assert_eq!(out.total_energy, e0[i], "isolated atom must hit E0 exactly");
        assert_eq!(out.decomposition.e0, e0[i]);
        assert!(out.decomposition.terms.iter().all(|t| *t == 0.0));
        assert_eq!(out.decomposition.residual, 0.0);
    }
}

#[test]
fn far_separated_fragments_are_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (_name, model) in presets() {
        let a = random_molecule(&mut rng, 4, 1.8);
        let mut b = random_molecule(&mut rng, 3, 1.6);
        let gap = model.receptive_field() + 2.0;
        for p in b.positions.iter_mut() {
            p[0] += gap + 4.0;
        }
        let ea = forward_energy(&model, &a, Default::default()).unwrap().total_energy;
        let eb = forward_energy(&model, &b, Default::default()).unwrap().total_energy;
        let mut joint_pos = a.positions.clone();
        joint_pos.extend_from_slice(&b.positions);
        let mut joint_elems = a.elements.clone();
        joint_elems.extend_from_slice(&b.elements);
        let joint = Configuration::new(joint_pos, joint_elems);
        let e_joint = forward_energy(&model, &joint, Default::default()).unwrap().total_energy;
        assert_abs_diff_eq!(e_joint, ea + eb, epsilon = 1e-10);
    }
}

#[test]
fn decomposition_reassembles_to_the_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for (_name, model) in presets() {
        let cfg = random_molecule(&mut rng, 5, 2.0);
        let out = forward_energy(&model, &cfg, Default::default()).unwrap();
        assert_abs_diff_eq!(out.decomposition.total(), out.total_energy, epsilon = 1e-12);
        let site_sum: f64 = out.site_energies.iter().sum();
        assert_abs_diff_eq!(site_sum, out.total_energy, epsilon = 1e-10);
    }
}

#[test]
fn two_identical_distant_molecules_double_the_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = &presets()[0].1;
    let a = random_molecule(&mut rng, 4, 1.8);
    let mut shifted = a.clone();
    let gap = model.receptive_field() + 3.0;
    for p in shifted.positions.iter_mut() {
        p[2] += gap;
    }
    let mut joint_pos = a.positions.clone();
    joint_pos.extend_from_slice(&shifted.positions);
    let mut joint_elems = a.elements.clone();
    joint_elems.extend_from_slice(&shifted.elements);
    let joint = Configuration::new(joint_pos, joint_elems);
    let ea = forward_energy(model, &a, Default::default()).unwrap().total_energy;
    let e2 = forward_energy(model, &joint, Default::default()).unwrap().total_energy;
    assert_abs_diff_eq!(e2, 2.0 * ea, epsilon = 1e-10);
}
