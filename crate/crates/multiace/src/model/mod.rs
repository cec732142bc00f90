//! Full potentials assembled from embedding, interaction layers and
//! readouts, with data normalization and a body-ordered energy
//! decomposition.

pub mod archive;
pub mod build;
pub mod forward;
pub mod normalize;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::act::Act;
use crate::autodiff::{PathShape, SparseBilinearMap};
use crate::error::{MaceError, Result};
use crate::graph::ElementTable;
use crate::layer::{
    conv_path_shape, conv_paths, discrete_species, BasisPlan, ConvPath, CouplingMode,
    DensityIndex, LayerSpec, MessageNorm, SelfConnection,
};
use crate::radial::{bessel_kernel, RadialConfig, RadialVariant};
use crate::so3::{Layout, YlmTables};

pub use forward::{
    forward_energy, forward_energy_at_precision, forward_energy_compiled, EnergyDecomposition,
    ForwardOptions, ForwardOutput,
};
pub use normalize::{apply_normalization, NormScheme, NormalizationState, Shift};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LinearAce,
    Nequip,
    Botnet,
    BotnetLinear,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Linear readouts after layers `1..T-1`, nonlinear single-hidden-layer
    /// readout after layer `T`.
    PerLayerLinearFinalMlp,
    /// Linear readouts after every layer; strictly body-ordered.
    PerLayerLinearOnly,
    /// One linear readout after the last layer.
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    None,
    GatedSilu,
    GatedTanh,
}

impl Nonlinearity {
    pub fn act(&self) -> Option<Act> {
        match self {
            Nonlinearity::None => None,
            Nonlinearity::GatedSilu => Some(Act::Silu),
            Nonlinearity::GatedTanh => Some(Act::Tanh),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub preset: Preset,
    pub layers: Vec<LayerSpec>,
    pub readout: Readout,
    pub readout_hidden: usize,
    /// Hidden activation of the final readout.
    pub final_activation: Act,
    pub nonlinearity: Nonlinearity,
    pub radial: RadialConfig,
    pub normalization: NormScheme,
    pub precision: Precision,
}

impl ModelSpec {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn r_cut(&self) -> f64 {
        self.radial.r_cut
    }

    /// Maximal distance over which two atoms influence each other:
    /// `T * r_cut`.
    pub fn receptive_field(&self) -> f64 {
        self.layers.len() as f64 * self.radial.r_cut
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(MaceError::config("a model needs at least one layer"));
        }
        self.radial.validate()?;
        for l in &self.layers {
            l.validate()?;
        }
        if self.preset == Preset::LinearAce {
            if self.layers.len() != 1 {
                return Err(MaceError::config("the linear expansion uses a single layer"));
            }
            if self.layers[0].coupling != CouplingMode::DiscreteElements {
                return Err(MaceError::config(
                    "the linear expansion couples discrete element indices",
                ));
            }
        }
        if matches!(self.preset, Preset::Botnet | Preset::BotnetLinear)
            && self.nonlinearity != Nonlinearity::None
        {
            return Err(MaceError::config(
                "body-ordered presets keep all updates linear; nonlinearity must be 'none'",
            ));
        }
        Ok(())
    }

    /// Body-ordered message passing: T layers, linear updates, mixed
    /// self-connection (simplified first, residual after), element-dependent
    /// radial from the second layer, per-layer linear readouts and a final
    /// nonlinear readout.
    pub fn botnet(t: usize, n_channels: usize, l_max: usize, r_cut: f64) -> ModelSpec {
        let layers = (0..t)
            .map(|i| LayerSpec {
                nu: 1,
                l_max,
                l_max_out: l_max,
                n_channels,
                coupling: CouplingMode::FeatureContraction,
                radial: if i == 0 {
                    RadialVariant::AgnosticMlp
                } else {
                    RadialVariant::ElementDependent
                },
                self_connection: if i == 0 {
                    SelfConnection::Simplified
                } else {
                    SelfConnection::Residual
                },
                message_norm: MessageNorm::AvgNeighbors,
                max_total_degree: None,
            })
            .collect();
        ModelSpec {
            preset: Preset::Botnet,
            layers,
            readout: Readout::PerLayerLinearFinalMlp,
            readout_hidden: 16,
            final_activation: Act::Silu,
            nonlinearity: Nonlinearity::None,
            radial: RadialConfig { r_cut, ..Default::default() },
            normalization: NormScheme::SshForcesRms,
            precision: Precision::F64,
        }
    }

    /// Fully linear body-ordered variant: every readout is linear.
    pub fn botnet_linear(t: usize, n_channels: usize, l_max: usize, r_cut: f64) -> ModelSpec {
        let mut spec = ModelSpec::botnet(t, n_channels, l_max, r_cut);
        spec.preset = Preset::BotnetLinear;
        spec.readout = Readout::PerLayerLinearOnly;
        spec
    }

    /// Equivariant message passing with gated nonlinear updates, residual
    /// self-connections everywhere and the element-agnostic radial map.
    pub fn nequip(t: usize, n_channels: usize, l_max: usize, r_cut: f64) -> ModelSpec {
        let layers = (0..t)
            .map(|_| LayerSpec {
                nu: 1,
                l_max,
                l_max_out: l_max,
                n_channels,
                coupling: CouplingMode::FeatureContraction,
                radial: RadialVariant::AgnosticMlp,
                self_connection: SelfConnection::Residual,
                message_norm: MessageNorm::SqrtAvgNeighbors,
                max_total_degree: None,
            })
            .collect();
        ModelSpec {
            preset: Preset::Nequip,
            layers,
            readout: Readout::FinalOnly,
            readout_hidden: 16,
            final_activation: Act::Silu,
            nonlinearity: Nonlinearity::GatedSilu,
            radial: RadialConfig { r_cut, ..Default::default() },
            normalization: NormScheme::SshForcesRms,
            precision: Precision::F64,
        }
    }

    /// Single-layer linear expansion over discrete element indices, solved
    /// by least squares.
    pub fn linear_ace(
        nu: usize,
        n_basis: usize,
        l_max: usize,
        r_cut: f64,
        max_total_degree: usize,
    ) -> ModelSpec {
        ModelSpec {
            preset: Preset::LinearAce,
            layers: vec![LayerSpec {
                nu,
                l_max,
                l_max_out: 0,
                n_channels: 1,
                coupling: CouplingMode::DiscreteElements,
                radial: RadialVariant::FixedOrthogonal,
                self_connection: SelfConnection::None,
                message_norm: MessageNorm::None,
                max_total_degree: Some(max_total_degree),
            }],
            readout: Readout::FinalOnly,
            readout_hidden: 0,
            final_activation: Act::Identity,
            nonlinearity: Nonlinearity::None,
            radial: RadialConfig {
                r_cut,
                n_basis,
                variant: RadialVariant::FixedOrthogonal,
                mlp_widths: vec![],
                envelope_degree: 4,
            },
            normalization: NormScheme::E0,
            precision: Precision::F64,
        }
    }
}

/// Initialization rule of one parameter block.
#[derive(Debug, Clone)]
pub enum InitRule {
    Zero,
    Normal { std: f64 },
    /// Independent per-entry standard deviations (path-mixing weights whose
    /// fan-in differs per output order).
    NormalPerEntry(Arc<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct ParamBlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitRule,
}

impl ParamBlockSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concrete parameter values, congruent with the architecture's block list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

impl Params {
    pub fn init(arch: &ModelArch, seed: u64) -> Params {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = move |std: f64, rng: &mut ChaCha8Rng| -> f64 {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0f64);
            let u2: f64 = rng.gen_range(0.0..1.0f64);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let blocks = arch
            .blocks
            .iter()
            .map(|spec| {
                let values = match &spec.init {
                    InitRule::Zero => vec![0.0; spec.len()],
                    InitRule::Normal { std } => {
                        (0..spec.len()).map(|_| normal(*std, &mut rng)).collect()
                    }
                    InitRule::NormalPerEntry(stds) => {
                        stds.iter().map(|s| normal(*s, &mut rng)).collect()
                    }
                };
                ParamBlock { name: spec.name.clone(), shape: spec.shape.clone(), values }
            })
            .collect();
        Params { blocks }
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: vec![0.0; b.values.len()],
                })
                .collect(),
        }
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn n_parameters(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    /// Values converted to the executor's scalar type, in block order.
    pub fn as_scalar<S: crate::scalar::Scalar>(&self) -> Vec<Vec<S>> {
        self.blocks
            .iter()
            .map(|b| b.values.iter().map(|v| S::from_f64(*v)).collect())
            .collect()
    }
}

/// Everything derivable from `(spec, elements)`: per-layer layouts,
/// contraction paths or basis plans, shared sparse maps and the parameter
/// block list with initialization rules.
#[derive(Debug, Clone)]
pub struct ModelArch {
    pub spec: ModelSpec,
    pub n_elements: usize,
    pub ylm: Arc<YlmTables>,
    pub layers: Vec<LayerArch>,
    pub blocks: Vec<ParamBlockSpec>,
    /// Mean squared magnitude of one Bessel component over the cutoff ball,
    /// used to calibrate radial-map initialization.
    pub bessel_second_moment: f64,
}

#[derive(Debug, Clone)]
pub enum LayerMode {
    /// Correlation order 1, feature contraction: per-edge Clebsch-Gordan
    /// coupling with a per-path learnable radial.
    Conv {
        paths: Vec<ConvPath>,
        shape: Arc<PathShape>,
        /// `(Y, h) -> [path][k][M]` contraction map
        edge_map: Arc<SparseBilinearMap>,
    },
    /// Materialized density projection with monomial products and chained
    /// coupling (discrete elements, or feature mode with `nu >= 2`).
    General {
        plan: Arc<BasisPlan>,
        shape: Arc<PathShape>,
        /// per-element `(bessel, Y) -> A` scatter maps (discrete mode)
        scatter: Vec<Arc<SparseBilinearMap>>,
    },
}

#[derive(Debug, Clone)]
pub struct LayerArch {
    pub spec: LayerSpec,
    pub input_layout: Arc<Layout>,
    pub out_layout: Arc<Layout>,
    pub mode: LayerMode,
    /// rows of the radial map: `n_paths * k` (conv) or species count (general)
    pub radial_n_out: usize,
    /// parameter block ids
    pub premix: Option<usize>,
    pub radial_blocks: Vec<usize>,
    pub path_mix: Option<usize>,
    pub update: Option<usize>,
    pub self_conn: Option<usize>,
    pub readout: Option<usize>,
}

/// Block-diagonal matmul shape between two canonical layouts (same `l` set).
pub fn block_linear_shape(
    input: &Layout,
    output: &Layout,
) -> Result<Arc<crate::autodiff::BlockLinearShape>> {
    use crate::autodiff::{BlockLinearShape, BlockMM};
    let mut blocks = Vec::new();
    let mut w_off = 0;
    for (bi, ob) in output.blocks().iter().enumerate() {
        let ib_idx = input
            .block_for_l(ob.l)
            .ok_or_else(|| MaceError::shape(format!("input lacks l={} block", ob.l)))?;
        let ib = input.blocks()[ib_idx];
        blocks.push(BlockMM {
            dim: 2 * ob.l + 1,
            k_out: ob.channels,
            k_in: ib.channels,
            w_off,
            x_off: input.offset(ib_idx),
            y_off: output.offset(bi),
        });
        w_off += ob.channels * ib.channels;
    }
    Ok(Arc::new(BlockLinearShape {
        blocks,
        w_len: w_off,
        x_len: input.len(),
        y_len: output.len(),
    }))
}

impl ModelArch {
    pub fn new(spec: ModelSpec, elements: &ElementTable) -> Result<ModelArch> {
        spec.validate()?;
        let n_elements = elements.len();
        if n_elements == 0 {
            return Err(MaceError::data("element table is empty"));
        }
        let max_l_needed = spec.layers.iter().map(|l| l.l_max).max().unwrap_or(0);
        let ylm = Arc::new(YlmTables::new(max_l_needed));

        // deterministic quadrature estimate of E[B_n(r)^2] over the ball
        let bessel_second_moment = {
            let n_grid = 256;
            let mut acc = 0.0;
            let mut count = 0;
            for i in 0..n_grid {
                let r = (i as f64 + 0.5) / n_grid as f64 * spec.radial.r_cut;
                if r < 0.1 {
                    continue;
                }
                let b = bessel_kernel(
                    r,
                    spec.radial.n_basis,
                    spec.radial.r_cut,
                    spec.radial.envelope_degree,
                );
                for v in &b {
                    acc += v * v;
                    count += 1;
                }
            }
            (acc / count as f64).max(1e-12)
        };

        let mut blocks: Vec<ParamBlockSpec> = Vec::new();
        let mut layers: Vec<LayerArch> = Vec::new();

        let is_linear_basis = spec.preset == Preset::LinearAce;
        let k0 = spec.layers[0].n_channels;
        if !is_linear_basis {
            blocks.push(ParamBlockSpec {
                name: "embed.w".into(),
                shape: vec![n_elements, k0],
                init: InitRule::Normal { std: 1.0 },
            });
        }

        let mut input_layout = Arc::new(Layout::scalars(k0));
        for (t, lspec) in spec.layers.iter().enumerate() {
            let k = lspec.n_channels;
            let input_ls: Vec<usize> = input_layout.blocks().iter().map(|b| b.l).collect();

            let (mode, radial_n_out, out_layout) = match lspec.coupling {
                CouplingMode::FeatureContraction if lspec.nu == 1 => {
                    let paths = conv_paths(lspec.l_max, &input_ls, lspec.l_max_out);
                    if paths.is_empty() {
                        return Err(MaceError::config(format!(
                            "layer {t} has no parity-allowed contraction paths"
                        )));
                    }
                    let shape = conv_path_shape(k, &paths);
                    let edge_map = build_edge_map(&ylm, &input_layout, &paths, &shape);
                    let out_layout = shape.out_layout.clone();
                    let n_out = paths.len() * k;
                    (LayerMode::Conv { paths, shape, edge_map }, n_out, out_layout)
                }
                CouplingMode::FeatureContraction => {
                    return Err(MaceError::config(
                        "feature contraction with nu >= 2 is not wired into the presets; \
                         use correlation order 1 per layer or the discrete coupling",
                    ));
                }
                CouplingMode::DiscreteElements => {
                    if lspec.n_channels != 1 {
                        return Err(MaceError::config(
                            "discrete element coupling carries no uncoupled channels; \
                             set n_channels = 1",
                        ));
                    }
                    let species =
                        discrete_species(spec.radial.n_basis, lspec.l_max, n_elements);
                    let index = DensityIndex::new(species);
                    let plan = Arc::new(BasisPlan::build(
                        index,
                        lspec.nu,
                        lspec.l_max_out,
                        lspec.max_total_degree,
                    )?);
                    if plan.functions.is_empty() {
                        return Err(MaceError::config(format!(
                            "layer {t} produces an empty basis"
                        )));
                    }
                    let shape = plan.path_shape(k);
                    let scatter = build_discrete_scatter(&ylm, &plan, spec.radial.n_basis, n_elements);
                    let out_layout = shape.out_layout.clone();
                    (LayerMode::General { plan, shape, scatter }, 0, out_layout)
                }
            };

            let mut arch = LayerArch {
                spec: lspec.clone(),
                input_layout: input_layout.clone(),
                out_layout: out_layout.clone(),
                mode,
                radial_n_out,
                premix: None,
                radial_blocks: vec![],
                path_mix: None,
                update: None,
                self_conn: None,
                readout: None,
            };

            if !is_linear_basis {
                // channel premix: maps the previous layer's channel count
                // onto this layer's, one dense block per l
                let premix_len: usize =
                    input_layout.blocks().iter().map(|b| k * b.channels).sum();
                let kin = input_layout.blocks()[0].channels;
                arch.premix = Some(blocks.len());
                blocks.push(ParamBlockSpec {
                    name: format!("layer{t}.premix"),
                    shape: vec![premix_len],
                    init: InitRule::Normal { std: 1.0 / (kin as f64).sqrt() },
                });

                // radial map
                match lspec.radial {
                    RadialVariant::FixedOrthogonal => {}
                    RadialVariant::AgnosticMlp => {
                        let widths = &spec.radial.mlp_widths;
                        let mut prev = spec.radial.n_basis;
                        let mut first = true;
                        for (i, &w) in widths.iter().enumerate() {
                            let std = if first {
                                1.0 / ((prev as f64) * bessel_second_moment).sqrt()
                            } else {
                                1.0 / (prev as f64).sqrt()
                            };
                            arch.radial_blocks.push(blocks.len());
                            blocks.push(ParamBlockSpec {
                                name: format!("layer{t}.radial.w{i}"),
                                shape: vec![w, prev],
                                init: InitRule::Normal { std },
                            });
                            prev = w;
                            first = false;
                        }
                        let std = if first {
                            1.0 / ((prev as f64) * bessel_second_moment).sqrt()
                        } else {
                            1.0 / (prev as f64).sqrt()
                        };
                        arch.radial_blocks.push(blocks.len());
                        blocks.push(ParamBlockSpec {
                            name: format!("layer{t}.radial.out"),
                            shape: vec![radial_n_out, prev],
                            init: InitRule::Normal { std },
                        });
                    }
                    RadialVariant::ElementDependent => {
                        arch.radial_blocks.push(blocks.len());
                        blocks.push(ParamBlockSpec {
                            name: format!("layer{t}.radial.w"),
                            shape: vec![n_elements, radial_n_out, spec.radial.n_basis],
                            init: InitRule::Normal {
                                std: 1.0
                                    / ((spec.radial.n_basis as f64) * bessel_second_moment)
                                        .sqrt(),
                            },
                        });
                    }
                }

                // path mixing weights w_{k eta L}
                let shape = match &arch.mode {
                    LayerMode::Conv { shape, .. } => shape.clone(),
                    LayerMode::General { shape, .. } => shape.clone(),
                };
                let mut fanin_per_l: std::collections::HashMap<usize, usize> = Default::default();
                for &l in &shape.path_ls {
                    *fanin_per_l.entry(l).or_insert(0) += 1;
                }
                let stds: Vec<f64> = shape
                    .path_ls
                    .iter()
                    .flat_map(|l| {
                        let std = 1.0 / (fanin_per_l[l] as f64).sqrt();
                        std::iter::repeat(std).take(k)
                    })
                    .collect();
                arch.path_mix = Some(blocks.len());
                blocks.push(ParamBlockSpec {
                    name: format!("layer{t}.path_mix"),
                    shape: vec![shape.path_ls.len(), k],
                    init: InitRule::NormalPerEntry(Arc::new(stds)),
                });

                // update weights
                let update_len: usize =
                    out_layout.blocks().iter().map(|b| b.channels * b.channels).sum();
                arch.update = Some(blocks.len());
                blocks.push(ParamBlockSpec {
                    name: format!("layer{t}.update"),
                    shape: vec![update_len],
                    init: InitRule::Normal { std: 1.0 / (k as f64).sqrt() },
                });

                // self-connection weights (per element)
                if lspec.self_connection != SelfConnection::None {
                    let sc_input = match lspec.self_connection {
                        SelfConnection::Residual => &input_layout,
                        _ => &out_layout,
                    };
                    let sc_len: usize = out_layout
                        .blocks()
                        .iter()
                        .filter_map(|ob| {
                            sc_input
                                .block_for_l(ob.l)
                                .map(|bi| ob.channels * sc_input.blocks()[bi].channels)
                        })
                        .sum();
                    arch.self_conn = Some(blocks.len());
                    blocks.push(ParamBlockSpec {
                        name: format!("layer{t}.sc"),
                        shape: vec![n_elements, sc_len],
                        init: InitRule::Normal { std: 1.0 / (k as f64).sqrt() },
                    });
                }

                // per-layer linear readout
                let has_linear_readout = match spec.readout {
                    Readout::PerLayerLinearFinalMlp => t + 1 < spec.layers.len(),
                    Readout::PerLayerLinearOnly => true,
                    Readout::FinalOnly => t + 1 == spec.layers.len(),
                };
                if has_linear_readout {
                    arch.readout = Some(blocks.len());
                    blocks.push(ParamBlockSpec {
                        name: format!("readout{t}.w"),
                        shape: vec![k],
                        init: InitRule::Normal { std: 1.0 / (k as f64).sqrt() },
                    });
                }
            }

            input_layout = out_layout;
            layers.push(arch);
        }

        if is_linear_basis {
            let LayerMode::General { plan, .. } = &layers[0].mode else {
                unreachable!()
            };
            let n_invariant =
                plan.functions.iter().filter(|f| f.l_out == 0).count();
            blocks.push(ParamBlockSpec {
                name: "ace.coeffs".into(),
                shape: vec![n_elements, n_invariant],
                init: InitRule::Zero,
            });
        } else if spec.readout == Readout::PerLayerLinearFinalMlp {
            let k = spec.layers.last().unwrap().n_channels;
            blocks.push(ParamBlockSpec {
                name: "readout_final.w1".into(),
                shape: vec![spec.readout_hidden, k],
                init: InitRule::Normal { std: 1.0 / (k as f64).sqrt() },
            });
            blocks.push(ParamBlockSpec {
                name: "readout_final.w2".into(),
                shape: vec![spec.readout_hidden],
                init: InitRule::Zero,
            });
        }

        Ok(ModelArch { spec, n_elements, ylm, layers, blocks, bessel_second_moment })
    }

    pub fn block_id(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Invariant basis size of the single-layer linear expansion.
    pub fn linear_basis_size(&self) -> Option<usize> {
        if self.spec.preset != Preset::LinearAce {
            return None;
        }
        match &self.layers[0].mode {
            LayerMode::General { plan, .. } => {
                Some(plan.functions.iter().filter(|f| f.l_out == 0).count())
            }
            _ => None,
        }
    }
}

/// Per-edge contraction map `(Y, h) -> [path][k][M]` for correlation order
/// one: entries carry the Clebsch-Gordan coefficients for every channel.
fn build_edge_map(
    ylm: &YlmTables,
    input_layout: &Layout,
    paths: &[ConvPath],
    shape: &PathShape,
) -> Arc<SparseBilinearMap> {
    use crate::so3::cg::clebsch_gordan_real;
    let k = shape.k;
    let mut entries = Vec::new();
    for (p, path) in paths.iter().enumerate() {
        let cg = clebsch_gordan_real(path.l1, path.l2, path.l_out).expect("paths are valid");
        let (d1, d2, d3) = cg.dim();
        let y_off: usize = (0..path.l1).map(|q| 2 * q + 1).sum();
        let h_block = input_layout.block_for_l(path.l2).expect("input l2 exists");
        let h_base = input_layout.offset(h_block);
        let p_off = shape.path_offset(p);
        for m1 in 0..d1 {
            for m2 in 0..d2 {
                for m3 in 0..d3 {
                    let c = cg.coeffs[m1 * d2 * d3 + m2 * d3 + m3];
                    if c.abs() <= 1e-14 {
                        continue;
                    }
                    for ki in 0..k {
                        entries.push((
                            (y_off + m1) as u32,
                            (h_base + ki * d2 + m2) as u32,
                            (p_off + ki * d3 + m3) as u32,
                            c,
                        ));
                    }
                }
            }
        }
    }
    Arc::new(SparseBilinearMap {
        n_a: ylm.output_len(),
        n_b: input_layout.len(),
        n_out: shape.tensor_len(),
        entries,
    })
}

/// Per-element scatter `(bessel, Y) -> A` for the discrete one-particle
/// basis: the neighbor element selects which block receives the values.
fn build_discrete_scatter(
    ylm: &YlmTables,
    plan: &BasisPlan,
    n_basis: usize,
    n_elements: usize,
) -> Vec<Arc<SparseBilinearMap>> {
    use crate::layer::Species;
    (0..n_elements)
        .map(|z| {
            let mut entries = Vec::new();
            for (si, s) in plan.index.species.iter().enumerate() {
                let Species::Discrete { n, l, z: sz } = s else { continue };
                if *sz != z {
                    continue;
                }
                let y_off: usize = (0..*l).map(|q| 2 * q + 1).sum();
                for m in 0..(2 * l + 1) {
                    entries.push((
                        (*n - 1) as u32,
                        (y_off + m) as u32,
                        plan.index.flat(si, m) as u32,
                        1.0,
                    ));
                }
            }
            Arc::new(SparseBilinearMap {
                n_a: n_basis,
                n_b: ylm.output_len(),
                n_out: plan.index.len,
                entries,
            })
        })
        .collect()
}

/// A complete potential: specification, vocabulary, parameters and the
/// normalization transform between model-internal units and eV.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arc<ModelArch>,
    pub elements: ElementTable,
    pub params: Params,
    pub norm: NormalizationState,
    /// Mean neighbor count of the training set; enters the message
    /// normalization.
    pub avg_neighbors: f64,
}

impl Model {
    pub fn new(spec: ModelSpec, elements: ElementTable, seed: u64) -> Result<Model> {
        let arch = Arc::new(ModelArch::new(spec, &elements)?);
        let params = Params::init(&arch, seed);
        Ok(Model {
            arch,
            elements,
            params,
            norm: NormalizationState::identity(),
            avg_neighbors: 1.0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.arch.spec
    }

    pub fn r_cut(&self) -> f64 {
        self.arch.spec.r_cut()
    }

    pub fn receptive_field(&self) -> f64 {
        self.arch.spec.receptive_field()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ElementTable {
        ElementTable::new(vec!["H".into(), "O".into()]).unwrap()
    }

    #[test]
    fn receptive_field_is_t_times_r_cut() {
        let spec = ModelSpec::botnet(2, 4, 1, 5.0);
        assert_eq!(spec.receptive_field(), 10.0);
        let spec = ModelSpec::botnet(1, 4, 1, 4.0);
        assert_eq!(spec.receptive_field(), 4.0);
        let spec = ModelSpec::botnet(5, 4, 1, 4.0);
        assert_eq!(spec.receptive_field(), 20.0);
    }

    #[test]
    fn arch_builds_for_all_presets() {
        let t = table();
        for spec in [
            ModelSpec::botnet(2, 4, 2, 5.0),
            ModelSpec::botnet_linear(2, 4, 2, 5.0),
            ModelSpec::nequip(2, 4, 2, 5.0),
            ModelSpec::linear_ace(3, 4, 2, 5.0, 8),
        ] {
            let arch = ModelArch::new(spec, &t).unwrap();
            assert!(!arch.blocks.is_empty());
            let params = Params::init(&arch, 7);
            assert_eq!(params.blocks.len(), arch.blocks.len());
        }
    }

    #[test]
    fn deterministic_initialization() {
        let t = table();
        let arch = Arc::new(ModelArch::new(ModelSpec::botnet(2, 4, 1, 5.0), &t).unwrap());
        let a = Params::init(&arch, 42);
        let b = Params::init(&arch, 42);
        assert_eq!(a, b);
        let c = Params::init(&arch, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn body_ordered_presets_reject_nonlinearity() {
        let mut spec = ModelSpec::botnet(2, 4, 1, 5.0);
        spec.nonlinearity = Nonlinearity::GatedSilu;
        assert!(ModelArch::new(spec, &table()).is_err());
    }
}
