//! Run configuration: INI-style sections of `key = value` pairs, strictly
//! validated (unknown sections or keys are rejected with their line
//! numbers). No nesting beyond one section level.

use std::collections::BTreeMap;
use std::path::Path;

use crate::act::Act;
use crate::error::{MaceError, Result};
use crate::layer::{CouplingMode, LayerSpec, MessageNorm, SelfConnection};
use crate::model::{ModelSpec, NormScheme, Nonlinearity, Precision, Preset, Readout};
use crate::radial::{RadialConfig, RadialVariant};
use crate::train::{LossSpec, OptimizerConfig, Reduction};

/// One parsed section: key -> (value, line number).
pub type Section = BTreeMap<String, (String, usize)>;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub sections: BTreeMap<String, Section>,
}

/// Allowed sections and keys; anything else is a configuration error.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "model",
        &[
            "preset",
            "layers",
            "channels",
            "l_max",
            "l_max_out",
            "nu",
            "max_total_degree",
            "readout_hidden",
            "nonlinearity",
            "normalization",
            "precision",
            "final_activation",
            "message_norm",
            "self_connection",
        ],
    ),
    ("radial", &["r_cut", "n_basis", "envelope_degree", "mlp_widths", "variant"]),
    ("loss", &["energy_weight", "force_weight", "reduction", "per_atom_energy"]),
    (
        "optimizer",
        &[
            "lr",
            "beta1",
            "beta2",
            "eps",
            "plateau_factor",
            "plateau_patience",
            "min_lr",
            "ema_decay",
            "max_epochs",
            "batch_size",
            "seed",
        ],
    ),
    ("data", &["train", "test"]),
    ("fit", &["ridge", "include_forces", "force_row_weight", "normalization"]),
    ("output", &["model", "log", "results"]),
    ("eval", &["model", "dataset"]),
    (
        "scan",
        &["model", "structure", "frame", "kind", "atoms", "start", "stop", "steps"],
    ),
    ("dimer", &["model", "elements", "start", "stop", "steps"]),
    ("decompose", &["model", "dataset", "shift_last"]),
    ("check", &["preset", "model", "trials", "negative_control", "body_order"]),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                let name = line
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| MaceError::parse(line_no, "malformed section header"))?
                    .trim()
                    .to_string();
                let known = SCHEMA.iter().find(|(s, _)| *s == name);
                if known.is_none() {
                    return Err(MaceError::parse(line_no, format!("unknown section [{name}]")));
                }
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MaceError::parse(line_no, format!("expected key = value, got '{line}'")));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let section = current
                .clone()
                .ok_or_else(|| MaceError::parse(line_no, "key outside of any section"))?;
            let allowed = SCHEMA.iter().find(|(s, _)| *s == section).unwrap().1;
            if !allowed.contains(&key.as_str()) {
                return Err(MaceError::parse(
                    line_no,
                    format!("unknown key '{key}' in section [{section}]"),
                ));
            }
            let sec = sections.get_mut(&section).unwrap();
            if sec.contains_key(&key) {
                return Err(MaceError::parse(
                    line_no,
                    format!("duplicate key '{key}' in section [{section}]"),
                ));
            }
            sec.insert(key, (value, line_no));
        }
        Ok(RunConfig { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .get(name)
            .ok_or_else(|| MaceError::config(format!("missing required section [{name}]")))
    }

    pub fn get<'a>(&'a self, section: &str, key: &str) -> Option<&'a str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(v, _)| v.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            MaceError::config(format!("missing required key '{key}' in section [{section}]"))
        })
    }

    fn parse_value<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                MaceError::config(format!("key '{key}' in [{section}]: cannot parse '{v}'"))
            }),
        }
    }

    fn parse_or<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.parse_value(section, key)?.unwrap_or(default))
    }

    pub fn radial_config(&self) -> Result<RadialConfig> {
        let mut cfg = RadialConfig::default();
        cfg.r_cut = self.parse_or("radial", "r_cut", cfg.r_cut)?;
        cfg.n_basis = self.parse_or("radial", "n_basis", cfg.n_basis)?;
        cfg.envelope_degree = self.parse_or("radial", "envelope_degree", cfg.envelope_degree)?;
        if let Some(w) = self.get("radial", "mlp_widths") {
            cfg.mlp_widths = w
                .split(',')
                .map(|t| {
                    t.trim().parse::<usize>().map_err(|_| {
                        MaceError::config(format!("mlp_widths entry '{t}' is not an integer"))
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = self.get("radial", "variant") {
            cfg.variant = match v {
                "fixed-orthogonal" => RadialVariant::FixedOrthogonal,
                "agnostic-mlp" => RadialVariant::AgnosticMlp,
                "element-dependent" => RadialVariant::ElementDependent,
                other => {
                    return Err(MaceError::config(format!("unknown radial variant '{other}'")))
                }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assemble the model specification from `[model]` and `[radial]`.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let preset = self.require("model", "preset")?;
        let radial = self.radial_config()?;
        let t: usize = self.parse_or("model", "layers", 2)?;
        let k: usize = self.parse_or("model", "channels", 16)?;
        let l_max: usize = self.parse_or("model", "l_max", 2)?;
        let nu: usize = self.parse_or("model", "nu", 2)?;
        let max_deg: usize = self.parse_or("model", "max_total_degree", 10)?;
        let mut spec = match preset {
            "botnet" => ModelSpec::botnet(t, k, l_max, radial.r_cut),
            "botnet-linear" => ModelSpec::botnet_linear(t, k, l_max, radial.r_cut),
            "nequip" => ModelSpec::nequip(t, k, l_max, radial.r_cut),
            "linear-ace" => {
                ModelSpec::linear_ace(nu, radial.n_basis, l_max, radial.r_cut, max_deg)
            }
            "custom" => {
                let l_max_out: usize = self.parse_or("model", "l_max_out", l_max)?;
                let sc = match self.get("model", "self_connection").unwrap_or("residual") {
                    "residual" => SelfConnection::Residual,
                    "simplified" => SelfConnection::Simplified,
                    "none" => SelfConnection::None,
                    other => {
                        return Err(MaceError::config(format!(
                            "unknown self_connection '{other}'"
                        )))
                    }
                };
                let mn = match self.get("model", "message_norm").unwrap_or("sqrt-avg-neighbors") {
                    "none" => MessageNorm::None,
                    "sqrt-avg-neighbors" => MessageNorm::SqrtAvgNeighbors,
                    "avg-neighbors" => MessageNorm::AvgNeighbors,
                    other => {
                        return Err(MaceError::config(format!("unknown message_norm '{other}'")))
                    }
                };
                let layers = (0..t)
                    .map(|_| LayerSpec {
                        nu: 1,
                        l_max,
                        l_max_out,
                        n_channels: k,
                        coupling: CouplingMode::FeatureContraction,
                        radial: radial.variant,
                        self_connection: sc,
                        message_norm: mn,
                        max_total_degree: None,
                    })
                    .collect();
                ModelSpec {
                    preset: Preset::Custom,
                    layers,
                    readout: Readout::PerLayerLinearFinalMlp,
                    readout_hidden: 16,
                    final_activation: Act::Silu,
                    nonlinearity: Nonlinearity::None,
                    radial: radial.clone(),
                    normalization: NormScheme::SshForcesRms,
                    precision: Precision::F64,
                }
            }
            other => return Err(MaceError::config(format!("unknown preset '{other}'"))),
        };
        spec.radial = radial;
        spec.readout_hidden = self.parse_or("model", "readout_hidden", spec.readout_hidden)?;
        if let Some(v) = self.get("model", "nonlinearity") {
            spec.nonlinearity = match v {
                "none" => Nonlinearity::None,
                "gated-silu" => Nonlinearity::GatedSilu,
                "gated-tanh" => Nonlinearity::GatedTanh,
                other => {
                    return Err(MaceError::config(format!("unknown nonlinearity '{other}'")))
                }
            };
        }
        if let Some(v) = self.get("model", "final_activation") {
            spec.final_activation = Act::from_name(v)?;
        }
        if let Some(v) = self.get("model", "normalization") {
            spec.normalization = match v {
                "ssh-forces-rms" => NormScheme::SshForcesRms,
                "ssh-energy-std" => NormScheme::SshEnergyStd,
                "e0" => NormScheme::E0,
                other => {
                    return Err(MaceError::config(format!("unknown normalization '{other}'")))
                }
            };
        }
        if let Some(v) = self.get("model", "precision") {
            spec.precision = match v {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(MaceError::config(format!("unknown precision '{other}'"))),
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        let mut spec = LossSpec::default();
        spec.energy_weight = self.parse_or("loss", "energy_weight", spec.energy_weight)?;
        spec.force_weight = self.parse_or("loss", "force_weight", spec.force_weight)?;
        spec.per_atom_energy =
            self.parse_or("loss", "per_atom_energy", spec.per_atom_energy)?;
        if let Some(v) = self.get("loss", "reduction") {
            spec.reduction = match v {
                "mean" => Reduction::Mean,
                "sum" => Reduction::Sum,
                other => return Err(MaceError::config(format!("unknown reduction '{other}'"))),
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn optimizer_config(&self, seed_override: Option<u64>) -> Result<OptimizerConfig> {
        let mut cfg = OptimizerConfig::default();
        cfg.lr = self.parse_or("optimizer", "lr", cfg.lr)?;
        cfg.beta1 = self.parse_or("optimizer", "beta1", cfg.beta1)?;
        cfg.beta2 = self.parse_or("optimizer", "beta2", cfg.beta2)?;
        cfg.eps = self.parse_or("optimizer", "eps", cfg.eps)?;
        cfg.plateau_factor = self.parse_or("optimizer", "plateau_factor", cfg.plateau_factor)?;
        cfg.plateau_patience =
            self.parse_or("optimizer", "plateau_patience", cfg.plateau_patience)?;
        cfg.min_lr = self.parse_or("optimizer", "min_lr", cfg.min_lr)?;
        cfg.max_epochs = self.parse_or("optimizer", "max_epochs", cfg.max_epochs)?;
        cfg.ema_decay = self.parse_value("optimizer", "ema_decay")?;
        cfg.batch_size = self.parse_value("optimizer", "batch_size")?;
        cfg.seed = self.parse_or("optimizer", "seed", cfg.seed)?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let good = "[model]\npreset = botnet\nlayers = 3\n\n[radial]\nr_cut = 4.5\n";
        let cfg = RunConfig::parse(good).unwrap();
        assert_eq!(cfg.get("model", "preset"), Some("botnet"));
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.radial.r_cut, 4.5);

        let bad_key = "[model]\npreset = botnet\nlayerz = 3\n";
        let err = RunConfig::parse(bad_key).unwrap_err().to_string();
        assert!(err.contains("layerz") && err.contains("line 3"), "{err}");

        let bad_section = "[models]\npreset = botnet\n";
        assert!(RunConfig::parse(bad_section).is_err());

        let dup = "[model]\npreset = botnet\npreset = nequip\n";
        assert!(RunConfig::parse(dup).is_err());

        let orphan = "preset = botnet\n";
        assert!(RunConfig::parse(orphan).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# leading comment\n[model]\n; semicolon comment\npreset = nequip\n\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.get("model", "preset"), Some("nequip"));
    }
}
