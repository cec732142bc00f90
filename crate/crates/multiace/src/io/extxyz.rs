//! Extended-XYZ reading and writing (molecular frames only).
//!
//! Supported per-frame layout:
//!
//! ```text
//! <N>
//! key=value ... [energy=<eV>] [e0_<Symbol>=<eV>] [Properties=species:S:1:pos:R:3[:forces:R:3]]
//! <Symbol> <x> <y> <z> [<fx> <fy> <fz>]
//! ```
//!
//! Units are eV and Angstrom. Any `Lattice` key (or periodic `pbc` flags)
//! is rejected: these models are defined for open boundary conditions.
//! Numeric fields are written with 17 significant digits, which round-trips
//! `f64` exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MaceError, Result};
use crate::graph::Configuration;

/// Key=value properties of one comment line; values keep their raw text.
fn parse_comment_line(line: &str, line_no: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            break;
        }
        let start = i;
        while i < bytes.len() && bytes[i] != b'=' && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] != b'=' {
            // bare token without '=': tolerated as a flag with empty value
            out.push((line[start..i].to_string(), String::new()));
            continue;
        }
        let key = line[start..i].to_string();
        i += 1; // '='
        let value = if i < bytes.len() && bytes[i] == b'"' {
            i += 1;
            let vstart = i;
            while i < bytes.len() && bytes[i] != b'"' {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(MaceError::parse(line_no, "unterminated quote in comment line"));
            }
            let v = line[vstart..i].to_string();
            i += 1;
            v
        } else {
            let vstart = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            line[vstart..i].to_string()
        };
        out.push((key, value));
    }
    Ok(out)
}

/// Frames plus any per-element reference energies found in the headers.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub frames: Vec<Configuration>,
    pub e0: BTreeMap<String, f64>,
}

/// Parse all frames from extended-XYZ text.
pub fn parse_extxyz_str(text: &str) -> Result<Dataset> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| MaceError::parse(i + 1, format!("expected an atom count, got '{}'", lines[i].trim())))?;
        if i + 1 >= lines.len() {
            return Err(MaceError::parse(i + 1, "missing comment line"));
        }
        let props = parse_comment_line(lines[i + 1], i + 2)?;
        let mut energy = None;
        let mut e0: BTreeMap<String, f64> = BTreeMap::new();
        let mut has_forces_decl = None;
        for (key, value) in &props {
            let lower = key.to_ascii_lowercase();
            if lower == "lattice" {
                return Err(MaceError::parse(
                    i + 2,
                    "periodic cells are not supported (Lattice key present); \
                     these models are molecular, open boundary conditions only",
                ));
            }
            if lower == "pbc" {
                let v = value.to_ascii_uppercase();
                if v.split_whitespace().any(|t| t != "F") {
                    return Err(MaceError::parse(
                        i + 2,
                        "periodic boundary conditions are not supported",
                    ));
                }
            }
            if lower == "energy" {
                let e: f64 = value.parse().map_err(|_| {
                    MaceError::parse(i + 2, format!("energy '{value}' is not a number"))
                })?;
                energy = Some(e);
            }
            if let Some(sym) = key.strip_prefix("e0_") {
                let e: f64 = value.parse().map_err(|_| {
                    MaceError::parse(i + 2, format!("reference energy '{value}' is not a number"))
                })?;
                e0.insert(sym.to_string(), e);
            }
            if key == "Properties" {
                match value.as_str() {
                    "species:S:1:pos:R:3" => has_forces_decl = Some(false),
                    "species:S:1:pos:R:3:forces:R:3" => has_forces_decl = Some(true),
                    other => {
                        return Err(MaceError::parse(
                            i + 2,
                            format!("unsupported Properties layout '{other}'"),
                        ))
                    }
                }
            }
        }
        if i + 1 + n >= lines.len() + usize::from(n == 0) {
            return Err(MaceError::parse(
                i + 1,
                format!("frame declares {n} atoms but the file ends early"),
            ));
        }
        let mut positions = Vec::with_capacity(n);
        let mut elements = Vec::with_capacity(n);
        let mut forces: Vec<[f64; 3]> = Vec::new();
        for a in 0..n {
            let line_no = i + 3 + a;
            let row = lines
                .get(i + 2 + a)
                .ok_or_else(|| MaceError::parse(line_no, "missing atom row"))?;
            let tok: Vec<&str> = row.split_whitespace().collect();
            if tok.len() != 4 && tok.len() != 7 {
                return Err(MaceError::parse(
                    line_no,
                    format!("expected 4 or 7 columns, got {}", tok.len()),
                ));
            }
            if let Some(expect_forces) = has_forces_decl {
                let expected = if expect_forces { 7 } else { 4 };
                if tok.len() != expected {
                    return Err(MaceError::parse(
                        line_no,
                        format!(
                            "row has {} columns but Properties declares {}",
                            tok.len(),
                            expected
                        ),
                    ));
                }
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| MaceError::parse(line_no, format!("'{s}' is not a number")))
            };
            elements.push(tok[0].to_string());
            positions.push([parse_f(tok[1])?, parse_f(tok[2])?, parse_f(tok[3])?]);
            if tok.len() == 7 {
                forces.push([parse_f(tok[4])?, parse_f(tok[5])?, parse_f(tok[6])?]);
            } else if !forces.is_empty() {
                return Err(MaceError::parse(line_no, "mixed rows with and without forces"));
            }
        }
        let mut cfg = Configuration::new(positions, elements);
        cfg.energy = energy;
        if !forces.is_empty() {
            if forces.len() != n {
                return Err(MaceError::parse(i + 3, "mixed rows with and without forces"));
            }
            cfg.forces = Some(forces);
        }
        frames.push((cfg, e0));
        i += 2 + n;
    }
    // reference-energy tables, when present, must be consistent
    let mut merged: BTreeMap<String, f64> = BTreeMap::new();
    for (_, e0) in &frames {
        for (k, v) in e0 {
            if let Some(prev) = merged.get(k) {
                if (prev - v).abs() > 1e-12 {
                    return Err(MaceError::data(format!(
                        "conflicting reference energies for element {k}"
                    )));
                }
            }
            merged.insert(k.clone(), *v);
        }
    }
    Ok(Dataset { frames: frames.into_iter().map(|(c, _)| c).collect(), e0: merged })
}

pub fn parse_extxyz(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_extxyz_str(&text)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_extxyz_str(frames: &[Configuration]) -> String {
    let mut out = String::new();
    for cfg in frames {
        let with_forces = cfg.forces.is_some();
        out.push_str(&format!("{}\n", cfg.len()));
        let mut header = String::new();
        if let Some(e) = cfg.energy {
            header.push_str(&format!("energy={} ", fmt17(e)));
        }
        header.push_str(if with_forces {
            "Properties=species:S:1:pos:R:3:forces:R:3"
        } else {
            "Properties=species:S:1:pos:R:3"
        });
        out.push_str(&header);
        out.push('\n');
        for i in 0..cfg.len() {
            let p = cfg.positions[i];
            out.push_str(&format!(
                "{} {} {} {}",
                cfg.elements[i],
                fmt17(p[0]),
                fmt17(p[1]),
                fmt17(p[2])
            ));
            if let Some(f) = &cfg.forces {
                out.push_str(&format!(" {} {} {}", fmt17(f[i][0]), fmt17(f[i][1]), fmt17(f[i][2])));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_extxyz(frames: &[Configuration], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_extxyz_str(frames))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_written_frame_round_trips() {
        let text = "2\nenergy=-1.25 Properties=species:S:1:pos:R:3\nH 0.0 0.0 0.0\nO 0.0 0.0 0.96\n";
        let frames = parse_extxyz_str(text).unwrap().frames;
        assert_eq!(frames.len(), 1);
        let f = &frames[0];
        assert_eq!(f.elements, vec!["H", "O"]);
        assert_abs_diff_eq!(f.energy.unwrap(), -1.25);
        assert_abs_diff_eq!(f.positions[1][2], 0.96);
        let back = parse_extxyz_str(&write_extxyz_str(&frames)).unwrap().frames;
        assert_eq!(frames, back);
    }

    #[test]
    fn lattice_key_is_rejected() {
        let text = "1\nLattice=\"10 0 0 0 10 0 0 0 10\" energy=0.0\nH 0 0 0\n";
        let err = parse_extxyz_str(text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.to_lowercase().contains("lattice"), "{err}");
        // periodic pbc flags too
        let text = "1\npbc=\"T T T\"\nH 0 0 0\n";
        assert!(parse_extxyz_str(text).is_err());
        // non-periodic pbc is fine
        let text = "1\npbc=\"F F F\"\nH 0 0 0\n";
        assert!(parse_extxyz_str(text).is_ok());
    }

    #[test]
    fn count_mismatch_reports_line_number() {
        let text = "3\nenergy=0.0\nH 0 0 0\nH 0 0 1\n";
        let err = parse_extxyz_str(text).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn e0_header_entries_are_collected() {
        let text = "1\nenergy=-13.6 e0_H=-13.6 e0_O=-75.0\nH 0 0 0\n";
        let e0 = parse_extxyz_str(text).unwrap().e0;
        assert_abs_diff_eq!(e0["H"], -13.6);
        assert_abs_diff_eq!(e0["O"], -75.0);
    }

    #[test]
    fn random_frames_round_trip_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut frames = Vec::new();
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let mut cfg = Configuration::new(
                (0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-8.0..8.0),
                            rng.gen_range(-8.0..8.0),
                            rng.gen_range(-8.0..8.0),
                        ]
                    })
                    .collect(),
                (0..n).map(|i| ["H", "C", "N", "O"][i % 4].to_string()).collect(),
            );
            cfg.energy = Some(rng.gen_range(-100.0..0.0));
            if rng.gen_bool(0.5) {
                cfg.forces = Some(
                    (0..n)
                        .map(|_| {
                            [
                                rng.gen_range(-3.0..3.0),
                                rng.gen_range(-3.0..3.0),
                                rng.gen_range(-3.0..3.0),
                            ]
                        })
                        .collect(),
                );
            }
            frames.push(cfg);
        }
        let text = write_extxyz_str(&frames);
        let back = parse_extxyz_str(&text).unwrap().frames;
        assert_eq!(frames.len(), back.len());
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.energy, b.energy, "energy must round-trip bitwise");
            assert_eq!(a.positions, b.positions, "positions must round-trip bitwise");
            assert_eq!(a.forces, b.forces, "forces must round-trip bitwise");
            assert_eq!(a.elements, b.elements);
        }
    }
}
