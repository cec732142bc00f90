//! Generalized coupling: contraction paths taking products of irreps to a
//! requested output order.
//!
//! A path is an admissible chain of intermediate orders
//! `(L_2, ..., L_N = L_out)` obeying the triangle inequalities; its
//! coefficients are products of pairwise Clebsch-Gordan tensors contracted
//! over the intermediate components. Distinct chains give linearly
//! independent coefficient sets.

use std::collections::HashMap;

use super::cg::clebsch_gordan_real;
use crate::error::Result;

/// Coefficients below this magnitude are dropped from tables.
pub const COUPLING_DROP_TOL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct CouplingEntry {
    /// One `m` value per coupled factor, each in `-l_i..=l_i`.
    pub m: Vec<i8>,
    /// Output component `M` in `-l_out..=l_out`.
    pub m_out: i8,
    pub coeff: f64,
}

#[derive(Debug, Clone)]
pub struct CouplingPath {
    /// Intermediate chain `(L_2, ..., L_N)`; the last entry equals `l_out`.
    /// Empty for a single factor.
    pub chain: Vec<usize>,
    pub entries: Vec<CouplingEntry>,
}

#[derive(Debug, Clone)]
pub struct CouplingTable {
    pub ls: Vec<usize>,
    pub l_out: usize,
    pub paths: Vec<CouplingPath>,
}

impl CouplingTable {
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
    pub fn eta_count(&self) -> usize {
        self.paths.len()
    }
}

fn enumerate_chains(ls: &[usize], l_out: usize) -> Vec<Vec<usize>> {
    if ls.len() == 1 {
        return if ls[0] == l_out { vec![vec![]] } else { vec![] };
    }
    let mut chains = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    for l2 in ls[0].abs_diff(ls[1])..=ls[0] + ls[1] {
        stack.push((l2, vec![l2]));
    }
    while let Some((cur, chain)) = stack.pop() {
        let next_idx = chain.len() + 1; // index into ls of the next factor
        if next_idx == ls.len() {
            if cur == l_out {
                chains.push(chain);
            }
            continue;
        }
        let l_next = ls[next_idx];
        for l in cur.abs_diff(l_next)..=cur + l_next {
            let mut c = chain.clone();
            c.push(l);
            stack.push((l, c));
        }
    }
    chains.sort();
    chains
}

/// Enumerate every admissible chain for coupling the ordered factor list
/// `ls` to `l_out` and materialize the coefficient entries of each.
///
/// An empty table is a valid result: the combination contributes nothing.
pub fn generalized_coupling(ls: &[usize], l_out: usize) -> Result<CouplingTable> {
    assert!(!ls.is_empty(), "need at least one factor");
    let mut paths = Vec::new();
    for chain in enumerate_chains(ls, l_out) {
        if ls.len() == 1 {
            let l = ls[0];
            let entries = (-(l as i8)..=l as i8)
                .map(|m| CouplingEntry { m: vec![m], m_out: m, coeff: 1.0 })
                .collect();
            paths.push(CouplingPath { chain, entries });
            continue;
        }
        // Contract pairwise CG tensors along the chain, summing over the
        // intermediate components.
        let mut acc: HashMap<(Vec<i8>, i8), f64> = HashMap::new();
        let first = clebsch_gordan_real(ls[0], ls[1], chain[0])?;
        let l1 = ls[0] as i8;
        let l2 = ls[1] as i8;
        for m1 in -l1..=l1 {
            for m2 in -l2..=l2 {
                for mm in -(chain[0] as i8)..=chain[0] as i8 {
                    let c = first.get(m1 as isize, m2 as isize, mm as isize);
                    if c.abs() > 0.0 {
                        *acc.entry((vec![m1, m2], mm)).or_insert(0.0) += c;
                    }
                }
            }
        }
        for (step, &l_next) in ls.iter().enumerate().skip(2) {
            let l_prev = chain[step - 2];
            let l_cur = chain[step - 1];
            let cg = clebsch_gordan_real(l_prev, l_next, l_cur)?;
            let mut next: HashMap<(Vec<i8>, i8), f64> = HashMap::new();
            let ln = l_next as i8;
            for ((prefix, m_prev), c0) in &acc {
                for m_n in -ln..=ln {
                    for m_cur in -(l_cur as i8)..=l_cur as i8 {
                        let c = cg.get(*m_prev as isize, m_n as isize, m_cur as isize);
                        if c == 0.0 {
                            continue;
                        }
                        let mut key = prefix.clone();
                        key.push(m_n);
                        *next.entry((key, m_cur)).or_insert(0.0) += c0 * c;
                    }
                }
            }
            acc = next;
        }
        let mut entries: Vec<CouplingEntry> = acc
            .into_iter()
            .filter(|(_, c)| c.abs() > COUPLING_DROP_TOL)
            .map(|((m, m_out), coeff)| CouplingEntry { m, m_out, coeff })
            .collect();
        entries.sort_by(|a, b| (&a.m, a.m_out).cmp(&(&b.m, b.m_out)));
        paths.push(CouplingPath { chain, entries });
    }
    Ok(CouplingTable { ls: ls.to_vec(), l_out, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_factor_identity_path() {
        let t = generalized_coupling(&[2], 2).unwrap();
        assert_eq!(t.eta_count(), 1);
        assert!(t.paths[0].chain.is_empty());
        for e in &t.paths[0].entries {
            assert_eq!(e.m[0], e.m_out);
            assert_abs_diff_eq!(e.coeff, 1.0);
        }
        let none = generalized_coupling(&[2], 1).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn pair_of_vectors_to_scalar_has_one_path() {
        let t = generalized_coupling(&[1, 1], 0).unwrap();
        assert_eq!(t.eta_count(), 1);
    }

    #[test]
    fn three_vectors_to_vector_has_three_paths() {
        let t = generalized_coupling(&[1, 1, 1], 1).unwrap();
        assert_eq!(t.eta_count(), 3);
        let mut intermediates: Vec<usize> = t.paths.iter().map(|p| p.chain[0]).collect();
        intermediates.sort();
        assert_eq!(intermediates, vec![0, 1, 2]);
    }

    #[test]
    fn eta_counts_match_brute_force_chain_enumeration() {
        // independent brute force: count tuples (L_2..L_{N-1}) in the full
        // range that satisfy every triangle inequality
        use crate::so3::cg::triangle_ok;
        fn brute(ls: &[usize], l_out: usize) -> usize {
            if ls.len() == 1 {
                return usize::from(ls[0] == l_out);
            }
            let max_l: usize = ls.iter().sum();
            let n_mid = ls.len() - 2;
            let mut count = 0;
            let mut idx = vec![0usize; n_mid];
            loop {
                let mut chain: Vec<usize> = idx.clone();
                chain.push(l_out);
                let mut ok = triangle_ok(ls[0], ls[1], chain[0]);
                for i in 1..chain.len() {
                    ok &= triangle_ok(chain[i - 1], ls[i + 1], chain[i]);
                }
                if ok {
                    count += 1;
                }
                // odometer over the mid indices
                let mut carry = true;
                for v in idx.iter_mut() {
                    if carry {
                        *v += 1;
                        if *v > max_l {
                            *v = 0;
                        } else {
                            carry = false;
                        }
                    }
                }
                if carry {
                    break;
                }
            }
            count
        }
        for nu in 1..=3usize {
            let mut shapes: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..nu {
                let mut next = Vec::new();
                for s in &shapes {
                    for l in 0..=2usize {
                        let mut s2 = s.clone();
                        s2.push(l);
                        next.push(s2);
                    }
                }
                shapes = next;
            }
            for ls in shapes {
                for l_out in 0..=3usize {
                    let t = generalized_coupling(&ls, l_out).unwrap();
                    assert_eq!(
                        t.eta_count(),
                        brute(&ls, l_out),
                        "eta mismatch for ls={ls:?} l_out={l_out}"
                    );
                }
            }
        }
    }

    #[test]
    fn pairwise_case_reduces_to_plain_cg() {
        for (l1, l2, l_out) in [(1, 1, 0), (1, 1, 2), (2, 1, 1), (2, 2, 3)] {
            let t = generalized_coupling(&[l1, l2], l_out).unwrap();
            assert_eq!(t.eta_count(), 1);
            let cg = clebsch_gordan_real(l1, l2, l_out).unwrap();
            let mut n_nonzero = 0;
            for e in &t.paths[0].entries {
                let want = cg.get(e.m[0] as isize, e.m[1] as isize, e.m_out as isize);
                assert_abs_diff_eq!(e.coeff, want, epsilon = 1e-14);
                n_nonzero += 1;
            }
            let direct_nonzero =
                cg.coeffs.iter().filter(|c| c.abs() > COUPLING_DROP_TOL).count();
            assert_eq!(n_nonzero, direct_nonzero);
        }
    }

    #[test]
    fn paths_are_linearly_independent() {
        for (ls, l_out) in [(vec![1, 1, 1], 1usize), (vec![2, 1, 1], 2), (vec![1, 2, 1], 0)] {
            let t = generalized_coupling(&ls, l_out).unwrap();
            let n = t.eta_count();
            if n < 2 {
                continue;
            }
            // Gram matrix of the coefficient vectors must be full rank.
            let dim: usize = ls.iter().map(|l| 2 * l + 1).product::<usize>() * (2 * l_out + 1);
            let flat_index = |e: &CouplingEntry| -> usize {
                let mut idx = 0;
                for (i, &l) in ls.iter().enumerate() {
                    idx = idx * (2 * l + 1) + (e.m[i] + l as i8) as usize;
                }
                idx * (2 * l_out + 1) + (e.m_out + l_out as i8) as usize
            };
            let mut vecs = vec![vec![0.0; dim]; n];
            for (p, path) in t.paths.iter().enumerate() {
                for e in &path.entries {
                    vecs[p][flat_index(e)] = e.coeff;
                }
            }
            let gram = nalgebra::DMatrix::from_fn(n, n, |i, j| {
                vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum::<f64>()
            });
            let det = gram.determinant();
            assert!(det.abs() > 1e-8, "paths linearly dependent for {ls:?} -> {l_out}");
        }
    }
}
