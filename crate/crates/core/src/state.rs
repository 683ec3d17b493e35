//! Sparse multi-photon states.
//!
//! A state is a map from basis kets to complex amplitudes. During simulation
//! each photon carries a `(path, oam)` mode; after post-selection the paths
//! are the particle indices `0, 1, 2` and the state prints as bare OAM
//! triples, e.g. `0.50|0,0,0> + 0.50|1,0,1>`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Amplitudes with modulus at or below this are dropped.
pub const AMP_EPS: f64 = 1e-12;

/// Default relative singular-value threshold for Schmidt ranks.
pub const RANK_TOL: f64 = 1e-10;

const PATH_NAMES: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

/// One photon's mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mode {
    pub path: u8,
    pub oam: i32,
}

impl Mode {
    pub const fn new(path: u8, oam: i32) -> Self {
        Mode { path, oam }
    }
}

/// A basis ket: the photons' modes in canonical (path, oam) order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ket(Vec<Mode>);

impl Ket {
    pub fn new(mut modes: Vec<Mode>) -> Self {
        modes.sort_unstable();
        Ket(modes)
    }

    /// A post-selected ket: particle `i` sits in path `i` with the given OAM.
    pub fn from_oam(oams: &[i32]) -> Self {
        Ket(oams.iter().enumerate().map(|(i, &l)| Mode::new(i as u8, l)).collect())
    }

    pub fn modes(&self) -> &[Mode] {
        &self.0
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    /// True when photon `i` is alone in path `i`, i.e. a bare OAM tuple.
    pub fn is_bare(&self) -> bool {
        self.0.iter().enumerate().all(|(i, m)| m.path as usize == i)
    }

    pub fn oams(&self) -> impl Iterator<Item = i32> + '_ {
        self.0.iter().map(|m| m.oam)
    }
}

impl fmt::Display for Ket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bare = self.is_bare();
        f.write_str("|")?;
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            if bare {
                write!(f, "{}", m.oam)?;
            } else {
                let name = PATH_NAMES.get(m.path as usize).copied().unwrap_or('?');
                write!(f, "{}{}", name, m.oam)?;
            }
        }
        f.write_str(">")
    }
}

/// Pure state over a fixed number of photons.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    terms: BTreeMap<Ket, Complex64>,
    photon_count: usize,
}

impl QuantumState {
    pub fn new(photon_count: usize) -> Self {
        QuantumState {
            terms: BTreeMap::new(),
            photon_count,
        }
    }

    /// Builds a state from `(oam tuple, amplitude)` pairs in bare notation.
    pub fn from_oam_terms<'a, I>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [i32], Complex64)>,
    {
        let mut iter = terms.into_iter().peekable();
        let arity = iter.peek().map(|(k, _)| k.len()).unwrap_or(0);
        let mut state = QuantumState::new(arity);
        for (oams, amp) in iter {
            state.add_term(Ket::from_oam(oams), amp)?;
        }
        Ok(state)
    }

    pub fn photon_count(&self) -> usize {
        self.photon_count
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Ket, &Complex64)> {
        self.terms.iter()
    }

    pub fn amplitude(&self, ket: &Ket) -> Complex64 {
        self.terms.get(ket).copied().unwrap_or_default()
    }

    /// Accumulates `amp` onto `ket`, pruning the term if it cancels.
    pub fn add_term(&mut self, ket: Ket, amp: Complex64) -> Result<()> {
        if self.terms.is_empty() && self.photon_count == 0 {
            self.photon_count = ket.arity();
        }
        if ket.arity() != self.photon_count {
            return Err(Error::Structural(format!(
                "ket {} has {} photons, state has {}",
                ket,
                ket.arity(),
                self.photon_count
            )));
        }
        let entry = self.terms.entry(ket);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                if amp.norm() > AMP_EPS {
                    v.insert(amp);
                }
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let total = *o.get() + amp;
                if total.norm() > AMP_EPS {
                    *o.get_mut() = total;
                } else {
                    o.remove();
                }
            }
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.terms.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn scaled(&self, factor: Complex64) -> QuantumState {
        let mut out = QuantumState::new(self.photon_count);
        for (k, a) in &self.terms {
            let v = a * factor;
            if v.norm() > AMP_EPS {
                out.terms.insert(k.clone(), v);
            }
        }
        out
    }

    pub fn normalize(&self) -> Result<QuantumState> {
        let norm = self.norm_sqr().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Normalization);
        }
        let inv = 1.0 / norm;
        let mut out = QuantumState::new(self.photon_count);
        for (k, a) in &self.terms {
            out.terms.insert(k.clone(), a * inv);
        }
        Ok(out)
    }

    /// `<self|other>`, conjugate-linear in `self`.
    pub fn inner_product(&self, other: &QuantumState) -> Result<Complex64> {
        if !self.is_empty() && !other.is_empty() && self.photon_count != other.photon_count {
            return Err(Error::Structural(format!(
                "photon counts differ: {} vs {}",
                self.photon_count, other.photon_count
            )));
        }
        let (small, large, flip) = if self.len() <= other.len() {
            (self, other, false)
        } else {
            (other, self, true)
        };
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, a) in &small.terms {
            if let Some(b) = large.terms.get(k) {
                acc += if flip { b.conj() * a } else { a.conj() * b };
            }
        }
        Ok(acc)
    }

    /// Coefficient matrix with rows indexed by `particle`'s mode and columns
    /// by the joint mode of all other photons.
    pub fn bipartition_matrix(&self, particle: usize) -> Result<DMatrix<Complex64>> {
        if particle >= self.photon_count {
            return Err(Error::Structural(format!(
                "particle {particle} out of range for {} photons",
                self.photon_count
            )));
        }
        let mut rows: HashMap<Mode, usize> = HashMap::new();
        let mut cols: HashMap<Vec<Mode>, usize> = HashMap::new();
        let mut entries = Vec::with_capacity(self.terms.len());
        for (ket, amp) in &self.terms {
            let modes = ket.modes();
            let own = modes[particle];
            let rest: Vec<Mode> = modes
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != particle)
                .map(|(_, m)| *m)
                .collect();
            let nr = rows.len();
            let r = *rows.entry(own).or_insert(nr);
            let nc = cols.len();
            let c = *cols.entry(rest).or_insert(nc);
            entries.push((r, c, *amp));
        }
        let mut m = DMatrix::from_element(rows.len(), cols.len(), Complex64::new(0.0, 0.0));
        for (r, c, a) in entries {
            m[(r, c)] += a;
        }
        Ok(m)
    }

    /// Schmidt rank of `particle` against the rest: the number of singular
    /// values of the bipartition matrix above `tol` times the largest one.
    pub fn reduced_density_rank(&self, particle: usize, tol: f64) -> Result<usize> {
        let m = self.bipartition_matrix(particle)?;
        if m.is_empty() {
            return Ok(0);
        }
        let sv = m.singular_values();
        let max = sv.iter().cloned().fold(0.0_f64, f64::max);
        if max == 0.0 {
            return Ok(0);
        }
        Ok(sv.iter().filter(|&&s| s > tol * max).count())
    }
}

impl fmt::Display for QuantumState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (i, (ket, a)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if a.im.abs() <= AMP_EPS {
                write!(f, "{:.2}{}", a.re, ket)?;
            } else if a.re.abs() <= AMP_EPS {
                write!(f, "{:.2}i{}", a.im, ket)?;
            } else {
                write!(f, "({:.2}{:+.2}i){}", a.re, a.im, ket)?;
            }
        }
        Ok(())
    }
}
