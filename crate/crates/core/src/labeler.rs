//! Ground-truth targets for simulated setups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{Outcome, SimResult};
use crate::state::{QuantumState, RANK_TOL};

/// Relative tolerance for the equal-modulus test.
pub const MODULUS_TOL: f64 = 1e-9;

/// Schmidt rank vector sorted so that `n >= m >= k >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[u32; 3]", try_from = "[u32; 3]")]
pub struct SrvLabel {
    pub n: u32,
    pub m: u32,
    pub k: u32,
}

impl SrvLabel {
    pub fn new(n: u32, m: u32, k: u32) -> Result<Self> {
        if n >= m && m >= k && k >= 1 {
            Ok(SrvLabel { n, m, k })
        } else {
            Err(Error::Structural(format!(
                "SRV ({n},{m},{k}) is not non-increasing and positive"
            )))
        }
    }

    /// Sorts arbitrary ranks into a label.
    pub fn from_unsorted(mut ranks: [u32; 3]) -> Result<Self> {
        ranks.sort_unstable_by(|a, b| b.cmp(a));
        SrvLabel::new(ranks[0], ranks[1], ranks[2])
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.n as f64, self.m as f64, self.k as f64]
    }
}

impl From<SrvLabel> for [u32; 3] {
    fn from(l: SrvLabel) -> Self {
        [l.n, l.m, l.k]
    }
}

impl TryFrom<[u32; 3]> for SrvLabel {
    type Error = Error;
    fn try_from(v: [u32; 3]) -> Result<Self> {
        SrvLabel::new(v[0], v[1], v[2])
    }
}

impl std::fmt::Display for SrvLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.n, self.m, self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLabel {
    pub y_e: bool,
    pub srv: Option<SrvLabel>,
    /// Leading Schmidt rank; 0 marks an invalid state, 1 a product state.
    pub fold_rank: u32,
}

pub fn schmidt_rank_vector(state: &QuantumState, tol: f64) -> Result<SrvLabel> {
    if state.photon_count() != 3 {
        return Err(Error::Structural(format!(
            "Schmidt rank vector needs 3 photons, got {}",
            state.photon_count()
        )));
    }
    if state.is_empty() {
        return Err(Error::Structural("empty state has no SRV".into()));
    }
    let mut ranks = [0u32; 3];
    for (p, r) in ranks.iter_mut().enumerate() {
        *r = state.reduced_density_rank(p, tol)? as u32;
    }
    SrvLabel::from_unsorted(ranks)
}

fn equal_moduli(state: &QuantumState, tol: f64) -> bool {
    let mut moduli = state.iter().map(|(_, a)| a.norm());
    let Some(first) = moduli.next() else {
        return false;
    };
    let (lo, hi) = moduli.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo <= tol * hi
}

/// All amplitudes share one modulus and the leading Schmidt rank is >= 2.
pub fn is_maximally_entangled(state: &QuantumState, tol: f64) -> bool {
    if state.len() < 2 || !equal_moduli(state, tol) {
        return false;
    }
    schmidt_rank_vector(state, RANK_TOL).map(|s| s.n >= 2).unwrap_or(false)
}

pub fn label(result: &SimResult) -> SampleLabel {
    match &result.outcome {
        Outcome::Invalid => SampleLabel {
            y_e: false,
            srv: None,
            fold_rank: 0,
        },
        Outcome::Valid(state) => label_state(state),
    }
}

pub fn label_state(state: &QuantumState) -> SampleLabel {
    let Ok(srv) = schmidt_rank_vector(state, RANK_TOL) else {
        return SampleLabel {
            y_e: false,
            srv: None,
            fold_rank: 0,
        };
    };
    if srv.n < 2 {
        return SampleLabel {
            y_e: false,
            srv: None,
            fold_rank: 1,
        };
    }
    SampleLabel {
        y_e: equal_moduli(state, MODULUS_TOL),
        srv: Some(srv),
        fold_rank: srv.n,
    }
}
