//! Linear-optics toolbox acting on photon OAM modes.
//!
//! Four photons start in paths `a`–`d` as two down-conversion pairs. A setup
//! is a list of elements applied in order; afterwards the state is
//! post-selected on one photon in each of `a`, `b`, `c` and the trigger
//! photon in `d` carrying OAM 0.
//!
//! Kernels (single-photon action, `l` = OAM):
//!
//! | element      | action                                           |
//! |--------------|--------------------------------------------------|
//! | `BS(x,y)`    | `x,l -> (y,l + i x,-l)/sqrt2`, same for `y -> x` |
//! | `HOLO(x,s)`  | `x,l -> x,l+s`                                   |
//! | `DP(x)`      | `x,l -> (-1)^l x,-l`                             |
//! | `REFL(x)`    | `x,l -> x,-l`                                    |
//!
//! Amplitudes are stored as Fock-state amplitudes; multiply-occupied modes
//! are converted to creation-operator coefficients before expansion so that
//! every element is unitary on the full space.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::state::{Ket, Mode, QuantumState, AMP_EPS};

pub const NUM_PATHS: u8 = 4;
pub const PATH_D: u8 = 3;
pub const PATH_NAMES: [char; 4] = ['a', 'b', 'c', 'd'];

pub const DEFAULT_L_MAX: i32 = 2;
pub const DEFAULT_L_HARD: i32 = 12;
pub const DEFAULT_L_SHIFT: i32 = 3;
pub const MIN_SETUP_LEN: usize = 6;
pub const MAX_SETUP_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    /// 50/50 beam splitter between two distinct paths (stored with `a < b`).
    BeamSplitter(u8, u8),
    Hologram(u8, i32),
    DovePrism(u8),
    Mirror(u8),
}

impl Element {
    pub fn beam_splitter(x: u8, y: u8) -> Result<Self> {
        if x == y || x >= NUM_PATHS || y >= NUM_PATHS {
            return Err(Error::Structural(format!("invalid beam splitter paths {x},{y}")));
        }
        Ok(Element::BeamSplitter(x.min(y), x.max(y)))
    }

    pub fn kind_index(&self) -> usize {
        match self {
            Element::BeamSplitter(..) => 0,
            Element::Hologram(..) => 1,
            Element::DovePrism(_) => 2,
            Element::Mirror(_) => 3,
        }
    }

    /// Images of a single photon in `mode` under this element.
    fn map_mode(&self, mode: Mode, out: &mut Vec<(Mode, Complex64)>) {
        out.clear();
        let one = Complex64::new(1.0, 0.0);
        let l = mode.oam;
        match *self {
            Element::BeamSplitter(x, y) if mode.path == x || mode.path == y => {
                let other = if mode.path == x { y } else { x };
                let h = std::f64::consts::FRAC_1_SQRT_2;
                out.push((Mode::new(other, l), Complex64::new(h, 0.0)));
                out.push((Mode::new(mode.path, -l), Complex64::new(0.0, h)));
            }
            Element::Hologram(p, s) if mode.path == p => out.push((Mode::new(p, l + s), one)),
            Element::DovePrism(p) if mode.path == p => {
                let sign = if l.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                out.push((Mode::new(p, -l), Complex64::new(sign, 0.0)));
            }
            Element::Mirror(p) if mode.path == p => out.push((Mode::new(p, -l), one)),
            _ => out.push((mode, one)),
        }
    }

    fn paths(&self) -> (u8, Option<u8>) {
        match *self {
            Element::BeamSplitter(x, y) => (x, Some(y)),
            Element::Hologram(p, _) | Element::DovePrism(p) | Element::Mirror(p) => (p, None),
        }
    }
}

fn path_name(p: u8) -> char {
    PATH_NAMES[p as usize]
}

fn parse_path(s: &str) -> Result<u8> {
    let s = s.trim();
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => PATH_NAMES
            .iter()
            .position(|&n| n == c)
            .map(|p| p as u8)
            .ok_or_else(|| Error::Parse(format!("unknown path '{s}'"))),
        _ => Err(Error::Parse(format!("unknown path '{s}'"))),
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Element::BeamSplitter(x, y) => write!(f, "BS({},{})", path_name(x), path_name(y)),
            Element::Hologram(p, s) => write!(f, "HOLO({},{:+})", path_name(p), s),
            Element::DovePrism(p) => write!(f, "DP({})", path_name(p)),
            Element::Mirror(p) => write!(f, "REFL({})", path_name(p)),
        }
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed element token '{token}'"));
        let open = token.find('(').ok_or_else(bad)?;
        if !token.ends_with(')') {
            return Err(bad());
        }
        let name = &token[..open];
        let args: Vec<&str> = token[open + 1..token.len() - 1].split(',').collect();
        match (name, args.as_slice()) {
            ("BS", [x, y]) => Element::beam_splitter(parse_path(x)?, parse_path(y)?),
            ("HOLO", [p, s]) => {
                let shift: i32 = s.trim().parse().map_err(|_| bad())?;
                if shift == 0 {
                    return Err(Error::Parse(format!("zero hologram shift in '{token}'")));
                }
                Ok(Element::Hologram(parse_path(p)?, shift))
            }
            ("DP", [p]) => Ok(Element::DovePrism(parse_path(p)?)),
            ("REFL", [p]) => Ok(Element::Mirror(parse_path(p)?)),
            _ => Err(bad()),
        }
    }
}

/// An ordered list of optical elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Setup {
    elements: Vec<Element>,
}

impl Setup {
    pub fn new(elements: Vec<Element>) -> Self {
        Setup { elements }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn tokens(&self) -> Vec<String> {
        self.elements.iter().map(|e| e.to_string()).collect()
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.elements.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let elements = s
            .split_whitespace()
            .map(Element::from_str)
            .collect::<Result<Vec<_>>>()?;
        Ok(Setup { elements })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Valid(QuantumState),
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub outcome: Outcome,
    pub postselect_prob: f64,
    /// Number of amplitude components dropped by the hard OAM cutoff.
    pub clipped: usize,
}

impl SimResult {
    pub fn state(&self) -> Option<&QuantumState> {
        match &self.outcome {
            Outcome::Valid(s) => Some(s),
            Outcome::Invalid => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Simulator {
    /// OAM cutoff of the down-conversion spectrum.
    pub l_max: i32,
    /// Hard cutoff applied during evolution.
    pub l_hard: i32,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator {
            l_max: DEFAULT_L_MAX,
            l_hard: DEFAULT_L_HARD,
        }
    }
}

/// Two independent pairs `sum |l,-l>_ab (x) |l',-l'>_cd`, uniform amplitudes.
pub fn initial_state(l_max: i32) -> QuantumState {
    let l_max = l_max.max(0);
    let count = (2 * l_max + 1) as f64;
    let amp = Complex64::new(1.0 / count, 0.0);
    let mut state = QuantumState::new(4);
    for l in -l_max..=l_max {
        for lp in -l_max..=l_max {
            let ket = Ket::new(vec![
                Mode::new(0, l),
                Mode::new(1, -l),
                Mode::new(2, lp),
                Mode::new(PATH_D, -lp),
            ]);
            state.add_term(ket, amp).expect("arity is fixed");
        }
    }
    state
}

fn multiplicity_weight(modes: &[Mode]) -> f64 {
    // sqrt(prod mult!) over runs of equal modes; modes are sorted.
    let mut weight = 1.0;
    let mut run = 1;
    for w in modes.windows(2) {
        if w[0] == w[1] {
            run += 1;
            weight *= run as f64;
        } else {
            run = 1;
        }
    }
    weight.sqrt()
}

impl Simulator {
    pub fn new(l_max: i32, l_hard: i32) -> Self {
        Simulator { l_max, l_hard }
    }

    pub fn initial_state(&self) -> QuantumState {
        initial_state(self.l_max)
    }

    /// Applies one element; returns the new state and the number of clipped
    /// components. The state is renormalized only when clipping occurred.
    pub fn apply_element(&self, state: &QuantumState, element: &Element) -> (QuantumState, usize) {
        let (p0, p1) = element.paths();
        let touches = |m: &Mode| m.path == p0 || Some(m.path) == p1;
        let mut out = QuantumState::new(state.photon_count());
        let mut clipped = 0;
        let mut images: Vec<Vec<(Mode, Complex64)>> = Vec::new();
        let mut buf = Vec::new();
        for (ket, amp) in state.iter() {
            let modes = ket.modes();
            if !modes.iter().any(touches) {
                out.add_term(ket.clone(), *amp).expect("arity preserved");
                continue;
            }
            let coef = amp / multiplicity_weight(modes);
            images.clear();
            for &m in modes {
                element.map_mode(m, &mut buf);
                images.push(buf.clone());
            }
            // Expand the product of single-photon images.
            let mut idx = vec![0usize; images.len()];
            loop {
                let mut factor = coef;
                let mut new_modes = Vec::with_capacity(images.len());
                let mut in_range = true;
                for (slot, &i) in idx.iter().enumerate() {
                    let (m, a) = images[slot][i];
                    if m.oam.abs() > self.l_hard {
                        in_range = false;
                    }
                    factor *= a;
                    new_modes.push(m);
                }
                if in_range {
                    let new_ket = Ket::new(new_modes);
                    let w = multiplicity_weight(new_ket.modes());
                    out.add_term(new_ket, factor * w).expect("arity preserved");
                } else {
                    clipped += 1;
                }
                // odometer increment
                let mut slot = 0;
                loop {
                    if slot == idx.len() {
                        break;
                    }
                    idx[slot] += 1;
                    if idx[slot] < images[slot].len() {
                        break;
                    }
                    idx[slot] = 0;
                    slot += 1;
                }
                if slot == idx.len() {
                    break;
                }
            }
        }
        if clipped > 0 && !out.is_empty() {
            out = out.normalize().expect("nonempty state");
        }
        (out, clipped)
    }

    /// Runs a setup and post-selects the three-photon state.
    pub fn run_setup(&self, setup: &Setup) -> SimResult {
        let mut state = self.initial_state();
        let mut clipped = 0;
        for e in setup.elements() {
            let (next, c) = self.apply_element(&state, e);
            state = next;
            clipped += c;
        }
        let mut selected = QuantumState::new(3);
        for (ket, amp) in state.iter() {
            let m = ket.modes();
            // sorted by path, so one photon per path means paths are 0,1,2,3 in order
            let one_each = m.len() == 4 && m.iter().enumerate().all(|(i, x)| x.path as usize == i);
            if one_each && m[3].oam == 0 {
                selected
                    .add_term(Ket::from_oam(&[m[0].oam, m[1].oam, m[2].oam]), *amp)
                    .expect("three photons");
            }
        }
        let prob = selected.norm_sqr();
        if selected.is_empty() || prob <= AMP_EPS * AMP_EPS {
            return SimResult {
                outcome: Outcome::Invalid,
                postselect_prob: 0.0,
                clipped,
            };
        }
        SimResult {
            outcome: Outcome::Valid(selected.normalize().expect("nonzero")),
            postselect_prob: prob.min(1.0),
            clipped,
        }
    }
}

/// Every element token the generator can emit with shifts up to `l_shift`,
/// in a fixed canonical order.
pub fn toolbox(l_shift: i32) -> Vec<Element> {
    let mut out = Vec::new();
    for x in 0..NUM_PATHS {
        for y in x + 1..NUM_PATHS {
            out.push(Element::BeamSplitter(x, y));
        }
    }
    for p in 0..NUM_PATHS {
        for s in (-l_shift..=l_shift).filter(|&s| s != 0) {
            out.push(Element::Hologram(p, s));
        }
    }
    for p in 0..NUM_PATHS {
        out.push(Element::DovePrism(p));
    }
    for p in 0..NUM_PATHS {
        out.push(Element::Mirror(p));
    }
    out
}

/// Uniformly samples element kinds and parameters; deterministic in `seed`.
pub fn random_setup(seed: u64, length_range: (usize, usize), l_shift: i32) -> Setup {
    let mut rng = rng::stream(seed, rng::Stream::Generation);
    let (lo, hi) = length_range;
    let len = rng.gen_range(lo..=hi.max(lo));
    let elements = (0..len)
        .map(|_| match rng.gen_range(0..4) {
            0 => {
                let x = rng.gen_range(0..NUM_PATHS);
                let mut y = rng.gen_range(0..NUM_PATHS - 1);
                if y >= x {
                    y += 1;
                }
                Element::BeamSplitter(x.min(y), x.max(y))
            }
            1 => {
                let p = rng.gen_range(0..NUM_PATHS);
                let mag = rng.gen_range(1..=l_shift.max(1));
                let shift = if rng.gen_bool(0.5) { mag } else { -mag };
                Element::Hologram(p, shift)
            }
            2 => Element::DovePrism(rng.gen_range(0..NUM_PATHS)),
            _ => Element::Mirror(rng.gen_range(0..NUM_PATHS)),
        })
        .collect();
    Setup::new(elements)
}
