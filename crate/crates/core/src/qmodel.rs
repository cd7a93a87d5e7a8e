//! Closed-form predictions for the energy-time entangled two-photon state.
//!
//! For matched-path (SS/LL) coincidences the state behaves like a maximally
//! entangled qubit pair whose relative phase is set by the two long-arm
//! phase shifts, giving
//!
//! ```text
//! P(x, y) = ¼ · [1 + s·V·cos Δ],   s = +1 if x = y else −1
//! E       = V · cos Δ
//! ```
//!
//! where `Δ = φa − φb` or `φa + φb` depending on [`PhaseConvention`].

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, SQRT_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A local long-arm phase shift in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseSetting(f64);

impl PhaseSetting {
    pub fn new(radians: f64) -> Result<Self> {
        if !radians.is_finite() {
            return Err(Error::Contract(format!("phase {radians} is not finite")));
        }
        Ok(Self(radians))
    }

    pub const fn radians(self) -> f64 {
        self.0
    }

    /// Representative in `[0, 2π)`.
    pub fn canonical(self) -> f64 {
        let r = self.0.rem_euclid(TAU);
        if r >= TAU {
            0.0
        } else {
            r
        }
    }

    /// Equality modulo 2π up to `tol`.
    pub fn same_as(self, other: PhaseSetting, tol: f64) -> bool {
        let d = (self.0 - other.0).rem_euclid(TAU);
        d <= tol || TAU - d <= tol
    }
}

/// Interference visibility, a fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Visibility(f64);

impl Visibility {
    pub const ONE: Visibility = Visibility(1.0);
    pub const ZERO: Visibility = Visibility(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Contract(format!(
                "visibility {value} outside [0, 1]"
            )));
        }
        Ok(Self(value))
    }

    pub const fn value(self) -> f64 {
        self.0
    }

    /// Product of two visibility factors (always stays in range).
    pub fn scaled(self, factor: f64) -> Result<Self> {
        Self::new(self.0 * factor)
    }
}

impl TryFrom<f64> for Visibility {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Visibility::new(v)
    }
}

impl From<Visibility> for f64 {
    fn from(v: Visibility) -> f64 {
        v.0
    }
}

/// Whether the two-photon phase is `φa − φb` or `φa + φb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseConvention {
    #[default]
    Difference,
    Sum,
}

impl PhaseConvention {
    pub fn effective_phase(self, alice: PhaseSetting, bob: PhaseSetting) -> f64 {
        match self {
            PhaseConvention::Difference => alice.0 - bob.0,
            PhaseConvention::Sum => alice.0 + bob.0,
        }
    }

    /// Sign Bob's phase enters the effective phase with.
    pub fn bob_sign(self) -> f64 {
        match self {
            PhaseConvention::Difference => -1.0,
            PhaseConvention::Sum => 1.0,
        }
    }
}

/// One of the two output ports of an interferometer (`1` or `2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    D1,
    D2,
}

impl Detector {
    pub const BOTH: [Detector; 2] = [Detector::D1, Detector::D2];

    pub fn from_index(index: u8) -> Result<Self> {
        match index {
            1 => Ok(Detector::D1),
            2 => Ok(Detector::D2),
            other => Err(Error::Contract(format!(
                "detector index {other} is not 1 or 2"
            ))),
        }
    }

    pub const fn index(self) -> u8 {
        match self {
            Detector::D1 => 1,
            Detector::D2 => 2,
        }
    }

    /// The ±1 outcome conventionally attached to this port.
    pub const fn outcome(self) -> i8 {
        match self {
            Detector::D1 => 1,
            Detector::D2 => -1,
        }
    }
}

/// Alice's two and Bob's two settings of a CHSH experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingsQuad {
    pub a0: PhaseSetting,
    pub a1: PhaseSetting,
    pub b0: PhaseSetting,
    pub b1: PhaseSetting,
}

impl SettingsQuad {
    pub fn new(a0: f64, a1: f64, b0: f64, b1: f64) -> Result<Self> {
        Ok(Self {
            a0: PhaseSetting::new(a0)?,
            a1: PhaseSetting::new(a1)?,
            b0: PhaseSetting::new(b0)?,
            b1: PhaseSetting::new(b1)?,
        })
    }

    /// Settings whose effective phases are `−π/4, π/4, π/4, 3π/4` for the
    /// pairs `(a0,b0), (a0,b1), (a1,b0), (a1,b1)` under `conv`.
    pub fn canonical(conv: PhaseConvention) -> Self {
        let s = -conv.bob_sign();
        SettingsQuad {
            a0: PhaseSetting(0.0),
            a1: PhaseSetting(FRAC_PI_2),
            b0: PhaseSetting(s * FRAC_PI_4),
            b1: PhaseSetting(-s * FRAC_PI_4),
        }
    }

    /// The four setting pairs in CHSH order; the last enters with a minus
    /// sign.
    pub fn pairs(&self) -> [(PhaseSetting, PhaseSetting); 4] {
        [
            (self.a0, self.b0),
            (self.a0, self.b1),
            (self.a1, self.b0),
            (self.a1, self.b1),
        ]
    }
}

/// CHSH signs matching [`SettingsQuad::pairs`].
pub const CHSH_SIGNS: [f64; 4] = [1.0, 1.0, 1.0, -1.0];

/// Probability of a coincidence between Alice's detector `x` and Bob's
/// detector `y` (indices 1 or 2).
pub fn coincidence_probability(
    x: u8,
    y: u8,
    alice: PhaseSetting,
    bob: PhaseSetting,
    visibility: Visibility,
    conv: PhaseConvention,
) -> Result<f64> {
    let x = Detector::from_index(x)?;
    let y = Detector::from_index(y)?;
    Ok(joint_probability(x, y, alice, bob, visibility, conv))
}

pub fn joint_probability(
    x: Detector,
    y: Detector,
    alice: PhaseSetting,
    bob: PhaseSetting,
    visibility: Visibility,
    conv: PhaseConvention,
) -> f64 {
    let sign = if x == y { 1.0 } else { -1.0 };
    0.25 * (1.0 + sign * visibility.0 * conv.effective_phase(alice, bob).cos())
}

pub fn correlation(
    alice: PhaseSetting,
    bob: PhaseSetting,
    visibility: Visibility,
    conv: PhaseConvention,
) -> f64 {
    visibility.0 * conv.effective_phase(alice, bob).cos()
}

/// Four-term CHSH value `E(a0,b0) + E(a0,b1) + E(a1,b0) − E(a1,b1)`.
pub fn chsh_value(quad: &SettingsQuad, visibility: Visibility, conv: PhaseConvention) -> f64 {
    quad.pairs()
        .iter()
        .zip(CHSH_SIGNS)
        .map(|(&(a, b), s)| s * correlation(a, b, visibility, conv))
        .sum()
}

/// The symmetric three-plus-one form `3·E(φa, φb) − E(φa′, φb)` used when
/// Bob's phase is held fixed and Alice's is swept.
pub fn chsh_fixed_bob(
    alice: PhaseSetting,
    alice_prime: PhaseSetting,
    bob: PhaseSetting,
    visibility: Visibility,
    conv: PhaseConvention,
) -> f64 {
    3.0 * correlation(alice, bob, visibility, conv) - correlation(alice_prime, bob, visibility, conv)
}

/// Visibility at which the canonical quad reaches the local bound `S = 2`.
pub fn critical_visibility() -> Visibility {
    Visibility(FRAC_1_SQRT_2)
}

/// Tsirelson's bound `2√2`.
pub const TSIRELSON: f64 = 2.0 * SQRT_2;

/// CHSH bound for local realistic models.
pub const LOCAL_BOUND: f64 = 2.0;
