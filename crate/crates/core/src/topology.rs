//! Interferometer geometries as routing maps from path choices to
//! `(party, delay)` arrivals, plus time-slot classification of
//! coincidences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Picoseconds; the integer time base of every stream.
pub type Picos = i64;

pub fn secs_to_ps(seconds: f64) -> Picos {
    (seconds * 1e12).round() as Picos
}

pub fn ps_to_secs(ps: Picos) -> f64 {
    ps as f64 * 1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// One unbalanced interferometer per party.
    Franson,
    /// Cross-linked arms: mismatched paths end at the same party.
    Hug,
}

impl std::str::FromStr for Geometry {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "franson" => Ok(Geometry::Franson),
            "hug" => Ok(Geometry::Hug),
            other => Err(Error::config("geometry", format!("unknown geometry `{other}`"))),
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Geometry::Franson => "franson",
            Geometry::Hug => "hug",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Path {
    S,
    L,
}

impl Path {
    pub fn flipped(self) -> Path {
        match self {
            Path::S => Path::L,
            Path::L => Path::S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathChoice {
    pub photon1: Path,
    pub photon2: Path,
}

impl PathChoice {
    pub const ALL: [PathChoice; 4] = [
        PathChoice::new(Path::S, Path::S),
        PathChoice::new(Path::S, Path::L),
        PathChoice::new(Path::L, Path::S),
        PathChoice::new(Path::L, Path::L),
    ];

    pub const fn new(photon1: Path, photon2: Path) -> Self {
        Self { photon1, photon2 }
    }

    pub fn is_matched(self) -> bool {
        self.photon1 == self.photon2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    /// Extra delay of a long arm over a short one, seconds.
    pub delta_t: f64,
    /// Residual `|(L_A − S_A) − (L_B − S_B)|`, meters.
    pub imbalance: f64,
    /// Single-photon coherence length, meters.
    pub coherence_length: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            delta_t: 10e-9,
            imbalance: 0.0,
            coherence_length: 1e-3,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::config("arms.delta_t", "must be positive"));
        }
        if !(self.imbalance >= 0.0 && self.imbalance.is_finite()) {
            return Err(Error::config("arms.imbalance", "must be non-negative"));
        }
        if !(self.coherence_length > 0.0 && self.coherence_length.is_finite()) {
            return Err(Error::config("arms.coherence_length", "must be positive"));
        }
        Ok(())
    }

    pub fn delta_t_ps(&self) -> Picos {
        secs_to_ps(self.delta_t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalOutcome {
    pub photon1_party: Party,
    pub photon2_party: Party,
    /// Seconds; either `0` or `delta_t`.
    pub photon1_delay: f64,
    pub photon2_delay: f64,
}

impl ArrivalOutcome {
    pub fn cross_party(&self) -> bool {
        self.photon1_party != self.photon2_party
    }
}

fn delay(path: Path, arms: &ArmConfig) -> f64 {
    match path {
        Path::S => 0.0,
        Path::L => arms.delta_t,
    }
}

/// Where each photon of a pair ends up. Settings play no role here.
pub fn route(geometry: Geometry, paths: PathChoice, arms: &ArmConfig) -> ArrivalOutcome {
    match geometry {
        Geometry::Franson => ArrivalOutcome {
            photon1_party: Party::Alice,
            photon2_party: Party::Bob,
            photon1_delay: delay(paths.photon1, arms),
            photon2_delay: delay(paths.photon2, arms),
        },
        Geometry::Hug => ArrivalOutcome {
            photon1_party: match paths.photon1 {
                Path::S => Party::Alice,
                Path::L => Party::Bob,
            },
            photon2_party: match paths.photon2 {
                Path::S => Party::Bob,
                Path::L => Party::Alice,
            },
            photon1_delay: delay(paths.photon1, arms),
            photon2_delay: delay(paths.photon2, arms),
        },
    }
}

/// Time-slot class of an Alice–Bob coincidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotClass {
    /// Central slot; SS and LL are indistinguishable in time.
    Matched,
    /// Bob's detection one arm delay after Alice's.
    LS,
    /// Bob's detection one arm delay before Alice's.
    SL,
    Accidental,
}

impl SlotClass {
    pub fn label(self) -> &'static str {
        match self {
            SlotClass::Matched => "matched",
            SlotClass::LS => "LS",
            SlotClass::SL => "SL",
            SlotClass::Accidental => "accidental",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "matched" => SlotClass::Matched,
            "LS" => SlotClass::LS,
            "SL" => SlotClass::SL,
            "accidental" => SlotClass::Accidental,
            _ => return None,
        })
    }

    pub fn is_mismatched(self) -> bool {
        matches!(self, SlotClass::LS | SlotClass::SL)
    }
}

/// Checks that three slots of full width `window` do not overlap.
pub fn check_resolvable(delta_t_ps: Picos, window_ps: Picos) -> Result<()> {
    if window_ps <= 0 {
        return Err(Error::config("tagger.window", "must be positive"));
    }
    if 2 * window_ps >= delta_t_ps {
        return Err(Error::config(
            "tagger.window",
            format!(
                "window {window_ps} ps must be below delta_t/2 = {} ps for resolvable slots",
                delta_t_ps as f64 / 2.0
            ),
        ));
    }
    Ok(())
}

/// Integer-picosecond slot classification; `delta = t_Bob − t_Alice`.
/// Slot acceptance is `|delta − center| ≤ window/2`.
pub fn classify_slot_ps(delta: Picos, delta_t: Picos, window: Picos) -> Result<SlotClass> {
    check_resolvable(delta_t, window)?;
    Ok(classify_unchecked(delta, delta_t, window))
}

pub(crate) fn classify_unchecked(delta: Picos, delta_t: Picos, window: Picos) -> SlotClass {
    let within = |center: Picos| 2 * (delta - center).abs() <= window;
    if within(0) {
        SlotClass::Matched
    } else if within(delta_t) {
        SlotClass::LS
    } else if within(-delta_t) {
        SlotClass::SL
    } else {
        SlotClass::Accidental
    }
}

/// Seconds-valued front end of [`classify_slot_ps`].
pub fn classify_slot(delta_arrival: f64, arms: &ArmConfig, window: f64) -> Result<SlotClass> {
    classify_slot_ps(secs_to_ps(delta_arrival), arms.delta_t_ps(), secs_to_ps(window))
}

/// Gaussian coherence envelope `exp(−(imbalance/ℓc)²)` multiplying the
/// two-photon visibility.
pub fn indistinguishability_factor(arms: &ArmConfig) -> f64 {
    let x = arms.imbalance / arms.coherence_length;
    (-x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arms() -> ArmConfig {
        ArmConfig::default()
    }

    #[test]
    fn hug_routes_mixed_paths_to_one_party() {
        let out = route(Geometry::Hug, PathChoice::new(Path::S, Path::L), &arms());
        assert_eq!(out.photon1_party, Party::Alice);
        assert_eq!(out.photon2_party, Party::Alice);
        assert_eq!((out.photon1_delay, out.photon2_delay), (0.0, 10e-9));

        let out = route(Geometry::Hug, PathChoice::new(Path::S, Path::S), &arms());
        assert_eq!((out.photon1_party, out.photon2_party), (Party::Alice, Party::Bob));
        assert_eq!((out.photon1_delay, out.photon2_delay), (0.0, 0.0));
    }

    #[test]
    fn franson_keeps_parties_fixed() {
        let out = route(Geometry::Franson, PathChoice::new(Path::S, Path::L), &arms());
        assert_eq!((out.photon1_party, out.photon2_party), (Party::Alice, Party::Bob));
        assert_eq!((out.photon1_delay, out.photon2_delay), (0.0, 10e-9));
    }

    #[test]
    fn geometry_invariants() {
        let a = arms();
        let mut franson_shifted = 0;
        for pc in PathChoice::ALL {
            let hug = route(Geometry::Hug, pc, &a);
            if pc.is_matched() {
                assert!(hug.cross_party());
                assert_eq!(hug.photon1_delay, hug.photon2_delay);
            } else {
                assert!(!hug.cross_party());
            }
            let fr = route(Geometry::Franson, pc, &a);
            assert!(fr.cross_party());
            if (fr.photon2_delay - fr.photon1_delay).abs() == a.delta_t {
                franson_shifted += 1;
            }
        }
        assert_eq!(franson_shifted, 2);
    }

    #[test]
    fn slot_examples() {
        let a = arms();
        assert_eq!(classify_slot(0.0, &a, 1e-9).unwrap(), SlotClass::Matched);
        assert_eq!(classify_slot(10e-9, &a, 1e-9).unwrap(), SlotClass::LS);
        assert_eq!(classify_slot(-10e-9, &a, 1e-9).unwrap(), SlotClass::SL);
        assert_eq!(classify_slot(4e-9, &a, 1e-9).unwrap(), SlotClass::Accidental);
        // slot edges are inclusive
        assert_eq!(classify_slot(0.5e-9, &a, 1e-9).unwrap(), SlotClass::Matched);
        assert_eq!(classify_slot(0.501e-9, &a, 1e-9).unwrap(), SlotClass::Accidental);
    }

    #[test]
    fn unresolvable_window_rejected() {
        let err = classify_slot(0.0, &arms(), 5e-9).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn envelope_values() {
        let mut a = arms();
        assert_eq!(indistinguishability_factor(&a), 1.0);
        a.imbalance = 10.0 * a.coherence_length;
        assert!(indistinguishability_factor(&a) < 0.01);
        a.imbalance = a.coherence_length;
        let f = indistinguishability_factor(&a);
        assert!((f - (-1.0f64).exp()).abs() < 1e-15);
        assert!(f > 0.0 && f < 1.0);
    }

    proptest! {
        #[test]
        fn classification_is_total(delta in -100_000i64..100_000) {
            // exactly one class per delta; matching is exhaustive over the enum
            let c = classify_slot_ps(delta, 10_000, 1_000).unwrap();
            let hits = [0i64, 10_000, -10_000].iter().filter(|&&c| 2 * (delta - c).abs() <= 1_000).count();
            prop_assert!(hits <= 1);
            prop_assert_eq!(hits == 0, c == SlotClass::Accidental);
        }

        #[test]
        fn envelope_is_monotone(x in 0.0..20.0f64, dx in 0.0..5.0f64) {
            let a = ArmConfig { imbalance: x * 1e-3, ..ArmConfig::default() };
            let b = ArmConfig { imbalance: (x + dx) * 1e-3, ..ArmConfig::default() };
            prop_assert!(indistinguishability_factor(&b) <= indistinguishability_factor(&a));
        }
    }
}
