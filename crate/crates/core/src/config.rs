//! Run configuration: a sectioned TOML file (JSON accepted) in
//! human units, resolved into the simulator's SI parameter sets.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lhv::strategy_by_name;
use crate::lockbox::{DriftModel, DriftProcess, LockSettings, PidParams, ReferenceParams, Setpoint};
use crate::photonics::{
    calibrate_pair_rate, ChannelParams, DetectorParams, QuantumParams, Sampling, SimulationConfig, SourceMode,
    SourceParams, SyncParams,
};
use crate::qmodel::{PhaseConvention, SettingsQuad, Visibility};
use crate::topology::{check_resolvable, secs_to_ps, ArmConfig, Geometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// `quantum` or `lhv:<strategy>`.
    pub mode: String,
    pub geometry: Geometry,
    pub convention: PhaseConvention,
    pub sampling: Sampling,
    pub source: SourceSection,
    pub arms: ArmsSection,
    pub channel: ChannelSection,
    pub detector: DetectorSection,
    pub tagger: TaggerSection,
    pub dephasing: DephasingSection,
    pub lock: LockSection,
    pub measurement: MeasurementSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 1,
            mode: "quantum".into(),
            geometry: Geometry::Hug,
            convention: PhaseConvention::Difference,
            sampling: Sampling::Thinned,
            source: SourceSection::default(),
            arms: ArmsSection::default(),
            channel: ChannelSection::default(),
            detector: DetectorSection::default(),
            tagger: TaggerSection::default(),
            dephasing: DephasingSection::default(),
            lock: LockSection::default(),
            measurement: MeasurementSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    /// Pairs per second; exclusive with `target_alice_singles`.
    pub pair_rate: Option<f64>,
    /// Recorded counts per second on each Alice detector; 300,000 when
    /// neither rate field is set.
    pub target_alice_singles: Option<f64>,
    pub pump_power_mw: f64,
    pub wavelength_nm: f64,
    pub visibility: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            pair_rate: None,
            target_alice_singles: None,
            pump_power_mw: 4.0,
            wavelength_nm: 806.0,
            visibility: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmsSection {
    pub delta_t_ns: f64,
    pub imbalance_mm: f64,
    pub coherence_length_mm: f64,
    /// Extra source-to-Bob propagation delay.
    pub bob_link_delay_us: f64,
}

impl Default for ArmsSection {
    fn default() -> Self {
        ArmsSection { delta_t_ns: 10.0, imbalance_mm: 0.0, coherence_length_mm: 1.0, bob_link_delay_us: 18.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub loss_alice_db: f64,
    pub loss_bob_db: f64,
    pub filter_transmission: f64,
    pub collection_efficiency: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = ChannelParams::default();
        ChannelSection {
            loss_alice_db: c.loss_alice_db,
            loss_bob_db: c.loss_bob_db,
            filter_transmission: c.filter_transmission,
            collection_efficiency: c.collection_efficiency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub efficiency: f64,
    pub dark_rate: f64,
    /// Gaussian σ.
    pub jitter_ps: f64,
    pub dead_time_ns: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorParams::default();
        DetectorSection {
            efficiency: d.efficiency,
            dark_rate: d.dark_rate,
            jitter_ps: d.jitter_sigma * 1e12,
            dead_time_ns: d.dead_time * 1e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerSection {
    /// Full acceptance width.
    pub window_ns: f64,
    pub sync_bin_ps: f64,
    pub sync_span_us: f64,
    pub sync_pulses: usize,
    pub sync_loss: f64,
    pub sync_jitter_ps: f64,
    /// Center of the off-peak window used to measure accidentals.
    pub accidental_delay_ns: f64,
}

impl Default for TaggerSection {
    fn default() -> Self {
        TaggerSection {
            window_ns: 1.0,
            sync_bin_ps: 100.0,
            sync_span_us: 100.0,
            sync_pulses: 10_000,
            sync_loss: 0.1,
            sync_jitter_ps: 20.0,
            accidental_delay_ns: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DephasingSection {
    /// Gaussian phase spread of the unstabilized interferometer.
    pub phase_blur_rad: f64,
}

impl Default for DephasingSection {
    fn default() -> Self {
        DephasingSection { phase_blur_rad: crate::photonics::DEFAULT_PHASE_BLUR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockSection {
    pub enabled: bool,
    pub duration_s: f64,
    /// `random-walk` or `ou`.
    pub drift_model: String,
    pub diffusion: f64,
    pub reversion_rate: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub loop_rate_hz: f64,
    pub bandwidth_hz: f64,
    pub actuator_range_rad: f64,
    pub highpass_cutoff_hz: f64,
    /// `+pi/4` or `-pi/4`.
    pub setpoint: String,
    pub v_min: f64,
    pub v_max: f64,
    pub speckle_bandwidth_hz: f64,
    pub trace_csv: bool,
}

impl Default for LockSection {
    fn default() -> Self {
        let s = LockSettings::default();
        LockSection {
            enabled: true,
            duration_s: s.duration,
            drift_model: "random-walk".into(),
            diffusion: s.drift.diffusion,
            reversion_rate: 10.0,
            kp: s.pid.kp,
            ki: s.pid.ki,
            kd: s.pid.kd,
            loop_rate_hz: s.pid.loop_rate,
            bandwidth_hz: s.pid.bandwidth,
            actuator_range_rad: s.pid.actuator_range,
            highpass_cutoff_hz: s.pid.highpass_cutoff,
            setpoint: "+pi/4".into(),
            v_min: s.reference.v_min,
            v_max: s.reference.v_max,
            speckle_bandwidth_hz: s.reference.bandwidth,
            trace_csv: false,
        }
    }
}

impl LockSection {
    pub fn settings(&self) -> Result<LockSettings> {
        let model = match self.drift_model.as_str() {
            "random-walk" => DriftModel::RandomWalk,
            "ou" => DriftModel::Ou { reversion_rate: self.reversion_rate },
            other => return Err(Error::config("lock.drift_model", format!("unknown model `{other}` (random-walk, ou)"))),
        };
        let setpoint = match self.setpoint.as_str() {
            "+pi/4" => Setpoint::PlusQuarter,
            "-pi/4" => Setpoint::MinusQuarter,
            other => return Err(Error::config("lock.setpoint", format!("`{other}` is not +pi/4 or -pi/4"))),
        };
        let s = LockSettings {
            drift: DriftProcess { model, diffusion: self.diffusion, sample_rate: self.loop_rate_hz },
            reference: ReferenceParams {
                v_min: self.v_min,
                v_max: self.v_max,
                bandwidth: self.speckle_bandwidth_hz,
                ..ReferenceParams::default()
            },
            pid: PidParams {
                kp: self.kp,
                ki: self.ki,
                kd: self.kd,
                loop_rate: self.loop_rate_hz,
                bandwidth: self.bandwidth_hz,
                actuator_range: self.actuator_range_rad,
                highpass_cutoff: self.highpass_cutoff_hz,
            },
            setpoint,
            duration: self.duration_s,
            ..LockSettings::default()
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementSection {
    /// Seconds per CHSH setting pair.
    pub chsh_integration_s: f64,
    /// `[a0, a1, b0, b1]` in radians; canonical for the convention if
    /// absent.
    pub settings: Option<[f64; 4]>,
    /// Number of φa points in the fixed-φb scan; 0 disables it.
    pub sweep_points: usize,
    pub sweep_integration_s: f64,
    pub sweep_bob_phase: f64,
}

impl Default for MeasurementSection {
    fn default() -> Self {
        MeasurementSection {
            chsh_integration_s: 1.4,
            settings: None,
            sweep_points: 16,
            sweep_integration_s: 1.4,
            sweep_bob_phase: std::f64::consts::FRAC_PI_4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagFormat {
    #[default]
    Binary,
    Csv,
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub raw_tags: TagFormat,
}

pub const DEFAULT_ALICE_SINGLES: f64 = 300_000.0;

/// Everything the orchestrator needs, in SI units.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sim: SimulationConfig,
    pub quad: SettingsQuad,
    pub lock: Option<LockSettings>,
    pub window: f64,
    pub sync_bin: f64,
    pub sync_span: f64,
    pub accidental_delay: f64,
    pub chsh_duration: f64,
    pub sweep_points: usize,
    pub sweep_duration: f64,
    pub sweep_bob_phase: f64,
}

impl RunConfig {
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
        }
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::from_str_with_format(&text, json)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn is_lhv(&self) -> bool {
        self.mode.starts_with("lhv:")
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let arms = ArmConfig {
            delta_t: self.arms.delta_t_ns * 1e-9,
            imbalance: self.arms.imbalance_mm * 1e-3,
            coherence_length: self.arms.coherence_length_mm * 1e-3,
        };
        arms.validate()?;
        let channel = ChannelParams {
            loss_alice_db: self.channel.loss_alice_db,
            loss_bob_db: self.channel.loss_bob_db,
            filter_transmission: self.channel.filter_transmission,
            collection_efficiency: self.channel.collection_efficiency,
        };
        channel.validate()?;
        let detector = DetectorParams {
            efficiency: self.detector.efficiency,
            dark_rate: self.detector.dark_rate,
            jitter_sigma: self.detector.jitter_ps * 1e-12,
            dead_time: self.detector.dead_time_ns * 1e-9,
        };
        detector.validate()?;
        let window = self.tagger.window_ns * 1e-9;
        check_resolvable(arms.delta_t_ps(), secs_to_ps(window))?;
        let pair_rate = match (self.source.pair_rate, self.source.target_alice_singles) {
            (Some(r), None) => r,
            (None, Some(target)) => calibrate_pair_rate(target, &channel, &detector)?,
            (None, None) => calibrate_pair_rate(DEFAULT_ALICE_SINGLES, &channel, &detector)?,
            _ => {
                return Err(Error::config(
                    "source",
                    "set exactly one of source.pair_rate and source.target_alice_singles",
                ))
            }
        };
        let (mode, lock) = match self.mode.as_str() {
            "quantum" => {
                let lock = if self.lock.enabled { Some(self.lock.settings()?) } else { None };
                let source_visibility = Visibility::new(self.source.visibility)
                    .map_err(|_| Error::config("source.visibility", "must be in [0, 1]"))?;
                let q = QuantumParams { source_visibility, phase_blur: self.dephasing.phase_blur_rad, lock_factor: 1.0 };
                (SourceMode::Quantum(q), lock)
            }
            m => match m.strip_prefix("lhv:") {
                Some(name) => {
                    let s = strategy_by_name(name, self.convention)?;
                    s.check_geometry(self.geometry)?;
                    (SourceMode::Lhv(s), None)
                }
                None => return Err(Error::config("mode", format!("`{m}` is not `quantum` or `lhv:<strategy>`"))),
            },
        };
        let quad = match self.measurement.settings {
            Some([a0, a1, b0, b1]) => SettingsQuad::new(a0, a1, b0, b1)?,
            None => SettingsQuad::canonical(self.convention),
        };
        let m = &self.measurement;
        if !(m.chsh_integration_s > 0.0) {
            return Err(Error::config("measurement.chsh_integration_s", "must be positive"));
        }
        if m.sweep_points > 0 {
            if !m.sweep_points.is_multiple_of(8) {
                return Err(Error::config(
                    "measurement.sweep_points",
                    "must be a multiple of 8 so the scan contains Δ = π/4 and 3π/4",
                ));
            }
            if !(m.sweep_integration_s > 0.0) {
                return Err(Error::config("measurement.sweep_integration_s", "must be positive"));
            }
            if !m.sweep_bob_phase.is_finite() {
                return Err(Error::config("measurement.sweep_bob_phase", "must be finite"));
            }
        }
        if self.tagger.sync_pulses == 0 {
            return Err(Error::config("tagger.sync_pulses", "must be positive"));
        }
        let accidental_delay = self.tagger.accidental_delay_ns * 1e-9;
        if accidental_delay.abs() < 2.0 * arms.delta_t + window {
            return Err(Error::config(
                "tagger.accidental_delay_ns",
                "off-peak window must clear the ±delta_t slots",
            ));
        }
        let bob_delay = self.arms.bob_link_delay_us * 1e-6;
        let sync_span = self.tagger.sync_span_us * 1e-6;
        if bob_delay > sync_span {
            return Err(Error::config("tagger.sync_span_us", "search span must cover arms.bob_link_delay_us"));
        }
        let sim = SimulationConfig {
            geometry: self.geometry,
            convention: self.convention,
            mode,
            source: SourceParams {
                pair_rate,
                pump_power_mw: self.source.pump_power_mw,
                signal_wavelength_nm: self.source.wavelength_nm,
                duration: m.chsh_integration_s,
                seed: self.seed,
            },
            arms,
            channel,
            detector,
            bob_delay,
            sync: SyncParams {
                loss: self.tagger.sync_loss,
                jitter_sigma: self.tagger.sync_jitter_ps * 1e-12,
                pulses: self.tagger.sync_pulses,
            },
            sampling: self.sampling,
            keep_truth: self.is_lhv(),
        };
        sim.validate()?;
        Ok(Resolved {
            sim,
            quad,
            lock,
            window,
            sync_bin: self.tagger.sync_bin_ps * 1e-12,
            sync_span,
            accidental_delay,
            chsh_duration: m.chsh_integration_s,
            sweep_points: m.sweep_points,
            sweep_duration: m.sweep_integration_s,
            sweep_bob_phase: m.sweep_bob_phase,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let r = RunConfig::default().resolve().unwrap();
        assert!(r.sim.source.pair_rate > 1e6);
        assert!(r.lock.is_some());
    }

    #[test]
    fn toml_round_trip_and_json_mirror() {
        let c = RunConfig { name: "x".into(), mode: "lhv:coin".into(), ..Default::default() };
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_str_with_format(&text, false).unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_str_with_format(&json, true).unwrap(), c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_str_with_format("seed = 9\n[tagger]\nwindow_ns = 2.0\n", false).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.tagger.window_ns, 2.0);
        assert_eq!(c.tagger.sync_pulses, 10_000);
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.tagger.window_ns = 6.0;
        assert_eq!(field_of(c.resolve().unwrap_err()), "tagger.window");

        let mut c = RunConfig::default();
        c.source.pair_rate = Some(1e6);
        c.source.target_alice_singles = Some(1e5);
        assert_eq!(field_of(c.resolve().unwrap_err()), "source");

        let mut c = RunConfig::default();
        c.mode = "classical".into();
        assert_eq!(field_of(c.resolve().unwrap_err()), "mode");

        let mut c = RunConfig::default();
        c.measurement.sweep_points = 12;
        assert_eq!(field_of(c.resolve().unwrap_err()), "measurement.sweep_points");

        let mut c = RunConfig::default();
        c.lock.setpoint = "0".into();
        assert_eq!(field_of(c.resolve().unwrap_err()), "lock.setpoint");

        assert!(RunConfig::from_str_with_format("bogus = 1\n", false).is_err());
    }

    #[test]
    fn faking_in_hug_is_rejected() {
        let c = RunConfig { mode: "lhv:faking".into(), geometry: Geometry::Hug, ..Default::default() };
        assert!(matches!(c.resolve().unwrap_err(), Error::Constraint(_)));
    }
}
