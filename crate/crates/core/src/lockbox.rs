//! Phase drift of the long interferometer and its quadrature lock.
//!
//! The 852 nm reference leaves the interferometer on two ports,
//! `I = dc·[1 + v·cos 2φ]` and its complement, so the error signal
//! crosses zero at `φ = ±π/4`. The d-c level is removed by subtracting the
//! first-order low-pass of the phase-insensitive port sum, the complement
//! of a first-order high-pass. A PI(D) loop drives a bounded actuator with
//! first-order lag.

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum DriftModel {
    RandomWalk,
    Ou { reversion_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftProcess {
    #[serde(flatten)]
    pub model: DriftModel,
    /// rad²/s.
    pub diffusion: f64,
    /// Hz, used by [`drift_trace`].
    pub sample_rate: f64,
}

impl Default for DriftProcess {
    fn default() -> Self {
        DriftProcess {
            model: DriftModel::RandomWalk,
            diffusion: 50.0,
            sample_rate: 100e3,
        }
    }
}

impl DriftProcess {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusion >= 0.0 && self.diffusion.is_finite()) {
            return Err(Error::config("lock.diffusion", "must be ≥ 0"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::config("lock.sample_rate", "must be positive"));
        }
        if let DriftModel::Ou { reversion_rate } = self.model {
            if !(reversion_rate > 0.0 && reversion_rate.is_finite()) {
                return Err(Error::config("lock.reversion_rate", "must be positive"));
            }
        }
        Ok(())
    }

    /// Increment over `dt` from the current deviation `x`. The OU update is
    /// the exact discretization, stationary variance `diffusion/(2θ)`.
    pub fn step_drift<R: Rng + ?Sized>(&self, x: f64, dt: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match self.model {
            DriftModel::RandomWalk => (self.diffusion * dt).sqrt() * z,
            DriftModel::Ou { reversion_rate: th } => {
                let decay = (-th * dt).exp();
                let sd = (self.diffusion / (2.0 * th) * (1.0 - decay * decay)).sqrt();
                x * (decay - 1.0) + sd * z
            }
        }
    }
}

/// `n` samples of the drift deviation starting at 0.
pub fn drift_trace(drift: &DriftProcess, n: usize, rng: &mut SimRng) -> Vec<f64> {
    let dt = 1.0 / drift.sample_rate;
    let mut x = 0.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(x);
        x += drift.step_drift(x, dt, rng);
    }
    out
}

/// Slow speckle of the reference: bounded random walks of `v(t)` and
/// `dc(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub v_min: f64,
    pub v_max: f64,
    pub dc_mean: f64,
    /// Relative half-range of `dc(t)` around `dc_mean`.
    pub dc_spread: f64,
    /// Hz.
    pub bandwidth: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        ReferenceParams {
            v_min: 0.2,
            v_max: 0.9,
            dc_mean: 1.0,
            dc_spread: 0.3,
            bandwidth: 1.0,
        }
    }
}

impl ReferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.v_min && self.v_min <= self.v_max && self.v_max <= 1.0) {
            return Err(Error::config("lock.v_min", "need 0 ≤ v_min ≤ v_max ≤ 1"));
        }
        if !(self.dc_mean > 0.0) {
            return Err(Error::config("lock.dc_mean", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dc_spread) {
            return Err(Error::config("lock.dc_spread", "must be in [0, 1)"));
        }
        if !(self.bandwidth >= 0.0) {
            return Err(Error::config("lock.speckle_bandwidth", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Reflected random walk on `[lo, hi]` with steps sized for `bandwidth`.
struct BoundedWalk {
    x: f64,
    lo: f64,
    hi: f64,
    step: f64,
}

impl BoundedWalk {
    fn new(lo: f64, hi: f64, bandwidth: f64, dt: f64, start: f64) -> Self {
        // a walk spanning the range in about 1/bandwidth seconds
        let step = (hi - lo) * (bandwidth * dt).sqrt();
        BoundedWalk { x: start, lo, hi, step }
    }

    fn next(&mut self, rng: &mut SimRng) -> f64 {
        if self.hi > self.lo {
            let z: f64 = rng.sample(StandardNormal);
            let mut x = self.x + self.step * z;
            let width = self.hi - self.lo;
            // fold into range
            let r = (x - self.lo).rem_euclid(2.0 * width);
            x = self.lo + if r > width { 2.0 * width - r } else { r };
            self.x = x;
        }
        self.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setpoint {
    #[serde(rename = "+pi/4")]
    PlusQuarter,
    #[serde(rename = "-pi/4")]
    MinusQuarter,
}

impl Setpoint {
    pub fn radians(self) -> f64 {
        match self {
            Setpoint::PlusQuarter => FRAC_PI_4,
            Setpoint::MinusQuarter => -FRAC_PI_4,
        }
    }

    /// Makes the error increase with phase at the set point.
    fn error_sign(self) -> f64 {
        match self {
            Setpoint::PlusQuarter => -1.0,
            Setpoint::MinusQuarter => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidParams {
    pub kp: f64,
    /// 1/s.
    pub ki: f64,
    /// s.
    pub kd: f64,
    pub loop_rate: f64,
    /// Intended unity-gain crossover, Hz. Sets the actuator corner at
    /// twice this value.
    pub bandwidth: f64,
    pub actuator_range: f64,
    pub highpass_cutoff: f64,
}

impl Default for PidParams {
    fn default() -> Self {
        PidParams {
            kp: 0.2,
            ki: TAU * 5e3,
            kd: 0.0,
            loop_rate: 100e3,
            bandwidth: 5e3,
            actuator_range: 50.0 * PI,
            highpass_cutoff: 300.0,
        }
    }
}

impl PidParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lock.kp", self.kp), ("lock.ki", self.ki), ("lock.kd", self.kd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "gains must be finite and ≥ 0"));
            }
        }
        if !(self.bandwidth > 0.0 && self.loop_rate > 2.0 * self.bandwidth) {
            return Err(Error::config("lock.loop_rate", "must exceed twice the bandwidth"));
        }
        if !(self.actuator_range > 0.0) {
            return Err(Error::config("lock.actuator_range", "must be positive"));
        }
        if !(self.highpass_cutoff > 0.0 && self.highpass_cutoff < self.loop_rate / 2.0) {
            return Err(Error::config("lock.highpass_cutoff", "must be in (0, loop_rate/2)"));
        }
        Ok(())
    }

    pub fn zero_gain(self) -> Self {
        PidParams { kp: 0.0, ki: 0.0, kd: 0.0, ..self }
    }
}

/// One sample of the two reference ports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub port: f64,
    /// Phase-insensitive sum of both ports, `2·dc`.
    pub total: f64,
}

impl ReferenceSample {
    pub fn at(phase: f64, v: f64, dc: f64) -> Self {
        ReferenceSample { port: dc * (1.0 + v * (2.0 * phase).cos()), total: 2.0 * dc }
    }
}

/// Streaming d-c removal; output is `v·cos 2φ`-shaped and vanishes at
/// quadrature.
#[derive(Debug, Clone, Copy)]
pub struct DcRemoval {
    alpha: f64,
    level: Option<f64>,
}

impl DcRemoval {
    pub fn new(cutoff: f64, dt: f64) -> Self {
        DcRemoval { alpha: 1.0 - (-TAU * cutoff * dt).exp(), level: None }
    }

    pub fn update(&mut self, s: ReferenceSample) -> f64 {
        let half = s.total / 2.0;
        let level = match self.level {
            Some(l) => l + self.alpha * (half - l),
            None => half,
        };
        self.level = Some(level);
        if level > 0.0 {
            (s.port - level) / level
        } else {
            0.0
        }
    }
}

/// Error value after feeding the whole window through [`DcRemoval`].
pub fn error_signal(samples: &[ReferenceSample], highpass_cutoff: f64, dt: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Contract("error_signal needs at least two samples".into()));
    }
    let mut f = DcRemoval::new(highpass_cutoff, dt);
    Ok(samples.iter().fold(0.0, |_, &s| f.update(s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockSettings {
    pub drift: DriftProcess,
    pub reference: ReferenceParams,
    pub pid: PidParams,
    pub setpoint: Setpoint,
    pub duration: f64,
    /// Residual within this of the set point counts as captured.
    pub capture_tolerance: f64,
    /// Seconds the residual must stay captured.
    pub capture_hold: f64,
}

impl Default for LockSettings {
    fn default() -> Self {
        LockSettings {
            drift: DriftProcess::default(),
            reference: ReferenceParams::default(),
            pid: PidParams::default(),
            setpoint: Setpoint::PlusQuarter,
            duration: 1.0,
            capture_tolerance: 0.2,
            capture_hold: 0.02,
        }
    }
}

impl LockSettings {
    pub fn validate(&self) -> Result<()> {
        self.drift.validate()?;
        self.reference.validate()?;
        self.pid.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("lock.duration", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockReport {
    pub locked: bool,
    /// RMS of the wrapped residual once the capture hold has elapsed
    /// (whole run if never acquired).
    pub residual_rms: f64,
    pub lock_acquisition_time: Option<f64>,
    pub setpoint: Setpoint,
    /// RMS of the open-loop drift deviation over the same run.
    pub unlocked_rms: f64,
    pub saturated_fraction: f64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockTrace {
    pub dt: f64,
    /// Total interferometer phase, unwrapped.
    pub phase: Vec<f64>,
    /// `phase − setpoint` wrapped into `[−π/2, π/2)`.
    pub residual: Vec<f64>,
}

/// Wraps onto the `π`-periodic lock lattice.
pub fn wrap_residual(x: f64) -> f64 {
    (x + PI / 2.0).rem_euclid(PI) - PI / 2.0
}

fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

fn rms_about_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn initial_phase(seed: u64) -> f64 {
    substream(seed, Purpose::Init, 0, 0).random::<f64>() * TAU
}

/// Total phase with no feedback: random start plus drift at the loop rate.
pub fn open_loop_phase(settings: &LockSettings, seed: u64) -> Vec<f64> {
    let dt = 1.0 / settings.pid.loop_rate;
    let n = (settings.duration * settings.pid.loop_rate).round() as usize;
    let mut rng = substream(seed, Purpose::Drift, 0, 0);
    let phi0 = initial_phase(seed);
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let v = phi0 + x;
            x += settings.drift.step_drift(x, dt, &mut rng);
            v
        })
        .collect()
}

/// Discrete-time closed loop at `pid.loop_rate`.
pub fn run_lock(settings: &LockSettings, seed: u64) -> Result<(LockReport, LockTrace)> {
    settings.validate()?;
    let pid = settings.pid;
    let dt = 1.0 / pid.loop_rate;
    let n = (settings.duration * pid.loop_rate).round() as usize;
    if n < 2 {
        return Err(Error::config("lock.duration", "shorter than two loop periods"));
    }
    let mut drift_rng = substream(seed, Purpose::Drift, 0, 0);
    let mut speckle_rng = substream(seed, Purpose::Speckle, 0, 0);
    let r = settings.reference;
    let mut vis = BoundedWalk::new(r.v_min, r.v_max, r.bandwidth, dt, (r.v_min + r.v_max) / 2.0);
    let mut dc = BoundedWalk::new(r.dc_mean * (1.0 - r.dc_spread), r.dc_mean * (1.0 + r.dc_spread), r.bandwidth, dt, r.dc_mean);
    let mut dcr = DcRemoval::new(pid.highpass_cutoff, dt);
    let lag = 1.0 - (-TAU * 2.0 * pid.bandwidth * dt).exp();
    let sign = settings.setpoint.error_sign();
    let target = settings.setpoint.radians();

    let phi0 = initial_phase(seed);
    let mut x = 0.0;
    let (mut actuator, mut integral, mut prev_err) = (0.0f64, 0.0f64, None::<f64>);
    let mut saturated = 0usize;
    let mut phase = Vec::with_capacity(n);
    let mut open = Vec::with_capacity(n);
    for _ in 0..n {
        let drift_phase = phi0 + x;
        let total = drift_phase + actuator;
        phase.push(total);
        open.push(x);
        let sample = ReferenceSample::at(total, vis.next(&mut speckle_rng), dc.next(&mut speckle_rng));
        let e = sign * dcr.update(sample);
        let de = prev_err.map_or(0.0, |p| (e - p) / dt);
        prev_err = Some(e);
        let trial = integral + e * dt;
        let raw = -(pid.kp * e + pid.ki * trial + pid.kd * de);
        let command = if raw.abs() > pid.actuator_range {
            saturated += 1;
            // conditional integration: hold the integrator while clamped
            -(pid.kp * e + pid.ki * integral + pid.kd * de)
        } else {
            integral = trial;
            raw
        };
        let command = command.clamp(-pid.actuator_range, pid.actuator_range);
        actuator += lag * (command - actuator);
        x += settings.drift.step_drift(x, dt, &mut drift_rng);
    }

    let residual: Vec<f64> = phase.iter().map(|p| wrap_residual(p - target)).collect();
    let hold = ((settings.capture_hold / dt).round() as usize).max(1);
    let mut run = 0usize;
    let mut acquired = None;
    for (i, r) in residual.iter().enumerate() {
        if r.abs() < settings.capture_tolerance {
            run += 1;
            if run >= hold {
                acquired = Some(i + 1 - hold);
                break;
            }
        } else {
            run = 0;
        }
    }
    let saturated_fraction = saturated as f64 / n as f64;
    let active = pid.kp > 0.0 || pid.ki > 0.0 || pid.kd > 0.0;
    let diagnostic = if saturated_fraction > 0.1 {
        Some(format!("actuator saturated on {:.1}% of samples", 100.0 * saturated_fraction))
    } else if !active {
        Some("all gains are zero".into())
    } else if acquired.is_none() {
        Some(format!("residual never stayed within {} rad", settings.capture_tolerance))
    } else {
        None
    };
    let tail = &residual[acquired.map_or(0, |i| (i + hold).min(n - 1))..];
    let report = LockReport {
        locked: diagnostic.is_none(),
        residual_rms: rms(tail),
        lock_acquisition_time: acquired.map(|i| i as f64 * dt),
        setpoint: settings.setpoint,
        unlocked_rms: rms_about_mean(&open),
        saturated_fraction,
        diagnostic,
    };
    Ok((report, LockTrace { dt, phase, residual }))
}

/// Gaussian-dephasing visibility factor `exp(−σ²/2)`.
pub fn residual_to_visibility(residual: &[f64]) -> f64 {
    let s = rms(residual);
    (-s * s / 2.0).exp()
}

pub fn write_trace_csv(path: &FsPath, trace: &LockTrace) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        time_s: f64,
        phase_rad: f64,
    }
    let fmt = |e: csv::Error| Error::Format { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    for (i, &r) in trace.residual.iter().enumerate() {
        w.serialize(Row { time_s: i as f64 * trace.dt, phase_rad: r }).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
