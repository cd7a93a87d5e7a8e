//! Local-hidden-variable strategies and the post-selection loophole.
//!
//! A strategy maps a shared hidden variable plus one local setting to a
//! local outcome, and chooses interferometer paths. Under Franson
//! discarding, path choices that read the local setting change *which*
//! events survive, letting a local model fake the quantum cosine. In the
//! hug geometry the path functions are structurally denied the settings.

use std::f64::consts::{FRAC_2_PI, TAU};
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{estimate_s_from_counts, BellResult, CountsMatrix};
use crate::exec::{map_indexed, Execution};
use crate::qmodel::{Detector, PhaseConvention, SettingsQuad, CHSH_SIGNS};
use crate::rng::{substream, Purpose, SimRng};
use crate::topology::{classify_unchecked, route, ArmConfig, Geometry, Party, Path, PathChoice, SlotClass, secs_to_ps};

/// Shared classical randomness carried by one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenVariable {
    /// Uniform on `[0, 2π)`.
    pub theta: f64,
    /// Fair path bit.
    pub coin: Path,
    /// Extra uniforms on `[0, 1)` for strategies that need them.
    pub aux: [f64; 2],
}

impl HiddenVariable {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let theta = rng.random::<f64>() * TAU;
        let coin = if rng.random::<bool>() { Path::S } else { Path::L };
        HiddenVariable {
            theta,
            coin,
            aux: [rng.random(), rng.random()],
        }
    }
}

pub type OutcomeFn = Arc<dyn Fn(&HiddenVariable, f64) -> Detector + Send + Sync>;
pub type LocalPathFn = Arc<dyn Fn(&HiddenVariable, f64) -> Path + Send + Sync>;
pub type SharedPathFn = Arc<dyn Fn(&HiddenVariable) -> PathChoice + Send + Sync>;

/// How a strategy picks paths.
#[derive(Clone)]
pub enum PathRule {
    /// Both path bits depend on the hidden variable only.
    SettingFree(SharedPathFn),
    /// Each side's path may read that side's own setting (photon 1 enters
    /// Alice's interferometer, photon 2 Bob's). Only meaningful for Franson.
    SettingDependent { alice: LocalPathFn, bob: LocalPathFn },
}

#[derive(Clone)]
pub struct LhvStrategy {
    pub name: String,
    pub alice: OutcomeFn,
    pub bob: OutcomeFn,
    pub paths: PathRule,
}

impl std::fmt::Debug for LhvStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LhvStrategy")
            .field("name", &self.name)
            .field("setting_dependent_paths", &self.reads_settings_for_paths())
            .finish()
    }
}

impl LhvStrategy {
    pub fn reads_settings_for_paths(&self) -> bool {
        matches!(self.paths, PathRule::SettingDependent { .. })
    }

    /// Rejects strategies whose path functions need settings when the
    /// geometry cannot supply them.
    pub fn check_geometry(&self, geometry: Geometry) -> Result<()> {
        if geometry == Geometry::Hug && self.reads_settings_for_paths() {
            return Err(Error::Constraint(format!(
                "strategy `{}` chooses paths from local settings; the hug geometry \
                 routes photons before any setting is applied",
                self.name
            )));
        }
        Ok(())
    }

    /// Returns `self` if usable in `geometry`.
    pub fn constrained_to(self, geometry: Geometry) -> Result<Self> {
        self.check_geometry(geometry)?;
        Ok(self)
    }

    pub fn path_choice(&self, hv: &HiddenVariable, alice_phase: f64, bob_phase: f64) -> PathChoice {
        match &self.paths {
            PathRule::SettingFree(f) => f(hv),
            PathRule::SettingDependent { alice, bob } => {
                PathChoice::new(alice(hv, alice_phase), bob(hv, bob_phase))
            }
        }
    }
}

fn sign_detector(x: f64) -> Detector {
    if x >= 0.0 {
        Detector::D1
    } else {
        Detector::D2
    }
}

/// Bob's phase inside the strategy's cosine for each convention.
fn bob_arg(conv: PhaseConvention, theta: f64, phase: f64) -> f64 {
    match conv {
        PhaseConvention::Difference => theta + phase,
        PhaseConvention::Sum => theta - phase,
    }
}

/// Sign outcomes with `|cos|`-weighted path matching. Its post-selected
/// correlation under Franson discarding is exactly `cos Δ` and its
/// selection rate is `2/π`.
pub fn faking_strategy(conv: PhaseConvention) -> LhvStrategy {
    LhvStrategy {
        name: "faking".into(),
        alice: Arc::new(|hv, phase| sign_detector((hv.theta + phase).cos())),
        bob: Arc::new(move |hv, phase| sign_detector(bob_arg(conv, hv.theta, phase).cos())),
        paths: PathRule::SettingDependent {
            alice: Arc::new(|hv, _| hv.coin),
            bob: Arc::new(move |hv, phase| {
                if hv.aux[0] < bob_arg(conv, hv.theta, phase).cos().abs() {
                    hv.coin
                } else {
                    hv.coin.flipped()
                }
            }),
        },
    }
}

/// Same outcomes as [`faking_strategy`] but with setting-free paths:
/// photon 1 follows the coin, photon 2 matches it half of the time.
pub fn coin_strategy(conv: PhaseConvention) -> LhvStrategy {
    let base = faking_strategy(conv);
    LhvStrategy {
        name: "coin".into(),
        alice: base.alice,
        bob: base.bob,
        paths: PathRule::SettingFree(Arc::new(|hv| {
            let second = if hv.aux[1] < 0.5 { hv.coin } else { hv.coin.flipped() };
            PathChoice::new(hv.coin, second)
        })),
    }
}

/// Both outcomes always `+1`.
pub fn constant_strategy() -> LhvStrategy {
    LhvStrategy {
        name: "constant".into(),
        alice: Arc::new(|_, _| Detector::D1),
        bob: Arc::new(|_, _| Detector::D1),
        paths: PathRule::SettingFree(Arc::new(|hv| PathChoice::new(hv.coin, hv.coin))),
    }
}

const RANDOM_CELLS: usize = 16;

#[derive(Debug, Clone, Copy)]
struct RandomCell {
    alice_offset: f64,
    alice_flip: bool,
    alice_freq: f64,
    bob_offset: f64,
    bob_flip: bool,
    bob_freq: f64,
    p1_short: f64,
    p2_short: f64,
    path_offset: f64,
}

/// A randomly drawn local strategy: θ is cut into cells, each with its own
/// shifted/flipped sign outcomes and path biases. With `adaptive`, the two
/// path bits additionally read the local settings (Franson only).
pub fn random_strategy(seed: u64, adaptive: bool) -> LhvStrategy {
    let mut rng = substream(seed, Purpose::Strategy, 0, 0);
    let cells: Arc<Vec<RandomCell>> = Arc::new(
        (0..RANDOM_CELLS)
            .map(|_| RandomCell {
                alice_offset: rng.random::<f64>() * TAU,
                alice_flip: rng.random(),
                alice_freq: rng.random_range(1..=3) as f64,
                bob_offset: rng.random::<f64>() * TAU,
                bob_flip: rng.random(),
                bob_freq: rng.random_range(1..=3) as f64,
                p1_short: rng.random(),
                p2_short: rng.random(),
                path_offset: rng.random::<f64>() * TAU,
            })
            .collect(),
    );
    let cell = |theta: f64| ((theta / TAU * RANDOM_CELLS as f64) as usize).min(RANDOM_CELLS - 1);
    let flip = |d: Detector, f: bool| match (d, f) {
        (d, false) => d,
        (Detector::D1, true) => Detector::D2,
        (Detector::D2, true) => Detector::D1,
    };
    let (ca, cb) = (cells.clone(), cells.clone());
    let alice: OutcomeFn = Arc::new(move |hv, phase| {
        let c = &ca[cell(hv.theta)];
        flip(sign_detector((c.alice_freq * hv.theta + phase + c.alice_offset).cos()), c.alice_flip)
    });
    let bob: OutcomeFn = Arc::new(move |hv, phase| {
        let c = &cb[cell(hv.theta)];
        flip(sign_detector((c.bob_freq * hv.theta + phase + c.bob_offset).cos()), c.bob_flip)
    });
    let pick = |u: f64, p: f64| if u < p { Path::S } else { Path::L };
    let paths = if adaptive {
        let (pa, pb) = (cells.clone(), cells);
        PathRule::SettingDependent {
            alice: Arc::new(move |hv, phase| {
                let c = &pa[cell(hv.theta)];
                let p = c.p1_short * (0.5 + 0.5 * (hv.theta + phase + c.path_offset).cos());
                pick(hv.aux[0], p)
            }),
            bob: Arc::new(move |hv, phase| {
                let c = &pb[cell(hv.theta)];
                let p = c.p2_short * (0.5 + 0.5 * (hv.theta - phase + c.path_offset).sin());
                pick(hv.aux[1], p)
            }),
        }
    } else {
        PathRule::SettingFree(Arc::new(move |hv| {
            let c = &cells[cell(hv.theta)];
            PathChoice::new(pick(hv.aux[0], c.p1_short), pick(hv.aux[1], c.p2_short))
        }))
    };
    LhvStrategy {
        name: format!("random{}:{seed}", if adaptive { "-adaptive" } else { "" }),
        alice,
        bob,
        paths,
    }
}

/// Resolves CLI strategy names: `faking`, `coin`, `constant`,
/// `random:<seed>`, `random-adaptive:<seed>`.
pub fn strategy_by_name(name: &str, conv: PhaseConvention) -> Result<LhvStrategy> {
    let parse_seed = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| Error::config("strategy", format!("bad seed `{s}` in `{name}`")))
    };
    match name {
        "faking" => Ok(faking_strategy(conv)),
        "coin" => Ok(coin_strategy(conv)),
        "constant" => Ok(constant_strategy()),
        other => {
            if let Some(seed) = other.strip_prefix("random:") {
                Ok(random_strategy(parse_seed(seed)?, false))
            } else if let Some(seed) = other.strip_prefix("random-adaptive:") {
                Ok(random_strategy(parse_seed(seed)?, true))
            } else {
                Err(Error::config(
                    "strategy",
                    format!("unknown strategy `{other}` (faking, coin, constant, random:<seed>)"),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LhvRunReport {
    pub geometry: Geometry,
    pub strategy: String,
    pub n_pairs: u64,
    /// Counts of events surviving the geometry's selection, per setting pair.
    pub postselected: [CountsMatrix; 4],
    /// Counts over every pair, no discarding.
    pub full: [CountsMatrix; 4],
    /// Surviving fraction averaged over the four setting pairs.
    pub selection_rate: f64,
    pub s_postselected: BellResult,
    pub s_full: BellResult,
}

const LHV_BATCH: u64 = 1 << 16;

/// Whether a pair with these paths yields a retained Alice–Bob coincidence.
/// Franson keeps only central-slot coincidences; hug keeps every
/// cross-party coincidence since no others can occur.
fn survives(geometry: Geometry, paths: PathChoice, arms: &ArmConfig) -> Option<(Party, Party)> {
    let out = route(geometry, paths, arms);
    if !out.cross_party() {
        return None;
    }
    let (t_alice, t_bob) = if out.photon1_party == Party::Alice {
        (out.photon1_delay, out.photon2_delay)
    } else {
        (out.photon2_delay, out.photon1_delay)
    };
    let delta = secs_to_ps(t_bob - t_alice);
    match classify_unchecked(delta, arms.delta_t_ps(), secs_to_ps(1e-9)) {
        SlotClass::Matched => Some((out.photon1_party, out.photon2_party)),
        _ => None,
    }
}

#[derive(Clone, Copy, Default)]
struct Tally {
    post: [CountsMatrix; 4],
    full: [CountsMatrix; 4],
}

fn tally_batch(
    geometry: Geometry,
    strategy: &LhvStrategy,
    quad: &SettingsQuad,
    n: u64,
    rng: &mut SimRng,
) -> Tally {
    let arms = ArmConfig::default();
    let pairs = quad.pairs();
    let mut t = Tally::default();
    for _ in 0..n {
        let hv = HiddenVariable::sample(rng);
        // every hidden variable is evaluated under all four setting pairs
        for (k, &(a, b)) in pairs.iter().enumerate() {
            let (a, b) = (a.radians(), b.radians());
            let x = (strategy.alice)(&hv, a);
            let y = (strategy.bob)(&hv, b);
            t.full[k].add(x, y);
            if survives(geometry, strategy.path_choice(&hv, a, b), &arms).is_some() {
                t.post[k].add(x, y);
            }
        }
    }
    t
}

/// Monte Carlo of `n_pairs` hidden variables, each evaluated at all four
/// setting pairs of `quad`.
pub fn run_lhv(
    geometry: Geometry,
    strategy: &LhvStrategy,
    quad: &SettingsQuad,
    n_pairs: u64,
    seed: u64,
) -> Result<LhvRunReport> {
    run_lhv_with(geometry, strategy, quad, n_pairs, seed, Execution::default())
}

pub fn run_lhv_with(
    geometry: Geometry,
    strategy: &LhvStrategy,
    quad: &SettingsQuad,
    n_pairs: u64,
    seed: u64,
    exec: Execution,
) -> Result<LhvRunReport> {
    strategy.check_geometry(geometry)?;
    if n_pairs == 0 {
        return Err(Error::Empty("n_pairs must be positive".into()));
    }
    let batches = n_pairs.div_ceil(LHV_BATCH);
    let parts = map_indexed(exec, batches as usize, |i| {
        let n = LHV_BATCH.min(n_pairs - i as u64 * LHV_BATCH);
        let mut rng = substream(seed, Purpose::Lhv, 0, i as u32);
        tally_batch(geometry, strategy, quad, n, &mut rng)
    });
    let mut total = Tally::default();
    for p in &parts {
        for k in 0..4 {
            total.post[k].merge(&p.post[k]);
            total.full[k].merge(&p.full[k]);
        }
    }
    let kept: u64 = total.post.iter().map(|c| c.total()).sum();
    Ok(LhvRunReport {
        geometry,
        strategy: strategy.name.clone(),
        n_pairs,
        postselected: total.post,
        full: total.full,
        selection_rate: kept as f64 / (4 * n_pairs) as f64,
        s_postselected: estimate_s_from_counts(&total.post)?,
        s_full: estimate_s_from_counts(&total.full)?,
    })
}

/// Result of the exhaustive search over deterministic local strategies.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub geometry: Geometry,
    pub max_s: f64,
    pub cells: usize,
    /// Distinct per-cell behaviours considered.
    pub cell_patterns: usize,
    pub mixtures_evaluated: u64,
    /// Cell counts of the two behaviours in the best mixture.
    pub best_split: (usize, usize),
}

/// Number of hidden-variable cells in [`deterministic_bound_check`].
pub const BOUND_GRID_CELLS: usize = 720;

/// Per-setting contribution of one deterministic cell: `(numerator,
/// selected)` where numerator is the product of the ±1 outcomes if kept.
type CellSignature = [(i8, u8); 4];

fn cell_signatures(geometry: Geometry) -> Vec<CellSignature> {
    let arms = ArmConfig::default();
    // outcome tables: bit i of `o` gives A(a0), A(a1), B(b0), B(b1)
    let outcome = |o: u8, bit: u8| if o >> bit & 1 == 0 { 1i8 } else { -1 };
    let path = |bit: u8| if bit == 0 { Path::S } else { Path::L };
    let mut out = Vec::new();
    let setting_index = [(0u8, 0u8), (0, 1), (1, 0), (1, 1)];
    let mut push = |o: u8, choice: &dyn Fn(u8, u8) -> PathChoice| {
        let mut sig = [(0i8, 0u8); 4];
        for (k, &(ia, ib)) in setting_index.iter().enumerate() {
            let kept = survives(geometry, choice(ia, ib), &arms).is_some();
            let prod = outcome(o, ia) * outcome(o, 2 + ib);
            sig[k] = if kept { (prod, 1) } else { (0, 0) };
        }
        out.push(sig);
    };
    for o in 0..16u8 {
        match geometry {
            Geometry::Hug => {
                for p in 0..4u8 {
                    push(o, &|_, _| PathChoice::new(path(p & 1), path(p >> 1 & 1)));
                }
            }
            Geometry::Franson => {
                // path_A: setting index → path (4 functions), same for B
                for pa in 0..4u8 {
                    for pb in 0..4u8 {
                        push(o, &|ia, ib| PathChoice::new(path(pa >> ia & 1), path(pb >> ib & 1)));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Brute-force maximum of the post-selected CHSH value over deterministic
/// local strategies on a grid of [`BOUND_GRID_CELLS`] hidden-variable
/// cells.
///
/// Each cell carries a deterministic outcome table (16 patterns) and path
/// assignment (4 setting-free patterns in hug; 16 setting-reading ones in
/// Franson). Every single-pattern strategy and every two-pattern mixture at
/// every split of the grid is evaluated; strategies that discard all events
/// at some setting are excluded. With setting-free selection the
/// post-selected value is a selection-weighted average of per-cell values,
/// so single patterns already attain the maximum.
pub fn deterministic_bound_check(geometry: Geometry) -> BoundReport {
    deterministic_bound_check_with(geometry, Execution::default())
}

pub fn deterministic_bound_check_with(geometry: Geometry, exec: Execution) -> BoundReport {
    let sigs = cell_signatures(geometry);
    let n = BOUND_GRID_CELLS as i64;
    let eval = |a: &CellSignature, ma: i64, b: &CellSignature, mb: i64| -> Option<f64> {
        let mut s = 0.0;
        for k in 0..4 {
            let num = a[k].0 as i64 * ma + b[k].0 as i64 * mb;
            let den = a[k].1 as i64 * ma + b[k].1 as i64 * mb;
            if den == 0 {
                return None;
            }
            s += CHSH_SIGNS[k] * num as f64 / den as f64;
        }
        Some(s)
    };
    let rows = map_indexed(exec, sigs.len(), |i| {
        let mut best = (f64::NEG_INFINITY, (0usize, 0usize));
        let mut evaluated = 0u64;
        if let Some(s) = eval(&sigs[i], n, &sigs[i], 0) {
            best = (s, (BOUND_GRID_CELLS, 0));
        }
        evaluated += 1;
        for j in (i + 1)..sigs.len() {
            for m in 1..n {
                evaluated += 1;
                if let Some(s) = eval(&sigs[i], m, &sigs[j], n - m) {
                    if s > best.0 + 1e-12 {
                        best = (s, (m as usize, (n - m) as usize));
                    }
                }
            }
        }
        (best, evaluated)
    });
    let mut best = (f64::NEG_INFINITY, (0, 0));
    let mut evaluated = 0;
    for (b, e) in rows {
        evaluated += e;
        if b.0 > best.0 + 1e-12 {
            best = b;
        }
    }
    BoundReport {
        geometry,
        max_s: best.0,
        cells: BOUND_GRID_CELLS,
        cell_patterns: sigs.len(),
        mixtures_evaluated: evaluated,
        best_split: best.1,
    }
}

/// Selection rate of [`faking_strategy`] under Franson discarding.
pub const FAKING_SELECTION_RATE: f64 = FRAC_2_PI;
