//! Orchestration of a full run: lock → photonics → tagger → estimators,
//! persisted to a run directory.

use std::f64::consts::TAU;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Resolved, RunConfig, TagFormat};
use crate::error::{Error, Result};
use crate::estimate::{
    estimate_e, estimate_s, estimate_s_fixed_bob, fit_fringe, mean_and_std, BellResult, CorrelationEstimate,
    CountsMatrix, FringeFit, FringePoint,
};
use crate::exec::{map_slice, Execution};
use crate::lockbox::{residual_to_visibility, run_lock, write_trace_csv, LockReport};
use crate::photonics::{simulate_block, BlockStreams, SettingBlock, SimulationConfig, SourceMode};
use crate::qmodel::{Detector, PhaseConvention, PhaseSetting};
use crate::rng::child_seed;
use crate::tagger::{
    channel, count_window_pairs, franson_postselect, interleave, match_coincidences, merge_detectors,
    recover_offset, write_binary, write_coincidences_csv, write_csv, CoincidenceConfig, CoincidenceRecord,
    OffsetEstimate, SlotSet, TimeTag,
};
use crate::topology::{secs_to_ps, Geometry, Picos};

pub const RESULTS_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Chsh,
    Sweep,
}

/// Everything measured in one setting block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAnalysis {
    pub label: String,
    pub kind: BlockKind,
    pub alice_phase: f64,
    pub bob_phase: f64,
    pub duration: f64,
    /// Coincidences kept for estimation.
    pub counts: CountsMatrix,
    pub discarded: u64,
    /// Local-model outcomes of every emitted pair (LHV runs only).
    pub full_counts: Option<CountsMatrix>,
    pub alice_singles: [u64; 2],
    pub bob_singles: [u64; 2],
    pub offset: OffsetEstimate,
    /// Pairs in the off-peak window, all detector combinations.
    pub accidentals_measured: u64,
    /// `N_A·N_B·w/T`, all detector combinations.
    pub accidentals_expected: f64,
    pub emitted_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshSummary {
    /// `[a0, a1, b0, b1]`.
    pub settings: [f64; 4],
    pub correlations: Vec<CorrelationEstimate>,
    pub bell: BellResult,
    /// Same blocks with no discarding, LHV runs only.
    pub bell_full: Option<BellResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    /// `"11"`, `"12"`, `"21"` or `"22"`.
    pub pair: String,
    pub fit: FringeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub bob_phase: f64,
    pub fits: Vec<PairFit>,
    pub mean_visibility: f64,
    pub std_visibility: f64,
    /// `3·E(π/4) − E(3π/4)` from the scan.
    pub bell_fixed_bob: BellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardSummary {
    pub kept: u64,
    pub discarded: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccidentalSummary {
    pub window_s: f64,
    /// Per second, all detector combinations.
    pub expected_rate: f64,
    pub measured_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub alice_singles_per_detector: f64,
    pub bob_singles_per_detector: f64,
    pub coincidences_per_pair: f64,
    pub coincidences_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub name: String,
    pub geometry: Geometry,
    pub mode: String,
    pub convention: PhaseConvention,
    pub seed: u64,
    /// S is never corrected for accidentals.
    pub raw: bool,
    pub pair_rate: f64,
    pub effective_visibility: Option<f64>,
    pub lock: Option<LockReport>,
    pub chsh: ChshSummary,
    pub sweep: Option<SweepSummary>,
    pub discard: DiscardSummary,
    pub accidentals: AccidentalSummary,
    pub rates: RateSummary,
    pub blocks: Vec<BlockAnalysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub version: String,
    pub files: Vec<String>,
}

/// Slot set the coincidence electronics use for each geometry.
pub fn slots_for(geometry: Geometry) -> SlotSet {
    match geometry {
        Geometry::Franson => SlotSet::All,
        Geometry::Hug => SlotSet::Central,
    }
}

/// Timestamps of channels `1..=6` from simulated streams.
pub fn block_channels(streams: &BlockStreams) -> [Vec<Picos>; 6] {
    let t = |k: usize| streams.detections[k].iter().map(|r| r.timestamp).collect::<Vec<_>>();
    [t(0), t(1), t(2), t(3), streams.sync_sent.clone(), streams.sync_received.clone()]
}

pub fn block_tags(channels: &[Vec<Picos>; 6]) -> Result<Vec<TimeTag>> {
    let ids = [
        channel::ALICE_D1,
        channel::ALICE_D2,
        channel::BOB_D1,
        channel::BOB_D2,
        channel::ALICE_SYNC,
        channel::BOB_SYNC,
    ];
    let pairs: Vec<(u8, &[Picos])> = ids.iter().zip(channels.iter()).map(|(&c, v)| (c, v.as_slice())).collect();
    interleave(&pairs)
}

/// Analysis parameters shared by every block of a run.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisParams {
    pub window: f64,
    pub delta_t: f64,
    pub slots: SlotSet,
    pub sync_span: f64,
    pub sync_bin: f64,
    pub accidental_delay: f64,
}

impl AnalysisParams {
    pub fn from_resolved(r: &Resolved) -> Self {
        AnalysisParams {
            window: r.window,
            delta_t: r.sim.arms.delta_t,
            slots: slots_for(r.sim.geometry),
            sync_span: r.sync_span,
            sync_bin: r.sync_bin,
            accidental_delay: r.accidental_delay,
        }
    }
}

pub struct ChannelAnalysis {
    pub records: Vec<CoincidenceRecord>,
    pub counts: CountsMatrix,
    pub discarded: u64,
    pub offset: OffsetEstimate,
    pub accidentals_measured: u64,
    pub accidentals_expected: f64,
}

/// Sync recovery, matching, post-selection and accidental measurement
/// from the six recorded channels alone.
pub fn analyze_channels(ch: &[Vec<Picos>; 6], p: &AnalysisParams, duration: f64) -> Result<ChannelAnalysis> {
    let offset = recover_offset(&ch[4], &ch[5], p.sync_span, p.sync_bin)?;
    let cfg = CoincidenceConfig { window: p.window, offset: offset.offset_seconds(), delta_t: p.delta_t, slots: p.slots };
    let alice = merge_detectors(&ch[0], &ch[1]);
    let bob = merge_detectors(&ch[2], &ch[3]);
    let records = match_coincidences(&alice, &bob, &cfg)?;
    let sel = franson_postselect(&records);
    let mut counts = CountsMatrix::default();
    for r in &sel.kept {
        counts.add(r.alice_detector, r.bob_detector);
    }
    let mut a_all: Vec<Picos> = ch[0].iter().chain(&ch[1]).copied().collect();
    let mut b_all: Vec<Picos> = ch[2].iter().chain(&ch[3]).copied().collect();
    a_all.sort_unstable();
    b_all.sort_unstable();
    let center = secs_to_ps(offset.offset_seconds() + p.accidental_delay);
    let accidentals_measured = count_window_pairs(&a_all, &b_all, center, secs_to_ps(p.window));
    let accidentals_expected = a_all.len() as f64 * b_all.len() as f64 * p.window / duration;
    Ok(ChannelAnalysis {
        records,
        counts,
        discarded: sel.discarded as u64,
        offset,
        accidentals_measured,
        accidentals_expected,
    })
}

fn full_counts(streams: &BlockStreams) -> Option<CountsMatrix> {
    let mut m = CountsMatrix::default();
    let mut any = false;
    for e in &streams.truth {
        if let Some((x, y)) = e.lhv_outcomes {
            m.add(x, y);
            any = true;
        }
    }
    any.then_some(m)
}

struct PlannedBlock {
    label: String,
    kind: BlockKind,
    block: SettingBlock,
    duration: f64,
}

fn alice_for_delta(conv: PhaseConvention, delta: f64, bob: f64) -> f64 {
    match conv {
        PhaseConvention::Difference => delta + bob,
        PhaseConvention::Sum => delta - bob,
    }
}

fn plan_blocks(r: &Resolved) -> Result<Vec<PlannedBlock>> {
    let mut out = Vec::new();
    for (k, (a, b)) in r.quad.pairs().into_iter().enumerate() {
        out.push(PlannedBlock {
            label: format!("chsh-{k}"),
            kind: BlockKind::Chsh,
            block: SettingBlock { index: k as u32, alice: a, bob: b },
            duration: r.chsh_duration,
        });
    }
    let bob = PhaseSetting::new(r.sweep_bob_phase)?;
    for k in 0..r.sweep_points {
        let delta = TAU * k as f64 / r.sweep_points as f64;
        out.push(PlannedBlock {
            label: format!("sweep-{k:02}"),
            kind: BlockKind::Sweep,
            block: SettingBlock {
                index: (4 + k) as u32,
                alice: PhaseSetting::new(alice_for_delta(r.sim.convention, delta, r.sweep_bob_phase))?,
                bob,
            },
            duration: r.sweep_duration,
        });
    }
    Ok(out)
}

const PAIR_LABELS: [(Detector, Detector, &str); 4] = [
    (Detector::D1, Detector::D1, "11"),
    (Detector::D1, Detector::D2, "12"),
    (Detector::D2, Detector::D1, "21"),
    (Detector::D2, Detector::D2, "22"),
];

fn sweep_summary(blocks: &[BlockAnalysis], bob_phase: f64, conv: PhaseConvention) -> Result<Option<SweepSummary>> {
    let sweep: Vec<&BlockAnalysis> = blocks.iter().filter(|b| b.kind == BlockKind::Sweep).collect();
    if sweep.is_empty() {
        return Ok(None);
    }
    let bob = PhaseSetting::new(bob_phase)?;
    let mut fits = Vec::new();
    for (x, y, label) in PAIR_LABELS {
        let points: Vec<FringePoint> = sweep
            .iter()
            .map(|b| FringePoint {
                phase: conv.effective_phase(PhaseSetting::new(b.alice_phase).expect("finite"), bob),
                counts: b.counts.get(x, y) as f64,
            })
            .collect();
        fits.push(PairFit { pair: label.into(), fit: fit_fringe(&points)? });
    }
    let vis: Vec<f64> = fits.iter().map(|f| f.fit.visibility).collect();
    let (mean_visibility, std_visibility) = mean_and_std(&vis);
    let n = sweep.len();
    let main = estimate_e(&sweep[n / 8].counts)?;
    let prime = estimate_e(&sweep[3 * n / 8].counts)?;
    Ok(Some(SweepSummary {
        bob_phase,
        fits,
        mean_visibility,
        std_visibility,
        bell_fixed_bob: estimate_s_fixed_bob(&main, &prime),
    }))
}

/// In-memory products of a run, before persistence.
pub struct RunOutput {
    pub results: RunResults,
    pub channels: Vec<[Vec<Picos>; 6]>,
    pub records: Vec<Vec<CoincidenceRecord>>,
    pub lock_trace: Option<crate::lockbox::LockTrace>,
}

/// Runs the simulation and analysis without touching the filesystem.
pub fn simulate_run(config: &RunConfig, exec: Execution) -> Result<RunOutput> {
    let resolved = config.resolve()?;
    let mut sim: SimulationConfig = resolved.sim.clone();
    let mut lock_report = None;
    let mut lock_trace = None;
    if let (Some(settings), SourceMode::Quantum(q)) = (&resolved.lock, &mut sim.mode) {
        let (report, trace) = run_lock(settings, child_seed(config.seed, 1))?;
        let acquired = report.lock_acquisition_time.map_or(0, |t| (t / trace.dt).round() as usize);
        q.lock_factor = residual_to_visibility(&trace.residual[acquired.min(trace.residual.len() - 1)..]);
        lock_report = Some(report);
        lock_trace = Some(trace);
    }
    let effective_visibility = match &sim.mode {
        SourceMode::Quantum(q) => Some(q.effective_visibility(&sim.arms)?.value()),
        SourceMode::Lhv(_) => None,
    };
    let params = AnalysisParams::from_resolved(&resolved);
    let planned = plan_blocks(&resolved)?;
    let per_block = map_slice(exec, &planned, |p| -> Result<_> {
        let mut cfg = sim.clone();
        cfg.source.duration = p.duration;
        let streams = simulate_block(&cfg, &p.block, exec)?;
        let channels = block_channels(&streams);
        let a = analyze_channels(&channels, &params, p.duration)?;
        let analysis = BlockAnalysis {
            label: p.label.clone(),
            kind: p.kind,
            alice_phase: p.block.alice.radians(),
            bob_phase: p.block.bob.radians(),
            duration: p.duration,
            counts: a.counts,
            discarded: a.discarded,
            full_counts: full_counts(&streams),
            alice_singles: [channels[0].len() as u64, channels[1].len() as u64],
            bob_singles: [channels[2].len() as u64, channels[3].len() as u64],
            offset: a.offset,
            accidentals_measured: a.accidentals_measured,
            accidentals_expected: a.accidentals_expected,
            emitted_pairs: streams.emitted_pairs,
        };
        Ok((analysis, channels, a.records))
    });
    let mut blocks = Vec::new();
    let mut channels = Vec::new();
    let mut records = Vec::new();
    for item in per_block {
        let (b, c, r) = item?;
        blocks.push(b);
        channels.push(c);
        records.push(r);
    }

    let chsh: Vec<&BlockAnalysis> = blocks.iter().filter(|b| b.kind == BlockKind::Chsh).collect();
    let correlations = chsh.iter().map(|b| estimate_e(&b.counts)).collect::<Result<Vec<_>>>()?;
    let bell = estimate_s(&[correlations[0], correlations[1], correlations[2], correlations[3]]);
    let bell_full = if chsh.iter().all(|b| b.full_counts.is_some()) {
        let e = chsh
            .iter()
            .map(|b| estimate_e(b.full_counts.as_ref().expect("checked")))
            .collect::<Result<Vec<_>>>()?;
        Some(estimate_s(&[e[0], e[1], e[2], e[3]]))
    } else {
        None
    };
    let q = resolved.quad;
    let sweep = sweep_summary(&blocks, resolved.sweep_bob_phase, config.convention)?;

    let kept: u64 = chsh.iter().map(|b| b.counts.total()).sum();
    let discarded: u64 = chsh.iter().map(|b| b.discarded).sum();
    let time: f64 = chsh.iter().map(|b| b.duration).sum();
    let acc_m: u64 = chsh.iter().map(|b| b.accidentals_measured).sum();
    let acc_e: f64 = chsh.iter().map(|b| b.accidentals_expected).sum();
    let a_singles: u64 = chsh.iter().map(|b| b.alice_singles.iter().sum::<u64>()).sum();
    let b_singles: u64 = chsh.iter().map(|b| b.bob_singles.iter().sum::<u64>()).sum();

    let results = RunResults {
        name: config.name.clone(),
        geometry: config.geometry,
        mode: config.mode.clone(),
        convention: config.convention,
        seed: config.seed,
        raw: true,
        pair_rate: sim.source.pair_rate,
        effective_visibility,
        lock: lock_report,
        chsh: ChshSummary {
            settings: [q.a0.radians(), q.a1.radians(), q.b0.radians(), q.b1.radians()],
            correlations,
            bell,
            bell_full,
        },
        sweep,
        discard: DiscardSummary {
            kept,
            discarded,
            fraction: if kept + discarded > 0 { discarded as f64 / (kept + discarded) as f64 } else { 0.0 },
        },
        accidentals: AccidentalSummary {
            window_s: resolved.window,
            expected_rate: acc_e / time,
            measured_rate: acc_m as f64 / time,
        },
        rates: RateSummary {
            alice_singles_per_detector: a_singles as f64 / (2.0 * time),
            bob_singles_per_detector: b_singles as f64 / (2.0 * time),
            coincidences_per_pair: kept as f64 / (4.0 * time),
            coincidences_total: kept as f64 / time,
        },
        blocks,
    };
    Ok(RunOutput { results, channels, records, lock_trace })
}

fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

/// Simulates, analyzes and writes the run directory `dir`.
pub fn run_experiment(config: &RunConfig, dir: &FsPath, exec: Execution) -> Result<RunResults> {
    let out = simulate_run(config, exec)?;
    std::fs::create_dir_all(dir.join("coincidences")).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![CONFIG_FILE.to_string()];
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;

    if config.output.raw_tags != TagFormat::None {
        std::fs::create_dir_all(dir.join("tags")).map_err(|e| Error::io(dir, e))?;
    }
    for ((block, channels), records) in out.results.blocks.iter().zip(&out.channels).zip(&out.records) {
        let rel = format!("coincidences/{}.csv", block.label);
        write_coincidences_csv(&dir.join(&rel), records)?;
        files.push(rel);
        let tags = block_tags(channels)?;
        let rel = match config.output.raw_tags {
            TagFormat::Binary => {
                let rel = format!("tags/{}.bin", block.label);
                write_binary(&dir.join(&rel), &tags)?;
                Some(rel)
            }
            TagFormat::Csv => {
                let rel = format!("tags/{}.csv", block.label);
                write_csv(&dir.join(&rel), &tags)?;
                Some(rel)
            }
            TagFormat::None => None,
        };
        files.extend(rel);
    }
    if let (Some(trace), true) = (&out.lock_trace, config.lock.trace_csv) {
        write_trace_csv(&dir.join("lock_trace.csv"), trace)?;
        files.push("lock_trace.csv".into());
    }
    write_json(&dir.join(RESULTS_FILE), &out.results)?;
    files.push(RESULTS_FILE.into());
    let manifest = Manifest {
        name: config.name.clone(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(out.results)
}

/// Root for run directories: `$HUGBELL_RUNS`, else `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("HUGBELL_RUNS").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::*;

    pub(crate) fn small_config() -> RunConfig {
        RunConfig {
            name: "small".into(),
            seed: 3,
            source: SourceSection { pair_rate: Some(20_000.0), target_alice_singles: None, visibility: 0.9, ..Default::default() },
            channel: ChannelSection { loss_alice_db: 0.0, loss_bob_db: 0.0, filter_transmission: 1.0, collection_efficiency: 1.0 },
            detector: DetectorSection { efficiency: 1.0, dark_rate: 0.0, jitter_ps: 0.0, dead_time_ns: 0.0 },
            dephasing: DephasingSection { phase_blur_rad: 0.0 },
            lock: LockSection { enabled: false, ..Default::default() },
            measurement: MeasurementSection { chsh_integration_s: 0.05, sweep_points: 8, sweep_integration_s: 0.02, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn ideal_hug_run_matches_closed_form() {
        let out = simulate_run(&small_config(), Execution::default()).unwrap();
        let r = &out.results;
        let expected = 2.0 * std::f64::consts::SQRT_2 * 0.9;
        assert!((r.chsh.bell.s_hat - expected).abs() <= 3.0 * r.chsh.bell.std_err, "{:?}", r.chsh.bell);
        assert_eq!(r.discard.discarded, 0);
        for b in &r.blocks {
            assert!((b.offset.offset_ps - 18.5e6).abs() <= 50.0, "{:?}", b.offset);
        }
        let sw = r.sweep.as_ref().unwrap();
        assert!((sw.mean_visibility - 0.9).abs() < 0.05, "{sw:?}");
    }

    #[test]
    fn sequential_and_parallel_runs_agree() {
        let c = small_config();
        let a = simulate_run(&c, Execution::Parallel).unwrap();
        let b = simulate_run(&c, Execution::Sequential).unwrap();
        assert_eq!(a.results, b.results);
    }

    #[test]
    fn sum_convention_scan_lands_on_quarter_points() {
        let mut c = small_config();
        c.convention = PhaseConvention::Sum;
        let out = simulate_run(&c, Execution::default()).unwrap();
        let fb = out.results.sweep.unwrap().bell_fixed_bob;
        let expected = 2.0 * std::f64::consts::SQRT_2 * 0.9;
        assert!((fb.s_hat - expected).abs() <= 3.0 * fb.std_err, "{fb:?}");
    }
}
