//! Human-readable summary and CSV exports of a finished run directory.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::Serialize;

use crate::config::{RunConfig, TagFormat};
use crate::error::{Error, Result};
use crate::experiment::{
    analyze_channels, read_json, AnalysisParams, BlockKind, Manifest, RunResults, CONFIG_FILE, MANIFEST_FILE,
    RESULTS_FILE,
};
use crate::qmodel::{Detector, PhaseSetting};
use crate::tagger::{read_binary, read_csv, split_channels};

pub const SUMMARY_FILE: &str = "summary.txt";
pub const FRINGE_FILE: &str = "fringe.csv";
pub const CHSH_FILE: &str = "chsh.csv";

#[derive(Serialize)]
struct FringeRow<'a> {
    alice_phase: f64,
    effective_phase: f64,
    pair: &'a str,
    counts: u64,
    normalized: f64,
}

#[derive(Serialize)]
struct ChshRow {
    setting: usize,
    alice_phase: f64,
    bob_phase: f64,
    n11: u64,
    n12: u64,
    n21: u64,
    n22: u64,
    e_hat: f64,
    std_err: f64,
    discarded: u64,
}

fn csv_err(path: &FsPath, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

fn write_rows<T: Serialize>(path: &FsPath, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PAIRS: [(Detector, Detector, &str); 4] = [
    (Detector::D1, Detector::D1, "11"),
    (Detector::D1, Detector::D2, "12"),
    (Detector::D2, Detector::D1, "21"),
    (Detector::D2, Detector::D2, "22"),
];

/// Checks presence of every artifact, re-derives the coincidence counts
/// from the raw tags when present, and writes the summary and CSVs.
pub fn report(dir: &FsPath) -> Result<String> {
    let mut missing: Vec<String> = [CONFIG_FILE, MANIFEST_FILE, RESULTS_FILE]
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    missing.extend(manifest.files.iter().filter(|f| !dir.join(f).is_file()).cloned());
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let results: RunResults = read_json(&dir.join(RESULTS_FILE))?;
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    verify_tags(dir, &config, &results)?;

    let mut fringe = Vec::new();
    let conv = results.convention;
    for b in results.blocks.iter().filter(|b| b.kind == BlockKind::Sweep) {
        let total = b.counts.total().max(1) as f64;
        let delta = conv.effective_phase(PhaseSetting::new(b.alice_phase)?, PhaseSetting::new(b.bob_phase)?);
        for (x, y, label) in PAIRS {
            let n = b.counts.get(x, y);
            fringe.push(FringeRow { alice_phase: b.alice_phase, effective_phase: delta, pair: label, counts: n, normalized: n as f64 / total });
        }
    }
    write_rows(&dir.join(FRINGE_FILE), &fringe)?;
    let chsh: Vec<ChshRow> = results
        .blocks
        .iter()
        .filter(|b| b.kind == BlockKind::Chsh)
        .zip(&results.chsh.correlations)
        .enumerate()
        .map(|(k, (b, e))| ChshRow {
            setting: k,
            alice_phase: b.alice_phase,
            bob_phase: b.bob_phase,
            n11: b.counts.n11,
            n12: b.counts.n12,
            n21: b.counts.n21,
            n22: b.counts.n22,
            e_hat: e.e_hat,
            std_err: e.std_err,
            discarded: b.discarded,
        })
        .collect();
    write_rows(&dir.join(CHSH_FILE), &chsh)?;

    let text = summary_text(&results);
    std::fs::write(dir.join(SUMMARY_FILE), &text).map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
    Ok(text)
}

fn verify_tags(dir: &FsPath, config: &RunConfig, results: &RunResults) -> Result<()> {
    let ext = match config.output.raw_tags {
        TagFormat::None => return Ok(()),
        TagFormat::Binary => "bin",
        TagFormat::Csv => "csv",
    };
    let params = AnalysisParams::from_resolved(&config.resolve()?);
    for b in &results.blocks {
        let path = dir.join(format!("tags/{}.{ext}", b.label));
        let tags = if ext == "bin" { read_binary(&path)? } else { read_csv(&path)? };
        let channels = split_channels(&tags)?;
        let a = analyze_channels(&channels, &params, b.duration)?;
        if a.counts != b.counts || a.discarded != b.discarded {
            return Err(Error::Format {
                path,
                message: format!("raw tags give {:?} but results record {:?}", a.counts, b.counts),
            });
        }
    }
    Ok(())
}

pub fn summary_text(r: &RunResults) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({} geometry, mode {}, seed {})", r.name, r.geometry, r.mode, r.seed);
    let _ = writeln!(s, "data: raw coincidences, no accidental subtraction (raw = {})", r.raw);
    let _ = writeln!(s, "pair rate: {:.4e} /s", r.pair_rate);
    if let Some(v) = r.effective_visibility {
        let _ = writeln!(s, "effective visibility: {v:.4}");
    }
    if let Some(l) = &r.lock {
        let state = if l.locked { "locked" } else { "NOT locked" };
        let _ = write!(s, "lock: {state}, residual {:.4} rad rms (free drift {:.3} rad)", l.residual_rms, l.unlocked_rms);
        if let Some(t) = l.lock_acquisition_time {
            let _ = write!(s, ", acquired at {:.2} ms", t * 1e3);
        }
        if let Some(d) = &l.diagnostic {
            let _ = write!(s, " [{d}]");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\nCHSH, four setting pairs:");
    let labels = ["E(a0,b0)", "E(a0,b1)", "E(a1,b0)", "E(a1,b1)"];
    for (l, e) in labels.iter().zip(&r.chsh.correlations) {
        let _ = writeln!(s, "  {l} = {:+.4} ± {:.4}  (N = {})", e.e_hat, e.std_err, e.n_total);
    }
    let b = &r.chsh.bell;
    let _ = writeln!(s, "  S = {:.4} ± {:.4}  ({:.3} standard deviations above 2)", b.s_hat, b.std_err, b.sigmas_above_2);
    if let Some(f) = &r.chsh.bell_full {
        let _ = writeln!(s, "  S without discarding = {:.4} ± {:.4}  ({:.3} σ above 2)", f.s_hat, f.std_err, f.sigmas_above_2);
    }
    if let Some(sw) = &r.sweep {
        let _ = writeln!(s, "\nfixed-φb scan at φb = {:.4} rad:", sw.bob_phase);
        for f in &sw.fits {
            let _ = writeln!(s, "  pair {}: V = {:.4} ± {:.4}", f.pair, f.fit.visibility, f.fit.visibility_err);
        }
        let _ = writeln!(s, "  mean V = {:.4} ± {:.4} (spread across pairs)", sw.mean_visibility, sw.std_visibility);
        let fb = &sw.bell_fixed_bob;
        let _ = writeln!(s, "  S = 3·E(π/4) − E(3π/4) = {:.4} ± {:.4}  ({:.3} σ above 2)", fb.s_hat, fb.std_err, fb.sigmas_above_2);
    }
    let d = &r.discard;
    let _ = writeln!(s, "\ndiscarded LS/SL coincidences: {} of {} ({:.4})", d.discarded, d.kept + d.discarded, d.fraction);
    let a = &r.accidentals;
    let _ = writeln!(
        s,
        "accidentals in a {:.2} ns window: expected {:.3} /s, measured off-peak {:.3} /s (reported only, not subtracted)",
        a.window_s * 1e9,
        a.expected_rate,
        a.measured_rate
    );
    let t = &r.rates;
    let _ = writeln!(
        s,
        "rates: Alice singles {:.0} /s per detector, Bob singles {:.0} /s per detector, coincidences {:.2} /s per detector pair ({:.2} /s total)",
        t.alice_singles_per_detector, t.bob_singles_per_detector, t.coincidences_per_pair, t.coincidences_total
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::*;
    use crate::exec::Execution;
    use crate::experiment::run_experiment;

    fn tiny() -> RunConfig {
        RunConfig {
            name: "tiny".into(),
            source: SourceSection { pair_rate: Some(20_000.0), target_alice_singles: None, ..Default::default() },
            lock: LockSection { enabled: false, ..Default::default() },
            measurement: MeasurementSection { chsh_integration_s: 0.02, sweep_points: 16, sweep_integration_s: 0.01, ..Default::default() },
            detector: DetectorSection { dark_rate: 0.0, ..Default::default() },
            channel: ChannelSection { loss_bob_db: 0.0, loss_alice_db: 0.0, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&tiny(), dir.path(), Execution::default()).unwrap();
        let text = report(dir.path()).unwrap();
        assert!(text.contains("no accidental subtraction"));
        let fringe = std::fs::read_to_string(dir.path().join(FRINGE_FILE)).unwrap();
        assert!(fringe.starts_with("alice_phase,effective_phase,pair,counts,normalized\n"));
        assert_eq!(fringe.lines().count(), 1 + 16 * 4);
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&tiny(), dir.path(), Execution::default()).unwrap();
        std::fs::remove_file(dir.path().join("coincidences/chsh-2.csv")).unwrap();
        match report(dir.path()).unwrap_err() {
            Error::MissingArtifacts(v) => assert_eq!(v, vec!["coincidences/chsh-2.csv".to_string()]),
            e => panic!("{e}"),
        }
        let empty = tempfile::tempdir().unwrap();
        match report(empty.path()).unwrap_err() {
            Error::MissingArtifacts(v) => assert_eq!(v.len(), 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn corrupt_tags_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&tiny(), dir.path(), Execution::default()).unwrap();
        let p = dir.path().join("tags/chsh-0.bin");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(report(dir.path()).unwrap_err(), Error::Format { .. }));
    }
}
