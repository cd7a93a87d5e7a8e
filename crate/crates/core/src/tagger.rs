//! Coincidence engine: windowed one-to-one Alice–Bob matching, slot
//! classification, Franson post-selection, sync-offset recovery and
//! time-tag file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::CountsMatrix;
use crate::qmodel::Detector;
use crate::topology::{check_resolvable, classify_unchecked, secs_to_ps, Picos, SlotClass};

/// Channel numbering shared by [`TimeTag`] files.
pub mod channel {
    pub const ALICE_D1: u8 = 1;
    pub const ALICE_D2: u8 = 2;
    pub const BOB_D1: u8 = 3;
    pub const BOB_D2: u8 = 4;
    pub const ALICE_SYNC: u8 = 5;
    pub const BOB_SYNC: u8 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub channel: u8,
    pub timestamp: u64,
}

/// One detector click seen by the coincidence logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tag {
    pub time: Picos,
    pub detector: Detector,
}

/// Which slot centers the matcher accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotSet {
    /// Centers `0` and `±delta_t`.
    #[default]
    All,
    /// Center `0` only.
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidenceConfig {
    /// Full acceptance width, seconds.
    pub window: f64,
    /// Bob-minus-Alice clock offset, seconds.
    pub offset: f64,
    pub delta_t: f64,
    pub slots: SlotSet,
}

impl CoincidenceConfig {
    fn in_ps(&self) -> Result<(Picos, Picos, Picos)> {
        let (w, off, dt) = (secs_to_ps(self.window), secs_to_ps(self.offset), secs_to_ps(self.delta_t));
        check_resolvable(dt, w)?;
        Ok((w, off, dt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceRecord {
    pub alice_detector: Detector,
    pub bob_detector: Detector,
    /// `t_Bob − t_Alice − offset`, picoseconds.
    pub delta_ps: Picos,
    pub slot: SlotClass,
}

impl CoincidenceRecord {
    pub fn delta(&self) -> f64 {
        self.delta_ps as f64 * 1e-12
    }
}

fn check_sorted(tags: &[Tag], name: &str) -> Result<()> {
    match tags.windows(2).position(|w| w[1].time < w[0].time) {
        Some(i) => Err(Error::Contract(format!("{name} stream is unsorted at index {}", i + 1))),
        None => Ok(()),
    }
}

/// Merges per-detector timestamp lists into one time-ordered stream.
pub fn merge_detectors(d1: &[Picos], d2: &[Picos]) -> Vec<Tag> {
    let mut out: Vec<Tag> = d1
        .iter()
        .map(|&t| Tag { time: t, detector: Detector::D1 })
        .chain(d2.iter().map(|&t| Tag { time: t, detector: Detector::D2 }))
        .collect();
    out.sort_by_key(|t| (t.time, t.detector.index()));
    out
}

/// Bob tags are processed in time order; each takes the earliest unused
/// Alice tag inside any accepted slot (lower index on ties). No tag enters
/// two records.
pub fn match_coincidences(alice: &[Tag], bob: &[Tag], cfg: &CoincidenceConfig) -> Result<Vec<CoincidenceRecord>> {
    check_sorted(alice, "alice")?;
    check_sorted(bob, "bob")?;
    let (w, off, dt) = cfg.in_ps()?;
    let reach = match cfg.slots {
        SlotSet::All => dt,
        SlotSet::Central => 0,
    };
    let half = w / 2 + 1;
    let mut used = vec![false; alice.len()];
    let mut lo = 0usize;
    let mut out = Vec::new();
    for b in bob {
        let target = b.time - off;
        while lo < alice.len() && alice[lo].time < target - reach - half {
            lo += 1;
        }
        let mut i = lo;
        while i < alice.len() && alice[i].time <= target + reach + half {
            if !used[i] {
                let delta = target - alice[i].time;
                let slot = classify_unchecked(delta, dt, w);
                let accepted = match (cfg.slots, slot) {
                    (_, SlotClass::Accidental) => false,
                    (SlotSet::Central, s) => s == SlotClass::Matched,
                    (SlotSet::All, _) => true,
                };
                if accepted {
                    used[i] = true;
                    out.push(CoincidenceRecord {
                        alice_detector: alice[i].detector,
                        bob_detector: b.detector,
                        delta_ps: delta,
                        slot,
                    });
                    break;
                }
            }
            i += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PostSelection {
    pub kept: Vec<CoincidenceRecord>,
    pub discarded: usize,
}

impl PostSelection {
    pub fn discarded_fraction(&self) -> f64 {
        let total = self.kept.len() + self.discarded;
        if total == 0 {
            0.0
        } else {
            self.discarded as f64 / total as f64
        }
    }
}

/// Keeps matched-slot records and counts the LS/SL ones removed.
pub fn franson_postselect(records: &[CoincidenceRecord]) -> PostSelection {
    let mut sel = PostSelection::default();
    for r in records {
        match r.slot {
            SlotClass::Matched => sel.kept.push(*r),
            s if s.is_mismatched() => sel.discarded += 1,
            _ => {}
        }
    }
    sel
}

pub fn count_outcomes(records: &[CoincidenceRecord]) -> CountsMatrix {
    let mut m = CountsMatrix::default();
    for r in records {
        m.add(r.alice_detector, r.bob_detector);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub offset_ps: f64,
    /// Counts in the coarse peak bin.
    pub peak: u64,
    /// Median coarse bin height.
    pub background: f64,
}

impl OffsetEstimate {
    pub fn offset_seconds(&self) -> f64 {
        self.offset_ps * 1e-12
    }
}

const COARSE_FACTOR: i64 = 16;
const MAX_COARSE_BINS: i64 = 1 << 20;
const PEAK_SIGNIFICANCE: f64 = 5.0;

/// Offset of `received` relative to `sent` from the cross-correlation of
/// the two pulse trains over lags in `±search_span`.
///
/// A coarse histogram (16 fine bins per coarse bin) locates the peak,
/// which must clear five times the median and mean bin height and stand
/// eight Poisson deviations above it; a histogram at resolution `bin` around it
/// gives the argmax, refined by the mean lag over the peak bin ± 1.
pub fn recover_offset(sent: &[Picos], received: &[Picos], search_span: f64, bin: f64) -> Result<OffsetEstimate> {
    let span = secs_to_ps(search_span);
    let bin_ps = secs_to_ps(bin);
    if span <= 0 || bin_ps <= 0 {
        return Err(Error::config("tagger.sync", "search span and bin must be positive"));
    }
    if sent.windows(2).any(|w| w[1] < w[0]) || received.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract("sync streams must be sorted".into()));
    }
    let mut lags = Vec::new();
    let mut lo = 0usize;
    for &r in received {
        while lo < sent.len() && sent[lo] < r - span {
            lo += 1;
        }
        let mut i = lo;
        while i < sent.len() && sent[i] <= r + span {
            lags.push(r - sent[i]);
            i += 1;
        }
    }
    if lags.is_empty() {
        return Err(Error::Sync("no pulse pairs within the search span".into()));
    }
    let coarse = (bin_ps * COARSE_FACTOR).max((2 * span + 1) / MAX_COARSE_BINS + 1);
    let n_coarse = ((2 * span) / coarse + 1) as usize;
    let mut hist = vec![0u64; n_coarse];
    for &l in &lags {
        hist[((l + span) / coarse) as usize] += 1;
    }
    let (peak_idx, &peak) = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty histogram");
    let mut sorted = hist.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2] as f64;
    let mean = lags.len() as f64 / n_coarse as f64;
    let floor = median.max(mean).max(1.0);
    if (peak as f64) < PEAK_SIGNIFICANCE * floor || (peak as f64) < floor + 8.0 * floor.sqrt() + 8.0 {
        return Err(Error::Sync(format!(
            "no significant correlation peak (peak {peak}, background {floor:.2})"
        )));
    }
    let lo_edge = -span + peak_idx as Picos * coarse - coarse;
    let hi_edge = lo_edge + 3 * coarse;
    let n_fine = ((hi_edge - lo_edge) / bin_ps + 1) as usize;
    let mut fine = vec![0u64; n_fine];
    for &l in &lags {
        if l >= lo_edge && l < hi_edge {
            fine[((l - lo_edge) / bin_ps) as usize] += 1;
        }
    }
    let (fi, _) = fine
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty fine histogram");
    let c_lo = lo_edge + (fi as Picos - 1) * bin_ps;
    let c_hi = lo_edge + (fi as Picos + 2) * bin_ps;
    let (sum, n) = lags
        .iter()
        .filter(|&&l| l >= c_lo && l < c_hi)
        .fold((0f64, 0u64), |(s, n), &l| (s + l as f64, n + 1));
    Ok(OffsetEstimate {
        offset_ps: sum / n as f64,
        peak,
        background: median,
    })
}

/// Uniform-background accidental coincidence rate for a window of full
/// width `window`.
pub fn accidental_rate(rate_a: f64, rate_b: f64, window: f64) -> f64 {
    rate_a * rate_b * window
}

/// Pairs `(a, b)` with `|b − a − center| ≤ window/2`, not one-to-one.
/// With `center` far from any true correlation this measures accidentals.
pub fn count_window_pairs(alice: &[Picos], bob: &[Picos], center: Picos, window: Picos) -> u64 {
    let mut lo = 0usize;
    let mut n = 0u64;
    for &b in bob {
        let target = b - center;
        while lo < alice.len() && 2 * (target - alice[lo]) > window {
            lo += 1;
        }
        let mut i = lo;
        while i < alice.len() && 2 * (alice[i] - target) <= window {
            n += 1;
            i += 1;
        }
    }
    n
}

const BINARY_HEADER: &[u8] = b"HUGTAGS v1\n";
const RECORD_BYTES: usize = 9;

pub fn write_binary(path: &FsPath, tags: &[TimeTag]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(BINARY_HEADER)?;
        for t in tags {
            w.write_all(&[t.channel])?;
            w.write_all(&t.timestamp.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: &FsPath) -> Result<Vec<TimeTag>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let format = |message: String| Error::Format { path: path.to_path_buf(), message };
    let body = bytes
        .strip_prefix(BINARY_HEADER)
        .ok_or_else(|| format("missing or unsupported header".into()))?;
    if body.len() % RECORD_BYTES != 0 {
        return Err(format(format!("truncated record ({} trailing bytes)", body.len() % RECORD_BYTES)));
    }
    Ok(body
        .chunks_exact(RECORD_BYTES)
        .map(|c| TimeTag {
            channel: c[0],
            timestamp: u64::from_le_bytes(c[1..].try_into().expect("8 bytes")),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CsvTag {
    channel: u8,
    timestamp_ps: u64,
}

pub fn write_csv(path: &FsPath, tags: &[TimeTag]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for t in tags {
        w.serialize(CsvTag { channel: t.channel, timestamp_ps: t.timestamp })
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &FsPath) -> Result<Vec<TimeTag>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<CsvTag>()
        .map(|row| {
            row.map(|t| TimeTag { channel: t.channel, timestamp: t.timestamp_ps })
                .map_err(|e| csv_error(path, e))
        })
        .collect()
}

fn csv_error(path: &FsPath, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Serialize)]
struct CsvRecord {
    alice_detector: u8,
    bob_detector: u8,
    delta_ps: Picos,
    slot: &'static str,
}

pub fn write_coincidences_csv(path: &FsPath, records: &[CoincidenceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(CsvRecord {
            alice_detector: r.alice_detector.index(),
            bob_detector: r.bob_detector.index(),
            delta_ps: r.delta_ps,
            slot: r.slot.label(),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Timestamps per channel `1..=6`, each sorted.
pub fn split_channels(tags: &[TimeTag]) -> Result<[Vec<Picos>; 6]> {
    let mut out: [Vec<Picos>; 6] = Default::default();
    for t in tags {
        if !(1..=6).contains(&t.channel) {
            return Err(Error::Contract(format!("unknown channel {}", t.channel)));
        }
        let ts = Picos::try_from(t.timestamp)
            .map_err(|_| Error::Contract(format!("timestamp {} out of range", t.timestamp)))?;
        out[t.channel as usize - 1].push(ts);
    }
    for v in out.iter_mut() {
        v.sort_unstable();
    }
    Ok(out)
}

/// Interleaves channel streams into one file-ordered tag list.
pub fn interleave(channels: &[(u8, &[Picos])]) -> Result<Vec<TimeTag>> {
    let mut out = Vec::with_capacity(channels.iter().map(|c| c.1.len()).sum());
    for &(channel, times) in channels {
        for &t in times {
            let timestamp = u64::try_from(t).map_err(|_| Error::Contract(format!("negative timestamp {t} ps")))?;
            out.push(TimeTag { channel, timestamp });
        }
    }
    out.sort_by_key(|t| (t.timestamp, t.channel));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force_match, random_tags};
    use crate::rng::{substream, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(offset_ns: f64) -> CoincidenceConfig {
        CoincidenceConfig { window: 1e-9, offset: offset_ns * 1e-9, delta_t: 10e-9, slots: SlotSet::All }
    }

    fn tags(ts: &[Picos]) -> Vec<Tag> {
        ts.iter().map(|&t| Tag { time: t, detector: Detector::D1 }).collect()
    }

    #[test]
    fn single_matched_record() {
        let r = match_coincidences(&tags(&[0]), &tags(&[18_500]), &cfg(18.5)).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].delta_ps, 0);
        assert_eq!(r[0].slot, SlotClass::Matched);
    }

    #[test]
    fn outside_every_slot() {
        let r = match_coincidences(&tags(&[0]), &tags(&[18_500 + 2_000]), &cfg(18.5)).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn edge_of_window_is_inclusive() {
        let r = match_coincidences(&tags(&[0]), &tags(&[500]), &cfg(0.0)).unwrap();
        assert_eq!(r.len(), 1);
        let r = match_coincidences(&tags(&[0]), &tags(&[501]), &cfg(0.0)).unwrap();
        assert!(r.is_empty());
        let r = match_coincidences(&tags(&[0]), &tags(&[10_000 - 500]), &cfg(0.0)).unwrap();
        assert_eq!(r[0].slot, SlotClass::LS);
    }

    #[test]
    fn unsorted_is_contract_error() {
        let e = match_coincidences(&tags(&[5, 1]), &tags(&[0]), &cfg(0.0)).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }

    #[test]
    fn central_slots_never_report_mismatched() {
        let c = CoincidenceConfig { slots: SlotSet::Central, ..cfg(0.0) };
        let r = match_coincidences(&tags(&[0, 100_000]), &tags(&[10_000, 100_000]), &c).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].slot, SlotClass::Matched);
    }

    #[test]
    fn postselect_empty() {
        let s = franson_postselect(&[]);
        assert!(s.kept.is_empty());
        assert_eq!(s.discarded, 0);
    }

    #[test]
    fn accidental_formula() {
        assert!((accidental_rate(300_000.0, 9_000.0, 1e-9) - 2.7).abs() < 1e-12);
        assert_eq!(accidental_rate(1e5, 0.0, 1e-9), 0.0);
    }

    #[test]
    fn matches_brute_force_on_dense_streams() {
        let mut rng = substream(1, Purpose::Init, 0, 0);
        let a = random_tags(&mut rng, 1000, 2_000_000);
        let b = random_tags(&mut rng, 1000, 2_000_000);
        let c = cfg(0.3);
        assert_eq!(match_coincidences(&a, &b, &c).unwrap(), brute_force_match(&a, &b, &c).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn streaming_equals_brute_force(seed in any::<u64>(), na in 0usize..300, nb in 0usize..300, span in 1_000i64..400_000, off in -30_000i64..30_000, central in any::<bool>()) {
            let mut rng = substream(seed, Purpose::Init, 1, 0);
            let a = random_tags(&mut rng, na, span);
            let b = random_tags(&mut rng, nb, span);
            let c = CoincidenceConfig { offset: off as f64 * 1e-12, slots: if central { SlotSet::Central } else { SlotSet::All }, ..cfg(0.0) };
            let fast = match_coincidences(&a, &b, &c).unwrap();
            prop_assert_eq!(&fast, &brute_force_match(&a, &b, &c).unwrap());
            prop_assert!(fast.len() <= na.min(nb));
        }

        #[test]
        fn shift_invariance(seed in any::<u64>(), shift in -1_000_000i64..1_000_000) {
            let mut rng = substream(seed, Purpose::Init, 2, 0);
            let a = random_tags(&mut rng, 200, 100_000);
            let b = random_tags(&mut rng, 200, 100_000);
            let base = match_coincidences(&a, &b, &cfg(0.0)).unwrap();
            let shifted: Vec<Tag> = b.iter().map(|t| Tag { time: t.time + shift, ..*t }).collect();
            let c = CoincidenceConfig { offset: shift as f64 * 1e-12, ..cfg(0.0) };
            prop_assert_eq!(base, match_coincidences(&a, &shifted, &c).unwrap());
        }
    }

    fn sync_pair(seed: u64, n: usize, delay: Picos, loss: f64) -> (Vec<Picos>, Vec<Picos>) {
        let mut rng = substream(seed, Purpose::Sync, 0, 0);
        let mut t = 0;
        let mut origin = Vec::with_capacity(n);
        for _ in 0..n {
            t += rng.random_range(1_000..20_000_000);
            origin.push(t);
        }
        let keep = |v: &Vec<Picos>, d: Picos, rng: &mut crate::rng::SimRng| -> Vec<Picos> {
            v.iter().filter(|_| !rng.random_bool(loss)).map(|&x| x + d).collect()
        };
        let sent = keep(&origin, 0, &mut rng);
        let received = keep(&origin, delay, &mut rng);
        (sent, received)
    }

    #[test]
    fn offset_recovered_through_loss() {
        let (s, r) = sync_pair(3, 10_000, 18_500_000, 0.5);
        let est = recover_offset(&s, &r, 50e-6, 100e-12).unwrap();
        assert!((est.offset_ps - 18_500_000.0).abs() <= 50.0, "{est:?}");
    }

    #[test]
    fn identical_streams_zero_offset() {
        let (s, _) = sync_pair(4, 5_000, 0, 0.0);
        let est = recover_offset(&s, &s, 50e-6, 100e-12).unwrap();
        assert!(est.offset_ps.abs() <= 50.0);
    }

    #[test]
    fn independent_streams_fail_to_sync() {
        let (s, _) = sync_pair(5, 10_000, 0, 0.0);
        let (r, _) = sync_pair(6, 10_000, 0, 0.0);
        let e = recover_offset(&s, &r, 50e-6, 100e-12).unwrap_err();
        assert!(matches!(e, Error::Sync(_)));
    }

    #[test]
    fn window_pair_counting() {
        assert_eq!(count_window_pairs(&[0, 10], &[500, 1_000], 0, 1_000), 2);
        assert_eq!(count_window_pairs(&[0], &[100_500], 100_000, 1_000), 1);
        assert_eq!(count_window_pairs(&[0], &[100_501], 100_000, 1_000), 0);
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let tags = vec![
            TimeTag { channel: 1, timestamp: 0 },
            TimeTag { channel: 3, timestamp: 18_500_123 },
            TimeTag { channel: 6, timestamp: u64::MAX },
        ];
        let bin = dir.path().join("t.bin");
        write_binary(&bin, &tags).unwrap();
        assert_eq!(read_binary(&bin).unwrap(), tags);
        let csv = dir.path().join("t.csv");
        write_csv(&csv, &tags).unwrap();
        assert_eq!(read_csv(&csv).unwrap(), tags);
        assert!(std::fs::read_to_string(&csv).unwrap().starts_with("channel,timestamp_ps\n"));

        std::fs::write(&bin, b"HUGTAGS v1\n\x01\x00").unwrap();
        assert!(matches!(read_binary(&bin), Err(Error::Format { .. })));
        std::fs::write(&bin, b"NOPE").unwrap();
        assert!(matches!(read_binary(&bin), Err(Error::Format { .. })));
    }
}
