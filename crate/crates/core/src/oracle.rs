//! Independent reference computations: a quadratic-time matcher, numerical
//! quadrature of the faking strategy's statistics, and named self-checks.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2, TAU};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lhv::{deterministic_bound_check_with, faking_strategy, run_lhv_with, strategy_by_name};
use crate::qmodel::{chsh_value, critical_visibility, Detector, PhaseConvention, SettingsQuad, Visibility};
use crate::rng::{substream, Purpose, SimRng};
use crate::tagger::{accidental_rate, count_window_pairs, match_coincidences, CoincidenceConfig, CoincidenceRecord, SlotSet, Tag};
use crate::topology::{classify_unchecked, secs_to_ps, Geometry, Picos, SlotClass};

/// Reference matcher: for each Bob tag in order, scan every Alice tag and
/// take the first unused one inside an accepted slot.
pub fn brute_force_match(alice: &[Tag], bob: &[Tag], cfg: &CoincidenceConfig) -> Result<Vec<CoincidenceRecord>> {
    let w = secs_to_ps(cfg.window);
    let off = secs_to_ps(cfg.offset);
    let dt = secs_to_ps(cfg.delta_t);
    crate::topology::check_resolvable(dt, w)?;
    let mut used = vec![false; alice.len()];
    let mut out = Vec::new();
    for b in bob {
        for (i, a) in alice.iter().enumerate() {
            if used[i] {
                continue;
            }
            let delta = b.time - off - a.time;
            let slot = classify_unchecked(delta, dt, w);
            let ok = match cfg.slots {
                SlotSet::All => slot != SlotClass::Accidental,
                SlotSet::Central => slot == SlotClass::Matched,
            };
            if ok {
                used[i] = true;
                out.push(CoincidenceRecord { alice_detector: a.detector, bob_detector: b.detector, delta_ps: delta, slot });
                break;
            }
        }
    }
    Ok(out)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// `∫₀^{2π} f`, with `breaks` marking where `f` may be discontinuous.
fn integrate_periodic(f: impl Fn(f64) -> f64, breaks: &[f64]) -> f64 {
    let mut pts: Vec<f64> = breaks.iter().map(|b| b.rem_euclid(TAU)).collect();
    pts.push(0.0);
    pts.push(TAU);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let nodes = gauss_legendre(24);
    pts.windows(2)
        .map(|w| {
            let (mid, half) = ((w[0] + w[1]) / 2.0, (w[1] - w[0]) / 2.0);
            half * nodes.iter().map(|&(x, wt)| wt * f(mid + half * x)).sum::<f64>()
        })
        .sum()
}

fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Faking-strategy statistics at effective phase `delta`, by quadrature
/// over the uniform angle: `(post-selected E, selection rate, full E)`.
pub fn faking_statistics(delta: f64) -> (f64, f64, f64) {
    // Bob's local angle is u, Alice's is u + delta
    let breaks = [FRAC_PI_2, 3.0 * FRAC_PI_2, FRAC_PI_2 - delta, 3.0 * FRAC_PI_2 - delta];
    let keep = integrate_periodic(|u| u.cos().abs(), &breaks);
    let post = integrate_periodic(|u| sgn((u + delta).cos()) * sgn(u.cos()) * u.cos().abs(), &breaks);
    let full = integrate_periodic(|u| sgn((u + delta).cos()) * sgn(u.cos()), &breaks);
    (post / keep, keep / TAU, full / TAU)
}

/// Faking-strategy CHSH values `(post-selected, full-sample)` on `quad`.
pub fn faking_chsh(quad: &SettingsQuad, conv: PhaseConvention) -> (f64, f64) {
    let signs = [1.0, 1.0, 1.0, -1.0];
    quad.pairs().iter().zip(signs).fold((0.0, 0.0), |(p, f), (&(a, b), s)| {
        let (ep, _, ef) = faking_statistics(conv.effective_phase(a, b));
        (p + s * ep, f + s * ef)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const CHECK_NAMES: [&str; 6] = ["tsirelson", "faking-quadrature", "hug-bound", "matcher", "accidentals", "sync"];

/// Runs one named check, or all of them for `"all"`.
pub fn run_check(name: &str, exec: Execution) -> Result<Vec<CheckOutcome>> {
    if name == "all" {
        return CHECK_NAMES.iter().map(|n| single(n, exec)).collect();
    }
    Ok(vec![single(name, exec)?])
}

fn single(name: &str, exec: Execution) -> Result<CheckOutcome> {
    let conv = PhaseConvention::Difference;
    let quad = SettingsQuad::canonical(conv);
    let (name, passed, detail): (&'static str, bool, String) = match name {
        "tsirelson" => {
            let s1 = chsh_value(&quad, Visibility::ONE, conv);
            let sc = chsh_value(&quad, critical_visibility(), conv);
            ("tsirelson", (s1 - 2.0 * SQRT_2).abs() < 1e-12 && (sc - 2.0).abs() < 1e-12, format!("S(1) = {s1:.15}, S(1/√2) = {sc:.15}"))
        }
        "faking-quadrature" => {
            let (sp, sf) = faking_chsh(&quad, conv);
            let r = run_lhv_with(Geometry::Franson, &faking_strategy(conv), &quad, 1_000_000, 1, exec)?;
            let ok = (r.s_postselected.s_hat - sp).abs() <= 3.0 * r.s_postselected.std_err
                && (r.s_full.s_hat - sf).abs() <= 3.0 * r.s_full.std_err;
            (
                "faking-quadrature",
                ok,
                format!(
                    "quadrature S_post = {sp:.6}, S_full = {sf:.6}; simulated {:.4} ± {:.4}, {:.4} ± {:.4}",
                    r.s_postselected.s_hat, r.s_postselected.std_err, r.s_full.s_hat, r.s_full.std_err
                ),
            )
        }
        "hug-bound" => {
            let b = deterministic_bound_check_with(Geometry::Hug, exec);
            let coin = strategy_by_name("coin", conv)?;
            let r = run_lhv_with(Geometry::Hug, &coin, &quad, 200_000, 2, exec)?;
            let ok = b.max_s <= 2.0 + 1e-12 && r.s_postselected.within_local_bound(3.0);
            ("hug-bound", ok, format!("max deterministic S = {:.6}; coin strategy S = {:.4} ± {:.4}", b.max_s, r.s_postselected.s_hat, r.s_postselected.std_err))
        }
        "matcher" => {
            let mut rng = substream(7, Purpose::Init, 0, 0);
            let mut bad = 0;
            for k in 0..100 {
                let cfg = CoincidenceConfig {
                    window: 1e-9,
                    offset: rng.random_range(-20e-9..20e-9),
                    delta_t: 10e-9,
                    slots: if k % 2 == 0 { SlotSet::All } else { SlotSet::Central },
                };
                let a = random_tags(&mut rng, 500, 1_000_000);
                let b = random_tags(&mut rng, 500, 1_000_000);
                if match_coincidences(&a, &b, &cfg)? != brute_force_match(&a, &b, &cfg)? {
                    bad += 1;
                }
            }
            ("matcher", bad == 0, format!("{bad} of 100 instances differ"))
        }
        "accidentals" => {
            let (ra, rb, w, t) = (1e5, 1e5, 1e-9, 10.0);
            let mut rng = substream(8, Purpose::Init, 0, 0);
            let a = poisson_stream(&mut rng, ra, t);
            let b = poisson_stream(&mut rng, rb, t);
            let n = count_window_pairs(&a, &b, 0, secs_to_ps(w)) as f64;
            let expected = accidental_rate(ra, rb, w) * t;
            ("accidentals", (n - expected).abs() <= 3.0 * expected.sqrt(), format!("measured {n}, expected {expected:.1}"))
        }
        "sync" => {
            let mut rng = substream(9, Purpose::Init, 0, 0);
            let origin = poisson_stream(&mut rng, 1e4, 1.0);
            let delay = 18_500_000;
            let sent: Vec<Picos> = origin.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            let received: Vec<Picos> = origin.iter().filter(|_| rng.random_bool(0.5)).map(|t| t + delay).collect();
            let est = crate::tagger::recover_offset(&sent, &received, 100e-6, 100e-12)?;
            ("sync", (est.offset_ps - delay as f64).abs() <= 50.0, format!("recovered {:.1} ps for {delay} ps", est.offset_ps))
        }
        other => {
            return Err(Error::config(
                "oracle",
                format!("unknown check {other:?}; expected one of {} or all", CHECK_NAMES.join(", ")),
            ))
        }
    };
    Ok(CheckOutcome { name, passed, detail })
}

pub fn random_tags(rng: &mut SimRng, n: usize, span: Picos) -> Vec<Tag> {
    let mut v: Vec<Tag> = (0..n)
        .map(|_| Tag {
            time: rng.random_range(0..span),
            detector: if rng.random_bool(0.5) { Detector::D1 } else { Detector::D2 },
        })
        .collect();
    v.sort_by_key(|t| (t.time, t.detector.index()));
    v
}

/// Independent Poisson timestamps at `rate` over `duration` seconds, drawn
/// by uniform order statistics rather than exponential gaps.
pub fn poisson_stream(rng: &mut SimRng, rate: f64, duration: f64) -> Vec<Picos> {
    let n = rand_distr::Poisson::new(rate * duration)
        .map(|p| rng.sample(p) as usize)
        .unwrap_or(0);
    let end = secs_to_ps(duration);
    let mut v: Vec<Picos> = (0..n).map(|_| rng.random_range(0..end)).collect();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_polynomials_and_trig() {
        let nodes = gauss_legendre(24);
        let s: f64 = nodes.iter().map(|&(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-14);
        assert!((integrate_periodic(|u| u.cos().abs(), &[FRAC_PI_2, 3.0 * FRAC_PI_2]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn faking_strategy_closed_forms() {
        for k in 0..16 {
            let d = -PI + k as f64 * TAU / 16.0 + 0.01;
            let (post, rate, full) = faking_statistics(d);
            assert!((post - d.cos()).abs() < 1e-12, "{d}");
            assert!((rate - 2.0 / PI).abs() < 1e-12);
            let wrapped = (d + PI).rem_euclid(TAU) - PI;
            assert!((full - (1.0 - 2.0 * wrapped.abs() / PI)).abs() < 1e-12);
        }
        let (sp, sf) = faking_chsh(&SettingsQuad::canonical(PhaseConvention::Difference), PhaseConvention::Difference);
        assert!((sp - 2.0 * SQRT_2).abs() < 1e-12);
        assert!((sf - 2.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_stream_counts() {
        let mut rng = substream(1, Purpose::Init, 9, 0);
        let v = poisson_stream(&mut rng, 1000.0, 10.0);
        assert!((v.len() as f64 - 1e4).abs() < 400.0);
    }

    #[test]
    fn cheap_checks_pass() {
        for name in ["tsirelson", "matcher", "accidentals", "sync"] {
            let out = run_check(name, Execution::default()).unwrap();
            assert!(out[0].passed, "{}: {}", name, out[0].detail);
        }
        assert!(run_check("nope", Execution::default()).is_err());
    }
}
