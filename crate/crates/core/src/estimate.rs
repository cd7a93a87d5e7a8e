//! Correlation, CHSH and fringe-visibility estimators working on raw
//! (non-background-subtracted) coincidence counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmodel::{Detector, LOCAL_BOUND};

/// 2×2 coincidence counts for one setting pair; `nXY` is Alice's detector
/// X with Bob's detector Y.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsMatrix {
    pub n11: u64,
    pub n12: u64,
    pub n21: u64,
    pub n22: u64,
}

impl CountsMatrix {
    pub const fn new(n11: u64, n12: u64, n21: u64, n22: u64) -> Self {
        Self { n11, n12, n21, n22 }
    }

    pub fn add(&mut self, alice: Detector, bob: Detector) {
        *self.get_mut(alice, bob) += 1;
    }

    pub fn get(&self, alice: Detector, bob: Detector) -> u64 {
        match (alice, bob) {
            (Detector::D1, Detector::D1) => self.n11,
            (Detector::D1, Detector::D2) => self.n12,
            (Detector::D2, Detector::D1) => self.n21,
            (Detector::D2, Detector::D2) => self.n22,
        }
    }

    fn get_mut(&mut self, alice: Detector, bob: Detector) -> &mut u64 {
        match (alice, bob) {
            (Detector::D1, Detector::D1) => &mut self.n11,
            (Detector::D1, Detector::D2) => &mut self.n12,
            (Detector::D2, Detector::D1) => &mut self.n21,
            (Detector::D2, Detector::D2) => &mut self.n22,
        }
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n12 + self.n21 + self.n22
    }

    pub fn merge(&mut self, other: &CountsMatrix) {
        self.n11 += other.n11;
        self.n12 += other.n12;
        self.n21 += other.n21;
        self.n22 += other.n22;
    }

    /// Every cell of `self` is at most the matching cell of `other`.
    pub fn dominated_by(&self, other: &CountsMatrix) -> bool {
        self.n11 <= other.n11 && self.n12 <= other.n12 && self.n21 <= other.n21 && self.n22 <= other.n22
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub e_hat: f64,
    pub std_err: f64,
    pub n_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellResult {
    pub s_hat: f64,
    pub std_err: f64,
    /// `(s_hat − 2) / std_err`; infinite when the error vanishes.
    #[serde(with = "signed_infinity")]
    pub sigmas_above_2: f64,
    /// Always true here: no accidental subtraction is ever applied.
    pub raw: bool,
}

impl BellResult {
    /// `s_hat ≤ 2 + k·σ`.
    pub fn within_local_bound(&self, k: f64) -> bool {
        self.s_hat <= LOCAL_BOUND + k * self.std_err
    }
}

/// JSON has no infinities; they travel as the strings `"inf"`/`"-inf"`.
mod signed_infinity {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => Repr::Text("inf".into()),
            f64::NEG_INFINITY => Repr::Text("-inf".into()),
            x => Repr::Finite(x),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad sigma value `{t}`"))),
        }
    }
}

/// `E = (n11 + n22 − n12 − n21) / N` with multinomial error
/// `√((1 − E²)/N)`.
pub fn estimate_e(counts: &CountsMatrix) -> Result<CorrelationEstimate> {
    let n = counts.total();
    if n == 0 {
        return Err(Error::Estimation("no coincidences for this setting".into()));
    }
    let same = (counts.n11 + counts.n22) as f64;
    let diff = (counts.n12 + counts.n21) as f64;
    let e_hat = (same - diff) / n as f64;
    let std_err = ((1.0 - e_hat * e_hat).max(0.0) / n as f64).sqrt();
    Ok(CorrelationEstimate {
        e_hat,
        std_err,
        n_total: n,
    })
}

fn bell(s_hat: f64, std_err: f64) -> BellResult {
    let sigmas_above_2 = if std_err > 0.0 {
        (s_hat - LOCAL_BOUND) / std_err
    } else if s_hat > LOCAL_BOUND {
        f64::INFINITY
    } else if s_hat < LOCAL_BOUND {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    BellResult {
        s_hat,
        std_err,
        sigmas_above_2,
        raw: true,
    }
}

/// `S = E1 + E2 + E3 − E4` for four disjoint measurements, errors added in
/// quadrature.
pub fn estimate_s(estimates: &[CorrelationEstimate; 4]) -> BellResult {
    let s_hat = estimates[0].e_hat + estimates[1].e_hat + estimates[2].e_hat - estimates[3].e_hat;
    let std_err = estimates.iter().map(|e| e.std_err * e.std_err).sum::<f64>().sqrt();
    bell(s_hat, std_err)
}

/// Same as [`estimate_s`] but starting from counts, so zero-count settings
/// surface as estimation errors.
pub fn estimate_s_from_counts(counts: &[CountsMatrix; 4]) -> Result<BellResult> {
    let e = [
        estimate_e(&counts[0])?,
        estimate_e(&counts[1])?,
        estimate_e(&counts[2])?,
        estimate_e(&counts[3])?,
    ];
    Ok(estimate_s(&e))
}

/// `3·E1 − E2` for the fixed-Bob symmetric procedure.
pub fn estimate_s_fixed_bob(main: &CorrelationEstimate, prime: &CorrelationEstimate) -> BellResult {
    let s_hat = 3.0 * main.e_hat - prime.e_hat;
    let std_err = (9.0 * main.std_err * main.std_err + prime.std_err * prime.std_err).sqrt();
    bell(s_hat, std_err)
}

/// One point of a fringe scan: a phase and the counts that go with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringePoint {
    pub phase: f64,
    pub counts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub visibility: f64,
    pub visibility_err: f64,
    /// `φ0` in `N(φ) = A·[1 + V·cos(φ + φ0)]`.
    pub phase_offset: f64,
    pub phase_offset_err: f64,
    /// `A`.
    pub baseline: f64,
    pub baseline_err: f64,
    pub iterations: usize,
    pub chi2: f64,
}

const FIT_MAX_ITER: usize = 50;
const FIT_TOL: f64 = 1e-12;

/// Poisson-weighted least squares of `A·[1 + V·cos(φ + φ0)]`.
///
/// The model is linear in `(a, b, c)` for `a + b·cos φ + c·sin φ`; weights
/// are refreshed from the fitted model until the coefficients settle.
pub fn fit_fringe(points: &[FringePoint]) -> Result<FringeFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|p| !p.counts.is_finite() || p.counts < 0.0 || !p.phase.is_finite()) {
        return Err(Error::Fit("counts must be finite and non-negative".into()));
    }
    // initial weights from the data, floored at one count
    let mut weights: Vec<f64> = points.iter().map(|p| 1.0 / p.counts.max(1.0)).collect();
    let mut coef = [0.0f64; 3];
    let mut cov = [[0.0f64; 3]; 3];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < FIT_MAX_ITER {
        iterations += 1;
        let (next, next_cov) = weighted_lsq(points, &weights)?;
        let change = (0..3)
            .map(|i| (next[i] - coef[i]).abs())
            .fold(0.0, f64::max);
        let scale = next[0].abs().max(1e-300);
        coef = next;
        cov = next_cov;
        if change / scale < FIT_TOL {
            converged = true;
            break;
        }
        for (w, p) in weights.iter_mut().zip(points) {
            let model = coef[0] + coef[1] * p.phase.cos() + coef[2] * p.phase.sin();
            *w = 1.0 / model.max(1.0);
        }
    }
    let chi2: f64 = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| {
            let r = p.counts - (coef[0] + coef[1] * p.phase.cos() + coef[2] * p.phase.sin());
            w * r * r
        })
        .sum();
    if !converged {
        return Err(Error::Fit(format!(
            "no convergence after {FIT_MAX_ITER} iterations (chi2 = {chi2:.3})"
        )));
    }
    let [a, b, c] = coef;
    if a <= 0.0 {
        return Err(Error::Fit(format!("non-positive baseline {a:.3e} (chi2 = {chi2:.3})")));
    }
    let amp = (b * b + c * c).sqrt();
    let visibility = amp / a;
    // b = A·V·cos φ0, c = −A·V·sin φ0
    let phase_offset = (-c).atan2(b);

    // delta method
    let var = |g: [f64; 3]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += g[i] * cov[i][j] * g[j];
            }
        }
        s.max(0.0)
    };
    let (g_v, g_phi) = if amp > 0.0 {
        (
            [-amp / (a * a), b / (amp * a), c / (amp * a)],
            [0.0, c / (amp * amp), -b / (amp * amp)],
        )
    } else {
        // at zero amplitude the visibility error is the radial spread
        let r = (cov[1][1] + cov[2][2]).sqrt() / a;
        return Ok(FringeFit {
            visibility,
            visibility_err: r,
            phase_offset: 0.0,
            phase_offset_err: std::f64::consts::PI,
            baseline: a,
            baseline_err: cov[0][0].sqrt(),
            iterations,
            chi2,
        });
    };
    Ok(FringeFit {
        visibility,
        visibility_err: var(g_v).sqrt(),
        phase_offset,
        phase_offset_err: var(g_phi).sqrt(),
        baseline: a,
        baseline_err: cov[0][0].sqrt(),
        iterations,
        chi2,
    })
}

fn weighted_lsq(points: &[FringePoint], weights: &[f64]) -> Result<([f64; 3], [[f64; 3]; 3])> {
    let mut m = [[0.0f64; 3]; 3];
    let mut v = [0.0f64; 3];
    for (p, &w) in points.iter().zip(weights) {
        let x = [1.0, p.phase.cos(), p.phase.sin()];
        for i in 0..3 {
            v[i] += w * x[i] * p.counts;
            for j in 0..3 {
                m[i][j] += w * x[i] * x[j];
            }
        }
    }
    let inv = invert3(&m).ok_or_else(|| {
        Error::Fit("design matrix is singular; phases do not span the fringe".into())
    })?;
    let mut coef = [0.0; 3];
    for i in 0..3 {
        coef[i] = (0..3).map(|j| inv[i][j] * v[j]).sum();
    }
    Ok((coef, inv))
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale = m.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
    if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    Some(inv)
}

/// Unweighted mean and sample standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn infinite_sigmas_survive_json() {
        let b = bell(4.0, 0.0);
        let text = serde_json::to_string(&b).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<BellResult>(&text).unwrap(), b);
    }

    #[test]
    fn e_examples() {
        let e = estimate_e(&CountsMatrix::new(25, 25, 25, 25)).unwrap();
        assert_eq!(e.e_hat, 0.0);
        assert!((e.std_err - 0.1).abs() < 1e-15);

        let e = estimate_e(&CountsMatrix::new(90, 10, 10, 90)).unwrap();
        assert!((e.e_hat - 0.8).abs() < 1e-15);
        assert!((e.std_err - (0.36f64 / 200.0).sqrt()).abs() < 1e-15);
        assert!((e.std_err - 0.0424).abs() < 1e-4);

        let e = estimate_e(&CountsMatrix::new(100, 0, 0, 100)).unwrap();
        assert_eq!((e.e_hat, e.std_err), (1.0, 0.0));
    }

    #[test]
    fn zero_counts_is_an_error() {
        assert!(matches!(estimate_e(&CountsMatrix::default()), Err(Error::Estimation(_))));
        let counts = [
            CountsMatrix::new(1, 0, 0, 1),
            CountsMatrix::new(1, 0, 0, 1),
            CountsMatrix::default(),
            CountsMatrix::new(1, 0, 0, 1),
        ];
        assert!(estimate_s_from_counts(&counts).is_err());
    }

    #[test]
    fn s_examples() {
        let mk = |e: f64, s: f64| CorrelationEstimate { e_hat: e, std_err: s, n_total: 1 };
        let r = estimate_s(&[mk(1.0, 0.0), mk(1.0, 0.0), mk(1.0, 0.0), mk(-1.0, 0.0)]);
        assert_eq!(r.s_hat, 4.0);
        assert!(r.raw);
        // 2.32 ± 0.11 → 2.909 σ
        let r = bell(2.32, 0.11);
        assert!((r.sigmas_above_2 - 2.909_090_9).abs() < 1e-6);
        let e = 0.58;
        let r = estimate_s(&[mk(e, 0.05), mk(e, 0.05), mk(e, 0.05), mk(-e, 0.05)]);
        assert!((r.std_err - 0.1).abs() < 1e-15);
    }

    #[test]
    fn noiseless_fringe_recovered_exactly() {
        let pts: Vec<FringePoint> = (0..16)
            .map(|k| {
                let phase = TAU * k as f64 / 16.0;
                FringePoint { phase, counts: 200.0 * (1.0 + 0.75 * (phase + 0.4).cos()) }
            })
            .collect();
        let fit = fit_fringe(&pts).unwrap();
        assert!((fit.visibility - 0.75).abs() < 1e-9);
        assert!((fit.phase_offset - 0.4).abs() < 1e-9);
        assert!((fit.baseline - 200.0).abs() < 1e-7);
    }

    #[test]
    fn flat_scan_has_zero_visibility() {
        let pts: Vec<FringePoint> = (0..12)
            .map(|k| FringePoint { phase: TAU * k as f64 / 12.0, counts: 50.0 })
            .collect();
        let fit = fit_fringe(&pts).unwrap();
        assert!(fit.visibility < 1e-9);
        assert!(fit.visibility_err > 0.0);
    }

    #[test]
    fn degenerate_scans_rejected() {
        let pts = vec![FringePoint { phase: 0.0, counts: 1.0 }; 5];
        assert!(matches!(fit_fringe(&pts), Err(Error::Fit(_))));
        assert!(fit_fringe(&pts[..2]).is_err());
        let bad = [FringePoint { phase: 0.0, counts: -1.0 }, FringePoint { phase: 1.0, counts: 1.0 },
                   FringePoint { phase: 2.0, counts: 1.0 }];
        assert!(fit_fringe(&bad).is_err());
    }

    #[test]
    fn poisson_fringes_within_two_errors() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut pulls = Vec::new();
        for _ in 0..200 {
            let pts: Vec<FringePoint> = (0..16)
                .map(|k| {
                    let phase = TAU * k as f64 / 16.0;
                    let mean = 15.0 * (1.0 + 0.821 * (phase - PI / 4.0).cos());
                    let n: f64 = Poisson::new(mean.max(1e-9)).unwrap().sample(&mut rng);
                    FringePoint { phase, counts: n }
                })
                .collect();
            let fit = fit_fringe(&pts).unwrap();
            pulls.push((fit.visibility - 0.821) / fit.visibility_err);
        }
        let within = pulls.iter().filter(|p| p.abs() <= 2.0).count();
        // ≈95 % expected inside two standard errors
        assert!(within >= 180, "{within}/200 within 2σ");
    }
}
