//! Excitation monitoring on realized regressor streams and the contraction
//! constants derived from it.
//!
//! A stream is a sequence of `p×n` blocks `F_i = φ_i B_iᵀ`; its Gram over an
//! index set is `Σ F_i F_iᵀ`. Sufficient excitation asks that the prefix Gram
//! through some `T_s` dominates `δ I`; persistent excitation asks the same of
//! every window of `T_s + 1` consecutive blocks seen so far.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gram_accumulate, sym_eig_extrema, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExcitationError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("stream of length {len} is shorter than a window of {needed}")]
    StreamTooShort { len: usize, needed: usize },
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("stream is empty or has mixed block shapes")]
    BadStream,
}

fn param_dim(stream: &[Matrix]) -> Result<usize, ExcitationError> {
    let first = stream.first().ok_or(ExcitationError::BadStream)?;
    if stream.iter().any(|f| f.shape() != first.shape()) {
        return Err(ExcitationError::BadStream);
    }
    Ok(first.rows())
}

/// `Σ F_i F_iᵀ` over the given blocks, starting from `p×p` zeros.
pub fn block_gram(blocks: &[Matrix], p: usize) -> Result<Matrix, ExcitationError> {
    let mut g = Matrix::zeros(p, p);
    for f in blocks {
        g = gram_accumulate(&g, f)?;
    }
    Ok(g)
}

/// `λ_min(Σ_{i≤k} F_i F_iᵀ)` and `λ_max` of the same prefix, for every `k`.
pub fn prefix_spectrum(stream: &[Matrix]) -> Result<Vec<(f64, f64)>, ExcitationError> {
    if stream.is_empty() {
        return Ok(Vec::new());
    }
    let p = param_dim(stream)?;
    let mut g = Matrix::zeros(p, p);
    let mut out = Vec::with_capacity(stream.len());
    for f in stream {
        g = gram_accumulate(&g, f)?;
        out.push(sym_eig_extrema(&g)?);
    }
    Ok(out)
}

pub fn prefix_lambda_min(stream: &[Matrix]) -> Result<Vec<f64>, ExcitationError> {
    Ok(prefix_spectrum(stream)?.into_iter().map(|(lo, _)| lo).collect())
}

/// First index at which the prefix curve reaches `delta`.
pub fn first_crossing(prefix_min: &[f64], delta: f64) -> Option<usize> {
    prefix_min.iter().position(|&v| v >= delta)
}

/// Smallest `T_s` with `λ_min(Σ_{i=0}^{T_s} F_i F_iᵀ) ≥ δ`.
pub fn se_detect(stream: &[Matrix], delta: f64) -> Result<Option<usize>, ExcitationError> {
    if !(delta > 0.0) {
        return Err(ExcitationError::InvalidConstants(format!(
            "δ must be positive, got {delta}"
        )));
    }
    Ok(first_crossing(&prefix_lambda_min(stream)?, delta))
}

/// `λ_min` of every window `[k0, k0 + T_s]` inside the stream.
pub fn window_lambda_min(stream: &[Matrix], ts: usize) -> Result<Vec<f64>, ExcitationError> {
    let len = ts + 1;
    if stream.len() < len {
        return Err(ExcitationError::StreamTooShort {
            len: stream.len(),
            needed: len,
        });
    }
    let p = param_dim(stream)?;
    // Slide the Gram one block at a time, rebuilding it whenever the window
    // no longer overlaps the last rebuilt one so rounding cannot accumulate.
    let mut g = block_gram(&stream[..len], p)?;
    let mut out = Vec::with_capacity(stream.len() - ts);
    out.push(sym_eig_extrema(&g)?.0);
    for k0 in 1..=stream.len() - len {
        if k0 % len == 0 {
            g = block_gram(&stream[k0..k0 + len], p)?;
        } else {
            let (old, new) = (&stream[k0 - 1], &stream[k0 + len - 1]);
            g = g.add(&new.matmul(&new.transpose())).sub(&old.matmul(&old.transpose()));
            g.symmetrize();
        }
        out.push(sym_eig_extrema(&g)?.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeCheck {
    /// True when every window reached `δ`; only windows inside the realized stream are checked.
    pub satisfied: bool,
    pub window_lambda_min: Vec<f64>,
}

pub fn pe_check(stream: &[Matrix], delta: f64, ts: usize) -> Result<PeCheck, ExcitationError> {
    let window_lambda_min = window_lambda_min(stream, ts)?;
    Ok(PeCheck {
        satisfied: window_lambda_min.iter().all(|&v| v >= delta),
        window_lambda_min,
    })
}

/// Smallest `T_s` for which `pe_check` passes, searched by bisection since
/// longer windows only add positive semidefinite terms.
pub fn min_pe_window(stream: &[Matrix], delta: f64) -> Result<Option<usize>, ExcitationError> {
    if stream.is_empty() {
        return Ok(None);
    }
    let passes = |ts: usize| pe_check(stream, delta, ts).map(|c| c.satisfied);
    let mut hi = stream.len() - 1;
    if !passes(hi)? {
        return Ok(None);
    }
    let mut lo = 0;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    /// `λ_max` of the Gram of the whole stream, a lower witness for `β`.
    pub beta: f64,
    /// `λ_max` of the Gram of the last tenth of the stream.
    pub tail_increment: f64,
}

pub fn beta_estimate(stream: &[Matrix]) -> Result<BetaEstimate, ExcitationError> {
    if stream.is_empty() {
        return Ok(BetaEstimate {
            beta: 0.0,
            tail_increment: 0.0,
        });
    }
    let p = param_dim(stream)?;
    let tail_len = stream.len().div_ceil(10);
    Ok(BetaEstimate {
        beta: sym_eig_extrema(&block_gram(stream, p)?)?.1,
        tail_increment: sym_eig_extrema(&block_gram(&stream[stream.len() - tail_len..], p)?)?.1,
    })
}

/// How `δ` is chosen for a report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSetting {
    Fixed(f64),
    /// The literal string `"auto"`.
    Auto(AutoDelta),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoDelta {
    Auto,
}

impl Default for DeltaSetting {
    fn default() -> Self {
        DeltaSetting::Auto(AutoDelta::Auto)
    }
}

/// Window length used by the automatic `δ` when no hint is given.
pub const DEFAULT_AUTO_WINDOW: usize = 64;

/// Half the smallest window `λ_min` over windows of `window` blocks (clipped to
/// the stream), falling back to half the final prefix `λ_min`.
pub fn auto_delta(stream: &[Matrix], window: usize) -> Result<Option<f64>, ExcitationError> {
    if stream.is_empty() {
        return Ok(None);
    }
    let ts = window.clamp(1, stream.len()) - 1;
    let windowed = window_lambda_min(stream, ts)?.into_iter().fold(f64::INFINITY, f64::min);
    if windowed > 0.0 {
        return Ok(Some(0.5 * windowed));
    }
    let total = *prefix_lambda_min(stream)?.last().expect("non-empty");
    Ok((total > 0.0).then_some(0.5 * total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub prefix_lambda_min: Vec<f64>,
    pub prefix_lambda_max: Vec<f64>,
    /// `None` when no positive `δ` could be determined.
    pub delta_used: Option<f64>,
    pub delta_auto: bool,
    pub detected_ts: Option<usize>,
    /// Smallest window index `T_s` for which the stream is persistently exciting.
    pub pe_ts: Option<usize>,
    pub pe_satisfied: bool,
    /// Persistence is only checked up to this horizon.
    pub pe_horizon: usize,
    pub window_lambda_min: Option<Vec<f64>>,
    pub beta: f64,
    pub beta_tail_increment: f64,
}

impl ExcitationReport {
    pub fn analyze(stream: &[Matrix], delta: DeltaSetting, ts_hint: Option<usize>) -> Result<Self, ExcitationError> {
        let spectrum = prefix_spectrum(stream)?;
        let prefix_lambda_min: Vec<f64> = spectrum.iter().map(|s| s.0).collect();
        let prefix_lambda_max: Vec<f64> = spectrum.iter().map(|s| s.1).collect();
        let (delta_used, delta_auto) = match delta {
            DeltaSetting::Fixed(d) => {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(ExcitationError::InvalidConstants(format!(
                        "δ must be positive, got {d}"
                    )));
                }
                (Some(d), false)
            }
            DeltaSetting::Auto(_) => (
                auto_delta(stream, ts_hint.map_or(DEFAULT_AUTO_WINDOW, |t| t + 1))?,
                true,
            ),
        };
        let beta = beta_estimate(stream)?;
        let mut report = ExcitationReport {
            prefix_lambda_min,
            prefix_lambda_max,
            delta_used,
            delta_auto,
            detected_ts: None,
            pe_ts: None,
            pe_satisfied: false,
            pe_horizon: stream.len(),
            window_lambda_min: None,
            beta: beta.beta,
            beta_tail_increment: beta.tail_increment,
        };
        let Some(delta) = delta_used else {
            return Ok(report);
        };
        report.detected_ts = first_crossing(&report.prefix_lambda_min, delta);
        report.pe_ts = min_pe_window(stream, delta)?;
        let window = report.pe_ts.or(ts_hint).or(report.detected_ts);
        if let Some(ts) = window.filter(|&t| t < stream.len()) {
            let check = pe_check(stream, delta, ts)?;
            report.pe_satisfied = check.satisfied;
            report.window_lambda_min = Some(check.window_lambda_min);
        }
        Ok(report)
    }

    /// `‖Φ‖` for the stacked rows `0..=ts`, i.e. `sqrt λ_max` of that prefix Gram.
    pub fn stacked_norm_through(&self, ts: usize) -> Option<f64> {
        self.prefix_lambda_max.get(ts).map(|v| v.max(0.0).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionConstants {
    pub eta: f64,
    /// Present only when `ε < ε_max`.
    pub gamma: Option<f64>,
    /// `None` means unbounded (`β = δ`).
    pub epsilon_max: Option<f64>,
    pub c_r: Option<f64>,
    pub c_p: Option<f64>,
}

/// `η = ε/(δ+ε)`.
pub fn eta(delta: f64, epsilon: f64) -> f64 {
    epsilon / (delta + epsilon)
}

pub fn rpl_constants(
    delta: f64,
    epsilon: f64,
    beta: f64,
    phi_ts_norm: Option<f64>,
) -> Result<ContractionConstants, ExcitationError> {
    if !(delta > 0.0 && epsilon > 0.0) {
        return Err(ExcitationError::InvalidConstants(format!(
            "δ and ε must be positive, got δ = {delta}, ε = {epsilon}"
        )));
    }
    if !(beta >= delta) {
        return Err(ExcitationError::InvalidConstants(format!(
            "β = {beta} is below δ = {delta}; the prefix Gram cannot exceed the total"
        )));
    }
    let (sd, sb) = (delta.sqrt(), beta.sqrt());
    let epsilon_max = (beta > delta).then(|| delta * sd / (sb - sd));
    let gamma = epsilon_max
        .is_none_or(|m| epsilon < m)
        .then(|| epsilon * sb / (epsilon * sd + delta * sd));
    Ok(ContractionConstants {
        eta: eta(delta, epsilon),
        gamma,
        epsilon_max,
        c_r: None,
        c_p: Some(phi_ts_norm.unwrap_or(sb)),
    })
}

/// `c_r = sqrt(ε(λ^{2T_s} − λ^{−2}) / (δ(1 − λ^{−2})))`, evaluated as printed.
pub fn rlsff_constant(epsilon: f64, delta: f64, lambda_sq: f64, ts: usize) -> Result<f64, ExcitationError> {
    if !(lambda_sq > 0.0 && lambda_sq < 1.0 && delta > 0.0 && epsilon > 0.0) {
        return Err(ExcitationError::InvalidConstants(format!(
            "need λ² in (0,1), δ > 0, ε > 0; got λ² = {lambda_sq}, δ = {delta}, ε = {epsilon}"
        )));
    }
    let exponent = i32::try_from(ts).map_err(|_| ExcitationError::InvalidConstants(format!("T_s = {ts} too large")))?;
    let inv = 1.0 / lambda_sq;
    let c_sq = epsilon * (lambda_sq.powi(exponent) - inv) / (delta * (1.0 - inv));
    if !(c_sq > 0.0 && c_sq.is_finite()) {
        return Err(ExcitationError::InvalidConstants(format!(
            "c_r² = {c_sq} is not positive"
        )));
    }
    Ok(c_sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, p: usize) -> Matrix {
        let mut v = vec![0.0; p];
        v[i] = 1.0;
        Matrix::column(&v)
    }

    fn alternating(len: usize) -> Vec<Matrix> {
        (0..len).map(|k| e(k % 2, 2)).collect()
    }

    #[test]
    fn se_examples() {
        assert_eq!(se_detect(&alternating(6), 1.0).unwrap(), Some(1));
        let flat: Vec<Matrix> = (0..20).map(|_| e(0, 2)).collect();
        assert_eq!(se_detect(&flat, 1e-6).unwrap(), None);
        assert!(se_detect(&flat, 0.0).is_err());
    }

    #[test]
    fn pe_examples() {
        let c = pe_check(&alternating(20), 1.0, 1).unwrap();
        assert!(c.satisfied);
        assert_eq!(c.window_lambda_min.len(), 19);
        let mut dying = alternating(20);
        for f in dying.iter_mut().skip(11) {
            *f = Matrix::zeros(2, 1);
        }
        assert!(!pe_check(&dying, 1.0, 1).unwrap().satisfied);
        assert!(matches!(
            pe_check(&alternating(2), 1.0, 2),
            Err(ExcitationError::StreamTooShort { len: 2, needed: 3 })
        ));
        assert_eq!(min_pe_window(&alternating(20), 1.0).unwrap(), Some(1));
        assert_eq!(min_pe_window(&alternating(20), 2.0).unwrap(), Some(3));
        // windows of 11 blocks still straddle the last two live blocks
        assert_eq!(min_pe_window(&dying, 1.0).unwrap(), Some(10));
        assert_eq!(min_pe_window(&dying[..5], 3.0).unwrap(), None);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_estimate(&[e(0, 2)]).unwrap().beta, 1.0);
        assert_eq!(beta_estimate(&[e(0, 2), e(1, 2)]).unwrap().beta, 1.0);
        let geometric: Vec<Matrix> = (0..60).map(|i| e(0, 2).scale(0.5f64.powi(i))).collect();
        let b = beta_estimate(&geometric).unwrap();
        assert!((b.beta - 4.0 / 3.0).abs() < 1e-12);
        assert!(b.tail_increment < 1e-10);
    }

    #[test]
    fn rpl_constant_examples() {
        assert_eq!(rpl_constants(1.0, 1.0, 1.0, None).unwrap().eta, 0.5);
        let c = rpl_constants(1.0, 0.5, 4.0, None).unwrap();
        assert_eq!(c.epsilon_max, Some(1.0));
        assert!((c.gamma.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.c_p, Some(2.0));
        assert_eq!(rpl_constants(1.0, 1.0, 4.0, None).unwrap().gamma, None);
        assert!(rpl_constants(2.0, 1.0, 1.0, None).is_err());
        // β = δ leaves ε unbounded and γ = η
        let flat = rpl_constants(1.0, 3.0, 1.0, Some(0.5)).unwrap();
        assert_eq!(flat.epsilon_max, None);
        assert_eq!(flat.gamma, Some(flat.eta));
        assert_eq!(flat.c_p, Some(0.5));
    }

    #[test]
    fn rlsff_constant_examples() {
        let c1 = rlsff_constant(1.0, 1.0, 0.99, 1).unwrap();
        assert!((c1 * c1 - 1.99).abs() < 1e-12);
        let c2 = rlsff_constant(1.0, 2.0, 0.99, 1).unwrap();
        assert!((c2 * c2 - 0.995).abs() < 1e-12);
        let c0 = rlsff_constant(3.0, 2.0, 0.9, 0).unwrap();
        assert!((c0 * c0 - 1.5).abs() < 1e-12);
        assert!(rlsff_constant(1.0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn report_on_alternating_stream() {
        let r = ExcitationReport::analyze(&alternating(10), DeltaSetting::Fixed(1.0), None).unwrap();
        assert_eq!(r.detected_ts, Some(1));
        assert_eq!(r.pe_ts, Some(1));
        assert!(r.pe_satisfied);
        assert_eq!(r.beta, 5.0);
        assert_eq!(r.stacked_norm_through(1), Some(1.0));
        assert!(r.prefix_lambda_min.windows(2).all(|w| w[0] <= w[1]));
        let auto = ExcitationReport::analyze(&alternating(10), DeltaSetting::default(), Some(3)).unwrap();
        assert_eq!(auto.delta_used, Some(1.0));
        assert!(auto.delta_auto);
        assert_eq!(auto.pe_ts, Some(1));
    }

    #[test]
    fn delta_setting_serde() {
        let fixed: DeltaSetting = serde_json::from_str("0.25").unwrap();
        assert_eq!(fixed, DeltaSetting::Fixed(0.25));
        let auto: DeltaSetting = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(auto, DeltaSetting::default());
        assert!(serde_json::from_str::<DeltaSetting>("\"sometimes\"").is_err());
    }
}
