//! Rolling split-conformal intervals for rank displacement, with optional
//! per-row normalization, and coverage evaluation by uncertainty tercile.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    Raw,
    Vol,
    DeupOracle,
    DeupPit,
}

impl Normalizer {
    pub const ALL: [Normalizer; 4] = [
        Normalizer::Raw,
        Normalizer::Vol,
        Normalizer::DeupOracle,
        Normalizer::DeupPit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Normalizer::Raw => "raw",
            Normalizer::Vol => "vol",
            Normalizer::DeupOracle => "deup_oracle",
            Normalizer::DeupPit => "deup_pit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformalConfig {
    pub nominal: f64,
    pub calib_window_days: usize,
    pub normalizer: Normalizer,
    pub eps: f64,
    /// Days before a loss is observable; scores from the last `maturation_lag`
    /// dates never enter the window.
    pub maturation_lag: usize,
    pub min_scores: usize,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        ConformalConfig {
            nominal: 0.90,
            calib_window_days: 60,
            normalizer: Normalizer::DeupPit,
            eps: 1e-6,
            maturation_lag: 20,
            min_scores: 30,
        }
    }
}

impl ConformalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.nominal > 0.0 && self.nominal < 1.0) {
            return Err(format!("conformal nominal {} outside (0,1)", self.nominal));
        }
        if self.calib_window_days < 10 {
            return Err("conformal window must span at least 10 dates".into());
        }
        if !(self.eps > 0.0) {
            return Err("conformal eps must be positive".into());
        }
        Ok(())
    }
}

pub fn nonconformity(loss: f64, norm: f64, eps: f64) -> f64 {
    loss / norm.max(eps)
}

/// Split-conformal quantile with the finite-sample correction: the
/// `ceil((n+1) * nominal)`-th smallest score, or infinity when that index
/// exceeds `n`.
pub fn conformal_quantile(scores: &mut [f64], nominal: f64) -> f64 {
    let n = scores.len();
    let k = (((n + 1) as f64) * nominal - 1e-9).ceil() as usize;
    if k > n {
        return f64::INFINITY;
    }
    scores.sort_by(f64::total_cmp);
    scores[k.max(1) - 1]
}

/// One row of conformal input: realized loss (None until matured or when
/// undefined) and the normalizer value (None excludes the row).
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPoint {
    pub member_idx: usize,
    pub loss: Option<f64>,
    pub norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRecord {
    pub date_idx: usize,
    pub member_idx: usize,
    pub normalizer: Normalizer,
    pub q: f64,
    pub width: f64,
    pub loss: Option<f64>,
    pub covered: Option<bool>,
}

/// Builds normalizer-specific inputs from panel rows. `ehat` is the per-date,
/// per-member epistemic signal matching the normalizer (ignored for raw/vol).
pub fn conformal_points(
    panel: &Panel,
    losses: &[Vec<Option<f64>>],
    normalizer: Normalizer,
    ehat: Option<&[Vec<Option<f64>>]>,
) -> Vec<Vec<ConformalPoint>> {
    use crate::panel::Feature;
    panel
        .sections
        .iter()
        .enumerate()
        .map(|(t, s)| {
            (0..s.members.len())
                .map(|i| ConformalPoint {
                    member_idx: i,
                    loss: losses[t][i],
                    norm: match normalizer {
                        Normalizer::Raw => Some(1.0),
                        Normalizer::Vol => s.members[i].features.get(Feature::Vol20d),
                        Normalizer::DeupOracle | Normalizer::DeupPit => {
                            ehat.and_then(|e| e[t][i])
                        }
                    },
                })
                .collect()
        })
        .collect()
}

/// Produces intervals on every date whose matured calibration window
/// `[t - lag - window + 1, t - lag]` holds at least `min_scores` scores.
pub fn rolling_intervals(points: &[Vec<ConformalPoint>], cfg: &ConformalConfig) -> Vec<IntervalRecord> {
    let lag = cfg.maturation_lag.max(1);
    let mut out = Vec::new();
    for t in 0..points.len() {
        if t < lag {
            continue;
        }
        let hi = t - lag;
        let lo = (hi + 1).saturating_sub(cfg.calib_window_days);
        let mut scores: Vec<f64> = points[lo..=hi]
            .iter()
            .flatten()
            .filter_map(|p| Some(nonconformity(p.loss?, p.norm?, cfg.eps)))
            .collect();
        if scores.len() < cfg.min_scores {
            continue;
        }
        let q = conformal_quantile(&mut scores, cfg.nominal);
        for p in &points[t] {
            let Some(norm) = p.norm else { continue };
            let width = (q * norm.max(cfg.eps)).min(1.0);
            out.push(IntervalRecord {
                date_idx: t,
                member_idx: p.member_idx,
                normalizer: cfg.normalizer,
                q,
                width,
                loss: p.loss,
                covered: p.loss.map(|l| l <= width),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub normalizer: Normalizer,
    pub n: usize,
    pub marginal: f64,
    /// Coverage in low, mid and high uncertainty terciles.
    pub terciles: [f64; 3],
    pub spread: f64,
    pub mean_width: f64,
}

/// Coverage over evaluated rows (loss defined). Terciles are equal-count
/// groups after sorting by the pooled key; rows without a key are dropped.
/// Needs at least 300 rows.
pub fn coverage_report(
    records: &[IntervalRecord],
    key: impl Fn(&IntervalRecord) -> Option<f64>,
) -> Option<CoverageReport> {
    let mut rows: Vec<(f64, bool, f64)> = records
        .iter()
        .filter_map(|r| Some((key(r)?, r.covered?, r.width)))
        .collect();
    let n = rows.len();
    if n < 300 {
        return None;
    }
    let marginal = rows.iter().filter(|r| r.1).count() as f64 / n as f64;
    let mean_width = rows.iter().map(|r| r.2).sum::<f64>() / n as f64;
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut terciles = [0.0; 3];
    for (g, slot) in terciles.iter_mut().enumerate() {
        let part = &rows[g * n / 3..(g + 1) * n / 3];
        *slot = part.iter().filter(|r| r.1).count() as f64 / part.len() as f64;
    }
    let max = terciles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = terciles.iter().copied().fold(f64::INFINITY, f64::min);
    Some(CoverageReport {
        normalizer: records[0].normalizer,
        n,
        marginal,
        terciles,
        spread: max - min,
        mean_width,
    })
}

pub fn write_intervals_csv<W: Write>(
    panel: &Panel,
    records: &[IntervalRecord],
    writer: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "asset", "normalizer", "q", "width", "loss", "covered"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        let s = &panel.sections[r.date_idx];
        w.write_record([
            s.date.to_string(),
            s.members[r.member_idx].asset.clone(),
            r.normalizer.name().to_string(),
            r.q.to_string(),
            r.width.to_string(),
            opt(r.loss),
            r.covered.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}
