//! Strategy-level regime-trust gate: matured efficacy, drift and model
//! disagreement combined into a health index H(t) and a gate G(t).

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::panel::{Feature, Panel};
use crate::stats::{self, StatsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub halflife: f64,
    pub min_periods: usize,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub drift_weights: [f64; 3],
    pub drift_feature_window: usize,
    /// Minimum prior dates before a feature z-score is defined.
    pub drift_min_history: usize,
    pub score_ref_window: usize,
    pub corr_window: usize,
    /// Label maturation lag in trading days; normally the horizon.
    pub horizon_lag: usize,
    pub z_min_periods: usize,
    pub std_floor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            halflife: 30.0,
            min_periods: 20,
            alpha: 0.3,
            beta: 0.3,
            theta: 0.2,
            drift_weights: [0.4, 0.3, 0.3],
            drift_feature_window: 252,
            drift_min_history: 20,
            score_ref_window: 60,
            corr_window: 20,
            horizon_lag: 20,
            z_min_periods: 20,
            std_floor: 1e-9,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if (self.drift_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("drift_weights must sum to 1".into());
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err("theta must be in (0, 1)".into());
        }
        if !(self.halflife > 0.0) {
            return Err("halflife must be positive".into());
        }
        if self.corr_window < 2 || self.score_ref_window == 0 {
            return Err("corr_window >= 2 and score_ref_window >= 1 required".into());
        }
        Ok(())
    }
}

/// Features whose cross-sectional means are monitored for drift.
pub const DRIFT_FEATURES: [Feature; 6] = [
    Feature::Vol20d,
    Feature::Mom1m,
    Feature::Adv20d,
    Feature::VixPercentile252d,
    Feature::MarketVol21d,
    Feature::Vol60d,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatePoint {
    pub date_idx: usize,
    pub matured_ic: Option<f64>,
    pub h_real: Option<f64>,
    pub h_drift: Option<f64>,
    pub h_disagree: Option<f64>,
    pub z_real: Option<f64>,
    pub z_drift: Option<f64>,
    pub z_disagree: Option<f64>,
    pub h_raw: Option<f64>,
    pub health: Option<f64>,
    pub gate: Option<f64>,
    pub active: Option<bool>,
}

/// Value at `t` is the RankIC from `lag` trading dates earlier.
pub fn matured_ic_stream(ic: &[Option<f64>], lag: usize) -> Vec<Option<f64>> {
    (0..ic.len())
        .map(|t| if t >= lag { ic[t - lag] } else { None })
        .collect()
}

pub fn h_real(matured: &[Option<f64>], halflife: f64, min_periods: usize) -> Vec<Option<f64>> {
    stats::ewma(matured, halflife, min_periods)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftComponents {
    pub feat_drift: Vec<Option<f64>>,
    pub score_drift: Vec<Option<f64>>,
    pub corr_spike: Vec<Option<f64>>,
    pub combined: Vec<Option<f64>>,
}

/// Mean |z| of today's cross-sectional feature means against the trailing
/// window of prior dates.
pub fn feature_drift(panel: &Panel, window: usize, min_history: usize, std_floor: f64) -> Vec<Option<f64>> {
    let means: Vec<Vec<Option<f64>>> = DRIFT_FEATURES
        .iter()
        .map(|&f| {
            panel
                .sections
                .iter()
                .map(|s| {
                    let v: Vec<f64> = s.members.iter().filter_map(|m| m.features.get(f)).collect();
                    stats::mean(&v)
                })
                .collect()
        })
        .collect();
    (0..panel.n_dates())
        .map(|t| {
            let lo = t.saturating_sub(window);
            let zs: Vec<f64> = means
                .iter()
                .filter_map(|series| {
                    let today = series[t]?;
                    let hist: Vec<f64> = series[lo..t].iter().flatten().copied().collect();
                    if hist.len() < min_history.max(2) {
                        return None;
                    }
                    let mu = stats::mean(&hist)?;
                    let sd = stats::std_dev(&hist)?;
                    Some(((today - mu) / sd.max(std_floor)).abs())
                })
                .collect();
            stats::mean(&zs)
        })
        .collect()
}

/// KS statistic of today's scores against the pooled scores of the previous
/// `window` dates; undefined until a full reference window exists.
pub fn score_drift(panel: &Panel, window: usize) -> Vec<Option<f64>> {
    let scores: Vec<Vec<f64>> = panel
        .sections
        .iter()
        .map(|s| s.members.iter().map(|m| m.score_primary).collect())
        .collect();
    (0..panel.n_dates())
        .map(|t| {
            if t < window {
                return None;
            }
            let reference: Vec<f64> = scores[t - window..t].iter().flatten().copied().collect();
            stats::ks_two_sample(&scores[t], &reference).ok()
        })
        .collect()
}

/// Mean pairwise Pearson correlation of daily returns over the trailing
/// `window` dates (including today), using assets with a full window.
pub fn corr_spike(panel: &Panel, window: usize) -> Vec<Option<f64>> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for s in &panel.sections {
        for m in &s.members {
            let k = ids.len();
            ids.entry(m.asset.as_str()).or_insert(k);
        }
    }
    let n_assets = ids.len();
    let mut grid = vec![vec![None; n_assets]; panel.n_dates()];
    for (t, s) in panel.sections.iter().enumerate() {
        for m in &s.members {
            grid[t][ids[m.asset.as_str()]] = m.daily_return;
        }
    }
    let w = window as f64;
    (0..panel.n_dates())
        .map(|t| {
            if t + 1 < window {
                return None;
            }
            let lo = t + 1 - window;
            // Sum of standardized series: sum_{i,j} corr_ij = |sum_i z_i|^2 / w.
            let mut total = vec![0.0; window];
            let mut n = 0usize;
            for a in 0..n_assets {
                let series: Option<Vec<f64>> = (lo..=t).map(|d| grid[d][a]).collect();
                let Some(series) = series else { continue };
                let mu = series.iter().sum::<f64>() / w;
                let var = series.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / w;
                if var <= 0.0 {
                    continue;
                }
                let sd = var.sqrt();
                for (k, x) in series.iter().enumerate() {
                    total[k] += (x - mu) / sd;
                }
                n += 1;
            }
            if n < 2 {
                return None;
            }
            let all_pairs = total.iter().map(|v| v * v).sum::<f64>() / w;
            let n = n as f64;
            Some((all_pairs - n) / (n * (n - 1.0)))
        })
        .collect()
}

/// Weighted drift composite; undefined components are dropped and the
/// remaining weights renormalized.
pub fn h_drift(panel: &Panel, config: &GateConfig) -> DriftComponents {
    let feat = feature_drift(
        panel,
        config.drift_feature_window,
        config.drift_min_history,
        config.std_floor,
    );
    let score = score_drift(panel, config.score_ref_window);
    let corr = corr_spike(panel, config.corr_window);
    let combined = (0..panel.n_dates())
        .map(|t| {
            let parts = [feat[t], score[t], corr[t]];
            let (mut num, mut den) = (0.0, 0.0);
            for (v, w) in parts.iter().zip(config.drift_weights) {
                if let Some(v) = v {
                    num += w * v;
                    den += w;
                }
            }
            (den > 0.0).then(|| num / den)
        })
        .collect();
    DriftComponents {
        feat_drift: feat,
        score_drift: score,
        corr_spike: corr,
        combined,
    }
}

/// `1 - Spearman(primary, secondary)` per date when a second model exists,
/// otherwise `|dispersion / expanding_mean(dispersion) - 1|`.
pub fn h_disagree(panel: &Panel) -> Vec<Option<f64>> {
    if panel.has_secondary() {
        return panel
            .sections
            .iter()
            .map(|s| {
                let (p, q): (Vec<f64>, Vec<f64>) = s
                    .members
                    .iter()
                    .filter_map(|m| m.score_secondary.map(|v| (m.score_primary, v)))
                    .unzip();
                stats::spearman(&p, &q).ok().map(|rho| 1.0 - rho)
            })
            .collect();
    }
    let (mut sum, mut n) = (0.0, 0usize);
    panel
        .sections
        .iter()
        .map(|s| {
            let scores: Vec<f64> = s.members.iter().map(|m| m.score_primary).collect();
            let disp = stats::std_dev(&scores)?;
            sum += disp;
            n += 1;
            let mean = sum / n as f64;
            (mean > 0.0).then(|| (disp / mean - 1.0).abs())
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `clip((H - 0.3) / 0.4, 0, 1)`, written so the anchors 0.3, 0.5 and 0.7
/// map exactly to 0, 0.5 and 1.
pub fn gate_from_health(h: f64) -> f64 {
    const LO: f64 = 0.3;
    const HI: f64 = 0.7;
    if h <= LO {
        0.0
    } else if h >= HI {
        1.0
    } else {
        (0.5 + (h - 0.5) / (HI - LO)).clamp(0.0, 1.0)
    }
}

/// Combines the three components through expanding z-scores. Undefined
/// z-scores contribute zero; dates without `h_real` are left undefined.
pub fn health_and_gate(
    matured: &[Option<f64>],
    h_real: &[Option<f64>],
    h_drift: &[Option<f64>],
    h_disagree: &[Option<f64>],
    config: &GateConfig,
) -> Vec<GatePoint> {
    let z = |s: &[Option<f64>]| stats::expanding_zscore(s, config.z_min_periods, config.std_floor);
    let (zr, zd, zg) = (z(h_real), z(h_drift), z(h_disagree));
    (0..h_real.len())
        .map(|t| {
            let mut p = GatePoint {
                date_idx: t,
                matured_ic: matured[t],
                h_real: h_real[t],
                h_drift: h_drift[t],
                h_disagree: h_disagree[t],
                z_real: None,
                z_drift: None,
                z_disagree: None,
                h_raw: None,
                health: None,
                gate: None,
                active: None,
            };
            if h_real[t].is_none() {
                return p;
            }
            p.z_real = zr[t];
            p.z_drift = zd[t];
            p.z_disagree = zg[t];
            let raw = zr[t].unwrap_or(0.0) - config.alpha * zd[t].unwrap_or(0.0) - config.beta * zg[t].unwrap_or(0.0);
            let h = sigmoid(raw);
            let g = gate_from_health(h);
            p.h_raw = Some(raw);
            p.health = Some(h);
            p.gate = Some(g);
            p.active = Some(g >= config.theta);
            p
        })
        .collect()
}

/// Full gate series for a panel at the configured maturation lag.
pub fn compute_gate(panel: &Panel, horizon: usize, config: &GateConfig) -> Result<Vec<GatePoint>, crate::panel::PanelError> {
    let ic = panel.rank_ic(horizon)?;
    let matured = matured_ic_stream(&ic, config.horizon_lag);
    let real = h_real(&matured, config.halflife, config.min_periods);
    let drift = h_drift(panel, config);
    let disagree = h_disagree(panel);
    Ok(health_and_gate(&matured, &real, &drift.combined, &disagree, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mean_ic: f64,
    pub bad_day_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateEvaluation {
    pub n_dates: usize,
    pub auroc: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub abstention: f64,
    pub confusion: Confusion,
    pub buckets: Vec<Bucket>,
    pub bucket_monotonicity: Option<f64>,
}

/// Scores a date-level predictor against good days (`ic > 0`). Inputs are
/// aligned and already restricted to evaluated dates.
pub fn evaluate_gate(predictor: &[f64], ic: &[f64], theta: f64) -> Result<GateEvaluation, StatsError> {
    if predictor.len() != ic.len() {
        return Err(StatsError::LengthMismatch(predictor.len(), ic.len()));
    }
    let good: Vec<bool> = ic.iter().map(|v| *v > 0.0).collect();
    let auroc = stats::auroc(predictor, &good)?;
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (p, g) in predictor.iter().zip(&good) {
        match (*p >= theta, *g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let n = predictor.len();
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);

    // Quartile buckets by position in the sorted order; a run of tied
    // predictor values is placed whole by its middle position, so buckets
    // may merge or come out uneven when the predictor has mass points.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predictor[a].total_cmp(&predictor[b]).then(a.cmp(&b)));
    let mut bucket_of = vec![0usize; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && predictor[order[end]] == predictor[order[start]] {
            end += 1;
        }
        let mid = (start + end - 1) as f64 / 2.0;
        let k = ((4.0 * mid / n as f64) as usize).min(3);
        for &i in &order[start..end] {
            bucket_of[i] = k;
        }
        start = end;
    }
    let buckets: Vec<Bucket> = (0..4)
        .filter_map(|k| {
            let idx: Vec<usize> = order.iter().copied().filter(|&i| bucket_of[i] == k).collect();
            if idx.is_empty() {
                return None;
            }
            let ics: Vec<f64> = idx.iter().map(|&i| ic[i]).collect();
            Some(Bucket {
                lo: predictor[idx[0]],
                hi: predictor[*idx.last().unwrap()],
                n: idx.len(),
                mean_ic: stats::mean(&ics).unwrap(),
                bad_day_fraction: idx.iter().filter(|&&i| !good[i]).count() as f64 / idx.len() as f64,
            })
        })
        .collect();
    let means: Vec<f64> = buckets.iter().map(|b| b.mean_ic).collect();
    let ranks: Vec<f64> = (0..means.len()).map(|k| k as f64).collect();
    Ok(GateEvaluation {
        n_dates: n,
        auroc,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        abstention: (c.tn + c.fn_) as f64 / n as f64,
        confusion: c,
        bucket_monotonicity: stats::spearman(&means, &ranks).ok(),
        buckets,
    })
}

/// Whether each date's stress exceeds the rolling `percentile` of the
/// trailing `window` dates (including today).
pub fn stress_exceedance(stress: &[Option<f64>], window: usize, percentile: f64) -> Vec<Option<bool>> {
    (0..stress.len())
        .map(|t| {
            let today = stress[t]?;
            let lo = (t + 1).saturating_sub(window);
            let hist: Vec<f64> = stress[lo..=t].iter().flatten().copied().collect();
            let thr = stats::quantile(&hist, percentile).ok()?;
            Some(today > thr)
        })
        .collect()
}

/// Stress-proxy baseline: abstain on a window when more than half of its
/// dates exceed the rolling threshold. Returns `true` for abstain.
pub fn vix_gate_baseline(
    stress: &[Option<f64>],
    windows: &[Range<usize>],
    rolling: usize,
    percentile: f64,
) -> Vec<bool> {
    let exceed = stress_exceedance(stress, rolling, percentile);
    windows
        .iter()
        .map(|w| {
            let flags: Vec<bool> = exceed[w.clone()].iter().flatten().copied().collect();
            !flags.is_empty() && flags.iter().filter(|f| **f).count() * 2 > flags.len()
        })
        .collect()
}

/// Window-level gate decision: active when the mean defined G reaches theta.
pub fn gate_window_verdicts(points: &[GatePoint], windows: &[Range<usize>], theta: f64) -> Vec<Option<bool>> {
    windows
        .iter()
        .map(|w| {
            let g: Vec<f64> = points[w.clone()].iter().filter_map(|p| p.gate).collect();
            stats::mean(&g).map(|m| m >= theta)
        })
        .collect()
}

pub fn write_gate_csv<W: Write>(panel: &Panel, points: &[GatePoint], writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record(["date", "matured_ic", "h_real", "h_drift", "h_disagree", "H", "G", "active"])?;
    for p in points {
        w.write_record([
            panel.sections[p.date_idx].date.to_string(),
            o(p.matured_ic),
            o(p.h_real),
            o(p.h_drift),
            o(p.h_disagree),
            o(p.health),
            o(p.gate),
            p.active.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}
