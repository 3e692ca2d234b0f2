//! Error predictor g(x), aleatoric floors, the epistemic signal and the
//! diagnostics built on them.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gbt::{self, FeatureMatrix, GbtConfig, GbtError, Loss};
use crate::panel::{Feature, FoldPlan, Panel, PanelError, RankLossRecord};
use crate::stats::{self, StatsError};

/// Column order of the error-predictor feature matrix.
pub const GX_FEATURES: [&str; 11] = [
    "score",
    "abs_score",
    "cross_sectional_rank",
    "vol_20d",
    "vol_60d",
    "mom_1m",
    "adv_20d",
    "vix_percentile_252d",
    "market_regime_enc",
    "market_vol_21d",
    "market_return_21d",
];

const GX_PANEL_FEATURES: [Feature; 9] = [
    Feature::CrossSectionalRank,
    Feature::Vol20d,
    Feature::Vol60d,
    Feature::Mom1m,
    Feature::Adv20d,
    Feature::VixPercentile252d,
    Feature::MarketRegimeEnc,
    Feature::MarketVol21d,
    Feature::MarketReturn21d,
];

/// Characteristics used by the per-asset quantile floor.
pub const TIER2_FEATURES: [Feature; 6] = [
    Feature::Vol20d,
    Feature::Adv20d,
    Feature::MarketVol21d,
    Feature::VixPercentile252d,
    Feature::Mom1m,
    Feature::SectorEnc,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowRef {
    pub date_idx: usize,
    pub member_idx: usize,
}

impl From<&RankLossRecord> for RowRef {
    fn from(r: &RankLossRecord) -> Self {
        RowRef {
            date_idx: r.date_idx,
            member_idx: r.member_idx,
        }
    }
}

/// Every panel row on the given dates, in (date, member) order.
pub fn rows_on_dates(panel: &Panel, dates: Range<usize>) -> Vec<RowRef> {
    dates
        .flat_map(|d| {
            (0..panel.sections[d].members.len()).map(move |m| RowRef {
                date_idx: d,
                member_idx: m,
            })
        })
        .collect()
}

/// Error-predictor features for `rows`, missing values zero-filled.
pub fn build_gx_features(panel: &Panel, rows: &[RowRef]) -> FeatureMatrix {
    let mut x = FeatureMatrix::new(GX_FEATURES.iter().map(|s| s.to_string()).collect());
    let mut buf = [0.0; 11];
    for r in rows {
        let m = &panel.sections[r.date_idx].members[r.member_idx];
        buf[0] = m.score_primary;
        buf[1] = m.score_primary.abs();
        for (k, f) in GX_PANEL_FEATURES.iter().enumerate() {
            buf[k + 2] = m.features.get(*f).unwrap_or(0.0);
        }
        x.push_row(&buf);
    }
    x
}

fn tier2_features(panel: &Panel, rows: &[RowRef]) -> FeatureMatrix {
    let mut x = FeatureMatrix::new(TIER2_FEATURES.iter().map(|f| f.name().to_string()).collect());
    for r in rows {
        let m = &panel.sections[r.date_idx].members[r.member_idx];
        let row: Vec<f64> = TIER2_FEATURES
            .iter()
            .map(|f| m.features.get(*f).unwrap_or(0.0))
            .collect();
        x.push_row(&row);
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldPrediction {
    pub row: RowRef,
    pub fold_id: usize,
    pub value: f64,
}

/// Walk-forward fit: each fold's model sees only labels from its training
/// dates and predicts every panel row on its prediction dates. Folds with
/// no training labels are skipped with a warning.
pub fn train_walkforward<F>(
    panel: &Panel,
    labels: &[RankLossRecord],
    folds: &[FoldPlan],
    config: &GbtConfig,
    features: F,
) -> Result<Vec<FoldPrediction>, GbtError>
where
    F: Fn(&Panel, &[RowRef]) -> FeatureMatrix + Sync,
{
    let per_fold: Vec<Result<Vec<FoldPrediction>, GbtError>> = folds
        .par_iter()
        .map(|fold| {
            let train: Vec<&RankLossRecord> = labels
                .iter()
                .filter(|r| fold.train_dates.contains(&r.date_idx))
                .collect();
            debug_assert!(train
                .iter()
                .all(|r| r.date_idx + fold.horizon + fold.embargo_days <= fold.predict_dates.start));
            if train.is_empty() {
                log::warn!("fold {}: no matured training labels, skipped", fold.fold_id);
                return Ok(Vec::new());
            }
            let train_rows: Vec<RowRef> = train.iter().map(|r| RowRef::from(*r)).collect();
            let y: Vec<f64> = train.iter().map(|r| r.loss).collect();
            let model = gbt::fit(&features(panel, &train_rows), &y, config)?;
            let rows = rows_on_dates(panel, fold.predict_dates.clone());
            let pred = model.predict(&features(panel, &rows));
            Ok(rows
                .into_iter()
                .zip(pred)
                .map(|(row, value)| FoldPrediction {
                    row,
                    fold_id: fold.fold_id,
                    value,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in per_fold {
        out.extend(p?);
    }
    Ok(out)
}

/// g(x) predictions clipped to the loss domain [0, 1].
pub fn train_gx_walkforward(
    panel: &Panel,
    labels: &[RankLossRecord],
    folds: &[FoldPlan],
    config: &GbtConfig,
) -> Result<Vec<FoldPrediction>, GbtError> {
    let mut preds = train_walkforward(panel, labels, folds, config, build_gx_features)?;
    for p in &mut preds {
        p.value = p.value.clamp(0.0, 1.0);
    }
    Ok(preds)
}

/// Per-asset floor from walk-forward quantile models: the predicted
/// interquartile range of rank displacement.
pub fn tier2_floor(
    panel: &Panel,
    labels: &[RankLossRecord],
    folds: &[FoldPlan],
    config: &GbtConfig,
) -> Result<Vec<FoldPrediction>, GbtError> {
    let at = |p: f64| GbtConfig {
        loss: Loss::Pinball(p),
        ..config.clone()
    };
    let lo = train_walkforward(panel, labels, folds, &at(0.25), tier2_features)?;
    let hi = train_walkforward(panel, labels, folds, &at(0.75), tier2_features)?;
    Ok(lo
        .into_iter()
        .zip(hi)
        .map(|(l, h)| FoldPrediction {
            value: (h.value - l.value).max(0.0),
            ..l
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AleatoricMode {
    Oracle,
    PitRolling,
    Expanding,
    Tier0Iqr,
    Tier2Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AleatoricConfig {
    pub mode: AleatoricMode,
    pub window: usize,
    pub quantile_level: f64,
}

impl Default for AleatoricConfig {
    fn default() -> Self {
        AleatoricConfig {
            mode: AleatoricMode::PitRolling,
            window: 60,
            quantile_level: 0.10,
        }
    }
}

/// Losses grouped by date index.
fn losses_by_date(labels: &[RankLossRecord], n_dates: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n_dates];
    for r in labels {
        out[r.date_idx].push(r.loss);
    }
    out
}

/// Same-date quantile of realized losses (uses the date's own labels).
pub fn oracle_floor(labels: &[RankLossRecord], n_dates: usize, q: f64) -> Vec<Option<f64>> {
    losses_by_date(labels, n_dates)
        .iter()
        .map(|v| stats::quantile(v, q).ok())
        .collect()
}

/// Quantile of pooled losses from dates `[t - lag - window, t - lag]`, i.e.
/// labels already matured at `t`.
pub fn pit_rolling_floor(
    labels: &[RankLossRecord],
    n_dates: usize,
    lag: usize,
    window: usize,
    q: f64,
) -> Vec<Option<f64>> {
    let by_date = losses_by_date(labels, n_dates);
    (0..n_dates)
        .map(|t| {
            if t < lag {
                return None;
            }
            let hi = t - lag;
            let lo = hi.saturating_sub(window);
            let mut pool: Vec<f64> = by_date[lo..=hi].iter().flatten().copied().collect();
            if pool.is_empty() {
                return None;
            }
            pool.sort_by(f64::total_cmp);
            Some(stats::quantile_sorted(&pool, q))
        })
        .collect()
}

/// Median over matured dates `u <= t - lag` of the per-date loss quantile.
pub fn expanding_floor(labels: &[RankLossRecord], n_dates: usize, lag: usize, q: f64) -> Vec<Option<f64>> {
    let per_date = oracle_floor(labels, n_dates, q);
    let mut seen: Vec<f64> = Vec::new();
    let mut out = Vec::with_capacity(n_dates);
    for t in 0..n_dates {
        if t >= lag {
            if let Some(v) = per_date[t - lag] {
                let pos = seen.partition_point(|x| *x < v);
                seen.insert(pos, v);
            }
        }
        out.push(if seen.is_empty() { None } else { Some(stats::quantile_sorted(&seen, 0.5)) });
    }
    out
}

/// Inverse cross-sectional return IQR, `c / (IQR(r_t) + eps)`, with `c`
/// chosen so the median floor over `dev_dates` equals the median loss there.
/// Returns the per-date floor and `c`.
pub fn tier0_floor(
    panel: &Panel,
    labels: &[RankLossRecord],
    horizon: usize,
    dev_dates: Range<usize>,
    eps: f64,
) -> Result<(Vec<Option<f64>>, f64), PanelError> {
    let hi = panel.horizon_index(horizon)?;
    let inv_iqr: Vec<Option<f64>> = panel
        .sections
        .iter()
        .map(|s| {
            let mut r: Vec<f64> = s.members.iter().filter_map(|m| m.fwd_returns[hi]).collect();
            if r.len() < 2 {
                return None;
            }
            r.sort_by(f64::total_cmp);
            let iqr = stats::quantile_sorted(&r, 0.75) - stats::quantile_sorted(&r, 0.25);
            Some(1.0 / (iqr + eps))
        })
        .collect();
    let dev_v: Vec<f64> = dev_dates.clone().filter_map(|d| inv_iqr[d]).collect();
    let dev_l: Vec<f64> = labels
        .iter()
        .filter(|r| dev_dates.contains(&r.date_idx))
        .map(|r| r.loss)
        .collect();
    // a is linear in c, so matching medians is a closed-form ratio.
    let c = match (stats::median(&dev_l), stats::median(&dev_v)) {
        (Some(l), Some(v)) if v > 0.0 => l / v,
        _ => 0.0,
    };
    Ok((inv_iqr.iter().map(|v| v.map(|v| c * v)).collect(), c))
}

pub fn epistemic(g: f64, a: f64) -> f64 {
    (g - a).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyRecord {
    pub date_idx: usize,
    pub member_idx: usize,
    pub asset: String,
    pub horizon: usize,
    pub score: f64,
    pub g: f64,
    pub a_oracle: Option<f64>,
    pub a_pit: Option<f64>,
    pub a_exp: Option<f64>,
    pub e_oracle: Option<f64>,
    pub e_pit: Option<f64>,
    /// Realized rank displacement, absent until the label exists.
    pub loss: Option<f64>,
}

/// Joins g predictions with the date-level floors and realized losses.
pub fn uncertainty_table(
    panel: &Panel,
    labels: &[RankLossRecord],
    g: &[FoldPrediction],
    horizon: usize,
    config: &AleatoricConfig,
) -> Vec<UncertaintyRecord> {
    let n = panel.n_dates();
    let q = config.quantile_level;
    let oracle = oracle_floor(labels, n, q);
    let pit = pit_rolling_floor(labels, n, horizon, config.window, q);
    let exp = expanding_floor(labels, n, horizon, q);
    let mut loss_of = std::collections::HashMap::with_capacity(labels.len());
    for r in labels {
        loss_of.insert(RowRef::from(r), r.loss);
    }
    g.iter()
        .map(|p| {
            let d = p.row.date_idx;
            let m = &panel.sections[d].members[p.row.member_idx];
            UncertaintyRecord {
                date_idx: d,
                member_idx: p.row.member_idx,
                asset: m.asset.clone(),
                horizon,
                score: m.score_primary,
                g: p.value,
                a_oracle: oracle[d],
                a_pit: pit[d],
                a_exp: exp[d],
                e_oracle: oracle[d].map(|a| epistemic(p.value, a)),
                e_pit: pit[d].map(|a| epistemic(p.value, a)),
                loss: loss_of.get(&p.row).copied(),
            }
        })
        .collect()
}

pub fn write_uncertainty_csv<W: Write>(
    panel: &Panel,
    records: &[UncertaintyRecord],
    writer: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "date", "asset", "horizon", "g", "a_oracle", "a_pit", "a_exp", "e_oracle", "e_pit", "rank_loss",
    ])?;
    for r in records {
        w.write_record([
            panel.sections[r.date_idx].date.to_string(),
            r.asset.clone(),
            r.horizon.to_string(),
            r.g.to_string(),
            o(r.a_oracle),
            o(r.a_pit),
            o(r.a_exp),
            o(r.e_oracle),
            o(r.e_pit),
            o(r.loss),
        ])?;
    }
    w.flush()
}

/// Contiguous index ranges of equal date ids (input sorted by date).
pub fn date_groups(date_ids: &[usize]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=date_ids.len() {
        if i == date_ids.len() || date_ids[i] != date_ids[start] {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuintileMode {
    Pooled,
    PerDate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuintileTable {
    pub mean_loss: [f64; 5],
    pub counts: [usize; 5],
    pub q5_over_q1: f64,
    pub monotonicity: f64,
    pub n_rows: usize,
}

fn quintile_positions(values: &[f64], idx: &[usize], out: &mut [usize]) {
    let mut order: Vec<usize> = idx.to_vec();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = order.len();
    for (pos, &i) in order.iter().enumerate() {
        out[i] = (5 * pos / n).min(4);
    }
}

/// Mean realized loss by signal quintile. Needs at least 50 rows.
pub fn quintile_table(
    signal: &[f64],
    loss: &[f64],
    date_ids: &[usize],
    mode: QuintileMode,
) -> Option<QuintileTable> {
    let n = signal.len();
    if n < 50 || loss.len() != n {
        return None;
    }
    let mut bucket = vec![0usize; n];
    match mode {
        QuintileMode::Pooled => quintile_positions(signal, &(0..n).collect::<Vec<_>>(), &mut bucket),
        QuintileMode::PerDate => {
            for g in date_groups(date_ids) {
                if g.len() >= 5 {
                    quintile_positions(signal, &g.collect::<Vec<_>>(), &mut bucket);
                }
            }
        }
    }
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for i in 0..n {
        sums[bucket[i]] += loss[i];
        counts[bucket[i]] += 1;
    }
    let mut mean_loss = [0.0; 5];
    for k in 0..5 {
        mean_loss[k] = if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN };
    }
    let monotonicity = stats::spearman(&mean_loss, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap_or(0.0);
    Some(QuintileTable {
        q5_over_q1: mean_loss[4] / mean_loss[0],
        mean_loss,
        counts,
        monotonicity,
        n_rows: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingSummary {
    pub per_date: Vec<(usize, f64)>,
    pub median: Option<f64>,
    pub fraction_positive: Option<f64>,
}

/// Per-date Spearman between the signal and |score|; dates with fewer than 3
/// rows or a constant signal are skipped.
pub fn coupling_series(date_ids: &[usize], signal: &[f64], abs_score: &[f64]) -> CouplingSummary {
    let mut per_date = Vec::new();
    for g in date_groups(date_ids) {
        if g.len() < 3 {
            continue;
        }
        if let Ok(rho) = stats::spearman(&signal[g.clone()], &abs_score[g.clone()]) {
            per_date.push((date_ids[g.start], rho));
        }
    }
    let rhos: Vec<f64> = per_date.iter().map(|x| x.1).collect();
    CouplingSummary {
        median: stats::median(&rhos),
        fraction_positive: (!rhos.is_empty())
            .then(|| rhos.iter().filter(|r| **r > 0.0).count() as f64 / rhos.len() as f64),
        per_date,
    }
}

/// Pooled OLS residual of the signal on the given covariate columns.
pub fn residualize_ehat(signal: &[f64], covariates: &[Vec<f64>]) -> Result<Vec<f64>, StatsError> {
    stats::ols_residualize(signal, covariates)
}

/// Per-date OLS residual of the signal on |score|. Dates where the fit is
/// infeasible give `None` for all their rows.
pub fn residualize_by_date(date_ids: &[usize], signal: &[f64], abs_score: &[f64]) -> Vec<Option<f64>> {
    let mut out = vec![None; signal.len()];
    for g in date_groups(date_ids) {
        if g.len() < 3 {
            continue;
        }
        match stats::ols_residualize(&signal[g.clone()], &[abs_score[g.clone()].to_vec()]) {
            Ok(res) => {
                for (k, i) in g.enumerate() {
                    out[i] = Some(res[k]);
                }
            }
            Err(e) => log::warn!("date {}: residualization failed: {e}", date_ids[g.start]),
        }
    }
    out
}

/// Mean per-date Spearman of each candidate with the realized loss.
pub fn baseline_dominance(
    candidates: &[(String, Vec<f64>)],
    loss: &[f64],
    date_ids: &[usize],
) -> Vec<(String, Option<f64>)> {
    let groups = date_groups(date_ids);
    candidates
        .iter()
        .map(|(name, values)| {
            let rhos: Vec<f64> = groups
                .iter()
                .filter_map(|g| stats::spearman(&values[g.clone()], &loss[g.clone()]).ok())
                .collect();
            (name.clone(), stats::mean(&rhos))
        })
        .collect()
}

/// AUROC of the signal for identifying above-median realized losses.
pub fn high_loss_auroc(signal: &[f64], loss: &[f64]) -> Option<f64> {
    let med = stats::median(loss)?;
    let labels: Vec<bool> = loss.iter().map(|l| *l > med).collect();
    stats::auroc(signal, &labels).ok()
}
