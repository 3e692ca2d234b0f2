//! Position sizing rules and deployment policy variants producing target
//! weights per rebalance date.

use std::io::Write;

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::GatePoint;
use crate::panel::{Feature, Panel};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("cross-section of {n} assets is smaller than 2K = {}", 2 * k)]
    InsufficientUniverse { n: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PolicyVariant {
    UngatedRaw,
    UngatedVol,
    GateRaw,
    GateVol,
    GateUaSort {
        /// Fixed weight on the uncertainty term; calibrated on DEV when absent.
        #[serde(default)]
        lambda: Option<f64>,
        /// Reverse the sign of the uncertainty adjustment.
        #[serde(default)]
        flip: bool,
    },
    GateResidEhat,
    GateEhatCap {
        p: f64,
        kappa: f64,
    },
    GateVolEhatCap {
        p: f64,
        kappa: f64,
    },
    TrailIcK4,
}

impl PolicyVariant {
    pub fn cap_90_50() -> Self {
        PolicyVariant::GateEhatCap { p: 0.90, kappa: 0.50 }
    }

    pub fn vol_cap_85_70() -> Self {
        PolicyVariant::GateVolEhatCap { p: 0.85, kappa: 0.70 }
    }

    pub fn gated(&self) -> bool {
        !matches!(
            self,
            PolicyVariant::UngatedRaw | PolicyVariant::UngatedVol | PolicyVariant::TrailIcK4
        )
    }

    fn vol_sized(&self) -> bool {
        matches!(
            self,
            PolicyVariant::UngatedVol | PolicyVariant::GateVol | PolicyVariant::GateVolEhatCap { .. }
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            PolicyVariant::GateEhatCap { p, kappa } | PolicyVariant::GateVolEhatCap { p, kappa } => {
                if !(*p > 0.0 && *p < 1.0) || !(*kappa > 0.0 && *kappa <= 1.0) {
                    return Err("cap requires p in (0,1) and kappa in (0,1]".into());
                }
            }
            PolicyVariant::GateUaSort { lambda: Some(l), .. } if *l < 0.0 => {
                return Err("lambda must be non-negative".into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub name: String,
    #[serde(flatten)]
    pub variant: PolicyVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub k: usize,
    pub theta: f64,
    pub eps: f64,
    pub target_median_multiplier: f64,
    pub lambda_grid: Vec<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 10,
            theta: 0.2,
            eps: 1e-6,
            target_median_multiplier: 0.7,
            lambda_grid: vec![0.01, 0.05, 0.1, 0.3, 0.5, 1.0, 2.0],
        }
    }
}

/// Constants calibrated on DEV rows only and then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c_vol: f64,
    pub c_resid: f64,
    pub lambda: f64,
    pub ic_ref: f64,
}

/// `min(1, c / sqrt(x + eps))`.
pub fn inverse_sqrt_multiplier(x: f64, c: f64, eps: f64) -> f64 {
    (c / (x.max(0.0) + eps).sqrt()).min(1.0)
}

pub fn vol_size(score: f64, vol_20d: f64, c_vol: f64, eps: f64) -> f64 {
    score * inverse_sqrt_multiplier(vol_20d, c_vol, eps)
}

/// Bisection for `c` such that the median multiplier over `values` hits
/// `target`.
pub fn calibrate_multiplier(values: &[f64], target: f64, eps: f64) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let median_at = |c: f64| {
        let m: Vec<f64> = values.iter().map(|&v| inverse_sqrt_multiplier(v, c, eps)).collect();
        stats::median(&m).unwrap()
    };
    let mut lo = 0.0;
    let mut hi = values.iter().fold(0.0f64, |a, &v| a.max((v.max(0.0) + eps).sqrt()));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if median_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Legs {
    pub longs: Vec<usize>,
    pub shorts: Vec<usize>,
}

fn top_k(ids: &[&str], scores: &[f64], k: usize, descending: bool, exclude: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        let c = if descending { c.reverse() } else { c };
        c.then(ids[a].cmp(ids[b]))
    });
    order.truncate(k);
    order
}

/// Top-K longs and bottom-K shorts (from the remaining names); ties broken
/// by asset id.
pub fn select_legs(ids: &[&str], scores: &[f64], k: usize) -> Result<Legs, PolicyError> {
    select_legs_two_sided(ids, scores, scores, k)
}

/// Longs ranked by `long_scores`, shorts by `short_scores`.
pub fn select_legs_two_sided(
    ids: &[&str],
    long_scores: &[f64],
    short_scores: &[f64],
    k: usize,
) -> Result<Legs, PolicyError> {
    let n = ids.len();
    if n < 2 * k {
        return Err(PolicyError::InsufficientUniverse { n, k });
    }
    let longs = top_k(ids, long_scores, k, true, &[]);
    let shorts = top_k(ids, short_scores, k, false, &longs);
    Ok(Legs { longs, shorts })
}

/// Long and short ranking scores `s + lambda * e` and `s - lambda * e`.
pub fn ua_sort(scores: &[f64], ehat: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let long = scores.iter().zip(ehat).map(|(s, e)| s + lambda * e).collect();
    let short = scores.iter().zip(ehat).map(|(s, e)| s - lambda * e).collect();
    (long, short)
}

/// Assets whose signal is strictly above the cross-sectional `p` quantile.
pub fn cap_flags(ehat: &[f64], p: f64) -> Vec<bool> {
    match stats::quantile(ehat, p) {
        Ok(thr) => ehat.iter().map(|e| *e > thr).collect(),
        Err(_) => vec![false; ehat.len()],
    }
}

/// Multiplies flagged weights by `kappa`; the released weight stays in cash.
pub fn ehat_cap(weights: &mut [f64], flags: &[bool], kappa: f64) {
    for (w, f) in weights.iter_mut().zip(flags) {
        if *f {
            *w *= kappa;
        }
    }
}

/// Exposure scale `clip(ewma_ic / ic_ref, 0, 1)`.
pub fn trail_ic_scale(ewma_ic: f64, ic_ref: f64) -> f64 {
    if ic_ref <= 0.0 {
        return if ewma_ic > 0.0 { 1.0 } else { 0.0 };
    }
    (ewma_ic / ic_ref).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Long,
    Short,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Position {
    pub member_idx: usize,
    pub asset: String,
    pub side: Side,
    pub raw_weight: f64,
    pub sized_weight: f64,
    pub capped: bool,
    pub final_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RebalanceWeights {
    pub date_idx: usize,
    pub abstained: bool,
    pub positions: Vec<Position>,
}

impl RebalanceWeights {
    pub fn gross(&self) -> f64 {
        self.positions.iter().map(|p| p.final_weight.abs()).sum()
    }

    pub fn capped_assets(&self) -> Vec<&str> {
        self.positions.iter().filter(|p| p.capped).map(|p| p.asset.as_str()).collect()
    }
}

/// Per-date inputs shared by all variants.
pub struct PolicyInputs<'a> {
    pub panel: &'a Panel,
    /// Indexed by date; `None` outside the computed range.
    pub gate: &'a [GatePoint],
    /// Point-in-time epistemic signal by `[date][member]`.
    pub ehat: &'a [Vec<Option<f64>>],
}

/// First trading date of each calendar month within `range`.
pub fn monthly_rebalance_dates(panel: &Panel, range: std::ops::Range<usize>) -> Vec<usize> {
    let mut out = Vec::new();
    for t in range {
        let d = panel.sections[t].date;
        let first = t == 0 || {
            let p = panel.sections[t - 1].date;
            (p.year(), p.month()) != (d.year(), d.month())
        };
        if first {
            out.push(t);
        }
    }
    out
}

fn abstain(t: usize) -> RebalanceWeights {
    RebalanceWeights {
        date_idx: t,
        abstained: true,
        positions: Vec::new(),
    }
}

/// Target weights on one rebalance date.
pub fn weights_on_date(
    inputs: &PolicyInputs,
    t: usize,
    variant: &PolicyVariant,
    config: &PolicyConfig,
    calib: &Calibration,
) -> RebalanceWeights {
    let gate = inputs.gate.get(t);
    if variant.gated() {
        let g = gate.and_then(|p| p.gate);
        if !g.is_some_and(|g| g >= config.theta) {
            return abstain(t);
        }
    }
    let k = config.k;
    let members = &inputs.panel.sections[t].members;
    let ids: Vec<&str> = members.iter().map(|m| m.asset.as_str()).collect();
    let scores: Vec<f64> = members.iter().map(|m| m.score_primary).collect();
    let ehat = inputs.ehat.get(t);

    let vol_mult: Vec<f64> = members
        .iter()
        .map(|m| {
            if variant.vol_sized() {
                let v = m.features.get(Feature::Vol20d).unwrap_or(0.0);
                inverse_sqrt_multiplier(v, calib.c_vol, config.eps)
            } else {
                1.0
            }
        })
        .collect();
    let sized: Vec<f64> = scores.iter().zip(&vol_mult).map(|(s, m)| s * m).collect();

    let legs = match variant {
        PolicyVariant::GateUaSort { lambda, flip } => {
            let Some(e) = ehat.and_then(|e| e.iter().copied().collect::<Option<Vec<f64>>>()) else {
                log::warn!("{}: epistemic signal unavailable, holding cash", inputs.panel.sections[t].date);
                return abstain(t);
            };
            let mut l = lambda.unwrap_or(calib.lambda);
            if *flip {
                l = -l;
            }
            let (ls, ss) = ua_sort(&scores, &e, l);
            select_legs_two_sided(&ids, &ls, &ss, k)
        }
        _ => select_legs(&ids, &sized, k),
    };
    let legs = match legs {
        Ok(l) => l,
        Err(e) => {
            log::warn!("{}: {e}; date skipped", inputs.panel.sections[t].date);
            return abstain(t);
        }
    };

    let mut positions: Vec<Position> = legs
        .longs
        .iter()
        .map(|&i| (i, Side::Long))
        .chain(legs.shorts.iter().map(|&i| (i, Side::Short)))
        .map(|(i, side)| {
            let raw = match side {
                Side::Long => 1.0 / k as f64,
                Side::Short => -1.0 / k as f64,
            };
            let sized = raw * vol_mult[i];
            Position {
                member_idx: i,
                asset: ids[i].to_string(),
                side,
                raw_weight: raw,
                sized_weight: sized,
                capped: false,
                final_weight: sized,
            }
        })
        .collect();

    match variant {
        PolicyVariant::GateEhatCap { p, kappa } | PolicyVariant::GateVolEhatCap { p, kappa } => {
            let complete = ehat.and_then(|e| {
                positions.iter().all(|p| e[p.member_idx].is_some()).then_some(e)
            });
            match complete {
                Some(e) => {
                    let defined: Vec<(usize, f64)> =
                        e.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
                    let vals: Vec<f64> = defined.iter().map(|x| x.1).collect();
                    let flags = cap_flags(&vals, *p);
                    for pos in positions.iter_mut() {
                        let k = defined.iter().position(|x| x.0 == pos.member_idx).unwrap();
                        if flags[k] {
                            pos.capped = true;
                            pos.final_weight = pos.sized_weight * kappa;
                        }
                    }
                }
                None => log::warn!(
                    "{}: epistemic signal missing for a held asset, cap skipped",
                    inputs.panel.sections[t].date
                ),
            }
        }
        PolicyVariant::GateResidEhat => {
            let resid = ehat.and_then(|e| {
                let rows: Vec<(usize, f64)> = e.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
                let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let x: Vec<f64> = rows.iter().map(|r| scores[r.0].abs()).collect();
                match stats::ols_residualize(&y, &[x]) {
                    Ok(res) => Some((rows, res)),
                    Err(err) => {
                        log::warn!("{}: {err}; weights left unsized", inputs.panel.sections[t].date);
                        None
                    }
                }
            });
            if let Some((rows, res)) = resid {
                for pos in positions.iter_mut() {
                    if let Some(k) = rows.iter().position(|r| r.0 == pos.member_idx) {
                        let m = inverse_sqrt_multiplier(res[k], calib.c_resid, config.eps);
                        pos.sized_weight = pos.raw_weight * m;
                        pos.final_weight = pos.sized_weight;
                    }
                }
            }
        }
        PolicyVariant::TrailIcK4 => {
            let Some(ewma) = gate.and_then(|p| p.h_real) else {
                return abstain(t);
            };
            let s = trail_ic_scale(ewma, calib.ic_ref);
            for pos in positions.iter_mut() {
                pos.sized_weight = pos.raw_weight * s;
                pos.final_weight = pos.sized_weight;
            }
        }
        _ => {}
    }
    RebalanceWeights {
        date_idx: t,
        abstained: false,
        positions,
    }
}

pub fn apply_policy(
    inputs: &PolicyInputs,
    dates: &[usize],
    variant: &PolicyVariant,
    config: &PolicyConfig,
    calib: &Calibration,
) -> Vec<RebalanceWeights> {
    dates
        .iter()
        .map(|&t| weights_on_date(inputs, t, variant, config, calib))
        .collect()
}

pub fn write_weights_csv<W: Write>(panel: &Panel, ledger: &[RebalanceWeights], writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "asset", "side", "raw_weight", "sized_weight", "capped_flag", "final_weight"])?;
    for r in ledger {
        let date = panel.sections[r.date_idx].date.to_string();
        for p in &r.positions {
            w.write_record([
                date.clone(),
                p.asset.clone(),
                match p.side {
                    Side::Long => "long".into(),
                    Side::Short => "short".into(),
                },
                p.raw_weight.to_string(),
                p.sized_weight.to_string(),
                p.capped.to_string(),
                p.final_weight.to_string(),
            ])?;
        }
    }
    w.flush()
}
