//! Config-driven orchestration: data, walk-forward uncertainty, gate,
//! deployment policies, conformal evaluation and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{self, ConformalConfig, CoverageReport, IntervalRecord, Normalizer};
use crate::deup::{self, AleatoricConfig, AleatoricMode, QuintileMode, QuintileTable, UncertaintyRecord};
use crate::error::{Error, Result};
use crate::gate::{self, GateConfig, GateEvaluation, GatePoint};
use crate::gbt::GbtConfig;
use crate::panel::{self, Feature, FoldPlan, Panel, RankLossRecord};
use crate::policy::{self, Calibration, PolicyConfig, PolicyInputs, PolicySpec, PolicyVariant, RebalanceWeights};
use crate::portfolio::{self, PerfReport, PortfolioPath};
use crate::stats;
use crate::synth::{self, RegimeScript, RegimeSegment};

/// `[date][member]` values, `None` where undefined.
pub type Grid = Vec<Vec<Option<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    Synthetic { script: RegimeScript },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub n_folds: usize,
    pub embargo: usize,
    pub min_train_folds: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            n_folds: 109,
            embargo: 90,
            min_train_folds: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Three-regime heteroscedastic script: healthy, efficacy collapse, recovery.
pub fn default_script() -> RegimeScript {
    let seg = |start, end, target_ic, stress_level| RegimeSegment {
        start,
        end,
        target_ic,
        noise_scale: 1.0,
        stress_level,
    };
    RegimeScript {
        segments: vec![
            seg(0, 499, 0.12, 0.4),
            seg(500, 649, -0.05, 0.5),
            seg(650, 1259, 0.12, 0.4),
        ],
        universe_size: 100,
        seed: 0,
        start_date: NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(),
        heteroscedasticity: 1.0,
        stress_tracks_efficacy: false,
    }
}

pub fn default_policies() -> Vec<PolicySpec> {
    let spec = |name: &str, variant| PolicySpec {
        name: name.to_string(),
        variant,
    };
    vec![
        spec("ungated_raw", PolicyVariant::UngatedRaw),
        spec("ungated_vol", PolicyVariant::UngatedVol),
        spec("gate_raw", PolicyVariant::GateRaw),
        spec("gate_vol", PolicyVariant::GateVol),
        spec("gate_ua_sort", PolicyVariant::GateUaSort { lambda: None, flip: false }),
        spec("gate_resid_ehat", PolicyVariant::GateResidEhat),
        spec("gate_ehat_cap_90_50", PolicyVariant::cap_90_50()),
        spec("gate_vol_ehat_cap_85_70", PolicyVariant::vol_cap_85_70()),
        spec("trail_ic_k4", PolicyVariant::TrailIcK4),
    ]
}

pub fn default_conformal() -> Vec<ConformalConfig> {
    Normalizer::ALL
        .iter()
        .map(|&normalizer| ConformalConfig {
            normalizer,
            ..Default::default()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not echoed or hashed, so identical runs in different directories
    /// produce identical bundles.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub horizons: Vec<usize>,
    pub deploy_horizon: usize,
    /// First date of the held-out FINAL period; the midpoint date when absent.
    pub final_start: Option<NaiveDate>,
    pub cost_bps: f64,
    pub crisis: Option<DateWindow>,
    pub input: InputConfig,
    pub folds: FoldConfig,
    pub gbt: GbtConfig,
    pub aleatoric: AleatoricConfig,
    pub gate: GateConfig,
    pub policy: PolicyConfig,
    pub policies: Vec<PolicySpec>,
    pub conformal: Vec<ConformalConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            horizons: vec![20, 60, 90],
            deploy_horizon: 20,
            final_start: None,
            cost_bps: 10.0,
            crisis: None,
            input: InputConfig::Synthetic { script: default_script() },
            folds: FoldConfig::default(),
            gbt: GbtConfig::default(),
            aleatoric: AleatoricConfig::default(),
            gate: GateConfig::default(),
            policy: PolicyConfig::default(),
            policies: default_policies(),
            conformal: default_conformal(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the run seed and deployment horizon to every sub-config that
    /// depends on them.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        let h = c.deploy_horizon;
        c.gbt.seed = c.seed;
        c.gate.horizon_lag = h;
        for k in &mut c.conformal {
            k.maturation_lag = h;
        }
        if let InputConfig::Synthetic { script } = &mut c.input {
            script.seed = c.seed;
        }
        if !c.horizons.contains(&h) {
            c.horizons.push(h);
            c.horizons.sort_unstable();
        }
        c.policy.theta = c.gate.theta;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons must be non-empty and positive".into());
        }
        if !(self.cost_bps >= 0.0) {
            return bad("cost_bps must be non-negative".into());
        }
        if let Some(w) = self.crisis {
            if w.end < w.start {
                return bad("crisis window ends before it starts".into());
            }
        }
        self.gbt.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gate.validate().map_err(Error::Config)?;
        let mut names = std::collections::BTreeSet::new();
        for p in &self.policies {
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate policy name {}", p.name));
            }
            p.variant.validate().map_err(|e| Error::Config(format!("policy {}: {e}", p.name)))?;
        }
        if self.policy.k == 0 {
            return bad("policy k must be positive".into());
        }
        for c in &self.conformal {
            c.validate().map_err(Error::Config)?;
        }
        if let InputConfig::Synthetic { script } = &self.input {
            script.validate()?;
        }
        Ok(())
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }
}

pub fn load_panel(cfg: &RunConfig) -> Result<Panel> {
    let panel = match &cfg.input {
        InputConfig::Synthetic { script } => synth::generate(script, &cfg.horizons)?,
        InputConfig::Csv { path } => panel::ingest_csv(path)?,
    };
    panel.horizon_index(cfg.deploy_horizon)?;
    Ok(panel)
}

fn grid_from<T>(panel: &Panel, items: &[T], at: impl Fn(&T) -> (usize, usize, Option<f64>)) -> Grid {
    let mut g: Grid = panel.sections.iter().map(|s| vec![None; s.members.len()]).collect();
    for it in items {
        let (d, i, v) = at(it);
        g[d][i] = v;
    }
    g
}

/// Evaluation periods in date indices. DEV covers out-of-sample dates
/// before the split; FINAL the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Periods {
    pub all: Range<usize>,
    pub dev: Range<usize>,
    pub final_: Range<usize>,
}

impl Periods {
    pub fn named(&self) -> [(&'static str, Range<usize>); 3] {
        [
            ("ALL", self.all.clone()),
            ("DEV", self.dev.clone()),
            ("FINAL", self.final_.clone()),
        ]
    }
}

/// Everything downstream consumers share: the panel, labels, walk-forward
/// uncertainty and its grids.
pub struct Prepared {
    pub config: RunConfig,
    pub panel: Panel,
    pub horizon: usize,
    pub periods: Periods,
    pub labels: Vec<RankLossRecord>,
    pub folds: Vec<FoldPlan>,
    pub records: Vec<UncertaintyRecord>,
    pub loss: Grid,
    pub e_oracle: Grid,
    pub e_pit: Grid,
    /// Epistemic signal under the configured aleatoric mode.
    pub e_deploy: Grid,
    pub tier0_c: f64,
}

pub fn split_index(panel: &Panel, final_start: Option<NaiveDate>) -> Result<usize> {
    let n = panel.n_dates();
    let idx = match final_start {
        None => n / 2,
        Some(d) => panel.sections.partition_point(|s| s.date < d),
    };
    if idx == 0 || idx >= n {
        return Err(Error::Config(format!("final_start falls outside the panel's {n} dates")));
    }
    Ok(idx)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let panel = load_panel(&cfg)?;
    prepare_with_panel(&cfg, panel)
}

/// Like [`prepare`] for an already loaded panel; `cfg` must be resolved.
pub fn prepare_with_panel(cfg: &RunConfig, panel: Panel) -> Result<Prepared> {
    let h = cfg.deploy_horizon;
    let n = panel.n_dates();
    let split = split_index(&panel, cfg.final_start)?;
    let labels = panel::make_rank_labels(&panel, h)?;
    let folds = panel::walk_forward_folds(n, cfg.folds.n_folds, cfg.folds.embargo, h, cfg.folds.min_train_folds)?;
    let oos_start = folds.first().map(|f| f.predict_dates.start).unwrap_or(n);
    if oos_start >= split {
        return Err(Error::Config(format!(
            "DEV period has no out-of-sample dates (first prediction date index {oos_start}, split {split})"
        )));
    }
    log::info!("training error predictor on {} folds", folds.len());
    let g = deup::train_gx_walkforward(&panel, &labels, &folds, &cfg.gbt)?;
    let records = deup::uncertainty_table(&panel, &labels, &g, h, &cfg.aleatoric);
    let (tier0, tier0_c) = deup::tier0_floor(&panel, &labels, h, 0..split, cfg.policy.eps)?;
    let tier2 = if cfg.aleatoric.mode == AleatoricMode::Tier2Quantile {
        let t2 = deup::tier2_floor(&panel, &labels, &folds, &cfg.gbt)?;
        Some(grid_from(&panel, &t2, |p| (p.row.date_idx, p.row.member_idx, Some(p.value))))
    } else {
        None
    };
    let loss = grid_from(&panel, &labels, |r| (r.date_idx, r.member_idx, Some(r.loss)));
    let e_oracle = grid_from(&panel, &records, |r| (r.date_idx, r.member_idx, r.e_oracle));
    let e_pit = grid_from(&panel, &records, |r| (r.date_idx, r.member_idx, r.e_pit));
    let e_deploy = grid_from(&panel, &records, |r| {
        let (d, i) = (r.date_idx, r.member_idx);
        let floor = match cfg.aleatoric.mode {
            AleatoricMode::Oracle => r.a_oracle,
            AleatoricMode::PitRolling => r.a_pit,
            AleatoricMode::Expanding => r.a_exp,
            AleatoricMode::Tier0Iqr => tier0[d],
            AleatoricMode::Tier2Quantile => tier2.as_ref().and_then(|t| t[d][i]),
        };
        (d, i, floor.map(|a| deup::epistemic(r.g, a)))
    });
    Ok(Prepared {
        config: cfg.clone(),
        periods: Periods {
            all: oos_start..n,
            dev: oos_start..split,
            final_: split..n,
        },
        panel,
        horizon: h,
        labels,
        folds,
        records,
        loss,
        e_oracle,
        e_pit,
        e_deploy,
        tier0_c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankIcRow {
    pub horizon: usize,
    pub period: String,
    pub n_dates: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Mean over standard deviation of the per-date RankIC.
    pub stability: Option<f64>,
}

pub fn rank_ic_table(prep: &Prepared) -> Result<Vec<RankIcRow>> {
    let mut out = Vec::new();
    for &h in &prep.panel.horizons {
        let ic = prep.panel.rank_ic(h)?;
        for (name, range) in prep.periods.named() {
            let v: Vec<f64> = ic[range].iter().flatten().copied().collect();
            let (mean, sd) = (stats::mean(&v), stats::std_dev(&v));
            out.push(RankIcRow {
                horizon: h,
                period: name.into(),
                n_dates: v.len(),
                mean,
                median: stats::median(&v),
                stability: match (mean, sd) {
                    (Some(m), Some(s)) if s > 0.0 => Some(m / s),
                    _ => None,
                },
            });
        }
    }
    Ok(out)
}

/// Candidate per-row signals compared against realized rank displacement.
fn row_signals(prep: &Prepared) -> Vec<(&'static str, Grid)> {
    let p = &prep.panel;
    let from = |f: &dyn Fn(usize, usize) -> Option<f64>| -> Grid {
        p.sections
            .iter()
            .enumerate()
            .map(|(d, s)| (0..s.members.len()).map(|i| f(d, i)).collect())
            .collect()
    };
    let g = grid_from(p, &prep.records, |r| (r.date_idx, r.member_idx, Some(r.g)));
    vec![
        ("ehat", prep.e_deploy.clone()),
        ("g", g),
        (
            "vol_20d",
            from(&|d, i| p.sections[d].members[i].features.get(Feature::Vol20d)),
        ),
        ("abs_score", from(&|d, i| Some(p.sections[d].members[i].score_primary.abs()))),
    ]
}

/// Rows (in date order) of `range` where the loss and every listed grid are
/// defined.
fn aligned_rows(prep: &Prepared, range: Range<usize>, grids: &[&Grid]) -> Vec<(usize, usize)> {
    let mut rows = Vec::new();
    for d in range {
        for i in 0..prep.panel.sections[d].members.len() {
            if prep.loss[d][i].is_some() && grids.iter().all(|g| g[d][i].is_some()) {
                rows.push((d, i));
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuintileRow {
    pub signal: String,
    pub period: String,
    pub table: Option<QuintileTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceRow {
    pub period: String,
    pub signal: String,
    pub mean_rank_corr_with_loss: Option<f64>,
    pub high_loss_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingRow {
    pub period: String,
    pub n_dates: usize,
    pub median: Option<f64>,
    pub fraction_positive: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub quintiles: Vec<QuintileRow>,
    pub dominance: Vec<DominanceRow>,
    pub coupling: Vec<CouplingRow>,
}

pub fn diagnostics(prep: &Prepared) -> Diagnostics {
    let signals = row_signals(prep);
    let grids: Vec<&Grid> = signals.iter().map(|s| &s.1).collect();
    let mut quintiles = Vec::new();
    let mut dominance = Vec::new();
    let mut coupling = Vec::new();
    for (name, range) in prep.periods.named() {
        let rows = aligned_rows(prep, range, &grids);
        let dates: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let loss: Vec<f64> = rows.iter().map(|&(d, i)| prep.loss[d][i].unwrap()).collect();
        let col = |g: &Grid| -> Vec<f64> { rows.iter().map(|&(d, i)| g[d][i].unwrap()).collect() };
        let cols: Vec<(String, Vec<f64>)> = signals.iter().map(|(s, g)| (s.to_string(), col(g))).collect();
        for (s, v) in &cols {
            quintiles.push(QuintileRow {
                signal: s.clone(),
                period: name.into(),
                table: deup::quintile_table(v, &loss, &dates, QuintileMode::Pooled),
            });
        }
        for ((s, mean), (_, v)) in deup::baseline_dominance(&cols, &loss, &dates).into_iter().zip(&cols) {
            dominance.push(DominanceRow {
                period: name.into(),
                signal: s,
                mean_rank_corr_with_loss: mean,
                high_loss_auroc: deup::high_loss_auroc(v, &loss),
            });
        }
        let c = deup::coupling_series(&dates, &cols[0].1, &cols[3].1);
        coupling.push(CouplingRow {
            period: name.into(),
            n_dates: c.per_date.len(),
            median: c.median,
            fraction_positive: c.fraction_positive,
        });
    }
    Diagnostics {
        quintiles,
        dominance,
        coupling,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub period: String,
    pub predictor: String,
    pub evaluation: Option<GateEvaluation>,
}

/// Date-level trust predictors: the gate and its health index plus
/// baselines (higher means more trust). Missing values count as 0.
pub fn gate_predictors(prep: &Prepared, points: &[GatePoint]) -> Vec<(&'static str, Vec<f64>)> {
    let p = &prep.panel;
    let mean_feature = |f: Feature| -> Vec<Option<f64>> {
        p.sections
            .iter()
            .map(|s| {
                let v: Vec<f64> = s.members.iter().filter_map(|m| m.features.get(f)).collect();
                stats::mean(&v)
            })
            .collect()
    };
    let agg = |q: &dyn Fn(&[f64]) -> f64| -> Vec<Option<f64>> {
        prep.e_deploy
            .iter()
            .map(|row| {
                let mut v: Vec<f64> = row.iter().flatten().copied().collect();
                if v.len() < 2 {
                    return None;
                }
                v.sort_by(f64::total_cmp);
                Some(q(&v))
            })
            .collect()
    };
    let stress = mean_feature(Feature::VixPercentile252d);
    let months = policy::monthly_rebalance_dates(p, 0..p.n_dates());
    let windows: Vec<Range<usize>> = months
        .iter()
        .enumerate()
        .map(|(k, &s)| s..months.get(k + 1).copied().unwrap_or(p.n_dates()))
        .collect();
    let abstain = gate::vix_gate_baseline(&stress, &windows, 252, 0.67);
    let mut stress_gate = vec![1.0; p.n_dates()];
    for (w, a) in windows.iter().zip(&abstain) {
        for t in w.clone() {
            stress_gate[t] = if *a { 0.0 } else { 1.0 };
        }
    }
    let fill = |v: Vec<Option<f64>>, sign: f64| -> Vec<f64> { v.into_iter().map(|x| sign * x.unwrap_or(0.0)).collect() };
    vec![
        ("gate_G", fill(points.iter().map(|x| x.gate).collect(), 1.0)),
        ("health_H", fill(points.iter().map(|x| x.health).collect(), 1.0)),
        ("stress_proxy", fill(stress.iter().map(|s| s.map(|s| 1.0 - s)).collect(), 1.0)),
        ("stress_window_gate", stress_gate),
        ("market_vol", fill(mean_feature(Feature::MarketVol21d), -1.0)),
        ("mean_stock_vol", fill(mean_feature(Feature::Vol20d), -1.0)),
        ("ehat_median", fill(agg(&|v| stats::quantile_sorted(v, 0.5)), -1.0)),
        ("ehat_p90", fill(agg(&|v| stats::quantile_sorted(v, 0.9)), -1.0)),
        (
            "ehat_iqr",
            fill(
                agg(&|v| stats::quantile_sorted(v, 0.75) - stats::quantile_sorted(v, 0.25)),
                -1.0,
            ),
        ),
    ]
}

/// Scores every predictor against good days, where a good day has a
/// positive realized RankIC for the predictions made that date. Dates
/// without a defined gate or RankIC are dropped.
pub fn gate_tables(prep: &Prepared, points: &[GatePoint]) -> Result<Vec<GateRow>> {
    let ic = prep.panel.rank_ic(prep.horizon)?;
    let predictors = gate_predictors(prep, points);
    let theta = prep.config.gate.theta;
    let mut out = Vec::new();
    for (name, range) in prep.periods.named() {
        let dates: Vec<usize> = range.filter(|&t| points[t].gate.is_some() && ic[t].is_some()).collect();
        let target: Vec<f64> = dates.iter().map(|&t| ic[t].unwrap()).collect();
        for (pname, values) in &predictors {
            let v: Vec<f64> = dates.iter().map(|&t| values[t]).collect();
            out.push(GateRow {
                period: name.into(),
                predictor: pname.to_string(),
                evaluation: gate::evaluate_gate(&v, &target, theta).ok(),
            });
        }
    }
    Ok(out)
}

/// Rebalance dates with matured labels inside `range`.
pub fn rebalance_dates(prep: &Prepared, range: Range<usize>) -> Vec<usize> {
    let last = prep.panel.n_dates().saturating_sub(prep.horizon);
    let range = range.start..range.end.min(last);
    policy::monthly_rebalance_dates(&prep.panel, range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub constants: Calibration,
    pub tier0_c: f64,
    pub lambda_grid_sharpe: Vec<(f64, Option<f64>)>,
    pub dev_dates: (NaiveDate, NaiveDate),
}

/// Fits every tuned constant on `dev` dates only.
pub fn calibrate(prep: &Prepared, points: &[GatePoint], dev: Range<usize>) -> Result<CalibrationReport> {
    let p = &prep.panel;
    let pc = &prep.config.policy;
    let target = pc.target_median_multiplier;
    let vols: Vec<f64> = dev
        .clone()
        .flat_map(|d| p.sections[d].members.iter().filter_map(|m| m.features.get(Feature::Vol20d)))
        .collect();
    let c_vol = policy::calibrate_multiplier(&vols, target, pc.eps);

    let mut positive = Vec::new();
    for d in dev.clone() {
        let rows: Vec<(f64, f64)> = p.sections[d]
            .members
            .iter()
            .zip(&prep.e_deploy[d])
            .filter_map(|(m, e)| e.map(|e| (e, m.score_primary.abs())))
            .collect();
        if rows.len() < 3 {
            continue;
        }
        let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
        if let Ok(res) = stats::ols_residualize(&y, &[x]) {
            positive.extend(res.into_iter().filter(|r| *r > 0.0));
        }
    }
    let c_resid = policy::calibrate_multiplier(&positive, target, pc.eps);

    let matured: Vec<f64> = dev
        .clone()
        .filter_map(|t| points[t].matured_ic)
        .filter(|v| *v > 0.0)
        .collect();
    let ic_ref = stats::median(&matured).unwrap_or_else(|| {
        log::warn!("no positive matured RankIC on DEV; trailing-IC sizing reference set to 0");
        0.0
    });

    let mut calib = Calibration {
        c_vol,
        c_resid,
        lambda: 0.0,
        ic_ref,
    };
    let dates = rebalance_dates(prep, dev.clone());
    let inputs = PolicyInputs {
        panel: p,
        gate: points,
        ehat: &prep.e_deploy,
    };
    let mut grid = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &pc.lambda_grid {
        let variant = PolicyVariant::GateUaSort {
            lambda: Some(lambda),
            flip: false,
        };
        let ledger = policy::apply_policy(&inputs, &dates, &variant, pc, &calib);
        let path = portfolio::simulate(&ledger, p, prep.horizon, prep.config.cost_bps)?;
        let sharpe = portfolio::perf_report(&path, None).ok().and_then(|r| r.sharpe_ann);
        grid.push((lambda, sharpe));
        let s = sharpe.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((lambda, s));
        }
    }
    calib.lambda = best.map(|b| b.0).unwrap_or(0.0);
    Ok(CalibrationReport {
        constants: calib,
        tier0_c: prep.tier0_c,
        lambda_grid_sharpe: grid,
        dev_dates: (p.sections[dev.start].date, p.sections[dev.end - 1].date),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub policy: String,
    pub period: String,
    pub report: Option<PerfReport>,
}

pub struct PolicyRun {
    pub spec: PolicySpec,
    pub ledger: Vec<RebalanceWeights>,
    pub path: PortfolioPath,
}

pub fn run_policies(
    prep: &Prepared,
    points: &[GatePoint],
    calib: &Calibration,
    ehat: &Grid,
    specs: &[PolicySpec],
) -> Result<Vec<PolicyRun>> {
    let dates = rebalance_dates(prep, prep.periods.all.clone());
    let inputs = PolicyInputs {
        panel: &prep.panel,
        gate: points,
        ehat,
    };
    specs
        .par_iter()
        .map(|spec| {
            let ledger = policy::apply_policy(&inputs, &dates, &spec.variant, &prep.config.policy, calib);
            let path = portfolio::simulate(&ledger, &prep.panel, prep.horizon, prep.config.cost_bps)?;
            Ok(PolicyRun {
                spec: spec.clone(),
                ledger,
                path,
            })
        })
        .collect()
}

fn sub_path(path: &PortfolioPath, range: &Range<usize>) -> PortfolioPath {
    PortfolioPath {
        periods: path.periods.iter().filter(|p| range.contains(&p.date_idx)).cloned().collect(),
    }
}

pub fn policy_table(prep: &Prepared, runs: &[PolicyRun]) -> Vec<PolicyRow> {
    let crisis = prep.config.crisis.map(|w| (w.start, w.end));
    let mut out = Vec::new();
    for run in runs {
        for (name, range) in prep.periods.named() {
            out.push(PolicyRow {
                policy: run.spec.name.clone(),
                period: name.into(),
                report: portfolio::perf_report(&sub_path(&run.path, &range), crisis).ok(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeployabilityRow {
    pub policy: String,
    pub period: String,
    pub sharpe_oracle_floor: Option<f64>,
    pub sharpe_pit_floor: Option<f64>,
    /// Share of traded rebalance dates whose capped sets agree.
    pub capped_set_agreement: Option<f64>,
    pub pnl_identical: bool,
}

/// Compares cap policies under the same-date (oracle) and point-in-time
/// floors.
pub fn deployability_table(prep: &Prepared, points: &[GatePoint], calib: &Calibration) -> Result<Vec<DeployabilityRow>> {
    let caps: Vec<PolicySpec> = prep
        .config
        .policies
        .iter()
        .filter(|s| matches!(s.variant, PolicyVariant::GateEhatCap { .. } | PolicyVariant::GateVolEhatCap { .. }))
        .cloned()
        .collect();
    let oracle = run_policies(prep, points, calib, &prep.e_oracle, &caps)?;
    let pit = run_policies(prep, points, calib, &prep.e_pit, &caps)?;
    let mut out = Vec::new();
    for (o, q) in oracle.iter().zip(&pit) {
        for (name, range) in prep.periods.named() {
            let (po, pq) = (sub_path(&o.path, &range), sub_path(&q.path, &range));
            let mut traded = 0;
            let mut agree = 0;
            for (a, b) in o.ledger.iter().zip(&q.ledger) {
                if !range.contains(&a.date_idx) || a.abstained {
                    continue;
                }
                traded += 1;
                agree += usize::from(a.capped_assets() == b.capped_assets());
            }
            let sharpe = |p: &PortfolioPath| portfolio::perf_report(p, None).ok().and_then(|r| r.sharpe_ann);
            out.push(DeployabilityRow {
                policy: o.spec.name.clone(),
                period: name.into(),
                sharpe_oracle_floor: sharpe(&po),
                sharpe_pit_floor: sharpe(&pq),
                capped_set_agreement: (traded > 0).then(|| agree as f64 / traded as f64),
                pnl_identical: po.net_returns() == pq.net_returns(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub period: String,
    pub report: Option<CoverageReport>,
}

pub fn conformal_intervals(prep: &Prepared, cfg: &ConformalConfig) -> Vec<IntervalRecord> {
    let ehat = match cfg.normalizer {
        Normalizer::DeupOracle => Some(prep.e_oracle.as_slice()),
        Normalizer::DeupPit => Some(prep.e_pit.as_slice()),
        _ => None,
    };
    let points = conformal::conformal_points(&prep.panel, &prep.loss, cfg.normalizer, ehat);
    conformal::rolling_intervals(&points, cfg)
}

/// Coverage by point-in-time epistemic tercile for each period.
pub fn coverage_table(prep: &Prepared, records: &[IntervalRecord]) -> Vec<CoverageRow> {
    prep.periods
        .named()
        .into_iter()
        .map(|(name, range)| {
            let rows: Vec<IntervalRecord> = records.iter().filter(|r| range.contains(&r.date_idx)).cloned().collect();
            CoverageRow {
                period: name.into(),
                report: conformal::coverage_report(&rows, |r| prep.e_pit[r.date_idx][r.member_idx]),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodBounds {
    pub name: String,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub n_dates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub version: String,
    pub seed: u64,
    pub deploy_horizon: usize,
    pub n_dates: usize,
    pub n_rows: usize,
    pub n_folds: usize,
    pub periods: Vec<PeriodBounds>,
    pub cost_convention: String,
    pub calibration: CalibrationReport,
    pub rank_ic: Vec<RankIcRow>,
    pub diagnostics: Diagnostics,
    pub gate: Vec<GateRow>,
    pub policies: Vec<PolicyRow>,
    pub deployability: Vec<DeployabilityRow>,
    pub conformal: BTreeMap<String, Vec<CoverageRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub files: Vec<String>,
}

/// Collects output files and writes them under one directory.
struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write(BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let body = serde_json::to_string_pretty(value).expect("serializable report");
        self.text(name, &(body + "\n"))
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config_sha256: cfg.sha256()?,
            files: std::mem::take(&mut self.files),
        };
        self.json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

fn begin(cfg: &RunConfig) -> Result<(RunConfig, Emitter)> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let mut em = Emitter::new(&cfg.out_dir)?;
    em.text("config.toml", &cfg.to_toml_string()?)?;
    Ok((cfg, em))
}

/// Writes the input panel (and the script, when synthetic).
pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    let (cfg, mut em) = begin(cfg)?;
    let panel = load_panel(&cfg)?;
    em.csv("panel.csv", |w| panel.write_csv(w).map_err(std::io::Error::other))?;
    if let InputConfig::Synthetic { script } = &cfg.input {
        em.json("script.json", script)?;
    }
    em.finish(&cfg)
}

/// Full pipeline: every table and per-module CSV.
pub fn cmd_run(cfg: &RunConfig) -> Result<Summary> {
    let (cfg, mut em) = begin(cfg)?;
    let prep = prepare_with_panel(&cfg, load_panel(&cfg)?)?;
    let summary = run_prepared(&prep, &mut em)?;
    em.finish(&cfg)?;
    Ok(summary)
}

fn write_common(prep: &Prepared, points: &[GatePoint], em: &mut Emitter) -> Result<()> {
    em.csv("panel.csv", |w| prep.panel.write_csv(w).map_err(std::io::Error::other))?;
    em.csv("uncertainty.csv", |w| deup::write_uncertainty_csv(&prep.panel, &prep.records, w))?;
    em.csv("gate.csv", |w| gate::write_gate_csv(&prep.panel, points, w))
}

fn run_prepared(prep: &Prepared, em: &mut Emitter) -> Result<Summary> {
    let cfg = &prep.config;
    let points = gate::compute_gate(&prep.panel, prep.horizon, &cfg.gate)?;
    write_common(prep, &points, em)?;

    let calibration = calibrate(prep, &points, prep.periods.dev.clone())?;
    log::info!("DEV calibration: {:?}", calibration.constants);
    let runs = run_policies(prep, &points, &calibration.constants, &prep.e_deploy, &cfg.policies)?;
    for run in &runs {
        em.csv(&format!("weights_{}.csv", run.spec.name), |w| {
            policy::write_weights_csv(&prep.panel, &run.ledger, w)
        })?;
        em.csv(&format!("path_{}.csv", run.spec.name), |w| portfolio::write_path_csv(&run.path, w))?;
    }

    let mut coverage = BTreeMap::new();
    let intervals: Vec<(Normalizer, Vec<IntervalRecord>)> = cfg
        .conformal
        .par_iter()
        .map(|c| (c.normalizer, conformal_intervals(prep, c)))
        .collect();
    for (norm, recs) in &intervals {
        em.csv(&format!("intervals_{}.csv", norm.name()), |w| {
            conformal::write_intervals_csv(&prep.panel, recs, w)
        })?;
        coverage.insert(norm.name().to_string(), coverage_table(prep, recs));
    }

    let summary = Summary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        deploy_horizon: prep.horizon,
        n_dates: prep.panel.n_dates(),
        n_rows: prep.panel.n_rows(),
        n_folds: prep.folds.len(),
        periods: period_bounds(prep),
        cost_convention: portfolio::COST_CONVENTION.to_string(),
        rank_ic: rank_ic_table(prep)?,
        diagnostics: diagnostics(prep),
        gate: gate_tables(prep, &points)?,
        policies: policy_table(prep, &runs),
        deployability: deployability_table(prep, &points, &calibration.constants)?,
        conformal: coverage,
        calibration,
    };
    em.json("summary.json", &summary)?;
    Ok(summary)
}

fn period_bounds(prep: &Prepared) -> Vec<PeriodBounds> {
    prep.periods
        .named()
        .into_iter()
        .map(|(name, r)| PeriodBounds {
            name: name.into(),
            start: prep.panel.sections.get(r.start).map(|s| s.date),
            end: r.end.checked_sub(1).and_then(|e| prep.panel.sections.get(e)).map(|s| s.date),
            n_dates: r.len(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReport {
    pub seed: u64,
    pub deploy_horizon: usize,
    pub rows: Vec<GateRow>,
}

/// Gate series plus baseline comparison only.
pub fn cmd_eval_gate(cfg: &RunConfig) -> Result<GateReport> {
    let (cfg, mut em) = begin(cfg)?;
    let prep = prepare_with_panel(&cfg, load_panel(&cfg)?)?;
    let points = gate::compute_gate(&prep.panel, prep.horizon, &cfg.gate)?;
    em.csv("gate.csv", |w| gate::write_gate_csv(&prep.panel, &points, w))?;
    let report = GateReport {
        seed: cfg.seed,
        deploy_horizon: prep.horizon,
        rows: gate_tables(&prep, &points)?,
    };
    em.json("gate_report.json", &report)?;
    em.finish(&cfg)?;
    Ok(report)
}

/// Conformal intervals and coverage only.
pub fn cmd_conformal(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<CoverageRow>>> {
    let (cfg, mut em) = begin(cfg)?;
    let prep = prepare_with_panel(&cfg, load_panel(&cfg)?)?;
    let mut out = BTreeMap::new();
    for c in &cfg.conformal {
        let recs = conformal_intervals(&prep, c);
        em.csv(&format!("intervals_{}.csv", c.normalizer.name()), |w| {
            conformal::write_intervals_csv(&prep.panel, &recs, w)
        })?;
        out.insert(c.normalizer.name().to_string(), coverage_table(&prep, &recs));
    }
    em.json("conformal.json", &out)?;
    em.finish(&cfg)?;
    Ok(out)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Plain-text tables from a run directory's `summary.json`.
pub fn render_report(out_dir: &Path) -> Result<String> {
    use std::fmt::Write;
    let path = out_dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let f = |x: &serde_json::Value| fmt(x.as_f64());
    let mut s = String::new();
    let rows = |key: &str| v[key].as_array().cloned().unwrap_or_default();

    writeln!(s, "RankIC by horizon and period").unwrap();
    writeln!(s, "{:>8} {:>6} {:>8} {:>8} {:>9}", "horizon", "period", "mean", "median", "stability").unwrap();
    for r in rows("rank_ic") {
        writeln!(
            s,
            "{:>8} {:>6} {:>8} {:>8} {:>9}",
            r["horizon"].to_string(), r["period"].as_str().unwrap_or(""), f(&r["mean"]), f(&r["median"]), f(&r["stability"])
        )
        .unwrap();
    }

    writeln!(s, "\nLoss by signal quintile").unwrap();
    for r in v["diagnostics"]["quintiles"].as_array().cloned().unwrap_or_default() {
        let t = &r["table"];
        let means: Vec<String> = t["mean_loss"].as_array().cloned().unwrap_or_default().iter().map(f).collect();
        writeln!(
            s,
            "{:>10} {:>6}  [{}]  Q5/Q1 {}  rho {}",
            r["signal"].as_str().unwrap_or(""),
            r["period"].as_str().unwrap_or(""),
            means.join(" "),
            f(&t["q5_over_q1"]),
            f(&t["monotonicity"])
        )
        .unwrap();
    }

    writeln!(s, "\nGate evaluation (good day = positive RankIC)").unwrap();
    writeln!(s, "{:>20} {:>6} {:>7} {:>9} {:>7} {:>10}", "predictor", "period", "auroc", "precision", "recall", "abstention").unwrap();
    for r in rows("gate") {
        let e = &r["evaluation"];
        writeln!(
            s,
            "{:>20} {:>6} {:>7} {:>9} {:>7} {:>10}",
            r["predictor"].as_str().unwrap_or(""),
            r["period"].as_str().unwrap_or(""),
            f(&e["auroc"]),
            f(&e["precision"]),
            f(&e["recall"]),
            f(&e["abstention"])
        )
        .unwrap();
    }

    writeln!(s, "\nPolicies").unwrap();
    writeln!(s, "{:>24} {:>6} {:>7} {:>8} {:>8} {:>10} {:>10}", "policy", "period", "sharpe", "max_dd", "ann_ret", "crisis_dd", "abstention").unwrap();
    for r in rows("policies") {
        let p = &r["report"];
        writeln!(
            s,
            "{:>24} {:>6} {:>7} {:>8} {:>8} {:>10} {:>10}",
            r["policy"].as_str().unwrap_or(""),
            r["period"].as_str().unwrap_or(""),
            f(&p["sharpe_ann"]),
            f(&p["max_dd"]),
            f(&p["ann_return"]),
            f(&p["crisis_max_dd"]),
            f(&p["abstention"])
        )
        .unwrap();
    }

    writeln!(s, "\nCap under oracle vs point-in-time floor").unwrap();
    for r in rows("deployability") {
        writeln!(
            s,
            "{:>24} {:>6}  sharpe {} / {}  capped-set agreement {}  identical P&L {}",
            r["policy"].as_str().unwrap_or(""),
            r["period"].as_str().unwrap_or(""),
            f(&r["sharpe_oracle_floor"]),
            f(&r["sharpe_pit_floor"]),
            f(&r["capped_set_agreement"]),
            r["pnl_identical"]
        )
        .unwrap();
    }

    writeln!(s, "\nConformal coverage by epistemic tercile").unwrap();
    if let Some(m) = v["conformal"].as_object() {
        for (norm, periods) in m {
            for r in periods.as_array().cloned().unwrap_or_default() {
                let c = &r["report"];
                let terc: Vec<String> = c["terciles"].as_array().cloned().unwrap_or_default().iter().map(f).collect();
                writeln!(
                    s,
                    "{:>12} {:>6}  marginal {}  terciles [{}]  spread {}  width {}",
                    norm,
                    r["period"].as_str().unwrap_or(""),
                    f(&c["marginal"]),
                    terc.join(" "),
                    f(&c["spread"]),
                    f(&c["mean_width"])
                )
                .unwrap();
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(dir: &Path) -> RunConfig {
        let mut script = RegimeScript::constant(420, 40, 0.15, 0);
        script.segments[0].end = 299;
        script.segments.push(RegimeSegment {
            start: 300,
            end: 419,
            target_ic: 0.0,
            noise_scale: 1.0,
            stress_level: 0.5,
        });
        RunConfig {
            out_dir: dir.to_path_buf(),
            horizons: vec![20],
            input: InputConfig::Synthetic { script },
            folds: FoldConfig {
                n_folds: 14,
                embargo: 20,
                min_train_folds: 3,
            },
            gbt: GbtConfig {
                n_estimators: 10,
                ..GbtConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        cfg.resolved().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml_str("sead = 3").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn resolved_propagates_seed_and_horizon() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.deploy_horizon = 60;
        let r = cfg.resolved();
        assert_eq!(r.gbt.seed, 9);
        assert_eq!(r.gate.horizon_lag, 60);
        assert!(r.conformal.iter().all(|c| c.maturation_lag == 60));
        let InputConfig::Synthetic { script } = &r.input else { panic!() };
        assert_eq!(script.seed, 9);
    }

    #[test]
    fn duplicate_policy_names_rejected() {
        let mut cfg = RunConfig::default();
        cfg.policies.push(cfg.policies[0].clone());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let s = cmd_run(&cfg).unwrap();
        assert_eq!(s.policies.len(), 9 * 3);
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("weights_gate_vol.csv").exists());
        let text = render_report(dir.path()).unwrap();
        assert!(text.contains("gate_G"));
    }
}
