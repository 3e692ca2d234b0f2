//! Dated cross-sectional panel: data model, CSV ingestion/export, rank-loss
//! labels and walk-forward fold plans with embargo and purge.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Ingest { line: u64, msg: String },
    #[error("line {line}: duplicate key ({date}, {asset})")]
    DuplicateKey {
        line: u64,
        date: NaiveDate,
        asset: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("not enough dates ({n_dates}) for {n_folds} folds")]
    InsufficientDates { n_dates: usize, n_folds: usize },
    #[error("fold {fold_id}: embargo leaves no training dates")]
    EmptyTrainSet { fold_id: usize },
    #[error("horizon {0} not present in panel")]
    UnknownHorizon(usize),
}

/// Base-panel features, in export column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Mom1m,
    Mom3m,
    Mom12m,
    Vol20d,
    Vol60d,
    Adv20d,
    CrossSectionalRank,
    VixPercentile252d,
    MarketRegimeEnc,
    MarketVol21d,
    MarketReturn21d,
    SectorEnc,
}

impl Feature {
    pub const ALL: [Feature; 12] = [
        Feature::Mom1m,
        Feature::Mom3m,
        Feature::Mom12m,
        Feature::Vol20d,
        Feature::Vol60d,
        Feature::Adv20d,
        Feature::CrossSectionalRank,
        Feature::VixPercentile252d,
        Feature::MarketRegimeEnc,
        Feature::MarketVol21d,
        Feature::MarketReturn21d,
        Feature::SectorEnc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Mom1m => "mom_1m",
            Feature::Mom3m => "mom_3m",
            Feature::Mom12m => "mom_12m",
            Feature::Vol20d => "vol_20d",
            Feature::Vol60d => "vol_60d",
            Feature::Adv20d => "adv_20d",
            Feature::CrossSectionalRank => "cross_sectional_rank",
            Feature::VixPercentile252d => "vix_percentile_252d",
            Feature::MarketRegimeEnc => "market_regime_enc",
            Feature::MarketVol21d => "market_vol_21d",
            Feature::MarketReturn21d => "market_return_21d",
            Feature::SectorEnc => "sector_enc",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Features([Option<f64>; 12]);

impl Features {
    pub fn get(&self, f: Feature) -> Option<f64> {
        self.0[f.index()]
    }

    pub fn set(&mut self, f: Feature, v: Option<f64>) {
        self.0[f.index()] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetDay {
    pub asset: String,
    pub features: Features,
    pub score_primary: f64,
    pub score_secondary: Option<f64>,
    /// Realized close-to-close return ending on this date (known at the close).
    pub daily_return: Option<f64>,
    /// Forward excess return per panel horizon, aligned with `Panel::horizons`.
    pub fwd_returns: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub date: NaiveDate,
    /// Sorted by asset id, ids unique.
    pub members: Vec<AssetDay>,
}

/// Immutable dated panel. The trading calendar is the sorted distinct dates.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub horizons: Vec<usize>,
    pub sections: Vec<CrossSection>,
}

impl Panel {
    pub fn n_dates(&self) -> usize {
        self.sections.len()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.sections.iter().map(|s| s.date).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.sections.iter().map(|s| s.members.len()).sum()
    }

    pub fn horizon_index(&self, horizon: usize) -> Result<usize, PanelError> {
        self.horizons
            .iter()
            .position(|&h| h == horizon)
            .ok_or(PanelError::UnknownHorizon(horizon))
    }

    /// First `n` dates, used for prefix/causality audits.
    pub fn truncated(&self, n: usize) -> Panel {
        Panel {
            horizons: self.horizons.clone(),
            sections: self.sections[..n.min(self.sections.len())].to_vec(),
        }
    }

    pub fn has_secondary(&self) -> bool {
        self.sections
            .iter()
            .any(|s| s.members.iter().any(|m| m.score_secondary.is_some()))
    }

    fn has_daily_returns(&self) -> bool {
        self.sections
            .iter()
            .any(|s| s.members.iter().any(|m| m.daily_return.is_some()))
    }

    /// Per-date RankIC (Spearman of score vs forward return) over labeled
    /// members; degenerate dates are `None`.
    pub fn rank_ic(&self, horizon: usize) -> Result<Vec<Option<f64>>, PanelError> {
        let hi = self.horizon_index(horizon)?;
        Ok(self
            .sections
            .iter()
            .map(|s| {
                let (sc, rt): (Vec<f64>, Vec<f64>) = s
                    .members
                    .iter()
                    .filter_map(|m| m.fwd_returns[hi].map(|r| (m.score_primary, r)))
                    .unzip();
                stats::spearman(&sc, &rt).ok()
            })
            .collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let secondary = self.has_secondary();
        let daily = self.has_daily_returns();
        let mut header: Vec<String> = vec!["date".into(), "asset".into()];
        header.extend(Feature::ALL.iter().map(|f| f.name().to_string()));
        header.push("score_primary".into());
        if secondary {
            header.push("score_secondary".into());
        }
        if daily {
            header.push("daily_ret".into());
        }
        header.extend(self.horizons.iter().map(|h| format!("ret_{h}")));
        w.write_record(&header).map_err(csv_io)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.sections {
            let date = s.date.format("%Y-%m-%d").to_string();
            for m in &s.members {
                let mut rec: Vec<String> = vec![date.clone(), m.asset.clone()];
                rec.extend(Feature::ALL.iter().map(|&f| fmt(m.features.get(f))));
                rec.push(m.score_primary.to_string());
                if secondary {
                    rec.push(fmt(m.score_secondary));
                }
                if daily {
                    rec.push(fmt(m.daily_return));
                }
                rec.extend(m.fwd_returns.iter().map(|&r| fmt(r)));
                w.write_record(&rec).map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), PanelError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn csv_io(e: csv::Error) -> PanelError {
    PanelError::Io(std::io::Error::other(e))
}

enum Column {
    Date,
    Asset,
    Feature(Feature),
    ScorePrimary,
    ScoreSecondary,
    DailyReturn,
    Return(usize),
}

fn parse_column(name: &str) -> Option<Column> {
    match name {
        "date" => Some(Column::Date),
        "asset" => Some(Column::Asset),
        "score_primary" => Some(Column::ScorePrimary),
        "score_secondary" => Some(Column::ScoreSecondary),
        "daily_ret" => Some(Column::DailyReturn),
        _ => {
            if let Some(h) = name.strip_prefix("ret_") {
                h.parse().ok().map(Column::Return)
            } else {
                Feature::from_name(name).map(Column::Feature)
            }
        }
    }
}

pub fn ingest_csv(path: &Path) -> Result<Panel, PanelError> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f))
}

/// Parses a panel. Empty cells are missing values; labels are never imputed.
pub fn read_csv<R: Read>(reader: R) -> Result<Panel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_io)?.clone();
    let mut columns = Vec::with_capacity(headers.len());
    for name in headers.iter() {
        columns.push(
            parse_column(name.trim())
                .ok_or_else(|| PanelError::Schema(format!("unknown column '{name}'")))?,
        );
    }
    for label in ["date", "asset", "score_primary"] {
        if !headers.iter().any(|h| h.trim() == label) {
            return Err(PanelError::Schema(format!("missing required column '{label}'")));
        }
    }
    let horizons: Vec<usize> = columns
        .iter()
        .filter_map(|c| match c {
            Column::Return(h) => Some(*h),
            _ => None,
        })
        .collect();

    let mut by_date: BTreeMap<NaiveDate, BTreeMap<String, AssetDay>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PanelError::Ingest {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: String| PanelError::Ingest { line, msg };
        let mut date = None;
        let mut asset = None;
        let mut row = AssetDay {
            asset: String::new(),
            features: Features::default(),
            score_primary: f64::NAN,
            score_secondary: None,
            daily_return: None,
            fwd_returns: vec![None; horizons.len()],
        };
        let mut ret_slot = 0;
        for (cell, col) in rec.iter().zip(&columns) {
            let cell = cell.trim();
            let num = |cell: &str| -> Result<Option<f64>, PanelError> {
                if cell.is_empty() {
                    return Ok(None);
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| bad(format!("cannot parse '{cell}' as number")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value '{cell}'")));
                }
                Ok(Some(v))
            };
            match col {
                Column::Date => {
                    date = Some(
                        NaiveDate::parse_from_str(cell, "%Y-%m-%d")
                            .map_err(|_| bad(format!("invalid date '{cell}'")))?,
                    )
                }
                Column::Asset => {
                    if cell.is_empty() {
                        return Err(bad("empty asset id".into()));
                    }
                    asset = Some(cell.to_string())
                }
                Column::Feature(f) => row.features.set(*f, num(cell)?),
                Column::ScorePrimary => {
                    row.score_primary = num(cell)?.ok_or_else(|| bad("missing score_primary".into()))?
                }
                Column::ScoreSecondary => row.score_secondary = num(cell)?,
                Column::DailyReturn => row.daily_return = num(cell)?,
                Column::Return(_) => {
                    row.fwd_returns[ret_slot] = num(cell)?;
                    ret_slot += 1;
                }
            }
        }
        let (date, asset) = (date.unwrap(), asset.unwrap());
        row.asset = asset.clone();
        let day = by_date.entry(date).or_default();
        if day.contains_key(&asset) {
            return Err(PanelError::DuplicateKey { line, date, asset });
        }
        day.insert(asset, row);
    }
    Ok(Panel {
        horizons,
        sections: by_date
            .into_iter()
            .map(|(date, m)| CrossSection {
                date,
                members: m.into_values().collect(),
            })
            .collect(),
    })
}

/// Realized rank displacement for one labeled (date, asset, horizon).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankLossRecord {
    pub date_idx: usize,
    pub member_idx: usize,
    pub asset: String,
    pub horizon: usize,
    pub loss: f64,
    pub score_rank: f64,
    pub return_rank: f64,
    pub score: f64,
    pub fwd_return: f64,
}

/// `|rank(return) - rank(score)|` per labeled member, ranks taken over the
/// labeled subset of each date. Dates with fewer than two labels are skipped.
pub fn make_rank_labels(panel: &Panel, horizon: usize) -> Result<Vec<RankLossRecord>, PanelError> {
    let hi = panel.horizon_index(horizon)?;
    let mut out = Vec::new();
    for (d, s) in panel.sections.iter().enumerate() {
        let labeled: Vec<(usize, f64, f64)> = s
            .members
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.fwd_returns[hi].map(|r| (i, m.score_primary, r)))
            .collect();
        if labeled.len() < 2 {
            if !s.members.is_empty() && s.members.len() >= 2 && d + horizon < panel.n_dates() {
                log::warn!("date {}: fewer than 2 labeled members at horizon {horizon}", s.date);
            }
            continue;
        }
        let scores: Vec<f64> = labeled.iter().map(|x| x.1).collect();
        let rets: Vec<f64> = labeled.iter().map(|x| x.2).collect();
        let sr = stats::percentile_rank(&scores).expect("finite scores");
        let rr = stats::percentile_rank(&rets).expect("finite returns");
        for (k, &(i, score, ret)) in labeled.iter().enumerate() {
            out.push(RankLossRecord {
                date_idx: d,
                member_idx: i,
                asset: s.members[i].asset.clone(),
                horizon,
                loss: (rr[k] - sr[k]).abs(),
                score_rank: sr[k],
                return_rank: rr[k],
                score,
                fwd_return: ret,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train_dates: Range<usize>,
    pub predict_dates: Range<usize>,
    pub embargo_days: usize,
    pub horizon: usize,
}

impl FoldPlan {
    /// Latest label-maturation date index among training dates.
    pub fn max_train_maturation(&self) -> Option<usize> {
        self.train_dates.clone().last().map(|d| d + self.horizon)
    }
}

/// Expanding-window folds over `n_dates` equal-count chronological chunks.
///
/// Fold `k` predicts chunk `k` and trains on earlier chunks, keeping only
/// dates whose label matures at least `embargo_days` before the first
/// prediction date. Only folds with at least `min_train_folds` earlier chunks
/// are returned.
pub fn walk_forward_folds(
    n_dates: usize,
    n_folds: usize,
    embargo_days: usize,
    horizon: usize,
    min_train_folds: usize,
) -> Result<Vec<FoldPlan>, PanelError> {
    if n_folds == 0 || n_dates < n_folds {
        return Err(PanelError::InsufficientDates { n_dates, n_folds });
    }
    let bound = |k: usize| k * n_dates / n_folds;
    let mut plans = Vec::new();
    for k in 1..=n_folds {
        if k - 1 < min_train_folds.max(1) {
            continue;
        }
        let predict = bound(k - 1)..bound(k);
        let gap = horizon + embargo_days;
        // d + horizon + embargo <= predict.start, and d strictly before predict
        let train_end = if predict.start >= gap {
            (predict.start - gap + 1).min(predict.start)
        } else {
            0
        };
        if train_end == 0 {
            return Err(PanelError::EmptyTrainSet { fold_id: k });
        }
        plans.push(FoldPlan {
            fold_id: k,
            train_dates: 0..train_end,
            predict_dates: predict,
            embargo_days,
            horizon,
        });
    }
    Ok(plans)
}
