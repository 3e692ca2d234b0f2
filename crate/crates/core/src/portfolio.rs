//! Shadow portfolio simulation with turnover-based costs and the monthly
//! performance metric suite.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::Serialize;
use thiserror::Error;

use crate::panel::{Panel, PanelError};
use crate::policy::RebalanceWeights;
use crate::stats;

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("performance metrics need at least 2 periods, got {0}")]
    TooFewPeriods(usize),
}

/// Cost convention: `cost = cost_bps / 1e4 * traded notional`, where traded
/// notional is `2 * turnover` and turnover is `0.5 * sum |w_new - w_old|`.
pub const COST_CONVENTION: &str = "cost = cost_bps/1e4 * 2 * turnover; turnover = 0.5 * sum|w_new - w_old|";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodReturn {
    pub date_idx: usize,
    pub date: NaiveDate,
    pub gross: f64,
    pub turnover: f64,
    pub cost: f64,
    pub net: f64,
    pub abstained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioPath {
    pub periods: Vec<PeriodReturn>,
}

impl PortfolioPath {
    pub fn net_returns(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.net).collect()
    }

    pub fn end_value(&self) -> f64 {
        self.periods.iter().fold(1.0, |v, p| v * (1.0 + p.net))
    }
}

/// Runs the ledger period by period. Abstained periods earn nothing, trade
/// nothing and leave the book flat, so re-entry pays the full entry cost.
pub fn simulate(
    ledger: &[RebalanceWeights],
    panel: &Panel,
    horizon: usize,
    cost_bps: f64,
) -> Result<PortfolioPath, PortfolioError> {
    let hi = panel.horizon_index(horizon)?;
    let mut held: BTreeMap<&str, f64> = BTreeMap::new();
    let mut periods = Vec::with_capacity(ledger.len());
    for r in ledger {
        let section = &panel.sections[r.date_idx];
        if r.abstained {
            held.clear();
            periods.push(PeriodReturn {
                date_idx: r.date_idx,
                date: section.date,
                gross: 0.0,
                turnover: 0.0,
                cost: 0.0,
                net: 0.0,
                abstained: true,
            });
            continue;
        }
        let mut target: BTreeMap<&str, f64> = BTreeMap::new();
        for p in &r.positions {
            *target.entry(p.asset.as_str()).or_insert(0.0) += p.final_weight;
        }
        let mut traded = 0.0;
        for (a, w) in &target {
            traded += (w - held.get(a).copied().unwrap_or(0.0)).abs();
        }
        for (a, w) in &held {
            if !target.contains_key(a) {
                traded += w.abs();
            }
        }
        let turnover = 0.5 * traded;
        let mut gross = 0.0;
        for p in &r.positions {
            match section.members[p.member_idx].fwd_returns[hi] {
                Some(ret) => gross += p.final_weight * ret,
                None => log::warn!(
                    "{}: no forward return for {}, position contributes 0",
                    section.date,
                    p.asset
                ),
            }
        }
        let cost = cost_bps / 1e4 * 2.0 * turnover;
        periods.push(PeriodReturn {
            date_idx: r.date_idx,
            date: section.date,
            gross,
            turnover,
            cost,
            net: gross - cost,
            abstained: false,
        });
        held = target;
    }
    Ok(PortfolioPath { periods })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfReport {
    pub n_periods: usize,
    /// None when the return series is flat.
    pub sharpe_ann: Option<f64>,
    pub sortino_ann: Option<f64>,
    pub max_dd: f64,
    pub calmar: Option<f64>,
    pub ann_return: f64,
    pub cagr: f64,
    pub ann_vol: f64,
    pub hit_rate: f64,
    pub win_loss: Option<f64>,
    pub best: f64,
    pub worst: f64,
    pub mean_turnover: f64,
    pub median_turnover: f64,
    pub crisis_max_dd: Option<f64>,
    pub abstention: f64,
    pub comparability_note: Option<String>,
}

/// Maximum drawdown of the compounded path starting from 1 (non-positive).
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let (mut value, mut peak, mut dd) = (1.0f64, 1.0f64, 0.0f64);
    for r in returns {
        value *= 1.0 + r;
        peak = peak.max(value);
        dd = dd.min(value / peak - 1.0);
    }
    dd
}

pub fn perf_report(
    path: &PortfolioPath,
    crisis: Option<(NaiveDate, NaiveDate)>,
) -> Result<PerfReport, PortfolioError> {
    let r = path.net_returns();
    let n = r.len();
    if n < 2 {
        return Err(PortfolioError::TooFewPeriods(n));
    }
    let ann = 12f64.sqrt();
    // Below this the spread is round-off from a constant series.
    let flat = 1e-12 * (1.0 + r.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let mean = stats::mean(&r).unwrap();
    let sd = stats::std_dev(&r).unwrap();
    let downside = (r.iter().map(|x| x.min(0.0).powi(2)).sum::<f64>() / n as f64).sqrt();
    let max_dd = max_drawdown(&r);
    let end = path.end_value();
    let cagr = end.powf(12.0 / n as f64) - 1.0;
    let wins: Vec<f64> = r.iter().copied().filter(|x| *x > 0.0).collect();
    let losses: Vec<f64> = r.iter().copied().filter(|x| *x < 0.0).collect();
    let turnover: Vec<f64> = path.periods.iter().map(|p| p.turnover).collect();
    let abstained = path.periods.iter().filter(|p| p.abstained).count();
    let crisis_max_dd = crisis.and_then(|(lo, hi)| {
        let sub: Vec<f64> = path
            .periods
            .iter()
            .filter(|p| p.date >= lo && p.date <= hi)
            .map(|p| p.net)
            .collect();
        (!sub.is_empty()).then(|| max_drawdown(&sub))
    });
    let comparability_note = (abstained > 0).then(|| {
        let note = format!(
            "{abstained} of {n} periods abstained at zero return; not directly comparable to ungated baselines"
        );
        log::info!("{note}");
        note
    });
    Ok(PerfReport {
        n_periods: n,
        sharpe_ann: (sd > flat).then(|| mean / sd * ann),
        sortino_ann: (downside > 0.0).then(|| mean / downside * ann),
        max_dd,
        calmar: (max_dd < 0.0).then(|| cagr / max_dd.abs()),
        ann_return: mean * 12.0,
        cagr,
        ann_vol: sd * ann,
        hit_rate: wins.len() as f64 / n as f64,
        win_loss: match (stats::mean(&wins), stats::mean(&losses)) {
            (Some(w), Some(l)) => Some(w / l.abs()),
            _ => None,
        },
        best: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst: r.iter().copied().fold(f64::INFINITY, f64::min),
        mean_turnover: stats::mean(&turnover).unwrap(),
        median_turnover: stats::median(&turnover).unwrap(),
        crisis_max_dd,
        abstention: abstained as f64 / n as f64,
        comparability_note,
    })
}

pub fn write_path_csv<W: Write>(path: &PortfolioPath, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "gross", "turnover", "cost", "net", "abstained"])?;
    for p in &path.periods {
        w.write_record([
            p.date.to_string(),
            p.gross.to_string(),
            p.turnover.to_string(),
            p.cost.to_string(),
            p.net.to_string(),
            p.abstained.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{AssetDay, CrossSection, Features};
    use crate::policy::{Position, Side};

    fn panel(rets: &[Vec<Option<f64>>]) -> Panel {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        Panel {
            horizons: vec![20],
            sections: rets
                .iter()
                .enumerate()
                .map(|(t, row)| CrossSection {
                    date: start + chrono::Months::new(t as u32),
                    members: row
                        .iter()
                        .enumerate()
                        .map(|(i, r)| AssetDay {
                            asset: format!("A{i}"),
                            features: Features::default(),
                            score_primary: 0.0,
                            score_secondary: None,
                            daily_return: None,
                            fwd_returns: vec![*r],
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn book(t: usize, w: &[(usize, f64)]) -> RebalanceWeights {
        RebalanceWeights {
            date_idx: t,
            abstained: false,
            positions: w
                .iter()
                .map(|&(i, w)| Position {
                    member_idx: i,
                    asset: format!("A{i}"),
                    side: if w > 0.0 { Side::Long } else { Side::Short },
                    raw_weight: w,
                    sized_weight: w,
                    capped: false,
                    final_weight: w,
                })
                .collect(),
        }
    }

    #[test]
    fn single_long_hand_accounting() {
        let p = panel(&[vec![Some(0.05)]]);
        let path = simulate(&[book(0, &[(0, 1.0)])], &p, 20, 10.0).unwrap();
        let q = &path.periods[0];
        assert_eq!(q.turnover, 0.5);
        assert!((q.cost - 0.001).abs() < 1e-15);
        assert!((q.net - 0.049).abs() < 1e-15);
    }

    #[test]
    fn full_flip_turnover() {
        let p = panel(&[vec![Some(0.0), Some(0.0)], vec![Some(0.0), Some(0.0)]]);
        let ledger = [book(0, &[(0, 0.5), (1, -0.5)]), book(1, &[(0, -0.5), (1, 0.5)])];
        let path = simulate(&ledger, &p, 20, 10.0).unwrap();
        assert_eq!(path.periods[1].turnover, 1.0);
        assert!((path.periods[1].cost - 0.002).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_and_missing_returns() {
        let p = panel(&[vec![Some(0.1), None]]);
        let empty = RebalanceWeights {
            date_idx: 0,
            abstained: false,
            positions: vec![],
        };
        let path = simulate(&[empty], &p, 20, 10.0).unwrap();
        assert_eq!((path.periods[0].net, path.periods[0].cost), (0.0, 0.0));
        let path = simulate(&[book(0, &[(0, 0.5), (1, -0.5)])], &p, 20, 0.0).unwrap();
        assert!((path.periods[0].gross - 0.05).abs() < 1e-15);
    }

    fn path_of(r: &[f64]) -> PortfolioPath {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        PortfolioPath {
            periods: r
                .iter()
                .enumerate()
                .map(|(k, &net)| PeriodReturn {
                    date_idx: k,
                    date: start + chrono::Months::new(k as u32),
                    gross: net,
                    turnover: 0.0,
                    cost: 0.0,
                    net,
                    abstained: false,
                })
                .collect(),
        }
    }

    #[test]
    fn report_examples() {
        let rep = perf_report(&path_of(&[0.01; 12]), None).unwrap();
        assert_eq!(rep.hit_rate, 1.0);
        assert_eq!(rep.max_dd, 0.0);
        assert_eq!(rep.sharpe_ann, None);
        assert_eq!(rep.calmar, None);
        let rep = perf_report(&path_of(&[0.10, -0.10]), None).unwrap();
        assert!((rep.max_dd + 0.10).abs() < 1e-12);
        assert!(matches!(
            perf_report(&path_of(&[0.1]), None),
            Err(PortfolioError::TooFewPeriods(1))
        ));
    }

    use proptest::prelude::*;

    fn ledger_from(ws: &[Vec<f64>], abstain: &[bool]) -> Vec<RebalanceWeights> {
        ws.iter()
            .enumerate()
            .map(|(t, row)| {
                let mut b = book(t, &row.iter().copied().enumerate().collect::<Vec<_>>());
                if abstain[t] {
                    b.abstained = true;
                    b.positions.clear();
                }
                b
            })
            .collect()
    }

    proptest! {
        #[test]
        fn accounting_identity_and_cost_monotone(
            rets in prop::collection::vec(prop::collection::vec(-0.2f64..0.2, 4), 2..8),
            ws in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 4), 8),
            abstain in prop::collection::vec(any::<bool>(), 8),
            bps in 0.0f64..50.0,
        ) {
            let p = panel(&rets.iter().map(|r| r.iter().map(|x| Some(*x)).collect()).collect::<Vec<_>>());
            let ledger = ledger_from(&ws[..rets.len()], &abstain);
            let path = simulate(&ledger, &p, 20, bps).unwrap();
            let more = simulate(&ledger, &p, 20, bps + 5.0).unwrap();
            for (k, q) in path.periods.iter().enumerate() {
                prop_assert!((q.net - (q.gross - q.cost)).abs() < 1e-15);
                prop_assert!(q.turnover >= 0.0);
                prop_assert!(more.periods[k].net <= q.net + 1e-15);
                if q.abstained {
                    prop_assert_eq!(q.net, 0.0);
                }
            }
        }

        #[test]
        fn abstained_period_only_changes_reentry_cost(
            rets in prop::collection::vec(prop::collection::vec(-0.2f64..0.2, 3), 3),
            ws in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 3), 3),
        ) {
            let p = panel(&rets.iter().map(|r| r.iter().map(|x| Some(*x)).collect()).collect::<Vec<_>>());
            let free = simulate(&ledger_from(&ws, &[false, true, false]), &p, 20, 0.0).unwrap();
            let direct = [book(0, &ws[0].iter().copied().enumerate().collect::<Vec<_>>()),
                          book(2, &ws[2].iter().copied().enumerate().collect::<Vec<_>>())];
            let skip = simulate(&direct, &p, 20, 0.0).unwrap();
            prop_assert!((free.end_value() - skip.end_value()).abs() < 1e-12);
        }
    }
}
