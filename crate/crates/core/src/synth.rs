//! Seeded synthetic panels with scripted signal efficacy, stress and
//! heteroscedastic rank noise.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{AssetDay, CrossSection, Feature, Features, Panel, PanelError};
use crate::stats;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("segment {segment}: target_ic {target_ic} not reachable with noise_scale {noise_scale} (max {max_ic:.3})")]
    Infeasible {
        segment: usize,
        target_ic: f64,
        noise_scale: f64,
        max_ic: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSegment {
    /// First trading-day index of the segment.
    pub start: usize,
    /// Last trading-day index, inclusive.
    pub end: usize,
    pub target_ic: f64,
    pub noise_scale: f64,
    pub stress_level: f64,
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 4).unwrap()
}

fn default_hetero() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeScript {
    pub segments: Vec<RegimeSegment>,
    pub universe_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
    /// Return-noise multiplier grows by this much from the median score rank
    /// to either extreme.
    #[serde(default = "default_hetero")]
    pub heteroscedasticity: f64,
    /// Drive the stress series from efficacy instead of `stress_level`.
    #[serde(default)]
    pub stress_tracks_efficacy: bool,
}

impl RegimeScript {
    pub fn n_dates(&self) -> usize {
        self.segments.last().map(|s| s.end + 1).unwrap_or(0)
    }

    /// Single-regime script over `n_dates`.
    pub fn constant(n_dates: usize, universe_size: usize, target_ic: f64, seed: u64) -> Self {
        RegimeScript {
            segments: vec![RegimeSegment {
                start: 0,
                end: n_dates - 1,
                target_ic,
                noise_scale: 1.0,
                stress_level: 0.5,
            }],
            universe_size,
            seed,
            start_date: default_start_date(),
            heteroscedasticity: default_hetero(),
            stress_tracks_efficacy: false,
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::InvalidScript(m));
        if self.universe_size < 20 {
            return bad(format!("universe_size {} < 20", self.universe_size));
        }
        if self.segments.is_empty() {
            return bad("no segments".into());
        }
        let mut next = 0;
        for (k, s) in self.segments.iter().enumerate() {
            if s.start != next || s.end < s.start {
                return bad(format!("segment {k} is not contiguous with the previous one"));
            }
            if !(-1.0..=1.0).contains(&s.target_ic) {
                return bad(format!("segment {k}: target_ic outside [-1, 1]"));
            }
            if !(s.noise_scale > 0.0) {
                return bad(format!("segment {k}: noise_scale must be positive"));
            }
            if !(0.0..=1.0).contains(&s.stress_level) {
                return bad(format!("segment {k}: stress_level outside [0, 1]"));
            }
            next = s.end + 1;
        }
        if self.heteroscedasticity < 0.0 {
            return bad("heteroscedasticity must be non-negative".into());
        }
        Ok(())
    }
}

/// Business days starting at `start` (weekends skipped).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

const FWD_SCALE: f64 = 0.05;
const CALIB_SECTIONS: usize = 300;
const N_SECTORS: usize = 8;

fn noise_multiplier(u: f64, hetero: f64) -> f64 {
    1.0 + hetero * 2.0 * (u - 0.5).abs()
}

/// Common-random-number sample used to map a return loading to mean RankIC.
struct IcCalibrator {
    draws: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl IcCalibrator {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(99);
        let gen = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
        let draws = (0..CALIB_SECTIONS)
            .map(|_| (gen(&mut rng), gen(&mut rng), gen(&mut rng)))
            .collect();
        IcCalibrator { draws }
    }

    fn mean_ic(&self, loading: f64, noise_scale: f64, hetero: f64) -> f64 {
        let mut acc = 0.0;
        for (q, eps, eta) in &self.draws {
            let s: Vec<f64> = q.iter().zip(eps).map(|(q, e)| q + noise_scale * e).collect();
            let u = stats::percentile_rank(&s).unwrap();
            let r: Vec<f64> = (0..q.len())
                .map(|i| loading * q[i] + noise_multiplier(u[i], hetero) * eta[i])
                .collect();
            acc += stats::spearman(&s, &r).unwrap_or(0.0);
        }
        acc / self.draws.len() as f64
    }

    /// Loading on latent quality that gives the requested mean RankIC.
    fn solve(&self, target: f64, noise_scale: f64, hetero: f64) -> Result<f64, f64> {
        if target == 0.0 {
            return Ok(0.0);
        }
        let bound = 200.0;
        let max_ic = self.mean_ic(bound, noise_scale, hetero);
        if target.abs() >= max_ic {
            return Err(max_ic);
        }
        let (mut lo, mut hi) = (0.0, bound);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.mean_ic(mid, noise_scale, hetero) < target.abs() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi) * target.signum())
    }
}

fn rolling_std(xs: &[f64]) -> f64 {
    stats::std_dev(xs).unwrap_or(0.0)
}

/// Generates a panel with forward returns at each horizon. Labels are absent
/// for the final `h` dates of horizon `h`.
pub fn generate(script: &RegimeScript, horizons: &[usize]) -> Result<Panel, GenerationError> {
    script.validate()?;
    let n = script.universe_size;
    let n_dates = script.n_dates();
    let hetero = script.heteroscedasticity;

    let calibrator = IcCalibrator::new(n, script.seed);
    let mut loadings = Vec::with_capacity(script.segments.len());
    for (k, seg) in script.segments.iter().enumerate() {
        let b = calibrator
            .solve(seg.target_ic, seg.noise_scale, hetero)
            .map_err(|max_ic| GenerationError::Infeasible {
                segment: k,
                target_ic: seg.target_ic,
                noise_scale: seg.noise_scale,
                max_ic,
            })?;
        loadings.push(b);
    }
    let segment_of: Vec<usize> = script
        .segments
        .iter()
        .enumerate()
        .flat_map(|(k, s)| std::iter::repeat_n(k, s.end - s.start + 1))
        .collect();

    // Independent substreams so changing one component leaves the others intact.
    let stream = |id: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(script.seed);
        r.set_stream(id);
        r
    };
    let mut rng_static = stream(1);
    let mut rng_market = stream(2);
    let mut rng_daily = stream(3);
    let mut rng_score = stream(4);
    let mut rng_ret = stream(5);

    let base_vol: Vec<f64> = (0..n)
        .map(|_| 0.3 * (0.3 * rng_static.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let log_size: Vec<f64> = (0..n)
        .map(|_| 16.0 + rng_static.sample::<f64, _>(StandardNormal))
        .collect();
    let assets: Vec<String> = (0..n).map(|i| format!("A{i:03}")).collect();

    let dates = business_days(script.start_date, n_dates);
    let mut stress_raw = Vec::with_capacity(n_dates);
    let mut market = Vec::with_capacity(n_dates);
    let mut daily: Vec<Vec<f64>> = vec![Vec::with_capacity(n_dates); n];
    let mut size_state = vec![0.0; n];
    let mut stress_state = None;
    let mut sections = Vec::with_capacity(n_dates);
    let mut fwd: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_dates);

    for t in 0..n_dates {
        let seg = &script.segments[segment_of[t]];
        let level = if script.stress_tracks_efficacy {
            (0.5 - seg.target_ic).clamp(0.0, 1.0)
        } else {
            seg.stress_level
        };
        let shock: f64 = rng_market.sample(StandardNormal);
        let prev = stress_state.unwrap_or(level);
        let s_t: f64 = 0.8 * prev + 0.2 * level + 0.08 * shock;
        stress_state = Some(s_t);
        stress_raw.push(s_t);
        let stress_eff = s_t.clamp(0.0, 1.0);

        let zm: f64 = rng_market.sample(StandardNormal);
        let m_t = 0.0003 + 0.15 / 252f64.sqrt() * (1.0 + stress_eff) * zm;
        market.push(m_t);
        let rho = 0.1 + 0.5 * stress_eff;
        for i in 0..n {
            let e: f64 = rng_daily.sample(StandardNormal);
            let sigma = base_vol[i] * (1.0 + 0.5 * stress_eff) / 252f64.sqrt();
            daily[i].push(sigma * (rho.sqrt() * zm + (1.0 - rho).sqrt() * e));
            size_state[i] = 0.95 * size_state[i] + 0.1 * rng_daily.sample::<f64, _>(StandardNormal);
        }

        let q: Vec<f64> = (0..n).map(|_| rng_score.sample(StandardNormal)).collect();
        let score: Vec<f64> = q
            .iter()
            .map(|q| q + seg.noise_scale * rng_score.sample::<f64, _>(StandardNormal))
            .collect();
        let disagreement_sd = 0.2 + 3.0 * (0.35 - seg.target_ic).max(0.0);
        let secondary: Vec<f64> = score
            .iter()
            .map(|s| s + disagreement_sd * rng_score.sample::<f64, _>(StandardNormal))
            .collect();
        let u = stats::percentile_rank(&score).expect("universe >= 20");

        let b = loadings[segment_of[t]];
        let per_h: Vec<Vec<f64>> = horizons
            .iter()
            .map(|&h| {
                let scale = FWD_SCALE * (h.max(1) as f64 / 20.0).sqrt();
                (0..n)
                    .map(|i| {
                        let eta: f64 = rng_ret.sample(StandardNormal);
                        scale * (b * q[i] + noise_multiplier(u[i], hetero) * eta)
                    })
                    .collect()
            })
            .collect();
        fwd.push(per_h);

        let window = |len: usize| t + 1 >= len;
        let lo = |len: usize| t + 1 - len;
        let mkt_vol = window(21).then(|| rolling_std(&market[lo(21)..=t]) * 252f64.sqrt());
        let mkt_ret = window(21).then(|| market[lo(21)..=t].iter().sum::<f64>());
        let regime = mkt_ret.map(|r| {
            if r > 0.02 {
                1.0
            } else if r < -0.02 {
                -1.0
            } else {
                0.0
            }
        });
        let stress_start = t.saturating_sub(251);
        let vix_pct = {
            let w = &stress_raw[stress_start..=t];
            if w.len() < 2 {
                0.5
            } else {
                *stats::percentile_rank(w).unwrap().last().unwrap()
            }
        };

        let members = (0..n)
            .map(|i| {
                let d = &daily[i];
                let mut f = Features::default();
                let sum = |len: usize| window(len).then(|| d[lo(len)..=t].iter().sum::<f64>());
                let vol = |len: usize| window(len).then(|| rolling_std(&d[lo(len)..=t]) * 252f64.sqrt());
                f.set(Feature::Mom1m, sum(21));
                f.set(Feature::Mom3m, sum(63));
                f.set(Feature::Mom12m, sum(252));
                f.set(Feature::Vol20d, vol(20));
                f.set(Feature::Vol60d, vol(60));
                f.set(Feature::Adv20d, Some((log_size[i] + size_state[i]).exp()));
                f.set(Feature::CrossSectionalRank, Some(u[i]));
                f.set(Feature::VixPercentile252d, Some(vix_pct));
                f.set(Feature::MarketRegimeEnc, regime);
                f.set(Feature::MarketVol21d, mkt_vol);
                f.set(Feature::MarketReturn21d, mkt_ret);
                f.set(Feature::SectorEnc, Some((i % N_SECTORS) as f64));
                AssetDay {
                    asset: assets[i].clone(),
                    features: f,
                    score_primary: score[i],
                    score_secondary: Some(secondary[i]),
                    daily_return: Some(d[t]),
                    fwd_returns: Vec::new(),
                }
            })
            .collect();
        sections.push(CrossSection {
            date: dates[t],
            members,
        });
    }

    for (t, section) in sections.iter_mut().enumerate() {
        for (i, m) in section.members.iter_mut().enumerate() {
            m.fwd_returns = horizons
                .iter()
                .enumerate()
                .map(|(k, &h)| (t + h < n_dates).then(|| fwd[t][k][i]))
                .collect();
        }
    }

    Ok(Panel {
        horizons: horizons.to_vec(),
        sections,
    })
}

/// Per-date RankIC of the primary score; degenerate dates are `None`.
pub fn realized_ic_profile(panel: &Panel, horizon: usize) -> Result<Vec<Option<f64>>, PanelError> {
    panel.rank_ic(horizon)
}

/// Mean realized RankIC over each segment's labeled dates.
pub fn segment_mean_ic(
    panel: &Panel,
    script: &RegimeScript,
    horizon: usize,
) -> Result<Vec<Option<f64>>, PanelError> {
    let ic = realized_ic_profile(panel, horizon)?;
    Ok(script
        .segments
        .iter()
        .map(|s| {
            let vals: Vec<f64> = ic[s.start..=s.end.min(ic.len() - 1)]
                .iter()
                .flatten()
                .copied()
                .collect();
            stats::mean(&vals)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_segment(ic_a: f64, ic_b: f64, seed: u64) -> RegimeScript {
        let mut s = RegimeScript::constant(600, 40, ic_a, seed);
        s.segments[0].end = 299;
        s.segments.push(RegimeSegment {
            start: 300,
            end: 599,
            target_ic: ic_b,
            noise_scale: 1.0,
            stress_level: 0.5,
        });
        s
    }

    #[test]
    fn zero_ic_segment_is_uncorrelated() {
        let script = RegimeScript::constant(300, 40, 0.0, 7);
        let panel = generate(&script, &[20]).unwrap();
        let m = segment_mean_ic(&panel, &script, 20).unwrap()[0].unwrap();
        assert!(m.abs() < 0.03, "mean ic {m}");
    }

    #[test]
    fn high_ic_with_tiny_noise() {
        let mut script = RegimeScript::constant(260, 40, 0.9, 3);
        script.segments[0].noise_scale = 0.05;
        let panel = generate(&script, &[20]).unwrap();
        let m = segment_mean_ic(&panel, &script, 20).unwrap()[0].unwrap();
        assert!(m > 0.8, "mean ic {m}");
    }

    #[test]
    fn infeasible_target_rejected() {
        let mut script = RegimeScript::constant(200, 40, 0.95, 3);
        script.segments[0].noise_scale = 2.0;
        assert!(matches!(
            generate(&script, &[20]),
            Err(GenerationError::Infeasible { segment: 0, .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let script = two_segment(0.3, -0.1, 11);
        let a = generate(&script, &[20, 60]).unwrap();
        let b = generate(&script, &[20, 60]).unwrap();
        assert_eq!(a, b);
        let c = generate(&two_segment(0.3, -0.1, 12), &[20, 60]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn segment_means_follow_script_order() {
        let script = two_segment(0.3, -0.1, 5);
        let panel = generate(&script, &[20]).unwrap();
        let m = segment_mean_ic(&panel, &script, 20).unwrap();
        let (a, b) = (m[0].unwrap(), m[1].unwrap());
        assert!((a - 0.3).abs() < 0.04, "{a}");
        assert!((b + 0.1).abs() < 0.04, "{b}");
    }

    #[test]
    fn labels_absent_at_tail_and_features_in_range() {
        let script = RegimeScript::constant(300, 25, 0.2, 1);
        let panel = generate(&script, &[20, 60]).unwrap();
        assert_eq!(panel.n_dates(), 300);
        for (t, s) in panel.sections.iter().enumerate() {
            assert_eq!(s.members.len(), 25);
            for m in &s.members {
                assert_eq!(m.fwd_returns[0].is_some(), t + 20 < 300);
                assert_eq!(m.fwd_returns[1].is_some(), t + 60 < 300);
                let vix = m.features.get(Feature::VixPercentile252d).unwrap();
                assert!((0.0..=1.0).contains(&vix));
                let csr = m.features.get(Feature::CrossSectionalRank).unwrap();
                assert!((0.0..=1.0).contains(&csr));
                if let Some(v) = m.features.get(Feature::Vol20d) {
                    assert!(v >= 0.0);
                }
                assert!(m.features.get(Feature::Adv20d).unwrap() >= 0.0);
            }
        }
        assert!(panel.sections[10].members[0].features.get(Feature::Vol60d).is_none());
    }

    #[test]
    fn invalid_scripts() {
        let mut s = RegimeScript::constant(100, 10, 0.1, 1);
        assert!(generate(&s, &[20]).is_err());
        s.universe_size = 30;
        s.segments.push(RegimeSegment {
            start: 150,
            end: 200,
            target_ic: 0.1,
            noise_scale: 1.0,
            stress_level: 0.2,
        });
        assert!(matches!(s.validate(), Err(GenerationError::InvalidScript(_))));
    }

    #[test]
    fn aligned_and_reversed_profiles() {
        let mut panel = generate(&RegimeScript::constant(40, 20, 0.1, 2), &[5]).unwrap();
        for s in panel.sections.iter_mut() {
            for m in s.members.iter_mut() {
                if m.fwd_returns[0].is_some() {
                    m.fwd_returns[0] = Some(m.score_primary * 3.0);
                }
            }
        }
        let ic = realized_ic_profile(&panel, 5).unwrap();
        assert!(ic[..35].iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
        assert!(ic[35..].iter().all(|v| v.is_none()));
        for s in panel.sections.iter_mut() {
            for m in s.members.iter_mut() {
                m.fwd_returns[0] = m.fwd_returns[0].map(|r| -r);
            }
        }
        let ic = realized_ic_profile(&panel, 5).unwrap();
        assert!(ic[..35].iter().all(|v| (v.unwrap() + 1.0).abs() < 1e-12));
    }
}
