//! Detection metrics: equal error rate and normalized minimum detection cost.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// The two operating points averaged by [`c_primary`].
pub const PRIMARY_P_TARGETS: [f64; 2] = [0.01, 0.005];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    scores: Vec<f64>,
    is_target: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        if scores.len() != is_target.len() {
            return Err(Error::shape(format!(
                "{} scores but {} labels",
                scores.len(),
                is_target.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Metric("no trials".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        Ok(Self { scores, is_target })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_target(&self) -> &[bool] {
        &self.is_target
    }

    pub fn n_targets(&self) -> usize {
        self.is_target.iter().filter(|&&t| t).count()
    }

    /// `(P_miss, P_fa)` at every threshold between distinct scores, starting
    /// with everything accepted and ending with everything rejected.
    pub fn roc(&self) -> Result<Vec<(f64, f64)>> {
        let nt = self.n_targets();
        let nn = self.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::Metric(format!(
                "need both classes, got {nt} targets and {nn} non-targets"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut points = Vec::with_capacity(self.len() + 1);
        let (mut misses, mut rejected_non) = (0usize, 0usize);
        points.push((0.0, 1.0));
        let mut i = 0;
        while i < order.len() {
            let s = self.scores[order[i]];
            while i < order.len() && self.scores[order[i]] == s {
                if self.is_target[order[i]] {
                    misses += 1;
                } else {
                    rejected_non += 1;
                }
                i += 1;
            }
            points.push((
                misses as f64 / nt as f64,
                (nn - rejected_non) as f64 / nn as f64,
            ));
        }
        Ok(points)
    }
}

/// Linearly interpolated crossing of `P_miss` and `P_fa` on the ROC.
pub fn eer(t: &ScoredTrials) -> Result<f64> {
    let roc = t.roc()?;
    for w in roc.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        if m1 >= f1 {
            let d0 = f0 - m0;
            let d1 = f1 - m1;
            let a = if d0 - d1 > 0.0 { d0 / (d0 - d1) } else { 0.0 };
            return Ok(m0 + a * (m1 - m0));
        }
    }
    unreachable!("the last ROC point has P_miss = 1 and P_fa = 0")
}

/// Normalized minimum cost with arbitrary miss and false-alarm costs.
pub fn min_dcf_with_costs(t: &ScoredTrials, p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Metric(format!("p_target {p_target} outside (0, 1)")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::Metric("costs must be positive".into()));
    }
    let wm = c_miss * p_target;
    let wf = c_fa * (1.0 - p_target);
    let best = t
        .roc()?
        .into_iter()
        .map(|(m, f)| wm * m + wf * f)
        .fold(f64::INFINITY, f64::min);
    Ok(best / wm.min(wf))
}

pub fn min_dcf(t: &ScoredTrials, p_target: f64) -> Result<f64> {
    min_dcf_with_costs(t, p_target, 1.0, 1.0)
}

/// Mean of the minimum costs at the two primary operating points.
pub fn c_primary(t: &ScoredTrials) -> Result<f64> {
    let a = min_dcf(t, PRIMARY_P_TARGETS[0])?;
    let b = min_dcf(t, PRIMARY_P_TARGETS[1])?;
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub n_trials: usize,
    pub n_targets: usize,
    pub eer: f64,
    pub min_dcf_01: f64,
    pub min_dcf_005: f64,
    pub c_primary: f64,
}

impl MetricsReport {
    pub fn compute(t: &ScoredTrials) -> Result<Self> {
        let min_dcf_01 = min_dcf(t, PRIMARY_P_TARGETS[0])?;
        let min_dcf_005 = min_dcf(t, PRIMARY_P_TARGETS[1])?;
        Ok(Self {
            n_trials: t.len(),
            n_targets: t.n_targets(),
            eer: eer(t)?,
            min_dcf_01,
            min_dcf_005,
            c_primary: 0.5 * (min_dcf_01 + min_dcf_005),
        })
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trials        {}", self.n_trials);
        let _ = writeln!(s, "targets       {}", self.n_targets);
        let _ = writeln!(s, "EER           {:.2}%", 100.0 * self.eer);
        let _ = writeln!(s, "minDCF(0.01)  {:.4}", self.min_dcf_01);
        let _ = writeln!(s, "minDCF(0.005) {:.4}", self.min_dcf_005);
        let _ = writeln!(s, "C_primary     {:.4}", self.c_primary);
        s
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "n_trials={}\nn_targets={}\neer={}\nmin_dcf_0.01={}\nmin_dcf_0.005={}\nc_primary={}\n",
            self.n_trials,
            self.n_targets,
            self.eer,
            self.min_dcf_01,
            self.min_dcf_005,
            self.c_primary
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trials(tar: &[f64], non: &[f64]) -> ScoredTrials {
        let mut s = tar.to_vec();
        s.extend_from_slice(non);
        let mut l = vec![true; tar.len()];
        l.extend(vec![false; non.len()]);
        ScoredTrials::new(s, l).unwrap()
    }

    #[test]
    fn separated_scores() {
        let t = trials(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(eer(&t).unwrap(), 0.0);
        assert_eq!(min_dcf(&t, 0.01).unwrap(), 0.0);
        assert_eq!(c_primary(&t).unwrap(), 0.0);
    }

    #[test]
    fn interleaved_example() {
        let t = trials(&[0.9, 0.4], &[0.6, 0.1]);
        assert!((eer(&t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inverted_labels() {
        let t = trials(&[0.0, 1.0], &[2.0, 3.0]);
        assert_eq!(eer(&t).unwrap(), 1.0);
        assert!((min_dcf(&t, 0.01).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_a_metric_error() {
        let t = ScoredTrials::new(vec![1.0, 2.0], vec![true, true]).unwrap();
        assert!(matches!(eer(&t), Err(Error::Metric(_))));
        assert!(matches!(c_primary(&t), Err(Error::Metric(_))));
    }

    /// Every candidate threshold, tested trial by trial.
    fn brute_force_min_dcf(scores: &[f64], labels: &[bool], p: f64) -> f64 {
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.push(f64::INFINITY);
        let mut best = f64::INFINITY;
        for &th in &thresholds {
            let miss = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **l && **s < th)
                .count() as f64;
            let fa = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| !**l && **s >= th)
                .count() as f64;
            best = best.min(p * miss / nt + (1.0 - p) * fa / nn);
        }
        best / p.min(1.0 - p)
    }

    #[test]
    fn min_dcf_matches_brute_force() {
        let mut g = ChaCha8Rng::seed_from_u64(21);
        let labels: Vec<bool> = (0..1000).map(|i| i % 7 == 0).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| g.random_range(-1.0..1.0) + if l { 0.8 } else { 0.0 })
            .collect();
        let t = ScoredTrials::new(scores.clone(), labels.clone()).unwrap();
        for p in [0.01, 0.005, 0.3] {
            let a = min_dcf(&t, p).unwrap();
            assert!((a - brute_force_min_dcf(&scores, &labels, p)).abs() < 1e-12);
            assert!(a <= 1.0);
        }
        let cp = c_primary(&t).unwrap();
        assert_eq!(
            cp,
            0.5 * (min_dcf(&t, 0.01).unwrap() + min_dcf(&t, 0.005).unwrap())
        );
    }

    #[test]
    fn report_formats() {
        let t = trials(&[0.9, 0.4], &[0.6, 0.1]);
        let r = MetricsReport::compute(&t).unwrap();
        assert!(r.to_kv().contains("eer=0.5\n"));
        assert!(r.to_text().contains("EER           50.00%"));
    }
}
