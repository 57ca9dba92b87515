//! Trial scoring and detection metrics.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::{ScoredTrial, Trial};
use crate::error::{Error, Result};

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine_score", "zero-norm embedding"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    /// Threshold of the operating point at or just past the crossing.
    pub eer_threshold: f64,
    pub min_dcf_p01: f64,
    pub min_dcf_p001: f64,
}

/// Miss and false-alarm rates when accepting scores `>= threshold`, for
/// every distinct score as threshold plus one above the maximum.
#[derive(Clone, Debug)]
pub struct OperatingPoints {
    pub thresholds: Vec<f64>,
    pub p_miss: Vec<f64>,
    pub p_fa: Vec<f64>,
}

fn check(scores: &[f64], labels: &[bool], op: &'static str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(op, &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid(op, "non-finite score"));
    }
    let tar = labels.iter().filter(|&&l| l).count();
    let non = labels.len() - tar;
    if tar == 0 || non == 0 {
        return Err(Error::invalid(op, "need at least one target and one nontarget trial"));
    }
    Ok((tar, non))
}

/// Sweeps thresholds in increasing order. The first point accepts every
/// trial; the last rejects every trial.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<OperatingPoints> {
    let (tar, non) = check(scores, labels, "operating_points")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pts = OperatingPoints {
        thresholds: Vec::new(),
        p_miss: Vec::new(),
        p_fa: Vec::new(),
    };
    // rejected so far: scores strictly below the current threshold
    let (mut miss, mut fa_rejected) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        pts.thresholds.push(s);
        pts.p_miss.push(miss as f64 / tar as f64);
        pts.p_fa.push((non - fa_rejected) as f64 / non as f64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                miss += 1;
            } else {
                fa_rejected += 1;
            }
            i += 1;
        }
    }
    pts.thresholds.push(f64::INFINITY);
    pts.p_miss.push(1.0);
    pts.p_fa.push(0.0);
    Ok(pts)
}

/// Equal error rate and the threshold where it occurs.
///
/// Finds the first operating point (lowest threshold) where the miss rate
/// reaches the false-alarm rate and interpolates linearly from the point
/// before it.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let p = operating_points(scores, labels)?;
    Ok(eer_from_points(&p.thresholds, &p.p_miss, &p.p_fa))
}

/// Shared crossing rule, also used by test oracles that build their own
/// operating points.
pub fn eer_from_points(thresholds: &[f64], p_miss: &[f64], p_fa: &[f64]) -> (f64, f64) {
    let i = (0..p_miss.len())
        .find(|&i| p_miss[i] >= p_fa[i])
        .expect("the reject-all point has p_miss = 1 >= p_fa = 0");
    if p_miss[i] == p_fa[i] || i == 0 {
        return (p_miss[i], thresholds[i]);
    }
    let (m0, f0) = (p_miss[i - 1], p_fa[i - 1]);
    let (m1, f1) = (p_miss[i], p_fa[i]);
    let s = (f0 - m0) / ((m1 - m0) - (f1 - f0));
    (m0 + s * (m1 - m0), thresholds[i])
}

/// Minimum normalized detection cost:
/// `min_θ (c_miss·P_miss·p + c_fa·P_fa·(1 − p)) / min(c_miss·p, c_fa·(1 − p))`.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    let raw = compute_min_dcf_unnormalized(scores, labels, p_target, c_miss, c_fa)?;
    Ok(raw / (c_miss * p_target).min(c_fa * (1.0 - p_target)))
}

/// Minimum of the raw cost `c_miss·P_miss·p + c_fa·P_fa·(1 − p)`.
pub fn compute_min_dcf_unnormalized(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::invalid(
            "compute_min_dcf",
            "need 0 < p_target < 1 and positive costs",
        ));
    }
    let p = operating_points(scores, labels)?;
    Ok(p.p_miss
        .iter()
        .zip(&p.p_fa)
        .map(|(m, f)| c_miss * m * p_target + c_fa * f * (1.0 - p_target))
        .fold(f64::INFINITY, f64::min))
}

/// EER and minDCF at target priors 0.01 and 0.001 with unit costs.
pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<EvalMetrics> {
    evaluate_with(scores, labels, true)
}

/// As [`evaluate`], with the DCF optionally left unnormalized.
pub fn evaluate_with(scores: &[f64], labels: &[bool], normalized_dcf: bool) -> Result<EvalMetrics> {
    let (eer, eer_threshold) = compute_eer(scores, labels)?;
    let dcf = |p| {
        if normalized_dcf {
            compute_min_dcf(scores, labels, p, 1.0, 1.0)
        } else {
            compute_min_dcf_unnormalized(scores, labels, p, 1.0, 1.0)
        }
    };
    Ok(EvalMetrics {
        eer,
        eer_threshold,
        min_dcf_p01: dcf(0.01)?,
        min_dcf_p001: dcf(0.001)?,
    })
}

impl EvalMetrics {
    /// `EER <pct> DCF0.01 <val> DCF0.001 <val>`.
    pub fn summary_line(&self) -> String {
        format!(
            "EER {:.4} DCF0.01 {:.4} DCF0.001 {:.4}",
            100.0 * self.eer,
            self.min_dcf_p01,
            self.min_dcf_p001
        )
    }
}

/// Cosine scores for every trial, computed in parallel.
pub fn score_trials(embeddings: &HashMap<String, Vec<f64>>, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::invalid("score_trials", format!("no embedding for '{id}'")))
    };
    trials
        .par_iter()
        .map(|t| {
            Ok(ScoredTrial {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: cosine_score(get(&t.enroll)?, get(&t.test)?)?,
            })
        })
        .collect()
}

/// Pairs each trial's label with its score. Every trial must be scored.
pub fn join_scores(scores: &[ScoredTrial], trials: &[Trial]) -> Result<(Vec<f64>, Vec<bool>)> {
    let by_pair: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score))
        .collect();
    trials
        .iter()
        .map(|t| {
            by_pair
                .get(&(t.enroll.as_str(), t.test.as_str()))
                .map(|&s| (s, t.target))
                .ok_or_else(|| Error::invalid("join_scores", format!("no score for {} {}", t.enroll, t.test)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}
