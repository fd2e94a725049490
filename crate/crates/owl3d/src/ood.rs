//! Scalar OOD score functions and the ranking metrics AUROC / AUPR / FPR95.
//!
//! Every score function returns an "ID-ness" value: higher means more
//! in-distribution. The ranking metrics treat OOD as the positive class
//! and rank by OOD-ness, which is uniformly the negated ID score.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::sceneio::{Detection, GtObject, ScoreSpace};

/// Which scalar reduction of the class-score vector to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Msp,
    MaxLogit,
    SumLogit,
    MaxProb,
    SumProb,
    MaxEnergy,
    JointEnergy,
    Energy,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 8] = [
        ScoreKind::Msp,
        ScoreKind::MaxLogit,
        ScoreKind::SumLogit,
        ScoreKind::MaxProb,
        ScoreKind::SumProb,
        ScoreKind::MaxEnergy,
        ScoreKind::JointEnergy,
        ScoreKind::Energy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::MaxLogit => "max_logit",
            ScoreKind::SumLogit => "sum_logit",
            ScoreKind::MaxProb => "max_prob",
            ScoreKind::SumProb => "sum_prob",
            ScoreKind::MaxEnergy => "max_energy",
            ScoreKind::JointEnergy => "joint_energy",
            ScoreKind::Energy => "energy",
        }
    }

    pub fn parse(s: &str) -> Result<ScoreKind> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown score metric '{s}'")))
    }
}

/// A score function: the reduction kind plus the softmax temperature used
/// by the energy score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetric {
    pub kind: ScoreKind,
    pub temperature: f64,
}

impl ScoreMetric {
    pub fn new(kind: ScoreKind) -> Self {
        ScoreMetric {
            kind,
            temperature: 1.0,
        }
    }

    pub fn with_temperature(kind: ScoreKind, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        Ok(ScoreMetric { kind, temperature })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ID-ness score of a logit vector (higher = more in-distribution).
pub fn id_score(logits: &[f64], metric: ScoreMetric) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("id_score requires at least one logit"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("id_score requires finite logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let t = metric.temperature;
    Ok(match metric.kind {
        ScoreKind::Msp => {
            // max softmax = 1 / sum_j e^{f_j - f_max}
            let denom: f64 = logits.iter().map(|&f| (f - max).exp()).sum();
            1.0 / denom
        }
        ScoreKind::MaxLogit => max,
        ScoreKind::SumLogit => logits.iter().sum(),
        ScoreKind::MaxProb => sigmoid(max),
        ScoreKind::SumProb => logits.iter().map(|&f| sigmoid(f)).sum(),
        ScoreKind::MaxEnergy => softplus(max),
        ScoreKind::JointEnergy => logits.iter().map(|&f| softplus(f)).sum(),
        ScoreKind::Energy => {
            // Negated free energy: T log sum_j e^{f_j / T}, max-shifted.
            let sum: f64 = logits.iter().map(|&f| ((f - max) / t).exp()).sum();
            t * sum.ln() + max
        }
    })
}

fn check_pools(id_scores: &[f64], ood_scores: &[f64]) -> Result<()> {
    if id_scores.is_empty() {
        return Err(Error::invalid("ID score pool is empty"));
    }
    if ood_scores.is_empty() {
        return Err(Error::invalid("OOD score pool is empty"));
    }
    if id_scores
        .iter()
        .chain(ood_scores)
        .any(|s| !s.is_finite())
    {
        return Err(Error::invalid("score pools must be finite"));
    }
    Ok(())
}

/// Sorted (oodness, is_ood) view of both pools, ascending by oodness.
fn combined_oodness(id_scores: &[f64], ood_scores: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(id_scores.len() + ood_scores.len());
    all.extend(id_scores.iter().map(|&s| (-s, false)));
    all.extend(ood_scores.iter().map(|&s| (-s, true)));
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    all
}

/// AUROC with OOD as the positive class: P(oodness_ood > oodness_id) plus
/// half the tie probability, computed by tie-averaged rank sums.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_pools(id_scores, ood_scores)?;
    let all = combined_oodness(id_scores, ood_scores);
    let n_pos = ood_scores.len() as f64;
    let n_neg = id_scores.len() as f64;

    // Sum of average ranks (1-based) over the positive class.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Average precision with OOD as the positive class: step-wise sum of
/// precision times recall increment over descending OOD-ness thresholds.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_pools(id_scores, ood_scores)?;
    let mut all = combined_oodness(id_scores, ood_scores);
    all.reverse(); // descending oodness
    let n_pos = ood_scores.len() as f64;

    let mut ap = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut group_tp = 0.0;
        let mut group_fp = 0.0;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                group_tp += 1.0;
            } else {
                group_fp += 1.0;
            }
            j += 1;
        }
        tp += group_tp;
        fp += group_fp;
        if group_tp > 0.0 {
            ap += (group_tp / n_pos) * (tp / (tp + fp));
        }
        i = j;
    }
    Ok(ap)
}

/// FPR at the largest OOD-ness threshold whose OOD true-positive rate
/// reaches `tpr_target` (0.95 for the usual FPR95).
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_pools(id_scores, ood_scores)?;
    if !(0.0 < tpr_target && tpr_target <= 1.0) {
        return Err(Error::invalid("tpr_target must be in (0, 1]"));
    }
    let mut all = combined_oodness(id_scores, ood_scores);
    all.reverse(); // descending oodness
    let n_pos = ood_scores.len() as f64;
    let n_neg = id_scores.len() as f64;

    // Walk thresholds from the largest down; the first (largest) one whose
    // TPR reaches the target wins.
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        if tp / n_pos >= tpr_target {
            return Ok(fp / n_neg);
        }
        i = j;
    }
    // tpr_target <= 1 guarantees the loop returns at the last threshold.
    Ok(1.0)
}

/// Per-metric ranking results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodMetricValues {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

/// OOD classification report over one or more score metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, OodMetricValues>,
    pub n_id: usize,
    pub n_ood: usize,
    pub n_unmatched_ood: usize,
}

/// Matched scene inputs for OOD evaluation.
pub struct SceneMatches<'a> {
    pub matches: &'a MatchResult,
    pub gts: &'a [GtObject],
    pub dets: &'a [Detection],
    pub score_space: ScoreSpace,
}

/// ID/OOD id-score pools collected from matched pairs, plus the count of
/// OOD ground truths left unmatched (excluded from scoring).
pub struct ScorePools {
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
    pub n_unmatched_ood: usize,
}

/// Score every matched (gt, det) pair and pool by ground-truth label.
/// Distance-stage matches participate identically to IoU-stage matches.
pub fn collect_score_pools(
    scenes: &[SceneMatches<'_>],
    unseen_class: &str,
    metric: ScoreMetric,
) -> Result<ScorePools> {
    let mut pools = ScorePools {
        id: Vec::new(),
        ood: Vec::new(),
        n_unmatched_ood: 0,
    };
    for scene in scenes {
        if scene.score_space == ScoreSpace::Prob && metric.kind != ScoreKind::Msp {
            return Err(Error::invalid(format!(
                "metric '{}' needs logits but detections declare probability scores",
                metric.kind.name()
            )));
        }
        for pair in &scene.matches.pairs {
            let det = &scene.dets[pair.det];
            let score = match scene.score_space {
                ScoreSpace::Logit => id_score(&det.scores, metric)?,
                // Probability inputs: MSP is just the max probability.
                ScoreSpace::Prob => det
                    .scores
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max),
            };
            if scene.gts[pair.gt].class_label == unseen_class {
                pools.ood.push(score);
            } else {
                pools.id.push(score);
            }
        }
        pools.n_unmatched_ood += scene
            .matches
            .unmatched_gt
            .iter()
            .filter(|&&g| scene.gts[g].class_label == unseen_class)
            .count();
    }
    Ok(pools)
}

/// Evaluate a single metric over matched scenes.
pub fn evaluate_ood(
    scenes: &[SceneMatches<'_>],
    unseen_class: &str,
    metric: ScoreMetric,
) -> Result<(OodMetricValues, ScorePools)> {
    let pools = collect_score_pools(scenes, unseen_class, metric)?;
    let values = OodMetricValues {
        auroc: auroc(&pools.id, &pools.ood)?,
        aupr: aupr(&pools.id, &pools.ood)?,
        fpr95: fpr_at_tpr(&pools.id, &pools.ood, 0.95)?,
    };
    Ok((values, pools))
}

/// Evaluate several metrics and assemble the report.
pub fn ood_report(
    scenes: &[SceneMatches<'_>],
    unseen_class: &str,
    metrics: &[ScoreMetric],
) -> Result<OodReport> {
    let mut report = OodReport {
        metrics: BTreeMap::new(),
        n_id: 0,
        n_ood: 0,
        n_unmatched_ood: 0,
    };
    for &metric in metrics {
        let (values, pools) = evaluate_ood(scenes, unseen_class, metric)?;
        report.n_id = pools.id.len();
        report.n_ood = pools.ood.len();
        report.n_unmatched_ood = pools.n_unmatched_ood;
        report.metrics.insert(metric.kind.name().to_string(), values);
    }
    Ok(report)
}
