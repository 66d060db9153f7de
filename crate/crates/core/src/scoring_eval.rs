//! OoD scores and detection metrics.
//!
//! Higher scores mean "more in-distribution". A sample is accepted as ID
//! when its score is at least the threshold γ, and γ is always an attained
//! ID score so FPR95 needs no interpolation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;
use crate::par;
use crate::trainer::{accuracy, LinearHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Energy,
    Msp,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Msp => "msp",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(ScoreKind::Energy),
            "msp" => Ok(ScoreKind::Msp),
            _ => Err(Error::Param(format!("unknown score kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub origin: Origin,
    pub kind: ScoreKind,
}

impl ScoreSeries {
    pub fn new(scores: Vec<f64>, origin: Origin, kind: ScoreKind) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Param(format!("score {i} is not finite")));
        }
        Ok(ScoreSeries { scores, origin, kind })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Negative free energy: `T · logsumexp(z / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return log_sum_exp(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    temperature * log_sum_exp(&scaled)
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // softmax at the argmax is exp(m - lse) = 1 / Σ exp(z - m)
    1.0 / logits.iter().map(|&z| (z - m).exp()).sum::<f64>()
}

pub fn score_logits(logits: &[f64], kind: ScoreKind, temperature: f64) -> f64 {
    match kind {
        ScoreKind::Energy => energy_score(logits, temperature),
        ScoreKind::Msp => msp_score(logits),
    }
}

/// Scores every row of `set` under `head`, in row order.
pub fn score_set(head: &LinearHead, set: &EmbeddingSet, kind: ScoreKind, temperature: f64) -> Result<Vec<f64>> {
    if set.dim() != head.dim() {
        return Err(Error::Shape(format!("set has dim {}, head has dim {}", set.dim(), head.dim())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(par::map_rows(set.data(), set.dim(), |r| score_logits(&head.logits(r), kind, temperature)))
}

/// `ceil(tpr * n)` with float dust removed, clamped to `1..=n`.
fn coverage_count(tpr: f64, n: usize) -> usize {
    crate::outlier_pipeline::keep_count(tpr, n).clamp(1, n)
}

/// The `ceil(tpr * n)`-th largest ID score: the largest γ with at least that
/// many ID scores `>= γ`.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Param("no ID scores".into()));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Param(format!("tpr must lie in (0, 1], got {tpr}")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[coverage_count(tpr, sorted.len()) - 1])
}

/// Fraction of OoD scores accepted as ID at the threshold reaching `tpr`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::Param("no OoD scores".into()));
    }
    let gamma = threshold_at_tpr(id_scores, tpr)?;
    Ok(ood_scores.iter().filter(|&&s| s >= gamma).count() as f64 / ood_scores.len() as f64)
}

/// Mann-Whitney AUROC: P(id > ood) + ½ P(id == ood), via one joint sort.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Param("AUROC needs both ID and OoD scores".into()));
    }
    let mut joint: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    joint.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the U statistic, kept integral: each ID score earns 2 per OoD
    // score strictly below it and 1 per tie.
    let mut twice_u: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < joint.len() {
        let mut j = i;
        let (mut n_id, mut n_ood) = (0u128, 0u128);
        while j < joint.len() && joint[j].0 == joint[i].0 {
            if joint[j].1 {
                n_id += 1;
            } else {
                n_ood += 1;
            }
            j += 1;
        }
        twice_u += n_id * (2 * ood_below + n_ood);
        ood_below += n_ood;
        i = j;
    }
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    In,
    Out,
}

/// `In` iff `score >= gamma`.
pub fn detect(score: f64, gamma: f64) -> Decision {
    if score >= gamma {
        Decision::In
    } else {
        Decision::Out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub ood_set: String,
    pub score_kind: ScoreKind,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_accuracy: f64,
    pub gamma: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl DetectionReport {
    pub const CSV_HEADER: &'static str = "ood_set,score_kind,fpr95,auroc,id_acc,gamma";

    pub fn from_scores(
        ood_set: &str,
        id: &ScoreSeries,
        ood: &ScoreSeries,
        id_accuracy: f64,
        tpr: f64,
    ) -> Result<Self> {
        Ok(DetectionReport {
            ood_set: ood_set.to_string(),
            score_kind: id.kind,
            fpr95: fpr_at_tpr(&id.scores, &ood.scores, tpr)?,
            auroc: auroc(&id.scores, &ood.scores)?,
            id_accuracy,
            gamma: threshold_at_tpr(&id.scores, tpr)?,
            n_id: id.len(),
            n_ood: ood.len(),
        })
    }

    /// Unweighted mean over `reports`, named `Average`.
    pub fn average(reports: &[DetectionReport]) -> Option<Self> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let mean = |f: fn(&DetectionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(DetectionReport {
            ood_set: "Average".into(),
            score_kind: first.score_kind,
            fpr95: mean(|r| r.fpr95),
            auroc: mean(|r| r.auroc),
            id_accuracy: mean(|r| r.id_accuracy),
            gamma: mean(|r| r.gamma),
            n_id: first.n_id,
            n_ood: reports.iter().map(|r| r.n_ood).sum(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.ood_set, self.score_kind, self.fpr95, self.auroc, self.id_accuracy, self.gamma
        )
    }
}

/// Full evaluation of a head: one report per OoD set, then the average row
/// when there is more than one set.
pub fn evaluate(
    head: &LinearHead,
    id_test: &EmbeddingSet,
    ood_sets: &[(String, EmbeddingSet)],
    kind: ScoreKind,
    temperature: f64,
    tpr: f64,
) -> Result<Vec<DetectionReport>> {
    let id_acc = accuracy(head, id_test)?;
    let id = ScoreSeries::new(score_set(head, id_test, kind, temperature)?, Origin::Id, kind)?;
    let mut reports = Vec::with_capacity(ood_sets.len() + 1);
    for (name, set) in ood_sets {
        let ood = ScoreSeries::new(score_set(head, set, kind, temperature)?, Origin::Ood, kind)?;
        reports.push(DetectionReport::from_scores(name, &id, &ood, id_acc, tpr)?);
    }
    if reports.len() > 1 {
        let avg = DetectionReport::average(&reports).unwrap();
        reports.push(avg);
    }
    Ok(reports)
}
