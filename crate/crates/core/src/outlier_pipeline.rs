//! Candidate outlier filtering and synthesis.
//!
//! Each filter takes an embedding set and returns an [`OutlierSet`]: the
//! surviving rows plus a trail entry recording what was done. Filters only
//! ever select rows; [`synthesize_virtual_outliers`] is the one operation
//! that fabricates new embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingSet, LabelSpace, RowMeta};
use crate::error::{Error, Result};
use crate::gaussian_stats::ClassStats;
use crate::par;
use crate::rng;

/// Noise variance used by default for textual outliers.
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.016;

/// Which end of the Mahalanobis ranking to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Smallest M(s): candidates furthest from every class mean.
    Farthest,
    /// Largest M(s): candidates closest to some class mean.
    Nearest,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Farthest => "farthest",
            Direction::Nearest => "nearest",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "farthest" => Ok(Direction::Farthest),
            "nearest" => Ok(Direction::Nearest),
            _ => Err(Error::Param(format!("unknown direction '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub k: usize,
    pub delta: usize,
    pub p: f64,
    pub direction: Direction,
    pub noise_variance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { k: 30, delta: 25, p: 0.15, direction: Direction::Farthest, noise_variance: DEFAULT_NOISE_VARIANCE }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 1 {
            return Err(Error::Param("delta must be at least 1".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Param(format!("p must lie in (0, 1], got {}", self.p)));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::Param(format!("noise variance must be >= 0, got {}", self.noise_variance)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Word,
    Description,
    Caption,
    Virtual,
    Auxiliary,
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "word" => Provenance::Word,
            "description" => Provenance::Description,
            "caption" => Provenance::Caption,
            "virtual" => Provenance::Virtual,
            "auxiliary" => Provenance::Auxiliary,
            _ => return Err(Error::Param(format!("unknown provenance '{s}'"))),
        })
    }
}

/// One bookkeeping entry of an outlier set's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailStep {
    pub op: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub rows_in: usize,
    pub rows_out: usize,
}

impl TrailStep {
    fn new(op: &str, rows_in: usize, rows_out: usize) -> Self {
        TrailStep { op: op.to_string(), params: BTreeMap::new(), rows_in, rows_out }
    }

    fn param(mut self, key: &str, v: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), v.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSet {
    pub embeddings: EmbeddingSet,
    pub provenance: Provenance,
    pub trail: Vec<TrailStep>,
}

impl OutlierSet {
    /// Wraps raw candidates with an empty trail.
    pub fn raw(embeddings: EmbeddingSet, provenance: Provenance) -> Self {
        OutlierSet { embeddings, provenance, trail: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.embeddings.count()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// True when each step's output count feeds the next step's input and
    /// the last step matches the stored rows.
    pub fn trail_consistent(&self) -> bool {
        let chained = self.trail.windows(2).all(|w| w[0].rows_out == w[1].rows_in);
        let tail = self.trail.last().map_or(true, |s| s.rows_out == self.len());
        chained && tail
    }

    /// Applies a filter to this set's rows and appends its trail.
    pub fn then(self, f: impl FnOnce(&EmbeddingSet) -> Result<OutlierSet>) -> Result<OutlierSet> {
        let next = f(&self.embeddings)?;
        let mut trail = self.trail;
        trail.extend(next.trail);
        Ok(OutlierSet { embeddings: next.embeddings, provenance: self.provenance, trail })
    }
}

/// `ceil(p * n)` that ignores floating-point dust, so `0.15 * 100` keeps 15.
pub fn keep_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

fn cosine(a: &[f32], b: &[f64], b_norm: f64) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y;
        na += x as f64 * x as f64;
    }
    let denom = na.sqrt() * b_norm;
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Word-level filter: per ID class, ranks candidates by cosine similarity to
/// the class-mean image embedding and keeps 0-indexed ranks `k..k+delta`.
/// The per-class windows are unioned in (class, rank) order, first
/// occurrence of a row wins. Ties rank the lower row index first.
pub fn rank_window_filter(candidates: &EmbeddingSet, id_images: &EmbeddingSet, cfg: &FilterConfig) -> Result<OutlierSet> {
    cfg.validate()?;
    if candidates.dim() != id_images.dim() {
        return Err(Error::Shape(format!(
            "candidates have dim {}, ID images have dim {}",
            candidates.dim(),
            id_images.dim()
        )));
    }
    let n = candidates.count();
    if n <= cfg.k {
        return Err(Error::WindowUnderflow { available: n, k: cfg.k });
    }
    let labels = id_images.require_labels()?;
    let dim = id_images.dim();
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sums = vec![0f64; classes * dim];
    let mut counts = vec![0usize; classes];
    for (row, &y) in id_images.rows().zip(labels) {
        counts[y as usize] += 1;
        for (s, &v) in sums[y as usize * dim..][..dim].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();

    let windows = par::map_indexed(present.len(), |j| {
        let c = present[j];
        let mean: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s / counts[c] as f64).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sims: Vec<f64> = candidates.rows().map(|r| cosine(r, &mean, norm)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let end = (cfg.k + cfg.delta).min(n);
        order[cfg.k..end].to_vec()
    });

    let mut seen = vec![false; n];
    let mut keep = Vec::new();
    for w in &windows {
        for &i in w {
            if !seen[i] {
                seen[i] = true;
                keep.push(i);
            }
        }
    }
    let step = TrailStep::new("rank_window_filter", n, keep.len())
        .param("k", cfg.k)
        .param("delta", cfg.delta)
        .param("classes", present.len());
    Ok(OutlierSet { embeddings: candidates.select(&keep), provenance: Provenance::Word, trail: vec![step] })
}

/// Lower-cased alphanumeric tokens.
fn tokens(s: &str) -> Vec<String> {
    s.trim()
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Removes candidates whose text mentions any class name. Matching is on
/// case-folded word tokens, so "hotdog" does not match "dog" but
/// "Golden  Retriever!" matches "golden retriever".
pub fn exclude_labels(candidates: &EmbeddingSet, space: &LabelSpace) -> Result<OutlierSet> {
    let meta = candidates
        .meta()
        .ok_or_else(|| Error::Meta("label exclusion needs per-row text metadata".into()))?;
    let needles: Vec<Vec<String>> = space.names().iter().map(|n| tokens(n)).filter(|t| !t.is_empty()).collect();
    let keep: Vec<usize> = meta
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let hay = tokens(m.text.as_deref().unwrap_or(""));
            !needles.iter().any(|needle| hay.windows(needle.len()).any(|w| w == needle.as_slice()))
        })
        .map(|(i, _)| i)
        .collect();
    let step = TrailStep::new("exclude_labels", candidates.count(), keep.len()).param("classes", space.len());
    Ok(OutlierSet { embeddings: candidates.select(&keep), provenance: Provenance::Description, trail: vec![step] })
}

/// Caption-level filter: keeps `ceil(p * n)` candidates ranked by their
/// Mahalanobis confidence, from the end chosen by `cfg.direction`. Output is
/// in rank order.
pub fn mahalanobis_filter(candidates: &EmbeddingSet, stats: &ClassStats, cfg: &FilterConfig) -> Result<OutlierSet> {
    cfg.validate()?;
    let n = candidates.count();
    if n == 0 {
        return Err(Error::Param("mahalanobis filter needs at least one candidate".into()));
    }
    let scores = stats.mahalanobis_scores(candidates)?;
    let mut order: Vec<usize> = (0..n).collect();
    match cfg.direction {
        Direction::Farthest => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        Direction::Nearest => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
    }
    let keep = keep_count(cfg.p, n);
    order.truncate(keep);
    let cut = order.last().map(|&i| scores[i]);
    let step = TrailStep::new("mahalanobis_filter", n, keep)
        .param("p", cfg.p)
        .param("direction", cfg.direction.to_string())
        .param("cut", cut);
    Ok(OutlierSet { embeddings: candidates.select(&order), provenance: Provenance::Caption, trail: vec![step] })
}

/// Draws `samples_per_class` points from each class Gaussian and keeps the
/// `keep_per_class` with the lowest class log-density, in draw order.
/// Each class uses its own sub-stream of `seed`, so classes can be drawn in
/// parallel without changing the result.
pub fn synthesize_virtual_outliers(
    stats: &ClassStats,
    samples_per_class: usize,
    keep_per_class: usize,
    seed: u64,
) -> Result<OutlierSet> {
    if samples_per_class == 0 {
        return Err(Error::Param("samples_per_class must be at least 1".into()));
    }
    if keep_per_class > samples_per_class {
        return Err(Error::Param(format!(
            "cannot keep {keep_per_class} of {samples_per_class} samples per class"
        )));
    }
    let dim = stats.dim();
    let per_class: Vec<Result<Vec<Vec<f32>>>> = par::map_indexed(stats.num_classes(), |c| {
        let mut r = rng::sub_rng(seed, &format!("virtual/{c}"));
        let draws: Vec<Vec<f32>> = (0..samples_per_class)
            .map(|_| stats.sample(c, &mut r).into_iter().map(|v| v as f32).collect())
            .collect();
        if keep_per_class == samples_per_class {
            return Ok(draws);
        }
        let dens = draws.iter().map(|d| stats.class_log_density(d, c)).collect::<Result<Vec<f64>>>()?;
        let mut order: Vec<usize> = (0..samples_per_class).collect();
        order.sort_by(|&a, &b| dens[a].total_cmp(&dens[b]).then(a.cmp(&b)));
        let mut kept = order[..keep_per_class].to_vec();
        kept.sort_unstable();
        Ok(kept.into_iter().map(|i| draws[i].clone()).collect())
    });

    let mut data = Vec::with_capacity(stats.num_classes() * keep_per_class * dim);
    let mut meta = Vec::new();
    for (c, rows) in per_class.into_iter().enumerate() {
        for row in rows? {
            meta.push(RowMeta {
                row: meta.len() as u64,
                class_name: Some(stats.class_names()[c].clone()),
                source: Some("virtual".into()),
                text: None,
            });
            data.extend(row);
        }
    }
    let set = EmbeddingSet::new(dim, data)?.with_meta(meta)?;
    let produced = stats.num_classes() * samples_per_class;
    let step = TrailStep::new("synthesize_virtual_outliers", produced, set.count())
        .param("samples_per_class", samples_per_class)
        .param("keep_per_class", keep_per_class)
        .param("seed", seed);
    Ok(OutlierSet { embeddings: set, provenance: Provenance::Virtual, trail: vec![step] })
}

/// Adds i.i.d. `N(0, variance)` noise to every coordinate, drawn in
/// row-major order from `rng`.
pub fn add_noise_with(set: &EmbeddingSet, variance: f64, r: &mut rng::Rng) -> Result<EmbeddingSet> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::Param(format!("noise variance must be >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(set.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Param(e.to_string()))?;
    let data = set.data().iter().map(|&v| (v as f64 + normal.sample(r)) as f32).collect();
    set.replace_data(data)
}

/// Seeded [`add_noise_with`]. Zero variance returns the input unchanged.
pub fn inject_noise(set: &EmbeddingSet, variance: f64, seed: u64) -> Result<EmbeddingSet> {
    add_noise_with(set, variance, &mut rng::rng(seed))
}

/// Uniform pick of `m` distinct indices below `n`, sorted. Used by callers
/// that subsample candidate pools.
pub fn subsample(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let m = m.min(n);
    for i in 0..m {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..m].to_vec();
    out.sort_unstable();
    out
}
