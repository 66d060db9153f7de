//! Class-conditional Gaussian statistics with a shared covariance.
//!
//! Means are per class, the covariance is pooled over all classes and
//! normalised by the total count (no Bessel correction). All solves go
//! through a lower-triangular Cholesky factor of the regularised covariance.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedstore::{self, EmbeddingSet, LabelSpace, RowMeta};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Relative shrinkage seed: `alpha = SHRINK_REL * trace / dim`.
pub const SHRINK_REL: f64 = 1e-6;
const MAX_DOUBLINGS: usize = 256;
/// Rows per partial covariance sum; fixed so the reduction order does not
/// depend on the thread count.
const COV_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    class_names: Vec<String>,
    dim: usize,
    means: Vec<f64>,
    covariance: Vec<f64>,
    factor: Vec<f64>,
    shrinkage: f64,
    log_det: f64,
    per_class_counts: Vec<usize>,
    total_count: usize,
}

impl ClassStats {
    /// Fits class means and the pooled population covariance.
    pub fn fit(set: &EmbeddingSet, space: &LabelSpace) -> Result<Self> {
        let labels = set.require_labels()?;
        set.check_labels(space)?;
        let dim = set.dim();
        let c = space.len();

        let mut counts = vec![0usize; c];
        let mut sums = vec![0f64; c * dim];
        for (row, &y) in set.rows().zip(labels) {
            let y = y as usize;
            counts[y] += 1;
            for (s, &v) in sums[y * dim..(y + 1) * dim].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass { class: space.name(missing).to_string() });
        }
        let means: Vec<f64> = sums
            .chunks_exact(dim)
            .zip(&counts)
            .flat_map(|(s, &n)| s.iter().map(move |v| v / n as f64))
            .collect();

        let n = set.count();
        let chunks = n.div_ceil(COV_CHUNK);
        let partials = par::map_indexed(chunks, |k| {
            let mut acc = vec![0f64; dim * dim];
            let mut diff = vec![0f64; dim];
            for i in k * COV_CHUNK..((k + 1) * COV_CHUNK).min(n) {
                let y = labels[i] as usize;
                let mu = &means[y * dim..(y + 1) * dim];
                for ((d, &v), &m) in diff.iter_mut().zip(set.row(i)).zip(mu) {
                    *d = v as f64 - m;
                }
                for a in 0..dim {
                    let da = diff[a];
                    for b in 0..=a {
                        acc[a * dim + b] += da * diff[b];
                    }
                }
            }
            acc
        });
        let mut covariance = vec![0f64; dim * dim];
        for p in &partials {
            for (c, v) in covariance.iter_mut().zip(p) {
                *c += v;
            }
        }
        for a in 0..dim {
            for b in 0..=a {
                let v = covariance[a * dim + b] / n as f64;
                covariance[a * dim + b] = v;
                covariance[b * dim + a] = v;
            }
        }

        Self::assemble(space.names().to_vec(), dim, means, covariance, counts, 0.0)
    }

    /// Builds stats from explicit parts, factorising `covariance` with the
    /// shrinkage policy. `min_shrinkage` lets a reload start from a
    /// previously recorded value.
    pub fn from_parts(
        class_names: Vec<String>,
        means: Vec<f64>,
        covariance: Vec<f64>,
        per_class_counts: Vec<usize>,
        min_shrinkage: f64,
    ) -> Result<Self> {
        let c = class_names.len();
        if c == 0 || means.len() % c != 0 {
            return Err(Error::Shape(format!("{} mean entries for {c} classes", means.len())));
        }
        let dim = means.len() / c;
        if dim == 0 || covariance.len() != dim * dim || per_class_counts.len() != c {
            return Err(Error::Shape("inconsistent class statistics".into()));
        }
        Self::assemble(class_names, dim, means, covariance, per_class_counts, min_shrinkage)
    }

    fn assemble(
        class_names: Vec<String>,
        dim: usize,
        means: Vec<f64>,
        covariance: Vec<f64>,
        per_class_counts: Vec<usize>,
        min_shrinkage: f64,
    ) -> Result<Self> {
        let (factor, shrinkage) = factor_with_shrinkage(&covariance, dim, min_shrinkage)?;
        let log_det = 2.0 * (0..dim).map(|i| factor[i * dim + i].ln()).sum::<f64>();
        let total_count = per_class_counts.iter().sum();
        Ok(ClassStats {
            class_names,
            dim,
            means,
            covariance,
            factor,
            shrinkage,
            log_det,
            per_class_counts,
            total_count,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    /// Unregularised covariance, row-major `dim x dim`.
    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    /// Lower-triangular factor `L` with `L Lᵀ = Σ + αI`, row-major.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn per_class_counts(&self) -> &[usize] {
        &self.per_class_counts
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    fn check_dim(&self, s: &[f32]) -> Result<()> {
        if s.len() != self.dim {
            return Err(Error::Shape(format!("query has dim {}, stats have dim {}", s.len(), self.dim)));
        }
        Ok(())
    }

    /// `(s - μ_c)ᵀ (Σ + αI)⁻¹ (s - μ_c)` by forward substitution.
    pub fn quad_form(&self, s: &[f32], c: usize) -> Result<f64> {
        self.check_dim(s)?;
        if c >= self.num_classes() {
            return Err(Error::Param(format!("class {c} out of range")));
        }
        Ok(self.quad_unchecked(s, c))
    }

    fn quad_unchecked(&self, s: &[f32], c: usize) -> f64 {
        let dim = self.dim;
        let mu = self.mean(c);
        let mut y = vec![0f64; dim];
        let mut q = 0.0;
        for i in 0..dim {
            let row = &self.factor[i * dim..i * dim + i];
            let acc: f64 = row.iter().zip(&y[..i]).map(|(l, v)| l * v).sum();
            let v = (s[i] as f64 - mu[i] - acc) / self.factor[i * dim + i];
            y[i] = v;
            q += v * v;
        }
        q
    }

    /// Mahalanobis confidence: the largest negative quadratic form over
    /// classes. Always `<= 0`; zero exactly at a class mean.
    pub fn mahalanobis_score(&self, s: &[f32]) -> Result<f64> {
        self.check_dim(s)?;
        Ok((0..self.num_classes())
            .map(|c| -self.quad_unchecked(s, c))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Scores every row of `set`.
    pub fn mahalanobis_scores(&self, set: &EmbeddingSet) -> Result<Vec<f64>> {
        if set.dim() != self.dim {
            return Err(Error::Shape(format!("set has dim {}, stats have dim {}", set.dim(), self.dim)));
        }
        Ok(par::map_rows(set.data(), self.dim, |r| {
            (0..self.num_classes())
                .map(|c| -self.quad_unchecked(r, c))
                .fold(f64::NEG_INFINITY, f64::max)
        }))
    }

    /// `log N(s; μ_c, Σ + αI)`.
    pub fn class_log_density(&self, s: &[f32], c: usize) -> Result<f64> {
        let q = self.quad_form(s, c)?;
        Ok(-0.5 * q - 0.5 * self.log_det - 0.5 * self.dim as f64 * LN_2PI)
    }

    /// One draw from `N(μ_c, Σ + αI)` as `μ_c + L z`.
    pub fn sample(&self, c: usize, rng: &mut Rng) -> Vec<f64> {
        let dim = self.dim;
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mu = self.mean(c);
        (0..dim)
            .map(|i| {
                let row = &self.factor[i * dim..=i * dim + i];
                mu[i] + row.iter().zip(&z).map(|(l, v)| l * v).sum::<f64>()
            })
            .collect()
    }

    /// Writes the means as an EMB1 file at `path` and the remaining fields to
    /// `<path>.stats.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let means: Vec<f32> = self.means.iter().map(|&v| v as f32).collect();
        let c = self.num_classes();
        let meta = self
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| RowMeta { row: i as u64, class_name: Some(n.clone()), ..Default::default() })
            .collect();
        let set = EmbeddingSet::new(self.dim, means)?
            .with_labels((0..c as u32).collect())?
            .with_meta(meta)?;
        embedstore::save(&set, path)?;
        let side = StatsSidecar {
            class_names: self.class_names.clone(),
            dim: self.dim,
            covariance: self.covariance.clone(),
            shrinkage: self.shrinkage,
            per_class_counts: self.per_class_counts.clone(),
            total_count: self.total_count,
        };
        let sp = sidecar_path(path);
        fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let set = embedstore::load(path)?;
        let sp = sidecar_path(path);
        let bytes = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: StatsSidecar = serde_json::from_slice(&bytes)?;
        if side.dim != set.dim() || side.class_names.len() != set.count() {
            return Err(Error::Shape("stats sidecar disagrees with means file".into()));
        }
        let means = set.data().iter().map(|&v| v as f64).collect();
        Self::from_parts(side.class_names, means, side.covariance, side.per_class_counts, side.shrinkage)
    }
}

#[derive(Serialize, Deserialize)]
struct StatsSidecar {
    class_names: Vec<String>,
    dim: usize,
    covariance: Vec<f64>,
    shrinkage: f64,
    per_class_counts: Vec<usize>,
    total_count: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

/// In-place-free Cholesky of a row-major SPD matrix. Fails when a pivot is not
/// comfortably positive relative to the largest diagonal entry.
pub fn cholesky(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let max_diag = (0..dim).map(|i| a[i * dim + i].abs()).fold(0.0, f64::max);
    let tol = max_diag * dim as f64 * f64::EPSILON;
    let mut l = vec![0f64; dim * dim];
    for j in 0..dim {
        let mut d = a[j * dim + j];
        for k in 0..j {
            d -= l[j * dim + k] * l[j * dim + k];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        l[j * dim + j] = d;
        for i in j + 1..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = s / d;
        }
    }
    Some(l)
}

fn factor_with_shrinkage(cov: &[f64], dim: usize, min_shrinkage: f64) -> Result<(Vec<f64>, f64)> {
    let add = |alpha: f64| -> Vec<f64> {
        let mut m = cov.to_vec();
        for i in 0..dim {
            m[i * dim + i] += alpha;
        }
        m
    };
    if min_shrinkage <= 0.0 {
        if let Some(l) = cholesky(cov, dim) {
            return Ok((l, 0.0));
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    // An all-zero covariance has no scale to borrow; fall back to unit scale.
    let mut alpha = if trace > 0.0 { SHRINK_REL * trace / dim as f64 } else { SHRINK_REL };
    if min_shrinkage > 0.0 {
        alpha = min_shrinkage;
    }
    for _ in 0..MAX_DOUBLINGS {
        if let Some(l) = cholesky(&add(alpha), dim) {
            return Ok((l, alpha));
        }
        alpha *= 2.0;
    }
    Err(Error::Param("covariance could not be regularised to positive definite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn labeled(dim: usize, rows: &[&[f32]], labels: &[u32]) -> EmbeddingSet {
        EmbeddingSet::from_rows(dim, rows).unwrap().with_labels(labels.to_vec()).unwrap()
    }

    fn identity_stats(means: &[[f64; 2]]) -> ClassStats {
        let names = (0..means.len()).map(|i| format!("c{i}")).collect();
        ClassStats::from_parts(
            names,
            means.iter().flatten().copied().collect(),
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1; means.len()],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn two_point_class() {
        let set = labeled(2, &[&[0.0, 0.0], &[2.0, 0.0], &[5.0, 5.0]], &[0, 0, 1]);
        let ls = LabelSpace::new(["a", "b"]).unwrap();
        let st = ClassStats::fit(&set, &ls).unwrap();
        assert_eq!(st.mean(0), &[1.0, 0.0]);
        assert_eq!(st.mean(1), &[5.0, 5.0]);
        // (1/3) * [(−1,0)(−1,0)ᵀ + (1,0)(1,0)ᵀ] with N = 3 rows
        assert!((st.covariance()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(&st.covariance()[1..], &[0.0, 0.0, 0.0]);
        assert!(st.shrinkage() > 0.0);
        assert!((st.shrinkage() - 1e-6 * (2.0 / 3.0) / 2.0).abs() < 1e-18);
        assert_eq!(st.total_count(), 3);
    }

    #[test]
    fn repeated_rows_give_zero_covariance() {
        let set = labeled(2, &[&[1.0, 2.0], &[1.0, 2.0], &[3.0, 1.0]], &[0, 0, 1]);
        let st = ClassStats::fit(&set, &LabelSpace::new(["a", "b"]).unwrap()).unwrap();
        assert!(st.covariance().iter().all(|&v| v == 0.0));
        assert_eq!(st.mean(0), &[1.0, 2.0]);
        assert_eq!(st.shrinkage(), SHRINK_REL);
    }

    #[test]
    fn empty_class_is_named() {
        let set = labeled(1, &[&[1.0], &[2.0]], &[0, 0]);
        match ClassStats::fit(&set, &LabelSpace::new(["a", "b"]).unwrap()) {
            Err(Error::MissingClass { class }) => assert_eq!(class, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unlabeled_set_rejected() {
        let set = EmbeddingSet::from_rows(1, &[[1.0f32]]).unwrap();
        assert!(ClassStats::fit(&set, &LabelSpace::new(["a", "b"]).unwrap()).is_err());
    }

    #[test]
    fn score_at_mean_is_zero() {
        let st = identity_stats(&[[0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(st.mahalanobis_score(&[2.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn score_between_two_means() {
        let st = identity_stats(&[[0.0, 0.0], [2.0, 0.0]]);
        // both classes: 1 + 1 = 2
        assert_eq!(st.mahalanobis_score(&[1.0, 1.0]).unwrap(), -2.0);
    }

    #[test]
    fn score_dim_mismatch() {
        let st = identity_stats(&[[0.0, 0.0], [2.0, 0.0]]);
        assert!(matches!(st.mahalanobis_score(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn standard_normal_mode() {
        let st = ClassStats::from_parts(vec!["a".into(), "b".into()], vec![0.0, 3.0], vec![1.0], vec![1, 1], 0.0)
            .unwrap();
        let v = st.class_log_density(&[0.0], 0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let st = ClassStats::from_parts(vec!["a".into(), "b".into()], vec![0.3, 3.0], vec![0.49], vec![1, 1], 0.0)
            .unwrap();
        // trapezoid on [-8, 8] with step 1e-3
        let h = 1e-3;
        let n = 16_000;
        let mut total = 0.0;
        for i in 0..=n {
            let x = -8.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * st.class_log_density(&[x as f32], 0).unwrap().exp();
        }
        assert!((total * h - 1.0).abs() < 1e-3, "{}", total * h);
    }

    #[test]
    fn density_falls_along_ray() {
        let st = identity_stats(&[[1.0, -1.0], [4.0, 4.0]]);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let t = k as f64 * 0.25;
            let s = [(1.0 + 0.6 * t) as f32, (-1.0 + 0.8 * t) as f32];
            let d = st.class_log_density(&s, 0).unwrap();
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn samples_follow_mean() {
        let st = identity_stats(&[[3.0, -2.0], [0.0, 0.0]]);
        let mut r = rng::rng(5);
        let n = 20_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let s = st.sample(0, &mut r);
            acc[0] += s[0];
            acc[1] += s[1];
        }
        assert!((acc[0] / n as f64 - 3.0).abs() < 4.0 / (n as f64).sqrt());
        assert!((acc[1] / n as f64 + 2.0).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.emb");
        let set = labeled(2, &[&[0.0, 0.5], &[2.0, 0.25], &[5.0, 5.0], &[4.0, 6.0]], &[0, 0, 1, 1]);
        let st = ClassStats::fit(&set, &LabelSpace::new(["a", "b"]).unwrap()).unwrap();
        st.save(&p).unwrap();
        let back = ClassStats::load(&p).unwrap();
        assert_eq!(back.covariance(), st.covariance());
        assert_eq!(back.shrinkage(), st.shrinkage());
        assert_eq!(back.per_class_counts(), st.per_class_counts());
        assert_eq!(back.mean(1), st.mean(1));
    }
}
