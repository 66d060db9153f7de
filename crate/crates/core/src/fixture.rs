//! Deterministic synthetic embedding fixtures.
//!
//! ID classes are isotropic Gaussians (per-coordinate std `sigma`) whose
//! means form a regular simplex with pairwise distance `separation * sigma`.
//! Around them the fixture places:
//!
//! * `ood_near`: rows `near_offset * sigma` from an ID mean along that
//!   class's sibling axis, a unit axis orthogonal to the class-mean span
//!   (a concept adjacent to an ID class but not one of them);
//! * `ood_far`: clusters at least `far_offset * sigma` from every ID mean;
//! * `candidates`: a caption-like pool, each row a noisy ID-class point
//!   moved `t * sigma` along its sibling axis with `t` uniform in
//!   `[0, mix_max]`, shifted by the modality offset;
//! * `far_candidates`: a control pool at least `far_offset * sigma` from
//!   every ID mean, also shifted by the modality offset.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingSet, LabelSpace, RowMeta};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub sigma: f64,
    pub separation: f64,
    pub near_offset: f64,
    pub far_offset: f64,
    pub ood_count: usize,
    pub candidate_count: usize,
    pub far_candidate_count: usize,
    pub mix_max: f64,
    /// Norm of the constant shift applied to both candidate pools.
    pub modality_offset: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            classes: 8,
            dim: 32,
            train_per_class: 200,
            val_per_class: 200,
            test_per_class: 100,
            sigma: 0.1,
            separation: 6.0,
            near_offset: 3.0,
            far_offset: 6.0,
            ood_count: 800,
            candidate_count: 2000,
            far_candidate_count: 300,
            mix_max: 5.0,
            modality_offset: 0.0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim < self.classes {
            return bad(format!("dim {} cannot hold a {}-class simplex", self.dim, self.classes));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("every ID split needs at least one row per class".into());
        }
        if !(self.sigma > 0.0) || !(self.separation > 0.0) {
            return bad("sigma and separation must be positive".into());
        }
        if !(self.near_offset >= 0.0) || !(self.far_offset >= 0.0) || !(self.modality_offset >= 0.0) {
            return bad("offsets must be non-negative".into());
        }
        if !(self.mix_max >= 0.0) {
            return bad(format!("mix_max must be non-negative, got {}", self.mix_max));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub labels: LabelSpace,
    pub means: Vec<Vec<f64>>,
    pub id_train: EmbeddingSet,
    pub id_val: EmbeddingSet,
    pub id_test: EmbeddingSet,
    pub ood_near: EmbeddingSet,
    pub ood_far: EmbeddingSet,
    pub candidates: EmbeddingSet,
    pub far_candidates: EmbeddingSet,
}

impl Fixture {
    /// `(file stem, set)` pairs in a fixed order, for writing to disk.
    pub fn files(&self) -> [(&'static str, &EmbeddingSet); 7] {
        [
            ("id_train", &self.id_train),
            ("id_val", &self.id_val),
            ("id_test", &self.id_test),
            ("ood_near", &self.ood_near),
            ("ood_far", &self.ood_far),
            ("outlier_candidates", &self.candidates),
            ("far_candidates", &self.far_candidates),
        ]
    }

    /// Writes every set as `<dir>/<stem>.emb` plus `classes.txt`.
    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (stem, set) in self.files() {
            crate::embedstore::save(set, dir.join(format!("{stem}.emb")))?;
        }
        let p = dir.join("classes.txt");
        let mut names = self.labels.names().join("\n");
        names.push('\n');
        std::fs::write(&p, names).map_err(|e| Error::io(&p, e))
    }
}

fn gaussian(r: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| r.sample(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn push_row(data: &mut Vec<f32>, row: &[f64]) {
    data.extend(row.iter().map(|&v| v as f32));
}

/// A point at least `min_dist` from every mean: a random direction from a
/// random mean at radius `[min_dist, 1.25 min_dist]`, retried until it
/// clears all other means.
fn far_point(means: &[Vec<f64>], min_dist: f64, r: &mut Rng) -> Vec<f64> {
    let dim = means[0].len();
    loop {
        let c = r.random_range(0..means.len());
        let u = unit(gaussian(r, dim));
        let radius = min_dist * r.random_range(1.0..1.25);
        let p: Vec<f64> = means[c].iter().zip(&u).map(|(m, u)| m + radius * u).collect();
        if means.iter().all(|m| dist(m, &p) >= min_dist) {
            return p;
        }
    }
}

pub fn generate(spec: &FixtureSpec, seed: u64) -> Result<Fixture> {
    spec.validate()?;
    let (c, dim, sigma) = (spec.classes, spec.dim, spec.sigma);
    let labels = LabelSpace::numbered(c)?;

    // centred basis vectors e_i - 1/C, scaled to the requested separation
    let scale = spec.separation * sigma / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    let e = if i == j { 1.0 } else { 0.0 };
                    let centre = if j < c { 1.0 / c as f64 } else { 0.0 };
                    scale * (e - centre)
                })
                .collect()
        })
        .collect();

    let id_split = |name: &str, per_class: usize| -> Result<EmbeddingSet> {
        let mut r = rng::sub_rng(seed, &format!("fixture/{name}"));
        let mut data = Vec::with_capacity(c * per_class * dim);
        let mut y = Vec::with_capacity(c * per_class);
        for _ in 0..per_class {
            for (k, mu) in means.iter().enumerate() {
                let z = gaussian(&mut r, dim);
                let row: Vec<f64> = mu.iter().zip(&z).map(|(m, z)| m + sigma * z).collect();
                push_row(&mut data, &row);
                y.push(k as u32);
            }
        }
        EmbeddingSet::new(dim, data)?.with_labels(y)
    };
    let id_train = id_split("train", spec.train_per_class)?;
    let id_val = id_split("val", spec.val_per_class)?;
    let id_test = id_split("test", spec.test_per_class)?;

    // sibling directions: unit axes orthogonal to the class-mean span
    let sibling = |a: usize| -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[c + a % (dim - c)] = 1.0;
        v
    };
    let mut r = rng::sub_rng(seed, "fixture/ood_near");
    let mut data = Vec::new();
    for i in 0..spec.ood_count {
        let a = i % c;
        let v = sibling(a);
        let z = gaussian(&mut r, dim);
        let row: Vec<f64> = (0..dim).map(|j| means[a][j] + spec.near_offset * sigma * v[j] + sigma * z[j]).collect();
        push_row(&mut data, &row);
    }
    let ood_near = EmbeddingSet::new(dim, data)?;

    let mut r = rng::sub_rng(seed, "fixture/ood_far");
    let mut data = Vec::new();
    for _ in 0..spec.ood_count {
        let centre = far_point(&means, spec.far_offset * sigma, &mut r);
        let z = gaussian(&mut r, dim);
        let row: Vec<f64> = centre.iter().zip(&z).map(|(m, z)| m + sigma * z).collect();
        push_row(&mut data, &row);
    }
    let ood_far = EmbeddingSet::new(dim, data)?;

    let mut r = rng::sub_rng(seed, "fixture/modality");
    let shift: Vec<f64> = unit(gaussian(&mut r, dim)).into_iter().map(|v| v * spec.modality_offset).collect();

    let mut r = rng::sub_rng(seed, "fixture/candidates");
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for i in 0..spec.candidate_count {
        let a = i % c;
        let v = sibling(a);
        let t = r.random_range(0.0..=spec.mix_max);
        let z = gaussian(&mut r, dim);
        let row: Vec<f64> = (0..dim)
            .map(|j| means[a][j] + t * sigma * v[j] + sigma * z[j] + shift[j])
            .collect();
        push_row(&mut data, &row);
        meta.push(RowMeta {
            row: i as u64,
            text: Some(format!("caption {i} near cluster {a}")),
            source: Some("caption".into()),
            class_name: None,
        });
    }
    let candidates = EmbeddingSet::new(dim, data)?.with_meta(meta)?;

    let mut r = rng::sub_rng(seed, "fixture/far_candidates");
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for i in 0..spec.far_candidate_count {
        let p = far_point(&means, spec.far_offset * sigma, &mut r);
        let row: Vec<f64> = p.iter().zip(&shift).map(|(p, s)| p + s).collect();
        push_row(&mut data, &row);
        meta.push(RowMeta {
            row: i as u64,
            text: Some(format!("far concept {i}")),
            source: Some("auxiliary".into()),
            class_name: None,
        });
    }
    let far_candidates = EmbeddingSet::new(dim, data)?.with_meta(meta)?;

    Ok(Fixture { labels, means, id_train, id_val, id_test, ood_near, ood_far, candidates, far_candidates })
}
