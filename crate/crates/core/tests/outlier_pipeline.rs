mod common;

use std::collections::BTreeSet;

use common::{cosine, flat, random_rows, rng};
use oe_forge_core::outlier_pipeline::{
    exclude_labels, inject_noise, keep_count, mahalanobis_filter, rank_window_filter, synthesize_virtual_outliers,
};
use oe_forge_core::{ClassStats, Direction, EmbeddingSet, FilterConfig, LabelSpace, RowMeta};
use proptest::prelude::*;
use rand::Rng;

/// Rows kept for one class: those whose rank (number of candidates strictly
/// more similar, or equally similar with a lower index) lies in `k..k+delta`.
fn window_oracle(cands: &[Vec<f32>], mean: &[f64], k: usize, delta: usize) -> Vec<usize> {
    let sims: Vec<f64> = cands.iter().map(|c| cosine(c, mean)).collect();
    let rank = |i: usize| (0..cands.len()).filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && j < i)).count();
    let mut kept: Vec<(usize, usize)> =
        (0..cands.len()).map(|i| (rank(i), i)).filter(|&(r, _)| r >= k && r < k + delta).collect();
    kept.sort();
    kept.into_iter().map(|(_, i)| i).collect()
}

fn class_means(rows: &[Vec<f32>], labels: &[u32], classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let members: Vec<&Vec<f32>> = rows.iter().zip(labels).filter(|(_, &l)| l as usize == c).map(|(r, _)| r).collect();
            (0..rows[0].len()).map(|j| members.iter().map(|r| r[j] as f64).sum::<f64>() / members.len() as f64).collect()
        })
        .collect()
}

#[test]
fn six_candidates_keep_ranks_two_and_three() {
    let id = EmbeddingSet::from_rows(2, &[[1.0f32, 0.0], [1.0, 0.0]]).unwrap().with_labels(vec![0, 0]).unwrap();
    // angles 0, 10, ..., 50 degrees from the class mean, shuffled
    let angles = [30.0f64, 0.0, 50.0, 10.0, 40.0, 20.0];
    let cands: Vec<[f32; 2]> = angles.iter().map(|a| [a.to_radians().cos() as f32, a.to_radians().sin() as f32]).collect();
    let set = EmbeddingSet::from_rows(2, &cands).unwrap();
    let cfg = FilterConfig { k: 2, delta: 2, ..Default::default() };
    let out = rank_window_filter(&set, &id, &cfg).unwrap();
    let oracle = window_oracle(&cands.iter().map(|c| c.to_vec()).collect::<Vec<_>>(), &[1.0, 0.0], 2, 2);
    assert_eq!(oracle, vec![5, 0]); // 20 and 30 degrees
    assert_eq!(out.embeddings, set.select(&oracle));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_window_matches_brute_force(seed in any::<u64>(), n in 1usize..20, k in 0usize..6, delta in 1usize..6) {
        prop_assume!(n > k);
        let mut r = rng(seed);
        let classes = r.random_range(1..4usize);
        let id_rows = random_rows(&mut r, classes * 3, 3, 1.0);
        let id_labels: Vec<u32> = (0..classes * 3).map(|i| (i % classes) as u32).collect();
        // a few exact duplicates exercise the tie rule
        let mut cands = random_rows(&mut r, n, 3, 1.0);
        if n > 2 {
            cands[n - 1] = cands[0].clone();
        }
        let id = EmbeddingSet::new(3, flat(&id_rows)).unwrap().with_labels(id_labels.clone()).unwrap();
        let set = EmbeddingSet::new(3, flat(&cands)).unwrap();
        let cfg = FilterConfig { k, delta, ..Default::default() };
        let out = rank_window_filter(&set, &id, &cfg).unwrap();

        let mut want = Vec::new();
        let mut seen = BTreeSet::new();
        for mean in class_means(&id_rows, &id_labels, classes) {
            for i in window_oracle(&cands, &mean, k, delta) {
                if seen.insert(i) {
                    want.push(i);
                }
            }
        }
        prop_assert_eq!(&out.embeddings, &set.select(&want));
        // size invariant: each class contributes min(delta, n - k), union at most C times that
        let per = delta.min(n - k);
        prop_assert!(out.len() >= per && out.len() <= classes * per);
        prop_assert!(out.trail_consistent());
    }

    #[test]
    fn exclusion_ignores_case(seed in any::<u64>()) {
        let mut r = rng(seed);
        let names = ["dog", "golden retriever", "lake"];
        let casing = |s: &str, r: &mut rand_chacha::ChaCha8Rng| -> String {
            s.chars().map(|c| if r.random_bool(0.5) { c.to_ascii_uppercase() } else { c }).collect()
        };
        let mut texts = Vec::new();
        let mut mentions = Vec::new();
        for i in 0..30 {
            let pick = r.random_range(0..5usize);
            let text = match pick {
                0..=2 => format!("a photo of a {} outdoors", casing(names[pick], &mut r)),
                3 => "a hotdog on a plate".to_string(),
                _ => format!("{} retrievers", casing("golden", &mut r)),
            };
            mentions.push(pick <= 2);
            texts.push(RowMeta::with_text(i, text));
        }
        let set = EmbeddingSet::new(1, (0..30).map(|i| i as f32).collect()).unwrap().with_meta(texts).unwrap();
        let out = exclude_labels(&set, &LabelSpace::new(names).unwrap()).unwrap();
        let want: Vec<usize> = (0..30).filter(|&i| !mentions[i]).collect();
        let expected = set.select(&want);
        prop_assert_eq!(out.embeddings.data(), expected.data());
    }
}

#[test]
fn exclusion_examples() {
    let set = EmbeddingSet::new(1, vec![0.0, 1.0])
        .unwrap()
        .with_meta(vec![RowMeta::with_text(0, "a photo of dog"), RowMeta::with_text(1, "a photo of lake")])
        .unwrap();
    let out = exclude_labels(&set, &LabelSpace::new(["dog", "cat"]).unwrap()).unwrap();
    assert_eq!(out.embeddings.text(0), Some("a photo of lake"));
    assert_eq!(out.len(), 1);
    let none = exclude_labels(&set, &LabelSpace::new(["bird", "cat"]).unwrap()).unwrap();
    assert_eq!(none.embeddings, set);
}

fn identity_stats(means: &[[f64; 2]]) -> ClassStats {
    ClassStats::from_parts(
        (0..means.len()).map(|c| format!("c{c}")).collect(),
        means.iter().flatten().copied().collect(),
        vec![1.0, 0.0, 0.0, 1.0],
        vec![1; means.len()],
        0.0,
    )
    .unwrap()
}

#[test]
fn mahalanobis_filter_examples() {
    let stats = identity_stats(&[[0.0, 0.0], [100.0, 100.0]]);
    let cands = EmbeddingSet::from_rows(2, &[[0.0f32, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
    let far = mahalanobis_filter(&cands, &stats, &FilterConfig { p: 1.0 / 3.0, ..Default::default() }).unwrap();
    assert_eq!(far.embeddings.data(), &[3.0, 0.0]);
    let near = FilterConfig { p: 1.0 / 3.0, direction: Direction::Nearest, ..Default::default() };
    assert_eq!(mahalanobis_filter(&cands, &stats, &near).unwrap().embeddings.data(), &[0.0, 0.0]);
    let all = mahalanobis_filter(&cands, &stats, &FilterConfig { p: 1.0, ..Default::default() }).unwrap();
    assert_eq!(all.embeddings.data(), &[3.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn mahalanobis_filter_count_and_order_exhaustive() {
    let stats = identity_stats(&[[0.0, 0.0], [4.0, 0.0]]);
    let mut r = rng(9);
    for n in 1..=20 {
        let rows = random_rows(&mut r, n, 2, 5.0);
        let set = EmbeddingSet::new(2, flat(&rows)).unwrap();
        let scores = stats.mahalanobis_scores(&set).unwrap();
        for p in [0.05, 0.1, 0.15, 0.2, 0.5, 1.0] {
            // integer ceil of p*n with p given in hundredths
            let hundredths = (p * 100.0f64).round() as usize;
            let want = (hundredths * n).div_ceil(100);
            assert_eq!(keep_count(p, n), want);
            let out = mahalanobis_filter(&set, &stats, &FilterConfig { p, ..Default::default() }).unwrap();
            assert_eq!(out.len(), want);
            let kept: Vec<f64> = out.embeddings.rows().map(|x| stats.mahalanobis_score(x).unwrap()).collect();
            assert!(kept.windows(2).all(|w| w[0] <= w[1]));
            let cut = kept.last().unwrap();
            let below = scores.iter().filter(|s| *s < cut).count();
            assert!(below <= want);
        }
    }
}

#[test]
fn virtual_outliers_are_the_least_likely_draws() {
    let mut r = rng(4);
    let rows = random_rows(&mut r, 40, 3, 1.0);
    let labels: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
    let set = EmbeddingSet::new(3, flat(&rows)).unwrap().with_labels(labels).unwrap();
    let stats = ClassStats::fit(&set, &LabelSpace::numbered(2).unwrap()).unwrap();

    let all = synthesize_virtual_outliers(&stats, 50, 50, 17).unwrap();
    let kept = synthesize_virtual_outliers(&stats, 50, 5, 17).unwrap();
    assert_eq!(kept, synthesize_virtual_outliers(&stats, 50, 5, 17).unwrap());
    assert_eq!(kept.len(), 10);
    for c in 0..2 {
        let draws: Vec<&[f32]> = all.embeddings.rows().skip(50 * c).take(50).collect();
        let chosen: Vec<&[f32]> = kept.embeddings.rows().skip(5 * c).take(5).collect();
        let dens = |x: &[f32]| stats.class_log_density(x, c).unwrap();
        let worst_kept = chosen.iter().map(|x| dens(x)).fold(f64::NEG_INFINITY, f64::max);
        for d in &draws {
            if !chosen.contains(d) {
                assert!(dens(d) >= worst_kept);
            }
        }
        // kept rows appear in draw order
        let pos: Vec<usize> = chosen.iter().map(|x| draws.iter().position(|d| d == x).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn noise_has_the_requested_moments() {
    let n = 1_000_000;
    let zeros = EmbeddingSet::new(10, vec![0.0; n]).unwrap();
    let noisy = inject_noise(&zeros, 0.016, 3).unwrap();
    let vals: Vec<f64> = noisy.data().iter().map(|&v| v as f64).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((var - 0.016).abs() < 0.05 * 0.016, "variance {var}");
    assert!(mean.abs() < 3.0 * 0.016f64.sqrt() / (n as f64).sqrt(), "mean {mean}");
    assert_eq!(inject_noise(&noisy, 0.0, 1).unwrap(), noisy);
}
