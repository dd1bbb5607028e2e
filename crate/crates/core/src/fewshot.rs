//! Layer energies from exemplars and simplex-constrained layer weights.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{topk_embedding, EmbeddingStore, RankedResults};
use crate::style::{layer_distances, LayerWeights};

/// Positives, explicit negatives and a request for seeded random negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSelection {
    pub positives: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
    #[serde(default)]
    pub auto_negative_count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ExampleSelection {
    pub fn positives_only(positives: Vec<String>) -> Self {
        ExampleSelection {
            positives,
            negatives: Vec::new(),
            auto_negative_count: 0,
            seed: 0,
        }
    }

    /// Store positions of positives and of all negatives, auto-drawn ones last.
    pub fn resolve(&self, store: &EmbeddingStore) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.positives.is_empty() {
            return Err(Error::Contract("at least one positive example is required".into()));
        }
        let pos = self
            .positives
            .iter()
            .map(|id| store.position(id))
            .collect::<Result<Vec<_>>>()?;
        let mut neg = self
            .negatives
            .iter()
            .map(|id| store.position(id))
            .collect::<Result<Vec<_>>>()?;
        if let Some(id) = self.negatives.iter().find(|id| self.positives.contains(id)) {
            return Err(Error::Contract(format!("{id} is both a positive and a negative")));
        }
        neg.extend(draw_negatives(store.len(), &pos, &neg, self.auto_negative_count, self.seed)?);
        Ok((pos, neg))
    }
}

/// `count` positions drawn without replacement from `0..n`, skipping the
/// positives and any negatives already chosen.
pub fn draw_negatives(n: usize, pos: &[usize], neg: &[usize], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let pool: Vec<usize> = (0..n).filter(|i| !pos.contains(i) && !neg.contains(i)).collect();
    if count > pool.len() {
        return Err(Error::Contract(format!(
            "asked for {count} auto-negatives but only {} candidates remain",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool.len(), count).into_iter().map(|k| pool[k]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyVector {
    pub energies: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
}

/// `E_l = c1 Σ_{i≠j} D_l(t_i, t_j) − c2 Σ D_l(t, t')` with pair-count means
/// as constants; an empty sum contributes 0.
pub fn energies_from(
    pos: &[usize],
    neg: &[usize],
    num_layers: usize,
    mut dist: impl FnMut(usize, usize) -> Result<Vec<f64>>,
) -> Result<EnergyVector> {
    if pos.is_empty() {
        return Err(Error::Contract("at least one positive example is required".into()));
    }
    let (p, q) = (pos.len(), neg.len());
    let c1 = if p > 1 { 1.0 / (p * (p - 1)) as f64 } else { 0.0 };
    let c2 = if q > 0 { 1.0 / (p * q) as f64 } else { 0.0 };
    let mut within = vec![0.0; num_layers];
    // ordered pairs i≠j: each unordered pair counted twice
    for (a, &i) in pos.iter().enumerate() {
        for &j in &pos[a + 1..] {
            for (s, d) in within.iter_mut().zip(dist(i, j)?) {
                *s += 2.0 * d;
            }
        }
    }
    let mut across = vec![0.0; num_layers];
    for &i in pos {
        for &j in neg {
            for (s, d) in across.iter_mut().zip(dist(i, j)?) {
                *s += d;
            }
        }
    }
    let energies = within.iter().zip(&across).map(|(a, b)| c1 * a - c2 * b).collect();
    Ok(EnergyVector {
        energies,
        c1,
        c2,
        num_positives: p,
        num_negatives: q,
    })
}

pub fn layer_energies(sel: &ExampleSelection, store: &EmbeddingStore) -> Result<EnergyVector> {
    let (pos, neg) = sel.resolve(store)?;
    energies_from(&pos, &neg, store.num_layers(), |i, j| {
        layer_distances(store.embedding(i), store.embedding(j))
    })
}

fn check_finite(e: &[f64]) -> Result<()> {
    if e.is_empty() {
        return Err(Error::Contract("empty energy vector".into()));
    }
    if let Some(l) = e.iter().position(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("energy of layer {l} is not finite")));
    }
    Ok(())
}

/// Minimizer of `Σ w_l E_l` over the simplex: uniform over the layers that
/// attain `min E` exactly. All-equal energies give uniform weights.
pub fn optimize_weights(e: &[f64]) -> Result<LayerWeights> {
    check_finite(e)?;
    let min = e.iter().copied().fold(f64::INFINITY, f64::min);
    let at_min: Vec<usize> = (0..e.len()).filter(|&l| e[l] == min).collect();
    Ok(LayerWeights::uniform_over(e.len(), &at_min))
}

/// Euclidean projection onto `{w ≥ 0, Σ w = 1}` (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // absorb rounding so the sum is 1 to the last bit we can manage
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for NumericOptions {
    fn default() -> Self {
        NumericOptions {
            max_iter: 10_000,
            tol: 1e-15,
        }
    }
}

/// Projected gradient descent on the simplex from the uniform point.
/// The objective is linear, so the gradient is `E` itself.
pub fn optimize_weights_numeric(e: &[f64], opts: NumericOptions) -> Result<LayerWeights> {
    check_finite(e)?;
    let n = e.len();
    let spread = e.iter().copied().fold(f64::NEG_INFINITY, f64::max) - e.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w = vec![1.0 / n as f64; n];
    if spread > 0.0 {
        let step = 0.5 / spread;
        for _ in 0..opts.max_iter {
            let next = project_simplex(&w.iter().zip(e).map(|(wi, ei)| wi - step * ei).collect::<Vec<_>>());
            let moved = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            w = next;
            if moved <= opts.tol {
                break;
            }
        }
    }
    LayerWeights::new(w)
}

pub fn objective(w: &LayerWeights, e: &[f64]) -> f64 {
    w.combine(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotResult {
    pub weights: LayerWeights,
    pub energies: EnergyVector,
    /// Negatives actually used, explicit first, then auto-drawn.
    pub negatives: Vec<String>,
    pub seed: u64,
    pub results: RankedResults,
}

/// Energies, then weights, then the top-k around `target` (the first positive
/// when absent) under those weights. The target itself is not excluded.
pub fn fewshot_query(
    sel: &ExampleSelection,
    target: Option<&str>,
    k: usize,
    store: &EmbeddingStore,
) -> Result<FewshotResult> {
    let (pos, neg) = sel.resolve(store)?;
    let energies = energies_from(&pos, &neg, store.num_layers(), |i, j| {
        layer_distances(store.embedding(i), store.embedding(j))
    })?;
    let weights = optimize_weights(&energies.energies)?;
    let target = target.unwrap_or(&sel.positives[0]);
    let results = topk_embedding(store, store.get(target)?, &weights, k, None)?;
    Ok(FewshotResult {
        weights,
        energies,
        negatives: neg.iter().map(|&i| store.ids()[i].clone()).collect(),
        seed: sel.seed,
        results: RankedResults {
            query_id: target.to_string(),
            k,
            results,
        },
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::index::topk;
    use crate::style::{layer_distance, Fingerprint, GramEmbedding};

    fn store() -> EmbeddingStore {
        let fp = Fingerprint {
            encoder: "e".into(),
            policy: "p".into(),
            reduction: None,
        };
        let rows = [
            ("a", [[1.0, 0.2, 0.0], [0.3, 1.0, 0.5]]),
            ("a_dup", [[2.0, 0.4, 0.0], [0.6, 2.0, 1.0]]),
            ("b", [[0.9, 0.5, 0.1], [0.0, 1.0, 0.0]]),
            ("c", [[0.0, 0.3, 1.0], [0.4, 0.4, 0.4]]),
            ("d", [[0.5, 0.5, 0.5], [1.0, 0.0, 0.2]]),
        ];
        EmbeddingStore::new(
            rows.iter()
                .map(|(id, l)| {
                    (
                        id.to_string(),
                        GramEmbedding {
                            layers: l.iter().map(|r| r.to_vec()).collect(),
                            n_used: vec![1, 1],
                            fingerprint: fp.clone(),
                        },
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn sel(p: &[&str], n: &[&str]) -> ExampleSelection {
        ExampleSelection {
            positives: p.iter().map(|s| s.to_string()).collect(),
            negatives: n.iter().map(|s| s.to_string()).collect(),
            auto_negative_count: 0,
            seed: 0,
        }
    }

    #[test]
    fn trivial_energies() {
        let s = store();
        assert_eq!(layer_energies(&sel(&["a"], &[]), &s).unwrap().energies, vec![0.0, 0.0]);
        let e = layer_energies(&sel(&["a", "a_dup"], &[]), &s).unwrap();
        assert!(e.energies.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn energy_with_one_negative() {
        let s = store();
        let e = layer_energies(&sel(&["a", "b"], &["c"]), &s).unwrap();
        assert_eq!((e.c1, e.c2), (0.5, 0.5));
        for l in 0..2 {
            let d = |x: &str, y: &str| layer_distance(s.get(x).unwrap(), s.get(y).unwrap(), l).unwrap();
            let want = d("a", "b") - 0.5 * (d("a", "c") + d("b", "c"));
            assert!((e.energies[l] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn selection_errors() {
        let s = store();
        assert!(matches!(layer_energies(&sel(&[], &[]), &s), Err(Error::Contract(_))));
        assert!(matches!(layer_energies(&sel(&["zz"], &[]), &s), Err(Error::UnknownId(_))));
        assert!(matches!(layer_energies(&sel(&["a"], &["a"]), &s), Err(Error::Contract(_))));
        let mut x = sel(&["a"], &[]);
        x.auto_negative_count = 5;
        assert!(layer_energies(&x, &s).is_err());
    }

    #[test]
    fn auto_negatives_are_seeded_and_disjoint() {
        let s = store();
        let mut x = sel(&["a", "b"], &["c"]);
        x.auto_negative_count = 2;
        x.seed = 11;
        let (pos, neg) = x.resolve(&s).unwrap();
        assert_eq!(neg.len(), 3);
        let mut all = pos.clone();
        all.extend(&neg);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 5);
        assert_eq!(x.resolve(&s).unwrap(), (pos, neg));
    }

    #[test]
    fn vertex_solution_examples() {
        let w = optimize_weights(&[3.0, 1.0, 2.0, 5.0, 4.0, 6.0, 7.0]).unwrap();
        assert_eq!(w.as_slice(), LayerWeights::one_hot(7, 1).as_slice());
        assert_eq!(optimize_weights(&[0.0; 7]).unwrap(), LayerWeights::uniform(7));
        let tie = optimize_weights(&[1.0, -2.0, 0.0, -2.0]).unwrap();
        assert_eq!(tie.as_slice(), &[0.0, 0.5, 0.0, 0.5]);
        assert!(optimize_weights(&[1.0, f64::NAN]).is_err());
        assert!(optimize_weights_numeric(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(project_simplex(&[1.0, 1.0]), vec![0.5, 0.5]);
        let p = project_simplex(&[-1.0, 0.5, 0.7]);
        assert!((p[0]).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn fewshot_single_positive_is_uniform_baseline() {
        let s = store();
        let r = fewshot_query(&sel(&["b"], &[]), None, 3, &s).unwrap();
        assert_eq!(r.weights, LayerWeights::uniform(2));
        assert_eq!(r.results, topk(&s, "b", &LayerWeights::uniform(2), 3, false).unwrap());
        let one = fewshot_query(&sel(&["a", "b"], &["c"]), Some("d"), 1, &s).unwrap();
        assert_eq!(one.results.results[0].id, "d");
        assert_eq!(one.results.results[0].distance, 0.0);
    }

    fn optimize_weights_numeric(e: &[f64]) -> Result<LayerWeights> {
        super::optimize_weights_numeric(e, NumericOptions::default())
    }

    proptest! {
        #[test]
        fn properties(e in prop::collection::vec(-3.0f64..3.0, 7), c in 0.01f64..100.0, shift in -10.0f64..10.0) {
            let w = optimize_weights(&e).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            prop_assert_eq!(optimize_weights(&scaled).unwrap(), w.clone());
            let numeric = optimize_weights_numeric(&e).unwrap();
            prop_assert!((objective(&numeric, &e) - objective(&w, &e)).abs() <= 1e-8);
            // shift covariance holds for the objective; the argmin set is
            // compared with a tolerance because adding a constant rounds
            let shifted: Vec<f64> = e.iter().map(|v| v + shift).collect();
            let ws = optimize_weights(&shifted).unwrap();
            prop_assert!((objective(&ws, &e) - objective(&w, &e)).abs() <= 1e-12);
            let j = (c as usize) % 7;
            let mut lowered = e.clone();
            lowered[j] = e.iter().copied().fold(f64::INFINITY, f64::min) - 0.5;
            prop_assert_eq!(optimize_weights(&lowered).unwrap(), LayerWeights::one_hot(7, j));
        }
    }
}
