//! Linear probes, the few-shot Precision@10 protocol and ablation sweeps.

pub(crate) mod logistic;
mod precision;

use serde::{Deserialize, Serialize};

pub use logistic::{fit_logistic, FitInfo, LogisticModel};
pub use precision::{precision_at_10, sign_test, PrecisionCell, PrecisionReport};

use crate::encoder::{forward, ActivationSet, EncoderInput, WeightBundle};
use crate::error::{Error, Result};
use crate::geom::Dataset;
use crate::index::EmbeddingStore;
use crate::linalg::symmetric_eigen;
use crate::scalar::dot;
use crate::style::{fit_pca, grams_of_normalized, normalize, reduce, Fingerprint, GramEmbedding, LayerNorm, NormalizationPolicy};
use crate::synth::mix64;

pub const DEFAULT_L2_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_grid: DEFAULT_L2_GRID.to_vec(),
            folds: 5,
            seed: 0,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

/// Fold of every example. Within each class, examples are ordered by a seeded
/// hash of their id and dealt round-robin, continuing where the previous class
/// stopped so fold sizes stay balanced.
pub fn stratified_folds(ids: &[String], labels: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if ids.len() != labels.len() {
        return Err(Error::Eval(format!("{} ids but {} labels", ids.len(), labels.len())));
    }
    if folds < 2 {
        return Err(Error::Eval("need at least two folds".into()));
    }
    let classes = class_names(labels);
    let mut out = vec![0; ids.len()];
    let mut next = 0;
    for c in &classes {
        let mut members: Vec<usize> = (0..ids.len()).filter(|&i| &labels[i] == c).collect();
        if members.len() < folds {
            return Err(Error::Eval(format!(
                "class {c:?} has {} examples, fewer than {folds} folds",
                members.len()
            )));
        }
        members.sort_by_key(|&i| (mix64(seed ^ hash_str(&ids[i])), ids[i].clone()));
        for i in members {
            out[i] = next;
            next = (next + 1) % folds;
        }
    }
    Ok(out)
}

fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Sorted distinct labels.
pub fn class_names(labels: &[String]) -> Vec<String> {
    let mut c = labels.to_vec();
    c.sort();
    c.dedup();
    c
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Support-weighted mean of per-class F1 over the classes present in `truth`.
pub fn weighted_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support as f64 * f1;
    }
    total / truth.len().max(1) as f64
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Train-fold preprocessing: centre, scale by one global factor, and project
/// onto the span of the training rows when that is smaller than the input.
/// All three steps commute with rotations of the input, and the projection
/// keeps the L2-regularized optimum unchanged.
struct Preprocess {
    mean: Vec<f64>,
    scale: f64,
    basis: Option<Vec<Vec<f64>>>,
}

impl Preprocess {
    fn fit(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
            .collect();
        let ss: f64 = centred.iter().map(|r| dot(r, r)).sum();
        // root-mean-square per feature of the centred data
        let rms = (ss / (n * d) as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        let basis = (d > n).then(|| {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = dot(&centred[i], &centred[j]);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            let (vals, vecs) = symmetric_eigen(&k, n);
            let top = vals.first().copied().unwrap_or(0.0);
            vals.iter()
                .zip(vecs)
                .take_while(|(&v, _)| v > top * 1e-12 && v > 0.0)
                .map(|(&v, u)| {
                    let mut b = vec![0.0; d];
                    for (r, &ui) in centred.iter().zip(&u) {
                        for (s, &x) in b.iter_mut().zip(r) {
                            *s += ui * x;
                        }
                    }
                    let s = v.sqrt();
                    b.iter_mut().for_each(|x| *x /= s);
                    b
                })
                .collect()
        });
        Preprocess { mean, scale, basis }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = r.iter().zip(&self.mean).map(|(a, m)| (a - m) * self.scale).collect();
        match &self.basis {
            Some(b) => b.iter().map(|v| dot(v, &x)).collect(),
            None => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub name: String,
    pub dims: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation over folds.
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// Regularization strength with the best mean accuracy.
    pub lambda: f64,
    pub fold_accuracy: Vec<f64>,
    pub fold_f1: Vec<f64>,
    /// Largest iteration count any fold needed at the chosen strength.
    pub max_iterations: usize,
}

/// Cross-validated multinomial logistic regression on one feature set.
pub fn linear_probe(features: &[Vec<f64>], ids: &[String], labels: &[String], cfg: &ProbeConfig) -> Result<LayerProbe> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Eval("features and labels differ in length".into()));
    }
    if cfg.l2_grid.is_empty() {
        return Err(Error::Eval("empty regularization grid".into()));
    }
    let classes = class_names(labels);
    if classes.len() < 2 {
        return Err(Error::Eval("need at least two classes".into()));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a class"))
        .collect();
    let fold = stratified_folds(ids, labels, cfg.folds, cfg.seed)?;

    // per fold: preprocessed train/validation sets, shared by every lambda
    let splits: Vec<_> = (0..cfg.folds)
        .map(|k| {
            let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != k).collect();
            let val: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == k).collect();
            let rows: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
            let pre = Preprocess::fit(&rows);
            let xt: Vec<Vec<f64>> = train.iter().map(|&i| pre.apply(&features[i])).collect();
            let xv: Vec<Vec<f64>> = val.iter().map(|&i| pre.apply(&features[i])).collect();
            let yt: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let yv: Vec<usize> = val.iter().map(|&i| y[i]).collect();
            (xt, yt, xv, yv)
        })
        .collect();

    let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>, usize)> = None;
    for &lambda in &cfg.l2_grid {
        let mut accs = Vec::new();
        let mut f1s = Vec::new();
        let mut iters = 0;
        for (xt, yt, xv, yv) in &splits {
            let (m, info) = fit_logistic(xt, yt, classes.len(), lambda, cfg.max_iter, cfg.tol);
            let pred: Vec<usize> = xv.iter().map(|x| m.predict(x)).collect();
            accs.push(accuracy(yv, &pred));
            f1s.push(weighted_f1(yv, &pred, classes.len()));
            iters = iters.max(info.iterations);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // strict comparison keeps the smallest lambda among ties
        if best.as_ref().is_none_or(|b| mean > b.0) {
            best = Some((mean, lambda, accs, f1s, iters));
        }
    }
    let (_, lambda, fold_accuracy, fold_f1, max_iterations) = best.expect("non-empty grid");
    let (accuracy_mean, accuracy_std) = mean_std(&fold_accuracy);
    let (f1_mean, f1_std) = mean_std(&fold_f1);
    Ok(LayerProbe {
        layer: 0,
        name: String::new(),
        dims: features[0].len(),
        accuracy_mean,
        accuracy_std,
        f1_mean,
        f1_std,
        lambda,
        fold_accuracy,
        fold_f1,
        max_iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub label_kind: String,
    pub classes: Vec<String>,
    pub folds: usize,
    pub seed: u64,
    pub l2_grid: Vec<f64>,
    pub layers: Vec<LayerProbe>,
}

impl ProbeReport {
    pub fn best_layer(&self) -> Option<&LayerProbe> {
        self.layers
            .iter()
            .max_by(|a, b| a.accuracy_mean.total_cmp(&b.accuracy_mean).then(b.layer.cmp(&a.layer)))
    }
}

fn layer_features(embeddings: &[&GramEmbedding<f64>], l: usize) -> Vec<Vec<f64>> {
    embeddings.iter().map(|g| g.layers[l].clone()).collect()
}

/// Probes every layer of `embeddings` (aligned with `ids` and `labels`).
pub fn probe_layers(
    embeddings: &[&GramEmbedding<f64>],
    ids: &[String],
    labels: &[String],
    names: &[String],
    label_kind: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let nl = embeddings.first().map(|g| g.num_layers()).unwrap_or(0);
    let layers = (0..nl)
        .map(|l| {
            let mut p = linear_probe(&layer_features(embeddings, l), ids, labels, cfg)?;
            p.layer = l;
            p.name = names.get(l).cloned().unwrap_or_else(|| format!("layer{l}"));
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        label_kind: label_kind.to_string(),
        classes: class_names(labels),
        folds: cfg.folds,
        seed: cfg.seed,
        l2_grid: cfg.l2_grid.clone(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Style,
    Content,
}

/// Labels of the store's entries, in store order.
pub fn store_labels(ds: &Dataset, store: &EmbeddingStore, kind: LabelKind) -> Result<Vec<String>> {
    store
        .ids()
        .iter()
        .map(|id| {
            let s = ds.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            let l = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::Eval(format!("{id} has no labels")))?;
            Ok(match kind {
                LabelKind::Style => l.style.clone(),
                LabelKind::Content => l.content.clone(),
            })
        })
        .collect()
}

pub fn probe_store(ds: &Dataset, store: &EmbeddingStore, names: &[String], kind: LabelKind, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let labels = store_labels(ds, store, kind)?;
    let embs: Vec<&GramEmbedding<f64>> = (0..store.len()).map(|i| store.embedding(i)).collect();
    let tag = match kind {
        LabelKind::Style => "style",
        LabelKind::Content => "content",
    };
    probe_layers(&embs, store.ids(), &labels, names, tag, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layer: usize,
    pub layer_name: String,
    pub policy: String,
    /// Feature length fed to the probe.
    pub dims: usize,
    /// PCA target, `None` for raw Grams.
    pub target: Option<usize>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub notes: Vec<String>,
}

impl AblationReport {
    /// Long format: `layer,policy,dims,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,layer_name,policy,target,dims,metric,value\n");
        for r in &self.rows {
            let target = r.target.map(|t| t.to_string()).unwrap_or_else(|| "raw".into());
            for (metric, v) in [
                ("accuracy_mean", r.accuracy_mean),
                ("accuracy_std", r.accuracy_std),
                ("f1_mean", r.f1_mean),
                ("f1_std", r.f1_std),
                ("lambda", r.lambda),
            ] {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.layer, r.layer_name, r.policy, target, r.dims, metric, v
                ));
            }
        }
        s
    }

    pub fn get(&self, layer: usize, policy: &str, target: Option<usize>) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.policy == policy && r.target == target)
    }
}

/// Per-layer policy applying `kind` wherever it is defined; the second value
/// lists layers where it is not (face re-centering on per-face layers).
fn policy_for(kind: LayerNorm, a: &ActivationSet<f64>, epsilon: f64) -> (NormalizationPolicy, Vec<usize>) {
    let mut skipped = Vec::new();
    let layers = a
        .layouts
        .iter()
        .enumerate()
        .map(|(l, lay)| {
            if kind == LayerNorm::FaceRecenter && *lay != crate::encoder::LayerLayout::Spatial {
                skipped.push(l);
                LayerNorm::None
            } else {
                kind
            }
        })
        .collect();
    (
        NormalizationPolicy {
            layers,
            epsilon,
            recenter_normals: true,
        },
        skipped,
    )
}

/// Linear probes on style labels for every layer under each uniform
/// normalization kind and each PCA target (`None` = raw Grams).
pub fn ablation_sweep(
    ds: &Dataset,
    weights: &WeightBundle<f64>,
    policies: &[LayerNorm],
    reductions: &[Option<usize>],
    cfg: &ProbeConfig,
) -> Result<AblationReport> {
    let ids: Vec<String> = ds.solids.iter().map(|s| s.solid_id.clone()).collect();
    let labels: Vec<String> = ds
        .solids
        .iter()
        .map(|s| {
            s.labels
                .as_ref()
                .map(|l| l.style.clone())
                .ok_or_else(|| Error::Eval(format!("{} has no labels", s.solid_id)))
        })
        .collect::<Result<_>>()?;
    let acts: Vec<ActivationSet<f64>> = ds
        .solids
        .iter()
        .map(|s| forward(&EncoderInput::from_solid(s), weights))
        .collect::<Result<_>>()?;
    let names = weights.spec.layer_names();
    let mut report = AblationReport {
        rows: Vec::new(),
        notes: Vec::new(),
    };
    for &kind in policies {
        let (policy, skipped) = policy_for(kind, &acts[0], 1e-5);
        for &l in &skipped {
            report.notes.push(format!(
                "{} skipped for layer {l} ({}): it has one vector per face",
                kind.tag(),
                names[l]
            ));
        }
        let fp = Fingerprint {
            encoder: weights.fingerprint(),
            policy: policy.fingerprint(),
            reduction: None,
        };
        let raw: Vec<GramEmbedding<f64>> = acts
            .iter()
            .zip(&ids)
            .map(|(a, id)| {
                grams_of_normalized(&normalize(a, &policy)?, fp.clone()).map_err(|e| match e {
                    Error::DegenerateLayer { layer, .. } => Error::DegenerateLayer {
                        layer,
                        solid: Some(id.clone()),
                    },
                    e => e,
                })
            })
            .collect::<Result<_>>()?;
        for &target in reductions {
            let embs: Vec<GramEmbedding<f64>> = match target {
                None => raw.clone(),
                Some(t) => {
                    let m = fit_pca(&raw, t)?;
                    raw.iter().map(|g| reduce(g, &m)).collect::<Result<_>>()?
                }
            };
            let refs: Vec<&GramEmbedding<f64>> = embs.iter().collect();
            for l in (0..names.len()).filter(|l| !skipped.contains(l)) {
                let p = linear_probe(&layer_features(&refs, l), &ids, &labels, cfg)?;
                report.rows.push(AblationRow {
                    layer: l,
                    layer_name: names[l].clone(),
                    policy: kind.tag().to_string(),
                    dims: p.dims,
                    target,
                    accuracy_mean: p.accuracy_mean,
                    accuracy_std: p.accuracy_std,
                    f1_mean: p.f1_mean,
                    f1_std: p.f1_std,
                    lambda: p.lambda,
                });
            }
        }
    }
    Ok(report)
}
