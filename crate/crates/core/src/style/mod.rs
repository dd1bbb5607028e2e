//! Normalization, Gram extraction and layer-wise cosine style distances.

mod pca;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use pca::{fit_pca, load_pca, reduce, save_pca, PcaLayer, PcaModel, DEFAULT_PCA_TARGET};

use crate::encoder::{ActivationSet, EncoderSpec, LayerLayout};
use crate::error::{Error, Result};
use crate::scalar::{dot, norm};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNorm {
    /// Per-face, per-channel mean subtraction over visible samples.
    FaceRecenter,
    /// Per-channel standardization over the whole solid.
    InstanceNorm,
    None,
}

impl LayerNorm {
    pub fn tag(self) -> &'static str {
        match self {
            LayerNorm::FaceRecenter => "face_recenter",
            LayerNorm::InstanceNorm => "instance_norm",
            LayerNorm::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    pub layers: Vec<LayerNorm>,
    /// Floor added to the standard deviation by instance normalization.
    pub epsilon: f64,
    /// Whether face re-centering of the feature layer also applies to normals.
    pub recenter_normals: bool,
}

impl NormalizationPolicy {
    /// Face re-centering on spatial layers, instance normalization on per-face layers.
    pub fn default_for(spec: &EncoderSpec) -> Self {
        let ns = spec.num_spatial();
        NormalizationPolicy {
            layers: (0..spec.num_layers())
                .map(|l| if l < ns { LayerNorm::FaceRecenter } else { LayerNorm::InstanceNorm })
                .collect(),
            epsilon: 1e-5,
            recenter_normals: true,
        }
    }

    pub fn uniform(kind: LayerNorm, num_layers: usize) -> Self {
        NormalizationPolicy {
            layers: vec![kind; num_layers],
            epsilon: 1e-5,
            recenter_normals: true,
        }
    }

    pub fn check(&self, layouts: &[LayerLayout]) -> Result<()> {
        if self.layers.len() != layouts.len() {
            return Err(Error::Policy(format!(
                "policy covers {} layers, activations have {}",
                self.layers.len(),
                layouts.len()
            )));
        }
        for (l, (n, lay)) in self.layers.iter().zip(layouts).enumerate() {
            if *n == LayerNorm::FaceRecenter && *lay != LayerLayout::Spatial {
                return Err(Error::Policy(format!(
                    "face re-centering needs per-sample maps; layer {l} has one vector per face"
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let tags: Vec<&str> = self.layers.iter().map(|l| l.tag()).collect();
        format!(
            "{};eps={:e};normals={}",
            tags.join(","),
            self.epsilon,
            u8::from(self.recenter_normals)
        )
    }
}

/// Identifies the pipeline that produced an embedding; distances are only
/// defined between embeddings with equal fingerprints.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    pub encoder: String,
    pub policy: String,
    pub reduction: Option<String>,
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.encoder, self.policy)?;
        if let Some(r) = &self.reduction {
            write!(f, " | {r}")?;
        }
        Ok(())
    }
}

/// Per-layer flattened upper-triangle Gram vectors of one solid.
#[derive(Debug, Clone, PartialEq)]
pub struct GramEmbedding<T> {
    pub layers: Vec<Vec<T>>,
    pub n_used: Vec<usize>,
    pub fingerprint: Fingerprint,
}

impl<T: Scalar> GramEmbedding<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn cast<U: Scalar>(&self) -> GramEmbedding<U> {
        GramEmbedding {
            layers: self
                .layers
                .iter()
                .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect())
                .collect(),
            n_used: self.n_used.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

pub fn triu_len(d: usize) -> usize {
    d * (d + 1) / 2
}

fn recenter_face<T: Scalar>(a: &ActivationSet<T>, l: usize, channels: usize, out: &mut [T]) {
    let d = a.dims[l];
    let per = a.entries(l) / a.num_faces;
    for f in 0..a.num_faces {
        let rows = f * per..(f + 1) * per;
        let used: Vec<usize> = rows.filter(|&e| a.is_used(l, e)).collect();
        if used.is_empty() {
            continue;
        }
        let inv = T::one() / T::of(used.len() as f64);
        for c in 0..channels {
            let mean = used.iter().map(|&e| out[e * d + c]).sum::<T>() * inv;
            for &e in &used {
                out[e * d + c] -= mean;
            }
        }
    }
}

fn instance_norm<T: Scalar>(a: &ActivationSet<T>, l: usize, eps: T, out: &mut [T]) {
    let d = a.dims[l];
    let used: Vec<usize> = (0..a.entries(l)).filter(|&e| a.is_used(l, e)).collect();
    let inv = T::one() / T::of(used.len() as f64);
    for c in 0..d {
        let mean = used.iter().map(|&e| out[e * d + c]).sum::<T>() * inv;
        let var = used.iter().map(|&e| (out[e * d + c] - mean).powi(2)).sum::<T>() * inv;
        let denom = var.sqrt() + eps;
        for &e in &used {
            out[e * d + c] = (out[e * d + c] - mean) / denom;
        }
    }
}

/// Normalized copy of `a`; entries excluded by the mask are zeroed since they
/// never contribute to any statistic.
pub fn normalize<T: Scalar>(a: &ActivationSet<T>, p: &NormalizationPolicy) -> Result<ActivationSet<T>> {
    p.check(&a.layouts)?;
    let mut out = a.clone();
    for l in 0..a.num_layers() {
        let d = a.dims[l];
        let buf = &mut out.layers[l];
        match p.layers[l] {
            LayerNorm::None => {}
            LayerNorm::FaceRecenter => {
                let channels = if l == 0 && !p.recenter_normals { 3 } else { d };
                recenter_face(a, l, channels, buf);
            }
            LayerNorm::InstanceNorm => instance_norm(a, l, T::of(p.epsilon), buf),
        }
        for e in 0..a.entries(l) {
            if !a.is_used(l, e) {
                buf[e * d..(e + 1) * d].iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
    Ok(out)
}

/// `triu((1/N) Σ_n φ_n φ_nᵀ)` over the given rows, diagonal included.
///
/// Rows are accumulated in a canonical (sorted) order, so the result is
/// bit-for-bit independent of the order they arrive in.
pub fn gram_triu<'a, T: Scalar>(rows: impl Iterator<Item = &'a [T]>, d: usize) -> Vec<T> {
    let mut rows: Vec<&[T]> = rows.collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut g = vec![T::zero(); triu_len(d)];
    let n = rows.len();
    for r in rows {
        let mut off = 0;
        for i in 0..d {
            let ri = r[i];
            if ri != T::zero() {
                for (slot, &rj) in g[off..off + d - i].iter_mut().zip(&r[i..]) {
                    *slot += ri * rj;
                }
            }
            off += d - i;
        }
    }
    if n > 0 {
        let inv = T::one() / T::of(n as f64);
        g.iter_mut().for_each(|v| *v *= inv);
    }
    g
}

/// Gram embedding of already normalized activations.
pub fn grams_of_normalized<T: Scalar>(a: &ActivationSet<T>, fingerprint: Fingerprint) -> Result<GramEmbedding<T>> {
    let mut layers = Vec::with_capacity(a.num_layers());
    let mut n_used = Vec::with_capacity(a.num_layers());
    for l in 0..a.num_layers() {
        let rows = (0..a.entries(l)).filter(|&e| a.is_used(l, e)).map(|e| a.row(l, e));
        let g = gram_triu(rows, a.dims[l]);
        if norm(&g) == T::zero() {
            return Err(Error::DegenerateLayer { layer: l, solid: None });
        }
        layers.push(g);
        n_used.push(a.n_used(l));
    }
    Ok(GramEmbedding {
        layers,
        n_used,
        fingerprint,
    })
}

/// Normalizes per `p`, drops masked samples and flattens each layer's Gram.
pub fn extract_grams<T: Scalar>(
    a: &ActivationSet<T>,
    p: &NormalizationPolicy,
    encoder_fingerprint: &str,
) -> Result<GramEmbedding<T>> {
    let normed = normalize(a, p)?;
    grams_of_normalized(
        &normed,
        Fingerprint {
            encoder: encoder_fingerprint.to_string(),
            policy: p.fingerprint(),
            reduction: None,
        },
    )
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`. A zero vector is treated as orthogonal to everything.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::one();
    }
    let d = T::one() - dot(a, b) / (na * nb);
    d.max(T::zero()).min(T::of(2.0))
}

pub(crate) fn check_compatible<T: Scalar>(a: &GramEmbedding<T>, b: &GramEmbedding<T>) -> Result<()> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Incompatible(format!(
            "fingerprints differ: [{}] vs [{}]",
            a.fingerprint, b.fingerprint
        )));
    }
    if a.layer_lengths() != b.layer_lengths() {
        return Err(Error::Incompatible(format!(
            "layer lengths differ: {:?} vs {:?}",
            a.layer_lengths(),
            b.layer_lengths()
        )));
    }
    Ok(())
}

pub fn layer_distance<T: Scalar>(a: &GramEmbedding<T>, b: &GramEmbedding<T>, l: usize) -> Result<T> {
    check_compatible(a, b)?;
    let (x, y) = a
        .layers
        .get(l)
        .zip(b.layers.get(l))
        .ok_or_else(|| Error::Contract(format!("layer {l} out of range")))?;
    Ok(cosine_distance(x, y))
}

pub fn layer_distances<T: Scalar>(a: &GramEmbedding<T>, b: &GramEmbedding<T>) -> Result<Vec<T>> {
    check_compatible(a, b)?;
    Ok(a.layers.iter().zip(&b.layers).map(|(x, y)| cosine_distance(x, y)).collect())
}

pub fn style_distance<T: Scalar>(a: &GramEmbedding<T>, b: &GramEmbedding<T>, w: &LayerWeights) -> Result<T> {
    if w.len() != a.num_layers() {
        return Err(Error::Contract(format!(
            "{} weights for {} layers",
            w.len(),
            a.num_layers()
        )));
    }
    let d = layer_distances(a, b)?;
    Ok(w.combine(&d))
}

/// Layer weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LayerWeights(Vec<f64>);

pub const SIMPLEX_TOL: f64 = 1e-9;

impl LayerWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Contract("empty weight vector".into()));
        }
        if let Some((l, v)) = w.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < -SIMPLEX_TOL) {
            return Err(Error::Contract(format!("weight {l} = {v} is negative or non-finite")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Contract(format!("weights sum to {sum}, not 1")));
        }
        Ok(LayerWeights(w))
    }

    pub fn uniform(n: usize) -> Self {
        LayerWeights(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        LayerWeights(w)
    }

    /// Equal weight on `layers`, zero elsewhere.
    pub fn uniform_over(n: usize, layers: &[usize]) -> Self {
        let mut w = vec![0.0; n];
        for &l in layers {
            w[l] = 1.0 / layers.len() as f64;
        }
        LayerWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn combine<T: Scalar>(&self, per_layer: &[T]) -> T {
        self.0
            .iter()
            .zip(per_layer)
            .fold(T::zero(), |acc, (&w, &d)| acc + T::of(w) * d)
    }
}

impl TryFrom<Vec<f64>> for LayerWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LayerWeights::new(v)
    }
}

impl From<LayerWeights> for Vec<f64> {
    fn from(w: LayerWeights) -> Self {
        w.0
    }
}
