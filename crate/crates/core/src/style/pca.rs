//! Per-layer PCA of Gram embeddings.

use super::{check_compatible, Fingerprint, GramEmbedding};
use crate::bin::{put_f64, put_str, put_u32, sha256_hex, Reader};
use crate::error::{Error, ParseError, Result};
use crate::linalg::{complete_basis, orthonormalize, symmetric_eigen};
use crate::scalar::dot;
use crate::Scalar;

/// Layers keep `min(raw length, 70)` components by default.
pub const DEFAULT_PCA_TARGET: usize = 70;

const MAGIC: &str = "UVPC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaLayer<T> {
    pub mean: Vec<T>,
    /// Orthonormal rows, ordered by decreasing explained variance.
    pub components: Vec<Vec<T>>,
    /// Sample variance (1/(n-1)) captured by each component.
    pub explained_variance: Vec<T>,
}

impl<T: Scalar> PcaLayer<T> {
    pub fn project(&self, x: &[T]) -> Vec<T> {
        let centred: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        self.components.iter().map(|c| dot(c, &centred)).collect()
    }

    pub fn expand(&self, y: &[T]) -> Vec<T> {
        let mut x = self.mean.clone();
        for (c, &coef) in self.components.iter().zip(y) {
            for (slot, &v) in x.iter_mut().zip(c) {
                *slot += coef * v;
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    pub layers: Vec<PcaLayer<T>>,
    pub target: usize,
    pub corpus_size: usize,
    /// Fingerprint of the raw embeddings the model was fitted on.
    pub source: Fingerprint,
    /// Hash of the serialized model; becomes the `reduction` tag of reduced embeddings.
    pub id: String,
}

fn fit_layer<T: Scalar>(rows: &[&[T]], k: usize) -> PcaLayer<T> {
    let n = rows.len();
    let d = rows[0].len();
    let inv_n = T::one() / T::of(n as f64);
    let mut mean = vec![T::zero(); d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let x: Vec<Vec<T>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();
    let dof = T::of((n.max(2) - 1) as f64);

    let (values, mut vectors) = if d <= n {
        let mut cov = vec![T::zero(); d * d];
        for r in &x {
            for i in 0..d {
                if r[i] == T::zero() {
                    continue;
                }
                for j in i..d {
                    cov[i * d + j] += r[i] * r[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[i * d + j] = cov[j * d + i];
            }
        }
        symmetric_eigen(&cov, d)
    } else {
        // Eigenvectors of X Xᵀ map to those of Xᵀ X through Xᵀ.
        let mut gram = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i..n {
                let v = dot(&x[i], &x[j]);
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
        }
        let (vals, us) = symmetric_eigen(&gram, n);
        let top = vals.first().copied().unwrap_or(T::zero()).max(T::zero());
        let floor = top * T::epsilon() * T::of(n as f64 * 16.0);
        let mut vecs = Vec::new();
        let mut kept = Vec::new();
        for (val, u) in vals.into_iter().zip(us) {
            if val <= floor || val <= T::zero() {
                break;
            }
            let mut v = vec![T::zero(); d];
            for (r, &ui) in x.iter().zip(&u) {
                for (slot, &xv) in v.iter_mut().zip(r) {
                    *slot += ui * xv;
                }
            }
            let s = val.sqrt();
            v.iter_mut().for_each(|e| *e /= s);
            vecs.push(v);
            kept.push(val);
        }
        (kept, vecs)
    };

    vectors.truncate(k);
    let kept = orthonormalize(&mut vectors);
    let mut values: Vec<T> = kept.iter().map(|&i| values[i]).collect();
    complete_basis(&mut vectors, d, k);
    values.resize(vectors.len(), T::zero());
    // Deterministic orientation: largest-magnitude entry positive.
    for v in &mut vectors {
        let pivot = v
            .iter()
            .copied()
            .fold(T::zero(), |best, e| if e.abs() > best.abs() { e } else { best });
        if pivot < T::zero() {
            v.iter_mut().for_each(|e| *e = -*e);
        }
    }
    let explained_variance = values.into_iter().map(|v| v.max(T::zero()) / dof).collect();
    PcaLayer {
        mean,
        components: vectors,
        explained_variance,
    }
}

/// Fits one PCA per layer keeping `min(raw length, target)` components.
pub fn fit_pca<T: Scalar>(corpus: &[GramEmbedding<T>], target: usize) -> Result<PcaModel<T>> {
    if corpus.len() < 2 {
        return Err(Error::Contract("PCA needs at least two embeddings".into()));
    }
    if target == 0 {
        return Err(Error::Contract("PCA target must be positive".into()));
    }
    let first = &corpus[0];
    if first.fingerprint.reduction.is_some() {
        return Err(Error::Incompatible("PCA must be fitted on raw embeddings".into()));
    }
    for g in corpus {
        check_compatible(first, g)?;
    }
    let layers = (0..first.num_layers())
        .map(|l| {
            let rows: Vec<&[T]> = corpus.iter().map(|g| g.layers[l].as_slice()).collect();
            fit_layer(&rows, rows[0].len().min(target))
        })
        .collect();
    let mut model = PcaModel {
        layers,
        target,
        corpus_size: corpus.len(),
        source: first.fingerprint.clone(),
        id: String::new(),
    };
    model.id = format!("pca{}:{}", target, &sha256_hex(&save_pca(&model))[..16]);
    Ok(model)
}

/// Projects a raw embedding onto the model's components.
pub fn reduce<T: Scalar>(g: &GramEmbedding<T>, m: &PcaModel<T>) -> Result<GramEmbedding<T>> {
    if g.fingerprint != m.source {
        return Err(Error::Incompatible(format!(
            "embedding [{}] does not match PCA source [{}]",
            g.fingerprint, m.source
        )));
    }
    let lens: Vec<usize> = m.layers.iter().map(|l| l.mean.len()).collect();
    if g.layer_lengths() != lens {
        return Err(Error::Incompatible(format!(
            "layer lengths {:?} vs PCA {:?}",
            g.layer_lengths(),
            lens
        )));
    }
    Ok(GramEmbedding {
        layers: g.layers.iter().zip(&m.layers).map(|(x, p)| p.project(x)).collect(),
        n_used: g.n_used.clone(),
        fingerprint: Fingerprint {
            reduction: Some(m.id.clone()),
            ..g.fingerprint.clone()
        },
    })
}

impl<T: Scalar> PcaModel<T> {
    /// Maps a reduced embedding back into raw Gram space.
    pub fn expand(&self, g: &GramEmbedding<T>) -> Result<Vec<Vec<T>>> {
        if g.fingerprint.reduction.as_deref() != Some(self.id.as_str()) {
            return Err(Error::Incompatible("embedding was not reduced by this model".into()));
        }
        Ok(g.layers.iter().zip(&self.layers).map(|(y, p)| p.expand(y)).collect())
    }

    pub fn reduced_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.components.len()).collect()
    }
}

/// `UVPC` file: magic, version, source fingerprint, target, corpus size,
/// then per layer d, k, mean, components and explained variance as f64.
pub fn save_pca<T: Scalar>(m: &PcaModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    put_u32(&mut out, VERSION);
    put_str(&mut out, &serde_json::to_string(&m.source).expect("fingerprint serializes"));
    put_u32(&mut out, m.target as u32);
    put_u32(&mut out, m.corpus_size as u32);
    put_u32(&mut out, m.layers.len() as u32);
    for l in &m.layers {
        put_u32(&mut out, l.mean.len() as u32);
        put_u32(&mut out, l.components.len() as u32);
        for v in l.mean.iter().chain(l.components.iter().flatten()).chain(&l.explained_variance) {
            put_f64(&mut out, v.as_f64());
        }
    }
    out
}

pub fn load_pca<T: Scalar>(bytes: &[u8]) -> Result<PcaModel<T>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ParseError::UnknownVersion { offset: at, version }.into());
    }
    let at = r.offset();
    let source: Fingerprint = serde_json::from_str(&r.string("source fingerprint")?).map_err(|e| {
        ParseError::InvalidField {
            offset: at,
            field: "source fingerprint",
            detail: e.to_string(),
        }
    })?;
    let target = r.u32("target")? as usize;
    let corpus_size = r.u32("corpus_size")? as usize;
    let nl = r.u32("layer count")? as usize;
    let mut layers = Vec::new();
    for _ in 0..nl {
        let d = r.u32("layer dim")? as usize;
        let k = r.u32("component count")? as usize;
        if k > d {
            return Err(ParseError::InvalidField {
                offset: r.offset(),
                field: "component count",
                detail: format!("{k} components in dimension {d}"),
            }
            .into());
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
        let mean = cast(r.f64s(d, "mean")?);
        let components = (0..k)
            .map(|_| r.f64s(d, "components").map(cast))
            .collect::<Result<Vec<_>, _>>()?;
        let explained_variance = cast(r.f64s(k, "explained variance")?);
        layers.push(PcaLayer {
            mean,
            components,
            explained_variance,
        });
    }
    r.finish()?;
    let mut m = PcaModel {
        layers,
        target,
        corpus_size,
        source,
        id: String::new(),
    };
    m.id = format!("pca{}:{}", target, &sha256_hex(bytes)[..16]);
    Ok(m)
}
