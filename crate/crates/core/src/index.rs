//! Embedding store and exact top-k retrieval.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bin::{put_f32, put_str, put_u32, Reader};
use crate::encoder::{forward, EncoderInput, EncoderSpec, WeightBundle};
use crate::error::{Error, ParseError, Result};
use crate::geom::Dataset;
use crate::style::{
    cosine_distance, extract_grams, reduce, style_distance, Fingerprint, GramEmbedding, LayerWeights,
    NormalizationPolicy, PcaModel,
};

const MAGIC: &str = "UVES";
const VERSION: u32 = 1;

pub const STORE_FILE: &str = "embeddings.uvstore";
pub const WEIGHTS_FILE: &str = "encoder.uvwb";
pub const POLICY_FILE: &str = "policy.json";
pub const PCA_FILE: &str = "pca.uvpc";

/// Immutable set of embeddings sharing one fingerprint.
///
/// Values are held at f32 precision so that a store read back from disk is
/// indistinguishable from the one that was written.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    position: HashMap<String, usize>,
    embeddings: Vec<GramEmbedding<f64>>,
    fingerprint: Fingerprint,
    layer_lengths: Vec<usize>,
}

fn round_f32(mut g: GramEmbedding<f64>) -> GramEmbedding<f64> {
    for l in &mut g.layers {
        l.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    g
}

impl EmbeddingStore {
    pub fn new(entries: Vec<(String, GramEmbedding<f64>)>) -> Result<Self> {
        let Some((_, first)) = entries.first() else {
            return Err(Error::Contract("empty embedding store".into()));
        };
        let fingerprint = first.fingerprint.clone();
        let layer_lengths = first.layer_lengths();
        let mut ids = Vec::with_capacity(entries.len());
        let mut embeddings = Vec::with_capacity(entries.len());
        let mut position = HashMap::new();
        for (i, (id, g)) in entries.into_iter().enumerate() {
            if g.fingerprint != fingerprint {
                return Err(Error::Incompatible(format!(
                    "{id} has fingerprint [{}], store has [{fingerprint}]",
                    g.fingerprint
                )));
            }
            if g.layer_lengths() != layer_lengths {
                return Err(Error::Incompatible(format!(
                    "{id} has layer lengths {:?}, store has {layer_lengths:?}",
                    g.layer_lengths()
                )));
            }
            if position.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate id {id} in store")));
            }
            ids.push(id);
            embeddings.push(round_f32(g));
        }
        Ok(EmbeddingStore {
            ids,
            position,
            embeddings,
            fingerprint,
            layer_lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn layer_lengths(&self) -> &[usize] {
        &self.layer_lengths
    }

    pub fn num_layers(&self) -> usize {
        self.layer_lengths.len()
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.position.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<&GramEmbedding<f64>> {
        Ok(&self.embeddings[self.position(id)?])
    }

    pub fn embedding(&self, i: usize) -> &GramEmbedding<f64> {
        &self.embeddings[i]
    }

    /// Header (fingerprint, counts, lengths, ids, used-sample counts) then one
    /// contiguous f32 block per layer, entries in store order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        put_u32(&mut out, VERSION);
        put_str(&mut out, &serde_json::to_string(&self.fingerprint).expect("fingerprint serializes"));
        put_u32(&mut out, self.len() as u32);
        put_u32(&mut out, self.num_layers() as u32);
        for &n in &self.layer_lengths {
            put_u32(&mut out, n as u32);
        }
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for g in &self.embeddings {
            for &n in &g.n_used {
                put_u32(&mut out, n as u32);
            }
        }
        for l in 0..self.num_layers() {
            for g in &self.embeddings {
                for &v in &g.layers[l] {
                    put_f32(&mut out, v as f32);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ParseError::UnknownVersion { offset: at, version }.into());
        }
        let at = r.offset();
        let fingerprint: Fingerprint =
            serde_json::from_str(&r.string("fingerprint")?).map_err(|e| ParseError::InvalidField {
                offset: at,
                field: "fingerprint",
                detail: e.to_string(),
            })?;
        let n = r.u32("entry count")? as usize;
        let nl = r.u32("layer count")? as usize;
        let lengths = (0..nl)
            .map(|_| r.u32("layer length").map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let ids = (0..n).map(|_| r.string("id")).collect::<Result<Vec<_>, _>>()?;
        let mut embeddings: Vec<GramEmbedding<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let n_used = (0..nl)
                .map(|_| r.u32("used count").map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            embeddings.push(GramEmbedding {
                layers: Vec::with_capacity(nl),
                n_used,
                fingerprint: fingerprint.clone(),
            });
        }
        for &len in &lengths {
            for g in &mut embeddings {
                let v = r.f32s(len, "layer block")?;
                g.layers.push(v.into_iter().map(f64::from).collect());
            }
        }
        r.finish()?;
        Self::new(ids.into_iter().zip(embeddings).collect())
    }
}

/// Encodes one solid: forward pass, normalization and Grams.
pub fn embed_solid(
    s: &crate::geom::UVSolid,
    weights: &WeightBundle<f64>,
    policy: &NormalizationPolicy,
) -> Result<GramEmbedding<f64>> {
    let a = forward(&EncoderInput::from_solid(s), weights)?;
    extract_grams(&a, policy, &weights.fingerprint()).map_err(|e| match e {
        Error::DegenerateLayer { layer, .. } => Error::DegenerateLayer {
            layer,
            solid: Some(s.solid_id.clone()),
        },
        e => e,
    })
}

/// Raw (unreduced) embeddings of every solid, in dataset order.
pub fn embed_dataset(
    ds: &Dataset,
    weights: &WeightBundle<f64>,
    policy: &NormalizationPolicy,
) -> Result<Vec<GramEmbedding<f64>>> {
    ds.solids.iter().map(|s| embed_solid(s, weights, policy)).collect()
}

pub fn build_store(
    ds: &Dataset,
    weights: &WeightBundle<f64>,
    policy: &NormalizationPolicy,
    pca: Option<&PcaModel<f64>>,
) -> Result<EmbeddingStore> {
    let raw = embed_dataset(ds, weights, policy)?;
    let embeddings = match pca {
        Some(m) => raw.iter().map(|g| reduce(g, m)).collect::<Result<Vec<_>>>()?,
        None => raw,
    };
    EmbeddingStore::new(ds.solids.iter().map(|s| s.solid_id.clone()).zip(embeddings).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResults {
    pub query_id: String,
    pub k: usize,
    pub results: Vec<Ranked>,
}

/// Ascending by distance, then by id.
fn rank(mut scored: Vec<(f64, usize)>, ids: &[String], k: usize) -> Vec<Ranked> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| ids[a.1].cmp(&ids[b.1])));
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(d, i)| Ranked {
            id: ids[i].clone(),
            distance: d,
        })
        .collect()
}

/// Nearest neighbours of an arbitrary embedding; `exclude` drops one id.
pub fn topk_embedding(
    store: &EmbeddingStore,
    q: &GramEmbedding<f64>,
    w: &LayerWeights,
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<Ranked>> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if w.len() != store.num_layers() {
        return Err(Error::Contract(format!(
            "{} weights for {} layers",
            w.len(),
            store.num_layers()
        )));
    }
    let mut scored = Vec::with_capacity(store.len());
    for (i, g) in store.embeddings.iter().enumerate() {
        if exclude == Some(store.ids[i].as_str()) {
            continue;
        }
        scored.push((style_distance(q, g, w)?, i));
    }
    Ok(rank(scored, &store.ids, k))
}

pub fn topk(store: &EmbeddingStore, query_id: &str, w: &LayerWeights, k: usize, exclude_self: bool) -> Result<RankedResults> {
    let q = store.get(query_id)?;
    let results = topk_embedding(store, q, w, k, exclude_self.then_some(query_id))?;
    Ok(RankedResults {
        query_id: query_id.to_string(),
        k,
        results,
    })
}

/// All pairwise per-layer distances of a store, for evaluation loops.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    n: usize,
    layers: Vec<Vec<f64>>,
}

impl DistanceTable {
    pub fn new(store: &EmbeddingStore) -> Self {
        let n = store.len();
        let layers = (0..store.num_layers())
            .map(|l| {
                let mut t = vec![0.0; n * n];
                for i in 0..n {
                    for j in i..n {
                        let d = cosine_distance(&store.embeddings[i].layers[l], &store.embeddings[j].layers[l]);
                        t[i * n + j] = d;
                        t[j * n + i] = d;
                    }
                }
                t
            })
            .collect();
        DistanceTable { n, layers }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize, i: usize, j: usize) -> f64 {
        self.layers[l][i * self.n + j]
    }

    pub fn weighted(&self, i: usize, j: usize, w: &LayerWeights) -> f64 {
        let per: Vec<f64> = (0..self.layers.len()).map(|l| self.layer(l, i, j)).collect();
        w.combine(&per)
    }

    /// Indices of the `k` nearest entries to `i` other than `i` itself,
    /// ties broken by id as in [`topk`].
    pub fn neighbours(&self, i: usize, w: &LayerWeights, k: usize, ids: &[String]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = (0..self.n).filter(|&j| j != i).map(|j| (self.weighted(i, j, w), j)).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| ids[a.1].cmp(&ids[b.1])));
        scored.truncate(k);
        scored.into_iter().map(|(_, j)| j).collect()
    }
}

/// Everything `embed` writes into a store directory.
#[derive(Debug, Clone)]
pub struct StoreDir {
    pub store: EmbeddingStore,
    pub weights: WeightBundle<f64>,
    pub policy: NormalizationPolicy,
    pub pca: Option<PcaModel<f64>>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl StoreDir {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(STORE_FILE), &self.store.to_bytes())?;
        write(&dir.join(WEIGHTS_FILE), &crate::encoder::save_weights(&self.weights))?;
        let policy = serde_json::to_vec_pretty(&self.policy).expect("policy serializes");
        write(&dir.join(POLICY_FILE), &policy)?;
        let pca_path = dir.join(PCA_FILE);
        match &self.pca {
            Some(m) => write(&pca_path, &crate::style::save_pca(m))?,
            None if pca_path.exists() => fs::remove_file(&pca_path).map_err(|e| Error::io(&pca_path, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, expected: Option<&EncoderSpec>) -> Result<Self> {
        let dir = dir.as_ref();
        let store = EmbeddingStore::from_bytes(&read(&dir.join(STORE_FILE))?)?;
        let weights = crate::encoder::load_weights(&read(&dir.join(WEIGHTS_FILE))?, expected)?;
        let policy: NormalizationPolicy = serde_json::from_slice(&read(&dir.join(POLICY_FILE))?)
            .map_err(|e| ParseError::Json(format!("{}: {e}", POLICY_FILE)))?;
        let pca_path = dir.join(PCA_FILE);
        let pca = if pca_path.exists() {
            Some(crate::style::load_pca(&read(&pca_path)?)?)
        } else {
            None
        };
        let fp = store.fingerprint();
        if fp.encoder != weights.fingerprint() || fp.policy != policy.fingerprint() {
            return Err(Error::Incompatible(format!(
                "store [{fp}] was not built with the encoder/policy in {}",
                dir.display()
            )));
        }
        if fp.reduction != pca.as_ref().map(|m| m.id.clone()) {
            return Err(Error::Incompatible(format!(
                "store reduction {:?} does not match the PCA model in {}",
                fp.reduction,
                dir.display()
            )));
        }
        Ok(StoreDir {
            store,
            weights,
            policy,
            pca,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::init_weights;
    use crate::style::fit_pca;
    use crate::synth::{generate_dataset, DatasetConfig};

    fn fp() -> Fingerprint {
        Fingerprint {
            encoder: "e".into(),
            policy: "p".into(),
            reduction: None,
        }
    }

    fn random_store(n: usize, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| {
                // coarse values so exact ties actually occur
                let layers = (0..3)
                    .map(|_| (0..4).map(|_| rng.random_range(0..3) as f64).collect())
                    .collect();
                (
                    format!("x{:02}", (i * 7) % n),
                    GramEmbedding {
                        layers,
                        n_used: vec![1, 1, 1],
                        fingerprint: fp(),
                    },
                )
            })
            .collect();
        EmbeddingStore::new(entries).unwrap()
    }

    fn brute_force(store: &EmbeddingStore, q: &str, w: &LayerWeights) -> Vec<Ranked> {
        let qe = store.get(q).unwrap();
        let mut all: Vec<Ranked> = store
            .ids()
            .iter()
            .map(|id| Ranked {
                id: id.clone(),
                distance: style_distance(qe, store.get(id).unwrap(), w).unwrap(),
            })
            .collect();
        all.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap().then(a.id.cmp(&b.id)));
        all
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let store = random_store(23, seed);
            let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let w = LayerWeights::new(raw.iter().map(|v| v / s).collect()).unwrap();
            for k in [1, 5, 23] {
                let q = &store.ids()[(seed as usize) % 23];
                let got = topk(&store, q, &w, k, false).unwrap();
                assert_eq!(got.results, brute_force(&store, q, &w)[..k].to_vec());
                assert_eq!(got, topk(&store, q, &w, k, false).unwrap());
            }
        }
    }

    #[test]
    fn self_first_and_exclusion() {
        let store = random_store(10, 1);
        let w = LayerWeights::uniform(3);
        let q = store.ids()[3].clone();
        let all = topk(&store, &q, &w, 10, false).unwrap();
        assert_eq!(all.results.len(), 10);
        assert!(all.results[0].distance.abs() < 1e-12);
        let ex = topk(&store, &q, &w, 10, true).unwrap();
        assert_eq!(ex.results.len(), 9);
        assert!(ex.results.iter().all(|r| r.id != q));
        assert!(matches!(topk(&store, "nope", &w, 3, false), Err(Error::UnknownId(_))));
        assert!(topk(&store, &q, &w, 0, false).is_err());
    }

    #[test]
    fn duplicate_ranks_first() {
        let mut entries: Vec<(String, GramEmbedding<f64>)> = (0..6)
            .map(|i| {
                (
                    format!("a{i}"),
                    GramEmbedding {
                        layers: vec![vec![1.0, i as f64, 2.0 - i as f64]],
                        n_used: vec![4],
                        fingerprint: fp(),
                    },
                )
            })
            .collect();
        let mut dup = entries[2].1.clone();
        dup.layers[0].iter_mut().for_each(|v| *v *= 3.0);
        entries.push(("zz".into(), dup));
        let store = EmbeddingStore::new(entries).unwrap();
        let r = topk(&store, "a2", &LayerWeights::uniform(1), 1, true).unwrap();
        assert_eq!(r.results[0].id, "zz");
        assert!(r.results[0].distance <= 1e-9);
    }

    #[test]
    fn mixed_fingerprints_are_rejected() {
        let mut a = random_store(2, 0).embedding(0).clone();
        let b = a.clone();
        a.fingerprint.reduction = Some("pca70:x".into());
        let err = EmbeddingStore::new(vec![("a".into(), a), ("b".into(), b)]).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
    }

    #[test]
    fn distance_table_agrees_with_topk() {
        let store = random_store(15, 8);
        let t = DistanceTable::new(&store);
        let w = LayerWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        for i in 0..15 {
            let via_table: Vec<&String> = t.neighbours(i, &w, 10, store.ids()).iter().map(|&j| &store.ids()[j]).collect();
            let via_topk = topk(&store, &store.ids()[i], &w, 10, true).unwrap();
            assert_eq!(via_table, via_topk.results.iter().map(|r| &r.id).collect::<Vec<_>>());
        }
    }

    #[test]
    fn build_save_load_round_trip() {
        let ds = generate_dataset(&DatasetConfig::reference(1, 3)).unwrap();
        let spec = EncoderSpec::with_seed(4);
        let weights = init_weights::<f64>(&spec).unwrap();
        let policy = NormalizationPolicy::default_for(&spec);
        let store = build_store(&ds, &weights, &policy, None).unwrap();
        assert_eq!(store.len(), ds.solids.len());
        assert_eq!(store.layer_lengths(), &[21, 136, 528, 2080, 2080, 2080, 2080]);
        let again = build_store(&ds, &weights, &policy, None).unwrap();
        assert_eq!(store.to_bytes(), again.to_bytes());

        let raw = embed_dataset(&ds, &weights, &policy).unwrap();
        let pca = fit_pca(&raw, 10).unwrap();
        let reduced = build_store(&ds, &weights, &policy, Some(&pca)).unwrap();
        assert_eq!(reduced.layer_lengths(), &[10; 7]);
        assert!(matches!(
            style_distance(&raw[0], reduced.embedding(1), &LayerWeights::uniform(7)),
            Err(Error::Incompatible(_))
        ));

        let dir = std::env::temp_dir().join(format!("uvstyle-store-{}", std::process::id()));
        let sd = StoreDir {
            store: reduced.clone(),
            weights: weights.clone(),
            policy: policy.clone(),
            pca: Some(pca),
        };
        sd.save(&dir).unwrap();
        let back = StoreDir::load(&dir, Some(&spec)).unwrap();
        assert_eq!(back.store, reduced);
        assert_eq!(back.store.to_bytes(), reduced.to_bytes());
        // a store file alone does not make a directory
        fs::remove_file(dir.join(PCA_FILE)).unwrap();
        assert!(matches!(StoreDir::load(&dir, None), Err(Error::Incompatible(_))));
        fs::remove_dir_all(&dir).unwrap();

        let bytes = store.to_bytes();
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Parse(ParseError::UnexpectedEof { .. }))
        ));
    }
}
