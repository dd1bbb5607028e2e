//! UV-grid boundary-representation data model.
//!
//! A solid is a list of faces, each sampled on a fixed 10×10 grid in its
//! parameter domain. Every sample carries 7 channels: position (xyz), unit
//! normal and a visibility mask that is 1 on the trimmed face and 0 outside.
//! Faces are linked by an undirected face-adjacency graph.

mod format;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use format::{
    load_dataset, read_manifest, read_solid, save_dataset, write_manifest, write_solid,
    MANIFEST_FILE, SOLID_MAGIC, SOLID_VERSION,
};
pub use validate::{validate_solid, ValidationReport, Violation, ViolationKind};

/// Samples along each parametric direction.
pub const GRID: usize = 10;
/// Samples per face.
pub const SAMPLES: usize = GRID * GRID;
/// Scalars per sample: xyz, normal, mask.
pub const CHANNELS: usize = 7;
/// Scalars per face block.
pub const FACE_LEN: usize = SAMPLES * CHANNELS;

pub const CH_POS: usize = 0;
pub const CH_NORMAL: usize = 3;
pub const CH_MASK: usize = 6;

/// One face sampled on a 10×10 UV grid.
///
/// Storage is row-major over u, then v, with the 7 channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct UVFace {
    pub face_id: usize,
    pub grid: Vec<f32>,
}

impl UVFace {
    pub fn zeros(face_id: usize) -> Self {
        UVFace {
            face_id,
            grid: vec![0.0; FACE_LEN],
        }
    }

    #[inline]
    pub fn index(iu: usize, iv: usize) -> usize {
        iu * GRID + iv
    }

    #[inline]
    pub fn sample(&self, s: usize) -> &[f32] {
        &self.grid[s * CHANNELS..(s + 1) * CHANNELS]
    }

    #[inline]
    pub fn sample_mut(&mut self, s: usize) -> &mut [f32] {
        &mut self.grid[s * CHANNELS..(s + 1) * CHANNELS]
    }

    pub fn position(&self, s: usize) -> [f32; 3] {
        let c = self.sample(s);
        [c[0], c[1], c[2]]
    }

    pub fn normal(&self, s: usize) -> [f32; 3] {
        let c = self.sample(s);
        [c[3], c[4], c[5]]
    }

    pub fn mask(&self, s: usize) -> f32 {
        self.sample(s)[CH_MASK]
    }

    pub fn visible(&self, s: usize) -> bool {
        self.mask(s) == 1.0
    }

    pub fn visible_count(&self) -> usize {
        (0..SAMPLES).filter(|&s| self.visible(s)).count()
    }
}

/// Content and style labels; used for evaluation only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Labels {
    pub content: String,
    pub style: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UVSolid {
    pub solid_id: String,
    pub faces: Vec<UVFace>,
    /// Undirected face pairs, canonically `(min, max)` sorted and unique.
    pub adjacency: Vec<(usize, usize)>,
    pub labels: Option<Labels>,
}

impl UVSolid {
    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Count of mask-1 samples over all faces.
    pub fn visible_count(&self) -> usize {
        self.faces.iter().map(UVFace::visible_count).sum()
    }

    /// Axis-aligned bounds over all samples (masked or not).
    pub fn bounds(&self) -> ([f32; 3], [f32; 3]) {
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for f in &self.faces {
            for s in 0..SAMPLES {
                let p = f.position(s);
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (0..3)
            .map(|k| (hi[k] as f64 - lo[k] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Neighbour lists indexed by face id.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.faces.len()];
        for &(a, b) in &self.adjacency {
            if a < out.len() && b < out.len() && a != b {
                out[a].push(b);
                out[b].push(a);
            }
        }
        out
    }
}

/// Sorts pairs as `(min, max)` and removes duplicates.
pub fn canonical_adjacency(pairs: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut v: Vec<_> = pairs
        .into_iter()
        .map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Per-label counts recorded in a manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub total: usize,
    pub content: BTreeMap<String, usize>,
    pub style: BTreeMap<String, usize>,
}

impl LabelCounts {
    pub fn tally<'a>(labels: impl IntoIterator<Item = Option<&'a Labels>>, total: usize) -> Self {
        let mut c = LabelCounts {
            total,
            ..Default::default()
        };
        for l in labels.into_iter().flatten() {
            *c.content.entry(l.content.clone()).or_default() += 1;
            *c.style.entry(l.style.clone()).or_default() += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub solids: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, Labels>,
    #[serde(default)]
    pub counts: LabelCounts,
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub solids: Vec<UVSolid>,
    pub manifest: Manifest,
}

impl Dataset {
    /// Builds a dataset and a manifest that agrees with it.
    pub fn new(solids: Vec<UVSolid>, generator: serde_json::Value) -> Self {
        let labels = solids
            .iter()
            .filter_map(|s| s.labels.clone().map(|l| (s.solid_id.clone(), l)))
            .collect();
        let counts = LabelCounts::tally(solids.iter().map(|s| s.labels.as_ref()), solids.len());
        let manifest = Manifest {
            version: SOLID_VERSION,
            solids: solids.iter().map(|s| s.solid_id.clone()).collect(),
            labels,
            counts,
            generator,
        };
        Dataset { solids, manifest }
    }

    pub fn get(&self, id: &str) -> Option<&UVSolid> {
        self.solids.iter().find(|s| s.solid_id == id)
    }

    /// Checks id uniqueness and that the manifest agrees with the solids.
    pub fn check(&self) -> crate::Result<()> {
        let mut ids: Vec<&str> = self.solids.iter().map(|s| s.solid_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(crate::Error::Config(format!("duplicate solid id {}", w[0])));
        }
        let recount = LabelCounts::tally(self.solids.iter().map(|s| s.labels.as_ref()), self.solids.len());
        if recount != self.manifest.counts || self.manifest.solids.len() != self.solids.len() {
            return Err(crate::Error::Config(
                "manifest counts disagree with dataset contents".into(),
            ));
        }
        Ok(())
    }
}
