//! `.uvsolid` binary grids and the JSON dataset manifest.
//!
//! Binary layout (little endian): magic `UVSB`, u32 version, u32 face count F,
//! u32 adjacency count E, E pairs of u32, then F blocks of 700 f32.

use std::fs;
use std::path::Path;

use super::{Dataset, Manifest, UVFace, UVSolid, FACE_LEN, SAMPLES};
use crate::bin::{put_f32, put_u32, Reader};
use crate::error::{Error, ParseError};

pub const SOLID_MAGIC: &str = "UVSB";
pub const SOLID_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.manifest.json";
const SOLIDS_DIR: &str = "solids";

pub fn write_solid(s: &UVSolid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + s.adjacency.len() * 8 + s.faces.len() * FACE_LEN * 4);
    out.extend_from_slice(SOLID_MAGIC.as_bytes());
    put_u32(&mut out, SOLID_VERSION);
    put_u32(&mut out, s.faces.len() as u32);
    put_u32(&mut out, s.adjacency.len() as u32);
    for &(a, b) in &s.adjacency {
        put_u32(&mut out, a as u32);
        put_u32(&mut out, b as u32);
    }
    for f in &s.faces {
        for &v in &f.grid {
            put_f32(&mut out, v);
        }
    }
    out
}

/// Parses a `.uvsolid` blob. The format carries no id, so the caller names the solid.
pub fn read_solid(solid_id: &str, bytes: &[u8]) -> Result<UVSolid, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(SOLID_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != SOLID_VERSION {
        return Err(ParseError::UnknownVersion { offset: at, version });
    }
    let face_count = r.u32("face_count")? as usize;
    let edge_count = r.u32("adjacency_count")? as usize;
    let mut adjacency = Vec::with_capacity(edge_count.min(1 << 16));
    for _ in 0..edge_count {
        let a = r.u32("adjacency pair")? as usize;
        let b = r.u32("adjacency pair")? as usize;
        adjacency.push((a, b));
    }
    let remaining = bytes.len() - r.offset();
    let expected = face_count * FACE_LEN * 4;
    if remaining != expected && face_count > 0 && remaining % face_count == 0 {
        let per_face = remaining / face_count;
        if per_face % (super::CHANNELS * 4) == 0 {
            let samples = per_face / (super::CHANNELS * 4);
            return Err(ParseError::GridShape(format!(
                "expected {SAMPLES} samples (10×10) per face at byte {}, found {samples}",
                r.offset()
            )));
        }
    }
    let mut faces = Vec::with_capacity(face_count.min(1 << 12));
    for face_id in 0..face_count {
        let grid = r.f32s(FACE_LEN, "face grid")?;
        faces.push(UVFace { face_id, grid });
    }
    r.finish()?;
    Ok(UVSolid {
        solid_id: solid_id.to_string(),
        faces,
        adjacency,
        labels: None,
    })
}

pub fn write_manifest(m: &Manifest) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(m).expect("manifest serializes");
    s.push(b'\n');
    s
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest, ParseError> {
    let m: Manifest = serde_json::from_slice(bytes).map_err(|e| ParseError::Json(e.to_string()))?;
    if m.version != SOLID_VERSION {
        return Err(ParseError::UnknownVersion {
            offset: 0,
            version: m.version,
        });
    }
    Ok(m)
}

fn solid_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(SOLIDS_DIR).join(format!("{id}.uvsolid"))
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> crate::Result<()> {
    let dir = dir.as_ref();
    let solids = dir.join(SOLIDS_DIR);
    fs::create_dir_all(&solids).map_err(|e| Error::io(&solids, e))?;
    for s in &ds.solids {
        let p = solid_path(dir, &s.solid_id);
        fs::write(&p, write_solid(s)).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, write_manifest(&ds.manifest)).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> crate::Result<Dataset> {
    let dir = dir.as_ref();
    let p = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    let mut solids = Vec::with_capacity(manifest.solids.len());
    for id in &manifest.solids {
        let p = solid_path(dir, id);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let mut s = read_solid(id, &bytes)?;
        s.labels = manifest.labels.get(id).cloned();
        solids.push(s);
    }
    let ds = Dataset { solids, manifest };
    ds.check()?;
    Ok(ds)
}
