//! Triangle previews of UV grids for display.

use serde::{Deserialize, Serialize};

use uvstyle::geom::{UVSolid, GRID, SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshPreview {
    pub solid_id: String,
    /// Positions of mask-1 samples only.
    pub vertices: Vec<[f32; 3]>,
    pub normals: Vec<[f32; 3]>,
    /// Face of each vertex.
    pub vertex_faces: Vec<u32>,
    pub triangles: Vec<[u32; 3]>,
}

/// Each grid cell is split along its `(0,0)-(1,1)` diagonal; a triangle is
/// kept when all three of its corners are visible.
pub fn mesh_preview(s: &UVSolid) -> MeshPreview {
    let mut m = MeshPreview {
        solid_id: s.solid_id.clone(),
        vertices: Vec::new(),
        normals: Vec::new(),
        vertex_faces: Vec::new(),
        triangles: Vec::new(),
    };
    for f in &s.faces {
        let mut slot = [u32::MAX; SAMPLES];
        for (k, v) in slot.iter_mut().enumerate() {
            if f.visible(k) {
                *v = m.vertices.len() as u32;
                m.vertices.push(f.position(k));
                m.normals.push(f.normal(k));
                m.vertex_faces.push(f.face_id as u32);
            }
        }
        for iu in 0..GRID - 1 {
            for iv in 0..GRID - 1 {
                let c = |du, dv| slot[(iu + du) * GRID + iv + dv];
                let (a, b, cc, d) = (c(0, 0), c(1, 0), c(1, 1), c(0, 1));
                for t in [[a, b, cc], [a, cc, d]] {
                    if t.iter().all(|&v| v != u32::MAX) {
                        m.triangles.push(t);
                    }
                }
            }
        }
    }
    m
}
