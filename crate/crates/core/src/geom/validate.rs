use std::collections::BTreeSet;
use std::fmt;

use super::{UVSolid, CHANNELS, CH_MASK, CH_NORMAL, FACE_LEN, SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    GridShape,
    MaskNotBinary,
    NormalNotUnit,
    NoVisibleSample,
    NonFinite,
    FaceIdsNotDense,
    DanglingAdjacency,
    SelfLoop,
    DuplicatePair,
    Disconnected,
}

impl ViolationKind {
    pub fn describe(self) -> &'static str {
        match self {
            ViolationKind::GridShape => "grid shape",
            ViolationKind::MaskNotBinary => "mask not binary",
            ViolationKind::NormalNotUnit => "normal not unit",
            ViolationKind::NoVisibleSample => "no visible sample",
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::FaceIdsNotDense => "face ids not dense",
            ViolationKind::DanglingAdjacency => "dangling adjacency",
            ViolationKind::SelfLoop => "self-loop",
            ViolationKind::DuplicatePair => "duplicate pair",
            ViolationKind::Disconnected => "disconnected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub face_id: Option<usize>,
    pub channel: Option<&'static str>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.describe())?;
        if let Some(id) = self.face_id {
            write!(f, " (face {id}")?;
            if let Some(c) = self.channel {
                write!(f, ", channel {c}")?;
            }
            write!(f, ")")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, face_id: Option<usize>, channel: Option<&'static str>, detail: String) {
        self.violations.push(Violation {
            kind,
            face_id,
            channel,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

const NORMAL_TOL: f64 = 1e-6;

/// Lists every violated data-model invariant; an empty report means the solid is valid.
pub fn validate_solid(s: &UVSolid) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let nf = s.faces.len();

    for (i, face) in s.faces.iter().enumerate() {
        if face.face_id != i {
            rep.push(
                ViolationKind::FaceIdsNotDense,
                Some(face.face_id),
                None,
                format!("face at position {i} has id {}", face.face_id),
            );
        }
        if face.grid.len() != FACE_LEN {
            rep.push(
                ViolationKind::GridShape,
                Some(face.face_id),
                None,
                format!("expected {FACE_LEN} scalars, found {}", face.grid.len()),
            );
            continue;
        }
        let mut bad_mask = 0;
        let mut bad_normal = 0;
        let mut non_finite = 0;
        let mut visible = 0;
        let mut worst_normal = 1.0f64;
        let mut worst_dev = 0.0f64;
        for sm in 0..SAMPLES {
            let c = &face.grid[sm * CHANNELS..(sm + 1) * CHANNELS];
            if c.iter().any(|v| !v.is_finite()) {
                non_finite += 1;
                continue;
            }
            let m = c[CH_MASK];
            if m != 0.0 && m != 1.0 {
                bad_mask += 1;
            }
            if m == 1.0 {
                visible += 1;
                let n = &c[CH_NORMAL..CH_NORMAL + 3];
                let len = n.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let dev = (len - 1.0).abs();
                if dev > NORMAL_TOL {
                    bad_normal += 1;
                    if dev > worst_dev {
                        worst_dev = dev;
                        worst_normal = len;
                    }
                }
            }
        }
        if non_finite > 0 {
            rep.push(ViolationKind::NonFinite, Some(face.face_id), None, format!("{non_finite} samples"));
        }
        if bad_mask > 0 {
            rep.push(
                ViolationKind::MaskNotBinary,
                Some(face.face_id),
                Some("mask"),
                format!("{bad_mask} samples"),
            );
        }
        if bad_normal > 0 {
            rep.push(
                ViolationKind::NormalNotUnit,
                Some(face.face_id),
                Some("normal"),
                format!("{bad_normal} visible samples, worst length {worst_normal:.6}"),
            );
        }
        if visible == 0 {
            rep.push(ViolationKind::NoVisibleSample, Some(face.face_id), Some("mask"), String::new());
        }
    }

    let mut seen = BTreeSet::new();
    for &(a, b) in &s.adjacency {
        if a >= nf || b >= nf {
            rep.push(
                ViolationKind::DanglingAdjacency,
                Some(if a >= nf { a } else { b }),
                None,
                format!("pair ({a},{b}) with {nf} faces"),
            );
            continue;
        }
        if a == b {
            rep.push(ViolationKind::SelfLoop, Some(a), None, format!("pair ({a},{b})"));
            continue;
        }
        if !seen.insert((a.min(b), a.max(b))) {
            rep.push(ViolationKind::DuplicatePair, Some(a), None, format!("pair ({a},{b})"));
        }
    }

    if nf > 0 {
        let adj = s.neighbours();
        let mut reached = vec![false; nf];
        let mut stack = vec![0];
        reached[0] = true;
        while let Some(f) = stack.pop() {
            for &g in &adj[f] {
                if !reached[g] {
                    reached[g] = true;
                    stack.push(g);
                }
            }
        }
        let missing: Vec<usize> = (0..nf).filter(|&f| !reached[f]).collect();
        if !missing.is_empty() {
            rep.push(
                ViolationKind::Disconnected,
                Some(missing[0]),
                None,
                format!("faces {missing:?} unreachable from face 0"),
            );
        }
    } else {
        rep.push(ViolationKind::GridShape, None, None, "solid has no faces".into());
    }
    rep
}
