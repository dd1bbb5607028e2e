use super::weights::{Conv2d, WeightBundle};
use super::{FEATURE_DIM, INPUT_DIM};
use crate::error::{Error, Result};
use crate::geom::{UVSolid, CHANNELS, CH_MASK, GRID, SAMPLES};
use crate::Scalar;

/// Encoder input: the 7-channel grids of every face in scalar type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput<T> {
    pub num_faces: usize,
    /// `[face][sample][channel]`, 7 channels.
    pub data: Vec<T>,
    pub mask: Vec<bool>,
    pub neighbours: Vec<Vec<usize>>,
}

impl<T: Scalar> EncoderInput<T> {
    pub fn from_solid(s: &UVSolid) -> Self {
        let mut data = Vec::with_capacity(s.faces.len() * SAMPLES * CHANNELS);
        let mut mask = Vec::with_capacity(s.faces.len() * SAMPLES);
        for f in &s.faces {
            data.extend(f.grid.iter().map(|&v| T::of(v as f64)));
            mask.extend((0..SAMPLES).map(|k| f.grid[k * CHANNELS + CH_MASK] == 1.0));
        }
        EncoderInput {
            num_faces: s.faces.len(),
            data,
            mask,
            neighbours: s.neighbours(),
        }
    }

    /// Global sample index `face * 100 + sample`.
    pub fn position(&self, sample: usize) -> [T; 3] {
        let c = &self.data[sample * CHANNELS..];
        [c[0], c[1], c[2]]
    }

    pub fn position_mut(&mut self, sample: usize) -> &mut [T] {
        &mut self.data[sample * CHANNELS..sample * CHANNELS + 3]
    }

    pub fn visible_samples(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&k| self.mask[k]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerLayout {
    /// One vector per UV sample, grouped by face, with the mask alongside.
    Spatial,
    /// One vector per face.
    PerFace,
}

/// Raw per-layer activations of one solid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet<T> {
    pub dims: Vec<usize>,
    pub layouts: Vec<LayerLayout>,
    /// Row-major `[entry][channel]`; entries are samples or faces per layout.
    pub layers: Vec<Vec<T>>,
    pub mask: Vec<bool>,
    pub num_faces: usize,
}

impl<T: Scalar> ActivationSet<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn entries(&self, l: usize) -> usize {
        match self.layouts[l] {
            LayerLayout::Spatial => self.num_faces * SAMPLES,
            LayerLayout::PerFace => self.num_faces,
        }
    }

    /// Whether entry `e` of layer `l` takes part in statistics.
    pub fn is_used(&self, l: usize, e: usize) -> bool {
        match self.layouts[l] {
            LayerLayout::Spatial => self.mask[e],
            LayerLayout::PerFace => true,
        }
    }

    /// N_l: mask-1 samples for spatial layers, faces otherwise.
    pub fn n_used(&self, l: usize) -> usize {
        match self.layouts[l] {
            LayerLayout::Spatial => self.mask.iter().filter(|&&m| m).count(),
            LayerLayout::PerFace => self.num_faces,
        }
    }

    /// Face that owns entry `e` of layer `l`.
    pub fn face_of(&self, l: usize, e: usize) -> usize {
        match self.layouts[l] {
            LayerLayout::Spatial => e / SAMPLES,
            LayerLayout::PerFace => e,
        }
    }

    pub fn row(&self, l: usize, e: usize) -> &[T] {
        let d = self.dims[l];
        &self.layers[l][e * d..(e + 1) * d]
    }
}

/// Intermediate values the reverse pass needs beyond the layer outputs.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Masked mean of the last convolution map, `[face][channel]`.
    pub pooled: Vec<T>,
    pub visible_per_face: Vec<usize>,
    /// Per GIN layer: aggregated input `(1+ε)h_f + Σ h_g`.
    pub gin_agg: Vec<Vec<T>>,
    /// Per GIN layer: post-ReLU hidden activations.
    pub gin_hidden: Vec<Vec<T>>,
}

#[inline]
fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Same-padded 3×3 convolution of every face followed by ReLU.
fn conv_relu<T: Scalar>(conv: &Conv2d<T>, input: &[T], num_faces: usize) -> Vec<T> {
    let (cin, cout) = (conv.in_ch, conv.out_ch);
    let mut out = vec![T::zero(); num_faces * SAMPLES * cout];
    for f in 0..num_faces {
        let fin = &input[f * SAMPLES * cin..(f + 1) * SAMPLES * cin];
        for y in 0..GRID {
            for x in 0..GRID {
                let o = &mut out[(f * SAMPLES + y * GRID + x) * cout..][..cout];
                o.copy_from_slice(&conv.bias);
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if !(0..GRID as isize).contains(&yy) {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if !(0..GRID as isize).contains(&xx) {
                            continue;
                        }
                        let src = &fin[(yy as usize * GRID + xx as usize) * cin..][..cin];
                        for (c, slot) in o.iter_mut().enumerate() {
                            let w = &conv.weight[((c * 3 + ky) * 3 + kx) * cin..][..cin];
                            *slot += crate::scalar::dot(w, src);
                        }
                    }
                }
                for v in o.iter_mut() {
                    *v = relu(*v);
                }
            }
        }
    }
    out
}

/// Runs the encoder and keeps the intermediates needed for differentiation.
pub fn forward_traced<T: Scalar>(input: &EncoderInput<T>, w: &WeightBundle<T>) -> Result<(ActivationSet<T>, Trace<T>)> {
    let nf = input.num_faces;
    if input.data.len() != nf * SAMPLES * INPUT_DIM || input.mask.len() != nf * SAMPLES {
        return Err(Error::Shape(format!(
            "input holds {} scalars for {nf} faces",
            input.data.len()
        )));
    }
    if w.convs.first().map(|c| c.in_ch) != Some(INPUT_DIM) {
        return Err(Error::Shape("first convolution must take 7 input channels".into()));
    }
    let spec = &w.spec;
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut layouts = Vec::with_capacity(spec.num_layers());

    let features: Vec<T> = input
        .data
        .chunks_exact(INPUT_DIM)
        .flat_map(|c| c[..FEATURE_DIM].iter().copied())
        .collect();
    layers.push(features);
    layouts.push(LayerLayout::Spatial);

    let mut cur = input.data.clone();
    let mut cin = INPUT_DIM;
    for conv in &w.convs {
        if conv.in_ch != cin {
            return Err(Error::Shape(format!("convolution expects {} channels, got {cin}", conv.in_ch)));
        }
        cur = conv_relu(conv, &cur, nf);
        cin = conv.out_ch;
        layers.push(cur.clone());
        layouts.push(LayerLayout::Spatial);
    }

    let visible_per_face: Vec<usize> = (0..nf)
        .map(|f| input.mask[f * SAMPLES..(f + 1) * SAMPLES].iter().filter(|&&m| m).count())
        .collect();
    if let Some(f) = visible_per_face.iter().position(|&c| c == 0) {
        return Err(Error::Shape(format!("face {f} has no visible samples to pool")));
    }
    let mut pooled = vec![T::zero(); nf * cin];
    for f in 0..nf {
        let p = &mut pooled[f * cin..(f + 1) * cin];
        for s in 0..SAMPLES {
            if input.mask[f * SAMPLES + s] {
                for (slot, &v) in p.iter_mut().zip(&cur[(f * SAMPLES + s) * cin..][..cin]) {
                    *slot += v;
                }
            }
        }
        let inv = T::one() / T::of(visible_per_face[f] as f64);
        p.iter_mut().for_each(|v| *v *= inv);
    }
    let fp = &w.face_proj;
    let mut h = vec![T::zero(); nf * fp.out_dim];
    for f in 0..nf {
        let o = &mut h[f * fp.out_dim..(f + 1) * fp.out_dim];
        fp.apply(&pooled[f * cin..(f + 1) * cin], o);
        o.iter_mut().for_each(|v| *v = relu(*v));
    }
    layers.push(h.clone());
    layouts.push(LayerLayout::PerFace);

    let eps1 = T::one() + T::of(spec.gin_epsilon);
    let mut din = fp.out_dim;
    let mut gin_agg = Vec::new();
    let mut gin_hidden = Vec::new();
    for g in &w.gin {
        let mut agg = vec![T::zero(); nf * din];
        for f in 0..nf {
            let a = &mut agg[f * din..(f + 1) * din];
            for (slot, &v) in a.iter_mut().zip(&h[f * din..(f + 1) * din]) {
                *slot = eps1 * v;
            }
            for &n in &input.neighbours[f] {
                for (slot, &v) in a.iter_mut().zip(&h[n * din..(n + 1) * din]) {
                    *slot += v;
                }
            }
        }
        let hw = g.hidden.out_dim;
        let mut hid = vec![T::zero(); nf * hw];
        let dout = g.out.out_dim;
        let mut next = vec![T::zero(); nf * dout];
        for f in 0..nf {
            let hf = &mut hid[f * hw..(f + 1) * hw];
            g.hidden.apply(&agg[f * din..(f + 1) * din], hf);
            hf.iter_mut().for_each(|v| *v = relu(*v));
            let o = &mut next[f * dout..(f + 1) * dout];
            g.out.apply(hf, o);
            o.iter_mut().for_each(|v| *v = relu(*v));
        }
        gin_agg.push(agg);
        gin_hidden.push(hid);
        h = next;
        din = dout;
        layers.push(h.clone());
        layouts.push(LayerLayout::PerFace);
    }

    let acts = ActivationSet {
        dims: spec.layer_dims(),
        layouts,
        layers,
        mask: input.mask.clone(),
        num_faces: nf,
    };
    let trace = Trace {
        pooled,
        visible_per_face,
        gin_agg,
        gin_hidden,
    };
    Ok((acts, trace))
}

pub fn forward<T: Scalar>(input: &EncoderInput<T>, w: &WeightBundle<T>) -> Result<ActivationSet<T>> {
    forward_traced(input, w).map(|(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::super::{init_weights, EncoderSpec};
    use super::*;
    use crate::geom::UVFace;
    use crate::synth::{generate_solid, ContentClass, ProfileSpec, StyleSpec};

    fn solid(class: ContentClass, style: usize) -> UVSolid {
        let p = ProfileSpec::with_jitter(class, [0.2, -0.1, 0.4]);
        generate_solid(&p, &StyleSpec::presets()[style], "t").unwrap()
    }

    fn bundle() -> WeightBundle<f64> {
        init_weights(&EncoderSpec::with_seed(1)).unwrap()
    }

    #[test]
    fn shapes_follow_spec() {
        let s = solid(ContentClass::Rectangle, 0);
        let a = forward(&EncoderInput::from_solid(&s), &bundle()).unwrap();
        assert_eq!(a.dims, vec![6, 16, 32, 64, 64, 64, 64]);
        for l in 4..7 {
            assert_eq!(a.layers[l].len(), 6 * 64);
            assert_eq!(a.n_used(l), 6);
        }
        for l in 0..4 {
            assert_eq!(a.layers[l].len(), 600 * a.dims[l]);
            assert_eq!(a.n_used(l), s.visible_count());
        }
    }

    #[test]
    fn feature_layer_is_identity() {
        let s = solid(ContentClass::LShape, 1);
        let mut scaled = s.clone();
        for f in &mut scaled.faces {
            for k in 0..SAMPLES {
                for c in 0..3 {
                    f.sample_mut(k)[c] *= 2.0;
                }
            }
        }
        let w = bundle();
        let a = forward(&EncoderInput::from_solid(&s), &w).unwrap();
        let b = forward(&EncoderInput::from_solid(&scaled), &w).unwrap();
        for e in 0..a.entries(0) {
            let (ra, rb) = (a.row(0, e), b.row(0, e));
            for c in 0..3 {
                assert_eq!(rb[c], 2.0 * ra[c]);
            }
            assert_eq!(&ra[3..], &rb[3..]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let s = solid(ContentClass::Star, 3);
        let w = bundle();
        let x = EncoderInput::from_solid(&s);
        assert_eq!(forward(&x, &w).unwrap(), forward(&x, &w).unwrap());
    }

    /// Relabels faces by `perm` (new index i holds old face perm[i]).
    fn permute(s: &UVSolid, perm: &[usize]) -> UVSolid {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let faces = perm
            .iter()
            .enumerate()
            .map(|(new, &old)| UVFace {
                face_id: new,
                grid: s.faces[old].grid.clone(),
            })
            .collect();
        UVSolid {
            faces,
            adjacency: crate::geom::canonical_adjacency(s.adjacency.iter().map(|&(a, b)| (inv[a], inv[b]))),
            ..s.clone()
        }
    }

    #[test]
    fn face_permutation_equivariance() {
        let s = solid(ContentClass::TShape, 2);
        let n = s.num_faces();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        assert!(crate::geom::validate_solid(&permute(&s, &perm)).is_empty());
        let w = bundle();
        let a = forward(&EncoderInput::from_solid(&s), &w).unwrap();
        let b = forward(&EncoderInput::from_solid(&permute(&s, &perm)), &w).unwrap();
        for l in 0..7 {
            let per = if l < 4 { SAMPLES } else { 1 };
            for (new, &old) in perm.iter().enumerate() {
                for k in 0..per {
                    let (ra, rb) = (a.row(l, old * per + k), b.row(l, new * per + k));
                    for (x, y) in ra.iter().zip(rb) {
                        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "layer {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn isolated_masked_samples_do_not_reach_pooled_layers() {
        // star caps have masked-out corners whose 7×7 neighbourhoods hold only mask-0 samples
        let s = solid(ContentClass::Star, 0);
        let cap = s.num_faces() - 1;
        let f = &s.faces[cap];
        let isolated: Vec<usize> = (0..SAMPLES)
            .filter(|&k| {
                let (y, x) = ((k / GRID) as isize, (k % GRID) as isize);
                (-3..=3).all(|dy| {
                    (-3..=3).all(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        !(0..10).contains(&yy) || !(0..10).contains(&xx) || !f.visible((yy * 10 + xx) as usize)
                    })
                })
            })
            .collect();
        assert!(!isolated.is_empty());
        let mut t = s.clone();
        for &k in &isolated {
            let c = t.faces[cap].sample_mut(k);
            c[0] += 0.3;
            c[4] = -c[4];
        }
        let w = bundle();
        let a = forward(&EncoderInput::from_solid(&s), &w).unwrap();
        let b = forward(&EncoderInput::from_solid(&t), &w).unwrap();
        for l in 4..7 {
            assert_eq!(a.layers[l], b.layers[l]);
        }
    }
}
