//! Gradients of the style distance with respect to sample positions.
//!
//! The reverse pass is written out by hand for the fixed encoder: cosine,
//! Gram, normalization, GIN, pooling, convolutions. Normals and the mask are
//! held fixed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{forward_traced, ActivationSet, EncoderInput, Trace, WeightBundle};
use crate::error::{Error, Result};
use crate::geom::{UVSolid, GRID, SAMPLES};
use crate::scalar::{dot, norm};
use crate::style::{
    grams_of_normalized, normalize, reduce, style_distance, Fingerprint, GramEmbedding, LayerNorm, LayerWeights,
    NormalizationPolicy, PcaModel,
};

const IN: usize = crate::encoder::INPUT_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

/// Encoder, policy and optional reduction that define the distance being differentiated.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub weights: &'a WeightBundle<f64>,
    pub policy: &'a NormalizationPolicy,
    pub pca: Option<&'a PcaModel<f64>>,
}

impl Pipeline<'_> {
    fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            encoder: self.weights.fingerprint(),
            policy: self.policy.fingerprint(),
            reduction: None,
        }
    }

    fn grams(&self, a: &ActivationSet<f64>) -> Result<GramEmbedding<f64>> {
        let g = grams_of_normalized(&normalize(a, self.policy)?, self.fingerprint())?;
        match self.pca {
            Some(m) => reduce(&g, m),
            None => Ok(g),
        }
    }

    pub fn embed(&self, input: &EncoderInput<f64>) -> Result<GramEmbedding<f64>> {
        let (a, _) = forward_traced(input, self.weights)?;
        self.grams(&a)
    }

    pub fn distance(&self, input: &EncoderInput<f64>, reference: &GramEmbedding<f64>, w: &LayerWeights) -> Result<f64> {
        style_distance(&self.embed(input)?, reference, w)
    }
}

/// Per mask-1 sample of the subject: its position and `∂D/∂xyz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub subject_id: String,
    pub reference_id: String,
    pub weights: LayerWeights,
    pub mode: GradMode,
    /// Global sample indices (`face * 100 + sample`).
    pub samples: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub gradients: Vec<[f64; 3]>,
    pub distance: f64,
    /// Bounding-box diagonal of the subject, used for the default glyph scale.
    pub diagonal: f64,
}

impl GradientField {
    pub fn max_norm(&self) -> f64 {
        self.gradients.iter().map(|g| norm(g)).fold(0.0, f64::max)
    }

    /// Scale that makes the longest glyph 5% of the bounding-box diagonal.
    pub fn default_scale(&self) -> f64 {
        let m = self.max_norm();
        if m > 0.0 {
            0.05 * self.diagonal / m
        } else {
            0.0
        }
    }
}

/// `d cos_dist(a, b) / d a`.
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let ab = dot(a, b);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| -(y / (na * nb) - ab * x / (na * na * na * nb)))
        .collect()
}

/// Gradient of `triu((1/N) Σ φφᵀ)` pulled back to the rows: `(1/N)(M + Mᵀ) φ`.
fn gram_backward(a: &ActivationSet<f64>, l: usize, upstream: &[f64], out: &mut [f64]) {
    let d = a.dims[l];
    let mut sym = vec![0.0; d * d];
    let mut off = 0;
    for i in 0..d {
        for j in i..d {
            sym[i * d + j] += upstream[off];
            sym[j * d + i] += upstream[off];
            off += 1;
        }
    }
    let inv = 1.0 / a.n_used(l) as f64;
    for e in (0..a.entries(l)).filter(|&e| a.is_used(l, e)) {
        let phi = a.row(l, e);
        let o = &mut out[e * d..(e + 1) * d];
        for i in 0..d {
            o[i] = inv * dot(&sym[i * d..(i + 1) * d], phi);
        }
    }
}

fn normalize_backward(a: &ActivationSet<f64>, l: usize, p: &NormalizationPolicy, dy: &[f64]) -> Vec<f64> {
    let d = a.dims[l];
    let x = &a.layers[l];
    let mut dx = dy.to_vec();
    match p.layers[l] {
        LayerNorm::None => {}
        LayerNorm::FaceRecenter => {
            let channels = if l == 0 && !p.recenter_normals { 3 } else { d };
            let per = a.entries(l) / a.num_faces;
            for f in 0..a.num_faces {
                let used: Vec<usize> = (f * per..(f + 1) * per).filter(|&e| a.is_used(l, e)).collect();
                if used.is_empty() {
                    continue;
                }
                for c in 0..channels {
                    let mean = used.iter().map(|&e| dy[e * d + c]).sum::<f64>() / used.len() as f64;
                    for &e in &used {
                        dx[e * d + c] -= mean;
                    }
                }
            }
        }
        LayerNorm::InstanceNorm => {
            let used: Vec<usize> = (0..a.entries(l)).filter(|&e| a.is_used(l, e)).collect();
            let n = used.len() as f64;
            for c in 0..d {
                let mu = used.iter().map(|&e| x[e * d + c]).sum::<f64>() / n;
                let sigma = (used.iter().map(|&e| (x[e * d + c] - mu).powi(2)).sum::<f64>() / n).sqrt();
                let s = sigma + p.epsilon;
                let mean_dy = used.iter().map(|&e| dy[e * d + c]).sum::<f64>() / n;
                let ds = -used.iter().map(|&e| dy[e * d + c] * (x[e * d + c] - mu)).sum::<f64>() / (s * s);
                for &e in &used {
                    let xc = x[e * d + c] - mu;
                    let via_sigma = if sigma > 0.0 { ds * xc / (n * sigma) } else { 0.0 };
                    dx[e * d + c] = (dy[e * d + c] - mean_dy) / s + via_sigma;
                }
            }
        }
    }
    for e in (0..a.entries(l)).filter(|&e| !a.is_used(l, e)) {
        dx[e * d..(e + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    }
    dx
}

/// Transpose of a same-padded 3×3 convolution after masking `dy` by ReLU activity.
fn conv_backward(
    conv: &crate::encoder::Conv2d<f64>,
    out: &[f64],
    dy: &mut [f64],
    num_faces: usize,
) -> Vec<f64> {
    let (cin, cout) = (conv.in_ch, conv.out_ch);
    for (g, &y) in dy.iter_mut().zip(out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dx = vec![0.0; num_faces * SAMPLES * cin];
    for f in 0..num_faces {
        for y in 0..GRID {
            for x in 0..GRID {
                let g = &dy[(f * SAMPLES + y * GRID + x) * cout..][..cout];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
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
                        let dst = &mut dx[(f * SAMPLES + yy as usize * GRID + xx as usize) * cin..][..cin];
                        for (c, &gc) in g.iter().enumerate() {
                            if gc == 0.0 {
                                continue;
                            }
                            let wrow = &conv.weight[((c * 3 + ky) * 3 + kx) * cin..][..cin];
                            for (s, &wv) in dst.iter_mut().zip(wrow) {
                                *s += gc * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn relu_mask(dy: &mut [f64], y: &[f64]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Back-propagates per-layer activation gradients to the input channels.
fn encoder_backward(
    input: &EncoderInput<f64>,
    w: &WeightBundle<f64>,
    a: &ActivationSet<f64>,
    t: &Trace<f64>,
    mut dacts: Vec<Vec<f64>>,
) -> Vec<f64> {
    let nf = a.num_faces;
    let ns = w.convs.len();
    let eps1 = 1.0 + w.spec.gin_epsilon;

    // GIN layers, last first
    for (gi, g) in w.gin.iter().enumerate().rev() {
        let l = ns + 2 + gi;
        let mut dpre = std::mem::take(&mut dacts[l]);
        relu_mask(&mut dpre, &a.layers[l]);
        let (hw, din, dout) = (g.hidden.out_dim, g.hidden.in_dim, g.out.out_dim);
        let mut dh_prev = vec![0.0; nf * din];
        for f in 0..nf {
            let mut dhid = vec![0.0; hw];
            g.out.apply_transpose(&dpre[f * dout..(f + 1) * dout], &mut dhid);
            relu_mask(&mut dhid, &t.gin_hidden[gi][f * hw..(f + 1) * hw]);
            let mut dagg = vec![0.0; din];
            g.hidden.apply_transpose(&dhid, &mut dagg);
            for (s, &v) in dh_prev[f * din..(f + 1) * din].iter_mut().zip(&dagg) {
                *s += eps1 * v;
            }
            // agg_f sums h_n over neighbours n, so h_n receives dagg_f
            for &n in &input.neighbours[f] {
                for (s, &v) in dh_prev[n * din..(n + 1) * din].iter_mut().zip(&dagg) {
                    *s += v;
                }
            }
        }
        for (s, v) in dacts[l - 1].iter_mut().zip(dh_prev) {
            *s += v;
        }
    }

    // face embedding and pooling
    let lf = ns + 1;
    let mut dface = std::mem::take(&mut dacts[lf]);
    relu_mask(&mut dface, &a.layers[lf]);
    let fp = &w.face_proj;
    let cin = fp.in_dim;
    for f in 0..nf {
        let mut dpool = vec![0.0; cin];
        fp.apply_transpose(&dface[f * fp.out_dim..(f + 1) * fp.out_dim], &mut dpool);
        let inv = 1.0 / t.visible_per_face[f] as f64;
        for s in 0..SAMPLES {
            if input.mask[f * SAMPLES + s] {
                let dst = &mut dacts[ns][(f * SAMPLES + s) * cin..][..cin];
                for (d, &v) in dst.iter_mut().zip(&dpool) {
                    *d += inv * v;
                }
            }
        }
    }

    // convolutions, last first; layer l is the output of conv l-1
    let mut dinput = vec![0.0; nf * SAMPLES * IN];
    for ci in (0..ns).rev() {
        let mut dy = std::mem::take(&mut dacts[ci + 1]);
        let dx = conv_backward(&w.convs[ci], &a.layers[ci + 1], &mut dy, nf);
        if ci == 0 {
            dinput = dx;
        } else {
            for (s, v) in dacts[ci].iter_mut().zip(dx) {
                *s += v;
            }
        }
    }
    // the feature layer is the first six input channels verbatim
    let d0 = a.dims[0];
    for e in 0..nf * SAMPLES {
        for c in 0..d0 {
            dinput[e * IN + c] += dacts[0][e * d0 + c];
        }
    }
    dinput
}

/// Distance and its gradient with respect to every input scalar (`[sample][7]`).
pub fn input_gradient(
    pipe: &Pipeline,
    input: &EncoderInput<f64>,
    reference: &GramEmbedding<f64>,
    w: &LayerWeights,
) -> Result<(f64, Vec<f64>)> {
    let (a, t) = forward_traced(input, pipe.weights)?;
    let normed = normalize(&a, pipe.policy)?;
    let raw = grams_of_normalized(&normed, pipe.fingerprint())?;
    let g = match pipe.pca {
        Some(m) => reduce(&raw, m)?,
        None => raw,
    };
    let distance = style_distance(&g, reference, w)?;
    let mut dacts: Vec<Vec<f64>> = a.layers.iter().map(|l| vec![0.0; l.len()]).collect();
    for (l, &wl) in w.as_slice().iter().enumerate() {
        if wl == 0.0 {
            continue;
        }
        let mut dg: Vec<f64> = cosine_grad(&g.layers[l], &reference.layers[l]).into_iter().map(|v| wl * v).collect();
        if let Some(m) = pipe.pca {
            // y = C (x - mean), so dx = Cᵀ dy
            let pl = &m.layers[l];
            let mut dx = vec![0.0; pl.mean.len()];
            for (c, &gy) in pl.components.iter().zip(&dg) {
                for (s, &v) in dx.iter_mut().zip(c) {
                    *s += gy * v;
                }
            }
            dg = dx;
        }
        let mut dphi = vec![0.0; a.layers[l].len()];
        gram_backward(&normed, l, &dg, &mut dphi);
        dacts[l] = normalize_backward(&a, l, pipe.policy, &dphi);
    }
    Ok((distance, encoder_backward(input, pipe.weights, &a, &t, dacts)))
}

/// Central difference of the distance along one position coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSample {
    pub sample: usize,
    pub axis: usize,
    pub value: f64,
    /// Some ReLU changed state inside the stencil, or sat within 1e-6 of its kink.
    pub near_kink: bool,
}

fn relu_pattern(a: &ActivationSet<f64>, t: &Trace<f64>) -> (Vec<bool>, f64) {
    let mut bits = Vec::new();
    let mut closest = f64::INFINITY;
    let mut push = |v: &[f64]| {
        for &x in v {
            bits.push(x > 0.0);
            if x > 0.0 {
                closest = closest.min(x);
            }
        }
    };
    for l in 1..a.num_layers() {
        push(&a.layers[l]);
    }
    for h in &t.gin_hidden {
        push(h);
    }
    (bits, closest)
}

/// Central differences at the given `(sample, axis)` coordinates with step `h`.
pub fn finite_difference_at(
    pipe: &Pipeline,
    input: &EncoderInput<f64>,
    reference: &GramEmbedding<f64>,
    w: &LayerWeights,
    coords: &[(usize, usize)],
    h: f64,
) -> Result<Vec<FdSample>> {
    let (a0, t0) = forward_traced(input, pipe.weights)?;
    let (base, closest) = relu_pattern(&a0, &t0);
    let mut out = Vec::with_capacity(coords.len());
    let mut x = input.clone();
    for &(sample, axis) in coords {
        let orig = x.position(sample)[axis];
        let mut eval = |v: f64| -> Result<(f64, Vec<bool>)> {
            x.position_mut(sample)[axis] = v;
            let (a, t) = forward_traced(&x, pipe.weights)?;
            let d = style_distance(&pipe.grams(&a)?, reference, w)?;
            Ok((d, relu_pattern(&a, &t).0))
        };
        let (fp, pp) = eval(orig + h)?;
        let (fm, pm) = eval(orig - h)?;
        x.position_mut(sample)[axis] = orig;
        out.push(FdSample {
            sample,
            axis,
            value: (fp - fm) / (2.0 * h),
            near_kink: pp != base || pm != base || closest < 1e-6,
        });
    }
    Ok(out)
}

/// FD step used by [`GradMode::FiniteDifference`]: 1e-3 of the bounding-box diagonal.
pub fn fd_step(subject: &UVSolid) -> f64 {
    1e-3 * subject.bbox_diagonal()
}

/// Gradient of `D_style(subject, reference)` at the subject's mask-1 samples.
pub fn style_gradient(
    pipe: &Pipeline,
    subject: &UVSolid,
    reference: &UVSolid,
    w: &LayerWeights,
    mode: GradMode,
) -> Result<GradientField> {
    let input = EncoderInput::<f64>::from_solid(subject);
    let degenerate = |id: &str| {
        let id = id.to_string();
        move |e| match e {
            Error::DegenerateLayer { layer, .. } => Error::DegenerateLayer {
                layer,
                solid: Some(id.clone()),
            },
            e => e,
        }
    };
    let reference_emb = pipe
        .embed(&EncoderInput::from_solid(reference))
        .map_err(degenerate(&reference.solid_id))?;
    let samples = input.visible_samples();
    let (distance, gradients): (f64, Vec<[f64; 3]>) = match mode {
        GradMode::Analytic => {
            let (d, g) = input_gradient(pipe, &input, &reference_emb, w).map_err(degenerate(&subject.solid_id))?;
            (d, samples.iter().map(|&k| [g[k * IN], g[k * IN + 1], g[k * IN + 2]]).collect())
        }
        GradMode::FiniteDifference => {
            let coords: Vec<(usize, usize)> = samples.iter().flat_map(|&k| (0..3).map(move |ax| (k, ax))).collect();
            let fd = finite_difference_at(pipe, &input, &reference_emb, w, &coords, fd_step(subject))
                .map_err(degenerate(&subject.solid_id))?;
            let d = pipe.distance(&input, &reference_emb, w)?;
            (d, fd.chunks_exact(3).map(|c| [c[0].value, c[1].value, c[2].value]).collect())
        }
    };
    if gradients.iter().flatten().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Contract("gradient has non-finite entries".into()));
    }
    Ok(GradientField {
        subject_id: subject.solid_id.clone(),
        reference_id: reference.solid_id.clone(),
        weights: w.clone(),
        mode,
        positions: samples.iter().map(|&k| input.position(k)).collect(),
        samples,
        gradients,
        distance,
        diagonal: subject.bbox_diagonal(),
    })
}

/// One glyph: a segment from `p` to `p + d`, with `d = -k ∇`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub p: [f64; 3],
    pub d: [f64; 3],
}

pub fn glyphs(g: &GradientField, k: f64) -> Vec<Glyph> {
    g.positions
        .iter()
        .zip(&g.gradients)
        .map(|(&p, gr)| Glyph {
            p,
            d: [-k * gr[0], -k * gr[1], -k * gr[2]],
        })
        .collect()
}

/// OBJ with two vertices and one `l` element per glyph.
pub fn export_obj(g: &GradientField, k: f64) -> String {
    let mut s = format!("# style gradient {} -> {}, k = {k:e}\n", g.subject_id, g.reference_id);
    for gl in glyphs(g, k) {
        let q = [gl.p[0] + gl.d[0], gl.p[1] + gl.d[1], gl.p[2] + gl.d[2]];
        let _ = writeln!(s, "v {} {} {}", gl.p[0], gl.p[1], gl.p[2]);
        let _ = writeln!(s, "v {} {} {}", q[0], q[1], q[2]);
    }
    for i in 0..g.positions.len() {
        let _ = writeln!(s, "l {} {}", 2 * i + 1, 2 * i + 2);
    }
    s
}

/// JSON array of `{"p": [x,y,z], "d": [dx,dy,dz]}`.
pub fn export_json(g: &GradientField, k: f64) -> String {
    serde_json::to_string(&glyphs(g, k)).expect("glyphs serialize")
}

#[cfg(test)]
mod tests;
