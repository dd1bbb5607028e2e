use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EncoderSpec, INPUT_DIM};
use crate::bin::{put_f32, put_f64, put_u32, put_u64, Reader};
use crate::error::{Error, ParseError, Result};
use crate::Scalar;

const MAGIC: &str = "UVWB";
const VERSION: u32 = 1;

/// 3×3 convolution; weights laid out `[out][ky][kx][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Dense layer; weights laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn apply(&self, x: &[T], out: &mut [T]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *slot = self.bias[o] + crate::scalar::dot(row, x);
        }
    }

    /// Accumulates `Wᵀ·g` into `out`.
    pub fn apply_transpose(&self, g: &[T], out: &mut [T]) {
        for (o, &go) in g.iter().enumerate() {
            if go == T::zero() {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (slot, &w) in out.iter_mut().zip(row) {
                *slot += go * w;
            }
        }
    }
}

/// Two-layer MLP inside a GIN update.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Seeded,
    Loaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle<T> {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv2d<T>>,
    pub face_proj: Linear<T>,
    pub gin: Vec<GinLayer<T>>,
    pub provenance: Provenance,
}

/// Visits every tensor in the declared file order with a label.
fn tensor_shapes(spec: &EncoderSpec) -> Vec<(String, usize, usize)> {
    // (label, element count, fan_in); fan_in 0 marks a bias
    let k2 = spec.kernel * spec.kernel;
    let mut v = Vec::new();
    let mut cin = INPUT_DIM;
    for (i, &c) in spec.conv_channels.iter().enumerate() {
        v.push((format!("conv{}.weight", i + 1), c * k2 * cin, k2 * cin));
        v.push((format!("conv{}.bias", i + 1), c, 0));
        cin = c;
    }
    v.push(("face_embed.weight".into(), spec.face_embed_dim * cin, cin));
    v.push(("face_embed.bias".into(), spec.face_embed_dim, 0));
    let mut din = spec.face_embed_dim;
    for (i, &d) in spec.gnn_dims.iter().enumerate() {
        v.push((format!("gin{}.hidden.weight", i + 1), spec.gnn_hidden * din, din));
        v.push((format!("gin{}.hidden.bias", i + 1), spec.gnn_hidden, 0));
        v.push((format!("gin{}.out.weight", i + 1), d * spec.gnn_hidden, spec.gnn_hidden));
        v.push((format!("gin{}.out.bias", i + 1), d, 0));
        din = d;
    }
    v
}

fn assemble<T: Scalar>(spec: &EncoderSpec, mut tensors: Vec<Vec<T>>, provenance: Provenance) -> WeightBundle<T> {
    tensors.reverse();
    let mut next = || tensors.pop().expect("tensor count matches spec");
    let mut convs = Vec::new();
    let mut cin = INPUT_DIM;
    for &c in &spec.conv_channels {
        let weight = next();
        let bias = next();
        convs.push(Conv2d {
            in_ch: cin,
            out_ch: c,
            weight,
            bias,
        });
        cin = c;
    }
    let face_proj = Linear {
        in_dim: cin,
        out_dim: spec.face_embed_dim,
        weight: next(),
        bias: next(),
    };
    let mut gin = Vec::new();
    let mut din = spec.face_embed_dim;
    for &d in &spec.gnn_dims {
        let hidden = Linear {
            in_dim: din,
            out_dim: spec.gnn_hidden,
            weight: next(),
            bias: next(),
        };
        let out = Linear {
            in_dim: spec.gnn_hidden,
            out_dim: d,
            weight: next(),
            bias: next(),
        };
        gin.push(GinLayer { hidden, out });
        din = d;
    }
    WeightBundle {
        spec: spec.clone(),
        convs,
        face_proj,
        gin,
        provenance,
    }
}

/// He-normal weights (variance 2/fan_in) and zero biases from a ChaCha stream
/// seeded by `spec.seed`. Values are rounded to f32 so the weight file is lossless.
pub fn init_weights<T: Scalar>(spec: &EncoderSpec) -> Result<WeightBundle<T>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tensors = tensor_shapes(spec)
        .into_iter()
        .map(|(_, n, fan_in)| {
            if fan_in == 0 {
                return vec![T::zero(); n];
            }
            let scale = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of((z * scale) as f32 as f64)
                })
                .collect()
        })
        .collect();
    Ok(assemble(spec, tensors, Provenance::Seeded))
}

impl<T: Scalar> WeightBundle<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.push(&self.face_proj.weight);
        v.push(&self.face_proj.bias);
        for g in &self.gin {
            v.push(&g.hidden.weight);
            v.push(&g.hidden.bias);
            v.push(&g.out.weight);
            v.push(&g.out.bias);
        }
        v
    }

    /// Checks every tensor length against the spec.
    pub fn check_shapes(&self) -> Result<()> {
        self.spec.check()?;
        let shapes = tensor_shapes(&self.spec);
        let tensors = self.tensors();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((label, n, _), t) in shapes.iter().zip(tensors) {
            if t.len() != *n {
                return Err(Error::Shape(format!("{label}: expected {n} values, found {}", t.len())));
            }
        }
        Ok(())
    }

    /// Short stable identifier: hash of the serialized weights.
    pub fn fingerprint(&self) -> String {
        let h = crate::bin::sha256_hex(&save_weights(self));
        format!("uvwb:{}", &h[..16])
    }

    /// Errors naming the first layer where `other` differs from this bundle's spec.
    pub fn check_spec(&self, other: &EncoderSpec) -> Result<()> {
        spec_diff(other, &self.spec)
    }
}

fn spec_diff(expected: &EncoderSpec, found: &EncoderSpec) -> Result<()> {
    let mismatch = |layer: String, detail: String| Err(Error::SpecMismatch { layer, detail });
    if expected.kernel != found.kernel {
        return mismatch("conv".into(), format!("kernel {} vs {}", expected.kernel, found.kernel));
    }
    for i in 0..expected.conv_channels.len().max(found.conv_channels.len()) {
        let (e, f) = (expected.conv_channels.get(i), found.conv_channels.get(i));
        if e != f {
            return mismatch(format!("conv{}", i + 1), format!("expected {e:?} channels, found {f:?}"));
        }
    }
    if expected.face_embed_dim != found.face_embed_dim {
        return mismatch(
            "face_embed".into(),
            format!("expected width {}, found {}", expected.face_embed_dim, found.face_embed_dim),
        );
    }
    for i in 0..expected.gnn_dims.len().max(found.gnn_dims.len()) {
        let (e, f) = (expected.gnn_dims.get(i), found.gnn_dims.get(i));
        if e != f {
            return mismatch(format!("gin{}", i + 1), format!("expected {e:?} width, found {f:?}"));
        }
    }
    if expected.gnn_hidden != found.gnn_hidden {
        return mismatch(
            "gin".into(),
            format!("expected hidden width {}, found {}", expected.gnn_hidden, found.gnn_hidden),
        );
    }
    if expected.gin_epsilon != found.gin_epsilon {
        return mismatch(
            "gin".into(),
            format!("expected epsilon {}, found {}", expected.gin_epsilon, found.gin_epsilon),
        );
    }
    Ok(())
}

/// `UVWB` file: magic, version, spec echo, then every tensor as f32 in declared order.
pub fn save_weights<T: Scalar>(b: &WeightBundle<T>) -> Vec<u8> {
    let s = &b.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    put_u32(&mut out, VERSION);
    put_u32(&mut out, s.conv_channels.len() as u32);
    for &c in &s.conv_channels {
        put_u32(&mut out, c as u32);
    }
    put_u32(&mut out, s.face_embed_dim as u32);
    put_u32(&mut out, s.gnn_dims.len() as u32);
    for &d in &s.gnn_dims {
        put_u32(&mut out, d as u32);
    }
    put_u32(&mut out, s.gnn_hidden as u32);
    put_u32(&mut out, s.kernel as u32);
    put_f64(&mut out, s.gin_epsilon);
    put_u64(&mut out, s.seed);
    for t in b.tensors() {
        for &v in t {
            put_f32(&mut out, v.as_f32());
        }
    }
    out
}

fn read_spec(r: &mut Reader<'_>) -> Result<EncoderSpec, ParseError> {
    let list = |r: &mut Reader<'_>, field| -> Result<Vec<usize>, ParseError> {
        let at = r.offset();
        let n = r.u32(field)? as usize;
        if n > 64 {
            return Err(ParseError::InvalidField {
                offset: at,
                field,
                detail: format!("{n} layers"),
            });
        }
        (0..n).map(|_| r.u32(field).map(|v| v as usize)).collect()
    };
    let conv_channels = list(r, "conv_channels")?;
    let face_embed_dim = r.u32("face_embed_dim")? as usize;
    let gnn_dims = list(r, "gnn_dims")?;
    let gnn_hidden = r.u32("gnn_hidden")? as usize;
    let kernel = r.u32("kernel")? as usize;
    let gin_epsilon = r.f64("gin_epsilon")?;
    let seed = r.u64("seed")?;
    Ok(EncoderSpec {
        conv_channels,
        face_embed_dim,
        gnn_dims,
        gnn_hidden,
        kernel,
        gin_epsilon,
        seed,
    })
}

/// Parses a weight file; when `expected` is given the echoed spec must match it.
pub fn load_weights<T: Scalar>(bytes: &[u8], expected: Option<&EncoderSpec>) -> Result<WeightBundle<T>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ParseError::UnknownVersion { offset: at, version }.into());
    }
    let spec = read_spec(&mut r)?;
    spec.check()?;
    if let Some(e) = expected {
        spec_diff(e, &spec)?;
    }
    let mut tensors = Vec::new();
    for (_, n, _) in tensor_shapes(&spec) {
        let raw = r.f32s(n, "tensor")?;
        tensors.push(raw.into_iter().map(|v| T::of(v as f64)).collect());
    }
    r.finish()?;
    Ok(assemble(&spec, tensors, Provenance::Loaded))
}
