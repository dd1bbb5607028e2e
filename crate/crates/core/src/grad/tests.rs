use nalgebra::{DMatrix, DVector};

use super::*;
use crate::encoder::{init_weights, EncoderSpec};
use crate::geom::CHANNELS;
use crate::style::fit_pca;
use crate::synth::{generate_solid, ContentClass, ProfileSpec, StyleSpec};

fn solid(class: ContentClass, style: usize, j: f64, id: &str) -> UVSolid {
    let p = ProfileSpec::with_jitter(class, [j, -0.5 * j, 0.3]);
    generate_solid(&p, &StyleSpec::presets()[style], id).unwrap()
}

fn bundle() -> WeightBundle<f64> {
    init_weights(&EncoderSpec::with_seed(7)).unwrap()
}

fn coords(input: &EncoderInput<f64>, n: usize, stride: usize) -> Vec<(usize, usize)> {
    let vis = input.visible_samples();
    (0..n).map(|i| (vis[(i * stride) % vis.len()], i % 3)).collect()
}

/// Max-norm relative error over the coordinates that stay clear of ReLU kinks.
fn fd_error(pipe: &Pipeline, a: &UVSolid, b: &UVSolid, w: &LayerWeights, n: usize) -> (f64, usize) {
    let input = EncoderInput::<f64>::from_solid(a);
    let r = pipe.embed(&EncoderInput::from_solid(b)).unwrap();
    let (_, g) = input_gradient(pipe, &input, &r, w).unwrap();
    let fd = finite_difference_at(pipe, &input, &r, w, &coords(&input, n, 37), fd_step(a)).unwrap();
    let kept: Vec<&FdSample> = fd.iter().filter(|s| !s.near_kink).collect();
    let scale = kept.iter().map(|s| s.value.abs()).fold(0.0, f64::max);
    let err = kept
        .iter()
        .map(|s| (g[s.sample * IN + s.axis] - s.value).abs())
        .fold(0.0, f64::max);
    (err / scale, kept.len())
}

#[test]
fn self_distance_has_zero_gradient() {
    let w = bundle();
    let policy = NormalizationPolicy::default_for(&w.spec);
    let pipe = Pipeline { weights: &w, policy: &policy, pca: None };
    let a = solid(ContentClass::TShape, 2, 0.2, "a");
    let f = style_gradient(&pipe, &a, &a, &LayerWeights::uniform(7), GradMode::Analytic).unwrap();
    assert_eq!(f.gradients.len(), a.visible_count());
    assert!(f.distance.abs() < 1e-12);
    assert!(f.max_norm() <= 1e-9, "{}", f.max_norm());
}

#[test]
fn matches_finite_differences() {
    let w = bundle();
    let policy = NormalizationPolicy::default_for(&w.spec);
    let pipe = Pipeline { weights: &w, policy: &policy, pca: None };
    let a = solid(ContentClass::LShape, 3, 0.1, "a");
    let b = solid(ContentClass::Star, 1, -0.2, "b");
    for wv in [
        LayerWeights::uniform_over(7, &[0, 1, 2, 3]),
        LayerWeights::uniform(7),
        LayerWeights::one_hot(7, 6),
    ] {
        let (err, kept) = fd_error(&pipe, &a, &b, &wv, 24);
        assert!(kept >= 12);
        assert!(err <= 1e-4, "{wv:?}: {err:e}");
    }
}

#[test]
fn matches_finite_differences_through_pca() {
    let w = bundle();
    let policy = NormalizationPolicy::default_for(&w.spec);
    let raw = Pipeline { weights: &w, policy: &policy, pca: None };
    let corpus: Vec<_> = (0..6)
        .map(|i| raw.embed(&EncoderInput::from_solid(&solid(ContentClass::ALL[i], i % 4, 0.1, "c"))).unwrap())
        .collect();
    let pca = fit_pca(&corpus, 4).unwrap();
    let pipe = Pipeline { pca: Some(&pca), ..raw };
    let a = solid(ContentClass::Cross, 0, 0.0, "a");
    let b = solid(ContentClass::UShape, 3, 0.3, "b");
    let (err, _) = fd_error(&pipe, &a, &b, &LayerWeights::uniform(7), 18);
    assert!(err <= 1e-4, "{err:e}");
}

/// Layer 0 without normalization: D = 1 - <T(C), R> / (|T(C)| |R|) with
/// C = (1/N) Σ x xᵀ and T the upper triangle. Differentiated with full matrices.
#[test]
fn feature_layer_closed_form() {
    let w = bundle();
    let policy = NormalizationPolicy::uniform(LayerNorm::None, 7);
    let pipe = Pipeline { weights: &w, policy: &policy, pca: None };
    let a = solid(ContentClass::Rectangle, 3, 0.0, "a");
    let b = solid(ContentClass::LShape, 1, 0.2, "b");
    let field = style_gradient(&pipe, &a, &b, &LayerWeights::one_hot(7, 0), GradMode::Analytic).unwrap();

    let rows = |s: &UVSolid| -> Vec<DVector<f64>> {
        s.faces
            .iter()
            .flat_map(|f| (0..SAMPLES).filter(|&k| f.visible(k)).map(move |k| {
                DVector::from_iterator(6, f.grid[k * CHANNELS..k * CHANNELS + 6].iter().map(|&v| v as f64))
            }))
            .collect()
    };
    let second_moment = |xs: &[DVector<f64>]| {
        xs.iter().fold(DMatrix::zeros(6, 6), |m, x| m + x * x.transpose()) / xs.len() as f64
    };
    let upper = |m: &DMatrix<f64>| DMatrix::from_fn(6, 6, |i, j| if i <= j { m[(i, j)] } else { 0.0 });
    let xa = rows(&a);
    let n = xa.len() as f64;
    let ta = upper(&second_moment(&xa));
    let tb = upper(&second_moment(&rows(&b)));
    let inner = ta.dot(&tb);
    let na = ta.norm();
    let nb = tb.norm();
    // d<T(C), R>/dx = (1/N)(R + Rᵀ) x ;  d|T(C)|²/dx = (2/N)(T + Tᵀ) x
    let sym_b = &tb + tb.transpose();
    let sym_a = &ta + ta.transpose();
    for (x, g) in xa.iter().zip(&field.gradients) {
        let d_inner = &sym_b * x / n;
        let d_sq = &sym_a * x * (2.0 / n);
        let grad = -(d_inner / (na * nb) - d_sq * (inner / (2.0 * na * na * na * nb)));
        let scale = grad.amax().max(1e-300);
        for k in 0..3 {
            let rel = (grad[k] - g[k]).abs() / scale;
            assert!(rel <= 1e-6, "{rel:e}");
        }
    }
}

#[test]
fn swapping_roles_gives_the_same_gradient() {
    // D(a, b) = D(b, a): differentiate the second slot by finite differences
    let w = bundle();
    let policy = NormalizationPolicy::default_for(&w.spec);
    let pipe = Pipeline { weights: &w, policy: &policy, pca: None };
    let a = solid(ContentClass::UShape, 1, 0.2, "a");
    let b = solid(ContentClass::TShape, 3, -0.1, "b");
    let wv = LayerWeights::uniform_over(7, &[0, 1, 2, 3]);
    let ia = EncoderInput::<f64>::from_solid(&a);
    let eb = pipe.embed(&EncoderInput::from_solid(&b)).unwrap();
    let (d_ab, g) = input_gradient(&pipe, &ia, &eb, &wv).unwrap();
    let d_ba = style_distance(&eb, &pipe.embed(&ia).unwrap(), &wv).unwrap();
    assert!((d_ab - d_ba).abs() < 1e-14);
    let h = fd_step(&a);
    let fd = finite_difference_at(&pipe, &ia, &eb, &wv, &coords(&ia, 12, 53), h).unwrap();
    let mut x = ia.clone();
    for s in fd.iter().filter(|s| !s.near_kink) {
        let mut second = |v: f64| {
            x.position_mut(s.sample)[s.axis] = v;
            style_distance(&eb, &pipe.embed(&x).unwrap(), &wv).unwrap()
        };
        let orig = ia.position(s.sample)[s.axis];
        let swapped = (second(orig + h) - second(orig - h)) / (2.0 * h);
        x.position_mut(s.sample)[s.axis] = orig;
        assert!((swapped - s.value).abs() <= 1e-12 * (1.0 + s.value.abs()));
        assert!((swapped - g[s.sample * IN + s.axis]).abs() <= 1e-4 * g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
}

#[test]
fn isolated_masked_samples_get_no_gradient() {
    let w = bundle();
    let policy = NormalizationPolicy::default_for(&w.spec);
    let pipe = Pipeline { weights: &w, policy: &policy, pca: None };
    let a = solid(ContentClass::Star, 0, 0.0, "a");
    let b = solid(ContentClass::Cross, 2, 0.0, "b");
    let mut input = EncoderInput::<f64>::from_solid(&a);
    // hide a 5×5 corner block of face 0; its corner sample is then out of reach
    for s in (0..SAMPLES).filter(|s| s / GRID < 5 && s % GRID < 5) {
        input.mask[s] = false;
        input.data[s * CHANNELS + crate::geom::CH_MASK] = 0.0;
    }
    let r = pipe.embed(&EncoderInput::from_solid(&b)).unwrap();
    let wv = LayerWeights::uniform(7);
    let (d0, g) = input_gradient(&pipe, &input, &r, &wv).unwrap();
    // three 3×3 convolutions see 3 cells away
    let isolated: Vec<usize> = (0..input.mask.len())
        .filter(|&k| {
            let (f, s) = (k / SAMPLES, k % SAMPLES);
            let (y, x) = ((s / GRID) as isize, (s % GRID) as isize);
            (-3..=3).all(|dy| {
                (-3..=3).all(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    !(0..GRID as isize).contains(&yy)
                        || !(0..GRID as isize).contains(&xx)
                        || !input.mask[f * SAMPLES + (yy * GRID as isize + xx) as usize]
                })
            })
        })
        .collect();
    assert!(!isolated.is_empty(), "fixture needs isolated masked samples");
    let mut moved = input.clone();
    for &k in &isolated {
        assert_eq!(&g[k * IN..k * IN + 3], &[0.0; 3]);
        moved.position_mut(k)[0] += 0.5;
    }
    assert_eq!(pipe.distance(&moved, &r, &wv).unwrap(), d0);
}

#[test]
fn finite_difference_mode_covers_every_visible_sample() {
    let w = bundle();
    let policy = NormalizationPolicy::default_for(&w.spec);
    let pipe = Pipeline { weights: &w, policy: &policy, pca: None };
    let a = solid(ContentClass::Rectangle, 0, 0.0, "a");
    let b = solid(ContentClass::Rectangle, 3, 0.0, "b");
    let wv = LayerWeights::uniform_over(7, &[0, 1, 2, 3]);
    let an = style_gradient(&pipe, &a, &b, &wv, GradMode::Analytic).unwrap();
    let fd = style_gradient(&pipe, &a, &b, &wv, GradMode::FiniteDifference).unwrap();
    assert_eq!(an.samples, fd.samples);
    assert_eq!(an.positions, fd.positions);
    assert!((an.distance - fd.distance).abs() < 1e-15);
    // kinks included, so only a coarse agreement on the whole field
    let diff = an
        .gradients
        .iter()
        .zip(&fd.gradients)
        .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
        .fold(0.0, f64::max);
    assert!(diff <= 0.05 * an.max_norm(), "{diff:e} vs {:e}", an.max_norm());
}

#[test]
fn glyph_exports() {
    let field = GradientField {
        subject_id: "a".into(),
        reference_id: "b".into(),
        weights: LayerWeights::uniform(7),
        mode: GradMode::Analytic,
        samples: vec![0, 1],
        positions: vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]],
        gradients: vec![[1.0, 0.0, -2.0], [0.0, 0.5, 0.0]],
        distance: 0.3,
        diagonal: 2.0,
    };
    assert!((field.default_scale() * 5f64.sqrt() - 0.1).abs() < 1e-15);
    let g1 = glyphs(&field, 0.1);
    let g2 = glyphs(&field, 0.2);
    for (x, y) in g1.iter().zip(&g2) {
        assert_eq!(x.p, y.p);
        for k in 0..3 {
            assert_eq!(2.0 * x.d[k], y.d[k]);
        }
    }
    assert_eq!(g1[0].d, [-0.1, -0.0, 0.2]);
    assert!(glyphs(&field, 0.0).iter().all(|g| g.d.iter().all(|&v| v == 0.0)));
    let zero = GradientField {
        gradients: vec![[0.0; 3]; 2],
        ..field.clone()
    };
    assert_eq!(zero.default_scale(), 0.0);
    assert!(glyphs(&zero, 3.0).iter().all(|g| g.d.iter().all(|&v| v == 0.0)));

    let obj = export_obj(&field, 0.1);
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 4);
    assert_eq!(obj.lines().filter(|l| l.starts_with("l ")).collect::<Vec<_>>(), vec!["l 1 2", "l 3 4"]);
    let json: serde_json::Value = serde_json::from_str(&export_json(&field, 0.1)).unwrap();
    assert_eq!(json[1]["p"], serde_json::json!([1.0, 2.0, 3.0]));
    assert_eq!(json.as_array().unwrap().len(), 2);
}
