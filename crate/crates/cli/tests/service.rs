use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use uvstyle::encoder::{init_weights, EncoderSpec};
use uvstyle::geom::save_dataset;
use uvstyle::index::{build_store, embed_dataset, topk, StoreDir};
use uvstyle::style::{fit_pca, LayerWeights, NormalizationPolicy};
use uvstyle::synth::{generate_dataset, DatasetConfig};
use uvstyle_cli::mesh::mesh_preview;
use uvstyle_cli::service::{router, AppState, ServiceConfig};

/// Dataset and store with an optional PCA target, written under `dir`.
fn fixture(dir: &Path, pca: Option<usize>) {
    let ds = generate_dataset(&DatasetConfig::reference(1, 3)).unwrap();
    save_dataset(&ds, dir.join("data")).unwrap();
    let weights = init_weights(&EncoderSpec::with_seed(1)).unwrap();
    let policy = NormalizationPolicy::default_for(&weights.spec);
    let pca = pca.map(|t| fit_pca(&embed_dataset(&ds, &weights, &policy).unwrap(), t).unwrap());
    StoreDir {
        store: build_store(&ds, &weights, &policy, pca.as_ref()).unwrap(),
        weights,
        policy,
        pca,
    }
    .save(dir.join("store"))
    .unwrap();
}

fn app(dir: &Path) -> Arc<AppState> {
    std::fs::create_dir_all(dir.join("ui")).unwrap();
    std::fs::write(dir.join("ui/index.html"), "<html>ui</html>").unwrap();
    Arc::new(
        AppState::new(ServiceConfig {
            store: dir.join("store"),
            data: dir.join("data"),
            port: 0,
            static_dir: Some(dir.join("ui")),
        })
        .unwrap(),
    )
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

#[tokio::test]
async fn solids_are_paginated_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    let (s, v) = call(&app, "GET", "/api/solids?page=1&per_page=10", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total"], 24);
    assert_eq!(v["solids"].as_array().unwrap().len(), 10);
    assert_eq!(v["solids"][0]["id"], "s10");
    assert!(v["solids"][0]["labels"]["style"].is_string());
    let (_, last) = call(&app, "GET", "/api/solids?page=2&per_page=10", None).await;
    assert_eq!(last["solids"].as_array().unwrap().len(), 4);
    let (s, v) = call(&app, "GET", "/api/solids?per_page=0", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "per_page");
}

#[tokio::test]
async fn solid_metadata_and_mesh() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    let (s, v) = call(&app, "GET", "/api/solids/s3", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["id"], "s3");
    assert!(v["num_faces"].as_u64().unwrap() >= 6);
    let (s, m) = call(&app, "GET", "/api/solids/s3/mesh", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["vertices"].as_array().unwrap().len() as u64, v["visible_samples"].as_u64().unwrap());
    let (s, v) = call(&app, "GET", "/api/solids/nope/mesh", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
}

#[test]
fn mesh_triangles_use_only_visible_samples() {
    let ds = generate_dataset(&DatasetConfig::reference(1, 5)).unwrap();
    for s in &ds.solids {
        let m = mesh_preview(s);
        assert_eq!(m.vertices.len(), s.visible_count());
        let n = m.vertices.len() as u32;
        assert!(m.triangles.iter().flatten().all(|&i| i < n));
        // fully visible side faces give two triangles per cell
        assert!(m.triangles.len() >= 2 * 81 * 4);
    }
}

#[tokio::test]
async fn layers_describe_the_store() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), Some(10));
    let app = app(dir.path());
    let (s, v) = call(&app, "GET", "/api/layers", None).await;
    assert_eq!(s, StatusCode::OK);
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 7);
    assert_eq!(layers[0]["name"], "features");
    assert_eq!(layers[0]["gram_length"], 21);
    assert_eq!(layers[3]["stored_length"], 10);
    assert_eq!(layers[0]["normalization"], "face_recenter");
    assert_eq!(layers[6]["normalization"], "instance_norm");
    assert!(v["reduction"].as_str().unwrap().starts_with("pca10:"));
}

#[tokio::test]
async fn query_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    let w = [0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0];
    let (s, v) = call(&app, "POST", "/api/query", Some(json!({ "query_id": "s5", "weights": w, "k": 6 }))).await;
    assert_eq!(s, StatusCode::OK);
    let sd = StoreDir::load(dir.path().join("store"), None).unwrap();
    let expect = topk(&sd.store, "s5", &LayerWeights::new(w.to_vec()).unwrap(), 6, true).unwrap();
    let ids: Vec<&str> = v["results"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    let want: Vec<&str> = expect.results.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, want);
    assert_eq!(v["results"][0]["distance"].as_f64().unwrap(), expect.results[0].distance);

    // default weights are uniform
    let (_, v) = call(&app, "POST", "/api/query", Some(json!({ "query_id": "s5" }))).await;
    assert_eq!(v["weights"].as_array().unwrap().len(), 7);
    assert_eq!(v["k"], 10);
}

#[tokio::test]
async fn off_simplex_weights_are_rejected_per_field() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    for w in [json!([0.5, 0.6, 0, 0, 0, 0, 0]), json!([1.5, -0.5, 0, 0, 0, 0, 0]), json!([1.0, 0.0])] {
        let (s, v) = call(&app, "POST", "/api/query", Some(json!({ "query_id": "s1", "weights": w }))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
        assert_eq!(v["field"], "weights");
        assert!(!v["error"].as_str().unwrap().is_empty());
    }
    let (s, v) = call(&app, "POST", "/api/query", Some(json!({ "query_id": "s1", "k": 0 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "k");
    let (s, _) = call(&app, "POST", "/api/query", Some(json!({ "query_id": "zz" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/api/query", Some(json!({ "k": 3 }))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn fewshot_with_one_positive_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    let (s, v) = call(&app, "POST", "/api/fewshot", Some(json!({ "positives": ["s2"], "k": 4 }))).await;
    assert_eq!(s, StatusCode::OK);
    let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
    assert!(w.iter().all(|&x| x == 1.0 / 7.0));
    assert_eq!(v["results"]["results"][0]["id"], "s2");

    let body = json!({ "positives": ["s2", "s8"], "auto_negative_count": 5, "seed": 42, "k": 3 });
    let (s, a) = call(&app, "POST", "/api/fewshot", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a["seed"], 42);
    assert_eq!(a["negatives"].as_array().unwrap().len(), 5);
    let sum: f64 = a["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    let (_, b) = call(&app, "POST", "/api/fewshot", Some(body)).await;
    assert_eq!(a, b);

    let (s, v) = call(&app, "POST", "/api/fewshot", Some(json!({ "positives": [] }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "positives");
}

#[tokio::test]
async fn gradient_returns_one_glyph_per_visible_sample() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), Some(12));
    let app = app(dir.path());
    let (_, info) = call(&app, "GET", "/api/solids/s4", None).await;
    let body = json!({ "subject_id": "s4", "reference_id": "s20", "weights": [0.25, 0.25, 0.25, 0.25, 0, 0, 0] });
    let (s, v) = call(&app, "POST", "/api/gradient", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let g = v["glyphs"].as_array().unwrap();
    assert_eq!(g.len() as u64, info["visible_samples"].as_u64().unwrap());
    assert_eq!(g[0]["p"].as_array().unwrap().len(), 3);
    assert!(v["distance"].as_f64().unwrap() > 0.0);
    let (s, v) = call(
        &app,
        "POST",
        "/api/gradient",
        Some(json!({ "subject_id": "s4", "reference_id": "s20", "k_scale": -1.0 })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "k_scale");
}

#[tokio::test]
async fn reload_swaps_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    let (_, before) = call(&app, "GET", "/api/layers", None).await;
    assert_eq!(before["layers"][1]["stored_length"], 136);
    let held = app.snapshot();
    fixture(dir.path(), Some(8));
    let (s, v) = call(&app, "POST", "/api/reload", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, after) = call(&app, "GET", "/api/layers", None).await;
    assert_eq!(after["layers"][1]["stored_length"], 8);
    // a reader holding the old snapshot keeps a consistent view
    assert_eq!(held.store.store.layer_lengths()[1], 136);

    // a broken store leaves the live snapshot in place
    std::fs::remove_file(dir.path().join("store/embeddings.uvstore")).unwrap();
    let (s, _) = call(&app, "POST", "/api/reload", None).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    let (_, still) = call(&app, "GET", "/api/layers", None).await;
    assert_eq!(still["layers"][1]["stored_length"], 8);
}

#[tokio::test]
async fn static_bundle_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), None);
    let app = app(dir.path());
    let (s, v) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, Value::String("<html>ui</html>".into()));
}

#[test]
fn missing_store_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = AppState::new(ServiceConfig {
        store: dir.path().join("absent"),
        data: dir.path().join("data"),
        port: 0,
        static_dir: None,
    })
    .err()
    .unwrap();
    assert!(err.to_string().contains("absent"), "{err}");
}
