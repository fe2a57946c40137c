#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;

use dermo_core::cascade::{train_recognition, MaskSource, Protocol};
use dermo_core::data::{gen_synthetic, Sample, SyntheticSpec};
use dermo_core::net::{DermoNet, NetworkConfig};
use dermo_core::trainer::{train, TrainConfig, TrainData, TrainMode};
use dermo_core::weights::save_weights;
use http_body_util::BodyExt;
use tower::ServiceExt;

/// The toy network at 64x64 for both stages.
pub fn toy64(classes: usize) -> NetworkConfig {
    NetworkConfig {
        input_hw_detection: (64, 64),
        input_hw_recognition: (64, 64),
        num_classes: classes,
        ..NetworkConfig::toy()
    }
}

pub fn samples(n: usize, classes: usize, seed: u64) -> Vec<Sample> {
    gen_synthetic(&SyntheticSpec::new(n, classes, seed).with_size(64, 80)).unwrap()
}

pub struct Trained {
    pub seg: PathBuf,
    pub cls3: PathBuf,
    pub cls2: PathBuf,
}

fn quick(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 4,
        batch_size: 4,
        patience: 100,
        ..TrainConfig::default()
    }
}

/// Briefly trained toy weights, written once per test binary.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-weights-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data = TrainData::split(&samples(16, 3, 5), 0.25).unwrap();
        let mut seg = DermoNet::new(toy64(3), 1).unwrap();
        let state = train(&mut seg, &data, &quick(TrainMode::Segmentation)).unwrap();
        seg.restore(&state.best_snapshot).unwrap();

        let cls = |classes: usize, seed: u64| {
            let data = TrainData::split(&samples(16, classes, seed), 0.25).unwrap();
            let mut net = DermoNet::new(toy64(classes), seed).unwrap();
            let cfg = quick(TrainMode::Recognition);
            let state = train_recognition(&mut net, MaskSource::Oracle, &data, &Protocol::P1, &cfg).unwrap();
            net.restore(&state.best_snapshot).unwrap();
            net
        };
        let t = Trained {
            seg: dir.join("seg.ddwf"),
            cls3: dir.join("cls3.ddwf"),
            cls2: dir.join("cls2.ddwf"),
        };
        save_weights(&seg, &t.seg).unwrap();
        save_weights(&cls(3, 6), &t.cls3).unwrap();
        save_weights(&cls(2, 7), &t.cls2).unwrap();
        t
    })
}

const BOUNDARY: &str = "dermo-test-boundary";

pub enum Part<'a> {
    File(&'a str, &'a [u8]),
    Text(&'a str, &'a str),
}

pub fn multipart(parts: &[Part]) -> Vec<u8> {
    let mut body = Vec::new();
    for part in parts {
        body.extend(format!("--{BOUNDARY}\r\n").as_bytes());
        match part {
            Part::File(name, bytes) => {
                body.extend(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"upload\"\r\nContent-Type: application/octet-stream\r\n\r\n")
                        .as_bytes(),
                );
                body.extend(*bytes);
            }
            Part::Text(name, value) => {
                body.extend(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}").as_bytes());
            }
        }
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn post(app: &Router, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/predict")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap();
    send(app, req).await
}

pub fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

pub async fn expect_error(app: &Router, body: Vec<u8>, status: StatusCode, code: &str) -> serde_json::Value {
    let (got, bytes) = post(app, body).await;
    let v = json(&bytes);
    assert_eq!((got, v["error"].as_str().unwrap()), (status, code), "{v}");
    assert!(v["message"].is_string());
    v
}
