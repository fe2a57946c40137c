//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p dermo-cli --test acceptance [-- NAME...]` runs every
//! criterion, or only those whose name contains one of the arguments.

mod common;

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::{expect_error, json, multipart, post, send, trained, Part};
use dermo_cli::server::{router, Models, ServerConfig};
use dermo_core::autograd::{global_avg_pool, maxpool2d, upsample_nn, Padding, Tape, Var};
use dermo_core::cascade::{cascade_pipeline, train_recognition, MaskSource, Protocol};
use dermo_core::data::{encode_pnm, gen_synthetic, split_by_id_salted, AugmentationSpec, Sample, SyntheticSpec};
use dermo_core::loss::{combined_loss_value, WeightMode, EPSILON};
use dermo_core::metrics::{cls_metrics_from_confusion, roc_auc, seg_confusion, seg_metrics, SegRates, EvalReport};
use dermo_core::net::{fuse_ffm, DermoNet, NetworkConfig, Outputs};
use dermo_core::nn::{init_module, BatchNorm2d, Conv2d, Ctx, Dense, Dropout, Module, ParamKind, SeparableConv2d};
use dermo_core::trainer::{evaluate, train, TrainConfig, TrainData, TrainMode};
use dermo_core::weights::{load_weights, model_version, save_weights, WeightFile};
use dermo_core::{rng, Error, Result, Tensor};
use rand::Rng;

type Criterion = (&'static str, fn() -> String);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("gradients", gradients),
        ("loss-oracle", loss_oracle),
        ("metric-oracles", metric_oracles),
        ("dwsc-ratio", dwsc_ratio),
        ("overfit-segmentation", overfit),
        ("learnability-recognition", learnability),
        ("p2-minority-recall", p2_minority_recall),
        ("serialization", serialization),
        ("service-contract", service_contract),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail} ({secs:.1} s)"),
            Err(panic) => {
                failed += 1;
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name:<26} {msg} ({secs:.1} s)");
            }
        }
    }
    println!("{}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> String {
    let took = start.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
    format!("{:.0} s of {} s budget", took.as_secs_f64(), limit.as_secs())
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

// ---------------------------------------------------------------- gradients

type Forward<M> = for<'t> fn(&M, &Ctx<'t>, Var<'t>) -> Result<Var<'t>>;

struct Grads {
    value: f64,
    input: Vec<f64>,
    params: Vec<(String, Vec<f64>)>,
}

/// Weighted sum of the layer output, in train mode with a fixed dropout
/// stream, plus its gradients when asked.
fn objective<M: Module>(m: &M, x: &Tensor, f: Forward<M>, train: bool, grads: bool) -> Grads {
    let stream = RefCell::new(rng::seeded(0xd20));
    let tape = Tape::new();
    let ctx = if train { Ctx::train(&tape, &stream) } else { Ctx::eval(&tape) };
    let xv = if grads { tape.var(x.clone()) } else { tape.constant(x.clone()) };
    let y = f(m, &ctx, xv).unwrap();
    let w = tape.constant(uniform(&y.shape(), 0x51, 0.5, 1.5));
    let loss = y.mul(w).unwrap().sum().unwrap();
    let value = loss.value().item();
    let mut out = Grads {
        value,
        input: Vec::new(),
        params: Vec::new(),
    };
    if grads {
        tape.backward(loss).unwrap();
        out.input = tape.grad(xv).map(Tensor::into_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        m.visit("", &mut |name, p| {
            if p.kind.trainable() {
                let g = tape.param_grad(p.id()).map(Tensor::into_vec).unwrap_or_else(|| vec![0.0; p.value.len()]);
                out.params.push((name.to_string(), g));
            }
        });
    }
    out
}

/// Worst relative error over input entries and `per_tensor` entries of each
/// trainable tensor (all of them when `None`).
fn worst_error<M: Module + Clone>(
    m: &M,
    x: &Tensor,
    f: Forward<M>,
    train: bool,
    step: f64,
    per_tensor: Option<usize>,
) -> (f64, String) {
    let g = objective(m, x, f, train, true);
    let mut worst = (0.0, String::new());
    let mut note = |rel: f64, what: String| {
        if rel > worst.0 {
            worst = (rel, what);
        }
    };
    for i in 0..x.len() {
        let probe = |d: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += d;
            objective(m, &p, f, train, false).value
        };
        note(rel_error(g.input[i], (probe(step) - probe(-step)) / (2.0 * step)), format!("input[{i}]"));
    }
    for (name, grad) in &g.params {
        let stride = per_tensor.map_or(1, |k| (grad.len() / k).max(1));
        for i in (0..grad.len()).step_by(stride) {
            let probe = |d: f64| {
                let mut mm = m.clone();
                mm.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += d;
                    }
                });
                objective(&mm, x, f, train, false).value
            };
            note(rel_error(grad[i], (probe(step) - probe(-step)) / (2.0 * step)), format!("{name}[{i}]"));
        }
    }
    worst
}

#[derive(Clone)]
struct NoParams;

impl Module for NoParams {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &dermo_core::nn::Param)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut dermo_core::nn::Param)) {}
}

fn seeded<M: Module>(mut m: M, seed: u64) -> M {
    init_module(&mut m, &mut rng::seeded(seed)).unwrap();
    let mut k = 0;
    // non-trivial biases, scales and shifts
    m.visit_mut("", &mut |_, p| {
        if matches!(p.kind, ParamKind::Bias | ParamKind::Gamma | ParamKind::Beta) {
            k += 1;
            p.value = uniform(p.value.shape(), seed * 100 + k, 0.3, 1.2);
        }
    });
    m
}

fn gradients() -> String {
    let start = Instant::now();
    const LAYER_TOL: f64 = 1e-4;
    let mut layers = Vec::new();
    for seed in 0..3 {
        let x = uniform(&[2, 6, 5, 3], 100 + seed, -2.0, 2.0);
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let conv = seeded(Conv2d::new(3, 3, 4, stride, padding).unwrap(), seed);
            layers.push(("conv", worst_error(&conv, &x, |m, c, v| m.forward(c, v), true, 1e-5, None)));
            let sep = seeded(SeparableConv2d::new(3, 3, 4, stride, padding).unwrap(), seed);
            layers.push(("separable conv", worst_error(&sep, &x, |m, c, v| m.forward(c, v), true, 1e-5, None)));
        }
        let bn = seeded(BatchNorm2d::new(3).unwrap(), seed);
        layers.push(("batch norm (train)", worst_error(&bn, &x, |m, c, v| m.forward(c, v), true, 1e-5, None)));
        layers.push(("batch norm (eval)", worst_error(&bn, &x, |m, c, v| m.forward(c, v), false, 1e-5, None)));
        let flat = uniform(&[2, 4], 200 + seed, -2.0, 2.0);
        let dense = seeded(Dense::new(4, 3).unwrap(), seed);
        layers.push(("dense", worst_error(&dense, &flat, |m, c, v| m.forward(c, v), true, 1e-5, None)));
        let dropout: Forward<NoParams> = |_, c, v| Dropout::new(0.5)?.forward(c, v);
        layers.push(("dropout", worst_error(&NoParams, &flat, dropout, true, 1e-5, None)));
        let fm = uniform(&[2, 4, 6, 2], 300 + seed, -2.0, 2.0);
        layers.push(("max pool", worst_error(&NoParams, &fm, |_, _, v| maxpool2d(v, 2, 2), true, 1e-5, None)));
        layers.push(("global avg pool", worst_error(&NoParams, &fm, |_, _, v| global_avg_pool(v), true, 1e-5, None)));
        layers.push(("upsample", worst_error(&NoParams, &fm, |_, _, v| upsample_nn(v, 2), true, 1e-5, None)));
        layers.push(("sigmoid", worst_error(&NoParams, &fm, |_, _, v| v.sigmoid(), true, 1e-5, None)));
        layers.push(("softmax", worst_error(&NoParams, &flat, |_, _, v| v.softmax(), true, 1e-5, None)));
        layers.push(("feature fusion", worst_error(&NoParams, &fm, |_, _, v| fuse_ffm(v, v.mul(v)?), true, 1e-5, None)));
    }
    let (layer, (layer_worst, at)) = layers.iter().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).unwrap();
    assert!(*layer_worst < LAYER_TOL, "{layer} {at}: relative error {layer_worst:.3e}");

    let net = DermoNet::new(NetworkConfig::micro(), 11).unwrap();
    let x = uniform(&[1, 32, 32, 3], 12, -1.0, 1.0);
    let forward: Forward<DermoNet> = |net, ctx, v| {
        let out = net.forward(ctx, v, Outputs::Both)?;
        let m = out.mask_probs.unwrap().mean()?;
        let p = out.heads.unwrap().probs;
        let wp = ctx.tape.constant(uniform(&p.shape(), 78, 0.5, 1.5));
        m.add(p.mul(wp)?.sum()?)
    };
    let (net_worst, at) = worst_error(&net, &x, forward, false, 1e-4, Some(3));
    assert!(net_worst < 1e-3, "micro network {at}: relative error {net_worst:.3e}");
    let budget = within(start, Duration::from_secs(300), "gradient checks");
    format!("layers max rel {layer_worst:.1e}, micro network max rel {net_worst:.1e}; {budget}")
}

// -------------------------------------------------------------- loss oracle

fn loss_oracle() -> String {
    fn scalar(y: &[f64], y_hat: &[f64]) -> f64 {
        let (mut inter, mut ys, mut ps, mut ll) = (0.0, 0.0, 0.0, 0.0);
        for (&y, &p) in y.iter().zip(y_hat) {
            let p = p.clamp(EPSILON, 1.0 - EPSILON);
            inter += y * p;
            ys += y;
            ps += p;
            ll += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        1.0 - inter / (ys + ps - inter) - ll / y.len() as f64
    }
    let t = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
    let v = combined_loss_value(&t(&[1.0, 0.0]), &t(&[0.5, 0.5])).unwrap();
    assert!((v - (2.0 / 3.0 + 2f64.ln())).abs() < 1e-9, "hand case {v}");
    assert!((v - 1.35981).abs() < 5e-6, "hand case {v}");
    let mut r = rng::seeded(10);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let y: Vec<f64> = (0..8).map(|_| f64::from(r.random_bool(0.4) as u8)).collect();
        let p: Vec<f64> = (0..8).map(|_| r.random::<f64>()).collect();
        let d = (combined_loss_value(&t(&y), &t(&p)).unwrap() - scalar(&y, &p)).abs();
        assert!(d < 1e-9, "{y:?} {p:?}: differs by {d:e}");
        worst = worst.max(d);
    }
    format!("[1,0] vs [0.5,0.5] = {v:.5}; 200 random cases max diff {worst:.1e}")
}

// ----------------------------------------------------------- metric oracles

fn metric_oracles() -> String {
    let mut r = rng::seeded(5);
    for case in 0..500 {
        let n = r.random_range(1..64);
        let gt: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.3) as u8)).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let count = |g: bool, p: bool| (0..n).filter(|&i| (gt[i] == 1.0) == g && (pred[i] >= 0.5) == p).count() as u64;
        let (tp, tn, fp, fn_) = (count(true, true), count(false, false), count(false, true), count(true, false));
        let c = seg_confusion(&gt, &pred, 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_), "case {case}");
        let rates = SegRates::from_counts(&c);
        let s = seg_metrics(&[rates]).unwrap();
        if tp + fn_ > 0 {
            assert_eq!(s.m_rc.mean, tp as f64 / (tp + fn_) as f64);
            assert_eq!(s.m_iou.mean, tp as f64 / (tp + fn_ + fp) as f64);
        }
        if tn + fp > 0 {
            assert_eq!(s.m_sp.mean, tn as f64 / (tn + fp) as f64);
        }
    }

    let mut worst = 0.0f64;
    for case in 0..500 {
        let n = r.random_range(2..60);
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8)) / 8.0).collect();
        let mut truths: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        truths[0] = true;
        truths[1] = false;
        let mut wins = 0.0;
        let (mut pos, mut neg) = (0.0, 0.0);
        for i in 0..n {
            if truths[i] {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
            for j in 0..n {
                if truths[i] && !truths[j] {
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let d = (roc_auc(&scores, &truths).unwrap().auc - wins / (pos * neg)).abs();
        assert!(d < 1e-9, "case {case}: AUC differs from Mann-Whitney by {d:e}");
        worst = worst.max(d);
    }

    let rep = cls_metrics_from_confusion(vec![vec![273, 4], vec![31, 71]], &["Nev", "Mel"]).unwrap();
    let (nev, mel) = (rep.per_class[0].recall, rep.per_class[1].recall);
    assert_eq!(mel, 71.0 / 75.0);
    assert_eq!(nev, 273.0 / 304.0);
    assert_eq!(format!("{:.2} {:.2}", 100.0 * mel, 100.0 * nev), "94.67 89.80");
    format!(
        "500 mask pairs exact; 500 tied score sets max diff {worst:.1e}; Mel {:.2}%, Nev {:.2}%",
        100.0 * mel,
        100.0 * nev
    )
}

// --------------------------------------------------------------- dwsc ratio

fn dwsc_ratio() -> String {
    let kernels = |m: &dyn Module| {
        let mut n = 0;
        m.visit("", &mut |_, p| {
            if matches!(p.kind, ParamKind::Kernel { .. }) {
                n += p.value.len();
            }
        });
        n
    };
    let mut cases = 0;
    for k in [1usize, 3, 5, 7] {
        for n in [1usize, 2, 3, 8, 17, 64, 128, 256] {
            for cin in [1usize, 3, 16, 64] {
                let sep = kernels(&SeparableConv2d::new(k, cin, n, 1, Padding::Same).unwrap());
                let std = kernels(&Conv2d::new(k, cin, n, 1, Padding::Same).unwrap());
                // sep / std == 1/N + 1/K^2, cross-multiplied by N K^2
                assert_eq!(sep * n * k * k, std * (k * k + n), "K={k} N={n} M={cin}");
                cases += 1;
            }
        }
    }
    format!("{cases} (K, N, M) combinations exact")
}

// ------------------------------------------------------------------ overfit

fn overfit() -> String {
    let start = Instant::now();
    let samples = gen_synthetic(&SyntheticSpec::new(8, 3, 1)).unwrap();
    let data = TrainData {
        train: samples.clone(),
        val: samples.clone(),
    };
    let mut net = DermoNet::new(NetworkConfig::toy(), 1).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Segmentation,
        epochs: 100,
        batch_size: 4,
        seed: 1,
        patience: 200,
        ..TrainConfig::default()
    };
    let state = train(&mut net, &data, &cfg).unwrap();
    net.restore(&state.best_snapshot).unwrap();
    let miou = evaluate(&net, &samples, TrainMode::Segmentation).unwrap().m_iou.unwrap().mean;
    assert!(miou > 0.90, "train mIoU {miou:.4} after {} epochs", state.epochs_run);
    let budget = within(start, Duration::from_secs(15 * 60), "overfit run");
    format!("train mIoU {miou:.4} at epoch {} of {}; {budget}", state.best_epoch, state.epochs_run)
}

// ------------------------------------------------------------- learnability

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn accuracy(r: &EvalReport) -> f64 {
    let total: u64 = r.confusion.iter().flatten().sum();
    let hits: u64 = (0..r.confusion.len()).map(|i| r.confusion[i][i]).sum();
    hits as f64 / total as f64
}

fn recognition_net(classes: usize, seed: u64) -> DermoNet {
    let config = NetworkConfig {
        input_hw_recognition: (64, 64),
        num_classes: classes,
        ..NetworkConfig::toy()
    };
    DermoNet::new(config, seed).unwrap()
}

fn learnability() -> String {
    let start = Instant::now();
    let samples = gen_synthetic(&SyntheticSpec::new(200, 3, 7)).unwrap();
    let (rest, held) = split_by_id_salted(&samples, 0.2, 0x5eed);
    let (rest, held) = (pick(&samples, &rest), pick(&samples, &held));
    let data = TrainData::split(&rest, 0.2).unwrap();
    let mut net = recognition_net(3, 3);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 8,
        seed: 3,
        patience: 100,
        ..TrainConfig::default()
    };
    let state = train_recognition(&mut net, MaskSource::Oracle, &data, &Protocol::P1, &cfg).unwrap();
    net.restore(&state.best_snapshot).unwrap();
    let report = cascade_pipeline(MaskSource::Oracle, &net, &held).unwrap();
    let (acc, auc) = (accuracy(&report), report.auc.macro_avg.unwrap());
    assert!(acc > 0.85 && auc > 0.90, "held-out accuracy {acc:.4}, macro AUC {auc:.4}");
    let budget = within(start, Duration::from_secs(30 * 60), "learnability run");
    format!(
        "{} held-out samples: accuracy {acc:.4}, macro AUC {auc:.4} after {} epochs; {budget}",
        held.len(),
        state.epochs_run
    )
}

// --------------------------------------------------------- P2 versus P1

fn p2_minority_recall() -> String {
    let mut lines = Vec::new();
    for seed in [11u64, 12, 13] {
        let train_set = gen_synthetic(&SyntheticSpec::new(126, 2, seed).with_ratios(&[4.2, 1.0])).unwrap();
        let held = gen_synthetic(&SyntheticSpec::new(60, 2, seed + 1000)).unwrap();
        let data = TrainData::split(&train_set, 0.2).unwrap();
        let mut recall = [0.0; 2];
        for (i, protocol) in [
            Protocol::P1,
            Protocol::P2(AugmentationSpec {
                seed,
                ..AugmentationSpec::default()
            }),
        ]
        .iter()
        .enumerate()
        {
            let mut net = recognition_net(2, seed);
            // the loss weighting W_i = N_i / N applies under both protocols
            let cfg = TrainConfig {
                epochs: 15,
                batch_size: 8,
                seed,
                patience: 100,
                weight_mode: WeightMode::PaperLiteral,
                ..TrainConfig::default()
            };
            let state = train_recognition(&mut net, MaskSource::Oracle, &data, protocol, &cfg).unwrap();
            net.restore(&state.best_snapshot).unwrap();
            let report = cascade_pipeline(MaskSource::Oracle, &net, &held).unwrap();
            recall[i] = report.per_class[1].recall;
        }
        lines.push(format!("seed {seed}: P1 {:.3} P2 {:.3}", recall[0], recall[1]));
        assert!(recall[1] >= recall[0], "minority recall {}", lines.join(", "));
    }
    format!("minority recall {}", lines.join(", "))
}

// ------------------------------------------------------------ serialization

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/micro_seed7.ddwf");

/// Parses a weight file from the byte layout alone: tensor names and
/// value counts, after checking magic, version and the trailing CRC-32.
fn independent_read(bytes: &[u8]) -> Vec<(String, usize)> {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &bytes[pos..pos + n];
        pos += n;
        s
    };
    assert_eq!(take(4), b"DDWF");
    assert_eq!(take(2), 1u16.to_le_bytes());
    let len = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
    std::str::from_utf8(take(len)).unwrap();
    let count = u32::from_le_bytes(take(4).try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len).to_vec()).unwrap();
        let rank = take(1)[0] as usize;
        let n: usize = (0..rank).map(|_| u32::from_le_bytes(take(4).try_into().unwrap()) as usize).product();
        take(4 * n);
        out.push((name, n));
    }
    let body = bytes.len() - 4;
    let mut crc = 0xFFFF_FFFFu32;
    for &b in &bytes[..body] {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    assert_eq!(u32::from_le_bytes(bytes[body..].try_into().unwrap()), !crc, "checksum");
    out
}

fn serialization() -> String {
    let dir = tempfile::tempdir().unwrap();
    let config = NetworkConfig {
        input_hw_detection: (64, 64),
        input_hw_recognition: (64, 64),
        ..NetworkConfig::toy()
    };
    let mut net = DermoNet::new(config, 21).unwrap();
    let mut r = rng::seeded(22);
    net.visit_mut("", &mut |_, p| p.value.data_mut().iter_mut().for_each(|v| *v *= 1.0 + r.random_range(-1e-4..1e-4)));
    let samples = gen_synthetic(&SyntheticSpec::new(12, 3, 23).with_size(64, 64)).unwrap();
    let path = dir.path().join("w.ddwf");
    save_weights(&net, &path).unwrap();
    let (loaded, _) = load_weights(&path).unwrap();
    let mut drift = 0.0f64;
    for mode in [TrainMode::Segmentation, TrainMode::Recognition] {
        let (a, b) = (evaluate(&net, &samples, mode).unwrap(), evaluate(&loaded, &samples, mode).unwrap());
        let pairs = [
            (a.m_iou.map(|m| m.mean), b.m_iou.map(|m| m.mean)),
            (a.m_rc.map(|m| m.mean), b.m_rc.map(|m| m.mean)),
            (a.m_sp.map(|m| m.mean), b.m_sp.map(|m| m.mean)),
            (a.weighted_avg.map(|m| m.f1), b.weighted_avg.map(|m| m.f1)),
            (a.auc.macro_avg, b.auc.macro_avg),
        ];
        for (x, y) in pairs {
            if let (Some(x), Some(y)) = (x, y) {
                drift = drift.max((x - y).abs());
            }
        }
    }
    assert!(drift < 1e-5, "metric drift {drift:e}");

    let bytes = std::fs::read(&path).unwrap();
    let mut again = dir.path().join("again.ddwf");
    save_weights(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes, "save, load, save is not byte-identical");
    for cut in [1, 4, 100, bytes.len() / 2] {
        let err = WeightFile::parse(&bytes[..bytes.len() - cut]).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "truncated by {cut}: {err}");
    }
    again.set_extension("cut");
    std::fs::write(&again, &bytes[..bytes.len() / 3]).unwrap();
    assert!(load_weights(&again).is_err());

    let golden = std::fs::read(GOLDEN).unwrap();
    let tensors = independent_read(&golden);
    let micro = DermoNet::new(NetworkConfig::micro(), 7).unwrap();
    let expected: Vec<(String, usize)> =
        micro.param_shapes().into_iter().map(|(n, s)| (n, s.iter().product())).collect();
    assert_eq!(tensors, expected);
    assert_eq!(WeightFile::from_net(&micro).to_bytes(), golden);
    format!("metric drift {drift:.1e}; truncation rejected; golden file {} ({} tensors)", model_version(&golden), tensors.len())
}

// --------------------------------------------------------- service contract

fn service_contract() -> String {
    let runtime = tokio::runtime::Runtime::new().unwrap();
    runtime.block_on(async {
        let t = trained();
        let models = || Models::load(&t.seg, std::slice::from_ref(&t.cls3)).unwrap();
        let app = router(models(), &ServerConfig::default());
        let (status, body) = send(&app, Request::get("/api/health").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        let health = json(&body);
        let (_, seg_version) = load_weights(&t.seg).unwrap();
        assert!(health["model_version"].as_str().unwrap().starts_with(&seg_version));

        let img = common::samples(1, 3, 77).remove(0).image;
        let upload = multipart(&[Part::File("image", &encode_pnm(&img)), Part::Text("classes", "3")]);
        let (status, first) = post(&app, upload.clone()).await;
        assert_eq!(status, StatusCode::OK);
        let v = json(&first);
        let total: f64 = v["classes"].as_array().unwrap().iter().map(|c| c["probability"].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6, "probabilities sum to {total}");
        let (bx, bw) = (v["bbox"]["x"].as_u64().unwrap(), v["bbox"]["w"].as_u64().unwrap());
        let (by, bh) = (v["bbox"]["y"].as_u64().unwrap(), v["bbox"]["h"].as_u64().unwrap());
        assert!(bx + bw <= img.width() as u64 && by + bh <= img.height() as u64);
        let (_, second) = post(&app, upload.clone()).await;
        assert_eq!(first, second, "identical requests gave different bytes");

        let bad = multipart(&[Part::File("image", &encode_pnm(&img)), Part::Text("classes", "4")]);
        expect_error(&app, bad, StatusCode::BAD_REQUEST, "bad_class_count").await;
        expect_error(&app, multipart(&[Part::File("image", b"garbage")]), StatusCode::BAD_REQUEST, "undecodable_image")
            .await;
        let big = vec![7u8; 10 * 1024 * 1024 + 1];
        expect_error(&app, multipart(&[Part::File("image", &big)]), StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large")
            .await;
        let two = multipart(&[Part::File("image", &encode_pnm(&img)), Part::Text("classes", "2")]);
        expect_error(&app, two, StatusCode::UNPROCESSABLE_ENTITY, "classes_unavailable").await;

        let (mut seg, version) = load_weights(&t.seg).unwrap();
        seg.visit_mut("", &mut |_, p| p.value.data_mut().fill(f64::NAN));
        let broken = router(Models::new((seg, version), vec![load_weights(&t.cls3).unwrap()]).unwrap(), &ServerConfig::default());
        let v = expect_error(&broken, upload, StatusCode::INTERNAL_SERVER_ERROR, "internal").await;
        assert!(v["id"].is_string());
        "health, predict, 400 (x2), 413, 422 and 500 as specified; repeat request byte-identical".to_string()
    })
}
