use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dermo_core::annotate::annotate;
use dermo_core::cascade::{cascade_pipeline, train_recognition, MaskSource, Protocol};
use dermo_core::data::{
    dataset_hash, gen_synthetic, read_dataset, write_dataset, write_pnm, AugmentationSpec, DatasetMeta, Sample,
    SyntheticSpec, GENERATOR_VERSION,
};
use dermo_core::infer::predict;
use dermo_core::loss::WeightMode;
use dermo_core::metrics::EvalReport;
use dermo_core::net::{DermoNet, NetworkConfig};
use dermo_core::optim::OptimizerKind;
use dermo_core::trainer::{evaluate, train, write_curves_csv, RunManifest, TrainConfig, TrainData, TrainMode};
use dermo_core::weights::{load_weights, save_weights};
use log::info;

use crate::server::{self, Models, ServerConfig};
use crate::upload::decode_image;

#[derive(Debug, Parser)]
#[command(name = "dermo", version, about = "Skin-lesion segmentation and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dermoscopy dataset.
    GenData(GenData),
    /// Train a network and write its weights.
    Train(Train),
    /// Evaluate weights on a dataset and write a JSON report.
    Eval(Eval),
    /// Segment and classify one image.
    Predict(Predict),
    /// Run the HTTP inference service.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 192)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Relative class frequencies, e.g. `4.2,1`.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Micro,
    Toy,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    P1,
    P2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long, value_parser = parse_mode)]
    pub mode: TrainMode,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Network config as `key=value` lines; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, value_parser = parse_weight_mode, default_value = "inverse-frequency")]
    pub weight_mode: WeightMode,
    /// Fresh random augmentation of every training sample each epoch.
    #[arg(long)]
    pub augment: bool,
    /// Recognition only: P2 rebalances the training crops with augmented copies.
    #[arg(long, value_enum, default_value_t = ProtocolArg::P1)]
    pub protocol: ProtocolArg,
    /// Recognition only: crop lesions with this network's masks instead of
    /// the ground truth.
    #[arg(long)]
    pub seg_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Save a checkpoint every N epochs into the run directory.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Where run.json and curves.csv go; defaults to `<out stem>_run`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seg_weights: PathBuf,
    #[arg(long)]
    pub cls_weights: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct Predict {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub seg_weights: PathBuf,
    #[arg(long)]
    pub cls_weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: PathBuf,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long, default_value_t = 5000)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long)]
    pub seg_weights: PathBuf,
    #[arg(long)]
    pub cls_weights: PathBuf,
    /// A second recognition network with a different class count.
    #[arg(long)]
    pub cls_weights_binary: Option<PathBuf>,
    /// Serve this directory at `/` instead of the built-in page.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10 * 1024 * 1024)]
    pub max_upload_bytes: usize,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: dermo_core::Error| e.to_string())
}

fn parse_weight_mode(s: &str) -> std::result::Result<WeightMode, String> {
    s.parse().map_err(|e: dermo_core::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn gen_data(a: &GenData) -> Result<()> {
    let spec = SyntheticSpec::new(a.n, a.classes, a.seed)
        .with_size(a.height, a.width)
        .with_ratios(&a.ratios);
    let samples = gen_synthetic(&spec)?;
    let meta = DatasetMeta {
        num_classes: a.classes,
        seed: a.seed,
        generator_version: GENERATOR_VERSION,
    };
    write_dataset(&a.out, &samples, &meta).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} samples to {} ({})", samples.len(), a.out.display(), dataset_hash(&samples));
    Ok(())
}

fn load_data(dir: &Path) -> Result<(DatasetMeta, Vec<Sample>)> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_net(path: &Path) -> Result<(DermoNet, String)> {
    load_weights(path).with_context(|| format!("loading weights {}", path.display()))
}

fn network_config(a: &Train, classes: usize) -> Result<NetworkConfig> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            NetworkConfig::from_kv(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match a.preset {
            Preset::Micro => NetworkConfig::micro(),
            Preset::Toy => NetworkConfig::toy(),
            Preset::Paper => NetworkConfig::paper_scale(),
        },
    };
    if config.num_classes != classes {
        info!("using the dataset's {classes} classes instead of {}", config.num_classes);
        config.num_classes = classes;
    }
    config.validate()?;
    Ok(config)
}

fn default_run_dir(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "weights".into());
    out.with_file_name(format!("{stem}_run"))
}

fn train_cmd(a: &Train) -> Result<()> {
    if a.mode != TrainMode::Recognition && (a.seg_weights.is_some() || matches!(a.protocol, ProtocolArg::P2)) {
        bail!("--seg-weights and --protocol apply to recognition training only");
    }
    let (meta, samples) = load_data(&a.data)?;
    let config = network_config(a, meta.num_classes)?;
    let run_dir = a.run_dir.clone().unwrap_or_else(|| default_run_dir(&a.out));
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let cfg = TrainConfig {
        mode: a.mode,
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::adam(),
            OptimizerArg::Sgd => OptimizerKind::sgd_momentum(a.momentum),
        },
        lr: a.lr,
        seed: a.seed,
        weight_mode: a.weight_mode,
        augmentation: a.augment.then(|| AugmentationSpec {
            seed: a.seed,
            ..AugmentationSpec::default()
        }),
        patience: a.patience,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: (a.checkpoint_every > 0).then(|| run_dir.clone()),
        shuffle: true,
    };
    let data = TrainData::split(&samples, a.val_fraction)?;
    info!("training {:?} on {} samples, validating on {}", a.mode, data.train.len(), data.val.len());

    let mut net = DermoNet::new(config.clone(), a.seed)?;
    let seg = a.seg_weights.as_deref().map(load_net).transpose()?;
    let source = match &seg {
        Some((s, _)) => MaskSource::Network(s),
        None => MaskSource::Oracle,
    };
    let state = match a.mode {
        TrainMode::Recognition => {
            let protocol = match a.protocol {
                ProtocolArg::P1 => Protocol::P1,
                ProtocolArg::P2 => Protocol::P2(AugmentationSpec {
                    seed: a.seed,
                    ..AugmentationSpec::default()
                }),
            };
            train_recognition(&mut net, source, &data, &protocol, &cfg)?
        }
        _ => train(&mut net, &data, &cfg)?,
    };
    net.restore(&state.best_snapshot)?;
    save_weights(&net, &a.out).with_context(|| format!("writing {}", a.out.display()))?;

    let final_metrics = match a.mode {
        TrainMode::Recognition => cascade_pipeline(source, &net, &data.val)?,
        mode => evaluate(&net, &data.val, mode)?,
    };
    let manifest = RunManifest {
        network: config,
        train: cfg,
        seed: a.seed,
        dataset_hash: dataset_hash(&samples),
        epochs_run: state.epochs_run,
        best_epoch: state.best_epoch,
        best_metric: state.best_metric,
        final_metrics,
    };
    manifest.write(&run_dir.join("run.json"))?;
    write_curves_csv(&run_dir.join("curves.csv"), &state.curves)?;
    println!(
        "best epoch {} of {}: validation metric {:.4}; weights in {}",
        state.best_epoch,
        state.epochs_run,
        state.best_metric,
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: &Eval) -> Result<()> {
    let (_, samples) = load_data(&a.data)?;
    let (seg, _) = load_net(&a.seg_weights)?;
    let masked: Vec<Sample> = samples.iter().filter(|s| s.mask.is_some()).cloned().collect();
    let seg_report = if masked.is_empty() {
        None
    } else {
        Some(evaluate(&seg, &masked, TrainMode::Segmentation)?)
    };
    let report = match &a.cls_weights {
        None => seg_report.context("no sample has a mask to evaluate")?,
        Some(path) => {
            let (cls, _) = load_net(path)?;
            let labelled: Vec<Sample> = samples.iter().filter(|s| s.label.is_some()).cloned().collect();
            let mut report = cascade_pipeline(MaskSource::Network(&seg), &cls, &labelled)?;
            if let Some(s) = seg_report {
                report.m_rc = s.m_rc;
                report.m_sp = s.m_sp;
                report.m_iou = s.m_iou;
            }
            report
        }
    };
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    print_summary(&report);
    Ok(())
}

fn print_summary(r: &EvalReport) {
    if let Some(iou) = r.m_iou {
        println!("mIoU {:.4} ± {:.4}", iou.mean, iou.std);
    }
    if let Some(avg) = &r.weighted_avg {
        println!("accuracy {:.4}  weighted F1 {:.4}", avg.recall, avg.f1);
    }
    if let Some(auc) = r.auc.macro_avg {
        println!("macro AUC {auc:.4}");
    }
    if !r.degenerate_masks.is_empty() {
        println!("{} empty masks classified as whole images", r.degenerate_masks.len());
    }
}

fn predict_cmd(a: &Predict) -> Result<()> {
    let bytes = std::fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = decode_image(&bytes).map_err(|e| anyhow::anyhow!("decoding {}: {e}", a.image.display()))?;
    let (seg, seg_version) = load_net(&a.seg_weights)?;
    let (cls, cls_version) = load_net(&a.cls_weights)?;
    let p = predict(&seg, &cls, &img)?;
    let annotated = annotate(&img, &p.bbox, Some(&p.mask), &p.label_text())?;
    write_pnm(&a.out, &annotated).with_context(|| format!("writing {}", a.out.display()))?;
    let response = p.response(&server::combined_version(&seg_version, &cls_version));
    std::fs::write(&a.json, serde_json::to_string_pretty(&response)? + "\n")
        .with_context(|| format!("writing {}", a.json.display()))?;
    println!("{}", p.label_text());
    Ok(())
}

fn serve_cmd(a: Serve) -> Result<()> {
    let mut cls = vec![a.cls_weights.clone()];
    cls.extend(a.cls_weights_binary.clone());
    let models = Models::load(&a.seg_weights, &cls)?;
    let config = ServerConfig {
        max_upload_bytes: a.max_upload_bytes,
        static_dir: a.static_dir,
    };
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(addr, models, config))
}
