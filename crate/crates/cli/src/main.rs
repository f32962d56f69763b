//! `tinyface`: cluster, bank, synth, train, detect, fit-ellipse, eval,
//! diagnose and ablate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tinyface::bank::{build_bank, TemplateBank};
use tinyface::clustering::{cluster_shapes, CanonicalShapes, ShapeClusterConfig};
use tinyface::config::KeyValues;
use tinyface::dataset::{generate_synthetic, inscribed_ellipses, load_annotations, parse_fddb, write_fddb, AnnotatedImage, Annotation, Dataset, SyntheticSpec};
use tinyface::ellipse::{fit, fit_report, training_pairs, EllipseModel, CV_FOLDS, DEFAULT_RIDGE};
use tinyface::eval::{
    ap, detection_path, diagnose, fddb_curve, pr_curve_csv, pr_curve_svg, read_detection_dir, sensitivity, Characteristic,
    GroundTruth, Region,
};
use tinyface::experiment::{ablate, ablation_csv, load_images, mean_rgb, synthetic_splits, ExperimentConfig, Splits, Variant};
use tinyface::inference::{detect_with_features, write_features, DetectConfig, Detection, FeatureRecord};
use tinyface::net::{load_checkpoint, save_checkpoint, NetConfig, TapKind};
use tinyface::pyramid::read_image;
use tinyface::training::{metrics_csv, train, TrainConfig, TrainOptions};
use tinyface::Error;

#[derive(Parser)]
#[command(name = "tinyface", version, about = "Tiny object detection with scale-specific templates")]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value file with `synth.`, `cluster.`, `train.`, `net.`, `detect.`,
    /// `eval.` and `ellipse.` sections; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster annotated box shapes into canonical shapes.
    Cluster(ClusterArgs),
    /// Build a template bank from canonical shapes.
    Bank(BankArgs),
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run a model on one image or a whole dataset.
    Detect(DetectArgs),
    /// Fit the box-to-ellipse regressor from exported features.
    FitEllipse(FitEllipseArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// False-positive analysis, sensitivity and a PR plot.
    Diagnose(DiagnoseArgs),
    /// Train and compare tap and pruning variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ClusterArgs {
    /// Dataset directory, manifest or WIDER annotation file.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Leave out boxes flagged invalid.
    #[arg(long)]
    skip_invalid: bool,
    /// Leave out boxes with a higher occlusion level.
    #[arg(long)]
    max_occlusion: Option<u8>,
    /// Leave out boxes with a higher blur level.
    #[arg(long)]
    max_blur: Option<u8>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BankArgs {
    #[arg(long)]
    shapes: PathBuf,
    /// Keep only the A and B templates.
    #[arg(long)]
    prune: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset used to pick the best epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    drop_fine_tap: bool,
    #[arg(long)]
    drop_coarse_tap: bool,
    /// Also keep a checkpoint of every epoch here.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Single image; `--out` is then a detection file.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    image: Option<PathBuf>,
    /// Dataset; `--out` is then a directory with one file per image.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    nms: Option<f64>,
    /// Export the descriptor of every detection for `fit-ellipse`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Write ellipses predicted by this regressor instead of boxes.
    #[arg(long)]
    ellipse_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitEllipseArgs {
    #[arg(long)]
    features: PathBuf,
    /// FDDB ellipse annotations.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    min_iou: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Wider,
    FddbDisc,
    FddbCont,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    /// Box annotations for `wider`, FDDB ellipses otherwise.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "wider")]
    protocol: Protocol,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    iou: Option<f64>,
    /// Number of top-scoring false positives listed.
    #[arg(long, default_value_t = 20)]
    top: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset; synthetic splits are rendered when omitted.
    #[arg(long, requires = "test")]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Image counts of rendered train, validation and test splits.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"], default_values_t = [200, 20, 50])]
    split_sizes: Vec<usize>,
    #[arg(long)]
    drop_fine_tap: bool,
    #[arg(long)]
    drop_coarse_tap: bool,
    /// Compare against the unpruned bank.
    #[arg(long)]
    full_bank: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Errors and configuration

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => 1,
            CliError::Lib(Error::Numerical(_) | Error::Divergence { .. }) => 3,
            CliError::Lib(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const SECTIONS: &[&str] = &["synth.", "cluster.", "train.", "net.", "detect.", "eval.", "ellipse."];

struct RunConfig {
    kv: KeyValues,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            None => KeyValues::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                KeyValues::parse(&text, &p.display().to_string())?
            }
        };
        let rc = RunConfig { kv };
        // bad keys or values fail up front, whatever the subcommand
        rc.validate().map_err(|e| match e {
            CliError::Lib(Error::Parse { path, line, message }) => {
                CliError::Lib(Error::Config(format!("{path}:{line}: {message}")))
            }
            e => e,
        })?;
        Ok(rc)
    }

    fn validate(&self) -> Result<()> {
        self.kv.reject_unknown(SECTIONS)?;
        TrainConfig::from_kv(&self.section("train"))?;
        SyntheticSpec::from_kv(&self.section("synth"))?;
        net_config(self)?;
        self.section("cluster").reject_unknown(&["k", "max_iters", "seed"])?;
        self.section("detect").reject_unknown(&["threshold", "nms"])?;
        self.section("eval").reject_unknown(&["iou"])?;
        self.section("ellipse").reject_unknown(&["lambda", "folds", "min_iou"])?;
        Ok(())
    }

    fn section(&self, name: &str) -> KeyValues {
        self.kv.section(&format!("{name}."))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.kv.parsed(key)?.unwrap_or(default),
        })
    }
}

/// Writes the resolved configuration next to `out`: inside it when it is a
/// directory, else as `<stem>.config.txt`.
fn snapshot(out: &Path, command: &str, body: &str) -> Result<()> {
    let path = if out.is_dir() { out.join("resolved_config.txt") } else { out.with_extension("config.txt") };
    let text = format!("# tinyface {command}\n{body}");
    write(&path, text.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn load_bank(path: &Path) -> Result<TemplateBank> {
    Ok(TemplateBank::from_csv(&read_text(path)?, &path.display().to_string())?)
}

fn kv_lines(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn prefixed(prefix: &str, text: &str) -> String {
    text.lines().filter(|l| !l.is_empty()).map(|l| format!("{prefix}.{l}\n")).collect()
}

fn ground_truth(images: &[AnnotatedImage]) -> Vec<Vec<GroundTruth>> {
    images
        .iter()
        .map(|img| img.boxes.iter().map(|a| GroundTruth { bbox: a.bbox, ignore: a.attrs.is_invalid() }).collect())
        .collect()
}

fn region_boxes(dets: Vec<Vec<Region>>) -> Vec<Vec<tinyface::geometry::BBox>> {
    dets.into_iter().map(|d| d.iter().map(Region::bounds).collect()).collect()
}

fn train_config(rc: &RunConfig, overrides: &[(&str, Option<String>)]) -> Result<TrainConfig> {
    let mut kv = rc.section("train");
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.insert(k, v);
        }
    }
    Ok(TrainConfig::from_kv(&kv)?)
}

fn net_config(rc: &RunConfig) -> Result<NetConfig> {
    let kv = rc.section("net");
    if kv.keys().next().is_none() {
        return Ok(NetConfig::default());
    }
    let cfg = NetConfig::from_text(&kv.to_text())?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_cluster(rc: &RunConfig, a: &ClusterArgs) -> Result<()> {
    let cfg = ShapeClusterConfig {
        k: rc.get("cluster.k", a.k, 25)?,
        max_iters: rc.get("cluster.max_iters", None, 100)?,
        seed: rc.get("cluster.seed", a.seed, 0)?,
    };
    let images = load_annotations(&a.annotations)?;
    let keep = |b: &&Annotation| {
        !(a.skip_invalid && b.attrs.is_invalid())
            && a.max_occlusion.is_none_or(|m| b.attrs.occlusion <= m)
            && a.max_blur.is_none_or(|m| b.attrs.blur <= m)
    };
    let shapes: Vec<_> = images.iter().flat_map(|i| i.boxes.iter().filter(keep).map(|b| b.bbox.shape())).collect();
    let canon = cluster_shapes(&shapes, &cfg)?;
    log::info!("{} shapes into {} canonical shapes in {} iterations", shapes.len(), canon.len(), canon.iterations);
    write(&a.out, canon.to_csv().as_bytes())?;
    snapshot(
        &a.out,
        "cluster",
        &kv_lines(&[
            ("annotations", a.annotations.display().to_string()),
            ("cluster.k", cfg.k.to_string()),
            ("cluster.max_iters", cfg.max_iters.to_string()),
            ("cluster.seed", cfg.seed.to_string()),
            ("skip_invalid", a.skip_invalid.to_string()),
            ("max_occlusion", a.max_occlusion.map_or("none".into(), |v| v.to_string())),
            ("max_blur", a.max_blur.map_or("none".into(), |v| v.to_string())),
            ("shapes", shapes.len().to_string()),
        ]),
    )
}

fn cmd_bank(_rc: &RunConfig, a: &BankArgs) -> Result<()> {
    let canon = CanonicalShapes::from_csv(&read_text(&a.shapes)?, &a.shapes.display().to_string())?;
    let bank = build_bank(&canon, a.prune)?;
    log::info!("{} templates, {} dropped", bank.len(), bank.dropped.len());
    write(&a.out, bank.to_csv().as_bytes())?;
    snapshot(&a.out, "bank", &kv_lines(&[("shapes", a.shapes.display().to_string()), ("prune", a.prune.to_string())]))
}

fn cmd_synth(rc: &RunConfig, a: &SynthArgs) -> Result<()> {
    let mut kv = rc.section("synth");
    for (k, v) in [
        ("seed", a.seed.map(|v| v.to_string())),
        ("width", a.width.map(|v| v.to_string())),
        ("height", a.height.map(|v| v.to_string())),
        ("max_objects", a.max_objects.map(|v| v.to_string())),
    ] {
        if let Some(v) = v {
            kv.insert(k, v);
        }
    }
    let spec = SyntheticSpec::from_kv(&kv)?;
    let data = generate_synthetic(&spec, a.n, &a.out)?;
    let mut images = data.manifest.images.clone();
    inscribed_ellipses(&mut images);
    write(&a.out.join("ellipses.txt"), write_fddb(&images).as_bytes())?;
    log::info!("{} images, {} objects", data.len(), images.iter().map(|i| i.boxes.len()).sum::<usize>());
    let body: String = spec.to_kv().iter().map(|(k, v)| format!("synth.{k}={v}\n")).collect();
    snapshot(&a.out, "synth", &format!("n={}\n{body}", a.n))
}

fn cmd_train(rc: &RunConfig, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(
        rc,
        &[
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
            ("crop", a.crop.map(|v| v.to_string())),
            ("batch_size", a.batch_size.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let mut net_cfg = net_config(rc)?;
    if a.drop_fine_tap {
        net_cfg.set_tap_enabled(TapKind::Fine, false);
    }
    if a.drop_coarse_tap {
        net_cfg.set_tap_enabled(TapKind::Coarse, false);
    }
    let bank = load_bank(&a.bank)?;
    let data = Dataset::open(&a.data)?;
    let images = load_images(&data)?;
    net_cfg.mean_rgb = data.manifest.mean_rgb().unwrap_or_else(|| mean_rgb(&images));
    let validation = match &a.val {
        Some(p) => load_images(&Dataset::open(p)?)?,
        None => Vec::new(),
    };
    let opts = TrainOptions { checkpoint_dir: a.checkpoint_dir.clone() };
    let out = train(&images, &validation, &bank, &net_cfg, &cfg, &opts)?;
    log::info!("selected epoch {}", out.best_epoch);
    write(&a.out.with_extension("metrics.csv"), metrics_csv(&out.metrics).as_bytes())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    save_checkpoint(&out.net, &a.out)?;
    let body = format!(
        "data={}\nbank={}\nbest_epoch={}\n{}{}",
        a.data.display(),
        a.bank.display(),
        out.best_epoch,
        prefixed("train", &cfg.to_text()),
        prefixed("net", &net_cfg.to_text())
    );
    snapshot(&a.out, "train", &body)
}

fn format_output(dets: &[(Detection, Vec<f64>)], ellipses: Option<&EllipseModel>) -> Result<String> {
    let mut s = String::new();
    for (d, f) in dets {
        match ellipses {
            None => {
                let _ = writeln!(s, "{} {} {} {} {}", d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score);
            }
            Some(m) => {
                let e = m.predict(&d.bbox, f)?;
                let _ = writeln!(s, "{} {} {} {} {} {}", e.ra, e.rb, e.theta, e.cx, e.cy, d.score);
            }
        }
    }
    Ok(s)
}

fn cmd_detect(rc: &RunConfig, a: &DetectArgs) -> Result<()> {
    let net: tinyface::net::FeatureNet<f32> = load_checkpoint(&a.model)?;
    let bank = load_bank(&a.bank)?;
    let cfg = DetectConfig {
        score_threshold: rc.get("detect.threshold", a.threshold, 0.5)?,
        nms_threshold: rc.get("detect.nms", a.nms, 0.3)?,
        ..DetectConfig::default()
    };
    let ellipses = a.ellipse_model.as_ref().map(EllipseModel::load).transpose()?;
    let want_features = a.features.is_some() || ellipses.is_some();
    let (names, root): (Vec<String>, Option<PathBuf>) = match (&a.image, &a.data) {
        (Some(img), _) => (vec![img.display().to_string()], None),
        (None, Some(d)) => {
            let data = Dataset::open(d)?;
            (data.manifest.images.iter().map(|i| i.path.clone()).collect(), Some(data.root))
        }
        (None, None) => return Err(CliError::Usage("one of --image or --data is required".into())),
    };
    let results: Vec<Vec<(Detection, Vec<f64>)>> = names
        .par_iter()
        .map(|name| {
            let path = root.as_ref().map_or_else(|| PathBuf::from(name), |r| r.join(name));
            let img = read_image(&path)?;
            detect_with_features(&net, &bank, &img, &cfg, want_features)
        })
        .collect::<std::result::Result<_, Error>>()?;
    let mut records = Vec::new();
    for (name, dets) in names.iter().zip(&results) {
        let text = format_output(dets, ellipses.as_ref())?;
        let target = if root.is_some() { detection_path(&a.out, name) } else { a.out.clone() };
        write(&target, text.as_bytes())?;
        records.extend(dets.iter().map(|(d, f)| FeatureRecord {
            image: name.clone(),
            bbox: d.bbox,
            features: f.iter().map(|&v| v as f32).collect(),
        }));
    }
    log::info!("{} detections over {} images", records.len(), names.len());
    if let Some(p) = &a.features {
        write_features(&records, p)?;
    }
    let mut body = kv_lines(&[
        ("model", a.model.display().to_string()),
        ("bank", a.bank.display().to_string()),
        ("detect.threshold", cfg.score_threshold.to_string()),
        ("detect.nms", cfg.nms_threshold.to_string()),
    ]);
    if let Some(p) = &a.ellipse_model {
        body.push_str(&format!("ellipse_model={}\n", p.display()));
    }
    snapshot(&a.out, "detect", &body)
}

fn cmd_fit_ellipse(rc: &RunConfig, a: &FitEllipseArgs) -> Result<()> {
    let lambda = rc.get("ellipse.lambda", a.lambda, DEFAULT_RIDGE)?;
    let folds = rc.get("ellipse.folds", a.folds, CV_FOLDS)?;
    let min_iou = rc.get("ellipse.min_iou", a.min_iou, 0.5)?;
    let records = tinyface::inference::read_features(&a.features)?;
    let gts = parse_fddb(&a.gt)?;
    let pairs = training_pairs(&records, &gts, min_iou);
    log::info!(
        "{} pairs from {} detections ({} unmatched, {} with undefined angle)",
        pairs.targets.len(),
        records.len(),
        pairs.unmatched,
        pairs.degenerate
    );
    let result = fit(&pairs.features, &pairs.targets, lambda, folds, "foveal")?;
    result.model.save(&a.out)?;
    write(&a.out.with_extension("report.csv"), fit_report(&result).as_bytes())?;
    snapshot(
        &a.out,
        "fit-ellipse",
        &kv_lines(&[
            ("features", a.features.display().to_string()),
            ("gt", a.gt.display().to_string()),
            ("ellipse.lambda", lambda.to_string()),
            ("ellipse.folds", folds.to_string()),
            ("ellipse.min_iou", min_iou.to_string()),
            ("pairs", pairs.targets.len().to_string()),
        ]),
    )
}

fn cmd_eval(rc: &RunConfig, a: &EvalArgs) -> Result<()> {
    let iou = rc.get("eval.iou", a.iou, 0.5)?;
    let (report, curve) = match a.protocol {
        Protocol::Wider => {
            let images = load_annotations(&a.gt)?;
            let names: Vec<String> = images.iter().map(|i| i.path.clone()).collect();
            let dets = region_boxes(read_detection_dir(&a.dets, &names)?);
            let r = ap(&dets, &ground_truth(&images), iou);
            let report = format!(
                "protocol,iou,num_gt,num_dets,true_positives,false_positives,ap\nwider,{iou},{},{},{},{},{}\n",
                r.num_gt, r.num_dets, r.true_positives, r.false_positives, r.ap
            );
            (report, pr_curve_csv(&r))
        }
        Protocol::FddbDisc | Protocol::FddbCont => {
            let continuous = matches!(a.protocol, Protocol::FddbCont);
            let images = parse_fddb(&a.gt)?;
            let names: Vec<String> = images.iter().map(|i| i.path.clone()).collect();
            let dets = read_detection_dir(&a.dets, &names)?;
            let gts: Vec<_> = images.iter().map(|i| i.ellipses.clone()).collect();
            let c = fddb_curve(&dets, &gts, continuous);
            let name = if continuous { "fddb-cont" } else { "fddb-disc" };
            let num_dets: usize = dets.iter().map(Vec::len).sum();
            let report = format!(
                "protocol,num_gt,num_dets,rate_at_fp_100,rate_at_fp_1000,final_rate\n{name},{},{num_dets},{},{},{}\n",
                c.num_gt,
                c.rate_at(100),
                c.rate_at(1000),
                c.final_rate()
            );
            let mut curve = String::from("false_positives,rate,score\n");
            for (fp, rate, score) in &c.points {
                let _ = writeln!(curve, "{fp},{rate},{score}");
            }
            (report, curve)
        }
    };
    write(&a.out, report.as_bytes())?;
    write(&a.out.with_extension("curve.csv"), curve.as_bytes())?;
    let protocol = a.protocol.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    snapshot(
        &a.out,
        "eval",
        &kv_lines(&[
            ("dets", a.dets.display().to_string()),
            ("gt", a.gt.display().to_string()),
            ("protocol", protocol),
            ("eval.iou", iou.to_string()),
        ]),
    )
}

fn cmd_diagnose(rc: &RunConfig, a: &DiagnoseArgs) -> Result<()> {
    let iou = rc.get("eval.iou", a.iou, 0.5)?;
    let images = load_annotations(&a.gt)?;
    let names: Vec<String> = images.iter().map(|i| i.path.clone()).collect();
    let dets = region_boxes(read_detection_dir(&a.dets, &names)?);
    let gts = ground_truth(&images);
    let report = ap(&dets, &gts, iou);
    let diag = diagnose(&dets, &gts, iou, a.top);

    let mut fps = String::from("rank,image,x,y,w,h,score,ov,one_minus_r,mode\n");
    for (i, f) in diag.top.iter().enumerate() {
        let b = f.bbox;
        let _ = writeln!(
            fps,
            "{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            names[f.image],
            b.x,
            b.y,
            b.w,
            b.h,
            f.score,
            f.ov,
            f.one_minus_r,
            f.mode.as_str()
        );
    }
    let modes = format!("mode,count\nbg,{}\nloc,{}\n", diag.background, diag.localization);
    let mut sens = String::from("characteristic,bin,num_gt,normalized_ap\n");
    for ch in [
        Characteristic::height(&gts, &[20.0, 40.0, 140.0]),
        Characteristic::aspect(&gts, &[0.6, 0.9, 1.2]),
    ] {
        let r = sensitivity(&dets, &gts, &ch, iou, None);
        for b in &r.bins {
            let _ = writeln!(sens, "{},{},{},{}", r.name, b.label, b.num_gt, b.normalized_ap);
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    write(&a.out.join("false_positives.csv"), fps.as_bytes())?;
    write(&a.out.join("error_modes.csv"), modes.as_bytes())?;
    write(&a.out.join("sensitivity.csv"), sens.as_bytes())?;
    write(&a.out.join("pr.csv"), pr_curve_csv(&report).as_bytes())?;
    write(&a.out.join("pr.svg"), pr_curve_svg(&report, "precision / recall").as_bytes())?;
    snapshot(
        &a.out,
        "diagnose",
        &kv_lines(&[
            ("dets", a.dets.display().to_string()),
            ("gt", a.gt.display().to_string()),
            ("eval.iou", iou.to_string()),
            ("top", a.top.to_string()),
        ]),
    )
}

fn cmd_ablate(rc: &RunConfig, a: &AblateArgs) -> Result<()> {
    let seed = rc.get("train.seed", a.seed, 0)?;
    let train_cfg = train_config(
        rc,
        &[("epochs", a.epochs.map(|v| v.to_string())), ("seed", Some(seed.to_string()))],
    )?;
    let cfg = ExperimentConfig {
        cluster: ShapeClusterConfig {
            k: rc.get("cluster.k", None, 25)?,
            max_iters: rc.get("cluster.max_iters", None, 100)?,
            seed: rc.get("cluster.seed", None, 0)?,
        },
        net: net_config(rc)?,
        train: train_cfg,
        ..ExperimentConfig::default()
    };
    let (splits, source) = match (&a.train, &a.test) {
        (Some(tr), Some(te)) => {
            let validation = match &a.val {
                Some(v) => load_images(&Dataset::open(v)?)?,
                None => Vec::new(),
            };
            let s = Splits { train: load_images(&Dataset::open(tr)?)?, validation, test: load_images(&Dataset::open(te)?)? };
            (s, format!("train={}\ntest={}\n", tr.display(), te.display()))
        }
        _ => {
            let spec = SyntheticSpec::from_kv(&rc.section("synth"))?;
            let n = &a.split_sizes;
            let s = synthetic_splits(&spec, n[0], n[1], n[2])?;
            let body: String = spec.to_kv().iter().map(|(k, v)| format!("synth.{k}={v}\n")).collect();
            (s, format!("splits={} {} {}\n{body}", n[0], n[1], n[2]))
        }
    };
    let mut variants = vec![Variant::baseline()];
    let all = !(a.drop_fine_tap || a.drop_coarse_tap || a.full_bank);
    if a.drop_fine_tap || all {
        variants.push(Variant { name: "no_fine_tap".into(), fine_tap: false, ..Variant::baseline() });
    }
    if a.drop_coarse_tap || all {
        variants.push(Variant { name: "no_coarse_tap".into(), coarse_tap: false, ..Variant::baseline() });
    }
    if a.full_bank || all {
        variants.push(Variant { name: "full_bank".into(), prune: false, ..Variant::baseline() });
    }
    let rows = ablate(&splits, &cfg, &variants)?;
    write(&a.out, ablation_csv(&rows).as_bytes())?;
    let body = format!(
        "{source}{}{}cluster.k={}\n",
        prefixed("train", &cfg.train.to_text()),
        prefixed("net", &cfg.net.to_text()),
        cfg.cluster.k
    );
    snapshot(&a.out, "ablate", &body)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let rc = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Cluster(a) => cmd_cluster(&rc, a),
        Command::Bank(a) => cmd_bank(&rc, a),
        Command::Synth(a) => cmd_synth(&rc, a),
        Command::Train(a) => cmd_train(&rc, a),
        Command::Detect(a) => cmd_detect(&rc, a),
        Command::FitEllipse(a) => cmd_fit_ellipse(&rc, a),
        Command::Eval(a) => cmd_eval(&rc, a),
        Command::Diagnose(a) => cmd_diagnose(&rc, a),
        Command::Ablate(a) => cmd_ablate(&rc, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            match e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(code)
        }
    }
}
