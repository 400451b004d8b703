//! The `mehtc` command line: one subcommand per workflow, JSON configs
//! with `--set` overrides, and a run manifest with output checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heartrecon::{
    complete, full_coverage_planes, make_synthetic_heart_on, rasterize_slices, standard_protocol, train_completion, CompletionConfig,
    CompletionPair, ErrorModel, Protocol, ProtocolConfig, ReconGrid,
};
use crate::infer::{argmax_labels, postprocess, sliding_window_predict, InferenceConfig};
use crate::metrics::{evaluate_study, HdStatistic};
use crate::model::{build_model, Checkpoint, Model, ModelConfig};
use crate::ssl::{ssl_pretrain, write_ssl_log, SslConfig};
use crate::tensor::Tensor;
use crate::train::{synthetic_ellipses, train_model, write_loss_log, Sample, TrainConfig};
use crate::volio::{
    normalize, read_labels, read_volume, resample, resample_labels, resample_labels_to, write_labels, LabelMap, LabelSchema, Loaded,
    Volume,
};

pub const MANIFEST: &str = "run_manifest.json";
pub const RESOLVED: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "mehtc", version, about = "Cardiac segmentation, pretraining and label completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for tensor kernels.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Dotted-path override, e.g. `--set train.epochs=5`. Values parse as
    /// JSON when possible and as strings otherwise.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (default `runs/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pretraining.
    Pretrain(RunArgs),
    /// Supervised segmentation training.
    Train(RunArgs),
    /// Sliding-window prediction of NIfTI volumes.
    Predict(RunArgs),
    /// Dice / Hausdorff report over prediction and reference directories.
    Evaluate(RunArgs),
    /// Synthetic sparse/dense completion pairs.
    Simulate(RunArgs),
    /// Train (optionally) and apply the label-completion network.
    Complete(RunArgs),
    /// Re-run a manifest and compare output checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print the default configuration of a command.
    Schema { command: String },
}

/// Image (and optional label) source for training and pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Nifti { images: PathBuf, labels: Option<PathBuf> },
    Synthetic {
        count: usize,
        extent: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    /// Resample to this spacing (mm, `i j k` order) before normalization.
    pub target_spacing: Option<[f64; 3]>,
    /// Intensity window `[lo, hi]` mapped to `[0, 1]` with clamping.
    pub normalize: Option<[f64; 2]>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess { target_spacing: None, normalize: Some([0.0, 250.0]) }
    }
}

impl Preprocess {
    fn apply(&self, v: &Volume) -> Result<Volume> {
        let v = match self.target_spacing {
            Some(s) => resample(v, s)?,
            None => v.clone(),
        };
        match self.normalize {
            Some([lo, hi]) => normalize(&v, lo, hi),
            None => Ok(v),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainJob {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default)]
    pub ssl: SslConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    #[serde(default)]
    pub seed: u64,
    /// Label schema name; long-axis schemas select a 2D model.
    pub schema: String,
    pub data: DataSource,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Defaults to the standard network for the schema.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictJob {
    pub checkpoint: PathBuf,
    /// A NIfTI file or a directory of them.
    pub input: PathBuf,
    pub schema: String,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Defaults to the training patch, step 0.5 and largest-component
    /// cleanup of every foreground class.
    #[serde(default)]
    pub inference: Option<InferenceConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJob {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub schema: String,
    #[serde(default = "hd_default")]
    pub hd_percentile: u32,
}

fn hd_default() -> u32 {
    100
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateJob {
    pub seed: u64,
    pub count: usize,
    pub grid: ReconGrid,
    pub protocol: ProtocolConfig,
    pub errors: ErrorModel,
    /// Slice every voxel layer instead of the standard protocol.
    pub full_coverage: bool,
}

impl Default for SimulateJob {
    fn default() -> Self {
        SimulateJob {
            seed: 0,
            count: 8,
            grid: ReconGrid::default(),
            protocol: ProtocolConfig::default(),
            errors: ErrorModel::default(),
            full_coverage: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteJob {
    #[serde(default)]
    pub seed: u64,
    /// Directory holding `sparse/` and `dense/` pairs (a `simulate`
    /// output). Required when no checkpoint is given.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Sparse maps to complete; defaults to `<pairs>/sparse`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub completion: CompletionConfig,
}

/// Record of one run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    /// sha256 of every file under the output directory except the manifest,
    /// keyed by relative path.
    pub outputs: BTreeMap<String, String>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Schema { command } => {
            println!("{}", serde_json::to_string_pretty(&default_config(&command)?)?);
            Ok(())
        }
        Command::Replay { manifest, out, threads } => replay(&manifest, out, threads).map(|_| ()),
        Command::Pretrain(a) => run_command("pretrain", &a),
        Command::Train(a) => run_command("train", &a),
        Command::Predict(a) => run_command("predict", &a),
        Command::Evaluate(a) => run_command("evaluate", &a),
        Command::Simulate(a) => run_command("simulate", &a),
        Command::Complete(a) => run_command("complete", &a),
    }
}

/// Default (or template) configuration for a command.
pub fn default_config(command: &str) -> Result<Value> {
    let synthetic = DataSource::Synthetic { count: 8, extent: vec![64, 64], seed: 0 };
    Ok(match command {
        "pretrain" => serde_json::to_value(PretrainJob { seed: 0, data: synthetic, preprocess: Preprocess::default(), ssl: SslConfig::default() })?,
        "train" => serde_json::to_value(TrainJob {
            seed: 0,
            schema: "lax4ch".into(),
            data: synthetic,
            preprocess: Preprocess::default(),
            model: None,
            train: TrainConfig::default(),
        })?,
        "predict" => serde_json::to_value(PredictJob {
            checkpoint: "model.ckpt".into(),
            input: "images/".into(),
            schema: "sax".into(),
            preprocess: Preprocess::default(),
            inference: None,
        })?,
        "evaluate" => serde_json::to_value(EvaluateJob { pred_dir: "pred/".into(), gt_dir: "gt/".into(), schema: "sax".into(), hd_percentile: 100 })?,
        "simulate" => serde_json::to_value(SimulateJob::default())?,
        "complete" => serde_json::to_value(CompleteJob {
            seed: 0,
            pairs: Some("pairs/".into()),
            checkpoint: None,
            input: None,
            completion: CompletionConfig::default(),
        })?,
        other => return Err(Error::config(format!("unknown command `{other}`"))),
    })
}

/// Sets `a.b.c = value`, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(Error::config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn resolve_value(args: &RunArgs) -> Result<Value> {
    let mut v = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
            .map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
        None => Value::Object(Default::default()),
    };
    for s in &args.set {
        apply_override(&mut v, s)?;
    }
    if let Some(seed) = args.seed {
        apply_override(&mut v, &format!("seed={seed}"))?;
    }
    Ok(v)
}

fn parse_job<J: DeserializeOwned>(command: &str, v: Value) -> Result<J> {
    serde_json::from_value(v).map_err(|e| Error::config(format!("{command} config: {e}")))
}

fn init_threads(threads: usize) {
    if rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global().is_err() {
        log::debug!("thread pool already initialized");
    }
}

fn run_command(command: &str, args: &RunArgs) -> Result<()> {
    let value = resolve_value(args)?;
    let out = args.out.clone().unwrap_or_else(|| Path::new("runs").join(command));
    execute(command, value, &out, args.threads).map(|_| ())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs `command` with an unresolved JSON config and writes outputs, the
/// resolved config and the manifest under `out`.
pub fn execute(command: &str, config: Value, out: &Path, threads: usize) -> Result<RunManifest> {
    init_threads(threads);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = now();
    let (resolved, seed, inputs) = match command {
        "pretrain" => {
            let job: PretrainJob = parse_job(command, config)?;
            cmd_pretrain(&job, out)?;
            let inputs = source_inputs(&job.data);
            (serde_json::to_value(&job)?, job.seed, inputs)
        }
        "train" => {
            let job: TrainJob = parse_job(command, config)?;
            cmd_train(&job, out)?;
            let mut inputs = source_inputs(&job.data);
            inputs.extend(job.train.pretrained_encoder.clone());
            (serde_json::to_value(&job)?, job.seed, inputs)
        }
        "predict" => {
            let job: PredictJob = parse_job(command, config)?;
            cmd_predict(&job, out)?;
            (serde_json::to_value(&job)?, 0, vec![job.checkpoint.clone(), job.input.clone()])
        }
        "evaluate" => {
            let job: EvaluateJob = parse_job(command, config)?;
            cmd_evaluate(&job, out)?;
            (serde_json::to_value(&job)?, 0, vec![job.pred_dir.clone(), job.gt_dir.clone()])
        }
        "simulate" => {
            let job: SimulateJob = parse_job(command, config)?;
            cmd_simulate(&job, out)?;
            (serde_json::to_value(&job)?, job.seed, Vec::new())
        }
        "complete" => {
            let job: CompleteJob = parse_job(command, config)?;
            cmd_complete(&job, out)?;
            let inputs = [&job.pairs, &job.checkpoint, &job.input].into_iter().flatten().cloned().collect();
            (serde_json::to_value(&job)?, job.seed, inputs)
        }
        other => return Err(Error::config(format!("unknown command `{other}`"))),
    };
    let resolved_path = out.join(RESOLVED);
    std::fs::write(&resolved_path, serde_json::to_string_pretty(&resolved)?).map_err(|e| Error::io(&resolved_path, e))?;
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        threads,
        started_unix: started,
        finished_unix: now(),
        config: resolved,
        inputs,
        out_dir: out.to_path_buf(),
        outputs: checksums(out)?,
    };
    let path = out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    log::info!("{command} finished; {} artifacts under {}", manifest.outputs.len(), out.display());
    Ok(manifest)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checksums of every file below `dir` except the manifest.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("below dir").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

/// Re-runs a manifest's command and config into a fresh directory and
/// checks every recorded checksum.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>, threads: usize) -> Result<RunManifest> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: RunManifest = serde_json::from_str(&text)?;
    let out = out.unwrap_or_else(|| {
        let mut p = m.out_dir.clone().into_os_string();
        p.push("_replay");
        PathBuf::from(p)
    });
    let again = execute(&m.command, m.config.clone(), &out, threads)?;
    let mismatched: Vec<&String> = m.outputs.iter().filter(|(k, v)| again.outputs.get(*k) != Some(v)).map(|(k, _)| k).collect();
    if !mismatched.is_empty() || again.outputs.len() != m.outputs.len() {
        return Err(Error::Numeric(format!("replay differs from the manifest in {mismatched:?}")));
    }
    println!("replay of {} reproduced {} artifacts", m.command, m.outputs.len());
    Ok(again)
}

fn source_inputs(d: &DataSource) -> Vec<PathBuf> {
    match d {
        DataSource::Nifti { images, labels } => std::iter::once(images.clone()).chain(labels.clone()).collect(),
        DataSource::Synthetic { .. } => Vec::new(),
    }
}

fn nifti_files(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| {
        let name = p.file_name()?.to_str()?;
        name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
    };
    if path.is_file() {
        let s = stem(path).ok_or_else(|| Error::data(format!("{} is not a NIfTI file", path.display())))?;
        return Ok(vec![(s, path.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if let Some(s) = stem(&p) {
            out.push((s, p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::data(format!("no NIfTI files in {}", path.display())));
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Volume> {
    match read_volume(path, None)? {
        Loaded::Image(v) => Ok(v),
        Loaded::Labels(_) => unreachable!("no schema requested"),
    }
}

/// Splits a preprocessed volume into model inputs: one `[1, k, j, i]`
/// tensor for 3D models, one `[1, j, i]` tensor per slice for 2D models.
fn model_inputs(v: &Volume, dims: usize) -> Result<Vec<Tensor<f32>>> {
    let [nk, nj, ni] = v.geometry.grid_shape();
    if dims == 3 {
        return Ok(vec![v.to_tensor(false)?]);
    }
    let plane = nj * ni;
    (0..nk).map(|k| Tensor::new(vec![1, nj, ni], v.data[k * plane..(k + 1) * plane].to_vec())).collect()
}

fn load_samples(job: &TrainJob, schema: &LabelSchema, dims: usize) -> Result<Vec<Sample>> {
    match &job.data {
        DataSource::Synthetic { count, extent, seed } => {
            if extent.len() != dims {
                return Err(Error::config(format!("synthetic extent {extent:?} does not match a {dims}D model")));
            }
            synthetic_ellipses(*count, extent, *seed)
        }
        DataSource::Nifti { images, labels } => {
            let labels = labels.as_ref().ok_or_else(|| Error::config("train data: missing field `labels`"))?;
            let mut out = Vec::new();
            for (stem, path) in nifti_files(images)? {
                let lab_path = nifti_files(labels)?
                    .into_iter()
                    .find(|(s, _)| *s == stem)
                    .map(|(_, p)| p)
                    .ok_or_else(|| Error::data(format!("image {stem} has no label file in {}", labels.display())))?;
                let img = job.preprocess.apply(&read_image(&path)?)?;
                let mut lab = read_labels(&lab_path, schema)?;
                if let Some(s) = job.preprocess.target_spacing {
                    lab = resample_labels(&lab, s)?;
                }
                if !img.geometry.matches(&lab.geometry) {
                    return Err(Error::data(format!("{stem}: image and label grids differ")));
                }
                let plane = img.geometry.dims[0] * img.geometry.dims[1];
                for (k, x) in model_inputs(&img, dims)?.into_iter().enumerate() {
                    let l = if dims == 3 { lab.data.clone() } else { lab.data[k * plane..(k + 1) * plane].to_vec() };
                    out.push(Sample::new(x, l)?);
                }
            }
            Ok(out)
        }
    }
}

fn cmd_pretrain(job: &PretrainJob, out: &Path) -> Result<()> {
    let cfg = SslConfig { seed: job.seed, ..job.ssl.clone() };
    let data: Vec<Tensor<f32>> = match &job.data {
        DataSource::Synthetic { count, extent, seed } => synthetic_ellipses(*count, extent, *seed)?.into_iter().map(|s| s.image).collect(),
        DataSource::Nifti { images, .. } => {
            let mut v = Vec::new();
            for (_, p) in nifti_files(images)? {
                v.extend(model_inputs(&job.preprocess.apply(&read_image(&p)?)?, cfg.model.dims)?);
            }
            v
        }
    };
    let res = ssl_pretrain(&data, &cfg)?;
    res.checkpoint.save(&out.join("pretrained.ckpt"))?;
    write_ssl_log(&out.join("ssl_log.csv"), &res.log)
}

fn cmd_train(job: &TrainJob, out: &Path) -> Result<()> {
    let schema = LabelSchema::by_name(&job.schema)?;
    let dims = if schema.is_planar() { 2 } else { 3 };
    let mc = match &job.model {
        Some(m) => m.clone(),
        None => ModelConfig::mehtc(dims, 1, schema.num_classes(), vec![16, 32, 64, 128, 256], 4, 4),
    };
    if mc.num_classes != schema.num_classes() {
        return Err(Error::config(format!("model has {} classes, schema {} has {}", mc.num_classes, schema.name(), schema.num_classes())));
    }
    let data = load_samples(job, &schema, mc.dims)?;
    let cfg = TrainConfig { seed: job.seed, ..job.train.clone() };
    let model = build_model(mc, job.seed)?;
    let res = train_model(model, &data, &cfg)?;
    let mut best = res.best;
    best.set("schema", schema.name())?;
    best.save(&out.join("model.ckpt"))?;
    write_loss_log(&out.join("loss_log.csv"), &res.log)
}

/// Resample, normalize, predict, clean up and map back to the input grid.
pub fn predict_volume(model: &Model, v: &Volume, schema: &LabelSchema, pre: &Preprocess, inf: &InferenceConfig) -> Result<LabelMap> {
    let work = pre.apply(v)?;
    let dims = model.config.dims;
    let mut labels = Vec::with_capacity(work.data.len());
    for x in model_inputs(&work, dims)? {
        let probs = sliding_window_predict(model, &x, inf)?;
        labels.extend(argmax_labels(&probs)?);
    }
    let map = LabelMap::new(work.geometry.clone(), labels, schema.clone())?;
    let map = postprocess(&map, &inf.postprocess)?;
    if map.geometry.dims == v.geometry.dims {
        Ok(LabelMap { geometry: v.geometry.clone(), ..map })
    } else {
        resample_labels_to(&map, &v.geometry)
    }
}

fn cmd_predict(job: &PredictJob, out: &Path) -> Result<()> {
    let schema = LabelSchema::by_name(&job.schema)?;
    let ck = Checkpoint::load(&job.checkpoint)?;
    let model: Model = ck.model("")?;
    if model.config.num_classes != schema.num_classes() {
        return Err(Error::config(format!("checkpoint predicts {} classes, schema {} has {}", model.config.num_classes, schema.name(), schema.num_classes())));
    }
    let inf = match &job.inference {
        Some(i) => i.clone(),
        None => {
            let patch: Vec<usize> = ck
                .get("train")
                .and_then(|t| t.get("patch"))
                .and_then(|p| serde_json::from_value(p.clone()).ok())
                .ok_or_else(|| Error::config("predict config: missing field `inference` (checkpoint records no training patch)"))?;
            InferenceConfig { patch, step: 0.5, postprocess: schema.foreground().map(|(_, c)| c).collect() }
        }
    };
    let dir = out.join("pred");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (stem, path) in nifti_files(&job.input)? {
        let pred = predict_volume(&model, &read_image(&path)?, &schema, &job.preprocess, &inf)?;
        write_labels(&pred, &dir.join(format!("{stem}.nii.gz")))?;
        log::info!("predicted {stem}");
    }
    Ok(())
}

fn cmd_evaluate(job: &EvaluateJob, out: &Path) -> Result<()> {
    let schema = LabelSchema::by_name(&job.schema)?;
    let report = evaluate_study(&job.pred_dir, &job.gt_dir, &schema, HdStatistic::from_percentile(job.hd_percentile)?)?;
    report.write(&out.join("metrics.csv"), &out.join("metrics.json"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_simulate(job: &SimulateJob, out: &Path) -> Result<()> {
    let (dense_dir, sparse_dir, proto_dir) = (out.join("dense"), out.join("sparse"), out.join("protocols"));
    for d in [&dense_dir, &sparse_dir, &proto_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for case in 0..job.count {
        let heart_seed = job.seed.wrapping_mul(1_000_003).wrapping_add(case as u64);
        let dense = make_synthetic_heart_on(heart_seed, &job.grid)?;
        let planes = if job.full_coverage { full_coverage_planes(&job.grid)? } else { standard_protocol(&dense, &job.protocol)? };
        let em = ErrorModel { seed: heart_seed, ..job.errors };
        let sparse = rasterize_slices(&dense, &planes, &em)?;
        let name = format!("case_{case:03}");
        write_labels(&dense, &dense_dir.join(format!("{name}.nii.gz")))?;
        write_labels(&sparse, &sparse_dir.join(format!("{name}.nii.gz")))?;
        Protocol { planes }.save(&proto_dir.join(format!("{name}.json")))?;
    }
    Ok(())
}

fn read_pairs(dir: &Path) -> Result<Vec<(String, CompletionPair)>> {
    let c7 = LabelSchema::by_name("completion7")?;
    let c9 = LabelSchema::by_name("completion9")?;
    let mut out = Vec::new();
    for (stem, sp) in nifti_files(&dir.join("sparse"))? {
        let dense = nifti_files(&dir.join("dense"))?
            .into_iter()
            .find(|(s, _)| *s == stem)
            .ok_or_else(|| Error::data(format!("sparse map {stem} has no dense counterpart")))?;
        out.push((stem, CompletionPair::new(read_labels(&sp, &c7)?, read_labels(&dense.1, &c9)?)?));
    }
    Ok(out)
}

fn cmd_complete(job: &CompleteJob, out: &Path) -> Result<()> {
    let model: Model = match &job.checkpoint {
        Some(p) => Checkpoint::load(p)?.model("")?,
        None => {
            let dir = job.pairs.as_ref().ok_or_else(|| Error::config("complete config: missing field `pairs` (needed to train without `checkpoint`)"))?;
            let pairs: Vec<CompletionPair> = read_pairs(dir)?.into_iter().map(|(_, p)| p).collect();
            let mut cfg = job.completion.clone();
            cfg.train.seed = job.seed;
            let res = train_completion(&pairs, &cfg)?;
            res.best.save(&out.join("completion.ckpt"))?;
            write_loss_log(&out.join("loss_log.csv"), &res.log)?;
            res.model
        }
    };
    let input = match (&job.input, &job.pairs) {
        (Some(i), _) => i.clone(),
        (None, Some(p)) => p.join("sparse"),
        (None, None) => return Err(Error::config("complete config: missing field `input`")),
    };
    let c7 = LabelSchema::by_name("completion7")?;
    let dir = out.join("completed");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (stem, path) in nifti_files(&input)? {
        let done = complete(&model, &read_labels(&path, &c7)?)?;
        write_labels(&done, &dir.join(format!("{stem}.nii.gz")))?;
    }
    if let Some(p) = &job.pairs {
        let dense = p.join("dense");
        if job.input.is_none() && dense.is_dir() {
            let report = evaluate_study(&dir, &dense, &LabelSchema::by_name("completion9")?, HdStatistic::Max)?;
            report.write(&out.join("metrics.csv"), &out.join("metrics.json"))?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_paths() {
        let mut v = json!({"train": {"epochs": 3}});
        apply_override(&mut v, "train.epochs=5").unwrap();
        apply_override(&mut v, "data.synthetic.extent=[16,16]").unwrap();
        apply_override(&mut v, "schema=sax").unwrap();
        assert_eq!(v, json!({"train": {"epochs": 5}, "data": {"synthetic": {"extent": [16, 16]}}, "schema": "sax"}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "schema.x=1").is_err());
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_job::<EvaluateJob>("evaluate", json!({"pred_dir": "a", "schema": "sax"})).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("gt_dir"), "{err}");
    }

    #[test]
    fn every_default_config_parses() {
        for c in ["pretrain", "train", "predict", "evaluate", "simulate", "complete"] {
            let v = default_config(c).unwrap();
            match c {
                "pretrain" => drop(parse_job::<PretrainJob>(c, v).unwrap()),
                "train" => drop(parse_job::<TrainJob>(c, v).unwrap()),
                "predict" => drop(parse_job::<PredictJob>(c, v).unwrap()),
                "evaluate" => drop(parse_job::<EvaluateJob>(c, v).unwrap()),
                "simulate" => drop(parse_job::<SimulateJob>(c, v).unwrap()),
                _ => drop(parse_job::<CompleteJob>(c, v).unwrap()),
            }
        }
        assert!(default_config("bogus").is_err());
    }
}
