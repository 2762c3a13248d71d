//! The `glyphsieve` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or training
//! error (including a failed `reparam-check`).

mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use glyphsieve::data::{
    eval_retrieval, gen_synthetic, load_manifest, Manifest, ManifestRecord, Split, SynthSpec,
};
use glyphsieve::imageops::{
    augment_pair, equalize, gamma_transform, load_pgm_file, save_pgm_file, AugmentConfig,
};
use glyphsieve::index::{
    build_store, fused_query_image, load_store, query, save_store, Encoder, FeatureStore,
    FusionWeights, StoreItem,
};
use glyphsieve::repvgg::{RepVggNet, StagePlan};
use glyphsieve::simsiam::{self, SimSiamConfig, SimSiamModel};
use glyphsieve::supervised::{self, LabeledDataset, SupervisedConfig};
use glyphsieve::tensor::{Checkpoint, Tape, Tensor};
use glyphsieve::{rng, ErrorKind};

pub use config::{Settings, KNOWN_KEYS};

/// Largest train-form vs fused deviation `reparam-check` accepts.
pub const REPARAM_TOL: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(glyphsieve::Error),
    /// A check ran to completion and failed.
    CheckFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<glyphsieve::Error> for CliError {
    fn from(e: glyphsieve::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e.kind() {
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
            CliError::CheckFailed(_) => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "glyphsieve",
    version,
    about = "Similar-glyph screening: contrastive and supervised embeddings with fused retrieval"
)]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset with a manifest.
    GenSynth(GenSynthArgs),
    /// Equalize and gamma-correct every image of a manifest.
    Preprocess(PreprocessArgs),
    /// Contrastive pre-training on the training split.
    TrainSimsiam(TrainArgs),
    /// Supervised classifier training on the training split.
    TrainSup(TrainArgs),
    /// Re-parameterize a supervised checkpoint into its single-branch form.
    ExportFused(CheckpointArg),
    /// Print the embedding of one image.
    Embed(EmbedArgs),
    /// Embed a manifest split into a store file.
    BuildStore(BuildStoreArgs),
    /// Rank a store against one image.
    Query(QueryArgs),
    /// Rank two stores against one image with weighted score fusion.
    FusedQuery(FusedQueryArgs),
    /// Retrieval metrics for validation-split queries.
    Eval(EvalArgs),
    /// Compare a training-form network with its fused form.
    ReparamCheck(ReparamArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per class.
    #[arg(long)]
    samples: Option<usize>,
    /// Side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
    /// Also write the two seeded augmented views of every image.
    #[arg(long)]
    dump_views: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    /// Stage plan, e.g. `1/16:1,32:2,64:2,128:1`.
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    proj_width: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Augment training images (`true`/`false`; supervised only).
    #[arg(long)]
    augment: Option<bool>,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildStoreArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `train`, `val` or `all`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Encoder that built the store.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FusedQueryArgs {
    #[arg(long)]
    store_u: Option<PathBuf>,
    #[arg(long)]
    store_s: Option<PathBuf>,
    #[arg(long)]
    checkpoint_u: Option<PathBuf>,
    #[arg(long)]
    checkpoint_s: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the unsupervised score; the supervised weight is `1 − w`.
    #[arg(long)]
    w_unsup: Option<f64>,
    /// Append the two component scores to each line.
    #[arg(long)]
    components: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    store_u: Option<PathBuf>,
    #[arg(long)]
    store_s: Option<PathBuf>,
    #[arg(long)]
    checkpoint_u: Option<PathBuf>,
    #[arg(long)]
    checkpoint_s: Option<PathBuf>,
    #[arg(long)]
    w_unsup: Option<f64>,
    /// Comma-separated cutoffs.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct ReparamArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Random inputs to compare on.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

const DEFAULT_OUT: &str = "glyphsieve-out";
const DEFAULT_VAL_FRACTION: f64 = 0.25;
const DEFAULT_K: usize = 5;

struct Ctx<'a> {
    settings: Settings,
    seed: u64,
    out_flag: Option<PathBuf>,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self
            .settings
            .or(self.out_flag.clone(), "out", PathBuf::from(DEFAULT_OUT))?;
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn line(&mut self, s: impl fmt::Display) -> CliResult {
        writeln!(self.stdout, "{s}").map_err(|e| io_err(Path::new("<stdout>"), e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Lib(glyphsieve::Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> CliResult {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let seed = settings.or(cli.seed, "seed", 0u64)?;
    let mut ctx = Ctx {
        settings,
        seed,
        out_flag: cli.out,
        stdout,
    };
    match cli.command {
        Command::GenSynth(a) => gen_synth_cmd(&mut ctx, a),
        Command::Preprocess(a) => preprocess_cmd(&mut ctx, a),
        Command::TrainSimsiam(a) => train_simsiam_cmd(&mut ctx, a),
        Command::TrainSup(a) => train_sup_cmd(&mut ctx, a),
        Command::ExportFused(a) => export_fused_cmd(&mut ctx, a),
        Command::Embed(a) => embed_cmd(&mut ctx, a),
        Command::BuildStore(a) => build_store_cmd(&mut ctx, a),
        Command::Query(a) => query_cmd(&mut ctx, a),
        Command::FusedQuery(a) => fused_query_cmd(&mut ctx, a),
        Command::Eval(a) => eval_cmd(&mut ctx, a),
        Command::ReparamCheck(a) => reparam_cmd(&mut ctx, a),
    }
}

fn gen_synth_cmd(ctx: &mut Ctx, a: GenSynthArgs) -> CliResult {
    let s = &ctx.settings;
    let d = SynthSpec::default();
    let size = s.or(a.size, "size", d.width)?;
    let spec = SynthSpec {
        classes: s.or(a.classes, "classes", d.classes)?,
        samples_per_class: s.or(a.samples, "samples", d.samples_per_class)?,
        width: size,
        height: size,
        jitter: s.or(a.jitter, "jitter", d.jitter)?,
        seed: ctx.seed,
        ..d
    };
    let dir = ctx.out_dir()?;
    let m = gen_synthetic(&spec, &dir)?;
    ctx.line(format_args!(
        "wrote {} images in {} classes to {}",
        m.len(),
        m.num_classes(),
        dir.display()
    ))
}

fn preprocess_cmd(ctx: &mut Ctx, a: PreprocessArgs) -> CliResult {
    let s = &ctx.settings;
    let manifest = load_manifest(s.require(a.manifest, "manifest")?)?;
    let gamma = s.or(a.gamma, "gamma", 1.0)?;
    let gain = s.or(a.gain, "gain", 1.0)?;
    let dir = ctx.out_dir()?;
    let aug = AugmentConfig {
        seed: rng::derive_seed(ctx.seed, "preprocess/views"),
        ..AugmentConfig::default()
    };
    let mut records = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let img = load_pgm_file(manifest.resolve(r))?;
        let enhanced = gamma_transform(&equalize(&img), gain, gamma)?;
        let file = PathBuf::from(format!("{}.pgm", r.id));
        save_pgm_file(dir.join(&file), &enhanced)?;
        if a.dump_views {
            let (v0, v1) = augment_pair(&img, &aug, i as u64)?;
            save_pgm_file(dir.join(format!("{}_view0.pgm", r.id)), &v0)?;
            save_pgm_file(dir.join(format!("{}_view1.pgm", r.id)), &v1)?;
        }
        records.push(ManifestRecord {
            path: file,
            id: r.id.clone(),
            label: r.label.clone(),
        });
    }
    let out = Manifest::new(&dir, records)?;
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, out.to_tsv()).map_err(|e| io_err(&path, e))?;
    ctx.line(format_args!(
        "preprocessed {} images into {}",
        out.len(),
        dir.display()
    ))
}

fn parse_plan(s: &Settings, flag: Option<String>) -> CliResult<StagePlan> {
    match s.pick(flag, "plan")? {
        Some(p) => Ok(p.parse::<StagePlan>()?),
        None => Ok(StagePlan::default()),
    }
}

/// Manifest, its images, and the split tags.
fn load_split(
    s: &Settings,
    manifest: Option<PathBuf>,
    val_fraction: Option<f64>,
) -> CliResult<(Manifest, Vec<glyphsieve::imageops::GrayImage>, Vec<Split>)> {
    let manifest = load_manifest(s.require(manifest, "manifest")?)?;
    let images = manifest.load_images()?;
    let splits = manifest.split(s.or(val_fraction, "val_fraction", DEFAULT_VAL_FRACTION)?)?;
    Ok((manifest, images, splits))
}

fn write_jsonl(path: &Path, lines: &[String]) -> CliResult {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn train_simsiam_cmd(ctx: &mut Ctx, a: TrainArgs) -> CliResult {
    let s = &ctx.settings;
    let d = SimSiamConfig::default();
    let cfg = SimSiamConfig {
        plan: parse_plan(s, a.plan)?,
        proj_width: s.or(a.proj_width, "proj_width", d.proj_width)?,
        epochs: s.or(a.epochs, "epochs", d.epochs)?,
        batch_size: s.or(a.batch_size, "batch_size", d.batch_size)?,
        base_lr: s.or(a.base_lr, "base_lr", d.base_lr)?,
        seed: ctx.seed,
        ..d
    };
    let (_, images, splits) = load_split(s, a.manifest, a.val_fraction)?;
    let train: Vec<_> = images
        .into_iter()
        .zip(&splits)
        .filter(|(_, t)| **t == Split::Train)
        .map(|(img, _)| img)
        .collect();
    let dir = ctx.out_dir()?;
    let mut model = SimSiamModel::new(
        &cfg.plan,
        cfg.proj_width,
        &mut rng::stream(cfg.seed, "simsiam/init"),
    )?;
    let mut lines = Vec::new();
    simsiam::train_simsiam_model(&mut model, &train, &cfg, |e| {
        lines.push(serde_json::to_string(e).expect("metrics serialize"));
    })?;
    for l in &lines {
        ctx.line(l)?;
    }
    write_jsonl(&dir.join("simsiam_metrics.jsonl"), &lines)?;
    simsiam::save_encoder(&model, dir.join("simsiam.ckpt"))?;
    Ok(())
}

fn train_sup_cmd(ctx: &mut Ctx, a: TrainArgs) -> CliResult {
    let s = &ctx.settings;
    let d = SupervisedConfig::default();
    let augment = s.or(a.augment, "augment", true)?;
    let cfg = SupervisedConfig {
        plan: parse_plan(s, a.plan)?,
        epochs: s.or(a.epochs, "epochs", d.epochs)?,
        batch_size: s.or(a.batch_size, "batch_size", d.batch_size)?,
        base_lr: s.or(a.base_lr, "base_lr", d.base_lr)?,
        augment: if augment { d.augment.clone() } else { None },
        seed: ctx.seed,
        ..d
    };
    let (manifest, images, splits) = load_split(s, a.manifest, a.val_fraction)?;
    let data = LabeledDataset::from_manifest(&manifest, &images, Some((&splits, Split::Train)))?;
    let dir = ctx.out_dir()?;
    let (model, metrics) = supervised::train_supervised(&data, &cfg)?;
    let lines: Vec<String> = metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize"))
        .collect();
    for l in &lines {
        ctx.line(l)?;
    }
    write_jsonl(&dir.join("supervised_metrics.jsonl"), &lines)?;
    supervised::save_supervised(&model, dir.join("supervised.ckpt"))?;
    Ok(())
}

fn export_fused_cmd(ctx: &mut Ctx, a: CheckpointArg) -> CliResult {
    let path = ctx.settings.require(a.checkpoint, "checkpoint")?;
    let model = supervised::load_supervised(&path)?;
    let dir = ctx.out_dir()?;
    let out = dir.join("fused.ckpt");
    supervised::export_fused(&model, &out)?;
    ctx.line(format_args!("wrote {}", out.display()))
}

/// A checkpoint of either kind, ready to embed. Supervised checkpoints are
/// always used in fused form.
fn load_any_encoder(path: &Path) -> CliResult<Box<dyn Encoder>> {
    let ckpt = Checkpoint::load(path)?;
    match ckpt.require_meta("kind")? {
        simsiam::CHECKPOINT_KIND => Ok(Box::new(simsiam::encoder_from_checkpoint(&ckpt)?)),
        supervised::CHECKPOINT_KIND => {
            let m = supervised::supervised_from_checkpoint(&ckpt)?;
            Ok(Box::new(if m.is_fused() { m } else { m.reparameterize()? }))
        }
        other => {
            Err(glyphsieve::Error::Checkpoint(format!("unknown checkpoint kind `{other}`")).into())
        }
    }
}

fn format_vector(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.16e}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn embed_cmd(ctx: &mut Ctx, a: EmbedArgs) -> CliResult {
    let enc = load_any_encoder(&ctx.settings.require(a.checkpoint, "checkpoint")?)?;
    let img = load_pgm_file(ctx.settings.require::<PathBuf>(a.image, "image")?)?;
    let v = enc.embed(&img)?;
    ctx.line(format_vector(&v))
}

fn build_store_cmd(ctx: &mut Ctx, a: BuildStoreArgs) -> CliResult {
    let s = &ctx.settings;
    let enc = load_any_encoder(&s.require(a.checkpoint, "checkpoint")?)?;
    let split = s.or(a.split, "split", "train".to_string())?;
    let keep: Option<Split> = match split.as_str() {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "all" => None,
        other => {
            return Err(CliError::Usage(format!(
                "--split must be train, val or all, got `{other}`"
            )))
        }
    };
    let (manifest, images, splits) = load_split(s, a.manifest, a.val_fraction)?;
    let classes = manifest.class_indices();
    let items: Vec<StoreItem> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.is_none_or(|k| splits[*i] == k))
        .map(|(i, r)| StoreItem {
            id: &r.id,
            label: Some(classes[i]),
            image: &images[i],
        })
        .collect();
    let dim = enc.embed(&images[0])?.len();
    let store = build_store(&items, enc.as_ref(), enc.source(), dim)?;
    let dir = ctx.out_dir()?;
    let path = dir.join(format!("{}.gst", store.source()));
    save_store(&store, &path)?;
    ctx.line(format_args!(
        "wrote {} records to {}",
        store.len(),
        path.display()
    ))
}

fn query_cmd(ctx: &mut Ctx, a: QueryArgs) -> CliResult {
    let s = &ctx.settings;
    let store = load_store(s.require::<PathBuf>(a.store, "store")?)?;
    let enc = load_any_encoder(&s.require(a.checkpoint, "checkpoint")?)?;
    let img = load_pgm_file(s.require::<PathBuf>(a.image, "image")?)?;
    let k = s.or(a.k, "k", DEFAULT_K)?;
    store.check_encoder(enc.as_ref())?;
    let hits = query(&store, &enc.embed(&img)?, k)?;
    for (rank, h) in hits.iter().enumerate() {
        ctx.line(format_args!("{}\t{}\t{:.6}", rank + 1, h.id, h.score))?;
    }
    Ok(())
}

fn weights(s: &Settings, flag: Option<f64>) -> CliResult<FusionWeights> {
    Ok(FusionWeights::unsup(s.or(
        flag,
        "w_unsup",
        FusionWeights::default().w_unsup(),
    )?)?)
}

fn fused_query_cmd(ctx: &mut Ctx, a: FusedQueryArgs) -> CliResult {
    let s = &ctx.settings;
    let store_u = load_store(s.require::<PathBuf>(a.store_u, "store_u")?)?;
    let store_s = load_store(s.require::<PathBuf>(a.store_s, "store_s")?)?;
    let enc_u = load_any_encoder(&s.require(a.checkpoint_u, "checkpoint_u")?)?;
    let enc_s = load_any_encoder(&s.require(a.checkpoint_s, "checkpoint_s")?)?;
    let img = load_pgm_file(s.require::<PathBuf>(a.image, "image")?)?;
    let k = s.or(a.k, "k", DEFAULT_K)?;
    let w = weights(s, a.w_unsup)?;
    let hits = fused_query_image(
        &img,
        enc_u.as_ref(),
        enc_s.as_ref(),
        &store_u,
        &store_s,
        w,
        k,
    )?;
    for (rank, h) in hits.iter().enumerate() {
        if a.components {
            ctx.line(format_args!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                rank + 1,
                h.id,
                h.score,
                h.s_unsup,
                h.s_sup
            ))?;
        } else {
            ctx.line(format_args!("{}\t{}\t{:.6}", rank + 1, h.id, h.score))?;
        }
    }
    Ok(())
}

fn parse_ks(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| CliError::Usage(format!("bad k `{t}`")))
        })
        .collect()
}

fn eval_cmd(ctx: &mut Ctx, a: EvalArgs) -> CliResult {
    let s = &ctx.settings;
    let store_u = s
        .pick::<PathBuf>(a.store_u, "store_u")?
        .map(load_store)
        .transpose()?;
    let store_s = s
        .pick::<PathBuf>(a.store_s, "store_s")?
        .map(load_store)
        .transpose()?;
    if store_u.is_none() && store_s.is_none() {
        return Err(CliError::Usage(
            "missing required flag --store-u or --store-s".into(),
        ));
    }
    let enc_u = match &store_u {
        Some(_) => Some(load_any_encoder(
            &s.require(a.checkpoint_u, "checkpoint_u")?,
        )?),
        None => None,
    };
    let enc_s = match &store_s {
        Some(_) => Some(load_any_encoder(
            &s.require(a.checkpoint_s, "checkpoint_s")?,
        )?),
        None => None,
    };
    let ks = parse_ks(&s.or(a.k, "k", "1,5".to_string())?)?;
    let w = weights(s, a.w_unsup)?;
    let (manifest, images, splits) = load_split(s, a.manifest, a.val_fraction)?;
    let labels = manifest.label_map();
    let candidates = store_u
        .as_ref()
        .or(store_s.as_ref())
        .map(FeatureStore::len)
        .unwrap_or(0);
    let mut rankings = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if splits[i] != Split::Val {
            continue;
        }
        // one extra slot so excluding the query's own id keeps every candidate
        let k = candidates + 1;
        let ids: Vec<String> = match (&store_u, &store_s, &enc_u, &enc_s) {
            (Some(su), Some(ss), Some(eu), Some(es)) => {
                fused_query_image(&images[i], eu.as_ref(), es.as_ref(), su, ss, w, k)?
                    .into_iter()
                    .map(|h| h.id)
                    .collect()
            }
            (Some(st), None, Some(e), _) | (None, Some(st), _, Some(e)) => {
                st.check_encoder(e.as_ref())?;
                query(st, &e.embed(&images[i])?, k)?
                    .into_iter()
                    .map(|h| h.id)
                    .collect()
            }
            _ => unreachable!("at least one store with its encoder"),
        };
        rankings.push((r.id.clone(), ids));
    }
    let metrics = eval_retrieval(&rankings, &labels, &ks)?;
    let mode = match (&store_u, &store_s) {
        (Some(_), Some(_)) => "fused",
        (Some(_), None) => "unsupervised",
        _ => "supervised",
    };
    let report = serde_json::json!({
        "mode": mode,
        "w_unsup": w.w_unsup(),
        "metrics": metrics,
    });
    let text = serde_json::to_string(&report).expect("report serializes");
    let dir = ctx.out_dir()?;
    let path = dir.join("eval.json");
    std::fs::write(&path, format!("{text}\n")).map_err(|e| io_err(&path, e))?;
    ctx.line(text)
}

/// Largest elementwise gap between the training form (eval-mode batch norm)
/// and the fused form over `batch` seeded random inputs.
pub fn reparam_deviation(
    net: &RepVggNet,
    batch: usize,
    size: usize,
    seed: u64,
) -> glyphsieve::Result<f64> {
    let fused = net.reparameterize()?;
    let mut r = rng::stream(seed, "reparam-check/input");
    let x = Tensor::randn(&[batch, net.plan.in_channels, size, size], 1.0, &mut r);
    let run = |m: &RepVggNet| -> glyphsieve::Result<Tensor> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let y = m.forward(&mut tape, v)?;
        Ok(tape.value(y).clone())
    };
    Ok(run(net)?.max_abs_diff(&run(&fused)?))
}

fn reparam_cmd(ctx: &mut Ctx, a: ReparamArgs) -> CliResult {
    let s = &ctx.settings;
    let net = supervised::load_supervised(s.require::<PathBuf>(a.checkpoint, "checkpoint")?)?;
    if net.is_fused() {
        return Err(glyphsieve::Error::Fusion(
            "checkpoint is already fused; reparam-check needs the training form".into(),
        )
        .into());
    }
    let batch = s.or(a.batch, "batch", 4)?;
    let size = s.or(a.size, "size", 32)?;
    let dev = reparam_deviation(&net, batch, size, ctx.seed)?;
    ctx.line(format_args!("max_abs_deviation\t{dev:e}"))?;
    if dev < REPARAM_TOL {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "deviation {dev:e} exceeds {REPARAM_TOL:e}"
        )))
    }
}
