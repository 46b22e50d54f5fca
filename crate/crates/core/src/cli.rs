//! The `gaitdyn` command line.
//!
//! Exit status: 0 success, 1 check failure, 2 usage or validation,
//! 3 I/O, 4 divergence, 5 empty gallery.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    cross_view_protocol, dump_embeddings, embed_all, evaluate, EmbeddingSet, ViewProtocol,
};
use crate::gradcheck::run_suite;
use crate::heatmap::{activation_heatmap, normalize_with_regions, region_heat, to_gray};
use crate::image_io::{read_frame, write_pgm};
use crate::loss::LossReport;
use crate::model::{DamMode, ModelParams};
use crate::preprocess::{
    frame_paths, load_partition, load_sequence_with_report, normalize_frame, scan_dataset,
    DatasetManifest, Partition, PartitionRule, SilhouetteSequence, MANIFEST_FILE,
};
use crate::synth::{generate_dataset, ConfounderPolicy, SynthConfig};
use crate::tape::OpKind;
use crate::train::{params_from_checkpoint, TrainState, TrainingData};

#[derive(Parser, Debug)]
#[command(
    name = "gaitdyn",
    version,
    about = "Silhouette gait recognition with dynamic feature blocks"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic walker dataset.
    Synth(SynthArgs),
    /// Normalize a silhouette tree and write a manifest.
    Prep(PrepArgs),
    /// Train a model, writing checkpoints and a CSV loss log.
    Train(TrainArgs),
    /// Gallery-probe evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Per-frame activation heatmaps of one block.
    Heatmap(HeatmapArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
    /// Write per-sequence embeddings as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    ids: usize,
    #[arg(long, default_value_t = 8)]
    seqs: usize,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 44)]
    width: usize,
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = Confounder::Random)]
    confounder: Confounder,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Confounder {
    None,
    Random,
    Adversarial,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct PrepArgs {
    /// Raw tree `<root>/<subject>/<condition>/<view>/`. An existing
    /// manifest there fixes the partitions.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Without a manifest: the first N subjects (sorted) train.
    #[arg(long, default_value_t = 0)]
    train_subjects: usize,
    /// Without a manifest: gallery sequences per remaining subject.
    #[arg(long, default_value_t = 1)]
    gallery_per_subject: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root holding manifest.csv (overrides `dataset`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// Number of dynamic blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Loss log path (default: standard output).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Ablation {
    GfeOnly,
    DfeOnly,
    Both,
}

impl From<Ablation> for DamMode {
    fn from(a: Ablation) -> Self {
        match a {
            Ablation::GfeOnly => DamMode::GfeOnly,
            Ablation::DfeOnly => DamMode::DfeOnly,
            Ablation::Both => DamMode::Both,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (default: the checkpoint's `dataset`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::Plain)]
    protocol: Protocol,
    /// Partition ranked against the gallery.
    #[arg(long, value_enum, default_value_t = ProbeSet::Probe)]
    probe_set: ProbeSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Protocol {
    Plain,
    CrossView,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeSet {
    Probe,
    Gallery,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw sequence directory.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long, default_value_t = 0)]
    block: usize,
    #[arg(long)]
    out: PathBuf,
    /// Region label directory; bare `--regions` looks under
    /// `<root>/regions/<subject>/<condition>/<view>`.
    #[arg(long, num_args = 0..=1)]
    regions: Option<Option<PathBuf>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb one backward rule (self-test of the checker).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Which::All)]
    partition: Which,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    All,
    Train,
    Gallery,
    Probe,
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        // only the first call in a process can size the global pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prep(a) => cmd_prep(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DumpEmbeddings(a) => cmd_dump(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, body: &str) -> Result<()> {
    fs::write(p, body).map_err(|e| Error::io(p, e))
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        identities: a.ids,
        seqs_per_id: a.seqs,
        frames: a.frames,
        height: a.height,
        width: a.width,
        noise: a.noise,
        confounder: match a.confounder {
            Confounder::None => ConfounderPolicy::None,
            Confounder::Random => ConfounderPolicy::Random,
            Confounder::Adversarial => ConfounderPolicy::Adversarial,
        },
        seed: a.seed,
        ..SynthConfig::default()
    };
    crate::synth::identity_params(&cfg)?;
    mkdir(&a.out)?;
    let m = generate_dataset(&a.out, &cfg)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    log::info!("{} sequences", m.entries.len());
    Ok(0)
}

fn cmd_prep(a: PrepArgs) -> Result<i32> {
    let cfg = a.cfg.load()?;
    let (h, w) = cfg.model.input_size;
    let existing = a.input.join(MANIFEST_FILE);
    let manifest = if existing.is_file() {
        DatasetManifest::read(&existing)?
    } else {
        scan_dataset(
            &a.input,
            PartitionRule {
                train_subjects: a.train_subjects,
                gallery_per_subject: a.gallery_per_subject,
            },
        )?
    };
    let mut out = DatasetManifest {
        root: a.out.clone(),
        entries: Vec::new(),
    };
    for e in &manifest.entries {
        let (seq, report) =
            load_sequence_with_report(&manifest.sequence_dir(e), h, w, cfg.normalize)?;
        let dir = a.out.join(&e.path);
        mkdir(&dir)?;
        for (t, f) in seq.frames.iter().enumerate() {
            write_pgm(
                &dir.join(format!("{t:04}.pgm")),
                &f.clone().map_values(|v| v * 255),
                255,
            )?;
        }
        if !report.dropped.is_empty() {
            log::warn!("{}: dropped {} frames", e.path, report.dropped.len());
        }
        out.entries.push(crate::preprocess::ManifestEntry {
            frames: seq.frames.len(),
            ..e.clone()
        });
    }
    let path = a.out.join(MANIFEST_FILE);
    out.write(&path)?;
    println!("{}", path.display());
    Ok(0)
}

fn dataset_root(explicit: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    explicit
        .clone()
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `dataset`".into()))
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(&root.join(MANIFEST_FILE))
}

fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:06}.dygt"))
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let (mut cfg, resumed) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            (RunConfig::parse(&ckpt.config)?, Some(ckpt))
        }
        None => (a.cfg.load()?, None),
    };
    if resumed.is_some()
        && (a.cfg.config.is_some()
            || !a.cfg.overrides.is_empty()
            || a.ablation.is_some()
            || a.blocks.is_some()
            || a.seed.is_some())
    {
        return Err(Error::Config(
            "--resume uses the stored configuration; only --iters and --data may be given".into(),
        ));
    }
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.ablation {
        cfg.model.mode = m.into();
    }
    if let Some(n) = a.blocks {
        if n == 0 {
            return Err(Error::Config("--blocks must be at least 1".into()));
        }
        cfg.model = cfg.model.with_blocks(n);
    }
    if let Some(d) = &a.data {
        cfg.dataset = Some(d.clone());
    }
    cfg.validate()?;
    let root = dataset_root(&None, &cfg)?;
    let manifest = read_manifest(&root)?;
    let data = TrainingData::from_manifest(&manifest, &cfg.model, cfg.normalize)?;
    let mut state = match resumed {
        Some(ckpt) => TrainState::from_checkpoint(&ckpt, cfg.model.clone(), cfg.train.clone())?,
        None => TrainState::new(cfg.model.clone(), cfg.train.clone(), data.classes())?,
    };
    if state.classifier.classes() != data.classes() {
        return Err(Error::Config(format!(
            "checkpoint classifier has {} classes, dataset has {}",
            state.classifier.classes(),
            data.classes()
        )));
    }
    mkdir(&a.out)?;
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(log, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io("training log", e))?;
    let blob = cfg.to_text();
    let out = a.out.clone();
    let mut save = |s: &TrainState| {
        s.to_checkpoint(blob.clone())
            .save(&checkpoint_path(&out, s.iteration))
    };
    let until = cfg.train.iterations;
    let result = state.run(&data, until, &mut log, &mut save);
    log.flush().map_err(|e| Error::io("training log", e))?;
    drop(log);
    match result {
        Ok(_) => {}
        Err(e @ Error::Divergence { .. }) => {
            // the state is untouched by the failed step
            let p = checkpoint_path(&a.out, state.iteration);
            save(&state)?;
            eprintln!("last good checkpoint: {}", p.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    }
    let final_path = checkpoint_path(&a.out, state.iteration);
    if !final_path.exists()
        || cfg.train.checkpoint_every == 0
        || state.iteration % cfg.train.checkpoint_every != 0
    {
        save(&state)?;
    }
    eprintln!("final checkpoint: {}", final_path.display());
    if a.log.is_some() {
        println!("{}", final_path.display());
    }
    Ok(0)
}

fn load_model(path: &Path) -> Result<(RunConfig, ModelParams<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    cfg.model.validate()?;
    let params = params_from_checkpoint(&ckpt, &cfg.model)?;
    Ok((cfg, params))
}

fn embed_partition(
    manifest: &DatasetManifest,
    p: Partition,
    cfg: &RunConfig,
    params: &ModelParams<f32>,
) -> Result<EmbeddingSet> {
    let seqs = load_partition(manifest, p, cfg.model.input_size, cfg.normalize)?;
    Ok(embed_all(&seqs, params, &cfg.model)?.0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let (cfg, params) = load_model(&a.checkpoint)?;
    let manifest = read_manifest(&dataset_root(&a.data, &cfg)?)?;
    let gallery = embed_partition(&manifest, Partition::Gallery, &cfg, &params)?;
    let probe = match a.probe_set {
        ProbeSet::Probe => embed_partition(&manifest, Partition::Probe, &cfg, &params)?,
        ProbeSet::Gallery => gallery.clone(),
    };
    if gallery.is_empty() {
        return Err(Error::EmptyGallery(
            "no gallery sequences in the manifest".into(),
        ));
    }
    mkdir(&a.out)?;
    let summary = match a.protocol {
        Protocol::Plain => {
            let r = evaluate(&probe, &gallery, cfg.distance)?;
            write_file(&a.out.join("metrics.csv"), &r.metrics_csv())?;
            write_file(&a.out.join("breakdown.csv"), &r.breakdown_csv())?;
            r.summary()
        }
        Protocol::CrossView => {
            let r = cross_view_protocol(
                &probe,
                &gallery,
                ViewProtocol::ExcludeIdenticalView,
                cfg.distance,
            )?;
            write_file(&a.out.join("cross_view.csv"), &r.matrix_csv())?;
            r.summary()
        }
    };
    write_file(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(0)
}

/// `<root>/<subject>/<condition>/<view>` to `<root>/regions/<subject>/<condition>/<view>`.
fn default_region_dir(seq: &Path) -> Option<PathBuf> {
    let parts: Vec<_> = seq.iter().collect();
    if parts.len() < 4 {
        return None;
    }
    let (root, tail) = parts.split_at(parts.len() - 3);
    let mut p: PathBuf = root.iter().collect();
    p.push("regions");
    tail.iter().for_each(|s| p.push(s));
    Some(p)
}

fn read_frames(dir: &Path) -> Result<Vec<crate::image_io::Gray>> {
    frame_paths(dir)?.iter().map(|p| read_frame(p)).collect()
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<i32> {
    let (cfg, params) = load_model(&a.checkpoint)?;
    let (h, w) = cfg.model.input_size;
    let raw = read_frames(&a.sequence)?;
    let regions_dir = match &a.regions {
        None => None,
        Some(None) => Some(default_region_dir(&a.sequence).ok_or_else(|| {
            Error::Config("cannot derive the region directory; pass --regions DIR".into())
        })?),
        Some(Some(p)) => Some(p.clone()),
    };
    let (frames, regions) = match &regions_dir {
        Some(d) => {
            let (f, r) = normalize_with_regions(&raw, &read_frames(d)?, h, w, cfg.normalize)?;
            (f, Some(r))
        }
        None => (
            raw.iter()
                .filter_map(|f| normalize_frame(f, h, w, cfg.normalize))
                .collect(),
            None,
        ),
    };
    let name = |i: usize| {
        a.sequence
            .iter()
            .rev()
            .nth(i)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let seq = SilhouetteSequence {
        subject: name(2),
        condition: name(1),
        view: name(0),
        frames,
    };
    let maps = activation_heatmap(&seq.to_tensor::<f32>()?, &params, &cfg.model, a.block)?;
    mkdir(&a.out)?;
    let stem = [&seq.subject, &seq.condition, &seq.view]
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join("-");
    for (t, m) in maps.iter().enumerate() {
        let p = a.out.join(format!("{stem}_block{}_{t:04}.pgm", a.block));
        write_pgm(&p, &to_gray(m, h, w), 255)?;
    }
    if let Some(r) = regions {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        println!("heat_legs,heat_bag");
        println!(
            "{},{}",
            f(region_heat(&maps, &r.legs)),
            f(region_heat(&maps, &r.bag))
        );
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let fault = match &a.inject_fault {
        None => None,
        Some(s) => Some(
            OpKind::parse(s).ok_or_else(|| Error::Config(format!("unknown operation {s:?}")))?,
        ),
    };
    let start = std::time::Instant::now();
    let entries = run_suite(a.seed, fault)?;
    println!("op,case,max_rel_error,tolerance,checked,skipped_kinks,status");
    for e in &entries {
        let op = if e.op == OpKind::Leaf {
            "composite"
        } else {
            e.op.name()
        };
        println!(
            "{op},{},{:.3e},{:.0e},{},{},{}",
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            e.report.checked,
            e.report.skipped_kinks,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    eprintln!("gradient suite: {:.1}s", start.elapsed().as_secs_f64());
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed()).collect();
    if failed.is_empty() {
        return Ok(0);
    }
    for e in failed {
        let op = if e.op == OpKind::Leaf {
            "network + loss"
        } else {
            e.op.name()
        };
        eprintln!(
            "gradient check failed: {op} ({}), max relative error {:.3e}",
            e.name, e.report.max_rel_error
        );
    }
    Ok(1)
}

fn cmd_dump(a: DumpArgs) -> Result<i32> {
    let (cfg, params) = load_model(&a.checkpoint)?;
    let manifest = read_manifest(&dataset_root(&a.data, &cfg)?)?;
    let parts: &[Partition] = match a.partition {
        Which::All => &[Partition::Train, Partition::Gallery, Partition::Probe],
        Which::Train => &[Partition::Train],
        Which::Gallery => &[Partition::Gallery],
        Which::Probe => &[Partition::Probe],
    };
    let mut set = EmbeddingSet::default();
    for &p in parts {
        set.entries
            .extend(embed_partition(&manifest, p, &cfg, &params)?.entries);
    }
    dump_embeddings(&set, &a.out)?;
    println!("{}", a.out.display());
    Ok(0)
}
