use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use stepalign::data::{self, Dataset, Granularity, ModalityTables, Split};
use stepalign::emb::{read_embedding_table, EmbeddingTable};
use stepalign::gradcheck::{run_suite, GradCheckConfig};
use stepalign::io::write_atomic;
use stepalign::losses::Direction;
use stepalign::model::{load_checkpoint, save_checkpoint, Params};
use stepalign::run::RunManifest;
use stepalign::sampling::{reference_split_ratios, split_dataset};
use stepalign::setmatch::{AlignConfig, AlignMethod, OtObjective, SinkhornOptions};
use stepalign::store::{FeatureStore, Scorer};
use stepalign::synth::{generate, SynthConfig};
use stepalign::train::{train, TrainConfig};
use stepalign::Error;

/// Align assembly-video segments to instruction-manual diagrams.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Worker threads for parallel scoring (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Where to write the run manifest (defaults next to the outputs)
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assign videos to train/val/test with attribute balancing
    Split(SplitArgs),
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
    /// Train the projection heads
    Train(TrainArgs),
    /// Align every video of a split to its manual
    Align(AlignArgs),
    /// Rank candidates for one segment or diagram
    Retrieve(RetrieveArgs),
    /// Report top-1, AIE, R@1, R@3 and AUROC
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Check a manifest against its embedding tables
    Validate(DataArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding manifest.json, diagrams.emb and clips.emb
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Raw diagram features
    #[arg(long)]
    diagrams: Option<PathBuf>,
    /// Raw clip features
    #[arg(long)]
    clips: Option<PathBuf>,
}

struct Loaded {
    dataset: Dataset,
    diagrams: EmbeddingTable,
    clips: EmbeddingTable,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, file: &str, flag: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(file)),
            (None, None) => Err(Error::InvalidArgument(format!("pass --{flag} or --data")).into()),
        }
    }

    fn load(&self) -> Result<Loaded> {
        let manifest = self.path(&self.manifest, "manifest.json", "manifest")?;
        let dataset = data::load_manifest(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
        let diagrams = read_embedding_table(self.path(&self.diagrams, "diagrams.emb", "diagrams")?)?;
        let clips = read_embedding_table(self.path(&self.clips, "clips.emb", "clips")?)?;
        let report = data::validate_dataset(&dataset, ModalityTables::new(&diagrams, &clips));
        if !report.is_empty() {
            for id in report.missing_embeddings.iter().take(10) {
                eprintln!("missing embedding: {id}");
            }
            for m in report.dim_mismatches.iter().chain(&report.leakage) {
                eprintln!("{m}");
            }
            return Err(Error::InvalidDataset(format!("{} validation problems", report.problem_count())).into());
        }
        Ok(Loaded {
            dataset,
            diagrams,
            clips,
        })
    }
}

#[derive(Args, Debug)]
struct AlignOpts {
    /// raw, ot or dtw
    #[arg(long, default_value = "raw")]
    method: AlignMethod,
    /// Entropic regularization of the transport problem
    #[arg(long, default_value_t = stepalign::setmatch::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Exponent of the cost matrix
    #[arg(long, default_value_t = stepalign::setmatch::DEFAULT_ALPHA)]
    alpha: f64,
    /// Minimize the cost instead of maximizing it
    #[arg(long)]
    literal_ot: bool,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
}

impl AlignOpts {
    fn config(&self) -> AlignConfig {
        AlignConfig {
            method: self.method,
            epsilon: self.epsilon,
            alpha: self.alpha,
            sinkhorn: SinkhornOptions {
                tol: self.tol,
                max_iter: self.max_iter,
                objective: if self.literal_ot {
                    OtObjective::Minimize
                } else {
                    OtObjective::Maximize
                },
            },
        }
    }
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest
    #[arg(long)]
    out: PathBuf,
    /// Train,val,test fractions (default: the reference dataset's)
    #[arg(long, value_parser = parse_ratios)]
    ratios: Option<[f64; 3]>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    manuals: usize,
    /// Steps per manual, inclusive range such as 4..12
    #[arg(long, default_value = "4..12", value_parser = parse_range)]
    steps: (usize, usize),
    #[arg(long, default_value = "1..3", value_parser = parse_range)]
    segments_per_step: (usize, usize),
    #[arg(long, default_value = "4..8", value_parser = parse_range)]
    videos: (usize, usize),
    #[arg(long, default_value = "1..3", value_parser = parse_range)]
    steps_per_page: (usize, usize),
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    drift: f64,
    #[arg(long, default_value_t = 0.0)]
    skip_prob: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// key = value training config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    align: AlignOpts,
    #[arg(long, default_value = "step")]
    granularity: Granularity,
    /// Also write each video's similarity and score matrices
    #[arg(long)]
    dump_matrices: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    align: AlignOpts,
    #[arg(long, default_value = "step")]
    granularity: Granularity,
    /// Segment id (v2i) or diagram id (i2v)
    #[arg(long)]
    query: String,
    /// v2i or i2v
    #[arg(long, default_value = "v2i", value_parser = parse_direction)]
    direction: Direction,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    match s.to_ascii_lowercase().as_str() {
        "v2i" => Ok(Direction::V2I),
        "i2v" => Ok(Direction::I2V),
        other => Err(format!("unknown direction `{other}` (expected v2i or i2v)")),
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    align: AlignOpts,
    #[arg(long, value_delimiter = ',', default_value = "step,page")]
    granularity: Vec<Granularity>,
    /// Directory for report.csv and report.txt
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn manifest_path(cli: &Cli, default: PathBuf) -> PathBuf {
    cli.run_manifest.clone().unwrap_or(default)
}

fn parse_ratios(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("expected three fractions, got {}", p.len()))
}

fn cmd_split(cli: &Cli, a: &SplitArgs) -> Result<()> {
    let mut ds = data::load_manifest(&a.manifest)?;
    let ratios = a.ratios.unwrap_or_else(reference_split_ratios);
    let mut run = RunManifest::start(
        "split",
        json!({ "manifest": a.manifest, "ratios": ratios }),
        Some(a.seed),
    );
    let assignment = split_dataset(&ds.videos, ratios, a.seed)?;
    ds.set_splits(assignment.split_lists())?;
    data::save_manifest(&ds, &a.out)?;
    let mut counts = serde_json::Map::new();
    for s in Split::ALL {
        let videos = ds.videos_in(s).len();
        let segments = ds.segments_in(s, None).len();
        println!("{s}: {videos} videos, {segments} segments");
        counts.insert(s.to_string(), json!({ "videos": videos, "segments": segments }));
    }
    run.output("manifest", &a.out);
    run.metrics = counts.into();
    run.finish(&manifest_path(cli, a.out.with_extension("run.json")))?;
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_manuals: a.manuals,
        steps: a.steps,
        segments_per_step: a.segments_per_step,
        videos_per_manual: a.videos,
        steps_per_page: a.steps_per_page,
        raw_dim: a.dim,
        sigma: a.sigma,
        drift: a.drift,
        skip_prob: a.skip_prob,
        seed: a.seed,
        ..Default::default()
    };
    let mut run = RunManifest::start("synth", serde_json::to_value(&cfg)?, Some(cfg.seed));
    let d = generate(&cfg)?;
    let paths = d.write(&a.out)?;
    let summary = d.dataset.summary();
    println!(
        "{} manuals, {} steps, {} pages, {} videos, {} segments -> {}",
        summary.manuals,
        summary.steps,
        summary.pages,
        summary.videos,
        summary.segments,
        a.out.display()
    );
    run.output("manifest", &paths.manifest);
    run.output("diagrams", &paths.diagrams);
    run.output("clips", &paths.clips);
    run.metrics = serde_json::to_value(summary)?;
    run.finish(&manifest_path(cli, a.out.join("run.json")))?;
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let loaded = a.data.load()?;
    print!("{}", cfg.to_text());
    let mut run = RunManifest::start("train", serde_json::to_value(&cfg)?, Some(cfg.seed));

    let outcome = train(&loaded.dataset, &loaded.diagrams, &loaded.clips, &cfg)?;
    make_dir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let log_path = a.out.join("train_log.csv");
    let cfg_path = a.out.join("config.txt");
    save_checkpoint(&outcome.params, cfg.sprf, &ckpt)?;
    write(&log_path, &outcome.log_csv(&cfg.losses))?;
    write(&cfg_path, &cfg.to_text())?;
    println!(
        "best epoch {} (val top-1 {}), initial val top-1 {}",
        outcome.best_epoch,
        fmt_opt(outcome.best_val_top1),
        fmt_opt(outcome.initial_val_top1)
    );
    run.output("checkpoint", &ckpt);
    run.output("log", &log_path);
    run.output("config", &cfg_path);
    run.metrics = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_top1": outcome.best_val_top1,
        "initial_val_top1": outcome.initial_val_top1,
    });
    run.finish(&manifest_path(cli, a.out.join("run.json")))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.3}"))
}

fn load_model(m: &ModelArgs) -> Result<(Loaded, Params, bool)> {
    let loaded = m.data.load()?;
    let (params, use_sprf) = load_checkpoint(&m.checkpoint)?;
    let extra = if use_sprf { 2 } else { 0 };
    if params.video.input_dim() != loaded.clips.dim() + extra
        || params.diagram.input_dim() != loaded.diagrams.dim() + extra
    {
        bail!(Error::InvalidArgument(format!(
            "checkpoint expects raw widths {} / {} but the tables have {} / {}",
            params.video.input_dim() - extra,
            params.diagram.input_dim() - extra,
            loaded.clips.dim(),
            loaded.diagrams.dim()
        )));
    }
    Ok((loaded, params, use_sprf))
}

fn matrix_csv(m: &ndarray::Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn numerical_failure(non_converged: &[String]) -> Result<()> {
    if non_converged.is_empty() {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "Sinkhorn did not converge for {} videos (first: {})",
        non_converged.len(),
        non_converged[0]
    ))
    .into())
}

fn cmd_align(cli: &Cli, a: &AlignArgs) -> Result<()> {
    let (loaded, params, use_sprf) = load_model(&a.model)?;
    let store = FeatureStore::new(&loaded.dataset, &loaded.diagrams, &loaded.clips, use_sprf);
    let scorer = Scorer {
        store: &store,
        params: &params,
    };
    let cfg = a.align.config();
    let mut run = RunManifest::start(
        "align",
        json!({ "align": cfg, "split": a.model.split, "granularity": a.granularity, "checkpoint": a.model.checkpoint }),
        None,
    );
    let scored = scorer.score_split(a.model.split, a.granularity, &cfg)?;
    make_dir(&a.out)?;
    let mut csv = String::from("video_id,segment_id,predicted_index,predicted_diagram,gt_index,score\n");
    let ds = &loaded.dataset;
    for vs in &scored.videos {
        let video = ds.video(&vs.video_id).expect("scored video exists");
        let diagrams = ds.manual_of(video).diagrams(a.granularity);
        for (row, seg_id) in vs.segments.iter().enumerate() {
            let j = vs.assignment[row];
            let gt = ds
                .find_segment(seg_id)
                .and_then(|k| ds.segment(k).gt(a.granularity))
                .map_or(String::new(), |g| g.to_string());
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                vs.video_id,
                seg_id,
                j,
                diagrams[j - 1].diagram_id,
                gt,
                vs.scores[[row, j - 1]]
            ));
        }
    }
    let out_csv = a.out.join("alignments.csv");
    write(&out_csv, &csv)?;
    run.output("alignments", &out_csv);
    if a.dump_matrices {
        let dir = a.out.join("matrices");
        make_dir(&dir)?;
        for (vs, s) in scored.videos.iter().zip(&scored.similarities) {
            write(&dir.join(format!("{}.similarity.csv", vs.video_id)), &matrix_csv(s))?;
            write(
                &dir.join(format!("{}.{}.csv", vs.video_id, cfg.method)),
                &matrix_csv(&vs.scores),
            )?;
        }
        run.output("matrices", &dir);
    }
    println!(
        "aligned {} videos ({} segments) with {}",
        scored.videos.len(),
        scored.videos.iter().map(|v| v.segments.len()).sum::<usize>(),
        cfg.method
    );
    if !scored.degenerate.is_empty() {
        log::warn!("{} videos had a constant similarity matrix", scored.degenerate.len());
    }
    run.metrics = json!({
        "videos": scored.videos.len(),
        "non_converged": scored.non_converged,
        "degenerate": scored.degenerate,
    });
    run.finish(&manifest_path(cli, a.out.join("run.json")))?;
    numerical_failure(&scored.non_converged)
}

fn cmd_retrieve(cli: &Cli, a: &RetrieveArgs) -> Result<()> {
    let (loaded, params, use_sprf) = load_model(&a.model)?;
    let store = FeatureStore::new(&loaded.dataset, &loaded.diagrams, &loaded.clips, use_sprf);
    let scorer = Scorer {
        store: &store,
        params: &params,
    };
    let cfg = a.align.config();
    let q = scorer.query(a.model.split, a.granularity, &cfg, &a.query, a.direction)?;
    if a.k > q.pool.len() {
        log::warn!(
            "k = {} exceeds the pool of {}; returning the full ranking",
            a.k,
            q.pool.len()
        );
        eprintln!("warning: k = {} truncated to the pool size {}", a.k, q.pool.len());
    }
    let top = q.top_k(a.k);
    for (rank, (id, score)) in top.iter().enumerate() {
        let mark = if q.positives.contains(*id) { "*" } else { "" };
        println!("{}\t{id}\t{score:.6}{mark}", rank + 1);
    }
    if let Some(path) = &cli.run_manifest {
        let mut run = RunManifest::start(
            "retrieve",
            json!({ "query": a.query, "direction": a.direction, "k": a.k, "align": cfg }),
            None,
        );
        run.metrics = json!({ "ranking": top });
        run.finish(path)?;
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let (loaded, params, use_sprf) = load_model(&a.model)?;
    let store = FeatureStore::new(&loaded.dataset, &loaded.diagrams, &loaded.clips, use_sprf);
    let scorer = Scorer {
        store: &store,
        params: &params,
    };
    let cfg = a.align.config();
    let mut run = RunManifest::start(
        "evaluate",
        json!({ "align": cfg, "split": a.model.split, "granularity": a.granularity, "checkpoint": a.model.checkpoint }),
        None,
    );
    let (report, scored) = scorer.evaluate(a.model.split, &a.granularity, &cfg)?;
    print!("{}", report.to_table());
    for g in report.granularities.values() {
        if g.i2v.without_positives > 0 {
            println!(
                "note: {} of {} diagram queries have no positive segment and score 0 AUROC",
                g.i2v.without_positives, g.i2v.queries
            );
        }
    }
    let non_converged: Vec<String> = scored.iter().flat_map(|s| s.non_converged.clone()).collect();
    run.metrics = serde_json::to_value(&report)?;
    let default_manifest = match &a.out {
        Some(dir) => {
            make_dir(dir)?;
            let csv = dir.join("report.csv");
            let txt = dir.join("report.txt");
            write(&csv, &report.to_csv())?;
            write(&txt, &report.to_table())?;
            run.output("csv", &csv);
            run.output("table", &txt);
            Some(dir.join("run.json"))
        }
        None => None,
    };
    if let Some(path) = cli.run_manifest.clone().or(default_manifest) {
        run.finish(&path)?;
    }
    numerical_failure(&non_converged)
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig::default();
    let report = run_suite(a.seed, a.instances, &cfg)?;
    let mut worst: std::collections::BTreeMap<&str, f64> = Default::default();
    for e in &report.entries {
        let w = worst.entry(e.loss.as_str()).or_default();
        *w = w.max(e.report.max_rel_error);
    }
    for (loss, err) in &worst {
        let status = if *err <= cfg.tolerance { "ok" } else { "FAIL" };
        println!("{loss:<14} max rel error {err:.3e}  {status}");
    }
    if let Some(path) = &cli.run_manifest {
        let mut run = RunManifest::start(
            "gradcheck",
            json!({ "instances": a.instances, "check": cfg }),
            Some(a.seed),
        );
        run.metrics = json!({ "passed": report.passed(), "max_rel_error": report.max_rel_error() });
        run.finish(path)?;
    }
    if !report.passed() {
        return Err(Error::Numerical(format!(
            "gradient check failed (max rel error {:.3e})",
            report.max_rel_error()
        ))
        .into());
    }
    println!("all gradients within {:e}", cfg.tolerance);
    Ok(())
}

fn cmd_validate(a: &DataArgs) -> Result<()> {
    let loaded = a.load()?;
    let s = loaded.dataset.summary();
    println!(
        "ok: {} furniture, {} manuals, {} steps, {} pages, {} videos, {} segments ({} labeled)",
        s.furniture, s.manuals, s.steps, s.pages, s.videos, s.segments, s.labeled_segments
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Split(a) => cmd_split(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Align(a) => cmd_align(cli, a),
        Command::Retrieve(a) => cmd_retrieve(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Validate(a) => cmd_validate(a),
    }
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_) | Error::NonFinite(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
