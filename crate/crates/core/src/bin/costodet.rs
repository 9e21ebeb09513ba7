use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use costodet::checkpoint::{file_hash, load_checkpoint, save_checkpoint};
use costodet::config::{short_hash, ExperimentConfig, RunManifest};
use costodet::dataset::{ingest_dataset, Dataset, Video};
use costodet::denoiser::Conditioning;
use costodet::diagnostics::{branch_agreement, feature_dispersion, grad_decomposition, AgreementReport};
use costodet::eval::{evaluate, predict_video, read_prediction_csv, write_prediction_csv, Branch, EvalOptions, EvalReport};
use costodet::model::CoModel;
use costodet::plot::{phase_bars_svg, ribbon_svg, Series};
use costodet::synth::{emit_dataset, ProcedureGrammar};
use costodet::task::TaskKind;
use costodet::train::{ClipBatch, ClipNoise, LogEntry, Trainer};
use costodet::{Error, Result};

/// Co-trained deterministic and diffusion branches for workflow anticipation and recognition.
#[derive(Parser)]
#[command(name = "costodet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample procedures from a grammar and write a dataset.
    GenSynth(GenSynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw diffusion-branch samples for one video.
    Sample(SampleArgs),
    /// Feature statistics, gradient decomposition and branch agreement.
    Diagnose(DiagnoseArgs),
    /// Render prediction CSVs or agreement reports as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory. Defaults to `<root>/<command>-<hash>`, where the root
    /// is `$COSTODET_OUT_ROOT` or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 60)]
    videos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated `name=ratio` pairs.
    #[arg(long, default_value = "train=0.6,val=0.1,test=0.3")]
    splits: String,
    /// JSON grammar file; the built-in dominant/long-tail grammar otherwise.
    #[arg(long)]
    grammar: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Anticipation,
    Recognition,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditioningArg {
    Film,
    Add,
    Concat,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    conditioning: Option<ConditioningArg>,
    /// Train the task branch alone.
    #[arg(long, conflicts_with = "no_task")]
    no_ddpm: bool,
    /// Train the diffusion branch alone.
    #[arg(long)]
    no_task: bool,
    /// Continue from a checkpoint written by an earlier run of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BranchArg {
    Task,
    Diffusion,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated horizons, each at most the training horizon.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<f64>,
    #[arg(long, value_enum, default_value = "task")]
    branch: BranchArg,
    /// DDIM steps for the diffusion branch.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// Evaluate the diffusion branch at every n-th frame.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long)]
    segment_aware_smooth: bool,
    /// Report frames per second and denoiser calls.
    #[arg(long)]
    timing: bool,
    /// Write one prediction CSV per video.
    #[arg(long)]
    predictions: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    video: String,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Videos for the branch-agreement envelopes; the first three of the split otherwise.
    #[arg(long, value_delimiter = ',')]
    videos: Vec<String>,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, default_value_t = 2)]
    pca_components: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// Prediction CSV from `eval --predictions` or agreement JSON from `diagnose`.
    #[arg(long)]
    input: PathBuf,
    /// Horizon for the y axis of anticipation plots.
    #[arg(long)]
    horizon: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

fn out_dir(args: &OutArgs, command: &str, hash: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("COSTODET_OUT_ROOT").map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(format!("{command}-{}", short_hash(hash)))
    })
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn parse_splits(text: &str) -> Result<Vec<(String, f64)>> {
    text.split(',')
        .map(|part| {
            let (name, ratio) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("split `{part}` is not name=ratio")))?;
            let ratio: f64 = ratio
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("split ratio `{ratio}` is not a number")))?;
            Ok((name.trim().to_string(), ratio))
        })
        .collect()
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let grammar = match &args.grammar {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ProcedureGrammar::dominant_long_tail(),
    };
    let splits = parse_splits(&args.splits)?;
    let manifest = emit_dataset(&grammar, args.videos, &splits, args.seed, &args.data)?;
    let mut run = RunManifest::new("gen-synth");
    run.config_hash = Some(hash_json(&(&grammar, args.videos, &splits, args.seed))?);
    run.seed = Some(args.seed);
    run.dataset_hash = Some(manifest.hash());
    run.artifacts = vec![display(&args.data)];
    run.write(&args.data)?;
    for s in &manifest.splits {
        println!("{}: {} videos", s.name, s.videos.len());
    }
    println!("long-tail videos: {}", manifest.long_tail_ids().len());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(task) = args.task {
        let kind = match task {
            TaskArg::Anticipation => TaskKind::Anticipation,
            TaskArg::Recognition => TaskKind::Recognition,
        };
        if args.config.is_none() && kind == TaskKind::Recognition {
            cfg.train = costodet::train::TrainConfig::recognition();
        }
        cfg.train.task = kind;
    }
    if let Some(d) = args.data {
        cfg.data = Some(d);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(c) = args.conditioning {
        cfg.train.conditioning = match c {
            ConditioningArg::Film => Conditioning::Film,
            ConditioningArg::Add => Conditioning::Add,
            ConditioningArg::Concat => Conditioning::Concat,
        };
    }
    if args.no_ddpm {
        cfg.train.with_ddpm = false;
    }
    if args.no_task {
        cfg.train.with_task = false;
    }
    cfg.train.validate()?;
    let data = cfg.data.clone().ok_or_else(|| Error::Config("no dataset given (`--data` or `data` key)".into()))?;
    cfg.check_paths()?;
    let ds = ingest_dataset(&data)?;
    let hash = cfg.hash()?;
    let tag = short_hash(&hash).to_string();
    let dir = match (&args.out.out, &cfg.out_dir) {
        (None, Some(d)) => d.join(format!("train-{tag}")),
        _ => out_dir(&args.out, "train", &hash),
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let mut trainer = match &args.resume {
        Some(p) => {
            let t = load_checkpoint(p)?;
            if t.config != cfg.train {
                return Err(Error::Config("checkpoint was trained with a different configuration".into()));
            }
            t
        }
        None => Trainer::new(cfg.train.clone(), &ds.meta)?,
    };
    let ckpt = dir.join(format!("model-{tag}.ckpt"));
    trainer.fit(&ds, |t| {
        if let Some(LogEntry::Epoch { epoch, mean_total, val_task, val_ddpm }) = t.log.last() {
            eprintln!("epoch {epoch}: train {mean_total:.5} val task {val_task:?} val ddpm {val_ddpm:?}");
        }
        save_checkpoint(t, &ckpt)
    })?;
    save_checkpoint(&trainer, &ckpt)?;
    let log = dir.join(format!("train-{tag}.jsonl"));
    fs::write(&log, trainer.log_jsonl())?;

    let mut run = RunManifest::new("train");
    run.config_hash = Some(hash);
    run.seed = Some(cfg.train.seed);
    run.dataset_hash = Some(ds.manifest.hash());
    run.inputs = vec![display(&data)];
    run.inputs.extend(args.resume.iter().map(|p| display(p)));
    run.artifacts = vec![display(&ckpt), display(&log), display(&dir.join("config.toml"))];
    run.write(&dir)?;
    println!("checkpoint {}", ckpt.display());
    println!("checkpoint sha256 {}", file_hash(&ckpt)?);
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<(CoModel, String)> {
    let hash = file_hash(checkpoint)?;
    Ok((load_checkpoint(checkpoint)?.model, hash))
}

fn print_report(report: &EvalReport, timing: bool) {
    for h in &report.anticipation {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "h={} MAE {:.4} wMAE {} inMAE {} outMAE {} eMAE {} long-tail eMAE {} Smooth {}",
            h.horizon,
            h.all.mae,
            opt(h.all.wmae),
            opt(h.all.in_mae),
            opt(h.all.out_mae),
            opt(h.all.emae),
            opt(h.long_tail.as_ref().and_then(|m| m.emae)),
            opt(h.smooth)
        );
    }
    if let Some(r) = &report.recognition {
        println!(
            "accuracy {:.2} ± {:.2} precision {:.2} recall {:.2} jaccard {:.2}",
            r.accuracy_mean, r.accuracy_std, r.precision, r.recall, r.jaccard
        );
    }
    if timing {
        println!(
            "{} frames in {:.3}s: {:.1} frames/s, {} denoiser calls",
            report.frames, report.seconds, report.frames_per_second, report.denoiser_invocations
        );
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let (model, ckpt_hash) = load_model(&args.checkpoint)?;
    let ds = ingest_dataset(&args.data)?;
    let branch = match args.branch {
        BranchArg::Task => Branch::Task,
        BranchArg::Diffusion => Branch::Diffusion { steps: args.steps, seed: args.sample_seed, stride: args.stride },
    };
    let options = EvalOptions {
        split: args.split.clone(),
        horizons: args.horizons.clone(),
        branch,
        segment_aware_smooth: args.segment_aware_smooth,
    };
    let hash = hash_json(&(&ckpt_hash, &options))?;
    let tag = short_hash(&hash).to_string();
    let dir = out_dir(&args.out, "eval", &hash);
    fs::create_dir_all(&dir)?;
    let report = evaluate(&model, &ds, &options)?;
    print_report(&report, args.timing);
    let path = dir.join(format!("eval-{tag}.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    let mut run = RunManifest::new("eval");
    run.artifacts.push(display(&path));
    if args.predictions {
        for video in ds.split(&args.split)? {
            let pred = predict_video(&model, video, branch)?;
            let p = dir.join(format!("pred-{tag}-{}.csv", video.id()));
            write_prediction_csv(&model, video, &pred, fs::File::create(&p)?)?;
            run.artifacts.push(display(&p));
        }
    }
    run.config_hash = Some(hash);
    run.seed = Some(args.sample_seed);
    run.dataset_hash = Some(ds.manifest.hash());
    run.inputs = vec![display(&args.checkpoint), display(&args.data)];
    run.write(&dir)?;
    println!("report {}", path.display());
    Ok(())
}

fn find_video<'a>(ds: &'a Dataset, id: &str) -> Result<&'a Video> {
    ds.videos.get(id).ok_or_else(|| Error::data(id, "not in dataset"))
}

fn sample(args: SampleArgs) -> Result<()> {
    let (model, ckpt_hash) = load_model(&args.checkpoint)?;
    let ds = ingest_dataset(&args.data)?;
    let video = find_video(&ds, &args.video)?;
    let hash = hash_json(&(&ckpt_hash, &args.video, args.stride, args.seeds, args.steps))?;
    let dir = out_dir(&args.out, "sample", &hash);
    fs::create_dir_all(&dir)?;
    let frames: Vec<usize> = (0..video.num_frames()).step_by(args.stride.max(1)).collect();
    let feats = model.features(&video.observations)?;
    let path = dir.join(format!("samples-{}-{}.csv", short_hash(&hash), video.id()));
    let mut out = csv::Writer::from_writer(fs::File::create(&path)?);
    out.write_record(["seed", "frame", "channel", "value"])?;
    for seed in 0..args.seeds {
        match model.kind() {
            TaskKind::Anticipation => {
                let d = model.d_anticipate(&feats, &frames, args.steps, seed)?;
                for (c, target) in model.config.targets.iter().enumerate() {
                    for (i, f) in frames.iter().enumerate() {
                        out.write_record([seed.to_string(), f.to_string(), target.to_string(), d[c][i].to_string()])?;
                    }
                }
            }
            TaskKind::Recognition => {
                let d = model.d_recognize(&feats, &frames, args.steps, seed)?;
                for (f, p) in frames.iter().zip(d) {
                    out.write_record([seed.to_string(), f.to_string(), "phase".into(), p.to_string()])?;
                }
            }
        }
    }
    out.flush()?;
    let mut run = RunManifest::new("sample");
    run.config_hash = Some(hash);
    run.seed = Some(0);
    run.dataset_hash = Some(ds.manifest.hash());
    run.inputs = vec![display(&args.checkpoint), display(&args.data)];
    run.artifacts = vec![display(&path)];
    run.write(&dir)?;
    println!("samples {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct Diagnosis {
    features: costodet::diagnostics::FeatureStats,
    gradients: costodet::diagnostics::GradTerms,
    agreement: Vec<String>,
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let (model, ckpt_hash) = load_model(&args.checkpoint)?;
    let ds = ingest_dataset(&args.data)?;
    let hash = hash_json(&(&ckpt_hash, &args.split, &args.videos, args.seeds, args.steps, args.stride))?;
    let tag = short_hash(&hash).to_string();
    let dir = out_dir(&args.out, "diagnose", &hash);
    fs::create_dir_all(&dir)?;
    let videos = ds.split(&args.split)?;

    let mut feats = Vec::new();
    let mut phases = Vec::new();
    for v in &videos {
        let f = model.features(&v.observations)?;
        for t in (0..f.len()).step_by(4) {
            feats.push(f[t].clone());
            phases.push(v.timeline.phase_of()[t]);
        }
    }
    let features = feature_dispersion(&feats, Some(&phases), args.pca_components)?;

    let first = videos.first().ok_or_else(|| Error::InvalidArgument("split is empty".into()))?;
    let labels = model.labels(&first.timeline)?;
    let clip = model.denoiser.config().window.max(16);
    let batch = ClipBatch::from_video(&model, first, &labels, 0, clip, 1, model.start_session().state)?;
    let noise = ClipNoise::draw(&model, batch.anchors.len(), &mut ChaCha8Rng::seed_from_u64(0));
    let gradients = grad_decomposition(&model, &batch, Some(&noise))?;

    let mut agreement = Vec::new();
    if model.kind() == TaskKind::Anticipation {
        let chosen: Vec<&Video> = if args.videos.is_empty() {
            videos.iter().take(3).copied().collect()
        } else {
            args.videos.iter().map(|id| find_video(&ds, id)).collect::<Result<_>>()?
        };
        let seeds: Vec<u64> = (0..args.seeds).collect();
        for v in chosen {
            let r = branch_agreement(&model, v, &seeds, args.steps, args.stride)?;
            println!("{}: pearson {:?}", r.video, r.pearson);
            let p = dir.join(format!("agreement-{tag}-{}.json", v.id()));
            fs::write(&p, serde_json::to_string_pretty(&r)?)?;
            agreement.push(display(&p));
        }
    }
    println!(
        "features: mean pairwise distance {:.4}, covariance trace {:.4}, centroid separation {:?}, residual energy {:.4}",
        features.mean_pairwise_distance, features.covariance_trace, features.centroid_separation, features.pca_residual_energy
    );
    println!(
        "gradients at c_t: task {:.4e} ddpm {:.4e} total {:.4e}",
        gradients.task_norm, gradients.ddpm_norm, gradients.total_norm
    );
    let path = dir.join(format!("diagnose-{tag}.json"));
    let mut run = RunManifest::new("diagnose");
    run.artifacts = agreement.clone();
    fs::write(&path, serde_json::to_string_pretty(&Diagnosis { features, gradients, agreement })?)?;
    run.artifacts.push(display(&path));
    run.config_hash = Some(hash);
    run.seed = Some(0);
    run.dataset_hash = Some(ds.manifest.hash());
    run.inputs = vec![display(&args.checkpoint), display(&args.data)];
    run.write(&dir)?;
    println!("report {}", path.display());
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let bytes = fs::read(&args.input)?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let dir = out_dir(&args.out, "plot", &hash);
    fs::create_dir_all(&dir)?;
    let stem = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
    let mut written = Vec::new();
    let is_json = args.input.extension().is_some_and(|e| e == "json");
    if is_json {
        let r: AgreementReport = serde_json::from_slice(&bytes)?;
        let top = args.horizon.unwrap_or_else(|| r.d_max.iter().flatten().chain(r.task.iter().flatten()).copied().fold(0.0, f64::max));
        for c in 0..r.task.len() {
            let svg = ribbon_svg(
                &format!("{} channel {c}: task output and diffusion envelope", r.video),
                &r.frames,
                &[Series { label: "task", values: &r.task[c] }, Series { label: "diffusion mean", values: &r.d_mean[c] }],
                Some((&r.d_min[c], &r.d_max[c])),
                top,
            );
            let p = dir.join(format!("{stem}-{c}.svg"));
            fs::write(&p, svg)?;
            written.push(p);
        }
    } else {
        let rows = read_prediction_csv(bytes.as_slice())?;
        let mut channels: Vec<String> = rows.iter().map(|r| r.channel.clone()).collect();
        channels.dedup();
        channels.sort();
        channels.dedup();
        for ch in channels {
            let sel: Vec<_> = rows.iter().filter(|r| r.channel == ch).collect();
            let frames: Vec<usize> = sel.iter().map(|r| r.frame).collect();
            let pred: Vec<f64> = sel.iter().map(|r| r.pred).collect();
            let label: Vec<f64> = sel.iter().map(|r| r.label).collect();
            let svg = if ch == "phase" {
                let as_ids = |v: &[f64]| v.iter().map(|x| *x as usize).collect::<Vec<_>>();
                let (p, y) = (as_ids(&pred), as_ids(&label));
                phase_bars_svg(&format!("{stem}: phases"), &[("truth", &y), ("prediction", &p)])
            } else {
                let top = args.horizon.unwrap_or_else(|| label.iter().chain(&pred).copied().fold(0.0, f64::max));
                ribbon_svg(
                    &format!("{stem} {ch}"),
                    &frames,
                    &[Series { label: "prediction", values: &pred }, Series { label: "label", values: &label }],
                    None,
                    top,
                )
            };
            let p = dir.join(format!("{stem}-{ch}.svg"));
            fs::write(&p, svg)?;
            written.push(p);
        }
    }
    let mut run = RunManifest::new("plot");
    run.config_hash = Some(hash);
    run.inputs = vec![display(&args.input)];
    run.artifacts = written.iter().map(|p| display(p)).collect();
    run.write(&dir)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::UnknownConditioning(_)
        | Error::Shape(_)
        | Error::StepOutOfRange { .. } => 2,
        Error::UnknownTarget(_)
        | Error::LabelOutOfRange { .. }
        | Error::UnknownPhase { .. }
        | Error::Data { .. }
        | Error::Dataset { .. }
        | Error::Csv(_) => 3,
        Error::NonFinite(_) => 4,
        Error::CheckpointVersion { .. }
        | Error::CheckpointCorrupt(_)
        | Error::CheckpointMismatch(_)
        | Error::Io(_)
        | Error::Json(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
