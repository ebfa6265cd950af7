use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use contour_core::harness::{
    evaluate, load_model, project, report, run_grid, save_run, train, transfer_finetune, ordering_wins, ExperimentConfig,
    LabeledSet, RunConfig, TrainConfig,
};
use contour_core::interpret::{dump_activations, horizontal_banks, kernel_pca, render_pc_gallery};
use contour_core::stimulus::{write_dataset, DatasetConfig, DatasetIndex, DatasetKind, RgbImage, Split, StimulusConfig};
use contour_core::zoo::{build_model, count_params, Arch, ModelSpec};

#[derive(Parser)]
#[command(name = "contour", version, about = "Contour-integration stimuli, models and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a MarkedLong or PathFinder dataset.
    Generate(GenerateArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Validation accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Fine-tune readout and norm parameters of a checkpoint on a new dataset.
    Transfer(TransferArgs),
    /// CSV table of every run under a directory.
    Report(ReportArgs),
    /// Activation maps and kernel PCA.
    #[command(subcommand)]
    Inspect(InspectCmd),
    /// Layer table and parameter count of an architecture.
    Summary(SummaryArgs),
    /// Architectures x seeds under one budget, with a runtime projection.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "markedlong")]
    dataset: DatasetKind,
    /// Images per class.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Canvas size; defaults to 256 (MarkedLong) or 150 (PathFinder).
    #[arg(long)]
    size: Option<usize>,
    /// Training fraction; defaults to 0.75 (MarkedLong) or 0.9 (PathFinder).
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    eval_interval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Threads decoding the dataset; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl TrainOpts {
    fn config(&self, kind: DatasetKind, data: &Path) -> TrainConfig {
        let base = TrainConfig::for_dataset(kind);
        TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            batch_size: self.batch,
            max_steps: self.steps,
            eval_interval: self.eval_interval,
            seed: self.seed,
            data: Some(data.to_path_buf()),
            ..base
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Arch,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop every normalization layer.
    #[arg(long)]
    no_norm: bool,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum InspectCmd {
    /// Per-step hidden-state maps for selected channels.
    Activations {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,28")]
        channels: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA of the excitatory, inhibitory and divisive kernel banks.
    Pca {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        top: usize,
    },
}

#[derive(Args)]
struct SummaryArgs {
    #[arg(long)]
    arch: Arch,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    no_norm: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "V1NET-1L,FF-1L,GRU-1L")]
    archs: Vec<Arch>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Wall-clock budget for the whole grid, in minutes.
    #[arg(long, default_value_t = 45.0)]
    budget_min: f64,
    #[arg(long, default_value_t = 3)]
    probe_steps: usize,
    /// Validation images timed when projecting evaluation cost.
    #[arg(long, default_value_t = 200)]
    eval_probe: usize,
    /// Print the projection and stop.
    #[arg(long)]
    project_only: bool,
    /// Run even when the projection exceeds the budget.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate(a) => generate(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Transfer(a) => transfer_cmd(a),
        Cmd::Report(a) => {
            let csv = report(&a.runs)?;
            match a.out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Inspect(c) => inspect(c),
        Cmd::Summary(a) => {
            let mut spec = ModelSpec::for_arch(a.arch, a.size);
            if a.no_norm {
                spec = spec.without_norm();
            }
            print!("{}", build_model::<f32>(&spec, 0)?.summary());
            Ok(())
        }
        Cmd::Experiment(a) => experiment(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let size = a.size.unwrap_or(match a.dataset {
        DatasetKind::MarkedLong => 256,
        DatasetKind::PathFinder => 150,
    });
    let split = a.split.unwrap_or(match a.dataset {
        DatasetKind::MarkedLong => 0.75,
        DatasetKind::PathFinder => 0.9,
    });
    let cfg = DatasetConfig {
        stimulus: StimulusConfig::for_kind(a.dataset, size),
        count_per_class: a.count,
        base_seed: a.seed,
        train_fraction: split,
        augment: a.augment,
    };
    let records = write_dataset(&a.out, &cfg, a.workers)?;
    let train = records.iter().filter(|r| r.split == Split::Train).count();
    println!("wrote {} images ({} train, {} val) to {}", records.len(), train, records.len() - train, a.out.display());
    Ok(())
}

fn load_sets(data: &Path, workers: usize) -> Result<(DatasetIndex, LabeledSet, LabeledSet)> {
    let index = DatasetIndex::open(data).with_context(|| format!("opening dataset {}", data.display()))?;
    let train = LabeledSet::load(&index, Split::Train, workers)?;
    let val = LabeledSet::load(&index, Split::Val, workers)?;
    Ok((index, train, val))
}

fn print_log(log: &contour_core::harness::TrainLog) {
    for r in &log.records {
        let loss = r.train_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into());
        println!("step {:>6}  loss {loss:>8}  val_acc {:.4}", r.step, r.val_accuracy);
    }
    let m = &log.metrics;
    println!(
        "{} seed {}: max val acc {:.4}, sample efficiency {:.4}, {} params, {:.1}s",
        m.arch, m.seed, m.max_val_accuracy, m.sample_efficiency, m.param_count, m.wall_time_s
    );
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (index, train_set, val_set) = load_sets(&a.data, a.opts.workers)?;
    let mut spec = ModelSpec::for_arch(a.arch, index.config.stimulus.size());
    if a.no_norm {
        spec = spec.without_norm();
    }
    let mut model = build_model::<f32>(&spec, a.opts.seed)?;
    let mut cfg = a.opts.config(index.config.stimulus.kind(), &a.data);
    fs::create_dir_all(&a.out)?;
    cfg.checkpoint = Some(a.out.join("last_good.ckpt"));
    let log = train(&mut model, &train_set, &val_set, &cfg)?;
    print_log(&log);
    let rc = RunConfig { arch: a.arch.id().to_string(), train: cfg, init_seed: a.opts.seed, source_checkpoint: None };
    save_run(&a.out, &rc, &log, &model)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        other => bail!("unknown split {other:?}"),
    };
    let model = load_model(&a.ckpt)?;
    let index = DatasetIndex::open(&a.data)?;
    let set = LabeledSet::load(&index, split, a.workers)?;
    let acc = evaluate(&model, &set, 64)?;
    println!("{} on {} ({} images): accuracy {acc:.4}", model.spec.arch, split.name(), set.len());
    Ok(())
}

fn transfer_cmd(a: TransferArgs) -> Result<()> {
    let mut model = load_model(&a.ckpt)?;
    let (index, train_set, val_set) = load_sets(&a.data, a.opts.workers)?;
    let mut cfg = a.opts.config(index.config.stimulus.kind(), &a.data);
    fs::create_dir_all(&a.out)?;
    cfg.checkpoint = Some(a.out.join("last_good.ckpt"));
    let log = transfer_finetune(&mut model, &train_set, &val_set, &cfg)?;
    print_log(&log);
    println!("zero-shot accuracy {:.4}", log.metrics.zero_shot_accuracy.unwrap_or(f64::NAN));
    let rc = RunConfig {
        arch: model.spec.arch.id().to_string(),
        train: cfg,
        init_seed: a.opts.seed,
        source_checkpoint: Some(a.ckpt.clone()),
    };
    save_run(&a.out, &rc, &log, &model)?;
    Ok(())
}

fn inspect(c: InspectCmd) -> Result<()> {
    match c {
        InspectCmd::Activations { ckpt, image, channels, out } => {
            let model = load_model(&ckpt)?;
            let img = RgbImage::from_png(&fs::read(&image)?)?;
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let trace = dump_activations(&model, &img, &id, &channels, &out)?;
            println!("wrote {} maps ({} channels x {} steps) to {}", trace.files.len(), channels.len(), trace.steps, out.display());
        }
        InspectCmd::Pca { ckpt, out, top } => {
            let model = load_model(&ckpt)?;
            let (_, params) = model.v1net_params().context("checkpoint has no V1Net block")?;
            let results = horizontal_banks(&params)
                .into_iter()
                .map(|(name, bank)| Ok((name.to_string(), kernel_pca(&bank)?)))
                .collect::<Result<Vec<_>>>()?;
            for row in render_pc_gallery(&results, top, &out)? {
                let head: Vec<String> = row.ratios.iter().take(4).map(|r| format!("{r:.3}")).collect();
                println!("{:<11} top ratios [{}]  top-4 cumulative {:.3}", row.name, head.join(", "), row.cumulative_top4);
            }
        }
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let (index, train_set, val_set) = load_sets(&a.data, a.opts.workers)?;
    let cfg = ExperimentConfig {
        archs: a.archs.clone(),
        seeds: a.seeds.clone(),
        train: a.opts.config(index.config.stimulus.kind(), &a.data),
        budget_s: a.budget_min * 60.0,
        probe_steps: a.probe_steps,
        eval_probe: a.eval_probe,
    };
    let proj = project(&cfg, &train_set, &val_set)?;
    for t in &proj.timings {
        println!("{:<9} {:>8.3} s/step  {:>8.2} s/eval  ({} params)", t.arch.id(), t.step_s, t.eval_s, count_params(&build_model::<f32>(&ModelSpec::for_arch(t.arch, train_set.shape[0]), 0)?));
    }
    println!("projected total {:.1} min against a {:.1} min budget", proj.total_s / 60.0, a.budget_min);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("projection.json"), serde_json::to_vec_pretty(&proj)?)?;
    if a.project_only {
        return Ok(());
    }
    if !proj.fits(cfg.budget_s) && !a.force {
        bail!("projected runtime exceeds the budget; rerun with --force to run anyway");
    }
    let results = run_grid(&cfg, &train_set, &val_set, Some(&a.out))?;
    for r in &results {
        let m = &r.log.metrics;
        println!("{:<9} seed {}: max acc {:.4}, sample efficiency {:.4}", m.arch, m.seed, m.max_val_accuracy, m.sample_efficiency);
    }
    if let Some(&target) = cfg.archs.first() {
        let others: Vec<Arch> = cfg.archs[1..].to_vec();
        if !others.is_empty() {
            let wins = ordering_wins(&results, target, &others)?;
            println!("{} beats {:?} on sample efficiency in {wins}/{} seeds", target.id(), others.iter().map(|a| a.id()).collect::<Vec<_>>(), cfg.seeds.len());
        }
    }
    fs::write(a.out.join("report.csv"), report(&a.out)?)?;
    Ok(())
}
