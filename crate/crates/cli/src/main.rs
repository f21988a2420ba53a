//! `mapgrad`: generate synthetic detection problems, evaluate scores,
//! compare the fast pseudogradient with the brute-force oracle, and train.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mapgrad::eval::{evaluate_all, mean_ap};
use mapgrad::io::{
    load_dataset, load_scores, save_dataset, save_scores, write_gradient_dump, write_history_csv,
    write_pr_csv,
};
use mapgrad::loss::loss_and_gradient;
use mapgrad::oracle::{oracle_steps, reference_map};
use mapgrad::pseudograd::estimate;
use mapgrad::trainer::train;
use mapgrad::{
    ApVariant, Dataset, EstimatorConfig, EstimatorKind, EvalConfig, LossConfig, NmsConfig,
    ScoreTable, SynthConfig, TrainConfig, WindowSteps,
};
use rayon::prelude::*;

const EXIT_INPUT: u8 = 1;
const EXIT_GRADCHECK: u8 = 2;

#[derive(Parser)]
#[command(
    name = "mapgrad",
    version,
    about = "Detection mAP after NMS as a training loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Gen(GenArgs),
    /// Per-class AP and mAP of a score file.
    Eval(EvalArgs),
    /// Compare fast steps and gradients with the brute-force oracle.
    Gradcheck(GradcheckArgs),
    /// Optimise a free score table with SGD and momentum.
    Train(TrainArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    min_gts: usize,
    #[arg(long, default_value_t = 2)]
    max_gts: usize,
    #[arg(long, default_value_t = 3)]
    jittered: usize,
    #[arg(long, default_value_t = 55)]
    background: usize,
    #[arg(long, default_value_t = 0.35)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Voc2007,
    Voc2012,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Sde,
    Mee,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_enum, default_value = "voc2012")]
    ap_variant: Variant,
    #[arg(long, default_value_t = 0.3)]
    nms_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    match_iou: f64,
}

impl PipelineArgs {
    fn configs(&self) -> (NmsConfig, EvalConfig) {
        let ap_variant = match self.ap_variant {
            Variant::Voc2007 => ApVariant::Voc2007,
            Variant::Voc2012 => ApVariant::Voc2012,
        };
        (
            NmsConfig {
                overlap_threshold: self.nms_threshold,
            },
            EvalConfig {
                match_iou: self.match_iou,
                ap_variant,
            },
        )
    }
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, value_enum, default_value = "mee")]
    estimator: Estimator,
    #[arg(long, default_value_t = 0.1)]
    flat_delta_min: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Elementwise gradient clip; `inf` disables clipping.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
}

impl LossArgs {
    fn config(&self, pipeline: &PipelineArgs) -> LossConfig {
        let (nms, eval) = pipeline.configs();
        let kind = match self.estimator {
            Estimator::Sde => EstimatorKind::Sde,
            Estimator::Mee => EstimatorKind::Mee,
        };
        LossConfig {
            epsilon_log: self.epsilon,
            lambda_reg: self.lambda,
            clip_threshold: self.clip,
            estimator: EstimatorConfig {
                kind,
                flat_region_delta_min: self.flat_delta_min,
            },
            nms,
            eval,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write one PR-curve CSV per class into this directory.
    #[arg(long)]
    pr_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Write the fast-path gradient dump CSV here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Receives history.csv, scores.json and pr/class_<k>.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 8)]
    minibatch_images: usize,
    #[arg(long, default_value_t = 0.05)]
    fg_fraction: f64,
    #[arg(long, default_value_t = 25)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] mapgrad::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

type CliResult<T> = Result<T, CliError>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::File {
            path: path.to_owned(),
            source,
        })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::File {
        path: path.to_owned(),
        source,
    })
}

fn gen(args: &GenArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        num_images: args.images,
        num_classes: args.classes,
        gts_per_image: (args.min_gts, args.max_gts),
        jittered_per_gt: args.jittered,
        background_per_image: args.background,
        jitter: args.jitter,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let d = mapgrad::synth::generate(&cfg)?;
    save_dataset(&d, &args.out)?;
    println!(
        "{} images, {} windows, {} ground truth, foreground fraction {:.6}",
        d.images.len(),
        d.num_windows(),
        d.ground_truth.len(),
        mapgrad::synth::foreground_fraction(&d, 0.5)
    );
    Ok(())
}

fn write_pr_dir(
    dir: &Path,
    d: &Dataset,
    scores: &ScoreTable,
    nms: &NmsConfig,
    eval: &EvalConfig,
) -> CliResult<()> {
    create_dir(dir)?;
    for e in evaluate_all(scores, d, nms, eval)?.into_iter().flatten() {
        write_pr_csv(
            &e.labels,
            &e.curve,
            create(&dir.join(format!("class_{}.csv", e.class)))?,
        )?;
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let d = load_dataset(&args.dataset)?;
    let scores = load_scores(&args.scores, &d)?;
    let (nms, eval) = args.pipeline.configs();
    let result = mean_ap(&scores, &d, &nms, &eval)?;
    for (c, ap) in result.per_class.iter().enumerate() {
        match ap {
            Some(ap) => println!("class {c}: AP {ap:.6}"),
            None => println!("class {c}: no ground truth"),
        }
    }
    println!("mAP: {:.6}", result.map);
    if let Some(dir) = &args.pr_dir {
        write_pr_dir(dir, &d, &scores, &nms, &eval)?;
    }
    Ok(())
}

/// Whether a window overlaps another window of its image by more than the
/// NMS threshold; only such windows can take part in suppression chains.
fn interacting(d: &Dataset, image: usize, window: usize, nms: &NmsConfig) -> bool {
    let props = &d.images[image].proposals;
    props.iter().enumerate().any(|(o, p)| {
        o != window
            && mapgrad::iou(&p.bbox, &props[window].bbox).is_ok_and(|v| v > nms.overlap_threshold)
    })
}

fn gradcheck(args: &GradcheckArgs) -> CliResult<bool> {
    let d = load_dataset(&args.dataset)?;
    let scores = load_scores(&args.scores, &d)?;
    let cfg = args.loss.config(&args.pipeline);
    let out = loss_and_gradient(&scores, &d, &cfg)?;
    if let Some(path) = &args.dump {
        write_gradient_dump(&d, &scores, &out.steps, &out.grad, create(path)?)?;
    }
    let k_eff = out.per_class_ap.iter().flatten().count() as f64;
    let outer = -1.0 / (k_eff * (out.map + cfg.epsilon_log));
    let tol = args.tolerance;
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    let same = |a: Option<mapgrad::ScoreStep>, b: Option<mapgrad::ScoreStep>| match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => close(a.position, b.position) && close(a.ap, b.ap),
        _ => false,
    };

    let pairs: Vec<(usize, usize, usize, f64)> = (0..d.num_classes)
        .filter_map(|c| out.per_class_ap[c].map(|ap| (c, ap)))
        .flat_map(|(c, ap)| {
            d.images
                .iter()
                .enumerate()
                .flat_map(move |(i, im)| (0..im.proposals.len()).map(move |w| (c, i, w, ap)))
        })
        .collect();
    let disagreements: Vec<(bool, String)> = pairs
        .par_iter()
        .filter_map(|&(c, i, w, ap)| {
            let fast = out.steps[c][i][w];
            let slow = oracle_steps(&d, &scores, i, w, c, &cfg.nms, &cfg.eval)
                .expect("class has ground truth");
            let slow_steps = WindowSteps {
                plus: slow.plus,
                minus: slow.minus,
            };
            let s = scores.get(i, w, c);
            let oracle_grad = (outer * estimate(&slow_steps.profile(s, slow.ap), &cfg.estimator)
                + 4.0 * cfg.lambda_reg * s.powi(3))
            .clamp(-cfg.clip_threshold, cfg.clip_threshold);
            let agrees = close(ap, slow.ap)
                && same(fast.plus, slow.plus)
                && same(fast.minus, slow.minus)
                && close(out.grad.get(i, w, c), oracle_grad);
            if agrees {
                return None;
            }
            let chained = interacting(&d, i, w, &cfg.nms);
            let im = &d.images[i];
            let line = format!(
                "{} image {} window {} class {c}: fast {:?} grad {:.6}, oracle {:?} grad {:.6}",
                if chained { "approximated" } else { "MISMATCH" },
                im.id,
                im.proposals[w].id,
                fast,
                out.grad.get(i, w, c),
                slow_steps,
                oracle_grad
            );
            Some((chained, line))
        })
        .collect();
    for (_, line) in &disagreements {
        println!("{line}");
    }
    let checked = pairs.len();
    let approximated = disagreements.iter().filter(|(chained, _)| *chained).count();
    let failures = disagreements.len() - approximated;
    println!("mAP: {:.6}", out.map);
    println!(
        "checked {checked} window-class pairs: {failures} mismatches, {approximated} differences on overlapping windows (suppression chains are approximated)"
    );
    Ok(failures == 0)
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    let d = load_dataset(&args.dataset)?;
    let loss = args.loss.config(&args.pipeline);
    let cfg = TrainConfig {
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        iterations: args.iterations,
        minibatch_images: args.minibatch_images,
        fg_fraction: args.fg_fraction,
        full_eval_every: args.eval_every,
        loss,
        seed: args.seed,
    };
    let (scores, history) = train(&d, &cfg)?;
    create_dir(&args.out_dir)?;
    write_history_csv(&history, create(&args.out_dir.join("history.csv"))?)?;
    save_scores(&scores, &d, args.out_dir.join("scores.json"))?;
    write_pr_dir(&args.out_dir.join("pr"), &d, &scores, &loss.nms, &loss.eval)?;
    println!("initial mAP: {:.6}", history.initial_full_map);
    println!("final mAP: {:.6}", history.final_full_map);
    if let Ok(reference) = reference_map(&d, &loss.nms, &loss.eval) {
        println!("reference mAP: {reference:.6}");
    }
    if let Some(reason) = &history.failure {
        println!("training stopped early: {reason}");
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("MAPGRAD_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "MAPGRAD_THREADS must be a non-negative integer, got {value:?}"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Gen(a) => gen(a).map(|()| true),
        Command::Eval(a) => eval(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => run_train(a).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_GRADCHECK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
