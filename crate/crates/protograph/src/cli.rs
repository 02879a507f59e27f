//! Command-line interface: dataset generation, training, evaluation, the
//! ablation matrix, the robustness experiment, feature export, and the
//! gradient verification suite.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{parse_config_file, Preset, RunConfig};
use crate::data::{self, Dataset, DatasetView};
use crate::distribution::{DistanceKind, Head, ProtoMode};
use crate::error::Error;
use crate::harness::ablation::{ablation_run, summary_rows, AblationOptions};
use crate::harness::export::{export_embeddings, ExportStage};
use crate::harness::report::{write_summary_csv, SummaryRow};
use crate::harness::robustness::robustness_histogram;
use crate::harness::{evaluate, sample_task, train, TrainOptions};
use crate::model::{Model, ModelConfig};
use crate::seed;

#[derive(Parser)]
#[command(
    name = "protograph",
    version,
    about = "Few-shot image classification with prototype-anchored dense graph convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every subcommand takes the same layered flag set; values omitted here
/// fall back to the config file, then to built-in defaults.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value config file applied under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; every random stream derives from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Graph convolution iterations (1..=5).
    #[arg(long)]
    iterations: Option<usize>,
    /// Dense feature concatenation across iterations.
    #[arg(long)]
    dense: Option<String>,
    /// Prototype handling: none | nodes | only | info.
    #[arg(long)]
    proto_mode: Option<String>,
    /// Classifier head: row | feature.
    #[arg(long)]
    head: Option<String>,
    /// Pairwise distance: abs | squared.
    #[arg(long)]
    distance: Option<String>,
    /// Learning rate (default 0.001 for 3-way, 0.01 for 5-way).
    #[arg(long)]
    lr: Option<f64>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Parallel evaluation jobs (output is identical for any value).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Architecture preset: desk | paper.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset manifest (or directory containing manifest.csv).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parameter checkpoint to load.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Synthetic classes to generate.
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic samples per (class, angle).
    #[arg(long)]
    samples: Option<usize>,
    /// Image side length (defaults to the preset's).
    #[arg(long)]
    side: Option<usize>,
    /// Deviation strength; omit to calibrate against the pixel oracle.
    #[arg(long)]
    delta: Option<f64>,
    /// Speckle noise amplitude.
    #[arg(long)]
    noise: Option<f64>,
    /// Oracle accuracy target for calibration.
    #[arg(long)]
    calibrate_target: Option<f64>,
    /// Robustness: number of independent test runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Robustness: episodes per run.
    #[arg(long)]
    run_episodes: Option<usize>,
    /// Export stage: embedding | final.
    #[arg(long)]
    stage: Option<String>,
    /// Episode index to export.
    #[arg(long)]
    episode: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PGM images + manifest.csv).
    GenData(Common),
    /// Train a model episodically and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint over test episodes.
    Eval(Common),
    /// Train and evaluate all five ablation variants.
    Ablate(Common),
    /// Accuracy distributions over repeated test runs, with and without
    /// prototype nodes.
    Robustness(Common),
    /// Dump node feature vectors of one episode as CSV.
    ExportEmbeddings(Common),
    /// Run the finite-difference gradient suite and print the worst error.
    Gradcheck(Common),
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints usage itself; 2 for usage errors, 0 for --help.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let (name, common) = match &cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Robustness(c) => ("robustness", c),
        Command::ExportEmbeddings(c) => ("export-embeddings", c),
        Command::Gradcheck(c) => ("gradcheck", c),
    };
    match resolve(common).and_then(|rc| dispatch(name, rc)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Layer defaults <- config file <- flags.
fn resolve(c: &Common) -> Result<RunConfig, Error> {
    let mut rc = RunConfig::default();
    if let Some(path) = &c.config {
        for (k, v) in parse_config_file(path)? {
            rc.set(&k, &v)?;
        }
    }
    macro_rules! flag {
        ($field:ident, $key:literal) => {
            if let Some(v) = &c.$field {
                rc.set($key, &v.to_string())?;
            }
        };
    }
    flag!(seed, "seed");
    flag!(n_way, "n_way");
    flag!(k_shot, "k_shot");
    flag!(iterations, "iterations");
    flag!(dense, "dense");
    flag!(proto_mode, "proto_mode");
    flag!(head, "head");
    flag!(distance, "distance");
    flag!(lr, "lr");
    flag!(steps, "steps");
    flag!(episodes, "episodes");
    flag!(jobs, "jobs");
    flag!(classes, "classes");
    flag!(samples, "samples");
    flag!(side, "side");
    flag!(delta, "delta");
    flag!(noise, "noise");
    flag!(calibrate_target, "calibrate_target");
    flag!(runs, "runs");
    flag!(run_episodes, "run_episodes");
    flag!(episode, "episode");
    if let Some(v) = &c.preset {
        rc.set("preset", v)?;
    }
    if let Some(v) = &c.stage {
        rc.set("stage", v)?;
    }
    if let Some(v) = &c.out {
        rc.out = v.clone();
    }
    if let Some(v) = &c.data {
        rc.data = Some(v.clone());
    }
    if let Some(v) = &c.params {
        rc.params = Some(v.clone());
    }
    Ok(rc)
}

fn dispatch(name: &str, rc: RunConfig) -> Result<(), Error> {
    match name {
        "gen-data" => cmd_gen_data(rc),
        "train" => cmd_train(rc),
        "eval" => cmd_eval(rc),
        "ablate" => cmd_ablate(rc),
        "robustness" => cmd_robustness(rc),
        "export-embeddings" => cmd_export(rc),
        "gradcheck" => cmd_gradcheck(rc),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn load_data(rc: &RunConfig) -> Result<Dataset, Error> {
    let path = rc
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("--data is required for this subcommand".into()))?;
    let manifest = if path.is_dir() {
        data::manifest_path_in(path)
    } else {
        path.clone()
    };
    Ok(data::load_dataset(&manifest)?)
}

fn splits<'a>(
    ds: &'a Dataset,
    rc: &RunConfig,
) -> Result<(DatasetView<'a>, DatasetView<'a>), Error> {
    Ok(data::hybrid_split(ds, rc.n_way)?)
}

/// Model label used in summary rows.
fn variant_label(rc: &RunConfig) -> String {
    match (rc.dense, rc.proto_mode) {
        (false, ProtoMode::None) => "GCN".into(),
        (true, ProtoMode::None) => "GCN(dense)".into(),
        (true, ProtoMode::Only) => "pro-point(only)".into(),
        (true, ProtoMode::Info) => "GCN(dense)+pro_infor".into(),
        (true, ProtoMode::Nodes) => "GCN(dense)+pro-point".into(),
        (false, m) => format!("GCN+proto-{}", m.as_str()),
    }
}

fn cmd_gen_data(mut rc: RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&rc.out)?;
    let mut spec = rc.synth_spec();
    if rc.delta.is_none() {
        let (delta, acc) = data::calibrate_deviation(
            &spec,
            rc.calibrate_target,
            3,
            5,
            300,
            seed::derive(rc.seed, seed::STREAM_DATA),
        )?;
        println!(
            "calibrated deviation {delta:.4} (pixel-oracle cross-angle accuracy {acc:.3})"
        );
        spec.deviation = delta;
        rc.delta = Some(delta);
    }
    let manifest = data::synth_generate(&spec, &rc.out)?;
    rc.write_snapshot(&rc.out)?;
    println!(
        "wrote {} classes x {} angles x {} samples to {}",
        spec.n_classes,
        spec.angles.len(),
        spec.samples_per_class_angle,
        manifest.display()
    );
    Ok(())
}

fn build_model(rc: &RunConfig, ds: &Dataset) -> Result<Model, Error> {
    Ok(Model::new(rc.model_config(ds.side))?)
}

fn cmd_train(rc: RunConfig) -> Result<(), Error> {
    let ds = load_data(&rc)?;
    let (train_view, _) = splits(&ds, &rc)?;
    let mut model = build_model(&rc, &ds)?;
    let mut opts = TrainOptions::new(rc.steps, rc.seed);
    opts.log_every = Some(200);
    let report = train(&mut model, &train_view, &opts)?;
    std::fs::create_dir_all(&rc.out)?;
    report.write_jsonl(&rc.out.join("train.jsonl"))?;
    checkpoint::save(&model.store, &rc.out.join("params.dgpn"))?;
    rc.write_snapshot(&rc.out)?;
    println!(
        "trained {} steps (final loss {:.4}) in {:.1}s; checkpoint at {}",
        rc.steps,
        report.records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        report.wall_seconds,
        rc.out.join("params.dgpn").display()
    );
    Ok(())
}

fn cmd_eval(rc: RunConfig) -> Result<(), Error> {
    let ds = load_data(&rc)?;
    let (_, test_view) = splits(&ds, &rc)?;
    let mut model = build_model(&rc, &ds)?;
    let params = rc
        .params
        .as_ref()
        .ok_or_else(|| Error::Config("--params is required for eval".into()))?;
    checkpoint::load_into(&mut model.store, params)?;
    let report = evaluate(&model, &test_view, rc.episodes, rc.seed, rc.jobs.max(1))?;
    std::fs::create_dir_all(&rc.out)?;
    report.write_jsonl(&rc.out.join("eval.jsonl"))?;
    write_summary_csv(
        &[SummaryRow {
            variant: variant_label(&rc),
            n_way: rc.n_way,
            k_shot: rc.k_shot,
            mean_acc: report.mean_accuracy,
            std: 0.0,
            episodes: report.records.len(),
            seed: rc.seed,
        }],
        &rc.out.join("summary.csv"),
    )?;
    rc.write_snapshot(&rc.out)?;
    println!(
        "accuracy {:.4} over {} episodes ({:.1}s)",
        report.mean_accuracy,
        report.records.len(),
        report.wall_seconds
    );
    Ok(())
}

fn cmd_ablate(rc: RunConfig) -> Result<(), Error> {
    let ds = load_data(&rc)?;
    let (train_view, test_view) = splits(&ds, &rc)?;
    let base = rc.model_config(ds.side);
    let opts = AblationOptions {
        steps: rc.steps,
        eval_episodes: rc.episodes,
        seed: rc.seed,
        jobs: rc.jobs.max(1),
        log_every: Some(500),
    };
    let outcomes = ablation_run(&base, &train_view, &test_view, &opts);
    std::fs::create_dir_all(&rc.out)?;
    for o in &outcomes {
        let slug: String = o
            .variant
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        match &o.result {
            Ok(rep) => {
                rep.write_jsonl(&rc.out.join(format!("{slug}.jsonl")))?;
                if let Some(m) = &o.model {
                    checkpoint::save(&m.store, &rc.out.join(format!("{slug}.dgpn")))?;
                }
                println!("{:<24} accuracy {:.4}", o.variant, rep.mean_accuracy);
            }
            Err(e) => println!("{:<24} failed: {e}", o.variant),
        }
    }
    write_summary_csv(&summary_rows(&outcomes, &base, rc.seed), &rc.out.join("ablation.csv"))?;
    rc.write_snapshot(&rc.out)?;
    Ok(())
}

fn cmd_robustness(rc: RunConfig) -> Result<(), Error> {
    let ds = load_data(&rc)?;
    let (train_view, test_view) = splits(&ds, &rc)?;
    let mut with_cfg = rc.model_config(ds.side);
    with_cfg.graph.dense = true;
    with_cfg.graph.proto_mode = ProtoMode::Nodes;
    let mut without_cfg = with_cfg.clone();
    without_cfg.graph.proto_mode = ProtoMode::None;

    let mut opts = TrainOptions::new(rc.steps, rc.seed);
    opts.log_every = Some(500);
    let mut with_model = Model::new(with_cfg)?;
    train(&mut with_model, &train_view, &opts)?;
    let mut without_model = Model::new(without_cfg)?;
    train(&mut without_model, &train_view, &opts)?;

    let (with_arm, without_arm) = robustness_histogram(
        &with_model,
        &without_model,
        &test_view,
        rc.runs,
        rc.run_episodes,
        rc.seed,
        rc.jobs.max(1),
    )?;
    std::fs::create_dir_all(&rc.out)?;
    let mut csv = String::from("run,with_pro_point,without_pro_point\n");
    for i in 0..with_arm.accuracies.len() {
        csv.push_str(&format!(
            "{},{},{}\n",
            i, with_arm.accuracies[i], without_arm.accuracies[i]
        ));
    }
    std::fs::write(rc.out.join("robustness.csv"), csv)?;
    write_summary_csv(
        &[
            SummaryRow {
                variant: "GCN(dense)+pro-point".into(),
                n_way: rc.n_way,
                k_shot: rc.k_shot,
                mean_acc: with_arm.mean,
                std: with_arm.std,
                episodes: rc.runs * rc.run_episodes,
                seed: rc.seed,
            },
            SummaryRow {
                variant: "GCN(dense)".into(),
                n_way: rc.n_way,
                k_shot: rc.k_shot,
                mean_acc: without_arm.mean,
                std: without_arm.std,
                episodes: rc.runs * rc.run_episodes,
                seed: rc.seed,
            },
        ],
        &rc.out.join("robustness_summary.csv"),
    )?;
    rc.write_snapshot(&rc.out)?;
    println!(
        "with pro-point:    mean {:.4} std {:.4}\nwithout pro-point: mean {:.4} std {:.4}",
        with_arm.mean, with_arm.std, without_arm.mean, without_arm.std
    );
    Ok(())
}

fn cmd_export(rc: RunConfig) -> Result<(), Error> {
    let ds = load_data(&rc)?;
    let (_, test_view) = splits(&ds, &rc)?;
    let mut model = build_model(&rc, &ds)?;
    if let Some(params) = &rc.params {
        checkpoint::load_into(&mut model.store, params)?;
    }
    let es = seed::episode_seed(rc.seed, rc.episode);
    let mut rng = ChaCha8Rng::seed_from_u64(es);
    let ep = sample_task(&test_view, rc.n_way, rc.k_shot, &mut rng, es)?;
    std::fs::create_dir_all(&rc.out)?;
    let path = rc.out.join(match rc.stage {
        ExportStage::Embedding => "embeddings.csv",
        ExportStage::Final => "features_final.csv",
    });
    export_embeddings(&model, &ds, &ep, rc.stage, &path)?;
    rc.write_snapshot(&rc.out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(rc: RunConfig) -> Result<(), Error> {
    println!("primitive suite:");
    let mut worst: f64 = 0.0;
    for (name, report) in crate::checks::primitive_gradient_suite(rc.seed ^ 1)? {
        println!("  {name:<24} max rel err {:.3e}", report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    let tiny = crate::checks::model_gradient_check(
        crate::checks::tiny_full_config(rc.seed),
        None,
        rc.seed ^ 2,
    )?;
    println!(
        "full tiny model (all {} coordinates): max rel err {:.3e}",
        tiny.coords_checked, tiny.max_rel_err
    );
    worst = worst.max(tiny.max_rel_err);

    let mut cfg = ModelConfig::desk(3, 1, rc.seed);
    cfg.graph.distance_kind = DistanceKind::Abs;
    cfg.graph.head = Head::AdjacencyRow;
    let desk = crate::checks::model_gradient_check(cfg, Some(3), rc.seed ^ 3)?;
    println!(
        "desk preset episode ({} sampled coordinates): max rel err {:.3e}",
        desk.coords_checked, desk.max_rel_err
    );
    worst = worst.max(desk.max_rel_err);

    println!("max relative error: {worst:.3e}");
    if worst < 1e-4 {
        println!("gradcheck: PASS (< 1e-4)");
        Ok(())
    } else {
        Err(Error::Run(format!("gradient check failed: {worst:.3e} >= 1e-4")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("protograph").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run_args(&["frobnicate"]), 2);
        assert_eq!(run_args(&["train", "--no-such-flag", "1"]), 2);
    }

    #[test]
    fn missing_data_is_runtime_error() {
        assert_eq!(run_args(&["train", "--steps", "1"]), 1);
    }

    #[test]
    fn gen_train_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let run_dir = dir.path().join("run");
        assert_eq!(
            run_args(&[
                "gen-data",
                "--classes", "10",
                "--samples", "4",
                "--side", "16",
                "--delta", "1.0",
                "--seed", "5",
                "--out", data_dir.to_str().unwrap(),
            ]),
            0
        );
        assert!(data_dir.join("manifest.csv").exists());

        // tiny training run over the generated data
        let cfg = dir.path().join("cfg.txt");
        std::fs::write(&cfg, "n_way = 3\nk_shot = 1\nsteps = 2\nepisodes = 4\n").unwrap();
        assert_eq!(
            run_args(&[
                "train",
                "--config", cfg.to_str().unwrap(),
                "--data", data_dir.to_str().unwrap(),
                "--seed", "1",
                "--out", run_dir.to_str().unwrap(),
            ]),
            0
        );
        assert!(run_dir.join("params.dgpn").exists());
        assert!(run_dir.join("train.jsonl").exists());
        assert!(run_dir.join("run_config.txt").exists());

        assert_eq!(
            run_args(&[
                "eval",
                "--config", cfg.to_str().unwrap(),
                "--data", data_dir.to_str().unwrap(),
                "--params", run_dir.join("params.dgpn").to_str().unwrap(),
                "--seed", "1",
                "--jobs", "2",
                "--out", run_dir.join("eval").to_str().unwrap(),
            ]),
            0
        );
        let summary =
            std::fs::read_to_string(run_dir.join("eval").join("summary.csv")).unwrap();
        assert!(summary.lines().count() == 2);
        assert!(summary.contains("GCN(dense)+pro-point,3,1,"));
    }
}
