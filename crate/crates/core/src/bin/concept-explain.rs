use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use concept_explain::distill::{curves_csv, prepare_samples, train, PriorKind};
use concept_explain::harness::experiment::{explainer_input_dim, new_explainer};
use concept_explain::harness::report::{self, emit_report, load_result};
use concept_explain::harness::{
    generate_dataset, load_model, pretrain_performer, run_experiment, save_model, Checkpoint,
    Dataset, ExperimentConfig, PretrainConfig, SyntheticSpec,
};
use concept_explain::metrics::{evaluate, EvalSubset};

#[derive(Parser)]
#[command(
    name = "concept-explain",
    version,
    about = "Explain a CNN score as an additive sum over concept scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Case1,
    Case2,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset experiment config as JSON.
    Preset {
        #[arg(value_enum)]
        which: Preset,
    },
    /// Generate a synthetic dataset from a spec file.
    GenData { spec: PathBuf, out: PathBuf },
    /// Generate the dataset and pretrain the performer of an experiment config.
    Pretrain { config: PathBuf },
    /// Train an explainer on the pretrained performer of an experiment config.
    Distill {
        config: PathBuf,
        /// ce, l2 or none
        #[arg(long)]
        prior: Option<PriorKind>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint (with explainer) on a dataset's eval split; prints JSON.
    Evaluate {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "positive")]
        subset: String,
    },
    /// Run baseline vs prior-guided distillation for every replicate and write reports.
    Run { config: PathBuf },
    /// Like `run`, with a concept-count sweep (2,4,8 unless the config sets one).
    Sweep { config: PathBuf },
    /// Re-render the CSV reports of a results directory from its report.json.
    Report { dir: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn output_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn pretrain_stage(config: &ExperimentConfig) -> Result<(Dataset, Checkpoint)> {
    let dir = output_dir(config);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let dataset = generate_dataset(&config.spec)?;
    let pretrain = PretrainConfig {
        seed: config.spec.seed,
        ..config.pretrain.clone()
    };
    let pre = pretrain_performer(&dataset, &pretrain, config.case)?;
    eprintln!(
        "performer eval accuracy {:.4} (majority {:.4})",
        pre.report.eval_accuracy, pre.report.majority
    );
    dataset.save(&dir.join("dataset.json"))?;
    let ckpt = Checkpoint::new(pre.performer, pre.bank, None, config.spec.seed);
    save_model(&dir.join("performer.json"), &ckpt)?;
    std::fs::write(
        dir.join("pretrain.json"),
        serde_json::to_string_pretty(&pre.report)?,
    )?;
    Ok((dataset, ckpt))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Preset { which } => {
            let c = match which {
                Preset::Case1 => ExperimentConfig::case1_preset(),
                Preset::Case2 => ExperimentConfig::case2_preset(),
            };
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
        Command::GenData { spec, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            let ds = generate_dataset(&spec)?;
            ds.save(&out)?;
            eprintln!(
                "wrote {} train / {} eval images to {}",
                ds.train.len(),
                ds.eval.len(),
                out.display()
            );
        }
        Command::Pretrain { config } => {
            let config: ExperimentConfig = read_json(&config)?;
            config.validate()?;
            pretrain_stage(&config)?;
        }
        Command::Distill {
            config,
            prior,
            beta,
            epochs,
            seed,
        } => {
            let mut config: ExperimentConfig = read_json(&config)?;
            if let Some(p) = prior {
                config.distill.prior = p;
            }
            if let Some(b) = beta {
                config.distill.beta = b;
            }
            if let Some(e) = epochs {
                config.distill.epochs = e;
            }
            if let Some(s) = seed {
                config.distill.seed = s;
            }
            config.validate()?;
            let dir = output_dir(&config);
            let (dataset, ckpt) =
                if dir.join("performer.json").exists() && dir.join("dataset.json").exists() {
                    (
                        Dataset::load(&dir.join("dataset.json"))?,
                        load_model(&dir.join("performer.json"))?,
                    )
                } else {
                    pretrain_stage(&config)?
                };
            let dim =
                explainer_input_dim(&config.explainer, &ckpt.performer, &dataset.train.images[0])?;
            let mut explainer = new_explainer(
                &config.explainer,
                dim,
                ckpt.concepts.len(),
                config.distill.positivity,
                config.distill.seed,
            );
            let samples = prepare_samples(
                &ckpt.performer,
                &ckpt.concepts,
                &explainer,
                &dataset.train.images,
                config.distill.prior,
                config.distill.shared_feature,
            )?;
            let state = train(&mut explainer, &samples, &config.distill)?;
            std::fs::write(dir.join("curves.csv"), curves_csv(&state.history))?;
            let metrics = evaluate(
                &ckpt.performer,
                &ckpt.concepts,
                &explainer,
                &dataset.eval.images,
                &dataset.eval.labels,
                config.eval_subset,
            )?;
            std::fs::write(
                dir.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)?,
            )?;
            std::fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
            let out = Checkpoint::new(
                ckpt.performer,
                ckpt.concepts,
                Some(explainer),
                config.distill.seed,
            );
            save_model(&dir.join("explainer.json"), &out)?;
            for (k, v) in metrics.summary() {
                println!("{k},{v}");
            }
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            subset,
        } => {
            let ckpt = load_model(&checkpoint)?;
            let Some(explainer) = &ckpt.explainer else {
                bail!(
                    "{} holds no explainer; run `distill` first",
                    checkpoint.display()
                );
            };
            let subset = match subset.as_str() {
                "positive" => EvalSubset::Positive,
                "all" => EvalSubset::All,
                other => bail!("unknown subset {other:?} (positive|all)"),
            };
            let ds = Dataset::load(&dataset)?;
            let metrics = evaluate(
                &ckpt.performer,
                &ckpt.concepts,
                explainer,
                &ds.eval.images,
                &ds.eval.labels,
                subset,
            )?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Run { config } => run(read_json(&config)?)?,
        Command::Sweep { config } => {
            let mut config: ExperimentConfig = read_json(&config)?;
            if config.sweep.is_none() {
                config.sweep = Some(vec![2, 4, 8]);
            }
            run(config)?;
        }
        Command::Report { dir } => {
            let result = load_result(&dir)?;
            emit_report(&result, &dir)?;
            print!("{}", report::summary_csv(&result));
        }
    }
    Ok(())
}

fn run(config: ExperimentConfig) -> Result<()> {
    let result = run_experiment(&config)?;
    for r in &result.replicates {
        if let concept_explain::harness::ReplicateOutcome::Failed { seed, cause } = r {
            eprintln!("replicate {seed} failed: {cause}");
        }
    }
    let dir = output_dir(&config);
    emit_report(&result, &dir)?;
    print!("{}", report::summary_csv(&result));
    Ok(())
}
