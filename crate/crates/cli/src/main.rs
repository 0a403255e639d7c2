use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actrec::experiment::{run_experiment, ExperimentConfig, RECIPES};
use actrec::gradsuite::{gradient_suite, DEFAULT_EPS, DEFAULT_TOL};
use actrec::heads::Labels;
use actrec::metrics::{decode, DecodeMode, MetricsReport};
use actrec::models::Model;
use actrec::scores::{average_tables, validate_submission, ScoreTable, Split};
use actrec::training::{evaluate, CropMode, CropSpec, Dataset, EvalSpec, Sample, SyntheticSpec};
use actrec::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "actrec", version, about = "Egocentric action recognition toolkit")]
struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (synthetic spec for make-synthetic, experiment for train).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum CropArg {
    Center,
    Lsta10view,
    Tsn10crop,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Direct,
    Pair,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the output directory.
    MakeSynthetic,
    /// Train every phase of an experiment; saves models and CSV logs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Built-in recipe, used when --config is absent.
        #[arg(long, default_value = "desk_all")]
        recipe: String,
        /// Skip per-stage evaluation on the test split.
        #[arg(long)]
        no_eval: bool,
    },
    /// Score a saved model on a dataset split.
    Eval {
        /// Model path without extension (e.g. out/models/hf_tsn).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "center")]
        crop: CropArg,
        #[arg(long, default_value_t = 14)]
        crop_size: usize,
        /// Split tag stored in the score file (S1, S2 or any name).
        #[arg(long, default_value = "S1")]
        tag: String,
        /// Output file name inside --out-dir.
        #[arg(long)]
        output: Option<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Average score files in the given order.
    Ensemble {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, default_value = "ensemble_scores.json")]
        output: String,
    },
    /// Top-1/top-5 and macro precision/recall of a score file.
    Metrics {
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "direct")]
        decode: DecodeArg,
        #[arg(long, default_value = "metrics.csv")]
        output: String,
    },
    /// Write a challenge submission from a score file.
    Submit {
        scores: PathBuf,
        #[arg(long, default_value = "submission.json")]
        output: String,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        detail: e.to_string(),
    })
}

fn split_of(data: &Dataset, split: SplitArg) -> &[Sample] {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Test => &data.test,
    }
}

fn model_path(p: &Path) -> Result<(PathBuf, String)> {
    let stem = p
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad model path {}", p.display())))?;
    let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, stem.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)?;
    let out = |name: &str| cli.out_dir.join(name);
    match cli.command {
        Command::MakeSynthetic => {
            let mut spec = match &cli.config {
                Some(p) => read_json::<SyntheticSpec>(p)?,
                None => SyntheticSpec::desk(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let data = Dataset::generate(&spec)?;
            data.save(&cli.out_dir)?;
            println!(
                "wrote {} train / {} test samples, label space {}",
                data.train.len(),
                data.test.len(),
                data.space.hash_id()
            );
        }
        Command::Train { data, recipe, no_eval } => {
            let mut config = match &cli.config {
                Some(p) => read_json::<ExperimentConfig>(p)?,
                None => ExperimentConfig::recipe(&recipe).map_err(|e| match e {
                    Error::Invalid(m) => Error::Invalid(format!("{m} (built-in: {RECIPES:?})")),
                    e => e,
                })?,
            };
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let data = Dataset::load(&data)?;
            let models = out("models");
            let logs = out("logs");
            fs::create_dir_all(&logs)?;
            fs::write(out("experiment.json"), serde_json::to_string_pretty(&config)?)?;
            let eval = (!no_eval).then_some(data.test.as_slice());
            let mut saved = Ok(());
            run_experiment(&config, &data.space, &data.train, eval, &mut |r| {
                let step = || -> Result<()> {
                    r.model.save(&models, &r.name)?;
                    for log in &r.logs {
                        fs::write(logs.join(format!("{}_{}.csv", r.name, log.stage)), log.to_csv())?;
                    }
                    let last = r.logs.last().and_then(|l| l.rows.last());
                    match last.and_then(|row| row.eval_acc) {
                        Some(a) => println!(
                            "{}: {:.1}s, test top-1 verb {:.3} noun {:.3} action {:.3}",
                            r.name, r.seconds, a[0], a[1], a[2]
                        ),
                        None => println!("{}: {:.1}s", r.name, r.seconds),
                    }
                    Ok(())
                };
                if saved.is_ok() {
                    saved = step();
                }
            })?;
            saved?;
        }
        Command::Eval {
            model,
            data,
            split,
            crop,
            crop_size,
            tag,
            output,
        } => {
            let (dir, stem) = model_path(&model)?;
            let model = Model::load(&dir, &stem)?;
            let data = Dataset::load(&data)?;
            if data.space != model.space {
                return Err(Error::Invalid("model and dataset use different label spaces".into()));
            }
            let mode = match crop {
                CropArg::Center => CropMode::Center,
                CropArg::Lsta10view => CropMode::Lsta10view,
                CropArg::Tsn10crop => CropMode::Tsn10crop,
            };
            let spec = EvalSpec {
                crop: CropSpec { mode },
                crop_size,
            };
            let rows = evaluate(&model, split_of(&data, split), &spec)?;
            let table = ScoreTable::from_rows(&data.space, tag.parse::<Split>()?, rows)?;
            let path = out(&output.unwrap_or_else(|| format!("{stem}_scores.json")));
            table.save(&path)?;
            println!("wrote {} segments to {}", table.len(), path.display());
        }
        Command::Gradcheck { instances, eps, tol } => {
            let seed = cli.seed.unwrap_or(0);
            let entries = gradient_suite(seed, instances, eps, tol)?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.report.passed() { "ok" } else { "FAIL" };
                println!("{:<26} #{} max_rel {:.3e} {status}", e.check, e.instance, e.report.max_rel_error());
                if !e.report.passed() {
                    failed += 1;
                    print!("{}", e.report);
                }
            }
            if failed > 0 {
                return Err(Error::GradCheckFailed {
                    failed,
                    total: entries.len(),
                });
            }
        }
        Command::Ensemble { scores, output } => {
            let tables = scores.iter().map(|p| ScoreTable::load(p)).collect::<Result<Vec<_>>>()?;
            let avg = average_tables(&tables)?;
            let path = out(&output);
            avg.save(&path)?;
            println!("averaged {} tables over {} segments into {}", tables.len(), avg.len(), path.display());
        }
        Command::Metrics {
            scores,
            data,
            split,
            decode: mode,
            output,
        } => {
            let table = ScoreTable::load(&scores)?;
            let data = Dataset::load(&data)?;
            table.check(&data.space)?;
            let labels: BTreeMap<String, Labels> = split_of(&data, split)
                .iter()
                .map(|s| (s.id.clone(), s.labels))
                .collect();
            let report = MetricsReport::compute(&table, &labels)?;
            let mode = match mode {
                DecodeArg::Direct => DecodeMode::Direct,
                DecodeArg::Pair => DecodeMode::Pair,
            };
            let decoded = decode(&table, &data.space, mode)?;
            let csv = report.to_csv();
            fs::write(out(&output), &csv)?;
            print!("{csv}");
            let correct = decoded
                .rows
                .iter()
                .filter(|(id, d)| labels.get(*id).is_some_and(|l| l.action == d.action))
                .count();
            println!(
                "decode {:?}: action accuracy {:.2}%, fallback rate {:.2}% (precision/recall: macro, artifact protocol)",
                mode,
                100.0 * correct as f64 / decoded.rows.len().max(1) as f64,
                100.0 * decoded.fallback_rate()
            );
        }
        Command::Submit { scores, output } => {
            let table = ScoreTable::load(&scores)?;
            let text = table.to_submission();
            let n = validate_submission(&text)?;
            let path = out(&output);
            fs::write(&path, text)?;
            println!("wrote submission for {n} segments to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
