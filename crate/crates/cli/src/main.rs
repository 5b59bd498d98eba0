use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spatialvqa::dataset::{build_dataset, decode_caption, BuildConfig, Dataset, Split};
use spatialvqa::harness::{
    aggregate_runs, emit_report, evaluate_checkpoint, train_run, write_aggregate, write_table, Curve,
    ExperimentConfig, HarnessError,
};
use spatialvqa::lang::{realize, CaptionType};
use spatialvqa::models::ModelConfig;
use spatialvqa::preset::Preset;

#[derive(Parser)]
#[command(name = "spatialvqa", version, about = "Spatial-language VQA data, models and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sharded dataset.
    Generate {
        #[arg(long = "type")]
        caption_type: CaptionType,
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the preset's training split size.
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
    },
    /// Print (and optionally render) one record of a dataset.
    Show {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Write an experiment config file.
    Config {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        eval_every: Option<u64>,
        /// Where the config file goes; printed to stdout if absent.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Train every seed of an experiment, or just one.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with per-relation and per-pattern breakdowns.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate per-seed curves of every experiment under a directory.
    Curves {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Generate {
            caption_type,
            preset,
            seed,
            out,
            train,
            val,
        } => {
            let mut cfg = BuildConfig::new(caption_type, preset, seed);
            cfg.n_train = train.unwrap_or(cfg.n_train);
            cfg.n_val = val.unwrap_or(cfg.n_val);
            let m = build_dataset(&cfg, &out)?;
            println!(
                "{} {}: {} train, {} val, {} shards -> {}",
                m.caption_type.name(),
                m.preset,
                m.n_train,
                m.n_val,
                m.shards.len(),
                out.display()
            );
        }
        Command::Show {
            data,
            split,
            index,
            png,
        } => {
            let ds = Dataset::open(&data)?;
            let examples = ds.load(split)?;
            let ex = examples
                .get(index)
                .ok_or_else(|| HarnessError::Config(format!("{split} has {} records", examples.len())))?;
            let caption = decode_caption(&ds.manifest.vocabulary, ex)?;
            println!("{} -> {}", realize(&caption).join(" "), if ex.label { "yes" } else { "no" });
            if let Some(p) = png {
                ex.image.save_png(&p).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
            }
        }
        Command::Config {
            model,
            data,
            out,
            preset,
            iterations,
            eval_every,
            write,
        } => {
            let model = ModelConfig::from_name(&model, preset)?;
            let mut cfg = ExperimentConfig::new(data, model, out);
            cfg.iterations = iterations.unwrap_or(cfg.iterations);
            cfg.eval_every = eval_every.unwrap_or(cfg.eval_every);
            cfg.validate()?;
            let text = serde_json::to_string_pretty(&cfg).expect("serializable");
            match write {
                Some(p) => fs::write(p, text + "\n")?,
                None => println!("{text}"),
            }
        }
        Command::Train { config, seed, resume } => {
            let text = fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let seeds = match seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            for s in seeds {
                let name = cfg.name();
                let curve = train_run(&cfg, s, resume, |r| {
                    println!(
                        "{name} seed {s} iter {:>6}  loss {:.4}  train {:.4}  val {:.4}",
                        r.iteration, r.loss, r.train_accuracy, r.val_accuracy
                    );
                })?;
                if let Some(acc) = curve.final_val_accuracy() {
                    println!("{name} seed {s} final val {acc:.4}");
                }
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = evaluate_checkpoint(&checkpoint, &data, split)?;
            println!("accuracy {:.4} over {}", report.accuracy, report.count);
            for (title, groups) in [("relation", &report.by_relation), ("pattern", &report.by_pattern)] {
                println!("{title:<20} {:>6} {:>8}", "count", "accuracy");
                for (k, g) in groups {
                    let acc = g.accuracy().map_or("-".to_string(), |a| format!("{a:.4}"));
                    println!("{k:<20} {:>6} {acc:>8}", g.count);
                }
            }
            if let Some(p) = out {
                fs::write(p, serde_json::to_string_pretty(&report).expect("serializable"))?;
            }
        }
        Command::Curves { input, out } => {
            let experiments = collect_experiments(&input)?;
            if experiments.is_empty() {
                return Err(HarnessError::Data(format!("no seed curves under {}", input.display())));
            }
            let mut aggregates = Vec::new();
            for (name, dir, curves) in experiments {
                let rows = aggregate_runs(&curves)?;
                write_aggregate(&rows, &dir.join("aggregate.csv"))?;
                aggregates.push((name, rows));
            }
            let table = emit_report(&aggregates, &out)?;
            write_table(&table, &out.with_extension("table.csv"))?;
            println!("{:<28} {:>8} {:>7} {:>7} {:>7}", "experiment", "iter", "mean", "min", "max");
            for r in table {
                println!(
                    "{:<28} {:>8} {:>7.4} {:>7.4} {:>7.4}",
                    r.experiment, r.iteration, r.mean, r.min, r.max
                );
            }
        }
    }
    Ok(())
}

/// Every directory below `root` holding `seed-*.csv` files is one
/// experiment, named by its path relative to `root`.
fn collect_experiments(root: &Path) -> Result<Vec<(String, PathBuf, Vec<Curve>)>, HarnessError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut seeds = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
            if path.is_dir() {
                stack.push(path);
            } else if file.starts_with("seed-") && file.ends_with(".csv") {
                seeds.push(path);
            }
        }
        if seeds.is_empty() {
            continue;
        }
        seeds.sort();
        let curves = seeds.iter().map(|p| Curve::read(p)).collect::<Result<Vec<_>, _>>()?;
        let name = dir.strip_prefix(root).unwrap_or(&dir).display().to_string();
        let name = if name.is_empty() { "experiment".to_string() } else { name };
        found.push((name, dir, curves));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}
