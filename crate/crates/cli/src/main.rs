use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use scoretree::bench::{self, ExperimentConfig};
use scoretree::data::{self, ColumnKind};
use scoretree::synth::{self, PiecewiseSpec};

// println! panics when stdout is closed early (e.g. piped into `head`)
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(io::stdout(), $($arg)*)?
    };
}
use scoretree::tree;
use scoretree::{ScoringRule, TreeConfig};

#[derive(Parser)]
#[command(name = "scoretree", version, about = "Regression trees split by proper scoring rules")]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a tree to a CSV file and save it as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        /// sse, crps, dss, is1 or is2 (optionally `is1:0.1`).
        #[arg(long, default_value = "crps")]
        score: ScoringRule,
        /// Interval level for is1/is2; defaults to 0.2.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 50)]
        min_node: usize,
        #[arg(long, default_value_t = 0.05)]
        quantile_step: f64,
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        /// Accept every positive-gain split regardless of κ.
        #[arg(long)]
        no_pruning: bool,
        /// Treat this column as categorical (repeatable).
        #[arg(long = "categorical")]
        categorical: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predictions for every row of a CSV file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// mean, quantile:P or samples.
        #[arg(long, default_value = "mean")]
        summary: Summary,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Total and mean score of a model on labelled data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        /// Scoring rules; repeat or separate by commas.
        #[arg(long, value_delimiter = ',', default_value = "sse,crps,dss,is1,is2")]
        score: Vec<ScoringRule>,
    },
    /// Draw a synthetic dataset.
    Synth {
        /// easy, hard or toy.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split criterion over a grid of thresholds on a one-predictor dataset.
    Scan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "y")]
        response: String,
        #[arg(long, default_value = "crps")]
        score: ScoringRule,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        /// Grid start; defaults to the smallest predictor value.
        #[arg(long, allow_hyphen_values = true)]
        lower: Option<f64>,
        /// Grid end; defaults to the largest predictor value.
        #[arg(long, allow_hyphen_values = true)]
        upper: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replicated experiment and write the results directory.
    Bench {
        /// JSON or TOML experiment description.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// κ* and the mean score table from a results.csv.
    Tune {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to every rule used both to build and to evaluate.
        #[arg(long)]
        score: Option<ScoringRule>,
    },
    /// Split recovery of saved single-predictor models.
    Audit {
        /// Directory searched recursively for model JSON files.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        true_splits: Vec<f64>,
        #[arg(long, default_value_t = 0.02)]
        margin: f64,
    },
}

#[derive(Clone, Copy, Debug)]
enum Summary {
    Mean,
    Quantile(f64),
    Samples,
}

impl std::str::FromStr for Summary {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "mean" => Ok(Summary::Mean),
            None if s == "samples" => Ok(Summary::Samples),
            Some(("quantile", p)) => {
                let p: f64 = p.parse().map_err(|_| format!("bad quantile level '{p}'"))?;
                if p > 0.0 && p <= 1.0 {
                    Ok(Summary::Quantile(p))
                } else {
                    Err(format!("quantile level {p} outside (0, 1]"))
                }
            }
            _ => Err(format!("unknown summary '{s}' (expected mean, quantile:P or samples)")),
        }
    }
}

fn with_alpha(rule: ScoringRule, alpha: Option<f64>) -> Result<ScoringRule> {
    let Some(a) = alpha else { return Ok(rule) };
    Ok(match rule {
        ScoringRule::Is1 { .. } => ScoringRule::is1(a)?,
        ScoringRule::Is2 { .. } => ScoringRule::is2(a)?,
        other => bail!("--alpha applies only to is1 and is2, not {other}"),
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            data,
            response,
            score,
            alpha,
            depth,
            min_node,
            quantile_step,
            kappa,
            no_pruning,
            categorical,
            out,
        } => {
            let rule = with_alpha(score, alpha)?;
            let mut config = TreeConfig::new(rule)
                .with_depth(depth)
                .with_min_node_size(min_node)
                .with_quantile_step(quantile_step)
                .with_kappa(kappa);
            if no_pruning {
                config = config.without_pruning();
            }
            config.validate()?;
            let overrides: HashMap<String, ColumnKind> =
                categorical.into_iter().map(|c| (c, ColumnKind::Categorical)).collect();
            let ds = data::load_csv_with(&data, &response, &overrides)?;
            let model = tree::fit(&ds, &config)?;
            data::save_model(&model, &out)?;
            let stats = model.stats();
            out!(
                "rule {} depth {} leaves {} rows {}",
                rule,
                stats.depth,
                stats.leaf_count,
                ds.n_rows()
            );
            for s in &stats.splits {
                out!(
                    "node {} split {} {} n {} delta {}",
                    s.node, s.feature_name, s.kind, s.n, s.delta
                );
            }
        }
        Command::Predict {
            model,
            data,
            summary,
            out,
        } => {
            let model = data::load_model(&model)?;
            let overrides: HashMap<String, ColumnKind> = HashMap::new();
            let mut columns = data::load_predictors(&data, &overrides)?;
            // numeric-looking category labels must be read as the model saw them
            for f in model.features() {
                if f.kind == ColumnKind::Categorical {
                    if let Some(c) = columns.iter_mut().find(|c| c.name == f.name) {
                        if c.data.kind() == ColumnKind::Numeric {
                            let forced: HashMap<String, ColumnKind> =
                                [(f.name.clone(), ColumnKind::Categorical)].into_iter().collect();
                            let all = data::load_predictors(&data, &forced)?;
                            *c = all.into_iter().find(|x| x.name == f.name).expect("same file");
                        }
                    }
                }
            }
            let n_rows = columns[0].data.len();
            let leaves = model.leaf_assignments_of(&columns, n_rows)?;
            let mut w = output(out.as_deref())?;
            match summary {
                Summary::Mean => writeln!(w, "row,leaf,mean")?,
                Summary::Quantile(p) => writeln!(w, "row,leaf,quantile_{p}")?,
                Summary::Samples => writeln!(w, "row,leaf,samples")?,
            }
            for (row, id) in leaves.iter().enumerate() {
                let f = model.leaf(*id).expect("routed to a leaf");
                match summary {
                    Summary::Mean => writeln!(w, "{row},{id},{}", f.mean())?,
                    Summary::Quantile(p) => writeln!(w, "{row},{id},{}", f.quantile(p)?)?,
                    Summary::Samples => {
                        let s: Vec<String> = f.samples().iter().map(f64::to_string).collect();
                        writeln!(w, "{row},{id},{}", s.join(" "))?
                    }
                }
            }
            w.flush()?;
        }
        Command::Eval {
            model,
            data,
            response,
            score,
        } => {
            let model = data::load_model(&model)?;
            let ds = data::load_csv(&data, &response)?;
            let leaves = model.leaf_assignments(&ds)?;
            out!("rule,total,mean,n");
            for rule in score {
                let total = model.evaluate_assigned(&leaves, ds.response(), &rule)?;
                out!("{rule},{total},{},{}", total / ds.n_rows() as f64, ds.n_rows());
            }
        }
        Command::Synth { preset, n, seed, out } => {
            let spec = PiecewiseSpec::preset(&preset)?;
            let ds = synth::generate(&spec, n, seed)?;
            data::save_csv(&ds, &out)?;
        }
        Command::Scan {
            data,
            response,
            score,
            grid_step,
            lower,
            upper,
            out,
        } => {
            let ds = data::load_csv(&data, &response)?;
            if ds.n_features() != 1 {
                bail!("scan needs exactly one predictor, found {}", ds.n_features());
            }
            let data::ColumnData::Numeric(x) = &ds.column(0).data else {
                bail!("scan needs a numeric predictor");
            };
            let lo = lower.unwrap_or_else(|| x.iter().copied().fold(f64::INFINITY, f64::min));
            let hi = upper.unwrap_or_else(|| x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let grid = bench::scan_grid(lo, hi, grid_step)?;
            let scan = bench::criterion_scan(&ds, &score, &grid)?;
            let mut w = output(Some(&out))?;
            writeln!(w, "split,criterion")?;
            for (s, c) in &scan.points {
                writeln!(w, "{s},{c}")?;
            }
            w.flush()?;
            match scan.argmin {
                Some((s, c)) => out!("argmin {s} criterion {c}"),
                None => out!("no grid point splits the data"),
            }
        }
        Command::Bench { config, out_dir } => {
            let config = ExperimentConfig::load(&config)?;
            let results = bench::run_bench(&config, &out_dir)?;
            out!(
                "{} records, config_sha256 {}, written to {}",
                results.records().len(),
                results.metadata.config_sha256,
                out_dir.display()
            );
        }
        Command::Tune { results, score } => {
            let results = bench::load_results(&results)?;
            let (builds, evals) = results.rules();
            let rules: Vec<ScoringRule> = match score {
                Some(r) => vec![r],
                None => builds.into_iter().filter(|b| evals.contains(b)).collect(),
            };
            out!("train_size,score,kappa,mean_out_sample,is_kappa_star");
            for n in results.train_sizes() {
                for rule in &rules {
                    let t = bench::tune_kappa(&results, n, rule)?;
                    for (k, m) in &t.means {
                        out!("{n},{rule},{k},{m},{}", k.to_bits() == t.kappa_star.to_bits());
                    }
                }
            }
        }
        Command::Audit {
            models,
            true_splits,
            margin,
        } => {
            let mut files = Vec::new();
            collect_json(&models, &mut files)?;
            if files.is_empty() {
                bail!("no model files under {}", models.display());
            }
            files.sort();
            let mut groups: Vec<(String, Vec<scoretree::PredictiveTree>)> = Vec::new();
            for f in files {
                let group = f
                    .parent()
                    .and_then(|p| p.strip_prefix(&models).ok())
                    .map(|p| p.display().to_string())
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| ".".into());
                let tree = data::load_model(&f).with_context(|| format!("loading {}", f.display()))?;
                match groups.last_mut() {
                    Some((g, trees)) if *g == group => trees.push(tree),
                    _ => groups.push((group, vec![tree])),
                }
            }
            out!("group,true_split,recovery_rate,mean_incorrect,trees");
            for (group, trees) in &groups {
                let report = bench::split_recovery_audit(trees, &true_splits, margin)?;
                for (v, rate) in &report.recovery {
                    out!("{group},{v},{rate},{},{}", report.mean_incorrect, report.trees);
                }
            }
        }
    }
    Ok(())
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
