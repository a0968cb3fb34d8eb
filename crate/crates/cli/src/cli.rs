use std::ffi::OsString;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use ragjudge_core::backend::LlmBackend;
use ragjudge_core::config::{build_backend, AppConfig};
use ragjudge_core::eval::{aggregate, evaluate_run, load_dataset, Dataset, DatasetFormat};
use ragjudge_core::experiments::{
    labeled_scores, ojb_sweep, ordering_variance_experiment, synthetic_score_study, tau_ablation, NoiseCondition,
    SyntheticDistSpec,
};
use ragjudge_core::filter::{apply_filter, OrderKind, ScoredDocument};
use ragjudge_core::fixtures::{position_sensitive_corpus, CorpusSpec};
use ragjudge_core::pipeline::{read_results, Pipeline};
use ragjudge_core::{OrderMode, PipelineConfig};

use crate::service::{self, FilterApiRequest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_FATAL: i32 = 2;

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "ragjudge", version, about = "Judge-and-filter retrieval pipeline with an LLM backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for random ordering and experiments; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline over a dataset and write results plus a report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
        /// Overrides the configured concurrency.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Score, filter and order one query read as a filter request.
    Filter {
        #[command(flatten)]
        common: Common,
        /// Request JSON file, `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
    /// Evaluate a grid of n values and orderings.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5")]
        n_values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "descending,ascending")]
        orders: Vec<String>,
    },
    /// Shuffle documents repeatedly and measure answer variance per noise condition.
    Variance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Optimal judge bars per query from a labelled dataset.
    Ojb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Existing results file; the pipeline runs first when absent.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Noise conditions to keep, as `noisy/total` pairs.
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<String>,
    },
    /// Synthetic score-distribution study.
    Synth {
        #[command(flatten)]
        common: Common,
        /// JSON spec file; defaults to the built-in spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Serve the filter HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Write a labelled mock corpus, its backend script and a config.
    DemoData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 25)]
        queries: usize,
        #[arg(long, default_value_t = 6)]
        docs_per_query: usize,
    },
}

/// Parses arguments and runs a subcommand, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FATAL } else { EXIT_OK };
        }
    };
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_FATAL;
        }
    };
    match rt.block_on(dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FATAL
        }
    }
}

struct Session {
    app: AppConfig,
    seed: Option<u64>,
    output: Option<PathBuf>,
}

impl Session {
    fn load(common: &Common) -> anyhow::Result<Self> {
        let mut app = match &common.config {
            Some(p) => AppConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => AppConfig {
                pipeline: PipelineConfig::default(),
                backend: None,
                service: Default::default(),
                seed: None,
            },
        };
        let seed = common.seed.or(app.seed);
        if let (Some(s), OrderMode::Random { .. }) = (common.seed, app.pipeline.order_mode) {
            app.pipeline.order_mode = OrderMode::Random { seed: s };
        }
        Ok(Self { app, seed, output: common.output.clone() })
    }

    fn backend(&self) -> anyhow::Result<Arc<dyn LlmBackend>> {
        let settings = self.app.backend.as_ref().ok_or_else(|| anyhow!("no [backend] section in config; pass --config"))?;
        Ok(build_backend(settings)?)
    }

    fn out_dir(&self, default: &str) -> anyhow::Result<PathBuf> {
        let dir = self.output.clone().unwrap_or_else(|| PathBuf::from(default));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

fn dataset(path: &Path, format: &str) -> anyhow::Result<Dataset> {
    let format: DatasetFormat = format.parse().map_err(|e: String| anyhow!(e))?;
    Ok(load_dataset(path, format)?)
}

fn parse_order(s: &str, seed: Option<u64>) -> anyhow::Result<OrderMode> {
    let kind = match s.trim() {
        "descending" => OrderKind::Descending,
        "ascending" => OrderKind::Ascending,
        "random" => OrderKind::Random,
        other => bail!("unknown order {other:?} (descending, ascending, random)"),
    };
    kind.with_seed(seed.or(Some(DEFAULT_SEED))).map_err(|e| anyhow!(e))
}

fn parse_condition(s: &str) -> anyhow::Result<NoiseCondition> {
    let (a, b) = s.trim().split_once('/').ok_or_else(|| anyhow!("condition {s:?} is not noisy/total"))?;
    Ok(NoiseCondition { noisy: a.parse()?, total: b.parse()? })
}

async fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Run { common, dataset: path, format, parallelism } => {
            let mut ctx = Session::load(&common)?;
            if let Some(p) = parallelism {
                ctx.app.pipeline.parallelism = p;
            }
            ctx.app.pipeline.validate()?;
            let data = dataset(&path, &format)?;
            let dir = ctx.out_dir("out")?;
            let results = dir.join("results.jsonl");
            let pipeline = Pipeline::new(ctx.app.pipeline.clone(), ctx.backend()?);
            let summary = pipeline.run_dataset(&data, &results).await?;
            let records = evaluate_run(&data, &read_results(&results)?);
            let report = aggregate(&records, data.task_type)?;
            write(&dir.join("report.json"), &report.to_json())?;
            write(&dir.join("summary.json"), &to_json(&summary))?;
            print!("{}", report.to_table());
            Ok(if summary.is_partial() { EXIT_PARTIAL } else { EXIT_OK })
        }
        Command::Filter { common, input } => {
            let ctx = Session::load(&common)?;
            let mut raw = String::new();
            if input == Path::new("-") {
                std::io::stdin().read_to_string(&mut raw)?;
            } else {
                raw = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            }
            let req: FilterApiRequest = serde_json::from_str(&raw).context("parsing filter request")?;
            let (query, docs, n, mode) =
                service::validate_request(&req, &ctx.app.pipeline).map_err(|e| anyhow!("{e}"))?;
            let pipeline = Pipeline::new(ctx.app.pipeline.clone(), ctx.backend()?);
            let scored = pipeline.score_query(&query, &docs).await?;
            let inputs: Vec<ScoredDocument> =
                scored.documents.iter().zip(&scored.verdicts).map(|(d, v)| ScoredDocument::from_verdict(d, v)).collect();
            let outcome = apply_filter(&inputs, n, mode)?;
            let text = to_json(&outcome);
            match &ctx.output {
                Some(p) => write(p, &text)?,
                None => print!("{text}"),
            }
            Ok(EXIT_OK)
        }
        Command::Ablate { common, dataset: path, n_values, orders } => {
            let ctx = Session::load(&common)?;
            let data = dataset(&path, "jsonl")?;
            let modes = orders.iter().map(|o| parse_order(o, ctx.seed)).collect::<anyhow::Result<Vec<_>>>()?;
            let table = tau_ablation(&ctx.app.pipeline, &data, &n_values, &modes, ctx.backend()?).await?;
            let dir = ctx.out_dir("out")?;
            write(&dir.join("ablation.csv"), &table.to_csv())?;
            write(&dir.join("ablation.json"), &to_json(&table))?;
            print!("{}", table.to_table());
            Ok(if table.cells.iter().any(|c| c.errors > 0) { EXIT_PARTIAL } else { EXIT_OK })
        }
        Command::Variance { common, dataset: path, trials } => {
            let ctx = Session::load(&common)?;
            let data = dataset(&path, "jsonl")?;
            let seed = ctx.seed.unwrap_or(DEFAULT_SEED);
            let report = ordering_variance_experiment(&ctx.app.pipeline, &data, trials, seed, ctx.backend()?).await?;
            let dir = ctx.out_dir("out")?;
            write(&dir.join("variance.csv"), &report.to_csv())?;
            write(&dir.join("variance.json"), &to_json(&report))?;
            print!("{}", report.to_csv());
            Ok(EXIT_OK)
        }
        Command::Ojb { common, dataset: path, results, conditions } => {
            let ctx = Session::load(&common)?;
            let data = dataset(&path, "jsonl")?;
            let dir = ctx.out_dir("out")?;
            let results = match results {
                Some(r) => r,
                None => {
                    let r = dir.join("results.jsonl");
                    Pipeline::new(ctx.app.pipeline.clone(), ctx.backend()?).run_dataset(&data, &r).await?;
                    r
                }
            };
            let conditions = conditions.iter().map(|c| parse_condition(c)).collect::<anyhow::Result<Vec<_>>>()?;
            let labeled = labeled_scores(&data, &read_results(&results)?)?;
            let sweep = ojb_sweep(&labeled, &conditions);
            write(&dir.join("ojb.csv"), &sweep.to_csv())?;
            write(&dir.join("ojb.json"), &to_json(&sweep))?;
            for d in &sweep.dispersion {
                println!(
                    "{}/{}: {} queries ({} separable), ojb mean {:.3} std {:.3}",
                    d.condition.noisy, d.condition.total, d.queries, d.separable_queries, d.all.mean, d.all.std
                );
            }
            Ok(if sweep.skipped.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Synth { common, spec, trials } => {
            let ctx = Session::load(&common)?;
            let mut spec: SyntheticDistSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?).context("parsing synthetic spec")?,
                None => SyntheticDistSpec::default(),
            };
            if let Some(t) = trials {
                spec.trials = t;
            }
            if let Some(s) = ctx.seed {
                spec.seed = s;
            }
            let study = synthetic_score_study(&spec)?;
            let dir = ctx.out_dir("out")?;
            write(&dir.join("synth_trials.csv"), &study.trials_csv())?;
            write(&dir.join("synth_hist_relevant.csv"), &study.relevant_histogram.to_csv())?;
            write(&dir.join("synth_hist_noisy.csv"), &study.noisy_histogram.to_csv())?;
            write(&dir.join("synth.json"), &to_json(&study))?;
            println!("relevant_recall {:.6}\nnoisy_removal {:.6}", study.relevant_recall, study.noisy_removal);
            Ok(EXIT_OK)
        }
        Command::Serve { common, bind } => {
            let ctx = Session::load(&common)?;
            let app = service::router(ctx.app.pipeline.clone(), ctx.backend()?, ctx.app.service.request_timeout);
            let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
            tracing::info!(%bind, "serving");
            eprintln!("listening on http://{}", listener.local_addr()?);
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
            Ok(EXIT_OK)
        }
        Command::DemoData { common, queries, docs_per_query } => {
            let ctx = Session::load(&common)?;
            if docs_per_query < 2 {
                bail!("--docs-per-query must be at least 2");
            }
            let spec = CorpusSpec { queries, docs_per_query, seed: ctx.seed.unwrap_or(DEFAULT_SEED) };
            let (data, script) = position_sensitive_corpus(spec);
            let dir = ctx.out_dir("demo")?;
            write(&dir.join("dataset.jsonl"), &data.to_jsonl())?;
            write(&dir.join("mock_script.json"), &(script.to_json() + "\n"))?;
            write(&dir.join("mock.toml"), "n = 0.0\norder_mode = \"descending\"\n\n[backend]\nkind = \"mock\"\nscript = \"mock_script.json\"\n")?;
            println!("wrote {}", dir.display());
            Ok(EXIT_OK)
        }
    }
}
