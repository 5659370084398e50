use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use vidsearch_core::engine::{Engine, EngineConfig, Mode, Overrides, SearchRequest};
use vidsearch_core::eval_harness::{self, KSet};
use vidsearch_core::model_clients::{EchoLlm, HttpLlm, LlmClient, RetryPolicy, Retrying};
use vidsearch_core::ocr_refine::{read_ocr_file, refine_batch, write_ocr_file, OcrRecord, DEFAULT_BATCH_SIZE};
use vidsearch_cli::server::{self, AppState};

#[derive(Parser)]
#[command(name = "vidsearch", version, about = "Multimodal keyframe retrieval over video collections")]
struct Cli {
    /// Engine configuration file (TOML). Defaults to $ENGINE_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use mock model clients (overrides config and $MOCK_MODE).
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    llm_endpoint: Option<String>,
    #[arg(long, global = true)]
    img_search_endpoint: Option<String>,
    #[arg(long, global = true)]
    embed_endpoint: Option<String>,
    /// Groups (`L01`) or videos (`L01/V003`) to keep; repeatable.
    #[arg(long, global = true)]
    include: Vec<String>,
    /// Groups or videos to drop; repeatable.
    #[arg(long, global = true)]
    exclude: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build all indices and print the ingest report as JSON.
    Ingest,
    /// Run one search and print `key<TAB>score` lines.
    Search {
        #[arg(long)]
        mode: String,
        /// Query text. Temporal mode takes one step per line unless --step is used.
        #[arg(long)]
        query: Option<String>,
        /// Ordered temporal steps; repeatable.
        #[arg(long = "step")]
        steps: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Print the full JSON response instead of lines.
        #[arg(long)]
        json: bool,
    },
    /// Score a submission file against ground truth.
    Eval {
        #[arg(long)]
        submission: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20,50,100")]
        ks: Vec<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Accept POST /api/ingest and swap in the rebuilt indices.
        #[arg(long)]
        allow_reingest: bool,
    },
    /// Correct OCR text in batches through the LLM and write the refined file.
    RefineOcr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Write the synthetic demo corpus and its engine.toml into a directory.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(cli: &Cli) -> Result<EngineConfig> {
    let mut cfg = EngineConfig::layered(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    if cli.mock {
        cfg.mock_mode = true;
    }
    for (flag, slot) in [
        (&cli.llm_endpoint, &mut cfg.clients.llm_endpoint),
        (&cli.img_search_endpoint, &mut cfg.clients.img_search_endpoint),
        (&cli.embed_endpoint, &mut cfg.clients.embed_endpoint),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if !cli.include.is_empty() {
        cfg.include.clone_from(&cli.include);
    }
    if !cli.exclude.is_empty() {
        cfg.exclude.clone_from(&cli.exclude);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest => {
            let engine = Engine::ingest(config(&cli)?)?;
            let out = serde_json::json!({ "report": engine.report(), "capabilities": engine.capabilities() });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Search { mode, query, steps, k, json } => {
            let engine = Engine::ingest(config(&cli)?)?;
            let req = SearchRequest {
                mode: mode.clone(),
                query: query.clone(),
                queries: (!steps.is_empty()).then(|| steps.clone()),
                k: *k,
                overrides: Overrides::default(),
            };
            let resp = engine.search(&req)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&resp)?);
            } else if resp.mode == Mode::Temporal {
                for v in &resp.videos {
                    println!("{}\t{}", v.video, v.score);
                }
            } else {
                for r in &resp.results {
                    println!("{}\t{}", r.key, r.score);
                }
            }
            for w in &resp.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Eval { submission, ground_truth, ks } => {
            let ks = KSet::new(ks.clone())?;
            let sub = eval_harness::parse_submission(submission)?;
            let truth = eval_harness::parse_ground_truth(ground_truth)?;
            let report = eval_harness::evaluate(&sub, &truth, &ks)?;
            for q in &report.per_query {
                println!("{}\t{}", q.query_id, q.score);
            }
            println!("mean\t{}", report.mean);
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Serve { addr, allow_reingest } => {
            let engine = Engine::ingest(config(&cli)?)?;
            let state = AppState::new(engine, *allow_reingest);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(server::serve(state, *addr))?;
        }
        Command::RefineOcr { input, output, batch_size, parallelism } => {
            if *batch_size == 0 || *parallelism == 0 {
                bail!("batch size and parallelism must be >= 1");
            }
            let cfg = config(&cli)?;
            let llm: Box<dyn LlmClient> = match (&cfg.clients.llm_endpoint, cfg.mock_mode) {
                (Some(url), false) => Box::new(Retrying::new(
                    HttpLlm::new(url.clone(), cfg.clients.llm_api_key.clone().unwrap_or_default())?,
                    RetryPolicy::default(),
                )),
                (None, false) => bail!("refine-ocr needs an LLM endpoint or --mock"),
                (_, true) => Box::new(EchoLlm),
            };
            let records = read_ocr_file(input)?;
            let entries = records.iter().map(OcrRecord::to_entry).collect::<Result<Vec<_>, _>>()?;
            let outcome = refine_batch(entries, llm.as_ref(), *batch_size, *parallelism);
            for f in &outcome.failures {
                eprintln!("warning: {f:?}");
            }
            let refined: Vec<OcrRecord> = outcome.entries.iter().map(OcrRecord::from_entry).collect();
            write_ocr_file(output, &refined)?;
            eprintln!("refined {} entries with {} LLM calls", refined.len(), outcome.llm_calls);
        }
        Command::GenFixture { out } => {
            let info = vidsearch_core::fixture::write_fixture(out)
                .with_context(|| format!("writing fixture to {}", out.display()))?;
            println!("{}", info.config_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
