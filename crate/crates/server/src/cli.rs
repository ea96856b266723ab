//! Command-line entry point. Exit codes: 0 success, 1 operational failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use medbrain_core::dataset::{
    clean_dialogues, read_dialogues_jsonl, read_exclusion_list, split_dialogues, to_instruction_format,
    write_dialogues_jsonl, write_instruction_file, NoopPass, TrainConfig, TrainConfigOverrides,
    DEFAULT_INSTRUCTION, DEFAULT_MIN_DOCTOR_CHARS,
};
use medbrain_core::evaluator::{
    evaluate_run, read_pairs_jsonl, EmbeddingProvider, OneHotTestProvider, RemoteEmbeddingProvider,
};
use medbrain_core::kb_store::{check_unique_ids, documents_from_records, parse_disease_db};
use medbrain_core::retriever::chunk_document;
use medbrain_core::Session;

use crate::config::{BackendConfig, ServiceConfig};
use crate::http::{self, AnswerPayload, AppState};
use crate::sessions::SessionRegistry;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

type Failure = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "medbrain", version, about = "Knowledge-grounded medical question answering")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Service configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Use the scripted backend with this rules file (repeatable).
    #[arg(long, global = true, value_name = "PATH")]
    pub scripted: Vec<PathBuf>,
    /// Disease database file (repeatable); replaces configured files.
    #[arg(long = "db", global = true, value_name = "PATH")]
    pub db: Vec<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub top_n: Option<usize>,
    #[arg(long, global = true, value_name = "K")]
    pub section_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate disease database files and report how they index.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Answer one question.
    Ask {
        question: String,
        /// Skip retrieval and answer from the model alone.
        #[arg(long)]
        no_brain: bool,
    },
    /// Interactive question loop on the terminal.
    Chat {
        #[arg(long)]
        no_brain: bool,
    },
    /// Run the HTTP service.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
        #[arg(long, value_name = "DIR")]
        session_dir: Option<PathBuf>,
    },
    /// Drop excluded and short dialogues and mask identifiers.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// File of dialogue ids to drop, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MIN_DOCTOR_CHARS)]
        min_chars: usize,
    },
    /// Convert dialogues to instruction-tuning records.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = DEFAULT_INSTRUCTION)]
        instruction: String,
    },
    /// Stratified train/test split by specialty.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit the fine-tuning hyperparameter file.
    TrainConfig {
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrideArgs,
    },
    /// Score two systems against shared references and compare them.
    Eval {
        #[arg(long, value_name = "PATH")]
        a: PathBuf,
        #[arg(long, value_name = "PATH")]
        b: PathBuf,
        #[arg(long, default_value = "A")]
        label_a: String,
        #[arg(long, default_value = "B")]
        label_b: String,
        /// Embedding service base URL; without it the exact-match test
        /// provider is used.
        #[arg(long, value_name = "URL")]
        embeddings: Option<String>,
        #[arg(long)]
        embeddings_model: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainOverrideArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub total_batch_size: Option<i64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub epochs: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    pub max_sequence_length: Option<i64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(matches!(cli.command, Command::Serve { .. }));
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn init_logging(serving: bool) {
    let default = if serving { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Configuration file (or defaults) with command-line overrides applied.
pub fn effective_config(g: &GlobalOpts) -> Result<ServiceConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if !g.scripted.is_empty() {
        cfg.backend = BackendConfig::Scripted {
            rules: g.scripted.clone(),
        };
    }
    if !g.db.is_empty() {
        cfg.sources.offline_db_paths = g.db.clone();
    }
    if let Some(n) = g.top_n {
        cfg.retrieval.top_n = n;
    }
    if let Some(k) = g.section_size {
        cfg.retrieval.section_size = k;
    }
    Ok(cfg)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { files } => ingest(g, &files),
        Command::Ask { question, no_brain } => ask(g, &question, !no_brain),
        Command::Chat { no_brain } => chat(g, !no_brain),
        Command::Serve { listen, session_dir } => serve(g, listen, session_dir),
        Command::Clean {
            input,
            output,
            exclude,
            min_chars,
        } => clean(g, &input, &output, exclude.as_deref(), min_chars),
        Command::Convert {
            input,
            output,
            instruction,
        } => convert(g, &input, &output, &instruction),
        Command::Split {
            input,
            train,
            test,
            test_fraction,
            seed,
        } => split(g, &input, &train, &test, test_fraction, seed),
        Command::TrainConfig { output, overrides } => train_config(g, output.as_deref(), overrides),
        Command::Eval {
            a,
            b,
            label_a,
            label_b,
            embeddings,
            embeddings_model,
        } => eval(g, &a, &b, &label_a, &label_b, embeddings, embeddings_model),
    }
}

fn ingest(g: &GlobalOpts, files: &[PathBuf]) -> Result<(), Failure> {
    let section_size = effective_config(g)?.retrieval.section_size;
    if section_size == 0 {
        return Err("section size must be at least 1".into());
    }
    let mut docs = Vec::new();
    let mut per_file = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let records = parse_disease_db(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        per_file.push(json!({ "path": path, "records": records.len() }));
        docs.extend(documents_from_records(&records)?);
    }
    check_unique_ids(&docs)?;
    let indexed: Vec<_> = docs
        .iter()
        .map(|d| json!({ "doc_id": d.doc_id, "title": d.title, "sections": chunk_document(d, section_size).len() }))
        .collect();
    if g.json {
        return print_json(&json!({ "files": per_file, "section_size": section_size, "documents": indexed }));
    }
    let mut out = std::io::stdout().lock();
    for d in &indexed {
        writeln!(out, "{}\t{}\t{} sections", d["doc_id"].as_str().unwrap_or_default(), d["title"].as_str().unwrap_or_default(), d["sections"])?;
    }
    writeln!(out, "{} documents from {} files", indexed.len(), files.len())?;
    Ok(())
}

fn ask(g: &GlobalOpts, question: &str, use_brain: bool) -> Result<(), Failure> {
    let brain = effective_config(g)?.build_brain()?;
    let answer = runtime()?.block_on(brain.ask(question, use_brain))?;
    let payload = AnswerPayload::from(answer);
    if g.json {
        return print_json(&payload);
    }
    println!("{}", payload.answer);
    report_sources(&payload);
    Ok(())
}

/// Evidence and disclaimer go to stderr so stdout holds only the answer.
fn report_sources(p: &AnswerPayload) {
    if p.used_brain {
        for e in &p.evidence {
            eprintln!("[source] {} section {} (score {})", e.doc_id, e.section_index, e.score);
        }
    } else {
        eprintln!("[unverified] answered from model prior knowledge");
    }
    eprintln!("[{}]", p.disclaimer);
}

fn chat(g: &GlobalOpts, use_brain: bool) -> Result<(), Failure> {
    let brain = effective_config(g)?.build_brain()?;
    let rt = runtime()?;
    let mut session = Session::new();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    loop {
        if !g.json {
            write!(out, "you> ")?;
            out.flush()?;
        }
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let question = line.trim();
        if question.is_empty() {
            continue;
        }
        if matches!(question, "/quit" | "/exit") {
            break;
        }
        match rt.block_on(session.post_message(&brain, question, use_brain)) {
            Ok(turn) => {
                let payload = AnswerPayload::from(turn.answer.clone());
                if g.json {
                    writeln!(out, "{}", serde_json::to_string(&payload)?)?;
                } else {
                    writeln!(out, "doctor> {}", payload.answer)?;
                    report_sources(&payload);
                }
            }
            Err(e) => eprintln!("error: {e}"),
        }
    }
    Ok(())
}

fn serve(g: &GlobalOpts, listen: Option<String>, session_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = effective_config(g)?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if let Some(d) = session_dir {
        cfg.session_dir = d;
    }
    let brain = cfg.build_brain()?;
    let sessions = SessionRegistry::open(&cfg.session_dir)?;
    let addr = cfg.listen_addr()?;
    runtime()?.block_on(async move {
        let listener = http::bind(addr).await.map_err(|e| format!("cannot bind {addr}: {e}"))?;
        let bound = listener.local_addr()?;
        tracing::info!(
            documents = brain.corpus().len(),
            backend = brain.gateway().backend_id(),
            sessions = sessions.len().await,
            "service ready"
        );
        println!("listening on http://{bound}");
        std::io::stdout().flush()?;
        let state = AppState {
            brain: Arc::new(brain),
            sessions: Arc::new(sessions),
        };
        http::serve_on(listener, state, shutdown_signal()).await?;
        tracing::info!("shut down");
        Ok::<(), Failure>(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    Ok(BufReader::new(File::open(path).map_err(|e| format!("{}: {e}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path).map_err(|e| format!("{}: {e}", path.display()))?))
}

fn clean(g: &GlobalOpts, input: &Path, output: &Path, exclude: Option<&Path>, min_chars: usize) -> Result<(), Failure> {
    let dialogues = read_dialogues_jsonl(open(input)?)?;
    let excluded = match exclude {
        Some(p) => read_exclusion_list(p)?,
        None => Default::default(),
    };
    let (kept, report) = clean_dialogues(dialogues, min_chars, &excluded, &NoopPass);
    let mut w = create(output)?;
    write_dialogues_jsonl(&mut w, &kept)?;
    w.flush()?;
    let summary = json!({
        "input": report.input,
        "excluded": report.excluded,
        "too_short": report.too_short,
        "kept": report.kept,
    });
    if g.json {
        print_json(&summary)
    } else {
        println!(
            "{} dialogues: {} excluded, {} too short, {} kept",
            report.input, report.excluded, report.too_short, report.kept
        );
        Ok(())
    }
}

fn convert(g: &GlobalOpts, input: &Path, output: &Path, instruction: &str) -> Result<(), Failure> {
    let dialogues = read_dialogues_jsonl(open(input)?)?;
    let records = dialogues
        .iter()
        .map(|d| to_instruction_format(d, instruction))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = create(output)?;
    write_instruction_file(&mut w, &records)?;
    w.flush()?;
    if g.json {
        print_json(&json!({ "records": records.len() }))
    } else {
        println!("{} records written to {}", records.len(), output.display());
        Ok(())
    }
}

fn split(g: &GlobalOpts, input: &Path, train: &Path, test: &Path, fraction: f64, seed: u64) -> Result<(), Failure> {
    let dialogues = read_dialogues_jsonl(open(input)?)?;
    let (tr, te) = split_dialogues(&dialogues, fraction, seed)?;
    for (path, part) in [(train, &tr), (test, &te)] {
        let mut w = create(path)?;
        write_dialogues_jsonl(&mut w, part)?;
        w.flush()?;
    }
    if g.json {
        print_json(&json!({ "train": tr.len(), "test": te.len(), "seed": seed }))
    } else {
        println!("{} train, {} test (seed {seed})", tr.len(), te.len());
        Ok(())
    }
}

fn train_config(g: &GlobalOpts, output: Option<&Path>, o: TrainOverrideArgs) -> Result<(), Failure> {
    let cfg = TrainConfig::with_overrides(&TrainConfigOverrides {
        total_batch_size: o.total_batch_size,
        learning_rate: o.learning_rate,
        epochs: o.epochs,
        max_sequence_length: o.max_sequence_length,
        warmup_ratio: o.warmup_ratio,
        weight_decay: o.weight_decay,
    })?;
    let text = cfg.to_file_text();
    match output {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| format!("{}: {e}", path.display()))?;
            if g.json {
                print_json(&cfg)?;
            }
        }
        None if g.json => print_json(&cfg)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn eval(
    g: &GlobalOpts,
    a: &Path,
    b: &Path,
    label_a: &str,
    label_b: &str,
    embeddings: Option<String>,
    model: Option<String>,
) -> Result<(), Failure> {
    let pairs_a = read_pairs_jsonl(open(a)?)?;
    let pairs_b = read_pairs_jsonl(open(b)?)?;
    let provider: Box<dyn EmbeddingProvider> = match embeddings {
        Some(url) => Box::new(RemoteEmbeddingProvider::new(url, model)?),
        None => Box::new(OneHotTestProvider::default()),
    };
    let report = evaluate_run(&pairs_a, &pairs_b, provider.as_ref(), label_a, label_b)?;
    if g.json {
        print_json(&report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}
