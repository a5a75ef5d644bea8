//! `eca`: corpus statistics, index building, captioning, pipeline runs and
//! scoring from the command line.
//!
//! Results go to stdout, diagnostics to stderr. Exit status is 0 on success,
//! 1 on usage, config or input errors and 2 when a run finished with
//! per-utterance failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use eca_core::config::{execute, open_backend, BackendConfig, BackendHandle, BackendKind, RunConfig};
use eca_core::corpus::{compute_stats, load_corpus, Conversation, CorpusFormat, DatasetStats};
use eca_core::evaluation::{
    analyze_errors, confusion, emit_report, emotion_maps, gold_pair_sets, predicted_pair_sets, score_pairs,
    EvaluationReport, ReportFormat,
};
use eca_core::gateway::RetryPolicy;
use eca_core::montage::{caption_conversation, save_captions, CaptionCache, CaptionConfig, MontageError};
use eca_core::pipeline::{Approach, PipelineConfig, PredictionDocument};
use eca_core::prompting::{CharHeuristic, Demonstration, PromptBuilder, PromptMode, RenderedPrompt};
use eca_core::retrieval::{build_cause_indices, build_conversation_index, save_cause_indices, GatewayEmbedder};
use eca_core::windowing::extract_window;
use serde_json::json;

#[derive(Parser)]
#[command(name = "eca", version, about = "Emotion-cause pair extraction in conversations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Model backend, overriding the config file
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Cassette file for replay and record
    #[arg(long, global = true, value_name = "PATH")]
    cassette: Option<PathBuf>,
    /// Where output files go (default: the config's output_dir, else `out`)
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// More log output on stderr; repeat for debug
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[arg(long, global = true, value_name = "N")]
    max_concurrent: Option<usize>,
    #[arg(long, global = true, value_name = "MS")]
    min_interval_ms: Option<u64>,
    /// Base URL of the OpenAI-compatible API
    #[arg(long, global = true, value_name = "URL")]
    base_url: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Replay,
    Record,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApproachArg {
    Finetuned,
    Icl,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexKind {
    Conversation,
    Cause,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics as JSON plus emotion and relative-position CSVs
    Stats { corpus: PathBuf },
    /// Embed training data into retrieval indices
    BuildIndex {
        #[arg(long, value_enum)]
        kind: IndexKind,
        #[arg(long)]
        train: PathBuf,
        /// Conversation ids for the conversation index (default: all)
        #[arg(long, value_delimiter = ',')]
        select: Vec<String>,
        #[arg(long, default_value = "text-embedding-ada-002")]
        embedding_model: String,
    },
    /// Describe utterance videos and cache one caption per conversation
    Caption {
        corpus: PathBuf,
        /// Base directory for relative video references
        #[arg(long)]
        media_root: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Also write every montage grid as PNG under <out-dir>/grids
        #[arg(long)]
        dump_grids: bool,
        /// Only these conversation ids
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Run the two-step pipeline described by a config file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        approach: Option<ApproachArg>,
        #[arg(long)]
        no_self_causes: bool,
        /// Feed gold emotions to the cause step
        #[arg(long)]
        use_gold_emotions: bool,
    },
    /// Score predictions against a gold corpus
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Print the prompts a config would send for one conversation
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        conversation: String,
        #[arg(long)]
        utterance: Option<u32>,
        /// Show template, token estimate and budget flags for each prompt
        #[arg(long)]
        debug: bool,
    },
    /// Print the context window of every utterance
    Windows {
        corpus: PathBuf,
        #[arg(long)]
        conversation: Option<String>,
    },
    /// List wrong emotions and missed or spurious pairs
    AnalyzeErrors {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: AnalysisFormat,
    },
}

impl Global {
    fn backend(&self, mut config: BackendConfig) -> BackendConfig {
        if let Some(kind) = self.backend {
            config.kind = match kind {
                BackendArg::Http => BackendKind::Http,
                BackendArg::Replay => BackendKind::Replay,
                BackendArg::Record => BackendKind::Record,
            };
        }
        if let Some(c) = &self.cassette {
            config.cassette = Some(c.clone());
        }
        if let Some(n) = self.max_concurrent {
            config.max_concurrent = n;
        }
        if let Some(ms) = self.min_interval_ms {
            config.min_interval_ms = ms;
        }
        if let Some(url) = &self.base_url {
            config.base_url = url.clone();
        }
        config
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Backend for commands without a config file.
    fn open(&self) -> Result<(BackendConfig, BackendHandle)> {
        let config = self.backend(BackendConfig::default());
        match (config.kind, &config.cassette) {
            (BackendKind::Replay, None) => bail!("the replay backend needs --cassette (or pass --backend http)"),
            (BackendKind::Replay, Some(p)) if !p.exists() => bail!("cassette {} does not exist", p.display()),
            (BackendKind::Record, None) => bail!("the record backend needs --cassette"),
            _ => {}
        }
        let handle = open_backend(&config)?;
        Ok((config, handle))
    }
}

/// A run that produced its output but not cleanly.
struct Degraded(usize);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("ECA_LOG")
        .init();

    match dispatch(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Degraded(n))) => {
            eprintln!("eca: finished with {n} failure(s); see the run log");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("eca: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain, skipping causes whose text a parent already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn dispatch(cli: &Cli) -> Result<Option<Degraded>> {
    let g = &cli.global;
    match &cli.command {
        Command::Stats { corpus } => cmd_stats(g, corpus).map(|_| None),
        Command::BuildIndex {
            kind,
            train,
            select,
            embedding_model,
        } => cmd_build_index(g, *kind, train, select, embedding_model).map(|_| None),
        Command::Caption {
            corpus,
            media_root,
            batch_size,
            dump_grids,
            only,
        } => cmd_caption(g, corpus, media_root.clone(), *batch_size, *dump_grids, only),
        Command::Run {
            config,
            approach,
            no_self_causes,
            use_gold_emotions,
        } => cmd_run(g, config, *approach, *no_self_causes, *use_gold_emotions),
        Command::Evaluate { gold, pred, format } => cmd_evaluate(g, gold, pred, *format).map(|_| None),
        Command::Render {
            config,
            conversation,
            utterance,
            debug,
        } => cmd_render(config, conversation, *utterance, *debug).map(|_| None),
        Command::Windows { corpus, conversation } => cmd_windows(corpus, conversation.as_deref()).map(|_| None),
        Command::AnalyzeErrors { gold, pred, format } => cmd_analyze(gold, pred, *format).map(|_| None),
    }
}

fn corpus(path: &Path) -> Result<Vec<Conversation>> {
    Ok(load_corpus(path, CorpusFormat::NativeJson)?)
}

fn predictions(path: &Path) -> Result<PredictionDocument> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PredictionDocument::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn stats_csvs(stats: &DatasetStats) -> (String, String) {
    let mut emotions = String::from("emotion,count,fraction\n");
    for (label, n) in &stats.emotion_histogram {
        let frac = if stats.n_utterances == 0 {
            0.0
        } else {
            *n as f64 / stats.n_utterances as f64
        };
        let _ = writeln!(emotions, "{label},{n},{frac:.4}");
    }
    let mut positions = String::from("offset,count,fraction\n");
    for (offset, n) in &stats.relative_position_histogram {
        let frac = if stats.n_pairs == 0 {
            0.0
        } else {
            *n as f64 / stats.n_pairs as f64
        };
        let _ = writeln!(positions, "{offset},{n},{frac:.4}");
    }
    (emotions, positions)
}

fn cmd_stats(g: &Global, path: &Path) -> Result<()> {
    let stats = compute_stats(&corpus(path)?)?;
    let mut value = serde_json::to_value(&stats)?;
    value["self_cause_fraction"] = json!(stats.self_cause_fraction());
    value["later_cause_fraction"] = json!(stats.later_cause_fraction());
    value["recent_cause_fraction"] = json!(stats.recent_cause_fraction());
    let text = serde_json::to_string_pretty(&value)? + "\n";

    let out = g.out_dir();
    let (emotions, positions) = stats_csvs(&stats);
    write(&out.join("stats.json"), &text)?;
    write(&out.join("emotion_distribution.csv"), &emotions)?;
    write(&out.join("relative_position.csv"), &positions)?;
    log::info!("wrote stats files to {}", out.display());
    print!("{text}");
    Ok(())
}

fn cmd_build_index(g: &Global, kind: IndexKind, train: &Path, select: &[String], model: &str) -> Result<()> {
    let train = corpus(train)?;
    let (backend_config, handle) = g.open()?;
    let embedder = GatewayEmbedder::new(handle.backend.as_ref(), model);
    let out = g.out_dir();
    let summary = match kind {
        IndexKind::Conversation => {
            let selection: Vec<String> = if select.is_empty() {
                train.iter().map(|c| c.id.clone()).collect()
            } else {
                select.to_vec()
            };
            let (index, report) = build_conversation_index(&train, &selection, &embedder)?;
            let path = out.join("conversation.json");
            index.save(&path)?;
            json!({"kind": "conversation", "path": path, "records": report.records, "covered": report.covered})
        }
        IndexKind::Cause => {
            let indices = build_cause_indices(&train, &embedder)?;
            let dir = out.join("cause");
            save_cause_indices(&dir, &indices)?;
            let sizes: serde_json::Map<String, serde_json::Value> =
                indices.iter().map(|(k, v)| (k.to_string(), json!(v.len()))).collect();
            json!({"kind": "cause", "path": dir, "records": sizes})
        }
    };
    handle.persist(&backend_config)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_caption(
    g: &Global,
    path: &Path,
    media_root: Option<PathBuf>,
    batch_size: usize,
    dump_grids: bool,
    only: &[String],
) -> Result<Option<Degraded>> {
    let conversations = corpus(path)?;
    let (backend_config, handle) = g.open()?;
    let out = g.out_dir();
    let config = CaptionConfig {
        batch_size,
        media_root: media_root.or_else(|| path.parent().map(Path::to_path_buf)),
        dump_grids: dump_grids.then(|| out.join("grids")),
        limits: backend_config.limits(),
        retry: RetryPolicy::default(),
        ..CaptionConfig::default()
    };
    let templates = eca_core::prompting::TemplateSet::default();
    let builder = PromptBuilder::new(&templates, &CharHeuristic);

    let mut captions = CaptionCache::new();
    let mut failures = 0;
    for conv in conversations.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        match caption_conversation(conv, handle.backend.as_ref(), &builder, &config) {
            Ok(outcome) => {
                for (utt, reason) in &outcome.skipped {
                    log::warn!("{} utterance {utt}: {reason}", conv.id);
                }
                captions.insert(conv.id.clone(), outcome.caption);
            }
            Err(MontageError::NothingToCaption(id)) => log::info!("{id}: no readable video, no caption"),
            Err(e) => {
                log::error!("{}: {e}", conv.id);
                failures += 1;
            }
        }
    }
    let path = out.join("captions.json");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_captions(&path, &captions)?;
    handle.persist(&backend_config)?;
    println!("{}", path.display());
    Ok((failures > 0).then_some(Degraded(failures)))
}

fn cmd_run(
    g: &Global,
    path: &Path,
    approach: Option<ApproachArg>,
    no_self_causes: bool,
    use_gold_emotions: bool,
) -> Result<Option<Degraded>> {
    let mut config = RunConfig::parse(path)?;
    if let Some(a) = approach {
        let wanted = match a {
            ApproachArg::Finetuned => Approach::FinetunedChat,
            ApproachArg::Icl => Approach::Icl,
        };
        if wanted != config.pipeline.approach {
            // Switching approach also switches to that approach's models.
            let defaults = match wanted {
                Approach::FinetunedChat => PipelineConfig::default(),
                Approach::Icl => PipelineConfig::icl(),
            };
            config.pipeline = PipelineConfig {
                approach: wanted,
                emotion_model: defaults.emotion_model,
                cause_model: defaults.cause_model,
                use_video_captions: defaults.use_video_captions && config.captions.is_some(),
                ..config.pipeline
            };
        }
    }
    if no_self_causes {
        config.pipeline.add_self_causes = false;
    }
    if use_gold_emotions {
        config.pipeline.use_gold_emotions = true;
    }
    config.backend = g.backend(config.backend.clone());
    if let Some(dir) = &g.out_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;

    let handle = open_backend(&config.backend)?;
    log::info!(
        "running {} over {}",
        config.pipeline.approach,
        config.eval_corpus.display()
    );
    let outcome = execute(&config, &handle)?;
    handle.persist(&config.backend)?;

    let out = &config.output_dir;
    let predictions = out.join("predictions.json");
    write(&predictions, &outcome.document.to_json())?;
    let log_entry = json!({
        "config": path,
        "approach": config.pipeline.approach,
        "conversations": outcome.document.conversations.len(),
        "cassette": config.backend.cassette,
        "failures": outcome.failures,
    });
    write(
        &out.join("run_log.json"),
        &(serde_json::to_string_pretty(&log_entry)? + "\n"),
    )?;
    for f in &outcome.failures {
        log::warn!(
            "{} utterance {:?} ({:?}): {}",
            f.conversation_id,
            f.utterance_id,
            f.step,
            f.message
        );
    }
    println!("{}", predictions.display());
    let n = outcome.failures.len();
    Ok((n > 0).then_some(Degraded(n)))
}

fn cmd_evaluate(g: &Global, gold_path: &Path, pred_path: &Path, format: FormatArg) -> Result<()> {
    let gold = corpus(gold_path)?;
    let doc = predictions(pred_path)?;
    let pairs = score_pairs(&gold_pair_sets(&gold), &predicted_pair_sets(&doc))?;
    let (g_emotions, p_emotions) = emotion_maps(&gold, &doc)?;
    let matrix = confusion(&g_emotions, &p_emotions)?;
    let stats = compute_stats(&gold).ok();
    let report = EvaluationReport::new(pairs, Some(matrix), stats);
    let (format, ext) = match format {
        FormatArg::Json => (ReportFormat::Json, "json"),
        FormatArg::Csv => (ReportFormat::Csv, "csv"),
        FormatArg::Markdown => (ReportFormat::Markdown, "md"),
    };
    let text = emit_report(&report, format);
    if let Some(dir) = &g.out_dir {
        write(&dir.join(format!("report.{ext}")), &text)?;
    }
    let m = report.pairs.micro;
    let b = &report.pairs.breakdown;
    print!("{text}");
    println!("P: {:.4} / R: {:.4}", m.precision, m.recall);
    println!("F1: {:.4} / w-avg F1: {:.4}", m.f1, b.weighted_f1);
    Ok(())
}

fn show(out: &mut String, heading: &str, prompt: &RenderedPrompt, debug: bool) {
    if debug {
        let _ = writeln!(
            out,
            "=== {heading} [{}] tokens~{} windowed={} over_budget={}",
            prompt.template, prompt.token_estimate, prompt.windowed, prompt.over_budget
        );
    } else {
        let _ = writeln!(out, "=== {heading}");
    }
    let _ = writeln!(out, "{}\n", prompt.text);
}

fn cmd_render(path: &Path, conversation_id: &str, utterance: Option<u32>, debug: bool) -> Result<()> {
    let config = RunConfig::parse(path)?;
    let conversations = config.eval()?;
    let conv = conversations.iter().find(|c| c.id == conversation_id).ok_or_else(|| {
        anyhow!(
            "conversation {conversation_id} is not in {}",
            config.eval_corpus.display()
        )
    })?;
    let templates = config.templates()?;
    let captions = config.captions()?;
    let caption = captions.as_ref().and_then(|c| c.get(&conv.id)).map(String::as_str);
    let builder = PromptBuilder::new(&templates, &CharHeuristic);
    let mode = config.pipeline.mode();
    let placeholder = Demonstration {
        text: "(demonstration retrieved at run time)".into(),
        explanation: "(explanation generated at run time)".into(),
    };
    let demo = (mode == PromptMode::GptIcl).then_some(&placeholder);
    let targets: Vec<u32> = match utterance {
        Some(u) => vec![u],
        None => conv.ids().collect(),
    };

    let mut out = String::new();
    if debug {
        for (name, version) in templates.versions() {
            let _ = writeln!(out, "# template {name} {version}");
        }
        let _ = writeln!(out);
    }
    for &t in &targets {
        let prompt = builder.emotion_prompt(conv, t, mode, demo, caption, None)?;
        show(&mut out, &format!("emotion prompt, utterance {t}"), &prompt, debug);
    }
    // Cause prompts need labels; the gold ones stand in for predictions.
    if let Some(gold) = conv.gold_emotions() {
        for &t in targets.iter().filter(|t| gold.get(t).is_some_and(|l| !l.is_neutral())) {
            let scope = match mode {
                PromptMode::Llama => None,
                PromptMode::GptIcl => Some(extract_window(conv, t)?),
            };
            let prompt = builder.cause_prompt(conv, scope.as_ref(), t, &gold, mode, demo, caption)?;
            show(
                &mut out,
                &format!("cause prompt, utterance {t} (gold emotions)"),
                &prompt,
                debug,
            );
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_windows(path: &Path, only: Option<&str>) -> Result<()> {
    let conversations = corpus(path)?;
    if let Some(id) = only {
        if !conversations.iter().any(|c| c.id == id) {
            bail!("conversation {id} is not in {}", path.display());
        }
    }
    let mut out = String::from("conversation\tutterance\tposition\tfirst\tlast\tlength\n");
    for conv in conversations.iter().filter(|c| only.is_none_or(|id| c.id == id)) {
        for t in conv.ids() {
            let w = extract_window(conv, t)?;
            let _ = writeln!(
                out,
                "{}\t{t}\t{}\t{}\t{}\t{}",
                conv.id,
                w.position,
                w.first_utt_id,
                w.last_utt_id,
                w.len()
            );
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_analyze(gold_path: &Path, pred_path: &Path, format: AnalysisFormat) -> Result<()> {
    let gold = corpus(gold_path)?;
    let doc = predictions(pred_path)?;
    let analysis = analyze_errors(&gold, &doc)?;
    match format {
        AnalysisFormat::Json => println!("{}", serde_json::to_string_pretty(&analysis)?),
        AnalysisFormat::Text => {
            let mut out = String::new();
            for c in &analysis.conversations {
                let _ = writeln!(out, "{}", c.conversation_id);
                for (u, g, p) in &c.emotion_errors {
                    let _ = writeln!(out, "  emotion  u{u}: gold {g}, predicted {p}");
                }
                for [e, c] in &c.missed_pairs {
                    let _ = writeln!(out, "  missed   ({e}, {c})");
                }
                for [e, c] in &c.spurious_pairs {
                    let _ = writeln!(out, "  spurious ({e}, {c})");
                }
            }
            let _ = writeln!(
                out,
                "emotion errors: {}, missed pairs: {} ({} after a neutral prediction), spurious pairs: {} ({} on gold-neutral utterances)",
                analysis.emotion_errors,
                analysis.missed_pairs,
                analysis.missed_after_neutral,
                analysis.spurious_pairs,
                analysis.spurious_on_neutral
            );
            for (confusion, n) in &analysis.confusions {
                let _ = writeln!(out, "  {confusion}: {n}");
            }
            print!("{out}");
        }
    }
    Ok(())
}
