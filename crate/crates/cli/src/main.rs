//! Command-line front end: corpus preparation, embedding training, dataset
//! tools, model training and prediction, transfer, evaluation and plans.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use actpred::corpus::{self, build_vocabulary, corpus_stats, coverage, WordCorpus};
use actpred::embedding::{
    build_cooccurrence, train_context_embeddings, train_cooc_embeddings, CbowParams, CoocParams, EmbeddingTable,
};
use actpred::evaluation::{self, cross_validate, load_reports, render_reports, save_reports, Pipeline};
use actpred::exec::with_threads;
use actpred::network::{train, EmbedMode, Model, TrainConfig};
use actpred::plan::{paper_grid_counts, paper_plan, run_plan, PaperOptions, Plan};
use actpred::procdata::{
    dataset_stats, generate_pair, generate_synthetic, make_window, shared_proportion, Dataset, Level, SyntheticConfig,
};
use actpred::transfer::{export_weights, init_from_transfer, mix_datasets, TransferBundle};
use actpred::{Error, Exec};

#[derive(Parser)]
#[command(name = "actpred", version, about = "Next-activity prediction for surgical process models")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, inspect and fetch text corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train word embeddings.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Activity dataset tools.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a model on an activity file.
    Train(TrainArgs),
    /// Rank next-activity predictions at one position.
    Predict(PredictArgs),
    /// Export and reuse layers across datasets.
    #[command(subcommand)]
    Transfer(TransferCmd),
    /// Cross-validation and report comparison.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run experiment plans.
    #[command(subcommand)]
    Plan(PlanCmd),
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "ACTPRED_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Normalize a directory of documents into a corpus file.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
    },
    /// Token counts, optionally with coverage of a dataset's vocabulary.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        /// Activity file whose words are looked up in the corpus.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Download documents from a JSON search endpoint.
    Fetch {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        query: String,
        #[arg(long)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    Train {
        #[arg(long, value_parser = ["cooc", "cbow"])]
        method: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 100)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Dice overlap of two datasets, in percent.
    Shared {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "activity")]
        level: String,
    },
    /// Generate a synthetic dataset (and its partner, if configured).
    Synth {
        #[arg(long, conflicts_with = "profile")]
        config: Option<PathBuf>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        partner_out: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    Mix {
        #[arg(long = "in", required = true, num_args = 1)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mix")]
        name: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, requires = "embeddings")]
    embed_mode: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `intervention:index`; predicts the activity after `index`.
    #[arg(long)]
    at: String,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Subcommand)]
enum TransferCmd {
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source label stored in the bundle (defaults to the model file stem).
        #[arg(long)]
        source: Option<String>,
    },
    Init {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Report to compare against for delta and significance.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Delta, p-value and stars of report `a` against baseline `b`.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Subcommand)]
enum PlanCmd {
    Run {
        plan: PathBuf,
        /// Overrides the plan's global seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build (and run) the full study grid over six datasets.
    Paper {
        /// `label=path` activity files, labels like `acdf_l`; omitted labels
        /// fall back to synthetic profiles.
        #[arg(long = "data", value_parser = parse_labelled)]
        data: Vec<(String, PathBuf)>,
        /// Corpus files for the embedding runs.
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Small models and shortened synthetic data for a smoke run.
        #[arg(long)]
        quick: bool,
        /// Write the plan and print step counts without running it.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn parse_labelled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (l, p) = s.split_once('=').ok_or_else(|| format!("expected label=path, got '{s}'"))?;
    Ok((l.to_string(), PathBuf::from(p)))
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Corpus(c) => corpus_cmd(c, exec),
        Command::Embed(c) => embed_cmd(c, exec),
        Command::Data(c) => data_cmd(c),
        Command::Train(a) => train_cmd(a, exec),
        Command::Predict(a) => predict_cmd(a),
        Command::Transfer(c) => transfer_cmd(c),
        Command::Eval(c) => eval_cmd(c, exec),
        Command::Plan(c) => plan_cmd(c, exec, cli.jobs),
    }
}

fn corpus_cmd(cmd: CorpusCmd, exec: Exec) -> Result<()> {
    match cmd {
        CorpusCmd::Build { input, out, min_count } => {
            let docs = corpus::load_ingest_dir(&input)?;
            let name = input.file_name().map_or("corpus".into(), |n| n.to_string_lossy().into_owned());
            let c = WordCorpus::from_documents(&name, &docs, exec).filter_min_count(min_count);
            c.save(&out)?;
            let st = corpus_stats(&c);
            println!("documents\t{}\ntokens\t{}\nunique\t{}", docs.len(), st.total_tokens, st.unique_tokens);
        }
        CorpusCmd::Stats { input, data } => {
            let c = WordCorpus::load(&input)?;
            let st = corpus_stats(&c);
            println!("tokens\t{}\nunique\t{}", st.total_tokens, st.unique_tokens);
            if let Some(d) = data {
                let ds = Dataset::load(&d)?;
                println!("coverage\t{:.1}", coverage(&ds.word_vocab, &c)?);
            }
        }
        CorpusCmd::Fetch { endpoint, query, limit, out } => fetch(&endpoint, &query, limit, &out)?,
    }
    Ok(())
}

#[cfg(feature = "fetch")]
fn fetch(endpoint: &str, query: &str, limit: usize, out: &Path) -> Result<()> {
    let s = corpus::fetch_documents(endpoint, query, limit, out)?;
    println!("new\t{}\nskipped\t{}\nmalformed\t{}", s.new_documents, s.skipped_existing, s.malformed);
    Ok(())
}

#[cfg(not(feature = "fetch"))]
fn fetch(_: &str, _: &str, _: usize, _: &Path) -> Result<()> {
    Err(Error::Usage("this build has no network support (enable the 'fetch' feature)".into()).into())
}

fn embed_cmd(cmd: EmbedCmd, exec: Exec) -> Result<()> {
    let EmbedCmd::Train { method, corpus, dim, window, epochs, min_count, learning_rate, out, seed } = cmd;
    let c = WordCorpus::load(&corpus)?;
    let vocab = build_vocabulary(&c, min_count)?;
    let mut trained = if method == "cbow" {
        let mut p = CbowParams { dim, window, epochs, seed: seed.seed, ..Default::default() };
        if let Some(lr) = learning_rate {
            p.learning_rate = lr;
        }
        train_context_embeddings(&c, &vocab, &p)?
    } else {
        let x = build_cooccurrence(&c, &vocab, window, true, exec)?;
        let mut p = CoocParams { dim, epochs, seed: seed.seed, ..Default::default() };
        if let Some(lr) = learning_rate {
            p.learning_rate = lr;
        }
        train_cooc_embeddings(&x, &p)?
    };
    trained.table.corpus_tag = c.name.clone();
    trained.table.save(&out)?;
    for (i, l) in trained.epoch_loss.iter().enumerate() {
        log::info!("epoch {}: loss {l:.6}", i + 1);
    }
    println!("words\t{}\ndim\t{dim}\nfinal_loss\t{:.6}", vocab.len(), trained.epoch_loss.last().copied().unwrap_or(0.0));
    Ok(())
}

fn data_cmd(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Stats { input } => println!("{}", dataset_stats(&Dataset::load(&input)?)),
        DataCmd::Shared { a, b, level } => {
            let (a, b) = (Dataset::load(&a)?, Dataset::load(&b)?);
            let levels = if level == "all" {
                vec![Level::Activity, Level::Verb, Level::Instrument, Level::Structure]
            } else {
                vec![level.parse::<Level>()?]
            };
            for l in levels {
                println!("{}\t{:.1}", format!("{l:?}").to_lowercase(), shared_proportion(&a, &b, l));
            }
        }
        DataCmd::Synth { config, profile, out, partner_out, seed } => {
            let mut cfg = match (config, profile) {
                (Some(p), _) => SyntheticConfig::load(&p)?,
                (None, Some(name)) => SyntheticConfig::profile(&name)
                    .ok_or_else(|| Error::Usage(format!("unknown profile '{name}'")))?,
                (None, None) => bail!(Error::Usage("give --config or --profile".into())),
            };
            cfg.seed = seed.seed;
            match cfg.partner.take() {
                Some(mut partner) => {
                    partner.seed = actpred::seed::derive(seed.seed, "partner");
                    let ((a, _), (b, _)) = generate_pair(&cfg, &partner)?;
                    let pout = partner_out.unwrap_or_else(|| out.with_extension("partner.csv"));
                    a.save(&out)?;
                    b.save(&pout)?;
                    println!("{}\t{}\n{}\t{}", out.display(), a.sequences.len(), pout.display(), b.sequences.len());
                    println!("shared_activities\t{:.1}", shared_proportion(&a, &b, Level::Activity));
                }
                None => {
                    let (a, _) = generate_synthetic(&cfg)?;
                    a.save(&out)?;
                    println!("{}\t{}", out.display(), a.sequences.len());
                }
            }
        }
        DataCmd::Mix { inputs, out, name } => {
            let sets = inputs.iter().map(|p| Dataset::load(p)).collect::<actpred::Result<Vec<_>>>()?;
            let refs: Vec<&Dataset> = sets.iter().collect();
            let mix = mix_datasets(&name, &refs)?;
            mix.save(&out)?;
            println!("interventions\t{}\nunique_activities\t{}", mix.sequences.len(), mix.m());
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, exec: Exec) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let cfg = load_config(a.config.as_deref(), a.seed.seed)?;
    let mut model = Model::for_dataset(&ds, cfg)?;
    if let Some(e) = &a.embeddings {
        let mode = a.embed_mode.as_deref().unwrap_or("set_train").parse::<EmbedMode>()?;
        model.init_embedding_layer(&EmbeddingTable::load(e)?, mode)?;
    }
    let hist = train(&mut model, &ds, exec)?;
    model.save(&a.out)?;
    for (i, (l, acc)) in hist.epoch_loss.iter().zip(&hist.epoch_accuracy).enumerate() {
        log::info!("epoch {}: loss {l:.4} accuracy {acc:.1}%", i + 1);
    }
    println!(
        "epochs\t{}\nfinal_loss\t{:.4}\nfinal_train_accuracy\t{:.1}",
        hist.epoch_loss.len(),
        hist.epoch_loss.last().copied().unwrap_or(0.0),
        hist.epoch_accuracy.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds = Dataset::load(&a.data)?;
    let (id, idx) = a
        .at
        .rsplit_once(':')
        .ok_or_else(|| Error::Usage(format!("--at expects intervention:index, got '{}'", a.at)))?;
    let t: usize = idx.parse().map_err(|_| Error::Usage(format!("bad index '{idx}'")))?;
    let seq = ds
        .sequences
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Usage(format!("no intervention '{id}' in {}", a.data.display())))?;
    let w = make_window(seq, t, model.config.window_n)?;
    for (rank, (act, p)) in model.predict_next(&w)?.into_iter().take(a.top).enumerate() {
        println!("{}\t{p:.6}\t{act}", rank + 1);
    }
    Ok(())
}

fn transfer_cmd(cmd: TransferCmd) -> Result<()> {
    match cmd {
        TransferCmd::Export { model, out, source } => {
            let m = Model::load(&model)?;
            let label = source.unwrap_or_else(|| model.file_stem().map_or("source".into(), |s| s.to_string_lossy().into_owned()));
            let b = export_weights(&m, &label);
            b.save(&out)?;
            println!("source\t{label}\nwords\t{}\nembed_dim\t{}\nhidden\t{}", b.vocab.len(), b.embed_dim(), b.hidden());
        }
        TransferCmd::Init { bundle, data, config, embeddings, out, seed } => {
            let b = TransferBundle::load(&bundle)?;
            let ds = Dataset::load(&data)?;
            let cfg = load_config(config.as_deref(), seed.seed)?;
            let table = embeddings.as_deref().map(EmbeddingTable::load).transpose()?;
            let m = init_from_transfer(&b, &ds, cfg, table.as_ref())?;
            m.save(&out)?;
            println!("activities\t{}\nwords\t{}", m.m(), m.vocab.len());
        }
    }
    Ok(())
}

fn eval_cmd(cmd: EvalCmd, exec: Exec) -> Result<()> {
    match cmd {
        EvalCmd::Cv { data, pipeline, k, out, baseline, seed } => {
            let ds = Dataset::load(&data)?;
            let p = Pipeline::load(&pipeline)?;
            let mut report = cross_validate(&ds, &p, k, seed.seed, exec)?;
            if let Some(b) = baseline {
                let base = load_reports(&b)?.into_iter().next().context("baseline report is empty")?;
                report.compare_to(&base);
            }
            save_reports(&out, std::slice::from_ref(&report))?;
            print!("{}", summary_block(&report));
        }
        EvalCmd::Compare { a, b } => {
            let mut a = load_reports(&a)?.into_iter().next().context("report a is empty")?;
            let b = load_reports(&b)?.into_iter().next().context("report b is empty")?;
            a.compare_to(&b);
            print!("{}", summary_block(&a));
        }
    }
    Ok(())
}

fn summary_block(r: &evaluation::EvalReport) -> String {
    let text = render_reports(std::slice::from_ref(r));
    text.split("\n\n").nth(1).unwrap_or_default().to_string()
}

fn plan_cmd(cmd: PlanCmd, exec: Exec, jobs: usize) -> Result<()> {
    match cmd {
        PlanCmd::Run { plan, seed, out } => {
            let mut p = Plan::load(&plan)?;
            if let Some(s) = seed {
                p.seed = s;
            }
            if let Some(o) = out {
                p.out = o;
            }
            if jobs > 0 {
                p.jobs = jobs;
            }
            finish_plan(&p, exec)
        }
        PlanCmd::Paper { data, corpus, out, quick, dry_run, seed } => {
            let mut opts = PaperOptions::synthetic(seed.seed, Path::new("."));
            for (label, path) in data {
                let path = std::path::absolute(&path)?;
                match opts.datasets.iter_mut().find(|(l, _)| *l == label) {
                    Some(slot) => slot.1 = Some(path),
                    None => opts.datasets.push((label, Some(path))),
                }
            }
            opts.corpus = corpus.iter().map(std::path::absolute).collect::<std::io::Result<_>>()?;
            if quick {
                opts.synth_scale = Some((4, 0.15, 0.1));
                for (k, v) in [("epochs", "2"), ("hidden", "8"), ("embed_dim", "8"), ("pad_to", "6"), ("k", "2"), ("runs", "1")] {
                    opts.overrides.push((k.into(), v.into()));
                }
            }
            let text = paper_plan(&opts)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let plan_path = out.join("paper.plan");
            std::fs::write(&plan_path, &text).with_context(|| format!("writing {}", plan_path.display()))?;
            for (role, n) in paper_grid_counts(&text) {
                println!("{role}\t{n}");
            }
            if dry_run {
                println!("plan\t{}", plan_path.display());
                return Ok(());
            }
            let mut p = Plan::load(&plan_path)?;
            if jobs > 0 {
                p.jobs = jobs;
            }
            finish_plan(&p, exec)
        }
    }
}

fn finish_plan(p: &Plan, exec: Exec) -> Result<()> {
    let outcome = with_threads(p.jobs, || run_plan(p, exec))?;
    println!("summary\t{}", outcome.summary.display());
    for r in &outcome.reports {
        let delta = r.delta.map(|d| format!("{d:+.1}{}", r.stars)).unwrap_or_default();
        println!("{}\t{:.1}±{:.1}\t{delta}", r.config, r.mean, r.std);
    }
    if let Some((step, e)) = outcome.failure {
        return Err(anyhow::Error::new(e).context(format!("step '{step}' failed")));
    }
    Ok(())
}

/// Joins the context chain, skipping causes whose text the outer message already carries.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 1 for invalid input, 2 for runtime failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let jobs = cli.jobs;
    match with_threads(jobs, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
