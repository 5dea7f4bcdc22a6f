//! `leakaudit`: prepare data, train attack models, evaluate them, and sweep
//! exposure protection.

mod config;
mod plot;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use leakaudit::datamodel::{self, AttackExample, Vocabulary};
use leakaudit::ingestion::{self, InteractionLog, SyntheticConfig};
use leakaudit::metrics::{self, MrrMode};
use leakaudit::model::{self, AttackModel};
use leakaudit::protection::{self, EmbeddingProvider, ExternalEmbeddings, PopularityModel, ProtectionContext, ProtectionSettings};
use leakaudit::training;
use leakaudit::Error;

use config::TrainFile;

#[derive(Parser, Debug)]
#[command(name = "leakaudit", version, about = "Audit how much click history leaks through recommendation exposure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Mind,
    Zhihu,
    Synthetic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mrr {
    PerItem,
    FirstHit,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scope {
    Full,
    Window,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse raw logs (or generate a synthetic corpus), window them into
    /// attack examples and split users 8:1:1.
    Prepare {
        #[arg(long, value_enum)]
        format: Format,
        /// Raw input file; not used for `synthetic`.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "M", default_value_t = 5)]
        m: usize,
        #[arg(long = "N", default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_users: usize,
        #[arg(long, default_value_t = 500)]
        n_items: usize,
        #[arg(long, default_value_t = 20)]
        slates_per_user: usize,
        #[arg(long, default_value_t = 0.8)]
        signal: f64,
        #[arg(long, default_value_t = 1)]
        degree: usize,
    },
    /// Train one encoder/decoder pair from a key = value config file.
    Train {
        config: PathBuf,
        /// Overwrite an existing checkpoint.
        #[arg(long)]
        force: bool,
        /// Single-worker deterministic mode (the only mode implemented).
        #[arg(long)]
        deterministic: bool,
    },
    /// Attack metrics of a checkpoint on a prepared split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Mrr::PerItem)]
        mrr: Mrr,
        /// Metrics CSV; defaults to `<model>/metrics_<split>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-example table here.
        #[arg(long)]
        per_example: Option<PathBuf>,
    },
    /// Sweep the protection grid and write the trade-off CSV and plots.
    Protect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
        l_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "random,similarity")]
        selection: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "uniform,popularity,in-batch-popularity")]
        replacement: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 400)]
        batch_size: usize,
        /// External `item_id v1 … vd` embedding file instead of the attack model's table.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Which clicks count for the accuracy.
        #[arg(long, value_enum, default_value_t = Scope::Full)]
        scope: Scope,
    },
    /// Re-render the plots from an existing protection CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.chain().any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { format, input, out, m, n, seed, n_users, n_items, slates_per_user, signal, degree } => {
            let log = match format {
                Format::Synthetic => {
                    let cfg = SyntheticConfig { n_users, n_items, n_slates_per_user: slates_per_user, m, n, signal_strength: signal, transition_graph_degree: degree, seed };
                    ingestion::generate_synthetic(&cfg)?.log
                }
                Format::Mind | Format::Zhihu => {
                    let path = input.ok_or_else(|| Error::Config("--in is required for mind and zhihu".into()))?;
                    let reader = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
                    if matches!(format, Format::Mind) {
                        ingestion::parse_mind(reader)?
                    } else {
                        let (log, stats) = ingestion::parse_zhihu(reader)?;
                        log::info!("zhihu: {} records, {} rejected", stats.records, stats.rejected);
                        log
                    }
                }
            };
            prepare(&log, &out, m, n, seed)
        }
        Command::Train { config, force, deterministic } => {
            if !deterministic {
                log::info!("training runs single-worker and deterministic");
            }
            train(&config, force)
        }
        Command::Eval { model, data, split, ks, mrr, out, per_example } => eval(&model, &data, &split, &ks, mrr, out, per_example),
        Command::Protect { model, data, out, l_grid, selection, replacement, seeds, k, batch_size, embeddings, scope } => {
            let selections = selection.iter().map(|s| s.parse()).collect::<leakaudit::Result<Vec<_>>>()?;
            let replacements = replacement.iter().map(|s| s.parse()).collect::<leakaudit::Result<Vec<_>>>()?;
            let settings = ProtectionSettings {
                l_grid,
                seeds,
                k,
                batch_size,
                scope: match scope {
                    Scope::Full => protection::AccuracyScope::FullHistory,
                    Scope::Window => protection::AccuracyScope::Window,
                },
                ..ProtectionSettings::default()
            };
            protect(&model, &data, &out, &selections, &replacements, &settings, embeddings.as_deref())
        }
        Command::Plot { csv, out } => {
            let text = fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let files = plot::render(&plot::read_tradeoff(&text)?, plot::k_of(&text).unwrap_or(10), &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn prepare(log: &InteractionLog, out: &Path, m: usize, n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let vocab = datamodel::build_vocabulary(log)?;
    let examples = datamodel::build_examples(log, &vocab, m, n)?;
    let histories = datamodel::user_histories(log, &vocab)?;
    let split = datamodel::split_by_user(examples, (0.8, 0.1, 0.1), seed)?;
    vocab.write(create(&out.join("vocab.txt"))?)?;
    datamodel::write_histories(create(&out.join("histories.tsv"))?, &histories)?;
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        datamodel::write_examples(create(&out.join(format!("{name}.tsv")))?, part)?;
    }
    let summary = format!(
        "m = {m}\nn = {n}\nseed = {seed}\nusers = {}\nitems = {}\nclicks = {}\nslates = {}\ntrain = {}\nvalid = {}\ntest = {}\n",
        log.num_users(),
        vocab.n_items(),
        log.num_clicks(),
        log.num_slates(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    fs::write(out.join("prepare.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn load_split(data: &Path, name: &str) -> Result<Vec<AttackExample>> {
    if !matches!(name, "train" | "valid" | "test") {
        return Err(Error::Config(format!("unknown split `{name}` (expected train, valid or test)")).into());
    }
    Ok(datamodel::read_examples(open(&data.join(format!("{name}.tsv")))?)?)
}

fn load_vocab(data: &Path) -> Result<(Vocabulary, String)> {
    let vocab = Vocabulary::read(open(&data.join("vocab.txt"))?)?;
    let fp = model::vocabulary_fingerprint(&vocab);
    Ok((vocab, fp))
}

fn train(config: &Path, force: bool) -> Result<()> {
    let cfg = TrainFile::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    if ckpt.exists() && !force {
        anyhow::bail!("{} already exists; pass --force to overwrite", ckpt.display());
    }
    let (vocab, fingerprint) = load_vocab(&cfg.data_dir)?;
    let split = datamodel::DatasetSplit {
        train: load_split(&cfg.data_dir, "train")?,
        valid: load_split(&cfg.data_dir, "valid")?,
        test: Vec::new(),
        user_assignment: Default::default(),
    };
    let mut spec = training::spec_from_config(&cfg.attack, cfg.encoder, cfg.decoder, vocab.n_items());
    spec.activation = cfg.activation;
    spec.sequence_smoothing = cfg.sequence_smoothing;
    let (model, log) = training::train(spec, &split, &cfg.attack, &cfg.options)?;
    model.save(&cfg.out_dir, &fingerprint)?;
    fs::write(cfg.out_dir.join("train_log.csv"), log.to_csv())?;
    println!(
        "best epoch {} valid recall@10 {:.4}; checkpoint sha256 {}",
        log.best_epoch,
        log.best_valid_recall,
        model::checkpoint_hash(model.params())
    );
    Ok(())
}

fn load_model(model_dir: &Path, data: &Path) -> Result<(AttackModel, Vocabulary)> {
    let (model, recorded) = AttackModel::load(model_dir).with_context(|| format!("loading model from {}", model_dir.display()))?;
    let (vocab, fingerprint) = load_vocab(data)?;
    if recorded != fingerprint || vocab.n_items() != model.spec().n_items {
        return Err(Error::VocabularyMismatch(format!(
            "{} was prepared with a different vocabulary than the model in {}",
            data.display(),
            model_dir.display()
        ))
        .into());
    }
    Ok((model, vocab))
}

fn eval(model_dir: &Path, data: &Path, split: &str, ks: &[usize], mrr: Mrr, out: Option<PathBuf>, per_example: Option<PathBuf>) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("--ks needs positive values".into()).into());
    }
    let (model, _) = load_model(model_dir, data)?;
    let examples = load_split(data, split)?;
    let mode = match mrr {
        Mrr::PerItem => MrrMode::PerItem,
        Mrr::FirstHit => MrrMode::FirstHit,
    };
    let report = metrics::evaluate(&model, &examples, ks, mode)?;
    let csv = format!("# merge={}\n{}", metrics::MERGE_ORDER, report.to_csv());
    let out = out.unwrap_or_else(|| model_dir.join(format!("metrics_{split}.csv")));
    fs::write(&out, &csv)?;
    if let Some(p) = per_example {
        fs::write(p, report.per_example_csv())?;
    }
    print!("{csv}");
    Ok(())
}

fn protect(
    model_dir: &Path,
    data: &Path,
    out: &Path,
    selections: &[protection::SelectionKind],
    replacements: &[protection::ReplacementKind],
    settings: &ProtectionSettings,
    embeddings: Option<&Path>,
) -> Result<()> {
    if let Some(l) = settings.l_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(format!("L = {l} outside [0, 1]")).into());
    }
    let (model, vocab) = load_model(model_dir, data)?;
    let test = load_split(data, "test")?;
    let train = load_split(data, "train")?;
    let histories: HashMap<String, Vec<usize>> = datamodel::read_histories(open(&data.join("histories.tsv"))?)?;
    let popularity = PopularityModel::from_examples(&train, vocab.n_items())?;
    let table = model.item_embeddings();
    let external;
    let provider: &dyn EmbeddingProvider = match embeddings {
        Some(p) => {
            external = ExternalEmbeddings::read(open(p)?, &vocab)?;
            &external
        }
        None => &table,
    };
    log::info!("similarity embeddings: {}", provider.provenance());
    let ctx = ProtectionContext { model: &model, examples: &test, histories: &histories, popularity: &popularity, provider };
    let report = protection::evaluate_protection(&ctx, selections, replacements, settings)?;
    fs::create_dir_all(out)?;
    let csv = report.to_csv();
    let mut f = create(&out.join("protection.csv"))?;
    f.write_all(csv.as_bytes())?;
    f.flush()?;
    for path in plot::render(&plot::read_tradeoff(&csv)?, settings.k, out)? {
        log::info!("wrote {}", path.display());
    }
    for r in report.seed_means() {
        println!("{} {} L={:.2} recall*={:.4} ndcg*={:.4} acc*={:.4}", r.selection, r.replacement, r.l, r.recall, r.ndcg, r.accuracy);
    }
    Ok(())
}
