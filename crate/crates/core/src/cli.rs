//! The `ikrl` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! error, 3 numeric failure (non-finite values). Metrics go to stdout as a
//! table followed by `key=value` lines; training progress goes to stderr.
//!
//! Settings are resolved in order: built-in defaults, then `--config`, then
//! explicit flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_config, InitStrategy, ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    classification_negatives, classify_triples, inspect_attention, predict_entities, regularity_probe,
    ScoringMode, SlotSelection,
};
use crate::io::{load_checkpoint, read_features, read_names, read_vocabulary, save_checkpoint, write_atomic};
use crate::kg::{load_triples, Dataset, Vocabulary};
use crate::model::{all_entity_ibr, AggregationMode, FeatureStore, ModelParams, Norm};
use crate::synth::{generate, SynthConfig};
use crate::training::train_with_progress;

#[derive(Debug, Parser)]
#[command(name = "ikrl", version, about = "Image-embodied knowledge graph embeddings")]
struct Cli {
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic KG with planted translations and image features.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Entity prediction: raw/filtered mean rank and Hits@10 on the test split.
    EvalLink(EvalArgs),
    /// Triple classification with per-relation thresholds tuned on validation.
    EvalClassify(ClassifyArgs),
    /// Rank relations by how well they explain e_I(a) - e_I(b).
    Probe(ProbeArgs),
    /// Attention weights over one entity's images.
    InspectAttention(AttentionArgs),
    /// Write embeddings as tab-separated text.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    n_entities: usize,
    #[arg(long, default_value_t = 5)]
    n_relations: usize,
    #[arg(long, default_value_t = 16)]
    entity_dim: usize,
    #[arg(long, default_value_t = 64)]
    image_dim: usize,
    #[arg(long, default_value_t = 40)]
    triples_per_relation: usize,
    #[arg(long, default_value_t = 4)]
    images_per_entity: usize,
    #[arg(long, default_value_t = 1)]
    noise_images: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
}

/// Triple files and optional vocabularies. Without vocabulary files, names
/// are numbered in order of first appearance across train, valid, test.
#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, requires = "relations")]
    entities: Option<PathBuf>,
    #[arg(long, requires = "entities")]
    relations: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Sbr,
    Ibr,
    Union,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggArg {
    Att,
    Avg,
    Max,
}

impl From<AggArg> for AggregationMode {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Att => AggregationMode::Att,
            AggArg::Avg => AggregationMode::Avg,
            AggArg::Max => AggregationMode::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    L1,
    L2,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::L2 => Norm::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Ikrl,
    Transe,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Image feature file (required for the joint model).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    agg: Option<AggArg>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    entity_dim: Option<usize>,
    /// `random` or a checkpoint to warm start E and R from.
    #[arg(long)]
    init: Option<String>,
}

#[derive(Debug, Args)]
struct ScoringArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sbr")]
    mode: ModeArg,
    /// Weight of the structure-based distance in union mode.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "att")]
    agg: AggArg,
    #[arg(long, value_enum, default_value = "l1")]
    norm: NormArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Seed for drawing the negative triples.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct NamesArgs {
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    relations: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    names: NamesArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Entity whose image representation is the minuend.
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long, value_enum, default_value = "att")]
    agg: AggArg,
    #[arg(long, value_enum, default_value = "l1")]
    norm: NormArg,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    entity: String,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    names: NamesArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also export aggregated image representations.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "att")]
    agg: AggArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        // Fails only if a pool already exists, e.g. when called twice in one
        // process; results do not depend on the thread count either way.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::EvalLink(a) => eval_link(a),
        Command::EvalClassify(a) => eval_classify(a),
        Command::Probe(a) => probe(a),
        Command::InspectAttention(a) => attention(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_entities: a.n_entities,
        n_relations: a.n_relations,
        entity_dim: a.entity_dim,
        image_dim: a.image_dim,
        triples_per_relation: a.triples_per_relation,
        images_per_entity: a.images_per_entity,
        noise_images_per_entity: a.noise_images,
        feature_noise_sigma: a.sigma,
        seed: a.seed,
    };
    let out = generate(&cfg)?;
    out.write_dir(&a.out)?;
    let d = &out.dataset;
    println!(
        "wrote {} (entities={} relations={} train={} valid={} test={})",
        a.out.display(),
        d.num_entities(),
        d.num_relations(),
        d.train.len(),
        d.valid.len(),
        d.test.len()
    );
    Ok(())
}

fn load_dataset(data: &DataArgs) -> Result<Dataset> {
    let vocab = match (&data.entities, &data.relations) {
        (Some(e), Some(r)) => {
            let vocab = read_vocabulary(e, r)?;
            // Triples naming anything outside the vocabulary are errors, not
            // silent additions.
            let mut probe = vocab.clone();
            for path in [&data.train, &data.valid, &data.test] {
                load_triples(path, &mut probe)?;
                if probe.num_entities() != vocab.num_entities() {
                    let name = probe.entity_name(vocab.num_entities()).to_owned();
                    return Err(Error::UnknownName { kind: "entity", name });
                }
                if probe.num_relations() != vocab.num_relations() {
                    let name = probe.relation_name(vocab.num_relations()).to_owned();
                    return Err(Error::UnknownName {
                        kind: "relation",
                        name,
                    });
                }
            }
            vocab
        }
        _ => Vocabulary::new(),
    };
    Dataset::load(&data.train, &data.valid, &data.test, vocab)
}

fn load_features(path: &Path, max_images: Option<usize>) -> Result<FeatureStore> {
    let mut store = read_features(path, None)?;
    if let Some(n) = max_images {
        if store.iter().any(|(_, imgs)| imgs.len() > n) {
            eprintln!("note: keeping the first {n} images per entity");
            store.truncate(n);
        }
    }
    Ok(store)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.model {
        cfg.model = match m {
            ModelArg::Ikrl => ModelKind::Ikrl,
            ModelArg::Transe => ModelKind::Transe,
        };
    }
    if let Some(v) = a.agg {
        cfg.aggregation = v.into();
    }
    if let Some(v) = a.norm {
        cfg.norm = v.into();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.margin {
        cfg.margin = v;
    }
    if let Some(v) = a.lr_start {
        cfg.lr_start = v;
    }
    if let Some(v) = a.lr_end {
        cfg.lr_end = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.entity_dim {
        cfg.entity_dim = v;
    }
    if let Some(v) = &a.init {
        cfg.init = match v.as_str() {
            "random" => InitStrategy::Random,
            path => InitStrategy::Pretrained(PathBuf::from(path)),
        };
    }

    let dataset = load_dataset(&a.data)?;
    let store = match (&a.features, cfg.model) {
        (Some(path), _) => {
            let store = load_features(path, Some(cfg.max_images))?;
            cfg.image_dim = store.dim();
            Some(store)
        }
        (None, ModelKind::Ikrl) => {
            return Err(Error::Config(
                "--features is required to train the joint model".to_owned(),
            ))
        }
        (None, ModelKind::Transe) => None,
    };
    cfg.validate()?;

    let (params, _) = train_with_progress(&dataset, store.as_ref(), &cfg, |rec| {
        eprintln!(
            "epoch={} lr={} mean_loss={}",
            rec.epoch, rec.learning_rate, rec.mean_loss
        );
    })?;
    save_checkpoint(&a.out, &params)?;
    println!("checkpoint={}", a.out.display());
    Ok(())
}

fn scoring_mode(s: &ScoringArgs) -> Result<ScoringMode> {
    match s.mode {
        ModeArg::Sbr => Ok(ScoringMode::Sbr),
        ModeArg::Ibr => Ok(ScoringMode::Ibr),
        ModeArg::Union => ScoringMode::union(s.alpha),
    }
}

/// Checkpoint, optional features and scoring mode, with shapes checked
/// against the dataset.
fn load_model(
    s: &ScoringArgs,
    dataset: &Dataset,
) -> Result<(ModelParams, Option<FeatureStore>, ScoringMode)> {
    let mode = scoring_mode(s)?;
    let params = load_checkpoint(&s.checkpoint)?;
    if params.num_entities() != dataset.num_entities() || params.num_relations() != dataset.num_relations() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} entities and {} relations, data has {} and {}",
            params.num_entities(),
            params.num_relations(),
            dataset.num_entities(),
            dataset.num_relations()
        )));
    }
    let store = match &s.features {
        Some(path) => Some(load_features(path, None)?),
        None if mode == ScoringMode::Sbr => None,
        None => {
            return Err(Error::Config(format!(
                "--features is required for --mode {}",
                mode.name()
            )))
        }
    };
    Ok((params, store, mode))
}

fn eval_link(a: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let (params, store, mode) = load_model(&a.scoring, &dataset)?;
    let report = predict_entities(
        &dataset,
        &params,
        store.as_ref(),
        a.scoring.agg.into(),
        mode,
        a.scoring.norm.into(),
        SlotSelection::Both,
    )?;
    print!("{}", report.table());
    print!("{}", report.key_values());
    Ok(())
}

fn eval_classify(a: ClassifyArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let (params, store, mode) = load_model(&a.scoring, &dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let valid_neg = classification_negatives(&dataset.valid, &dataset, &mut rng)?;
    let test_neg = classification_negatives(&dataset.test, &dataset, &mut rng)?;
    let report = classify_triples(
        &dataset.valid,
        &valid_neg,
        &dataset.test,
        &test_neg,
        &params,
        store.as_ref(),
        a.scoring.agg.into(),
        mode,
        a.scoring.norm.into(),
    )?;
    println!("mode   split       accuracy");
    println!(
        "{:<6} validation  {:>8.4}",
        mode.name(),
        report.validation_accuracy
    );
    println!("{:<6} test        {:>8.4}", mode.name(), report.accuracy);
    print!(
        "{}",
        report.key_values(|r| dataset.vocab.relation_name(r).to_owned())
    );
    Ok(())
}

fn load_named_model(
    names: &NamesArgs,
    checkpoint: &Path,
    features: &Path,
) -> Result<(Vocabulary, ModelParams, FeatureStore)> {
    let vocab = read_vocabulary(&names.entities, &names.relations)?;
    let params = load_checkpoint(checkpoint)?;
    if params.num_entities() != vocab.num_entities() || params.num_relations() != vocab.num_relations() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} entities and {} relations, vocabulary has {} and {}",
            params.num_entities(),
            params.num_relations(),
            vocab.num_entities(),
            vocab.num_relations()
        )));
    }
    params.check_finite()?;
    let store = load_features(features, None)?;
    Ok((vocab, params, store))
}

fn probe(a: ProbeArgs) -> Result<()> {
    let (vocab, params, store) = load_named_model(&a.names, &a.checkpoint, &a.features)?;
    let ea = vocab.require_entity(&a.a)?;
    let eb = vocab.require_entity(&a.b)?;
    let ranked = regularity_probe(ea, eb, &params, &store, a.agg.into(), a.norm.into())?;
    println!("rank  relation  distance");
    for (i, (r, d)) in ranked.iter().enumerate() {
        println!("{:>4}  {}  {:.6}", i + 1, vocab.relation_name(*r), d);
    }
    for (i, (r, d)) in ranked.iter().enumerate() {
        println!("probe.{}={}\t{}", i + 1, vocab.relation_name(*r), d);
    }
    Ok(())
}

fn attention(a: AttentionArgs) -> Result<()> {
    let names = read_names(&a.entities)?;
    let vocab = Vocabulary::from_names(&names, &Vec::<String>::new())?;
    let params = load_checkpoint(&a.checkpoint)?;
    params.check_finite()?;
    let store = load_features(&a.features, None)?;
    let entity = vocab.require_entity(&a.entity)?;
    if entity >= params.num_entities() {
        return Err(Error::Dimension(format!(
            "entity {entity} is outside the checkpoint's {} entities",
            params.num_entities()
        )));
    }
    let ranked = inspect_attention(entity, &params, &store)?;
    println!("image  weight");
    for (img, w) in &ranked {
        println!("{img:>5}  {w:.6}");
    }
    for (img, w) in &ranked {
        println!("attention.{img}={w}");
    }
    Ok(())
}

fn rows_tsv(names: &[String], m: &crate::matrix::Matrix) -> String {
    let mut out = String::new();
    for (i, name) in names.iter().enumerate() {
        out.push_str(name);
        for x in m.row(i) {
            let _ = write!(out, "\t{x}");
        }
        out.push('\n');
    }
    out
}

fn export(a: ExportArgs) -> Result<()> {
    let vocab = read_vocabulary(&a.names.entities, &a.names.relations)?;
    let params = load_checkpoint(&a.checkpoint)?;
    if params.num_entities() != vocab.num_entities() || params.num_relations() != vocab.num_relations() {
        return Err(Error::Dimension(
            "checkpoint and vocabulary sizes differ".to_owned(),
        ));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_atomic(
        a.out.join("entities.tsv"),
        rows_tsv(vocab.entity_names(), &params.entities).as_bytes(),
    )?;
    write_atomic(
        a.out.join("relations.tsv"),
        rows_tsv(vocab.relation_names(), &params.relations).as_bytes(),
    )?;
    if let Some(path) = &a.features {
        let store = load_features(path, None)?;
        let ibr = all_entity_ibr(&params, &store, a.agg.into())?;
        write_atomic(
            a.out.join("entity_images.tsv"),
            rows_tsv(vocab.entity_names(), &ibr).as_bytes(),
        )?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
