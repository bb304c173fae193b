//! `fourstream`: config-driven entry points for the four-stream classifier
//! pipeline. One command per process; every artifact embeds a hash of the
//! fully resolved configuration.

use clap::{Parser, Subcommand};
use fourstream::data_model::{MetadataSchema, Modality, ModalityMask, PostingRecord};
use fourstream::encoders::MetadataEncoderSpec;
use fourstream::eval;
use fourstream::fusion::{FusionConfig, FusionModel, FusionStrategy};
use fourstream::ingest::{self, DatasetSplits};
use fourstream::preprocess::{self, PreparedSample};
use fourstream::synthgen;
use fourstream::training::{self, TrainConfig, TrainRegime, TrainReport};
use fourstream::{NormalizerStats, Split};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fourstream", version, about = "Four-stream multimodal classifier pipeline")]
struct Cli {
    /// Experiment config file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scale profile: desk (D=32 toy encoders) or full (D=768).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a TSV corpus; report counts and rejects.
    Ingest {
        #[arg(long)]
        posts: PathBuf,
        #[arg(long)]
        comments: PathBuf,
        #[arg(long)]
        image_cache: PathBuf,
    },
    /// Fit normalizer statistics on the training split.
    Preprocess {
        /// Dataset directory (posts.tsv, comments.tsv, images/).
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a planted-signal synthetic corpus.
    Synth,
    /// Pretrain one modality stream with a temporary head.
    TrainStream {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the fusion stack over frozen pretrained streams.
    TrainFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a saved model bundle on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the 17-row modality ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Finite-difference gradient oracle on a desk-scale model.
    Gradcheck,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    seed: u64,
    output_dir: String,
    profile: String,
    synth: synthgen::SynthSpec,
    fusion: FusionSection,
    train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FusionSection {
    strategy: String,
    dropout_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    l1: f64,
    l2: f64,
    regularize_fusion: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            output_dir: "out".into(),
            profile: "desk".into(),
            synth: synthgen::SynthSpec::default(),
            fusion: FusionSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { strategy: "concat".into(), dropout_rate: 0.2 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.adam.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            l1: t.l1_coeff,
            l2: t.l2_coeff,
            regularize_fusion: t.regularize_fusion,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<(), String> {
        if self.profile != "desk" && self.profile != "full" {
            return Err(format!("profile: expected `desk` or `full`, got `{}`", self.profile));
        }
        if FusionStrategy::parse(&self.fusion.strategy).is_none() {
            return Err(format!("fusion.strategy: unknown strategy `{}`", self.fusion.strategy));
        }
        if !(0.0..1.0).contains(&self.fusion.dropout_rate) {
            return Err("fusion.dropout_rate: must lie in [0,1)".into());
        }
        if self.train.epochs == 0 {
            return Err("train.epochs: must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return Err("train.batch_size: must be at least 1".into());
        }
        if !(self.train.learning_rate > 0.0) {
            return Err("train.learning_rate: must be positive".into());
        }
        self.synth.validate().map_err(|e| format!("synth: {e}"))?;
        Ok(())
    }

    fn embed_dim(&self) -> usize {
        if self.profile == "full" {
            fourstream::encoders::FULL_EMBED_DIM
        } else {
            fourstream::encoders::DESK_EMBED_DIM
        }
    }

    fn resolution(&self) -> usize {
        if self.profile == "full" {
            preprocess::RESOLUTION_LARGE
        } else {
            self.synth.image_size
        }
    }

    fn strategy(&self) -> FusionStrategy {
        FusionStrategy::parse(&self.fusion.strategy).unwrap()
    }

    fn fusion_config(&self) -> FusionConfig {
        let mut cfg = FusionConfig::desk(self.strategy());
        cfg.embed_dim = self.embed_dim();
        cfg.dropout_rate = self.fusion.dropout_rate;
        cfg
    }

    fn train_config(&self, regime: TrainRegime) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.adam.learning_rate = self.train.learning_rate;
        cfg.epochs = self.train.epochs;
        cfg.batch_size = self.train.batch_size;
        cfg.l1_coeff = self.train.l1;
        cfg.l2_coeff = self.train.l2;
        cfg.regularize_fusion = self.train.regularize_fusion;
        cfg.regime = regime;
        cfg.seed = self.seed;
        cfg
    }

    fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

struct Run {
    config: ExperimentConfig,
    hash: String,
    out: PathBuf,
}

impl Run {
    fn write_manifest(&self, command: &str) -> Result<(), String> {
        std::fs::create_dir_all(&self.out).map_err(|e| e.to_string())?;
        let manifest = serde_json::json!({
            "command": command,
            "config_hash": self.hash,
            "seed": self.config.seed,
            "profile": self.config.profile,
        });
        std::fs::write(self.out.join("run.json"), manifest.to_string()).map_err(|e| e.to_string())
    }

    fn write_metrics(&self, name: &str, report: &TrainReport) -> Result<(), String> {
        let mut csv = format!("# config={}\nepoch,train_loss,train_acc,val_acc\n", self.hash);
        for m in &report.metrics {
            csv.push_str(&format!(
                "{},{:.6},{:.4},{:.4}\n",
                m.epoch, m.train_loss, m.train_acc, m.val_acc
            ));
        }
        std::fs::write(self.out.join(name), csv).map_err(|e| e.to_string())
    }

    fn stream_path(&self, modality: Modality) -> PathBuf {
        self.out.join("streams").join(format!("{}.ckpt", modality.as_str()))
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("config: cannot read {}: {e}", path.display()))?;
            toml::from_str(&text).map_err(|e| format!("config: {e}"))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(profile) = &cli.profile {
        config.profile = profile.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.display().to_string();
    }
    config.validate()?;
    Ok(config)
}

fn load_dataset(dir: &Path, schema: &MetadataSchema) -> Result<DatasetSplits, String> {
    let posts = ingest::parse_posts(
        BufReader::new(
            std::fs::File::open(dir.join("posts.tsv")).map_err(|e| format!("posts.tsv: {e}"))?,
        ),
        schema,
        None,
    )
    .map_err(|e| e.to_string())?;
    let comments = ingest::parse_comments(BufReader::new(
        std::fs::File::open(dir.join("comments.tsv")).map_err(|e| format!("comments.tsv: {e}"))?,
    ))
    .map_err(|e| e.to_string())?;
    let attached = ingest::attach_comments(&posts, &comments);
    let records = ingest::build_records(&posts, &attached, &dir.join("images"));
    let (complete, _dropped) = ingest::filter_complete(records, schema);
    ingest::split_by_record_tag(complete).map_err(|e| e.to_string())
}

fn prepare_all(
    records: &[PostingRecord],
    stats: &NormalizerStats,
    schema: &MetadataSchema,
) -> Result<Vec<PreparedSample>, String> {
    records
        .iter()
        .map(|r| preprocess::prepare(r, stats, schema).map_err(|e| e.to_string()))
        .collect()
}

fn fit_or_load_stats(
    run: &Run,
    splits: &DatasetSplits,
    schema: &MetadataSchema,
) -> Result<NormalizerStats, String> {
    let path = run.out.join("stats.toml");
    if path.exists() {
        return NormalizerStats::load(&path).map_err(|e| e.to_string());
    }
    let stats = preprocess::fit_all(&splits.train, schema, run.config.resolution())
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&run.out).map_err(|e| e.to_string())?;
    stats.save(&path).map_err(|e| e.to_string())?;
    Ok(stats)
}

fn cmd_ingest(run: &Run, posts: &Path, comments: &Path, cache: &Path) -> Result<(), String> {
    let schema = MetadataSchema::fakeddit_default();
    let posts_table = ingest::parse_posts(
        BufReader::new(std::fs::File::open(posts).map_err(|e| e.to_string())?),
        &schema,
        None,
    )
    .map_err(|e| e.to_string())?;
    let comments_table = ingest::parse_comments(BufReader::new(
        std::fs::File::open(comments).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    let attached = ingest::attach_comments(&posts_table, &comments_table);
    let records = ingest::build_records(&posts_table, &attached, cache);
    let total = records.len();
    let (complete, dropped) = ingest::filter_complete(records, &schema);
    let splits = ingest::split_by_record_tag(complete).map_err(|e| e.to_string())?;
    let (train, validation, test) = splits.sizes();
    let summary = serde_json::json!({
        "config_hash": run.hash,
        "posts": posts_table.rows.len(),
        "post_rejects": posts_table.rejects.len(),
        "comments": comments_table.rows.len(),
        "records": total,
        "dropped": dropped,
        "train": train,
        "validation": validation,
        "test": test,
    });
    std::fs::create_dir_all(&run.out).map_err(|e| e.to_string())?;
    std::fs::write(run.out.join("ingest.json"), summary.to_string()).map_err(|e| e.to_string())?;
    println!("ingest: {train} train / {validation} validation / {test} test");
    Ok(())
}

fn cmd_preprocess(run: &Run, data: &Path) -> Result<(), String> {
    let schema = MetadataSchema::fakeddit_default();
    let splits = load_dataset(data, &schema)?;
    let stats = preprocess::fit_all(&splits.train, &schema, run.config.resolution())
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&run.out).map_err(|e| e.to_string())?;
    stats.save(&run.out.join("stats.toml")).map_err(|e| e.to_string())?;
    println!("preprocess: stats fitted on {} records ({})", splits.train.len(), stats.fingerprint);
    Ok(())
}

fn cmd_synth(run: &Run) -> Result<(), String> {
    let splits = synthgen::generate(&run.config.synth).map_err(|e| e.to_string())?;
    let dir = run.out.join("synth");
    synthgen::write_dataset(&splits, &dir).map_err(|e| e.to_string())?;
    let bayes = synthgen::bayes_accuracy(&run.config.synth);
    let (train, validation, test) = splits.sizes();
    println!(
        "synth: {train}/{validation}/{test} records at {} \
         (optima: title {:.3}, comments {:.3}, image {:.3}, metadata {:.3}, combined {:.3})",
        dir.display(),
        bayes.title,
        bayes.comments,
        bayes.image,
        bayes.metadata,
        bayes.combined
    );
    Ok(())
}

fn cmd_train_stream(
    run: &Run,
    data: &Path,
    modality: &str,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<(), String> {
    let modality =
        Modality::parse(modality).ok_or_else(|| format!("modality: unknown stream `{modality}`"))?;
    let schema = MetadataSchema::fakeddit_default();
    let splits = load_dataset(data, &schema)?;
    let stats = fit_or_load_stats(run, &splits, &schema)?;
    let train = prepare_all(&splits.train, &stats, &schema)?;
    let val = prepare_all(&splits.validation, &stats, &schema)?;
    let mut cfg = run.config.train_config(TrainRegime::PretrainStream);
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.adam.learning_rate = lr;
    }
    let meta_spec = MetadataEncoderSpec::new(schema.features.len());
    let (mut model, report) = training::pretrain_stream(
        modality,
        run.config.embed_dim(),
        meta_spec,
        &stats,
        &train,
        &val,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(run.out.join("streams")).map_err(|e| e.to_string())?;
    fourstream::checkpoint::save_stream(&run.stream_path(modality), &mut model)
        .map_err(|e| e.to_string())?;
    run.write_metrics(&format!("train_{}.csv", modality.as_str()), &report)?;
    println!(
        "train-stream {}: best validation accuracy {:.4} over {} steps",
        modality.as_str(),
        report.best_val_acc,
        report.steps
    );
    Ok(())
}

fn cmd_train_fusion(
    run: &Run,
    data: &Path,
    strategy: Option<&str>,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<(), String> {
    let strategy = match strategy {
        Some(s) => {
            FusionStrategy::parse(s).ok_or_else(|| format!("strategy: unknown strategy `{s}`"))?
        }
        None => run.config.strategy(),
    };
    let schema = MetadataSchema::fakeddit_default();
    let splits = load_dataset(data, &schema)?;
    let stats = fit_or_load_stats(run, &splits, &schema)?;
    let train = prepare_all(&splits.train, &stats, &schema)?;
    let val = prepare_all(&splits.validation, &stats, &schema)?;
    let meta_spec = MetadataEncoderSpec::new(schema.features.len());
    let mut fusion_config = run.config.fusion_config();
    fusion_config.strategy = strategy;
    let mut model = FusionModel::assemble(
        ModalityMask::full(),
        fusion_config,
        meta_spec.clone(),
        stats.clone(),
        run.config.seed,
    )
    .map_err(|e| e.to_string())?;
    for modality in Modality::ALL {
        let path = run.stream_path(modality);
        if !path.exists() {
            return Err(format!(
                "missing stream checkpoint {} (run train-stream first)",
                path.display()
            ));
        }
        let mut pm = fourstream::checkpoint::load_stream(&path, meta_spec.clone(), stats.clone())
            .map_err(|e| e.to_string())?;
        training::load_stream_into(&mut model, &mut pm).map_err(|e| e.to_string())?;
    }
    let mut cfg = run.config.train_config(TrainRegime::FusionFrozen);
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.adam.learning_rate = lr;
    }
    let report = training::train_fusion(&mut model, &train, &val, &cfg).map_err(|e| e.to_string())?;
    fourstream::checkpoint::save_bundle(&run.out.join("bundle"), &mut model, &meta_spec)
        .map_err(|e| e.to_string())?;
    run.write_metrics("train_fusion.csv", &report)?;
    println!(
        "train-fusion {}: best validation accuracy {:.4} over {} steps",
        strategy.as_str(),
        report.best_val_acc,
        report.steps
    );
    Ok(())
}

fn cmd_evaluate(run: &Run, data: &Path, bundle: &Path, split: &str) -> Result<(), String> {
    let split = Split::parse(split).ok_or_else(|| format!("split: unknown split `{split}`"))?;
    let schema = MetadataSchema::fakeddit_default();
    let splits = load_dataset(data, &schema)?;
    let model = fourstream::checkpoint::load_bundle(bundle).map_err(|e| e.to_string())?;
    let samples = prepare_all(splits.get(split), &model.stats, &schema)?;
    let predictions = model.forward_batch(&samples).map_err(|e| e.to_string())?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let accuracy = eval::accuracy(&predictions, &labels).map_err(|e| e.to_string())?;
    let result = serde_json::json!({
        "config_hash": run.hash,
        "split": split.as_str(),
        "samples": labels.len(),
        "accuracy": accuracy,
    });
    std::fs::create_dir_all(&run.out).map_err(|e| e.to_string())?;
    std::fs::write(run.out.join("evaluate.json"), result.to_string()).map_err(|e| e.to_string())?;
    println!("evaluate {}: accuracy {:.4} on {} samples", split.as_str(), accuracy, labels.len());
    Ok(())
}

fn cmd_ablate(run: &Run, data: &Path, epochs: Option<usize>, lr: Option<f64>) -> Result<(), String> {
    let schema = MetadataSchema::fakeddit_default();
    let splits = load_dataset(data, &schema)?;
    let stats = fit_or_load_stats(run, &splits, &schema)?;
    let train = prepare_all(&splits.train, &stats, &schema)?;
    let val = prepare_all(&splits.validation, &stats, &schema)?;
    let test = prepare_all(&splits.test, &stats, &schema)?;
    let meta_spec = MetadataEncoderSpec::new(schema.features.len());
    let mut pretrain = run.config.train_config(TrainRegime::PretrainStream);
    let mut fusion_train = run.config.train_config(TrainRegime::FusionFrozen);
    if let Some(e) = epochs {
        pretrain.epochs = e;
        fusion_train.epochs = e;
    }
    if let Some(lr) = lr {
        pretrain.adam.learning_rate = lr;
        fusion_train.adam.learning_rate = lr;
    }
    let cfg = eval::AblationConfig {
        pretrain,
        fusion_train,
        embed_dim: run.config.embed_dim(),
        dropout_rate: run.config.fusion.dropout_rate,
        seed: run.config.seed,
    };
    let grid = eval::default_grid();
    let report = eval::run_ablation(&grid, &train, &val, &test, &stats, &meta_spec, &cfg)
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&run.out).map_err(|e| e.to_string())?;
    let csv = format!(
        "# config={}\n{}",
        run.hash,
        eval::render_report(&report, eval::ReportFormat::Csv)
    );
    std::fs::write(run.out.join("ablation.csv"), &csv).map_err(|e| e.to_string())?;
    let md = eval::render_report(&report, eval::ReportFormat::Markdown);
    std::fs::write(run.out.join("ablation.md"), md).map_err(|e| e.to_string())?;
    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    println!("ablate: {} rows written ({failures} failures)", report.cells.len());
    Ok(())
}

fn cmd_gradcheck(run: &Run) -> Result<(), String> {
    let spec = synthgen::SynthSpec {
        n_train: 8,
        n_val: 2,
        n_test: 2,
        ..run.config.synth.clone()
    };
    let splits = synthgen::generate(&spec).map_err(|e| e.to_string())?;
    let schema = MetadataSchema::fakeddit_default();
    let stats = preprocess::fit_all(&splits.train, &schema, spec.image_size)
        .map_err(|e| e.to_string())?;
    let train = prepare_all(&splits.train, &stats, &schema)?;
    let mut model = FusionModel::assemble(
        ModalityMask::full(),
        run.config.fusion_config(),
        MetadataEncoderSpec::new(schema.features.len()),
        stats,
        run.config.seed,
    )
    .map_err(|e| e.to_string())?;
    let batch: Vec<&PreparedSample> = train.iter().collect();
    let cfg = run.config.train_config(TrainRegime::EndToEnd);
    let max_rel = training::gradient_check(&mut model, &batch, &cfg, 1e-5, 600, run.config.seed)
        .map_err(|e| e.to_string())?;
    println!("gradcheck: max relative error {max_rel:.3e}");
    if max_rel < 1e-3 {
        Ok(())
    } else {
        Err(format!("gradcheck: max relative error {max_rel:.3e} >= 1e-3"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let run = Run { hash: config.hash(), out: PathBuf::from(&config.output_dir), config };
    let command_name = match &cli.command {
        Command::Ingest { .. } => "ingest",
        Command::Preprocess { .. } => "preprocess",
        Command::Synth => "synth",
        Command::TrainStream { .. } => "train-stream",
        Command::TrainFusion { .. } => "train-fusion",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::Gradcheck => "gradcheck",
    };
    let result = run.write_manifest(command_name).and_then(|()| match &cli.command {
        Command::Ingest { posts, comments, image_cache } => {
            cmd_ingest(&run, posts, comments, image_cache)
        }
        Command::Preprocess { data } => cmd_preprocess(&run, data),
        Command::Synth => cmd_synth(&run),
        Command::TrainStream { data, modality, epochs, lr } => {
            cmd_train_stream(&run, data, modality, *epochs, *lr)
        }
        Command::TrainFusion { data, strategy, epochs, lr } => {
            cmd_train_fusion(&run, data, strategy.as_deref(), *epochs, *lr)
        }
        Command::Evaluate { data, bundle, split } => cmd_evaluate(&run, data, bundle, split),
        Command::Ablate { data, epochs, lr } => cmd_ablate(&run, data, *epochs, *lr),
        Command::Gradcheck => cmd_gradcheck(&run),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
