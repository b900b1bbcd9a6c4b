//! Command-line interface: dataset generation, training, captioning,
//! evaluation, beam-size sweeps, and gradient checking.
//!
//! Option precedence for training is flags > config file > defaults, where
//! the config file is a flat `key=value` text format. All outputs are
//! written atomically (write to a temporary sibling, then rename).

use crate::captioner::{CaptionerParams, Dims, VariantId};
use crate::data::{
    generate_toy_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset,
    write_atomic, CaptionRecord, CheckpointMeta,
};
use crate::decoding::{beam_search, greedy_decode_scored, DecodeConfig, Fusion};
use crate::gradcheck;
use crate::linalg::Vector;
use crate::metrics::{evaluate, per_image_scores, score_pairs, EvalPair, MetricReport};
use crate::training::{sgd_train, write_loss_csv, TrainConfig};
use crate::vocab::{build_vocab, Vocabulary};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "lstma", version, about = "Attribute-conditioned LSTM captioner")]
pub struct Cli {
    /// Worker thread cap (falls back to the LSTMA_THREADS env var).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic dataset.
    GenData(GenDataArgs),
    /// Train one model or an ensemble.
    Train(TrainArgs),
    /// Decode captions for a dataset.
    Caption(CaptionArgs),
    /// Decode and score a dataset.
    Evaluate(EvaluateArgs),
    /// Evaluate across beam sizes and tabulate normalized scores.
    BeamSweep(BeamSweepArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of records (>= 1).
    #[arg(long)]
    pub n: usize,
    /// Feature dimensionality (>= 8).
    #[arg(long, default_value_t = 16)]
    pub d_v: usize,
    /// Probability of flipping an attribute entry toward 0.5.
    #[arg(long, default_value_t = 0.0)]
    pub attr_noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Variant a1..a5.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path; ensembles insert the member index.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value config file (flags win over file entries).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Global-norm gradient clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train this many members with consecutive seeds.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// LSTM input dimensionality D_e.
    #[arg(long)]
    pub embed: Option<usize>,
    /// LSTM hidden dimensionality H.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Vocabulary frequency threshold.
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Use the published-scale defaults (1024-d LSTM, batch 1024).
    #[arg(long, default_value_t = false)]
    pub paper_scale: bool,
    /// Validate the dataset and configuration, then exit.
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
    /// Vocabulary output path (default: <out>.vocab).
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// Checkpoint path; repeat for an ensemble.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Override the checkpoint variant (accepted with a warning when the
    /// dimensions still match).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
    /// Use greedy decoding instead of beam search.
    #[arg(long, default_value_t = false)]
    pub greedy: bool,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long, default_value_t = false)]
    pub length_norm: bool,
    /// Fuse member predictions by geometric rather than arithmetic mean.
    #[arg(long, default_value_t = false)]
    pub geometric_fusion: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    /// Single-line JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Per-image score CSV path.
    #[arg(long)]
    pub per_image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BeamSweepArgs {
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated beam sizes.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Variant a1..a5; all five when omitted.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds per variant.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    pub tol: f64,
}

/// Runs a parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    configure_threads(cli.threads);
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args).map(|()| 0),
        Command::Train(args) => cmd_train(&args).map(|()| 0),
        Command::Caption(args) => cmd_caption(&args).map(|()| 0),
        Command::Evaluate(args) => cmd_evaluate(&args).map(|()| 0),
        Command::BeamSweep(args) => cmd_beam_sweep(&args).map(|()| 0),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(flag: Option<usize>) {
    let from_env = std::env::var("LSTMA_THREADS").ok().and_then(|v| v.parse().ok());
    if let Some(n) = flag.or(from_env) {
        // Ignore the error when a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_flag: Option<usize>) {}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let records = generate_toy_dataset(args.seed, args.n, args.d_v, args.attr_noise)?;
    save_dataset(&records, &args.out)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

/// Flat key=value config file; blank lines and '#' comments allowed.
fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw.parse().map_err(|_| {
            Error::InvalidInput(format!("config key {key}: cannot parse {raw:?}"))
        }),
        None => Ok(default),
    }
}

fn member_path(out: &Path, member: usize, count: usize) -> PathBuf {
    if count == 1 {
        return out.to_path_buf();
    }
    match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => out.with_extension(format!("{member}.{ext}")),
        None => out.with_extension(member.to_string()),
    }
}

fn dataset_captions(dataset: &[CaptionRecord]) -> Vec<String> {
    dataset.iter().flat_map(|r| r.captions.iter().cloned()).collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => HashMap::new(),
    };
    let scale_default = if args.paper_scale { 1024 } else { 64 };
    let batch_default = if args.paper_scale { 1024 } else { 32 };

    let variant: VariantId = resolve(
        args.variant.as_deref().map(str::to_string),
        &file,
        "variant",
        String::new(),
    )?
    .parse()
    .map_err(|_| Error::InvalidInput("train needs --variant a1..a5 (flag or config)".into()))?;
    let lr = resolve(args.lr, &file, "lr", 0.01)?;
    let batch_size = resolve(args.batch, &file, "batch", batch_default)?;
    let max_iters = resolve(args.iters, &file, "iters", 2000)?;
    let clip_raw = resolve(args.clip_norm, &file, "clip_norm", 5.0)?;
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let ensemble = resolve(args.ensemble, &file, "ensemble", 1)?;
    let d_e = resolve(args.embed, &file, "embed", scale_default)?;
    let h = resolve(args.hidden, &file, "hidden", scale_default)?;
    let min_count = resolve(args.min_count, &file, "min_count", 5)?;
    let eval_every = resolve(args.eval_every, &file, "eval_every", 0)?;

    if lr < 0.0 {
        return Err(Error::InvalidInput("learning rate must be >= 0".into()));
    }
    if ensemble < 1 {
        return Err(Error::InvalidInput("ensemble size must be >= 1".into()));
    }

    let dataset = load_dataset(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no records", args.data.display())));
    }
    let vocab = build_vocab(&dataset_captions(&dataset), min_count)?;
    let dims = Dims {
        d_v: dataset[0].features.len(),
        d_a: dataset[0].attributes.len(),
        d_s: vocab.size(),
        d_e,
        h,
    };

    if args.dry_run {
        eprintln!(
            "ok: {} records, vocab {} (min_count {}), dims D_v={} D_a={} D_s={} D_e={} H={}",
            dataset.len(),
            vocab.size(),
            min_count,
            dims.d_v,
            dims.d_a,
            dims.d_s,
            dims.d_e,
            dims.h
        );
        return Ok(());
    }

    let vocab_path = args
        .vocab_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("vocab"));
    vocab.save(&vocab_path)?;

    let config = TrainConfig {
        variant,
        lr,
        batch_size,
        max_iters,
        clip_norm: if clip_raw > 0.0 { Some(clip_raw) } else { None },
        seed,
        eval_every,
    };

    for member in 0..ensemble {
        let member_config = TrainConfig { seed: seed + member as u64, ..config.clone() };
        let (params, history) = sgd_train(&member_config, dims, &dataset, &vocab)?;
        let ckpt_path = member_path(&args.out, member, ensemble);
        let meta = CheckpointMeta {
            variant,
            dims,
            vocab_hash: vocab.hash(),
            train_step: max_iters as u64,
        };
        save_checkpoint(&params, &meta, &ckpt_path)?;
        let loss_path = ckpt_path.with_extension("loss.csv");
        write_loss_csv(&history, &loss_path)?;
        eprintln!(
            "member {member}: initial loss {:.4}, final loss {:.4} -> {}",
            history.first().copied().unwrap_or(f64::NAN),
            history.last().copied().unwrap_or(f64::NAN),
            ckpt_path.display()
        );
    }
    Ok(())
}

/// Loads an ensemble, enforcing identical dims and vocabulary hash; variant
/// mismatches are accepted with a warning because the parameter shapes still
/// agree.
fn load_ensemble(
    paths: &[PathBuf],
    vocab: &Vocabulary,
    requested_variant: Option<&str>,
) -> Result<(Vec<CaptionerParams>, VariantId)> {
    let mut models = Vec::with_capacity(paths.len());
    let mut metas: Vec<CheckpointMeta> = Vec::with_capacity(paths.len());
    for path in paths {
        let (params, meta) = load_checkpoint(path)?;
        if let Some(first) = metas.first() {
            if meta.dims != first.dims {
                return Err(Error::Checkpoint(format!(
                    "{}: dims {:?} differ from the first checkpoint's {:?}",
                    path.display(),
                    meta.dims,
                    first.dims
                )));
            }
        }
        if meta.vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary hash mismatch (checkpoint {:#x}, vocab file {:#x})",
                path.display(),
                meta.vocab_hash,
                vocab.hash()
            )));
        }
        models.push(params);
        metas.push(meta);
    }
    let mut variant = metas[0].variant;
    for (path, meta) in paths.iter().zip(&metas) {
        if meta.variant != variant {
            eprintln!(
                "warning: {} was trained as {}, decoding as {} (dims match)",
                path.display(),
                meta.variant,
                variant
            );
        }
    }
    if let Some(requested) = requested_variant {
        let forced: VariantId = requested.parse()?;
        if forced != variant {
            eprintln!(
                "warning: overriding checkpoint variant {variant} with {forced} (dims match)"
            );
            variant = forced;
        }
    }
    Ok((models, variant))
}

fn record_inputs(record: &CaptionRecord) -> Result<(crate::captioner::ImageFeatures, crate::captioner::AttributeVector)> {
    Ok((
        crate::captioner::ImageFeatures(Vector::new(record.features.clone())),
        crate::captioner::AttributeVector::new(Vector::new(record.attributes.clone()))?,
    ))
}

pub fn cmd_caption(args: &CaptionArgs) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let (models, variant) = load_ensemble(&args.checkpoints, &vocab, args.variant.as_deref())?;
    let model_refs: Vec<&CaptionerParams> = models.iter().collect();
    let dataset = load_dataset(&args.data)?;
    let config = DecodeConfig {
        beam_size: args.beam,
        max_len: args.max_len,
        length_norm: args.length_norm,
        fusion: if args.geometric_fusion { Fusion::Geometric } else { Fusion::Mean },
    };

    let lines = crate::par::map_ordered(&dataset, |record| -> Result<String> {
        let (img, attrs) = record_inputs(record)?;
        let scored = if args.greedy {
            greedy_decode_scored(&model_refs, variant, &img, &attrs, &config)?
        } else {
            beam_search(&model_refs, variant, &img, &attrs, &config)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::InvalidInput("beam search returned nothing".into()))?
        };
        let caption = vocab.decode(&scored.sequence)?;
        Ok(format!("{}\t{}\t{:.6}", record.id, caption, scored.logprob))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    write_atomic(&args.out, (lines.join("\n") + "\n").as_bytes())?;
    eprintln!("wrote {} captions to {}", lines.len(), args.out.display());
    Ok(())
}

fn report_json(report: &MetricReport) -> Result<String> {
    Ok(serde_json::to_string(report)?)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let (models, variant) = load_ensemble(&args.checkpoints, &vocab, args.variant.as_deref())?;
    let model_refs: Vec<&CaptionerParams> = models.iter().collect();
    let dataset = load_dataset(&args.data)?;
    let config = DecodeConfig {
        beam_size: args.beam,
        max_len: args.max_len,
        ..Default::default()
    };

    let (report, pairs) = evaluate(&model_refs, variant, &dataset, &vocab, &config)?;
    write_atomic(&args.report, (report_json(&report)? + "\n").as_bytes())?;
    if let Some(per_image_path) = &args.per_image {
        write_per_image_csv(&pairs, per_image_path)?;
    }
    println!("{}", report_json(&report)?);
    Ok(())
}

fn write_per_image_csv(pairs: &[EvalPair], path: &Path) -> Result<()> {
    let rows = per_image_scores(pairs)?;
    let mut csv = String::from("id,bleu1,bleu2,bleu3,bleu4,rouge_l,cider_d\n");
    for (id, r) in rows {
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            id, r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.cider_d
        )
        .expect("string write");
    }
    write_atomic(path, csv.as_bytes())
}

pub fn cmd_beam_sweep(args: &BeamSweepArgs) -> Result<()> {
    if args.ks.is_empty() {
        return Err(Error::InvalidInput("beam sweep needs at least one k".into()));
    }
    let vocab = Vocabulary::load(&args.vocab)?;
    let (models, variant) = load_ensemble(&args.checkpoints, &vocab, args.variant.as_deref())?;
    let model_refs: Vec<&CaptionerParams> = models.iter().collect();
    let dataset = load_dataset(&args.data)?;

    let mut rows: Vec<(usize, MetricReport)> = Vec::with_capacity(args.ks.len());
    for &k in &args.ks {
        let config = DecodeConfig { beam_size: k, max_len: args.max_len, ..Default::default() };
        let (report, _) = evaluate(&model_refs, variant, &dataset, &vocab, &config)?;
        rows.push((k, report));
    }

    // Per-metric max-normalized columns.
    let mut maxima = [0.0f64; 6];
    for (_, report) in &rows {
        for (i, (_, v)) in report.values().into_iter().enumerate() {
            maxima[i] = maxima[i].max(v);
        }
    }

    let mut csv = String::from(
        "k,bleu1,bleu2,bleu3,bleu4,rouge_l,cider_d,\
         bleu1_norm,bleu2_norm,bleu3_norm,bleu4_norm,rouge_l_norm,cider_d_norm\n",
    );
    for (k, report) in &rows {
        write!(csv, "{k}").expect("string write");
        for (_, v) in report.values() {
            write!(csv, ",{v:.6}").expect("string write");
        }
        for (i, (_, v)) in report.values().into_iter().enumerate() {
            let norm = if maxima[i] > 0.0 { v / maxima[i] } else { 0.0 };
            write!(csv, ",{norm:.6}").expect("string write");
        }
        csv.push('\n');
    }
    write_atomic(&args.out, csv.as_bytes())?;
    eprintln!("wrote beam sweep over k={:?} to {}", args.ks, args.out.display());
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let variants: Vec<VariantId> = match &args.variant {
        Some(v) => vec![v.parse()?],
        None => VariantId::ALL.to_vec(),
    };
    let mut all_pass = true;
    for variant in variants {
        for seed in args.seed..args.seed + args.seeds.max(1) {
            let report = gradcheck::check_variant(variant, seed, args.eps, args.tol)?;
            let status = if report.pass() { "pass" } else { "FAIL" };
            println!(
                "{status} {variant} seed {seed}: max rel err {:.3e} (tol {:.1e})",
                report.max_rel_err(),
                args.tol
            );
            for block in &report.blocks {
                println!("    {:<10} {:.3e}", block.name, block.max_rel_err);
            }
            all_pass &= report.pass();
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

/// Helper for tests and the evaluate path: score already-decoded captions.
pub fn score_caption_lines(
    lines: &[(String, String)],
    dataset: &[CaptionRecord],
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &CaptionRecord> =
        dataset.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(lines.len());
    for (id, caption) in lines {
        let record = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("unknown record id {id}")))?;
        pairs.push(EvalPair {
            id: id.clone(),
            candidate: crate::vocab::tokenize(caption),
            references: record.captions.iter().map(|c| crate::vocab::tokenize(c)).collect(),
        });
    }
    score_pairs(&pairs)
}
