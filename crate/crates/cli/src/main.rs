//! `sdm`: train, apply and inspect SDM estimators and the toy SDM network.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sdm_core::activation::softmax;
use sdm_core::archive::{self, dataset_fingerprint};
use sdm_core::baselines::{
    baseline_threshold_predict, conformal_predict, fit_conformal, fit_temperature, summarize_sets, ConformalConfig, ConformalVariant,
};
use sdm_core::calibration::RescalerConfig;
use sdm_core::data::{load_and_validate, read_instances, write_instances, LabeledInstance, LoadOptions, Split};
use sdm_core::estimator::EstimatorArchive;
use sdm_core::network::{
    build_verification_layer, generate_verified, load_lm, read_corpus, save_lm, sdm_network_train, two_pattern_corpus, write_corpus, CorpusSpec,
    NetworkTrainConfig, ToyLm, ToyLmConfig, TrainingSchedule, FIRST_CONTENT,
};
use sdm_core::numerics::{AdaptorConfig, Nonlinearity};
use sdm_core::synthetic::{gaussian_blobs, shifted, BlobSpec};
use sdm_core::report::{evaluate_estimator, suspect_annotation_report, Judged};
use sdm_core::training::TrainingRunConfig;

#[derive(Parser)]
#[command(name = "sdm", version, about = "Similarity-distance-magnitude estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an estimator archive from a labelled embedding file.
    Train(TrainArgs),
    /// Score records with an archive and write verdicts as JSON lines.
    Predict(PredictArgs),
    /// Stratified accuracy of admitted points, optionally with suspect labels.
    Eval(EvalArgs),
    /// Softmax, temperature and conformal comparisons on the archive's logits.
    Baselines(BaselinesArgs),
    /// Fine-tune the toy SDM language model on a token corpus.
    NetTrain(NetTrainArgs),
    /// Generate and verify completions with a trained toy model.
    NetGenerate(NetGenerateArgs),
    /// Recompute the admission thresholds of an archive for a new alpha'.
    Retune(RetuneArgs),
    /// Write a seeded synthetic dataset or token corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of classes; inferred from the largest label when omitted.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    /// Number of reshuffled training rounds.
    #[arg(long, default_value_t = 10)]
    j: usize,
    /// Adaptor hidden width.
    #[arg(long, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long)]
    kernel_span: Option<usize>,
    #[arg(long)]
    tanh: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest allowed per-class count difference in train and calibration.
    #[arg(long, default_value_t = 0)]
    balance_tolerance: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitFilter {
    /// Records tagged `test`, or every record when none are tagged.
    Auto,
    All,
    Train,
    Calibration,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    suspects: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long, value_enum, default_value_t = SplitFilter::Auto)]
    split: SplitFilter,
}

#[derive(Args)]
struct BaselinesArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "softmax,temp,aps,raps")]
    methods: Vec<String>,
    /// Conformal miscoverage level.
    #[arg(long, default_value_t = 0.05)]
    conformal_alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    k_reg: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long, value_enum, default_value_t = SplitFilter::Auto)]
    split: SplitFilter,
}

#[derive(Args)]
struct NetTrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    beta_min: f64,
    #[arg(long, default_value_t = 0.1)]
    beta_max: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    /// Vocabulary size; one past the largest token when omitted.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden_dim: usize,
    /// Epochs of reference-head pretraining on the whole corpus.
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 2)]
    j: usize,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 50)]
    verifier_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    verifier_lr: f64,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct NetGenerateArgs {
    #[arg(long)]
    lm: PathBuf,
    /// JSON lines with `tokens` and an optional `marker` and `id`.
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetuneArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    alpha: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Gaussian blobs tagged train, calibration and test.
    Blobs,
    /// Verified-vs-corrupted token corpus.
    Corpus,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    /// Points per class per split (blobs) or instances (corpus).
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Added to every test coordinate.
    #[arg(long, default_value_t = 0.0)]
    test_shift: f64,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SDM_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("SDM_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("SDM_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn echo_config(command: &str, config: &Value) {
    eprintln!("{command} config: {config}");
}

fn load_archive(dir: &Path) -> Result<EstimatorArchive> {
    let (a, _) = archive::load(dir).with_context(|| format!("cannot load archive {}", dir.display()))?;
    Ok(a)
}

fn select_split(records: Vec<LabeledInstance>, filter: SplitFilter) -> Vec<LabeledInstance> {
    let want = match filter {
        SplitFilter::All => return records,
        SplitFilter::Auto if records.iter().any(|r| r.split == Some(Split::Test)) => Split::Test,
        SplitFilter::Auto => return records,
        SplitFilter::Train => Split::Train,
        SplitFilter::Calibration => Split::Calibration,
        SplitFilter::Test => Split::Test,
    };
    records.into_iter().filter(|r| r.split == Some(want)).collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let classes = match args.classes {
        Some(c) => c,
        None => read_instances(&args.data)?.iter().map(|r| r.label + 1).max().unwrap_or(0).max(2),
    };
    let bundle = load_and_validate(
        &args.data,
        classes,
        LoadOptions {
            balance_tolerance: args.balance_tolerance,
            split_seed: args.seed,
        },
    )?;
    let config = TrainingRunConfig {
        rounds: args.j,
        max_epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        alpha_prime: args.alpha,
        seed: args.seed,
        adaptor: AdaptorConfig {
            filters: args.m,
            kernel_span: args.kernel_span,
            nonlinearity: if args.tanh { Nonlinearity::Tanh } else { Nonlinearity::Identity },
        },
        rescaler: RescalerConfig {
            seed: args.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    echo_config("train", &json!({"classes": classes, "seed": args.seed, "run": config}));
    let archive = EstimatorArchive::build(&bundle, &config)?;
    let mut datasets = BTreeMap::new();
    for (split, records) in bundle.splits() {
        if !records.is_empty() {
            datasets.insert(split.name().to_string(), dataset_fingerprint(records));
        }
    }
    archive::save(&archive, &args.out, datasets)?;
    let t = &archive.thresholds;
    println!(
        "{}",
        json!({
            "archive": args.out,
            "winner_round": archive.winner_round,
            "metric": archive.model.metric,
            "robust_min_valid_qbin": t.robust_min_valid_qbin,
            "psi": t.psi,
        })
    );
    Ok(())
}

/// Reads `id` and `embedding` from each JSON line; other fields are ignored.
fn read_points(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        let id = v.get("id").and_then(Value::as_str).map_or_else(|| format!("line{}", i + 1), str::to_string);
        let embedding = v
            .get("embedding")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .with_context(|| format!("{}:{}: missing or non-numeric embedding", path.display(), i + 1))?;
        out.push((id, embedding));
    }
    Ok(out)
}

fn predict(args: PredictArgs) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    echo_config("predict", &json!({"alpha_prime": archive.alpha_prime(), "run": archive.config}));
    let points = read_points(&args.data)?;
    let items: Vec<(&str, &[f64])> = points.iter().map(|(id, x)| (id.as_str(), x.as_slice())).collect();
    let verdicts = archive.predict_batch(&items)?;
    let mut out = output(args.out.as_deref())?;
    for v in &verdicts {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let admitted = verdicts.iter().filter(|v| v.admitted).count();
    eprintln!("admitted {admitted} of {}", verdicts.len());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    echo_config("eval", &json!({"alpha_prime": archive.alpha_prime(), "run": archive.config}));
    let records = select_split(read_instances(&args.data)?, args.split);
    if records.is_empty() {
        bail!("no records selected from {}", args.data.display());
    }
    let items: Vec<(&str, &[f64])> = records.iter().map(|r| (r.id.as_str(), r.embedding.as_slice())).collect();
    let verdicts = archive.predict_batch(&items)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    if let Some(r) = records.iter().find(|r| r.label >= archive.classes) {
        bail!("record {} has label {} but the archive has {} classes", r.id, r.label, archive.classes);
    }
    let judged: Vec<Judged> = verdicts
        .iter()
        .zip(&labels)
        .map(|(v, y)| Judged {
            prediction: v.prediction,
            label: *y,
            admitted: v.admitted,
        })
        .collect();
    let report = evaluate_estimator(&judged, archive.classes, archive.alpha_prime(), "sdm");
    let suspects = args.suspects.then(|| suspect_annotation_report(&verdicts, &labels));
    match args.format {
        Format::Json => {
            let mut v = json!({"report": report});
            if let Some(s) = &suspects {
                v["suspects"] = json!(s);
            }
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Format::Text => {
            print!("{}", report.to_text());
            if let Some(s) = &suspects {
                println!("suspects ({}):", s.len());
                for x in s {
                    println!(
                        "  {}  label={} predicted={} p_lower={:.4} q={} bin={} exemplars={}",
                        x.id,
                        x.label,
                        x.prediction,
                        x.p_lower,
                        x.q,
                        x.hard_qbin,
                        x.exemplar_ids.join(",")
                    );
                }
            }
        }
    }
    Ok(())
}

fn baselines(args: BaselinesArgs) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    let alpha_prime = archive.alpha_prime();
    let conformal = ConformalConfig {
        alpha: args.conformal_alpha,
        lambda: args.lambda,
        k_reg: args.k_reg,
        randomized: false,
    };
    echo_config("baselines", &json!({"alpha_prime": alpha_prime, "conformal": conformal, "methods": args.methods}));
    let records = select_split(read_instances(&args.data)?, args.split);
    if records.is_empty() {
        bail!("no records selected from {}", args.data.display());
    }
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let logits = records
        .iter()
        .map(|r| archive.model.forward(&r.embedding).map(|(_, z)| z))
        .collect::<sdm_core::Result<Vec<_>>>()?;
    let cal_logits = &archive.calibration_logits;
    let cal_labels = &archive.calibration_labels;
    let temperature = fit_temperature(cal_logits, cal_labels)?;
    let probs = |rows: &[Vec<f64>], tau: f64| -> Vec<Vec<f64>> { rows.iter().map(|z| softmax(z, tau)).collect() };
    let test_probs = probs(&logits, 1.0);
    let mut results = serde_json::Map::new();
    for method in &args.methods {
        let value = match method.as_str() {
            "softmax" | "temp" => {
                let (name, p) = if method == "softmax" {
                    ("softmax", test_probs.clone())
                } else {
                    ("temperature", probs(&logits, temperature.tau))
                };
                let judged: Vec<Judged> = p
                    .iter()
                    .zip(&labels)
                    .map(|(p, y)| {
                        let (prediction, admitted) = baseline_threshold_predict(p, alpha_prime);
                        Judged {
                            prediction,
                            label: *y,
                            admitted,
                        }
                    })
                    .collect();
                let report = evaluate_estimator(&judged, archive.classes, alpha_prime, name);
                if matches!(args.format, Format::Text) {
                    print!("{}", report.to_text());
                    if method == "temp" {
                        println!("inverse temperature {:.4}{}", temperature.tau, if temperature.at_bound { " (at bound)" } else { "" });
                    }
                }
                json!({"report": report, "temperature": (method == "temp").then_some(temperature)})
            }
            "aps" | "raps" => {
                let variant = if method == "aps" { ConformalVariant::Aps } else { ConformalVariant::Raps };
                let cal = fit_conformal(&probs(cal_logits, 1.0), cal_labels, variant, &conformal, None)?;
                let sets: Vec<Vec<usize>> = test_probs.iter().map(|p| conformal_predict(&cal, p, None)).collect();
                let summary = summarize_sets(&sets, &labels);
                if matches!(args.format, Format::Text) {
                    println!(
                        "{method}: coverage {:.3}  mean size {:.3}  singletons {:.2} (accuracy {})",
                        summary.coverage,
                        summary.mean_size,
                        summary.singleton_fraction,
                        summary.singleton_accuracy.map_or("N/A".to_string(), |a| format!("{a:.3}"))
                    );
                }
                json!({"threshold": cal.threshold, "summary": summary})
            }
            other => bail!("unknown baseline method {other:?} (expected softmax, temp, aps or raps)"),
        };
        results.insert(method.clone(), value);
    }
    if matches!(args.format, Format::Json) {
        println!("{}", serde_json::to_string_pretty(&Value::Object(results))?);
    }
    Ok(())
}

fn net_train(args: NetTrainArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    if corpus.is_empty() {
        bail!("{} has no instances", args.corpus.display());
    }
    let vocab = args
        .vocab
        .unwrap_or_else(|| corpus.iter().flat_map(|i| i.tokens.iter().copied()).max().unwrap_or(0) + 1)
        .max(FIRST_CONTENT + 1);
    let lm_config = ToyLmConfig {
        vocab,
        embed_dim: args.embed_dim,
        hidden_dim: args.hidden_dim,
        seed: args.seed,
    };
    let verifier_config = TrainingRunConfig {
        rounds: args.j,
        max_epochs: args.verifier_epochs,
        learning_rate: args.verifier_lr,
        alpha_prime: args.alpha,
        seed: args.seed,
        adaptor: AdaptorConfig {
            filters: args.m,
            ..Default::default()
        },
        rescaler: RescalerConfig {
            seed: args.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let net_config = NetworkTrainConfig {
        schedule: TrainingSchedule {
            beta_min: args.beta_min,
            beta_max: args.beta_max,
            epochs: args.epochs,
        },
        batch_size: args.batch_size,
        learning_rate: args.lr,
        seed: args.seed,
        length_cap: args.max_len,
        ..Default::default()
    };
    echo_config(
        "net-train",
        &json!({"seed": args.seed, "lm": lm_config, "pretrain_epochs": args.pretrain_epochs, "verifier": verifier_config, "network": net_config}),
    );
    let mut lm = ToyLm::new(&lm_config)?;
    lm.pretrain_reference(&corpus, args.pretrain_epochs, 1e-2, 32, args.seed)?;
    let verifier = build_verification_layer(&lm, &corpus, &verifier_config)?;
    let outcome = sdm_network_train(&lm, &corpus, &verifier, &net_config)?;
    for e in &outcome.history {
        println!("{}", serde_json::to_string(e)?);
    }
    save_lm(&args.out, &outcome.lm, &verifier, outcome.length_cap, outcome.selected_epoch)?;
    println!(
        "{}",
        json!({
            "out": args.out,
            "initial_metric": outcome.initial_metric,
            "selected_epoch": outcome.selected_epoch,
            "selected_metric": outcome.selected_metric,
        })
    );
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        let tokens: Vec<usize> = v
            .get("tokens")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|t| t.as_u64().map(|t| t as usize)).collect::<Option<Vec<_>>>())
            .with_context(|| format!("{}:{}: missing or invalid tokens", path.display(), i + 1))?;
        let end = match v.get("marker").and_then(Value::as_u64) {
            Some(m) if (m as usize) < tokens.len() => m as usize + 1,
            Some(m) => bail!("{}:{}: marker {m} is outside the sequence", path.display(), i + 1),
            None => tokens.len(),
        };
        if end == 0 {
            bail!("{}:{}: empty prompt", path.display(), i + 1);
        }
        let id = v.get("id").and_then(Value::as_str).map_or_else(|| format!("line{}", i + 1), str::to_string);
        out.push((id, tokens[..end].to_vec()));
    }
    Ok(out)
}

fn net_generate(args: NetGenerateArgs) -> Result<()> {
    let (lm, verifier, manifest) = load_lm(&args.lm).with_context(|| format!("cannot load model {}", args.lm.display()))?;
    let cap = args.max_len.unwrap_or(manifest.length_cap);
    echo_config("net-generate", &json!({"length_cap": cap, "selected_epoch": manifest.selected_epoch}));
    let prompts = read_prompts(&args.prompt_file)?;
    let mut out = output(args.out.as_deref())?;
    for (id, prompt) in &prompts {
        let (g, verdict) = generate_verified(&lm, &verifier, id, prompt, cap)?;
        serde_json::to_writer(
            &mut out,
            &json!({"id": id, "completion": g.completion, "truncated": g.truncated, "verdict": verdict}),
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn retune(args: RetuneArgs) -> Result<()> {
    let (mut archive, manifest) = archive::load(&args.archive).with_context(|| format!("cannot load archive {}", args.archive.display()))?;
    echo_config("retune", &json!({"from": archive.alpha_prime(), "to": args.alpha}));
    archive.retune(args.alpha)?;
    archive::save(&archive, &args.archive, manifest.datasets)?;
    println!(
        "{}",
        json!({
            "alpha_prime": archive.alpha_prime(),
            "robust_min_valid_qbin": archive.thresholds.robust_min_valid_qbin,
            "psi": archive.thresholds.psi,
        })
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    match args.kind {
        SynthKind::Blobs => {
            let spec = BlobSpec {
                classes: args.classes,
                dim: args.dim,
                separation: args.separation,
                ..Default::default()
            };
            let mut records = Vec::new();
            for (i, (split, prefix)) in [(Split::Train, "tr"), (Split::Calibration, "ca"), (Split::Test, "te")].into_iter().enumerate() {
                let part = gaussian_blobs(&spec, args.n, args.seed.wrapping_add(i as u64), prefix, Some(split));
                records.extend(if split == Split::Test { shifted(&part, args.test_shift) } else { part });
            }
            write_instances(&args.out, &records)?;
        }
        SynthKind::Corpus => {
            let corpus = two_pattern_corpus(&CorpusSpec {
                vocab: args.vocab,
                instances: args.n,
                seed: args.seed,
                ..Default::default()
            });
            write_corpus(&args.out, &corpus)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Baselines(a) => baselines(a),
        Command::NetTrain(a) => net_train(a),
        Command::NetGenerate(a) => net_generate(a),
        Command::Retune(a) => retune(a),
        Command::Synth(a) => synth(a),
    });
    if let Err(e) = result {
        let broken_pipe = e
            .chain()
            .any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe));
        if broken_pipe {
            return;
        }
        log::debug!("{e:?}");
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
