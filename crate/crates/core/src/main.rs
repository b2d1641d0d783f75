use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mwer_core::data::{self, TaskSpec};
use mwer_core::decoding::{beam_search, default_max_len, nbest_records};
use mwer_core::gradcheck;
use mwer_core::harness::{
    self, evaluate, run_experiment_suite, write_bundle, write_outcome, ExperimentKind, TrainConfig, TrainStatus,
};
use mwer_core::losses::{ce_loss, nbest_loss_fixed, LossConfig, LossVariant};
use mwer_core::model::{checkpoint, ModelParams};
use mwer_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mwer", version, about = "Minimum word error rate training for attention encoder/decoder models")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and split it into train/heldout/test files.
    GenerateData(GenerateArgs),
    /// Cross-entropy training.
    TrainCe(TrainArgs),
    /// MWER fine-tuning from a CE checkpoint.
    TrainMwer(TrainArgs),
    /// Write beam search N-best lists.
    Decode(DecodeArgs),
    /// Corpus WER and per-utterance error counts.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Run a fine-tuning sweep (fig2a, fig2b, fig2c, fig4 or all).
    Experiment(ExperimentArgs),
}

/// Shared by every subcommand: a flat `key = value` file whose keys are the
/// long flag names. Flags on the command line take precedence.
#[derive(Args, Debug)]
struct ConfigArg {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2400)]
    count: usize,
    /// Comma-separated word list.
    #[arg(long, value_delimiter = ',')]
    vocab_words: Option<Vec<String>>,
    /// Inclusive range as `min,max`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    words_per_utterance: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    frames_per_grapheme: Option<Vec<usize>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train, heldout and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    encoder_cell: Option<usize>,
    #[arg(long)]
    bidirectional: Option<bool>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    decoder_cell: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// ce, mwer_nbest or mwer_sample.
    #[arg(long)]
    loss: Option<LossVariant>,
    /// Sample count or N-best depth.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    eval_beam: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    heldout: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    beam_size: usize,
    #[arg(long)]
    max_len: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    beam_size: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Utterance index within the data file.
    #[arg(long, default_value_t = 0)]
    utterance: usize,
    /// ce or mwer_nbest (on a fixed beam search list).
    #[arg(long, default_value = "ce")]
    loss: LossVariant,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Number of evenly spaced coordinates to probe.
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// fig2a, fig2b, fig2c, fig4 or all.
    #[arg(long, default_value = "all")]
    kind: String,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Contract(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn generate_data(a: GenerateArgs) -> CliResult {
    let d = TaskSpec::default();
    let range = |v: Option<Vec<usize>>, default: [usize; 2]| v.map_or(default, |v| [v[0], v[1]]);
    let spec = TaskSpec {
        vocab_words: a.vocab_words.unwrap_or(d.vocab_words),
        words_per_utterance: range(a.words_per_utterance, d.words_per_utterance),
        frames_per_grapheme: range(a.frames_per_grapheme, d.frames_per_grapheme),
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        noise_std: a.noise_std.unwrap_or(d.noise_std),
        seed: a.seed.unwrap_or(d.seed),
    };
    let all = data::generate(&spec, a.count)?;
    let (train, heldout, test) = data::split(&all, [a.split[0], a.split[1], a.split[2]], spec.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for part in [&train, &heldout, &test] {
        let path = a.out_dir.join(format!("{}.jsonl", part.split));
        data::save(part, &path)?;
        eprintln!("wrote {} utterances to {}", part.len(), path.display());
    }
    Ok(())
}

fn train_config(a: &TrainArgs, mwer: bool) -> TrainConfig {
    let mut cfg = match (&a.init_checkpoint, mwer) {
        (Some(p), true) => TrainConfig::mwer(p),
        (None, true) => TrainConfig {
            init_checkpoint: None,
            ..TrainConfig::mwer(PathBuf::new())
        },
        (p, false) => TrainConfig {
            init_checkpoint: p.clone(),
            ..TrainConfig::ce()
        },
    };
    macro_rules! set {
        ($($dst:expr => $src:expr),* $(,)?) => { $( if let Some(v) = $src { $dst = v; } )* };
    }
    set! {
        cfg.batch_size => a.batch_size,
        cfg.max_steps => a.max_steps,
        cfg.eval_every => a.eval_every,
        cfg.seed => a.seed,
        cfg.optimizer.step_size => a.step_size,
        cfg.optimizer.beta1 => a.beta1,
        cfg.optimizer.beta2 => a.beta2,
        cfg.optimizer.epsilon => a.epsilon,
        cfg.loss.variant => a.loss.loss,
        cfg.loss.n => a.loss.n,
        cfg.loss.lambda => a.loss.lambda,
        cfg.model.encoder_layers => a.model.encoder_layers,
        cfg.model.encoder_cell => a.model.encoder_cell,
        cfg.model.bidirectional => a.model.bidirectional,
        cfg.model.decoder_layers => a.model.decoder_layers,
        cfg.model.decoder_cell => a.model.decoder_cell,
        cfg.model.heads => a.model.heads,
        cfg.model.attention_dim => a.model.attention_dim,
        cfg.model.context_dim => a.model.context_dim,
        cfg.model.embedding_dim => a.model.embedding_dim,
        cfg.init_scale => a.model.init_scale,
        cfg.eval.beam_size => a.eval.eval_beam,
        cfg.eval.samples => a.eval.eval_samples,
        cfg.eval.seed => a.eval.eval_seed,
    }
    if a.loss.max_len.is_some() {
        cfg.loss.max_len = a.loss.max_len;
    }
    cfg
}

fn run_training(a: TrainArgs, mwer: bool) -> CliResult {
    let cfg = train_config(&a, mwer);
    cfg.validate()?;
    let train_set = data::load(&a.train)?;
    let heldout = data::load(&a.heldout)?;
    let outcome = harness::train(&cfg, &train_set, &heldout)?;
    let files = write_outcome(&outcome, &a.out_dir)?;
    let config_path = a.out_dir.join("train_config.json");
    let config_json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(&config_path, config_json + "\n").map_err(|e| Error::io(&config_path, e))?;
    if let Some(last) = outcome.records.last() {
        eprintln!(
            "step {}: held-out WER {}",
            last.step,
            last.heldout_wer.map_or("-".into(), |w| format!("{w:.2}%"))
        );
    }
    eprintln!("checkpoint {}", files.checkpoint.display());
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::NonFinite { step, detail } => Err(Failure::Runtime(format!("aborted at step {step}: {detail}"))),
    }
}

fn load_pair(ckpt: &Path, data_path: &Path) -> Result<(ModelParams, data::Dataset), Error> {
    let params = checkpoint::load(ckpt)?;
    let ds = data::load(data_path)?;
    if ds.vocab != params.vocab {
        return Err(Error::Config(format!(
            "{} and {} use different vocabularies",
            ckpt.display(),
            data_path.display()
        )));
    }
    Ok((params, ds))
}

fn decode(a: DecodeArgs) -> CliResult {
    let (params, ds) = load_pair(&a.checkpoint, &a.data)?;
    let mut out = String::new();
    for utt in &ds.utterances {
        let enc = params.encode(&utt.features)?;
        let max_len = a.max_len.unwrap_or_else(|| default_max_len(utt.frames()));
        let list = beam_search(&params, &enc, a.beam_size, max_len)?;
        let records = nbest_records(&utt.id, &list, &params.vocab);
        out.push_str(&harness::records_to_jsonl(&records));
    }
    write_text(a.out.as_deref(), &out)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let (params, ds) = load_pair(&a.checkpoint, &a.data)?;
    let cfg = harness::EvalConfig {
        beam_size: a.beam_size,
        samples: a.samples,
        seed: a.seed,
    };
    if cfg.beam_size == 0 {
        return Err(Failure::Usage("beam size must be positive".into()));
    }
    let report = evaluate(&params, &ds, &cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(a.out.as_deref(), &text)?;
    eprintln!("WER {:.2}% over {} utterances", report.wer, ds.len());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    let (params, ds) = load_pair(&a.checkpoint, &a.data)?;
    let utt = ds
        .utterances
        .get(a.utterance)
        .ok_or_else(|| Failure::Usage(format!("utterance index {} out of range", a.utterance)))?;
    let x = params.flatten();
    let stride = (x.len() / a.coords.max(1)).max(1);
    let coords: Vec<usize> = (0..x.len()).step_by(stride).collect();
    let mut probe = params.clone();
    let results = match a.loss {
        LossVariant::Ce => {
            let (_, g) = ce_loss(&params, utt)?;
            gradcheck::check(&x, &g.flatten(), &coords, a.step, 1e-5, |flat| {
                probe.set_flat(flat).expect("same length");
                ce_loss(&probe, utt).expect("ce evaluates").0
            })
        }
        LossVariant::MwerNbest => {
            let enc = params.encode(&utt.features)?;
            let list = beam_search(&params, &enc, a.n, default_max_len(utt.frames()))?;
            let hyps: Vec<Vec<usize>> = list.hypotheses.into_iter().map(|h| h.labels).collect();
            let (_, g) = nbest_loss_fixed(&params, utt, &hyps, true)?;
            gradcheck::check(&x, &g.flatten(), &coords, a.step, 1e-5, |flat| {
                probe.set_flat(flat).expect("same length");
                nbest_loss_fixed(&probe, utt, &hyps, true).expect("loss evaluates").0
            })
        }
        LossVariant::MwerSample => {
            return Err(Failure::Usage(
                "the sampling loss has a stochastic gradient; check ce or mwer_nbest".into(),
            ))
        }
    };
    let worst = gradcheck::max_rel_error(&results);
    println!(
        "{}",
        serde_json::json!({
            "loss": a.loss,
            "coordinates": results.len(),
            "parameters": x.len(),
            "max_rel_error": worst,
            "tolerance": a.tolerance,
            "passed": worst < a.tolerance,
        })
    );
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("max relative error {worst:e} exceeds {:e}", a.tolerance)))
    }
}

fn experiment(a: ExperimentArgs) -> CliResult {
    let kinds: Vec<ExperimentKind> = if a.kind == "all" {
        ExperimentKind::ALL.to_vec()
    } else {
        vec![a.kind.parse()?]
    };
    let mut cfg = train_config(&a.train, true);
    if a.train.loss.loss.is_none() {
        cfg.loss = LossConfig {
            max_len: cfg.loss.max_len,
            ..LossConfig::nbest(cfg.loss.n, cfg.loss.lambda)
        };
    }
    cfg.validate()?;
    let train_set = data::load(&a.train.train)?;
    let heldout = data::load(&a.train.heldout)?;
    for kind in kinds {
        let bundle = run_experiment_suite(kind, &cfg, &train_set, &heldout)?;
        let dir = a.train.out_dir.join(kind.name());
        write_bundle(&bundle, &dir)?;
        eprintln!("{kind}:\n{}", harness::summary_table(&bundle.summary));
    }
    Ok(())
}

/// Insert `--key value` pairs from every `--config FILE` right after the
/// subcommand so that explicit flags, which come later, override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strings: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut files = Vec::new();
    let mut rest = Vec::new();
    let mut i = 0;
    while i < strings.len() {
        let s = &strings[i];
        if s == "--config" {
            let path = strings
                .get(i + 1)
                .ok_or_else(|| Failure::Usage("--config needs a file path".into()))?;
            files.push(path.clone());
            i += 2;
        } else if let Some(path) = s.strip_prefix("--config=") {
            files.push(path.to_string());
            i += 1;
        } else {
            rest.push(args[i].clone());
            i += 1;
        }
    }
    if files.is_empty() || rest.len() < 2 {
        return Ok(args);
    }
    let mut out = vec![rest[0].clone(), rest[1].clone()];
    for f in files {
        for (k, v) in harness::read_config_file(&f).map_err(|e| Failure::Usage(e.to_string()))? {
            out.push(format!("--{k}").into());
            out.push(v.into());
        }
    }
    out.extend(rest.into_iter().skip(2));
    Ok(out)
}

fn run() -> CliResult {
    let args = expand_config(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.print().ok();
                return Ok(());
            }
            return Err(Failure::Usage(e.render().to_string()));
        }
    };
    match cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::TrainCe(a) => run_training(a, false),
        Command::TrainMwer(a) => run_training(a, true),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            let m = m.trim_end();
            eprintln!("{}", if m.starts_with("error:") { m.to_string() } else { format!("usage error: {m}") });
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
