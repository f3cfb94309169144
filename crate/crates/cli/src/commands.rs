use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lama_core::checkpoint::{Checkpoint, TrainingMeta, MAGIC};
use lama_core::datagen::{AnomalyKind, Automaton};
use lama_core::detection::{
    classify_sessions, evaluate, parse_report, write_report, AttentionModel, Metrics, MetricsMode, NextEventModel,
    ScanMode, Verdict,
};
use lama_core::model::{check_gradients, ModelConfig, ModelParams, Pooling};
use lama_core::ngram::NgramModel;
use lama_core::pipeline::{
    attach_labels, encode_session, parse_labels, parse_sessions, write_labels, write_sessions, EventId, Session,
    Vocabulary, WindowOrigin, WindowSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DetectorKind, Hyper, RunConfig};
use crate::experiment::{fit_baseline, prepare, synthesize, train_lama, Scored, SyntheticSpec};
use crate::{AblateArgs, CliError, DetectArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

fn open(path: &Path, what: &str) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot read {what} file {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Internal(anyhow::anyhow!("cannot create {}: {e}", path.display())))
}

fn in_file(path: &Path, e: lama_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>, CliError> {
    parse_sessions(open(path, "sessions")?).map_err(|e| in_file(path, e))
}

pub fn read_labelled(sessions: &Path, labels: &Path) -> Result<Vec<Session>, CliError> {
    let mut s = read_sessions(sessions)?;
    let l = parse_labels(open(labels, "labels")?).map_err(|e| in_file(labels, e))?;
    attach_labels(&mut s, &l).map_err(|e| in_file(labels, e))?;
    Ok(s)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let automaton = match &a.automaton {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read automaton file {}: {e}", p.display())))?
            .parse::<Automaton>()
            .map_err(|e| in_file(p, e))?,
        None => Automaton::default_automaton(),
    };
    let kinds = a
        .kinds
        .iter()
        .map(|k| k.trim().parse::<AnomalyKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SyntheticSpec {
        sessions: a.count,
        anomaly_rate: a.anomaly_rate,
        kinds,
        seed: a.seed,
    };
    let out = synthesize(&automaton, &spec)?;
    let mut w = create(&a.sessions)?;
    write_sessions(&mut w, &out.sessions)?;
    w.flush()?;
    let mut w = create(&a.labels)?;
    write_labels(&mut w, &out.sessions)?;
    w.flush()?;
    if let Some(p) = &a.injections {
        let mut w = create(p)?;
        for inj in &out.injections {
            let pos: Vec<String> = inj.positions.iter().map(usize::to_string).collect();
            writeln!(w, "{}\t{}\t{}", inj.session_id, inj.kind, pos.join(","))?;
        }
        w.flush()?;
    }
    eprintln!(
        "wrote {} sessions ({} anomalous) to {}",
        out.sessions.len(),
        out.injections.len(),
        a.sessions.display()
    );
    Ok(())
}

/// On-disk form of a fitted n-gram detector.
#[derive(Serialize, Deserialize)]
struct NgramFile {
    format: String,
    window: usize,
    top_k: usize,
    vocab: Vec<String>,
    model: NgramModel,
}

const NGRAM_FORMAT: &str = "lama-ngram-1";

fn write_split(path: &Path, labels: &Path, sessions: &[Session]) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_sessions(&mut w, sessions)?;
    w.flush()?;
    let mut w = create(labels)?;
    write_labels(&mut w, sessions)?;
    w.flush()?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let hyper = a.hyper.clone().merged(a.config.as_deref())?;
    let rc = RunConfig::resolve(&hyper)?;
    let sessions = read_labelled(&a.sessions, &a.labels)?;
    let data = prepare(&sessions, rc.train_fraction, rc.train.seed)?;
    eprintln!(
        "{} training sessions, {} held out, {} distinct events",
        data.train.len(),
        data.test.len(),
        data.vocab.len()
    );
    if let (Some(s), Some(l)) = (&a.test_sessions, &a.test_labels) {
        write_split(s, l, &data.test_sessions)?;
    }

    match rc.detector {
        DetectorKind::Lama => {
            if rc.model.top_k > data.vocab.len() {
                return Err(CliError::Usage(format!(
                    "--topk {} exceeds the {} known events",
                    rc.model.top_k,
                    data.vocab.len()
                )));
            }
            let (config, outcome) = train_lama(&data, &rc.model, &rc.train, |epoch, loss| {
                eprintln!("epoch {}: loss {loss:.6}", epoch + 1)
            })?;
            let ckpt = Checkpoint {
                config,
                vocab: data.vocab,
                params: outcome.params,
                meta: TrainingMeta {
                    seed: rc.train.seed,
                    epochs: rc.train.epochs as u64,
                    final_loss: outcome.loss_history.last().copied().unwrap_or(f64::NAN),
                },
            };
            let mut w = create(&a.out)?;
            w.write_all(&ckpt.to_bytes())?;
            w.flush()?;
            let loss_path = a.loss_out.clone().unwrap_or_else(|| suffixed(&a.out, ".loss.tsv"));
            let mut w = create(&loss_path)?;
            writeln!(w, "epoch\tloss")?;
            for (i, l) in outcome.loss_history.iter().enumerate() {
                writeln!(w, "{}\t{l}", i + 1)?;
            }
            w.flush()?;
        }
        DetectorKind::Ngram => {
            let model = fit_baseline(&data, rc.ngram_order)?;
            let file = NgramFile {
                format: NGRAM_FORMAT.into(),
                window: rc.model.window,
                top_k: rc.model.top_k.min(data.vocab.len()),
                vocab: data.vocab.keys().to_vec(),
                model,
            };
            let mut w = create(&a.out)?;
            serde_json::to_writer(&mut w, &file).map_err(anyhow::Error::from)?;
            w.flush()?;
        }
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

enum Loaded {
    Lama(Checkpoint),
    Ngram(NgramFile, Vocabulary),
}

fn load_detector(path: &Path) -> Result<Loaded, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.starts_with(MAGIC) {
        return Ok(Loaded::Lama(Checkpoint::from_bytes(&bytes).map_err(|e| in_file(path, e))?));
    }
    let file: NgramFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("{} is neither a model checkpoint nor an n-gram file: {e}", path.display())))?;
    if file.format != NGRAM_FORMAT {
        return Err(CliError::Usage(format!("{}: unknown n-gram format `{}`", path.display(), file.format)));
    }
    let vocab = Vocabulary::from_keys(file.vocab.iter().cloned());
    if vocab.len() != file.model.num_events() {
        return Err(CliError::Usage(format!("{}: vocabulary does not match the model", path.display())));
    }
    Ok(Loaded::Ngram(file, vocab))
}

/// Fails when a flag that was given disagrees with the stored model.
fn check_flags(h: &Hyper, c: &ModelConfig) -> Result<(), CliError> {
    let pooling: Option<Pooling> = h.pooling.map(Into::into);
    let checks = [
        ("--d", h.d, c.d_model),
        ("--heads", h.heads, c.heads),
        ("--layers", h.layers, c.layers),
        ("--ff", h.ff, c.d_ff),
        ("--window", h.window, c.window),
    ];
    for (flag, given, stored) in checks {
        if let Some(g) = given {
            if g != stored {
                return Err(CliError::Usage(format!(
                    "{flag} {g} does not match the checkpoint ({stored})"
                )));
            }
        }
    }
    if pooling.is_some_and(|p| p != c.pooling) {
        return Err(CliError::Usage("--pooling does not match the checkpoint".into()));
    }
    Ok(())
}

pub fn detect(a: &DetectArgs) -> Result<(), CliError> {
    let hyper = a.hyper.clone().merged(a.config.as_deref())?;
    let loaded = load_detector(&a.checkpoint)?;
    let sessions = read_sessions(&a.sessions)?;
    let mode = if a.exhaustive { ScanMode::Exhaustive } else { ScanMode::FirstMiss };

    let (verdicts, vocab) = match &loaded {
        Loaded::Lama(ck) => {
            if hyper.detector == Some(DetectorKind::Ngram) {
                return Err(CliError::Usage("--detector ngram given but the checkpoint is a LAMA model".into()));
            }
            check_flags(&hyper, &ck.config)?;
            let k = hyper.topk.unwrap_or(ck.config.top_k);
            let enc: Vec<_> = sessions.iter().map(|s| encode_session(s, &ck.vocab)).collect();
            let model = AttentionModel::new(&ck.params, &ck.config);
            (run_classify(&enc, &model, k, mode)?, &ck.vocab)
        }
        Loaded::Ngram(file, vocab) => {
            if hyper.detector == Some(DetectorKind::Lama) {
                return Err(CliError::Usage("--detector lama given but the checkpoint is an n-gram model".into()));
            }
            if hyper.window.is_some_and(|w| w != file.window) {
                return Err(CliError::Usage("--window does not match the n-gram file".into()));
            }
            let k = hyper.topk.unwrap_or(file.top_k);
            let enc: Vec<_> = sessions.iter().map(|s| encode_session(s, vocab)).collect();
            let model = file.model.detector(file.window)?;
            (run_classify(&enc, &model, k, mode)?, vocab)
        }
    };
    let mut w = create(&a.out)?;
    write_report(&mut w, &verdicts, vocab)?;
    w.flush()?;
    let count = |v: Verdict| verdicts.iter().filter(|x| x.verdict == v).count();
    eprintln!(
        "{} sessions: {} normal, {} sequence-anomaly, {} oov-anomaly",
        verdicts.len(),
        count(Verdict::Normal),
        count(Verdict::SequenceAnomaly),
        count(Verdict::OovAnomaly)
    );
    Ok(())
}

fn run_classify(
    enc: &[lama_core::pipeline::EncodedSession],
    model: &dyn NextEventModel,
    k: usize,
    mode: ScanMode,
) -> Result<Vec<lama_core::detection::SessionVerdict>, CliError> {
    if k == 0 || k > model.num_events() {
        return Err(CliError::Usage(format!("--topk {k} must be in 1..={}", model.num_events())));
    }
    Ok(classify_sessions(enc, model, k, mode)?)
}

pub const METRICS_STEMS: [(MetricsMode, &str); 2] = [
    (MetricsMode::WithoutOov, "metrics-without-oov"),
    (MetricsMode::WithOov, "metrics-with-oov"),
];

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let report = parse_report(open(&a.report, "report")?).map_err(|e| in_file(&a.report, e))?;
    let labels = parse_labels(open(&a.labels, "labels")?).map_err(|e| in_file(&a.labels, e))?;
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.report.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    for (mode, stem) in METRICS_STEMS {
        let m = evaluate(
            report.iter().map(|r| (r.session_id.as_str(), r.verdict)),
            &labels,
            mode,
        )
        .map_err(|e| in_file(&a.labels, e))?;
        fs::write(dir.join(format!("{stem}.txt")), m.to_text())?;
        fs::write(dir.join(format!("{stem}.json")), m.to_json())?;
        print!("{}", m.to_text());
        println!();
    }
    Ok(())
}

/// Mean with the distances to the maximum and minimum, as `mean +up -down`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub plus: f64,
    pub minus: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Spread {
            mean,
            plus: (max - mean).max(0.0),
            minus: (mean - min).max(0.0),
        }
    }
}

impl fmt::Display for Spread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} +{:.3} -{:.3}", self.mean, self.plus, self.minus)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub layers: usize,
    pub heads: usize,
    pub runs: Vec<Metrics>,
    pub precision: Spread,
    pub recall: Spread,
    pub f1: Spread,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("b\th\tprecision\trecall\tf1\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.layers, r.heads, r.precision, r.recall, r.f1
        ));
    }
    out
}

pub fn ablate(a: &AblateArgs) -> Result<Vec<AblationRow>, CliError> {
    let hyper = a.hyper.clone().merged(a.config.as_deref())?;
    let rc = RunConfig::resolve(&hyper)?;
    if a.repeats < 1 || a.layers_grid.is_empty() || a.heads_grid.is_empty() {
        return Err(CliError::Usage("the grid and --repeats must be non-empty".into()));
    }
    let sessions = match (&a.sessions, &a.labels, a.synthetic) {
        (Some(s), Some(l), None) => read_labelled(s, l)?,
        (None, None, Some(n)) => synthesize(&Automaton::default_automaton(), &SyntheticSpec::new(n, rc.train.seed))?.sessions,
        _ => return Err(CliError::Usage("give either --sessions and --labels, or --synthetic N".into())),
    };
    let data = prepare(&sessions, rc.train_fraction, rc.train.seed)?;
    let mode = MetricsMode::from(a.mode);
    let mut rows = Vec::new();
    for &layers in &a.layers_grid {
        for &heads in &a.heads_grid {
            let model = ModelConfig {
                layers,
                heads,
                ..rc.model.clone()
            };
            model.validate().map_err(|e| CliError::Usage(format!("b={layers}, h={heads}: {e}")))?;
            let mut runs = Vec::with_capacity(a.repeats);
            for r in 0..a.repeats {
                let train = lama_core::training::TrainConfig {
                    seed: rc.train.seed.wrapping_add(r as u64),
                    ..rc.train.clone()
                };
                let (config, outcome) = train_lama(&data, &model, &train, |_, _| {})?;
                let k = config.top_k.min(config.num_events);
                let m = Scored::lama(&data.test, &outcome.params, &config)?.metrics(k, &data.labels, mode)?;
                eprintln!("b={layers} h={heads} run {}: f1 {:.4}", r + 1, m.f1);
                runs.push(m);
            }
            let pick = |f: fn(&Metrics) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
            rows.push(AblationRow {
                layers,
                heads,
                precision: pick(|m| m.precision),
                recall: pick(|m| m.recall),
                f1: pick(|m| m.f1),
                runs,
            });
        }
    }
    let table = format_ablation(&rows);
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &table)?;
    }
    Ok(rows)
}

/// The tiny configuration the gradient check runs on.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        window: 5,
        num_events: 6,
        top_k: 2,
        dropout: 0.0,
        pooling: Pooling::Last,
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Per-tensor relative errors of the gradient check: random parameters and a
/// small batch (one window left-padded), seeded by `seed`.
pub fn gradcheck_errors(seed: u64, epsilon: f64) -> Result<Vec<(String, f64)>, CliError> {
    let config = gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&config, &mut rng)?;
    let n = config.num_events as u32;
    let batch: Vec<WindowSample> = (0..4)
        .map(|i| {
            let pad = if i == 0 { 2 } else { 0 };
            let window = (0..config.window)
                .map(|j| if j < pad { EventId::PAD } else { EventId(rng.gen_range(1..=n)) })
                .collect();
            WindowSample {
                window,
                target: EventId(rng.gen_range(1..=n)),
                origin: WindowOrigin {
                    session_id: "gradcheck".into(),
                    target_index: config.window,
                },
            }
        })
        .collect();
    Ok(check_gradients(&batch, &params, &config, epsilon)?)
}

/// Prints the per-tensor errors; fails unless the worst is below tolerance.
pub fn gradcheck(a: &GradcheckArgs) -> Result<f64, CliError> {
    let errors = gradcheck_errors(a.seed, a.epsilon)?;
    let mut worst = 0.0_f64;
    for (name, e) in &errors {
        println!("{name:<16} {e:.3e}");
        worst = worst.max(*e);
    }
    let pass = worst < GRADCHECK_TOLERANCE;
    println!("max relative error {worst:.3e}: {}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        return Err(CliError::Internal(anyhow::anyhow!(
            "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(worst)
}
