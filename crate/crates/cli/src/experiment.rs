//! End-to-end runs shared by the subcommands and the acceptance suite.

use std::collections::HashMap;

use lama_core::datagen::{generate_corpus, inject_anomalies, AnomalyKind, AnomalySpec, Automaton, InjectedCorpus};
use lama_core::detection::{
    evaluate_verdicts, score_sessions, AttentionModel, Metrics, MetricsMode, NextEventModel, ScanMode, ScoredSession,
    SessionVerdict,
};
use lama_core::model::{ModelConfig, ModelParams};
use lama_core::ngram::{fit_ngram, NgramModel};
use lama_core::pipeline::{
    build_vocabulary, encode_session, split_dataset, window_sessions, EncodedSession, Label, Session, Vocabulary,
};
use lama_core::training::{train_with_progress, TrainConfig, TrainOutcome};
use lama_core::Result;

/// Settings for a generated corpus with injected anomalies.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub sessions: usize,
    pub anomaly_rate: f64,
    pub kinds: Vec<AnomalyKind>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(sessions: usize, seed: u64) -> Self {
        SyntheticSpec {
            sessions,
            anomaly_rate: 0.03,
            kinds: vec![AnomalyKind::Swap, AnomalyKind::Substitute, AnomalyKind::InsertOov],
            seed,
        }
    }
}

pub fn synthesize(automaton: &Automaton, spec: &SyntheticSpec) -> Result<InjectedCorpus> {
    let corpus = generate_corpus(automaton, spec.sessions, spec.seed)?;
    let anomalies = AnomalySpec {
        kinds: spec.kinds.clone(),
        rate: spec.anomaly_rate,
    };
    inject_anomalies(&corpus, &anomalies, automaton, spec.seed.wrapping_add(1))
}

/// A labelled corpus split into encoded train and test sessions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Vec<EncodedSession>,
    pub test: Vec<EncodedSession>,
    pub train_sessions: Vec<Session>,
    pub test_sessions: Vec<Session>,
    pub labels: HashMap<String, Label>,
}

pub fn prepare(sessions: &[Session], train_fraction: f64, seed: u64) -> Result<Prepared> {
    let split = split_dataset(sessions, train_fraction, seed)?;
    let vocab = build_vocabulary(&split.train);
    let encode = |s: &[Session]| s.iter().map(|x| encode_session(x, &vocab)).collect::<Vec<_>>();
    let labels = sessions
        .iter()
        .filter_map(|s| s.label.map(|l| (s.id.clone(), l)))
        .collect();
    Ok(Prepared {
        train: encode(&split.train),
        test: encode(&split.test),
        vocab,
        train_sessions: split.train,
        test_sessions: split.test,
        labels,
    })
}

/// Trains the attention model on the windows of every training session.
pub fn train_lama<F>(data: &Prepared, model: &ModelConfig, train: &TrainConfig, on_epoch: F) -> Result<(ModelConfig, TrainOutcome)>
where
    F: FnMut(usize, f64),
{
    let config = ModelConfig {
        num_events: data.vocab.len(),
        ..model.clone()
    };
    config.validate()?;
    let samples = window_sessions(&data.train, config.window)?;
    let outcome = train_with_progress(&samples, &config, train, on_epoch)?;
    Ok((config, outcome))
}

pub fn fit_baseline(data: &Prepared, order: usize) -> Result<NgramModel> {
    fit_ngram(&data.train, order, data.vocab.len())
}

/// Scores of a detector over a session set, from which verdicts at any k follow.
pub struct Scored {
    pub sessions: Vec<ScoredSession>,
}

impl Scored {
    pub fn new(sessions: &[EncodedSession], model: &dyn NextEventModel) -> Result<Self> {
        Ok(Scored {
            sessions: score_sessions(sessions, model)?,
        })
    }

    pub fn lama(sessions: &[EncodedSession], params: &ModelParams, config: &ModelConfig) -> Result<Self> {
        Scored::new(sessions, &AttentionModel::new(params, config))
    }

    pub fn verdicts(&self, k: usize) -> Result<Vec<SessionVerdict>> {
        self.sessions.iter().map(|s| s.verdict(k, ScanMode::FirstMiss)).collect()
    }

    pub fn metrics(&self, k: usize, labels: &HashMap<String, Label>, mode: MetricsMode) -> Result<Metrics> {
        evaluate_verdicts(&self.verdicts(k)?, labels, mode)
    }
}
