//! Sessions, vocabulary and sliding-window sample construction.
//!
//! Input is pre-templated: every line of a sessions file is
//! `session_id<TAB>key key key...`, and a labels file is `session_id<TAB>0|1`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer code of a log template. `0` is reserved for padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub u32);

impl EventId {
    pub const PAD: EventId = EventId(0);
    /// Marks a position whose template was never seen in training.
    pub const OOV: EventId = EventId(u32::MAX);

    pub fn is_pad(self) -> bool {
        self == Self::PAD
    }

    /// Zero-based class index used by the prediction head (`id - 1`).
    pub fn class_index(self) -> usize {
        debug_assert!(self != Self::PAD && self != Self::OOV);
        self.0 as usize - 1
    }

    pub fn from_class_index(i: usize) -> EventId {
        EventId(i as u32 + 1)
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::PAD => f.write_str("<pad>"),
            Self::OOV => f.write_str("<oov>"),
            EventId(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub events: Vec<String>,
    pub label: Option<Label>,
}

impl Session {
    pub fn new(id: impl Into<String>, events: Vec<String>) -> Self {
        Session {
            id: id.into(),
            events,
            label: None,
        }
    }

    pub fn labeled(id: impl Into<String>, events: Vec<String>, label: Label) -> Self {
        Session {
            id: id.into(),
            events,
            label: Some(label),
        }
    }
}

/// Template-key to [`EventId`] mapping built from training sessions only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, EventId>,
    keys: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from keys in the given order; repeats are ignored.
    pub fn from_keys<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::default();
        for k in keys {
            v.insert(k.into());
        }
        v
    }

    fn insert(&mut self, key: String) -> EventId {
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        let id = EventId(self.keys.len() as u32 + 1);
        self.ids.insert(key.clone(), id);
        self.keys.push(key);
        id
    }

    /// Number of trained events, excluding padding.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id(&self, key: &str) -> Option<EventId> {
        self.ids.get(key).copied()
    }

    pub fn key(&self, id: EventId) -> Option<&str> {
        if id.is_pad() {
            return None;
        }
        self.keys.get(id.0 as usize - 1).map(String::as_str)
    }

    /// Keys in id order (`keys()[i]` has id `i + 1`).
    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Human readable name of an id, falling back to the numeric form.
    pub fn describe(&self, id: EventId) -> String {
        self.key(id).map_or_else(|| id.to_string(), str::to_string)
    }
}

/// Assigns ids in first-appearance order over the training sessions.
pub fn build_vocabulary(train_sessions: &[Session]) -> Vocabulary {
    Vocabulary::from_keys(train_sessions.iter().flat_map(|s| s.events.iter().cloned()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSession {
    pub session_id: Arc<str>,
    pub event_ids: Vec<EventId>,
    pub contains_oov: bool,
}

impl EncodedSession {
    /// Raw template keys at OOV positions are not retained; the first OOV
    /// index is enough to explain a verdict.
    pub fn first_oov(&self) -> Option<usize> {
        self.event_ids.iter().position(|&e| e == EventId::OOV)
    }
}

pub fn encode_session(session: &Session, vocab: &Vocabulary) -> EncodedSession {
    let event_ids: Vec<EventId> = session
        .events
        .iter()
        .map(|k| vocab.id(k).unwrap_or(EventId::OOV))
        .collect();
    let contains_oov = event_ids.contains(&EventId::OOV);
    EncodedSession {
        session_id: Arc::from(session.id.as_str()),
        event_ids,
        contains_oov,
    }
}

/// Where a window came from: the session and the index of its target event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowOrigin {
    pub session_id: Arc<str>,
    pub target_index: usize,
}

impl WindowOrigin {
    /// Session index of the first window slot. Negative for left-padded windows.
    pub fn start(&self, window_len: usize) -> isize {
        self.target_index as isize - window_len as isize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSample {
    pub window: Vec<EventId>,
    pub target: EventId,
    pub origin: WindowOrigin,
}

/// Cuts a session into fixed-length windows, each paired with the event that
/// follows it.
///
/// A session longer than `window_len` yields `n - window_len` stride-1
/// windows. A shorter (or equal) session is left-padded instead: every event
/// after the first is predicted from its padded prefix, giving `n - 1`
/// samples.
pub fn window_session(enc: &EncodedSession, window_len: usize) -> Result<Vec<WindowSample>> {
    if window_len < 1 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    if enc.contains_oov {
        return Err(Error::InvalidArgument(format!(
            "session `{}` contains OOV events and cannot be windowed",
            enc.session_id
        )));
    }
    let events = &enc.event_ids;
    let n = events.len();
    let origin = |target_index| WindowOrigin {
        session_id: enc.session_id.clone(),
        target_index,
    };
    if n > window_len {
        Ok((0..n - window_len)
            .map(|i| WindowSample {
                window: events[i..i + window_len].to_vec(),
                target: events[i + window_len],
                origin: origin(i + window_len),
            })
            .collect())
    } else {
        Ok((1..n)
            .map(|t| {
                let mut window = vec![EventId::PAD; window_len - t];
                window.extend_from_slice(&events[..t]);
                WindowSample {
                    window,
                    target: events[t],
                    origin: origin(t),
                }
            })
            .collect())
    }
}

/// Windows every session in order. OOV sessions are an error.
pub fn window_sessions(sessions: &[EncodedSession], window_len: usize) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(window_session(s, window_len)?);
    }
    Ok(out)
}

/// Reads a sessions-tsv stream. Repeated session ids are merged in file order.
pub fn parse_sessions<R: BufRead>(input: R) -> Result<Vec<Session>> {
    let mut order: Vec<Session> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: "expected `session_id<TAB>events`".into(),
        })?;
        if id.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty session id".into(),
            });
        }
        let events: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if events.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("session `{id}` has no events"),
            });
        }
        match index.get(id) {
            Some(&pos) => order[pos].events.extend(events),
            None => {
                index.insert(id.to_string(), order.len());
                order.push(Session::new(id, events));
            }
        }
    }
    Ok(order)
}

/// Reads a labels-tsv stream (`1` = anomaly, `0` = normal).
pub fn parse_labels<R: BufRead>(input: R) -> Result<HashMap<String, Label>> {
    let mut labels = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let (id, flag) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `session_id<TAB>0|1`".into()))?;
        let label = match flag.trim() {
            "0" => Label::Normal,
            "1" => Label::Anomaly,
            other => return Err(parse_err(format!("bad label `{other}`"))),
        };
        labels.insert(id.to_string(), label);
    }
    Ok(labels)
}

/// Attaches labels to sessions; every session must be labeled.
pub fn attach_labels(sessions: &mut [Session], labels: &HashMap<String, Label>) -> Result<()> {
    for s in sessions.iter_mut() {
        let label = labels
            .get(&s.id)
            .ok_or_else(|| Error::MissingLabel(s.id.clone()))?;
        s.label = Some(*label);
    }
    Ok(())
}

pub fn write_sessions<W: Write>(mut out: W, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        writeln!(out, "{}\t{}", s.id, s.events.join(" "))?;
    }
    Ok(())
}

/// Writes labels of labeled sessions; unlabeled sessions are skipped.
pub fn write_labels<W: Write>(mut out: W, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        if let Some(label) = s.label {
            writeln!(out, "{}\t{}", s.id, u8::from(label.is_anomaly()))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

/// Seeded split: a `normal_train_fraction` share of normal sessions goes to
/// training; the remaining normals and every anomaly form the test set.
///
/// The train count is `round(fraction * normals)`, clamped to at least one.
pub fn split_dataset(sessions: &[Session], normal_train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(normal_train_fraction > 0.0 && normal_train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {normal_train_fraction} not in (0, 1)"
        )));
    }
    let mut normals = Vec::new();
    let mut anomalies = Vec::new();
    for s in sessions {
        match s.label {
            Some(Label::Normal) => normals.push(s.clone()),
            Some(Label::Anomaly) => anomalies.push(s.clone()),
            None => return Err(Error::MissingLabel(s.id.clone())),
        }
    }
    if normals.is_empty() {
        return Err(Error::NoNormalSessions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normals.shuffle(&mut rng);
    let n_train = ((normal_train_fraction * normals.len() as f64).round() as usize).max(1);
    let test_normals = normals.split_off(n_train);
    let mut test = test_normals;
    test.extend(anomalies);
    Ok(DatasetSplit {
        train: normals,
        test,
    })
}
