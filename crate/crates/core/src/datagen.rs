//! Seeded synthetic sessions from a probabilistic event automaton, plus
//! controlled anomaly injection.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Label, Session};

/// Name of the implicit terminal state in automaton tables.
pub const END: &str = "END";
pub const MIN_SESSION_LEN: usize = 3;
pub const MAX_SESSION_LEN: usize = 40;
const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub event: String,
    /// `None` ends the session.
    pub next: Option<usize>,
    pub prob: f64,
}

/// States with weighted, event-emitting transitions. State 0 is the start.
#[derive(Clone, Debug, PartialEq)]
pub struct Automaton {
    states: Vec<String>,
    transitions: Vec<Vec<Transition>>,
}

const DEFAULT_TABLE: &str = "\
# state event next prob
S0 E1  S1  1.0
S1 E2  S2  0.35
S1 E18 S2  0.15
S1 E3  S3  0.35
S1 E19 S3  0.15
S2 E4  S4  0.4
S2 E5  S4  0.3
S2 E6  S4  0.2
S2 E7  S4  0.1
S3 E4  S5  0.4
S3 E5  S5  0.3
S3 E6  S5  0.2
S3 E7  S5  0.1
S4 E8  S4  0.25
S4 E9  S6  0.35
S4 E10 S6  0.25
S4 E11 S6  0.15
S5 E8  S5  0.25
S5 E9  S7  0.35
S5 E10 S7  0.25
S5 E11 S7  0.15
S6 E12 END 0.4
S6 E13 END 0.3
S6 E14 END 0.2
S6 E15 END 0.1
S7 E16 END 0.4
S7 E17 END 0.3
S7 E20 END 0.2
S7 E12 END 0.1
";

impl Automaton {
    /// The built-in 8-state, 20-event automaton.
    ///
    /// Both halves of the first branch share their middle events, so which
    /// endings are legal depends on an event several steps back. An order-2
    /// counter cannot see it; a model with a long enough window can.
    pub fn default_automaton() -> Automaton {
        DEFAULT_TABLE.parse().expect("built-in automaton is valid")
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_name(&self, i: usize) -> &str {
        &self.states[i]
    }

    pub fn transitions(&self, state: usize) -> &[Transition] {
        &self.transitions[state]
    }

    /// Distinct emitted events in first-appearance order.
    pub fn events(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.transitions
            .iter()
            .flatten()
            .filter(|t| seen.insert(t.event.as_str()))
            .map(|t| t.event.clone())
            .collect()
    }

    /// Draws one session, which may have any length.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let mut out = Vec::new();
        let mut state = Some(0);
        while let Some(s) = state {
            let options = &self.transitions[s];
            let mut u: f64 = rng.gen();
            let mut pick = &options[options.len() - 1];
            for t in options {
                if u < t.prob {
                    pick = t;
                    break;
                }
                u -= t.prob;
            }
            out.push(pick.event.clone());
            state = pick.next;
            if out.len() > MAX_SESSION_LEN {
                break;
            }
        }
        out
    }

    /// True when some path from the start emits exactly `events` and ends.
    pub fn accepts<S: AsRef<str>>(&self, events: &[S]) -> bool {
        let mut current: BTreeSet<Option<usize>> = BTreeSet::from([Some(0)]);
        for e in events {
            let e = e.as_ref();
            let mut next = BTreeSet::new();
            for s in current.iter().flatten() {
                for t in &self.transitions[*s] {
                    if t.event == e {
                        next.insert(t.next);
                    }
                }
            }
            if next.is_empty() {
                return false;
            }
            current = next;
        }
        current.contains(&None)
    }

    /// Writes the automaton back out as a `state event next prob` table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# state event next prob\n");
        for (s, ts) in self.transitions.iter().enumerate() {
            for t in ts {
                let next = t.next.map_or(END, |n| self.states[n].as_str());
                out.push_str(&format!("{} {} {} {}\n", self.states[s], t.event, next, t.prob));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for (s, ts) in self.transitions.iter().enumerate() {
            if ts.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "state `{}` has no outgoing transitions",
                    self.states[s]
                )));
            }
            let total: f64 = ts.iter().map(|t| t.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "outgoing probabilities of `{}` sum to {total}",
                    self.states[s]
                )));
            }
        }
        // every state reachable from the start
        let mut reached = vec![false; self.states.len()];
        let mut queue = VecDeque::from([0]);
        reached[0] = true;
        while let Some(s) = queue.pop_front() {
            for n in self.transitions[s].iter().filter_map(|t| t.next) {
                if !reached[n] {
                    reached[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if let Some(s) = reached.iter().position(|r| !r) {
            return Err(Error::InvalidArgument(format!(
                "state `{}` is unreachable",
                self.states[s]
            )));
        }
        // and every state can still finish
        let mut finishes: Vec<bool> = self
            .transitions
            .iter()
            .map(|ts| ts.iter().any(|t| t.next.is_none()))
            .collect();
        loop {
            let mut changed = false;
            for s in 0..self.states.len() {
                if !finishes[s] && self.transitions[s].iter().any(|t| t.next.is_some_and(|n| finishes[n])) {
                    finishes[s] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(s) = finishes.iter().position(|f| !f) {
            return Err(Error::InvalidArgument(format!(
                "state `{}` can never reach {END}",
                self.states[s]
            )));
        }
        Ok(())
    }
}

impl FromStr for Automaton {
    type Err = Error;

    /// Parses `state event next_state prob` rows. The first row's state is
    /// the start; `#` starts a comment.
    fn from_str(text: &str) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut states = Vec::new();
        let mut rows = Vec::new();
        let mut intern = |name: &str, states: &mut Vec<String>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                states.push(name.to_string());
                states.len() - 1
            })
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [state, event, next, prob] = fields[..] else {
                return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
            };
            if state == END {
                return Err(parse_err(format!("{END} cannot have outgoing transitions")));
            }
            let prob: f64 = prob
                .parse()
                .map_err(|_| parse_err(format!("bad probability `{prob}`")))?;
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(parse_err(format!("probability {prob} not in (0, 1]")));
            }
            let s = intern(state, &mut states);
            let n = (next != END).then(|| intern(next, &mut states));
            rows.push((s, event.to_string(), n, prob));
        }
        if states.is_empty() {
            return Err(Error::InvalidArgument("automaton table is empty".into()));
        }
        let mut transitions = vec![Vec::new(); states.len()];
        for (s, event, next, prob) in rows {
            transitions[s].push(Transition { event, next, prob });
        }
        let a = Automaton { states, transitions };
        a.validate()?;
        Ok(a)
    }
}

/// `count` normal sessions with ids `s000000`, `s000001`, ...
///
/// Draws outside `[MIN_SESSION_LEN, MAX_SESSION_LEN]` are discarded and redrawn.
pub fn generate_corpus(automaton: &Automaton, count: usize, seed: u64) -> Result<Vec<Session>> {
    if count < 1 {
        return Err(Error::InvalidArgument("session count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            for _ in 0..MAX_DRAWS {
                let events = automaton.sample(&mut rng);
                if (MIN_SESSION_LEN..=MAX_SESSION_LEN).contains(&events.len()) {
                    return Ok(Session::labeled(format!("s{i:06}"), events, Label::Normal));
                }
            }
            Err(Error::InvalidArgument(format!(
                "automaton rarely emits sessions of length {MIN_SESSION_LEN}..={MAX_SESSION_LEN}"
            )))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Exchange two adjacent events.
    Swap,
    /// Replace one event (never the first) with another known event.
    Substitute,
    /// Insert an event the automaton never emits.
    InsertOov,
    /// Drop a suffix of the session.
    Truncate,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::Swap,
        AnomalyKind::Substitute,
        AnomalyKind::InsertOov,
        AnomalyKind::Truncate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Swap => "swap",
            AnomalyKind::Substitute => "substitute",
            AnomalyKind::InsertOov => "insert-oov",
            AnomalyKind::Truncate => "truncate",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown anomaly kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    /// Each mutated session uses one kind, drawn uniformly from this list.
    pub kinds: Vec<AnomalyKind>,
    /// Fraction of sessions to mutate, in (0, 1).
    pub rate: f64,
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument("no anomaly kinds given".into()));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::InvalidArgument(format!("anomaly rate {} not in (0, 1)", self.rate)));
        }
        Ok(())
    }

    /// Sessions to mutate out of `total`: the ceiling of `rate * total`.
    pub fn count_for(&self, total: usize) -> usize {
        // the epsilon keeps 0.03 * 1000 from rounding up to 31
        ((self.rate * total as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Record of one mutated session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Injection {
    pub session_id: String,
    pub kind: AnomalyKind,
    /// Indices touched in the mutated session (for truncation: the new length).
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct InjectedCorpus {
    pub sessions: Vec<Session>,
    pub injections: Vec<Injection>,
}

const MUTATION_TRIES: usize = 64;

/// Mutates exactly `spec.count_for(corpus.len())` sessions and labels them
/// anomalous. Every mutation is redrawn until the automaton rejects the
/// result; a session that cannot take the chosen kind is swapped for another.
pub fn inject_anomalies(
    corpus: &[Session],
    spec: &AnomalySpec,
    automaton: &Automaton,
    seed: u64,
) -> Result<InjectedCorpus> {
    spec.validate()?;
    let target = spec.count_for(corpus.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let vocab = automaton.events();
    let known: HashSet<&str> = vocab.iter().map(String::as_str).collect();

    let mut sessions = corpus.to_vec();
    let mut injections = Vec::with_capacity(target);
    let mut candidates = order.into_iter();
    while injections.len() < target {
        let Some(i) = candidates.next() else {
            return Err(Error::InvalidArgument(format!(
                "only {} of {target} sessions could be mutated",
                injections.len()
            )));
        };
        let kind = *spec.kinds.choose(&mut rng).expect("kinds validated non-empty");
        let original = &sessions[i].events;
        let Some((events, positions)) = mutate(original, kind, automaton, &vocab, &known, &mut rng) else {
            continue;
        };
        let s = &mut sessions[i];
        s.events = events;
        s.label = Some(Label::Anomaly);
        injections.push(Injection {
            session_id: s.id.clone(),
            kind,
            positions,
        });
    }
    Ok(InjectedCorpus { sessions, injections })
}

fn mutate<R: Rng>(
    events: &[String],
    kind: AnomalyKind,
    automaton: &Automaton,
    vocab: &[String],
    known: &HashSet<&str>,
    rng: &mut R,
) -> Option<(Vec<String>, Vec<usize>)> {
    let n = events.len();
    for _ in 0..MUTATION_TRIES {
        let (out, positions) = match kind {
            AnomalyKind::Swap => {
                if n < 2 {
                    return None;
                }
                let i = rng.gen_range(0..n - 1);
                let mut out = events.to_vec();
                out.swap(i, i + 1);
                (out, vec![i, i + 1])
            }
            AnomalyKind::Substitute => {
                // the first event is never a prediction target
                if n < 2 || vocab.len() < 2 {
                    return None;
                }
                let i = rng.gen_range(1..n);
                let replacement = vocab.choose(rng)?;
                if *replacement == events[i] {
                    continue;
                }
                let mut out = events.to_vec();
                out[i] = replacement.clone();
                (out, vec![i])
            }
            AnomalyKind::InsertOov => {
                let i = rng.gen_range(0..=n);
                let key = loop {
                    let k = format!("X{}", rng.gen_range(1..1000));
                    if !known.contains(k.as_str()) {
                        break k;
                    }
                };
                let mut out = events.to_vec();
                out.insert(i, key);
                (out, vec![i])
            }
            AnomalyKind::Truncate => {
                if n <= MIN_SESSION_LEN {
                    return None;
                }
                let keep = rng.gen_range(MIN_SESSION_LEN..n);
                (events[..keep].to_vec(), vec![keep])
            }
        };
        if !automaton.accepts(&out) {
            return Some((out, positions));
        }
    }
    None
}
