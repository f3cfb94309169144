//! Count-based n-gram next-event predictor.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::{top_k, NextEventModel};
use crate::error::{Error, Result};
use crate::pipeline::{EncodedSession, EventId};
use crate::tensor::Matrix;

pub const DEFAULT_ORDER: usize = 2;

/// Successor counts per length-`order` context, plus global unigram counts
/// used for contexts never seen in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "NgramRepr", try_from = "NgramRepr")]
pub struct NgramModel {
    order: usize,
    num_events: usize,
    table: HashMap<Vec<EventId>, Vec<u64>>,
    unigram: Vec<u64>,
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_events(&self) -> usize {
        self.num_events
    }

    /// Successor counts of `context` (indexed by class), if it was observed.
    pub fn counts(&self, context: &[EventId]) -> Option<&[u64]> {
        self.table.get(context).map(Vec::as_slice)
    }

    pub fn unigram(&self) -> &[u64] {
        &self.unigram
    }

    pub fn contexts(&self) -> impl Iterator<Item = &[EventId]> {
        self.table.keys().map(Vec::as_slice)
    }

    /// Counts used to rank the successors of a window: those of its last
    /// `order` events, or the unigram counts when that context is unseen.
    pub fn scores_for(&self, window: &[EventId]) -> &[u64] {
        let ctx = context_of(window, self.order);
        self.table.get(ctx.as_slice()).unwrap_or(&self.unigram)
    }

    /// Normalised successor distribution for `window`.
    pub fn probabilities(&self, window: &[EventId]) -> Vec<f64> {
        let counts = self.scores_for(window);
        let total: u64 = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    /// Wraps the model for the detector with windows of length `window_len`.
    pub fn detector(&self, window_len: usize) -> Result<NgramDetector<'_>> {
        if window_len < 1 {
            return Err(Error::InvalidArgument("window length must be >= 1".into()));
        }
        Ok(NgramDetector {
            model: self,
            window_len,
        })
    }
}

/// The last `order` events of `window`, left-padded with PAD when it is shorter.
fn context_of(window: &[EventId], order: usize) -> Vec<EventId> {
    let take = order.min(window.len());
    let mut ctx = vec![EventId::PAD; order - take];
    ctx.extend_from_slice(&window[window.len() - take..]);
    ctx
}

/// Tallies every (context, successor) pair with targets at positions `t >= 1`.
pub fn fit_ngram(sessions: &[EncodedSession], order: usize, num_events: usize) -> Result<NgramModel> {
    if order < 1 {
        return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
    }
    let mut table: HashMap<Vec<EventId>, Vec<u64>> = HashMap::new();
    let mut unigram = vec![0u64; num_events];
    for s in sessions {
        for (t, &e) in s.event_ids.iter().enumerate() {
            if e.is_pad() || e.0 as usize > num_events {
                return Err(Error::EventOutOfRange { id: e.0, size: num_events });
            }
            unigram[e.class_index()] += 1;
            if t == 0 {
                continue;
            }
            let ctx = context_of(&s.event_ids[..t], order);
            table.entry(ctx).or_insert_with(|| vec![0; num_events])[e.class_index()] += 1;
        }
    }
    Ok(NgramModel {
        order,
        num_events,
        table,
        unigram,
    })
}

/// Top-k successors of `context`, by count then lower id.
pub fn ngram_topk(context: &[EventId], model: &NgramModel, k: usize) -> Result<Vec<EventId>> {
    let counts: Vec<f64> = model.scores_for(context).iter().map(|&c| c as f64).collect();
    top_k(&counts, k)
}

#[derive(Clone, Copy)]
pub struct NgramDetector<'a> {
    model: &'a NgramModel,
    window_len: usize,
}

impl NextEventModel for NgramDetector<'_> {
    fn num_events(&self) -> usize {
        self.model.num_events
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn scores(&self, windows: &[&[EventId]]) -> Result<Matrix> {
        let n = self.model.num_events;
        let mut out = Matrix::zeros(windows.len(), n);
        for (r, w) in windows.iter().enumerate() {
            for (dst, &c) in out.row_mut(r).iter_mut().zip(self.model.scores_for(w)) {
                *dst = c as f64;
            }
        }
        Ok(out)
    }
}

/// JSON-friendly form: contexts as id lists, sparse successor counts.
#[derive(Serialize, Deserialize)]
struct NgramRepr {
    order: usize,
    num_events: usize,
    unigram: Vec<u64>,
    contexts: Vec<ContextRepr>,
}

#[derive(Serialize, Deserialize)]
struct ContextRepr {
    context: Vec<u32>,
    successors: BTreeMap<u32, u64>,
}

impl From<NgramModel> for NgramRepr {
    fn from(m: NgramModel) -> Self {
        let mut contexts: Vec<ContextRepr> = m
            .table
            .into_iter()
            .map(|(ctx, counts)| ContextRepr {
                context: ctx.iter().map(|e| e.0).collect(),
                successors: counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(i, &c)| (EventId::from_class_index(i).0, c))
                    .collect(),
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        NgramRepr {
            order: m.order,
            num_events: m.num_events,
            unigram: m.unigram,
            contexts,
        }
    }
}

impl TryFrom<NgramRepr> for NgramModel {
    type Error = Error;

    fn try_from(r: NgramRepr) -> Result<Self> {
        if r.order < 1 || r.unigram.len() != r.num_events {
            return Err(Error::InvalidArgument("malformed n-gram model".into()));
        }
        let mut table = HashMap::with_capacity(r.contexts.len());
        for c in r.contexts {
            if c.context.len() != r.order {
                return Err(Error::InvalidArgument("n-gram context has the wrong length".into()));
            }
            let mut counts = vec![0; r.num_events];
            for (id, n) in c.successors {
                if id == 0 || id as usize > r.num_events {
                    return Err(Error::EventOutOfRange { id, size: r.num_events });
                }
                counts[id as usize - 1] = n;
            }
            table.insert(c.context.into_iter().map(EventId).collect(), counts);
        }
        Ok(NgramModel {
            order: r.order,
            num_events: r.num_events,
            table,
            unigram: r.unigram,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn enc(ids: &[u32]) -> EncodedSession {
        EncodedSession {
            session_id: Arc::from("s"),
            event_ids: ids.iter().map(|&i| EventId(i)).collect(),
            contains_oov: false,
        }
    }

    fn ids(v: &[u32]) -> Vec<EventId> {
        v.iter().map(|&i| EventId(i)).collect()
    }

    #[test]
    fn alternation_is_deterministic() {
        let m = fit_ngram(&[enc(&[1, 2, 1, 2])], 1, 2).unwrap();
        assert_eq!(m.probabilities(&ids(&[1])), vec![0.0, 1.0]);
        assert_eq!(m.probabilities(&ids(&[2])), vec![1.0, 0.0]);
        assert_eq!(ngram_topk(&ids(&[1]), &m, 1).unwrap(), ids(&[2]));
    }

    #[test]
    fn unseen_context_falls_back_to_unigram() {
        let m = fit_ngram(&[enc(&[1, 2, 2, 3, 2])], 2, 4).unwrap();
        assert!(m.counts(&ids(&[3, 1])).is_none());
        assert_eq!(m.scores_for(&ids(&[3, 1])), &[1, 3, 1, 0]);
        assert_eq!(ngram_topk(&ids(&[3, 1]), &m, 2).unwrap(), ids(&[2, 1]));
    }

    #[test]
    fn session_starts_use_pad_context() {
        let m = fit_ngram(&[enc(&[3, 1, 2])], 2, 3).unwrap();
        assert_eq!(m.counts(&ids(&[0, 3])), Some(&[1, 0, 0][..]));
        assert_eq!(m.counts(&ids(&[3, 1])), Some(&[0, 1, 0][..]));
        // a padded window sees the same context
        assert_eq!(ngram_topk(&ids(&[0, 0, 0, 3]), &m, 1).unwrap(), ids(&[1]));
    }

    #[test]
    fn equal_counts_rank_lower_id_first() {
        let m = fit_ngram(&[enc(&[1, 3]), enc(&[1, 2])], 1, 3).unwrap();
        assert_eq!(ngram_topk(&ids(&[1]), &m, 2).unwrap(), ids(&[2, 3]));
        assert!(fit_ngram(&[], 0, 3).is_err());
        assert!(fit_ngram(&[enc(&[1, 5])], 1, 3).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = fit_ngram(&[enc(&[1, 2, 3, 1, 2]), enc(&[2, 2])], 2, 3).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: NgramModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn markov_chain_argmax_is_recovered() {
        // order-1 chain over 4 events with a unique argmax per row
        let p = [
            [0.1, 0.6, 0.2, 0.1],
            [0.5, 0.1, 0.1, 0.3],
            [0.2, 0.2, 0.5, 0.1],
            [0.1, 0.1, 0.1, 0.7],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sessions: Vec<_> = (0..400)
            .map(|_| {
                let mut s = vec![rng.gen_range(1..=4u32)];
                for _ in 0..20 {
                    let row = &p[*s.last().unwrap() as usize - 1];
                    let mut u: f64 = rng.gen();
                    let mut next = 4;
                    for (j, &pj) in row.iter().enumerate() {
                        if u < pj {
                            next = j as u32 + 1;
                            break;
                        }
                        u -= pj;
                    }
                    s.push(next);
                }
                enc(&s)
            })
            .collect();
        let m = fit_ngram(&sessions, 1, 4).unwrap();
        for (i, row) in p.iter().enumerate() {
            let best = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let got = ngram_topk(&[EventId(i as u32 + 1)], &m, 1).unwrap();
            assert_eq!(got, vec![EventId::from_class_index(best)]);
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(
            corpus in prop::collection::vec(prop::collection::vec(1u32..=5, 1..12), 1..8),
            order in 1usize..4,
            probe in prop::collection::vec(0u32..=5, 0..6),
        ) {
            let encoded: Vec<_> = corpus.iter().map(|s| enc(s)).collect();
            let m = fit_ngram(&encoded, order, 5).unwrap();
            let p = m.probabilities(&ids(&probe));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for ctx in m.contexts() {
                prop_assert!(m.counts(ctx).unwrap().iter().sum::<u64>() >= 1);
            }
        }
    }
}
