use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::corpus_stream::{Document, StreamError};

/// What happens when one weighted source runs dry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    /// Keep drawing from the remaining sources with their weights renormalized.
    #[default]
    Renormalize,
    /// End the stream as soon as any source is exhausted.
    Stop,
}

/// A per-dataset document stream the multiplexer can draw from.
pub trait DocumentSource {
    fn next_document(&mut self) -> Option<Document>;

    /// True once no further document will ever be returned.
    fn is_exhausted(&mut self) -> bool;
}

/// In-memory source, handy for tests and synthetic data.
impl DocumentSource for VecDeque<Document> {
    fn next_document(&mut self) -> Option<Document> {
        self.pop_front()
    }

    fn is_exhausted(&mut self) -> bool {
        self.is_empty()
    }
}

/// Weighted categorical selection over dataset streams.
#[derive(Debug, Clone)]
pub struct MuxState {
    names: Vec<String>,
    weights: Vec<f64>,
    exhausted: Vec<bool>,
    policy: ExhaustionPolicy,
    rng: Xoshiro256StarStar,
}

pub(crate) fn rng_state(rng: &Xoshiro256StarStar) -> [u8; 32] {
    #[derive(Deserialize)]
    struct Raw {
        s: [u64; 4],
    }
    let raw: Raw = serde_json::to_value(rng)
        .and_then(serde_json::from_value)
        .expect("xoshiro state serializes as four words");
    let mut out = [0u8; 32];
    for (chunk, word) in out.chunks_exact_mut(8).zip(raw.s) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    out
}

impl MuxState {
    pub fn new(names: Vec<String>, weights: Vec<f64>, policy: ExhaustionPolicy, seed: u64) -> Result<Self, StreamError> {
        if names.len() != weights.len() || names.is_empty() {
            return Err(StreamError::InvalidConfig("one weight per dataset required".into()));
        }
        let state = Self {
            exhausted: vec![false; names.len()],
            names,
            weights: Vec::new(),
            policy,
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        };
        state.with_weights(weights)
    }

    fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, StreamError> {
        self.set_weights(weights)?;
        Ok(self)
    }

    /// Replaces the mixture weights; allowed between batches.
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), StreamError> {
        if weights.len() != self.names.len() {
            return Err(StreamError::InvalidConfig("one weight per dataset required".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(StreamError::InvalidConfig(format!("invalid mixture weights {weights:?}")));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn policy(&self) -> ExhaustionPolicy {
        self.policy
    }

    pub fn is_exhausted(&self, dataset: usize) -> bool {
        self.exhausted[dataset]
    }

    /// Generator state as 32 little-endian bytes.
    pub fn rng_state(&self) -> [u8; 32] {
        rng_state(&self.rng)
    }

    pub fn restore_rng(&mut self, state: [u8; 32]) {
        self.rng = Xoshiro256StarStar::from_seed(state);
    }

    fn mark_exhausted(&mut self, dataset: usize) -> Result<(), StreamError> {
        self.exhausted[dataset] = true;
        match self.policy {
            ExhaustionPolicy::Stop => Err(StreamError::StreamStopped(self.names[dataset].clone())),
            ExhaustionPolicy::Renormalize => Ok(()),
        }
    }

    /// One categorical draw over the non-exhausted, positively weighted datasets.
    pub fn draw(&mut self) -> Result<usize, StreamError> {
        if self.policy == ExhaustionPolicy::Stop {
            if let Some(d) = self.exhausted.iter().position(|&e| e) {
                return Err(StreamError::StreamStopped(self.names[d].clone()));
            }
        }
        let active = |i: usize| !self.exhausted[i] && self.weights[i] > 0.0;
        let total: f64 = (0..self.weights.len()).filter(|&i| active(i)).map(|i| self.weights[i]).sum();
        if total <= 0.0 {
            return Err(StreamError::AllExhausted);
        }
        let u: f64 = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for i in (0..self.weights.len()).filter(|&i| active(i)) {
            acc += self.weights[i];
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
        // u rounded up to total
        Ok(last)
    }

    /// Draws a dataset and pulls its next document.
    ///
    /// Sources that report exhaustion are dropped from the draw before it happens;
    /// a source that turns out empty after being drawn is dropped and the draw repeated.
    pub fn mux_next<S: DocumentSource>(&mut self, sources: &mut [S]) -> Result<(Document, usize), StreamError> {
        if sources.len() != self.names.len() {
            return Err(StreamError::InvalidConfig("one source per dataset required".into()));
        }
        loop {
            for (i, source) in sources.iter_mut().enumerate() {
                if !self.exhausted[i] && self.weights[i] > 0.0 && source.is_exhausted() {
                    self.mark_exhausted(i)?;
                }
            }
            let pick = self.draw()?;
            match sources[pick].next_document() {
                Some(doc) => return Ok((doc, pick)),
                None => self.mark_exhausted(pick)?,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::path::Path;
    use std::sync::Arc;

    use super::*;

    fn doc(dataset: &str, i: usize) -> Document {
        Document {
            dataset: Arc::from(dataset),
            file: Arc::from(Path::new("mem")),
            index_in_file: i,
            tokens: vec![1],
        }
    }

    fn source(name: &str, n: usize) -> VecDeque<Document> {
        (0..n).map(|i| doc(name, i)).collect()
    }

    fn mux(weights: &[f64], policy: ExhaustionPolicy) -> MuxState {
        let names = (0..weights.len()).map(|i| format!("d{i}")).collect();
        MuxState::new(names, weights.to_vec(), policy, 1234).unwrap()
    }

    fn picks(weights: &[f64], n: usize, seed: u64) -> Vec<usize> {
        let mut m = mux(weights, ExhaustionPolicy::Renormalize);
        m.rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut sources: Vec<_> = (0..weights.len()).map(|i| source(&format!("d{i}"), n)).collect();
        (0..n).map(|_| m.mux_next(&mut sources).unwrap().1).collect()
    }

    #[test]
    fn proportional_draws() {
        let seq = picks(&[0.75, 0.25], 10_000, 42);
        let a = seq.iter().filter(|&&d| d == 0).count() as f64 / 1e4;
        assert!((a - 0.75).abs() <= 0.02, "A fraction {a}");
        assert_eq!(seq, picks(&[0.75, 0.25], 10_000, 42));
    }

    #[test]
    fn zero_weight_never_picked() {
        assert!(picks(&[1.0, 0.0], 2_000, 9).iter().all(|&d| d == 0));
    }

    #[test]
    fn renormalizes_after_exhaustion() {
        let mut m = mux(&[0.5, 0.5], ExhaustionPolicy::Renormalize);
        let mut sources = vec![source("d0", 100), source("d1", 3)];
        let seq: Vec<usize> = (0..103).map(|_| m.mux_next(&mut sources).unwrap().1).collect();
        assert_eq!(seq.iter().filter(|&&d| d == 1).count(), 3);
        let last_b = seq.iter().rposition(|&d| d == 1).unwrap();
        assert!(seq[last_b + 1..].iter().all(|&d| d == 0));
        assert!(m.is_exhausted(1));
        assert!(matches!(m.mux_next(&mut sources), Err(StreamError::AllExhausted)));
    }

    #[test]
    fn stop_policy() {
        let mut m = mux(&[0.5, 0.5], ExhaustionPolicy::Stop);
        let mut sources = vec![source("d0", 100), source("d1", 2)];
        let mut got = 0;
        let err = loop {
            match m.mux_next(&mut sources) {
                Ok(_) => got += 1,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, StreamError::StreamStopped(ref n) if n == "d1"), "{err}");
        assert!(got >= 2);
        assert!(matches!(m.mux_next(&mut sources), Err(StreamError::StreamStopped(_))));
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = mux(&[0.3, 0.7], ExhaustionPolicy::Renormalize);
        for _ in 0..17 {
            a.draw().unwrap();
        }
        let mut b = mux(&[0.3, 0.7], ExhaustionPolicy::Renormalize);
        b.restore_rng(a.rng_state());
        assert_eq!(a.rng_state(), b.rng_state());
        let xa: Vec<usize> = (0..50).map(|_| a.draw().unwrap()).collect();
        let xb: Vec<usize> = (0..50).map(|_| b.draw().unwrap()).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn invalid_weights() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(MuxState::new(names.clone(), vec![0.0, 0.0], ExhaustionPolicy::Stop, 0).is_err());
        assert!(MuxState::new(names.clone(), vec![1.0], ExhaustionPolicy::Stop, 0).is_err());
        assert!(MuxState::new(names, vec![f64::NAN, 1.0], ExhaustionPolicy::Stop, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn frequencies_within_three_over_root_n(w in 0.05f64..0.95, seed in 0u64..1000) {
            let n = 10_000;
            let seq = picks(&[w, 1.0 - w], n, seed);
            let a = seq.iter().filter(|&&d| d == 0).count() as f64 / n as f64;
            proptest::prop_assert!((a - w).abs() <= 3.0 / (n as f64).sqrt());
        }
    }
}
