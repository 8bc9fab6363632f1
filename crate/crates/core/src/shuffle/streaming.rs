//! Round-by-round shuffle that folds reducer state and emits refining
//! partial aggregates, with word count as the bundled workload.

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::functions::{FOLD, MAP, PARTITIONER_CHUNK};
use super::{Partitioner, ShuffleConfig};
use crate::checksum::fnv1a64;
use crate::error::{Result, TaskError};
use crate::runtime::{
    Arg, FunctionRegistry, ObjectRef, Runtime, TaskContext, TaskResult, TaskSpec,
};

pub const WC_GEN: &str = "wc.gen";
pub const WC_MAP: &str = "wc.map";
pub const WC_FOLD: &str = "wc.fold";

pub(crate) fn register(reg: &mut FunctionRegistry) {
    reg.register(WC_GEN, wc_gen);
    reg.register(WC_MAP, wc_map);
    reg.register(WC_FOLD, wc_fold);
}

/// Word frequencies, serialized as sorted `word\tcount\n` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCounts(pub BTreeMap<String, u64>);

impl WordCounts {
    pub fn encode(&self) -> Bytes {
        let mut out = String::new();
        for (w, c) in &self.0 {
            out.push_str(w);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out.into()
    }

    pub fn decode(b: &[u8]) -> Result<Self, TaskError> {
        let text = std::str::from_utf8(b).map_err(|_| TaskError::new("counts are not utf-8"))?;
        let mut m = BTreeMap::new();
        for line in text.lines() {
            let (w, c) = line
                .split_once('\t')
                .ok_or_else(|| TaskError::new("bad count line"))?;
            let c: u64 = c.parse().map_err(|_| TaskError::new("bad count"))?;
            *m.entry(w.to_string()).or_insert(0) += c;
        }
        Ok(WordCounts(m))
    }

    pub fn add(&mut self, other: &WordCounts) {
        for (w, c) in &other.0 {
            *self.0.entry(w.clone()).or_insert(0) += c;
        }
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    /// The `k` most frequent words, ties broken alphabetically.
    pub fn top_k(&self, k: usize) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = self.0.iter().map(|(w, c)| (w.clone(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    /// Normalized frequencies of `words`, with add-one smoothing when
    /// `smooth` is set so unseen words keep positive mass.
    pub fn distribution(&self, words: &[String], smooth: bool) -> Vec<f64> {
        let extra = if smooth { 1.0 } else { 0.0 };
        let raw: Vec<f64> = words
            .iter()
            .map(|w| self.0.get(w).copied().unwrap_or(0) as f64 + extra)
            .collect();
        let sum: f64 = raw.iter().sum();
        if sum == 0.0 {
            return vec![1.0 / words.len() as f64; words.len()];
        }
        raw.iter().map(|x| x / sum).collect()
    }
}

/// Synthetic text: `words` tokens drawn from a Zipf(`exponent`) vocabulary.
/// Deterministic in (seed, partition).
pub fn generate_text(seed: u64, partition: u64, words: u64, vocab: u64, exponent: f64) -> Bytes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(partition);
    let zipf = Zipf::new(vocab, exponent).expect("valid zipf parameters");
    let mut out = String::with_capacity(words as usize * 6);
    for i in 0..words {
        if i > 0 {
            out.push(' ');
        }
        let w = zipf.sample(&mut rng) as u64;
        out.push('w');
        out.push_str(&w.to_string());
    }
    out.into()
}

/// args: seed, partition, words (u64 LE each), vocab (u64 LE), exponent (f64 LE).
fn wc_gen(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let a = args
        .first()
        .filter(|a| a.len() == 40)
        .ok_or_else(|| TaskError::new("wc.gen expects one 40-byte argument"))?;
    let u = |i: usize| u64::from_le_bytes(a[i * 8..i * 8 + 8].try_into().unwrap());
    let exponent = f64::from_le_bytes(a[32..40].try_into().unwrap());
    Ok(vec![generate_text(u(0), u(1), u(2), u(3), exponent)])
}

pub fn wc_gen_spec(seed: u64, partition: u64, words: u64, vocab: u64, exponent: f64) -> TaskSpec {
    let mut a = Vec::with_capacity(40);
    for v in [seed, partition, words, vocab] {
        a.extend_from_slice(&v.to_le_bytes());
    }
    a.extend_from_slice(&exponent.to_le_bytes());
    TaskSpec::new(WC_GEN)
        .inline(a)
        .named(format!("gen-{partition}"))
}

fn count_words(text: &[u8]) -> Result<WordCounts, TaskError> {
    let text = std::str::from_utf8(text).map_err(|_| TaskError::new("input is not utf-8"))?;
    let mut m = BTreeMap::new();
    for w in text.split_ascii_whitespace() {
        *m.entry(w.to_string()).or_insert(0) += 1;
    }
    Ok(WordCounts(m))
}

/// args: text, R (u32). Returns R hash-partitioned count blocks.
fn wc_map(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let [text, r] = args else {
        return Err(TaskError::new("wc.map expects 2 arguments"));
    };
    let r = u32::from_le_bytes(r[..4].try_into().map_err(|_| TaskError::new("bad R"))?) as usize;
    let mut parts = vec![WordCounts::default(); r];
    for (w, c) in count_words(text)?.0 {
        let p = (fnv1a64(w.as_bytes()) % r as u64) as usize;
        parts[p].0.insert(w, c);
    }
    Ok(parts.iter().map(WordCounts::encode).collect())
}

/// args: previous state, then this round's blocks. Returns the new state.
fn wc_fold(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let mut state = WordCounts::default();
    for a in args {
        state.add(&WordCounts::decode(a)?);
    }
    Ok(vec![state.encode()])
}

/// Single-process oracle.
pub fn batch_word_count(texts: &[Bytes]) -> WordCounts {
    let mut all = WordCounts::default();
    for t in texts {
        all.add(&count_words(t).expect("generated text is utf-8"));
    }
    all
}

/// Aggregate after a prefix of rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAggregate<A> {
    /// 1-based count of rounds folded in.
    pub round: usize,
    pub rounds: usize,
    pub value: A,
    /// Time since the shuffle was submitted.
    pub elapsed: Duration,
}

/// Iterator over per-round aggregates; every task is submitted up front.
pub struct StreamingShuffle<'a, A> {
    rt: &'a Runtime,
    /// Per round, the R reducer states after folding that round.
    states: VecDeque<Vec<ObjectRef>>,
    rounds: usize,
    next_round: usize,
    started: Instant,
    aggregate: Aggregate<'a, A>,
}

type Aggregate<'a, A> = Box<dyn FnMut(&[Bytes]) -> Result<A> + 'a>;

/// Rounds of `cfg.P` map tasks; after each round every reducer folds its new
/// blocks into its running state, and `aggregate` turns the R states into a
/// user statistic. `map_fn` receives the input followed by `map_args` and
/// returns R blocks; `fold_fn` receives (state, blocks...) and returns the
/// new state, where the initial state is empty.
pub fn streaming_shuffle<'a, A>(
    rt: &'a Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    map_fn: &str,
    map_args: &[Bytes],
    fold_fn: &str,
    aggregate: impl FnMut(&[Bytes]) -> Result<A> + 'a,
) -> Result<StreamingShuffle<'a, A>> {
    let started = Instant::now();
    let nodes = cfg.nodes(rt);
    let r = cfg.reducers(inputs.len());
    let p = cfg.p.max(1);
    let rounds = inputs.len().div_ceil(p);
    let mut prev: Vec<Arg> = vec![Arg::Inline(Bytes::new()); r];
    let mut states = VecDeque::with_capacity(rounds);
    for k in 0..rounds {
        let members = k * p..((k + 1) * p).min(inputs.len());
        let mut maps = Vec::new();
        for i in members {
            let spec = TaskSpec::new(map_fn)
                .arg(&inputs[i])
                .args(map_args.iter().cloned().map(Arg::Inline))
                .returns(r)
                .on_node(super::map_node(i, nodes))
                .named(format!("map-{i}"));
            maps.push(rt.submit(spec)?);
        }
        let mut round_states = Vec::with_capacity(r);
        for (q, prev_state) in prev.iter().enumerate() {
            let spec = TaskSpec::new(fold_fn)
                .arg(prev_state.clone())
                .args(maps.iter().map(|m| &m[q]))
                .on_node(super::owner_of(q, r, nodes))
                .named(format!("fold-{k}-{q}"));
            round_states.push(rt.submit1(spec)?);
        }
        rt.drop_refs(maps.iter().flatten())?;
        prev = round_states.iter().map(Arg::from).collect();
        states.push_back(round_states);
    }
    Ok(StreamingShuffle {
        rt,
        states,
        rounds,
        next_round: 0,
        started,
        aggregate: Box::new(aggregate),
    })
}

/// Word count over `inputs` (text partitions), one aggregate per round.
pub fn word_count_shuffle<'a>(
    rt: &'a Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
) -> Result<StreamingShuffle<'a, WordCounts>> {
    let r = Bytes::from((cfg.reducers(inputs.len()) as u32).to_le_bytes().to_vec());
    streaming_shuffle(rt, cfg, inputs, WC_MAP, &[r], WC_FOLD, |states| {
        let mut all = WordCounts::default();
        for s in states {
            all.add(&WordCounts::decode(s).map_err(|e| crate::Error::InvalidArgument(e.0))?);
        }
        Ok(all)
    })
}

/// Sort as a streaming job: each reducer's state is the sorted run of every
/// record seen so far, and each partial aggregate is the R encoded states.
pub fn streaming_sort<'a>(
    rt: &'a Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
) -> Result<StreamingShuffle<'a, Vec<Bytes>>> {
    let enc = part.encode();
    let mut args = vec![Bytes::from(cfg.map_work_ms.to_le_bytes().to_vec())];
    args.extend(enc.chunks(PARTITIONER_CHUNK).map(|c| enc.slice_ref(c)));
    let cfg = ShuffleConfig {
        r: part.num_partitions(),
        ..cfg.clone()
    };
    streaming_shuffle(rt, &cfg, inputs, MAP, &args, FOLD, |states| {
        Ok(states.to_vec())
    })
}

impl<A> StreamingShuffle<'_, A> {
    pub fn rounds(&self) -> usize {
        self.rounds
    }
}

impl<A> Iterator for StreamingShuffle<'_, A> {
    type Item = Result<PartialAggregate<A>>;

    fn next(&mut self) -> Option<Self::Item> {
        let refs = self.states.pop_front()?;
        self.next_round += 1;
        let res = (|| {
            let values: Vec<Bytes> = refs
                .iter()
                .map(|r| self.rt.get(r, None))
                .collect::<Result<_>>()?;
            self.rt.drop_refs(&refs)?;
            let value = (self.aggregate)(&values)?;
            Ok(PartialAggregate {
                round: self.next_round,
                rounds: self.rounds,
                value,
                elapsed: self.started.elapsed(),
            })
        })();
        Some(res)
    }
}

impl<A> Drop for StreamingShuffle<'_, A> {
    fn drop(&mut self) {
        for refs in self.states.drain(..) {
            let _ = self.rt.drop_refs(&refs);
        }
    }
}
