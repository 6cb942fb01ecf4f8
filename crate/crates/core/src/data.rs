//! Corpora, vocabularies, batching, and Markov sources with a known entropy
//! rate.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Byte,
    Char,
}

/// Bijection between data symbols and ids `0..V`. Id `V` is MASK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: VocabMode,
    symbols: Vec<char>,
}

const MARKOV_ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

impl Vocab {
    /// Ids are assigned in sorted symbol order.
    pub fn build(corpus: &[u8], mode: VocabMode) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let symbols: Vec<char> = match mode {
            VocabMode::Byte => {
                let set: BTreeSet<u8> = corpus.iter().copied().collect();
                set.into_iter().map(char::from).collect()
            }
            VocabMode::Char => {
                let text = std::str::from_utf8(corpus)
                    .map_err(|e| Error::Vocab(format!("corpus is not UTF-8: {e}")))?;
                let set: BTreeSet<char> = text.chars().collect();
                set.into_iter().collect()
            }
        };
        Ok(Self { mode, symbols })
    }

    /// Printable symbols for the states of a synthetic chain.
    pub fn markov(states: usize) -> Result<Self> {
        if states == 0 || states > MARKOV_ALPHABET.len() {
            return Err(Error::Vocab(format!(
                "markov vocab supports 1..={} states",
                MARKOV_ALPHABET.len()
            )));
        }
        Ok(Self {
            mode: VocabMode::Char,
            symbols: MARKOV_ALPHABET.chars().take(states).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    fn id_of(&self, c: char) -> Option<u32> {
        self.symbols.binary_search(&c).ok().map(|i| i as u32)
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        let mut unknown = BTreeSet::new();
        let mut push = |c: char, out: &mut Vec<u32>| match self.id_of(c) {
            Some(id) => out.push(id),
            None => {
                unknown.insert(c);
            }
        };
        match self.mode {
            VocabMode::Byte => text.iter().for_each(|&b| push(char::from(b), &mut out)),
            VocabMode::Char => std::str::from_utf8(text)
                .map_err(|e| Error::Vocab(format!("input is not UTF-8: {e}")))?
                .chars()
                .for_each(|c| push(c, &mut out)),
        }
        if !unknown.is_empty() {
            return Err(Error::Vocab(format!("unknown symbols: {unknown:?}")));
        }
        Ok(out)
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let c = *self.symbols.get(id as usize).ok_or_else(|| {
                if id == self.mask_id() {
                    Error::Vocab("cannot decode the MASK id".into())
                } else {
                    Error::Vocab(format!("id {id} outside vocabulary of {}", self.size()))
                }
            })?;
            match self.mode {
                VocabMode::Byte => out.push(c as u32 as u8),
                VocabMode::Char => {
                    let mut buf = [0u8; 4];
                    out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Decoded text; byte-mode output that is not valid UTF-8 is replaced
    /// lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

/// Non-overlapping length-`len` chunks of a token stream; the remainder is
/// dropped.
pub fn chunk(ids: &[u32], len: usize) -> Result<Vec<Vec<u32>>> {
    if len == 0 || ids.len() < len {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than sequence length {len}",
            ids.len()
        )));
    }
    Ok(ids.chunks_exact(len).map(<[u32]>::to_vec).collect())
}

/// One shuffled pass over the chunks of `ids`, `batch` sequences at a time.
pub struct BatchIter {
    chunks: Vec<Vec<u32>>,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for BatchIter {
    type Item = Vec<Vec<u32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end]
            .iter()
            .map(|&i| self.chunks[i].clone())
            .collect();
        self.pos = end;
        Some(out)
    }
}

pub fn batch_iter(ids: &[u32], len: usize, batch: usize, seed: u64) -> Result<BatchIter> {
    if batch == 0 {
        return Err(Error::Data("batch size must be positive".into()));
    }
    let chunks = chunk(ids, len)?;
    Ok(shuffled_batches(chunks, batch, seed))
}

pub fn shuffled_batches(chunks: Vec<Vec<u32>>, batch: usize, seed: u64) -> BatchIter {
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    BatchIter {
        chunks,
        order,
        batch: batch.max(1),
        pos: 0,
    }
}

/// Row-stochastic first-order Markov chain.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSpec {
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

impl MarkovSpec {
    /// Validates `transition`; the initial distribution defaults to the
    /// stationary one.
    pub fn new(transition: Vec<Vec<f64>>, initial: Option<Vec<f64>>) -> Result<Self> {
        let n = transition.len();
        if n == 0 {
            return Err(Error::Spec("empty transition matrix".into()));
        }
        for (i, row) in transition.iter().enumerate() {
            check_distribution(row, n, &format!("row {i}"))?;
        }
        check_irreducible(&transition)?;
        let initial = match initial {
            Some(p) => {
                check_distribution(&p, n, "initial distribution")?;
                p
            }
            None => stationary(&transition),
        };
        Ok(Self {
            transition,
            initial,
        })
    }

    /// Rows drawn from a symmetric Dirichlet, mixed with 2% uniform mass so
    /// the chain stays irreducible.
    pub fn random(states: usize, concentration: f64, rng: &mut impl Rng) -> Result<Self> {
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::Spec(format!("bad concentration: {e}")))?;
        let floor = 0.02 / states as f64;
        let rows = (0..states)
            .map(|_| {
                let g: Vec<f64> = (0..states).map(|_| gamma.sample(rng)).collect();
                let s: f64 = g.iter().sum();
                let mut row: Vec<f64> = g.iter().map(|x| 0.98 * x / s + floor).collect();
                let t: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= t);
                row
            })
            .collect();
        Self::new(rows, None)
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn stationary(&self) -> Vec<f64> {
        stationary(&self.transition)
    }

    /// `h = −Σ_s π_s Σ_s' P[s,s'] ln P[s,s']` in nats.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        let mut h = 0.0;
        for (s, row) in self.transition.iter().enumerate() {
            let mut hs = 0.0;
            for &p in row {
                if p > 0.0 {
                    hs -= p * p.ln();
                }
            }
            h += pi[s] * hs;
        }
        h
    }

    pub fn sample_sequences(&self, n: usize, len: usize, rng: &mut impl Rng) -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let mut seq = Vec::with_capacity(len);
                if len > 0 {
                    let mut s = draw(&self.initial, rng);
                    seq.push(s as u32);
                    for _ in 1..len {
                        s = draw(&self.transition[s], rng);
                        seq.push(s as u32);
                    }
                }
                seq
            })
            .collect()
    }

    /// Text form: the state count on the first line, then one row of
    /// probabilities per line; an optional final `init` line overrides the
    /// initial distribution.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Spec("missing dimension line".into()))?
            .parse()
            .map_err(|e| Error::Spec(format!("bad dimension: {e}")))?;
        let parse_row = |l: &str| -> Result<Vec<f64>> {
            l.split_whitespace()
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|e| Error::Spec(format!("bad probability {x:?}: {e}")))
                })
                .collect()
        };
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let l = lines
                .next()
                .ok_or_else(|| Error::Spec(format!("missing row {i}")))?;
            rows.push(parse_row(l)?);
        }
        let initial = match lines.next() {
            Some(l) => match l.strip_prefix("init") {
                Some(rest) => Some(parse_row(rest)?),
                None => return Err(Error::Spec(format!("unexpected line {l:?}"))),
            },
            None => None,
        };
        Self::new(rows, initial)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.states());
        for row in &self.transition {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.17e}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn check_distribution(row: &[f64], n: usize, what: &str) -> Result<()> {
    if row.len() != n {
        return Err(Error::Spec(format!(
            "{what}: {} entries, expected {n}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Spec(format!("{what}: entries must lie in [0, 1]")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Spec(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn reachable(n: usize, edge: impl Fn(usize, usize) -> bool) -> usize {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(s) = queue.pop_front() {
        for t in 0..n {
            if !seen[t] && edge(s, t) {
                seen[t] = true;
                count += 1;
                queue.push_back(t);
            }
        }
    }
    count
}

fn check_irreducible(p: &[Vec<f64>]) -> Result<()> {
    let n = p.len();
    let fwd = reachable(n, |s, t| p[s][t] > 0.0);
    let back = reachable(n, |s, t| p[t][s] > 0.0);
    if fwd != n || back != n {
        return Err(Error::Spec("transition matrix is not irreducible".into()));
    }
    Ok(())
}

/// Power iteration on the lazy chain `(P + I)/2`, which shares the stationary
/// distribution and is aperiodic, until the L1 change drops below 1e-12.
fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for s in 0..n {
            for t in 0..n {
                next[t] += pi[s] * 0.5 * p[s][t];
            }
            next[s] += 0.5 * pi[s];
        }
        let z: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= z);
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-12 {
            break;
        }
    }
    pi
}

fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&q| q > 0.0).unwrap_or(p.len() - 1)
}

const ID_MAGIC: &[u8; 4] = b"SBDI";
const ID_VERSION: u32 = 1;

/// Binary id dump: magic, version, vocabulary size, then little-endian u32
/// ids until end of file.
pub fn write_ids(w: &mut impl Write, vocab_size: usize, ids: &[u32]) -> Result<()> {
    w.write_all(ID_MAGIC)?;
    w.write_all(&ID_VERSION.to_le_bytes())?;
    w.write_all(&(vocab_size as u32).to_le_bytes())?;
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ids(r: &mut impl Read) -> Result<(usize, Vec<u32>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 12 || &buf[..4] != ID_MAGIC {
        return Err(Error::Data("not an encoded id file".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != ID_VERSION {
        return Err(Error::Data(format!(
            "unsupported id file version {version}"
        )));
    }
    let v = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let body = &buf[12..];
    if body.len() % 4 != 0 {
        return Err(Error::Data("truncated id file".into()));
    }
    let ids: Vec<u32> = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= v) {
        return Err(Error::Data(format!("id {bad} outside vocabulary of {v}")));
    }
    Ok((v, ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab_example() {
        let v = Vocab::build(b"abba", VocabMode::Char).unwrap();
        assert_eq!(v.symbols(), &['a', 'b']);
        assert_eq!(v.size(), 2);
        assert_eq!(v.mask_id(), 2);
        assert_eq!(v.encode(b"ab").unwrap(), vec![0, 1]);
        assert_eq!(v, Vocab::build(b"abba", VocabMode::Char).unwrap());
    }

    #[test]
    fn byte_vocab_is_bounded() {
        let corpus: Vec<u8> = (0..=255u8).chain(0..=255u8).collect();
        let v = Vocab::build(&corpus, VocabMode::Byte).unwrap();
        assert_eq!(v.size(), 256);
        let ids = v.encode(&corpus).unwrap();
        assert_eq!(v.decode_bytes(&ids).unwrap(), corpus);
    }

    #[test]
    fn encode_decode_edges() {
        let text = "héllo wörld, hello";
        let v = Vocab::build(text.as_bytes(), VocabMode::Char).unwrap();
        let ids = v.encode(text.as_bytes()).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
        assert_eq!(v.encode(b"").unwrap(), Vec::<u32>::new());
        assert!(matches!(v.decode(&[v.mask_id()]), Err(Error::Vocab(_))));
        let err = v.encode("hez".as_bytes()).unwrap_err().to_string();
        assert!(err.contains('z'), "{err}");
        assert!(Vocab::build(b"", VocabMode::Char).is_err());
    }

    #[test]
    fn batching() {
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(chunk(&ids, 4).unwrap().len(), 2);
        assert!(chunk(&ids, 11).is_err());
        let ids: Vec<u32> = (0..100).collect();
        let a: Vec<_> = batch_iter(&ids, 5, 3, 7).unwrap().collect();
        let b: Vec<_> = batch_iter(&ids, 5, 3, 7).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = batch_iter(&ids, 5, 3, 8).unwrap().collect();
        assert_ne!(a, c);
        let mut fa: Vec<_> = a.into_iter().flatten().collect();
        let mut fc: Vec<_> = c.into_iter().flatten().collect();
        fa.sort();
        fc.sort();
        assert_eq!(fa, fc);
        assert_eq!(fa.len(), 20);
    }

    #[test]
    fn entropy_rate_closed_forms() {
        let uni = MarkovSpec::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], None).unwrap();
        assert!((uni.entropy_rate() - 2f64.ln()).abs() < 1e-12);
        let perm = MarkovSpec::new(
            vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ],
            None,
        )
        .unwrap();
        assert_eq!(perm.entropy_rate(), 0.0);
        for p in perm.stationary() {
            assert!((p - 1.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn entropy_rate_matches_empirical_nll() {
        let spec = MarkovSpec::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]], None).unwrap();
        let pi = spec.stationary();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs = spec.sample_sequences(1, 1_000_000, &mut rng);
        let s = &seqs[0];
        let nll: f64 = s
            .windows(2)
            .map(|w| -spec.transition()[w[0] as usize][w[1] as usize].ln())
            .sum::<f64>()
            / (s.len() - 1) as f64;
        let h = spec.entropy_rate();
        assert!((nll - h).abs() / h < 0.005, "nll {nll} h {h}");
    }

    #[test]
    fn transition_frequencies_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MarkovSpec::random(4, 0.7, &mut rng).unwrap();
        let s = &spec.sample_sequences(1, 1_000_001, &mut rng)[0];
        let mut counts = vec![vec![0f64; 4]; 4];
        for w in s.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1.0;
        }
        for (i, row) in counts.iter().enumerate() {
            let n: f64 = row.iter().sum();
            for (j, &c) in row.iter().enumerate() {
                let p = spec.transition()[i][j];
                let sd = (n * p * (1.0 - p)).sqrt();
                assert!((c - n * p).abs() <= 3.0 * sd + 1.0, "({i},{j})");
            }
        }
    }

    #[test]
    fn spec_validation_and_text_roundtrip() {
        assert!(MarkovSpec::new(vec![vec![0.5, 0.4], vec![0.5, 0.5]], None).is_err());
        assert!(MarkovSpec::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).is_err());
        let spec = MarkovSpec::parse("2\n0.9 0.1\n0.2 0.8\n").unwrap();
        assert_eq!(spec.transition()[1], vec![0.2, 0.8]);
        let again = MarkovSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(again.transition(), spec.transition());
        let init = MarkovSpec::parse("2\n0.9 0.1\n0.2 0.8\ninit 1 0\n").unwrap();
        assert_eq!(init.initial(), &[1.0, 0.0]);
        assert!(MarkovSpec::parse("3\n1 0 0\n").is_err());
    }

    #[test]
    fn id_dump_roundtrip() {
        let ids = vec![0, 3, 2, 2, 1];
        let mut buf = Vec::new();
        write_ids(&mut buf, 4, &ids).unwrap();
        assert_eq!(&buf[..4], b"SBDI");
        let (v, back) = read_ids(&mut buf.as_slice()).unwrap();
        assert_eq!((v, back), (4, ids));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_ids(&mut bad.as_slice()).is_err());
    }
}
