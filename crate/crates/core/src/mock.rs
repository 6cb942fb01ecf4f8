//! Denoisers with hand-written conditionals, for exercising samplers against
//! distributions that can be enumerated exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::MarkovSpec;
use crate::error::{Error, Result};
use crate::model::{Denoiser, Logits};

/// Logits for position `pos` given the tokens it may see: every position in
/// its own block or earlier, MASK included.
pub type LogitFn = dyn Fn(usize, &[u32]) -> Vec<f64> + Send + Sync;

/// Denoiser defined by a closure. Honours the block mask and the cache
/// protocol of [`Denoiser::forward_cached`]; the cache simply stores the
/// committed tokens.
pub struct FnMock {
    vocab: usize,
    max_len: usize,
    f: Box<LogitFn>,
    count: AtomicU64,
}

impl FnMock {
    pub fn new(
        vocab: usize,
        max_len: usize,
        f: impl Fn(usize, &[u32]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            vocab,
            max_len,
            f: Box::new(f),
            count: AtomicU64::new(0),
        }
    }

    fn run(&self, prefix: &[u32], tokens: &[u32], block_size: usize) -> Result<Logits> {
        if block_size == 0 {
            return Err(Error::Layout {
                len: tokens.len(),
                block_size,
            });
        }
        let full: Vec<u32> = prefix.iter().chain(tokens).copied().collect();
        if full.len() > self.max_len {
            return Err(Error::Capacity {
                needed: full.len(),
                max_len: self.max_len,
            });
        }
        if let Some(&t) = full.iter().find(|&&t| t as usize > self.vocab) {
            return Err(Error::Index(format!("token {t} outside vocabulary")));
        }
        self.count.fetch_add(1, Ordering::Relaxed);
        let mut data = Vec::with_capacity(tokens.len() * self.vocab);
        for pos in prefix.len()..full.len() {
            let end = ((pos / block_size + 1) * block_size).min(full.len());
            let row = (self.f)(pos, &full[..end]);
            assert_eq!(row.len(), self.vocab, "logit function returned wrong width");
            data.extend(row);
        }
        Ok(Logits::new(tokens.len(), self.vocab, data))
    }
}

impl Denoiser for FnMock {
    type Cache = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn new_cache(&self) -> Vec<u32> {
        Vec::new()
    }

    fn cache_len(&self, cache: &Vec<u32>) -> usize {
        cache.len()
    }

    fn forward_cached(
        &self,
        cache: &mut Vec<u32>,
        tokens: &[u32],
        block_size: usize,
        commit: usize,
    ) -> Result<Logits> {
        if commit > tokens.len() {
            return Err(Error::State(format!(
                "commit {commit} exceeds {} new tokens",
                tokens.len()
            )));
        }
        if !cache.len().is_multiple_of(block_size.max(1)) {
            return Err(Error::State(format!(
                "cache length {} not block aligned",
                cache.len()
            )));
        }
        let out = self.run(cache, tokens, block_size)?;
        cache.extend_from_slice(&tokens[..commit]);
        Ok(out)
    }

    fn forward_full(&self, tokens: &[u32], block_size: usize) -> Result<Logits> {
        self.run(&[], tokens, block_size)
    }

    fn forward_count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

/// Zero logits everywhere.
pub struct UniformMock;

impl UniformMock {
    #[allow(clippy::new_ret_no_self)]
    pub fn new(vocab: usize, max_len: usize) -> FnMock {
        FnMock::new(vocab, max_len, move |_, _| vec![0.0; vocab])
    }
}

/// Puts all mass on a fixed token per position.
pub struct OneHotMock;

impl OneHotMock {
    #[allow(clippy::new_ret_no_self)]
    pub fn new(vocab: usize, max_len: usize) -> FnMock {
        FnMock::new(vocab, max_len, move |pos, _| {
            let mut row = vec![-1e3; vocab];
            row[Self::token(pos, vocab) as usize] = 0.0;
            row
        })
    }

    pub fn token(pos: usize, vocab: usize) -> u32 {
        ((pos * 7 + 3) % vocab) as u32
    }
}

/// Puts all mass on whatever token already sits at the position; uniform on
/// MASK.
pub struct EchoMock;

impl EchoMock {
    #[allow(clippy::new_ret_no_self)]
    pub fn new(vocab: usize, max_len: usize) -> FnMock {
        FnMock::new(vocab, max_len, move |pos, seen| {
            let t = seen[pos] as usize;
            if t >= vocab {
                vec![0.0; vocab]
            } else {
                let mut row = vec![-1e3; vocab];
                row[t] = 0.0;
                row
            }
        })
    }
}

impl FnMock {
    /// The sequence a [`OneHotMock`] deterministically produces.
    pub fn target(&self, len: usize) -> Vec<u32> {
        (0..len).map(|i| OneHotMock::token(i, self.vocab)).collect()
    }
}

/// Exact denoiser for a Markov source: log of the posterior marginal of
/// `pos` given every visible token except `pos` itself (forward-backward).
pub struct MarkovPosterior;

impl MarkovPosterior {
    #[allow(clippy::new_ret_no_self)]
    pub fn new(spec: MarkovSpec, max_len: usize) -> FnMock {
        let v = spec.states();
        FnMock::new(v, max_len, move |pos, seen| {
            let p = spec.transition();
            let obs =
                |i: usize, s: usize| i == pos || seen[i] as usize >= v || seen[i] as usize == s;
            let mut alpha: Vec<f64> = spec.initial().to_vec();
            for i in 0..pos {
                alpha
                    .iter_mut()
                    .enumerate()
                    .for_each(|(s, a)| *a *= f64::from(u8::from(obs(i, s))));
                let z: f64 = alpha.iter().sum();
                let next: Vec<f64> = (0..v)
                    .map(|t| (0..v).map(|s| alpha[s] * p[s][t]).sum::<f64>() / z)
                    .collect();
                alpha = next;
            }
            let mut beta = vec![1.0; v];
            for i in (pos + 1..seen.len()).rev() {
                let next: Vec<f64> = (0..v)
                    .map(|s| {
                        (0..v)
                            .filter(|&t| obs(i, t))
                            .map(|t| p[s][t] * beta[t])
                            .sum()
                    })
                    .collect();
                let z: f64 = next.iter().sum();
                beta = next.into_iter().map(|b| b / z).collect();
            }
            (0..v)
                .map(|s| (alpha[s] * beta[s]).max(1e-300).ln())
                .collect()
        })
    }
}
