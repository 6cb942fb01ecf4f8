//! Tiny pre-norm transformer denoiser with block-structured attention.
//!
//! One parameterisation serves every block size: the block size only changes
//! the attention pattern. Three forward routes share the same kernels:
//! a full forward under an explicit [`AttnMask`], an incremental forward over
//! a [`KvCache`] of finalised blocks, and the two-stream training layout.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Number of data symbols `V`; the MASK id is `V`.
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            vocab_size: 16,
            max_len: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn mask_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Partition of a length-`len` sequence into blocks of `block_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    len: usize,
    block_size: usize,
}

impl BlockLayout {
    pub fn new(len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || block_size > len || !len.is_multiple_of(block_size) {
            return Err(Error::Layout { len, block_size });
        }
        Ok(Self { len, block_size })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.len / self.block_size
    }

    pub fn block_of(&self, i: usize) -> usize {
        i / self.block_size
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        b * self.block_size..(b + 1) * self.block_size
    }
}

/// Which attention rule the full forward applies. `LeakNextBlock` exists only
/// as a negative control for the cache-equivalence check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskRule {
    #[default]
    BlockCausal,
    LeakNextBlock,
}

/// `allow(i, j)` iff `block(j) <= block(i)`.
pub fn build_block_mask(len: usize, block_size: usize) -> Result<AttnMask> {
    build_mask_with_rule(len, block_size, MaskRule::BlockCausal)
}

fn build_mask_with_rule(len: usize, block_size: usize, rule: MaskRule) -> Result<AttnMask> {
    let layout = BlockLayout::new(len, block_size)?;
    Ok(AttnMask::from_fn(len, len, |i, j| {
        let (bi, bj) = (layout.block_of(i), layout.block_of(j));
        match rule {
            MaskRule::BlockCausal => bj <= bi,
            MaskRule::LeakNextBlock => bj <= bi + 1,
        }
    }))
}

/// Attention pattern over `[noisy x_t ; clean x]` of length `2·len`.
///
/// Noisy position `i` sees noisy positions of its own block and clean
/// positions of strictly earlier blocks; clean positions follow the ordinary
/// block-causal rule among themselves.
pub fn build_two_stream_mask(len: usize, block_size: usize) -> Result<AttnMask> {
    let layout = BlockLayout::new(len, block_size)?;
    Ok(AttnMask::from_fn(2 * len, 2 * len, |i, j| {
        let (noisy_q, noisy_k) = (i < len, j < len);
        let bi = layout.block_of(i % len);
        let bj = layout.block_of(j % len);
        match (noisy_q, noisy_k) {
            (true, true) => bi == bj,
            (true, false) => bj < bi,
            (false, true) => false,
            (false, false) => bj <= bi,
        }
    }))
}

/// Keys and values of finalised positions, one slab per layer.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            keys: (0..n_layers)
                .map(|_| Tensor::zeros(&[0, d_model]))
                .collect(),
            values: (0..n_layers)
                .map(|_| Tensor::zeros(&[0, d_model]))
                .collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, layer: usize) -> &Tensor<T> {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Tensor<T> {
        &self.values[layer]
    }

    fn append(&mut self, layer: usize, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        self.keys[layer] = self.keys[layer].concat_rows(k)?;
        self.values[layer] = self.values[layer].concat_rows(v)?;
        Ok(())
    }
}

/// Logits over the data vocabulary only (the MASK column is dropped, which is
/// the same as giving it −∞).
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    rows: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn new(rows: usize, vocab: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * vocab, data.len());
        Self { rows, vocab, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    fn from_tensor<T: Real>(t: &Tensor<T>, vocab: usize) -> Self {
        let mut data = Vec::with_capacity(t.rows() * vocab);
        for i in 0..t.rows() {
            data.extend(t.row(i)[..vocab].iter().map(|x| x.as_f64()));
        }
        Self {
            rows: t.rows(),
            vocab,
            data,
        }
    }
}

/// What a sampler needs from a denoising network.
///
/// Positions handed to [`Denoiser::forward_cached`] start at the cache length
/// and attend to every cached position plus new positions in the same or an
/// earlier block. The first `commit` new positions are appended to the cache
/// once the pass completes.
pub trait Denoiser {
    type Cache;

    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn new_cache(&self) -> Self::Cache;
    fn cache_len(&self, cache: &Self::Cache) -> usize;
    fn forward_cached(
        &self,
        cache: &mut Self::Cache,
        tokens: &[u32],
        block_size: usize,
        commit: usize,
    ) -> Result<Logits>;
    /// No-cache forward over positions `0..tokens.len()` under the block mask.
    fn forward_full(&self, tokens: &[u32], block_size: usize) -> Result<Logits>;
    /// Number of forwards issued so far.
    fn forward_count(&self) -> u64;

    fn mask_id(&self) -> u32 {
        self.vocab_size() as u32
    }
}

struct LayerParams {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct ParamIndex {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerParams>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Parameters bound onto one graph.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Output of a graph forward: logits `[n×(V+1)]` and per-layer new K/V.
pub struct ForwardVars {
    pub logits: Var,
    pub kv: Vec<(Var, Var)>,
}

pub struct Transformer<T> {
    cfg: DenoiserConfig,
    params: ParamStore<T>,
    index: ParamIndex,
    forwards: AtomicU64,
    rule: MaskRule,
}

impl<T: Real> Clone for Transformer<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.cfg, self.params.clone()).expect("valid params")
    }
}

fn param_names(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v1) = (cfg.d_model, cfg.vocab_size + 1);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v1, d]),
        ("pos_emb".to_string(), vec![cfg.max_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![d, 4 * d]),
            (p("mlp.b1"), vec![4 * d]),
            (p("mlp.w2"), vec![4 * d, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, v1]),
        ("head.b".to_string(), vec![v1]),
    ]);
    out
}

impl<T: Real> Transformer<T> {
    /// Fresh model: N(0, 0.02) weights, residual projections scaled by
    /// 1/√(2·n_layers), zero biases, unit gains.
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut store = ParamStore::new();
        for (name, shape) in param_names(&cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let s = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    resid
                } else {
                    1.0
                };
                (0..n)
                    .map(|_| T::from_f64(normal.sample(&mut rng) * s))
                    .collect()
            };
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(cfg, store)
    }

    /// Wraps an existing parameter store; names and shapes must match `cfg`.
    pub fn from_params(cfg: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = param_names(&cfg);
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let i = params
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if params.value(i).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    params.value(i).shape(),
                    shape
                )));
            }
        }
        let at = |n: &str| params.lookup(n).expect("checked above");
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| at(&format!("layers.{l}.{s}"));
                LayerParams {
                    ln1_g: p("ln1.g"),
                    ln1_b: p("ln1.b"),
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    ln2_g: p("ln2.g"),
                    ln2_b: p("ln2.b"),
                    w1: p("mlp.w1"),
                    b1: p("mlp.b1"),
                    w2: p("mlp.w2"),
                    b2: p("mlp.b2"),
                }
            })
            .collect();
        let index = ParamIndex {
            tok_emb: at("tok_emb"),
            pos_emb: at("pos_emb"),
            layers,
            lnf_g: at("ln_f.g"),
            lnf_b: at("ln_f.b"),
            head_w: at("head.w"),
            head_b: at("head.b"),
        };
        Ok(Self {
            cfg,
            params,
            index,
            forwards: AtomicU64::new(0),
            rule: MaskRule::BlockCausal,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer::from_params(self.cfg, self.params.cast()).expect("same layout")
    }

    /// Mutation hook for negative-control checks.
    pub fn set_mask_rule(&mut self, rule: MaskRule) {
        self.rule = rule;
    }

    /// Puts every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: (0..self.params.len())
                .map(|i| g.param(&self.params, i))
                .collect(),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if t as usize > self.cfg.vocab_size {
                    Err(Error::Index(format!(
                        "token {t} outside [0, {}]",
                        self.cfg.vocab_size
                    )))
                } else {
                    Ok(t as usize)
                }
            })
            .collect()
    }

    /// Records one forward on `g`.
    ///
    /// `positions[r]` is the positional index of input row `r`. When `cache`
    /// is given its keys/values are prepended to every layer's keys, and
    /// `mask` must cover `rows × (cache.len() + rows)`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        tokens: &[u32],
        positions: &[usize],
        mask: Arc<AttnMask>,
        cache: Option<&KvCache<T>>,
    ) -> Result<ForwardVars> {
        let ids = self.check_tokens(tokens)?;
        if let Some(&p) = positions.iter().max() {
            if p >= self.cfg.max_len {
                return Err(Error::Capacity {
                    needed: p + 1,
                    max_len: self.cfg.max_len,
                });
            }
        }
        let ix = &self.index;
        let tok = g.embedding(bound.get(ix.tok_emb), &ids)?;
        let pos = g.embedding(bound.get(ix.pos_emb), positions)?;
        let mut h = g.add(tok, pos)?;
        let mut kv = Vec::with_capacity(self.cfg.n_layers);
        for (l, lp) in ix.layers.iter().enumerate() {
            let x = g.layer_norm(h, bound.get(lp.ln1_g), bound.get(lp.ln1_b))?;
            let q = g.linear(x, bound.get(lp.wq), bound.get(lp.bq))?;
            let k = g.linear(x, bound.get(lp.wk), bound.get(lp.bk))?;
            let v = g.linear(x, bound.get(lp.wv), bound.get(lp.bv))?;
            kv.push((k, v));
            let (k_all, v_all) = match cache {
                Some(c) if !c.is_empty() => {
                    let ck = g.constant(c.keys(l).clone());
                    let cv = g.constant(c.values(l).clone());
                    (g.concat_rows(ck, k)?, g.concat_rows(cv, v)?)
                }
                _ => (k, v),
            };
            let a = g.attention(q, k_all, v_all, self.cfg.n_heads, mask.clone())?;
            let o = g.linear(a, bound.get(lp.wo), bound.get(lp.bo))?;
            h = g.add(h, o)?;
            let x = g.layer_norm(h, bound.get(lp.ln2_g), bound.get(lp.ln2_b))?;
            let m = g.linear(x, bound.get(lp.w1), bound.get(lp.b1))?;
            let m = g.gelu(m);
            let m = g.linear(m, bound.get(lp.w2), bound.get(lp.b2))?;
            h = g.add(h, m)?;
        }
        let x = g.layer_norm(h, bound.get(ix.lnf_g), bound.get(ix.lnf_b))?;
        let logits = g.linear(x, bound.get(ix.head_w), bound.get(ix.head_b))?;
        Ok(ForwardVars { logits, kv })
    }

    /// Full logits `[n×(V+1)]` for positions `0..n` under `mask`.
    pub fn forward(&self, tokens: &[u32], mask: &AttnMask) -> Result<Tensor<T>> {
        let n = tokens.len();
        if n > self.cfg.max_len {
            return Err(Error::Capacity {
                needed: n,
                max_len: self.cfg.max_len,
            });
        }
        if mask.rows() != n || mask.cols() != n {
            return Err(Error::Dimension(format!(
                "mask {}×{} for {} tokens",
                mask.rows(),
                mask.cols(),
                n
            )));
        }
        let mut g = Graph::inference();
        let bound = self.bind(&mut g);
        let positions: Vec<usize> = (0..n).collect();
        let out = self.forward_graph(
            &mut g,
            &bound,
            tokens,
            &positions,
            Arc::new(mask.clone()),
            None,
        )?;
        Ok(g.value(out.logits).clone())
    }

    /// Cache-mode forward: new positions start at `cache.len()`.
    ///
    /// Returns logits `[n×(V+1)]` and appends the first `commit` rows' keys
    /// and values to the cache.
    pub fn forward_with_cache(
        &self,
        cache: &mut KvCache<T>,
        tokens: &[u32],
        block_size: usize,
        commit: usize,
    ) -> Result<Tensor<T>> {
        let (c, n) = (cache.len(), tokens.len());
        if c + n > self.cfg.max_len {
            return Err(Error::Capacity {
                needed: c + n,
                max_len: self.cfg.max_len,
            });
        }
        if block_size == 0 || c % block_size != 0 {
            return Err(Error::State(format!(
                "cache length {c} is not a multiple of block size {block_size}"
            )));
        }
        if commit > n {
            return Err(Error::State(format!("commit {commit} > {n} new rows")));
        }
        let mask = AttnMask::from_fn(n, c + n, |i, j| {
            j < c || j / block_size <= (i + c) / block_size
        });
        let mut g = Graph::inference();
        let bound = self.bind(&mut g);
        let positions: Vec<usize> = (c..c + n).collect();
        let out = self.forward_graph(
            &mut g,
            &bound,
            tokens,
            &positions,
            Arc::new(mask),
            Some(cache),
        )?;
        if commit > 0 {
            for (l, (k, v)) in out.kv.iter().enumerate() {
                let k = g.value(*k).slice_rows(0, commit);
                let v = g.value(*v).slice_rows(0, commit);
                cache.append(l, &k, &v)?;
            }
            cache.len += commit;
        }
        Ok(g.value(out.logits).clone())
    }
}

impl<T: Real> Denoiser for Transformer<T> {
    type Cache = KvCache<T>;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.cfg.n_layers, self.cfg.d_model)
    }

    fn cache_len(&self, cache: &KvCache<T>) -> usize {
        cache.len()
    }

    fn forward_cached(
        &self,
        cache: &mut KvCache<T>,
        tokens: &[u32],
        block_size: usize,
        commit: usize,
    ) -> Result<Logits> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let t = self.forward_with_cache(cache, tokens, block_size, commit)?;
        Ok(Logits::from_tensor(&t, self.cfg.vocab_size))
    }

    fn forward_full(&self, tokens: &[u32], block_size: usize) -> Result<Logits> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let n = tokens.len();
        if block_size == 0 || !n.is_multiple_of(block_size) {
            return Err(Error::Layout { len: n, block_size });
        }
        let mask = build_mask_with_rule(n, block_size, self.rule)?;
        let t = self.forward(tokens, &mask)?;
        Ok(Logits::from_tensor(&t, self.cfg.vocab_size))
    }

    fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    fn bits(rows: &AttnMask) -> Vec<String> {
        (0..rows.rows())
            .map(|i| {
                rows.row(i)
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn block_mask_examples() {
        let m = build_block_mask(4, 2).unwrap();
        assert_eq!(bits(&m), ["1100", "1100", "1111", "1111"]);
        let ar = build_block_mask(5, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(ar.get(i, j), j <= i);
            }
        }
        let full = build_block_mask(6, 6).unwrap();
        assert!((0..6).all(|i| full.row(i).iter().all(|&b| b)));
        assert!(matches!(build_block_mask(6, 4), Err(Error::Layout { .. })));
        assert!(matches!(build_block_mask(6, 0), Err(Error::Layout { .. })));
    }

    #[test]
    fn two_stream_mask_examples() {
        let m = build_two_stream_mask(2, 1).unwrap();
        // noisy position 1 sees itself and clean position 0 only
        assert_eq!(m.row(1), &[false, true, true, false]);
        let mdlm = build_two_stream_mask(4, 4).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert_eq!(mdlm.get(i, j), j < 4);
            }
        }
        assert!(build_two_stream_mask(5, 2).is_err());
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 5,
            max_len: 12,
        }
    }

    #[test]
    fn all_mask_input_gives_finite_distributions() {
        let m = Transformer::<f32>::init(tiny(), 1).unwrap();
        let toks = vec![5u32; 12];
        let logits = m.forward(&toks, &build_block_mask(12, 4).unwrap()).unwrap();
        assert!(logits.all_finite());
        let p = softmax(&logits);
        for i in 0..12 {
            let s: f32 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cache_mode_matches_full_forward_bitwise() {
        let m = Transformer::<f32>::init(tiny(), 7).unwrap();
        let toks: Vec<u32> = vec![0, 5, 3, 1, 5, 5, 2, 4, 1, 0, 5, 3];
        for bs in [1, 2, 3, 4, 6, 12] {
            let full = m
                .forward(&toks, &build_block_mask(12, bs).unwrap())
                .unwrap();
            let mut cache = m.new_cache();
            for b in 0..12 / bs {
                let blk = &toks[b * bs..(b + 1) * bs];
                let got = m.forward_with_cache(&mut cache, blk, bs, bs).unwrap();
                assert_eq!(got, full.slice_rows(b * bs, (b + 1) * bs), "bs={bs} b={b}");
            }
            assert_eq!(cache.len(), 12);
        }
    }

    #[test]
    fn future_blocks_do_not_leak() {
        let m = Transformer::<f64>::init(tiny(), 3).unwrap();
        let mut toks: Vec<u32> = vec![1, 2, 5, 0, 3, 3, 4, 5, 2, 1, 0, 4];
        let mask = build_block_mask(12, 4).unwrap();
        let before = m.forward(&toks, &mask).unwrap();
        toks[9] = 5;
        toks[11] = 0;
        let after = m.forward(&toks, &mask).unwrap();
        assert_eq!(before.slice_rows(0, 8), after.slice_rows(0, 8));
        assert_ne!(before.slice_rows(8, 12), after.slice_rows(8, 12));
    }

    #[test]
    fn capacity_and_token_errors() {
        let m = Transformer::<f32>::init(tiny(), 1).unwrap();
        let mut cache = m.new_cache();
        m.forward_with_cache(&mut cache, &[5; 8], 4, 8).unwrap();
        assert!(matches!(
            m.forward_with_cache(&mut cache, &[5; 8], 4, 0),
            Err(Error::Capacity { .. })
        ));
        assert!(matches!(
            m.forward(&[6], &build_block_mask(1, 1).unwrap()),
            Err(Error::Index(_))
        ));
        let mut cache = m.new_cache();
        m.forward_with_cache(&mut cache, &[5; 3], 3, 3).unwrap();
        assert!(matches!(
            m.forward_with_cache(&mut cache, &[5; 2], 2, 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn bad_head_split_rejected() {
        let cfg = DenoiserConfig {
            d_model: 10,
            n_heads: 4,
            ..tiny()
        };
        assert!(Transformer::<f32>::init(cfg, 0).is_err());
    }
}
