//! Multi-stage draft-then-revise generation.
//!
//! Stage 1 drafts the whole sequence with small blocks, left to right, over a
//! KV cache. Each later stage remasks a fraction γ of the sequence, picked by
//! confidence, and re-infills it with a larger block size.
//!
//! Keys and values of a finished block are not computed by a separate pass:
//! the finished block rides along as extra query rows in the first forward of
//! the next block that still has masked tokens, and is committed to the cache
//! there. Its rows see exactly the keys a dedicated pass would, so the cache
//! contents are bit-identical and the refresh costs no extra forward.
//!
//! Random draws come from one stream per stage and are consumed in order:
//! remask selection, then per block, per step, position selection followed by
//! token draws in ascending position order.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockLayout, Denoiser, Logits};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmaskPolicy {
    /// Uniformly random positions, tokens drawn from the filtered categorical.
    #[default]
    Ancestral,
    /// Highest max-probability positions commit their argmax token.
    ConfidenceTopk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemaskPolicy {
    /// Lowest confidences recorded at commit time.
    #[default]
    Snapshot,
    /// Lowest likelihoods from a fresh forward over the finished sequence.
    Posthoc,
    /// Uniform sample without replacement.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub block_size: usize,
    /// Remask ratio applied before this stage; ignored for the first stage.
    pub gamma: f64,
    /// Denoising steps per block. Defaults: the block size for the first
    /// stage, the number of masked tokens in the block afterwards.
    pub steps_per_block: Option<usize>,
    pub policy: UnmaskPolicy,
    pub remask: RemaskPolicy,
    pub temperature: f64,
    pub nucleus_p: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            block_size: 4,
            gamma: 0.0,
            steps_per_block: None,
            policy: UnmaskPolicy::Ancestral,
            remask: RemaskPolicy::Snapshot,
            temperature: 1.0,
            nucleus_p: 0.9,
        }
    }
}

impl StageConfig {
    pub fn with_block(block_size: usize) -> Self {
        Self {
            block_size,
            ..Self::default()
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        BlockLayout::new(len, self.block_size).map_err(|_| {
            Error::Config(format!(
                "block size {} does not divide length {len}",
                self.block_size
            ))
        })?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config(format!(
                "nucleus_p {} outside (0, 1]",
                self.nucleus_p
            )));
        }
        if self.steps_per_block == Some(0) {
            return Err(Error::Config("steps_per_block must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered stages with strictly increasing block sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageConfig>,
}

impl StagePlan {
    pub fn new(stages: Vec<StageConfig>) -> Self {
        Self { stages }
    }

    /// Draft with `draft` blocks, then one global revision with ratio γ.
    pub fn two_stage(draft: usize, len: usize, gamma: f64) -> Self {
        Self::new(vec![
            StageConfig::with_block(draft),
            StageConfig {
                gamma,
                ..StageConfig::with_block(len)
            },
        ])
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan is empty".into()));
        }
        for s in &self.stages {
            s.validate(len)?;
        }
        if self
            .stages
            .windows(2)
            .any(|w| w[0].block_size >= w[1].block_size)
        {
            return Err(Error::Config("block sizes must strictly increase".into()));
        }
        Ok(())
    }
}

/// Per-position snapshot confidences and the stage that last wrote them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceTrace {
    values: Vec<Option<f64>>,
    stage: Vec<Option<usize>>,
}

impl ConfidenceTrace {
    pub fn unset(len: usize) -> Self {
        Self {
            values: vec![None; len],
            stage: vec![None; len],
        }
    }

    pub fn from_values(values: &[f64]) -> Self {
        Self {
            values: values.iter().map(|&v| Some(v)).collect(),
            stage: vec![Some(0); values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.values[i]
    }

    pub fn stage_of(&self, i: usize) -> Option<usize> {
        self.stage[i]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    fn set(&mut self, i: usize, v: f64, stage: usize) {
        self.values[i] = Some(v);
        self.stage[i] = Some(stage);
    }

    fn clear(&mut self, i: usize) {
        self.values[i] = None;
        self.stage[i] = None;
    }

    /// All values, or `None` if any position is unset.
    pub fn complete(&self) -> Option<Vec<f64>> {
        self.values.iter().copied().collect()
    }
}

/// Sequence under construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftState {
    pub x: Vec<u32>,
    pub trace: ConfidenceTrace,
    /// Forwards issued so far, across all stages.
    pub nfe: usize,
    /// Index of the next stage to run.
    pub stage: usize,
}

impl DraftState {
    /// All-MASK sequence with an unset trace.
    pub fn empty(len: usize, mask_id: u32) -> Self {
        Self {
            x: vec![mask_id; len],
            trace: ConfidenceTrace::unset(len),
            nfe: 0,
            stage: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockMetrics {
    pub block: usize,
    /// Masked tokens at the start of the block.
    pub masked: usize,
    pub steps: usize,
    pub forwards: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub block_size: usize,
    /// Masked tokens when the stage started (after remasking).
    pub masked_count: usize,
    /// Forwards spent scoring confidences for remasking (post-hoc only).
    pub remask_nfes: usize,
    /// All forwards charged to the stage.
    pub nfes: usize,
    pub blocks: Vec<BlockMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Reuse keys/values of finished blocks. When off, every step recomputes
    /// the whole prefix.
    pub use_cache: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { use_cache: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub x: Vec<u32>,
    pub trace: ConfidenceTrace,
    pub metrics: Vec<StageMetrics>,
}

impl Generation {
    pub fn total_nfes(&self) -> usize {
        self.metrics.iter().map(|m| m.nfes).sum()
    }
}

/// `softmax(logits / temperature)`.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&z| (z - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Keeps the smallest set of most-probable tokens (ties: lower id first)
/// whose mass reaches `p`, renormalised.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        keep[i] = true;
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let total: f64 = probs
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&q, _)| q)
        .sum();
    probs
        .iter()
        .zip(&keep)
        .map(|(&q, &k)| if k { q / total } else { 0.0 })
        .collect()
}

/// Inverse-CDF draw in id order from one uniform.
pub fn draw_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &q) in probs.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&q| q > 0.0).unwrap_or(0)
}

/// `k` distinct elements of `items` by partial Fisher–Yates, returned in
/// ascending order. Taking everything consumes no randomness.
pub fn choose_subset(items: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pool = items.to_vec();
    if k < pool.len() {
        for i in 0..k {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
    }
    pool.sort_unstable();
    pool
}

/// Index of the largest entry, lowest index on ties.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > p[best] {
            best = i;
        }
    }
    best
}

/// One committed position: `(position, token, snapshot confidence)`.
pub type Commit = (usize, u32, f64);

/// Picks `quota` of the `masked` positions and their tokens from per-position
/// logits (`logits.row(r)` belongs to `masked[r]`).
pub fn commit_step(
    masked: &[usize],
    logits: &[&[f64]],
    quota: usize,
    cfg: &StageConfig,
    rng: &mut impl Rng,
) -> Vec<Commit> {
    match cfg.policy {
        UnmaskPolicy::Ancestral => {
            let rows: Vec<usize> = (0..masked.len()).collect();
            let chosen = choose_subset(&rows, quota, rng);
            chosen
                .into_iter()
                .map(|r| {
                    let probs = tempered_probs(logits[r], cfg.temperature);
                    let filtered = nucleus_filter(&probs, cfg.nucleus_p);
                    let tok = draw_index(&filtered, rng);
                    (masked[r], tok as u32, probs[tok])
                })
                .collect()
        }
        UnmaskPolicy::ConfidenceTopk => {
            let mut scored: Vec<(usize, usize, f64)> = (0..masked.len())
                .map(|r| {
                    let probs = tempered_probs(logits[r], cfg.temperature);
                    let tok = argmax(&probs);
                    (r, tok, probs[tok])
                })
                .collect();
            scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            let mut out: Vec<Commit> = scored
                .into_iter()
                .take(quota)
                .map(|(r, tok, c)| (masked[r], tok as u32, c))
                .collect();
            out.sort_by_key(|c| c.0);
            out
        }
    }
}

/// Number of positions remasked for ratio `gamma` over `len` tokens:
/// `⌊γ·len⌋`, with a 1e-9 guard against representation error.
pub fn remask_count(gamma: f64, len: usize) -> usize {
    ((gamma * len as f64 + 1e-9).floor() as usize).min(len)
}

/// Indices of the `count` smallest confidences, ties to the lower index.
pub fn select_lowest(conf: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Probability each token of a finished sequence receives from one forward
/// under the block mask of `block_size`.
pub fn posthoc_confidence<D: Denoiser>(
    model: &D,
    x: &[u32],
    block_size: usize,
) -> Result<Vec<f64>> {
    if x.iter().any(|&t| t == model.mask_id()) {
        return Err(Error::State(
            "post-hoc scoring needs a finished sequence".into(),
        ));
    }
    let logits = model.forward_full(x, block_size)?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &tok)| tempered_probs(logits.row(i), 1.0)[tok as usize])
        .collect())
}

/// Outcome of inter-stage remasking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Remasked {
    pub indices: Vec<usize>,
    pub nfes: usize,
}

/// Resets `⌊γL⌋` positions of a finished sequence to MASK and clears their
/// confidences. `block_size` is the layout used for post-hoc scoring.
pub fn remask<D: Denoiser>(
    model: &D,
    state: &mut DraftState,
    gamma: f64,
    policy: RemaskPolicy,
    block_size: usize,
    rng: &mut impl Rng,
) -> Result<Remasked> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let mask_id = model.mask_id();
    let len = state.x.len();
    if state.x.contains(&mask_id) {
        return Err(Error::State("remasking needs a finished sequence".into()));
    }
    let count = remask_count(gamma, len);
    let (indices, nfes) = match policy {
        RemaskPolicy::Snapshot => {
            let conf = state
                .trace
                .complete()
                .ok_or_else(|| Error::State("confidence trace has unset entries".into()))?;
            (select_lowest(&conf, count), 0)
        }
        RemaskPolicy::Posthoc => {
            if count == 0 {
                (Vec::new(), 0)
            } else {
                let conf = posthoc_confidence(model, &state.x, block_size)?;
                (select_lowest(&conf, count), 1)
            }
        }
        RemaskPolicy::Random => {
            let all: Vec<usize> = (0..len).collect();
            (choose_subset(&all, count, rng), 0)
        }
    };
    for &i in &indices {
        state.x[i] = mask_id;
        state.trace.clear(i);
    }
    state.nfe += nfes;
    Ok(Remasked { indices, nfes })
}

enum Context<C> {
    Cached(C),
    Uncached,
}

fn block_logits<D: Denoiser>(
    model: &D,
    ctx: &mut Context<D::Cache>,
    x: &[u32],
    block: &Range<usize>,
    block_size: usize,
) -> Result<Logits> {
    match ctx {
        Context::Cached(cache) => {
            let c = model.cache_len(cache);
            if c > block.start || !(block.start - c).is_multiple_of(block_size) {
                return Err(Error::State(format!(
                    "cache holds {c} positions, block starts at {}",
                    block.start
                )));
            }
            model.forward_cached(cache, &x[c..block.end], block_size, block.start - c)
        }
        Context::Uncached => model.forward_full(&x[..block.end], block_size),
    }
}

/// Iteratively unmasks one block. Pre-filled positions are left untouched
/// along with their confidences. A step with nothing left to unmask is not
/// run and costs nothing.
#[allow(clippy::too_many_arguments)]
fn sample_block<D: Denoiser>(
    model: &D,
    state: &mut DraftState,
    ctx: &mut Context<D::Cache>,
    block: Range<usize>,
    block_index: usize,
    cfg: &StageConfig,
    stage: usize,
    rng: &mut impl Rng,
) -> Result<BlockMetrics> {
    let mask_id = model.mask_id();
    let bs = block.len();
    let mut masked: Vec<usize> = block.clone().filter(|&i| state.x[i] == mask_id).collect();
    let steps = cfg
        .steps_per_block
        .unwrap_or(if stage == 0 { bs } else { masked.len() });
    let mut metrics = BlockMetrics {
        block: block_index,
        masked: masked.len(),
        steps,
        forwards: 0,
    };
    for step in 0..steps {
        if masked.is_empty() {
            break;
        }
        let quota = masked.len().div_ceil(steps - step);
        let logits = block_logits(model, ctx, &state.x, &block, cfg.block_size)?;
        metrics.forwards += 1;
        state.nfe += 1;
        let offset = logits.rows() - bs;
        let rows: Vec<&[f64]> = masked
            .iter()
            .map(|&i| logits.row(offset + i - block.start))
            .collect();
        for (pos, tok, conf) in commit_step(&masked, &rows, quota, cfg, rng) {
            state.x[pos] = tok;
            state.trace.set(pos, conf, stage);
        }
        masked.retain(|&i| state.x[i] == mask_id);
    }
    if !masked.is_empty() {
        return Err(Error::Invariant(format!(
            "block {block_index} still has {} masked tokens",
            masked.len()
        )));
    }
    Ok(metrics)
}

/// Runs one stage over the current state with a fresh cache.
pub fn run_stage<D: Denoiser>(
    model: &D,
    state: &mut DraftState,
    cfg: &StageConfig,
    opts: SamplerOptions,
    rng: &mut impl Rng,
) -> Result<StageMetrics> {
    let len = state.x.len();
    cfg.validate(len)?;
    let layout = BlockLayout::new(len, cfg.block_size)?;
    let stage = state.stage;
    let mask_id = model.mask_id();
    let mut metrics = StageMetrics {
        stage,
        block_size: cfg.block_size,
        masked_count: state.x.iter().filter(|&&t| t == mask_id).count(),
        ..StageMetrics::default()
    };
    let mut ctx = if opts.use_cache {
        Context::Cached(model.new_cache())
    } else {
        Context::Uncached
    };
    for b in 0..layout.n_blocks() {
        let bm = sample_block(
            model,
            state,
            &mut ctx,
            layout.block_range(b),
            b,
            cfg,
            stage,
            rng,
        )?;
        metrics.nfes += bm.forwards;
        metrics.blocks.push(bm);
    }
    state.stage += 1;
    Ok(metrics)
}

/// Stage `k`'s random stream for generation seed `seed`.
pub fn stage_rng(seed: u64, stage: usize) -> rng::Rng {
    rng::stream(rng::derive_seed(seed, streams::SAMPLE), stage as u64)
}

/// Runs stage `state.stage` of `plan`, remasking first when it is not the
/// first stage.
pub fn advance<D: Denoiser>(
    model: &D,
    plan: &StagePlan,
    state: &mut DraftState,
    opts: SamplerOptions,
    rng: &mut impl Rng,
) -> Result<StageMetrics> {
    let k = state.stage;
    let cfg = plan
        .stages
        .get(k)
        .ok_or_else(|| Error::State(format!("plan has no stage {k}")))?;
    let mut remask_nfes = 0;
    if k > 0 {
        remask_nfes = remask(model, state, cfg.gamma, cfg.remask, cfg.block_size, rng)?.nfes;
    }
    let mut m = run_stage(model, state, cfg, opts, rng)?;
    m.remask_nfes = remask_nfes;
    m.nfes += remask_nfes;
    Ok(m)
}

/// Full draft-then-revise generation of `len` tokens.
pub fn generate<D: Denoiser>(
    model: &D,
    plan: &StagePlan,
    len: usize,
    seed: u64,
    opts: SamplerOptions,
) -> Result<Generation> {
    plan.validate(len)?;
    if len > model.max_len() {
        return Err(Error::Capacity {
            needed: len,
            max_len: model.max_len(),
        });
    }
    let mut state = DraftState::empty(len, model.mask_id());
    let mut metrics = Vec::with_capacity(plan.stages.len());
    for k in 0..plan.stages.len() {
        let mut r = stage_rng(seed, k);
        metrics.push(advance(model, plan, &mut state, opts, &mut r)?);
    }
    Ok(Generation {
        x: state.x,
        trace: state.trace,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{OneHotMock, UniformMock};

    #[test]
    fn nucleus_keeps_minimal_top_mass() {
        let p = [0.1, 0.5, 0.3, 0.1];
        let f = nucleus_filter(&p, 0.75);
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.625).abs() < 1e-12 && (f[2] - 0.375).abs() < 1e-12);
        assert_eq!(nucleus_filter(&p, 1.0), p.to_vec());
        // ties resolved toward lower ids
        let f = nucleus_filter(&[0.25; 4], 0.5);
        assert_eq!(f, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn remask_examples() {
        assert_eq!(
            select_lowest(&[0.9, 0.1, 0.5, 0.7], remask_count(0.5, 4)),
            vec![1, 2]
        );
        assert_eq!(remask_count(0.0, 10), 0);
        assert_eq!(remask_count(1.0, 10), 10);
        assert_eq!(remask_count(0.29, 100), 29);
        assert_eq!(remask_count(0.1, 1024), 102);
        assert_eq!(select_lowest(&[0.2, 0.2, 0.2], 2), vec![0, 1]);
    }

    #[test]
    fn remask_applies_to_state() {
        let m = UniformMock::new(3, 4);
        let mut st = DraftState {
            x: vec![0, 1, 2, 0],
            trace: ConfidenceTrace::from_values(&[0.9, 0.1, 0.5, 0.7]),
            nfe: 0,
            stage: 1,
        };
        let mut r = rng::stream(0, 0);
        let out = remask(&m, &mut st, 0.5, RemaskPolicy::Snapshot, 4, &mut r).unwrap();
        assert_eq!(out.indices, vec![1, 2]);
        assert_eq!(st.x, vec![0, 3, 3, 0]);
        assert_eq!(st.trace.get(1), None);
        assert_eq!(st.trace.get(0), Some(0.9));
        let mut full = st.clone();
        full.x = vec![0, 1, 2, 0];
        full.trace = ConfidenceTrace::from_values(&[0.5; 4]);
        let out = remask(&m, &mut full, 1.0, RemaskPolicy::Random, 4, &mut r).unwrap();
        assert_eq!(out.indices, vec![0, 1, 2, 3]);
        assert!(matches!(
            remask(&m, &mut full, 1.5, RemaskPolicy::Snapshot, 4, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn remask_zero_is_noop() {
        let m = UniformMock::new(3, 4);
        let mut st = DraftState {
            x: vec![2, 1, 2, 0],
            trace: ConfidenceTrace::from_values(&[0.3, 0.1, 0.5, 0.7]),
            nfe: 0,
            stage: 1,
        };
        let before = st.clone();
        let mut r = rng::stream(0, 0);
        for p in [
            RemaskPolicy::Snapshot,
            RemaskPolicy::Posthoc,
            RemaskPolicy::Random,
        ] {
            let out = remask(&m, &mut st, 0.0, p, 4, &mut r).unwrap();
            assert!(out.indices.is_empty());
            assert_eq!(st, before);
        }
    }

    #[test]
    fn prefilled_block_costs_nothing() {
        let m = UniformMock::new(3, 4);
        let mut st = DraftState {
            x: vec![0, 1, 2, 0],
            trace: ConfidenceTrace::from_values(&[0.3, 0.1, 0.5, 0.7]),
            nfe: 0,
            stage: 1,
        };
        let before = st.clone();
        let cfg = StageConfig::with_block(4);
        let mut r = rng::stream(0, 0);
        let met = run_stage(&m, &mut st, &cfg, SamplerOptions::default(), &mut r).unwrap();
        assert_eq!(met.nfes, 0);
        assert_eq!(st.x, before.x);
        assert_eq!(st.trace, before.trace);
        assert_eq!(m.forward_count(), 0);
    }

    #[test]
    fn one_hot_mock_gives_full_confidence() {
        let m = OneHotMock::new(4, 8);
        for policy in [UnmaskPolicy::Ancestral, UnmaskPolicy::ConfidenceTopk] {
            let plan = StagePlan::new(vec![StageConfig {
                policy,
                ..StageConfig::with_block(2)
            }]);
            let g = generate(&m, &plan, 8, 1, SamplerOptions::default()).unwrap();
            assert_eq!(g.x, m.target(8));
            assert!(g.trace.complete().unwrap().iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn posthoc_examples() {
        let u = UniformMock::new(4, 6);
        let c = posthoc_confidence(&u, &[0, 1, 2, 3, 0, 1], 6).unwrap();
        assert!(c.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_eq!(u.forward_count(), 1);
        let echo = crate::mock::EchoMock::new(4, 6);
        let c = posthoc_confidence(&echo, &[0, 1, 2, 3, 0, 1], 3).unwrap();
        assert!(c.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn plan_validation() {
        assert!(StagePlan::two_stage(4, 16, 0.5).validate(16).is_ok());
        assert!(StagePlan::two_stage(4, 16, 0.5).validate(18).is_err());
        let bad = StagePlan::new(vec![StageConfig::with_block(8), StageConfig::with_block(4)]);
        assert!(bad.validate(16).is_err());
        assert!(StagePlan::new(vec![]).validate(16).is_err());
    }

    #[test]
    fn cache_mismatch_is_a_state_error() {
        let m = UniformMock::new(3, 8);
        let mut ctx = Context::Cached(m.new_cache());
        let mut cache = m.new_cache();
        m.forward_cached(&mut cache, &[3, 3, 3, 3, 3, 3], 2, 6)
            .unwrap();
        ctx = match ctx {
            Context::Cached(_) => Context::Cached(cache),
            c => c,
        };
        let x = vec![3u32; 8];
        assert!(matches!(
            block_logits(&m, &mut ctx, &x, &(2..4), 2),
            Err(Error::State(_))
        ));
    }

    use std::collections::HashMap;

    use crate::oracle::{context_mock, exact_law};

    #[test]
    fn sampler_matches_enumerated_law() {
        let m = context_mock();
        let exact = exact_law(&m, 4, 2).unwrap();
        assert!((exact.values().sum::<f64>() - 1.0).abs() < 1e-12);
        let plan = StagePlan::new(vec![StageConfig {
            nucleus_p: 1.0,
            ..StageConfig::with_block(2)
        }]);
        let n = 100_000;
        let mut counts: HashMap<Vec<u32>, f64> = HashMap::new();
        for seed in 0..n {
            let g = generate(&m, &plan, 4, seed, SamplerOptions::default()).unwrap();
            *counts.entry(g.x).or_default() += 1.0 / n as f64;
        }
        let mut tv = 0.0;
        for (k, &p) in &exact {
            tv += (p - counts.get(k).copied().unwrap_or(0.0)).abs();
        }
        tv += counts
            .iter()
            .filter(|(k, _)| !exact.contains_key(*k))
            .map(|(_, &q)| q)
            .sum::<f64>();
        tv *= 0.5;
        assert!(tv < 0.02, "TV {tv}");
    }

    #[test]
    fn cache_does_not_change_samples() {
        let m = context_mock();
        let plan = StagePlan::two_stage(2, 4, 0.5);
        for seed in 0..50 {
            let a = generate(&m, &plan, 4, seed, SamplerOptions { use_cache: true }).unwrap();
            let b = generate(&m, &plan, 4, seed, SamplerOptions { use_cache: false }).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gamma_zero_revision_is_identity() {
        let m = context_mock();
        let one = StagePlan::new(vec![StageConfig::with_block(2)]);
        for seed in 0..20 {
            let a = generate(&m, &one, 4, seed, SamplerOptions::default()).unwrap();
            let b = generate(
                &m,
                &StagePlan::two_stage(2, 4, 0.0),
                4,
                seed,
                SamplerOptions::default(),
            )
            .unwrap();
            assert_eq!(a.x, b.x);
            assert_eq!(a.trace, b.trace);
            assert_eq!(b.metrics[1].nfes, 0);
        }
    }

    #[test]
    fn gamma_one_revision_ignores_draft() {
        let m = context_mock();
        for seed in 0..20 {
            let g = generate(
                &m,
                &StagePlan::two_stage(2, 4, 1.0),
                4,
                seed,
                SamplerOptions::default(),
            )
            .unwrap();
            let mut st = DraftState::empty(4, 3);
            run_stage(
                &m,
                &mut st,
                &StageConfig::with_block(4),
                SamplerOptions::default(),
                &mut stage_rng(seed, 1),
            )
            .unwrap();
            assert_eq!(g.x, st.x);
            assert!((0..4).all(|i| g.trace.stage_of(i) == Some(1)));
        }
    }

    #[test]
    fn nfe_counts_follow_block_schedule() {
        let m = context_mock();
        let g = generate(
            &m,
            &StagePlan::two_stage(2, 4, 0.5),
            4,
            3,
            SamplerOptions::default(),
        )
        .unwrap();
        assert_eq!(g.metrics[0].nfes, 4);
        assert_eq!(g.metrics[1].masked_count, 2);
        assert_eq!(g.metrics[1].nfes, 2);
        assert_eq!(m.forward_count() as usize, g.total_nfes());
    }

    proptest::proptest! {
        #[test]
        fn nucleus_is_minimal_renormalised_prefix(
            raw in proptest::collection::vec(0.0f64..1.0, 1..10),
            p in 0.05f64..1.0,
        ) {
            let z: f64 = raw.iter().sum::<f64>() + 1e-3;
            let probs: Vec<f64> = raw.iter().map(|x| (x + 1e-3 / raw.len() as f64) / z).collect();
            let f = nucleus_filter(&probs, p);
            let total: f64 = f.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-9);
            let kept: Vec<usize> = (0..f.len()).filter(|&i| f[i] > 0.0).collect();
            let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
            proptest::prop_assert!(mass >= p - 1e-12);
            // Dropping the smallest kept token would fall short of p.
            let smallest = kept.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
            proptest::prop_assert!(kept.len() == 1 || mass - smallest < p);
            for &i in &kept {
                proptest::prop_assert!((f[i] - probs[i] / mass).abs() < 1e-12);
            }
        }

        #[test]
        fn select_lowest_is_sort_prefix(
            conf in proptest::collection::vec(0u8..4, 0..16),
            gamma in 0.0f64..=1.0,
        ) {
            let conf: Vec<f64> = conf.into_iter().map(|c| c as f64 / 4.0).collect();
            let k = remask_count(gamma, conf.len());
            proptest::prop_assert!(k <= conf.len());
            let mut order: Vec<usize> = (0..conf.len()).collect();
            order.sort_by(|&a, &b| conf[a].partial_cmp(&conf[b]).unwrap().then(a.cmp(&b)));
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            let mut got = select_lowest(&conf, k);
            got.sort_unstable();
            proptest::prop_assert_eq!(got, want);
        }

        #[test]
        fn choose_subset_draws_distinct_members(n in 0usize..20, k in 0usize..25, seed in 0u64..1000) {
            let items: Vec<usize> = (0..n).map(|i| i * 3).collect();
            let got = choose_subset(&items, k, &mut crate::rng::stream(seed, 0));
            proptest::prop_assert_eq!(got.len(), k.min(n));
            let mut d = got.clone();
            d.sort_unstable();
            d.dedup();
            proptest::prop_assert_eq!(d.len(), got.len());
            proptest::prop_assert!(got.iter().all(|g| items.contains(g)));
        }
    }
}
