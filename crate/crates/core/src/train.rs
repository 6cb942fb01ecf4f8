//! Forward masking, the block NELBO, and the mixed-scale training objective.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::data::shuffled_batches;
use crate::error::{Error, Result};
use crate::model::{build_block_mask, build_two_stream_mask, BlockLayout, Transformer};
use crate::optim::AdamW;
use crate::rng::{self, streams, RngState};
use crate::tensor::Real;

/// Linear masking schedule `α(t) = 1 − t` with sampled `t` clamped below by
/// `t_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { t_min: 1e-3 }
    }
}

impl NoiseSchedule {
    /// Probability that a token survives at noise level `t`.
    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn alpha_prime(&self, _t: f64) -> f64 {
        -1.0
    }

    /// Positive NELBO weight `−α'(t) / (1 − α(t))`, i.e. `1/t`.
    pub fn weight(&self, t: f64) -> f64 {
        -self.alpha_prime(t) / (1.0 - self.alpha(t))
    }

    pub fn sample_t(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        self.t_min + (1.0 - self.t_min) * u
    }
}

/// Replaces each position by `mask_id` independently with probability
/// `1 − α(t)`. One uniform draw per position, in order.
pub fn forward_mask(
    x: &[u32],
    t: f64,
    mask_id: u32,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Vec<u32> {
    let p_mask = 1.0 - schedule.alpha(t);
    x.iter()
        .map(|&tok| {
            let u: f64 = rng.random();
            if u < p_mask {
                mask_id
            } else {
                tok
            }
        })
        .collect()
}

/// One draw of `(t, x_t)` for a clean sequence under a given block size.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedSequence {
    pub clean: Vec<u32>,
    pub noisy: Vec<u32>,
    pub t: f64,
    pub block_size: usize,
}

impl NoisedSequence {
    pub fn draw(
        x: &[u32],
        block_size: usize,
        mask_id: u32,
        schedule: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        BlockLayout::new(x.len(), block_size)?;
        if let Some(&bad) = x.iter().find(|&&tok| tok >= mask_id) {
            return Err(Error::Data(format!("clean sequence contains id {bad}")));
        }
        let t = schedule.sample_t(rng);
        let noisy = forward_mask(x, t, mask_id, schedule, rng);
        Ok(Self {
            clean: x.to_vec(),
            noisy,
            t,
            block_size,
        })
    }

    fn weights<T: Real>(&self, schedule: &NoiseSchedule, mask_id: u32) -> Vec<T> {
        let w = T::from_f64(schedule.weight(self.t) / self.clean.len() as f64);
        self.noisy
            .iter()
            .map(|&tok| if tok == mask_id { w } else { T::zero() })
            .collect()
    }

    fn targets(&self) -> Vec<usize> {
        self.clean.iter().map(|&t| t as usize).collect()
    }
}

/// How the block NELBO is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossPath {
    /// Single forward over `[x_t ; x]` with the two-stream mask.
    #[default]
    TwoStream,
    /// Reference: one forward per block over `[x^{<b} ; x_t^b]`.
    Looped,
}

/// Records the per-token block NELBO of `s` on `g`:
/// `w(t)/L · Σ_{masked i} −log p_θ(x_i | x_t^b, x^{<b})`.
pub fn nelbo_graph<T: Real>(
    model: &Transformer<T>,
    g: &mut Graph<T>,
    s: &NoisedSequence,
    schedule: &NoiseSchedule,
    path: LossPath,
) -> Result<Var> {
    let cfg = model.config();
    let len = s.clean.len();
    let layout = BlockLayout::new(len, s.block_size)?;
    let mask_id = cfg.mask_id();
    let weights: Vec<T> = s.weights(schedule, mask_id);
    let targets = s.targets();
    let bound = model.bind(g);
    match path {
        LossPath::TwoStream => {
            let mut tokens = s.noisy.clone();
            tokens.extend_from_slice(&s.clean);
            let positions: Vec<usize> = (0..len).chain(0..len).collect();
            let mask = Arc::new(build_two_stream_mask(len, s.block_size)?);
            let out = model.forward_graph(g, &bound, &tokens, &positions, mask, None)?;
            let logits = g.slice_rows(out.logits, 0, len)?;
            g.cross_entropy(logits, &targets, &weights, cfg.vocab_size)
        }
        LossPath::Looped => {
            let mut total: Option<Var> = None;
            for b in 0..layout.n_blocks() {
                let r = layout.block_range(b);
                let mut tokens = s.clean[..r.start].to_vec();
                tokens.extend_from_slice(&s.noisy[r.clone()]);
                let positions: Vec<usize> = (0..r.end).collect();
                let mask = Arc::new(build_block_mask(r.end, s.block_size)?);
                let out = model.forward_graph(g, &bound, &tokens, &positions, mask, None)?;
                let logits = g.slice_rows(out.logits, r.start, r.end)?;
                let ce = g.cross_entropy(
                    logits,
                    &targets[r.clone()],
                    &weights[r.clone()],
                    cfg.vocab_size,
                )?;
                total = Some(match total {
                    Some(acc) => g.add(acc, ce)?,
                    None => ce,
                });
            }
            Ok(total.expect("at least one block"))
        }
    }
}

/// Full-sequence masked-diffusion loss: one bidirectional forward over `x_t`
/// alone, no clean context.
pub fn mdlm_graph<T: Real>(
    model: &Transformer<T>,
    g: &mut Graph<T>,
    s: &NoisedSequence,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let cfg = model.config();
    let len = s.clean.len();
    let bound = model.bind(g);
    let positions: Vec<usize> = (0..len).collect();
    let mask = Arc::new(AttnMask::from_fn(len, len, |_, _| true));
    let out = model.forward_graph(g, &bound, &s.noisy, &positions, mask, None)?;
    let weights: Vec<T> = s.weights(schedule, cfg.mask_id());
    g.cross_entropy(out.logits, &s.targets(), &weights, cfg.vocab_size)
}

/// Value of the block NELBO for one noised sequence.
pub fn nelbo_value<T: Real>(
    model: &Transformer<T>,
    s: &NoisedSequence,
    schedule: &NoiseSchedule,
    path: LossPath,
) -> Result<T> {
    let mut g = Graph::inference();
    let v = nelbo_graph(model, &mut g, s, schedule, path)?;
    Ok(g.value(v).item())
}

/// Samples `t` and `x_t`, then evaluates the block NELBO of `x`.
pub fn nelbo_loss<T: Real>(
    model: &Transformer<T>,
    x: &[u32],
    block_size: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    path: LossPath,
) -> Result<T> {
    let s = NoisedSequence::draw(x, block_size, model.config().mask_id(), schedule, rng)?;
    nelbo_value(model, &s, schedule, path)
}

/// Distribution the training block size is drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockMix {
    /// `B_global` with probability λ, else `B_draft`.
    #[default]
    Bimodal,
    /// Uniform over every divisor of `L` in `[B_draft, B_global]`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub block_draft: usize,
    /// `None` means the full sequence length.
    pub block_global: Option<usize>,
    pub mix: BlockMix,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub t_min: f64,
    pub checkpoint_every: usize,
    pub optimizer: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            block_draft: 4,
            block_global: None,
            mix: BlockMix::Bimodal,
            batch: 16,
            steps: 1000,
            seed: 0,
            t_min: 1e-3,
            checkpoint_every: 0,
            optimizer: AdamW::default(),
        }
    }
}

impl TrainConfig {
    pub fn global_block(&self, len: usize) -> usize {
        self.block_global.unwrap_or(len)
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule { t_min: self.t_min }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        for b in [self.block_draft, self.global_block(len)] {
            BlockLayout::new(len, b).map_err(|_| {
                Error::Config(format!(
                    "block size {b} does not divide sequence length {len}"
                ))
            })?;
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(Error::Config(format!(
                "t_min {} outside [0, 1)",
                self.t_min
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let o = &self.optimizer;
        if o.lr.is_nan() || o.lr <= 0.0 || !(0.0..=1.0).contains(&o.min_lr_ratio) {
            return Err(Error::Config(format!(
                "bad learning rate {} or min_lr_ratio {}",
                o.lr, o.min_lr_ratio
            )));
        }
        Ok(())
    }
}

/// Draws the block size for one training sequence. Always consumes exactly
/// one uniform from `rng`.
pub fn sample_block_size(cfg: &TrainConfig, len: usize, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let global = cfg.global_block(len);
    match cfg.mix {
        BlockMix::Bimodal => {
            if u < cfg.lambda {
                global
            } else {
                cfg.block_draft
            }
        }
        BlockMix::Uniform => {
            let sizes: Vec<usize> = (cfg.block_draft..=global)
                .filter(|b| len.is_multiple_of(*b))
                .collect();
            sizes[((u * sizes.len() as f64) as usize).min(sizes.len() - 1)]
        }
    }
}

/// Result of evaluating the mixed-scale objective on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLoss {
    pub value: f64,
    pub sequences: Vec<SequenceLoss>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLoss {
    pub loss: f64,
    pub block_size: usize,
    pub t: f64,
}

/// Draws block sizes (from `size_rng`) and noise (from `noise_rng`) for
/// every sequence of `batch`, in order.
pub fn draw_batch(
    batch: &[Vec<u32>],
    cfg: &TrainConfig,
    mask_id: u32,
    size_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> Result<Vec<NoisedSequence>> {
    let schedule = cfg.schedule();
    batch
        .iter()
        .map(|x| {
            let b = sample_block_size(cfg, x.len(), size_rng);
            NoisedSequence::draw(x, b, mask_id, &schedule, noise_rng)
        })
        .collect()
}

/// Batch mean of the block NELBO with per-sequence block sizes.
pub fn mixed_loss<T: Real>(
    model: &Transformer<T>,
    batch: &[Vec<u32>],
    cfg: &TrainConfig,
    size_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> Result<MixedLoss> {
    let drawn = draw_batch(batch, cfg, model.config().mask_id(), size_rng, noise_rng)?;
    let schedule = cfg.schedule();
    let mut sequences = Vec::with_capacity(drawn.len());
    let mut sum = 0.0;
    for s in &drawn {
        let loss = nelbo_value(model, s, &schedule, LossPath::TwoStream)?.as_f64();
        sum += loss;
        sequences.push(SequenceLoss {
            loss,
            block_size: s.block_size,
            t: s.t,
        });
    }
    Ok(MixedLoss {
        value: sum / drawn.len() as f64,
        sequences,
    })
}

/// Next-token loss for the autoregressive scorer: inputs are the sequence
/// shifted right with MASK as the start symbol, under a causal mask.
pub fn ar_graph<T: Real>(model: &Transformer<T>, g: &mut Graph<T>, x: &[u32]) -> Result<Var> {
    let cfg = model.config();
    let len = x.len();
    let mut inputs = vec![cfg.mask_id()];
    inputs.extend_from_slice(&x[..len - 1]);
    let bound = model.bind(g);
    let positions: Vec<usize> = (0..len).collect();
    let mask = Arc::new(build_block_mask(len, 1)?);
    let out = model.forward_graph(g, &bound, &inputs, &positions, mask, None)?;
    let targets: Vec<usize> = x.iter().map(|&t| t as usize).collect();
    let w = vec![T::from_f64(1.0 / len as f64); len];
    g.cross_entropy(out.logits, &targets, &w, cfg.vocab_size)
}

/// What `train_loop` optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Mixed-scale block NELBO.
    Diffusion,
    /// Left-to-right next-token prediction (scorer models).
    Autoregressive,
}

/// One row of the loss curve: a single sequence's loss at a step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub block_size: usize,
    pub t: f64,
}

/// Runs `cfg.steps` optimisation steps over shuffled epochs of `train`.
///
/// Data order, block sizes and noise come from separate streams of
/// `cfg.seed`. `on_checkpoint(step, model, rngs)` fires every
/// `cfg.checkpoint_every` steps and after the last step; `rngs` holds the
/// block-size and noise generator positions.
pub fn train_loop<T: Real>(
    model: &mut Transformer<T>,
    train: &[Vec<u32>],
    cfg: &TrainConfig,
    objective: Objective,
    mut on_checkpoint: impl FnMut(usize, &Transformer<T>, &[RngState]) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    let len = train
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("empty training set".into()))?;
    if train.iter().any(|x| x.len() != len) {
        return Err(Error::Data("training sequences differ in length".into()));
    }
    cfg.validate(len)?;
    let mask_id = model.config().mask_id();
    let schedule = cfg.schedule();
    let mut size_rng = rng::stream(cfg.seed, streams::BLOCK_SIZE);
    let mut noise_rng = rng::stream(cfg.seed, streams::NOISE);
    let mut epoch = 0u64;
    let mut batches = shuffled_batches(
        train.to_vec(),
        cfg.batch,
        rng::derive_seed(cfg.seed, streams::DATA),
    );
    let mut curve = Vec::with_capacity(cfg.steps * cfg.batch);
    let inv_batch = T::from_f64(1.0 / cfg.batch as f64);
    for step in 0..cfg.steps {
        let batch = loop {
            match batches.next() {
                Some(b) if b.len() == cfg.batch => break b,
                _ => {
                    epoch += 1;
                    batches = shuffled_batches(
                        train.to_vec(),
                        cfg.batch,
                        rng::derive_seed(cfg.seed, streams::DATA + 100 * epoch),
                    );
                }
            }
        };
        model.params_mut().zero_grad();
        let drawn = match objective {
            Objective::Diffusion => {
                draw_batch(&batch, cfg, mask_id, &mut size_rng, &mut noise_rng)?
            }
            Objective::Autoregressive => batch
                .iter()
                .map(|x| NoisedSequence {
                    clean: x.clone(),
                    noisy: x.clone(),
                    t: 1.0,
                    block_size: 1,
                })
                .collect(),
        };
        for s in &drawn {
            let mut g = Graph::new();
            let loss = match objective {
                Objective::Diffusion => {
                    nelbo_graph(model, &mut g, s, &schedule, LossPath::TwoStream)?
                }
                Objective::Autoregressive => ar_graph(model, &mut g, &s.clean)?,
            };
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    t: s.t,
                    block_size: s.block_size,
                });
            }
            curve.push(LossRecord {
                step,
                loss: value,
                block_size: s.block_size,
                t: s.t,
            });
            g.backward(loss)?.accumulate_into(model.params_mut());
        }
        model.params_mut().scale_grads(inv_batch);
        cfg.optimizer.step(model.params_mut());
        let done = step + 1;
        if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            on_checkpoint(
                done,
                model,
                &[RngState::of(&size_rng), RngState::of(&noise_rng)],
            )?;
        }
    }
    Ok(curve)
}

/// Mean masked-token cross-entropy at a fixed noise level, averaged over the
/// masked positions of `data` (no `1/t` weight).
pub fn masked_ce_at<T: Real>(
    model: &Transformer<T>,
    data: &[Vec<u32>],
    block_size: usize,
    t: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let cfg = model.config();
    let schedule = NoiseSchedule::default();
    let (mut total, mut count) = (0.0, 0usize);
    for x in data {
        let noisy = forward_mask(x, t, cfg.mask_id(), &schedule, rng);
        let masked = noisy.iter().filter(|&&v| v == cfg.mask_id()).count();
        if masked == 0 {
            continue;
        }
        let s = NoisedSequence {
            clean: x.clone(),
            noisy,
            t,
            block_size,
        };
        // value = (1/t)/L · Σ CE, so rescale back to a sum of CE
        let v = nelbo_value(model, &s, &schedule, LossPath::TwoStream)?.as_f64();
        total += v * t * x.len() as f64;
        count += masked;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}
