//! Plain samplers the staged sampler must reduce to in its degenerate
//! settings. Neither uses blocks, caches or stages; they share only the
//! per-token primitives and the random stream layout of stage 0.

use crate::error::Result;
use crate::model::Denoiser;
use crate::sampler::{
    choose_subset, draw_index, nucleus_filter, stage_rng, tempered_probs, StageConfig,
};

/// Sample plus the probability each token had when it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSample {
    pub x: Vec<u32>,
    pub conf: Vec<f64>,
}

/// Left to right, one token per forward: position `i` is predicted from
/// `x[..i]` followed by a single MASK, under the causal (block size 1) mask.
pub fn autoregressive<D: Denoiser>(
    model: &D,
    len: usize,
    cfg: &StageConfig,
    seed: u64,
) -> Result<ReferenceSample> {
    let mut rng = stage_rng(seed, 0);
    let mut x: Vec<u32> = Vec::with_capacity(len);
    let mut conf = Vec::with_capacity(len);
    for i in 0..len {
        let mut input = x.clone();
        input.push(model.mask_id());
        let logits = model.forward_full(&input, 1)?;
        let probs = tempered_probs(logits.row(i), cfg.temperature);
        let tok = draw_index(&nucleus_filter(&probs, cfg.nucleus_p), &mut rng);
        x.push(tok as u32);
        conf.push(probs[tok]);
    }
    Ok(ReferenceSample { x, conf })
}

/// Full-sequence masked diffusion: `steps` bidirectional forwards over the
/// whole sequence, each revealing `⌈remaining / steps left⌉` random positions.
pub fn masked_diffusion<D: Denoiser>(
    model: &D,
    len: usize,
    steps: usize,
    cfg: &StageConfig,
    seed: u64,
) -> Result<ReferenceSample> {
    let mut rng = stage_rng(seed, 0);
    let mask = model.mask_id();
    let mut x = vec![mask; len];
    let mut conf = vec![0.0; len];
    for step in 0..steps {
        let masked: Vec<usize> = (0..len).filter(|&i| x[i] == mask).collect();
        if masked.is_empty() {
            break;
        }
        let quota = masked.len().div_ceil(steps - step);
        let logits = model.forward_full(&x, len)?;
        let rows: Vec<usize> = (0..masked.len()).collect();
        for r in choose_subset(&rows, quota, &mut rng) {
            let i = masked[r];
            let probs = tempered_probs(logits.row(i), cfg.temperature);
            let tok = draw_index(&nucleus_filter(&probs, cfg.nucleus_p), &mut rng);
            x[i] = tok as u32;
            conf[i] = probs[tok];
        }
    }
    Ok(ReferenceSample { x, conf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, Transformer};
    use crate::sampler::{generate, SamplerOptions, StagePlan};

    fn model() -> Transformer<f32> {
        let cfg = DenoiserConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size: 5,
            max_len: 12,
        };
        Transformer::init(cfg, 3).unwrap()
    }

    #[test]
    fn unit_blocks_match_autoregressive() {
        let m = model();
        let stage = StageConfig {
            steps_per_block: Some(1),
            ..StageConfig::with_block(1)
        };
        for seed in 0..5 {
            let g = generate(
                &m,
                &StagePlan::new(vec![stage]),
                12,
                seed,
                SamplerOptions::default(),
            )
            .unwrap();
            let r = autoregressive(&m, 12, &stage, seed).unwrap();
            assert_eq!(g.x, r.x);
            assert_eq!(g.trace.complete().unwrap(), r.conf);
        }
    }

    #[test]
    fn single_block_matches_masked_diffusion() {
        let m = model();
        for steps in [3, 12] {
            let stage = StageConfig {
                steps_per_block: Some(steps),
                ..StageConfig::with_block(12)
            };
            for seed in 0..5 {
                let g = generate(
                    &m,
                    &StagePlan::new(vec![stage]),
                    12,
                    seed,
                    SamplerOptions::default(),
                )
                .unwrap();
                let r = masked_diffusion(&m, 12, steps, &stage, seed).unwrap();
                assert_eq!(g.x, r.x);
                assert_eq!(g.trace.complete().unwrap(), r.conf);
            }
        }
    }
}
