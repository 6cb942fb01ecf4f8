//! Property and oracle checks, each reporting what it measured.
//!
//! Every check is self-contained and deterministic. `run_all` is what the
//! `oracle-check` command prints.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;

use crate::autograd::Graph;
use crate::error::Result;
use crate::eval::{draft_nfes, nfe_audit, revision_nfes};
use crate::mock::FnMock;
use crate::model::{Denoiser, DenoiserConfig, MaskRule, Transformer};
use crate::reference;
use crate::rng;
use crate::sampler::{
    self, generate, remask_count, select_lowest, stage_rng, tempered_probs, DraftState,
    RemaskPolicy, SamplerOptions, StageConfig, StagePlan,
};
use crate::train::{
    forward_mask, mdlm_graph, mixed_loss, nelbo_graph, nelbo_loss, nelbo_value, BlockMix, LossPath,
    NoiseSchedule, NoisedSequence, TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured quantity against its threshold.
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} {} [{:.2}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Denominator floor for relative gradient error: gradients below it are
/// compared absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Analytic NELBO gradients of the full denoiser (f64) against central
/// differences, every scalar parameter, three configurations.
pub fn gradient_check(seed: u64) -> CheckResult {
    timed("gradient", || {
        let configs = [
            (
                DenoiserConfig {
                    n_layers: 1,
                    n_heads: 1,
                    d_model: 4,
                    vocab_size: 3,
                    max_len: 4,
                },
                2,
            ),
            (
                DenoiserConfig {
                    n_layers: 2,
                    n_heads: 2,
                    d_model: 8,
                    vocab_size: 4,
                    max_len: 8,
                },
                4,
            ),
            (
                DenoiserConfig {
                    n_layers: 2,
                    n_heads: 4,
                    d_model: 8,
                    vocab_size: 5,
                    max_len: 6,
                },
                3,
            ),
        ];
        let sched = NoiseSchedule::default();
        let (mut worst, mut checked) = (0.0f64, 0usize);
        for (k, (cfg, bs)) in configs.into_iter().enumerate() {
            let mut r = rng::stream(seed, 100 + k as u64);
            let model = Transformer::<f64>::init(cfg, seed + k as u64)?;
            let x: Vec<u32> = (0..cfg.max_len)
                .map(|_| r.random_range(0..cfg.vocab_size as u32))
                .collect();
            let mut noisy = x.clone();
            while noisy == x {
                noisy = forward_mask(&x, 0.5, cfg.mask_id(), &sched, &mut r);
            }
            let s = NoisedSequence {
                clean: x,
                noisy,
                t: 0.5,
                block_size: bs,
            };
            let mut g = Graph::new();
            let loss = nelbo_graph(&model, &mut g, &s, &sched, LossPath::TwoStream)?;
            let mut analytic = model.clone();
            analytic.params_mut().zero_grad();
            g.backward(loss)?.accumulate_into(analytic.params_mut());
            let h = 1e-5;
            let mut probe = model.clone();
            for p in 0..model.params().len() {
                for i in 0..model.params().value(p).len() {
                    let v0 = model.params().value(p).data()[i];
                    probe.params_mut().value_mut(p).data_mut()[i] = v0 + h;
                    let up = nelbo_value(&probe, &s, &sched, LossPath::TwoStream)?;
                    probe.params_mut().value_mut(p).data_mut()[i] = v0 - h;
                    let down = nelbo_value(&probe, &s, &sched, LossPath::TwoStream)?;
                    probe.params_mut().value_mut(p).data_mut()[i] = v0;
                    let num = (up - down) / (2.0 * h);
                    let a = analytic.params().grad(p).data()[i];
                    let rel = (a - num).abs() / a.abs().max(num.abs()).max(GRAD_REL_FLOOR);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
        Ok((
            worst < 1e-4,
            format!("max rel err {worst:.2e} < 1e-4 over {checked} parameters, 3 configs"),
        ))
    })
}

/// Masked fraction at t ∈ {0.1, 0.3, 0.7} within 3σ of `1 − α(t) = t`.
pub fn mask_marginals(seed: u64) -> CheckResult {
    timed("mask-marginal", || {
        let sched = NoiseSchedule::default();
        let n = 100_000usize;
        let x = vec![0u32; n];
        let mut worst = 0.0f64;
        let mut r = rng::stream(seed, 200);
        for t in [0.1, 0.3, 0.7] {
            let noisy = forward_mask(&x, t, 1, &sched, &mut r);
            let frac = noisy.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
            let p = 1.0 - sched.alpha(t);
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            worst = worst.max((frac - p).abs() / sigma);
        }
        Ok((
            worst < 3.0,
            format!("max |z| {worst:.2} < 3 at 100k positions"),
        ))
    })
}

fn sampler_model(rule: MaskRule) -> Result<Transformer<f32>> {
    let cfg = DenoiserConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 6,
        max_len: 16,
    };
    let mut m = Transformer::init(cfg, 41)?;
    m.set_mask_rule(rule);
    Ok(m)
}

fn equivalence_plans() -> Vec<StagePlan> {
    let stage = |bs, gamma, remask| StageConfig {
        gamma,
        remask,
        ..StageConfig::with_block(bs)
    };
    vec![
        StagePlan::two_stage(2, 16, 0.5),
        StagePlan::new(vec![
            stage(4, 0.0, RemaskPolicy::Snapshot),
            stage(8, 0.3, RemaskPolicy::Posthoc),
        ]),
        StagePlan::new(vec![
            stage(1, 0.0, RemaskPolicy::Snapshot),
            stage(4, 0.6, RemaskPolicy::Random),
        ]),
        StagePlan::new(vec![
            stage(2, 0.0, RemaskPolicy::Snapshot),
            stage(4, 0.25, RemaskPolicy::Snapshot),
            stage(16, 0.5, RemaskPolicy::Snapshot),
        ]),
    ]
}

/// Cached and fully recomputed sampling give byte-identical sequences and
/// confidence traces. `rule` is the attention rule of the recomputing path;
/// anything but `BlockCausal` must make this fail.
pub fn cache_equivalence(rule: MaskRule, seeds: u64) -> CheckResult {
    timed("cache-equivalence", || {
        let m = sampler_model(rule)?;
        let plans = equivalence_plans();
        let mut mismatches = 0;
        for plan in &plans {
            for seed in 0..seeds {
                let a = generate(&m, plan, 16, seed, SamplerOptions { use_cache: true })?;
                let b = generate(&m, plan, 16, seed, SamplerOptions { use_cache: false })?;
                let same_trace =
                    a.trace
                        .values()
                        .iter()
                        .zip(b.trace.values())
                        .all(|(p, q)| match (p, q) {
                            (Some(p), Some(q)) => p.to_bits() == q.to_bits(),
                            _ => false,
                        });
                if a.x != b.x || !same_trace {
                    mismatches += 1;
                }
            }
        }
        let runs = plans.len() as u64 * seeds;
        Ok((
            mismatches == 0,
            format!(
                "{mismatches}/{runs} runs differ ({} plans x {seeds} seeds)",
                plans.len()
            ),
        ))
    })
}

/// Single-block plans against the plain samplers, and the mixed objective at
/// λ ∈ {0, 1} against the pure block and full-sequence objectives.
pub fn degenerations(seeds: u64) -> CheckResult {
    timed("degenerations", || {
        let m = sampler_model(MaskRule::BlockCausal)?;
        let mut bad = Vec::new();
        for seed in 0..seeds {
            let full = StageConfig {
                steps_per_block: Some(16),
                ..StageConfig::with_block(16)
            };
            let g = generate(
                &m,
                &StagePlan::new(vec![full]),
                16,
                seed,
                SamplerOptions::default(),
            )?;
            let r = reference::masked_diffusion(&m, 16, 16, &full, seed)?;
            if g.x != r.x || g.trace.complete() != Some(r.conf) {
                bad.push(format!("mdlm seed {seed}"));
            }
            let unit = StageConfig {
                steps_per_block: Some(1),
                ..StageConfig::with_block(1)
            };
            let g = generate(
                &m,
                &StagePlan::new(vec![unit]),
                16,
                seed,
                SamplerOptions::default(),
            )?;
            let r = reference::autoregressive(&m, 16, &unit, seed)?;
            if g.x != r.x || g.trace.complete() != Some(r.conf) {
                bad.push(format!("ar seed {seed}"));
            }
        }
        let cfg = DenoiserConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 4,
            max_len: 8,
        };
        let model = Transformer::<f64>::init(cfg, 5)?;
        let mut dr = rng::stream(5, 0);
        let batch: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..8).map(|_| dr.random_range(0..4)).collect())
            .collect();
        let sched = NoiseSchedule::default();
        for (lambda, pure_block) in [(0.0, 2), (1.0, 8)] {
            let tc = TrainConfig {
                lambda,
                block_draft: 2,
                block_global: Some(8),
                mix: BlockMix::Bimodal,
                ..TrainConfig::default()
            };
            let mixed = mixed_loss(
                &model,
                &batch,
                &tc,
                &mut rng::stream(9, 1),
                &mut rng::stream(9, 2),
            )?;
            let mut noise = rng::stream(9, 2);
            let mut sum = 0.0;
            for (x, got) in batch.iter().zip(&mixed.sequences) {
                let want = if pure_block == 8 {
                    let s = NoisedSequence::draw(x, 8, 4, &sched, &mut noise)?;
                    let mut g = Graph::inference();
                    let v = mdlm_graph(&model, &mut g, &s, &sched)?;
                    g.value(v).item()
                } else {
                    nelbo_loss(
                        &model,
                        x,
                        pure_block,
                        &sched,
                        &mut noise,
                        LossPath::TwoStream,
                    )?
                };
                sum += want;
                if got.loss.to_bits() != want.to_bits() || got.block_size != pure_block {
                    bad.push(format!("lambda {lambda}"));
                }
            }
            if (sum / batch.len() as f64).to_bits() != mixed.value.to_bits() {
                bad.push(format!("lambda {lambda} mean"));
            }
        }
        Ok((
            bad.is_empty(),
            if bad.is_empty() {
                format!(
                    "bit-exact: mdlm and ar over {seeds} seeds, lambda 0 and 1 over 6 sequences"
                )
            } else {
                format!("mismatch: {}", bad.join(", "))
            },
        ))
    })
}

/// Two-stream and per-block looped losses on random tiny instances (f64).
pub fn two_stream_equivalence(instances: usize, seed: u64) -> CheckResult {
    timed("two-stream-vs-loop", || {
        let mut r = rng::stream(seed, 300);
        let sched = NoiseSchedule::default();
        let mut worst = 0.0f64;
        for k in 0..instances {
            let len = r.random_range(2..=10usize);
            let heads = [1, 2][r.random_range(0..2)];
            let cfg = DenoiserConfig {
                n_layers: r.random_range(1..=2),
                n_heads: heads,
                d_model: 4 * heads,
                vocab_size: r.random_range(2..=6),
                max_len: len,
            };
            let m = Transformer::<f64>::init(cfg, seed ^ k as u64)?;
            let ds = divisors(len);
            let bs = ds[r.random_range(0..ds.len())];
            let x: Vec<u32> = (0..len)
                .map(|_| r.random_range(0..cfg.vocab_size as u32))
                .collect();
            let s = NoisedSequence::draw(&x, bs, cfg.mask_id(), &sched, &mut r)?;
            let a = nelbo_value(&m, &s, &sched, LossPath::TwoStream)?;
            let b = nelbo_value(&m, &s, &sched, LossPath::Looped)?;
            worst = worst.max((a - b).abs());
        }
        Ok((
            worst < 1e-10,
            format!("max |diff| {worst:.2e} < 1e-10 over {instances} instances"),
        ))
    })
}

/// γ = 0 leaves the draft untouched; γ = 1 makes the revision independent
/// of the draft under a shared stage-2 stream.
pub fn gamma_identities(seeds: u64) -> CheckResult {
    timed("gamma-identities", || {
        let m = sampler_model(MaskRule::BlockCausal)?;
        let mut bad = 0;
        for seed in 0..seeds {
            let zero = StagePlan::two_stage(2, 16, 0.0);
            let mut st = DraftState::empty(16, m.mask_id());
            sampler::advance(
                &m,
                &zero,
                &mut st,
                SamplerOptions::default(),
                &mut stage_rng(seed, 0),
            )?;
            let draft = st.clone();
            let met = sampler::advance(
                &m,
                &zero,
                &mut st,
                SamplerOptions::default(),
                &mut stage_rng(seed, 1),
            )?;
            if st.x != draft.x || st.trace != draft.trace || met.nfes != 0 {
                bad += 1;
            }
            let one = StagePlan::two_stage(2, 16, 1.0);
            let mut outs = Vec::new();
            for draft_seed in [seed, seed + 1000] {
                let mut st = DraftState::empty(16, m.mask_id());
                sampler::advance(
                    &m,
                    &one,
                    &mut st,
                    SamplerOptions::default(),
                    &mut stage_rng(draft_seed, 0),
                )?;
                sampler::advance(
                    &m,
                    &one,
                    &mut st,
                    SamplerOptions::default(),
                    &mut stage_rng(seed, 1),
                )?;
                outs.push(st);
            }
            if outs[0].x != outs[1].x || outs[0].trace != outs[1].trace {
                bad += 1;
            }
        }
        Ok((
            bad == 0,
            format!("{bad} violations over {seeds} seeds (gamma 0 and 1)"),
        ))
    })
}

/// Context-dependent conditional over three symbols for sequences of four.
pub fn context_mock() -> FnMock {
    FnMock::new(3, 4, |pos, seen| {
        let known: Vec<f64> = seen
            .iter()
            .map(|&t| if t < 3 { t as f64 + 1.0 } else { 0.0 })
            .collect();
        let s: f64 = known.iter().sum();
        vec![
            0.3 * pos as f64,
            (s * 0.7).sin(),
            0.2 * s - 0.4 * known[pos],
        ]
    })
}

/// Exact output law of the single-stage ancestral block sampler (T = B,
/// no nucleus filtering), by walking every position choice and token value it can make.
pub fn exact_law<D: Denoiser>(
    model: &D,
    len: usize,
    block_size: usize,
) -> Result<HashMap<Vec<u32>, f64>> {
    let mut out = HashMap::new();
    walk(model, vec![model.mask_id(); len], block_size, 1.0, &mut out)?;
    Ok(out)
}

fn walk<D: Denoiser>(
    m: &D,
    x: Vec<u32>,
    bs: usize,
    p: f64,
    out: &mut HashMap<Vec<u32>, f64>,
) -> Result<()> {
    let mask = m.mask_id();
    let v = m.vocab_size();
    let Some(first) = x.iter().position(|&t| t == mask) else {
        *out.entry(x).or_default() += p;
        return Ok(());
    };
    let block = first / bs * bs..(first / bs + 1) * bs;
    let masked: Vec<usize> = block.clone().filter(|&i| x[i] == mask).collect();
    // T = B from an empty block commits exactly one position per step
    let quota = 1;
    let logits = m.forward_full(&x[..block.end], bs)?;
    let subsets: Vec<Vec<usize>> = (0u32..1 << masked.len())
        .filter(|s| s.count_ones() as usize == quota)
        .map(|s| {
            (0..masked.len())
                .filter(|k| s >> k & 1 == 1)
                .map(|k| masked[k])
                .collect()
        })
        .collect();
    for sub in &subsets {
        let probs: Vec<Vec<f64>> = sub
            .iter()
            .map(|&i| tempered_probs(logits.row(i), 1.0))
            .collect();
        for combo in 0..v.pow(sub.len() as u32) {
            let mut y = x.clone();
            let mut q = p / subsets.len() as f64;
            let mut c = combo;
            for (k, &i) in sub.iter().enumerate() {
                let tok = c % v;
                c /= v;
                y[i] = tok as u32;
                q *= probs[k][tok];
            }
            walk(m, y, bs, q, out)?;
        }
    }
    Ok(())
}

/// Total variation between the enumerated law and Monte Carlo frequencies.
pub fn sampler_distribution(runs: u64) -> CheckResult {
    timed("sampler-distribution", || {
        let m = context_mock();
        let exact = exact_law(&m, 4, 2)?;
        let stage = StageConfig {
            nucleus_p: 1.0,
            ..StageConfig::with_block(2)
        };
        let plan = StagePlan::new(vec![stage]);
        let mut freq: HashMap<Vec<u32>, f64> = HashMap::new();
        for seed in 0..runs {
            let g = generate(&m, &plan, 4, seed, SamplerOptions::default())?;
            *freq.entry(g.x).or_default() += 1.0 / runs as f64;
        }
        let mut tv: f64 = exact
            .iter()
            .map(|(k, &p)| (p - freq.get(k).copied().unwrap_or(0.0)).abs())
            .sum();
        tv += freq
            .iter()
            .filter(|(k, _)| !exact.contains_key(*k))
            .map(|(_, &q)| q)
            .sum::<f64>();
        tv *= 0.5;
        Ok((
            tv < 0.02,
            format!(
                "TV {tv:.4} < 0.02, {runs} runs over {} outcomes",
                exact.len()
            ),
        ))
    })
}

/// Reported and counted forwards against the closed form, including the
/// L = 1024 budget (draft B = T = 4, then γ = 0.5 over the whole sequence).
pub fn nfe_accounting() -> CheckResult {
    timed("nfe-accounting", || {
        let mut notes = Vec::new();
        let mut ok = true;
        let mock = FnMock::new(4, 1024, |pos, _| {
            vec![0.1 * (pos % 5) as f64, 0.0, 0.3, -0.2]
        });
        for gamma in [0.0, 0.1, 0.5] {
            let before = mock.forward_count();
            let g = generate(
                &mock,
                &StagePlan::two_stage(4, 1024, gamma),
                1024,
                7,
                SamplerOptions::default(),
            )?;
            let rep = nfe_audit(1024, &g.metrics, Some(mock.forward_count() - before))?;
            let want = [draft_nfes(1024, 4, 4), revision_nfes(1024, gamma)];
            ok &= rep.per_stage == want;
            notes.push(format!(
                "L=1024 gamma {gamma}: {}+{}",
                rep.per_stage[0], rep.per_stage[1]
            ));
        }
        let m = sampler_model(MaskRule::BlockCausal)?;
        for plan in equivalence_plans() {
            let before = m.forward_count();
            let g = generate(&m, &plan, 16, 3, SamplerOptions::default())?;
            nfe_audit(16, &g.metrics, Some(m.forward_count() - before))?;
        }
        notes.push("transformer plans audited against counter".into());
        Ok((ok, notes.join("; ")))
    })
}

/// Snapshot selection against the ordering property it must satisfy, over
/// every confidence vector on a three-level grid (ties included) for L ≤ 8,
/// plus random continuous vectors.
pub fn remask_selection(seed: u64) -> CheckResult {
    timed("remask-selection", || {
        let levels = [0.1, 0.5, 0.9];
        let mut cases = 0usize;
        let mut bad = 0usize;
        let mut check = |conf: &[f64], count: usize| {
            let chosen = select_lowest(conf, count);
            let inside: Vec<bool> = (0..conf.len()).map(|i| chosen.contains(&i)).collect();
            let ordered = (0..conf.len()).all(|i| {
                (0..conf.len()).all(|j| !(inside[i] && !inside[j]) || (conf[i], i) < (conf[j], j))
            });
            cases += 1;
            if chosen.len() != count || !ordered || chosen.windows(2).any(|w| w[0] >= w[1]) {
                bad += 1;
            }
        };
        for len in 1..=8usize {
            for code in 0..3usize.pow(len as u32) {
                let conf: Vec<f64> = (0..len)
                    .map(|i| levels[code / 3usize.pow(i as u32) % 3])
                    .collect();
                for k in 0..=len {
                    check(&conf, remask_count(k as f64 / len as f64, len));
                }
            }
        }
        let mut r = rng::stream(seed, 400);
        for _ in 0..2000 {
            let len = r.random_range(1..=8);
            let conf: Vec<f64> = (0..len).map(|_| r.random::<f64>()).collect();
            let gamma: f64 = r.random();
            check(&conf, remask_count(gamma, len));
        }
        let example = select_lowest(&[0.9, 0.1, 0.5, 0.7], remask_count(0.5, 4)) == vec![1, 2];
        Ok((
            bad == 0 && example,
            format!("{bad}/{cases} selections violate ordering or size"),
        ))
    })
}

/// The whole suite; `rule` feeds the cache-equivalence negative control.
pub fn run_all(rule: MaskRule, seed: u64) -> Vec<CheckResult> {
    vec![
        gradient_check(seed),
        mask_marginals(seed),
        cache_equivalence(rule, 20),
        degenerations(10),
        two_stream_equivalence(50, seed),
        gamma_identities(20),
        sampler_distribution(100_000),
        nfe_accounting(),
        remask_selection(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_law_of_uniform_mock_is_uniform() {
        let m = crate::mock::UniformMock::new(2, 2);
        let law = exact_law(&m, 2, 2).unwrap();
        assert_eq!(law.len(), 4);
        assert!(law.values().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn corrupted_mask_fails_cache_check() {
        assert!(!cache_equivalence(MaskRule::LeakNextBlock, 2).passed);
        assert!(cache_equivalence(MaskRule::BlockCausal, 2).passed);
    }

    #[test]
    fn quick_checks_pass() {
        for c in [remask_selection(0), mask_marginals(0), gamma_identities(3)] {
            assert!(c.passed, "{c}");
        }
    }
}
