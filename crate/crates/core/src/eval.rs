//! Sample quality and cost: generative perplexity under an external scorer,
//! held-out NELBO, NFE auditing, and the ablation grids.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::MarkovSpec;
use crate::error::{Error, Result};
use crate::model::{build_block_mask, Denoiser, Transformer};
use crate::rng::{self, streams};
use crate::sampler::{
    self, tempered_probs, DraftState, RemaskPolicy, SamplerOptions, StageConfig, StageMetrics,
};
use crate::tensor::Real;
use crate::train::{nelbo_value, LossPath, NoiseSchedule, NoisedSequence};

/// Floor applied to scorer probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Left-to-right likelihood model used to judge samples.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    /// Probability of each token given everything before it.
    fn token_probs(&self, seq: &[u32]) -> Result<Vec<f64>>;
}

pub struct UniformScorer {
    pub vocab: usize,
}

impl Scorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn token_probs(&self, seq: &[u32]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.vocab as f64; seq.len()])
    }
}

/// Exact likelihood under the chain that generated the data.
pub struct MarkovScorer {
    spec: MarkovSpec,
}

impl MarkovScorer {
    pub fn new(spec: MarkovSpec) -> Self {
        Self { spec }
    }
}

impl Scorer for MarkovScorer {
    fn vocab_size(&self) -> usize {
        self.spec.states()
    }

    fn token_probs(&self, seq: &[u32]) -> Result<Vec<f64>> {
        let p = self.spec.transition();
        Ok(seq
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if i == 0 {
                    self.spec.initial()[t as usize]
                } else {
                    p[seq[i - 1] as usize][t as usize]
                }
            })
            .collect())
    }
}

/// Transformer trained on next-token prediction with MASK as the start
/// symbol (see `train::ar_graph`).
pub struct ArScorer<T> {
    model: Transformer<T>,
}

impl<T: Real> ArScorer<T> {
    pub fn new(model: Transformer<T>) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Transformer<T> {
        &self.model
    }
}

impl<T: Real> Scorer for ArScorer<T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn token_probs(&self, seq: &[u32]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = self.model.config();
        let mut inputs = vec![cfg.mask_id()];
        inputs.extend_from_slice(&seq[..seq.len() - 1]);
        let logits = self
            .model
            .forward(&inputs, &build_block_mask(seq.len(), 1)?)?;
        Ok(seq
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row: Vec<f64> = logits.row(i)[..cfg.vocab_size]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                tempered_probs(&row, 1.0)[t as usize]
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GenPpl {
    pub value: f64,
    pub tokens: usize,
    /// Tokens whose probability was raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// `exp` of the mean per-token negative log-likelihood of `samples`.
pub fn gen_ppl(scorer: &dyn Scorer, samples: &[Vec<u32>]) -> Result<GenPpl> {
    if samples.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("no samples to score".into()));
    }
    let v = scorer.vocab_size();
    let (mut nll, mut tokens, mut clamped) = (0.0, 0, 0);
    for (k, s) in samples.iter().enumerate() {
        if let Some(&t) = s.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Data(format!(
                "sample {k} contains id {t} outside the scorer vocabulary"
            )));
        }
        for p in scorer.token_probs(s)? {
            if p.is_nan() || p < PROB_FLOOR {
                clamped += 1;
            }
            nll -= p.max(PROB_FLOOR).ln();
            tokens += 1;
        }
    }
    Ok(GenPpl {
        value: (nll / tokens as f64).exp(),
        tokens,
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NelboEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

/// Monte Carlo per-token NELBO: `n_mc` draws of `(t, mask)` per sequence.
pub fn nelbo_eval<T: Real>(
    model: &Transformer<T>,
    heldout: &[Vec<u32>],
    block_size: usize,
    n_mc: usize,
    rng: &mut impl rand::Rng,
) -> Result<NelboEstimate> {
    if heldout.is_empty() || n_mc == 0 {
        return Err(Error::Data(
            "NELBO needs at least one sequence and one draw".into(),
        ));
    }
    let schedule = NoiseSchedule::default();
    let mask = model.config().mask_id();
    let mut vals = Vec::with_capacity(heldout.len() * n_mc);
    for x in heldout {
        for _ in 0..n_mc {
            let s = NoisedSequence::draw(x, block_size, mask, &schedule, rng)?;
            vals.push(nelbo_value(model, &s, &schedule, LossPath::TwoStream)?.as_f64());
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(NelboEstimate {
        mean,
        std_err: (var / n).sqrt(),
        draws: vals.len(),
    })
}

/// Forwards a block costs: one per non-trivial step.
pub fn block_forwards(steps: usize, masked: usize) -> usize {
    steps.min(masked)
}

/// Draft cost from scratch: `L/B` blocks of `min(T, B)` forwards.
pub fn draft_nfes(len: usize, block_size: usize, steps: usize) -> usize {
    len / block_size * block_forwards(steps, block_size)
}

/// Revision cost with one token per forward: the `⌊γL⌋` remasked tokens.
pub fn revision_nfes(len: usize, gamma: f64) -> usize {
    sampler::remask_count(gamma, len)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NfeReport {
    pub per_stage: Vec<usize>,
    pub total: usize,
    pub counted: Option<u64>,
}

/// Checks reported forwards against the closed form block by block, the
/// draft against `L/B · T`, and the total against an instrumented counter.
pub fn nfe_audit(len: usize, metrics: &[StageMetrics], counted: Option<u64>) -> Result<NfeReport> {
    let mut per_stage = Vec::with_capacity(metrics.len());
    for m in metrics {
        let mut predicted = m.remask_nfes;
        let mut breakdown = String::new();
        for b in &m.blocks {
            let want = block_forwards(b.steps, b.masked);
            predicted += want;
            if want != b.forwards {
                breakdown += &format!(
                    " block {}: masked {} steps {} issued {} expected {};",
                    b.block, b.masked, b.steps, b.forwards, want
                );
            }
        }
        if predicted != m.nfes || !breakdown.is_empty() {
            return Err(Error::Invariant(format!(
                "stage {} reports {} forwards, closed form {predicted};{breakdown}",
                m.stage, m.nfes
            )));
        }
        if m.stage == 0 && m.masked_count == len {
            let steps = m.blocks.first().map_or(m.block_size, |b| b.steps);
            let want = draft_nfes(len, m.block_size, steps);
            if m.nfes != want {
                return Err(Error::Invariant(format!(
                    "draft issued {} forwards, L/B·T = {want}",
                    m.nfes
                )));
            }
        }
        per_stage.push(m.nfes);
    }
    let total = per_stage.iter().sum();
    if let Some(c) = counted {
        if c != total as u64 {
            return Err(Error::Invariant(format!(
                "metrics report {total} forwards, the model counted {c}"
            )));
        }
    }
    Ok(NfeReport {
        per_stage,
        total,
        counted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    RevisionScope,
    RemaskStrategy,
    TrainingMix,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::RevisionScope => "revision-scope",
            Axis::RemaskStrategy => "remask-strategy",
            Axis::TrainingMix => "training-mix",
        }
    }
}

/// Grid parameters shared by all axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Sequence length; a run config sets it from the data.
    pub len: usize,
    /// First stage; a run config takes it from its first stage.
    #[serde(skip)]
    pub draft: StageConfig,
    /// Sampling settings for the revision stage; block size, γ and remask
    /// policy are overridden per cell. A run config takes them from its
    /// last stage.
    #[serde(skip)]
    pub revision: StageConfig,
    /// Revision block sizes; entries that do not divide `len` or are smaller
    /// than the draft block are dropped, and `len` itself is always swept.
    pub scopes: Vec<usize>,
    pub gammas: Vec<f64>,
    /// γ for the remask-strategy and training-mix axes.
    pub gamma: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    /// Monte Carlo draws per held-out sequence for the NELBO column.
    pub nelbo_mc: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            len: 64,
            draft: StageConfig::with_block(4),
            revision: StageConfig::default(),
            scopes: vec![4, 16, 64, 256],
            gammas: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            gamma: 0.5,
            n_samples: 32,
            seeds: (0..5).collect(),
            nelbo_mc: 2,
        }
    }
}

impl GridSpec {
    pub fn revision_scopes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .scopes
            .iter()
            .copied()
            .chain([self.len])
            .filter(|&b| b >= self.draft.block_size && self.len.is_multiple_of(b))
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn stage(&self, block_size: usize, gamma: f64, remask: RemaskPolicy) -> StageConfig {
        StageConfig {
            block_size,
            gamma,
            remask,
            ..self.revision
        }
    }
}

/// One CSV row: a setting evaluated on `n_samples` samples of one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub axis: String,
    pub model: String,
    pub block_size: usize,
    pub gamma: f64,
    /// Remask policy, or `none` for the draft baseline.
    pub remask: String,
    pub seed: u64,
    pub draft_gen_ppl: f64,
    pub gen_ppl: f64,
    pub nelbo: f64,
    /// Mean forwards per sample.
    pub nfe_stage1: f64,
    pub nfe_stage2: f64,
    pub clamped: usize,
}

/// Seed of sample `j` under grid seed `seed`. Every cell of a seed reuses the
/// same drafts, so settings are compared on identical stage-1 output.
pub fn sample_seed(seed: u64, j: usize) -> u64 {
    rng::derive_seed(seed, j as u64)
}

struct Drafts {
    states: Vec<DraftState>,
    seeds: Vec<u64>,
    ppl: GenPpl,
    nfes: f64,
}

fn draft<D: Denoiser>(
    model: &D,
    spec: &GridSpec,
    scorer: &dyn Scorer,
    seed: u64,
) -> Result<Drafts> {
    let mut states = Vec::with_capacity(spec.n_samples);
    let mut seeds = Vec::with_capacity(spec.n_samples);
    let mut nfes = 0;
    for j in 0..spec.n_samples {
        let s = sample_seed(seed, j);
        let mut st = DraftState::empty(spec.len, model.mask_id());
        nfes += sampler::run_stage(
            model,
            &mut st,
            &spec.draft,
            SamplerOptions::default(),
            &mut sampler::stage_rng(s, 0),
        )?
        .nfes;
        states.push(st);
        seeds.push(s);
    }
    let xs: Vec<Vec<u32>> = states.iter().map(|s| s.x.clone()).collect();
    Ok(Drafts {
        ppl: gen_ppl(scorer, &xs)?,
        states,
        seeds,
        nfes: nfes as f64 / spec.n_samples as f64,
    })
}

/// Applies `stage` as stage 2 to every draft; returns gen-ppl and mean NFEs.
fn revise<D: Denoiser>(
    model: &D,
    drafts: &Drafts,
    stage: &StageConfig,
    scorer: &dyn Scorer,
) -> Result<(GenPpl, f64)> {
    let plan = sampler::StagePlan::new(vec![StageConfig::default(), *stage]);
    let mut xs = Vec::with_capacity(drafts.states.len());
    let mut nfes = 0;
    for (st, &s) in drafts.states.iter().zip(&drafts.seeds) {
        let mut st = st.clone();
        nfes += sampler::advance(
            model,
            &plan,
            &mut st,
            SamplerOptions::default(),
            &mut sampler::stage_rng(s, 1),
        )?
        .nfes;
        xs.push(st.x);
    }
    Ok((gen_ppl(scorer, &xs)?, nfes as f64 / xs.len() as f64))
}

/// Named model under evaluation.
pub struct GridModel<'a, T> {
    pub name: String,
    pub model: &'a Transformer<T>,
}

/// Runs one ablation axis. Revision scope and remask strategy use the first
/// model; training mix evaluates every model at both stages.
pub fn ablation_grid<T: Real>(
    models: &[GridModel<'_, T>],
    axis: Axis,
    spec: &GridSpec,
    scorer: &dyn Scorer,
    heldout: &[Vec<u32>],
) -> Result<Vec<GridRow>> {
    if models.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one model checkpoint".into(),
        ));
    }
    sampler::StagePlan::new(vec![spec.draft]).validate(spec.len)?;
    let mut nelbo_cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut nelbo = |mi: usize, bs: usize| -> Result<f64> {
        if let Some(&v) = nelbo_cache.get(&(mi, bs)) {
            return Ok(v);
        }
        let v = if heldout.is_empty() || spec.nelbo_mc == 0 {
            f64::NAN
        } else {
            let mut r = rng::stream(rng::derive_seed(0, streams::EVAL), bs as u64);
            nelbo_eval(models[mi].model, heldout, bs, spec.nelbo_mc, &mut r)?.mean
        };
        nelbo_cache.insert((mi, bs), v);
        Ok(v)
    };
    let mut rows = Vec::new();
    let row = |mi: usize,
               bs: usize,
               gamma: f64,
               remask: &str,
               seed: u64,
               d: &Drafts,
               ppl: GenPpl,
               nfe2: f64,
               nelbo: f64| GridRow {
        axis: axis.name().into(),
        model: models[mi].name.clone(),
        block_size: bs,
        gamma,
        remask: remask.into(),
        seed,
        draft_gen_ppl: d.ppl.value,
        gen_ppl: ppl.value,
        nelbo,
        nfe_stage1: d.nfes,
        nfe_stage2: nfe2,
        clamped: ppl.clamped,
    };
    let policies = [
        (RemaskPolicy::Snapshot, "snapshot"),
        (RemaskPolicy::Posthoc, "posthoc"),
        (RemaskPolicy::Random, "random"),
    ];
    let model_ids: Vec<usize> = match axis {
        Axis::TrainingMix => (0..models.len()).collect(),
        _ => vec![0],
    };
    for &mi in &model_ids {
        let m = models[mi].model;
        for &seed in &spec.seeds {
            let d = draft(m, spec, scorer, seed)?;
            match axis {
                Axis::RevisionScope => {
                    for bs in spec.revision_scopes() {
                        let nl = nelbo(mi, bs)?;
                        for &g in &spec.gammas {
                            let (ppl, nfe2) =
                                revise(m, &d, &spec.stage(bs, g, RemaskPolicy::Snapshot), scorer)?;
                            rows.push(row(mi, bs, g, "snapshot", seed, &d, ppl, nfe2, nl));
                        }
                    }
                }
                Axis::RemaskStrategy => {
                    let b1 = spec.draft.block_size;
                    rows.push(row(
                        mi,
                        b1,
                        0.0,
                        "none",
                        seed,
                        &d,
                        d.ppl,
                        0.0,
                        nelbo(mi, b1)?,
                    ));
                    let nl = nelbo(mi, spec.len)?;
                    for (p, name) in policies {
                        let (ppl, nfe2) =
                            revise(m, &d, &spec.stage(spec.len, spec.gamma, p), scorer)?;
                        rows.push(row(mi, spec.len, spec.gamma, name, seed, &d, ppl, nfe2, nl));
                    }
                }
                Axis::TrainingMix => {
                    let b1 = spec.draft.block_size;
                    rows.push(row(
                        mi,
                        b1,
                        0.0,
                        "none",
                        seed,
                        &d,
                        d.ppl,
                        0.0,
                        nelbo(mi, b1)?,
                    ));
                    let (ppl, nfe2) = revise(
                        m,
                        &d,
                        &spec.stage(spec.len, spec.gamma, RemaskPolicy::Snapshot),
                        scorer,
                    )?;
                    rows.push(row(
                        mi,
                        spec.len,
                        spec.gamma,
                        "snapshot",
                        seed,
                        &d,
                        ppl,
                        nfe2,
                        nelbo(mi, spec.len)?,
                    ));
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_grid_csv(w: impl Write, rows: &[GridRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips (ties are dropped by the caller).
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::FnMock;
    use crate::sampler::{generate, StagePlan};

    #[test]
    fn uniform_scorer_gives_vocab_size() {
        let s = UniformScorer { vocab: 7 };
        let g = gen_ppl(&s, &[vec![0, 3, 6], vec![1]]).unwrap();
        assert!((g.value - 7.0).abs() < 1e-12);
        assert_eq!(g.tokens, 4);
    }

    #[test]
    fn certain_scorer_gives_one() {
        let spec =
            MarkovSpec::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], Some(vec![1.0, 0.0])).unwrap();
        let g = gen_ppl(&MarkovScorer::new(spec), &[vec![0, 1, 0, 1]]).unwrap();
        assert_eq!(g.value, 1.0);
        assert_eq!(g.clamped, 0);
    }

    #[test]
    fn impossible_tokens_are_clamped_and_flagged() {
        let spec =
            MarkovSpec::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], Some(vec![1.0, 0.0])).unwrap();
        let g = gen_ppl(&MarkovScorer::new(spec), &[vec![0, 0]]).unwrap();
        assert_eq!(g.clamped, 1);
        assert!((g.value - (1e12f64).sqrt()).abs() / 1e6 < 1e-9);
    }

    #[test]
    fn gen_ppl_errors() {
        let s = UniformScorer { vocab: 3 };
        assert!(gen_ppl(&s, &[]).is_err());
        assert!(gen_ppl(&s, &[vec![0, 3]]).is_err());
    }

    #[test]
    fn markov_samples_score_near_entropy_rate() {
        let spec = MarkovSpec::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]], None).unwrap();
        let xs = spec.sample_sequences(1000, 1000, &mut rng::stream(11, 0));
        let g = gen_ppl(&MarkovScorer::new(spec.clone()), &xs).unwrap();
        let want = spec.entropy_rate().exp();
        assert!((g.value / want - 1.0).abs() < 0.01, "{} vs {want}", g.value);
    }

    #[test]
    fn gen_ppl_ignores_sample_order() {
        let spec = MarkovSpec::random(5, 0.5, &mut rng::stream(2, 0)).unwrap();
        let mut xs = spec.sample_sequences(20, 16, &mut rng::stream(2, 1));
        let s = MarkovScorer::new(spec);
        let a = gen_ppl(&s, &xs).unwrap().value;
        xs.reverse();
        let b = gen_ppl(&s, &xs).unwrap().value;
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn ar_scorer_probabilities_normalise() {
        let cfg = crate::model::DenoiserConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 3,
            max_len: 4,
        };
        let s = ArScorer::new(Transformer::<f64>::init(cfg, 0).unwrap());
        // summing p(x_i | prefix) over the last token's values gives 1
        let total: f64 = (0..3)
            .map(|t| s.token_probs(&[1, 2, 0, t]).unwrap()[3])
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nelbo_standard_error_scales() {
        let cfg = crate::model::DenoiserConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 4,
            max_len: 8,
        };
        let m = Transformer::<f32>::init(cfg, 0).unwrap();
        let data: Vec<Vec<u32>> = (0..8)
            .map(|i| (0..8).map(|j| (i + j) % 4).collect())
            .collect();
        // standard error goes as 1/sqrt(draws): four times the draws halves it
        let ratios: Vec<f64> = (0..7)
            .map(|k| {
                let a = nelbo_eval(&m, &data, 4, 100, &mut rng::stream(k, 0)).unwrap();
                let b = nelbo_eval(&m, &data, 4, 400, &mut rng::stream(k, 1)).unwrap();
                a.std_err / b.std_err
            })
            .collect();
        let r = median(&ratios);
        assert!((1.7..2.3).contains(&r), "{ratios:?}");
    }

    #[test]
    fn audit_matches_table_one_budget() {
        // one token per forward at L=1024, B=4, T=4, then γ=0.5 over the whole sequence
        let m = FnMock::new(3, 1024, |pos, _| vec![0.0, (pos % 3) as f64, 0.5]);
        let plan = StagePlan::two_stage(4, 1024, 0.5);
        let g = generate(&m, &plan, 1024, 0, SamplerOptions::default()).unwrap();
        let r = nfe_audit(1024, &g.metrics, Some(m.forward_count())).unwrap();
        assert_eq!(r.per_stage, vec![1024, 512]);
        assert_eq!(r.total, draft_nfes(1024, 4, 4) + revision_nfes(1024, 0.5));
    }

    #[test]
    fn audit_flags_mismatch() {
        let m = FnMock::new(3, 8, |_, _| vec![0.0; 3]);
        let g = generate(
            &m,
            &StagePlan::two_stage(2, 8, 0.5),
            8,
            0,
            SamplerOptions::default(),
        )
        .unwrap();
        let mut bad = g.metrics.clone();
        bad[0].blocks[1].forwards += 1;
        bad[0].nfes += 1;
        assert!(matches!(nfe_audit(8, &bad, None), Err(Error::Invariant(_))));
        assert!(nfe_audit(8, &g.metrics, Some(m.forward_count() + 1)).is_err());
        assert_eq!(
            nfe_audit(8, &g.metrics, Some(m.forward_count()))
                .unwrap()
                .total,
            8 + 4
        );
    }

    #[test]
    fn sign_test_tail() {
        assert_eq!(sign_test(5, 0), 1.0 / 32.0);
        assert!((sign_test(4, 1) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test(0, 3), 1.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn grid_fixture() -> (Transformer<f32>, MarkovSpec, Vec<Vec<u32>>) {
        let cfg = crate::model::DenoiserConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 4,
            max_len: 16,
        };
        let spec = MarkovSpec::random(4, 0.5, &mut rng::stream(3, 0)).unwrap();
        let held = spec.sample_sequences(2, 16, &mut rng::stream(3, 1));
        (Transformer::init(cfg, 1).unwrap(), spec, held)
    }

    #[test]
    fn revision_grid_shape_and_gamma_zero() {
        let (m, spec, held) = grid_fixture();
        let g = GridSpec {
            len: 16,
            n_samples: 3,
            seeds: vec![0, 1],
            ..GridSpec::default()
        };
        assert_eq!(g.revision_scopes(), vec![4, 16]);
        let models = [GridModel {
            name: "m".into(),
            model: &m,
        }];
        let rows = ablation_grid(
            &models,
            Axis::RevisionScope,
            &g,
            &MarkovScorer::new(spec),
            &held,
        )
        .unwrap();
        assert_eq!(rows.len(), 2 * 2 * 6);
        for r in rows.iter().filter(|r| r.gamma == 0.0) {
            assert_eq!(r.gen_ppl, r.draft_gen_ppl);
            assert_eq!(r.nfe_stage2, 0.0);
        }
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("axis,model,block_size,gamma,remask,seed,draft_gen_ppl,gen_ppl,nelbo,nfe_stage1,nfe_stage2"));
        assert_eq!(text.lines().count(), rows.len() + 1);
    }

    #[test]
    fn grid_revision_matches_generate() {
        let (m, spec, _) = grid_fixture();
        let g = GridSpec {
            len: 16,
            n_samples: 2,
            seeds: vec![4],
            ..GridSpec::default()
        };
        let scorer = MarkovScorer::new(spec);
        let d = draft(&m, &g, &scorer, 4).unwrap();
        let stage = g.stage(16, 0.5, RemaskPolicy::Snapshot);
        let (ppl, _) = revise(&m, &d, &stage, &scorer).unwrap();
        let xs: Vec<Vec<u32>> = (0..2)
            .map(|j| {
                let plan = StagePlan::new(vec![g.draft, stage]);
                generate(&m, &plan, 16, sample_seed(4, j), SamplerOptions::default())
                    .unwrap()
                    .x
            })
            .collect();
        assert_eq!(ppl, gen_ppl(&scorer, &xs).unwrap());
    }

    #[test]
    fn remask_and_mix_grids() {
        let (m, spec, held) = grid_fixture();
        let g = GridSpec {
            len: 16,
            n_samples: 2,
            seeds: vec![0],
            ..GridSpec::default()
        };
        let scorer = MarkovScorer::new(spec);
        let models = [
            GridModel {
                name: "a".into(),
                model: &m,
            },
            GridModel {
                name: "b".into(),
                model: &m,
            },
        ];
        let rows = ablation_grid(&models, Axis::RemaskStrategy, &g, &scorer, &held).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.remask.as_str()).collect();
        assert_eq!(names, vec!["none", "snapshot", "posthoc", "random"]);
        assert_eq!(rows[2].nfe_stage2, rows[1].nfe_stage2 + 1.0);
        let rows = ablation_grid(&models, Axis::TrainingMix, &g, &scorer, &held).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(ablation_grid::<f32>(&[], Axis::TrainingMix, &g, &scorer, &held).is_err());
    }
}
