use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sbd::checkpoint::Checkpoint;
use sbd::config::{RunConfig, ScorerKind};
use sbd::data::{read_ids, write_ids};
use sbd::eval::{self, ablation_grid, gen_ppl, nelbo_eval, Axis, GridModel, Scorer};
use sbd::model::{Denoiser, MaskRule, Transformer};
use sbd::rng::{self, streams};
use sbd::sampler::{generate, SamplerOptions};
use sbd::train::{train_loop, Objective};

#[derive(Parser)]
#[command(
    name = "sbd",
    version,
    about = "Multi-stage block diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of samples.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser with the mixed-scale objective.
    Train(Common),
    /// Generate samples with the configured stage plan.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Score samples and held-out NELBO.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Samples to score (`.ids` dump or one sequence per line);
        /// generated on the fly when absent.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Run an ablation grid and write it as CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// revision-scope, remask-strategy or training-mix.
        #[arg(long)]
        axis: String,
        /// Checkpoints to evaluate (repeatable); named by file stem.
        #[arg(long)]
        ckpt: Vec<PathBuf>,
    },
    /// Run the property and oracle suite.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the attention rule of the recompute path (negative control).
        #[arg(long)]
        mutate_mask: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = c.n {
        cfg.eval.n_samples = n;
        cfg.ablate.grid.n_samples = n;
    }
    let cfg = cfg.resolve()?;
    cfg.echo()?;
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Transformer<f32>> {
    let model: Transformer<f32> = Checkpoint::load(path)?.to_model()?;
    let mc = model.config();
    if mc.vocab_size != cfg.model.vocab_size {
        bail!(sbd::Error::Config(format!(
            "checkpoint vocabulary {} does not match the data ({})",
            mc.vocab_size, cfg.model.vocab_size
        )));
    }
    if mc.max_len < cfg.data.seq_len {
        bail!(sbd::Error::Config(format!(
            "checkpoint max_len {} is shorter than seq_len {}",
            mc.max_len, cfg.data.seq_len
        )));
    }
    Ok(model)
}

fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.dataset()?;
    let mut model = Transformer::<f32>::init(cfg.model, rng::derive_seed(cfg.seed, streams::INIT))?;
    let out = cfg.out_dir.clone();
    let steps = cfg.train.steps;
    eprintln!(
        "training {} parameters on {} sequences for {steps} steps",
        model.params().num_values(),
        data.train.len()
    );
    let curve = train_loop(
        &mut model,
        &data.train,
        &cfg.train,
        Objective::Diffusion,
        |step, m, rngs| {
            let name = if step == steps {
                "model.ckpt".to_string()
            } else {
                format!("model_step{step}.ckpt")
            };
            Checkpoint::from_model(m, step as u64, rngs).save(&out.join(name))
        },
    )?;
    let mut w = csv::Writer::from_path(out.join("loss.csv"))?;
    for r in &curve {
        w.serialize(r)?;
    }
    w.flush()?;
    let per_step = cfg.train.batch;
    let window = (steps / 10).max(1) * per_step;
    let mean =
        |xs: &[sbd::train::LossRecord]| xs.iter().map(|r| r.loss).sum::<f64>() / xs.len() as f64;
    println!(
        "loss {:.4} -> {:.4}; wrote {}",
        mean(&curve[..window.min(curve.len())]),
        mean(&curve[curve.len().saturating_sub(window)..]),
        out.join("model.ckpt").display()
    );
    Ok(())
}

type Samples = Vec<Vec<u32>>;

/// Generates `n` samples; returns them with per-stage NFEs.
fn draw_samples<D: Denoiser>(
    model: &D,
    cfg: &RunConfig,
    n: usize,
) -> Result<(Samples, Vec<Vec<usize>>)> {
    let plan = cfg.plan();
    let (mut xs, mut nfes) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for j in 0..n {
        let before = model.forward_count();
        let g = generate(
            model,
            &plan,
            cfg.data.seq_len,
            eval::sample_seed(cfg.seed, j),
            SamplerOptions::default(),
        )?;
        let report = eval::nfe_audit(
            cfg.data.seq_len,
            &g.metrics,
            Some(model.forward_count() - before),
        )?;
        xs.push(g.x);
        nfes.push(report.per_stage);
    }
    Ok((xs, nfes))
}

fn sample(c: &Common, ckpt: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.dataset()?;
    let model = load_model(ckpt, &cfg)?;
    let (xs, nfes) = draw_samples(&model, &cfg, cfg.eval.n_samples)?;
    let mut txt = BufWriter::new(File::create(cfg.out_dir.join("samples.txt"))?);
    for x in &xs {
        writeln!(txt, "{}", data.vocab.decode(x)?)?;
    }
    txt.flush()?;
    let flat: Vec<u32> = xs.concat();
    let mut ids = BufWriter::new(File::create(cfg.out_dir.join("samples.ids"))?);
    write_ids(&mut ids, data.vocab.size(), &flat)?;
    ids.flush()?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("sample_metrics.csv"))?;
    let mut header = vec!["seed".to_string(), "sample".to_string()];
    header.extend((1..=cfg.stages.len()).map(|k| format!("nfe_stage{k}")));
    w.write_record(&header)?;
    for (j, n) in nfes.iter().enumerate() {
        let mut rec = vec![cfg.seed.to_string(), j.to_string()];
        rec.extend(n.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let total: usize = nfes.iter().flatten().sum();
    println!(
        "wrote {} samples to {} ({:.1} NFEs per sample)",
        xs.len(),
        cfg.out_dir.display(),
        total as f64 / xs.len().max(1) as f64
    );
    Ok(())
}

fn read_samples(path: &Path, cfg: &RunConfig, vocab: &sbd::data::Vocab) -> Result<Vec<Vec<u32>>> {
    let len = cfg.data.seq_len;
    let xs: Vec<Vec<u32>> = if path.extension().is_some_and(|e| e == "ids") {
        let (v, ids) = read_ids(&mut File::open(path)?)?;
        if v != vocab.size() || ids.len() % len != 0 {
            bail!(sbd::Error::Data(format!(
                "{} does not hold length-{len} sequences over {} symbols",
                path.display(),
                vocab.size()
            )));
        }
        ids.chunks(len).map(<[u32]>::to_vec).collect()
    } else {
        let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        text.split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| vocab.encode(l))
            .collect::<sbd::Result<_>>()?
    };
    if xs.is_empty() {
        bail!(sbd::Error::Data(format!(
            "{} contains no samples",
            path.display()
        )));
    }
    Ok(xs)
}

fn build_scorer(cfg: &RunConfig, data: &sbd::config::Dataset) -> Result<Box<dyn Scorer>> {
    Ok(match cfg.eval.scorer {
        ScorerKind::Markov => Box::new(eval::MarkovScorer::new(
            data.markov
                .clone()
                .context("markov scorer needs markov data")?,
        )),
        ScorerKind::Uniform => Box::new(eval::UniformScorer {
            vocab: cfg.model.vocab_size,
        }),
        ScorerKind::Ar => {
            let model: Transformer<f32> = match &cfg.eval.scorer_ckpt {
                Some(p) => Checkpoint::load(p)?.to_model()?,
                None => {
                    let mut m = Transformer::init(
                        cfg.eval.scorer_model,
                        rng::derive_seed(cfg.seed, streams::SCORER),
                    )?;
                    eprintln!(
                        "training AR scorer for {} steps",
                        cfg.eval.scorer_train.steps
                    );
                    let path = cfg.out_dir.join("scorer.ckpt");
                    train_loop(
                        &mut m,
                        &data.train,
                        &cfg.eval.scorer_train,
                        Objective::Autoregressive,
                        |s, m, r| Checkpoint::from_model(m, s as u64, r).save(&path),
                    )?;
                    m
                }
            };
            Box::new(eval::ArScorer::new(model))
        }
    })
}

fn evaluate(c: &Common, ckpt: &Path, samples: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.dataset()?;
    let model = load_model(ckpt, &cfg)?;
    let (xs, nfes) = match samples {
        Some(p) => (read_samples(p, &cfg, &data.vocab)?, Vec::new()),
        None => draw_samples(&model, &cfg, cfg.eval.n_samples)?,
    };
    let scorer = build_scorer(&cfg, &data)?;
    let ppl = gen_ppl(scorer.as_ref(), &xs)?;
    let block = cfg
        .eval
        .nelbo_block
        .unwrap_or(cfg.stages.last().map_or(cfg.data.seq_len, |s| s.block_size));
    let mut r = rng::stream(rng::derive_seed(cfg.seed, streams::EVAL), 0);
    let nelbo = nelbo_eval(&model, &data.heldout, block, cfg.eval.nelbo_mc, &mut r)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("eval.csv"))?;
    let mut header: Vec<String> = [
        "seed",
        "n_samples",
        "gen_ppl",
        "clamped",
        "nelbo",
        "nelbo_se",
        "nelbo_block",
        "source_ppl",
    ]
    .map(String::from)
    .to_vec();
    header.extend((1..=cfg.stages.len()).map(|k| format!("nfe_stage{k}")));
    w.write_record(&header)?;
    let source = data
        .markov
        .as_ref()
        .map_or(f64::NAN, |s| s.entropy_rate().exp());
    let mut rec = vec![
        cfg.seed.to_string(),
        xs.len().to_string(),
        ppl.value.to_string(),
        ppl.clamped.to_string(),
        nelbo.mean.to_string(),
        nelbo.std_err.to_string(),
        block.to_string(),
        source.to_string(),
    ];
    for k in 0..cfg.stages.len() {
        let m = if nfes.is_empty() {
            f64::NAN
        } else {
            nfes.iter().map(|n| n[k] as f64).sum::<f64>() / nfes.len() as f64
        };
        rec.push(m.to_string());
    }
    w.write_record(&rec)?;
    w.flush()?;
    if ppl.clamped > 0 {
        eprintln!(
            "warning: {} tokens had probability below {}",
            ppl.clamped,
            eval::PROB_FLOOR
        );
    }
    println!(
        "gen_ppl {:.4} over {} tokens (source {:.4}); nelbo {:.4} ± {:.4} at block {block}",
        ppl.value, ppl.tokens, source, nelbo.mean, nelbo.std_err
    );
    Ok(())
}

fn ablate(c: &Common, axis: &str, ckpts: &[PathBuf]) -> Result<()> {
    let axis = match axis {
        "revision-scope" => Axis::RevisionScope,
        "remask-strategy" => Axis::RemaskStrategy,
        "training-mix" => Axis::TrainingMix,
        other => bail!(sbd::Error::Config(format!("unknown axis {other:?}"))),
    };
    let cfg = load_config(c)?;
    let data = cfg.dataset()?;
    let named: Vec<(String, PathBuf)> = if ckpts.is_empty() {
        cfg.ablate
            .checkpoints
            .iter()
            .map(|c| (c.name.clone(), c.path.clone()))
            .collect()
    } else {
        ckpts
            .iter()
            .map(|p| {
                (
                    p.file_stem()
                        .map_or("model".into(), |s| s.to_string_lossy().into_owned()),
                    p.clone(),
                )
            })
            .collect()
    };
    if named.is_empty() {
        bail!(sbd::Error::Config(
            "ablation needs --ckpt or ablate.checkpoints".into()
        ));
    }
    let models: Vec<Transformer<f32>> = named
        .iter()
        .map(|(_, p)| load_model(p, &cfg))
        .collect::<Result<_>>()?;
    let grid_models: Vec<GridModel<'_, f32>> = named
        .iter()
        .zip(&models)
        .map(|((name, _), m)| GridModel {
            name: name.clone(),
            model: m,
        })
        .collect();
    let scorer = build_scorer(&cfg, &data)?;
    let rows = ablation_grid(
        &grid_models,
        axis,
        &cfg.ablate.grid,
        scorer.as_ref(),
        &data.heldout,
    )?;
    let path = cfg.out_dir.join(format!("ablate_{}.csv", axis.name()));
    eval::write_grid_csv(File::create(&path)?, &rows)?;
    let mut seen = Vec::new();
    for r in &rows {
        let key = (
            r.model.clone(),
            r.block_size,
            r.gamma.to_bits(),
            r.remask.clone(),
        );
        if seen.contains(&key) {
            continue;
        }
        let cell: Vec<f64> = rows
            .iter()
            .filter(|q| {
                (
                    q.model.clone(),
                    q.block_size,
                    q.gamma.to_bits(),
                    q.remask.clone(),
                ) == key
            })
            .map(|q| q.gen_ppl)
            .collect();
        println!(
            "{:<10} block {:>4} gamma {:<5} {:<9} median gen_ppl {:.4}",
            r.model,
            r.block_size,
            r.gamma,
            r.remask,
            eval::median(&cell)
        );
        seen.push(key);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn oracle_check(seed: u64, mutate: bool) -> bool {
    let rule = if mutate {
        MaskRule::LeakNextBlock
    } else {
        MaskRule::BlockCausal
    };
    let results = sbd::oracle::run_all(rule, seed);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    failed == 0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match &cli.command {
        Command::Train(c) => train(c),
        Command::Sample { common, ckpt } => sample(common, ckpt),
        Command::Eval {
            common,
            ckpt,
            samples,
        } => evaluate(common, ckpt, samples.as_deref()),
        Command::Ablate { common, axis, ckpt } => ablate(common, axis, ckpt),
        Command::OracleCheck { seed, mutate_mask } => {
            return if oracle_check(*seed, *mutate_mask) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<sbd::Error>() {
                Some(sbd::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
