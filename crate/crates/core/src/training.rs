//! Adversarial training with least-squares losses and a gradient penalty on
//! real samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use autograd::nn::mse;
use autograd::{grad, Adam, Array, ParamSet, Tensor};
use log::{debug, info};
use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Precision};
use crate::data::{Origin, ScalerParams, SequenceSample, SequenceSet, SplitTag, WindowSpec};
use crate::error::{Error, Result};
use crate::gan::{
    self, build_discriminator, build_generator, discriminator_forward, generator_forward, sample_latents,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode,
};
use crate::metrics::{self, MetricReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: (f64, f64),
    /// Penalty weight γ.
    pub gp_weight: f64,
    pub metric_every: usize,
    pub metric_sample_n: usize,
    pub seed: u64,
    /// Discriminator steps per generator step.
    pub n_critic: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 200,
            batch_size: 32,
            lr_g: 1e-4,
            lr_d: 1e-4,
            betas: (0.5, 0.999),
            gp_weight: 10.0,
            metric_every: 25,
            metric_sample_n: metrics::DedimsConfig::DEFAULT_N,
            seed: 0,
            n_critic: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("training: {m}")));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.lr_g.is_finite() && self.lr_d.is_finite()) {
            return fail("learning rates must be positive and finite");
        }
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(beta_ok(self.betas.0) && beta_ok(self.betas.1)) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return fail("gp_weight must be non-negative and finite");
        }
        if self.metric_every == 0 {
            return fail("metric_every must be at least 1");
        }
        if self.metric_sample_n < 2 {
            return fail("metric_sample_n must be at least 2");
        }
        if self.n_critic == 0 {
            return fail("n_critic must be at least 1");
        }
        Ok(())
    }

    /// Whether metrics and a checkpoint are produced after `epoch`.
    pub fn is_metric_epoch(&self, epoch: usize) -> bool {
        epoch % self.metric_every == 0 || epoch == self.epochs
    }
}

/// Per-epoch training record; losses are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Adversarial part of the discriminator loss, without the penalty.
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub wasserstein: Option<f64>,
    pub dtw_dedims: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,d_loss,g_loss,gp,wasserstein,dtw_dedims";

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.epoch,
            l.d_loss,
            l.g_loss,
            l.gp,
            opt(l.wasserstein),
            opt(l.dtw_dedims)
        );
    }
    out
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, epoch_log_csv(logs)).map_err(|e| Error::io(path, e))
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainingState {
    /// Fresh networks and optimizers; initialization seeds are drawn from `t_cfg.seed`.
    pub fn new(g_cfg: &GeneratorConfig, d_cfg: &DiscriminatorConfig, t_cfg: &TrainingConfig) -> Result<Self> {
        t_cfg.validate()?;
        if g_cfg.seq_len != d_cfg.seq_len {
            return Err(Error::InvalidConfig(format!(
                "generator seq_len {} differs from discriminator seq_len {}",
                g_cfg.seq_len, d_cfg.seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(t_cfg.seed);
        let generator = build_generator(g_cfg, rng.next_u64())?;
        let discriminator = build_discriminator(d_cfg, rng.next_u64())?;
        let opt_g = Adam::new(&generator.params, t_cfg.lr_g, t_cfg.betas);
        let opt_d = Adam::new(&discriminator.params, t_cfg.lr_d, t_cfg.betas);
        Ok(TrainingState {
            generator,
            discriminator,
            opt_g,
            opt_d,
            epoch: 0,
            rng,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.generator.config.seq_len
    }

    /// Writes `model.safetensors` (f32, for generation) and
    /// `state.safetensors` (f64 parameters, optimizer moments, rng position).
    pub fn save(&self, dir: &Path) -> Result<()> {
        gan::save_checkpoint(dir, &self.generator, &self.discriminator)?;
        let mut all = ParamSet::new();
        checkpoint::merge_prefixed(&mut all, "generator", &self.generator.params);
        checkpoint::merge_prefixed(&mut all, "discriminator", &self.discriminator.params);
        checkpoint::merge_prefixed(&mut all, "opt_g.m", &self.opt_g.m);
        checkpoint::merge_prefixed(&mut all, "opt_g.v", &self.opt_g.v);
        checkpoint::merge_prefixed(&mut all, "opt_d.m", &self.opt_d.m);
        checkpoint::merge_prefixed(&mut all, "opt_d.v", &self.opt_d.v);
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), "tsaug-gan-state".into());
        meta.insert("generator_config".into(), serde_json::to_string(&self.generator.config)?);
        meta.insert("discriminator_config".into(), serde_json::to_string(&self.discriminator.config)?);
        meta.insert("generator_seed".into(), self.generator.seed.to_string());
        meta.insert("discriminator_seed".into(), self.discriminator.seed.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        for (key, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            let hyper = serde_json::json!({
                "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step
            });
            meta.insert(key.into(), hyper.to_string());
        }
        let seed_hex: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        meta.insert("rng_seed".into(), seed_hex);
        meta.insert("rng_stream".into(), self.rng.get_stream().to_string());
        meta.insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        checkpoint::write_archive(&dir.join(STATE_ARCHIVE), &all, &meta, Precision::F64)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_ARCHIVE);
        let (all, meta) = checkpoint::read_archive(&path)?;
        let get = |k: &str| checkpoint::meta_get(&meta, k, &path);
        let bad = |k: &str, e: String| Error::Checkpoint(format!("{}: {k}: {e}", path.display()));
        let parse_u64 = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|e| bad(k, format!("{e}"))) };
        let g_cfg: GeneratorConfig = serde_json::from_str(get("generator_config")?)?;
        let d_cfg: DiscriminatorConfig = serde_json::from_str(get("discriminator_config")?)?;
        let mut generator = build_generator(&g_cfg, parse_u64("generator_seed")?)?;
        let mut discriminator = build_discriminator(&d_cfg, parse_u64("discriminator_seed")?)?;
        let section = |p: &str, like: &ParamSet| -> Result<ParamSet> {
            let s = checkpoint::take_prefixed(&all, p);
            checkpoint::check_layout(like, &s, p)?;
            Ok(s)
        };
        generator.params = section("generator", &generator.params)?;
        discriminator.params = section("discriminator", &discriminator.params)?;
        let optimizer = |key: &str, params: &ParamSet| -> Result<Adam> {
            let h: serde_json::Value = serde_json::from_str(get(key)?)?;
            let f = |name: &str| h[name].as_f64().ok_or_else(|| bad(key, format!("missing {name}")));
            let mut opt = Adam::new(params, f("lr")?, (f("beta1")?, f("beta2")?));
            opt.eps = f("eps")?;
            opt.step = h["step"].as_u64().ok_or_else(|| bad(key, "missing step".into()))?;
            opt.m = section(&format!("{key}.m"), params)?;
            opt.v = section(&format!("{key}.v"), params)?;
            Ok(opt)
        };
        let opt_g = optimizer("opt_g", &generator.params)?;
        let opt_d = optimizer("opt_d", &discriminator.params)?;
        let seed_hex = get("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(bad("rng_seed", "expected 64 hex digits".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|e| bad("rng_seed", format!("{e}")))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse_u64("rng_stream")?);
        rng.set_word_pos(get("rng_word_pos")?.parse::<u128>().map_err(|e| bad("rng_word_pos", format!("{e}")))?);
        Ok(TrainingState {
            generator,
            discriminator,
            opt_g,
            opt_d,
            epoch: parse_u64("epoch")? as usize,
            rng,
        })
    }
}

const STATE_ARCHIVE: &str = "state.safetensors";

/// Least-squares discriminator objective: real scores toward 1, fake toward 0.
pub fn discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Tensor {
    let ones = Tensor::constant(Array::ones(IxDyn(real_scores.shape())));
    let zeros = Tensor::constant(Array::zeros(IxDyn(fake_scores.shape())));
    mse(real_scores, &ones) + mse(fake_scores, &zeros)
}

/// Least-squares generator objective: fake scores toward 1.
pub fn generator_loss(fake_scores: &Tensor) -> Tensor {
    let ones = Tensor::constant(Array::ones(IxDyn(fake_scores.shape())));
    mse(fake_scores, &ones)
}

/// Penalty term and the critic scores it was computed from.
pub struct Penalized {
    pub penalty: Tensor,
    pub scores: Tensor,
}

/// `(γ/2) · mean_b ‖∂critic(x_b)/∂x_b‖²` at the given real points.
///
/// `critic` must score each row independently. The returned penalty stays
/// differentiable with respect to whatever the critic closes over.
pub fn penalized_scores<F>(critic: F, real: &Array, gamma: f64) -> Result<Penalized>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    if real.ndim() != 2 || real.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            expected: "(batch >= 1, seq_len)".into(),
            got: format!("{:?}", real.shape()),
        });
    }
    if gamma == 0.0 {
        let scores = critic(&Tensor::constant(real.clone()))?;
        return Ok(Penalized {
            penalty: Tensor::scalar(0.0),
            scores,
        });
    }
    let _on = autograd::enable_grad();
    let x = Tensor::variable(real.clone());
    let scores = critic(&x)?;
    let gx = grad(&scores.sum(), &[&x], true).remove(0);
    let b = real.shape()[0] as f64;
    let penalty = gx.square().sum().scale(gamma / (2.0 * b));
    Ok(Penalized { penalty, scores })
}

/// Penalty of an eval-mode discriminator at `real`.
pub fn gradient_penalty(disc: &Discriminator, real: &Array, gamma: f64) -> Result<f64> {
    let vars = disc.params.constants();
    let cfg = &disc.config;
    let p = penalized_scores(|x| discriminator_forward(cfg, &vars, x, &mut Mode::Eval), real, gamma)?;
    Ok(p.penalty.item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStep {
    pub d_loss: f64,
    pub gp: f64,
}

/// Where a step happened, for diagnostics.
#[derive(Debug, Clone, Default)]
pub struct StepContext {
    pub epoch: usize,
    pub batch: usize,
    pub last_checkpoint: Option<PathBuf>,
}

fn non_finite(what: &str, ctx: &StepContext) -> Error {
    Error::NonFiniteLoss {
        what: what.to_string(),
        epoch: ctx.epoch,
        batch: ctx.batch,
        last_checkpoint: ctx.last_checkpoint.clone(),
    }
}

/// One discriminator update on `real` (B, K); the generator is untouched.
pub fn d_step(state: &mut TrainingState, real: &Array, gamma: f64, ctx: &StepContext) -> Result<DStep> {
    let b = real.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::TooFewSamples(b));
    }
    let _on = autograd::enable_grad();
    let z = sample_latents(b, state.generator.config.latent_dim, &mut state.rng);
    let fake = {
        let _off = autograd::no_grad();
        generator_forward(
            &state.generator.config,
            &state.generator.params.constants(),
            &Tensor::constant(z),
            &mut Mode::Train(&mut state.rng),
        )?
        .detach()
    };
    let vars = state.discriminator.params.vars();
    let cfg = state.discriminator.config.clone();
    let rng = &mut state.rng;
    let Penalized { penalty, scores } =
        penalized_scores(|x| discriminator_forward(&cfg, &vars, x, &mut Mode::Train(rng)), real, gamma)?;
    let fake_scores = discriminator_forward(&cfg, &vars, &fake, &mut Mode::Train(&mut state.rng))?;
    let adversarial = discriminator_loss(&scores, &fake_scores);
    let total = &adversarial + &penalty;
    let (d_loss, gp) = (adversarial.item(), penalty.item());
    if !total.item().is_finite() {
        return Err(non_finite(if gp.is_finite() { "d_loss" } else { "gp" }, ctx));
    }
    let grads = vars.grads(&total);
    if !grads.all_finite() {
        return Err(non_finite("discriminator gradient", ctx));
    }
    state.opt_d.update(&mut state.discriminator.params, &grads);
    Ok(DStep { d_loss, gp })
}

/// One generator update with a fresh latent batch; the discriminator is untouched.
pub fn g_step(state: &mut TrainingState, batch_size: usize, ctx: &StepContext) -> Result<f64> {
    if batch_size < 2 {
        return Err(Error::TooFewSamples(batch_size));
    }
    let _on = autograd::enable_grad();
    let z = Tensor::constant(sample_latents(batch_size, state.generator.config.latent_dim, &mut state.rng));
    let vars = state.generator.params.vars();
    let fake = generator_forward(&state.generator.config, &vars, &z, &mut Mode::Train(&mut state.rng))?;
    let d_vars = state.discriminator.params.constants();
    let scores = discriminator_forward(&state.discriminator.config, &d_vars, &fake, &mut Mode::Train(&mut state.rng))?;
    let loss = generator_loss(&scores);
    let value = loss.item();
    if !value.is_finite() {
        return Err(non_finite("g_loss", ctx));
    }
    let grads = vars.grads(&loss);
    if !grads.all_finite() {
        return Err(non_finite("generator gradient", ctx));
    }
    state.opt_g.update(&mut state.generator.params, &grads);
    Ok(value)
}

/// Checkpoint choice for downstream generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectBy {
    /// The generator after the last epoch.
    #[default]
    Final,
    /// The generator at the metric epoch with the lowest DTW DeD-iMs.
    DtwDedims,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints go to `dir/epoch_NNNN` at metric epochs and `dir/final`.
    pub checkpoint_dir: Option<PathBuf>,
    pub select_by: SelectBy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainingState,
    pub log: Vec<EpochLog>,
    /// Generator chosen by the selection rule, with the epoch it comes from.
    pub selected: Generator,
    pub selected_epoch: usize,
    pub final_report: Option<MetricReport>,
}

fn sequence_matrix(set: &SequenceSet) -> Array {
    let k = set.window.k;
    let data: Vec<f64> = set.samples.iter().flat_map(|s| s.values.iter().copied()).collect();
    Array::from_shape_vec(IxDyn(&[set.len(), k]), data).expect("validated sample lengths")
}

fn check_training_data(data: &SequenceSet, seq_len: usize) -> Result<()> {
    if data.split == SplitTag::Test {
        return Err(Error::TestLeak);
    }
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    if data.len() < 2 {
        return Err(Error::TooFewSamples(data.len()));
    }
    if data.window.k != seq_len {
        return Err(Error::WindowMismatch {
            expected: seq_len,
            got: data.window.k,
        });
    }
    data.validate()
}

/// Trains fresh networks for `t_cfg.epochs` epochs.
pub fn train(
    data: &SequenceSet,
    g_cfg: &GeneratorConfig,
    d_cfg: &DiscriminatorConfig,
    t_cfg: &TrainingConfig,
) -> Result<(TrainingState, Vec<EpochLog>)> {
    let state = TrainingState::new(g_cfg, d_cfg, t_cfg)?;
    let out = train_from(data, state, t_cfg, &TrainOptions::default())?;
    Ok((out.state, out.log))
}

/// Continues training `state` until `t_cfg.epochs` epochs are complete.
pub fn train_from(
    data: &SequenceSet,
    mut state: TrainingState,
    t_cfg: &TrainingConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    t_cfg.validate()?;
    check_training_data(data, state.seq_len())?;
    let real = sequence_matrix(data);
    let n = real.shape()[0];
    let batch_size = t_cfg.batch_size.min(n);
    let mut log = Vec::new();
    let mut ctx = StepContext::default();
    let mut best: Option<(f64, usize, Generator)> = None;
    let mut final_report = None;

    while state.epoch < t_cfg.epochs {
        let epoch = state.epoch + 1;
        ctx.epoch = epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let (mut d_sum, mut g_sum, mut gp_sum) = (0.0, 0.0, 0.0);
        let (mut d_count, mut g_count) = (0usize, 0usize);
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            ctx.batch = bi;
            let batch = real.select(Axis(0), chunk);
            let d = d_step(&mut state, &batch, t_cfg.gp_weight, &ctx)?;
            d_sum += d.d_loss;
            gp_sum += d.gp;
            d_count += 1;
            if d_count % t_cfg.n_critic == 0 {
                g_sum += g_step(&mut state, chunk.len(), &ctx)?;
                g_count += 1;
            }
        }
        state.epoch = epoch;
        let mut entry = EpochLog {
            epoch,
            d_loss: d_sum / d_count.max(1) as f64,
            g_loss: if g_count > 0 { g_sum / g_count as f64 } else { 0.0 },
            gp: gp_sum / d_count.max(1) as f64,
            wasserstein: None,
            dtw_dedims: None,
        };
        if t_cfg.is_metric_epoch(epoch) {
            let report = evaluate(&state.generator, data, t_cfg, epoch)?;
            entry.wasserstein = Some(report.wasserstein);
            entry.dtw_dedims = Some(report.dtw_dedims);
            info!(
                "epoch {epoch}: d_loss {:.5} g_loss {:.5} gp {:.5} W {:.5} dtw-dedims {:.5}",
                entry.d_loss, entry.g_loss, entry.gp, report.wasserstein, report.dtw_dedims
            );
            if best.as_ref().is_none_or(|(v, _, _)| report.dtw_dedims < *v) {
                best = Some((report.dtw_dedims, epoch, state.generator.clone()));
            }
            if let Some(dir) = &opts.checkpoint_dir {
                let path = dir.join(format!("epoch_{epoch:04}"));
                state.save(&path)?;
                ctx.last_checkpoint = Some(path);
            }
            final_report = Some(report);
        } else {
            debug!(
                "epoch {epoch}: d_loss {:.5} g_loss {:.5} gp {:.5}",
                entry.d_loss, entry.g_loss, entry.gp
            );
        }
        log.push(entry);
    }

    if let Some(dir) = &opts.checkpoint_dir {
        state.save(&dir.join("final"))?;
    }
    let (selected, selected_epoch) = match (opts.select_by, best) {
        (SelectBy::DtwDedims, Some((_, epoch, g))) => (g, epoch),
        _ => (state.generator.clone(), state.epoch),
    };
    Ok(TrainOutcome {
        state,
        log,
        selected,
        selected_epoch,
        final_report,
    })
}

/// Monitoring metrics between `data` and a same-size generated set.
///
/// Generation uses its own rng so the training stream is unaffected by the
/// metric cadence.
fn evaluate(generator: &Generator, data: &SequenceSet, t_cfg: &TrainingConfig, epoch: usize) -> Result<MetricReport> {
    let gen_seed = t_cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let generated = generate_dataset(generator, data.len(), gen_seed, &data.window)?;
    let n = t_cfg.metric_sample_n.min(data.len());
    metrics::compare(data, &generated, Some(n), t_cfg.seed)
}

const GENERATION_CHUNK: usize = 256;

/// `n` synthetic sequences from fresh standard-normal latents, in eval mode.
pub fn generate_dataset(generator: &Generator, n: usize, seed: u64, window: &WindowSpec) -> Result<SequenceSet> {
    if n == 0 {
        return Err(Error::InvalidConfig("number of generated samples must be at least 1".into()));
    }
    if window.k != generator.config.seq_len {
        return Err(Error::WindowMismatch {
            expected: generator.config.seq_len,
            got: window.k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut left = n;
    while left > 0 {
        let m = left.min(GENERATION_CHUNK);
        let z = sample_latents(m, generator.config.latent_dim, &mut rng);
        let out = generator.generate(&z)?;
        for row in out.outer_iter() {
            samples.push(SequenceSample {
                values: row.iter().copied().collect(),
                origin: Origin::Synthetic,
                scaler: ScalerParams::IDENTITY,
            });
        }
        left -= m;
    }
    SequenceSet::new(samples, *window, SplitTag::Unsplit)
}
