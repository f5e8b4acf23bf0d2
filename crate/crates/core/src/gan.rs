//! Transformer generator and patch-embedding transformer discriminator.

use std::collections::BTreeMap;
use std::path::Path;

use autograd::nn::{dropout, gelu, layer_norm, linear, softmax};
use autograd::ops::{add, bmm, broadcast_to, concat, narrow, transpose};
use autograd::{Array, ParamSet, Tensor, VarSet};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Precision};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const FF_EXPANSION: usize = 4;
const EMBED_INIT_STD: f64 = 0.02;
/// Patch length used whenever it divides the sequence length.
pub const DEFAULT_PATCH: usize = 15;

/// Patch length for a sequence of `k` points: [`DEFAULT_PATCH`] when it
/// divides `k`, otherwise the divisor of `k` closest to `k / 6`.
pub fn patch_size_for(k: usize) -> usize {
    if k % DEFAULT_PATCH == 0 {
        return DEFAULT_PATCH;
    }
    let target = k as f64 / 6.0;
    (1..=k)
        .filter(|d| k % d == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub latent_dim: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 3,
            heads: 5,
            embed_dim: 10,
            patch_size: DEFAULT_PATCH,
            latent_dim: 64,
            seq_len: 90,
            channels: 1,
            dropout: 0.1,
        }
    }
}

impl GeneratorConfig {
    /// Defaults adapted to sequence length `k`.
    pub fn for_seq_len(k: usize) -> Self {
        GeneratorConfig {
            seq_len: k,
            patch_size: patch_size_for(k),
            ..Default::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        self.seq_len / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        check_common(
            "generator",
            self.depth,
            self.heads,
            self.embed_dim,
            self.patch_size,
            self.seq_len,
            self.channels,
            self.dropout,
        )?;
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("generator latent_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            depth: 3,
            heads: 30,
            embed_dim: 90,
            patch_size: DEFAULT_PATCH,
            seq_len: 90,
            channels: 1,
            dropout: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn for_seq_len(k: usize) -> Self {
        DiscriminatorConfig {
            seq_len: k,
            patch_size: patch_size_for(k),
            ..Default::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        self.seq_len / self.patch_size
    }

    /// Token count seen by the encoder: patches plus the class token.
    pub fn num_positions(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        check_common(
            "discriminator",
            self.depth,
            self.heads,
            self.embed_dim,
            self.patch_size,
            self.seq_len,
            self.channels,
            self.dropout,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn check_common(
    who: &str,
    depth: usize,
    heads: usize,
    embed_dim: usize,
    patch: usize,
    seq_len: usize,
    channels: usize,
    p: f64,
) -> Result<()> {
    let fail = |msg: String| Err(Error::InvalidConfig(format!("{who}: {msg}")));
    if depth == 0 || heads == 0 || embed_dim == 0 || patch == 0 || seq_len == 0 {
        return fail("depth, heads, embed_dim, patch_size and seq_len must be positive".into());
    }
    if embed_dim % heads != 0 {
        return fail(format!("embed_dim {embed_dim} is not divisible by heads {heads}"));
    }
    if seq_len % patch != 0 {
        return fail(format!("seq_len {seq_len} is not divisible by patch_size {patch}"));
    }
    if channels != 1 {
        return fail(format!("only single-channel sequences are supported, got {channels}"));
    }
    if !(0.0..1.0).contains(&p) {
        return fail(format!("dropout {p} outside [0, 1)"));
    }
    Ok(())
}

/// Forward-pass mode: dropout is active only in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, x: &Tensor, p: f64) -> Tensor {
        match self {
            Mode::Eval => x.clone(),
            Mode::Train(rng) => dropout(x, p, &mut **rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    pub seed: u64,
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamSet::new(),
        }
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.params
            .insert(name, Array::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                std * v
            })
            .collect();
        self.params
            .insert(name, Array::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.insert(name, Array::from_elem(IxDyn(shape), v));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound);
        self.uniform(format!("{name}.bias"), &[fan_out], bound);
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.fill(format!("{name}.weight"), &[dim], 1.0);
        self.fill(format!("{name}.bias"), &[dim], 0.0);
    }

    fn block(&mut self, i: usize, dim: usize) {
        let p = format!("blocks.{i}");
        self.layer_norm(&format!("{p}.ln1"), dim);
        self.linear(&format!("{p}.attn.in_proj"), dim, 3 * dim);
        self.linear(&format!("{p}.attn.out_proj"), dim, dim);
        self.layer_norm(&format!("{p}.ln2"), dim);
        self.linear(&format!("{p}.ff.fc1"), dim, FF_EXPANSION * dim);
        self.linear(&format!("{p}.ff.fc2"), FF_EXPANSION * dim, dim);
    }
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
    cfg.validate()?;
    let (n, m) = (cfg.num_patches(), cfg.embed_dim);
    let mut init = Init::new(seed);
    init.linear("latent", cfg.latent_dim, n * m);
    init.normal("pos_embed".into(), &[1, n, m], EMBED_INIT_STD);
    for i in 0..cfg.depth {
        init.block(i, m);
    }
    init.layer_norm("norm", m);
    init.linear("head", m, cfg.patch_size);
    Ok(Generator {
        config: cfg.clone(),
        params: init.params,
        seed,
    })
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    cfg.validate()?;
    let m = cfg.embed_dim;
    let mut init = Init::new(seed);
    init.linear("patch", cfg.patch_size, m);
    init.normal("cls_token".into(), &[1, 1, m], EMBED_INIT_STD);
    init.normal("pos_embed".into(), &[1, cfg.num_positions(), m], EMBED_INIT_STD);
    for i in 0..cfg.depth {
        init.block(i, m);
    }
    init.layer_norm("norm", m);
    init.linear("head", m, 1);
    Ok(Discriminator {
        config: cfg.clone(),
        params: init.params,
        seed,
    })
}

fn lin(vars: &VarSet, name: &str, x: &Tensor) -> Tensor {
    linear(
        x,
        vars.get(&format!("{name}.weight")),
        Some(vars.get(&format!("{name}.bias"))),
    )
}

fn norm(vars: &VarSet, name: &str, x: &Tensor) -> Tensor {
    layer_norm(
        x,
        vars.get(&format!("{name}.weight")),
        vars.get(&format!("{name}.bias")),
        LN_EPS,
    )
}

/// Multi-head self-attention over `x` of shape (B, N, M).
fn attention(vars: &VarSet, prefix: &str, x: &Tensor, heads: usize, p: f64, mode: &mut Mode) -> Tensor {
    let (b, n, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = m / heads;
    let qkv = lin(vars, &format!("{prefix}.in_proj"), x);
    let split = |i: usize| {
        narrow(&qkv, 2, i * m, m)
            .reshape(&[b, n, heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * heads, n, dh])
    };
    let (q, k, v) = (split(0), split(1), split(2));
    let scores = bmm(&q, &transpose(&k)).scale(1.0 / (dh as f64).sqrt());
    let weights = mode.dropout(&softmax(&scores), p);
    let ctx = bmm(&weights, &v)
        .reshape(&[b, heads, n, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, n, m]);
    lin(vars, &format!("{prefix}.out_proj"), &ctx)
}

/// Pre-norm encoder block.
fn encoder_block(vars: &VarSet, i: usize, x: &Tensor, heads: usize, p: f64, mode: &mut Mode) -> Tensor {
    let prefix = format!("blocks.{i}");
    let h = norm(vars, &format!("{prefix}.ln1"), x);
    let h = attention(vars, &format!("{prefix}.attn"), &h, heads, p, mode);
    let x = add(x, &mode.dropout(&h, p));
    let h = norm(vars, &format!("{prefix}.ln2"), &x);
    let h = gelu(&lin(vars, &format!("{prefix}.ff.fc1"), &h));
    let h = lin(vars, &format!("{prefix}.ff.fc2"), &mode.dropout(&h, p));
    add(&x, &mode.dropout(&h, p))
}

/// Maps latents (B, latent_dim) to sequences (B, seq_len).
pub fn generator_forward(cfg: &GeneratorConfig, vars: &VarSet, z: &Tensor, mode: &mut Mode) -> Result<Tensor> {
    if z.ndim() != 2 || z.shape()[1] != cfg.latent_dim || z.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("(batch >= 1, {})", cfg.latent_dim),
            got: format!("{:?}", z.shape()),
        });
    }
    let b = z.shape()[0];
    let (n, m) = (cfg.num_patches(), cfg.embed_dim);
    let mut x = add(&lin(vars, "latent", z).reshape(&[b, n, m]), vars.get("pos_embed"));
    for i in 0..cfg.depth {
        x = encoder_block(vars, i, &x, cfg.heads, cfg.dropout, mode);
    }
    let x = norm(vars, "norm", &x);
    Ok(lin(vars, "head", &x).reshape(&[b, cfg.seq_len]))
}

/// Scores sequences (B, seq_len), one unbounded real per row.
pub fn discriminator_forward(
    cfg: &DiscriminatorConfig,
    vars: &VarSet,
    x: &Tensor,
    mode: &mut Mode,
) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[1] != cfg.seq_len || x.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("(batch >= 1, {})", cfg.seq_len),
            got: format!("{:?}", x.shape()),
        });
    }
    let b = x.shape()[0];
    let (n, m) = (cfg.num_patches(), cfg.embed_dim);
    let patches = lin(vars, "patch", &x.reshape(&[b, n, cfg.patch_size]));
    let cls = broadcast_to(vars.get("cls_token"), &[b, 1, m]);
    let mut h = add(&concat(&[cls, patches], 1), vars.get("pos_embed"));
    for i in 0..cfg.depth {
        h = encoder_block(vars, i, &h, cfg.heads, cfg.dropout, mode);
    }
    let cls_out = norm(vars, "norm", &narrow(&h, 1, 0, 1).reshape(&[b, m]));
    Ok(lin(vars, "head", &cls_out).reshape(&[b]))
}

/// Draws a (n, dim) block of standard-normal latents.
pub fn sample_latents<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Array {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Array::from_shape_vec(IxDyn(&[n, dim]), data).unwrap()
}

impl Generator {
    /// Eval-mode sequences for the given latents, without recording a graph.
    pub fn generate(&self, z: &Array) -> Result<Array> {
        let _g = autograd::no_grad();
        let out = generator_forward(
            &self.config,
            &self.params.constants(),
            &Tensor::constant(z.clone()),
            &mut Mode::Eval,
        )?;
        Ok(out.value().clone())
    }
}

impl Discriminator {
    /// Eval-mode scores, without recording a graph.
    pub fn score(&self, x: &Array) -> Result<Vec<f64>> {
        let _g = autograd::no_grad();
        let out = discriminator_forward(
            &self.config,
            &self.params.constants(),
            &Tensor::constant(x.clone()),
            &mut Mode::Eval,
        )?;
        Ok(out.to_vec())
    }
}

const ARCHIVE: &str = "model.safetensors";

/// Writes both networks to `dir/model.safetensors` as f32 blobs, with the
/// configs and seeds in the archive metadata.
pub fn save_checkpoint(dir: &Path, generator: &Generator, discriminator: &Discriminator) -> Result<()> {
    let mut all = ParamSet::new();
    checkpoint::merge_prefixed(&mut all, "generator", &generator.params);
    checkpoint::merge_prefixed(&mut all, "discriminator", &discriminator.params);
    let mut meta = BTreeMap::new();
    meta.insert("format".into(), "tsaug-gan".into());
    meta.insert("generator_config".into(), serde_json::to_string(&generator.config)?);
    meta.insert("discriminator_config".into(), serde_json::to_string(&discriminator.config)?);
    meta.insert("generator_seed".into(), generator.seed.to_string());
    meta.insert("discriminator_seed".into(), discriminator.seed.to_string());
    checkpoint::write_archive(&dir.join(ARCHIVE), &all, &meta, Precision::F32)
}

/// Reads a checkpoint written by [`save_checkpoint`]. `path` may be the
/// checkpoint directory or the archive file itself.
pub fn load_checkpoint(path: &Path) -> Result<(Generator, Discriminator)> {
    let file = if path.is_dir() { path.join(ARCHIVE) } else { path.to_path_buf() };
    let (all, meta) = checkpoint::read_archive(&file)?;
    let g_cfg: GeneratorConfig = serde_json::from_str(checkpoint::meta_get(&meta, "generator_config", &file)?)?;
    let d_cfg: DiscriminatorConfig = serde_json::from_str(checkpoint::meta_get(&meta, "discriminator_config", &file)?)?;
    let seed = |key: &str| -> Result<u64> {
        checkpoint::meta_get(&meta, key, &file)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
    };
    let mut generator = build_generator(&g_cfg, seed("generator_seed")?)?;
    let mut discriminator = build_discriminator(&d_cfg, seed("discriminator_seed")?)?;
    let g_params = checkpoint::take_prefixed(&all, "generator");
    let d_params = checkpoint::take_prefixed(&all, "discriminator");
    checkpoint::check_layout(&generator.params, &g_params, "generator")?;
    checkpoint::check_layout(&discriminator.params, &d_params, "discriminator")?;
    generator.params = g_params;
    discriminator.params = d_params;
    Ok((generator, discriminator))
}
