//! Small pre-norm vision transformer encoder.
//!
//! Parameters live in one flat list in declaration order (the order the
//! checkpoint format stores them in):
//!
//! | index          | parameter                          |
//! |----------------|------------------------------------|
//! | 0, 1           | patch projection weight, bias      |
//! | 2              | class token `[1, dim]`             |
//! | 3              | positional embeddings `[1+g², dim]`|
//! | 4 + 12·b + j   | block `b`, see [`BlockParam`]      |
//! | last two       | final layernorm gain, bias         |

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f32 = 1e-6;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_BLOCK: usize = 12;
const STEM_PARAMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the positional grid the weights were created for.
    pub pos_grid: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            pos_grid: 8,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("pos_grid", self.pos_grid),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("ViTConfig.{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side for `image_size`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Per-block parameter slots, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum BlockParam {
    Norm1Gain = 0,
    Norm1Bias,
    QkvWeight,
    QkvBias,
    ProjWeight,
    ProjBias,
    Norm2Gain,
    Norm2Bias,
    Fc1Weight,
    Fc1Bias,
    Fc2Weight,
    Fc2Bias,
}

/// A named model parameter.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

impl Param {
    fn new(name: impl Into<String>, value: Tensor<f32>, decay: bool) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
            decay,
        }
    }

    /// Records the parameter on `g`: a gradient leaf when trainable, a
    /// constant otherwise.
    pub fn bind(&self, g: &mut Graph<f32>) -> Var {
        if self.trainable {
            g.leaf(self.value.clone())
        } else {
            g.constant(self.value.clone())
        }
    }
}

/// Representations produced for a batch.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `[B, dim]` final state of the class token.
    pub cls: Var,
    /// `[B, dim]` mean over the final patch tokens.
    pub mean_patch: Var,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    config: ViTConfig,
    params: Vec<Param>,
}

impl BackboneParams {
    /// Fresh weights: normal(0, 0.02) matrices and tokens, zero biases, unit
    /// layernorm gains. Everything starts trainable.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "backbone-init", &[]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |shape: Vec<usize>| {
            Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
        };
        let (d, h, pd) = (config.dim, config.hidden(), config.patch_dim());
        let tokens = 1 + config.pos_grid * config.pos_grid;
        let mut params = vec![
            Param::new("patch_embed.weight", randn(vec![pd, d]), true),
            Param::new("patch_embed.bias", Tensor::zeros(vec![d]), false),
            Param::new("cls_token", randn(vec![1, d]), false),
            Param::new("pos_embed", randn(vec![tokens, d]), false),
        ];
        for b in 0..config.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            params.extend([
                Param::new(p("norm1.weight"), Tensor::full(vec![d], 1.0), false),
                Param::new(p("norm1.bias"), Tensor::zeros(vec![d]), false),
                Param::new(p("attn.qkv.weight"), randn(vec![d, 3 * d]), true),
                Param::new(p("attn.qkv.bias"), Tensor::zeros(vec![3 * d]), false),
                Param::new(p("attn.proj.weight"), randn(vec![d, d]), true),
                Param::new(p("attn.proj.bias"), Tensor::zeros(vec![d]), false),
                Param::new(p("norm2.weight"), Tensor::full(vec![d], 1.0), false),
                Param::new(p("norm2.bias"), Tensor::zeros(vec![d]), false),
                Param::new(p("mlp.fc1.weight"), randn(vec![d, h]), true),
                Param::new(p("mlp.fc1.bias"), Tensor::zeros(vec![h]), false),
                Param::new(p("mlp.fc2.weight"), randn(vec![h, d]), true),
                Param::new(p("mlp.fc2.bias"), Tensor::zeros(vec![d]), false),
            ]);
        }
        params.push(Param::new("norm.weight", Tensor::full(vec![d], 1.0), false));
        params.push(Param::new("norm.bias", Tensor::zeros(vec![d]), false));
        Ok(Self { config, params })
    }

    /// Reassembles parameters (e.g. from a checkpoint), checking every shape
    /// against the layout `config` implies.
    pub fn from_values(config: ViTConfig, values: Vec<Tensor<f32>>) -> Result<Self> {
        let mut out = Self::init(config, 0)?;
        if values.len() != out.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                out.params.len(),
                values.len()
            )));
        }
        for (p, v) in out.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(out)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn block_param_index(&self, block: usize, which: BlockParam) -> usize {
        STEM_PARAMS + PARAMS_PER_BLOCK * block + which as usize
    }

    fn final_norm_index(&self) -> usize {
        STEM_PARAMS + PARAMS_PER_BLOCK * self.config.depth
    }

    /// Indices of the parameters belonging to one block.
    pub fn block_params(&self, block: usize) -> std::ops::Range<usize> {
        let start = STEM_PARAMS + PARAMS_PER_BLOCK * block;
        start..start + PARAMS_PER_BLOCK
    }

    /// Whether every parameter of `block` is trainable.
    pub fn block_trainable(&self, block: usize) -> bool {
        self.params[self.block_params(block)].iter().all(|p| p.trainable)
    }

    /// Makes exactly the last `k` blocks trainable, plus the final layernorm
    /// when `k > 0`. Patch embedding, class token and positional embeddings
    /// are always frozen by this call.
    pub fn set_trainable(&mut self, last_k_blocks: usize) -> Result<()> {
        let depth = self.config.depth;
        if last_k_blocks > depth {
            return Err(Error::contract(format!(
                "cannot unfreeze {last_k_blocks} blocks of a depth-{depth} backbone"
            )));
        }
        for p in &mut self.params {
            p.trainable = false;
        }
        for b in depth - last_k_blocks..depth {
            for i in self.block_params(b) {
                self.params[i].trainable = true;
            }
        }
        if last_k_blocks > 0 {
            let n = self.final_norm_index();
            self.params[n].trainable = true;
            self.params[n + 1].trainable = true;
        }
        Ok(())
    }

    /// Marks every parameter trainable (training from scratch).
    pub fn set_all_trainable(&mut self) {
        for p in &mut self.params {
            p.trainable = true;
        }
    }

    pub fn bind(&self, g: &mut Graph<f32>) -> Vec<Var> {
        self.params.iter().map(|p| p.bind(g)).collect()
    }

    /// Encodes `[B, C, H, W]` pixels with parameters already bound on `g`.
    pub fn forward(&self, g: &mut Graph<f32>, vars: &[Var], batch: &Tensor<f32>) -> Result<BackboneOutput> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::contract("parameter bindings do not match backbone"));
        }
        let shape = batch.shape();
        if shape.len() != 4
            || shape[1] != cfg.channels
            || shape[2] != cfg.image_size
            || shape[3] != cfg.image_size
        {
            return Err(Error::dim(format!(
                "backbone expects [B, {0}, {1}, {1}], got {shape:?}",
                cfg.channels, cfg.image_size
            )));
        }
        let grid = cfg.grid();
        if grid != cfg.pos_grid {
            return Err(Error::dim(format!(
                "{grid}x{grid} patch grid but positional embeddings are {0}x{0}; interpolate them first",
                cfg.pos_grid
            )));
        }
        let b = shape[0];
        let n = grid * grid;
        let t = n + 1;
        let d = cfg.dim;

        let patches = g.constant(patchify(batch, cfg.patch_size)?);
        let x = g.matmul(patches, vars[0])?;
        let x = g.add(x, vars[1])?;
        let x = g.reshape(x, &[b, n, d])?;
        let cls = g.gather_rows(vars[2], &vec![0; b])?;
        let cls = g.reshape(cls, &[b, 1, d])?;
        let x = g.concat(&[cls, x], 1)?;
        let mut x = g.add(x, vars[3])?;

        for blk in 0..cfg.depth {
            let w = |which: BlockParam| vars[self.block_param_index(blk, which)];
            x = self.block_forward(g, x, &w, b, t)?;
        }
        let n_idx = self.final_norm_index();
        let y = g.layernorm(x, vars[n_idx], vars[n_idx + 1], LN_EPS)?;
        let cls = g.slice(y, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        let patches = g.slice(y, 1, 1, n)?;
        let mean_patch = g.mean_axis(patches, 1)?;
        Ok(BackboneOutput { cls, mean_patch })
    }

    fn block_forward(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        w: &dyn Fn(BlockParam) -> Var,
        b: usize,
        t: usize,
    ) -> Result<Var> {
        use BlockParam::*;
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
        let bh = b * heads;

        let h = g.layernorm(x, w(Norm1Gain), w(Norm1Bias), LN_EPS)?;
        let qkv = g.matmul(h, w(QkvWeight))?;
        let qkv = g.add(qkv, w(QkvBias))?;
        let qkv = g.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * bh, t, dh])?;
        let q = g.slice(qkv, 0, 0, bh)?;
        let q = g.scale(q, 1.0 / (dh as f32).sqrt())?;
        let k = g.slice(qkv, 0, bh, bh)?;
        let v = g.slice(qkv, 0, 2 * bh, bh)?;
        let scores = g.matmul_nt(q, k)?;
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, v)?;
        let o = g.reshape(o, &[b, heads, t, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, t, d])?;
        let o = g.matmul(o, w(ProjWeight))?;
        let o = g.add(o, w(ProjBias))?;
        let x = g.add(x, o)?;

        let h = g.layernorm(x, w(Norm2Gain), w(Norm2Bias), LN_EPS)?;
        let h = g.matmul(h, w(Fc1Weight))?;
        let h = g.add(h, w(Fc1Bias))?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w(Fc2Weight))?;
        let h = g.add(h, w(Fc2Bias))?;
        g.add(x, h)
    }

    /// Gradient-free encoding; returns `(cls, mean_patch)` as `[B, dim]`.
    pub fn encode(&self, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::with_capacity(32 * self.config.depth + 32);
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let out = self.forward(&mut g, &vars, batch)?;
        Ok((g.value(out.cls).clone(), g.value(out.mean_patch).clone()))
    }

    /// Bilinearly resamples the positional grid to `new_grid` per side.
    ///
    /// Grid corners map onto grid corners, so linear fields are reproduced
    /// exactly. The class-token row is copied unchanged.
    pub fn interpolate_pos_embed(&self, new_grid: usize) -> Result<Self> {
        if new_grid == 0 {
            return Err(Error::contract("positional grid must be at least 1"));
        }
        let old = self.config.pos_grid;
        let mut out = self.clone();
        if new_grid == old {
            return Ok(out);
        }
        let d = self.config.dim;
        let src = self.params[3].value.data();
        let mut data = Vec::with_capacity((1 + new_grid * new_grid) * d);
        data.extend_from_slice(&src[..d]);
        let field = &src[d..];
        let coord = |i: usize| -> (usize, usize, f32) {
            let pos = if new_grid == 1 {
                (old - 1) as f64 / 2.0
            } else {
                i as f64 * (old - 1) as f64 / (new_grid - 1) as f64
            };
            let lo = (pos.floor() as usize).min(old - 1);
            let hi = (lo + 1).min(old - 1);
            (lo, hi, (pos - lo as f64) as f32)
        };
        for r in 0..new_grid {
            let (r0, r1, fr) = coord(r);
            for c in 0..new_grid {
                let (c0, c1, fc) = coord(c);
                let at = |rr: usize, cc: usize, k: usize| field[(rr * old + cc) * d + k];
                for k in 0..d {
                    let top = at(r0, c0, k) * (1.0 - fc) + at(r0, c1, k) * fc;
                    let bottom = at(r1, c0, k) * (1.0 - fc) + at(r1, c1, k) * fc;
                    data.push(top * (1.0 - fr) + bottom * fr);
                }
            }
        }
        out.params[3].value = Tensor::new(vec![1 + new_grid * new_grid, d], data)?;
        out.config.pos_grid = new_grid;
        Ok(out)
    }

    /// Copy adapted to `image_size`, interpolating positions when the patch
    /// grid changes.
    pub fn adapted_to(&self, image_size: usize) -> Result<Self> {
        if image_size % self.config.patch_size != 0 {
            return Err(Error::dim(format!(
                "image size {image_size} is not a multiple of patch size {}",
                self.config.patch_size
            )));
        }
        let mut out = self.interpolate_pos_embed(image_size / self.config.patch_size)?;
        out.config.image_size = image_size;
        Ok(out)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// `[B, C, H, W]` -> `[B * N, C * p * p]` with patches in raster order and
/// features ordered channel, row, column.
pub fn patchify(batch: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let s = batch.shape();
    if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::dim(format!("cannot patchify {s:?} with patch {p}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let src = batch.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ci) * h + py * p + dy) * w + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * gh * gw, c * p * p], out)
}

/// Random pixel batch for tests and benchmarks.
pub fn random_batch(b: usize, cfg: &ViTConfig, seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, "random-batch", &[]);
    Tensor::from_fn(
        vec![b, cfg.channels, cfg.image_size, cfg.image_size],
        |_| r.random::<f32>(),
    )
}
