//! Small diffusion transformer over patchified frames.
//!
//! Every block exposes six named linear attachment points (`q`, `k`, `v`,
//! `o`, `mlp_in`, `mlp_out`) that low-rank adapters hook into. The forward
//! pass is recorded on a [`Tape`], so the same code path serves training
//! (with gradients for whichever parameter scope is selected) and inference
//! (build, read the output, drop the tape).

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, LoraWeights};
use crate::error::{LionError, Result};
use crate::scaling::{ScalingEmbedder, ScalingToken};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{FileBuilder, WeightFile};

/// Roles a linear layer can play inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Q,
    K,
    V,
    O,
    MlpIn,
    MlpOut,
}

pub const ROLES: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::MlpIn, Role::MlpOut];

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::MlpIn => "mlp_in",
            Role::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "q" => Role::Q,
            "k" => Role::K,
            "v" => Role::V,
            "o" => Role::O,
            "mlp_in" => Role::MlpIn,
            "mlp_out" => Role::MlpOut,
            other => return Err(LionError::Attachment(format!("unknown role {other:?}"))),
        })
    }
}

/// Attachment-point id: block index plus role, e.g. `blk2.mlp_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointId {
    pub block: usize,
    pub role: Role,
}

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blk{}.{}", self.block, self.role.as_str())
    }
}

impl PointId {
    pub fn parse(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix("blk")
            .ok_or_else(|| LionError::Attachment(format!("bad point id {s:?}")))?;
        let (num, role) = rest
            .split_once('.')
            .ok_or_else(|| LionError::Attachment(format!("bad point id {s:?}")))?;
        let block = num
            .parse::<usize>()
            .map_err(|_| LionError::Attachment(format!("bad point id {s:?}")))?;
        Ok(PointId { block, role: Role::parse(role)? })
    }
}

/// Geometry and schedule of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub frames: usize,
    pub frame_size: usize,
    pub patch_size: usize,
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 6,
            channels: 64,
            heads: 4,
            frames: 13,
            frame_size: 16,
            patch_size: 4,
            diffusion_steps: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(LionError::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.patch_size == 0 || self.frame_size % self.patch_size != 0 {
            return Err(LionError::Config(format!(
                "frame_size {} must be a positive multiple of patch_size {}",
                self.frame_size, self.patch_size
            )));
        }
        if self.num_blocks == 0 || self.frames == 0 || self.diffusion_steps == 0 {
            return Err(LionError::Config("blocks, frames, diffusion_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.frame_size / self.patch_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_patch_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    /// Sequence length: patch tokens plus one condition token.
    pub fn seq_len(&self) -> usize {
        self.num_patch_tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.channels
    }

    /// Shape of the linear layer at a given role.
    pub fn point_dims(&self, role: Role) -> (usize, usize) {
        let d = self.channels;
        match role {
            Role::MlpIn => (d, self.mlp_hidden()),
            Role::MlpOut => (self.mlp_hidden(), d),
            _ => (d, d),
        }
    }

    /// All attachment points of the model, in block-then-role order.
    pub fn points(&self) -> Vec<PointId> {
        (0..self.num_blocks)
            .flat_map(|block| ROLES.iter().map(move |&role| PointId { block, role }))
            .collect()
    }
}

/// A weight matrix plus bias, addressed by an attachment point when it is
/// one of the adapter targets.
#[derive(Debug, Clone)]
pub struct LinearLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    fn init(d_in: usize, d_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: Tensor::randn(vec![d_in, d_out], T::from_f64(std), rng),
            bias: Tensor::zeros(vec![d_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub q: LinearLayer<T>,
    pub k: LinearLayer<T>,
    pub v: LinearLayer<T>,
    pub o: LinearLayer<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub mlp_in: LinearLayer<T>,
    pub mlp_out: LinearLayer<T>,
}

impl<T: Scalar> Block<T> {
    pub fn layer(&self, role: Role) -> &LinearLayer<T> {
        match role {
            Role::Q => &self.q,
            Role::K => &self.k,
            Role::V => &self.v,
            Role::O => &self.o,
            Role::MlpIn => &self.mlp_in,
            Role::MlpOut => &self.mlp_out,
        }
    }

    pub fn layer_mut(&mut self, role: Role) -> &mut LinearLayer<T> {
        match role {
            Role::Q => &mut self.q,
            Role::K => &mut self.k,
            Role::V => &mut self.v,
            Role::O => &mut self.o,
            Role::MlpIn => &mut self.mlp_in,
            Role::MlpOut => &mut self.mlp_out,
        }
    }
}

/// Identifies one trainable tensor across the model, an adapter set, and a
/// scaling embedder. Keys order deterministically, so optimizer sweeps and
/// gradient reductions are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    PatchW,
    PatchB,
    CondW,
    CondB,
    PosEmbed,
    BlockLn1Gamma(usize),
    BlockLn1Beta(usize),
    BlockLn2Gamma(usize),
    BlockLn2Beta(usize),
    PointW(PointId),
    PointB(PointId),
    FinalGamma,
    FinalBeta,
    HeadW,
    HeadB,
    LoraA(PointId),
    LoraB(PointId),
    EmbedProj,
    EmbedBias,
}

/// Tape variables bound to trainable parameters during one forward build.
#[derive(Default)]
pub struct Bindings {
    pub entries: Vec<(ParamKey, Var)>,
}

/// Per-block activation handles: the value each adapter role receives as
/// input (`q`/`k`/`v` read `ln1_out`, `o` reads `attn_concat`, `mlp_in`
/// reads `ln2_out`, `mlp_out` reads `mlp_hidden`).
#[derive(Debug, Clone, Copy)]
pub struct BlockProbes {
    pub ln1_out: Var,
    pub attn_concat: Var,
    pub ln2_out: Var,
    pub mlp_hidden: Var,
}

impl BlockProbes {
    /// The activation feeding the linear at `role`.
    pub fn input_for(&self, role: Role) -> Var {
        match role {
            Role::Q | Role::K | Role::V => self.ln1_out,
            Role::O => self.attn_concat,
            Role::MlpIn => self.ln2_out,
            Role::MlpOut => self.mlp_hidden,
        }
    }
}

impl Bindings {
    fn bind(&mut self, key: ParamKey, var: Var) {
        self.entries.push((key, var));
    }
}

/// Which parameters receive gradient in a forward build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Inference: everything is a constant.
    None,
    /// Base pre-training: model weights train, no adapters involved.
    Base,
    /// Adapter training: low-rank pairs (and the scaling embedder, when
    /// present) train; base weights stay frozen.
    Adapter,
}

/// Scaling-token input to a forward build.
pub enum TokenInput<'a, T: Scalar> {
    None,
    /// Precomputed token row, appended as a constant.
    Fixed(&'a ScalingToken<T>),
    /// Token built on the tape from the embedder so its projection trains
    /// jointly with the adapter.
    Train { embedder: &'a ScalingEmbedder<T>, s: f64 },
}

/// The model: patch/condition embeddings, positional table, transformer
/// blocks, and a linear head back to patch space.
#[derive(Debug, Clone)]
pub struct DiT<T> {
    pub cfg: ModelConfig,
    pub patch_embed: LinearLayer<T>,
    pub cond_embed: LinearLayer<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
    pub head: LinearLayer<T>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

impl<T: Scalar> DiT<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.channels;
        let blocks = (0..cfg.num_blocks)
            .map(|_| Block {
                ln1_gamma: Tensor::ones(vec![d]),
                ln1_beta: Tensor::zeros(vec![d]),
                q: LinearLayer::init(d, d, INIT_STD, &mut rng),
                k: LinearLayer::init(d, d, INIT_STD, &mut rng),
                v: LinearLayer::init(d, d, INIT_STD, &mut rng),
                o: LinearLayer::init(d, d, INIT_STD, &mut rng),
                ln2_gamma: Tensor::ones(vec![d]),
                ln2_beta: Tensor::zeros(vec![d]),
                mlp_in: LinearLayer::init(d, cfg.mlp_hidden(), INIT_STD, &mut rng),
                mlp_out: LinearLayer::init(cfg.mlp_hidden(), d, INIT_STD, &mut rng),
            })
            .collect();
        Ok(DiT {
            patch_embed: LinearLayer::init(cfg.patch_dim(), d, INIT_STD, &mut rng),
            cond_embed: LinearLayer::init(cfg.frame_size * cfg.frame_size, d, INIT_STD, &mut rng),
            pos_embed: Tensor::randn(vec![cfg.seq_len(), d], T::from_f64(INIT_STD), &mut rng),
            blocks,
            final_gamma: Tensor::ones(vec![d]),
            final_beta: Tensor::zeros(vec![d]),
            head: LinearLayer::init(d, cfg.patch_dim(), INIT_STD, &mut rng),
            cfg,
        })
    }

    // ── Parameter plumbing ───────────────────────────────────────────

    /// Visit every base parameter in a fixed order.
    pub fn visit_params(&self, mut f: impl FnMut(ParamKey, &Tensor<T>)) {
        f(ParamKey::PatchW, &self.patch_embed.weight);
        f(ParamKey::PatchB, &self.patch_embed.bias);
        f(ParamKey::CondW, &self.cond_embed.weight);
        f(ParamKey::CondB, &self.cond_embed.bias);
        f(ParamKey::PosEmbed, &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            f(ParamKey::BlockLn1Gamma(i), &b.ln1_gamma);
            f(ParamKey::BlockLn1Beta(i), &b.ln1_beta);
            for role in ROLES {
                let p = PointId { block: i, role };
                f(ParamKey::PointW(p), &b.layer(role).weight);
                f(ParamKey::PointB(p), &b.layer(role).bias);
            }
            f(ParamKey::BlockLn2Gamma(i), &b.ln2_gamma);
            f(ParamKey::BlockLn2Beta(i), &b.ln2_beta);
        }
        f(ParamKey::FinalGamma, &self.final_gamma);
        f(ParamKey::FinalBeta, &self.final_beta);
        f(ParamKey::HeadW, &self.head.weight);
        f(ParamKey::HeadB, &self.head.bias);
    }

    /// Mutable access to a base parameter by key.
    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        Some(match key {
            ParamKey::PatchW => &mut self.patch_embed.weight,
            ParamKey::PatchB => &mut self.patch_embed.bias,
            ParamKey::CondW => &mut self.cond_embed.weight,
            ParamKey::CondB => &mut self.cond_embed.bias,
            ParamKey::PosEmbed => &mut self.pos_embed,
            ParamKey::BlockLn1Gamma(i) => &mut self.blocks[i].ln1_gamma,
            ParamKey::BlockLn1Beta(i) => &mut self.blocks[i].ln1_beta,
            ParamKey::BlockLn2Gamma(i) => &mut self.blocks[i].ln2_gamma,
            ParamKey::BlockLn2Beta(i) => &mut self.blocks[i].ln2_beta,
            ParamKey::PointW(p) => &mut self.blocks[p.block].layer_mut(p.role).weight,
            ParamKey::PointB(p) => &mut self.blocks[p.block].layer_mut(p.role).bias,
            ParamKey::FinalGamma => &mut self.final_gamma,
            ParamKey::FinalBeta => &mut self.final_beta,
            ParamKey::HeadW => &mut self.head.weight,
            ParamKey::HeadB => &mut self.head.bias,
            _ => return None,
        })
    }

    pub fn to_f64(&self) -> DiT<f64> {
        DiT {
            cfg: self.cfg.clone(),
            patch_embed: LinearLayer {
                weight: self.patch_embed.weight.to_f64(),
                bias: self.patch_embed.bias.to_f64(),
            },
            cond_embed: LinearLayer {
                weight: self.cond_embed.weight.to_f64(),
                bias: self.cond_embed.bias.to_f64(),
            },
            pos_embed: self.pos_embed.to_f64(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gamma: b.ln1_gamma.to_f64(),
                    ln1_beta: b.ln1_beta.to_f64(),
                    q: LinearLayer { weight: b.q.weight.to_f64(), bias: b.q.bias.to_f64() },
                    k: LinearLayer { weight: b.k.weight.to_f64(), bias: b.k.bias.to_f64() },
                    v: LinearLayer { weight: b.v.weight.to_f64(), bias: b.v.bias.to_f64() },
                    o: LinearLayer { weight: b.o.weight.to_f64(), bias: b.o.bias.to_f64() },
                    ln2_gamma: b.ln2_gamma.to_f64(),
                    ln2_beta: b.ln2_beta.to_f64(),
                    mlp_in: LinearLayer {
                        weight: b.mlp_in.weight.to_f64(),
                        bias: b.mlp_in.bias.to_f64(),
                    },
                    mlp_out: LinearLayer {
                        weight: b.mlp_out.weight.to_f64(),
                        bias: b.mlp_out.bias.to_f64(),
                    },
                })
                .collect(),
            final_gamma: self.final_gamma.to_f64(),
            final_beta: self.final_beta.to_f64(),
            head: LinearLayer { weight: self.head.weight.to_f64(), bias: self.head.bias.to_f64() },
        }
    }

    // ── Forward ──────────────────────────────────────────────────────

    fn leaf_for(
        &self,
        tape: &mut Tape<T>,
        t: &Tensor<T>,
        key: ParamKey,
        trainable: bool,
        bindings: &mut Bindings,
    ) -> Var {
        if trainable {
            let v = tape.param(t);
            bindings.bind(key, v);
            v
        } else {
            tape.constant(t)
        }
    }

    /// `x @ W + b`, plus the adapter contribution `lambda * (x A) B` (or
    /// `lambda * x dW` for a dense delta) when one is attached at `point`.
    #[allow(clippy::too_many_arguments)]
    fn apply_linear(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        point: PointId,
        layer: &LinearLayer<T>,
        adapters: Option<&AdapterSet<T>>,
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        let base_trainable = scope == TrainScope::Base;
        let w = self.leaf_for(tape, &layer.weight, ParamKey::PointW(point), base_trainable, bindings);
        let b = self.leaf_for(tape, &layer.bias, ParamKey::PointB(point), base_trainable, bindings);
        let mut out = tape.matmul(x, w)?;
        out = tape.add_row_broadcast(out, b)?;

        if let Some(set) = adapters {
            if let Some(lora) = set.point(point) {
                let lambda = set.lambda;
                let contrib = match &lora.weights {
                    LoraWeights::Factored { a, b } => {
                        let train = scope == TrainScope::Adapter;
                        let av = self.leaf_for(tape, a, ParamKey::LoraA(point), train, bindings);
                        let bv = self.leaf_for(tape, b, ParamKey::LoraB(point), train, bindings);
                        let xa = tape.matmul(x, av)?;
                        tape.matmul(xa, bv)?
                    }
                    LoraWeights::Dense { delta } => {
                        let dv = tape.constant(delta);
                        tape.matmul(x, dv)?
                    }
                };
                let scaled = tape.scale(contrib, lambda);
                out = tape.add(out, scaled)?;
            }
        }
        Ok(out)
    }

    fn layer_norm(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        keys: (ParamKey, ParamKey),
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        let train = scope == TrainScope::Base;
        let g = self.leaf_for(tape, gamma, keys.0, train, bindings);
        let b = self.leaf_for(tape, beta, keys.1, train, bindings);
        tape.layer_norm_rows(x, g, b, T::from_f64(LN_EPS))
    }

    /// Pre-norm attention sublayer with residual connection. Also returns
    /// the normalized input and the concatenated head outputs (the values
    /// each adapter role sees), for activation-level diagnostics.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attention_sublayer(
        &self,
        tape: &mut Tape<T>,
        block_idx: usize,
        h: Var,
        adapters: Option<&AdapterSet<T>>,
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<(Var, Var, Var)> {
        let block = &self.blocks[block_idx];
        let x = self.layer_norm(
            tape,
            h,
            &block.ln1_gamma,
            &block.ln1_beta,
            (ParamKey::BlockLn1Gamma(block_idx), ParamKey::BlockLn1Beta(block_idx)),
            scope,
            bindings,
        )?;
        let point = |role| PointId { block: block_idx, role };
        let q = self.apply_linear(tape, x, point(Role::Q), &block.q, adapters, scope, bindings)?;
        let k = self.apply_linear(tape, x, point(Role::K), &block.k, adapters, scope, bindings)?;
        let v = self.apply_linear(tape, x, point(Role::V), &block.v, adapters, scope, bindings)?;

        let dh = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let o = self.apply_linear(tape, cat, point(Role::O), &block.o, adapters, scope, bindings)?;
        let out = tape.add(h, o)?;
        Ok((out, x, cat))
    }

    /// Pre-norm MLP sublayer with residual connection. Also returns the
    /// normalized input and the activated hidden state.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn mlp_sublayer(
        &self,
        tape: &mut Tape<T>,
        block_idx: usize,
        h: Var,
        adapters: Option<&AdapterSet<T>>,
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<(Var, Var, Var)> {
        let block = &self.blocks[block_idx];
        let x = self.layer_norm(
            tape,
            h,
            &block.ln2_gamma,
            &block.ln2_beta,
            (ParamKey::BlockLn2Gamma(block_idx), ParamKey::BlockLn2Beta(block_idx)),
            scope,
            bindings,
        )?;
        let point = |role| PointId { block: block_idx, role };
        let hidden =
            self.apply_linear(tape, x, point(Role::MlpIn), &block.mlp_in, adapters, scope, bindings)?;
        let act = tape.gelu(hidden);
        let out =
            self.apply_linear(tape, act, point(Role::MlpOut), &block.mlp_out, adapters, scope, bindings)?;
        let res = tape.add(h, out)?;
        Ok((res, x, act))
    }

    /// One full block: attention then MLP. Returns the block output plus
    /// the per-role input activations.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_forward(
        &self,
        tape: &mut Tape<T>,
        block_idx: usize,
        h: Var,
        adapters: Option<&AdapterSet<T>>,
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<(Var, BlockProbes)> {
        let (h, ln1_out, attn_concat) =
            self.attention_sublayer(tape, block_idx, h, adapters, scope, bindings)?;
        let (h, ln2_out, mlp_hidden) =
            self.mlp_sublayer(tape, block_idx, h, adapters, scope, bindings)?;
        Ok((h, BlockProbes { ln1_out, attn_concat, ln2_out, mlp_hidden }))
    }

    /// Embed noisy frames and the condition frame into the token sequence:
    /// row 0 is the condition token, the rest are patch tokens with
    /// positional and timestep embeddings added.
    pub(crate) fn embed_tokens(
        &self,
        tape: &mut Tape<T>,
        noisy_frames: &Tensor<T>,
        cond_frame: &Tensor<T>,
        timestep: usize,
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let patches = patchify(noisy_frames, cfg)?;
        let n_patch = cfg.num_patch_tokens();
        // Rows after the zero condition slot.
        let patch_rows = Tensor::from_vec(
            vec![n_patch, cfg.patch_dim()],
            patches.data()[cfg.patch_dim()..].to_vec(),
        )?;
        let base_trainable = scope == TrainScope::Base;

        let px = tape.constant(&patch_rows);
        let pw = self.leaf_for(tape, &self.patch_embed.weight, ParamKey::PatchW, base_trainable, bindings);
        let pb = self.leaf_for(tape, &self.patch_embed.bias, ParamKey::PatchB, base_trainable, bindings);
        let emb = tape.matmul(px, pw)?;
        let emb = tape.add_row_broadcast(emb, pb)?;

        let cond_flat = cond_frame.reshape(vec![1, cfg.frame_size * cfg.frame_size])?;
        let cx = tape.constant(&cond_flat);
        let cw = self.leaf_for(tape, &self.cond_embed.weight, ParamKey::CondW, base_trainable, bindings);
        let cb = self.leaf_for(tape, &self.cond_embed.bias, ParamKey::CondB, base_trainable, bindings);
        let cond = tape.matmul(cx, cw)?;
        let cond = tape.add_row_broadcast(cond, cb)?;

        let h = tape.concat_rows(&[cond, emb])?;
        let pos = self.leaf_for(tape, &self.pos_embed, ParamKey::PosEmbed, base_trainable, bindings);
        let h = tape.add(h, pos)?;

        let temb = timestep_embedding::<T>(timestep, cfg.channels);
        let tv = tape.constant(&temb);
        tape.add_row_broadcast(h, tv)
    }

    /// Final norm plus linear head over the patch rows only.
    pub(crate) fn head_forward(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        scope: TrainScope,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        let normed = self.layer_norm(
            tape,
            h,
            &self.final_gamma,
            &self.final_beta,
            (ParamKey::FinalGamma, ParamKey::FinalBeta),
            scope,
            bindings,
        )?;
        let patch_rows = tape.slice_rows(normed, 1, self.cfg.num_patch_tokens())?;
        let base_trainable = scope == TrainScope::Base;
        let hw = self.leaf_for(tape, &self.head.weight, ParamKey::HeadW, base_trainable, bindings);
        let hb = self.leaf_for(tape, &self.head.bias, ParamKey::HeadB, base_trainable, bindings);
        let out = tape.matmul(patch_rows, hw)?;
        tape.add_row_broadcast(out, hb)
    }

    /// Build the noise prediction on a tape. Returns the prediction in patch
    /// layout (`num_patch_tokens x patch_dim`) plus the parameter bindings of
    /// the selected scope.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_eps_tape(
        &self,
        tape: &mut Tape<T>,
        noisy_frames: &Tensor<T>,
        cond_frame: &Tensor<T>,
        timestep: usize,
        adapters: Option<&AdapterSet<T>>,
        token: TokenInput<'_, T>,
        scope: TrainScope,
    ) -> Result<(Var, Bindings)> {
        if timestep >= self.cfg.diffusion_steps {
            return Err(LionError::Config(format!(
                "timestep {} outside [0, {})",
                timestep, self.cfg.diffusion_steps
            )));
        }
        if let Some(set) = adapters {
            set.validate_against(&self.cfg)?;
        }
        let mut bindings = Bindings::default();
        let mut h = self.embed_tokens(tape, noisy_frames, cond_frame, timestep, scope, &mut bindings)?;

        let has_token = !matches!(token, TokenInput::None);
        match token {
            TokenInput::None => {}
            TokenInput::Fixed(tok) => {
                if adapters.is_none() {
                    return Err(LionError::Config(
                        "scaling token requires a matching adapter set".into(),
                    ));
                }
                let e = tape.constant(tok.embedding());
                h = tape.concat_rows(&[h, e])?;
            }
            TokenInput::Train { embedder, s } => {
                if adapters.is_none() {
                    return Err(LionError::Config(
                        "scaling token requires a matching adapter set".into(),
                    ));
                }
                let e = embedder.token_on_tape(tape, s, scope == TrainScope::Adapter, &mut bindings)?;
                h = tape.concat_rows(&[h, e])?;
            }
        }

        for block_idx in 0..self.cfg.num_blocks {
            let (next, _) = self.block_forward(tape, block_idx, h, adapters, scope, &mut bindings)?;
            h = next;
        }
        if has_token {
            // The token row rides along through the blocks and is dropped here.
            h = tape.slice_rows(h, 0, self.cfg.seq_len())?;
        }
        let eps = self.head_forward(tape, h, scope, &mut bindings)?;
        Ok((eps, bindings))
    }

    /// Inference-only noise prediction, returned in frame layout.
    pub fn predict_eps(
        &self,
        noisy_frames: &Tensor<T>,
        cond_frame: &Tensor<T>,
        timestep: usize,
        adapters: Option<&AdapterSet<T>>,
        token: Option<&ScalingToken<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let token_input = match token {
            Some(t) => TokenInput::Fixed(t),
            None => TokenInput::None,
        };
        let (eps, _) = self.predict_eps_tape(
            &mut tape,
            noisy_frames,
            cond_frame,
            timestep,
            adapters,
            token_input,
            TrainScope::None,
        )?;
        let patches = tape.value_tensor(eps);
        unpatchify_rows(&patches, &self.cfg)
    }

    /// The embedded token sequence (condition token first), mainly for
    /// inspection and tests.
    pub fn tokenize(
        &self,
        noisy_frames: &Tensor<T>,
        cond_frame: &Tensor<T>,
        timestep: usize,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::default();
        let h = self.embed_tokens(
            &mut tape,
            noisy_frames,
            cond_frame,
            timestep,
            TrainScope::None,
            &mut bindings,
        )?;
        Ok(tape.value_tensor(h))
    }

    // ── Serialization ────────────────────────────────────────────────

    /// Write the checkpoint into a weight-file section named `model`.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut fb = FileBuilder::new();
        self.add_to_file(&mut fb);
        fb.write(path)
    }

    pub fn add_to_file(&self, fb: &mut FileBuilder) {
        fb.begin_section("model", serde_json::to_value(&self.cfg).expect("config serializes"));
        self.visit_params(|key, t| {
            fb.add_tensor(&param_name(key), t);
        });
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let wf = WeightFile::read(path)?;
        Self::from_file(&wf)
    }

    pub fn from_file(wf: &WeightFile) -> Result<Self> {
        let section = wf.section("model")?;
        let cfg: ModelConfig = serde_json::from_value(section.meta.clone())
            .map_err(|e| LionError::HeaderParse(format!("model config: {e}")))?;
        let mut model = DiT::new(cfg, 0)?;
        let mut err = None;
        let mut loads: Vec<(ParamKey, Tensor<T>)> = Vec::new();
        model.visit_params(|key, t| {
            if err.is_some() {
                return;
            }
            match section.tensor::<T>(&param_name(key)) {
                Ok(loaded) => {
                    if loaded.shape() != t.shape() {
                        err = Some(LionError::HeaderParse(format!(
                            "tensor {} has shape {:?}, expected {:?}",
                            param_name(key),
                            loaded.shape(),
                            t.shape()
                        )));
                    } else {
                        loads.push((key, loaded));
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (key, t) in loads {
            *model.param_mut(key).expect("base key") = t;
        }
        Ok(model)
    }
}

/// Stable tensor name for a parameter key, used in checkpoints.
pub fn param_name(key: ParamKey) -> String {
    match key {
        ParamKey::PatchW => "patch.w".into(),
        ParamKey::PatchB => "patch.b".into(),
        ParamKey::CondW => "cond.w".into(),
        ParamKey::CondB => "cond.b".into(),
        ParamKey::PosEmbed => "pos".into(),
        ParamKey::BlockLn1Gamma(i) => format!("blk{i}.ln1.g"),
        ParamKey::BlockLn1Beta(i) => format!("blk{i}.ln1.b"),
        ParamKey::BlockLn2Gamma(i) => format!("blk{i}.ln2.g"),
        ParamKey::BlockLn2Beta(i) => format!("blk{i}.ln2.b"),
        ParamKey::PointW(p) => format!("{p}.w"),
        ParamKey::PointB(p) => format!("{p}.b"),
        ParamKey::FinalGamma => "final.g".into(),
        ParamKey::FinalBeta => "final.b".into(),
        ParamKey::HeadW => "head.w".into(),
        ParamKey::HeadB => "head.b".into(),
        ParamKey::LoraA(p) => format!("{p}.lora_a"),
        ParamKey::LoraB(p) => format!("{p}.lora_b"),
        ParamKey::EmbedProj => "embed.proj".into(),
        ParamKey::EmbedBias => "embed.bias".into(),
    }
}

/// Sinusoidal embedding of a diffusion timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut data = vec![T::zero(); d];
    for j in 0..half {
        let freq = 1.0 / 10000f64.powf(j as f64 / half as f64);
        let angle = t as f64 * freq;
        data[j] = T::from_f64(angle.sin());
        data[half + j] = T::from_f64(angle.cos());
    }
    Tensor::from_vec(vec![d], data).expect("length matches")
}

// ── Patchify ─────────────────────────────────────────────────────────

/// Rearrange frames `[V, fs, fs]` into token rows `[seq_len, patch_dim]`.
///
/// Row 0 is a zero condition slot; row `1 + f*tpf + py*grid + px` holds
/// patch `(py, px)` of frame `f`, flattened in raster order. The mapping is
/// exact and invertible; [`unpatchify`] drops the condition slot and puts
/// every value back bit-for-bit.
pub fn patchify<T: Scalar>(frames: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let expect = [cfg.frames, cfg.frame_size, cfg.frame_size];
    if frames.shape() != expect {
        return Err(LionError::DimensionMismatch {
            ctx: "patchify",
            lhs: frames.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let (fs, ps, grid) = (cfg.frame_size, cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let mut out = Tensor::zeros(vec![cfg.seq_len(), pd]);
    let data = frames.data();
    let out_data = out.data_mut();
    for f in 0..cfg.frames {
        for py in 0..grid {
            for px in 0..grid {
                let row = 1 + f * grid * grid + py * grid + px;
                for iy in 0..ps {
                    let src = f * fs * fs + (py * ps + iy) * fs + px * ps;
                    let dst = row * pd + iy * ps;
                    out_data[dst..dst + ps].copy_from_slice(&data[src..src + ps]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]: token rows (with condition slot) back to frames.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let expect = [cfg.seq_len(), cfg.patch_dim()];
    if tokens.shape() != expect {
        return Err(LionError::DimensionMismatch {
            ctx: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let rows = Tensor::from_vec(
        vec![cfg.num_patch_tokens(), cfg.patch_dim()],
        tokens.data()[cfg.patch_dim()..].to_vec(),
    )?;
    unpatchify_rows(&rows, cfg)
}

/// Patch rows (no condition slot) back to frames `[V, fs, fs]`.
pub fn unpatchify_rows<T: Scalar>(rows: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let expect = [cfg.num_patch_tokens(), cfg.patch_dim()];
    if rows.shape() != expect {
        return Err(LionError::DimensionMismatch {
            ctx: "unpatchify_rows",
            lhs: rows.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let (fs, ps, grid) = (cfg.frame_size, cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let mut out = Tensor::zeros(vec![cfg.frames, fs, fs]);
    let out_data = out.data_mut();
    let data = rows.data();
    for f in 0..cfg.frames {
        for py in 0..grid {
            for px in 0..grid {
                let row = f * grid * grid + py * grid + px;
                for iy in 0..ps {
                    let dst = f * fs * fs + (py * ps + iy) * fs + px * ps;
                    let src = row * pd + iy * ps;
                    out_data[dst..dst + ps].copy_from_slice(&data[src..src + ps]);
                }
            }
        }
    }
    Ok(out)
}

// ── Full-model gradient verification ─────────────────────────────────

/// Max relative error between tape gradients and central finite differences
/// over every trainable parameter of a model built from `cfg`, in `f64`.
///
/// With `with_adapter` the check runs in adapter scope (low-rank pairs plus
/// a scaling-token embedder train); otherwise in base scope.
pub fn grad_check_model(cfg: &ModelConfig, with_adapter: bool, eps: f64, seed: u64) -> Result<f64> {
    use crate::adapter::init_adapter;
    use crate::scaling::ScalingEmbedder;

    cfg.validate()?;
    let model = DiT::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let noisy = Tensor::<f64>::randn(vec![cfg.frames, cfg.frame_size, cfg.frame_size], 1.0, &mut rng);
    let cond = Tensor::<f64>::randn(vec![cfg.frame_size, cfg.frame_size], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(vec![cfg.num_patch_tokens(), cfg.patch_dim()], 1.0, &mut rng);
    let timestep = cfg.diffusion_steps / 2;

    let adapters = if with_adapter {
        let mut set = init_adapter(cfg, 2, seed ^ 1)?;
        // Random B so adapter gradients are generic, not at the zero init.
        for point in cfg.points() {
            let lora = set.point_mut(point).unwrap();
            if let LoraWeights::Factored { b, .. } = &mut lora.weights {
                *b = Tensor::randn(b.shape().to_vec(), 0.05, &mut rng);
            }
        }
        Some(set)
    } else {
        None
    };
    let embedder = if with_adapter {
        Some(ScalingEmbedder::<f64>::new("check", 4, cfg.channels, 0.1, seed ^ 2)?)
    } else {
        None
    };
    let s_value = 0.62;
    let scope = if with_adapter { TrainScope::Adapter } else { TrainScope::Base };

    let build = |model: &DiT<f64>,
                 adapters: Option<&AdapterSet<f64>>,
                 embedder: Option<&ScalingEmbedder<f64>>,
                 tape: &mut Tape<f64>|
     -> Result<(Var, Bindings)> {
        let token = match embedder {
            Some(e) => TokenInput::Train { embedder: e, s: s_value },
            None => TokenInput::None,
        };
        let (eps_var, bindings) =
            model.predict_eps_tape(tape, &noisy, &cond, timestep, adapters, token, scope)?;
        let tgt = tape.constant(&target);
        let loss = tape.mse(eps_var, tgt)?;
        Ok((loss, bindings))
    };

    // Analytic gradients, one tape.
    let mut tape = Tape::new();
    let (loss, bindings) = build(&model, adapters.as_ref(), embedder.as_ref(), &mut tape)?;
    let grads = tape.backward(loss)?;

    let eval = |model: &DiT<f64>,
                adapters: Option<&AdapterSet<f64>>,
                embedder: Option<&ScalingEmbedder<f64>>|
     -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = build(model, adapters, embedder, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut max_err = 0.0f64;
    for (key, var) in &bindings.entries {
        let analytic = grads.grad(*var).expect("trainable gradient").to_vec();
        let numel = analytic.len();
        for i in 0..numel {
            let mut m2 = model.clone();
            let mut a2 = adapters.clone();
            let mut e2 = embedder.clone();
            {
                let t = mutable_param(&mut m2, a2.as_mut(), e2.as_mut(), *key);
                let old = t.data()[i];
                t.data_mut()[i] = old + eps;
            }
            let up = eval(&m2, a2.as_ref(), e2.as_ref())?;
            {
                let t = mutable_param(&mut m2, a2.as_mut(), e2.as_mut(), *key);
                let old = t.data()[i];
                t.data_mut()[i] = old - 2.0 * eps;
            }
            let down = eval(&m2, a2.as_ref(), e2.as_ref())?;
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Route a parameter key to whichever of model, adapter set, or embedder
/// owns it.
pub fn mutable_param<'a, T: Scalar>(
    model: &'a mut DiT<T>,
    adapters: Option<&'a mut AdapterSet<T>>,
    embedder: Option<&'a mut ScalingEmbedder<T>>,
    key: ParamKey,
) -> &'a mut Tensor<T> {
    match key {
        ParamKey::LoraA(p) | ParamKey::LoraB(p) => {
            let set = adapters.expect("adapter params need an adapter set");
            let lora = set.point_mut(p).expect("bound point exists");
            match (&mut lora.weights, key) {
                (LoraWeights::Factored { a, .. }, ParamKey::LoraA(_)) => a,
                (LoraWeights::Factored { b, .. }, ParamKey::LoraB(_)) => b,
                _ => panic!("dense adapters have no trainable factors"),
            }
        }
        ParamKey::EmbedProj => &mut embedder.expect("embedder param").proj,
        ParamKey::EmbedBias => &mut embedder.expect("embedder param").bias,
        other => model.param_mut(other).expect("base param"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_adapter;
    use approx::assert_relative_eq;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            channels: 16,
            heads: 2,
            frames: 2,
            frame_size: 8,
            patch_size: 4,
            diffusion_steps: 50,
        }
    }

    #[test]
    fn patchify_roundtrip_is_bit_identical() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = Tensor::<f32>::randn(vec![2, 8, 8], 1.0, &mut rng);
        let tokens = patchify(&frames, &cfg).unwrap();
        assert_eq!(tokens.shape(), &[2 * 4 + 1, 16]);
        // condition slot is zeroed
        assert!(tokens.data()[..16].iter().all(|&v| v == 0.0));
        let back = unpatchify(&tokens, &cfg).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(frames.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn patchify_single_patch_frame() {
        let cfg = ModelConfig {
            num_blocks: 1,
            channels: 16,
            heads: 2,
            frames: 1,
            frame_size: 4,
            patch_size: 4,
            diffusion_steps: 10,
        };
        let frames = Tensor::<f32>::ones(vec![1, 4, 4]);
        let tokens = patchify(&frames, &cfg).unwrap();
        // one patch token plus the condition row
        assert_eq!(tokens.shape(), &[2, 16]);
    }

    #[test]
    fn patchify_rejects_wrong_dims() {
        let cfg = tiny_cfg();
        let frames = Tensor::<f32>::zeros(vec![3, 8, 8]);
        assert!(patchify(&frames, &cfg).is_err());
    }

    #[test]
    fn forward_shapes_and_base_equality_with_zero_adapter() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = Tensor::<f32>::randn(vec![2, 8, 8], 1.0, &mut rng);
        let cond = Tensor::<f32>::randn(vec![8, 8], 1.0, &mut rng);

        let base = model.predict_eps(&noisy, &cond, 3, None, None).unwrap();
        assert_eq!(base.shape(), &[2, 8, 8]);

        // Fresh adapter has B = 0, so the delta is exactly zero.
        let set = init_adapter(&cfg, 4, 99).unwrap();
        let with = model.predict_eps(&noisy, &cond, 3, Some(&set), None).unwrap();
        for (a, b) in base.data().iter().zip(with.data().iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn lambda_zero_matches_detached_run() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = Tensor::<f32>::randn(vec![2, 8, 8], 1.0, &mut rng);
        let cond = Tensor::<f32>::randn(vec![8, 8], 1.0, &mut rng);

        let mut set = init_adapter(&cfg, 4, 99).unwrap();
        for point in cfg.points() {
            if let LoraWeights::Factored { b, .. } = &mut set.point_mut(point).unwrap().weights {
                *b = Tensor::randn(b.shape().to_vec(), 0.1, &mut rng);
            }
        }
        set.lambda = 0.0;
        let with = model.predict_eps(&noisy, &cond, 3, Some(&set), None).unwrap();
        let without = model.predict_eps(&noisy, &cond, 3, None, None).unwrap();
        for (a, b) in with.data().iter().zip(without.data().iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn tokenize_puts_condition_first_and_matches_seq_len() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 7).unwrap();
        let noisy = Tensor::<f32>::zeros(vec![2, 8, 8]);
        let cond = Tensor::<f32>::ones(vec![8, 8]);
        let seq = model.tokenize(&noisy, &cond, 0).unwrap();
        assert_eq!(seq.shape(), &[cfg.seq_len(), cfg.channels]);
    }

    #[test]
    fn unknown_timestep_is_a_config_error() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 7).unwrap();
        let noisy = Tensor::<f32>::zeros(vec![2, 8, 8]);
        let cond = Tensor::<f32>::zeros(vec![8, 8]);
        assert!(matches!(
            model.predict_eps(&noisy, &cond, 50, None, None),
            Err(LionError::Config(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_identity() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lw");
        model.save(&path).unwrap();
        let back = DiT::<f32>::load(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        let mut same = true;
        model.visit_params(|key, t| {
            let mut b2 = back.clone();
            let other = b2.param_mut(key).unwrap().clone();
            if other.data().iter().zip(t.data().iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                same = false;
            }
        });
        assert!(same);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            num_blocks: 2,
            channels: 8,
            heads: 2,
            frames: 1,
            frame_size: 8,
            patch_size: 4,
            diffusion_steps: 20,
        };
        let err = grad_check_model(&cfg, false, 1e-5, 5).unwrap();
        assert!(err < 1e-5, "base scope err = {err}");
        let err = grad_check_model(&cfg, true, 1e-5, 5).unwrap();
        assert!(err < 1e-5, "adapter scope err = {err}");
    }
}
