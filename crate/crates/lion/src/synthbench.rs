//! Synthetic scenes, motion clips, training loops, and the evaluation
//! experiments built on them.
//!
//! Scenes are sparse Gaussian blobs in `[-1, 1]^2`. Motion primitives move
//! the whole point set (camera analogs) or only the object-flagged points,
//! one fixed step per frame, and clips rasterize to small grayscale frames.
//! The base model pre-trains on static clips so adapters encode motion
//! deltas rather than scene statistics.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterSet};
use crate::diagnostics::{
    centroid_path, mean_displacement_direction, motion_magnitude, pearson, trajectory_smoothness,
    ProbeInput,
};
use crate::error::{LionError, Result};
use crate::model::{patchify, DiT, ModelConfig, TokenInput, TrainScope};
use crate::multifuse::FusedContext;
use crate::optim::Adam;
use crate::sampler::{add_noise, ddim_sample, Conditioning, NoiseSchedule};
use crate::scaling::{ClipSampler, ScalingEmbedder};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::weights::{crc32_of_file, FileBuilder, WeightFile};

// ── Scenes ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScenePoint {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
    pub is_object: bool,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub points: Vec<ScenePoint>,
    pub seed: u64,
}

/// Deterministic scene: points inside a margin of the unit square, at least
/// one object point.
pub fn generate_scene(seed: u64, num_points: usize) -> Result<Scene> {
    if num_points == 0 {
        return Err(LionError::Config("scene needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..num_points)
        .map(|i| ScenePoint {
            x: rng.random_range(-0.6..0.6),
            y: rng.random_range(-0.6..0.6),
            intensity: rng.random_range(0.5..1.0),
            is_object: i == 0 || rng.random_bool(0.25),
        })
        .collect();
    Ok(Scene { points, seed })
}

// ── Motion primitives ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    OffsetH,
    OffsetV,
    ForwardBack,
    Orbit,
    ObjectMotion,
}

pub const PRIMITIVE_NAMES: [&str; 5] =
    ["offset_h", "offset_v", "forward_back", "orbit", "object_motion"];

impl PrimitiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveKind::OffsetH => "offset_h",
            PrimitiveKind::OffsetV => "offset_v",
            PrimitiveKind::ForwardBack => "forward_back",
            PrimitiveKind::Orbit => "orbit",
            PrimitiveKind::ObjectMotion => "object_motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "offset_h" => PrimitiveKind::OffsetH,
            "offset_v" => PrimitiveKind::OffsetV,
            "forward_back" => PrimitiveKind::ForwardBack,
            "orbit" => PrimitiveKind::Orbit,
            "object_motion" => PrimitiveKind::ObjectMotion,
            other => {
                return Err(LionError::Config(format!(
                    "unknown primitive {other:?}; valid kinds: {}, static",
                    PRIMITIVE_NAMES.join(", ")
                )))
            }
        })
    }
}

/// A primitive plus its per-frame step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub kind: PrimitiveKind,
    pub step: f64,
}

impl MotionPrimitive {
    /// Canonical step sizes, sized so a full-length clip stays in frame.
    pub fn default_for(kind: PrimitiveKind) -> Self {
        let step = match kind {
            PrimitiveKind::OffsetH | PrimitiveKind::OffsetV => 0.004,
            PrimitiveKind::ForwardBack => 0.003,
            PrimitiveKind::Orbit => 0.008,
            PrimitiveKind::ObjectMotion => 0.004,
        };
        MotionPrimitive { kind, step }
    }

    fn transform(&self, p: &ScenePoint, frame: usize) -> (f64, f64) {
        let t = frame as f64 * self.step;
        match self.kind {
            PrimitiveKind::OffsetH => (p.x + t, p.y),
            PrimitiveKind::OffsetV => (p.x, p.y + t),
            PrimitiveKind::ForwardBack => (p.x * (1.0 + t), p.y * (1.0 + t)),
            PrimitiveKind::Orbit => {
                let (s, c) = t.sin_cos();
                (p.x * c - p.y * s, p.x * s + p.y * c)
            }
            PrimitiveKind::ObjectMotion => {
                if p.is_object {
                    (p.x + t, p.y)
                } else {
                    (p.x, p.y)
                }
            }
        }
    }
}

// ── Rendering ────────────────────────────────────────────────────────

/// Provenance carried with every rendered clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_seed: u64,
    pub kind: String,
    pub step: f64,
    pub clip_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    /// Point-frames that left the unit square and were culled.
    pub clipped_points: usize,
}

/// Rendered frames plus where they came from.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Tensor<f32>,
    pub provenance: Provenance,
}

impl FrameSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_size(&self) -> usize {
        self.frames.shape()[1]
    }

    /// One frame as a `[fs, fs]` tensor.
    pub fn frame(&self, idx: usize) -> Tensor<f32> {
        let fs = self.frame_size();
        Tensor::from_vec(
            vec![fs, fs],
            self.frames.data()[idx * fs * fs..(idx + 1) * fs * fs].to_vec(),
        )
        .expect("frame slice")
    }
}

const SPLAT_SIGMA: f64 = 1.5;

fn splat(frame: &mut [f32], fs: usize, x: f64, y: f64, intensity: f64) {
    // Scene [-1,1] to pixel-center coordinates.
    let px = (x + 1.0) / 2.0 * fs as f64 - 0.5;
    let py = (y + 1.0) / 2.0 * fs as f64 - 0.5;
    // Truncation box symmetric about the continuous center, so the
    // rasterized centroid stays unbiased.
    let radius = 3.0 * SPLAT_SIGMA;
    let x_lo = ((px - radius).ceil() as isize).max(0);
    let x_hi = ((px + radius).floor() as isize).min(fs as isize - 1);
    let y_lo = ((py - radius).ceil() as isize).max(0);
    let y_hi = ((py + radius).floor() as isize).min(fs as isize - 1);
    for iy in y_lo..=y_hi {
        for ix in x_lo..=x_hi {
            let dx = ix as f64 - px;
            let dy = iy as f64 - py;
            let v = intensity * (-0.5 * (dx * dx + dy * dy) / (SPLAT_SIGMA * SPLAT_SIGMA)).exp();
            frame[iy as usize * fs + ix as usize] += v as f32;
        }
    }
}

/// Render an `n`-frame clip of a scene under a primitive. Deterministic;
/// points that leave `[-1, 1]^2` are culled and counted.
pub fn render_clip(
    scene: &Scene,
    primitive: MotionPrimitive,
    n: usize,
    frame_size: usize,
) -> Result<FrameSequence> {
    if n < 2 {
        return Err(LionError::Config("clip needs at least 2 frames".into()));
    }
    let fs = frame_size;
    let mut frames = Tensor::<f32>::zeros(vec![n, fs, fs]);
    let mut clipped = 0usize;
    for f in 0..n {
        let frame = &mut frames.data_mut()[f * fs * fs..(f + 1) * fs * fs];
        for p in &scene.points {
            let (x, y) = primitive.transform(p, f);
            if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
                clipped += 1;
                continue;
            }
            splat(frame, fs, x, y, p.intensity);
        }
    }
    for v in frames.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(FrameSequence {
        frames,
        provenance: Provenance {
            scene_seed: scene.seed,
            kind: primitive.kind.as_str().to_string(),
            step: primitive.step,
            clip_len: n,
            s: None,
            clipped_points: clipped,
        },
    })
}

/// Render a static clip: every frame is the scene at rest.
pub fn render_static_clip(scene: &Scene, n: usize, frame_size: usize) -> Result<FrameSequence> {
    let mut seq = render_clip(
        scene,
        MotionPrimitive { kind: PrimitiveKind::OffsetH, step: 0.0 },
        n,
        frame_size,
    )?;
    seq.provenance.kind = "static".to_string();
    Ok(seq)
}

/// Select the training pair for amplitude `s`: the `V` frames drawn from the
/// first `ceil(N s)` frames of the full clip.
pub fn make_training_pair(
    clip: &FrameSequence,
    sampler: &ClipSampler,
    s: f64,
) -> Result<(FrameSequence, f64)> {
    if clip.num_frames() != sampler.clip_length {
        return Err(LionError::Config(format!(
            "clip has {} frames, sampler expects {}",
            clip.num_frames(),
            sampler.clip_length
        )));
    }
    let indices = sampler.sample_frame_indices(s)?;
    let fs = clip.frame_size();
    let mut data = Vec::with_capacity(indices.len() * fs * fs);
    for &i in &indices {
        data.extend_from_slice(&clip.frames.data()[i * fs * fs..(i + 1) * fs * fs]);
    }
    let frames = Tensor::from_vec(vec![indices.len(), fs, fs], data)?;
    let mut prov = clip.provenance.clone();
    prov.s = Some(s);
    Ok((FrameSequence { frames, provenance: prov }, s))
}

// ── Clip store ───────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub crc32: u32,
    pub scene_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub step: f64,
    pub clip_len: usize,
    pub frame_size: usize,
    pub clips: Vec<ManifestEntry>,
}

pub fn write_clip(path: &Path, seq: &FrameSequence) -> Result<()> {
    let mut fb = FileBuilder::new();
    fb.begin_section("clip", serde_json::to_value(&seq.provenance)?);
    fb.add_tensor("frames", &seq.frames);
    fb.write(path)
}

pub fn read_clip(path: &Path) -> Result<FrameSequence> {
    let wf = WeightFile::read(path)?;
    let section = wf.section("clip")?;
    let provenance: Provenance = serde_json::from_value(section.meta.clone())
        .map_err(|e| LionError::HeaderParse(format!("clip meta: {e}")))?;
    Ok(FrameSequence { frames: section.tensor("frames")?, provenance })
}

/// Write a clip directory plus `manifest.json` with per-file checksums.
pub fn write_dataset(dir: &Path, clips: &[FrameSequence]) -> Result<Manifest> {
    if clips.is_empty() {
        return Err(LionError::Config("empty dataset".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let file = format!("clip_{i:04}.lw");
        let path = dir.join(&file);
        write_clip(&path, clip)?;
        entries.push(ManifestEntry {
            file,
            crc32: crc32_of_file(&path)?,
            scene_seed: clip.provenance.scene_seed,
        });
    }
    let manifest = Manifest {
        version: 1,
        kind: clips[0].provenance.kind.clone(),
        step: clips[0].provenance.step,
        clip_len: clips[0].provenance.clip_len,
        frame_size: clips[0].frame_size(),
        clips: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory, verifying every checksum against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<FrameSequence>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    if manifest.version != 1 {
        return Err(LionError::Config(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let path = dir.join(&entry.file);
        let crc = crc32_of_file(&path)?;
        if crc != entry.crc32 {
            return Err(LionError::ChecksumMismatch { stored: entry.crc32, computed: crc });
        }
        clips.push(read_clip(&path)?);
    }
    Ok((manifest, clips))
}

// ── Dataset builders ─────────────────────────────────────────────────

pub const DEFAULT_SCENE_POINTS: usize = 4;

/// Deterministic per-scene seed derivation.
pub fn scene_seed_for(base: u64, idx: usize) -> u64 {
    base.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(idx as u64)
}

/// Static clips (model-length) for base pre-training, parallel over scenes.
pub fn build_static_dataset(
    cfg: &ModelConfig,
    scenes: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<FrameSequence>> {
    (0..scenes)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(scene_seed_for(seed, i), points)?;
            render_static_clip(&scene, cfg.frames, cfg.frame_size)
        })
        .collect()
}

/// Full-length motion clips for adapter training, parallel over scenes.
pub fn build_motion_dataset(
    frame_size: usize,
    primitive: MotionPrimitive,
    scenes: usize,
    clip_len: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<FrameSequence>> {
    (0..scenes)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(scene_seed_for(seed, i), points)?;
            render_clip(&scene, primitive, clip_len, frame_size)
        })
        .collect()
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainArm {
    /// Amplitude enters as a scaling token (the mechanism under test).
    ScalingToken,
    /// Amplitude enters as the adapter multiplier `lambda = S` (baseline).
    AdapterScale,
}

impl TrainArm {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "scaling_token" => TrainArm::ScalingToken,
            "adapter_scale" => TrainArm::AdapterScale,
            other => {
                return Err(LionError::Config(format!(
                    "unknown arm {other:?}; valid arms: scaling_token, adapter_scale"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainArm::ScalingToken => "scaling_token",
            TrainArm::AdapterScale => "adapter_scale",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
    pub arm: TrainArm,
    pub freq_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            learning_rate: 5e-4,
            batch_size: 4,
            rank: 8,
            seed: 0,
            arm: TrainArm::ScalingToken,
            freq_count: crate::scaling::DEFAULT_FREQ_COUNT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.rank == 0 || self.freq_count == 0
        {
            return Err(LionError::Config(
                "learning rate, batch size, rank, and freq count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss curve entry per optimizer step.
pub type LossCurve = Vec<(usize, f64)>;

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Splitmix-style seed derivation for (step, lane) sample streams.
pub fn mix_seed(seed: u64, step: usize, lane: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ ((lane as u64) << 32);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct DivergenceWatch {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceWatch {
    fn new() -> Self {
        DivergenceWatch { initial: None, consecutive: 0 }
    }

    fn observe(&mut self, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.consecutive += 1;
            if self.consecutive >= DIVERGENCE_PATIENCE {
                return Err(LionError::TrainingDiverged {
                    loss,
                    initial,
                    steps: self.consecutive,
                });
            }
        } else {
            self.consecutive = 0;
        }
        Ok(())
    }
}

/// Epsilon-prediction target in patch layout for a clean clip and noise.
fn patch_target(eps: &Tensor<f32>, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    let tokens = patchify(eps, cfg)?;
    Tensor::from_vec(
        vec![cfg.num_patch_tokens(), cfg.patch_dim()],
        tokens.data()[cfg.patch_dim()..].to_vec(),
    )
}

/// Pre-train the base model on static clips with the epsilon objective.
/// Returns the loss curve; the model is updated in place.
pub fn pretrain_base(
    model: &mut DiT<f32>,
    clips: &[FrameSequence],
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LossCurve> {
    if clips.is_empty() {
        return Err(LionError::Config("no clips to pre-train on".into()));
    }
    let cfg = model.cfg.clone();
    for c in clips {
        if c.num_frames() != cfg.frames || c.frame_size() != cfg.frame_size {
            return Err(LionError::Config(format!(
                "clip geometry {}x{} does not match model {}x{}",
                c.num_frames(),
                c.frame_size(),
                cfg.frames,
                cfg.frame_size
            )));
        }
    }
    let schedule = NoiseSchedule::linear(cfg.diffusion_steps);
    let mut opt = Adam::new(learning_rate as f32);
    let mut curve = Vec::with_capacity(steps);
    let mut watch = DivergenceWatch::new();

    for step in 0..steps {
        // Per-sample forward/backward on private tapes, order-stable.
        let results: Vec<(f64, Vec<(crate::model::ParamKey, Vec<f32>)>)> = (0..batch_size)
            .into_par_iter()
            .map(|lane| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step, lane));
                let clip = &clips[rng.random_range(0..clips.len())];
                let t = rng.random_range(0..cfg.diffusion_steps);
                let eps = Tensor::<f32>::randn(
                    vec![cfg.frames, cfg.frame_size, cfg.frame_size],
                    1.0,
                    &mut rng,
                );
                let x_t = add_noise(&clip.frames, &eps, schedule.alpha_bar(t))?;
                let cond = clip.frame(0);
                let target = patch_target(&eps, &cfg)?;

                let mut tape = Tape::new();
                let (pred, bindings) = model.predict_eps_tape(
                    &mut tape,
                    &x_t,
                    &cond,
                    t,
                    None,
                    TokenInput::None,
                    TrainScope::Base,
                )?;
                let tv = tape.constant(&target);
                let loss = tape.mse(pred, tv)?;
                let loss_val = tape.scalar(loss) as f64;
                let grads = tape.backward(loss)?;
                let collected = bindings
                    .entries
                    .iter()
                    .map(|(key, var)| (*key, grads.grad(*var).expect("param grad").to_vec()))
                    .collect();
                Ok((loss_val, collected))
            })
            .collect::<Result<_>>()?;

        let mean_loss = results.iter().map(|(l, _)| *l).sum::<f64>() / batch_size as f64;
        curve.push((step, mean_loss));
        watch.observe(mean_loss)?;

        let summed = sum_gradients(&results, batch_size);
        opt.begin_step();
        for (key, grad) in summed {
            let param = model.param_mut(key).expect("base param");
            opt.update(key, param, &grad);
        }
    }
    Ok(curve)
}

fn sum_gradients(
    results: &[(f64, Vec<(crate::model::ParamKey, Vec<f32>)>)],
    batch_size: usize,
) -> Vec<(crate::model::ParamKey, Vec<f32>)> {
    let scale = 1.0 / batch_size as f32;
    let mut summed: Vec<(crate::model::ParamKey, Vec<f32>)> = results[0]
        .1
        .iter()
        .map(|(k, g)| (*k, g.clone()))
        .collect();
    for (_, grads) in results.iter().skip(1) {
        for ((_, acc), (_, g)) in summed.iter_mut().zip(grads.iter()) {
            for (a, b) in acc.iter_mut().zip(g.iter()) {
                *a += *b;
            }
        }
    }
    for (_, g) in summed.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    summed
}

/// Adapter-scope parameters live in the set or the embedder, never the model.
fn adapter_param_mut<'a>(
    adapters: &'a mut AdapterSet<f32>,
    embedder: Option<&'a mut ScalingEmbedder<f32>>,
    key: crate::model::ParamKey,
) -> &'a mut Tensor<f32> {
    use crate::adapter::LoraWeights;
    use crate::model::ParamKey;
    match key {
        ParamKey::LoraA(p) | ParamKey::LoraB(p) => {
            let lora = adapters.point_mut(p).expect("bound point");
            match (&mut lora.weights, key) {
                (LoraWeights::Factored { a, .. }, ParamKey::LoraA(_)) => a,
                (LoraWeights::Factored { b, .. }, ParamKey::LoraB(_)) => b,
                _ => unreachable!("dense adapters are not trainable"),
            }
        }
        ParamKey::EmbedProj => &mut embedder.expect("embedder param").proj,
        ParamKey::EmbedBias => &mut embedder.expect("embedder param").bias,
        other => unreachable!("base param {other:?} bound in adapter scope"),
    }
}

/// Train one adapter on full-length motion clips. Base weights are frozen;
/// only the low-rank pairs (and, in the scaling-token arm, the embedder
/// projection) receive updates. Deterministic given the config seed.
pub fn train_lora(
    model: &DiT<f32>,
    name: &str,
    clips: &[FrameSequence],
    sampler: &ClipSampler,
    config: &TrainConfig,
) -> Result<(AdapterSet<f32>, Option<ScalingEmbedder<f32>>, LossCurve)> {
    config.validate()?;
    if clips.is_empty() {
        return Err(LionError::Config("no clips to train on".into()));
    }
    if sampler.frames != model.cfg.frames {
        return Err(LionError::Config(format!(
            "sampler draws {} frames, model expects {}",
            sampler.frames, model.cfg.frames
        )));
    }
    let cfg = model.cfg.clone();
    let schedule = NoiseSchedule::linear(cfg.diffusion_steps);

    let mut adapters = init_adapter::<f32>(&cfg, config.rank, config.seed)?;
    adapters.name = name.to_string();
    let mut embedder = match config.arm {
        TrainArm::ScalingToken => Some(ScalingEmbedder::<f32>::new(
            name,
            config.freq_count,
            cfg.channels,
            sampler.s_min(),
            config.seed ^ 0x5ca1ab1e,
        )?),
        TrainArm::AdapterScale => None,
    };

    let mut opt = Adam::new(config.learning_rate as f32);
    let mut curve = Vec::with_capacity(config.steps);
    let mut watch = DivergenceWatch::new();
    let s_min = sampler.s_min();

    for step in 0..config.steps {
        let adapters_ref = &adapters;
        let embedder_ref = embedder.as_ref();
        let results: Vec<(f64, Vec<(crate::model::ParamKey, Vec<f32>)>)> = (0..config.batch_size)
            .into_par_iter()
            .map(|lane| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, step, lane));
                let clip = &clips[rng.random_range(0..clips.len())];
                let s = rng.random_range(s_min..=1.0);
                let (pair, _) = make_training_pair(clip, sampler, s)?;
                let t = rng.random_range(0..cfg.diffusion_steps);
                let eps = Tensor::<f32>::randn(
                    vec![cfg.frames, cfg.frame_size, cfg.frame_size],
                    1.0,
                    &mut rng,
                );
                let x_t = add_noise(&pair.frames, &eps, schedule.alpha_bar(t))?;
                let cond = pair.frame(0);
                let target = patch_target(&eps, &cfg)?;

                let mut tape = Tape::new();
                let (pred, bindings) = match config.arm {
                    TrainArm::ScalingToken => model.predict_eps_tape(
                        &mut tape,
                        &x_t,
                        &cond,
                        t,
                        Some(adapters_ref),
                        TokenInput::Train { embedder: embedder_ref.expect("token arm"), s },
                        TrainScope::Adapter,
                    )?,
                    TrainArm::AdapterScale => {
                        let mut scaled = adapters_ref.clone();
                        scaled.lambda = s as f32;
                        model.predict_eps_tape(
                            &mut tape,
                            &x_t,
                            &cond,
                            t,
                            Some(&scaled),
                            TokenInput::None,
                            TrainScope::Adapter,
                        )?
                    }
                };
                let tv = tape.constant(&target);
                let loss = tape.mse(pred, tv)?;
                let loss_val = tape.scalar(loss) as f64;
                let grads = tape.backward(loss)?;
                let collected = bindings
                    .entries
                    .iter()
                    .map(|(key, var)| (*key, grads.grad(*var).expect("param grad").to_vec()))
                    .collect();
                Ok((loss_val, collected))
            })
            .collect::<Result<_>>()?;

        let mean_loss = results.iter().map(|(l, _)| *l).sum::<f64>() / config.batch_size as f64;
        curve.push((step, mean_loss));
        watch.observe(mean_loss)?;

        let summed = sum_gradients(&results, config.batch_size);
        opt.begin_step();
        for (key, grad) in summed {
            let param = adapter_param_mut(&mut adapters, embedder.as_mut(), key);
            opt.update(key, param, &grad);
        }
    }
    Ok((adapters, embedder, curve))
}

// ── Probe batches ────────────────────────────────────────────────────

/// Noised held-out static clips for activation diagnostics.
pub fn build_probe_batch(
    cfg: &ModelConfig,
    count: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<ProbeInput<f32>>> {
    let schedule = NoiseSchedule::linear(cfg.diffusion_steps);
    (0..count)
        .map(|i| {
            let scene = generate_scene(scene_seed_for(seed ^ 0x0b5e55ed, i), points)?;
            let clip = render_static_clip(&scene, cfg.frames, cfg.frame_size)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i, 0));
            let t = rng.random_range(0..cfg.diffusion_steps);
            let eps = Tensor::<f32>::randn(
                vec![cfg.frames, cfg.frame_size, cfg.frame_size],
                1.0,
                &mut rng,
            );
            let noisy = add_noise(&clip.frames, &eps, schedule.alpha_bar(t))?;
            Ok(ProbeInput { noisy, cond: clip.frame(0), timestep: t })
        })
        .collect()
}

// ── Evaluation experiments ───────────────────────────────────────────

/// Per-amplitude measurement plus the summary correlation.
#[derive(Debug, Clone)]
pub struct LinearityReport {
    pub arm: TrainArm,
    /// `(s, mean motion magnitude, samples used)`
    pub rows: Vec<(f64, f64, usize)>,
    pub excluded: usize,
    pub pearson_r: f64,
}

#[derive(Debug, Serialize)]
struct LinearityCsvRow {
    arm: String,
    kind: String,
    s: String,
    value: f64,
}

impl LinearityReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.serialize_into(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn append_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        self.serialize_into(w)
    }

    fn serialize_into<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (s, mag, _) in &self.rows {
            w.serialize(LinearityCsvRow {
                arm: self.arm.as_str().to_string(),
                kind: "magnitude".to_string(),
                s: format!("{s}"),
                value: *mag,
            })?;
        }
        w.serialize(LinearityCsvRow {
            arm: self.arm.as_str().to_string(),
            kind: "pearson_r".to_string(),
            s: String::new(),
            value: self.pearson_r,
        })?;
        Ok(())
    }
}

pub const DEFAULT_DDIM_STEPS: usize = 50;

/// Sweep the amplitude grid, generate with the adapter under the chosen arm,
/// measure centroid displacement, and correlate against the grid.
#[allow(clippy::too_many_arguments)]
pub fn eval_linearity(
    model: &DiT<f32>,
    adapters: &AdapterSet<f32>,
    embedder: Option<&ScalingEmbedder<f32>>,
    arm: TrainArm,
    s_grid: &[f64],
    scenes_per_s: usize,
    ddim_steps: usize,
    seed: u64,
) -> Result<LinearityReport> {
    if s_grid.len() < 5 {
        return Err(LionError::Eval(format!(
            "amplitude grid needs at least 5 points, got {}",
            s_grid.len()
        )));
    }
    if arm == TrainArm::ScalingToken && embedder.is_none() {
        return Err(LionError::Eval("scaling-token arm needs an embedder".into()));
    }
    let mut rows = Vec::with_capacity(s_grid.len());
    let mut excluded = 0usize;
    for (si, &s) in s_grid.iter().enumerate() {
        let mut mags = Vec::with_capacity(scenes_per_s);
        for e in 0..scenes_per_s {
            let scene = generate_scene(scene_seed_for(seed ^ 0xeea1_0000, e), DEFAULT_SCENE_POINTS)?;
            let cond_clip = render_static_clip(&scene, model.cfg.frames, model.cfg.frame_size)?;
            let cond = cond_clip.frame(0);
            let gen_seed = mix_seed(seed, si, e);
            let frames = match arm {
                TrainArm::ScalingToken => {
                    let token = embedder.expect("checked").make_scaling_token(s)?;
                    ddim_sample(
                        model,
                        &cond,
                        ddim_steps,
                        &Conditioning::Single { adapters, token: Some(&token) },
                        gen_seed,
                    )?
                }
                TrainArm::AdapterScale => {
                    let mut scaled = adapters.clone();
                    scaled.lambda = s as f32;
                    ddim_sample(
                        model,
                        &cond,
                        ddim_steps,
                        &Conditioning::Single { adapters: &scaled, token: None },
                        gen_seed,
                    )?
                }
            };
            match motion_magnitude(&frames) {
                Ok(m) => mags.push(m),
                Err(LionError::UndefinedCentroid { .. }) => excluded += 1,
                Err(e) => return Err(e),
            }
        }
        let mean = if mags.is_empty() { 0.0 } else { mags.iter().sum::<f64>() / mags.len() as f64 };
        rows.push((s, mean, mags.len()));
    }
    let xs: Vec<f64> = rows.iter().map(|(s, _, _)| *s).collect();
    let ys: Vec<f64> = rows.iter().map(|(_, m, _)| *m).collect();
    let pearson_r = pearson(&xs, &ys)?;
    Ok(LinearityReport { arm, rows, excluded, pearson_r })
}

/// Result of fusing two translation adapters at equal amplitude.
#[derive(Debug, Clone)]
pub struct FusionDirectionReport {
    pub normalized: bool,
    /// `(seed, direction degrees, displacement magnitude, smoothness)`
    pub per_seed: Vec<(u64, f64, f64, f64)>,
    pub mean_direction_deg: f64,
    pub mean_smoothness: f64,
}

/// Generate with two fused adapters at the same amplitude and measure the
/// centroid trajectory's direction and smoothness.
#[allow(clippy::too_many_arguments)]
pub fn eval_fusion_direction(
    model: &DiT<f32>,
    set_x: &AdapterSet<f32>,
    emb_x: &ScalingEmbedder<f32>,
    set_y: &AdapterSet<f32>,
    emb_y: &ScalingEmbedder<f32>,
    s: f64,
    normalize: bool,
    seeds: &[u64],
    ddim_steps: usize,
) -> Result<FusionDirectionReport> {
    let tok_x = emb_x.make_scaling_token(s)?;
    let tok_y = emb_y.make_scaling_token(s)?;
    let ctx = FusedContext::new(vec![set_x, set_y], vec![tok_x, tok_y], normalize)?;

    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut dir_x = 0.0;
    let mut dir_y = 0.0;
    let mut smooth_sum = 0.0;
    for &seed in seeds {
        let scene = generate_scene(seed ^ 0xf0510, DEFAULT_SCENE_POINTS)?;
        let cond_clip = render_static_clip(&scene, model.cfg.frames, model.cfg.frame_size)?;
        let frames = ddim_sample(model, &cond_clip.frame(0), ddim_steps, &Conditioning::Fused(&ctx), seed)?;
        let path = centroid_path(&frames)?;
        let (dir, mag) = mean_displacement_direction(&path)?;
        let smooth = trajectory_smoothness(&frames)?;
        per_seed.push((seed, dir, mag, smooth));
        let rad = dir.to_radians();
        dir_x += rad.cos();
        dir_y += rad.sin();
        smooth_sum += smooth;
    }
    Ok(FusionDirectionReport {
        normalized: normalize,
        mean_direction_deg: dir_y.atan2(dir_x).to_degrees(),
        mean_smoothness: smooth_sum / seeds.len() as f64,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        let a = generate_scene(42, 6).unwrap();
        let b = generate_scene(42, 6).unwrap();
        assert_eq!(a.points.len(), 6);
        assert!(a.points.iter().any(|p| p.is_object));
        for (p, q) in a.points.iter().zip(b.points.iter()) {
            assert_eq!(p.x, q.x);
            assert_eq!(p.y, q.y);
            assert_eq!(p.intensity, q.intensity);
            assert_eq!(p.is_object, q.is_object);
        }
        let single = generate_scene(1, 1).unwrap();
        assert_eq!(single.points.len(), 1);
        assert!(single.points[0].is_object);
    }

    #[test]
    fn scene_coordinates_stay_in_bounds_over_many_draws() {
        for seed in 0..200 {
            let s = generate_scene(seed, 50).unwrap();
            for p in &s.points {
                assert!(p.x.abs() <= 1.0 && p.y.abs() <= 1.0);
                assert!(p.intensity > 0.0);
            }
        }
    }

    #[test]
    fn offset_clip_moves_centroid_linearly() {
        let scene = Scene {
            points: vec![ScenePoint { x: 0.0, y: 0.0, intensity: 1.0, is_object: true }],
            seed: 0,
        };
        let prim = MotionPrimitive { kind: PrimitiveKind::OffsetH, step: 0.05 };
        let clip = render_clip(&scene, prim, 3, 32).unwrap();
        let path = centroid_path(&clip.frames).unwrap();
        assert_relative_eq!(path[1][0] - path[0][0], 0.05, epsilon = 5e-3);
        assert_relative_eq!(path[2][0] - path[1][0], 0.05, epsilon = 5e-3);
        assert!(path.iter().all(|p| p[1].abs() < 1e-6));
    }

    #[test]
    fn orbit_advances_angle_per_frame() {
        let scene = Scene {
            points: vec![ScenePoint { x: 0.4, y: 0.0, intensity: 1.0, is_object: true }],
            seed: 0,
        };
        let step = 0.3;
        let prim = MotionPrimitive { kind: PrimitiveKind::Orbit, step };
        let clip = render_clip(&scene, prim, 4, 48).unwrap();
        let path = centroid_path(&clip.frames).unwrap();
        for (f, p) in path.iter().enumerate() {
            let expect = (f as f64 * step, 0.4);
            assert_relative_eq!(p[1].atan2(p[0]), expect.0, epsilon = 0.02);
        }
    }

    #[test]
    fn object_motion_leaves_background_static() {
        let scene = generate_scene(7, 6).unwrap();
        let background = Scene {
            points: scene.points.iter().filter(|p| !p.is_object).cloned().collect(),
            seed: scene.seed,
        };
        let prim = MotionPrimitive { kind: PrimitiveKind::ObjectMotion, step: 0.01 };
        let clip = render_clip(&background, prim, 5, 16).unwrap();
        let fs = 16 * 16;
        let first = &clip.frames.data()[..fs];
        for f in 1..5 {
            let frame = &clip.frames.data()[f * fs..(f + 1) * fs];
            assert!(frame.iter().zip(first.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn render_is_deterministic_and_counts_clipped_points() {
        let scene = Scene {
            points: vec![ScenePoint { x: 0.95, y: 0.0, intensity: 1.0, is_object: true }],
            seed: 0,
        };
        let prim = MotionPrimitive { kind: PrimitiveKind::OffsetH, step: 0.02 };
        let a = render_clip(&scene, prim, 10, 16).unwrap();
        let b = render_clip(&scene, prim, 10, 16).unwrap();
        assert!(a
            .frames
            .data()
            .iter()
            .zip(b.frames.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        // x reaches 1.0 at frame 3 (0.95 + 0.06); frames 4.. are culled
        assert!(a.provenance.clipped_points > 0);
    }

    #[test]
    fn training_pair_endpoints() {
        let scene = generate_scene(3, 4).unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
        let clip = render_clip(&scene, prim, 120, 16).unwrap();
        let sampler = ClipSampler::new(120, 13).unwrap();

        let (min_pair, _) = make_training_pair(&clip, &sampler, sampler.s_min()).unwrap();
        assert_eq!(min_pair.num_frames(), 13);
        // S = s_min selects the first V frames
        let fs = 16 * 16;
        for f in 0..13 {
            let got = &min_pair.frames.data()[f * fs..(f + 1) * fs];
            let want = &clip.frames.data()[f * fs..(f + 1) * fs];
            assert!(got.iter().zip(want.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let (full_pair, _) = make_training_pair(&clip, &sampler, 1.0).unwrap();
        let got = &full_pair.frames.data()[12 * fs..13 * fs];
        let want = &clip.frames.data()[119 * fs..120 * fs];
        assert!(got.iter().zip(want.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn training_pair_formula_case() {
        let scene = generate_scene(5, 4).unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
        let clip = render_clip(&scene, prim, 120, 16).unwrap();
        let sampler = ClipSampler::new(120, 13).unwrap();
        let idx = sampler.sample_frame_indices(0.5).unwrap();
        // M = 60; floor(t * 59 / 12)
        for (t, &i) in idx.iter().enumerate() {
            assert_eq!(i, t * 59 / 12);
        }
        let (pair, s) = make_training_pair(&clip, &sampler, 0.5).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(pair.provenance.s, Some(0.5));
    }

    #[test]
    fn pair_displacement_monotone_in_s_for_translation() {
        let scene = generate_scene(11, 4).unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
        let clip = render_clip(&scene, prim, 120, 24).unwrap();
        let sampler = ClipSampler::new(120, 13).unwrap();
        let mut last = 0.0;
        for s in [sampler.s_min(), 0.3, 0.5, 0.8, 1.0] {
            let (pair, _) = make_training_pair(&clip, &sampler, s).unwrap();
            let m = motion_magnitude(&pair.frames).unwrap();
            assert!(m >= last - 1e-9, "magnitude {m} dropped below {last} at s={s}");
            last = m;
        }
    }

    #[test]
    fn dataset_roundtrip_verifies_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetV);
        let clips = build_motion_dataset(16, prim, 3, 40, 4, 99).unwrap();
        let manifest = write_dataset(dir.path(), &clips).unwrap();
        assert_eq!(manifest.clips.len(), 3);

        let (m2, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2.clips.len(), 3);
        for (a, b) in clips.iter().zip(loaded.iter()) {
            assert!(a
                .frames
                .data()
                .iter()
                .zip(b.frames.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // damage one clip; load must fail with a checksum error
        let victim = dir.path().join("clip_0001.lw");
        let mut bytes = std::fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x10;
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(LionError::ChecksumMismatch { .. })
        ));
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            channels: 16,
            heads: 2,
            frames: 4,
            frame_size: 8,
            patch_size: 4,
            diffusion_steps: 20,
        }
    }

    #[test]
    fn pretrain_reduces_loss_and_only_uses_base_params() {
        let cfg = tiny_cfg();
        let mut model = DiT::<f32>::new(cfg.clone(), 1).unwrap();
        let clips = build_static_dataset(&cfg, 4, 3, 5).unwrap();
        let curve = pretrain_base(&mut model, &clips, 300, 2e-3, 2, 7).unwrap();
        assert_eq!(curve.len(), 300);
        let head: f64 = curve[..40].iter().map(|(_, l)| l).sum::<f64>() / 40.0;
        let tail: f64 = curve[260..].iter().map(|(_, l)| l).sum::<f64>() / 40.0;
        assert!(tail < head, "loss did not go down: {head} -> {tail}");
    }

    #[test]
    fn lora_training_freezes_base_and_is_deterministic() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 2).unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
        let clips = build_motion_dataset(cfg.frame_size, prim, 3, 40, 3, 8).unwrap();
        let sampler = ClipSampler::new(40, cfg.frames).unwrap();
        let config = TrainConfig {
            steps: 10,
            batch_size: 2,
            rank: 2,
            seed: 3,
            ..TrainConfig::default()
        };

        let before: Vec<u32> = checksum_params(&model);
        let (set1, emb1, curve1) = train_lora(&model, "offset_h", &clips, &sampler, &config).unwrap();
        let after: Vec<u32> = checksum_params(&model);
        assert_eq!(before, after, "base weights changed during adapter training");
        assert!(emb1.is_some());
        assert_eq!(curve1.len(), 10);

        let (set2, _, _) = train_lora(&model, "offset_h", &clips, &sampler, &config).unwrap();
        for (p, l1) in set1.points() {
            let l2 = set2.point(*p).unwrap();
            let d1 = l1.delta_weight().unwrap();
            let d2 = l2.delta_weight().unwrap();
            assert!(d1.data().iter().zip(d2.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn zero_step_training_returns_init() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 2).unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetV);
        let clips = build_motion_dataset(cfg.frame_size, prim, 2, 40, 3, 9).unwrap();
        let sampler = ClipSampler::new(40, cfg.frames).unwrap();
        let config = TrainConfig { steps: 0, rank: 2, seed: 4, ..TrainConfig::default() };
        let (set, _, curve) = train_lora(&model, "offset_v", &clips, &sampler, &config).unwrap();
        assert!(curve.is_empty());
        for (_, lora) in set.points() {
            let d = lora.delta_weight().unwrap();
            assert!(d.data().iter().all(|&v| v == 0.0), "delta not zero at init");
        }
    }

    fn checksum_params(model: &DiT<f32>) -> Vec<u32> {
        let mut sums = Vec::new();
        model.visit_params(|_, t| {
            let mut h = crc32fast::Hasher::new();
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
            sums.push(h.finalize());
        });
        sums
    }

    #[test]
    fn adapter_scale_arm_has_no_embedder() {
        let cfg = tiny_cfg();
        let model = DiT::<f32>::new(cfg.clone(), 2).unwrap();
        let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
        let clips = build_motion_dataset(cfg.frame_size, prim, 2, 40, 3, 10).unwrap();
        let sampler = ClipSampler::new(40, cfg.frames).unwrap();
        let config = TrainConfig {
            steps: 3,
            rank: 2,
            seed: 5,
            arm: TrainArm::AdapterScale,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (_, emb, _) = train_lora(&model, "offset_h", &clips, &sampler, &config).unwrap();
        assert!(emb.is_none());
    }
}
