//! Command-line pipeline: data generation, base pre-training, adapter
//! training, fusion, diagnostics, and linearity evaluation.
//!
//! Every command is deterministic given `--seed`; report files carry no
//! timestamps, so reruns produce byte-identical CSV bodies. Exit codes:
//! 0 success, 2 configuration error, 3 I/O error, 4 training failure,
//! 5 evaluation domain error. `LION_THREADS` caps worker parallelism.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapter::{load_adapters, save_adapters, AdapterSet};
use crate::diagnostics::{
    centroid_path, layerwise_cosine, norm_profile, norm_rows, similarity_rows, write_profile_csv,
    write_svg_lines, ProfileRow,
};
use crate::error::{LionError, Result};
use crate::fusion::{
    norm_consistent_fuse, vanilla_fuse, FusionMode, FusionPlan, NormReport, NormReportRow,
};
use crate::model::{DiT, ModelConfig, Role};
use crate::multifuse::FusedContext;
use crate::sampler::{add_noise, ddim_sample, Conditioning, NoiseSchedule};
use crate::scaling::{ClipSampler, ScalingEmbedder};
use crate::synthbench::{
    build_motion_dataset, eval_linearity, generate_scene, load_dataset,
    mix_seed, pretrain_base, render_static_clip, scene_seed_for, train_lora, write_clip,
    write_dataset, FrameSequence, MotionPrimitive, PrimitiveKind, Provenance, TrainArm,
    TrainConfig,
};
use crate::tensor::{Scalar, Tensor};

// ── Run configuration ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub clip_len: usize,
    pub points: usize,
    /// Per-frame step; defaults to the primitive's canonical step.
    pub step: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: 100, clip_len: 120, points: 4, step: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub scenes_per_s: usize,
    pub ddim_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { scenes_per_s: 3, ddim_steps: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub ddim_steps: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { ddim_steps: 50 }
    }
}

/// The JSON run configuration: sections `model`, `train`, `data`, `eval`,
/// `fusion`, all optional, unknown keys rejected. `version` must be 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalSection,
    pub fusion: FusionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalSection::default(),
            fusion: FusionSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| LionError::Config(format!("run config: {e}")))?,
        };
        if cfg.version != 1 {
            return Err(LionError::Config(format!(
                "unsupported run config version {}",
                cfg.version
            )));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

// ── Command definitions ──────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "lion",
    about = "Low-rank adapter training, fusion, and diagnostics on a toy diffusion transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a clip dataset for one motion primitive (or `static`).
    GenData {
        /// offset_h | offset_v | forward_back | orbit | object_motion | static
        #[arg(long)]
        primitive: String,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 120)]
        clip_len: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-frame step; defaults to the primitive's canonical step.
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, default_value_t = 16)]
        frame_size: usize,
        #[arg(long, default_value_t = 4)]
        points: usize,
    },
    /// Pre-train the base model on a static-clip dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one adapter on a motion dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Motion-primitive name; also names the adapter.
        #[arg(long)]
        primitive: String,
        /// scaling_token | adapter_scale
        #[arg(long, default_value = "scaling_token")]
        arm: String,
        #[arg(long)]
        data: PathBuf,
        /// Base model checkpoint.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse adapters and generate one clip.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        /// norm_consistent | vanilla
        #[arg(long, default_value = "norm_consistent")]
        mode: String,
        /// One scaling value per adapter.
        #[arg(long, num_args = 1.., required = true)]
        scales: Vec<f64>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Activation-level similarity and norm profiles for trained adapters.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        /// Probe dataset directory (clips at model geometry).
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write SVG line charts.
        #[arg(long)]
        svg: bool,
    },
    /// Amplitude sweep: generate per S, measure motion, report Pearson r.
    Eval {
        /// Adapter weight file; repeat to evaluate several arms.
        #[arg(long, num_args = 1.., required = true)]
        adapter: Vec<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        /// start:end:count, e.g. 0.2:1.0:5
        #[arg(long)]
        s_grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Entry point for the `lion` binary: parse, run, map errors to exit codes.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 2 config, 3 I/O, 4 training failure, 5 evaluation domain error.
pub fn exit_code(e: &LionError) -> i32 {
    match e {
        LionError::Config(_)
        | LionError::Fusion(_)
        | LionError::Attachment(_)
        | LionError::DimensionMismatch { .. }
        | LionError::EmptyTensor(_)
        | LionError::NanInput(_)
        | LionError::NonScalarLoss { .. }
        | LionError::DegenerateAdapter { .. } => 2,
        LionError::Io(_)
        | LionError::Json(_)
        | LionError::Csv(_)
        | LionError::MagicMismatch { .. }
        | LionError::VersionMismatch { .. }
        | LionError::Truncated(_)
        | LionError::ChecksumMismatch { .. }
        | LionError::HeaderParse(_)
        | LionError::MissingEntry(_) => 3,
        LionError::TrainingDiverged { .. } => 4,
        LionError::Eval(_)
        | LionError::ScalingRange { .. }
        | LionError::UndefinedCorrelation(_)
        | LionError::UndefinedCentroid { .. }
        | LionError::UndefinedSimilarity(_)
        | LionError::UndefinedSmoothness => 5,
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("LION_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { primitive, scenes, clip_len, out, seed, step, frame_size, points } => {
            cmd_gen_data(&primitive, scenes, clip_len, &out, seed, step, frame_size, points)
        }
        Command::Pretrain { config, data, out, steps, seed } => {
            cmd_pretrain(config.as_deref(), &data, &out, steps, seed)
        }
        Command::Train { config, primitive, arm, data, base, out, seed } => {
            cmd_train(config.as_deref(), &primitive, &arm, &data, &base, &out, seed)
        }
        Command::Fuse { adapters, mode, scales, base, out, config, seed } => {
            cmd_fuse(&adapters, &mode, &scales, &base, &out, config.as_deref(), seed)
        }
        Command::Diagnose { adapters, probe, base, out, config, probes, seed, svg } => {
            cmd_diagnose(&adapters, &probe, &base, &out, config.as_deref(), probes, seed, svg)
        }
        Command::Eval { adapter, base, s_grid, out, config, seed } => {
            cmd_eval(&adapter, &base, &s_grid, &out, config.as_deref(), seed)
        }
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    primitive: &str,
    scenes: usize,
    clip_len: usize,
    out: &Path,
    seed: u64,
    step: Option<f64>,
    frame_size: usize,
    points: usize,
) -> Result<()> {
    let clips = if primitive == "static" {
        let mut clips = Vec::with_capacity(scenes);
        for i in 0..scenes {
            let scene = generate_scene(scene_seed_for(seed, i), points)?;
            clips.push(render_static_clip(&scene, clip_len, frame_size)?);
        }
        clips
    } else {
        let kind = PrimitiveKind::parse(primitive)?;
        let mut prim = MotionPrimitive::default_for(kind);
        if let Some(s) = step {
            prim.step = s;
        }
        build_motion_dataset(frame_size, prim, scenes, clip_len, points, seed)?
    };
    let manifest = write_dataset(out, &clips)?;
    println!("wrote {} clips to {}", manifest.clips.len(), out.display());
    Ok(())
}

// ── pretrain ─────────────────────────────────────────────────────────

fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (step, loss) in curve {
        w.write_record([step.to_string(), format!("{loss}")])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_pretrain(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    steps: usize,
    seed: u64,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (_, clips) = load_dataset(data)?;
    let mut model = DiT::<f32>::new(cfg.model.clone(), seed)?;
    let curve = pretrain_base(
        &mut model,
        &clips,
        steps,
        cfg.train.learning_rate,
        cfg.train.batch_size,
        seed,
    )?;
    model.save(out)?;
    write_loss_csv(&sibling(out, "loss_curve.csv"), &curve)?;
    println!("pre-trained {} steps, checkpoint at {}", steps, out.display());
    Ok(())
}

fn sibling(out: &Path, name: &str) -> PathBuf {
    out.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(
    config: Option<&Path>,
    primitive: &str,
    arm: &str,
    data: &Path,
    base: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if primitive != "static" {
        PrimitiveKind::parse(primitive)?;
    }
    let arm = TrainArm::parse(arm)?;
    let model = DiT::<f32>::load(base)?;
    let (manifest, clips) = load_dataset(data)?;
    if manifest.frame_size != model.cfg.frame_size {
        return Err(LionError::Config(format!(
            "dataset frame size {} does not match model {}",
            manifest.frame_size, model.cfg.frame_size
        )));
    }
    let sampler = ClipSampler::new(manifest.clip_len, model.cfg.frames)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.arm = arm;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let (set, embedder, curve) = train_lora(&model, primitive, &clips, &sampler, &train_cfg)?;
    let mut set = set;
    set.provenance = serde_json::json!({
        "primitive": primitive,
        "arm": arm.as_str(),
        "steps": train_cfg.steps,
        "seed": train_cfg.seed,
        "clip_len": manifest.clip_len,
    });
    save_adapters(&set, embedder.as_ref(), out)?;
    write_loss_csv(&sibling(out, "loss_curve.csv"), &curve)?;
    println!("trained {} ({}) for {} steps -> {}", primitive, arm.as_str(), train_cfg.steps, out.display());
    Ok(())
}

// ── fuse ─────────────────────────────────────────────────────────────

struct LoadedAdapter {
    set: AdapterSet<f32>,
    embedder: Option<ScalingEmbedder<f32>>,
}

fn load_many(paths: &[PathBuf]) -> Result<Vec<LoadedAdapter>> {
    paths
        .iter()
        .map(|p| {
            let (set, embedder) = load_adapters::<f32>(p)?;
            Ok(LoadedAdapter { set, embedder })
        })
        .collect()
}

fn write_trajectory_csv(path: &Path, traj: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "cx", "cy"])?;
    for (i, p) in traj.iter().enumerate() {
        w.write_record([i.to_string(), format!("{}", p[0]), format!("{}", p[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// Shared seed derivation for clip generation, so a k=1 fusion and the
/// evaluation sweep produce byte-identical trajectories for the same seed.
fn generation_setup(model: &DiT<f32>, seed: u64, s_index: usize) -> Result<(Tensor<f32>, u64)> {
    let scene = generate_scene(scene_seed_for(seed ^ 0xeea1_0000, 0), 4)?;
    let cond = render_static_clip(&scene, model.cfg.frames, model.cfg.frame_size)?.frame(0);
    Ok((cond, mix_seed(seed, s_index, 0)))
}

fn cmd_fuse(
    adapter_paths: &[PathBuf],
    mode: &str,
    scales: &[f64],
    base: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mode = match mode {
        "norm_consistent" => FusionMode::NormConsistent,
        "vanilla" => FusionMode::Vanilla,
        other => {
            return Err(LionError::Config(format!(
                "unknown fusion mode {other:?}; valid: norm_consistent, vanilla"
            )))
        }
    };
    if scales.len() != adapter_paths.len() {
        return Err(LionError::Config(format!(
            "{} adapters but {} scales",
            adapter_paths.len(),
            scales.len()
        )));
    }
    let loaded = load_many(adapter_paths)?;
    let model = DiT::<f32>::load(base)?;
    for l in &loaded {
        l.set.validate_against(&model.cfg)?;
    }
    std::fs::create_dir_all(out)?;

    let with_tokens = loaded.iter().filter(|l| l.embedder.is_some()).count();
    if with_tokens != 0 && with_tokens != loaded.len() {
        return Err(LionError::Config(
            "cannot mix scaling-token adapters with plain adapters in one fusion".into(),
        ));
    }

    let (cond, gen_seed) = generation_setup(&model, seed, 0)?;
    let steps = cfg.fusion.ddim_steps;

    let (frames, report) = if with_tokens == loaded.len() {
        // Scaling-token adapters: partitioned attention, scales are S values.
        let tokens: Vec<_> = loaded
            .iter()
            .zip(scales.iter())
            .map(|(l, &s)| l.embedder.as_ref().expect("checked").make_scaling_token(s))
            .collect::<Result<_>>()?;
        if loaded.len() == 1 {
            // Single adapter: raw weights, ordinary attention.
            let frames = ddim_sample(
                &model,
                &cond,
                steps,
                &Conditioning::Single { adapters: &loaded[0].set, token: Some(&tokens[0]) },
                gen_seed,
            )?;
            let report = single_adapter_report(&loaded[0].set)?;
            (frames, report)
        } else {
            let sets: Vec<&AdapterSet<f32>> = loaded.iter().map(|l| &l.set).collect();
            let ctx = FusedContext::new(sets, tokens, mode == FusionMode::NormConsistent)?;
            let report = match (&ctx.report, mode) {
                (Some(r), _) => r.clone(),
                (None, _) => unscaled_report(&loaded)?,
            };
            let frames = ddim_sample(&model, &cond, steps, &Conditioning::Fused(&ctx), gen_seed)?;
            (frames, report)
        }
    } else {
        // Plain adapters: weight-space fusion, scales are lambdas.
        let sets: Vec<&AdapterSet<f32>> = loaded.iter().map(|l| &l.set).collect();
        let mut plan = FusionPlan::new(sets, mode);
        plan.lambdas = scales.iter().map(|&s| s as f32).collect();
        let (fused, report) = match mode {
            FusionMode::Vanilla => (vanilla_fuse(&plan)?, unscaled_report(&loaded)?),
            FusionMode::NormConsistent => norm_consistent_fuse(&plan)?,
        };
        let frames = ddim_sample(
            &model,
            &cond,
            steps,
            &Conditioning::Single { adapters: &fused, token: None },
            gen_seed,
        )?;
        (frames, report)
    };

    let traj = centroid_path(&frames)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &traj)?;
    report.write_csv(&out.join("norm_report.csv"))?;
    let seq = FrameSequence {
        frames,
        provenance: Provenance {
            scene_seed: seed,
            kind: format!("fused:{mode:?}"),
            step: 0.0,
            clip_len: model.cfg.frames,
            s: None,
            clipped_points: 0,
        },
    };
    write_clip(&out.join("generated.lw"), &seq)?;
    println!("fused {} adapters -> {}", adapter_paths.len(), out.display());
    Ok(())
}

/// Norms without rescaling, reported with unit scale factors.
fn unscaled_report(loaded: &[LoadedAdapter]) -> Result<NormReport> {
    let mut report = NormReport::default();
    if loaded.is_empty() {
        return Ok(report);
    }
    for point in loaded[0].set.point_ids() {
        for l in loaded {
            let lora = l.set.point(point).ok_or_else(|| {
                LionError::Fusion(format!("adapter {:?} missing point {point}", l.set.name))
            })?;
            let norm = lora.delta_weight()?.frobenius_norm()?.as_f64();
            report.rows.push(NormReportRow {
                attachment_id: point.to_string(),
                adapter_name: l.set.name.clone(),
                norm_before: norm,
                alpha: norm,
                scale_factor: 1.0,
                norm_after: norm,
            });
        }
    }
    Ok(report)
}

fn single_adapter_report(set: &AdapterSet<f32>) -> Result<NormReport> {
    let mut report = NormReport::default();
    for point in set.point_ids() {
        let norm = set.point(point).unwrap().delta_weight()?.frobenius_norm()?.as_f64();
        report.rows.push(NormReportRow {
            attachment_id: point.to_string(),
            adapter_name: set.name.clone(),
            norm_before: norm,
            alpha: norm,
            scale_factor: 1.0,
            norm_after: norm,
        });
    }
    Ok(report)
}

// ── diagnose ─────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    adapter_paths: &[PathBuf],
    probe: &Path,
    base: &Path,
    out: &Path,
    _config: Option<&Path>,
    probe_count: usize,
    seed: u64,
    svg: bool,
) -> Result<()> {
    let loaded = load_many(adapter_paths)?;
    let model = DiT::<f32>::load(base)?;
    for l in &loaded {
        l.set.validate_against(&model.cfg)?;
    }
    let (manifest, clips) = load_dataset(probe)?;
    if manifest.frame_size != model.cfg.frame_size || manifest.clip_len != model.cfg.frames {
        return Err(LionError::Config(format!(
            "probe clips are {}x{} frames, model wants {}x{}",
            manifest.clip_len, manifest.frame_size, model.cfg.frames, model.cfg.frame_size
        )));
    }
    std::fs::create_dir_all(out)?;

    // Noise the probe clips deterministically.
    let schedule = NoiseSchedule::linear(model.cfg.diffusion_steps);
    let probes: Vec<crate::diagnostics::ProbeInput<f32>> = clips
        .iter()
        .take(probe_count)
        .enumerate()
        .map(|(i, clip)| {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, i, 1));
            let t = rng.random_range(0..model.cfg.diffusion_steps);
            let eps = Tensor::<f32>::randn(
                vec![model.cfg.frames, model.cfg.frame_size, model.cfg.frame_size],
                1.0,
                &mut rng,
            );
            let noisy = add_noise(&clip.frames, &eps, schedule.alpha_bar(t))?;
            Ok(crate::diagnostics::ProbeInput { noisy, cond: clip.frame(0), timestep: t })
        })
        .collect::<Result<_>>()?;

    let mut sim_rows: Vec<ProfileRow> = Vec::new();
    let mut chart_series = Vec::new();
    for i in 0..loaded.len() {
        for j in (i + 1)..loaded.len() {
            let prof =
                layerwise_cosine(&model, &loaded[i].set, &loaded[j].set, &probes, Role::O)?;
            let label = format!("{}|{}", loaded[i].set.name, loaded[j].set.name);
            sim_rows.extend(similarity_rows(&prof, &label));
            chart_series.push((
                label,
                prof.per_block
                    .iter()
                    .map(|b| (b.block_index as f64, b.mean))
                    .collect::<Vec<_>>(),
            ));
        }
    }
    if !sim_rows.is_empty() {
        write_profile_csv(&out.join("similarity.csv"), &sim_rows)?;
    }

    let sets: Vec<&AdapterSet<f32>> = loaded.iter().map(|l| &l.set).collect();
    let norms = norm_profile(&model, &sets, &probes, Role::O)?;
    write_profile_csv(&out.join("norms.csv"), &norm_rows(&norms))?;

    if svg {
        if !chart_series.is_empty() {
            write_svg_lines(
                &out.join("similarity.svg"),
                "per-block cosine similarity",
                &chart_series,
            )?;
        }
        let norm_series: Vec<(String, Vec<(f64, f64)>)> = sets
            .iter()
            .map(|set| {
                (
                    set.name.clone(),
                    (0..model.cfg.num_blocks)
                        .map(|b| (b as f64, norms.mean_for(&set.name, b)))
                        .collect(),
                )
            })
            .collect();
        write_svg_lines(&out.join("norms.svg"), "per-block contribution norms", &norm_series)?;
    }
    println!("diagnostics for {} adapters -> {}", loaded.len(), out.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

/// Parse `start:end:count` into an inclusive grid.
pub fn parse_s_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(LionError::Config(format!(
            "s-grid {spec:?} is not start:end:count"
        )));
    }
    let start: f64 = parts[0].parse().map_err(|_| LionError::Config(format!("bad grid start {:?}", parts[0])))?;
    let end: f64 = parts[1].parse().map_err(|_| LionError::Config(format!("bad grid end {:?}", parts[1])))?;
    let count: usize = parts[2].parse().map_err(|_| LionError::Config(format!("bad grid count {:?}", parts[2])))?;
    if count < 2 || end <= start {
        return Err(LionError::Config(format!("degenerate s-grid {spec:?}")));
    }
    Ok((0..count)
        .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
        .collect())
}

fn cmd_eval(
    adapter_paths: &[PathBuf],
    base: &Path,
    s_grid: &str,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let grid = parse_s_grid(s_grid)?;
    let model = DiT::<f32>::load(base)?;
    let loaded = load_many(adapter_paths)?;
    std::fs::create_dir_all(out)?;

    let mut w = csv::Writer::from_path(out.join("linearity_report.csv"))?;

    for l in &loaded {
        l.set.validate_against(&model.cfg)?;
        let arm = match &l.embedder {
            Some(_) => TrainArm::ScalingToken,
            None => TrainArm::AdapterScale,
        };
        // Range errors surface before any sampling.
        if let Some(emb) = &l.embedder {
            for &s in &grid {
                emb.check_range(s)?;
            }
        } else {
            let s_min = model.cfg.frames as f64 / cfg.data.clip_len as f64;
            for &s in &grid {
                if !(s_min..=1.0).contains(&s) {
                    return Err(LionError::ScalingRange { value: s, min: s_min });
                }
            }
        }
        let report = eval_linearity(
            &model,
            &l.set,
            l.embedder.as_ref(),
            arm,
            &grid,
            cfg.eval.scenes_per_s,
            cfg.eval.ddim_steps,
            seed,
        )?;
        report.append_csv(&mut w)?;

        // Reference trajectory for the first grid point, seed-aligned with
        // a single-adapter fuse run.
        let (cond, gen_seed) = generation_setup(&model, seed, 0)?;
        let frames = match arm {
            TrainArm::ScalingToken => {
                let token = l.embedder.as_ref().unwrap().make_scaling_token(grid[0])?;
                ddim_sample(
                    &model,
                    &cond,
                    cfg.eval.ddim_steps,
                    &Conditioning::Single { adapters: &l.set, token: Some(&token) },
                    gen_seed,
                )?
            }
            TrainArm::AdapterScale => {
                let mut scaled = l.set.clone();
                scaled.lambda = grid[0] as f32;
                ddim_sample(
                    &model,
                    &cond,
                    cfg.eval.ddim_steps,
                    &Conditioning::Single { adapters: &scaled, token: None },
                    gen_seed,
                )?
            }
        };
        write_trajectory_csv(
            &out.join(format!("trajectory_{}.csv", l.set.name)),
            &centroid_path(&frames)?,
        )?;
        println!("{} ({}): pearson r = {:.4}", l.set.name, arm.as_str(), report.pearson_r);
    }
    w.flush()?;
    Ok(())
}
