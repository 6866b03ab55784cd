//! Measurement of what the adapters actually do.
//!
//! Layer-wise cosine similarity between two adapters' output contributions
//! answers the orthogonality question; per-block activation norms expose the
//! disparities that motivate norm-consistent fusion; Pearson correlation
//! against the amplitude grid quantifies linear scalability; and centroid
//! displacement over rendered frames stands in for optical-flow magnitude
//! on this synthetic domain, where true motion is available and a flow
//! estimator would only add noise.

use std::path::Path;

use serde::Serialize;

use crate::adapter::AdapterSet;
use crate::error::{LionError, Result};
use crate::model::{Bindings, DiT, PointId, Role, TrainScope};
use crate::tape::Tape;
use crate::tensor::{cosine_similarity_slices, Scalar, Tensor};

/// One probe input: a noised clip, its condition frame, and the timestep.
#[derive(Debug, Clone)]
pub struct ProbeInput<T> {
    pub noisy: Tensor<T>,
    pub cond: Tensor<T>,
    pub timestep: usize,
}

/// Per-block activations of a base forward pass (no adapters), one tensor
/// per attachment role input.
pub struct BlockActivations<T> {
    inputs: Vec<[Tensor<T>; 6]>,
}

impl<T: Scalar> BlockActivations<T> {
    pub fn input_for(&self, block: usize, role: Role) -> &Tensor<T> {
        let idx = match role {
            Role::Q => 0,
            Role::K => 1,
            Role::V => 2,
            Role::O => 3,
            Role::MlpIn => 4,
            Role::MlpOut => 5,
        };
        &self.inputs[block][idx]
    }

    pub fn num_blocks(&self) -> usize {
        self.inputs.len()
    }
}

/// Run the base model on a probe and capture the activation entering each
/// attachment point of every block.
pub fn capture_block_inputs<T: Scalar>(
    model: &DiT<T>,
    probe: &ProbeInput<T>,
) -> Result<BlockActivations<T>> {
    let mut tape = Tape::new();
    let mut bindings = Bindings::default();
    let mut h = model.embed_tokens(
        &mut tape,
        &probe.noisy,
        &probe.cond,
        probe.timestep,
        TrainScope::None,
        &mut bindings,
    )?;
    let mut inputs = Vec::with_capacity(model.cfg.num_blocks);
    for block_idx in 0..model.cfg.num_blocks {
        let (next, probes) =
            model.block_forward(&mut tape, block_idx, h, None, TrainScope::None, &mut bindings)?;
        h = next;
        inputs.push([
            tape.value_tensor(probes.input_for(Role::Q)),
            tape.value_tensor(probes.input_for(Role::K)),
            tape.value_tensor(probes.input_for(Role::V)),
            tape.value_tensor(probes.input_for(Role::O)),
            tape.value_tensor(probes.input_for(Role::MlpIn)),
            tape.value_tensor(probes.input_for(Role::MlpOut)),
        ]);
    }
    Ok(BlockActivations { inputs })
}

/// Contribution of one adapter at one point for a given input activation:
/// `x dW`, flattened.
fn contribution<T: Scalar>(
    set: &AdapterSet<T>,
    point: PointId,
    x: &Tensor<T>,
) -> Result<Option<Tensor<T>>> {
    match set.point(point) {
        None => Ok(None),
        Some(lora) => {
            let delta = lora.delta_weight()?;
            Ok(Some(x.matmul(&delta)?))
        }
    }
}

/// Per-block mean and spread of a measurement over probes.
#[derive(Debug, Clone, Serialize)]
pub struct BlockStat {
    pub block_index: usize,
    pub mean: f64,
    pub std: f64,
}

/// Layer-wise cosine similarity of two adapters' output contributions.
#[derive(Debug, Clone)]
pub struct SimilarityProfile {
    pub per_block: Vec<BlockStat>,
    /// Probes skipped because one contribution had zero norm.
    pub excluded: usize,
}

impl SimilarityProfile {
    /// Mean |cosine| over a block range.
    pub fn mean_abs(&self, range: std::ops::Range<usize>) -> f64 {
        let vals: Vec<f64> = self.per_block[range].iter().map(|b| b.mean.abs()).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Cosine similarity between two adapters' contributions at `role`, per
/// block, aggregated over a probe batch.
pub fn layerwise_cosine<T: Scalar>(
    model: &DiT<T>,
    set_a: &AdapterSet<T>,
    set_b: &AdapterSet<T>,
    probes: &[ProbeInput<T>],
    role: Role,
) -> Result<SimilarityProfile> {
    if probes.is_empty() {
        return Err(LionError::Config("empty probe batch".into()));
    }
    let blocks = model.cfg.num_blocks;
    let mut per_block_vals: Vec<Vec<f64>> = vec![Vec::new(); blocks];
    let mut excluded = 0usize;

    for probe in probes {
        let acts = capture_block_inputs(model, probe)?;
        for block in 0..blocks {
            let point = PointId { block, role };
            let x = acts.input_for(block, role);
            let (Some(ca), Some(cb)) =
                (contribution(set_a, point, x)?, contribution(set_b, point, x)?)
            else {
                continue;
            };
            match cosine_similarity_slices(ca.data(), cb.data()) {
                Ok(c) => per_block_vals[block].push(c.as_f64()),
                Err(LionError::UndefinedSimilarity(_)) => excluded += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let per_block = per_block_vals
        .into_iter()
        .enumerate()
        .map(|(block_index, vals)| {
            let (mean, std) = mean_std(&vals);
            BlockStat { block_index, mean, std }
        })
        .collect();
    Ok(SimilarityProfile { per_block, excluded })
}

/// One activation-norm measurement.
#[derive(Debug, Clone, Serialize)]
pub struct NormSample {
    pub block_index: usize,
    pub sample_id: usize,
    pub adapter_name: String,
    pub norm: f64,
}

/// Per-block, per-probe norms of each adapter's output contribution.
#[derive(Debug, Clone, Default)]
pub struct NormProfile {
    pub rows: Vec<NormSample>,
}

impl NormProfile {
    pub fn mean_for(&self, adapter: &str, block: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.adapter_name == adapter && r.block_index == block)
            .map(|r| r.norm)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

pub fn norm_profile<T: Scalar>(
    model: &DiT<T>,
    sets: &[&AdapterSet<T>],
    probes: &[ProbeInput<T>],
    role: Role,
) -> Result<NormProfile> {
    if probes.is_empty() {
        return Err(LionError::Config("empty probe batch".into()));
    }
    let mut out = NormProfile::default();
    for (sample_id, probe) in probes.iter().enumerate() {
        let acts = capture_block_inputs(model, probe)?;
        for block in 0..model.cfg.num_blocks {
            let point = PointId { block, role };
            let x = acts.input_for(block, role);
            for set in sets {
                if let Some(c) = contribution(set, point, x)? {
                    out.rows.push(NormSample {
                        block_index: block,
                        sample_id,
                        adapter_name: set.name.clone(),
                        norm: c.frobenius_norm()?.as_f64(),
                    });
                }
            }
        }
    }
    Ok(out)
}

// ── Scalar statistics ────────────────────────────────────────────────

fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sample Pearson correlation. Needs at least 3 points and nonzero variance
/// on both sides.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(LionError::DimensionMismatch {
            ctx: "pearson",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 3 {
        return Err(LionError::UndefinedCorrelation("fewer than 3 samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(LionError::UndefinedCorrelation("zero variance"));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

// ── Motion metrics ───────────────────────────────────────────────────

/// Intensity-weighted centroid of every frame, in scene coordinates
/// (`[-1, 1]` across the frame).
pub fn centroid_path<T: Scalar>(frames: &Tensor<T>) -> Result<Vec<[f64; 2]>> {
    let shape = frames.shape();
    if shape.len() != 3 {
        return Err(LionError::DimensionMismatch {
            ctx: "centroid_path",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (v, h, w) = (shape[0], shape[1], shape[2]);
    let mut path = Vec::with_capacity(v);
    for f in 0..v {
        let mut total = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for iy in 0..h {
            for ix in 0..w {
                let val = frames.data()[f * h * w + iy * w + ix].as_f64();
                let x = (ix as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let y = (iy as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                total += val;
                cx += val * x;
                cy += val * y;
            }
        }
        if total <= 0.0 {
            return Err(LionError::UndefinedCentroid { frame: f });
        }
        path.push([cx / total, cy / total]);
    }
    Ok(path)
}

/// Mean centroid displacement between consecutive frames.
pub fn motion_magnitude<T: Scalar>(frames: &Tensor<T>) -> Result<f64> {
    let path = centroid_path(frames)?;
    if path.len() < 2 {
        return Err(LionError::Config("motion magnitude needs at least 2 frames".into()));
    }
    let total: f64 = path
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum();
    Ok(total / (path.len() - 1) as f64)
}

/// Mean direction of centroid displacement in degrees, measured from the
/// +x axis, y pointing down the frame.
pub fn mean_displacement_direction(path: &[[f64; 2]]) -> Result<(f64, f64)> {
    if path.len() < 2 {
        return Err(LionError::Config("direction needs at least 2 frames".into()));
    }
    let dx = path[path.len() - 1][0] - path[0][0];
    let dy = path[path.len() - 1][1] - path[0][1];
    let norm = (dx * dx + dy * dy).sqrt();
    Ok((dy.atan2(dx).to_degrees(), norm))
}

const ZERO_STEP: f64 = 1e-12;

/// Mean absolute turn angle between consecutive displacement steps, in
/// radians. Zero-length steps are excluded; a path with fewer than two
/// usable steps has no defined smoothness.
pub fn trajectory_smoothness_from_path(path: &[[f64; 2]]) -> Result<f64> {
    if path.len() < 3 {
        return Err(LionError::Config("smoothness needs at least 3 frames".into()));
    }
    let steps: Vec<[f64; 2]> = path
        .windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .filter(|d| (d[0] * d[0] + d[1] * d[1]).sqrt() > ZERO_STEP)
        .collect();
    if steps.len() < 2 {
        return Err(LionError::UndefinedSmoothness);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in steps.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dot = a[0] * b[0] + a[1] * b[1];
        let cross = a[0] * b[1] - a[1] * b[0];
        total += cross.atan2(dot).abs();
        count += 1;
    }
    Ok(total / count as f64)
}

pub fn trajectory_smoothness<T: Scalar>(frames: &Tensor<T>) -> Result<f64> {
    let path = centroid_path(frames)?;
    trajectory_smoothness_from_path(&path)
}

// ── Report rows and export ───────────────────────────────────────────

/// Row of the unified profile CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub block_index: usize,
    pub metric: String,
    pub mean: f64,
    pub std: String,
    pub sample_id: String,
}

pub fn similarity_rows(profile: &SimilarityProfile, label: &str) -> Vec<ProfileRow> {
    profile
        .per_block
        .iter()
        .map(|b| ProfileRow {
            block_index: b.block_index,
            metric: format!("cosine:{label}"),
            mean: b.mean,
            std: format!("{}", b.std),
            sample_id: String::new(),
        })
        .collect()
}

pub fn norm_rows(profile: &NormProfile) -> Vec<ProfileRow> {
    profile
        .rows
        .iter()
        .map(|r| ProfileRow {
            block_index: r.block_index,
            metric: format!("norm:{}", r.adapter_name),
            mean: r.norm,
            std: String::new(),
            sample_id: format!("{}", r.sample_id),
        })
        .collect()
}

pub fn write_profile_csv(path: &Path, rows: &[ProfileRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal SVG line chart: one polyline per series over a framed plot area.
pub fn write_svg_lines(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if all.is_empty() {
        return Err(LionError::Config("no data for chart".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        w - 2.0 * pad,
        h - 2.0 * pad
    ));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let coords: Vec<String> =
            pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            pad + 8.0,
            pad + 16.0 + 16.0 * i as f64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{:.3} .. {:.3}</text>\n",
        w / 2.0,
        h - 12.0,
        x0,
        x1
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, LoraWeights};
    use crate::model::ModelConfig;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_blocks: 3,
            channels: 16,
            heads: 2,
            frames: 2,
            frame_size: 8,
            patch_size: 4,
            diffusion_steps: 20,
        }
    }

    fn probes(n: usize) -> Vec<ProbeInput<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        (0..n)
            .map(|i| ProbeInput {
                noisy: Tensor::randn(vec![2, 8, 8], 1.0, &mut rng),
                cond: Tensor::randn(vec![8, 8], 1.0, &mut rng),
                timestep: (i * 7) % 20,
            })
            .collect()
    }

    fn random_set(name: &str, seed: u64) -> AdapterSet<f64> {
        let mut set = init_adapter::<f64>(&cfg(), 3, seed).unwrap();
        set.name = name.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for point in cfg().points() {
            if let LoraWeights::Factored { b, .. } = &mut set.point_mut(point).unwrap().weights {
                *b = Tensor::randn(b.shape().to_vec(), 0.2, &mut rng);
            }
        }
        set
    }

    #[test]
    fn self_similarity_is_one_and_negation_is_minus_one() {
        let model = DiT::<f64>::new(cfg(), 2).unwrap();
        let a = random_set("a", 3);
        let probes = probes(4);
        let same = layerwise_cosine(&model, &a, &a, &probes, Role::O).unwrap();
        for b in &same.per_block {
            assert_relative_eq!(b.mean, 1.0, epsilon = 1e-9);
            assert!(b.std < 1e-9);
        }

        let mut neg = a.clone();
        for point in cfg().points() {
            if let LoraWeights::Factored { a: am, .. } = &mut neg.point_mut(point).unwrap().weights {
                *am = am.scale(-1.0);
            }
        }
        let opposite = layerwise_cosine(&model, &a, &neg, &probes, Role::O).unwrap();
        for b in &opposite.per_block {
            assert_relative_eq!(b.mean, -1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn layerwise_cosine_is_symmetric() {
        let model = DiT::<f64>::new(cfg(), 2).unwrap();
        let a = random_set("a", 5);
        let b = random_set("b", 6);
        let probes = probes(3);
        let ab = layerwise_cosine(&model, &a, &b, &probes, Role::O).unwrap();
        let ba = layerwise_cosine(&model, &b, &a, &probes, Role::O).unwrap();
        for (x, y) in ab.per_block.iter().zip(ba.per_block.iter()) {
            assert_relative_eq!(x.mean, y.mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_adapter_norms_are_zero_and_scaling_doubles_them() {
        let model = DiT::<f64>::new(cfg(), 2).unwrap();
        let zero = init_adapter::<f64>(&cfg(), 3, 9).unwrap();
        let a = random_set("a", 10);
        let mut doubled = a.clone();
        doubled.name = "a2".into();
        for point in cfg().points() {
            if let LoraWeights::Factored { b, .. } = &mut doubled.point_mut(point).unwrap().weights {
                *b = b.scale(2.0);
            }
        }
        let probes = probes(2);
        let prof = norm_profile(&model, &[&zero, &a, &doubled], &probes, Role::O).unwrap();
        for block in 0..cfg().num_blocks {
            assert_eq!(prof.mean_for("untrained", block), 0.0);
            let single = prof.mean_for("a", block);
            let twice = prof.mean_for("a2", block);
            assert_relative_eq!(twice, 2.0 * single, max_relative = 1e-9);
        }
    }

    #[test]
    fn pearson_known_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_relative_eq!(pearson(&x, &y).unwrap(), 1.0, epsilon = 1e-12);
        let yneg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pearson(&x, &yneg).unwrap(), -1.0, epsilon = 1e-12);
        // direct-formula oracle for a short non-degenerate case
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_relative_eq!(r, 0.981980506061966, epsilon = 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(LionError::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(LionError::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn pearson_affine_invariance() {
        let x = [0.3, 1.7, 2.2, 4.8, 5.0];
        let y = [2.0, 1.1, 3.9, 4.2, 6.6];
        let r1 = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.5 * v + 11.0).collect();
        let y2: Vec<f64> = y.iter().map(|v| 0.25 * v - 2.0).collect();
        let r2 = pearson(&x2, &y2).unwrap();
        assert_relative_eq!(r1, r2, epsilon = 1e-12);
    }

    /// Frames with a single soft blob at the given scene position.
    fn blob_frames(positions: &[[f64; 2]], size: usize) -> Tensor<f64> {
        let v = positions.len();
        let mut t = Tensor::zeros(vec![v, size, size]);
        let sigma = 1.5;
        for (f, pos) in positions.iter().enumerate() {
            let px = (pos[0] + 1.0) / 2.0 * size as f64 - 0.5;
            let py = (pos[1] + 1.0) / 2.0 * size as f64 - 0.5;
            for iy in 0..size {
                for ix in 0..size {
                    let dx = ix as f64 - px;
                    let dy = iy as f64 - py;
                    let val = (-0.5 * (dx * dx + dy * dy) / (sigma * sigma)).exp();
                    t.data_mut()[f * size * size + iy * size + ix] = val;
                }
            }
        }
        t
    }

    #[test]
    fn static_clip_has_zero_motion() {
        let frames = blob_frames(&[[0.1, 0.2]; 4], 16);
        assert_relative_eq!(motion_magnitude(&frames).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn translating_clip_magnitude_matches_step() {
        let delta = 0.08;
        let positions: Vec<[f64; 2]> = (0..5).map(|i| [i as f64 * delta - 0.3, 0.0]).collect();
        let frames = blob_frames(&positions, 32);
        let m = motion_magnitude(&frames).unwrap();
        assert!((m - delta).abs() / delta < 0.1, "m = {m}, delta = {delta}");

        let positions2: Vec<[f64; 2]> = (0..5).map(|i| [i as f64 * 2.0 * delta - 0.3, 0.0]).collect();
        let frames2 = blob_frames(&positions2, 32);
        let m2 = motion_magnitude(&frames2).unwrap();
        assert!((m2 - 2.0 * m).abs() / (2.0 * m) < 0.1, "m2 = {m2}");
    }

    #[test]
    fn blank_frame_is_undefined_centroid() {
        let frames = Tensor::<f64>::zeros(vec![3, 8, 8]);
        assert!(matches!(
            motion_magnitude(&frames),
            Err(LionError::UndefinedCentroid { frame: 0 })
        ));
    }

    #[test]
    fn motion_magnitude_invariant_under_intensity_scaling() {
        let positions: Vec<[f64; 2]> = (0..5).map(|i| [i as f64 * 0.05, -0.1]).collect();
        let frames = blob_frames(&positions, 24);
        let scaled = frames.scale(0.37);
        assert_relative_eq!(
            motion_magnitude(&frames).unwrap(),
            motion_magnitude(&scaled).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn smoothness_of_straight_turn_and_orbit_paths() {
        // straight line
        let line: Vec<[f64; 2]> = (0..6).map(|i| [i as f64 * 0.1, 0.0]).collect();
        assert_relative_eq!(trajectory_smoothness_from_path(&line).unwrap(), 0.0, epsilon = 1e-12);

        // 90-degree turn mid-clip over V=5: angles [0, pi/2, 0] -> mean pi/6
        let turn = vec![[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [0.2, 0.1], [0.2, 0.2]];
        assert_relative_eq!(
            trajectory_smoothness_from_path(&turn).unwrap(),
            std::f64::consts::FRAC_PI_2 / 3.0,
            epsilon = 1e-12
        );

        // orbit: constant per-step angle
        let orbit: Vec<[f64; 2]> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.4;
                [a.cos() * 0.5, a.sin() * 0.5]
            })
            .collect();
        let s = trajectory_smoothness_from_path(&orbit).unwrap();
        assert_relative_eq!(s, 0.4, epsilon = 1e-9);
    }

    #[test]
    fn smoothness_invariant_under_global_rotation() {
        let path = vec![[0.0, 0.0], [0.1, 0.02], [0.25, 0.0], [0.3, 0.12], [0.33, 0.3]];
        let s1 = trajectory_smoothness_from_path(&path).unwrap();
        let theta: f64 = 0.83;
        let rotated: Vec<[f64; 2]> = path
            .iter()
            .map(|p| {
                [
                    p[0] * theta.cos() - p[1] * theta.sin(),
                    p[0] * theta.sin() + p[1] * theta.cos(),
                ]
            })
            .collect();
        let s2 = trajectory_smoothness_from_path(&rotated).unwrap();
        assert_relative_eq!(s1, s2, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_displacement_is_undefined_smoothness() {
        let path = vec![[0.5, 0.5]; 5];
        assert!(matches!(
            trajectory_smoothness_from_path(&path),
            Err(LionError::UndefinedSmoothness)
        ));
    }
}
