//! Amplitude control through a scaling token.
//!
//! A scalar amplitude `S` in `[s_min, 1]` is Fourier-embedded, projected by a
//! per-adapter linear layer into one token row, and appended to the
//! transformer's token sequence. The same `S` drives training-pair
//! construction: a clip of `N` frames contributes its first `ceil(N * S)`
//! frames, from which `V` are sampled uniformly, so larger `S` means faster
//! apparent motion across the sampled frames.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LionError, Result};
use crate::model::{Bindings, ParamKey};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{FileBuilder, WeightFile};

/// Interleaved `[sin(2^j pi S), cos(2^j pi S)]` pairs for `j = 0..J-1`,
/// concatenated into a length-`2J` vector.
pub fn fourier_embed(s: f64, j_count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * j_count);
    for j in 0..j_count {
        let angle = (1u64 << j) as f64 * PI * s;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Per-adapter projection of the Fourier embedding into one token row.
#[derive(Debug, Clone)]
pub struct ScalingEmbedder<T> {
    pub name: String,
    /// Frequency count J; the embedding has length 2J.
    pub freq_count: usize,
    /// Projection, `2J x d`.
    pub proj: Tensor<T>,
    /// Bias, `d`.
    pub bias: Tensor<T>,
    /// Smallest admissible scaling value.
    pub s_min: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedderMeta {
    name: String,
    freq_count: usize,
    s_min: f64,
}

pub const DEFAULT_FREQ_COUNT: usize = 8;

impl<T: Scalar> ScalingEmbedder<T> {
    /// Fresh embedder: projection Gaussian with std `1/sqrt(J)`, bias zero.
    /// `|gamma(S)|^2 = J` exactly (one sin/cos pair per frequency), so this
    /// init gives token entries unit variance and the token is as salient to
    /// attention as any other row from the first step.
    pub fn new(name: &str, freq_count: usize, channels: usize, s_min: f64, seed: u64) -> Result<Self> {
        if freq_count == 0 {
            return Err(LionError::Config("frequency count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&s_min) {
            return Err(LionError::Config(format!("s_min {s_min} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (freq_count as f64).sqrt();
        Ok(ScalingEmbedder {
            name: name.to_string(),
            freq_count,
            proj: Tensor::randn(vec![2 * freq_count, channels], T::from_f64(std), &mut rng),
            bias: Tensor::zeros(vec![channels]),
            s_min,
        })
    }

    pub fn check_range(&self, s: f64) -> Result<()> {
        if !(self.s_min..=1.0).contains(&s) {
            return Err(LionError::ScalingRange { value: s, min: self.s_min });
        }
        Ok(())
    }

    fn gamma_row(&self, s: f64) -> Tensor<T> {
        let gamma: Vec<T> = fourier_embed(s, self.freq_count).iter().map(|&v| T::from_f64(v)).collect();
        Tensor::from_vec(vec![1, 2 * self.freq_count], gamma).expect("length 2J")
    }

    /// `E = gamma(S) P + bias`, as a plain token.
    pub fn make_scaling_token(&self, s: f64) -> Result<ScalingToken<T>> {
        self.check_range(s)?;
        let e = self.gamma_row(s).matmul(&self.proj)?;
        let mut e = e;
        for (v, b) in e.data_mut().iter_mut().zip(self.bias.data().iter()) {
            *v = *v + *b;
        }
        Ok(ScalingToken { embedding: e, s, adapter: self.name.clone() })
    }

    /// Token row built on a tape; with `trainable`, the projection and bias
    /// are registered as parameters so they train jointly with the adapter.
    pub fn token_on_tape(
        &self,
        tape: &mut Tape<T>,
        s: f64,
        trainable: bool,
        bindings: &mut Bindings,
    ) -> Result<Var> {
        self.check_range(s)?;
        let gamma = self.gamma_row(s);
        let gv = tape.constant(&gamma);
        let (pv, bv) = if trainable {
            let pv = tape.param(&self.proj);
            let bv = tape.param(&self.bias);
            bindings.entries.push((ParamKey::EmbedProj, pv));
            bindings.entries.push((ParamKey::EmbedBias, bv));
            (pv, bv)
        } else {
            (tape.constant(&self.proj), tape.constant(&self.bias))
        };
        let e = tape.matmul(gv, pv)?;
        tape.add_row_broadcast(e, bv)
    }

    pub fn add_to_file(&self, fb: &mut FileBuilder, section: &str) {
        let meta = serde_json::to_value(EmbedderMeta {
            name: self.name.clone(),
            freq_count: self.freq_count,
            s_min: self.s_min,
        })
        .expect("meta serializes");
        fb.begin_section(section, meta);
        fb.add_tensor("proj", &self.proj);
        fb.add_tensor("bias", &self.bias);
    }

    pub fn from_file(wf: &WeightFile, section: &str) -> Result<Self> {
        let sec = wf.section(section)?;
        let meta: EmbedderMeta = serde_json::from_value(sec.meta.clone())
            .map_err(|e| LionError::HeaderParse(format!("embedder meta: {e}")))?;
        Ok(ScalingEmbedder {
            name: meta.name,
            freq_count: meta.freq_count,
            proj: sec.tensor("proj")?,
            bias: sec.tensor("bias")?,
            s_min: meta.s_min,
        })
    }

    pub fn to_f64(&self) -> ScalingEmbedder<f64> {
        ScalingEmbedder {
            name: self.name.clone(),
            freq_count: self.freq_count,
            proj: self.proj.to_f64(),
            bias: self.bias.to_f64(),
            s_min: self.s_min,
        }
    }
}

/// A scaling token: one embedded row, its source amplitude, and the adapter
/// it belongs to.
#[derive(Debug, Clone)]
pub struct ScalingToken<T> {
    embedding: Tensor<T>,
    s: f64,
    adapter: String,
}

impl<T: Scalar> ScalingToken<T> {
    /// The embedded row, `1 x d`.
    pub fn embedding(&self) -> &Tensor<T> {
        &self.embedding
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn adapter(&self) -> &str {
        &self.adapter
    }
}

/// Append one token row to a token sequence: rows `0..n-1` are `h`
/// unchanged, row `n` is the token.
pub fn augment_sequence<T: Scalar>(h: &Tensor<T>, token: &ScalingToken<T>) -> Result<Tensor<T>> {
    let e = token.embedding();
    if !h.is_matrix() || h.cols() != e.cols() {
        return Err(LionError::DimensionMismatch {
            ctx: "augment_sequence",
            lhs: h.shape().to_vec(),
            rhs: e.shape().to_vec(),
        });
    }
    let mut data = h.data().to_vec();
    data.extend_from_slice(e.data());
    Tensor::from_vec(vec![h.rows() + 1, h.cols()], data)
}

/// Uniform frame subsampling driven by `S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSampler {
    /// Full clip length N.
    pub clip_length: usize,
    /// Frames per training sample V.
    pub frames: usize,
}

impl ClipSampler {
    pub fn new(clip_length: usize, frames: usize) -> Result<Self> {
        if frames < 2 || clip_length < frames {
            return Err(LionError::Config(format!(
                "need clip_length >= frames >= 2, got N={clip_length}, V={frames}"
            )));
        }
        Ok(ClipSampler { clip_length, frames })
    }

    /// Camera preset: 49 frames sampled from 600-frame clips.
    pub fn camera_preset() -> Self {
        ClipSampler { clip_length: 600, frames: 49 }
    }

    /// Object-motion preset: 49 frames sampled from 240-frame clips.
    pub fn object_motion_preset() -> Self {
        ClipSampler { clip_length: 240, frames: 49 }
    }

    /// Minimal scaling value `s = V / N`.
    pub fn s_min(&self) -> f64 {
        self.frames as f64 / self.clip_length as f64
    }

    /// Indices of the `V` frames drawn uniformly from the first
    /// `ceil(N * S)` frames. Non-decreasing, within `[0, M-1]`.
    pub fn sample_frame_indices(&self, s: f64) -> Result<Vec<usize>> {
        if !(self.s_min()..=1.0).contains(&s) {
            return Err(LionError::ScalingRange { value: s, min: self.s_min() });
        }
        let m = (self.clip_length as f64 * s).ceil() as usize;
        debug_assert!(m >= self.frames);
        let v = self.frames;
        Ok((0..v).map(|t| t * (m - 1) / (v - 1)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fourier_embed_at_zero_alternates() {
        let g = fourier_embed(0.0, 5);
        for (i, v) in g.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn fourier_embed_half_exact_values() {
        let g = fourier_embed(0.5, 2);
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-15); // sin(pi/2)
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-15); // cos(pi/2)
        assert_relative_eq!(g[2], 0.0, epsilon = 1e-15); // sin(pi)
        assert_relative_eq!(g[3], -1.0, epsilon = 1e-15); // cos(pi)
    }

    #[test]
    fn fourier_embed_matches_direct_trig() {
        let s = 0.381;
        let g = fourier_embed(s, 8);
        for j in 0..8 {
            let angle = 2f64.powi(j as i32) * PI * s;
            assert_relative_eq!(g[2 * j], angle.sin(), epsilon = 1e-12);
            assert_relative_eq!(g[2 * j + 1], angle.cos(), epsilon = 1e-12);
        }
    }

    #[test]
    fn fourier_embed_is_two_periodic() {
        let s = 0.377;
        let a = fourier_embed(s, 8);
        let b = fourier_embed(s + 2.0, 8);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn token_is_bias_when_projection_is_zero() {
        let mut emb = ScalingEmbedder::<f64>::new("x", 4, 6, 0.1, 1).unwrap();
        emb.proj = Tensor::zeros(vec![8, 6]);
        emb.bias = Tensor::from_vec(vec![6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tok = emb.make_scaling_token(0.5).unwrap();
        assert_eq!(tok.embedding().data(), emb.bias.data());
    }

    #[test]
    fn token_is_deterministic_and_s_sensitive() {
        let emb = ScalingEmbedder::<f64>::new("x", 8, 16, 0.1, 7).unwrap();
        let t1 = emb.make_scaling_token(0.4).unwrap();
        let t2 = emb.make_scaling_token(0.4).unwrap();
        assert_eq!(t1.embedding().data(), t2.embedding().data());
        let t3 = emb.make_scaling_token(0.9).unwrap();
        assert_ne!(t1.embedding().data(), t3.embedding().data());
    }

    #[test]
    fn token_range_is_enforced() {
        let emb = ScalingEmbedder::<f64>::new("x", 8, 16, 0.2, 7).unwrap();
        assert!(matches!(
            emb.make_scaling_token(0.1),
            Err(LionError::ScalingRange { .. })
        ));
        assert!(matches!(
            emb.make_scaling_token(1.2),
            Err(LionError::ScalingRange { .. })
        ));
    }

    #[test]
    fn augment_appends_without_mutating() {
        let emb = ScalingEmbedder::<f64>::new("x", 4, 8, 0.1, 3).unwrap();
        let tok = emb.make_scaling_token(0.7).unwrap();
        let h = Tensor::<f64>::ones(vec![9, 8]);
        let out = augment_sequence(&h, &tok).unwrap();
        assert_eq!(out.shape(), &[10, 8]);
        assert_eq!(&out.data()[..72], h.data());
        assert_eq!(&out.data()[72..], tok.embedding().data());
    }

    #[test]
    fn augment_rejects_channel_mismatch() {
        let emb = ScalingEmbedder::<f64>::new("x", 4, 8, 0.1, 3).unwrap();
        let tok = emb.make_scaling_token(0.7).unwrap();
        let h = Tensor::<f64>::ones(vec![9, 16]);
        assert!(augment_sequence(&h, &tok).is_err());
    }

    #[test]
    fn sampler_minimal_s_takes_all_frames() {
        let sampler = ClipSampler::camera_preset();
        assert_relative_eq!(sampler.s_min(), 49.0 / 600.0);
        let idx = sampler.sample_frame_indices(49.0 / 600.0).unwrap();
        assert_eq!(idx, (0..49).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_full_s_spans_clip() {
        let sampler = ClipSampler::camera_preset();
        let idx = sampler.sample_frame_indices(1.0).unwrap();
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 599);
    }

    #[test]
    fn sampler_object_preset_formula() {
        let sampler = ClipSampler::object_motion_preset();
        assert_relative_eq!(sampler.s_min(), 49.0 / 240.0);
        let idx = sampler.sample_frame_indices(0.5).unwrap();
        // M = 120; floor(t * 119 / 48)
        for (t, &i) in idx.iter().enumerate() {
            assert_eq!(i, t * 119 / 48);
        }
    }

    #[test]
    fn sampler_monotone_in_s() {
        let sampler = ClipSampler::new(120, 13).unwrap();
        let mut last_final = 0;
        for k in 0..=20 {
            let s = sampler.s_min() + (1.0 - sampler.s_min()) * k as f64 / 20.0;
            let idx = sampler.sample_frame_indices(s).unwrap();
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            assert!(*idx.last().unwrap() >= last_final);
            last_final = *idx.last().unwrap();
        }
    }

    #[test]
    fn sampler_rejects_out_of_range() {
        let sampler = ClipSampler::new(120, 13).unwrap();
        assert!(sampler.sample_frame_indices(0.05).is_err());
        assert!(sampler.sample_frame_indices(1.01).is_err());
    }
}
