//! Low-rank adapters attached to the model's linear layers.
//!
//! Each attachment point carries a factored pair `A (d_in x r)`, `B (r x
//! d_out)` whose product is the weight delta; the set-level `lambda` scales
//! how strongly the delta is injected on top of frozen base weights. Fusion
//! code also produces dense (pre-multiplied) deltas, which the same set type
//! carries for inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LionError, Result};
use crate::model::{ModelConfig, PointId};
use crate::scaling::ScalingEmbedder;
use crate::tensor::{Scalar, Tensor};
use crate::weights::{FileBuilder, WeightFile};

/// Per-point adapter weights: either the trainable factored form or a dense
/// delta produced by fusion.
#[derive(Debug, Clone)]
pub enum LoraWeights<T> {
    Factored { a: Tensor<T>, b: Tensor<T> },
    Dense { delta: Tensor<T> },
}

/// Adapter at one attachment point.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T> {
    pub weights: LoraWeights<T>,
    pub rank: usize,
}

impl<T: Scalar> LoraAdapter<T> {
    /// The weight delta `A B` (or the stored dense delta).
    pub fn delta_weight(&self) -> Result<Tensor<T>> {
        match &self.weights {
            LoraWeights::Factored { a, b } => a.matmul(b),
            LoraWeights::Dense { delta } => Ok(delta.clone()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match &self.weights {
            LoraWeights::Factored { a, b } => (a.rows(), b.cols()),
            LoraWeights::Dense { delta } => (delta.rows(), delta.cols()),
        }
    }
}

/// Metadata stored alongside an adapter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub name: String,
    pub rank: usize,
    pub lambda: f64,
    /// Free-form training provenance (primitive, steps, seed, arm).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

/// A named adapter: one [`LoraAdapter`] per attachment point, plus shared
/// metadata and the injection strength `lambda`.
#[derive(Debug, Clone)]
pub struct AdapterSet<T> {
    pub name: String,
    pub rank: usize,
    pub lambda: T,
    pub provenance: serde_json::Value,
    points: BTreeMap<PointId, LoraAdapter<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn empty(name: &str, rank: usize) -> Self {
        AdapterSet {
            name: name.to_string(),
            rank,
            lambda: T::one(),
            provenance: serde_json::Value::Null,
            points: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, point: PointId, adapter: LoraAdapter<T>) {
        self.points.insert(point, adapter);
    }

    pub fn point(&self, point: PointId) -> Option<&LoraAdapter<T>> {
        self.points.get(&point)
    }

    pub fn point_mut(&mut self, point: PointId) -> Option<&mut LoraAdapter<T>> {
        self.points.get_mut(&point)
    }

    pub fn points(&self) -> impl Iterator<Item = (&PointId, &LoraAdapter<T>)> {
        self.points.iter()
    }

    pub fn point_ids(&self) -> Vec<PointId> {
        self.points.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every attachment point must exist in the target model with matching
    /// layer dimensions.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let mut missing = Vec::new();
        for (point, lora) in &self.points {
            if point.block >= cfg.num_blocks {
                missing.push(point.to_string());
                continue;
            }
            let dims = cfg.point_dims(point.role);
            if lora.dims() != dims {
                return Err(LionError::Attachment(format!(
                    "adapter {:?} at {point} has dims {:?}, model expects {:?}",
                    self.name,
                    lora.dims(),
                    dims
                )));
            }
        }
        if !missing.is_empty() {
            return Err(LionError::Attachment(format!(
                "adapter {:?} targets unknown attachment points: {}",
                self.name,
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Effective weight at one point: `W_base + lambda * dW`.
    pub fn effective_weight(&self, w_base: &Tensor<T>, point: PointId, lambda: T) -> Result<Tensor<T>> {
        let lora = self
            .point(point)
            .ok_or_else(|| LionError::Attachment(format!("no adapter at {point}")))?;
        effective_weight(w_base, lora, lambda)
    }

    fn meta(&self) -> AdapterMeta {
        AdapterMeta {
            name: self.name.clone(),
            rank: self.rank,
            lambda: self.lambda.as_f64(),
            provenance: self.provenance.clone(),
        }
    }
}

/// `W_base + lambda * delta`, shapes checked.
pub fn effective_weight<T: Scalar>(
    w_base: &Tensor<T>,
    adapter: &LoraAdapter<T>,
    lambda: T,
) -> Result<Tensor<T>> {
    let delta = adapter.delta_weight()?;
    if delta.shape() != w_base.shape() {
        return Err(LionError::Attachment(format!(
            "delta shape {:?} does not match base {:?}",
            delta.shape(),
            w_base.shape()
        )));
    }
    w_base.add(&delta.scale(lambda))
}

/// Fresh adapter for every attachment point of `cfg`: `A` Gaussian with
/// std 0.02, `B` zero, so the initial delta is exactly zero.
pub fn init_adapter<T: Scalar>(cfg: &ModelConfig, rank: usize, seed: u64) -> Result<AdapterSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = AdapterSet::empty("untrained", rank);
    for point in cfg.points() {
        let (d_in, d_out) = cfg.point_dims(point.role);
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(LionError::Config(format!(
                "rank {rank} invalid at {point} with dims {d_in}x{d_out}"
            )));
        }
        let a = Tensor::randn(vec![d_in, rank], T::from_f64(0.02), &mut rng);
        let b = Tensor::zeros(vec![rank, d_out]);
        set.insert(point, LoraAdapter { weights: LoraWeights::Factored { a, b }, rank });
    }
    Ok(set)
}

// ── Serialization ────────────────────────────────────────────────────

fn adapter_section_name(name: &str) -> String {
    format!("adapter/{name}")
}

fn scaling_section_name(name: &str) -> String {
    format!("scaling/{name}")
}

/// Add an adapter set (and optionally its scaling embedder) to a weight file
/// under `adapter/<name>` and `scaling/<name>` sections.
pub fn add_adapters_to_file<T: Scalar>(
    fb: &mut FileBuilder,
    set: &AdapterSet<T>,
    embedder: Option<&ScalingEmbedder<T>>,
) -> Result<()> {
    let meta = serde_json::to_value(set.meta())?;
    fb.begin_section(&adapter_section_name(&set.name), meta);
    for (point, lora) in set.points() {
        match &lora.weights {
            LoraWeights::Factored { a, b } => {
                fb.add_tensor(&format!("{point}.a"), a);
                fb.add_tensor(&format!("{point}.b"), b);
            }
            LoraWeights::Dense { delta } => {
                fb.add_tensor(&format!("{point}.delta"), delta);
            }
        }
    }
    if let Some(emb) = embedder {
        emb.add_to_file(fb, &scaling_section_name(&set.name));
    }
    Ok(())
}

/// Save one adapter set to its own weight file.
pub fn save_adapters<T: Scalar>(
    set: &AdapterSet<T>,
    embedder: Option<&ScalingEmbedder<T>>,
    path: &Path,
) -> Result<()> {
    let mut fb = FileBuilder::new();
    add_adapters_to_file(&mut fb, set, embedder)?;
    fb.write(path)
}

/// Load the first `adapter/...` section of a weight file, plus its scaling
/// embedder when present.
pub fn load_adapters<T: Scalar>(path: &Path) -> Result<(AdapterSet<T>, Option<ScalingEmbedder<T>>)> {
    let wf = WeightFile::read(path)?;
    let section_name = wf
        .section_names()
        .find(|n| n.starts_with("adapter/"))
        .map(str::to_string)
        .ok_or_else(|| LionError::MissingEntry("no adapter/ section in file".into()))?;
    let section = wf.section(&section_name)?;
    let meta: AdapterMeta = serde_json::from_value(section.meta.clone())
        .map_err(|e| LionError::HeaderParse(format!("adapter meta: {e}")))?;

    let mut set = AdapterSet::empty(&meta.name, meta.rank);
    set.lambda = T::from_f64(meta.lambda);
    set.provenance = meta.provenance;

    let names: Vec<String> = section.tensor_names().map(str::to_string).collect();
    for n in &names {
        if let Some(stem) = n.strip_suffix(".a") {
            let point = PointId::parse(stem)?;
            let a: Tensor<T> = section.tensor(n)?;
            let b: Tensor<T> = section.tensor(&format!("{stem}.b"))?;
            let rank = a.cols();
            set.insert(point, LoraAdapter { weights: LoraWeights::Factored { a, b }, rank });
        } else if let Some(stem) = n.strip_suffix(".delta") {
            let point = PointId::parse(stem)?;
            let delta: Tensor<T> = section.tensor(n)?;
            set.insert(point, LoraAdapter { weights: LoraWeights::Dense { delta }, rank: meta.rank });
        }
    }

    let embedder = match wf.has_section(&scaling_section_name(&meta.name)) {
        true => Some(ScalingEmbedder::from_file(
            &wf,
            &scaling_section_name(&meta.name),
        )?),
        false => None,
    };
    Ok((set, embedder))
}
