//! Weight-space fusion of adapter sets.
//!
//! Two modes: a plain linear combination of deltas, and a norm-consistent
//! variant that first rescales every adapter's delta to a shared per-point
//! Frobenius norm `alpha` (the mean of the input norms at that attachment
//! point) before combining. Norm discrepancies are not uniform across
//! blocks, so `alpha` is computed per attachment point, never globally.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, LoraAdapter, LoraWeights};
use crate::error::{LionError, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Vanilla,
    NormConsistent,
}

/// What to fuse and how.
#[derive(Debug, Clone)]
pub struct FusionPlan<'a, T> {
    pub adapters: Vec<&'a AdapterSet<T>>,
    pub lambdas: Vec<T>,
    pub mode: FusionMode,
    /// Overrides the per-point mean norm when set.
    pub alpha_override: Option<T>,
}

impl<'a, T: Scalar> FusionPlan<'a, T> {
    /// Plan with unit lambdas.
    pub fn new(adapters: Vec<&'a AdapterSet<T>>, mode: FusionMode) -> Self {
        let lambdas = vec![T::one(); adapters.len()];
        FusionPlan { adapters, lambdas, mode, alpha_override: None }
    }

    fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(LionError::Fusion("no adapters to fuse".into()));
        }
        if self.lambdas.len() != self.adapters.len() {
            return Err(LionError::Fusion(format!(
                "{} adapters but {} lambdas",
                self.adapters.len(),
                self.lambdas.len()
            )));
        }
        let first = self.adapters[0].point_ids();
        for set in &self.adapters[1..] {
            let ids = set.point_ids();
            if ids != first {
                let missing: Vec<String> = first
                    .iter()
                    .filter(|p| !ids.contains(p))
                    .map(|p| p.to_string())
                    .collect();
                let extra: Vec<String> = ids
                    .iter()
                    .filter(|p| !first.contains(p))
                    .map(|p| p.to_string())
                    .collect();
                return Err(LionError::Fusion(format!(
                    "adapter {:?} disagrees on attachment points (missing: [{}], extra: [{}])",
                    set.name,
                    missing.join(", "),
                    extra.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// One attachment point's worth of norm bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct NormReportRow {
    pub attachment_id: String,
    pub adapter_name: String,
    pub norm_before: f64,
    pub alpha: f64,
    pub scale_factor: f64,
    pub norm_after: f64,
}

/// Per-point norms, the alpha used, and the applied scale factors.
#[derive(Debug, Clone, Default)]
pub struct NormReport {
    pub rows: Vec<NormReportRow>,
}

impl NormReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| LionError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Mean of the per-adapter norms; every norm must be positive.
pub fn compute_alpha<T: Scalar>(norms: &[T]) -> Result<T> {
    if norms.is_empty() {
        return Err(LionError::Fusion("alpha over zero adapters".into()));
    }
    if norms.iter().any(|n| *n <= T::zero()) {
        return Err(LionError::DegenerateAdapter { point: "(norm input)".into() });
    }
    let mut sum = T::zero();
    for &n in norms {
        sum = sum + n;
    }
    Ok(sum / T::from_f64(norms.len() as f64))
}

/// Plain linear combination: per point, `dW = sum_i lambda_i dW_i`,
/// materialized as dense deltas.
pub fn vanilla_fuse<T: Scalar>(plan: &FusionPlan<'_, T>) -> Result<AdapterSet<T>> {
    plan.validate()?;
    let mut fused = fused_shell(plan, "vanilla");
    for point in plan.adapters[0].point_ids() {
        let mut acc = plan.adapters[0]
            .point(point)
            .expect("validated")
            .delta_weight()?
            .scale(plan.lambdas[0]);
        for (set, &lambda) in plan.adapters.iter().zip(plan.lambdas.iter()).skip(1) {
            let delta = set.point(point).expect("validated").delta_weight()?;
            acc = acc.add(&delta.scale(lambda))?;
        }
        fused.insert(
            point,
            LoraAdapter { weights: LoraWeights::Dense { delta: acc }, rank: plan.adapters[0].rank },
        );
    }
    Ok(fused)
}

/// Rescale every adapter's delta to the shared per-point norm `alpha`
/// without combining. Returns the rescaled sets (dense deltas) plus the
/// report. This is what partitioned-attention fusion consumes per branch.
pub fn norm_scaled_sets<T: Scalar>(
    plan: &FusionPlan<'_, T>,
) -> Result<(Vec<AdapterSet<T>>, NormReport)> {
    plan.validate()?;
    let mut outs: Vec<AdapterSet<T>> = plan
        .adapters
        .iter()
        .map(|set| {
            let mut s = AdapterSet::empty(&set.name, set.rank);
            s.lambda = set.lambda;
            s.provenance = set.provenance.clone();
            s
        })
        .collect();
    let mut report = NormReport::default();

    for point in plan.adapters[0].point_ids() {
        let deltas: Vec<_> = plan
            .adapters
            .iter()
            .map(|set| set.point(point).expect("validated").delta_weight())
            .collect::<Result<_>>()?;
        let norms: Vec<T> = deltas
            .iter()
            .map(|d| d.frobenius_norm())
            .collect::<Result<_>>()?;
        if let Some(i) = norms.iter().position(|n| *n <= T::zero()) {
            return Err(LionError::DegenerateAdapter {
                point: format!("{point} (adapter {:?})", plan.adapters[i].name),
            });
        }
        let alpha = match plan.alpha_override {
            Some(a) => a,
            None => compute_alpha(&norms)?,
        };
        for (i, (delta, norm)) in deltas.into_iter().zip(norms.iter()).enumerate() {
            let scale = alpha / *norm;
            let rescaled = delta.scale(scale);
            report.rows.push(NormReportRow {
                attachment_id: point.to_string(),
                adapter_name: plan.adapters[i].name.clone(),
                norm_before: norm.as_f64(),
                alpha: alpha.as_f64(),
                scale_factor: scale.as_f64(),
                norm_after: rescaled.frobenius_norm()?.as_f64(),
            });
            outs[i].insert(
                point,
                LoraAdapter {
                    weights: LoraWeights::Dense { delta: rescaled },
                    rank: plan.adapters[i].rank,
                },
            );
        }
    }
    Ok((outs, report))
}

/// Norm-consistent fusion: per point, rescale each delta to norm `alpha`,
/// then combine with the plan's lambdas.
pub fn norm_consistent_fuse<T: Scalar>(
    plan: &FusionPlan<'_, T>,
) -> Result<(AdapterSet<T>, NormReport)> {
    if plan.mode != FusionMode::NormConsistent {
        return Err(LionError::Fusion("plan mode is not norm_consistent".into()));
    }
    let (scaled, report) = norm_scaled_sets(plan)?;
    let mut fused = fused_shell(plan, "norm_consistent");
    for point in plan.adapters[0].point_ids() {
        let mut acc = scaled[0].point(point).unwrap().delta_weight()?.scale(plan.lambdas[0]);
        for (set, &lambda) in scaled.iter().zip(plan.lambdas.iter()).skip(1) {
            acc = acc.add(&set.point(point).unwrap().delta_weight()?.scale(lambda))?;
        }
        fused.insert(
            point,
            LoraAdapter { weights: LoraWeights::Dense { delta: acc }, rank: plan.adapters[0].rank },
        );
    }
    Ok((fused, report))
}

fn fused_shell<T: Scalar>(plan: &FusionPlan<'_, T>, mode: &str) -> AdapterSet<T> {
    let names: Vec<&str> = plan.adapters.iter().map(|a| a.name.as_str()).collect();
    let mut shell = AdapterSet::empty(&format!("fused({})", names.join("+")), plan.adapters[0].rank);
    shell.provenance = serde_json::json!({
        "mode": mode,
        "sources": names,
        "lambdas": plan.lambdas.iter().map(|l| l.as_f64()).collect::<Vec<_>>(),
    });
    shell
}
