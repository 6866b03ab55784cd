//! Weight-space fusion: plain linear combination vs norm-consistent
//! rescaling, and why the latter keeps any one adapter from dominating.
//!
//! ```bash
//! cargo run --release --example fuse_norm_consistency
//! ```

use lion_lora::adapter::{init_adapter, LoraWeights};
use lion_lora::fusion::{compute_alpha, norm_consistent_fuse, vanilla_fuse, FusionMode, FusionPlan};
use lion_lora::model::{ModelConfig, PointId, Role};
use lion_lora::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lion_lora::Result<()> {
    let cfg = ModelConfig {
        num_blocks: 2,
        channels: 16,
        heads: 2,
        frames: 2,
        frame_size: 8,
        patch_size: 4,
        diffusion_steps: 50,
    };

    // Three adapters with deliberately unbalanced delta norms.
    let mut sets = Vec::new();
    for (i, scale) in [0.1f64, 0.5, 2.0].iter().enumerate() {
        let mut set = init_adapter::<f64>(&cfg, 4, i as u64)?;
        set.name = format!("adapter_{i}");
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        for point in cfg.points() {
            if let LoraWeights::Factored { b, .. } = &mut set.point_mut(point).unwrap().weights {
                *b = Tensor::randn(b.shape().to_vec(), 0.2 * scale, &mut rng);
            }
        }
        sets.push(set);
    }

    let probe = PointId { block: 0, role: Role::Q };
    let norms: Vec<f64> = sets
        .iter()
        .map(|s| s.point(probe).unwrap().delta_weight().unwrap().frobenius_norm().unwrap())
        .collect();
    println!("delta norms at {probe}: {norms:.4?}");
    println!("alpha (their mean): {:.4}", compute_alpha(&norms)?);

    let plan = FusionPlan::new(sets.iter().collect(), FusionMode::Vanilla);
    let fused = vanilla_fuse(&plan)?;
    println!(
        "vanilla fused norm at {probe}: {:.4}  (dominated by the largest input)",
        fused.point(probe).unwrap().delta_weight()?.frobenius_norm()?
    );

    let plan = FusionPlan::new(sets.iter().collect(), FusionMode::NormConsistent);
    let (fused, report) = norm_consistent_fuse(&plan)?;
    println!(
        "norm-consistent fused norm at {probe}: {:.4}",
        fused.point(probe).unwrap().delta_weight()?.frobenius_norm()?
    );

    println!("\nnorm report (first attachment point):");
    for row in report.rows.iter().filter(|r| r.attachment_id == probe.to_string()) {
        println!(
            "  {}: norm {:.4} -> scale {:.3} -> {:.4} (alpha {:.4})",
            row.adapter_name, row.norm_before, row.scale_factor, row.norm_after, row.alpha
        );
    }

    let csv = report.to_csv_string()?;
    println!("\nreport CSV header: {}", csv.lines().next().unwrap());
    println!("({} rows total, one per adapter per attachment point)", report.rows.len());
    Ok(())
}
