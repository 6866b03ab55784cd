//! Measuring adapters: per-block cosine similarity between two adapters'
//! contributions, per-block contribution norms, Pearson correlation, and
//! the centroid-based motion metrics.
//!
//! ```bash
//! cargo run --release --example diagnostics_report
//! ```

use lion_lora::adapter::{init_adapter, LoraWeights};
use lion_lora::diagnostics::{
    layerwise_cosine, motion_magnitude, norm_profile, norm_rows, pearson, similarity_rows,
    trajectory_smoothness, write_profile_csv, write_svg_lines,
};
use lion_lora::model::{DiT, ModelConfig, Role};
use lion_lora::synthbench::{
    build_probe_batch, generate_scene, render_clip, MotionPrimitive, PrimitiveKind,
};
use lion_lora::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lion_lora::Result<()> {
    let cfg = ModelConfig {
        num_blocks: 4,
        channels: 32,
        heads: 4,
        frames: 6,
        frame_size: 12,
        patch_size: 4,
        diffusion_steps: 200,
    };
    let model = DiT::<f32>::new(cfg.clone(), 3)?;
    let probes = build_probe_batch(&cfg, 8, 4, 50)?;

    // Two random adapters stand in for trained ones here; the acceptance
    // suite runs this on actually-trained primitives.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut make = |name: &str, seed: u64| -> lion_lora::Result<_> {
        let mut set = init_adapter::<f32>(&cfg, 4, seed)?;
        set.name = name.into();
        for point in cfg.points() {
            if let LoraWeights::Factored { b, .. } = &mut set.point_mut(point).unwrap().weights {
                *b = Tensor::randn(b.shape().to_vec(), 0.1, &mut rng);
            }
        }
        Ok(set)
    };
    let set_a = make("pan", 31)?;
    let set_b = make("tilt", 32)?;

    let profile = layerwise_cosine(&model, &set_a, &set_b, &probes, Role::O)?;
    println!("per-block cosine similarity of contribution activations:");
    for b in &profile.per_block {
        println!("  block {}: {:+.4} +- {:.4}", b.block_index, b.mean, b.std);
    }

    let norms = norm_profile(&model, &[&set_a, &set_b], &probes, Role::O)?;
    println!("mean contribution norms (block 0): pan {:.4}, tilt {:.4}",
        norms.mean_for("pan", 0), norms.mean_for("tilt", 0));

    // Motion metrics on a rendered clip.
    let scene = generate_scene(5, 4)?;
    let clip = render_clip(&scene, MotionPrimitive::default_for(PrimitiveKind::Orbit), 60, 16)?;
    println!(
        "orbit clip: motion magnitude {:.4}, trajectory smoothness {:.4} rad/step",
        motion_magnitude(&clip.frames)?,
        trajectory_smoothness(&clip.frames)?
    );

    // Pearson on a nearly-linear relation.
    let xs = [0.2, 0.4, 0.6, 0.8, 1.0];
    let ys = [0.011, 0.019, 0.032, 0.041, 0.052];
    println!("pearson r of a nearly-linear sweep: {:.4}", pearson(&xs, &ys)?);

    // CSV and SVG outputs as the CLI writes them.
    let dir = std::env::temp_dir().join("lion_example_diagnostics");
    std::fs::create_dir_all(&dir)?;
    let mut rows = similarity_rows(&profile, "pan|tilt");
    rows.extend(norm_rows(&norms));
    write_profile_csv(&dir.join("profiles.csv"), &rows)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = vec![(
        "pan|tilt".into(),
        profile.per_block.iter().map(|b| (b.block_index as f64, b.mean)).collect(),
    )];
    write_svg_lines(&dir.join("similarity.svg"), "per-block cosine similarity", &series)?;
    println!("wrote profiles.csv and similarity.svg under {}", dir.display());
    Ok(())
}
