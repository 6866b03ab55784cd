//! End-to-end training at demo scale: pre-train the base on static clips,
//! train one adapter on horizontal motion, save, reload, verify.
//!
//! Step counts here are cut far below the defaults so the example finishes
//! in about a minute; the acceptance suite runs the full schedule.
//!
//! ```bash
//! cargo run --release --example train_adapter
//! ```

use lion_lora::adapter::{load_adapters, save_adapters};
use lion_lora::model::{DiT, ModelConfig};
use lion_lora::scaling::ClipSampler;
use lion_lora::synthbench::{
    build_motion_dataset, build_static_dataset, pretrain_base, train_lora, MotionPrimitive,
    PrimitiveKind, TrainArm, TrainConfig,
};

fn main() -> lion_lora::Result<()> {
    let cfg = ModelConfig {
        num_blocks: 2,
        channels: 32,
        heads: 4,
        frames: 6,
        frame_size: 12,
        patch_size: 4,
        diffusion_steps: 200,
    };
    let clip_len = 120;

    println!("pre-training the base on static clips...");
    let mut model = DiT::<f32>::new(cfg.clone(), 1)?;
    let static_clips = build_static_dataset(&cfg, 24, 4, 10)?;
    let curve = pretrain_base(&mut model, &static_clips, 600, 2e-3, 4, 11)?;
    println!(
        "  loss {:.4} -> {:.4} over {} steps",
        curve[0].1,
        curve.last().unwrap().1,
        curve.len()
    );

    println!("training an offset_h adapter (scaling-token arm)...");
    let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
    let clips = build_motion_dataset(cfg.frame_size, prim, 24, clip_len, 4, 20)?;
    let sampler = ClipSampler::new(clip_len, cfg.frames)?;
    let train_cfg = TrainConfig {
        steps: 400,
        rank: 8,
        seed: 7,
        arm: TrainArm::ScalingToken,
        learning_rate: 2e-3,
        ..TrainConfig::default()
    };
    let (set, embedder, curve) = train_lora(&model, "offset_h", &clips, &sampler, &train_cfg)?;
    println!(
        "  loss {:.4} -> {:.4}; adapter covers {} attachment points at rank {}",
        curve[0].1,
        curve.last().unwrap().1,
        set.len(),
        set.rank
    );

    let dir = std::env::temp_dir().join("lion_example_adapter");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("offset_h.lw");
    save_adapters(&set, embedder.as_ref(), &path)?;
    let (reloaded, emb2) = load_adapters::<f32>(&path)?;
    assert_eq!(reloaded.len(), set.len());
    assert!(emb2.is_some());
    println!("saved to {} and reloaded: {} points, embedder present", path.display(), reloaded.len());

    // Round trip is exact: compare one delta bit for bit.
    let point = cfg.points()[0];
    let d1 = set.point(point).unwrap().delta_weight()?;
    let d2 = reloaded.point(point).unwrap().delta_weight()?;
    assert!(d1.data().iter().zip(d2.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    println!("round-tripped delta at {point} is bit-identical");
    Ok(())
}
