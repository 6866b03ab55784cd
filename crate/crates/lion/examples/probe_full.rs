// scratch calibration: adapter-quality matrix
use lion_lora::model::{DiT, ModelConfig};
use lion_lora::scaling::ClipSampler;
use lion_lora::synthbench::*;
use lion_lora::sampler::{ddim_sample, Conditioning};
use lion_lora::diagnostics::motion_magnitude;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig {
        num_blocks: 3, channels: 32, heads: 4, frames: 8,
        frame_size: 12, patch_size: 4, diffusion_steps: 200,
    };
    let clip_len = 120;
    let prim = MotionPrimitive { kind: PrimitiveKind::OffsetH, step: 0.004 };
    let sampler = ClipSampler::new(clip_len, cfg.frames).unwrap();

    let t0 = Instant::now();
    let mut model = DiT::<f32>::new(cfg.clone(), 10).unwrap();
    let static_clips = build_static_dataset(&cfg, 64, 4, 100).unwrap();
    let _ = pretrain_base(&mut model, &static_clips, 3000, 2e-3, 8, 11).unwrap();
    let mut mags = vec![];
    for e in 0..4 {
        let scene = generate_scene(5000 + e, 4).unwrap();
        let cond = render_static_clip(&scene, cfg.frames, cfg.frame_size).unwrap().frame(0);
        let f = ddim_sample(&model, &cond, 50, &Conditioning::Base, 77 + e).unwrap();
        mags.push(motion_magnitude(&f).unwrap_or(f64::NAN));
    }
    println!("pretrain {:?} floor {:.4}", t0.elapsed(), mags.iter().sum::<f64>()/4.0);

    let motion_clips = build_motion_dataset(cfg.frame_size, prim, 64, clip_len, 4, 200).unwrap();
    for (label, rank, batch, steps) in [
        ("rank8 bs8", 8usize, 8usize, 2000usize),
        ("rank16 bs8", 16, 8, 2000),
        ("rank4 bs8", 4, 8, 2000),
    ] {
        for arm in [TrainArm::ScalingToken, TrainArm::AdapterScale] {
            let t1 = Instant::now();
            let tc = TrainConfig { steps, rank, seed: 42, arm, learning_rate: 2e-3, batch_size: batch, ..TrainConfig::default() };
            let (set, emb, curve) = train_lora(&model, "offset_h", &motion_clips, &sampler, &tc).unwrap();
            let rep = eval_linearity(&model, &set, emb.as_ref(), arm, &[0.2,0.4,0.6,0.8,1.0], 4, 50, 31).unwrap();
            let mags: Vec<String> = rep.rows.iter().map(|(s,m,_)| format!("{s}:{m:.4}")).collect();
            println!("{label} {:?}: {:?} loss->{:.4} | {} | r = {:.4}",
                arm, t1.elapsed(), curve[steps-50..].iter().map(|(_,l)|l).sum::<f64>()/50.0,
                mags.join(" "), rep.pearson_r);
        }
    }
}
