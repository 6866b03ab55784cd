// scratch: base generation quality vs config
use lion_lora::model::{DiT, ModelConfig};
use lion_lora::sampler::{ddim_sample, Conditioning};
use lion_lora::synthbench::*;
use lion_lora::diagnostics::motion_magnitude;
use std::time::Instant;

fn floor_for(cfg: &ModelConfig, lr: f64, batch: usize, steps: usize) -> (f64, f64, std::time::Duration) {
    let t0 = Instant::now();
    let mut model = DiT::<f32>::new(cfg.clone(), 10).unwrap();
    let clips = build_static_dataset(cfg, 64, 4, 100).unwrap();
    let curve = pretrain_base(&mut model, &clips, steps, lr, batch, 11).unwrap();
    let tail = curve[steps-50..].iter().map(|(_,l)|l).sum::<f64>()/50.0;
    let mut mags = vec![];
    for e in 0..4 {
        let scene = generate_scene(5000 + e, 4).unwrap();
        let cond = render_static_clip(&scene, cfg.frames, cfg.frame_size).unwrap().frame(0);
        let f = ddim_sample(&model, &cond, 50, &Conditioning::Base, 77 + e).unwrap();
        mags.push(motion_magnitude(&f).unwrap_or(f64::NAN));
    }
    let floor = mags.iter().sum::<f64>() / mags.len() as f64;
    (tail, floor, t0.elapsed())
}

fn main() {
    let base = ModelConfig { num_blocks: 3, channels: 32, heads: 4, frames: 8, frame_size: 12, patch_size: 4, diffusion_steps: 200 };
    for (label, cfg, lr, batch) in [
        ("d32 b3 lr2e-3 bs4", base.clone(), 2e-3, 4),
        ("d32 b3 lr2e-3 bs8", base.clone(), 2e-3, 8),
        ("d48 b4 lr2e-3 bs4", ModelConfig { channels: 48, num_blocks: 4, ..base.clone() }, 2e-3, 4),
    ] {
        let (loss, floor, dt) = floor_for(&cfg, lr, batch, 3000);
        println!("{label}: tail loss {loss:.4}, motion floor {floor:.4}, took {dt:?}");
    }
}
