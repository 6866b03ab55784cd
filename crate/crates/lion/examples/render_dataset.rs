//! Render motion-clip datasets: scenes of Gaussian blobs moved by a
//! primitive, written as checksummed clip files plus a manifest.
//!
//! ```bash
//! cargo run --release --example render_dataset
//! ```

use lion_lora::diagnostics::{centroid_path, motion_magnitude};
use lion_lora::scaling::ClipSampler;
use lion_lora::synthbench::{
    build_motion_dataset, generate_scene, load_dataset, make_training_pair, render_clip,
    write_dataset, MotionPrimitive, PrimitiveKind,
};

fn main() -> lion_lora::Result<()> {
    let scene = generate_scene(42, 4)?;
    println!("scene 42: {} points, first at ({:.3}, {:.3})", scene.points.len(), scene.points[0].x, scene.points[0].y);

    // One clip per primitive, reporting how the centroid moves.
    for kind in [
        PrimitiveKind::OffsetH,
        PrimitiveKind::OffsetV,
        PrimitiveKind::ForwardBack,
        PrimitiveKind::Orbit,
        PrimitiveKind::ObjectMotion,
    ] {
        let prim = MotionPrimitive::default_for(kind);
        let clip = render_clip(&scene, prim, 120, 16)?;
        let mag = motion_magnitude(&clip.frames)?;
        println!(
            "{:>13}: step {:.4}, per-frame centroid displacement {:.5}, {} culled point-frames",
            kind.as_str(),
            prim.step,
            mag,
            clip.provenance.clipped_points
        );
    }

    // Amplitude-driven subsampling: larger S spans more of the clip, so the
    // sampled frames move faster.
    let prim = MotionPrimitive::default_for(PrimitiveKind::OffsetH);
    let clip = render_clip(&scene, prim, 120, 16)?;
    let sampler = ClipSampler::new(120, 13)?;
    println!("\namplitude sweep on offset_h (V=13 frames sampled per pair):");
    for s in [sampler.s_min(), 0.25, 0.5, 0.75, 1.0] {
        let (pair, _) = make_training_pair(&clip, &sampler, s)?;
        let mag = motion_magnitude(&pair.frames)?;
        let path = centroid_path(&pair.frames)?;
        println!(
            "  S = {s:.3}: per-frame displacement {:.5}, centroid x from {:+.3} to {:+.3}",
            mag,
            path[0][0],
            path.last().unwrap()[0]
        );
    }

    // Write and reload a small dataset directory.
    let dir = std::env::temp_dir().join("lion_example_dataset");
    let clips = build_motion_dataset(16, prim, 8, 120, 4, 7)?;
    let manifest = write_dataset(&dir, &clips)?;
    let (_, reloaded) = load_dataset(&dir)?;
    println!(
        "\nwrote {} clips to {} and verified {} checksums on reload",
        manifest.clips.len(),
        dir.display(),
        reloaded.len()
    );
    Ok(())
}
