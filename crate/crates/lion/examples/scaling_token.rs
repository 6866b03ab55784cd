//! The scaling token from the inside: Fourier embedding of the amplitude,
//! per-adapter projection, and sequence augmentation.
//!
//! ```bash
//! cargo run --release --example scaling_token
//! ```

use lion_lora::scaling::{augment_sequence, fourier_embed, ClipSampler, ScalingEmbedder};
use lion_lora::tensor::Tensor;

fn main() -> lion_lora::Result<()> {
    // gamma(S) interleaves [sin(2^j pi S), cos(2^j pi S)] pairs.
    let g = fourier_embed(0.5, 2);
    println!("gamma(0.5, J=2) = {g:?}  (sin/cos at pi/2 and pi)");
    let g0 = fourier_embed(0.0, 4);
    println!("gamma(0.0, J=4) = {g0:?}");

    // A fresh embedder projects gamma(S) into one model-width token row.
    let embedder = ScalingEmbedder::<f32>::new("offset_h", 8, 64, 49.0 / 600.0, 3)?;
    let token = embedder.make_scaling_token(0.62)?;
    println!(
        "token for S=0.62: d = {}, first entries {:?}",
        token.embedding().cols(),
        &token.embedding().data()[..4]
    );

    // Appending the token never mutates the sequence it extends.
    let h = Tensor::<f32>::ones(vec![9, 64]);
    let augmented = augment_sequence(&h, &token)?;
    println!(
        "augment [{} x {}] -> [{} x {}], last row is the token",
        h.rows(),
        h.cols(),
        augmented.rows(),
        augmented.cols()
    );

    // The same S drives training-pair construction. The paper-scale presets:
    let camera = ClipSampler::camera_preset();
    let object = ClipSampler::object_motion_preset();
    println!(
        "camera preset: V={} from N={}, minimal s = {:.5}",
        camera.frames,
        camera.clip_length,
        camera.s_min()
    );
    println!(
        "object preset: V={} from N={}, minimal s = {:.5}",
        object.frames,
        object.clip_length,
        object.s_min()
    );
    let idx = camera.sample_frame_indices(camera.s_min())?;
    println!("camera indices at minimal s: 0..{} (all of the first V frames)", idx.last().unwrap());
    let idx = camera.sample_frame_indices(1.0)?;
    println!("camera indices at S=1: first {}, last {} (spans the whole clip)", idx[0], idx.last().unwrap());
    Ok(())
}
