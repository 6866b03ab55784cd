//! Verify reverse-mode gradients against central finite differences:
//! individual primitives first, then a full two-block model in `f64`.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use lion_lora::model::{grad_check_model, ModelConfig};
use lion_lora::tape::{grad_check, Tape};
use lion_lora::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lion_lora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // f(x) = sum(x^2): gradient 2x, checked coordinate by coordinate.
    let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
    let err = grad_check(
        |tape, xv| {
            let sq = tape.mul_elem(xv, xv)?;
            Ok(tape.sum_all(sq))
        },
        &x,
        1e-5,
    )?;
    println!("squared frobenius norm: max relative error {err:.3e}");

    // A softmax-attention-shaped composite.
    let sq_input = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![4, 4], 0.5, &mut rng);
    let err = grad_check(
        |tape, xv| {
            let wv = tape.constant(&w);
            let scores = tape.matmul(xv, wv)?;
            let attn = tape.softmax_rows(scores)?;
            let mixed = tape.matmul(attn, xv)?;
            let sq = tape.mul_elem(mixed, mixed)?;
            Ok(tape.mean_all(sq))
        },
        &sq_input,
        1e-5,
    )?;
    println!("softmax attention composite: max relative error {err:.3e}");

    // Determinism: two backward passes agree bit for bit.
    let input = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng).with_grad();
    let run = || {
        let mut tape = Tape::new();
        let v = tape.leaf(&input);
        let g = tape.gelu(v);
        let s = tape.softmax_rows(g)?;
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss)?;
        Ok::<Vec<f64>, lion_lora::LionError>(grads.grad(v).unwrap().to_vec())
    };
    let (a, b) = (run()?, run()?);
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("backward pass is deterministic (bit-identical across runs)");

    // Whole model, base scope and adapter scope.
    let cfg = ModelConfig {
        num_blocks: 2,
        channels: 8,
        heads: 2,
        frames: 1,
        frame_size: 8,
        patch_size: 4,
        diffusion_steps: 20,
    };
    let err = grad_check_model(&cfg, false, 1e-5, 5)?;
    println!("full model (base scope): max relative error {err:.3e}");
    let err = grad_check_model(&cfg, true, 1e-5, 5)?;
    println!("full model (adapter + scaling-token scope): max relative error {err:.3e}");
    Ok(())
}
