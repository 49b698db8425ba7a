//! Wrap a frozen weight with a fresh adapter, show that it starts as a
//! no-op, nudge `B`, and round-trip the adapter through its text format.
//!
//! ```text
//! cargo run --example lora_forward
//! ```

use ortho_lora::{FrozenLayer, LoraAdapter, Matrix, Rng};

fn main() -> ortho_lora::Result<()> {
    let (d, k, r) = (6, 8, 2);
    let mut rng = Rng::new(42);
    let w0 = Matrix::gaussian(d, k, (1.0 / k as f64).sqrt(), &mut rng)?;
    let adapter = LoraAdapter::init(d, k, r, 0.02, 4.0, &mut rng)?;
    let mut layer = FrozenLayer::new(w0.clone(), adapter)?;

    let x = Matrix::gaussian(k, 3, 1.0, &mut rng)?;
    let base = w0.matmul(&x)?;
    let fresh = layer.adapted_forward(&x)?;
    println!("fresh adapter: max |h - W0 x| = {:e}", fresh.sub(&base)?.max_abs());

    *layer.adapter_mut().b_mut() = Matrix::gaussian(d, r, 0.1, &mut rng)?;
    let moved = layer.adapted_forward(&x)?;
    let delta = layer.adapter().delta_weight();
    println!(
        "after moving B: max |h - W0 x| = {:.4}, |(alpha/r) BA|_F = {:.4}",
        moved.sub(&base)?.max_abs(),
        delta.frob_norm()
    );
    println!("adapter params: {} (dense layer has {})", layer.adapter().num_params(), d * k);

    let text = layer.adapter().to_text();
    let back = LoraAdapter::from_text(&text)?;
    println!("text round trip exact: {}", &back == layer.adapter());
    println!("{}", text.lines().take(2).collect::<Vec<_>>().join("\n"));
    Ok(())
}
