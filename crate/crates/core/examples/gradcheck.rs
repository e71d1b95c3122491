//! Compares tape gradients of a few primitives against central differences.

use anyhow::Result;
use pseudo3d::tensor::gradcheck::finite_difference_check;
use pseudo3d::tensor::{ConvGeometry, Graph, Tensor, TransposedGeometry, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> pseudo3d::Result<Var> {
    let r = Tensor::uniform(g.value(y).shape(), -1.0, 1.0, rng);
    let r = g.leaf(r, false);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[2, 2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let kernel = Tensor::uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
    let up_kernel = Tensor::uniform(&[2, 3, 1, 3, 3], -0.5, 0.5, &mut rng);
    let bias = Tensor::uniform(&[3], -0.1, 0.1, &mut rng);

    let checks: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> pseudo3d::Result<Var>>)> = vec![
        (
            "conv 3x3x3, depth unpadded",
            Box::new(|g, x| {
                let (k, b) = (g.leaf(kernel.clone(), false), g.leaf(bias.clone(), false));
                let y = g.conv(x, k, b, ConvGeometry::volumetric(3, [false, true, true]))?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(1))
            }),
        ),
        (
            "transposed conv, stride 2",
            Box::new(|g, x| {
                let (k, b) = (g.leaf(up_kernel.clone(), false), g.leaf(bias.clone(), false));
                let y = g.transposed_conv(x, k, b, TransposedGeometry::planar(3))?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(2))
            }),
        ),
        (
            "max pool 2x2",
            Box::new(|g, x| {
                let (y, _) = g.maxpool(x, [1, 2, 2])?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(3))
            }),
        ),
        (
            "softmax",
            Box::new(|g, x| {
                let y = g.softmax(x)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(4))
            }),
        ),
    ];
    for (name, f) in &checks {
        let report = finite_difference_check(f, &x, 1e-6, 1e-4)?;
        println!(
            "{name:<28} {} coords, max rel error {:.2e} -> {}",
            report.checked,
            report.max_rel_error,
            if report.passed() { "ok" } else { "MISMATCH" }
        );
    }
    Ok(())
}
