//! Verifies the hand-written backward pass of multi-head attention against
//! central finite differences.
//!
//!     cargo run --release --example gradient_check

use mgfuse::kernels::{flatten, grad_check, mha_backward, mha_forward, unflatten, zeros_like, Matrix, MhaParams};
use rand::SeedableRng;

fn main() -> mgfuse::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let params = MhaParams::init(2, 4, &mut rng)?;
    let q = Matrix::uniform(3, 4, 1.0, &mut rng);
    let kv = Matrix::uniform(5, 4, 1.0, &mut rng);
    let target = Matrix::uniform(3, 4, 1.0, &mut rng);
    // loss = 0.5 * ||MHA(q, kv, kv) - target||^2
    let f = |theta: &[f64]| {
        let mut p = params.clone();
        unflatten(&mut p, theta);
        let (out, cache) = mha_forward(&q, &kv, &kv, &p).expect("shapes agree");
        let diff: Vec<f64> = out.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        let mut g = zeros_like(&p);
        let d_out = Matrix::new(3, 4, diff).expect("3x4");
        mha_backward(&q, &kv, &kv, &p, &cache, &d_out, &mut g);
        (loss, flatten(&g))
    };
    let r = grad_check(f, &flatten(&params), 1e-4)?;
    println!("{} coordinates, max relative error {:.2e} at {}", r.coordinates, r.max_rel_error, r.worst_index);
    Ok(())
}
