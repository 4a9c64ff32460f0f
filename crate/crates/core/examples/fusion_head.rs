//! Runs the two fusion heads on fixed inputs: the hierarchical attention
//! stages and the concatenation head used when attention is ablated.
//!
//!     cargo run --example fusion_head

use mgfuse::fusion::{classify, fuse, fuse_concat, ConcatHeadParams, FusionParams};
use rand::{Rng, SeedableRng};

fn main() -> mgfuse::Result<()> {
    let (dim, classes) = (8, 3);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut v = || (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (h_cls, h_text, h_icl) = (v(), v(), v());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let params = FusionParams::init(2, dim, classes, &mut rng)?;
    let h_cross = fuse(&h_cls, &h_text, &h_icl, &params)?;
    println!("attention fusion p = {:.4?}", classify(&h_cross, &params.w_out)?.as_slice());

    let concat = ConcatHeadParams::init(dim, classes, &mut rng);
    println!("concat head p      = {:.4?}", fuse_concat(&h_cls, &h_text, &h_icl, &concat)?.as_slice());
    Ok(())
}
