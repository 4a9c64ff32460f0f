//! Aligns an image embedding against per-category text embeddings and shows
//! the similarity scores and the selected category text.
//!
//!     cargo run --example cross_modal_align

use mgfuse::align::{align, AlignParams};
use mgfuse::data::{category_names, synth_transcripts};
use mgfuse::text::{build_class_text_matrix, Embedder, HashEmbedder, TextParams};
use rand::{Rng, SeedableRng};

fn main() -> mgfuse::Result<()> {
    let dim = 16;
    let cats = category_names(4);
    let transcripts = synth_transcripts(&cats, "nanomaterial", 0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let text_params = TextParams::init(Embedder::Hash(HashEmbedder { dim, seed: 0 }), &mut rng);
    let text = build_class_text_matrix(&transcripts, &cats, &text_params)?;

    let params = AlignParams::init(4, dim, &mut rng)?;
    let h_cls: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = align(&h_cls, &text, &params)?;
    for (c, s) in cats.iter().zip(&r.sim) {
        println!("{c:>12}: sim {s:+.4}");
    }
    println!("selected '{}' (i* = {})", cats[r.i_star], r.i_star);
    Ok(())
}
