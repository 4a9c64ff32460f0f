//! Builds the chain-of-thought prompts for a category, answers them from the
//! shipped fixture through an on-disk cache, and pools the transcript into a
//! text embedding.
//!
//!     cargo run --example knowledge_text

use mgfuse::kernels::Matrix;
use mgfuse::text::{
    attention_pool, build_cot_prompts, embed_tokens, query_llm, Embedder, FileCache, HashEmbedder, MockFixture,
};
use rand::SeedableRng;

fn main() -> mgfuse::Result<()> {
    let prompts = build_cot_prompts("nanomaterial", "MEMS")?;
    for p in &prompts {
        println!("[{}] {}", p.index, p.title);
    }

    let cache_dir = std::env::temp_dir().join("mgfuse-example-cache");
    let cache = FileCache::with_upstream(&cache_dir, Box::new(MockFixture::builtin()));
    let t = query_llm(&cache, "nanomaterial", "MEMS", &prompts)?;
    println!("{} responses, {} upstream calls (cache at {})", t.responses.len(), cache.transport_calls(), cache_dir.display());

    let embedder = Embedder::Hash(HashEmbedder { dim: 16, seed: 0 });
    let tokens = embed_tokens(&t.full_text(), &embedder, 16)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let u = Matrix::uniform(1, 16, 0.25, &mut rng);
    let pooled = attention_pool(&tokens.data, u.data())?;
    let top = mgfuse::metrics::top_n(&pooled.alpha, 3);
    println!("{} tokens pooled; largest weights at token positions {top:?}", tokens.len());
    Ok(())
}
