//! Category knowledge from language-model transcripts.
//!
//! Prompt templates drive a black-box [`LlmClient`]; the resulting transcripts
//! are tokenized, embedded and attention-pooled into one text-level vector per
//! category.

mod embed;
mod llm;
mod pool;
mod prompts;

pub use embed::{embed_tokens, tokenize, Embedder, HashEmbedder, TokenEmbeddingMatrix, TokenTable};
#[cfg(feature = "live")]
pub use llm::LiveHttp;
pub use llm::{
    prompt_key, query_llm, Completion, FileCache, LlmClient, MockFixture, Transcript, API_KEY_ENV,
};
pub use pool::{
    attention_pool, attention_pool_backward, build_class_text_forward, build_class_text_matrix,
    class_text_backward, order_transcripts, ClassTextCache, ClassTextMatrix, Pooled, TextParams,
};
pub use prompts::{build_cot_prompts, template, Prompt, PromptFamily, PromptTemplate, TemplatePrompt};

pub(crate) use embed::fnv1a64;
pub(crate) use llm::hex_string;
