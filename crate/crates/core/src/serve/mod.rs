//! Daily batch inference into an embedding store, and pin retrieval.

mod hnsw;
mod store;

pub use hnsw::{HnswConfig, HnswIndex};
pub use store::{
    embed_user, full_infer, incremental_infer, recompute_users, EmbeddingStore, InferOutcome,
    StoreRecord,
};
