//! Item encoder, residual quantizer, balanced initialization and SID tables.

mod balanced;
mod codebook;
mod encoder;
mod losses;
mod sid;
mod snapshot;

pub use balanced::{balanced_assign, balanced_kmeans_init, LLOYD_ROUNDS};
pub use codebook::{Codebook, QuantizationTrace, ResidualPool};
pub use encoder::{encode_item, ItemEncoder, ItemRecord};
pub use losses::{commit_loss, quantization_losses, sem_loss};
pub use sid::{sid_prefix_embedding, tokenize_catalog, Sid, SidEmbeddingTable, SidTable};
pub use snapshot::{decode_codebook_into, encode_codebook, load_codebook_into, save_codebook};
