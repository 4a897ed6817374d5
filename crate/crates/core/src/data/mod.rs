//! Schema, synthetic generation, leakage-free features, splitting and samples.

mod csv_io;
mod samples;
mod schema;
mod split;
mod synthetic;
mod u2i;

pub use csv_io::{read_dataset, write_dataset};
pub use samples::{build_samples, resample_negatives, sample_negatives, user_features, RankSample, RetrievalSample};
pub use schema::{category_of, Dataset, Interaction, UserProfile};
pub use split::{temporal_split, EvalUser, Split};
pub use synthetic::{generate_synthetic, SyntheticWorld, SyntheticWorldConfig};
pub use u2i::{build_u2i, smoothed_ctr, U2iFeatures, U2iIndex, UserSnapshot, CTR_PRIOR_A, CTR_PRIOR_B, HISTORY_LEN, U2I_DIM};
