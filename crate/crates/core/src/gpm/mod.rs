//! Global prior memory: task embeddings, the demonstration bank, prior
//! composition and the adaptive sampler.

mod bank;
mod embed;
mod prior;
mod schedule;
mod session;

pub use bank::{MemoryBank, MemoryEntry, Neighbor, Trajectory, BANK_FORMAT_VERSION};
pub use embed::{embed_context, mean_pool, PriorHead, TaskEmbedding};
pub use prior::{
    compose_prior, extract_aligned_chunk, resample_chunk, sample_prior_init, weighted_moments, weights_and_similarity,
    RetrievalResult, TaskPrior,
};
pub use schedule::{nfe_schedule, nfe_schedule_unrounded, noise_schedule, SamplerSchedule, ScheduleBounds, SIMILARITY_SLACK};
pub use session::{EpisodeSession, GpmConfig};
