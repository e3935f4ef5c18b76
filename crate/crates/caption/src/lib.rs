//! Three-stage captioning of multi-view renders: describe each view, compress
//! each description, then fuse the descriptions into one caption.

pub mod error;
pub mod log;
pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod provider;

pub use error::{CaptionError, Result};
pub use mock::{Broken, FaultInjector, InFlightProbe, MockProvider, MOCK_MAX_CHARS};
pub use pipeline::{
    caption_view, dataset_statistics, fuse_captions, jobs_from_manifest, read_records, run_pipeline, simplify_caption, CaptionJob,
    CaptionRecord, DatasetStatistics, PipelineOptions, PipelineStats, Providers, ViewCaption, MAX_VIEWS,
};
pub use prompts::{FewShot, CAPTION_PROMPT, FUSE_PROMPT, SIMPLIFY_PROMPT};
pub use provider::{HttpProvider, Provider, ProviderConfig, ProviderError, ProvidersConfig, RetryPolicy};
