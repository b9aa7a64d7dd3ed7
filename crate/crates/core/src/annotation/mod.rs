//! Benchmark construction: record filtering, prompted annotation and
//! manifest assembly.

pub mod client;
pub mod filter;
pub mod pipeline;
pub mod prompts;

pub use crate::dataset::classify_size;
pub use client::{AnnotationClient, AnnotationRequest, HttpClient, StubClient};
pub use filter::{
    filter_records, select_largest_instance, FilterConfig, FilterOutcome, RawDetectionRecord,
    RejectRule,
};
pub use pipeline::{
    build_manifest, export_review_sample, load_raw_corpus, rebase_paths, stratified_sample, BuildConfig,
    BuildStats, RAW_RECORDS_FILE,
};
pub use prompts::{parse_response, render_prompt, Annotation, PromptBindings, PromptKind};
