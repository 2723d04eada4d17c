//! Zero-shot, post-hoc OOD scoring for object detections.
//!
//! Each detected object is masked and resynthesized with a class-conditioned
//! inpainting backend, conditioned on the label the detector predicted. The
//! original crop, the inpainted crop and the label are then compared with
//! vision-language and visual embeddings; the resulting similarity triplet is
//! folded into a single score where higher means more in-distribution.
//!
//! Module map:
//!
//! - [`detections_io`]: JSONL detection manifests, label canonicalization, validation.
//! - [`masking`]: centered box masks and class-wise / object-wise pass plans.
//! - [`inpainting`]: inpainting backend contract, deterministic mock, crops.
//! - [`embeddings`]: encoder contracts, cosine similarity, deterministic mocks.
//! - [`scoring`]: similarity triplet, triplet score, component ablation, MCM baseline.
//! - [`prompting`]: inpainting prompts, including exclusion-concept refinement.
//! - [`evaluation`]: AUROC, FPR at a TPR target, recall, ROC tables, histograms.
//! - [`pipeline`]: run configuration, orchestration, sweeps and reports.
//! - [`adapter`]: line-delimited JSON protocol for out-of-process backends.
//! - [`mock_scene`]: synthetic manifests for closed-loop testing with mocks.

pub mod adapter;
pub mod detections_io;
pub mod embeddings;
pub mod evaluation;
pub mod hash;
pub mod inpainting;
pub mod masking;
pub mod mock_scene;
pub mod pipeline;
pub mod prompting;
pub mod scoring;

pub use detections_io::{
    load_manifest, normalize_label, BoundingBox, Detection, GtFlag, ImageRecord, Manifest,
};
pub use evaluation::{auroc, fpr_at_tpr, EvalReport, ScoreSet};
pub use masking::{build_plan, center_mask, MaskMode, MaskPlan};
pub use pipeline::{run, sweep, RunConfig, RunResult};
pub use scoring::{triplet_score, ScoreParams, SimilarityTriplet};
