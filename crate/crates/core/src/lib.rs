//! Visual token pruning for document pages.
//!
//! Three stages shrink the visual token set a vision-language model sees:
//! background pruning on the page raster ([`btp`]), question-aware pruning on
//! retrieval embeddings ([`qtp`]) and comprehension-aware pruning on exported
//! decoder traces ([`ctp`]). [`metrics`] turns the surviving token counts into
//! drop rates and FLOPs; [`trace_io`] defines the interchange formats and
//! [`synth`] builds fixtures with known answers.

pub mod btp;
pub mod config;
pub mod ctp;
pub mod error;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod qtp;
pub mod synth;
pub mod trace_io;

pub use btp::{background_ratio, block_coarsen, btp_mask, pure_background_tau_bg};
pub use config::{ConfigError, PruneConfig, CONFIG_ENV};
pub use ctp::{
    comprehension, ctp_mask, run_ctp, select_prune_layer, softmax_entropy, ComprehensionSeries, Criterion, CtpOutcome,
    CtpParams, DecoderTrace, PruneLayer,
};
pub use error::{Error, Result};
pub use image::{
    load_image, mode_intensity, tile_patches, to_grayscale, GrayImage, LoadError, PatchGrid, RasterImage,
};
pub use mask::{Stage, TokenMask};
pub use metrics::{
    drop_rate, pipeline_flops, pipeline_flops_pages, top_k_attention_mass, transformer_flops, FlopsModel,
    FlopsReport, ModelShape, PipelineStage, StageCount,
};
pub use pipeline::{finish_pipeline, run_page, PipelineReport, QtpInputs, StageError};
pub use qtp::{
    bilinear_resize, combine_masks, gaussian_smooth, qtp_mask, relevance_scores, run_qtp, EmbeddingMatrix,
    QtpOutcome, QtpParams, RelevanceMap,
};
pub use synth::{gen_document, gen_embeddings, gen_trace, GenEmbeddingSpec, GenTraceSpec, SynthSpec, SynthTruth};
pub use trace_io::{load_manifest, read_blob, read_mask, write_blob, write_mask, Blob, BlobKind, FormatError, TraceManifest};
