//! Deterministic fixtures shared by the benches.

use tokprune_core::synth::{ContentBox, GenTraceSpec};
use tokprune_core::{gen_document, gen_embeddings, gen_trace, DecoderTrace, EmbeddingMatrix, GenEmbeddingSpec, RasterImage, SynthSpec};

/// A `side`×`side` page with a few text-like blocks.
pub fn page(side: usize, patch_size: usize) -> RasterImage {
    let spec = SynthSpec {
        page_width: side,
        page_height: side,
        patch_size,
        background_value: 250,
        content_boxes: vec![
            ContentBox { x: side / 10, y: side / 10, w: side / 2, h: side / 6, stroke: 10, density: 0.3 },
            ContentBox { x: side / 8, y: side / 2, w: side * 3 / 4, h: side / 4, stroke: 40, density: 0.15 },
        ],
        seed: 7,
        contrast_margin: 1,
    };
    gen_document(&spec).expect("valid page spec").image
}

pub fn embeddings(rows: usize, cols: usize, dim: usize, question_tokens: usize) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let relevant = (0..rows * cols).step_by(7).collect();
    gen_embeddings(&GenEmbeddingSpec { rows, cols, dim, question_tokens, relevant, seed: 11 }).expect("valid embedding spec")
}

pub fn trace(layers: usize, dim: usize, n_visual: usize) -> DecoderTrace {
    let spec = GenTraceSpec {
        layers,
        dim,
        crossing_layer: layers * 2 / 3,
        n_visual,
        visual_start: 16,
        spike_indices: (0..n_visual).step_by(10).collect(),
        spike_mass: 0.6,
        vocab: Some(512),
        seed: 13,
    };
    gen_trace(&spec).expect("valid trace spec")
}
