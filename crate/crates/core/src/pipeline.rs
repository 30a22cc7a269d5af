//! Page-level composition: BTP and QTP per page, one CTP pass over the
//! concatenated surviving tokens, and the FLOPs report.

use serde::Serialize;
use thiserror::Error;

use crate::btp::{block_coarsen, btp_mask};
use crate::config::PruneConfig;
use crate::ctp::{run_ctp, Criterion, DecoderTrace, PruneLayer};
use crate::error::mismatch;
use crate::image::{mode_intensity, tile_patches, to_grayscale, RasterImage};
use crate::mask::{Stage, TokenMask};
use crate::metrics::{
    decoder_drop_rate_progressive, pipeline_flops_pages, stage_rows, FlopsReport, PipelineStage, StageCount,
    StageRow,
};
use crate::qtp::{combine_masks, run_qtp, EmbeddingMatrix, QtpParams};

/// A computation failure tagged with the stage that raised it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: PipelineStage,
    pub source: crate::Error,
}

fn at(stage: PipelineStage) -> impl FnOnce(crate::Error) -> StageError {
    move |source| StageError { stage, source }
}

/// Background estimate and BTP keep mask (block-coarsened) for one page.
pub fn btp_page(image: &RasterImage, cfg: &PruneConfig, tau_bg: f64) -> crate::Result<(u8, TokenMask)> {
    let gray = to_grayscale(image);
    let background = mode_intensity(&gray);
    let grid = tile_patches(&gray, cfg.patch_size)?;
    let mask = btp_mask(&grid, background, cfg.tau_e, tau_bg)?;
    Ok((background, block_coarsen(&mask, cfg.block)?))
}

/// Embeddings for the question-aware stage of one page.
#[derive(Debug, Clone, Copy)]
pub struct QtpInputs<'a> {
    pub doc: &'a EmbeddingMatrix,
    pub qst: &'a EmbeddingMatrix,
    pub source_grid: (usize, usize),
}

pub fn qtp_params(cfg: &PruneConfig, source_grid: (usize, usize), target_grid: (usize, usize)) -> QtpParams {
    QtpParams {
        source_grid,
        target_grid,
        sigma: cfg.sigma,
        tau_qst: cfg.tau_qst,
        block: cfg.block,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageResult {
    pub background: u8,
    pub btp: TokenMask,
    pub qtp: Option<TokenMask>,
    pub combined: TokenMask,
}

/// BTP, then QTP on the BTP grid when embeddings are given, then their AND.
pub fn run_page(image: &RasterImage, qtp: Option<QtpInputs<'_>>, cfg: &PruneConfig) -> Result<PageResult, StageError> {
    let (background, btp) = btp_page(image, cfg, cfg.tau_bg).map_err(at(PipelineStage::Btp))?;
    let target = (btp.rows(), btp.cols());
    let qtp_mask = match qtp {
        None => None,
        Some(q) => Some(
            run_qtp(q.doc, q.qst, &qtp_params(cfg, q.source_grid, target))
                .map_err(at(PipelineStage::Qtp))?
                .mask,
        ),
    };
    let combined = match &qtp_mask {
        Some(q) => combine_masks(&btp, q).map_err(at(PipelineStage::Combined))?,
        None => btp.clone().with_stage(Stage::Combined),
    };
    Ok(PageResult {
        background,
        btp,
        qtp: qtp_mask,
        combined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PageSummary {
    pub page: usize,
    pub rows: usize,
    pub cols: usize,
    pub background_value: u8,
    pub raw: usize,
    pub btp_kept: usize,
    pub qtp_kept: Option<usize>,
    pub combined_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtpSummary {
    pub criterion: Criterion,
    pub l_star: PruneLayer,
    pub n_visual: usize,
    pub kept: usize,
    pub drop_rate_progressive: f64,
    pub series: Vec<f64>,
}

/// Everything a pipeline run reports, including the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config: PruneConfig,
    pub pages: Vec<PageSummary>,
    pub ctp: Option<CtpSummary>,
    pub flops: FlopsReport,
    pub stages: Vec<StageRow>,
}

/// Aggregate per-page results, run CTP over their concatenated surviving
/// tokens when a trace is given, and cost the whole run.
pub fn finish_pipeline(
    pages: &[PageResult],
    trace: Option<&DecoderTrace>,
    cfg: &PruneConfig,
) -> Result<PipelineReport, StageError> {
    let summaries: Vec<PageSummary> = pages
        .iter()
        .enumerate()
        .map(|(page, r)| PageSummary {
            page,
            rows: r.btp.rows(),
            cols: r.btp.cols(),
            background_value: r.background,
            raw: r.btp.len(),
            btp_kept: r.btp.kept_count(),
            qtp_kept: r.qtp.as_ref().map(TokenMask::kept_count),
            combined_kept: r.combined.kept_count(),
        })
        .collect();
    let visual: usize = summaries.iter().map(|s| s.combined_kept).sum();

    let ctp = match trace {
        None => None,
        Some(trace) => {
            if trace.n_visual() != visual {
                return Err(StageError {
                    stage: PipelineStage::Ctp,
                    source: mismatch("trace visual tokens vs kept tokens", visual, trace.n_visual()),
                });
            }
            let out = run_ctp(trace, &cfg.ctp_params()).map_err(at(PipelineStage::Ctp))?;
            let kept = out.mask.kept_count();
            let drop = decoder_drop_rate_progressive(visual as u64, out.layer, kept as u64, trace.num_layers())
                .map_err(at(PipelineStage::Ctp))?;
            Some(CtpSummary {
                criterion: cfg.criterion,
                l_star: out.layer,
                n_visual: visual,
                kept,
                drop_rate_progressive: drop,
                series: out.series.values,
            })
        }
    };

    let staged: Vec<Vec<StageCount>> = summaries
        .iter()
        .map(|s| {
            vec![
                StageCount::new(PipelineStage::Raw, s.raw as u64),
                StageCount::new(PipelineStage::Btp, s.btp_kept as u64),
                StageCount::new(PipelineStage::Combined, s.combined_kept as u64),
            ]
        })
        .collect();
    let (prune, ctp_kept) = match &ctp {
        Some(c) => (c.l_star, Some(c.kept as u64)),
        None => (PruneLayer::NoPrune, None),
    };
    let flops = pipeline_flops_pages(&cfg.flops, &staged, prune, ctp_kept).map_err(at(PipelineStage::Ctp))?;
    let stages = stage_rows(&cfg.flops, &flops).map_err(at(PipelineStage::Ctp))?;
    Ok(PipelineReport {
        config: cfg.clone(),
        pages: summaries,
        ctp,
        flops,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_document, gen_trace, ContentBox, GenTraceSpec, SynthSpec};

    fn page() -> RasterImage {
        let spec = SynthSpec {
            page_width: 112,
            page_height: 112,
            patch_size: 28,
            background_value: 240,
            content_boxes: vec![ContentBox {
                x: 0,
                y: 0,
                w: 56,
                h: 56,
                stroke: 20,
                density: 1.0,
            }],
            seed: 3,
            contrast_margin: 1,
        };
        gen_document(&spec).unwrap().image
    }

    #[test]
    fn btp_only_run() {
        let cfg = PruneConfig::default();
        let r = run_page(&page(), None, &cfg).unwrap();
        assert_eq!(r.btp.kept_indices(), vec![0, 1, 4, 5]);
        assert_eq!(r.combined.stage(), Stage::Combined);
        let report = finish_pipeline(&[r], None, &cfg).unwrap();
        assert_eq!(report.pages[0].raw, 16);
        assert_eq!(report.flops.encoder_drop_rate, 0.75);
        assert_eq!(report.flops.prune_layer, PruneLayer::NoPrune);
    }

    #[test]
    fn ctp_needs_matching_token_count() {
        let cfg = PruneConfig::default();
        let r = run_page(&page(), None, &cfg).unwrap();
        let mut spec = GenTraceSpec {
            layers: 28,
            dim: 8,
            crossing_layer: 20,
            n_visual: 4,
            visual_start: 2,
            spike_indices: vec![1],
            spike_mass: 0.8,
            vocab: None,
            seed: 1,
        };
        let trace = gen_trace(&spec).unwrap();
        let report = finish_pipeline(&[r.clone()], Some(&trace), &cfg).unwrap();
        let ctp = report.ctp.unwrap();
        assert_eq!((ctp.l_star, ctp.kept), (PruneLayer::Layer(20), 1));
        assert_eq!(report.flops.tokens_per_stage.last().unwrap().kept, 1);

        spec.n_visual = 5;
        let err = finish_pipeline(&[r], Some(&gen_trace(&spec).unwrap()), &cfg).unwrap_err();
        assert_eq!(err.stage, PipelineStage::Ctp);
    }
}
