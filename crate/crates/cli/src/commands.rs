use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tokprune_core::metrics::PipelineStage;
use tokprune_core::pipeline::{btp_page, finish_pipeline, qtp_params, run_page, PageResult, QtpInputs};
use tokprune_core::trace_io::{read_embeddings, write_atomic, write_mask, write_relevance_map};
use tokprune_core::{load_image, load_manifest, run_ctp, run_qtp, EmbeddingMatrix, PruneConfig, TokenMask};

use crate::error::{CliError, CliResult};
use crate::{emit, parse_grid, ConfigArgs};

#[derive(Debug, Serialize)]
struct MaskSummary {
    stage: String,
    rows: usize,
    cols: usize,
    kept: usize,
    total: usize,
    drop_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    background_value: Option<u8>,
}

fn summarize(mask: &TokenMask, background_value: Option<u8>) -> MaskSummary {
    MaskSummary {
        stage: mask.stage().to_string(),
        rows: mask.rows(),
        cols: mask.cols(),
        kept: mask.kept_count(),
        total: mask.len(),
        drop_rate: mask.drop_rate(),
        background_value,
    }
}

pub fn write_json_file(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

#[derive(Debug, Args)]
pub struct BtpArgs {
    /// Page image (PNG, PPM or PGM).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    /// Use the retrieval-stage threshold (retrieval_tau_bg) instead of tau_bg.
    #[arg(long)]
    retrieval: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn btp(a: BtpArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let image = load_image(&a.image)?;
    let tau_bg = if a.retrieval { cfg.retrieval_tau_bg } else { cfg.tau_bg };
    let (background, mask) = btp_page(&image, &cfg, tau_bg).map_err(|e| CliError::from(e).at("btp"))?;
    write_mask(&a.out_mask, &mask, Some(cfg.patch_size))?;
    emit(&summarize(&mask, Some(background)))
}

#[derive(Debug, Args)]
pub struct QtpArgs {
    /// Document token embeddings (DPEM, rows × cols tokens).
    #[arg(long)]
    doc_emb: PathBuf,
    /// Question token embeddings (DPEM).
    #[arg(long)]
    qst_emb: PathBuf,
    /// Retrieval feature grid of the document embeddings, ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    /// Grid the mask is produced for; defaults to --grid.
    #[arg(long, value_parser = parse_grid)]
    target_grid: Option<(usize, usize)>,
    #[arg(long)]
    out_mask: PathBuf,
    /// Also write the smoothed relevance map (DPRM).
    #[arg(long)]
    out_map: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn qtp(a: QtpArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let doc = read_embeddings(&a.doc_emb)?;
    let qst = read_embeddings(&a.qst_emb)?;
    let target = a.target_grid.unwrap_or(a.grid);
    let out = run_qtp(&doc, &qst, &qtp_params(&cfg, a.grid, target)).map_err(|e| CliError::from(e).at("qtp"))?;
    write_mask(&a.out_mask, &out.mask, None)?;
    if let Some(path) = &a.out_map {
        write_relevance_map(path, &out.smoothed)?;
    }
    emit(&summarize(&out.mask, None))
}

#[derive(Debug, Args)]
pub struct CtpArgs {
    #[arg(long)]
    trace_manifest: PathBuf,
    /// Decision JSON; the same object is printed on stdout.
    #[arg(long)]
    out_decision: Option<PathBuf>,
    /// Also write the 1×N CTP mask.
    #[arg(long)]
    out_mask: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn ctp(a: CtpArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let (_, trace) = load_manifest(&a.trace_manifest)?;
    let out = run_ctp(&trace, &cfg.ctp_params()).map_err(|e| CliError::from(e).at("ctp"))?;
    let kept = out.mask.kept_count();
    let drop = tokprune_core::metrics::decoder_drop_rate_progressive(
        trace.n_visual() as u64,
        out.layer,
        kept as u64,
        trace.num_layers(),
    )
    .map_err(|e| CliError::from(e).at("ctp"))?;
    let decision = json!({
        "criterion": cfg.criterion,
        "l_star": out.layer,
        "n_visual": trace.n_visual(),
        "kept": kept,
        "drop_rate_progressive": drop,
        "series": out.series.values,
    });
    if let Some(path) = &a.out_decision {
        write_json_file(path, &decision)?;
    }
    if let Some(path) = &a.out_mask {
        write_mask(path, &out.mask, None)?;
    }
    emit(&decision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Page image; repeat for multi-page inputs.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Document embeddings, one per --image in the same order.
    #[arg(long = "doc-emb")]
    doc_embs: Vec<PathBuf>,
    #[arg(long)]
    qst_emb: Option<PathBuf>,
    /// Retrieval feature grid of every --doc-emb, ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Trace whose visual span is the concatenated surviving tokens of all pages.
    #[arg(long)]
    trace_manifest: Option<PathBuf>,
    /// Run CTP; defaults to on when a trace manifest is given.
    #[arg(long, value_enum)]
    ctp: Option<Toggle>,
    /// Pages processed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Full report (effective config, per-page counts, CTP decision, FLOPs).
    #[arg(long)]
    out_report: Option<PathBuf>,
    /// Directory for per-page masks.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

struct PageInput {
    image: tokprune_core::RasterImage,
    doc: Option<EmbeddingMatrix>,
}

fn run_pages(inputs: &[PageInput], qst: Option<&EmbeddingMatrix>, grid: (usize, usize), cfg: &PruneConfig) -> CliResult<Vec<PageResult>> {
    inputs
        .par_iter()
        .map(|p| {
            let q = match (&p.doc, qst) {
                (Some(doc), Some(qst)) => Some(QtpInputs {
                    doc,
                    qst,
                    source_grid: grid,
                }),
                _ => None,
            };
            run_page(&p.image, q, cfg).map_err(CliError::from)
        })
        .collect()
}

pub fn pipeline(a: PipelineArgs) -> CliResult<()> {
    if a.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let use_ctp = match (a.ctp, &a.trace_manifest) {
        (Some(Toggle::Off), _) => false,
        (Some(Toggle::On), None) => return Err(CliError::usage("--ctp on needs --trace-manifest")),
        (_, manifest) => manifest.is_some(),
    };
    if !a.doc_embs.is_empty() {
        if a.doc_embs.len() != a.images.len() {
            return Err(CliError::usage(format!(
                "{} --doc-emb for {} --image",
                a.doc_embs.len(),
                a.images.len()
            )));
        }
        if a.qst_emb.is_none() || a.grid.is_none() {
            return Err(CliError::usage("--doc-emb needs --qst-emb and --grid"));
        }
    } else if a.qst_emb.is_some() {
        return Err(CliError::usage("--qst-emb needs --doc-emb"));
    }

    let cfg = a.config.resolve_for_pages(a.images.len())?;
    let mut inputs = Vec::with_capacity(a.images.len());
    for (i, path) in a.images.iter().enumerate() {
        let image = load_image(path).map_err(|e| CliError::from(e).at(PipelineStage::Btp))?;
        let doc = match a.doc_embs.get(i) {
            Some(p) => Some(read_embeddings(p).map_err(|e| CliError::from(e).at(PipelineStage::Qtp))?),
            None => None,
        };
        inputs.push(PageInput { image, doc });
    }
    let qst = match &a.qst_emb {
        Some(p) => Some(read_embeddings(p).map_err(|e| CliError::from(e).at(PipelineStage::Qtp))?),
        None => None,
    };
    let trace = match (&a.trace_manifest, use_ctp) {
        (Some(p), true) => Some(load_manifest(p).map_err(|e| CliError::from(e).at(PipelineStage::Ctp))?.1),
        _ => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::io(e.to_string()))?;
    let grid = a.grid.unwrap_or((1, 1));
    let pages = pool.install(|| run_pages(&inputs, qst.as_ref(), grid, &cfg))?;
    let report = finish_pipeline(&pages, trace.as_ref(), &cfg)?;

    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        for (i, page) in pages.iter().enumerate() {
            write_mask(dir.join(format!("page{i}.btp.json")), &page.btp, Some(cfg.patch_size))?;
            if let Some(q) = &page.qtp {
                write_mask(dir.join(format!("page{i}.qtp.json")), q, Some(cfg.patch_size))?;
            }
            write_mask(dir.join(format!("page{i}.combined.json")), &page.combined, Some(cfg.patch_size))?;
        }
    }
    if let Some(path) = &a.out_report {
        write_json_file(path, &report)?;
    }
    emit(&json!({
        "pages": report.pages.len(),
        "tokens_per_stage": report.flops.tokens_per_stage,
        "l_star": report.flops.prune_layer,
        "encoder_drop_rate": report.flops.encoder_drop_rate,
        "decoder_drop_rate": report.flops.decoder_drop_rate,
        "total_flops": report.flops.total_flops(),
        "baseline_total_flops": report.flops.baseline_total_flops(),
    }))
}
