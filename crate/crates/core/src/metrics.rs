//! Efficiency accounting: drop rates, a transformer FLOPs model and
//! attention-mass statistics.
//!
//! # FLOPs model
//!
//! Per layer with `N` tokens, hidden width `d` and feed-forward width `f`:
//!
//! ```text
//! projections   4·N·d²
//! attention     4·d·N²          (bidirectional encoder: every query-key pair)
//!               2·d·N·(N+1)     (causal decoder: the N(N+1)/2 visible pairs)
//! feed-forward  4·N·d·f
//! ```
//!
//! Attention counts one multiply-accumulate as 2 FLOPs for both the score
//! product and the weighted sum of values. Embeddings, norms, the vision
//! merger and the logit head are not counted.

use serde::{Deserialize, Serialize};

use crate::ctp::PruneLayer;
use crate::error::{invalid, mismatch, Error, Result};

/// Transformer dimensions for the FLOPs model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub name: String,
    pub d_model: u64,
    pub d_ff: u64,
    pub num_layers: usize,
    pub num_heads: u64,
    #[serde(default)]
    pub vocab: Option<u64>,
    /// Causal self-attention (decoder) rather than bidirectional (encoder).
    pub causal: bool,
}

impl ModelShape {
    /// 7B-class language decoder (28 layers, width 3584).
    pub fn decoder_7b() -> Self {
        Self {
            name: "decoder-7b".into(),
            d_model: 3584,
            d_ff: 18944,
            num_layers: 28,
            num_heads: 28,
            vocab: Some(152_064),
            causal: true,
        }
    }

    /// ViT-style vision encoder paired with the 7B decoder (32 layers, width 1280).
    pub fn vision_encoder() -> Self {
        Self {
            name: "vision-encoder".into(),
            d_model: 1280,
            d_ff: 5120,
            num_layers: 32,
            num_heads: 16,
            vocab: None,
            causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(invalid("model shape", format!("{}: all dimensions must be positive", self.name)));
        }
        if self.vocab == Some(0) {
            return Err(invalid("model shape", format!("{}: vocab must be positive", self.name)));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(invalid(
                "model shape",
                format!("{}: d_model {} not divisible by {} heads", self.name, self.d_model, self.num_heads),
            ));
        }
        Ok(())
    }

    /// FLOPs of one layer at sequence length `n`.
    pub fn layer_flops(&self, n: u64) -> u128 {
        let (n, d, f) = (n as u128, self.d_model as u128, self.d_ff as u128);
        let attention = if self.causal {
            2 * d * n * (n + 1)
        } else {
            4 * d * n * n
        };
        4 * n * d * d + attention + 4 * n * d * f
    }
}

/// Total FLOPs with `token_counts[l]` tokens at layer `l`.
pub fn transformer_flops(shape: &ModelShape, token_counts: &[u64]) -> Result<u128> {
    shape.validate()?;
    if token_counts.len() != shape.num_layers {
        return Err(mismatch("per-layer token counts", shape.num_layers, token_counts.len()));
    }
    Ok(token_counts.iter().map(|&n| shape.layer_flops(n)).sum())
}

/// FLOPs with the same sequence length at every layer.
pub fn constant_flops(shape: &ModelShape, n: u64) -> Result<u128> {
    transformer_flops(shape, &vec![n; shape.num_layers])
}

/// Fraction of tokens removed.
pub fn drop_rate(initial: u64, kept: u64) -> Result<f64> {
    if initial == 0 {
        return Err(invalid("initial", "token count must be positive"));
    }
    if kept > initial {
        return Err(invalid("kept", format!("{kept} exceeds initial {initial}")));
    }
    Ok((initial - kept) as f64 / initial as f64)
}

/// Layer-weighted drop rate of a one-shot decoder prune: layers before
/// `prune` see all `n_visual` tokens, later layers see `kept_after`.
pub fn decoder_drop_rate_progressive(
    n_visual: u64,
    prune: PruneLayer,
    kept_after: u64,
    num_layers: usize,
) -> Result<f64> {
    let PruneLayer::Layer(l_star) = prune else {
        return Ok(0.0);
    };
    if kept_after > n_visual {
        return Err(invalid("kept_after", format!("{kept_after} exceeds {n_visual} visual tokens")));
    }
    if l_star >= num_layers {
        return Err(invalid("l_star", format!("layer {l_star} outside {num_layers} layers")));
    }
    if n_visual == 0 {
        return Ok(0.0);
    }
    let (l, layers, n, k) = (l_star as u128, num_layers as u128, n_visual as u128, kept_after as u128);
    let total = layers * n;
    let seen = l * n + (layers - l) * k;
    Ok((total - seen) as f64 / total as f64)
}

/// Share of total attention held by the top `ceil(k·N)` tokens.
pub fn top_k_attention_mass(attention: &[f32], k: f64) -> Result<f64> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(invalid("k", format!("{k} (must lie in (0, 1])")));
    }
    if let Some((index, &value)) = attention.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeAttention { index, value });
    }
    let mut sorted: Vec<f64> = attention.iter().map(|&a| a as f64).collect();
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroAttention);
    }
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = top_count(k, sorted.len());
    Ok(sorted[..take].iter().sum::<f64>() / total)
}

/// `ceil(k·n)`, robust to `k·n` landing a rounding error above an integer.
pub fn top_count(k: f64, n: usize) -> usize {
    let exact = k * n as f64;
    let nearest = exact.round();
    let count = if (exact - nearest).abs() < 1e-9 { nearest } else { exact.ceil() };
    (count as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Raw,
    Btp,
    Qtp,
    Combined,
    Ctp,
}

impl std::fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PipelineStage::Raw => "raw",
            PipelineStage::Btp => "btp",
            PipelineStage::Qtp => "qtp",
            PipelineStage::Combined => "combined",
            PipelineStage::Ctp => "ctp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: PipelineStage,
    pub kept: u64,
}

impl StageCount {
    pub fn new(stage: PipelineStage, kept: u64) -> Self {
        Self { stage, kept }
    }
}

/// Shapes and fixed token overheads used to cost a pipeline run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsModel {
    pub encoder: ModelShape,
    pub decoder: ModelShape,
    /// Tokens the vision encoder processes per page regardless of pruning.
    #[serde(default)]
    pub encoder_overhead_tokens: u64,
    /// Text tokens (prompt, question) present at every decoder layer.
    #[serde(default)]
    pub text_tokens: u64,
}

impl Default for FlopsModel {
    fn default() -> Self {
        Self {
            encoder: ModelShape::vision_encoder(),
            decoder: ModelShape::decoder_7b(),
            encoder_overhead_tokens: 0,
            text_tokens: 0,
        }
    }
}

/// Externally measured throughput (samples/s); never modeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub encoder: f64,
    pub decoder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub encoder_flops: u128,
    pub decoder_flops: u128,
    pub baseline_encoder_flops: u128,
    pub baseline_decoder_flops: u128,
    pub encoder_drop_rate: f64,
    pub decoder_drop_rate: f64,
    pub tokens_per_stage: Vec<StageCount>,
    pub prune_layer: PruneLayer,
    pub throughput: Option<Throughput>,
}

impl FlopsReport {
    pub fn total_flops(&self) -> u128 {
        self.encoder_flops + self.decoder_flops
    }

    pub fn baseline_total_flops(&self) -> u128 {
        self.baseline_encoder_flops + self.baseline_decoder_flops
    }
}

fn check_non_increasing(stages: &[StageCount]) -> Result<()> {
    match stages.first() {
        Some(s) if s.stage == PipelineStage::Raw => {}
        _ => return Err(invalid("stages", "must start with the raw token count")),
    }
    for pair in stages.windows(2) {
        if pair[1].kept > pair[0].kept {
            return Err(invalid(
                "stages",
                format!(
                    "{} keeps {} tokens, more than {} after {}",
                    pair[1].stage, pair[1].kept, pair[0].kept, pair[0].stage
                ),
            ));
        }
    }
    Ok(())
}

/// Cost one page through encoder and decoder.
///
/// `stages` runs from the raw count through the encoder-side stages and may
/// end with a `Ctp` entry holding the tokens kept after `prune`. The encoder
/// runs every layer at the last encoder-side count; the decoder runs layers
/// `[0, l*)` at that count and `[l*, L)` at the CTP count.
pub fn pipeline_flops(model: &FlopsModel, stages: &[StageCount], prune: PruneLayer) -> Result<FlopsReport> {
    let (encoder_side, ctp_kept) = match stages.split_last() {
        Some((last, rest)) if last.stage == PipelineStage::Ctp => (rest, Some(last.kept)),
        _ => (stages, None),
    };
    pipeline_flops_pages(model, &[encoder_side.to_vec()], prune, ctp_kept)
}

/// Multi-page form of [`pipeline_flops`]: the encoder runs once per page,
/// the decoder once over the concatenated visual tokens of every page.
pub fn pipeline_flops_pages(
    model: &FlopsModel,
    pages: &[Vec<StageCount>],
    prune: PruneLayer,
    ctp_kept: Option<u64>,
) -> Result<FlopsReport> {
    model.encoder.validate()?;
    model.decoder.validate()?;
    let first = pages.first().ok_or(Error::Empty("pages"))?;
    for page in pages {
        check_non_increasing(page)?;
        if page.iter().map(|s| s.stage).ne(first.iter().map(|s| s.stage)) {
            return Err(invalid("stages", "every page must report the same stages"));
        }
        if page.iter().any(|s| s.stage == PipelineStage::Ctp) {
            return Err(invalid("stages", "ctp is a decoder stage; pass it as ctp_kept"));
        }
    }

    let mut tokens_per_stage: Vec<StageCount> = first
        .iter()
        .enumerate()
        .map(|(i, s)| StageCount::new(s.stage, pages.iter().map(|p| p[i].kept).sum()))
        .collect();
    let raw = tokens_per_stage[0].kept;
    let visual_in = tokens_per_stage.last().expect("non-empty").kept;

    let dec_layers = model.decoder.num_layers;
    let after = match (prune, ctp_kept) {
        (PruneLayer::Layer(l), Some(k)) => {
            if l >= dec_layers {
                return Err(invalid("l_star", format!("layer {l} outside {dec_layers} decoder layers")));
            }
            if k > visual_in {
                return Err(invalid("ctp_kept", format!("{k} exceeds {visual_in} decoder visual tokens")));
            }
            tokens_per_stage.push(StageCount::new(PipelineStage::Ctp, k));
            k
        }
        (PruneLayer::Layer(l), None) => {
            return Err(invalid("ctp_kept", format!("pruning at layer {l} needs a kept count")))
        }
        (PruneLayer::NoPrune, Some(k)) => {
            if k != visual_in {
                return Err(invalid("ctp_kept", format!("{k} kept without pruning, expected {visual_in}")));
            }
            tokens_per_stage.push(StageCount::new(PipelineStage::Ctp, k));
            k
        }
        (PruneLayer::NoPrune, None) => visual_in,
    };

    let enc_ovh = model.encoder_overhead_tokens;
    let mut encoder_flops = 0u128;
    let mut baseline_encoder_flops = 0u128;
    for page in pages {
        let enc_in = page.last().expect("non-empty").kept;
        encoder_flops += constant_flops(&model.encoder, enc_in + enc_ovh)?;
        baseline_encoder_flops += constant_flops(&model.encoder, page[0].kept + enc_ovh)?;
    }

    let text = model.text_tokens;
    let split = prune.layer().unwrap_or(dec_layers);
    let per_layer: Vec<u64> = (0..dec_layers)
        .map(|l| if l < split { visual_in + text } else { after + text })
        .collect();
    let decoder_flops = transformer_flops(&model.decoder, &per_layer)?;
    let baseline_decoder_flops = constant_flops(&model.decoder, raw + text)?;

    Ok(FlopsReport {
        encoder_flops,
        decoder_flops,
        baseline_encoder_flops,
        baseline_decoder_flops,
        encoder_drop_rate: if raw == 0 { 0.0 } else { drop_rate(raw, visual_in)? },
        decoder_drop_rate: decoder_drop_rate_progressive(visual_in, prune, after, dec_layers)?,
        tokens_per_stage,
        prune_layer: prune,
        throughput: None,
    })
}

/// One plotting row per stage: tokens kept, drop rate against the raw count
/// and FLOPs. Encoder-side stages are costed as if both models ran every
/// layer at that stage's count; the CTP row carries the report's totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: PipelineStage,
    pub kept: u64,
    pub drop_rate: f64,
    pub flops: u128,
}

pub fn stage_rows(model: &FlopsModel, report: &FlopsReport) -> Result<Vec<StageRow>> {
    let raw = report.tokens_per_stage.first().ok_or(Error::Empty("tokens_per_stage"))?.kept;
    report
        .tokens_per_stage
        .iter()
        .map(|s| {
            let flops = if s.stage == PipelineStage::Ctp {
                report.total_flops()
            } else {
                constant_flops(&model.encoder, s.kept + model.encoder_overhead_tokens)?
                    + constant_flops(&model.decoder, s.kept + model.text_tokens)?
            };
            Ok(StageRow {
                stage: s.stage,
                kept: s.kept,
                drop_rate: if raw == 0 { 0.0 } else { drop_rate(raw, s.kept)? },
                flops,
            })
        })
        .collect()
}

pub const STAGE_CSV_HEADER: &str = "stage,kept,drop_rate,flops";

pub fn stage_rows_csv(rows: &[StageRow]) -> String {
    let mut out = String::from(STAGE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.stage, r.kept, r.drop_rate, r.flops));
    }
    out
}
