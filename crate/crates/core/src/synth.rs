//! Synthetic fixtures with known answers: document pages whose background
//! patches are known by construction, decoder traces with a planted
//! comprehension crossing and planted attention spikes, and embedding pairs
//! with planted relevance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctp::{comprehension_l2, DecoderTrace};
use crate::error::{invalid, Error, Result};
use crate::image::RasterImage;
use crate::mask::{Stage, TokenMask};
use crate::qtp::EmbeddingMatrix;

/// Attention weights are integer multiples of `1 / ATTENTION_UNITS`, which
/// keeps every value and every partial sum exact in f32 and f64.
pub const ATTENTION_UNITS: u32 = 1 << 20;

/// The crossing threshold the trace generator is built around.
pub const TRACE_TAU_COMP: f64 = 65.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub stroke: u8,
    /// Probability that a pixel inside the box is a stroke pixel, in (0, 1].
    pub density: f64,
}

fn default_margin() -> u8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub page_width: usize,
    pub page_height: usize,
    pub patch_size: usize,
    pub background_value: u8,
    #[serde(default)]
    pub content_boxes: Vec<ContentBox>,
    pub seed: u64,
    /// Minimum `|stroke - background_value|`; strokes closer than this would
    /// be read as background at the matching `tau_e`.
    #[serde(default = "default_margin")]
    pub contrast_margin: u8,
}

impl SynthSpec {
    pub fn grid_size(&self) -> (usize, usize) {
        (
            self.page_height.div_ceil(self.patch_size),
            self.page_width.div_ceil(self.patch_size),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h, p) = (self.page_width, self.page_height, self.patch_size);
        if w == 0 || h == 0 {
            return Err(invalid("page", format!("{w}x{h} has a zero side")));
        }
        if p == 0 || (p > w && p > h) {
            return Err(invalid("patch_size", format!("{p} does not tile a {w}x{h} page")));
        }
        if self.contrast_margin == 0 {
            return Err(invalid("contrast_margin", "must be at least 1"));
        }
        for (i, b) in self.content_boxes.iter().enumerate() {
            if b.w == 0 || b.h == 0 {
                return Err(invalid("content_boxes", format!("box {i} has zero area")));
            }
            if b.x + b.w > w || b.y + b.h > h {
                return Err(invalid("content_boxes", format!("box {i} leaves the {w}x{h} page")));
            }
            if !(b.density > 0.0 && b.density <= 1.0) {
                return Err(invalid("content_boxes", format!("box {i} density {} outside (0, 1]", b.density)));
            }
            if b.stroke.abs_diff(self.background_value) < self.contrast_margin {
                return Err(invalid(
                    "content_boxes",
                    format!(
                        "box {i} stroke {} within {} of background {}",
                        b.stroke, self.contrast_margin, self.background_value
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// A generated page and its patch labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub image: RasterImage,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major; true where every pixel of the (edge-padded) patch equals
    /// the background value.
    pub background: Vec<bool>,
}

impl SynthTruth {
    pub fn background_count(&self) -> usize {
        self.background.iter().filter(|&&b| b).count()
    }

    /// Content patches as a keep mask, i.e. what BTP should produce.
    pub fn content_mask(&self) -> TokenMask {
        let keep = self.background.iter().map(|&b| !b).collect();
        TokenMask::new(self.rows, self.cols, keep, Stage::Btp).expect("grid-sized")
    }

    pub fn labels(&self) -> TruthLabels {
        TruthLabels {
            rows: self.rows,
            cols: self.cols,
            patch_size: self.patch_size,
            background: self
                .background
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
        }
    }
}

/// JSON form of the truth grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthLabels {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub background: Vec<usize>,
}

/// Render a page: uniform background, pseudo-random stroke pixels inside each
/// box, and at least one stroke pixel in every patch cell a box touches.
pub fn gen_document(spec: &SynthSpec) -> Result<SynthTruth> {
    spec.validate()?;
    let (w, h, p) = (spec.page_width, spec.page_height, spec.patch_size);
    let mut gray = vec![spec.background_value; w * h];
    let mut rng = rng_for(spec.seed, 0);

    for b in &spec.content_boxes {
        let mut placed = vec![false; w.div_ceil(p) * h.div_ceil(p)];
        let cols = w.div_ceil(p);
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if b.density >= 1.0 || rng.random_bool(b.density) {
                    gray[y * w + x] = b.stroke;
                    placed[(y / p) * cols + x / p] = true;
                }
            }
        }
        // Floor: one stroke pixel in each cell the box overlaps.
        for cy in b.y / p..=(b.y + b.h - 1) / p {
            for cx in b.x / p..=(b.x + b.w - 1) / p {
                if placed[cy * cols + cx] {
                    continue;
                }
                let (y0, y1) = ((cy * p).max(b.y), ((cy + 1) * p).min(b.y + b.h));
                let (x0, x1) = ((cx * p).max(b.x), ((cx + 1) * p).min(b.x + b.w));
                let (y, x) = (rng.random_range(y0..y1), rng.random_range(x0..x1));
                gray[y * w + x] = b.stroke;
            }
        }
    }

    let (rows, cols) = spec.grid_size();
    let mut background = vec![true; rows * cols];
    for y in 0..h {
        for x in 0..w {
            if gray[y * w + x] != spec.background_value {
                background[(y / p) * cols + x / p] = false;
            }
        }
    }

    let rgb = gray.iter().flat_map(|&v| [v, v, v]).collect();
    Ok(SynthTruth {
        image: RasterImage::new(w, h, 3, rgb)?,
        patch_size: p,
        rows,
        cols,
        background,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenTraceSpec {
    pub layers: usize,
    pub dim: usize,
    /// First layer whose hidden-state norm exceeds 65; `layers` means never.
    pub crossing_layer: usize,
    pub n_visual: usize,
    /// Index of the first visual token in the full sequence.
    #[serde(default)]
    pub visual_start: usize,
    #[serde(default)]
    pub spike_indices: Vec<usize>,
    /// Share of the visual attention held by the spikes, at every layer.
    #[serde(default)]
    pub spike_mass: f64,
    #[serde(default)]
    pub vocab: Option<usize>,
    pub seed: u64,
}

impl GenTraceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 {
            return Err(invalid("layers/dim", "must both be positive"));
        }
        if self.crossing_layer > self.layers {
            return Err(invalid(
                "crossing_layer",
                format!("{} beyond {} layers", self.crossing_layer, self.layers),
            ));
        }
        if self.n_visual == 0 {
            return Err(invalid("n_visual", "must be positive"));
        }
        if let Some(&i) = self.spike_indices.iter().find(|&&i| i >= self.n_visual) {
            return Err(invalid("spike_indices", format!("{i} outside {} visual tokens", self.n_visual)));
        }
        let mut sorted = self.spike_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.spike_indices.len() {
            return Err(invalid("spike_indices", "duplicates"));
        }
        if !(0.0..=1.0).contains(&self.spike_mass) {
            return Err(invalid("spike_mass", format!("{} outside [0, 1]", self.spike_mass)));
        }
        if self.vocab == Some(0) {
            return Err(invalid("vocab", "must be positive"));
        }
        self.unit_split().map(|_| ())
    }

    /// (units per spike, units per other token) before jitter; spikes must
    /// strictly dominate every other token.
    fn unit_split(&self) -> Result<(u32, u32, u32, u32)> {
        let k = self.spike_indices.len() as u32;
        let m = self.n_visual as u32 - k;
        let spike_units = if k == 0 { 0 } else { realized_units(self.spike_mass) };
        let rest = ATTENTION_UNITS - spike_units;
        if m == 0 && rest != 0 {
            return Err(invalid("spike_mass", "every token is a spike, so the mass must be 1"));
        }
        if k == 0 {
            return Ok((0, 0, rest / m, rest % m));
        }
        let (per_spike, per_other) = (spike_units / k, rest.checked_div(m).unwrap_or(0));
        let other_max = per_other + u32::from(m != 0 && rest % m != 0);
        if per_spike <= other_max {
            return Err(invalid(
                "spike_mass",
                format!("{} over {k} spikes does not dominate the remaining tokens", self.spike_mass),
            ));
        }
        Ok((per_spike, spike_units % k, per_other, rest.checked_rem(m).unwrap_or(0)))
    }
}

fn realized_units(mass: f64) -> u32 {
    (mass * ATTENTION_UNITS as f64).round() as u32
}

/// The spike mass the generator actually plants (the request rounded to
/// whole attention units).
pub fn realized_spike_mass(spec: &GenTraceSpec) -> f64 {
    if spec.spike_indices.is_empty() {
        0.0
    } else {
        realized_units(spec.spike_mass) as f64 / ATTENTION_UNITS as f64
    }
}

/// Planted L2 norm of layer `l`: below 65 before the crossing, above after,
/// strictly increasing throughout.
pub fn planted_norm(l: usize, crossing: usize) -> f64 {
    if l < crossing {
        64.0 * (l + 1) as f64 / crossing as f64
    } else {
        66.0 + 2.0 * (l - crossing) as f64
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn attention_row(spec: &GenTraceSpec, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let (per_spike, spike_extra, per_other, other_extra) = spec.unit_split()?;
    let n = spec.n_visual;
    let mut is_spike = vec![false; n];
    for &i in &spec.spike_indices {
        is_spike[i] = true;
    }
    let mut units = vec![0u32; n];
    let (mut si, mut oi) = (0u32, 0u32);
    for i in 0..n {
        if is_spike[i] {
            units[i] = per_spike + u32::from(si < spike_extra);
            si += 1;
        } else {
            units[i] = per_other + u32::from(oi < other_extra);
            oi += 1;
        }
    }

    // Shuffle mass among non-spike tokens without letting any reach a spike.
    let others: Vec<usize> = (0..n).filter(|&i| !is_spike[i]).collect();
    let cap = if spec.spike_indices.is_empty() { ATTENTION_UNITS } else { per_spike - 1 };
    if others.len() >= 2 {
        for _ in 0..others.len() {
            let a = others[rng.random_range(0..others.len())];
            let b = others[rng.random_range(0..others.len())];
            let room = units[a].min(cap.saturating_sub(units[b]));
            if a != b && room > 0 {
                let t = rng.random_range(0..=room);
                units[a] -= t;
                units[b] += t;
            }
        }
    }
    Ok(units
        .into_iter()
        .map(|u| (u as f64 / ATTENTION_UNITS as f64) as f32)
        .collect())
}

/// Build a trace whose L2 series crosses 65 first at `crossing_layer`, whose
/// visual attention gives the spikes `spike_mass` at every layer, and (with a
/// vocabulary) whose logits sharpen layer by layer from uniform at layer 0.
pub fn gen_trace(spec: &GenTraceSpec) -> Result<DecoderTrace> {
    spec.validate()?;
    let mut dir_rng = rng_for(spec.seed, 1);
    let mut att_rng = rng_for(spec.seed, 2);
    let mut logit_rng = rng_for(spec.seed, 3);

    let mut hidden = Vec::with_capacity(spec.layers * spec.dim);
    for l in 0..spec.layers {
        let c = planted_norm(l, spec.crossing_layer);
        hidden.extend(unit_vector(&mut dir_rng, spec.dim).into_iter().map(|x| (c * x) as f32));
    }
    let mut attention = Vec::with_capacity(spec.layers * spec.n_visual);
    for _ in 0..spec.layers {
        attention.extend(attention_row(spec, &mut att_rng)?);
    }
    let range = (spec.visual_start, spec.visual_start + spec.n_visual);
    let mut trace = DecoderTrace::new(spec.layers, spec.dim, hidden, range, Some(attention))?;

    if let Some(vocab) = spec.vocab {
        let base: Vec<f64> = (0..vocab).map(|_| logit_rng.random_range(-1.0..=1.0)).collect();
        let logits = (0..spec.layers)
            .flat_map(|l| base.iter().map(move |&r| (0.5 * l as f64 * r) as f32))
            .collect();
        trace = trace.with_logits(vocab, logits)?;
    }

    let series = comprehension_l2(&trace);
    let increasing = series.values.windows(2).all(|w| w[0] < w[1]);
    let first = series.values.iter().position(|&v| v >= TRACE_TAU_COMP);
    let expected = (spec.crossing_layer < spec.layers).then_some(spec.crossing_layer);
    if !increasing || first != expected {
        return Err(Error::InvalidParameter {
            name: "gen_trace",
            reason: format!("constructed series {:?} misses its crossing", series.values),
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenEmbeddingSpec {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub question_tokens: usize,
    /// Grid cells aligned with the question; the rest point elsewhere.
    #[serde(default)]
    pub relevant: Vec<usize>,
    pub seed: u64,
}

/// Document embeddings on a `rows × cols` grid and a question whose tokens
/// all point along one direction. Relevant cells point along that direction
/// too; others are orthogonal to it.
pub fn gen_embeddings(spec: &GenEmbeddingSpec) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let n = spec.rows * spec.cols;
    if n == 0 || spec.question_tokens == 0 {
        return Err(invalid("embeddings", "grid and question must be non-empty"));
    }
    if spec.dim < 2 {
        return Err(invalid("dim", "need at least 2 dimensions"));
    }
    if let Some(&i) = spec.relevant.iter().find(|&&i| i >= n) {
        return Err(invalid("relevant", format!("cell {i} outside {n} cells")));
    }
    let mut rng = rng_for(spec.seed, 4);
    let axis = unit_vector(&mut rng, spec.dim);
    let project_out = |v: Vec<f64>| -> Vec<f64> {
        let d: f64 = v.iter().zip(&axis).map(|(a, b)| a * b).sum();
        v.iter().zip(&axis).map(|(a, b)| a - d * b).collect()
    };

    let mut is_relevant = vec![false; n];
    for &i in &spec.relevant {
        is_relevant[i] = true;
    }
    let mut doc = Vec::with_capacity(n * spec.dim);
    for &relevant in &is_relevant {
        let scale = rng.random_range(0.5..2.0);
        let v = if relevant {
            axis.clone()
        } else {
            project_out(unit_vector(&mut rng, spec.dim))
        };
        doc.extend(v.into_iter().map(|x| (scale * x) as f32));
    }
    let mut qst = Vec::with_capacity(spec.question_tokens * spec.dim);
    for _ in 0..spec.question_tokens {
        let scale = rng.random_range(0.5..2.0);
        qst.extend(axis.iter().map(|x| (scale * x) as f32));
    }
    Ok((
        EmbeddingMatrix::new(n, spec.dim, doc)?,
        EmbeddingMatrix::new(spec.question_tokens, spec.dim, qst)?,
    ))
}
