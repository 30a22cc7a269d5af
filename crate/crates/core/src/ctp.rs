//! Comprehension-aware token pruning over exported decoder traces.
//!
//! A per-layer comprehension signal is computed from the last token, the first
//! layer inside the search window where it crosses `tau_comp` becomes the
//! pruning layer, and visual tokens whose (max-normalized) last-token
//! attention at that layer falls below `tau_att` are dropped once.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, mismatch, Error, Result};
use crate::mask::{Stage, TokenMask};

/// Per-layer last-token hidden states, plus optional per-layer last-token
/// attention over the visual tokens and per-layer logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    num_layers: usize,
    hidden_dim: usize,
    hidden: Vec<f32>,
    visual_range: (usize, usize),
    attention: Option<Vec<f32>>,
    vocab: usize,
    logits: Option<Vec<f32>>,
}

impl DecoderTrace {
    /// `hidden` is `num_layers × hidden_dim`; `attention`, when present, is
    /// `num_layers × (end - start)` and already restricted to the visual span.
    pub fn new(
        num_layers: usize,
        hidden_dim: usize,
        hidden: Vec<f32>,
        visual_range: (usize, usize),
        attention: Option<Vec<f32>>,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(invalid("num_layers", "trace needs at least one layer"));
        }
        if hidden.len() != num_layers * hidden_dim {
            return Err(mismatch(
                "hidden states",
                format!("{num_layers}x{hidden_dim}"),
                format!("{} values", hidden.len()),
            ));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hidden states"));
        }
        let (start, end) = visual_range;
        if start > end {
            return Err(invalid("visual_range", format!("[{start}, {end}) is reversed")));
        }
        if let Some(att) = &attention {
            let n = end - start;
            if n == 0 {
                return Err(invalid("visual_range", "empty while attention is present"));
            }
            if att.len() != num_layers * n {
                return Err(mismatch(
                    "attention",
                    format!("{num_layers}x{n}"),
                    format!("{} values", att.len()),
                ));
            }
            if att.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("attention"));
            }
            if let Some((index, &value)) = att.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::NegativeAttention {
                    index: index % n,
                    value,
                });
            }
        }
        Ok(Self {
            num_layers,
            hidden_dim,
            hidden,
            visual_range,
            attention,
            vocab: 0,
            logits: None,
        })
    }

    /// Attach `num_layers × vocab` logits.
    pub fn with_logits(mut self, vocab: usize, logits: Vec<f32>) -> Result<Self> {
        if vocab == 0 {
            return Err(invalid("vocab", "must be at least 1"));
        }
        if logits.len() != self.num_layers * vocab {
            return Err(mismatch(
                "logits",
                format!("{}x{vocab}", self.num_layers),
                format!("{} values", logits.len()),
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        self.vocab = vocab;
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn visual_range(&self) -> (usize, usize) {
        self.visual_range
    }

    pub fn n_visual(&self) -> usize {
        self.visual_range.1 - self.visual_range.0
    }

    pub fn hidden(&self, layer: usize) -> &[f32] {
        &self.hidden[layer * self.hidden_dim..(layer + 1) * self.hidden_dim]
    }

    pub fn hidden_flat(&self) -> &[f32] {
        &self.hidden
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn attention(&self, layer: usize) -> Option<&[f32]> {
        let n = self.n_visual();
        self.attention.as_ref().map(|a| &a[layer * n..(layer + 1) * n])
    }

    pub fn attention_flat(&self) -> Option<&[f32]> {
        self.attention.as_deref()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self, layer: usize) -> Option<&[f32]> {
        self.logits
            .as_ref()
            .map(|l| &l[layer * self.vocab..(layer + 1) * self.vocab])
    }

    pub fn logits_flat(&self) -> Option<&[f32]> {
        self.logits.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Norm of the last-token hidden state; prune once it reaches `tau_comp`.
    #[default]
    L2Norm,
    /// Entropy of the layer's output distribution; prune once it falls to
    /// `tau_comp` or below.
    Entropy,
    /// Norm of the change in the last-token state from the previous layer.
    FeatureDelta,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::L2Norm => "l2_norm",
            Criterion::Entropy => "entropy",
            Criterion::FeatureDelta => "feature_delta",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2_norm" | "l2" => Ok(Criterion::L2Norm),
            "entropy" => Ok(Criterion::Entropy),
            "feature_delta" | "delta" => Ok(Criterion::FeatureDelta),
            other => Err(invalid("criterion", format!("unknown criterion {other:?}"))),
        }
    }
}

/// One comprehension value per decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComprehensionSeries {
    pub criterion: Criterion,
    pub values: Vec<f64>,
}

impl ComprehensionSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn crosses(&self, layer: usize, tau_comp: f64) -> bool {
        match self.criterion {
            Criterion::Entropy => self.values[layer] <= tau_comp,
            Criterion::L2Norm | Criterion::FeatureDelta => self.values[layer] >= tau_comp,
        }
    }
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn comprehension_l2(trace: &DecoderTrace) -> ComprehensionSeries {
    let values = (0..trace.num_layers)
        .map(|l| l2(trace.hidden(l).iter().map(|&x| x as f64)))
        .collect();
    ComprehensionSeries {
        criterion: Criterion::L2Norm,
        values,
    }
}

/// Shannon entropy (nats) of `softmax(logits)`, clamped to `[0, ln V]`.
pub fn softmax_entropy(logits: &[f32]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let shifted: Vec<f64> = logits.iter().map(|&z| z as f64 - max).collect();
    let log_sum = shifted.iter().map(|z| z.exp()).sum::<f64>().ln();
    let entropy = -shifted
        .iter()
        .map(|&z| {
            let log_p = z - log_sum;
            log_p.exp() * log_p
        })
        .sum::<f64>();
    entropy.clamp(0.0, (logits.len() as f64).ln())
}

pub fn comprehension_entropy(trace: &DecoderTrace) -> Result<ComprehensionSeries> {
    if trace.logits.is_none() {
        return Err(Error::MissingLogits);
    }
    let values = (0..trace.num_layers)
        .map(|l| softmax_entropy(trace.logits(l).expect("checked above")))
        .collect();
    Ok(ComprehensionSeries {
        criterion: Criterion::Entropy,
        values,
    })
}

pub fn comprehension_feature_delta(trace: &DecoderTrace) -> Result<ComprehensionSeries> {
    if trace.num_layers < 2 {
        return Err(invalid("num_layers", "feature delta needs at least two layers"));
    }
    let values = std::iter::once(0.0)
        .chain((1..trace.num_layers).map(|l| {
            l2(trace
                .hidden(l)
                .iter()
                .zip(trace.hidden(l - 1))
                .map(|(&a, &b)| a as f64 - b as f64))
        }))
        .collect();
    Ok(ComprehensionSeries {
        criterion: Criterion::FeatureDelta,
        values,
    })
}

pub fn comprehension(trace: &DecoderTrace, criterion: Criterion) -> Result<ComprehensionSeries> {
    match criterion {
        Criterion::L2Norm => Ok(comprehension_l2(trace)),
        Criterion::Entropy => comprehension_entropy(trace),
        Criterion::FeatureDelta => comprehension_feature_delta(trace),
    }
}

/// Selected pruning layer (0-indexed), or no pruning at all. Orders with
/// `NoPrune` after every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PruneLayer {
    Layer(usize),
    NoPrune,
}

impl PruneLayer {
    pub fn layer(self) -> Option<usize> {
        match self {
            PruneLayer::Layer(l) => Some(l),
            PruneLayer::NoPrune => None,
        }
    }
}

impl fmt::Display for PruneLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneLayer::Layer(l) => write!(f, "{l}"),
            PruneLayer::NoPrune => f.write_str("no_prune"),
        }
    }
}

impl Serialize for PruneLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PruneLayer::Layer(l) => s.serialize_u64(*l as u64),
            PruneLayer::NoPrune => s.serialize_str("no_prune"),
        }
    }
}

impl<'de> Deserialize<'de> for PruneLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct LayerVisitor;

        impl Visitor<'_> for LayerVisitor {
            type Value = PruneLayer;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a layer index or \"no_prune\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<PruneLayer, E> {
                Ok(PruneLayer::Layer(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<PruneLayer, E> {
                match v {
                    "no_prune" => Ok(PruneLayer::NoPrune),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }

        d.deserialize_any(LayerVisitor)
    }
}

/// First layer in `[min_layer, max_layer]` whose signal crosses `tau_comp`
/// (`>=` for norm-like criteria, `<=` for entropy).
pub fn select_prune_layer(
    series: &ComprehensionSeries,
    tau_comp: f64,
    min_layer: usize,
    max_layer: usize,
) -> Result<PruneLayer> {
    if tau_comp.is_nan() {
        return Err(invalid("tau_comp", "NaN"));
    }
    if min_layer > max_layer || max_layer >= series.len() {
        return Err(invalid(
            "ctp_window",
            format!(
                "[{min_layer}, {max_layer}] is not a window inside {} layers",
                series.len()
            ),
        ));
    }
    Ok((min_layer..=max_layer)
        .find(|&l| series.crosses(l, tau_comp))
        .map_or(PruneLayer::NoPrune, PruneLayer::Layer))
}

/// Keep visual tokens whose attention, divided by the maximum, is at least
/// `tau_att`. Returns a `1 × N` mask.
pub fn ctp_mask(attention: &[f32], tau_att: f64) -> Result<TokenMask> {
    if !(0.0..=1.0).contains(&tau_att) {
        return Err(invalid("tau_att", format!("{tau_att} (must lie in [0, 1])")));
    }
    if attention.is_empty() {
        return Err(Error::Empty("attention"));
    }
    if let Some((index, &value)) = attention.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeAttention { index, value });
    }
    let max = attention.iter().fold(0.0f64, |m, &a| m.max(a as f64));
    if max == 0.0 {
        return Err(Error::ZeroAttention);
    }
    let keep = attention.iter().map(|&a| a as f64 / max >= tau_att).collect();
    TokenMask::new(1, attention.len(), keep, Stage::Ctp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtpParams {
    pub criterion: Criterion,
    pub tau_comp: f64,
    pub tau_att: f64,
    /// Inclusive layer window searched for the pruning layer. The upper end
    /// is clipped to the trace depth.
    pub window: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct CtpOutcome {
    pub series: ComprehensionSeries,
    pub layer: PruneLayer,
    /// `1 × n_visual`; all kept when no layer qualifies.
    pub mask: TokenMask,
}

/// Select the pruning layer and threshold that layer's attention.
pub fn run_ctp(trace: &DecoderTrace, params: &CtpParams) -> Result<CtpOutcome> {
    let series = comprehension(trace, params.criterion)?;
    let (lo, hi) = params.window;
    let hi = hi.min(trace.num_layers - 1);
    let layer = select_prune_layer(&series, params.tau_comp, lo, hi)?;
    let mask = match layer {
        PruneLayer::NoPrune => TokenMask::filled(1, trace.n_visual(), true, Stage::Ctp),
        PruneLayer::Layer(l) => {
            let att = trace.attention(l).ok_or(Error::MissingAttention { layer: l })?;
            ctp_mask(att, params.tau_att)?
        }
    };
    Ok(CtpOutcome {
        series,
        layer,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from_rows(rows: &[Vec<f32>]) -> DecoderTrace {
        let d = rows[0].len();
        DecoderTrace::new(rows.len(), d, rows.concat(), (0, 0), None).unwrap()
    }

    #[test]
    fn l2_examples() {
        let mut one_hot = vec![0.0f32; 8];
        one_hot[3] = 65.0;
        let t = trace_from_rows(&[vec![0.0; 8], one_hot]);
        assert_eq!(comprehension_l2(&t).values, vec![0.0, 65.0]);
    }

    #[test]
    fn entropy_examples() {
        let uniform = [0.5f32; 4];
        assert!((softmax_entropy(&uniform) - 4f64.ln()).abs() < 1e-12);

        let mut spiked = [0.0f32; 5];
        spiked[2] = 1000.0;
        assert!(softmax_entropy(&spiked) < 1e-12);

        // Direct evaluation: p = e^z / Σ e^z, H = -Σ p ln p.
        let z = [1.0f64, 2.0, 3.0];
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        let expected: f64 = z.iter().map(|v| v.exp() / total).map(|p| -p * p.ln()).sum();
        assert!((expected - 0.832_39).abs() < 1e-5);
        assert!((softmax_entropy(&[1.0, 2.0, 3.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn entropy_needs_logits() {
        let t = trace_from_rows(&[vec![1.0; 2], vec![2.0; 2]]);
        assert_eq!(comprehension_entropy(&t), Err(Error::MissingLogits));
        let t = t.with_logits(3, vec![0.0; 6]).unwrap();
        let s = comprehension_entropy(&t).unwrap();
        assert!(s.values.iter().all(|v| (v - 3f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn feature_delta_examples() {
        let same = trace_from_rows(&vec![vec![1.0, 2.0]; 4]);
        assert_eq!(comprehension_feature_delta(&same).unwrap().values, vec![0.0; 4]);

        let steps: Vec<Vec<f32>> = (0..5).map(|l| vec![l as f32, 0.0, 0.0]).collect();
        assert_eq!(
            comprehension_feature_delta(&trace_from_rows(&steps)).unwrap().values,
            vec![0.0, 1.0, 1.0, 1.0, 1.0]
        );
        assert!(comprehension_feature_delta(&trace_from_rows(&[vec![1.0]])).is_err());
    }

    fn series(values: Vec<f64>, criterion: Criterion) -> ComprehensionSeries {
        ComprehensionSeries { criterion, values }
    }

    #[test]
    fn selection_examples() {
        let s = series((0..28).map(|l| 10.0 * (l + 1) as f64).collect(), Criterion::L2Norm);
        assert_eq!(select_prune_layer(&s, 65.0, 0, 27).unwrap(), PruneLayer::Layer(6));
        assert_eq!(select_prune_layer(&s, 0.0, 4, 27).unwrap(), PruneLayer::Layer(4));
        assert_eq!(select_prune_layer(&s, 281.0, 0, 27).unwrap(), PruneLayer::NoPrune);
        assert_eq!(select_prune_layer(&s, 65.0, 15, 27).unwrap(), PruneLayer::Layer(15));
        assert!(select_prune_layer(&s, 65.0, 5, 28).is_err());
        assert!(select_prune_layer(&s, 65.0, 6, 5).is_err());
    }

    #[test]
    fn entropy_selection_uses_at_most() {
        let s = series(vec![3.0, 2.5, 1.0, 0.5], Criterion::Entropy);
        assert_eq!(select_prune_layer(&s, 1.0, 0, 3).unwrap(), PruneLayer::Layer(2));
        assert_eq!(select_prune_layer(&s, 0.1, 0, 3).unwrap(), PruneLayer::NoPrune);
    }

    #[test]
    fn no_prune_orders_last() {
        assert!(PruneLayer::Layer(usize::MAX) < PruneLayer::NoPrune);
        assert_eq!(serde_json::to_string(&PruneLayer::NoPrune).unwrap(), "\"no_prune\"");
        assert_eq!(serde_json::from_str::<PruneLayer>("7").unwrap(), PruneLayer::Layer(7));
    }

    #[test]
    fn mask_examples() {
        assert_eq!(ctp_mask(&[0.2; 6], 1.0).unwrap().kept_count(), 6);
        assert_eq!(ctp_mask(&[0.0, 0.0, 3.0, 0.1], 0.5).unwrap().kept_indices(), vec![2]);
        let m = ctp_mask(&[0.4, 0.1, 0.2, 0.05, 0.25], 0.5).unwrap();
        assert_eq!(m.kept_indices(), vec![0, 2, 4]);
        assert_eq!((m.rows(), m.cols(), m.stage()), (1, 5, Stage::Ctp));
    }

    #[test]
    fn mask_errors() {
        assert_eq!(ctp_mask(&[0.0; 3], 0.5), Err(Error::ZeroAttention));
        assert!(matches!(ctp_mask(&[0.1, -0.1], 0.5), Err(Error::NegativeAttention { index: 1, .. })));
        assert!(ctp_mask(&[], 0.5).is_err());
        assert!(ctp_mask(&[1.0], 1.5).is_err());
    }

    fn crossing_trace() -> DecoderTrace {
        // Norms 10, 20, ..., 80: crosses 65 at layer 6.
        let hidden: Vec<f32> = (0..8).flat_map(|l| [10.0 * (l + 1) as f32, 0.0]).collect();
        let mut attention = vec![0.1f32; 8 * 4];
        attention[6 * 4 + 2] = 0.9;
        DecoderTrace::new(8, 2, hidden, (3, 7), Some(attention)).unwrap()
    }

    #[test]
    fn run_ctp_composes() {
        let params = CtpParams {
            criterion: Criterion::L2Norm,
            tau_comp: 65.0,
            tau_att: 0.5,
            window: (0, 27),
        };
        let out = run_ctp(&crossing_trace(), &params).unwrap();
        assert_eq!(out.layer, PruneLayer::Layer(6));
        assert_eq!(out.mask.kept_indices(), vec![2]);

        let none = run_ctp(&crossing_trace(), &CtpParams { tau_comp: 1e9, ..params }).unwrap();
        assert_eq!(none.layer, PruneLayer::NoPrune);
        assert_eq!(none.mask.kept_count(), 4);

        let all = run_ctp(&crossing_trace(), &CtpParams { tau_att: 0.0, ..params }).unwrap();
        assert_eq!(all.layer, PruneLayer::Layer(6));
        assert_eq!(all.mask.kept_count(), 4);

        assert!(run_ctp(&crossing_trace(), &CtpParams { window: (9, 27), ..params }).is_err());
    }

    #[test]
    fn selected_layer_needs_attention() {
        let hidden: Vec<f32> = (0..3).flat_map(|l| [100.0 * l as f32, 0.0]).collect();
        let t = DecoderTrace::new(3, 2, hidden, (0, 4), None).unwrap();
        let params = CtpParams {
            criterion: Criterion::L2Norm,
            tau_comp: 65.0,
            tau_att: 0.5,
            window: (0, 2),
        };
        assert_eq!(run_ctp(&t, &params).unwrap_err(), Error::MissingAttention { layer: 1 });
    }

    #[test]
    fn trace_validation() {
        assert!(DecoderTrace::new(2, 2, vec![0.0; 3], (0, 1), None).is_err());
        assert!(DecoderTrace::new(1, 1, vec![0.0], (0, 0), Some(vec![])).is_err());
        assert!(DecoderTrace::new(1, 1, vec![0.0], (0, 2), Some(vec![0.5, -0.5])).is_err());
        assert!(DecoderTrace::new(1, 1, vec![f32::INFINITY], (0, 0), None).is_err());
    }
}
