use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use tokprune_core::ctp::comprehension_l2;
use tokprune_core::trace_io::write_atomic;
use tokprune_core::{load_manifest, top_k_attention_mass};

use crate::emit;
use crate::error::{CliError, CliResult};

pub const LAYER_HEADER: &str = "trace,layer,n_visual,top_k_mass,l2_norm,score";
pub const BIN_HEADER: &str = "bin,l2_lo,l2_hi,count,mean_score";

/// Analyze every `*.manifest.json` in a directory.
///
/// --out-csv columns, one row per trace and layer:
///   trace         manifest file stem
///   layer         0-based decoder layer
///   n_visual      visual tokens in the trace
///   top_k_mass    share of visual attention held by the top ceil(k·n_visual) tokens (empty without attention)
///   l2_norm       L2 norm of the last-token hidden state
///   score         the manifest's score (empty when absent)
///
/// --out-bins columns, equal-width bins of l2_norm at --bin-layer over scored traces:
///   bin, l2_lo, l2_hi, count, mean_score (empty for empty bins)
#[derive(Debug, Args)]
#[command(verbatim_doc_comment)]
pub struct AnalyzeArgs {
    /// Directory of trace manifests.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Fraction of tokens counted as "top".
    #[arg(long, default_value_t = 0.1)]
    top_k: f64,
    /// Score-binning CSV.
    #[arg(long)]
    out_bins: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Layer whose norm is binned; defaults to each trace's last layer.
    #[arg(long)]
    bin_layer: Option<usize>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(a: AnalyzeArgs) -> CliResult<()> {
    if !(a.top_k > 0.0 && a.top_k <= 1.0) {
        return Err(CliError::usage(format!("--top-k {} outside (0, 1]", a.top_k)));
    }
    if a.bins == 0 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    let entries = std::fs::read_dir(&a.traces).map_err(|e| CliError::io(format!("{}: {e}", a.traces.display())))?;
    let mut manifests: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    manifests.sort();

    let mut csv = format!("{LAYER_HEADER}\n");
    let mut rows = 0usize;
    let mut binned: Vec<(f64, f64)> = Vec::new();
    for path in &manifests {
        let (manifest, trace) = load_manifest(path)?;
        let name = path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .trim_end_matches(".manifest.json")
            .to_string();
        let norms = comprehension_l2(&trace).values;
        for (l, norm) in norms.iter().enumerate() {
            let mass = match trace.attention(l) {
                Some(att) => Some(top_k_attention_mass(att, a.top_k).map_err(|e| CliError::from(e).at(&name))?),
                None => None,
            };
            writeln!(csv, "{name},{l},{},{},{norm},{}", trace.n_visual(), opt(mass), opt(manifest.score)).unwrap();
            rows += 1;
        }
        if let Some(score) = manifest.score {
            let layer = a.bin_layer.unwrap_or(norms.len() - 1);
            let norm = *norms.get(layer).ok_or_else(|| {
                CliError::usage(format!("--bin-layer {layer} beyond {} layers of {name}", norms.len()))
            })?;
            binned.push((norm, score));
        }
    }
    write_atomic(&a.out_csv, csv.as_bytes())?;

    if let Some(path) = &a.out_bins {
        write_atomic(path, bin_scores(&binned, a.bins).as_bytes())?;
    }
    emit(&json!({
        "traces": manifests.len(),
        "rows": rows,
        "scored": binned.len(),
    }))
}

fn bin_scores(points: &[(f64, f64)], bins: usize) -> String {
    let mut out = format!("{BIN_HEADER}\n");
    if points.is_empty() {
        return out;
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut sums = vec![(0usize, 0.0f64); bins];
    for &(norm, score) in points {
        let b = if width > 0.0 {
            (((norm - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        sums[b].0 += 1;
        sums[b].1 += score;
    }
    for (b, (count, total)) in sums.into_iter().enumerate() {
        let mean = (count > 0).then(|| total / count as f64);
        let (l, h) = (lo + width * b as f64, lo + width * (b + 1) as f64);
        writeln!(out, "{b},{l},{h},{count},{}", opt(mean)).unwrap();
    }
    out
}
