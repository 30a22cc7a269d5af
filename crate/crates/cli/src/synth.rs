use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokprune_core::image::{encode_png, encode_pnm};
use tokprune_core::synth::realized_spike_mass;
use tokprune_core::trace_io::{write_atomic, write_embeddings, write_trace, GridSize, NormPoint, TraceMeta};
use tokprune_core::{gen_document, gen_embeddings, gen_trace, GenEmbeddingSpec, GenTraceSpec, SynthSpec};

use crate::commands::write_json_file;
use crate::emit;
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Fixture spec (JSON): {"document"?, "image_format"?, "embeddings"?, "traces"?}.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ImageFormat {
    #[default]
    Ppm,
    Png,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceEntry {
    name: String,
    spec: GenTraceSpec,
    /// Spatial layout of the visual span; defaults to 1 × n_visual.
    #[serde(default)]
    grid: Option<GridSize>,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    model_name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureSpec {
    #[serde(default)]
    document: Option<SynthSpec>,
    #[serde(default)]
    image_format: ImageFormat,
    #[serde(default)]
    embeddings: Option<GenEmbeddingSpec>,
    #[serde(default)]
    traces: Vec<TraceEntry>,
}

#[derive(Debug, Serialize)]
struct TruthFile {
    background_value: u8,
    rows: usize,
    cols: usize,
    patch_size: usize,
    background: Vec<usize>,
}

pub fn run(a: SynthArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| CliError::io(format!("{}: {e}", a.spec.display())))?;
    let spec: FixtureSpec =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", a.spec.display())))?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut files = Vec::new();
    let mut summary = serde_json::Map::new();

    if let Some(doc) = &spec.document {
        let truth = gen_document(doc).map_err(|e| CliError::from(e).at("synth"))?;
        let (name, bytes) = match spec.image_format {
            ImageFormat::Ppm => ("page.ppm", encode_pnm(&truth.image)),
            ImageFormat::Png => ("page.png", encode_png(&truth.image)?),
        };
        write_atomic(&a.out_dir.join(name), &bytes)?;
        let labels = truth.labels();
        write_json_file(
            &a.out_dir.join("truth.json"),
            &TruthFile {
                background_value: doc.background_value,
                rows: labels.rows,
                cols: labels.cols,
                patch_size: labels.patch_size,
                background: labels.background,
            },
        )?;
        files.push(name.to_string());
        files.push("truth.json".to_string());
        summary.insert("background_patches".into(), json!(truth.background_count()));
        summary.insert("total_patches".into(), json!(truth.rows * truth.cols));
    }

    if let Some(emb) = &spec.embeddings {
        let (doc, qst) = gen_embeddings(emb).map_err(|e| CliError::from(e).at("synth"))?;
        write_embeddings(a.out_dir.join("doc_emb.bin"), &doc)?;
        write_embeddings(a.out_dir.join("qst_emb.bin"), &qst)?;
        files.push("doc_emb.bin".into());
        files.push("qst_emb.bin".into());
    }

    let mut traces = Vec::new();
    for entry in &spec.traces {
        if entry.name.is_empty() || entry.name.contains(['/', '\\']) {
            return Err(CliError::usage(format!("trace name {:?} is not a plain file stem", entry.name)));
        }
        let trace = gen_trace(&entry.spec).map_err(|e| CliError::from(e).at("synth"))?;
        let meta = TraceMeta {
            model_name: entry.model_name.clone().unwrap_or_else(|| "synthetic".into()),
            grid: entry.grid.unwrap_or(GridSize {
                rows: 1,
                cols: entry.spec.n_visual,
            }),
            norm_point: NormPoint::PostNorm,
            score: entry.score,
        };
        let manifest = write_trace(&a.out_dir, &entry.name, &trace, &meta)?;
        files.push(manifest.file_name().unwrap().to_string_lossy().into_owned());
        traces.push(json!({
            "name": entry.name,
            "realized_spike_mass": realized_spike_mass(&entry.spec),
        }));
    }
    if !traces.is_empty() {
        summary.insert("traces".into(), json!(traces));
    }
    summary.insert("files".into(), json!(files));
    emit(&summary)
}
