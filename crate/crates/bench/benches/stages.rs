use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tokprune_bench::{embeddings, page, trace};
use tokprune_core::metrics::{pipeline_flops, FlopsModel, PipelineStage, StageCount};
use tokprune_core::pipeline::btp_page;
use tokprune_core::{run_ctp, run_qtp, Criterion as Comprehension, CtpParams, PruneConfig, PruneLayer, QtpParams};

fn btp(c: &mut Criterion) {
    let cfg = PruneConfig::preset(1).unwrap();
    let mut group = c.benchmark_group("btp");
    for side in [448, 896, 1792] {
        let image = page(side, cfg.patch_size);
        group.bench_with_input(BenchmarkId::from_parameter(side), &image, |b, image| {
            b.iter(|| btp_page(black_box(image), &cfg, cfg.tau_bg).unwrap())
        });
    }
    group.finish();
}

fn qtp(c: &mut Criterion) {
    let mut group = c.benchmark_group("qtp");
    for side in [16, 32] {
        let (doc, qst) = embeddings(side, side, 128, 20);
        let params = QtpParams {
            source_grid: (side, side),
            target_grid: (side * 2, side * 2),
            sigma: 1.0,
            tau_qst: 0.3,
            block: 2,
        };
        group.bench_function(BenchmarkId::from_parameter(side), |b| {
            b.iter(|| run_qtp(black_box(&doc), black_box(&qst), &params).unwrap())
        });
    }
    group.finish();
}

fn ctp(c: &mut Criterion) {
    let t = trace(28, 3584, 1024);
    let mut group = c.benchmark_group("ctp");
    for criterion in [Comprehension::L2Norm, Comprehension::Entropy, Comprehension::FeatureDelta] {
        let params = CtpParams {
            criterion,
            tau_comp: 65.0,
            tau_att: 0.5,
            window: (15, 27),
        };
        group.bench_function(criterion.to_string(), |b| b.iter(|| run_ctp(black_box(&t), &params).unwrap()));
    }
    group.finish();
}

fn flops(c: &mut Criterion) {
    let model = FlopsModel::default();
    let stages = [
        StageCount::new(PipelineStage::Raw, 2600),
        StageCount::new(PipelineStage::Btp, 1400),
        StageCount::new(PipelineStage::Qtp, 900),
        StageCount::new(PipelineStage::Ctp, 120),
    ];
    c.bench_function("pipeline_flops", |b| {
        b.iter(|| pipeline_flops(black_box(&model), black_box(&stages), PruneLayer::Layer(18)).unwrap())
    });
}

criterion_group!(benches, btp, qtp, ctp, flops);
criterion_main!(benches);
