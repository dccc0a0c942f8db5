//! Temporal aggregation over long verdict streams.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use matchlight_core::labels::EventKind;
use matchlight_core::nn::rng::rng_for;
use matchlight_core::pipeline::{aggregate, FrameVerdict, Outcome, PipelineConfig};
use rand::Rng;

fn verdict_stream(frames: usize, tag: u64) -> Vec<FrameVerdict> {
    let mut rng = rng_for(0xa66, &[tag]);
    let kinds = EventKind::ALL;
    (0..frames)
        .map(|frame_index| {
            let outcome = match rng.gen_range(0..10) {
                0..=3 => Outcome::RejectedVae { loss: rng.gen_range(1e3..4e3) },
                4..=6 => Outcome::RejectedLowConfidence { top_prob: rng.gen_range(0.1..0.9) },
                _ => Outcome::Event {
                    kind: kinds[rng.gen_range(0..kinds.len())],
                    confidence: rng.gen_range(0.9..1.0),
                },
            };
            FrameVerdict { frame_index, outcome }
        })
        .collect()
}

fn bench_aggregate(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    for frames in [3_000, 30_000] {
        let verdicts = verdict_stream(frames, frames as u64);
        c.bench_function(&format!("aggregate {} frames", frames), |bench| {
            bench.iter(|| aggregate(black_box(&verdicts), &cfg))
        });
    }
}

criterion_group!(pipeline, bench_aggregate);
criterion_main!(pipeline);
