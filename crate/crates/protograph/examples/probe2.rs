//! Scratch probe: benchmark tuning (scaffolding aid).
use protograph::data::synth::{calibrate_deviation, generate_in_memory, SynthSpec};
use protograph::data::hybrid_split;
use protograph::harness::{train, evaluate, TrainOptions};
use protograph::model::{Model, ModelConfig};
use protograph::embedding::EmbeddingConfig;
use protograph::distribution::{GraphConfig, ProtoMode};
use std::time::Instant;

fn main() {
    let side: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(24);
    let noise: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(0.12);
    let steps: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let outlier: f64 = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let seed0: u64 = std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(11);
    let base = SynthSpec { seed: 100, side, noise, outlier_rate: outlier, ..Default::default() };
    let t = Instant::now();
    let (delta, oracle) = calibrate_deviation(&base, 0.75, 3, 5, 300, 1234).unwrap();
    println!("side {side} noise {noise}: delta {delta:.3} oracle {oracle:.3} ({:.1}s)", t.elapsed().as_secs_f64());
    let spec = SynthSpec { deviation: delta, ..base };
    let ds = generate_in_memory(&spec);
    let (train_v, test_v) = hybrid_split(&ds, 3).unwrap();
    for (label, dense, proto) in [("dense+pro", true, ProtoMode::Nodes), ("dense", true, ProtoMode::None), ("non-dense", false, ProtoMode::None)] {
        let config = ModelConfig {
            embedding: EmbeddingConfig { input_size: side, stem_filters: 4, block_widths: vec![4, 8, 48], basic_blocks_per_stage: 1, residual: true },
            graph: GraphConfig { dense, proto_mode: proto, ..GraphConfig::preset(3, 5) },
            learning_rate: 0.001,
            seed: seed0,
        };
        let mut model = Model::new(config).unwrap();
        let t = Instant::now();
        let tr = train(&mut model, &train_v, &TrainOptions::new(steps, 21)).unwrap();
        let train_t = t.elapsed().as_secs_f64();
        let ev = evaluate(&model, &test_v, 300, 77, 1).unwrap();
        println!("{label}: acc {:.3} (train {:.0}s, final loss {:.3})", ev.mean_accuracy, train_t, tr.records[steps.saturating_sub(100)..].iter().map(|r| r.loss).sum::<f64>()/100.0);
    }
}
