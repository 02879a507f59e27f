//! Scratch probe for acceptance-criterion feasibility (scaffolding aid).
use protograph::data::synth::{calibrate_deviation, generate_in_memory, SynthSpec};
use protograph::data::hybrid_split;
use protograph::harness::{train, evaluate, TrainOptions};
use protograph::model::{Model, ModelConfig};
use protograph::embedding::EmbeddingConfig;
use protograph::distribution::{GraphConfig, ProtoMode};
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    if which == "c4" {
        // overfit: desk preset, frozen pool of 8, 3-way 5-shot, lr 0.001
        let spec = SynthSpec { seed: 100, ..Default::default() };
        let ds = generate_in_memory(&spec);
        let (train_v, _) = hybrid_split(&ds, 3).unwrap();
        let mut model = Model::new(ModelConfig::desk(3, 5, 1)).unwrap();
        let mut opts = TrainOptions::new(1500, 7);
        opts.frozen_pool = Some(8);
        opts.log_every = Some(100);
        let t = Instant::now();
        let rep = train(&mut model, &train_v, &opts).unwrap();
        let w: Vec<f64> = rep.records.chunks(50).map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64).collect();
        println!("window means: {:?}", w.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        let last100: f64 = rep.records[1400..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        let min_loss = rep.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let below = rep.records.iter().position(|r| r.loss < 0.05);
        println!("c4: {:.1}s; mean loss last100 {last100:.4}; min {min_loss:.4}; first step with loss<0.05: {below:?}", t.elapsed().as_secs_f64());
    } else if which == "cal" {
        let t = Instant::now();
        let base = SynthSpec { seed: 100, ..Default::default() };
        let (delta, acc) = calibrate_deviation(&base, 0.75, 3, 5, 300, 1234).unwrap();
        println!("calibrated delta {delta:.3} acc {acc:.3} in {:.1}s", t.elapsed().as_secs_f64());
    } else if which == "c5" {
        // bench profile: 1 block/stage
        let delta: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(1.5);
        let steps: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(3000);
        let w3: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(48);
        let spec = SynthSpec { seed: 100, deviation: delta, ..Default::default() };
        let ds = generate_in_memory(&spec);
        let (train_v, test_v) = hybrid_split(&ds, 3).unwrap();
        for (label, dense, proto) in [("dense+pro", true, ProtoMode::Nodes), ("dense", true, ProtoMode::None), ("non-dense", false, ProtoMode::None)] {
            let config = ModelConfig {
                embedding: EmbeddingConfig { input_size: 32, stem_filters: 4, block_widths: vec![4, 8, w3], basic_blocks_per_stage: 1, residual: true },
                graph: GraphConfig { dense, proto_mode: proto, ..GraphConfig::preset(3, 5) },
                learning_rate: 0.001,
                seed: 11,
            };
            let mut model = Model::new(config).unwrap();
            let t = Instant::now();
            let mut opts = TrainOptions::new(steps, 21);
            opts.log_every = Some(500);
            let tr = train(&mut model, &train_v, &opts).unwrap();
            let train_t = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let ev = evaluate(&model, &test_v, 300, 77, 1).unwrap();
            println!("{label}: acc {:.3} (train {:.0}s, eval {:.0}s, final train losses {:.3})", ev.mean_accuracy, train_t, t.elapsed().as_secs_f64(), tr.records[steps-100..].iter().map(|r| r.loss).sum::<f64>()/100.0);
        }
    }
}
