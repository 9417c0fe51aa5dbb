//! Trains the full head stack and the plain baseline on one synthetic
//! dataset and prints their test metrics.
//!
//! `cargo run --release -p ocn-core --example ablation -- [steps] [seed]`

use ocn_core::eval::EvalConfig;
use ocn_core::model::{train_and_evaluate, Ablation, ModelConfig, TrainConfig};
use ocn_core::priors::DEFAULT_BETA;
use ocn_core::synth::{gen_dataset, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = SynthConfig { seed, ..SynthConfig::default() };
    for kv in args.iter().skip(3) {
        let parsed = SynthConfig::parse(&format!("{}\n{kv}", cfg.to_text())).expect("key=value override");
        cfg = parsed;
    }
    let ds = gen_dataset(&cfg).expect("valid config");
    for (name, ablation) in [("full", Ablation::default()), ("baseline", Ablation::baseline())] {
        let model_cfg = ModelConfig { ablation, ..ModelConfig::new(cfg.num_verbs, cfg.num_objects, cfg.dim, cfg.embed_dim) };
        let train_cfg = TrainConfig { steps, seed, ..TrainConfig::default() };
        let start = std::time::Instant::now();
        let run = train_and_evaluate(&ds, model_cfg, &train_cfg, DEFAULT_BETA, true, &EvalConfig::default(), |_, _| {}).expect("training");
        let r = &run.report;
        println!(
            "{name:<9} full {:.2} rare {:.2} ({}) nonrare {:.2} ({}) mR {:.2} loss {:.4} ({:.1}s)",
            r.map_full,
            r.map_rare.unwrap_or(f64::NAN),
            r.n_rare,
            r.map_nonrare.unwrap_or(f64::NAN),
            r.n_nonrare,
            r.mr_at_k,
            run.final_loss.total,
            start.elapsed().as_secs_f64()
        );
    }
}
