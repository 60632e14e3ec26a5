use hammer::model::{ModelConfig, ModelState};
use hammer::synth::{generate_dataset, DatasetConfig, WorldSpec};
use hammer::train::{fit, FitEvent, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let count: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);

    let spec = WorldSpec::default();
    let ds = generate_dataset(&spec, &DatasetConfig { count, seed: 1, ..DatasetConfig::default() }).unwrap();
    let mcfg = ModelConfig { vocab_size: spec.vocab().len(), ..ModelConfig::default() };
    let mut state = ModelState::init(mcfg);
    let tcfg = TrainConfig { steps, eval_every: 100, ..TrainConfig::default() };

    let t0 = Instant::now();
    fit(&mut state, &ds, &tcfg, |ev| {
        match ev {
            FitEvent::Step { step, breakdown, .. } => {
                if step % 50 == 0 {
                    let terms: Vec<String> = breakdown.terms.iter().map(|(t, v)| format!("{} {:.3}", t.name(), v)).collect();
                    println!("step {step}: total {:.4} [{}] ({:?})", breakdown.total, terms.join(", "), t0.elapsed());
                }
            }
            FitEvent::Validation { step, report, .. } => {
                let h = report.headline();
                println!("  VAL step {step}: AUC {:.4} EER {:.4} ACC {:.4} mAP {:.4} CF1 {:.4} OF1 {:.4} IoUm {:.4} IoU50 {:.4} IoU75 {:.4} P {:.4} R {:.4} F1 {:.4}",
                    h[0].1, h[1].1, h[2].1, h[3].1, h[4].1, h[5].1, h[6].1, h[7].1, h[8].1, h[9].1, h[10].1, h[11].1);
            }
        }
        Ok(())
    }).unwrap();
    println!("done in {:?}", t0.elapsed());

    let test = ds.split(hammer::types::Split::Test);
    let report = hammer::train::evaluate(&state, &test).unwrap();
    println!("TEST:\n{}", report.table());
}
