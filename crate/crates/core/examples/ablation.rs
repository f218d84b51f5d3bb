//! Runs every ablation mode over a few seeds and prints test accuracy.
//! Usage: cargo run --release --example ablation -- [key=value ...]

use std::time::Instant;

use maskguide::config::RunConfig;
use maskguide::model::train::{evaluate, AblationMode, Trainer};
use maskguide::synth::{generate, Split};

fn main() -> maskguide::Result<()> {
    let mut base = RunConfig::default();
    let mut seeds = vec![0u64, 1, 2];
    let mut modes: Vec<AblationMode> = vec![
        AblationMode::Baseline,
        AblationMode::Vein,
        AblationMode::Contour,
        AblationMode::Full,
    ];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        if k == "modes" {
            modes = v.split(',').map(|m| m.parse().unwrap()).collect();
        } else if k == "seeds" {
            seeds = v.split(',').map(|s| s.parse().unwrap()).collect();
        } else {
            base.set(k, v)?;
        }
    }
    let mut means = vec![0.0; modes.len()];
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.set("seed", &seed.to_string())?;
        let samples = generate(&cfg.synth)?;
        let (train, test): (Vec<_>, Vec<_>) =
            samples.into_iter().partition(|s| s.split == Split::Train);
        for (i, mode) in modes.iter().enumerate() {
            let mut c = cfg.clone();
            c.set("mode", mode.name())?;
            let c = c.resolve()?;
            let t0 = Instant::now();
            let mut trainer = Trainer::new(c.backbone.clone(), c.train.clone())?;
            let rows = trainer.train(&train)?;
            let acc = evaluate(&trainer.model, c.train.blend, &test)?;
            let last = rows.last().unwrap();
            println!(
                "seed={seed} mode={:<8} test={acc:.4} train={:.3} loss={:.4} {:.1}s",
                mode.name(),
                last.train_acc,
                last.losses.total,
                t0.elapsed().as_secs_f64()
            );
            means[i] += acc / seeds.len() as f64;
        }
    }
    for (m, a) in modes.iter().zip(means) {
        println!("mean {:<8} {a:.4}", m.name());
    }
    Ok(())
}
