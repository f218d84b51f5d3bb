//! Trains one model and reports how much CAM mass falls inside the
//! vein/contour masks before and after training.

use maskguide::config::RunConfig;
use maskguide::model::cam::{cam, mass_inside};
use maskguide::model::train::Trainer;
use maskguide::synth::{generate, Split};

fn main() -> maskguide::Result<()> {
    let mut c = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap();
        c.set(k, v)?;
    }
    let c = c.resolve()?;
    let samples = generate(&c.synth)?;
    let (train, test): (Vec<_>, Vec<_>) =
        samples.into_iter().partition(|s| s.split == Split::Train);
    let held: Vec<_> = test.iter().take(20).collect();
    let area: f64 = held
        .iter()
        .map(|s| s.region_mask().count() as f64 / s.vein.bits().len() as f64)
        .sum::<f64>()
        / 20.0;
    println!("mask area fraction {area:.3}");
    let mut t = Trainer::new(c.backbone.clone(), c.train.clone())?;
    let report = |label: &str, t: &Trainer| -> maskguide::Result<()> {
        let mut hits = 0;
        let mut masses = Vec::new();
        for s in &held {
            let heat = cam(&t.model, t.config.blend, &s.image.to_tensor(), s.class_id)?;
            let m = mass_inside(&heat, &s.region_mask());
            masses.push(m);
            if m > 0.5 {
                hits += 1;
            }
        }
        let mean = masses.iter().sum::<f64>() / masses.len() as f64;
        println!("{label}: {hits}/20 above half, mean mass {mean:.3}");
        Ok(())
    };
    report("untrained", &t)?;
    t.train(&train)?;
    report("trained", &t)?;
    Ok(())
}
