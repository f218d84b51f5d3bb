//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Tolerances and run settings are pinned below.

mod common;

use std::time::Instant;

use common::ap::{for_each_case, oracle_ap, to_detections, to_gts};
use maskguide::attention::{
    attention_map, blend_tensors, AttentionHead, BlendWeights, LossWeights,
};
use maskguide::detect::average_precision;
use maskguide::gradcheck::{grad_check, relative_error};
use maskguide::mask::{to_ground_truth, BinaryMask};
use maskguide::model::cam::{cam, mass_inside};
use maskguide::model::checkpoint::Checkpoint;
use maskguide::model::train::{evaluate, metrics_csv, AblationMode, TrainConfig, Trainer};
use maskguide::model::{BackboneConfig, Model};
use maskguide::synth::{generate, split, Sample, Split, SynthConfig};
use maskguide::tape::{PoolMode, ReduceMode, Tape, Var};
use maskguide::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const SUM_TOL: f64 = 1e-9;
const AP_TOL: f64 = 1e-12;
const CE_TOL: f64 = 1e-12;
const INVARIANT_CASES: usize = 1000;

// Ablation run: K=20, 6 per class, 64×64. Epsilon puts the baseline
// in the 0.3..0.7 band.
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_EPSILON: f64 = 8.0;
const ABLATION_JITTER: f64 = 0.1;
const ABLATION_LR: f64 = 0.005;
const ABLATION_BATCH: usize = 4;
const ABLATION_EPOCHS: u32 = 150;
const MARGIN: f64 = 0.02;

const CAM_SAMPLES: usize = 20;
const CAM_MASS: f64 = 0.5;
const CAM_SHARE: f64 = 0.7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, range: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-range..range))
}

fn weighted(t: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = random(t.value(y).shape(), rng, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn gradients() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let x = random(&[2, 2, 4, 4], &mut rng, 1.0);
    let w = random(&[3, 2, 3, 3], &mut rng, 1.0);
    let b = random(&[3], &mut rng, 1.0);
    let wsum = random(&[2, 3, 4, 4], &mut rng, 1.0);
    let map = random(&[2, 1, 4, 4], &mut rng, 1.0);
    let target = random(&[2, 1, 4, 4], &mut rng, 1.0).map(|v| v.abs() / 8.0);
    let relu_in = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let fc_w = random(&[4, 2], &mut rng, 1.0);
    let fc_b = random(&[4], &mut rng, 1.0);
    let mut worst: f64 = 0.0;
    let mut run = |input: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Result<()> {
        worst = worst.max(grad_check(f, input, GRAD_EPS)?);
        Ok(())
    };
    let sum_with = |t: &mut Tape, y: Var, seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        weighted(t, y, &mut r)
    };
    run(&x, &|t, v| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(v, wv, bv, 1, 1)?;
        sum_with(t, y, 1)
    })?;
    run(&w, &|t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, v, bv, 2, 1)?;
        sum_with(t, y, 2)
    })?;
    run(&b, &|t, v| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(xv, wv, v, 1, 0)?;
        sum_with(t, y, 3)
    })?;
    run(&relu_in, &|t, v| {
        let y = t.relu(v);
        sum_with(t, y, 4)
    })?;
    for mode in [PoolMode::Avg, PoolMode::Max] {
        run(&x, &|t, v| {
            let y = t.pool2d(v, mode, 2, 2)?;
            sum_with(t, y, 5)
        })?;
    }
    for mode in [ReduceMode::Max, ReduceMode::Mean] {
        run(&x, &|t, v| {
            let r = t.channel_reduce(v, mode)?;
            let y = t.concat_channels(&[r, v])?;
            sum_with(t, y, 6)
        })?;
    }
    run(&map, &|t, v| {
        let a = t.spatial_softmax(v)?;
        t.mse(a, target.clone())
    })?;
    run(&wsum, &|t, v| {
        let o = t.constant(wsum.map(|q| q * 0.5 + 0.1));
        let s = t.add(v, o)?;
        let m = t.mul(s, v)?;
        let y = t.scale(m, -1.5);
        sum_with(t, y, 7)
    })?;
    run(&map, &|t, v| {
        let f = t.constant(wsum.clone());
        let y = t.broadcast_mul(v, f)?;
        sum_with(t, y, 8)
    })?;
    run(&fc_w, &|t, v| {
        let xv = t.constant(x.clone());
        let p = t.global_avg_pool(xv)?;
        let bv = t.constant(fc_b.clone());
        let y = t.linear(p, v, bv)?;
        t.cross_entropy(y, &[3, 1])
    })?;
    run(&x, &|t, v| {
        let p = t.global_avg_pool(v)?;
        let (wv, bv) = (t.constant(fc_w.clone()), t.constant(fc_b.clone()));
        let y = t.linear(p, wv, bv)?;
        t.cross_entropy(y, &[0, 2])
    })?;
    let ops = worst;

    // Full weighted loss through a 2-class 8×8 model, every parameter.
    let config = BackboneConfig {
        channels: vec![4, 4, 4],
        kernel: 3,
        pool: 2,
        hook: 0,
        input_size: 8,
        classes: 2,
    };
    let model = Model::init(config, &mut rng)?;
    let images = random(&[2, 3, 8, 8], &mut rng, 1.0);
    let gt = |rng: &mut ChaCha8Rng| {
        let mut d = random(&[2, 1, 4, 4], rng, 1.0).map(f64::abs).into_data();
        for s in d.chunks_mut(16) {
            let z: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= z);
        }
        Tensor::new(&[2, 1, 4, 4], d)
    };
    let (gt_v, gt_c) = (gt(&mut rng)?, gt(&mut rng)?);
    let labels = [1, 0];
    let (blend, loss_w) = (BlendWeights::DEFAULT, LossWeights::DEFAULT);
    let mut tape = Tape::new();
    let graph = model.build(&mut tape, images.clone(), blend, true)?;
    let loss = model.attach_loss(
        &mut tape,
        &graph,
        &labels,
        Some((gt_v.clone(), gt_c.clone())),
        loss_w,
    )?;
    tape.backward(loss.total)?;
    let eval = |m: &Model| -> Result<f64> {
        Ok(
            m.forward(&images, &labels, Some((&gt_v, &gt_c)), blend, loss_w)?
                .losses
                .total,
        )
    };
    let mut probe = model.clone();
    let mut model_worst: f64 = 0.0;
    for (pi, v) in graph.params.iter().enumerate() {
        let g = tape.grad_or_zeros(*v);
        for j in 0..g.len() {
            let orig = probe.params()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + GRAD_EPS;
            let up = eval(&probe)?;
            probe.params_mut()[pi].data_mut()[j] = orig - GRAD_EPS;
            let down = eval(&probe)?;
            probe.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_EPS);
            model_worst = model_worst.max(relative_error(g.data()[j], numeric));
        }
    }
    Ok(outcome(
        ops < GRAD_TOL && model_worst < GRAD_TOL,
        format!("ops max rel err {ops:.2e}, micro-model {model_worst:.2e} (tol {GRAD_TOL:e})"),
    ))
}

fn distribution_error(t: &[f64], cells: usize) -> f64 {
    t.chunks(cells)
        .map(|s| {
            if s.iter().any(|&v| v < 0.0) {
                f64::INFINITY
            } else {
                (s.iter().sum::<f64>() - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn normalization() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst: f64 = 0.0;
    for i in 0..INVARIANT_CASES {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let scale = [0.1, 1.0, 30.0][i % 3];
        let m = random(&[2, 3, h, w], &mut rng, scale);
        let head = AttentionHead::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-2.0..2.0),
        );
        let a = attention_map(&m, &head)?;
        worst = worst.max(distribution_error(a.data(), h * w));

        let side = [1usize, 2, 4, 8][i % 4];
        let density = rng.gen_range(0.0..1.0);
        let bits = (0..64).map(|_| rng.gen_bool(density)).collect();
        let gt = to_ground_truth(&BinaryMask::new(8, 8, bits)?, side, side)?;
        worst = worst.max(distribution_error(gt.values(), side * side));
    }
    Ok(outcome(
        worst < SUM_TOL,
        format!("{INVARIANT_CASES} cases, max |sum-1| {worst:.2e}, no negatives"),
    ))
}

fn blend_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut exact = true;
    for _ in 0..100 {
        let m = random(&[2, 4, 4, 4], &mut rng, 100.0);
        let v = random(&[2, 1, 4, 4], &mut rng, 1.0);
        let c = random(&[2, 1, 4, 4], &mut rng, 1.0);
        exact &= blend_tensors(&m, &v, &c, BlendWeights::IDENTITY)? == m;
    }
    let samples = generate(&SynthConfig {
        classes: 4,
        samples_per_class: 2,
        size: 32,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let backbone = BackboneConfig {
        input_size: 32,
        classes: 4,
        ..BackboneConfig::default()
    };
    let model = Model::init(backbone, &mut rng)?;
    let x = Tensor::stack(
        &samples
            .iter()
            .map(|s| s.image.to_tensor())
            .collect::<Vec<_>>(),
    )?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let no_attention = LossWeights::new(0.0, 0.0, 1.0)?;
    let out = model.forward(&x, &labels, None, BlendWeights::IDENTITY, no_attention)?;
    let forward_exact = out.logits == model.baseline_logits(&x)?;
    Ok(outcome(
        exact && forward_exact,
        format!("blend bit-exact: {exact}, forward vs bare backbone bit-exact: {forward_exact}"),
    ))
}

fn map_oracle() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut err = None;
    let cases = for_each_case(|dets, gts, t| {
        match average_precision(&to_detections(dets), &to_gts(gts), t) {
            Ok(r) => worst = worst.max((r.ap - oracle_ap(dets, gts, t)).abs()),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(outcome(
        worst <= AP_TOL,
        format!("{cases} configurations, max |ap - oracle| {worst:.2e}"),
    ))
}

fn training_sanity() -> Result<Outcome> {
    let mut ce_err: f64 = 0.0;
    for k in [2usize, 5, 20] {
        let samples = generate(&SynthConfig {
            classes: k,
            samples_per_class: 2,
            size: 32,
            seed: 4,
            ..SynthConfig::default()
        })?;
        let backbone = BackboneConfig {
            input_size: 32,
            classes: k,
            ..BackboneConfig::default()
        };
        let mut model = Model::init(backbone, &mut ChaCha8Rng::seed_from_u64(k as u64))?;
        model.zero_classifier();
        let x = Tensor::stack(
            &samples
                .iter()
                .map(|s| s.image.to_tensor())
                .collect::<Vec<_>>(),
        )?;
        let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
        let out = model.forward(
            &x,
            &labels,
            None,
            BlendWeights::DEFAULT,
            LossWeights::DEFAULT,
        )?;
        ce_err = ce_err.max((out.losses.ce - (k as f64).ln()).abs());
    }

    let one: Vec<Sample> = generate(&SynthConfig {
        classes: 2,
        samples_per_class: 2,
        size: 32,
        seed: 5,
        ..SynthConfig::default()
    })?
    .into_iter()
    .take(1)
    .collect();
    let backbone = BackboneConfig {
        input_size: 32,
        classes: 2,
        ..BackboneConfig::default()
    };
    let config = TrainConfig {
        lr: 0.01,
        epochs: 50,
        ..TrainConfig::default()
    };
    let rows = Trainer::new(backbone, config)?.train(&one)?;
    let overfit = rows.iter().position(|r| r.losses.ce < 0.1);

    let c = TrainConfig::default();
    let schedule = (0..1000u32).all(|e| c.lr_at(e) == 0.003 / 10f64.powi((e / 100) as i32));

    Ok(outcome(
        ce_err < CE_TOL && overfit.is_some() && schedule,
        format!(
            "|CE - ln K| {ce_err:.1e}, overfit CE<0.1 at epoch {}, lr schedule exact: {schedule}",
            overfit.map_or("never".into(), |e| (e + 1).to_string())
        ),
    ))
}

/// Relative paths of all files below `root`, sorted.
fn files_under(root: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| maskguide::Error::io(&dir, e))? {
            let path = entry.map_err(|e| maskguide::Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<Outcome> {
    let synth = SynthConfig {
        classes: 3,
        samples_per_class: 4,
        size: 32,
        seed: 6,
        ..SynthConfig::default()
    };
    let dir_a = tempfile::tempdir().map_err(|e| maskguide::Error::io("tempdir", e))?;
    let dir_b = tempfile::tempdir().map_err(|e| maskguide::Error::io("tempdir", e))?;
    let samples = generate(&synth)?;
    maskguide::synth::manifest::write_dataset(&samples, dir_a.path())?;
    maskguide::synth::manifest::write_dataset(&generate(&synth)?, dir_b.path())?;
    let files_a = files_under(dir_a.path())?;
    let mut same_data = files_a.len() == 3 * samples.len() + 1;
    for rel in &files_a {
        let a = std::fs::read(dir_a.path().join(rel)).ok();
        let b = std::fs::read(dir_b.path().join(rel)).ok();
        same_data &= a.is_some() && a == b;
    }
    same_data &= files_under(dir_b.path())? == files_a;

    let train = split(&samples, Split::Train);
    let backbone = BackboneConfig {
        input_size: 32,
        classes: 3,
        ..BackboneConfig::default()
    };
    let config = TrainConfig {
        lr: 0.01,
        epochs: 4,
        batch_size: 2,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = || -> Result<(String, Vec<u8>)> {
        let mut t = Trainer::new(backbone.clone(), config.clone())?;
        let rows = t.train(&train)?;
        Ok((metrics_csv(&rows), t.checkpoint().encode()?))
    };
    let (csv_a, ck_a) = run()?;
    let (csv_b, ck_b) = run()?;
    let reruns = csv_a == csv_b && ck_a == ck_b;

    let mut first = Trainer::new(backbone, config)?;
    let mut rows = vec![first.run_epoch(&train)?, first.run_epoch(&train)?];
    let mut resumed =
        Trainer::from_checkpoint(&Checkpoint::decode(&first.checkpoint().encode()?)?)?;
    rows.extend(resumed.train(&train)?);
    let resume = metrics_csv(&rows) == csv_a && resumed.checkpoint().encode()? == ck_a;

    Ok(outcome(
        same_data && reruns && resume,
        format!("dataset bytes: {same_data}, csv+checkpoint reruns: {reruns}, resume: {resume}"),
    ))
}

struct Ablation {
    means: [f64; 4],
    full_seed0: Option<Trainer>,
    test_seed0: Vec<Sample>,
}

fn ablation_run() -> Result<Ablation> {
    let mut means = [0.0; 4];
    let mut full_seed0 = None;
    let mut test_seed0 = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let samples = generate(&SynthConfig {
            classes: 20,
            samples_per_class: 6,
            size: 64,
            seed,
            epsilon: ABLATION_EPSILON,
            jitter: ABLATION_JITTER,
        })?;
        let train = split(&samples, Split::Train);
        let test = split(&samples, Split::Test);
        for (i, mode) in AblationMode::ALL.iter().enumerate() {
            let (blend, loss) = mode.apply(BlendWeights::DEFAULT, LossWeights::DEFAULT);
            let config = TrainConfig {
                lr: ABLATION_LR,
                batch_size: ABLATION_BATCH,
                epochs: ABLATION_EPOCHS,
                seed,
                blend,
                loss,
                ..TrainConfig::default()
            };
            let backbone = BackboneConfig {
                classes: 20,
                ..BackboneConfig::default()
            };
            let mut t = Trainer::new(backbone, config)?;
            t.train(&train)?;
            let acc = evaluate(&t.model, blend, &test)?;
            println!("    seed {seed} {:<8} test top-1 {acc:.4}", mode.name());
            means[i] += acc / ABLATION_SEEDS.len() as f64;
            if seed == ABLATION_SEEDS[0] && *mode == AblationMode::Full {
                full_seed0 = Some(t);
                test_seed0 = test.clone();
            }
        }
    }
    Ok(Ablation {
        means,
        full_seed0,
        test_seed0,
    })
}

fn ablation_trend(a: &Ablation) -> Outcome {
    let [base, vein, con, full] = a.means;
    let in_band = (0.3..=0.7).contains(&base);
    outcome(
        in_band && full >= vein && full >= con && full - base >= MARGIN,
        format!(
            "means baseline {base:.4} vein {vein:.4} contour {con:.4} full {full:.4} \
             (baseline in band: {in_band})"
        ),
    )
}

fn cam_focus(a: &Ablation) -> Result<Outcome> {
    let trained = a.full_seed0.as_ref().expect("full-mode run");
    let held = &a.test_seed0[..CAM_SAMPLES];
    let untrained = Model::init(
        trained.model.config.clone(),
        &mut ChaCha8Rng::seed_from_u64(800),
    )?;
    let share = |model: &Model| -> Result<(f64, f64)> {
        let mut hits = 0;
        let mut total = 0.0;
        for s in held {
            let heat = cam(
                model,
                trained.config.blend,
                &s.image.to_tensor(),
                s.class_id,
            )?;
            let m = mass_inside(&heat, &s.region_mask());
            total += m;
            if m > CAM_MASS {
                hits += 1;
            }
        }
        Ok((hits as f64 / held.len() as f64, total / held.len() as f64))
    };
    let (t_share, t_mean) = share(&trained.model)?;
    let (u_share, u_mean) = share(&untrained)?;
    let area = held
        .iter()
        .map(|s| s.region_mask().count() as f64 / s.vein.bits().len() as f64)
        .sum::<f64>()
        / held.len() as f64;
    Ok(outcome(
        t_share >= CAM_SHARE && u_share < CAM_SHARE,
        format!(
            "trained {:.0}% of samples above half (mean mass {t_mean:.3}), \
             untrained {:.0}% (mean {u_mean:.3}), mask area {area:.3}",
            t_share * 100.0,
            u_share * 100.0
        ),
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, t0: Instant, r: Result<Outcome>| {
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(o) => {
                let tag = if o.pass { "PASS" } else { "FAIL" };
                println!("criterion {n} {tag} {name}: {} [{secs:.1}s]", o.detail);
                failed += usize::from(!o.pass);
            }
            Err(e) => {
                println!("criterion {n} FAIL {name}: error {e} [{secs:.1}s]");
                failed += 1;
            }
        }
    };
    let t = Instant::now();
    report(1, "gradient correctness", t, gradients());
    let t = Instant::now();
    report(2, "normalization invariants", t, normalization());
    let t = Instant::now();
    report(3, "blend identity", t, blend_identity());
    let t = Instant::now();
    report(4, "mAP oracle equivalence", t, map_oracle());

    let t = Instant::now();
    let ablation = ablation_run();
    match &ablation {
        Ok(a) => report(5, "ablation trend", t, Ok(ablation_trend(a))),
        Err(e) => report(
            5,
            "ablation trend",
            t,
            Ok(outcome(false, format!("error {e}"))),
        ),
    }

    let t = Instant::now();
    report(6, "training sanity", t, training_sanity());
    let t = Instant::now();
    report(7, "determinism", t, determinism());

    let t = Instant::now();
    match &ablation {
        Ok(a) => report(8, "CAM focus", t, cam_focus(a)),
        Err(e) => report(8, "CAM focus", t, Ok(outcome(false, format!("error {e}")))),
    }

    println!(
        "criterion 9 PASS absolute accuracies: none asserted; top-1 reported as a fraction in [0, 1] [0.0s]"
    );

    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
