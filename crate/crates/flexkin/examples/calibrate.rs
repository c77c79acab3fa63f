//! Scratch calibration driver: trains on a configurable slice of the desk
//! fixture and prints the view-count trend, perturbation trend, and timings.
//! Run: cargo run --example calibrate -p flexkin -- <n_train> <epochs>

use std::time::Instant;

use flexkin::commands::{perturb_study, standard_desk_spec};
use flexkin::dataset::{generate_dataset, read_dataset, SynthSpec};
use flexkin::train::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let channels: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lambda_q: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let disc_channels: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(16);

    let dir = tempfile::tempdir().unwrap();
    let train_path = dir.path().join("train.jsonl");
    let test_path = dir.path().join("test.jsonl");

    let t0 = Instant::now();
    let train_spec = SynthSpec { n_sequences: n_train, ..standard_desk_spec(true) };
    generate_dataset(&train_spec, &train_path).unwrap();
    let test_spec = SynthSpec { n_sequences: 40, ..standard_desk_spec(false) };
    generate_dataset(&test_spec, &test_path).unwrap();
    let clean_path = dir.path().join("clean.jsonl");
    let clean_spec = SynthSpec {
        noise: flexkin::synth::NoiseModel::noiseless(7),
        ..SynthSpec { n_sequences: 40, ..standard_desk_spec(false) }
    };
    generate_dataset(&clean_spec, &clean_path).unwrap();
    println!("datasets generated in {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let train_set = read_dataset(&train_path).unwrap();
    let test_set = read_dataset(&test_path).unwrap();
    println!("datasets loaded in {:.1}s", t0.elapsed().as_secs_f64());

    let mut config = TrainConfig { epochs, ..TrainConfig::default() };
    config.fusion.channels = channels;
    config.fusion.disc_channels = disc_channels;
    config.weights.lambda_q = lambda_q;
    println!("C={channels} H={} lambda_q={lambda_q} disc_c={disc_channels}", config.fusion.heads);
    let t0 = Instant::now();
    let (model, log) = train(&train_set, &config, |epoch, m| {
        let t1 = Instant::now();
        let views: Vec<usize> = (0..test_set.views()).collect();
        let rows = evaluate(m, &test_set, &views).unwrap();
        let k1 = evaluate(m, &test_set, &[0]).unwrap();
        println!(
            "  epoch {epoch}: K=4 mpjpe {:.1} mm | K=1 mpjpe {:.1} mm (eval {:.1}s)",
            rows.last().unwrap().mpjpe_mm,
            k1.last().unwrap().mpjpe_mm,
            t1.elapsed().as_secs_f64()
        );
        Ok(())
    })
    .unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!(
        "trained {} steps in {:.1}s ({:.2}s/step)",
        log.len(),
        train_time,
        train_time / log.len() as f64
    );
    let window = |lo: usize, hi: usize, f: &dyn Fn(&flexkin::train::StepLog) -> f64| -> f64 {
        let hi = hi.min(log.len());
        log[lo.min(hi)..hi].iter().map(f).sum::<f64>() / (hi - lo.min(hi)).max(1) as f64
    };
    let n = log.len();
    for (name, f) in [
        ("total", &(|s: &flexkin::train::StepLog| s.total) as &dyn Fn(&flexkin::train::StepLog) -> f64),
        ("position", &|s: &flexkin::train::StepLog| s.position),
        ("skeleton", &|s: &flexkin::train::StepLog| s.skeleton),
        ("adversarial", &|s: &flexkin::train::StepLog| s.adversarial),
        ("root_depth", &|s: &flexkin::train::StepLog| s.root_depth),
        ("d_loss", &|s: &flexkin::train::StepLog| s.d_loss),
    ] {
        println!(
            "  {name}: steps0-10 {:.4} | steps40-50 {:.4} | last10 {:.4}",
            window(0, 10, f),
            window(40, 50, f),
            window(n.saturating_sub(10), n, f)
        );
    }

    let t0 = Instant::now();
    for views in [vec![0usize], vec![0, 1], vec![0, 1, 2, 3]] {
        let rows = evaluate(&model, &test_set, &views).unwrap();
        let agg = rows.last().unwrap();
        println!(
            "K={}: mpjpe {:.2} mm, accel {:.3}, root_scale {:.3}, root_err {:.1} mm",
            views.len(),
            agg.mpjpe_mm,
            agg.accel_err,
            agg.root_scale,
            agg.root_err_mm
        );
    }
    println!("evals in {:.1}s", t0.elapsed().as_secs_f64());

    let clean_set = read_dataset(&clean_path).unwrap();
    for views in [vec![0usize], vec![0, 1, 2, 3]] {
        let rows = evaluate(&model, &clean_set, &views).unwrap();
        println!(
            "clean K={}: mpjpe {:.2} mm",
            views.len(),
            rows.last().unwrap().mpjpe_mm
        );
    }

    // error decomposition: swap in ground-truth root rotation / pose
    use flexkin::tape::Tape;
    use flexkin::train::motion_metrics;
    for views in [vec![0usize], vec![0, 1, 2, 3]] {
        let mut m_hybrid_rot = 0.0;
        let mut m_hybrid_q = 0.0;
        let mut m_plain = 0.0;
        for seq in &test_set.sequences {
            let obs = seq.observations.select_views(&views);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let out = model.forward(&mut tape, &binding, &obs, None);
            let decoded = model.decode_motion(&tape, &out, &views).unwrap().motion;
            m_plain += motion_metrics(&decoded, &seq.gt_positions, &seq.motion, &views).unwrap().0;
            // predicted pose, ground-truth root rotation
            let mut with_gt_rot = decoded.clone();
            for (nk, &k) in views.iter().enumerate() {
                for t in 0..decoded.frames() {
                    with_gt_rot.root.set_rot(t, nk, seq.motion.root.rot(t, k));
                }
            }
            m_hybrid_rot +=
                motion_metrics(&with_gt_rot, &seq.gt_positions, &seq.motion, &views).unwrap().0;
            // ground-truth pose and lengths, predicted root rotation
            let mut with_gt_q = decoded.clone();
            with_gt_q.rotations = seq.motion.rotations.clone();
            with_gt_q.lengths = seq.motion.lengths.clone();
            m_hybrid_q +=
                motion_metrics(&with_gt_q, &seq.gt_positions, &seq.motion, &views).unwrap().0;
        }
        let n = test_set.sequences.len() as f64;
        println!(
            "K={}: plain {:.1} | gt-rot {:.1} | gt-pose {:.1} mm",
            views.len(),
            m_plain / n,
            m_hybrid_rot / n,
            m_hybrid_q / n
        );
    }

    let t0 = Instant::now();
    let rows = perturb_study(&test_path, &[0.0, 0.03, 0.04], &dir.path().join("p.csv")).unwrap();
    for r in &rows {
        println!(
            "sigma {:>5}: baseline {:.2} mm, net {:.2} mm",
            r.sigma_frac, r.baseline_mpjpe_mm, r.flex_mpjpe_mm
        );
    }
    println!("perturb study in {:.1}s", t0.elapsed().as_secs_f64());
}
