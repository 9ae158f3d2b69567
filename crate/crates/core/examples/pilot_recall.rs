//! Scratch pilot for the cross-segment recall experiment.
//!
//! Usage: pilot_recall <variant> <steps> [eta] [hot_lr] [seed] [k] [pairs]

use ttt_lab::model::{Model, ModelConfig, Variant};
use ttt_lab::seeded_rng;
use ttt_lab::tasks::{Task, TaskSpec};
use ttt_lab::train::{single_stage, toy_groups, train_toy, TrainSettings};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = Variant::parse(args.get(1).map(String::as_str).unwrap_or("ttt-mlp")).unwrap();
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let eta: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(variant.default_eta());
    let hot_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let k: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_pairs: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(12);

    let d = 32;
    let t = 64;
    let n_values = 4;

    let mut cfg = ModelConfig::new(variant, d, k);
    cfg.n_layers = 2;
    cfg.b = 16;
    cfg.eta = eta;
    let spec = TaskSpec::recall(t, d, n_pairs, n_values, 8, vec![24, 16, 24], 1234 + seed);
    let task = Task::new(spec).unwrap();

    let mut rng = seeded_rng(seed);
    let mut model = Model::init(cfg, &mut rng).unwrap();
    let schedule = single_stage(t, steps, toy_groups(&cfg, hot_lr, 1e-3));
    let settings = TrainSettings { batch_size: 8, eval_interval: 100, eval_instances: 16 };

    let start = std::time::Instant::now();
    let report = train_toy(&mut model, &task, &schedule, &settings, seed).unwrap();
    for p in &report.points {
        println!("step {:4}  loss {:.5}  acc {:.3}", p.step, p.loss, p.accuracy);
    }
    println!(
        "variant={} eta={} k={k} pairs={n_pairs} steps={} final_acc={:.3} chance=0.25 elapsed={:.1}s",
        variant.name(),
        eta,
        steps,
        report.final_accuracy,
        start.elapsed().as_secs_f64()
    );
}
