use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tvlab::metrics::accuracy;
use tvlab::model::ModelConfig;
use tvlab::modes::{icl_predict, zero_shot_predict};
use tvlab::tasks::{sample_classification_task, sample_demonstrations};
use tvlab::trainer::{train_on_stream, TaskFamily, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let config = ModelConfig::small(42);
    let family = TaskFamily::classification();
    let train = TrainConfig {
        steps,
        batch_size: batch,
        learning_rate: lr,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        warmup_fraction: 0.05,
        rng_seed: 7,
        task_family: family,
    };

    let t0 = Instant::now();
    let outcome = train_on_stream(&config, &train).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let n = outcome.loss_curve.len();
    let head: f64 = outcome.loss_curve[..50.min(n)].iter().sum::<f64>() / 50.min(n) as f64;
    let tail: f64 = outcome.loss_curve[n.saturating_sub(50)..].iter().sum::<f64>() / 50.min(n) as f64;
    println!(
        "steps={steps} batch={batch} lr={lr}: {train_secs:.1}s ({:.1} steps/s), loss {head:.4} -> {tail:.4}",
        steps as f64 / train_secs
    );

    // Held-out evaluation: fresh tasks whose digests never appeared in training.
    let params = &outcome.params;
    let mut rng = ChaCha20Rng::seed_from_u64(999);
    let mut icl_accs = Vec::new();
    let mut zs_accs = Vec::new();
    for _ in 0..20 {
        let task = loop {
            let t = sample_classification_task(&mut rng, 4, 12, 64).unwrap();
            if outcome.task_digests.binary_search(&t.digest()).is_err() {
                break t;
            }
        };
        let demos = sample_demonstrations(&task, 30, &mut rng).unwrap();
        let mut icl_preds = Vec::new();
        let mut zs_preds = Vec::new();
        let mut truths = Vec::new();
        for &x in task.queries() {
            truths.push(task.label_of(x).unwrap());
            icl_preds.push(icl_predict(params, &demos, x, task.labels()).unwrap().label);
            zs_preds.push(zero_shot_predict(params, x, task.labels()).unwrap().label);
        }
        icl_accs.push(accuracy(&icl_preds, &truths).unwrap());
        zs_accs.push(accuracy(&zs_preds, &truths).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    println!(
        "ICL acc: {:.4} (sd {:.4});  zero-shot acc: {:.4} (sd {:.4});  gap: {:.4}",
        mean(&icl_accs),
        sd(&icl_accs),
        mean(&zs_accs),
        sd(&zs_accs),
        mean(&icl_accs) - mean(&zs_accs)
    );
    let _ = rng.gen_range(0..2);
}
