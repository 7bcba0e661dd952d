use tvlab::linalg::*;
use tvlab::model::*;
use tvlab::tasks::*;
use tvlab::tvx::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let params = init_parameters(&ModelConfig {
        n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16,
        vocab_size: 48, max_seq_len: 48, rng_seed: 14,
    }).unwrap();
    let mut r = ChaCha20Rng::seed_from_u64(114);
    let task = sample_classification_task(&mut r, 2, 4, 48).unwrap();
    let demos = sample_demonstrations(&task, 4, &mut r).unwrap();
    let batch = build_extraction_batch(&params, &demos, task.queries()).unwrap();
    let energy = { let f = batch.y.frobenius_norm(); f*f / batch.y.cols() as f64 };
    println!("shift energy (zero-map loss): {energy:.6}");
    println!("|H| = {:.4}  |Y| = {:.4}", batch.h.frobenius_norm(), batch.y.frobenius_norm());
    for epochs in [1usize, 5, 20, 100] {
        let m = tvlab::tvx::train_mlp_map(&params, &demos, task.queries(), epochs, 1e-3, 2, 0.1,
            &mut ChaCha20Rng::seed_from_u64(15)).unwrap();
        if let TaskVectorMethod::MlpMap(m) = m {
            println!("epochs {epochs:>3}: final_loss = {:.6}", m.meta.final_loss.unwrap());
        }
    }
}
