#![allow(dead_code)]

use dp_adam_ac::data::Sample;
use dp_adam_ac::models::{Head, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

pub fn gradcheck_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::LogisticRegression { dim: 6 },
        ModelSpec::Mlp2 { dim: 5, hidden: 7, head: Head::Logistic },
        ModelSpec::Mlp2 { dim: 5, hidden: 7, head: Head::Squared },
        ModelSpec::CharMlpLm { vocab: 9, window: 4, embed: 3, hidden: 6 },
    ]
}

pub fn random_batch(model: &ModelSpec, n: usize, rng: &mut ChaCha20Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| match *model {
            ModelSpec::LogisticRegression { dim } | ModelSpec::Mlp2 { dim, head: Head::Logistic, .. } => Sample::Vector {
                x: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
                y: f64::from(u8::from(rng.random::<bool>())),
            },
            ModelSpec::Mlp2 { dim, .. } => Sample::Vector {
                x: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
                y: rng.sample(StandardNormal),
            },
            ModelSpec::CharMlpLm { vocab, window, .. } => Sample::Tokens {
                context: (0..window).map(|_| rng.random_range(0..vocab as u16)).collect(),
                next: rng.random_range(0..vocab as u16),
            },
        })
        .collect()
}

/// Worst per-coordinate discrepancy between the analytic gradient and a
/// central difference, relative to `max(|analytic|, |numeric|, FD_FLOOR)`,
/// over `points` random parameter vectors.
pub fn max_gradcheck_error(model: &ModelSpec, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p = model.param_count();
    let mut worst = 0.0f64;
    for _ in 0..points {
        let samples = random_batch(model, 5, &mut rng);
        let batch: Vec<&Sample> = samples.iter().collect();
        let mut theta: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let mut grad = vec![0.0; p];
        model.loss_and_grad(&theta, &batch, &mut grad).unwrap();
        for k in 0..p {
            let orig = theta[k];
            theta[k] = orig + FD_STEP;
            let up = model.loss(&theta, &batch).unwrap();
            theta[k] = orig - FD_STEP;
            let down = model.loss(&theta, &batch).unwrap();
            theta[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let scale = grad[k].abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((grad[k] - numeric).abs() / scale);
        }
    }
    worst
}
