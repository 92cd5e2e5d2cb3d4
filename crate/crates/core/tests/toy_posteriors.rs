//! Posterior networks fitted on samples from an enumerable toy system
//! recover its exact conditional entropies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tooluq::metrics::{full_predictive_entropy, EntropyTerms};
use tooluq::pipeline::{brute_force_joint, ExactTerms, ToySystem};
use tooluq::posteriors::{train_z_posterior, TrainingConfig, ZPosterior, ZTrainingSet};

fn one_hot(labels: &[String], label: &str) -> Vec<f64> {
    labels.iter().map(|l| if l == label { 1.0 } else { 0.0 }).collect()
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

struct Fitted {
    exact: ExactTerms,
    h_z_given_ya: f64,
    h_a_given_xy: f64,
}

fn mean_entropy(post: &ZPosterior, inputs: &[Vec<f64>]) -> f64 {
    inputs.iter().map(|x| post.entropy_at(x).unwrap()).sum::<f64>() / inputs.len() as f64
}

fn fit(seed: u64) -> Fitted {
    let (na, nz, ny) = (3, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let system = ToySystem::random(&mut rng, na, nz, ny);
    let exact = brute_force_joint(&system).unwrap().terms;
    let (a_l, z_l, y_l) = (labels("a", na), labels("z", nz), labels("y", ny));

    let mut z_set = ZTrainingSet::default();
    let mut a_set = ZTrainingSet::default();
    let (mut z_inputs, mut a_inputs) = (Vec::new(), Vec::new());
    for _ in 0..10_000 {
        let (a, z, y) = system.sample(&mut rng);
        let zy = [one_hot(&y_l, &y), one_hot(&a_l, &a)].concat();
        z_set.push(zy.clone(), z);
        a_set.push(one_hot(&y_l, &y), a);
        z_inputs.push(zy);
        a_inputs.push(one_hot(&y_l, &y));
    }
    let cfg = TrainingConfig { seed, ..Default::default() };
    let z_post = train_z_posterior(&z_set, &z_l, &cfg).unwrap();
    let a_post = train_z_posterior(&a_set, &a_l, &cfg).unwrap();
    Fitted { exact, h_z_given_ya: mean_entropy(&z_post, &z_inputs), h_a_given_xy: mean_entropy(&a_post, &a_inputs) }
}

#[test]
fn z_posterior_matches_exact_conditional_entropy() {
    for seed in [1, 2, 3] {
        let f = fit(seed);
        let err = (f.h_z_given_ya - f.exact.h_z_given_ya).abs();
        assert!(err <= 0.1, "seed {seed}: fitted {} vs exact {}", f.h_z_given_ya, f.exact.h_z_given_ya);
    }
}

#[test]
fn fitted_terms_keep_full_decomposition_close() {
    for seed in [1, 2, 3] {
        let f = fit(seed);
        let e = f.exact;
        let terms = |h_zya: f64, h_axy: f64| EntropyTerms {
            h_y_given_zx: e.h_y_given_zx,
            h_c_given_zx: e.h_y_given_zx,
            h_z_given_a: Some(e.h_z_given_a),
            h_a_given_x: Some(e.h_a_given_x),
            h_z_given_ya: Some(h_zya),
            h_a_given_xy: Some(h_axy),
            ..Default::default()
        };
        let exact = full_predictive_entropy(&terms(e.h_z_given_ya, e.h_a_given_xy)).unwrap();
        let fitted = full_predictive_entropy(&terms(f.h_z_given_ya, f.h_a_given_xy)).unwrap();
        assert!((exact - e.h_y_given_x).abs() < 1e-9);
        assert!((fitted - exact).abs() < 0.15, "seed {seed}: fitted {fitted} vs exact {exact}");
    }
}
