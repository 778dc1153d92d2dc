//! Shared input builders for the benchmark targets.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use istar_core::{IstaProblem, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("valid shape")
}

pub fn random_problem(m: usize, n: usize, seed: u64) -> IstaProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0));
    let y = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
    IstaProblem::new(d, y, 0.05).expect("valid problem")
}
