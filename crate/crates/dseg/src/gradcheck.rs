//! Central finite-difference gradient verification at f64.
//!
//! Independent of the tape: only the forward path of the function under test
//! is evaluated, twice per perturbed coordinate.

use crate::tensor::{Elem, Tensor};

/// Max relative error between analytic and finite-difference gradients of a
/// scalar-valued function w.r.t. one input tensor.
///
/// `f` must evaluate the scalar from the current data of `wrt` (and any
/// captured context) without consulting the tape. `analytic` is the gradient
/// produced by a backward sweep, in the same layout as `wrt`.
pub fn max_rel_error<F>(wrt: &Tensor<f64>, analytic: &[f64], mut f: F, h: f64) -> f64
where
    F: FnMut() -> f64,
{
    let base = wrt.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        wrt.set_data(&plus);
        let fp = f();
        let mut minus = base.clone();
        minus[i] -= h;
        wrt.set_data(&minus);
        let fm = f();
        wrt.set_data(&base);
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Deterministic pseudo-random values in [-1, 1] for gradcheck fixtures.
pub fn seeded_values(seed: u64, n: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Seeded random tensor with values in [-1, 1].
pub fn seeded_tensor<T: Elem>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let vals: Vec<T> = seeded_values(seed, n).into_iter().map(T::from_f64).collect();
    Tensor::from_vec(shape, vals).unwrap()
}
