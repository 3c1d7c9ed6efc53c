//! Finite-difference gradient checking for small graphs, in `f64`.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Graph, NodeId, ParamStore, Real};

/// Uniform `[-1, 1)` tensor from a seed.
pub fn rand_array<T: Real>(shape: &[usize], seed: u64) -> ArrayD<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.random::<f64>() * 2.0 - 1.0))
}

/// Compares analytic gradients of the scalar built by `build` against central
/// differences with step `h`, probing at most `max_per_param` entries of every
/// parameter. Returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check<F>(store: &ParamStore<f64>, build: F, h: f64, max_per_param: usize) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
{
    let mut g = Graph::new();
    let root = build(&mut g, store);
    let grads = g.backward(root, store.len());
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let r = build(&mut g, s);
        g.scalar(r)
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_param).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).as_slice().unwrap()[k];
            probe.get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let up = eval(&probe);
            probe.get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let down = eval(&probe);
            probe.get_mut(id).as_slice_mut().unwrap()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.as_slice().unwrap()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
