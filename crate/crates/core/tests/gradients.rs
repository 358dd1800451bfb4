use gid_core::neural::{batch_cross_entropy, dropout_mask, JointModel, ModelDims};
use gid_core::rng;
use ndarray::Array2;
use rand::Rng;

fn loss(model: &JointModel, x: &Array2<f64>, mask: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let fwd = model.forward_masked(x, Some(mask.clone())).unwrap();
    batch_cross_entropy(&fwd.logits, t).0
}

/// Largest relative error between analytic and central-difference gradients.
fn worst_relative_error(dims: ModelDims, seed: u64, p: f64) -> f64 {
    let model = JointModel::new(dims, seed).unwrap();
    let mut r = rng::derive(seed, 99);
    let rows = 4;
    let x = Array2::from_shape_fn((rows, dims.input), |_| r.random_range(-1.5..1.5));
    let k = dims.n_classes();
    let mut t = Array2::from_shape_fn((rows, k), |_| r.random::<f64>());
    for mut row in t.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let mask = dropout_mask((rows, dims.repr), p, &mut r).unwrap();

    let fwd = model.forward_masked(&x, Some(mask.clone())).unwrap();
    let (_, g) = batch_cross_entropy(&fwd.logits, &t);
    let mut grads = vec![0.0; model.params.len()];
    model.backward(&fwd, &g, &mut grads);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let numeric = (loss(&plus, &x, &mask, &t) - loss(&minus, &x, &mask, &t)) / (2.0 * h);
        let denom = numeric.abs().max(grads[i].abs()).max(1e-6);
        worst = worst.max((numeric - grads[i]).abs() / denom);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_across_shapes() {
    let shapes = [
        (8, 8, 1, 3, 2),
        (6, 4, 2, 2, 3),
        (5, 5, 3, 1, 1),
        (3, 7, 1, 4, 2),
    ];
    for (seed, &(input, repr, layers, n, m)) in shapes.iter().enumerate() {
        let dims = ModelDims {
            repr,
            encoder_layers: layers,
            ..ModelDims::new(input, n, m)
        };
        for p in [0.0, 0.5] {
            let err = worst_relative_error(dims, seed as u64, p);
            assert!(err < 1e-4, "{dims:?} p={p}: {err}");
        }
    }
}
