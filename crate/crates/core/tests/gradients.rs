mod common;

use common::{random_sample, rng, tiny_config};
use longer::model::{loss_and_grads, LongerModel, Trainable};
use longer::tensors::{central_difference, Tape, Tensor};

fn loss(model: &LongerModel, s: &longer::inputs::Sample) -> f64 {
    let mut tape = Tape::new(model.store());
    let z = model.logit_node(&mut tape, s).unwrap();
    let l = tape.bce_with_logit(z, f64::from(s.label)).unwrap();
    tape.value(l).data()[0]
}

/// Relative error with an absolute floor: key biases shift every score of a
/// query equally, so their gradient is exactly zero and the numeric estimate
/// is pure rounding noise.
fn floored_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-6)
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let model = LongerModel::new(tiny_config(seed)).unwrap();
        let mut r = rng(seed, "e2e");
        let sample = random_sample(&model.config, 6, &mut r);
        let (_, grads) = loss_and_grads(&model, &sample).unwrap();
        for (i, id) in model.store.ids().enumerate() {
            let orig = model.store.get(id).clone();
            let numeric = central_difference(orig.data(), 1e-5, |v| {
                let mut m = model.clone();
                *m.store.get_mut(id) = Tensor::new(orig.shape().to_vec(), v.to_vec()).unwrap();
                loss(&m, &sample)
            });
            let err = floored_error(grads[i].data(), &numeric);
            assert!(
                err <= 1e-3,
                "seed {} param {} error {}",
                seed,
                model.store.name(id),
                err
            );
        }
    }
}
