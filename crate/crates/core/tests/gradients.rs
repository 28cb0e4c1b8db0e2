mod common;

use common::{fd_check, random_doc, tiny_instance, tiny_shape};
use dhim::objective::{total_loss, Model, Noise};
use dhim::{DocEmbedding, Mode, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn relaxed_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let (model, docs, _) = tiny_instance(&mut rng);
        let refs: Vec<&DocEmbedding> = docs.iter().collect();
        let (rel, idx, a, n) = fd_check(&model, &refs, 0.5);
        assert!(rel <= 1e-4, "case {case}: param {idx} analytic {a} numeric {n} rel {rel}");
    }
}

#[test]
fn beta_zero_leaves_cls_discriminator_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (model, docs, _) = tiny_instance(&mut rng);
    let refs: Vec<&DocEmbedding> = docs.iter().collect();
    let out = total_loss(&model, &refs, 0.0, Noise::relaxed()).unwrap();
    assert!(out.grads.disc.cls_weight.iter().all(|&g| g == 0.0));
    assert_eq!(out.grads.disc.cls_bias[0], 0.0);
    assert!(out.grads.disc.local_weight.iter().any(|&g| g != 0.0));
}

#[test]
fn stochastic_gradients_are_deterministic_per_seed_and_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = tiny_shape();
    let model = Model::<f32>::init(&shape, &mut rng).unwrap();
    let docs: Vec<DocEmbedding> = (0..3).map(|i| random_doc(&mut rng, i, 4, shape.dim)).collect();
    let refs: Vec<&DocEmbedding> = docs.iter().collect();
    let noise = |epoch| Noise {
        mode: Mode::Stochastic,
        seed: 3,
        epoch,
    };
    let a = total_loss(&model, &refs, 0.5, noise(0)).unwrap();
    let b = total_loss(&model, &refs, 0.5, noise(0)).unwrap();
    let c = total_loss(&model, &refs, 0.5, noise(1)).unwrap();
    assert_eq!(a.loss, b.loss);
    let flat = |m: &Model<f32>| (0..m.num_params()).map(|i| m.get_flat(i)).collect::<Vec<_>>();
    assert_eq!(flat(&a.grads), flat(&b.grads));
    assert_ne!(a.loss, c.loss);
}
