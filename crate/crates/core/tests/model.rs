mod common;

use common::{random_batch, reduced_config, worst_gradient_error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subop::inference::predict_chunked;
use subop::{build_model, Mode};

#[test]
fn full_model_gradients_match_central_differences() {
    let mut model = build_model(&reduced_config(4, 8, 0.0, 11)).unwrap();
    for seed in 0..5 {
        let batch = random_batch(16, 100 + seed);
        let (err, at) = worst_gradient_error(&mut model, &batch, 1e-5, 1e-8);
        assert!(err < 1e-4, "batch {seed}: relative error {err:e} at {at}");
    }
}

#[test]
fn swapping_same_width_embedders_and_inputs_is_invisible() {
    // TE and HePE both take four features. Swapping their weights together
    // with their inputs only reorders a two-term sum, which is exact.
    let model = build_model(&reduced_config(6, 10, 0.3, 3)).unwrap();
    let mut swapped = model.clone();
    std::mem::swap(&mut swapped.te, &mut swapped.hepe);
    let batch = random_batch(40, 9);
    let mut crossed = batch.clone();
    std::mem::swap(&mut crossed.topo, &mut crossed.hetero);
    assert_eq!(
        model.predict(&batch).unwrap(),
        swapped.predict(&crossed).unwrap()
    );
}

#[test]
fn each_row_is_decoded_independently() {
    let model = build_model(&reduced_config(8, 16, 0.3, 5)).unwrap();
    let batch = random_batch(97, 21);
    let whole = model.predict(&batch).unwrap();
    for i in [0, 13, 96] {
        let one = model.predict(&batch.slice(i, i + 1)).unwrap();
        assert_eq!(one.get(0, 0), whole.get(i, 0), "row {i}");
    }
    for bs in [1, 7, 64, 4096] {
        assert_eq!(
            predict_chunked(&model, &batch, bs).unwrap(),
            whole.data(),
            "batch size {bs}"
        );
    }
}

#[test]
fn train_mode_without_dropout_equals_eval() {
    let mut model = build_model(&reduced_config(4, 8, 0.0, 2)).unwrap();
    let batch = random_batch(12, 4);
    let eval = model.predict(&batch).unwrap();
    model.set_mode(Mode::Train);
    let train = model
        .forward(&batch, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_eq!(eval, train);
}

#[test]
fn dropout_makes_train_passes_stochastic() {
    let mut model = build_model(&reduced_config(4, 16, 0.3, 2)).unwrap();
    model.set_mode(Mode::Train);
    let batch = random_batch(12, 4);
    let a = model
        .forward(&batch, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let b = model
        .forward(&batch, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    let a2 = model
        .forward(&batch, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_ne!(a, b);
    assert_eq!(a, a2);
}
