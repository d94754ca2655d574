//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subop::fom::{build_dataset, DatasetSpec, FieldSpec, SampleRecord};
use subop::kernel::mse_loss;
use subop::sampler::GridSpec;
use subop::{Matrix, Mode, Model, ModelConfig, QueryBatch};

pub fn grid(nt: usize, nx: usize, ny: usize, nz: usize) -> GridSpec {
    GridSpec {
        nx,
        ny,
        nz,
        nt,
        x_range: [0.0, 1.0],
        y_range: [0.0, 1.0],
        z_range: [0.0, 0.5],
        horizon: 1.0,
    }
}

pub fn dataset_spec(grid: GridSpec) -> DatasetSpec {
    DatasetSpec {
        fields: FieldSpec {
            grid,
            ..FieldSpec::default()
        },
        ..DatasetSpec::default()
    }
}

pub fn dataset(n: usize, grid: GridSpec, seed: u64) -> Vec<SampleRecord> {
    build_dataset(n, &dataset_spec(grid), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Paper-shaped stacks at reduced width.
pub fn reduced_config(p: usize, width: usize, dropout_rate: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        dropout_rate,
        seed,
        ..ModelConfig::scaled(width, width, p)
    }
}

/// Inputs uniform in [-1, 1], targets uniform in [-1, 1].
pub fn random_batch(n: usize, seed: u64) -> QueryBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |cols: usize| {
        let v = (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(n, cols, v).unwrap()
    };
    let topo = m(4);
    let hetero = m(4);
    let homo = m(2);
    let target = m(1);
    QueryBatch {
        topo,
        hetero,
        homo,
        target: Some(target),
    }
}

fn loss(model: &Model, batch: &QueryBatch) -> f64 {
    let pred = model.predict(batch).unwrap();
    mse_loss(&pred, batch.target.as_ref().unwrap()).unwrap().0
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every parameter, using central differences with step `h`. The model must
/// have dropout disabled so train and eval passes agree.
pub fn worst_gradient_error(
    model: &mut Model,
    batch: &QueryBatch,
    h: f64,
    floor: f64,
) -> (f64, String) {
    assert_eq!(model.config().dropout_rate, 0.0);
    model.set_mode(Mode::Train);
    let pred = model
        .forward(batch, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let (_, d_pred) = mse_loss(&pred, batch.target.as_ref().unwrap()).unwrap();
    let grads = model.backward(&d_pred).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let names = model.param_names();
    let mut worst = (0.0, String::new());
    for (t, name) in names.iter().enumerate() {
        for (i, &a) in analytic[t].iter().enumerate() {
            let orig = model.param_slices()[t][i];
            model.param_slices_mut()[t][i] = orig + h;
            let up = loss(model, batch);
            model.param_slices_mut()[t][i] = orig - h;
            let down = loss(model, batch);
            model.param_slices_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (
                    err,
                    format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"),
                );
            }
        }
    }
    worst
}
