//! Shared test fixtures: a generated dataset plus trained models, built once
//! per test binary. Only compiled for tests.

use std::sync::OnceLock;

use crate::models::{
    train_ar_target, train_fr_target, train_surrogate, SurrogateArch, SurrogateModel, TargetKind,
    TargetModel, TrainConfig,
};
use crate::synthface::{Dataset, DatasetSpec, FaceSample, IMG_PIXELS, N_ATTRS};
use crate::tensor::Tensor;

pub struct Fixture {
    pub dataset: Dataset,
    pub surrogate: SurrogateModel,
    pub fr_target: TargetModel,
    pub ar_target: TargetModel,
    pub surrogate_history: Vec<f64>,
}

/// Dataset + models trained at the bundled default scale (96 identities,
/// 30 epochs of SGD). Takes a few seconds; shared by all tests in the binary.
pub fn trained_fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dataset = Dataset::generate(DatasetSpec {
            seed: 40,
            n_identities: 96,
            samples_per_identity: 16,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            seed: 201,
        };
        let mut surrogate = SurrogateModel::build(&SurrogateArch::default(), 101);
        let surrogate_history = train_surrogate(&mut surrogate, &dataset, &cfg).unwrap();
        let mut fr_target =
            TargetModel::build("target_fr_a", TargetKind::Fr, IMG_PIXELS, &[96, 48, 24], 401);
        train_fr_target(&mut fr_target, &dataset, &TrainConfig { seed: 411, ..cfg }).unwrap();
        let mut ar_target =
            TargetModel::build("target_ar", TargetKind::Ar, IMG_PIXELS, &[96, 32, N_ATTRS], 501);
        train_ar_target(&mut ar_target, &dataset, &TrainConfig { seed: 511, ..cfg }).unwrap();
        Fixture {
            dataset,
            surrogate,
            fr_target,
            ar_target,
            surrogate_history,
        }
    })
}

/// Flattens a dataset image to the `[pixels]` vector shape models consume.
pub fn flat(s: &FaceSample) -> Tensor {
    s.image.with_shape(vec![IMG_PIXELS]).unwrap()
}
