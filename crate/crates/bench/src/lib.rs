//! Fixtures shared by the benchmarks.

use gpda_core::datagen::{select_rows, two_moons_shift, DomainDataset};
use gpda_core::gp_head::NoiseBatch;
use gpda_core::{GpdaModel, LabeledSet, Mat, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One training round's worth of inputs at toy scale.
pub struct StepFixture {
    pub config: TrainConfig,
    pub data: DomainDataset,
    pub model: GpdaModel,
    pub source: LabeledSet,
    pub target: Mat,
    pub noise: NoiseBatch,
}

pub fn step_fixture(draws: usize) -> StepFixture {
    let config = TrainConfig { draws, ..TrainConfig::toy() };
    let data = two_moons_shift(500, 30.0, 0.1, 0).expect("valid generator parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = GpdaModel::init(&config, &mut rng).expect("valid config");
    let idx: Vec<usize> = (0..config.batch_source).collect();
    let source = data.source.subset(&idx);
    let target = select_rows(&data.target_train, &idx[..config.batch_target]);
    let noise = NoiseBatch::sample(draws, config.classes, config.feature_dim, &mut rng);
    StepFixture {
        config,
        data,
        model,
        source,
        target,
        noise,
    }
}

pub fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}
