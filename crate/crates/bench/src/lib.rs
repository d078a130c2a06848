//! Shared fixtures for the benchmarks.

use imae_core::backbone::init_backbone;
use imae_core::data::{load_dataset, DataConfig, Split};
use imae_core::imae::init_heads;
use imae_core::{BackboneConfig, ImageBatch, Mat, MixConfig, MixSpec, ParamStore, Profile};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A seeded student/teacher pair with one mixed batch of synthetic images.
pub struct Fixture {
    pub model: BackboneConfig,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub batch: ImageBatch,
    pub spec: MixSpec,
    pub rng: ChaCha8Rng,
}

impl Fixture {
    pub fn new(profile: Profile, image_size: usize, batch: usize) -> Self {
        let model = BackboneConfig::from_profile(profile, image_size, 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut student = init_backbone(&model, &mut rng);
        student.merge(&init_heads(model.embed_dim, &mut rng));
        let teacher = init_backbone(&model, &mut rng).subset("encoder.");
        let data = load_dataset(
            &DataConfig {
                image_size,
                num_train: batch,
                ..DataConfig::default()
            },
            Split::Train,
        )
        .expect("synthetic data");
        let batch = data.batch(&(0..batch).collect::<Vec<_>>());
        let spec = MixSpec::sample(&batch, &MixConfig::default(), &mut rng).expect("mix spec");
        Self {
            model,
            student,
            teacher,
            batch,
            spec,
            rng,
        }
    }
}

/// A noisy sparse linear regression problem `(x, y)` with `y = x w + e`.
pub fn regression_problem(rows: usize, inputs: usize, outputs: usize, seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((rows, inputs), |_| rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_fn((inputs, outputs), |(i, j)| {
        if (i + j) % 3 == 0 {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let noise = Array2::from_shape_fn((rows, outputs), |_| rng.random_range(-0.05..0.05));
    let y = x.dot(&w) + noise;
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_consistent_shapes() {
        let f = Fixture::new(Profile::Nano, 16, 4);
        assert_eq!(f.batch.len(), 4);
        assert_eq!(f.spec.len(), 4);
        let (x, y) = regression_problem(10, 3, 2, 0);
        assert_eq!((x.dim(), y.dim()), ((10, 3), (10, 2)));
    }
}
