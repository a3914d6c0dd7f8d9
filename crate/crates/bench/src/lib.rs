//! Fixtures shared by the benchmarks.

use nelf::envmap::EnvironmentMap;
use nelf::nelf::Architecture;
use nelf::pipeline::dataset::{generate_dataset, Dataset, DatasetConfig};
use nelf::{AnalyticScene, Camera, Sphere, Vec3};

/// Two diffuse spheres seen from a 64² camera.
pub fn two_spheres() -> (AnalyticScene, Camera) {
    let scene = AnalyticScene::new(vec![
        Sphere::diffuse([0.0, 0.0, 0.0], 0.12, [0.7, 0.5, 0.3]),
        Sphere::diffuse([0.08, 0.06, 0.05], 0.07, [0.2, 0.6, 0.8]),
    ])
    .expect("valid spheres");
    let cam = Camera::look_at(
        Vec3::new(0.4, 0.3, 1.4),
        Vec3::zeros(),
        Vec3::y(),
        110.0,
        110.0,
        64,
        64,
    );
    (scene, cam)
}

pub fn sky() -> EnvironmentMap {
    EnvironmentMap::from_fn(8, 16, |d| {
        [
            0.4 + 0.4 * d.y.max(0.0),
            0.3 + 0.2 * d.x.abs(),
            0.3 + 0.1 * d.z,
        ]
    })
}

/// A one-scene dataset at 32² for the field benchmarks.
pub fn small_dataset() -> Dataset {
    generate_dataset(
        &DatasetConfig {
            image_size: 32,
            train_triplets: 2,
            eval_triplets: 1,
            ..Default::default()
        },
        1,
    )
    .expect("valid dataset config")
}

pub fn arch() -> Architecture {
    Architecture::default()
}
