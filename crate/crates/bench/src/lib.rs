//! Fixtures shared by the criterion benches.
//!
//! Run with `cargo bench -p prog3d-bench`.

use prog3d::datagen::{generate_dataset, generate_scene};
use prog3d::{Camera, DatasetConfig, DeformedMesh, SceneSpec, Tensor, ViewSpec};

/// A perturbed level-`subdivision` object with its `[3, T, T]` texture.
pub fn scene(subdivision: u32, texture_size: usize) -> (DeformedMesh, Tensor) {
    generate_scene(&SceneSpec {
        seed: 7,
        subdivision,
        texture_size,
        ..SceneSpec::default()
    })
    .expect("valid scene spec")
}

pub fn camera(image_size: usize) -> Camera {
    Camera::new(30.0, 20.0, 3.0, 50.0, image_size).expect("valid camera")
}

/// Small clean dataset matching the toy training configuration.
pub fn toy_dataset(n_objects: usize) -> Vec<prog3d::MultiViewSample> {
    generate_dataset(&DatasetConfig {
        n_objects,
        seed: 1,
        scene: SceneSpec {
            subdivision: 3,
            texture_size: 32,
            ..SceneSpec::default()
        },
        views: ViewSpec {
            n_views: 8,
            image_size: 32,
            ..ViewSpec::default()
        },
        ..DatasetConfig::default()
    })
    .expect("valid dataset config")
}
