use criterion::{black_box, criterion_group, criterion_main, Criterion};

use prog3d::renderer::{rasterize, DEFAULT_SIGMA};
use prog3d::uv_project::{project_image_to_uv, UvRaster};
use prog3d::{Generator, GeneratorConfig, Tensor, TrainConfig, Trainer};
use prog3d_bench::{camera, scene, toy_dataset};

fn bench_rasterize(c: &mut Criterion) {
    let (mesh, texture) = scene(4, 64);
    for size in [64, 128] {
        let cam = camera(size);
        c.bench_function(&format!("rasterize_level4_{size}px"), |b| {
            b.iter(|| rasterize(black_box(&mesh), &texture, &cam, DEFAULT_SIGMA).unwrap())
        });
    }
}

fn bench_projection(c: &mut Criterion) {
    let (mesh, texture) = scene(4, 64);
    let cam = camera(64);
    let image = rasterize(&mesh, &texture, &cam, DEFAULT_SIGMA).unwrap().image;
    let raster = UvRaster::new(&mesh.topology, 64).unwrap();
    c.bench_function("project_uv_64", |b| {
        b.iter(|| project_image_to_uv(black_box(&image), &mesh, &cam, &raster, 0).unwrap())
    });
}

fn bench_generator(c: &mut Criterion) {
    let cfg = GeneratorConfig::toy();
    let g = Generator::new(cfg.clone(), 0).unwrap();
    let n = 4;
    let images = Tensor::full(&[n, 3, cfg.image_size, cfg.image_size], 0.5);
    let z = Tensor::zeros(&[n, cfg.latent_dim]);
    c.bench_function("generator_toy_forward_batch4", |b| {
        b.iter(|| g.predict(black_box(&images), &z).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let data = toy_dataset(8);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    // Iterations 0, 40 and 70 of a 100-step schedule fall in stages 1, 2 and 3.
    for (name, start) in [("stage1", 0), ("stage2", 40), ("stage3", 70)] {
        let mut trainer = Trainer::new(TrainConfig::toy(100, 0)).unwrap();
        trainer.iteration = start;
        group.bench_function(name, |b| b.iter(|| trainer.step(&data).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_rasterize, bench_projection, bench_generator, bench_train_step);
criterion_main!(benches);
