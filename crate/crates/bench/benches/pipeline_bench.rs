//! Throughput benchmarks: field algebra, the procedural generators, and one
//! reshading optimizer step at batch 1 and 4.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use reshade_core::dip::{DipConfig, DipDriver, PreparedJob};
use reshade_core::imaging::{cut_and_paste_3d, form_image, AlbedoField, LightSpec, Mask};
use reshade_core::normals::{scene_footprint, synth_scene, SceneKind};
use reshade_core::synth::{gen_mondrian, gen_perlin, MondrianSpec, PerlinSpec};

fn bench_compositing(c: &mut Criterion) {
    let light = LightSpec::new([0.0, 0.0, 1.0], 1.0).unwrap();
    let a = synth_scene(SceneKind::Sphere, 256, 256, &light).unwrap().image;
    let b = synth_scene(SceneKind::Plane, 256, 256, &light).unwrap().image;
    let m = scene_footprint(SceneKind::Sphere, 256, 256);
    c.bench_function("cut_and_paste_3d 256x256", |bench| {
        bench.iter(|| cut_and_paste_3d(black_box(a.data()), black_box(b.data()), black_box(&m)))
    });

    let albedo = AlbedoField::filled(256, 256, [0.5, 0.6, 0.7]).unwrap();
    let shading = gen_perlin(&PerlinSpec::new(256, 256, 1)).unwrap();
    c.bench_function("form_image 256x256", |bench| {
        bench.iter(|| form_image(black_box(&albedo), black_box(&shading)))
    });
}

fn bench_generators(c: &mut Criterion) {
    c.bench_function("gen_perlin 128x128 f2", |bench| {
        let mut seed = 0u64;
        bench.iter(|| {
            seed += 1;
            gen_perlin(black_box(&PerlinSpec::new(128, 128, seed)))
        })
    });
    c.bench_function("gen_mondrian 128x128 p10", |bench| {
        let mut seed = 0u64;
        bench.iter(|| {
            seed += 1;
            gen_mondrian(black_box(&MondrianSpec::new(128, 128, seed)))
        })
    });
}

fn inpainting_job(h: usize, w: usize) -> PreparedJob {
    let light = LightSpec::new([0.0, 0.0, 1.0], 1.0).unwrap();
    let scene = synth_scene(SceneKind::Plane, h, w, &light).unwrap();
    let s_t = gen_perlin(&PerlinSpec::new(h, w, 2)).unwrap();
    let rho = AlbedoField::filled(h, w, [0.6, 0.5, 0.4]).unwrap();
    PreparedJob::from_fields(
        scene.image.clone(),
        s_t,
        Mask::zeros(h, w),
        rho.clone(),
        rho,
        scene.normals,
        None,
        None,
    )
    .unwrap()
}

fn bench_dip_step(c: &mut Criterion) {
    for batch in [1usize, 4] {
        let mut prepared = inpainting_job(64, 64);
        let config = DipConfig {
            iterations: 1,
            noise_batch: batch,
            noise_perturb_sigma: 0.05,
            loss_weights: (1.0, 0.0, 0.0),
            seed: 1,
            ..DipConfig::default()
        };
        let mut driver = DipDriver::new(&mut prepared, config).unwrap();
        c.bench_function(&format!("dip step 64x64 batch {batch}"), |bench| {
            bench.iter(|| driver.step().unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_compositing, bench_generators, bench_dip_step
}
criterion_main!(benches);
