//! Hot kernels under the rayon pool and single-threaded.
//!
//! `cargo bench --bench kernels` compares a one-thread pool against the full
//! pool; `cargo bench --bench kernels --no-default-features` runs the same
//! kernels through the sequential fallback for a rayon-free baseline.

use std::hint::black_box;

use ablate_core::deform::{compute_ssc, ControlGrid, LabelSpace, LevelProblem};
use ablate_core::lungseg::apply_lung_mask;
use ablate_core::metrics::{ssim3d, SsimParams};
use ablate_core::par;
use ablate_core::phantom::{apply_synthetic_field, make_phantom, PhantomConfig, SyntheticField};
use ablate_core::rigid::{apply_rigid, ncc, RigidTransform};
use ablate_core::volume::{normalize, Interp, Volume, DEFAULT_WINDOW};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn inputs() -> (Volume, Volume) {
    let p = make_phantom(&PhantomConfig { dims: [64; 3], spacing: [1.875; 3], ..Default::default() }).unwrap();
    let sf = SyntheticField::respiratory(&p.geometry, 8.0, 1).unwrap();
    let (moved, _) = apply_synthetic_field(&p.volume, &sf);
    let fixed = normalize(&apply_lung_mask(&p.volume, &p.lung, -1000.0).unwrap(), Some(DEFAULT_WINDOW)).unwrap();
    let moving = normalize(&apply_lung_mask(&moved, &p.lung, -1000.0).unwrap(), Some(DEFAULT_WINDOW)).unwrap();
    (fixed, moving)
}

fn thread_counts() -> Vec<(String, Option<usize>)> {
    let mut v = vec![("1".to_string(), Some(1))];
    if cfg!(feature = "parallel") && par::current_threads() > 1 {
        v.push((par::current_threads().to_string(), None));
    }
    v
}

fn kernels(c: &mut Criterion) {
    let (fixed, moving) = inputs();
    let mode = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    let t = RigidTransform::from_euler([0.0, 0.0, 0.05], [1.5, -2.0, 0.5], fixed.grid().center());
    let df = compute_ssc(&fixed, 1);
    let dm = compute_ssc(&moving, 1);
    let grid = ControlGrid::new(fixed.grid(), 6).unwrap();
    let labels = LabelSpace::new(4, 1).unwrap();
    let problem = LevelProblem::new(&df, &dm, grid, labels, 0.03, vec![[0.0; 3]; grid.len()]).unwrap();

    let mut g = c.benchmark_group(format!("kernels/{mode}"));
    g.sample_size(10);
    for (name, threads) in thread_counts() {
        g.bench_with_input(BenchmarkId::new("ssc", &name), &threads, |b, &th| {
            b.iter(|| par::with_threads(th, || black_box(compute_ssc(&fixed, 1))))
        });
        g.bench_with_input(BenchmarkId::new("data_cost_table", &name), &threads, |b, &th| {
            b.iter(|| par::with_threads(th, || black_box(problem.cost_table())))
        });
        g.bench_with_input(BenchmarkId::new("ssim3d", &name), &threads, |b, &th| {
            b.iter(|| par::with_threads(th, || black_box(ssim3d(&moving, &fixed, &SsimParams::default(), None).unwrap())))
        });
        g.bench_with_input(BenchmarkId::new("rigid_warp_ncc", &name), &threads, |b, &th| {
            b.iter(|| {
                par::with_threads(th, || {
                    let w = apply_rigid(&moving, &t, Interp::Trilinear);
                    black_box(ncc(&w, &fixed, None).unwrap())
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
