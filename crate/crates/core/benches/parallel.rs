//! Sequential vs rayon fan-out on the two hot loops: teacher rollouts in
//! 64-row chunks and per-step mixture fits over an ensemble.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use hcp::exec;
use hcp::net::{Activation, DenoiserNet, NetSpec};
use hcp::rng::{self, StreamRng};
use hcp::schedule::NoiseSchedule;
use hcp::switchtime::gmm::fit_gmm_bic;
use hcp::switchtime::kde::{kde_on_grid, linspace, scott_bandwidth};
use hcp::teacher::{EpsPredictor, TeacherModel};

const CHUNK: usize = 64;

fn teacher() -> TeacherModel {
    let schedule = NoiseSchedule::build(80, 1e-4, 0.02, 1e-12).unwrap();
    let spec = NetSpec {
        data_dim: 2,
        cond_dim: 0,
        time_embed_dim: 16,
        hidden: vec![64, 64, 64],
        activation: Activation::Silu,
    };
    TeacherModel::new(schedule, DenoiserNet::new(&spec, 7).unwrap()).unwrap()
}

fn rollout_chunk(t: &TeacherModel, c: usize, n: usize) -> Vec<Vec<f64>> {
    let lo = c * CHUNK;
    let hi = (lo + CHUNK).min(n);
    let mut rngs: Vec<StreamRng> = (lo..hi).map(|i| rng::stream(3, i as u64)).collect();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| rng::gaussian_vec(r, 2)).collect();
    let conds = vec![&[][..]; xs.len()];
    t.ancestral_lockstep(&mut xs, &mut rngs, &conds, 79, 0, |_, _| {}).unwrap();
    xs
}

fn columns(n_steps: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n_steps)
        .map(|k| {
            let mut r = rng::stream(11, k as u64);
            let spread = 1.0 + k as f64 / n_steps as f64;
            (0..n)
                .map(|i| {
                    let m = if i % 2 == 0 { -1.0 } else { 1.0 };
                    m / spread + 0.2 * rng::gaussian(&mut r)
                })
                .collect()
        })
        .collect()
}

fn column_work(col: &[f64]) -> f64 {
    let fit = fit_gmm_bic(col, 6, 5).unwrap();
    let grid = linspace(-3.0, 3.0, 256);
    let d = kde_on_grid(col, scott_bandwidth(col), &grid);
    fit.means.iter().sum::<f64>() + d.iter().sum::<f64>()
}

fn bench_rollouts(c: &mut Criterion) {
    let t = teacher();
    let mut g = c.benchmark_group("rollouts");
    g.sample_size(10);
    for n in [256usize, 1024] {
        let chunks = n.div_ceil(CHUNK);
        g.bench_with_input(BenchmarkId::new("seq", n), &n, |b, &n| {
            b.iter(|| black_box(exec::map_range_seq(chunks, |c| rollout_chunk(&t, c, n))))
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("par", n), &n, |b, &n| {
            b.iter(|| black_box(exec::map_range_par(chunks, |c| rollout_chunk(&t, c, n))))
        });
    }
    g.finish();
}

fn bench_column_fits(c: &mut Criterion) {
    let cols = columns(80, 512);
    let mut g = c.benchmark_group("column_fits");
    g.sample_size(10);
    g.bench_function("seq", |b| {
        b.iter(|| black_box(exec::map_range_seq(cols.len(), |k| column_work(&cols[k]))))
    });
    #[cfg(feature = "parallel")]
    g.bench_function("par", |b| {
        b.iter(|| black_box(exec::map_range_par(cols.len(), |k| column_work(&cols[k]))))
    });
    g.finish();
}

criterion_group!(benches, bench_rollouts, bench_column_fits);
criterion_main!(benches);
