use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use kimura_mfg::model::{registry, ZeroFeedback};
use kimura_mfg::particle::{
    step_ensemble, CommonNoiseStream, IdiosyncraticStream, MeanFieldRateFunction, ParticleEnsemble,
};
use kimura_mfg::pde::{solve_linear, LinearKimuraProblem};
use kimura_mfg::rng::StreamRng;
use kimura_mfg::sde::{draw_increments, step_p, SchemeConfig};
use kimura_mfg::simplex::{build_grid, SimplexPoint};
use std::sync::Arc;

fn bench_step_p(c: &mut Criterion) {
    let spec = registry::three_state();
    let cfg = SchemeConfig::new(1e-3);
    let p = SimplexPoint::barycenter(3);
    let mut rng = StreamRng::new(1, 0);
    c.bench_function("step_p_d3", |b| {
        b.iter_batched(
            || draw_increments(3, cfg.dt, &mut rng),
            |dw| step_p(&p, 0.1, &dw, &ZeroFeedback, &spec, &cfg),
            BatchSize::SmallInput,
        )
    });
}

fn bench_particle_step(c: &mut Criterion) {
    let mu0 = SimplexPoint::barycenter(3);
    let idio = IdiosyncraticStream::new(7);
    let common = CommonNoiseStream::new(8);
    let rate = MeanFieldRateFunction::unit(3);
    let ens = ParticleEnsemble::init(3, 1000, &mu0, &idio).unwrap();
    c.bench_function("step_ensemble_n1000_d3", |b| {
        b.iter(|| step_ensemble(&ens, &rate, 0.4, &idio, &common).unwrap())
    });
}

fn bench_solve_linear(c: &mut Criterion) {
    let grid = build_grid(2, 100).unwrap();
    c.bench_function("solve_linear_n100", |b| {
        b.iter(|| {
            let problem = LinearKimuraProblem::pure_wf(
                0.5,
                0.1,
                Arc::new(|p: &SimplexPoint| p.get(0) * p.get(0)),
            );
            solve_linear(&problem, &grid, 2e-3).unwrap()
        })
    });
}

criterion_group!(benches, bench_step_p, bench_particle_step, bench_solve_linear);
criterion_main!(benches);
