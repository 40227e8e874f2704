use criterion::{criterion_group, criterion_main, Criterion};
use strata::versioning::{AccessType, HandleState};
use strata::{run_simnet, ExecutorKind, HandleId};
use strata_bench::{cholesky, config, rk4};

fn versioning(c: &mut Criterion) {
    let seq = [AccessType::Read, AccessType::Add, AccessType::Add, AccessType::Modify].repeat(256);
    c.bench_function("versioning/register_complete_1024", |b| {
        b.iter(|| {
            let mut st: HandleState<usize> = HandleState::new(HandleId(1));
            let reqs: Vec<_> = seq.iter().map(|&t| st.register_access(t)).collect();
            for r in &reqs {
                assert!(st.is_satisfied(r));
                st.complete_access(r);
            }
            st.runtime_version()
        })
    });
}

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    g.bench_function("cholesky_B12_b4_3x3", |b| {
        let prog = cholesky(12 * 4 * 8, 12, 4, 3, 3, true);
        let cfg = config(ExecutorKind::Discrete, 1, true);
        b.iter(|| run_simnet(prog.clone(), 9, &cfg).expect("run"))
    });
    g.finish();
}

fn real(c: &mut Criterion) {
    let mut g = c.benchmark_group("real");
    g.sample_size(10);
    g.bench_function("cholesky_N512_B4_b2_2x2", |b| {
        let prog = cholesky(512, 4, 2, 2, 2, false);
        let cfg = config(ExecutorKind::Threaded, 2, false);
        b.iter(|| run_simnet(prog.clone(), 4, &cfg).expect("run"))
    });
    g.bench_function("rk4_N6000_4ranks_5steps", |b| {
        let prog = rk4(6000, 5, 4, 4, 4);
        let cfg = config(ExecutorKind::Threaded, 1, false);
        b.iter(|| run_simnet(prog.clone(), 4, &cfg).expect("run"))
    });
    g.finish();
}

criterion_group!(benches, versioning, simulate, real);
criterion_main!(benches);
