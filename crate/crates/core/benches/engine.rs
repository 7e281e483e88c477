//! Parallel core against a single worker.
//!
//! Under the default `parallel` feature every routine runs twice: on the
//! global rayon pool and inside a one-thread pool. Building with
//! `--no-default-features` benches the plain sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use repeater_core::evaluator::eval_protocol;
use repeater_core::montecarlo::estimate_distribution;
use repeater_core::protocol::{
    build_nested_chain, Backend, CutoffSpec, EvalConfig, HardwareParams, ProtocolNode,
};

fn hardware() -> HardwareParams {
    HardwareParams {
        p_gen: 0.1,
        p_swap: 0.4,
        w0: 0.98,
        t_coh: 600.0,
    }
}

fn chain() -> ProtocolNode {
    build_nested_chain(3, &[CutoffSpec::DifTime { tau: 12 }]).unwrap()
}

/// Runs `f` under each available execution strategy.
fn variants(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    if cfg!(feature = "parallel") {
        let threads = rayon::current_num_threads();
        g.bench_function(BenchmarkId::new("global_pool", threads), |b| b.iter(&mut f));
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        g.bench_function("one_thread", |b| single.install(|| b.iter(&mut f)));
    } else {
        g.bench_function("sequential", |b| b.iter(&mut f));
    }
    g.finish();
}

fn evaluators(c: &mut Criterion) {
    let tree = chain();
    let fast = EvalConfig::new(1 << 16, Backend::Fast, hardware());
    variants(c, "fast_9_node", || {
        eval_protocol(&tree, &fast).unwrap();
    });
    let fidelity = build_nested_chain(2, &[CutoffSpec::Fidelity { w_cut: 0.9 }]).unwrap();
    let fourier = EvalConfig::new(2_000, Backend::Fourier, hardware());
    variants(c, "fourier_fidelity_5_node", || {
        eval_protocol(&fidelity, &fourier).unwrap();
    });
}

fn sampling(c: &mut Criterion) {
    let tree = chain();
    let cfg = EvalConfig::new(20_000, Backend::Fast, hardware());
    variants(c, "monte_carlo_20k", || {
        estimate_distribution(&tree, &cfg, 20_000, 7).unwrap();
    });
}

criterion_group!(benches, evaluators, sampling);
criterion_main!(benches);
