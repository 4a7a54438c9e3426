use std::hint::black_box;

use cf_audit_core::bootstrap::{bootstrap_all, BootstrapConfig, Resampling};
use cf_audit_core::ingest::{filter_records, FilterConfig};
use cf_audit_core::metrics::Metric;
use cf_audit_core::model::{DecisionRecord, Sex, TriageScale};
use cf_audit_core::par::Execution;
use cf_audit_core::synth::{simulate, SynthConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn synth_config(n: usize) -> SynthConfig {
    SynthConfig::new(n, TriageScale::BORDEAUX, vec![0.15, 0.35, 0.35, 0.15], 0.02, 0.08, 1)
}

fn bench_bootstrap(c: &mut Criterion) {
    let preds = simulate(&synth_config(72_444), Execution::Parallel).unwrap();
    let mut g = c.benchmark_group("bootstrap_1000");
    g.sample_size(10);
    for how in [Resampling::Multinomial, Resampling::Indices] {
        for (name, exec) in MODES {
            let cfg = BootstrapConfig { iterations: 1000, resampling: how, execution: exec, ..BootstrapConfig::with_seed(3) };
            g.bench_function(BenchmarkId::new(format!("{how:?}").to_lowercase(), name), |b| {
                b.iter(|| bootstrap_all(black_box(&preds), &Metric::ALL, &cfg).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_synth(c: &mut Criterion) {
    let cfg = synth_config(200_000);
    let mut g = c.benchmark_group("synth_200k");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| simulate(black_box(&cfg), exec).unwrap()));
    }
    g.finish();
}

fn bench_filter(c: &mut Criterion) {
    let texts = [
        "Douleur thoracique depuis deux heures, irradiant au bras gauche, sueurs.",
        "Chute de sa hauteur, douleur de hanche, antécédent d'hystérectomie.",
        "Fièvre et toux productive depuis trois jours, dyspnée d'effort.",
        "Céphalées brutales, nausées, pas de déficit neurologique.",
    ];
    let records: Vec<DecisionRecord> = (0..50_000)
        .map(|i| {
            DecisionRecord::new(format!("r{i}"))
                .with_sex(if i % 2 == 0 { Sex::Male } else { Sex::Female })
                .with_age(18.0 + (i % 70) as f64)
                .with_label(1 + (i % 5) as u8)
                .with_texts("", texts[i % texts.len()], "HTA, diabète")
        })
        .collect();
    let cfg = FilterConfig::bordeaux();
    let mut g = c.benchmark_group("filter_50k");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| filter_records(black_box(&records), &cfg, exec)));
    }
    g.finish();
}

criterion_group!(benches, bench_bootstrap, bench_synth, bench_filter);
criterion_main!(benches);
