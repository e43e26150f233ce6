use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use vbident_core::ensemble::{baseline_power, dispatch_step, simulate_tracking, EnsembleSpec};
use vbident_core::forecaster::{make_supervised, ForecastArch, ForecastModel};
use vbident_core::sae::build_sae;
use vbident_core::signals::{scale_signal, synth_signal};

fn ensemble(c: &mut Criterion) {
    let e = EnsembleSpec { spread: 0.1, ..EnsembleSpec::ac(100, 1) }.build().unwrap();
    let target = 0.5 * e.total_rated_power();
    c.bench_function("dispatch_step/100_ac", |b| b.iter(|| dispatch_step(black_box(&e), black_box(target))));

    let small = EnsembleSpec { spread: 0.1, ..EnsembleSpec::ac(20, 1) }.build().unwrap();
    let sig = scale_signal(&synth_signal(3, 3600.0, 1.0, 0.002).unwrap(), small.total_rated_power(), 0.1).unwrap();
    let base = baseline_power(&small, 3600, 1.0).unwrap();
    c.bench_function("track/20_ac_1h", |b| b.iter(|| simulate_tracking(black_box(&small), &sig, base).unwrap()));
}

fn networks(c: &mut Criterion) {
    let sae = build_sae(203, 1).unwrap();
    let batch: Vec<f64> = (0..32 * 203).map(|i| 70.0 + (i % 17) as f64 * 0.1).collect();
    let idx: Vec<usize> = (0..32).collect();
    c.bench_function("sae_gradients/203_batch32", |b| {
        b.iter(|| sae.gradients(black_box(&batch), black_box(&batch), &idx).unwrap())
    });

    let x: Vec<f64> = (0..600).map(|t| (t as f64 * 0.05).sin()).collect();
    let u: Vec<f64> = (0..600).map(|t| (t as f64 * 0.13).cos()).collect();
    let set = make_supervised(&x, &u, 8, 30.0).unwrap();
    let model = ForecastModel::new(&set, &ForecastArch::default(), 2).unwrap();
    c.bench_function("forecaster_predict/599_windows_d8", |b| b.iter(|| model.predict_set(black_box(&set)).unwrap()));
    c.bench_function("forecaster_clone_train_step", |b| {
        b.iter_batched(
            || model.clone(),
            |m| {
                let inputs: Vec<f64> = set.inputs[..16 * 18].chunks(18).flat_map(|r| m.encode_window(r)).collect();
                m.net.gradients(&inputs, &set.targets[..16], &(0..16).collect::<Vec<_>>()).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, ensemble, networks);
criterion_main!(benches);
