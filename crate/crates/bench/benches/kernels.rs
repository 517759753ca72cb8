use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mvae_bench::{mixture, mixture_spectrogram};
use mvae_core::autodiff::{NdArray, Tape};
use mvae_core::cvae::{one_hot, CvaeArch, CvaeModel};
use mvae_core::ilrma::{ilrma_run, IlrmaConfig};
use mvae_core::lgm::{ip_update, weighted_covariance, DemixingSystem, SourceVariances};
use mvae_core::mvae::SourceModel;
use mvae_core::signal::{istft, stft, StftConfig};

fn signal(c: &mut Criterion) {
    let x = mixture(1.0, 1);
    let cfg = StftConfig::new(256).unwrap();
    c.bench_function("stft 1s frame256", |b| b.iter(|| stft(black_box(x.channel(0)), 8000, cfg).unwrap()));
    let spec = stft(x.channel(0), 8000, cfg).unwrap();
    c.bench_function("istft 1s frame256", |b| b.iter(|| istft(black_box(&spec), x.len()).unwrap()));
}

fn separation(c: &mut Criterion) {
    let x = mixture_spectrogram(1.0, 128, 2);
    let (f, n) = (x[0].freq_bins, x[0].frames);
    let v = SourceVariances::new(f, n, vec![1.0; f * n]).unwrap();
    c.bench_function("ip sweep 2x2 F65", |b| {
        b.iter(|| {
            let mut w = DemixingSystem::identity(2, f);
            let sigmas = weighted_covariance(&x, &v).unwrap();
            for (fi, s) in sigmas.iter().enumerate() {
                ip_update(&mut w, s, 0, fi).unwrap();
            }
            w
        })
    });
    c.bench_function("ilrma 10 iterations", |b| {
        b.iter(|| ilrma_run(black_box(&x), &IlrmaConfig { iterations: 10, ..Default::default() }).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let mut t = Tape::new();
    let input = NdArray::full(&[1, 65, 64], 0.1);
    let weight = NdArray::full(&[64, 65, 5], 0.01);
    let bias = NdArray::zeros(&[64]);
    c.bench_function("conv1d 65->64 N64", |b| {
        b.iter(|| {
            t = Tape::new();
            let (x, w, bb) = (t.constant(input.clone()), t.constant(weight.clone()), t.constant(bias.clone()));
            t.conv1d(x, w, bb, 1, 2).unwrap()
        })
    });
    let model = CvaeModel::new(CvaeArch::new(65, 4, 16).unwrap(), 0).unwrap();
    let (d, nz) = model.latent_shape(64);
    let z = NdArray::full(&[d, nz], 0.2);
    let label = one_hot(1, 4).unwrap();
    c.bench_function("cvae decode F65 N64", |b| b.iter(|| model.decode(black_box(&z), &label, 64).unwrap()));
}

criterion_group!(benches, signal, separation, network);
criterion_main!(benches);
