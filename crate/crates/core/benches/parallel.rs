//! Parallel vs sequential execution of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multigrid::nn::conv::{conv3d_backward, conv3d_forward, Conv3dSpec};
use multigrid::nn::{ModelConfig, ModelParams, Tensor};
use multigrid::schedule::{self, PlanConfig};
use multigrid::synth::{self, SynthDataset, SynthSpec};
use multigrid::{par, trainer};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = Conv3dSpec {
        c_in: 8,
        c_out: 8,
        kernel: [3, 3, 3],
        stride: [1, 1, 1],
        pad: [1, 1, 1],
    };
    let x = random(&[8, 8, 16, 16, 8], &mut rng);
    let w = random(&spec.weight_shape(), &mut rng);
    let dy = conv3d_forward(&x, &w, &spec).unwrap();

    let mut g = c.benchmark_group("conv3d");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| conv3d_forward(black_box(&x), &w, &spec).unwrap()));
        g.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| conv3d_backward(black_box(&x), &w, &spec, &dy, true).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn data(c: &mut Criterion) {
    let spec = SynthSpec {
        num_videos: 64,
        ..SynthSpec::default()
    };
    let toy: PlanConfig = serde_json::from_str(include_str!("../../../configs/toy_multigrid.json")).unwrap();
    let plan = schedule::compile(&toy).unwrap();
    let record = plan.records.last().unwrap().clone();
    let dataset = SynthDataset::generate(&spec).unwrap();
    let params = ModelParams::<f32>::init(&ModelConfig::default(), &mut trainer::init_rng(0)).unwrap();
    let eval = trainer::EvalConfig::for_plan(&toy, 2);

    let mut g = c.benchmark_group("data");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::new("generate", name), |b| b.iter(|| SynthDataset::generate(black_box(&spec)).unwrap()));
        g.bench_function(BenchmarkId::new("next_batch", name), |b| {
            let mut seed = 0;
            b.iter(|| {
                seed += 1;
                synth::next_batch(&dataset, &record, seed).unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| trainer::evaluate(&params, &dataset, &eval).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, conv, data);
criterion_main!(benches);
