use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fedmdfnn::mapping::{decide_mapping, EstimateSet, MappingConfig};
use fedmdfnn::mdfnn::{
    init_model, predict_input, train_epoch, AdamState, FeedbackInput, ModelConfig, ModelOutput, OptimizerConfig,
    TrainingRow,
};
use fedmdfnn::scenario::{generate_scenario, RoadLayout, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_model(&ModelConfig::default(), &mut rng).unwrap();
    let x: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fb = FeedbackInput([0.1, 0.2, 0.3, 0.4]);
    c.bench_function("mdfnn/predict", |b| b.iter(|| predict_input(black_box(&params), black_box(&x), &fb).unwrap()));

    let rows: Vec<TrainingRow> = (0..256)
        .map(|_| TrainingRow {
            input: (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            feedback: FeedbackInput::default(),
            target: [0.1, 0.2, 0.3, 0.4, f64::from(rng.gen_bool(0.5))],
        })
        .collect();
    let mut group = c.benchmark_group("mdfnn/train_epoch");
    group.throughput(Throughput::Elements(rows.len() as u64));
    group.sample_size(20);
    group.bench_function("256_rows", |b| {
        let mut p = params.clone();
        let mut adam = AdamState::new(&p);
        let opt = OptimizerConfig::default();
        b.iter(|| train_epoch(&mut p, &mut adam, &rows, &opt, &mut rng).unwrap())
    });
    group.finish();
}

fn bench_mapping(c: &mut Criterion) {
    let mut group = c.benchmark_group("mapping/decide");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [3usize, 8, 16] {
        let mut unit_box = || {
            let (x, y) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
            [x, y, x + rng.gen_range(0.05..0.2), y + rng.gen_range(0.05..0.2)]
        };
        let boxes: Vec<[f64; 4]> = (0..n).map(|_| unit_box()).collect();
        let est =
            EstimateSet::new((0..n as u64).map(|id| (id, ModelOutput { bbx: unit_box(), inside: 0.9 })).collect())
                .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| decide_mapping(black_box(&est), black_box(&boxes), &MappingConfig::default()))
        });
    }
    group.finish();
}

fn bench_simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario/simulate_tick");
    for layout in [RoadLayout::Straight, RoadLayout::Grid] {
        let cfg = WorldConfig { seed: 3, road_layout: layout, duration: 1e6, ..WorldConfig::default() };
        let mut state = generate_scenario(&cfg).unwrap();
        group.bench_function(format!("{layout:?}").to_lowercase(), |b| b.iter(|| state.simulate_tick()));
    }
    group.finish();
}

criterion_group!(benches, bench_network, bench_mapping, bench_simulation);
criterion_main!(benches);
