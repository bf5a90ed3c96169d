//! Parallel vs sequential kernels on the same build: the rayon paths are
//! compiled in, and `par::set_sequential` flips the dispatch at runtime.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmnet::autodiff::EvalCx;
use lmnet::nn::{Initializer, Mode, MultiBranchModule};
use lmnet::ops::{conv2d, Conv2dSpec};
use lmnet::par;
use lmnet::tensor::Tensor;

fn rand_tensor(shape: Vec<usize>, rng: &mut StdRng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_modes(c: &mut Criterion, group: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    for sequential in [false, true] {
        let label = if sequential { "sequential" } else { "parallel" };
        g.bench_with_input(BenchmarkId::from_parameter(label), &sequential, |b, &seq| {
            par::set_sequential(seq);
            b.iter(&mut f);
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(0);
    let x = rand_tensor(vec![2, 16, 64, 64], &mut rng);
    let w = rand_tensor(vec![32, 16, 3, 3], &mut rng);
    let spec = Conv2dSpec::same(3, 3);
    bench_modes(c, "conv2d_3x3", || {
        conv2d(&x, &w, None, &spec).unwrap();
    });
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let a = rand_tensor(vec![256, 256], &mut rng);
    let b = rand_tensor(vec![256, 256], &mut rng);
    bench_modes(c, "matmul_256", || {
        a.matmul(&b).unwrap();
    });
}

fn bench_multi_branch(c: &mut Criterion) {
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(2));
    let m = MultiBranchModule::<f32>::new(
        "m", &mut init, 16, 16, 2, 4, &[(3, 1), (1, 3), (3, 3), (5, 5)],
    )
    .unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let x = rand_tensor(vec![1, 16, 48, 48], &mut rng);
    bench_modes(c, "multi_branch_forward", || {
        m.forward(&EvalCx, &x, Mode::Eval).unwrap();
    });
}

criterion_group!(benches, bench_conv2d, bench_matmul, bench_multi_branch);
criterion_main!(benches);
