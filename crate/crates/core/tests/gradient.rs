use dqe::net::{DenseNet, DenseNetSpec, Mode, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const FLOOR: f64 = 1e-7;

fn loss(net: &mut DenseNet<f64>, x: &Tensor<f64>, weights: &[f64]) -> f64 {
    net.forward(x, Mode::Train)
        .iter()
        .zip(weights)
        .map(|(y, w)| y * w)
        .sum()
}

fn check(channels: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::<f64>::new(DenseNetSpec::tiny(channels), &mut rng).unwrap();
    let (n, h, w) = (3, 32, 32);
    let x = Tensor::from_vec(
        n,
        channels,
        h,
        w,
        (0..n * channels * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

    net.zero_grad();
    loss(&mut net, &x, &weights);
    net.backward(&weights);
    let analytic: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();
    let total: usize = analytic.iter().map(Vec::len).sum();

    let mut worst = 0.0f64;
    for flat in sample(&mut rng, total, 100) {
        let (mut pi, mut off) = (0, flat);
        while off >= analytic[pi].len() {
            off -= analytic[pi].len();
            pi += 1;
        }
        let original = net.params_mut()[pi].value[off];
        net.params_mut()[pi].value[off] = original + EPS;
        let plus = loss(&mut net, &x, &weights);
        net.params_mut()[pi].value[off] = original - EPS;
        let minus = loss(&mut net, &x, &weights);
        net.params_mut()[pi].value[off] = original;
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic[pi][off];
        let rel = (a - numeric).abs() / (a.abs().max(numeric.abs())).max(FLOOR);
        worst = worst.max(rel);
        let name = net.params_mut()[pi].name.clone();
        assert!(
            rel <= 1e-4,
            "{name}[{off}]: analytic {a:e}, numeric {numeric:e}, relative error {rel:e}"
        );
    }
    eprintln!("worst relative gradient error over 100 parameters: {worst:e}");
}

#[test]
fn backward_matches_central_differences_brats_input() {
    check(7, 11);
}

#[test]
fn backward_matches_central_differences_single_input() {
    check(5, 12);
}
