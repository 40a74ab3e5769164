//! Double-precision backward pass against central finite differences.

use evonet_core::engine::loss::mean_cross_entropy;
use evonet_core::engine::{Activation, Gradients, LayerSpec, Mode, Network, NodeSpec, Padding, PoolKind};
use evonet_core::Tensor;
use rand::{Rng, SeedableRng};

fn loss(net: &Network<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    mean_cross_entropy(net.forward(x, Mode::Train).logits(), y).0
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt();
    d / n.max(1e-12)
}

/// Worst per-tensor relative error over parameters and the input.
fn check(net: &Network<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let tape = net.forward(x, Mode::Train);
    let (_, d) = mean_cross_entropy(tape.logits(), y);
    let mut grads: Gradients<f64> = net.zero_grads();
    let dx = net.backward(&tape, &d, Some(&mut grads), true).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, analytic) in grads.params.iter().enumerate() {
        let mut fd = vec![0.0; analytic.len()];
        for (k, g) in fd.iter_mut().enumerate() {
            let mut p = net.clone();
            p.params_mut()[t][k] += h;
            let up = loss(&p, x, y);
            p.params_mut()[t][k] -= 2.0 * h;
            *g = (up - loss(&p, x, y)) / (2.0 * h);
        }
        worst = worst.max(rel(analytic, &fd));
    }
    let mut fd = vec![0.0; x.len()];
    for (k, g) in fd.iter_mut().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let up = loss(net, &xp, y);
        xp.data_mut()[k] -= 2.0 * h;
        *g = (up - loss(net, &xp, y)) / (2.0 * h);
    }
    worst.max(rel(dx.data(), &fd))
}

fn input(rng: &mut evonet_core::Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn toy_nets_match_finite_differences_in_double_precision() {
    let mut rng = evonet_core::Rng::seed_from_u64(42);
    let head = LayerSpec::Dense { units: 3, bias: true };
    let chains: Vec<Vec<LayerSpec>> = vec![
        vec![
            LayerSpec::Conv { filters: 3, kernel: 3, stride: 1, padding: Padding::Same, bias: true },
            LayerSpec::Act(Activation::Swish),
            head.clone(),
        ],
        vec![
            LayerSpec::Conv { filters: 2, kernel: 2, stride: 2, padding: Padding::Valid, bias: false },
            LayerSpec::BatchNorm,
            LayerSpec::Act(Activation::Sigmoid),
            head.clone(),
        ],
        vec![
            LayerSpec::Pool { kind: PoolKind::Avg, kernel: 3, stride: 2, padding: Padding::Same },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4, bias: true },
            LayerSpec::Act(Activation::Relu),
            head.clone(),
        ],
        vec![
            LayerSpec::Conv { filters: 3, kernel: 3, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Pool { kind: PoolKind::Max, kernel: 2, stride: 1, padding: Padding::Valid },
            head.clone(),
        ],
    ];
    for layers in &chains {
        let net: Network<f64> = Network::sequential([5, 5, 2], layers, &mut rng).unwrap();
        let x = input(&mut rng, &[3, 5, 5, 2]);
        let err = check(&net, &x, &[0, 2, 1]);
        assert!(err < 1e-6, "{layers:?}: {err}");
    }
}

#[test]
fn multi_input_aggregation_matches_finite_differences() {
    let mut rng = evonet_core::Rng::seed_from_u64(7);
    let specs = vec![
        NodeSpec {
            inputs: vec![-1],
            layers: vec![LayerSpec::Conv { filters: 2, kernel: 3, stride: 2, padding: Padding::Same, bias: true }],
        },
        NodeSpec {
            inputs: vec![-1, 0],
            layers: vec![LayerSpec::BatchNorm, LayerSpec::Act(Activation::Swish)],
        },
        NodeSpec { inputs: vec![0, 1], layers: vec![LayerSpec::Dense { units: 3, bias: true }] },
    ];
    let net: Network<f64> = Network::new([6, 6, 2], &specs, &mut rng).unwrap();
    assert_eq!(net.nodes[1].out_shape(), [3, 3, 4]);
    let x = input(&mut rng, &[4, 6, 6, 2]);
    let err = check(&net, &x, &[0, 1, 2, 0]);
    assert!(err < 1e-6, "{err}");
}
