//! Property tests over the invariants each module promises.

use evonet_core::attacks::{
    apgd, fgsm, objective_on_logits, pgd, ApgdConfig, AttackLoss, NetworkModel, Norm, Objective, PgdConfig, ThreatModel,
};
use evonet_core::data::{augment, split_indices, synth_dataset, SplitSpec};
use evonet_core::engine::network::aggregate_shapes;
use evonet_core::engine::{Activation, LayerSpec, Network, Padding, PoolKind};
use evonet_core::evolution::{Evolution, EvolutionConfig};
use evonet_core::fitness::{f_beta, WarmupController};
use evonet_core::genome::{neronet_modules, random_genome, validate, BudgetRange, SeedOptions};
use evonet_core::grammar::parse_grammar;
use evonet_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;

fn stream(seed: u64) -> evonet_core::Rng {
    evonet_core::Rng::seed_from_u64(seed)
}

fn small_net(seed: u64) -> Network<f32> {
    Network::sequential(
        [4, 4, 2],
        &[
            LayerSpec::Conv { filters: 3, kernel: 3, stride: 1, padding: Padding::Same, bias: true },
            LayerSpec::BatchNorm,
            LayerSpec::Act(Activation::Swish),
            LayerSpec::Pool { kind: PoolKind::Max, kernel: 2, stride: 2, padding: Padding::Valid },
            LayerSpec::Dense { units: 4, bias: true },
        ],
        &mut stream(seed),
    )
    .unwrap()
}

fn images(seed: u64, n: usize) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = stream(seed);
    let len = n * 32;
    // include exact 0 and 1 so range clipping is exercised
    let data = (0..len)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0f32..1.0),
        })
        .collect();
    Tensor::from_vec(&[n, 4, 4, 2], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f_beta_is_a_bounded_monotone_mean(c in 0.0f64..=1.0, a in 0.0f64..=1.0, d in 0.0f64..0.5, beta in 0.1f64..10.0) {
        let f = f_beta(c, a, beta);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!(f <= c.max(a) + 1e-12);
        prop_assert!(f_beta((c + d).min(1.0), a, beta) >= f - 1e-12);
        prop_assert!(f_beta(c, (a + d).min(1.0), beta) >= f - 1e-12);
    }

    #[test]
    fn warmup_never_unlatches(means in proptest::collection::vec(0.0f64..1.0, 1..30)) {
        let mut w = WarmupController::new(0.8);
        let mut seen = false;
        for m in means {
            w.update(&[m]);
            seen |= m >= 0.8;
            prop_assert_eq!(w.transitioned, seen);
        }
    }

    #[test]
    fn attacks_respect_the_threat_model(seed in any::<u64>(), eps in 1e-3f64..0.5, l2 in any::<bool>(), steps in 1usize..6) {
        let net = small_net(seed);
        let model = NetworkModel::inference(&net);
        let x = images(seed ^ 1, 3);
        let y = [0usize, 1, 3];
        let tm = if l2 { ThreatModel::l2(eps) } else { ThreatModel::linf(eps) };
        let mut rng = stream(seed);
        let outs = [
            fgsm(&model, &x, &y, &tm),
            pgd(&model, &x, &y, &tm, &PgdConfig { steps, step_size: eps / 3.0, random_start: true, loss: AttackLoss::Ce }, None, &mut rng),
            pgd(&model, &x, &y, &tm, &PgdConfig { steps, step_size: eps, random_start: false, loss: AttackLoss::Dlr }, Some(&[1, 2, 0]), &mut rng),
            apgd(&model, &x, &y, &tm, &ApgdConfig::new(steps * 3, AttackLoss::Ce), None, &mut rng).x_adv,
        ];
        for o in &outs {
            prop_assert!(tm.contains(&x, o));
        }
    }

    #[test]
    fn fgsm_equals_single_step_pgd(seed in any::<u64>(), eps in 1e-3f64..0.3) {
        let net = small_net(seed);
        let model = NetworkModel::inference(&net);
        let x = images(seed, 4);
        let y = [3usize, 2, 1, 0];
        let tm = ThreatModel::linf(eps);
        let a = fgsm(&model, &x, &y, &tm);
        let cfg = PgdConfig { steps: 1, step_size: eps, random_start: false, loss: AttackLoss::Ce };
        let b = pgd(&model, &x, &y, &tm, &cfg, None, &mut stream(0));
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn batched_attacks_equal_per_sample_attacks(seed in any::<u64>()) {
        let net = small_net(seed);
        let model = NetworkModel::inference(&net);
        let x = images(seed, 3);
        let y = [1usize, 0, 2];
        let tm = ThreatModel::linf(0.05);
        let cfg = PgdConfig::standard(3, 0.05);
        let batched = pgd(&model, &x, &y, &tm, &cfg, None, &mut stream(0));
        for i in 0..3 {
            let xi = x.select(&[i]);
            let single = pgd(&model, &xi, &y[i..=i], &tm, &cfg, None, &mut stream(0));
            prop_assert_eq!(single.data(), batched.sample(i));
        }
    }

    #[test]
    fn apgd_never_loses_loss_on_robust_samples(seed in any::<u64>(), l2 in any::<bool>()) {
        let net = small_net(seed);
        let model = NetworkModel::inference(&net);
        let x = images(seed, 4);
        let y = [0usize, 1, 2, 3];
        let tm = ThreatModel { norm: if l2 { Norm::L2 } else { Norm::Linf }, epsilon: 0.03 };
        let r = apgd(&model, &x, &y, &tm, &ApgdConfig::new(10, AttackLoss::Ce), None, &mut stream(0));
        let logits = net.predict(&r.x_adv);
        let (after, _) = objective_on_logits(&logits, &y, Objective::Ce);
        for i in 0..4 {
            if !r.fooled[i] {
                prop_assert!(after[i] >= r.initial_loss[i]);
                prop_assert_eq!(after[i], r.best_loss[i]);
            }
        }
    }

    #[test]
    fn aggregation_concatenates_at_the_smallest_size(base in 1usize..5, factors in proptest::collection::vec((0u32..3, 1usize..6), 1..5)) {
        let shapes: Vec<[usize; 3]> = factors.iter().map(|&(p, c)| [base << p, base << p, c]).collect();
        let (f, out) = aggregate_shapes(&shapes).unwrap();
        let min = shapes.iter().map(|s| s[0]).min().unwrap();
        prop_assert_eq!(out, [min, min, shapes.iter().map(|s| s[2]).sum()]);
        for (s, k) in shapes.iter().zip(f) {
            prop_assert_eq!(s[0], min * k);
        }
    }

    #[test]
    fn splits_are_disjoint_and_exact(n in 10usize..400, a in 0.0f64..0.5, b in 0.0f64..0.25, seed in any::<u64>()) {
        let spec = SplitSpec { evo_train: (n as f64 * a) as usize, control: (n as f64 * b) as usize, fitness: (n as f64 * b) as usize, seed };
        let parts = split_indices(n, &spec).unwrap();
        prop_assert_eq!(parts[0].len(), spec.evo_train);
        prop_assert_eq!(parts[1].len(), spec.control);
        prop_assert_eq!(parts[2].len(), spec.fitness);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), total);
        prop_assert!(all.iter().all(|&i| i < n));
    }

    #[test]
    fn augmentation_preserves_shape_and_range(seed in any::<u64>()) {
        let ds = synth_dataset(2, 3, 8, seed).unwrap();
        let mut x = ds.images::<f32>(&[0, 1, 2, 3, 4, 5]);
        let shape = x.shape().to_vec();
        augment(&mut x, &mut stream(seed));
        prop_assert_eq!(x.shape(), &shape[..]);
        prop_assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mutation_chains_keep_genomes_valid(seed in any::<u64>()) {
        let grammar = parse_grammar(evonet_core::DESK_GRAMMAR).unwrap();
        let evo = Evolution {
            config: EvolutionConfig::default(),
            grammar: &grammar,
            specs: neronet_modules(),
            seed_options: SeedOptions::desk(),
            input_shape: [8, 8, 3],
            n_classes: 3,
        };
        let mut rng = stream(seed);
        let range = BudgetRange { default: 2000, max: 6000 };
        let mut g = random_genome(&evo.specs, &grammar, range, &mut rng).unwrap();
        for _ in 0..40 {
            g = evo.mutate(&g, &mut rng);
            prop_assert!(validate(&g).is_empty(), "{:?}", validate(&g));
        }
    }
}
