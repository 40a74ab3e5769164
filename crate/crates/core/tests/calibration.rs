//! The synthetic dataset must be easy enough that a two-layer network fits
//! it quickly; desk-scale acceptance runs rely on it.

use evonet_core::data::synth_dataset;
use evonet_core::engine::{
    evaluate, train, Activation, LayerSpec, LrSchedule, Network, Optimizer, OptimizerConfig, OptimizerKind, Padding,
    StepBudget, TrainConfig,
};
use rand::SeedableRng;

fn reference_net(seed: u64) -> Network<f32> {
    Network::sequential(
        [8, 8, 3],
        &[
            LayerSpec::Conv { filters: 8, kernel: 3, stride: 1, padding: Padding::Same, bias: true },
            LayerSpec::Act(Activation::Relu),
            LayerSpec::Dense { units: 3, bias: true },
        ],
        &mut evonet_core::Rng::seed_from_u64(seed),
    )
    .unwrap()
}

#[test]
fn reference_net_fits_synthetic_data_in_200_steps() {
    for seed in 0..3 {
        let ds = synth_dataset(200, 3, 8, seed).unwrap();
        let mut net = reference_net(seed);
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 },
                lr: 1e-2,
                schedule: LrSchedule::Constant,
            },
            &net,
        );
        let tc = TrainConfig {
            batch_size: 32,
            epochs_cap: usize::MAX,
            patience: None,
            l2: 0.0,
            grad_clip: None,
            augment: false,
            seed,
        };
        let report = train(&mut net, &mut opt, &ds, &ds.subset(&[]), &tc, &mut StepBudget(200), None);
        assert_eq!(report.steps, 200);
        let acc = evaluate(&net, &ds, 256).accuracy;
        assert!(acc >= 0.95, "seed {seed}: train accuracy {acc}");
    }
}
