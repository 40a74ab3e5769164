//! Minibatch training loops, budget accounting and evaluation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::layers::{Mode, ParamRole};
use super::loss::{mean_cross_entropy, softmax_cross_entropy};
use super::network::{Gradients, Network};
use super::optim::Optimizer;
use crate::attacks::{pgd, NetworkModel, PgdConfig, ThreatModel};
use crate::data::{augment, Dataset};
use crate::grammar::AttributeList;

/// Decides whether training may take another update.
pub trait Budget {
    fn allows_step(&mut self, steps_done: u64) -> bool;
}

/// Budget counted in parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBudget(pub u64);

impl Budget for StepBudget {
    fn allows_step(&mut self, steps_done: u64) -> bool {
        steps_done < self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    Budget,
    EpochsCap,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_cap: usize,
    /// Epochs without control-loss improvement before stopping.
    pub patience: Option<usize>,
    /// Coefficient of the squared-norm penalty on conv and dense kernels.
    pub l2: f64,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: Option<f64>,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch size, patience and epoch cap from a decoded learning unit; the
    /// remaining fields start disabled.
    pub fn from_attributes(attrs: &AttributeList) -> Option<Self> {
        Some(TrainConfig {
            batch_size: attrs.number("batch_size")? as usize,
            epochs_cap: attrs.number("epochs").map_or(usize::MAX, |e| e as usize),
            patience: attrs.number("early_stop").map(|p| p as usize),
            l2: 0.0,
            grad_clip: None,
            augment: false,
            seed: 0,
        })
    }
}

/// Training-time adversary: each minibatch is replaced by its PGD
/// counterpart before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTraining {
    pub threat: ThreatModel,
    pub pgd: PgdConfig,
}

impl AdvTraining {
    /// 7 steps of `epsilon / 4` with a random start.
    pub fn pgd7(epsilon: f64) -> Self {
        AdvTraining {
            threat: ThreatModel::linf(epsilon),
            pgd: PgdConfig { random_start: true, ..PgdConfig::standard(7, epsilon) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch (a budget-truncated epoch included).
    pub train_loss: Vec<f64>,
    /// Control-set loss after each epoch; empty without a control set.
    pub control_loss: Vec<f64>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub nonfinite_seen: bool,
    /// Updates performed by this call.
    pub steps: u64,
}

/// Stream offset that separates the adversary's random starts from the
/// shuffle and augmentation stream.
const ADVERSARY_STREAM: u64 = 0x5ad7_e75a_1e5e_ed00;

/// Sum of squared conv and dense kernel weights.
pub fn l2_penalty(net: &Network<f32>) -> f64 {
    net.params()
        .iter()
        .zip(net.param_roles())
        .filter(|(_, r)| *r == ParamRole::Kernel)
        .map(|(p, _)| p.iter().map(|&w| w as f64 * w as f64).sum::<f64>())
        .sum()
}

/// Scales `grads` so that their global norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut Gradients<f32>, max_norm: f64) {
    let mut norm = grads.norm();
    let mut s = max_norm / norm;
    while norm > max_norm && norm.is_finite() {
        grads.scale(s as f32);
        norm = grads.norm();
        s = 1.0 - 1e-6;
    }
}

/// Trains `net` in place. Passing `adv` makes it adversarial training; with
/// zero attack steps the trajectory equals plain training bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &mut Network<f32>,
    opt: &mut Optimizer<f32>,
    train_set: &Dataset,
    control: &Dataset,
    tc: &TrainConfig,
    budget: &mut dyn Budget,
    adv: Option<&AdvTraining>,
) -> TrainReport {
    let mut rng = crate::Rng::seed_from_u64(tc.seed);
    let mut adv_rng = crate::Rng::seed_from_u64(tc.seed ^ ADVERSARY_STREAM);
    let roles = net.param_roles();
    let bs = tc.batch_size.max(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        control_loss: Vec::new(),
        epochs_run: 0,
        stop_reason: StopReason::EpochsCap,
        nonfinite_seen: false,
        steps: 0,
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..tc.epochs_cap {
        if !budget.allows_step(report.steps) || train_set.is_empty() {
            report.stop_reason = StopReason::Budget;
            break;
        }
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        let mut out_of_budget = false;
        for chunk in order.chunks(bs) {
            if !budget.allows_step(report.steps) {
                out_of_budget = true;
                break;
            }
            let mut x = train_set.images::<f32>(chunk);
            let y = train_set.labels_at(chunk);
            if tc.augment {
                augment(&mut x, &mut rng);
            }
            if let Some(a) = adv.filter(|a| a.pgd.steps > 0) {
                let model = NetworkModel { net: &*net, mode: Mode::Train };
                x = pgd(&model, &x, &y, &a.threat, &a.pgd, None, &mut adv_rng);
            }
            let tape = net.forward(&x, Mode::Train);
            let (mut loss, d) = mean_cross_entropy(tape.logits(), &y);
            if tc.l2 > 0.0 {
                loss += tc.l2 * l2_penalty(net);
            }
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
            if !loss.is_finite() {
                report.nonfinite_seen = true;
                break;
            }
            let mut grads = net.zero_grads();
            net.backward(&tape, &d, Some(&mut grads), false);
            if tc.l2 > 0.0 {
                let k = (2.0 * tc.l2) as f32;
                for ((g, p), r) in grads.params.iter_mut().zip(net.params()).zip(&roles) {
                    if *r == ParamRole::Kernel {
                        g.iter_mut().zip(p.iter()).for_each(|(gi, &w)| *gi += k * w);
                    }
                }
            }
            if let Some(c) = tc.grad_clip {
                clip_gradients(&mut grads, c);
            }
            net.commit_batch_stats(&tape);
            let lr = opt.config.lr_at(opt.updates, epoch);
            opt.step(net, &grads, lr);
            report.steps += 1;
        }
        if seen == 0 {
            report.stop_reason = StopReason::Budget;
            break;
        }
        report.epochs_run += 1;
        report.train_loss.push(sum / seen as f64);
        if report.nonfinite_seen {
            report.stop_reason = StopReason::NonFinite;
            break;
        }
        if !control.is_empty() {
            let cl = dataset_loss(net, control, bs);
            report.control_loss.push(cl);
            if !cl.is_finite() {
                report.nonfinite_seen = true;
                report.stop_reason = StopReason::NonFinite;
                break;
            }
            if cl < best {
                best = cl;
                stale = 0;
            } else {
                stale += 1;
                if tc.patience.is_some_and(|p| stale >= p) {
                    report.stop_reason = StopReason::EarlyStop;
                    break;
                }
            }
        }
        if out_of_budget {
            report.stop_reason = StopReason::Budget;
            break;
        }
    }
    report
}

/// Mean cross-entropy over a dataset, inference-mode statistics.
pub fn dataset_loss(net: &Network<f32>, ds: &Dataset, batch_size: usize) -> f64 {
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in rows.chunks(batch_size.max(1)) {
        let logits = net.predict(&ds.images::<f32>(chunk));
        let (l, _) = softmax_cross_entropy(&logits, &ds.labels_at(chunk));
        total += l.iter().sum::<f64>();
    }
    total / ds.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub n_correct: usize,
    pub correct: Vec<bool>,
    /// Count of predictions per class.
    pub histogram: Vec<usize>,
}

impl Evaluation {
    pub fn from_predictions(pred: &[usize], labels: &[usize], n_classes: usize) -> Self {
        let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, y)| p == y).collect();
        let mut histogram = vec![0; n_classes];
        for &p in pred {
            histogram[p] += 1;
        }
        let n_correct = correct.iter().filter(|&&c| c).count();
        let accuracy = if labels.is_empty() { 0.0 } else { n_correct as f64 / labels.len() as f64 };
        Evaluation { accuracy, n_correct, correct, histogram }
    }
}

/// Inference-mode predictions per sample.
pub fn predict_labels(net: &Network<f32>, ds: &Dataset, batch_size: usize) -> Vec<usize> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut pred = Vec::with_capacity(ds.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        pred.extend(net.predict(&ds.images::<f32>(chunk)).argmax_rows());
    }
    pred
}

pub fn evaluate(net: &Network<f32>, ds: &Dataset, batch_size: usize) -> Evaluation {
    let pred = predict_labels(net, ds, batch_size);
    Evaluation::from_predictions(&pred, &ds.labels_at(&(0..ds.len()).collect::<Vec<_>>()), net.n_outputs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::engine::layers::{Activation, LayerSpec};
    use crate::engine::optim::{LrSchedule, OptimizerConfig, OptimizerKind};

    fn xor(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = crate::Rng::seed_from_u64(seed);
        let mut px = Vec::new();
        let mut lb = Vec::new();
        for _ in 0..n {
            let a: bool = rng.random();
            let b: bool = rng.random();
            px.push(if a { 230 } else { 25 });
            px.push(if b { 230 } else { 25 });
            lb.push((a ^ b) as u8);
        }
        Dataset::new([1, 1, 2], px, lb, 2).unwrap()
    }

    fn mlp(seed: u64) -> Network<f32> {
        Network::sequential(
            [1, 1, 2],
            &[
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 16, bias: true },
                LayerSpec::Act(Activation::Relu),
                LayerSpec::Dense { units: 2, bias: true },
            ],
            &mut crate::Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn adam(net: &Network<f32>, lr: f64) -> Optimizer<f32> {
        Optimizer::new(
            OptimizerConfig { kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 }, lr, schedule: LrSchedule::Constant },
            net,
        )
    }

    fn tc(bs: usize, epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: bs, epochs_cap: epochs, patience: None, l2: 0.0, grad_clip: None, augment: false, seed: 3 }
    }

    #[test]
    fn xor_loss_decreases_and_is_reproducible() {
        let ds = xor(256, 1);
        let empty = ds.subset(&[]);
        let run = || {
            let mut net = mlp(7);
            let mut opt = adam(&net, 0.01);
            let r = train(&mut net, &mut opt, &ds, &empty, &tc(16, 5), &mut StepBudget(u64::MAX), None);
            (r, net)
        };
        let (r, net) = run();
        assert_eq!(r.epochs_run, 5);
        assert_eq!(r.stop_reason, StopReason::EpochsCap);
        for w in r.train_loss.windows(2) {
            assert!(w[1] < w[0] + 1e-3, "{:?}", r.train_loss);
        }
        assert!(r.train_loss[4] < r.train_loss[0]);
        let (r2, net2) = run();
        assert_eq!(r, r2);
        assert_eq!(net.params(), net2.params());
    }

    #[test]
    fn zero_budget_runs_nothing() {
        let ds = xor(32, 1);
        let mut net = mlp(0);
        let mut opt = adam(&net, 0.01);
        let r = train(&mut net, &mut opt, &ds, &ds, &tc(8, 10), &mut StepBudget(0), None);
        assert_eq!((r.stop_reason, r.epochs_run, r.steps), (StopReason::Budget, 0, 0));
    }

    #[test]
    fn budget_truncates_mid_epoch() {
        let ds = xor(64, 1);
        let mut net = mlp(0);
        let mut opt = adam(&net, 0.01);
        let r = train(&mut net, &mut opt, &ds, &ds, &tc(8, 10), &mut StepBudget(12), None);
        assert_eq!((r.stop_reason, r.epochs_run, r.steps), (StopReason::Budget, 2, 12));
        assert_eq!(r.control_loss.len(), 2);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let ds = xor(64, 1);
        let mut net = mlp(0);
        let mut opt = adam(&net, 0.01);
        opt.config.kind = OptimizerKind::Adam { beta1: 1.0, beta2: 0.999 };
        let r = train(&mut net, &mut opt, &ds, &ds, &tc(8, 10), &mut StepBudget(1000), None);
        assert_eq!(r.stop_reason, StopReason::NonFinite);
        assert!(r.nonfinite_seen);
        assert!(r.train_loss.iter().chain(&r.control_loss).any(|l| !l.is_finite()));
    }

    #[test]
    fn early_stop_on_stale_control_loss() {
        let ds = xor(64, 1);
        let mut net = mlp(0);
        let mut opt = adam(&net, 0.0);
        let mut c = tc(8, 100);
        c.patience = Some(3);
        let r = train(&mut net, &mut opt, &ds, &ds, &c, &mut StepBudget(u64::MAX), None);
        assert_eq!(r.stop_reason, StopReason::EarlyStop);
        assert_eq!(r.epochs_run, 4);
    }

    #[test]
    fn adversarial_with_zero_steps_matches_plain_training() {
        let ds = synth_dataset(8, 3, 8, 2).unwrap();
        let build = || {
            Network::sequential(
                [8, 8, 3],
                &[
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 8, bias: true },
                    LayerSpec::BatchNorm,
                    LayerSpec::Act(Activation::Swish),
                    LayerSpec::Dense { units: 3, bias: true },
                ],
                &mut crate::Rng::seed_from_u64(4),
            )
            .unwrap()
        };
        let mut c = tc(6, 3);
        c.augment = true;
        c.l2 = 1e-3;
        c.grad_clip = Some(0.5);
        let (mut a, mut b) = (build(), build());
        let (mut oa, mut ob) = (adam(&a, 0.01), adam(&b, 0.01));
        let mut zero = AdvTraining::pgd7(8.0 / 255.0);
        zero.pgd.steps = 0;
        let ra = train(&mut a, &mut oa, &ds, &ds, &c, &mut StepBudget(100), None);
        let rb = train(&mut b, &mut ob, &ds, &ds, &c, &mut StepBudget(100), Some(&zero));
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = Gradients { params: vec![vec![3.0f32, 4.0], vec![12.0]] };
        clip_gradients(&mut g, 5.0);
        assert!(g.norm() <= 5.0 + 1e-6);
        assert!((g.norm() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn penalty_ignores_biases() {
        let mut net = mlp(1);
        let before = l2_penalty(&net);
        let roles = net.param_roles();
        for (p, r) in net.params_mut().into_iter().zip(roles) {
            if r != ParamRole::Kernel {
                p.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(l2_penalty(&net), before);
    }

    #[test]
    fn evaluation_histogram_and_mask() {
        let e = Evaluation::from_predictions(&[1, 1, 1, 1], &[1, 0, 1, 2], 3);
        assert_eq!(e.histogram, vec![0, 4, 0]);
        assert_eq!(e.correct, vec![true, false, true, false]);
        assert_eq!(e.accuracy, 0.5);
        let c = Evaluation::from_predictions(&vec![0; 3500][..3062].iter().chain(&vec![1; 438]).copied().collect::<Vec<_>>(), &vec![0; 3500], 10);
        assert_eq!(c.n_correct, 3062);
        assert!((c.accuracy - 0.8749).abs() < 5e-5);
    }
}
