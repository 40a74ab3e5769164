//! Clean accuracy `C`, adversarial accuracy `A`, the weighted harmonic
//! score `F_beta`, the warm-up latch and ill-fitted detection.

use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, AttackModel, PgdConfig, ThreatModel};
use crate::data::Dataset;
use crate::engine::{Evaluation, TrainReport};

/// Fitness of an ill-fitted individual; below every attainable score.
pub const PENALTY: f64 = -1.0;

/// `(1 + b^2) C A / (C + b^2 A)`, and 0 when the denominator vanishes.
pub fn f_beta(c: f64, a: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = c + b2 * a;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * c * a / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Warmup,
    Fbeta,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Warmup => "warmup",
            Regime::Fbeta => "fbeta",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IllFitted {
    NonFiniteLoss,
    TrivialClassifier,
    InvalidPlan,
}

impl fmt::Display for IllFitted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IllFitted::NonFiniteLoss => "non-finite-loss",
            IllFitted::TrivialClassifier => "trivial-classifier",
            IllFitted::InvalidPlan => "invalid-plan",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub c: f64,
    /// Set only when the adversarial evaluation ran.
    pub a: Option<f64>,
    pub f: f64,
    pub n: usize,
    pub n_correct: usize,
    pub ill_fitted: Option<IllFitted>,
    pub regime: Regime,
}

impl FitnessReport {
    pub fn penalized(reason: IllFitted, regime: Regime) -> Self {
        FitnessReport { c: 0.0, a: None, f: PENALTY, n: 0, n_correct: 0, ill_fitted: Some(reason), regime }
    }
}

/// Latches to `F_beta` once a generation's mean fitness reaches `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupController {
    pub tau: f64,
    pub transitioned: bool,
}

impl WarmupController {
    pub fn new(tau: f64) -> Self {
        WarmupController { tau, transitioned: false }
    }

    pub fn regime(&self) -> Regime {
        if self.transitioned {
            Regime::Fbeta
        } else {
            Regime::Warmup
        }
    }

    /// Feeds one generation's fitness values (penalties included); returns
    /// true on the generation that flips the latch.
    pub fn update(&mut self, fitnesses: &[f64]) -> bool {
        if self.transitioned || fitnesses.is_empty() {
            return false;
        }
        let mean = fitnesses.iter().sum::<f64>() / fitnesses.len() as f64;
        self.transitioned = mean >= self.tau;
        self.transitioned
    }
}

/// Non-finite training history, or one class taking strictly more than
/// `(1 - 1/n_classes)` of the predictions.
pub fn detect_ill_fitted(report: Option<&TrainReport>, histogram: &[usize], n_classes: usize) -> Option<IllFitted> {
    if let Some(r) = report {
        if r.nonfinite_seen || r.train_loss.iter().chain(&r.control_loss).any(|l| !l.is_finite()) {
            return Some(IllFitted::NonFiniteLoss);
        }
    }
    let n: usize = histogram.iter().sum();
    let top = histogram.iter().copied().max().unwrap_or(0);
    // top / n > 1 - 1/k  <=>  k * top > (k - 1) * n, in exact integers
    if n > 0 && n_classes > 0 && n_classes * top > (n_classes - 1) * n {
        return Some(IllFitted::TrivialClassifier);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessAttack {
    Fgsm,
    Pgd(PgdConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessConfig {
    pub beta: f64,
    pub threat: ThreatModel,
    pub attack: FitnessAttack,
    pub batch_size: usize,
    /// Seeds attack random starts, when the attack has any.
    pub seed: u64,
}

impl FitnessConfig {
    /// FGSM at `epsilon = 8/255` (L-inf), batches of 128, `beta = 4`.
    pub fn standard() -> Self {
        FitnessConfig {
            beta: 4.0,
            threat: ThreatModel::linf(8.0 / 255.0),
            attack: FitnessAttack::Fgsm,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Clean evaluation through the model's logits, in batches.
pub fn clean_evaluation<M: AttackModel + ?Sized>(model: &M, ds: &Dataset, batch_size: usize) -> Evaluation {
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut pred = Vec::with_capacity(ds.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        pred.extend(model.logits(&ds.images::<f32>(chunk)).argmax_rows());
    }
    Evaluation::from_predictions(&pred, &ds.labels_at(&rows), model.n_classes())
}

/// Attacks only the samples marked correct and returns `(A, N_c)`, with
/// `A = 0` when nothing is correct.
pub fn adversarial_accuracy<M: AttackModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    correct: &[bool],
    cfg: &FitnessConfig,
) -> (f64, usize) {
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| correct[i]).collect();
    if rows.is_empty() {
        return (0.0, 0);
    }
    let mut rng = crate::Rng::seed_from_u64(cfg.seed);
    let mut survived = 0;
    for chunk in rows.chunks(cfg.batch_size.max(1)) {
        let x = ds.images::<f32>(chunk);
        let y = ds.labels_at(chunk);
        let adv = match &cfg.attack {
            FitnessAttack::Fgsm => fgsm(model, &x, &y, &cfg.threat),
            FitnessAttack::Pgd(p) => pgd(model, &x, &y, &cfg.threat, p, None, &mut rng),
        };
        let pred = model.logits(&adv).argmax_rows();
        survived += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    (survived as f64 / rows.len() as f64, rows.len())
}

/// Full fitness of a trained individual. Ill-fitted individuals get the
/// penalty and are never attacked; in warm-up `F = C` and no attack runs.
pub fn evaluate_individual<M: AttackModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    cfg: &FitnessConfig,
    regime: Regime,
    train: Option<&TrainReport>,
) -> FitnessReport {
    if let Some(reason @ IllFitted::NonFiniteLoss) = detect_ill_fitted(train, &[], model.n_classes()) {
        return FitnessReport::penalized(reason, regime);
    }
    let ev = clean_evaluation(model, ds, cfg.batch_size);
    let base = FitnessReport {
        c: ev.accuracy,
        a: None,
        f: ev.accuracy,
        n: ds.len(),
        n_correct: ev.n_correct,
        ill_fitted: None,
        regime,
    };
    if let Some(reason) = detect_ill_fitted(None, &ev.histogram, model.n_classes()) {
        return FitnessReport { f: PENALTY, ill_fitted: Some(reason), ..base };
    }
    match regime {
        Regime::Warmup => base,
        Regime::Fbeta => {
            let (a, _) = adversarial_accuracy(model, ds, &ev.correct, cfg);
            FitnessReport { a: Some(a), f: f_beta(ev.accuracy, a, cfg.beta), ..base }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Objective;
    use crate::engine::StopReason;
    use crate::Tensor;
    use alloc::vec;
    use core::cell::Cell;

    #[test]
    fn f_beta_reference_values() {
        assert!((f_beta(0.8749, 0.3325, 4.0) - 0.7983).abs() < 5e-4);
        assert!((f_beta(0.6, 0.3, 1.0) - 0.4).abs() < 1e-12);
        assert_eq!(f_beta(0.7, 0.0, 4.0), 0.0);
        assert_eq!(f_beta(0.0, 0.0, 4.0), 0.0);
        for v in [0.1, 0.5, 0.93] {
            assert!((f_beta(v, v, 4.0) - v).abs() < 1e-12);
        }
        assert!((f_beta(0.7, 0.3, 1e3) - 0.7).abs() < 1e-5);
        assert!((f_beta(0.7, 0.3, 1e-4) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn warmup_latch() {
        let mut w = WarmupController::new(0.8);
        assert!(!w.update(&[0.79, 0.79]));
        assert!(w.update(&[0.85, 0.82, 0.80, 0.81]));
        assert!(!w.update(&[0.1]));
        assert!(w.transitioned);
        let mut w = WarmupController::new(0.8);
        assert!(!w.update(&[0.95, 0.95, PENALTY]));
    }

    fn report(train: &[f64]) -> TrainReport {
        TrainReport {
            train_loss: train.to_vec(),
            control_loss: vec![],
            epochs_run: train.len(),
            stop_reason: StopReason::Budget,
            nonfinite_seen: train.iter().any(|l| !l.is_finite()),
            steps: 1,
        }
    }

    #[test]
    fn ill_fitted_rules() {
        let mut h = vec![1usize; 10];
        h[0] = 91;
        assert_eq!(detect_ill_fitted(None, &h, 10), Some(IllFitted::TrivialClassifier));
        h[0] = 90;
        h[1] = 2;
        assert_eq!(h.iter().sum::<usize>(), 100);
        assert_eq!(detect_ill_fitted(None, &h, 10), None);
        assert_eq!(detect_ill_fitted(Some(&report(&[2.1, f64::NAN])), &h, 10), Some(IllFitted::NonFiniteLoss));
    }

    /// Labels are the argmax of the first three pixels; counts attacks.
    struct Probe {
        constant: Option<usize>,
        attacks: Cell<usize>,
    }

    impl AttackModel for Probe {
        fn n_classes(&self) -> usize {
            3
        }
        fn logits(&self, x: &Tensor<f32>) -> Tensor<f32> {
            let mut z = Tensor::zeros(&[x.batch(), 3]);
            for i in 0..x.batch() {
                match self.constant {
                    Some(c) => z.sample_mut(i)[c] = 1.0,
                    None => z.sample_mut(i).copy_from_slice(&x.sample(i)[..3]),
                }
            }
            z
        }
        fn loss_gradient(&self, x: &Tensor<f32>, _y: &[usize], _o: Objective<'_>) -> (Vec<f64>, Tensor<f32>) {
            self.attacks.set(self.attacks.get() + 1);
            (vec![0.0; x.batch()], Tensor::zeros(x.shape()))
        }
    }

    fn probe_data() -> Dataset {
        // 1x1x3 images; class k has pixel k bright, except two mislabelled
        let mut px = Vec::new();
        let mut lb = Vec::new();
        for i in 0..12u8 {
            let k = i % 3;
            px.extend((0..3).map(|j| if j == k { 200 } else { 10 }));
            lb.push(if i < 2 { (k + 1) % 3 } else { k });
        }
        Dataset::new([1, 1, 3], px, lb, 3).unwrap()
    }

    #[test]
    fn penalized_individuals_are_not_attacked() {
        let ds = probe_data();
        let cfg = FitnessConfig::standard();
        let p = Probe { constant: None, attacks: Cell::new(0) };
        let r = evaluate_individual(&p, &ds, &cfg, Regime::Fbeta, Some(&report(&[1.0, f64::INFINITY])));
        assert_eq!((r.f, r.ill_fitted, p.attacks.get()), (PENALTY, Some(IllFitted::NonFiniteLoss), 0));
        let c = Probe { constant: Some(1), attacks: Cell::new(0) };
        let r = evaluate_individual(&c, &ds, &cfg, Regime::Fbeta, Some(&report(&[1.0])));
        assert_eq!((r.f, r.ill_fitted, c.attacks.get()), (PENALTY, Some(IllFitted::TrivialClassifier), 0));
    }

    #[test]
    fn regimes() {
        let ds = probe_data();
        let cfg = FitnessConfig::standard();
        let p = Probe { constant: None, attacks: Cell::new(0) };
        let w = evaluate_individual(&p, &ds, &cfg, Regime::Warmup, None);
        assert_eq!((w.n_correct, w.a, p.attacks.get()), (10, None, 0));
        assert!((w.f - 10.0 / 12.0).abs() < 1e-12);
        // zero gradients leave the inputs unchanged, so A = 1
        let f = evaluate_individual(&p, &ds, &cfg, Regime::Fbeta, None);
        assert_eq!(f.a, Some(1.0));
        assert!((f.f - f_beta(10.0 / 12.0, 1.0, 4.0)).abs() < 1e-12);
        assert_eq!(p.attacks.get(), 1);
        assert_eq!(adversarial_accuracy(&p, &ds, &[false; 12], &cfg), (0.0, 0));
        assert_eq!(p.attacks.get(), 1);
    }
}
