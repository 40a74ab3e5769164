//! White-box gradient attacks in single precision: FGSM/FGM, PGD, APGD with
//! CE and DLR losses, and an APGD-CE + APGD-T ensemble.
//!
//! Every returned batch satisfies its threat model exactly: after the float
//! arithmetic, coordinates are nudged by whole ulps until the perturbation,
//! measured in double precision, is within `epsilon`, and pixels stay in
//! `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::loss::softmax_cross_entropy;
use crate::engine::{Mode, Network};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

/// Perturbation set `{x' : ||x' - x|| <= epsilon} ∩ [0, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
}

impl ThreatModel {
    pub fn linf(epsilon: f64) -> Self {
        ThreatModel { norm: Norm::Linf, epsilon }
    }

    pub fn l2(epsilon: f64) -> Self {
        ThreatModel { norm: Norm::L2, epsilon }
    }

    /// Perturbation size of one sample, in double precision.
    pub fn distance(&self, x0: &[f32], x: &[f32]) -> f64 {
        let d = x0.iter().zip(x).map(|(&a, &b)| b as f64 - a as f64);
        match self.norm {
            Norm::Linf => d.fold(0.0, |m, v| m.max(v.abs())),
            Norm::L2 => libm::sqrt(d.map(|v| v * v).sum()),
        }
    }

    /// Whether every sample of `x` lies in the threat set around `x0`.
    pub fn contains(&self, x0: &Tensor<f32>, x: &Tensor<f32>) -> bool {
        x0.shape() == x.shape()
            && x.data().iter().all(|&v| (0.0..=1.0).contains(&v))
            && (0..x0.batch()).all(|i| self.distance(x0.sample(i), x.sample(i)) <= self.epsilon)
    }
}

/// Loss an attack ascends. Targeted variants carry one target per sample.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Ce,
    /// `-CE(z, t)`: pushes towards the target class.
    CeTargeted(&'a [usize]),
    Dlr,
    DlrTargeted(&'a [usize]),
}

/// What an attack needs from a classifier.
pub trait AttackModel {
    fn n_classes(&self) -> usize;

    fn logits(&self, x: &Tensor<f32>) -> Tensor<f32>;

    /// Per-sample objective values and the gradient of their sum with
    /// respect to `x`.
    fn loss_gradient(&self, x: &Tensor<f32>, y: &[usize], objective: Objective<'_>) -> (Vec<f64>, Tensor<f32>);
}

/// A network seen by an attack. Attacks on a frozen model use inference
/// mode; adversarial training attacks with batch statistics, without
/// updating the running statistics.
pub struct NetworkModel<'a> {
    pub net: &'a Network<f32>,
    pub mode: Mode,
}

impl<'a> NetworkModel<'a> {
    pub fn inference(net: &'a Network<f32>) -> Self {
        NetworkModel { net, mode: Mode::Inference }
    }
}

/// Per-sample objective values and their gradients with respect to each
/// sample's logits.
pub fn objective_on_logits(logits: &Tensor<f32>, y: &[usize], objective: Objective<'_>) -> (Vec<f64>, Tensor<f32>) {
    match objective {
        Objective::Ce => softmax_cross_entropy(logits, y),
        Objective::CeTargeted(t) => {
            let (l, mut g) = softmax_cross_entropy(logits, t);
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
            (l.into_iter().map(|v| -v).collect(), g)
        }
        Objective::Dlr => dlr_with_grad(logits, y, None),
        Objective::DlrTargeted(t) => dlr_with_grad(logits, y, Some(t)),
    }
}

impl AttackModel for NetworkModel<'_> {
    fn n_classes(&self) -> usize {
        self.net.n_outputs()
    }

    fn logits(&self, x: &Tensor<f32>) -> Tensor<f32> {
        match self.mode {
            Mode::Inference => self.net.predict(x),
            Mode::Train => self.net.forward(x, Mode::Train).logits().clone(),
        }
    }

    fn loss_gradient(&self, x: &Tensor<f32>, y: &[usize], objective: Objective<'_>) -> (Vec<f64>, Tensor<f32>) {
        let tape = self.net.forward(x, self.mode);
        let (losses, d) = objective_on_logits(tape.logits(), y, objective);
        let dx = self.net.backward(&tape, &d, None, true).expect("input gradient requested");
        (losses, dx)
    }
}

/// Descending order of a logit row; ties keep the lower index first.
fn sorted_desc(z: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Difference-of-logits-ratio loss per sample.
///
/// Untargeted: `-(z_y - max_{i != y} z_i) / (z_p1 - z_p3)`. Targeted:
/// `-(z_y - z_t) / (z_p1 - (z_p3 + z_p4) / 2)`, where `p` sorts the logits in
/// descending order. With three classes the targeted denominator falls back
/// to `z_p1 - z_p3`. A zero denominator gives 0.
pub fn dlr_loss(logits: &Tensor<f32>, y: &[usize], target: Option<&[usize]>) -> Vec<f64> {
    dlr_with_grad(logits, y, target).0
}

fn dlr_with_grad(logits: &Tensor<f32>, y: &[usize], target: Option<&[usize]>) -> (Vec<f64>, Tensor<f32>) {
    let k = logits.sample_len();
    assert!(k >= 3, "DLR needs at least three classes");
    let mut grad = Tensor::zeros(logits.shape());
    let mut losses = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let z: Vec<f64> = logits.sample(i).iter().map(|&v| v as f64).collect();
        let p = sorted_desc(&z);
        let yi = y[i];
        // numerator a = z_y - z_other, denominator d
        let other = match target {
            Some(t) => t[i],
            None => *p.iter().find(|&&j| j != yi).expect("k >= 3"),
        };
        let mut dd = vec![0.0f64; k];
        let d = match target {
            Some(_) if k >= 4 => {
                dd[p[0]] += 1.0;
                dd[p[2]] -= 0.5;
                dd[p[3]] -= 0.5;
                z[p[0]] - (z[p[2]] + z[p[3]]) / 2.0
            }
            _ => {
                dd[p[0]] += 1.0;
                dd[p[2]] -= 1.0;
                z[p[0]] - z[p[2]]
            }
        };
        let a = z[yi] - z[other];
        if d == 0.0 {
            losses.push(0.0);
            continue;
        }
        losses.push(-a / d);
        let g = grad.sample_mut(i);
        let mut da = vec![0.0f64; k];
        da[yi] += 1.0;
        da[other] -= 1.0;
        for j in 0..k {
            g[j] = (-(da[j] * d - a * dd[j]) / (d * d)) as f32;
        }
    }
    (losses, grad)
}

/// Snaps `v` onto the nearest `f32` with `|v - x0| <= eps` in double
/// precision; `v` must already lie in `[0, 1]`.
#[inline]
fn fit_linf(v: f32, x0: f32, eps: f64) -> f32 {
    let (lo, hi) = (x0 as f64 - eps, x0 as f64 + eps);
    if v as f64 > hi {
        let mut w = hi as f32;
        while w as f64 > hi {
            w = w.next_down();
        }
        w
    } else if (v as f64) < lo {
        let mut w = lo as f32;
        while (w as f64) < lo {
            w = w.next_up();
        }
        w
    } else {
        v
    }
}

/// Projects one sample onto the threat set around `x0`.
fn project(tm: &ThreatModel, x0: &[f32], v: &mut [f32]) {
    let eps = tm.epsilon;
    match tm.norm {
        Norm::Linf => {
            let e = eps as f32;
            for (vi, &xi) in v.iter_mut().zip(x0) {
                let c = vi.clamp(xi - e, xi + e).clamp(0.0, 1.0);
                *vi = fit_linf(c, xi, eps);
            }
        }
        Norm::L2 => {
            let norm = tm.distance(x0, v);
            let scale = if norm > eps { eps / norm } else { 1.0 };
            for (vi, &xi) in v.iter_mut().zip(x0) {
                let d = (*vi as f64 - xi as f64) * scale;
                *vi = ((xi as f64 + d) as f32).clamp(0.0, 1.0);
            }
            // Rounding may leave the norm a hair above eps; shrink towards
            // x0 until it is not. Clipping to [0, 1] never grows it.
            let mut shrink = 1.0 - f32::EPSILON as f64;
            while tm.distance(x0, v) > eps {
                for (vi, &xi) in v.iter_mut().zip(x0) {
                    let d = (*vi as f64 - xi as f64) * shrink;
                    let mut nv = ((xi as f64 + d) as f32).clamp(0.0, 1.0);
                    if nv == *vi && nv != xi {
                        nv = if nv > xi { nv.next_down() } else { nv.next_up() };
                    }
                    *vi = nv;
                }
                shrink *= shrink;
            }
        }
    }
}

fn sign(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + size * dir(g)` for one sample, where `dir` is the sign for L-inf and
/// the unit vector `g / ||g||` for L2 (zero gradient, zero step).
fn ascend(tm: &ThreatModel, x: &[f32], g: &[f32], size: f32, out: &mut [f32]) {
    match tm.norm {
        Norm::Linf => {
            for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
                *o = xi + size * sign(gi);
            }
        }
        Norm::L2 => {
            let n = libm::sqrt(g.iter().map(|&v| v as f64 * v as f64).sum());
            for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
                *o = if n > 0.0 { (xi as f64 + size as f64 * gi as f64 / n) as f32 } else { xi };
            }
        }
    }
}

/// Single-step attack: `x + epsilon * sign(grad)` (L-inf) or
/// `x + epsilon * grad / ||grad||` (L2), clipped to `[0, 1]`.
pub fn fgsm<M: AttackModel + ?Sized>(model: &M, x: &Tensor<f32>, y: &[usize], tm: &ThreatModel) -> Tensor<f32> {
    let (_, g) = model.loss_gradient(x, y, Objective::Ce);
    let mut out = x.clone();
    for i in 0..x.batch() {
        let (xs, gs) = (x.sample(i), g.sample(i));
        let os = out.sample_mut(i);
        ascend(tm, xs, gs, tm.epsilon as f32, os);
        project(tm, xs, os);
    }
    out
}

/// L2 single-step attack; same as [`fgsm`] under an L2 threat model.
pub fn fgm<M: AttackModel + ?Sized>(model: &M, x: &Tensor<f32>, y: &[usize], epsilon: f64) -> Tensor<f32> {
    fgsm(model, x, y, &ThreatModel::l2(epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    Ce,
    Dlr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub loss: AttackLoss,
}

impl PgdConfig {
    /// `steps` sign steps of `epsilon / 4`, no random start, CE loss.
    pub fn standard(steps: usize, epsilon: f64) -> Self {
        PgdConfig { steps, step_size: epsilon / 4.0, random_start: false, loss: AttackLoss::Ce }
    }
}

fn objective<'a>(loss: AttackLoss, targets: Option<&'a [usize]>) -> Objective<'a> {
    match (loss, targets) {
        (AttackLoss::Ce, None) => Objective::Ce,
        (AttackLoss::Ce, Some(t)) => Objective::CeTargeted(t),
        (AttackLoss::Dlr, None) => Objective::Dlr,
        (AttackLoss::Dlr, Some(t)) => Objective::DlrTargeted(t),
    }
}

/// Uniform start inside the threat set: per-coordinate uniform for L-inf,
/// uniform in the ball for L2.
pub fn random_start<R: Rng + ?Sized>(x: &Tensor<f32>, tm: &ThreatModel, rng: &mut R) -> Tensor<f32> {
    let mut out = x.clone();
    let e = tm.epsilon;
    for i in 0..x.batch() {
        let xs = x.sample(i);
        let os = out.sample_mut(i);
        match tm.norm {
            Norm::Linf => {
                for (o, &xi) in os.iter_mut().zip(xs) {
                    *o = (xi as f64 + rng.random_range(-e..=e)) as f32;
                }
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..xs.len()).map(|_| StandardNormal.sample(rng)).collect();
                let n = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>()).max(f64::MIN_POSITIVE);
                let u: f64 = rng.random_range(0.0..1.0);
                let r = e * libm::pow(u, 1.0 / xs.len() as f64);
                for ((o, &xi), d) in os.iter_mut().zip(xs).zip(&dir) {
                    *o = (xi as f64 + r * d / n) as f32;
                }
            }
        }
        project(tm, xs, os);
    }
    out
}

/// Projected gradient ascent from `x` (or a random start), returning the
/// final iterate. With `targets`, the loss is taken towards the targets.
pub fn pgd<M: AttackModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<f32>,
    y: &[usize],
    tm: &ThreatModel,
    cfg: &PgdConfig,
    targets: Option<&[usize]>,
    rng: &mut R,
) -> Tensor<f32> {
    let mut cur = if cfg.random_start { random_start(x, tm, rng) } else { x.clone() };
    let step = cfg.step_size as f32;
    let mut next = cur.clone();
    for _ in 0..cfg.steps {
        let (_, g) = model.loss_gradient(&cur, y, objective(cfg.loss, targets));
        for i in 0..x.batch() {
            let os = next.sample_mut(i);
            ascend(tm, cur.sample(i), g.sample(i), step, os);
            project(tm, x.sample(i), os);
        }
        core::mem::swap(&mut cur, &mut next);
    }
    cur
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApgdConfig {
    pub steps: usize,
    pub loss: AttackLoss,
    /// Momentum weight on the new gradient step.
    pub alpha: f64,
    /// Initial step size, as a multiple of epsilon.
    pub initial_step: f64,
    /// Oscillation threshold: a checkpoint halves the step when the loss
    /// increased in at most this fraction of the interval's steps.
    pub rho: f64,
    pub random_start: bool,
}

impl ApgdConfig {
    pub fn new(steps: usize, loss: AttackLoss) -> Self {
        ApgdConfig { steps, loss, alpha: 0.75, initial_step: 2.0, rho: 0.75, random_start: false }
    }
}

/// Checkpoint interval bookkeeping: the first interval is 22% of the
/// budget, later ones shrink by 3% down to a floor of 6%.
#[derive(Debug, Clone, Copy)]
struct Schedule {
    first: usize,
    decrement: usize,
    floor: usize,
}

impl Schedule {
    fn new(steps: usize) -> Self {
        let frac = |f: f64| ((f * steps as f64) as usize).max(1);
        Schedule { first: frac(0.22), decrement: frac(0.03), floor: frac(0.06) }
    }
}

/// Per-sample outcome of an APGD run.
#[derive(Debug, Clone)]
pub struct ApgdResult {
    /// Misclassifying iterate if one was found, else the highest-loss one.
    pub x_adv: Tensor<f32>,
    pub best_loss: Vec<f64>,
    pub initial_loss: Vec<f64>,
    /// Whether any iterate (or the start) was misclassified.
    pub fooled: Vec<bool>,
}

/// Auto-PGD: momentum steps with per-sample step-size halving at
/// checkpoints, restarting from the best iterate when it halves.
pub fn apgd<M: AttackModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<f32>,
    y: &[usize],
    tm: &ThreatModel,
    cfg: &ApgdConfig,
    targets: Option<&[usize]>,
    rng: &mut R,
) -> ApgdResult {
    let n = x.batch();
    let obj = objective(cfg.loss, targets);
    let mut cur = if cfg.random_start { random_start(x, tm, rng) } else { x.clone() };
    let (mut loss, mut grad) = model.loss_gradient(&cur, y, obj);
    let mut fooled = misclassified(model, &cur, y);
    let mut x_fooled = cur.clone();
    let mut x_best = cur.clone();
    let mut grad_best = grad.clone();
    let mut loss_best = loss.clone();
    let initial_loss = loss.clone();
    let mut eta = vec![(cfg.initial_step * tm.epsilon) as f32; n];
    let mut prev = cur.clone();
    // history[t] is the loss after t steps (history[0] at the start)
    let mut history: Vec<Vec<f64>> = vec![loss.clone()];
    let sched = Schedule::new(cfg.steps);
    let mut interval = sched.first;
    let mut since_check = 0;
    let mut best_at_check = loss_best.clone();
    let mut reduced_at_check = vec![true; n];

    let mut z = cur.clone();
    let mut next = cur.clone();
    for step in 0..cfg.steps {
        let a = if step == 0 { 1.0f32 } else { cfg.alpha as f32 };
        for i in 0..n {
            let (x0, xk, xp) = (x.sample(i), cur.sample(i), prev.sample(i));
            let zs = z.sample_mut(i);
            ascend(tm, xk, grad.sample(i), eta[i], zs);
            project(tm, x0, zs);
            let ns = next.sample_mut(i);
            for j in 0..ns.len() {
                ns[j] = xk[j] + a * (zs[j] - xk[j]) + (1.0 - a) * (xk[j] - xp[j]);
            }
            project(tm, x0, ns);
        }
        core::mem::swap(&mut prev, &mut cur);
        core::mem::swap(&mut cur, &mut next);

        let (l, g) = model.loss_gradient(&cur, y, obj);
        loss = l;
        grad = g;
        let wrong = misclassified(model, &cur, y);
        for i in 0..n {
            if wrong[i] {
                fooled[i] = true;
                x_fooled.sample_mut(i).copy_from_slice(cur.sample(i));
            }
            if loss[i] > loss_best[i] {
                loss_best[i] = loss[i];
                x_best.sample_mut(i).copy_from_slice(cur.sample(i));
                grad_best.sample_mut(i).copy_from_slice(grad.sample(i));
            }
        }
        history.push(loss.clone());

        since_check += 1;
        if since_check == interval {
            let t = history.len() - 1;
            for i in 0..n {
                let increases = (0..interval).filter(|&c| history[t - c][i] > history[t - c - 1][i]).count();
                let oscillating = increases as f64 <= interval as f64 * cfg.rho;
                let stalled = !reduced_at_check[i] && best_at_check[i] >= loss_best[i];
                let halve = oscillating || stalled;
                reduced_at_check[i] = halve;
                if halve {
                    eta[i] /= 2.0;
                    cur.sample_mut(i).copy_from_slice(x_best.sample(i));
                    grad.sample_mut(i).copy_from_slice(grad_best.sample(i));
                }
            }
            best_at_check.clone_from(&loss_best);
            interval = interval.saturating_sub(sched.decrement).max(sched.floor);
            since_check = 0;
        }
    }

    let mut x_adv = x_best;
    for i in 0..n {
        if fooled[i] {
            x_adv.sample_mut(i).copy_from_slice(x_fooled.sample(i));
        }
    }
    ApgdResult { x_adv, best_loss: loss_best, initial_loss, fooled }
}

fn misclassified<M: AttackModel + ?Sized>(model: &M, x: &Tensor<f32>, y: &[usize]) -> Vec<bool> {
    let pred = model.logits(x).argmax_rows();
    pred.iter().zip(y).map(|(p, t)| p != t).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaConfig {
    pub steps: usize,
    /// At most this many target classes for APGD-T.
    pub max_targets: usize,
}

impl Default for AaConfig {
    fn default() -> Self {
        AaConfig { steps: 100, max_targets: 9 }
    }
}

/// Outcome of the two-attack ensemble.
#[derive(Debug, Clone)]
pub struct AaResult {
    pub x_adv: Tensor<f32>,
    pub clean_correct: Vec<bool>,
    pub flipped_ce: Vec<bool>,
    pub flipped_t: Vec<bool>,
    pub robust: Vec<bool>,
    /// APGD-T runs performed (one per target rank with samples left).
    pub targeted_runs: usize,
}

impl AaResult {
    pub fn robust_accuracy(&self) -> f64 {
        self.robust.iter().filter(|&&r| r).count() as f64 / self.robust.len().max(1) as f64
    }
}

/// Targets for APGD-T rank `r`: the `r`-th most likely incorrect class by
/// clean logits.
fn ranked_target(clean_logits: &[f32], y: usize, rank: usize) -> usize {
    let z: Vec<f64> = clean_logits.iter().map(|&v| v as f64).collect();
    sorted_desc(&z).into_iter().filter(|&j| j != y).nth(rank).expect("rank below n_classes - 1")
}

/// APGD-CE, then APGD-T on the samples that survived, once per target rank
/// (top `n_classes - 1` incorrect classes, capped at `max_targets`). A
/// sample is robust iff it is classified correctly and no attack flips it.
pub fn aa_lite<M: AttackModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<f32>,
    y: &[usize],
    tm: &ThreatModel,
    cfg: &AaConfig,
    rng: &mut R,
) -> AaResult {
    let n = x.batch();
    let clean = model.logits(x);
    let pred = clean.argmax_rows();
    let clean_correct: Vec<bool> = pred.iter().zip(y).map(|(p, t)| p == t).collect();
    let mut robust = clean_correct.clone();
    let mut x_adv = x.clone();
    let mut flipped_ce = vec![false; n];
    let mut flipped_t = vec![false; n];
    let mut targeted_runs = 0;

    let live: Vec<usize> = (0..n).filter(|&i| robust[i]).collect();
    if !live.is_empty() {
        let xs = x.select(&live);
        let ys: Vec<usize> = live.iter().map(|&i| y[i]).collect();
        let r = apgd(model, &xs, &ys, tm, &ApgdConfig::new(cfg.steps, AttackLoss::Ce), None, rng);
        for (k, &i) in live.iter().enumerate() {
            if r.fooled[k] {
                robust[i] = false;
                flipped_ce[i] = true;
                x_adv.sample_mut(i).copy_from_slice(r.x_adv.sample(k));
            }
        }
    }

    let n_targets = model.n_classes().saturating_sub(1).min(cfg.max_targets);
    for rank in 0..n_targets {
        let live: Vec<usize> = (0..n).filter(|&i| robust[i]).collect();
        if live.is_empty() {
            break;
        }
        targeted_runs += 1;
        let xs = x.select(&live);
        let ys: Vec<usize> = live.iter().map(|&i| y[i]).collect();
        let ts: Vec<usize> = live.iter().map(|&i| ranked_target(clean.sample(i), y[i], rank)).collect();
        let r = apgd(model, &xs, &ys, tm, &ApgdConfig::new(cfg.steps, AttackLoss::Dlr), Some(&ts), rng);
        for (k, &i) in live.iter().enumerate() {
            if r.fooled[k] {
                robust[i] = false;
                flipped_t[i] = true;
                x_adv.sample_mut(i).copy_from_slice(r.x_adv.sample(k));
            }
        }
    }
    AaResult { x_adv, clean_correct, flipped_ce, flipped_t, robust, targeted_runs }
}

/// Standalone APGD-T over all target ranks on the clean-correct samples;
/// returns the per-sample robust flags.
pub fn apgd_targeted_robust<M: AttackModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<f32>,
    y: &[usize],
    tm: &ThreatModel,
    cfg: &AaConfig,
    rng: &mut R,
) -> Vec<bool> {
    let clean = model.logits(x);
    let mut robust: Vec<bool> = clean.argmax_rows().iter().zip(y).map(|(p, t)| p == t).collect();
    let n_targets = model.n_classes().saturating_sub(1).min(cfg.max_targets);
    for rank in 0..n_targets {
        let live: Vec<usize> = (0..y.len()).filter(|&i| robust[i]).collect();
        if live.is_empty() {
            break;
        }
        let xs = x.select(&live);
        let ys: Vec<usize> = live.iter().map(|&i| y[i]).collect();
        let ts: Vec<usize> = live.iter().map(|&i| ranked_target(clean.sample(i), y[i], rank)).collect();
        let r = apgd(model, &xs, &ys, tm, &ApgdConfig::new(cfg.steps, AttackLoss::Dlr), Some(&ts), rng);
        for (k, &i) in live.iter().enumerate() {
            if r.fooled[k] {
                robust[i] = false;
            }
        }
    }
    robust
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linear two-pixel model with a fixed gradient direction.
    struct Fixed {
        grad: Vec<f32>,
    }

    impl AttackModel for Fixed {
        fn n_classes(&self) -> usize {
            3
        }
        fn logits(&self, x: &Tensor<f32>) -> Tensor<f32> {
            Tensor::zeros(&[x.batch(), 3])
        }
        fn loss_gradient(&self, x: &Tensor<f32>, _y: &[usize], _o: Objective<'_>) -> (Vec<f64>, Tensor<f32>) {
            let mut g = Tensor::zeros(x.shape());
            for i in 0..x.batch() {
                g.sample_mut(i).copy_from_slice(&self.grad);
            }
            (vec![0.0; x.batch()], g)
        }
    }

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn linf_snap_near_zero_is_exact() {
        // x0 - eps rounds to 0 in f32 while the exact bound is a hair above 0
        let eps = 8.0 / 255.0;
        let x0 = (8.0f64 / 255.0) as f32;
        let v = fit_linf(0.0, x0, eps);
        assert!(v as f64 >= x0 as f64 - eps);
        assert!(v.next_down() as f64 - (x0 as f64 - eps) < 0.0);
        let tm = ThreatModel::linf(eps);
        let mut w = vec![0.0f32, 1.0];
        project(&tm, &[x0, 1.0 - x0], &mut w);
        assert!(tm.distance(&[x0, 1.0 - x0], &w) <= eps && w.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fgsm_hand_values() {
        let m = Fixed { grad: vec![1.0, 1.0, 0.0] };
        let tm = ThreatModel::linf(8.0 / 255.0);
        let out = fgsm(&m, &t(&[0.5, 0.999, 0.25]), &[0], &tm);
        assert!((out.data()[0] as f64 - (0.5 + 8.0 / 255.0)).abs() < 1e-6);
        assert!((out.data()[0] - 0.53137).abs() < 1e-5);
        assert_eq!(out.data()[1], 1.0);
        assert_eq!(out.data()[2], 0.25);
        assert!(tm.contains(&t(&[0.5, 0.999, 0.25]), &out));
    }

    #[test]
    fn fgm_hand_values() {
        let m = Fixed { grad: vec![3.0, 4.0] };
        let out = fgm(&m, &t(&[0.2, 0.2]), &[0], 0.5);
        assert!((out.data()[0] - 0.5).abs() < 1e-6);
        assert!((out.data()[1] - 0.6).abs() < 1e-6);
        assert!(ThreatModel::l2(0.5).distance(&[0.2, 0.2], out.data()) <= 0.5);
        let zero = Fixed { grad: vec![0.0, 0.0] };
        assert_eq!(fgm(&zero, &t(&[0.2, 0.2]), &[0], 0.5).data(), &[0.2, 0.2]);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let m = Fixed { grad: vec![0.0; 4] };
        let x = t(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(fgsm(&m, &x, &[0], &ThreatModel::linf(0.1)), x);
    }

    #[test]
    fn dlr_hand_values() {
        let z = Tensor::from_vec(&[3, 4], vec![3.0, 2.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 5.0, 1.0, 2.0]).unwrap();
        let l = dlr_loss(&z, &[0, 2, 0], None);
        assert!((l[0] - -0.5).abs() < 1e-12);
        assert_eq!(l[1], 0.0);
        assert!(l[2] > 0.0);
        // targeted: -(z_y - z_t) / (z_p1 - (z_p3 + z_p4)/2) = -(3 - 0) / (3 - 0.5)
        let lt = dlr_loss(&z, &[0, 0, 0], Some(&[3, 1, 1]));
        assert!((lt[0] - -3.0 / 2.5).abs() < 1e-12);
    }

    #[test]
    fn dlr_gradient_matches_differences() {
        let z: Vec<f32> = vec![0.3, -1.2, 2.0, 0.7, 1.1];
        for target in [None, Some(vec![3usize])] {
            let zt = Tensor::from_vec(&[1, 5], z.clone()).unwrap();
            let (_, g) = dlr_with_grad(&zt, &[4], target.as_deref());
            for j in 0..5 {
                let h = 1e-3f32;
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let f = |v: Vec<f32>| dlr_loss(&Tensor::from_vec(&[1, 5], v).unwrap(), &[4], target.as_deref())[0];
                let fd = (f(zp) - f(zm)) / (2.0 * h as f64);
                assert!((fd - g.data()[j] as f64).abs() < 1e-3, "{j}: {fd} vs {}", g.data()[j]);
            }
        }
    }

    #[test]
    fn apgd_single_step_is_two_epsilon() {
        let m = Fixed { grad: vec![1.0, -1.0] };
        let tm = ThreatModel::linf(0.25);
        let x = t(&[0.5, 0.5]);
        let r = apgd(&m, &x, &[0], &tm, &ApgdConfig::new(1, AttackLoss::Ce), None, &mut crate::Rng::seed_from_u64(0));
        // loss never rises in this model, so the best iterate stays x0
        assert_eq!(r.x_adv, x);
        let mut z = x.clone();
        ascend(&tm, x.sample(0), &[1.0, -1.0], 0.5, z.sample_mut(0));
        project(&tm, x.sample(0), z.sample_mut(0));
        assert_eq!(z.data(), &[0.75, 0.25]);
    }

    use rand::SeedableRng;

    #[test]
    fn projection_is_exact_near_the_bound() {
        let tm = ThreatModel::linf(8.0 / 255.0);
        for k in 0..1000 {
            let x0 = k as f32 / 1000.0;
            let mut v = [x0 + 8.0 / 255.0 + 1e-7];
            project(&tm, &[x0], &mut v);
            assert!(tm.distance(&[x0], &v) <= tm.epsilon);
            assert!((0.0..=1.0).contains(&v[0]));
        }
    }
}
