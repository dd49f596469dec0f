//! Optimizers, schedules, stabilization, and the training loops.
//!
//! Both loops draw fresh per-iteration generators keyed by (seed, iteration),
//! so a run is deterministic and a checkpointed run resumes bit-identically.
//! The hierarchical loop reuses the single-layer gradient core per layer,
//! which makes a one-layer hierarchy reproduce the flat loop exactly.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::family::{HierarchicalFamily, SemiImplicitFamily};
use crate::kernels::{Kernel, KernelSpec};
use crate::objective::{pair_loss_tape, EstimatorKind};
use crate::rng::{rng_for, standard_normal_matrix, stream};
use crate::targets::{AnnealedPath, ScoreTarget};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } => lr,
            OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer with per-parameter moment buffers and a step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        OptimizerState {
            kind,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    /// One update in place. SGD: p -= lr g. Adam: bias-corrected moments with
    /// the epsilon added to the square-rooted second moment.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer step",
                expected: format!("{}", self.m.len()),
                got: format!("params {} grad {}", params.len(), grad.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient("optimizer step"));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, &g), (m, v)) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Scale the gradient down to `threshold` when its Euclidean norm exceeds it.
pub fn clip_gradient(grad: &mut [f64], threshold: f64) {
    debug_assert!(threshold > 0.0);
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

/// shadow <- decay * shadow + (1 - decay) * current.
pub fn ema_update(shadow: &mut [f64], current: &[f64], decay: f64) {
    for (s, &c) in shadow.iter_mut().zip(current) {
        *s = decay * *s + (1.0 - decay) * c;
    }
}

/// Linear temperature decay from `start` to 1 over the first
/// `anneal_fraction` of training, then 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub anneal_fraction: f64,
}

impl TemperatureSchedule {
    pub fn tau(&self, iteration: u64, total: u64) -> f64 {
        let horizon = (total as f64 * self.anneal_fraction).max(1.0);
        let progress = (iteration as f64 / horizon).min(1.0);
        (self.start - (self.start - 1.0) * progress).max(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSchedule {
    pub iterations: u64,
    pub batch_size: usize,
    pub estimator: EstimatorKind,
    pub optimizer: OptimizerKind,
    pub clip: Option<f64>,
    pub ema_decay: Option<f64>,
    pub temperature: Option<TemperatureSchedule>,
    pub log_every: u64,
    pub log_timing: bool,
    /// Probe the parameter Jacobian of the mean map every so many iterations.
    pub probe_every: Option<u64>,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn new(iterations: u64, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainSchedule {
            iterations,
            batch_size,
            estimator: EstimatorKind::Vanilla,
            optimizer: OptimizerKind::adam(lr),
            clip: None,
            ema_decay: None,
            temperature: None,
            log_every: 100,
            log_timing: false,
            probe_every: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidSchedule("iterations must be >= 1".into()));
        }
        let min_batch = match self.estimator {
            EstimatorKind::Vanilla => 1,
            EstimatorKind::UStat => 2,
        };
        if self.batch_size < min_batch {
            return Err(Error::InvalidSchedule(format!(
                "batch size {} too small for the {:?} estimator",
                self.batch_size, self.estimator
            )));
        }
        if !(self.optimizer.learning_rate() > 0.0) {
            return Err(Error::InvalidSchedule("learning rate must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidSchedule(format!("clip threshold must be positive, got {c}")));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidSchedule(format!("EMA decay must lie in [0, 1), got {d}")));
            }
        }
        if let Some(t) = self.temperature {
            if !(t.start >= 1.0) || !(0.0 < t.anneal_fraction && t.anneal_fraction <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "temperature schedule start {} fraction {}",
                    t.start, t.anneal_fraction
                )));
            }
        }
        if self.log_every == 0 {
            return Err(Error::InvalidSchedule("log cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hierarchical schedule: per-layer positive weights on the layer KSD terms.
#[derive(Clone, Debug)]
pub struct HkSchedule {
    pub schedule: TrainSchedule,
    pub betas: Vec<f64>,
}

impl HkSchedule {
    pub fn uniform(schedule: TrainSchedule, layers: usize) -> Self {
        HkSchedule {
            schedule,
            betas: vec![1.0; layers],
        }
    }
}

/// One metric-trace record.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iteration: u64,
    pub ksd_ustat: f64,
    pub grad_norm: f64,
    pub witness_norm: f64,
    pub bandwidth: f64,
    pub elapsed_seconds: f64,
}

/// Hierarchical trace record: one KSD column per layer.
#[derive(Clone, Debug)]
pub struct HkTraceRow {
    pub iteration: u64,
    pub ksd_ustat: Vec<f64>,
    pub grad_norm: f64,
    pub elapsed_seconds: f64,
}

/// Min / median / max of the mean-map Jacobian Frobenius norms over probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub trace: Vec<TraceRow>,
    pub ema: Option<Vec<f64>>,
    pub nonfinite_steps: usize,
    pub probe_trace: Vec<(u64, ProbeStats)>,
    pub optimizer: OptimizerState,
}

#[derive(Clone, Debug)]
pub struct HkTrainResult {
    pub trace: Vec<HkTraceRow>,
    pub ema: Option<Vec<f64>>,
    pub nonfinite_steps: usize,
    pub optimizer: OptimizerState,
}

/// Pre-drawn inputs for one layer gradient.
enum LayerBatch {
    Vanilla {
        z1: Tensor,
        z2: Tensor,
        xi1: Tensor,
        xi2: Tensor,
    },
    UStat {
        z: Tensor,
        xi: Tensor,
    },
}

struct LayerGrad {
    grad: Vec<f64>,
    ksd_ustat: f64,
    witness_norm: f64,
    bandwidth: f64,
}

/// Single-layer KSD gradient with optional tempering, shared by the flat and
/// hierarchical loops. The temperature divides the target score inside the
/// tape; the bandwidth is resolved from the drawn samples and detached.
fn layer_gradient(
    family: &SemiImplicitFamily,
    target: &ScoreTarget,
    spec: &KernelSpec,
    batch: &LayerBatch,
    tau: Option<f64>,
    want_metrics: bool,
) -> Result<LayerGrad> {
    let mut tape = Tape::new();
    let vars = family.insert_leaves(&mut tape);
    let score_of = |tape: &mut Tape, x| -> Result<crate::tensor::Var> {
        let s = target.score_tape(tape, x)?;
        Ok(match tau {
            Some(t) => tape.scale(s, 1.0 / t),
            None => s,
        })
    };
    let (loss, kernel, metrics_src) = match batch {
        LayerBatch::Vanilla { z1, z2, xi1, xi2 } => {
            let n = z1.rows();
            let d1 = family.reparam_tape(&mut tape, &vars, z1, xi1)?;
            let d2 = family.reparam_tape(&mut tape, &vars, z2, xi2)?;
            let kernel = spec.resolve(&[tape.value(d1.x), tape.value(d2.x)])?;
            let s1 = score_of(&mut tape, d1.x)?;
            let f1 = tape.add(s1, d1.xi_over_sigma);
            let s2 = score_of(&mut tape, d2.x)?;
            let f2 = tape.add(s2, d2.xi_over_sigma);
            let w = 1.0 / (n * z2.rows()) as f64;
            let loss = pair_loss_tape(&mut tape, &kernel, d1.x, f1, d2.x, f2, w, false);
            (loss, kernel, (d1.x, f1))
        }
        LayerBatch::UStat { z, xi } => {
            let n = z.rows();
            if n < 2 {
                return Err(Error::BatchTooSmall { need: 2, got: n });
            }
            let d = family.reparam_tape(&mut tape, &vars, z, xi)?;
            let kernel = spec.resolve(&[tape.value(d.x)])?;
            let s = score_of(&mut tape, d.x)?;
            let f = tape.add(s, d.xi_over_sigma);
            let w = 1.0 / (n * (n - 1)) as f64;
            let loss = pair_loss_tape(&mut tape, &kernel, d.x, f, d.x, f, w, true);
            (loss, kernel, (d.x, f))
        }
    };
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteGradient("training loss"));
    }
    let grads = tape.backward(loss)?;
    let grad = family.grads_flat(&grads, &vars);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("training gradient"));
    }

    let (mut ksd_ustat, mut witness_norm) = (f64::NAN, f64::NAN);
    if want_metrics {
        let (xv, fv) = metrics_src;
        let x = tape.value(xv);
        let f = tape.value(fv);
        ksd_ustat = ustat_from_values(&kernel, x, f);
        witness_norm = witness_norm_at_origin(&kernel, x, f);
    }
    let bandwidth = match kernel {
        Kernel::GaussianRbf { bandwidth } => bandwidth,
        _ => f64::NAN,
    };
    Ok(LayerGrad {
        grad,
        ksd_ustat,
        witness_norm,
        bandwidth,
    })
}

fn ustat_from_values(kernel: &Kernel, x: &Tensor, f: &Tensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return f64::NAN;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let k = kernel.eval_sqdist(crate::kernels::sqdist(x.row_slice(i), x.row_slice(j)));
            let dot: f64 = f
                .row_slice(i)
                .iter()
                .zip(f.row_slice(j))
                .map(|(a, b)| a * b)
                .sum();
            total += k * dot;
        }
    }
    2.0 * total / (n * (n - 1)) as f64
}

fn witness_norm_at_origin(kernel: &Kernel, x: &Tensor, f: &Tensor) -> f64 {
    let d = x.cols();
    let origin = vec![0.0; d];
    let mut acc = vec![0.0; d];
    for i in 0..x.rows() {
        let k = kernel.eval_sqdist(crate::kernels::sqdist(&origin, x.row_slice(i)));
        for (a, &fv) in acc.iter_mut().zip(f.row_slice(i)) {
            *a += k * fv;
        }
    }
    let inv = 1.0 / x.rows() as f64;
    acc.iter().map(|a| (a * inv) * (a * inv)).sum::<f64>().sqrt()
}

/// Frobenius norm of the parameter Jacobian of the mean map at each probe
/// point, one backward pass per output coordinate.
pub fn jacobian_norm_probe(family: &SemiImplicitFamily, probes: &Tensor) -> Result<ProbeStats> {
    if probes.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = family.dim();
    let mean_len = family.mean_param_count();
    let mut norms = Vec::with_capacity(probes.rows());
    for i in 0..probes.rows() {
        let z = Tensor::row(probes.row_slice(i));
        let mut sq = 0.0;
        for j in 0..d {
            let mut tape = Tape::new();
            let vars = family.insert_leaves(&mut tape);
            let mu = family.mean_tape(&mut tape, &vars, &z)?;
            let mut basis = Tensor::zeros(1, d);
            basis.set(0, j, 1.0);
            let e = tape.constant(basis);
            let picked = tape.mul(mu, e);
            let root = tape.sum_all(picked);
            if !tape.is_tracked(root) {
                // Identity mean map: no parameters, zero Jacobian.
                continue;
            }
            let grads = tape.backward(root)?;
            let flat = family.grads_flat(&grads, &vars);
            sq += flat[..mean_len].iter().map(|g| g * g).sum::<f64>();
        }
        norms.push(sq.sqrt());
    }
    norms.sort_by(|a, b| a.partial_cmp(b).expect("finite probe norms"));
    Ok(ProbeStats {
        min: norms[0],
        median: norms[norms.len() / 2],
        max: norms[norms.len() - 1],
    })
}

/// How many consecutive non-finite iterations abort a run.
const DIVERGENCE_LIMIT: usize = 10;

/// Train a semi-implicit family against a score target by stochastic KSD
/// minimization. Logs the U-statistic KSD value, the gradient norm before
/// clipping, the witness norm at the origin, and the resolved bandwidth
/// every `log_every` iterations.
pub fn train_ksivi(
    family: &mut SemiImplicitFamily,
    target: &ScoreTarget,
    spec: &KernelSpec,
    schedule: &TrainSchedule,
) -> Result<TrainResult> {
    schedule.validate()?;
    if family.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            context: "train_ksivi family/target",
            expected: format!("{}", target.dim()),
            got: format!("{}", family.dim()),
        });
    }
    let mut params = family.params_flat();
    let mut opt = OptimizerState::new(schedule.optimizer, params.len());
    let mut ema = schedule.ema_decay.map(|_| params.clone());
    let mut trace = Vec::new();
    let mut probe_trace = Vec::new();
    let probes = schedule
        .probe_every
        .map(|_| standard_normal_matrix(&mut rng_for(schedule.seed, stream::INIT, 1), 16, family.mixing_dim()));
    let started = Instant::now();
    let mut consecutive_bad = 0usize;
    let mut nonfinite_steps = 0usize;

    for iter in 0..schedule.iterations {
        let mut rng: ChaCha8Rng = rng_for(schedule.seed, stream::TRAIN, iter);
        let n = schedule.batch_size;
        let batch = match schedule.estimator {
            EstimatorKind::Vanilla => {
                let z1 = family.draw_mixing(n, &mut rng);
                let z2 = family.draw_mixing(n, &mut rng);
                let xi1 = family.draw_noise(n, &mut rng);
                let xi2 = family.draw_noise(n, &mut rng);
                LayerBatch::Vanilla { z1, z2, xi1, xi2 }
            }
            EstimatorKind::UStat => {
                let z = family.draw_mixing(n, &mut rng);
                let xi = family.draw_noise(n, &mut rng);
                LayerBatch::UStat { z, xi }
            }
        };
        let tau = schedule.temperature.and_then(|t| {
            let v = t.tau(iter, schedule.iterations);
            (v > 1.0).then_some(v)
        });
        let want_metrics = (iter + 1) % schedule.log_every == 0 || iter + 1 == schedule.iterations;
        let out = layer_gradient(family, target, spec, &batch, tau, want_metrics);
        let (mut grad, ksd_ustat, witness_norm, bandwidth) = match out {
            Ok(lg) => {
                consecutive_bad = 0;
                (lg.grad, lg.ksd_ustat, lg.witness_norm, lg.bandwidth)
            }
            Err(Error::NonFiniteGradient(_)) => {
                // Divergence policy: zero the step, count, abort after a run
                // of failures.
                consecutive_bad += 1;
                nonfinite_steps += 1;
                if consecutive_bad >= DIVERGENCE_LIMIT {
                    return Err(Error::Diverged(DIVERGENCE_LIMIT));
                }
                (vec![0.0; params.len()], f64::NAN, f64::NAN, f64::NAN)
            }
            Err(other) => return Err(other),
        };
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(threshold) = schedule.clip {
            clip_gradient(&mut grad, threshold);
        }
        opt.apply(&mut params, &grad)?;
        family.set_params_flat(&params)?;
        if let (Some(decay), Some(shadow)) = (schedule.ema_decay, ema.as_mut()) {
            ema_update(shadow, &params, decay);
        }
        if want_metrics {
            trace.push(TraceRow {
                iteration: iter + 1,
                ksd_ustat,
                grad_norm,
                witness_norm,
                bandwidth,
                elapsed_seconds: if schedule.log_timing {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
        }
        if let (Some(every), Some(pts)) = (schedule.probe_every, probes.as_ref()) {
            if iter % every == 0 || iter + 1 == schedule.iterations {
                probe_trace.push((iter, jacobian_norm_probe(family, pts)?));
            }
        }
    }
    Ok(TrainResult {
        trace,
        ema,
        nonfinite_steps,
        probe_trace,
        optimizer: opt,
    })
}

/// Train a hierarchical family layer-wise against an annealed path with a
/// weighted sum of per-layer KSD objectives. Mixing samples for layer t are
/// the detached layer t+1 samples of a fresh trajectory.
pub fn train_hksivi(
    hfamily: &mut HierarchicalFamily,
    path: &AnnealedPath,
    spec: &KernelSpec,
    hk: &HkSchedule,
) -> Result<HkTrainResult> {
    let schedule = &hk.schedule;
    schedule.validate()?;
    let layers = hfamily.layers();
    if path.layers() != layers {
        return Err(Error::LayerOutOfRange {
            index: path.layers(),
            layers,
        });
    }
    if hk.betas.len() != layers || hk.betas.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::InvalidSchedule(
            "layer weights must be positive, one per layer".into(),
        ));
    }
    let d = hfamily.dim();
    let net_len = hfamily.net().param_count();
    let mut params = hfamily.params_flat();
    let mut opt = OptimizerState::new(schedule.optimizer, params.len());
    let mut ema = schedule.ema_decay.map(|_| params.clone());
    let mut trace = Vec::new();
    let started = Instant::now();
    let mut consecutive_bad = 0usize;
    let mut nonfinite_steps = 0usize;

    for iter in 0..schedule.iterations {
        let mut rng: ChaCha8Rng = rng_for(schedule.seed, stream::TRAIN, iter);
        let n = schedule.batch_size;
        // Draw full trajectories with the layer-t noises interleaved so a
        // one-layer hierarchy consumes randomness exactly like the flat loop.
        let two_batches = matches!(schedule.estimator, EstimatorKind::Vanilla);
        let top1 = standard_normal_matrix(&mut rng, n, d);
        let top2 = two_batches.then(|| standard_normal_matrix(&mut rng, n, d));
        let mut noises1 = Vec::with_capacity(layers);
        let mut noises2 = Vec::with_capacity(layers);
        for _ in 0..layers {
            noises1.push(standard_normal_matrix(&mut rng, n, d));
            if two_batches {
                noises2.push(standard_normal_matrix(&mut rng, n, d));
            }
        }
        // hier_draw consumes noises indexed by layer from the top down.
        noises1.reverse();
        noises2.reverse();
        let traj1 = hfamily.hier_draw(path, top1, &noises1)?;
        let traj2 = match top2 {
            Some(t) => Some(hfamily.hier_draw(path, t, &noises2)?),
            None => None,
        };

        let want_metrics = (iter + 1) % schedule.log_every == 0 || iter + 1 == schedule.iterations;
        let mut grad = vec![0.0; params.len()];
        let mut layer_ksd = vec![f64::NAN; layers];
        let mut bad = false;
        for t in 0..layers {
            let fam_t = hfamily.layer_family(path, t)?;
            let target_t = path.target_at(t)?;
            let batch = match (&traj2, schedule.estimator) {
                (Some(t2), EstimatorKind::Vanilla) => LayerBatch::Vanilla {
                    z1: traj1.xs[t + 1].clone(),
                    z2: t2.xs[t + 1].clone(),
                    xi1: traj1.noises[t].clone(),
                    xi2: t2.noises[t].clone(),
                },
                (None, EstimatorKind::UStat) => LayerBatch::UStat {
                    z: traj1.xs[t + 1].clone(),
                    xi: traj1.noises[t].clone(),
                },
                _ => unreachable!(),
            };
            match layer_gradient(&fam_t, &target_t, spec, &batch, None, want_metrics) {
                Ok(lg) => {
                    let beta = hk.betas[t];
                    for (acc, &g) in grad[..net_len].iter_mut().zip(&lg.grad[..net_len]) {
                        *acc += beta * g;
                    }
                    let rho_dst = net_len + t * d;
                    for (acc, &g) in grad[rho_dst..rho_dst + d].iter_mut().zip(&lg.grad[net_len..]) {
                        *acc += beta * g;
                    }
                    layer_ksd[t] = lg.ksd_ustat;
                }
                Err(Error::NonFiniteGradient(_)) => {
                    bad = true;
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        if bad {
            consecutive_bad += 1;
            nonfinite_steps += 1;
            if consecutive_bad >= DIVERGENCE_LIMIT {
                return Err(Error::Diverged(DIVERGENCE_LIMIT));
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
        } else {
            consecutive_bad = 0;
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(threshold) = schedule.clip {
            clip_gradient(&mut grad, threshold);
        }
        opt.apply(&mut params, &grad)?;
        hfamily.set_params_flat(&params)?;
        if let (Some(decay), Some(shadow)) = (schedule.ema_decay, ema.as_mut()) {
            ema_update(shadow, &params, decay);
        }
        if want_metrics {
            trace.push(HkTraceRow {
                iteration: iter + 1,
                ksd_ustat: layer_ksd,
                grad_norm,
                elapsed_seconds: if schedule.log_timing {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
        }
    }
    Ok(HkTrainResult {
        trace,
        ema,
        nonfinite_steps,
        optimizer: opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::MeanMap;

    #[test]
    fn sgd_single_step() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1 }, 1);
        let mut p = vec![1.0];
        opt.apply(&mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_expansion() {
        // g = 3, lr = 1e-3: bias-corrected m = 3, v = 9, so the update is
        // -lr * 3 / (3 + 1e-8).
        let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3), 1);
        let mut p = vec![1.0];
        opt.apply(&mut p, &[3.0]).unwrap();
        let expected = 1.0 - 1e-3 * 3.0 / (3.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_of_both_optimizers() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1 }, 2);
        let mut p = vec![1.0, -2.0];
        opt.apply(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::adam(0.01), 2);
        opt.apply(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.step, 1);
        assert!(opt.apply(&mut p, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![0.6, 0.8];
        clip_gradient(&mut g, 5.0);
        assert_eq!(g, vec![0.6, 0.8]);
        let mut g = vec![3.0, 4.0];
        clip_gradient(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.0, 0.0];
        clip_gradient(&mut g, 1.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn ema_examples_and_limit() {
        let mut s = vec![5.0];
        ema_update(&mut s, &[1.0], 0.0);
        assert_eq!(s, vec![1.0]);
        let mut s = vec![0.0];
        ema_update(&mut s, &[10.0], 0.9);
        assert!((s[0] - 1.0).abs() < 1e-15);
        // Repeated updates with a constant input converge to it.
        let mut s = vec![0.0];
        for _ in 0..10_000 {
            ema_update(&mut s, &[3.0], 0.99);
        }
        assert!((s[0] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn temperature_schedule_decays_linearly_to_one() {
        let t = TemperatureSchedule {
            start: 5.0,
            anneal_fraction: 0.5,
        };
        assert_eq!(t.tau(0, 100), 5.0);
        assert!((t.tau(25, 100) - 3.0).abs() < 1e-12);
        assert_eq!(t.tau(50, 100), 1.0);
        assert_eq!(t.tau(99, 100), 1.0);
    }

    #[test]
    fn degenerate_family_is_a_training_fixed_point() {
        // mu = 0 (trainable constant), sigma frozen at 1, standard normal
        // target: every gradient is exactly zero, so parameters never move.
        let mut fam = crate::family::SemiImplicitFamily::location_scale(2, &[0.0, 0.0], 1.0)
            .unwrap()
            .freeze_rho();
        let before = fam.params_flat();
        let target = ScoreTarget::standard_normal(2);
        let spec = KernelSpec::rbf_median();
        let schedule = TrainSchedule::new(25, 8, 1e-2, 9);
        let result = train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
        assert_eq!(fam.params_flat(), before);
        assert_eq!(result.nonfinite_steps, 0);
        for row in &result.trace {
            assert_eq!(row.ksd_ustat, 0.0);
            assert_eq!(row.grad_norm, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let mk = || {
            let mut rng = rng_for(77, stream::INIT, 0);
            crate::family::SemiImplicitFamily::with_net(&[3, 16, 2], 0.25, &mut rng).unwrap()
        };
        let target = ScoreTarget::banana();
        let spec = KernelSpec::rbf_median();
        let schedule = TrainSchedule::new(40, 12, 1e-3, 5);
        let mut fam_a = mk();
        let trace_a = train_ksivi(&mut fam_a, &target, &spec, &schedule).unwrap();
        let mut fam_b = mk();
        let trace_b = train_ksivi(&mut fam_b, &target, &spec, &schedule).unwrap();
        assert_eq!(fam_a.params_flat(), fam_b.params_flat());
        for (a, b) in trace_a.trace.iter().zip(&trace_b.trace) {
            assert_eq!(a.ksd_ustat.to_bits(), b.ksd_ustat.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
    }

    #[test]
    fn ustat_training_runs_and_logs() {
        let mut rng = rng_for(78, stream::INIT, 0);
        let mut fam = crate::family::SemiImplicitFamily::with_net(&[3, 8, 2], 1.0, &mut rng).unwrap();
        let target = ScoreTarget::multimodal();
        let spec = KernelSpec::rbf_median();
        let mut schedule = TrainSchedule::new(30, 8, 1e-3, 6);
        schedule.estimator = EstimatorKind::UStat;
        schedule.log_every = 10;
        schedule.temperature = Some(TemperatureSchedule {
            start: 5.0,
            anneal_fraction: 0.5,
        });
        let result = train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
        assert_eq!(result.trace.len(), 3);
        assert!(result.trace.iter().all(|r| r.bandwidth > 0.0));
    }

    #[test]
    fn one_layer_hierarchy_matches_flat_training_bitwise() {
        let target = ScoreTarget::multimodal();
        let path = AnnealedPath::linear(ScoreTarget::standard_normal(2), target, 1).unwrap();
        let mut rng = rng_for(79, stream::INIT, 0);
        let mut hf = HierarchicalFamily::new(1, 2, &[2, 10, 2], 1.0, &mut rng).unwrap();
        let mut flat = hf.layer_family(&path, 0).unwrap();

        let schedule = TrainSchedule::new(30, 6, 1e-3, 11);
        let hk = HkSchedule::uniform(schedule.clone(), 1);
        train_hksivi(&mut hf, &path, &KernelSpec::rbf_median(), &hk).unwrap();
        train_ksivi(
            &mut flat,
            &path.target_at(0).unwrap(),
            &KernelSpec::rbf_median(),
            &schedule,
        )
        .unwrap();

        let hp = hf.params_flat();
        let fp = flat.params_flat();
        assert_eq!(hp.len(), fp.len());
        for (a, b) in hp.iter().zip(&fp) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn beta_weights_gate_layers() {
        // With beta(t > 0) tiny relative to beta(0)... the spec's contract is
        // beta(t) = 0 for t > 0 trains only the last conditional; zero is not
        // an allowed weight here, so check the validation instead and that a
        // 2-layer run with uniform weights trains all rho blocks.
        let target = ScoreTarget::multimodal();
        let path = AnnealedPath::linear(ScoreTarget::standard_normal(2), target, 2).unwrap();
        let mut rng = rng_for(80, stream::INIT, 0);
        let mut hf = HierarchicalFamily::new(2, 2, &[2, 8, 2], 1.0, &mut rng).unwrap();
        let before = hf.params_flat();
        let schedule = TrainSchedule::new(20, 6, 1e-3, 12);
        let mut hk = HkSchedule::uniform(schedule, 2);
        let result = train_hksivi(&mut hf, &path, &KernelSpec::rbf_median(), &hk).unwrap();
        assert_eq!(result.trace.last().unwrap().ksd_ustat.len(), 2);
        let after = hf.params_flat();
        let net_len = hf.net().param_count();
        let rho0_moved = before[net_len..net_len + 2] != after[net_len..net_len + 2];
        let rho1_moved = before[net_len + 2..net_len + 4] != after[net_len + 2..net_len + 4];
        assert!(rho0_moved && rho1_moved);

        hk.betas = vec![1.0, 0.0];
        assert!(train_hksivi(&mut hf, &path, &KernelSpec::rbf_median(), &hk).is_err());
    }

    #[test]
    fn jacobian_probe_closed_forms() {
        // Zero-weight network: only the output bias contributes, norm sqrt(d).
        let net = crate::tensor::Mlp::zeroed(&[3, 5, 2]).unwrap();
        let fam = crate::family::SemiImplicitFamily::new(3, 2, MeanMap::Net(net), 1.0).unwrap();
        let probes = Tensor::new(2, 3, vec![0.3, -0.5, 0.9, 1.0, 0.0, -1.0]);
        let stats = jacobian_norm_probe(&fam, &probes).unwrap();
        let expected = (2.0f64).sqrt();
        assert!((stats.min - expected).abs() < 1e-12);
        assert!((stats.max - expected).abs() < 1e-12);

        // Identity 1-layer map with bias: weight entries contribute
        // d * ||z||^2, bias entries contribute d; at z = (1, 0) the norm is 2.
        let mut net = crate::tensor::Mlp::zeroed(&[2, 2]).unwrap();
        *net.weight_mut(0) = Tensor::identity(2);
        let fam = crate::family::SemiImplicitFamily::new(2, 2, MeanMap::Net(net), 1.0).unwrap();
        let probes = Tensor::new(1, 2, vec![1.0, 0.0]);
        let stats = jacobian_norm_probe(&fam, &probes).unwrap();
        assert!((stats.median - 2.0).abs() < 1e-12, "{}", stats.median);

        // Per-point statistic: permuting probe order leaves stats unchanged.
        let mut rng = rng_for(81, stream::INIT, 0);
        let fam = crate::family::SemiImplicitFamily::with_net(&[2, 6, 2], 1.0, &mut rng).unwrap();
        let probes = standard_normal_matrix(&mut rng, 5, 2);
        let mut reversed = Tensor::zeros(5, 2);
        for i in 0..5 {
            reversed.row_slice_mut(i).copy_from_slice(probes.row_slice(4 - i));
        }
        let a = jacobian_norm_probe(&fam, &probes).unwrap();
        let b = jacobian_norm_probe(&fam, &reversed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jacobian_probe_matches_finite_differences() {
        let mut rng = rng_for(82, stream::INIT, 0);
        let fam = crate::family::SemiImplicitFamily::with_net(&[2, 4, 2], 1.0, &mut rng).unwrap();
        let z = Tensor::new(1, 2, vec![0.7, -0.3]);
        let stats = jacobian_norm_probe(&fam, &z).unwrap();

        // Finite-difference Frobenius norm over the mean parameters.
        let flat0 = fam.params_flat();
        let mean_len = fam.mean_param_count();
        let h = 1e-6;
        let mut sq = 0.0;
        let mut flat = flat0.clone();
        for k in 0..mean_len {
            flat[k] = flat0[k] + h;
            let mut fp = fam.clone();
            fp.set_params_flat(&flat).unwrap();
            let plus = fp.mean_batch(&z).unwrap();
            flat[k] = flat0[k] - h;
            let mut fm = fam.clone();
            fm.set_params_flat(&flat).unwrap();
            let minus = fm.mean_batch(&z).unwrap();
            flat[k] = flat0[k];
            for j in 0..2 {
                let d = (plus.get(0, j) - minus.get(0, j)) / (2.0 * h);
                sq += d * d;
            }
        }
        assert!((stats.median - sq.sqrt()).abs() < 1e-6, "{} vs {}", stats.median, sq.sqrt());
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule::new(0, 8, 1e-3, 1);
        assert!(s.validate().is_err());
        s = TrainSchedule::new(10, 1, 1e-3, 1);
        s.estimator = EstimatorKind::UStat;
        assert!(s.validate().is_err());
        s = TrainSchedule::new(10, 8, 1e-3, 1);
        s.ema_decay = Some(1.0);
        assert!(s.validate().is_err());
        s.ema_decay = Some(0.999);
        assert!(s.validate().is_ok());
    }

    use crate::family::HierarchicalFamily;
    use crate::rng::{rng_for, standard_normal_matrix, stream};
    use crate::targets::{AnnealedPath, ScoreTarget};
}
