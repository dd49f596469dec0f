//! The tractable KSD objective for semi-implicit families.
//!
//! For a semi-implicit family the squared kernel Stein discrepancy equals
//! E[k(x, x') <f, f'>] with f = s_p(x) - s_cond(x) = s_p(x) + xi / sigma,
//! because the intractable marginal score can be swapped for the conditional
//! score inside kernel integrals. Two unbiased reparameterized gradient
//! estimators are provided: a two-batch double sum over all pairs (vanilla)
//! and a one-batch U-statistic over unordered pairs.

use crate::error::{Error, Result};
use crate::family::SemiImplicitFamily;
use crate::kernels::{sqdist, Kernel, KernelSpec};
use crate::rng::{rng_for, stream};
use crate::targets::ScoreTarget;
use crate::tensor::{Tape, Tensor, Var};

/// Paired reparameterization draws feeding the objective. `f` is filled by
/// [`attach_scores`] and satisfies f = s_p(x) + xi / sigma row-wise.
#[derive(Clone, Debug)]
pub struct KsdBatch {
    pub z: Tensor,
    pub xi: Tensor,
    pub x: Tensor,
    pub cond_score: Tensor,
    pub f: Option<Tensor>,
    pub provenance: String,
}

impl KsdBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    fn f_ref(&self) -> Result<&Tensor> {
        self.f.as_ref().ok_or(Error::EmptyBatch)
    }
}

/// Fill in f = s_p(x) - cond_score.
pub fn attach_scores(batch: &mut KsdBatch, target: &ScoreTarget) -> Result<()> {
    let mut f = target.score_batch(&batch.x)?;
    for (fv, &cs) in f.data_mut().iter_mut().zip(batch.cond_score.data()) {
        *fv -= cs;
    }
    batch.f = Some(f);
    Ok(())
}

/// Two-batch estimate of KSD^2: (1 / N_a N_b) sum_ij k(x_i, x'_j) <f_i, f'_j>,
/// including diagonal pairs. Unbiased when the batches are independent.
pub fn ksd_value(kernel: &Kernel, a: &KsdBatch, b: &KsdBatch) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "ksd_value batches",
            expected: format!("{}", a.dim()),
            got: format!("{}", b.dim()),
        });
    }
    let (fa, fb) = (a.f_ref()?, b.f_ref()?);
    let mut total = 0.0;
    for i in 0..a.len() {
        let (xi, fi) = (a.x.row_slice(i), fa.row_slice(i));
        for j in 0..b.len() {
            let k = kernel.eval_sqdist(sqdist(xi, b.x.row_slice(j)));
            let dot: f64 = fi.iter().zip(fb.row_slice(j)).map(|(p, q)| p * q).sum();
            total += k * dot;
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// One-batch U-statistic: 2 / (N (N-1)) sum_{i<j} k(x_i, x_j) <f_i, f_j>.
pub fn ksd_value_ustat(kernel: &Kernel, batch: &KsdBatch) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let f = batch.f_ref()?;
    let mut total = 0.0;
    for i in 0..n {
        let (xi, fi) = (batch.x.row_slice(i), f.row_slice(i));
        for j in (i + 1)..n {
            let k = kernel.eval_sqdist(sqdist(xi, batch.x.row_slice(j)));
            let dot: f64 = fi.iter().zip(f.row_slice(j)).map(|(p, q)| p * q).sum();
            total += k * dot;
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

/// Monte Carlo estimate of the optimal witness f*(x0) = E[k(x0, x) f(x)].
pub fn witness(kernel: &Kernel, batch: &KsdBatch, probe: &[f64]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probe.len() != batch.dim() {
        return Err(Error::ShapeMismatch {
            context: "witness probe",
            expected: format!("{}", batch.dim()),
            got: format!("{}", probe.len()),
        });
    }
    let f = batch.f_ref()?;
    let mut out = vec![0.0; batch.dim()];
    for i in 0..batch.len() {
        let k = kernel.eval_sqdist(sqdist(probe, batch.x.row_slice(i)));
        for (o, &fv) in out.iter_mut().zip(f.row_slice(i)) {
            *o += k * fv;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Which stochastic gradient estimator produced an estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Vanilla,
    UStat,
}

/// Flat parameter gradient over the family's parameters.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub estimator: EstimatorKind,
    pub batch_size: usize,
    /// Kernel actually used (bandwidth resolved per batch).
    pub kernel: Kernel,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Differentiable weighted pair sum sum_ij w k(x1_i, x2_j) <f1_i, f2_j>,
/// optionally excluding the diagonal. Shared by both estimators and the
/// training losses.
pub(crate) fn pair_loss_tape(
    tape: &mut Tape,
    kernel: &Kernel,
    x1: Var,
    f1: Var,
    x2: Var,
    f2: Var,
    weight: f64,
    exclude_diagonal: bool,
) -> Var {
    let (n1, d) = tape.value(x1).shape();
    let n2 = tape.value(x2).rows();
    // ||x - y||^2 = ||x||^2 + ||y||^2 - 2 x.y, assembled from primitives.
    let sq1 = tape.mul(x1, x1);
    let r1 = tape.sum_rows(sq1); // n1 x 1
    let sq2 = tape.mul(x2, x2);
    let ones = tape.constant(Tensor::full(1, d, 1.0));
    let r2 = tape.matmul_nt(ones, sq2); // 1 x n2
    let cross = tape.matmul_nt(x1, x2); // n1 x n2
    let r1b = tape.broadcast_col(r1, n2);
    let r2b = tape.broadcast_row(r2, n1);
    let sums = tape.add(r1b, r2b);
    let twice = tape.scale(cross, -2.0);
    let dists = tape.add(sums, twice);
    let kmat = kernel.apply_tape(tape, dists);
    let pmat = tape.matmul_nt(f1, f2);
    let mut prod = tape.mul(kmat, pmat);
    if exclude_diagonal {
        let n = n1.min(n2);
        let mut mask = Tensor::full(n1, n2, 1.0);
        for i in 0..n {
            mask.set(i, i, 0.0);
        }
        let maskc = tape.constant(mask);
        prod = tape.mul(prod, maskc);
    }
    let total = tape.sum_all(prod);
    tape.scale(total, weight)
}

/// Internals shared by the public estimators and the variance diagnostics:
/// computes one gradient estimate with an already-resolved kernel.
pub(crate) fn grad_with_kernel(
    kernel: Option<&Kernel>,
    spec: &KernelSpec,
    family: &SemiImplicitFamily,
    target: &ScoreTarget,
    sizes: (usize, usize),
    estimator: EstimatorKind,
    rng: &mut impl rand::Rng,
) -> Result<GradientEstimate> {
    let (n1, n2) = sizes;
    let mut tape = Tape::new();
    let vars = family.insert_leaves(&mut tape);
    let (loss, resolved, batch_size) = match estimator {
        EstimatorKind::Vanilla => {
            let z1 = family.draw_mixing(n1, rng);
            let z2 = family.draw_mixing(n2, rng);
            let xi1 = family.draw_noise(n1, rng);
            let xi2 = family.draw_noise(n2, rng);
            let d1 = family.reparam_tape(&mut tape, &vars, &z1, &xi1)?;
            let d2 = family.reparam_tape(&mut tape, &vars, &z2, &xi2)?;
            let resolved = match kernel {
                Some(k) => *k,
                None => spec.resolve(&[tape.value(d1.x), tape.value(d2.x)])?,
            };
            let s1 = target.score_tape(&mut tape, d1.x)?;
            let f1 = tape.add(s1, d1.xi_over_sigma);
            let s2 = target.score_tape(&mut tape, d2.x)?;
            let f2 = tape.add(s2, d2.xi_over_sigma);
            let w = 1.0 / (n1 * n2) as f64;
            (
                pair_loss_tape(&mut tape, &resolved, d1.x, f1, d2.x, f2, w, false),
                resolved,
                n1,
            )
        }
        EstimatorKind::UStat => {
            if n1 < 2 {
                return Err(Error::BatchTooSmall { need: 2, got: n1 });
            }
            let z = family.draw_mixing(n1, rng);
            let xi = family.draw_noise(n1, rng);
            let d = family.reparam_tape(&mut tape, &vars, &z, &xi)?;
            let resolved = match kernel {
                Some(k) => *k,
                None => spec.resolve(&[tape.value(d.x)])?,
            };
            let s = target.score_tape(&mut tape, d.x)?;
            let f = tape.add(s, d.xi_over_sigma);
            let w = 1.0 / (n1 * (n1 - 1)) as f64;
            (
                pair_loss_tape(&mut tape, &resolved, d.x, f, d.x, f, w, true),
                resolved,
                n1,
            )
        }
    };
    let grads = tape.backward(loss)?;
    let flat = family.grads_flat(&grads, &vars);
    if flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("ksd gradient estimator"));
    }
    Ok(GradientEstimate {
        grad: flat,
        estimator,
        batch_size,
        kernel: resolved,
    })
}

/// Vanilla estimator: two independent batches of size n each,
/// (1/n^2) sum_ij grad[k(x_1i, x_2j) <f_1i, f_2j>]. The bandwidth (median
/// heuristic by default) is resolved from the drawn samples and held
/// constant through differentiation.
pub fn grad_vanilla(
    spec: &KernelSpec,
    family: &SemiImplicitFamily,
    target: &ScoreTarget,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<GradientEstimate> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    grad_with_kernel(None, spec, family, target, (n, n), EstimatorKind::Vanilla, rng)
}

/// U-statistic estimator: one batch of size n,
/// 2/(n(n-1)) sum_{i<j} grad[k(x_i, x_j) <f_i, f_j>].
pub fn grad_ustat(
    spec: &KernelSpec,
    family: &SemiImplicitFamily,
    target: &ScoreTarget,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<GradientEstimate> {
    grad_with_kernel(None, spec, family, target, (n, 0), EstimatorKind::UStat, rng)
}

/// One row of the variance diagnostic table.
#[derive(Clone, Debug)]
pub struct VarianceRow {
    /// Total sample budget: the U-statistic uses one batch of n, the vanilla
    /// estimator two batches of n/2 (the convention under which the
    /// predicted formulas hold).
    pub n: usize,
    pub var_vanilla_emp: f64,
    pub var_ustat_emp: f64,
    pub var_vanilla_pred: f64,
    pub var_ustat_pred: f64,
    pub diff_emp: f64,
    pub diff_pred: f64,
    /// Prediction for the alternative convention where the vanilla batches
    /// have size n each.
    pub var_vanilla_pred_size_n_each: f64,
}

/// Plug-in estimates of the variance components of the pair term
/// h(t1, t2) = grad[k(x1, x2) <f1, f2>]: zeta1 = Var(E[h | t1]) and
/// zeta2 = Var(h). Variances of vector quantities are traces.
#[derive(Clone, Debug)]
pub struct ZetaEstimates {
    pub zeta1: f64,
    pub zeta2: f64,
    pub mean_grad: Vec<f64>,
}

/// Nested Monte Carlo estimate of (zeta1, zeta2) at a fixed kernel.
pub fn estimate_zetas(
    kernel: &Kernel,
    family: &SemiImplicitFamily,
    target: &ScoreTarget,
    outer: usize,
    inner: usize,
    pair_samples: usize,
    seed: u64,
) -> Result<ZetaEstimates> {
    let p = family.param_count();
    let spec = KernelSpec::fixed(*kernel);

    // zeta2 from independent pairs: Var(h) = E||h||^2 - ||E h||^2.
    let mut sum = vec![0.0; p];
    let mut sum_sq = 0.0;
    for r in 0..pair_samples {
        let mut rng = rng_for(seed, stream::DIAGNOSTIC, 1_000_000 + r as u64);
        let est = grad_with_kernel(
            Some(kernel),
            &spec,
            family,
            target,
            (1, 1),
            EstimatorKind::Vanilla,
            &mut rng,
        )?;
        for (s, g) in sum.iter_mut().zip(&est.grad) {
            *s += g;
        }
        sum_sq += est.grad.iter().map(|g| g * g).sum::<f64>();
    }
    let k = pair_samples as f64;
    let mean_grad: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let mean_norm_sq: f64 = mean_grad.iter().map(|g| g * g).sum();
    let zeta2 = (sum_sq - k * mean_norm_sq) / (k - 1.0);

    // zeta1 from conditional means: for each outer draw, average h over a
    // fresh inner batch (a one-vs-many pair sum), then take the variance of
    // those means and remove the inner-noise inflation.
    let mut cond_means: Vec<Vec<f64>> = Vec::with_capacity(outer);
    for r in 0..outer {
        let mut rng = rng_for(seed, stream::DIAGNOSTIC, 2_000_000 + r as u64);
        let est = grad_with_kernel(
            Some(kernel),
            &spec,
            family,
            target,
            (1, inner),
            EstimatorKind::Vanilla,
            &mut rng,
        )?;
        cond_means.push(est.grad);
    }
    let m = outer as f64;
    let mut mean = vec![0.0; p];
    for g in &cond_means {
        for (a, b) in mean.iter_mut().zip(g) {
            *a += b / m;
        }
    }
    let mut var_means = 0.0;
    for g in &cond_means {
        var_means += g
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    var_means /= m - 1.0;
    // E[Var(conditional estimate)] = zeta1 + (zeta2 - zeta1) / inner.
    let inv = 1.0 / inner as f64;
    let zeta1 = ((var_means - zeta2 * inv) / (1.0 - inv)).max(0.0);
    Ok(ZetaEstimates {
        zeta1,
        zeta2,
        mean_grad,
    })
}

/// Empirical and predicted variances of both estimators across sample
/// budgets. The kernel bandwidth is resolved once from a reference sample of
/// the family and then held fixed so that the proposition's formulas apply.
pub fn variance_diagnostic(
    spec: &KernelSpec,
    family: &SemiImplicitFamily,
    target: &ScoreTarget,
    budgets: &[usize],
    replications: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if replications < 100 {
        return Err(Error::TooFewReplications {
            need: 100,
            got: replications,
        });
    }
    if let Some(&bad) = budgets.iter().find(|&&n| n < 3) {
        return Err(Error::BatchTooSmall { need: 3, got: bad });
    }
    let kernel = {
        let mut rng = rng_for(seed, stream::DIAGNOSTIC, 0);
        let reference = family.sample_x(512, &mut rng)?;
        spec.resolve(&[&reference])?
    };
    let zetas = estimate_zetas(&kernel, family, target, 512, 256, 4096, seed ^ 0xabcd)?;

    let mut rows = Vec::with_capacity(budgets.len());
    for (bi, &n) in budgets.iter().enumerate() {
        let var_emp = |kind: EstimatorKind, tag: u64| -> Result<f64> {
            let p = family.param_count();
            let mut mean = vec![0.0; p];
            let mut m2 = vec![0.0; p];
            for r in 0..replications {
                let mut rng =
                    rng_for(seed, stream::DIAGNOSTIC, 3_000_000 + tag * 10_000_000 + (bi * replications + r) as u64);
                let sizes = match kind {
                    EstimatorKind::Vanilla => {
                        let half = n / 2;
                        (half.max(1), (n - half).max(1))
                    }
                    EstimatorKind::UStat => (n, 0),
                };
                let est = grad_with_kernel(Some(&kernel), spec, family, target, sizes, kind, &mut rng)?;
                let count = (r + 1) as f64;
                for ((mu, m2v), g) in mean.iter_mut().zip(m2.iter_mut()).zip(&est.grad) {
                    let delta = g - *mu;
                    *mu += delta / count;
                    *m2v += delta * (g - *mu);
                }
            }
            Ok(m2.iter().sum::<f64>() / (replications - 1) as f64)
        };
        let var_vanilla_emp = var_emp(EstimatorKind::Vanilla, 1)?;
        let var_ustat_emp = var_emp(EstimatorKind::UStat, 2)?;

        let nf = n as f64;
        let (z1, z2) = (zetas.zeta1, zetas.zeta2);
        let var_vanilla_pred = 4.0 * (nf - 2.0) * z1 / (nf * nf) + 4.0 * z2 / (nf * nf);
        let var_ustat_pred = 4.0 * (nf - 2.0) * z1 / (nf * (nf - 1.0)) + 2.0 * z2 / (nf * (nf - 1.0));
        let diff_pred = 2.0 * (nf - 2.0) * (2.0 * z1 - z2) / (nf * nf * (nf - 1.0));
        let var_vanilla_pred_size_n_each = 2.0 * (nf - 1.0) * z1 / (nf * nf) + z2 / (nf * nf);
        rows.push(VarianceRow {
            n,
            var_vanilla_emp,
            var_ustat_emp,
            var_vanilla_pred,
            var_ustat_pred,
            diff_emp: var_ustat_emp - var_vanilla_emp,
            diff_pred,
            var_vanilla_pred_size_n_each,
        });
    }
    Ok(rows)
}
