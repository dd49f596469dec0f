//! Score-based target distributions and annealed interpolation paths.
//!
//! A target exposes its score (the gradient of its log-density) three ways:
//! per-point, batched over sample rows, and as a differentiable tape graph.
//! The tape form is what the KSD gradient estimators backpropagate through;
//! the batched form is the fast path for Langevin samplers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal_vec, stream};
use crate::tensor::{Tape, Tensor, Var};

/// Drift coefficient of the double-well Langevin SDE dx = 10 x (1 - x^2) dt + dw.
const DIFFUSION_DRIFT: f64 = 10.0;

/// Target distribution known through its score, and where tractable, its
/// log-density up to an additive constant.
#[derive(Clone, Debug)]
pub enum ScoreTarget {
    StandardNormal {
        dim: usize,
    },
    /// Pushforward of N(0, [[1, .9], [.9, 1]]) under x = (v1, v1^2 + v2 + 1).
    Banana,
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        precisions: Vec<Tensor>,
        /// log w_j + 0.5 log det P_j - (d/2) log 2 pi, per component.
        log_consts: Vec<f64>,
    },
    /// Product of independent Student's t marginals.
    StudentTProduct {
        dim: usize,
        nu: f64,
    },
    /// Posterior of logistic regression with N(0, alpha^-1 I) prior.
    LogisticRegression {
        /// n x (d+1) covariates with intercept column prepended.
        x_bar: Tensor,
        labels: Vec<f64>,
        alpha: f64,
    },
    /// Discretized conditioned double-well diffusion; the latent variable is
    /// the whole Euler-Maruyama path (x_1, ..., x_steps), observed with
    /// Gaussian noise every `obs_every` steps.
    ConditionedDiffusion {
        dt: f64,
        steps: usize,
        obs_every: usize,
        obs_noise: f64,
        observations: Vec<f64>,
    },
    /// Score scaled by 1/tau.
    Tempered {
        inner: Box<ScoreTarget>,
        tau: f64,
    },
    /// Geometric interpolation: score = (1 - lambda) s_base + lambda s_final.
    Annealed {
        base: Box<ScoreTarget>,
        final_target: Box<ScoreTarget>,
        lambda: f64,
    },
}

impl ScoreTarget {
    pub fn standard_normal(dim: usize) -> Self {
        ScoreTarget::StandardNormal { dim }
    }

    pub fn banana() -> Self {
        ScoreTarget::Banana
    }

    pub fn gaussian_mixture(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Tensor>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(Error::InvalidTarget(
                "mixture needs matching non-empty weights/means/covariances".into(),
            ));
        }
        let d = means[0].len();
        let wsum: f64 = weights.iter().sum();
        let mut precisions = Vec::new();
        let mut log_consts = Vec::new();
        for ((w, mu), cov) in weights.iter().zip(&means).zip(&covariances) {
            if mu.len() != d || cov.shape() != (d, d) {
                return Err(Error::InvalidTarget("mixture component dimension mismatch".into()));
            }
            let (prec, log_det_cov) = invert_spd(cov)?;
            log_consts.push(
                (w / wsum).ln() - 0.5 * log_det_cov - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
            );
            precisions.push(prec);
        }
        Ok(ScoreTarget::GaussianMixture {
            weights: weights.iter().map(|w| w / wsum).collect(),
            means,
            precisions,
            log_consts,
        })
    }

    /// Equal mixture of N((-2, 0), I) and N((2, 0), I).
    pub fn multimodal() -> Self {
        Self::gaussian_mixture(
            vec![0.5, 0.5],
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            vec![Tensor::identity(2), Tensor::identity(2)],
        )
        .expect("fixed parameters")
    }

    /// Equal mixture of two centered correlated Gaussians forming an X.
    pub fn x_shaped() -> Self {
        Self::gaussian_mixture(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![
                Tensor::new(2, 2, vec![2.0, 1.8, 1.8, 2.0]),
                Tensor::new(2, 2, vec![2.0, -1.8, -1.8, 2.0]),
            ],
        )
        .expect("fixed parameters")
    }

    /// Eight unit-variance modes at radius 10, every 45 degrees.
    pub fn eight_gaussians() -> Self {
        let means: Vec<Vec<f64>> = (1..=8)
            .map(|i| {
                let angle = i as f64 * std::f64::consts::PI / 4.0;
                vec![10.0 * angle.cos(), 10.0 * angle.sin()]
            })
            .collect();
        Self::gaussian_mixture(
            vec![1.0 / 8.0; 8],
            means,
            (0..8).map(|_| Tensor::identity(2)).collect(),
        )
        .expect("fixed parameters")
    }

    pub fn student_t_product(dim: usize, nu: f64) -> Result<Self> {
        if nu <= 0.0 {
            return Err(Error::InvalidTarget(format!(
                "Student-t degrees of freedom must be positive, got {nu}"
            )));
        }
        Ok(ScoreTarget::StudentTProduct { dim, nu })
    }

    pub fn logistic_regression(x_bar: Tensor, labels: Vec<f64>, alpha: f64) -> Result<Self> {
        if x_bar.rows() != labels.len() {
            return Err(Error::InvalidTarget(format!(
                "covariate rows {} do not match label count {}",
                x_bar.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidTarget("labels must be binary".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "prior inverse variance must be positive, got {alpha}"
            )));
        }
        Ok(ScoreTarget::LogisticRegression { x_bar, labels, alpha })
    }

    pub fn tempered(self, tau: f64) -> Result<Self> {
        if !(tau >= 1.0) {
            return Err(Error::InvalidTemperature(tau));
        }
        Ok(ScoreTarget::Tempered { inner: Box::new(self), tau })
    }

    pub fn annealed(base: ScoreTarget, final_target: ScoreTarget, lambda: f64) -> Self {
        ScoreTarget::Annealed {
            base: Box::new(base),
            final_target: Box::new(final_target),
            lambda,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreTarget::StandardNormal { dim } => *dim,
            ScoreTarget::Banana => 2,
            ScoreTarget::GaussianMixture { means, .. } => means[0].len(),
            ScoreTarget::StudentTProduct { dim, .. } => *dim,
            ScoreTarget::LogisticRegression { x_bar, .. } => x_bar.cols(),
            ScoreTarget::ConditionedDiffusion { steps, .. } => *steps,
            ScoreTarget::Tempered { inner, .. } => inner.dim(),
            ScoreTarget::Annealed { final_target, .. } => final_target.dim(),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "target score input",
                expected: format!("{}", self.dim()),
                got: format!("{got}"),
            });
        }
        Ok(())
    }

    /// Score at a single point.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(match self {
            ScoreTarget::StandardNormal { .. } => x.iter().map(|v| -v).collect(),
            ScoreTarget::Banana => {
                let (w1, w2) = banana_whitened(x);
                vec![w1 - 2.0 * x[0] * w2, w2]
            }
            ScoreTarget::GaussianMixture {
                means,
                precisions,
                log_consts,
                ..
            } => {
                let k = means.len();
                let d = x.len();
                let mut logps = Vec::with_capacity(k);
                let mut comp_scores = Vec::with_capacity(k);
                for j in 0..k {
                    let diff: Vec<f64> = x.iter().zip(&means[j]).map(|(a, b)| a - b).collect();
                    let pd = mat_vec(&precisions[j], &diff);
                    let quad: f64 = diff.iter().zip(&pd).map(|(a, b)| a * b).sum();
                    logps.push(log_consts[j] - 0.5 * quad);
                    comp_scores.push(pd.iter().map(|v| -v).collect::<Vec<f64>>());
                }
                let m = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let resp: Vec<f64> = logps.iter().map(|lp| (lp - m).exp()).collect();
                let denom: f64 = resp.iter().sum();
                let mut out = vec![0.0; d];
                for j in 0..k {
                    let w = resp[j] / denom;
                    for l in 0..d {
                        out[l] += w * comp_scores[j][l];
                    }
                }
                out
            }
            ScoreTarget::StudentTProduct { nu, .. } => {
                x.iter().map(|&v| -(nu + 1.0) * v / (nu + v * v)).collect()
            }
            ScoreTarget::LogisticRegression { x_bar, labels, alpha } => {
                let mut out: Vec<f64> = x.iter().map(|b| -alpha * b).collect();
                for i in 0..x_bar.rows() {
                    let row = x_bar.row_slice(i);
                    let logit: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    let resid = labels[i] - sigmoid(logit);
                    for (o, &xi) in out.iter_mut().zip(row) {
                        *o += resid * xi;
                    }
                }
                out
            }
            ScoreTarget::ConditionedDiffusion {
                dt,
                steps,
                obs_every,
                obs_noise,
                observations,
            } => {
                let d = *steps;
                let mut out = vec![0.0; d];
                for j in 0..d {
                    let prev = if j == 0 { 0.0 } else { x[j - 1] };
                    out[j] -= (x[j] - drift_mean(prev, *dt)) / dt;
                    if j + 1 < d {
                        out[j] += (x[j + 1] - drift_mean(x[j], *dt)) / dt * drift_mean_deriv(x[j], *dt);
                    }
                    if (j + 1) % obs_every == 0 {
                        let y = observations[(j + 1) / obs_every - 1];
                        out[j] += (y - x[j]) / (obs_noise * obs_noise);
                    }
                }
                out
            }
            ScoreTarget::Tempered { inner, tau } => {
                inner.score(x)?.iter().map(|v| v / tau).collect()
            }
            ScoreTarget::Annealed {
                base,
                final_target,
                lambda,
            } => {
                let sb = base.score(x)?;
                let sf = final_target.score(x)?;
                sb.iter()
                    .zip(&sf)
                    .map(|(b, f)| (1.0 - lambda) * b + lambda * f)
                    .collect()
            }
        })
    }

    /// Score of every row of an n x d matrix.
    pub fn score_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x.cols())?;
        match self {
            // Matrix fast path: the Langevin ground truth for logistic
            // regression is dominated by these two products.
            ScoreTarget::LogisticRegression { x_bar, labels, alpha } => {
                let mut logits = crate::tensor::matmul(x, x_bar, false, true); // n x data
                for i in 0..logits.rows() {
                    for (o, &y) in logits.row_slice_mut(i).iter_mut().zip(labels) {
                        *o = y - sigmoid(*o);
                    }
                }
                let mut out = crate::tensor::matmul(&logits, x_bar, false, false); // n x (d+1)
                for (o, &b) in out.data_mut().iter_mut().zip(x.data()) {
                    *o -= alpha * b;
                }
                Ok(out)
            }
            ScoreTarget::Tempered { inner, tau } => {
                let mut s = inner.score_batch(x)?;
                let inv = 1.0 / tau;
                for v in s.data_mut() {
                    *v *= inv;
                }
                Ok(s)
            }
            ScoreTarget::Annealed {
                base,
                final_target,
                lambda,
            } => {
                let sb = base.score_batch(x)?;
                let mut sf = final_target.score_batch(x)?;
                for (f, &b) in sf.data_mut().iter_mut().zip(sb.data()) {
                    *f = (1.0 - lambda) * b + lambda * *f;
                }
                Ok(sf)
            }
            _ => {
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let s = self.score(x.row_slice(i))?;
                    out.row_slice_mut(i).copy_from_slice(&s);
                }
                Ok(out)
            }
        }
    }

    /// Log-density up to an additive constant.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(match self {
            ScoreTarget::StandardNormal { .. } => -0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            ScoreTarget::Banana => {
                let v1 = x[0];
                let v2 = x[1] - x[0] * x[0] - 1.0;
                // v^T Sigma^-1 v with Sigma = [[1, .9], [.9, 1]]; |det J| = 1.
                let (a, b) = banana_precision();
                -0.5 * (a * v1 * v1 + 2.0 * b * v1 * v2 + a * v2 * v2)
            }
            ScoreTarget::GaussianMixture {
                means,
                precisions,
                log_consts,
                ..
            } => {
                let mut logps = Vec::with_capacity(means.len());
                for j in 0..means.len() {
                    let diff: Vec<f64> = x.iter().zip(&means[j]).map(|(a, b)| a - b).collect();
                    let pd = mat_vec(&precisions[j], &diff);
                    let quad: f64 = diff.iter().zip(&pd).map(|(a, b)| a * b).sum();
                    logps.push(log_consts[j] - 0.5 * quad);
                }
                log_sum_exp(&logps)
            }
            ScoreTarget::StudentTProduct { nu, .. } => x
                .iter()
                .map(|&v| -0.5 * (nu + 1.0) * (v * v / nu).ln_1p())
                .sum(),
            ScoreTarget::LogisticRegression { x_bar, labels, alpha } => {
                let mut total = -0.5 * alpha * x.iter().map(|v| v * v).sum::<f64>();
                for i in 0..x_bar.rows() {
                    let logit: f64 = x_bar.row_slice(i).iter().zip(x).map(|(a, b)| a * b).sum();
                    total += labels[i] * logit - log1p_exp(logit);
                }
                total
            }
            ScoreTarget::ConditionedDiffusion { .. } => {
                let (prior, lik) = self.cond_diffusion_log_parts(x)?;
                prior + lik
            }
            ScoreTarget::Tempered { inner, tau } => inner.log_density(x)? / tau,
            ScoreTarget::Annealed {
                base,
                final_target,
                lambda,
            } => (1.0 - lambda) * base.log_density(x)? + lambda * final_target.log_density(x)?,
        })
    }

    /// Log-density of every row.
    pub fn log_density_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_dim(x.cols())?;
        match self {
            ScoreTarget::LogisticRegression { x_bar, labels, alpha } => {
                let logits = crate::tensor::matmul(x, x_bar, false, true);
                let mut out = Vec::with_capacity(x.rows());
                for i in 0..x.rows() {
                    let mut total = -0.5 * alpha * x.row_slice(i).iter().map(|v| v * v).sum::<f64>();
                    for (&t, &y) in logits.row_slice(i).iter().zip(labels) {
                        total += y * t - log1p_exp(t);
                    }
                    out.push(total);
                }
                Ok(out)
            }
            _ => (0..x.rows()).map(|i| self.log_density(x.row_slice(i))).collect(),
        }
    }

    pub fn has_log_density(&self) -> bool {
        match self {
            ScoreTarget::Tempered { inner, .. } => inner.has_log_density(),
            ScoreTarget::Annealed {
                base, final_target, ..
            } => base.has_log_density() && final_target.has_log_density(),
            _ => true,
        }
    }

    /// Prior and observation terms of the conditioned-diffusion log-density.
    pub fn cond_diffusion_log_parts(&self, x: &[f64]) -> Result<(f64, f64)> {
        let ScoreTarget::ConditionedDiffusion {
            dt,
            steps,
            obs_every,
            obs_noise,
            observations,
        } = self
        else {
            return Err(Error::InvalidTarget("not a conditioned diffusion".into()));
        };
        self.check_dim(x.len())?;
        let mut prior = 0.0;
        let mut lik = 0.0;
        for j in 0..*steps {
            let prev = if j == 0 { 0.0 } else { x[j - 1] };
            let resid = x[j] - drift_mean(prev, *dt);
            prior -= resid * resid / (2.0 * dt);
            if (j + 1) % obs_every == 0 {
                let y = observations[(j + 1) / obs_every - 1];
                lik -= (y - x[j]) * (y - x[j]) / (2.0 * obs_noise * obs_noise);
            }
        }
        Ok((prior, lik))
    }

    /// Differentiable batched score: rows of `x` are sample points.
    pub fn score_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_dim(tape.value(x).cols())?;
        let n = tape.value(x).rows();
        Ok(match self {
            ScoreTarget::StandardNormal { .. } => tape.scale(x, -1.0),
            ScoreTarget::Banana => {
                let e1 = tape.constant(Tensor::new(2, 1, vec![1.0, 0.0]));
                let e2 = tape.constant(Tensor::new(2, 1, vec![0.0, 1.0]));
                let c1 = tape.matmul(x, e1); // n x 1
                let c2 = tape.matmul(x, e2);
                let c1sq = tape.mul(c1, c1);
                let v2_raw = tape.sub(c2, c1sq);
                let v2 = tape.add_scalar(v2_raw, -1.0);
                // Whitened w = -Sigma^-1 v.
                let (a, b) = banana_precision();
                let av1 = tape.scale(c1, -a);
                let bv2 = tape.scale(v2, -b);
                let w1 = tape.add(av1, bv2);
                let bv1 = tape.scale(c1, -b);
                let av2 = tape.scale(v2, -a);
                let w2 = tape.add(bv1, av2);
                // score = (w1 - 2 x1 w2, w2)
                let two_c1 = tape.scale(c1, 2.0);
                let corr = tape.mul(two_c1, w2);
                let s1 = tape.sub(w1, corr);
                let row1 = tape.constant(Tensor::row(&[1.0, 0.0]));
                let row2 = tape.constant(Tensor::row(&[0.0, 1.0]));
                let s1m = tape.matmul(s1, row1); // n x 2 outer product
                let s2m = tape.matmul(w2, row2);
                tape.add(s1m, s2m)
            }
            ScoreTarget::GaussianMixture {
                means,
                precisions,
                log_consts,
                ..
            } => {
                let k = means.len();
                let d = means[0].len();
                let mut logp_vars = Vec::with_capacity(k);
                let mut neg_pd = Vec::with_capacity(k);
                for j in 0..k {
                    let neg_mu = tape.constant(Tensor::row(
                        &means[j].iter().map(|m| -m).collect::<Vec<_>>(),
                    ));
                    let neg_mu_b = tape.broadcast_row(neg_mu, n);
                    let diff = tape.add(x, neg_mu_b);
                    let prec = tape.constant(precisions[j].clone());
                    let pd = tape.matmul(diff, prec); // n x d (precision symmetric)
                    let prod = tape.mul(pd, diff);
                    let quad = tape.sum_rows(prod); // n x 1
                    let half = tape.scale(quad, -0.5);
                    logp_vars.push(tape.add_scalar(half, log_consts[j]));
                    neg_pd.push(tape.scale(pd, -1.0));
                }
                // Row-wise max shift, detached: softmax is shift-invariant, so
                // treating the max as a constant leaves gradients exact.
                let mut max_vals = vec![f64::NEG_INFINITY; n];
                for lp in &logp_vars {
                    for (m, &v) in max_vals.iter_mut().zip(tape.value(*lp).data()) {
                        *m = m.max(v);
                    }
                }
                let shift = tape.constant(Tensor::new(n, 1, max_vals.iter().map(|m| -m).collect()));
                let mut resp = Vec::with_capacity(k);
                for lp in &logp_vars {
                    let shifted = tape.add(*lp, shift);
                    resp.push(tape.exp(shifted));
                }
                let mut denom = resp[0];
                for r in &resp[1..] {
                    denom = tape.add(denom, *r);
                }
                let mut score: Option<Var> = None;
                for j in 0..k {
                    let w = tape.div(resp[j], denom); // n x 1
                    let wb = tape.broadcast_col(w, d);
                    let term = tape.mul(wb, neg_pd[j]);
                    score = Some(match score {
                        None => term,
                        Some(acc) => tape.add(acc, term),
                    });
                }
                score.expect("k >= 1")
            }
            ScoreTarget::StudentTProduct { nu, .. } => {
                let num = tape.scale(x, -(nu + 1.0));
                let xsq = tape.mul(x, x);
                let den = tape.add_scalar(xsq, *nu);
                tape.div(num, den)
            }
            ScoreTarget::LogisticRegression { x_bar, labels, alpha } => {
                let data = tape.constant(x_bar.clone());
                let logits = tape.matmul_nt(x, data); // n x n_data
                let probs = tape_sigmoid(tape, logits);
                let y = tape.constant(Tensor::row(labels));
                let yb = tape.broadcast_row(y, n);
                let resid = tape.sub(yb, probs);
                let lik = tape.matmul(resid, data); // n x (d+1)
                let prior = tape.scale(x, -*alpha);
                tape.add(lik, prior)
            }
            ScoreTarget::ConditionedDiffusion {
                dt,
                steps,
                obs_every,
                obs_noise,
                observations,
            } => {
                let d = *steps;
                // prev[:, j] = x[:, j-1] with x_0 = 0, via a constant shift matrix.
                let mut shift_prev = Tensor::zeros(d, d);
                for j in 1..d {
                    shift_prev.set(j - 1, j, 1.0);
                }
                let sp = tape.constant(shift_prev);
                let prev = tape.matmul(x, sp);
                // Transition mean m(v) = (1 + 10 dt) v - 10 dt v^3.
                let lin = tape.scale(prev, 1.0 + DIFFUSION_DRIFT * dt);
                let prev3 = tape.pow_const(prev, 3.0);
                let cub = tape.scale(prev3, -DIFFUSION_DRIFT * dt);
                let mean = tape.add(lin, cub);
                let resid_raw = tape.sub(x, mean);
                let resid = tape.scale(resid_raw, 1.0 / dt); // (x_j - m(x_{j-1})) / dt
                let own = tape.scale(resid, -1.0);
                // next[:, j] = resid[:, j+1], zero in the last column.
                let mut shift_next = Tensor::zeros(d, d);
                for j in 0..d - 1 {
                    shift_next.set(j + 1, j, 1.0);
                }
                let sn = tape.constant(shift_next);
                let resid_next = tape.matmul(resid, sn);
                // m'(v) = 1 + 10 dt (1 - 3 v^2).
                let xsq = tape.mul(x, x);
                let msq = tape.scale(xsq, -3.0 * DIFFUSION_DRIFT * dt);
                let mprime = tape.add_scalar(msq, 1.0 + DIFFUSION_DRIFT * dt);
                let chain = tape.mul(resid_next, mprime);
                // Observation pull on observed coordinates.
                let mut y_row = vec![0.0; d];
                let mut mask_row = vec![0.0; d];
                for (k, &y) in observations.iter().enumerate() {
                    y_row[(k + 1) * obs_every - 1] = y;
                    mask_row[(k + 1) * obs_every - 1] = 1.0;
                }
                let yc = tape.constant(Tensor::row(&y_row));
                let yb = tape.broadcast_row(yc, n);
                let mc = tape.constant(Tensor::row(&mask_row));
                let mb = tape.broadcast_row(mc, n);
                let dev = tape.sub(yb, x);
                let masked = tape.mul(dev, mb);
                let pull = tape.scale(masked, 1.0 / (obs_noise * obs_noise));
                let prior_part = tape.add(own, chain);
                tape.add(prior_part, pull)
            }
            ScoreTarget::Tempered { inner, tau } => {
                let s = inner.score_tape(tape, x)?;
                tape.scale(s, 1.0 / tau)
            }
            ScoreTarget::Annealed {
                base,
                final_target,
                lambda,
            } => {
                let sb = base.score_tape(tape, x)?;
                let sf = final_target.score_tape(tape, x)?;
                let wb = tape.scale(sb, 1.0 - lambda);
                let wf = tape.scale(sf, *lambda);
                tape.add(wb, wf)
            }
        })
    }
}

/// Score with temperature tau >= 1: (1/tau) score(x). tau = 1 recovers the
/// target; errors when tau < 1.
pub fn tempered_score(target: &ScoreTarget, tau: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(tau >= 1.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(target.score(x)?.into_iter().map(|v| v / tau).collect())
}

/// Annealed path from a simple base distribution (lambda = 0 end) to the
/// final target (lambda = 1 end), linear in score space.
#[derive(Clone, Debug)]
pub struct AnnealedPath {
    pub base: ScoreTarget,
    pub final_target: ScoreTarget,
    /// lambda_t per layer, decreasing, lambda_0 = 1.
    pub lambdas: Vec<f64>,
}

impl AnnealedPath {
    /// Linear schedule lambda_t = 1 - t/T for t in 0..T.
    pub fn linear(base: ScoreTarget, final_target: ScoreTarget, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidTarget("annealed path needs at least one layer".into()));
        }
        if base.dim() != final_target.dim() {
            return Err(Error::ShapeMismatch {
                context: "annealed path targets",
                expected: format!("{}", final_target.dim()),
                got: format!("{}", base.dim()),
            });
        }
        let t_total = layers as f64;
        let lambdas = (0..layers).map(|t| 1.0 - t as f64 / t_total).collect();
        Ok(AnnealedPath {
            base,
            final_target,
            lambdas,
        })
    }

    pub fn layers(&self) -> usize {
        self.lambdas.len()
    }

    pub fn dim(&self) -> usize {
        self.final_target.dim()
    }

    pub fn lambda(&self, t: usize) -> Result<f64> {
        self.lambdas.get(t).copied().ok_or(Error::LayerOutOfRange {
            index: t,
            layers: self.lambdas.len(),
        })
    }

    /// Target whose score is (1 - lambda_t) s_base + lambda_t s_final.
    pub fn target_at(&self, t: usize) -> Result<ScoreTarget> {
        let lambda = self.lambda(t)?;
        if lambda == 1.0 {
            // Layer 0 reproduces the final target's score exactly.
            return Ok(self.final_target.clone());
        }
        Ok(ScoreTarget::annealed(
            self.base.clone(),
            self.final_target.clone(),
            lambda,
        ))
    }
}

/// Score of layer t of an annealed path.
pub fn annealed_score(path: &AnnealedPath, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    path.target_at(t)?.score(x)
}

/// Synthetic logistic-regression posterior: ground-truth coefficients and
/// covariates drawn from standard normals, labels from the logistic model,
/// intercept column prepended. Deterministic under the seed.
pub fn synthesize_logreg(n: usize, d: usize, seed: u64) -> Result<ScoreTarget> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidTarget(format!(
            "synthetic dataset needs n, d >= 1, got n={n}, d={d}"
        )));
    }
    let mut rng = rng_for(seed, stream::DATASET, 0);
    let beta_true = standard_normal_vec(&mut rng, d + 1);
    let mut x_bar = Tensor::zeros(n, d + 1);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = x_bar.row_slice_mut(i);
        row[0] = 1.0;
        for item in row.iter_mut().skip(1) {
            *item = rng.sample(rand_distr::StandardNormal);
        }
        let logit: f64 = row.iter().zip(&beta_true).map(|(a, b)| a * b).sum();
        let u: f64 = rng.gen();
        labels.push(if u < sigmoid(logit) { 1.0 } else { 0.0 });
    }
    ScoreTarget::logistic_regression(x_bar, labels, 0.01)
}

/// Observations for a conditioned diffusion, generated once by a seeded
/// forward simulation of the same SDE discretization.
pub fn simulate_diffusion_observations(
    dt: f64,
    steps: usize,
    obs_every: usize,
    obs_noise: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = rng_for(seed, stream::DATASET, 1);
    let mut x = 0.0;
    let mut obs = Vec::new();
    for j in 0..steps {
        let noise: f64 = rng.sample(rand_distr::StandardNormal);
        x = drift_mean(x, dt) + dt.sqrt() * noise;
        if (j + 1) % obs_every == 0 {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            obs.push(x + obs_noise * eps);
        }
    }
    obs
}

pub fn conditioned_diffusion(
    dt: f64,
    steps: usize,
    obs_every: usize,
    obs_noise: f64,
    observations: Vec<f64>,
) -> Result<ScoreTarget> {
    if steps == 0 || obs_every == 0 || steps % obs_every != 0 {
        return Err(Error::InvalidTarget(format!(
            "steps {steps} must be a positive multiple of obs_every {obs_every}"
        )));
    }
    if observations.len() != steps / obs_every {
        return Err(Error::InvalidTarget(format!(
            "expected {} observations, got {}",
            steps / obs_every,
            observations.len()
        )));
    }
    if !(dt > 0.0) || !(obs_noise > 0.0) {
        return Err(Error::InvalidTarget("dt and obs_noise must be positive".into()));
    }
    Ok(ScoreTarget::ConditionedDiffusion {
        dt,
        steps,
        obs_every,
        obs_noise,
        observations,
    })
}

fn drift_mean(v: f64, dt: f64) -> f64 {
    v + DIFFUSION_DRIFT * v * (1.0 - v * v) * dt
}

fn drift_mean_deriv(v: f64, dt: f64) -> f64 {
    1.0 + DIFFUSION_DRIFT * (1.0 - 3.0 * v * v) * dt
}

/// Entries (a, b) of Sigma^-1 = [[a, b], [b, a]] for the banana's base
/// covariance [[1, .9], [.9, 1]].
fn banana_precision() -> (f64, f64) {
    let det = 1.0 - 0.9 * 0.9;
    (1.0 / det, -0.9 / det)
}

/// Whitened base-score components w = -Sigma^-1 v at the pulled-back point.
fn banana_whitened(x: &[f64]) -> (f64, f64) {
    let v1 = x[0];
    let v2 = x[1] - x[0] * x[0] - 1.0;
    let (a, b) = banana_precision();
    (-(a * v1 + b * v2), -(b * v1 + a * v2))
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(t)) without overflow.
fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Batched sigmoid on the tape, composed as 1 / (1 + exp(-z)).
pub(crate) fn tape_sigmoid(tape: &mut Tape, z: Var) -> Var {
    let neg = tape.scale(z, -1.0);
    let e = tape.exp(neg);
    let denom = tape.add_scalar(e, 1.0);
    let (r, c) = tape.value(denom).shape();
    let one = tape.constant(Tensor::full(r, c, 1.0));
    tape.div(one, denom)
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row_slice(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting; returns (inverse, log det).
/// Adequate for the small SPD covariances used by the mixture targets.
fn invert_spd(m: &Tensor) -> Result<(Tensor, f64)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::InvalidTarget("covariance must be square".into()));
    }
    let mut a = m.clone();
    let mut inv = Tensor::identity(n);
    let mut log_det = 0.0;
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a.get(r, col).abs() > a.get(pivot, col).abs() {
                pivot = r;
            }
        }
        let pv = a.get(pivot, col);
        if pv.abs() < 1e-300 {
            return Err(Error::InvalidTarget("singular covariance".into()));
        }
        if pivot != col {
            for j in 0..n {
                let (x, y) = (a.get(col, j), a.get(pivot, j));
                a.set(col, j, y);
                a.set(pivot, j, x);
                let (x, y) = (inv.get(col, j), inv.get(pivot, j));
                inv.set(col, j, y);
                inv.set(pivot, j, x);
            }
        }
        log_det += pv.abs().ln();
        for j in 0..n {
            a.set(col, j, a.get(col, j) / pv);
            inv.set(col, j, inv.get(col, j) / pv);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a.get(r, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a.set(r, j, a.get(r, j) - factor * a.get(col, j));
                inv.set(r, j, inv.get(r, j) - factor * inv.get(col, j));
            }
        }
    }
    Ok((inv, log_det))
}
