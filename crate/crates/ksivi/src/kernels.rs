//! Positive-(semi)definite kernels, their input gradients, the median
//! bandwidth heuristic, and the Stein kernel.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Reproducing kernel, evaluated through the squared distance u = ||x - y||^2.
///
/// - `GaussianRbf`: k = exp(-u / (2 s^2)), values in (0, 1].
/// - `Imq`: k = (c^2 + u)^beta with beta in (-1, 0), values in (0, c^(2 beta)].
/// - `RieszSmoothed`: k = -(u + eps^2)^(r/2), a heavy-tailed (conditionally
///   positive definite) kernel; eps > 0 smooths the singularity at x = y so
///   first derivatives exist through reparameterized samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    GaussianRbf { bandwidth: f64 },
    Imq { c: f64, beta: f64 },
    RieszSmoothed { order: f64, epsilon: f64 },
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidKernel(format!(
                "RBF bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Kernel::GaussianRbf { bandwidth })
    }

    pub fn imq(c: f64, beta: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidKernel(format!("IMQ offset must be positive, got {c}")));
        }
        if !(-1.0 < beta && beta < 0.0) {
            return Err(Error::InvalidKernel(format!(
                "IMQ exponent must lie in (-1, 0), got {beta}"
            )));
        }
        Ok(Kernel::Imq { c, beta })
    }

    pub fn riesz(order: f64, epsilon: f64) -> Result<Self> {
        if !(0.0 < order && order < 2.0) {
            return Err(Error::InvalidKernel(format!(
                "Riesz order must lie in (0, 2), got {order}"
            )));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidKernel(format!(
                "Riesz smoothing must be non-negative, got {epsilon}"
            )));
        }
        Ok(Kernel::RieszSmoothed { order, epsilon })
    }

    /// Kernel value from the squared distance.
    pub fn eval_sqdist(&self, u: f64) -> f64 {
        match *self {
            Kernel::GaussianRbf { bandwidth } => (-u / (2.0 * bandwidth * bandwidth)).exp(),
            Kernel::Imq { c, beta } => (c * c + u).powf(beta),
            Kernel::RieszSmoothed { order, epsilon } => -(u + epsilon * epsilon).powf(order / 2.0),
        }
    }

    /// dk/du where u = ||x - y||^2, so that grad_x k = 2 (x - y) dk/du.
    fn deriv_sqdist(&self, u: f64) -> f64 {
        match *self {
            Kernel::GaussianRbf { bandwidth } => {
                let s2 = bandwidth * bandwidth;
                -self.eval_sqdist(u) / (2.0 * s2)
            }
            Kernel::Imq { c, beta } => beta * (c * c + u).powf(beta - 1.0),
            Kernel::RieszSmoothed { order, epsilon } => {
                let r = order;
                -(r / 2.0) * (u + epsilon * epsilon).powf(r / 2.0 - 1.0)
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.eval_sqdist(sqdist(x, y)))
    }

    /// Gradients with respect to both arguments: (grad_1 k, grad_2 k), with
    /// grad_2 k(x, y) = grad_1 k(y, x).
    pub fn grad(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dims(x, y)?;
        let u = sqdist(x, y);
        if u == 0.0 {
            if let Kernel::RieszSmoothed { epsilon, .. } = *self {
                if epsilon == 0.0 {
                    return Err(Error::RieszSingularity);
                }
            }
        }
        let du = self.deriv_sqdist(u);
        let g1: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| 2.0 * (xi - yi) * du).collect();
        let g2: Vec<f64> = g1.iter().map(|v| -v).collect();
        Ok((g1, g2))
    }

    /// Trace of the mixed second derivative, sum_l d^2 k / dx_l dy_l.
    /// Only defined for twice-differentiable kernels (RBF, IMQ).
    fn grad12_trace(&self, u: f64, dim: usize) -> Result<f64> {
        let d = dim as f64;
        match *self {
            Kernel::GaussianRbf { bandwidth } => {
                let s2 = bandwidth * bandwidth;
                let k = self.eval_sqdist(u);
                Ok(k * (d / s2 - u / (s2 * s2)))
            }
            Kernel::Imq { c, beta } => {
                let base = c * c + u;
                Ok(-2.0 * beta * d * base.powf(beta - 1.0)
                    - 4.0 * beta * (beta - 1.0) * u * base.powf(beta - 2.0))
            }
            Kernel::RieszSmoothed { .. } => Err(Error::KernelNotTwiceDifferentiable),
        }
    }

    pub fn is_twice_differentiable(&self) -> bool {
        !matches!(self, Kernel::RieszSmoothed { .. })
    }

    /// Apply the kernel element-wise to a tape node of squared distances.
    pub fn apply_tape(&self, tape: &mut Tape, sqdists: Var) -> Var {
        match *self {
            Kernel::GaussianRbf { bandwidth } => {
                let scaled = tape.scale(sqdists, -1.0 / (2.0 * bandwidth * bandwidth));
                tape.exp(scaled)
            }
            Kernel::Imq { c, beta } => {
                let shifted = tape.add_scalar(sqdists, c * c);
                tape.pow_const(shifted, beta)
            }
            Kernel::RieszSmoothed { order, epsilon } => {
                let shifted = tape.add_scalar(sqdists, epsilon * epsilon);
                let p = tape.pow_const(shifted, order / 2.0);
                tape.scale(p, -1.0)
            }
        }
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            context: "kernel arguments",
            expected: format!("{}", x.len()),
            got: format!("{}", y.len()),
        });
    }
    Ok(())
}

pub(crate) fn sqdist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median of the n(n-1)/2 pairwise Euclidean distances between the rows of
/// `samples`. Falls back to 1 when the median distance is 0 (all points
/// coincide). Errors when fewer than 2 rows are given.
pub fn median_bandwidth(samples: &Tensor) -> Result<f64> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = samples.row_slice(i);
        for j in (i + 1)..n {
            dists.push(sqdist(ri, samples.row_slice(j)).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("non-finite pairwise distance"));
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if median == 0.0 { 1.0 } else { median })
}

/// Stein kernel
/// k_p(x, y) = s_p(x)^T s_p(y) k + s_p(x)^T grad_2 k + grad_1 k^T s_p(y)
///             + trace(grad_1 grad_2 k),
/// the positive-definite kernel whose expectation under q x q is KSD(q||p)^2.
pub fn stein_kernel(
    kernel: &Kernel,
    score: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    check_dims(x, y)?;
    stein_kernel_with_scores(kernel, x, y, &score(x), &score(y))
}

/// Stein kernel with precomputed scores, so U-statistic sweeps evaluate each
/// score once instead of O(n^2) times.
pub(crate) fn stein_kernel_with_scores(
    kernel: &Kernel,
    x: &[f64],
    y: &[f64],
    sx: &[f64],
    sy: &[f64],
) -> Result<f64> {
    if !kernel.is_twice_differentiable() {
        return Err(Error::KernelNotTwiceDifferentiable);
    }
    let u = sqdist(x, y);
    let k = kernel.eval_sqdist(u);
    let du = kernel.deriv_sqdist(u);
    let mut dot_ss = 0.0;
    let mut sx_g2 = 0.0;
    let mut g1_sy = 0.0;
    for l in 0..x.len() {
        let diff = x[l] - y[l];
        dot_ss += sx[l] * sy[l];
        sx_g2 += sx[l] * (-2.0 * diff * du);
        g1_sy += (2.0 * diff * du) * sy[l];
    }
    Ok(dot_ss * k + sx_g2 + g1_sy + kernel.grad12_trace(u, x.len())?)
}

/// How the bandwidth of an RBF kernel is chosen at each use site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bandwidth {
    /// Use the kernel's stored parameters as-is.
    Fixed,
    /// Recomputed from the current sample batch and treated as a constant
    /// with respect to the variational parameters.
    Median,
    /// Median pairwise distance scaled by 1 / sqrt(2 ln(n + 1)), the kernel
    /// width heuristic of Stein variational gradient descent: at the median
    /// spacing, the mass of k(x, .) over n points is order one.
    MedianScaled,
}

/// Kernel family plus bandwidth policy; resolved to a concrete [`Kernel`]
/// once per batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn fixed(kernel: Kernel) -> Self {
        KernelSpec {
            kernel,
            bandwidth: Bandwidth::Fixed,
        }
    }

    pub fn rbf_median() -> Self {
        KernelSpec {
            kernel: Kernel::GaussianRbf { bandwidth: 1.0 },
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn riesz_default() -> Self {
        KernelSpec {
            kernel: Kernel::RieszSmoothed { order: 1.0, epsilon: 1e-3 },
            bandwidth: Bandwidth::Median,
        }
    }

    /// Concrete kernel for one batch. Only the RBF consumes the bandwidth;
    /// IMQ and Riesz have no length scale to set.
    pub fn resolve(&self, sample_blocks: &[&Tensor]) -> Result<Kernel> {
        match (self.kernel, self.bandwidth) {
            (Kernel::GaussianRbf { .. }, Bandwidth::Median | Bandwidth::MedianScaled) => {
                let total: usize = sample_blocks.iter().map(|t| t.rows()).sum();
                let cols = sample_blocks
                    .first()
                    .map(|t| t.cols())
                    .ok_or(Error::TooFewSamples(0))?;
                let mut stacked = Tensor::zeros(total, cols);
                let mut at = 0;
                for block in sample_blocks {
                    for i in 0..block.rows() {
                        stacked.row_slice_mut(at).copy_from_slice(block.row_slice(i));
                        at += 1;
                    }
                }
                let mut bandwidth = median_bandwidth(&stacked)?;
                if self.bandwidth == Bandwidth::MedianScaled {
                    bandwidth /= (2.0 * ((total + 1) as f64).ln()).sqrt();
                }
                Ok(Kernel::GaussianRbf { bandwidth })
            }
            (kernel, _) => Ok(kernel),
        }
    }
}
