//! Sample-based discrepancy measures and evaluation utilities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{sqdist, stein_kernel_with_scores, Kernel};
use crate::targets::ScoreTarget;
use crate::tensor::Tensor;

/// Labeled sample matrix; all entries must be finite.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub samples: Tensor,
    pub label: String,
}

impl SampleSet {
    pub fn new(samples: Tensor, label: impl Into<String>) -> Result<Self> {
        if !samples.all_finite() {
            return Err(Error::NonFinite("sample set"));
        }
        Ok(SampleSet {
            samples,
            label: label.into(),
        })
    }
}

/// Biased (V-statistic) squared maximum mean discrepancy:
/// mean k(X, X) + mean k(Y, Y) - 2 mean k(X, Y). Exactly zero when the two
/// sample matrices are identical.
pub fn mmd_squared(x: &Tensor, y: &Tensor, kernel: &Kernel) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            context: "mmd sample sets",
            expected: format!("{}", x.cols()),
            got: format!("{}", y.cols()),
        });
    }
    let mean_block = |a: &Tensor, b: &Tensor| -> f64 {
        let mut total = 0.0;
        for i in 0..a.rows() {
            let ra = a.row_slice(i);
            for j in 0..b.rows() {
                total += kernel.eval_sqdist(sqdist(ra, b.row_slice(j)));
            }
        }
        total / (a.rows() * b.rows()) as f64
    };
    let kxx = mean_block(x, x);
    let kyy = mean_block(y, y);
    let kxy = mean_block(x, y);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Sliced Wasserstein-1 distance: average over random unit directions of the
/// order-statistics W1 distance between the projected samples. When the
/// sample counts differ the larger set is subsampled without replacement.
pub fn sliced_wasserstein(
    x: &Tensor,
    y: &Tensor,
    n_projections: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            context: "sliced wasserstein sample sets",
            expected: format!("{}", x.cols()),
            got: format!("{}", y.cols()),
        });
    }
    if n_projections == 0 {
        return Err(Error::InvalidSchedule("need at least one projection".into()));
    }
    let n = x.rows().min(y.rows());
    let d = x.cols();
    let idx_x = subsample_indices(x.rows(), n, rng);
    let idx_y = subsample_indices(y.rows(), n, rng);

    let mut total = 0.0;
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    for _ in 0..n_projections {
        let mut dir = crate::rng::standard_normal_vec(rng, d);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for v in &mut dir {
            *v /= norm;
        }
        for (slot, &i) in px.iter_mut().zip(&idx_x) {
            *slot = x.row_slice(i).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
        for (slot, &i) in py.iter_mut().zip(&idx_y) {
            *slot = y.row_slice(i).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
        px.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
        py.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
        let w1: f64 = px.iter().zip(&py).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        total += w1;
    }
    Ok(total / n_projections as f64)
}

fn subsample_indices(total: usize, want: usize, rng: &mut impl Rng) -> Vec<usize> {
    if want >= total {
        return (0..total).collect();
    }
    // Partial Fisher-Yates over an index array.
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..want {
        let j = rng.gen_range(i..total);
        idx.swap(i, j);
    }
    idx.truncate(want);
    idx
}

/// U-statistic KSD metric 1/(n(n-1)) sum_{i != j} k_p(x_i, x_j), a
/// goodness-of-fit diagnostic needing only target scores. Requires a
/// twice-differentiable kernel.
pub fn ksd_metric(x: &Tensor, target: &ScoreTarget, kernel: &Kernel) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    if !kernel.is_twice_differentiable() {
        return Err(Error::KernelNotTwiceDifferentiable);
    }
    let scores = target.score_batch(x)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += stein_kernel_with_scores(
                kernel,
                x.row_slice(i),
                x.row_slice(j),
                scores.row_slice(i),
                scores.row_slice(j),
            )?;
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

/// Fraction of samples within `radius` of each mode, assigning each sample
/// to its nearest mode. Fractions sum to at most 1.
pub fn mode_coverage(x: &Tensor, means: &[Vec<f64>], radius: f64) -> Result<Vec<f64>> {
    if means.is_empty() {
        return Err(Error::InvalidSchedule("mode_coverage needs at least one mean".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "mode_coverage radius must be positive, got {radius}"
        )));
    }
    let mut counts = vec![0usize; means.len()];
    for i in 0..x.rows() {
        let row = x.row_slice(i);
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (m, mean) in means.iter().enumerate() {
            let d2 = sqdist(row, mean);
            if d2 < best_d2 {
                best_d2 = d2;
                best = m;
            }
        }
        if best_d2.sqrt() <= radius {
            counts[best] += 1;
        }
    }
    Ok(counts
        .iter()
        .map(|&c| c as f64 / x.rows().max(1) as f64)
        .collect())
}

/// Rows with every coordinate inside [-a, a].
pub fn box_truncate(x: &Tensor, edge: f64) -> Result<Tensor> {
    if !(edge > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "box edge must be positive, got {edge}"
        )));
    }
    let mut kept = Vec::new();
    for i in 0..x.rows() {
        let row = x.row_slice(i);
        if row.iter().all(|v| v.abs() <= edge) {
            kept.extend_from_slice(row);
        }
    }
    let rows = kept.len() / x.cols().max(1);
    Ok(Tensor::new(rows, x.cols(), kept))
}

/// Pairwise Pearson correlation coefficients: symmetric, unit diagonal.
/// Errors on a zero-variance coordinate or fewer than 3 samples.
pub fn correlation_matrix(x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    let d = x.cols();
    if n < 3 {
        return Err(Error::BatchTooSmall { need: 3, got: n });
    }
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(x.row_slice(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut cov = Tensor::zeros(d, d);
    for i in 0..n {
        let row = x.row_slice(i);
        for a in 0..d {
            let da = row[a] - means[a];
            for b in a..d {
                let v = cov.get(a, b) + da * (row[b] - means[b]);
                cov.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        if cov.get(a, a) <= 0.0 {
            return Err(Error::ZeroVariance(a));
        }
    }
    let mut out = Tensor::zeros(d, d);
    for a in 0..d {
        out.set(a, a, 1.0);
        for b in (a + 1)..d {
            let r = cov.get(a, b) / (cov.get(a, a) * cov.get(b, b)).sqrt();
            out.set(a, b, r);
            out.set(b, a, r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal_matrix, stream};

    #[test]
    fn mmd_identical_sets_are_exactly_zero() {
        let mut rng = rng_for(1, stream::METRICS, 0);
        let x = standard_normal_matrix(&mut rng, 40, 2);
        let k = Kernel::gaussian(1.0).unwrap();
        assert_eq!(mmd_squared(&x, &x.clone(), &k).unwrap(), 0.0);
    }

    #[test]
    fn mmd_three_term_hand_evaluation() {
        // X = {0}, Y = {1} in 1-D with unit bandwidth:
        // 1 + 1 - 2 exp(-1/2) = 0.786938...
        let x = Tensor::new(1, 1, vec![0.0]);
        let y = Tensor::new(1, 1, vec![1.0]);
        let k = Kernel::gaussian(1.0).unwrap();
        let v = mmd_squared(&x, &y, &k).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        // Symmetric in the two sets.
        assert_eq!(v, mmd_squared(&y, &x, &k).unwrap());
    }

    #[test]
    fn mmd_nonnegative_on_random_inputs() {
        let k = Kernel::gaussian(0.7).unwrap();
        let mut rng = rng_for(2, stream::METRICS, 1);
        for _ in 0..20 {
            let x = standard_normal_matrix(&mut rng, 15, 3);
            let y = standard_normal_matrix(&mut rng, 11, 3);
            assert!(mmd_squared(&x, &y, &k).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn sliced_wasserstein_point_masses_and_symmetry() {
        let x = Tensor::new(1, 1, vec![0.0]);
        let y = Tensor::new(1, 1, vec![3.0]);
        let mut rng = rng_for(3, stream::METRICS, 2);
        // In 1-D every unit direction is +-1, so the distance is exactly 3.
        let v = sliced_wasserstein(&x, &y, 16, &mut rng).unwrap();
        assert!((v - 3.0).abs() < 1e-12);

        let mut rng = rng_for(4, stream::METRICS, 3);
        let a = standard_normal_matrix(&mut rng, 30, 2);
        let b = standard_normal_matrix(&mut rng, 30, 2);
        let v1 = sliced_wasserstein(&a, &b, 64, &mut rng_for(9, stream::METRICS, 4)).unwrap();
        let v2 = sliced_wasserstein(&b, &a, 64, &mut rng_for(9, stream::METRICS, 4)).unwrap();
        assert!((v1 - v2).abs() < 1e-12);

        let zero = sliced_wasserstein(&a, &a.clone(), 32, &mut rng).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn sliced_wasserstein_translation_monotone() {
        let mut rng = rng_for(5, stream::METRICS, 5);
        let x = standard_normal_matrix(&mut rng, 200, 2);
        let shift = |t: &Tensor, v: f64| {
            let mut out = t.clone();
            for i in 0..out.rows() {
                out.row_slice_mut(i)[0] += v;
            }
            out
        };
        let d1 = sliced_wasserstein(&x, &shift(&x, 1.0), 128, &mut rng_for(6, stream::METRICS, 6)).unwrap();
        let d2 = sliced_wasserstein(&x, &shift(&x, 2.0), 128, &mut rng_for(6, stream::METRICS, 6)).unwrap();
        assert!(d2 > d1, "{d2} vs {d1}");
        // Expected value of |<u, e1>| in 2-D is 2/pi; allow Monte Carlo slack.
        assert!((d1 - 2.0 / std::f64::consts::PI).abs() < 0.1, "{d1}");
    }

    #[test]
    fn sliced_wasserstein_triangle_inequality() {
        let mut rng = rng_for(7, stream::METRICS, 7);
        for trial in 0..5 {
            let a = standard_normal_matrix(&mut rng, 25, 2);
            let b = standard_normal_matrix(&mut rng, 25, 2);
            let c = standard_normal_matrix(&mut rng, 25, 2);
            // Shared projection stream per trial keeps the per-direction W1
            // metrics comparable.
            let key = 100 + trial;
            let ab = sliced_wasserstein(&a, &b, 64, &mut rng_for(key, stream::METRICS, 8)).unwrap();
            let bc = sliced_wasserstein(&b, &c, 64, &mut rng_for(key, stream::METRICS, 8)).unwrap();
            let ac = sliced_wasserstein(&a, &c, 64, &mut rng_for(key, stream::METRICS, 8)).unwrap();
            assert!(ac <= ab + bc + 1e-9, "{ac} vs {ab} + {bc}");
        }
    }

    #[test]
    fn ksd_metric_null_and_power() {
        let target = ScoreTarget::standard_normal(2);
        let kernel = Kernel::gaussian(1.0).unwrap();
        let mut rng = rng_for(8, stream::METRICS, 9);

        // Null: samples drawn from the target. Block the sample into
        // independent U-statistics to form a standard error.
        let blocks = 20;
        let per = 400;
        let mut vals = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let x = standard_normal_matrix(&mut rng, per, 2);
            vals.push(ksd_metric(&x, &target, &kernel).unwrap());
        }
        let mean: f64 = vals.iter().sum::<f64>() / blocks as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (blocks - 1) as f64;
        let se = (var / blocks as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "null mean {mean}, se {se}");

        // Power: mean-shifted samples give a positive value beyond 4 SE.
        let mut vals = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let mut x = standard_normal_matrix(&mut rng, per, 2);
            for i in 0..per {
                x.row_slice_mut(i)[0] += 1.0;
            }
            vals.push(ksd_metric(&x, &target, &kernel).unwrap());
        }
        let mean: f64 = vals.iter().sum::<f64>() / blocks as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (blocks - 1) as f64;
        let se = (var / blocks as f64).sqrt();
        assert!(mean > 4.0 * se, "shifted mean {mean}, se {se}");

        // Permutation invariance, exact.
        let x = standard_normal_matrix(&mut rng, 10, 2);
        let mut perm = Tensor::zeros(10, 2);
        for i in 0..10 {
            perm.row_slice_mut(i).copy_from_slice(x.row_slice((i + 3) % 10));
        }
        let a = ksd_metric(&x, &target, &kernel).unwrap();
        let b = ksd_metric(&perm, &target, &kernel).unwrap();
        assert!((a - b).abs() < 1e-15);

        let riesz = Kernel::riesz(1.0, 1e-3).unwrap();
        assert!(ksd_metric(&x, &target, &riesz).is_err());
    }

    #[test]
    fn mode_coverage_cases() {
        let means = vec![vec![0.0, 0.0], vec![10.0, 0.0]];
        // The means themselves: each mode gets 1/2.
        let x = Tensor::new(2, 2, vec![0.0, 0.0, 10.0, 0.0]);
        assert_eq!(mode_coverage(&x, &means, 0.1).unwrap(), vec![0.5, 0.5]);
        // All samples at one mean.
        let x = Tensor::new(3, 2, vec![10.0, 0.0, 10.0, 0.0, 10.0, 0.0]);
        assert_eq!(mode_coverage(&x, &means, 0.1).unwrap(), vec![0.0, 1.0]);
        // Far samples stay unassigned.
        let x = Tensor::new(1, 2, vec![5.0, 5.0]);
        let f = mode_coverage(&x, &means, 1.0).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
    }

    #[test]
    fn eight_gaussian_reference_coverage() {
        // Exact mixture draws: each mode fraction should be close to 1/8
        // (radius 3 captures 98.9% of a unit Gaussian in 2-D).
        let means: Vec<Vec<f64>> = (1..=8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 4.0;
                vec![10.0 * a.cos(), 10.0 * a.sin()]
            })
            .collect();
        let mut rng = rng_for(10, stream::METRICS, 10);
        let n = 100_000;
        let mut x = Tensor::zeros(n, 2);
        for i in 0..n {
            let m = rng.gen_range(0..8);
            let row = x.row_slice_mut(i);
            row[0] = means[m][0] + rng.sample::<f64, _>(rand_distr::StandardNormal);
            row[1] = means[m][1] + rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let fractions = mode_coverage(&x, &means, 3.0).unwrap();
        for (m, f) in fractions.iter().enumerate() {
            assert!((0.115..=0.135).contains(f), "mode {m}: {f}");
        }
    }

    #[test]
    fn box_truncate_membership_and_idempotence() {
        let x = Tensor::new(2, 2, vec![6.0, 0.0, 1.0, 1.0]);
        let t = box_truncate(&x, 5.0).unwrap();
        assert_eq!(t.shape(), (1, 2));
        assert_eq!(t.data(), &[1.0, 1.0]);
        let tt = box_truncate(&t, 5.0).unwrap();
        assert_eq!(t, tt);
        // Everything inside: unchanged.
        let inside = Tensor::new(2, 2, vec![0.1, -0.2, 0.3, 0.4]);
        assert_eq!(box_truncate(&inside, 5.0).unwrap(), inside);
    }

    #[test]
    fn correlation_matrix_properties() {
        // Duplicated coordinates correlate perfectly.
        let mut rng = rng_for(11, stream::METRICS, 11);
        let base = standard_normal_matrix(&mut rng, 50, 1);
        let mut x = Tensor::zeros(50, 2);
        for i in 0..50 {
            let v = base.get(i, 0);
            x.row_slice_mut(i).copy_from_slice(&[v, v]);
        }
        let c = correlation_matrix(&x).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);

        // Independent large samples: off-diagonals within 4/sqrt(n).
        let n = 100_000;
        let x = standard_normal_matrix(&mut rng, n, 3);
        let c = correlation_matrix(&x).unwrap();
        for a in 0..3 {
            assert_eq!(c.get(a, a), 1.0);
            for b in (a + 1)..3 {
                assert!(c.get(a, b).abs() < 4.0 / (n as f64).sqrt());
            }
        }

        // Sign-flipping one coordinate negates its off-diagonals exactly.
        let mut rng2 = rng_for(12, stream::METRICS, 12);
        let x = standard_normal_matrix(&mut rng2, 40, 3);
        let mut flipped = x.clone();
        for i in 0..40 {
            flipped.row_slice_mut(i)[1] *= -1.0;
        }
        let c0 = correlation_matrix(&x).unwrap();
        let c1 = correlation_matrix(&flipped).unwrap();
        for b in 0..3 {
            if b != 1 {
                assert_eq!(c1.get(1, b), -c0.get(1, b));
            }
        }

        // Zero-variance coordinate rejected.
        let x = Tensor::new(3, 2, vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0]);
        assert!(matches!(correlation_matrix(&x), Err(Error::ZeroVariance(0))));
    }
}
