use ksivi::family::SemiImplicitFamily;
use ksivi::kernels::{median_bandwidth, Kernel, KernelSpec};
use ksivi::mcmc::{run_ground_truth, GroundTruthConfig};
use ksivi::metrics::{ksd_metric, mmd_squared};
use ksivi::rng::{rng_for, stream};
use ksivi::targets::ScoreTarget;
use ksivi::tensor::Tensor;
use ksivi::train::{train_ksivi, TrainSchedule};

fn moments(x: &Tensor, label: &str) {
    let n = x.rows() as f64;
    let mut mean = [0.0; 2];
    for i in 0..x.rows() {
        mean[0] += x.get(i, 0) / n;
        mean[1] += x.get(i, 1) / n;
    }
    let mut var = [0.0; 2];
    let mut cov = 0.0;
    for i in 0..x.rows() {
        let d0 = x.get(i, 0) - mean[0];
        let d1 = x.get(i, 1) - mean[1];
        var[0] += d0 * d0 / n;
        var[1] += d1 * d1 / n;
        cov += d0 * d1 / n;
    }
    println!("  {label}: mean ({:.3}, {:.3}) var ({:.3}, {:.3}) cov {:.3}", mean[0], mean[1], var[0], var[1], cov);
}

fn main() {
    let target = ScoreTarget::banana();
    // Ground truth self-consistency: two independent SGLD sets.
    let gt1 = run_ground_truth(&target, &GroundTruthConfig::sgld(2000, 10_000, 0.01, 101)).unwrap().samples;
    let gt2 = run_ground_truth(&target, &GroundTruthConfig::sgld(2000, 10_000, 0.01, 202)).unwrap().samples;
    let bw = {
        let mut d = gt1.data().to_vec();
        d.extend_from_slice(gt2.data());
        median_bandwidth(&Tensor::new(4000, 2, d)).unwrap()
    };
    let k = Kernel::gaussian(bw).unwrap();
    println!("GT-vs-GT mmd2 = {:.6} (bw {bw:.3})", mmd_squared(&gt1, &gt2, &k).unwrap());
    moments(&gt1, "gt1");
    println!("GT ksd_metric vs target = {:.5}", ksd_metric(&gt1, &target, &k).unwrap());

    for iters in [20_000u64, 50_000] {
        let mut rng = rng_for(100, stream::INIT, 0);
        let mut fam = SemiImplicitFamily::with_net(&[3, 50, 50, 2], 0.25, &mut rng).unwrap();
        let schedule = TrainSchedule::new(iters, 100, 1e-3, 100);
        let res = train_ksivi(&mut fam, &target, &KernelSpec::rbf_median(), &schedule).unwrap();
        let samples = fam.sample_x(2000, &mut rng_for(102, stream::SAMPLE, 0)).unwrap();
        let mmd2 = mmd_squared(&samples, &gt1, &k).unwrap();
        println!("iters {iters}: mmd2 = {mmd2:.5}, sigma = {:?}", fam.sigma());
        moments(&samples, "ksivi");
        println!("  ksd_metric(ksivi samples) = {:.5}", ksd_metric(&samples, &target, &k).unwrap());
        let tail: Vec<f64> = res.trace.iter().rev().take(5).map(|r| r.ksd_ustat).collect();
        println!("  last logged u-stat ksd: {tail:?}");
    }
}
