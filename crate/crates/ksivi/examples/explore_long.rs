use ksivi::family::SemiImplicitFamily;
use ksivi::kernels::{median_bandwidth, Bandwidth, Kernel, KernelSpec};
use ksivi::mcmc::{run_ground_truth, GroundTruthConfig};
use ksivi::metrics::mmd_squared;
use ksivi::rng::{rng_for, stream};
use ksivi::targets::ScoreTarget;
use ksivi::train::{train_ksivi, TrainSchedule};

fn main() {
    let target = ScoreTarget::banana();
    let gt = run_ground_truth(&target, &GroundTruthConfig::sgld(2000, 10_000, 0.01, 101)).unwrap().samples;
    let k_eval = Kernel::gaussian(median_bandwidth(&gt).unwrap()).unwrap();
    let scaled = KernelSpec { kernel: Kernel::GaussianRbf { bandwidth: 1.0 }, bandwidth: Bandwidth::MedianScaled };

    for (lr, iters, n) in [(1e-3, 100_000u64, 100usize), (2e-3, 50_000, 100), (1e-3, 50_000, 256), (3e-3, 20_000, 100)] {
        let mut rng = rng_for(100, stream::INIT, 0);
        let mut fam = SemiImplicitFamily::with_net(&[3, 50, 50, 2], 0.25, &mut rng).unwrap();
        let schedule = TrainSchedule::new(iters, n, lr, 100);
        train_ksivi(&mut fam, &target, &scaled, &schedule).unwrap();
        let s = fam.sample_x(2000, &mut rng_for(102, stream::SAMPLE, 0)).unwrap();
        let mmd2 = mmd_squared(&s, &gt, &k_eval).unwrap();
        let nn = s.rows() as f64;
        let m1: f64 = (0..s.rows()).map(|i| s.get(i, 1)).sum::<f64>() / nn;
        let v1: f64 = (0..s.rows()).map(|i| (s.get(i, 1) - m1).powi(2)).sum::<f64>() / nn;
        println!("lr={lr} iters={iters} N={n}: mmd2={mmd2:.5} var_x2={v1:.2} sigma={:?}", fam.sigma().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
