use ksivi::family::SemiImplicitFamily;
use ksivi::kernels::{median_bandwidth, Bandwidth, Kernel, KernelSpec};
use ksivi::mcmc::{run_ground_truth, GroundTruthConfig};
use ksivi::metrics::mmd_squared;
use ksivi::objective::EstimatorKind;
use ksivi::rng::{rng_for, stream};
use ksivi::targets::ScoreTarget;
use ksivi::tensor::Tensor;
use ksivi::train::{train_ksivi, TrainSchedule};

fn run(label: &str, spec: KernelSpec, n: usize, iters: u64, est: EstimatorKind, gt: &Tensor, k_eval: &Kernel) {
    let target = ScoreTarget::banana();
    let mut rng = rng_for(100, stream::INIT, 0);
    let mut fam = SemiImplicitFamily::with_net(&[3, 50, 50, 2], 0.25, &mut rng).unwrap();
    let mut schedule = TrainSchedule::new(iters, n, 1e-3, 100);
    schedule.estimator = est;
    train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
    let s = fam.sample_x(2000, &mut rng_for(102, stream::SAMPLE, 0)).unwrap();
    let mmd2 = mmd_squared(&s, gt, k_eval).unwrap();
    let var: (f64, f64) = {
        let n = s.rows() as f64;
        let m: (f64, f64) = (0..s.rows()).fold((0.0, 0.0), |a, i| (a.0 + s.get(i, 0) / n, a.1 + s.get(i, 1) / n));
        (0..s.rows()).fold((0.0, 0.0), |a, i| {
            (a.0 + (s.get(i, 0) - m.0).powi(2) / n, a.1 + (s.get(i, 1) - m.1).powi(2) / n)
        })
    };
    println!("{label}: mmd2={mmd2:.5} var=({:.2},{:.2}) sigma={:?}", var.0, var.1, fam.sigma().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
}

fn main() {
    let target = ScoreTarget::banana();
    let gt = run_ground_truth(&target, &GroundTruthConfig::sgld(2000, 10_000, 0.01, 101)).unwrap().samples;
    let k_eval = Kernel::gaussian(median_bandwidth(&gt).unwrap()).unwrap();
    let med = KernelSpec::rbf_median();
    run("N=100 median 20k     ", med, 100, 20_000, EstimatorKind::Vanilla, &gt, &k_eval);
    run("N=256 median 20k     ", med, 256, 20_000, EstimatorKind::Vanilla, &gt, &k_eval);
    run("N=100 ustat 20k      ", med, 100, 20_000, EstimatorKind::UStat, &gt, &k_eval);
    let scaled = KernelSpec { kernel: Kernel::GaussianRbf { bandwidth: 1.0 }, bandwidth: Bandwidth::MedianScaled };
    run("N=100 med-scaled 20k  ", scaled, 100, 20_000, EstimatorKind::Vanilla, &gt, &k_eval);
    run("N=256 med-scaled 20k  ", scaled, 256, 20_000, EstimatorKind::Vanilla, &gt, &k_eval);
    for bw in [0.3, 0.5] {
        let spec = KernelSpec::fixed(Kernel::gaussian(bw).unwrap());
        run(&format!("N=100 fixed bw={bw} 20k"), spec, 100, 20_000, EstimatorKind::Vanilla, &gt, &k_eval);
    }
}
