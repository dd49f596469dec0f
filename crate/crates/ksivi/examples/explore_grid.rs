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
    let fixed05 = KernelSpec::fixed(Kernel::gaussian(0.5).unwrap());

    let cases: Vec<(&str, f64, usize, u64, KernelSpec)> = vec![
        ("s2=1.0 N=100 scaled 20k", 1.0, 100, 20_000, scaled),
        ("s2=1.0 N=100 fix.5 20k ", 1.0, 100, 20_000, fixed05),
        ("s2=1.0 N=512 scaled 10k", 1.0, 512, 10_000, scaled),
        ("s2=.25 N=512 scaled 10k", 0.25, 512, 10_000, scaled),
        ("s2=1.0 N=1024 scaled 6k", 1.0, 1024, 6_000, scaled),
    ];
    for (label, s2, n, iters, spec) in cases {
        let mut rng = rng_for(100, stream::INIT, 0);
        let mut fam = SemiImplicitFamily::with_net(&[3, 50, 50, 2], s2, &mut rng).unwrap();
        let schedule = TrainSchedule::new(iters, n, 1e-3, 100);
        train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
        let s = fam.sample_x(2000, &mut rng_for(102, stream::SAMPLE, 0)).unwrap();
        let mmd2 = mmd_squared(&s, &gt, &k_eval).unwrap();
        let nn = s.rows() as f64;
        let m1: f64 = (0..s.rows()).map(|i| s.get(i, 1)).sum::<f64>() / nn;
        let v1: f64 = (0..s.rows()).map(|i| (s.get(i, 1) - m1).powi(2)).sum::<f64>() / nn;
        println!("{label}: mmd2={mmd2:.5} var_x2={v1:.2} sigma={:?}", fam.sigma().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
