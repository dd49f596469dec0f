use std::time::Instant;
use ksivi::family::SemiImplicitFamily;
use ksivi::kernels::{median_bandwidth, Kernel, KernelSpec};
use ksivi::mcmc::{run_ground_truth, GroundTruthConfig};
use ksivi::metrics::{mmd_squared, mode_coverage};
use ksivi::rng::{rng_for, stream};
use ksivi::targets::ScoreTarget;
use ksivi::tensor::Tensor;
use ksivi::train::{train_ksivi, TemperatureSchedule, TrainSchedule};

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(a.rows() + b.rows(), a.cols(), data)
}

fn eval(name: &str, target: &ScoreTarget, temper: bool, sigma2: f64, iters: u64) {
    let t0 = Instant::now();
    let mut rng = rng_for(100, stream::INIT, 0);
    let mut fam = SemiImplicitFamily::with_net(&[3, 50, 50, 2], sigma2, &mut rng).unwrap();
    let mut schedule = TrainSchedule::new(iters, 100, 1e-3, 100);
    if temper {
        schedule.temperature = Some(TemperatureSchedule { start: 5.0, anneal_fraction: 0.5 });
    }
    let res = train_ksivi(&mut fam, target, &KernelSpec::rbf_median(), &schedule).unwrap();
    let train_s = t0.elapsed().as_secs_f64();

    let gt = run_ground_truth(target, &GroundTruthConfig::sgld(2000, 10_000, 0.01, 101)).unwrap();
    let samples = fam.sample_x(2000, &mut rng_for(102, stream::SAMPLE, 0)).unwrap();
    let bw = median_bandwidth(&stack(&samples, &gt.samples)).unwrap();
    let kernel = Kernel::gaussian(bw).unwrap();
    let mmd2 = mmd_squared(&samples, &gt.samples, &kernel).unwrap();
    let first = res.trace.first().unwrap().ksd_ustat;
    let last = res.trace.last().unwrap().ksd_ustat;
    print!("{name}: mmd2={mmd2:.5} (bw {bw:.3}) ksd {first:.4} -> {last:.5} train {train_s:.0}s");
    if name == "multimodal" {
        let cov = mode_coverage(&samples, &[vec![-2.0, 0.0], vec![2.0, 0.0]], 3.0).unwrap();
        print!(" coverage {cov:?}");
    }
    println!();
}

fn main() {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    eval("banana", &ScoreTarget::banana(), false, 0.25, iters);
    eval("multimodal", &ScoreTarget::multimodal(), true, 1.0, iters);
    eval("x_shaped", &ScoreTarget::x_shaped(), false, 1.0, iters);
}
