use std::time::Instant;

use ksivi::family::SemiImplicitFamily;
use ksivi::kernels::KernelSpec;
use ksivi::rng::{rng_for, stream};
use ksivi::targets::{self, ScoreTarget};
use ksivi::train::{train_ksivi, TrainSchedule};

#[test]
#[ignore]
fn bench_iterations() {
    // Toy (banana): N = 100, MLP [3, 50, 50, 2].
    let mut rng = rng_for(1, stream::INIT, 0);
    let mut fam = SemiImplicitFamily::with_net(&[3, 50, 50, 2], 0.25, &mut rng).unwrap();
    let target = ScoreTarget::banana();
    let spec = KernelSpec::rbf_median();
    let schedule = TrainSchedule::new(200, 100, 1e-3, 1);
    let t0 = Instant::now();
    train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
    println!("banana vanilla N=100: {:.3} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 200.0);

    // Conditioned diffusion d = 50: N = 128, MLP [50, 128, 128, 50].
    let obs = targets::simulate_diffusion_observations(0.01, 50, 5, 0.1, 7);
    let target = targets::conditioned_diffusion(0.01, 50, 5, 0.1, obs).unwrap();
    let mut rng = rng_for(2, stream::INIT, 0);
    let mut fam = SemiImplicitFamily::with_net(&[50, 128, 128, 50], (-2.0f64).exp(), &mut rng).unwrap();
    let schedule = TrainSchedule::new(50, 128, 2e-4, 1);
    let t0 = Instant::now();
    train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
    println!("cond-diff d=50 vanilla N=128: {:.3} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);

    // Logistic regression: n_data = 500, N = 100, MLP [10, 100, 100, 22].
    let target = targets::synthesize_logreg(500, 21, 3).unwrap();
    let mut rng = rng_for(3, stream::INIT, 0);
    let mut fam = SemiImplicitFamily::with_net(&[10, 100, 100, 22], (-5.0f64).exp(), &mut rng).unwrap();
    let schedule = TrainSchedule::new(50, 100, 1e-3, 1);
    let t0 = Instant::now();
    train_ksivi(&mut fam, &target, &spec, &schedule).unwrap();
    println!("logreg n=500 vanilla N=100: {:.3} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);

    // SGLD ground truth speed: logreg with 1000 particles.
    let mut state = ksivi::mcmc::ChainState::new(
        ksivi::rng::standard_normal_matrix(&mut rng, 1000, 22), 1e-4).unwrap();
    let mut r = rng_for(4, stream::GROUND_TRUTH, 0);
    let t0 = Instant::now();
    for _ in 0..200 {
        ksivi::mcmc::sgld_step(&mut state, &target, &mut r).unwrap();
    }
    println!("logreg SGLD 1000 particles: {:.3} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / 200.0);
}
