use ksivi::family::SemiImplicitFamily;
use ksivi::kernels::KernelSpec;
use ksivi::targets::ScoreTarget;
use ksivi::train::{train_ksivi, TrainSchedule};

fn main() {
    // Location-scale family on a 1-D standard normal target: the optimum is
    // m = 0, sigma = 1 (since x = m + sigma*xi exactly matches the target).
    let mut fam = SemiImplicitFamily::location_scale(1, &[3.0], 0.0625).unwrap();
    let schedule = TrainSchedule::new(20_000, 64, 5e-3, 7);
    let target = ScoreTarget::standard_normal(1);
    train_ksivi(&mut fam, &target, &KernelSpec::rbf_median(), &schedule).unwrap();
    println!("loc-scale: params = {:?} sigma = {:?} (want m=0, sigma=1)", fam.params_flat(), fam.sigma());

    // 2-D anisotropic start.
    let mut fam = SemiImplicitFamily::location_scale(2, &[-2.0, 5.0], 4.0).unwrap();
    let target = ScoreTarget::standard_normal(2);
    let schedule = TrainSchedule::new(20_000, 64, 5e-3, 8);
    train_ksivi(&mut fam, &target, &KernelSpec::rbf_median(), &schedule).unwrap();
    println!("2d loc-scale: params = {:?} sigma = {:?}", fam.params_flat(), fam.sigma());
}
