//! Ground-truth samplers: parallel SGLD and MALA, plus annealed Langevin
//! trajectories used to verify the hierarchical family's initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal_matrix, stream};
use crate::targets::{AnnealedPath, ScoreTarget};
use crate::tensor::Tensor;

/// A population of independent particles driven by one step size.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub particles: Tensor,
    pub step_size: f64,
    pub iteration: u64,
}

impl ChainState {
    pub fn new(particles: Tensor, step_size: f64) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "step size must be positive, got {step_size}"
            )));
        }
        Ok(ChainState {
            particles,
            step_size,
            iteration: 0,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.particles.rows()
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }
}

/// One unadjusted Langevin step per particle:
/// x <- x + (eps/2) s_p(x) + eta with eta ~ N(0, eps I).
pub fn sgld_step(state: &mut ChainState, target: &ScoreTarget, rng: &mut impl Rng) -> Result<()> {
    let noise = standard_normal_matrix(rng, state.n_particles(), state.dim());
    sgld_step_with_noise(state, target, &noise)
}

/// SGLD step with externally supplied standard-normal noise (testing hook;
/// passing zeros isolates the drift).
pub fn sgld_step_with_noise(state: &mut ChainState, target: &ScoreTarget, noise: &Tensor) -> Result<()> {
    let eps = state.step_size;
    let scores = target.score_batch(&state.particles)?;
    if !scores.all_finite() {
        return Err(Error::NonFinite("sgld score"));
    }
    let sqrt_eps = eps.sqrt();
    for ((x, &s), &n) in state
        .particles
        .data_mut()
        .iter_mut()
        .zip(scores.data())
        .zip(noise.data())
    {
        *x += 0.5 * eps * s + sqrt_eps * n;
    }
    state.iteration += 1;
    Ok(())
}

/// Acceptance bookkeeping for one MALA sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct MalaStats {
    pub proposed: usize,
    pub accepted: usize,
}

impl MalaStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// One Metropolis-adjusted Langevin step per particle. The proposal is the
/// SGLD kernel; acceptance uses min(1, p(x') q(x | x') / (p(x) q(x' | x)))
/// with q(a | b) = N(a; b + (eps/2) s_p(b), eps I).
pub fn mala_step(state: &mut ChainState, target: &ScoreTarget, rng: &mut impl Rng) -> Result<MalaStats> {
    let n = state.n_particles();
    let noise = standard_normal_matrix(rng, n, state.dim());
    let uniforms: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    mala_step_with_noise(state, target, &noise, &uniforms)
}

/// MALA step with externally supplied noise and uniforms (testing hook).
pub fn mala_step_with_noise(
    state: &mut ChainState,
    target: &ScoreTarget,
    noise: &Tensor,
    uniforms: &[f64],
) -> Result<MalaStats> {
    if !target.has_log_density() {
        return Err(Error::NoLogDensity);
    }
    let eps = state.step_size;
    let sqrt_eps = eps.sqrt();
    let d = state.dim();
    let n = state.n_particles();

    let scores = target.score_batch(&state.particles)?;
    let logps = target.log_density_batch(&state.particles)?;

    // Proposals for every particle.
    let mut proposals = Tensor::zeros(n, d);
    for i in 0..n {
        let x = state.particles.row_slice(i);
        let s = scores.row_slice(i);
        let out = proposals.row_slice_mut(i);
        for j in 0..d {
            out[j] = x[j] + 0.5 * eps * s[j] + sqrt_eps * noise.get(i, j);
        }
    }
    let prop_scores = target.score_batch(&proposals)?;
    let prop_logps = target.log_density_batch(&proposals)?;

    let mut stats = MalaStats {
        proposed: n,
        accepted: 0,
    };
    for i in 0..n {
        let x = state.particles.row_slice(i);
        let y = proposals.row_slice(i);
        let sx = scores.row_slice(i);
        let sy = prop_scores.row_slice(i);
        // log q(x | y) - log q(y | x)
        let mut forward = 0.0; // ||y - x - (eps/2) s(x)||^2
        let mut backward = 0.0; // ||x - y - (eps/2) s(y)||^2
        for j in 0..d {
            let f = y[j] - x[j] - 0.5 * eps * sx[j];
            forward += f * f;
            let b = x[j] - y[j] - 0.5 * eps * sy[j];
            backward += b * b;
        }
        let log_alpha = prop_logps[i] - logps[i] + (forward - backward) / (2.0 * eps);
        if log_alpha >= 0.0 || uniforms[i].ln() < log_alpha {
            state.particles.row_slice_mut(i).copy_from_slice(y);
            stats.accepted += 1;
        }
    }
    state.iteration += 1;
    Ok(stats)
}

/// Acceptance probability of a single proposal, exposed for direct checks
/// against hand-evaluated Gaussian transition densities.
pub fn mala_log_acceptance(
    target: &ScoreTarget,
    eps: f64,
    x: &[f64],
    proposal: &[f64],
) -> Result<f64> {
    if !target.has_log_density() {
        return Err(Error::NoLogDensity);
    }
    let sx = target.score(x)?;
    let sy = target.score(proposal)?;
    let mut forward = 0.0;
    let mut backward = 0.0;
    for j in 0..x.len() {
        let f = proposal[j] - x[j] - 0.5 * eps * sx[j];
        forward += f * f;
        let b = x[j] - proposal[j] - 0.5 * eps * sy[j];
        backward += b * b;
    }
    Ok(target.log_density(proposal)? - target.log_density(x)? + (forward - backward) / (2.0 * eps))
}

/// Annealed Langevin recursion from the top layer down:
/// x_t = x_{t+1} + (sigma_ini^2 / 2) s_t(x_{t+1}) + sigma_ini * noise_t.
///
/// Returns the trajectory indexed like the hierarchical family's
/// (`xs[t]` is level t, `xs[T]` the start). A freshly initialized
/// hierarchical family reproduces this trajectory bit-for-bit given
/// shared noise.
pub fn annealed_langevin(
    path: &AnnealedPath,
    noises: &[Tensor],
    start: Tensor,
    sigma_ini: f64,
) -> Result<Vec<Tensor>> {
    let layers = path.layers();
    if noises.len() != layers {
        return Err(Error::ShapeMismatch {
            context: "annealed langevin noises",
            expected: format!("{layers}"),
            got: format!("{}", noises.len()),
        });
    }
    let n = start.rows();
    let d = start.cols();
    let c = sigma_ini * sigma_ini / 2.0;
    let mut xs = vec![Tensor::zeros(0, 0); layers + 1];
    xs[layers] = start;
    for t in (0..layers).rev() {
        noises[t].require_shape(n, d, "annealed langevin noise")?;
        let score = path.target_at(t)?.score_batch(&xs[t + 1])?;
        let mut x = xs[t + 1].clone();
        for ((o, &s), &e) in x.data_mut().iter_mut().zip(score.data()).zip(noises[t].data()) {
            *o = (*o + c * s) + sigma_ini * e;
        }
        xs[t] = x;
    }
    Ok(xs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Sgld,
    Mala,
}

/// What `run_ground_truth` returns as its sample matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CollectMode {
    /// The particle matrix after the final step (the paper's parallel-chain
    /// protocol).
    FinalParticles,
    /// Thinned post-burn-in states of every particle, stacked. Defaults:
    /// discard the first half, no thinning.
    Trajectory { burn_in: usize, thin: usize },
}

#[derive(Clone, Debug)]
pub struct GroundTruthConfig {
    pub sampler: SamplerKind,
    pub n_particles: usize,
    pub n_steps: usize,
    pub step_size: f64,
    /// Particles start from N(0, init_scale^2 I).
    pub init_scale: f64,
    pub collect: CollectMode,
    pub seed: u64,
}

impl GroundTruthConfig {
    pub fn sgld(n_particles: usize, n_steps: usize, step_size: f64, seed: u64) -> Self {
        GroundTruthConfig {
            sampler: SamplerKind::Sgld,
            n_particles,
            n_steps,
            step_size,
            init_scale: 1.0,
            collect: CollectMode::FinalParticles,
            seed,
        }
    }

    pub fn mala(n_particles: usize, n_steps: usize, step_size: f64, seed: u64) -> Self {
        GroundTruthConfig {
            sampler: SamplerKind::Mala,
            ..Self::sgld(n_particles, n_steps, step_size, seed)
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroundTruthResult {
    pub samples: Tensor,
    pub acceptance_rate: Option<f64>,
}

/// Run parallel chains to completion; deterministic under the seed.
pub fn run_ground_truth(target: &ScoreTarget, cfg: &GroundTruthConfig) -> Result<GroundTruthResult> {
    if cfg.n_particles == 0 || cfg.n_steps == 0 {
        return Err(Error::InvalidSchedule(
            "ground truth needs particles >= 1 and steps >= 1".into(),
        ));
    }
    let mut rng: ChaCha8Rng = rng_for(cfg.seed, stream::GROUND_TRUTH, 0);
    let mut init = standard_normal_matrix(&mut rng, cfg.n_particles, target.dim());
    if cfg.init_scale != 1.0 {
        for v in init.data_mut() {
            *v *= cfg.init_scale;
        }
    }
    let mut state = ChainState::new(init, cfg.step_size)?;
    let mut stats = MalaStats::default();
    let mut collected: Vec<f64> = Vec::new();
    for step in 0..cfg.n_steps {
        match cfg.sampler {
            SamplerKind::Sgld => sgld_step(&mut state, target, &mut rng)?,
            SamplerKind::Mala => {
                let s = mala_step(&mut state, target, &mut rng)?;
                stats.proposed += s.proposed;
                stats.accepted += s.accepted;
            }
        }
        if let CollectMode::Trajectory { burn_in, thin } = cfg.collect {
            let thin = thin.max(1);
            if step >= burn_in && (step - burn_in) % thin == 0 {
                collected.extend_from_slice(state.particles.data());
            }
        }
    }
    let samples = match cfg.collect {
        CollectMode::FinalParticles => state.particles,
        CollectMode::Trajectory { .. } => {
            let d = target.dim();
            let rows = collected.len() / d;
            Tensor::new(rows, d, collected)
        }
    };
    Ok(GroundTruthResult {
        samples,
        acceptance_rate: match cfg.sampler {
            SamplerKind::Mala => Some(stats.rate()),
            SamplerKind::Sgld => None,
        },
    })
}
