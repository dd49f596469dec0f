//! Semi-implicit variational families.
//!
//! A family is a standard-normal mixing distribution pushed through a mean
//! map plus a diagonal Gaussian conditional layer: x = mu(z; phi) + sigma * xi
//! with xi ~ N(0, I) and sigma = exp(rho) constant in z. The conditional score
//! -xi / sigma is what makes the KSD objective tractable.
//!
//! The hierarchical family stacks such conditional layers below a standard
//! normal prior; each layer's mean is a residual map around one annealed
//! Langevin step, so a freshly initialized stack reproduces an annealed SGLD
//! trajectory exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::objective::KsdBatch;
use crate::rng::standard_normal_matrix;
use crate::targets::{AnnealedPath, ScoreTarget};
use crate::tensor::{Gradients, Mlp, MlpVars, Tape, Tensor, Var};

/// Mean map mu(z; phi) of the conditional layer.
#[derive(Clone, Debug)]
pub enum MeanMap {
    /// mu(z) = z (requires d_z = d); the marginal is then a tractable
    /// Gaussian convolution used as a test oracle.
    Identity,
    /// mu(z) = m, a location parameter independent of z.
    Constant(Tensor),
    /// mu(z) = net(z).
    Net(Mlp),
    /// mu(z) = z + net(z) + (sigma_ini^2 / 2) * s(z): one Langevin step
    /// around a learnable residual. With the net's output layer zeroed this
    /// is exactly an SGLD step against `target`.
    LangevinResidual {
        net: Mlp,
        sigma_ini: f64,
        target: ScoreTarget,
    },
}

/// Tape leaves of the family parameters for one backward pass.
pub struct FamilyVars {
    mean: MeanVars,
    rho: Option<Var>,
}

enum MeanVars {
    None,
    Constant(Var),
    Net(MlpVars),
}

/// Reparameterized draw on the tape.
pub struct TapeDraw {
    /// x = mu(z) + sigma * xi, differentiable in the parameters.
    pub x: Var,
    /// xi / sigma, the negated conditional score, differentiable in rho.
    pub xi_over_sigma: Var,
}

#[derive(Clone, Debug)]
pub struct SemiImplicitFamily {
    d_z: usize,
    d: usize,
    mean: MeanMap,
    /// Log standard deviations, 1 x d; sigma = exp(rho) > 0 by construction.
    rho: Tensor,
    train_rho: bool,
}

impl SemiImplicitFamily {
    pub fn new(d_z: usize, d: usize, mean: MeanMap, sigma2_init: f64) -> Result<Self> {
        if !(sigma2_init > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "initial sigma^2 must be positive, got {sigma2_init}"
            )));
        }
        match &mean {
            MeanMap::Identity => {
                if d_z != d {
                    return Err(Error::ShapeMismatch {
                        context: "identity mean map",
                        expected: format!("d_z = d = {d}"),
                        got: format!("d_z = {d_z}"),
                    });
                }
            }
            MeanMap::Constant(m) => m.require_shape(1, d, "constant mean map")?,
            MeanMap::Net(net) => {
                if net.input_width() != d_z || net.output_width() != d {
                    return Err(Error::ShapeMismatch {
                        context: "mean network",
                        expected: format!("{d_z} -> {d}"),
                        got: format!("{} -> {}", net.input_width(), net.output_width()),
                    });
                }
            }
            MeanMap::LangevinResidual { net, target, .. } => {
                if d_z != d || net.input_width() != d || net.output_width() != d || target.dim() != d {
                    return Err(Error::ShapeMismatch {
                        context: "langevin residual mean map",
                        expected: format!("d_z = d = {d}"),
                        got: format!(
                            "d_z = {d_z}, net {} -> {}, target dim {}",
                            net.input_width(),
                            net.output_width(),
                            target.dim()
                        ),
                    });
                }
            }
        }
        let rho = Tensor::full(1, d, 0.5 * sigma2_init.ln());
        Ok(SemiImplicitFamily {
            d_z,
            d,
            mean,
            rho,
            train_rho: true,
        })
    }

    /// Identity-mean family: the marginal is N(0, (1 + sigma^2) I).
    pub fn identity(d: usize, sigma2_init: f64) -> Result<Self> {
        Self::new(d, d, MeanMap::Identity, sigma2_init)
    }

    /// Location-scale family with a learnable mean vector.
    pub fn location_scale(d: usize, mean_init: &[f64], sigma2_init: f64) -> Result<Self> {
        Self::new(d, d, MeanMap::Constant(Tensor::row(mean_init)), sigma2_init)
    }

    /// MLP mean family (the standard configuration).
    pub fn with_net(widths: &[usize], sigma2_init: f64, rng: &mut impl Rng) -> Result<Self> {
        let net = Mlp::new(widths, rng)?;
        let (d_z, d) = (net.input_width(), net.output_width());
        Self::new(d_z, d, MeanMap::Net(net), sigma2_init)
    }

    /// Exclude rho from the trainable parameters.
    pub fn freeze_rho(mut self) -> Self {
        self.train_rho = false;
        self
    }

    pub fn mixing_dim(&self) -> usize {
        self.d_z
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mean_map(&self) -> &MeanMap {
        &self.mean
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn rho_mut(&mut self) -> &mut Tensor {
        &mut self.rho
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.data().iter().map(|r| r.exp()).collect()
    }

    /// Parameters belonging to the mean map alone (the leading block of the
    /// flat layout).
    pub fn mean_param_count(&self) -> usize {
        match &self.mean {
            MeanMap::Identity => 0,
            MeanMap::Constant(m) => m.numel(),
            MeanMap::Net(net) | MeanMap::LangevinResidual { net, .. } => net.param_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.mean_param_count() + if self.train_rho { self.d } else { 0 }
    }

    /// Flat parameter vector: mean-map parameters (per layer weight, bias),
    /// then rho when trainable.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match &self.mean {
            MeanMap::Identity => {}
            MeanMap::Constant(m) => out.extend_from_slice(m.data()),
            MeanMap::Net(net) | MeanMap::LangevinResidual { net, .. } => net.flatten_into(&mut out),
        }
        if self.train_rho {
            out.extend_from_slice(self.rho.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "family parameter vector",
                expected: format!("{}", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut at = 0;
        match &mut self.mean {
            MeanMap::Identity => {}
            MeanMap::Constant(m) => {
                let n = m.numel();
                m.data_mut().copy_from_slice(&flat[..n]);
                at = n;
            }
            MeanMap::Net(net) | MeanMap::LangevinResidual { net, .. } => {
                at = net.unflatten_from(flat);
            }
        }
        if self.train_rho {
            self.rho.data_mut().copy_from_slice(&flat[at..]);
        }
        Ok(())
    }

    /// Named parameter tensors (for checkpoints).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.mean {
            MeanMap::Identity => {}
            MeanMap::Constant(m) => out.push(("mean".to_string(), m.clone())),
            MeanMap::Net(net) | MeanMap::LangevinResidual { net, .. } => {
                for l in 0..net.layer_count() {
                    out.push((format!("w{l}"), net.weight(l).clone()));
                    out.push((format!("b{l}"), net.bias(l).clone()));
                }
            }
        }
        out.push(("rho".to_string(), self.rho.clone()));
        out
    }

    pub fn draw_mixing(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        standard_normal_matrix(rng, n, self.d_z)
    }

    pub fn draw_noise(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        standard_normal_matrix(rng, n, self.d)
    }

    /// Batched mean map with frozen parameters.
    pub fn mean_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.d_z {
            return Err(Error::ShapeMismatch {
                context: "mixing sample",
                expected: format!("{} columns", self.d_z),
                got: format!("{} columns", z.cols()),
            });
        }
        match &self.mean {
            MeanMap::Identity => Ok(z.clone()),
            MeanMap::Constant(m) => {
                let mut out = Tensor::zeros(z.rows(), self.d);
                for i in 0..z.rows() {
                    out.row_slice_mut(i).copy_from_slice(m.data());
                }
                Ok(out)
            }
            MeanMap::Net(net) => net.forward_plain(z),
            MeanMap::LangevinResidual {
                net,
                sigma_ini,
                target,
            } => {
                let resid = net.forward_plain(z)?;
                let score = target.score_batch(z)?;
                let c = sigma_ini * sigma_ini / 2.0;
                let mut out = z.clone();
                for ((o, &r), &s) in out.data_mut().iter_mut().zip(resid.data()).zip(score.data()) {
                    *o = (*o + r) + c * s;
                }
                Ok(out)
            }
        }
    }

    /// One reparameterized draw: x = mu(z) + sigma * xi and the conditional
    /// score -xi / sigma.
    pub fn draw(&self, z: &[f64], xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != self.d_z || xi.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: "draw inputs",
                expected: format!("z {}; xi {}", self.d_z, self.d),
                got: format!("z {}; xi {}", z.len(), xi.len()),
            });
        }
        let zt = Tensor::row(z);
        let mean = self.mean_batch(&zt)?;
        let sigma = self.sigma();
        let x: Vec<f64> = mean
            .data()
            .iter()
            .zip(xi)
            .zip(&sigma)
            .map(|((m, &e), &s)| m + s * e)
            .collect();
        let cond_score: Vec<f64> = xi.iter().zip(&sigma).map(|(&e, &s)| -(e / s)).collect();
        Ok((x, cond_score))
    }

    /// n i.i.d. draws; deterministic under the generator state. Mixing
    /// samples are drawn first, then the conditional noise.
    pub fn batch_draw(&self, n: usize, rng: &mut impl Rng) -> Result<KsdBatch> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let z = self.draw_mixing(n, rng);
        let xi = self.draw_noise(n, rng);
        self.assemble_batch(z, xi)
    }

    /// Deterministic batch assembly from given draws.
    pub fn assemble_batch(&self, z: Tensor, xi: Tensor) -> Result<KsdBatch> {
        let mean = self.mean_batch(&z)?;
        let sigma = self.sigma();
        let mut x = mean;
        let mut cond_score = Tensor::zeros(xi.rows(), self.d);
        for i in 0..xi.rows() {
            let xr = x.row_slice_mut(i);
            let cr = cond_score.row_slice_mut(i);
            for j in 0..self.d {
                let e = xi.get(i, j);
                xr[j] += sigma[j] * e;
                cr[j] = -(e / sigma[j]);
            }
        }
        Ok(KsdBatch {
            z,
            xi,
            x,
            cond_score,
            f: None,
            provenance: String::new(),
        })
    }

    /// Samples of x only.
    pub fn sample_x(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        Ok(self.batch_draw(n, rng)?.x)
    }

    pub fn insert_leaves(&self, tape: &mut Tape) -> FamilyVars {
        let mean = match &self.mean {
            MeanMap::Identity => MeanVars::None,
            MeanMap::Constant(m) => MeanVars::Constant(tape.leaf(m.clone())),
            MeanMap::Net(net) | MeanMap::LangevinResidual { net, .. } => {
                MeanVars::Net(net.insert_leaves(tape))
            }
        };
        let rho = if self.train_rho {
            Some(tape.leaf(self.rho.clone()))
        } else {
            None
        };
        FamilyVars { mean, rho }
    }

    /// Differentiable mean map mu(z; phi) for a batch of mixing samples.
    pub fn mean_tape(&self, tape: &mut Tape, vars: &FamilyVars, z: &Tensor) -> Result<Var> {
        if z.cols() != self.d_z {
            return Err(Error::ShapeMismatch {
                context: "mean map input",
                expected: format!("{} columns", self.d_z),
                got: format!("{} columns", z.cols()),
            });
        }
        let n = z.rows();
        let zc = tape.constant(z.clone());
        Ok(match (&self.mean, &vars.mean) {
            (MeanMap::Identity, MeanVars::None) => zc,
            (MeanMap::Constant(_), MeanVars::Constant(m)) => tape.broadcast_row(*m, n),
            (MeanMap::Net(net), MeanVars::Net(net_vars)) => tape_net_forward(tape, net, net_vars, zc)?,
            (
                MeanMap::LangevinResidual {
                    net,
                    sigma_ini,
                    target,
                },
                MeanVars::Net(net_vars),
            ) => {
                // The mixing sample is detached, so the Langevin drift is a
                // constant; only the residual net carries parameters.
                let resid = tape_net_forward(tape, net, net_vars, zc)?;
                let drift = {
                    let score = target.score_batch(z)?;
                    let c = sigma_ini * sigma_ini / 2.0;
                    tape.constant(score.map(|s| c * s))
                };
                let zr = tape.add(zc, resid);
                tape.add(zr, drift)
            }
            _ => unreachable!("vars built from a different family"),
        })
    }

    /// Differentiable reparameterized draw for a whole batch.
    pub fn reparam_tape(
        &self,
        tape: &mut Tape,
        vars: &FamilyVars,
        z: &Tensor,
        xi: &Tensor,
    ) -> Result<TapeDraw> {
        let n = z.rows();
        if xi.shape() != (n, self.d) {
            return Err(Error::ShapeMismatch {
                context: "reparam batch",
                expected: format!("xi nx{}", self.d),
                got: format!("xi {:?}", xi.shape()),
            });
        }
        let mean = self.mean_tape(tape, vars, z)?;
        let sigma_row = match vars.rho {
            Some(rho) => tape.exp(rho),
            None => {
                let frozen = tape.constant(self.rho.clone());
                tape.exp(frozen)
            }
        };
        let sigma = tape.broadcast_row(sigma_row, n);
        let xic = tape.constant(xi.clone());
        let noise = tape.mul(sigma, xic);
        let x = tape.add(mean, noise);
        let xi_over_sigma = tape.div(xic, sigma);
        Ok(TapeDraw { x, xi_over_sigma })
    }

    /// Flat gradient vector in `params_flat` order; parameters that received
    /// no gradient contribute zeros.
    pub fn grads_flat(&self, grads: &Gradients, vars: &FamilyVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match (&self.mean, &vars.mean) {
            (MeanMap::Identity, MeanVars::None) => {}
            (MeanMap::Constant(m), MeanVars::Constant(v)) => {
                push_grad(&mut out, grads, *v, m.numel());
            }
            (MeanMap::Net(net), MeanVars::Net(nv))
            | (MeanMap::LangevinResidual { net, .. }, MeanVars::Net(nv)) => {
                for l in 0..net.layer_count() {
                    push_grad(&mut out, grads, nv.weights[l], net.weight(l).numel());
                    push_grad(&mut out, grads, nv.biases[l], net.bias(l).numel());
                }
            }
            _ => unreachable!("vars built from a different family"),
        }
        if self.train_rho {
            match vars.rho {
                Some(rho) => push_grad(&mut out, grads, rho, self.d),
                None => out.extend(std::iter::repeat(0.0).take(self.d)),
            }
        }
        out
    }

    /// Score of the tractable marginal N(0, (1 + sigma^2) I) available when
    /// the mean map is the identity.
    pub fn marginal_score_reference(&self) -> Result<MarginalScoreRef> {
        if !matches!(self.mean, MeanMap::Identity) {
            return Err(Error::NotIdentityFamily);
        }
        let variances = self.sigma().iter().map(|s| 1.0 + s * s).collect();
        Ok(MarginalScoreRef { variances })
    }
}

fn tape_net_forward(tape: &mut Tape, net: &Mlp, vars: &MlpVars, x: Var) -> Result<Var> {
    net.forward(tape, vars, x)
}

fn push_grad(out: &mut Vec<f64>, grads: &Gradients, v: Var, len: usize) {
    match grads.get(v) {
        Some(g) => out.extend_from_slice(g.data()),
        None => out.extend(std::iter::repeat(0.0).take(len)),
    }
}

/// Per-coordinate score of the identity-mean family's marginal.
pub struct MarginalScoreRef {
    variances: Vec<f64>,
}

impl MarginalScoreRef {
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.variances).map(|(v, var)| -v / var).collect()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Stack of conditional layers below a standard normal prior on R^d.
///
/// All layers share one residual network; each layer has its own log-std
/// vector. The layer-t conditional mean is
/// mu_t(x) = x + net(x) + (sigma_ini^2 / 2) s_t(x) with s_t the annealed
/// score, and the residual net's output layer is zero-initialized so a fresh
/// stack samples exactly like annealed Langevin dynamics.
#[derive(Clone, Debug)]
pub struct HierarchicalFamily {
    layers: usize,
    d: usize,
    net: Mlp,
    rhos: Vec<Tensor>,
    sigma_ini: f64,
}

/// Forward trajectory (x_T, ..., x_0) with the noises that produced it.
pub struct HierTrajectory {
    /// xs[t] = x_t for t in 0..=T (index T is the prior sample).
    pub xs: Vec<Tensor>,
    /// noises[t] is the layer-t noise, t in 0..T.
    pub noises: Vec<Tensor>,
}

impl HierTrajectory {
    pub fn bottom(&self) -> &Tensor {
        &self.xs[0]
    }
}

impl HierarchicalFamily {
    /// `hidden` are the widths of the shared residual net including input
    /// and output (both must equal d).
    pub fn new(
        layers: usize,
        d: usize,
        hidden: &[usize],
        sigma_ini: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidTarget("hierarchy needs at least one layer".into()));
        }
        if hidden.first() != Some(&d) || hidden.last() != Some(&d) {
            return Err(Error::InvalidWidths(hidden.to_vec()));
        }
        if !(sigma_ini > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "sigma_ini must be positive, got {sigma_ini}"
            )));
        }
        let mut net = Mlp::new(hidden, rng)?;
        net.zero_output_layer();
        let rho = Tensor::full(1, d, sigma_ini.ln());
        Ok(HierarchicalFamily {
            layers,
            d,
            net,
            rhos: vec![rho; layers],
            sigma_ini,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sigma_ini(&self) -> f64 {
        self.sigma_ini
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn rho(&self, t: usize) -> &Tensor {
        &self.rhos[t]
    }

    /// View of layer t as a single semi-implicit family whose mixing
    /// distribution is the (detached) layer t+1 marginal.
    pub fn layer_family(&self, path: &AnnealedPath, t: usize) -> Result<SemiImplicitFamily> {
        let target = path.target_at(t)?;
        let mut fam = SemiImplicitFamily::new(
            self.d,
            self.d,
            MeanMap::LangevinResidual {
                net: self.net.clone(),
                sigma_ini: self.sigma_ini,
                target,
            },
            1.0,
        )?;
        fam.rho = self.rhos[t].clone();
        Ok(fam)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.layers * self.d
    }

    /// Flat order: shared net (per layer weight, bias), then rho_0..rho_{T-1}.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.net.flatten_into(&mut out);
        for rho in &self.rhos {
            out.extend_from_slice(rho.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "hierarchy parameter vector",
                expected: format!("{}", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut at = self.net.unflatten_from(flat);
        for rho in &mut self.rhos {
            rho.data_mut().copy_from_slice(&flat[at..at + self.d]);
            at += self.d;
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for l in 0..self.net.layer_count() {
            out.push((format!("w{l}"), self.net.weight(l).clone()));
            out.push((format!("b{l}"), self.net.bias(l).clone()));
        }
        for (t, rho) in self.rhos.iter().enumerate() {
            out.push((format!("rho{t}"), rho.clone()));
        }
        out
    }

    /// Layer-t conditional mean, batched, with frozen parameters.
    pub fn layer_mean(&self, path: &AnnealedPath, t: usize, x_next: &Tensor) -> Result<Tensor> {
        let resid = self.net.forward_plain(x_next)?;
        let score = path.target_at(t)?.score_batch(x_next)?;
        let c = self.sigma_ini * self.sigma_ini / 2.0;
        let mut out = x_next.clone();
        for ((o, &r), &s) in out.data_mut().iter_mut().zip(resid.data()).zip(score.data()) {
            *o = (*o + r) + c * s;
        }
        Ok(out)
    }

    /// Full forward pass from given prior samples and per-layer noises.
    /// noises[t] drives layer t; layers run from t = T-1 down to 0.
    pub fn hier_draw(&self, path: &AnnealedPath, top: Tensor, noises: &[Tensor]) -> Result<HierTrajectory> {
        if path.layers() != self.layers {
            return Err(Error::LayerOutOfRange {
                index: path.layers(),
                layers: self.layers,
            });
        }
        if noises.len() != self.layers {
            return Err(Error::ShapeMismatch {
                context: "hier_draw noises",
                expected: format!("{} layers", self.layers),
                got: format!("{}", noises.len()),
            });
        }
        let n = top.rows();
        top.require_shape(n, self.d, "hier_draw top sample")?;
        let mut xs = vec![Tensor::zeros(0, 0); self.layers + 1];
        xs[self.layers] = top;
        for t in (0..self.layers).rev() {
            noises[t].require_shape(n, self.d, "hier_draw noise")?;
            let sigma: Vec<f64> = self.rhos[t].data().iter().map(|r| r.exp()).collect();
            let mut x = self.layer_mean(path, t, &xs[t + 1])?;
            for i in 0..n {
                let row = x.row_slice_mut(i);
                for j in 0..self.d {
                    row[j] += sigma[j] * noises[t].get(i, j);
                }
            }
            xs[t] = x;
        }
        Ok(HierTrajectory {
            xs,
            noises: noises.to_vec(),
        })
    }

    /// Sample the bottom marginal.
    pub fn sample_x(&self, path: &AnnealedPath, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let top = standard_normal_matrix(rng, n, self.d);
        let noises: Vec<Tensor> = (0..self.layers)
            .map(|_| standard_normal_matrix(rng, n, self.d))
            .collect();
        Ok(self.hier_draw(path, top, &noises)?.xs[0].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, stream};

    #[test]
    fn draw_substitution_examples() {
        // Identity net, sigma = 1: x = z + xi, cond score = -xi.
        let fam = SemiImplicitFamily::identity(2, 1.0).unwrap();
        let (x, cs) = fam.draw(&[1.0, 2.0], &[0.5, -0.5]).unwrap();
        assert_eq!(x, vec![1.5, 1.5]);
        assert_eq!(cs, vec![-0.5, 0.5]);

        // xi = 0 gives x = mu(z), cond score = 0.
        let (x, cs) = fam.draw(&[0.3, -0.2], &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![0.3, -0.2]);
        assert_eq!(cs, vec![0.0, 0.0]);

        // sigma = 2, mu = 0.
        let fam = SemiImplicitFamily::location_scale(2, &[0.0, 0.0], 4.0).unwrap();
        let (x, cs) = fam.draw(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
        assert!((cs[0] + 0.5).abs() < 1e-12 && (cs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conditional_score_identity() {
        let mut rng = rng_for(1, stream::DIAGNOSTIC, 30);
        let fam = SemiImplicitFamily::with_net(&[3, 8, 2], 0.7, &mut rng).unwrap();
        let batch = fam.batch_draw(16, &mut rng).unwrap();
        let sigma = fam.sigma();
        for i in 0..16 {
            for j in 0..2 {
                let e = batch.xi.get(i, j);
                // Definitional identity, bit-exact when recomputed the same way.
                assert_eq!(batch.cond_score.get(i, j), -(e / sigma[j]));
                // sigma * cond_score + xi = 0 up to one rounding of the
                // divide-multiply round trip.
                let resid = sigma[j] * batch.cond_score.get(i, j) + e;
                assert!(resid.abs() <= 4e-16 * e.abs().max(1.0), "resid {resid}");
            }
        }
    }

    #[test]
    fn batch_draw_is_deterministic_and_singleton_matches_draw() {
        let fam = SemiImplicitFamily::identity(3, 0.5).unwrap();
        let a = fam.batch_draw(5, &mut rng_for(2, stream::TRAIN, 0)).unwrap();
        let b = fam.batch_draw(5, &mut rng_for(2, stream::TRAIN, 0)).unwrap();
        assert_eq!(a.x.data(), b.x.data());

        let single = fam.batch_draw(1, &mut rng_for(3, stream::TRAIN, 0)).unwrap();
        let z = single.z.row_slice(0).to_vec();
        let xi = single.xi.row_slice(0).to_vec();
        let (x, cs) = fam.draw(&z, &xi).unwrap();
        assert_eq!(single.x.row_slice(0), &x[..]);
        assert_eq!(single.cond_score.row_slice(0), &cs[..]);
    }

    #[test]
    fn identity_family_mean_is_centered() {
        // x ~ N(0, 2I) for the identity family with sigma = 1: the empirical
        // mean over many draws stays within 4 standard errors of zero.
        let fam = SemiImplicitFamily::identity(2, 1.0).unwrap();
        let n = 100_000;
        let batch = fam.batch_draw(n, &mut rng_for(4, stream::TRAIN, 1)).unwrap();
        let se = 4.0 * (2.0f64).sqrt() / (n as f64).sqrt();
        for j in 0..2 {
            let mean: f64 = (0..n).map(|i| batch.x.get(i, j)).sum::<f64>() / n as f64;
            assert!(mean.abs() < se, "mean {mean} vs 4se {se}");
        }
    }

    #[test]
    fn marginal_score_reference_values() {
        let fam = SemiImplicitFamily::identity(2, 1.0).unwrap();
        let r = fam.marginal_score_reference().unwrap();
        let s = r.score(&[1.0, -2.0]);
        assert!((s[0] + 0.5).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);

        // Per-coordinate variances 1 + sigma_j^2.
        let mut fam = SemiImplicitFamily::identity(2, 1.0).unwrap();
        fam.rho_mut().data_mut()[0] = 0.0; // sigma 1
        fam.rho_mut().data_mut()[1] = (2.0f64).ln(); // sigma 2
        let r = fam.marginal_score_reference().unwrap();
        let s = r.score(&[2.0, 3.0]);
        assert!((s[0] + 1.0).abs() < 1e-12 && (s[1] + 0.6).abs() < 1e-12);

        let mut rng = rng_for(5, stream::DIAGNOSTIC, 31);
        let net_fam = SemiImplicitFamily::with_net(&[2, 4, 2], 1.0, &mut rng).unwrap();
        assert!(matches!(
            net_fam.marginal_score_reference(),
            Err(Error::NotIdentityFamily)
        ));
    }

    #[test]
    fn reparam_tape_matches_plain_and_rho_gradient() {
        let mut rng = rng_for(6, stream::DIAGNOSTIC, 32);
        let fam = SemiImplicitFamily::with_net(&[3, 6, 2], 0.3, &mut rng).unwrap();
        let z = fam.draw_mixing(4, &mut rng);
        let xi = fam.draw_noise(4, &mut rng);
        let batch = fam.assemble_batch(z.clone(), xi.clone()).unwrap();

        let mut tape = Tape::new();
        let vars = fam.insert_leaves(&mut tape);
        let draw = fam.reparam_tape(&mut tape, &vars, &z, &xi).unwrap();
        for (a, b) in tape.value(draw.x).data().iter().zip(batch.x.data()) {
            assert_eq!(a, b);
        }

        // d x_j / d rho_j = sigma_j xi_j via the chain rule through exp.
        let root = tape.sum_all(draw.x);
        let grads = tape.backward(root).unwrap();
        let rho_grad = grads.get(vars.rho.unwrap()).unwrap();
        let sigma = fam.sigma();
        for j in 0..2 {
            let expected: f64 = (0..4).map(|i| sigma[j] * xi.get(i, j)).sum();
            assert!((rho_grad.data()[j] - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn reparam_fd_through_all_parameters() {
        // Perturbing phi with fixed (z, xi) changes sum(x . c) smoothly and
        // the tape gradient matches finite differences.
        let mut rng = rng_for(7, stream::DIAGNOSTIC, 33);
        let fam = SemiImplicitFamily::with_net(&[2, 5, 2], 0.8, &mut rng).unwrap();
        let z = fam.draw_mixing(3, &mut rng);
        let xi = fam.draw_noise(3, &mut rng);
        let c = Tensor::new(3, 2, vec![0.3, -1.0, 0.7, 0.2, -0.4, 1.1]);

        let flat0 = fam.params_flat();
        let grads_flat = {
            let mut tape = Tape::new();
            let vars = fam.insert_leaves(&mut tape);
            let draw = fam.reparam_tape(&mut tape, &vars, &z, &xi).unwrap();
            let cc = tape.constant(c.clone());
            let prod = tape.mul(draw.x, cc);
            let root = tape.sum_all(prod);
            let grads = tape.backward(root).unwrap();
            fam.grads_flat(&grads, &vars)
        };
        let eval = |flat: &[f64]| -> f64 {
            let mut f2 = fam.clone();
            f2.set_params_flat(flat).unwrap();
            let b = f2.assemble_batch(z.clone(), xi.clone()).unwrap();
            b.x.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let mut flat = flat0.clone();
        for k in 0..flat0.len() {
            flat[k] = flat0[k] + h;
            let plus = eval(&flat);
            flat[k] = flat0[k] - h;
            let minus = eval(&flat);
            flat[k] = flat0[k];
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (grads_flat[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {k}: {} vs {}",
                grads_flat[k],
                fd
            );
        }
    }

    #[test]
    fn hierarchy_initialization_is_an_sgld_step() {
        // With zeroed residual output and sigma_t = sigma_ini = 1, one layer
        // step is x + s_t(x)/2 + xi: an SGLD step of size 1.
        let mut rng = rng_for(8, stream::DIAGNOSTIC, 34);
        let hf = HierarchicalFamily::new(1, 2, &[2, 8, 2], 1.0, &mut rng).unwrap();
        let path = AnnealedPath::linear(
            ScoreTarget::standard_normal(2),
            ScoreTarget::multimodal(),
            1,
        )
        .unwrap();
        let top = standard_normal_matrix(&mut rng, 5, 2);
        let noise = standard_normal_matrix(&mut rng, 5, 2);
        let traj = hf.hier_draw(&path, top.clone(), &[noise.clone()]).unwrap();
        let score = path.target_at(0).unwrap().score_batch(&top).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                let expected = (top.get(i, j) + 0.5 * score.get(i, j)) + noise.get(i, j);
                assert_eq!(traj.xs[0].get(i, j), expected);
            }
        }
    }

    #[test]
    fn hierarchy_fixed_point_with_zero_noise_and_score() {
        let mut rng = rng_for(9, stream::DIAGNOSTIC, 35);
        let hf = HierarchicalFamily::new(3, 2, &[2, 4, 2], 1.0, &mut rng).unwrap();
        // Tempering to an enormous temperature makes every layer score
        // negligible, so the trajectory should stay put.
        let zero_score = ScoreTarget::standard_normal(2).tempered(1e300).unwrap();
        let path = AnnealedPath::linear(zero_score.clone(), zero_score, 3).unwrap();
        let top = Tensor::new(2, 2, vec![0.4, -0.7, 1.2, 0.1]);
        let zeros = vec![Tensor::zeros(2, 2); 3];
        let traj = hf.hier_draw(&path, top.clone(), &zeros).unwrap();
        for t in 0..=3 {
            for (a, b) in traj.xs[t].data().iter().zip(top.data()) {
                assert!((a - b).abs() < 1e-250);
            }
        }
    }

    #[test]
    fn single_layer_hierarchy_collapses_to_semi_implicit_layer() {
        let mut rng = rng_for(10, stream::DIAGNOSTIC, 36);
        let hf = HierarchicalFamily::new(1, 2, &[2, 6, 2], 1.0, &mut rng).unwrap();
        let path =
            AnnealedPath::linear(ScoreTarget::standard_normal(2), ScoreTarget::banana(), 1).unwrap();
        let fam = hf.layer_family(&path, 0).unwrap();
        let top = standard_normal_matrix(&mut rng, 4, 2);
        let noise = standard_normal_matrix(&mut rng, 4, 2);
        let traj = hf.hier_draw(&path, top.clone(), &[noise.clone()]).unwrap();
        let batch = fam.assemble_batch(top, noise).unwrap();
        assert_eq!(traj.xs[0].data(), batch.x.data());
    }
}
