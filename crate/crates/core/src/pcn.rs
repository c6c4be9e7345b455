//! Preconditioned Crank–Nicolson MCMC.
//!
//! Proposal `u' = m + √(1−β²)(u − m) + βξ` with `ξ ~ N(0, C)` leaves the
//! Gaussian prior `N(m, C)` invariant, so acceptance only involves the
//! likelihood potential `Φ`.

use crate::ensemble::{EnsembleMeta, PosteriorEnsemble, Provenance};
use crate::error::{Error, Result};
use crate::grf::PriorSampler;
use crate::rng::{component_rng, SimRng};
use crate::scalar::{std_normal, uniform01, Real};
use serde::{Deserialize, Serialize};

pub const ADAPT_INTERVAL: usize = 100;
pub const ADAPT_FACTOR: f64 = 1.05;
pub const TARGET_ACCEPTANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcnConfig {
    pub beta: f64,
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt: bool,
    pub seed: u64,
}

impl Default for PcnConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            n_steps: 200_000,
            burn_in: 20_000,
            thin: 20,
            adapt: true,
            seed: 0,
        }
    }
}

impl PcnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidParameter(format!("beta = {} must lie in (0, 1]", self.beta)));
        }
        if self.burn_in >= self.n_steps {
            return Err(Error::InvalidParameter(format!(
                "burn_in = {} must be below n_steps = {}",
                self.burn_in, self.n_steps
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian prior `N(m, C)` that pCN can draw from.
pub trait GaussianPrior<S>: Sync {
    fn mean(&self) -> Vec<S>;
    /// One draw from `N(0, C)`.
    fn sample_centered(&self, rng: &mut SimRng) -> Vec<S>;
}

#[derive(Debug, Clone)]
pub struct ScalarGaussianPrior {
    pub mean: f64,
    pub std: f64,
}

impl<S: Real> GaussianPrior<S> for ScalarGaussianPrior {
    fn mean(&self) -> Vec<S> {
        vec![S::lit(self.mean)]
    }

    fn sample_centered(&self, rng: &mut SimRng) -> Vec<S> {
        vec![S::lit(self.std) * std_normal::<S, _>(rng)]
    }
}

impl<S: Real> GaussianPrior<S> for PriorSampler<S> {
    fn mean(&self) -> Vec<S> {
        vec![S::zero(); self.n()]
    }

    fn sample_centered(&self, rng: &mut SimRng) -> Vec<S> {
        self.sample(rng).into_values()
    }
}

/// `Φ(u) = ‖y† − G(u)‖² / (2σ_obs²)` from the forward output `G(u)`.
pub fn misfit<S: Real>(g_u: &[S], y_dagger: &[S], sigma_obs: S) -> Result<S> {
    if g_u.len() != y_dagger.len() {
        return Err(Error::LengthMismatch {
            expected: y_dagger.len(),
            got: g_u.len(),
        });
    }
    let ss = g_u.iter().zip(y_dagger).fold(S::zero(), |a, (&g, &y)| a + (y - g) * (y - g));
    Ok(ss / (S::lit(2.0) * sigma_obs * sigma_obs))
}

/// Likelihood potential of `u`.
pub fn potential<S: Real>(
    u: &[S],
    y_dagger: &[S],
    forward: &dyn Fn(&[S]) -> Result<Vec<S>>,
    sigma_obs: S,
) -> Result<S> {
    misfit(&forward(u)?, y_dagger, sigma_obs)
}

#[derive(Debug, Clone)]
pub struct PcnResult<S> {
    pub ensemble: PosteriorEnsemble<S>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    pub burn_in_acceptance: f64,
    pub final_beta: f64,
    /// `Φ` of the current state after every step.
    pub phi_trace: Vec<f64>,
    /// Proposals rejected because the forward model failed.
    pub forward_failures: usize,
}

/// Runs one chain started from a prior draw.
///
/// `phi` returns the potential of a state; a proposal whose potential
/// fails to evaluate is rejected and counted.
pub fn run_chain<S: Real>(
    y_dagger: &[S],
    phi: &(dyn Fn(&[S]) -> Result<S> + Sync),
    prior: &dyn GaussianPrior<S>,
    cfg: &PcnConfig,
) -> Result<PcnResult<S>> {
    cfg.validate()?;
    let mut rng = component_rng(cfg.seed, "pcn");
    let mean = prior.mean();
    let mut u: Vec<S> = prior
        .sample_centered(&mut rng)
        .iter()
        .zip(&mean)
        .map(|(&z, &m)| m + z)
        .collect();
    let mut phi_u = phi(&u)?;
    let mut beta = cfg.beta;
    let mut accepted_window = 0usize;
    let mut accepted_burn = 0usize;
    let mut accepted_main = 0usize;
    let mut failures = 0usize;
    let mut samples = Vec::with_capacity((cfg.n_steps - cfg.burn_in) / cfg.thin + 1);
    let mut trace = Vec::with_capacity(cfg.n_steps);
    let mut proposal = vec![S::zero(); u.len()];

    for step in 0..cfg.n_steps {
        let b = S::lit(beta);
        let keep = S::lit((1.0 - beta * beta).sqrt());
        let xi = prior.sample_centered(&mut rng);
        for i in 0..u.len() {
            proposal[i] = mean[i] + keep * (u[i] - mean[i]) + b * xi[i];
        }
        let accept_u: f64 = uniform01(&mut rng);
        let accepted = match phi(&proposal) {
            Ok(phi_p) => {
                let log_a = (phi_u - phi_p).to_f64_lossy();
                if log_a >= 0.0 || accept_u.ln() < log_a {
                    std::mem::swap(&mut u, &mut proposal);
                    phi_u = phi_p;
                    true
                } else {
                    false
                }
            }
            Err(_) => {
                failures += 1;
                false
            }
        };
        trace.push(phi_u.to_f64_lossy());
        if step < cfg.burn_in {
            if accepted {
                accepted_burn += 1;
                accepted_window += 1;
            }
            if cfg.adapt && (step + 1) % ADAPT_INTERVAL == 0 {
                let rate = accepted_window as f64 / ADAPT_INTERVAL as f64;
                beta = if rate > TARGET_ACCEPTANCE {
                    (beta * ADAPT_FACTOR).min(1.0)
                } else {
                    beta / ADAPT_FACTOR
                };
                accepted_window = 0;
            }
        } else {
            if accepted {
                accepted_main += 1;
            }
            if (step - cfg.burn_in) % cfg.thin == 0 {
                samples.push(u.clone());
            }
        }
    }
    if failures > 0 {
        log::warn!("{failures} pCN proposals rejected after forward-model failures");
    }
    let acceptance_rate = accepted_main as f64 / (cfg.n_steps - cfg.burn_in) as f64;
    let burn_in_acceptance = if cfg.burn_in > 0 {
        accepted_burn as f64 / cfg.burn_in as f64
    } else {
        f64::NAN
    };
    let ensemble = PosteriorEnsemble::new(
        samples,
        EnsembleMeta {
            provenance: Provenance::Pcn,
            y_dagger: y_dagger.iter().map(|v| v.to_f64_lossy()).collect(),
            seed: cfg.seed,
            info: serde_json::json!({
                "acceptance_rate": acceptance_rate,
                "final_beta": beta,
                "config": cfg,
            }),
        },
    )?;
    Ok(PcnResult {
        ensemble,
        acceptance_rate,
        burn_in_acceptance,
        final_beta: beta,
        phi_trace: trace,
        forward_failures: failures,
    })
}
