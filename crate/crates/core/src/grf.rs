//! Gaussian random fields on `(0, 1)` with Neumann covariance structure.
//!
//! The prior covariance `C = σ²(−Δ + τ²I)^{−α}` is diagonal in the cosine
//! basis. Fields live on the midpoint grid `x_i = (i + ½)/n`, where the
//! sampled functions `{1, √2 cos(kπx)}` are exactly orthonormal under the
//! `1/n`-weighted inner product (the orthonormal DCT-II). The constant mode
//! is not part of the prior: samples have zero spatial mean, `C^{1/2}`
//! refuses inputs that carry a constant component, and the Cameron–Martin
//! norm only accepts zero-mean perturbations.

use crate::error::{Error, Result};
use crate::scalar::{std_normal, Real};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tolerance on the spatial mean accepted by [`cm_norm`].
pub const CM_MEAN_TOL: f64 = 1e-10;

/// Parameters of `C = σ²(−Δ + τ²I)^{−α}` truncated to `k_modes` cosine modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec<S> {
    pub sigma: S,
    pub tau: S,
    pub alpha: S,
    pub k_modes: usize,
}

impl<S: Real> CovarianceSpec<S> {
    pub fn new(sigma: S, tau: S, alpha: S, k_modes: usize) -> Result<Self> {
        let spec = Self {
            sigma,
            tau,
            alpha,
            k_modes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: S| v.is_finite() && v > S::zero();
        if !pos(self.sigma) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !pos(self.tau) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !pos(self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.k_modes == 0 {
            return Err(Error::InvalidParameter("k_modes must be >= 1".into()));
        }
        Ok(())
    }

    /// `λ_k = σ²((kπ)² + τ²)^{−α}` for `k ≥ 1`.
    pub fn eigenvalue(&self, k: usize) -> Result<S> {
        eigenvalue(k, self)
    }

    /// `λ_1 .. λ_{k_modes}`.
    pub fn eigenvalues(&self) -> Vec<S> {
        (1..=self.k_modes)
            .map(|k| raw_eigenvalue(k, self))
            .collect()
    }

    /// `√λ_1 .. √λ_{k_modes}`.
    pub fn sqrt_eigenvalues(&self) -> Vec<S> {
        self.eigenvalues().into_iter().map(|l| l.sqrt()).collect()
    }

    pub fn check_grid(&self, n: usize) -> Result<()> {
        if self.k_modes + 1 > n {
            return Err(Error::Aliasing {
                k_modes: self.k_modes,
                n,
            });
        }
        Ok(())
    }
}

fn raw_eigenvalue<S: Real>(k: usize, spec: &CovarianceSpec<S>) -> S {
    let kpi = S::from_usize_lossy(k) * S::PI();
    spec.sigma * spec.sigma * (kpi * kpi + spec.tau * spec.tau).powf(-spec.alpha)
}

/// Covariance eigenvalue of the `k`-th nonconstant cosine mode.
pub fn eigenvalue<S: Real>(k: usize, spec: &CovarianceSpec<S>) -> Result<S> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::ConstantModeIndex);
    }
    Ok(raw_eigenvalue(k, spec))
}

/// A real function sampled on the midpoint grid of `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<S> {
    values: Vec<S>,
}

impl<S: Real> GridField<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 points, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(vec![S::zero(); n])
    }

    pub fn from_fn(n: usize, f: impl Fn(S) -> S) -> Result<Self> {
        Self::new(grid_points(n).into_iter().map(f).collect())
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn mean(&self) -> S {
        self.values.iter().copied().sum::<S>() / S::from_usize_lossy(self.n())
    }

    /// Discrete `L²(0,1)` norm: `√((1/n) Σ f_i²)`.
    pub fn norm_u(&self) -> S {
        norm_u(&self.values)
    }
}

/// Midpoints `(i + ½)/n`.
pub fn grid_points<S: Real>(n: usize) -> Vec<S> {
    let nf = S::from_usize_lossy(n);
    (0..n)
        .map(|i| (S::from_usize_lossy(i) + S::lit(0.5)) / nf)
        .collect()
}

pub fn norm_u<S: Real>(values: &[S]) -> S {
    let n = S::from_usize_lossy(values.len());
    (values.iter().map(|v| *v * *v).sum::<S>() / n).sqrt()
}

/// Coefficients in the orthonormal basis `{1, √2 cos(kπx)}`.
///
/// `ck[k - 1]` multiplies `√2 cos(kπx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoeffs<S> {
    pub c0: S,
    pub ck: Vec<S>,
}

impl<S: Real> SpectralCoeffs<S> {
    pub fn zeros(k_modes: usize) -> Self {
        Self {
            c0: S::zero(),
            ck: vec![S::zero(); k_modes],
        }
    }

    pub fn k_modes(&self) -> usize {
        self.ck.len()
    }
}

/// Precomputed cosine table for modes `0..=k_max` on an `n`-point grid.
///
/// `phi[k * n + i] = φ_k(x_i)` with `φ_0 = 1` and `φ_k = √2 cos(kπx)`.
#[derive(Debug, Clone)]
pub struct CosineBasis<S> {
    n: usize,
    k_max: usize,
    phi: Vec<S>,
}

impl<S: Real> CosineBasis<S> {
    /// Table for modes `0..=k_max`; requires `k_max <= n - 1`.
    pub fn new(n: usize, k_max: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("grid needs at least 2 points, got {n}")));
        }
        if k_max + 1 > n {
            return Err(Error::Aliasing { k_modes: k_max, n });
        }
        let sqrt2 = S::lit(2.0).sqrt();
        let mut phi = Vec::with_capacity((k_max + 1) * n);
        // cos evaluated in f64 so the f32 table is correctly rounded.
        for k in 0..=k_max {
            for i in 0..n {
                if k == 0 {
                    phi.push(S::one());
                } else {
                    let x = (i as f64 + 0.5) / n as f64;
                    let c = (k as f64 * std::f64::consts::PI * x).cos();
                    phi.push(sqrt2 * S::lit(c));
                }
            }
        }
        Ok(Self { n, k_max, phi })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[S] {
        &self.phi[k * self.n..(k + 1) * self.n]
    }

    /// `⟨f, φ_k⟩` under the `1/n`-weighted inner product.
    pub fn coefficient(&self, values: &[S], k: usize) -> S {
        let row = self.row(k);
        let mut acc = S::zero();
        for (p, v) in row.iter().zip(values) {
            acc += *p * *v;
        }
        acc / S::from_usize_lossy(self.n)
    }

    /// Coefficients for modes `0..=k_max` written into `out`.
    pub fn analyze_into(&self, values: &[S], out: &mut [S]) -> Result<()> {
        if values.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                got: values.len(),
            });
        }
        if out.len() != self.k_max + 1 {
            return Err(Error::LengthMismatch {
                expected: self.k_max + 1,
                got: out.len(),
            });
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.coefficient(values, k);
        }
        Ok(())
    }

    /// Field values from coefficients of modes `0..coeffs.len()`.
    pub fn synthesize_into(&self, coeffs: &[S], out: &mut [S]) -> Result<()> {
        if coeffs.len() > self.k_max + 1 {
            return Err(Error::LengthMismatch {
                expected: self.k_max + 1,
                got: coeffs.len(),
            });
        }
        if out.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                got: out.len(),
            });
        }
        out.iter_mut().for_each(|o| *o = S::zero());
        for (k, c) in coeffs.iter().enumerate() {
            if *c == S::zero() {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.row(k)) {
                *o += *c * *p;
            }
        }
        Ok(())
    }

    pub fn forward(&self, f: &GridField<S>, k_modes: usize) -> Result<SpectralCoeffs<S>> {
        if f.n() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                got: f.n(),
            });
        }
        if k_modes > self.k_max {
            return Err(Error::Aliasing { k_modes, n: self.n });
        }
        Ok(SpectralCoeffs {
            c0: self.coefficient(f.values(), 0),
            ck: (1..=k_modes).map(|k| self.coefficient(f.values(), k)).collect(),
        })
    }

    pub fn inverse(&self, c: &SpectralCoeffs<S>) -> Result<GridField<S>> {
        let mut all = Vec::with_capacity(c.ck.len() + 1);
        all.push(c.c0);
        all.extend_from_slice(&c.ck);
        let mut out = vec![S::zero(); self.n];
        self.synthesize_into(&all, &mut out)?;
        GridField::new(out)
    }
}

/// Orthonormal DCT-II analysis, keeping the constant mode and modes `1..=k_modes`.
pub fn dct_forward<S: Real>(f: &GridField<S>, k_modes: usize) -> Result<SpectralCoeffs<S>> {
    let basis = CosineBasis::new(f.n(), k_modes)?;
    basis.forward(f, k_modes)
}

/// Synthesis on an `n`-point grid.
pub fn dct_inverse<S: Real>(c: &SpectralCoeffs<S>, n: usize) -> Result<GridField<S>> {
    let basis = CosineBasis::new(n, c.k_modes())?;
    basis.inverse(c)
}

/// Scales mode `k` by `√λ_k`. The constant mode must be exactly zero.
pub fn apply_cov_sqrt<S: Real>(c: &SpectralCoeffs<S>, spec: &CovarianceSpec<S>) -> Result<SpectralCoeffs<S>> {
    spec.validate()?;
    if c.c0 != S::zero() {
        return Err(Error::NonzeroConstantMode(c.c0.to_f64_lossy()));
    }
    if c.ck.len() != spec.k_modes {
        return Err(Error::LengthMismatch {
            expected: spec.k_modes,
            got: c.ck.len(),
        });
    }
    Ok(SpectralCoeffs {
        c0: S::zero(),
        ck: c
            .ck
            .iter()
            .zip(spec.sqrt_eigenvalues())
            .map(|(v, s)| *v * s)
            .collect(),
    })
}

/// KL coefficient `⟨f, √2 cos(kπ·)⟩` for `1 ≤ k ≤ n − 1`.
pub fn project_kl<S: Real>(f: &GridField<S>, k: usize, _spec: &CovarianceSpec<S>) -> Result<S> {
    let n = f.n();
    if k == 0 || k >= n {
        return Err(Error::ModeOutOfRange { k, n });
    }
    let nf = n as f64;
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut acc = S::zero();
    for (i, v) in f.values().iter().enumerate() {
        let x = (i as f64 + 0.5) / nf;
        acc += *v * S::lit(sqrt2 * (k as f64 * std::f64::consts::PI * x).cos());
    }
    Ok(acc / S::from_usize_lossy(n))
}

/// Cameron–Martin norm `√(Σ_k h_k² / λ_k)` over the retained modes.
pub fn cm_norm<S: Real>(h: &GridField<S>, spec: &CovarianceSpec<S>) -> Result<S> {
    spec.validate()?;
    spec.check_grid(h.n())?;
    let mean = h.mean();
    if mean.abs() > S::lit(CM_MEAN_TOL) {
        return Err(Error::NonzeroMean(mean.to_f64_lossy()));
    }
    let basis = CosineBasis::new(h.n(), spec.k_modes)?;
    let coeffs = basis.forward(h, spec.k_modes)?;
    Ok(coeffs
        .ck
        .iter()
        .zip(spec.eigenvalues())
        .map(|(c, l)| *c * *c / l)
        .sum::<S>()
        .sqrt())
}

/// Karhunen–Loève sampler with a cached basis, for hot loops.
#[derive(Debug, Clone)]
pub struct PriorSampler<S> {
    spec: CovarianceSpec<S>,
    basis: CosineBasis<S>,
    sqrt_lambda: Vec<S>,
}

impl<S: Real> PriorSampler<S> {
    pub fn new(spec: CovarianceSpec<S>, n: usize) -> Result<Self> {
        spec.validate()?;
        spec.check_grid(n)?;
        Ok(Self {
            basis: CosineBasis::new(n, spec.k_modes)?,
            sqrt_lambda: spec.sqrt_eigenvalues(),
            spec,
        })
    }

    pub fn spec(&self) -> &CovarianceSpec<S> {
        &self.spec
    }

    pub fn basis(&self) -> &CosineBasis<S> {
        &self.basis
    }

    pub fn n(&self) -> usize {
        self.basis.n()
    }

    /// Draws the KL coefficients `√λ_k ξ_k`, `k = 1..=k_modes`.
    pub fn sample_coeffs<R: Rng + ?Sized>(&self, rng: &mut R) -> SpectralCoeffs<S> {
        SpectralCoeffs {
            c0: S::zero(),
            ck: self
                .sqrt_lambda
                .iter()
                .map(|s| *s * std_normal::<S, _>(rng))
                .collect(),
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [S]) {
        let c = self.sample_coeffs(rng);
        let mut all = Vec::with_capacity(c.ck.len() + 1);
        all.push(S::zero());
        all.extend_from_slice(&c.ck);
        self.basis
            .synthesize_into(&all, out)
            .expect("sampler buffers sized at construction");
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GridField<S> {
        let mut out = vec![S::zero(); self.n()];
        self.sample_into(rng, &mut out);
        GridField { values: out }
    }
}

/// One draw from `N(0, C)` on an `n`-point grid.
pub fn sample_prior<S: Real, R: Rng + ?Sized>(
    spec: &CovarianceSpec<S>,
    n: usize,
    rng: &mut R,
) -> Result<GridField<S>> {
    Ok(PriorSampler::new(*spec, n)?.sample(rng))
}
