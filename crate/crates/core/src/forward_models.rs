//! Forward operators `G`: the scalar quadratic map, 1D Darcy pressure
//! observations and 1D acoustic first-arrival times.

use crate::error::{Error, Result};
use crate::grf::{grid_points, GridField};
use crate::scalar::{std_normal, Real};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Smallest observation noise level accepted anywhere.
pub const MIN_SIGMA_OBS: f64 = 1e-12;

/// Anything that maps a parameter vector to an observation vector.
pub trait ForwardModel<S: Real>: Send + Sync {
    fn observe(&self, u: &[S]) -> Result<Vec<S>>;
    fn obs_dim(&self) -> usize;
    /// Dimension of the parameter vector this model consumes.
    fn param_dim(&self) -> usize;
}

pub fn quadratic_forward<S: Real>(u: S) -> S {
    u * u
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Quadratic;

impl<S: Real> ForwardModel<S> for Quadratic {
    fn observe(&self, u: &[S]) -> Result<Vec<S>> {
        if u.len() != 1 {
            return Err(Error::LengthMismatch {
                expected: 1,
                got: u.len(),
            });
        }
        Ok(vec![quadratic_forward(u[0])])
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }
}

// ---------------------------------------------------------------------------
// Darcy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DarcyConfig {
    pub n: usize,
    pub obs_points: Vec<f64>,
}

impl Default for DarcyConfig {
    fn default() -> Self {
        Self {
            n: 64,
            obs_points: (1..=8).map(|j| j as f64 / 9.0).collect(),
        }
    }
}

impl DarcyConfig {
    pub fn with_n(n: usize) -> Self {
        Self {
            n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter(format!("darcy grid n must be >= 2, got {}", self.n)));
        }
        check_interior_increasing(&self.obs_points, "darcy obs_points")
    }
}

fn check_interior_increasing(points: &[f64], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidParameter(format!("{what} is empty")));
    }
    if points.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(Error::InvalidParameter(format!("{what} must lie strictly inside (0, 1)")));
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

/// Solves `−(a p')' = 1`, `p(0) = p(1) = 0`, with `a = exp(u)`.
///
/// Cell-centered conservative finite differences: harmonic-mean interface
/// coefficients, quadratic ghost extrapolation for the Dirichlet data and a
/// log-linear extrapolation of `a` to the walls. The scheme reproduces
/// quadratic solutions exactly when `a` is constant.
pub fn darcy_solve<S: Real>(log_perm: &GridField<S>, cfg: &DarcyConfig) -> Result<GridField<S>> {
    cfg.validate()?;
    let u = log_perm.values();
    let n = u.len();
    if n != cfg.n {
        return Err(Error::GridMismatch(n, cfg.n));
    }
    let a: Vec<S> = u.iter().map(|v| v.exp()).collect();
    let two = S::lit(2.0);
    let three = S::lit(3.0);
    let third = S::lit(1.0 / 3.0);
    let half = S::lit(0.5);
    // interface i+1/2 between cells i and i+1
    let face: Vec<S> = a.windows(2).map(|w| two * w[0] * w[1] / (w[0] + w[1])).collect();
    let a_left = ((three * u[0] - u[1]) * half).exp();
    let a_right = ((three * u[n - 1] - u[n - 2]) * half).exp();

    let h = S::one() / S::from_usize_lossy(n);
    let h2 = h * h;
    let mut lower = vec![S::zero(); n];
    let mut diag = vec![S::zero(); n];
    let mut upper = vec![S::zero(); n];
    let rhs = vec![h2; n];
    for i in 0..n {
        let west = if i == 0 { None } else { Some(face[i - 1]) };
        let east = if i + 1 == n { None } else { Some(face[i]) };
        match (west, east) {
            (Some(w), Some(e)) => {
                lower[i] = -w;
                diag[i] = w + e;
                upper[i] = -e;
            }
            (None, Some(e)) => {
                diag[i] = e + three * a_left;
                upper[i] = -e - a_left * third;
            }
            (Some(w), None) => {
                lower[i] = -w - a_right * third;
                diag[i] = w + three * a_right;
            }
            (None, None) => unreachable!("n >= 2"),
        }
    }
    let p = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    GridField::new(p)
}

/// Thomas algorithm. `lower[0]` and `upper[n-1]` are ignored.
pub(crate) fn solve_tridiagonal<S: Real>(lower: &[S], diag: &[S], upper: &[S], rhs: &[S]) -> Result<Vec<S>> {
    let n = diag.len();
    let mut c = vec![S::zero(); n];
    let mut d = vec![S::zero(); n];
    let mut beta = diag[0];
    if beta == S::zero() {
        return Err(Error::NonFinite("singular tridiagonal system".into()));
    }
    c[0] = upper[0] / beta;
    d[0] = rhs[0] / beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == S::zero() || !beta.is_finite() {
            return Err(Error::NonFinite("singular tridiagonal system".into()));
        }
        c[i] = if i + 1 < n { upper[i] / beta } else { S::zero() };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        d[i] = d[i] - c[i] * d[i + 1];
    }
    Ok(d)
}

/// Linear interpolation of midpoint values, with the boundary values
/// `p(0) = p(1) = 0` used outside the first and last midpoints.
pub fn interpolate_dirichlet<S: Real>(values: &[S], x: f64) -> S {
    let n = values.len();
    let pos = x * n as f64 - 0.5;
    if pos < 0.0 {
        // between the wall (value 0) at x = 0 and the first midpoint
        let w = x / (0.5 / n as f64);
        return values[0] * S::lit(w);
    }
    if pos > (n - 1) as f64 {
        let w = (1.0 - x) / (0.5 / n as f64);
        return values[n - 1] * S::lit(w);
    }
    lerp_at(values, pos)
}

fn lerp_at<S: Real>(values: &[S], pos: f64) -> S {
    let n = values.len();
    let i = (pos.floor() as usize).min(n - 2);
    let t = S::lit(pos - i as f64);
    values[i] + t * (values[i + 1] - values[i])
}

pub fn darcy_observe<S: Real>(p: &GridField<S>, cfg: &DarcyConfig) -> Vec<S> {
    cfg.obs_points
        .iter()
        .map(|x| interpolate_dirichlet(p.values(), *x))
        .collect()
}

#[derive(Debug, Clone)]
pub struct DarcyForward {
    pub cfg: DarcyConfig,
}

impl<S: Real> ForwardModel<S> for DarcyForward {
    fn observe(&self, u: &[S]) -> Result<Vec<S>> {
        let field = GridField::new(u.to_vec())?;
        let p = darcy_solve(&field, &self.cfg)?;
        Ok(darcy_observe(&p, &self.cfg))
    }

    fn obs_dim(&self) -> usize {
        self.cfg.obs_points.len()
    }

    fn param_dim(&self) -> usize {
        self.cfg.n
    }
}

// ---------------------------------------------------------------------------
// Wave

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RickerSource {
    pub center: f64,
    pub width: f64,
    pub f0: f64,
    pub t0: f64,
    pub amplitude: f64,
}

impl Default for RickerSource {
    fn default() -> Self {
        Self {
            center: 0.5,
            width: 0.02,
            f0: 15.0,
            t0: 0.1,
            amplitude: 100.0,
        }
    }
}

/// `(1 − 2π²f0²τ²) exp(−π²f0²τ²)` with `τ = t − t0`.
pub fn ricker(t: f64, f0: f64, t0: f64) -> f64 {
    let a = (std::f64::consts::PI * f0 * (t - t0)).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveConfig {
    pub n: usize,
    pub t_final: f64,
    pub cfl: f64,
    pub receivers: Vec<f64>,
    pub source: RickerSource,
    pub threshold_frac: f64,
    pub c_high: f64,
    pub c_low: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self {
            n: 128,
            t_final: 1.0,
            cfl: 0.5,
            receivers: (1..=8).map(|j| j as f64 / 9.0).collect(),
            source: RickerSource::default(),
            threshold_frac: 0.2,
            c_high: 0.27f64.exp(),
            c_low: (-0.27f64).exp(),
        }
    }
}

impl WaveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InvalidParameter(format!("wave grid n must be >= 3, got {}", self.n)));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::InvalidParameter("t_final must be > 0".into()));
        }
        if !(self.cfl > 0.0 && self.cfl < 1.0) {
            return Err(Error::InvalidParameter(format!("cfl must lie in (0, 1), got {}", self.cfl)));
        }
        check_interior_increasing(&self.receivers, "wave receivers")?;
        if !(self.threshold_frac > 0.0 && self.threshold_frac <= 1.0) {
            return Err(Error::InvalidParameter("threshold_frac must lie in (0, 1]".into()));
        }
        if !(self.c_low > 0.0 && self.c_low < self.c_high) {
            return Err(Error::InvalidParameter("need 0 < c_low < c_high".into()));
        }
        if !(self.source.width > 0.0 && self.source.f0 > 0.0) {
            return Err(Error::InvalidParameter("source width and f0 must be > 0".into()));
        }
        Ok(())
    }
}

/// Binary level set: `c_high` where `u > 0`, `c_low` where `u ≤ 0`.
pub fn levelset<S: Real>(u: &GridField<S>, cfg: &WaveConfig) -> GridField<S> {
    let hi = S::lit(cfg.c_high);
    let lo = S::lit(cfg.c_low);
    let values = u
        .values()
        .iter()
        .map(|v| if *v > S::zero() { hi } else { lo })
        .collect();
    GridField::new(values).expect("finite speeds")
}

/// Space-time wavefield, time-major: `field[t][i]` at `t·dt`, `x_i`.
#[derive(Debug, Clone)]
pub struct WaveSolution<S> {
    pub dt: f64,
    pub field: Vec<Vec<S>>,
}

impl<S: Real> WaveSolution<S> {
    pub fn n_steps(&self) -> usize {
        self.field.len()
    }

    /// Linearly interpolated time series at each receiver.
    pub fn records(&self, receivers: &[f64]) -> Vec<Vec<S>> {
        receivers
            .iter()
            .map(|x| {
                let n = self.field[0].len();
                let pos = (x * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                self.field.iter().map(|row| lerp_at(row, pos)).collect()
            })
            .collect()
    }
}

/// Stable time step `cfl·dx/max(c)`.
pub fn stable_dt<S: Real>(c: &GridField<S>, cfg: &WaveConfig) -> f64 {
    let cmax = c.values().iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));
    cfg.cfl / (c.n() as f64 * cmax)
}

/// Leapfrog solve with the default time step.
pub fn wave_solve<S: Real>(c: &GridField<S>, cfg: &WaveConfig) -> Result<WaveSolution<S>> {
    wave_solve_with_dt(c, cfg, stable_dt(c, cfg))
}

/// `p_tt − c² p_xx = f`, homogeneous Neumann walls via mirrored ghost
/// cells, zero initial data, second-order centered in space and time.
pub fn wave_solve_with_dt<S: Real>(c: &GridField<S>, cfg: &WaveConfig, dt: f64) -> Result<WaveSolution<S>> {
    cfg.validate()?;
    let n = c.n();
    if n != cfg.n {
        return Err(Error::GridMismatch(n, cfg.n));
    }
    let dx = 1.0 / n as f64;
    let cmax = c.values().iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));
    let limit = dx / cmax;
    if !(dt > 0.0) || dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let steps = (cfg.t_final / dt).ceil() as usize;
    let xs: Vec<f64> = grid_points(n);
    let src = &cfg.source;
    let shape: Vec<S> = xs
        .iter()
        .map(|x| S::lit(src.amplitude * (-(x - src.center).powi(2) / (2.0 * src.width * src.width)).exp()))
        .collect();
    let r2: Vec<S> = c.values().iter().map(|v| *v * *v * S::lit(dt * dt / (dx * dx))).collect();
    let dt2 = S::lit(dt * dt);

    let mut field = Vec::with_capacity(steps + 1);
    let prev = vec![S::zero(); n];
    field.push(prev.clone());
    // p(dt) = dt²/2 · f(x, 0) from zero displacement and velocity
    let w0 = S::lit(ricker(0.0, src.f0, src.t0));
    let cur: Vec<S> = shape.iter().map(|s| S::lit(0.5) * dt2 * w0 * *s).collect();
    field.push(cur);
    let two = S::lit(2.0);
    for step in 1..steps {
        let w = S::lit(ricker(step as f64 * dt, src.f0, src.t0));
        let p = &field[step];
        let pm = &field[step - 1];
        let mut next = vec![S::zero(); n];
        for i in 0..n {
            let left = if i == 0 { p[0] } else { p[i - 1] };
            let right = if i + 1 == n { p[n - 1] } else { p[i + 1] };
            let lap = left - two * p[i] + right;
            next[i] = two * p[i] - pm[i] + r2[i] * lap + dt2 * w * shape[i];
        }
        field.push(next);
    }
    Ok(WaveSolution { dt, field })
}

/// First time `|s(t)|` reaches `threshold_frac · max |s|`, linearly
/// interpolated between samples.
pub fn arrival_times<S: Real>(records: &[Vec<S>], dt: f64, threshold_frac: f64) -> Result<Vec<S>> {
    records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            let peak = rec.iter().fold(S::zero(), |m, v| m.max(v.abs()));
            if !(peak > S::zero()) {
                return Err(Error::NoArrival { receiver: r });
            }
            let thr = S::lit(threshold_frac) * peak;
            let j = rec
                .iter()
                .position(|v| v.abs() >= thr)
                .expect("peak sample reaches threshold");
            if j == 0 {
                return Ok(S::zero());
            }
            let a = rec[j - 1].abs();
            let b = rec[j].abs();
            let frac = if b > a { (thr - a) / (b - a) } else { S::zero() };
            Ok(S::lit(dt) * (S::from_usize_lossy(j - 1) + frac))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct WaveForward {
    pub cfg: WaveConfig,
}

impl WaveForward {
    pub fn solve<S: Real>(&self, u: &[S]) -> Result<WaveSolution<S>> {
        let field = GridField::new(u.to_vec())?;
        wave_solve(&levelset(&field, &self.cfg), &self.cfg)
    }
}

impl<S: Real> ForwardModel<S> for WaveForward {
    fn observe(&self, u: &[S]) -> Result<Vec<S>> {
        let sol = self.solve(u)?;
        arrival_times(&sol.records(&self.cfg.receivers), sol.dt, self.cfg.threshold_frac)
    }

    fn obs_dim(&self) -> usize {
        self.cfg.receivers.len()
    }

    fn param_dim(&self) -> usize {
        self.cfg.n
    }
}

// ---------------------------------------------------------------------------
// Noise

#[derive(Debug, Clone, PartialEq)]
pub struct Observation<S> {
    pub y: Vec<S>,
    pub sigma_obs: S,
}

pub fn check_sigma_obs(sigma_obs: f64) -> Result<()> {
    if !(sigma_obs.is_finite() && sigma_obs >= MIN_SIGMA_OBS) {
        return Err(Error::InvalidParameter(format!(
            "sigma_obs must be >= {MIN_SIGMA_OBS:e}, got {sigma_obs:e}"
        )));
    }
    Ok(())
}

/// `y = y_clean + σ_obs ξ`, `ξ ~ N(0, I)`.
pub fn add_noise<S: Real, R: Rng + ?Sized>(y_clean: &[S], sigma_obs: S, rng: &mut R) -> Result<Observation<S>> {
    check_sigma_obs(sigma_obs.to_f64_lossy())?;
    if let Some(i) = y_clean.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("clean observation entry {i}")));
    }
    let y = y_clean
        .iter()
        .map(|v| *v + sigma_obs * std_normal::<S, _>(rng))
        .collect();
    Ok(Observation { y, sigma_obs })
}
