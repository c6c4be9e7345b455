//! Joint samples `(u, y)` and their on-disk format.
//!
//! Layout of an `.atjd` file, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `ATJD` |
//! | 4 | version `u32` = 1 |
//! | 8 | rows `N` |
//! | 8 | `d_u` |
//! | 8 | `d_y` |
//! | `8·N·d_u` | `u`, row-major `f64` |
//! | `8·N·d_y` | `y`, row-major `f64` |
//!
//! Metadata lives in the sidecar `<path>.meta.json`.

use crate::error::{Error, Result};
use crate::forward_models::{
    add_noise, check_sigma_obs, darcy_observe, darcy_solve, DarcyConfig, WaveConfig, WaveForward,
};
use crate::grf::{CovarianceSpec, GridField, PriorSampler};
use crate::io::{len_from_u64, BinReader, BinWriter};
use crate::rng::{component_rng, SimRng};
use crate::scalar::std_normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub const ATJD_MAGIC: [u8; 4] = *b"ATJD";
pub const ATJD_VERSION: u32 = 1;
pub const MAX_FORWARD_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Quadratic,
    Darcy,
    Wave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Scalar { mean: f64, std: f64 },
    Field { covariance: CovarianceSpec<f64> },
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriorConfig::Scalar { mean, std } => {
                if !mean.is_finite() || !(*std > 0.0 && std.is_finite()) {
                    return Err(Error::InvalidParameter(format!("scalar prior N({mean}, {std}²)")));
                }
                Ok(())
            }
            PriorConfig::Field { covariance } => covariance.validate(),
        }
    }

    pub fn covariance(&self) -> Option<&CovarianceSpec<f64>> {
        match self {
            PriorConfig::Field { covariance } => Some(covariance),
            PriorConfig::Scalar { .. } => None,
        }
    }
}

fn default_block_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub experiment: Experiment,
    pub prior: PriorConfig,
    pub sigma_obs: f64,
    #[serde(default)]
    pub darcy: DarcyConfig,
    #[serde(default)]
    pub wave: WaveConfig,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
}

impl GenerateConfig {
    /// Scalar prior `N(0, 1)`, `y = u² + η`, `σ_obs = 1`.
    pub fn exp1() -> Self {
        Self {
            experiment: Experiment::Quadratic,
            prior: PriorConfig::Scalar { mean: 0.0, std: 1.0 },
            sigma_obs: 1.0,
            darcy: DarcyConfig::default(),
            wave: WaveConfig::default(),
            block_size: default_block_size(),
        }
    }

    /// Log-permeability prior with `σ = 1, τ = 3, α = 2` on 64 points, `σ_obs = 10⁻³`.
    pub fn exp2() -> Self {
        let darcy = DarcyConfig::default();
        Self {
            experiment: Experiment::Darcy,
            prior: PriorConfig::Field {
                covariance: CovarianceSpec::new(1.0, 3.0, 2.0, darcy.n - 1).expect("valid defaults"),
            },
            sigma_obs: 1e-3,
            darcy,
            wave: WaveConfig::default(),
            block_size: default_block_size(),
        }
    }

    /// Level-set prior with `σ = 10, τ = 5, α = 2` on 128 points, `σ_obs = 5·10⁻³`.
    pub fn exp3() -> Self {
        let wave = WaveConfig::default();
        Self {
            experiment: Experiment::Wave,
            prior: PriorConfig::Field {
                covariance: CovarianceSpec::new(10.0, 5.0, 2.0, wave.n - 1).expect("valid defaults"),
            },
            sigma_obs: 5e-3,
            darcy: DarcyConfig::default(),
            wave,
            block_size: default_block_size(),
        }
    }

    pub fn for_experiment(e: Experiment) -> Self {
        match e {
            Experiment::Quadratic => Self::exp1(),
            Experiment::Darcy => Self::exp2(),
            Experiment::Wave => Self::exp3(),
        }
    }

    /// Length of one parameter row.
    pub fn d_u(&self) -> usize {
        match self.experiment {
            Experiment::Quadratic => 1,
            Experiment::Darcy => self.darcy.n,
            Experiment::Wave => self.wave.n,
        }
    }

    pub fn d_y(&self) -> usize {
        match self.experiment {
            Experiment::Quadratic => 1,
            Experiment::Darcy => self.darcy.obs_points.len(),
            Experiment::Wave => self.wave.receivers.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma_obs(self.sigma_obs)?;
        self.prior.validate()?;
        if self.block_size == 0 {
            return Err(Error::InvalidParameter("block_size must be positive".into()));
        }
        match (self.experiment, &self.prior) {
            (Experiment::Quadratic, PriorConfig::Scalar { .. }) => Ok(()),
            (Experiment::Darcy, PriorConfig::Field { covariance }) => {
                self.darcy.validate()?;
                covariance.check_grid(self.darcy.n)
            }
            (Experiment::Wave, PriorConfig::Field { covariance }) => {
                self.wave.validate()?;
                covariance.check_grid(self.wave.n)
            }
            (e, _) => Err(Error::InvalidParameter(format!("prior kind does not match experiment {e:?}"))),
        }
    }
}

/// Draws `(u, y)` pairs from the joint law of one experiment.
pub struct JointSimulator {
    config: GenerateConfig,
    field_prior: Option<PriorSampler<f64>>,
    wave: Option<WaveForward>,
}

impl JointSimulator {
    pub fn new(config: GenerateConfig) -> Result<Self> {
        config.validate()?;
        let field_prior = match &config.prior {
            PriorConfig::Field { covariance } => Some(PriorSampler::new(covariance.clone(), config.d_u())?),
            PriorConfig::Scalar { .. } => None,
        };
        let wave = (config.experiment == Experiment::Wave).then(|| WaveForward {
            cfg: config.wave.clone(),
        });
        Ok(Self {
            config,
            field_prior,
            wave,
        })
    }

    pub fn config(&self) -> &GenerateConfig {
        &self.config
    }

    pub fn sample_prior(&self, rng: &mut SimRng) -> Vec<f64> {
        match (&self.config.prior, &self.field_prior) {
            (PriorConfig::Scalar { mean, std }, _) => vec![mean + std * std_normal::<f64, _>(rng)],
            (_, Some(p)) => p.sample(rng).into_values(),
            _ => unreachable!("validated prior"),
        }
    }

    /// Noise-free forward map.
    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self.config.experiment {
            Experiment::Quadratic => Ok(vec![u[0] * u[0]]),
            Experiment::Darcy => {
                let field = GridField::new(u.to_vec())?;
                let p = darcy_solve(&field, &self.config.darcy)?;
                Ok(darcy_observe(&p, &self.config.darcy))
            }
            Experiment::Wave => {
                use crate::forward_models::ForwardModel;
                self.wave.as_ref().expect("wave model").observe(u)
            }
        }
    }

    pub fn observe(&self, u: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let clean = self.forward(u)?;
        Ok(add_noise(&clean, self.config.sigma_obs, rng)?.y)
    }

    /// One joint draw, resampling `u` when the forward model fails.
    pub fn sample(&self, rng: &mut SimRng) -> std::result::Result<(Vec<f64>, Vec<f64>, usize), (usize, String)> {
        let mut last = String::new();
        for attempt in 0..MAX_FORWARD_ATTEMPTS {
            let u = self.sample_prior(rng);
            match self.observe(&u, rng) {
                Ok(y) => return Ok((u, y, attempt)),
                Err(e) => last = e.to_string(),
            }
        }
        Err((MAX_FORWARD_ATTEMPTS, last))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub experiment: Experiment,
    pub config: GenerateConfig,
    pub seed: u64,
    pub rows: usize,
    /// Forward-model failures that were resampled.
    pub resampled: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_dagger: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

/// `N` rows of `(u, y)` stored as flat row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDataset {
    u: Vec<f64>,
    y: Vec<f64>,
    d_u: usize,
    d_y: usize,
    pub meta: Option<DatasetMeta>,
}

impl JointDataset {
    pub fn new(u: Vec<f64>, d_u: usize, y: Vec<f64>, d_y: usize) -> Result<Self> {
        if d_u == 0 {
            return Err(Error::InvalidParameter("d_u must be positive".into()));
        }
        if u.len() % d_u != 0 {
            return Err(Error::LengthMismatch {
                expected: u.len() / d_u * d_u,
                got: u.len(),
            });
        }
        let rows = u.len() / d_u;
        if y.len() != rows * d_y {
            return Err(Error::LengthMismatch {
                expected: rows * d_y,
                got: y.len(),
            });
        }
        if let Some(bad) = u.iter().chain(&y).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset entry {bad}")));
        }
        Ok(Self {
            u,
            y,
            d_u,
            d_y,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn len(&self) -> usize {
        self.u.len() / self.d_u
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.d_u..(i + 1) * self.d_u]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.d_y..(i + 1) * self.d_y]
    }

    pub fn u_flat(&self) -> &[f64] {
        &self.u
    }

    pub fn y_flat(&self) -> &[f64] {
        &self.y
    }

    /// First `rows` rows.
    pub fn head(&self, rows: usize) -> Self {
        let rows = rows.min(self.len());
        Self {
            u: self.u[..rows * self.d_u].to_vec(),
            y: self.y[..rows * self.d_y].to_vec(),
            d_u: self.d_u,
            d_y: self.d_y,
            meta: self.meta.clone(),
        }
    }

    /// Per-column mean and standard deviation of `y`.
    pub fn y_moments(&self) -> (Vec<f64>, Vec<f64>) {
        column_moments(&self.y, self.d_y)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BinWriter::new(Vec::with_capacity(36 + 8 * (self.u.len() + self.y.len())));
        w.bytes(&ATJD_MAGIC)?;
        w.u32(ATJD_VERSION)?;
        w.u64(self.len() as u64)?;
        w.u64(self.d_u as u64)?;
        w.u64(self.d_y as u64)?;
        w.f64s(&self.u)?;
        w.f64s(&self.y)?;
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes);
        r.magic(ATJD_MAGIC)?;
        let version = r.u32()?;
        if version != ATJD_VERSION {
            return Err(Error::VersionMismatch {
                expected: ATJD_VERSION,
                found: version,
            });
        }
        let rows = len_from_u64(r.u64()?, bytes.len())?;
        let d_u = len_from_u64(r.u64()?, bytes.len())?;
        let d_y = len_from_u64(r.u64()?, bytes.len())?;
        let u_len = rows.checked_mul(d_u).ok_or(Error::TruncatedPayload {
            expected: usize::MAX,
            found: bytes.len(),
        })?;
        let y_len = rows.checked_mul(d_y).ok_or(Error::TruncatedPayload {
            expected: usize::MAX,
            found: bytes.len(),
        })?;
        let u = r.f64s(u_len)?;
        let y = r.f64s(y_len)?;
        if r.remaining() != 0 {
            return Err(Error::InvalidParameter(format!("{} trailing bytes after payload", r.remaining())));
        }
        Self::new(u, d_u, y, d_y)
    }

    /// Writes the binary file and, when metadata is present, the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        std::io::Write::write_all(&mut w, &bytes)?;
        std::io::Write::flush(&mut w)?;
        if let Some(meta) = &self.meta {
            std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
        }
        Ok(())
    }

    /// Reads the binary file and the sidecar if it exists.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut ds = Self::from_bytes(&bytes)?;
        let mp = meta_path(path);
        if mp.exists() {
            ds.meta = Some(serde_json::from_str(&std::fs::read_to_string(mp)?)?);
        }
        Ok(ds)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub(crate) fn column_moments(flat: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    if dim == 0 || flat.is_empty() {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let rows = flat.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in flat.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; dim];
    for row in flat.chunks_exact(dim) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / rows.max(2).saturating_sub(1) as f64).sqrt()).collect();
    (mean, std)
}

/// Generates `rows` i.i.d. joint samples.
///
/// Row block `b` draws from a generator seeded by `seed + b`, so the output
/// is independent of the number of worker threads.
pub fn generate(config: &GenerateConfig, rows: usize, seed: u64) -> Result<JointDataset> {
    if rows == 0 {
        return Err(Error::InvalidParameter("row count must be at least 1".into()));
    }
    let sim = JointSimulator::new(config.clone())?;
    let block = config.block_size;
    let n_blocks = rows.div_ceil(block);
    let blocks: Vec<Result<(Vec<f64>, Vec<f64>, usize)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let block_seed = seed.wrapping_add(b as u64);
            let mut rng = component_rng(block_seed, "dataset");
            let start = b * block;
            let end = (start + block).min(rows);
            let mut u = Vec::with_capacity((end - start) * config.d_u());
            let mut y = Vec::with_capacity((end - start) * config.d_y());
            let mut resampled = 0;
            for row in start..end {
                match sim.sample(&mut rng) {
                    Ok((ur, yr, retries)) => {
                        u.extend(ur);
                        y.extend(yr);
                        resampled += retries;
                    }
                    Err((attempts, reason)) => {
                        return Err(Error::ForwardFailure {
                            row,
                            seed: block_seed,
                            attempts,
                            reason,
                        })
                    }
                }
            }
            Ok((u, y, resampled))
        })
        .collect();
    let mut u = Vec::with_capacity(rows * config.d_u());
    let mut y = Vec::with_capacity(rows * config.d_y());
    let mut resampled = 0;
    for b in blocks {
        let (bu, by, r) = b?;
        u.extend(bu);
        y.extend(by);
        resampled += r;
    }
    if resampled > 0 {
        log::warn!("resampled {resampled} rows after forward-model failures");
    }
    let meta = DatasetMeta {
        experiment: config.experiment,
        config: config.clone(),
        seed,
        rows,
        resampled,
        y_dagger: None,
        extra: None,
    };
    Ok(JointDataset::new(u, config.d_u(), y, config.d_y())?.with_meta(meta))
}
