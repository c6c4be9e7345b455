//! Metrics, reference posteriors and the data/model scaling study.

use crate::dataset::{generate, GenerateConfig, JointDataset};
use crate::ensemble::{EnsembleMeta, PosteriorEnsemble, Provenance};
use crate::error::{Error, Result};
use crate::grf::{CosineBasis, CovarianceSpec};
use crate::nn::AdamConfig;
use crate::objective::energy_distance_sq_1d;
use crate::rng::{component_rng, derive_seed};
use crate::scalar::Real;
use crate::training::{reference_sampler, train, ModelConfig, TrainConfig};
use crate::transport::{pushforward, ReferenceKind};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const W1_LEVELS: usize = 512;
pub const QUADRATURE_HALF_WIDTH: f64 = 6.0;
pub const QUADRATURE_POINTS: usize = 2001;

/// Posterior of the scalar quadratic problem on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraturePosterior {
    pub grid: Vec<f64>,
    /// Trapezoid node weights of the normalized density; they sum to 1.
    pub weights: Vec<f64>,
    pub z: f64,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

/// Posterior for prior `N(m0, σ0²)` and `y = u² + η`, `η ~ N(0, σ²)`, on the default grid.
pub fn quadrature_posterior(y: f64, m0: f64, sigma0: f64, sigma: f64) -> Result<QuadraturePosterior> {
    QuadraturePosterior::new(y, m0, sigma0, sigma, QUADRATURE_HALF_WIDTH, QUADRATURE_POINTS)
}

impl QuadraturePosterior {
    pub fn new(y: f64, m0: f64, sigma0: f64, sigma: f64, half_width: f64, points: usize) -> Result<Self> {
        if points < 3 || !(half_width > 0.0) || !(sigma0 > 0.0) || !(sigma > 0.0) {
            return Err(Error::InvalidParameter("quadrature needs ≥ 3 points and positive scales".into()));
        }
        let h = 2.0 * half_width / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| -half_width + i as f64 * h).collect();
        let log_f: Vec<f64> = grid
            .iter()
            .map(|&u| -(u - m0).powi(2) / (2.0 * sigma0 * sigma0) - (y - u * u).powi(2) / (2.0 * sigma * sigma))
            .collect();
        let max = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || max < -700.0 {
            return Err(Error::Underflow);
        }
        let f: Vec<f64> = log_f.iter().map(|l| (l - max).exp()).collect();
        let mut raw: Vec<f64> = f.iter().map(|v| v * h).collect();
        raw[0] *= 0.5;
        raw[points - 1] *= 0.5;
        let total: f64 = raw.iter().sum();
        let z = total * max.exp();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Underflow);
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let density: Vec<f64> = f.iter().map(|v| v / total).collect();
        let mut cdf = Vec::with_capacity(points);
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 1..points {
            acc += 0.5 * h * (density[i - 1] + density[i]);
            cdf.push(acc);
        }
        let last = acc;
        cdf.iter_mut().for_each(|c| *c /= last);
        Ok(Self {
            grid,
            weights,
            z,
            density,
            cdf,
        })
    }

    /// Normalized density at the grid nodes.
    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn mean(&self) -> f64 {
        self.grid.iter().zip(&self.weights).map(|(u, w)| u * w).sum()
    }

    /// Grid points that are strict local maxima of the density.
    pub fn local_maxima(&self) -> Vec<f64> {
        (1..self.grid.len() - 1)
            .filter(|&i| self.density[i] > self.density[i - 1] && self.density[i] > self.density[i + 1])
            .map(|i| self.grid[i])
            .collect()
    }

    /// Inverse of the piecewise-linear CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let j = self.cdf.partition_point(|&c| c < p);
        if j == 0 {
            return self.grid[0];
        }
        if j >= self.cdf.len() {
            return self.grid[self.grid.len() - 1];
        }
        let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
        let t = if c1 > c0 { (p - c0) / (c1 - c0) } else { 0.0 };
        self.grid[j - 1] + t * (self.grid[j] - self.grid[j - 1])
    }

    /// Inverse-CDF draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        (0..m).map(|_| self.quantile(rng.random::<f64>())).collect()
    }

    pub fn resample(&self, y: f64, m: usize, seed: u64) -> Result<PosteriorEnsemble<f64>> {
        let mut rng = component_rng(seed, "quadrature");
        PosteriorEnsemble::new(
            self.sample(&mut rng, m).into_iter().map(|v| vec![v]).collect(),
            EnsembleMeta {
                provenance: Provenance::QuadratureResample,
                y_dagger: vec![y],
                seed,
                info: serde_json::json!({ "grid_points": self.grid.len() }),
            },
        )
    }
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("W1 input".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Linearly interpolated empirical quantile of sorted data.
fn empirical_quantile(s: &[f64], p: f64) -> f64 {
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

fn level(i: usize) -> f64 {
    (i as f64 + 0.5) / W1_LEVELS as f64
}

/// 1-Wasserstein distance between two sample sets via quantile functions.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let sa = sorted(a)?;
    w1_quantile(|p| empirical_quantile(&sa, p), b)
}

/// W1 between a distribution given by its quantile function and samples.
pub fn w1_quantile(quantile: impl Fn(f64) -> f64, b: &[f64]) -> Result<f64> {
    let sb = sorted(b)?;
    let total: f64 = (0..W1_LEVELS)
        .map(|i| (quantile(level(i)) - empirical_quantile(&sb, level(i))).abs())
        .sum();
    Ok(total / W1_LEVELS as f64)
}

/// W1 between the coefficient samples of two field ensembles, per mode.
pub fn per_mode_wasserstein<S: Real>(
    a: &PosteriorEnsemble<S>,
    b: &PosteriorEnsemble<S>,
    modes: &[usize],
) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::GridMismatch(a.dim(), b.dim()));
    }
    let k_max = modes.iter().copied().max().unwrap_or(0);
    if k_max >= a.dim() {
        return Err(Error::ModeOutOfRange { k: k_max, n: a.dim() });
    }
    let basis = CosineBasis::<S>::new(a.dim(), k_max)?;
    let coeffs = |e: &PosteriorEnsemble<S>, k: usize| -> Result<Vec<f64>> {
        Ok(e.mode_coefficients(&basis, k)?.iter().map(|v| v.to_f64_lossy()).collect())
    };
    modes
        .par_iter()
        .map(|&k| w1_1d(&coeffs(a, k)?, &coeffs(b, k)?))
        .collect()
}

/// Mean absolute deviation from the median of each mode coefficient,
/// divided by the same quantity under the prior, `√λ_k·√(2/π)`.
///
/// This is the W1 distance from each marginal to a point mass at its
/// median, relative to the prior's; it is 1 when a mode follows the prior.
pub fn spread_ratio<S: Real>(e: &PosteriorEnsemble<S>, spec: &CovarianceSpec<f64>, modes: &[usize]) -> Result<Vec<f64>> {
    let k_max = modes.iter().copied().max().unwrap_or(0);
    if k_max >= e.dim() {
        return Err(Error::ModeOutOfRange { k: k_max, n: e.dim() });
    }
    let basis = CosineBasis::<S>::new(e.dim(), k_max)?;
    modes
        .iter()
        .map(|&k| {
            let c: Vec<f64> = e.mode_coefficients(&basis, k)?.iter().map(|v| v.to_f64_lossy()).collect();
            let s = sorted(&c)?;
            let med = empirical_quantile(&s, 0.5);
            let mad = s.iter().map(|v| (v - med).abs()).sum::<f64>() / s.len() as f64;
            Ok(mad / (spec.eigenvalue(k)?.sqrt() * std::f64::consts::FRAC_2_PI.sqrt()))
        })
        .collect()
}

/// One metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub experiment: String,
    pub observation: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
    pub value: f64,
    pub sample_sizes: Vec<usize>,
    pub seed: u64,
}

/// Appends records to a JSON Lines file.
pub fn append_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub observation: String,
    pub source: String,
    pub x: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub observation: String,
    pub source: String,
    pub mode: usize,
    pub bin_left: f64,
    pub bin_right: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeW1Row {
    pub observation: String,
    pub pair: String,
    pub mode: usize,
    pub w1: f64,
    pub prior_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub curve: String,
    pub reference: String,
    pub k: usize,
    pub width: usize,
    pub n_params: usize,
    pub seed: u64,
    pub error: f64,
    pub diverged: bool,
}

/// Rows for the four plot-data files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotData {
    pub overlay: Vec<OverlayRow>,
    pub histograms: Vec<HistogramRow>,
    pub mode_w1: Vec<ModeW1Row>,
    pub scaling: Vec<ScalingRow>,
}

pub const OVERLAY_FILE: &str = "posterior_overlay.csv";
pub const HISTOGRAM_FILE: &str = "kl_histograms.csv";
pub const MODE_W1_FILE: &str = "per_mode_w1.csv";
pub const SCALING_FILE: &str = "scaling.csv";

const OVERLAY_HEADER: [&str; 4] = ["observation", "source", "x", "density"];
const HISTOGRAM_HEADER: [&str; 6] = ["observation", "source", "mode", "bin_left", "bin_right", "density"];
const MODE_W1_HEADER: [&str; 5] = ["observation", "pair", "mode", "w1", "prior_std"];
const SCALING_HEADER: [&str; 8] = ["curve", "reference", "k", "width", "n_params", "seed", "error", "diverged"];

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`export_plot_data`].
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<T>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

/// Writes one CSV per figure class into `dir` and returns the paths.
pub fn export_plot_data(data: &PlotData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = [OVERLAY_FILE, HISTOGRAM_FILE, MODE_W1_FILE, SCALING_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&paths[0], &OVERLAY_HEADER, &data.overlay)?;
    write_csv(&paths[1], &HISTOGRAM_HEADER, &data.histograms)?;
    write_csv(&paths[2], &MODE_W1_HEADER, &data.mode_w1)?;
    write_csv(&paths[3], &SCALING_HEADER, &data.scaling)?;
    Ok(paths)
}

/// Density histogram of `v` on `bins` equal cells over `[lo, hi]`; values outside are dropped.
pub fn histogram(v: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in v {
        if x >= lo && x <= hi {
            counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let norm = v.len().max(1) as f64 * width;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c as f64 / norm))
        .collect()
}

/// Ordinary least squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("x values are all equal".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// Training set sizes for the data curve; the largest also anchors the width curve.
    pub k_list: Vec<usize>,
    pub widths: Vec<usize>,
    pub depth: usize,
    /// Width used for the data curve and the joint-reference comparison.
    pub fixed_width: usize,
    /// Also trains a joint-reference model at the largest size.
    pub joint: bool,
    pub seeds: Vec<u64>,
    pub panel: Vec<f64>,
    pub n_pushforward: usize,
    pub n_truth: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        let steps = 6_000;
        Self {
            k_list: vec![1_000, 4_000, 16_000, 64_000],
            widths: vec![4, 8, 16, 32, 64],
            depth: 3,
            fixed_width: 16,
            joint: true,
            seeds: vec![0, 1, 2, 3],
            panel: vec![-1.0, 0.0, 1.0, 2.0],
            n_pushforward: 100_000,
            n_truth: 100_000,
            data_seed: 0,
            train: TrainConfig {
                epochs: usize::MAX,
                batch_size: 256,
                max_steps: Some(steps),
                adam: AdamConfig {
                    decay_step: Some(steps * 3 / 5),
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_list.len() < 3 {
            return Err(Error::InvalidParameter("scaling study needs at least 3 dataset sizes".into()));
        }
        if self.k_list.contains(&0) || self.widths.contains(&0) || self.fixed_width == 0 {
            return Err(Error::InvalidParameter("sizes and widths must be positive".into()));
        }
        if self.seeds.is_empty() || self.panel.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.train.max_steps.is_none() && self.train.epochs == usize::MAX {
            return Err(Error::InvalidParameter("scaling training needs a step budget or epoch count".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// OLS slope of log error against log K over every prior-reference data-curve run.
    pub slope: f64,
    /// Data curve `(K, error)`, geometric mean over seeds.
    pub data_curve: Vec<(usize, f64)>,
    /// Width curve `(width, n_params, error)` at the largest K, geometric mean over seeds.
    pub width_curve: Vec<(usize, usize, f64)>,
    pub prior_error_at_max: f64,
    pub joint_error_at_max: Option<f64>,
}

/// Panel-averaged squared energy distance between a trained model and the quadrature posterior.
pub fn exp1_panel_error(
    model: &crate::transport::TransportModel<f64>,
    gen: &GenerateConfig,
    reference: &dyn crate::transport::ReferenceSampler<f64>,
    panel: &[f64],
    n_pushforward: usize,
    n_truth: usize,
    seed: u64,
) -> Result<f64> {
    let (m0, s0) = match gen.prior {
        crate::dataset::PriorConfig::Scalar { mean, std } => (mean, std),
        _ => return Err(Error::InvalidParameter("panel error needs the scalar experiment".into())),
    };
    let mut total = 0.0;
    for (i, &y) in panel.iter().enumerate() {
        let truth = quadrature_posterior(y, m0, s0, gen.sigma_obs)?.resample(y, n_truth, seed.wrapping_add(i as u64))?;
        let push = pushforward(model, &[y], n_pushforward, reference, seed.wrapping_add(1000 + i as u64))?;
        total += energy_distance_sq_1d(&push.scalars(), &truth.scalars())?;
    }
    Ok(total / panel.len() as f64)
}

struct Cell {
    curve: &'static str,
    reference: ReferenceKind,
    k: usize,
    width: usize,
    seed: u64,
}

/// Trains one scalar-experiment model per cell and fits the data-size slope.
///
/// Every cell uses the same optimizer step budget. For each seed the
/// datasets are nested prefixes of one draw, and the joint reference at
/// evaluation uses a separate held-out draw.
pub fn scaling_study(cfg: &ScalingConfig, mut progress: impl FnMut(&ScalingRow)) -> Result<ScalingReport> {
    cfg.validate()?;
    let gen = GenerateConfig::exp1();
    let k_max = *cfg.k_list.iter().max().expect("validated");

    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &k in &cfg.k_list {
            cells.push(Cell { curve: "data", reference: ReferenceKind::Prior, k, width: cfg.fixed_width, seed });
        }
        for &w in cfg.widths.iter().filter(|&&w| w != cfg.fixed_width) {
            cells.push(Cell { curve: "width", reference: ReferenceKind::Prior, k: k_max, width: w, seed });
        }
        if cfg.joint {
            cells.push(Cell {
                curve: "joint",
                reference: ReferenceKind::Joint,
                k: k_max,
                width: cfg.fixed_width,
                seed,
            });
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    let mut current: Option<(u64, JointDataset, JointDataset)> = None;
    for c in &cells {
        if current.as_ref().is_none_or(|(s, _, _)| *s != c.seed) {
            let base = cfg.data_seed.wrapping_add(c.seed);
            current = Some((
                c.seed,
                generate(&gen, k_max, derive_seed(base, "scaling-train"))?,
                generate(&gen, k_max, derive_seed(base, "scaling-held-out"))?,
            ));
        }
        let (_, full, held_out) = current.as_ref().expect("set above");
        let data: JointDataset = full.head(c.k);
        let mc = ModelConfig::mlp(cfg.depth, c.width).with_reference(c.reference);
        let mut model = mc.build(&gen, &data)?;
        let train_ref = reference_sampler(&gen, c.reference, Some(&data))?;
        let eval_ref = reference_sampler(&gen, c.reference, Some(held_out))?;
        let (error, diverged) = match train(&mut model, &data, train_ref.as_ref(), &cfg.train, c.seed, |_, _| {}) {
            Ok(_) => (
                exp1_panel_error(
                    &model,
                    &gen,
                    eval_ref.as_ref(),
                    &cfg.panel,
                    cfg.n_pushforward,
                    cfg.n_truth,
                    c.seed.wrapping_add(77),
                )?,
                false,
            ),
            Err(e @ (Error::Divergence(_) | Error::NonFiniteGradient { .. })) => {
                log::warn!("scaling cell K={} width={} diverged: {e}", c.k, c.width);
                (f64::NAN, true)
            }
            Err(e) => return Err(e),
        };
        let row = ScalingRow {
            curve: c.curve.to_string(),
            reference: format!("{:?}", c.reference).to_lowercase(),
            k: c.k,
            width: c.width,
            n_params: model.theta().len(),
            seed: c.seed,
            error,
            diverged,
        };
        progress(&row);
        rows.push(row);
    }

    let usable = |r: &ScalingRow| !r.diverged && r.error.is_finite() && r.error > 0.0;
    // geometric mean over seeds
    let mean_of = |pred: &dyn Fn(&ScalingRow) -> bool| -> f64 {
        let v: Vec<f64> = rows.iter().filter(|r| pred(r) && usable(r)).map(|r| r.error.ln()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            (v.iter().sum::<f64>() / v.len() as f64).exp()
        }
    };
    let data_curve: Vec<(usize, f64)> = cfg
        .k_list
        .iter()
        .map(|&k| (k, mean_of(&|r| r.curve == "data" && r.k == k)))
        .collect();
    let data_rows: Vec<&ScalingRow> = rows.iter().filter(|r| r.curve == "data").collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = data_rows
        .iter()
        .filter(|r| usable(r))
        .map(|r| ((r.k as f64).ln(), r.error.ln()))
        .unzip();
    if lx.len() < data_rows.len() {
        log::warn!("{} data-curve runs excluded from the slope fit", data_rows.len() - lx.len());
    }
    let slope = ols_slope(&lx, &ly)?;
    let width_curve = cfg
        .widths
        .iter()
        .map(|&w| {
            let n_params = rows.iter().find(|r| r.curve != "joint" && r.width == w).map_or(0, |r| r.n_params);
            let on_width_curve = |r: &ScalingRow| r.width == w && r.k == k_max && r.curve != "joint";
            (w, n_params, mean_of(&on_width_curve))
        })
        .collect();
    let prior_error_at_max = mean_of(&|r| r.curve == "data" && r.k == k_max);
    let joint_error_at_max = cfg.joint.then(|| mean_of(&|r| r.curve == "joint"));
    Ok(ScalingReport {
        rows,
        slope,
        data_curve,
        width_curve,
        prior_error_at_max,
        joint_error_at_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grf::PriorSampler;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn quadrature_weights_normalized() {
        for y in [-1.0, 0.0, 1.0, 2.0, 20.0] {
            let q = quadrature_posterior(y, 0.0, 1.0, 1.0).unwrap();
            assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn symmetric_observation_has_zero_mean() {
        let q = quadrature_posterior(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(q.mean().abs() < 1e-10);
    }

    #[test]
    fn bimodal_maxima_at_analytic_points() {
        let q = quadrature_posterior(2.0, 0.0, 1.0, 1.0).unwrap();
        let h = q.grid[1] - q.grid[0];
        let maxima = q.local_maxima();
        assert_eq!(maxima.len(), 2, "{maxima:?}");
        let root = 1.5f64.sqrt();
        assert!((maxima[0] + root).abs() <= h);
        assert!((maxima[1] - root).abs() <= h);
        // Below 1/2 the stationary-point condition has only u = 0.
        let q = quadrature_posterior(0.4, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(q.local_maxima().len(), 1);
    }

    #[test]
    fn grid_refinement_changes_mean_little() {
        for y in [-1.0, 1.0, 2.0] {
            let a = QuadraturePosterior::new(y, 0.3, 1.0, 1.0, 6.0, 2001).unwrap();
            let b = QuadraturePosterior::new(y, 0.3, 1.0, 1.0, 6.0, 4001).unwrap();
            assert!((a.mean() - b.mean()).abs() <= 1e-8);
        }
    }

    #[test]
    fn underflow_reported() {
        assert!(matches!(
            QuadraturePosterior::new(1e6, 0.0, 1.0, 1e-3, 6.0, 101),
            Err(Error::Underflow)
        ));
    }

    #[test]
    fn quantile_sampling_matches_gaussian_limit() {
        // Huge noise leaves the prior.
        let q = quadrature_posterior(0.0, 0.0, 1.0, 1e6).unwrap();
        let n = Normal::new(0.0, 1.0).unwrap();
        for p in [0.05, 0.3, 0.5, 0.9] {
            assert!((q.quantile(p) - n.inverse_cdf(p)).abs() < 1e-3);
        }
        let e = q.resample(0.0, 10, 3).unwrap();
        assert_eq!(e.len(), 10);
        assert_eq!(e, q.resample(0.0, 10, 3).unwrap());
    }

    #[test]
    fn w1_examples() {
        assert_eq!(w1_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(w1_1d(&[0.5, -1.0, 2.0], &[2.0, 0.5, -1.0]).unwrap(), 0.0);
        assert!(matches!(w1_1d(&[], &[1.0]), Err(Error::EmptyInput)));
    }

    #[test]
    fn w1_null_against_exact_quantiles() {
        let mut rng = rng_from_seed(1);
        let v: Vec<f64> = (0..100_000).map(|_| crate::scalar::std_normal(&mut rng)).collect();
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = w1_quantile(|p| n.inverse_cdf(p), &v).unwrap();
        assert!(w <= 0.01, "{w}");
    }

    fn sample_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..40)
    }

    proptest! {
        #[test]
        fn w1_is_symmetric(a in sample_vec(), b in sample_vec()) {
            prop_assert_eq!(w1_1d(&a, &b).unwrap(), w1_1d(&b, &a).unwrap());
        }

        #[test]
        fn w1_triangle(a in sample_vec(), b in sample_vec(), c in sample_vec()) {
            let ab = w1_1d(&a, &b).unwrap();
            let bc = w1_1d(&b, &c).unwrap();
            let ac = w1_1d(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-10);
        }

        #[test]
        fn w1_zero_iff_same_sorted(a in sample_vec(), shift in -1.0f64..1.0) {
            let mut b = a.clone();
            b.reverse();
            prop_assert_eq!(w1_1d(&a, &b).unwrap(), 0.0);
            if shift != 0.0 {
                b[0] += shift;
                prop_assert!(w1_1d(&a, &b).unwrap() > 0.0);
            }
        }
    }

    fn prior_ensemble(seed: u64, m: usize, spec: CovarianceSpec<f64>) -> PosteriorEnsemble<f64> {
        let s = PriorSampler::new(spec, 32).unwrap();
        let mut rng = rng_from_seed(seed);
        PosteriorEnsemble::new(
            (0..m).map(|_| s.sample(&mut rng).into_values()).collect(),
            EnsembleMeta {
                provenance: Provenance::Pushforward,
                y_dagger: vec![],
                seed,
                info: serde_json::Value::Null,
            },
        )
        .unwrap()
    }

    #[test]
    fn per_mode_identities() {
        let spec = CovarianceSpec::new(1.0, 3.0, 2.0, 16).unwrap();
        let a = prior_ensemble(1, 200, spec);
        assert!(per_mode_wasserstein(&a, &a, &[1, 2, 3]).unwrap().iter().all(|&w| w == 0.0));

        let mut rev: Vec<Vec<f64>> = a.samples().to_vec();
        rev.reverse();
        let r = PosteriorEnsemble::new(rev, a.meta.clone()).unwrap();
        let b = prior_ensemble(2, 200, spec);
        assert_eq!(
            per_mode_wasserstein(&a, &b, &[1, 4]).unwrap(),
            per_mode_wasserstein(&r, &b, &[1, 4]).unwrap()
        );

        let basis = CosineBasis::<f64>::new(32, 1).unwrap();
        let c = 0.7;
        let shifted: Vec<Vec<f64>> = a
            .samples()
            .iter()
            .map(|s| s.iter().zip(basis.row(1)).map(|(v, p)| v + c * p).collect())
            .collect();
        let s = PosteriorEnsemble::new(shifted, a.meta.clone()).unwrap();
        let w = per_mode_wasserstein(&a, &s, &[1, 2, 5]).unwrap();
        assert!((w[0] - c).abs() < 1e-10);
        assert!(w[1] < 1e-10 && w[2] < 1e-10);
        let other = PosteriorEnsemble::new(vec![vec![0.0; 16]], a.meta.clone()).unwrap();
        assert!(matches!(per_mode_wasserstein(&a, &other, &[1]), Err(Error::GridMismatch(32, 16))));
    }

    #[test]
    fn prior_ensemble_has_unit_spread_ratio() {
        let spec = CovarianceSpec::new(1.0, 3.0, 2.0, 16).unwrap();
        let a = prior_ensemble(4, 20_000, spec);
        for r in spread_ratio(&a, &spec, &[1, 8, 16]).unwrap() {
            assert!((r - 1.0).abs() < 0.03, "{r}");
        }
        assert!(spread_ratio(&a, &spec, &[0]).is_err());
    }

    #[test]
    fn per_mode_two_sample_null() {
        let spec = CovarianceSpec::new(1.0, 3.0, 2.0, 16).unwrap();
        let a = prior_ensemble(10, 10_000, spec);
        let b = prior_ensemble(11, 10_000, spec);
        let w = per_mode_wasserstein(&a, &b, &[1]).unwrap()[0];
        assert!(w <= 0.05 * spec.eigenvalue(1).unwrap().sqrt(), "{w}");
    }

    #[test]
    fn metrics_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let r = MetricsRecord {
            experiment: "exp1".into(),
            observation: "y=2".into(),
            metric: "w1".into(),
            mode: None,
            value: 0.031,
            sample_sizes: vec![4000, 10000],
            seed: 5,
        };
        let r2 = MetricsRecord { mode: Some(3), ..r.clone() };
        append_jsonl(&p, &[r.clone()]).unwrap();
        append_jsonl(&p, &[r2.clone()]).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), vec![r, r2]);
    }

    #[test]
    fn plot_data_empty_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let paths = export_plot_data(&PlotData::default(), dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        let text = std::fs::read_to_string(&paths[3]).unwrap();
        assert_eq!(text, "curve,reference,k,width,n_params,seed,error,diverged\n");
        assert!(read_csv::<OverlayRow>(&paths[0]).unwrap().is_empty());
    }

    #[test]
    fn plot_data_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = PlotData::default();
        for (i, (l, r, v)) in histogram(&[0.1, 0.2, 0.9], 0.0, 1.0, 4).into_iter().enumerate() {
            d.histograms.push(HistogramRow {
                observation: "obs0".into(),
                source: "pcn".into(),
                mode: i,
                bin_left: l,
                bin_right: r,
                density: v,
            });
        }
        d.overlay.push(OverlayRow { observation: "y=1".into(), source: "quadrature".into(), x: -0.25, density: 0.1 / 3.0 });
        d.mode_w1 = (1..=5)
            .map(|k| ModeW1Row { observation: "obs1".into(), pair: "cm_vs_pcn".into(), mode: k, w1: 1.0 / k as f64, prior_std: 0.1 })
            .collect();
        d.scaling.push(ScalingRow {
            curve: "data".into(),
            reference: "prior".into(),
            k: 1000,
            width: 32,
            n_params: 3000,
            seed: 0,
            error: f64::NAN,
            diverged: true,
        });
        let paths = export_plot_data(&d, dir.path()).unwrap();
        assert_eq!(read_csv::<OverlayRow>(&paths[0]).unwrap(), d.overlay);
        assert_eq!(read_csv::<HistogramRow>(&paths[1]).unwrap(), d.histograms);
        let modes = read_csv::<ModeW1Row>(&paths[2]).unwrap();
        assert_eq!(modes, d.mode_w1);
        assert_eq!(modes.len(), 5);
        let s = read_csv::<ScalingRow>(&paths[3]).unwrap();
        assert!(s[0].error.is_nan() && s[0].diverged);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let h = histogram(&[0.1, 0.4, 0.5, 0.99, 1.0], 0.0, 1.0, 5);
        let mass: f64 = h.iter().map(|(l, r, d)| (r - l) * d).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_slope() {
        let x: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        assert!((ols_slope(&x, &y).unwrap() + 0.5).abs() < 1e-12);
        assert!(ols_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn tiny_scaling_study_is_reproducible() {
        let cfg = ScalingConfig {
            k_list: vec![50, 100, 200],
            widths: vec![4, 8],
            depth: 1,
            fixed_width: 4,
            seeds: vec![1],
            panel: vec![0.0, 2.0],
            n_pushforward: 200,
            n_truth: 200,
            train: TrainConfig {
                epochs: usize::MAX,
                batch_size: 25,
                max_steps: Some(5),
                ..Default::default()
            },
            ..Default::default()
        };
        let a = scaling_study(&cfg, |_| {}).unwrap();
        let b = scaling_study(&cfg, |_| {}).unwrap();
        assert_eq!(a.rows.len(), 3 + 1 + 1);
        assert_eq!(a.slope.to_bits(), b.slope.to_bits());
        assert!(a.joint_error_at_max.unwrap().is_finite());
        let short = ScalingConfig { k_list: vec![10, 20], ..cfg };
        assert!(scaling_study(&short, |_| {}).is_err());
    }
}
