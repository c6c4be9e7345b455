//! Energy distance, energy score and the training objective.
//!
//! Within-set expectations are unbiased U-statistics over distinct pairs;
//! cross expectations average over all pairs.

use crate::error::{Error, Result};
use crate::nn::{central_difference_check, GradCheckReport};
use crate::scalar::Real;
use crate::transport::{ReferenceSample, TransportModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_NORM_EPS: f64 = 1e-8;
pub const J_N_MAX: usize = 200;
/// Pairs per gradient chunk; chunk sums are reduced in index order.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Reference draws per data pair.
    pub m: usize,
    pub batch_size: usize,
    pub norm_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m: 4,
            batch_size: 256,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("m = {} but at least 2 draws per pair are needed", self.m)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("norm_eps = {} must be positive", self.norm_eps)));
        }
        Ok(())
    }
}

fn dist<S: Real>(a: &[S], b: &[S], weight: S) -> S {
    crate::scalar::weighted_dist(a, b, weight)
}

fn check_dims<S>(sets: &[&[Vec<S>]]) -> Result<usize> {
    let dim = sets
        .iter()
        .find_map(|s| s.first())
        .ok_or(Error::EmptyInput)?
        .len();
    for s in sets {
        if s.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(bad) = s.iter().find(|v| v.len() != dim) {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
    }
    Ok(dim)
}

/// U-statistic mean of `‖a - a'‖` over distinct pairs; `0` with a warning for one sample.
fn within_mean<S: Real>(a: &[Vec<S>], weight: S) -> S {
    let n = a.len();
    if n < 2 {
        log::warn!("within-set energy term of a singleton set is taken as 0");
        return S::zero();
    }
    let mut acc = S::zero();
    for i in 0..n {
        for j in i + 1..n {
            acc += dist(&a[i], &a[j], weight);
        }
    }
    acc * S::lit(2.0) / S::from_usize_lossy(n * (n - 1))
}

fn cross_mean<S: Real>(a: &[Vec<S>], b: &[Vec<S>], weight: S) -> S {
    let mut acc = S::zero();
    for x in a {
        for y in b {
            acc += dist(x, y, weight);
        }
    }
    acc / S::from_usize_lossy(a.len() * b.len())
}

/// Squared energy distance with the Euclidean norm.
pub fn energy_distance_sq<S: Real>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<S> {
    energy_distance_sq_weighted(a, b, S::one())
}

/// Squared energy distance with the norm `√(w Σ v²)`.
pub fn energy_distance_sq_weighted<S: Real>(a: &[Vec<S>], b: &[Vec<S>], weight: S) -> Result<S> {
    let dim = check_dims(&[a, b])?;
    if dim == 1 {
        let fa: Vec<f64> = a.iter().map(|v| v[0].to_f64_lossy()).collect();
        let fb: Vec<f64> = b.iter().map(|v| v[0].to_f64_lossy()).collect();
        let d = energy_distance_sq_1d(&fa, &fb)?;
        return Ok(S::lit(d * weight.to_f64_lossy().sqrt()));
    }
    let cross = S::lit(0.5) * (cross_mean(a, b, weight) + cross_mean(b, a, weight));
    Ok(S::lit(2.0) * cross - (within_mean(a, weight) + within_mean(b, weight)))
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("energy distance input".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// `Σ_{i<j} |x_i - x_j|` for sorted `x`.
fn sorted_pair_sum(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(k, v)| v * (2.0 * k as f64 - n + 1.0))
        .sum()
}

/// `Σ_{a,b} |a - b|` for sorted inputs.
fn sorted_cross_sum(a: &[f64], b: &[f64]) -> f64 {
    let total_b: f64 = b.iter().sum();
    let nb = b.len() as f64;
    let mut j = 0;
    let mut below = 0.0;
    let mut acc = 0.0;
    for &x in a {
        while j < b.len() && b[j] <= x {
            below += b[j];
            j += 1;
        }
        let cnt = j as f64;
        acc += x * cnt - below + (total_b - below) - x * (nb - cnt);
    }
    acc
}

/// Squared energy distance between scalar samples in `O(n log n)`.
pub fn energy_distance_sq_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sa = sorted(a)?;
    let sb = sorted(b)?;
    let within = |s: &[f64]| {
        let n = s.len();
        if n < 2 {
            log::warn!("within-set energy term of a singleton set is taken as 0");
            0.0
        } else {
            2.0 * sorted_pair_sum(s) / (n * (n - 1)) as f64
        }
    };
    // Both orders are summed so that swapping the arguments is exact.
    let cross = 0.5 * (sorted_cross_sum(&sa, &sb) + sorted_cross_sum(&sb, &sa)) / (sa.len() * sb.len()) as f64;
    Ok(2.0 * cross - (within(&sa) + within(&sb)))
}

/// Energy score `mean_b ‖u - b‖ - ½ U-mean_{b≠b'} ‖b - b'‖`.
pub fn energy_score<S: Real>(b: &[Vec<S>], u: &[S]) -> Result<S> {
    energy_score_weighted(b, u, S::one())
}

pub fn energy_score_weighted<S: Real>(b: &[Vec<S>], u: &[S], weight: S) -> Result<S> {
    if b.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: b.len(),
        });
    }
    check_dims(&[b])?;
    if u.len() != b[0].len() {
        return Err(Error::LengthMismatch {
            expected: b[0].len(),
            got: u.len(),
        });
    }
    let first = b.iter().map(|v| dist(v, u, weight)).sum::<S>() / S::from_usize_lossy(b.len());
    Ok(first - S::lit(0.5) * within_mean(b, weight))
}

/// Exact `J^N` with all index exclusions. `O(N³)`; only for testing.
///
/// `map(p, y)` evaluates `T(p; y)`; the data rows `u⁽ⁱ⁾` double as
/// reference draws.
pub fn j_n_full<S: Real>(
    map: impl Fn(&[S], &[S]) -> Result<Vec<S>> + Sync,
    u: &[Vec<S>],
    y: &[Vec<S>],
    weight: S,
) -> Result<S> {
    let n = u.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    if n > J_N_MAX {
        return Err(Error::TooManySamples { max: J_N_MAX, got: n });
    }
    if y.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: y.len() });
    }
    // t[j][i] = T(u_i; y_j)
    let t: Vec<Vec<Vec<S>>> = (0..n)
        .into_par_iter()
        .map(|j| (0..n).map(|i| map(&u[i], &y[j])).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut first = S::zero();
    for j in 0..n {
        for i in 0..n {
            if i != j {
                first += dist(&t[j][i], &u[j], weight);
            }
        }
    }
    let mut second = S::zero();
    for k in 0..n {
        let mut pair_sum = S::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j && i != k && j != k {
                    pair_sum += dist(&t[k][i], &t[k][j], weight);
                }
            }
        }
        second += pair_sum;
    }
    let nf = S::from_usize_lossy(n);
    let one = S::one();
    let two = S::lit(2.0);
    Ok(two * first / (nf * (nf - one)) - second / (nf * (nf - one) * (nf - two)))
}

#[inline]
fn smooth_norm<S: Real>(sq: S, eps2: S) -> S {
    (sq + eps2).sqrt()
}

/// Loss and optional gradient for one data pair and its `m` reference draws.
fn pair_loss<S: Real>(
    model: &TransportModel<S>,
    u: &[S],
    y: &[S],
    refs: &[ReferenceSample<S>],
    eps: S,
    grad: Option<&mut [S]>,
) -> Result<S> {
    let m = refs.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let w = model.norm_weight(u.len());
    let eps2 = eps * eps;
    let mf = S::from_usize_lossy(m);
    let c1 = S::lit(2.0) / mf;
    let c2 = S::one() / (mf * (mf - S::one()));

    let mut ts = Vec::with_capacity(m);
    let mut tapes = Vec::with_capacity(m);
    for r in refs {
        if grad.is_some() {
            let (t, tape) = model.forward_tape(r, y)?;
            ts.push(t);
            tapes.push(tape);
        } else {
            ts.push(model.apply(r, y)?);
        }
    }
    if ts[0].len() != u.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            got: ts[0].len(),
        });
    }
    let sqdist = |a: &[S], b: &[S]| a.iter().zip(b).fold(S::zero(), |acc, (&x, &z)| acc + (x - z) * (x - z)) * w;

    let mut loss = S::zero();
    let mut d_t: Vec<Vec<S>> = if grad.is_some() { vec![vec![S::zero(); u.len()]; m] } else { Vec::new() };
    for r in 0..m {
        let nrm = smooth_norm(sqdist(&ts[r], u), eps2);
        loss += c1 * nrm;
        if grad.is_some() {
            let f = c1 * w / nrm;
            for ((d, &t), &uu) in d_t[r].iter_mut().zip(&ts[r]).zip(u) {
                *d += f * (t - uu);
            }
        }
    }
    for r in 0..m {
        for s in r + 1..m {
            let nrm = smooth_norm(sqdist(&ts[r], &ts[s]), eps2);
            // Ordered pairs (r, s) and (s, r) both appear in the sum.
            loss -= S::lit(2.0) * c2 * nrm;
            if grad.is_some() {
                let f = S::lit(2.0) * c2 * w / nrm;
                for i in 0..u.len() {
                    let diff = f * (ts[r][i] - ts[s][i]);
                    d_t[r][i] -= diff;
                    d_t[s][i] += diff;
                }
            }
        }
    }
    if let Some(g) = grad {
        for (tape, d) in tapes.iter().zip(&d_t) {
            model.backward(tape, d, g)?;
        }
    }
    Ok(loss)
}

fn check_batch<S>(u: &[&[S]], y: &[&[S]], refs: &[Vec<ReferenceSample<S>>]) -> Result<()> {
    if u.is_empty() {
        return Err(Error::EmptyInput);
    }
    if y.len() != u.len() || refs.len() != u.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            got: y.len().min(refs.len()),
        });
    }
    Ok(())
}

/// Minibatch estimate of the energy-score objective,
/// `mean_j [ (2/m) Σ_r ‖T_r − u_j‖_ε − (1/(m(m−1))) Σ_{r≠s} ‖T_r − T_s‖_ε ]`.
pub fn minibatch_loss<S: Real>(
    model: &TransportModel<S>,
    u: &[&[S]],
    y: &[&[S]],
    refs: &[Vec<ReferenceSample<S>>],
    norm_eps: f64,
) -> Result<S> {
    check_batch(u, y, refs)?;
    let eps = S::lit(norm_eps);
    let parts: Vec<Result<S>> = (0..u.len())
        .into_par_iter()
        .map(|j| pair_loss(model, u[j], y[j], &refs[j], eps, None))
        .collect();
    let mut total = S::zero();
    for p in parts {
        total += p?;
    }
    Ok(total / S::from_usize_lossy(u.len()))
}

/// Loss and gradient with respect to `θ`.
///
/// Pairs are split into chunks of [`GRAD_CHUNK`]; each chunk accumulates
/// sequentially and the chunk results are summed in order, so the result
/// is bitwise independent of the worker count.
pub fn minibatch_loss_and_grad<S: Real>(
    model: &TransportModel<S>,
    u: &[&[S]],
    y: &[&[S]],
    refs: &[Vec<ReferenceSample<S>>],
    norm_eps: f64,
) -> Result<(S, Vec<S>)> {
    check_batch(u, y, refs)?;
    let eps = S::lit(norm_eps);
    let n_params = model.theta().len();
    let chunks: Vec<Result<(S, Vec<S>)>> = (0..u.len().div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![S::zero(); n_params];
            let mut loss = S::zero();
            for j in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(u.len()) {
                loss += pair_loss(model, u[j], y[j], &refs[j], eps, Some(&mut g))?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); n_params];
    for c in chunks {
        let (l, g) = c?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    let inv = S::one() / S::from_usize_lossy(u.len());
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Central-difference check of [`minibatch_loss_and_grad`] at the model's current `θ`.
pub fn loss_gradient_check(
    model: &TransportModel<f64>,
    u: &[&[f64]],
    y: &[&[f64]],
    refs: &[Vec<ReferenceSample<f64>>],
    norm_eps: f64,
    coords: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grad) = minibatch_loss_and_grad(model, u, y, refs, norm_eps)?;
    if let Some(&bad) = coords.iter().find(|&&i| i >= grad.len()) {
        return Err(Error::InvalidParameter(format!("coordinate {bad} out of {} parameters", grad.len())));
    }
    let f = |v: &[f64]| {
        let mut m = model.clone();
        m.set_params(v).expect("same length");
        minibatch_loss(&m, u, y, refs, norm_eps).map_or(f64::NAN, |l| l)
    };
    Ok(central_difference_check(f, model.theta().as_slice(), &grad, coords, h))
}

/// Finite joint law on scalar `U × Y` with a finite scalar reference measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteToy {
    pub u_atoms: Vec<f64>,
    pub y_atoms: Vec<f64>,
    /// `joint[a][b] = γ(u_a, y_b)`.
    pub joint: Vec<Vec<f64>>,
    pub ref_atoms: Vec<f64>,
    pub ref_probs: Vec<f64>,
}

pub const TOY_MAX_ATOMS: usize = 8;

impl DiscreteToy {
    pub fn validate(&self) -> Result<()> {
        let nu = self.u_atoms.len();
        let ny = self.y_atoms.len();
        if nu == 0 || ny == 0 || self.ref_atoms.is_empty() {
            return Err(Error::EmptyInput);
        }
        if nu > TOY_MAX_ATOMS || ny > TOY_MAX_ATOMS {
            return Err(Error::InvalidParameter(format!("toy spaces limited to {TOY_MAX_ATOMS} atoms")));
        }
        if self.joint.len() != nu || self.joint.iter().any(|r| r.len() != ny) {
            return Err(Error::LengthMismatch {
                expected: nu * ny,
                got: self.joint.iter().map(Vec::len).sum(),
            });
        }
        if self.ref_probs.len() != self.ref_atoms.len() {
            return Err(Error::LengthMismatch {
                expected: self.ref_atoms.len(),
                got: self.ref_probs.len(),
            });
        }
        for probs in [self.joint.concat(), self.ref_probs.clone()] {
            let total: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter("probabilities must be nonnegative and sum to 1".into()));
            }
        }
        Ok(())
    }

    fn kappa(&self, b: usize) -> f64 {
        self.joint.iter().map(|r| r[b]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    /// `L(θ)`, the averaged squared energy distance.
    pub l: Vec<f64>,
    /// `J(θ)` from the reference/joint expectation form.
    pub j: Vec<f64>,
    /// `2 E[ES] − C`.
    pub es_form: Vec<f64>,
    /// `C = E_y E_{π⊗π} |u − u'|`.
    pub c: f64,
    /// `max_θ |(L − J)(θ) − (L − J)(θ₀)|`.
    pub max_lj_deviation: f64,
    /// `max_θ |L(θ) − (2 E[ES] − C)(θ)|`.
    pub max_es_error: f64,
}

/// Evaluates `L`, `J` and `2E[ES] − C` by exact enumeration for each `θ`.
pub fn lemma_identities_check(
    toy: &DiscreteToy,
    thetas: &[Vec<f64>],
    map: impl Fn(&[f64], f64, f64) -> f64,
) -> Result<LemmaReport> {
    toy.validate()?;
    if thetas.is_empty() {
        return Err(Error::EmptyInput);
    }
    let nu = toy.u_atoms.len();
    let ny = toy.y_atoms.len();
    let nr = toy.ref_atoms.len();

    let mut c = 0.0;
    for b in 0..ny {
        let k = toy.kappa(b);
        if k == 0.0 {
            continue;
        }
        for a in 0..nu {
            for a2 in 0..nu {
                let pa = toy.joint[a][b] / k;
                let pa2 = toy.joint[a2][b] / k;
                c += k * pa * pa2 * (toy.u_atoms[a] - toy.u_atoms[a2]).abs();
            }
        }
    }

    let mut l_vals = Vec::new();
    let mut j_vals = Vec::new();
    let mut es_vals = Vec::new();
    for theta in thetas {
        // t[b][r] = T_θ(p_r; y_b)
        let t: Vec<Vec<f64>> = toy
            .y_atoms
            .iter()
            .map(|&y| toy.ref_atoms.iter().map(|&p| map(theta, p, y)).collect())
            .collect();
        let spread = |b: usize| {
            let mut s = 0.0;
            for r in 0..nr {
                for r2 in 0..nr {
                    s += toy.ref_probs[r] * toy.ref_probs[r2] * (t[b][r] - t[b][r2]).abs();
                }
            }
            s
        };
        let mut l = 0.0;
        let mut j = 0.0;
        let mut es = 0.0;
        for b in 0..ny {
            let k = toy.kappa(b);
            if k == 0.0 {
                continue;
            }
            let sp = spread(b);
            let mut post_spread = 0.0;
            let mut cross = 0.0;
            for a in 0..nu {
                let pa = toy.joint[a][b] / k;
                for a2 in 0..nu {
                    post_spread += pa * (toy.joint[a2][b] / k) * (toy.u_atoms[a] - toy.u_atoms[a2]).abs();
                }
                for r in 0..nr {
                    cross += pa * toy.ref_probs[r] * (toy.u_atoms[a] - t[b][r]).abs();
                }
            }
            l += k * (2.0 * cross - post_spread - sp);
            j -= k * sp;
            for a in 0..nu {
                let g = toy.joint[a][b];
                let mut score = -0.5 * sp;
                for r in 0..nr {
                    score += toy.ref_probs[r] * (toy.u_atoms[a] - t[b][r]).abs();
                }
                es += g * score;
                for r in 0..nr {
                    j += 2.0 * g * toy.ref_probs[r] * (t[b][r] - toy.u_atoms[a]).abs();
                }
            }
        }
        l_vals.push(l);
        j_vals.push(j);
        es_vals.push(2.0 * es - c);
    }
    let base = l_vals[0] - j_vals[0];
    let max_lj_deviation = l_vals
        .iter()
        .zip(&j_vals)
        .map(|(l, j)| (l - j - base).abs())
        .fold(0.0, f64::max);
    let max_es_error = l_vals
        .iter()
        .zip(&es_vals)
        .map(|(l, e)| (l - e).abs())
        .fold(0.0, f64::max);
    Ok(LemmaReport {
        l: l_vals,
        j: j_vals,
        es_form: es_vals,
        c,
        max_lj_deviation,
        max_es_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_difference_check, ArchDescriptor};
    use crate::rng::rng_from_seed;
    use crate::scalar::std_normal;
    use crate::transport::{ReferenceKind, Standardization, Variant};
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| std_normal::<f64, _>(&mut rng)).collect()
    }

    #[test]
    fn point_masses() {
        assert_eq!(energy_distance_sq(&col(&[1.0]), &col(&[4.0])).unwrap(), 6.0);
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![4.0, 4.0]];
        assert_eq!(energy_distance_sq(&a, &b).unwrap(), 10.0);
    }

    #[test]
    fn two_point_sets_mix_statistics() {
        // Cross term over all pairs (0.5), within terms over distinct pairs (1 each).
        let a = col(&[0.0, 1.0]);
        assert_eq!(energy_distance_sq(&a, &a).unwrap(), -1.0);
    }

    #[test]
    fn fast_path_matches_direct_sums() {
        let a: Vec<f64> = normals(57, 1);
        let b: Vec<f64> = normals(31, 2).iter().map(|x| 0.3 + 2.0 * x).collect();
        let fast = energy_distance_sq_1d(&a, &b).unwrap();
        let (ca, cb) = (col(&a), col(&b));
        let direct = 2.0 * cross_mean(&ca, &cb, 1.0) - within_mean(&ca, 1.0) - within_mean(&cb, 1.0);
        assert!((fast - direct).abs() < 1e-12);
    }

    #[test]
    fn null_distribution_centres_on_zero() {
        let reps: Vec<f64> = (0..40)
            .map(|r| energy_distance_sq_1d(&normals(10_000, 2 * r), &normals(10_000, 2 * r + 1)).unwrap())
            .collect();
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        let sd = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
        let single = energy_distance_sq_1d(&normals(10_000, 1000), &normals(10_000, 1001)).unwrap();
        assert!(single.abs() < 3.0 * sd, "{single} vs sd {sd}");
        assert!(mean.abs() < 3.0 * sd / (reps.len() as f64).sqrt());
    }

    #[test]
    fn dirac_against_gaussian() {
        let expected = 2.0 * (2.0 / std::f64::consts::PI).sqrt() - 2.0 / std::f64::consts::PI.sqrt();
        assert!((expected - 0.4674).abs() < 1e-4);
        let zeros = vec![0.0; 10_000];
        let reps: Vec<f64> = (0..20)
            .map(|r| energy_distance_sq_1d(&zeros, &normals(10_000, 50 + r)).unwrap())
            .collect();
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        let sd = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
        assert!((reps[0] - expected).abs() < 3.0 * sd, "{} vs {expected}, sd {sd}", reps[0]);
    }

    #[test]
    fn energy_score_examples() {
        let v = vec![vec![2.0], vec![2.0]];
        assert_eq!(energy_score(&v, &[5.0]).unwrap(), 3.0);
        assert_eq!(energy_score(&col(&[-1.0, 1.0]), &[0.0]).unwrap(), 0.0);
        assert!(matches!(energy_score(&col(&[1.0]), &[0.0]), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn energy_score_is_minimised_at_centre() {
        let spread = [-0.7, -0.2, 0.1, 0.8];
        let u = 1.3;
        let scores: Vec<(f64, f64)> = (-40..=40)
            .map(|i| {
                let shift = u + i as f64 * 0.05;
                let b = col(&spread.iter().map(|s| s + shift).collect::<Vec<_>>());
                (shift, energy_score(&b, &[u]).unwrap())
            })
            .collect();
        let best = scores.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        // Any shift that puts u between the two middle atoms is optimal.
        assert!(best.0 >= u - 0.1 - 1e-9 && best.0 <= u + 0.2 + 1e-9, "{best:?}");
        let at_centre = energy_score(&col(&spread.iter().map(|s| s + u).collect::<Vec<_>>()), &[u]).unwrap();
        assert!((best.1 - at_centre).abs() < 1e-12);
    }

    #[test]
    fn j_n_identity_example() {
        let u = col(&[0.0, 1.0, 2.0]);
        let y = col(&[5.0, -1.0, 0.3]);
        let j = j_n_full(|p: &[f64], _y: &[f64]| Ok(p.to_vec()), &u, &y, 1.0).unwrap();
        assert!((j - 4.0 / 3.0).abs() <= 1e-14);
        let same = col(&[0.7, 0.7, 0.7]);
        assert_eq!(j_n_full(|p: &[f64], _y: &[f64]| Ok(p.to_vec()), &same, &y, 1.0).unwrap(), 0.0);
        assert!(matches!(
            j_n_full(|p: &[f64], _y: &[f64]| Ok(p.to_vec()), &u[..2], &y[..2], 1.0),
            Err(Error::TooFewSamples { .. })
        ));
        let big = col(&vec![0.0; 201]);
        assert!(matches!(
            j_n_full(|p: &[f64], _y: &[f64]| Ok(p.to_vec()), &big, &big, 1.0),
            Err(Error::TooManySamples { .. })
        ));
    }

    #[test]
    fn j_n_is_permutation_invariant() {
        let u = col(&normals(9, 4));
        let y = col(&normals(9, 5));
        let map = |p: &[f64], y: &[f64]| Ok(vec![0.5 * p[0] + y[0] * y[0]]);
        let a = j_n_full(map, &u, &y, 1.0).unwrap();
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let up: Vec<_> = perm.iter().map(|&i| u[i].clone()).collect();
        let yp: Vec<_> = perm.iter().map(|&i| y[i].clone()).collect();
        let b = j_n_full(map, &up, &yp, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn small_model(seed: u64) -> TransportModel<f64> {
        let mut m = TransportModel::new(
            Variant::MlpResidual,
            ReferenceKind::Prior,
            ArchDescriptor::mlp(1, 1, 1, 2, 5),
            None,
            Standardization::identity(1),
        )
        .unwrap();
        m.init_params(&mut rng_from_seed(seed));
        m
    }

    fn refs(values: &[f64]) -> Vec<ReferenceSample<f64>> {
        values.iter().map(|&p| ReferenceSample { p: vec![p], q: vec![] }).collect()
    }

    #[test]
    fn identity_loss_is_bounded_by_smoothing() {
        let m = TransportModel::new(
            Variant::MlpResidual,
            ReferenceKind::Prior,
            ArchDescriptor::mlp(1, 1, 1, 1, 3),
            None,
            Standardization::identity(1),
        )
        .unwrap();
        let u = [0.4];
        let loss = minibatch_loss(&m, &[&u], &[&[1.0][..]], &[refs(&[0.4; 4])], DEFAULT_NORM_EPS).unwrap();
        assert!(loss.abs() <= 2.0 * DEFAULT_NORM_EPS);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = small_model(3);
        let us: Vec<Vec<f64>> = col(&normals(5, 10));
        let ys: Vec<Vec<f64>> = us.iter().map(|u| vec![u[0] * u[0] + 0.1]).collect();
        let rs: Vec<_> = (0..5).map(|j| refs(&normals(4, 20 + j))).collect();
        let u_refs: Vec<&[f64]> = us.iter().map(|v| v.as_slice()).collect();
        let y_refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let (_, grad) = minibatch_loss_and_grad(&m, &u_refs, &y_refs, &rs, DEFAULT_NORM_EPS).unwrap();
        let f = |v: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(v).unwrap();
            minibatch_loss(&mm, &u_refs, &y_refs, &rs, DEFAULT_NORM_EPS).unwrap()
        };
        let coords: Vec<usize> = (0..m.theta().len()).step_by(2).take(20).collect();
        let rep = central_difference_check(f, m.theta().as_slice(), &grad, &coords, 1e-5);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn gradient_reduction_is_independent_of_workers() {
        let m = small_model(8);
        let us = col(&normals(37, 1));
        let ys = col(&normals(37, 2));
        let rs: Vec<_> = (0..37).map(|j| refs(&normals(4, 100 + j))).collect();
        let u_refs: Vec<&[f64]> = us.iter().map(|v| v.as_slice()).collect();
        let y_refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let a = minibatch_loss_and_grad(&m, &u_refs, &y_refs, &rs, 1e-8).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let b = pool.install(|| minibatch_loss_and_grad(&m, &u_refs, &y_refs, &rs, 1e-8).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_is_linear_in_loss() {
        let m = small_model(2);
        let us = col(&normals(6, 3));
        let ys = col(&normals(6, 4));
        let rs: Vec<_> = (0..6).map(|j| refs(&normals(3, 200 + j))).collect();
        let u_refs: Vec<&[f64]> = us.iter().map(|v| v.as_slice()).collect();
        let y_refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let (_, g1) = minibatch_loss_and_grad(&m, &u_refs[..3], &y_refs[..3], &rs[..3], 1e-8).unwrap();
        let (_, g2) = minibatch_loss_and_grad(&m, &u_refs[3..], &y_refs[3..], &rs[3..], 1e-8).unwrap();
        let (_, g) = minibatch_loss_and_grad(&m, &u_refs, &y_refs, &rs, 1e-8).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - 0.5 * (g1[i] + g2[i])).abs() < 1e-10);
        }
    }

    fn two_by_two() -> DiscreteToy {
        DiscreteToy {
            u_atoms: vec![-1.0, 2.0],
            y_atoms: vec![0.0, 1.0],
            joint: vec![vec![0.25, 0.25], vec![0.25, 0.25]],
            ref_atoms: vec![-0.5, 0.3, 1.1],
            ref_probs: vec![0.2, 0.5, 0.3],
        }
    }

    fn toy_map(theta: &[f64], p: f64, y: f64) -> f64 {
        theta[0] + theta[1] * p + theta[2] * y + theta[3] * (p * y).tanh()
    }

    fn toy_thetas() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.3, -0.5, 1.2, 0.0],
            vec![-1.0, 2.0, 0.1, 0.7],
            vec![0.5, 0.0, -0.4, 1.3],
            vec![2.0, 0.1, 0.9, -2.2],
        ]
    }

    #[test]
    fn lemma_identities_on_uniform_toy() {
        let rep = lemma_identities_check(&two_by_two(), &toy_thetas(), toy_map).unwrap();
        assert!(rep.max_lj_deviation <= 1e-12, "{rep:?}");
        assert!(rep.max_es_error <= 1e-12, "{rep:?}");
        assert!((rep.l[0] - rep.j[0] - (-rep.c)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_posterior_has_zero_constant() {
        let toy = DiscreteToy {
            joint: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            ..two_by_two()
        };
        let rep = lemma_identities_check(&toy, &toy_thetas(), toy_map).unwrap();
        assert_eq!(rep.c, 0.0);
        for (l, e) in rep.l.iter().zip(&rep.es_form) {
            assert!((l - e).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_validation() {
        let mut toy = two_by_two();
        toy.joint[0][0] = 0.3;
        assert!(lemma_identities_check(&toy, &toy_thetas(), toy_map).is_err());
        let toy = DiscreteToy {
            u_atoms: vec![0.0; 9],
            ..two_by_two()
        };
        assert!(toy.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn translation_invariance(a in prop::collection::vec(-5.0f64..5.0, 1..20),
                                  b in prop::collection::vec(-5.0f64..5.0, 1..20),
                                  c in -10.0f64..10.0) {
            let d0 = energy_distance_sq(&col(&a), &col(&b)).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
            let d1 = energy_distance_sq(&col(&sa), &col(&sb)).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12 * (1.0 + d0.abs()) * 100.0);
        }

        #[test]
        fn homogeneity_and_symmetry(a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..12),
                                    b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..12),
                                    s in 0.1f64..5.0) {
            let d = energy_distance_sq(&a, &b).unwrap();
            let scale = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|x| x * s).collect()).collect::<Vec<Vec<f64>>>();
            let ds = energy_distance_sq(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((ds - s * d).abs() < 1e-10);
            prop_assert_eq!(d, energy_distance_sq(&b, &a).unwrap());
        }

        #[test]
        fn one_dimensional_symmetry(a in prop::collection::vec(-5.0f64..5.0, 1..30),
                                    b in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            prop_assert_eq!(energy_distance_sq_1d(&a, &b).unwrap(), energy_distance_sq_1d(&b, &a).unwrap());
        }
    }
}
