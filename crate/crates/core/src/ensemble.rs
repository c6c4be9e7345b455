use crate::dataset::{meta_path, JointDataset};
use crate::error::{Error, Result};
use crate::grf::CosineBasis;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Pushforward,
    Pcn,
    QuadratureResample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMeta {
    pub provenance: Provenance,
    pub y_dagger: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub info: serde_json::Value,
}

/// Posterior samples for one observation `y†`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble<S> {
    samples: Vec<Vec<S>>,
    pub meta: EnsembleMeta,
}

impl<S: Real> PosteriorEnsemble<S> {
    pub fn new(samples: Vec<Vec<S>>, meta: EnsembleMeta) -> Result<Self> {
        let dim = samples.first().ok_or(Error::EmptyInput)?.len();
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { samples, meta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<S>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Vec<S>> {
        self.samples
    }

    /// Scalar samples of a one-dimensional ensemble.
    pub fn scalars(&self) -> Vec<S> {
        self.samples.iter().map(|s| s[0]).collect()
    }

    /// `⟨u, φ_k⟩` for every sample, `k = 0` being the constant mode.
    pub fn mode_coefficients(&self, basis: &CosineBasis<S>, k: usize) -> Result<Vec<S>> {
        if self.dim() != basis.n() {
            return Err(Error::GridMismatch(self.dim(), basis.n()));
        }
        if k > basis.k_max() {
            return Err(Error::ModeOutOfRange { k, n: basis.n() });
        }
        Ok(self.samples.iter().map(|s| basis.coefficient(s, k)).collect())
    }

    pub fn mean(&self) -> Vec<S> {
        let mut m = vec![S::zero(); self.dim()];
        for s in &self.samples {
            for (a, b) in m.iter_mut().zip(s) {
                *a += *b;
            }
        }
        let n = S::from_usize_lossy(self.len());
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    pub fn to_dataset(&self) -> Result<JointDataset> {
        let flat: Vec<f64> = self.samples.iter().flatten().map(|v| v.to_f64_lossy()).collect();
        JointDataset::new(flat, self.dim(), Vec::new(), 0)
    }

    /// Writes the samples as an `ATJD` file with `d_y = 0` and the metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dataset()?.save(path)?;
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds = JointDataset::from_bytes(&std::fs::read(path)?)?;
        let meta: EnsembleMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let samples = (0..ds.len())
            .map(|i| ds.u_row(i).iter().map(|&v| S::lit(v)).collect())
            .collect();
        Self::new(samples, meta)
    }
}

/// Sample standard deviation with Bessel's correction.
pub fn sample_std<S: Real>(v: &[S]) -> S {
    let n = v.len();
    if n < 2 {
        return S::zero();
    }
    let mean = v.iter().copied().sum::<S>() / S::from_usize_lossy(n);
    let ss = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>();
    (ss / S::from_usize_lossy(n - 1)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> EnsembleMeta {
        EnsembleMeta {
            provenance: Provenance::Pcn,
            y_dagger: vec![0.5, 0.25],
            seed: 3,
            info: serde_json::json!({"acceptance": 0.3}),
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.atjd");
        let e = PosteriorEnsemble::new(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]], meta()).unwrap();
        e.save(&path).unwrap();
        let back = PosteriorEnsemble::<f64>::load(&path).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn rejects_ragged_and_empty() {
        assert!(PosteriorEnsemble::<f64>::new(vec![], meta()).is_err());
        assert!(PosteriorEnsemble::new(vec![vec![1.0], vec![1.0, 2.0]], meta()).is_err());
    }

    #[test]
    fn mode_coefficients_pick_out_single_mode() {
        let basis = CosineBasis::<f64>::new(16, 4).unwrap();
        let field: Vec<f64> = basis.row(2).iter().map(|v| 0.5 * v + 1.0).collect();
        let e = PosteriorEnsemble::new(vec![field], meta()).unwrap();
        assert!((e.mode_coefficients(&basis, 2).unwrap()[0] - 0.5).abs() < 1e-12);
        assert!((e.mode_coefficients(&basis, 0).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(e.mode_coefficients(&basis, 1).unwrap()[0].abs() < 1e-12);
        assert!(matches!(
            e.mode_coefficients(&CosineBasis::new(8, 2).unwrap(), 1),
            Err(Error::GridMismatch(16, 8))
        ));
    }
}
