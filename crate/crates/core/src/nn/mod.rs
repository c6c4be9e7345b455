//! Small differentiable networks with hand-written reverse passes.
//!
//! Two architectures cover every map in this crate: a dense MLP acting on a
//! flat vector, and a cosine-spectral neural operator acting on fields on the
//! midpoint grid. Parameters live in one flat [`ParamVector`]; its
//! [`ParamLayout`] names each tensor and is a pure function of the
//! [`ArchDescriptor`].

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod operator;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, ATMC_MAGIC, ATMC_VERSION};
pub use gradcheck::{central_difference_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::grf::CosineBasis;
use crate::scalar::{uniform01, Real};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let inner = S::lit(GELU_K) * (x + S::lit(GELU_C) * x * x * x);
                S::lit(0.5) * x * (S::one() + inner.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative<S: Real>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
            Activation::Gelu => {
                let k = S::lit(GELU_K);
                let c = S::lit(GELU_C);
                let t = (k * (x + c * x * x * x)).tanh();
                let half = S::lit(0.5);
                half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::lit(3.0) * c * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    DctOperator,
}

/// Architecture of `S_θ`.
///
/// For `mlp` the network input is `input_dim` entries of the reference
/// sample followed by `cond_dim` conditioning entries. For `dct_operator`
/// the input is a field (`input_dim` must be 1) and the `cond_dim`
/// conditioning entries are broadcast to every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub k_modes: usize,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
    pub cond_dim: usize,
}

impl ArchDescriptor {
    pub fn mlp(input_dim: usize, cond_dim: usize, output_dim: usize, depth: usize, width: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            depth,
            width,
            k_modes: 0,
            activation: Activation::Gelu,
            input_dim,
            output_dim,
            cond_dim,
        }
    }

    pub fn dct_operator(cond_dim: usize, depth: usize, width: usize, k_modes: usize) -> Self {
        Self {
            kind: ArchKind::DctOperator,
            depth,
            width,
            k_modes,
            activation: Activation::Gelu,
            input_dim: 1,
            output_dim: 1,
            cond_dim,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidParameter("input and output dims must be positive".into()));
        }
        match self.kind {
            ArchKind::Mlp => {
                if self.depth > 0 && self.width == 0 {
                    return Err(Error::InvalidParameter("hidden width must be positive".into()));
                }
            }
            ArchKind::DctOperator => {
                if self.width == 0 {
                    return Err(Error::InvalidParameter("operator width must be positive".into()));
                }
                if self.input_dim != 1 || self.output_dim != 1 {
                    return Err(Error::InvalidParameter(
                        "dct_operator maps one input channel to one output channel".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of pointwise lifting channels of the operator: `u`, `x`, conditioning.
    pub fn lift_channels(&self) -> usize {
        2 + self.cond_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named slices of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    fn build(specs: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let entries = specs
            .into_iter()
            .map(|(name, shape)| {
                let e = ParamEntry { name, shape, offset };
                offset += e.len();
                e
            })
            .collect();
        Self { entries, total: offset }
    }

    pub fn for_arch(arch: &ArchDescriptor) -> Self {
        match arch.kind {
            ArchKind::Mlp => mlp::layout(arch),
            ArchKind::DctOperator => operator::layout(arch),
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector `θ`.
///
/// Every mutable borrow stamps a new version, so a [`Tape`] recorded
/// before a mutation refuses to run backward.
#[derive(Debug)]
pub struct ParamVector<S> {
    values: Vec<S>,
    layout: ParamLayout,
    version: u64,
}

impl<S: Real> Clone for ParamVector<S> {
    fn clone(&self) -> Self {
        Self {
            values: self.values.clone(),
            layout: self.layout.clone(),
            version: fresh_version(),
        }
    }
}

impl<S: Real> ParamVector<S> {
    pub fn from_values(layout: ParamLayout, values: Vec<S>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::LengthMismatch {
                expected: layout.total(),
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            layout,
            version: fresh_version(),
        })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![S::zero(); layout.total()];
        Self {
            values,
            layout,
            version: fresh_version(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        self.version = fresh_version();
        &mut self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tensor(&self, name: &str) -> Option<&[S]> {
        self.layout.get(name).map(|e| &self.values[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [S]> {
        let range = self.layout.get(name)?.range();
        self.version = fresh_version();
        Some(&mut self.values[range])
    }
}

/// Values recorded by a forward pass for the matching reverse pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    version: u64,
    inner: TapeKind<S>,
}

#[derive(Debug, Clone)]
enum TapeKind<S> {
    Mlp(mlp::MlpTape<S>),
    Operator(operator::OperatorTape<S>),
}

/// A network `S_θ` of a fixed architecture.
#[derive(Debug)]
pub struct Network<S> {
    arch: ArchDescriptor,
    layout: ParamLayout,
    bases: RwLock<HashMap<usize, Arc<CosineBasis<S>>>>,
}

impl<S: Real> Clone for Network<S> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            bases: RwLock::new(self.bases.read().expect("basis cache").clone()),
        }
    }
}

impl<S: Real> Network<S> {
    pub fn new(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            layout: ParamLayout::for_arch(&arch),
            arch,
            bases: RwLock::new(HashMap::new()),
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn zero_params(&self) -> ParamVector<S> {
        ParamVector::zeros(self.layout.clone())
    }

    /// Affine weights uniform in `±√(6/(fan_in + fan_out))`, biases zero,
    /// spectral weights uniform in `±1/width`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector<S> {
        let mut p = self.zero_params();
        let layout = self.layout.clone();
        let values = p.as_mut_slice();
        for e in layout.entries() {
            let slot = &mut values[e.range()];
            let scale = if e.name.ends_with(".spectral") {
                Some(1.0 / self.arch.width as f64)
            } else if e.name.ends_with(".weight") {
                let fan_out = e.shape[0];
                let fan_in = e.shape[1];
                Some((6.0 / (fan_in + fan_out) as f64).sqrt())
            } else {
                None
            };
            if let Some(s) = scale {
                for v in slot.iter_mut() {
                    *v = S::lit(s) * (S::lit(2.0) * uniform01::<S, _>(rng) - S::one());
                }
            }
        }
        p
    }

    fn check_params(&self, theta: &ParamVector<S>) -> Result<()> {
        if theta.len() != self.layout.total() {
            return Err(Error::LengthMismatch {
                expected: self.layout.total(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn basis(&self, n: usize) -> Result<Arc<CosineBasis<S>>> {
        if let Some(b) = self.bases.read().expect("basis cache").get(&n) {
            return Ok(b.clone());
        }
        if self.arch.k_modes + 1 > n {
            return Err(Error::Aliasing {
                k_modes: self.arch.k_modes,
                n,
            });
        }
        let b = Arc::new(CosineBasis::new(n, self.arch.k_modes.max(1) - 1)?);
        self.bases.write().expect("basis cache").insert(n, b.clone());
        Ok(b)
    }

    /// Output length for an input of length `input_len`.
    pub fn output_len(&self, input_len: usize) -> usize {
        match self.arch.kind {
            ArchKind::Mlp => self.arch.output_dim,
            ArchKind::DctOperator => input_len,
        }
    }

    pub fn forward(&self, theta: &ParamVector<S>, input: &[S], cond: &[S]) -> Result<Vec<S>> {
        self.check_params(theta)?;
        match self.arch.kind {
            ArchKind::Mlp => mlp::forward(&self.arch, theta.as_slice(), input, cond, None),
            ArchKind::DctOperator => {
                let basis = self.basis(input.len())?;
                operator::forward(&self.arch, theta.as_slice(), &basis, input, cond, None)
            }
        }
    }

    pub fn forward_tape(&self, theta: &ParamVector<S>, input: &[S], cond: &[S]) -> Result<(Vec<S>, Tape<S>)> {
        self.check_params(theta)?;
        let (out, inner) = match self.arch.kind {
            ArchKind::Mlp => {
                let mut tape = mlp::MlpTape::default();
                let out = mlp::forward(&self.arch, theta.as_slice(), input, cond, Some(&mut tape))?;
                (out, TapeKind::Mlp(tape))
            }
            ArchKind::DctOperator => {
                let basis = self.basis(input.len())?;
                let mut tape = operator::OperatorTape::default();
                let out = operator::forward(&self.arch, theta.as_slice(), &basis, input, cond, Some(&mut tape))?;
                (out, TapeKind::Operator(tape))
            }
        };
        Ok((
            out,
            Tape {
                version: theta.version(),
                inner,
            },
        ))
    }

    /// Accumulates `(∂out/∂θ)ᵀ d_out` into `grad`.
    pub fn backward(&self, theta: &ParamVector<S>, tape: &Tape<S>, d_out: &[S], grad: &mut [S]) -> Result<()> {
        self.check_params(theta)?;
        if tape.version != theta.version() {
            return Err(Error::StaleTape);
        }
        if grad.len() != theta.len() {
            return Err(Error::LengthMismatch {
                expected: theta.len(),
                got: grad.len(),
            });
        }
        match &tape.inner {
            TapeKind::Mlp(t) => mlp::backward(&self.arch, theta.as_slice(), t, d_out, grad),
            TapeKind::Operator(t) => {
                let basis = self.basis(t.n())?;
                operator::backward(&self.arch, theta.as_slice(), &basis, t, d_out, grad)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh, Activation::Relu] {
            for &x in &[-2.3f64, -0.4, 0.3, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn layout_is_deterministic_and_complete() {
        let arch = ArchDescriptor::dct_operator(8, 3, 16, 16);
        let a = ParamLayout::for_arch(&arch);
        let b = ParamLayout::for_arch(&arch);
        assert_eq!(a, b);
        let sum: usize = a.entries().iter().map(|e| e.len()).sum();
        assert_eq!(sum, a.total());
        let mlp = ParamLayout::for_arch(&ArchDescriptor::mlp(1, 1, 1, 3, 64));
        assert_eq!(mlp.total(), (2 * 64 + 64) + 2 * (64 * 64 + 64) + (64 + 1));
    }

    #[test]
    fn tape_goes_stale_after_mutation() {
        let net = Network::<f64>::new(ArchDescriptor::mlp(1, 1, 1, 1, 4)).unwrap();
        let mut theta = net.init_params(&mut rng_from_seed(0));
        let (_, tape) = net.forward_tape(&theta, &[0.3], &[0.1]).unwrap();
        theta.as_mut_slice()[0] += 1.0;
        let mut g = vec![0.0; theta.len()];
        assert!(matches!(net.backward(&theta, &tape, &[1.0], &mut g), Err(Error::StaleTape)));
    }

    #[test]
    fn init_is_reproducible_and_scaled() {
        let net = Network::<f64>::new(ArchDescriptor::dct_operator(2, 2, 8, 4)).unwrap();
        let a = net.init_params(&mut rng_from_seed(5));
        let b = net.init_params(&mut rng_from_seed(5));
        assert_eq!(a.as_slice(), b.as_slice());
        let spec = a.tensor("block0.spectral").unwrap();
        assert!(spec.iter().all(|v| v.abs() <= 1.0 / 8.0));
        assert!(a.tensor("block0.bias").unwrap().iter().all(|v| *v == 0.0));
    }
}
