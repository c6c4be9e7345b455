//! Cosine-spectral neural operator.
//!
//! Hidden state is `n × width`, stored row-major by grid point. Each block
//! computes `act(Φᵀ R (Φ v) + W v + b)` where `Φ` holds the lowest
//! `k_modes` cosine modes (constant included) and `R_k` is a per-mode
//! `width × width` mixing matrix. Because the spectral path acts on
//! coefficients, the same parameters evaluate on any grid with
//! `n > k_modes`.

use super::{ArchDescriptor, ParamLayout};
use crate::error::{Error, Result};
use crate::grf::CosineBasis;
use crate::scalar::Real;

pub(super) fn layout(arch: &ArchDescriptor) -> ParamLayout {
    let w = arch.width;
    let mut specs = vec![
        ("lift.weight".to_string(), vec![w, arch.lift_channels()]),
        ("lift.bias".to_string(), vec![w]),
    ];
    for l in 0..arch.depth {
        specs.push((format!("block{l}.spectral"), vec![arch.k_modes, w, w]));
        specs.push((format!("block{l}.weight"), vec![w, w]));
        specs.push((format!("block{l}.bias"), vec![w]));
    }
    specs.push(("proj.weight".to_string(), vec![1, w]));
    specs.push(("proj.bias".to_string(), vec![1]));
    ParamLayout::build(specs)
}

#[derive(Debug, Clone, Default)]
pub(crate) struct OperatorTape<S> {
    n: usize,
    u: Vec<S>,
    cond: Vec<S>,
    /// Hidden state entering block `l`, and the final state at index `depth`.
    states: Vec<Vec<S>>,
    pre: Vec<Vec<S>>,
    coeffs: Vec<Vec<S>>,
}

impl<S> OperatorTape<S> {
    pub(crate) fn n(&self) -> usize {
        self.n
    }
}

struct Offsets {
    lift_w: usize,
    lift_b: usize,
    blocks: Vec<(usize, usize, usize)>,
    proj_w: usize,
    proj_b: usize,
}

fn offsets(arch: &ArchDescriptor) -> Offsets {
    let w = arch.width;
    let lift_w = 0;
    let lift_b = lift_w + w * arch.lift_channels();
    let mut off = lift_b + w;
    let mut blocks = Vec::with_capacity(arch.depth);
    for _ in 0..arch.depth {
        let spec = off;
        let weight = spec + arch.k_modes * w * w;
        let bias = weight + w * w;
        blocks.push((spec, weight, bias));
        off = bias + w;
    }
    Offsets {
        lift_w,
        lift_b,
        blocks,
        proj_w: off,
        proj_b: off + w,
    }
}

fn check_inputs<S: Real>(arch: &ArchDescriptor, basis: &CosineBasis<S>, u: &[S], cond: &[S]) -> Result<()> {
    if u.len() != basis.n() {
        return Err(Error::LengthMismatch {
            expected: basis.n(),
            got: u.len(),
        });
    }
    if cond.len() != arch.cond_dim {
        return Err(Error::LengthMismatch {
            expected: arch.cond_dim,
            got: cond.len(),
        });
    }
    Ok(())
}

pub(super) fn forward<S: Real>(
    arch: &ArchDescriptor,
    theta: &[S],
    basis: &CosineBasis<S>,
    u: &[S],
    cond: &[S],
    mut tape: Option<&mut OperatorTape<S>>,
) -> Result<Vec<S>> {
    check_inputs(arch, basis, u, cond)?;
    let n = u.len();
    let w = arch.width;
    let km = arch.k_modes;
    let ch = arch.lift_channels();
    let off = offsets(arch);
    let inv_n = S::one() / S::from_usize_lossy(n);

    let lift_w = &theta[off.lift_w..off.lift_w + w * ch];
    let lift_b = &theta[off.lift_b..off.lift_b + w];
    let shift: Vec<S> = (0..w)
        .map(|o| {
            let row = &lift_w[o * ch..(o + 1) * ch];
            row[2..].iter().zip(cond).fold(lift_b[o], |a, (&wi, &ci)| a + wi * ci)
        })
        .collect();
    let mut v = vec![S::zero(); n * w];
    for i in 0..n {
        let x = (S::from_usize_lossy(i) + S::lit(0.5)) * inv_n;
        for o in 0..w {
            v[i * w + o] = lift_w[o * ch] * u[i] + lift_w[o * ch + 1] * x + shift[o];
        }
    }

    if let Some(t) = tape.as_deref_mut() {
        t.n = n;
        t.u = u.to_vec();
        t.cond = cond.to_vec();
    }

    for &(spec_off, w_off, b_off) in &off.blocks {
        let mut coeffs = vec![S::zero(); km * w];
        for k in 0..km {
            let phi = basis.row(k);
            let ck = &mut coeffs[k * w..(k + 1) * w];
            for i in 0..n {
                let p = phi[i];
                for (c, &vi) in ck.iter_mut().zip(&v[i * w..(i + 1) * w]) {
                    *c += p * vi;
                }
            }
            ck.iter_mut().for_each(|c| *c *= inv_n);
        }
        let mut mixed = vec![S::zero(); km * w];
        for k in 0..km {
            let r = &theta[spec_off + k * w * w..spec_off + (k + 1) * w * w];
            let ck = &coeffs[k * w..(k + 1) * w];
            for o in 0..w {
                mixed[k * w + o] = r[o * w..(o + 1) * w].iter().zip(ck).fold(S::zero(), |a, (&ri, &ci)| a + ri * ci);
            }
        }
        let wb = &theta[w_off..w_off + w * w];
        let bb = &theta[b_off..b_off + w];
        let mut z = vec![S::zero(); n * w];
        for i in 0..n {
            let vi = &v[i * w..(i + 1) * w];
            let zi = &mut z[i * w..(i + 1) * w];
            for o in 0..w {
                zi[o] = wb[o * w..(o + 1) * w].iter().zip(vi).fold(bb[o], |a, (&wi, &x)| a + wi * x);
            }
        }
        for k in 0..km {
            let phi = basis.row(k);
            let mk = &mixed[k * w..(k + 1) * w];
            for i in 0..n {
                let p = phi[i];
                for (zi, &m) in z[i * w..(i + 1) * w].iter_mut().zip(mk) {
                    *zi += p * m;
                }
            }
        }
        let next: Vec<S> = z.iter().map(|&x| arch.activation.apply(x)).collect();
        match tape.as_deref_mut() {
            Some(t) => {
                t.states.push(std::mem::replace(&mut v, next));
                t.pre.push(z);
                t.coeffs.push(coeffs);
            }
            None => v = next,
        }
    }

    let pw = &theta[off.proj_w..off.proj_w + w];
    let pb = theta[off.proj_b];
    let out = (0..n)
        .map(|i| v[i * w..(i + 1) * w].iter().zip(pw).fold(pb, |a, (&x, &p)| a + x * p))
        .collect();
    if let Some(t) = tape {
        t.states.push(v);
    }
    Ok(out)
}

pub(super) fn backward<S: Real>(
    arch: &ArchDescriptor,
    theta: &[S],
    basis: &CosineBasis<S>,
    tape: &OperatorTape<S>,
    d_out: &[S],
    grad: &mut [S],
) -> Result<()> {
    let n = tape.n;
    if d_out.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: d_out.len(),
        });
    }
    let w = arch.width;
    let km = arch.k_modes;
    let ch = arch.lift_channels();
    let off = offsets(arch);
    let inv_n = S::one() / S::from_usize_lossy(n);

    let last = &tape.states[arch.depth];
    let pw = &theta[off.proj_w..off.proj_w + w];
    let mut dv = vec![S::zero(); n * w];
    for i in 0..n {
        let d = d_out[i];
        grad[off.proj_b] += d;
        for c in 0..w {
            grad[off.proj_w + c] += d * last[i * w + c];
            dv[i * w + c] = d * pw[c];
        }
    }

    for l in (0..arch.depth).rev() {
        let (spec_off, w_off, b_off) = off.blocks[l];
        let v = &tape.states[l];
        let z = &tape.pre[l];
        let coeffs = &tape.coeffs[l];
        let dz: Vec<S> = dv
            .iter()
            .zip(z)
            .map(|(&d, &zi)| d * arch.activation.derivative(zi))
            .collect();

        let mut dv_prev = vec![S::zero(); n * w];
        let wb = &theta[w_off..w_off + w * w];
        for i in 0..n {
            let dzi = &dz[i * w..(i + 1) * w];
            let vi = &v[i * w..(i + 1) * w];
            let dvi = &mut dv_prev[i * w..(i + 1) * w];
            for o in 0..w {
                let d = dzi[o];
                grad[b_off + o] += d;
                let gw = &mut grad[w_off + o * w..w_off + (o + 1) * w];
                for c in 0..w {
                    gw[c] += d * vi[c];
                    dvi[c] += d * wb[o * w + c];
                }
            }
        }

        for k in 0..km {
            let phi = basis.row(k);
            let mut dmixed = vec![S::zero(); w];
            for i in 0..n {
                let p = phi[i];
                for (dm, &d) in dmixed.iter_mut().zip(&dz[i * w..(i + 1) * w]) {
                    *dm += p * d;
                }
            }
            let r = &theta[spec_off + k * w * w..spec_off + (k + 1) * w * w];
            let ck = &coeffs[k * w..(k + 1) * w];
            let mut dcoef = vec![S::zero(); w];
            for o in 0..w {
                let d = dmixed[o];
                let gr = &mut grad[spec_off + k * w * w + o * w..spec_off + k * w * w + (o + 1) * w];
                for c in 0..w {
                    gr[c] += d * ck[c];
                    dcoef[c] += d * r[o * w + c];
                }
            }
            dcoef.iter_mut().for_each(|d| *d *= inv_n);
            for i in 0..n {
                let p = phi[i];
                for (dvi, &d) in dv_prev[i * w..(i + 1) * w].iter_mut().zip(&dcoef) {
                    *dvi += p * d;
                }
            }
        }
        dv = dv_prev;
    }

    let mut dshift = vec![S::zero(); w];
    for i in 0..n {
        let x = (S::from_usize_lossy(i) + S::lit(0.5)) * inv_n;
        for o in 0..w {
            let d = dv[i * w + o];
            grad[off.lift_w + o * ch] += d * tape.u[i];
            grad[off.lift_w + o * ch + 1] += d * x;
            dshift[o] += d;
        }
    }
    for o in 0..w {
        grad[off.lift_b + o] += dshift[o];
        for (j, &c) in tape.cond.iter().enumerate() {
            grad[off.lift_w + o * ch + 2 + j] += dshift[o] * c;
        }
    }
    Ok(())
}
