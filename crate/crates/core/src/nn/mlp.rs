use super::{ArchDescriptor, ParamLayout};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub(super) fn layout(arch: &ArchDescriptor) -> ParamLayout {
    let mut specs = Vec::new();
    let mut fan_in = arch.input_dim + arch.cond_dim;
    for l in 0..arch.depth {
        specs.push((format!("layer{l}.weight"), vec![arch.width, fan_in]));
        specs.push((format!("layer{l}.bias"), vec![arch.width]));
        fan_in = arch.width;
    }
    specs.push(("out.weight".to_string(), vec![arch.output_dim, fan_in]));
    specs.push(("out.bias".to_string(), vec![arch.output_dim]));
    ParamLayout::build(specs)
}

#[derive(Debug, Clone, Default)]
pub(crate) struct MlpTape<S> {
    /// Input to each affine layer, `depth + 1` entries.
    inputs: Vec<Vec<S>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<S>>,
}

/// `out = W x + b` for row-major `W` of shape `[rows, x.len()]`.
fn affine<S: Real>(w: &[S], b: &[S], x: &[S]) -> Vec<S> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            row.iter().zip(x).fold(bias, |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

pub(super) fn forward<S: Real>(
    arch: &ArchDescriptor,
    theta: &[S],
    input: &[S],
    cond: &[S],
    mut tape: Option<&mut MlpTape<S>>,
) -> Result<Vec<S>> {
    if input.len() != arch.input_dim {
        return Err(Error::LengthMismatch {
            expected: arch.input_dim,
            got: input.len(),
        });
    }
    if cond.len() != arch.cond_dim {
        return Err(Error::LengthMismatch {
            expected: arch.cond_dim,
            got: cond.len(),
        });
    }
    let mut x: Vec<S> = input.iter().chain(cond).copied().collect();
    let mut offset = 0;
    for _ in 0..arch.depth {
        let fan_in = x.len();
        let w = &theta[offset..offset + arch.width * fan_in];
        offset += arch.width * fan_in;
        let b = &theta[offset..offset + arch.width];
        offset += arch.width;
        let z = affine(w, b, &x);
        let a: Vec<S> = z.iter().map(|&v| arch.activation.apply(v)).collect();
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.push(std::mem::replace(&mut x, a));
            t.pre.push(z);
        } else {
            x = a;
        }
    }
    let fan_in = x.len();
    let w = &theta[offset..offset + arch.output_dim * fan_in];
    offset += arch.output_dim * fan_in;
    let b = &theta[offset..offset + arch.output_dim];
    let out = affine(w, b, &x);
    if let Some(t) = tape {
        t.inputs.push(x);
    }
    Ok(out)
}

pub(super) fn backward<S: Real>(
    arch: &ArchDescriptor,
    theta: &[S],
    tape: &MlpTape<S>,
    d_out: &[S],
    grad: &mut [S],
) -> Result<()> {
    if d_out.len() != arch.output_dim {
        return Err(Error::LengthMismatch {
            expected: arch.output_dim,
            got: d_out.len(),
        });
    }
    let mut offsets = Vec::with_capacity(arch.depth + 1);
    let mut offset = 0;
    for l in 0..=arch.depth {
        let fan_in = tape.inputs[l].len();
        let rows = if l == arch.depth { arch.output_dim } else { arch.width };
        offsets.push((offset, rows, fan_in));
        offset += rows * fan_in + rows;
    }

    let mut delta = d_out.to_vec();
    for l in (0..=arch.depth).rev() {
        let (off, rows, fan_in) = offsets[l];
        let x = &tape.inputs[l];
        let w = &theta[off..off + rows * fan_in];
        {
            let (gw, gb) = grad[off..off + rows * fan_in + rows].split_at_mut(rows * fan_in);
            for r in 0..rows {
                let d = delta[r];
                if d == S::zero() {
                    continue;
                }
                gb[r] += d;
                for (g, &xi) in gw[r * fan_in..(r + 1) * fan_in].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut dx = vec![S::zero(); fan_in];
        for r in 0..rows {
            let d = delta[r];
            if d == S::zero() {
                continue;
            }
            for (dxi, &wi) in dx.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                *dxi += d * wi;
            }
        }
        let z = &tape.pre[l - 1];
        for (dxi, &zi) in dx.iter_mut().zip(z) {
            *dxi *= arch.activation.derivative(zi);
        }
        delta = dx;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{central_difference_check, ArchDescriptor, Network};
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_params_give_zero_output() {
        let net = Network::<f64>::new(ArchDescriptor::mlp(2, 3, 2, 2, 8)).unwrap();
        let theta = net.zero_params();
        let out = net.forward(&theta, &[0.3, -1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn depth_zero_is_affine() {
        let net = Network::<f64>::new(ArchDescriptor::mlp(1, 1, 1, 0, 0)).unwrap();
        let mut theta = net.zero_params();
        theta.as_mut_slice().copy_from_slice(&[2.0, -1.0, 0.5]);
        let out = net.forward(&theta, &[3.0], &[4.0]).unwrap();
        assert_eq!(out, vec![2.0 * 3.0 - 4.0 + 0.5]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Network::<f64>::new(ArchDescriptor::mlp(2, 1, 2, 2, 6)).unwrap();
        let theta = net.init_params(&mut rng_from_seed(3));
        let input = [0.4, -0.7];
        let cond = [1.3];
        let weights = [0.7, -1.1];
        let (_, tape) = net.forward_tape(&theta, &input, &cond).unwrap();
        let mut grad = vec![0.0; theta.len()];
        net.backward(&theta, &tape, &weights, &mut grad).unwrap();
        let layout = net.layout().clone();
        let f = |v: &[f64]| {
            let p = super::super::ParamVector::from_values(layout.clone(), v.to_vec()).unwrap();
            let out = net.forward(&p, &input, &cond).unwrap();
            out[0] * weights[0] + out[1] * weights[1]
        };
        let coords: Vec<usize> = (0..theta.len()).collect();
        let report = central_difference_check(f, theta.as_slice(), &grad, &coords, 1e-6);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
