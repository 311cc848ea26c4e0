//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Perturbation step. Must lie in [1e-4, 1e-2] for f32 arithmetic.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// At most this many elements are probed per parameter tensor; the rest
    /// of the tensor is covered by the seeded random choice of indices.
    pub max_samples_per_tensor: usize,
    pub seed: u64,
    /// Test hook: offset added to every probed analytic gradient entry of
    /// the first parameter, to verify the check catches a broken kernel.
    pub grad_fault: Option<f64>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            epsilon: 1e-3,
            tol: 1e-3,
            max_samples_per_tensor: 12,
            seed: 0x5eed,
            grad_fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub epsilon: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "  {:<28} max_rel_err {:>10.3e}  ({} samples)\n",
                e.name, e.max_rel_err, e.samples
            ));
        }
        s.push_str(&format!(
            "  overall max_rel_err {:.3e} vs tol {:.3e}: {}\n",
            self.max_rel_err,
            self.tol,
            if self.passed() { "ok" } else { "FAILED" }
        ));
        s
    }
}

/// Compare analytic gradients of `params` against central finite
/// differences of the scalar loss produced by `loss_fn`. `loss_fn` must
/// rebuild the forward graph from the same parameter tensors on every
/// call; parameter data is perturbed in place and restored.
///
/// Relative error uses `|a - fd| / max(|a|, |fd|, floor)` where the floor
/// is scaled to the tensor's gradient magnitude, so near-zero entries are
/// judged on an absolute scale instead of blowing up the ratio.
pub fn finite_diff_check<F>(
    params: &[(String, Tensor)],
    mut loss_fn: F,
    opts: &FdOptions,
) -> Result<CheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    if !(1e-4..=1e-2).contains(&opts.epsilon) {
        return Err(Error::InvalidArgument {
            op: "finite_diff_check",
            detail: format!("epsilon {} outside [1e-4, 1e-2]", opts.epsilon),
        });
    }
    if params.is_empty() {
        return Err(Error::InvalidArgument {
            op: "finite_diff_check",
            detail: "no parameters to check".into(),
        });
    }

    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|(name, p)| {
            p.grad().ok_or_else(|| Error::InvalidArgument {
                op: "finite_diff_check",
                detail: format!("parameter {name} received no gradient"),
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = opts.epsilon;
    let mut entries = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;

    for (pi, ((name, p), grads)) in params.iter().zip(&analytic).enumerate() {
        let len = p.len();
        let mut indices: Vec<usize> = (0..len).collect();
        if len > opts.max_samples_per_tensor {
            indices.shuffle(&mut rng);
            indices.truncate(opts.max_samples_per_tensor);
            indices.sort_unstable();
        }

        let g_inf = grads.iter().fold(0.0f64, |m, &g| m.max(g.abs() as f64));
        let floor = (0.01 * g_inf).max(1e-4);

        let mut tensor_max = 0.0f64;
        for &idx in &indices {
            let original = p.data()[idx];
            let probe = |value: f32, loss_fn: &mut F| -> Result<f64> {
                p.data_mut()[idx] = value;
                let l = loss_fn()?;
                Ok(l.item() as f64)
            };
            let l_plus = probe(original + eps as f32, &mut loss_fn)?;
            let l_minus = probe(original - eps as f32, &mut loss_fn)?;
            p.data_mut()[idx] = original;

            // The stored perturbed values may round; use the actually
            // realized step for the quotient.
            let realized = ((original + eps as f32) as f64) - ((original - eps as f32) as f64);
            let fd = (l_plus - l_minus) / realized;
            let mut a = grads[idx] as f64;
            if pi == 0 {
                if let Some(fault) = opts.grad_fault {
                    a += fault;
                }
            }
            let denom = a.abs().max(fd.abs()).max(floor);
            let rel = (a - fd).abs() / denom;
            tensor_max = tensor_max.max(rel);
        }
        max_rel_err = max_rel_err.max(tensor_max);
        entries.push(CheckEntry { name: name.clone(), max_rel_err: tensor_max, samples: indices.len() });
    }

    Ok(CheckReport { entries, max_rel_err, tol: opts.tol, epsilon: opts.epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    #[test]
    fn linear_layer_gradients_are_tight() {
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f32 * 0.3 - 1.0).collect()).unwrap();
        let w = Tensor::param(&[4, 2], (0..8).map(|i| (i as f32) * 0.11 - 0.4).collect()).unwrap();
        let b = Tensor::param(&[2], vec![0.1, -0.2]).unwrap();
        let target = Tensor::from_vec(&[3, 2], vec![0.5; 6]).unwrap();

        let params = vec![("weight".to_string(), w.clone()), ("bias".to_string(), b.clone())];
        // Quadratic loss: central differences are exact up to rounding.
        let opts = FdOptions { epsilon: 1e-2, tol: 1e-4, max_samples_per_tensor: 16, ..Default::default() };
        let report = finite_diff_check(
            &params,
            || {
                let diff = x.linear(&w, &b)?.add(&target.scale(-1.0)?)?;
                diff.mul(&diff)?.sum()
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn conv_bn_relu_pool_linear_chain_checks_out() {
        let x = Tensor::from_vec(
            &[2, 2, 6, 6],
            (0..2 * 2 * 36).map(|i| ((i * 7 % 23) as f32) * 0.1 - 1.0).collect(),
        )
        .unwrap();
        let w = Tensor::param(&[3, 2, 3, 3], (0..54).map(|i| ((i * 5 % 17) as f32) * 0.05 - 0.4).collect()).unwrap();
        let state = crate::tensor::BatchNormState::new(3, 0.1, 1e-5).unwrap();
        let lw = Tensor::param(&[3, 2], (0..6).map(|i| i as f32 * 0.21 - 0.5).collect()).unwrap();
        let lb = Tensor::param(&[2], vec![0.05, -0.03]).unwrap();

        let params = vec![
            ("conv.weight".to_string(), w.clone()),
            ("bn.gamma".to_string(), state.gamma.clone()),
            ("bn.beta".to_string(), state.beta.clone()),
            ("fc.weight".to_string(), lw.clone()),
            ("fc.bias".to_string(), lb.clone()),
        ];
        let opts = FdOptions { epsilon: 2e-3, tol: 1e-3, max_samples_per_tensor: 8, ..Default::default() };
        let report = finite_diff_check(
            &params,
            || {
                x.conv2d(&w, None, 1, 1)?
                    .batch_norm(&state, Mode::Train)?
                    .relu()?
                    .global_avg_pool()?
                    .linear(&lw, &lb)?
                    .sigmoid()?
                    .sum()
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let w = Tensor::param(&[2, 2], vec![0.3, -0.2, 0.4, 0.1]).unwrap();
        let b = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -0.5, 0.25, 0.75]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let opts = FdOptions { grad_fault: Some(0.5), tol: 1e-3, ..Default::default() };
        let report = finite_diff_check(
            &params,
            || {
                let y = x.linear(&w, &b)?;
                y.mul(&y)?.sum()
            },
            &opts,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let opts = FdOptions { epsilon: 1e-6, ..Default::default() };
        let err = finite_diff_check(&params, || w.sum(), &opts);
        assert!(err.is_err());
    }
}
