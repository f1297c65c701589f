//! Shared test oracles: central finite differences, nested-loop references,
//! and small random-tensor helpers. Everything here is independent of the
//! reverse-mode path it checks.

#![allow(dead_code)]

use promptseg_core::tensor::{backward, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_shape<R: Rng>(rng: &mut R, ndim: usize, max: usize) -> Vec<usize> {
    (0..ndim).map(|_| rng.random_range(1..=max)).collect()
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Check reverse-mode gradients of `forward()` against central finite
/// differences for every element of every tensor in `params`. Returns the
/// maximum relative error observed.
///
/// `forward` must be a pure function of the current parameter values.
pub fn finite_diff_max_err(params: &[Tensor], forward: &dyn Fn() -> Tensor) -> f64 {
    for p in params {
        assert!(p.requires_grad(), "finite_diff_max_err expects tracked leaves");
        p.zero_grad();
    }
    let loss = forward();
    backward(&loss).expect("backward");
    let mut max_err: f64 = 0.0;
    for p in params {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in 0..p.numel() {
            let fd = fd_element(p, i, forward);
            max_err = max_err.max(rel_err(grad[i], fd));
        }
        p.zero_grad();
    }
    max_err
}

/// Same check but sampling `samples` random elements across all params
/// (for large parameter sets like the end-to-end model).
pub fn finite_diff_sampled_err<R: Rng>(
    params: &[Tensor],
    forward: &dyn Fn() -> Tensor,
    samples: usize,
    rng: &mut R,
) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let loss = forward();
    backward(&loss).expect("backward");
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut max_err: f64 = 0.0;
    for _ in 0..samples {
        let pi = rng.random_range(0..params.len());
        let ei = rng.random_range(0..params[pi].numel());
        let fd = fd_element(&params[pi], ei, forward);
        max_err = max_err.max(rel_err(grads[pi][ei], fd));
    }
    for p in params {
        p.zero_grad();
    }
    max_err
}

fn fd_element(p: &Tensor, i: usize, forward: &dyn Fn() -> Tensor) -> f64 {
    let original = p.to_vec()[i];
    p.update_data(|d| d[i] = original + FD_STEP);
    let plus = forward().item();
    p.update_data(|d| d[i] = original - FD_STEP);
    let minus = forward().item();
    p.update_data(|d| d[i] = original);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Random weights for collapsing a tensor-valued op into a scalar loss:
/// `loss = sum(out * w)` with untracked `w`.
pub fn weighted_sum(out: &Tensor, weights: &Tensor) -> Tensor {
    out.hadamard(weights).unwrap().sum_all()
}

pub fn random_leaf<R: Rng>(shape: &[usize], rng: &mut R, tracked: bool) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    t.set_requires_grad(tracked);
    t
}

/// Five-nested-loop scalar reference for the mask-calibration output:
/// `M[*, i, y, x] = (1 / (b*c)) * sum_bb sum_k H[bb,i,k] * U[bb,k,y,x]`,
/// repeated over the leading batch axis.
pub fn calibrate_loop_reference(u: &Tensor, h: &Tensor) -> Vec<f64> {
    let us = u.shape();
    let hs = h.shape();
    let (b, c, hh, ww) = (us[0], us[1], us[2], us[3]);
    let n = hs[1];
    let mut out = vec![0.0; b * n * hh * ww];
    for i in 0..n {
        for y in 0..hh {
            for x in 0..ww {
                let mut acc = 0.0;
                for bb in 0..b {
                    for k in 0..c {
                        acc += h.at(&[bb, i, k]) * u.at(&[bb, k, y, x]);
                    }
                }
                let mean = acc / (b * c) as f64;
                for bb in 0..b {
                    out[((bb * n + i) * hh + y) * ww + x] = mean;
                }
            }
        }
    }
    out
}
