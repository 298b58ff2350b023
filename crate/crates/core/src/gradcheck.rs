//! Central finite-difference gradient checking.
//!
//! Everything here evaluates forward passes under [`no_grad`] and reduces
//! outputs to a scalar in f64 outside the tensor library, so it never
//! touches a backward graph and can serve as an oracle for
//! [`Tensor::backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{no_grad, ParamId, ParamStore, Tensor};

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `‖a - b‖ / max(‖b‖, tiny)`.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / nb.max(1e-12)
}

fn contract(y: &Tensor, w: &[f32]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Analytic and numerical gradients of `x -> <f(x), W>` for a fixed random `W`.
pub fn op_grads(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f32, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let probe = no_grad(|| f(x))?;
    let w = Tensor::randn(probe.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));

    let leaf = Tensor::parameter(x.to_vec(), x.shape())?;
    f(&leaf)?.mul(&w)?.sum().backward()?;
    let analytic: Vec<f64> = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; leaf.numel()])
        .into_iter()
        .map(f64::from)
        .collect();

    let numeric = no_grad(|| -> Result<Vec<f64>> {
        let base = x.to_vec();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let h = plus[i] as f64 - minus[i] as f64;
            let fp = contract(&f(&Tensor::new(plus, x.shape())?)?, w.data());
            let fm = contract(&f(&Tensor::new(minus, x.shape())?)?, w.data());
            out.push((fp - fm) / h);
        }
        Ok(out)
    })?;
    Ok((analytic, numeric))
}

/// Norm-wise relative error between the backward and finite-difference gradients.
pub fn op_grad_err(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f32, seed: u64) -> Result<f64> {
    let (a, n) = op_grads(f, x, eps, seed)?;
    Ok(norm_rel_err(&a, &n))
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub grad_norm: f64,
    /// Relative error of the directional derivative along the analytic gradient.
    pub directional_err: f64,
    /// Worst relative error over the sampled largest-gradient coordinates.
    pub coord_err: f64,
}

impl ParamCheck {
    pub fn max_err(&self) -> f64 {
        self.directional_err.max(self.coord_err)
    }
}

/// Checks the gradient already accumulated in every parameter of `store`
/// against Richardson-extrapolated central differences of `loss`.
///
/// Each parameter tensor gets two checks: the directional derivative along
/// its own unit gradient (which must equal the gradient norm), and
/// per-coordinate differences at its `coords` largest-magnitude entries.
/// A parameter whose analytic gradient is exactly zero is instead required
/// to have a flat loss along sampled coordinates.
pub fn check_store(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    eps: f32,
    coords: usize,
    floor: f64,
) -> Result<Vec<ParamCheck>> {
    let ids: Vec<ParamId> = store.sorted_ids().collect();
    check_params(store, &ids, loss, eps, coords, floor)
}

/// [`check_store`] restricted to `ids`.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&ParamStore) -> Result<f64>,
    eps: f32,
    coords: usize,
    floor: f64,
) -> Result<Vec<ParamCheck>> {
    let mut work = store.clone();
    // Richardson-extrapolated central difference along `dir` from `base`:
    // combining steps eps and eps/2 cancels the second-order truncation term
    let central = |id: ParamId, base: &[f32], dir: &dyn Fn(usize) -> f64, work: &mut ParamStore| -> Result<f64> {
        let mut at = |step: f64| -> Result<f64> {
            let plus: Vec<f32> = base.iter().enumerate().map(|(i, p)| (*p as f64 + step * dir(i)) as f32).collect();
            let minus: Vec<f32> = base.iter().enumerate().map(|(i, p)| (*p as f64 - step * dir(i)) as f32).collect();
            // exact length of the representable step along `dir`
            let h: f64 = plus.iter().zip(&minus).enumerate().map(|(i, (p, m))| (*p as f64 - *m as f64) * dir(i)).sum();
            work.set(id, plus)?;
            let fp = no_grad(|| loss(work))?;
            work.set(id, minus)?;
            let fm = no_grad(|| loss(work))?;
            Ok((fp - fm) / h)
        };
        let coarse = at(eps as f64)?;
        let fine = at(eps as f64 / 2.0)?;
        Ok((4.0 * fine - coarse) / 3.0)
    };

    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = store.get(id).to_vec();
        let grad: Vec<f64> = store
            .get(id)
            .grad()
            .unwrap_or_else(|| vec![0.0; base.len()])
            .into_iter()
            .map(f64::from)
            .collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        let coord_fd = |i: usize, work: &mut ParamStore| -> Result<f64> {
            central(id, &base, &|j| if j == i { 1.0 } else { 0.0 }, work)
        };

        let (directional_err, coord_err) = if norm > 0.0 {
            let d = central(id, &base, &|j| grad[j] / norm, &mut work)?;
            let directional = rel_err(d, norm, floor);

            let mut order: Vec<usize> = (0..base.len()).collect();
            order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
            let mut worst: f64 = 0.0;
            for &i in order.iter().take(coords) {
                let d = coord_fd(i, &mut work)?;
                worst = worst.max(rel_err(grad[i], d, floor));
            }
            (directional, worst)
        } else {
            let stride = (base.len() / coords.max(1)).max(1);
            let mut worst: f64 = 0.0;
            for i in (0..base.len()).step_by(stride).take(coords) {
                let d = coord_fd(i, &mut work)?;
                worst = worst.max(rel_err(d, 0.0, floor));
            }
            (worst, worst)
        };
        work.set(id, base)?;

        out.push(ParamCheck {
            name: store.name(id).to_string(),
            numel: store.get(id).numel(),
            grad_norm: norm,
            directional_err,
            coord_err,
        });
    }
    Ok(out)
}
