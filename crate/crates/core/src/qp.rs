//! Per-sample gradient sets and the projection of a batch gradient onto the
//! cone of directions compatible with every per-sample gradient.
//!
//! The primal problem is `min ½‖g − x‖²  s.t.  ⟨x, g_j⟩ ≥ 0 ∀j`. It is solved
//! through its dual over one multiplier per sample,
//!
//! ```text
//! min_λ ½ λᵀ G Gᵀ λ + gᵀ Gᵀ λ   s.t. λ ≥ 0,      x* = g + Gᵀ λ
//! ```
//!
//! with accelerated projected gradient (step 1/L, L from power iteration),
//! periodically refined by an active-set pass solving exactly on the support.
//! The dual gradient `G Gᵀ λ + G g` equals `G x`, so primal feasibility and
//! complementary slackness are read directly off it.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major per-sample gradients (`n × P`) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    n: usize,
    p: usize,
    per_sample: Vec<f64>,
    mean: Vec<f64>,
}

impl GradientSet {
    /// Builds the set, taking the batch gradient as the arithmetic mean.
    pub fn new(n: usize, p: usize, per_sample: Vec<f64>) -> Result<Self> {
        if n == 0 || p == 0 || per_sample.len() != n * p {
            return Err(Error::shape(format!(
                "gradient set {n}x{p} with {} values",
                per_sample.len()
            )));
        }
        if per_sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite per-sample gradient".into()));
        }
        let mut mean = vec![0.0; p];
        for row in per_sample.chunks_exact(p) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Ok(Self { n, p, per_sample, mean })
    }

    /// Uses an explicit reference direction instead of the mean.
    pub fn with_reference(n: usize, p: usize, per_sample: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        let mut gs = Self::new(n, p, per_sample)?;
        if reference.len() != p || reference.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("reference direction must be finite with P entries"));
        }
        gs.mean = reference;
        Ok(gs)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.per_sample[i * self.p..(i + 1) * self.p]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compatibility {
    pub cosines: Vec<f64>,
    /// Indices with negative cosine similarity to the batch direction.
    pub incompatible: Vec<usize>,
    /// The batch direction was zero; every cosine is reported as 0.
    pub zero_direction: bool,
}

/// Cosine similarity of each per-sample gradient with the batch gradient.
pub fn compatibility(gs: &GradientSet) -> Compatibility {
    compatibility_with(gs, gs.mean(), 0.0)
}

/// Cosines against an arbitrary direction; samples count as incompatible
/// when their cosine is below `-tol`. Zero-norm samples get cosine 0.
pub fn compatibility_with(gs: &GradientSet, direction: &[f64], tol: f64) -> Compatibility {
    let dn = norm(direction);
    if dn == 0.0 {
        return Compatibility {
            cosines: vec![0.0; gs.len()],
            incompatible: Vec::new(),
            zero_direction: true,
        };
    }
    let cosines: Vec<f64> = (0..gs.len())
        .map(|i| {
            let gi = gs.row(i);
            let n = norm(gi);
            if n == 0.0 {
                0.0
            } else {
                dot(direction, gi) / (dn * n)
            }
        })
        .collect();
    let incompatible = (0..gs.len()).filter(|&i| cosines[i] < -tol).collect();
    Compatibility {
        cosines,
        incompatible,
        zero_direction: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    /// Stop once every cosine between the projected direction and a
    /// per-sample gradient is at least `-tol`, and complementary slackness
    /// holds to the same relative accuracy.
    pub tol: f64,
    pub max_iter: usize,
    pub power_iters: usize,
    /// Periodically refine the iterate by an exact active-set pass.
    pub active_set: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200_000,
            power_iters: 50,
            active_set: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    /// Dual multipliers, one per sample, all non-negative.
    pub lambda: Vec<f64>,
    /// Projected direction `g + Gᵀ λ`.
    pub projected: Vec<f64>,
    pub iterations: usize,
    /// `max_j max(0, −⟨x, g_j⟩) / (‖g_j‖ · max(‖x‖, 10⁻³‖g‖))`: the worst
    /// negative cosine, except that directions much shorter than `g` are
    /// judged against `g` itself.
    pub feasibility_residual: f64,
    /// `max_j |λ_j ⟨x, g_j⟩|`.
    pub complementarity_residual: f64,
    /// Norm of the projected dual gradient in normalised units.
    pub projected_gradient_norm: f64,
}

impl QpSolution {
    /// `½‖g − x‖²`.
    pub fn objective(&self, gs: &GradientSet) -> f64 {
        0.5 * gs
            .mean()
            .iter()
            .zip(&self.projected)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }
}

pub fn dual_qp_solve(gs: &GradientSet, opts: &QpOptions) -> Result<QpSolution> {
    dual_qp_solve_from(gs, None, opts)
}

/// Below this norm (relative to `‖g‖`) the projected direction is treated
/// as zero when judging convergence.
const DIRECTION_FLOOR: f64 = 1e-3;

/// Iterations between active-set refinements.
const FACE_SOLVE_EVERY: usize = 10;

/// As [`dual_qp_solve`], optionally warm-started from previous multipliers.
///
/// The constraints do not change when a per-sample gradient is rescaled, so
/// the dual is solved over unit-normalised rows `ĝ_j` and a unit-normalised
/// `ĝ`. Its gradient `(Q̂λ̂ + ĉ)_j` is then `⟨x̂, ĝ_j⟩`, which makes the stopping
/// rule a bound on cosine similarities. Multipliers are mapped back to the
/// original rows on return.
pub fn dual_qp_solve_from(gs: &GradientSet, warm: Option<&[f64]>, opts: &QpOptions) -> Result<QpSolution> {
    let n = gs.len();
    let g_norm = norm(gs.mean());
    let row_norms: Vec<f64> = (0..n).map(|i| norm(gs.row(i))).collect();
    if g_norm == 0.0 {
        return Ok(finish(gs, vec![0.0; n], 0, 0.0));
    }
    // Rows with zero norm impose no constraint and keep λ = 0.
    let active: Vec<usize> = (0..n).filter(|&i| row_norms[i] > 0.0).collect();
    let m = active.len();
    let unit: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| gs.row(i).iter().map(|v| v / row_norms[i]).collect())
        .collect();
    let c: Vec<f64> = unit.iter().map(|u| dot(u, gs.mean()) / g_norm).collect();
    if c.iter().all(|&v| v >= 0.0) {
        // The batch direction is already feasible, hence its own projection.
        return Ok(finish(gs, vec![0.0; n], 0, 0.0));
    }

    let mut q = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&unit[i], &unit[j]);
            q[i * m + j] = v;
            q[j * m + i] = v;
        }
    }
    let matvec = |x: &[f64], out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&q[i * m..(i + 1) * m], x);
        }
    };
    let g_unit: Vec<f64> = gs.mean().iter().map(|v| v / g_norm).collect();
    // ‖x̂‖ for x̂ = ĝ + Σ λ_j ĝ_j. The closed form 1 + 2ĉᵀλ + λᵀQ̂λ cancels
    // badly when x̂ is short, so fall back to forming x̂ explicitly.
    let direction_norm = |x: &[f64], qx: &[f64]| {
        let sq = 1.0 + 2.0 * dot(&c, x) + dot(x, qx);
        if sq > 1e-4 {
            return sq.sqrt();
        }
        let mut v = g_unit.clone();
        for (u, &l) in unit.iter().zip(x) {
            if l != 0.0 {
                for (a, &b) in v.iter_mut().zip(u) {
                    *a += l * b;
                }
            }
        }
        norm(&v)
    };
    let converged = |x: &[f64], qx: &[f64]| {
        let pg = projected_grad_norm(x, qx, &c);
        (pg, pg < opts.tol * direction_norm(x, qx).max(DIRECTION_FLOOR))
    };

    // Unit diagonal, so the top eigenvalue is at least 1.
    let mut lip = power_iteration(&q, m, opts.power_iters).max(1.0);

    let mut x: Vec<f64> = match warm {
        Some(w) if w.len() == n => active
            .iter()
            .map(|&i| (w[i] * g_norm.recip() * row_norms[i]).max(0.0))
            .collect(),
        _ => vec![0.0; m],
    };
    let mut qx = vec![0.0; m];
    matvec(&x, &mut qx);
    let mut y = x.clone();
    let mut qy = qx.clone();
    let mut t: f64 = 1.0;
    let mut x_new = vec![0.0; m];
    let mut qx_new = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut qd = vec![0.0; m];

    let objective = |x: &[f64], qx: &[f64]| 0.5 * dot(x, qx) + dot(&c, x);
    // Replaces x by its active-set refinement when that lowers the objective.
    let face_step = |x: &mut Vec<f64>, qx: &mut Vec<f64>| -> bool {
        if !opts.active_set {
            return false;
        }
        let Some(z) = active_set_refine(&q, m, &c, x, m) else {
            return false;
        };
        let mut qz = vec![0.0; m];
        matvec(&z, &mut qz);
        if objective(&z, &qz) <= objective(x, qx) {
            *x = z;
            *qx = qz;
            true
        } else {
            false
        }
    };

    if face_step(&mut x, &mut qx) {
        y.copy_from_slice(&x);
        qy.copy_from_slice(&qx);
    }
    let (mut pg_norm, mut done) = converged(&x, &qx);
    let mut iter = 0;
    while !done {
        if iter >= opts.max_iter {
            let sol = finish(gs, unscale(&x, &active, &row_norms, g_norm, n), iter, pg_norm);
            return Err(Error::NotConverged {
                iterations: iter,
                feasibility: sol.feasibility_residual,
                complementarity: sol.complementarity_residual,
            });
        }
        iter += 1;
        for i in 0..m {
            grad[i] = qy[i] + c[i];
        }
        loop {
            for i in 0..m {
                x_new[i] = (y[i] - grad[i] / lip).max(0.0);
                d[i] = x_new[i] - y[i];
            }
            // For a quadratic, f(y + d) ≤ f(y) + ∇f(y)ᵀd + L/2‖d‖² is exactly
            // dᵀQd ≤ L‖d‖², which avoids differencing objective values.
            matvec(&d, &mut qd);
            if dot(&d, &qd) <= lip * dot(&d, &d) * (1.0 + 1e-12) {
                break;
            }
            lip *= 2.0;
        }
        matvec(&x_new, &mut qx_new);
        // Gradient-based restart: drop momentum when it points uphill.
        let uphill: f64 = (0..m).map(|i| grad[i] * (x_new[i] - x[i])).sum();
        if uphill > 0.0 {
            t = 1.0;
            y.copy_from_slice(&x_new);
            qy.copy_from_slice(&qx_new);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..m {
                y[i] = x_new[i] + beta * (x_new[i] - x[i]);
            }
            matvec(&y, &mut qy);
            t = t_next;
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut qx, &mut qx_new);
        if iter % FACE_SOLVE_EVERY == 0 && face_step(&mut x, &mut qx) {
            t = 1.0;
            y.copy_from_slice(&x);
            qy.copy_from_slice(&qx);
        }
        (pg_norm, done) = converged(&x, &qx);
    }
    Ok(finish(gs, unscale(&x, &active, &row_norms, g_norm, n), iter, pg_norm))
}

/// Active-set refinement started from `x`: minimise exactly on the current
/// support, dropping indices that would turn negative and adding the most
/// violated constraint, for at most `rounds` additions. `None` when a
/// support's Gram block is not positive definite.
fn active_set_refine(q: &[f64], m: usize, c: &[f64], x: &[f64], rounds: usize) -> Option<Vec<f64>> {
    let mut x = x.to_vec();
    let mut support: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    for _ in 0..=rounds {
        // Minimise on the support, stepping to the boundary while the
        // unconstrained face minimiser leaves the orthant.
        loop {
            let idx: Vec<usize> = (0..m).filter(|&i| support[i]).collect();
            if idx.is_empty() {
                x.iter_mut().for_each(|v| *v = 0.0);
                break;
            }
            let s = idx.len();
            let block = DMatrix::from_fn(s, s, |a, b| q[idx[a] * m + idx[b]]);
            let rhs = DVector::from_iterator(s, idx.iter().map(|&i| -c[i]));
            let sol = block.cholesky()?.solve(&rhs);
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut step: f64 = 1.0;
            let mut blocking = None;
            for (a, &i) in idx.iter().enumerate() {
                if sol[a] <= 0.0 {
                    let t = x[i] / (x[i] - sol[a]);
                    if t < step || blocking.is_none() && t <= step {
                        step = t;
                        blocking = Some(i);
                    }
                }
            }
            for (a, &i) in idx.iter().enumerate() {
                x[i] = (x[i] + step * (sol[a] - x[i])).max(0.0);
            }
            match blocking {
                Some(i) => {
                    x[i] = 0.0;
                    support[i] = false;
                }
                None => break,
            }
        }
        let mut worst = None;
        let mut worst_grad = 0.0;
        for j in (0..m).filter(|&j| !support[j]) {
            let g = dot(&q[j * m..(j + 1) * m], &x) + c[j];
            if g < worst_grad {
                worst_grad = g;
                worst = Some(j);
            }
        }
        match worst {
            Some(j) => support[j] = true,
            None => break,
        }
    }
    Some(x)
}

/// Maps normalised multipliers back to the original rows.
fn unscale(x: &[f64], active: &[usize], row_norms: &[f64], g_norm: f64, n: usize) -> Vec<f64> {
    let mut lambda = vec![0.0; n];
    for (&i, &v) in active.iter().zip(x) {
        lambda[i] = v * g_norm / row_norms[i];
    }
    lambda
}

fn projected_grad_norm(x: &[f64], qx: &[f64], c: &[f64]) -> f64 {
    x.iter()
        .zip(qx)
        .zip(c)
        .map(|((&xi, &qi), &ci)| {
            let g = qi + ci;
            let pg = if xi > 0.0 { g } else { g.min(0.0) };
            pg * pg
        })
        .sum::<f64>()
        .sqrt()
}

fn power_iteration(q: &[f64], n: usize, iters: usize) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_7).fract()).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; n];
    let mut est = 0.0;
    for _ in 0..iters {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(&q[i * n..(i + 1) * n], &v);
        }
        est = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
    }
    est
}

fn finish(gs: &GradientSet, lambda: Vec<f64>, iterations: usize, pg: f64) -> QpSolution {
    let mut projected = gs.mean().to_vec();
    for (j, &l) in lambda.iter().enumerate() {
        if l != 0.0 {
            for (p, &v) in projected.iter_mut().zip(gs.row(j)) {
                *p += l * v;
            }
        }
    }
    let pn = norm(&projected).max(DIRECTION_FLOOR * norm(gs.mean()));
    let mut feasibility: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for (j, &l) in lambda.iter().enumerate() {
        let gj = gs.row(j);
        let ip = dot(&projected, gj);
        let gn = norm(gj);
        if pn > 0.0 && gn > 0.0 {
            feasibility = feasibility.max((-ip / (pn * gn)).max(0.0));
        }
        complementarity = complementarity.max((l * ip).abs());
    }
    QpSolution {
        lambda,
        projected,
        iterations,
        feasibility_residual: feasibility,
        complementarity_residual: complementarity,
        projected_gradient_norm: pg,
    }
}
