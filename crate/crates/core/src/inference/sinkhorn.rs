//! Entropic optimal transport between uniform measures and the balanced
//! K-means built on it.
//!
//! Iterations run in the scaling domain on a kernel built from log-domain
//! potentials. When a scaling leaves `[1e-100, 1e100]` it is absorbed into
//! the potentials and the kernel is rebuilt, which keeps small `eps` stable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::rng;

pub const DEFAULT_EPS_FACTOR: f64 = 0.05;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_OUTER_ITERS: usize = 50;
pub const DEFAULT_MOVE_TOL: f64 = 1e-6;

const SCALE_BOUND: f64 = 1e100;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `(N, K)` nonnegative plan.
    pub t: Tensor,
    pub eps: f64,
    pub row_target: f64,
    pub col_target: f64,
    /// Scaling sweeps performed.
    pub iterations: usize,
    /// Largest absolute marginal violation of `t`.
    pub violation: f64,
    pub converged: bool,
    /// Dual objective after every sweep; non-decreasing.
    pub dual_trace: Vec<f64>,
    /// Final column potentials, usable as a warm start.
    pub g: Vec<f64>,
}

impl TransportPlan {
    /// `<T, C>`.
    pub fn transport_cost(&self, cost: &Tensor) -> f64 {
        self.t.dot(cost)
    }

    /// Row-wise argmax of the plan.
    pub fn hard_assignments(&self) -> Vec<usize> {
        let k = self.t.dims()[1];
        self.t
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0
            })
            .collect()
    }
}

fn dims2(x: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match *x.dims() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::shape(what, x.dims(), &[0, 0])),
    }
}

/// Squared Euclidean distances `(N, K)` between rows of `z` and `p`.
pub fn sq_dist_matrix(z: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (n, d) = dims2(z, "sq_dist rows")?;
    let (k, d2) = dims2(p, "sq_dist prototypes")?;
    if d != d2 {
        return Err(Error::shape("sq_dist feature dims", z.dims(), p.dims()));
    }
    let mut out = vec![0.0; n * k];
    for (i, zi) in z.data().chunks_exact(d.max(1)).enumerate().take(n) {
        for (j, pj) in p.data().chunks_exact(d.max(1)).enumerate().take(k) {
            out[i * k + j] = zi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    Tensor::new(&[n, k], out)
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Exact log-domain row then column update of the potentials.
fn log_sweep(f: &mut [f64], g: &mut [f64], c: &[f64], eps: f64, log_a: f64, log_b: f64) {
    let (n, k) = (f.len(), g.len());
    for i in 0..n {
        let row = &c[i * k..(i + 1) * k];
        f[i] = eps * log_a - eps * log_sum_exp(row.iter().zip(g.iter()).map(|(&cij, &gj)| (gj - cij) / eps));
    }
    for j in 0..k {
        g[j] = eps * log_b - eps * log_sum_exp((0..n).map(|i| (f[i] - c[i * k + j]) / eps));
    }
}

fn in_bounds(v: &[f64]) -> bool {
    v.iter()
        .all(|&x| x.is_finite() && x < SCALE_BOUND && x > 1.0 / SCALE_BOUND)
}

/// Entropic OT from `cost` with uniform marginals `1/N` and `1/K`.
pub fn sinkhorn_plan(
    cost: &Tensor,
    eps: f64,
    max_iter: usize,
    tol: f64,
    warm_g: Option<&[f64]>,
) -> Result<TransportPlan> {
    let (n, k) = dims2(cost, "sinkhorn cost")?;
    if n == 0 || k == 0 {
        return Err(Error::Param("sinkhorn needs N, K >= 1".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Param(format!("sinkhorn eps must be > 0, got {eps}")));
    }
    if !cost.is_finite() {
        return Err(Error::Numeric("non-finite transport cost".into()));
    }
    let c = cost.data();
    let (a, b) = (1.0 / n as f64, 1.0 / k as f64);
    let (log_a, log_b) = (a.ln(), b.ln());
    let mut f = vec![0.0; n];
    let mut g = match warm_g {
        Some(w) if w.len() == k && w.iter().all(|v| v.is_finite()) => w.to_vec(),
        _ => vec![0.0; k],
    };
    let mut dual_trace = Vec::new();
    let mut iterations = 0usize;
    let mut kernel = vec![0.0; n * k];
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let mut converged = false;

    'outer: while iterations < max_iter {
        log_sweep(&mut f, &mut g, c, eps, log_a, log_b);
        iterations += 1;
        dual_trace.push(a * f.iter().sum::<f64>() + b * g.iter().sum::<f64>());
        for i in 0..n {
            for j in 0..k {
                kernel[i * k + j] = ((f[i] + g[j] - c[i * k + j]) / eps).exp();
            }
        }
        let mut s = vec![0.0; n];
        let mut t = vec![0.0; k];
        loop {
            for i in 0..n {
                s[i] = kernel[i * k..(i + 1) * k].iter().zip(&v).map(|(x, y)| x * y).sum();
            }
            let viol = (0..n).map(|i| (u[i] * s[i] - a).abs()).fold(0.0, f64::max);
            if viol < tol {
                converged = true;
                break 'outer;
            }
            if iterations >= max_iter {
                break 'outer;
            }
            let new_u: Vec<f64> = s.iter().map(|&si| a / si).collect();
            if !in_bounds(&new_u) {
                absorb(&mut f, &mut g, &u, &v, eps);
                u.iter_mut().for_each(|x| *x = 1.0);
                v.iter_mut().for_each(|x| *x = 1.0);
                continue 'outer;
            }
            t.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..n {
                let ui = new_u[i];
                for (tj, &kij) in t.iter_mut().zip(&kernel[i * k..(i + 1) * k]) {
                    *tj += kij * ui;
                }
            }
            let new_v: Vec<f64> = t.iter().map(|&tj| b / tj).collect();
            if !in_bounds(&new_v) {
                absorb(&mut f, &mut g, &new_u, &v, eps);
                u.iter_mut().for_each(|x| *x = 1.0);
                v.iter_mut().for_each(|x| *x = 1.0);
                continue 'outer;
            }
            u = new_u;
            v = new_v;
            iterations += 1;
            dual_trace.push(
                a * f.iter().zip(&u).map(|(fi, ui)| fi + eps * ui.ln()).sum::<f64>()
                    + b * g.iter().zip(&v).map(|(gj, vj)| gj + eps * vj.ln()).sum::<f64>(),
            );
        }
    }
    absorb(&mut f, &mut g, &u, &v, eps);
    let mut plan = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            plan[i * k + j] = ((f[i] + g[j] - c[i * k + j]) / eps).exp();
        }
    }
    let t = Tensor::new(&[n, k], plan)?;
    let violation = marginal_violation(&t);
    Ok(TransportPlan {
        t,
        eps,
        row_target: a,
        col_target: b,
        iterations,
        violation,
        converged,
        dual_trace,
        g,
    })
}

fn absorb(f: &mut [f64], g: &mut [f64], u: &[f64], v: &[f64], eps: f64) {
    f.iter_mut().zip(u).for_each(|(fi, ui)| *fi += eps * ui.ln());
    g.iter_mut().zip(v).for_each(|(gj, vj)| *gj += eps * vj.ln());
}

/// Largest deviation of row sums from `1/N` and column sums from `1/K`.
pub fn marginal_violation(t: &Tensor) -> f64 {
    let (n, k) = (t.dims()[0], t.dims()[1]);
    let mut cols = vec![0.0; k];
    let mut worst: f64 = 0.0;
    for row in t.data().chunks_exact(k) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0 / n as f64).abs());
        cols.iter_mut().zip(row).for_each(|(c, x)| *c += x);
    }
    cols.iter().fold(worst, |w, c| w.max((c - 1.0 / k as f64).abs()))
}

/// Entropic OT between the rows of `z` and the prototypes `p` under squared
/// Euclidean cost. `eps = None` uses `0.05 * mean(C)`.
pub fn sinkhorn_assign(z: &Tensor, p: &Tensor, eps: Option<f64>, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    let cost = sq_dist_matrix(z, p)?;
    let eps = resolve_eps(&cost, eps)?;
    let plan = sinkhorn_plan(&cost, eps, max_iter, tol, None)?;
    if !plan.converged {
        log::warn!(
            "sinkhorn stopped after {} sweeps with marginal violation {:.3e}",
            plan.iterations,
            plan.violation
        );
    }
    Ok(plan)
}

fn resolve_eps(cost: &Tensor, eps: Option<f64>) -> Result<f64> {
    match eps {
        Some(e) => Ok(e),
        None => {
            let mean = cost.sum() / cost.len().max(1) as f64;
            if mean > 0.0 {
                Ok(DEFAULT_EPS_FACTOR * mean)
            } else {
                Ok(1e-12)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOptions {
    /// Fixed regularization; `None` uses `0.05 * mean(C)` each iteration.
    pub eps: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub outer_iters: usize,
    pub move_tol: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            eps: None,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            outer_iters: DEFAULT_OUTER_ITERS,
            move_tol: DEFAULT_MOVE_TOL,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub prototypes: Tensor,
    pub outer_iterations: usize,
    pub sinkhorn_sweeps: usize,
    pub eps: f64,
    pub converged: bool,
    pub reseeded: usize,
    /// Inner transport solves that hit `max_iter` before `tol`.
    pub unconverged_solves: usize,
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
pub fn kmeanspp_init(z: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = dims2(z, "kmeans++ data")?;
    if k == 0 || n < k {
        return Err(Error::Param(format!("need 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut r = rng::stream(seed, &[0x6b6d]);
    let rows: Vec<&[f64]> = z.data().chunks_exact(d).collect();
    let mut centers: Vec<usize> = vec![r.random_range(0..n)];
    let mut best: Vec<f64> = rows.iter().map(|x| sq(x, rows[centers[0]])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
        for (b, x) in best.iter_mut().zip(&rows) {
            *b = b.min(sq(x, rows[next]));
        }
    }
    let data = centers.iter().flat_map(|&c| rows[c].iter().copied()).collect();
    Tensor::new(&[k, d], data)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Balanced K-means: alternates entropic transport and plan-weighted means.
pub fn sinkhorn_kmeans(z: &Tensor, k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    let init = kmeanspp_init(z, k, opts.seed)?;
    sinkhorn_kmeans_from(z, init, opts)
}

/// [`sinkhorn_kmeans`] from given initial prototypes.
pub fn sinkhorn_kmeans_from(z: &Tensor, init: Tensor, opts: &KMeansOptions) -> Result<KMeansResult> {
    let (n, d) = dims2(z, "kmeans data")?;
    let (k, d2) = dims2(&init, "kmeans init")?;
    if d != d2 {
        return Err(Error::shape("kmeans init dims", init.dims(), z.dims()));
    }
    if k == 0 || n < k {
        return Err(Error::Param(format!("need 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut p = init;
    let mut warm: Option<Vec<f64>> = None;
    let (mut sweeps, mut reseeded, mut converged, mut eps_used) = (0, 0, false, 0.0);
    let (mut outer, mut unconverged) = (0, 0);
    let rows: Vec<&[f64]> = z.data().chunks_exact(d).collect();
    while outer < opts.outer_iters {
        outer += 1;
        let cost = sq_dist_matrix(z, &p)?;
        let eps = resolve_eps(&cost, opts.eps)?;
        eps_used = eps;
        let plan = sinkhorn_plan(&cost, eps, opts.max_iter, opts.tol, warm.as_deref())?;
        sweeps += plan.iterations;
        unconverged += usize::from(!plan.converged);
        warm = Some(plan.g.clone());
        let t = plan.t.data();
        let mut next = vec![0.0; k * d];
        let mut mass = vec![0.0; k];
        for (i, x) in rows.iter().enumerate() {
            for j in 0..k {
                let w = t[i * k + j];
                mass[j] += w;
                next[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(x.iter())
                    .for_each(|(a, b)| *a += w * b);
            }
        }
        let floor = 1.0 / (10.0 * (n * k) as f64);
        for j in 0..k {
            if mass[j] < floor {
                let far = farthest_point(&rows, &p, d);
                next[j * d..(j + 1) * d].copy_from_slice(rows[far]);
                reseeded += 1;
                warm = None;
            } else {
                next[j * d..(j + 1) * d].iter_mut().for_each(|a| *a /= mass[j]);
            }
        }
        let next = Tensor::new(&[k, d], next)?;
        let movement = p
            .data()
            .chunks_exact(d)
            .zip(next.data().chunks_exact(d))
            .map(|(a, b)| sq(a, b).sqrt())
            .fold(0.0, f64::max);
        p = next;
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite prototypes".into()));
        }
        if movement < opts.move_tol {
            converged = true;
            break;
        }
    }
    Ok(KMeansResult {
        prototypes: p,
        outer_iterations: outer,
        sinkhorn_sweeps: sweeps,
        eps: eps_used,
        converged,
        reseeded,
        unconverged_solves: unconverged,
    })
}

fn farthest_point(rows: &[&[f64]], p: &Tensor, d: usize) -> usize {
    let protos: Vec<&[f64]> = p.data().chunks_exact(d).collect();
    rows.iter()
        .enumerate()
        .map(|(i, x)| (i, protos.iter().map(|q| sq(x, q)).fold(f64::INFINITY, f64::min)))
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Plain Lloyd iterations from `init` until assignments stop changing.
pub fn lloyd_kmeans(z: &Tensor, init: Tensor, max_iter: usize) -> Result<(Tensor, Vec<usize>)> {
    let (_, d) = dims2(z, "lloyd data")?;
    let (k, _) = dims2(&init, "lloyd init")?;
    let rows: Vec<&[f64]> = z.data().chunks_exact(d).collect();
    let mut p = init;
    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..max_iter {
        let protos: Vec<Vec<f64>> = p.data().chunks_exact(d).map(|c| c.to_vec()).collect();
        let next: Vec<usize> = rows
            .iter()
            .map(|x| {
                protos
                    .iter()
                    .enumerate()
                    .map(|(j, q)| (j, sq(x, q)))
                    .fold((0, f64::INFINITY), |b, (j, v)| if v < b.1 { (j, v) } else { b })
                    .0
            })
            .collect();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (x, &j) in rows.iter().zip(&next) {
            counts[j] += 1;
            sums[j * d..(j + 1) * d]
                .iter_mut()
                .zip(x.iter())
                .for_each(|(a, b)| *a += b);
        }
        let mut data = p.data().to_vec();
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    data[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }
        p = Tensor::new(&[k, d], data)?;
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok((p, assign))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antidiagonal_cost_gives_diagonal_plan() {
        let c = Tensor::new(&[2, 2], vec![0.0, 10.0, 10.0, 0.0]).unwrap();
        let plan = sinkhorn_plan(&c, 0.5, 500, 1e-9, None).unwrap();
        let t = plan.t.data();
        assert!((t[0] - 0.5).abs() < 1e-3 && (t[3] - 0.5).abs() < 1e-3);
        assert!(t[1] < 1e-3 && t[2] < 1e-3);
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        let c = Tensor::full(&[3, 4], 2.5);
        let plan = sinkhorn_plan(&c, 0.1, 500, 1e-12, None).unwrap();
        for &v in plan.t.data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_eps_survives_through_absorption() {
        let c = Tensor::new(&[3, 3], vec![0.0, 50.0, 80.0, 60.0, 0.0, 70.0, 90.0, 40.0, 0.0]).unwrap();
        let plan = sinkhorn_plan(&c, 1e-3, 500, 1e-9, None).unwrap();
        assert!(plan.converged, "{}", plan.violation);
        assert_eq!(plan.hard_assignments(), vec![0, 1, 2]);
    }

    #[test]
    fn single_prototype_is_column_mean() {
        let z = Tensor::new(&[4, 2], vec![0.0, 0.0, 2.0, 0.0, 2.0, 4.0, 0.0, 4.0]).unwrap();
        let r = sinkhorn_kmeans(&z, 1, &KMeansOptions::default()).unwrap();
        assert!((r.prototypes.data()[0] - 1.0).abs() < 1e-12);
        assert!((r.prototypes.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_rejected() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            sinkhorn_kmeans(&z, 3, &KMeansOptions::default()),
            Err(Error::Param(_))
        ));
    }
}
