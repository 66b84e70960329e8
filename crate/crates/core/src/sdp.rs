//! Dense barrier solver for the block max-slack SDP
//!
//! ```text
//! maximize t  s.t.  sum_k tr(C_ik W_k) - d_i >= t   (each row i)
//!                   tr(W_k) <= P_k,  W_k >= 0
//! ```
//!
//! Hermitian blocks are parameterized by `N^2` reals (diagonal, real and
//! imaginary parts of the upper triangle). Dual multipliers are rebuilt from
//! the barrier iterate, so every solve carries an upper bound as well.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CobfError, Result};
use crate::linalg::{self, CMat};

#[derive(Debug, Clone)]
pub struct SlackRow {
    /// `C_ik` for every block `k`; `None` for blocks absent from the row.
    pub coeffs: Vec<Option<CMat>>,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct BlockSdpProblem {
    pub block_dim: usize,
    pub power: Vec<f64>,
    pub rows: Vec<SlackRow>,
}

impl BlockSdpProblem {
    pub fn new(block_dim: usize, power: Vec<f64>, rows: Vec<SlackRow>) -> Result<Self> {
        let p = Self { block_dim, power, rows };
        p.validate()?;
        Ok(p)
    }

    pub fn num_blocks(&self) -> usize {
        self.power.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.power.is_empty() || self.block_dim == 0 {
            return Err(CobfError::InvalidConfig("empty SDP".into()));
        }
        if self.power.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(CobfError::InvalidConfig("trace caps must be positive".into()));
        }
        for row in &self.rows {
            if row.coeffs.len() != self.num_blocks() {
                return Err(CobfError::DimensionMismatch { expected: self.num_blocks(), got: row.coeffs.len() });
            }
            if !row.offset.is_finite() {
                return Err(CobfError::InvalidConfig("non-finite row offset".into()));
            }
            for c in row.coeffs.iter().flatten() {
                if c.nrows() != self.block_dim || c.ncols() != self.block_dim {
                    return Err(CobfError::DimensionMismatch { expected: self.block_dim, got: c.nrows() });
                }
                let mut h = c.clone();
                linalg::hermitize(&mut h);
                if (&h - c).iter().any(|z| z.norm() > 1e-10 * (1.0 + c.norm())) || c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(CobfError::InvalidConfig("row coefficients must be Hermitian and finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Row slacks `sum_k tr(C_ik W_k) - d_i`, without `t`.
    pub fn row_values(&self, w: &[CMat]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.coeffs.iter().zip(w).map(|(c, wk)| c.as_ref().map_or(0.0, |c| linalg::trace_product_re(c, wk))).sum::<f64>() - row.offset)
            .collect()
    }

    /// Upper bound on the optimal slack from multipliers `lambda` on the
    /// simplex, with the smallest trace multipliers that keep `Z_k` PSD.
    pub fn dual_bound(&self, lambda: &[f64]) -> (f64, Vec<f64>) {
        let mut value = -self.rows.iter().zip(lambda).map(|(r, l)| l * r.offset).sum::<f64>();
        let mut nu = Vec::with_capacity(self.num_blocks());
        for k in 0..self.num_blocks() {
            let m = self.block_combination(lambda, k);
            let n = linalg::lambda_max(&m).max(0.0);
            value += n * self.power[k];
            nu.push(n);
        }
        (value, nu)
    }

    fn block_combination(&self, lambda: &[f64], k: usize) -> CMat {
        let mut m = CMat::zeros(self.block_dim, self.block_dim);
        for (row, l) in self.rows.iter().zip(lambda) {
            if let Some(c) = &row.coeffs[k] {
                m += c * Complex64::new(*l, 0.0);
            }
        }
        linalg::hermitize(&mut m);
        m
    }

    /// `Z_k = nu_k I - sum_i lambda_i C_ik`.
    pub fn dual_slack(&self, lambda: &[f64], nu: &[f64], k: usize) -> CMat {
        CMat::identity(self.block_dim, self.block_dim) * Complex64::new(nu[k], 0.0) - self.block_combination(lambda, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    /// Stopped early once the sign of the optimum was certain.
    SignCertified,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub w: Vec<CMat>,
    pub t: f64,
    pub status: SdpStatus,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    /// Upper bound on the optimal `t`.
    pub dual_bound: f64,
    pub newton_steps: usize,
}

impl SdpSolution {
    pub fn gap(&self) -> f64 {
        self.dual_bound - self.t
    }

    /// The sign of the optimum: positive if `t > 0`, negative if the dual
    /// bound is below zero, otherwise the primal value decides.
    pub fn margin(&self) -> f64 {
        if self.t > 0.0 {
            self.t
        } else if self.dual_bound < 0.0 {
            self.dual_bound
        } else {
            self.t
        }
    }

    pub fn sign_certain(&self) -> bool {
        self.t > 0.0 || self.dual_bound < 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpOptions {
    pub tol: f64,
    pub newton_tol: f64,
    pub mu_factor: f64,
    pub max_newton: usize,
    /// Stop as soon as the sign of the optimum is known.
    pub sign_only: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, newton_tol: 1e-10, mu_factor: 0.2, max_newton: 200, sign_only: false }
    }
}

fn herm_basis_coeffs(q: &CMat) -> Vec<f64> {
    let n = q.nrows();
    let mut out = Vec::with_capacity(n * n);
    for p in 0..n {
        out.push(q[(p, p)].re);
    }
    for p in 0..n {
        for r in (p + 1)..n {
            out.push(2.0 * q[(p, r)].re);
            out.push(2.0 * q[(p, r)].im);
        }
    }
    out
}

fn herm_from_params(x: &[f64], n: usize) -> CMat {
    let mut w = CMat::zeros(n, n);
    for p in 0..n {
        w[(p, p)] = Complex64::new(x[p], 0.0);
    }
    let mut m = n;
    for p in 0..n {
        for r in (p + 1)..n {
            let z = Complex64::new(x[m], x[m + 1]);
            w[(p, r)] = z;
            w[(r, p)] = z.conj();
            m += 2;
        }
    }
    w
}

/// Hessian of `-ln det W` in the real parameterization, `tr(S E_m S E_l)`.
fn logdet_hessian(s: &CMat) -> DMatrix<f64> {
    let n = s.nrows();
    let cols: Vec<_> = (0..n).map(|p| s.column(p).into_owned()).collect();
    let mut products: Vec<CMat> = Vec::with_capacity(n * n);
    for p in 0..n {
        products.push(&cols[p] * cols[p].adjoint());
    }
    let i = Complex64::new(0.0, 1.0);
    for p in 0..n {
        for r in (p + 1)..n {
            let a = &cols[p] * cols[r].adjoint();
            let ah = a.adjoint();
            products.push(&a + &ah);
            products.push((&a - &ah) * i);
        }
    }
    let mut h = DMatrix::zeros(n * n, n * n);
    for (m, prod) in products.iter().enumerate() {
        for (l, v) in herm_basis_coeffs(prod).into_iter().enumerate() {
            h[(m, l)] = v;
        }
    }
    (&h + h.transpose()) * 0.5
}

fn log_det(w: &CMat) -> Option<f64> {
    let l = linalg::cholesky_pd(w)?;
    Some(2.0 * (0..w.nrows()).map(|p| l[(p, p)].re.ln()).sum::<f64>())
}

struct Layout {
    n: usize,
    blocks: usize,
    row_grad: Vec<DVector<f64>>,
    trace_coef: Vec<f64>,
}

impl Layout {
    fn block_len(&self) -> usize {
        self.n * self.n
    }

    fn dim(&self) -> usize {
        self.blocks * self.block_len() + 1
    }

    fn t_index(&self) -> usize {
        self.dim() - 1
    }

    fn blocks_of(&self, x: &DVector<f64>) -> Vec<CMat> {
        (0..self.blocks).map(|k| herm_from_params(&x.as_slice()[k * self.block_len()..(k + 1) * self.block_len()], self.n)).collect()
    }
}

fn build_layout(p: &BlockSdpProblem) -> Layout {
    let n = p.block_dim;
    let bl = n * n;
    let dim = p.num_blocks() * bl + 1;
    let row_grad = p
        .rows
        .iter()
        .map(|row| {
            let mut g = DVector::zeros(dim);
            for (k, c) in row.coeffs.iter().enumerate() {
                if let Some(c) = c {
                    for (m, v) in herm_basis_coeffs(c).into_iter().enumerate() {
                        g[k * bl + m] = v;
                    }
                }
            }
            g[dim - 1] = -1.0;
            g
        })
        .collect();
    let trace_coef = herm_basis_coeffs(&CMat::identity(n, n));
    Layout { n, blocks: p.num_blocks(), row_grad, trace_coef }
}

struct Eval {
    value: f64,
    rows: Vec<f64>,
    heads: Vec<f64>,
    blocks: Vec<CMat>,
}

/// Barrier value at `x`, `None` outside the interior.
fn barrier(p: &BlockSdpProblem, lay: &Layout, x: &DVector<f64>, tau: f64) -> Option<Eval> {
    let t = x[lay.t_index()];
    let rows: Vec<f64> = lay.row_grad.iter().zip(&p.rows).map(|(g, r)| g.dot(x) - r.offset).collect();
    if rows.iter().any(|g| !(*g > 0.0)) {
        return None;
    }
    let blocks = lay.blocks_of(x);
    let heads: Vec<f64> = blocks.iter().zip(&p.power).map(|(w, pk)| pk - linalg::trace_re(w)).collect();
    if heads.iter().any(|h| !(*h > 0.0)) {
        return None;
    }
    let mut value = -tau * t - rows.iter().map(|g| g.ln()).sum::<f64>() - heads.iter().map(|h| h.ln()).sum::<f64>();
    for w in &blocks {
        value -= log_det(w)?;
    }
    value.is_finite().then_some(Eval { value, rows, heads, blocks })
}

fn solve_newton(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let rhs = -g;
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Some(ch.solve(&rhs));
    }
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = h;
    for i in 0..reg.nrows() {
        reg[(i, i)] += 1e-12 * scale;
    }
    Cholesky::new(reg).map(|ch| ch.solve(&rhs))
}

fn dual_from_rows(p: &BlockSdpProblem, rows: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let inv: Vec<f64> = rows.iter().map(|g| 1.0 / g).collect();
    let total: f64 = inv.iter().sum();
    let lambda: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let (bound, nu) = p.dual_bound(&lambda);
    (lambda, nu, bound)
}

/// Path-following solve of the max-slack problem.
pub fn solve_max_slack(p: &BlockSdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    p.validate()?;
    let lay = build_layout(p);
    let bl = lay.block_len();
    let dim = lay.dim();
    let mut x = DVector::zeros(dim);
    for k in 0..lay.blocks {
        let w0 = CMat::identity(lay.n, lay.n) * Complex64::new(p.power[k] / (2.0 * lay.n as f64), 0.0);
        for (m, v) in herm_basis_coeffs(&w0).into_iter().take(lay.n).enumerate() {
            x[k * bl + m] = v;
        }
    }
    let w_init = lay.blocks_of(&x);
    let start_rows = p.row_values(&w_init);
    x[dim - 1] = start_rows.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;

    let barrier_terms = (p.rows.len() + lay.blocks + lay.blocks * lay.n) as f64;
    let mut tau = {
        let rows: Vec<f64> = start_rows.iter().map(|r| r - x[dim - 1]).collect();
        rows.iter().map(|g| 1.0 / g).sum::<f64>()
    };
    let mut steps = 0;
    let mut cur = barrier(p, &lay, &x, tau).ok_or(CobfError::SdpNonConvergence { beta: f64::NAN })?;
    let mut best_bound = f64::INFINITY;
    let mut best_dual = (vec![0.0; p.rows.len()], vec![0.0; lay.blocks]);

    let finish = |x: &DVector<f64>, status: SdpStatus, bound: f64, dual: (Vec<f64>, Vec<f64>), steps: usize| SdpSolution {
        w: lay.blocks_of(x),
        t: x[dim - 1],
        status,
        lambda: dual.0,
        nu: dual.1,
        dual_bound: bound,
        newton_steps: steps,
    };

    loop {
        // centering
        loop {
            if steps >= opts.max_newton {
                return Ok(finish(&x, SdpStatus::MaxIterations, best_bound, best_dual, steps));
            }
            let mut grad = DVector::zeros(dim);
            grad[dim - 1] = -tau;
            let mut hess = DMatrix::zeros(dim, dim);
            for (g, r) in lay.row_grad.iter().zip(&cur.rows) {
                grad.axpy(-1.0 / r, g, 1.0);
                hess.ger(1.0 / (r * r), g, g, 1.0);
            }
            for k in 0..lay.blocks {
                let h = cur.heads[k];
                let s = match linalg::inverse_pd(&cur.blocks[k]) {
                    Some(s) => s,
                    None => return Ok(finish(&x, SdpStatus::MaxIterations, best_bound, best_dual, steps)),
                };
                let sc = herm_basis_coeffs(&s);
                let hb = logdet_hessian(&s);
                for m in 0..bl {
                    grad[k * bl + m] += lay.trace_coef[m] / h - sc[m];
                    for l in 0..bl {
                        hess[(k * bl + m, k * bl + l)] += lay.trace_coef[m] * lay.trace_coef[l] / (h * h) + hb[(m, l)];
                    }
                }
            }
            let dx = match solve_newton(hess, &grad) {
                Some(d) => d,
                None => return Ok(finish(&x, SdpStatus::MaxIterations, best_bound, best_dual, steps)),
            };
            let decrement = -grad.dot(&dx);
            steps += 1;
            // below the barrier's floating-point resolution no step can make progress
            if decrement / 2.0 <= opts.newton_tol.max(8.0 * f64::EPSILON * cur.value.abs()) {
                break;
            }
            let mut s = 1.0;
            let accepted = loop {
                let trial = &x + &dx * s;
                if trial == x {
                    break None;
                }
                if let Some(e) = barrier(p, &lay, &trial, tau) {
                    if e.value <= cur.value - 0.25 * s * decrement {
                        break Some((trial, e));
                    }
                }
                s *= 0.5;
                if s < 1e-20 {
                    break None;
                }
            };
            match accepted {
                Some((trial, e)) => {
                    x = trial;
                    cur = e;
                }
                None => break,
            }
            if opts.sign_only {
                let (lambda, nu, bound) = dual_from_rows(p, &cur.rows);
                if bound < best_bound {
                    best_bound = bound;
                    best_dual = (lambda, nu);
                }
                if x[dim - 1] > 0.0 || best_bound < 0.0 {
                    return Ok(finish(&x, SdpStatus::SignCertified, best_bound, best_dual, steps));
                }
            }
        }
        let (lambda, nu, bound) = dual_from_rows(p, &cur.rows);
        if bound < best_bound {
            best_bound = bound;
            best_dual = (lambda, nu);
        }
        let t = x[dim - 1];
        if opts.sign_only && (t > 0.0 || best_bound < 0.0) {
            return Ok(finish(&x, SdpStatus::SignCertified, best_bound, best_dual, steps));
        }
        // a centered point is within m / tau of the optimum; the rebuilt dual
        // bound can stall a few ulps of conditioning above it
        if barrier_terms / tau <= opts.tol * (1.0 + t.abs()) {
            return Ok(finish(&x, SdpStatus::Optimal, best_bound, best_dual, steps));
        }
        tau /= opts.mu_factor;
        cur = barrier(p, &lay, &x, tau).expect("interior point stays interior when tau changes");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
    pub gap: f64,
}

impl KktReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.primal_residual <= tol && self.dual_residual <= tol && self.complementarity <= tol && self.gap <= tol
    }
}

/// Residuals of the optimality conditions, scaled by `1 + |t|`.
pub fn kkt_residuals(p: &BlockSdpProblem, sol: &SdpSolution) -> KktReport {
    let scale = 1.0 + sol.t.abs();
    let rows = p.row_values(&sol.w);
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (r, l) in rows.iter().zip(&sol.lambda) {
        primal = primal.max(sol.t - r);
        comp = comp.max(l * (r - sol.t).abs());
    }
    for (k, w) in sol.w.iter().enumerate() {
        let head = p.power[k] - linalg::trace_re(w);
        primal = primal.max(-head).max(-linalg::lambda_min(w));
        comp = comp.max(sol.nu[k] * head.abs());
        let z = p.dual_slack(&sol.lambda, &sol.nu, k);
        comp = comp.max(linalg::trace_product_re(&z, w).abs());
    }
    let mut dual: f64 = (sol.lambda.iter().sum::<f64>() - 1.0).abs();
    for l in &sol.lambda {
        dual = dual.max(-l);
    }
    for (k, n) in sol.nu.iter().enumerate() {
        dual = dual.max(-n).max(-linalg::lambda_min(&p.dual_slack(&sol.lambda, &sol.nu, k)));
    }
    KktReport {
        primal_residual: primal.max(0.0) / scale,
        dual_residual: dual.max(0.0) / scale,
        complementarity: comp / scale,
        gap: (sol.dual_bound - sol.t).abs() / scale,
    }
}

pub fn verify_kkt(p: &BlockSdpProblem, sol: &SdpSolution, tol: f64) -> bool {
    kkt_residuals(p, sol).passes(tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decoupled(k: usize, n: usize, a: &[f64], noise: &[f64]) -> BlockSdpProblem {
        let rows = (0..k)
            .map(|i| SlackRow {
                coeffs: (0..k).map(|j| (j == i).then(|| CMat::identity(n, n) * Complex64::new(a[i], 0.0))).collect(),
                offset: noise[i],
            })
            .collect();
        BlockSdpProblem::new(n, vec![1.0; k], rows).unwrap()
    }

    #[test]
    fn basis_round_trip() {
        let x = [0.5, 2.0, 0.3, -0.7];
        let w = herm_from_params(&x, 2);
        assert_eq!(herm_basis_coeffs(&w)[..2], [0.5, 2.0]);
        let q =
            CMat::from_row_slice(2, 2, &[Complex64::new(1.0, 0.0), Complex64::new(0.2, 0.4), Complex64::new(0.2, -0.4), Complex64::new(3.0, 0.0)]);
        let lin: f64 = herm_basis_coeffs(&q).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lin - linalg::trace_product_re(&q, &w)).abs() < 1e-14);
    }

    #[test]
    fn logdet_hessian_matches_differences() {
        let w = herm_from_params(&[2.0, 1.5, 0.3, -0.2], 2);
        let s = linalg::inverse_pd(&w).unwrap();
        let h = logdet_hessian(&s);
        let base = [2.0, 1.5, 0.3, -0.2];
        let grad = |x: &[f64]| -> Vec<f64> {
            let s = linalg::inverse_pd(&herm_from_params(x, 2)).unwrap();
            herm_basis_coeffs(&s).into_iter().map(|v| -v).collect()
        };
        let eps = 1e-6;
        for m in 0..4 {
            let mut xp = base;
            let mut xm = base;
            xp[m] += eps;
            xm[m] -= eps;
            let (gp, gm) = (grad(&xp), grad(&xm));
            for l in 0..4 {
                let fd = (gp[l] - gm[l]) / (2.0 * eps);
                assert!((fd - h[(m, l)]).abs() < 1e-6, "({m},{l}) {fd} vs {}", h[(m, l)]);
            }
        }
    }

    #[test]
    fn decoupled_optimum() {
        let p = decoupled(3, 2, &[2.0, 0.5, 1.0], &[0.3, 0.1, 0.4]);
        let sol = solve_max_slack(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let expected = [2.0 - 0.3, 0.5 - 0.1, 1.0 - 0.4f64].into_iter().fold(f64::INFINITY, f64::min);
        assert!((sol.t - expected).abs() < 1e-7, "{} vs {expected}", sol.t);
        assert!(verify_kkt(&p, &sol, 1e-6), "{:?}", kkt_residuals(&p, &sol));
        let mut scaled = sol.clone();
        for w in &mut scaled.w {
            *w *= Complex64::new(1.01, 0.0);
        }
        assert!(!verify_kkt(&p, &scaled, 1e-6));
    }

    #[test]
    fn sign_mode_agrees_with_full_solve() {
        for (a, expect_pos) in [(1.0, true), (0.1, false)] {
            let p = decoupled(2, 2, &[a, a], &[0.5, 0.5]);
            let opts = SdpOptions { sign_only: true, ..Default::default() };
            let sol = solve_max_slack(&p, &opts).unwrap();
            assert!(sol.sign_certain());
            assert_eq!(sol.margin() > 0.0, expect_pos);
        }
    }
}
