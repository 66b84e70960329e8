//! Polyblock outer approximation for maximizing a nondecreasing function
//! over a compact normal set.

use std::cmp::Ordering;

use crate::error::{CobfError, Result};

/// Margins at or above `-MEMBER_TOL` count as membership.
pub const MEMBER_TOL: f64 = 1e-12;
const STALL_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex(Vec<f64>);

impl Vertex {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(CobfError::InvalidConfig(format!("vertex coordinates must be finite and nonnegative: {coords:?}")));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `self <= other` componentwise.
    pub fn dominated_by(&self, other: &Vertex) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn scaled(&self, beta: f64) -> Vertex {
        Vertex(self.0.iter().map(|c| c * beta).collect())
    }

    fn lex_cmp(&self, other: &Vertex) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

/// Proper vertices of a polyblock.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VertexSet {
    vertices: Vec<Vertex>,
}

impl VertexSet {
    pub fn single(v: Vertex) -> Self {
        Self { vertices: vec![v] }
    }

    /// Build from arbitrary vertices, pruning dominated ones.
    pub fn from_vertices(vs: Vec<Vertex>) -> Self {
        let mut set = Self { vertices: Vec::new() };
        for v in vs {
            set.insert(v);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.iter()
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        self.vertices.iter().any(|u| u == v)
    }

    /// Whether `x` lies in the union of boxes.
    pub fn covers(&self, x: &[f64]) -> bool {
        self.vertices.iter().any(|v| x.iter().zip(&v.0).all(|(a, b)| a <= b))
    }

    pub fn is_proper(&self) -> bool {
        for (a, u) in self.vertices.iter().enumerate() {
            for (b, w) in self.vertices.iter().enumerate() {
                if a != b && u.dominated_by(w) {
                    return false;
                }
            }
        }
        true
    }

    /// Add `v` unless an existing vertex dominates it; drop the vertices it dominates.
    fn insert(&mut self, v: Vertex) {
        if self.vertices.iter().any(|u| v.dominated_by(u)) {
            return;
        }
        self.vertices.retain(|u| !u.dominated_by(&v));
        self.vertices.push(v);
    }

    fn remove(&mut self, v: &Vertex) {
        self.vertices.retain(|u| u != v);
    }
}

/// Argmax of `f` over the set; equal values go to the lexicographically largest vertex.
pub fn select_best_vertex(set: &VertexSet, f: &dyn Fn(&[f64]) -> f64) -> Result<(Vertex, f64)> {
    let mut best: Option<(&Vertex, f64)> = None;
    for v in set.iter() {
        let val = f(v.coords());
        best = match best {
            None => Some((v, val)),
            Some((b, bv)) => {
                if val > bv || (val == bv && v.lex_cmp(b) == Ordering::Greater) {
                    Some((v, val))
                } else {
                    Some((b, bv))
                }
            }
        };
    }
    best.map(|(v, val)| (v.clone(), val)).ok_or(CobfError::EmptyVertexSet)
}

/// Signed membership test for a normal set.
pub trait MembershipOracle {
    fn margin(&self, x: &[f64]) -> Result<f64>;

    fn is_member(&self, x: &[f64]) -> Result<bool> {
        Ok(self.margin(x)? >= -MEMBER_TOL)
    }
}

impl<F: Fn(&[f64]) -> Result<f64>> MembershipOracle for F {
    fn margin(&self, x: &[f64]) -> Result<f64> {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayHit {
    /// Largest `beta` confirmed feasible.
    pub beta: f64,
    /// Smallest `beta` known infeasible, or `beta` itself when the box cap binds.
    pub beta_upper: f64,
    pub point: Vertex,
    pub oracle_calls: usize,
}

/// Box-capped bracket `min_i cap_i / v_i` for the ray through `v`.
pub fn beta_cap(v: &Vertex, box_cap: &Vertex) -> f64 {
    v.0.iter().zip(&box_cap.0).filter(|(a, _)| **a > 0.0).map(|(a, c)| c / a).fold(f64::INFINITY, f64::min)
}

/// Bisection for `sup { beta : beta v in D, beta v <= box_cap }`. If the set
/// is not normal along the ray, the result still brackets a membership flip
/// of width `rel_tol * beta_upper`.
pub fn ray_intersection(v: &Vertex, oracle: &dyn MembershipOracle, box_cap: &Vertex, rel_tol: f64) -> Result<RayHit> {
    if v.0.iter().all(|c| *c == 0.0) {
        return Err(CobfError::InvalidConfig("ray direction must be nonzero".into()));
    }
    let cap = beta_cap(v, box_cap);
    let mut calls = 1;
    if oracle.is_member(v.scaled(cap).coords())? {
        return Ok(RayHit { beta: cap, beta_upper: cap, point: v.scaled(cap), oracle_calls: calls });
    }
    let (mut lo, mut hi) = (0.0, cap);
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        calls += 1;
        if oracle.is_member(v.scaled(mid).coords())? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(RayHit { beta: lo, beta_upper: hi, point: v.scaled(lo), oracle_calls: calls })
}

/// `v*` with coordinate `i` lowered to `cut_i`, for each `i`.
pub fn new_vertices(best: &Vertex, cut: &Vertex) -> Result<Vec<Vertex>> {
    if !cut.dominated_by(best) {
        return Err(CobfError::DominanceViolated);
    }
    Ok((0..best.dim())
        .map(|i| {
            let mut c = best.0.clone();
            c[i] = cut.0[i];
            Vertex(c)
        })
        .collect())
}

/// Replace `best` by `new` and prune. New vertices equal to `best` (from a
/// coordinate where no cut happened) are skipped, since the removed region
/// `{cut < x <= best}` is empty along that coordinate anyway.
pub fn update_vertex_set(set: &VertexSet, best: &Vertex, new: Vec<Vertex>) -> VertexSet {
    let mut out = set.clone();
    out.remove(best);
    for v in new {
        if &v != best {
            out.insert(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoaIteration {
    pub best: Vertex,
    pub boundary: Vertex,
    pub incumbent: Vertex,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
    pub vertex_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoaStatus {
    Converged,
    MaxIterations,
    /// The best vertex already lies on the boundary to within rounding.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoaTrace {
    pub iterations: Vec<PoaIteration>,
    pub status: PoaStatus,
    pub oracle_calls: usize,
}

impl PoaTrace {
    pub fn upper(&self) -> f64 {
        self.iterations.last().map(|it| it.upper).unwrap_or(f64::INFINITY)
    }

    pub fn lower(&self) -> f64 {
        self.iterations.last().map(|it| it.lower).unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoaOptions {
    pub delta: f64,
    pub max_iters: usize,
    pub ray_tol: f64,
}

impl Default for PoaOptions {
    fn default() -> Self {
        Self { delta: 1e-3, max_iters: 200, ray_tol: 1e-6 }
    }
}

/// Stepwise form of the outer approximation, so callers can inspect the
/// polyblock between updates.
pub struct PoaState<'a> {
    f: &'a dyn Fn(&[f64]) -> f64,
    oracle: &'a dyn MembershipOracle,
    box_cap: Vertex,
    ray_tol: f64,
    pub vertices: VertexSet,
    best: Vertex,
    upper: f64,
    hit: RayHit,
    incumbent: Vertex,
    lower: f64,
    pub oracle_calls: usize,
}

impl<'a> PoaState<'a> {
    pub fn new(f: &'a dyn Fn(&[f64]) -> f64, oracle: &'a dyn MembershipOracle, initial: Vertex, ray_tol: f64) -> Result<Self> {
        let upper = f(initial.coords());
        let hit = ray_intersection(&initial, oracle, &initial, ray_tol)?;
        let lower = f(hit.point.coords());
        Ok(Self {
            f,
            oracle,
            box_cap: initial.clone(),
            ray_tol,
            vertices: VertexSet::single(initial.clone()),
            best: initial,
            upper,
            incumbent: hit.point.clone(),
            oracle_calls: hit.oracle_calls,
            hit,
            lower,
        })
    }

    pub fn record(&self) -> PoaIteration {
        PoaIteration {
            best: self.best.clone(),
            boundary: self.hit.point.clone(),
            incumbent: self.incumbent.clone(),
            upper: self.upper,
            lower: self.lower,
            gap: (self.upper - self.lower).max(0.0),
            vertex_count: self.vertices.len(),
        }
    }

    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }

    /// True when no coordinate of the best vertex can be cut.
    pub fn stalled(&self) -> bool {
        let scale = self.best.0.iter().cloned().fold(1.0, f64::max);
        self.best.0.iter().all(|b| b * (1.0 - self.hit.beta_upper.min(1.0)) < STALL_REL * scale)
    }

    pub fn step(&mut self) -> Result<()> {
        // cut at the infeasible end of the bracket so no point of D is removed
        let cut = self.best.scaled(self.hit.beta_upper.min(1.0));
        let new = new_vertices(&self.best, &cut)?;
        self.vertices = update_vertex_set(&self.vertices, &self.best, new);
        let (best, upper) = select_best_vertex(&self.vertices, self.f)?;
        // rounding in f must not let the bound creep upward
        self.upper = upper.min(self.upper);
        self.best = best;
        self.hit = ray_intersection(&self.best, self.oracle, &self.box_cap, self.ray_tol)?;
        self.oracle_calls += self.hit.oracle_calls;
        let candidate = (self.f)(self.hit.point.coords());
        if candidate > self.lower {
            self.lower = candidate;
            self.incumbent = self.hit.point.clone();
        }
        Ok(())
    }
}

pub fn run_poa(f: &dyn Fn(&[f64]) -> f64, oracle: &dyn MembershipOracle, initial: Vertex, opts: &PoaOptions) -> Result<PoaTrace> {
    let mut state = PoaState::new(f, oracle, initial, opts.ray_tol)?;
    let mut iterations = vec![state.record()];
    let mut status = PoaStatus::MaxIterations;
    for n in 0..=opts.max_iters {
        if !(state.gap() > opts.delta) {
            status = PoaStatus::Converged;
            break;
        }
        if state.stalled() {
            status = PoaStatus::Stalled;
            break;
        }
        if n == opts.max_iters {
            break;
        }
        state.step()?;
        iterations.push(state.record());
    }
    Ok(PoaTrace { iterations, status, oracle_calls: state.oracle_calls })
}
