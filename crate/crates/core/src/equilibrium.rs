//! Deterministic equivalent of the information-plus-noise model.
//!
//! For `M = (σX/√N + A)(σX/√N + A)*` with `n/N → c` and the spectrum of `AA*`
//! converging to `ν`, the limiting spectral measure `μ` has a Stieltjes
//! transform `g` solving
//!
//! ```text
//! g(z) = ∫ dν(t) / ((1 - σ²c g) z - t / (1 - σ²c g) - σ²(1 - c)).
//! ```
//!
//! Off the support, `ω(x) = x(1 - σ²c g)² - σ²(1 - c)(1 - σ²c g)` maps the
//! complement of `supp μ` increasingly onto the admissible set
//! `E = {x ∉ supp ν : Φ'(x) > 0, g_ν(x) > -1/(σ²c)}`, with inverse
//! `Φ(x) = x(1 + σ²c g_ν(x))² + σ²(1 - c)(1 + σ²c g_ν(x))`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;
use crate::measure::AtomicMeasure;

pub const SIGMA_MAX: f64 = 1e3;
/// Points closer than this to a boundary of `E` are treated as outside it.
pub const BOUNDARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub theta: f64,
    #[serde(default = "one")]
    pub multiplicity: usize,
}

fn one() -> usize {
    1
}

impl Spike {
    pub fn new(theta: f64, multiplicity: usize) -> Self {
        Spike { theta, multiplicity }
    }
}

/// Model parameters `(σ, c, ν, Θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    sigma: f64,
    c: f64,
    nu: AtomicMeasure,
    spikes: Vec<Spike>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    sigma: f64,
    c: f64,
    nu: AtomicMeasure,
    #[serde(default)]
    spikes: Vec<Spike>,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        ModelParams::new(raw.sigma, raw.c, raw.nu, raw.spikes)
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams { sigma: p.sigma, c: p.c, nu: p.nu, spikes: p.spikes }
    }
}

impl ModelParams {
    /// Spikes may be given in any order; they are stored by decreasing `θ`.
    /// `σ = 0` is accepted and gives the noiseless model.
    pub fn new(sigma: f64, c: f64, nu: AtomicMeasure, mut spikes: Vec<Spike>) -> Result<Self> {
        if !(0.0..=SIGMA_MAX).contains(&sigma) {
            return Err(Error::config(format!("sigma = {sigma} outside [0, {SIGMA_MAX}]")));
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::config(format!("c = {c} outside (0, 1]")));
        }
        spikes.sort_by(|a, b| b.theta.total_cmp(&a.theta));
        for s in &spikes {
            if !s.theta.is_finite() || s.theta < 0.0 {
                return Err(Error::config(format!("spike theta = {} must be finite and >= 0", s.theta)));
            }
            if s.multiplicity == 0 {
                return Err(Error::config(format!("spike theta = {} has multiplicity 0", s.theta)));
            }
            if nu.in_support(s.theta) {
                return Err(Error::config(format!("spike theta = {} lies in supp(nu)", s.theta)));
            }
        }
        for pair in spikes.windows(2) {
            if pair[0].theta == pair[1].theta {
                return Err(Error::config(format!("duplicate spike theta = {}", pair[0].theta)));
            }
        }
        Ok(ModelParams { sigma, c, nu, spikes })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn nu(&self) -> &AtomicMeasure {
        &self.nu
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    /// Total spike multiplicity `r`.
    pub fn spike_rank(&self) -> usize {
        self.spikes.iter().map(|s| s.multiplicity).sum()
    }

    /// Same model with a different aspect ratio (finite-N `c_N`).
    pub fn with_c(&self, c: f64) -> Result<Self> {
        ModelParams::new(self.sigma, c, self.nu.clone(), self.spikes.clone())
    }

    pub fn with_spikes(&self, spikes: Vec<Spike>) -> Result<Self> {
        ModelParams::new(self.sigma, self.c, self.nu.clone(), spikes)
    }

    /// `σ²c`.
    pub fn kappa(&self) -> f64 {
        self.sigma * self.sigma * self.c
    }

    /// `σ²(1 - c)`.
    fn shift(&self) -> f64 {
        self.sigma * self.sigma * (1.0 - self.c)
    }

    /// Extension beyond the extreme atoms used when scanning for `E`.
    pub fn hull_extension(&self) -> f64 {
        10.0 * (1.0 + self.sigma * self.sigma)
    }

    pub fn phi(&self, x: f64) -> Result<f64> {
        let g = self.nu.stieltjes_real(x)?;
        let b = 1.0 + self.kappa() * g;
        Ok(x * b * b + self.shift() * b)
    }

    pub fn phi_prime(&self, x: f64) -> Result<f64> {
        let g = self.nu.stieltjes_real(x)?;
        let dg = self.nu.stieltjes_derivative(x)?;
        let k = self.kappa();
        let b = 1.0 + k * g;
        Ok(b * b + 2.0 * x * k * dg * b + self.shift() * k * dg)
    }

    /// Margin of the condition `g_ν(x) > -1/(σ²c)`; infinite when `σ = 0`.
    fn g_margin(&self, g: f64) -> f64 {
        let k = self.kappa();
        if k == 0.0 {
            f64::INFINITY
        } else {
            g + 1.0 / k
        }
    }

    /// Membership in `E` with strict inequalities; points within
    /// [`BOUNDARY_TOL`] of either boundary are excluded.
    pub fn is_admissible(&self, x: f64) -> Result<bool> {
        let dphi = self.phi_prime(x)?;
        let g = self.nu.stieltjes_real(x)?;
        Ok(dphi > BOUNDARY_TOL && self.g_margin(g) > BOUNDARY_TOL)
    }

    /// The scan predicate: the same conditions without the boundary margin.
    fn admissible_strict(&self, x: f64) -> Result<bool> {
        let dphi = self.phi_prime(x)?;
        let g = self.nu.stieltjes_real(x)?;
        Ok(dphi > 0.0 && self.g_margin(g) > 0.0)
    }

    /// Right-hand side of the fixed-point equation for `g_μ(z)`.
    pub fn fixed_point_map(&self, z: Complex64, g: Complex64) -> Complex64 {
        self.fixed_point_map_with_derivative(z, g).0
    }

    /// `F(g)` and `dF/dg`.
    fn fixed_point_map_with_derivative(&self, z: Complex64, g: Complex64) -> (Complex64, Complex64) {
        let k = self.kappa();
        let a = 1.0 - k * g;
        let s = self.shift();
        let mut f = Complex64::new(0.0, 0.0);
        let mut df = Complex64::new(0.0, 0.0);
        for (t, w) in self.nu.atoms() {
            let d = a * z - t / a - s;
            let inv = 1.0 / d;
            f += w * inv;
            df += w * (z + t / (a * a)) * inv * inv;
        }
        (f, k * df)
    }

    /// Subordination function at complex `z` given `g = g_μ(z)`.
    pub fn omega_complex(&self, z: Complex64, g: Complex64) -> Complex64 {
        let a = 1.0 - self.kappa() * g;
        z * a * a - self.shift() * a
    }

    /// Solves for `g_μ(z)`, `Im z ≠ 0`.
    ///
    /// Damped fixed-point iteration from `1/z`; if that stalls (typically for
    /// `z` close to the real axis), the solution is continued in `Im z` from a
    /// height where the iteration contracts, polishing with Newton steps.
    pub fn solve_g_mu(&self, z: Complex64, opts: &SolverOptions) -> Result<Complex64> {
        if z.im == 0.0 || !z.re.is_finite() || !z.im.is_finite() {
            return Err(Error::domain(format!("solve_g_mu needs Im z != 0, got {z}")));
        }
        if z.im < 0.0 {
            return self.solve_g_mu(z.conj(), opts).map(|g| g.conj());
        }

        let quick = opts.max_iter.min(QUICK_ITER);
        let (g, res) = self.damped_iteration(z, 1.0 / z, quick, opts);
        if res.is_none() {
            return Ok(g);
        }
        if let Some(g) = self.continuation(z, opts) {
            return Ok(g);
        }
        let rest = opts.max_iter.saturating_sub(quick);
        match self.damped_iteration(z, g, rest, opts) {
            (g, None) => Ok(g),
            (_, Some(residual)) => Err(Error::Solver { iterations: opts.max_iter, residual }),
        }
    }

    fn converged(residual: f64, g: Complex64, tol: f64) -> bool {
        residual < tol * g.norm().max(1.0)
    }

    /// Returns the final iterate and `None` on convergence, or the last
    /// residual otherwise.
    fn damped_iteration(
        &self,
        z: Complex64,
        mut g: Complex64,
        iters: usize,
        opts: &SolverOptions,
    ) -> (Complex64, Option<f64>) {
        let mut residual = f64::INFINITY;
        for _ in 0..iters {
            let f = self.fixed_point_map(z, g);
            residual = (g - f).norm();
            if !residual.is_finite() {
                return (g, Some(residual));
            }
            if Self::converged(residual, g, opts.tol) {
                return (g, None);
            }
            g = (1.0 - opts.damping) * g + opts.damping * f;
            g = reflect_lower(g);
        }
        (g, Some(residual))
    }

    fn newton(&self, z: Complex64, mut g: Complex64, opts: &SolverOptions) -> Option<Complex64> {
        for _ in 0..NEWTON_ITER {
            let (f, df) = self.fixed_point_map_with_derivative(z, g);
            let h = g - f;
            let residual = h.norm();
            if !residual.is_finite() {
                return None;
            }
            if Self::converged(residual, g, opts.tol) {
                return Some(g);
            }
            let step = h / (1.0 - df);
            if !step.re.is_finite() || !step.im.is_finite() {
                return None;
            }
            g = reflect_lower(g - step);
        }
        let residual = (g - self.fixed_point_map(z, g)).norm();
        Self::converged(residual, g, opts.tol).then_some(g)
    }

    fn continuation(&self, z: Complex64, opts: &SolverOptions) -> Option<Complex64> {
        let scale = 1.0 + self.sigma * self.sigma + self.nu.max_location();
        let start = Complex64::new(z.re, z.im.max(scale));
        let (mut g, res) =
            self.damped_iteration(start, 1.0 / start, opts.max_iter.min(20 * QUICK_ITER), opts);
        if res.is_some() {
            return None;
        }
        let mut eta = start.im;
        let mut ratio: f64 = 0.5;
        while eta > z.im {
            let next = (eta * ratio).max(z.im);
            match self.newton(Complex64::new(z.re, next), g, opts) {
                Some(g_next) => {
                    g = g_next;
                    eta = next;
                    ratio = 0.5;
                }
                None => {
                    ratio = ratio.sqrt();
                    if ratio > 1.0 - 1e-6 {
                        return None;
                    }
                }
            }
        }
        Some(g)
    }

    /// `E`: maximal open subintervals of each gap of `ν` on which both
    /// admissibility conditions hold. Components touching the scan limits
    /// are reported with infinite endpoints.
    pub fn admissible_set(&self, opts: &ScanOptions) -> Result<Vec<Interval>> {
        let ext = opts.extension.unwrap_or_else(|| self.hull_extension());
        let gaps = self.nu.gaps(ext);
        let last = gaps.len() - 1;
        let mut out = Vec::new();
        for (i, gap) in gaps.iter().enumerate() {
            // The outer gaps are open towards ±∞; all other endpoints are atoms.
            let left_is_atom = i != 0;
            let right_is_atom = i != last;
            let lo = gap.lo;
            let hi = if gap.hi.is_finite() { gap.hi } else { gap.lo + ext };
            let pts = scan_points(lo, hi, left_is_atom, right_is_atom, opts.grid);
            let flags = pts.iter().map(|&x| self.admissible_strict(x)).collect::<Result<Vec<bool>>>()?;

            let mut start: Option<f64> = None;
            for (j, (&x, &ok)) in pts.iter().zip(&flags).enumerate() {
                if ok && start.is_none() {
                    start = Some(if j == 0 {
                        if left_is_atom {
                            lo
                        } else {
                            f64::NEG_INFINITY
                        }
                    } else {
                        self.bisect_boundary(pts[j - 1], x)?
                    });
                }
                let closes_here = j + 1 == pts.len() || !flags[j + 1];
                if ok && closes_here {
                    let end = if j + 1 == pts.len() {
                        if right_is_atom {
                            hi
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        self.bisect_boundary(x, pts[j + 1])?
                    };
                    out.push(Interval::new(start.take().unwrap(), end));
                }
            }
        }
        Ok(out)
    }

    /// Locates the switch of the admissibility predicate between `a` and `b`.
    fn bisect_boundary(&self, mut a: f64, mut b: f64) -> Result<f64> {
        let fa = self.admissible_strict(a)?;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a.min(b) || mid >= a.max(b) {
                break;
            }
            if self.admissible_strict(mid)? == fa {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// `Φ` at an endpoint of an `E`-component. Atom endpoints only occur in
    /// the noiseless limit, where `Φ` is the identity.
    fn phi_at_endpoint(&self, x: f64, towards: f64) -> Result<f64> {
        if x.is_infinite() {
            return Ok(x);
        }
        if self.sigma == 0.0 {
            return Ok(x);
        }
        if self.nu.in_support(x) {
            let h = 1e-15 * (1.0 + x.abs());
            return self.phi(x + h.copysign(towards - x));
        }
        self.phi(x)
    }

    /// Bulk support of `μ` and the matching between its gaps and `E`.
    pub fn support(&self, opts: &ScanOptions) -> Result<SupportProfile> {
        let admissible = self.admissible_set(opts)?;
        let mut gap_map = Vec::with_capacity(admissible.len());
        for comp in &admissible {
            let lo = self.phi_at_endpoint(comp.lo, comp.hi)?;
            let hi = self.phi_at_endpoint(comp.hi, comp.lo)?;
            gap_map.push(GapPair { gap: Interval::new(lo, hi), component: *comp });
        }
        gap_map.sort_by(|a, b| a.gap.lo.total_cmp(&b.gap.lo));

        let mut support = Vec::new();
        let mut cursor = 0.0f64;
        for pair in &gap_map {
            if pair.gap.lo >= cursor {
                support.push(Interval::new(cursor, pair.gap.lo));
            }
            cursor = cursor.max(pair.gap.hi);
        }
        if cursor.is_finite() {
            // Only reachable if the rightmost component was not detected.
            return Err(Error::Bracket("support has no unbounded right gap".into()));
        }
        Ok(SupportProfile { admissible, support, gap_map })
    }
}

const QUICK_ITER: usize = 2_000;
const NEWTON_ITER: usize = 60;

fn reflect_lower(g: Complex64) -> Complex64 {
    if g.im > 0.0 {
        Complex64::new(g.re, -g.im)
    } else {
        g
    }
}

/// Uniform grid on `[lo, hi]` plus geometric clusters next to atom endpoints,
/// where boundaries of `E` can sit arbitrarily close to the atom for small `σ`.
/// Atom endpoints themselves are excluded.
fn scan_points(lo: f64, hi: f64, left_is_atom: bool, right_is_atom: bool, grid: usize) -> Vec<f64> {
    let width = hi - lo;
    let mut pts = Vec::with_capacity(grid + 40);
    for i in 0..=grid + 1 {
        let x = lo + width * (i as f64) / ((grid + 1) as f64);
        pts.push(x);
    }
    if !left_is_atom {
        pts[0] = lo;
    }
    pts[grid + 1] = hi;
    for k in 1..=16 {
        let h = width * 10f64.powi(-k);
        if left_is_atom && lo + h > lo {
            pts.push(lo + h);
        }
        if right_is_atom && hi - h < hi {
            pts.push(hi - h);
        }
    }
    pts.retain(|&x| !(left_is_atom && x <= lo) && !(right_is_atom && x >= hi));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-12, max_iter: 100_000, damping: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Uniform grid points per gap of `ν`.
    pub grid: usize,
    /// Override for the scan extension beyond the extreme atoms.
    pub extension: Option<f64>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { grid: 4096, extension: None }
    }
}

/// A gap of `supp μ` together with the component of `E` that `Φ` maps onto it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPair {
    pub gap: Interval,
    pub component: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportProfile {
    /// Components of `E`.
    pub admissible: Vec<Interval>,
    /// Closed support intervals of `μ`, sorted.
    pub support: Vec<Interval>,
    pub gap_map: Vec<GapPair>,
}

impl SupportProfile {
    pub fn gap_containing(&self, x: f64) -> Option<&GapPair> {
        self.gap_map.iter().find(|p| p.gap.contains_open(x))
    }

    pub fn distance_to_support(&self, x: f64) -> f64 {
        self.support.iter().map(|iv| iv.distance(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn right_edge(&self) -> f64 {
        self.support.last().map_or(0.0, |iv| iv.hi)
    }

    pub fn left_edge(&self) -> f64 {
        self.support.first().map_or(0.0, |iv| iv.lo)
    }
}

/// Model parameters with their support profile, for evaluations on gaps.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    params: ModelParams,
    profile: SupportProfile,
    solver: SolverOptions,
}

impl Equilibrium {
    pub fn new(params: ModelParams, scan: &ScanOptions) -> Result<Self> {
        let profile = params.support(scan)?;
        Ok(Equilibrium { params, profile, solver: SolverOptions::default() })
    }

    pub fn with_solver(mut self, solver: SolverOptions) -> Self {
        self.solver = solver;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn profile(&self) -> &SupportProfile {
        &self.profile
    }

    pub fn solver(&self) -> &SolverOptions {
        &self.solver
    }

    pub fn g_mu(&self, z: Complex64) -> Result<Complex64> {
        self.params.solve_g_mu(z, &self.solver)
    }

    fn gap_for(&self, x: f64) -> Result<&GapPair> {
        self.profile
            .gap_containing(x)
            .ok_or_else(|| Error::domain(format!("x = {x} is not in a gap of the limiting support")))
    }

    /// `ω(x)` by inverting `Φ` on the matched component of `E`.
    pub fn omega_on_gap(&self, x: f64) -> Result<f64> {
        let pair = *self.gap_for(x)?;
        let p = &self.params;
        let comp = pair.component;
        if p.sigma() == 0.0 {
            return Ok(x);
        }

        let step0 = 1.0 + x.abs() + p.sigma() * p.sigma();
        let mut lo = comp.lo;
        let mut hi = comp.hi;
        if lo.is_infinite() {
            let mut step = step0;
            lo = hi.min(x) - step;
            let mut tries = 0;
            while p.phi(lo)? >= x {
                step *= 2.0;
                lo = hi.min(x) - step;
                tries += 1;
                if tries > 200 {
                    return Err(Error::Bracket(format!("no lower bracket for omega({x})")));
                }
            }
        }
        if hi.is_infinite() {
            let mut step = step0;
            hi = lo.max(x).max(0.0) + step;
            let mut tries = 0;
            while p.phi(hi)? <= x {
                step *= 2.0;
                hi = lo.max(x).max(0.0) + step;
                tries += 1;
                if tries > 200 {
                    return Err(Error::Bracket(format!("no upper bracket for omega({x})")));
                }
            }
        }

        // Φ is increasing on the component; endpoints are never evaluated.
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if p.phi(mid)? < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let w = 0.5 * (lo + hi);
        let err = (p.phi(w)? - x).abs();
        if err > 1e-10 * (1.0 + x.abs()) {
            return Err(Error::Bracket(format!(
                "omega({x}): inversion residual {err:e} in component {}",
                comp
            )));
        }
        Ok(w)
    }

    /// `g_μ(x) = g_ν(ω) / (1 + σ²c g_ν(ω))` on a gap.
    pub fn g_mu_on_gap(&self, x: f64) -> Result<f64> {
        let w = self.omega_on_gap(x)?;
        let gn = self.params.nu().stieltjes_real(w)?;
        Ok(gn / (1.0 + self.params.kappa() * gn))
    }

    /// `ω(x)` from the defining formula evaluated at `g_μ(x)`.
    pub fn omega_direct(&self, x: f64) -> Result<f64> {
        let g = self.g_mu_on_gap(x)?;
        let a = 1.0 - self.params.kappa() * g;
        Ok(x * a * a - self.params.shift() * a)
    }

    /// `ω'(x) = 1 / Φ'(ω(x))`.
    pub fn omega_prime_on_gap(&self, x: f64) -> Result<f64> {
        let w = self.omega_on_gap(x)?;
        Ok(1.0 / self.params.phi_prime(w)?)
    }

    /// Density by Stieltjes inversion, `-Im g_μ(x + iη) / π`. Points where
    /// the solver fails are `None`.
    pub fn density_grid(&self, xs: &[f64], eta: f64) -> Result<Vec<Option<f64>>> {
        if !(eta > 0.0) {
            return Err(Error::domain(format!("eta = {eta} must be positive")));
        }
        Ok(xs
            .iter()
            .map(|&x| self.g_mu(Complex64::new(x, eta)).ok().map(|g| -g.im / std::f64::consts::PI))
            .collect())
    }
}
