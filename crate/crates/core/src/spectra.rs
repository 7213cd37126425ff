//! Eigen-analysis of sampled matrices and the empirical side of each limit
//! statement: outlier eigenvalues, spike projections, exact separation,
//! support exclusion and the resolvent diagonal.

use faer::{c64, Mat, MatRef, Side};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::ASpec;
use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::spikes::{OutlierSet, SpikePrediction};

/// Tolerance on `‖M - M*‖_max / max(1, ‖M‖_max)` accepted by [`eig_h`].
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Eigendecomposition with eigenvalues in descending order; column `i` of
/// `vectors` belongs to `values[i]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Mat<c64>,
}

impl Eigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `λ_i` with 1-based `i` and the conventions `λ_0 = +∞`, `λ_{n+1} = -∞`.
    pub fn lambda(&self, i: usize) -> f64 {
        if i == 0 {
            f64::INFINITY
        } else if i > self.values.len() {
            f64::NEG_INFINITY
        } else {
            self.values[i - 1]
        }
    }

    /// `Σ_v |⟨v, ξ_i⟩|²` over the given orthonormal family.
    pub fn projection_norm(&self, i: usize, basis: &[Vec<c64>]) -> f64 {
        basis
            .iter()
            .map(|v| {
                let mut dot = c64::new(0.0, 0.0);
                for (p, vp) in v.iter().enumerate() {
                    dot += vp.conj() * self.vectors[(p, i)];
                }
                dot.norm_sqr()
            })
            .sum()
    }
}

/// Hermitian eigendecomposition, eigenvalues descending.
pub fn eig_h(m: MatRef<'_, c64>) -> Result<Eigen> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Linalg(format!("matrix is {}x{}, not square", n, m.ncols())));
    }
    let mut scale = 1.0f64;
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::Linalg(format!("non-finite entry at ({i}, {j})")));
            }
            scale = scale.max(v.norm());
            asym = asym.max((v - m[(j, i)].conj()).norm());
        }
    }
    if asym > HERMITIAN_TOL * scale {
        return Err(Error::Linalg(format!("matrix is not Hermitian (asymmetry {asym:e})")));
    }
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Linalg(format!("Hermitian eigensolver failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let values = (0..n).rev().map(|k| s[k].re).collect();
    let vectors = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    Ok(Eigen { values, vectors })
}

/// Squared projections of the outlier eigenvectors of spike `pred` (taken by
/// rank) onto the eigenspace of `AA*` belonging to spike `onto`.
pub fn spike_projection(eig: &Eigen, a: &ASpec, pred: &SpikePrediction, onto: usize) -> Result<Vec<f64>> {
    let ranks = pred.rank_indices();
    if ranks.end > eig.dim() {
        return Err(Error::config(format!(
            "rank range {:?} exceeds dimension {}",
            pred.rank_range,
            eig.dim()
        )));
    }
    if onto >= a.spike_blocks.len() {
        return Err(Error::config(format!("no spike with index {onto}")));
    }
    let basis = a.spike_basis(onto);
    Ok(ranks.map(|i| eig.projection_norm(i, &basis)).collect())
}

/// `Σ_p ‖P_{Ker(α_l - AA*)} ξ_p‖²` over the outlier eigenvectors of spike `pred`.
pub fn aggregate_projection(eig: &Eigen, a: &ASpec, pred: &SpikePrediction, onto: usize) -> Result<f64> {
    Ok(spike_projection(eig, a, pred, onto)?.iter().sum())
}

/// `Σ_q |⟨u_q, ξ_i⟩|² - 1` over a full eigenbasis `u_q` of `AA*`.
pub fn completeness_defect(eig: &Eigen, a: &ASpec, i: usize) -> f64 {
    let basis: Vec<Vec<c64>> = (0..a.rows()).map(|q| a.aa_eigenvector(q)).collect();
    eig.projection_norm(i, &basis) - 1.0
}

/// Both sides of `Tr[h(M) f(AA*)] = Σ_{p,v} |⟨v, ξ_p⟩|²` with `h` the spectral
/// projector of `M` on the given ranks and `f` the projector on the kernel
/// of spike `onto`. The trace side forms both projectors as dense matrices.
pub fn trace_identity(
    eig: &Eigen,
    a: &ASpec,
    ranks: std::ops::Range<usize>,
    onto: usize,
) -> Result<(f64, f64)> {
    let n = eig.dim();
    if ranks.end > n || onto >= a.spike_blocks.len() {
        return Err(Error::config("trace identity: rank range or spike index out of bounds"));
    }
    let basis = a.spike_basis(onto);
    let projection: f64 = ranks.clone().map(|i| eig.projection_norm(i, &basis)).sum();

    let h = Mat::<c64>::from_fn(n, n, |p, q| {
        ranks.clone().map(|i| eig.vectors[(p, i)] * eig.vectors[(q, i)].conj()).sum()
    });
    let f = Mat::<c64>::from_fn(n, n, |p, q| basis.iter().map(|v| v[p] * v[q].conj()).sum());
    let mut trace = c64::new(0.0, 0.0);
    for p in 0..n {
        for q in 0..n {
            trace += h[(p, q)] * f[(q, p)];
        }
    }
    Ok((projection, trace.re))
}

/// Spectral summary of one draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSample {
    pub eigenvalues: Vec<f64>,
    /// Per spike (in spike order): projections of its outlier eigenvectors
    /// onto its own eigenspace of `AA*`.
    pub projections: Vec<Vec<f64>>,
    pub cross_projections: Vec<CrossProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossProjection {
    pub from: usize,
    pub onto: usize,
    pub values: Vec<f64>,
}

impl SpectralSample {
    pub fn analyze(eig: &Eigen, a: &ASpec, preds: &[SpikePrediction]) -> Result<Self> {
        let mut projections = Vec::with_capacity(preds.len());
        let mut cross_projections = Vec::new();
        for (j, pred) in preds.iter().enumerate() {
            projections.push(spike_projection(eig, a, pred, j)?);
            for l in (0..preds.len()).filter(|&l| l != j) {
                cross_projections.push(CrossProjection {
                    from: j,
                    onto: l,
                    values: spike_projection(eig, a, pred, l)?,
                });
            }
        }
        Ok(SpectralSample { eigenvalues: eig.values.clone(), projections, cross_projections })
    }

    /// Number of eigenvalues in the open interval `(lo, hi)`.
    pub fn count_in(&self, lo: f64, hi: f64) -> usize {
        count_in(&self.eigenvalues, lo, hi)
    }
}

pub fn count_in(values: &[f64], lo: f64, hi: f64) -> usize {
    values.iter().filter(|&&v| v > lo && v < hi).count()
}

/// `[x, y]` mapped through `ω`, with the index `i_N` read off `AA*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationPlan {
    pub x: f64,
    pub y: f64,
    pub omega_x: f64,
    pub omega_y: f64,
    /// Number of eigenvalues of `AA*` above `ω(y)`.
    pub i_n: usize,
    /// False when `[ω(x), ω(y)]` meets the spectrum of `AA*`.
    pub assumption_holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparationOutcome {
    /// `λ_{i_N + 1}(M) < x`.
    pub below: bool,
    /// `λ_{i_N}(M) > y`.
    pub above: bool,
}

impl SeparationOutcome {
    pub fn separated(&self) -> bool {
        self.below && self.above
    }
}

/// Maps `[x, y]` through `ω` once; independent of the draw.
pub fn separation_plan(eq: &Equilibrium, a: &ASpec, x: f64, y: f64) -> Result<SeparationPlan> {
    if !(x < y) {
        return Err(Error::config(format!("separation interval [{x}, {y}] is empty")));
    }
    let profile = eq.profile();
    match (profile.gap_containing(x), profile.gap_containing(y)) {
        (Some(gx), Some(gy)) if gx == gy => {}
        _ => {
            return Err(Error::config(format!(
                "[{x}, {y}] is not inside a single gap of the limiting support"
            )))
        }
    }
    let omega_x = eq.omega_on_gap(x)?;
    let omega_y = eq.omega_on_gap(y)?;
    let gammas = a.aa_eigenvalues_desc();
    let i_n = gammas.iter().filter(|&&g| g > omega_y).count();
    let next = gammas.get(i_n).copied().unwrap_or(f64::NEG_INFINITY);
    Ok(SeparationPlan { x, y, omega_x, omega_y, i_n, assumption_holds: next < omega_x })
}

/// Evaluates the separation booleans for one draw.
pub fn exact_separation_check(eig: &Eigen, plan: &SeparationPlan) -> SeparationOutcome {
    SeparationOutcome { below: eig.lambda(plan.i_n + 1) < plan.x, above: eig.lambda(plan.i_n) > plan.y }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub contained: bool,
    pub max_distance: f64,
    pub offenders: Vec<f64>,
}

/// Whether every eigenvalue lies within `epsilon` of `S`.
pub fn support_exclusion_check(values: &[f64], s: &OutlierSet, epsilon: f64) -> ExclusionReport {
    let mut max_distance: f64 = 0.0;
    let mut offenders = Vec::new();
    for &v in values {
        let d = s.distance(v);
        max_distance = max_distance.max(d);
        if d > epsilon {
            offenders.push(v);
        }
    }
    ExclusionReport { contained: offenders.is_empty(), max_distance, offenders }
}

/// Eigenvalues inside the closed interval `[x, y]`.
pub fn gap_offenders(values: &[f64], x: f64, y: f64) -> Vec<f64> {
    values.iter().copied().filter(|&v| v >= x && v <= y).collect()
}

/// Resolvent entries of one draw, `G(z) = (z - M)^{-1}`, from its
/// eigendecomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventDraw {
    /// `[z][q]` diagonal entries `G_qq`.
    pub diagonal: Vec<Vec<Complex64>>,
    /// `[z][k]` entries `G_pq` for the sampled off-diagonal pairs.
    pub off_diagonal: Vec<Vec<Complex64>>,
}

/// Deterministic set of `count` off-diagonal index pairs.
pub fn offdiagonal_pairs(n: usize, count: usize) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let p = (7 * k) % n;
        let mut q = (13 * k + 1) % n;
        if q == p {
            q = (q + 1) % n;
        }
        pairs.push((p, q));
    }
    pairs
}

pub fn resolvent_entries(eig: &Eigen, zs: &[Complex64], pairs: &[(usize, usize)]) -> ResolventDraw {
    let n = eig.dim();
    let mut diagonal = Vec::with_capacity(zs.len());
    let mut off_diagonal = Vec::with_capacity(zs.len());
    for &z in zs {
        let w: Vec<Complex64> = eig.values.iter().map(|&l| 1.0 / (z - l)).collect();
        let diag = (0..n).map(|q| (0..n).map(|k| w[k] * eig.vectors[(q, k)].norm_sqr()).sum()).collect();
        let off = pairs
            .iter()
            .map(|&(p, q)| (0..n).map(|k| w[k] * eig.vectors[(p, k)] * eig.vectors[(q, k)].conj()).sum())
            .collect();
        diagonal.push(diag);
        off_diagonal.push(off);
    }
    ResolventDraw { diagonal, off_diagonal }
}

/// Predicted `E G_qq(z) = (1 - σ²c g_μ(z)) / (ω(z) - γ_q)` for each `q`.
pub fn resolvent_prediction(eq: &Equilibrium, a: &ASpec, z: Complex64) -> Result<Vec<Complex64>> {
    let params = eq.params();
    let g = eq.g_mu(z)?;
    let omega = params.omega_complex(z, g);
    let num = 1.0 - params.kappa() * g;
    Ok(a.gammas().into_iter().map(|gamma| num / (omega - gamma)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventReport {
    /// Per `z`: `max_q |mean G_qq - prediction_q|`.
    pub diagonal_deviation: Vec<f64>,
    /// Per `z`: `max_(p,q) |mean G_pq|` over the sampled pairs.
    pub offdiagonal_mean: Vec<f64>,
}

impl ResolventReport {
    pub fn max_diagonal_deviation(&self) -> f64 {
        self.diagonal_deviation.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_offdiagonal_mean(&self) -> f64 {
        self.offdiagonal_mean.iter().copied().fold(0.0, f64::max)
    }
}

/// Averages the draws and compares against the predictions (`[z][q]`).
pub fn resolvent_diag_check(
    draws: &[ResolventDraw],
    predictions: &[Vec<Complex64>],
) -> Result<ResolventReport> {
    if draws.is_empty() {
        return Err(Error::config("resolvent check needs at least one draw"));
    }
    let t = draws.len() as f64;
    let mut diagonal_deviation = Vec::with_capacity(predictions.len());
    let mut offdiagonal_mean = Vec::with_capacity(predictions.len());
    for (iz, pred) in predictions.iter().enumerate() {
        let mut dev: f64 = 0.0;
        for (q, p) in pred.iter().enumerate() {
            let mean: Complex64 = draws.iter().map(|d| d.diagonal[iz][q]).sum::<Complex64>() / t;
            dev = dev.max((mean - p).norm());
        }
        diagonal_deviation.push(dev);
        let pairs = draws[0].off_diagonal[iz].len();
        let mut off: f64 = 0.0;
        for k in 0..pairs {
            let mean: Complex64 = draws.iter().map(|d| d.off_diagonal[iz][k]).sum::<Complex64>() / t;
            off = off.max(mean.norm());
        }
        offdiagonal_mean.push(off);
    }
    Ok(ResolventReport { diagonal_deviation, offdiagonal_mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{assemble_m, build_a, sample_x, trial_rng, EntryLaw, EntrySampler};
    use crate::equilibrium::{ModelParams, ScanOptions, Spike};
    use crate::measure::AtomicMeasure;
    use crate::spikes::{classify, outlier_set};

    fn residual_ok(m: MatRef<'_, c64>, e: &Eigen) {
        let n = e.dim();
        let norm = e.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
        for k in 0..n {
            for i in 0..n {
                let mut acc = c64::new(0.0, 0.0);
                for j in 0..n {
                    acc += m[(i, j)] * e.vectors[(j, k)];
                }
                assert!((acc - e.vectors[(i, k)] * e.values[k]).norm() <= 1e-8 * norm);
            }
            for l in 0..n {
                let mut dot = c64::new(0.0, 0.0);
                for i in 0..n {
                    dot += e.vectors[(i, k)].conj() * e.vectors[(i, l)];
                }
                let want = if k == l { 1.0 } else { 0.0 };
                assert!((dot - c64::new(want, 0.0)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn eig_h_examples() {
        let d =
            Mat::from_fn(
                3,
                3,
                |i, j| if i == j { c64::new([1.0, 5.0, 3.0][i], 0.0) } else { c64::new(0.0, 0.0) },
            );
        let e = eig_h(d.as_ref()).unwrap();
        for (v, want) in e.values.iter().zip([5.0, 3.0, 1.0]) {
            assert!((v - want).abs() < 1e-14);
        }
        assert!((e.vectors[(1, 0)].norm() - 1.0).abs() < 1e-14);
        residual_ok(d.as_ref(), &e);

        let swap = Mat::from_fn(2, 2, |i, j| c64::new(if i != j { 1.0 } else { 0.0 }, 0.0));
        let e = eig_h(swap.as_ref()).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && (e.values[1] + 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[(0, 0)].norm() - h).abs() < 1e-14);
        assert!((e.vectors[(0, 0)] - e.vectors[(1, 0)]).norm() < 1e-14);
        assert!((e.vectors[(0, 1)] + e.vectors[(1, 1)]).norm() < 1e-14);

        let bad = Mat::from_fn(2, 2, |i, j| c64::new((i + 2 * j) as f64, 0.0));
        assert!(matches!(eig_h(bad.as_ref()), Err(Error::Linalg(_))));
    }

    #[test]
    fn random_matrix_residuals() {
        let nu = AtomicMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap();
        let p = ModelParams::new(1.0, 0.5, nu, vec![Spike::new(8.0, 1)]).unwrap();
        let a = build_a(&p, 20, 40, None).unwrap();
        let s = EntrySampler::new(&EntryLaw::ComplexGaussian).unwrap();
        let x = sample_x(&s, 20, 40, &mut trial_rng(5, 0));
        let m = assemble_m(&a, x.as_ref(), 1.0).unwrap();
        let e = eig_h(m.as_ref()).unwrap();
        residual_ok(m.as_ref(), &e);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..20 {
            assert!(completeness_defect(&e, &a, i).abs() < 1e-8);
        }
    }

    fn noiseless(rotate: bool) {
        let nu = AtomicMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap();
        let p = ModelParams::new(0.0, 0.5, nu, vec![Spike::new(6.0, 2), Spike::new(2.0, 1)]).unwrap();
        let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
        let n = 11;
        let mut rot = trial_rng(1, crate::ensemble::ROTATION_STREAM);
        let a = build_a(&p, n, 16, if rotate { Some(&mut rot) } else { None }).unwrap();
        let s = EntrySampler::new(&EntryLaw::ComplexGaussian).unwrap();
        let x = sample_x(&s, n, 16, &mut trial_rng(2, 0));
        let m = assemble_m(&a, x.as_ref(), 0.0).unwrap();
        let e = eig_h(m.as_ref()).unwrap();
        let mut sq = a.aa_eigenvalues_desc();
        sq.iter_mut().zip(&e.values).for_each(|(g, l)| assert!((*g - l).abs() < 1e-12));
        sq.clear();

        let preds = classify(&eq, Some(n)).unwrap();
        for (j, pred) in preds.iter().enumerate() {
            for v in spike_projection(&e, &a, pred, j).unwrap() {
                assert!((v - 1.0).abs() < 1e-10);
            }
            let agg = aggregate_projection(&e, &a, pred, j).unwrap();
            assert!((agg - pred.multiplicity as f64).abs() < 1e-10);
        }
        let sample = SpectralSample::analyze(&e, &a, &preds).unwrap();
        for cp in &sample.cross_projections {
            assert!(cp.values.iter().all(|v| v.abs() < 1e-10));
        }
        let set = outlier_set(eq.profile(), &preds);
        assert!(support_exclusion_check(&e.values, &set, 1e-8).contained);
    }

    #[test]
    fn noiseless_projections_are_exact() {
        noiseless(false);
        noiseless(true);
    }

    #[test]
    fn trace_identity_small() {
        let p =
            ModelParams::new(1.0, 0.5, AtomicMeasure::dirac(0.0).unwrap(), vec![Spike::new(3.0, 2)]).unwrap();
        let mut rot = trial_rng(4, crate::ensemble::ROTATION_STREAM);
        for a in [build_a(&p, 12, 24, None).unwrap(), build_a(&p, 12, 24, Some(&mut rot)).unwrap()] {
            let s = EntrySampler::new(&EntryLaw::Rademacher).unwrap();
            let x = sample_x(&s, 12, 24, &mut trial_rng(8, 1));
            let e = eig_h(assemble_m(&a, x.as_ref(), 1.0).unwrap().as_ref()).unwrap();
            for ranks in [0..2, 0..5, 3..12] {
                let (lhs, rhs) = trace_identity(&e, &a, ranks, 0).unwrap();
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn separation_with_zero_noise() {
        let p =
            ModelParams::new(0.0, 0.5, AtomicMeasure::dirac(0.0).unwrap(), vec![Spike::new(2.0, 1)]).unwrap();
        let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
        let a = build_a(&p, 6, 12, None).unwrap();
        let x = Mat::<c64>::zeros(6, 12);
        let e = eig_h(assemble_m(&a, x.as_ref(), 0.0).unwrap().as_ref()).unwrap();
        let plan = separation_plan(&eq, &a, 0.5, 1.0).unwrap();
        assert_eq!((plan.omega_x, plan.omega_y), (0.5, 1.0));
        assert_eq!(plan.i_n, 1);
        assert!(plan.assumption_holds);
        assert!(exact_separation_check(&e, &plan).separated());
        assert!(gap_offenders(&e.values, 0.5, 1.0).is_empty());
    }

    #[test]
    fn resolvent_without_noise_is_exact() {
        let nu = AtomicMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap();
        let p = ModelParams::new(1e-9, 0.5, nu, vec![]).unwrap();
        let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
        let a = build_a(&p, 8, 16, None).unwrap();
        let x = Mat::<c64>::zeros(8, 16);
        let e = eig_h(assemble_m(&a, x.as_ref(), 0.0).unwrap().as_ref()).unwrap();
        let zs = [Complex64::new(1.0, 1.0), Complex64::new(2.5, 0.5)];
        let draw = resolvent_entries(&e, &zs, &offdiagonal_pairs(8, 10));
        let preds: Vec<_> = zs.iter().map(|&z| resolvent_prediction(&eq, &a, z).unwrap()).collect();
        let rep = resolvent_diag_check(&[draw], &preds).unwrap();
        assert!(rep.max_diagonal_deviation() < 1e-6);
        assert!(rep.max_offdiagonal_mean() < 1e-12);
    }

    #[test]
    fn exclusion_reports_offenders() {
        let set = OutlierSet { support: vec![crate::Interval::new(0.0, 1.0)], points: vec![3.0] };
        let r = support_exclusion_check(&[0.5, 1.05, 2.0, 3.1], &set, 0.15);
        assert!(!r.contained);
        assert_eq!(r.offenders, vec![2.0]);
        assert!((r.max_distance - 1.0).abs() < 1e-15);
    }
}
