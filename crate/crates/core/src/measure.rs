//! Finitely supported probability measures on `[0, ∞)`.
//!
//! `AtomicMeasure` holds the limiting bulk measure of the signal spectrum as
//! well as empirical spectral measures. Everything downstream relies on the
//! closed-form Stieltjes transform `g(z) = Σ w_k / (z - t_k)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;

/// Locations closer than this are merged into a single atom.
pub const MERGE_TOL: f64 = 1e-12;
/// Allowed deviation of the total mass from 1.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure", into = "RawMeasure")]
pub struct AtomicMeasure {
    locations: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMeasure {
    atoms: Vec<(f64, f64)>,
}

impl TryFrom<RawMeasure> for AtomicMeasure {
    type Error = Error;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        AtomicMeasure::new(raw.atoms)
    }
}

impl From<AtomicMeasure> for RawMeasure {
    fn from(m: AtomicMeasure) -> Self {
        RawMeasure { atoms: m.atoms().collect() }
    }
}

impl AtomicMeasure {
    /// Builds a measure from `(location, weight)` pairs in any order.
    /// Locations within [`MERGE_TOL`] of each other are merged.
    pub fn new(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().collect();
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("at least one atom is required".into()));
        }
        for &(t, w) in &atoms {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "atom location {t} must be finite and nonnegative"
                )));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidMeasure(format!("atom weight {w} must be positive")));
            }
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut locations: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (t, w) in atoms {
            match locations.last() {
                Some(&last) if (t - last).abs() <= MERGE_TOL => {
                    *weights.last_mut().unwrap() += w;
                }
                _ => {
                    locations.push(t);
                    weights.push(w);
                }
            }
        }

        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, expected 1")));
        }
        Ok(AtomicMeasure { locations, weights })
    }

    pub fn dirac(at: f64) -> Result<Self> {
        Self::new([(at, 1.0)])
    }

    /// Uniform measure on the given values. Tiny negative values produced by
    /// roundoff (down to `-1e-10`) are clamped to zero.
    pub fn empirical(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidMeasure("empirical measure of no values".into()));
        }
        let w = 1.0 / values.len() as f64;
        let mut atoms = Vec::with_capacity(values.len());
        for &v in values {
            let v = if (-1e-10..0.0).contains(&v) { 0.0 } else { v };
            atoms.push((v, w));
        }
        Self::new_unchecked_mass(atoms)
    }

    /// Normalizes the weights before building; sums of many `1/n` weights
    /// can miss 1 by a few ulps.
    fn new_unchecked_mass(atoms: Vec<(f64, f64)>) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let scaled = atoms.into_iter().map(|(t, w)| (t, w / total));
        Self::new(scaled)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.locations.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn min_location(&self) -> f64 {
        self.locations[0]
    }

    pub fn max_location(&self) -> f64 {
        *self.locations.last().unwrap()
    }

    pub fn mean(&self) -> f64 {
        self.atoms().map(|(t, w)| t * w).sum()
    }

    /// Whether `x` coincides with an atom (within [`MERGE_TOL`]).
    pub fn in_support(&self, x: f64) -> bool {
        self.locations.iter().any(|&t| (x - t).abs() <= MERGE_TOL)
    }

    /// Distance from `x` to the support.
    pub fn distance_to_support(&self, x: f64) -> f64 {
        self.locations.iter().map(|&t| (x - t).abs()).fold(f64::INFINITY, f64::min)
    }

    /// `g(z) = Σ w_k / (z - t_k)`.
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, w) in self.atoms() {
            let d = z - t;
            if d.re == 0.0 && d.im == 0.0 {
                return Err(Error::domain(format!("Stieltjes transform evaluated at atom {t}")));
            }
            acc += w / d;
        }
        Ok(acc)
    }

    /// Stieltjes transform at a real point off the support.
    pub fn stieltjes_real(&self, x: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (t, w) in self.atoms() {
            let d = x - t;
            if d == 0.0 {
                return Err(Error::domain(format!("Stieltjes transform evaluated at atom {t}")));
            }
            acc += w / d;
        }
        Ok(acc)
    }

    /// `g'(x) = -Σ w_k / (x - t_k)^2`, strictly negative off the support.
    pub fn stieltjes_derivative(&self, x: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (t, w) in self.atoms() {
            let d = x - t;
            if d == 0.0 {
                return Err(Error::domain(format!("Stieltjes derivative evaluated at atom {t}")));
            }
            acc -= w / (d * d);
        }
        Ok(acc)
    }

    /// Open intervals of the complement of the support, restricted on the left
    /// to `(min_atom - left_ext, ...)`. The rightmost interval is unbounded.
    pub fn gaps(&self, left_ext: f64) -> Vec<Interval> {
        let mut out = Vec::with_capacity(self.len() + 1);
        out.push(Interval::new(self.min_location() - left_ext, self.min_location()));
        for pair in self.locations.windows(2) {
            out.push(Interval::new(pair[0], pair[1]));
        }
        out.push(Interval::new(self.max_location(), f64::INFINITY));
        out
    }

    /// Splits `n` slots among the atoms proportionally to their weights
    /// (largest-remainder rule; ties go to the lower-index atom).
    pub fn apportion(&self, n: usize) -> Vec<usize> {
        let quotas: Vec<f64> = self.weights.iter().map(|w| w * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &k in order.iter().take(n.saturating_sub(assigned)) {
            counts[k] += 1;
        }
        counts
    }
}

/// Families that can be discretized into equal-weight quantile atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    Dirac {
        at: f64,
    },
    Uniform {
        a: f64,
        b: f64,
    },
    /// `p_low·δ_low + (1 - p_low)·δ_high`.
    TwoPoint {
        low: f64,
        high: f64,
        p_low: f64,
    },
    /// Explicit atom list, used as-is.
    Atoms {
        atoms: Vec<(f64, f64)>,
    },
}

impl Family {
    /// Quantile function on `(0, 1)`.
    fn quantile(&self, u: f64) -> f64 {
        match *self {
            Family::Dirac { at } => at,
            Family::Uniform { a, b } => a + (b - a) * u,
            Family::TwoPoint { low, high, p_low } => {
                if u <= p_low {
                    low
                } else {
                    high
                }
            }
            Family::Atoms { .. } => unreachable!("atom lists are not discretized"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Family::Uniform { a, b } if !(a < b) => {
                Err(Error::InvalidMeasure(format!("uniform family requires a < b, got [{a}, {b}]")))
            }
            Family::TwoPoint { low, high, p_low } if !(low < high) || !(0.0 < p_low && p_low < 1.0) => {
                Err(Error::InvalidMeasure(format!(
                    "two-point family requires low < high and 0 < p_low < 1, got ({low}, {high}, {p_low})"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Approximates `family` by `m` atoms of weight `1/m` at the quantiles
/// `F^{-1}((k - 1/2) / m)`. Coinciding quantiles are merged.
pub fn discretize(family: &Family, m: usize) -> Result<AtomicMeasure> {
    if let Family::Atoms { atoms } = family {
        return AtomicMeasure::new(atoms.iter().copied());
    }
    if m == 0 {
        return Err(Error::InvalidMeasure("discretization needs m >= 1".into()));
    }
    family.validate()?;
    let mut atoms: Vec<(f64, usize)> = Vec::new();
    for k in 1..=m {
        let t = family.quantile((k as f64 - 0.5) / m as f64);
        match atoms.last_mut() {
            Some((last, count)) if (t - *last).abs() <= MERGE_TOL => *count += 1,
            _ => atoms.push((t, 1)),
        }
    }
    AtomicMeasure::new(atoms.into_iter().map(|(t, count)| (t, count as f64 / m as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_atoms() -> AtomicMeasure {
        AtomicMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap()
    }

    #[test]
    fn stieltjes_examples() {
        let d0 = AtomicMeasure::dirac(0.0).unwrap();
        assert_eq!(d0.stieltjes(Complex64::new(2.0, 0.0)).unwrap(), Complex64::new(0.5, 0.0));
        let gi = d0.stieltjes(Complex64::new(0.0, 1.0)).unwrap();
        assert_relative_eq!(gi.re, 0.0);
        assert_relative_eq!(gi.im, -1.0);
        assert_eq!(two_atoms().stieltjes_real(2.0).unwrap(), 0.0);
    }

    #[test]
    fn stieltjes_at_atom_is_domain_error() {
        let m = two_atoms();
        assert!(matches!(m.stieltjes(Complex64::new(3.0, 0.0)), Err(Error::Domain(_))));
        assert!(matches!(m.stieltjes_real(1.0), Err(Error::Domain(_))));
        assert!(matches!(m.stieltjes_derivative(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn derivative_examples() {
        let d0 = AtomicMeasure::dirac(0.0).unwrap();
        assert_eq!(d0.stieltjes_derivative(2.0).unwrap(), -0.25);
        assert_eq!(d0.stieltjes_derivative(1.0).unwrap(), -1.0);
        assert_eq!(two_atoms().stieltjes_derivative(2.0).unwrap(), -1.0);
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(AtomicMeasure::new(Vec::<(f64, f64)>::new()).is_err());
        assert!(AtomicMeasure::new([(-1.0, 1.0)]).is_err());
        assert!(AtomicMeasure::new([(1.0, 0.4), (2.0, 0.4)]).is_err());
        assert!(AtomicMeasure::new([(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(AtomicMeasure::new([(f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn duplicates_are_merged_and_sorted() {
        let m = AtomicMeasure::new([(3.0, 0.25), (1.0, 0.25), (3.0 + 1e-13, 0.5)]).unwrap();
        assert_eq!(m.locations(), &[1.0, 3.0]);
        assert_eq!(m.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn discretize_examples() {
        let u2 = discretize(&Family::Uniform { a: 0.0, b: 1.0 }, 2).unwrap();
        assert_eq!(u2.locations(), &[0.25, 0.75]);
        assert_eq!(u2.weights(), &[0.5, 0.5]);
        let u4 = discretize(&Family::Uniform { a: 0.0, b: 1.0 }, 4).unwrap();
        assert_eq!(u4.locations(), &[0.125, 0.375, 0.625, 0.875]);
        let d = discretize(&Family::Dirac { at: 0.0 }, 17).unwrap();
        assert_eq!(d.locations(), &[0.0]);
        assert_relative_eq!(d.weights()[0], 1.0, epsilon = 1e-15);
        let tp = discretize(&Family::TwoPoint { low: 1.0, high: 3.0, p_low: 0.5 }, 10).unwrap();
        assert_eq!(tp, two_atoms());
    }

    #[test]
    fn discretize_rejects_bad_parameters() {
        assert!(discretize(&Family::Uniform { a: 1.0, b: 1.0 }, 3).is_err());
        assert!(discretize(&Family::Uniform { a: 0.0, b: 1.0 }, 0).is_err());
        assert!(discretize(&Family::TwoPoint { low: 0.0, high: 1.0, p_low: 1.0 }, 3).is_err());
    }

    #[test]
    fn gaps_examples() {
        let d0 = AtomicMeasure::dirac(0.0).unwrap();
        let g = d0.gaps(20.0);
        assert_eq!(g, vec![Interval::new(-20.0, 0.0), Interval::new(0.0, f64::INFINITY)]);

        let g = two_atoms().gaps(20.0);
        assert_eq!(
            g,
            vec![Interval::new(-19.0, 1.0), Interval::new(1.0, 3.0), Interval::new(3.0, f64::INFINITY)]
        );

        let u = discretize(&Family::Uniform { a: 0.0, b: 1.0 }, 1000).unwrap();
        let right = *u.gaps(20.0).last().unwrap();
        assert_relative_eq!(right.lo, 0.9995, epsilon = 1e-12);
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(two_atoms().apportion(4), vec![2, 2]);
        assert_eq!(two_atoms().apportion(5), vec![3, 2]);
        let m = AtomicMeasure::new([(0.0, 0.2), (1.0, 0.3), (2.0, 0.5)]).unwrap();
        assert_eq!(m.apportion(7), vec![1, 2, 4]);
    }

    #[test]
    fn json_shape() {
        let s = serde_json::to_string(&two_atoms()).unwrap();
        assert_eq!(s, r#"{"atoms":[[1.0,0.5],[3.0,0.5]]}"#);
        let bad: std::result::Result<AtomicMeasure, _> = serde_json::from_str(r#"{"atoms":[[1.0,0.5]]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn far_imaginary_axis_normalization() {
        let m = discretize(&Family::Uniform { a: 0.0, b: 4.0 }, 50).unwrap();
        let z = Complex64::new(0.0, 1e6);
        let zg = z * m.stieltjes(z).unwrap();
        assert!((zg - 1.0).norm() < 1e-5);
    }

    fn measure_strategy() -> impl Strategy<Value = AtomicMeasure> {
        prop::collection::vec((0.0f64..10.0, 0.1f64..1.0), 1..8).prop_map(|atoms| {
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            let raw = atoms.into_iter().map(|(t, w)| (t, w / total)).collect::<Vec<_>>();
            AtomicMeasure::new_unchecked_mass(raw).unwrap()
        })
    }

    proptest! {
        #[test]
        fn upper_half_plane_maps_to_lower(m in measure_strategy(), re in -5.0f64..15.0, im in 1e-3f64..10.0) {
            let z = Complex64::new(re, im);
            let g = m.stieltjes(z).unwrap();
            prop_assert!(g.im < 0.0);
            prop_assert!(g.norm() <= 1.0 / im * (1.0 + 1e-12));
            let gc = m.stieltjes(z.conj()).unwrap();
            prop_assert!((gc - g.conj()).norm() <= 1e-12 * (1.0 + g.norm()));
        }

        #[test]
        fn derivative_matches_finite_difference(m in measure_strategy(), offset in 0.5f64..20.0) {
            let x = m.max_location() + offset;
            let h = 1e-5 * (1.0 + x.abs());
            let fd = (m.stieltjes_real(x + h).unwrap() - m.stieltjes_real(x - h).unwrap()) / (2.0 * h);
            let d = m.stieltjes_derivative(x).unwrap();
            prop_assert!(d < 0.0);
            prop_assert!((fd - d).abs() <= 1e-6 * d.abs());
        }

        #[test]
        fn uniform_discretization_mean(a in 0.0f64..5.0, len in 0.1f64..5.0, m in 1usize..200) {
            let b = a + len;
            let d = discretize(&Family::Uniform { a, b }, m).unwrap();
            prop_assert!((d.mean() - 0.5 * (a + b)).abs() <= (b - a) / (2.0 * m as f64));
            prop_assert!(d.locations().iter().all(|&t| a <= t && t <= b));
        }

        #[test]
        fn apportion_sums_to_n(m in measure_strategy(), n in 0usize..500) {
            prop_assert_eq!(m.apportion(n).iter().sum::<usize>(), n);
        }
    }
}
