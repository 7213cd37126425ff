//! Spike classification and outlier/overlap predictions.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{Equilibrium, ModelParams, SupportProfile};
use crate::error::{Error, Result};
use crate::interval::Interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikePrediction {
    pub theta: f64,
    pub multiplicity: usize,
    pub in_outlier_set: bool,
    pub phi_prime_at_theta: f64,
    pub g_nu_at_theta: f64,
    /// Limit of the outlier eigenvalues, `Φ(θ)`.
    pub rho: Option<f64>,
    /// Limit of the squared projection of each outlier eigenvector onto the
    /// spike eigenspace.
    pub tau: Option<f64>,
    /// Limit of the projection summed over the `k` outlier eigenvectors, `k·τ`.
    pub aggregate_tau: Option<f64>,
    /// 1-based descending ranks `(n_{j-1} + 1, n_{j-1} + k_j)` of the spike
    /// among the eigenvalues of `AA*`.
    pub rank_range: (usize, usize),
}

impl SpikePrediction {
    pub const CSV_HEADER: &'static str = "theta,k,in_set,rho,tau";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.theta,
            self.multiplicity,
            self.in_outlier_set,
            opt(self.rho),
            opt(self.tau)
        )
    }

    /// 0-based index range of the spike's eigenvalues in descending order.
    pub fn rank_indices(&self) -> std::ops::Range<usize> {
        self.rank_range.0 - 1..self.rank_range.1
    }
}

/// Number of bulk eigenvalues of `AA*` strictly above `theta` when `n - r`
/// slots are apportioned to the atoms of `ν`.
pub fn bulk_count_above(params: &ModelParams, n: usize, theta: f64) -> usize {
    let bulk = n.saturating_sub(params.spike_rank());
    let counts = params.nu().apportion(bulk);
    params.nu().locations().iter().zip(counts).filter(|(&t, _)| t > theta).map(|(_, k)| k).sum()
}

/// Classifies every spike, in decreasing order of `θ`. With `n` given, rank
/// ranges account for the bulk eigenvalues of `AA*` above each spike;
/// otherwise only larger spikes are counted.
pub fn classify(eq: &Equilibrium, n: Option<usize>) -> Result<Vec<SpikePrediction>> {
    let params = eq.params();
    let mut out = Vec::with_capacity(params.spikes().len());
    let mut larger = 0usize;
    for spike in params.spikes() {
        let theta = spike.theta;
        let phi_prime = params.phi_prime(theta)?;
        let g_nu = params.nu().stieltjes_real(theta)?;
        let in_set = params.is_admissible(theta)?;
        let (rho, tau) =
            if in_set { (Some(params.phi(theta)?), Some(tau_value(params, theta)?)) } else { (None, None) };
        let above = larger + n.map_or(0, |n| bulk_count_above(params, n, theta));
        out.push(SpikePrediction {
            theta,
            multiplicity: spike.multiplicity,
            in_outlier_set: in_set,
            phi_prime_at_theta: phi_prime,
            g_nu_at_theta: g_nu,
            rho,
            tau,
            aggregate_tau: tau.map(|t| t * spike.multiplicity as f64),
            rank_range: (above + 1, above + spike.multiplicity),
        });
        larger += spike.multiplicity;
    }
    Ok(out)
}

/// `τ(θ) = Φ'(θ) / (1 + σ²c g_ν(θ))`.
pub fn tau_value(params: &ModelParams, theta: f64) -> Result<f64> {
    if !params.is_admissible(theta)? {
        return Err(Error::domain(format!("theta = {theta} is not in the outlier set")));
    }
    let g = params.nu().stieltjes_real(theta)?;
    Ok(params.phi_prime(theta)? / (1.0 + params.kappa() * g))
}

/// `τ(θ) = (1 - σ²c g_μ(ρ)) / ω'(ρ)` with `ρ = Φ(θ)`, evaluated through the
/// gap machinery (inversion of `Φ` at `ρ`, then `g_μ` on the gap).
pub fn tau_via_outlier(eq: &Equilibrium, theta: f64) -> Result<f64> {
    let params = eq.params();
    if !params.is_admissible(theta)? {
        return Err(Error::domain(format!("theta = {theta} is not in the outlier set")));
    }
    let rho = params.phi(theta)?;
    let g = eq.g_mu_on_gap(rho)?;
    let omega_prime = eq.omega_prime_on_gap(rho)?;
    Ok((1.0 - params.kappa() * g) / omega_prime)
}

/// The compact set `S`: bulk support plus the isolated outlier limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSet {
    pub support: Vec<Interval>,
    pub points: Vec<f64>,
}

impl OutlierSet {
    pub fn distance(&self, x: f64) -> f64 {
        let d_support = self.support.iter().map(|iv| iv.distance(x)).fold(f64::INFINITY, f64::min);
        self.points.iter().map(|p| (x - p).abs()).fold(d_support, f64::min)
    }
}

pub fn outlier_set(profile: &SupportProfile, predictions: &[SpikePrediction]) -> OutlierSet {
    OutlierSet {
        support: profile.support.clone(),
        points: predictions.iter().filter_map(|p| p.rho).collect(),
    }
}
