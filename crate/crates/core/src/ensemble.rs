//! Finite-N instances: noise entry laws, the signal matrix `A`, and
//! `M = (σX/√N + A)(σX/√N + A)*`.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use faer::{c64, Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::equilibrium::ModelParams;
use crate::error::{Error, Result};

/// Law of one complex noise entry. Real and imaginary parts are independent,
/// centered, each with variance 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EntryLaw {
    /// Independent `N(0, 1/2)` parts.
    ComplexGaussian,
    /// Gaussian parts generated together by the Box–Muller transform.
    RealGaussianPair,
    /// `(±1 ± i)/√2` with fair independent signs.
    Rademacher,
    /// Parts uniform on `[-√(3/2), √(3/2)]`.
    UniformBounded,
    /// Base law truncated at `cutoff` per part, recentered and rescaled to
    /// variance 1/2, then mixed with independent Gaussian noise:
    /// `(X^C + α G) / √(1 + α²)`.
    TruncatedSmoothed {
        #[serde(alias = "C")]
        cutoff: f64,
        alpha: f64,
        base: Box<EntryLaw>,
    },
}

const UNIFORM_HALF_WIDTH: f64 = 1.224_744_871_391_589; // √(3/2)

impl EntryLaw {
    pub fn is_gaussian(&self) -> bool {
        matches!(self, EntryLaw::ComplexGaussian | EntryLaw::RealGaussianPair)
    }

    /// `E|X|³` of the complex entry.
    pub fn third_abs_moment(&self) -> Result<f64> {
        match self {
            // |X|² is Exp(1): E|X|³ = Γ(5/2).
            EntryLaw::ComplexGaussian | EntryLaw::RealGaussianPair => Ok(0.75 * PI.sqrt()),
            EntryLaw::Rademacher => Ok(1.0),
            EntryLaw::UniformBounded => Ok(uniform_third_abs_moment()),
            EntryLaw::TruncatedSmoothed { .. } => Err(Error::config(
                "third moment of a truncated-smoothed law is not tabulated (nested truncation)",
            )),
        }
    }

    /// `(E[x 1{|x|≤C}], E[x² 1{|x|≤C}])` for one part `x` of the entry.
    fn truncated_part_moments(&self, cutoff: f64) -> Result<(f64, f64)> {
        match self {
            EntryLaw::ComplexGaussian | EntryLaw::RealGaussianPair => {
                // x ~ N(0, 1/2): E[x² 1{|x|≤C}] = (erf C - 2C e^{-C²}/√π) / 2.
                let second = 0.5
                    * (statrs::function::erf::erf(cutoff)
                        - 2.0 * cutoff * (-cutoff * cutoff).exp() / PI.sqrt());
                Ok((0.0, second))
            }
            EntryLaw::Rademacher => Ok((0.0, if cutoff >= 1.0 / SQRT_2 { 0.5 } else { 0.0 })),
            EntryLaw::UniformBounded => {
                let a = UNIFORM_HALF_WIDTH;
                let m = cutoff.min(a);
                Ok((0.0, m * m * m / (3.0 * a)))
            }
            EntryLaw::TruncatedSmoothed { .. } => {
                Err(Error::config("truncated-smoothed laws cannot be nested"))
            }
        }
    }
}

/// 2-D midpoint rule for `E (x² + y²)^{3/2}` with `x, y` uniform on `[-a, a]`.
fn uniform_third_abs_moment() -> f64 {
    const K: usize = 1000;
    let a = UNIFORM_HALF_WIDTH;
    let h = 2.0 * a / K as f64;
    let mut acc = 0.0;
    for i in 0..K {
        let x = -a + (i as f64 + 0.5) * h;
        for j in 0..K {
            let y = -a + (j as f64 + 0.5) * h;
            acc += (x * x + y * y).powf(1.5);
        }
    }
    acc / (K * K) as f64
}

/// Draws entries from an [`EntryLaw`] with constants precomputed.
#[derive(Debug, Clone)]
pub struct EntrySampler {
    kind: SamplerKind,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    ComplexGaussian,
    RealGaussianPair,
    Rademacher,
    UniformBounded,
    Truncated { base: Box<SamplerKind>, cutoff: f64, center: f64, scale: f64, alpha: f64 },
}

impl EntrySampler {
    pub fn new(law: &EntryLaw) -> Result<Self> {
        Ok(EntrySampler { kind: Self::kind_for(law)? })
    }

    fn kind_for(law: &EntryLaw) -> Result<SamplerKind> {
        Ok(match law {
            EntryLaw::ComplexGaussian => SamplerKind::ComplexGaussian,
            EntryLaw::RealGaussianPair => SamplerKind::RealGaussianPair,
            EntryLaw::Rademacher => SamplerKind::Rademacher,
            EntryLaw::UniformBounded => SamplerKind::UniformBounded,
            EntryLaw::TruncatedSmoothed { cutoff, alpha, base } => {
                let theta_star = base.third_abs_moment()?;
                if !(*cutoff > 8.0 * theta_star) {
                    return Err(Error::config(format!(
                        "truncation level C = {cutoff} must exceed 8·E|X|³ = {}",
                        8.0 * theta_star
                    )));
                }
                if !(*alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::config(format!("alpha = {alpha} must be positive")));
                }
                let (mean, second) = base.truncated_part_moments(*cutoff)?;
                let var = second - mean * mean;
                SamplerKind::Truncated {
                    base: Box::new(Self::kind_for(base)?),
                    cutoff: *cutoff,
                    center: mean,
                    scale: 1.0 / (2.0 * var).sqrt(),
                    alpha: *alpha,
                }
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> c64 {
        Self::draw(&self.kind, rng)
    }

    fn draw<R: Rng + ?Sized>(kind: &SamplerKind, rng: &mut R) -> c64 {
        let half = std::f64::consts::FRAC_1_SQRT_2;
        match kind {
            SamplerKind::ComplexGaussian => {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                c64::new(re * half, im * half)
            }
            SamplerKind::RealGaussianPair => {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                let r = (-2.0 * u1.ln()).sqrt() * half;
                let (s, c) = (2.0 * PI * u2).sin_cos();
                c64::new(r * c, r * s)
            }
            SamplerKind::Rademacher => {
                let re = if rng.random::<bool>() { half } else { -half };
                let im = if rng.random::<bool>() { half } else { -half };
                c64::new(re, im)
            }
            SamplerKind::UniformBounded => {
                let a = UNIFORM_HALF_WIDTH;
                let re = rng.random_range(-a..a);
                let im = rng.random_range(-a..a);
                c64::new(re, im)
            }
            SamplerKind::Truncated { base, cutoff, center, scale, alpha } => {
                let x = Self::draw(base, rng);
                let part = |v: f64| {
                    let kept = if v.abs() <= *cutoff { v } else { 0.0 };
                    (kept - center) * scale
                };
                let xc = c64::new(part(x.re), part(x.im));
                let g = Self::draw(&SamplerKind::ComplexGaussian, rng);
                (xc + g * *alpha) / (1.0 + alpha * alpha).sqrt()
            }
        }
    }
}

/// Per-trial random stream: the experiment seed selects the key and the
/// trial index selects the ChaCha stream.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Stream reserved for the random rotations of `A`.
pub const ROTATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of columns `N`.
    #[serde(rename = "N")]
    pub big_n: usize,
    pub entry_law: EntryLaw,
    #[serde(default)]
    pub rotate: bool,
    #[serde(default)]
    pub seed: u64,
}

impl EnsembleConfig {
    /// Rows `n = round(c N)`.
    pub fn rows(&self, c: f64) -> usize {
        ((c * self.big_n as f64).round() as usize).min(self.big_n)
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.big_n == 0 {
            return Err(Error::config("N must be positive"));
        }
        let n = self.rows(params.c());
        let needed = params.spike_rank() + params.nu().len();
        if n < needed {
            return Err(Error::config(format!(
                "n = {n} rows cannot hold {} spike directions and {} bulk atoms",
                params.spike_rank(),
                params.nu().len()
            )));
        }
        EntrySampler::new(&self.entry_law).map(|_| ())
    }
}

/// The signal matrix `A = U D V*` (`n × N`), `D` diagonal with the spike
/// blocks first. Without rotation `U` and `V` are identities.
#[derive(Debug, Clone)]
pub struct ASpec {
    /// Singular values `d_i`, spikes first (descending), then bulk (descending).
    pub diagonal: Vec<f64>,
    /// Index range of each spike block in `diagonal`, in spike order.
    pub spike_blocks: Vec<Range<usize>>,
    pub big_n: usize,
    /// `U` (`n × n`), present iff rotated.
    pub left_rotation: Option<Mat<c64>>,
    /// First `n` columns of `V` (`N × n`), present iff rotated.
    pub right_rotation: Option<Mat<c64>>,
    dense: Option<Mat<c64>>,
}

impl ASpec {
    pub fn rows(&self) -> usize {
        self.diagonal.len()
    }

    pub fn is_rotated(&self) -> bool {
        self.left_rotation.is_some()
    }

    /// Eigenvalues `γ_q = d_q²` of `AA*` in diagonal order.
    pub fn gammas(&self) -> Vec<f64> {
        self.diagonal.iter().map(|d| d * d).collect()
    }

    /// Eigenvalues of `AA*` in descending order.
    pub fn aa_eigenvalues_desc(&self) -> Vec<f64> {
        let mut g = self.gammas();
        g.sort_by(|a, b| b.total_cmp(a));
        g
    }

    /// The `q`-th eigenvector of `AA*` (eigenvalue `gammas()[q]`).
    pub fn aa_eigenvector(&self, q: usize) -> Vec<c64> {
        match &self.left_rotation {
            Some(u) => (0..self.rows()).map(|i| u[(i, q)]).collect(),
            None => {
                let mut e = vec![c64::new(0.0, 0.0); self.rows()];
                e[q] = c64::new(1.0, 0.0);
                e
            }
        }
    }

    /// Orthonormal basis of the eigenspace of spike `j`.
    pub fn spike_basis(&self, j: usize) -> Vec<Vec<c64>> {
        self.spike_blocks[j].clone().map(|q| self.aa_eigenvector(q)).collect()
    }

    /// Dense `A` (`n × N`).
    pub fn matrix(&self) -> Mat<c64> {
        match &self.dense {
            Some(a) => a.clone(),
            None => {
                let n = self.rows();
                let mut a = Mat::<c64>::zeros(n, self.big_n);
                for (i, &d) in self.diagonal.iter().enumerate() {
                    a[(i, i)] = c64::new(d, 0.0);
                }
                a
            }
        }
    }
}

/// Builds `A` for `n` rows and `N` columns. The bulk entries are the atoms of
/// `ν` apportioned over the `n - r` non-spike slots.
pub fn build_a(
    params: &ModelParams,
    n: usize,
    big_n: usize,
    rotation: Option<&mut ChaCha8Rng>,
) -> Result<ASpec> {
    if n > big_n {
        return Err(Error::config(format!("n = {n} exceeds N = {big_n}")));
    }
    let r = params.spike_rank();
    if n < r + params.nu().len() {
        return Err(Error::config(format!(
            "n - r = {} slots cannot hold {} atoms",
            n.saturating_sub(r),
            params.nu().len()
        )));
    }
    let mut diagonal = Vec::with_capacity(n);
    let mut spike_blocks = Vec::with_capacity(params.spikes().len());
    for s in params.spikes() {
        let start = diagonal.len();
        diagonal.extend(std::iter::repeat_n(s.theta.sqrt(), s.multiplicity));
        spike_blocks.push(start..diagonal.len());
    }
    let counts = params.nu().apportion(n - r);
    for (t, k) in params.nu().locations().iter().zip(counts).rev() {
        diagonal.extend(std::iter::repeat_n(t.sqrt(), k));
    }

    let mut spec =
        ASpec { diagonal, spike_blocks, big_n, left_rotation: None, right_rotation: None, dense: None };
    if let Some(rng) = rotation {
        let u = haar_isometry(n, n, rng)?;
        let v = haar_isometry(big_n, n, rng)?;
        let mut dv = Mat::<c64>::zeros(n, big_n);
        for i in 0..n {
            let d = spec.diagonal[i];
            for j in 0..big_n {
                dv[(i, j)] = v[(j, i)].conj() * d;
            }
        }
        spec.dense = Some(&u * &dv);
        spec.left_rotation = Some(u);
        spec.right_rotation = Some(v);
    }
    Ok(spec)
}

/// `rows × cols` matrix with Haar-distributed orthonormal columns: QR of a
/// complex Gaussian matrix with the phases of `diag R` absorbed into `Q`.
pub fn haar_isometry<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Mat<c64>> {
    if cols > rows {
        return Err(Error::config(format!("isometry {rows}x{cols} needs rows >= cols")));
    }
    let sampler = EntrySampler { kind: SamplerKind::ComplexGaussian };
    let mut g = Mat::<c64>::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            g[(i, j)] = sampler.sample(rng);
        }
    }
    let qr = g.qr();
    let mut q = qr.compute_thin_Q();
    let r = qr.thin_R();
    for j in 0..cols {
        let d = r[(j, j)];
        let norm = d.norm();
        if norm == 0.0 {
            return Err(Error::Linalg("rank-deficient Gaussian sample in QR".into()));
        }
        let phase = d / norm;
        for i in 0..rows {
            q[(i, j)] *= phase;
        }
    }
    Ok(q)
}

/// `n × N` noise matrix, filled row by row.
pub fn sample_x<R: Rng + ?Sized>(sampler: &EntrySampler, n: usize, big_n: usize, rng: &mut R) -> Mat<c64> {
    let mut x = Mat::<c64>::zeros(n, big_n);
    for i in 0..n {
        for j in 0..big_n {
            x[(i, j)] = sampler.sample(rng);
        }
    }
    x
}

/// `Σ = σX/√N + A`.
pub fn signal_plus_noise(a: &ASpec, x: MatRef<'_, c64>, sigma: f64) -> Result<Mat<c64>> {
    let n = a.rows();
    if x.nrows() != n || x.ncols() != a.big_n {
        return Err(Error::config(format!(
            "noise is {}x{}, signal is {}x{}",
            x.nrows(),
            x.ncols(),
            n,
            a.big_n
        )));
    }
    let scale = sigma / (a.big_n as f64).sqrt();
    let mut s = Mat::<c64>::from_fn(n, a.big_n, |i, j| x[(i, j)] * scale);
    match &a.dense {
        Some(dense) => s += dense,
        None => {
            for (i, &d) in a.diagonal.iter().enumerate() {
                s[(i, i)] += c64::new(d, 0.0);
            }
        }
    }
    Ok(s)
}

/// `M = ΣΣ*`, symmetrized by averaging with its adjoint.
pub fn assemble_m(a: &ASpec, x: MatRef<'_, c64>, sigma: f64) -> Result<Mat<c64>> {
    let s = signal_plus_noise(a, x, sigma)?;
    let m = &s * s.adjoint();
    Ok(hermitian_part(m.as_ref()))
}

pub fn hermitian_part(m: MatRef<'_, c64>) -> Mat<c64> {
    let n = m.nrows();
    Mat::from_fn(n, n, |i, j| (m[(i, j)] + m[(j, i)].conj()) * 0.5)
}

/// Magic bytes of the matrix dump format.
pub const DUMP_MAGIC: &[u8; 4] = b"IPNM";
pub const DUMP_FLAG_HERMITIAN: u64 = 1;

/// Writes a complex matrix as a 32-byte header (`"IPNM"`, `u32` reserved,
/// `u64` rows, `u64` cols, `u64` flags) followed by row-major interleaved
/// `(re, im)` little-endian doubles.
pub fn write_dump(path: &Path, m: MatRef<'_, c64>, flags: u64) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::with_capacity(32 + 16 * m.nrows() * m.ncols());
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

/// Reads a matrix written by [`write_dump`]; returns it with its flags.
pub fn read_dump(path: &Path) -> Result<(Mat<c64>, u64)> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let bad = |message: &str| Error::Parse { path: path.to_path_buf(), message: message.into() };
    if bytes.len() < 32 || &bytes[0..4] != DUMP_MAGIC {
        return Err(bad("missing IPNM header"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().unwrap());
    let (rows, cols, flags) = (word(8) as usize, word(16) as usize, word(24));
    if bytes.len() != 32 + 16 * rows * cols {
        return Err(bad("payload length does not match header"));
    }
    let val = |k: usize| f64::from_le_bytes(bytes[k..k + 8].try_into().unwrap());
    let m = Mat::from_fn(rows, cols, |i, j| {
        let off = 32 + 16 * (i * cols + j);
        c64::new(val(off), val(off + 8))
    });
    Ok((m, flags))
}
