//! Weyl transform between phase-space distributions and position-basis
//! density matrices, eigen-spectra, the Γ negativity measure and Type I/II
//! classification.
//!
//! The matrix lives on every other x-grid point, `x_a = x_min + 2a·dx`, so
//! each midpoint `(x_a + x_b)/2 = x_min + (a + b)·dx` is a grid row. With
//! `y = x_a − x_b`,
//!
//! ```text
//! ρ(x_a, x_b) = Σ_l dp f(row a+b, p_l) exp(i p_l y / ħ)
//! ```
//!
//! which lands exactly on DFT bins when the momentum extent `P` satisfies
//! `P·dx = r·πħ` for a positive integer `r`. Bin `(a − b)·r` must stay below
//! `np/2`; coherences beyond that band are not representable on the grid and
//! are zero.
//!
//! On a periodic grid the matrix is the compression of the line operator to
//! one cell, which is trace one and keeps positivity.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{signed_bin, transform, FftPair};
use crate::observables::{fmt17, TrajectoryRecord};
use crate::phasespace::{Boundary, Kind, PhaseSpaceGrid, PhaseSpaceState};

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-8;
/// Cells with f above −GAMMA_FLOOR count as non-negative.
pub const GAMMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Quantum,
    WeylOfClassical,
}

impl Source {
    fn of(kind: Kind) -> Self {
        match kind {
            Kind::Wigner => Source::Quantum,
            Kind::Classical => Source::WeylOfClassical,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DensityMatrix {
    pub n: usize,
    /// Kernel values ρ(x_a, x_b).
    pub rho: DMatrix<Complex64>,
    /// Lattice spacing of the matrix, twice the grid dx.
    pub dx: f64,
    pub hbar: f64,
    pub source: Source,
    /// Phase-space grid the matrix is tied to.
    pub grid: PhaseSpaceGrid,
    /// Trace before renormalization; 1 when no correction was needed.
    pub raw_trace: f64,
    /// Grid rows per matrix lattice half-step; the lattice spacing is `2·stride·dx`.
    pub stride: usize,
}

/// The integer `r` with `P·dx = r·πħ`, or a configuration error naming the
/// momentum extent that would satisfy it.
pub fn commensurability(grid: &PhaseSpaceGrid, hbar: f64) -> Result<usize> {
    strided_commensurability(grid, hbar, 1)
}

/// As [`commensurability`] for a matrix lattice of spacing `2·stride·dx`:
/// requires `P·dx·stride = r·πħ`.
pub fn strided_commensurability(grid: &PhaseSpaceGrid, hbar: f64, stride: usize) -> Result<usize> {
    if stride == 0 || grid.nx % (2 * stride) != 0 {
        return Err(Error::Config(format!("stride {stride} does not divide nx/2 = {}", grid.nx / 2)));
    }
    let p_ext = grid.p_max - grid.p_min;
    let r = p_ext * grid.dx() * stride as f64 / (std::f64::consts::PI * hbar);
    let ri = r.round();
    if ri < 1.0 || (r - ri).abs() > 1e-9 * r.max(1.0) {
        let need = std::f64::consts::PI * hbar / (grid.dx() * stride as f64);
        return Err(Error::Config(format!(
            "grid is not commensurate for the Weyl transform: p extent {p_ext} must be an integer multiple of πħ/dx = {need}"
        )));
    }
    Ok(ri as usize)
}

/// Box grid with `nx = 2·n_rho` and the smallest commensurate momentum box
/// (`r = 1`), centred on p = 0.
pub fn commensurate_grid(n_rho: usize, x_min: f64, x_max: f64, np: usize, hbar: f64) -> Result<PhaseSpaceGrid> {
    let nx = 2 * n_rho;
    let dx = (x_max - x_min) / nx as f64;
    let p_half = 0.5 * std::f64::consts::PI * hbar / dx;
    PhaseSpaceGrid::new(nx, np, x_min, x_max, -p_half, p_half, Boundary::Box)
}

impl DensityMatrix {
    /// Wraps a kernel matrix, checking Hermiticity and unit trace.
    pub fn from_matrix(rho: DMatrix<Complex64>, grid: &PhaseSpaceGrid, hbar: f64, source: Source) -> Result<Self> {
        commensurability(grid, hbar)?;
        let n = grid.nx / 2;
        if rho.nrows() != n || rho.ncols() != n {
            return Err(Error::Misuse(format!("matrix is {}×{}, grid needs {n}×{n}", rho.nrows(), rho.ncols())));
        }
        let herm = hermitian_deviation(&rho);
        if herm > HERMITIAN_TOL * max_abs(&rho).max(1.0) {
            return Err(Error::Integrity(format!("matrix deviates from Hermitian by {herm}")));
        }
        let h = 2.0 * grid.dx();
        let tr: f64 = (0..n).map(|a| rho[(a, a)].re).sum::<f64>() * h;
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(Error::Integrity(format!("trace is {tr}, expected 1")));
        }
        Ok(Self { n, rho, dx: h, hbar, source, grid: grid.clone(), raw_trace: tr, stride: 1 })
    }

    /// Pure state |ψ⟩⟨ψ| from samples ψ(x_a), normalized on the lattice.
    pub fn from_wavefunction(psi: &[Complex64], grid: &PhaseSpaceGrid, hbar: f64) -> Result<Self> {
        let n = grid.nx / 2;
        if psi.len() != n {
            return Err(Error::Misuse(format!("wavefunction has {} samples, grid needs {n}", psi.len())));
        }
        let h = 2.0 * grid.dx();
        let nrm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * h;
        if !(nrm > 0.0) {
            return Err(Error::Misuse("zero wavefunction".into()));
        }
        let s = 1.0 / nrm.sqrt();
        let rho = DMatrix::from_fn(n, n, |a, b| psi[a] * psi[b].conj() * s * s);
        Self::from_matrix(rho, grid, hbar, Source::Quantum)
    }

    /// Lattice positions x_a.
    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|a| self.grid.x_min + a as f64 * self.dx).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|a| self.rho[(a, a)].re).sum::<f64>() * self.dx
    }

    /// The operator as a matrix in the orthonormal lattice basis: h·ρ.
    pub fn operator(&self) -> DMatrix<Complex64> {
        self.rho.map(|z| z * self.dx)
    }
}

fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn hermitian_deviation(m: &DMatrix<Complex64>) -> f64 {
    let n = m.nrows();
    let mut d: f64 = 0.0;
    for a in 0..n {
        for b in a..n {
            d = d.max((m[(a, b)] - m[(b, a)].conj()).norm());
        }
    }
    d
}

/// exp(i p_min y / ħ) for y = 2m·dx.
fn offset_phase(grid: &PhaseSpaceGrid, hbar: f64, m: i64) -> Complex64 {
    Complex64::from_polar(1.0, grid.p_min * 2.0 * m as f64 * grid.dx() / hbar)
}

/// Weyl transform of a phase-space state to its density matrix.
pub fn to_density_matrix(state: &PhaseSpaceState) -> Result<DensityMatrix> {
    to_density_matrix_strided(state, 1)
}

/// Weyl transform onto the coarser lattice `x_a = x_min + 2a·stride·dx`.
/// Midpoints are grid rows `(a + b)·stride`, so the kernel is still sampled
/// exactly; only the matrix lattice is coarser than the grid.
pub fn to_density_matrix_strided(state: &PhaseSpaceState, stride: usize) -> Result<DensityMatrix> {
    let g = &state.grid;
    let r = strided_commensurability(g, state.hbar, stride)? as i64;
    let (nx, np) = (g.nx, g.np);
    let n = nx / (2 * stride);
    let dp = g.dp();
    let h = 2.0 * stride as f64 * g.dx();
    let pair = FftPair::new(np);
    // G_k(j) = Σ_l f(k, l) e^{+2πi lj/np} for every midpoint row k.
    let rows: Vec<Vec<Complex64>> = state
        .f
        .par_chunks(np)
        .enumerate()
        .map(|(k, row)| {
            if k % stride != 0 {
                return Vec::new();
            }
            let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            transform(&pair, &mut buf, true);
            buf
        })
        .collect();
    let half = np as i64 / 2;
    let phases: Vec<Complex64> = (-(n as i64)..=n as i64)
        .map(|m| Complex64::from_polar(1.0, g.p_min * m as f64 * h / state.hbar))
        .collect();
    let mut rho = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let m = a as i64 - b as i64;
            let j = m * r;
            if j.abs() >= half {
                continue;
            }
            let bin = j.rem_euclid(np as i64) as usize;
            rho[(a, b)] = rows[(a + b) * stride][bin] * phases[(m + n as i64) as usize] * dp;
        }
    }
    // Rows of f are real, so ρ is Hermitian by construction; check anyway.
    let herm = hermitian_deviation(&rho);
    let scale = max_abs(&rho).max(1e-300);
    if herm > 1e-8 * scale.max(1.0) {
        return Err(Error::Integrity(format!("pre-symmetrization Hermiticity deviation {herm}")));
    }
    let sym = DMatrix::from_fn(n, n, |a, b| 0.5 * (rho[(a, b)] + rho[(b, a)].conj()));
    let tr: f64 = (0..n).map(|a| sym[(a, a)].re).sum::<f64>() * h;
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::Integrity(format!("density matrix trace is {tr}")));
    }
    // Sparse-row sampling of the x-marginal matches the full quadrature up to
    // its aliased content; fold that residue into the normalization.
    let rho = if (tr - 1.0).abs() > TRACE_TOL { sym.map(|z| z / tr) } else { sym };
    Ok(DensityMatrix {
        n,
        rho,
        dx: h,
        hbar: state.hbar,
        source: Source::of(state.kind),
        grid: g.clone(),
        raw_trace: tr,
        stride,
    })
}

/// Half-sample spectral shift of a length-N sequence: returns s(q + 1/2).
fn half_shift(pair: &FftPair, seq: &mut [Complex64]) {
    let n = seq.len();
    transform(pair, seq, false);
    for (mi, z) in seq.iter_mut().enumerate() {
        let b = signed_bin(mi, n);
        if b == -(n as i64 / 2) {
            *z = Complex64::new(0.0, 0.0);
        } else {
            *z *= Complex64::from_polar(1.0 / n as f64, std::f64::consts::PI * b as f64 / n as f64);
        }
    }
    transform(pair, seq, true);
}

/// Inverse Weyl transform. Bins that the matrix fixes are reproduced exactly;
/// bins of the opposite parity at each row are interpolated from the
/// neighbouring rows by a half-sample spectral shift.
pub fn from_density_matrix(rho: &DensityMatrix) -> Result<PhaseSpaceState> {
    let g = &rho.grid;
    if rho.stride != 1 {
        return Err(Error::Misuse("inverse transform needs a stride-1 density matrix".into()));
    }
    let r = commensurability(g, rho.hbar)? as i64;
    let (nx, np) = (g.nx, g.np);
    let n = rho.n;
    if n != nx / 2 {
        return Err(Error::Misuse("density matrix size does not match its grid".into()));
    }
    let dp = g.dp();
    let half = np as i64 / 2;
    let m_max = ((half - 1) / r).min(n as i64 - 1);
    let width = (2 * m_max + 1) as usize;
    // coeff[k][m + m_max]: bin-(m·r) coefficient of row k.
    let mut coeff = vec![Complex64::new(0.0, 0.0); nx * width];
    for a in 0..n {
        for b in 0..n {
            let m = a as i64 - b as i64;
            if m.abs() > m_max {
                continue;
            }
            let c = rho.rho[(a, b)] * offset_phase(g, rho.hbar, m).conj() / dp;
            coeff[(a + b) * width + (m + m_max) as usize] = c;
        }
    }
    let nh = nx / 2;
    let shift_pair = FftPair::new(nh);
    let filled: Vec<(usize, Vec<Complex64>)> = (0..width)
        .into_par_iter()
        .map(|col| {
            let m = col as i64 - m_max;
            let par = m.rem_euclid(2) as usize;
            let mut seq: Vec<Complex64> = (0..nh).map(|q| coeff[(2 * q + par) * width + col]).collect();
            half_shift(&shift_pair, &mut seq);
            (col, seq)
        })
        .collect();
    for (col, seq) in filled {
        let m = col as i64 - m_max;
        let par = m.rem_euclid(2) as usize;
        for (q, v) in seq.into_iter().enumerate() {
            let k = 2 * q + par + 1;
            if k < nx {
                coeff[k * width + col] = v;
            }
        }
    }
    let pair = FftPair::new(np);
    let mut f = vec![0.0; nx * np];
    f.par_chunks_mut(np).enumerate().for_each(|(k, out)| {
        let mut buf = vec![Complex64::new(0.0, 0.0); np];
        for col in 0..width {
            let m = col as i64 - m_max;
            let bin = (m * r).rem_euclid(np as i64) as usize;
            buf[bin] = coeff[k * width + col];
        }
        transform(&pair, &mut buf, false);
        for (o, z) in out.iter_mut().zip(&buf) {
            *o = z.re / np as f64;
        }
    });
    let kind = match rho.source {
        Source::Quantum => Kind::Wigner,
        Source::WeylOfClassical => Kind::Classical,
    };
    Ok(PhaseSpaceState::from_parts(g.clone(), f, kind, rho.hbar, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Eigenvalues of the operator, sorted descending.
    pub eigenvalues: Vec<f64>,
    /// ν = Σ_{λ<0} |λ|.
    pub negative_mass: f64,
    /// Σ λ².
    pub purity: f64,
    pub trace: f64,
    pub gamma: Option<f64>,
    pub source: Source,
    pub t: Option<f64>,
}

impl SpectrumReport {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// CSV `i,eigenvalue` with i counted from 1.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "i,eigenvalue")?;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, fmt17(*v))?;
        }
        Ok(())
    }
}

/// Full Hermitian eigendecomposition of the density operator.
pub fn spectrum(rho: &DensityMatrix) -> Result<SpectrumReport> {
    let herm = hermitian_deviation(&rho.rho);
    if herm > HERMITIAN_TOL * max_abs(&rho.rho).max(1.0) {
        return Err(Error::Integrity(format!("spectrum input deviates from Hermitian by {herm}")));
    }
    let op = rho.operator();
    let mut eig: Vec<f64> = op.symmetric_eigenvalues().iter().copied().collect();
    if eig.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigensolver returned non-finite values".into()));
    }
    eig.sort_by(|a, b| b.total_cmp(a));
    let negative_mass = eig.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let purity = eig.iter().map(|v| v * v).sum();
    let trace = eig.iter().sum();
    Ok(SpectrumReport { eigenvalues: eig, negative_mass, purity, trace, gamma: None, source: rho.source, t: None })
}

/// Spectrum of a state's Weyl transform, tagged with its Γ and time.
pub fn state_spectrum(state: &PhaseSpaceState) -> Result<SpectrumReport> {
    let mut rep = spectrum(&to_density_matrix(state)?)?;
    rep.gamma = Some(gamma(state));
    rep.t = Some(state.t);
    Ok(rep)
}

/// Γ = ∫ (|f| − f) dx dp.
pub fn gamma(state: &PhaseSpaceState) -> f64 {
    let s: f64 = state.f.iter().filter(|v| **v < -GAMMA_FLOOR).map(|v| -2.0 * v).sum();
    s * state.grid.cell_area()
}

/// Writes a `t,gamma` CSV from a record carrying a `gamma` series.
pub fn write_gamma_csv<W: std::io::Write>(record: &TrajectoryRecord, mut w: W) -> Result<()> {
    let g = record.require("gamma")?;
    writeln!(w, "t,gamma")?;
    for (t, v) in record.times.iter().zip(g) {
        writeln!(w, "{},{}", fmt17(*t), fmt17(*v))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// ν at or above this is Type II.
    pub type_ii: f64,
    /// ν at or below this is Type I.
    pub type_i: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { type_ii: 0.05, type_i: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    TypeI,
    TypeII,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub verdict: Verdict,
    pub nus: Vec<f64>,
    pub max_nu: f64,
    pub thresholds: Thresholds,
}

/// Classifies a system from spectra of its classically evolved distribution,
/// using the largest ν across the supplied times.
pub fn classify(spectra: &[SpectrumReport], thresholds: Thresholds) -> Result<Classification> {
    if spectra.is_empty() {
        return Err(Error::Misuse("classification needs at least one spectrum".into()));
    }
    if spectra.iter().any(|s| s.source == Source::Quantum) {
        return Err(Error::Misuse("classification takes spectra of classical evolution only".into()));
    }
    let nus: Vec<f64> = spectra.iter().map(|s| s.negative_mass).collect();
    let max_nu = nus.iter().cloned().fold(0.0, f64::max);
    let verdict = if max_nu >= thresholds.type_ii {
        Verdict::TypeII
    } else if max_nu <= thresholds.type_i {
        Verdict::TypeI
    } else {
        Verdict::Indeterminate
    };
    Ok(Classification { verdict, nus, max_nu, thresholds })
}
