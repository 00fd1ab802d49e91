//! Stochastic master equation for continuous position measurement.
//!
//! A trajectory is conditioned on the record `⟨X⟩ + ξ(t)`, `ξ = (8ηk)^{-1/2} dW/dt`:
//!
//! ```text
//! dρ = −(i/ħ)[H, ρ] dt − k[X, [X, ρ]] dt + √(2ηk) ({X, ρ} − 2ρ Tr ρX) dW
//! ```
//!
//! The double commutator carries a minus sign, so that the averaged
//! evolution is the master equation with momentum diffusion `D = ħ²k`.
//!
//! States live on a position lattice `x_a = x_min + a·h` with X diagonal.
//! Every step is `H(dt/2) · M(dt, dW) · H(dt/2)`, where `H` is the split
//! unitary (kinetic phase in the lattice Fourier basis, potential phase on
//! the lattice) and `M` the measurement update. Kicks of the rotor are
//! applied exactly at integer times, before the step that starts there.
//!
//! Noise comes from ChaCha8 seeded with the run seed, one stream per
//! trajectory index, so ensembles do not depend on scheduling and a stream
//! position can be saved and restored.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{signed_bin, FftPair};
use crate::observables::{fmt17, TrajectoryRecord};
use crate::phasespace::{PhaseSpaceGrid, PhaseSpaceState};
use crate::potentials::{force_stats, is_degenerate_value, Potential};
use crate::weyl::{DensityMatrix, Source};

/// Largest tolerated trace change of one Euler–Maruyama or Milstein update
/// before renormalization.
pub const TRACE_STEP_TOL: f64 = 1e-3;
/// Largest tolerated probability in the outer 1/32 of the lattice at either end.
pub const EDGE_PROB_LIMIT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Euler–Maruyama on the SME, then trace renormalization.
    EulerMaruyama,
    /// Euler–Maruyama plus the Milstein correction of the noise term.
    Milstein,
    /// Gaussian Kraus update `M ρ M†`; positive by construction.
    Exponential,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler_maruyama_normalized",
            Scheme::Milstein => "milstein_normalized",
            Scheme::Exponential => "exponential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "euler_maruyama_normalized" | "euler_maruyama" => Scheme::EulerMaruyama,
            "milstein_normalized" | "milstein" => Scheme::Milstein,
            "exponential" => Scheme::Exponential,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmeConfig {
    /// Measurement strength; `k = 0` switches the measurement off.
    pub k: f64,
    /// Detection efficiency in [0, 1].
    pub eta: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

impl SmeConfig {
    pub fn new(k: f64, eta: f64, dt: f64, n_traj: usize, seed: u64) -> Self {
        Self { k, eta, dt, n_traj, seed, scheme: Scheme::EulerMaruyama }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k must be ≥ 0, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_traj == 0 {
            return Err(Error::Config("n_traj must be at least 1".into()));
        }
        Ok(())
    }

    /// Momentum diffusion of the averaged evolution, D = ħ²k.
    pub fn diffusion(&self, hbar: f64) -> f64 {
        hbar * hbar * self.k
    }

    /// Noise amplitude √(2ηk).
    fn noise(&self) -> f64 {
        (2.0 * self.eta * self.k).sqrt()
    }

    fn describe(&self) -> String {
        format!(
            "k={} eta={} dt={} scheme={}",
            fmt17(self.k),
            fmt17(self.eta),
            fmt17(self.dt),
            self.scheme.name()
        )
    }
}

/// Position lattice `x_a = x_min + a·h` and its discrete momenta
/// `p_j = 2πħ j/(n h)`, `j ∈ [−n/2, n/2)`.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub n: usize,
    pub x_min: f64,
    pub h: f64,
    pub hbar: f64,
    fft: FftPair,
}

impl Lattice {
    pub fn new(n: usize, x_min: f64, h: f64, hbar: f64) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::Config(format!("lattice size must be a power of two ≥ 8, got {n}")));
        }
        if !(h > 0.0 && hbar > 0.0) {
            return Err(Error::Config("lattice spacing and ħ must be positive".into()));
        }
        Ok(Self { n, x_min, h, hbar, fft: FftPair::new(n) })
    }

    /// The matrix lattice of the Weyl transform on `grid`: `n = nx/2`, `h = 2dx`.
    pub fn for_grid(grid: &PhaseSpaceGrid, hbar: f64) -> Result<Self> {
        Self::new(grid.nx / 2, grid.x_min, 2.0 * grid.dx(), hbar)
    }

    pub fn x(&self, a: usize) -> f64 {
        self.x_min + a as f64 * self.h
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|a| self.x(a)).collect()
    }

    /// Momentum of Fourier bin `m` (unshifted DFT order).
    pub fn momentum(&self, m: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.hbar * signed_bin(m, self.n) as f64 / (self.n as f64 * self.h)
    }
}

/// Conditioned state in the orthonormal lattice basis: a normalized
/// wavefunction (η = 1) or a unit-trace density matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum SmeState {
    Pure(Vec<Complex64>),
    Mixed(DMatrix<Complex64>),
}

impl SmeState {
    /// Minimum-uncertainty Gaussian ψ ∝ exp[−(x − x0)²/4σx² + i p0 x/ħ].
    pub fn gaussian(lattice: &Lattice, x0: f64, p0: f64, sigma_x: f64) -> Result<Self> {
        if !(sigma_x > 0.0) {
            return Err(Error::Config("σx must be positive".into()));
        }
        let mut psi: Vec<Complex64> = (0..lattice.n)
            .map(|a| {
                let x = lattice.x(a);
                let d = x - x0;
                Complex64::from_polar((-(d * d) / (4.0 * sigma_x * sigma_x)).exp(), p0 * x / lattice.hbar)
            })
            .collect();
        normalize_vec(&mut psi)?;
        Ok(SmeState::Pure(psi))
    }

    pub fn from_density_matrix(dm: &DensityMatrix) -> Self {
        SmeState::Mixed(dm.operator())
    }

    /// Kernel form on the Weyl lattice of `grid` (see [`Lattice::for_grid`]).
    pub fn to_density_matrix(&self, grid: &PhaseSpaceGrid, hbar: f64) -> Result<DensityMatrix> {
        let h = 2.0 * grid.dx();
        DensityMatrix::from_matrix(self.density_operator().map(|z| z / h), grid, hbar, Source::Quantum)
    }

    /// The density operator (for a pure state |ψ⟩⟨ψ|).
    pub fn density_operator(&self) -> DMatrix<Complex64> {
        match self {
            SmeState::Pure(psi) => DMatrix::from_fn(psi.len(), psi.len(), |a, b| psi[a] * psi[b].conj()),
            SmeState::Mixed(rho) => rho.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SmeState::Pure(psi) => psi.len(),
            SmeState::Mixed(rho) => rho.nrows(),
        }
    }

    /// Position probabilities on the lattice.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            SmeState::Pure(psi) => psi.iter().map(|z| z.norm_sqr()).collect(),
            SmeState::Mixed(rho) => (0..rho.nrows()).map(|a| rho[(a, a)].re).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn purity(&self) -> f64 {
        match self {
            SmeState::Pure(psi) => psi.iter().map(|z| z.norm_sqr()).sum::<f64>().powi(2),
            SmeState::Mixed(rho) => rho.iter().map(|z| z.norm_sqr()).sum(),
        }
    }

    /// Largest |ρ_ab − conj ρ_ba|.
    pub fn hermitian_deviation(&self) -> f64 {
        match self {
            SmeState::Pure(_) => 0.0,
            SmeState::Mixed(rho) => {
                let n = rho.nrows();
                let mut d: f64 = 0.0;
                for a in 0..n {
                    for b in a..n {
                        d = d.max((rho[(a, b)] - rho[(b, a)].conj()).norm());
                    }
                }
                d
            }
        }
    }

    /// (⟨X⟩, Var X).
    pub fn position_moments(&self, lattice: &Lattice) -> (f64, f64) {
        let diag = self.diagonal();
        let tr: f64 = diag.iter().sum();
        let mean = diag.iter().enumerate().map(|(a, w)| w * lattice.x(a)).sum::<f64>() / tr;
        let var = diag
            .iter()
            .enumerate()
            .map(|(a, w)| {
                let d = lattice.x(a) - mean;
                w * d * d
            })
            .sum::<f64>()
            / tr;
        (mean, var)
    }

    /// Momentum probabilities on the discrete momenta of `lattice`.
    pub fn momentum_distribution(&self, lattice: &Lattice) -> Vec<f64> {
        let n = lattice.n;
        let scale = 1.0 / n as f64;
        match self {
            SmeState::Pure(psi) => {
                let mut buf = psi.clone();
                lattice.fft.forward.process(&mut buf);
                buf.iter().map(|z| z.norm_sqr() * scale).collect()
            }
            SmeState::Mixed(rho) => {
                // diag(F ρ F†)/n, using (Fρ)† = ρF† for Hermitian ρ.
                let mut a = rho.clone();
                map_columns(&mut a, &lattice.fft, false);
                let mut b = a.adjoint();
                map_columns(&mut b, &lattice.fft, false);
                (0..n).map(|j| b[(j, j)].re * scale).collect()
            }
        }
    }

    /// (⟨P⟩, ⟨P²⟩).
    pub fn momentum_moments(&self, lattice: &Lattice) -> (f64, f64) {
        let probs = self.momentum_distribution(lattice);
        let tr: f64 = probs.iter().sum();
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (j, w) in probs.iter().enumerate() {
            let p = lattice.momentum(j);
            m1 += w * p;
            m2 += w * p * p;
        }
        (m1 / tr, m2 / tr)
    }

    /// Probability in the outer 1/32 of the lattice at either end.
    pub fn edge_probability(&self) -> f64 {
        let diag = self.diagonal();
        let band = (diag.len() / 32).max(1);
        diag[..band].iter().sum::<f64>() + diag[diag.len() - band..].iter().sum::<f64>()
    }
}

fn normalize_vec(psi: &mut [Complex64]) -> Result<f64> {
    let nrm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
    if !(nrm > 0.0 && nrm.is_finite()) {
        return Err(Error::Numerical(format!("wavefunction norm is {nrm}")));
    }
    let s = 1.0 / nrm.sqrt();
    psi.iter_mut().for_each(|z| *z *= s);
    Ok(nrm)
}

/// In-place FFT of every column (unnormalized).
fn map_columns(m: &mut DMatrix<Complex64>, fft: &FftPair, inverse: bool) {
    let n = m.nrows();
    let plan = if inverse { &fft.inverse } else { &fft.forward };
    let scratch_len = plan.get_inplace_scratch_len();
    m.as_mut_slice().par_chunks_mut(n).for_each_init(
        || vec![Complex64::new(0.0, 0.0); scratch_len],
        |scratch, col| plan.process_with_scratch(col, scratch),
    );
}

/// Potential, lattice and the cached unitary pieces of one system.
#[derive(Debug, Clone)]
pub struct SmeSystem {
    pub lattice: Lattice,
    pub potential: Potential,
    kick_phase: Option<Vec<Complex64>>,
}

impl SmeSystem {
    pub fn new(lattice: Lattice, potential: Potential) -> Result<Self> {
        potential.validate()?;
        let kick_phase = match potential {
            Potential::KickedRotor { .. } => Some(
                (0..lattice.n)
                    .map(|a| Complex64::from_polar(1.0, -potential.v(lattice.x(a), 0.0) / lattice.hbar))
                    .collect(),
            ),
            _ => None,
        };
        Ok(Self { lattice, potential, kick_phase })
    }

    fn kinetic_phase(&self, tau: f64) -> Vec<Complex64> {
        let m = self.potential.mass();
        let hbar = self.lattice.hbar;
        (0..self.lattice.n)
            .map(|j| {
                let p = self.lattice.momentum(j);
                Complex64::from_polar(1.0 / self.lattice.n as f64, -p * p * tau / (2.0 * m * hbar))
            })
            .collect()
    }

    fn potential_phase(&self, t_mid: f64, tau: f64) -> Option<Vec<Complex64>> {
        if matches!(self.potential, Potential::FreeParticle { .. } | Potential::KickedRotor { .. }) {
            return None;
        }
        let hbar = self.lattice.hbar;
        Some(
            (0..self.lattice.n)
                .map(|a| Complex64::from_polar(1.0, -self.potential.v(self.lattice.x(a), t_mid) * tau / hbar))
                .collect(),
        )
    }

    /// Phases of the unitary `K(τ/2) V(τ) K(τ/2)` starting at `t`.
    fn unitary(&self, t: f64, tau: f64) -> UnitaryStep {
        UnitaryStep {
            half: self.kinetic_phase(0.5 * tau),
            full: self.kinetic_phase(tau),
            potential: self.potential_phase(t + 0.5 * tau, tau),
        }
    }
}

struct UnitaryStep {
    /// Kinetic phases for τ/2 and τ, including the 1/n of the inverse transform.
    half: Vec<Complex64>,
    full: Vec<Complex64>,
    potential: Option<Vec<Complex64>>,
}

impl UnitaryStep {
    fn apply_vec(&self, v: &mut [Complex64], fft: &FftPair, scratch: &mut [Complex64]) {
        let kin = |v: &mut [Complex64], phase: &[Complex64], scratch: &mut [Complex64]| {
            fft.forward.process_with_scratch(v, scratch);
            v.iter_mut().zip(phase).for_each(|(z, k)| *z *= k);
            fft.inverse.process_with_scratch(v, scratch);
        };
        match &self.potential {
            Some(pot) => {
                kin(v, &self.half, scratch);
                v.iter_mut().zip(pot).for_each(|(z, u)| *z *= u);
                kin(v, &self.half, scratch);
            }
            None => kin(v, &self.full, scratch),
        }
    }
}

fn apply_unitary(state: &mut SmeState, u: &UnitaryStep, fft: &FftPair) {
    let scratch_len = fft.forward.get_inplace_scratch_len().max(fft.inverse.get_inplace_scratch_len());
    match state {
        SmeState::Pure(psi) => {
            let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
            u.apply_vec(psi, fft, &mut scratch);
        }
        SmeState::Mixed(rho) => {
            let n = rho.nrows();
            let cols = |m: &mut DMatrix<Complex64>| {
                m.as_mut_slice().par_chunks_mut(n).for_each_init(
                    || vec![Complex64::new(0.0, 0.0); scratch_len],
                    |scratch, col| u.apply_vec(col, fft, scratch),
                )
            };
            // U ρ, then U (Uρ)† = U ρ U†.
            cols(rho);
            let mut b = rho.adjoint();
            cols(&mut b);
            *rho = b;
            hermitize(rho);
        }
    }
}

fn apply_diagonal_phase(state: &mut SmeState, phase: &[Complex64]) {
    match state {
        SmeState::Pure(psi) => psi.iter_mut().zip(phase).for_each(|(z, u)| *z *= u),
        SmeState::Mixed(rho) => {
            let n = rho.nrows();
            for b in 0..n {
                let ub = phase[b].conj();
                for a in 0..n {
                    rho[(a, b)] *= phase[a] * ub;
                }
            }
        }
    }
}

fn hermitize(rho: &mut DMatrix<Complex64>) {
    let n = rho.nrows();
    for a in 0..n {
        rho[(a, a)].im = 0.0;
        for b in a + 1..n {
            let v = 0.5 * (rho[(a, b)] + rho[(b, a)].conj());
            rho[(a, b)] = v;
            rho[(b, a)] = v.conj();
        }
    }
}

/// Measurement update over `dt` with Wiener increment `dw`, followed by
/// trace renormalization. Returns ⟨X⟩ before the update and the trace
/// change the update produced.
pub fn measurement_step(
    state: &mut SmeState,
    lattice: &Lattice,
    config: &SmeConfig,
    dw: f64,
) -> Result<(f64, f64)> {
    let (k, eta, dt) = (config.k, config.eta, config.dt);
    let c = config.noise();
    let (mean, var) = state.position_moments(lattice);
    let xs = lattice.positions();
    let xt: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let drift = match state {
        SmeState::Pure(psi) => {
            if eta != 1.0 && k > 0.0 {
                return Err(Error::Misuse("a pure-state trajectory needs η = 1".into()));
            }
            for (z, &d) in psi.iter_mut().zip(&xt) {
                let f = match config.scheme {
                    Scheme::EulerMaruyama => 1.0 - k * d * d * dt + c * d * dw,
                    Scheme::Milstein => {
                        1.0 - k * d * d * dt + c * d * dw + 0.5 * c * c * (d * d - 2.0 * var) * (dw * dw - dt)
                    }
                    Scheme::Exponential => (c * d * dw - 2.0 * k * d * d * dt).exp(),
                };
                *z *= f;
            }
            let nrm = normalize_vec(psi)?;
            nrm - 1.0
        }
        SmeState::Mixed(rho) => {
            let n = rho.nrows();
            let kraus: Vec<f64> = xt.iter().map(|&d| (c * d * dw - 2.0 * eta * k * d * d * dt).exp()).collect();
            for b in 0..n {
                for a in 0..n {
                    let (da, db) = (xt[a], xt[b]);
                    let sep = xs[a] - xs[b];
                    let f = match config.scheme {
                        Scheme::EulerMaruyama => 1.0 - k * sep * sep * dt + c * (da + db) * dw,
                        Scheme::Milstein => {
                            let s = da + db;
                            1.0 - k * sep * sep * dt + c * s * dw + 0.5 * c * c * (s * s - 4.0 * var) * (dw * dw - dt)
                        }
                        Scheme::Exponential => kraus[a] * kraus[b] * (-(1.0 - eta) * k * sep * sep * dt).exp(),
                    };
                    rho[(a, b)] *= f;
                }
            }
            let tr: f64 = (0..n).map(|a| rho[(a, a)].re).sum();
            if !(tr > 0.0 && tr.is_finite()) {
                return Err(Error::Numerical(format!("trace became {tr} in a measurement update")));
            }
            *rho /= Complex64::new(tr, 0.0);
            tr - 1.0
        }
    };
    // The Kraus update changes the trace by design (outcome probability).
    if config.scheme != Scheme::Exponential && drift.abs() > TRACE_STEP_TOL {
        return Err(Error::Numerical(format!(
            "trace changed by {drift} in one measurement update; reduce dt"
        )));
    }
    Ok((mean, drift))
}

impl SmeConfig {
    /// The step actually taken for a potential: the rotor needs a whole number
    /// of steps per kick period.
    pub fn effective_dt(&self, potential: &Potential) -> f64 {
        if potential.is_kicked() {
            1.0 / (1.0 / self.dt - 1e-9).ceil()
        } else {
            self.dt
        }
    }
}

/// Per-step samples of the measured signal ⟨X⟩ + ξ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementRecord {
    /// Step start times.
    pub times: Vec<f64>,
    pub record: Vec<f64>,
}

impl MeasurementRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn append(&mut self, other: &MeasurementRecord) {
        self.times.extend_from_slice(&other.times);
        self.record.extend_from_slice(&other.record);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,record")?;
        for (t, r) in self.times.iter().zip(&self.record) {
            writeln!(w, "{},{}", fmt17(*t), fmt17(*r))?;
        }
        Ok(())
    }
}

/// Everything needed to continue a trajectory bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SmeCheckpoint {
    pub index: u64,
    pub word_pos: u128,
    pub step: i64,
    pub origin: f64,
    pub state: SmeState,
}

const CKPT_MAGIC: &[u8; 4] = b"MSME";
const CKPT_VERSION: u32 = 1;

impl SmeCheckpoint {
    /// Little-endian binary: magic, version, index, word position, step,
    /// origin, kind byte (0 pure, 1 mixed), n, then n or n² complex values
    /// (column-major).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&self.index.to_le_bytes())?;
        w.write_all(&self.word_pos.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.origin.to_le_bytes())?;
        let (kind, n, vals): (u8, usize, &[Complex64]) = match &self.state {
            SmeState::Pure(psi) => (0, psi.len(), psi),
            SmeState::Mixed(rho) => (1, rho.nrows(), rho.as_slice()),
        };
        w.write_all(&[kind])?;
        w.write_all(&(n as u64).to_le_bytes())?;
        for z in vals {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not an SME checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut b16 = [0u8; 16];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b8)?;
        let index = u64::from_le_bytes(b8);
        r.read_exact(&mut b16)?;
        let word_pos = u128::from_le_bytes(b16);
        r.read_exact(&mut b8)?;
        let step = i64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let origin = f64::from_le_bytes(b8);
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let count = match kind[0] {
            0 => n,
            1 => n * n,
            k => return Err(Error::Format(format!("unknown state kind {k}"))),
        };
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let re = f64::from_le_bytes(b8);
            r.read_exact(&mut b8)?;
            vals.push(Complex64::new(re, f64::from_le_bytes(b8)));
        }
        let state = if kind[0] == 0 { SmeState::Pure(vals) } else { SmeState::Mixed(DMatrix::from_vec(n, n, vals)) };
        Ok(Self { index, word_pos, step, origin, state })
    }
}

/// One conditioned trajectory with its private noise stream.
#[derive(Debug, Clone)]
pub struct SmeTrajectory {
    pub system: SmeSystem,
    pub config: SmeConfig,
    pub index: u64,
    pub state: SmeState,
    rng: ChaCha8Rng,
    step: i64,
    origin: f64,
    dt: f64,
    steps_per_kick: Option<i64>,
    pub measurement: MeasurementRecord,
}

impl SmeTrajectory {
    pub fn new(system: SmeSystem, config: SmeConfig, index: u64, state: SmeState) -> Result<Self> {
        config.validate()?;
        if state.dim() != system.lattice.n {
            return Err(Error::Misuse(format!(
                "state has dimension {}, lattice has {}",
                state.dim(),
                system.lattice.n
            )));
        }
        if matches!(state, SmeState::Pure(_)) && config.eta != 1.0 && config.k > 0.0 {
            return Err(Error::Config("a pure-state trajectory needs η = 1; start from a density matrix".into()));
        }
        let tr = state.trace();
        if (tr - 1.0).abs() > 1e-8 {
            return Err(Error::Misuse(format!("initial state has trace {tr}")));
        }
        let dt = config.effective_dt(&system.potential);
        let steps_per_kick = system.potential.is_kicked().then(|| (1.0 / dt).round() as i64);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index);
        Ok(Self {
            system,
            config: SmeConfig { dt, ..config },
            index,
            state,
            rng,
            step: 0,
            origin: 0.0,
            dt,
            steps_per_kick,
            measurement: MeasurementRecord::default(),
        })
    }

    pub fn resume(system: SmeSystem, config: SmeConfig, ckpt: SmeCheckpoint) -> Result<Self> {
        let mut tr = Self::new(system, config, ckpt.index, ckpt.state)?;
        tr.rng.set_word_pos(ckpt.word_pos);
        tr.step = ckpt.step;
        tr.origin = ckpt.origin;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> SmeCheckpoint {
        SmeCheckpoint {
            index: self.index,
            word_pos: self.rng.get_word_pos(),
            step: self.step,
            origin: self.origin,
            state: self.state.clone(),
        }
    }

    pub fn t(&self) -> f64 {
        self.origin + self.step as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Next Wiener increment of this trajectory's stream, variance dt.
    pub fn draw(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        z * self.dt.sqrt()
    }

    /// One step with a caller-supplied increment (the stream is not advanced).
    pub fn step_with(&mut self, dw: f64) -> Result<()> {
        let t = self.t();
        if let Some(per) = self.steps_per_kick {
            if self.step % per == 0 {
                let phase = self.system.kick_phase.as_ref().expect("kick phase");
                apply_diagonal_phase(&mut self.state, phase);
            }
        }
        let half = 0.5 * self.dt;
        let fft = self.system.lattice.fft.clone();
        apply_unitary(&mut self.state, &self.system.unitary(t, half), &fft);
        let (mean, _) = measurement_step(&mut self.state, &self.system.lattice, &self.config, dw)?;
        apply_unitary(&mut self.state, &self.system.unitary(t + half, half), &fft);
        self.step += 1;
        let rate = 8.0 * self.config.eta * self.config.k;
        let signal = if rate > 0.0 { mean + dw / (self.dt * rate.sqrt()) } else { mean };
        self.measurement.times.push(t);
        self.measurement.record.push(signal);
        self.check_health()
    }

    pub fn step(&mut self) -> Result<()> {
        let dw = self.draw();
        self.step_with(dw)
    }

    fn check_health(&self) -> Result<()> {
        let t = self.t();
        let finite = match &self.state {
            SmeState::Pure(psi) => psi.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
            SmeState::Mixed(rho) => rho.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        };
        if !finite {
            return Err(Error::Numerical(format!("non-finite state at t = {t}")));
        }
        let edge = self.state.edge_probability();
        if edge > EDGE_PROB_LIMIT {
            return Err(Error::Truncation(format!("probability {edge} reached the lattice edge at t = {t}")));
        }
        Ok(())
    }

    /// Logged observables of the current state.
    pub fn observables(&self) -> Vec<(&'static str, f64)> {
        let lat = &self.system.lattice;
        let (x, _) = self.state.position_moments(lat);
        let (p, p2) = self.state.momentum_moments(lat);
        vec![("x", x), ("p", p), ("p2", p2), ("purity", self.state.purity())]
    }

    fn target_step(&self, t_final: f64) -> Result<i64> {
        let s = ((t_final - self.origin) / self.dt).round();
        if ((self.origin + s * self.dt) - t_final).abs() > 1e-9 * t_final.abs().max(1.0) {
            return Err(Error::Sequencing(format!("t_final {t_final} is not on the step lattice dt = {}", self.dt)));
        }
        if (s as i64) < self.step {
            return Err(Error::Sequencing(format!("t_final {t_final} lies before the current time {}", self.t())));
        }
        Ok(s as i64)
    }

    /// Advances to `t_final`, logging observables every `interval` (and at
    /// both ends unless `include_start` is false).
    pub fn run_to(&mut self, t_final: f64, interval: f64, include_start: bool) -> Result<TrajectoryRecord> {
        let last = self.target_step(t_final)?;
        let every = ((interval / self.dt).round() as i64).max(1);
        let mut rec = TrajectoryRecord::new();
        rec.set_meta("sme", &self.config.describe());
        rec.set_meta("seed", &self.config.seed.to_string());
        rec.set_meta("stream", &self.index.to_string());
        rec.set_meta("potential", &format!("{:?}", self.system.potential));
        rec.set_meta(
            "lattice",
            &format!("n={} x_min={} h={} hbar={}", self.system.lattice.n, fmt17(self.system.lattice.x_min), fmt17(self.system.lattice.h), fmt17(self.system.lattice.hbar)),
        );
        if include_start {
            rec.push(self.t(), &self.observables())?;
        }
        while self.step < last {
            self.step()?;
            if self.step % every == 0 || self.step == last {
                rec.push(self.t(), &self.observables())?;
            }
        }
        Ok(rec)
    }
}

/// Result of one trajectory of an ensemble.
#[derive(Debug, Clone)]
pub struct SmeRun {
    pub index: u64,
    pub record: TrajectoryRecord,
    pub measurement: MeasurementRecord,
    pub state: SmeState,
}

/// Single trajectory from `initial` to `t_final` on stream `index`.
pub fn run_trajectory(
    system: &SmeSystem,
    config: &SmeConfig,
    initial: &SmeState,
    index: u64,
    t_final: f64,
    interval: f64,
) -> Result<SmeRun> {
    let mut tr = SmeTrajectory::new(system.clone(), *config, index, initial.clone())?;
    let record = tr.run_to(t_final, interval, true)?;
    Ok(SmeRun { index, record, measurement: tr.measurement, state: tr.state })
}

/// `config.n_traj` independent trajectories on streams 0, 1, …, in index order.
pub fn run_ensemble(
    system: &SmeSystem,
    config: &SmeConfig,
    initial: &SmeState,
    t_final: f64,
    interval: f64,
) -> Result<Vec<SmeRun>> {
    (0..config.n_traj as u64)
        .into_par_iter()
        .map(|i| run_trajectory(system, config, initial, i, t_final, interval))
        .collect()
}

/// Mean of every series across trajectories, plus `<name>_se` standard
/// errors. With a single trajectory the errors are undefined and omitted,
/// and the `se` metadata entry says so.
pub fn ensemble_average(records: &[TrajectoryRecord]) -> Result<TrajectoryRecord> {
    let first = records.first().ok_or_else(|| Error::Misuse("empty ensemble".into()))?;
    let config_of = |r: &TrajectoryRecord| {
        let mut m = r.metadata.clone();
        m.remove("stream");
        m
    };
    let base = config_of(first);
    let mut streams = std::collections::BTreeSet::new();
    for r in records {
        if config_of(r) != base {
            return Err(Error::Misuse("ensemble members were run with different configurations".into()));
        }
        if r.times != first.times || r.series.keys().ne(first.series.keys()) {
            return Err(Error::Misuse("ensemble members have different sampling".into()));
        }
        if let Some(s) = r.metadata.get("stream") {
            if !streams.insert(s.clone()) {
                return Err(Error::Misuse(format!("stream {s} appears twice in the ensemble")));
            }
        }
    }
    let n = records.len() as f64;
    let mut out = TrajectoryRecord::new();
    out.times = first.times.clone();
    out.metadata = base;
    out.set_meta("n_traj", &records.len().to_string());
    for name in first.series.keys() {
        let len = first.times.len();
        let mut mean = vec![0.0; len];
        for r in records {
            for (m, v) in mean.iter_mut().zip(&r.series[name]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        if records.len() > 1 {
            let mut var = vec![0.0; len];
            for r in records {
                for ((s, v), m) in var.iter_mut().zip(&r.series[name]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let se: Vec<f64> = var.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();
            out.series.insert(format!("{name}_se"), se);
        }
        out.series.insert(name.clone(), mean);
    }
    if records.len() == 1 {
        out.set_meta("se", "undefined (single trajectory)");
    }
    Ok(out)
}

/// Ratios `8ηk / [(|F''|/|F|)·√(|F'|/2m)]` at the typical points of a state.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRatio {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// One entry per typical point, in percentile order.
    pub ratios: Vec<f64>,
    /// The right-hand sides `(|F''|/|F|)·√(|F'|/2m)` at those points.
    pub rhs: Vec<f64>,
}

pub fn localization_ratio(potential: &Potential, state: &PhaseSpaceState, k: f64, eta: f64) -> Result<LocalizationRatio> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    if !(k >= 0.0) {
        return Err(Error::Config(format!("k must be ≥ 0, got {k}")));
    }
    let stats = force_stats(potential, state, state.t)?;
    let m = potential.mass();
    let rhs: Vec<f64> = stats
        .points
        .iter()
        .map(|p| {
            let curvature = if is_degenerate_value(p.force) { f64::INFINITY } else { p.d2force.abs() / p.force.abs() };
            let rate = (p.dforce.abs() / (2.0 * m)).sqrt();
            if curvature.is_infinite() && rate > 0.0 && !is_degenerate_value(p.d2force) {
                f64::INFINITY
            } else if curvature.is_infinite() {
                0.0
            } else {
                curvature * rate
            }
        })
        .collect();
    if rhs.iter().all(|&r| is_degenerate_value(r)) {
        return Err(Error::DegenerateForce(
            "(|F''|/|F|)·√(|F'|/2m) vanishes at every typical point".into(),
        ));
    }
    let lhs = 8.0 * eta * k;
    let ratios: Vec<f64> = rhs
        .iter()
        .map(|&r| if lhs == 0.0 { 0.0 } else if is_degenerate_value(r) { f64::INFINITY } else { lhs / r })
        .collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(LocalizationRatio { min: sorted[0], median: sorted[sorted.len() / 2], max: sorted[sorted.len() - 1], ratios, rhs })
}
