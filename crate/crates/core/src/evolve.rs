//! Split-step spectral propagators for phase-space distributions.
//!
//! Each Strang step is `K(dt/2) · P(dt) · K(dt/2)`:
//!
//! * `K` is free streaming `f(x, p) → f(x − pτ/m, p)`, applied as a phase on
//!   the x-Fourier modes.
//! * `P` acts in the mixed `(x, λ)` representation, λ conjugate to p. The
//!   classical force term is the phase `exp(iλ V'(x) τ)`; the quantum term is
//!   the two-point kernel `exp{(iτ/ħ)[V(x + ħλ/2) − V(x − ħλ/2)]}`, which sums
//!   the whole odd-derivative Moyal series. Momentum diffusion contributes the
//!   damping `exp(−Dλ²τ)`.
//!
//! Transforms follow `f̂(λ) = Σ f(p) e^{−iλp}`, so a shift `f(p + a)` becomes
//! `e^{iλa} f̂`. The Nyquist bin is left unshifted, which keeps every step
//! exactly orthogonal on the grid.
//!
//! The kicked rotor's delta train is never sampled in time: at every integer
//! time the exact impulsive map for `κ cos q` is applied in the same mixed
//! representation.

use std::collections::HashMap;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{filter_cols, filter_rows, FftPair};
use crate::observables::TrajectoryRecord;
use crate::phasespace::{Kind, PhaseSpaceGrid, PhaseSpaceState};
use crate::potentials::Potential;
use crate::weyl;

/// Per-step tolerance on norm drift.
pub const STEP_NORM_TOL: f64 = 1e-8;
/// Largest tolerated |f| mass in the edge band of the box.
pub const EDGE_MASS_LIMIT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    ClassicalLiouville,
    ClassicalFokkerPlanck,
    QuantumLiouville,
    QuantumMaster,
}

impl Mode {
    pub fn is_quantum(self) -> bool {
        matches!(self, Mode::QuantumLiouville | Mode::QuantumMaster)
    }

    pub fn is_liouville(self) -> bool {
        matches!(self, Mode::ClassicalLiouville | Mode::QuantumLiouville)
    }

    pub fn output_kind(self) -> Kind {
        if self.is_quantum() {
            Kind::Wigner
        } else {
            Kind::Classical
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ClassicalLiouville => "classical_liouville",
            Mode::ClassicalFokkerPlanck => "classical_fokker_planck",
            Mode::QuantumLiouville => "quantum_liouville",
            Mode::QuantumMaster => "quantum_master",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "classical_liouville" => Mode::ClassicalLiouville,
            "classical_fokker_planck" => Mode::ClassicalFokkerPlanck,
            "quantum_liouville" => Mode::QuantumLiouville,
            "quantum_master" => Mode::QuantumMaster,
            _ => return None,
        })
    }
}

/// How the quantum potential term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Moyal {
    /// Two-point kernel V(x + ħλ/2) − V(x − ħλ/2), all orders.
    ExactKernel,
    /// Odd-derivative series up to and including order `lambda_max`.
    Truncated { lambda_max: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionConfig {
    pub mode: Mode,
    /// Momentum diffusion coefficient D.
    pub diffusion: f64,
    pub dt: f64,
    pub moyal: Moyal,
}

impl EvolutionConfig {
    pub fn new(mode: Mode, diffusion: f64, dt: f64) -> Self {
        Self { mode, diffusion, dt, moyal: Moyal::ExactKernel }
    }

    pub fn with_moyal(mut self, moyal: Moyal) -> Self {
        self.moyal = moyal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.diffusion >= 0.0 && self.diffusion.is_finite()) {
            return Err(Error::Config(format!("D must be ≥ 0, got {}", self.diffusion)));
        }
        if self.mode.is_liouville() && self.diffusion != 0.0 {
            return Err(Error::Config(format!(
                "{} requires D = 0 (got {})",
                self.mode.name(),
                self.diffusion
            )));
        }
        if let Moyal::Truncated { lambda_max } = self.moyal {
            if lambda_max == 0 || lambda_max % 2 == 0 {
                return Err(Error::Config(format!(
                    "truncated Moyal order must be odd and ≥ 1, got {lambda_max}"
                )));
            }
        }
        Ok(())
    }

    /// Effective Moyal treatment: classical modes always use the first-order term.
    fn effective_moyal(&self) -> Moyal {
        if self.mode.is_quantum() {
            self.moyal
        } else {
            Moyal::Truncated { lambda_max: 1 }
        }
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Phase (per unit time) of the potential term at position `x` and conjugate
/// momentum variable `lambda`, for the given Moyal treatment.
fn potential_rate(pot: &Potential, moyal: Moyal, hbar: f64, x: f64, t: f64, lambda: f64, kick: bool) -> f64 {
    let v = |y: f64| if kick { pot.v(y, t) } else { pot.smooth_v(y, t) };
    match moyal {
        Moyal::ExactKernel => {
            let a = 0.5 * hbar * lambda;
            (v(x + a) - v(x - a)) / hbar
        }
        Moyal::Truncated { lambda_max } => {
            if !kick && pot.is_kicked() {
                return 0.0;
            }
            let mut s = 0.0;
            let mut n = 1;
            while n <= lambda_max {
                let coeff = (0.5 * hbar).powi(n as i32 - 1) / factorial(n);
                s += coeff * lambda.powi(n as i32) * pot.derivative(x, t, n);
                n += 2;
            }
            s
        }
    }
}

/// Reusable transform plans and multiplier caches for one grid.
#[derive(Debug)]
pub struct Propagator {
    pub grid: PhaseSpaceGrid,
    pub potential: Potential,
    pub config: EvolutionConfig,
    pub hbar: f64,
    x_fft: FftPair,
    p_fft: FftPair,
    work: Vec<f64>,
    kinetic_cache: HashMap<u64, Vec<Complex64>>,
    potential_cache: HashMap<u64, Vec<Complex64>>,
    kick_table: Option<Vec<Complex64>>,
}

impl Propagator {
    pub fn new(grid: &PhaseSpaceGrid, potential: Potential, config: EvolutionConfig, hbar: f64) -> Result<Self> {
        config.validate()?;
        potential.validate()?;
        if !(hbar > 0.0) {
            return Err(Error::Config("hbar must be positive".into()));
        }
        if potential.is_kicked() && !grid.is_periodic() {
            return Err(Error::Domain("the kicked rotor needs a periodic_x grid".into()));
        }
        if !grid.is_periodic() && config.mode.is_quantum() {
            let reach = 0.5 * hbar * grid.lambda_max();
            if reach > grid.x_max - grid.x_min {
                return Err(Error::Domain(format!(
                    "kernel shift ħλ_max/2 = {reach} exceeds the box length"
                )));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            potential,
            config,
            hbar,
            x_fft: FftPair::new(grid.nx),
            p_fft: FftPair::new(grid.np),
            work: Vec::new(),
            kinetic_cache: HashMap::new(),
            potential_cache: HashMap::new(),
            kick_table: None,
        })
    }

    fn check_state(&self, state: &PhaseSpaceState) -> Result<()> {
        if state.grid != self.grid {
            return Err(Error::Misuse("state grid differs from propagator grid".into()));
        }
        Ok(())
    }

    /// Free streaming over `tau`: f(x, p) → f(x − pτ/m, p).
    pub fn kinetic(&mut self, state: &mut PhaseSpaceState, tau: f64) -> Result<()> {
        self.check_state(state)?;
        let g = &self.grid;
        let m = self.potential.mass();
        let p_abs = g.p_min.abs().max(g.p_max.abs());
        if p_abs * tau.abs() / m > 0.5 * (g.x_max - g.x_min) {
            return Err(Error::Config(format!(
                "free-streaming shift {} per step exceeds half the x extent; reduce dt",
                p_abs * tau.abs() / m
            )));
        }
        let (nx, np) = (g.nx, g.np);
        let table = self.kinetic_cache.entry(tau.to_bits()).or_insert_with(|| {
            let mut t = vec![Complex64::new(1.0, 0.0); nx * np];
            for l in 0..np {
                let v = g.p(l) / m * tau;
                for mi in 0..nx {
                    let b = crate::fft::signed_bin(mi, nx);
                    if b == -(nx as i64 / 2) {
                        continue;
                    }
                    t[l * nx + mi] = Complex64::from_polar(1.0, -g.k_of(b) * v);
                }
            }
            t
        });
        let table: &Vec<Complex64> = table;
        filter_cols(&mut state.f, nx, &self.x_fft, &mut self.work, |l, b| {
            let mi = if b < 0 { (b + nx as i64) as usize } else { b as usize };
            table[l * nx + mi]
        });
        Ok(())
    }

    fn build_potential_table(&self, t_mid: f64, tau: f64, kick: bool) -> Vec<Complex64> {
        self.build_table_for(&self.potential, t_mid, tau, kick)
    }

    fn build_table_for(&self, potential: &Potential, t_mid: f64, tau: f64, kick: bool) -> Vec<Complex64> {
        let g = &self.grid;
        let (nx, np) = (g.nx, g.np);
        let moyal = self.config.effective_moyal();
        let d = if kick { 0.0 } else { self.config.diffusion };
        let mut table = vec![Complex64::new(1.0, 0.0); nx * np];
        for i in 0..nx {
            let x = g.x(i);
            for mi in 0..np {
                let b = crate::fft::signed_bin(mi, np);
                let lam = g.lambda_of(b);
                let damp = (-d * lam * lam * tau).exp();
                if b == -(np as i64 / 2) {
                    table[i * np + mi] = Complex64::new(damp, 0.0);
                    continue;
                }
                let phase = tau * potential_rate(potential, moyal, self.hbar, x, t_mid, lam, kick);
                table[i * np + mi] = Complex64::from_polar(damp, phase);
            }
        }
        table
    }

    fn time_independent_potential(&self) -> bool {
        match self.potential {
            Potential::Duffing { lambda, omega, .. } => lambda == 0.0 || omega == 0.0,
            _ => true,
        }
    }

    fn has_smooth_potential(&self) -> bool {
        !matches!(self.potential, Potential::FreeParticle { .. } | Potential::KickedRotor { .. })
    }

    /// Potential force and diffusion over `[t, t + tau]`, with V frozen at the midpoint.
    pub fn potential_step(&mut self, state: &mut PhaseSpaceState, t: f64, tau: f64) -> Result<()> {
        self.check_state(state)?;
        if !self.has_smooth_potential() && self.config.diffusion == 0.0 {
            return Ok(());
        }
        let np = self.grid.np;
        let t_mid = t + 0.5 * tau;
        if self.time_independent_potential() {
            let key = tau.to_bits();
            if !self.potential_cache.contains_key(&key) {
                let tab = self.build_potential_table(t_mid, tau, false);
                self.potential_cache.insert(key, tab);
            }
            let table = &self.potential_cache[&key];
            filter_rows(&mut state.f, &self.p_fft, |i, b| {
                let mi = if b < 0 { (b + np as i64) as usize } else { b as usize };
                table[i * np + mi]
            });
        } else if let Potential::Duffing { m, a, b, lambda, omega } = self.potential {
            // The drive is linear in x, so its phase depends on λ alone and
            // multiplies a cached table of the undriven oscillator.
            let key = tau.to_bits();
            if !self.potential_cache.contains_key(&key) {
                let undriven = Potential::Duffing { m, a, b, lambda: 0.0, omega };
                let tab = self.build_table_for(&undriven, t_mid, tau, false);
                self.potential_cache.insert(key, tab);
            }
            let table = &self.potential_cache[&key];
            let drive = lambda * (omega * t_mid).cos();
            let shift: Vec<Complex64> = (0..np)
                .map(|mi| {
                    let bin = crate::fft::signed_bin(mi, np);
                    if bin == -(np as i64 / 2) {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::from_polar(1.0, drive * self.grid.lambda_of(bin) * tau)
                    }
                })
                .collect();
            filter_rows(&mut state.f, &self.p_fft, |i, b| {
                let mi = if b < 0 { (b + np as i64) as usize } else { b as usize };
                table[i * np + mi] * shift[mi]
            });
        } else {
            let table = self.build_potential_table(t_mid, tau, false);
            filter_rows(&mut state.f, &self.p_fft, |i, b| {
                let mi = if b < 0 { (b + np as i64) as usize } else { b as usize };
                table[i * np + mi]
            });
        }
        Ok(())
    }

    /// Exact impulsive kick of the rotor. `state.t` must sit on an integer.
    pub fn kick(&mut self, state: &mut PhaseSpaceState) -> Result<()> {
        self.check_state(state)?;
        let Potential::KickedRotor { .. } = self.potential else {
            return Err(Error::Misuse("kick requested for a non-kicked potential".into()));
        };
        if !self.grid.is_periodic() {
            return Err(Error::Domain("kick needs a periodic_x grid".into()));
        }
        if (state.t - state.t.round()).abs() > 1e-9 {
            return Err(Error::Sequencing(format!("kick called at non-integer time {}", state.t)));
        }
        if self.kick_table.is_none() {
            self.kick_table = Some(self.build_potential_table(0.0, 1.0, true));
        }
        let np = self.grid.np;
        let table = self.kick_table.as_ref().expect("kick table");
        filter_rows(&mut state.f, &self.p_fft, |i, b| {
            let mi = if b < 0 { (b + np as i64) as usize } else { b as usize };
            table[i * np + mi]
        });
        Ok(())
    }

    /// One Strang step of length `dt` starting at `state.t`.
    pub fn strang_step(&mut self, state: &mut PhaseSpaceState, dt: f64) -> Result<()> {
        let t = state.t;
        self.kinetic(state, 0.5 * dt)?;
        self.potential_step(state, t, dt)?;
        self.kinetic(state, 0.5 * dt)?;
        state.t = t + dt;
        Ok(())
    }
}

/// Free streaming of a state over `tau` for mass `m`.
pub fn kinetic_half_step(state: &PhaseSpaceState, m: f64, tau: f64) -> Result<PhaseSpaceState> {
    let mut out = state.clone();
    let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, tau.abs().max(f64::MIN_POSITIVE));
    let mut prop = Propagator::new(&state.grid, Potential::FreeParticle { m }, cfg, state.hbar)?;
    prop.kinetic(&mut out, tau)?;
    Ok(out)
}

/// Potential (and diffusion) step over `[t, t + dt]`.
pub fn potential_step(
    state: &PhaseSpaceState,
    potential: &Potential,
    config: &EvolutionConfig,
    t: f64,
    dt: f64,
) -> Result<PhaseSpaceState> {
    let mut out = state.clone();
    let mut prop = Propagator::new(&state.grid, *potential, *config, state.hbar)?;
    prop.potential_step(&mut out, t, dt)?;
    out.kind = config.mode.output_kind();
    Ok(out)
}

/// Exact rotor kick with strength `kappa`.
pub fn kick_step(state: &PhaseSpaceState, kappa: f64, config: &EvolutionConfig) -> Result<PhaseSpaceState> {
    let mut out = state.clone();
    let mut prop = Propagator::new(&state.grid, Potential::KickedRotor { kappa }, *config, state.hbar)?;
    prop.kick(&mut out)?;
    out.kind = config.mode.output_kind();
    Ok(out)
}

/// Which diagnostics to record and how often.
#[derive(Debug, Clone, PartialEq)]
pub struct Observers {
    /// Recording interval in time units; the start and end are always recorded.
    pub interval: f64,
    pub moments: bool,
    pub purity: bool,
    pub gamma: bool,
    /// Negative mass and smallest eigenvalue of the Weyl-transformed state.
    pub spectrum: bool,
    /// Lattice stride for the Weyl transform (see `weyl::to_density_matrix_strided`).
    pub spectrum_stride: usize,
}

impl Default for Observers {
    fn default() -> Self {
        Self { interval: 1.0, moments: true, purity: true, gamma: true, spectrum: false, spectrum_stride: 1 }
    }
}

impl Observers {
    pub fn every(interval: f64) -> Self {
        Self { interval, ..Self::default() }
    }

    pub fn with_spectrum(mut self) -> Self {
        self.spectrum = true;
        self
    }

    pub fn with_spectrum_stride(mut self, stride: usize) -> Self {
        self.spectrum = true;
        self.spectrum_stride = stride;
        self
    }

    fn record(&self, rec: &mut TrajectoryRecord, state: &PhaseSpaceState) -> Result<()> {
        let mut vals: Vec<(&str, f64)> = vec![("norm", state.norm())];
        if self.moments {
            vals.push(("x", state.moment(1, 0).value));
            vals.push(("p", state.moment(0, 1).value));
            vals.push(("x2", state.moment(2, 0).value));
            vals.push(("p2", state.moment(0, 2).value));
        }
        if self.purity {
            vals.push(("purity", state.purity()));
        }
        if self.gamma {
            vals.push(("gamma", weyl::gamma(state)));
        }
        if self.spectrum {
            let rep = weyl::spectrum(&weyl::to_density_matrix_strided(state, self.spectrum_stride)?)?;
            vals.push(("nu", rep.negative_mass));
            vals.push(("min_eig", rep.min_eigenvalue()));
        }
        rec.push(state.t, &vals)
    }
}

/// Step schedule shared by fresh and resumed runs: steps sit on the lattice
/// `t = s · dt_eff`, so a run resumed at a lattice time reproduces the
/// uninterrupted run exactly.
#[derive(Debug, Clone, Copy)]
struct Schedule {
    dt: f64,
    first: i64,
    last: i64,
    steps_per_kick: Option<i64>,
    record_every: i64,
}

fn on_lattice(t: f64, dt: f64) -> Option<i64> {
    let s = (t / dt).round();
    if (s * dt - t).abs() <= 1e-9 * t.abs().max(1.0) {
        Some(s as i64)
    } else {
        None
    }
}

impl Schedule {
    fn new(potential: &Potential, dt: f64, t0: f64, t1: f64, interval: f64) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::Config(format!("t_final {t1} must exceed the state time {t0}")));
        }
        if potential.is_kicked() {
            let per = (1.0 / dt - 1e-9).ceil() as i64;
            let dt_eff = 1.0 / per as f64;
            let first = on_lattice(t0, dt_eff).ok_or_else(|| {
                Error::Sequencing(format!("start time {t0} is not on the step lattice 1/{per}"))
            })?;
            let last = on_lattice(t1, dt_eff).ok_or_else(|| {
                Error::Sequencing(format!("final time {t1} is not on the step lattice 1/{per}"))
            })?;
            let record_every = ((interval / dt_eff).round() as i64).max(1);
            Ok(Self { dt: dt_eff, first, last, steps_per_kick: Some(per), record_every })
        } else {
            match (on_lattice(t0, dt), on_lattice(t1, dt)) {
                (Some(first), Some(last)) => {
                    let record_every = ((interval / dt).round() as i64).max(1);
                    Ok(Self { dt, first, last, steps_per_kick: None, record_every })
                }
                _ => {
                    // Shrink dt so the span holds a whole number of steps.
                    let n = ((t1 - t0) / dt - 1e-9).ceil() as i64;
                    let dt_eff = (t1 - t0) / n as f64;
                    let record_every = ((interval / dt_eff).round() as i64).max(1);
                    Ok(Self { dt: dt_eff, first: 0, last: n, steps_per_kick: None, record_every })
                }
            }
        }
    }

    fn time(&self, s: i64, origin: f64) -> f64 {
        origin + s as f64 * self.dt
    }
}

fn check_health(state: &PhaseSpaceState, prev_norm: f64) -> Result<f64> {
    let n = state.norm();
    if !n.is_finite() || state.f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite values at t = {}", state.t)));
    }
    if (n - prev_norm).abs() > STEP_NORM_TOL {
        return Err(Error::Numerical(format!(
            "norm drifted by {} in one step at t = {}",
            n - prev_norm,
            state.t
        )));
    }
    let edge = state.edge_mass();
    if edge > EDGE_MASS_LIMIT {
        return Err(Error::Truncation(format!(
            "mass {edge} reached the box edge at t = {}",
            state.t
        )));
    }
    Ok(n)
}

/// Evolves `state` to `t_final`, calling `on_record` at every recording time
/// (including the start and the end).
pub fn evolve_with<F>(
    state: &PhaseSpaceState,
    potential: &Potential,
    config: &EvolutionConfig,
    t_final: f64,
    observers: &Observers,
    mut on_record: F,
) -> Result<(TrajectoryRecord, PhaseSpaceState)>
where
    F: FnMut(&PhaseSpaceState) -> Result<()>,
{
    let mut prop = Propagator::new(&state.grid, *potential, *config, state.hbar)?;
    let sched = Schedule::new(potential, config.dt, state.t, t_final, observers.interval)?;
    let origin = if sched.first == 0 && sched.steps_per_kick.is_none() && on_lattice(state.t, config.dt).is_none() {
        state.t
    } else {
        0.0
    };
    let mut cur = state.clone();
    cur.kind = config.mode.output_kind();
    let mut rec = TrajectoryRecord::new();
    rec.set_meta("mode", config.mode.name());
    rec.set_meta("dt", &format!("{:.16e}", sched.dt));
    rec.set_meta("D", &format!("{:.16e}", config.diffusion));
    rec.set_meta("hbar", &format!("{:.16e}", state.hbar));
    rec.set_meta("potential", &format!("{potential:?}"));
    observers.record(&mut rec, &cur)?;
    on_record(&cur)?;
    let mut norm = cur.norm();
    for s in sched.first..sched.last {
        let t = sched.time(s, origin);
        cur.t = t;
        if let Some(per) = sched.steps_per_kick {
            if s.rem_euclid(per) == 0 {
                prop.kick(&mut cur)?;
            }
        }
        prop.strang_step(&mut cur, sched.dt)?;
        cur.t = sched.time(s + 1, origin);
        norm = check_health(&cur, norm)?;
        let done = s + 1 == sched.last;
        if done || (s + 1).rem_euclid(sched.record_every) == 0 {
            observers.record(&mut rec, &cur)?;
            on_record(&cur)?;
        }
    }
    Ok((rec, cur))
}

/// Evolves to `t_final` and returns the recorded diagnostics and the final state.
pub fn evolve_to(
    state: &PhaseSpaceState,
    potential: &Potential,
    config: &EvolutionConfig,
    t_final: f64,
    observers: &Observers,
) -> Result<(TrajectoryRecord, PhaseSpaceState)> {
    evolve_with(state, potential, config, t_final, observers, |_| Ok(()))
}

/// Moments of a classical Liouville (D = 0) flow from the method of
/// characteristics: the Gaussian initial density is sampled by a tensor
/// midpoint rule on `nodes × nodes` points over ±6σ, and every node is
/// transported along its exact trajectory (the impulsive map for the rotor,
/// leapfrog with step `dt` otherwise). Free of grid resolution limits, which
/// makes it the reference for long chaotic runs.
///
/// Records `x, p, x2, p2` at multiples of `interval` from `t0`; for the rotor
/// records fall on whole kick periods, before the kick at that time.
pub fn characteristic_moments(
    potential: &Potential,
    spec: crate::phasespace::GaussianSpec,
    t0: f64,
    t_final: f64,
    dt: f64,
    nodes: usize,
    interval: f64,
) -> Result<TrajectoryRecord> {
    use rayon::prelude::*;
    potential.validate()?;
    if nodes < 2 || !(dt > 0.0) || !(t_final > t0) || !(interval > 0.0) {
        return Err(Error::Config("characteristics need nodes ≥ 2, dt > 0, interval > 0 and t_final > t0".into()));
    }
    let m = potential.mass();
    let kicked = potential.is_kicked();
    // Substeps between records, and the record count.
    let (sub, n_rec, h) = if kicked {
        if (t0 - t0.round()).abs() > 1e-9 || (t_final - t_final.round()).abs() > 1e-9 {
            return Err(Error::Sequencing("rotor characteristics start and end on kick times".into()));
        }
        let every = interval.round().max(1.0) as usize;
        let total = (t_final - t0).round() as usize;
        (every, total / every, 1.0)
    } else {
        let every = ((interval / dt).round() as usize).max(1);
        let total = ((t_final - t0) / dt).round() as usize;
        (every, total / every, dt)
    };
    let half = 6.0;
    let du = 2.0 * half / nodes as f64;
    let u: Vec<f64> = (0..nodes).map(|i| -half + (i as f64 + 0.5) * du).collect();
    let w: Vec<f64> = u.iter().map(|v| (-0.5 * v * v).exp()).collect();
    let wsum: f64 = w.iter().sum::<f64>().powi(2);
    let kappa = match *potential {
        Potential::KickedRotor { kappa } => kappa,
        _ => 0.0,
    };
    // sums[r] = (Σw x, Σw p, Σw x², Σw p²) at record r.
    let sums = (0..nodes)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![[0.0f64; 4]; n_rec + 1];
            for j in 0..nodes {
                let wt = w[i] * w[j];
                let mut x = spec.x0 + spec.sigma_x * u[i];
                let mut p = spec.p0 + spec.sigma_p * u[j];
                let mut t = t0;
                for (r, a) in acc.iter_mut().enumerate() {
                    if r > 0 {
                        for _ in 0..sub {
                            if kicked {
                                p += kappa * x.sin();
                                x += p * h;
                            } else {
                                x += 0.5 * h * p / m;
                                p -= h * potential.dv(x, t + 0.5 * h);
                                x += 0.5 * h * p / m;
                            }
                            t += h;
                        }
                    }
                    a[0] += wt * x;
                    a[1] += wt * p;
                    a[2] += wt * x * x;
                    a[3] += wt * p * p;
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        // Summed in node order so the result does not depend on scheduling.
        .into_iter()
        .fold(vec![[0.0f64; 4]; n_rec + 1], |mut a, b| {
            for (u, v) in a.iter_mut().zip(&b) {
                for k in 0..4 {
                    u[k] += v[k];
                }
            }
            a
        });
    let mut rec = TrajectoryRecord::new();
    rec.set_meta("mode", "classical_characteristics");
    rec.set_meta("nodes", &nodes.to_string());
    rec.set_meta("potential", &format!("{potential:?}"));
    for (r, a) in sums.iter().enumerate() {
        let t = t0 + (r * sub) as f64 * h;
        rec.push(
            t,
            &[("x", a[0] / wsum), ("p", a[1] / wsum), ("x2", a[2] / wsum), ("p2", a[3] / wsum)],
        )?;
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasespace::{gaussian_state, Boundary, GaussianSpec};
    use std::f64::consts::PI;

    fn box_state(n: usize, l: f64, spec: GaussianSpec, hbar: f64) -> PhaseSpaceState {
        let g = PhaseSpaceGrid::new(n, n, -l, l, -l, l, Boundary::Box).unwrap();
        gaussian_state(&g, spec, Kind::Classical, hbar).unwrap()
    }

    #[test]
    fn driven_duffing_step_matches_direct_table() {
        let pot = Potential::Duffing { m: 1.0, a: 10.0, b: 0.5, lambda: 10.0, omega: 6.07 };
        let s0 = box_state(64, 6.0, GaussianSpec::new(-1.0, 2.0, 0.5, 1.0), 0.1);
        for mode in [Mode::ClassicalFokkerPlanck, Mode::QuantumMaster] {
            let mut prop = Propagator::new(&s0.grid, pot, EvolutionConfig::new(mode, 0.02, 0.01), 0.1).unwrap();
            let mut fast = s0.clone();
            prop.potential_step(&mut fast, 0.3, 0.01).unwrap();
            let table = prop.build_potential_table(0.305, 0.01, false);
            let mut direct = s0.clone();
            filter_rows(&mut direct.f, &prop.p_fft, |i, b| table[i * 64 + if b < 0 { (b + 64) as usize } else { b as usize }]);
            let err = fast.f.iter().zip(&direct.f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{mode:?}: {err}");
        }
    }

    /// Leapfrog on Hamilton's equations; the oracle for sign conventions.
    fn leapfrog(pot: &Potential, mut x: f64, mut p: f64, t0: f64, dt: f64, steps: usize) -> (f64, f64) {
        let m = pot.mass();
        let mut t = t0;
        for _ in 0..steps {
            x += 0.5 * dt * p / m;
            p -= dt * pot.dv(x, t + 0.5 * dt);
            x += 0.5 * dt * p / m;
            t += dt;
        }
        (x, p)
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::new(Mode::ClassicalLiouville, 0.1, 0.01).validate().is_err());
        assert!(EvolutionConfig::new(Mode::QuantumLiouville, 0.1, 0.01).validate().is_err());
        assert!(EvolutionConfig::new(Mode::QuantumMaster, 0.1, 0.01).validate().is_ok());
        assert!(EvolutionConfig::new(Mode::QuantumMaster, -0.1, 0.01).validate().is_err());
        assert!(EvolutionConfig::new(Mode::QuantumMaster, 0.0, 0.01)
            .with_moyal(Moyal::Truncated { lambda_max: 4 })
            .validate()
            .is_err());
    }

    #[test]
    fn free_streaming_spreads_as_expected() {
        let s = box_state(256, 16.0, GaussianSpec::new(0.0, 0.0, 0.8, 0.6), 1.0);
        let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.05);
        let (_, out) = evolve_to(&s, &Potential::FreeParticle { m: 1.5 }, &cfg, 4.0, &Observers::every(4.0)).unwrap();
        let expect = 0.8f64.powi(2) + (0.6 * 4.0 / 1.5f64).powi(2);
        let got = out.moment(2, 0).value;
        assert!((got - expect).abs() / expect < 0.01, "{got} vs {expect}");
        assert!((out.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_row_is_unchanged_by_streaming() {
        let g = PhaseSpaceGrid::new(64, 64, -8.0, 8.0, -8.0, 8.0, Boundary::Box).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(0.0, 0.0, 1.0, 1.0), Kind::Classical, 1.0).unwrap();
        let out = kinetic_half_step(&s, 1.0, 0.3).unwrap();
        let l0 = 32; // p = 0
        for i in 0..64 {
            assert!((out.at(i, l0) - s.at(i, l0)).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_means_match_transported_ensemble() {
        // Liouville transport: phase-space means equal the Gaussian-weighted
        // average of point trajectories, computed here by tensor quadrature.
        let pot = Potential::Duffing { m: 1.0, a: 1.0, b: 0.1, lambda: 0.5, omega: 1.3 };
        let g = PhaseSpaceGrid::new(256, 256, -6.0, 6.0, -6.0, 6.0, Boundary::Box).unwrap();
        let (x0, p0, sx, sp) = (1.0, 0.5, 0.3, 0.3);
        let s = gaussian_state(&g, GaussianSpec::new(x0, p0, sx, sp), Kind::Classical, 1.0).unwrap();
        let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.01);
        let (_, out) = evolve_to(&s, &pot, &cfg, 1.0, &Observers::every(1.0)).unwrap();
        let (mut wx, mut wp, mut wsum) = (0.0, 0.0, 0.0);
        let q = 24;
        for i in 0..=2 * q {
            for j in 0..=2 * q {
                let u = (i as f64 - q as f64) / q as f64 * 5.0;
                let v = (j as f64 - q as f64) / q as f64 * 5.0;
                let w = (-0.5 * (u * u + v * v)).exp();
                let (xe, pe) = leapfrog(&pot, x0 + sx * u, p0 + sp * v, 0.0, 1e-3, 1000);
                wx += w * xe;
                wp += w * pe;
                wsum += w;
            }
        }
        let (xo, po) = (wx / wsum, wp / wsum);
        let (xm, pm) = (out.moment(1, 0).value, out.moment(0, 1).value);
        assert!((xm - xo).abs() < 1e-3 && (pm - po).abs() < 1e-3, "({xm},{pm}) vs ({xo},{po})");
    }

    #[test]
    fn characteristics_agree_with_grid_liouville() {
        let pot = Potential::Duffing { m: 1.0, a: 1.0, b: 0.1, lambda: 0.5, omega: 1.3 };
        let spec = GaussianSpec::new(1.0, 0.5, 0.3, 0.3);
        let g = PhaseSpaceGrid::new(256, 256, -6.0, 6.0, -6.0, 6.0, Boundary::Box).unwrap();
        let s = gaussian_state(&g, spec, Kind::Classical, 1.0).unwrap();
        let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.01);
        let (rec, _) = evolve_to(&s, &pot, &cfg, 1.0, &Observers::every(0.5)).unwrap();
        let ch = characteristic_moments(&pot, spec, 0.0, 1.0, 1e-3, 64, 0.5).unwrap();
        assert_eq!(ch.len(), 3);
        for name in ["x", "p2"] {
            for (a, b) in rec.require(name).unwrap().iter().zip(ch.require(name).unwrap()) {
                assert!((a - b).abs() < 2e-3 * b.abs().max(1.0), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rotor_characteristics_first_kick() {
        // One kick of a wide blob: ⟨p²⟩ = σp² + κ²(1 − e^{−2σx²})/2.
        let spec = GaussianSpec::new(0.0, 0.0, 2.5, 1.0);
        let rec = characteristic_moments(&Potential::KickedRotor { kappa: 10.0 }, spec, 0.0, 1.0, 0.01, 200, 1.0).unwrap();
        let p2 = rec.require("p2").unwrap();
        let want = 1.0 + 50.0 * (1.0 - (-2.0f64 * 6.25).exp());
        assert!((p2[1] - want).abs() < 1e-6, "{} vs {want}", p2[1]);
    }

    #[test]
    fn diffusion_grows_momentum_variance() {
        let s = box_state(128, 12.0, GaussianSpec::new(0.0, 0.0, 1.0, 1.0), 1.0);
        let cfg = EvolutionConfig::new(Mode::ClassicalFokkerPlanck, 0.2, 0.05);
        let (_, out) = evolve_to(&s, &Potential::FreeParticle { m: 1.0 }, &cfg, 2.0, &Observers::every(2.0)).unwrap();
        let want = 1.0 + 2.0 * 0.2 * 2.0;
        let got = out.moment(0, 2).value;
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
    }

    #[test]
    fn harmonic_quantum_equals_classical_step() {
        let pot = Potential::Harmonic { m: 1.0, omega0: 1.0 };
        let s = box_state(64, 8.0, GaussianSpec::new(0.5, 0.0, 1.0, 1.0), 1.0);
        let q = potential_step(&s, &pot, &EvolutionConfig::new(Mode::QuantumLiouville, 0.0, 0.1), 0.0, 0.1).unwrap();
        let c = potential_step(&s, &pot, &EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.1), 0.0, 0.1).unwrap();
        let diff = q.f.iter().zip(&c.f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn truncated_first_order_is_classical() {
        let pot = Potential::Duffing { m: 1.0, a: 10.0, b: 0.5, lambda: 10.0, omega: 6.07 };
        let s = box_state(128, 8.0, GaussianSpec::new(-3.0, 1.0, 0.3, 1.0), 0.1);
        let q = potential_step(
            &s,
            &pot,
            &EvolutionConfig::new(Mode::QuantumLiouville, 0.0, 0.01).with_moyal(Moyal::Truncated { lambda_max: 1 }),
            0.2,
            0.01,
        )
        .unwrap();
        let c = potential_step(&s, &pot, &EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.01), 0.2, 0.01).unwrap();
        let diff = q.f.iter().zip(&c.f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn classical_kick_moves_blob() {
        let g = PhaseSpaceGrid::new(256, 256, -PI, PI, -20.0, 20.0, Boundary::PeriodicX).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(PI / 2.0, 0.0, 0.1, 0.5), Kind::Classical, 1.0).unwrap();
        let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.01);
        let out = kick_step(&s, 10.0, &cfg).unwrap();
        let p = out.moment(0, 1).value;
        // p → p + κ sin q averaged over the blob: κ e^{−σ²/2}
        let want = 10.0 * (-0.005f64).exp();
        assert!((p - want).abs() < 1e-3, "{p} vs {want}");
        let zero = kick_step(&s, 0.0, &cfg).unwrap();
        let diff = zero.f.iter().zip(&s.f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn kick_checks_sequencing_and_domain() {
        let g = PhaseSpaceGrid::new(64, 64, -PI, PI, -20.0, 20.0, Boundary::PeriodicX).unwrap();
        let mut s = gaussian_state(&g, GaussianSpec::new(0.0, 0.0, 0.5, 1.0), Kind::Classical, 1.0).unwrap();
        s.t = 0.5;
        let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.01);
        assert!(matches!(kick_step(&s, 1.0, &cfg), Err(Error::Sequencing(_))));
        let b = box_state(64, 8.0, GaussianSpec::new(0.0, 0.0, 1.0, 1.0), 1.0);
        assert!(matches!(kick_step(&b, 1.0, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn quantum_kick_creates_negativity() {
        let g = PhaseSpaceGrid::new(128, 1024, -PI, PI, -160.0, 160.0, Boundary::PeriodicX).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(0.0, 0.0, 2.5, 1.0).min_uncertainty(), Kind::Wigner, 5.0).unwrap();
        let cfg = EvolutionConfig::new(Mode::QuantumLiouville, 0.0, 0.01);
        let out = kick_step(&s, 10.0, &cfg).unwrap();
        assert!(weyl::gamma(&out) > 1e-3);
        assert!((out.norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn exact_kernel_matches_truncated_series_in_convergent_regime() {
        // ħλ/2 stays well below one over the state's λ-support.
        let g = PhaseSpaceGrid::new(64, 256, -PI, PI, -40.0, 40.0, Boundary::PeriodicX).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(0.0, 0.0, 0.125, 2.0).min_uncertainty(), Kind::Wigner, 0.5)
            .unwrap();
        let exact = kick_step(&s, 2.0, &EvolutionConfig::new(Mode::QuantumLiouville, 0.0, 0.01)).unwrap();
        let trunc = kick_step(
            &s,
            2.0,
            &EvolutionConfig::new(Mode::QuantumLiouville, 0.0, 0.01).with_moyal(Moyal::Truncated { lambda_max: 9 }),
        )
        .unwrap();
        let l2: f64 = exact.f.iter().zip(&trunc.f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * g.cell_area();
        assert!(l2.sqrt() < 1e-6, "{}", l2.sqrt());
    }

    #[test]
    fn step_schedule_handles_non_dividing_dt() {
        let pot = Potential::Harmonic { m: 1.0, omega0: 1.0 };
        let s = box_state(64, 8.0, GaussianSpec::new(0.0, 0.0, 1.0, 1.0), 1.0);
        let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, 0.3);
        let (rec, out) = evolve_to(&s, &pot, &cfg, 1.0, &Observers::every(10.0)).unwrap();
        assert!((out.t - 1.0).abs() < 1e-12);
        assert_eq!(rec.times.len(), 2);
    }
}
