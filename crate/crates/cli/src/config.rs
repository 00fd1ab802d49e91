//! Flat `key = value` experiment configs with dotted sections.
//!
//! Every leg named in `legs` reads its settings through a scope: a key `k`
//! is looked up as `<leg>.k` first and then as `k`. Keys that no leg or
//! global setting consumes are reported as errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use mlab_core::evolve::{EvolutionConfig, Mode, Moyal, Observers};
use mlab_core::phasespace::{Boundary, GaussianSpec, PhaseSpaceGrid};
use mlab_core::potentials::Potential;
use mlab_core::sme::{Scheme, SmeConfig};
use mlab_core::weyl;

#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(key: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { key: key.to_string(), message: message.into() })
}

#[derive(Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(&format!("line {}", no + 1), "expected `key = value`");
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-') {
                return err(k, format!("invalid key on line {}", no + 1));
            }
            if entries.insert(k.to_string(), (v.to_string(), no + 1)).is_some() {
                return err(k, "key given twice");
            }
        }
        Ok(Self { entries, used: RefCell::new(BTreeSet::new()) })
    }

    /// Overrides (or adds) a key, as from the command line.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(|(v, _)| v.as_str());
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn scope<'a>(&'a self, leg: Option<&'a str>) -> Scope<'a> {
        Scope { raw: self, leg }
    }
}

#[derive(Clone, Copy)]
pub struct Scope<'a> {
    raw: &'a RawConfig,
    leg: Option<&'a str>,
}

impl<'a> Scope<'a> {
    /// The value and the key it was found under.
    fn lookup(&self, key: &str) -> Option<(String, String)> {
        if let Some(leg) = self.leg {
            let k = format!("{leg}.{key}");
            if let Some(v) = self.raw.raw(&k) {
                return Some((v.to_string(), k));
            }
        }
        self.raw.raw(key).map(|v| (v.to_string(), key.to_string()))
    }

    fn shown(&self, key: &str) -> String {
        match self.leg {
            Some(l) => format!("{l}.{key}"),
            None => key.to_string(),
        }
    }

    pub fn str_opt(&self, key: &str) -> Option<String> {
        self.lookup(key).map(|(v, _)| v)
    }

    pub fn str(&self, key: &str) -> Result<String, ConfigError> {
        self.str_opt(key).map_or_else(|| err(&self.shown(key), "missing"), Ok)
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.lookup(key) {
            None => Ok(None),
            Some((v, k)) => parse_f64(&v).map(Some).ok_or_else(|| ConfigError {
                key: k,
                message: format!("expected a number, got {v:?}"),
            }),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.f64_opt(key)?.map_or_else(|| err(&self.shown(key), "missing"), Ok)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn usize_opt(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.lookup(key) {
            None => Ok(None),
            Some((v, k)) => v.parse::<usize>().map(Some).map_err(|_| ConfigError {
                key: k,
                message: format!("expected a non-negative integer, got {v:?}"),
            }),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.usize_opt(key)?.map_or_else(|| err(&self.shown(key), "missing"), Ok)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.lookup(key) {
            None => Ok(default),
            Some((v, k)) => v.parse::<u64>().map_err(|_| ConfigError {
                key: k,
                message: format!("expected a 64-bit unsigned integer, got {v:?}"),
            }),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.lookup(key) {
            None => Ok(default),
            Some((v, k)) => match v.as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(ConfigError { key: k, message: format!("expected true or false, got {v:?}") }),
            },
        }
    }
}

/// Numbers, plus `pi`, `2pi`, `-pi` style multiples of π.
fn parse_f64(s: &str) -> Option<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let coeff = body.strip_suffix("pi")?;
    let c = if coeff.is_empty() { 1.0 } else { coeff.trim_end_matches('*').parse::<f64>().ok()? };
    let v = c * std::f64::consts::PI;
    Some(if neg { -v } else { v })
}

#[derive(Debug, Clone)]
pub struct PhaseLeg {
    pub grid: PhaseSpaceGrid,
    pub state: GaussianSpec,
    pub evolution: EvolutionConfig,
    pub t_final: f64,
    pub observers: Observers,
    /// Eigen-spectrum CSV of the final state.
    pub final_spectrum: bool,
    pub spectrum_stride: usize,
    pub snapshot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Pure,
    Mixed,
}

#[derive(Debug, Clone)]
pub struct SmeLeg {
    pub n: usize,
    pub x_min: f64,
    pub h: f64,
    pub x0: f64,
    pub p0: f64,
    pub sigma_x: f64,
    pub representation: Representation,
    pub sme: SmeConfig,
    pub t_final: f64,
    pub interval: f64,
    /// Also write every trajectory's record and measurement signal.
    pub per_trajectory: bool,
}

#[derive(Debug, Clone)]
pub enum LegKind {
    Phase(PhaseLeg),
    Sme(SmeLeg),
}

#[derive(Debug, Clone)]
pub struct Leg {
    pub name: String,
    pub kind: LegKind,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub hbar: f64,
    pub potential: Potential,
    pub legs: Vec<Leg>,
    /// Checkpoint cadence in time units (phase-space legs).
    pub checkpoint_every: Option<f64>,
}

fn potential(s: Scope) -> Result<Potential, ConfigError> {
    let kind = s.str("potential.kind")?;
    let p = match kind.as_str() {
        "duffing" => Potential::Duffing {
            m: s.f64_or("potential.m", 1.0)?,
            a: s.f64("potential.a")?,
            b: s.f64("potential.b")?,
            lambda: s.f64("potential.lambda")?,
            omega: s.f64("potential.omega")?,
        },
        "kicked_rotor" => Potential::KickedRotor { kappa: s.f64("potential.kappa")? },
        "harmonic" => Potential::Harmonic { m: s.f64_or("potential.m", 1.0)?, omega0: s.f64("potential.omega0")? },
        "free" => Potential::FreeParticle { m: s.f64_or("potential.m", 1.0)? },
        other => return err("potential.kind", format!("unknown potential {other:?}")),
    };
    p.validate().map_err(|e| ConfigError { key: "potential".into(), message: e.to_string() })?;
    Ok(p)
}

fn phase_leg(s: Scope, name: &str, pot: &Potential, hbar: f64) -> Result<PhaseLeg, ConfigError> {
    let key = |k: &str| format!("{name}.{k}");
    let boundary = match s.str_opt("grid.boundary").as_deref() {
        None | Some("box") => Boundary::Box,
        Some("periodic_x") => Boundary::PeriodicX,
        Some(other) => return err(&key("grid.boundary"), format!("expected box or periodic_x, got {other:?}")),
    };
    let grid = PhaseSpaceGrid::new(
        s.usize("grid.nx")?,
        s.usize("grid.np")?,
        s.f64("grid.x_min")?,
        s.f64("grid.x_max")?,
        s.f64("grid.p_min")?,
        s.f64("grid.p_max")?,
        boundary,
    )
    .map_err(|e| ConfigError { key: key("grid"), message: e.to_string() })?;
    let mut state = GaussianSpec::new(s.f64("state.x0")?, s.f64("state.p0")?, s.f64("state.sigma_x")?, s.f64("state.sigma_p")?);
    if s.bool_or("state.min_uncertainty", true)? {
        state = state.min_uncertainty();
        let prod = state.sigma_x * state.sigma_p;
        if (prod - 0.5 * hbar).abs() > 1e-9 * hbar {
            return err(&key("state.sigma_p"), format!("σx·σp = {prod} is not ħ/2 = {}", 0.5 * hbar));
        }
    }
    let mode_s = s.str("mode")?;
    let mode = Mode::parse(&mode_s).ok_or_else(|| ConfigError {
        key: key("mode"),
        message: format!("unknown mode {mode_s:?}"),
    })?;
    let default_dt = match pot {
        Potential::KickedRotor { .. } => 0.01,
        Potential::Duffing { omega, .. } if *omega != 0.0 => 2.0 * std::f64::consts::PI / omega.abs() / 500.0,
        _ => 0.01,
    };
    let mut evolution = EvolutionConfig::new(mode, s.f64_or("D", 0.0)?, s.f64_or("dt", default_dt)?);
    if let Some(order) = s.usize_opt("moyal.order")? {
        evolution = evolution.with_moyal(Moyal::Truncated { lambda_max: order as u32 });
    }
    evolution.validate().map_err(|e| ConfigError { key: key("D"), message: e.to_string() })?;
    if pot.is_kicked() && boundary != Boundary::PeriodicX {
        return err(&key("grid.boundary"), "the kicked rotor runs on a periodic_x grid");
    }
    let t_final = s.f64("t_final")?;
    if !(t_final > 0.0) {
        return err(&key("t_final"), "must be positive");
    }
    let stride = s.usize_opt("diag.spectrum_stride")?.unwrap_or(1);
    let spectrum = s.bool_or("diag.spectrum", false)?;
    let final_spectrum = s.bool_or("diag.final_spectrum", true)?;
    if spectrum || final_spectrum {
        weyl::strided_commensurability(&grid, hbar, stride)
            .map_err(|e| ConfigError { key: key("grid.p_max"), message: e.to_string() })?;
    }
    let observers = Observers {
        interval: s.f64_or("diag.interval", 1.0)?,
        moments: s.bool_or("diag.moments", true)?,
        purity: s.bool_or("diag.purity", true)?,
        gamma: s.bool_or("diag.gamma", true)?,
        spectrum,
        spectrum_stride: stride,
    };
    if !(observers.interval > 0.0) {
        return err(&key("diag.interval"), "must be positive");
    }
    Ok(PhaseLeg { grid, state, evolution, t_final, observers, final_spectrum, spectrum_stride: stride, snapshot: s.bool_or("diag.snapshot", true)? })
}

fn sme_leg(s: Scope, name: &str) -> Result<SmeLeg, ConfigError> {
    let key = |k: &str| format!("{name}.{k}");
    let n = s.usize("lattice.n")?;
    let x_min = s.f64("lattice.x_min")?;
    let x_max = s.f64("lattice.x_max")?;
    if !(x_max > x_min) {
        return err(&key("lattice.x_max"), "must exceed lattice.x_min");
    }
    let scheme_s = s.str_opt("sme.scheme").unwrap_or_else(|| "euler_maruyama_normalized".into());
    let scheme = Scheme::parse(&scheme_s).ok_or_else(|| ConfigError {
        key: key("sme.scheme"),
        message: format!("unknown scheme {scheme_s:?}"),
    })?;
    let sme = SmeConfig::new(
        s.f64("sme.k")?,
        s.f64_or("sme.eta", 1.0)?,
        s.f64_or("sme.dt", 0.01)?,
        s.usize_opt("sme.n_traj")?.unwrap_or(1),
        s.u64_or("seed", 0)?,
    )
    .with_scheme(scheme);
    sme.validate().map_err(|e| ConfigError { key: key("sme"), message: e.to_string() })?;
    let representation = match s.str_opt("sme.representation").as_deref() {
        None | Some("mixed") => Representation::Mixed,
        Some("pure") => Representation::Pure,
        Some(other) => return err(&key("sme.representation"), format!("expected pure or mixed, got {other:?}")),
    };
    if representation == Representation::Pure && sme.eta != 1.0 && sme.k > 0.0 {
        return err(&key("sme.representation"), "pure-state trajectories need sme.eta = 1");
    }
    Ok(SmeLeg {
        n,
        x_min,
        h: (x_max - x_min) / n as f64,
        x0: s.f64("state.x0")?,
        p0: s.f64("state.p0")?,
        sigma_x: s.f64("state.sigma_x")?,
        representation,
        sme,
        t_final: s.f64("t_final")?,
        interval: s.f64_or("diag.interval", 1.0)?,
        per_trajectory: s.bool_or("sme.write_trajectories", false)?,
    })
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let g = raw.scope(None);
        let name = g.str_opt("name").unwrap_or_else(|| "experiment".into());
        let out_dir = PathBuf::from(g.str_opt("output.dir").unwrap_or_else(|| format!("out/{name}")));
        let hbar = g.f64("hbar")?;
        if !(hbar > 0.0) {
            return err("hbar", "must be positive");
        }
        let pot = potential(g)?;
        let names: Vec<String> = g
            .str("legs")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if names.is_empty() {
            return err("legs", "no legs listed");
        }
        let mut legs = Vec::new();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return err("legs", format!("leg {n:?} listed twice"));
            }
            let s = raw.scope(Some(n));
            if raw.entries.contains_key(&format!("{n}.hbar")) {
                return err(&format!("{n}.hbar"), "ħ is fixed per experiment; set it once at top level");
            }
            let kind = match s.str_opt("kind").as_deref() {
                None | Some("phase") => LegKind::Phase(phase_leg(s, n, &pot, hbar)?),
                Some("sme") => LegKind::Sme(sme_leg(s, n)?),
                Some(other) => return err(&format!("{n}.kind"), format!("expected phase or sme, got {other:?}")),
            };
            legs.push(Leg { name: n.clone(), kind });
        }
        // D = ħ²k between master-equation and measurement legs.
        for a in &legs {
            let LegKind::Sme(sl) = &a.kind else { continue };
            let d_sme = sl.sme.diffusion(hbar);
            for b in &legs {
                if let LegKind::Phase(pl) = &b.kind {
                    let d = pl.evolution.diffusion;
                    if d > 0.0 && (d - d_sme).abs() > 1e-12 * d.max(d_sme) {
                        return err(
                            &format!("{}.sme.k", a.name),
                            format!("ħ²k = {d_sme} disagrees with {}.D = {d}", b.name),
                        );
                    }
                }
            }
        }
        let checkpoint_every = g.f64_opt("checkpoint.every")?;
        if let Some(c) = checkpoint_every {
            if !(c > 0.0) {
                return err("checkpoint.every", "must be positive");
            }
        }
        let unused = raw.unused();
        if let Some(k) = unused.first() {
            return err(k, "unknown or unused key");
        }
        Ok(Self { name, out_dir, hbar, potential: pot, legs, checkpoint_every })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
name = t
hbar = 1
potential.kind = harmonic
potential.omega0 = 1
legs = q
q.mode = quantum_master
q.D = 0.1
grid.nx = 64
grid.np = 64
grid.x_min = -8
grid.x_max = 8
grid.p_min = -2pi
grid.p_max = 2pi
state.x0 = 0
state.p0 = 0
state.sigma_x = 1
state.sigma_p = 0.5
t_final = 1
";

    #[test]
    fn parses_scoped_legs() {
        let raw = RawConfig::parse(BASE).unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.legs.len(), 1);
        let LegKind::Phase(l) = &cfg.legs[0].kind else { panic!() };
        assert_eq!(l.evolution.diffusion, 0.1);
        assert!((l.grid.p_max - 2.0 * std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_key() {
        let raw = RawConfig::parse(&BASE.replace("q.D = 0.1", "q.D = abc")).unwrap();
        let e = ExperimentConfig::from_raw(&raw).unwrap_err();
        assert_eq!(e.key, "q.D");
        let raw = RawConfig::parse(&format!("{BASE}\ngrid.typo = 3\n")).unwrap();
        assert_eq!(ExperimentConfig::from_raw(&raw).unwrap_err().key, "grid.typo");
        let raw = RawConfig::parse(&BASE.replace("grid.p_max = 2pi", "grid.p_max = 7")).unwrap();
        assert_eq!(ExperimentConfig::from_raw(&raw).unwrap_err().key, "q.grid.p_max");
    }

    #[test]
    fn liouville_with_diffusion_is_rejected() {
        let raw = RawConfig::parse(&BASE.replace("quantum_master", "quantum_liouville")).unwrap();
        assert_eq!(ExperimentConfig::from_raw(&raw).unwrap_err().key, "q.D");
    }
}
