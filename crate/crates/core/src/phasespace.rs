//! Phase-space grids, distribution containers and grid quadratures.
//!
//! A field `f(x, p)` is stored row-major with x as the slow index:
//! `f[i * np + l] = f(x_i, p_l)` where `x_i = x_min + i·dx`, `p_l = p_min + l·dp`.
//! All integrals are midpoint (Riemann) sums over the cells.

use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Relative tolerance used when checking the 2π extent of periodic grids.
const PERIODIC_EXTENT_TOL: f64 = 1e-12;
/// Tolerance on the normalization of a freshly constructed state.
pub const NORM_TOL: f64 = 1e-9;
/// Classical distributions may dip this far below zero at construction.
pub const CLASSICAL_NEG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// x is an angle on [x_min, x_min + 2π).
    PeriodicX,
    /// Both directions are a box; mass must stay away from the edges.
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Classical,
    Wigner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceGrid {
    pub nx: usize,
    pub np: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub boundary: Boundary,
}

fn check_size(name: &str, n: usize) -> Result<()> {
    if n < 8 || !n.is_power_of_two() {
        return Err(Error::Config(format!(
            "{name} = {n} must be a power of two and at least 8"
        )));
    }
    Ok(())
}

impl PhaseSpaceGrid {
    pub fn new(
        nx: usize,
        np: usize,
        x_min: f64,
        x_max: f64,
        p_min: f64,
        p_max: f64,
        boundary: Boundary,
    ) -> Result<Self> {
        check_size("nx", nx)?;
        check_size("np", np)?;
        for (name, v) in [("x_min", x_min), ("x_max", x_max), ("p_min", p_min), ("p_max", p_max)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} is not finite")));
            }
        }
        if x_max <= x_min {
            return Err(Error::Config(format!("inverted x bounds [{x_min}, {x_max}]")));
        }
        if p_max <= p_min {
            return Err(Error::Config(format!("inverted p bounds [{p_min}, {p_max}]")));
        }
        if boundary == Boundary::PeriodicX
            && ((x_max - x_min) - 2.0 * PI).abs() > PERIODIC_EXTENT_TOL * 2.0 * PI
        {
            return Err(Error::Config(format!(
                "periodic x extent is {} but must be 2π",
                x_max - x_min
            )));
        }
        Ok(Self { nx, np, x_min, x_max, p_min, p_max, boundary })
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / self.np as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dp()
    }

    pub fn len(&self) -> usize {
        self.nx * self.np
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    #[inline]
    pub fn p(&self, l: usize) -> f64 {
        self.p_min + l as f64 * self.dp()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ps(&self) -> Vec<f64> {
        (0..self.np).map(|l| self.p(l)).collect()
    }

    /// Wavenumber conjugate to x for a signed bin index.
    #[inline]
    pub fn k_of(&self, signed_bin: i64) -> f64 {
        2.0 * PI * signed_bin as f64 / (self.x_max - self.x_min)
    }

    /// Variable conjugate to p for a signed bin index.
    #[inline]
    pub fn lambda_of(&self, signed_bin: i64) -> f64 {
        2.0 * PI * signed_bin as f64 / (self.p_max - self.p_min)
    }

    pub fn k_max(&self) -> f64 {
        PI / self.dx()
    }

    pub fn lambda_max(&self) -> f64 {
        PI / self.dp()
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::PeriodicX
    }
}

/// A real distribution on a phase-space grid.
#[derive(Debug, Clone)]
pub struct PhaseSpaceState {
    pub grid: PhaseSpaceGrid,
    pub f: Vec<f64>,
    pub kind: Kind,
    pub hbar: f64,
    pub t: f64,
}

/// A moment together with a flag telling whether the integrand touches the box edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moment {
    pub value: f64,
    pub truncated: bool,
}

impl PhaseSpaceState {
    /// Validating constructor: finite entries, unit norm, and non-negativity for
    /// classical distributions.
    pub fn new(grid: PhaseSpaceGrid, f: Vec<f64>, kind: Kind, hbar: f64, t: f64) -> Result<Self> {
        if f.len() != grid.len() {
            return Err(Error::Config(format!(
                "field has {} values, grid needs {}",
                f.len(),
                grid.len()
            )));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::Config(format!("hbar must be positive, got {hbar}")));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("field contains non-finite values".into()));
        }
        let state = Self { grid, f, kind, hbar, t };
        let n = state.norm();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Config(format!("state norm is {n}, expected 1")));
        }
        if kind == Kind::Classical {
            let min = state.f.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -CLASSICAL_NEG_FLOOR {
                return Err(Error::Config(format!(
                    "classical distribution has negative value {min}"
                )));
            }
        }
        Ok(state)
    }

    /// Builds a state without checks; used by propagators that preserve the invariants.
    pub(crate) fn from_parts(grid: PhaseSpaceGrid, f: Vec<f64>, kind: Kind, hbar: f64, t: f64) -> Self {
        Self { grid, f, kind, hbar, t }
    }

    #[inline]
    pub fn at(&self, i: usize, l: usize) -> f64 {
        self.f[i * self.grid.np + l]
    }

    pub fn norm(&self) -> f64 {
        self.f.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// ∫ f dp as a function of x.
    pub fn marginal_x(&self) -> Vec<f64> {
        let dp = self.grid.dp();
        self.f
            .chunks(self.grid.np)
            .map(|row| row.iter().sum::<f64>() * dp)
            .collect()
    }

    /// ∫ f dx as a function of p.
    pub fn marginal_p(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        let mut out = vec![0.0; self.grid.np];
        for row in self.f.chunks(self.grid.np) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= dx);
        out
    }

    /// ⟨xⁱ pʲ⟩, normalised by the current norm.
    pub fn moment(&self, i: u32, j: u32) -> Moment {
        let g = &self.grid;
        let mut total = 0.0;
        let mut total_abs = 0.0;
        let mut edge_abs = 0.0;
        for ix in 0..g.nx {
            let xi = g.x(ix).powi(i as i32);
            let x_edge = !g.is_periodic() && (ix == 0 || ix == g.nx - 1);
            for l in 0..g.np {
                let v = xi * g.p(l).powi(j as i32) * self.f[ix * g.np + l];
                total += v;
                total_abs += v.abs();
                if x_edge || l == 0 || l == g.np - 1 {
                    edge_abs += v.abs();
                }
            }
        }
        let norm = self.norm();
        Moment {
            value: total * g.cell_area() / norm,
            truncated: total_abs > 0.0 && edge_abs >= 1e-3 * total_abs,
        }
    }

    /// ∫ f² dx dp.
    pub fn l2_squared(&self) -> f64 {
        self.f.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_area()
    }

    /// 2πħ ∫ f² dx dp, equal to Tr ρ² for a Wigner function.
    pub fn purity(&self) -> f64 {
        2.0 * PI * self.hbar * self.l2_squared()
    }

    pub fn min_value(&self) -> f64 {
        self.f.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Probability in the outer strips of the box (p edges always, x edges
    /// only for box grids): the sum over strips of |marginal mass|. Each
    /// strip spans the full other axis, so its mass is a marginal probability
    /// and grid-scale aliasing noise cancels out of it.
    pub fn edge_mass(&self) -> f64 {
        let g = &self.grid;
        let bp = (g.np / 64).max(2);
        let bx = (g.nx / 64).max(2);
        let (mut p_lo, mut p_hi, mut x_lo, mut x_hi) = (0.0, 0.0, 0.0, 0.0);
        for ix in 0..g.nx {
            let row = &self.f[ix * g.np..(ix + 1) * g.np];
            p_lo += row[..bp].iter().sum::<f64>();
            p_hi += row[g.np - bp..].iter().sum::<f64>();
            if !g.is_periodic() {
                if ix < bx {
                    x_lo += row.iter().sum::<f64>();
                } else if ix >= g.nx - bx {
                    x_hi += row.iter().sum::<f64>();
                }
            }
        }
        (p_lo.abs() + p_hi.abs() + x_lo.abs() + x_hi.abs()) * g.cell_area()
    }

    /// Plot-ready CSV `x,p,f` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,p,f")?;
        for i in 0..self.grid.nx {
            for l in 0..self.grid.np {
                writeln!(
                    w,
                    "{:.16e},{:.16e},{:.16e}",
                    self.grid.x(i),
                    self.grid.p(l),
                    self.at(i, l)
                )?;
            }
        }
        Ok(())
    }
}

/// Uncorrelated Gaussian initial data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub x0: f64,
    pub p0: f64,
    pub sigma_x: f64,
    pub sigma_p: f64,
    /// Reject widths with σx·σp ≠ ħ/2 (relative 1e-9).
    pub require_min_uncertainty: bool,
}

impl GaussianSpec {
    pub fn new(x0: f64, p0: f64, sigma_x: f64, sigma_p: f64) -> Self {
        Self { x0, p0, sigma_x, sigma_p, require_min_uncertainty: false }
    }

    pub fn min_uncertainty(mut self) -> Self {
        self.require_min_uncertainty = true;
        self
    }
}

fn points_within(lo: f64, hi: f64, origin: f64, d: f64, n: usize) -> usize {
    (0..n)
        .filter(|&i| {
            let v = origin + i as f64 * d;
            v >= lo && v <= hi
        })
        .count()
}

/// Sum of exp(−(d + 2πn)²/2σ²) over images until the terms fall below 1e-14.
fn wrapped_gaussian(d: f64, sigma: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let d = d - two_pi * (d / two_pi).round();
    let g = |s: f64| (-(s * s) / (2.0 * sigma * sigma)).exp();
    let mut total = g(d);
    let mut n = 1.0;
    loop {
        let a = g(d + two_pi * n);
        let b = g(d - two_pi * n);
        total += a + b;
        if a < 1e-14 && b < 1e-14 {
            break;
        }
        n += 1.0;
    }
    total
}

pub fn gaussian_state(
    grid: &PhaseSpaceGrid,
    spec: GaussianSpec,
    kind: Kind,
    hbar: f64,
) -> Result<PhaseSpaceState> {
    let GaussianSpec { x0, p0, sigma_x, sigma_p, require_min_uncertainty } = spec;
    if !(sigma_x > 0.0 && sigma_p > 0.0) {
        return Err(Error::Config("Gaussian widths must be positive".into()));
    }
    if require_min_uncertainty {
        let prod = sigma_x * sigma_p;
        if (prod - hbar / 2.0).abs() > 1e-9 * hbar {
            return Err(Error::Config(format!(
                "σx·σp = {prod} is not ħ/2 = {}",
                hbar / 2.0
            )));
        }
    }
    let (dx, dp) = (grid.dx(), grid.dp());
    let np_in = points_within(p0 - 3.0 * sigma_p, p0 + 3.0 * sigma_p, grid.p_min, dp, grid.np);
    if np_in < 4 {
        return Err(Error::Resolution(format!(
            "only {np_in} momentum points within ±3σp (σp = {sigma_p}, dp = {dp})"
        )));
    }
    if p0 - 3.0 * sigma_p < grid.p_min || p0 + 3.0 * sigma_p > grid.p_max {
        return Err(Error::Truncation(format!(
            "±3σp support around p0 = {p0} leaves [{}, {}]",
            grid.p_min, grid.p_max
        )));
    }
    let wrapped = grid.is_periodic();
    let nx_in = if wrapped && 6.0 * sigma_x >= 2.0 * PI {
        grid.nx
    } else if wrapped {
        // count on the circle
        (0..grid.nx)
            .filter(|&i| {
                let d = grid.x(i) - x0;
                let d = d - 2.0 * PI * (d / (2.0 * PI)).round();
                d.abs() <= 3.0 * sigma_x
            })
            .count()
    } else {
        points_within(x0 - 3.0 * sigma_x, x0 + 3.0 * sigma_x, grid.x_min, dx, grid.nx)
    };
    if nx_in < 4 {
        return Err(Error::Resolution(format!(
            "only {nx_in} position points within ±3σx (σx = {sigma_x}, dx = {dx})"
        )));
    }
    if !wrapped && (x0 - 3.0 * sigma_x < grid.x_min || x0 + 3.0 * sigma_x > grid.x_max) {
        return Err(Error::Truncation(format!(
            "±3σx support around x0 = {x0} leaves [{}, {}]",
            grid.x_min, grid.x_max
        )));
    }

    let gx: Vec<f64> = (0..grid.nx)
        .map(|i| {
            let d = grid.x(i) - x0;
            if wrapped {
                wrapped_gaussian(d, sigma_x)
            } else {
                (-(d * d) / (2.0 * sigma_x * sigma_x)).exp()
            }
        })
        .collect();
    let gp: Vec<f64> = (0..grid.np)
        .map(|l| {
            let d = grid.p(l) - p0;
            (-(d * d) / (2.0 * sigma_p * sigma_p)).exp()
        })
        .collect();
    let sx: f64 = gx.iter().sum::<f64>() * dx;
    let sp: f64 = gp.iter().sum::<f64>() * dp;
    let mut f = Vec::with_capacity(grid.len());
    for a in &gx {
        for b in &gp {
            f.push(a * b / (sx * sp));
        }
    }
    PhaseSpaceState::new(grid.clone(), f, kind, hbar, 0.0)
}

const MAGIC: &[u8; 4] = b"MLAB";
pub const SNAPSHOT_VERSION: u32 = 1;
const KIND_WIGNER_BIT: u8 = 0b01;
const PERIODIC_BIT: u8 = 0b10;

/// Writes the little-endian binary snapshot:
/// `"MLAB" | version u32 | nx u32 | np u32 | x_min x_max p_min p_max dx dp (f64) |
/// flags u8 | hbar f64 | t f64 | nx·np f64 (x-major)`.
///
/// The flags byte carries the kind in bit 0 (1 = Wigner) and the boundary in
/// bit 1 (1 = periodic x).
pub fn write_snapshot<W: Write>(state: &PhaseSpaceState, mut w: W) -> Result<()> {
    let g = &state.grid;
    w.write_all(MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(g.nx as u32).to_le_bytes())?;
    w.write_all(&(g.np as u32).to_le_bytes())?;
    for v in [g.x_min, g.x_max, g.p_min, g.p_max, g.dx(), g.dp()] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut flags = 0u8;
    if state.kind == Kind::Wigner {
        flags |= KIND_WIGNER_BIT;
    }
    if g.is_periodic() {
        flags |= PERIODIC_BIT;
    }
    w.write_all(&[flags])?;
    w.write_all(&state.hbar.to_le_bytes())?;
    w.write_all(&state.t.to_le_bytes())?;
    let mut buf = Vec::with_capacity(state.f.len() * 8);
    for v in &state.f {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<PhaseSpaceState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad snapshot magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!(
            "snapshot version {version} is not supported (expected {SNAPSHOT_VERSION})"
        )));
    }
    let nx = read_u32(&mut r)? as usize;
    let np = read_u32(&mut r)? as usize;
    let mut b = [0.0; 6];
    for v in b.iter_mut() {
        *v = read_f64(&mut r)?;
    }
    let mut flags = [0u8];
    r.read_exact(&mut flags)?;
    let boundary = if flags[0] & PERIODIC_BIT != 0 { Boundary::PeriodicX } else { Boundary::Box };
    let kind = if flags[0] & KIND_WIGNER_BIT != 0 { Kind::Wigner } else { Kind::Classical };
    let grid = PhaseSpaceGrid::new(nx, np, b[0], b[1], b[2], b[3], boundary)
        .map_err(|e| Error::Format(format!("snapshot grid: {e}")))?;
    let hbar = read_f64(&mut r)?;
    let t = read_f64(&mut r)?;
    let mut raw = vec![0u8; nx * np * 8];
    r.read_exact(&mut raw)?;
    let f: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("snapshot contains non-finite values".into()));
    }
    // Evolved states are only normalized to the per-step tolerance.
    Ok(PhaseSpaceState::from_parts(grid, f, kind, hbar, t))
}
