//! Potentials V(x, t), their x-derivatives, and force statistics at typical
//! points of a distribution.

use crate::error::{Error, Result};
use crate::phasespace::PhaseSpaceState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Potential {
    /// V = B x⁴ − A x² + Λ x cos(ωt), kinetic energy p²/2m.
    Duffing { m: f64, a: f64, b: f64, lambda: f64, omega: f64 },
    /// κ cos q applied as an impulse at every integer time; unit mass, unit period.
    KickedRotor { kappa: f64 },
    /// V = ½ m ω0² x².
    Harmonic { m: f64, omega0: f64 },
    FreeParticle { m: f64 },
}

impl Potential {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match *self {
            Potential::Duffing { m, a, b, lambda, omega } => {
                if !(m > 0.0) {
                    return bad("duffing mass must be positive");
                }
                if !(b > 0.0) {
                    return bad("duffing B must be positive");
                }
                if ![a, lambda, omega].iter().all(|v| v.is_finite()) {
                    return bad("duffing parameters must be finite");
                }
            }
            Potential::KickedRotor { kappa } => {
                if !kappa.is_finite() {
                    return bad("kappa must be finite");
                }
            }
            Potential::Harmonic { m, omega0 } => {
                if !(m > 0.0) || !omega0.is_finite() {
                    return bad("harmonic mass must be positive and ω0 finite");
                }
            }
            Potential::FreeParticle { m } => {
                if !(m > 0.0) {
                    return bad("mass must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        match *self {
            Potential::Duffing { m, .. } | Potential::Harmonic { m, .. } | Potential::FreeParticle { m } => m,
            Potential::KickedRotor { .. } => 1.0,
        }
    }

    pub fn is_kicked(&self) -> bool {
        matches!(self, Potential::KickedRotor { .. })
    }

    /// Whether V is at most quadratic in x (classical and quantum flows coincide).
    pub fn is_linear_dynamics(&self) -> bool {
        matches!(self, Potential::Harmonic { .. } | Potential::FreeParticle { .. })
    }

    /// n-th x-derivative of V at (x, t). For the kicked rotor this is the
    /// derivative of the kick profile κ cos q.
    pub fn derivative(&self, x: f64, t: f64, order: u32) -> f64 {
        match *self {
            Potential::Duffing { a, b, lambda, omega, .. } => {
                let drive = lambda * (omega * t).cos();
                match order {
                    0 => b * x.powi(4) - a * x * x + drive * x,
                    1 => 4.0 * b * x.powi(3) - 2.0 * a * x + drive,
                    2 => 12.0 * b * x * x - 2.0 * a,
                    3 => 24.0 * b * x,
                    4 => 24.0 * b,
                    _ => 0.0,
                }
            }
            Potential::KickedRotor { kappa } => {
                let (s, c) = x.sin_cos();
                kappa
                    * match order % 4 {
                        0 => c,
                        1 => -s,
                        2 => -c,
                        _ => s,
                    }
            }
            Potential::Harmonic { m, omega0 } => {
                let k = m * omega0 * omega0;
                match order {
                    0 => 0.5 * k * x * x,
                    1 => k * x,
                    2 => k,
                    _ => 0.0,
                }
            }
            Potential::FreeParticle { .. } => 0.0,
        }
    }

    pub fn v(&self, x: f64, t: f64) -> f64 {
        self.derivative(x, t, 0)
    }

    pub fn dv(&self, x: f64, t: f64) -> f64 {
        self.derivative(x, t, 1)
    }

    pub fn d2v(&self, x: f64, t: f64) -> f64 {
        self.derivative(x, t, 2)
    }

    pub fn d3v(&self, x: f64, t: f64) -> f64 {
        self.derivative(x, t, 3)
    }

    /// The part of V that acts continuously in time. Zero for the kicked rotor,
    /// whose delta train is applied as an exact map.
    pub fn smooth_v(&self, x: f64, t: f64) -> f64 {
        if self.is_kicked() {
            0.0
        } else {
            self.v(x, t)
        }
    }
}

/// Force F = −∂V/∂x and its first two x-derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypicalPoint {
    pub x: f64,
    /// Marginal density at `x`, normalised so the weights of all points sum to 1.
    pub weight: f64,
    pub force: f64,
    pub dforce: f64,
    pub d2force: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceStats {
    pub t: f64,
    pub points: Vec<TypicalPoint>,
}

/// Percentiles at which forces are sampled.
pub const TYPICAL_PERCENTILES: [f64; 3] = [0.25, 0.5, 0.75];

const FORCE_FLOOR: f64 = 1e-12;

/// Position of quantile `q` of the x-marginal, treating `x_i` as the centre of
/// a cell of width dx, plus the marginal density there.
fn marginal_quantile(state: &PhaseSpaceState, marginal: &[f64], q: f64) -> (f64, f64) {
    let g = &state.grid;
    let dx = g.dx();
    let masses: Vec<f64> = marginal.iter().map(|m| m.max(0.0) * dx).collect();
    let total: f64 = masses.iter().sum();
    let target = q * total;
    let mut acc = 0.0;
    for (i, &m) in masses.iter().enumerate() {
        if acc + m >= target && m > 0.0 {
            let frac = (target - acc) / m;
            return (g.x(i) - 0.5 * dx + frac * dx, marginal[i].max(0.0) / total);
        }
        acc += m;
    }
    (g.x(g.nx - 1), 0.0)
}

/// Evaluates F, ∂F, ∂²F at the 25th/50th/75th percentile positions of the
/// state's x-marginal.
pub fn force_stats(potential: &Potential, state: &PhaseSpaceState, t: f64) -> Result<ForceStats> {
    let marginal = state.marginal_x();
    let mut points: Vec<TypicalPoint> = TYPICAL_PERCENTILES
        .iter()
        .map(|&q| {
            let (x, density) = marginal_quantile(state, &marginal, q);
            TypicalPoint {
                x,
                weight: density,
                force: -potential.dv(x, t),
                dforce: -potential.d2v(x, t),
                d2force: -potential.d3v(x, t),
            }
        })
        .collect();
    let wsum: f64 = points.iter().map(|p| p.weight).sum();
    if wsum > 0.0 {
        points.iter_mut().for_each(|p| p.weight /= wsum);
    }
    if points.iter().all(|p| p.force.abs() < FORCE_FLOOR) {
        return Err(Error::DegenerateForce("force vanishes at every typical point".into()));
    }
    Ok(ForceStats { t, points })
}

pub(crate) fn is_degenerate_value(v: f64) -> bool {
    v.abs() < FORCE_FLOOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasespace::{gaussian_state, Boundary, GaussianSpec, Kind, PhaseSpaceGrid};
    use std::f64::consts::PI;

    const DUFF: Potential = Potential::Duffing { m: 1.0, a: 10.0, b: 0.5, lambda: 10.0, omega: 6.07 };

    #[test]
    fn duffing_value_from_parameters() {
        assert!((DUFF.v(2.0, 0.0) - (-12.0)).abs() < 1e-12);
    }

    #[test]
    fn kicked_rotor_derivative() {
        let k = Potential::KickedRotor { kappa: 10.0 };
        assert!((k.dv(PI / 2.0, 0.0) + 10.0).abs() < 1e-12);
        assert!((k.v(0.3, 0.0) - k.v(0.3 + 2.0 * PI, 0.0)).abs() < 1e-12);
        assert_eq!(k.smooth_v(0.3, 0.0), 0.0);
    }

    #[test]
    fn harmonic_third_derivative_vanishes() {
        let h = Potential::Harmonic { m: 1.3, omega0: 0.7 };
        for x in [-3.0, -0.1, 0.0, 2.5] {
            assert_eq!(h.d3v(x, 1.0), 0.0);
        }
    }

    #[test]
    fn duffing_even_without_drive() {
        let p = Potential::Duffing { m: 1.0, a: 10.0, b: 0.5, lambda: 0.0, omega: 6.07 };
        for x in [0.3, 1.7, 4.1] {
            assert!((p.v(x, 0.4) - p.v(-x, 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-4;
        for pot in [DUFF, Potential::KickedRotor { kappa: 10.0 }, Potential::Harmonic { m: 2.0, omega0: 1.5 }] {
            for &x in &[-2.3, -0.4, 0.9, 3.1] {
                let t = 0.37;
                for order in 1..=3u32 {
                    let fd = (pot.derivative(x + h, t, order - 1) - pot.derivative(x - h, t, order - 1)) / (2.0 * h);
                    let an = pot.derivative(x, t, order);
                    let scale = an.abs().max(1.0);
                    assert!((fd - an).abs() / scale < 1e-6, "{pot:?} order {order} at {x}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn duffing_force_at_start_point() {
        // Narrow Gaussian at x = −3: typical points sit essentially at −3.
        let g = PhaseSpaceGrid::new(512, 64, -8.0, 8.0, 0.0, 16.0, Boundary::Box).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(-3.0, 8.0, 0.05, 1.0), Kind::Classical, 0.1).unwrap();
        let fs = force_stats(&DUFF, &s, 0.0).unwrap();
        let median = fs.points[1];
        assert!((median.x + 3.0).abs() < 0.01);
        // F(x) = −(4Bx³ − 2Ax + Λ) at t = 0; at x = −3 this is −(−54 + 60 + 10) = −16.
        let x = median.x;
        let direct = -(4.0 * 0.5 * x * x * x - 2.0 * 10.0 * x + 10.0);
        assert!((median.force - direct).abs() < 1e-12);
        assert!((median.force + 16.0).abs() < 0.5);
        let h = 1e-5;
        let fd = -(DUFF.v(x + h, 0.0) - DUFF.v(x - h, 0.0)) / (2.0 * h);
        assert!((fd - median.force).abs() < 1e-5);
    }

    #[test]
    fn kicked_rotor_uniform_state_quartiles() {
        let g = PhaseSpaceGrid::new(256, 64, -PI, PI, -8.0, 8.0, Boundary::PeriodicX).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(0.0, 0.0, 50.0, 1.0), Kind::Classical, 1.0).unwrap();
        let fs = force_stats(&Potential::KickedRotor { kappa: 10.0 }, &s, 0.0).unwrap();
        // Uniform marginal: quartiles a quarter period apart, within half a cell.
        let xs: Vec<f64> = fs.points.iter().map(|p| p.x).collect();
        let tol = 0.5 * g.dx() + 1e-6;
        assert!((xs[1] - xs[0] - PI / 2.0).abs() < 1e-3 && (xs[2] - xs[1] - PI / 2.0).abs() < 1e-3);
        assert!((xs[0] + PI / 2.0).abs() < tol && xs[1].abs() < tol && (xs[2] - PI / 2.0).abs() < tol);
        let mags: Vec<f64> = fs.points.iter().map(|p| p.force.abs()).collect();
        assert!((mags[0] - 10.0).abs() < 1e-2 && (mags[2] - 10.0).abs() < 1e-2);
    }

    #[test]
    fn degenerate_force_rejected() {
        let g = PhaseSpaceGrid::new(64, 64, -4.0, 4.0, -4.0, 4.0, Boundary::Box).unwrap();
        let s = gaussian_state(&g, GaussianSpec::new(0.0, 0.0, 0.5, 0.5), Kind::Classical, 1.0).unwrap();
        assert!(matches!(
            force_stats(&Potential::FreeParticle { m: 1.0 }, &s, 0.0),
            Err(Error::DegenerateForce(_))
        ));
    }
}
