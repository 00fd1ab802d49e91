//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! Long fixtures are computed once and shared.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mlab_core::evolve::{characteristic_moments, evolve_to, EvolutionConfig, Mode, Observers};
use mlab_core::observables::{divergence, saturation_check, TrajectoryRecord, Window};
use mlab_core::phasespace::{gaussian_state, Boundary, GaussianSpec, PhaseSpaceGrid, PhaseSpaceState};
use mlab_core::potentials::Potential;
use mlab_core::sme::{
    ensemble_average, localization_ratio, run_ensemble, Lattice, Scheme, SmeConfig, SmeState, SmeSystem,
    SmeTrajectory,
};
use mlab_core::weyl::{self, DensityMatrix, Source, SpectrumReport, Thresholds, Verdict};

type Outcome = Result<(bool, String), String>;

const QDKR_HBAR: f64 = 5.0;
const QDKR: Potential = Potential::KickedRotor { kappa: 10.0 };
const QDKR_D: f64 = 0.1;
const QDKR_K: f64 = 0.004;

const DUFF_HBAR: f64 = 0.1;
const DUFFING: Potential = Potential::Duffing { m: 1.0, a: 10.0, b: 0.5, lambda: 10.0, omega: 6.07 };
const DUFF_D: f64 = 0.02;
const DUFF_K: f64 = 2.0;

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn qdkr_spec() -> GaussianSpec {
    GaussianSpec::new(0.0, 0.0, 2.5, 1.0).min_uncertainty()
}

fn duff_spec() -> GaussianSpec {
    GaussianSpec::new(-3.0, 8.0, 0.05, 1.0).min_uncertainty()
}

fn duff_period() -> f64 {
    2.0 * PI / 6.07
}

fn torus(nx: usize, np: usize, p_max: f64) -> PhaseSpaceGrid {
    PhaseSpaceGrid::new(nx, np, -PI, PI, -p_max, p_max, Boundary::PeriodicX).unwrap()
}

/// Duffing box: P·dx is a multiple of πħ for nx ∈ {1024, 2048}, np ∈ {512, 1024, 2048}.
fn duff_grid(nx: usize, np: usize) -> PhaseSpaceGrid {
    PhaseSpaceGrid::new(nx, np, -6.4, 6.4, -8.0 * PI, 8.0 * PI, Boundary::Box).unwrap()
}

struct Run {
    record: TrajectoryRecord,
    last: PhaseSpaceState,
    secs: f64,
}

fn run(
    grid: &PhaseSpaceGrid,
    spec: GaussianSpec,
    pot: Potential,
    hbar: f64,
    mode: Mode,
    d: f64,
    dt: f64,
    t_final: f64,
    obs: Observers,
) -> Result<Run, String> {
    let start = Instant::now();
    let s0 = gaussian_state(grid, spec, mode.output_kind(), hbar).map_err(e)?;
    let (record, last) = evolve_to(&s0, &pot, &EvolutionConfig::new(mode, d, dt), t_final, &obs).map_err(e)?;
    Ok(Run { record, last, secs: start.elapsed().as_secs_f64() })
}

fn shared<T>(cell: &'static OnceLock<Result<T, String>>, f: impl FnOnce() -> Result<T, String>) -> Result<&'static T, String> {
    cell.get_or_init(f).as_ref().map_err(|m| m.clone())
}

// ---- shared fixtures ----

fn qdkr_master() -> Result<&'static Run, String> {
    static C: OnceLock<Result<Run, String>> = OnceLock::new();
    shared(&C, || {
        let obs = Observers::every(1.0).with_spectrum();
        run(&torus(256, 2048, 320.0), qdkr_spec(), QDKR, QDKR_HBAR, Mode::QuantumMaster, QDKR_D, 0.01, 6.0, obs)
    })
}

/// Classical Fokker-Planck QDKR; the matrix lattice keeps P·dx·stride = πħ.
fn qdkr_classical(nx: usize) -> Result<&'static (Run, SpectrumReport), String> {
    static A: OnceLock<Result<(Run, SpectrumReport), String>> = OnceLock::new();
    static B: OnceLock<Result<(Run, SpectrumReport), String>> = OnceLock::new();
    let cell = if nx == 1024 { &A } else { &B };
    shared(cell, || {
        let stride = nx / 128;
        let r = run(
            &torus(nx, 2048, 160.0),
            qdkr_spec(),
            QDKR,
            QDKR_HBAR,
            Mode::ClassicalFokkerPlanck,
            QDKR_D,
            0.01,
            6.0,
            Observers::every(1.0),
        )?;
        let rep = weyl::spectrum(&weyl::to_density_matrix_strided(&r.last, stride).map_err(e)?).map_err(e)?;
        Ok((r, rep))
    })
}

fn duffing_fp(np: usize) -> Result<&'static (Run, SpectrumReport), String> {
    static A: OnceLock<Result<(Run, SpectrumReport), String>> = OnceLock::new();
    static B: OnceLock<Result<(Run, SpectrumReport), String>> = OnceLock::new();
    let cell = if np == 1024 { &A } else { &B };
    shared(cell, || {
        let r = run(
            &duff_grid(2048, np),
            duff_spec(),
            DUFFING,
            DUFF_HBAR,
            Mode::ClassicalFokkerPlanck,
            DUFF_D,
            duff_period() / 500.0,
            10.0,
            Observers::every(0.5),
        )?;
        let rep = weyl::spectrum(&weyl::to_density_matrix(&r.last).map_err(e)?).map_err(e)?;
        Ok((r, rep))
    })
}

fn qdkr_closed(d: f64) -> Result<&'static Run, String> {
    static CLOSED: OnceLock<Result<Run, String>> = OnceLock::new();
    static OPEN: OnceLock<Result<Run, String>> = OnceLock::new();
    let (cell, mode) = if d == 0.0 { (&CLOSED, Mode::QuantumLiouville) } else { (&OPEN, Mode::QuantumMaster) };
    shared(cell, || {
        run(&torus(256, 2048, 320.0), qdkr_spec(), QDKR, QDKR_HBAR, mode, d, 0.01, 6.0, Observers::every(0.1))
    })
}

fn max_norm_drift(r: &TrajectoryRecord) -> f64 {
    let n = r.get("norm").unwrap();
    n.iter().map(|v| (v - n[0]).abs()).fold(0.0, f64::max)
}

// ---- criteria ----

fn c1_linear_equivalence() -> Outcome {
    let pot = Potential::Harmonic { m: 1.0, omega0: 1.0 };
    let g = PhaseSpaceGrid::new(128, 128, -8.0, 8.0, -8.0, 8.0, Boundary::Box).unwrap();
    let spec = GaussianSpec::new(1.5, -0.5, 0.8, 0.7);
    let t_final = 10.0 * 2.0 * PI;
    let obs = Observers::every(0.5);
    let q = run(&g, spec, pot, 1.0, Mode::QuantumMaster, 0.01, 0.01, t_final, obs.clone())?;
    let c = run(&g, spec, pot, 1.0, Mode::ClassicalFokkerPlanck, 0.01, 0.01, t_final, obs)?;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for s in ["x", "p", "p2"] {
        let d = divergence(&q.record, &c.record, s, 1e-6).map_err(e)?;
        worst = worst.max(d.max_deviation);
        detail += &format!("{s}: {:.2e} ", d.max_deviation);
    }
    Ok((worst <= 1e-6, format!("max relative deviation over 10 periods {detail}(tol 1e-6)")))
}

fn c2_rho_positivity() -> Outcome {
    let m = qdkr_master()?;
    let min = m.record.get("min_eig").unwrap();
    let worst = min.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((worst >= -1e-6, format!("min eigenvalue over t = 0..6 is {worst:.3e} (≥ −1e-6), run {:.0}s", m.secs)))
}

fn c3_fig1() -> Outcome {
    let nu_q = qdkr_master()?.record.get("nu").unwrap().last().copied().unwrap();
    let (ra, a) = qdkr_classical(1024)?;
    let (_, b) = qdkr_classical(512)?;
    let (da, duff_a) = duffing_fp(1024)?;
    let (_, duff_b) = duffing_fp(512)?;
    let nu_cl = a.negative_mass;
    let nu_duff = duff_a.negative_mass;
    let th = Thresholds::default();
    let v_qdkr = weyl::classify(std::slice::from_ref(a), th).map_err(e)?.verdict;
    let v_duff = weyl::classify(std::slice::from_ref(duff_a), th).map_err(e)?.verdict;
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
    let checks = [
        nu_cl >= 10.0 * nu_q,
        nu_cl >= 0.05,
        nu_duff <= nu_cl / 10.0,
        v_qdkr == Verdict::TypeII,
        v_duff == Verdict::TypeI,
        rel(nu_cl, b.negative_mass) <= 0.1,
        rel(nu_duff, duff_b.negative_mass) <= 0.1,
    ];
    Ok((
        checks.iter().all(|c| *c),
        format!(
            "ν_q = {nu_q:.3e}, ν_cl = {nu_cl:.3e} (other resolution {:.3e}), ν_duff = {nu_duff:.3e} (other resolution {:.3e}); \
             QDKR {v_qdkr:?}, Duffing {v_duff:?}; checks {checks:?}; runs {:.0}s + {:.0}s",
            b.negative_mass, duff_b.negative_mass, ra.secs, da.secs
        ),
    ))
}

fn c4_fig2() -> Outcome {
    let closed = qdkr_closed(0.0)?;
    let open = qdkr_closed(QDKR_D)?;
    let g0 = closed.record.get("gamma").unwrap();
    let drops: Vec<(f64, f64)> = g0
        .windows(2)
        .zip(&closed.record.times[1..])
        .filter(|(w, _)| w[1] < w[0])
        .map(|(w, t)| (*t, w[0] - w[1]))
        .collect();
    let at_kicks: Vec<f64> = closed
        .record
        .times
        .iter()
        .zip(g0)
        .filter(|(t, _)| (*t - t.round()).abs() < 1e-9)
        .map(|(_, g)| *g)
        .collect();
    let monotone = drops.is_empty();
    let g_closed = *g0.last().unwrap();
    let g_open = *open.record.get("gamma").unwrap().last().unwrap();
    let wiped = g_open <= 0.25 * g_closed;
    let worst = drops.iter().map(|d| d.1).fold(0.0, f64::max);
    Ok((
        monotone && wiped,
        format!(
            "D=0: {} decreases over {} samples (largest {worst:.3e}), Γ at kicks {at_kicks:.4?}; \
             Γ_D=0.1(6) = {g_open:.4e} vs 0.25·Γ_D=0(6) = {:.4e}",
            drops.len(),
            g0.len(),
            0.25 * g_closed
        ),
    ))
}

fn c5_conservation() -> Outcome {
    let spec = duff_spec();
    let start = Instant::now();
    let s0 = gaussian_state(&duff_grid(2048, 1024), spec, Mode::ClassicalLiouville.output_kind(), DUFF_HBAR).map_err(e)?;
    let l2_0 = s0.l2_squared();
    let cfg = EvolutionConfig::new(Mode::ClassicalLiouville, 0.0, duff_period() / 500.0);
    let liouville = evolve_to(&s0, &DUFFING, &cfg, 10.0, &Observers::every(0.5));
    let mut detail = String::new();
    let mut ok = true;
    match &liouville {
        Ok((rec, last)) => {
            let drift = (last.l2_squared() - l2_0).abs() / l2_0;
            let p = rec.get("purity").unwrap();
            let worst = p.iter().map(|v| (v - p[0]).abs() / p[0]).fold(0.0, f64::max);
            ok &= drift <= 1e-6 && worst <= 1e-6;
            detail += &format!(
                "Duffing Liouville ∫f² drift {drift:.2e} (max over records {worst:.2e}, {:.0}s); ",
                start.elapsed().as_secs_f64()
            );
        }
        Err(err) => {
            ok = false;
            detail += &format!("Duffing Liouville run failed: {err}; ");
        }
    }
    let mut norms = Vec::new();
    if let Ok((rec, _)) = &liouville {
        norms.push(("classical_liouville", max_norm_drift(rec)));
    }
    norms.push(("quantum_master", max_norm_drift(&qdkr_master()?.record)));
    norms.push(("quantum_liouville", max_norm_drift(&qdkr_closed(0.0)?.record)));
    norms.push(("classical_fokker_planck", max_norm_drift(&qdkr_classical(1024)?.0.record)));
    if let Ok((r, _)) = duffing_fp(1024) {
        norms.push(("classical_fokker_planck/duffing", max_norm_drift(&r.record)));
    }
    for (name, d) in &norms {
        ok &= *d <= 1e-8;
        detail += &format!("{name} norm drift {d:.1e}; ");
    }
    Ok((ok, detail))
}

fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    let g = DMatrix::from_fn(n, n, |_, _| {
        Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let h = (&g + g.adjoint()).map(|z| z * 0.5);
    let tr: f64 = (0..n).map(|i| h[(i, i)].re).sum();
    let mut m = h;
    for i in 0..n {
        m[(i, i)] -= Complex64::new((tr - 1.0) / n as f64, 0.0);
    }
    m
}

fn c6_weyl_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in [16usize, 64, 256] {
        let g = weyl::commensurate_grid(n, -8.0, 8.0, 2 * n, 1.0).map_err(e)?;
        let h = 2.0 * g.dx();
        for _ in 0..100 {
            let op = random_hermitian(n, &mut rng);
            let kernel = op.map(|z| z / h);
            let dm = DensityMatrix::from_matrix(kernel, &g, 1.0, Source::Quantum).map_err(e)?;
            let back = weyl::to_density_matrix(&weyl::from_density_matrix(&dm).map_err(e)?).map_err(e)?;
            let err = (&back.operator() - &op).iter().map(|z| z.norm()).fold(0.0, f64::max);
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok((worst <= 1e-10, format!("{count} matrices, n ∈ {{16, 64, 256}}, max elementwise error {worst:.2e}")))
}

fn c7_hudson() -> Outcome {
    // Without diffusion the filaments thin below the 1024×1024 grid spacing within a period.
    let r = run(
        &duff_grid(2048, 2048),
        duff_spec(),
        DUFFING,
        DUFF_HBAR,
        Mode::ClassicalLiouville,
        0.0,
        duff_period() / 500.0,
        duff_period(),
        Observers::every(duff_period()),
    )?;
    let rep = weyl::spectrum(&weyl::to_density_matrix(&r.last).map_err(e)?).map_err(e)?;
    let purity = r.last.purity();
    let ok = purity < 1.0 - 1e-4 || rep.negative_mass > 1e-4;
    Ok((ok, format!("after one drive period: purity {purity:.8}, ν = {:.3e}", rep.negative_mass)))
}

fn c8_sme_master() -> Outcome {
    let master = qdkr_master()?;
    // Line lattice wide enough that the unrolled packet never reaches the ends.
    let n = 8192;
    let h = 2.0 * PI / 64.0;
    let lattice = Lattice::new(n, -(n as f64) * h / 2.0, h, QDKR_HBAR).map_err(e)?;
    let system = SmeSystem::new(lattice.clone(), QDKR).map_err(e)?;
    let cfg = SmeConfig::new(QDKR_K, 1.0, 0.01, 100, 8).with_scheme(Scheme::Exponential);
    if (cfg.diffusion(QDKR_HBAR) - QDKR_D).abs() > 1e-12 {
        return Err("D ≠ ħ²k".into());
    }
    let psi = SmeState::gaussian(&lattice, 0.0, 0.0, 2.5).map_err(e)?;
    let start = Instant::now();
    let runs = run_ensemble(&system, &cfg, &psi, 6.0, 1.0).map_err(e)?;
    let recs: Vec<TrajectoryRecord> = runs.into_iter().map(|r| r.record).collect();
    let avg = ensemble_average(&recs).map_err(e)?;
    let (mean, se) = (avg.get("p2").unwrap(), avg.get("p2_se").unwrap());
    let want = master.record.get("p2").unwrap();
    let mut ok = avg.times.len() == master.record.times.len();
    let mut rows = Vec::new();
    for i in 0..avg.times.len().min(want.len()) {
        // At t = 0 every trajectory is identical and only lattice error remains.
        let allowed = (3.0 * se[i]).max(1e-6 * want[i].abs());
        let dev = (mean[i] - want[i]).abs();
        ok &= dev <= allowed;
        rows.push(format!("t={} {:.2}±{:.2} vs {:.2}", avg.times[i], mean[i], se[i], want[i]));
    }
    Ok((ok, format!("{} ({:.0}s)", rows.join(", "), start.elapsed().as_secs_f64())))
}

fn c9_localization() -> Outcome {
    let q = gaussian_state(&torus(256, 256, 40.0), qdkr_spec(), mlab_core::phasespace::Kind::Classical, QDKR_HBAR).map_err(e)?;
    let d = gaussian_state(&duff_grid(1024, 512), duff_spec(), mlab_core::phasespace::Kind::Classical, DUFF_HBAR).map_err(e)?;
    let mut ok = true;
    let mut detail = String::new();
    for (name, pot, s, k) in [("QDKR", QDKR, &q, QDKR_K), ("Duffing", DUFFING, &d, DUFF_K)] {
        let r = localization_ratio(&pot, s, k, 1.0).map_err(e)?;
        let r100 = localization_ratio(&pot, s, 100.0 * k, 1.0).map_err(e)?;
        let scale = r100.median / r.median;
        let in_range = (0.1..=10.0).contains(&r.median);
        let linear = (scale - 100.0).abs() <= 1e-12 * 100.0;
        ok &= in_range && linear;
        detail += &format!(
            "{name}: r median {:.4} (min {:.4}, max {:.4}), ×100 scale {scale:.15}; ",
            r.median, r.min, r.max
        );
    }
    Ok((ok, detail))
}

fn c10_localization_contrast() -> Outcome {
    let t_final = 20.0;
    let window = 1.0 / 3.0;
    let t_mid = t_final * (1.0 - window / 2.0);
    let threshold = 1.0 / (2.0 * t_mid);
    let mut finals = Vec::new();
    let mut ok = true;
    let mut detail = String::new();
    for (nx, nodes) in [(256usize, 2000usize), (512, 3000)] {
        let q = run(
            &torus(nx, 2048, 320.0),
            qdkr_spec(),
            QDKR,
            QDKR_HBAR,
            Mode::QuantumLiouville,
            0.0,
            0.01,
            t_final,
            Observers { gamma: false, purity: false, ..Observers::every(1.0) },
        )?;
        let c = characteristic_moments(&QDKR, qdkr_spec(), 0.0, t_final, 0.01, nodes, 1.0).map_err(e)?;
        let sq = saturation_check(&q.record, "p2", Window::TrailingFraction(window), threshold).map_err(e)?;
        let sc = saturation_check(&c, "p2", Window::TrailingFraction(window), threshold).map_err(e)?;
        let d = divergence(&q.record, &c, "p2", 0.5).map_err(e)?;
        let end = *d.deviation.last().unwrap();
        ok &= sq.saturated && !sc.saturated && end > 0.5;
        finals.push(end);
        detail += &format!(
            "[{nx}×2048, {nodes}² nodes] quantum p2(20) {:.1} rel slope {:.4}, classical p2(20) {:.1} rel slope {:.4}, \
             divergence at t=20 {end:.3} ({:.0}s); ",
            q.record.get("p2").unwrap().last().unwrap(),
            sq.relative_slope(),
            c.get("p2").unwrap().last().unwrap(),
            sc.relative_slope(),
            q.secs
        );
    }
    let agree = (finals[0] - finals[1]).abs() / finals[0].abs().max(finals[1].abs()) <= 0.1;
    ok &= agree;
    detail += &format!("saturation threshold {threshold:.4}; resolutions agree within 10%: {agree}");
    Ok((ok, detail))
}

fn strang_error_ratio() -> Result<(f64, f64, f64), String> {
    let g = duff_grid(1024, 512);
    let s0 = gaussian_state(&g, duff_spec(), mlab_core::phasespace::Kind::Classical, DUFF_HBAR).map_err(e)?;
    let t_final = 0.25;
    let finals: Vec<PhaseSpaceState> = [8.0, 16.0, 32.0]
        .iter()
        .map(|n| {
            let cfg = EvolutionConfig::new(Mode::ClassicalFokkerPlanck, DUFF_D, t_final / n);
            evolve_to(&s0, &DUFFING, &cfg, t_final, &Observers::every(t_final)).map(|r| r.1)
        })
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let diff = |a: &PhaseSpaceState, b: &PhaseSpaceState| {
        (a.f.iter().zip(&b.f).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * g.cell_area()).sqrt()
    };
    let e1 = diff(&finals[0], &finals[1]);
    let e2 = diff(&finals[1], &finals[2]);
    Ok((e1 / e2, e1, e2))
}

/// Mean |1 − purity| after T = 0.5 for step `dt` and `dt/2`, driven by the
/// same Brownian paths.
fn sme_purity_drift_ratio() -> Result<(f64, f64, f64), String> {
    let lat = Lattice::new(128, -20.0, 40.0 / 128.0, QDKR_HBAR).map_err(e)?;
    let sys = SmeSystem::new(lat.clone(), Potential::Harmonic { m: 1.0, omega0: 1.0 }).map_err(e)?;
    let init = SmeState::Mixed(SmeState::gaussian(&lat, 0.0, 0.0, 2.5).map_err(e)?.density_operator());
    let (dt, t_final, paths): (f64, f64, u64) = (0.01, 0.5, 16);
    let mut sums = [0.0; 2];
    for path in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(path);
        let n_fine = (t_final / (dt / 2.0)).round() as usize;
        let fine: Vec<f64> = (0..n_fine).map(|_| rng.sample::<f64, _>(StandardNormal) * (dt / 2.0).sqrt()).collect();
        let coarse: Vec<f64> = fine.chunks(2).map(|c| c[0] + c[1]).collect();
        for (slot, (h, incs)) in [(dt, &coarse), (dt / 2.0, &fine)].into_iter().enumerate() {
            let cfg = SmeConfig::new(QDKR_K, 1.0, h, 1, 0).with_scheme(Scheme::EulerMaruyama);
            let mut tr = SmeTrajectory::new(sys.clone(), cfg, 0, init.clone()).map_err(e)?;
            for &w in incs {
                tr.step_with(w).map_err(e)?;
            }
            sums[slot] += (1.0 - tr.state.purity()).abs();
        }
    }
    Ok((sums[0] / sums[1], sums[0] / paths as f64, sums[1] / paths as f64))
}

fn c11_orders() -> Outcome {
    let (strang, e1, e2) = strang_error_ratio()?;
    let (sme, l1, l2) = sme_purity_drift_ratio()?;
    let ok = (3.0..=5.0).contains(&strang) && (1.5..=2.5).contains(&sme);
    Ok((
        ok,
        format!(
            "Strang ‖f_dt − f_dt/2‖ / ‖f_dt/2 − f_dt/4‖ = {strang:.3} ({e1:.2e}/{e2:.2e}, want [3, 5]); \
             SME purity drift ratio {sme:.3} ({l1:.2e}/{l2:.2e}, want [1.5, 2.5])"
        ),
    ))
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a bare word filters criteria.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 linear-system equivalence", c1_linear_equivalence),
        ("2 rho-positivity conservation", c2_rho_positivity),
        ("3 fig1 negative mass and classification", c3_fig1),
        ("4 fig2 gamma growth and suppression", c4_fig2),
        ("5 conservation suite", c5_conservation),
        ("6 weyl roundtrip", c6_weyl_roundtrip),
        ("7 hudson consistency", c7_hudson),
        ("8 sme ensemble vs master equation", c8_sme_master),
        ("9 localization condition", c9_localization),
        ("10 dynamical localization contrast", c10_localization_contrast),
        ("11 numerical order", c11_orders),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(msg)) => (false, format!("error: {msg}")),
            Err(_) => (false, "panicked".into()),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name} [{:.0}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
