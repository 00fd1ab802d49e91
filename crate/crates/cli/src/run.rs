//! Executes the legs of an experiment and writes their artifacts.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use mlab_core::evolve::evolve_to;
use mlab_core::observables::{fmt17, TrajectoryRecord};
use mlab_core::phasespace::{gaussian_state, read_snapshot, write_snapshot, PhaseSpaceState};
use mlab_core::potentials::Potential;
use mlab_core::sme::{
    ensemble_average, Lattice, MeasurementRecord, SmeCheckpoint, SmeState, SmeSystem, SmeTrajectory,
};
use mlab_core::{weyl, Error};

use crate::config::{ExperimentConfig, LegKind, PhaseLeg, Representation, SmeLeg};

pub const MANIFEST: &str = "manifest.sha256";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop every leg at this time and leave checkpoints behind.
    pub stop_at: Option<f64>,
}

#[derive(Debug)]
pub enum Outcome {
    Finished(Vec<PathBuf>),
    Stopped(f64),
}

struct Sink {
    dir: PathBuf,
    files: Vec<String>,
}

impl Sink {
    fn new(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes an artifact that belongs in the manifest.
    fn write<F>(&mut self, name: &str, body: F) -> Result<(), Error>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), Error>,
    {
        write_file(&self.path(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn manifest(&self) -> Result<PathBuf, Error> {
        let mut names = self.files.clone();
        names.sort();
        names.dedup();
        let path = self.path(MANIFEST);
        write_file(&path, |w| {
            for n in &names {
                let bytes = fs::read(self.path(n))?;
                writeln!(w, "{}  {n}", hex::encode(Sha256::digest(&bytes)))?;
            }
            Ok(())
        })?;
        Ok(path)
    }
}

fn write_file<F>(path: &Path, body: F) -> Result<(), Error>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), Error>,
{
    let mut w = BufWriter::new(fs::File::create(path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_record(path: &Path) -> Result<TrajectoryRecord, Error> {
    TrajectoryRecord::read_csv(BufReader::new(fs::File::open(path)?))
}

/// Appends `next` to `acc`, dropping the first sample of `next` when it
/// repeats the last sample of `acc`.
fn stitch(acc: &mut Option<TrajectoryRecord>, next: TrajectoryRecord) -> Result<(), Error> {
    let Some(a) = acc else {
        *acc = Some(next);
        return Ok(());
    };
    let skip = usize::from(a.times.last() == next.times.first());
    for i in skip..next.len() {
        let vals: Vec<(&str, f64)> = next.series.iter().map(|(k, v)| (k.as_str(), v[i])).collect();
        a.push(next.times[i], &vals)?;
    }
    Ok(())
}

/// Checks that a requested stop or checkpoint time falls on the recording cadence.
fn on_cadence(t: f64, interval: f64) -> bool {
    let k = (t / interval).round();
    (k * interval - t).abs() <= 1e-9 * t.abs().max(1.0)
}

pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outcome, Error> {
    let mut sink = Sink::new(&cfg.out_dir)?;
    let mut stopped = None;
    for leg in &cfg.legs {
        let done = match &leg.kind {
            LegKind::Phase(p) => run_phase_leg(cfg, &leg.name, p, opts, &mut sink)?,
            LegKind::Sme(s) => run_sme_leg(cfg, &leg.name, s, opts, &mut sink)?,
        };
        if let Some(t) = done {
            stopped = Some(t);
        }
    }
    if let Some(t) = stopped {
        return Ok(Outcome::Stopped(t));
    }
    let manifest = sink.manifest()?;
    let mut files: Vec<PathBuf> = sink.files.iter().map(|f| sink.path(f)).collect();
    files.push(manifest);
    Ok(Outcome::Finished(files))
}

fn ckpt_names(leg: &str) -> (String, String) {
    (format!("{leg}.ckpt"), format!("{leg}_record.partial.csv"))
}

/// Runs one phase-space leg. Returns the stop time when interrupted on request.
fn run_phase_leg(
    cfg: &ExperimentConfig,
    name: &str,
    leg: &PhaseLeg,
    opts: RunOptions,
    sink: &mut Sink,
) -> Result<Option<f64>, Error> {
    let (ckpt, partial) = ckpt_names(name);
    let interval = leg.observers.interval;
    for (what, t) in [("checkpoint.every", cfg.checkpoint_every), ("--stop-at", opts.stop_at)] {
        if let Some(t) = t {
            if !on_cadence(t, interval) {
                return Err(Error::Config(format!("{what} = {t} is not a multiple of {name}.diag.interval = {interval}")));
            }
        }
    }
    let (mut state, mut record) = if opts.resume && sink.path(&ckpt).exists() {
        let s = read_snapshot(BufReader::new(fs::File::open(sink.path(&ckpt))?))?;
        if s.grid != leg.grid || s.hbar != cfg.hbar {
            return Err(Error::Config(format!("checkpoint {ckpt} was written for a different grid or ħ")));
        }
        (s, Some(read_record(&sink.path(&partial))?))
    } else {
        let kind = leg.evolution.mode.output_kind();
        let s = gaussian_state(&leg.grid, leg.state, kind, cfg.hbar)
            .map_err(|e| Error::Config(format!("{name}.state: {e}")))?;
        (s, None)
    };
    let target = opts.stop_at.map_or(leg.t_final, |t| t.min(leg.t_final));
    if target <= state.t + 1e-12 {
        if target < leg.t_final {
            return Ok(Some(state.t));
        }
    } else {
        let mut bounds = Vec::new();
        if let Some(every) = cfg.checkpoint_every {
            let mut k = (state.t / every).floor() + 1.0;
            while k * every < target - 1e-9 {
                bounds.push(k * every);
                k += 1.0;
            }
        }
        bounds.push(target);
        for b in bounds {
            match evolve_to(&state, &cfg.potential, &leg.evolution, b, &leg.observers) {
                Ok((rec, out)) => {
                    stitch(&mut record, rec)?;
                    state = out;
                    if b < leg.t_final {
                        write_file(&sink.path(&ckpt), |w| write_snapshot(&state, w))?;
                        let r = record.as_ref().expect("record");
                        write_file(&sink.path(&partial), |w| r.write_csv(w))?;
                    }
                }
                Err(e) => {
                    // Keep what was computed up to the failure.
                    if let Some(r) = &record {
                        sink.write(&format!("{name}_record.partial.csv"), |w| r.write_csv(w))?;
                    }
                    sink.write(&format!("{name}_error.txt"), |w| {
                        writeln!(w, "leg {name} failed after t = {}: {e}", fmt17(state.t))?;
                        Ok(())
                    })?;
                    return Err(e);
                }
            }
        }
        if target < leg.t_final {
            return Ok(Some(target));
        }
    }
    let record = record.ok_or_else(|| Error::Integrity("no record produced".into()))?;
    let _ = fs::remove_file(sink.path(&ckpt));
    let _ = fs::remove_file(sink.path(&partial));
    sink.write(&format!("{name}_record.csv"), |w| record.write_csv(w))?;
    if leg.observers.gamma {
        sink.write(&format!("{name}_gamma.csv"), |w| weyl::write_gamma_csv(&record, w))?;
    }
    if leg.final_spectrum {
        let rep = weyl::spectrum(&weyl::to_density_matrix_strided(&state, leg.spectrum_stride)?)?;
        sink.write(&format!("{name}_spectrum.csv"), |w| rep.write_csv(w))?;
    }
    if leg.snapshot {
        sink.write(&format!("{name}_final.snap"), |w| write_snapshot(&state, w))?;
    }
    Ok(None)
}

fn sme_initial(leg: &SmeLeg, lattice: &Lattice) -> Result<SmeState, Error> {
    let psi = SmeState::gaussian(lattice, leg.x0, leg.p0, leg.sigma_x)?;
    Ok(match leg.representation {
        Representation::Pure => psi,
        Representation::Mixed => SmeState::Mixed(psi.density_operator()),
    })
}

fn write_measurement<W: Write>(m: &MeasurementRecord, seed: u64, stream: u64, w: W) -> Result<(), Error> {
    let mut w = w;
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "# stream={stream}")?;
    m.write_csv(w)
}

fn read_measurement(path: &Path) -> Result<MeasurementRecord, Error> {
    let text = fs::read_to_string(path)?;
    let mut m = MeasurementRecord::default();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let (t, r) = line.split_once(',').ok_or_else(|| Error::Format(format!("bad measurement line {line:?}")))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        m.times.push(parse(t)?);
        m.record.push(parse(r)?);
    }
    Ok(m)
}

struct TrajOut {
    index: u64,
    record: TrajectoryRecord,
    measurement: MeasurementRecord,
}

fn run_sme_leg(
    cfg: &ExperimentConfig,
    name: &str,
    leg: &SmeLeg,
    opts: RunOptions,
    sink: &mut Sink,
) -> Result<Option<f64>, Error> {
    let lattice = Lattice::new(leg.n, leg.x_min, leg.h, cfg.hbar)?;
    let system = SmeSystem::new(lattice.clone(), cfg.potential)?;
    if let Potential::KickedRotor { .. } = cfg.potential {
        if !on_cadence(leg.t_final, 1.0) {
            return Err(Error::Config(format!("{name}.t_final must be a whole number of kicks")));
        }
    }
    let init = sme_initial(leg, &lattice)?;
    let target = opts.stop_at.map_or(leg.t_final, |t| t.min(leg.t_final));
    let dir = sink.dir.clone();
    let outs: Vec<TrajOut> = (0..leg.sme.n_traj as u64)
        .into_par_iter()
        .map(|i| -> Result<TrajOut, Error> {
            let ck = dir.join(format!("{name}_traj_{i}.ckpt"));
            let part = dir.join(format!("{name}_traj_{i}.partial.csv"));
            let mpart = dir.join(format!("{name}_meas_{i}.partial.csv"));
            let (mut tr, mut rec, fresh) = if opts.resume && ck.exists() {
                let c = SmeCheckpoint::read_from(BufReader::new(fs::File::open(&ck)?))?;
                let mut tr = SmeTrajectory::resume(system.clone(), leg.sme, c)?;
                tr.measurement = read_measurement(&mpart)?;
                (tr, Some(read_record(&part)?), false)
            } else {
                (SmeTrajectory::new(system.clone(), leg.sme, i, init.clone())?, None, true)
            };
            if target > tr.t() + 1e-12 {
                let r = tr.run_to(target, leg.interval, fresh)?;
                stitch(&mut rec, r)?;
            }
            let rec = rec.ok_or_else(|| Error::Integrity("no record produced".into()))?;
            if target < leg.t_final {
                write_file(&ck, |w| tr.checkpoint().write_to(w))?;
                write_file(&part, |w| rec.write_csv(w))?;
                write_file(&mpart, |w| write_measurement(&tr.measurement, leg.sme.seed, i, w))?;
            } else {
                for p in [&ck, &part, &mpart] {
                    let _ = fs::remove_file(p);
                }
            }
            Ok(TrajOut { index: i, record: rec, measurement: tr.measurement })
        })
        .collect::<Result<_, _>>()?;
    if target < leg.t_final {
        return Ok(Some(target));
    }
    if leg.per_trajectory {
        for o in &outs {
            sink.write(&format!("{name}_traj_{}.csv", o.index), |w| o.record.write_csv(w))?;
            sink.write(&format!("{name}_meas_{}.csv", o.index), |w| {
                write_measurement(&o.measurement, leg.sme.seed, o.index, w)
            })?;
        }
    }
    let records: Vec<TrajectoryRecord> = outs.into_iter().map(|o| o.record).collect();
    let avg = ensemble_average(&records)?;
    sink.write(&format!("{name}_ensemble.csv"), |w| avg.write_csv(w))?;
    Ok(None)
}

/// Builds the initial phase-space state of a leg (for `locheck`).
pub fn initial_state(cfg: &ExperimentConfig, leg: &PhaseLeg) -> Result<PhaseSpaceState, Error> {
    gaussian_state(&leg.grid, leg.state, leg.evolution.mode.output_kind(), cfg.hbar)
}
