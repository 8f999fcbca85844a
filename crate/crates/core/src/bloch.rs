//! Two-level density-matrix dynamics driven by the local field.
//!
//! Convention: `rho01 = <0|rho|1>`, ground state `|0>`, and the interaction
//! `V = hbar * rabi * (|1><0| + |0><1|)` with `rabi = -d E_local / hbar`,
//! where `d` is the dipole projected on the field axis
//! ([`EmitterSpecies::projected_dipole`]). No rotating-wave approximation:
//!
//! ```text
//! d rho11/dt = 2 rabi Im(rho01) - Gamma rho11
//! d rho00/dt = -2 rabi Im(rho01) + Gamma rho11
//! d rho01/dt = i w01 rho01 - i rabi (rho11 - rho00) - gamma rho01
//! ```
//!
//! The polarization of a species is `P = 2 n0 d Re(rho01)`.

use crate::error::{Error, Result};
use crate::material::{EmitterSpecies, SI};
use crate::par;

/// Trace tolerance checked on every step.
pub const TRACE_TOLERANCE: f64 = 1e-9;
/// Slack on the positivity condition `|rho01|^2 <= rho00 rho11`.
pub const POSITIVITY_TOLERANCE: f64 = 1e-9;
/// Slabs at least this many cells long advance their cells in parallel.
pub const PARALLEL_MIN_CELLS: usize = 4096;
const PARALLEL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrixState {
    pub rho00: f64,
    pub rho11: f64,
    pub rho01_re: f64,
    pub rho01_im: f64,
}

impl DensityMatrixState {
    pub const GROUND: DensityMatrixState = DensityMatrixState {
        rho00: 1.0,
        rho11: 0.0,
        rho01_re: 0.0,
        rho01_im: 0.0,
    };

    pub const EXCITED: DensityMatrixState = DensityMatrixState {
        rho00: 0.0,
        rho11: 1.0,
        rho01_re: 0.0,
        rho01_im: 0.0,
    };

    pub fn trace(&self) -> f64 {
        self.rho00 + self.rho11
    }

    /// Checks trace, population bounds and positivity; returns the trace
    /// error on success.
    pub fn check(&self) -> std::result::Result<f64, String> {
        let trace_err = (self.trace() - 1.0).abs();
        let coh2 = self.rho01_re * self.rho01_re + self.rho01_im * self.rho01_im;
        if !(trace_err.is_finite() && coh2.is_finite()) {
            return Err("non-finite density matrix".into());
        }
        if trace_err > TRACE_TOLERANCE {
            return Err(format!("trace off by {trace_err:.3e}"));
        }
        if self.rho11 < -POSITIVITY_TOLERANCE || self.rho11 > 1.0 + POSITIVITY_TOLERANCE {
            return Err(format!("excited population {:.6e} outside [0, 1]", self.rho11));
        }
        if coh2 > self.rho00 * self.rho11 + POSITIVITY_TOLERANCE {
            return Err(format!(
                "positivity violated: |rho01|^2 = {coh2:.6e} > rho00 rho11 = {:.6e}",
                self.rho00 * self.rho11
            ));
        }
        Ok(trace_err)
    }

    fn axpy(self, k: DensityMatrixState, h: f64) -> DensityMatrixState {
        DensityMatrixState {
            rho00: self.rho00 + h * k.rho00,
            rho11: self.rho11 + h * k.rho11,
            rho01_re: self.rho01_re + h * k.rho01_re,
            rho01_im: self.rho01_im + h * k.rho01_im,
        }
    }
}

/// Per-species constants used by the integrator.
#[derive(Clone, Copy, Debug)]
struct Rates {
    omega01: f64,
    decay: f64,
    gamma: f64,
    rabi_per_field: f64,
    polarization_per_coherence: f64,
}

impl Rates {
    fn of(s: &EmitterSpecies) -> Rates {
        let d = s.projected_dipole();
        Rates {
            omega01: s.omega01,
            decay: s.decay,
            gamma: s.gamma(),
            rabi_per_field: -d / SI.hbar,
            polarization_per_coherence: 2.0 * s.density * d,
        }
    }
}

#[inline(always)]
fn derivative(s: DensityMatrixState, rabi: f64, r: &Rates) -> DensityMatrixState {
    let d11 = 2.0 * rabi * s.rho01_im - r.decay * s.rho11;
    DensityMatrixState {
        rho00: -d11,
        rho11: d11,
        rho01_re: -r.omega01 * s.rho01_im - r.gamma * s.rho01_re,
        rho01_im: r.omega01 * s.rho01_re - r.gamma * s.rho01_im - rabi * (s.rho11 - s.rho00),
    }
}

#[inline(always)]
fn rk4(s: DensityMatrixState, rabi: [f64; 3], dt: f64, r: &Rates) -> DensityMatrixState {
    let k1 = derivative(s, rabi[0], r);
    let k2 = derivative(s.axpy(k1, 0.5 * dt), rabi[1], r);
    let k3 = derivative(s.axpy(k2, 0.5 * dt), rabi[1], r);
    let k4 = derivative(s.axpy(k3, dt), rabi[2], r);
    let h = dt / 6.0;
    DensityMatrixState {
        rho00: s.rho00 + h * (k1.rho00 + 2.0 * (k2.rho00 + k3.rho00) + k4.rho00),
        rho11: s.rho11 + h * (k1.rho11 + 2.0 * (k2.rho11 + k3.rho11) + k4.rho11),
        rho01_re: s.rho01_re + h * (k1.rho01_re + 2.0 * (k2.rho01_re + k3.rho01_re) + k4.rho01_re),
        rho01_im: s.rho01_im + h * (k1.rho01_im + 2.0 * (k2.rho01_im + k3.rho01_im) + k4.rho01_im),
    }
}

/// Rabi frequency `-d E_local / hbar` for a species.
pub fn rabi_frequency(e_local: f64, s: &EmitterSpecies) -> f64 {
    Rates::of(s).rabi_per_field * e_local
}

/// Right-hand side of the Bloch equations for a given Rabi frequency.
pub fn bloch_derivative(state: DensityMatrixState, rabi: f64, s: &EmitterSpecies) -> DensityMatrixState {
    derivative(state, rabi, &Rates::of(s))
}

/// Lorentz local field `E + P / (3 eps0)`; `p_total` sums every species.
pub fn local_field(e_macroscopic: f64, p_total: f64) -> f64 {
    e_macroscopic + p_total / (3.0 * SI.eps0)
}

/// One classical RK4 step of length `dt` with the local field sampled at the
/// beginning, middle and end of the step.
pub fn advance_cell(
    state: DensityMatrixState,
    e_local_begin: f64,
    e_local_mid: f64,
    e_local_end: f64,
    dt: f64,
    s: &EmitterSpecies,
) -> DensityMatrixState {
    let r = Rates::of(s);
    let rabi = [e_local_begin, e_local_mid, e_local_end].map(|e| r.rabi_per_field * e);
    rk4(state, rabi, dt, &r)
}

/// Total and per-species polarization of one cell.
pub fn polarization_of_cell(states: &[DensityMatrixState], species: &[EmitterSpecies]) -> (f64, Vec<f64>) {
    assert_eq!(states.len(), species.len(), "states and species must be aligned");
    let partials: Vec<f64> = states
        .iter()
        .zip(species)
        .map(|(st, s)| Rates::of(s).polarization_per_coherence * st.rho01_re)
        .collect();
    (partials.iter().sum(), partials)
}

/// Bloch states of one species over every slab cell.
#[derive(Clone, Debug)]
pub struct BlochBlock {
    species: EmitterSpecies,
    rates: Rates,
    pub states: Vec<DensityMatrixState>,
}

impl BlochBlock {
    /// All cells start in the ground state.
    pub fn new(species: EmitterSpecies, cells: usize) -> BlochBlock {
        BlochBlock {
            species,
            rates: Rates::of(&species),
            states: vec![DensityMatrixState::GROUND; cells],
        }
    }

    pub fn species(&self) -> &EmitterSpecies {
        &self.species
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Polarization of every cell, written into `out`.
    pub fn polarization(&self, out: &mut [f64]) {
        let k = self.rates.polarization_per_coherence;
        for (o, s) in out.iter_mut().zip(&self.states) {
            *o = k * s.rho01_re;
        }
    }

    /// Polarization after one step with the local field frozen at
    /// `e_local`, without touching the stored states.
    pub fn predict_polarization(&self, e_local: &[f64], dt: f64, out: &mut [f64]) {
        let r = self.rates;
        let states = &self.states;
        let kernel = |offset: usize, chunk: &mut [f64]| {
            for (j, o) in chunk.iter_mut().enumerate() {
                let c = offset + j;
                let rabi = r.rabi_per_field * e_local[c];
                *o = r.polarization_per_coherence * rk4(states[c], [rabi; 3], dt, &r).rho01_re;
            }
        };
        if out.len() >= PARALLEL_MIN_CELLS && par::is_parallel() {
            par::map_chunks_mut(out, PARALLEL_CHUNK, kernel);
        } else {
            kernel(0, out);
        }
    }

    /// Advances every cell by `dt` with the local field interpolated
    /// linearly between `e_begin` and `e_end`. Returns the largest trace
    /// error, or the first cell that breaks an invariant.
    pub fn advance(&mut self, e_begin: &[f64], e_end: &[f64], dt: f64) -> std::result::Result<f64, (usize, String)> {
        let r = self.rates;
        let kernel = |offset: usize, chunk: &mut [DensityMatrixState]| -> std::result::Result<f64, (usize, String)> {
            let mut worst = 0.0f64;
            for (j, st) in chunk.iter_mut().enumerate() {
                let c = offset + j;
                let (b, e) = (e_begin[c], e_end[c]);
                let rabi = [b, 0.5 * (b + e), e].map(|x| r.rabi_per_field * x);
                *st = rk4(*st, rabi, dt, &r);
                worst = worst.max(st.check().map_err(|msg| (c, msg))?);
            }
            Ok(worst)
        };
        let n = self.states.len();
        if n >= PARALLEL_MIN_CELLS && par::is_parallel() {
            par::map_chunks_mut(&mut self.states, PARALLEL_CHUNK, kernel)
                .into_iter()
                .try_fold(0.0f64, |acc, r| r.map(|w| acc.max(w)))
        } else {
            kernel(0, &mut self.states)
        }
    }

    /// Same as [`BlochBlock::advance`] but always sequential; used by the
    /// benchmarks to compare against the parallel path.
    pub fn advance_sequential(&mut self, e_begin: &[f64], e_end: &[f64], dt: f64) -> f64 {
        let r = self.rates;
        let mut worst = 0.0f64;
        for (c, st) in self.states.iter_mut().enumerate() {
            let (b, e) = (e_begin[c], e_end[c]);
            let rabi = [b, 0.5 * (b + e), e].map(|x| r.rabi_per_field * x);
            *st = rk4(*st, rabi, dt, &r);
            worst = worst.max((st.trace() - 1.0).abs());
        }
        worst
    }

    /// Same as [`BlochBlock::advance`], parallel regardless of slab size.
    #[cfg(feature = "parallel")]
    pub fn advance_parallel(&mut self, e_begin: &[f64], e_end: &[f64], dt: f64) -> f64 {
        let r = self.rates;
        par::map_chunks_mut(&mut self.states, PARALLEL_CHUNK, |offset, chunk| {
            let mut worst = 0.0f64;
            for (j, st) in chunk.iter_mut().enumerate() {
                let c = offset + j;
                let (b, e) = (e_begin[c], e_end[c]);
                let rabi = [b, 0.5 * (b + e), e].map(|x| r.rabi_per_field * x);
                *st = rk4(*st, rabi, dt, &r);
                worst = worst.max((st.trace() - 1.0).abs());
            }
            worst
        })
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Converts a block-level invariant failure into a crate error.
pub(crate) fn instability(species: usize, step: u64, (cell, detail): (usize, String)) -> Error {
    Error::IntegratorInstability {
        cell,
        species,
        step,
        detail,
    }
}

/// Largest `dt` allowed for a transition frequency (`w01 dt <= 0.2`).
pub fn max_time_step(omega01: f64) -> f64 {
    0.2 / omega01
}

pub(crate) fn check_time_step(species: &[EmitterSpecies], dt: f64) -> Result<()> {
    for s in species {
        if s.omega01 * dt > 0.2 {
            return Err(Error::Grid(format!(
                "time step {dt:.3e} s under-resolves the carrier: w01 dt = {:.3} > 0.2",
                s.omega01 * dt
            )));
        }
    }
    Ok(())
}
