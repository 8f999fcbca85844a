//! Yee-staggered 1D propagation of `E_x`/`H_y` coupled to Bloch emitters.
//!
//! Integer nodes `i` carry `E_x` and `P_x`; half-integer nodes `i + 1/2`
//! (array index `i`) carry `H_y`. Each step:
//!
//! 1. advance the auxiliary incident line and `H_y`, with the
//!    total-field/scattered-field correction at the source plane;
//! 2. predict `P_x` one step ahead with the local field frozen at its
//!    current value;
//! 3. advance `E_x` with the predicted polarization current;
//! 4. re-advance the Bloch states from their stored values with the local
//!    field interpolated between the old and the new one, then correct
//!    `E_x` for the difference between predicted and final `P_x`.
//!
//! The incident wave comes from a separate vacuum line with the same `dz`
//! and `dt`, so it obeys exactly the discrete dispersion relation of the
//! main grid and the scattered-field region stays empty in vacuum.

use std::io::{Read, Write};
use std::ops::Range;

use crate::bloch::{self, BlochBlock, DensityMatrixState, PARALLEL_MIN_CELLS};
use crate::error::{Error, Result};
use crate::lorentz::{chi_species, refractive_index};
use crate::material::{EmitterSpecies, SlabMedium, SI};
use crate::par;
use crate::spectra::{ProbePair, ProbeRecording};

/// Default cell size, m.
pub const DEFAULT_DZ: f64 = 1e-9;
/// Default Courant number `c dt / dz`.
pub const DEFAULT_COURANT: f64 = 0.5;
/// Cells per in-medium wavelength required by the resolution check.
pub const CELLS_PER_WAVELENGTH: f64 = 40.0;
/// Steps between finiteness checks of the fields.
pub const NAN_CHECK_INTERVAL: u64 = 1000;
/// Largest `omega_p dt` accepted at setup.
pub const MAX_PLASMA_PHASE: f64 = 0.1;
/// Magnitude above which a field counts as overflowing.
const FIELD_LIMIT: f64 = 1e30;
const FIELD_CHUNK: usize = 4096;

/// Uniform 1D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    /// Cell size, m.
    pub dz: f64,
    /// Number of `E_x` nodes.
    pub nz: usize,
    /// Time step, s.
    pub dt: f64,
    /// `c dt / dz`.
    pub courant: f64,
    /// `E_x` nodes inside the slab.
    pub slab_cells: Range<usize>,
}

impl Grid1D {
    pub fn new(dz: f64, courant: f64, nz: usize, slab_cells: Range<usize>) -> Result<Grid1D> {
        if !(dz > 0.0 && dz.is_finite()) {
            return Err(Error::Grid(format!("cell size must be positive, got {dz}")));
        }
        if !(courant > 0.0 && courant <= 1.0) {
            return Err(Error::Grid(format!("Courant number must lie in (0, 1], got {courant}")));
        }
        if nz < 4 {
            return Err(Error::Grid(format!("need at least 4 nodes, got {nz}")));
        }
        if slab_cells.end > nz - 1 || slab_cells.start < 1 {
            return Err(Error::Grid(format!(
                "slab cells {slab_cells:?} must lie strictly inside 0..{nz}"
            )));
        }
        Ok(Grid1D {
            dz,
            nz,
            dt: courant * dz / SI.c,
            courant,
            slab_cells,
        })
    }

    /// `dt / (mu0 dz)`.
    pub fn h_coefficient(&self) -> f64 {
        self.dt / (SI.mu0 * self.dz)
    }

    /// `dt / (eps0 dz)`.
    pub fn e_coefficient(&self) -> f64 {
        self.dt / (SI.eps0 * self.dz)
    }

    /// Checks `dz <= lambda0 / (40 max|n|)` over `band`, where `lambda0` is
    /// the vacuum wavelength of the reference transition.
    pub fn check_resolution(&self, medium: &SlabMedium, band: (f64, f64)) -> Result<f64> {
        let n_max = max_index(medium, band);
        let lambda0 = 2.0 * std::f64::consts::PI * SI.c / medium.reference().omega01;
        let limit = lambda0 / (CELLS_PER_WAVELENGTH * n_max);
        if self.dz > limit {
            return Err(Error::Grid(format!(
                "cell size {:.3e} m exceeds {limit:.3e} m needed for |n| up to {n_max:.2}",
                self.dz
            )));
        }
        Ok(n_max)
    }
}

/// Largest `|n|` of the medium over a frequency band.
pub fn max_index(medium: &SlabMedium, band: (f64, f64)) -> f64 {
    const SAMPLES: usize = 4000;
    if medium.species.iter().all(|s| s.density == 0.0) {
        return 1.0;
    }
    (0..=SAMPLES)
        .map(|k| band.0 + (band.1 - band.0) * k as f64 / SAMPLES as f64)
        .map(|w| refractive_index(chi_species(w, &medium.species)).norm())
        .fold(1.0, f64::max)
}

/// Distances of probes, source plane and boundaries from the slab, m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    /// Reflection probe position from the left boundary.
    pub reflection_probe: f64,
    /// Source plane position from the left boundary.
    pub source: f64,
    /// Transmission probe distance behind the slab.
    pub transmission_gap: f64,
    /// Right boundary distance behind the slab.
    pub right_gap: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            reflection_probe: 20e-9,
            source: 40e-9,
            transmission_gap: 50e-9,
            right_gap: 100e-9,
        }
    }
}

/// Node indices of every landmark on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub nz: usize,
    pub reflection_probe: usize,
    pub source: usize,
    pub slab: Range<usize>,
    pub transmission_probe: usize,
}

impl Layout {
    /// Landmarks for a slab starting `medium.z_start` from the left boundary.
    pub fn new(medium: &SlabMedium, dz: f64, margins: Margins) -> Result<Layout> {
        let idx = |z: f64| (z / dz).round() as usize;
        let slab = idx(medium.z_start)..idx(medium.z_end());
        let layout = Layout {
            nz: idx(medium.z_end() + margins.right_gap) + 1,
            reflection_probe: idx(margins.reflection_probe),
            source: idx(margins.source),
            transmission_probe: idx(medium.z_end() + margins.transmission_gap),
            slab,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0 < self.reflection_probe
            && self.reflection_probe < self.source
            && self.source < self.slab.start
            && self.slab.start < self.slab.end
            && self.slab.end <= self.transmission_probe
            && self.transmission_probe + 1 < self.nz;
        if !ok {
            return Err(Error::Grid(format!(
                "landmarks out of order: reflection probe {}, source {}, slab {:?}, transmission probe {}, nodes {}",
                self.reflection_probe, self.source, self.slab, self.transmission_probe, self.nz
            )));
        }
        Ok(())
    }
}

/// Time profile of the injected field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceKind {
    /// `exp(-(t - t0)^2 / (2 sigma^2)) cos(wc (t - t0))` with the intensity
    /// FWHM equal to `fwhm` and `t0 = 8 sigma`.
    GaussianPulse { fwhm: f64 },
    /// `sin(wc t)` switched on with a raised-cosine envelope of length `ramp_time`.
    CwRamp { ramp_time: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Carrier angular frequency, rad/s.
    pub carrier: f64,
    /// Peak incident field, V/m.
    pub peak_e: f64,
    /// First total-field node.
    pub injection_cell: usize,
}

impl SourceSpec {
    pub fn gaussian(carrier: f64, fwhm: f64, peak_e: f64, injection_cell: usize) -> SourceSpec {
        SourceSpec {
            kind: SourceKind::GaussianPulse { fwhm },
            carrier,
            peak_e,
            injection_cell,
        }
    }

    pub fn cw(carrier: f64, ramp_time: f64, peak_e: f64, injection_cell: usize) -> SourceSpec {
        SourceSpec {
            kind: SourceKind::CwRamp { ramp_time },
            carrier,
            peak_e,
            injection_cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = positive(self.carrier)
            && self.peak_e.is_finite()
            && match self.kind {
                SourceKind::GaussianPulse { fwhm } => positive(fwhm),
                SourceKind::CwRamp { ramp_time } => positive(ramp_time),
            };
        if !ok {
            return Err(Error::config("source", format!("invalid source {self:?}")));
        }
        Ok(())
    }

    /// Gaussian width parameter `sigma` of a pulse.
    pub fn sigma(&self) -> Option<f64> {
        match self.kind {
            SourceKind::GaussianPulse { fwhm } => Some(fwhm / (2.0 * std::f64::consts::LN_2.sqrt())),
            SourceKind::CwRamp { .. } => None,
        }
    }

    /// Pulse center time (`8 sigma`), or the end of the ramp.
    pub fn center_time(&self) -> f64 {
        match self.kind {
            SourceKind::GaussianPulse { .. } => 8.0 * self.sigma().unwrap(),
            SourceKind::CwRamp { ramp_time } => ramp_time,
        }
    }

    /// Incident field at time `t`.
    pub fn field(&self, t: f64) -> f64 {
        match self.kind {
            SourceKind::GaussianPulse { .. } => {
                let sigma = self.sigma().unwrap();
                let tau = t - 8.0 * sigma;
                self.peak_e * (-tau * tau / (2.0 * sigma * sigma)).exp() * (self.carrier * tau).cos()
            }
            SourceKind::CwRamp { ramp_time } => {
                let envelope = if t <= 0.0 {
                    0.0
                } else if t < ramp_time {
                    0.5 * (1.0 - (std::f64::consts::PI * t / ramp_time).cos())
                } else {
                    1.0
                };
                self.peak_e * envelope * (self.carrier * t).sin()
            }
        }
    }

    /// Magnitude of the closed-form Fourier transform of a pulse,
    /// `|int E(t) exp(i w t) dt|`.
    pub fn spectrum_magnitude(&self, omega: f64) -> Option<f64> {
        let sigma = self.sigma()?;
        let g = |x: f64| (-0.5 * sigma * sigma * x * x).exp();
        let a = self.peak_e * sigma * (2.0 * std::f64::consts::PI).sqrt() / 2.0;
        Some(a * (g(omega - self.carrier) + g(omega + self.carrier)))
    }
}

/// `h[i] -= coef (e[i+1] - e[i])` for every half-integer node.
pub fn update_h(e: &[f64], h: &mut [f64], coef: f64) {
    debug_assert_eq!(h.len() + 1, e.len());
    let kernel = |offset: usize, chunk: &mut [f64]| {
        for (j, hv) in chunk.iter_mut().enumerate() {
            let i = offset + j;
            *hv -= coef * (e[i + 1] - e[i]);
        }
    };
    if h.len() >= PARALLEL_MIN_CELLS && par::is_parallel() {
        par::map_chunks_mut(h, FIELD_CHUNK, kernel);
    } else {
        kernel(0, h);
    }
}

/// `e[i] -= coef (h[i] - h[i-1])` for every interior integer node.
pub fn update_e(e: &mut [f64], h: &[f64], coef: f64) {
    debug_assert_eq!(h.len() + 1, e.len());
    let n = e.len();
    let interior = &mut e[1..n - 1];
    let kernel = |offset: usize, chunk: &mut [f64]| {
        for (j, ev) in chunk.iter_mut().enumerate() {
            let i = offset + j + 1;
            *ev -= coef * (h[i] - h[i - 1]);
        }
    };
    if interior.len() >= PARALLEL_MIN_CELLS && par::is_parallel() {
        par::map_chunks_mut(interior, FIELD_CHUNK, kernel);
    } else {
        kernel(0, interior);
    }
}

/// First-order Mur coefficient `(S - 1) / (S + 1)`.
pub fn mur_coefficient(courant: f64) -> f64 {
    (courant - 1.0) / (courant + 1.0)
}

/// Numerical wavenumber of the 1D Yee scheme:
/// `sin(w dt / 2) / (c dt) = sin(k dz / 2) / dz`.
pub fn numerical_wavenumber(omega: f64, dz: f64, dt: f64) -> f64 {
    2.0 / dz * (dz / (SI.c * dt) * (omega * dt / 2.0).sin()).asin()
}

/// Index of the source plane on the auxiliary line.
const AUX_SOURCE_OFFSET: usize = 20;
/// Gap between the source plane and the absorber on the auxiliary line.
const AUX_GAP: usize = 20;
/// Design round-trip reflection of the auxiliary absorber.
const AUX_ABSORBER_REFLECTION: f64 = 1e-12;
/// Absorber length in carrier wavelengths.
const AUX_ABSORBER_WAVELENGTHS: f64 = 3.0;
const AUX_GRADING_ORDER: i32 = 3;

/// Vacuum line carrying only the incident wave: hard source at node 0,
/// graded matched absorber and a perfect conductor at the far end.
#[derive(Clone, Debug)]
struct IncidentLine {
    e: Vec<f64>,
    h: Vec<f64>,
    ca: Vec<f64>,
    cb: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
}

impl IncidentLine {
    fn new(grid: &Grid1D, carrier: f64) -> IncidentLine {
        let wavelength = 2.0 * std::f64::consts::PI * SI.c / carrier / grid.dz;
        let cells = ((AUX_ABSORBER_WAVELENGTHS * wavelength).ceil() as usize).max(64);
        let start = AUX_SOURCE_OFFSET + AUX_GAP;
        let n = start + cells + 1;
        let m = AUX_GRADING_ORDER as f64;
        let sigma_max =
            -AUX_ABSORBER_REFLECTION.ln() * (m + 1.0) * SI.eps0 * SI.c / (2.0 * cells as f64 * grid.dz);
        let sigma = |x: f64| {
            if x <= 0.0 {
                0.0
            } else {
                sigma_max * (x / cells as f64).min(1.0).powi(AUX_GRADING_ORDER)
            }
        };
        let half = |s: f64| s * grid.dt / (2.0 * SI.eps0);
        let mut ca = vec![1.0; n];
        let mut cb = vec![grid.e_coefficient(); n];
        let mut da = vec![1.0; n - 1];
        let mut db = vec![grid.h_coefficient(); n - 1];
        for j in 0..n {
            let a = half(sigma(j as f64 - start as f64));
            ca[j] = (1.0 - a) / (1.0 + a);
            cb[j] = grid.e_coefficient() / (1.0 + a);
            if j + 1 < n {
                // Magnetic conductivity matched to the electric one.
                let b = half(sigma(j as f64 + 0.5 - start as f64));
                da[j] = (1.0 - b) / (1.0 + b);
                db[j] = grid.h_coefficient() / (1.0 + b);
            }
        }
        IncidentLine {
            e: vec![0.0; n],
            h: vec![0.0; n - 1],
            ca,
            cb,
            da,
            db,
        }
    }

    fn update_h(&mut self) {
        for j in 0..self.h.len() {
            self.h[j] = self.da[j] * self.h[j] - self.db[j] * (self.e[j + 1] - self.e[j]);
        }
    }

    fn update_e(&mut self, source: f64) {
        let n = self.e.len();
        for j in 1..n - 1 {
            self.e[j] = self.ca[j] * self.e[j] - self.cb[j] * (self.h[j] - self.h[j - 1]);
        }
        self.e[0] = source;
        self.e[n - 1] = 0.0;
    }

    /// Incident `E` at the source plane.
    fn e_at_source(&self) -> f64 {
        self.e[AUX_SOURCE_OFFSET]
    }

    /// Incident `H` half a cell left of the source plane.
    fn h_before_source(&self) -> f64 {
        self.h[AUX_SOURCE_OFFSET - 1]
    }
}

/// Everything that evolves in time.
#[derive(Clone, Debug)]
pub struct SimulationState {
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    /// Total polarization on every node (zero outside the slab).
    pub p: Vec<f64>,
    /// Polarization of each species over the slab cells.
    pub partials: Vec<Vec<f64>>,
    /// Bloch states of each species over the slab cells.
    pub bloch: Vec<BlochBlock>,
    pub step: u64,
    /// Time of `E_x`, s.
    pub clock: f64,
}

impl SimulationState {
    /// Electromagnetic energy per unit area on the grid, J/m^2.
    pub fn field_energy(&self, dz: f64) -> f64 {
        let ue: f64 = self.e.iter().map(|v| v * v).sum::<f64>() * 0.5 * SI.eps0;
        let uh: f64 = self.h.iter().map(|v| v * v).sum::<f64>() * 0.5 * SI.mu0;
        (ue + uh) * dz
    }

    /// Electromagnetic energy per unit area between two nodes, J/m^2.
    pub fn field_energy_between(&self, nodes: Range<usize>, dz: f64) -> f64 {
        let ue: f64 = self.e[nodes.clone()].iter().map(|v| v * v).sum::<f64>() * 0.5 * SI.eps0;
        let uh: f64 = self.h[nodes.start..nodes.end - 1].iter().map(|v| v * v).sum::<f64>() * 0.5 * SI.mu0;
        (ue + uh) * dz
    }
}

/// Field and polarization time series at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMonitor {
    pub cell: usize,
    pub e: Vec<f64>,
    pub p: Vec<f64>,
}

/// Everything needed to build a [`Simulation`].
#[derive(Clone, Debug)]
pub struct SimulationSetup {
    pub grid: Grid1D,
    pub layout: Layout,
    /// Empty for a vacuum run.
    pub species: Vec<EmitterSpecies>,
    pub source: SourceSpec,
    pub steps: u64,
    /// Solver steps per probe sample.
    pub decimation: usize,
    /// Node pinned to `E_x = 0` (perfect mirror), for diagnostics.
    pub mirror_cell: Option<usize>,
    /// Nodes whose `E_x` and `P_x` are recorded with the probes.
    pub monitors: Vec<usize>,
}

impl SimulationSetup {
    /// Standard setup: slab placed per `margins`, source at the source
    /// plane, probes sampled fast enough for frequencies up to `band.1`,
    /// resolution checked over `band`.
    pub fn new(
        medium: &SlabMedium,
        dz: f64,
        courant: f64,
        duration: f64,
        source: SourceSpec,
        band: (f64, f64),
        margins: Margins,
    ) -> Result<SimulationSetup> {
        medium.validate()?;
        let layout = Layout::new(medium, dz, margins)?;
        let grid = Grid1D::new(dz, courant, layout.nz, layout.slab.clone())?;
        grid.check_resolution(medium, band)?;
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::config("duration", format!("must be positive, got {duration}")));
        }
        let steps = (duration / grid.dt).ceil() as u64;
        let decimation = ((std::f64::consts::PI / (4.0 * band.1 * grid.dt)).floor() as usize).max(1);
        let source = SourceSpec {
            injection_cell: layout.source,
            ..source
        };
        let setup = SimulationSetup {
            grid,
            layout,
            species: medium.species.clone(),
            source,
            steps,
            decimation,
            mirror_cell: None,
            monitors: vec![],
        };
        setup.validate()?;
        Ok(setup)
    }

    /// Same grid, source and probes without any emitters.
    pub fn vacuum_reference(&self) -> SimulationSetup {
        SimulationSetup {
            species: vec![],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.source.validate()?;
        if self.layout.nz != self.grid.nz || self.layout.slab != self.grid.slab_cells {
            return Err(Error::Grid("layout and grid disagree".into()));
        }
        let s = self.source.injection_cell;
        if !(self.layout.reflection_probe < s && s < self.layout.slab.start) {
            return Err(Error::Grid(format!(
                "source plane {s} must lie between the reflection probe {} and the slab start {}",
                self.layout.reflection_probe, self.layout.slab.start
            )));
        }
        for sp in &self.species {
            sp.validate()?;
        }
        bloch::check_time_step(&self.species, self.grid.dt)?;
        for sp in &self.species {
            let phase = sp.plasma_frequency() * self.grid.dt;
            if phase > MAX_PLASMA_PHASE {
                return Err(Error::Grid(format!(
                    "omega_p dt = {phase:.3} exceeds {MAX_PLASMA_PHASE}; reduce the time step"
                )));
            }
        }
        if self.decimation == 0 {
            return Err(Error::Grid("decimation must be at least 1".into()));
        }
        if let Some(m) = self.mirror_cell {
            if m <= s || m >= self.layout.nz - 1 {
                return Err(Error::Grid(format!("mirror node {m} must lie in the total-field region")));
            }
        }
        if self.monitors.iter().any(|&m| m >= self.layout.nz) {
            return Err(Error::Grid("monitor node outside the grid".into()));
        }
        Ok(())
    }
}

/// What a finished run hands to the analysis.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub probes: ProbePair,
    pub monitors: Vec<CellMonitor>,
    /// Work done by the field on the medium, J/m^2.
    pub medium_work: f64,
    /// Field energy left on the grid, J/m^2.
    pub field_energy: f64,
    /// Field energy left between the two probes, J/m^2.
    pub probe_region_energy: f64,
    /// Largest `|Tr rho - 1|` seen in any cell at any step.
    pub max_trace_error: f64,
    pub steps: u64,
}

/// A configured, steppable simulation.
#[derive(Clone, Debug)]
pub struct Simulation {
    setup: SimulationSetup,
    state: SimulationState,
    aux: IncidentLine,
    probes: ProbePair,
    monitors: Vec<CellMonitor>,
    medium_work: f64,
    max_trace_error: f64,
    // Scratch buffers over the slab cells.
    e_old: Vec<f64>,
    local_begin: Vec<f64>,
    local_end: Vec<f64>,
    p_pred: Vec<f64>,
    p_pred_species: Vec<f64>,
}

impl Simulation {
    pub fn new(setup: SimulationSetup) -> Result<Simulation> {
        setup.validate()?;
        let g = &setup.grid;
        let cells = g.slab_cells.len();
        let dt_sample = g.dt * setup.decimation as f64;
        let t0 = 0.5 * g.dt;
        let probes = ProbePair {
            reflection: ProbeRecording::new(setup.layout.reflection_probe, dt_sample, setup.decimation, t0),
            transmission: ProbeRecording::new(setup.layout.transmission_probe, dt_sample, setup.decimation, t0),
        };
        let monitors = setup
            .monitors
            .iter()
            .map(|&cell| CellMonitor {
                cell,
                e: vec![],
                p: vec![],
            })
            .collect();
        let state = SimulationState {
            e: vec![0.0; g.nz],
            h: vec![0.0; g.nz - 1],
            p: vec![0.0; g.nz],
            partials: vec![vec![0.0; cells]; setup.species.len()],
            bloch: setup.species.iter().map(|s| BlochBlock::new(*s, cells)).collect(),
            step: 0,
            clock: 0.0,
        };
        Ok(Simulation {
            aux: IncidentLine::new(g, setup.source.carrier),
            state,
            probes,
            monitors,
            medium_work: 0.0,
            max_trace_error: 0.0,
            e_old: vec![0.0; cells],
            local_begin: vec![0.0; cells],
            local_end: vec![0.0; cells],
            p_pred: vec![0.0; cells],
            p_pred_species: vec![0.0; cells],
            setup,
        })
    }

    pub fn setup(&self) -> &SimulationSetup {
        &self.setup
    }

    pub fn state(&self) -> &SimulationState {
        &self.state
    }

    pub fn probes(&self) -> &ProbePair {
        &self.probes
    }

    pub fn medium_work(&self) -> f64 {
        self.medium_work
    }

    pub fn max_trace_error(&self) -> f64 {
        self.max_trace_error
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.setup.steps
    }

    /// One full leapfrog cycle.
    pub fn step(&mut self) -> Result<()> {
        let g = &self.setup.grid;
        let (dt, ch, ce) = (g.dt, g.h_coefficient(), g.e_coefficient());
        let slab = g.slab_cells.clone();
        let s = self.setup.source.injection_cell;
        let nz = g.nz;
        let st = &mut self.state;
        let has_medium = !st.bloch.is_empty();

        // Magnetic half step; the incident E on the aux line is still at step n.
        self.aux.update_h();
        update_h(&st.e, &mut st.h, ch);
        st.h[s - 1] += ch * self.aux.e_at_source();

        let rp = self.setup.layout.reflection_probe;
        let tp = self.setup.layout.transmission_probe;
        let (e_r_old, e_t_old) = (st.e[rp], st.e[tp]);
        let (left_old, right_old) = (st.e[0], st.e[nz - 1]);
        let (left_inner, right_inner) = (st.e[1], st.e[nz - 2]);

        // Predictor: polarization one step ahead with the local field frozen.
        if has_medium {
            for (c, i) in slab.clone().enumerate() {
                self.e_old[c] = st.e[i];
                self.local_begin[c] = bloch::local_field(st.e[i], st.p[i]);
            }
            self.p_pred.iter_mut().for_each(|v| *v = 0.0);
            for block in &st.bloch {
                block.predict_polarization(&self.local_begin, dt, &mut self.p_pred_species);
                for (a, b) in self.p_pred.iter_mut().zip(&self.p_pred_species) {
                    *a += b;
                }
            }
        }

        // Electric step.
        let t_next = (st.step + 1) as f64 * dt;
        self.aux.update_e(self.setup.source.field(t_next));
        update_e(&mut st.e, &st.h, ce);
        st.e[s] += ce * self.aux.h_before_source();
        if has_medium {
            for (c, i) in slab.clone().enumerate() {
                st.e[i] -= (self.p_pred[c] - st.p[i]) / SI.eps0;
            }
        }
        if let Some(m) = self.setup.mirror_cell {
            st.e[m] = 0.0;
        }
        let k = mur_coefficient(g.courant);
        st.e[0] = left_inner + k * (st.e[1] - left_old);
        st.e[nz - 1] = right_inner + k * (st.e[nz - 2] - right_old);

        // Corrector: re-advance from the stored states, then make E consistent
        // with the final polarization.
        if has_medium {
            for (c, i) in slab.clone().enumerate() {
                self.local_end[c] = bloch::local_field(st.e[i], self.p_pred[c]);
            }
            let step_index = st.step + 1;
            for (k, block) in st.bloch.iter_mut().enumerate() {
                let worst = block
                    .advance(&self.local_begin, &self.local_end, dt)
                    .map_err(|failure| bloch::instability(k, step_index, failure))?;
                self.max_trace_error = self.max_trace_error.max(worst);
                block.polarization(&mut st.partials[k]);
            }
            let mut work = 0.0;
            for (c, i) in slab.clone().enumerate() {
                let p_new: f64 = st.partials.iter().map(|p| p[c]).sum();
                st.e[i] -= (p_new - self.p_pred[c]) / SI.eps0;
                work += 0.5 * (self.e_old[c] + st.e[i]) * (p_new - st.p[i]);
                st.p[i] = p_new;
            }
            self.medium_work += work * g.dz;
        }

        let n = st.step;
        st.step += 1;
        st.clock = st.step as f64 * dt;

        if st.step % NAN_CHECK_INTERVAL == 0 || st.step == self.setup.steps {
            let bad = st.e.iter().chain(&st.h).any(|v| !(v.abs() < FIELD_LIMIT));
            if bad {
                return Err(Error::Diverged { step: st.step });
            }
        }

        // Samples sit at t = (n + 1/2) dt: E averaged over the step, H averaged
        // over the two neighbouring half-integer nodes.
        if n % self.setup.decimation as u64 == 0 {
            let h_at = |i: usize| 0.5 * (st.h[i - 1] + st.h[i]);
            self.probes.reflection.push(0.5 * (e_r_old + st.e[rp]), h_at(rp));
            self.probes.transmission.push(0.5 * (e_t_old + st.e[tp]), h_at(tp));
            for m in &mut self.monitors {
                m.e.push(st.e[m.cell]);
                m.p.push(st.p[m.cell]);
            }
        }
        Ok(())
    }

    /// Runs to the configured step count, calling `progress(step, total)`
    /// every `NAN_CHECK_INTERVAL` steps.
    pub fn run_with_progress(&mut self, mut progress: impl FnMut(u64, u64)) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
            if self.state.step % NAN_CHECK_INTERVAL == 0 {
                progress(self.state.step, self.setup.steps);
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with_progress(|_, _| {})
    }

    /// Consumes the simulation and returns its recordings.
    pub fn finish(self) -> RunOutput {
        RunOutput {
            field_energy: self.state.field_energy(self.setup.grid.dz),
            probe_region_energy: self.state.field_energy_between(
                self.setup.layout.reflection_probe..self.setup.layout.transmission_probe + 1,
                self.setup.grid.dz,
            ),
            probes: self.probes,
            monitors: self.monitors,
            medium_work: self.medium_work,
            max_trace_error: self.max_trace_error,
            steps: self.state.step,
        }
    }

    /// Writes the state, auxiliary line and recordings in the checkpoint
    /// layout described in [`checkpoint`].
    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        checkpoint::write(self, w)
    }

    /// Restores a checkpoint written by a simulation with the same setup.
    pub fn read_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        checkpoint::read(self, r)
    }
}

/// Runs the vacuum reference and then the setup itself.
pub fn run_with_reference(setup: &SimulationSetup) -> Result<(RunOutput, RunOutput)> {
    let run = |s: SimulationSetup| -> Result<RunOutput> {
        let mut sim = Simulation::new(s)?;
        sim.run()?;
        Ok(sim.finish())
    };
    let vacuum = run(setup.vacuum_reference())?;
    let main = run(setup.clone())?;
    Ok((main, vacuum))
}

/// Flat little-endian checkpoint format.
///
/// ```text
/// magic            8 bytes  "MBSLABCK"
/// version          u32      1
/// reserved         u32      0
/// nz               u64
/// slab cells       u64
/// species          u64
/// aux nodes        u64
/// probe samples    u64
/// monitors         u64
/// step             u64
/// clock            f64
/// medium work      f64
/// e                nz x f64
/// h                (nz - 1) x f64
/// p                nz x f64
/// partials         species x cells x f64
/// bloch            species x cells x (rho00, rho11, rho01_re, rho01_im) f64
/// aux e            aux nodes x f64
/// aux h            (aux nodes - 1) x f64
/// probes           reflection e, reflection h, transmission e, transmission h,
///                  each probe-samples x f64
/// monitor data     monitors x (e, p), each probe-samples x f64
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"MBSLABCK";
    pub const VERSION: u32 = 1;

    pub(super) fn write<W: Write>(sim: &Simulation, mut w: W) -> Result<()> {
        let st = &sim.state;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        let cells = sim.setup.grid.slab_cells.len();
        for v in [
            st.e.len(),
            cells,
            st.bloch.len(),
            sim.aux.e.len(),
            sim.probes.reflection.len(),
            sim.monitors.len(),
        ] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&st.step.to_le_bytes());
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        put(&[st.clock, sim.medium_work]);
        put(&st.e);
        put(&st.h);
        put(&st.p);
        for p in &st.partials {
            put(p);
        }
        for b in &st.bloch {
            for s in &b.states {
                put(&[s.rho00, s.rho11, s.rho01_re, s.rho01_im]);
            }
        }
        put(&sim.aux.e);
        put(&sim.aux.h);
        for rec in [&sim.probes.reflection, &sim.probes.transmission] {
            put(&rec.e);
            put(&rec.h);
        }
        for m in &sim.monitors {
            put(&m.e);
            put(&m.p);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
            let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
            let out = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(out)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
    }

    pub(super) fn read<R: Read>(sim: &mut Simulation, mut r: R) -> Result<()> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut c = Cursor { bytes: &bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        c.u32()?;
        let counts: Vec<usize> = (0..6).map(|_| c.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let cells = sim.setup.grid.slab_cells.len();
        let expected = [
            sim.state.e.len(),
            cells,
            sim.state.bloch.len(),
            sim.aux.e.len(),
            counts[4],
            sim.monitors.len(),
        ];
        if counts != expected {
            return Err(Error::Checkpoint(format!(
                "layout {counts:?} does not match this setup {expected:?}"
            )));
        }
        let samples = counts[4];
        let step = c.u64()?;
        let head = c.f64s(2)?;
        let e = c.f64s(counts[0])?;
        let h = c.f64s(counts[0] - 1)?;
        let p = c.f64s(counts[0])?;
        let partials: Vec<Vec<f64>> = (0..counts[2]).map(|_| c.f64s(cells)).collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(counts[2]);
        for _ in 0..counts[2] {
            let raw = c.f64s(cells * 4)?;
            blocks.push(
                raw.chunks_exact(4)
                    .map(|q| DensityMatrixState {
                        rho00: q[0],
                        rho11: q[1],
                        rho01_re: q[2],
                        rho01_im: q[3],
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let aux_e = c.f64s(counts[3])?;
        let aux_h = c.f64s(counts[3] - 1)?;
        let mut probe_data = Vec::with_capacity(4);
        for _ in 0..4 {
            probe_data.push(c.f64s(samples)?);
        }
        let mut monitor_data = Vec::with_capacity(2 * counts[5]);
        for _ in 0..2 * counts[5] {
            monitor_data.push(c.f64s(samples)?);
        }
        if c.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
        }

        let st = &mut sim.state;
        st.step = step;
        st.clock = head[0];
        sim.medium_work = head[1];
        st.e = e;
        st.h = h;
        st.p = p;
        st.partials = partials;
        for (b, states) in st.bloch.iter_mut().zip(blocks) {
            b.states = states;
        }
        sim.aux.e = aux_e;
        sim.aux.h = aux_h;
        let mut it = probe_data.into_iter();
        sim.probes.reflection.e = it.next().unwrap();
        sim.probes.reflection.h = it.next().unwrap();
        sim.probes.transmission.e = it.next().unwrap();
        sim.probes.transmission.h = it.next().unwrap();
        let mut it = monitor_data.into_iter();
        for m in &mut sim.monitors {
            m.e = it.next().unwrap();
            m.p = it.next().unwrap();
        }
        Ok(())
    }
}

/// Vacuum Yee lattice with periodic wrap, stepped forwards or backwards.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicLattice {
    pub e: Vec<f64>,
    /// `h[i]` sits between `e[i]` and `e[i + 1]` (wrapping).
    pub h: Vec<f64>,
    pub courant: f64,
}

impl PeriodicLattice {
    pub fn new(e: Vec<f64>, h: Vec<f64>, courant: f64) -> PeriodicLattice {
        assert_eq!(e.len(), h.len(), "periodic lattice needs as many H as E nodes");
        PeriodicLattice { e, h, courant }
    }

    // Coefficients in impedance-scaled units (H multiplied by Z0).
    fn curl_h(&mut self, sign: f64) {
        let n = self.e.len();
        for i in 0..n {
            let j = (i + 1) % n;
            self.h[i] -= sign * self.courant * (self.e[j] - self.e[i]);
        }
    }

    fn curl_e(&mut self, sign: f64) {
        let n = self.e.len();
        for i in 0..n {
            let j = (i + n - 1) % n;
            self.e[i] -= sign * self.courant * (self.h[i] - self.h[j]);
        }
    }

    pub fn step_forward(&mut self) {
        self.curl_h(1.0);
        self.curl_e(1.0);
    }

    /// Exact inverse of [`PeriodicLattice::step_forward`].
    pub fn step_backward(&mut self) {
        self.curl_e(-1.0);
        self.curl_h(-1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{omega_from_wavelength, DEFAULT_WAVELENGTH};

    fn grid(courant: f64) -> Grid1D {
        Grid1D::new(1e-9, courant, 100, 40..60).unwrap()
    }

    #[test]
    fn uniform_e_leaves_h_unchanged() {
        let e = vec![3.0; 10];
        let mut h = vec![0.25; 9];
        update_h(&e, &mut h, 0.7);
        assert!(h.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn linear_ramp_decrements_h_uniformly() {
        let g = grid(0.5);
        let a = 2.0;
        let e: Vec<f64> = (0..10).map(|i| a * i as f64).collect();
        let mut h = vec![0.0; 9];
        update_h(&e, &mut h, g.h_coefficient());
        let expected = -g.dt * a / (SI.mu0 * g.dz);
        for v in h {
            assert!((v - expected).abs() <= 1e-15 * expected.abs());
        }
    }

    #[test]
    fn uniform_h_leaves_e_unchanged() {
        let mut e = vec![1.5; 10];
        let h = vec![-4.0; 9];
        update_e(&mut e, &h, 0.3);
        assert!(e.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn magic_time_step_translates_one_cell_per_step() {
        // Impedance-scaled lattice at S = 1: a right-going pulse shifts exactly.
        let n = 64;
        let shape = |i: f64| (-((i - 20.0) / 3.0).powi(2)).exp();
        let e: Vec<f64> = (0..n).map(|i| shape(i as f64)).collect();
        // Right-going: h(i + 1/2) at t = -1/2 equals e(i + 1/2 + 1/2)
        // in these units.
        let h: Vec<f64> = (0..n).map(|i| shape(i as f64 + 1.0)).collect();
        let mut lat = PeriodicLattice::new(e.clone(), h, 1.0);
        for _ in 0..10 {
            lat.step_forward();
        }
        for i in 10..n {
            assert!((lat.e[i] - e[i - 10]).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn periodic_lattice_is_time_reversible() {
        let n = 500;
        let e: Vec<f64> = (0..n).map(|i| (-((i as f64 - 200.0) / 15.0).powi(2)).exp()).collect();
        let h: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
        let start = PeriodicLattice::new(e, h, 0.5);
        let mut lat = start.clone();
        for _ in 0..5000 {
            lat.step_forward();
        }
        for _ in 0..5000 {
            lat.step_backward();
        }
        for (a, b) in lat.e.iter().zip(&start.e).chain(lat.h.iter().zip(&start.h)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn numerical_dispersion_is_small_at_default_resolution() {
        let w = omega_from_wavelength(DEFAULT_WAVELENGTH);
        let g = Grid1D::new(DEFAULT_DZ, DEFAULT_COURANT, 10, 2..4).unwrap();
        let k = numerical_wavenumber(w, g.dz, g.dt);
        assert!((k / (w / SI.c) - 1.0).abs() < 1e-4);
        // The scheme becomes exact at S = 1.
        let g1 = Grid1D::new(DEFAULT_DZ, 1.0, 10, 2..4).unwrap();
        assert!((numerical_wavenumber(w, g1.dz, g1.dt) / (w / SI.c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mur_is_exact_at_unit_courant() {
        assert_eq!(mur_coefficient(1.0), 0.0);
        assert!((mur_coefficient(0.5) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(Grid1D::new(1e-9, 1.2, 100, 40..60).is_err());
        assert!(Grid1D::new(1e-9, 0.0, 100, 40..60).is_err());
        assert!(Grid1D::new(-1e-9, 0.5, 100, 40..60).is_err());
        assert!(Grid1D::new(1e-9, 0.5, 100, 40..100).is_err());
    }

    #[test]
    fn default_layout_is_ordered() {
        let s = EmitterSpecies::with_shift_ratio(omega_from_wavelength(DEFAULT_WAVELENGTH), 18.0).unwrap();
        let m = SlabMedium::new(400e-9, 100e-9, vec![s]).unwrap();
        let l = Layout::new(&m, 1e-9, Margins::default()).unwrap();
        assert_eq!(l.slab, 100..500);
        assert_eq!(l.reflection_probe, 20);
        assert_eq!(l.source, 40);
        assert_eq!(l.transmission_probe, 550);
        assert_eq!(l.nz, 601);
        let mut bad = m.clone();
        bad.z_start = 30e-9;
        assert!(Layout::new(&bad, 1e-9, Margins::default()).is_err());
    }

    #[test]
    fn gaussian_source_is_centered_and_normalized() {
        let src = SourceSpec::gaussian(3e15, 20e-15, 2.0, 10);
        let t0 = src.center_time();
        assert_eq!(src.field(t0), 2.0);
        // Intensity FWHM: envelope squared at +- fwhm/2 is one half.
        let env = |t: f64| (-(t - t0).powi(2) / (2.0 * src.sigma().unwrap().powi(2))).exp();
        assert!((env(t0 + 10e-15).powi(2) - 0.5).abs() < 1e-12);
        assert!(src.field(0.0).abs() < 1e-12);
    }

    #[test]
    fn cw_ramp_starts_at_zero_and_saturates() {
        let src = SourceSpec::cw(3e15, 1e-12, 1.0, 10);
        assert_eq!(src.field(0.0), 0.0);
        let t = 2e-12 + std::f64::consts::FRAC_PI_2 / 3e15;
        assert!((src.field(t) - (3e15 * t).sin()).abs() < 1e-12);
    }
}
