//! Scenario configs, presets, orchestration and outputs.
//!
//! A [`ScenarioConfig`] may give quantities relative to the first (reference)
//! species: densities as `shift_over_gamma`, transition offsets as
//! `offset_over_gamma`, the source carrier as a reduced detuning, the band
//! in reduced detuning and so on. [`ScenarioConfig::normalize`] rewrites
//! every such field into absolute SI units; the result is a fixed point of
//! `normalize` and is what gets written next to the outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdtd::{Margins, RunOutput, Simulation, SimulationSetup, SourceSpec, DEFAULT_COURANT, DEFAULT_DZ};
use crate::lorentz::{
    band_averaged_group_delay, chi_species, group_index, reflection_window, refractive_index, slab_spectra,
    transparency_frequency, transparency_frequency_numeric,
};
use crate::material::{
    density_from_shift, omega_from_detuning, omega_from_wavelength, reduced_detuning, EmitterSpecies, SlabMedium,
    ATOMIC_UNIT_DIPOLE, DEFAULT_DECAY, DEFAULT_DEPHASING, DEFAULT_THICKNESS, DEFAULT_WAVELENGTH, SI,
};
use crate::par;
use crate::spectra::{
    energy_audit, find_transparency, fit_lorentzian, group_delay, power_spectrum, transmission_reflection,
    SpectralOptions, SpectrumResult, CSV_HEADER,
};

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = ["fig2-low", "fig2-mid", "fig2-high", "fig3", "fig4", "fig5"];

pub const DEFAULT_Z_START: f64 = 100e-9;
/// Default run length in units of `1 / gamma`.
pub const DEFAULT_DURATION_OVER_GAMMA: f64 = 8.0;
/// Default analysis band in reduced detuning.
pub const DEFAULT_BAND_DELTA: [f64; 2] = [-60.0, 80.0];
/// Default spectral resolution in units of `gamma`.
pub const DEFAULT_RESOLUTION_OVER_GAMMA: f64 = 0.125;
/// Default probe pulse: 20 fs, centered at `delta = 10`, peak Rabi 1e-3 gamma.
pub const DEFAULT_PULSE_FWHM: f64 = 20e-15;
pub const DEFAULT_CARRIER_DELTA: f64 = 10.0;
pub const DEFAULT_PEAK_RABI_OVER_GAMMA: f64 = 1e-3;
/// Half-width of the extinction window used for the linewidth fit, in `gamma`.
pub const LINEWIDTH_FIT_HALF_WINDOW: f64 = 5.0;
/// Minimum prominence of an extinction maximum.
pub const PEAK_PROMINENCE: f64 = 0.01;
/// Reduced-detuning range of the high-density reflection plateau.
pub const PLATEAU_DELTA: (f64, f64) = (-10.0, 30.0);
/// Sample spacing of analytic-only spectra, in `gamma`.
pub const ANALYTIC_STEP_OVER_GAMMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Broadband weak pulse; transmission and reflection spectra.
    #[default]
    Spectrum,
    /// Spectra plus the transmitted-pulse delay.
    PulseDelay,
    /// Closed-form spectra only.
    AnalyticOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Spectrum => "spectrum",
            Mode::PulseDelay => "pulse-delay",
            Mode::AnalyticOnly => "analytic-only",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceShape {
    #[default]
    Gaussian,
    Cw,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    /// Transition angular frequency, rad/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega01: Option<f64>,
    /// Transition wavelength, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavelength: Option<f64>,
    /// Transition offset from the reference species, in its `gamma`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_over_gamma: Option<f64>,
    /// Dipole moment, C m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu01: Option<f64>,
    /// Population decay rate, 1/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    /// Pure dephasing rate, 1/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dephasing: Option<f64>,
    /// Number density, 1/m^3.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    /// Lorentz-Lorenz shift in units of this species' own `gamma`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_over_gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    /// Slab thickness, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thickness: Option<f64>,
    /// Distance of the slab front face from the left boundary, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_start: Option<f64>,
    pub species: Vec<SpeciesConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub courant: Option<f64>,
    /// Simulated time, s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_over_gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SourceShape>,
    /// Carrier angular frequency, rad/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carrier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carrier_delta: Option<f64>,
    /// Intensity FWHM of a Gaussian pulse, s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fwhm: Option<f64>,
    /// Switch-on time of a CW source, s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ramp_time: Option<f64>,
    /// Peak incident field, V/m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_e: Option<f64>,
    /// Peak Rabi frequency of the reference species, in its `gamma`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_rabi_over_gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Reported band, rad/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_delta: Option<[f64; 2]>,
    /// Frequency resolution, rad/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution_over_gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Solver steps per probe sample; derived from the band when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decimation: Option<usize>,
}

/// A scenario as read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    pub medium: MediumConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn positive(field: &'static str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn exclusive<T>(field: &'static str, a: Option<T>, b: Option<T>) -> Result<()> {
    if a.is_some() && b.is_some() {
        return Err(Error::config(field, "absolute and relative forms given together"));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig> {
        toml::from_str(text).map_err(|e| Error::config("toml", e.message().to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("toml", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        ScenarioConfig::from_toml_str(&text)
    }

    /// Resolves every relative field against the reference species and
    /// fills defaults; the result has only absolute SI fields.
    pub fn normalize(&self) -> Result<ScenarioConfig> {
        if self.medium.species.is_empty() {
            return Err(Error::config("medium.species", "at least one species is required"));
        }
        if self.medium.species.len() > 2 {
            return Err(Error::config("medium.species", "at most two species are supported"));
        }
        let mut species: Vec<EmitterSpecies> = Vec::new();
        for (k, sc) in self.medium.species.iter().enumerate() {
            exclusive("medium.species.density", sc.density, sc.shift_over_gamma)?;
            let set = [sc.omega01.is_some(), sc.wavelength.is_some(), sc.offset_over_gamma.is_some()];
            if set.iter().filter(|&&b| b).count() > 1 {
                return Err(Error::config(
                    "medium.species.omega01",
                    "give one of omega01, wavelength or offset_over_gamma",
                ));
            }
            let mut s = EmitterSpecies {
                omega01: 0.0,
                mu01: sc.mu01.unwrap_or(ATOMIC_UNIT_DIPOLE),
                decay: sc.decay.unwrap_or(DEFAULT_DECAY),
                dephasing: sc.dephasing.unwrap_or(DEFAULT_DEPHASING),
                density: sc.density.unwrap_or(0.0),
            };
            s.omega01 = match (sc.omega01, sc.wavelength, sc.offset_over_gamma) {
                (Some(w), _, _) => w,
                (_, Some(l), _) => omega_from_wavelength(positive("medium.species.wavelength", l)?),
                (_, _, Some(off)) => {
                    let reference = species
                        .first()
                        .ok_or_else(|| Error::config("medium.species.offset_over_gamma", "not allowed on the first species"))?;
                    omega_from_detuning(off, reference)?
                }
                _ => omega_from_wavelength(DEFAULT_WAVELENGTH),
            };
            if let Some(r) = sc.shift_over_gamma {
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(Error::config("medium.species.shift_over_gamma", format!("must be >= 0, got {r}")));
                }
                s.density = density_from_shift(r * s.gamma(), s.mu01)?;
            }
            s.validate().map_err(|e| Error::config("medium.species", format!("species {k}: {e}")))?;
            species.push(s);
        }
        let reference = species[0];
        let gamma = reference.gamma();
        if gamma <= 0.0 {
            return Err(Error::config("medium.species.dephasing", "reference species needs a nonzero linewidth"));
        }
        let thickness = positive("medium.thickness", self.medium.thickness.unwrap_or(DEFAULT_THICKNESS))?;
        let z_start = positive("medium.z_start", self.medium.z_start.unwrap_or(DEFAULT_Z_START))?;

        let g = &self.grid;
        exclusive("grid.duration", g.duration, g.duration_over_gamma)?;
        let duration = match (g.duration, g.duration_over_gamma) {
            (Some(d), _) => d,
            (_, Some(r)) => r / gamma,
            _ => DEFAULT_DURATION_OVER_GAMMA / gamma,
        };
        let grid = GridConfig {
            dz: Some(positive("grid.dz", g.dz.unwrap_or(DEFAULT_DZ))?),
            courant: Some(g.courant.unwrap_or(DEFAULT_COURANT)),
            duration: Some(positive("grid.duration", duration)?),
            duration_over_gamma: None,
        };
        let courant = grid.courant.unwrap();
        if !(courant > 0.0 && courant <= 1.0) {
            return Err(Error::config("grid.courant", format!("must lie in (0, 1], got {courant}")));
        }

        let src = &self.source;
        exclusive("source.carrier", src.carrier, src.carrier_delta)?;
        exclusive("source.peak_e", src.peak_e, src.peak_rabi_over_gamma)?;
        let kind = src.kind.unwrap_or_default();
        let carrier = match (src.carrier, src.carrier_delta) {
            (Some(w), _) => w,
            (_, Some(d)) => omega_from_detuning(d, &reference)?,
            _ => omega_from_detuning(DEFAULT_CARRIER_DELTA, &reference)?,
        };
        let peak_e = match (src.peak_e, src.peak_rabi_over_gamma) {
            (Some(e), _) => e,
            (_, r) => r.unwrap_or(DEFAULT_PEAK_RABI_OVER_GAMMA) * gamma * SI.hbar / reference.projected_dipole(),
        };
        let source = match kind {
            SourceShape::Gaussian => {
                if src.ramp_time.is_some() {
                    return Err(Error::config("source.ramp_time", "only valid for cw sources"));
                }
                SourceConfig {
                    kind: Some(kind),
                    carrier: Some(positive("source.carrier", carrier)?),
                    fwhm: Some(positive("source.fwhm", src.fwhm.unwrap_or(DEFAULT_PULSE_FWHM))?),
                    peak_e: Some(peak_e),
                    ..SourceConfig::default()
                }
            }
            SourceShape::Cw => {
                if src.fwhm.is_some() {
                    return Err(Error::config("source.fwhm", "only valid for gaussian sources"));
                }
                SourceConfig {
                    kind: Some(kind),
                    carrier: Some(positive("source.carrier", carrier)?),
                    ramp_time: Some(positive("source.ramp_time", src.ramp_time.unwrap_or(2.0 / gamma))?),
                    peak_e: Some(peak_e),
                    ..SourceConfig::default()
                }
            }
        };
        if !peak_e.is_finite() {
            return Err(Error::config("source.peak_e", "must be finite"));
        }

        let a = &self.analysis;
        exclusive("analysis.band", a.band, a.band_delta)?;
        exclusive("analysis.resolution", a.resolution, a.resolution_over_gamma)?;
        let band = match (a.band, a.band_delta) {
            (Some(b), _) => b,
            (_, d) => {
                let d = d.unwrap_or(DEFAULT_BAND_DELTA);
                [omega_from_detuning(d[0], &reference)?, omega_from_detuning(d[1], &reference)?]
            }
        };
        if !(band[0] > 0.0 && band[1] > band[0] && band[1].is_finite()) {
            return Err(Error::config("analysis.band", format!("need 0 < low < high, got {band:?}")));
        }
        let resolution = match (a.resolution, a.resolution_over_gamma) {
            (Some(r), _) => r,
            (_, r) => r.unwrap_or(DEFAULT_RESOLUTION_OVER_GAMMA) * gamma,
        };
        let analysis = AnalysisConfig {
            band: Some(band),
            resolution: Some(positive("analysis.resolution", resolution)?),
            ..AnalysisConfig::default()
        };
        if self.output.decimation == Some(0) {
            return Err(Error::config("output.decimation", "must be at least 1"));
        }

        let to_species_config = |s: &EmitterSpecies| SpeciesConfig {
            omega01: Some(s.omega01),
            mu01: Some(s.mu01),
            decay: Some(s.decay),
            dephasing: Some(s.dephasing),
            density: Some(s.density),
            ..SpeciesConfig::default()
        };
        Ok(ScenarioConfig {
            name: self.name.clone(),
            mode: self.mode,
            medium: MediumConfig {
                thickness: Some(thickness),
                z_start: Some(z_start),
                species: species.iter().map(to_species_config).collect(),
            },
            grid,
            source,
            analysis,
            output: self.output.clone(),
        })
    }

    /// Normalizes and converts into typed run parameters.
    pub fn resolve(&self) -> Result<Scenario> {
        let n = self.normalize()?;
        let species = n
            .medium
            .species
            .iter()
            .map(|s| EmitterSpecies {
                omega01: s.omega01.unwrap(),
                mu01: s.mu01.unwrap(),
                decay: s.decay.unwrap(),
                dephasing: s.dephasing.unwrap(),
                density: s.density.unwrap(),
            })
            .collect();
        let medium = SlabMedium::new(n.medium.thickness.unwrap(), n.medium.z_start.unwrap(), species)?;
        let src = &n.source;
        let source = match src.kind.unwrap() {
            SourceShape::Gaussian => SourceSpec::gaussian(src.carrier.unwrap(), src.fwhm.unwrap(), src.peak_e.unwrap(), 0),
            SourceShape::Cw => SourceSpec::cw(src.carrier.unwrap(), src.ramp_time.unwrap(), src.peak_e.unwrap(), 0),
        };
        let band = n.analysis.band.unwrap();
        Ok(Scenario {
            name: n.name.clone().unwrap_or_else(|| "scenario".into()),
            mode: n.mode,
            medium,
            dz: n.grid.dz.unwrap(),
            courant: n.grid.courant.unwrap(),
            duration: n.grid.duration.unwrap(),
            source,
            band: (band[0], band[1]),
            resolution: n.analysis.resolution.unwrap(),
            decimation: n.output.decimation,
            config: n,
        })
    }
}

/// Fully resolved run parameters.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub medium: SlabMedium,
    pub dz: f64,
    pub courant: f64,
    pub duration: f64,
    pub source: SourceSpec,
    pub band: (f64, f64),
    pub resolution: f64,
    pub decimation: Option<usize>,
    /// The normalized config this scenario came from.
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn setup(&self) -> Result<SimulationSetup> {
        let mut setup = SimulationSetup::new(
            &self.medium,
            self.dz,
            self.courant,
            self.duration,
            self.source,
            self.band,
            Margins::default(),
        )?;
        if let Some(d) = self.decimation {
            setup.decimation = d;
        }
        setup.validate()?;
        Ok(setup)
    }

    pub fn options(&self) -> SpectralOptions {
        SpectralOptions {
            resolution: self.resolution,
            band: self.band,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.medium.reference().gamma()
    }
}

fn species_preset(shift_over_gamma: f64) -> SpeciesConfig {
    SpeciesConfig {
        wavelength: Some(DEFAULT_WAVELENGTH),
        decay: Some(DEFAULT_DECAY),
        dephasing: Some(DEFAULT_DEPHASING),
        mu01: Some(ATOMIC_UNIT_DIPOLE),
        shift_over_gamma: Some(shift_over_gamma),
        ..SpeciesConfig::default()
    }
}

/// Built-in scenarios.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let single = |shift: f64| ScenarioConfig {
        name: Some(name.to_string()),
        medium: MediumConfig {
            thickness: Some(DEFAULT_THICKNESS),
            z_start: Some(DEFAULT_Z_START),
            species: vec![species_preset(shift)],
        },
        ..ScenarioConfig::default()
    };
    let two = || {
        let mut c = single(18.0);
        let mut second = species_preset(18.0);
        second.wavelength = None;
        second.offset_over_gamma = Some(50.0);
        c.medium.species.push(second);
        c
    };
    let cfg = match name {
        "fig2-low" => single(0.05),
        "fig2-mid" => single(2.0),
        "fig2-high" => single(18.0),
        "fig3" => ScenarioConfig {
            mode: Mode::AnalyticOnly,
            ..single(18.0)
        },
        "fig4" => two(),
        "fig5" => {
            let mut c = two();
            c.mode = Mode::PulseDelay;
            c.source = SourceConfig {
                kind: Some(SourceShape::Gaussian),
                carrier_delta: Some(35.0),
                fwhm: Some(50e-15),
                peak_rabi_over_gamma: Some(DEFAULT_PEAK_RABI_OVER_GAMMA),
                ..SourceConfig::default()
            };
            c
        }
        _ => {
            return Err(Error::UnknownPreset {
                name: name.to_string(),
                valid: PRESETS.join(", "),
            })
        }
    };
    Ok(cfg)
}

/// Ordered `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary(pub Vec<(String, String)>);

impl Summary {
    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn num(&mut self, key: &str, value: f64) {
        self.push(key, format!("{value:.8e}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Observables extracted from one spectrum; every frequency is a reduced
/// detuning.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observables {
    /// Lorentzian fit of the extinction near the reference line.
    pub linewidth: Option<LinewidthFit>,
    /// Local maxima of the extinction.
    pub extinction_maxima: Vec<f64>,
    pub max_reflection: f64,
    /// `R = 0.5` crossings around the reflection maximum.
    pub reflection_window: Option<(f64, f64)>,
    /// Largest `T` and smallest `R` across [`PLATEAU_DELTA`].
    pub plateau: Option<(f64, f64)>,
    pub transparency: Option<TransparencyObservation>,
    /// Largest `T + R - 1` on the band mask.
    pub max_excess: f64,
    /// Smallest extinction on the band mask.
    pub min_extinction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinewidthFit {
    pub center: f64,
    pub half_width: f64,
    pub relative_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransparencyObservation {
    pub delta: f64,
    pub fwhm: f64,
    pub peak: f64,
    /// Local minimum of `R` closest to the transmission peak.
    pub reflection_minimum: Option<f64>,
}

/// Reduced-detuning positions of local maxima whose height exceeds both
/// flanking minima by at least `prominence`.
pub fn local_maxima(delta: &[f64], y: &[f64], prominence: f64) -> Vec<f64> {
    let n = y.len();
    let mut out = Vec::new();
    for k in 1..n.saturating_sub(1) {
        if !(y[k] > y[k - 1] && y[k] >= y[k + 1]) {
            continue;
        }
        // Walk down each side until a higher point or the end.
        let mut left_min = y[k];
        for j in (0..k).rev() {
            if y[j] > y[k] {
                break;
            }
            left_min = left_min.min(y[j]);
        }
        let mut right_min = y[k];
        for &v in &y[k + 1..] {
            if v > y[k] {
                break;
            }
            right_min = right_min.min(v);
        }
        if y[k] - left_min.max(right_min) >= prominence {
            out.push(delta[k]);
        }
    }
    out
}

/// Position of the smallest value within `radius` of `center`, refined by a
/// parabola through its neighbours; `None` when it sits on the window edge.
pub fn local_minimum_near(delta: &[f64], y: &[f64], center: f64, radius: f64) -> Option<f64> {
    let idx: Vec<usize> = (0..delta.len()).filter(|&k| (delta[k] - center).abs() <= radius).collect();
    let (&first, &last) = (idx.first()?, idx.last()?);
    let k = *idx.iter().min_by(|&&a, &&b| y[a].total_cmp(&y[b]))?;
    if k == first || k == last {
        return None;
    }
    let (y0, y1, y2) = (y[k - 1], y[k], y[k + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom > 0.0 { (0.5 * (y0 - y2) / denom).clamp(-1.0, 1.0) } else { 0.0 };
    Some(delta[k] + shift * 0.5 * (delta[k + 1] - delta[k - 1]))
}

/// Crossings of `level` on both sides of the maximum of `y`.
pub fn level_window(delta: &[f64], y: &[f64], level: f64) -> Option<(f64, f64)> {
    let k = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b]))?;
    if y[k] < level {
        return None;
    }
    let cross = |a: usize, b: usize| delta[a] + (level - y[a]) / (y[b] - y[a]) * (delta[b] - delta[a]);
    let lo = (1..=k).rev().find(|&j| y[j - 1] < level).map(|j| cross(j - 1, j))?;
    let hi = (k..y.len() - 1).find(|&j| y[j + 1] < level).map(|j| cross(j, j + 1))?;
    Some((lo, hi))
}

/// Extracts every observable the summary reports.
pub fn observe(spectrum: &SpectrumResult, medium: &SlabMedium) -> Observables {
    let idx: Vec<usize> = spectrum.masked().collect();
    let pick = |col: &[f64]| idx.iter().map(|&i| col[i]).collect::<Vec<f64>>();
    let delta = pick(&spectrum.delta);
    let t = pick(&spectrum.transmission);
    let r = pick(&spectrum.reflection);
    let ext = pick(&spectrum.extinction);

    let fit_idx: Vec<usize> = (0..delta.len())
        .filter(|&k| delta[k].abs() <= LINEWIDTH_FIT_HALF_WINDOW)
        .collect();
    let linewidth = if medium.species.len() == 1 {
        let x: Vec<f64> = fit_idx.iter().map(|&k| delta[k]).collect();
        let y: Vec<f64> = fit_idx.iter().map(|&k| ext[k]).collect();
        fit_lorentzian(&x, &y).ok().map(|f| LinewidthFit {
            center: f.center,
            half_width: f.half_width,
            relative_residual: f.relative_residual,
        })
    } else {
        None
    };

    let transparency = if medium.species.len() == 2 {
        let (w1, w2) = (medium.species[0].omega01, medium.species[1].omega01);
        find_transparency(spectrum, w1.min(w2), w1.max(w2)).ok().map(|tr| TransparencyObservation {
            delta: tr.delta,
            fwhm: tr.fwhm / medium.reference().gamma(),
            peak: tr.peak,
            reflection_minimum: local_minimum_near(&delta, &r, tr.delta, 5.0),
        })
    } else {
        None
    };

    let plateau_idx: Vec<usize> = (0..delta.len())
        .filter(|&k| delta[k] >= PLATEAU_DELTA.0 && delta[k] <= PLATEAU_DELTA.1)
        .collect();
    let covers = !delta.is_empty() && delta[0] <= PLATEAU_DELTA.0 && delta[delta.len() - 1] >= PLATEAU_DELTA.1;
    let plateau = (covers && !plateau_idx.is_empty()).then(|| {
        plateau_idx.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(tm, rm), &k| (tm.max(t[k]), rm.min(r[k])))
    });

    Observables {
        linewidth,
        plateau,
        extinction_maxima: local_maxima(&delta, &ext, PEAK_PROMINENCE),
        max_reflection: r.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        reflection_window: level_window(&delta, &r, 0.5),
        transparency,
        max_excess: t.iter().zip(&r).map(|(a, b)| a + b - 1.0).fold(f64::NEG_INFINITY, f64::max),
        min_extinction: ext.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// Spectral power of the incident, transmitted and reflected pulses.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSpectra {
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub incident: Vec<f64>,
    pub transmitted: Vec<f64>,
    pub reflected: Vec<f64>,
}

pub const PULSE_CSV_HEADER: &str = "delta,omega,incident,transmitted,reflected";

impl PulseSpectra {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PULSE_CSV_HEADER}")?;
        for i in 0..self.omega.len() {
            writeln!(
                w,
                "{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
                self.delta[i], self.omega[i], self.incident[i], self.transmitted[i], self.reflected[i]
            )?;
        }
        Ok(())
    }
}

/// Analytic delay figures for a pulsed run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelayPrediction {
    /// `(n_g - 1) l / c` with `n_g` averaged over the transmitted spectrum.
    pub from_group_index: f64,
    /// Transmitted-power-weighted phase delay of the slab.
    pub from_slab_phase: f64,
    /// Group index at the carrier.
    pub group_index_at_carrier: f64,
}

/// Everything a scenario run produced.
#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    /// Closed-form spectrum (on the FDTD axis when there is one).
    pub analytic: SpectrumResult,
    pub fdtd: Option<SpectrumResult>,
    pub pulse: Option<PulseSpectra>,
    pub group_delay: Option<f64>,
    pub predicted_delay: Option<DelayPrediction>,
    pub max_trace_error: Option<f64>,
    pub steps: Option<u64>,
    pub observables: Observables,
    pub analytic_observables: Observables,
    pub summary: Summary,
}

impl ScenarioOutcome {
    /// The spectrum the observables refer to.
    pub fn primary(&self) -> &SpectrumResult {
        self.fdtd.as_ref().unwrap_or(&self.analytic)
    }
}

/// Progress callback: `(run label, step, total steps)`.
pub type Progress<'a> = &'a (dyn Fn(&str, u64, u64) + Sync);

/// Runs the vacuum reference, then the main simulation, on this thread;
/// the engine parallelizes internally.
pub fn run_pair(setup: &SimulationSetup, progress: Progress) -> Result<(RunOutput, RunOutput)> {
    let run = |label: &str, s: SimulationSetup| -> Result<RunOutput> {
        let mut sim = Simulation::new(s)?;
        sim.run_with_progress(|k, n| progress(label, k, n))?;
        Ok(sim.finish())
    };
    let vacuum = run("vacuum", setup.vacuum_reference())?;
    let main = run("main", setup.clone())?;
    Ok((main, vacuum))
}

/// Analytic spectrum on an evenly spaced axis across the band.
pub fn analytic_spectrum(scenario: &Scenario) -> Result<SpectrumResult> {
    let step = ANALYTIC_STEP_OVER_GAMMA * scenario.gamma();
    let n = ((scenario.band.1 - scenario.band.0) / step).floor() as usize + 1;
    let omegas: Vec<f64> = (0..n).map(|k| scenario.band.0 + k as f64 * step).collect();
    slab_spectra(&omegas, &scenario.medium)
}

/// Runs a scenario end to end (no files written).
pub fn execute(scenario: &Scenario, progress: Progress) -> Result<ScenarioOutcome> {
    execute_with_vacuum(scenario, None, progress)
}

/// Runs the vacuum reference of a setup on its own.
pub fn run_vacuum(setup: &SimulationSetup, progress: Progress) -> Result<RunOutput> {
    let mut sim = Simulation::new(setup.vacuum_reference())?;
    sim.run_with_progress(|k, n| progress("vacuum", k, n))?;
    Ok(sim.finish())
}

/// Like [`execute`], reusing a previously computed vacuum reference when
/// one is given. The reference must come from [`run_vacuum`] on the same
/// setup.
pub fn execute_with_vacuum(
    scenario: &Scenario,
    vacuum: Option<&RunOutput>,
    progress: Progress,
) -> Result<ScenarioOutcome> {
    let mut outcome = match scenario.mode {
        Mode::AnalyticOnly => {
            let analytic = analytic_spectrum(scenario)?;
            ScenarioOutcome {
                observables: observe(&analytic, &scenario.medium),
                analytic_observables: observe(&analytic, &scenario.medium),
                scenario: scenario.clone(),
                analytic,
                fdtd: None,
                pulse: None,
                group_delay: None,
                predicted_delay: None,
                max_trace_error: None,
                steps: None,
                summary: Summary::default(),
            }
        }
        Mode::Spectrum | Mode::PulseDelay => {
            let setup = scenario.setup()?;
            let (main, vacuum) = match vacuum {
                Some(v) => {
                    let mut sim = Simulation::new(setup.clone())?;
                    sim.run_with_progress(|k, n| progress("main", k, n))?;
                    (sim.finish(), v.clone())
                }
                None => run_pair(&setup, progress)?,
            };
            let opts = scenario.options();
            let fdtd = transmission_reflection(&main.probes, &vacuum.probes, scenario.medium.reference(), &opts)?;
            let mut analytic = slab_spectra(&fdtd.omega, &scenario.medium)?;
            analytic.band_mask = fdtd.band_mask.clone();
            let (pulse, delay, predicted) = if scenario.mode == Mode::PulseDelay {
                let incident = power_spectrum(&vacuum.probes.transmission, opts.resolution, opts.band)?.flux();
                let transmitted = power_spectrum(&main.probes.transmission, opts.resolution, opts.band)?.flux();
                let scattered = main.probes.reflection.difference(&vacuum.probes.reflection)?;
                let reflected: Vec<f64> = power_spectrum(&scattered, opts.resolution, opts.band)?
                    .flux()
                    .into_iter()
                    .map(|v| -v)
                    .collect();
                let delay = group_delay(&main.probes.transmission, &vacuum.probes.transmission)?;
                let predicted = predict_delay(scenario, &fdtd, &incident)?;
                let pulse = PulseSpectra {
                    omega: fdtd.omega.clone(),
                    delta: fdtd.delta.clone(),
                    incident,
                    transmitted,
                    reflected,
                };
                (Some(pulse), Some(delay), Some(predicted))
            } else {
                (None, None, None)
            };
            ScenarioOutcome {
                observables: observe(&fdtd, &scenario.medium),
                analytic_observables: observe(&analytic, &scenario.medium),
                scenario: scenario.clone(),
                analytic,
                fdtd: Some(fdtd),
                pulse,
                group_delay: delay,
                predicted_delay: predicted,
                max_trace_error: Some(main.max_trace_error),
                steps: Some(main.steps),
                summary: Summary::default(),
            }
        }
    };
    outcome.summary = summarize(&outcome)?;
    Ok(outcome)
}

fn predict_delay(scenario: &Scenario, spectrum: &SpectrumResult, incident: &[f64]) -> Result<DelayPrediction> {
    let m = &scenario.medium;
    let idx: Vec<usize> = spectrum.masked().collect();
    let omegas: Vec<f64> = idx.iter().map(|&i| spectrum.omega[i]).collect();
    let power: Vec<f64> = idx.iter().map(|&i| incident[i]).collect();
    let rows = par::map(&omegas, |&w| {
        let t = crate::lorentz::slab_amplitudes(w, m).0.norm_sqr();
        (t, group_index(w, m).ok())
    });
    let (mut num, mut den) = (0.0, 0.0);
    for (p, (t, ng)) in power.iter().zip(&rows) {
        if let Some(ng) = ng {
            num += p * t * ng;
            den += p * t;
        }
    }
    let ng_avg = if den > 0.0 { num / den } else { f64::NAN };
    Ok(DelayPrediction {
        from_group_index: (ng_avg - 1.0) * m.thickness / SI.c,
        from_slab_phase: band_averaged_group_delay(&omegas, &power, m),
        group_index_at_carrier: group_index(scenario.source.carrier, m)?,
    })
}

fn push_observables(s: &mut Summary, prefix: &str, o: &Observables) {
    let key = |k: &str| format!("{prefix}{k}");
    if let Some(f) = o.linewidth {
        s.num(&key("linewidth_half_width_over_gamma"), f.half_width);
        s.num(&key("linewidth_center_delta"), f.center);
        s.num(&key("linewidth_fit_residual"), f.relative_residual);
    }
    let maxima: Vec<String> = o.extinction_maxima.iter().map(|d| format!("{d:.4}")).collect();
    s.push(&key("extinction_maxima_delta"), maxima.join(";"));
    s.num(&key("max_reflection"), o.max_reflection);
    if let Some((lo, hi)) = o.reflection_window {
        s.num(&key("reflection_window_low_delta"), lo);
        s.num(&key("reflection_window_high_delta"), hi);
        s.num(&key("reflection_window_width_over_gamma"), hi - lo);
    }
    if let Some((tmax, rmin)) = o.plateau {
        s.num(&key("plateau_max_transmission"), tmax);
        s.num(&key("plateau_min_reflection"), rmin);
    }
    if let Some(t) = o.transparency {
        s.num(&key("transparency_delta"), t.delta);
        s.num(&key("transparency_fwhm_over_gamma"), t.fwhm);
        s.num(&key("transparency_peak"), t.peak);
        if let Some(r) = t.reflection_minimum {
            s.num(&key("reflection_minimum_delta"), r);
        }
    }
    s.num(&key("max_t_plus_r_minus_one"), o.max_excess);
    s.num(&key("min_extinction"), o.min_extinction);
}

/// Builds the `key=value` summary of an outcome.
pub fn summarize(o: &ScenarioOutcome) -> Result<Summary> {
    let sc = &o.scenario;
    let m = &sc.medium;
    let r = m.reference();
    let gamma = r.gamma();
    let mut s = Summary::default();
    s.push("scenario", &sc.name);
    s.push("mode", sc.mode.as_str());
    s.push("source", o.primary().origin.as_str());
    s.num("gamma", gamma);
    s.num("lorentz_shift_over_gamma", r.lorentz_shift() / gamma);
    if let Some(steps) = o.steps {
        s.push("steps", steps);
    }
    if let Some(e) = o.max_trace_error {
        s.num("max_trace_error", e);
    }
    push_observables(&mut s, "", &o.observables);
    if o.fdtd.is_some() {
        push_observables(&mut s, "analytic_", &o.analytic_observables);
        let (dt, dr) = max_differences(o.fdtd.as_ref().unwrap(), &o.analytic);
        s.num("max_abs_dt_vs_analytic", dt);
        s.num("max_abs_dr_vs_analytic", dr);
    }
    // Closed-form landmarks.
    if m.species.len() == 1 {
        if let Ok((lo, hi)) = reflection_window(r) {
            s.num("window_edge_low_delta", reduced_detuning(lo, r)?);
            s.num("window_edge_high_delta", reduced_detuning(hi, r)?);
            s.num("window_width_over_3shift", (hi - lo) / (3.0 * r.lorentz_shift()));
        }
        if let Some((lo, hi)) = o.observables.reflection_window {
            s.num("measured_window_width_over_3shift", (hi - lo) * gamma / (3.0 * r.lorentz_shift()));
        }
    }
    if m.species.len() == 2 {
        let (a, b) = (&m.species[0], &m.species[1]);
        s.num("predicted_transparency_delta", reduced_detuning(transparency_frequency(a, b), r)?);
        s.num(
            "chi_minimum_delta",
            reduced_detuning(transparency_frequency_numeric(a, b)?, r)?,
        );
    }
    if let Some(d) = o.group_delay {
        s.num("group_delay", d);
    }
    if let Some(p) = o.predicted_delay {
        s.num("predicted_delay_group_index", p.from_group_index);
        s.num("predicted_delay_slab_phase", p.from_slab_phase);
        s.num("group_index_at_carrier", p.group_index_at_carrier);
    }
    if let Some(p) = &o.pulse {
        let spec = o.primary();
        let audit = energy_audit(spec, &p.incident);
        s.num("energy_extinction", audit.extinction());
    }
    Ok(s)
}

/// Largest `|T_a - T_b|` and `|R_a - R_b|` over the mask of `a`.
pub fn max_differences(a: &SpectrumResult, b: &SpectrumResult) -> (f64, f64) {
    a.masked().fold((0.0f64, 0.0f64), |(dt, dr), i| {
        (
            dt.max((a.transmission[i] - b.transmission[i]).abs()),
            dr.max((a.reflection[i] - b.reflection[i]).abs()),
        )
    })
}

/// Flattens the normalized config into `section.key=value` pairs.
fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, v, out);
            }
        }
        toml::Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        toml::Value::Float(x) => {
            let text = if *x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e6) { format!("{x:e}") } else { x.to_string() };
            out.insert(prefix.to_string(), text);
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Metadata sidecar: origin, grid, and the normalized config.
pub fn metadata(o: &ScenarioOutcome) -> Result<String> {
    let sc = &o.scenario;
    let mut lines = vec![
        format!("format_version=1"),
        format!("generator=mbslab {}", env!("CARGO_PKG_VERSION")),
        format!("source={}", o.primary().origin.as_str()),
        format!("csv_header={CSV_HEADER}"),
        format!("reference_omega01={:.17e}", sc.medium.reference().omega01),
        format!("reference_gamma={:.17e}", sc.gamma()),
    ];
    if sc.mode != Mode::AnalyticOnly {
        let setup = sc.setup()?;
        lines.push(format!("grid.nz={}", setup.grid.nz));
        lines.push(format!("grid.dt={:.17e}", setup.grid.dt));
        lines.push(format!("grid.steps={}", setup.steps));
        lines.push(format!("grid.slab_cells={}..{}", setup.layout.slab.start, setup.layout.slab.end));
        lines.push(format!("grid.source_cell={}", setup.layout.source));
        lines.push(format!("grid.reflection_probe={}", setup.layout.reflection_probe));
        lines.push(format!("grid.transmission_probe={}", setup.layout.transmission_probe));
        lines.push(format!("grid.decimation={}", setup.decimation));
    }
    let value = toml::Value::try_from(&sc.config).map_err(|e| Error::config("toml", e.to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("config", &value, &mut flat);
    lines.extend(flat.into_iter().map(|(k, v)| format!("{k}={v}")));
    Ok(lines.join("\n") + "\n")
}

/// Susceptibility and index table for the closed-form model.
pub fn write_susceptibility_csv<W: std::io::Write>(scenario: &Scenario, omegas: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "delta,omega,chi_re,chi_im,n_re,n_im")?;
    let r = scenario.medium.reference();
    for &om in omegas {
        let chi = chi_species(om, &scenario.medium.species);
        let n = refractive_index(chi);
        writeln!(
            w,
            "{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            reduced_detuning(om, r)?,
            om,
            chi.re,
            chi.im,
            n.re,
            n.im
        )?;
    }
    Ok(())
}

/// Files written into an output directory.
pub const SPECTRUM_FILE: &str = "spectrum.csv";
pub const ANALYTIC_FILE: &str = "analytic.csv";
pub const METADATA_FILE: &str = "metadata.txt";
pub const CONFIG_FILE: &str = "scenario.toml";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SUSCEPTIBILITY_FILE: &str = "susceptibility.csv";
pub const PULSE_FILE: &str = "pulse_spectrum.csv";

/// Writes CSVs, metadata, normalized config and summary into `dir`.
pub fn write_outputs(o: &ScenarioOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let csv = |s: &SpectrumResult| -> Result<Vec<u8>> {
        let mut b = Vec::new();
        s.write_csv(&mut b)?;
        Ok(b)
    };
    put(SPECTRUM_FILE, csv(o.primary())?)?;
    if o.fdtd.is_some() {
        put(ANALYTIC_FILE, csv(&o.analytic)?)?;
    }
    if o.scenario.mode == Mode::AnalyticOnly {
        let mut b = Vec::new();
        write_susceptibility_csv(&o.scenario, &o.analytic.omega, &mut b)?;
        put(SUSCEPTIBILITY_FILE, b)?;
    }
    if let Some(p) = &o.pulse {
        let mut b = Vec::new();
        p.write_csv(&mut b)?;
        put(PULSE_FILE, b)?;
    }
    put(METADATA_FILE, metadata(o)?.into_bytes())?;
    put(CONFIG_FILE, o.scenario.config.to_toml_string()?.into_bytes())?;
    put(SUMMARY_FILE, o.summary.to_string().into_bytes())?;
    Ok(written)
}

/// Silent progress callback.
pub fn no_progress(_: &str, _: u64, _: u64) {}

/// Convenience: resolve, execute and return the outcome of a preset.
pub fn run_preset(name: &str) -> Result<ScenarioOutcome> {
    execute(&preset(name)?.resolve()?, &no_progress)
}
