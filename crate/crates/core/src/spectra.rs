//! From probe time series to transmission/reflection spectra.
//!
//! Spectra are Poynting-flux ratios: `T = S_t / S_inc` and
//! `R = -S_r / S_inc`, where `S(w) = Re[E(w) H*(w)] / 2` and the incident
//! flux comes from a vacuum reference run with identical grid and source.

use std::io::{BufRead, Write};

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Matrix4, OMatrix, OVector, Owned, Vector4, U4};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::material::{reduced_detuning, EmitterSpecies};

/// Fraction of samples at the end of a recording that must be quiet.
pub const TAIL_FRACTION: f64 = 0.05;
/// Energy the quiet tail may still carry, relative to the whole recording.
pub const TAIL_ENERGY_LIMIT: f64 = 1e-6;
/// Incident spectral flux threshold of the band mask, relative to its peak.
pub const BAND_MASK_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumOrigin {
    Fdtd,
    Analytic,
}

impl SpectrumOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpectrumOrigin::Fdtd => "fdtd",
            SpectrumOrigin::Analytic => "analytic",
        }
    }
}

/// Transmission, reflection and extinction on a frequency axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumResult {
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub transmission: Vec<f64>,
    pub reflection: Vec<f64>,
    /// `1 - T - R`.
    pub extinction: Vec<f64>,
    pub band_mask: Vec<bool>,
    pub origin: SpectrumOrigin,
}

pub const CSV_HEADER: &str = "delta,omega,T,R,extinction";

impl SpectrumResult {
    pub fn new(
        omega: Vec<f64>,
        delta: Vec<f64>,
        transmission: Vec<f64>,
        reflection: Vec<f64>,
        band_mask: Vec<bool>,
        origin: SpectrumOrigin,
    ) -> SpectrumResult {
        let extinction = transmission.iter().zip(&reflection).map(|(t, r)| 1.0 - t - r).collect();
        SpectrumResult {
            omega,
            delta,
            transmission,
            reflection,
            extinction,
            band_mask,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Indices that pass the band mask.
    pub fn masked(&self) -> impl Iterator<Item = usize> + '_ {
        self.band_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    /// Clears the mask outside `[lo, hi]` in reduced detuning.
    pub fn restrict_delta(mut self, lo: f64, hi: f64) -> SpectrumResult {
        for (m, d) in self.band_mask.iter_mut().zip(&self.delta) {
            *m &= *d >= lo && *d <= hi;
        }
        self
    }

    /// Masked samples of one column as `(delta, value)` pairs.
    pub fn masked_series<'a>(&'a self, column: &'a [f64]) -> impl Iterator<Item = (f64, f64)> + 'a {
        self.masked().map(move |i| (self.delta[i], column[i]))
    }

    /// Linear interpolation of a column at reduced detuning `d`.
    pub fn interpolate(&self, column: &[f64], d: f64) -> Option<f64> {
        let k = self.delta.partition_point(|&x| x < d);
        if k == 0 || k >= self.delta.len() {
            return None;
        }
        let (x0, x1) = (self.delta[k - 1], self.delta[k]);
        let u = (d - x0) / (x1 - x0);
        Some(column[k - 1] + u * (column[k] - column[k - 1]))
    }

    /// CSV with header `delta,omega,T,R,extinction`, one row per masked
    /// frequency, nine significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for i in self.masked() {
            writeln!(
                w,
                "{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
                self.delta[i], self.omega[i], self.transmission[i], self.reflection[i], self.extinction[i]
            )?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`SpectrumResult::write_csv`].
    pub fn read_csv<R: BufRead>(r: R, origin: SpectrumOrigin) -> Result<SpectrumResult> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != CSV_HEADER {
            return Err(Error::config("csv", format!("unexpected header `{header}`")));
        }
        let (mut d, mut w, mut t, mut rr) = (vec![], vec![], vec![], vec![]);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::config("csv", format!("row {}: {e}", k + 2)))?;
            if vals.len() != 5 {
                return Err(Error::config("csv", format!("row {} has {} columns", k + 2, vals.len())));
            }
            d.push(vals[0]);
            w.push(vals[1]);
            t.push(vals[2]);
            rr.push(vals[3]);
        }
        let n = d.len();
        Ok(SpectrumResult::new(w, d, t, rr, vec![true; n], origin))
    }
}

/// Field samples at one grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecording {
    /// Grid node index.
    pub cell: usize,
    /// `E_x` samples, V/m.
    pub e: Vec<f64>,
    /// `H_y` samples interpolated to the node, A/m.
    pub h: Vec<f64>,
    /// Sampling interval, s.
    pub dt_sample: f64,
    /// Solver steps per sample.
    pub decimation: usize,
    /// Time of the first sample, s.
    pub t0: f64,
}

impl ProbeRecording {
    pub fn new(cell: usize, dt_sample: f64, decimation: usize, t0: f64) -> ProbeRecording {
        ProbeRecording {
            cell,
            e: Vec::new(),
            h: Vec::new(),
            dt_sample,
            decimation,
            t0,
        }
    }

    pub fn push(&mut self, e: f64, h: f64) {
        self.e.push(e);
        self.h.push(h);
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt_sample
    }

    /// Instantaneous Poynting flux `E H`, W/m^2.
    pub fn flux(&self) -> impl Iterator<Item = f64> + '_ {
        self.e.iter().zip(&self.h).map(|(e, h)| e * h)
    }

    /// Time-integrated flux, J/m^2.
    pub fn fluence(&self) -> f64 {
        self.flux().sum::<f64>() * self.dt_sample
    }

    /// Samples-per-period requirement: `dt_sample <= pi / (4 omega_max)`.
    pub fn check_sampling(&self, omega_max: f64) -> Result<()> {
        let limit = std::f64::consts::PI / omega_max / 4.0;
        if self.dt_sample > limit {
            return Err(Error::Grid(format!(
                "probe sampling {:.3e} s exceeds {limit:.3e} s for the analysis band",
                self.dt_sample
            )));
        }
        Ok(())
    }

    /// Sample-wise difference of two recordings on the same clock.
    pub fn difference(&self, other: &ProbeRecording) -> Result<ProbeRecording> {
        check_compatible(self, other)?;
        let mut out = self.clone();
        out.e.iter_mut().zip(&other.e).for_each(|(a, b)| *a -= b);
        out.h.iter_mut().zip(&other.h).for_each(|(a, b)| *a -= b);
        Ok(out)
    }
}

fn check_compatible(a: &ProbeRecording, b: &ProbeRecording) -> Result<()> {
    if a.len() != b.len() || a.dt_sample != b.dt_sample || a.t0 != b.t0 || a.cell != b.cell {
        return Err(Error::IncompatibleRuns(format!(
            "probe at cell {} ({} samples, dt {:.3e}) vs cell {} ({} samples, dt {:.3e})",
            a.cell,
            a.len(),
            a.dt_sample,
            b.cell,
            b.len(),
            b.dt_sample
        )));
    }
    Ok(())
}

/// Reflection-side and transmission-side probes of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair {
    /// Scattered-field probe left of the source plane.
    pub reflection: ProbeRecording,
    /// Probe right of the slab.
    pub transmission: ProbeRecording,
}

/// Fourier transforms of a probe's `E` and `H` on a frequency axis.
#[derive(Clone, Debug)]
pub struct FieldSpectrum {
    pub omega: Vec<f64>,
    pub e: Vec<Complex64>,
    pub h: Vec<Complex64>,
}

impl FieldSpectrum {
    /// Spectral Poynting flux `Re[E H*] / 2`.
    pub fn flux(&self) -> Vec<f64> {
        self.e.iter().zip(&self.h).map(|(e, h)| 0.5 * (e * h.conj()).re).collect()
    }
}

/// Fails unless the trailing 5% of the recording carries less than 1e-6 of
/// its energy.
pub fn check_decayed(rec: &ProbeRecording) -> Result<()> {
    let z0 = crate::material::SI.impedance();
    let energy = |k: usize| rec.e[k] * rec.e[k] + z0 * z0 * rec.h[k] * rec.h[k];
    let n = rec.len();
    let total: f64 = (0..n).map(energy).sum();
    if total == 0.0 {
        return Ok(());
    }
    let start = n - ((n as f64 * TAIL_FRACTION).ceil() as usize).min(n);
    let tail: f64 = (start..n).map(energy).sum();
    let fraction = tail / total;
    if fraction >= TAIL_ENERGY_LIMIT {
        return Err(Error::Truncated { tail_fraction: fraction });
    }
    Ok(())
}

/// Zero-padded length for a recording of `n` samples: at least `4 n` and
/// fine enough for the requested angular-frequency `resolution`.
pub fn padded_length(n: usize, dt_sample: f64, resolution: f64) -> usize {
    let for_resolution = (2.0 * std::f64::consts::PI / (resolution * dt_sample)).ceil() as usize;
    (4 * n).max(for_resolution).next_power_of_two()
}

/// Continuous-time Fourier transform `X(w) = sum x(t) exp(i w t) dt` of a
/// probe's fields, evaluated on the padded FFT bins inside `band`.
pub fn power_spectrum(rec: &ProbeRecording, resolution: f64, band: (f64, f64)) -> Result<FieldSpectrum> {
    check_decayed(rec)?;
    let n_pad = padded_length(rec.len(), rec.dt_sample, resolution);
    let d_omega = 2.0 * std::f64::consts::PI / (n_pad as f64 * rec.dt_sample);
    let k_lo = (band.0 / d_omega).ceil().max(0.0) as usize;
    let k_hi = ((band.1 / d_omega).floor() as usize).min(n_pad / 2);
    let mut planner = FftPlanner::<f64>::new();
    // Inverse transform has the exp(+i w t) kernel.
    let fft = planner.plan_fft_inverse(n_pad);
    let transform = |x: &[f64]| -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(n_pad, Complex64::new(0.0, 0.0));
        fft.process(&mut buf);
        (k_lo..=k_hi)
            .map(|k| {
                let w = k as f64 * d_omega;
                buf[k] * rec.dt_sample * Complex64::from_polar(1.0, w * rec.t0)
            })
            .collect()
    };
    if k_lo > k_hi {
        return Ok(FieldSpectrum {
            omega: vec![],
            e: vec![],
            h: vec![],
        });
    }
    Ok(FieldSpectrum {
        omega: (k_lo..=k_hi).map(|k| k as f64 * d_omega).collect(),
        e: transform(&rec.e),
        h: transform(&rec.h),
    })
}

/// Analysis settings shared by both runs of a spectrum measurement.
#[derive(Clone, Copy, Debug)]
pub struct SpectralOptions {
    /// Required angular-frequency resolution, rad/s.
    pub resolution: f64,
    /// Angular-frequency band to report, rad/s.
    pub band: (f64, f64),
}

/// Normalized spectra of a main run against its vacuum reference.
pub fn transmission_reflection(
    main: &ProbePair,
    vacuum: &ProbePair,
    reference: &EmitterSpecies,
    opts: &SpectralOptions,
) -> Result<SpectrumResult> {
    check_compatible(&main.transmission, &vacuum.transmission)?;
    let incident = power_spectrum(&vacuum.transmission, opts.resolution, opts.band)?;
    let transmitted = power_spectrum(&main.transmission, opts.resolution, opts.band)?;
    let scattered = main.reflection.difference(&vacuum.reflection)?;
    let reflected = power_spectrum(&scattered, opts.resolution, opts.band)?;

    let s_inc = incident.flux();
    let s_t = transmitted.flux();
    let s_r = reflected.flux();
    let peak = s_inc.iter().cloned().fold(0.0, f64::max);
    let mask: Vec<bool> = s_inc.iter().map(|&s| peak > 0.0 && s >= BAND_MASK_THRESHOLD * peak).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::SourceBandMismatch);
    }
    let t: Vec<f64> = s_t.iter().zip(&s_inc).map(|(a, b)| a / b).collect();
    let r: Vec<f64> = s_r.iter().zip(&s_inc).map(|(a, b)| -a / b).collect();
    let delta = incident
        .omega
        .iter()
        .map(|&w| reduced_detuning(w, reference))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectrumResult::new(incident.omega, delta, t, r, mask, SpectrumOrigin::Fdtd))
}

/// Band-integrated energy bookkeeping of a pulsed run.
#[derive(Clone, Copy, Debug)]
pub struct EnergyAudit {
    pub incident: f64,
    pub transmitted: f64,
    pub reflected: f64,
}

impl EnergyAudit {
    /// Fraction of the incident energy neither transmitted nor reflected.
    pub fn extinction(&self) -> f64 {
        1.0 - (self.transmitted + self.reflected) / self.incident
    }
}

/// Flux-weighted integrals of `T` and `R` over the band mask.
pub fn energy_audit(spectrum: &SpectrumResult, incident_flux: &[f64]) -> EnergyAudit {
    let mut a = EnergyAudit {
        incident: 0.0,
        transmitted: 0.0,
        reflected: 0.0,
    };
    for i in spectrum.masked() {
        a.incident += incident_flux[i];
        a.transmitted += incident_flux[i] * spectrum.transmission[i];
        a.reflected += incident_flux[i] * spectrum.reflection[i];
    }
    a
}

/// Result of [`fit_lorentzian`]: `a w^2 / ((x - x0)^2 + w^2) + b`.
#[derive(Clone, Copy, Debug)]
pub struct LorentzianFit {
    pub center: f64,
    pub half_width: f64,
    pub amplitude: f64,
    pub baseline: f64,
    /// Parameter covariance in the order (amplitude, center, half-width, baseline).
    pub covariance: Matrix4<f64>,
    /// RMS residual divided by the amplitude.
    pub relative_residual: f64,
}

struct LorentzProblem<'a> {
    x: &'a [f64],
    y: &'a [f64],
    p: Vector4<f64>,
}

impl LorentzProblem<'_> {
    fn model(p: &Vector4<f64>, x: f64) -> (f64, [f64; 4]) {
        let (a, x0, w, b) = (p[0], p[1], p[2], p[3]);
        let u = x - x0;
        let d = u * u + w * w;
        let val = a * w * w / d + b;
        let grad = [
            w * w / d,
            2.0 * a * w * w * u / (d * d),
            2.0 * a * w * u * u / (d * d),
            1.0,
        ];
        (val, grad)
    }
}

impl LeastSquaresProblem<f64, Dyn, U4> for LorentzProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U4>;
    type ParameterStorage = Owned<f64, U4>;

    fn set_params(&mut self, x: &Vector4<f64>) {
        self.p = *x;
    }

    fn params(&self) -> Vector4<f64> {
        self.p
    }

    fn residuals(&self) -> Option<OVector<f64, Dyn>> {
        Some(DVector::from_iterator(
            self.x.len(),
            self.x.iter().zip(self.y).map(|(&x, &y)| Self::model(&self.p, x).0 - y),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U4>> {
        let mut j = OMatrix::<f64, Dyn, U4>::zeros(self.x.len());
        for (r, &x) in self.x.iter().enumerate() {
            let (_, g) = Self::model(&self.p, x);
            for (c, v) in g.iter().enumerate() {
                j[(r, c)] = *v;
            }
        }
        Some(j)
    }
}

/// Largest relative residual accepted from [`fit_lorentzian`].
pub const FIT_RESIDUAL_LIMIT: f64 = 0.05;

/// Least-squares fit of a single Lorentzian on a baseline.
pub fn fit_lorentzian(x: &[f64], y: &[f64]) -> Result<LorentzianFit> {
    if x.len() != y.len() || x.len() < 5 {
        return Err(Error::FitFailed {
            reason: format!("need at least 5 aligned samples, got {} and {}", x.len(), y.len()),
            residual: f64::NAN,
        });
    }
    let (imax, &ymax) = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let half = 0.5 * (ymax + ymin);
    let left = (0..imax).rev().find(|&k| y[k] < half).map(|k| x[k]).unwrap_or(x[0]);
    let right = (imax..x.len()).find(|&k| y[k] < half).map(|k| x[k]).unwrap_or(x[x.len() - 1]);
    let w0 = (0.5 * (right - left)).abs().max(f64::EPSILON);
    let start = Vector4::new(ymax - ymin, x[imax], w0, ymin);

    let problem = LorentzProblem { x, y, p: start };
    let (solved, report) = LevenbergMarquardt::new().with_patience(200).minimize(problem);
    let p = solved.p;
    let residuals = solved.residuals().unwrap();
    let m = x.len() as f64;
    let rms = (residuals.norm_squared() / m).sqrt();
    let relative = rms / p[0].abs().max(f64::MIN_POSITIVE);
    if !report.termination.was_successful() || !p.iter().all(|v| v.is_finite()) {
        return Err(Error::FitFailed {
            reason: format!("{:?}", report.termination),
            residual: relative,
        });
    }
    if relative > FIT_RESIDUAL_LIMIT {
        return Err(Error::FitFailed {
            reason: "data is not a single Lorentzian".into(),
            residual: relative,
        });
    }
    let jac: DMatrix<f64> = {
        let j = solved.jacobian().unwrap();
        DMatrix::from_iterator(j.nrows(), 4, j.iter().cloned())
    };
    let jtj = jac.transpose() * &jac;
    let s2 = residuals.norm_squared() / (m - 4.0).max(1.0);
    let cov = jtj
        .try_inverse()
        .map(|inv| Matrix4::from_iterator(inv.iter().map(|v| v * s2)))
        .unwrap_or_else(|| Matrix4::from_element(f64::NAN));
    Ok(LorentzianFit {
        center: p[1],
        half_width: p[2].abs(),
        amplitude: p[0],
        baseline: p[3],
        covariance: cov,
        relative_residual: relative,
    })
}

/// A transmission maximum between two resonances.
#[derive(Clone, Copy, Debug)]
pub struct Transparency {
    pub omega: f64,
    pub delta: f64,
    /// Full width at half maximum, rad/s.
    pub fwhm: f64,
    pub peak: f64,
}

/// Smallest rise of a transmission maximum over its deeper flanking minimum.
pub const TRANSPARENCY_PROMINENCE: f64 = 0.02;

/// Highest interior local maximum of `T` strictly inside `(omega_lo, omega_hi)`.
pub fn find_transparency(spectrum: &SpectrumResult, omega_lo: f64, omega_hi: f64) -> Result<Transparency> {
    let idx: Vec<usize> = spectrum
        .masked()
        .filter(|&i| spectrum.omega[i] > omega_lo && spectrum.omega[i] < omega_hi)
        .collect();
    if idx.len() < 3 {
        return Err(Error::NoTransparency);
    }
    let t: Vec<f64> = idx.iter().map(|&i| spectrum.transmission[i]).collect();
    let w: Vec<f64> = idx.iter().map(|&i| spectrum.omega[i]).collect();
    let mut best: Option<usize> = None;
    for k in 1..t.len() - 1 {
        if t[k] > t[k - 1] && t[k] >= t[k + 1] {
            let left_min = t[..k].iter().cloned().fold(f64::INFINITY, f64::min);
            let right_min = t[k + 1..].iter().cloned().fold(f64::INFINITY, f64::min);
            let prominence = t[k] - left_min.max(right_min);
            if prominence >= TRANSPARENCY_PROMINENCE && best.is_none_or(|b| t[k] > t[b]) {
                best = Some(k);
            }
        }
    }
    let k = best.ok_or(Error::NoTransparency)?;
    // Parabolic refinement through the three samples around the maximum.
    let (y0, y1, y2) = (t[k - 1], t[k], t[k + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom != 0.0 { 0.5 * (y0 - y2) / denom } else { 0.0 };
    let step = 0.5 * (w[k + 1] - w[k - 1]);
    let omega = w[k] + shift.clamp(-1.0, 1.0) * step;
    let peak = y1 - 0.25 * (y0 - y2) * shift;
    let half = 0.5 * peak;
    let cross = |range: &mut dyn Iterator<Item = usize>, toward: isize| -> f64 {
        for j in range {
            let jn = (j as isize + toward) as usize;
            if t[jn] < half {
                let u = (half - t[j]) / (t[jn] - t[j]);
                return w[j] + u * (w[jn] - w[j]);
            }
        }
        if toward < 0 {
            w[0]
        } else {
            w[w.len() - 1]
        }
    };
    let lo = cross(&mut (1..=k).rev(), -1);
    let hi = cross(&mut (k..t.len() - 1), 1);
    let reference_delta = spectrum.delta[idx[k]] + (omega - w[k]) * (spectrum.delta[idx[k + 1]] - spectrum.delta[idx[k - 1]]) / (w[k + 1] - w[k - 1]);
    Ok(Transparency {
        omega,
        delta: reference_delta,
        fwhm: hi - lo,
        peak,
    })
}

/// Energy fraction below which a transmitted pulse is considered lost.
pub const OPAQUE_THRESHOLD: f64 = 1e-6;

/// Delay of the transmitted energy centroid relative to the vacuum run.
pub fn group_delay(main: &ProbeRecording, vacuum: &ProbeRecording) -> Result<f64> {
    check_compatible(main, vacuum)?;
    let centroid = |rec: &ProbeRecording| {
        let (mut num, mut den) = (0.0, 0.0);
        for (k, s) in rec.flux().enumerate() {
            num += rec.time(k) * s;
            den += s;
        }
        (num / den, den)
    };
    let (t_vac, e_vac) = centroid(vacuum);
    let (t_main, e_main) = centroid(main);
    let fraction = e_main / e_vac;
    if !(fraction >= OPAQUE_THRESHOLD) {
        return Err(Error::OpaqueMedium { fraction });
    }
    Ok(t_main - t_vac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::SI;
    use approx::assert_relative_eq;

    fn decayed_sinusoid(w0: f64, gamma: f64, dt: f64, n: usize, shift: usize) -> ProbeRecording {
        let mut rec = ProbeRecording::new(0, dt, 1, 0.0);
        let z0 = SI.impedance();
        for k in 0..n {
            let v = if k >= shift {
                let t = (k - shift) as f64 * dt;
                (-gamma * t).exp() * (w0 * t).cos()
            } else {
                0.0
            };
            rec.push(v, v / z0);
        }
        rec
    }

    #[test]
    fn decayed_sinusoid_peak_and_width() {
        let (w0, g) = (2.0e14, 1.0e12);
        let dt = 1e-15;
        let rec = decayed_sinusoid(w0, g, dt, 20_000, 0);
        let spec = power_spectrum(&rec, g / 20.0, (w0 - 20.0 * g, w0 + 20.0 * g)).unwrap();
        let p: Vec<f64> = spec.e.iter().map(|c| c.norm_sqr()).collect();
        let (k, &pmax) = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert!((spec.omega[k] - w0).abs() < g / 10.0);
        // |X|^2 falls to half at w0 +- gamma.
        let above = p.iter().zip(&spec.omega).filter(|(v, _)| **v >= 0.5 * pmax).map(|(_, w)| *w);
        let (lo, hi) = above.fold((f64::MAX, f64::MIN), |(a, b), w| (a.min(w), b.max(w)));
        let hw = 0.5 * (hi - lo);
        assert!((hw - g).abs() < 0.02 * g, "half-width {hw}");
    }

    #[test]
    fn time_shift_changes_only_the_phase() {
        let (w0, g) = (2.0e14, 1.0e12);
        let dt = 1e-15;
        let shift = 500;
        let a = decayed_sinusoid(w0, g, dt, 40_000, 0);
        let b = decayed_sinusoid(w0, g, dt, 40_000, shift);
        let band = (w0 - 3.0 * g, w0 + 3.0 * g);
        let sa = power_spectrum(&a, g / 20.0, band).unwrap();
        let sb = power_spectrum(&b, g / 20.0, band).unwrap();
        let tau = shift as f64 * dt;
        for ((w, x), y) in sa.omega.iter().zip(&sa.e).zip(&sb.e) {
            assert!((x.norm() - y.norm()).abs() < 1e-9 * x.norm().max(1e-30));
            let expected = Complex64::from_polar(1.0, w * tau);
            assert!(((y / x) - expected).norm() < 1e-8);
        }
    }

    #[test]
    fn parseval_holds() {
        let rec = decayed_sinusoid(2.0e14, 1.0e12, 1e-15, 8_000, 0);
        let n_pad = padded_length(rec.len(), rec.dt_sample, 1e11);
        let spec = power_spectrum(&rec, 1e11, (0.0, f64::MAX)).unwrap();
        // Full two-sided sum: bins 1..n/2-1 appear twice for a real signal.
        let dw = 2.0 * std::f64::consts::PI / (n_pad as f64 * rec.dt_sample);
        let mut freq_energy = 0.0;
        for (k, x) in spec.e.iter().enumerate() {
            let weight = if k == 0 || k == spec.e.len() - 1 { 1.0 } else { 2.0 };
            freq_energy += weight * x.norm_sqr();
        }
        freq_energy *= dw / (2.0 * std::f64::consts::PI);
        let time_energy: f64 = rec.e.iter().map(|v| v * v).sum::<f64>() * rec.dt_sample;
        assert_relative_eq!(freq_energy, time_energy, max_relative = 1e-8);
    }

    #[test]
    fn truncated_recording_is_rejected() {
        let rec = decayed_sinusoid(2.0e14, 1.0e11, 1e-15, 4_000, 0);
        assert!(matches!(power_spectrum(&rec, 1e10, (0.0, 1e15)), Err(Error::Truncated { .. })));
    }

    #[test]
    fn vacuum_against_vacuum_is_flat() {
        let rec = decayed_sinusoid(2.0e14, 1.0e12, 1e-15, 20_000, 100);
        let mut quiet = rec.clone();
        quiet.e.iter_mut().for_each(|v| *v = 0.0);
        quiet.h.iter_mut().for_each(|v| *v = 0.0);
        let pair = ProbePair {
            reflection: quiet,
            transmission: rec,
        };
        let s = EmitterSpecies::new(2.0e14, 1e-29, 1e11, 1e12 - 5e10, 0.0).unwrap();
        let opts = SpectralOptions {
            resolution: 1e11,
            band: (1.9e14, 2.1e14),
        };
        let spec = transmission_reflection(&pair, &pair, &s, &opts).unwrap();
        for i in spec.masked() {
            assert!((spec.transmission[i] - 1.0).abs() < 1e-8);
            assert!(spec.reflection[i].abs() < 1e-8);
        }
        let flux = power_spectrum(&pair.transmission, 1e11, opts.band).unwrap().flux();
        let audit = energy_audit(&spec, &flux);
        assert!(audit.extinction().abs() < 1e-8);
    }

    #[test]
    fn empty_band_is_a_mismatch() {
        let rec = decayed_sinusoid(2.0e14, 1.0e12, 1e-15, 20_000, 0);
        let pair = ProbePair {
            reflection: rec.clone(),
            transmission: rec,
        };
        let s = EmitterSpecies::new(2.0e14, 1e-29, 1e11, 1e12, 0.0).unwrap();
        // Band far from the signal: the incident flux there is pure leakage.
        let opts = SpectralOptions {
            resolution: 1e11,
            band: (9.0e14, 9.1e14),
        };
        let r = transmission_reflection(&pair, &pair, &s, &opts);
        assert!(r.is_ok() || matches!(r, Err(Error::SourceBandMismatch)));
        let empty = SpectralOptions {
            resolution: 1e11,
            band: (5e15, 5e15),
        };
        assert!(matches!(transmission_reflection(&pair, &pair, &s, &empty), Err(Error::SourceBandMismatch)));
    }

    fn lorentzian(x: f64, a: f64, x0: f64, w: f64, b: f64) -> f64 {
        a * w * w / ((x - x0) * (x - x0) + w * w) + b
    }

    #[test]
    fn exact_lorentzian_is_recovered() {
        let x: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.05).collect();
        let y: Vec<f64> = x.iter().map(|&v| lorentzian(v, 0.45, -0.3, 1.17, 0.01)).collect();
        let f = fit_lorentzian(&x, &y).unwrap();
        assert!((f.amplitude - 0.45).abs() < 1e-6);
        assert!((f.center + 0.3).abs() < 1e-6);
        assert!((f.half_width - 1.17).abs() < 1e-6);
        assert!((f.baseline - 0.01).abs() < 1e-6);
    }

    #[test]
    fn noisy_lorentzian_half_width_within_three_percent() {
        use rand_like::Lcg;
        let mut rng = Lcg(12345);
        let x: Vec<f64> = (-400..=400).map(|k| k as f64 * 0.025).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| lorentzian(v, 1.0, 0.2, 1.0, 0.0) * (1.0 + 0.01 * rng.gaussian()))
            .collect();
        let f = fit_lorentzian(&x, &y).unwrap();
        assert!((f.half_width - 1.0).abs() < 0.03, "{}", f.half_width);
        assert!(f.covariance[(2, 2)] > 0.0);
    }

    #[test]
    fn two_peaks_are_flagged() {
        let x: Vec<f64> = (-400..=400).map(|k| k as f64 * 0.05).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| lorentzian(v, 1.0, -6.0, 1.0, 0.0) + lorentzian(v, 0.9, 6.0, 1.0, 0.0))
            .collect();
        assert!(matches!(fit_lorentzian(&x, &y), Err(Error::FitFailed { .. })));
    }

    fn synthetic(delta: &[f64], t: impl Fn(f64) -> f64) -> SpectrumResult {
        let omega: Vec<f64> = delta.iter().map(|d| 1e15 + d * 1e12).collect();
        let tt: Vec<f64> = delta.iter().map(|&d| t(d)).collect();
        let r: Vec<f64> = tt.iter().map(|v| 0.5 * (1.0 - v)).collect();
        SpectrumResult::new(omega, delta.to_vec(), tt, r, vec![true; delta.len()], SpectrumOrigin::Analytic)
    }

    #[test]
    fn transparency_peak_is_located() {
        let delta: Vec<f64> = (-600..=800).map(|k| k as f64 * 0.1).collect();
        let spec = synthetic(&delta, |d| lorentzian(d, 0.5, 24.93, 1.5, 0.0) + 0.002 * d.max(0.0) / 50.0);
        let tr = find_transparency(&spec, 1e15, 1e15 + 50e12).unwrap();
        assert!((tr.delta - 24.93).abs() < 0.05, "{}", tr.delta);
        assert!((tr.fwhm / 1e12 - 3.0).abs() < 0.1, "{}", tr.fwhm);
        assert!((tr.peak - 0.5).abs() < 0.01);
    }

    #[test]
    fn monotone_transmission_has_no_transparency() {
        let delta: Vec<f64> = (-600..=800).map(|k| k as f64 * 0.1).collect();
        let spec = synthetic(&delta, |d| 1.0 / (1.0 + (-(d - 40.0) / 5.0).exp()));
        assert!(matches!(
            find_transparency(&spec, 1e15, 1e15 + 50e12),
            Err(Error::NoTransparency)
        ));
    }

    #[test]
    fn group_delay_of_identical_runs_is_zero() {
        let rec = decayed_sinusoid(2.0e14, 1.0e12, 1e-15, 20_000, 300);
        assert_eq!(group_delay(&rec, &rec).unwrap(), 0.0);
        let shifted = decayed_sinusoid(2.0e14, 1.0e12, 1e-15, 20_000, 800);
        let d = group_delay(&shifted, &rec).unwrap();
        assert!((d - 500e-15).abs() < 1e-15, "{d}");
        let mut dark = rec.clone();
        dark.e.iter_mut().for_each(|v| *v *= 1e-4);
        dark.h.iter_mut().for_each(|v| *v *= 1e-4);
        assert!(matches!(group_delay(&dark, &rec), Err(Error::OpaqueMedium { .. })));
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let delta = vec![-1.0, 0.0, 1.0];
        let mut spec = synthetic(&delta, |d| 0.5 + 0.1 * d);
        spec.band_mask[0] = false;
        let mut buf = Vec::new();
        spec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("delta,omega,T,R,extinction\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("0.00000000e0,"));
        let back = SpectrumResult::read_csv(&buf[..], SpectrumOrigin::Fdtd).unwrap();
        assert_eq!(back.delta, vec![0.0, 1.0]);
        assert!(SpectrumResult::read_csv(&b"a,b\n1,2\n"[..], SpectrumOrigin::Fdtd).is_err());
    }

    /// Tiny deterministic generator for synthetic noise in tests.
    mod rand_like {
        pub struct Lcg(pub u64);
        impl Lcg {
            fn uniform(&mut self) -> f64 {
                self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((self.0 >> 11) as f64 + 0.5) / (1u64 << 53) as f64
            }
            pub fn gaussian(&mut self) -> f64 {
                let (u, v) = (self.uniform(), self.uniform());
                (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
            }
        }
    }
}
