//! Closed-form extended Lorentz model of a dense emitter layer.
//!
//! Each species is a damped oscillator driven by the local field
//! `E + P_total / (3 eps0)`. For a monochromatic field (time dependence
//! `exp(-i w t)`) this gives
//!
//! ```text
//! chi(w)  = 6 w01 / f(w),    f(w) = (w01^2 - 2 w01 D - w^2 - i g w) / D
//! ```
//!
//! and, for two species,
//!
//! ```text
//! chi(w) = [6 w01' (f + 2 w01) + 6 w01 (f' + 2 w01')] / (f f' - 4 w01 w01')
//! ```
//!
//! The oscillator damping `g` is twice the Bloch coherence decay rate, which
//! makes this model the exact linear response of the Bloch medium in
//! [`crate::bloch`] (up to an `O(gamma^2 / w01^2)` shift of the bare line).
//!
//! These functions are the independent oracle for the time-domain solver.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::material::{reduced_detuning, EmitterSpecies, SlabMedium, SI};
use crate::par;
use crate::spectra::{SpectrumOrigin, SpectrumResult};

/// Oscillator damping of the Lorentz model for a species.
pub fn damping(s: &EmitterSpecies) -> f64 {
    2.0 * s.gamma()
}

fn f_factor(omega: f64, s: &EmitterSpecies, shift: f64) -> Complex64 {
    let w01 = s.omega01;
    Complex64::new(w01 * w01 - 2.0 * w01 * shift - omega * omega, -damping(s) * omega) / shift
}

/// Susceptibility of a single species.
pub fn chi_single(omega: f64, s: &EmitterSpecies) -> Complex64 {
    let shift = s.lorentz_shift();
    if shift == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    6.0 * s.omega01 / f_factor(omega, s, shift)
}

/// Susceptibility of two mutually coupled species sharing one local field.
///
/// Symmetric under exchange of the two species, bit for bit.
pub fn chi_mixture(omega: f64, s: &EmitterSpecies, s2: &EmitterSpecies) -> Complex64 {
    let (d1, d2) = (s.lorentz_shift(), s2.lorentz_shift());
    if d2 == 0.0 {
        return chi_single(omega, s);
    }
    if d1 == 0.0 {
        return chi_single(omega, s2);
    }
    let (w1, w2) = (s.omega01, s2.omega01);
    let f1 = f_factor(omega, s, d1);
    let f2 = f_factor(omega, s2, d2);
    let num = 6.0 * w2 * (f1 + 2.0 * w1) + 6.0 * w1 * (f2 + 2.0 * w2);
    num / (f1 * f2 - 4.0 * (w1 * w2))
}

/// Susceptibility of one or two species (zero for none).
pub fn chi_species(omega: f64, species: &[EmitterSpecies]) -> Complex64 {
    match species {
        [] => Complex64::new(0.0, 0.0),
        [s] => chi_single(omega, s),
        [s, s2] => chi_mixture(omega, s, s2),
        _ => panic!("at most two species are supported"),
    }
}

/// Denominator whose zeros are the poles of [`chi_species`].
fn chi_denominator(omega: f64, species: &[EmitterSpecies]) -> Option<Complex64> {
    let active: Vec<&EmitterSpecies> = species.iter().filter(|s| s.lorentz_shift() > 0.0).collect();
    match active.as_slice() {
        [] => None,
        [s] => Some(f_factor(omega, s, s.lorentz_shift())),
        [s, s2] => {
            let f1 = f_factor(omega, s, s.lorentz_shift());
            let f2 = f_factor(omega, s2, s2.lorentz_shift());
            Some(f1 * f2 - 4.0 * (s.omega01 * s2.omega01))
        }
        _ => None,
    }
}

/// Complex refractive index `sqrt(1 + chi)` on the branch with `Im n >= 0`.
pub fn refractive_index(chi: Complex64) -> Complex64 {
    let n = (Complex64::new(1.0, 0.0) + chi).sqrt();
    if n.im < 0.0 || (n.im == 0.0 && n.re < 0.0) {
        -n
    } else {
        n
    }
}

/// Long-wavelength-limit transparency frequency where the two species'
/// polarizations cancel (valid for `gamma << Delta`).
pub fn transparency_frequency(s: &EmitterSpecies, s2: &EmitterSpecies) -> f64 {
    let (lo, hi) = if s.omega01 <= s2.omega01 { (s, s2) } else { (s2, s) };
    let a = lo.omega01 * lo.lorentz_shift();
    let b = hi.omega01 * hi.lorentz_shift();
    let w2 = (a * hi.omega01 * hi.omega01 + b * lo.omega01 * lo.omega01) / (a + b);
    w2.sqrt()
}

/// Exact minimizer of `|chi_mixture|` between the two bare transitions:
/// a dense scan followed by golden-section refinement.
pub fn transparency_frequency_numeric(s: &EmitterSpecies, s2: &EmitterSpecies) -> Result<f64> {
    if s.lorentz_shift() <= 0.0 || s2.lorentz_shift() <= 0.0 {
        return Err(Error::DegenerateMedium(
            "both species need a positive density to define a transparency frequency".into(),
        ));
    }
    let (lo, hi) = if s.omega01 <= s2.omega01 {
        (s.omega01, s2.omega01)
    } else {
        (s2.omega01, s.omega01)
    };
    if lo == hi {
        return Err(Error::DegenerateMedium("the two transitions coincide".into()));
    }
    let cost = |w: f64| chi_mixture(w, s, s2).norm();
    let n = 4000;
    let step = (hi - lo) / n as f64;
    let grid: Vec<f64> = (0..=n).map(|k| lo + step * k as f64).collect();
    let values = par::map(&grid, |&w| cost(w));
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(n)];
    Ok(golden_section(cost, a, b, 200))
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if (b - a).abs() <= f64::EPSILON * b.abs() {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Lossless reflection window `(w_low, w_high)` of a single species:
/// `w_low` is the pole of `chi` and `w_high` the `chi = -1` crossing.
/// To first order in `Delta / w01` these are `w01 - Delta` and `w01 + 2 Delta`.
pub fn reflection_window(s: &EmitterSpecies) -> Result<(f64, f64)> {
    let (w01, shift) = (s.omega01, s.lorentz_shift());
    let low_sq = w01 * w01 - 2.0 * w01 * shift;
    if low_sq <= 0.0 {
        return Err(Error::DegenerateMedium(format!(
            "Lorentz-Lorenz shift {shift:.3e} rad/s exceeds half the transition frequency"
        )));
    }
    Ok((low_sq.sqrt(), (w01 * w01 + 4.0 * w01 * shift).sqrt()))
}

/// Normal-incidence reflectance of a vacuum/medium interface for a real index.
pub fn reflectance_from_index(n: f64) -> f64 {
    let r = (1.0 - n) / (1.0 + n);
    r * r
}

/// Semi-infinite-medium reflectance with `n = Re sqrt(1 + chi)`.
pub fn interface_reflectance(omega: f64, s: &EmitterSpecies) -> f64 {
    reflectance_from_index(refractive_index(chi_single(omega, s)).re)
}

/// Complex amplitude transmission and reflection coefficients of the slab.
///
/// The transmission coefficient is referenced to the same distance of
/// vacuum, so its phase is the extra phase picked up in the layer.
pub fn slab_amplitudes(omega: f64, medium: &SlabMedium) -> (Complex64, Complex64) {
    let n = refractive_index(chi_species(omega, &medium.species));
    let k0l = omega * medium.thickness / SI.c;
    let r12 = (1.0 - n) / (1.0 + n);
    let ph = (Complex64::i() * n * k0l).exp();
    let ph2 = ph * ph;
    let denom = 1.0 - r12 * r12 * ph2;
    let r = r12 * (1.0 - ph2) / denom;
    let t = (1.0 - r12 * r12) * ph / denom * Complex64::from_polar(1.0, -k0l);
    (t, r)
}

/// Exact thin-film transmission/reflection spectra of the slab.
pub fn slab_spectra(omegas: &[f64], medium: &SlabMedium) -> Result<SpectrumResult> {
    let reference = *medium.reference();
    let tr = par::map(omegas, |&w| {
        let (t, r) = slab_amplitudes(w, medium);
        (t.norm_sqr(), r.norm_sqr())
    });
    let delta = omegas
        .iter()
        .map(|&w| reduced_detuning(w, &reference))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectrumResult::new(
        omegas.to_vec(),
        delta,
        tr.iter().map(|x| x.0).collect(),
        tr.iter().map(|x| x.1).collect(),
        vec![true; omegas.len()],
        SpectrumOrigin::Analytic,
    ))
}

fn real_index(omega: f64, medium: &SlabMedium) -> f64 {
    refractive_index(chi_species(omega, &medium.species)).re
}

/// Group index `n + w dn/dw` of the bulk medium.
///
/// `dn/dw` is an adaptive central difference starting at `gamma / 100` and
/// halved until two successive estimates agree to 1e-6.
pub fn group_index(omega: f64, medium: &SlabMedium) -> Result<f64> {
    let n0 = real_index(omega, medium);
    let mut h = (medium.reference().gamma() / 100.0).max(omega * 1e-9);
    if let Some(d0) = chi_denominator(omega, &medium.species) {
        let spread = chi_denominator(omega + h, &medium.species).unwrap() - chi_denominator(omega - h, &medium.species).unwrap();
        if d0.norm() <= 0.5 * spread.norm() {
            return Err(Error::DerivativeUnreliable {
                omega,
                reason: "difference stencil straddles a pole of the susceptibility".into(),
            });
        }
    }
    let central = |h: f64| (real_index(omega + h, medium) - real_index(omega - h, medium)) / (2.0 * h);
    let mut prev = central(h);
    for _ in 0..40 {
        h *= 0.5;
        let next = central(h);
        if !next.is_finite() {
            break;
        }
        let scale = next.abs().max(n0.abs() / omega);
        if (next - prev).abs() <= 1e-6 * scale {
            return Ok(n0 + omega * next);
        }
        prev = next;
    }
    Err(Error::DerivativeUnreliable {
        omega,
        reason: "finite-difference estimates did not converge".into(),
    })
}

/// Group delay of the slab relative to vacuum, `d arg(t) / dw`, in seconds.
pub fn slab_group_delay(omega: f64, medium: &SlabMedium) -> f64 {
    let h = medium.reference().gamma().max(omega * 1e-9) / 1000.0;
    let (tp, _) = slab_amplitudes(omega + h, medium);
    let (tm, _) = slab_amplitudes(omega - h, medium);
    // Phase difference computed from the ratio to stay on one branch.
    (tp / tm).arg() / (2.0 * h)
}

/// Transmitted-power-weighted mean of [`slab_group_delay`].
///
/// `incident_power` is the incident spectral power on `omegas`. This is the
/// delay of the energy centroid of the transmitted pulse.
pub fn band_averaged_group_delay(omegas: &[f64], incident_power: &[f64], medium: &SlabMedium) -> f64 {
    let rows = par::map(omegas, |&w| {
        let (t, _) = slab_amplitudes(w, medium);
        (t.norm_sqr(), slab_group_delay(w, medium))
    });
    let (mut num, mut den) = (0.0, 0.0);
    for ((&p, (tt, tau)), _) in incident_power.iter().zip(&rows).zip(omegas) {
        num += p * tt * tau;
        den += p * tt;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
