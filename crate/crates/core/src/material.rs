//! Physical constants, emitter species and slab geometry.
//!
//! Every derived material quantity (decoherence rate, Lorentz-Lorenz shift,
//! plasma frequency, reduced detuning) lives here so the rest of the crate
//! has a single source of truth for them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalConstants {
    /// Vacuum speed of light, m/s.
    pub c: f64,
    /// Vacuum permittivity, F/m.
    pub eps0: f64,
    /// Vacuum permeability, H/m.
    pub mu0: f64,
    /// Reduced Planck constant, J s.
    pub hbar: f64,
}

const C: f64 = 299_792_458.0;
const MU0: f64 = 1.256_637_062_12e-6;

/// SI values (CODATA 2018). `eps0` is derived from `mu0` and `c` so that
/// `c^2 eps0 mu0 = 1` holds to rounding.
pub const SI: PhysicalConstants = PhysicalConstants {
    c: C,
    eps0: 1.0 / (MU0 * C * C),
    mu0: MU0,
    hbar: 1.054_571_817e-34,
};

impl PhysicalConstants {
    /// Vacuum wave impedance, ohm.
    pub fn impedance(&self) -> f64 {
        (self.mu0 / self.eps0).sqrt()
    }
}

/// Atomic unit of electric dipole moment (e a0), C m.
pub const ATOMIC_UNIT_DIPOLE: f64 = 8.478_353_625_5e-30;

/// Default transition wavelength, m.
pub const DEFAULT_WAVELENGTH: f64 = 620e-9;
/// Default excited-state decay rate, 1/s.
pub const DEFAULT_DECAY: f64 = 1e11;
/// Default pure dephasing rate, 1/s.
pub const DEFAULT_DEPHASING: f64 = 1e12;
/// Default slab thickness, m.
pub const DEFAULT_THICKNESS: f64 = 400e-9;

/// Angular frequency for a vacuum wavelength.
pub fn omega_from_wavelength(wavelength: f64) -> f64 {
    2.0 * std::f64::consts::PI * SI.c / wavelength
}

/// One species of two-level emitters.
///
/// Rates are angular rates (1/s) and enter the equations of motion directly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmitterSpecies {
    /// Transition angular frequency, rad/s.
    pub omega01: f64,
    /// Transition dipole moment, C m.
    pub mu01: f64,
    /// Excited-state decay rate, 1/s.
    pub decay: f64,
    /// Pure dephasing rate, 1/s.
    pub dephasing: f64,
    /// Number density, 1/m^3.
    pub density: f64,
}

impl EmitterSpecies {
    pub fn new(omega01: f64, mu01: f64, decay: f64, dephasing: f64, density: f64) -> Result<Self> {
        let s = EmitterSpecies {
            omega01,
            mu01,
            decay,
            dephasing,
            density,
        };
        s.validate()?;
        Ok(s)
    }

    /// Species at the default wavelength and rates whose density yields the
    /// requested Lorentz-Lorenz shift in units of the total decoherence rate.
    pub fn with_shift_ratio(omega01: f64, shift_over_gamma: f64) -> Result<Self> {
        let mut s = EmitterSpecies::new(omega01, ATOMIC_UNIT_DIPOLE, DEFAULT_DECAY, DEFAULT_DEPHASING, 0.0)?;
        s.density = density_from_shift(shift_over_gamma * s.gamma(), s.mu01)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        fn check(name: &'static str, v: f64, strict: bool) -> Result<()> {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    reason: format!("{v} must be finite and {}", if strict { "> 0" } else { ">= 0" }),
                })
            }
        }
        check("omega01", self.omega01, true)?;
        check("mu01", self.mu01, true)?;
        check("decay", self.decay, false)?;
        check("dephasing", self.dephasing, false)?;
        check("density", self.density, false)
    }

    /// Total decoherence rate `gamma = dephasing + decay / 2`.
    pub fn gamma(&self) -> f64 {
        self.dephasing + 0.5 * self.decay
    }

    /// Lorentz-Lorenz shift `n0 mu01^2 / (9 hbar eps0)`, rad/s.
    pub fn lorentz_shift(&self) -> f64 {
        self.density * self.mu01 * self.mu01 / (9.0 * SI.hbar * SI.eps0)
    }

    /// Plasma frequency `sqrt(6 omega01 Delta)` of the extended Lorentz model.
    pub fn plasma_frequency(&self) -> f64 {
        (6.0 * self.omega01 * self.lorentz_shift()).sqrt()
    }

    /// Dipole projection on the field axis for isotropically oriented
    /// emitters, `mu01 / sqrt(3)`.
    ///
    /// This is the moment that couples to `E_x` and contributes to `P_x`;
    /// with it the linear response of the Bloch medium has exactly the
    /// plasma frequency and Lorentz-Lorenz shift above.
    pub fn projected_dipole(&self) -> f64 {
        self.mu01 / 3f64.sqrt()
    }
}

/// `gamma = dephasing + decay / 2`.
pub fn total_decoherence(species: &EmitterSpecies) -> f64 {
    species.gamma()
}

/// Number density giving the Lorentz-Lorenz shift `delta_target` for a
/// transition dipole `mu01`.
pub fn density_from_shift(delta_target: f64, mu01: f64) -> Result<f64> {
    if !(mu01 > 0.0 && mu01.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "mu01",
            reason: format!("{mu01} must be positive"),
        });
    }
    if !(delta_target >= 0.0 && delta_target.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "delta_target",
            reason: format!("{delta_target} must be non-negative"),
        });
    }
    Ok(9.0 * SI.hbar * SI.eps0 * delta_target / (mu01 * mu01))
}

/// `(omega - omega01) / gamma` of the reference species.
pub fn reduced_detuning(omega: f64, reference: &EmitterSpecies) -> Result<f64> {
    let g = reference.gamma();
    if g == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    Ok((omega - reference.omega01) / g)
}

/// Inverse of [`reduced_detuning`].
pub fn omega_from_detuning(delta: f64, reference: &EmitterSpecies) -> Result<f64> {
    let g = reference.gamma();
    if g == 0.0 {
        return Err(Error::DegenerateDetuning);
    }
    Ok(reference.omega01 + delta * g)
}

/// A uniform layer of emitters between vacuum half-spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlabMedium {
    /// Layer thickness, m.
    pub thickness: f64,
    /// Position of the left face, m.
    pub z_start: f64,
    /// One or two species sharing the layer.
    pub species: Vec<EmitterSpecies>,
}

impl SlabMedium {
    pub fn new(thickness: f64, z_start: f64, species: Vec<EmitterSpecies>) -> Result<Self> {
        let m = SlabMedium {
            thickness,
            z_start,
            species,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thickness > 0.0 && self.thickness.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "thickness",
                reason: format!("{} must be positive", self.thickness),
            });
        }
        if !(self.z_start >= 0.0 && self.z_start.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "z_start",
                reason: format!("{} must be non-negative", self.z_start),
            });
        }
        if self.species.is_empty() || self.species.len() > 2 {
            return Err(Error::InvalidParameter {
                name: "species",
                reason: format!("expected 1 or 2 species, got {}", self.species.len()),
            });
        }
        self.species.iter().try_for_each(EmitterSpecies::validate)
    }

    pub fn z_end(&self) -> f64 {
        self.z_start + self.thickness
    }

    /// Uniform inside `[z_start, z_end)`, zero outside.
    pub fn contains(&self, z: f64) -> bool {
        z >= self.z_start && z < self.z_end()
    }

    /// The species that defines the reduced-detuning axis.
    pub fn reference(&self) -> &EmitterSpecies {
        &self.species[0]
    }

    /// Same geometry with every density set to zero.
    pub fn emptied(&self) -> SlabMedium {
        let mut m = self.clone();
        m.species.iter_mut().for_each(|s| s.density = 0.0);
        m
    }
}
