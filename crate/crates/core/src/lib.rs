//! One-dimensional Maxwell-Bloch simulation of thin, dense slabs of two-level
//! emitters with Lorentz-Lorenz local-field correction.
//!
//! The crate is organized bottom-up:
//!
//! * [`material`] holds constants, emitter species and slab geometry.
//! * [`lorentz`] is the closed-form extended Lorentz model (single and
//!   two-species susceptibility, thin-film spectra, window edges, group index).
//! * [`bloch`] integrates the optical Bloch equations per cell.
//! * [`fdtd`] propagates `E_x`/`H_y` on a Yee grid coupled to the Bloch medium.
//! * [`spectra`] turns probe recordings into transmission/reflection spectra.
//! * [`scenario`] ties everything together: configs, presets, runs, outputs.
//!
//! Data-parallel loops (frequency sweeps, batches of runs, large slabs) use
//! rayon when the `parallel` feature is enabled and fall back to sequential
//! iteration otherwise. Results are identical either way.

pub mod bloch;
pub mod error;
pub mod fdtd;
pub mod lorentz;
pub mod material;
pub mod par;
pub mod scenario;
pub mod spectra;

pub use error::{Error, ErrorClass, Result};
pub use material::{EmitterSpecies, PhysicalConstants, SlabMedium, SI};
