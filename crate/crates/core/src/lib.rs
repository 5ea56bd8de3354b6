//! Numerical workbench for a diamond-silver plasmonic aperture single-photon
//! source: a 3D FDTD solver for spontaneous-emission enhancement, kinetic
//! Monte Carlo of emitter photophysics, photon-correlation histogramming,
//! and nonlinear least-squares fits of the standard single-emitter datasets
//! (g², lifetime, saturation, Fano, ODMR).

pub mod constants;
pub mod correlation;
pub mod emitter;
pub mod fdtd;
pub mod fit;
pub mod io;
pub mod materials;
pub mod purcell;
pub mod synth;

pub use constants::{C0, EPS0, MU0};
pub use materials::{DeviceGeometry, DeviceVariant, MaterialGrid, PermittivityModel};
