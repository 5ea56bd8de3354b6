//! Physical constants (SI) and small unit helpers used across the crate.

use std::f64::consts::PI;

/// Vacuum speed of light, m/s.
pub const C0: f64 = 299_792_458.0;

/// Vacuum permittivity, F/m.
pub const EPS0: f64 = 8.854_187_812_8e-12;

/// Vacuum permeability, H/m.
pub const MU0: f64 = 1.256_637_062_12e-6;

/// Vacuum impedance, ohms.
pub const ETA0: f64 = 376.730_313_668;

/// Refractive index of diamond in the NV emission band.
pub const DIAMOND_INDEX: f64 = 2.417;

/// NV-band spectral averaging window, nm (matches the detection bandpass).
pub const NV_BAND_NM: (f64, f64) = (650.0, 800.0);

/// Angular frequency (rad/s) for a vacuum wavelength in nm.
pub fn omega_from_lambda_nm(lambda_nm: f64) -> f64 {
    2.0 * PI * C0 / (lambda_nm * 1e-9)
}

/// Vacuum wavelength in nm for an angular frequency in rad/s.
pub fn lambda_nm_from_omega(omega: f64) -> f64 {
    2.0 * PI * C0 / omega * 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wavelength_round_trip() {
        let w = omega_from_lambda_nm(700.0);
        assert!((lambda_nm_from_omega(w) - 700.0).abs() < 1e-9);
    }

    #[test]
    fn impedance_consistent() {
        assert!((ETA0 - (MU0 / EPS0).sqrt()).abs() / ETA0 < 1e-9);
    }
}
