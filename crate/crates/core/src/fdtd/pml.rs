//! Convolutional PML profiles and auxiliary memory fields.
//!
//! Polynomial-graded sigma/kappa/alpha profiles along each axis, sampled
//! at integer positions (used by E-field curl terms) and half positions
//! (used by H-field curl terms). Memory (psi) fields are stored in slabs
//! covering only the absorbing shell.

use crate::constants::{EPS0, ETA0};

/// Grading order of the conductivity profile.
const GRADING_ORDER: f64 = 3.0;
const KAPPA_MAX: f64 = 3.0;
const ALPHA_MAX: f64 = 0.2;
/// sigma_max = SIGMA_FACTOR * (m + 1) / (eta0 * dx)
const SIGMA_FACTOR: f64 = 0.8;

/// Per-axis stretched-coordinate profiles. Index i covers 0..=n for the
/// integer set and 0..n for the half set (position i + 1/2).
pub struct AxisProfiles {
    pub inv_kappa_int: Vec<f64>,
    pub inv_kappa_half: Vec<f64>,
    pub b_int: Vec<f64>,
    pub c_int: Vec<f64>, // includes the 1/dx of the spatial derivative
    pub b_half: Vec<f64>,
    pub c_half: Vec<f64>,
}

fn graded(depth_cells: f64, pml_cells: usize, dx: f64, dt: f64) -> (f64, f64, f64) {
    if depth_cells <= 0.0 {
        return (1.0, 1.0, 0.0); // (kappa, b, c) outside the PML: identity
    }
    let d = (depth_cells / pml_cells as f64).min(1.0);
    let g = d.powf(GRADING_ORDER);
    let sigma_max = SIGMA_FACTOR * (GRADING_ORDER + 1.0) / (ETA0 * dx);
    let sigma = sigma_max * g;
    let kappa = 1.0 + (KAPPA_MAX - 1.0) * g;
    let alpha = ALPHA_MAX * (1.0 - d);
    let b = (-(sigma / kappa + alpha) * dt / EPS0).exp();
    let denom = sigma * kappa + kappa * kappa * alpha;
    let c = if denom > 0.0 {
        sigma * (b - 1.0) / denom
    } else {
        0.0
    };
    (kappa, b, c)
}

impl AxisProfiles {
    /// Build profiles for an axis with `n` cells total, `pml` of them
    /// absorbing at each end.
    pub fn new(n: usize, pml: usize, dx: f64, dt: f64) -> Self {
        let mut p = AxisProfiles {
            inv_kappa_int: vec![1.0; n + 1],
            inv_kappa_half: vec![1.0; n],
            b_int: vec![1.0; n + 1],
            c_int: vec![0.0; n + 1],
            b_half: vec![1.0; n],
            c_half: vec![0.0; n],
        };
        for i in 0..=n {
            let pos = i as f64;
            let depth = (pml as f64 - pos).max(pos - (n - pml) as f64);
            let (kappa, b, c) = graded(depth, pml, dx, dt);
            p.inv_kappa_int[i] = 1.0 / kappa;
            p.b_int[i] = b;
            p.c_int[i] = c / dx;
        }
        for i in 0..n {
            let pos = i as f64 + 0.5;
            let depth_lo = pml as f64 - pos;
            let depth_hi = pos - (n - pml) as f64;
            let depth = depth_lo.max(depth_hi);
            let (kappa, b, c) = graded(depth, pml, dx, dt);
            p.inv_kappa_half[i] = 1.0 / kappa;
            p.b_half[i] = b;
            p.c_half[i] = c / dx;
        }
        p
    }
}

/// psi memory arrays for one axis. Each side holds two E-corrections and
/// two H-corrections (the four field components whose curl involves a
/// derivative along this axis). Slabs are indexed `local * stride + rest`
/// with the slab axis outermost for z, innermost-compatible layouts for
/// x and y chosen by the update loops.
pub struct PsiSlab {
    /// Range of integer positions covered on the low side: 1..=pml.
    pub e_lo_start: usize,
    pub e_lo: [Vec<f64>; 2],
    /// Range on the high side: n-pml..n (integer positions).
    pub e_hi_start: usize,
    pub e_hi: [Vec<f64>; 2],
    /// Half positions 0..pml on the low side.
    pub h_lo_start: usize,
    pub h_lo: [Vec<f64>; 2],
    /// Half positions n-pml..n on the high side.
    pub h_hi_start: usize,
    pub h_hi: [Vec<f64>; 2],
    pub width_e: usize,
    pub width_h: usize,
}

impl PsiSlab {
    /// `n` cells along the slab axis, `other` = product of the two
    /// transverse array dimensions.
    pub fn new(n: usize, pml: usize, other: usize) -> Self {
        let width_e = pml; // integer positions 1..=pml and n-pml..n-1 (pml-1 entries + pad)
        let width_h = pml;
        PsiSlab {
            e_lo_start: 1,
            e_lo: [vec![0.0; width_e * other], vec![0.0; width_e * other]],
            e_hi_start: n - pml,
            e_hi: [vec![0.0; width_e * other], vec![0.0; width_e * other]],
            h_lo_start: 0,
            h_lo: [vec![0.0; width_h * other], vec![0.0; width_h * other]],
            h_hi_start: n - pml,
            h_hi: [vec![0.0; width_h * other], vec![0.0; width_h * other]],
            width_e,
            width_h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_identity_in_interior() {
        let n = 40;
        let pml = 10;
        let p = AxisProfiles::new(n, pml, 1e-8, 1e-17);
        for i in pml..=(n - pml) {
            assert_eq!(p.inv_kappa_int[i], 1.0);
            assert_eq!(p.b_int[i], 1.0);
            assert_eq!(p.c_int[i], 0.0);
        }
        for i in pml..(n - pml) {
            assert_eq!(p.inv_kappa_half[i], 1.0);
            assert_eq!(p.c_half[i], 0.0);
        }
    }

    #[test]
    fn profiles_graded_toward_boundary() {
        let n = 40;
        let pml = 10;
        let p = AxisProfiles::new(n, pml, 1e-8, 1e-17);
        // Deeper into the PML: smaller b (stronger absorption).
        assert!(p.b_int[1] < p.b_int[5]);
        assert!(p.b_int[5] < p.b_int[9]);
        assert!(p.b_int[n - 1] < p.b_int[n - 5]);
        // kappa stretches toward the boundary.
        assert!(p.inv_kappa_int[1] < p.inv_kappa_int[8]);
        // Symmetric ends.
        assert!((p.b_int[1] - p.b_int[n - 1]).abs() < 1e-15);
    }
}
