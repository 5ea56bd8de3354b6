//! Frequency-domain monitors: running discrete Fourier transforms of
//! tangential fields on axis-aligned faces (flux), and of cell-centered
//! E fields over volumes (mode profiles, axial scans).
//!
//! H samples live half a time step before the E samples of the same
//! step; each accumulator tags its samples with the true time so the
//! Poynting product is phase-consistent.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::FdtdError;

/// Monitor request in physical (geometry-frame) coordinates, meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MonitorSpec {
    /// Closed box of six outward-oriented faces centered on `center`.
    FluxBox {
        center: [f64; 3],
        half: [f64; 3],
        freqs: Vec<f64>,
    },
    /// Single rectangular face normal to `axis` at `position`, spanning
    /// the full interior cross-section minus `margin_cells`. `sign` +1
    /// counts flux along +axis as positive.
    FluxPlane {
        axis: usize,
        position: f64,
        margin_cells: usize,
        freqs: Vec<f64>,
        sign: f64,
    },
    /// Cell-centered complex E over a box (a plane is a 1-cell slab).
    FieldVolume {
        lo: [f64; 3],
        hi: [f64; 3],
        freqs: Vec<f64>,
    },
}

/// One completed face: per-frequency complex tangential fields at the
/// face sample points. With normal axis a and cyclic tangentials
/// (t1, t2), the Poynting component along a is e1*conj(h2) - e2*conj(h1).
#[derive(Debug, Clone)]
pub struct FaceData {
    pub axis: usize,
    pub sign: f64,
    pub n0: usize,
    pub n1: usize,
    /// Flattened [freq][n0*n1].
    pub e1: Vec<Complex64>,
    pub e2: Vec<Complex64>,
    pub h1: Vec<Complex64>,
    pub h2: Vec<Complex64>,
}

impl FaceData {
    /// Outward flux through this face at frequency index `fi`, watts.
    pub fn flux_at(&self, fi: usize, dx: f64) -> f64 {
        let np = self.n0 * self.n1;
        let base = fi * np;
        let mut s = 0.0;
        for p in 0..np {
            let a = self.e1[base + p] * self.h2[base + p].conj();
            let b = self.e2[base + p] * self.h1[base + p].conj();
            s += (a - b).re;
        }
        0.5 * self.sign * s * dx * dx
    }
}

#[derive(Debug, Clone)]
pub struct FluxData {
    pub freqs: Vec<f64>,
    pub dx: f64,
    pub closed: bool,
    pub faces: Vec<FaceData>,
}

impl FluxData {
    pub fn flux_at(&self, fi: usize) -> f64 {
        self.faces.iter().map(|f| f.flux_at(fi, self.dx)).sum()
    }

    /// Spectrum as (freq rad/s, flux W) pairs.
    pub fn spectrum(&self) -> Vec<(f64, f64)> {
        (0..self.freqs.len())
            .map(|fi| (self.freqs[fi], self.flux_at(fi)))
            .collect()
    }

    fn freq_index(&self, freq: f64) -> Result<usize, FdtdError> {
        self.freqs
            .iter()
            .position(|&f| (f - freq).abs() <= 1e-6 * freq)
            .ok_or(FdtdError::FrequencyNotSampled { freq })
    }

    /// Flux with all face orientations reversed (exact negation).
    pub fn reversed(&self) -> FluxData {
        let mut out = self.clone();
        for f in &mut out.faces {
            f.sign = -f.sign;
        }
        out
    }
}

/// Outward Poynting flux of a closed-box monitor at a sampled frequency.
pub fn closed_box_flux(data: &FluxData, freq: f64) -> Result<f64, FdtdError> {
    if !data.closed {
        return Err(FdtdError::NotClosedBox);
    }
    let fi = data.freq_index(freq)?;
    Ok(data.flux_at(fi))
}

/// Cell-centered complex E fields over a box region.
#[derive(Debug, Clone)]
pub struct VolumeData {
    pub freqs: Vec<f64>,
    pub dx: f64,
    /// Cell coordinates of the low corner, in interior-grid cells.
    pub lo_cell: [usize; 3],
    pub n: [usize; 3],
    /// Flattened [freq][cell], cell index = (k*ny + j)*nx + i.
    pub ex: Vec<Complex64>,
    pub ey: Vec<Complex64>,
    pub ez: Vec<Complex64>,
}

impl VolumeData {
    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    /// |E|^2 at a cell for frequency index `fi`.
    pub fn e_sq(&self, fi: usize, cell: usize) -> f64 {
        let base = fi * self.n[0] * self.n[1] * self.n[2];
        self.ex[base + cell].norm_sqr()
            + self.ey[base + cell].norm_sqr()
            + self.ez[base + cell].norm_sqr()
    }
}

#[derive(Debug, Clone)]
pub enum MonitorData {
    Flux(FluxData),
    Volume(VolumeData),
}

impl MonitorData {
    pub fn as_flux(&self) -> Option<&FluxData> {
        match self {
            MonitorData::Flux(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_volume(&self) -> Option<&VolumeData> {
        match self {
            MonitorData::Volume(v) => Some(v),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------
// Accumulators (engine-internal, padded-lattice coordinates)
// ---------------------------------------------------------------------

pub(crate) struct FaceAcc {
    pub axis: usize,
    pub sign: f64,
    /// Integer lattice plane along the normal axis.
    pub plane: usize,
    /// Tangential start indices (t1, t2) and counts.
    pub lo: [usize; 2],
    pub n: [usize; 2],
    pub e1: Vec<Complex64>,
    pub e2: Vec<Complex64>,
    pub h1: Vec<Complex64>,
    pub h2: Vec<Complex64>,
}

impl FaceAcc {
    pub fn new(axis: usize, sign: f64, plane: usize, lo: [usize; 2], n: [usize; 2], nf: usize) -> Self {
        let len = nf * n[0] * n[1];
        FaceAcc {
            axis,
            sign,
            plane,
            lo,
            n,
            e1: vec![Complex64::new(0.0, 0.0); len],
            e2: vec![Complex64::new(0.0, 0.0); len],
            h1: vec![Complex64::new(0.0, 0.0); len],
            h2: vec![Complex64::new(0.0, 0.0); len],
        }
    }
}

pub(crate) struct VolumeAcc {
    /// Low cell corner in padded lattice coordinates.
    pub lo: [usize; 3],
    pub n: [usize; 3],
    pub ex: Vec<Complex64>,
    pub ey: Vec<Complex64>,
    pub ez: Vec<Complex64>,
}

impl VolumeAcc {
    pub fn new(lo: [usize; 3], n: [usize; 3], nf: usize) -> Self {
        let len = nf * n[0] * n[1] * n[2];
        VolumeAcc {
            lo,
            n,
            ex: vec![Complex64::new(0.0, 0.0); len],
            ey: vec![Complex64::new(0.0, 0.0); len],
            ez: vec![Complex64::new(0.0, 0.0); len],
        }
    }
}

pub(crate) enum MonitorAcc {
    Flux {
        freqs: Vec<f64>,
        closed: bool,
        faces: Vec<FaceAcc>,
    },
    Volume {
        freqs: Vec<f64>,
        acc: VolumeAcc,
    },
}
