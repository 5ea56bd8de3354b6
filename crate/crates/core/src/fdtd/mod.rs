//! 3D finite-difference time-domain solver on a Yee grid.
//!
//! Dispersive media (Drude plus optional Lorentz poles) advance by
//! auxiliary differential equations with the polarization current
//! staggered at half steps, so every update reads only same-step values
//! and parallelizes without copies. Boundaries are convolutional PML.
//! The source is a soft (additive) point current with a Gaussian-modulated
//! carrier whose spectrum covers the whole analysis band in one run.
//!
//! Determinism: field updates are partitioned by z-plane with fixed chunk
//! boundaries and no cross-chunk reductions, so results are bitwise
//! identical for any worker count; monitor accumulation runs serially in
//! fixed face order.

mod monitor;
mod pml;

pub use monitor::{closed_box_flux, FaceData, FluxData, MonitorData, MonitorSpec, VolumeData};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{C0, EPS0, MU0};
use crate::materials::{MaterialGrid, PermittivityModel};
use monitor::{FaceAcc, MonitorAcc, VolumeAcc};
use pml::{AxisProfiles, PsiSlab};

const ENERGY_CHECK_INTERVAL: usize = 25;
const BLOWUP_FACTOR: f64 = 1e3;

#[derive(Debug, Error)]
pub enum FdtdError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("field blow-up detected at step {step}: energy grew past {factor}x the post-turnoff level")]
    Instability { step: usize, factor: f64 },
    #[error("dipole source lies inside/too close to the PML (lattice {lattice:?}, pml {pml})")]
    DipoleInPml { lattice: [f64; 3], pml: usize },
    #[error("monitor region lies outside the grid interior: {0}")]
    MonitorOutsideGrid(String),
    #[error("frequency {freq} rad/s is not sampled by this monitor")]
    FrequencyNotSampled { freq: f64 },
    #[error("flux monitor is not a closed box")]
    NotClosedBox,
    #[error(transparent)]
    Material(#[from] crate::materials::MaterialError),
}

/// Solver controls. `courant_factor` scales dt = courant * dx / c0 and
/// must stay below the 3D limit 1/sqrt(3).
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub grid: MaterialGrid,
    pub courant_factor: f64,
    pub max_steps: usize,
    /// Stop once interior field energy falls below this fraction of its peak.
    pub shutoff_fraction: f64,
    pub pml_cells: usize,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), FdtdError> {
        let limit = 1.0 / 3f64.sqrt();
        if !(self.courant_factor > 0.0 && self.courant_factor < limit) {
            return Err(FdtdError::Config(format!(
                "courant_factor must be in (0, 1/sqrt(3)) = (0, {limit:.4}), got {}",
                self.courant_factor
            )));
        }
        if self.pml_cells < 8 {
            return Err(FdtdError::Config(format!(
                "pml_cells must be >= 8, got {}",
                self.pml_cells
            )));
        }
        if !(self.shutoff_fraction > 0.0 && self.shutoff_fraction < 1.0) {
            return Err(FdtdError::Config(format!(
                "shutoff_fraction must be in (0, 1), got {}",
                self.shutoff_fraction
            )));
        }
        if self.max_steps == 0 {
            return Err(FdtdError::Config("max_steps must be > 0".into()));
        }
        for m in &self.grid.materials {
            m.validate()?;
        }
        Ok(())
    }
}

/// Point-dipole current source. The waveform is
/// amplitude * cos(w_c (t - t0)) * exp(-(t - t0)^2 / (2 tau^2)) with
/// tau = 2 / pulse_bandwidth, i.e. the spectral standard deviation is
/// pulse_bandwidth / 2 around the carrier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DipoleSource {
    /// Meters, geometry frame.
    pub position: [f64; 3],
    /// Unit vector.
    pub orientation: [f64; 3],
    /// Current-density amplitude (A/m^2); flux scales as amplitude^2.
    pub amplitude: f64,
    /// Carrier angular frequency, rad/s.
    pub pulse_center_freq: f64,
    /// Full spectral width (2 sigma), rad/s.
    pub pulse_bandwidth: f64,
}

impl DipoleSource {
    /// In-plane (x) dipole covering the 600-850 nm band.
    pub fn in_plane_at(position: [f64; 3]) -> Self {
        DipoleSource {
            position,
            orientation: [1.0, 0.0, 0.0],
            amplitude: 1.0,
            pulse_center_freq: crate::constants::omega_from_lambda_nm(703.0),
            pulse_bandwidth: 9.2e14,
        }
    }

    pub fn with_orientation(mut self, orientation: [f64; 3]) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn validate(&self) -> Result<(), FdtdError> {
        let norm2: f64 = self.orientation.iter().map(|o| o * o).sum();
        if (norm2.sqrt() - 1.0).abs() > 1e-12 {
            return Err(FdtdError::Config(format!(
                "orientation must be a unit vector, |o| = {}",
                norm2.sqrt()
            )));
        }
        if !(self.pulse_center_freq > 0.0) || !(self.pulse_bandwidth > 0.0) {
            return Err(FdtdError::Config(
                "pulse_center_freq and pulse_bandwidth must be > 0".into(),
            ));
        }
        if !self.amplitude.is_finite() {
            return Err(FdtdError::Config("amplitude must be finite".into()));
        }
        Ok(())
    }

    pub fn envelope_tau(&self) -> f64 {
        2.0 / self.pulse_bandwidth
    }

    pub fn start_offset(&self) -> f64 {
        5.0 * self.envelope_tau()
    }

    /// Current waveform at time t (without the amplitude factor).
    pub fn waveform(&self, t: f64) -> f64 {
        let tau = self.envelope_tau();
        let u = t - self.start_offset();
        (self.pulse_center_freq * u).cos() * (-u * u / (2.0 * tau * tau)).exp()
    }

    /// Time past which the injected current is negligible.
    pub fn off_time(&self) -> f64 {
        self.start_offset() + 5.0 * self.envelope_tau()
    }
}

/// Completed run: monitor data plus enough source metadata to normalize
/// spectra by the injected current.
#[derive(Debug)]
pub struct RunResult {
    pub monitors: Vec<MonitorData>,
    pub steps: usize,
    pub dt: f64,
    pub cells: [usize; 3],
    source: DipoleSource,
}

impl RunResult {
    /// DFT of the injected current waveform at `freq`, matching the
    /// sampling instants used during the run (units A/m^2 * s).
    pub fn source_spectrum(&self, freq: f64) -> Complex64 {
        let mut acc = Complex64::ZERO;
        for n in 0..self.steps {
            let t = (n as f64 + 0.5) * self.dt;
            let w = self.source.amplitude * self.source.waveform(t);
            acc += Complex64::from_polar(w, -freq * t);
        }
        acc * self.dt
    }
}

struct SourceSite {
    /// Index into the field array for the given component.
    idx: usize,
    /// Component: 0 = Ex, 1 = Ey, 2 = Ez.
    comp: usize,
    /// Orientation weight times dt/(eps0 eps_inf) of the host cell.
    dte_weight: f64,
}

struct LorentzCoef {
    pa: f64,
    pb: f64,
    pc: f64,
}

pub struct Engine {
    // cells including PML
    cnx: usize,
    cny: usize,
    cnz: usize,
    // array dims (+1)
    ax: usize,
    ay: usize,

    dx: f64,
    dt: f64,
    pml: usize,
    ids: Vec<u16>,
    // per-material coefficients
    dte: Vec<f64>,    // dt/(eps0*eps_inf)
    dte_dx: Vec<f64>, // dt/(eps0*eps_inf*dx)
    kj: Vec<f64>,
    be: Vec<f64>,
    eps_inf: Vec<f64>,
    lorentz: Vec<Vec<LorentzCoef>>,
    any_drude: bool,
    n_pole_slots: usize,
    ch_dx: f64,
    ch: f64,
    // fields
    ex: Vec<f64>,
    ey: Vec<f64>,
    ez: Vec<f64>,
    hx: Vec<f64>,
    hy: Vec<f64>,
    hz: Vec<f64>,
    jx: Vec<f64>,
    jy: Vec<f64>,
    jz: Vec<f64>,
    jlx: Vec<f64>,
    jly: Vec<f64>,
    jlz: Vec<f64>,
    // lorentz polarizations [slot]
    px: Vec<Vec<f64>>,
    py: Vec<Vec<f64>>,
    pz: Vec<Vec<f64>>,
    px_old: Vec<Vec<f64>>,
    py_old: Vec<Vec<f64>>,
    pz_old: Vec<Vec<f64>>,
    // dispersive z-cell range (cells), half-open
    disp_k: (usize, usize),
    prof_x: AxisProfiles,
    prof_y: AxisProfiles,
    prof_z: AxisProfiles,
    psi_x: PsiSlab,
    psi_y: PsiSlab,
    psi_z: PsiSlab,
    sites: Vec<SourceSite>,
    source: DipoleSource,
    monitors: Vec<MonitorAcc>,
    parallel: bool,
}

#[inline]
fn round_idx(x: f64) -> i64 {
    x.round() as i64
}

impl Engine {
    pub fn new(
        config: &SimulationConfig,
        source: &DipoleSource,
        monitors: &[MonitorSpec],
    ) -> Result<Self, FdtdError> {
        config.validate()?;
        source.validate()?;
        let grid = &config.grid;
        let pml = config.pml_cells;
        let dx = grid.cell_size;
        let dt = config.courant_factor * dx / C0;
        let (cnx, cny, cnz) = (grid.nx + 2 * pml, grid.ny + 2 * pml, grid.nz + 2 * pml);
        let (ax, ay, az) = (cnx + 1, cny + 1, cnz + 1);

        // Edge-extend the interior material map into the PML shell.
        let mut ids = vec![0u16; cnx * cny * cnz];
        for k in 0..cnz {
            let kk = (k as i64 - pml as i64).clamp(0, grid.nz as i64 - 1) as usize;
            for j in 0..cny {
                let jj = (j as i64 - pml as i64).clamp(0, grid.ny as i64 - 1) as usize;
                for i in 0..cnx {
                    let ii = (i as i64 - pml as i64).clamp(0, grid.nx as i64 - 1) as usize;
                    ids[(k * cny + j) * cnx + i] = grid.ids[grid.idx(ii, jj, kk)];
                }
            }
        }

        let nm = grid.materials.len();
        let mut dte = vec![0.0; nm];
        let mut dte_dx = vec![0.0; nm];
        let mut kj = vec![0.0; nm];
        let mut be = vec![0.0; nm];
        let mut eps_inf = vec![1.0; nm];
        let mut lorentz: Vec<Vec<LorentzCoef>> = Vec::with_capacity(nm);
        let mut any_drude = false;
        let mut n_pole_slots = 0;
        for (m, model) in grid.materials.iter().enumerate() {
            model.validate()?;
            let ei = model.eps_inf();
            eps_inf[m] = ei;
            dte[m] = dt / (EPS0 * ei);
            dte_dx[m] = dt / (EPS0 * ei * dx);
            let mut coefs = Vec::new();
            match model {
                PermittivityModel::Constant { .. } => {}
                PermittivityModel::Drude {
                    plasma_freq,
                    damping,
                    ..
                }
                | PermittivityModel::DrudeLorentz {
                    plasma_freq,
                    damping,
                    ..
                } => {
                    any_drude = true;
                    let gd = damping * dt / 2.0;
                    kj[m] = (1.0 - gd) / (1.0 + gd);
                    be[m] = EPS0 * plasma_freq * plasma_freq * dt / (1.0 + gd);
                }
            }
            if let PermittivityModel::DrudeLorentz { poles, .. } = model {
                for p in poles {
                    let w02 = p.center_freq * p.center_freq;
                    let gd = p.linewidth * dt / 2.0;
                    coefs.push(LorentzCoef {
                        pa: (2.0 - w02 * dt * dt) / (1.0 + gd),
                        pb: -(1.0 - gd) / (1.0 + gd),
                        pc: EPS0 * p.strength * w02 * dt * dt / (1.0 + gd),
                    });
                }
            }
            n_pole_slots = n_pole_slots.max(coefs.len());
            lorentz.push(coefs);
        }

        // z-range (in cells) containing dispersive material, for the J pass.
        let mut k_lo = cnz;
        let mut k_hi = 0;
        if any_drude || n_pole_slots > 0 {
            for k in 0..cnz {
                let mut has = false;
                for j in 0..cny {
                    for i in 0..cnx {
                        let id = ids[(k * cny + j) * cnx + i] as usize;
                        if be[id] != 0.0 || !lorentz[id].is_empty() {
                            has = true;
                            break;
                        }
                    }
                    if has {
                        break;
                    }
                }
                if has {
                    k_lo = k_lo.min(k);
                    k_hi = k_hi.max(k + 1);
                }
            }
        }
        if k_lo >= k_hi {
            k_lo = 0;
            k_hi = 0;
        }

        let field_len = ax * ay * az;
        let zeros = || vec![0.0; field_len];
        let jalloc = |used: bool| if used { vec![0.0; field_len] } else { Vec::new() };
        let use_j = k_hi > k_lo;

        let pslab = |n: usize, other: usize| PsiSlab::new(n, pml, other);

        let lat = |p: [f64; 3]| {
            [
                (p[0] - grid.origin[0]) / dx + pml as f64,
                (p[1] - grid.origin[1]) / dx + pml as f64,
                (p[2] - grid.origin[2]) / dx + pml as f64,
            ]
        };

        // Source sites: each orientation component lands on the nearest
        // Yee node of the matching E component.
        let lp = lat(source.position);
        for a in 0..3 {
            if lp[a] < (pml + 2) as f64 || lp[a] > ([cnx, cny, cnz][a] - pml - 2) as f64 {
                return Err(FdtdError::DipoleInPml {
                    lattice: lp,
                    pml,
                });
            }
        }
        let mut sites = Vec::new();
        let cidx = |i: i64, j: i64, k: i64| -> usize {
            let i = i.clamp(0, cnx as i64 - 1) as usize;
            let j = j.clamp(0, cny as i64 - 1) as usize;
            let k = k.clamp(0, cnz as i64 - 1) as usize;
            (k * cny + j) * cnx + i
        };
        let aidx = |i: i64, j: i64, k: i64| (k as usize * ay + j as usize) * ax + i as usize;
        for comp in 0..3 {
            let w = source.orientation[comp];
            if w.abs() < 1e-15 {
                continue;
            }
            // Yee offsets: the component's own axis is half-shifted.
            let off = |a: usize| if a == comp { 0.5 } else { 0.0 };
            let i = round_idx(lp[0] - off(0));
            let j = round_idx(lp[1] - off(1));
            let k = round_idx(lp[2] - off(2));
            let id = ids[cidx(i, j, k)] as usize;
            sites.push(SourceSite {
                idx: aidx(i, j, k),
                comp,
                dte_weight: dte[id] * w,
            });
        }

        // Resolve monitors.
        let clamp_plane = |v: i64, n: usize| -> Result<usize, FdtdError> {
            if v < 1 || v as usize > n - 1 {
                Err(FdtdError::MonitorOutsideGrid(format!(
                    "plane index {v} outside [1, {}]",
                    n - 1
                )))
            } else {
                Ok(v as usize)
            }
        };
        let mut accs = Vec::new();
        for spec in monitors {
            match spec {
                MonitorSpec::FluxBox {
                    center,
                    half,
                    freqs,
                } => {
                    let lo = lat([center[0] - half[0], center[1] - half[1], center[2] - half[2]]);
                    let hi = lat([center[0] + half[0], center[1] + half[1], center[2] + half[2]]);
                    let lo_i: Vec<usize> = (0..3)
                        .map(|a| clamp_plane(round_idx(lo[a]), [cnx, cny, cnz][a]))
                        .collect::<Result<_, _>>()?;
                    let hi_i: Vec<usize> = (0..3)
                        .map(|a| clamp_plane(round_idx(hi[a]), [cnx, cny, cnz][a]))
                        .collect::<Result<_, _>>()?;
                    for a in 0..3 {
                        if hi_i[a] <= lo_i[a] {
                            return Err(FdtdError::MonitorOutsideGrid(
                                "flux box has zero extent".into(),
                            ));
                        }
                    }
                    let mut faces = Vec::new();
                    for a in 0..3 {
                        let (t1, t2) = ((a + 1) % 3, (a + 2) % 3);
                        let lo2 = [lo_i[t1], lo_i[t2]];
                        let n2 = [hi_i[t1] - lo_i[t1], hi_i[t2] - lo_i[t2]];
                        faces.push(FaceAcc::new(a, -1.0, lo_i[a], lo2, n2, freqs.len()));
                        faces.push(FaceAcc::new(a, 1.0, hi_i[a], lo2, n2, freqs.len()));
                    }
                    accs.push(MonitorAcc::Flux {
                        freqs: freqs.clone(),
                        closed: true,
                        faces,
                    });
                }
                MonitorSpec::FluxPlane {
                    axis,
                    position,
                    margin_cells,
                    freqs,
                    sign,
                } => {
                    let a = *axis;
                    let n_ax = [cnx, cny, cnz][a];
                    let pos = lat([*position; 3])[a];
                    let plane = clamp_plane(round_idx(pos), n_ax)?;
                    let (t1, t2) = ((a + 1) % 3, (a + 2) % 3);
                    let m = pml + margin_cells;
                    let n1 = [cnx, cny, cnz][t1];
                    let n2 = [cnx, cny, cnz][t2];
                    if n1 <= 2 * m || n2 <= 2 * m {
                        return Err(FdtdError::MonitorOutsideGrid(
                            "flux plane margin leaves no cells".into(),
                        ));
                    }
                    let faces = vec![FaceAcc::new(
                        a,
                        *sign,
                        plane,
                        [m, m],
                        [n1 - 2 * m, n2 - 2 * m],
                        freqs.len(),
                    )];
                    accs.push(MonitorAcc::Flux {
                        freqs: freqs.clone(),
                        closed: false,
                        faces,
                    });
                }
                MonitorSpec::FieldVolume { lo, hi, freqs } => {
                    let l = lat(*lo);
                    let h = lat(*hi);
                    let mut lo_c = [0usize; 3];
                    let mut n_c = [0usize; 3];
                    for a in 0..3 {
                        let n_ax = [cnx, cny, cnz][a];
                        let lc = round_idx(l[a]).max(pml as i64) as usize;
                        let hc = (round_idx(h[a]).max(0) as usize).min(n_ax - pml);
                        if hc <= lc {
                            return Err(FdtdError::MonitorOutsideGrid(format!(
                                "field volume empty along axis {a}"
                            )));
                        }
                        lo_c[a] = lc;
                        n_c[a] = hc - lc;
                    }
                    accs.push(MonitorAcc::Volume {
                        freqs: freqs.clone(),
                        acc: VolumeAcc::new(lo_c, n_c, freqs.len()),
                    });
                }
            }
        }

        Ok(Engine {
            cnx,
            cny,
            cnz,
            ax,
            ay,

            dx,
            dt,
            pml,
            ids,
            dte,
            dte_dx,
            kj,
            be,
            eps_inf,
            lorentz,
            any_drude: any_drude && use_j,
            n_pole_slots,
            ch_dx: dt / (MU0 * dx),
            ch: dt / MU0,
            ex: zeros(),
            ey: zeros(),
            ez: zeros(),
            hx: zeros(),
            hy: zeros(),
            hz: zeros(),
            jx: jalloc(use_j && any_drude),
            jy: jalloc(use_j && any_drude),
            jz: jalloc(use_j && any_drude),
            jlx: jalloc(n_pole_slots > 0),
            jly: jalloc(n_pole_slots > 0),
            jlz: jalloc(n_pole_slots > 0),
            px: (0..n_pole_slots).map(|_| zeros()).collect(),
            py: (0..n_pole_slots).map(|_| zeros()).collect(),
            pz: (0..n_pole_slots).map(|_| zeros()).collect(),
            px_old: (0..n_pole_slots).map(|_| zeros()).collect(),
            py_old: (0..n_pole_slots).map(|_| zeros()).collect(),
            pz_old: (0..n_pole_slots).map(|_| zeros()).collect(),
            disp_k: (k_lo, k_hi),
            prof_x: AxisProfiles::new(cnx, pml, dx, dt),
            prof_y: AxisProfiles::new(cny, pml, dx, dt),
            prof_z: AxisProfiles::new(cnz, pml, dx, dt),
            psi_x: pslab(cnx, ay * az),
            psi_y: pslab(cny, ax * az),
            psi_z: pslab(cnz, ax * ay),
            sites,
            source: source.clone(),
            monitors: accs,
            parallel: rayon::current_num_threads() > 1,
        })
    }

    fn plane_len(&self) -> usize {
        self.ax * self.ay
    }

    /// Interior field energy (E + H), arbitrary consistent units.
    fn interior_energy(&self) -> f64 {
        let p = self.pml;
        let mut acc = 0.0;
        for k in p..(self.cnz - p) {
            for j in p..(self.cny - p) {
                let row = (k * self.ay + j) * self.ax;
                let crow = (k * self.cny + j) * self.cnx;
                for i in p..(self.cnx - p) {
                    let id = self.ids[crow + i] as usize;
                    let e2 = self.ex[row + i] * self.ex[row + i]
                        + self.ey[row + i] * self.ey[row + i]
                        + self.ez[row + i] * self.ez[row + i];
                    let h2 = self.hx[row + i] * self.hx[row + i]
                        + self.hy[row + i] * self.hy[row + i]
                        + self.hz[row + i] * self.hz[row + i];
                    acc += 0.5 * EPS0 * self.eps_inf[id] * e2 + 0.5 * MU0 * h2;
                }
            }
        }
        acc * self.dx * self.dx * self.dx
    }

    fn update_j(&mut self) {
        let (k_lo, k_hi) = self.disp_k;
        if k_hi <= k_lo {
            return;
        }
        let (cnx, cny, ax, ay) = (self.cnx, self.cny, self.ax, self.ay);
        let ids = &self.ids;
        let kj = &self.kj;
        let be = &self.be;
        if self.any_drude {
            // Jx lives with Ex (i in 0..cnx, j,k >= 1), Jy with Ey, Jz with Ez.
            let plane = self.plane_len();
            let do_comp = |jarr: &mut Vec<f64>, earr: &Vec<f64>, comp: usize, par: bool| {
                let body = |k: usize, jp: &mut [f64]| {
                    if k < k_lo.max(if comp == 2 { 0 } else { 1 }) || k >= k_hi {
                        return;
                    }
                    let jmin = if comp == 1 { 0 } else { 1 };
                    let imin = if comp == 0 { 0 } else { 1 };
                    for j in jmin..cny {
                        let row = j * ax;
                        let crow = (k * cny + j) * cnx;
                        let erow = (k * ay + j) * ax;
                        for i in imin..cnx {
                            let id = ids[crow + i] as usize;
                            let b = be[id];
                            if b != 0.0 {
                                jp[row + i] = kj[id] * jp[row + i] + b * earr[erow + i];
                            }
                        }
                    }
                };
                if par {
                    jarr.par_chunks_mut(plane).enumerate().for_each(|(k, jp)| body(k, jp));
                } else {
                    jarr.chunks_mut(plane).enumerate().for_each(|(k, jp)| body(k, jp));
                }
            };
            let par = self.parallel;
            let mut jx = std::mem::take(&mut self.jx);
            do_comp(&mut jx, &self.ex, 0, par);
            self.jx = jx;
            let mut jy = std::mem::take(&mut self.jy);
            do_comp(&mut jy, &self.ey, 1, par);
            self.jy = jy;
            let mut jz = std::mem::take(&mut self.jz);
            do_comp(&mut jz, &self.ez, 2, par);
            self.jz = jz;
        }
        // Lorentz poles: advance P and form the half-step current.
        for s in 0..self.n_pole_slots {
            let dt = self.dt;
            for comp in 0..3 {
                let (parr, pold, jl, earr) = match comp {
                    0 => (&mut self.px[s], &mut self.px_old[s], &mut self.jlx, &self.ex),
                    1 => (&mut self.py[s], &mut self.py_old[s], &mut self.jly, &self.ey),
                    _ => (&mut self.pz[s], &mut self.pz_old[s], &mut self.jlz, &self.ez),
                };
                for k in k_lo..k_hi {
                    for j in 0..cny {
                        let erow = (k * ay + j) * ax;
                        let crow = (k * cny + j) * cnx;
                        for i in 0..cnx {
                            let id = ids[crow + i] as usize;
                            if let Some(c) = self.lorentz[id].get(s) {
                                let at = erow + i;
                                let pn = parr[at];
                                let pnew = c.pa * pn + c.pb * pold[at] + c.pc * earr[at];
                                // Accumulate over slots; slot 0 resets.
                                let contrib = (pnew - pn) / dt;
                                if s == 0 {
                                    jl[at] = contrib;
                                } else {
                                    jl[at] += contrib;
                                }
                                pold[at] = pn;
                                parr[at] = pnew;
                            } else if s == 0 && !jl.is_empty() {
                                jl[erow + i] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }

    fn update_h(&mut self) {
        let (cnx, cny, cnz, ax, ay) = (self.cnx, self.cny, self.cnz, self.ax, self.ay);
        let plane = self.plane_len();
        let ch = self.ch_dx;
        let par = self.parallel;

        // Hx -= ch * ((dEz/dy) ik_y - (dEy/dz) ik_z)
        {
            let (ey, ez) = (&self.ey, &self.ez);
            let iky = &self.prof_y.inv_kappa_half;
            let ikz = &self.prof_z.inv_kappa_half;
            let body = |k: usize, hp: &mut [f64]| {
                if k >= cnz {
                    return;
                }
                let ikzk = ikz[k];
                for j in 0..cny {
                    let row = j * ax;
                    let e_jk = (k * ay + j) * ax;
                    let e_j1 = (k * ay + j + 1) * ax;
                    let e_k1 = ((k + 1) * ay + j) * ax;
                    let ikyj = iky[j];
                    for i in 0..=cnx {
                        let dez_dy = (ez[e_j1 + i] - ez[e_jk + i]) * ikyj;
                        let dey_dz = (ey[e_k1 + i] - ey[e_jk + i]) * ikzk;
                        hp[row + i] -= ch * (dez_dy - dey_dz);
                    }
                }
            };
            run_planes(&mut self.hx, plane, par, body);
        }
        // Hy -= ch * ((dEx/dz) ik_z - (dEz/dx) ik_x)
        {
            let (ex, ez) = (&self.ex, &self.ez);
            let ikx = &self.prof_x.inv_kappa_half;
            let ikz = &self.prof_z.inv_kappa_half;
            let body = |k: usize, hp: &mut [f64]| {
                if k >= cnz {
                    return;
                }
                let ikzk = ikz[k];
                for j in 0..=cny {
                    let row = j * ax;
                    let e_jk = (k * ay + j) * ax;
                    let e_k1 = ((k + 1) * ay + j) * ax;
                    for i in 0..cnx {
                        let dex_dz = (ex[e_k1 + i] - ex[e_jk + i]) * ikzk;
                        let dez_dx = (ez[e_jk + i + 1] - ez[e_jk + i]) * ikx[i];
                        hp[row + i] -= ch * (dex_dz - dez_dx);
                    }
                }
            };
            run_planes(&mut self.hy, plane, par, body);
        }
        // Hz -= ch * ((dEy/dx) ik_x - (dEx/dy) ik_y)
        {
            let (ex, ey) = (&self.ex, &self.ey);
            let ikx = &self.prof_x.inv_kappa_half;
            let iky = &self.prof_y.inv_kappa_half;
            let body = |k: usize, hp: &mut [f64]| {
                if k > cnz {
                    return;
                }
                for j in 0..cny {
                    let row = j * ax;
                    let e_jk = (k * ay + j) * ax;
                    let e_j1 = (k * ay + j + 1) * ax;
                    let ikyj = iky[j];
                    for i in 0..cnx {
                        let dey_dx = (ey[e_jk + i + 1] - ey[e_jk + i]) * ikx[i];
                        let dex_dy = (ex[e_j1 + i] - ex[e_jk + i]) * ikyj;
                        hp[row + i] -= ch * (dey_dx - dex_dy);
                    }
                }
            };
            run_planes(&mut self.hz, plane, par, body);
        }

        self.apply_psi_h();
    }

    fn update_e(&mut self, t_source: f64) {
        let (cnx, cny, cnz, ax, ay) = (self.cnx, self.cny, self.cnz, self.ax, self.ay);
        let plane = self.plane_len();
        let par = self.parallel;
        let ids = &self.ids;
        let dte_dx = &self.dte_dx;
        let dte = &self.dte;
        let has_j = self.any_drude;
        let has_jl = self.n_pole_slots > 0;

        // Ex += dte_dx * ((dHz/dy) ik_y - (dHy/dz) ik_z) - dte * (Jx + Jlx)
        {
            let (hy, hz) = (&self.hy, &self.hz);
            let (jx, jlx) = (&self.jx, &self.jlx);
            let iky = &self.prof_y.inv_kappa_int;
            let ikz = &self.prof_z.inv_kappa_int;
            let body = |k: usize, ep: &mut [f64]| {
                if k == 0 || k >= cnz {
                    return;
                }
                let ikzk = ikz[k];
                for j in 1..cny {
                    let row = j * ax;
                    let h_jk = (k * ay + j) * ax;
                    let h_jm = (k * ay + j - 1) * ax;
                    let h_km = ((k - 1) * ay + j) * ax;
                    let crow = (k * cny + j) * cnx;
                    let ikyj = iky[j];
                    for i in 0..cnx {
                        let id = ids[crow + i] as usize;
                        let dhz_dy = (hz[h_jk + i] - hz[h_jm + i]) * ikyj;
                        let dhy_dz = (hy[h_jk + i] - hy[h_km + i]) * ikzk;
                        let mut v = ep[row + i] + dte_dx[id] * (dhz_dy - dhy_dz);
                        if has_j {
                            v -= dte[id] * jx[h_jk + i];
                        }
                        if has_jl {
                            v -= dte[id] * jlx[h_jk + i];
                        }
                        ep[row + i] = v;
                    }
                }
            };
            run_planes(&mut self.ex, plane, par, body);
        }
        // Ey += dte_dx * ((dHx/dz) ik_z - (dHz/dx) ik_x) - dte * Jy
        {
            let (hx, hz) = (&self.hx, &self.hz);
            let (jy, jly) = (&self.jy, &self.jly);
            let ikx = &self.prof_x.inv_kappa_int;
            let ikz = &self.prof_z.inv_kappa_int;
            let body = |k: usize, ep: &mut [f64]| {
                if k == 0 || k >= cnz {
                    return;
                }
                let ikzk = ikz[k];
                for j in 0..cny {
                    let row = j * ax;
                    let h_jk = (k * ay + j) * ax;
                    let h_km = ((k - 1) * ay + j) * ax;
                    let crow = (k * cny + j) * cnx;
                    for i in 1..cnx {
                        let id = ids[crow + i] as usize;
                        let dhx_dz = (hx[h_jk + i] - hx[h_km + i]) * ikzk;
                        let dhz_dx = (hz[h_jk + i] - hz[h_jk + i - 1]) * ikx[i];
                        let mut v = ep[row + i] + dte_dx[id] * (dhx_dz - dhz_dx);
                        if has_j {
                            v -= dte[id] * jy[h_jk + i];
                        }
                        if has_jl {
                            v -= dte[id] * jly[h_jk + i];
                        }
                        ep[row + i] = v;
                    }
                }
            };
            run_planes(&mut self.ey, plane, par, body);
        }
        // Ez += dte_dx * ((dHy/dx) ik_x - (dHx/dy) ik_y) - dte * Jz
        {
            let (hx, hy) = (&self.hx, &self.hy);
            let (jz, jlz) = (&self.jz, &self.jlz);
            let ikx = &self.prof_x.inv_kappa_int;
            let iky = &self.prof_y.inv_kappa_int;
            let body = |k: usize, ep: &mut [f64]| {
                if k >= cnz {
                    return;
                }
                for j in 1..cny {
                    let row = j * ax;
                    let h_jk = (k * ay + j) * ax;
                    let h_jm = (k * ay + j - 1) * ax;
                    let crow = (k * cny + j) * cnx;
                    let ikyj = iky[j];
                    for i in 1..cnx {
                        let id = ids[crow + i] as usize;
                        let dhy_dx = (hy[h_jk + i] - hy[h_jk + i - 1]) * ikx[i];
                        let dhx_dy = (hx[h_jk + i] - hx[h_jm + i]) * ikyj;
                        let mut v = ep[row + i] + dte_dx[id] * (dhy_dx - dhx_dy);
                        if has_j {
                            v -= dte[id] * jz[h_jk + i];
                        }
                        if has_jl {
                            v -= dte[id] * jlz[h_jk + i];
                        }
                        ep[row + i] = v;
                    }
                }
            };
            run_planes(&mut self.ez, plane, par, body);
        }

        self.apply_psi_e();

        // Soft source: additive current at the dipole sites.
        let j_amp = self.source.amplitude * self.source.waveform(t_source);
        if j_amp != 0.0 {
            for s in &self.sites {
                let arr = match s.comp {
                    0 => &mut self.ex,
                    1 => &mut self.ey,
                    _ => &mut self.ez,
                };
                arr[s.idx] -= s.dte_weight * j_amp;
            }
        }
    }

    /// CPML corrections for the E update (integer positions).
    fn apply_psi_e(&mut self) {
        let (cnx, cny, cnz, ax, ay) = (self.cnx, self.cny, self.cnz, self.ax, self.ay);
        let pml = self.pml;
        let ids = &self.ids;
        let dte = &self.dte;

        // --- axis X: corrects Ey (-dHz/dx) and Ez (+dHy/dx) ---
        {
            let bc = &self.prof_x;
            let w = self.psi_x.width_e;
            for side in 0..2 {
                let start = if side == 0 {
                    self.psi_x.e_lo_start
                } else {
                    self.psi_x.e_hi_start
                };
                let (psi_ey, psi_ez) = if side == 0 {
                    let [a, b] = &mut self.psi_x.e_lo;
                    (a, b)
                } else {
                    let [a, b] = &mut self.psi_x.e_hi;
                    (a, b)
                };
                let irange = if side == 0 {
                    1..pml
                } else {
                    (cnx - pml + 1)..cnx
                };
                // Ey
                for k in 1..cnz {
                    for j in 0..cny {
                        let h_jk = (k * ay + j) * ax;
                        let crow = (k * cny + j) * cnx;
                        let prow = (k * ay + j) * w;
                        for i in irange.clone() {
                            let il = i - start;
                            let d = self.hz[h_jk + i] - self.hz[h_jk + i - 1];
                            let p = bc.b_int[i] * psi_ey[prow + il] + bc.c_int[i] * d;
                            psi_ey[prow + il] = p;
                            let id = ids[crow + i] as usize;
                            self.ey[h_jk + i] -= dte[id] * p;
                        }
                    }
                }
                // Ez
                for k in 0..cnz {
                    for j in 1..cny {
                        let h_jk = (k * ay + j) * ax;
                        let crow = (k * cny + j) * cnx;
                        let prow = (k * ay + j) * w;
                        for i in irange.clone() {
                            let il = i - start;
                            let d = self.hy[h_jk + i] - self.hy[h_jk + i - 1];
                            let p = bc.b_int[i] * psi_ez[prow + il] + bc.c_int[i] * d;
                            psi_ez[prow + il] = p;
                            let id = ids[crow + i] as usize;
                            self.ez[h_jk + i] += dte[id] * p;
                        }
                    }
                }
            }
        }

        // --- axis Y: corrects Ez (-dHx/dy) and Ex (+dHz/dy) ---
        {
            let bc = &self.prof_y;
            let w = self.psi_y.width_e;
            for side in 0..2 {
                let start = if side == 0 {
                    self.psi_y.e_lo_start
                } else {
                    self.psi_y.e_hi_start
                };
                let (psi_ez, psi_ex) = if side == 0 {
                    let [a, b] = &mut self.psi_y.e_lo;
                    (a, b)
                } else {
                    let [a, b] = &mut self.psi_y.e_hi;
                    (a, b)
                };
                let jrange = if side == 0 {
                    1..pml
                } else {
                    (cny - pml + 1)..cny
                };
                for k in 0..cnz {
                    for j in jrange.clone() {
                        let jl = j - start;
                        let h_jk = (k * ay + j) * ax;
                        let h_jm = (k * ay + j - 1) * ax;
                        let crow = (k * cny + j) * cnx;
                        let prow = (k * w + jl) * ax;
                        let bj = bc.b_int[j];
                        let cj = bc.c_int[j];
                        // Ez: i in 1..cnx (k any)
                        for i in 1..cnx {
                            let d = self.hx[h_jk + i] - self.hx[h_jm + i];
                            let p = bj * psi_ez[prow + i] + cj * d;
                            psi_ez[prow + i] = p;
                            let id = ids[crow + i] as usize;
                            self.ez[h_jk + i] -= dte[id] * p;
                        }
                        // Ex: i in 0..cnx, k >= 1
                        if k >= 1 {
                            for i in 0..cnx {
                                let d = self.hz[h_jk + i] - self.hz[h_jm + i];
                                let p = bj * psi_ex[prow + i] + cj * d;
                                psi_ex[prow + i] = p;
                                let id = ids[crow + i] as usize;
                                self.ex[h_jk + i] += dte[id] * p;
                            }
                        }
                    }
                }
            }
        }

        // --- axis Z: corrects Ex (-dHy/dz) and Ey (+dHx/dz) ---
        {
            let bc = &self.prof_z;
            for side in 0..2 {
                let start = if side == 0 {
                    self.psi_z.e_lo_start
                } else {
                    self.psi_z.e_hi_start
                };
                let (psi_ex, psi_ey) = if side == 0 {
                    let [a, b] = &mut self.psi_z.e_lo;
                    (a, b)
                } else {
                    let [a, b] = &mut self.psi_z.e_hi;
                    (a, b)
                };
                let krange = if side == 0 {
                    1..pml
                } else {
                    (cnz - pml + 1)..cnz
                };
                for k in krange.clone() {
                    let kl = k - start;
                    let bk = bc.b_int[k];
                    let ck = bc.c_int[k];
                    for j in 0..cny {
                        let h_jk = (k * ay + j) * ax;
                        let h_km = ((k - 1) * ay + j) * ax;
                        let crow = (k * cny + j) * cnx;
                        let prow = (kl * ay + j) * ax;
                        // Ex: j >= 1
                        if j >= 1 {
                            for i in 0..cnx {
                                let d = self.hy[h_jk + i] - self.hy[h_km + i];
                                let p = bk * psi_ex[prow + i] + ck * d;
                                psi_ex[prow + i] = p;
                                let id = ids[crow + i] as usize;
                                self.ex[h_jk + i] -= dte[id] * p;
                            }
                        }
                        // Ey: i in 1..cnx
                        for i in 1..cnx {
                            let d = self.hx[h_jk + i] - self.hx[h_km + i];
                            let p = bk * psi_ey[prow + i] + ck * d;
                            psi_ey[prow + i] = p;
                            let id = ids[crow + i] as usize;
                            self.ey[h_jk + i] += dte[id] * p;
                        }
                    }
                }
            }
        }
    }

    /// CPML corrections for the H update (half positions).
    fn apply_psi_h(&mut self) {
        let (cnx, cny, cnz, ax, ay) = (self.cnx, self.cny, self.cnz, self.ax, self.ay);
        let pml = self.pml;
        let ch = self.ch;

        // --- axis X: corrects Hy (-dEz/dx -> +=) and Hz (+dEy/dx -> -=) ---
        {
            let bc = &self.prof_x;
            let w = self.psi_x.width_h;
            for side in 0..2 {
                let start = if side == 0 {
                    self.psi_x.h_lo_start
                } else {
                    self.psi_x.h_hi_start
                };
                let (psi_hy, psi_hz) = if side == 0 {
                    let [a, b] = &mut self.psi_x.h_lo;
                    (a, b)
                } else {
                    let [a, b] = &mut self.psi_x.h_hi;
                    (a, b)
                };
                let irange = if side == 0 { 0..pml } else { (cnx - pml)..cnx };
                // Hy: j in 0..=cny, k in 0..cnz
                for k in 0..cnz {
                    for j in 0..=cny {
                        let f_jk = (k * ay + j) * ax;
                        let prow = (k * ay + j) * w;
                        for i in irange.clone() {
                            let il = i - start;
                            let d = self.ez[f_jk + i + 1] - self.ez[f_jk + i];
                            let p = bc.b_half[i] * psi_hy[prow + il] + bc.c_half[i] * d;
                            psi_hy[prow + il] = p;
                            self.hy[f_jk + i] += ch * p;
                        }
                    }
                }
                // Hz: j in 0..cny, k in 0..=cnz
                for k in 0..=cnz {
                    for j in 0..cny {
                        let f_jk = (k * ay + j) * ax;
                        let prow = (k * ay + j) * w;
                        for i in irange.clone() {
                            let il = i - start;
                            let d = self.ey[f_jk + i + 1] - self.ey[f_jk + i];
                            let p = bc.b_half[i] * psi_hz[prow + il] + bc.c_half[i] * d;
                            psi_hz[prow + il] = p;
                            self.hz[f_jk + i] -= ch * p;
                        }
                    }
                }
            }
        }

        // --- axis Y: corrects Hz (-dEx/dy -> +=) and Hx (+dEz/dy -> -=) ---
        {
            let bc = &self.prof_y;
            let w = self.psi_y.width_h;
            for side in 0..2 {
                let start = if side == 0 {
                    self.psi_y.h_lo_start
                } else {
                    self.psi_y.h_hi_start
                };
                let (psi_hz, psi_hx) = if side == 0 {
                    let [a, b] = &mut self.psi_y.h_lo;
                    (a, b)
                } else {
                    let [a, b] = &mut self.psi_y.h_hi;
                    (a, b)
                };
                let jrange = if side == 0 { 0..pml } else { (cny - pml)..cny };
                for k in 0..=cnz {
                    for j in jrange.clone() {
                        let jl = j - start;
                        let f_jk = (k * ay + j) * ax;
                        let f_j1 = (k * ay + j + 1) * ax;
                        let prow = (k * w + jl) * ax;
                        let bj = bc.b_half[j];
                        let cj = bc.c_half[j];
                        // Hz: k in 0..=cnz, i in 0..cnx
                        for i in 0..cnx {
                            let d = self.ex[f_j1 + i] - self.ex[f_jk + i];
                            let p = bj * psi_hz[prow + i] + cj * d;
                            psi_hz[prow + i] = p;
                            self.hz[f_jk + i] += ch * p;
                        }
                        // Hx: k in 0..cnz, i in 0..=cnx
                        if k < cnz {
                            for i in 0..=cnx {
                                let d = self.ez[f_j1 + i] - self.ez[f_jk + i];
                                let p = bj * psi_hx[prow + i] + cj * d;
                                psi_hx[prow + i] = p;
                                self.hx[f_jk + i] -= ch * p;
                            }
                        }
                    }
                }
            }
        }

        // --- axis Z: corrects Hx (-dEy/dz -> +=) and Hy (+dEx/dz -> -=) ---
        {
            let bc = &self.prof_z;
            for side in 0..2 {
                let start = if side == 0 {
                    self.psi_z.h_lo_start
                } else {
                    self.psi_z.h_hi_start
                };
                let (psi_hx, psi_hy) = if side == 0 {
                    let [a, b] = &mut self.psi_z.h_lo;
                    (a, b)
                } else {
                    let [a, b] = &mut self.psi_z.h_hi;
                    (a, b)
                };
                let krange = if side == 0 { 0..pml } else { (cnz - pml)..cnz };
                for k in krange.clone() {
                    let kl = k - start;
                    let bk = bc.b_half[k];
                    let ck = bc.c_half[k];
                    for j in 0..=cny {
                        let f_jk = (k * ay + j) * ax;
                        let f_k1 = ((k + 1) * ay + j) * ax;
                        let prow = (kl * ay + j) * ax;
                        // Hx: j in 0..cny, i in 0..=cnx
                        if j < cny {
                            for i in 0..=cnx {
                                let d = self.ey[f_k1 + i] - self.ey[f_jk + i];
                                let p = bk * psi_hx[prow + i] + ck * d;
                                psi_hx[prow + i] = p;
                                self.hx[f_jk + i] += ch * p;
                            }
                        }
                        // Hy: j in 0..=cny, i in 0..cnx
                        for i in 0..cnx {
                            let d = self.ex[f_k1 + i] - self.ex[f_jk + i];
                            let p = bk * psi_hy[prow + i] + ck * d;
                            psi_hy[prow + i] = p;
                            self.hy[f_jk + i] -= ch * p;
                        }
                    }
                }
            }
        }
    }

    fn accumulate_h(&mut self, t: f64) {
        let (ax, ay) = (self.ax, self.ay);
        let (hx, hy, hz) = (&self.hx, &self.hy, &self.hz);
        for mon in &mut self.monitors {
            if let MonitorAcc::Flux { freqs, faces, .. } = mon {
                for face in faces.iter_mut() {
                    let np = face.n[0] * face.n[1];
                    for (fi, &f) in freqs.iter().enumerate() {
                        let ph = Complex64::from_polar(1.0, -f * t);
                        let base = fi * np;
                        let p = face.plane;
                        match face.axis {
                            2 => {
                                // h1 = Hx at (i, j+1/2, p), h2 = Hy at (i+1/2, j, p)
                                for v in 0..face.n[1] {
                                    let j = face.lo[1] + v;
                                    let r0 = ((p - 1) * ay + j) * ax;
                                    let r1 = (p * ay + j) * ax;
                                    for u in 0..face.n[0] {
                                        let i = face.lo[0] + u;
                                        let hxa = 0.5 * (hx[r0 + i] + hx[r1 + i]);
                                        let hya = 0.5 * (hy[r0 + i] + hy[r1 + i]);
                                        let at = base + v * face.n[0] + u;
                                        face.h1[at] += ph * hxa;
                                        face.h2[at] += ph * hya;
                                    }
                                }
                            }
                            0 => {
                                // t1 = y, t2 = z: h1 = Hy, h2 = Hz, averaged over i
                                for v in 0..face.n[1] {
                                    let k = face.lo[1] + v;
                                    for u in 0..face.n[0] {
                                        let j = face.lo[0] + u;
                                        let r = (k * ay + j) * ax;
                                        let hya = 0.5 * (hy[r + p - 1] + hy[r + p]);
                                        let hza = 0.5 * (hz[r + p - 1] + hz[r + p]);
                                        let at = base + v * face.n[0] + u;
                                        face.h1[at] += ph * hya;
                                        face.h2[at] += ph * hza;
                                    }
                                }
                            }
                            _ => {
                                // axis 1: t1 = z, t2 = x: h1 = Hz, h2 = Hx, averaged over j
                                for v in 0..face.n[1] {
                                    let i = face.lo[1] + v;
                                    for u in 0..face.n[0] {
                                        let k = face.lo[0] + u;
                                        let r0 = (k * ay + p - 1) * ax;
                                        let r1 = (k * ay + p) * ax;
                                        let hza = 0.5 * (hz[r0 + i] + hz[r1 + i]);
                                        let hxa = 0.5 * (hx[r0 + i] + hx[r1 + i]);
                                        let at = base + v * face.n[0] + u;
                                        face.h1[at] += ph * hza;
                                        face.h2[at] += ph * hxa;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn accumulate_e(&mut self, t: f64) {
        let (ax, ay) = (self.ax, self.ay);
        let (ex, ey, ez) = (&self.ex, &self.ey, &self.ez);
        for mon in &mut self.monitors {
            match mon {
                MonitorAcc::Flux { freqs, faces, .. } => {
                    for face in faces.iter_mut() {
                        let np = face.n[0] * face.n[1];
                        for (fi, &f) in freqs.iter().enumerate() {
                            let ph = Complex64::from_polar(1.0, -f * t);
                            let base = fi * np;
                            let p = face.plane;
                            match face.axis {
                                2 => {
                                    for v in 0..face.n[1] {
                                        let j = face.lo[1] + v;
                                        let r = (p * ay + j) * ax;
                                        for u in 0..face.n[0] {
                                            let i = face.lo[0] + u;
                                            let at = base + v * face.n[0] + u;
                                            face.e1[at] += ph * ex[r + i];
                                            face.e2[at] += ph * ey[r + i];
                                        }
                                    }
                                }
                                0 => {
                                    for v in 0..face.n[1] {
                                        let k = face.lo[1] + v;
                                        for u in 0..face.n[0] {
                                            let j = face.lo[0] + u;
                                            let r = (k * ay + j) * ax;
                                            let at = base + v * face.n[0] + u;
                                            face.e1[at] += ph * ey[r + p];
                                            face.e2[at] += ph * ez[r + p];
                                        }
                                    }
                                }
                                _ => {
                                    for v in 0..face.n[1] {
                                        let i = face.lo[1] + v;
                                        for u in 0..face.n[0] {
                                            let k = face.lo[0] + u;
                                            let r = (k * ay + face.plane) * ax;
                                            let at = base + v * face.n[0] + u;
                                            face.e1[at] += ph * ez[r + i];
                                            face.e2[at] += ph * ex[r + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                MonitorAcc::Volume { freqs, acc } => {
                    let nc = acc.n[0] * acc.n[1] * acc.n[2];
                    for (fi, &f) in freqs.iter().enumerate() {
                        let ph = Complex64::from_polar(1.0, -f * t);
                        let base = fi * nc;
                        for kk in 0..acc.n[2] {
                            let k = acc.lo[2] + kk;
                            for jj in 0..acc.n[1] {
                                let j = acc.lo[1] + jj;
                                let r00 = (k * ay + j) * ax;
                                let r10 = (k * ay + j + 1) * ax;
                                let r01 = ((k + 1) * ay + j) * ax;
                                let r11 = ((k + 1) * ay + j + 1) * ax;
                                for ii in 0..acc.n[0] {
                                    let i = acc.lo[0] + ii;
                                    let exc = 0.25
                                        * (ex[r00 + i] + ex[r10 + i] + ex[r01 + i] + ex[r11 + i]);
                                    let eyc = 0.25
                                        * (ey[r00 + i] + ey[r00 + i + 1] + ey[r01 + i] + ey[r01 + i + 1]);
                                    let ezc = 0.25
                                        * (ez[r00 + i] + ez[r00 + i + 1] + ez[r10 + i] + ez[r10 + i + 1]);
                                    let at = base + (kk * acc.n[1] + jj) * acc.n[0] + ii;
                                    acc.ex[at] += ph * exc;
                                    acc.ey[at] += ph * eyc;
                                    acc.ez[at] += ph * ezc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn finalize(self, steps: usize) -> RunResult {
        let dt = self.dt;
        let dx = self.dx;
        let pml = self.pml;
        let monitors = self
            .monitors
            .into_iter()
            .map(|m| match m {
                MonitorAcc::Flux {
                    freqs,
                    closed,
                    faces,
                } => {
                    let faces = faces
                        .into_iter()
                        .map(|f| FaceData {
                            axis: f.axis,
                            sign: f.sign,
                            n0: f.n[0],
                            n1: f.n[1],
                            e1: f.e1.iter().map(|c| c * dt).collect(),
                            e2: f.e2.iter().map(|c| c * dt).collect(),
                            h1: f.h1.iter().map(|c| c * dt).collect(),
                            h2: f.h2.iter().map(|c| c * dt).collect(),
                        })
                        .collect();
                    MonitorData::Flux(FluxData {
                        freqs,
                        dx,
                        closed,
                        faces,
                    })
                }
                MonitorAcc::Volume { freqs, acc } => MonitorData::Volume(VolumeData {
                    freqs,
                    dx,
                    lo_cell: [
                        acc.lo[0] - pml,
                        acc.lo[1] - pml,
                        acc.lo[2] - pml,
                    ],
                    n: acc.n,
                    ex: acc.ex.iter().map(|c| c * dt).collect(),
                    ey: acc.ey.iter().map(|c| c * dt).collect(),
                    ez: acc.ez.iter().map(|c| c * dt).collect(),
                }),
            })
            .collect();
        RunResult {
            monitors,
            steps,
            dt,
            cells: [self.cnx, self.cny, self.cnz],
            source: self.source,
        }
    }
}

fn run_planes<F>(arr: &mut [f64], plane: usize, parallel: bool, body: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if parallel {
        arr.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(k, p)| body(k, p));
    } else {
        for (k, p) in arr.chunks_mut(plane).enumerate() {
            body(k, p);
        }
    }
}

/// Run a simulation to completion (shutoff, max_steps, or instability).
pub fn run(
    config: &SimulationConfig,
    source: &DipoleSource,
    monitors: &[MonitorSpec],
) -> Result<RunResult, FdtdError> {
    run_with_trace(config, source, monitors, 0).map(|(r, _)| r)
}

/// As `run`, but also returns the interior energy sampled every
/// `trace_interval` steps (0 disables tracing).
pub fn run_with_trace(
    config: &SimulationConfig,
    source: &DipoleSource,
    monitors: &[MonitorSpec],
    trace_interval: usize,
) -> Result<(RunResult, Vec<f64>), FdtdError> {
    let mut eng = Engine::new(config, source, monitors)?;
    let off_time = source.off_time();
    let mut peak = 0.0f64;
    let mut post_off_reference: Option<f64> = None;
    let mut trace = Vec::new();
    let mut steps_taken = config.max_steps;

    for n in 0..config.max_steps {
        eng.update_j();
        eng.update_h();
        let t_h = (n as f64 + 0.5) * eng.dt;
        eng.accumulate_h(t_h);
        eng.update_e(t_h);
        let t_e = (n as f64 + 1.0) * eng.dt;
        eng.accumulate_e(t_e);

        let check = (trace_interval > 0 && (n + 1) % trace_interval == 0)
            || (n + 1) % ENERGY_CHECK_INTERVAL == 0;
        if check {
            let u = eng.interior_energy();
            if trace_interval > 0 && (n + 1) % trace_interval == 0 {
                trace.push(u);
            }
            if !u.is_finite() {
                return Err(FdtdError::Instability {
                    step: n + 1,
                    factor: BLOWUP_FACTOR,
                });
            }
            peak = peak.max(u);
            if t_e > off_time {
                let reference = *post_off_reference.get_or_insert(peak.max(f64::MIN_POSITIVE));
                if u > BLOWUP_FACTOR * reference {
                    return Err(FdtdError::Instability {
                        step: n + 1,
                        factor: BLOWUP_FACTOR,
                    });
                }
                if u < config.shutoff_fraction * peak {
                    steps_taken = n + 1;
                    break;
                }
            }
        }
    }
    Ok((eng.finalize(steps_taken), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::omega_from_lambda_nm;
    use crate::materials::MaterialGrid;
    use std::sync::OnceLock;

    fn vacuum_grid(n: usize, dx: f64) -> MaterialGrid {
        MaterialGrid::homogeneous(dx, n, n, n, PermittivityModel::vacuum())
    }

    fn band_freqs() -> Vec<f64> {
        vec![
            omega_from_lambda_nm(650.0),
            omega_from_lambda_nm(700.0),
            omega_from_lambda_nm(800.0),
        ]
    }

    fn vacuum_config(n: usize, dx: f64) -> SimulationConfig {
        SimulationConfig {
            grid: vacuum_grid(n, dx),
            courant_factor: 0.5 / 3f64.sqrt(),
            max_steps: 4000,
            shutoff_fraction: 1e-6,
            pml_cells: 8,
        }
    }

    fn vacuum_result() -> &'static RunResult {
        static CELL: OnceLock<RunResult> = OnceLock::new();
        CELL.get_or_init(|| {
            let dx = 20e-9;
            let cfg = vacuum_config(26, dx);
            let src = DipoleSource::in_plane_at([0.0, 0.0, 0.0]);
            let monitors = vec![
                MonitorSpec::FluxBox {
                    center: [0.0; 3],
                    half: [80e-9; 3],
                    freqs: band_freqs(),
                },
                MonitorSpec::FluxBox {
                    center: [0.0; 3],
                    half: [160e-9; 3],
                    freqs: band_freqs(),
                },
                // Off-center box that does not enclose the source.
                MonitorSpec::FluxBox {
                    center: [180e-9, 180e-9, 0.0],
                    half: [60e-9; 3],
                    freqs: band_freqs(),
                },
            ];
            run(&cfg, &src, &monitors).expect("vacuum run")
        })
    }

    #[test]
    fn zero_amplitude_source_gives_zero_flux() {
        let cfg = SimulationConfig {
            max_steps: 60,
            ..vacuum_config(20, 20e-9)
        };
        let mut src = DipoleSource::in_plane_at([0.0, 0.0, 0.0]);
        src.amplitude = 0.0;
        let monitors = vec![MonitorSpec::FluxBox {
            center: [0.0; 3],
            half: [60e-9; 3],
            freqs: band_freqs(),
        }];
        let res = run(&cfg, &src, &monitors).unwrap();
        let flux = res.monitors[0].as_flux().unwrap();
        for fi in 0..flux.freqs.len() {
            assert_eq!(flux.flux_at(fi), 0.0);
        }
    }

    #[test]
    fn vacuum_dipole_flux_positive_and_conserved() {
        let res = vacuum_result();
        let small = res.monitors[0].as_flux().unwrap();
        let large = res.monitors[1].as_flux().unwrap();
        for fi in 0..small.freqs.len() {
            let ps = small.flux_at(fi);
            let pl = large.flux_at(fi);
            assert!(ps > 0.0, "small box flux must be positive, got {ps}");
            assert!(pl > 0.0);
            let rel = (ps - pl).abs() / pl;
            assert!(rel < 0.02, "nested boxes disagree by {:.2}%", rel * 100.0);
        }
    }

    #[test]
    fn empty_box_flux_is_small() {
        let res = vacuum_result();
        let with_source = res.monitors[0].as_flux().unwrap();
        let empty = res.monitors[2].as_flux().unwrap();
        for fi in 0..empty.freqs.len() {
            assert!(empty.flux_at(fi).abs() < 1e-3 * with_source.flux_at(fi));
        }
    }

    #[test]
    fn reversed_faces_negate_flux_exactly() {
        let res = vacuum_result();
        let flux = res.monitors[0].as_flux().unwrap();
        let rev = flux.reversed();
        for fi in 0..flux.freqs.len() {
            assert_eq!(flux.flux_at(fi), -rev.flux_at(fi));
        }
    }

    #[test]
    fn closed_box_flux_lookup() {
        let res = vacuum_result();
        let flux = res.monitors[0].as_flux().unwrap();
        let f = omega_from_lambda_nm(700.0);
        let p = closed_box_flux(flux, f).unwrap();
        assert!(p > 0.0);
        assert!(closed_box_flux(flux, 1.0e15).is_err());
    }

    #[test]
    fn vacuum_power_matches_analytic_dipole() {
        // P = omega^2 |J dx^3|^2 / (12 pi eps0 c^3) for a point current
        // element J dx^3 radiating in vacuum.
        let res = vacuum_result();
        let flux = res.monitors[1].as_flux().unwrap();
        let dx = 20e-9;
        for (fi, &f) in flux.freqs.iter().enumerate() {
            let s = res.source_spectrum(f).norm();
            let moment = s * dx * dx * dx;
            let p_th = f * f * moment * moment / (12.0 * std::f64::consts::PI * EPS0 * C0.powi(3));
            let p = flux.flux_at(fi);
            let rel = (p - p_th).abs() / p_th;
            assert!(
                rel < 0.05,
                "fdtd {p:.3e} vs analytic {p_th:.3e} ({:.1}% off) at {f:.3e}",
                rel * 100.0
            );
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = SimulationConfig {
            max_steps: 150,
            ..vacuum_config(18, 20e-9)
        };
        let src = DipoleSource::in_plane_at([0.0, 0.0, 0.0]);
        let monitors = vec![MonitorSpec::FluxBox {
            center: [0.0; 3],
            half: [60e-9; 3],
            freqs: band_freqs(),
        }];
        let a = run(&cfg, &src, &monitors).unwrap();
        let b = run(&cfg, &src, &monitors).unwrap();
        let fa = a.monitors[0].as_flux().unwrap();
        let fb = b.monitors[0].as_flux().unwrap();
        for (x, y) in fa.faces.iter().zip(fb.faces.iter()) {
            assert_eq!(x.e1, y.e1);
            assert_eq!(x.h2, y.h2);
        }
    }

    #[test]
    fn energy_non_increasing_after_turnoff() {
        let cfg = SimulationConfig {
            max_steps: 1500,
            ..vacuum_config(18, 20e-9)
        };
        let src = DipoleSource::in_plane_at([0.0, 0.0, 0.0]);
        let (_, trace) = run_with_trace(&cfg, &src, &[], 1).unwrap();
        let off = src.off_time();
        let dt = cfg.courant_factor * 20e-9 / C0;
        let off_step = (off / dt).ceil() as usize;
        let mut prev = f64::INFINITY;
        for (i, &u) in trace.iter().enumerate() {
            if i > off_step {
                assert!(
                    u <= prev * (1.0 + 1e-6),
                    "energy grew at step {i}: {prev} -> {u}"
                );
                prev = u;
            } else {
                prev = u;
            }
        }
    }

    #[test]
    fn instability_reported_with_step() {
        // Unphysically large plasma frequency at this resolution violates
        // the dispersive update's stability bound.
        let n = 16;
        let dx = 20e-9;
        let grid = MaterialGrid::homogeneous(
            dx,
            n,
            n,
            n,
            PermittivityModel::Drude {
                eps_inf: 1.0,
                plasma_freq: 4.0e17,
                damping: 0.0,
            },
        );
        let cfg = SimulationConfig {
            grid,
            courant_factor: 0.5,
            max_steps: 3000,
            shutoff_fraction: 1e-6,
            pml_cells: 8,
        };
        let src = DipoleSource::in_plane_at([0.0, 0.0, 0.0]);
        match run(&cfg, &src, &[]) {
            Err(FdtdError::Instability { step, .. }) => assert!(step > 0),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn dipole_in_pml_rejected() {
        let cfg = vacuum_config(18, 20e-9);
        let src = DipoleSource::in_plane_at([170e-9, 0.0, 0.0]);
        match run(&cfg, &src, &[]) {
            Err(FdtdError::DipoleInPml { .. }) => {}
            other => panic!("expected DipoleInPml, got {other:?}"),
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = vacuum_config(16, 20e-9);
        cfg.courant_factor = 0.6;
        assert!(matches!(
            run(&cfg, &DipoleSource::in_plane_at([0.0; 3]), &[]),
            Err(FdtdError::Config(_))
        ));
        let mut cfg = vacuum_config(16, 20e-9);
        cfg.pml_cells = 4;
        assert!(run(&cfg, &DipoleSource::in_plane_at([0.0; 3]), &[]).is_err());
        let mut cfg = vacuum_config(16, 20e-9);
        cfg.shutoff_fraction = 0.0;
        assert!(run(&cfg, &DipoleSource::in_plane_at([0.0; 3]), &[]).is_err());
        let mut src = DipoleSource::in_plane_at([0.0; 3]);
        src.orientation = [1.0, 1.0, 0.0];
        assert!(run(&vacuum_config(16, 20e-9), &src, &[]).is_err());
    }
}
