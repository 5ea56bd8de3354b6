//! Derived quantities on top of the FDTD engine: spontaneous-emission
//! enhancement spectra, parameter sweeps, quenching factors, mode volume,
//! and collection efficiency.
//!
//! Enhancement is the ratio of the power a dipole delivers inside the
//! structure to the power the identical dipole delivers in a homogeneous
//! reference medium (bulk substrate by default), both measured with the
//! same closed-box flux monitor around the source.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{lambda_nm_from_omega, omega_from_lambda_nm, C0, NV_BAND_NM};
use crate::fdtd::{
    run, DipoleSource, FdtdError, FluxData, MonitorSpec, RunResult, SimulationConfig,
};
use crate::materials::{
    rasterize_with_extent, DeviceGeometry, DeviceVariant, MaterialGrid, PermittivityModel,
    RasterizeOptions,
};

#[derive(Debug, Error)]
pub enum PurcellError {
    #[error(transparent)]
    Fdtd(#[from] FdtdError),
    #[error(transparent)]
    Material(#[from] crate::materials::MaterialError),
    #[error("invalid dipole pose: {0}")]
    BadPose(String),
    #[error("reference power non-positive at {lambda_nm:.1} nm")]
    BadReference { lambda_nm: f64 },
    #[error("mode profile does not cover the post region: {0}")]
    Coverage(String),
    #[error("{0}")]
    BadInput(String),
}

/// Numerical controls for device runs. `wavelengths_nm` defines the flux
/// sampling grid; `reference_index` overrides the homogeneous reference
/// medium (substrate index when None).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSettings {
    pub cell_size: f64,
    pub padding: f64,
    pub pml_cells: usize,
    pub courant_factor: f64,
    pub shutoff_fraction: f64,
    pub max_steps: usize,
    pub wavelengths_nm: Vec<f64>,
    pub silver: PermittivityModel,
    pub averaging: bool,
    pub reference_index: Option<f64>,
    pub min_lateral_halfwidth: Option<f64>,
}

pub fn wavelength_grid(lo_nm: f64, hi_nm: f64, step_nm: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut w = lo_nm;
    while w <= hi_nm + 1e-9 {
        v.push(w);
        w += step_nm;
    }
    v
}

impl SolverSettings {
    /// CI preset: 10 nm cells, trimmed padding, relaxed Courant factor.
    pub fn coarse() -> Self {
        SolverSettings {
            cell_size: 10e-9,
            padding: 200e-9,
            pml_cells: 10,
            courant_factor: 0.9 / 3f64.sqrt(),
            shutoff_fraction: 1e-5,
            max_steps: 6000,
            wavelengths_nm: wavelength_grid(600.0, 850.0, 10.0),
            silver: PermittivityModel::silver_default(),
            averaging: false,
            reference_index: None,
            min_lateral_halfwidth: None,
        }
    }

    /// Production preset: 5 nm cells, 300 nm padding, conservative Courant.
    pub fn full() -> Self {
        SolverSettings {
            cell_size: 5e-9,
            padding: 300e-9,
            pml_cells: 12,
            courant_factor: 0.5 / 3f64.sqrt(),
            shutoff_fraction: 1e-5,
            max_steps: 40000,
            wavelengths_nm: wavelength_grid(600.0, 850.0, 5.0),
            silver: PermittivityModel::silver_default(),
            averaging: false,
            reference_index: None,
            min_lateral_halfwidth: None,
        }
    }

    pub fn freqs(&self) -> Vec<f64> {
        self.wavelengths_nm
            .iter()
            .map(|&w| omega_from_lambda_nm(w))
            .collect()
    }

    fn raster_opts(&self) -> RasterizeOptions {
        RasterizeOptions {
            silver: self.silver.clone(),
            averaging: self.averaging,
        }
    }

    fn sim_config(&self, grid: MaterialGrid) -> SimulationConfig {
        SimulationConfig {
            grid,
            courant_factor: self.courant_factor,
            max_steps: self.max_steps,
            shutoff_fraction: self.shutoff_fraction,
            pml_cells: self.pml_cells,
        }
    }
}

/// Dipole placement and orientation relative to the post. `polar_deg` is
/// measured from the transverse plane: 0 is in-plane, 90 along the post
/// axis. Angles may be negative (tilt below the plane).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DipolePose {
    pub depth_below_top: f64,
    pub radial_offset: f64,
    pub polar_deg: f64,
    pub azimuth_deg: f64,
}

impl DipolePose {
    pub fn in_plane_at_depth(depth: f64) -> Self {
        DipolePose {
            depth_below_top: depth,
            radial_offset: 0.0,
            polar_deg: 0.0,
            azimuth_deg: 0.0,
        }
    }

    pub fn orientation(&self) -> [f64; 3] {
        let p = self.polar_deg.to_radians();
        let a = self.azimuth_deg.to_radians();
        [p.cos() * a.cos(), p.cos() * a.sin(), p.sin()]
    }

    pub fn position(&self, geom: &DeviceGeometry) -> [f64; 3] {
        [
            self.radial_offset,
            0.0,
            geom.post_height - self.depth_below_top,
        ]
    }
}

/// Wavelength-resolved SE-rate enhancement with provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhancementSpectrum {
    pub wavelengths_nm: Vec<f64>,
    pub enhancement: Vec<f64>,
    /// Raw dipole powers, structure and reference runs (W per unit amplitude^2).
    pub power_structure: Vec<f64>,
    pub power_reference: Vec<f64>,
    pub geometry_fingerprint: String,
    pub pose: DipolePose,
    pub cell_size: f64,
}

impl EnhancementSpectrum {
    /// Plain average of F over [lo, hi] nm.
    pub fn band_average(&self, lo_nm: f64, hi_nm: f64) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (w, f) in self.wavelengths_nm.iter().zip(&self.enhancement) {
            if *w >= lo_nm - 1e-9 && *w <= hi_nm + 1e-9 {
                sum += f;
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }

    pub fn nv_band_average(&self) -> f64 {
        self.band_average(NV_BAND_NM.0, NV_BAND_NM.1)
    }

    /// Peak (lambda_nm, F) with three-point parabolic refinement.
    pub fn peak(&self) -> (f64, f64) {
        peak_of(&self.wavelengths_nm, &self.enhancement)
    }
}

fn peak_of(x: &[f64], y: &[f64]) -> (f64, f64) {
    let m = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if m == 0 || m + 1 >= y.len() {
        return (x[m], y[m]);
    }
    let (x0, x1, x2) = (x[m - 1], x[m], x[m + 1]);
    let (y0, y1, y2) = (y[m - 1], y[m], y[m + 1]);
    let curv = y0 - 2.0 * y1 + y2;
    if curv.abs() < 1e-300 {
        return (x1, y1);
    }
    let h = x1 - x0;
    let delta = 0.5 * (y0 - y2) / curv;
    let _ = x2;
    (x1 + delta * h, y1 - 0.25 * (y0 - y2) * delta)
}

/// Sweep over one parameter with per-value spectra and scalar summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub peak_enhancement: f64,
    pub peak_lambda_nm: f64,
    pub band_average: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: String,
    pub values: Vec<f64>,
    pub spectra: Vec<EnhancementSpectrum>,
    pub summaries: Vec<SweepSummary>,
}

impl SweepResult {
    fn new(param: &str) -> Self {
        SweepResult {
            param: param.into(),
            values: Vec::new(),
            spectra: Vec::new(),
            summaries: Vec::new(),
        }
    }

    fn push(&mut self, value: f64, spectrum: EnhancementSpectrum) {
        let (pl, pf) = spectrum.peak();
        self.summaries.push(SweepSummary {
            value,
            peak_enhancement: pf,
            peak_lambda_nm: pl,
            band_average: spectrum.nv_band_average(),
        });
        self.values.push(value);
        self.spectra.push(spectrum);
    }

    pub fn min_max_band_average(&self) -> (f64, f64) {
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for s in &self.summaries {
            lo = lo.min(s.band_average);
            hi = hi.max(s.band_average);
        }
        (lo, hi)
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn geometry_fingerprint(geom: &DeviceGeometry, settings: &SolverSettings) -> String {
    let blob =
        serde_json::to_string(&(geom, settings.cell_size, &settings.silver)).unwrap_or_default();
    format!("{:016x}", fnv64(blob.as_bytes()))
}

/// Source box snapped to cell planes, fully inside lossless dielectric.
fn source_box(
    geom: &DeviceGeometry,
    pose: &DipolePose,
    dx: f64,
) -> Result<MonitorSpec, PurcellError> {
    let z_dip = geom.post_height - pose.depth_below_top;
    if pose.depth_below_top <= 0.0 || z_dip <= 0.0 {
        return Err(PurcellError::BadPose(format!(
            "dipole depth {} outside post of height {}",
            pose.depth_below_top, geom.post_height
        )));
    }
    // Top face: at least one cell above the dipole, at least one cell
    // below the post top (metal cap).
    let kh = (geom.post_height / dx).round() as i64;
    let kd = (z_dip / dx).round() as i64;
    let k_top = (kd + 2).min(kh - 1);
    if k_top <= kd {
        return Err(PurcellError::BadPose(format!(
            "dipole too close to the post top facet for cell size {dx}"
        )));
    }
    let k_bot = kd - 8;
    let z_hi = k_top as f64 * dx;
    let z_lo = k_bot as f64 * dx;
    let r_top_of_box = geom.radius_at(z_hi);
    let half_cells = ((r_top_of_box - pose.radial_offset.abs()) / dx - 1.2).floor();
    if half_cells < 2.0 {
        return Err(PurcellError::BadPose(
            "post too narrow for a source flux box at this cell size".into(),
        ));
    }
    let half_xy = half_cells * dx;
    Ok(MonitorSpec::FluxBox {
        center: [pose.radial_offset, 0.0, (z_lo + z_hi) / 2.0],
        half: [half_xy, half_xy, (z_hi - z_lo) / 2.0],
        freqs: Vec::new(), // filled by caller
    })
}

fn with_freqs(spec: MonitorSpec, freqs: Vec<f64>) -> MonitorSpec {
    match spec {
        MonitorSpec::FluxBox { center, half, .. } => MonitorSpec::FluxBox {
            center,
            half,
            freqs,
        },
        other => other,
    }
}

fn reference_geometry(geom: &DeviceGeometry, settings: &SolverSettings) -> DeviceGeometry {
    let mut g = geom.with_variant(DeviceVariant::Homogeneous);
    if let Some(n) = settings.reference_index {
        g.substrate_index = n;
    }
    g
}

/// One structure run plus its homogeneous reference; returns the spectrum
/// and the structure run (source box is monitor 0, extras follow).
pub fn enhancement_with_monitors(
    geom: &DeviceGeometry,
    pose: &DipolePose,
    settings: &SolverSettings,
    extra_monitors: &[MonitorSpec],
) -> Result<(EnhancementSpectrum, RunResult), PurcellError> {
    let freqs = settings.freqs();
    let src_box = with_freqs(source_box(geom, pose, settings.cell_size)?, freqs.clone());
    let source =
        DipoleSource::in_plane_at(pose.position(geom)).with_orientation(pose.orientation());

    let grid_s = rasterize_with_extent(
        geom,
        settings.cell_size,
        settings.padding,
        settings.min_lateral_halfwidth,
        &settings.raster_opts(),
    )?;
    let mut monitors = vec![src_box.clone()];
    monitors.extend_from_slice(extra_monitors);
    let run_s = run(&settings.sim_config(grid_s), &source, &monitors)?;

    let geom_r = reference_geometry(geom, settings);
    let grid_r = rasterize_with_extent(
        &geom_r,
        settings.cell_size,
        settings.padding,
        settings.min_lateral_halfwidth,
        &settings.raster_opts(),
    )?;
    let run_r = run(&settings.sim_config(grid_r), &source, &[src_box])?;

    let spectrum = spectrum_from_runs(geom, pose, settings, &run_s, &run_r)?;
    Ok((spectrum, run_s))
}

fn flux_spectrum(result: &RunResult, monitor_index: usize) -> Vec<f64> {
    let flux = result.monitors[monitor_index]
        .as_flux()
        .expect("monitor is a flux box");
    (0..flux.freqs.len()).map(|fi| flux.flux_at(fi)).collect()
}

fn spectrum_from_runs(
    geom: &DeviceGeometry,
    pose: &DipolePose,
    settings: &SolverSettings,
    run_s: &RunResult,
    run_r: &RunResult,
) -> Result<EnhancementSpectrum, PurcellError> {
    let ps = flux_spectrum(run_s, 0);
    let pr = flux_spectrum(run_r, 0);
    let mut enhancement = Vec::with_capacity(ps.len());
    for (i, (&s, &r)) in ps.iter().zip(&pr).enumerate() {
        if !(r > 0.0) {
            return Err(PurcellError::BadReference {
                lambda_nm: settings.wavelengths_nm[i],
            });
        }
        enhancement.push(s / r);
    }
    Ok(EnhancementSpectrum {
        wavelengths_nm: settings.wavelengths_nm.clone(),
        enhancement,
        power_structure: ps,
        power_reference: pr,
        geometry_fingerprint: geometry_fingerprint(geom, settings),
        pose: *pose,
        cell_size: settings.cell_size,
    })
}

/// F(lambda) for one geometry and dipole pose.
pub fn enhancement_spectrum(
    geom: &DeviceGeometry,
    pose: &DipolePose,
    settings: &SolverSettings,
) -> Result<EnhancementSpectrum, PurcellError> {
    enhancement_with_monitors(geom, pose, settings, &[]).map(|(s, _)| s)
}

/// Band-averaged enhancement of a bare post; < 1 signals quenching.
pub fn quenching_factor(
    geom: &DeviceGeometry,
    pose: &DipolePose,
    settings: &SolverSettings,
) -> Result<f64, PurcellError> {
    if geom.variant != DeviceVariant::BarePost {
        return Err(PurcellError::BadInput(format!(
            "quenching_factor requires the bare_post variant, got {:?}",
            geom.variant
        )));
    }
    let s = enhancement_spectrum(geom, pose, settings)?;
    Ok(s.nv_band_average())
}

/// Radius sweep sharing one domain (sized for the largest radius) and one
/// homogeneous reference run across all values.
pub fn radius_sweep(
    base: &DeviceGeometry,
    radii: &[f64],
    pose: &DipolePose,
    settings: &SolverSettings,
) -> Result<SweepResult, PurcellError> {
    if radii.is_empty() {
        return Err(PurcellError::BadInput("radius sweep needs values".into()));
    }
    let taper = base.post_radius_bottom - base.post_radius_top;
    let r_max = radii.iter().cloned().fold(f64::MIN, f64::max);
    let mut settings = settings.clone();
    settings.min_lateral_halfwidth = Some(r_max + taper + settings.padding);

    let freqs = settings.freqs();
    let source_geom = |r: f64| DeviceGeometry {
        post_radius_top: r,
        post_radius_bottom: r + taper,
        ..*base
    };

    // One source box sized for the narrowest post fits every radius.
    let r_min = radii.iter().cloned().fold(f64::MAX, f64::min);
    let box_spec = with_freqs(
        source_box(&source_geom(r_min), pose, settings.cell_size)?,
        freqs.clone(),
    );
    let source =
        DipoleSource::in_plane_at(pose.position(base)).with_orientation(pose.orientation());

    let geom_r = reference_geometry(base, &settings);
    let grid_r = rasterize_with_extent(
        &geom_r,
        settings.cell_size,
        settings.padding,
        settings.min_lateral_halfwidth,
        &settings.raster_opts(),
    )?;
    let run_r = run(&settings.sim_config(grid_r), &source, &[box_spec.clone()])?;

    let mut sweep = SweepResult::new("radius_nm");
    for &r in radii {
        let geom = source_geom(r);
        let grid = rasterize_with_extent(
            &geom,
            settings.cell_size,
            settings.padding,
            settings.min_lateral_halfwidth,
            &settings.raster_opts(),
        )?;
        let run_s = run(&settings.sim_config(grid), &source, &[box_spec.clone()])?;
        let spectrum = spectrum_from_runs(&geom, pose, &settings, &run_s, &run_r)?;
        sweep.push(r * 1e9, spectrum);
    }
    Ok(sweep)
}

/// Band-averaged F versus dipole orientation at a fixed depth. Angles in
/// degrees from the transverse plane (0 = in-plane, 90 = axial).
pub fn orientation_sweep(
    geom: &DeviceGeometry,
    depth: f64,
    angles_deg: &[f64],
    settings: &SolverSettings,
) -> Result<SweepResult, PurcellError> {
    if angles_deg.is_empty() {
        return Err(PurcellError::BadInput(
            "orientation sweep needs angles".into(),
        ));
    }
    let mut sweep = SweepResult::new("orientation_deg");
    for &a in angles_deg {
        let pose = DipolePose {
            depth_below_top: depth,
            radial_offset: 0.0,
            polar_deg: a,
            azimuth_deg: 0.0,
        };
        let s = enhancement_spectrum(geom, &pose, settings)?;
        sweep.push(a, s);
    }
    Ok(sweep)
}

/// Band-averaged F versus implantation depth for an in-plane dipole.
pub fn axial_position_sweep(
    geom: &DeviceGeometry,
    depths: &[f64],
    settings: &SolverSettings,
) -> Result<SweepResult, PurcellError> {
    let mut sweep = SweepResult::new("depth_nm");
    for &d in depths {
        if d <= 0.0 || d >= geom.post_height {
            return Err(PurcellError::BadPose(format!(
                "depth {d} outside post (0, {})",
                geom.post_height
            )));
        }
        let pose = DipolePose::in_plane_at_depth(d);
        let s = enhancement_spectrum(geom, &pose, settings)?;
        sweep.push(d * 1e9, s);
    }
    Ok(sweep)
}

/// Scan |E|^2 along the post axis from a mid-height in-plane drive and
/// return (z of the maximum, the (z, |E|^2) profile at the strongest
/// sampled frequency).
pub fn find_axial_field_max(
    geom: &DeviceGeometry,
    settings: &SolverSettings,
) -> Result<(f64, Vec<(f64, f64)>), PurcellError> {
    let dx = settings.cell_size;
    let pose = DipolePose::in_plane_at_depth(geom.post_height / 2.0);
    let source =
        DipoleSource::in_plane_at(pose.position(geom)).with_orientation(pose.orientation());
    let grid = rasterize_with_extent(
        geom,
        dx,
        settings.padding,
        settings.min_lateral_halfwidth,
        &settings.raster_opts(),
    )?;
    let column = MonitorSpec::FieldVolume {
        lo: [-dx, -dx, 2.0 * dx],
        hi: [dx, dx, geom.post_height - 2.0 * dx],
        freqs: settings.freqs(),
    };
    let origin_z = grid.origin[2];
    let res = run(&settings.sim_config(grid), &source, &[column])?;
    let vol = res.monitors[0].as_volume().expect("column monitor");
    let height_sum = |fi: usize, kk: usize| -> f64 {
        let mut u = 0.0;
        for jj in 0..vol.n[1] {
            for ii in 0..vol.n[0] {
                u += vol.e_sq(fi, vol.cell_index(ii, jj, kk));
            }
        }
        u
    };
    let mut best = (0usize, f64::MIN);
    for fi in 0..vol.freqs.len() {
        for kk in 0..vol.n[2] {
            let u = height_sum(fi, kk);
            if u > best.1 {
                best = (fi, u);
            }
        }
    }
    let fi = best.0;
    let profile: Vec<(f64, f64)> = (0..vol.n[2])
        .map(|kk| {
            let z = origin_z + (vol.lo_cell[2] + kk) as f64 * dx + 0.5 * dx;
            (z, height_sum(fi, kk))
        })
        .collect();
    let z_max = profile
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(z, _)| z)
        .unwrap_or(geom.post_height / 2.0);
    Ok((z_max, profile))
}

/// Pose with the dipole at the axial field maximum, in-plane polarized.
pub fn pose_at_field_max(
    geom: &DeviceGeometry,
    settings: &SolverSettings,
) -> Result<DipolePose, PurcellError> {
    let (z, _) = find_axial_field_max(geom, settings)?;
    Ok(DipolePose::in_plane_at_depth(geom.post_height - z))
}

/// Mode volume V = integral(w |E|^2) / max(w |E|^2) over the profile
/// region, in units of (lambda/n)^3 with n the substrate index. The
/// weight w is the dispersive energy density Re d(omega eps)/domega.
pub fn mode_volume(
    vol: &crate::fdtd::VolumeData,
    grid: &MaterialGrid,
    geom: &DeviceGeometry,
    freq_index: usize,
) -> Result<f64, PurcellError> {
    let dx = vol.dx;
    let lo = [
        grid.origin[0] + vol.lo_cell[0] as f64 * dx,
        grid.origin[1] + vol.lo_cell[1] as f64 * dx,
        grid.origin[2] + vol.lo_cell[2] as f64 * dx,
    ];
    let hi = [
        lo[0] + vol.n[0] as f64 * dx,
        lo[1] + vol.n[1] as f64 * dx,
        lo[2] + vol.n[2] as f64 * dx,
    ];
    let r = geom.post_radius_bottom;
    let tol = 0.5 * dx;
    if lo[0] > -r + tol
        || hi[0] < r - tol
        || lo[1] > -r + tol
        || hi[1] < r - tol
        || lo[2] > tol
        || hi[2] < geom.post_height - tol
    {
        return Err(PurcellError::Coverage(format!(
            "profile [{lo:?}..{hi:?}] does not span the post (r {r}, h {})",
            geom.post_height
        )));
    }
    let omega = vol.freqs[freq_index];
    let mut integral = 0.0;
    let mut peak = 0.0f64;
    for kk in 0..vol.n[2] {
        let k = (vol.lo_cell[2] + kk).min(grid.nz - 1);
        for jj in 0..vol.n[1] {
            let j = (vol.lo_cell[1] + jj).min(grid.ny - 1);
            for ii in 0..vol.n[0] {
                let i = (vol.lo_cell[0] + ii).min(grid.nx - 1);
                let id = grid.id_at(i, j, k) as usize;
                let w = grid.materials[id].energy_weight(omega);
                let u = w * vol.e_sq(freq_index, vol.cell_index(ii, jj, kk));
                integral += u;
                peak = peak.max(u);
            }
        }
    }
    if peak <= 0.0 {
        return Err(PurcellError::Coverage(
            "profile holds no field energy".into(),
        ));
    }
    let v_phys = integral * dx * dx * dx / peak;
    let lambda = lambda_nm_from_omega(omega) * 1e-9;
    let unit = (lambda / geom.substrate_index).powi(3);
    Ok(v_phys / unit)
}

/// Fraction of emitted power crossing a substrate-side plane within the
/// collection cone n sin(theta) <= NA, per sampled wavelength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectionResult {
    pub wavelengths_nm: Vec<f64>,
    pub efficiency: Vec<f64>,
    pub downward_total: Vec<f64>,
    pub source_power: Vec<f64>,
    pub near_field_warning: bool,
}

impl CollectionResult {
    pub fn band_average(&self, lo_nm: f64, hi_nm: f64) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for (w, e) in self.wavelengths_nm.iter().zip(&self.efficiency) {
            if *w >= lo_nm - 1e-9 && *w <= hi_nm + 1e-9 {
                s += e;
                n += 1;
            }
        }
        s / n.max(1) as f64
    }
}

/// k-space filter of a plane monitor against the total dipole power.
/// `plane` must be a single z-normal face; its sign selects the
/// collection direction (downward for substrate-side collection).
pub fn collection_efficiency(
    plane: &FluxData,
    source_box: &FluxData,
    na: f64,
) -> Result<CollectionResult, PurcellError> {
    if !(0.0..=1.0).contains(&na) {
        return Err(PurcellError::BadInput(format!(
            "numerical aperture must be in [0, 1], got {na}"
        )));
    }
    let face = plane
        .faces
        .first()
        .ok_or_else(|| PurcellError::BadInput("plane monitor has no face".into()))?;
    if plane.faces.len() != 1 || face.axis != 2 {
        return Err(PurcellError::BadInput(
            "collection plane must be a single z-normal face".into(),
        ));
    }
    let (n0, n1) = (face.n0, face.n1);
    let dx = plane.dx;
    let mut planner = FftPlanner::new();
    let mut wavelengths = Vec::new();
    let mut efficiency = Vec::new();
    let mut downward_total = Vec::new();
    let mut source_power = Vec::new();
    for (fi, &f) in plane.freqs.iter().enumerate() {
        let np = n0 * n1;
        let base = fi * np;
        let fft2 = |planner: &mut FftPlanner<f64>, src: &[Complex64]| -> Vec<Complex64> {
            let mut data = src[base..base + np].to_vec();
            fft_2d(planner, &mut data, n0, n1);
            data
        };
        let exk = fft2(&mut planner, &face.e1);
        let eyk = fft2(&mut planner, &face.e2);
        let hxk = fft2(&mut planner, &face.h1);
        let hyk = fft2(&mut planner, &face.h2);
        let k_na = na * f / C0;
        let mut masked = 0.0;
        let mut total = 0.0;
        for v in 0..n1 {
            let m1 = if v <= n1 / 2 {
                v as f64
            } else {
                v as f64 - n1 as f64
            };
            let ky = 2.0 * std::f64::consts::PI * m1 / (n1 as f64 * dx);
            for u in 0..n0 {
                let m0 = if u <= n0 / 2 {
                    u as f64
                } else {
                    u as f64 - n0 as f64
                };
                let kx = 2.0 * std::f64::consts::PI * m0 / (n0 as f64 * dx);
                let at = v * n0 + u;
                let sz = 0.5 * (exk[at] * hyk[at].conj() - eyk[at] * hxk[at].conj()).re;
                let flux = face.sign * sz * dx * dx / np as f64;
                total += flux;
                if kx * kx + ky * ky <= k_na * k_na {
                    masked += flux;
                }
            }
        }
        let idx = source_box
            .freqs
            .iter()
            .position(|&g| (g - f).abs() <= 1e-6 * f)
            .ok_or(FdtdError::FrequencyNotSampled { freq: f })?;
        let p_src = source_box.flux_at(idx);
        wavelengths.push(lambda_nm_from_omega(f));
        downward_total.push(total);
        source_power.push(p_src);
        efficiency.push(if p_src > 0.0 { masked / p_src } else { 0.0 });
    }
    Ok(CollectionResult {
        wavelengths_nm: wavelengths,
        efficiency,
        downward_total,
        source_power,
        near_field_warning: false,
    })
}

fn fft_2d(planner: &mut FftPlanner<f64>, data: &mut [Complex64], n0: usize, n1: usize) {
    let row_fft = planner.plan_fft_forward(n0);
    for row in data.chunks_exact_mut(n0) {
        row_fft.process(row);
    }
    let mut t = vec![Complex64::new(0.0, 0.0); data.len()];
    for v in 0..n1 {
        for u in 0..n0 {
            t[u * n1 + v] = data[v * n0 + u];
        }
    }
    let col_fft = planner.plan_fft_forward(n1);
    for col in t.chunks_exact_mut(n1) {
        col_fft.process(col);
    }
    for u in 0..n0 {
        for v in 0..n1 {
            data[v * n0 + u] = t[u * n1 + v];
        }
    }
}

/// Full collection run: substrate-side plane plus the source box. Returns
/// one CollectionResult per requested NA from a single simulation.
pub fn collection_run(
    geom: &DeviceGeometry,
    pose: &DipolePose,
    na_values: &[f64],
    plane_depth_below_surface: f64,
    settings: &SolverSettings,
) -> Result<Vec<(f64, CollectionResult)>, PurcellError> {
    let freqs = settings.freqs();
    let src_box = with_freqs(source_box(geom, pose, settings.cell_size)?, freqs.clone());
    let plane = MonitorSpec::FluxPlane {
        axis: 2,
        position: -plane_depth_below_surface,
        margin_cells: 2,
        freqs,
        sign: -1.0,
    };
    let source =
        DipoleSource::in_plane_at(pose.position(geom)).with_orientation(pose.orientation());
    let grid = rasterize_with_extent(
        geom,
        settings.cell_size,
        settings.padding,
        settings.min_lateral_halfwidth,
        &settings.raster_opts(),
    )?;
    let res = run(&settings.sim_config(grid), &source, &[src_box, plane])?;
    let boxd = res.monitors[0].as_flux().expect("source box");
    let planed = res.monitors[1].as_flux().expect("plane");
    let z_dip = geom.post_height - pose.depth_below_top;
    let near = (z_dip + plane_depth_below_surface) < 100e-9;
    let mut out = Vec::new();
    for &na in na_values {
        let mut c = collection_efficiency(planed, boxd, na)?;
        c.near_field_warning = near;
        out.push((na, c));
    }
    Ok(out)
}

/// Volume monitor covering the post and its near field, for mode volume.
pub fn mode_volume_monitor(geom: &DeviceGeometry, margin: f64, freqs: Vec<f64>) -> MonitorSpec {
    let r = geom.post_radius_bottom + margin;
    MonitorSpec::FieldVolume {
        lo: [-r, -r, -margin],
        hi: [r, r, geom.post_height + margin],
        freqs,
    }
}
