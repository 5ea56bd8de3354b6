//! Frequency-dependent permittivity models and rasterization of the
//! device geometry onto a uniform simulation grid.
//!
//! The device is a truncated-cone diamond nanopost standing on a bulk
//! diamond substrate, either bare or embedded in a silver film thick
//! enough to cap the post. Variants select which materials are present;
//! the grid extents are identical across variants so that structure and
//! reference runs share monitors cell-for-cell.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::DIAMOND_INDEX;

/// Material id of air/vacuum cells.
pub const MAT_AIR: u16 = 0;
/// Material id of substrate/post dielectric cells.
pub const MAT_DIAMOND: u16 = 1;
/// Material id of metal-film cells.
pub const MAT_SILVER: u16 = 2;

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("invalid permittivity model: {0}")]
    InvalidModel(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("omega must be positive, got {0}")]
    NonPositiveFrequency(f64),
    #[error("cell_size {cell_size} m too coarse: must be <= post_radius_top/5 = {bound} m")]
    CellTooCoarse { cell_size: f64, bound: f64 },
    #[error("padding {padding} m too small: must be >= 3*cell_size = {bound} m")]
    PaddingTooSmall { padding: f64, bound: f64 },
}

/// Single Lorentz oscillator added on top of a Drude background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzPole {
    /// Oscillator strength (dimensionless permittivity contribution at DC).
    pub strength: f64,
    /// Resonance angular frequency, rad/s.
    pub center_freq: f64,
    /// Linewidth (damping), rad/s.
    pub linewidth: f64,
}

/// Dispersion model, evaluated with the e^{-iωt} convention so that
/// passive media have Im ε ≥ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PermittivityModel {
    Constant {
        eps_inf: f64,
    },
    Drude {
        eps_inf: f64,
        plasma_freq: f64,
        damping: f64,
    },
    DrudeLorentz {
        eps_inf: f64,
        plasma_freq: f64,
        damping: f64,
        poles: Vec<LorentzPole>,
    },
}

impl PermittivityModel {
    /// Non-dispersive dielectric with refractive index `n`.
    pub fn dielectric(n: f64) -> Self {
        PermittivityModel::Constant { eps_inf: n * n }
    }

    pub fn vacuum() -> Self {
        PermittivityModel::Constant { eps_inf: 1.0 }
    }

    pub fn diamond() -> Self {
        Self::dielectric(DIAMOND_INDEX)
    }

    /// Default silver model: Drude fit to tabulated silver over the
    /// 600-800 nm NV emission band. All parameters overridable in config.
    pub fn silver_default() -> Self {
        PermittivityModel::Drude {
            eps_inf: 3.7,
            plasma_freq: 1.39e16,
            damping: 2.7e13,
        }
    }

    pub fn eps_inf(&self) -> f64 {
        match self {
            PermittivityModel::Constant { eps_inf }
            | PermittivityModel::Drude { eps_inf, .. }
            | PermittivityModel::DrudeLorentz { eps_inf, .. } => *eps_inf,
        }
    }

    pub fn is_dispersive(&self) -> bool {
        !matches!(self, PermittivityModel::Constant { .. })
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        match self {
            PermittivityModel::Constant { eps_inf } => {
                if *eps_inf < 1.0 {
                    return Err(MaterialError::InvalidModel(format!(
                        "constant model requires eps_inf >= 1, got {eps_inf}"
                    )));
                }
            }
            PermittivityModel::Drude { damping, .. } => {
                if *damping < 0.0 {
                    return Err(MaterialError::InvalidModel(format!(
                        "damping must be >= 0, got {damping}"
                    )));
                }
            }
            PermittivityModel::DrudeLorentz { damping, poles, .. } => {
                if *damping < 0.0 {
                    return Err(MaterialError::InvalidModel(format!(
                        "damping must be >= 0, got {damping}"
                    )));
                }
                for p in poles {
                    if p.linewidth <= 0.0 {
                        return Err(MaterialError::InvalidModel(format!(
                            "lorentz pole linewidth must be > 0, got {}",
                            p.linewidth
                        )));
                    }
                    if p.strength < 0.0 {
                        return Err(MaterialError::InvalidModel(format!(
                            "lorentz pole strength must be >= 0, got {}",
                            p.strength
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Complex relative permittivity at angular frequency `omega` (rad/s).
    ///
    /// ε(ω) = ε_inf − ωp²/(ω² + iγω) + Σ Δε ω₀²/(ω₀² − ω² − iωΓ)
    pub fn evaluate(&self, omega: f64) -> Result<Complex64, MaterialError> {
        if omega <= 0.0 {
            return Err(MaterialError::NonPositiveFrequency(omega));
        }
        let mut eps = Complex64::new(self.eps_inf(), 0.0);
        match self {
            PermittivityModel::Constant { .. } => {}
            PermittivityModel::Drude {
                plasma_freq,
                damping,
                ..
            } => {
                eps -= drude_term(*plasma_freq, *damping, omega);
            }
            PermittivityModel::DrudeLorentz {
                plasma_freq,
                damping,
                poles,
                ..
            } => {
                eps -= drude_term(*plasma_freq, *damping, omega);
                for p in poles {
                    eps += lorentz_term(p, omega);
                }
            }
        }
        Ok(eps)
    }

    /// Landau energy-density weight Re d(ωε)/dω, used for the mode-volume
    /// integrand so that energy stored in metal kinetic motion is counted.
    /// Reduces to ε for constant dielectrics.
    pub fn energy_weight(&self, omega: f64) -> f64 {
        match self {
            PermittivityModel::Constant { eps_inf } => *eps_inf,
            PermittivityModel::Drude {
                eps_inf,
                plasma_freq,
                ..
            } => eps_inf + plasma_freq * plasma_freq / (omega * omega),
            PermittivityModel::DrudeLorentz {
                eps_inf,
                plasma_freq,
                poles,
                ..
            } => {
                let mut w = eps_inf + plasma_freq * plasma_freq / (omega * omega);
                for p in poles {
                    let d = p.center_freq * p.center_freq - omega * omega;
                    w += p.strength
                        * p.center_freq
                        * p.center_freq
                        * (p.center_freq * p.center_freq + omega * omega)
                        / (d * d + omega * omega * p.linewidth * p.linewidth);
                }
                w
            }
        }
    }
}

fn drude_term(plasma_freq: f64, damping: f64, omega: f64) -> Complex64 {
    let wp2 = plasma_freq * plasma_freq;
    Complex64::new(wp2, 0.0) / Complex64::new(omega * omega, damping * omega)
}

fn lorentz_term(p: &LorentzPole, omega: f64) -> Complex64 {
    let w02 = p.center_freq * p.center_freq;
    Complex64::new(p.strength * w02, 0.0)
        / Complex64::new(w02 - omega * omega, -omega * p.linewidth)
}

/// Top-level evaluation with the precondition check, mirroring the
/// method form.
pub fn evaluate_permittivity(
    model: &PermittivityModel,
    omega: f64,
) -> Result<Complex64, MaterialError> {
    model.evaluate(omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceVariant {
    /// Post embedded in the silver film (film caps the post top).
    SilverCapped,
    /// Post on the substrate with no metal anywhere.
    BarePost,
    /// Uniform substrate material filling the whole domain.
    Homogeneous,
}

/// Parametric device description. Lengths in meters; the post axis is z,
/// the substrate surface (post base) is z = 0, and the substrate fills
/// z < 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceGeometry {
    pub post_radius_top: f64,
    pub post_radius_bottom: f64,
    pub post_height: f64,
    pub silver_thickness: f64,
    pub emitter_depth_below_top: f64,
    pub substrate_index: f64,
    pub variant: DeviceVariant,
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        // r_bottom = r_top + 10 nm reflects the truncated cone of finished
        // devices; set them equal for the idealized cylinder.
        DeviceGeometry {
            post_radius_top: 50e-9,
            post_radius_bottom: 60e-9,
            post_height: 180e-9,
            silver_thickness: 500e-9,
            emitter_depth_below_top: 20e-9,
            substrate_index: DIAMOND_INDEX,
            variant: DeviceVariant::SilverCapped,
        }
    }
}

impl DeviceGeometry {
    /// Idealized cylinder of radius `r`, the shape used for the radius
    /// sweep spectra.
    pub fn cylinder(r: f64) -> Self {
        DeviceGeometry {
            post_radius_top: r,
            post_radius_bottom: r,
            ..Default::default()
        }
    }

    pub fn with_variant(mut self, variant: DeviceVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let lengths = [
            ("post_radius_top", self.post_radius_top),
            ("post_radius_bottom", self.post_radius_bottom),
            ("post_height", self.post_height),
            ("silver_thickness", self.silver_thickness),
            ("emitter_depth_below_top", self.emitter_depth_below_top),
        ];
        for (name, v) in lengths {
            if !(v > 0.0) {
                return Err(MaterialError::InvalidGeometry(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if self.emitter_depth_below_top >= self.post_height {
            return Err(MaterialError::InvalidGeometry(format!(
                "emitter_depth_below_top {} must be < post_height {}",
                self.emitter_depth_below_top, self.post_height
            )));
        }
        if self.post_radius_top > self.post_radius_bottom {
            return Err(MaterialError::InvalidGeometry(format!(
                "post_radius_top {} must be <= post_radius_bottom {} (cone wider at base)",
                self.post_radius_top, self.post_radius_bottom
            )));
        }
        if !(self.substrate_index >= 1.0) {
            return Err(MaterialError::InvalidGeometry(format!(
                "substrate_index must be >= 1, got {}",
                self.substrate_index
            )));
        }
        Ok(())
    }

    /// Post cross-section radius at height z above the base (linear taper).
    pub fn radius_at(&self, z: f64) -> f64 {
        let t = (z / self.post_height).clamp(0.0, 1.0);
        self.post_radius_bottom + (self.post_radius_top - self.post_radius_bottom) * t
    }

    /// Emitter z position implied by the implantation depth.
    pub fn emitter_z(&self) -> f64 {
        self.post_height - self.emitter_depth_below_top
    }
}

/// Rasterization options; `silver` is the metal dispersion model and
/// `averaging` enables volume-fraction averaging of dielectric boundary
/// cells (metal boundaries stay staircased).
#[derive(Debug, Clone)]
pub struct RasterizeOptions {
    pub silver: PermittivityModel,
    pub averaging: bool,
}

impl Default for RasterizeOptions {
    fn default() -> Self {
        RasterizeOptions {
            silver: PermittivityModel::silver_default(),
            averaging: false,
        }
    }
}

/// Uniform-grid material map. `ids[idx(i,j,k)]` indexes into `materials`.
/// The grid covers only the physical interior; absorbing layers are added
/// by the solver outside these extents.
#[derive(Debug, Clone)]
pub struct MaterialGrid {
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Physical position of the corner of cell (0,0,0), meters.
    pub origin: [f64; 3],
    pub ids: Vec<u16>,
    pub materials: Vec<PermittivityModel>,
}

impl MaterialGrid {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    pub fn id_at(&self, i: usize, j: usize, k: usize) -> u16 {
        self.ids[self.idx(i, j, k)]
    }

    /// Physical coordinates of the center of cell (i,j,k).
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell_size,
            self.origin[1] + (j as f64 + 0.5) * self.cell_size,
            self.origin[2] + (k as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Count of cells carrying a given material id.
    pub fn count_id(&self, id: u16) -> usize {
        self.ids.iter().filter(|&&m| m == id).count()
    }

    /// Homogeneous grid of the given extents filled with one material.
    pub fn homogeneous(
        cell_size: f64,
        nx: usize,
        ny: usize,
        nz: usize,
        material: PermittivityModel,
    ) -> Self {
        let half_x = nx as f64 * cell_size / 2.0;
        let half_y = ny as f64 * cell_size / 2.0;
        let half_z = nz as f64 * cell_size / 2.0;
        MaterialGrid {
            cell_size,
            nx,
            ny,
            nz,
            origin: [-half_x, -half_y, -half_z],
            ids: vec![0; nx * ny * nz],
            materials: vec![material],
        }
    }
}

fn material_at(geom: &DeviceGeometry, x: f64, y: f64, z: f64) -> u16 {
    if geom.variant == DeviceVariant::Homogeneous {
        return MAT_DIAMOND;
    }
    if z < 0.0 {
        return MAT_DIAMOND;
    }
    let r = (x * x + y * y).sqrt();
    if z < geom.post_height && r <= geom.radius_at(z) {
        return MAT_DIAMOND;
    }
    if geom.variant == DeviceVariant::SilverCapped && z < geom.silver_thickness {
        return MAT_SILVER;
    }
    MAT_AIR
}

/// Rasterize the device onto a grid of the given cell size. Extents are
/// a deterministic function of (geometry, cell_size, padding) and do not
/// depend on the variant. `min_lateral_halfwidth` optionally enlarges the
/// lateral extent so sweeps over radius share one domain.
pub fn rasterize(
    geom: &DeviceGeometry,
    cell_size: f64,
    padding: f64,
    opts: &RasterizeOptions,
) -> Result<MaterialGrid, MaterialError> {
    rasterize_with_extent(geom, cell_size, padding, None, opts)
}

pub fn rasterize_with_extent(
    geom: &DeviceGeometry,
    cell_size: f64,
    padding: f64,
    min_lateral_halfwidth: Option<f64>,
    opts: &RasterizeOptions,
) -> Result<MaterialGrid, MaterialError> {
    geom.validate()?;
    opts.silver.validate()?;
    let bound = geom.post_radius_top / 5.0;
    if cell_size > bound {
        return Err(MaterialError::CellTooCoarse { cell_size, bound });
    }
    let pad_bound = 3.0 * cell_size;
    if padding < pad_bound {
        return Err(MaterialError::PaddingTooSmall {
            padding,
            bound: pad_bound,
        });
    }

    let mut half_lx = geom.post_radius_bottom + padding;
    if let Some(m) = min_lateral_halfwidth {
        half_lx = half_lx.max(m);
    }
    let half_cells = (half_lx / cell_size).ceil() as usize;
    let nx = 2 * half_cells;
    let ny = nx;
    let top = geom.post_height.max(geom.silver_thickness);
    let n_below = (padding / cell_size).ceil() as usize;
    let n_above = ((top + padding) / cell_size).ceil() as usize;
    let nz = n_below + n_above;
    let origin = [
        -(half_cells as f64) * cell_size,
        -(half_cells as f64) * cell_size,
        -(n_below as f64) * cell_size,
    ];

    let materials = vec![
        PermittivityModel::vacuum(),
        PermittivityModel::dielectric(geom.substrate_index),
        opts.silver.clone(),
    ];

    let mut grid = MaterialGrid {
        cell_size,
        nx,
        ny,
        nz,
        origin,
        ids: vec![0; nx * ny * nz],
        materials,
    };

    let mut mixed: Vec<(u64, u16)> = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let [x, y, z] = grid.cell_center(i, j, k);
                let id = if opts.averaging {
                    averaged_cell(geom, x, y, z, cell_size, &mut grid.materials, &mut mixed)
                } else {
                    material_at(geom, x, y, z)
                };
                let at = grid.idx(i, j, k);
                grid.ids[at] = id;
            }
        }
    }
    Ok(grid)
}

/// Volume-fraction averaging over a 3x3x3 subsample. Cells touching metal
/// snap to the majority material; mixed dielectric cells get a quantized
/// averaged permittivity appended to the material table.
fn averaged_cell(
    geom: &DeviceGeometry,
    x: f64,
    y: f64,
    z: f64,
    cell_size: f64,
    materials: &mut Vec<PermittivityModel>,
    mixed: &mut Vec<(u64, u16)>,
) -> u16 {
    const N: i32 = 3;
    let mut counts = [0usize; 3];
    for a in 0..N {
        for b in 0..N {
            for c in 0..N {
                let fx = (a as f64 + 0.5) / N as f64 - 0.5;
                let fy = (b as f64 + 0.5) / N as f64 - 0.5;
                let fz = (c as f64 + 0.5) / N as f64 - 0.5;
                let id = material_at(
                    geom,
                    x + fx * cell_size,
                    y + fy * cell_size,
                    z + fz * cell_size,
                );
                counts[id as usize] += 1;
            }
        }
    }
    let total = (N * N * N) as usize;
    if counts[MAT_SILVER as usize] > 0 {
        // No permittivity averaging across a metal boundary.
        if counts[MAT_SILVER as usize] * 2 >= total {
            return MAT_SILVER;
        }
        return if counts[MAT_DIAMOND as usize] >= counts[MAT_AIR as usize] {
            MAT_DIAMOND
        } else {
            MAT_AIR
        };
    }
    if counts[MAT_DIAMOND as usize] == total {
        return MAT_DIAMOND;
    }
    if counts[MAT_AIR as usize] == total {
        return MAT_AIR;
    }
    let eps_d = geom.substrate_index * geom.substrate_index;
    let frac = counts[MAT_DIAMOND as usize] as f64 / total as f64;
    let eps = 1.0 + (eps_d - 1.0) * frac;
    let key = (frac * total as f64).round() as u64;
    if let Some(&(_, id)) = mixed.iter().find(|(k, _)| *k == key) {
        return id;
    }
    materials.push(PermittivityModel::Constant { eps_inf: eps });
    let id = (materials.len() - 1) as u16;
    mixed.push((key, id));
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn drude_zero_crossing_is_exact() {
        let m = PermittivityModel::Drude {
            eps_inf: 4.0,
            plasma_freq: 1.0e16,
            damping: 0.0,
        };
        let omega = 1.0e16 / 4.0_f64.sqrt();
        let eps = m.evaluate(omega).unwrap();
        assert!(eps.re.abs() < 1e-12, "re = {}", eps.re);
        assert_eq!(eps.im, 0.0);
    }

    #[test]
    fn constant_diamond_value() {
        let m = PermittivityModel::diamond();
        let eps = m.evaluate(2.7e15).unwrap();
        assert!((eps.re - 2.417 * 2.417).abs() < 1e-12);
        assert!((eps.re - 5.842).abs() < 1e-3);
        assert_eq!(eps.im, 0.0);
    }

    // Independent real-arithmetic evaluation of the Drude expression:
    // Re ε = ε_inf − ωp²/(ω²+γ²),  Im ε = ωp²γ/(ω(ω²+γ²)).
    fn drude_reference(eps_inf: f64, wp: f64, g: f64, w: f64) -> (f64, f64) {
        let re = eps_inf - wp * wp / (w * w + g * g);
        let im = wp * wp * g / (w * (w * w + g * g));
        (re, im)
    }

    #[test]
    fn silver_at_700nm_matches_reference_and_tabulated_band() {
        let m = PermittivityModel::silver_default();
        let omega = 2.0 * PI * crate::constants::C0 / 700e-9;
        let eps = m.evaluate(omega).unwrap();
        let (re, im) = drude_reference(3.7, 1.39e16, 2.7e13, omega);
        assert!((eps.re - re).abs() / re.abs() < 1e-12);
        assert!((eps.im - im).abs() / im < 1e-12);
        // Tabulated silver (Johnson & Christy / Palik) has Re ε between
        // roughly -15 and -30 near 700 nm.
        assert!(eps.re > -30.0 && eps.re < -15.0, "re = {}", eps.re);
        assert!(eps.im > 0.0);
    }

    #[test]
    fn passivity_over_band() {
        let models = vec![
            PermittivityModel::vacuum(),
            PermittivityModel::diamond(),
            PermittivityModel::silver_default(),
            PermittivityModel::DrudeLorentz {
                eps_inf: 3.7,
                plasma_freq: 1.39e16,
                damping: 2.7e13,
                poles: vec![LorentzPole {
                    strength: 0.3,
                    center_freq: 5.0e15,
                    linewidth: 8.0e14,
                }],
            },
        ];
        for m in &models {
            m.validate().unwrap();
            let mut w = 2.0e15;
            while w <= 4.0e15 {
                let eps = m.evaluate(w).unwrap();
                assert!(eps.im >= 0.0, "Im eps < 0 at omega {w} for {m:?}");
                w += 2.0e13;
            }
        }
    }

    #[test]
    fn negative_frequency_is_domain_error() {
        let m = PermittivityModel::diamond();
        assert!(m.evaluate(-1.0).is_err());
        assert!(m.evaluate(0.0).is_err());
    }

    #[test]
    fn homogeneous_variant_all_substrate() {
        let geom = DeviceGeometry::default().with_variant(DeviceVariant::Homogeneous);
        let g = rasterize(&geom, 10e-9, 60e-9, &RasterizeOptions::default()).unwrap();
        assert!(g.ids.iter().all(|&id| id == MAT_DIAMOND));
    }

    #[test]
    fn bare_post_has_no_silver() {
        let geom = DeviceGeometry::default().with_variant(DeviceVariant::BarePost);
        let g = rasterize(&geom, 10e-9, 60e-9, &RasterizeOptions::default()).unwrap();
        assert_eq!(g.count_id(MAT_SILVER), 0);
        assert!(g.count_id(MAT_AIR) > 0);
        assert!(g.count_id(MAT_DIAMOND) > 0);
    }

    #[test]
    fn cylinder_volume_within_ten_percent() {
        let geom = DeviceGeometry::cylinder(50e-9);
        let dx = 5e-9;
        let g = rasterize(&geom, dx, 60e-9, &RasterizeOptions::default()).unwrap();
        // Diamond cells in 0 <= z < h form the post.
        let mut count = 0usize;
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let [_, _, z] = g.cell_center(i, j, k);
                    if z > 0.0 && z < geom.post_height && g.id_at(i, j, k) == MAT_DIAMOND {
                        count += 1;
                    }
                }
            }
        }
        let vol = count as f64 * dx * dx * dx;
        let analytic = PI * 50e-9 * 50e-9 * 180e-9;
        let rel = (vol - analytic).abs() / analytic;
        assert!(rel < 0.10, "staircase volume off by {:.1}%", rel * 100.0);
    }

    #[test]
    fn mirror_symmetry_exact() {
        let geom = DeviceGeometry::default();
        let g = rasterize(&geom, 10e-9, 60e-9, &RasterizeOptions::default()).unwrap();
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    assert_eq!(g.id_at(i, j, k), g.id_at(g.nx - 1 - i, j, k));
                    assert_eq!(g.id_at(i, j, k), g.id_at(i, g.ny - 1 - j, k));
                }
            }
        }
    }

    #[test]
    fn refinement_changes_volume_less_than_five_percent() {
        let geom = DeviceGeometry::default();
        let vol = |dx: f64| {
            let g = rasterize(&geom, dx, 60e-9, &RasterizeOptions::default()).unwrap();
            g.count_id(MAT_DIAMOND) as f64 * dx * dx * dx
        };
        let v1 = vol(10e-9);
        let v2 = vol(5e-9);
        assert!((v1 - v2).abs() / v2 < 0.05);
    }

    #[test]
    fn coarse_cell_is_config_error() {
        let geom = DeviceGeometry::default();
        let err = rasterize(&geom, 11e-9, 60e-9, &RasterizeOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("post_radius_top/5"), "message: {msg}");
    }

    #[test]
    fn small_padding_is_config_error() {
        let geom = DeviceGeometry::default();
        assert!(rasterize(&geom, 10e-9, 20e-9, &RasterizeOptions::default()).is_err());
    }

    #[test]
    fn averaging_adds_mixed_dielectric_cells_only() {
        let geom = DeviceGeometry::default().with_variant(DeviceVariant::BarePost);
        let opts = RasterizeOptions {
            averaging: true,
            ..Default::default()
        };
        let g = rasterize(&geom, 10e-9, 60e-9, &opts).unwrap();
        assert!(g.materials.len() > 3);
        for m in &g.materials[3..] {
            match m {
                PermittivityModel::Constant { eps_inf } => {
                    assert!(*eps_inf > 1.0 && *eps_inf < 2.417 * 2.417);
                }
                other => panic!("unexpected averaged material {other:?}"),
            }
        }
    }

    #[test]
    fn extents_do_not_depend_on_variant() {
        let silver = DeviceGeometry::default();
        let homog = silver.with_variant(DeviceVariant::Homogeneous);
        let a = rasterize(&silver, 10e-9, 60e-9, &RasterizeOptions::default()).unwrap();
        let b = rasterize(&homog, 10e-9, 60e-9, &RasterizeOptions::default()).unwrap();
        assert_eq!((a.nx, a.ny, a.nz), (b.nx, b.ny, b.nz));
        assert_eq!(a.origin, b.origin);
    }
}
