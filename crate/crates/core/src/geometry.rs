//! Surface geometry: the oriented local frame of a FIM, the element grid on
//! its aperture and the normal displacement (morph) patterns.
//!
//! All lengths are in units of the carrier wavelength. Elements are indexed
//! `n = ix + iz * nx` (x-fastest, 0-based), so `ix = n mod nx` and
//! `iz = n / nx`.

use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::{Error, Result, Vec3};

/// Orientation of a surface normal plus the spin of the aperture about it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    /// Elevation of the normal, in `[0, pi]`.
    pub theta: f64,
    /// Azimuth of the normal, in `[0, 2pi)`.
    pub phi: f64,
    /// Spin about the normal, in `[0, 2pi)`.
    pub rho: f64,
}

impl Orientation {
    /// Builds an orientation, reducing `phi` and `rho` modulo 2pi.
    pub fn new(theta: f64, phi: f64, rho: f64) -> Result<Self> {
        if !(theta.is_finite() && phi.is_finite() && rho.is_finite()) {
            return Err(Error::InvalidConfig("orientation angles must be finite".into()));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::InvalidConfig(format!(
                "elevation {theta} outside [0, pi]"
            )));
        }
        Ok(Self {
            theta,
            phi: reduce_angle(phi),
            rho: reduce_angle(rho),
        })
    }

    pub fn basis(&self) -> Basis {
        basis_from_orientation(self)
    }
}

fn reduce_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Orthonormal frame attached to a surface. `i` and `j` span the aperture,
/// `k` is the normal along which elements are displaced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Basis {
    pub i: Vec3,
    pub j: Vec3,
    pub k: Vec3,
}

/// Evaluates the closed-form frame of an oriented surface.
pub fn basis_from_orientation(o: &Orientation) -> Basis {
    let (st, ct) = o.theta.sin_cos();
    let (sp, cp) = o.phi.sin_cos();
    let (sr, cr) = o.rho.sin_cos();
    let i = Vec3::new(ct * cp * cr - sp * sr, ct * sp * cr + cp * sr, -st * cr);
    let j = Vec3::new(-ct * cp * sr - sp * cr, -ct * sp * sr + cp * cr, st * sr);
    let k = Vec3::new(st * cp, st * sp, ct);
    Basis { i, j, k }
}

/// Unit propagation direction for a path with the given azimuth and elevation.
pub fn direction_vector(azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(se * ca, se * sa, ce)
}

/// Geometry of one flexible surface.
#[derive(Debug, Clone, PartialEq)]
pub struct FimConfig {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
    pub orientation: Orientation,
    pub origin: Vec3,
    /// Maximum absolute normal displacement of any element.
    pub y_max: f64,
}

impl FimConfig {
    pub fn new(
        nx: usize,
        nz: usize,
        dx: f64,
        dz: f64,
        orientation: Orientation,
        y_max: f64,
    ) -> Result<Self> {
        let cfg = Self {
            nx,
            nz,
            dx,
            dz,
            orientation,
            origin: Vec3::zeros(),
            y_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 {
            return Err(Error::InvalidConfig(format!(
                "element counts must be positive, got {}x{}",
                self.nx, self.nz
            )));
        }
        if !(self.dx > 0.0 && self.dz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "spacings must be positive, got dx={} dz={}",
                self.dx, self.dz
            )));
        }
        if !(self.y_max >= 0.0 && self.y_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "maximum deformation must be finite and non-negative, got {}",
                self.y_max
            )));
        }
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.nx * self.nz
    }

    /// Flat element index of grid position `(ix, iz)`.
    pub fn flat_index(&self, ix: usize, iz: usize) -> usize {
        ix + iz * self.nx
    }

    /// Grid position `(ix, iz)` of flat element index `n`.
    pub fn grid_index(&self, n: usize) -> (usize, usize) {
        (n % self.nx, n / self.nx)
    }

    /// In-plane offsets `(x_n, z_n)` of element `n` from the reference element.
    pub fn aperture_offset(&self, n: usize) -> (f64, f64) {
        let (ix, iz) = self.grid_index(n);
        (self.dx * ix as f64, self.dz * iz as f64)
    }
}

/// Separable normal displacement: element `(ix, iz)` moves by `u[ix] + v[iz]`
/// along the surface normal.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphPattern {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl MorphPattern {
    pub fn zero(cfg: &FimConfig) -> Self {
        Self {
            u: vec![0.0; cfg.nx],
            v: vec![0.0; cfg.nz],
        }
    }

    pub fn displacement(&self, ix: usize, iz: usize) -> f64 {
        self.u[ix] + self.v[iz]
    }

    /// Flat displacement vector, x-fastest.
    pub fn displacements(&self) -> Vec<f64> {
        self.v
            .iter()
            .flat_map(|&vz| self.u.iter().map(move |&ux| ux + vz))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&d| d == 0.0)
    }

    /// Checks shape against `cfg` and the deformation bound on every element.
    pub fn validate(&self, cfg: &FimConfig) -> Result<()> {
        if self.u.len() != cfg.nx || self.v.len() != cfg.nz {
            return Err(Error::mismatch(
                "morph pattern",
                format!("{}+{} profile entries", cfg.nx, cfg.nz),
                format!("{}+{}", self.u.len(), self.v.len()),
            ));
        }
        for (n, y) in self.displacements().into_iter().enumerate() {
            if !(y.abs() <= cfg.y_max) {
                return Err(Error::DeformationBound {
                    element: n,
                    displacement: y,
                    bound: cfg.y_max,
                });
            }
        }
        Ok(())
    }
}

/// Unmorphed element positions, flat x-fastest order.
pub fn element_positions(cfg: &FimConfig) -> Vec<Vec3> {
    let basis = cfg.orientation.basis();
    (0..cfg.element_count())
        .map(|n| {
            let (x, z) = cfg.aperture_offset(n);
            cfg.origin + basis.i * x + basis.j * z
        })
        .collect()
}

/// Element positions after displacing each element along the normal.
pub fn morphed_positions(cfg: &FimConfig, pattern: &MorphPattern) -> Result<Vec<Vec3>> {
    pattern.validate(cfg)?;
    let k = cfg.orientation.basis().k;
    Ok(element_positions(cfg)
        .into_iter()
        .zip(pattern.displacements())
        .map(|(q, y)| q + k * y)
        .collect())
}

/// Draws `u` and `v` i.i.d. uniform on `[-y_max/2, y_max/2]`, so every combined
/// displacement stays within `[-y_max, y_max]`.
pub fn sample_morph_pattern<R: Rng + ?Sized>(cfg: &FimConfig, rng: &mut R) -> MorphPattern {
    let half = 0.5 * cfg.y_max;
    let mut draw = |len: usize| -> Vec<f64> {
        if half == 0.0 {
            vec![0.0; len]
        } else {
            (0..len).map(|_| rng.random_range(-half..=half)).collect()
        }
    };
    let u = draw(cfg.nx);
    let v = draw(cfg.nz);
    MorphPattern { u, v }
}
