//! Array responses of (morphed) surfaces and the multipath channel matrix.
//!
//! Lengths are in wavelengths, so the wavenumber is `2pi`. The receive
//! vectorization convention is column stacking: `vec(a b^T) = b ⊗ a`.

use std::f64::consts::{PI, TAU};

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{direction_vector, Basis, FimConfig, MorphPattern};
use crate::{CMatrix, CVector, Error, Result, Vec3, C64};

/// One propagation path: departure/arrival angles and complex gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub tx_azimuth: f64,
    pub tx_elevation: f64,
    pub rx_azimuth: f64,
    pub rx_elevation: f64,
    pub gain: C64,
}

impl Path {
    pub fn tx_direction(&self) -> Vec3 {
        direction_vector(self.tx_azimuth, self.tx_elevation)
    }

    pub fn rx_direction(&self) -> Vec3 {
        direction_vector(self.rx_azimuth, self.rx_elevation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    paths: Vec<Path>,
}

impl PathSet {
    pub fn new(paths: Vec<Path>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::InvalidConfig("at least one path is required".into()));
        }
        for p in &paths {
            let finite = [p.tx_azimuth, p.tx_elevation, p.rx_azimuth, p.rx_elevation]
                .iter()
                .all(|a| a.is_finite());
            if !finite || !p.gain.re.is_finite() || !p.gain.im.is_finite() {
                return Err(Error::InvalidConfig("path parameters must be finite".into()));
            }
        }
        let set = Self { paths };
        if !set.directions_distinct() {
            warn!("path set contains repeated direction pairs; factors are not identifiable");
        }
        Ok(set)
    }

    /// Angles i.i.d. uniform on `[0, pi]`, gains i.i.d. standard circular
    /// complex Gaussian.
    pub fn sample<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Self> {
        let paths = (0..count)
            .map(|_| Path {
                tx_azimuth: rng.random_range(0.0..=PI),
                tx_elevation: rng.random_range(0.0..=PI),
                rx_azimuth: rng.random_range(0.0..=PI),
                rx_elevation: rng.random_range(0.0..=PI),
                gain: complex_gaussian(rng, 1.0),
            })
            .collect();
        Self::new(paths)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn gains(&self) -> CVector {
        CVector::from_iterator(self.len(), self.paths.iter().map(|p| p.gain))
    }

    pub fn tx_directions(&self) -> Vec<Vec3> {
        self.paths.iter().map(Path::tx_direction).collect()
    }

    pub fn rx_directions(&self) -> Vec<Vec3> {
        self.paths.iter().map(Path::rx_direction).collect()
    }

    /// Returns a copy with every gain multiplied by `c`.
    pub fn scaled(&self, c: C64) -> Self {
        Self {
            paths: self
                .paths
                .iter()
                .map(|p| Path {
                    gain: p.gain * c,
                    ..*p
                })
                .collect(),
        }
    }

    fn directions_distinct(&self) -> bool {
        let d: Vec<(Vec3, Vec3)> = self
            .paths
            .iter()
            .map(|p| (p.tx_direction(), p.rx_direction()))
            .collect();
        d.iter().enumerate().all(|(a, pa)| {
            d[a + 1..]
                .iter()
                .all(|pb| (pa.0 - pb.0).norm() + (pa.1 - pb.1).norm() > 1e-12)
        })
    }
}

/// Circular complex Gaussian sample with the given total variance.
pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

fn phase(turns: f64) -> C64 {
    C64::from_polar(1.0, TAU * turns)
}

/// Steering vector of the flat surface toward `dir`.
pub fn steering_unmorphed(cfg: &FimConfig, basis: &Basis, dir: &Vec3) -> CVector {
    let pi_ = basis.i.dot(dir);
    let pj = basis.j.dot(dir);
    CVector::from_fn(cfg.element_count(), |n, _| {
        let (x, z) = cfg.aperture_offset(n);
        phase(x * pi_ + z * pj)
    })
}

/// Per-element phase induced by the normal displacement of `pattern`.
pub fn morph_response(
    cfg: &FimConfig,
    basis: &Basis,
    pattern: &MorphPattern,
    dir: &Vec3,
) -> CVector {
    let pk = basis.k.dot(dir);
    CVector::from_fn(cfg.element_count(), |n, _| {
        let (ix, iz) = cfg.grid_index(n);
        phase(pattern.displacement(ix, iz) * pk)
    })
}

pub fn morphed_steering(
    cfg: &FimConfig,
    basis: &Basis,
    pattern: &MorphPattern,
    dir: &Vec3,
) -> CVector {
    steering_unmorphed(cfg, basis, dir).component_mul(&morph_response(cfg, basis, pattern, dir))
}

/// Splits the morphed steering vector into its x and z factors `(g, h)` so
/// that `h ⊗ g` (x-fastest) reproduces [`morphed_steering`]. `g[0] = 1`.
pub fn steering_factors_xz(
    cfg: &FimConfig,
    basis: &Basis,
    pattern: &MorphPattern,
    dir: &Vec3,
) -> (CVector, CVector) {
    let pi_ = basis.i.dot(dir);
    let pj = basis.j.dot(dir);
    let pk = basis.k.dot(dir);
    // u[0] moves to the z factor so that g, like the full vector, has a
    // unit reference entry
    let u0 = pattern.u[0];
    let g = CVector::from_fn(cfg.nx, |ix, _| {
        phase(cfg.dx * ix as f64 * pi_ + (pattern.u[ix] - u0) * pk)
    });
    let h = CVector::from_fn(cfg.nz, |iz, _| {
        phase(cfg.dz * iz as f64 * pj + (pattern.v[iz] + u0) * pk)
    });
    (g, h)
}

/// Steering matrix with one morphed steering vector per direction.
pub fn steering_matrix(cfg: &FimConfig, pattern: &MorphPattern, dirs: &[Vec3]) -> CMatrix {
    let basis = cfg.orientation.basis();
    let cols: Vec<CVector> = dirs
        .iter()
        .map(|d| morphed_steering(cfg, &basis, pattern, d))
        .collect();
    CMatrix::from_columns(&cols)
}

/// The x and z factor matrices (`nx × L`, `nz × L`) of a morphed surface.
pub fn steering_factor_matrices(
    cfg: &FimConfig,
    pattern: &MorphPattern,
    dirs: &[Vec3],
) -> (CMatrix, CMatrix) {
    let basis = cfg.orientation.basis();
    let (gs, hs): (Vec<CVector>, Vec<CVector>) = dirs
        .iter()
        .map(|d| steering_factors_xz(cfg, &basis, pattern, d))
        .unzip();
    (CMatrix::from_columns(&gs), CMatrix::from_columns(&hs))
}

/// `N × M` channel: sum over paths of `gain · ã b̃^T`.
pub fn channel_matrix(
    tx_cfg: &FimConfig,
    rx_cfg: &FimConfig,
    tx_pattern: &MorphPattern,
    rx_pattern: &MorphPattern,
    paths: &PathSet,
) -> CMatrix {
    let tx_basis = tx_cfg.orientation.basis();
    let rx_basis = rx_cfg.orientation.basis();
    let mut h = CMatrix::zeros(rx_cfg.element_count(), tx_cfg.element_count());
    for p in paths.paths() {
        let a = morphed_steering(rx_cfg, &rx_basis, rx_pattern, &p.rx_direction());
        let b = morphed_steering(tx_cfg, &tx_basis, tx_pattern, &p.tx_direction());
        h += (a * p.gain) * b.transpose();
    }
    h
}

/// Numerical rank with singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &CMatrix, rel_tol: f64) -> Result<usize> {
    let sv = crate::tensor::svd(m)?.singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * smax).count())
}
