//! Synthetic short-axis cardiac stacks: an LV annulus tapering toward the
//! apex with an RV crescent on its side, plus matching ground truth.
//!
//! Specs are flat TOML key/value files; every key is optional:
//!
//! ```toml
//! n_slices = 60
//! image_size = 128
//! spacing_mm = 1.25
//! seed = 7
//! lv_outer_radius_base_mm = 34.0
//! rv_depth_mm = 16.0
//! noise_sigma = 0.05
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{BinaryMask, Grid3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_slices: usize,
    pub image_size: usize,
    pub spacing_mm: f64,
    pub seed: u64,
    /// Relative magnitude of the per-seed geometry perturbation; 0 keeps the
    /// nominal anatomy for every seed.
    pub geometry_jitter: f64,

    /// Slices at the apex end carrying no ring at all.
    pub empty_apex_slices: usize,
    pub lv_center_offset_mm: [f64; 2],
    /// Center drift per slice, mm.
    pub lv_center_drift_mm: [f64; 2],
    pub lv_outer_radius_apex_mm: f64,
    pub lv_outer_radius_base_mm: f64,
    pub lv_wall_apex_mm: f64,
    pub lv_wall_base_mm: f64,

    /// Direction of the RV crescent around the LV, degrees.
    pub rv_angle_deg: f64,
    pub rv_extent_deg: f64,
    pub rv_depth_mm: f64,
    pub rv_wall_mm: f64,
    /// Fraction of the apex-to-base span below which the RV is absent.
    pub rv_start_fraction: f64,

    pub background_intensity: f64,
    pub background_variation: f64,
    pub myocardium_intensity: f64,
    pub blood_intensity: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_slices: 60,
            image_size: 128,
            spacing_mm: 1.25,
            seed: 0,
            geometry_jitter: 0.1,
            empty_apex_slices: 1,
            lv_center_offset_mm: [0.0, 0.0],
            lv_center_drift_mm: [0.08, -0.05],
            lv_outer_radius_apex_mm: 12.0,
            lv_outer_radius_base_mm: 34.0,
            lv_wall_apex_mm: 8.0,
            lv_wall_base_mm: 11.0,
            rv_angle_deg: 180.0,
            rv_extent_deg: 150.0,
            rv_depth_mm: 16.0,
            rv_wall_mm: 5.0,
            rv_start_fraction: 0.25,
            background_intensity: 0.15,
            background_variation: 0.06,
            myocardium_intensity: 0.45,
            blood_intensity: 0.9,
            noise_sigma: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| invalid!("phantom spec: {}", e.message()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("phantom spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lv_outer_radius_apex_mm", self.lv_outer_radius_apex_mm),
            ("lv_outer_radius_base_mm", self.lv_outer_radius_base_mm),
            ("rv_depth_mm", self.rv_depth_mm),
            ("rv_wall_mm", self.rv_wall_mm),
            ("noise_sigma", self.noise_sigma),
            ("background_variation", self.background_variation),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("lv_wall_apex_mm", self.lv_wall_apex_mm),
            ("lv_wall_base_mm", self.lv_wall_base_mm),
            ("spacing_mm", self.spacing_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be positive, got {v}"));
            }
        }
        if self.n_slices == 0 || self.image_size < 8 {
            return Err(invalid!(
                "need at least one slice of at least 8×8 pixels, got {} slices of {}",
                self.n_slices,
                self.image_size
            ));
        }
        if self.empty_apex_slices >= self.n_slices {
            return Err(invalid!(
                "empty_apex_slices must leave at least one ring slice"
            ));
        }
        if !(0.0..=0.5).contains(&self.geometry_jitter) {
            return Err(invalid!("geometry_jitter must lie in [0, 0.5]"));
        }
        if !(0.0..1.0).contains(&self.rv_start_fraction) {
            return Err(invalid!("rv_start_fraction must lie in [0, 1)"));
        }
        if !(self.rv_extent_deg > 0.0 && self.rv_extent_deg <= 360.0) {
            return Err(invalid!("rv_extent_deg must lie in (0, 360]"));
        }
        Ok(())
    }
}

/// Geometry of one slice after jitter.
#[derive(Debug, Clone, Copy)]
struct SliceGeometry {
    center: [f64; 2],
    outer: f64,
    inner: f64,
    rv_depth: f64,
    rv_wall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Myocardium,
    Blood,
}

struct Anatomy {
    slices: Vec<Option<SliceGeometry>>,
    rv_angle: f64,
    rv_half_extent: f64,
}

impl Anatomy {
    fn new(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let j = spec.geometry_jitter;
        let mut jitter = |scale: f64| 1.0 + j * scale * rng.random_range(-1.0..=1.0);
        let outer_apex = spec.lv_outer_radius_apex_mm * jitter(1.0);
        let outer_base = spec.lv_outer_radius_base_mm * jitter(1.0);
        let wall_apex = spec.lv_wall_apex_mm * jitter(1.0);
        let wall_base = spec.lv_wall_base_mm * jitter(1.0);
        let rv_depth = spec.rv_depth_mm * jitter(1.0);
        let rv_wall = spec.rv_wall_mm * jitter(1.0);
        let rv_angle = (spec.rv_angle_deg + 90.0 * (jitter(1.0) - 1.0)).to_radians();
        let offset = [
            spec.lv_center_offset_mm[0] + 40.0 * (jitter(1.0) - 1.0),
            spec.lv_center_offset_mm[1] + 40.0 * (jitter(1.0) - 1.0),
        ];
        let drift = [
            spec.lv_center_drift_mm[0] * jitter(2.0),
            spec.lv_center_drift_mm[1] * jitter(2.0),
        ];

        let first = spec.empty_apex_slices;
        let span = (spec.n_slices - 1 - first).max(1) as f64;
        let slices = (0..spec.n_slices)
            .map(|z| {
                if z < first {
                    return None;
                }
                let u = (z - first) as f64 / span;
                // Quadratic ease-out: steep growth near the apex, flat at the base.
                let shape = 1.0 - (1.0 - u) * (1.0 - u);
                let outer = outer_apex + (outer_base - outer_apex) * shape;
                if outer <= 0.0 {
                    return None;
                }
                let wall = wall_apex + (wall_base - wall_apex) * u;
                let t =
                    ((u - spec.rv_start_fraction) / (1.0 - spec.rv_start_fraction)).clamp(0.0, 1.0);
                let rv = t * t * (3.0 - 2.0 * t);
                let dz = (z - first) as f64;
                Some(SliceGeometry {
                    center: [offset[0] + drift[0] * dz, offset[1] + drift[1] * dz],
                    outer,
                    inner: (outer - wall).max(0.0),
                    rv_depth: rv_depth * rv,
                    rv_wall: rv_wall * rv,
                })
            })
            .collect();
        Self {
            slices,
            rv_angle,
            rv_half_extent: spec.rv_extent_deg.to_radians() / 2.0,
        }
    }

    fn tissue(&self, z: usize, x: f64, y: f64) -> Tissue {
        let Some(g) = self.slices[z] else {
            return Tissue::Background;
        };
        let (dx, dy) = (x - g.center[0], y - g.center[1]);
        let r = dx.hypot(dy);
        if r < g.inner {
            return Tissue::Blood;
        }
        if r < g.outer {
            return Tissue::Myocardium;
        }
        if g.rv_wall <= 0.0 {
            return Tissue::Background;
        }
        let delta = (dy.atan2(dx) - self.rv_angle + PI).rem_euclid(2.0 * PI) - PI;
        if delta.abs() >= self.rv_half_extent {
            return Tissue::Background;
        }
        let s = (0.5 * PI * delta / self.rv_half_extent).cos();
        let cavity = g.outer + g.rv_depth * s;
        if r < cavity {
            Tissue::Blood
        } else if r < cavity + g.rv_wall {
            Tissue::Myocardium
        } else {
            Tissue::Background
        }
    }
}

/// Renders the phantom volume and its noiseless myocardium mask.
///
/// The image uses 2×2 supersampling per pixel for partial-volume edges; the
/// mask samples pixel centers.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anatomy = Anatomy::new(spec, &mut rng);
    let phase = [
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    ];
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let (n, nz) = (spec.image_size, spec.n_slices);
    let s = spec.spacing_mm;
    let half = (n as f64 - 1.0) / 2.0;
    let wave = 2.0 * PI / (n as f64 * s);
    let mut image = Vec::with_capacity(n * n * nz);
    let mut mask = Vec::with_capacity(n * n * nz);
    for z in 0..nz {
        for py in 0..n {
            for px in 0..n {
                let (x, y) = ((px as f64 - half) * s, (py as f64 - half) * s);
                mask.push((anatomy.tissue(z, x, y) == Tissue::Myocardium) as u8);
                let mut value = 0.0;
                for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    let (sx, sy) = (x + ox * s, y + oy * s);
                    value += match anatomy.tissue(z, sx, sy) {
                        Tissue::Blood => spec.blood_intensity,
                        Tissue::Myocardium => spec.myocardium_intensity,
                        Tissue::Background => {
                            spec.background_intensity
                                + spec.background_variation
                                    * (1.3 * wave * sx + phase[0]).sin()
                                    * (0.9 * wave * sy + phase[1]).cos()
                        }
                    };
                }
                let sample = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                image.push((value / 4.0 + sample) as f32);
            }
        }
    }
    let dims = [n, n, nz];
    let spacing = [s as f32; 3];
    let volume = Volume::new(Grid3::new(dims, image)?, spacing, nz - 1, None)?;
    Ok((volume, BinaryMask::new(dims, mask)?))
}
