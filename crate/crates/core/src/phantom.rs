//! Synthetic dynamic-contrast phantoms with known liver masks.
//!
//! A phantom is a list of geometric regions rasterized in order (later regions
//! overwrite earlier ones). Each region carries a six-point time-intensity
//! curve; voxel intensities are the curve value of the covering region plus
//! Gaussian noise. The liver mask is the union of liver and lesion voxels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::volume::{BinaryMask3D, VolumeSeries};
use crate::error::{Error, Result};
use crate::models::spec::{LATE_ARTERIAL_PHASE, NUM_PHASES};

/// Intensity of a tissue in each of the six contrast phases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeIntensityCurve(pub [f64; NUM_PHASES]);

impl TimeIntensityCurve {
    pub fn at(&self, phase: usize) -> f64 {
        self.0[phase]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Body,
    Liver,
    Lesion,
    Organ,
}

impl Tissue {
    fn in_liver_mask(self) -> bool {
        matches!(self, Tissue::Liver | Tissue::Lesion)
    }
}

/// Region geometry in voxel coordinates `[z, y, x]` (voxel centres at integers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    Box { min: [f64; 3], max: [f64; 3] },
    /// Elliptic cross-section `[y, x]` extruded through every slice.
    Cylinder { center: [f64; 2], radii: [f64; 2] },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ellipsoid { center, radii } => {
                (0..3)
                    .map(|i| ((p[i] - center[i]) / radii[i]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Shape::Cylinder { center, radii } => {
                ((p[1] - center[0]) / radii[0]).powi(2) + ((p[2] - center[1]) / radii[1]).powi(2) <= 1.0
            }
        }
    }

    fn center_zyx(&self, dims: [usize; 3]) -> [f64; 3] {
        match *self {
            Shape::Ellipsoid { center, .. } => center,
            Shape::Box { min, max } => [0, 1, 2].map(|i| 0.5 * (min[i] + max[i])),
            Shape::Cylinder { center, .. } => [(dims[0] as f64 - 1.0) / 2.0, center[0], center[1]],
        }
    }

    fn has_positive_extent(&self) -> bool {
        match *self {
            Shape::Ellipsoid { radii, .. } => radii.iter().all(|&r| r > 0.0),
            Shape::Box { min, max } => (0..3).all(|i| max[i] >= min[i]),
            Shape::Cylinder { radii, .. } => radii.iter().all(|&r| r > 0.0),
        }
    }

    /// Applies an in-plane similarity transform `p -> mirror(scale·(p − c) + c + shift)`.
    fn transformed(&self, t: &InPlaneTransform) -> Shape {
        let map_y = |y: f64| t.scale * (y - t.cy) + t.cy + t.shift[0];
        let map_x = |x: f64| {
            let x = t.scale * (x - t.cx) + t.cx + t.shift[1];
            if t.mirror {
                2.0 * t.cx - x
            } else {
                x
            }
        };
        match *self {
            Shape::Ellipsoid { center, radii } => Shape::Ellipsoid {
                center: [center[0], map_y(center[1]), map_x(center[2])],
                radii: [radii[0], t.scale * radii[1], t.scale * radii[2]],
            },
            Shape::Box { min, max } => {
                let (x0, x1) = (map_x(min[2]), map_x(max[2]));
                Shape::Box {
                    min: [min[0], map_y(min[1]), x0.min(x1)],
                    max: [max[0], map_y(max[1]), x0.max(x1)],
                }
            }
            Shape::Cylinder { center, radii } => Shape::Cylinder {
                center: [map_y(center[0]), map_x(center[1])],
                radii: [t.scale * radii[0], t.scale * radii[1]],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub tissue: Tissue,
    pub shape: Shape,
    pub curve: TimeIntensityCurve,
}

/// Per-case randomization of organ placement. Body regions stay fixed; every
/// other region moves with one shared transform, so containment is preserved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryJitter {
    /// Mirror the organ layout left/right with probability 1/2.
    pub mirror_x: bool,
    /// Uniform in-plane shift bound, in voxels.
    pub max_shift_vox: f64,
    /// Isotropic in-plane scale drawn from `[1 − s, 1 + s]`.
    pub max_scale: f64,
}

struct InPlaneTransform {
    cy: f64,
    cx: f64,
    scale: f64,
    shift: [f64; 2],
    mirror: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[Z, Y, X]`.
    pub dims: [usize; 3],
    /// `[x, y, z]` in millimetres.
    pub spacing_mm: [f64; 3],
    pub background: TimeIntensityCurve,
    pub regions: Vec<Region>,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub jitter: Option<GeometryJitter>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!("phantom dims {:?} must be positive", self.dims)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !self.regions.iter().any(|r| r.tissue == Tissue::Liver) {
            return Err(Error::invalid("phantom spec has no liver region"));
        }
        for r in &self.regions {
            if !r.shape.has_positive_extent() {
                return Err(Error::invalid(format!("region `{}` has empty extent", r.name)));
            }
            let c = r.shape.center_zyx(self.dims);
            let inside = (0..3).all(|i| c[i] >= -0.5 && c[i] <= self.dims[i] as f64 - 0.5);
            if !inside {
                return Err(Error::invalid(format!(
                    "region `{}` is centred outside the {:?} grid",
                    r.name, self.dims
                )));
            }
            if r.curve.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("region `{}` has a non-finite curve", r.name)));
            }
        }
        Ok(())
    }

    /// Same spec with a different seed; used to make distinct cases.
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn with_noise(&self, noise_sigma: f64) -> Self {
        PhantomSpec {
            noise_sigma,
            ..self.clone()
        }
    }

    /// Regions after applying this seed's geometry jitter.
    pub fn placed_regions(&self) -> Vec<Region> {
        let Some(j) = self.jitter else {
            return self.regions.clone();
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6a09_e667_f3bc_c908);
        let mirror = j.mirror_x && rng.random_bool(0.5);
        let scale = 1.0 + j.max_scale * rng.random_range(-1.0..=1.0);
        let shift = [
            j.max_shift_vox * rng.random_range(-1.0..=1.0),
            j.max_shift_vox * rng.random_range(-1.0..=1.0),
        ];
        let t = InPlaneTransform {
            cy: (self.dims[1] as f64 - 1.0) / 2.0,
            cx: (self.dims[2] as f64 - 1.0) / 2.0,
            scale,
            shift,
            mirror,
        };
        self.regions
            .iter()
            .map(|r| Region {
                shape: if r.tissue == Tissue::Body {
                    r.shape
                } else {
                    r.shape.transformed(&t)
                },
                ..r.clone()
            })
            .collect()
    }

    /// Region index covering each voxel (`None` for background), `[Z, Y, X]` order.
    pub fn labels(&self) -> Vec<Option<usize>> {
        let regions = self.placed_regions();
        let [nz, ny, nx] = self.dims;
        let mut labels = Vec::with_capacity(nz * ny * nx);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [z as f64, y as f64, x as f64];
                    labels.push(regions.iter().rposition(|r| r.shape.contains(p)));
                }
            }
        }
        labels
    }
}

/// Rasterizes a phantom: six-phase series plus the liver mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(VolumeSeries, BinaryMask3D)> {
    spec.validate()?;
    let labels = spec.labels();
    let [nz, ny, nx] = spec.dims;
    let n = nz * ny * nx;
    let curve_of = |l: Option<usize>| l.map_or(&spec.background, |i| &spec.regions[i].curve);

    let mut data = Vec::with_capacity(NUM_PHASES * n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    for phase in 0..NUM_PHASES {
        for &l in &labels {
            let mut v = curve_of(l).at(phase);
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v as f32);
        }
    }
    let series = VolumeSeries::new([NUM_PHASES, nz, ny, nx], spec.spacing_mm, data)?;
    let mask = BinaryMask3D::new(
        spec.dims,
        spec.spacing_mm,
        labels
            .iter()
            .map(|l| l.is_some_and(|i| spec.regions[i].tissue.in_liver_mask()) as u8)
            .collect(),
    )?;
    Ok((series, mask))
}

pub const BACKGROUND_CURVE: TimeIntensityCurve = TimeIntensityCurve([5.0; 6]);
pub const BODY_CURVE: TimeIntensityCurve = TimeIntensityCurve([40.0, 45.0, 50.0, 48.0, 45.0, 42.0]);
pub const LIVER_CURVE: TimeIntensityCurve = TimeIntensityCurve([30.0, 35.0, 95.0, 80.0, 70.0, 60.0]);
/// Matches the liver at the late arterial phase only.
pub const CONFUSER_CURVE: TimeIntensityCurve = TimeIntensityCurve([30.0, 95.0, 95.0, 40.0, 35.0, 30.0]);
pub const SPLEEN_CURVE: TimeIntensityCurve = TimeIntensityCurve([30.0, 60.0, 55.0, 50.0, 45.0, 40.0]);
pub const HYPO_LESION_CURVE: TimeIntensityCurve = TimeIntensityCurve([20.0, 25.0, 40.0, 35.0, 30.0, 25.0]);

const DEFAULT_SPACING: [f64; 3] = [1.543, 1.543, 2.0];

struct Layout {
    body: Shape,
    liver: Shape,
    lesion: Shape,
    right: Shape,
    right_lesion: Shape,
    right_small: Shape,
}

fn layout(size: usize) -> ([usize; 3], Layout) {
    let s = size as f64;
    let nz = (size / 4).max(1);
    let z = nz as f64;
    let zc = (z - 1.0) / 2.0;
    let mid = (s - 1.0) / 2.0;
    let organ_radii = [0.6 * z, 0.30 * s, 0.19 * s];
    let lesion_radii = [0.25 * z, 0.08 * s, 0.06 * s];
    (
        [nz, size, size],
        Layout {
            body: Shape::Cylinder {
                center: [mid, mid],
                radii: [0.42 * s, 0.48 * s],
            },
            liver: Shape::Ellipsoid {
                center: [zc, 0.48 * s, 0.30 * s],
                radii: organ_radii,
            },
            lesion: Shape::Ellipsoid {
                center: [zc, 0.42 * s, 0.31 * s],
                radii: lesion_radii,
            },
            right: Shape::Ellipsoid {
                center: [zc, 0.48 * s, s - 1.0 - 0.30 * s],
                radii: organ_radii,
            },
            right_lesion: Shape::Ellipsoid {
                center: [zc, 0.42 * s, s - 1.0 - 0.31 * s],
                radii: lesion_radii,
            },
            right_small: Shape::Ellipsoid {
                center: [zc, 0.45 * s, s - 1.0 - 0.28 * s],
                radii: [0.5 * z, 0.20 * s, 0.13 * s],
            },
        },
    )
}

fn region(name: &str, tissue: Tissue, shape: Shape, curve: TimeIntensityCurve) -> Region {
    Region {
        name: name.into(),
        tissue,
        shape,
        curve,
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::invalid(format!(
            "phantom size must be a multiple of 8 and at least 16, got {size}"
        )));
    }
    Ok(())
}

/// Liver uniquely bright at the late arterial phase, next to a dimmer
/// spleen-like organ, with one hypo-intense lesion.
pub fn default_separable_spec(size: usize) -> Result<PhantomSpec> {
    check_size(size)?;
    let (dims, l) = layout(size);
    Ok(PhantomSpec {
        dims,
        spacing_mm: DEFAULT_SPACING,
        background: BACKGROUND_CURVE,
        regions: vec![
            region("body", Tissue::Body, l.body, BODY_CURVE),
            region("liver", Tissue::Liver, l.liver, LIVER_CURVE),
            region("lesion", Tissue::Lesion, l.lesion, HYPO_LESION_CURVE),
            region("spleen", Tissue::Organ, l.right_small, SPLEEN_CURVE),
        ],
        noise_sigma: 5.0,
        seed: 0,
        jitter: Some(GeometryJitter {
            mirror_x: false,
            max_shift_vox: size as f64 / 32.0,
            max_scale: 0.1,
        }),
    })
}

/// Liver and a same-sized confuser organ that are indistinguishable at the
/// late arterial phase. Each holds an identical hypo-intense spot (a lesion in
/// the liver, a cyst in the confuser), and the layout is randomly mirrored per
/// case, so no late-arterial observer can tell the two apart.
pub fn default_ambiguity_spec(size: usize) -> Result<PhantomSpec> {
    check_size(size)?;
    let (dims, l) = layout(size);
    Ok(PhantomSpec {
        dims,
        spacing_mm: DEFAULT_SPACING,
        background: BACKGROUND_CURVE,
        regions: vec![
            region("body", Tissue::Body, l.body, BODY_CURVE),
            region("liver", Tissue::Liver, l.liver, LIVER_CURVE),
            region("lesion", Tissue::Lesion, l.lesion, HYPO_LESION_CURVE),
            region("confuser", Tissue::Organ, l.right, CONFUSER_CURVE),
            region("cyst", Tissue::Organ, l.right_lesion, HYPO_LESION_CURVE),
        ],
        noise_sigma: 5.0,
        seed: 0,
        jitter: Some(GeometryJitter {
            mirror_x: true,
            max_shift_vox: size as f64 / 32.0,
            max_scale: 0.1,
        }),
    })
}

/// The single phase a configuration-I network sees.
pub const SINGLE_PHASE: usize = LATE_ARTERIAL_PHASE;
