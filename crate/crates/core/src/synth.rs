//! Seeded multi-modal phantoms with nested ellipsoidal tumors.
//!
//! A brain ellipsoid holds three nested tumor ellipsoids sharing one center:
//! an enhancing core (label 4) inside a necrotic shell (label 1) inside an
//! edema shell (label 2). Each tissue has a fixed mean intensity per
//! modality; Gaussian noise is added inside the brain and values are clamped
//! at zero. Voxels outside the brain are exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{SegVolume, VolumeScan};

/// Mean intensity per modality (`flair, t1, t1ce, t2`) of each tissue.
///
/// Orderings: edema is bright in FLAIR, the enhancing core is bright in
/// T1-CE and the necrotic shell is dark in T1-CE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityTable {
    pub brain: [f32; 4],
    pub edema: [f32; 4],
    pub ncr_net: [f32; 4],
    pub enhancing: [f32; 4],
}

impl Default for IntensityTable {
    fn default() -> Self {
        Self {
            brain: [400.0, 500.0, 450.0, 400.0],
            edema: [820.0, 400.0, 430.0, 760.0],
            ncr_net: [520.0, 260.0, 150.0, 860.0],
            enhancing: [600.0, 450.0, 960.0, 600.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[depth, height, width]`.
    pub extents: [usize; 3],
    /// Brain ellipsoid semi-axes along `[z, y, x]`, in voxels.
    pub brain_radii: [f64; 3],
    /// In-plane radius ranges of the enhancing core, necrotic shell and edema.
    pub enhancing_radius: (f64, f64),
    pub ncr_radius: (f64, f64),
    pub edema_radius: (f64, f64),
    /// Tumor z semi-axis as a fraction of its in-plane radius.
    pub z_scale: f64,
    /// Range of the x/y aspect ratio shared by the three tumor shells.
    pub aspect: (f64, f64),
    /// Maximum tumor-center offset from the volume center along `[z, y, x]`.
    pub max_center_offset: [f64; 3],
    pub noise_std: f64,
    pub intensities: IntensityTable,
    /// Voxel size along `[x, y, z]`.
    pub spacing: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: [16, 64, 64],
            brain_radii: [6.5, 28.0, 26.0],
            enhancing_radius: (6.0, 9.0),
            ncr_radius: (11.0, 14.0),
            edema_radius: (16.0, 20.0),
            z_scale: 0.3,
            aspect: (0.85, 1.15),
            max_center_offset: [0.5, 5.0, 5.0],
            noise_std: 40.0,
            intensities: IntensityTable::default(),
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 200;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("phantom spec: {m}")));
        if self.extents.contains(&0) {
            return fail(format!("extents {:?} must be positive", self.extents));
        }
        let ranges = [self.enhancing_radius, self.ncr_radius, self.edema_radius];
        if ranges.iter().any(|(lo, hi)| !(*lo > 0.0 && lo <= hi)) {
            return fail(format!("radius ranges {ranges:?} must satisfy 0 < lo <= hi"));
        }
        if !(self.enhancing_radius.1 < self.ncr_radius.0 && self.ncr_radius.1 < self.edema_radius.0) {
            return fail(format!("radius ranges {ranges:?} must nest: core < necrotic shell < edema"));
        }
        if self.brain_radii.iter().any(|r| !(*r > 0.0)) || !(self.z_scale > 0.0) {
            return fail("brain radii and z scale must be positive".into());
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return fail(format!("aspect range {:?} is invalid", self.aspect));
        }
        if self.max_center_offset.iter().any(|o| !(*o >= 0.0)) || !(self.noise_std >= 0.0) {
            return fail("center offsets and noise must be nonnegative".into());
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return fail("spacing must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn voxel(i: usize, shape: [usize; 3]) -> [f64; 3] {
    let [_, h, w] = shape;
    [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64]
}

/// Generates one phantom named `id`.
pub fn generate_phantom(spec: &PhantomSpec, id: &str) -> Result<(VolumeScan, SegVolume)> {
    spec.validate()?;
    let shape = spec.extents;
    let n: usize = shape.iter().product();
    let mid = shape.map(|e| (e as f64 - 1.0) / 2.0);
    let brain = Ellipsoid { center: mid, radii: spec.brain_radii };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let radii = [draw(spec.enhancing_radius), draw(spec.ncr_radius), draw(spec.edema_radius)];
    let aspect = draw(spec.aspect);

    let shells = |center: [f64; 3]| radii.map(|r| Ellipsoid { center, radii: [r * spec.z_scale, r, r * aspect] });
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let center = [0, 1, 2].map(|k| {
            let o = spec.max_center_offset[k];
            mid[k] + if o > 0.0 { rng.random_range(-o..o) } else { 0.0 }
        });
        let s = shells(center);
        let edema_inside = (0..n).map(|i| voxel(i, shape)).all(|p| !s[2].contains(p) || brain.contains(p));
        let core_present = (0..n).any(|i| s[0].contains(voxel(i, shape)));
        if edema_inside && core_present {
            placed = Some(s);
            break;
        }
    }
    let [core, ncr, edema] = placed.ok_or_else(|| {
        Error::Config(format!("phantom {id}: tumor ranges do not fit inside the brain ellipsoid"))
    })?;

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let table = &spec.intensities;
    let mut labels = vec![0u8; n];
    let mut data = vec![0.0f32; 4 * n];
    for (i, label) in labels.iter_mut().enumerate() {
        let p = voxel(i, shape);
        if !brain.contains(p) {
            continue;
        }
        let (l, means) = if core.contains(p) {
            (4, &table.enhancing)
        } else if ncr.contains(p) {
            (1, &table.ncr_net)
        } else if edema.contains(p) {
            (2, &table.edema)
        } else {
            (0, &table.brain)
        };
        *label = l;
        for m in 0..4 {
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            data[m * n + i] = (means[m] + eps).max(0.0);
        }
    }
    Ok((VolumeScan::new(id, shape, data, spec.spacing)?, SegVolume::new(id, shape, labels, spec.spacing)?))
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// `n` phantoms `case_0000..` with per-phantom seeds derived from `seed`.
pub fn generate_cohort(n: usize, template: &PhantomSpec, seed: u64) -> Result<Vec<(VolumeScan, SegVolume)>> {
    if n == 0 {
        return Err(Error::Empty("cohort size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    seeds
        .into_iter()
        .enumerate()
        .map(|(i, s)| generate_phantom(&PhantomSpec { seed: s, ..template.clone() }, &case_id(i)))
        .collect()
}
