//! Synthetic multi-age volumes with ground-truth masks.
//!
//! Each volume holds a porous ellipsoidal shell whose thickness grows and
//! porosity shrinks with age, plus a few tubes running along `z` at roughly
//! the same place in every volume. The tubes are
//! equally bright over most of the volume, but only the part above an
//! age-dependent height counts as foreground. Telling labeled from unlabeled
//! tube sections therefore needs the slice position and the age, which is
//! exactly the information the conditioning modules provide.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    load_manifest, save_manifest, write_mask, write_slice_u16, AnnotatedSlice, DatasetManifest, Split, VolumeDims, VolumeRecord,
    NUM_AGE_GROUPS,
};
use crate::error::{Error, Result};
use crate::plane::Plane;

const HOLE_CELLS_AZIMUTH: usize = 16;
const HOLE_CELLS_POLAR: usize = 8;
const TUBES: usize = 4;
/// Tubes are drawn over this fraction of the depth.
const TUBE_VISIBLE: (f64, f64) = (0.15, 0.85);
/// Annotated slices are drawn from this depth range.
const ANNOTATED_RANGE: (f64, f64) = (0.15, 0.85);

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub age_index: usize,
    pub seed: u64,
    pub shell_thickness: f64,
    pub porosity: f64,
    pub noise_sigma: f64,
    pub annotated_fraction: f64,
    /// Multipliers on the ellipsoid semi-axes `(z, y, x)`.
    pub axis_scale: [f64; 3],
    pub tube_radius: f64,
}

impl PhantomSpec {
    pub fn new(age_index: usize, seed: u64) -> Self {
        let a = age_index as f64;
        Self {
            depth: 64,
            height: 96,
            width: 96,
            age_index,
            seed,
            shell_thickness: 1.0 + a,
            porosity: 0.3 - 0.08 * a,
            noise_sigma: 0.05,
            annotated_fraction: 0.026,
            axis_scale: [1.0; 3],
            tube_radius: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.age_index >= NUM_AGE_GROUPS {
            return Err(Error::BadSpec(format!("age index {} out of range", self.age_index)));
        }
        if !(0.0..1.0).contains(&self.porosity) {
            return Err(Error::BadSpec(format!("porosity {} outside [0, 1)", self.porosity)));
        }
        if self.shell_thickness < 1.0 {
            return Err(Error::BadSpec(format!("shell thickness {} below 1", self.shell_thickness)));
        }
        if self.depth < 4 || self.height < 8 || self.width < 8 {
            return Err(Error::BadSpec("volume too small".into()));
        }
        if !(0.0..=1.0).contains(&self.annotated_fraction) || self.noise_sigma < 0.0 || self.tube_radius < 0.0 {
            return Err(Error::BadSpec("annotated_fraction, noise_sigma or tube_radius out of range".into()));
        }
        if self.axis_scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::BadSpec("axis scales must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> VolumeDims {
        VolumeDims::new(self.depth, self.height, self.width)
    }

    /// Depth fraction above which tube sections are labeled.
    pub fn label_onset(&self) -> f64 {
        0.7 - 0.15 * self.age_index as f64
    }
}

/// A rendered volume kept in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub image: Vec<Plane<f32>>,
    pub mask: Vec<Plane<u8>>,
    /// Sorted.
    pub annotated: Vec<usize>,
}

struct Tube {
    y: f64,
    x: f64,
}

/// Renders a volume. Pure function of `spec`.
pub fn render_volume(spec: &PhantomSpec) -> Result<PhantomVolume> {
    spec.validate()?;
    let (zd, hd, wd) = (spec.depth, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let grow = 0.85 + 0.05 * spec.age_index as f64;
    let jitter = |rng: &mut ChaCha8Rng, n: usize| (0.5 + rng.random_range(-0.03..0.03)) * n as f64;
    let center = [jitter(&mut rng, zd), jitter(&mut rng, hd), jitter(&mut rng, wd)];
    let semi = [
        0.42 * zd as f64 * grow * spec.axis_scale[0],
        0.38 * hd as f64 * grow * spec.axis_scale[1],
        0.40 * wd as f64 * grow * spec.axis_scale[2],
    ];
    let holes: Vec<bool> = (0..HOLE_CELLS_AZIMUTH * HOLE_CELLS_POLAR)
        .map(|_| rng.random_bool(spec.porosity))
        .collect();
    let tubes: Vec<Tube> = (0..TUBES)
        .map(|i| {
            // a shared layout with small per-volume deviations, so tube
            // positions are consistent across specimens of the cohort
            let angle = 2.0 * PI * (i as f64 + 0.3 + rng.random_range(-0.05..0.05)) / TUBES as f64;
            let r = 0.45 + rng.random_range(-0.03..0.03);
            Tube {
                y: center[1] + r * semi[1] * angle.sin(),
                x: center[2] + r * semi[2] * angle.cos(),
            }
        })
        .collect();

    let onset = spec.label_onset() * zd as f64;
    let tube_lo = TUBE_VISIBLE.0 * zd as f64;
    let tube_hi = TUBE_VISIBLE.1 * zd as f64;
    let mut structure = Vec::with_capacity(zd);
    let mut mask = Vec::with_capacity(zd);
    for z in 0..zd {
        let dz = z as f64 + 0.5 - center[0];
        let zf = z as f64 + 0.5;
        let tubes_here = (tube_lo..tube_hi).contains(&zf);
        let labeled_tubes = tubes_here && zf >= onset;
        let mut s = Plane::zeros(hd, wd);
        let mut m = Plane::zeros(hd, wd);
        for y in 0..hd {
            let dy = y as f64 + 0.5 - center[1];
            for x in 0..wd {
                let dx = x as f64 + 0.5 - center[2];
                let shell = in_shell([dz, dy, dx], semi, spec.shell_thickness, &holes);
                let tube = tubes_here
                    && tubes
                        .iter()
                        .any(|t| (y as f64 + 0.5 - t.y).hypot(x as f64 + 0.5 - t.x) <= spec.tube_radius);
                if shell || tube {
                    s.set(y, x, 1.0f32);
                }
                if shell || (tube && labeled_tubes) {
                    m.set(y, x, 1u8);
                }
            }
        }
        structure.push(s);
        mask.push(m);
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::BadSpec(e.to_string()))?;
    let image = structure
        .iter()
        .map(|s| {
            let blurred = gaussian_blur(s, 1.0);
            let mut img = Plane::zeros(hd, wd);
            for y in 0..hd {
                for x in 0..wd {
                    // depth-independent so location is not readable from the intensity
                    let background = 0.1 + 0.15 * x as f64 / wd as f64;
                    let v = background + 0.6 * blurred.get(y, x) as f64 + noise.sample(&mut rng);
                    img.set(y, x, v.clamp(0.0, 1.0) as f32);
                }
            }
            img
        })
        .collect();

    let lo = (ANNOTATED_RANGE.0 * zd as f64).floor() as usize;
    let hi = ((ANNOTATED_RANGE.1 * zd as f64).ceil() as usize).min(zd);
    let count = ((zd as f64 * spec.annotated_fraction).round() as usize).clamp(1, hi - lo);
    let mut annotated: Vec<usize> = sample(&mut rng, hi - lo, count).into_iter().map(|i| i + lo).collect();
    annotated.sort_unstable();

    Ok(PhantomVolume { image, mask, annotated })
}

fn in_shell(p: [f64; 3], semi: [f64; 3], thickness: f64, holes: &[bool]) -> bool {
    let rho = ((p[0] / semi[0]).powi(2) + (p[1] / semi[1]).powi(2) + (p[2] / semi[2]).powi(2)).sqrt();
    if rho > 1.0 || rho == 0.0 {
        return false;
    }
    // distance to the surface along the ray from the center
    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if norm * (1.0 / rho - 1.0) > thickness {
        return false;
    }
    let azimuth = p[1].atan2(p[2]) + PI;
    let polar = ((p[0] / semi[0]) / rho).clamp(-1.0, 1.0);
    let a = ((azimuth / (2.0 * PI) * HOLE_CELLS_AZIMUTH as f64) as usize).min(HOLE_CELLS_AZIMUTH - 1);
    let b = (((polar + 1.0) / 2.0 * HOLE_CELLS_POLAR as f64) as usize).min(HOLE_CELLS_POLAR - 1);
    !holes[b * HOLE_CELLS_AZIMUTH + a]
}

fn gaussian_blur(p: &Plane<f32>, sigma: f64) -> Plane<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let (h, w) = p.shape();
    let pass = |src: &Plane<f32>, horizontal: bool| {
        Plane::from_fn(h, w, |y, x| {
            let mut acc = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let o = k as isize - radius;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                } else {
                    ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                };
                acc += wt * src.get(yy as usize, xx as usize) as f64;
            }
            (acc / total) as f32
        })
    };
    pass(&pass(p, true), false)
}

/// Renders `spec` and writes `volumes/<id>/img_ZZZZ.png` (every slice) and
/// `mask_ZZZZ.png` (annotated slices only) under `root`.
pub fn generate_volume(spec: &PhantomSpec, root: &Path, volume_id: &str, cohort: &str) -> Result<VolumeRecord> {
    let vol = render_volume(spec)?;
    let dir = root.join("volumes").join(volume_id);
    let mut slice_paths = Vec::with_capacity(spec.depth);
    for (z, img) in vol.image.iter().enumerate() {
        let p = dir.join(format!("img_{z:04}.png"));
        write_slice_u16(img, &p)?;
        slice_paths.push(p);
    }
    let mut annotated_slices = Vec::with_capacity(vol.annotated.len());
    for &z in &vol.annotated {
        let p = dir.join(format!("mask_{z:04}.png"));
        write_mask(&vol.mask[z], &p)?;
        annotated_slices.push(AnnotatedSlice { z, mask_path: p });
    }
    Ok(VolumeRecord {
        volume_id: volume_id.to_string(),
        age_index: spec.age_index,
        dims: spec.dims(),
        slice_paths,
        annotated_slices,
        cohort_tag: cohort.to_string(),
    })
}

/// Shared settings for every volume of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub annotated_fraction: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            depth: 64,
            height: 96,
            width: 96,
            noise_sigma: 0.05,
            annotated_fraction: 0.026,
        }
    }
}

impl PhantomParams {
    pub fn spec(&self, age: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            depth: self.depth,
            height: self.height,
            width: self.width,
            noise_sigma: self.noise_sigma,
            annotated_fraction: self.annotated_fraction,
            ..PhantomSpec::new(age, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    /// Thicker shell.
    A,
    /// Thinner, more porous shell.
    B,
    /// Deformed ellipsoid with a thicker shell.
    C,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [Self::A, Self::B, Self::C];

    pub fn cohort(self) -> &'static str {
        match self {
            Self::A => "MutA",
            Self::B => "MutB",
            Self::C => "MutC",
        }
    }

    pub fn apply(self, spec: &mut PhantomSpec) {
        match self {
            Self::A => spec.shell_thickness *= 1.3,
            Self::B => {
                spec.shell_thickness = (spec.shell_thickness * 0.7).max(1.0);
                spec.porosity = (spec.porosity + 0.1).min(0.95);
            }
            Self::C => {
                spec.axis_scale = [0.9, 0.8, 1.15];
                spec.shell_thickness *= 1.3;
            }
        }
    }
}

impl FromStr for MutationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("mut") {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            _ => Err(Error::Config(format!("unknown mutation kind {s}"))),
        }
    }
}

fn volume_seed(seed: u64, split: u64, age: usize, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split * 1_000_003 + (age as u64) * 1_009 + i as u64);
    rng.random()
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn build_split(
    root: &Path,
    params: &PhantomParams,
    per_age: usize,
    seed: u64,
    stream: u64,
    split: Split,
    name: &str,
    mutation: Option<MutationKind>,
) -> Result<DatasetManifest> {
    let cohort = mutation.map(MutationKind::cohort).unwrap_or("Base");
    let mut volumes = Vec::with_capacity(per_age * NUM_AGE_GROUPS);
    for age in 0..NUM_AGE_GROUPS {
        for i in 0..per_age {
            let mut spec = params.spec(age, volume_seed(seed, stream, age, i));
            if let Some(m) = mutation {
                m.apply(&mut spec);
            }
            let id = format!("{}_e{age}_{i}", name);
            volumes.push(generate_volume(&spec, root, &id, cohort)?);
        }
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        split,
        volumes,
    };
    let path = manifest_path(root, name);
    save_manifest(&manifest, &path)?;
    // reload so callers see the same paths as anyone reading the manifest later
    load_manifest(&path)
}

/// `<root>/<name>/manifest.json`.
pub fn manifest_path(root: &Path, name: &str) -> PathBuf {
    root.join(name).join("manifest.json")
}

/// Base cohort: `per_age` train and test volumes per age, each with its own seed.
pub fn generate_cohort(
    root: &Path,
    params: &PhantomParams,
    per_age: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if per_age == 0 {
        return Err(Error::BadSpec("at least one volume per age".into()));
    }
    let train = build_split(root, params, per_age, seed, TRAIN_STREAM, Split::Train, "train", None)?;
    let test = build_split(root, params, per_age, seed, TEST_STREAM, Split::Test, "test", None)?;
    Ok((train, test))
}

/// Mutation cohort: the base test volumes' seeds with shifted morphology.
pub fn generate_mutation(
    root: &Path,
    params: &PhantomParams,
    per_age: usize,
    base_seed: u64,
    kind: MutationKind,
) -> Result<DatasetManifest> {
    let name = format!("mut_{}", kind.cohort().trim_start_matches("Mut").to_ascii_lowercase());
    build_split(root, params, per_age.max(1), base_seed, TEST_STREAM, Split::Test, &name, Some(kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(age: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            depth: 16,
            height: 32,
            width: 32,
            annotated_fraction: 0.25,
            ..PhantomSpec::new(age, seed)
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_volume(&small(1, 4)).unwrap();
        let b = render_volume(&small(1, 4)).unwrap();
        assert_eq!(a, b);
        let c = render_volume(&small(1, 5)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(0, 0);
        s.porosity = 1.0;
        assert!(matches!(render_volume(&s), Err(Error::BadSpec(_))));
        let mut s = small(0, 0);
        s.shell_thickness = 0.5;
        assert!(matches!(render_volume(&s), Err(Error::BadSpec(_))));
    }

    #[test]
    fn annotated_count_and_range() {
        let v = render_volume(&small(2, 1)).unwrap();
        assert_eq!(v.annotated.len(), 4);
        assert!(v.annotated.windows(2).all(|w| w[0] < w[1]));
        assert!(v.annotated.iter().all(|&z| (2..14).contains(&z)));
    }

    #[test]
    fn tubes_are_labeled_only_above_onset() {
        let mut s = small(0, 2);
        s.noise_sigma = 0.0;
        s.tube_radius = 3.0;
        s.porosity = 0.0;
        let v = render_volume(&s).unwrap();
        let bright_unlabeled = |z: usize| {
            v.image[z]
                .data()
                .iter()
                .zip(v.mask[z].data())
                .filter(|(&i, &m)| i > 0.6 && m == 0)
                .count()
        };
        // onset for age 0 sits at 0.7 of the depth: slice 5 is below, slice 12 above.
        // Four tubes of radius 3 leave ~100 bright unlabeled pixels below the
        // onset; above it only blur spill where structures touch remains.
        let (below, above) = (bright_unlabeled(5), bright_unlabeled(12));
        assert!(below > 40, "{below}");
        assert!(above < 10, "{above}");
    }

    #[test]
    fn mutation_names_parse() {
        assert_eq!("A".parse::<MutationKind>().unwrap(), MutationKind::A);
        assert_eq!("mutb".parse::<MutationKind>().unwrap(), MutationKind::B);
        assert!("d".parse::<MutationKind>().is_err());
    }
}
