//! Synthetic skull phantoms with analytically placed landmarks.
//!
//! The cranium is an ellipsoidal bone shell with a foramen opening at its
//! base and two lateral canal notches. Below it sits a half-ellipsoid
//! mandible bowl with two vertical rami. Landmarks are computed from the
//! same parameters that draw the volume, so they are exact by construction.
//!
//! Axes: x runs right to left across the midsagittal plane, y posterior to
//! anterior, z inferior to superior. The world origin is the first voxel.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::landmarks::{Frame, LandmarkId, LandmarkSet};
use crate::seeding;
use crate::volgrid::{read_cvol, write_cvol, Volume};

/// Jittered draws tried before giving up on a spec.
pub const MAX_TRIES: usize = 64;

/// Shape parameters, all in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skull {
    pub cranium_center: [f64; 3],
    pub cranium_axes: [f64; 3],
    pub shell_thickness: f64,
    pub mandible_center: [f64; 3],
    pub mandible_axes: [f64; 3],
    /// Lateral offset of each ramus axis from the midline.
    pub ramus_offset_x: f64,
    /// Offset of the rami along y from the mandible centre.
    pub ramus_offset_y: f64,
    pub ramus_radius: f64,
    /// Height of the ramus tops above the mandible centre.
    pub ramus_height: f64,
    /// Radius of the foramen and canal openings.
    pub opening_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Isotropic voxel size, mm.
    pub spacing: f64,
    pub skull: Skull,
    pub bone_hu: f64,
    pub interior_hu: f64,
    pub background_hu: f64,
    /// Fractional perturbation applied to each shape parameter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::for_grid([64, 64, 76], 2.0)
    }
}

impl PhantomSpec {
    /// A skull scaled to fill a grid of `dims` voxels at `spacing` mm.
    pub fn for_grid(dims: [usize; 3], spacing: f64) -> Self {
        let ext = dims.map(|d| d as f64 * spacing);
        let mid_x = (dims[0] as f64 - 1.0) * spacing / 2.0;
        let mid_y = (dims[1] as f64 - 1.0) * spacing / 2.0;
        let mean_ext = (ext[0] + ext[1] + ext[2]) / 3.0;
        let mandible_axes = [0.33 * ext[0], 0.26 * ext[1], 0.20 * ext[2]];
        PhantomSpec {
            dims,
            spacing,
            skull: Skull {
                cranium_center: [mid_x, mid_y, 0.62 * ext[2]],
                cranium_axes: [0.36 * ext[0], 0.38 * ext[1], 0.26 * ext[2]],
                shell_thickness: 0.05 * mean_ext,
                mandible_center: [mid_x, mid_y + 0.10 * ext[1], 0.36 * ext[2]],
                mandible_axes,
                ramus_offset_x: 0.95 * mandible_axes[0],
                ramus_offset_y: -0.3 * mandible_axes[1],
                ramus_radius: 0.035 * ext[0],
                ramus_height: 0.55 * mandible_axes[2],
                opening_radius: 1.25 * spacing,
            },
            bone_hu: 1000.0,
            interior_hu: 40.0,
            background_hu: -1000.0,
            jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("phantom spacing must be positive, got {}", self.spacing)));
        }
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        if !(self.bone_hu > self.interior_hu && self.interior_hu > self.background_hu) {
            return Err(Error::Config("phantom HU must satisfy bone > interior > background".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("phantom jitter must be in [0, 1), got {}", self.jitter)));
        }
        if !self.skull.fits(self.dims, self.spacing) {
            return Err(Error::Config("phantom skull does not fit the grid with a 2-voxel margin".into()));
        }
        Ok(())
    }
}

/// Squared normalized ellipsoid radius of `p`.
fn ell(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum()
}

/// Point where the ray from `c` along `dir` meets the ellipsoid `axes`.
fn surface_point(c: [f64; 3], axes: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
    let s = 1.0 / ell(dir, [0.0; 3], axes).sqrt();
    [c[0] + dir[0] * s, c[1] + dir[1] * s, c[2] + dir[2] * s]
}

fn shrink(axes: [f64; 3], by: f64) -> [f64; 3] {
    axes.map(|a| a - by)
}

impl Skull {
    fn mid_cranium(&self) -> [f64; 3] {
        shrink(self.cranium_axes, self.shell_thickness / 2.0)
    }

    fn mid_mandible(&self) -> [f64; 3] {
        shrink(self.mandible_axes, self.shell_thickness / 2.0)
    }

    fn ramus_axis(&self, side: f64) -> [f64; 2] {
        [
            self.mandible_center[0] + side * self.ramus_offset_x,
            self.mandible_center[1] + self.ramus_offset_y,
        ]
    }

    fn ramus_bottom(&self) -> f64 {
        self.mandible_center[2] - 0.3 * self.mandible_axes[2]
    }

    /// Sides: right is `-1` (lower x), left is `+1`.
    pub fn landmarks(&self) -> LandmarkSet {
        use LandmarkId::*;
        let cc = self.cranium_center;
        let cm = self.mid_cranium();
        let mc = self.mandible_center;
        let mm = self.mid_mandible();
        let mut set = LandmarkSet::new(Frame::World);
        set.insert(Na, surface_point(cc, cm, [0.0, 1.0, -0.25]));
        set.insert(Bregma, surface_point(cc, cm, [0.0, -0.15, 1.0]));
        set.insert(CFM, surface_point(cc, cm, [0.0, -0.25, -1.0]));
        set.insert(Me, surface_point(mc, mm, [0.0, 0.35, -1.0]));
        for (side, or, po, cor, f) in [(-1.0, R_Or, R_Po, R_Cor, R_F), (1.0, L_Or, L_Po, L_Cor, L_F)] {
            set.insert(or, surface_point(cc, cm, [side * 0.45, 1.0, -0.45]));
            set.insert(po, surface_point(cc, cm, [side, -0.05, -0.3]));
            let [rx, ry] = self.ramus_axis(side);
            let top = mc[2] + self.ramus_height;
            set.insert(cor, [rx, ry, top - 0.5 * self.ramus_radius]);
            let inner = rx - side * 0.5 * self.ramus_radius;
            set.insert(f, [inner, ry, self.ramus_bottom() + 0.5 * (top - self.ramus_bottom())]);
        }
        set
    }

    /// Tissue class at world point `p`.
    fn hu_at(&self, p: [f64; 3], spec: &PhantomSpec) -> f64 {
        let cc = self.cranium_center;
        let mut hu = spec.background_hu;
        if ell(p, cc, self.cranium_axes) <= 1.0 {
            hu = if ell(p, cc, shrink(self.cranium_axes, self.shell_thickness)) <= 1.0 {
                spec.interior_hu
            } else {
                spec.bone_hu
            };
            if hu == spec.bone_hu && self.in_opening(p) {
                hu = spec.interior_hu;
            }
        }
        let mc = self.mandible_center;
        if p[2] <= mc[2]
            && ell(p, mc, self.mandible_axes) <= 1.0
            && ell(p, mc, shrink(self.mandible_axes, self.shell_thickness)) > 1.0
        {
            hu = spec.bone_hu;
        }
        if p[2] >= self.ramus_bottom() && p[2] <= mc[2] + self.ramus_height {
            for side in [-1.0, 1.0] {
                let [rx, ry] = self.ramus_axis(side);
                if (p[0] - rx).powi(2) + (p[1] - ry).powi(2) <= self.ramus_radius.powi(2) {
                    hu = spec.bone_hu;
                }
            }
        }
        hu
    }

    /// Foramen (vertical) and canal (lateral) openings through the shell.
    fn in_opening(&self, p: [f64; 3]) -> bool {
        let r2 = self.opening_radius.powi(2);
        let cc = self.cranium_center;
        let cm = self.mid_cranium();
        let cfm = surface_point(cc, cm, [0.0, -0.25, -1.0]);
        if p[2] < cc[2] && (p[0] - cfm[0]).powi(2) + (p[1] - cfm[1]).powi(2) <= r2 {
            return true;
        }
        let po = surface_point(cc, cm, [1.0, -0.05, -0.3]);
        (p[0] - cc[0]).abs() > 0.5 * self.cranium_axes[0] && (p[1] - po[1]).powi(2) + (p[2] - po[2]).powi(2) <= r2
    }

    /// Every structure stays at least two voxels inside the grid.
    pub fn fits(&self, dims: [usize; 3], spacing: f64) -> bool {
        let margin = 2.0 * spacing;
        let hi = dims.map(|d| (d as f64 - 1.0) * spacing - margin);
        let cc = self.cranium_center;
        let mc = self.mandible_center;
        let half_x = self.mandible_axes[0].max(self.ramus_offset_x + self.ramus_radius);
        let boxes = [
            [
                [cc[0] - self.cranium_axes[0], cc[0] + self.cranium_axes[0]],
                [cc[1] - self.cranium_axes[1], cc[1] + self.cranium_axes[1]],
                [cc[2] - self.cranium_axes[2], cc[2] + self.cranium_axes[2]],
            ],
            [
                [mc[0] - half_x, mc[0] + half_x],
                [mc[1] - self.mandible_axes[1], mc[1] + self.mandible_axes[1]],
                [mc[2] - self.mandible_axes[2], mc[2] + self.ramus_height],
            ],
        ];
        let thin = self.shell_thickness < self.cranium_axes.iter().chain(&self.mandible_axes).fold(f64::MAX, |a, &b| a.min(b));
        thin && boxes.iter().all(|b| (0..3).all(|a| b[a][0] >= margin && b[a][1] <= hi[a]))
    }

    /// Scales every shape parameter by `1 + jitter * u`, `u` uniform in
    /// `[-1, 1]`. Centres move along y and z only so the skull stays
    /// symmetric about its midsagittal plane.
    pub fn jittered(&self, jitter: f64, ext: [f64; 3], rng: &mut impl Rng) -> Skull {
        let mut f = || 1.0 + jitter * rng.gen_range(-1.0..=1.0);
        let mut s = *self;
        s.cranium_axes = s.cranium_axes.map(|a| a * f());
        s.shell_thickness *= f();
        s.mandible_axes = s.mandible_axes.map(|a| a * f());
        s.ramus_height *= f();
        s.ramus_offset_x *= f();
        for a in 1..3 {
            s.cranium_center[a] += (f() - 1.0) * 0.05 * ext[a];
            s.mandible_center[a] += (f() - 1.0) * 0.05 * ext[a];
        }
        s
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub seed: u64,
    pub skull: Skull,
    pub volume: Volume,
    /// World frame.
    pub landmarks: LandmarkSet,
}

fn landmarks_inside(lm: &LandmarkSet, dims: [usize; 3], spacing: f64) -> bool {
    lm.iter().all(|(_, p)| (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] as f64 - 1.0) * spacing))
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let ext = spec.dims.map(|d| d as f64 * spec.spacing);
    let mut rng = seeding::substream(spec.seed, seeding::PHANTOM);
    for _ in 0..MAX_TRIES {
        let skull = if spec.jitter > 0.0 {
            spec.skull.jittered(spec.jitter, ext, &mut rng)
        } else {
            spec.skull
        };
        let landmarks = skull.landmarks();
        if !skull.fits(spec.dims, spec.spacing) || !landmarks_inside(&landmarks, spec.dims, spec.spacing) {
            continue;
        }
        let sp = spec.spacing;
        let volume = Volume::from_fn(spec.dims, [sp; 3], [0.0; 3], |i, j, k| {
            skull.hu_at([i as f64 * sp, j as f64 * sp, k as f64 * sp], spec)
        })?;
        return Ok(Phantom {
            seed: spec.seed,
            skull,
            volume,
            landmarks,
        });
    }
    Err(Error::Config(format!(
        "phantom with jitter {} did not fit the grid in {MAX_TRIES} draws",
        spec.jitter
    )))
}

/// Seed of sample `k` derived from the base seed.
pub fn sample_seed(base: u64, k: usize) -> u64 {
    seeding::indexed_substream(base, seeding::PHANTOM, k as u64).gen()
}

pub fn generate_dataset(n: usize, base: &PhantomSpec) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    (0..n)
        .map(|k| {
            generate(&PhantomSpec {
                seed: sample_seed(base.seed, k),
                ..*base
            })
        })
        .collect()
}

/// Disjoint train/test index sets; `round(n * train_fraction)` samples go to
/// training, keeping at least one on each side when `n >= 2`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::substream(seed, seeding::SHUFFLE));
    let mut n_train = (n as f64 * train_fraction).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn sample_dir_name(k: usize) -> String {
    format!("sample_{k}")
}

pub const VOLUME_FILE: &str = "volume.cvol";
pub const LANDMARK_FILE: &str = "landmarks.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRAIN_LIST: &str = "train.txt";
pub const TEST_LIST: &str = "test.txt";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `sample_<k>/{volume.cvol,landmarks.txt}`, `manifest.txt` with one
/// `sample_<k><TAB>seed` line per sample, and `train.txt` / `test.txt`
/// listing the split.
pub fn write_dataset(dir: impl AsRef<Path>, phantoms: &[Phantom], train: &[usize], test: &[usize]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# sample\tseed\n");
    for (k, p) in phantoms.iter().enumerate() {
        let sub = dir.join(sample_dir_name(k));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_cvol(&p.volume, sub.join(VOLUME_FILE))?;
        p.landmarks.write(sub.join(LANDMARK_FILE))?;
        let _ = writeln!(manifest, "{}\t{}", sample_dir_name(k), p.seed);
    }
    write_text(&dir.join(MANIFEST_FILE), &manifest)?;
    let list = |ids: &[usize]| ids.iter().map(|&k| sample_dir_name(k) + "\n").collect::<String>();
    write_text(&dir.join(TRAIN_LIST), &list(train))?;
    write_text(&dir.join(TEST_LIST), &list(test))
}

/// Sample directory names from a split list file.
pub fn read_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Sample directory names from `manifest.txt`, in order.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let names = read_list(dir.as_ref().join(MANIFEST_FILE))?;
    Ok(names
        .into_iter()
        .filter_map(|l| l.split_whitespace().next().map(String::from))
        .collect())
}

/// Loads one sample directory.
pub fn read_sample(dir: impl AsRef<Path>) -> Result<(Volume, LandmarkSet)> {
    let dir = dir.as_ref();
    Ok((read_cvol(dir.join(VOLUME_FILE))?, LandmarkSet::read(dir.join(LANDMARK_FILE))?))
}

pub fn sample_paths(dir: &Path, names: &[String]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate().unwrap();
        PhantomSpec::for_grid([128, 128, 152], 2.0).validate().unwrap();
        let mut s = PhantomSpec::default();
        s.interior_hu = 2000.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_jitter_mirrors_exactly() {
        let p = generate(&PhantomSpec::default()).unwrap();
        let mid = p.skull.cranium_center[0];
        for id in LandmarkId::ALL {
            let a = p.landmarks.get(id).unwrap();
            match id.mirror() {
                Some(m) => {
                    let b = p.landmarks.get(m).unwrap();
                    assert!((a[0] + b[0] - 2.0 * mid).abs() < 1e-9, "{id}");
                    assert!((a[1] - b[1]).abs() < 1e-9 && (a[2] - b[2]).abs() < 1e-9);
                }
                None => assert!((a[0] - mid).abs() < 1e-9, "{id}"),
            }
        }
        let d = p.volume.dims();
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    assert_eq!(p.volume.get(i, j, k), p.volume.get(d[0] - 1 - i, j, k));
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = PhantomSpec {
            jitter: 0.1,
            seed: 99,
            ..PhantomSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.landmarks, b.landmarks);
        let c = generate(&PhantomSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.landmarks, c.landmarks);
    }

    /// Rounded landmark voxel has a bone voxel in its 3x3x3 neighbourhood.
    fn near_bone(p: &Phantom, bone: f64) -> Vec<LandmarkId> {
        let d = p.volume.dims();
        let mut bad = Vec::new();
        for (id, w) in p.landmarks.iter() {
            let v = p.volume.world_to_voxel(w).map(|c| c.round() as i64);
            let mut ok = false;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let q = [v[0] + dx, v[1] + dy, v[2] + dz];
                        if (0..3).all(|a| q[a] >= 0 && q[a] < d[a] as i64)
                            && p.volume.get(q[0] as usize, q[1] as usize, q[2] as usize) >= bone - 1.0
                        {
                            ok = true;
                        }
                    }
                }
            }
            if !ok {
                bad.push(id);
            }
        }
        bad
    }

    #[test]
    fn landmarks_sit_on_bone() {
        for seed in 0..12 {
            let spec = PhantomSpec {
                jitter: if seed == 0 { 0.0 } else { 0.1 },
                seed,
                ..PhantomSpec::default()
            };
            let p = generate(&spec).unwrap();
            assert!(near_bone(&p, spec.bone_hu).is_empty(), "seed {seed}: {:?}", near_bone(&p, spec.bone_hu));
        }
    }

    #[test]
    fn jittered_landmarks_stay_in_grid() {
        let base = PhantomSpec {
            jitter: 0.1,
            seed: 3,
            ..PhantomSpec::default()
        };
        for p in generate_dataset(40, &base).unwrap() {
            assert!(landmarks_inside(&p.landmarks, base.dims, base.spacing));
            assert!(p.landmarks.is_complete());
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (train, test) = split_indices(27, 2.0 / 3.0, 7);
        assert_eq!((train.len(), test.len()), (18, 9));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..27).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.5, 0), (vec![0], vec![]));
        assert_eq!(generate_dataset(1, &PhantomSpec::default()).unwrap().len(), 1);
        assert!(generate_dataset(0, &PhantomSpec::default()).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let base = PhantomSpec {
            dims: [24, 24, 28],
            ..PhantomSpec::for_grid([24, 24, 28], 4.0)
        };
        let set = generate_dataset(3, &base).unwrap();
        let (train, test) = split_indices(3, 2.0 / 3.0, 0);
        write_dataset(dir.path(), &set, &train, &test).unwrap();
        let names = read_manifest(dir.path()).unwrap();
        assert_eq!(names, vec!["sample_0", "sample_1", "sample_2"]);
        assert_eq!(read_list(dir.path().join(TRAIN_LIST)).unwrap().len(), 2);
        let (v, lm) = read_sample(dir.path().join("sample_1")).unwrap();
        assert_eq!(v, set[1].volume);
        assert_eq!(lm, set[1].landmarks);
    }
}
