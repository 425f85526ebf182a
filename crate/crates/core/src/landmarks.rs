//! The twelve-point cephalometric catalog, landmark sets in world or voxel
//! frames, and the per-axis smooth-decay training targets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::Volume;

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LandmarkId {
    Na,
    Bregma,
    CFM,
    R_Or,
    L_Or,
    R_Po,
    L_Po,
    Me,
    R_Cor,
    L_Cor,
    R_F,
    L_F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Midsagittal,
    Horizontal,
    Mandible,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Midsagittal, Group::Horizontal, Group::Mandible];

    pub fn name(self) -> &'static str {
        match self {
            Group::Midsagittal => "Midsagittal",
            Group::Horizontal => "Horizontal",
            Group::Mandible => "Mandible",
        }
    }

    pub fn members(self) -> impl Iterator<Item = LandmarkId> {
        LandmarkId::ALL.into_iter().filter(move |id| id.group() == self)
    }
}

impl LandmarkId {
    pub const COUNT: usize = 12;

    pub const ALL: [LandmarkId; 12] = [
        LandmarkId::Na,
        LandmarkId::Bregma,
        LandmarkId::CFM,
        LandmarkId::R_Or,
        LandmarkId::L_Or,
        LandmarkId::R_Po,
        LandmarkId::L_Po,
        LandmarkId::Me,
        LandmarkId::R_Cor,
        LandmarkId::L_Cor,
        LandmarkId::R_F,
        LandmarkId::L_F,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LandmarkId::Na => "Na",
            LandmarkId::Bregma => "Bregma",
            LandmarkId::CFM => "CFM",
            LandmarkId::R_Or => "R_Or",
            LandmarkId::L_Or => "L_Or",
            LandmarkId::R_Po => "R_Po",
            LandmarkId::L_Po => "L_Po",
            LandmarkId::Me => "Me",
            LandmarkId::R_Cor => "R_Cor",
            LandmarkId::L_Cor => "L_Cor",
            LandmarkId::R_F => "R_F",
            LandmarkId::L_F => "L_F",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            LandmarkId::Na => "nasion: frontonasal junction on the midline",
            LandmarkId::Bregma => "bregma: coronal/sagittal suture intersection",
            LandmarkId::CFM => "centre of foramen magnum",
            LandmarkId::R_Or | LandmarkId::L_Or => "orbitale: lowest point of the orbital rim",
            LandmarkId::R_Po | LandmarkId::L_Po => "porion: top of the external auditory meatus",
            LandmarkId::Me => "menton: lowest point of the symphysis",
            LandmarkId::R_Cor | LandmarkId::L_Cor => "coronoid process tip",
            LandmarkId::R_F | LandmarkId::L_F => "mandibular foramen",
        }
    }

    pub fn group(self) -> Group {
        use LandmarkId::*;
        match self {
            Na | Bregma | CFM => Group::Midsagittal,
            R_Or | L_Or | R_Po | L_Po => Group::Horizontal,
            Me | R_Cor | L_Cor | R_F | L_F => Group::Mandible,
        }
    }

    /// Position in [`LandmarkId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Left/right counterpart, `None` for midline points.
    pub fn mirror(self) -> Option<LandmarkId> {
        use LandmarkId::*;
        match self {
            R_Or => Some(L_Or),
            L_Or => Some(R_Or),
            R_Po => Some(L_Po),
            L_Po => Some(R_Po),
            R_Cor => Some(L_Cor),
            L_Cor => Some(R_Cor),
            R_F => Some(L_F),
            L_F => Some(R_F),
            Na | Bregma | CFM | Me => None,
        }
    }
}

impl fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LandmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LandmarkId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown landmark id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    World,
    Voxel,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::World => "world",
            Frame::Voxel => "voxel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    frame: Frame,
    entries: BTreeMap<LandmarkId, [f64; 3]>,
}

impl LandmarkSet {
    pub fn new(frame: Frame) -> Self {
        LandmarkSet {
            frame,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_points(frame: Frame, points: impl IntoIterator<Item = (LandmarkId, [f64; 3])>) -> Self {
        LandmarkSet {
            frame,
            entries: points.into_iter().collect(),
        }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn insert(&mut self, id: LandmarkId, point: [f64; 3]) {
        self.entries.insert(id, point);
    }

    pub fn get(&self, id: LandmarkId) -> Option<[f64; 3]> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == LandmarkId::COUNT
    }

    /// Entries in catalog order.
    pub fn iter(&self) -> impl Iterator<Item = (LandmarkId, [f64; 3])> + '_ {
        self.entries.iter().map(|(&id, &p)| (id, p))
    }

    pub fn require_complete(&self) -> Result<()> {
        match LandmarkId::ALL.iter().find(|id| !self.entries.contains_key(id)) {
            Some(missing) => Err(Error::InvalidArgument(format!(
                "landmark set is missing {missing}"
            ))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#frame={}\n", self.frame.name());
        for (id, p) in self.iter() {
            out.push_str(&format!("{} {} {} {}\n", id, p[0], p[1], p[2]));
        }
        out
    }

    pub fn parse_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or("empty landmark file")?;
        let frame = match header.trim() {
            "#frame=world" => Frame::World,
            "#frame=voxel" => Frame::Voxel,
            other => return Err(format!("line 1: expected #frame=world|voxel, got {other:?}")),
        };
        let mut set = LandmarkSet::new(frame);
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(format!("line {}: expected `<id> <x> <y> <z>`", lineno + 1));
            }
            let id: LandmarkId = fields[0].parse().map_err(|e: Error| format!("line {}: {e}", lineno + 1))?;
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = fields[a + 1]
                    .parse()
                    .map_err(|_| format!("line {}: bad number {:?}", lineno + 1, fields[a + 1]))?;
            }
            if set.entries.insert(id, p).is_some() {
                return Err(format!("line {}: duplicate landmark {id}", lineno + 1));
            }
        }
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LandmarkSet::parse_text(&text).map_err(|d| Error::format(path, d))
    }
}

/// Maps a world-frame set onto `v`'s voxel grid, rounding to the nearest
/// voxel (half away from zero).
pub fn landmarks_world_to_voxel(lm: &LandmarkSet, v: &Volume) -> Result<LandmarkSet> {
    if lm.frame != Frame::World {
        return Err(Error::InvalidArgument("expected a world-frame landmark set".into()));
    }
    let dims = v.dims();
    let mut out = LandmarkSet::new(Frame::Voxel);
    for (id, p) in lm.iter() {
        let idx = v.world_to_voxel(p).map(f64::round);
        if (0..3).any(|a| idx[a] < 0.0 || idx[a] >= dims[a] as f64) {
            return Err(Error::OutOfBounds {
                landmark: id.to_string(),
                detail: format!("voxel {idx:?} outside grid {dims:?}"),
            });
        }
        out.insert(id, idx);
    }
    Ok(out)
}

pub fn landmarks_voxel_to_world(lm: &LandmarkSet, v: &Volume) -> Result<LandmarkSet> {
    if lm.frame != Frame::Voxel {
        return Err(Error::InvalidArgument("expected a voxel-frame landmark set".into()));
    }
    Ok(LandmarkSet::from_points(
        Frame::World,
        lm.iter().map(|(id, p)| (id, v.voxel_to_world(p))),
    ))
}

/// Integer voxel index of a voxel-frame point, bounds-checked.
pub fn voxel_index(id: LandmarkId, p: [f64; 3], dims: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if !(r >= 0.0 && r < dims[a] as f64) {
            return Err(Error::OutOfBounds {
                landmark: id.to_string(),
                detail: format!("index {p:?} outside grid {dims:?}"),
            });
        }
        out[a] = r as usize;
    }
    Ok(out)
}

/// Three per-axis distributions for one landmark: `axes[0]` over x indices,
/// `axes[1]` over y, `axes[2]` over z. Used both for targets and for
/// network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisProfile {
    pub id: LandmarkId,
    pub axes: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisTargets {
    pub sigma: f64,
    pub profiles: Vec<AxisProfile>,
}

impl AxisTargets {
    pub fn get(&self, id: LandmarkId) -> Option<&AxisProfile> {
        self.profiles.iter().find(|p| p.id == id)
    }

    /// Sum of the per-axis Shannon entropies; a lower bound for the summed
    /// cross-entropy against these targets.
    pub fn entropy(&self) -> f64 {
        self.profiles
            .iter()
            .flat_map(|p| p.axes.iter())
            .map(|t| entropy(t))
            .sum()
    }
}

pub fn entropy(t: &[f64]) -> f64 {
    t.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Normalized discrete Gaussian of length `len` centred on `mu`.
///
/// Far tails are floored at the smallest positive normal so every entry
/// stays strictly positive even where `exp` underflows.
pub fn gaussian_axis(len: usize, mu: usize, sigma: f64) -> Vec<f64> {
    let two_var = 2.0 * sigma * sigma;
    let mut t: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - mu as f64;
            (-d * d / two_var).exp().max(f64::MIN_POSITIVE)
        })
        .collect();
    let z: f64 = t.iter().sum();
    for x in &mut t {
        *x /= z;
    }
    t
}

pub fn encode_targets(lm: &LandmarkSet, dims: [usize; 3], sigma: f64) -> Result<AxisTargets> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if lm.frame != Frame::Voxel {
        return Err(Error::InvalidArgument("targets need a voxel-frame landmark set".into()));
    }
    let mut profiles = Vec::with_capacity(lm.len());
    for (id, p) in lm.iter() {
        let idx = voxel_index(id, p, dims)?;
        profiles.push(AxisProfile {
            id,
            axes: [
                gaussian_axis(dims[0], idx[0], sigma),
                gaussian_axis(dims[1], idx[1], sigma),
                gaussian_axis(dims[2], idx[2], sigma),
            ],
        });
    }
    Ok(AxisTargets { sigma, profiles })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeRule {
    /// Highest-probability index, lowest index on ties.
    #[default]
    Argmax,
    /// Probability-weighted mean index.
    Expectation,
}

/// Argmax with lowest-index tie-break.
pub fn decode_axis(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("cannot decode an empty vector".into()));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p.is_nan() {
            return Err(Error::InvalidArgument(format!("NaN probability at index {i}")));
        }
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn expected_index(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("cannot decode an empty vector".into()));
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::InvalidArgument("probabilities must have positive finite mass".into()));
    }
    Ok(probs.iter().enumerate().map(|(i, &p)| i as f64 * p).sum::<f64>() / total)
}

pub fn decode_prediction(profile: &AxisProfile, rule: DecodeRule) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = match rule {
            DecodeRule::Argmax => decode_axis(&profile.axes[a])? as f64,
            DecodeRule::Expectation => expected_index(&profile.axes[a])?,
        };
    }
    Ok(out)
}

/// Voxel-frame landmark set from per-landmark network outputs.
pub fn decode_all(profiles: &[AxisProfile], rule: DecodeRule) -> Result<LandmarkSet> {
    let mut set = LandmarkSet::new(Frame::Voxel);
    for p in profiles {
        set.insert(p.id, decode_prediction(p, rule)?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catalog_partition() {
        assert_eq!(LandmarkId::ALL.len(), 12);
        let sizes: Vec<usize> = Group::ALL.iter().map(|g| g.members().count()).collect();
        assert_eq!(sizes, vec![3, 4, 5]);
        for (i, id) in LandmarkId::ALL.iter().enumerate() {
            assert_eq!(id.index(), i);
            assert_eq!(id.name().parse::<LandmarkId>().unwrap(), *id);
            if let Some(m) = id.mirror() {
                assert_eq!(m.mirror(), Some(*id));
                assert_eq!(m.group(), id.group());
            }
        }
        assert!("Nasion".parse::<LandmarkId>().is_err());
    }

    #[test]
    fn targets_peak_at_landmark() {
        let lm = LandmarkSet::from_points(Frame::Voxel, [(LandmarkId::Na, [64.0, 82.0, 24.0])]);
        let t = encode_targets(&lm, [128, 128, 152], 3.0).unwrap();
        let p = t.get(LandmarkId::Na).unwrap();
        assert_eq!(decode_axis(&p.axes[0]).unwrap(), 64);
        assert_eq!(decode_axis(&p.axes[1]).unwrap(), 82);
        assert_eq!(decode_axis(&p.axes[2]).unwrap(), 24);
        assert_eq!(p.axes[0].len(), 128);
        assert_eq!(p.axes[2].len(), 152);
    }

    #[test]
    fn neighbour_ratio_sigma3() {
        // closed form exp(-1/18) = 0.945959...
        let want = (-1.0f64 / 18.0).exp();
        assert!((want - 0.945_959_4).abs() < 1e-7);
        let t = gaussian_axis(40, 20, 3.0);
        assert!((t[21] / t[20] - want).abs() < 1e-12);
        assert!((t[19] / t[20] - want).abs() < 1e-12);
        assert_eq!(t[19], t[21]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let lm = LandmarkSet::from_points(Frame::Voxel, [(LandmarkId::Me, [10.0, 5.0, 40.0])]);
        match encode_targets(&lm, [16, 16, 16], 3.0) {
            Err(Error::OutOfBounds { landmark, .. }) => assert_eq!(landmark, "Me"),
            other => panic!("expected out-of-bounds, got {other:?}"),
        }
        assert!(encode_targets(&lm, [64, 64, 64], 0.0).is_err());
    }

    #[test]
    fn decode_edge_cases() {
        let mut one_hot = vec![0.0; 64];
        one_hot[40] = 1.0;
        assert_eq!(decode_axis(&one_hot).unwrap(), 40);
        assert_eq!(decode_axis(&vec![1.0 / 17.0; 17]).unwrap(), 0);
        assert!(matches!(decode_axis(&[]), Err(Error::InvalidArgument(_))));
        assert!((expected_index(&[0.25, 0.5, 0.25]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_exhaustive() {
        for sigma in [1.0, 2.0, 3.0, 5.0] {
            for mu in 0..64 {
                assert_eq!(decode_axis(&gaussian_axis(64, mu, sigma)).unwrap(), mu);
            }
        }
    }

    #[test]
    fn world_to_voxel_rounding() {
        let v = Volume::filled([128, 128, 152], [2.0; 3], [0.0; 3], 0.0).unwrap();
        let lm = LandmarkSet::from_points(
            Frame::World,
            [
                (LandmarkId::Na, [128.0, 164.0, 48.0]),
                (LandmarkId::Me, [128.9, 164.0, 48.0]),
                (LandmarkId::CFM, [129.0, 10.0, 3.0]),
            ],
        );
        let vox = landmarks_world_to_voxel(&lm, &v).unwrap();
        assert_eq!(vox.frame(), Frame::Voxel);
        assert_eq!(vox.get(LandmarkId::Na), Some([64.0, 82.0, 24.0]));
        assert_eq!(vox.get(LandmarkId::Me), Some([64.0, 82.0, 24.0]));
        // 64.5 and 1.5 round away from zero
        assert_eq!(vox.get(LandmarkId::CFM), Some([65.0, 5.0, 2.0]));
        let back = landmarks_voxel_to_world(&vox, &v).unwrap();
        assert_eq!(back.get(LandmarkId::Na), Some([128.0, 164.0, 48.0]));

        let out = LandmarkSet::from_points(Frame::World, [(LandmarkId::L_F, [-2.0, 0.0, 0.0])]);
        match landmarks_world_to_voxel(&out, &v) {
            Err(Error::OutOfBounds { landmark, .. }) => assert_eq!(landmark, "L_F"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_format_round_trip() {
        let lm = LandmarkSet::from_points(
            Frame::World,
            LandmarkId::ALL.iter().enumerate().map(|(i, &id)| (id, [i as f64 * 1.5, -0.25, 1e-3 * i as f64])),
        );
        let text = lm.to_text();
        assert!(text.starts_with("#frame=world\nNa 0 -0.25 0\n"));
        assert_eq!(LandmarkSet::parse_text(&text).unwrap(), lm);
        assert!(LandmarkSet::parse_text("#frame=mm\n").is_err());
        assert!(LandmarkSet::parse_text("#frame=voxel\nXx 1 2 3\n").is_err());
        assert!(LandmarkSet::parse_text("#frame=voxel\nNa 1 2\n").is_err());
        assert!(LandmarkSet::parse_text("#frame=voxel\nNa 1 2 3\nNa 1 2 3\n").is_err());
    }

    proptest! {
        #[test]
        fn targets_normalized_and_positive(len in 1usize..200, frac in 0.0f64..1.0, sigma in 0.5f64..8.0) {
            let mu = ((len - 1) as f64 * frac).round() as usize;
            let t = gaussian_axis(len, mu, sigma);
            let s: f64 = t.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(t.iter().all(|&x| x > 0.0));
            // unimodal about mu
            for i in 1..=mu {
                prop_assert!(t[i] >= t[i - 1]);
            }
            for i in mu + 1..len {
                prop_assert!(t[i] <= t[i - 1]);
            }
        }

        #[test]
        fn decode_is_scale_invariant(v in prop::collection::vec(0.0f64..1.0, 1..50), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(decode_axis(&v).unwrap(), decode_axis(&scaled).unwrap());
        }
    }
}
