//! Joint taxonomy, subset splits, Gaussian target rendering and decoding.
//!
//! Coordinates follow the pixel-centre convention: pixel `(row i, col j)` has
//! its centre at `(x = j, y = i)`. Image and heatmap frames cover the same
//! square, so with `s = heatmap / image` a point maps as `(x + 0.5)·s − 0.5`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KeypointError {
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("unknown split tag `{0}` (expected a, b, c or d)")]
    UnknownSplit(String),
    #[error("split `{name}`: {detail}")]
    InvalidSplit { name: String, detail: String },
}

macro_rules! joints {
    ($($variant:ident = $code:literal => $name:literal),+ $(,)?) => {
        /// The 16 annotated body joints with their stable integer codes.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum JointId {
            $($variant = $code),+
        }

        impl JointId {
            pub const ALL: [JointId; 16] = [$(JointId::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(JointId::$variant => $name),+
                }
            }
        }
    };
}

joints! {
    RAnkle = 0 => "r_ankle",
    RKnee = 1 => "r_knee",
    RHip = 2 => "r_hip",
    Pelvis = 3 => "pelvis",
    Thorax = 4 => "thorax",
    UpperNeck = 5 => "upper_neck",
    HeadTop = 6 => "head_top",
    RWrist = 7 => "r_wrist",
    RElbow = 8 => "r_elbow",
    RShoulder = 9 => "r_shoulder",
    LShoulder = 10 => "l_shoulder",
    LElbow = 11 => "l_elbow",
    LWrist = 12 => "l_wrist",
    LHip = 13 => "l_hip",
    LKnee = 14 => "l_knee",
    LAnkle = 15 => "l_ankle",
}

impl JointId {
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn group(self) -> JointGroup {
        use JointId::*;
        match self {
            HeadTop | UpperNeck => JointGroup::Head,
            RShoulder | LShoulder => JointGroup::Shoulder,
            RElbow | LElbow => JointGroup::Elbow,
            RWrist | LWrist => JointGroup::Wrist,
            RHip | LHip => JointGroup::Hip,
            RKnee | LKnee => JointGroup::Knee,
            RAnkle | LAnkle => JointGroup::Ankle,
            Pelvis => JointGroup::Pelvis,
            Thorax => JointGroup::Thorax,
        }
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JointId {
    type Err = KeypointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|j| j.name() == s)
            .ok_or_else(|| KeypointError::UnknownJoint(s.to_string()))
    }
}

impl Serialize for JointId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for JointId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Reporting group; bilateral joints merge, the two head joints merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JointGroup {
    Head,
    Shoulder,
    Elbow,
    Wrist,
    Hip,
    Knee,
    Ankle,
    Pelvis,
    Thorax,
}

impl JointGroup {
    pub const ALL: [JointGroup; 9] = [
        JointGroup::Head,
        JointGroup::Shoulder,
        JointGroup::Elbow,
        JointGroup::Wrist,
        JointGroup::Hip,
        JointGroup::Knee,
        JointGroup::Ankle,
        JointGroup::Pelvis,
        JointGroup::Thorax,
    ];

    pub fn label(self) -> &'static str {
        match self {
            JointGroup::Head => "Head",
            JointGroup::Shoulder => "Shoulder",
            JointGroup::Elbow => "Elbow",
            JointGroup::Wrist => "Wrist",
            JointGroup::Hip => "Hip",
            JointGroup::Knee => "Knee",
            JointGroup::Ankle => "Ankle",
            JointGroup::Pelvis => "Pelvis",
            JointGroup::Thorax => "Thorax",
        }
    }

    /// Torso joints never count towards reported averages.
    pub fn excluded_from_average(self) -> bool {
        matches!(self, JointGroup::Pelvis | JointGroup::Thorax)
    }
}

/// Two keypoint domains: the source subset `s1` and the evaluated subset `s2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit", into = "RawSplit")]
pub struct JointSubsetSplit {
    name: String,
    s1: Vec<JointId>,
    s2: Vec<JointId>,
}

#[derive(Serialize, Deserialize)]
struct RawSplit {
    name: String,
    s1: Vec<JointId>,
    s2: Vec<JointId>,
}

impl TryFrom<RawSplit> for JointSubsetSplit {
    type Error = KeypointError;

    fn try_from(r: RawSplit) -> Result<Self, Self::Error> {
        JointSubsetSplit::new(r.name, r.s1, r.s2)
    }
}

impl From<JointSubsetSplit> for RawSplit {
    fn from(s: JointSubsetSplit) -> Self {
        RawSplit {
            name: s.name,
            s1: s.s1,
            s2: s.s2,
        }
    }
}

impl JointSubsetSplit {
    /// Validates and canonicalises (ascending joint code) both subsets.
    pub fn new(name: impl Into<String>, s1: Vec<JointId>, s2: Vec<JointId>) -> Result<Self, KeypointError> {
        let name = name.into();
        let canon = |label: &str, v: Vec<JointId>| {
            let set: BTreeSet<JointId> = v.iter().copied().collect();
            if set.len() != v.len() {
                return Err(KeypointError::InvalidSplit {
                    name: name.clone(),
                    detail: format!("{label} lists a joint twice"),
                });
            }
            if set.is_empty() {
                return Err(KeypointError::InvalidSplit {
                    name: name.clone(),
                    detail: format!("{label} is empty"),
                });
            }
            Ok(set.into_iter().collect::<Vec<_>>())
        };
        let s1 = canon("s1", s1)?;
        let s2 = canon("s2", s2)?;
        if s1 == s2 {
            return Err(KeypointError::InvalidSplit {
                name,
                detail: "s1 and s2 must differ in at least one joint".into(),
            });
        }
        Ok(Self { name, s1, s2 })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn s1(&self) -> &[JointId] {
        &self.s1
    }

    pub fn s2(&self) -> &[JointId] {
        &self.s2
    }

    pub fn intersection(&self) -> Vec<JointId> {
        self.s1.iter().copied().filter(|j| self.s2.contains(j)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serialises")
    }
}

/// One of the four built-in splits `a`..`d`.
pub fn builtin_split(tag: &str) -> Result<JointSubsetSplit, KeypointError> {
    use JointId::*;
    let head = [HeadTop, UpperNeck];
    let shoulders = [RShoulder, LShoulder];
    let elbows = [RElbow, LElbow];
    let wrists = [RWrist, LWrist];
    let hips = [RHip, LHip];
    let knees = [RKnee, LKnee];
    let ankles = [RAnkle, LAnkle];
    let torso = [Pelvis, Thorax];
    let cat = |parts: &[&[JointId]]| parts.concat();
    let (s1, s2) = match tag {
        "a" => (
            cat(&[&head, &shoulders, &torso, &hips]),
            cat(&[&knees, &ankles, &wrists, &elbows]),
        ),
        "b" => (
            cat(&[&head, &shoulders, &elbows, &hips]),
            cat(&[&knees, &ankles, &wrists, &torso]),
        ),
        "c" => (
            cat(&[&head, &shoulders, &elbows, &knees]),
            cat(&[&wrists, &ankles, &hips, &torso]),
        ),
        "d" => (
            cat(&[&knees, &ankles, &wrists, &elbows]),
            cat(&[&head, &elbows, &knees, &torso]),
        ),
        other => return Err(KeypointError::UnknownSplit(other.to_string())),
    };
    JointSubsetSplit::new(tag, s1, s2)
}

pub const BUILTIN_SPLITS: [&str; 4] = ["a", "b", "c", "d"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub const HIDDEN: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };
}

/// Ground truth for one person, indexed by joint code.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAnnotation {
    pub joints: [Keypoint; 16],
    pub head_len: f64,
    pub image_id: String,
}

impl PoseAnnotation {
    pub fn joint(&self, j: JointId) -> Keypoint {
        self.joints[j.code()]
    }

    pub fn is_valid(&self) -> bool {
        self.head_len > 0.0
            && self.head_len.is_finite()
            && self.joints.iter().all(|k| k.x.is_finite() && k.y.is_finite())
    }
}

/// Per-joint grids at one resolution, channels in subset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub joints: Vec<JointId>,
    pub resolution: usize,
    /// `joints.len() * resolution * resolution` values, row-major per joint.
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn channel(&self, k: usize) -> &[f32] {
        let plane = self.resolution * self.resolution;
        &self.data[k * plane..(k + 1) * plane]
    }
}

/// Unnormalised Gaussian targets, `exp(-|p - j|^2 / 2σ^2)` around each joint
/// projected into the heatmap frame. Hidden or out-of-frame joints give an
/// all-zero channel.
pub fn render_heatmaps(
    pose: &PoseAnnotation,
    subset: &[JointId],
    image_resolution: usize,
    resolution: usize,
    sigma: f64,
) -> Heatmap {
    let plane = resolution * resolution;
    let mut data = vec![0f32; subset.len() * plane];
    let limit = image_resolution as f64;
    let denom = 2.0 * sigma * sigma;
    for (k, &j) in subset.iter().enumerate() {
        let kp = pose.joint(j);
        if !kp.visible || kp.x < 0.0 || kp.y < 0.0 || kp.x >= limit || kp.y >= limit {
            continue;
        }
        let (cx, cy) = (
            to_heatmap(kp.x, image_resolution, resolution),
            to_heatmap(kp.y, image_resolution, resolution),
        );
        let ch = &mut data[k * plane..(k + 1) * plane];
        for y in 0..resolution {
            for x in 0..resolution {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                ch[y * resolution + x] = (-d2 / denom).exp() as f32;
            }
        }
    }
    Heatmap {
        joints: subset.to_vec(),
        resolution,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedJoint {
    pub joint: JointId,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// False when the map has no positive response. The location is still the
    /// argmax cell (the first cell for a constant map).
    pub present: bool,
}

/// Row-major-first argmax of one grid.
pub fn argmax(grid: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, &v) in grid.iter().enumerate() {
        if v > grid[best] {
            best = i;
        }
    }
    (best, grid[best])
}

/// Image-frame coordinate to heatmap-frame coordinate.
pub fn to_heatmap(v: f64, image_resolution: usize, heatmap_resolution: usize) -> f64 {
    (v + 0.5) * heatmap_resolution as f64 / image_resolution as f64 - 0.5
}

/// Heatmap-frame coordinate to image-frame coordinate.
pub fn to_image(v: f64, image_resolution: usize, heatmap_resolution: usize) -> f64 {
    (v + 0.5) * image_resolution as f64 / heatmap_resolution as f64 - 0.5
}

/// Plain argmax decoding, mapped back to image coordinates.
pub fn decode_heatmaps(h: &Heatmap, image_resolution: usize) -> Vec<DecodedJoint> {
    let back = |cell: usize| to_image(cell as f64, image_resolution, h.resolution);
    h.joints
        .iter()
        .enumerate()
        .map(|(k, &joint)| {
            let (idx, v) = argmax(h.channel(k));
            DecodedJoint {
                joint,
                x: back(idx % h.resolution),
                y: back(idx / h.resolution),
                confidence: f64::from(v),
                present: v > 0.0,
            }
        })
        .collect()
}

/// Similarity transform used for augmentation:
/// `p' = s · R(θ) · (p - c_in) + c_out`, with centres `c = (res - 1) / 2`.
///
/// `R(θ) = [[cos, -sin], [sin, cos]]` acting on `(x, y)` with y pointing down,
/// so a positive angle turns `+x` towards `+y` (clockwise on screen).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub rotation_degrees: f64,
    pub input_resolution: usize,
    pub output_resolution: usize,
}

impl Affine {
    pub fn new(scale: f64, rotation_degrees: f64, input_resolution: usize, output_resolution: usize) -> Self {
        Self {
            scale,
            rotation_degrees,
            input_resolution,
            output_resolution,
        }
    }

    pub fn identity(resolution: usize) -> Self {
        Self::new(1.0, 0.0, resolution, resolution)
    }

    fn centres(&self) -> (f64, f64) {
        (
            (self.input_resolution as f64 - 1.0) / 2.0,
            (self.output_resolution as f64 - 1.0) / 2.0,
        )
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (ci, co) = self.centres();
        let (sin, cos) = self.rotation_degrees.to_radians().sin_cos();
        let (dx, dy) = (x - ci, y - ci);
        (
            self.scale * (cos * dx - sin * dy) + co,
            self.scale * (sin * dx + cos * dy) + co,
        )
    }

    /// Maps an output-frame point back into the input frame.
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let (ci, co) = self.centres();
        let (sin, cos) = self.rotation_degrees.to_radians().sin_cos();
        let (dx, dy) = ((x - co) / self.scale, (y - co) / self.scale);
        (cos * dx + sin * dy + ci, -sin * dx + cos * dy + ci)
    }
}

/// Moves every joint through the augmentation transform. Joints leaving the
/// output frame become hidden; the head segment scales with the image.
pub fn transform_pose(pose: &PoseAnnotation, affine: &Affine) -> PoseAnnotation {
    let limit = affine.output_resolution as f64;
    let mut out = pose.clone();
    for kp in out.joints.iter_mut() {
        let (x, y) = affine.apply(kp.x, kp.y);
        let inside = x >= 0.0 && y >= 0.0 && x < limit && y < limit;
        *kp = Keypoint {
            x,
            y,
            visible: kp.visible && inside,
        };
    }
    out.head_len = pose.head_len * affine.scale;
    out
}
