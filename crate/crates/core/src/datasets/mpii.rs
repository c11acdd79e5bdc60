//! MPII annotations in the flattened JSON form used by most pose codebases.
//!
//! The file is an array of person records:
//!
//! ```json
//! [{"image": "000001163.jpg", "center": [594.0, 257.0], "scale": 3.02,
//!   "head_rect": [627, 100, 706, 198],
//!   "joints": [[620.0, 394.0, 1], ...16 entries...]}]
//! ```
//!
//! `joints` follows the MPII release order ([`MPII_JOINT_ORDER`]); a joint
//! with visibility 0 or negative coordinates is treated as unannotated.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::Value;

use super::{DataError, Dataset, Provenance, Sample};
use crate::imaging;
use crate::keypoints::{JointId, Keypoint, PoseAnnotation};
use crate::tensor::Tensor;

/// `MPII_JOINT_ORDER[i]` is the joint stored at position `i` of a record.
pub const MPII_JOINT_ORDER: [JointId; 16] = [
    JointId::RAnkle,
    JointId::RKnee,
    JointId::RHip,
    JointId::LHip,
    JointId::LKnee,
    JointId::LAnkle,
    JointId::Pelvis,
    JointId::Thorax,
    JointId::UpperNeck,
    JointId::HeadTop,
    JointId::RWrist,
    JointId::RElbow,
    JointId::RShoulder,
    JointId::LShoulder,
    JointId::LElbow,
    JointId::LWrist,
];

/// Side length of the person box at scale 1, pixels.
const SCALE_UNIT: f64 = 200.0;

/// Head segment used for PCKh: 0.6 of the head rectangle diagonal.
pub fn head_segment_length(rect: [f64; 4]) -> f64 {
    let [x1, y1, x2, y2] = rect;
    0.6 * (x2 - x1).hypot(y2 - y1)
}

struct Record {
    image: String,
    center: [f64; 2],
    scale: f64,
    head_rect: [f64; 4],
    joints: [[f64; 3]; 16],
}

fn field<'a>(obj: &'a Value, index: usize, name: &str) -> Result<&'a Value, DataError> {
    obj.get(name)
        .filter(|v| !v.is_null())
        .ok_or_else(|| DataError::MissingField {
            index,
            field: name.into(),
        })
}

fn numbers<const N: usize>(v: &Value, path: &Path, what: &str) -> Result<[f64; N], DataError> {
    let bad = || DataError::format(path, format!("{what}: expected an array of {N} numbers"));
    let arr = v.as_array().filter(|a| a.len() == N).ok_or_else(bad)?;
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x.as_f64().ok_or_else(bad)?;
    }
    Ok(out)
}

fn parse_record(v: &Value, index: usize, path: &Path) -> Result<Record, DataError> {
    let ctx = |name: &str| format!("record {index}, `{name}`");
    let image = field(v, index, "image")?
        .as_str()
        .ok_or_else(|| DataError::format(path, format!("{}: expected a string", ctx("image"))))?
        .to_string();
    let center = numbers::<2>(field(v, index, "center")?, path, &ctx("center"))?;
    let scale = field(v, index, "scale")?
        .as_f64()
        .filter(|s| *s > 0.0)
        .ok_or_else(|| DataError::format(path, format!("{}: expected a positive number", ctx("scale"))))?;
    let head_rect = numbers::<4>(field(v, index, "head_rect")?, path, &ctx("head_rect"))?;
    let list = field(v, index, "joints")?
        .as_array()
        .filter(|a| a.len() == 16)
        .ok_or_else(|| DataError::format(path, format!("{}: expected 16 entries", ctx("joints"))))?;
    let mut joints = [[0.0; 3]; 16];
    for (i, (slot, j)) in joints.iter_mut().zip(list).enumerate() {
        *slot = numbers::<3>(j, path, &format!("record {index}, joint {i}"))?;
    }
    Ok(Record {
        image,
        center,
        scale,
        head_rect,
        joints,
    })
}

fn read_rgb(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * w * h + y as usize * w + x as usize] = f32::from(px[ch]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("rgb shape"))
}

fn crop_sample(rec: &Record, image_dir: &Path, resolution: usize, index: usize) -> Result<Sample, DataError> {
    let full = read_rgb(&image_dir.join(&rec.image))?;
    let side = SCALE_UNIT * rec.scale;
    let (x0, y0) = (rec.center[0] - side / 2.0, rec.center[1] - side / 2.0);
    let k = side / resolution as f64;
    let mut image = imaging::warp(&full, resolution, |x, y| {
        (x0 + (x + 0.5) * k - 0.5, y0 + (y + 0.5) * k - 0.5)
    });
    imaging::quantize(&mut image);

    let limit = resolution as f64;
    let mut joints = [Keypoint::HIDDEN; 16];
    for (pos, &[x, y, vis]) in rec.joints.iter().enumerate() {
        if vis == 0.0 || x < 0.0 || y < 0.0 {
            continue;
        }
        let (cx, cy) = ((x - x0 + 0.5) / k - 0.5, (y - y0 + 0.5) / k - 0.5);
        joints[MPII_JOINT_ORDER[pos].code()] = Keypoint {
            x: cx,
            y: cy,
            visible: cx >= 0.0 && cy >= 0.0 && cx < limit && cy < limit,
        };
    }
    let head_len = head_segment_length(rec.head_rect) / k;
    if !(head_len > 0.0) {
        return Err(DataError::Invalid(format!(
            "annotation record {index}: head rectangle has zero size"
        )));
    }
    Ok(Sample {
        image,
        annotation: PoseAnnotation {
            joints,
            head_len,
            image_id: format!("{}#{index}", rec.image),
        },
    })
}

/// Reads person records and crops each around its annotated centre.
pub fn load_mpii(
    annotation_file: impl AsRef<Path>,
    image_dir: impl AsRef<Path>,
    resolution: usize,
) -> Result<Dataset, DataError> {
    let path = annotation_file.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| DataError::format(path, e.to_string()))?;
    let list = root
        .as_array()
        .ok_or_else(|| DataError::format(path, "expected a top-level array of records"))?;
    if list.is_empty() {
        return Err(DataError::Invalid(format!("{}: no annotation records", path.display())));
    }
    let records = list
        .iter()
        .enumerate()
        .map(|(i, v)| parse_record(v, i, path))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = image_dir.as_ref();
    let samples = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| crop_sample(r, dir, resolution, i).map(Arc::new))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(
        samples,
        resolution,
        Provenance::Mpii {
            annotation_file: path.display().to_string(),
        },
    )
}
