//! Procedural stick figures with exact joint annotations.
//!
//! A fixed kinematic tree rooted at the pelvis is posed with seeded bone
//! lengths and angles, fitted into the frame, and drawn as anti-aliased
//! segments (one colour per limb so left and right are distinguishable)
//! plus a head disc over a striped, noisy background.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DataError, Dataset, Provenance, Sample};
use crate::imaging;
use crate::keypoints::{JointId, Keypoint, PoseAnnotation};
use crate::rng;
use crate::tensor::Tensor;

pub const MIN_RESOLUTION: usize = 16;

/// Half-width of a drawn limb, pixels.
const LIMB_HALF_WIDTH: f64 = 1.0;
const MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bone {
    pub parent: JointId,
    pub child: JointId,
    pub color: [f32; 3],
}

const TORSO: [f32; 3] = [1.0, 1.0, 1.0];
const R_ARM: [f32; 3] = [1.0, 0.2, 0.2];
const L_ARM: [f32; 3] = [0.2, 1.0, 0.2];
const R_LEG: [f32; 3] = [1.0, 0.2, 1.0];
const L_LEG: [f32; 3] = [0.2, 1.0, 1.0];
const HEAD: [f32; 3] = [0.8, 0.75, 0.35];

macro_rules! bone {
    ($p:ident, $c:ident, $col:expr) => {
        Bone {
            parent: JointId::$p,
            child: JointId::$c,
            color: $col,
        }
    };
}

/// Drawn segments. The upper-neck to head-top span is drawn as the head disc.
pub const BONES: [Bone; 14] = [
    bone!(Pelvis, Thorax, TORSO),
    bone!(Thorax, UpperNeck, TORSO),
    bone!(Thorax, RShoulder, TORSO),
    bone!(Thorax, LShoulder, TORSO),
    bone!(Pelvis, RHip, TORSO),
    bone!(Pelvis, LHip, TORSO),
    bone!(RShoulder, RElbow, R_ARM),
    bone!(RElbow, RWrist, R_ARM),
    bone!(LShoulder, LElbow, L_ARM),
    bone!(LElbow, LWrist, L_ARM),
    bone!(RHip, RKnee, R_LEG),
    bone!(RKnee, RAnkle, R_LEG),
    bone!(LHip, LKnee, L_LEG),
    bone!(LKnee, LAnkle, L_LEG),
];

/// Unit vector at angle `phi` from straight down, positive towards +x.
fn dir(phi: f64) -> (f64, f64) {
    (phi.sin(), phi.cos())
}

fn step(from: (f64, f64), len: f64, phi: f64) -> (f64, f64) {
    let (dx, dy) = dir(phi);
    (from.0 + len * dx, from.1 + len * dy)
}

/// Joint positions in body units (pelvis at the origin, y down).
fn pose_skeleton(r: &mut ChaCha8Rng) -> [(f64, f64); 16] {
    use JointId::*;
    let mut len = |base: f64| base * r.gen_range(0.85..1.15);
    let (spine, neck, head) = (len(2.0), len(0.5), len(0.9));
    let (shoulder, hip) = (len(0.8), len(0.5));
    let (upper_arm, forearm, thigh, shin) = (len(1.3), len(1.2), len(1.8), len(1.7));

    let tilt = r.gen_range(-0.3..0.3);
    // "up" is phi = pi
    let up = std::f64::consts::PI + tilt;
    let mut p = [(0.0, 0.0); 16];
    p[Pelvis as usize] = (0.0, 0.0);
    p[Thorax as usize] = step(p[Pelvis as usize], spine, up);
    p[UpperNeck as usize] = step(p[Thorax as usize], neck, up + r.gen_range(-0.2..0.2));
    p[HeadTop as usize] = step(p[UpperNeck as usize], head, up + r.gen_range(-0.3..0.3));

    // across the body towards image right (the figure's left side)
    let across = std::f64::consts::FRAC_PI_2 + tilt;
    p[RShoulder as usize] = step(p[Thorax as usize], -shoulder, across);
    p[LShoulder as usize] = step(p[Thorax as usize], shoulder, across);
    p[RHip as usize] = step(p[Pelvis as usize], -hip, across);
    p[LHip as usize] = step(p[Pelvis as usize], hip, across);

    let limb = |r: &mut ChaCha8Rng, root: (f64, f64), side: f64, a: (f64, f64), bend: f64, l1: f64, l2: f64| {
        let phi = tilt + side * r.gen_range(a.0..a.1);
        let mid = step(root, l1, phi);
        let end = step(mid, l2, phi + r.gen_range(-bend..bend));
        (mid, end)
    };
    let (re, rw) = limb(r, p[RShoulder as usize], -1.0, (0.1, 2.8), 1.5, upper_arm, forearm);
    let (le, lw) = limb(r, p[LShoulder as usize], 1.0, (0.1, 2.8), 1.5, upper_arm, forearm);
    let (rk, ra) = limb(r, p[RHip as usize], -1.0, (-0.2, 0.7), 0.6, thigh, shin);
    let (lk, la) = limb(r, p[LHip as usize], 1.0, (-0.2, 0.7), 0.6, thigh, shin);
    p[RElbow as usize] = re;
    p[RWrist as usize] = rw;
    p[LElbow as usize] = le;
    p[LWrist as usize] = lw;
    p[RKnee as usize] = rk;
    p[RAnkle as usize] = ra;
    p[LKnee as usize] = lk;
    p[LAnkle as usize] = la;
    p
}

/// Distance from `p` to the segment `a`-`b`.
pub(crate) fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let l2 = vx * vx + vy * vy;
    let t = if l2 > 0.0 {
        ((wx * vx + wy * vy) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((wx - t * vx).powi(2) + (wy - t * vy).powi(2)).sqrt()
}

fn blend(img: &mut [f32], plane: usize, idx: usize, color: [f32; 3], a: f64) {
    let a = a as f32;
    for (ch, &c) in color.iter().enumerate() {
        let v = &mut img[ch * plane + idx];
        *v = *v * (1.0 - a) + c * a;
    }
}

/// Sample `index` of the synthetic set; a pure function of its arguments.
pub fn synthetic_sample(seed: u64, index: usize, resolution: usize) -> Result<Sample, DataError> {
    if resolution < MIN_RESOLUTION {
        return Err(DataError::Invalid(format!(
            "resolution {resolution} is below the minimum {MIN_RESOLUTION} needed to draw a figure"
        )));
    }
    let mut r = rng::stream(rng::mix(seed, &[index as u64]));
    let body = pose_skeleton(&mut r);

    let head_c = |p: &[(f64, f64); 16]| {
        let (n, t) = (p[JointId::UpperNeck as usize], p[JointId::HeadTop as usize]);
        (
            ((n.0 + t.0) / 2.0, (n.1 + t.1) / 2.0),
            ((t.0 - n.0).hypot(t.1 - n.1)) / 2.0,
        )
    };
    let (hc, hr) = head_c(&body);
    let (mut minx, mut miny, mut maxx, mut maxy) = (hc.0 - hr, hc.1 - hr, hc.0 + hr, hc.1 + hr);
    for &(x, y) in &body {
        minx = minx.min(x);
        miny = miny.min(y);
        maxx = maxx.max(x);
        maxy = maxy.max(y);
    }
    let frame = resolution as f64 - 1.0 - 2.0 * MARGIN;
    let fit = frame / (maxx - minx).max(maxy - miny);
    let s = fit * r.gen_range(0.75..1.0);
    let ox = r.gen_range((MARGIN - minx * s)..=(resolution as f64 - 1.0 - MARGIN - maxx * s));
    let oy = r.gen_range((MARGIN - miny * s)..=(resolution as f64 - 1.0 - MARGIN - maxy * s));
    let pts: [(f64, f64); 16] = body.map(|(x, y)| (x * s + ox, y * s + oy));
    let (hc, hr) = head_c(&pts);

    let plane = resolution * resolution;
    let mut img = vec![0f32; 3 * plane];
    let base: [f64; 3] = [
        r.gen_range(0.05..0.25),
        r.gen_range(0.05..0.25),
        r.gen_range(0.05..0.25),
    ];
    let (fx, fy, phase) = (r.gen_range(0.2..1.2), r.gen_range(0.2..1.2), r.gen_range(0.0..6.3));
    for y in 0..resolution {
        for x in 0..resolution {
            let stripe = 0.06 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for (ch, b) in base.iter().enumerate() {
                let noise = r.gen_range(-0.03..0.03);
                img[ch * plane + y * resolution + x] = (b + stripe + noise).clamp(0.0, 0.4) as f32;
            }
        }
    }
    for y in 0..resolution {
        for x in 0..resolution {
            let d = (x as f64 - hc.0).hypot(y as f64 - hc.1);
            let a = (hr + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                blend(&mut img, plane, y * resolution + x, HEAD, a);
            }
        }
    }
    for bone in &BONES {
        let (a, b) = (pts[bone.parent as usize], pts[bone.child as usize]);
        for y in 0..resolution {
            for x in 0..resolution {
                let d = segment_distance((x as f64, y as f64), a, b);
                let cov = (LIMB_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    blend(&mut img, plane, y * resolution + x, bone.color, cov);
                }
            }
        }
    }
    let mut image = Tensor::new(vec![3, resolution, resolution], img).expect("image shape");
    imaging::quantize(&mut image);

    let joints = pts.map(|(x, y)| Keypoint { x, y, visible: true });
    Ok(Sample {
        image,
        annotation: PoseAnnotation {
            joints,
            head_len: 2.0 * hr,
            image_id: format!("synthetic-{seed}-{index}"),
        },
    })
}

/// `count` samples generated in parallel, assembled in index order.
pub fn generate_synthetic(seed: u64, count: usize, resolution: usize) -> Result<Dataset, DataError> {
    if count == 0 {
        return Err(DataError::Invalid("sample count must be positive".into()));
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|i| synthetic_sample(seed, i, resolution).map(Arc::new))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(
        samples,
        resolution,
        Provenance::Synthetic {
            seed,
            count,
            resolution,
        },
    )
}
