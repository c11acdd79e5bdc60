use std::collections::BTreeSet;

use kptransfer::keypoints::{
    builtin_split, decode_heatmaps, render_heatmaps, to_heatmap, to_image, transform_pose, Affine, JointId,
    JointSubsetSplit, Keypoint, PoseAnnotation, BUILTIN_SPLITS,
};
use proptest::prelude::*;

use JointId::*;

fn set(joints: &[JointId]) -> BTreeSet<JointId> {
    joints.iter().copied().collect()
}

/// The published subsets joint by joint. "Head" is head_top, "Neck" is upper_neck.
fn published_split(tag: &str) -> (BTreeSet<JointId>, BTreeSet<JointId>) {
    let (s1, s2): (&[JointId], &[JointId]) = match tag {
        "a" => (
            &[HeadTop, UpperNeck, RShoulder, LShoulder, Pelvis, Thorax, RHip, LHip],
            &[RKnee, LKnee, RAnkle, LAnkle, RWrist, LWrist, RElbow, LElbow],
        ),
        "b" => (
            &[HeadTop, UpperNeck, RShoulder, LShoulder, RElbow, LElbow, RHip, LHip],
            &[RKnee, LKnee, RAnkle, LAnkle, RWrist, LWrist, Pelvis, Thorax],
        ),
        "c" => (
            &[HeadTop, UpperNeck, RShoulder, LShoulder, RElbow, LElbow, RKnee, LKnee],
            &[RWrist, LWrist, RAnkle, LAnkle, RHip, LHip, Pelvis, Thorax],
        ),
        "d" => (
            &[RKnee, LKnee, RAnkle, LAnkle, RWrist, LWrist, RElbow, LElbow],
            &[HeadTop, UpperNeck, RElbow, LElbow, RKnee, LKnee, Pelvis, Thorax],
        ),
        _ => unreachable!(),
    };
    (set(s1), set(s2))
}

#[test]
fn builtin_splits_match_published_subsets() {
    for tag in BUILTIN_SPLITS {
        let split = builtin_split(tag).unwrap();
        let (s1, s2) = published_split(tag);
        assert_eq!(split.s1().len(), 8, "{tag}");
        assert_eq!(split.s2().len(), 8, "{tag}");
        assert_eq!(set(split.s1()), s1, "{tag}");
        assert_eq!(set(split.s2()), s2, "{tag}");
    }
    for tag in ["a", "b", "c"] {
        let split = builtin_split(tag).unwrap();
        assert!(split.intersection().is_empty(), "{tag}");
        let union: BTreeSet<_> = split.s1().iter().chain(split.s2()).copied().collect();
        assert_eq!(union, set(&JointId::ALL), "{tag}");
    }
    let d = builtin_split("d").unwrap();
    assert_eq!(set(&d.intersection()), set(&[RElbow, LElbow, RKnee, LKnee]));
}

#[test]
fn custom_split_json_roundtrip_and_validation() {
    let split = JointSubsetSplit::new("mine", vec![LAnkle, RAnkle], vec![HeadTop, RAnkle]).unwrap();
    let back = JointSubsetSplit::from_json(&split.to_json()).unwrap();
    assert_eq!(back, split);
    assert_eq!(back.s1(), &[RAnkle, LAnkle]);
    assert!(JointSubsetSplit::from_json(r#"{"name":"x","s1":["r_ankle"],"s2":["r_ankle"]}"#).is_err());
    assert!(JointSubsetSplit::from_json(r#"{"name":"x","s1":["nose"],"s2":["r_ankle"]}"#).is_err());
    assert!(builtin_split("e").is_err());
}

fn single(j: JointId, x: f64, y: f64) -> PoseAnnotation {
    let mut joints = [Keypoint::HIDDEN; 16];
    joints[j.code()] = Keypoint { x, y, visible: true };
    PoseAnnotation {
        joints,
        head_len: 4.0,
        image_id: "p".into(),
    }
}

proptest! {
    #[test]
    fn render_then_decode_lands_within_half_a_cell(
        x in 0.0f64..32.0,
        y in 0.0f64..32.0,
        sigma in 0.5f64..2.0,
    ) {
        let pose = single(LWrist, x, y);
        let h = render_heatmaps(&pose, &[LWrist], 32, 8, sigma);
        let d = decode_heatmaps(&h, 32)[0];
        prop_assert!(d.present);
        // Points beyond the outermost cell centres decode to that cell, so
        // compare against the truth clamped onto the cell-centre range.
        let clamp = |v: f64| to_image(to_heatmap(v, 32, 8).clamp(0.0, 7.0), 32, 8);
        // half a heatmap cell in image pixels, plus slack for f32 ties
        let half = 0.5 * 32.0 / 8.0 + 0.01;
        prop_assert!((d.x - clamp(x)).abs() <= half, "x {} vs {}", d.x, x);
        prop_assert!((d.y - clamp(y)).abs() <= half, "y {} vs {}", d.y, y);
    }

    #[test]
    fn frame_mappings_are_inverse(v in -10.0f64..80.0, r in 1usize..5, h in 1usize..5) {
        let (image, heat) = (16 * r, 4 * h);
        let back = to_image(to_heatmap(v, image, heat), image, heat);
        prop_assert!((back - v).abs() < 1e-9);
    }

    #[test]
    fn affine_invert_undoes_apply(
        x in -5.0f64..40.0,
        y in -5.0f64..40.0,
        s in 0.75f64..1.25,
        rot in -30.0f64..30.0,
    ) {
        let a = Affine::new(s, rot, 32, 32);
        let (u, v) = a.apply(x, y);
        let (bx, by) = a.invert(u, v);
        prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
    }

    #[test]
    fn transform_preserves_distances_up_to_scale(
        s in 0.75f64..1.25,
        rot in -30.0f64..30.0,
    ) {
        let mut pose = single(RKnee, 10.0, 12.0);
        pose.joints[LKnee.code()] = Keypoint { x: 20.0, y: 17.0, visible: true };
        let a = Affine::new(s, rot, 32, 32);
        let t = transform_pose(&pose, &a);
        let d = |p: &PoseAnnotation| {
            let (a, b) = (p.joint(RKnee), p.joint(LKnee));
            (a.x - b.x).hypot(a.y - b.y)
        };
        prop_assert!((d(&t) - s * d(&pose)).abs() < 1e-9);
        prop_assert!((t.head_len - s * pose.head_len).abs() < 1e-12);
    }
}

#[test]
fn hidden_and_out_of_frame_joints_render_empty() {
    let mut pose = single(RAnkle, 40.0, 3.0);
    pose.joints[LAnkle.code()] = Keypoint {
        x: 5.0,
        y: 5.0,
        visible: false,
    };
    let h = render_heatmaps(&pose, &[RAnkle, LAnkle], 32, 8, 1.0);
    assert!(h.data.iter().all(|&v| v == 0.0));
    for d in decode_heatmaps(&h, 32) {
        assert!(!d.present);
    }
}
