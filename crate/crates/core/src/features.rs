//! Kinematic feature codec.
//!
//! Each frame of a canonicalized clip becomes a `12*J - 1` feature vector
//! (659 for the 55-joint skeleton): root yaw velocity, root ground-plane
//! linear velocity in the facing frame, root height, root-relative joint
//! positions, non-root joint rotations in 6D form, joint velocities, and
//! four foot-contact flags. Velocities are per frame step; the final frame
//! repeats the penultimate difference.
//!
//! The decoder integrates the root trajectory from the origin with zero
//! initial yaw, so it reconstructs clips in the canonical frame. Root
//! orientation is represented by its yaw component only; clips whose root
//! carries pitch/roll decode approximately.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::math::{vec_norm, vec_sub, wrap_angle, Quat, Vec3};
use crate::rotation::{matrix_from_six_d, six_d_from_quat};
use crate::skeleton::{forward_kinematics, MotionClip, Skeleton};

/// Slice map of the per-frame feature vector for a `J`-joint skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    joints: usize,
}

impl FeatureLayout {
    pub fn new(joints: usize) -> Result<Self> {
        if joints < 2 {
            return Err(Error::invalid(format!(
                "feature layout needs at least 2 joints, got {joints}"
            )));
        }
        Ok(FeatureLayout { joints })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Total feature dimension `12*J - 1`.
    pub fn dim(&self) -> usize {
        12 * self.joints - 1
    }

    pub fn root_rot_velocity(&self) -> std::ops::Range<usize> {
        0..1
    }

    /// Ground-plane (x, z) linear velocity in the facing frame.
    pub fn root_lin_velocity(&self) -> std::ops::Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> std::ops::Range<usize> {
        3..4
    }

    /// Root-relative positions of joints `1..J`, 3 values each.
    pub fn joint_positions(&self) -> std::ops::Range<usize> {
        4..4 + 3 * (self.joints - 1)
    }

    /// 6D rotations of joints `1..J`.
    pub fn joint_rotations(&self) -> std::ops::Range<usize> {
        let start = self.joint_positions().end;
        start..start + 6 * (self.joints - 1)
    }

    /// Per-joint velocities (all `J` joints) in the facing frame.
    pub fn joint_velocities(&self) -> std::ops::Range<usize> {
        let start = self.joint_rotations().end;
        start..start + 3 * self.joints
    }

    /// Heel/toe contact flags: left heel, left toe, right heel, right toe.
    pub fn foot_contacts(&self) -> std::ops::Range<usize> {
        let start = self.joint_velocities().end;
        start..start + 4
    }
}

/// A `T x D` feature matrix with its layout.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub data: Array2<f64>,
    pub layout: FeatureLayout,
}

impl FeatureSequence {
    pub fn new(data: Array2<f64>, layout: FeatureLayout) -> Result<Self> {
        let seq = FeatureSequence { data, layout };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ncols() != self.layout.dim() {
            return Err(Error::shape(format!(
                "feature matrix has {} columns, layout expects {}",
                self.data.ncols(),
                self.layout.dim()
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature matrix has non-finite entries"));
        }
        let contacts = self.data.slice(s![.., self.layout.foot_contacts()]);
        if !contacts.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::invalid("foot-contact entries must be 0 or 1"));
        }
        Ok(())
    }
}

/// Rounds the foot-contact slice of raw model output to hard {0, 1} flags
/// so the matrix satisfies the feature invariants.
pub fn snap_contacts(data: &mut Array2<f64>, layout: &FeatureLayout) {
    let mut slice = data.slice_mut(s![.., layout.foot_contacts()]);
    slice.mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
}

/// Names of the four contact joints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootJoints {
    pub left_heel: String,
    pub left_toe: String,
    pub right_heel: String,
    pub right_toe: String,
}

impl FootJoints {
    pub fn names(&self) -> [&str; 4] {
        [
            &self.left_heel,
            &self.left_toe,
            &self.right_heel,
            &self.right_toe,
        ]
    }

    fn resolve(&self, skeleton: &Skeleton) -> Result<[usize; 4]> {
        let mut out = [0usize; 4];
        for (slot, name) in out.iter_mut().zip(self.names()) {
            *slot = skeleton.index_of(name).ok_or_else(|| {
                Error::invalid(format!("skeleton has no foot joint named '{name}'"))
            })?;
        }
        Ok(out)
    }
}

/// Knobs for [`encode_features`].
#[derive(Debug, Clone)]
pub struct EncodeSettings {
    pub foot_joints: FootJoints,
    /// Foot joints slower than this (m/s) count as in contact.
    pub contact_threshold: f64,
}

fn rotate_to_facing_frame(yaw: f64, v: Vec3) -> Vec3 {
    Quat::from_yaw(-yaw).rotate(v)
}

/// Encodes a canonicalized clip into the kinematic feature representation.
pub fn encode_features(
    skeleton: &Skeleton,
    clip: &MotionClip,
    settings: &EncodeSettings,
) -> Result<FeatureSequence> {
    clip.validate(skeleton)?;
    let frames = clip.frames();
    if frames < 2 {
        return Err(Error::invalid("feature encoding needs at least 2 frames"));
    }
    let layout = FeatureLayout::new(skeleton.len())?;
    let feet = settings.foot_joints.resolve(skeleton)?;
    let positions = forward_kinematics(skeleton, clip)?;
    let yaw: Vec<f64> = (0..frames).map(|t| clip.rotations[t][0].yaw()).collect();

    let joints = skeleton.len();
    let mut data = Array2::<f64>::zeros((frames, layout.dim()));

    for t in 0..frames {
        // Velocities for the last frame repeat the penultimate difference.
        let tv = t.min(frames - 2);
        let mut row = data.row_mut(t);

        row[layout.root_rot_velocity().start] = wrap_angle(yaw[tv + 1] - yaw[tv]);

        let root_step = vec_sub(clip.root_translation[tv + 1], clip.root_translation[tv]);
        let local_step = rotate_to_facing_frame(yaw[tv], root_step);
        let lin = layout.root_lin_velocity();
        row[lin.start] = local_step[0];
        row[lin.start + 1] = local_step[2];

        row[layout.root_height().start] = clip.root_translation[t][1];

        let pos_base = layout.joint_positions().start;
        for j in 1..joints {
            let rel = rotate_to_facing_frame(yaw[t], vec_sub(positions[t][j], positions[t][0]));
            let o = pos_base + 3 * (j - 1);
            row[o] = rel[0];
            row[o + 1] = rel[1];
            row[o + 2] = rel[2];
        }

        let rot_base = layout.joint_rotations().start;
        for j in 1..joints {
            let six = six_d_from_quat(&clip.rotations[t][j]);
            let o = rot_base + 6 * (j - 1);
            for (k, v) in six.iter().enumerate() {
                row[o + k] = *v;
            }
        }

        let vel_base = layout.joint_velocities().start;
        for j in 0..joints {
            let step = rotate_to_facing_frame(
                yaw[tv],
                vec_sub(positions[tv + 1][j], positions[tv][j]),
            );
            let o = vel_base + 3 * j;
            row[o] = step[0];
            row[o + 1] = step[1];
            row[o + 2] = step[2];
        }

        let contact_base = layout.foot_contacts().start;
        for (k, &fj) in feet.iter().enumerate() {
            let speed =
                vec_norm(vec_sub(positions[tv + 1][fj], positions[tv][fj])) * clip.fps;
            row[contact_base + k] = if speed < settings.contact_threshold {
                1.0
            } else {
                0.0
            };
        }
    }

    FeatureSequence::new(data, layout)
}

/// Reconstructs a motion clip from features, in the canonical frame.
pub fn decode_features(
    features: &FeatureSequence,
    skeleton: &Skeleton,
    fps: f64,
) -> Result<MotionClip> {
    features.validate()?;
    let layout = &features.layout;
    if skeleton.len() != layout.joints() {
        return Err(Error::shape(format!(
            "feature layout is for {} joints, skeleton has {}",
            layout.joints(),
            skeleton.len()
        )));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::invalid(format!("invalid fps {fps}")));
    }
    let frames = features.frames();
    if frames == 0 {
        return Err(Error::invalid("cannot decode an empty feature sequence"));
    }
    let data = &features.data;
    let joints = layout.joints();

    // Integrate yaw from zero; the last rot-velocity row is the duplicate.
    let mut yaw = vec![0.0f64; frames];
    for t in 0..frames.saturating_sub(1) {
        yaw[t + 1] = yaw[t] + data[(t, layout.root_rot_velocity().start)];
    }

    let mut root_translation = vec![[0.0f64; 3]; frames];
    root_translation[0] = [0.0, data[(0, layout.root_height().start)], 0.0];
    for t in 0..frames - 1 {
        let lin = layout.root_lin_velocity();
        let local = [data[(t, lin.start)], 0.0, data[(t, lin.start + 1)]];
        let world = Quat::from_yaw(yaw[t]).rotate(local);
        root_translation[t + 1] = [
            root_translation[t][0] + world[0],
            data[(t + 1, layout.root_height().start)],
            root_translation[t][2] + world[2],
        ];
    }

    let mut rotations = Vec::with_capacity(frames);
    let rot_base = layout.joint_rotations().start;
    for t in 0..frames {
        let mut frame = Vec::with_capacity(joints);
        frame.push(Quat::from_yaw(yaw[t]));
        for j in 1..joints {
            let o = rot_base + 6 * (j - 1);
            let mut six = [0.0f64; 6];
            for (k, v) in six.iter_mut().enumerate() {
                *v = data[(t, o + k)];
            }
            let m = matrix_from_six_d(&six).map_err(|e| {
                Error::invalid(format!("frame {t}, joint {j}: {e}"))
            })?;
            frame.push(Quat::from_matrix(&m));
        }
        rotations.push(frame);
    }

    let clip = MotionClip {
        fps,
        root_translation,
        rotations,
    };
    clip.validate(skeleton)?;
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{canonicalize, Joint};
    use approx::assert_relative_eq;

    pub(crate) fn five_joint_skeleton() -> Skeleton {
        Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                offset: [0.0, 0.0, 0.0],
                end_site: None,
            },
            Joint {
                name: "head".into(),
                parent: Some(0),
                offset: [0.0, 0.6, 0.0],
                end_site: Some([0.0, 0.2, 0.0]),
            },
            Joint {
                name: "arm".into(),
                parent: Some(0),
                offset: [0.3, 0.4, 0.0],
                end_site: Some([0.3, 0.0, 0.0]),
            },
            Joint {
                name: "foot_l".into(),
                parent: Some(0),
                offset: [-0.15, -0.9, 0.0],
                end_site: Some([0.0, -0.1, 0.05]),
            },
            Joint {
                name: "foot_r".into(),
                parent: Some(0),
                offset: [0.15, -0.9, 0.0],
                end_site: Some([0.0, -0.1, 0.05]),
            },
        ])
        .unwrap()
    }

    pub(crate) fn settings() -> EncodeSettings {
        EncodeSettings {
            foot_joints: FootJoints {
                left_heel: "foot_l".into(),
                left_toe: "foot_l".into(),
                right_heel: "foot_r".into(),
                right_toe: "foot_r".into(),
            },
            contact_threshold: 0.10,
        }
    }

    fn still_clip(skeleton: &Skeleton, frames: usize) -> MotionClip {
        MotionClip {
            fps: 20.0,
            root_translation: vec![[0.0, 0.9, 0.0]; frames],
            rotations: vec![vec![Quat::IDENTITY; skeleton.len()]; frames],
        }
    }

    /// Walking clip with a yaw-only root; exercises every feature slice.
    pub(crate) fn walking_clip(_skeleton: &Skeleton, frames: usize) -> MotionClip {
        let fps = 20.0;
        let mut root_translation = Vec::with_capacity(frames);
        let mut rotations = Vec::with_capacity(frames);
        for t in 0..frames {
            let time = t as f64 / fps;
            let yaw = 0.4 * (0.7 * time).sin();
            root_translation.push([
                0.3 * (0.5 * time).sin(),
                0.9 + 0.02 * (3.0 * time).sin(),
                0.8 * time,
            ]);
            let mut frame = vec![Quat::from_yaw(yaw); 1];
            // Head wobble, arm swing, legs in antiphase.
            frame.push(Quat::from_axis_angle_parts([1.0, 0.0, 0.0], 0.1 * (2.0 * time).sin()));
            frame.push(Quat::from_axis_angle_parts([0.0, 0.0, 1.0], 0.8 * (2.5 * time).sin()));
            frame.push(Quat::from_axis_angle_parts([1.0, 0.0, 0.0], 0.5 * (2.0 * time).sin()));
            frame.push(Quat::from_axis_angle_parts(
                [1.0, 0.0, 0.0],
                0.5 * (2.0 * time + std::f64::consts::PI).sin(),
            ));
            rotations.push(frame);
        }
        MotionClip {
            fps,
            root_translation,
            rotations,
        }
    }

    #[test]
    fn layout_slices_partition_the_dimension() {
        for joints in 2..60 {
            let l = FeatureLayout::new(joints).unwrap();
            assert_eq!(l.dim(), 12 * joints - 1);
            let ranges = [
                l.root_rot_velocity(),
                l.root_lin_velocity(),
                l.root_height(),
                l.joint_positions(),
                l.joint_rotations(),
                l.joint_velocities(),
                l.foot_contacts(),
            ];
            let mut cursor = 0;
            for r in ranges {
                assert_eq!(r.start, cursor, "slice gap at {cursor} for J={joints}");
                cursor = r.end;
            }
            assert_eq!(cursor, l.dim());
        }
    }

    #[test]
    fn dimension_is_659_for_55_joints() {
        assert_eq!(FeatureLayout::new(55).unwrap().dim(), 659);
    }

    #[test]
    fn stationary_clip_has_zero_velocities_and_full_contact() {
        let sk = five_joint_skeleton();
        let clip = still_clip(&sk, 6);
        let f = encode_features(&sk, &clip, &settings()).unwrap();
        let l = f.layout;
        for t in 0..f.frames() {
            assert_eq!(f.data[(t, l.root_rot_velocity().start)], 0.0);
            for c in l.root_lin_velocity() {
                assert_eq!(f.data[(t, c)], 0.0);
            }
            for c in l.joint_velocities() {
                assert_eq!(f.data[(t, c)], 0.0);
            }
            for c in l.foot_contacts() {
                assert_eq!(f.data[(t, c)], 1.0);
            }
        }
    }

    #[test]
    fn constant_forward_speed_appears_in_lin_velocity() {
        let sk = five_joint_skeleton();
        let frames = 10;
        let mut clip = still_clip(&sk, frames);
        for (t, tr) in clip.root_translation.iter_mut().enumerate() {
            tr[2] = t as f64 / 20.0; // 1 m/s along +Z at 20 fps
        }
        let f = encode_features(&sk, &clip, &settings()).unwrap();
        let lin = f.layout.root_lin_velocity();
        for t in 0..frames {
            assert_relative_eq!(f.data[(t, lin.start)], 0.0, epsilon = 1e-6);
            assert_relative_eq!(f.data[(t, lin.start + 1)], 1.0 / 20.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn missing_foot_joint_is_an_error() {
        let sk = five_joint_skeleton();
        let clip = still_clip(&sk, 3);
        let mut bad = settings();
        bad.foot_joints.left_heel = "no_such_joint".into();
        let err = encode_features(&sk, &clip, &bad).unwrap_err();
        assert!(err.to_string().contains("no_such_joint"));
    }

    #[test]
    fn decode_inverts_encode_within_drift_bound() {
        let sk = five_joint_skeleton();
        let clip = walking_clip(&sk, 180);
        let (sk, clip) = canonicalize(&sk, &clip, 1.7).unwrap();
        let f = encode_features(&sk, &clip, &settings()).unwrap();
        let decoded = decode_features(&f, &sk, clip.fps).unwrap();
        let orig = forward_kinematics(&sk, &clip).unwrap();
        let back = forward_kinematics(&sk, &decoded).unwrap();
        let mut worst = 0.0f64;
        for t in 0..clip.frames() {
            for j in 0..sk.len() {
                worst = worst.max(vec_norm(vec_sub(orig[t][j], back[t][j])));
            }
        }
        assert!(worst < 1e-2, "position drift {worst} exceeds 1e-2 m");
    }

    #[test]
    fn encode_is_a_fixed_point_after_decode() {
        let sk = five_joint_skeleton();
        let clip = walking_clip(&sk, 60);
        let (sk, clip) = canonicalize(&sk, &clip, 1.7).unwrap();
        let f = encode_features(&sk, &clip, &settings()).unwrap();
        let decoded = decode_features(&f, &sk, clip.fps).unwrap();
        let f2 = encode_features(&sk, &decoded, &settings()).unwrap();
        let max_diff = (&f.data - &f2.data)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-3, "codec fixed-point error {max_diff}");
    }

    #[test]
    fn zero_velocities_decode_to_origin_and_zero_yaw() {
        let sk = five_joint_skeleton();
        let layout = FeatureLayout::new(sk.len()).unwrap();
        let frames = 5;
        let mut data = Array2::<f64>::zeros((frames, layout.dim()));
        // Identity 6D rotations for every non-root joint.
        for t in 0..frames {
            for j in 0..sk.len() - 1 {
                let o = layout.joint_rotations().start + 6 * j;
                data[(t, o)] = 1.0;
                data[(t, o + 4)] = 1.0;
            }
        }
        let f = FeatureSequence::new(data, layout).unwrap();
        let clip = decode_features(&f, &sk, 20.0).unwrap();
        for t in 0..frames {
            assert_eq!(clip.root_translation[t], [0.0, 0.0, 0.0]);
            assert!(clip.rotations[t][0].angle_to(&Quat::IDENTITY) < 1e-12);
        }
    }

    #[test]
    fn non_finite_features_rejected() {
        let sk = five_joint_skeleton();
        let layout = FeatureLayout::new(sk.len()).unwrap();
        let mut data = Array2::<f64>::zeros((3, layout.dim()));
        data[(1, 2)] = f64::NAN;
        assert!(FeatureSequence::new(data, layout).is_err());
    }
}
