//! Skeleton and motion clip types, forward kinematics, and clip
//! canonicalization.

use crate::error::{Error, Result};
use crate::math::{vec_add, vec_is_finite, vec_scale, Quat, Vec3};

/// One joint of the kinematic tree. `offset` is the rest-pose translation
/// from the parent joint, in meters.
#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub end_site: Option<Vec3>,
}

/// Joint hierarchy in topological order (parent index < joint index), with
/// exactly one root.
#[derive(Debug, Clone)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.len() < 2 {
            return Err(Error::invalid("skeleton needs at least 2 joints"));
        }
        let mut roots = 0;
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None => roots += 1,
                Some(p) if p >= i => {
                    return Err(Error::invalid(format!(
                        "joint {i} ({}) has parent index {p} >= {i}; joints must be topologically ordered",
                        j.name
                    )))
                }
                Some(_) => {}
            }
            if !vec_is_finite(j.offset) {
                return Err(Error::invalid(format!(
                    "joint {} has a non-finite offset",
                    j.name
                )));
            }
            if let Some(es) = j.end_site {
                if !vec_is_finite(es) {
                    return Err(Error::invalid(format!(
                        "joint {} has a non-finite end site",
                        j.name
                    )));
                }
            }
        }
        if roots != 1 {
            return Err(Error::invalid(format!(
                "skeleton must have exactly one root, found {roots}"
            )));
        }
        Ok(Skeleton { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Rest-pose joint and end-site positions (all rotations identity,
    /// root at the origin).
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let mut pos = vec![[0.0; 3]; self.joints.len()];
        for (i, j) in self.joints.iter().enumerate() {
            pos[i] = match j.parent {
                None => j.offset,
                Some(p) => vec_add(pos[p], j.offset),
            };
        }
        pos
    }

    /// Vertical extent of the rest pose, end sites included.
    pub fn rest_height(&self) -> f64 {
        let pos = self.rest_positions();
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for (i, p) in pos.iter().enumerate() {
            min_y = min_y.min(p[1]);
            max_y = max_y.max(p[1]);
            if let Some(es) = self.joints[i].end_site {
                let e = vec_add(*p, es);
                min_y = min_y.min(e[1]);
                max_y = max_y.max(e[1]);
            }
        }
        max_y - min_y
    }

    /// Copy with all offsets and end sites scaled by `s`.
    pub fn scaled(&self, s: f64) -> Skeleton {
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                name: j.name.clone(),
                parent: j.parent,
                offset: vec_scale(j.offset, s),
                end_site: j.end_site.map(|e| vec_scale(e, s)),
            })
            .collect();
        Skeleton { joints }
    }
}

/// Per-frame root translation plus per-joint local rotations at a fixed
/// frame rate. Rotations are unit quaternions, one per joint per frame.
#[derive(Debug, Clone)]
pub struct MotionClip {
    pub fps: f64,
    /// T x 3, meters.
    pub root_translation: Vec<Vec3>,
    /// T x J local rotations.
    pub rotations: Vec<Vec<Quat>>,
}

impl MotionClip {
    pub fn frames(&self) -> usize {
        self.root_translation.len()
    }

    /// Checks the clip invariants against `skeleton`.
    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        if self.frames() == 0 {
            return Err(Error::invalid("clip has no frames"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!("invalid fps {}", self.fps)));
        }
        if self.rotations.len() != self.frames() {
            return Err(Error::shape(format!(
                "clip has {} translation frames but {} rotation frames",
                self.frames(),
                self.rotations.len()
            )));
        }
        for (t, (trans, rots)) in self
            .root_translation
            .iter()
            .zip(self.rotations.iter())
            .enumerate()
        {
            if !vec_is_finite(*trans) {
                return Err(Error::invalid(format!(
                    "non-finite root translation at frame {t}"
                )));
            }
            if rots.len() != skeleton.len() {
                return Err(Error::shape(format!(
                    "frame {t} has {} rotations for a {}-joint skeleton",
                    rots.len(),
                    skeleton.len()
                )));
            }
            for (j, q) in rots.iter().enumerate() {
                if !q.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite rotation at frame {t}, joint {j}"
                    )));
                }
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "rotation at frame {t}, joint {j} has norm {}",
                        q.norm()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Global joint positions for one frame.
pub fn fk_frame(skeleton: &Skeleton, root_translation: Vec3, rotations: &[Quat]) -> Vec<Vec3> {
    let n = skeleton.len();
    let mut global_rot = vec![Quat::IDENTITY; n];
    let mut pos = vec![[0.0; 3]; n];
    for (i, joint) in skeleton.joints().iter().enumerate() {
        match joint.parent {
            None => {
                global_rot[i] = rotations[i];
                pos[i] = root_translation;
            }
            Some(p) => {
                pos[i] = vec_add(pos[p], global_rot[p].rotate(joint.offset));
                global_rot[i] = global_rot[p].mul(&rotations[i]);
            }
        }
    }
    pos
}

/// Global joint positions for every frame of `clip`: `T x J` 3-vectors.
///
/// `position[root] = root_translation`; each child sits at
/// `position[parent] + R_global(parent) * offset(child)`, with rotations
/// composing down the tree.
pub fn forward_kinematics(skeleton: &Skeleton, clip: &MotionClip) -> Result<Vec<Vec<Vec3>>> {
    clip.validate(skeleton)?;
    Ok(crate::par::map_indexed(clip.frames(), |t| {
        fk_frame(skeleton, clip.root_translation[t], &clip.rotations[t])
    }))
}

/// Brings a clip into the canonical frame shared by all datasets:
///
/// * skeleton and root translations scaled so the rest-pose height equals
///   `target_height`;
/// * the whole clip yawed about the world Y axis so the first frame faces +Z;
/// * the first-frame root ground position moved to the origin;
/// * the ground plane shifted so the lowest first-frame joint sits at y = 0.
///
/// Returns the scaled skeleton together with the transformed clip.
pub fn canonicalize(
    skeleton: &Skeleton,
    clip: &MotionClip,
    target_height: f64,
) -> Result<(Skeleton, MotionClip)> {
    clip.validate(skeleton)?;
    if !(target_height.is_finite() && target_height > 0.0) {
        return Err(Error::invalid(format!(
            "target height must be positive, got {target_height}"
        )));
    }
    let height = skeleton.rest_height();
    if height <= 1e-9 {
        return Err(Error::invalid("skeleton has zero rest-pose height"));
    }
    let scale = target_height / height;
    let out_skeleton = skeleton.scaled(scale);

    let mut out = clip.clone();
    for t in out.root_translation.iter_mut() {
        *t = vec_scale(*t, scale);
    }

    // Yaw correction: rotate everything about world Y so frame 0 faces +Z.
    let yaw0 = out.rotations[0][0].yaw();
    let fix = Quat::from_yaw(-yaw0);
    for t in 0..out.frames() {
        out.root_translation[t] = fix.rotate(out.root_translation[t]);
        out.rotations[t][0] = fix.mul(&out.rotations[t][0]).normalized();
    }

    // Recenter: first-frame root ground position to the origin.
    let r0 = out.root_translation[0];
    for t in out.root_translation.iter_mut() {
        t[0] -= r0[0];
        t[2] -= r0[2];
    }

    // Ground: lowest first-frame joint to y = 0.
    let first = fk_frame(&out_skeleton, out.root_translation[0], &out.rotations[0]);
    let min_y = first
        .iter()
        .map(|p| p[1])
        .fold(f64::INFINITY, f64::min);
    for t in out.root_translation.iter_mut() {
        t[1] -= min_y;
    }

    Ok((out_skeleton, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn chain_skeleton() -> Skeleton {
        Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                offset: [0.0, 0.0, 0.0],
                end_site: None,
            },
            Joint {
                name: "mid".into(),
                parent: Some(0),
                offset: [1.0, 0.0, 0.0],
                end_site: None,
            },
            Joint {
                name: "tip".into(),
                parent: Some(1),
                offset: [0.0, 1.0, 0.0],
                end_site: Some([0.0, 0.5, 0.0]),
            },
        ])
        .unwrap()
    }

    fn identity_clip(skeleton: &Skeleton, frames: usize) -> MotionClip {
        MotionClip {
            fps: 20.0,
            root_translation: vec![[0.0, 1.0, 0.0]; frames],
            rotations: vec![vec![Quat::IDENTITY; skeleton.len()]; frames],
        }
    }

    #[test]
    fn fk_identity_accumulates_offsets() {
        let sk = chain_skeleton();
        let clip = identity_clip(&sk, 2);
        let pos = forward_kinematics(&sk, &clip).unwrap();
        assert_eq!(pos[0][0], [0.0, 1.0, 0.0]);
        assert_eq!(pos[0][1], [1.0, 1.0, 0.0]);
        assert_eq!(pos[0][2], [1.0, 2.0, 0.0]);
    }

    #[test]
    fn fk_rotated_root_moves_child() {
        // Root yawed +90 degrees about Y: +X maps to -Z.
        let sk = Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                offset: [0.0, 0.0, 0.0],
                end_site: None,
            },
            Joint {
                name: "child".into(),
                parent: Some(0),
                offset: [1.0, 0.0, 0.0],
                end_site: None,
            },
        ])
        .unwrap();
        let mut clip = identity_clip(&sk, 1);
        clip.rotations[0][0] = Quat::from_yaw(std::f64::consts::FRAC_PI_2);
        let pos = forward_kinematics(&sk, &clip).unwrap();
        assert_relative_eq!(pos[0][1][0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(pos[0][1][1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(pos[0][1][2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_is_equivariant_under_rigid_root_transform() {
        use rand::Rng;
        use rand::SeedableRng;
        let sk = chain_skeleton();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut clip = identity_clip(&sk, 4);
        for t in 0..4 {
            for j in 0..sk.len() {
                let axis = [rng.random::<f64>(), rng.random(), rng.random()];
                clip.rotations[t][j] =
                    Quat::from_axis_angle_parts(axis, rng.random::<f64>() * 2.0);
            }
            clip.root_translation[t] = [rng.random(), rng.random(), rng.random()];
        }
        let g = Quat::from_axis_angle_parts([0.3, 1.0, -0.2], 1.3);
        let shift = [0.5, -0.2, 2.0];
        let mut moved = clip.clone();
        for t in 0..4 {
            moved.root_translation[t] = vec_add(g.rotate(clip.root_translation[t]), shift);
            moved.rotations[t][0] = g.mul(&clip.rotations[t][0]).normalized();
        }
        let base = forward_kinematics(&sk, &clip).unwrap();
        let transformed = forward_kinematics(&sk, &moved).unwrap();
        for t in 0..4 {
            for j in 0..sk.len() {
                let expect = vec_add(g.rotate(base[t][j]), shift);
                for k in 0..3 {
                    assert_relative_eq!(transformed[t][j][k], expect[k], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn canonicalize_scales_to_target_height() {
        // Rest pose spans y in [0, 2]: height 2.0.
        let sk = Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                offset: [0.0, 0.0, 0.0],
                end_site: None,
            },
            Joint {
                name: "head".into(),
                parent: Some(0),
                offset: [0.0, 2.0, 0.0],
                end_site: None,
            },
        ])
        .unwrap();
        let mut clip = identity_clip(&sk, 3);
        clip.root_translation = vec![[0.0, 1.0, 0.0], [0.0, 1.0, 2.0], [0.0, 1.0, 4.0]];
        let (csk, cclip) = canonicalize(&sk, &clip, 1.7).unwrap();
        assert_relative_eq!(csk.rest_height(), 1.7, epsilon = 1e-12);
        // Forward travel scaled by 0.85.
        let dz = cclip.root_translation[1][2] - cclip.root_translation[0][2];
        assert_relative_eq!(dz, 2.0 * 0.85, epsilon = 1e-12);
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let sk = chain_skeleton();
        let mut clip = identity_clip(&sk, 3);
        clip.rotations[0][0] = Quat::from_yaw(0.4);
        clip.rotations[1][0] = Quat::from_yaw(0.9);
        clip.rotations[2][0] = Quat::from_yaw(1.1);
        clip.root_translation = vec![[1.0, 1.2, -0.5], [1.2, 1.2, 0.1], [1.5, 1.3, 0.4]];
        let (sk1, once) = canonicalize(&sk, &clip, 1.7).unwrap();
        let (sk2, twice) = canonicalize(&sk1, &once, 1.7).unwrap();
        assert_relative_eq!(sk1.rest_height(), sk2.rest_height(), epsilon = 1e-9);
        for t in 0..once.frames() {
            for k in 0..3 {
                assert_relative_eq!(
                    once.root_translation[t][k],
                    twice.root_translation[t][k],
                    epsilon = 1e-6
                );
            }
            for j in 0..sk.len() {
                assert!(once.rotations[t][j].angle_to(&twice.rotations[t][j]) < 1e-6);
            }
        }
    }

    #[test]
    fn canonicalize_is_yaw_invariant() {
        let sk = chain_skeleton();
        let mut clip = identity_clip(&sk, 3);
        clip.root_translation = vec![[0.0, 1.0, 0.0], [0.1, 1.0, 0.5], [0.3, 1.0, 1.0]];
        clip.rotations[1][1] = Quat::from_axis_angle_parts([1.0, 0.0, 0.0], 0.3);

        let g = Quat::from_yaw(std::f64::consts::FRAC_PI_2);
        let mut rotated = clip.clone();
        for t in 0..3 {
            rotated.root_translation[t] = g.rotate(clip.root_translation[t]);
            rotated.rotations[t][0] = g.mul(&clip.rotations[t][0]).normalized();
        }

        let (_, a) = canonicalize(&sk, &clip, 1.7).unwrap();
        let (_, b) = canonicalize(&sk, &rotated, 1.7).unwrap();
        for t in 0..3 {
            for k in 0..3 {
                assert_relative_eq!(
                    a.root_translation[t][k],
                    b.root_translation[t][k],
                    epsilon = 1e-5
                );
            }
            for j in 0..sk.len() {
                assert!(a.rotations[t][j].angle_to(&b.rotations[t][j]) < 1e-5);
            }
        }
    }

    #[test]
    fn zero_height_skeleton_rejected() {
        let sk = Skeleton::new(vec![
            Joint {
                name: "root".into(),
                parent: None,
                offset: [0.0, 0.0, 0.0],
                end_site: None,
            },
            Joint {
                name: "flat".into(),
                parent: Some(0),
                offset: [1.0, 0.0, 0.0],
                end_site: None,
            },
        ])
        .unwrap();
        let clip = identity_clip(&sk, 1);
        assert!(canonicalize(&sk, &clip, 1.7).is_err());
    }
}
