//! Motion sequences: per-frame joint rotations plus root translation, with
//! forward kinematics and rate/length editing.

use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::skeleton::Skeleton;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Where a sequence came from. Augmented and hard-negative clips are kept
/// distinguishable from captured data so training can weight them apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionSource {
    Real,
    Generated,
    Augmented,
    HardNegative,
}

/// One frame of local joint rotations. Every quaternion is unit length and
/// sign-canonical by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotations: Vec<Quat>,
}

impl Pose {
    pub fn new(rotations: Vec<Quat>) -> Pose {
        Pose {
            rotations: rotations.into_iter().map(|q| q.normalized()).collect(),
        }
    }

    pub fn identity(joint_count: usize) -> Pose {
        Pose {
            rotations: vec![Quat::IDENTITY; joint_count],
        }
    }

    pub fn rotations(&self) -> &[Quat] {
        &self.rotations
    }

    pub fn rotation(&self, joint: usize) -> Quat {
        self.rotations[joint]
    }

    pub fn set_rotation(&mut self, joint: usize, q: Quat) {
        self.rotations[joint] = q.normalized();
    }

    /// Builds a pose from rotations that are already unit length, applying
    /// only the exact sign canonicalization. Negation-style edits (mirror,
    /// conjugation) stay bit-exact through this path where renormalizing
    /// would drift ulps.
    pub(crate) fn from_unit_rotations(rotations: Vec<Quat>) -> Pose {
        debug_assert!(rotations.iter().all(|q| (q.norm() - 1.0).abs() < 1e-9));
        Pose {
            rotations: rotations.into_iter().map(|q| q.canonicalized()).collect(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }
}

/// A clip of animation bound to a skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    skeleton: Skeleton,
    frames: Vec<Pose>,
    /// World-space hip translation per frame; kept apart from the pose so
    /// kinematics can stay hip-relative.
    root_positions: Vec<Vec3>,
    fps: f64,
    pub label: Option<String>,
    pub source: MotionSource,
}

impl MotionSequence {
    pub fn new(
        skeleton: Skeleton,
        frames: Vec<Pose>,
        root_positions: Vec<Vec3>,
        fps: f64,
    ) -> Result<MotionSequence> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("sequence has no frames".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if root_positions.len() != frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} root positions for {} frames",
                root_positions.len(),
                frames.len()
            )));
        }
        let n = skeleton.joint_count();
        if let Some(bad) = frames.iter().find(|p| p.joint_count() != n) {
            return Err(Error::SkeletonMismatch(format!(
                "pose has {} rotations, skeleton has {} joints",
                bad.joint_count(),
                n
            )));
        }
        Ok(MotionSequence {
            skeleton,
            frames,
            root_positions,
            fps,
            label: None,
            source: MotionSource::Real,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> MotionSequence {
        self.label = Some(label.into());
        self
    }

    pub fn with_source(mut self, source: MotionSource) -> MotionSequence {
        self.source = source;
        self
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn frames(&self) -> &[Pose] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Pose] {
        &mut self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn root_positions(&self) -> &[Vec3] {
        &self.root_positions
    }

    /// Rebuilds the sequence with the same skeleton and rate but new frames.
    pub fn with_frames(&self, frames: Vec<Pose>, root_positions: Vec<Vec3>) -> Result<MotionSequence> {
        let mut out = MotionSequence::new(self.skeleton.clone(), frames, root_positions, self.fps)?;
        out.label = self.label.clone();
        out.source = self.source;
        Ok(out)
    }

    /// World rotation of each joint at `frame`: the composition of local
    /// rotations from the root down.
    pub fn global_rotations(&self, frame: usize) -> Vec<Quat> {
        let pose = &self.frames[frame];
        let mut out = vec![Quat::IDENTITY; self.skeleton.joint_count()];
        for (i, joint) in self.skeleton.joints().iter().enumerate() {
            out[i] = match joint.parent {
                None => pose.rotation(i),
                Some(p) => out[p].mul(pose.rotation(i)),
            };
        }
        out
    }

    /// Hip-relative joint positions at `frame`: the root sits at the origin
    /// and each child is placed at parent position plus the parent's world
    /// rotation applied to the child's rest offset.
    pub fn joint_positions(&self, frame: usize) -> Vec<Vec3> {
        let global = self.global_rotations(frame);
        let mut out = vec![Vec3::ZERO; self.skeleton.joint_count()];
        for (i, joint) in self.skeleton.joints().iter().enumerate() {
            if let Some(p) = joint.parent {
                out[i] = out[p].add(global[p].rotate(joint.offset));
            }
        }
        out
    }

    /// Hip-relative positions for every frame.
    pub fn all_joint_positions(&self) -> Vec<Vec<Vec3>> {
        (0..self.frames.len()).map(|f| self.joint_positions(f)).collect()
    }

    /// Downsamples to `target_fps` by sampling the source timeline at the new
    /// rate, interpolating rotations along the shortest arc. Upsampling is
    /// rejected because it would manufacture detail the capture never had.
    pub fn resample(&self, target_fps: f64) -> Result<MotionSequence> {
        if !(target_fps.is_finite() && target_fps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target fps must be positive, got {target_fps}"
            )));
        }
        if target_fps > self.fps {
            return Err(Error::InvalidArgument(format!(
                "cannot resample {} fps up to {} fps",
                self.fps, target_fps
            )));
        }
        let n_src = self.frames.len();
        let n_out = ((n_src - 1) as f64 * target_fps / self.fps).floor() as usize + 1;
        let step = self.fps / target_fps;
        let last = n_src - 1;
        let mut frames = Vec::with_capacity(n_out);
        let mut roots = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let s = (i as f64 * step).min(last as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(last);
            let t = s - lo as f64;
            let a = &self.frames[lo];
            let b = &self.frames[hi];
            let rotations = (0..a.joint_count())
                .map(|j| a.rotation(j).slerp(b.rotation(j), t))
                .collect();
            frames.push(Pose::new(rotations));
            let ra = self.root_positions[lo];
            let rb = self.root_positions[hi];
            roots.push(ra.scale(1.0 - t).add(rb.scale(t)));
        }
        let mut out = MotionSequence::new(self.skeleton.clone(), frames, roots, target_fps)?;
        out.label = self.label.clone();
        out.source = self.source;
        Ok(out)
    }

    /// Keeps the first `n_frames` frames.
    pub fn trim(&self, n_frames: usize) -> Result<MotionSequence> {
        if n_frames == 0 || n_frames > self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot trim {}-frame sequence to {} frames",
                self.frames.len(),
                n_frames
            )));
        }
        let mut out = MotionSequence::new(
            self.skeleton.clone(),
            self.frames[..n_frames].to_vec(),
            self.root_positions[..n_frames].to_vec(),
            self.fps,
        )?;
        out.label = self.label.clone();
        out.source = self.source;
        Ok(out)
    }

    /// Rebinds the clip onto the canonical rig. `mapping` pairs each
    /// canonical joint name with the name of the source joint whose rotation
    /// track it should take. Every canonical joint must be mapped, no source
    /// joint may be used twice, and every source name must exist.
    pub fn retarget_to_canonical(&self, mapping: &HashMap<String, String>) -> Result<MotionSequence> {
        let canonical = Skeleton::canonical();
        let missing: Vec<String> = canonical
            .joints()
            .iter()
            .filter(|j| !mapping.contains_key(&j.name))
            .map(|j| j.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteMapping(missing));
        }
        let mut used: HashMap<&str, &str> = HashMap::new();
        let mut source_index = vec![0usize; canonical.joint_count()];
        for (ci, cj) in canonical.joints().iter().enumerate() {
            let src_name = &mapping[&cj.name];
            if let Some(prev) = used.insert(src_name.as_str(), cj.name.as_str()) {
                return Err(Error::DuplicateMapping(format!(
                    "source joint '{src_name}' mapped to both '{prev}' and '{}'",
                    cj.name
                )));
            }
            source_index[ci] = self
                .skeleton
                .index_of(src_name)
                .ok_or_else(|| Error::UnknownJoint(src_name.clone()))?;
        }
        let frames = self
            .frames
            .iter()
            .map(|pose| Pose::new(source_index.iter().map(|&s| pose.rotation(s)).collect()))
            .collect();
        let mut out = MotionSequence::new(canonical, frames, self.root_positions.clone(), self.fps)?;
        out.label = self.label.clone();
        out.source = self.source;
        Ok(out)
    }
}
