//! Skeleton hierarchies and the canonical 21-joint humanoid rig.

use crate::error::{Error, Result};
use crate::math::{RotOrder, Vec3};
use serde::{Deserialize, Serialize};

/// Number of joints in the canonical humanoid rig.
pub const CANONICAL_JOINT_COUNT: usize = 21;

/// Canonical joint names, topologically ordered (parents precede children).
pub const CANONICAL_JOINT_NAMES: [&str; CANONICAL_JOINT_COUNT] = [
    "Hips", "Spine", "Spine1", "Neck", "Head", "LShoulder", "LArm", "LForeArm", "LHand",
    "RShoulder", "RArm", "RForeArm", "RHand", "LUpLeg", "LLeg", "LFoot", "LToe", "RUpLeg",
    "RLeg", "RFoot", "RToe",
];

/// One joint of a skeleton hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Index of the parent joint; `None` for the root. Parents always
    /// precede children in the joint list.
    pub parent: Option<usize>,
    /// Rest offset from the parent joint, in centimeters.
    pub offset: Vec3,
    /// Euler channel order used when the joint was read from or is written
    /// to a BVH document.
    pub rot_order: RotOrder,
    /// End-site offset for leaf joints, preserved through BVH round trips.
    pub end_site: Option<Vec3>,
}

/// A joint hierarchy with exactly one root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    /// Validates the single-root/topological-order invariants.
    pub fn new(joints: Vec<Joint>) -> Result<Skeleton> {
        if joints.is_empty() {
            return Err(Error::InvalidArgument("skeleton has no joints".into()));
        }
        let mut roots = 0usize;
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None => roots += 1,
                Some(p) => {
                    if p >= i {
                        return Err(Error::InvalidArgument(format!(
                            "joint '{}' references parent {} which does not precede it",
                            j.name, p
                        )));
                    }
                }
            }
        }
        if roots != 1 {
            return Err(Error::InvalidArgument(format!(
                "skeleton must have exactly one root, found {roots}"
            )));
        }
        Ok(Skeleton { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn root_index(&self) -> usize {
        // Validated at construction: index 0 is the single root.
        0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn is_canonical(&self) -> bool {
        self.joints.len() == CANONICAL_JOINT_COUNT
            && self
                .joints
                .iter()
                .zip(CANONICAL_JOINT_NAMES.iter())
                .all(|(j, name)| j.name == *name)
    }

    /// The canonical 21-joint humanoid: T-pose, centimeter offsets sized for
    /// a typical adult character, hips at the origin.
    pub fn canonical() -> Skeleton {
        let spec: [(usize, Option<usize>, [f64; 3]); CANONICAL_JOINT_COUNT] = [
            (0, None, [0.0, 0.0, 0.0]),          // Hips
            (1, Some(0), [0.0, 10.0, 0.0]),      // Spine
            (2, Some(1), [0.0, 15.0, 0.0]),      // Spine1
            (3, Some(2), [0.0, 15.0, 0.0]),      // Neck
            (4, Some(3), [0.0, 10.0, 0.0]),      // Head
            (5, Some(2), [5.0, 12.0, 0.0]),      // LShoulder
            (6, Some(5), [13.0, 0.0, 0.0]),      // LArm
            (7, Some(6), [28.0, 0.0, 0.0]),      // LForeArm
            (8, Some(7), [25.0, 0.0, 0.0]),      // LHand
            (9, Some(2), [-5.0, 12.0, 0.0]),     // RShoulder
            (10, Some(9), [-13.0, 0.0, 0.0]),    // RArm
            (11, Some(10), [-28.0, 0.0, 0.0]),   // RForeArm
            (12, Some(11), [-25.0, 0.0, 0.0]),   // RHand
            (13, Some(0), [9.0, -5.0, 0.0]),     // LUpLeg
            (14, Some(13), [0.0, -42.0, 0.0]),   // LLeg
            (15, Some(14), [0.0, -40.0, 0.0]),   // LFoot
            (16, Some(15), [0.0, -6.0, 14.0]),   // LToe
            (17, Some(0), [-9.0, -5.0, 0.0]),    // RUpLeg
            (18, Some(17), [0.0, -42.0, 0.0]),   // RLeg
            (19, Some(18), [0.0, -40.0, 0.0]),   // RFoot
            (20, Some(19), [0.0, -6.0, 14.0]),   // RToe
        ];
        let end_sites: [Option<[f64; 3]>; CANONICAL_JOINT_COUNT] = {
            let mut e = [None; CANONICAL_JOINT_COUNT];
            e[4] = Some([0.0, 12.0, 0.0]); // Head
            e[8] = Some([10.0, 0.0, 0.0]); // LHand
            e[12] = Some([-10.0, 0.0, 0.0]); // RHand
            e[16] = Some([0.0, 0.0, 6.0]); // LToe
            e[20] = Some([0.0, 0.0, 6.0]); // RToe
            e
        };
        let joints = spec
            .iter()
            .zip(CANONICAL_JOINT_NAMES.iter())
            .zip(end_sites.iter())
            .map(|(((_, parent, off), name), end)| Joint {
                name: (*name).to_string(),
                parent: *parent,
                offset: Vec3::new(off[0], off[1], off[2]),
                rot_order: RotOrder::Zxy,
                end_site: end.map(|e| Vec3::new(e[0], e[1], e[2])),
            })
            .collect();
        Skeleton::new(joints).expect("canonical rig is valid")
    }

    /// Children of each joint, in joint order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.joints.len()];
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                out[p].push(i);
            }
        }
        out
    }
}

/// Index pairs `(left, right)` of mirrored canonical joints.
pub const CANONICAL_MIRROR_PAIRS: [(usize, usize); 8] = [
    (5, 9),   // Shoulder
    (6, 10),  // Arm
    (7, 11),  // ForeArm
    (8, 12),  // Hand
    (13, 17), // UpLeg
    (14, 18), // Leg
    (15, 19), // Foot
    (16, 20), // Toe
];

/// Canonical joints above the hips: spine chain, head, both arms (13 joints).
pub const CANONICAL_UPPER_BODY: [usize; 13] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];

/// Canonical leg joints (8 joints).
pub const CANONICAL_LOWER_BODY: [usize; 8] = [13, 14, 15, 16, 17, 18, 19, 20];
