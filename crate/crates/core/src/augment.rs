//! Dataset augmentation: cluster-balanced synthesis of sequence variants,
//! plus deliberately implausible hard negatives for discriminator training.
//!
//! The four balancing operators (mutate, crossover, halve, mirror) produce
//! plausible variants; the hard-negative operators (reversal, big noise,
//! bounce) produce clips a competent discriminator should reject. All
//! operators are pure given their seed.

use crate::codec::{encode_poses, AutoencoderModel};
use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::motion::{MotionSequence, MotionSource, Pose};
use crate::skeleton::{CANONICAL_JOINT_COUNT, CANONICAL_LOWER_BODY, CANONICAL_MIRROR_PAIRS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

/// Default per-joint noise scale for plausible mutation, in degrees.
pub const DEFAULT_MUTATE_DEGREES: f64 = 5.0;

/// Noise scale used for the `BigNoise` hard negative, in degrees. Large
/// enough to reliably break pose plausibility.
pub const BIG_NOISE_DEGREES: f64 = 45.0;

/// Upper bound on Lloyd iterations; clustering converges far earlier on the
/// dataset sizes this crate targets.
const MAX_KMEANS_ITERS: usize = 100;

/// Perturbs every joint rotation of every frame by a random axis-angle
/// rotation whose angle is drawn from `N(0, noise_scale_degrees^2)` and whose
/// axis is uniform on the sphere. Root positions are untouched. A zero noise
/// scale reproduces the input motion exactly.
pub fn mutate(
    motion: &MotionSequence,
    noise_scale_degrees: f64,
    seed: u64,
) -> Result<MotionSequence> {
    if !(noise_scale_degrees.is_finite() && noise_scale_degrees >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be a finite non-negative angle, got {noise_scale_degrees}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(motion.frame_count());
    for pose in motion.frames() {
        let rotations = pose
            .rotations()
            .iter()
            .map(|&q| {
                // Both draws happen on every joint so the stream layout does
                // not depend on the sampled values.
                let z: f64 = StandardNormal.sample(&mut rng);
                let axis: [f64; 3] = UnitSphere.sample(&mut rng);
                let angle = (z * noise_scale_degrees).to_radians();
                if angle == 0.0 {
                    return q;
                }
                let delta = Quat::from_axis_angle(Vec3::new(axis[0], axis[1], axis[2]), angle);
                delta.mul(q).normalized()
            })
            .collect();
        frames.push(Pose::from_unit_rotations(rotations));
    }
    Ok(motion
        .with_frames(frames, motion.root_positions().to_vec())?
        .with_source(MotionSource::Augmented))
}

/// Splices two frame-aligned sequences: the spine, head, and arms keep `a`'s
/// rotations while both legs take `b`'s. Root positions and the label come
/// from `a`.
pub fn crossover(a: &MotionSequence, b: &MotionSequence) -> Result<MotionSequence> {
    if !a.skeleton().is_canonical() || !b.skeleton().is_canonical() {
        return Err(Error::SkeletonMismatch(
            "crossover requires the canonical skeleton".into(),
        ));
    }
    if a.frame_count() != b.frame_count() {
        return Err(Error::InvalidArgument(format!(
            "crossover needs equal frame counts, got {} and {}",
            a.frame_count(),
            b.frame_count()
        )));
    }
    if a.fps() != b.fps() {
        return Err(Error::InvalidArgument(format!(
            "crossover needs equal frame rates, got {} and {}",
            a.fps(),
            b.fps()
        )));
    }
    let mut lower = [false; CANONICAL_JOINT_COUNT];
    for &j in &CANONICAL_LOWER_BODY {
        lower[j] = true;
    }
    let frames = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(pa, pb)| {
            let rotations = (0..CANONICAL_JOINT_COUNT)
                .map(|j| if lower[j] { pb.rotation(j) } else { pa.rotation(j) })
                .collect();
            Pose::from_unit_rotations(rotations)
        })
        .collect();
    Ok(a.with_frames(frames, a.root_positions().to_vec())?
        .with_source(MotionSource::Augmented))
}

/// Halves every joint's rotation span: each rotation is replaced by the
/// spherical midpoint between identity and itself, so the angle halves while
/// the axis is preserved. Root positions are untouched.
pub fn halve(motion: &MotionSequence) -> MotionSequence {
    let frames = motion
        .frames()
        .iter()
        .map(|pose| {
            let rotations = pose
                .rotations()
                .iter()
                .map(|q| {
                    let (axis, angle) = q.to_axis_angle();
                    Quat::from_axis_angle(axis, angle * 0.5)
                })
                .collect();
            Pose::from_unit_rotations(rotations)
        })
        .collect();
    motion
        .with_frames(frames, motion.root_positions().to_vec())
        .expect("frame and root counts are preserved")
        .with_source(MotionSource::Augmented)
}

/// Reflects a motion across the sagittal (YZ) plane: left and right joint
/// tracks swap, each quaternion's y and z components are negated, and the
/// root's x translation flips sign. Requires the canonical rig so sides can
/// be identified. Applying mirror twice restores the input exactly.
pub fn mirror(motion: &MotionSequence) -> Result<MotionSequence> {
    if !motion.skeleton().is_canonical() {
        return Err(Error::SkeletonMismatch(
            "mirror requires the canonical skeleton".into(),
        ));
    }
    let mut map: [usize; CANONICAL_JOINT_COUNT] = std::array::from_fn(|i| i);
    for &(l, r) in &CANONICAL_MIRROR_PAIRS {
        map[l] = r;
        map[r] = l;
    }
    let frames = motion
        .frames()
        .iter()
        .map(|pose| {
            let rotations = (0..CANONICAL_JOINT_COUNT)
                .map(|j| {
                    let q = pose.rotation(map[j]);
                    Quat::new(q.w, q.x, -q.y, -q.z)
                })
                .collect();
            Pose::from_unit_rotations(rotations)
        })
        .collect();
    let roots = motion
        .root_positions()
        .iter()
        .map(|p| Vec3::new(-p.x, p.y, p.z))
        .collect();
    Ok(motion
        .with_frames(frames, roots)?
        .with_source(MotionSource::Augmented))
}

/// The ways an implausible clip can be synthesized from a real one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardNegativeKind {
    /// Conjugate every quaternion, negating each joint's rotation angle.
    Reversal,
    /// Mutation at a scale that destroys pose plausibility.
    BigNoise,
    /// First half of the clip followed by its own time reversal.
    Bounce,
}

/// Synthesizes an implausible variant of `motion` for discriminator
/// training. `seed` only affects `BigNoise`; reversal and bounce are
/// deterministic rearrangements.
pub fn synth_hard_negative(
    motion: &MotionSequence,
    kind: HardNegativeKind,
    seed: u64,
) -> Result<MotionSequence> {
    let out = match kind {
        HardNegativeKind::Reversal => {
            let frames = motion
                .frames()
                .iter()
                .map(|pose| {
                    Pose::from_unit_rotations(
                        pose.rotations().iter().map(|q| q.conjugate()).collect(),
                    )
                })
                .collect();
            motion.with_frames(frames, motion.root_positions().to_vec())?
        }
        HardNegativeKind::BigNoise => mutate(motion, BIG_NOISE_DEGREES, seed)?,
        HardNegativeKind::Bounce => {
            let n = motion.frame_count();
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "bounce needs at least 2 frames, got {n}"
                )));
            }
            // Frames [0, ceil(n/2)) play forward, then reflect back so the
            // output is a palindrome of the original length.
            let half = n.div_ceil(2);
            let idx = |i: usize| if i < half { i } else { n - 1 - i };
            let frames = (0..n).map(|i| motion.frames()[idx(i)].clone()).collect();
            let roots = (0..n).map(|i| motion.root_positions()[idx(i)]).collect();
            motion.with_frames(frames, roots)?
        }
    };
    Ok(out.with_source(MotionSource::HardNegative))
}

/// K-means clustering of a dataset by per-sequence mean pose embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
}

impl ClusterModel {
    pub fn cluster_count(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Cluster index of each dataset sequence, in dataset order.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Member count of each cluster.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Index of the smallest cluster; ties resolve to the lowest index so
    /// the choice is deterministic.
    pub fn smallest(&self) -> usize {
        let sizes = self.sizes();
        let mut best = 0;
        for (i, &s) in sizes.iter().enumerate() {
            if s < sizes[best] {
                best = i;
            }
        }
        best
    }

    /// Dataset indices assigned to `cluster`, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mean bottleneck embedding over all frames of a sequence.
fn mean_embedding(codec: &AutoencoderModel, seq: &MotionSequence) -> Result<Vec<f64>> {
    let z = encode_poses(codec, seq.frames())?;
    let mut mean = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += z.get(r, c);
        }
    }
    let inv = 1.0 / z.rows() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point; ties resolve to the lowest centroid index.
fn assign_points(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = dist_sq(p, &centroids[0]);
            for (i, c) in centroids.iter().enumerate().skip(1) {
                let d = dist_sq(p, c);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Standard k-means++ seeding: first centroid uniform, each further one
/// drawn with probability proportional to squared distance from the nearest
/// centroid chosen so far. Falls back to a uniform draw when every point
/// already coincides with a centroid.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                t -= d;
                if t <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (p, n) in points.iter().zip(nearest.iter_mut()) {
            *n = n.min(dist_sq(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Clusters the dataset by k-means on per-sequence mean pose embeddings.
/// Deterministic given the seed. A cluster left empty by an assignment step
/// keeps its previous centroid.
pub fn cluster_sequences(
    dataset: &[MotionSequence],
    codec: &AutoencoderModel,
    k: usize,
    seed: u64,
) -> Result<ClusterModel> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot cluster an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    if k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} clusters requested for {} sequences",
            dataset.len()
        )));
    }
    let points: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| mean_embedding(codec, s))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, k, &mut rng);
    let mut assignment = assign_points(&points, &centroids);
    for _ in 0..MAX_KMEANS_ITERS {
        let dim = centroids[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (dst, s) in c.iter_mut().zip(sum) {
                    *dst = s * inv;
                }
            }
        }
        let next = assign_points(&points, &centroids);
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }
    Ok(ClusterModel { centroids, assignment })
}

/// How the cluster count grows across balancing rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSchedule {
    /// Cluster count for the first round.
    pub start: usize,
    /// Added to the cluster count each subsequent round.
    pub increment: usize,
}

impl Default for ClusterSchedule {
    fn default() -> ClusterSchedule {
        ClusterSchedule { start: 4, increment: 2 }
    }
}

/// The balancing operator actually applied in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceOp {
    Mutate,
    Crossover,
    Halve,
    Mirror,
}

/// Record of one balancing round, suitable for a JSON manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRound {
    pub round: usize,
    /// Cluster count used this round.
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
    /// Index of the cluster that received the synthesized sequence.
    pub smallest: usize,
    pub op: BalanceOp,
    /// Indices into the outcome's sequence list of the parent(s) used.
    pub parents: Vec<usize>,
    /// Seed handed to the operator (consumed only by mutation).
    pub seed: u64,
}

/// Result of dataset balancing: the grown dataset plus a per-round audit
/// trail. Original sequences keep their indices; synthesized ones append.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub sequences: Vec<MotionSequence>,
    pub rounds: Vec<BalanceRound>,
}

/// Grows the dataset to `target` sequences. Each round clusters with the
/// scheduled k (clamped to the current dataset size), finds the smallest
/// cluster, and synthesizes one new member from it with a uniformly chosen
/// operator. Crossover falls back to mutation when the chosen parents'
/// frame counts or rates disagree. Deterministic given the seed; originals
/// are never removed or reordered.
pub fn balance_dataset(
    dataset: &[MotionSequence],
    codec: &AutoencoderModel,
    schedule: ClusterSchedule,
    target: usize,
    seed: u64,
) -> Result<BalanceOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot balance an empty dataset".into()));
    }
    if target < dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "target size {target} is below the current size {}",
            dataset.len()
        )));
    }
    if schedule.start == 0 {
        return Err(Error::InvalidArgument("cluster schedule must start at 1 or more".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = dataset.to_vec();
    let mut rounds: Vec<BalanceRound> = Vec::new();
    while sequences.len() < target {
        let round = rounds.len();
        let k = (schedule.start + round * schedule.increment).min(sequences.len());
        let cluster_seed = rng.gen::<u64>();
        let model = cluster_sequences(&sequences, codec, k, cluster_seed)?;
        let smallest = model.smallest();
        let members = model.members(smallest);
        let choice = [BalanceOp::Mutate, BalanceOp::Crossover, BalanceOp::Halve, BalanceOp::Mirror]
            [rng.gen_range(0..4)];
        let op_seed = rng.gen::<u64>();
        let pick = |rng: &mut ChaCha8Rng| members[rng.gen_range(0..members.len())];
        let (synth, op, parents) = match choice {
            BalanceOp::Mutate => {
                let p = pick(&mut rng);
                (mutate(&sequences[p], DEFAULT_MUTATE_DEGREES, op_seed)?, choice, vec![p])
            }
            BalanceOp::Crossover => {
                let pa = pick(&mut rng);
                let pb = pick(&mut rng);
                let compatible = sequences[pa].frame_count() == sequences[pb].frame_count()
                    && sequences[pa].fps() == sequences[pb].fps();
                if compatible {
                    (crossover(&sequences[pa], &sequences[pb])?, choice, vec![pa, pb])
                } else {
                    (
                        mutate(&sequences[pa], DEFAULT_MUTATE_DEGREES, op_seed)?,
                        BalanceOp::Mutate,
                        vec![pa],
                    )
                }
            }
            BalanceOp::Halve => {
                let p = pick(&mut rng);
                (halve(&sequences[p]), choice, vec![p])
            }
            BalanceOp::Mirror => {
                let p = pick(&mut rng);
                (mirror(&sequences[p])?, choice, vec![p])
            }
        };
        rounds.push(BalanceRound {
            round,
            k,
            cluster_sizes: model.sizes(),
            smallest,
            op,
            parents,
            seed: op_seed,
        });
        sequences.push(synth);
    }
    Ok(BalanceOutcome { sequences, rounds })
}
