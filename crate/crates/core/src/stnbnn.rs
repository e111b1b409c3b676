//! Main-joint detection.
//!
//! A sequence is split into contiguous temporal stages; each (joint, stage)
//! pair yields a descriptor of concatenated hip-relative positions. Training
//! computes, per labeled query sequence, the nearest-neighbor distance from
//! each of its descriptors to every class's store (leave-one-out within the
//! query's own class), then fits non-negative spatial weights v over joints
//! and temporal weights u over stages so that u·(M_wrong − M_own)·v separates
//! classes under a logistic criterion. The J joints with the largest spatial
//! weights are the main joints. A motion-energy ranking serves as the
//! selector when no labeled corpus exists.

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default temporal stage count.
pub const DEFAULT_STAGES: usize = 10;
/// Default main-joint count; covers one limb pair plus torso support.
pub const DEFAULT_MAIN_JOINTS: usize = 8;

const FIT_ROUNDS: usize = 5;
const FIT_STEPS_PER_PHASE: usize = 60;
const FIT_LEARNING_RATE: f64 = 0.1;

/// Hip-relative position track of one joint over one temporal stage,
/// flattened as x, y, z per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDescriptor {
    pub joint: usize,
    pub stage: usize,
    pub descriptor: Vec<f64>,
}

/// Non-empty, strictly increasing set of joint indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainJointSet {
    indices: Vec<usize>,
}

impl MainJointSet {
    pub fn new(mut indices: Vec<usize>, joint_count: usize) -> Result<MainJointSet> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::InvalidArgument("main joint set is empty".into()));
        }
        if let Some(&j) = indices.iter().find(|&&j| j >= joint_count) {
            return Err(Error::InvalidArgument(format!(
                "main joint {j} out of range for {joint_count} joints"
            )));
        }
        Ok(MainJointSet { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, joint: usize) -> bool {
        self.indices.binary_search(&joint).is_ok()
    }
}

/// Descriptors for one sequence, indexed [joint][stage].
type DescriptorGrid = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
struct ClassStore {
    label: String,
    sequences: Vec<DescriptorGrid>,
}

/// Trained main-joint detector: a reference descriptor store grouped by
/// class plus the fitted stage and joint weights.
#[derive(Debug, Clone)]
pub struct StnbnnModel {
    t_stages: usize,
    j_count: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    store: Vec<ClassStore>,
}

/// Compact serializable form: weights plus a digest of the descriptor store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StnbnnRecord {
    pub version: u32,
    pub t_stages: usize,
    pub j_count: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub store_digest: String,
}

pub const STNBNN_RECORD_VERSION: u32 = 1;

/// Splits `frames` into `t_stages` contiguous near-equal spans.
fn stage_bounds(frames: usize, t_stages: usize) -> Vec<(usize, usize)> {
    (0..t_stages)
        .map(|i| (i * frames / t_stages, (i + 1) * frames / t_stages))
        .collect()
}

fn descriptor_grid(motion: &MotionSequence, t_stages: usize) -> Result<DescriptorGrid> {
    if t_stages == 0 {
        return Err(Error::InvalidArgument("stage count must be positive".into()));
    }
    let n = motion.frame_count();
    if n < t_stages {
        return Err(Error::InvalidArgument(format!(
            "{n} frames cannot fill {t_stages} stages"
        )));
    }
    let positions = motion.all_joint_positions();
    let joints = motion.skeleton().joint_count();
    let bounds = stage_bounds(n, t_stages);
    let mut grid = vec![Vec::with_capacity(t_stages); joints];
    for (j, rows) in grid.iter_mut().enumerate() {
        for &(lo, hi) in &bounds {
            let mut d = Vec::with_capacity(3 * (hi - lo));
            for frame in &positions[lo..hi] {
                let p = frame[j];
                d.extend_from_slice(&[p.x, p.y, p.z]);
            }
            rows.push(d);
        }
    }
    Ok(grid)
}

/// Extracts the full joint-major collection of stage descriptors.
pub fn extract_stage_descriptors(
    motion: &MotionSequence,
    t_stages: usize,
) -> Result<Vec<StageDescriptor>> {
    let grid = descriptor_grid(motion, t_stages)?;
    let mut out = Vec::with_capacity(grid.len() * t_stages);
    for (joint, rows) in grid.into_iter().enumerate() {
        for (stage, descriptor) in rows.into_iter().enumerate() {
            out.push(StageDescriptor { joint, stage, descriptor });
        }
    }
    Ok(out)
}

/// Samples a position track (x, y, z per frame) at `target` evenly spaced
/// parameters, interpolating linearly between frames.
fn resample_track(d: &[f64], target: usize) -> Vec<f64> {
    let frames = d.len() / 3;
    let mut out = Vec::with_capacity(3 * target);
    for i in 0..target {
        let t = if target > 1 {
            i as f64 * (frames - 1) as f64 / (target - 1) as f64
        } else {
            0.0
        };
        let lo = (t.floor() as usize).min(frames - 1);
        let hi = (lo + 1).min(frames - 1);
        let w = t - lo as f64;
        for c in 0..3 {
            out.push(d[3 * lo + c] * (1.0 - w) + d[3 * hi + c] * w);
        }
    }
    out
}

/// Squared Euclidean distance between two stage descriptors. Unequal frame
/// counts are reconciled by resampling the stored track to the query's
/// length, so the value is exact whenever the counts match.
pub fn descriptor_distance(query: &[f64], stored: &[f64]) -> f64 {
    if query.len() == stored.len() {
        query
            .iter()
            .zip(stored.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    } else {
        let resampled = resample_track(stored, query.len() / 3);
        descriptor_distance(query, &resampled)
    }
}

/// Minimum descriptor distance from each (joint, stage) of `query` to the
/// corresponding cell across `store`, skipping index `skip` when given.
fn nn_distance_matrix(
    query: &DescriptorGrid,
    store: &[DescriptorGrid],
    skip: Option<usize>,
) -> Vec<Vec<f64>> {
    let joints = query.len();
    let stages = query[0].len();
    let mut m = vec![vec![f64::INFINITY; stages]; joints];
    for (s, grid) in store.iter().enumerate() {
        if skip == Some(s) {
            continue;
        }
        for j in 0..joints {
            for t in 0..stages {
                let d = descriptor_distance(&query[j][t], &grid[j][t]);
                if d < m[j][t] {
                    m[j][t] = d;
                }
            }
        }
    }
    m
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normalize_simplex(w: &mut [f64]) {
    for x in w.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    if s < 1e-12 {
        let uniform = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|x| *x = uniform);
    } else {
        w.iter_mut().for_each(|x| *x /= s);
    }
}

/// One projected-gradient phase of the logistic fit: `features` holds one
/// vector per training pair, the free weight vector moves to increase every
/// u·D·v margin, then is clamped to the simplex.
fn fit_phase(weights: &mut [f64], features: &[Vec<f64>]) {
    for _ in 0..FIT_STEPS_PER_PHASE {
        let mut grad = vec![0.0; weights.len()];
        for f in features {
            let z: f64 = f.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
            let coef = sigmoid(-z);
            for (g, &x) in grad.iter_mut().zip(f.iter()) {
                *g -= coef * x;
            }
        }
        for (w, g) in weights.iter_mut().zip(grad.iter()) {
            *w -= FIT_LEARNING_RATE * g / features.len() as f64;
        }
        normalize_simplex(weights);
    }
}

/// Alternating fit of (u, v) on margin matrices D = M_wrong − M_own.
fn fit_weights(diffs: &[Vec<Vec<f64>>], joints: usize, t_stages: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![1.0 / t_stages as f64; t_stages];
    let mut v = vec![1.0 / joints as f64; joints];
    if diffs.is_empty() {
        return (u, v);
    }

    // Distances carry arbitrary squared-length units; rescale so initial
    // margins average to one and the logistic never starts saturated.
    let mut scale = 0.0;
    for d in diffs {
        let z: f64 = d
            .iter()
            .enumerate()
            .map(|(j, row)| {
                v[j] * row.iter().enumerate().map(|(t, &x)| u[t] * x).sum::<f64>()
            })
            .sum();
        scale += z.abs();
    }
    scale /= diffs.len() as f64;
    if scale < 1e-12 {
        return (u, v);
    }
    let diffs: Vec<Vec<Vec<f64>>> = diffs
        .iter()
        .map(|d| d.iter().map(|row| row.iter().map(|&x| x / scale).collect()).collect())
        .collect();

    for _ in 0..FIT_ROUNDS {
        // Fix u, fit v on row features (u-weighted stage sums per joint).
        let features: Vec<Vec<f64>> = diffs
            .iter()
            .map(|d| {
                d.iter()
                    .map(|row| row.iter().zip(u.iter()).map(|(&x, &w)| x * w).sum())
                    .collect()
            })
            .collect();
        fit_phase(&mut v, &features);

        // Fix v, fit u on column features (v-weighted joint sums per stage).
        let features: Vec<Vec<f64>> = diffs
            .iter()
            .map(|d| {
                (0..t_stages)
                    .map(|t| d.iter().zip(v.iter()).map(|(row, &w)| row[t] * w).sum())
                    .collect()
            })
            .collect();
        fit_phase(&mut u, &features);
    }
    (u, v)
}

/// Trains the detector on labeled sequences. Requires at least two classes
/// and at least two sequences in every class.
pub fn train_stnbnn(
    sequences: &[MotionSequence],
    t_stages: usize,
    j_count: usize,
) -> Result<StnbnnModel> {
    if sequences.is_empty() {
        return Err(Error::DegenerateCorpus("no sequences".into()));
    }
    let joints = sequences[0].skeleton().joint_count();
    if sequences.iter().any(|s| s.skeleton().joint_count() != joints) {
        return Err(Error::ShapeMismatch("sequences disagree on joint count".into()));
    }
    if j_count == 0 || j_count > joints {
        return Err(Error::InvalidArgument(format!(
            "main-joint count {j_count} outside [1, {joints}]"
        )));
    }

    let mut labeled: Vec<(String, DescriptorGrid)> = Vec::with_capacity(sequences.len());
    for s in sequences {
        let label = s
            .label
            .clone()
            .ok_or_else(|| Error::InvalidArgument("unlabeled sequence in training corpus".into()))?;
        labeled.push((label, descriptor_grid(s, t_stages)?));
    }

    let mut store: Vec<ClassStore> = Vec::new();
    for (label, grid) in labeled {
        match store.iter_mut().find(|c| c.label == label) {
            Some(c) => c.sequences.push(grid),
            None => store.push(ClassStore { label, sequences: vec![grid] }),
        }
    }
    if store.len() < 2 {
        return Err(Error::DegenerateCorpus(format!(
            "{} class(es); training needs at least two",
            store.len()
        )));
    }
    if let Some(c) = store.iter().find(|c| c.sequences.len() < 2) {
        return Err(Error::DegenerateCorpus(format!(
            "class {:?} has {} sequence(s); training needs at least two per class",
            c.label,
            c.sequences.len()
        )));
    }

    // One margin matrix per (query, wrong class): D = M_wrong − M_own. One
    // reference is withheld from every class per query (the query itself
    // from its own class, the aligned index elsewhere) so the min-distances
    // compare stores of equal size; otherwise the own-class minimum runs
    // over one fewer candidate and picks up a systematic positive bias.
    let mut diffs: Vec<Vec<Vec<f64>>> = Vec::new();
    for (own_idx, own) in store.iter().enumerate() {
        for (qi, query) in own.sequences.iter().enumerate() {
            let m_own = nn_distance_matrix(query, &own.sequences, Some(qi));
            for (other_idx, other) in store.iter().enumerate() {
                if other_idx == own_idx {
                    continue;
                }
                let m_other =
                    nn_distance_matrix(query, &other.sequences, Some(qi % other.sequences.len()));
                let d: Vec<Vec<f64>> = m_other
                    .iter()
                    .zip(m_own.iter())
                    .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x - y).collect())
                    .collect();
                diffs.push(d);
            }
        }
    }

    let (u, v) = fit_weights(&diffs, joints, t_stages);
    Ok(StnbnnModel { t_stages, j_count, u, v, store })
}

impl StnbnnModel {
    /// Placeholder with no fitted weights; main-joint queries fail on it.
    pub fn untrained(t_stages: usize, j_count: usize) -> StnbnnModel {
        StnbnnModel { t_stages, j_count, u: Vec::new(), v: Vec::new(), store: Vec::new() }
    }

    pub fn is_trained(&self) -> bool {
        !self.v.is_empty()
    }

    pub fn t_stages(&self) -> usize {
        self.t_stages
    }

    pub fn j_count(&self) -> usize {
        self.j_count
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// SHA-256 over the descriptor store in deterministic order.
    pub fn store_digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.store {
            h.update(c.label.as_bytes());
            h.update([0u8]);
            for grid in &c.sequences {
                for rows in grid {
                    for d in rows {
                        for &x in d {
                            h.update(x.to_le_bytes());
                        }
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn record(&self) -> StnbnnRecord {
        StnbnnRecord {
            version: STNBNN_RECORD_VERSION,
            t_stages: self.t_stages,
            j_count: self.j_count,
            u: self.u.clone(),
            v: self.v.clone(),
            store_digest: self.store_digest(),
        }
    }

    /// Restores weights from a record; the descriptor store is not carried,
    /// so the result supports main-joint queries only.
    pub fn from_record(r: &StnbnnRecord) -> Result<StnbnnModel> {
        if r.version != STNBNN_RECORD_VERSION {
            return Err(Error::CheckpointVersion {
                found: r.version,
                expected: STNBNN_RECORD_VERSION,
            });
        }
        if r.v.is_empty() || r.u.len() != r.t_stages {
            return Err(Error::CorruptCheckpoint("weight lengths disagree with stage count".into()));
        }
        if r.j_count == 0 || r.j_count > r.v.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "main-joint count {} outside [1, {}]",
                r.j_count,
                r.v.len()
            )));
        }
        if r.u.iter().chain(r.v.iter()).any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::CorruptCheckpoint("weights must be finite and non-negative".into()));
        }
        Ok(StnbnnModel {
            t_stages: r.t_stages,
            j_count: r.j_count,
            u: r.u.clone(),
            v: r.v.clone(),
            store: Vec::new(),
        })
    }
}

/// Top-J joints by weight, ties broken toward lower indices.
fn top_joints(weights: &[f64], j_count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(j_count);
    order
}

/// The J joints with the largest fitted spatial weights.
pub fn main_joints(model: &StnbnnModel, motion: &MotionSequence) -> Result<MainJointSet> {
    if !model.is_trained() {
        return Err(Error::UntrainedModel);
    }
    let joints = motion.skeleton().joint_count();
    if joints != model.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "motion has {joints} joints, model weights cover {}",
            model.v.len()
        )));
    }
    MainJointSet::new(top_joints(&model.v, model.j_count), joints)
}

/// Fallback selector: ranks joints by motion energy, the summed squared
/// frame-to-frame displacement of each joint's hip-relative position.
pub fn motion_energy_main_joints(
    motion: &MotionSequence,
    j_count: usize,
) -> Result<MainJointSet> {
    let joints = motion.skeleton().joint_count();
    if j_count == 0 || j_count > joints {
        return Err(Error::InvalidArgument(format!(
            "main-joint count {j_count} outside [1, {joints}]"
        )));
    }
    let positions = motion.all_joint_positions();
    let mut energy = vec![0.0; joints];
    for t in 1..positions.len() {
        for j in 0..joints {
            energy[j] += positions[t][j].sub(positions[t - 1][j]).norm_sq();
        }
    }
    MainJointSet::new(top_joints(&energy, j_count), joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Quat, Vec3};
    use crate::motion::{MotionSequence, Pose};
    use crate::skeleton::Skeleton;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Canonical-skeleton sequence where each listed joint swings about z
    /// with the given amplitude; everything else holds the bind pose.
    fn swing_sequence(
        driven: &[(usize, f64)],
        frames: usize,
        phase: f64,
        label: &str,
    ) -> MotionSequence {
        let skeleton = Skeleton::canonical();
        let joints = skeleton.joint_count();
        let poses: Vec<Pose> = (0..frames)
            .map(|t| {
                let mut p = Pose::identity(joints);
                let s = (2.0 * std::f64::consts::PI * t as f64 / frames as f64 + phase).sin();
                for &(j, amp) in driven {
                    p.set_rotation(j, Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), amp * s));
                }
                p
            })
            .collect();
        MotionSequence::new(skeleton, poses, vec![Vec3::ZERO; frames], 30.0)
            .unwrap()
            .with_label(label)
    }

    fn random_motion(seed: u64, frames: usize) -> MotionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skeleton = Skeleton::canonical();
        let joints = skeleton.joint_count();
        let poses: Vec<Pose> = (0..frames)
            .map(|_| {
                let rots: Vec<Quat> = (0..joints)
                    .map(|_| {
                        Quat::from_axis_angle(
                            Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0),
                            rng.gen_range(-0.5..0.5),
                        )
                    })
                    .collect();
                Pose::new(rots)
            })
            .collect();
        MotionSequence::new(skeleton, poses, vec![Vec3::ZERO; frames], 30.0).unwrap()
    }

    #[test]
    fn extraction_counts_and_lengths() {
        let m = random_motion(1, 30);
        let ds = extract_stage_descriptors(&m, 10).unwrap();
        assert_eq!(ds.len(), 210);
        assert!(ds.iter().all(|d| d.descriptor.len() == 9));
        assert!(ds.iter().all(|d| d.descriptor.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn extraction_uneven_stages_cover_all_frames() {
        let m = random_motion(2, 32);
        let ds = extract_stage_descriptors(&m, 10).unwrap();
        let per_joint: usize = ds
            .iter()
            .filter(|d| d.joint == 0)
            .map(|d| d.descriptor.len() / 3)
            .sum();
        assert_eq!(per_joint, 32);
        let bounds = stage_bounds(32, 10);
        assert_eq!(bounds[0], (0, 3));
        assert_eq!(bounds[9].1, 32);
        assert!(bounds.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn extraction_rejects_too_few_frames() {
        let m = random_motion(3, 9);
        assert!(matches!(
            extract_stage_descriptors(&m, 10),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn static_pose_gives_identical_stage_descriptors_per_joint() {
        let skeleton = Skeleton::canonical();
        let joints = skeleton.joint_count();
        let pose = Pose::identity(joints);
        let m = MotionSequence::new(
            skeleton,
            vec![pose; 20],
            vec![Vec3::ZERO; 20],
            30.0,
        )
        .unwrap();
        let ds = extract_stage_descriptors(&m, 10).unwrap();
        for j in 0..joints {
            let per_joint: Vec<&StageDescriptor> = ds.iter().filter(|d| d.joint == j).collect();
            assert!(per_joint.windows(2).all(|w| w[0].descriptor == w[1].descriptor));
        }
    }

    #[test]
    fn own_store_distance_is_zero_when_query_included() {
        let m = random_motion(4, 20);
        let grid = descriptor_grid(&m, 10).unwrap();
        let other = descriptor_grid(&random_motion(5, 20), 10).unwrap();
        let store = vec![other, grid.clone()];
        let dist = nn_distance_matrix(&grid, &store, None);
        assert!(dist.iter().flatten().all(|&d| d == 0.0));
    }

    #[test]
    fn descriptor_distance_resamples_mismatched_lengths() {
        // Constant track: any resampling reproduces it exactly.
        let short = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let long = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        assert_eq!(descriptor_distance(&short, &long), 0.0);
        assert!(descriptor_distance(&[0.0, 0.0, 0.0], &long) > 0.0);
    }

    fn wave_vs_swing_corpus(per_class: usize, frames: usize) -> Vec<MotionSequence> {
        // Index 5 is the left shoulder (children: arm, forearm, hand);
        // 13 and 17 are the upper legs.
        let mut out = Vec::new();
        for i in 0..per_class {
            let phase = i as f64 * 0.7;
            out.push(swing_sequence(&[(5, 0.8)], frames, phase, "wave"));
            out.push(swing_sequence(&[(13, 0.6), (17, 0.6)], frames, phase + 0.3, "swing"));
        }
        out
    }

    #[test]
    fn training_concentrates_weight_on_left_arm_when_only_it_differs() {
        // Classes differ only in left-shoulder motion, which displaces the
        // arm, forearm, and hand (joints 6, 7, 8).
        let mut corpus = Vec::new();
        for i in 0..4 {
            corpus.push(swing_sequence(&[(5, 0.8)], 30, i as f64 * 0.7, "wave"));
            corpus.push(swing_sequence(&[], 30, 0.0, "still"));
        }
        let model = train_stnbnn(&corpus, 10, 3).unwrap();
        let arm_mass: f64 = [6, 7, 8].iter().map(|&j| model.v()[j]).sum();
        assert!(arm_mass > 0.5, "arm mass {arm_mass}");
        let total: f64 = model.v().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(model.v().iter().all(|&x| x >= 0.0));
        let u_total: f64 = model.u().iter().sum();
        assert!((u_total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn training_spreads_weight_over_both_moving_limbs() {
        let corpus = wave_vs_swing_corpus(4, 30);
        let model = train_stnbnn(&corpus, 10, 8).unwrap();
        // Moving-position joints: arm chain below the shoulder plus both
        // leg chains below the hips.
        let moving = [6, 7, 8, 14, 15, 16, 18, 19, 20];
        let mass: f64 = moving.iter().map(|&j| model.v()[j]).sum();
        assert!(mass > 0.5, "moving-limb mass {mass}");
    }

    #[test]
    fn identical_classes_stay_near_uniform() {
        // Same sequences under both labels: nothing separates the classes,
        // so the fit must not move off the uniform initialization.
        let mut corpus = Vec::new();
        for i in 0..4 {
            corpus.push(swing_sequence(&[(5, 0.8)], 30, i as f64 * 0.9, "a"));
            corpus.push(swing_sequence(&[(5, 0.8)], 30, i as f64 * 0.9, "b"));
        }
        let model = train_stnbnn(&corpus, 10, 8).unwrap();
        let max = model.v().iter().cloned().fold(f64::MIN, f64::max);
        let min = model.v().iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "ratio {}", max / min);
    }

    #[test]
    fn training_rejects_degenerate_corpora() {
        let one_class: Vec<MotionSequence> =
            (0..3).map(|i| swing_sequence(&[(5, 0.8)], 20, i as f64, "only")).collect();
        assert!(matches!(
            train_stnbnn(&one_class, 10, 8),
            Err(Error::DegenerateCorpus(_))
        ));

        let thin = vec![
            swing_sequence(&[(5, 0.8)], 20, 0.0, "a"),
            swing_sequence(&[(5, 0.8)], 20, 1.0, "a"),
            swing_sequence(&[(13, 0.6)], 20, 0.0, "b"),
        ];
        assert!(matches!(train_stnbnn(&thin, 10, 8), Err(Error::DegenerateCorpus(_))));

        let unlabeled = vec![random_motion(6, 20), random_motion(7, 20)];
        assert!(matches!(
            train_stnbnn(&unlabeled, 10, 8),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn main_joints_follow_peaks_ties_and_bounds() {
        let probe = random_motion(8, 12);
        let joints = probe.skeleton().joint_count();

        let mut v = vec![0.01; joints];
        v[6] = 0.3;
        v[7] = 0.4;
        v[8] = 0.2;
        let peaked = StnbnnModel { t_stages: 10, j_count: 3, u: vec![0.1; 10], v, store: Vec::new() };
        assert_eq!(main_joints(&peaked, &probe).unwrap().indices(), &[6, 7, 8]);

        let uniform = StnbnnModel {
            t_stages: 10,
            j_count: 2,
            u: vec![0.1; 10],
            v: vec![1.0 / joints as f64; joints],
            store: Vec::new(),
        };
        assert_eq!(main_joints(&uniform, &probe).unwrap().indices(), &[0, 1]);

        let all = StnbnnModel {
            t_stages: 10,
            j_count: joints,
            u: vec![0.1; 10],
            v: vec![1.0 / joints as f64; joints],
            store: Vec::new(),
        };
        assert_eq!(main_joints(&all, &probe).unwrap().len(), joints);
    }

    #[test]
    fn main_joints_invariant_under_positive_rescaling() {
        let probe = random_motion(9, 12);
        let joints = probe.skeleton().joint_count();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v: Vec<f64> = (0..joints).map(|_| rng.gen_range(0.0..1.0)).collect();
        let scaled: Vec<f64> = v.iter().map(|&x| 3.0 * x).collect();
        let a = StnbnnModel { t_stages: 10, j_count: 8, u: vec![0.1; 10], v, store: Vec::new() };
        let b = StnbnnModel { t_stages: 10, j_count: 8, u: vec![0.1; 10], v: scaled, store: Vec::new() };
        assert_eq!(
            main_joints(&a, &probe).unwrap(),
            main_joints(&b, &probe).unwrap()
        );
    }

    #[test]
    fn untrained_model_refuses_queries() {
        let probe = random_motion(11, 12);
        let model = StnbnnModel::untrained(10, 8);
        assert!(matches!(main_joints(&model, &probe), Err(Error::UntrainedModel)));
    }

    #[test]
    fn record_round_trip_preserves_weights() {
        let corpus = wave_vs_swing_corpus(2, 20);
        let model = train_stnbnn(&corpus, 10, 8).unwrap();
        let rec = model.record();
        assert_eq!(rec.version, STNBNN_RECORD_VERSION);
        assert_eq!(rec.store_digest.len(), 64);
        let restored = StnbnnModel::from_record(&rec).unwrap();
        assert_eq!(restored.v(), model.v());
        assert_eq!(restored.u(), model.u());
        let probe = random_motion(12, 20);
        assert_eq!(
            main_joints(&restored, &probe).unwrap(),
            main_joints(&model, &probe).unwrap()
        );

        let mut bad = rec.clone();
        bad.version = 99;
        assert!(matches!(
            StnbnnModel::from_record(&bad),
            Err(Error::CheckpointVersion { .. })
        ));
    }

    #[test]
    fn motion_energy_fallback_picks_moving_limbs() {
        let wave = swing_sequence(&[(5, 0.8)], 30, 0.0, "wave");
        let picked = motion_energy_main_joints(&wave, 3).unwrap();
        assert_eq!(picked.indices(), &[6, 7, 8]);

        let swing = swing_sequence(&[(13, 0.6), (17, 0.6)], 30, 0.0, "swing");
        let picked = motion_energy_main_joints(&swing, 6).unwrap();
        assert_eq!(picked.indices(), &[14, 15, 16, 18, 19, 20]);

        assert!(matches!(
            motion_energy_main_joints(&wave, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            motion_energy_main_joints(&wave, 99),
            Err(Error::InvalidArgument(_))
        ));
    }
}
