//! Adversarial and conditioning losses.
//!
//! The conditioning distance φ compares hip-relative joint positions and
//! velocities over a designated main-joint set; the smoothness term applies
//! the same distance between consecutive generated frames. Scalar entry
//! points serve evaluation and tests; the `*_on_tape` builders construct the
//! identical quantities as tape nodes for training.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::ndl::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the conditioning term φ(input, generated).
    pub lambda1: f64,
    /// Weight of the within-sequence smoothness term.
    pub lambda2: f64,
    /// Added once per st_loss call so the logged value is strictly positive.
    pub epsilon: f64,
    /// Mini-batch size m.
    pub batch_size: usize,
    /// Scores are clamped to [delta, 1-delta] before any logarithm.
    pub score_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            epsilon: 1e-8,
            batch_size: 8,
            score_clamp: 1e-6,
        }
    }
}

pub fn clamp_score(s: f64, delta: f64) -> f64 {
    s.clamp(delta, 1.0 - delta)
}

/// Scores that sit outside (0,1) before clamping; surfaced in diagnostics.
pub fn out_of_range_scores(scores: &[f64]) -> usize {
    scores.iter().filter(|&&s| !(0.0..=1.0).contains(&s)).count()
}

fn validate(a: &[Vec<Vec3>], b: &[Vec<Vec3>], main: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequences have {} and {} frames",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::ShapeMismatch("empty sequences".into()));
    }
    if main.is_empty() {
        return Err(Error::InvalidArgument("main joint set is empty".into()));
    }
    let joints = a[0].len();
    if b[0].len() != joints
        || a.iter().any(|f| f.len() != joints)
        || b.iter().any(|f| f.len() != joints)
    {
        return Err(Error::ShapeMismatch("frames disagree on joint count".into()));
    }
    if let Some(&j) = main.iter().find(|&&j| j >= joints) {
        return Err(Error::InvalidArgument(format!(
            "main joint {j} out of range for {joints} joints"
        )));
    }
    Ok(())
}

fn velocity(frames: &[Vec<Vec3>], joint: usize, t: usize, fps: f64) -> Vec3 {
    if t == 0 {
        Vec3::ZERO
    } else {
        frames[t][joint].sub(frames[t - 1][joint]).scale(fps)
    }
}

/// Mean over frames and main joints of squared position distance plus
/// squared velocity distance. Velocities are in units/s; the first frame's
/// velocity is zero by definition.
pub fn phi(a: &[Vec<Vec3>], b: &[Vec<Vec3>], main: &[usize], fps: f64) -> Result<f64> {
    validate(a, b, main)?;
    let n = a.len();
    let mut acc = 0.0;
    for t in 0..n {
        for &j in main {
            let dp = a[t][j].sub(b[t][j]);
            let dv = velocity(a, j, t, fps).sub(velocity(b, j, t, fps));
            acc += dp.norm_sq() + dv.norm_sq();
        }
    }
    Ok(acc / (n * main.len()) as f64)
}

/// Mean over consecutive frame pairs (t = 2..n) and main joints of the
/// position-plus-velocity distance between frame t and frame t-1 of the same
/// sequence. A single-frame sequence has no pairs and smooths to zero.
pub fn smoothness(y: &[Vec<Vec3>], main: &[usize], fps: f64) -> Result<f64> {
    validate(y, y, main)?;
    let n = y.len();
    if n == 1 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for t in 1..n {
        for &j in main {
            let dp = y[t][j].sub(y[t - 1][j]);
            let dv = velocity(y, j, t, fps).sub(velocity(y, j, t - 1, fps));
            acc += dp.norm_sq() + dv.norm_sq();
        }
    }
    Ok(acc / ((n - 1) * main.len()) as f64)
}

/// L_ST = λ₁·φ(input, generated) + λ₂·smooth(generated) + ε.
pub fn st_loss(
    input: &[Vec<Vec3>],
    generated: &[Vec<Vec3>],
    main: &[usize],
    fps: f64,
    config: &LossConfig,
) -> Result<f64> {
    let c = config.lambda1 * phi(input, generated, main, fps)?;
    let s = config.lambda2 * smoothness(generated, main, fps)?;
    Ok(c + s + config.epsilon)
}

/// L_G = Σᵢ log(1 − D(G(zⁱ|xⁱ))) + Σᵢ L_STⁱ, scores clamped.
pub fn generator_loss(fake_scores: &[f64], st_values: &[f64], config: &LossConfig) -> f64 {
    assert_eq!(fake_scores.len(), st_values.len(), "one L_ST per batch item");
    let adv: f64 = fake_scores
        .iter()
        .map(|&s| (1.0 - clamp_score(s, config.score_clamp)).ln())
        .sum();
    adv + st_values.iter().sum::<f64>()
}

/// L_D = −Σᵢ [ real_label·log D(yⁱ|xⁱ) + log(1 − D(G(zⁱ|xⁱ))) ], scores
/// clamped; real_label < 1 implements label smoothing on the real batch.
pub fn discriminator_loss(
    real_scores: &[f64],
    fake_scores: &[f64],
    real_label: f64,
    config: &LossConfig,
) -> f64 {
    assert_eq!(real_scores.len(), fake_scores.len(), "batches must align");
    let mut acc = 0.0;
    for (&r, &f) in real_scores.iter().zip(fake_scores.iter()) {
        acc += real_label * clamp_score(r, config.score_clamp).ln()
            + (1.0 - clamp_score(f, config.score_clamp)).ln();
    }
    -acc
}

/// Per-joint position matrix (frames x 3) for feeding positions to the tape.
pub fn positions_to_tensor(frames: &[Vec<Vec3>], joint: usize) -> Tensor {
    let mut t = Tensor::zeros(frames.len(), 3);
    for (r, f) in frames.iter().enumerate() {
        let p = f[joint];
        t.row_mut(r).copy_from_slice(&[p.x, p.y, p.z]);
    }
    t
}

fn velocities_on_tape(tape: &mut Tape, p: NodeId, fps: f64) -> NodeId {
    let n = tape.value(p).rows();
    let head = tape.slice_rows(p, 1, n);
    let tail = tape.slice_rows(p, 0, n - 1);
    let d = tape.sub(head, tail);
    tape.scale(d, fps)
}

fn sum_squares(tape: &mut Tape, x: NodeId) -> NodeId {
    let sq = tape.mul(x, x);
    tape.sum(sq)
}

/// φ as a tape node. `a` and `b` hold one frames x 3 position node per main
/// joint, already restricted to the main set.
pub fn phi_on_tape(tape: &mut Tape, a: &[NodeId], b: &[NodeId], fps: f64) -> NodeId {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let n = tape.value(a[0]).rows();
    let mut acc: Option<NodeId> = None;
    for (&pa, &pb) in a.iter().zip(b.iter()) {
        let dp = tape.sub(pa, pb);
        let mut joint_sum = sum_squares(tape, dp);
        if n > 1 {
            // First-frame velocities are zero on both sides, so rows 2..n
            // carry the entire velocity distance.
            let va = velocities_on_tape(tape, pa, fps);
            let vb = velocities_on_tape(tape, pb, fps);
            let dv = tape.sub(va, vb);
            let vs = sum_squares(tape, dv);
            joint_sum = tape.add(joint_sum, vs);
        }
        acc = Some(match acc {
            None => joint_sum,
            Some(prev) => tape.add(prev, joint_sum),
        });
    }
    let total = acc.expect("nonempty main set");
    tape.scale(total, 1.0 / (n * a.len()) as f64)
}

/// Smoothness as a tape node over per-main-joint position nodes.
pub fn smoothness_on_tape(tape: &mut Tape, y: &[NodeId], fps: f64) -> NodeId {
    assert!(!y.is_empty());
    let n = tape.value(y[0]).rows();
    if n == 1 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let mut acc: Option<NodeId> = None;
    for &p in y {
        let v = velocities_on_tape(tape, p, fps);
        let dp_sum = {
            let head = tape.slice_rows(p, 1, n);
            let tail = tape.slice_rows(p, 0, n - 1);
            let dp = tape.sub(head, tail);
            sum_squares(tape, dp)
        };
        // Velocity jerk rows: v(2) - v(1) = v(2) since v(1) = 0, then
        // v(t) - v(t-1) for t >= 3.
        let dv = if n == 2 {
            v
        } else {
            let first = tape.slice_rows(v, 0, 1);
            let head = tape.slice_rows(v, 1, n - 1);
            let tail = tape.slice_rows(v, 0, n - 2);
            let rest = tape.sub(head, tail);
            tape.stack_rows(&[first, rest])
        };
        let dv_sum = sum_squares(tape, dv);
        let joint_sum = tape.add(dp_sum, dv_sum);
        acc = Some(match acc {
            None => joint_sum,
            Some(prev) => tape.add(prev, joint_sum),
        });
    }
    let total = acc.expect("nonempty main set");
    tape.scale(total, 1.0 / ((n - 1) * y.len()) as f64)
}

/// λ₁·φ + λ₂·smooth as a tape node. The ε of [`st_loss`] is a constant, so
/// it is left off the tape and added by callers when logging.
pub fn st_on_tape(
    tape: &mut Tape,
    input: &[NodeId],
    generated: &[NodeId],
    fps: f64,
    lambda1: f64,
    lambda2: f64,
) -> NodeId {
    let p = phi_on_tape(tape, input, generated, fps);
    let s = smoothness_on_tape(tape, generated, fps);
    let wp = tape.scale(p, lambda1);
    let ws = tape.scale(s, lambda2);
    tape.add(wp, ws)
}
