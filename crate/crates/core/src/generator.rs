//! Conditional motion generator: each frame's pose embedding is joined with
//! Gaussian noise, pushed through a dense layer, a recurrent stack, and an
//! output projection, and renormalized into one rotation set per frame.

use crate::codec::{PoseEmbedding, EMBED_WIDTH};
use crate::error::{Error, Result};
use crate::losses::{positions_to_tensor, st_on_tape, LossConfig};
use crate::math::{Quat, Vec3};
use crate::motion::{MotionSequence, MotionSource, Pose};
use crate::ndl::{dropout_mask, Linear, NodeId, Tape, Tensor};
use crate::skeleton::{Skeleton, CANONICAL_JOINT_COUNT};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const NOISE_WIDTH: usize = 30;
pub const INPUT_WIDTH: usize = EMBED_WIDTH + NOISE_WIDTH;
pub const OUTPUT_WIDTH: usize = 4 * CANONICAL_JOINT_COUNT;
pub const DEFAULT_HIDDEN: usize = 64;
pub const GENERATOR_DROPOUT: f64 = 0.5;

/// Number of tensors in [`GeneratorNet::parameters`].
pub const GENERATOR_PARAM_COUNT: usize = 13;

/// How one sequence's noise rows relate across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// One 30-D draw shared by every frame, keeping the intent of the motion
    /// stable over time.
    PerSequence,
    /// An independent 30-D draw per frame.
    PerFrame,
}

/// Draws a frames x 30 standard-normal noise block in the given sharing mode.
pub fn draw_noise(mode: NoiseMode, frames: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(frames * NOISE_WIDTH);
    match mode {
        NoiseMode::PerSequence => {
            let row: Vec<f64> = (0..NOISE_WIDTH).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..frames {
                data.extend_from_slice(&row);
            }
        }
        NoiseMode::PerFrame => {
            for _ in 0..frames * NOISE_WIDTH {
                data.push(rng.sample(StandardNormal));
            }
        }
    }
    Tensor::from_vec(frames, NOISE_WIDTH, data)
}

/// One recurrent cell. Gate weights are stacked along columns in the order
/// input, forget, candidate, output: `wx` is in x 4H, `wh` is H x 4H, `b` is
/// 1 x 4H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

impl LstmCell {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> LstmCell {
        LstmCell {
            wx: Tensor::randn(input, 4 * hidden, 1.0 / (input as f64).sqrt(), rng),
            wh: Tensor::randn(hidden, 4 * hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b: Tensor::zeros(1, 4 * hidden),
        }
    }

    pub fn zeroed(input: usize, hidden: usize) -> LstmCell {
        LstmCell {
            wx: Tensor::zeros(input, 4 * hidden),
            wh: Tensor::zeros(hidden, 4 * hidden),
            b: Tensor::zeros(1, 4 * hidden),
        }
    }
}

/// Tape handles for one cell's parameters.
struct LstmNodes {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    hidden: usize,
}

fn lstm_step(
    tape: &mut Tape,
    cell: &LstmNodes,
    x_t: NodeId,
    h: NodeId,
    c: NodeId,
) -> (NodeId, NodeId) {
    let xz = tape.matmul(x_t, cell.wx);
    let hz = tape.matmul(h, cell.wh);
    let pre = tape.add(xz, hz);
    let z = tape.add_row(pre, cell.b);
    let hw = cell.hidden;
    let zi = tape.slice_cols(z, 0, hw);
    let zf = tape.slice_cols(z, hw, 2 * hw);
    let zg = tape.slice_cols(z, 2 * hw, 3 * hw);
    let zo = tape.slice_cols(z, 3 * hw, 4 * hw);
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    (h_new, c_new)
}

/// Runs a cell over the rows of `xs` from zero state and stacks the hidden
/// states in frame order. `reverse` consumes the rows back to front while
/// keeping the output aligned with the input rows.
fn lstm_sequence(tape: &mut Tape, cell: &LstmNodes, xs: NodeId, reverse: bool) -> NodeId {
    let k = tape.value(xs).rows();
    let mut h = tape.constant(Tensor::zeros(1, cell.hidden));
    let mut c = tape.constant(Tensor::zeros(1, cell.hidden));
    let mut rows = Vec::with_capacity(k);
    let order: Vec<usize> = if reverse { (0..k).rev().collect() } else { (0..k).collect() };
    for t in order {
        let x_t = tape.slice_rows(xs, t, t + 1);
        let (h_next, c_next) = lstm_step(tape, cell, x_t, h, c);
        h = h_next;
        c = c_next;
        rows.push(h);
    }
    if reverse {
        rows.reverse();
    }
    tape.stack_rows(&rows)
}

/// The generator network: shared input dense 50→H, a unidirectional LSTM
/// H→H, a bidirectional pair H→2H, and an output dense 2H→84 whose input
/// features carry dropout during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    hidden: usize,
    pub input: Linear,
    pub lstm: LstmCell,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub output: Linear,
    pub dropout: f64,
}

impl GeneratorNet {
    pub fn init(hidden: usize, rng: &mut impl Rng) -> GeneratorNet {
        assert!(hidden >= 1, "hidden width must be positive");
        GeneratorNet {
            hidden,
            input: Linear::init(INPUT_WIDTH, hidden, rng),
            lstm: LstmCell::init(hidden, hidden, rng),
            fwd: LstmCell::init(hidden, hidden, rng),
            bwd: LstmCell::init(hidden, hidden, rng),
            output: Linear::init(2 * hidden, OUTPUT_WIDTH, rng),
            dropout: GENERATOR_DROPOUT,
        }
    }

    pub fn zeroed(hidden: usize) -> GeneratorNet {
        assert!(hidden >= 1, "hidden width must be positive");
        GeneratorNet {
            hidden,
            input: Linear::zeroed(INPUT_WIDTH, hidden),
            lstm: LstmCell::zeroed(hidden, hidden),
            fwd: LstmCell::zeroed(hidden, hidden),
            bwd: LstmCell::zeroed(hidden, hidden),
            output: Linear::zeroed(2 * hidden, OUTPUT_WIDTH),
            dropout: GENERATOR_DROPOUT,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Parameter tensors in a fixed order shared with
    /// [`GeneratorNet::parameters_mut`] and [`forward_on_tape`] leaves.
    pub fn parameters(&self) -> Vec<&Tensor> {
        vec![
            &self.input.w,
            &self.input.b,
            &self.lstm.wx,
            &self.lstm.wh,
            &self.lstm.b,
            &self.fwd.wx,
            &self.fwd.wh,
            &self.fwd.b,
            &self.bwd.wx,
            &self.bwd.wh,
            &self.bwd.b,
            &self.output.w,
            &self.output.b,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.input.w,
            &mut self.input.b,
            &mut self.lstm.wx,
            &mut self.lstm.wh,
            &mut self.lstm.b,
            &mut self.fwd.wx,
            &mut self.fwd.wh,
            &mut self.fwd.b,
            &mut self.bwd.wx,
            &mut self.bwd.wh,
            &mut self.bwd.b,
            &mut self.output.w,
            &mut self.output.b,
        ]
    }

    /// Rebuilds a net from tensors laid out as [`GeneratorNet::parameters`].
    pub fn from_parameters(hidden: usize, dropout: f64, params: &[Tensor]) -> Result<GeneratorNet> {
        if params.len() != GENERATOR_PARAM_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors for a generator, expected {GENERATOR_PARAM_COUNT}",
                params.len()
            )));
        }
        let net = GeneratorNet {
            hidden,
            input: Linear { w: params[0].clone(), b: params[1].clone() },
            lstm: LstmCell {
                wx: params[2].clone(),
                wh: params[3].clone(),
                b: params[4].clone(),
            },
            fwd: LstmCell {
                wx: params[5].clone(),
                wh: params[6].clone(),
                b: params[7].clone(),
            },
            bwd: LstmCell {
                wx: params[8].clone(),
                wh: params[9].clone(),
                b: params[10].clone(),
            },
            output: Linear { w: params[11].clone(), b: params[12].clone() },
            dropout,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden;
        if h == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        let cell_shapes = |cell: &LstmCell, input: usize, name: &str| -> Result<()> {
            let want = [
                (cell.wx.shape(), (input, 4 * h)),
                (cell.wh.shape(), (h, 4 * h)),
                (cell.b.shape(), (1, 4 * h)),
            ];
            for (got, expect) in want {
                if got != expect {
                    return Err(Error::ShapeMismatch(format!(
                        "{name} cell tensor is {got:?}, expected {expect:?}"
                    )));
                }
            }
            Ok(())
        };
        if self.input.w.shape() != (INPUT_WIDTH, h) || self.input.b.shape() != (1, h) {
            return Err(Error::ShapeMismatch("input dense shape".into()));
        }
        cell_shapes(&self.lstm, h, "lstm")?;
        cell_shapes(&self.fwd, h, "forward")?;
        cell_shapes(&self.bwd, h, "backward")?;
        if self.output.w.shape() != (2 * h, OUTPUT_WIDTH) || self.output.b.shape() != (1, OUTPUT_WIDTH) {
            return Err(Error::ShapeMismatch("output dense shape".into()));
        }
        if self.parameters().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("generator parameters".into()));
        }
        Ok(())
    }
}

/// Handles the caller needs to keep differentiating past the forward pass.
#[derive(Debug)]
pub struct GeneratorForward {
    /// Parameter leaves in [`GeneratorNet::parameters`] order; constants when
    /// the pass was built with `trainable` off.
    pub params: Vec<NodeId>,
    /// frames x 84 output before per-joint renormalization.
    pub raw: NodeId,
    /// One frames x 4 node of unit rows per joint. Signs are left as
    /// produced; canonicalization happens only at the [`Pose`] boundary.
    pub quats: Vec<NodeId>,
}

/// Builds the generator forward pass on a tape. `condition` is frames x 20,
/// `noise` frames x 30, `mask` an optional frames x 2H inverted-scaling
/// dropout mask applied to the output dense layer's input features.
pub fn forward_on_tape(
    tape: &mut Tape,
    net: &GeneratorNet,
    condition: &Tensor,
    noise: &Tensor,
    mask: Option<&Tensor>,
    trainable: bool,
) -> Result<GeneratorForward> {
    net.validate()?;
    let k = condition.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("condition must cover at least one frame".into()));
    }
    if condition.cols() != EMBED_WIDTH {
        return Err(Error::ShapeMismatch(format!(
            "condition is {} wide, expected {EMBED_WIDTH}",
            condition.cols()
        )));
    }
    if !condition.is_finite() {
        return Err(Error::NonFinite("condition embeddings".into()));
    }
    if noise.shape() != (k, NOISE_WIDTH) {
        return Err(Error::ShapeMismatch(format!(
            "noise is {:?}, expected ({k}, {NOISE_WIDTH})",
            noise.shape()
        )));
    }
    if !noise.is_finite() {
        return Err(Error::NonFinite("noise draw".into()));
    }
    if let Some(m) = mask {
        if m.shape() != (k, 2 * net.hidden) {
            return Err(Error::ShapeMismatch(format!(
                "dropout mask is {:?}, expected ({k}, {})",
                m.shape(),
                2 * net.hidden
            )));
        }
    }

    let mut params = Vec::with_capacity(GENERATOR_PARAM_COUNT);
    for t in net.parameters() {
        let id = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        params.push(id);
    }
    let lstm = LstmNodes { wx: params[2], wh: params[3], b: params[4], hidden: net.hidden };
    let fwd = LstmNodes { wx: params[5], wh: params[6], b: params[7], hidden: net.hidden };
    let bwd = LstmNodes { wx: params[8], wh: params[9], b: params[10], hidden: net.hidden };

    let cond = tape.constant(condition.clone());
    let z = tape.constant(noise.clone());
    let x = tape.concat_cols(cond, z);
    let xi = tape.matmul(x, params[0]);
    let dense_in = tape.add_row(xi, params[1]);
    let seq = lstm_sequence(tape, &lstm, dense_in, false);
    let ahead = lstm_sequence(tape, &fwd, seq, false);
    let behind = lstm_sequence(tape, &bwd, seq, true);
    let mut features = tape.concat_cols(ahead, behind);
    if let Some(m) = mask {
        let mnode = tape.constant(m.clone());
        features = tape.mul(features, mnode);
    }
    let xo = tape.matmul(features, params[11]);
    let raw = tape.add_row(xo, params[12]);
    let mut quats = Vec::with_capacity(CANONICAL_JOINT_COUNT);
    for j in 0..CANONICAL_JOINT_COUNT {
        let cols = tape.slice_cols(raw, 4 * j, 4 * j + 4);
        quats.push(tape.quat_normalize_rows(cols));
    }
    Ok(GeneratorForward { params, raw, quats })
}

/// Hip-relative joint positions for every frame: one frames x 3 node per
/// joint, composed from per-joint frames x 4 unit-quaternion rows.
pub fn fk_positions_on_tape(
    tape: &mut Tape,
    skeleton: &Skeleton,
    quats: &[NodeId],
) -> Vec<NodeId> {
    assert_eq!(quats.len(), skeleton.joint_count(), "one rotation node per joint");
    let k = tape.value(quats[0]).rows();
    let mut global: Vec<NodeId> = Vec::with_capacity(quats.len());
    let mut positions: Vec<NodeId> = Vec::with_capacity(quats.len());
    for (j, joint) in skeleton.joints().iter().enumerate() {
        match joint.parent {
            None => {
                global.push(quats[j]);
                positions.push(tape.constant(Tensor::zeros(k, 3)));
            }
            Some(p) => {
                let g = tape.quat_mul_rows(global[p], quats[j]);
                global.push(g);
                let off = joint.offset;
                let step = tape.quat_rotate_rows(global[p], [off.x, off.y, off.z]);
                positions.push(tape.add(positions[p], step));
            }
        }
    }
    positions
}

/// Runs the generator in inference (or, with `dropout_rng`, training) mode
/// and reshapes the output into a hip-anchored motion sequence.
pub fn generate(
    net: &GeneratorNet,
    condition: &[PoseEmbedding],
    noise: &Tensor,
    fps: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<MotionSequence> {
    if condition.is_empty() {
        return Err(Error::InvalidArgument("condition must cover at least one frame".into()));
    }
    let k = condition.len();
    let mut data = Vec::with_capacity(k * EMBED_WIDTH);
    for e in condition {
        data.extend_from_slice(e.values());
    }
    let cond = Tensor::from_vec(k, EMBED_WIDTH, data);
    let mask = dropout_rng.map(|rng| dropout_mask(k, 2 * net.hidden, net.dropout, rng));
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, net, &cond, noise, mask.as_ref(), false)?;
    let mut frames = Vec::with_capacity(k);
    for t in 0..k {
        let mut rotations = Vec::with_capacity(CANONICAL_JOINT_COUNT);
        for &q in &fwd.quats {
            let row = tape.value(q).row(t);
            rotations.push(Quat::new(row[0], row[1], row[2], row[3]).normalized());
        }
        frames.push(Pose::new(rotations));
    }
    Ok(MotionSequence::new(Skeleton::canonical(), frames, vec![Vec3::ZERO; k], fps)?
        .with_source(MotionSource::Generated))
}

/// One generator step's losses, adjoints, and the sampled clip.
pub struct GeneratorStep {
    /// φ(input, generated) over the main joints, unweighted.
    pub phi: f64,
    /// The clip the step sampled, bound to the skeleton it was scored on.
    pub generated: MotionSequence,
    /// Adversarial term plus the conditioning loss (including its ε).
    pub loss: f64,
    /// log(1 − clamp(score)).
    pub adversarial: f64,
    /// λ₁·φ + λ₂·smooth + ε.
    pub st: f64,
    /// The score head's output for the generated sequence.
    pub score: f64,
    /// One gradient tensor per entry of [`GeneratorNet::parameters`].
    pub gradients: Vec<Tensor>,
}

/// Builds the full differentiable path — generator forward, forward
/// kinematics, conditioning loss, and the caller-supplied score head — and
/// returns gradients of the generator objective for every parameter.
///
/// `score_path` receives the tape and one frames x 3 position node per joint
/// and must return a scalar score node in (0, 1) built from tape operations;
/// gradients flow through it into the generator.
#[allow(clippy::too_many_arguments)]
pub fn generator_forward_backward(
    net: &GeneratorNet,
    skeleton: &Skeleton,
    condition: &Tensor,
    noise: &Tensor,
    input_positions: &[Vec<Vec3>],
    main: &[usize],
    fps: f64,
    mask: Option<&Tensor>,
    config: &LossConfig,
    score_path: impl FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<GeneratorStep> {
    if skeleton.joint_count() != CANONICAL_JOINT_COUNT {
        return Err(Error::SkeletonMismatch(format!(
            "generator emits {CANONICAL_JOINT_COUNT} joints, skeleton has {}",
            skeleton.joint_count()
        )));
    }
    if main.is_empty() {
        return Err(Error::InvalidArgument("main joint set is empty".into()));
    }
    if let Some(&bad) = main.iter().find(|&&j| j >= skeleton.joint_count()) {
        return Err(Error::InvalidArgument(format!("main joint {bad} out of range")));
    }
    if input_positions.len() != condition.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} conditioning frames for {} condition rows",
            input_positions.len(),
            condition.rows()
        )));
    }
    if let Some(f) = input_positions.iter().find(|f| f.len() != skeleton.joint_count()) {
        return Err(Error::ShapeMismatch(format!(
            "conditioning frame has {} joints, expected {}",
            f.len(),
            skeleton.joint_count()
        )));
    }

    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, net, condition, noise, mask, true)?;
    let positions = fk_positions_on_tape(&mut tape, skeleton, &fwd.quats);
    let gen_main: Vec<NodeId> = main.iter().map(|&j| positions[j]).collect();
    let mut in_main = Vec::with_capacity(main.len());
    for &j in main {
        let t = positions_to_tensor(input_positions, j);
        in_main.push(tape.constant(t));
    }
    let st_node = st_on_tape(&mut tape, &in_main, &gen_main, fps, config.lambda1, config.lambda2);
    let score_node = score_path(&mut tape, &positions)?;
    if tape.value(score_node).shape() != (1, 1) {
        return Err(Error::ShapeMismatch("score path must produce a scalar node".into()));
    }
    let one_minus = tape.affine(score_node, -1.0, 1.0);
    let delta = config.score_clamp;
    let adv = tape.ln_clamped(one_minus, delta, 1.0 - delta);
    let total = tape.add(adv, st_node);
    let grads = tape.backward(total);
    let gradients = fwd.params.iter().map(|&p| grads.get_or_zeros(&tape, p)).collect();
    let adversarial = tape.value(adv).get(0, 0);
    let st = tape.value(st_node).get(0, 0) + config.epsilon;
    let score = tape.value(score_node).get(0, 0);

    let k = condition.rows();
    let mut gen_positions: Vec<Vec<Vec3>> = vec![Vec::with_capacity(positions.len()); k];
    for &p in &positions {
        let v = tape.value(p);
        for (t, frame) in gen_positions.iter_mut().enumerate() {
            let row = v.row(t);
            frame.push(Vec3::new(row[0], row[1], row[2]));
        }
    }
    let phi = crate::losses::phi(input_positions, &gen_positions, main, fps)?;
    let mut frames = Vec::with_capacity(k);
    for t in 0..k {
        let mut rotations = Vec::with_capacity(fwd.quats.len());
        for &q in &fwd.quats {
            let row = tape.value(q).row(t);
            rotations.push(Quat::new(row[0], row[1], row[2], row[3]).normalized());
        }
        frames.push(Pose::new(rotations));
    }
    let generated = MotionSequence::new(skeleton.clone(), frames, vec![Vec3::ZERO; k], fps)?
        .with_source(MotionSource::Generated);

    Ok(GeneratorStep { phi, generated, loss: adversarial + st, adversarial, st, score, gradients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::smoothness;
    use crate::ndl::gradient_check;
    use rand::SeedableRng;

    fn random_embeddings(seed: u64, k: usize) -> Vec<PoseEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let values = (0..EMBED_WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect();
                PoseEmbedding::new(values).unwrap()
            })
            .collect()
    }

    fn embeddings_tensor(embeddings: &[PoseEmbedding]) -> Tensor {
        let mut data = Vec::with_capacity(embeddings.len() * EMBED_WIDTH);
        for e in embeddings {
            data.extend_from_slice(e.values());
        }
        Tensor::from_vec(embeddings.len(), EMBED_WIDTH, data)
    }

    fn random_sequence(seed: u64, frames: usize) -> MotionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            let rotations = (0..CANONICAL_JOINT_COUNT)
                .map(|_| {
                    let axis = Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    Quat::from_axis_angle(axis, rng.gen_range(-0.6..0.6))
                })
                .collect();
            poses.push(Pose::new(rotations));
        }
        MotionSequence::new(
            Skeleton::canonical(),
            poses,
            vec![Vec3::ZERO; frames],
            5.0,
        )
        .unwrap()
    }

    /// Canonical topology with offsets scaled to unit magnitude so losses in
    /// finite-difference tests stay small enough for clean central
    /// differences.
    fn unit_scale_skeleton() -> Skeleton {
        let mut joints = Skeleton::canonical().joints().to_vec();
        for j in &mut joints {
            j.offset = j.offset.scale(0.02);
            if let Some(e) = j.end_site {
                j.end_site = Some(e.scale(0.02));
            }
        }
        Skeleton::new(joints).unwrap()
    }

    fn flat_score(tape: &mut Tape, _positions: &[NodeId]) -> Result<NodeId> {
        Ok(tape.constant(Tensor::scalar(0.5)))
    }

    #[test]
    fn zeroed_net_emits_identity_rotations() {
        let net = GeneratorNet::zeroed(6);
        let condition = random_embeddings(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = draw_noise(NoiseMode::PerSequence, 3, &mut rng);
        let seq = generate(&net, &condition, &noise, 5.0, None).unwrap();
        assert_eq!(seq.frame_count(), 3);
        assert_eq!(seq.source, MotionSource::Generated);
        for frame in seq.frames() {
            for q in frame.rotations() {
                assert_eq!(*q, Quat::IDENTITY);
            }
        }
        for p in seq.root_positions() {
            assert_eq!(*p, Vec3::ZERO);
        }
    }

    #[test]
    fn lstm_step_matches_hand_computed_gates() {
        let cell = LstmCell {
            wx: Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.5, 0.4]),
            wh: Tensor::from_vec(1, 4, vec![0.2, 0.1, -0.3, 0.25]),
            b: Tensor::from_vec(1, 4, vec![0.1, 0.2, -0.1, 0.05]),
        };
        let mut tape = Tape::new();
        let wx = tape.constant(cell.wx.clone());
        let wh = tape.constant(cell.wh.clone());
        let b = tape.constant(cell.b.clone());
        let nodes = LstmNodes { wx, wh, b, hidden: 1 };
        let xs = tape.constant(Tensor::from_vec(2, 1, vec![1.0, -0.5]));
        let out = lstm_sequence(&mut tape, &nodes, xs, false);
        let got = tape.value(out);
        // Gates by hand for x₁=1: i=σ(0.4), f=σ(0), g=tanh(0.4), o=σ(0.45),
        // then the recurrence with x₂=-0.5 carries h₁ and c₁ forward.
        assert!((got.get(0, 0) - 0.13655539301969449).abs() < 1e-15, "h1 {}", got.get(0, 0));
        assert!((got.get(1, 0) - -0.02473562304822223).abs() < 1e-15, "h2 {}", got.get(1, 0));
    }

    #[test]
    fn backward_pass_mirrors_forward_on_reversed_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = LstmCell::init(3, 3, &mut rng);
        let xs = Tensor::randn(5, 3, 1.0, &mut rng);
        let mut reversed_rows = Vec::new();
        for r in (0..5).rev() {
            reversed_rows.push(xs.row(r).to_vec());
        }
        let reversed = Tensor::from_nested(&reversed_rows);

        let run = |input: &Tensor, reverse: bool| -> Tensor {
            let mut tape = Tape::new();
            let wx = tape.constant(cell.wx.clone());
            let wh = tape.constant(cell.wh.clone());
            let b = tape.constant(cell.b.clone());
            let nodes = LstmNodes { wx, wh, b, hidden: 3 };
            let xs = tape.constant(input.clone());
            let out = lstm_sequence(&mut tape, &nodes, xs, reverse);
            tape.value(out).clone()
        };

        let backward = run(&xs, true);
        let forward_on_reversed = run(&reversed, false);
        for t in 0..5 {
            assert_eq!(backward.row(t), forward_on_reversed.row(4 - t));
        }
    }

    #[test]
    fn same_seed_reproduces_and_new_seed_diversifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = GeneratorNet::init(8, &mut rng);
        let condition = random_embeddings(4, 4);
        let noise_a = draw_noise(NoiseMode::PerSequence, 4, &mut ChaCha8Rng::seed_from_u64(7));
        let noise_b = draw_noise(NoiseMode::PerSequence, 4, &mut ChaCha8Rng::seed_from_u64(7));
        let noise_c = draw_noise(NoiseMode::PerSequence, 4, &mut ChaCha8Rng::seed_from_u64(8));

        let a = generate(&net, &condition, &noise_a, 5.0, None).unwrap();
        let b = generate(&net, &condition, &noise_b, 5.0, None).unwrap();
        assert_eq!(a.frames(), b.frames(), "same seed must reproduce exactly");

        let c = generate(&net, &condition, &noise_c, 5.0, None).unwrap();
        let diverged = a.frames().iter().zip(c.frames()).any(|(fa, fc)| {
            fa.rotations()
                .iter()
                .zip(fc.rotations())
                .any(|(qa, qc)| qa.geodesic(*qc) > 0.0)
        });
        assert!(diverged, "a fresh noise seed must move at least one joint");
    }

    #[test]
    fn per_sequence_noise_repeats_one_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shared = draw_noise(NoiseMode::PerSequence, 5, &mut rng);
        for r in 1..5 {
            assert_eq!(shared.row(r), shared.row(0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fresh = draw_noise(NoiseMode::PerFrame, 5, &mut rng);
        assert_ne!(fresh.row(0), fresh.row(1));
    }

    #[test]
    fn three_hundred_frame_condition_yields_three_hundred_frames() {
        let net = GeneratorNet::zeroed(4);
        let condition = random_embeddings(6, 300);
        let noise = draw_noise(
            NoiseMode::PerSequence,
            300,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let seq = generate(&net, &condition, &noise, 5.0, None).unwrap();
        assert_eq!(seq.frame_count(), 300);
    }

    #[test]
    fn empty_condition_and_bad_shapes_are_rejected() {
        let net = GeneratorNet::zeroed(4);
        let noise = draw_noise(NoiseMode::PerSequence, 1, &mut ChaCha8Rng::seed_from_u64(1));

        let err = generate(&net, &[], &noise, 5.0, None).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err:?}");

        let mut tape = Tape::new();
        let mut bad = Tensor::zeros(1, EMBED_WIDTH);
        bad.set(0, 3, f64::NAN);
        let err = forward_on_tape(&mut tape, &net, &bad, &noise, None, false).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err:?}");

        let cond = Tensor::zeros(1, EMBED_WIDTH);
        let err = forward_on_tape(&mut tape, &net, &cond, &Tensor::zeros(1, 7), None, false)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err:?}");
        let err = forward_on_tape(&mut tape, &net, &cond, &Tensor::zeros(2, NOISE_WIDTH), None, false)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err:?}");
        let mask = Tensor::zeros(1, 3);
        let err = forward_on_tape(&mut tape, &net, &cond, &noise, Some(&mask), false).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err:?}");
    }

    #[test]
    fn dropout_only_active_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = GeneratorNet::init(6, &mut rng);
        let condition = random_embeddings(12, 3);
        let noise = draw_noise(NoiseMode::PerSequence, 3, &mut ChaCha8Rng::seed_from_u64(2));

        let pure_a = generate(&net, &condition, &noise, 5.0, None).unwrap();
        let pure_b = generate(&net, &condition, &noise, 5.0, None).unwrap();
        assert_eq!(pure_a.frames(), pure_b.frames(), "inference must be pure");

        let mut mask_rng = ChaCha8Rng::seed_from_u64(4);
        let trained = generate(&net, &condition, &noise, 5.0, Some(&mut mask_rng)).unwrap();
        let moved = pure_a.frames().iter().zip(trained.frames()).any(|(fa, ft)| {
            fa.rotations()
                .iter()
                .zip(ft.rotations())
                .any(|(qa, qt)| qa.geodesic(*qt) > 0.0)
        });
        assert!(moved, "an active dropout mask must perturb the output");
    }

    #[test]
    fn tape_fk_matches_sequence_kinematics() {
        let seq = random_sequence(11, 3);
        let mut tape = Tape::new();
        let mut quats = Vec::new();
        for j in 0..CANONICAL_JOINT_COUNT {
            let mut data = Vec::with_capacity(3 * 4);
            for frame in seq.frames() {
                let q = frame.rotation(j);
                data.extend_from_slice(&[q.w, q.x, q.y, q.z]);
            }
            quats.push(tape.constant(Tensor::from_vec(3, 4, data)));
        }
        let positions = fk_positions_on_tape(&mut tape, seq.skeleton(), &quats);
        for t in 0..3 {
            let want = seq.joint_positions(t);
            for j in 0..CANONICAL_JOINT_COUNT {
                let got = tape.value(positions[j]).row(t);
                assert!(
                    (got[0] - want[j].x).abs() < 1e-12
                        && (got[1] - want[j].y).abs() < 1e-12
                        && (got[2] - want[j].z).abs() < 1e-12,
                    "joint {j} frame {t}: {got:?} vs {want:?}",
                );
            }
        }
    }

    #[test]
    fn end_to_end_gradients_pass_fd_check() {
        let skeleton = unit_scale_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = GeneratorNet::init(4, &mut rng);
        let condition = Tensor::randn(2, EMBED_WIDTH, 0.5, &mut rng);
        let noise = draw_noise(NoiseMode::PerFrame, 2, &mut rng);
        let reference = random_sequence(19, 2);
        let input_positions: Vec<Vec<Vec3>> = reference
            .all_joint_positions()
            .iter()
            .map(|frame| frame.iter().map(|p| p.scale(0.02)).collect())
            .collect();
        let main = vec![5, 6, 18];
        let config = LossConfig::default();

        let score_weights = Tensor::filled(2, 3, 0.13);
        let score = |tape: &mut Tape, positions: &[NodeId]| -> Result<NodeId> {
            let w = tape.constant(score_weights.clone());
            let prod = tape.mul(positions[6], w);
            let m = tape.mean_all(prod);
            Ok(tape.sigmoid(m))
        };

        let step = generator_forward_backward(
            &net,
            &skeleton,
            &condition,
            &noise,
            &input_positions,
            &main,
            5.0,
            None,
            &config,
            score,
        )
        .unwrap();
        assert_eq!(step.gradients.len(), GENERATOR_PARAM_COUNT);

        let mut params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
        let worst = gradient_check(&mut params, &step.gradients, 1e-5, |ps| {
            let net = GeneratorNet::from_parameters(4, GENERATOR_DROPOUT, ps).unwrap();
            generator_forward_backward(
                &net,
                &skeleton,
                &condition,
                &noise,
                &input_positions,
                &main,
                5.0,
                None,
                &config,
                |tape, positions| {
                    let w = tape.constant(score_weights.clone());
                    let prod = tape.mul(positions[6], w);
                    let m = tape.mean_all(prod);
                    Ok(tape.sigmoid(m))
                },
            )
            .unwrap()
            .loss
        });
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn flat_discriminator_and_zero_lambdas_give_zero_gradients() {
        let skeleton = Skeleton::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = GeneratorNet::init(3, &mut rng);
        let condition = Tensor::randn(2, EMBED_WIDTH, 0.5, &mut rng);
        let noise = draw_noise(NoiseMode::PerSequence, 2, &mut rng);
        let input_positions = random_sequence(29, 2).all_joint_positions();
        let config = LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() };

        let step = generator_forward_backward(
            &net,
            &skeleton,
            &condition,
            &noise,
            &input_positions,
            &[5, 6],
            5.0,
            None,
            &config,
            flat_score,
        )
        .unwrap();
        assert!((step.adversarial - 0.5f64.ln()).abs() < 1e-15);
        for g in &step.gradients {
            assert_eq!(g.max_abs(), 0.0, "flat score and zero weights leave no gradient");
        }

        let mut params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
        let worst = gradient_check(&mut params, &step.gradients, 1e-5, |ps| {
            let net = GeneratorNet::from_parameters(3, GENERATOR_DROPOUT, ps).unwrap();
            generator_forward_backward(
                &net,
                &skeleton,
                &condition,
                &noise,
                &input_positions,
                &[5, 6],
                5.0,
                None,
                &config,
                flat_score,
            )
            .unwrap()
            .loss
        });
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn smoothness_objective_descends_on_static_condition() {
        let skeleton = Skeleton::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = GeneratorNet::init(8, &mut rng);
        let k = 6;
        let row: Vec<f64> = (0..EMBED_WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let embedding = PoseEmbedding::new(row).unwrap();
        let condition_seq = vec![embedding; k];
        let condition = embeddings_tensor(&condition_seq);
        let noise = draw_noise(NoiseMode::PerSequence, k, &mut rng);
        let static_frame = random_sequence(31, 1).all_joint_positions().remove(0);
        let input_positions = vec![static_frame; k];
        let main = vec![2, 5, 6, 7, 14, 18];
        let config = LossConfig { lambda1: 0.0, lambda2: 1.0, ..LossConfig::default() };

        let measure = |net: &GeneratorNet| -> f64 {
            let seq = generate(net, &condition_seq, &noise, 5.0, None).unwrap();
            let positions = seq.all_joint_positions();
            smoothness(&positions, &main, 5.0).unwrap()
        };

        let before = measure(&net);
        let lr = 1e-4;
        for _ in 0..50 {
            let step = generator_forward_backward(
                &net,
                &skeleton,
                &condition,
                &noise,
                &input_positions,
                &main,
                5.0,
                None,
                &config,
                flat_score,
            )
            .unwrap();
            for (p, g) in net.parameters_mut().into_iter().zip(&step.gradients) {
                p.acc_scaled(g, -lr);
            }
        }
        let after = measure(&net);
        assert!(
            after < before,
            "smoothness must descend: before {before:e}, after {after:e}"
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let skeleton = Skeleton::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut net = GeneratorNet::init(4, &mut rng);
        let before = net.clone();
        let condition = Tensor::randn(3, EMBED_WIDTH, 0.5, &mut rng);
        let noise = draw_noise(NoiseMode::PerFrame, 3, &mut rng);
        let input_positions = random_sequence(41, 3).all_joint_positions();

        let step = generator_forward_backward(
            &net,
            &skeleton,
            &condition,
            &noise,
            &input_positions,
            &[5, 6, 7],
            5.0,
            None,
            &LossConfig::default(),
            flat_score,
        )
        .unwrap();
        let lr = 0.0;
        for (p, g) in net.parameters_mut().into_iter().zip(&step.gradients) {
            p.acc_scaled(g, -lr);
        }
        assert_eq!(net, before);
    }

    #[test]
    fn serialized_net_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let net = GeneratorNet::init(4, &mut rng);
        let json = serde_json::to_string(&net).unwrap();
        let back: GeneratorNet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
    }
}
