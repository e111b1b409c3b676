//! Conditional sequence discriminator: a spatiotemporal graph over
//! (joint, frame) nodes, nine graph-convolution layers with residual paths
//! and temporal pooling, global pooling fused with the mean condition
//! embedding, and a two-layer sigmoid head.

use crate::codec::{PoseEmbedding, EMBED_WIDTH, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::math::Vec3;
use crate::ndl::{Linear, NodeId, Sparse, Tape, Tensor};
use crate::skeleton::Skeleton;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

pub const INPUT_CHANNELS: usize = 3;
pub const CONV_WIDTHS: [usize; 9] = [16, 16, 16, 32, 32, 32, 64, 64, 64];
pub const HEAD_HIDDEN: usize = 32;
pub const MIN_DISCRIMINATOR_FRAMES: usize = 4;
pub const DISCRIMINATOR_DROPOUT: f64 = 0.5;

/// Position features arrive in the rig's centimeter units, where limb
/// offsets reach ±100. Fed raw into unit-variance conv weights they
/// saturate the sigmoid head at init, and a saturated score sits in the
/// clamp's zero-gradient zone, freezing the net. Scoring therefore works
/// on meter-scale features.
pub const FEATURE_SCALE: f64 = 0.01;

/// Node indexing is joint-major: node (j, t) sits at row j·k + t, so one
/// joint's whole track occupies a contiguous row block.
fn node_index(joint: usize, frame: usize, frames: usize) -> usize {
    joint * frames + frame
}

/// The spatiotemporal graph for k frames of a skeleton: per-frame intra-body
/// edges along parent links, same-joint edges between adjacent frames, and
/// the symmetric normalization D^{-1/2}(A+I)D^{-1/2}.
#[derive(Debug, Clone)]
pub struct StGraph {
    frames: usize,
    joints: usize,
    norm: Rc<Sparse>,
    intra: Vec<(usize, usize)>,
    inter: Vec<(usize, usize)>,
}

impl StGraph {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn node_count(&self) -> usize {
        self.frames * self.joints
    }

    /// The normalized adjacency, shared into tape operations.
    pub fn normalized(&self) -> Rc<Sparse> {
        Rc::clone(&self.norm)
    }

    /// Undirected intra-body edges as (lower node, higher node) pairs.
    pub fn intra_edges(&self) -> &[(usize, usize)] {
        &self.intra
    }

    /// Undirected inter-frame edges as (lower node, higher node) pairs.
    pub fn inter_edges(&self) -> &[(usize, usize)] {
        &self.inter
    }
}

/// Builds the k-frame spatiotemporal graph for a skeleton.
pub fn build_st_graph(skeleton: &Skeleton, frames: usize) -> Result<StGraph> {
    if frames == 0 {
        return Err(Error::InvalidArgument("graph needs at least one frame".into()));
    }
    let joints = skeleton.joint_count();
    let n = joints * frames;
    let mut intra = Vec::with_capacity((joints - 1) * frames);
    for (j, joint) in skeleton.joints().iter().enumerate() {
        if let Some(p) = joint.parent {
            for t in 0..frames {
                let a = node_index(p, t, frames);
                let b = node_index(j, t, frames);
                intra.push((a.min(b), a.max(b)));
            }
        }
    }
    let mut inter = Vec::with_capacity(joints * frames.saturating_sub(1));
    for j in 0..joints {
        for t in 0..frames - 1 {
            inter.push((node_index(j, t, frames), node_index(j, t + 1, frames)));
        }
    }

    let mut degree = vec![1.0f64; n];
    for &(a, b) in intra.iter().chain(&inter) {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let mut entries = Vec::with_capacity(n + 2 * (intra.len() + inter.len()));
    for (i, d) in degree.iter().enumerate() {
        entries.push((i, i, 1.0 / d));
    }
    for &(a, b) in intra.iter().chain(&inter) {
        let w = 1.0 / (degree[a] * degree[b]).sqrt();
        entries.push((a, b, w));
        entries.push((b, a, w));
    }
    Ok(StGraph {
        frames,
        joints,
        norm: Rc::new(Sparse::from_entries(n, n, entries)),
        intra,
        inter,
    })
}

/// Stride-2 temporal mean pooling as a sparse matrix mapping k frames to
/// ⌈k/2⌉ per joint; an odd final frame is carried through unaveraged.
fn temporal_pool_matrix(joints: usize, from: usize) -> Rc<Sparse> {
    let to = from.div_ceil(2);
    let mut entries = Vec::with_capacity(joints * from);
    for j in 0..joints {
        for t in 0..to {
            let row = node_index(j, t, to);
            let a = 2 * t;
            let b = 2 * t + 1;
            if b < from {
                entries.push((row, node_index(j, a, from), 0.5));
                entries.push((row, node_index(j, b, from), 0.5));
            } else {
                entries.push((row, node_index(j, a, from), 1.0));
            }
        }
    }
    Rc::new(Sparse::from_entries(joints * to, joints * from, entries))
}

/// One graph-convolution layer: y = dropout(leaky(Â·x·w + b) + skip), where
/// the skip is the input itself for equal widths and a learned projection
/// `proj` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub proj: Option<Tensor>,
}

impl ConvLayer {
    fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> ConvLayer {
        let std = 1.0 / (c_in as f64).sqrt();
        ConvLayer {
            w: Tensor::randn(c_in, c_out, std, rng),
            b: Tensor::zeros(1, c_out),
            proj: (c_in != c_out).then(|| Tensor::randn(c_in, c_out, std, rng)),
        }
    }

    fn zeroed(c_in: usize, c_out: usize) -> ConvLayer {
        ConvLayer {
            w: Tensor::zeros(c_in, c_out),
            b: Tensor::zeros(1, c_out),
            proj: (c_in != c_out).then(|| Tensor::zeros(c_in, c_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorNet {
    pub convs: Vec<ConvLayer>,
    pub head1: Linear,
    pub head2: Linear,
    pub dropout: f64,
}

impl DiscriminatorNet {
    pub fn init(rng: &mut impl Rng) -> DiscriminatorNet {
        let mut convs = Vec::with_capacity(CONV_WIDTHS.len());
        let mut c_in = INPUT_CHANNELS;
        for c_out in CONV_WIDTHS {
            convs.push(ConvLayer::init(c_in, c_out, rng));
            c_in = c_out;
        }
        DiscriminatorNet {
            convs,
            head1: Linear::init(CONV_WIDTHS[8] + EMBED_WIDTH, HEAD_HIDDEN, rng),
            head2: Linear::init(HEAD_HIDDEN, 1, rng),
            dropout: DISCRIMINATOR_DROPOUT,
        }
    }

    pub fn zeroed() -> DiscriminatorNet {
        let mut convs = Vec::with_capacity(CONV_WIDTHS.len());
        let mut c_in = INPUT_CHANNELS;
        for c_out in CONV_WIDTHS {
            convs.push(ConvLayer::zeroed(c_in, c_out));
            c_in = c_out;
        }
        DiscriminatorNet {
            convs,
            head1: Linear::zeroed(CONV_WIDTHS[8] + EMBED_WIDTH, HEAD_HIDDEN),
            head2: Linear::zeroed(HEAD_HIDDEN, 1),
            dropout: DISCRIMINATOR_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.len() != CONV_WIDTHS.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} conv layers, expected {}",
                self.convs.len(),
                CONV_WIDTHS.len()
            )));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        let mut c_in = INPUT_CHANNELS;
        for (i, layer) in self.convs.iter().enumerate() {
            let c_out = CONV_WIDTHS[i];
            if layer.w.shape() != (c_in, c_out) || layer.b.shape() != (1, c_out) {
                return Err(Error::ShapeMismatch(format!("conv layer {i} tensor shape")));
            }
            match (&layer.proj, c_in == c_out) {
                (None, true) => {}
                (Some(p), false) if p.shape() == (c_in, c_out) => {}
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer {i} residual projection"
                    )))
                }
            }
            c_in = c_out;
        }
        if self.head1.w.shape() != (CONV_WIDTHS[8] + EMBED_WIDTH, HEAD_HIDDEN)
            || self.head1.b.shape() != (1, HEAD_HIDDEN)
            || self.head2.w.shape() != (HEAD_HIDDEN, 1)
            || self.head2.b.shape() != (1, 1)
        {
            return Err(Error::ShapeMismatch("dense head shape".into()));
        }
        if self.parameters().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("discriminator parameters".into()));
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order shared with
    /// [`DiscriminatorNet::parameters_mut`] and [`push_params`].
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.convs {
            out.push(&layer.w);
            out.push(&layer.b);
            if let Some(p) = &layer.proj {
                out.push(p);
            }
        }
        out.push(&self.head1.w);
        out.push(&self.head1.b);
        out.push(&self.head2.w);
        out.push(&self.head2.b);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.convs {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
            if let Some(p) = &mut layer.proj {
                out.push(p);
            }
        }
        out.push(&mut self.head1.w);
        out.push(&mut self.head1.b);
        out.push(&mut self.head2.w);
        out.push(&mut self.head2.b);
        out
    }

    /// Rebuilds a net from tensors laid out as
    /// [`DiscriminatorNet::parameters`].
    pub fn from_parameters(dropout: f64, params: &[Tensor]) -> Result<DiscriminatorNet> {
        let mut at = 0;
        let mut take = |n: usize| -> Result<Vec<Tensor>> {
            if at + n > params.len() {
                return Err(Error::ShapeMismatch("too few discriminator tensors".into()));
            }
            let out = params[at..at + n].to_vec();
            at += n;
            Ok(out)
        };
        let mut convs = Vec::with_capacity(CONV_WIDTHS.len());
        let mut c_in = INPUT_CHANNELS;
        for c_out in CONV_WIDTHS {
            let needs_proj = c_in != c_out;
            let mut block = take(if needs_proj { 3 } else { 2 })?;
            let proj = needs_proj.then(|| block.remove(2));
            convs.push(ConvLayer { w: block.remove(0), b: block.remove(0), proj });
            c_in = c_out;
        }
        let mut head = take(4)?;
        if at != params.len() {
            return Err(Error::ShapeMismatch("too many discriminator tensors".into()));
        }
        let net = DiscriminatorNet {
            convs,
            head1: Linear { w: head.remove(0), b: head.remove(0) },
            head2: Linear { w: head.remove(0), b: head.remove(0) },
            dropout,
        };
        net.validate()?;
        Ok(net)
    }
}

struct ConvNodes {
    w: NodeId,
    b: NodeId,
    proj: Option<NodeId>,
}

/// Tape handles for every discriminator parameter, in
/// [`DiscriminatorNet::parameters`] order in `flat`.
pub struct DiscriminatorNodes {
    convs: Vec<ConvNodes>,
    head1: (NodeId, NodeId),
    head2: (NodeId, NodeId),
    pub flat: Vec<NodeId>,
}

/// Pushes the net's parameters onto a tape as leaves (trainable) or
/// constants (frozen).
pub fn push_params(tape: &mut Tape, net: &DiscriminatorNet, trainable: bool) -> DiscriminatorNodes {
    let mut push = |tape: &mut Tape, t: &Tensor| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let mut flat = Vec::new();
    let mut convs = Vec::with_capacity(net.convs.len());
    for layer in &net.convs {
        let w = push(tape, &layer.w);
        let b = push(tape, &layer.b);
        let proj = layer.proj.as_ref().map(|p| push(tape, p));
        flat.push(w);
        flat.push(b);
        if let Some(p) = proj {
            flat.push(p);
        }
        convs.push(ConvNodes { w, b, proj });
    }
    let head1 = (push(tape, &net.head1.w), push(tape, &net.head1.b));
    let head2 = (push(tape, &net.head2.w), push(tape, &net.head2.b));
    flat.extend([head1.0, head1.1, head2.0, head2.1]);
    DiscriminatorNodes { convs, head1, head2, flat }
}

/// Per-layer inverted-scaling dropout masks sized for a k-frame pass over a
/// skeleton with `joints` joints.
pub fn dropout_masks(
    dropout: f64,
    joints: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    let k2 = frames.div_ceil(2);
    let k3 = k2.div_ceil(2);
    CONV_WIDTHS
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let k = if i < 3 {
                frames
            } else if i < 6 {
                k2
            } else {
                k3
            };
            crate::ndl::dropout_mask(joints * k, c, dropout, rng)
        })
        .collect()
}

/// Flattens hip-relative per-frame positions into the joint-major N×3
/// feature layout the graph uses.
pub fn features_from_positions(positions: &[Vec<Vec3>]) -> Result<Tensor> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("no position frames".into()));
    }
    let joints = positions[0].len();
    if joints == 0 {
        return Err(Error::InvalidArgument("no joints in positions".into()));
    }
    if let Some(f) = positions.iter().find(|f| f.len() != joints) {
        return Err(Error::ShapeMismatch(format!(
            "ragged position frames: {} vs {joints} joints",
            f.len()
        )));
    }
    let frames = positions.len();
    let mut t = Tensor::zeros(joints * frames, 3);
    for (ti, frame) in positions.iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            let row = t.row_mut(node_index(j, ti, frames));
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("joint positions".into()));
    }
    Ok(t)
}

/// Stacks per-joint k×3 track nodes into the joint-major feature node; the
/// generator's forward-kinematics outputs compose directly.
pub fn features_node_from_tracks(tape: &mut Tape, tracks: &[NodeId]) -> NodeId {
    tape.stack_rows(tracks)
}

/// Builds the score head on the tape: nine graph convolutions with residual
/// paths, temporal pooling after layers 3 and 6, global mean pooling, mean
/// condition fusion, and the sigmoid head. Returns the 1×1 score node.
pub fn score_on_tape(
    tape: &mut Tape,
    nodes: &DiscriminatorNodes,
    skeleton: &Skeleton,
    features: NodeId,
    condition: &Tensor,
    masks: Option<&[Tensor]>,
) -> Result<NodeId> {
    let joints = skeleton.joint_count();
    let frames = condition.rows();
    if frames < MIN_DISCRIMINATOR_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "{frames} frames is below the {MIN_DISCRIMINATOR_FRAMES}-frame minimum for two stride-2 poolings"
        )));
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
    if tape.value(features).shape() != (joints * frames, INPUT_CHANNELS) {
        return Err(Error::ShapeMismatch(format!(
            "features are {:?}, expected ({}, {INPUT_CHANNELS})",
            tape.value(features).shape(),
            joints * frames
        )));
    }
    if !tape.value(features).is_finite() {
        return Err(Error::NonFinite("graph features".into()));
    }

    let k2 = frames.div_ceil(2);
    let k3 = k2.div_ceil(2);
    let graphs = [
        build_st_graph(skeleton, frames)?,
        build_st_graph(skeleton, k2)?,
        build_st_graph(skeleton, k3)?,
    ];
    if let Some(ms) = masks {
        if ms.len() != CONV_WIDTHS.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} dropout masks, expected {}",
                ms.len(),
                CONV_WIDTHS.len()
            )));
        }
        for (i, m) in ms.iter().enumerate() {
            let want = (graphs[i / 3].node_count(), CONV_WIDTHS[i]);
            if m.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "dropout mask {i} is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
    }

    let mut x = tape.scale(features, FEATURE_SCALE);
    for (i, layer) in nodes.convs.iter().enumerate() {
        let graph = &graphs[i / 3];
        let smoothed = tape.sparse_lmul(graph.normalized(), x);
        let conv = tape.matmul(smoothed, layer.w);
        let pre = tape.add_row(conv, layer.b);
        let act = tape.leaky_relu(pre, LEAKY_SLOPE);
        let skip = match layer.proj {
            None => x,
            Some(p) => tape.matmul(x, p),
        };
        let mut out = tape.add(act, skip);
        if let Some(ms) = masks {
            let m = tape.constant(ms[i].clone());
            out = tape.mul(out, m);
        }
        x = out;
        if i == 2 {
            x = tape.sparse_lmul(temporal_pool_matrix(joints, frames), x);
        } else if i == 5 {
            x = tape.sparse_lmul(temporal_pool_matrix(joints, k2), x);
        }
    }

    let n3 = graphs[2].node_count();
    let pool_row = tape.constant(Tensor::filled(1, n3, 1.0 / n3 as f64));
    let pooled = tape.matmul(pool_row, x);
    let mut cond_mean = Tensor::zeros(1, EMBED_WIDTH);
    for r in 0..frames {
        for c in 0..EMBED_WIDTH {
            cond_mean.data_mut()[c] += condition.get(r, c) / frames as f64;
        }
    }
    let cond = tape.constant(cond_mean);
    let fused = tape.concat_cols(pooled, cond);
    let h_pre = tape.matmul(fused, nodes.head1.0);
    let h_biased = tape.add_row(h_pre, nodes.head1.1);
    let h = tape.leaky_relu(h_biased, LEAKY_SLOPE);
    let o_pre = tape.matmul(h, nodes.head2.0);
    let o = tape.add_row(o_pre, nodes.head2.1);
    Ok(tape.sigmoid(o))
}

fn condition_tensor(condition: &[PoseEmbedding]) -> Tensor {
    let mut data = Vec::with_capacity(condition.len() * EMBED_WIDTH);
    for e in condition {
        data.extend_from_slice(e.values());
    }
    Tensor::from_vec(condition.len(), EMBED_WIDTH, data)
}

/// Scores one sequence in (0, 1). `dropout_rng` switches training-mode
/// dropout on; inference is a pure function of net and inputs.
pub fn discriminate(
    net: &DiscriminatorNet,
    skeleton: &Skeleton,
    positions: &[Vec<Vec3>],
    condition: &[PoseEmbedding],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    net.validate()?;
    if positions.len() != condition.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} position frames for {} condition embeddings",
            positions.len(),
            condition.len()
        )));
    }
    let features = features_from_positions(positions)?;
    if positions[0].len() != skeleton.joint_count() {
        return Err(Error::SkeletonMismatch(format!(
            "positions carry {} joints, skeleton has {}",
            positions[0].len(),
            skeleton.joint_count()
        )));
    }
    let masks = dropout_rng
        .map(|rng| dropout_masks(net.dropout, skeleton.joint_count(), positions.len(), rng));
    let cond = condition_tensor(condition);
    let mut tape = Tape::new();
    let nodes = push_params(&mut tape, net, false);
    let f = tape.constant(features);
    let score = score_on_tape(&mut tape, &nodes, skeleton, f, &cond, masks.as_deref())?;
    Ok(tape.value(score).get(0, 0))
}

/// What one scored sequence should count as in the discriminator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreTarget {
    /// A real sequence with its (possibly smoothed) target label.
    Real { label: f64 },
    /// A generated or hard-negative sequence.
    Fake,
}

/// One discriminator step's loss term and parameter adjoints for a single
/// sequence; batch losses are sums of these.
pub struct DiscriminatorStep {
    pub loss: f64,
    pub score: f64,
    /// One gradient tensor per entry of [`DiscriminatorNet::parameters`].
    pub gradients: Vec<Tensor>,
}

/// Scores one sequence and differentiates its term of the discriminator
/// loss: −label·ln(clamp(s)) for real targets, −ln(1 − clamp(s)) for fakes.
pub fn discriminator_forward_backward(
    net: &DiscriminatorNet,
    skeleton: &Skeleton,
    positions: &[Vec<Vec3>],
    condition: &Tensor,
    target: ScoreTarget,
    masks: Option<&[Tensor]>,
    config: &LossConfig,
) -> Result<DiscriminatorStep> {
    net.validate()?;
    if let ScoreTarget::Real { label } = target {
        if !(label > 0.0 && label <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "real target label must lie in (0, 1], got {label}"
            )));
        }
    }
    let features = features_from_positions(positions)?;
    if positions.len() != condition.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} position frames for {} condition rows",
            positions.len(),
            condition.rows()
        )));
    }
    let mut tape = Tape::new();
    let nodes = push_params(&mut tape, net, true);
    let fnode = tape.constant(features);
    let score = score_on_tape(&mut tape, &nodes, skeleton, fnode, condition, masks)?;
    let delta = config.score_clamp;
    let loss = match target {
        ScoreTarget::Real { label } => {
            let ln = tape.ln_clamped(score, delta, 1.0 - delta);
            tape.scale(ln, -label)
        }
        ScoreTarget::Fake => {
            let one_minus = tape.affine(score, -1.0, 1.0);
            let ln = tape.ln_clamped(one_minus, delta, 1.0 - delta);
            tape.scale(ln, -1.0)
        }
    };
    let grads = tape.backward(loss);
    let gradients = nodes.flat.iter().map(|&p| grads.get_or_zeros(&tape, p)).collect();
    Ok(DiscriminatorStep {
        loss: tape.value(loss).get(0, 0),
        score: tape.value(score).get(0, 0),
        gradients,
    })
}
