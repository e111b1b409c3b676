//! Pose embedding codec.
//!
//! An L1-sparse autoencoder maps a 21-joint pose (84 quaternion components)
//! through 48 hidden units to a 20-dimensional embedding and back. Hidden
//! layers use LeakyReLU, the output layer is linear, and decoded quaternions
//! are renormalized per joint. Training is plain batch gradient descent with
//! inverted dropout on the 48-wide hidden layers and an L1 penalty on the
//! bottleneck activations.

use crate::error::{Error, Result};
use crate::motion::Pose;
use crate::ndl::{dropout_mask, NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// 21 joints x 4 quaternion components.
pub const POSE_WIDTH: usize = 84;
pub const EMBED_WIDTH: usize = 20;
pub const HIDDEN_WIDTH: usize = 48;
pub const CODEC_RECORD_VERSION: u32 = 1;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Corpora up to this size train full-batch, larger ones in chunks of it.
const FULL_BATCH_LIMIT: usize = 4096;
/// Bottleneck activations below this magnitude count as inactive.
const SPARSITY_CUTOFF: f64 = 1e-3;

/// Finite 20-vector produced by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEmbedding {
    values: Vec<f64>,
}

impl PoseEmbedding {
    pub fn new(values: Vec<f64>) -> Result<PoseEmbedding> {
        if values.len() != EMBED_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "embedding has {} values, expected {EMBED_WIDTH}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose embedding".into()));
        }
        Ok(PoseEmbedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    w: Tensor,
    b: Tensor,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Dense {
        Dense {
            w: Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> CodecConfig {
        CodecConfig { learning_rate: 1e-4, epochs: 200, beta: 1e-3, dropout: 0.5, seed: 0 }
    }
}

/// Per-epoch training record; `loss` includes the sparsity penalty,
/// `reconstruction` is the mean squared error alone, `sparsity` the fraction
/// of near-zero bottleneck activations over the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
}

/// Layer order: encode 84→48→20, decode 20→48→84.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    version: u32,
    layers: Vec<Dense>,
    beta: f64,
    epochs_trained: usize,
    final_loss: f64,
}

pub(crate) const LAYER_WIDTHS: [(usize, usize); 4] = [
    (POSE_WIDTH, HIDDEN_WIDTH),
    (HIDDEN_WIDTH, EMBED_WIDTH),
    (EMBED_WIDTH, HIDDEN_WIDTH),
    (HIDDEN_WIDTH, POSE_WIDTH),
];

impl AutoencoderModel {
    pub fn untrained() -> AutoencoderModel {
        AutoencoderModel {
            version: CODEC_RECORD_VERSION,
            layers: Vec::new(),
            beta: 0.0,
            epochs_trained: 0,
            final_loss: f64::NAN,
        }
    }

    pub fn is_trained(&self) -> bool {
        !self.layers.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    /// Checks shapes after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.version != CODEC_RECORD_VERSION {
            return Err(Error::CheckpointVersion {
                found: self.version,
                expected: CODEC_RECORD_VERSION,
            });
        }
        if !self.is_trained() {
            return Ok(());
        }
        if self.layers.len() != LAYER_WIDTHS.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "codec has {} layers, expected {}",
                self.layers.len(),
                LAYER_WIDTHS.len()
            )));
        }
        for (l, &(fan_in, fan_out)) in self.layers.iter().zip(LAYER_WIDTHS.iter()) {
            if l.w.shape() != (fan_in, fan_out) || l.b.shape() != (1, fan_out) {
                return Err(Error::CorruptCheckpoint("codec layer shape mismatch".into()));
            }
            if !l.w.is_finite() || !l.b.is_finite() {
                return Err(Error::CorruptCheckpoint("codec weights not finite".into()));
            }
        }
        Ok(())
    }

    fn require_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::UntrainedModel)
        }
    }

    /// Flat parameter tensors in update order.
    pub(crate) fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

fn pose_to_row(pose: &Pose, out: &mut [f64]) {
    for (j, q) in pose.rotations().iter().enumerate() {
        out[4 * j..4 * j + 4].copy_from_slice(&[q.w, q.x, q.y, q.z]);
    }
}

/// Stacks poses into an n x 84 matrix of quaternion components.
pub fn poses_to_matrix(poses: &[Pose]) -> Result<Tensor> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose collection".into()));
    }
    if let Some(p) = poses.iter().find(|p| 4 * p.joint_count() != POSE_WIDTH) {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, codec expects {}",
            p.joint_count(),
            POSE_WIDTH / 4
        )));
    }
    let mut x = Tensor::zeros(poses.len(), POSE_WIDTH);
    for (r, p) in poses.iter().enumerate() {
        pose_to_row(p, x.row_mut(r));
    }
    Ok(x)
}

struct TapeNet {
    params: Vec<NodeId>,
    bottleneck: NodeId,
    output: NodeId,
}

/// Builds the full autoencoder forward pass. `masks` carries the two hidden
/// dropout masks when training; inference passes None.
fn forward_on_tape(
    tape: &mut Tape,
    x: NodeId,
    params: &[Tensor],
    masks: Option<&[Tensor; 2]>,
) -> TapeNet {
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let mut h = x;
    let mut bottleneck = x;
    for (i, pair) in ids.chunks(2).enumerate() {
        let z = tape.matmul(h, pair[0]);
        h = tape.add_row(z, pair[1]);
        if i + 1 < LAYER_WIDTHS.len() {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        if i == 1 {
            bottleneck = h;
        }
        if let Some(ms) = masks {
            if i == 0 || i == 2 {
                let m = tape.constant(ms[i / 2].clone());
                h = tape.mul(h, m);
            }
        }
    }
    TapeNet { params: ids, bottleneck, output: h }
}

/// Reconstruction MSE plus beta times the mean per-pose L1 norm of the
/// bottleneck activations.
fn loss_on_tape(tape: &mut Tape, x: NodeId, net: &TapeNet, beta: f64) -> NodeId {
    let d = tape.sub(net.output, x);
    let sq = tape.mul(d, d);
    let recon = tape.mean_all(sq);
    let rows = tape.value(net.bottleneck).rows();
    let a = tape.abs(net.bottleneck);
    let l1 = tape.sum(a);
    let l1_mean = tape.scale(l1, beta / rows as f64);
    tape.add(recon, l1_mean)
}

pub(crate) fn codec_loss_value(x: &Tensor, params: &[Tensor], beta: f64) -> f64 {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let net = forward_on_tape(&mut tape, xn, params, None);
    let loss = loss_on_tape(&mut tape, xn, &net, beta);
    tape.value(loss).get(0, 0)
}

pub(crate) fn codec_loss_gradients(x: &Tensor, params: &[Tensor], beta: f64) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let net = forward_on_tape(&mut tape, xn, params, None);
    let loss = loss_on_tape(&mut tape, xn, &net, beta);
    let grads = tape.backward(loss);
    let gs = net.params.iter().map(|&id| grads.get_or_zeros(&tape, id)).collect();
    (tape.value(loss).get(0, 0), gs)
}

/// Trains the autoencoder by batch gradient descent and returns the model
/// with its per-epoch loss history.
pub fn train_autoencoder(
    poses: &[Pose],
    config: &CodecConfig,
) -> Result<(AutoencoderModel, Vec<EpochStats>)> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty corpus".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("epoch count must be positive".into()));
    }
    if !(config.beta >= 0.0 && config.beta.is_finite()) {
        return Err(Error::InvalidArgument("sparsity weight must be non-negative".into()));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::InvalidArgument("dropout rate must lie in [0, 1)".into()));
    }

    let x_all = poses_to_matrix(poses)?;
    let n = poses.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: Vec<Tensor> = LAYER_WIDTHS
        .iter()
        .flat_map(|&(fan_in, fan_out)| {
            let d = Dense::init(fan_in, fan_out, &mut rng);
            [d.w, d.b]
        })
        .collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        if n > FULL_BATCH_LIMIT {
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
        }
        for chunk in order.chunks(FULL_BATCH_LIMIT) {
            let xb = if chunk.len() == n {
                x_all.clone()
            } else {
                let mut t = Tensor::zeros(chunk.len(), POSE_WIDTH);
                for (r, &i) in chunk.iter().enumerate() {
                    t.row_mut(r).copy_from_slice(x_all.row(i));
                }
                t
            };
            let masks = if config.dropout > 0.0 {
                Some([
                    dropout_mask(chunk.len(), HIDDEN_WIDTH, config.dropout, &mut rng),
                    dropout_mask(chunk.len(), HIDDEN_WIDTH, config.dropout, &mut rng),
                ])
            } else {
                None
            };
            let mut tape = Tape::new();
            let xn = tape.constant(xb);
            let net = forward_on_tape(&mut tape, xn, &params, masks.as_ref());
            let loss = loss_on_tape(&mut tape, xn, &net, config.beta);
            let grads = tape.backward(loss);
            for (p, &id) in params.iter_mut().zip(net.params.iter()) {
                if let Some(g) = grads.get(id) {
                    p.acc_scaled(g, -config.learning_rate);
                }
            }
        }

        history.push(evaluate_epoch(epoch, &x_all, &params, config.beta));
    }

    let final_loss = history.last().map(|s| s.loss).unwrap_or(f64::NAN);
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("autoencoder training loss".into()));
    }
    let layers = params
        .chunks(2)
        .map(|pair| Dense { w: pair[0].clone(), b: pair[1].clone() })
        .collect();
    let model = AutoencoderModel {
        version: CODEC_RECORD_VERSION,
        layers,
        beta: config.beta,
        epochs_trained: config.epochs,
        final_loss,
    };
    Ok((model, history))
}

/// Dropout-free loss and sparsity over the whole corpus.
fn evaluate_epoch(epoch: usize, x: &Tensor, params: &[Tensor], beta: f64) -> EpochStats {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let net = forward_on_tape(&mut tape, xn, params, None);
    let d = tape.sub(net.output, xn);
    let sq = tape.mul(d, d);
    let recon_id = tape.mean_all(sq);
    let recon = tape.value(recon_id).get(0, 0);
    let bottleneck = tape.value(net.bottleneck);
    let l1: f64 = bottleneck.data().iter().map(|a| a.abs()).sum::<f64>() / x.rows() as f64;
    let inactive = bottleneck.data().iter().filter(|a| a.abs() < SPARSITY_CUTOFF).count();
    EpochStats {
        epoch,
        loss: recon + beta * l1,
        reconstruction: recon,
        sparsity: inactive as f64 / bottleneck.len() as f64,
    }
}

fn affine_forward(x: &[f64], layer: &Dense, out: &mut [f64]) {
    let (fan_in, fan_out) = layer.w.shape();
    out.copy_from_slice(layer.b.row(0));
    for (i, &xi) in x.iter().enumerate().take(fan_in) {
        let wrow = layer.w.row(i);
        for j in 0..fan_out {
            out[j] += xi * wrow[j];
        }
    }
}

fn leaky(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x *= LEAKY_SLOPE;
        }
    }
}

/// Deterministic embedding of a single pose; dropout is inactive here.
pub fn encode(model: &AutoencoderModel, pose: &Pose) -> Result<PoseEmbedding> {
    model.require_trained()?;
    if 4 * pose.joint_count() != POSE_WIDTH {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, codec expects {}",
            pose.joint_count(),
            POSE_WIDTH / 4
        )));
    }
    let mut x = vec![0.0; POSE_WIDTH];
    pose_to_row(pose, &mut x);
    let mut h = vec![0.0; HIDDEN_WIDTH];
    affine_forward(&x, &model.layers[0], &mut h);
    leaky(&mut h);
    let mut z = vec![0.0; EMBED_WIDTH];
    affine_forward(&h, &model.layers[1], &mut z);
    leaky(&mut z);
    PoseEmbedding::new(z)
}

/// Embeds many poses as the rows of an n x 20 matrix.
pub fn encode_poses(model: &AutoencoderModel, poses: &[Pose]) -> Result<Tensor> {
    model.require_trained()?;
    let x = poses_to_matrix(poses)?;
    let mut tape = Tape::new();
    let xn = tape.constant(x);
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    let net = forward_on_tape(&mut tape, xn, &params, None);
    Ok(tape.value(net.bottleneck).clone())
}

/// Decodes an embedding to a pose; the 84 raw outputs are reshaped to 21
/// quaternions and renormalized with w >= 0.
pub fn decode(model: &AutoencoderModel, embedding: &PoseEmbedding) -> Result<Pose> {
    model.require_trained()?;
    if embedding.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pose embedding".into()));
    }
    let mut h = vec![0.0; HIDDEN_WIDTH];
    affine_forward(&embedding.values, &model.layers[2], &mut h);
    leaky(&mut h);
    let mut y = vec![0.0; POSE_WIDTH];
    affine_forward(&h, &model.layers[3], &mut y);
    let quats = y
        .chunks(4)
        .map(|c| crate::math::Quat::new(c[0], c[1], c[2], c[3]))
        .collect();
    Ok(Pose::new(quats))
}
