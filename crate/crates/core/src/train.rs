//! Adversarial training loop: deterministic substream seeding, alternating
//! discriminator/generator updates with noisy labels and hard negatives,
//! atomic checkpoint files, per-step metrics, and the conditioned win-rate
//! evaluation protocol.
//!
//! Every random draw a run makes flows from the single config seed through a
//! named substream keyed by step, so a run resumed from a checkpoint walks
//! the same stream positions as an uninterrupted one and reproduces its
//! metrics bit for bit.

use crate::augment::{synth_hard_negative, HardNegativeKind};
use crate::codec::{encode_poses, AutoencoderModel, PoseEmbedding};
use crate::discriminator::{
    discriminate, discriminator_forward_backward, dropout_masks, features_node_from_tracks,
    push_params, score_on_tape, DiscriminatorNet, ScoreTarget, MIN_DISCRIMINATOR_FRAMES,
};
use crate::error::{Error, Result};
use crate::generator::{draw_noise, generate, generator_forward_backward, GeneratorNet, NoiseMode};
use crate::losses::{phi, LossConfig};
use crate::math::{Quat, Vec3};
use crate::motion::{MotionSequence, Pose};
use crate::ndl::{dropout_mask, Adam, Sgd, Tensor};
use crate::skeleton::Skeleton;
use crate::stnbnn::{main_joints, motion_energy_main_joints, StnbnnModel, StnbnnRecord, DEFAULT_MAIN_JOINTS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Frame rate of the procedural corpus, matching the rate real data is
/// normalized to.
pub const TOY_FPS: f64 = 5.0;

/// Per-joint angular jitter (radians, std dev) in the procedural corpus.
/// Distal joints of undriven limbs accumulate jitter from every ancestor at
/// long lever arms, so this stays well under the driven amplitude.
const TOY_JITTER: f64 = 0.0025;

/// Label and driven joint chain per procedural family. Driving a chain moves
/// the positions of its child joints, so each family's motion energy sits on
/// a distinct limb.
const TOY_FAMILIES: [(&str, [usize; 3]); 4] = [
    ("left-arm-wave", [5, 6, 7]),
    ("right-leg-swing", [17, 18, 19]),
    ("right-arm-wave", [9, 10, 11]),
    ("left-leg-swing", [13, 14, 15]),
];

/// How many distinct families [`make_toy_corpus`] can produce.
pub const TOY_FAMILY_COUNT: usize = TOY_FAMILIES.len();

/// The four-joint limb chain a procedural family animates.
pub fn toy_limb_joints(family: usize) -> [usize; 4] {
    let c = TOY_FAMILIES[family].1;
    [c[0], c[1], c[2], c[2] + 1]
}

/// Independent deterministic stream for `(seed, name, index)`. The length
/// prefix on the name keeps distinct (name, index) pairs from aliasing.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds a labeled procedural dataset: each family oscillates one limb chain
/// around an offset pose with its own amplitude and frequency, plus small
/// angular jitter on every non-root joint.
pub fn make_toy_corpus(
    families: usize,
    per_family: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    if families == 0 || families > TOY_FAMILIES.len() {
        return Err(Error::InvalidArgument(format!(
            "family count {families} outside [1, {}]",
            TOY_FAMILIES.len()
        )));
    }
    if per_family == 0 {
        return Err(Error::InvalidArgument("per-family count must be positive".into()));
    }
    if frames < 2 {
        return Err(Error::InvalidArgument("sequences need at least two frames".into()));
    }
    let skeleton = Skeleton::canonical();
    let axis = Vec3::new(0.0, 0.0, 1.0);
    let mut out = Vec::with_capacity(families * per_family);
    for (f, &(label, driven)) in TOY_FAMILIES.iter().enumerate().take(families) {
        let freq = 1.2 + 0.25 * f as f64;
        let amp = 0.6 + 0.05 * f as f64;
        for i in 0..per_family {
            let mut rng = substream(seed, "toy", (f * per_family + i) as u64);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut poses = Vec::with_capacity(frames);
            for t in 0..frames {
                let time = t as f64 / TOY_FPS;
                let mut rotations = Vec::with_capacity(skeleton.joint_count());
                for j in 0..skeleton.joint_count() {
                    // Root jitter would swing every joint at once and drown
                    // the per-limb energy contrast.
                    let jitter = if j == 0 {
                        0.0
                    } else {
                        let z: f64 = rng.sample(StandardNormal);
                        z * TOY_JITTER
                    };
                    let angle = match driven.iter().position(|&d| d == j) {
                        Some(depth) => {
                            1.0 + amp * (freq * time + phase + 0.4 * depth as f64).sin() + jitter
                        }
                        None => jitter,
                    };
                    rotations.push(Quat::from_axis_angle(axis, angle));
                }
                poses.push(Pose::new(rotations));
            }
            let roots = vec![Vec3::new(0.0, 90.0, 0.0); frames];
            out.push(MotionSequence::new(skeleton.clone(), poses, roots, TOY_FPS)?.with_label(label));
        }
    }
    Ok(out)
}

/// Splits off `holdout` sequences chosen by a seeded shuffle; both halves
/// keep the dataset's original order.
pub fn split_dataset(
    dataset: &[MotionSequence],
    holdout: usize,
    seed: u64,
) -> Result<(Vec<MotionSequence>, Vec<MotionSequence>)> {
    if dataset.is_empty() {
        return Err(Error::DegenerateCorpus("cannot split an empty dataset".into()));
    }
    if holdout >= dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "holdout {holdout} leaves no training data from {} sequences",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut substream(seed, "split", 0));
    let (held_ix, train_ix) = order.split_at(holdout);
    let mut held_ix = held_ix.to_vec();
    let mut train_ix = train_ix.to_vec();
    held_ix.sort_unstable();
    train_ix.sort_unstable();
    let train = train_ix.into_iter().map(|i| dataset[i].clone()).collect();
    let held = held_ix.into_iter().map(|i| dataset[i].clone()).collect();
    Ok((train, held))
}

/// Full configuration of one training run. The digest of its JSON form names
/// the run in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sequences per discriminator half-batch and per generator pass.
    pub batch_size: usize,
    /// Steps the schedule is sized for; the generator's rate reaches zero here.
    pub total_steps: usize,
    /// Generator Adam base learning rate (linear decay).
    pub g_base_lr: f64,
    /// Discriminator SGD base learning rate (steps down 10% per 10 epochs).
    pub d_base_lr: f64,
    /// One-sided smoothed target for real sequences.
    pub real_label: f64,
    /// Generator recurrent width.
    pub hidden: usize,
    /// Dropout probability for both nets during training.
    pub dropout: f64,
    /// Frames per training window; every dataset item is trimmed to this.
    pub frames: usize,
    /// Hard negatives join the discriminator batch every this-many steps.
    pub hard_negative_period: usize,
    /// Hard negatives per injection, as a fraction of batch_size (ceiling).
    pub hard_negative_fraction: f64,
    /// Generator passes per discriminator step.
    pub g_steps_per_d_step: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            total_steps: 500,
            g_base_lr: 0.1,
            d_base_lr: 0.01,
            real_label: 0.9,
            hidden: 64,
            dropout: 0.5,
            frames: 30,
            hard_negative_period: 5,
            hard_negative_fraction: 0.25,
            g_steps_per_d_step: 1,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.g_base_lr > 0.0 && self.g_base_lr.is_finite()) {
            return bad(format!("generator learning rate must be positive, got {}", self.g_base_lr));
        }
        if !(self.d_base_lr > 0.0 && self.d_base_lr.is_finite()) {
            return bad(format!(
                "discriminator learning rate must be positive, got {}",
                self.d_base_lr
            ));
        }
        if !(self.real_label > 0.5 && self.real_label <= 1.0) {
            return bad(format!("real label must lie in (0.5, 1], got {}", self.real_label));
        }
        if self.hidden == 0 {
            return bad("generator width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.frames < MIN_DISCRIMINATOR_FRAMES {
            return bad(format!(
                "training windows need at least {MIN_DISCRIMINATOR_FRAMES} frames, got {}",
                self.frames
            ));
        }
        if self.hard_negative_period == 0 {
            return bad("hard-negative period must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return bad(format!(
                "hard-negative fraction must lie in [0, 1], got {}",
                self.hard_negative_fraction
            ));
        }
        if self.g_steps_per_d_step == 0 {
            return bad("generator step ratio must be positive".into());
        }
        if !(self.loss.lambda1 >= 0.0 && self.loss.lambda1.is_finite())
            || !(self.loss.lambda2 >= 0.0 && self.loss.lambda2.is_finite())
        {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.loss.epsilon >= 0.0 && self.loss.epsilon.is_finite()) {
            return bad("loss epsilon must be non-negative".into());
        }
        if !(self.loss.score_clamp > 0.0 && self.loss.score_clamp < 0.5) {
            return bad(format!(
                "score clamp must lie in (0, 0.5), got {}",
                self.loss.score_clamp
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON form; checkpoints carry it so a resume against
    /// a different config is caught.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// One training step's losses and batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Discriminator loss summed over its batch (real + fake + hard).
    pub l_d: f64,
    /// Generator loss summed over its batch (adversarial + conditioning).
    pub l_g: f64,
    /// Conditioning term alone, summed over the generator batch.
    pub l_st: f64,
    /// Fraction of real sequences scored above 0.5.
    pub d_acc_real: f64,
    /// Fraction of generated sequences scored below 0.5.
    pub d_acc_fake: f64,
    /// Fraction of hard negatives scored below 0.5; absent on steps without
    /// a hard-negative injection.
    pub d_acc_hard: Option<f64>,
    /// Mean φ(input, generated) over the generator batch.
    pub mean_phi: f64,
    /// Mean pairwise distance between mean embeddings of the generated batch.
    pub diversity: f64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [self.l_d, self.l_g, self.l_st, self.d_acc_real, self.d_acc_fake, self.mean_phi, self.diversity]
            .iter()
            .all(|v| v.is_finite())
            && self.d_acc_hard.map_or(true, f64::is_finite)
    }
}

/// True when some `window` consecutive records keep |L_D| at or below
/// `floor`: the discriminator objective has collapsed.
pub fn d_loss_pinned(records: &[MetricsRecord], window: usize, floor: f64) -> bool {
    if window == 0 || records.len() < window {
        return false;
    }
    records.windows(window).any(|w| w.iter().all(|r| r.l_d.abs() <= floor))
}

/// Per-sequence quantities the loop reuses every step.
struct ItemCache {
    trimmed: MotionSequence,
    /// frames × embedding-width conditioning block.
    condition: Tensor,
    embeddings: Vec<PoseEmbedding>,
    /// Hip-relative joint positions, frames × joints.
    positions: Vec<Vec<Vec3>>,
    main: Vec<usize>,
}

fn build_cache(
    item: &MotionSequence,
    codec: &AutoencoderModel,
    stnbnn: Option<&StnbnnModel>,
    frames: usize,
) -> Result<ItemCache> {
    let trimmed = item.trim(frames)?;
    let condition = encode_poses(codec, trimmed.frames())?;
    let embeddings = (0..condition.rows())
        .map(|r| PoseEmbedding::new(condition.row(r).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let positions = trimmed.all_joint_positions();
    let main = match stnbnn {
        Some(model) => main_joints(model, &trimmed)?,
        None => motion_energy_main_joints(&trimmed, DEFAULT_MAIN_JOINTS)?,
    };
    Ok(ItemCache { condition, embeddings, positions, main: main.indices().to_vec(), trimmed })
}

fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    debug_assert_eq!(acc.len(), grads.len());
    for (a, g) in acc.iter_mut().zip(grads) {
        a.acc(g);
    }
}

fn mean_pose_embedding(codec: &AutoencoderModel, poses: &[Pose]) -> Result<Vec<f64>> {
    let e = encode_poses(codec, poses)?;
    let mut mean = vec![0.0; e.cols()];
    for r in 0..e.rows() {
        for (m, v) in mean.iter_mut().zip(e.row(r)) {
            *m += v;
        }
    }
    let n = e.rows() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

fn mean_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// The adversarial loop. Holds both nets, their optimizers, and the cached
/// per-sequence conditioning; [`Trainer::step_once`] advances one step.
pub struct Trainer {
    config: TrainConfig,
    skeleton: Skeleton,
    codec: AutoencoderModel,
    stnbnn: Option<StnbnnModel>,
    generator: GeneratorNet,
    discriminator: DiscriminatorNet,
    adam: Adam,
    sgd: Sgd,
    step: usize,
    cache: Vec<ItemCache>,
}

impl Trainer {
    pub fn new(
        dataset: &[MotionSequence],
        codec: AutoencoderModel,
        stnbnn: Option<StnbnnModel>,
        config: TrainConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        let seed = config.seed;
        let mut generator = GeneratorNet::init(config.hidden, &mut substream(seed, "g-init", 0));
        generator.dropout = config.dropout;
        let mut discriminator = DiscriminatorNet::init(&mut substream(seed, "d-init", 0));
        discriminator.dropout = config.dropout;
        let adam = Adam::new(config.g_base_lr, Trainer::generator_schedule_steps(&config));
        Trainer::assemble(dataset, codec, stnbnn, config, generator, discriminator, adam, 0)
    }

    /// Restores a trainer mid-run. The dataset must be the one the original
    /// run used; conditioning caches are rebuilt deterministically from it.
    pub fn from_checkpoint(dataset: &[MotionSequence], checkpoint: Checkpoint) -> Result<Trainer> {
        let Checkpoint {
            step,
            metrics_cursor: _,
            config,
            config_digest,
            generator,
            discriminator,
            codec,
            stnbnn,
            adam_m,
            adam_v,
            adam_steps,
        } = checkpoint;
        config.validate()?;
        if config_digest != config.digest() {
            return Err(Error::CorruptCheckpoint("config digest mismatch".into()));
        }
        let stnbnn = stnbnn.as_ref().map(StnbnnModel::from_record).transpose()?;
        let adam = Adam::restore(
            config.g_base_lr,
            Trainer::generator_schedule_steps(&config),
            adam_m,
            adam_v,
            adam_steps,
        );
        Trainer::assemble(dataset, codec, stnbnn, config, generator, discriminator, adam, step)
    }

    fn generator_schedule_steps(config: &TrainConfig) -> usize {
        (config.total_steps * config.g_steps_per_d_step).max(1)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        dataset: &[MotionSequence],
        codec: AutoencoderModel,
        stnbnn: Option<StnbnnModel>,
        config: TrainConfig,
        generator: GeneratorNet,
        discriminator: DiscriminatorNet,
        adam: Adam,
        step: usize,
    ) -> Result<Trainer> {
        if dataset.is_empty() {
            return Err(Error::DegenerateCorpus("training dataset is empty".into()));
        }
        if !codec.is_trained() {
            return Err(Error::UntrainedModel);
        }
        if let Some(model) = &stnbnn {
            if !model.is_trained() {
                return Err(Error::UntrainedModel);
            }
        }
        generator.validate()?;
        discriminator.validate()?;
        let skeleton = dataset[0].skeleton().clone();
        if !skeleton.is_canonical() {
            return Err(Error::SkeletonMismatch("training requires the canonical rig".into()));
        }
        let mut cache = Vec::with_capacity(dataset.len());
        for item in dataset {
            if item.skeleton() != &skeleton {
                return Err(Error::SkeletonMismatch("dataset mixes skeletons".into()));
            }
            cache.push(build_cache(item, &codec, stnbnn.as_ref(), config.frames)?);
        }
        let sgd = Sgd::new(config.d_base_lr);
        Ok(Trainer {
            config,
            skeleton,
            codec,
            stnbnn,
            generator,
            discriminator,
            adam,
            sgd,
            step,
            cache,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.generator
    }

    pub fn discriminator(&self) -> &DiscriminatorNet {
        &self.discriminator
    }

    pub fn codec(&self) -> &AutoencoderModel {
        &self.codec
    }

    /// Completed passes over the dataset, counting batch_size sequences per
    /// step; the discriminator's decay schedule keys on this.
    pub fn epoch(&self) -> usize {
        self.step * self.config.batch_size / self.cache.len()
    }

    /// One discriminator update followed by the configured generator updates.
    /// Returns the step's metrics; errors with [`Error::NonFinite`] if any
    /// metric leaves the finite range, leaving the step counter unadvanced.
    pub fn step_once(&mut self) -> Result<MetricsRecord> {
        let s = self.step as u64;
        let m = self.config.batch_size;
        let n = self.cache.len();
        let k = self.config.frames;
        let joints = self.skeleton.joint_count();
        let epoch = self.epoch();

        let mut batch_rng = substream(self.config.seed, "batch", s);
        let mut d_dropout = substream(self.config.seed, "d-dropout", s);
        let mut noise_rng = substream(self.config.seed, "noise", s);
        let mut fake_dropout = substream(self.config.seed, "fake-dropout", s);

        let mut d_grads: Vec<Tensor> = self
            .discriminator
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        let mut l_d = 0.0;

        let mut real_hits = 0usize;
        for _ in 0..m {
            let ix = batch_rng.gen_range(0..n);
            let item = &self.cache[ix];
            let masks = dropout_masks(self.config.dropout, joints, k, &mut d_dropout);
            let step = discriminator_forward_backward(
                &self.discriminator,
                &self.skeleton,
                &item.positions,
                &item.condition,
                ScoreTarget::Real { label: self.config.real_label },
                Some(&masks),
                &self.config.loss,
            )?;
            l_d += step.loss;
            if step.score > 0.5 {
                real_hits += 1;
            }
            accumulate(&mut d_grads, &step.gradients);
        }

        let mut fake_hits = 0usize;
        for _ in 0..m {
            let ix = batch_rng.gen_range(0..n);
            let item = &self.cache[ix];
            let noise = draw_noise(NoiseMode::PerSequence, k, &mut noise_rng);
            let fake = generate(
                &self.generator,
                &item.embeddings,
                &noise,
                item.trimmed.fps(),
                Some(&mut fake_dropout),
            )?;
            let fake_positions = fake.all_joint_positions();
            let masks = dropout_masks(self.config.dropout, joints, k, &mut d_dropout);
            let step = discriminator_forward_backward(
                &self.discriminator,
                &self.skeleton,
                &fake_positions,
                &item.condition,
                ScoreTarget::Fake,
                Some(&masks),
                &self.config.loss,
            )?;
            l_d += step.loss;
            if step.score < 0.5 {
                fake_hits += 1;
            }
            accumulate(&mut d_grads, &step.gradients);
        }

        let mut d_acc_hard = None;
        if self.config.hard_negative_fraction > 0.0
            && self.step % self.config.hard_negative_period == 0
        {
            let count = (self.config.hard_negative_fraction * m as f64).ceil() as usize;
            let mut hard_rng = substream(self.config.seed, "hard", s);
            let mut hard_hits = 0usize;
            for _ in 0..count {
                let ix = hard_rng.gen_range(0..n);
                let kind = match hard_rng.gen_range(0..3u8) {
                    0 => HardNegativeKind::Reversal,
                    1 => HardNegativeKind::BigNoise,
                    _ => HardNegativeKind::Bounce,
                };
                let negative_seed: u64 = hard_rng.gen();
                let item = &self.cache[ix];
                let negative = synth_hard_negative(&item.trimmed, kind, negative_seed)?;
                let negative_positions = negative.all_joint_positions();
                let masks = dropout_masks(self.config.dropout, joints, k, &mut d_dropout);
                let step = discriminator_forward_backward(
                    &self.discriminator,
                    &self.skeleton,
                    &negative_positions,
                    &item.condition,
                    ScoreTarget::Fake,
                    Some(&masks),
                    &self.config.loss,
                )?;
                l_d += step.loss;
                if step.score < 0.5 {
                    hard_hits += 1;
                }
                accumulate(&mut d_grads, &step.gradients);
            }
            if count > 0 {
                d_acc_hard = Some(hard_hits as f64 / count as f64);
            }
        }

        {
            let mut params = self.discriminator.parameters_mut();
            self.sgd.step(&mut params, &d_grads, epoch);
        }

        let mut g_noise = substream(self.config.seed, "g-noise", s);
        let mut g_dropout = substream(self.config.seed, "g-dropout", s);
        let mut l_g = 0.0;
        let mut l_st = 0.0;
        let mut phi_sum = 0.0;
        let mut produced: Vec<Vec<f64>> = Vec::with_capacity(m * self.config.g_steps_per_d_step);
        for _ in 0..self.config.g_steps_per_d_step {
            let mut g_grads: Vec<Tensor> = self
                .generator
                .parameters()
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect();
            for _ in 0..m {
                let ix = batch_rng.gen_range(0..n);
                let item = &self.cache[ix];
                let noise = draw_noise(NoiseMode::PerSequence, k, &mut g_noise);
                let mask = dropout_mask(k, 2 * self.config.hidden, self.config.dropout, &mut g_dropout);
                let disc = &self.discriminator;
                let skel = &self.skeleton;
                let cond = &item.condition;
                let gstep = generator_forward_backward(
                    &self.generator,
                    skel,
                    cond,
                    &noise,
                    &item.positions,
                    &item.main,
                    item.trimmed.fps(),
                    Some(&mask),
                    &self.config.loss,
                    |tape, tracks| {
                        // The critic runs in inference mode here; only the
                        // generator's own dropout regularizes its update.
                        let nodes = push_params(tape, disc, false);
                        let features = features_node_from_tracks(tape, tracks);
                        score_on_tape(tape, &nodes, skel, features, cond, None)
                    },
                )?;
                l_g += gstep.loss;
                l_st += gstep.st;
                phi_sum += gstep.phi;
                produced.push(mean_pose_embedding(&self.codec, gstep.generated.frames())?);
                accumulate(&mut g_grads, &gstep.gradients);
            }
            let mut params = self.generator.parameters_mut();
            self.adam.step(&mut params, &g_grads);
        }

        let record = MetricsRecord {
            step: self.step,
            l_d,
            l_g,
            l_st,
            d_acc_real: real_hits as f64 / m as f64,
            d_acc_fake: fake_hits as f64 / m as f64,
            d_acc_hard,
            mean_phi: phi_sum / (m * self.config.g_steps_per_d_step) as f64,
            diversity: mean_pairwise_distance(&produced),
        };
        if !record.is_finite() {
            return Err(Error::NonFinite(format!("training metrics at step {}", self.step)));
        }
        self.step += 1;
        Ok(record)
    }

    /// Steps until the counter reaches `target_step`, handing each record to
    /// the callback as it is produced.
    pub fn run_to(
        &mut self,
        target_step: usize,
        mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < target_step {
            let record = self.step_once()?;
            on_record(&record)?;
        }
        Ok(())
    }

    /// Snapshot of everything a resumed run needs.
    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v, adam_steps) = self.adam.state();
        Checkpoint {
            step: self.step,
            metrics_cursor: self.step,
            config_digest: self.config.digest(),
            config: self.config.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            codec: self.codec.clone(),
            stnbnn: self.stnbnn.as_ref().map(|s| s.record()),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            adam_steps,
        }
    }
}

/// Serialized training state. One metrics record exists per completed step,
/// so `metrics_cursor` equals `step` and tells a resume where the log ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub metrics_cursor: usize,
    pub config: TrainConfig,
    pub config_digest: String,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub codec: AutoencoderModel,
    pub stnbnn: Option<StnbnnRecord>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub adam_steps: usize,
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ANCP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes magic, version, payload digest, then the JSON payload. The write
/// lands in a temp file in the target directory and is renamed over `path`,
/// so a crash never leaves a half-written checkpoint behind.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let payload = serde_json::to_vec(checkpoint)?;
    let mut bytes = Vec::with_capacity(40 + payload.len());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&Sha256::digest(&payload));
    bytes.extend_from_slice(&payload);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 40 {
        return Err(Error::CorruptCheckpoint("file shorter than its header".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("unrecognized magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let stored: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
    let payload = &bytes[40..];
    if stored[..] != Sha256::digest(payload)[..] {
        return Err(Error::CorruptCheckpoint("payload digest mismatch".into()));
    }
    let checkpoint: Checkpoint = serde_json::from_slice(payload)
        .map_err(|e| Error::CorruptCheckpoint(format!("payload does not parse: {e}")))?;
    if checkpoint.config_digest != checkpoint.config.digest() {
        return Err(Error::CorruptCheckpoint("config digest mismatch".into()));
    }
    Ok(checkpoint)
}

/// Aggregate result of the win-rate protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub mean_phi_generated: f64,
    pub mean_phi_cross: f64,
}

/// Win-rate evaluation over an arbitrary clip source. Trial `t` conditions
/// on item `t mod n`, draws a rival real clip under a different label, and
/// counts a win when the returned clip sits closer to the item (by φ over
/// the item's main joints) than the rival does. The closure receives the
/// item index, its conditioning embeddings, and a fresh noise block.
pub fn evaluate_with(
    eval_set: &[MotionSequence],
    codec: &AutoencoderModel,
    stnbnn: Option<&StnbnnModel>,
    frames: usize,
    trials: usize,
    seed: u64,
    mut generate_clip: impl FnMut(usize, &[PoseEmbedding], &Tensor) -> Result<MotionSequence>,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one trial".into()));
    }
    let mut cache = Vec::with_capacity(eval_set.len());
    for item in eval_set {
        if item.label.is_none() {
            return Err(Error::InvalidArgument("evaluation requires labeled sequences".into()));
        }
        cache.push(build_cache(item, codec, stnbnn, frames)?);
    }
    let n = cache.len();
    let first = &cache[0].trimmed.label;
    if cache.iter().all(|c| &c.trimmed.label == first) {
        return Err(Error::DegenerateCorpus("evaluation set carries a single label".into()));
    }
    let mut wins = 0usize;
    let mut phi_generated_sum = 0.0;
    let mut phi_cross_sum = 0.0;
    for t in 0..trials {
        let ix = t % n;
        let item = &cache[ix];
        let mut rng = substream(seed, "eval", t as u64);
        let rivals: Vec<usize> =
            (0..n).filter(|&j| cache[j].trimmed.label != item.trimmed.label).collect();
        let cross = rivals[rng.gen_range(0..rivals.len())];
        let noise = draw_noise(NoiseMode::PerSequence, frames, &mut rng);
        let clip = generate_clip(ix, &item.embeddings, &noise)?;
        let clip_positions = clip.all_joint_positions();
        let fps = item.trimmed.fps();
        let phi_generated = phi(&item.positions, &clip_positions, &item.main, fps)?;
        let phi_cross = phi(&item.positions, &cache[cross].positions, &item.main, fps)?;
        if phi_generated < phi_cross {
            wins += 1;
        }
        phi_generated_sum += phi_generated;
        phi_cross_sum += phi_cross;
    }
    Ok(EvalReport {
        trials,
        wins,
        win_rate: wins as f64 / trials as f64,
        mean_phi_generated: phi_generated_sum / trials as f64,
        mean_phi_cross: phi_cross_sum / trials as f64,
    })
}

/// Win-rate evaluation of a generator net, run without dropout.
pub fn evaluate(
    generator: &GeneratorNet,
    codec: &AutoencoderModel,
    stnbnn: Option<&StnbnnModel>,
    eval_set: &[MotionSequence],
    frames: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let rates: Vec<f64> = eval_set.iter().map(|s| s.fps()).collect();
    evaluate_with(eval_set, codec, stnbnn, frames, trials, seed, |ix, embeddings, noise| {
        generate(generator, embeddings, noise, rates[ix], None)
    })
}

/// Win-rate evaluation of a saved training state.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    eval_set: &[MotionSequence],
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let stnbnn = checkpoint.stnbnn.as_ref().map(StnbnnModel::from_record).transpose()?;
    evaluate(
        &checkpoint.generator,
        &checkpoint.codec,
        stnbnn.as_ref(),
        eval_set,
        checkpoint.config.frames,
        trials,
        seed,
    )
}

/// Held-out discrimination accuracy: each clip is scored once as real and
/// once per synthetic-negative kind, all without dropout, against the clip's
/// own conditioning. A real clip counts when scored above 0.5, a negative
/// when below.
pub fn real_vs_hard_accuracy(
    net: &DiscriminatorNet,
    codec: &AutoencoderModel,
    held: &[MotionSequence],
    frames: usize,
    seed: u64,
) -> Result<f64> {
    if held.is_empty() {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let kinds = [HardNegativeKind::Reversal, HardNegativeKind::BigNoise, HardNegativeKind::Bounce];
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, item) in held.iter().enumerate() {
        let trimmed = item.trim(frames)?;
        let condition = encode_poses(codec, trimmed.frames())?;
        let embeddings = (0..condition.rows())
            .map(|r| PoseEmbedding::new(condition.row(r).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let real_score =
            discriminate(net, trimmed.skeleton(), &trimmed.all_joint_positions(), &embeddings, None)?;
        if real_score > 0.5 {
            hits += 1;
        }
        total += 1;
        let mut rng = substream(seed, "hard-eval", i as u64);
        for kind in kinds {
            let negative = synth_hard_negative(&trimmed, kind, rng.gen())?;
            let score = discriminate(
                net,
                trimmed.skeleton(),
                &negative.all_joint_positions(),
                &embeddings,
                None,
            )?;
            if score < 0.5 {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// The weight grid searched when choosing the conditioning mix.
pub fn lambda_grid() -> Vec<(f64, f64)> {
    const VALUES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut grid = Vec::with_capacity(VALUES.len() * VALUES.len());
    for l1 in VALUES {
        for l2 in VALUES {
            grid.push((l1, l2));
        }
    }
    grid
}

/// Validation score of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda1: f64,
    pub lambda2: f64,
    pub win_rate: f64,
}

/// Grid-searches the conditioning weights: trains one short run per cell of
/// [`lambda_grid`] on `train_set` and scores it by win rate on `validation`.
/// Returns every cell's score plus the best pair; ties keep the earliest
/// grid cell.
pub fn search_lambdas(
    train_set: &[MotionSequence],
    validation: &[MotionSequence],
    codec: &AutoencoderModel,
    stnbnn: Option<&StnbnnModel>,
    base: &TrainConfig,
    trials: usize,
) -> Result<((f64, f64), Vec<LambdaScore>)> {
    let mut scores = Vec::new();
    let mut best: Option<(f64, (f64, f64))> = None;
    for (lambda1, lambda2) in lambda_grid() {
        let mut config = base.clone();
        config.loss.lambda1 = lambda1;
        config.loss.lambda2 = lambda2;
        let mut trainer =
            Trainer::new(train_set, codec.clone(), stnbnn.cloned(), config.clone())?;
        trainer.run_to(config.total_steps, |_| Ok(()))?;
        let report = evaluate(
            trainer.generator(),
            codec,
            stnbnn,
            validation,
            config.frames,
            trials,
            config.seed,
        )?;
        scores.push(LambdaScore { lambda1, lambda2, win_rate: report.win_rate });
        if best.as_ref().map_or(true, |(w, _)| report.win_rate > *w) {
            best = Some((report.win_rate, (lambda1, lambda2)));
        }
    }
    let (_, pair) = best.expect("grid is non-empty");
    Ok((pair, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{train_autoencoder, CodecConfig};
    use crate::math::RotOrder;
    use crate::skeleton::Joint;

    fn tiny_corpus() -> Vec<MotionSequence> {
        make_toy_corpus(2, 3, 8, 40).unwrap()
    }

    fn tiny_codec(corpus: &[MotionSequence]) -> AutoencoderModel {
        let poses: Vec<Pose> = corpus.iter().flat_map(|s| s.frames().to_vec()).collect();
        let config =
            CodecConfig { learning_rate: 0.05, epochs: 120, beta: 0.0, dropout: 0.0, seed: 7 };
        train_autoencoder(&poses, &config).unwrap().0
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_steps: 4,
            g_base_lr: 0.05,
            hidden: 4,
            frames: 8,
            hard_negative_period: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn substream_is_deterministic_and_keyed_on_every_part() {
        let mut a = substream(1, "noise", 3);
        let mut b = substream(1, "noise", 3);
        let base: u64 = a.gen();
        assert_eq!(base, b.gen::<u64>());
        assert_ne!(base, substream(1, "noise", 4).gen::<u64>());
        assert_ne!(base, substream(1, "dropout", 3).gen::<u64>());
        assert_ne!(base, substream(2, "noise", 3).gen::<u64>());
    }

    #[test]
    fn toy_corpus_is_labeled_sized_and_deterministic() {
        let corpus = make_toy_corpus(2, 3, 10, 5).unwrap();
        assert_eq!(corpus.len(), 6);
        for (i, seq) in corpus.iter().enumerate() {
            assert_eq!(seq.frames().len(), 10);
            assert_eq!(seq.fps(), TOY_FPS);
            assert!(seq.skeleton().is_canonical());
            assert_eq!(seq.root_positions()[0], Vec3::new(0.0, 90.0, 0.0));
            let want = if i < 3 { "left-arm-wave" } else { "right-leg-swing" };
            assert_eq!(seq.label.as_deref(), Some(want));
        }
        assert_eq!(corpus, make_toy_corpus(2, 3, 10, 5).unwrap());
        assert_ne!(corpus, make_toy_corpus(2, 3, 10, 6).unwrap());
    }

    #[test]
    fn toy_corpus_rejects_bad_shapes() {
        assert!(matches!(make_toy_corpus(0, 3, 10, 5), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_toy_corpus(5, 3, 10, 5), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_toy_corpus(2, 0, 10, 5), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_toy_corpus(2, 3, 1, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn toy_corpus_concentrates_motion_on_the_driven_limb() {
        let corpus = make_toy_corpus(2, 2, 20, 12).unwrap();
        assert_eq!(toy_limb_joints(0), [5, 6, 7, 8]);
        assert_eq!(toy_limb_joints(1), [17, 18, 19, 20]);
        for seq in &corpus[..2] {
            let main = motion_energy_main_joints(seq, 3).unwrap();
            assert_eq!(main.indices(), &[6, 7, 8], "arm family moves the arm");
        }
        for seq in &corpus[2..] {
            let main = motion_energy_main_joints(seq, 3).unwrap();
            assert_eq!(main.indices(), &[18, 19, 20], "leg family moves the leg");
        }
    }

    #[test]
    fn config_validation_rejects_out_of_range_fields() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
            Box::new(|c| c.batch_size = 0),
            Box::new(|c| c.g_base_lr = 0.0),
            Box::new(|c| c.d_base_lr = -0.01),
            Box::new(|c| c.real_label = 0.5),
            Box::new(|c| c.real_label = 1.2),
            Box::new(|c| c.hidden = 0),
            Box::new(|c| c.dropout = 1.0),
            Box::new(|c| c.frames = MIN_DISCRIMINATOR_FRAMES - 1),
            Box::new(|c| c.hard_negative_period = 0),
            Box::new(|c| c.hard_negative_fraction = -0.1),
            Box::new(|c| c.g_steps_per_d_step = 0),
            Box::new(|c| c.loss.lambda1 = -1.0),
            Box::new(|c| c.loss.score_clamp = 0.0),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut config = TrainConfig::default();
            mutate(&mut config);
            assert!(
                matches!(config.validate(), Err(Error::InvalidArgument(_))),
                "case {i} should fail validation"
            );
        }
    }

    #[test]
    fn config_digest_tracks_content() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn split_partitions_the_dataset_deterministically() {
        let corpus = make_toy_corpus(2, 5, 6, 3).unwrap();
        let (train, held) = split_dataset(&corpus, 3, 9).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(held.len(), 3);
        let mut all: Vec<String> =
            train.iter().chain(&held).map(|s| serde_json::to_string(s).unwrap()).collect();
        let mut want: Vec<String> =
            corpus.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
        all.sort();
        want.sort();
        assert_eq!(all, want, "split loses or duplicates nothing");
        let again = split_dataset(&corpus, 3, 9).unwrap();
        assert_eq!(held, again.1);
        assert!(split_dataset(&corpus, 10, 9).is_err());
        assert!(split_dataset(&[], 0, 9).is_err());
    }

    fn two_joint_sequence() -> MotionSequence {
        let joints = vec![
            Joint {
                name: "a".into(),
                parent: None,
                offset: Vec3::ZERO,
                rot_order: RotOrder::Zxy,
                end_site: None,
            },
            Joint {
                name: "b".into(),
                parent: Some(0),
                offset: Vec3::new(0.0, 1.0, 0.0),
                rot_order: RotOrder::Zxy,
                end_site: Some(Vec3::new(0.0, 1.0, 0.0)),
            },
        ];
        let skeleton = Skeleton::new(joints).unwrap();
        let poses = vec![Pose::identity(2); 8];
        MotionSequence::new(skeleton, poses, vec![Vec3::ZERO; 8], TOY_FPS).unwrap()
    }

    #[test]
    fn trainer_rejects_unusable_inputs() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        assert!(matches!(
            Trainer::new(&[], codec.clone(), None, tiny_config()),
            Err(Error::DegenerateCorpus(_))
        ));
        assert!(matches!(
            Trainer::new(&corpus, AutoencoderModel::untrained(), None, tiny_config()),
            Err(Error::UntrainedModel)
        ));
        let short = make_toy_corpus(2, 2, 6, 4).unwrap();
        assert!(matches!(
            Trainer::new(&short, codec.clone(), None, tiny_config()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            Trainer::new(&[two_joint_sequence()], codec, None, tiny_config()),
            Err(Error::SkeletonMismatch(_))
        ));
    }

    #[test]
    fn one_step_yields_finite_metrics_and_advances() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let mut trainer = Trainer::new(&corpus, codec, None, tiny_config()).unwrap();
        let first = trainer.step_once().unwrap();
        assert_eq!(first.step, 0);
        assert!(first.is_finite());
        assert!(first.l_d > 0.0);
        assert!((0.0..=1.0).contains(&first.d_acc_real));
        assert!((0.0..=1.0).contains(&first.d_acc_fake));
        assert!(first.d_acc_hard.is_some(), "step 0 injects hard negatives at period 2");
        assert!(first.mean_phi > 0.0);
        assert_eq!(trainer.step(), 1);
        let second = trainer.step_once().unwrap();
        assert!(second.d_acc_hard.is_none(), "step 1 is off the injection cadence");
        let line = serde_json::to_string(&second).unwrap();
        assert!(!line.contains('\n'), "a record serializes to a single line");
    }

    #[test]
    fn zero_step_target_emits_no_records() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let mut trainer = Trainer::new(&corpus, codec, None, tiny_config()).unwrap();
        let mut calls = 0;
        trainer
            .run_to(0, |_| {
                calls += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(trainer.step(), 0);
        assert_eq!(trainer.checkpoint().step, 0);
    }

    #[test]
    fn checkpoint_file_round_trips_bit_exactly() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let mut trainer = Trainer::new(&corpus, codec, None, tiny_config()).unwrap();
        trainer.step_once().unwrap();
        let checkpoint = trainer.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint, loaded);
    }

    #[test]
    fn checkpoint_loader_rejects_damage() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let trainer = Trainer::new(&corpus, codec, None, tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&trainer.checkpoint(), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 2, expected: CHECKPOINT_VERSION })
        ));

        let mut bad_payload = good.clone();
        let last = bad_payload.len() - 1;
        bad_payload[last] ^= 0x01;
        fs::write(&path, &bad_payload).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));

        fs::write(&path, &good[..20]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let config = tiny_config();

        let mut full = Trainer::new(&corpus, codec.clone(), None, config.clone()).unwrap();
        let mut full_lines = Vec::new();
        full.run_to(4, |r| {
            full_lines.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();

        let mut head = Trainer::new(&corpus, codec, None, config).unwrap();
        let mut resumed_lines = Vec::new();
        head.run_to(2, |r| {
            resumed_lines.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&head.checkpoint(), &path).unwrap();
        let mut tail = Trainer::from_checkpoint(&corpus, load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(tail.step(), 2);
        tail.run_to(4, |r| {
            resumed_lines.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();

        assert_eq!(full_lines, resumed_lines, "metrics match line for line");
        assert_eq!(full.checkpoint(), tail.checkpoint(), "final states match exactly");
    }

    #[test]
    fn evaluate_identity_oracle_wins_every_trial() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let clips: Vec<MotionSequence> = corpus.iter().map(|s| s.trim(8).unwrap()).collect();
        let report =
            evaluate_with(&corpus, &codec, None, 8, 10, 3, |ix, _, _| Ok(clips[ix].clone()))
                .unwrap();
        assert_eq!(report.trials, 10);
        assert_eq!(report.wins, 10);
        assert_eq!(report.win_rate, 1.0);
        assert_eq!(report.mean_phi_generated, 0.0, "a replayed input is at distance zero");
        assert!(report.mean_phi_cross > 0.0);
    }

    #[test]
    fn evaluate_demands_labels_variety_and_trials() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let single: Vec<MotionSequence> = corpus[..3].to_vec();
        let err = evaluate_with(&single, &codec, None, 8, 5, 3, |_, _, _| unreachable!());
        assert!(matches!(err, Err(Error::DegenerateCorpus(_))));
        let mut unlabeled = corpus.clone();
        unlabeled[0].label = None;
        let err = evaluate_with(&unlabeled, &codec, None, 8, 5, 3, |_, _, _| unreachable!());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = evaluate_with(&corpus, &codec, None, 8, 0, 3, |_, _, _| unreachable!());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err: Result<EvalReport> =
            evaluate_with(&[], &codec, None, 8, 5, 3, |_, _, _| unreachable!());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn evaluate_is_deterministic_for_a_fixed_generator() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let generator = GeneratorNet::init(4, &mut substream(21, "g-init", 0));
        let a = evaluate(&generator, &codec, None, &corpus, 8, 12, 5).unwrap();
        let b = evaluate(&generator, &codec, None, &corpus, 8, 12, 5).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.win_rate));
        assert!(a.mean_phi_generated.is_finite());
    }

    #[test]
    fn d_loss_pinned_flags_only_a_long_flat_window() {
        let mk = |l_d: f64| MetricsRecord {
            step: 0,
            l_d,
            l_g: 1.0,
            l_st: 1.0,
            d_acc_real: 1.0,
            d_acc_fake: 1.0,
            d_acc_hard: None,
            mean_phi: 1.0,
            diversity: 0.0,
        };
        let flat = vec![mk(1.0), mk(1e-5), mk(1e-5), mk(1e-5), mk(1.0)];
        assert!(d_loss_pinned(&flat, 3, 1e-3));
        assert!(!d_loss_pinned(&flat, 4, 1e-3));
        let bouncing = vec![mk(1.0), mk(1e-5), mk(1.0), mk(1e-5)];
        assert!(!d_loss_pinned(&bouncing, 2, 1e-3));
        assert!(!d_loss_pinned(&flat[..2], 3, 1e-3), "short runs cannot satisfy the window");
    }

    #[test]
    fn real_vs_hard_accuracy_is_deterministic_and_bounded() {
        let corpus = tiny_corpus();
        let codec = tiny_codec(&corpus);
        let net = DiscriminatorNet::init(&mut substream(31, "d-init", 0));
        let a = real_vs_hard_accuracy(&net, &codec, &corpus, 8, 17).unwrap();
        let b = real_vs_hard_accuracy(&net, &codec, &corpus, 8, 17).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        assert!(real_vs_hard_accuracy(&net, &codec, &[], 8, 17).is_err());
    }

    #[test]
    fn lambda_grid_covers_the_full_square() {
        let grid = lambda_grid();
        assert_eq!(grid.len(), 25);
        assert_eq!(grid[0], (0.0, 0.0));
        assert_eq!(grid[24], (1.0, 1.0));
        assert!(grid.contains(&(0.5, 0.25)));
    }
}
