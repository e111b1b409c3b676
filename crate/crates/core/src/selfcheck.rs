//! Finite-difference audits of every analytic gradient path.
//!
//! Each suite rebuilds a small fixture at seeded random parameter points,
//! takes the model's analytic gradients, and contracts them against central
//! finite differences. The suites cover the four trainable paths: the pose
//! autoencoder, the generator through kinematics and the sequence losses,
//! the discriminator, and the standalone loss surface.

use crate::codec::{codec_loss_gradients, codec_loss_value, EMBED_WIDTH, LAYER_WIDTHS};
use crate::discriminator::{
    discriminator_forward_backward, DiscriminatorNet, ScoreTarget, DISCRIMINATOR_DROPOUT,
};
use crate::error::Result;
use crate::generator::{
    draw_noise, generator_forward_backward, GeneratorNet, NoiseMode, GENERATOR_DROPOUT,
};
use crate::losses::{positions_to_tensor, st_on_tape, LossConfig};
use crate::math::{Quat, Vec3};
use crate::motion::{MotionSequence, Pose};
use crate::ndl::{gradient_check, NodeId, Tape, Tensor};
use crate::skeleton::{Joint, RotOrder, Skeleton, CANONICAL_JOINT_COUNT};
use crate::train::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Worst relative error any suite may report and still pass.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Random parameter points evaluated per suite.
pub const FD_POINTS: usize = 3;
/// Central-difference step shared by all suites.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Runs every gradient suite at `FD_POINTS` parameter points each.
pub fn gradient_suites(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        autoencoder_suite(seed)?,
        generator_suite(seed)?,
        discriminator_suite(seed)?,
        loss_suite(seed)?,
    ])
}

fn report(suite: &str, max_rel_err: f64) -> SuiteReport {
    SuiteReport {
        suite: suite.to_string(),
        points: FD_POINTS,
        max_rel_err,
        tolerance: FD_TOLERANCE,
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
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
    Pose::new(rotations)
}

fn random_positions(
    rng: &mut ChaCha8Rng,
    frames: usize,
    joints: usize,
    half_range: f64,
) -> Vec<Vec<Vec3>> {
    (0..frames)
        .map(|_| {
            (0..joints)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-half_range..half_range),
                        rng.gen_range(-half_range..half_range),
                        rng.gen_range(-half_range..half_range),
                    )
                })
                .collect()
        })
        .collect()
}

fn autoencoder_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    for point in 0..FD_POINTS {
        let mut rng = substream(seed, "selfcheck-autoencoder", point as u64);
        let poses: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng)).collect();
        let x = crate::codec::poses_to_matrix(&poses)?;
        let mut params: Vec<Tensor> = LAYER_WIDTHS
            .iter()
            .flat_map(|&(fan_in, fan_out)| {
                [
                    Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), &mut rng),
                    Tensor::randn(1, fan_out, 0.1, &mut rng),
                ]
            })
            .collect();
        let (_, analytic) = codec_loss_gradients(&x, &params, 1e-3);
        let err = gradient_check(&mut params, &analytic, FD_STEP, |ps| {
            codec_loss_value(&x, ps, 1e-3)
        });
        worst = worst.max(err);
    }
    Ok(report("autoencoder", worst))
}

/// Canonical rig shrunk to unit scale so the probe critic's activations
/// stay in the well-conditioned band for finite differencing.
fn unit_scale_skeleton() -> Skeleton {
    let mut joints = Skeleton::canonical().joints().to_vec();
    for j in &mut joints {
        j.offset = j.offset.scale(0.02);
        if let Some(e) = j.end_site {
            j.end_site = Some(e.scale(0.02));
        }
    }
    Skeleton::new(joints).expect("scaled canonical rig is valid")
}

fn generator_suite(seed: u64) -> Result<SuiteReport> {
    let skeleton = unit_scale_skeleton();
    let frames = 2;
    let main = [5usize, 6, 18];
    let config = LossConfig::default();
    let mut worst = 0.0f64;
    for point in 0..FD_POINTS {
        let mut rng = substream(seed, "selfcheck-generator", point as u64);
        let net = GeneratorNet::init(4, &mut rng);
        let condition = Tensor::randn(frames, EMBED_WIDTH, 0.5, &mut rng);
        let noise = draw_noise(NoiseMode::PerFrame, frames, &mut rng);
        let reference = MotionSequence::new(
            Skeleton::canonical(),
            (0..frames).map(|_| random_pose(&mut rng)).collect(),
            vec![Vec3::ZERO; frames],
            5.0,
        )?;
        let input_positions: Vec<Vec<Vec3>> = reference
            .all_joint_positions()
            .iter()
            .map(|frame| frame.iter().map(|p| p.scale(0.02)).collect())
            .collect();
        let score_weights = Tensor::randn(frames, 3, 0.1, &mut rng);

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
        )?;

        let mut params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
        let err = gradient_check(&mut params, &step.gradients, FD_STEP, |ps| {
            let net = GeneratorNet::from_parameters(4, GENERATOR_DROPOUT, ps)
                .expect("probe parameters keep the trained shape");
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
            .expect("probe forward stays finite")
            .loss
        });
        worst = worst.max(err);
    }
    Ok(report("generator", worst))
}

fn chain_skeleton() -> Skeleton {
    let joints = ["root", "mid", "tip"]
        .iter()
        .enumerate()
        .map(|(i, name)| Joint {
            name: (*name).into(),
            parent: i.checked_sub(1),
            offset: if i == 0 { Vec3::ZERO } else { Vec3::new(0.3, 0.8, -0.1) },
            rot_order: RotOrder::Zxy,
            end_site: None,
        })
        .collect();
    Skeleton::new(joints).expect("three-joint chain is valid")
}

fn discriminator_suite(seed: u64) -> Result<SuiteReport> {
    let skeleton = chain_skeleton();
    let frames = 4;
    let config = LossConfig::default();
    let mut worst = 0.0f64;
    for point in 0..FD_POINTS {
        let mut rng = substream(seed, "selfcheck-discriminator", point as u64);
        let net = DiscriminatorNet::init(&mut rng);
        let positions = random_positions(&mut rng, frames, skeleton.joints().len(), 100.0);
        let condition = Tensor::randn(frames, EMBED_WIDTH, 0.5, &mut rng);

        let step = discriminator_forward_backward(
            &net,
            &skeleton,
            &positions,
            &condition,
            ScoreTarget::Real { label: 0.9 },
            None,
            &config,
        )?;

        let mut params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
        let err = gradient_check(&mut params, &step.gradients, FD_STEP, |ps| {
            let net = DiscriminatorNet::from_parameters(DISCRIMINATOR_DROPOUT, ps)
                .expect("probe parameters keep the trained shape");
            discriminator_forward_backward(
                &net,
                &skeleton,
                &positions,
                &condition,
                ScoreTarget::Real { label: 0.9 },
                None,
                &config,
            )
            .expect("probe forward stays finite")
            .loss
        });
        worst = worst.max(err);
    }
    Ok(report("discriminator", worst))
}

fn loss_suite(seed: u64) -> Result<SuiteReport> {
    let frames = 6;
    let joints = 4;
    let main: Vec<usize> = (0..joints).collect();
    let fps = 24.0;
    let mut worst = 0.0f64;
    for point in 0..FD_POINTS {
        let mut rng = substream(seed, "selfcheck-loss", point as u64);
        let a = random_positions(&mut rng, frames, joints, 2.0);
        let b = random_positions(&mut rng, frames, joints, 2.0);
        let input: Vec<Tensor> = main.iter().map(|&j| positions_to_tensor(&a, j)).collect();
        let mut params: Vec<Tensor> = main.iter().map(|&j| positions_to_tensor(&b, j)).collect();

        let build = |ps: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut tape = Tape::new();
            let an: Vec<NodeId> = input.iter().map(|t| tape.constant(t.clone())).collect();
            let bn: Vec<NodeId> = ps.iter().map(|t| tape.leaf(t.clone())).collect();
            let st = st_on_tape(&mut tape, &an, &bn, fps, 0.5, 0.5);
            (tape, bn, st)
        };
        let analytic: Vec<Tensor> = {
            let (tape, ids, st) = build(&params);
            let g = tape.backward(st);
            ids.iter().map(|&id| g.get_or_zeros(&tape, id)).collect()
        };
        let err = gradient_check(&mut params, &analytic, FD_STEP, |ps| {
            let (tape, _, st) = build(ps);
            tape.value(st).get(0, 0)
        });
        worst = worst.max(err);
    }
    Ok(report("spatiotemporal-loss", worst))
}
