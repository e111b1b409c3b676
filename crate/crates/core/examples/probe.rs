//! Temporary calibration probe for the full-scale training run.

use animsynth::augment::{synth_hard_negative, HardNegativeKind};
use animsynth::codec::{encode_poses, train_autoencoder, CodecConfig, PoseEmbedding};
use animsynth::discriminator::{discriminate, DiscriminatorNet};
use animsynth::generator::GeneratorNet;
use animsynth::motion::{MotionSequence, Pose};
use animsynth::train::{
    d_loss_pinned, evaluate, make_toy_corpus, real_vs_hard_accuracy, split_dataset, substream,
    MetricsRecord, TrainConfig, Trainer,
};
use animsynth::codec::AutoencoderModel;
use rand::Rng;
use std::time::Instant;

fn kind_scores(
    net: &DiscriminatorNet,
    codec: &AutoencoderModel,
    held: &[MotionSequence],
    frames: usize,
    seed: u64,
) {
    let kinds =
        [HardNegativeKind::Reversal, HardNegativeKind::BigNoise, HardNegativeKind::Bounce];
    let mut real_sum = 0.0;
    let mut real_ok = 0usize;
    let mut sums = [0.0f64; 3];
    let mut oks = [0usize; 3];
    for (i, item) in held.iter().enumerate() {
        let trimmed = item.trim(frames).unwrap();
        let condition = encode_poses(codec, trimmed.frames()).unwrap();
        let embeddings: Vec<PoseEmbedding> = (0..condition.rows())
            .map(|r| PoseEmbedding::new(condition.row(r).to_vec()).unwrap())
            .collect();
        let s = discriminate(net, trimmed.skeleton(), &trimmed.all_joint_positions(), &embeddings, None)
            .unwrap();
        real_sum += s;
        real_ok += (s > 0.5) as usize;
        let mut rng = substream(seed, "hard-eval", i as u64);
        for (k, kind) in kinds.iter().enumerate() {
            let neg = synth_hard_negative(&trimmed, *kind, rng.gen()).unwrap();
            let s = discriminate(net, trimmed.skeleton(), &neg.all_joint_positions(), &embeddings, None)
                .unwrap();
            sums[k] += s;
            oks[k] += (s < 0.5) as usize;
        }
    }
    let n = held.len() as f64;
    println!(
        "  real   : mean {:.4} acc {:.3}",
        real_sum / n,
        real_ok as f64 / n
    );
    for (k, name) in ["reversal", "big_noise", "bounce"].iter().enumerate() {
        println!("  {:<8}: mean {:.4} acc {:.3}", name, sums[k] / n, oks[k] as f64 / n);
    }
}

fn main() {
    let t0 = Instant::now();
    let corpus = make_toy_corpus(2, 100, 30, 0).unwrap();
    println!("corpus: {} sequences, {:.2?}", corpus.len(), t0.elapsed());

    let (train, held) = split_dataset(&corpus, 20, 0).unwrap();
    let arm = held.iter().filter(|s| s.label.as_deref() == Some("left-arm-wave")).count();
    println!("held: {} ({} arm, {} leg)", held.len(), arm, held.len() - arm);

    let t1 = Instant::now();
    let poses: Vec<Pose> = train.iter().flat_map(|s| s.frames().to_vec()).collect();
    let codec_cfg = CodecConfig { learning_rate: 0.05, epochs: 200, beta: 1e-3, dropout: 0.0, seed: 0 };
    let (codec, stats) = train_autoencoder(&poses, &codec_cfg).unwrap();
    println!(
        "codec: {} poses, {} epochs, final loss {:.6}, {:.2?}",
        poses.len(),
        stats.len(),
        stats.last().unwrap().loss,
        t1.elapsed()
    );

    // Untrained generator baseline on the held-out split.
    let t2 = Instant::now();
    let g0 = GeneratorNet::init(64, &mut substream(0, "g-init", 0));
    let base = evaluate(&g0, &codec, None, &held, 30, 100, 0).unwrap();
    println!(
        "untrained: win_rate {:.3}, phi_gen {:.3}, phi_cross {:.3}, {:.2?}",
        base.win_rate, base.mean_phi_generated, base.mean_phi_cross, t2.elapsed()
    );

    let config = TrainConfig {
        hard_negative_period: std::env::var("HARD_PERIOD").map(|v| v.parse().unwrap()).unwrap_or(5),
        hard_negative_fraction: std::env::var("HARD_FRACTION")
            .map(|v| v.parse().unwrap())
            .unwrap_or(0.25),
        ..TrainConfig::default()
    };
    println!(
        "hard negatives: period {} fraction {}",
        config.hard_negative_period, config.hard_negative_fraction
    );
    let t3 = Instant::now();
    let mut trainer = Trainer::new(&train, codec.clone(), None, config).unwrap();
    println!("trainer built (cache) in {:.2?}", t3.elapsed());

    let mut records: Vec<MetricsRecord> = Vec::new();
    let t4 = Instant::now();
    let mut last = Instant::now();
    trainer
        .run_to(500, |r| {
            records.push(r.clone());
            if (r.step + 1) % 25 == 0 {
                println!(
                    "step {:>3}: l_d {:>8.4} l_g {:>10.2} l_st {:>10.2} acc_r {:.2} acc_f {:.2} acc_h {} phi {:>9.2} div {:.4} ({:.2?}/25)",
                    r.step + 1, r.l_d, r.l_g, r.l_st, r.d_acc_real, r.d_acc_fake,
                    r.d_acc_hard.map_or("  - ".into(), |a| format!("{a:.2}")),
                    r.mean_phi, r.diversity,
                    last.elapsed()
                );
                last = Instant::now();
            }
            Ok(())
        })
        .unwrap();
    let train_time = t4.elapsed();
    println!("500 steps in {:.2?} ({:.3?}/step)", train_time, train_time / 500);

    let t5 = Instant::now();
    let acc = real_vs_hard_accuracy(trainer.discriminator(), &codec, &held, 30, 0).unwrap();
    println!("real-vs-hard accuracy: {:.3} ({:.2?})", acc, t5.elapsed());
    kind_scores(trainer.discriminator(), &codec, &held, 30, 0);

    let t6 = Instant::now();
    let report = evaluate(trainer.generator(), &codec, None, &held, 30, 100, 0).unwrap();
    println!(
        "trained: win_rate {:.3}, phi_gen {:.3}, phi_cross {:.3}, {:.2?}",
        report.win_rate, report.mean_phi_generated, report.mean_phi_cross, t6.elapsed()
    );
    println!("d_loss pinned-at-zero (50, 1e-3): {}", d_loss_pinned(&records, 50, 1e-3));
    println!("total {:.2?}", t0.elapsed());
}
