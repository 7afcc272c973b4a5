//! Self-supervised pretraining loop.
//!
//! Per epoch: shuffle the train-split segment indices (seeded by epoch, so a
//! resumed run replays the identical schedule), form fixed-size batches
//! (dropping the last incomplete one), build the two augmented views, encode
//! both, build the pair structure from the precomputed stationarity states,
//! and take one Adam step on the combined loss per batch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::augment::{make_views, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::contrast::{build_pair_structure, combined_loss, ContrastConfig};
use crate::data::{Dataset, Segment, Split};
use crate::encoder::{encode, encoder_init, register_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::{self, TAG_SHUFFLE};
use crate::scalar::Real;
use crate::stationarity::{assess_dataset, StationarityLabel};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Save `ckpt-epoch-N.bin` every this many epochs; 0 saves only the final
    /// checkpoint.
    pub checkpoint_every: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 150,
            lr: 3e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 42,
            checkpoint_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 so anchors can have negatives",
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn adam<F: Real>(&self) -> AdamConfig<F> {
        AdamConfig {
            lr: F::of(self.lr),
            beta1: F::of(self.beta1),
            beta2: F::of(self.beta2),
            eps: F::of(self.eps),
            weight_decay: F::of(self.weight_decay),
        }
    }
}

/// Per-epoch loss breakdown as written to the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub nc: f64,
    pub tc: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun<F> {
    pub params: EncoderParams<F>,
    pub adam: AdamState<F>,
    pub epochs_done: usize,
    pub log: Vec<EpochStats>,
}

/// The batch composition of one epoch: a seeded permutation of `indices`
/// chunked into full batches, the incomplete remainder dropped. Pure in
/// (indices, config, epoch), which is what lets the auditor replay training.
pub fn batch_schedule(
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = indices.to_vec();
    if shuffle {
        let mut r = rng::stream(&[TAG_SHUFFLE, seed, epoch]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut r, 0..=i);
            order.swap(i, j);
        }
    }
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

fn checkpoint_from<F: Real>(
    params: &EncoderParams<F>,
    adam: &AdamState<F>,
    epochs_done: usize,
) -> Checkpoint<F> {
    Checkpoint {
        epochs_done: epochs_done as u32,
        params: params.tensors.clone(),
        optimizer: Some(adam.clone()),
    }
}

pub const TRAIN_LOG_HEADER: &str = "epoch\tL\tL_NC\tL_TC\twall_time";

fn append_log_line(path: &Path, stats: &EpochStats, write_header: bool) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    if write_header {
        writeln!(f, "{}", TRAIN_LOG_HEADER).map_err(io)?;
    }
    writeln!(
        f,
        "{}\t{}\t{}\t{}\t{:.3}",
        stats.epoch, stats.loss, stats.nc, stats.tc, stats.wall_time
    )
    .map_err(io)
}

struct Trainer<'a, F: Real> {
    dataset: &'a Dataset<F>,
    states: &'a [StationarityLabel],
    enc_cfg: &'a EncoderConfig,
    aug_cfg: &'a AugmentConfig,
    con_cfg: &'a ContrastConfig<F>,
    train_cfg: &'a TrainConfig,
    out_dir: Option<&'a Path>,
}

impl<'a, F: Real> Trainer<'a, F> {
    fn validate(&self) -> Result<Vec<usize>> {
        self.train_cfg.validate()?;
        self.enc_cfg.validate()?;
        self.aug_cfg.validate()?;
        self.con_cfg.validate()?;
        if self.dataset.segments.is_empty() {
            return Err(Error::config("cannot pretrain on an empty dataset"));
        }
        if self.states.len() != self.dataset.segments.len() {
            return Err(Error::config(format!(
                "{} stationarity states for {} segments; run the assessment first",
                self.states.len(),
                self.dataset.segments.len()
            )));
        }
        let train_indices = self.dataset.split_segments(Split::Train);
        if train_indices.len() < self.train_cfg.batch_size {
            return Err(Error::config(format!(
                "train split has {} segments, smaller than one batch of {}",
                train_indices.len(),
                self.train_cfg.batch_size
            )));
        }
        self.enc_cfg.stage_lengths(self.dataset.segment_len)?;
        Ok(train_indices)
    }

    fn channel_std(&self) -> Vec<F> {
        if self.dataset.normalized {
            vec![F::one(); self.dataset.channels]
        } else {
            self.dataset
                .normalization
                .std
                .iter()
                .map(|&s| F::of(s))
                .collect()
        }
    }

    fn run(
        &self,
        mut values: Vec<crate::tensor::Tensor<F>>,
        names: Vec<String>,
        mut adam: AdamState<F>,
        start_epoch: usize,
        prior_log: Vec<EpochStats>,
    ) -> Result<TrainRun<F>> {
        let train_indices = self.validate()?;
        let adam_cfg = self.train_cfg.adam::<F>();
        let channel_std = self.channel_std();
        let log_path = self.out_dir.map(|d| d.join("train_log.tsv"));
        let mut log = prior_log;

        for epoch in start_epoch..self.train_cfg.epochs {
            let t0 = Instant::now();
            let batches = batch_schedule(
                &train_indices,
                self.train_cfg.batch_size,
                self.train_cfg.seed,
                epoch as u64,
                self.train_cfg.shuffle,
            );
            let mut sum_total = 0.0f64;
            let mut sum_nc = 0.0f64;
            let mut sum_tc = 0.0f64;
            for batch in &batches {
                let segs: Vec<&Segment<F>> =
                    batch.iter().map(|&i| &self.dataset.segments[i]).collect();
                let labels: Vec<StationarityLabel> =
                    batch.iter().map(|&i| self.states[i]).collect();
                let views = make_views(
                    &segs,
                    &labels,
                    self.aug_cfg,
                    &channel_std,
                    self.train_cfg.seed,
                    epoch as u64,
                )?;
                let structure = build_pair_structure(&views.labels, &views.meta, self.con_cfg)?;

                let mut tape = Tape::new();
                let params_now = EncoderParams {
                    tensors: names
                        .iter()
                        .cloned()
                        .zip(values.iter().cloned())
                        .collect(),
                };
                let vars = register_params(&mut tape, &params_now);
                let xa = tape.leaf(views.view_a);
                let xb = tape.leaf(views.view_b);
                let za = encode(&mut tape, self.enc_cfg, &vars, xa)?;
                let zb = encode(&mut tape, self.enc_cfg, &vars, xb)?;
                let (total, bd) = combined_loss(&mut tape, za, zb, &structure, self.con_cfg)?;
                tape.backward(total)?;
                let grads: Vec<&[F]> = vars.iter().map(|v| tape.grad(*v)).collect();
                adam_step(&mut values, &grads, &mut adam, &adam_cfg)?;

                sum_total += bd.total.as_f64();
                sum_nc += bd.nc.as_f64();
                sum_tc += bd.tc.as_f64();
            }
            let nb = batches.len().max(1) as f64;
            let stats = EpochStats {
                epoch: epoch + 1,
                loss: sum_total / nb,
                nc: sum_nc / nb,
                tc: sum_tc / nb,
                wall_time: t0.elapsed().as_secs_f64(),
            };
            if let Some(p) = &log_path {
                append_log_line(p, &stats, epoch == 0)?;
            }
            log.push(stats);

            let params_now = EncoderParams {
                tensors: names
                    .iter()
                    .cloned()
                    .zip(values.iter().cloned())
                    .collect(),
            };
            if let Some(dir) = self.out_dir {
                let every = self.train_cfg.checkpoint_every;
                if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < self.train_cfg.epochs {
                    checkpoint_from(&params_now, &adam, epoch + 1)
                        .save(&dir.join(format!("ckpt-epoch-{}.bin", epoch + 1)))?;
                }
            }
        }

        let params = EncoderParams {
            tensors: names.into_iter().zip(values).collect(),
        };
        if let Some(dir) = self.out_dir {
            checkpoint_from(&params, &adam, self.train_cfg.epochs)
                .save(&dir.join("ckpt-final.bin"))?;
        }
        Ok(TrainRun {
            params,
            adam,
            epochs_done: self.train_cfg.epochs,
            log,
        })
    }
}

/// Pretrain from a fresh initialization. `states` must hold one label per
/// dataset segment (assessment is a one-time preprocessing pass). When
/// `out_dir` is given, the training log and checkpoints are written there.
#[allow(clippy::too_many_arguments)]
pub fn pretrain<F: Real>(
    dataset: &Dataset<F>,
    states: &[StationarityLabel],
    enc_cfg: &EncoderConfig,
    aug_cfg: &AugmentConfig,
    con_cfg: &ContrastConfig<F>,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRun<F>> {
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
        let log = d.join("train_log.tsv");
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(log.display().to_string(), e))?;
        }
    }
    let trainer = Trainer {
        dataset,
        states,
        enc_cfg,
        aug_cfg,
        con_cfg,
        train_cfg,
        out_dir,
    };
    let params: EncoderParams<F> = encoder_init(enc_cfg, train_cfg.seed)?;
    let names: Vec<String> = params.tensors.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<_> = params.tensors.iter().map(|(_, t)| t.clone()).collect();
    let adam = AdamState::new(&values);
    trainer.run(values, names, adam, 0, Vec::new())
}

/// Continue training from a checkpoint up to `train_cfg.epochs` total epochs.
/// Because every random decision is keyed by (seed, epoch), the continuation
/// is bitwise identical to an uninterrupted run.
#[allow(clippy::too_many_arguments)]
pub fn resume<F: Real>(
    ckpt_path: &Path,
    dataset: &Dataset<F>,
    states: &[StationarityLabel],
    enc_cfg: &EncoderConfig,
    aug_cfg: &AugmentConfig,
    con_cfg: &ContrastConfig<F>,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRun<F>> {
    let ckpt: Checkpoint<F> = Checkpoint::load(ckpt_path)?;
    let params = EncoderParams {
        tensors: ckpt.params,
    };
    params.check_shapes(enc_cfg)?;
    let adam = ckpt.optimizer.ok_or_else(|| {
        Error::format(
            ckpt_path.display().to_string(),
            "checkpoint has no optimizer state; cannot resume",
        )
    })?;
    let epochs_done = ckpt.epochs_done as usize;
    if epochs_done >= train_cfg.epochs {
        return Err(Error::config(format!(
            "checkpoint already covers {} epochs, target is {}",
            epochs_done, train_cfg.epochs
        )));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    let trainer = Trainer {
        dataset,
        states,
        enc_cfg,
        aug_cfg,
        con_cfg,
        train_cfg,
        out_dir,
    };
    let names: Vec<String> = params.tensors.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<_> = params.tensors.into_iter().map(|(_, t)| t).collect();
    trainer.run(values, names, adam, epochs_done, Vec::new())
}

/// Stationarity assessment with a disk cache keyed by dataset hash,
/// threshold and lag. The assessment is pure preprocessing, so cache hits
/// are exact.
pub fn cached_assessment<F: Real>(
    dataset: &Dataset<F>,
    threshold: f64,
    lag_order: Option<usize>,
    cache_dir: &Path,
) -> Result<Vec<StationarityLabel>> {
    let key = format!(
        "adf-{}-t{}-l{}.tsv",
        dataset.content_hash(),
        threshold,
        lag_order.map(|l| l.to_string()).unwrap_or_else(|| "auto".into())
    );
    let path = cache_dir.join(key);
    if path.exists() {
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut states = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (id, st) = match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("line {}: expected 'id<TAB>state'", lineno + 1),
                    ))
                }
            };
            let _: usize = id.parse().map_err(|_| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}: bad id", lineno + 1),
                )
            })?;
            states.push(StationarityLabel {
                non_stationary: st == "1",
                threshold_used: threshold,
            });
        }
        if states.len() == dataset.segments.len() {
            return Ok(states);
        }
        log::warn!("stale assessment cache {}; recomputing", path.display());
    }
    let assessed = assess_dataset(&dataset.segments, threshold, lag_order)?;
    let states = assessed.labels();
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir.display().to_string(), e))?;
    let mut body = String::new();
    for (i, s) in states.iter().enumerate() {
        body.push_str(&format!("{}\t{}\n", i, s.state()));
    }
    fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(states)
}

/// Output paths of a training run directory.
pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ckpt-final.bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, ClassGenerator, SynthSpec};

    fn tiny_dataset() -> Dataset<f64> {
        let spec = SynthSpec {
            name: "train-unit".into(),
            n_segments: 24,
            segment_len: 32,
            channels: 1,
            segments_per_recording: 4,
            run_length_mean: 2.0,
            classes: vec![
                ClassGenerator::Ar1 { phi: 0.5, sigma: 1.0 },
                ClassGenerator::RandomWalk { sigma: 1.0 },
            ],
            seed: 3,
            split_proportions: (1.0, 0.0, 0.0),
            stratify: false,
        };
        let mut d = gen_synthetic(&spec).unwrap();
        d.apply_normalization().unwrap();
        d
    }

    fn fake_states(d: &Dataset<f64>) -> Vec<StationarityLabel> {
        d.segments
            .iter()
            .map(|s| StationarityLabel {
                non_stationary: s.label == Some(1),
                threshold_used: 0.01,
            })
            .collect()
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            channels: vec![3, 4, 5],
            kernel_sizes: vec![8, 8, 8],
            paddings: vec![4, 4, 4],
            pool_windows: vec![2, 2, 2],
            output_dim: 8,
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_is_deterministic_and_drops_remainder() {
        let idx: Vec<usize> = (0..23).collect();
        let a = batch_schedule(&idx, 8, 1, 0, true);
        let b = batch_schedule(&idx, 8, 1, 0, true);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|batch| batch.len() == 8));
        let c = batch_schedule(&idx, 8, 1, 1, true);
        assert_ne!(a, c);
        // the scheduled indices are a subset of the input without repeats
        let mut seen: Vec<usize> = a.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let d = tiny_dataset();
        let states = fake_states(&d);
        let run1 = pretrain(
            &d,
            &states,
            &tiny_encoder(),
            &AugmentConfig::default(),
            &ContrastConfig::default(),
            &tiny_train(2),
            None,
        )
        .unwrap();
        let run2 = pretrain(
            &d,
            &states,
            &tiny_encoder(),
            &AugmentConfig::default(),
            &ContrastConfig::default(),
            &tiny_train(2),
            None,
        )
        .unwrap();
        assert_eq!(run1.params, run2.params);
        assert_eq!(run1.log.len(), 2);
        for (a, b) in run1.log.iter().zip(&run2.log) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.nc, b.nc);
            assert_eq!(a.tc, b.tc);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let d = tiny_dataset();
        let states = fake_states(&d);
        let enc = tiny_encoder();
        let aug = AugmentConfig::default();
        let con = ContrastConfig::default();

        let full = pretrain(&d, &states, &enc, &aug, &con, &tiny_train(4), None).unwrap();

        let dir = std::env::temp_dir().join("stcl-train-resume");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let _half = pretrain(&d, &states, &enc, &aug, &con, &tiny_train(2), Some(&dir)).unwrap();
        let resumed = resume(
            &dir.join("ckpt-final.bin"),
            &d,
            &states,
            &enc,
            &aug,
            &con,
            &tiny_train(4),
            None,
        )
        .unwrap();
        assert_eq!(full.params, resumed.params);
        assert_eq!(full.adam, resumed.adam);
    }

    #[test]
    fn resume_with_changed_encoder_config_errors() {
        let d = tiny_dataset();
        let states = fake_states(&d);
        let enc = tiny_encoder();
        let dir = std::env::temp_dir().join("stcl-train-resume-shape");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        pretrain(
            &d,
            &states,
            &enc,
            &AugmentConfig::default(),
            &ContrastConfig::default(),
            &tiny_train(1),
            Some(&dir),
        )
        .unwrap();
        let mut other = enc.clone();
        other.channels = vec![4, 4, 4];
        let err = resume(
            &dir.join("ckpt-final.bin"),
            &d,
            &states,
            &other,
            &AugmentConfig::default(),
            &ContrastConfig::default(),
            &tiny_train(2),
            None,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn lambda_one_trajectory_is_the_nc_only_trajectory() {
        // at λ=1 the tc term is multiplied by exactly 0, so the recorded
        // total equals the nc component bitwise at every epoch
        let d = tiny_dataset();
        let states = fake_states(&d);
        let con = ContrastConfig {
            lambda: 1.0,
            ..ContrastConfig::default()
        };
        let run = pretrain(
            &d,
            &states,
            &tiny_encoder(),
            &AugmentConfig::default(),
            &con,
            &tiny_train(3),
            None,
        )
        .unwrap();
        for s in &run.log {
            assert_eq!(s.loss, s.nc, "epoch {}", s.epoch);
        }
    }

    #[test]
    fn single_state_batches_are_legal() {
        let d = tiny_dataset();
        // every segment non-stationary: nc contributes no negatives
        let states: Vec<StationarityLabel> = d
            .segments
            .iter()
            .map(|_| StationarityLabel {
                non_stationary: true,
                threshold_used: 0.01,
            })
            .collect();
        let run = pretrain(
            &d,
            &states,
            &tiny_encoder(),
            &AugmentConfig::default(),
            &ContrastConfig::default(),
            &tiny_train(1),
            None,
        )
        .unwrap();
        assert_eq!(run.log[0].nc, 0.0);
        assert!(run.log[0].tc > 0.0);
    }

    #[test]
    fn one_small_step_descends_on_a_frozen_batch() {
        let d = tiny_dataset();
        let states = fake_states(&d);
        let enc = tiny_encoder();
        let con = ContrastConfig::default();
        let aug = AugmentConfig::default();
        let params: EncoderParams<f64> = encoder_init(&enc, 11).unwrap();
        let mut values: Vec<_> = params.tensors.iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<String> = params.tensors.iter().map(|(n, _)| n.clone()).collect();
        let mut adam = AdamState::new(&values);
        let adam_cfg = AdamConfig {
            lr: 1e-5,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };

        let idx: Vec<usize> = (0..8).collect();
        let segs: Vec<&Segment<f64>> = idx.iter().map(|&i| &d.segments[i]).collect();
        let labels: Vec<StationarityLabel> = idx.iter().map(|&i| states[i]).collect();
        let views = make_views(&segs, &labels, &aug, &[1.0], 5, 0).unwrap();
        let structure = build_pair_structure(&views.labels, &views.meta, &con).unwrap();

        let loss_of = |values: &[crate::tensor::Tensor<f64>]| {
            let mut tape = Tape::new();
            let p = EncoderParams {
                tensors: names.iter().cloned().zip(values.to_vec()).collect(),
            };
            let vars = register_params(&mut tape, &p);
            let xa = tape.leaf(views.view_a.clone());
            let xb = tape.leaf(views.view_b.clone());
            let za = encode(&mut tape, &enc, &vars, xa).unwrap();
            let zb = encode(&mut tape, &enc, &vars, xb).unwrap();
            let (total, bd) = combined_loss(&mut tape, za, zb, &structure, &con).unwrap();
            (tape, vars, total, bd.total)
        };

        let (mut tape, vars, total, before) = loss_of(&values);
        tape.backward(total).unwrap();
        let vars_grads: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).to_vec()).collect();
        let grads: Vec<&[f64]> = vars_grads.iter().map(|g| g.as_slice()).collect();
        adam_step(&mut values, &grads, &mut adam, &adam_cfg).unwrap();
        let (_, _, _, after) = loss_of(&values);
        assert!(after < before, "loss {} -> {}", before, after);
    }
}
