//! Shared helpers for the integration and acceptance suites.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use stcl::augment::AugmentConfig;
use stcl::contrast::ContrastConfig;
use stcl::data::{gen_synthetic, ClassGenerator, Dataset, SynthSpec};
use stcl::encoder::EncoderConfig;
use stcl::evaluate::EvalSplits;
use stcl::stationarity::{assess_dataset, StationarityLabel};
use stcl::tape::{Tape, Var};
use stcl::tensor::Tensor;
use stcl::train::{pretrain, TrainConfig, TrainRun};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;

// ───────────────────────── ADF oracle fixture ─────────────────────────

#[derive(Debug, Clone)]
pub struct OracleRow {
    pub role: String,
    pub kind: String,
    pub phi: f64,
    pub lag: usize,
    pub stat: f64,
    pub pvalue: f64,
    pub values: Vec<f64>,
}

pub fn load_adf_fixture() -> Vec<OracleRow> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/adf_oracle.tsv");
    let text = std::fs::read_to_string(&path).expect("oracle fixture present");
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 7, "fixture row has 7 fields");
        rows.push(OracleRow {
            role: fields[0].to_string(),
            kind: fields[1].to_string(),
            phi: fields[2].parse().unwrap(),
            lag: fields[3].parse().unwrap(),
            stat: fields[4].parse().unwrap(),
            pvalue: fields[5].parse().unwrap(),
            values: fields[6]
                .split(',')
                .map(|v| v.parse().unwrap())
                .collect(),
        });
    }
    rows
}

// ───────────────────────── finite differences ─────────────────────────

/// Central-difference gradient check of `f` (which must rebuild the graph
/// from scratch on every call) against the tape gradient. The scalar loss is
/// `sum(f(inputs) ⊙ r)` with a fixed random projection `r` so every output
/// coordinate is exercised.
pub fn fd_check(
    name: &str,
    inputs: &[Tensor64],
    seed: u64,
    tol: f64,
    f: impl Fn(&mut Tape64, &[Var]) -> Var,
) {
    let build = |vals: &[Tensor64]| -> (Tape64, Vec<Var>, Var) {
        let mut tape = Tape64::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let mut r = stcl::rng::stream(&[0xFD, seed]);
        let proj = Tensor64::from_fn(tape.value(out).shape().to_vec(), |_| {
            rand::Rng::random_range(&mut r, 0.25..1.0)
        });
        let weighted = tape.mul_const(out, &proj).unwrap();
        let loss = tape.sum(weighted).unwrap();
        (tape, vars, loss)
    };

    let (mut tape, vars, loss) = build(inputs);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).to_vec()).collect();

    let eval = |vals: &[Tensor64]| -> f64 {
        let (tape, _, loss) = build(vals);
        tape.value(loss).item().unwrap()
    };

    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let x = t.data()[ci];
            let h = 1e-5 * x.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ci] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ci] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads[ti][ci];
            let err = (ad - fd).abs() / fd.abs().max(1.0);
            assert!(
                err <= tol,
                "{}: input {} coord {}: ad {} vs fd {} (rel err {:.2e} > {:.2e}, seed {})",
                name,
                ti,
                ci,
                ad,
                fd,
                err,
                tol,
                seed
            );
        }
    }
}

/// Values bounded away from 0 and from each other, for kinked ops (relu,
/// max pooling): magnitudes in ±[0.2, 1.2] plus a distinct per-coordinate
/// offset so windows never tie.
pub fn kink_free(shape: Vec<usize>, seed: u64) -> Tensor64 {
    let mut r = stcl::rng::stream(&[0xA1, seed]);
    Tensor64::from_fn(shape, |i| {
        let mag: f64 = rand::Rng::random_range(&mut r, 0.2..1.2);
        let sign = if rand::Rng::random_range(&mut r, 0..2) == 0 {
            -1.0
        } else {
            1.0
        };
        sign * mag + (i % 97) as f64 * 7e-3
    })
}

pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor64 {
    let mut r = stcl::rng::stream(&[0xA2, seed]);
    Tensor64::from_fn(shape, |_| rand::Rng::random_range(&mut r, lo..hi))
}

// ───────────────────────── corpora ─────────────────────────

/// The two-class desk corpus: 2000 segments of length 179, stationary
/// AR(1) against random walks, 20 segments per recording.
pub fn desk_spec() -> SynthSpec {
    SynthSpec {
        name: "desk2".into(),
        n_segments: 2000,
        segment_len: 179,
        channels: 1,
        segments_per_recording: 20,
        run_length_mean: 5.0,
        classes: vec![
            ClassGenerator::Ar1 { phi: 0.5, sigma: 1.0 },
            ClassGenerator::RandomWalk { sigma: 1.0 },
        ],
        seed: 7,
        split_proportions: (0.6, 0.2, 0.2),
        stratify: true,
    }
}

pub fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        channels: vec![8, 16, 32],
        kernel_sizes: vec![8, 8, 8],
        paddings: vec![4, 4, 4],
        pool_windows: vec![2, 2, 2],
        output_dim: 64,
    }
}

pub fn desk_contrast() -> ContrastConfig<f64> {
    ContrastConfig {
        horizon: 20,
        ..ContrastConfig::default()
    }
}

pub fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        epochs,
        seed: 42,
        ..TrainConfig::default()
    }
}

pub const DESK_ADF_THRESHOLD: f64 = 0.01;
pub const DESK_ADF_LAG: usize = 4;

/// Shared 40-epoch desk-scale pipeline output, computed once per process.
pub struct DeskRun {
    pub dataset: Dataset<f64>,
    pub states: Vec<StationarityLabel>,
    pub run: TrainRun<f64>,
    pub embeddings: Tensor64,
    pub labels: Vec<usize>,
    pub splits: EvalSplits,
    pub pretrain_seconds: f64,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

pub fn desk_run() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let mut dataset = gen_synthetic::<f64>(&desk_spec()).unwrap();
        dataset.apply_normalization().unwrap();
        let states = assess_dataset(&dataset.segments, DESK_ADF_THRESHOLD, Some(DESK_ADF_LAG))
            .unwrap()
            .labels();
        let t0 = std::time::Instant::now();
        let run = pretrain(
            &dataset,
            &states,
            &desk_encoder(),
            &AugmentConfig::default(),
            &desk_contrast(),
            &desk_train(40),
            None,
        )
        .unwrap();
        let pretrain_seconds = t0.elapsed().as_secs_f64();
        let embeddings =
            stcl::evaluate::embed_all(&desk_encoder(), &run.params, &dataset, 256).unwrap();
        let labels: Vec<usize> = dataset.segments.iter().map(|s| s.label.unwrap()).collect();
        let splits = EvalSplits::from_dataset(&dataset);
        DeskRun {
            dataset,
            states,
            run,
            embeddings,
            labels,
            splits,
            pretrain_seconds,
        }
    })
}

/// Tiny labeled corpus for fast determinism and persistence checks.
pub fn tiny_corpus(seed: u64) -> Dataset<f64> {
    let spec = SynthSpec {
        name: "tiny".into(),
        n_segments: 48,
        segment_len: 48,
        channels: 1,
        segments_per_recording: 8,
        run_length_mean: 3.0,
        classes: vec![
            ClassGenerator::Ar1 { phi: 0.5, sigma: 1.0 },
            ClassGenerator::RandomWalk { sigma: 1.0 },
        ],
        seed,
        split_proportions: (1.0, 0.0, 0.0),
        stratify: false,
    };
    let mut d = gen_synthetic(&spec).unwrap();
    d.apply_normalization().unwrap();
    d
}

pub fn states_from_classes(d: &Dataset<f64>) -> Vec<StationarityLabel> {
    d.segments
        .iter()
        .map(|s| StationarityLabel {
            non_stationary: s.label == Some(1),
            threshold_used: DESK_ADF_THRESHOLD,
        })
        .collect()
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        channels: vec![3, 4, 5],
        kernel_sizes: vec![8, 8, 8],
        paddings: vec![4, 4, 4],
        pool_windows: vec![2, 2, 2],
        output_dim: 8,
    }
}
