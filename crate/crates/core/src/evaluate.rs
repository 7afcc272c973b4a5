//! Evaluation: linear probe on frozen embeddings, classification metrics,
//! the false-negative-pair auditor, and the label-scarcity protocol.
//!
//! The auditor replays a training batch schedule and tallies, per pair
//! policy, how many supposed negatives actually share a downstream class.
//! It is read-only: nothing here feeds back into training.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::contrast::{build_pair_structure, ContrastConfig, PairStructure};
use crate::data::{Dataset, SegmentMeta, Split};
use crate::encoder::{encode_values, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::{self, TAG_PROBE, TAG_SUBSAMPLE};
use crate::scalar::Real;
use crate::stationarity::StationarityLabel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ───────────────────────── metrics ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    /// Number of test samples of this class.
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: f64,
    /// False when the class is absent from the test labels; such classes are
    /// excluded from the macro averages.
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    /// One-vs-rest average precision, macro over defined classes.
    pub auprc: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Average precision by step integration of the precision-recall curve:
/// `Σ (R_i − R_{i−1})·P_i` over descending score thresholds (ties grouped).
fn average_precision(scores: &[f64], positives: &[bool]) -> f64 {
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Standard multiclass metrics. `scores` holds one row of per-class scores
/// per sample (softmax probabilities or any monotone ranking score).
pub fn metrics(predictions: &[usize], labels: &[usize], scores: &[Vec<f64>]) -> Result<ProbeResult> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract("metrics on empty input".into()));
    }
    if predictions.len() != n || scores.len() != n {
        return Err(Error::shape(format!(
            "metrics arrays disagree: {} predictions, {} labels, {} score rows",
            predictions.len(),
            n,
            scores.len()
        )));
    }
    let n_classes = scores[0].len();
    if scores.iter().any(|r| r.len() != n_classes) {
        return Err(Error::shape("ragged score rows"));
    }
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&c| c >= n_classes) {
        return Err(Error::shape(format!(
            "class {} out of range for {} score columns",
            bad, n_classes
        )));
    }

    let accuracy = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / n as f64;

    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let support = labels.iter().filter(|&&l| l == c).count();
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == c && l == c)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == c && l != c)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p != c && l == c)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let auprc = average_precision(&col, &pos);
        let defined = support > 0;
        if !defined {
            log::warn!("class {} absent from the test labels; excluded from macro averages", c);
        }
        per_class.push(ClassMetrics {
            class: c,
            support,
            precision,
            recall,
            f1,
            auprc,
            defined,
        });
    }
    let defined: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.defined).collect();
    if defined.is_empty() {
        return Err(Error::Contract("no class has test support".into()));
    }
    let k = defined.len() as f64;
    Ok(ProbeResult {
        accuracy,
        macro_f1: defined.iter().map(|m| m.f1).sum::<f64>() / k,
        macro_recall: defined.iter().map(|m| m.recall).sum::<f64>() / k,
        auprc: defined.iter().map(|m| m.auprc).sum::<f64>() / k,
        per_class,
    })
}

// ───────────────────────── linear probe ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            epochs: 100,
            weight_decay: 1e-4,
            batch_size: 256,
        }
    }
}

/// Segment indices of the three evaluation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl EvalSplits {
    pub fn from_dataset<F: Real>(dataset: &Dataset<F>) -> Self {
        EvalSplits {
            train: dataset.split_segments(Split::Train),
            val: dataset.split_segments(Split::Val),
            test: dataset.split_segments(Split::Test),
        }
    }
}

fn gather_rows<F: Real>(embeddings: &Tensor<F>, idx: &[usize]) -> Result<Tensor<F>> {
    let (_n, d) = embeddings.dims2()?;
    let src = embeddings.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out)
}

fn argmax_rows<F: Real>(logits: &Tensor<F>) -> Result<Vec<usize>> {
    let (n, c) = logits.dims2()?;
    let d = logits.data();
    Ok((0..n)
        .map(|i| {
            let row = &d[i * c..(i + 1) * c];
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

struct ProbeModel<F> {
    weight: Tensor<F>,
    bias: Tensor<F>,
}

impl<F: Real> ProbeModel<F> {
    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        let h = tape.matmul(xv, w)?;
        let out = tape.add_bias(h, b)?;
        Ok(tape.value(out).clone())
    }

    fn softmax_scores(&self, x: &Tensor<F>) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(x)?;
        let (n, c) = logits.dims2()?;
        let d = logits.data();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp().as_f64()).collect();
            let total: f64 = exps.iter().sum();
            rows.push(exps.into_iter().map(|e| e / total).collect());
        }
        Ok(rows)
    }

    fn accuracy(&self, x: &Tensor<F>, labels: &[usize]) -> Result<f64> {
        let preds = argmax_rows(&self.logits(x)?)?;
        Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Multinomial logistic regression on frozen embeddings, trained with Adam
/// on the train split, selected by validation accuracy, reported on the test
/// split.
pub fn linear_probe<F: Real>(
    embeddings: &Tensor<F>,
    labels: &[usize],
    splits: &EvalSplits,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (n, d) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            n
        )));
    }
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::config("probe needs non-empty train and test splits"));
    }
    let mut train_classes: Vec<usize> = splits.train.iter().map(|&i| labels[i]).collect();
    train_classes.sort_unstable();
    train_classes.dedup();
    if train_classes.len() < 2 {
        return Err(Error::config(
            "probe train split must contain at least 2 classes",
        ));
    }
    let n_classes = labels.iter().max().unwrap() + 1;

    let x_train = gather_rows(embeddings, &splits.train)?;
    let y_train: Vec<usize> = splits.train.iter().map(|&i| labels[i]).collect();
    let x_val = gather_rows(embeddings, &splits.val)?;
    let y_val: Vec<usize> = splits.val.iter().map(|&i| labels[i]).collect();
    let x_test = gather_rows(embeddings, &splits.test)?;
    let y_test: Vec<usize> = splits.test.iter().map(|&i| labels[i]).collect();

    let mut model = ProbeModel {
        weight: Tensor::zeros(vec![d, n_classes]),
        bias: Tensor::zeros(vec![n_classes]),
    };
    let mut values = vec![model.weight.clone(), model.bias.clone()];
    let mut adam = AdamState::new(&values);
    let adam_cfg = AdamConfig {
        lr: F::of(cfg.lr),
        beta1: F::of(0.9),
        beta2: F::of(0.999),
        eps: F::of(1e-8),
        weight_decay: F::of(cfg.weight_decay),
    };

    let mut best: Option<(f64, Tensor<F>, Tensor<F>)> = None;
    let n_train = splits.train.len();
    for epoch in 0..cfg.epochs {
        let schedule =
            crate::train::batch_schedule(&(0..n_train).collect::<Vec<_>>(), cfg.batch_size.min(n_train), seed ^ TAG_PROBE, epoch as u64, true);
        let schedule = if schedule.is_empty() {
            vec![(0..n_train).collect::<Vec<_>>()]
        } else {
            schedule
        };
        for batch in schedule {
            let xb = gather_rows(&x_train, &batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();

            let mut tape = Tape::new();
            let x = tape.leaf(xb);
            let w = tape.leaf(values[0].clone());
            let b = tape.leaf(values[1].clone());
            let h = tape.matmul(x, w)?;
            let logits = tape.add_bias(h, b)?;
            let lse = tape.log_sum_exp_rows(logits)?;
            let picked = tape.pick_rows(logits, &yb)?;
            let nll = tape.sub(lse, picked)?;
            let loss = tape.mean(nll)?;
            tape.backward(loss)?;
            let grads: Vec<&[F]> = [w, b].iter().map(|v: &Var| tape.grad(*v)).collect();
            adam_step(&mut values, &grads, &mut adam, &adam_cfg)?;
        }
        model.weight = values[0].clone();
        model.bias = values[1].clone();
        if !splits.val.is_empty() {
            let acc = model.accuracy(&x_val, &y_val)?;
            let better = match &best {
                None => true,
                Some((b_acc, _, _)) => acc > *b_acc,
            };
            if better {
                best = Some((acc, model.weight.clone(), model.bias.clone()));
            }
        }
        let _ = epoch;
    }
    if let Some((_, w, b)) = best {
        model.weight = w;
        model.bias = b;
    }

    let preds = argmax_rows(&model.logits(&x_test)?)?;
    let scores = model.softmax_scores(&x_test)?;
    metrics(&preds, &y_test, &scores)
}

// ───────────────────────── FNP audit ─────────────────────────

/// Pair-construction policy under audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePolicy {
    /// Stationarity-aware masks and temporal weights.
    StateAware,
    /// Conventional contrastive baseline: every off-diagonal pair is a
    /// negative with weight 1.
    RandomAll,
}

impl NegativePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            NegativePolicy::StateAware => "state-aware",
            NegativePolicy::RandomAll => "random",
        }
    }
}

/// FNP fractions; `None` when the corresponding denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FnpRates {
    /// Same-class fraction of hard (cross-state) negative pairs.
    pub hard_fnp_rate: Option<f64>,
    /// Weight-weighted same-class mass of the soft negatives.
    pub weighted_fnp_mass: Option<f64>,
    /// Same-class fraction over the union (hard pairs weight 1).
    pub combined_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct FnpCounts {
    nc_pairs: f64,
    nc_same: f64,
    tc_weight: f64,
    tc_weight_same: f64,
}

impl FnpCounts {
    fn add(&mut self, other: &FnpCounts) {
        self.nc_pairs += other.nc_pairs;
        self.nc_same += other.nc_same;
        self.tc_weight += other.tc_weight;
        self.tc_weight_same += other.tc_weight_same;
    }

    fn rates(&self) -> FnpRates {
        let frac = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
        FnpRates {
            hard_fnp_rate: frac(self.nc_same, self.nc_pairs),
            weighted_fnp_mass: frac(self.tc_weight_same, self.tc_weight),
            combined_rate: frac(
                self.nc_same + self.tc_weight_same,
                self.nc_pairs + self.tc_weight,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchFnp {
    pub batch_index: usize,
    pub rates: FnpRates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnpReport {
    pub policy: NegativePolicy,
    pub per_batch: Vec<BatchFnp>,
    /// Whole-run pooled counts.
    pub pooled: FnpRates,
    /// Mean of the defined per-batch rates.
    pub batch_mean: FnpRates,
}

fn batch_counts<F: Real>(
    structure: &PairStructure<F>,
    classes: &[usize],
) -> FnpCounts {
    let b = structure.batch;
    let mut c = FnpCounts::default();
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let idx = i * b + j;
            let same = (classes[i] == classes[j]) as u8 as f64;
            if structure.nc_mask[idx] {
                c.nc_pairs += 1.0;
                c.nc_same += same;
            } else if structure.tc_mask[idx] {
                let w = structure.weights[idx].as_f64();
                c.tc_weight += w;
                c.tc_weight_same += w * same;
            }
        }
    }
    c
}

fn random_all_structure<F: Real>(b: usize) -> PairStructure<F> {
    let mut nc_mask = vec![true; b * b];
    for i in 0..b {
        nc_mask[i * b + i] = false;
    }
    PairStructure {
        batch: b,
        nc_mask,
        tc_mask: vec![false; b * b],
        weights: vec![F::one(); b * b],
    }
}

/// Replay a batch schedule and tally false-negative-pair fractions against
/// ground-truth class labels. Read-only; labels are never used in training.
pub fn fnp_audit<F: Real>(
    meta: &[SegmentMeta],
    states: &[StationarityLabel],
    con_cfg: &ContrastConfig<F>,
    schedule: &[Vec<usize>],
    policy: NegativePolicy,
) -> Result<FnpReport> {
    if meta.len() != states.len() {
        return Err(Error::shape(format!(
            "{} metadata entries but {} states",
            meta.len(),
            states.len()
        )));
    }
    let mut per_batch = Vec::with_capacity(schedule.len());
    let mut pooled = FnpCounts::default();
    let mut batch_rate_sums = FnpCounts::default(); // reused as accumulators of defined rates
    let mut defined_counts = [0usize; 3];

    for (bi, batch) in schedule.iter().enumerate() {
        let classes: Vec<usize> = batch
            .iter()
            .map(|&i| {
                meta.get(i)
                    .ok_or_else(|| {
                        Error::config(format!("schedule references segment {} out of range", i))
                    })?
                    .label
                    .ok_or_else(|| {
                        Error::config(format!(
                            "segment {} has no ground-truth label; the audit requires labels",
                            i
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        let structure = match policy {
            NegativePolicy::StateAware => {
                let labels: Vec<StationarityLabel> = batch.iter().map(|&i| states[i]).collect();
                let metas: Vec<SegmentMeta> = batch.iter().map(|&i| meta[i]).collect();
                build_pair_structure(&labels, &metas, con_cfg)?
            }
            NegativePolicy::RandomAll => random_all_structure(batch.len()),
        };
        let counts = batch_counts(&structure, &classes);
        pooled.add(&counts);
        let rates = counts.rates();
        if let Some(r) = rates.hard_fnp_rate {
            batch_rate_sums.nc_same += r;
            defined_counts[0] += 1;
        }
        if let Some(r) = rates.weighted_fnp_mass {
            batch_rate_sums.tc_weight_same += r;
            defined_counts[1] += 1;
        }
        if let Some(r) = rates.combined_rate {
            batch_rate_sums.tc_weight += r;
            defined_counts[2] += 1;
        }
        per_batch.push(BatchFnp {
            batch_index: bi,
            rates,
        });
    }

    let mean = |sum: f64, n: usize| if n > 0 { Some(sum / n as f64) } else { None };
    Ok(FnpReport {
        policy,
        per_batch,
        pooled: pooled.rates(),
        batch_mean: FnpRates {
            hard_fnp_rate: mean(batch_rate_sums.nc_same, defined_counts[0]),
            weighted_fnp_mass: mean(batch_rate_sums.tc_weight_same, defined_counts[1]),
            combined_rate: mean(batch_rate_sums.tc_weight, defined_counts[2]),
        },
    })
}

// ───────────────────────── label fraction protocol ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct FractionOutcome {
    pub fraction: f64,
    /// (class, subsample size) for the probe train split.
    pub per_class_counts: Vec<(usize, usize)>,
    pub probe: ProbeResult,
}

/// Retrain the probe on stratified subsamples of the train split while the
/// pretrained embeddings stay fixed. Fractions that cannot keep at least one
/// sample per class are skipped with a warning.
pub fn label_fraction_protocol<F: Real>(
    embeddings: &Tensor<F>,
    labels: &[usize],
    splits: &EvalSplits,
    fractions: &[f64],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<Vec<FractionOutcome>> {
    let mut classes: Vec<usize> = splits.train.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut outcomes = Vec::new();
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
            log::warn!("skipping invalid label fraction {}", fraction);
            continue;
        }
        let mut train_subset = Vec::new();
        let mut per_class_counts = Vec::new();
        let mut feasible = true;
        for &c in &classes {
            let members: Vec<usize> = splits
                .train
                .iter()
                .copied()
                .filter(|&i| labels[i] == c)
                .collect();
            let take = (fraction * members.len() as f64).round() as usize;
            if take == 0 {
                feasible = false;
                break;
            }
            let take = take.min(members.len());
            let mut order = members;
            let mut r = rng::stream(&[TAG_SUBSAMPLE, seed, fraction.to_bits(), c as u64]);
            for i in (1..order.len()).rev() {
                let j = rand::Rng::random_range(&mut r, 0..=i);
                order.swap(i, j);
            }
            train_subset.extend_from_slice(&order[..take]);
            per_class_counts.push((c, take));
        }
        if !feasible {
            log::warn!(
                "fraction {} leaves a class without samples; skipped",
                fraction
            );
            continue;
        }
        train_subset.sort_unstable();
        let sub_splits = EvalSplits {
            train: train_subset,
            val: splits.val.clone(),
            test: splits.test.clone(),
        };
        let probe = linear_probe(embeddings, labels, &sub_splits, seed, cfg)?;
        outcomes.push(FractionOutcome {
            fraction,
            per_class_counts,
            probe,
        });
    }
    Ok(outcomes)
}

// ───────────────────────── embeddings ─────────────────────────

/// Encode every segment with the frozen encoder; rows align with dataset
/// order. Batch size only controls memory, not values.
pub fn embed_all<F: Real>(
    cfg: &EncoderConfig,
    params: &EncoderParams<F>,
    dataset: &Dataset<F>,
    batch_size: usize,
) -> Result<Tensor<F>> {
    let n = dataset.segments.len();
    let d = cfg.output_dim;
    let v = dataset.channels;
    let t_len = dataset.segment_len;
    let mut out = Vec::with_capacity(n * d);
    let chunk = batch_size.max(1);
    for block in dataset.segments.chunks(chunk) {
        let b = block.len();
        let mut data = vec![F::zero(); b * v * t_len];
        for (bi, seg) in block.iter().enumerate() {
            let src = seg.values.data();
            for t in 0..t_len {
                for c in 0..v {
                    data[bi * v * t_len + c * t_len + t] = src[t * v + c];
                }
            }
        }
        let x = Tensor::new(vec![b, v, t_len], data)?;
        let z = encode_values(cfg, params, &x)?;
        out.extend_from_slice(z.data());
    }
    Tensor::new(vec![n, d], out)
}

/// Write one row per segment: id, label (`-` when absent), then the
/// embedding values at full round-trip precision. Ordering is dataset order.
pub fn embed_export<F: Real>(
    cfg: &EncoderConfig,
    params: &EncoderParams<F>,
    dataset: &Dataset<F>,
    out_path: &Path,
) -> Result<()> {
    let z = embed_all(cfg, params, dataset, 256)?;
    let (_, d) = z.dims2()?;
    let file = fs::File::create(out_path).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(out_path.display().to_string(), e);
    for (i, seg) in dataset.segments.iter().enumerate() {
        let label = seg
            .label
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".to_string());
        write!(w, "{}\t{}", seg.id, label).map_err(io)?;
        for j in 0..d {
            write!(w, "\t{}", z.data()[i * d + j]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
