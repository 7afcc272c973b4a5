//! Datasets: segment storage, synthetic corpus generation, manifests,
//! value-file serialization and recording-level splits.
//!
//! A dataset is a flat list of segments; consecutive segments of the same
//! recording carry temporal-distance semantics for the temporal contrast.
//! Splits are assigned at the recording level so temporal neighbors never
//! straddle a split boundary.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, TAG_SPLIT, TAG_SYNTH};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// One anchor sample: a `T×V` value grid plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<F> {
    pub id: usize,
    pub recording: usize,
    pub index_in_recording: usize,
    pub label: Option<usize>,
    /// Row-major `T×V`.
    pub values: Tensor<F>,
}

/// Segment provenance without the values; travels with batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMeta {
    pub id: usize,
    pub recording: usize,
    pub index_in_recording: usize,
    pub label: Option<usize>,
}

impl<F> From<&Segment<F>> for SegmentMeta {
    fn from(s: &Segment<F>) -> Self {
        SegmentMeta {
            id: s.id,
            recording: s.recording,
            index_in_recording: s.index_in_recording,
            label: s.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Recording ids per split; disjoint and covering all recordings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn of(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-channel normalization statistics from the train split (population
/// mean and standard deviation of the raw values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub name: String,
    pub segment_len: usize,
    pub channels: usize,
    pub segments: Vec<Segment<F>>,
    pub splits: SplitAssignment,
    pub normalization: ChannelStats,
    /// Whether `segments` currently hold z-normalized values.
    pub normalized: bool,
}

impl<F: Real> Dataset<F> {
    pub fn recording_count(&self) -> usize {
        self.segments.last().map(|s| s.recording + 1).unwrap_or(0)
    }

    pub fn meta(&self) -> Vec<SegmentMeta> {
        self.segments.iter().map(SegmentMeta::from).collect()
    }

    /// Segment indices belonging to `split`, ascending.
    pub fn split_segments(&self, split: Split) -> Vec<usize> {
        let recs = self.splits.of(split);
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| recs.contains(&s.recording))
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural invariants: sequential ids, contiguous recordings,
    /// consistent shapes, and recording-level splits that partition the data.
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::config("dataset has no segments"));
        }
        let mut expected_rec = 0usize;
        let mut expected_idx = 0usize;
        for (i, s) in self.segments.iter().enumerate() {
            if s.id != i {
                return Err(Error::config(format!(
                    "segment ids must be sequential: position {} holds id {}",
                    i, s.id
                )));
            }
            if s.recording == expected_rec + 1 {
                expected_rec += 1;
                expected_idx = 0;
            }
            if s.recording != expected_rec || s.index_in_recording != expected_idx {
                return Err(Error::config(format!(
                    "segment {} has recording {}/index {}, expected {}/{}",
                    i, s.recording, s.index_in_recording, expected_rec, expected_idx
                )));
            }
            expected_idx += 1;
            let (t, v) = s.values.dims2()?;
            if t != self.segment_len || v != self.channels {
                return Err(Error::config(format!(
                    "segment {} has shape {}x{}, manifest says {}x{}",
                    i, t, v, self.segment_len, self.channels
                )));
            }
        }
        let n_rec = self.recording_count();
        let mut seen = vec![false; n_rec];
        for (name, list) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for &r in list {
                if r >= n_rec {
                    return Err(Error::config(format!(
                        "{} split references recording {} but there are {}",
                        name, r, n_rec
                    )));
                }
                if seen[r] {
                    return Err(Error::config(format!(
                        "recording {} appears in more than one split",
                        r
                    )));
                }
                seen[r] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "recording {} is not assigned to any split",
                missing
            )));
        }
        if self.normalization.mean.len() != self.channels
            || self.normalization.std.len() != self.channels
        {
            return Err(Error::config(
                "normalization statistics do not match the channel count",
            ));
        }
        Ok(())
    }

    /// z-normalize all segment values in place using the stored train-split
    /// statistics.
    pub fn apply_normalization(&mut self) -> Result<()> {
        if self.normalized {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        let chans = self.channels;
        let mean: Vec<F> = self.normalization.mean.iter().map(|&m| F::of(m)).collect();
        let std: Vec<F> = self.normalization.std.iter().map(|&s| F::of(s)).collect();
        for seg in &mut self.segments {
            for (i, v) in seg.values.data_mut().iter_mut().enumerate() {
                let c = i % chans;
                *v = (*v - mean[c]) / std[c];
            }
        }
        self.normalized = true;
        Ok(())
    }

    /// Stable content hash of shape and raw value bits; used to key caches.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update((self.segment_len as u64).to_le_bytes());
        h.update((self.channels as u64).to_le_bytes());
        h.update((self.segments.len() as u64).to_le_bytes());
        for s in &self.segments {
            h.update((s.recording as u64).to_le_bytes());
            for &v in s.values.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{:02x}", b));
        }
        out
    }
}

/// Per-channel mean/std over the train-split segments (population variance).
pub fn train_split_stats<F: Real>(
    segments: &[Segment<F>],
    splits: &SplitAssignment,
    channels: usize,
) -> Result<ChannelStats> {
    let mut sum = vec![0.0f64; channels];
    let mut sum_sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for s in segments {
        if !splits.train.contains(&s.recording) {
            continue;
        }
        for (i, v) in s.values.data().iter().enumerate() {
            let c = i % channels;
            let x = v.as_f64();
            sum[c] += x;
            sum_sq[c] += x * x;
        }
        count += s.values.numel() / channels;
    }
    if count == 0 {
        return Err(Error::config("train split is empty; cannot compute statistics"));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            let sd = var.sqrt();
            if sd < 1e-12 {
                log::warn!("constant channel: flooring std {} to 1e-12", sd);
                1e-12
            } else {
                sd
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}

// ───────────────────────── synthetic corpora ─────────────────────────

/// Named stochastic process for one class.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassGenerator {
    /// `x_t = φ·x_{t−1} + σ·ε_t`, stationary start; requires `|φ| < 1`.
    Ar1 { phi: f64, sigma: f64 },
    /// `x_0 = 0`, `x_t = x_{t−1} + σ·ε_t` (unit root).
    RandomWalk { sigma: f64 },
    /// `sin(2π·f·t + φ₀) + σ·ε_t` with a random phase per segment.
    SineNoise { freq: f64, sigma: f64 },
    /// `slope·t + σ·ε_t`.
    TrendNoise { slope: f64, sigma: f64 },
}

impl ClassGenerator {
    pub fn validate(&self) -> Result<()> {
        let sigma = match self {
            ClassGenerator::Ar1 { phi, sigma } => {
                if phi.abs() >= 1.0 {
                    return Err(Error::config(format!(
                        "ar1 requires |phi| < 1, got {}",
                        phi
                    )));
                }
                *sigma
            }
            ClassGenerator::RandomWalk { sigma } => *sigma,
            ClassGenerator::SineNoise { freq, sigma } => {
                if *freq <= 0.0 {
                    return Err(Error::config(format!(
                        "sine_noise requires freq > 0, got {}",
                        freq
                    )));
                }
                *sigma
            }
            ClassGenerator::TrendNoise { sigma, .. } => *sigma,
        };
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::config(format!(
                "process noise must be finite and non-negative, got {}",
                sigma
            )));
        }
        Ok(())
    }

    fn sample<F: Real, R: Rng>(&self, t_len: usize, rng: &mut R) -> Vec<F> {
        let mut out = vec![F::zero(); t_len];
        match *self {
            ClassGenerator::Ar1 { phi, sigma } => {
                let phi = F::of(phi);
                let sigma = F::of(sigma);
                let denom = (F::one() - phi * phi).sqrt();
                out[0] = sigma * F::standard_normal(rng) / denom;
                for t in 1..t_len {
                    out[t] = phi * out[t - 1] + sigma * F::standard_normal(rng);
                }
            }
            ClassGenerator::RandomWalk { sigma } => {
                let sigma = F::of(sigma);
                for t in 1..t_len {
                    out[t] = out[t - 1] + sigma * F::standard_normal(rng);
                }
            }
            ClassGenerator::SineNoise { freq, sigma } => {
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let sigma = F::of(sigma);
                for (t, o) in out.iter_mut().enumerate() {
                    let arg = std::f64::consts::TAU * freq * t as f64 + phase;
                    *o = F::of(arg.sin()) + sigma * F::standard_normal(rng);
                }
            }
            ClassGenerator::TrendNoise { slope, sigma } => {
                let sigma = F::of(sigma);
                for (t, o) in out.iter_mut().enumerate() {
                    *o = F::of(slope * t as f64) + sigma * F::standard_normal(rng);
                }
            }
        }
        out
    }
}

impl fmt::Display for ClassGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassGenerator::Ar1 { phi, sigma } => write!(f, "ar1({},{})", phi, sigma),
            ClassGenerator::RandomWalk { sigma } => write!(f, "random_walk({})", sigma),
            ClassGenerator::SineNoise { freq, sigma } => write!(f, "sine_noise({},{})", freq, sigma),
            ClassGenerator::TrendNoise { slope, sigma } => {
                write!(f, "trend_noise({},{})", slope, sigma)
            }
        }
    }
}

impl FromStr for ClassGenerator {
    type Err = Error;

    /// Parse `name(arg1,arg2)`, e.g. `ar1(0.5,1.0)` or `random_walk(1)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let open = s
            .find('(')
            .ok_or_else(|| Error::config(format!("malformed generator '{}'", s)))?;
        if !s.ends_with(')') {
            return Err(Error::config(format!("malformed generator '{}'", s)));
        }
        let name = &s[..open];
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad numeric argument '{}' in '{}'", a, s)))
            })
            .collect::<Result<_>>()?;
        let gen = match (name, args.as_slice()) {
            ("ar1", [phi, sigma]) => ClassGenerator::Ar1 {
                phi: *phi,
                sigma: *sigma,
            },
            ("random_walk", [sigma]) => ClassGenerator::RandomWalk { sigma: *sigma },
            ("sine_noise", [freq, sigma]) => ClassGenerator::SineNoise {
                freq: *freq,
                sigma: *sigma,
            },
            ("trend_noise", [slope, sigma]) => ClassGenerator::TrendNoise {
                slope: *slope,
                sigma: *sigma,
            },
            _ => {
                return Err(Error::config(format!(
                    "unknown generator or wrong arity: '{}'",
                    s
                )))
            }
        };
        gen.validate()?;
        Ok(gen)
    }
}

/// Specification of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub n_segments: usize,
    pub segment_len: usize,
    pub channels: usize,
    pub segments_per_recording: usize,
    /// Mean of the geometric class run-length distribution (≥ 1).
    pub run_length_mean: f64,
    pub classes: Vec<ClassGenerator>,
    pub seed: u64,
    pub split_proportions: (f64, f64, f64),
    pub stratify: bool,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("synthetic spec needs at least one class"));
        }
        for c in &self.classes {
            c.validate()?;
        }
        if self.run_length_mean < 1.0 {
            return Err(Error::config(format!(
                "run_length_mean must be >= 1, got {}",
                self.run_length_mean
            )));
        }
        if self.n_segments == 0 || self.segment_len < 2 || self.channels == 0 {
            return Err(Error::config("empty synthetic corpus dimensions"));
        }
        if self.segments_per_recording == 0 {
            return Err(Error::config("segments_per_recording must be positive"));
        }
        Ok(())
    }
}

fn geometric_run<R: Rng>(mean: f64, rng: &mut R) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let q = 1.0 - 1.0 / mean;
    let u: f64 = rng.random_range(0.0..1.0);
    1 + ((1.0 - u).ln() / q.ln()).floor() as usize
}

/// Generate a labeled synthetic corpus. Class quotas are balanced (n/C each,
/// remainder to the lowest class ids); within a recording the class persists
/// for geometric run lengths so temporal neighbors usually share a class.
pub fn gen_synthetic<F: Real>(spec: &SynthSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    let n_classes = spec.classes.len();
    let mut quota = vec![spec.n_segments / n_classes; n_classes];
    for extra in quota.iter_mut().take(spec.n_segments % n_classes) {
        *extra += 1;
    }

    // class layout
    let mut layout_rng = rng::stream(&[TAG_SYNTH, spec.seed, 0]);
    let mut layout = Vec::with_capacity(spec.n_segments);
    let mut current: Option<usize> = None;
    let mut run_left = 0usize;
    for i in 0..spec.n_segments {
        if i % spec.segments_per_recording == 0 {
            run_left = 0; // recording boundary resets the run
        }
        if run_left == 0 || current.map(|c| quota[c] == 0).unwrap_or(true) {
            let mut candidates: Vec<usize> =
                (0..n_classes).filter(|&c| quota[c] > 0).collect();
            if candidates.len() > 1 {
                if let Some(cur) = current {
                    candidates.retain(|&c| c != cur);
                }
            }
            debug_assert!(!candidates.is_empty());
            let pick = candidates[layout_rng.random_range(0..candidates.len())];
            current = Some(pick);
            run_left = geometric_run(spec.run_length_mean, &mut layout_rng).min(quota[pick]);
        }
        let c = current.unwrap();
        layout.push(c);
        quota[c] -= 1;
        run_left -= 1;
    }

    // values
    let mut segments = Vec::with_capacity(spec.n_segments);
    for (i, &class) in layout.iter().enumerate() {
        let mut columns = Vec::with_capacity(spec.channels);
        for ch in 0..spec.channels {
            let mut r = rng::stream(&[TAG_SYNTH, spec.seed, 1, i as u64, ch as u64]);
            columns.push(spec.classes[class].sample::<F, _>(spec.segment_len, &mut r));
        }
        let mut vals = vec![F::zero(); spec.segment_len * spec.channels];
        for t in 0..spec.segment_len {
            for ch in 0..spec.channels {
                vals[t * spec.channels + ch] = columns[ch][t];
            }
        }
        segments.push(Segment {
            id: i,
            recording: i / spec.segments_per_recording,
            index_in_recording: i % spec.segments_per_recording,
            label: Some(class),
            values: Tensor::new(vec![spec.segment_len, spec.channels], vals)?,
        });
    }

    let mut dataset = Dataset {
        name: spec.name.clone(),
        segment_len: spec.segment_len,
        channels: spec.channels,
        segments,
        splits: SplitAssignment::default(),
        normalization: ChannelStats {
            mean: vec![0.0; spec.channels],
            std: vec![1.0; spec.channels],
        },
        normalized: false,
    };
    dataset.splits = split(&dataset, spec.split_proportions, spec.seed, spec.stratify)?;
    dataset.normalization =
        train_split_stats(&dataset.segments, &dataset.splits, dataset.channels)?;
    dataset.validate()?;
    Ok(dataset)
}

// ───────────────────────── splitting ─────────────────────────

fn majority_class<F: Real>(dataset: &Dataset<F>, recording: usize) -> Option<usize> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for s in &dataset.segments {
        if s.recording == recording {
            if let Some(l) = s.label {
                match counts.iter_mut().find(|(c, _)| *c == l) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((l, 1)),
                }
            }
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts.first().map(|(c, _)| *c)
}

fn allocate(n: usize, proportions: (f64, f64, f64)) -> (usize, usize, usize) {
    let n1 = (proportions.0 * n as f64).round() as usize;
    let n2 = ((proportions.1 * n as f64).round() as usize).min(n - n1.min(n));
    let n1 = n1.min(n);
    let n3 = n - n1 - n2;
    (n1, n2, n3)
}

/// Seeded recording-level split. Recordings are atomic so that temporal
/// neighbors never leak across splits; with `stratify`, recordings are
/// grouped by majority class first and allocated proportionally per group.
pub fn split<F: Real>(
    dataset: &Dataset<F>,
    proportions: (f64, f64, f64),
    seed: u64,
    stratify: bool,
) -> Result<SplitAssignment> {
    let (p1, p2, p3) = proportions;
    if !(p1 >= 0.0 && p2 >= 0.0 && p3 >= 0.0) || (p1 + p2 + p3 - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split proportions must be non-negative and sum to 1, got ({}, {}, {})",
            p1, p2, p3
        )));
    }
    let n_rec = dataset.recording_count();
    let n_nonzero = [p1, p2, p3].iter().filter(|p| **p > 0.0).count();
    if n_rec < n_nonzero {
        return Err(Error::config(format!(
            "{} recordings cannot fill {} non-empty splits",
            n_rec, n_nonzero
        )));
    }

    let stratify = stratify && dataset.segments.iter().any(|s| s.label.is_some());
    let groups: Vec<Vec<usize>> = if stratify {
        let mut keyed: Vec<(Option<usize>, Vec<usize>)> = Vec::new();
        for r in 0..n_rec {
            let key = majority_class(dataset, r);
            match keyed.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => keyed.push((key, vec![r])),
            }
        }
        keyed.sort_by_key(|(k, _)| *k);
        keyed.into_iter().map(|(_, v)| v).collect()
    } else {
        vec![(0..n_rec).collect()]
    };

    let mut lists: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (gi, mut group) in groups.into_iter().enumerate() {
        let mut r = rng::stream(&[TAG_SPLIT, seed, gi as u64]);
        // Fisher-Yates
        for i in (1..group.len()).rev() {
            let j = r.random_range(0..=i);
            group.swap(i, j);
        }
        let (n1, n2, _) = allocate(group.len(), proportions);
        lists[0].extend_from_slice(&group[..n1]);
        lists[1].extend_from_slice(&group[n1..n1 + n2]);
        lists[2].extend_from_slice(&group[n1 + n2..]);
    }

    // Per-group rounding can starve a split when groups are small; donate a
    // recording from the most overfull split until every non-empty
    // proportion has one.
    let props = [p1, p2, p3];
    loop {
        let starving = (0..3).find(|&i| props[i] > 0.0 && lists[i].is_empty());
        let si = match starving {
            Some(i) => i,
            None => break,
        };
        let donor = (0..3)
            .filter(|&j| lists[j].len() > 1)
            .max_by(|&a, &b| {
                let da = lists[a].len() as f64 - props[a] * n_rec as f64;
                let db = lists[b].len() as f64 - props[b] * n_rec as f64;
                da.total_cmp(&db)
            });
        match donor {
            Some(dj) => {
                let moved = lists[dj].pop().expect("donor has recordings");
                lists[si].push(moved);
            }
            None => break, // let the validation below report it
        }
    }

    let [mut train, mut val, mut test] = lists;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let out = SplitAssignment { train, val, test };

    for (p, list, name) in [
        (p1, &out.train, "train"),
        (p2, &out.val, "val"),
        (p3, &out.test, "test"),
    ] {
        if p > 0.0 && list.is_empty() {
            return Err(Error::config(format!(
                "split '{}' received no recordings; too few recordings for the proportions",
                name
            )));
        }
    }
    Ok(out)
}

// ───────────────────────── manifest + value files ─────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: String,
    segment_len: usize,
    channels: usize,
    values: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    recordings: RecordingsSection,
    splits: SplitsSection,
    normalization: ChannelStats,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingsSection {
    /// `[start, end)` segment-index range per recording, in order.
    ranges: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsSection {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

const SEGMENT_MAGIC: &[u8; 8] = b"STCLSEG1";

/// On-disk representation of the values file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValuesFormat {
    /// Tab-separated text: a `segment` header line then `T` rows of `V` values.
    Text,
    /// Packed little-endian binary.
    Binary,
}

fn write_values_text<F: Real>(path: &Path, segments: &[Segment<F>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    for s in segments {
        let label = s
            .label
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".to_string());
        writeln!(
            w,
            "segment\t{}\t{}\t{}\t{}",
            s.id, s.recording, s.index_in_recording, label
        )
        .map_err(io)?;
        let (t_len, chans) = s.values.dims2()?;
        let vals = s.values.data();
        for t in 0..t_len {
            let row: Vec<String> = (0..chans)
                .map(|c| format!("{}", vals[t * chans + c]))
                .collect();
            writeln!(w, "{}", row.join("\t")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_values_text<F: Real>(
    path: &Path,
    segment_len: usize,
    channels: usize,
) -> Result<Vec<Segment<F>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let pstr = path.display().to_string();
    let mut segments = Vec::new();
    let mut lines = reader.lines().enumerate();
    while let Some((lineno, line)) = lines.next() {
        let line = line.map_err(|e| Error::io(pstr.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 || fields[0] != "segment" {
            return Err(Error::format(
                &pstr,
                format!("line {}: expected a segment header", lineno + 1),
            ));
        }
        let parse_idx = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| {
                Error::format(&pstr, format!("line {}: bad {} '{}'", lineno + 1, what, s))
            })
        };
        let id = parse_idx(fields[1], "id")?;
        let recording = parse_idx(fields[2], "recording")?;
        let index_in_recording = parse_idx(fields[3], "index")?;
        let label = if fields[4] == "-" {
            None
        } else {
            Some(parse_idx(fields[4], "label")?)
        };
        let mut vals = Vec::with_capacity(segment_len * channels);
        for row in 0..segment_len {
            let (rowno, rline) = lines.next().ok_or_else(|| {
                Error::format(
                    &pstr,
                    format!("segment {}: truncated at value row {}", id, row),
                )
            })?;
            let rline = rline.map_err(|e| Error::io(pstr.clone(), e))?;
            let cells: Vec<&str> = rline.split('\t').collect();
            if cells.len() != channels {
                return Err(Error::format(
                    &pstr,
                    format!(
                        "line {}: expected {} channels, found {}",
                        rowno + 1,
                        channels,
                        cells.len()
                    ),
                ));
            }
            for c in cells {
                let v = c.parse::<F>().map_err(|_| {
                    Error::format(&pstr, format!("line {}: bad value '{}'", rowno + 1, c))
                })?;
                vals.push(v);
            }
        }
        segments.push(Segment {
            id,
            recording,
            index_in_recording,
            label,
            values: Tensor::new(vec![segment_len, channels], vals)?,
        });
    }
    Ok(segments)
}

fn write_values_binary<F: Real>(path: &Path, segments: &[Segment<F>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(SEGMENT_MAGIC).map_err(io)?;
    w.write_all(&(segments.len() as u64).to_le_bytes()).map_err(io)?;
    for s in segments {
        let (t_len, chans) = s.values.dims2()?;
        w.write_all(&(s.id as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(s.recording as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(s.index_in_recording as u64).to_le_bytes())
            .map_err(io)?;
        let label: i64 = s.label.map(|l| l as i64).unwrap_or(-1);
        w.write_all(&label.to_le_bytes()).map_err(io)?;
        w.write_all(&(t_len as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(chans as u64).to_le_bytes()).map_err(io)?;
        for &v in s.values.data() {
            w.write_all(&v.as_f64().to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_values_binary<F: Real>(
    path: &Path,
    segment_len: usize,
    channels: usize,
) -> Result<Vec<Segment<F>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let pstr = path.display().to_string();
    let io = |e: std::io::Error| Error::io(pstr.clone(), e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != SEGMENT_MAGIC {
        return Err(Error::format(&pstr, "bad magic bytes: not a segment file"));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<fs::File>| -> Result<u64> {
        r.read_exact(&mut u64buf)
            .map_err(|e| Error::io(pstr.clone(), e))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n = read_u64(&mut r)? as usize;
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let id = read_u64(&mut r)? as usize;
        let recording = read_u64(&mut r)? as usize;
        let index_in_recording = read_u64(&mut r)? as usize;
        let label_raw = read_u64(&mut r)? as i64;
        let label = if label_raw < 0 {
            None
        } else {
            Some(label_raw as usize)
        };
        let t_len = read_u64(&mut r)? as usize;
        let chans = read_u64(&mut r)? as usize;
        if t_len != segment_len || chans != channels {
            return Err(Error::format(
                &pstr,
                format!(
                    "segment {}: shape {}x{} does not match manifest {}x{}",
                    i, t_len, chans, segment_len, channels
                ),
            ));
        }
        let mut vals = Vec::with_capacity(t_len * chans);
        let mut fbuf = [0u8; 8];
        for _ in 0..t_len * chans {
            r.read_exact(&mut fbuf)
                .map_err(|e| Error::io(pstr.clone(), e))?;
            vals.push(F::of(f64::from_le_bytes(fbuf)));
        }
        segments.push(Segment {
            id,
            recording,
            index_in_recording,
            label,
            values: Tensor::new(vec![t_len, chans], vals)?,
        });
    }
    Ok(segments)
}

/// Write `manifest.toml` plus the values file into `dir`. The dataset must
/// hold raw (un-normalized) values; the manifest records the statistics.
pub fn save_dataset<F: Real>(dataset: &Dataset<F>, dir: &Path, format: ValuesFormat) -> Result<PathBuf> {
    if dataset.normalized {
        return Err(Error::Contract(
            "refusing to save a normalized dataset; keep files in raw units".into(),
        ));
    }
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let values_name = match format {
        ValuesFormat::Text => "segments.tsv",
        ValuesFormat::Binary => "segments.bin",
    };
    let values_path = dir.join(values_name);
    match format {
        ValuesFormat::Text => write_values_text(&values_path, &dataset.segments)?,
        ValuesFormat::Binary => write_values_binary(&values_path, &dataset.segments)?,
    }

    let mut ranges = Vec::new();
    let mut start = 0usize;
    for r in 0..dataset.recording_count() {
        let len = dataset
            .segments
            .iter()
            .filter(|s| s.recording == r)
            .count();
        ranges.push([start, start + len]);
        start += len;
    }
    let manifest = ManifestFile {
        name: dataset.name.clone(),
        segment_len: dataset.segment_len,
        channels: dataset.channels,
        values: values_name.to_string(),
        labels: None,
        recordings: RecordingsSection { ranges },
        splits: SplitsSection {
            train: dataset.splits.train.clone(),
            val: dataset.splits.val.clone(),
            test: dataset.splits.test.clone(),
        },
        normalization: dataset.normalization.clone(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

fn sniff_binary(path: &Path) -> Result<bool> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut head = [0u8; 8];
    match f.read_exact(&mut head) {
        Ok(()) => Ok(&head == SEGMENT_MAGIC),
        Err(_) => Ok(false),
    }
}

/// Load a dataset without applying normalization.
pub fn load_dataset_raw<F: Real>(manifest_path: &Path) -> Result<Dataset<F>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: ManifestFile = toml::from_str(&text)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let values_path = base.join(&manifest.values);
    if !values_path.exists() {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("values file '{}' does not exist", values_path.display()),
        ));
    }
    let mut segments: Vec<Segment<F>> = if sniff_binary(&values_path)? {
        read_values_binary(&values_path, manifest.segment_len, manifest.channels)?
    } else {
        read_values_text(&values_path, manifest.segment_len, manifest.channels)?
    };

    // expected recording layout from the manifest ranges
    let total: usize = manifest.recordings.ranges.last().map(|r| r[1]).unwrap_or(0);
    if total != segments.len() {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!(
                "recordings cover {} segments but the values file holds {}",
                total,
                segments.len()
            ),
        ));
    }
    let mut cursor = 0usize;
    for (ri, range) in manifest.recordings.ranges.iter().enumerate() {
        if range[0] != cursor || range[1] < range[0] {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("recording {} range {:?} is not contiguous", ri, range),
            ));
        }
        cursor = range[1];
    }

    if let Some(labels_rel) = &manifest.labels {
        let labels_path = base.join(labels_rel);
        let ltext = fs::read_to_string(&labels_path)
            .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
        for (lineno, line) in ltext.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (id, label) = match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::format(
                        labels_path.display().to_string(),
                        format!("line {}: expected 'id<TAB>label'", lineno + 1),
                    ))
                }
            };
            let id: usize = id.parse().map_err(|_| {
                Error::format(
                    labels_path.display().to_string(),
                    format!("line {}: bad id '{}'", lineno + 1, id),
                )
            })?;
            let label: usize = label.parse().map_err(|_| {
                Error::format(
                    labels_path.display().to_string(),
                    format!("line {}: bad label '{}'", lineno + 1, label),
                )
            })?;
            if id >= segments.len() {
                return Err(Error::format(
                    labels_path.display().to_string(),
                    format!("line {}: id {} out of range", lineno + 1, id),
                ));
            }
            segments[id].label = Some(label);
        }
    }

    let dataset = Dataset {
        name: manifest.name,
        segment_len: manifest.segment_len,
        channels: manifest.channels,
        segments,
        splits: SplitAssignment {
            train: manifest.splits.train,
            val: manifest.splits.val,
            test: manifest.splits.test,
        },
        normalization: manifest.normalization,
        normalized: false,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Load a dataset and z-normalize it with the manifest's train statistics.
pub fn load_dataset<F: Real>(manifest_path: &Path) -> Result<Dataset<F>> {
    let mut d = load_dataset_raw(manifest_path)?;
    d.apply_normalization()?;
    Ok(d)
}
