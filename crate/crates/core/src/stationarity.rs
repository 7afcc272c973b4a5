//! Unit-root testing and per-segment stationarity assessment.
//!
//! The test regresses `Δy_t = c + γ·y_{t−1} + Σ φ_i·Δy_{t−i} + ε_t`
//! (constant, no trend) and reports the t-ratio of `γ̂`. Large p-values mean
//! the unit-root null cannot be rejected, i.e. the segment is treated as
//! non-stationary (state 1).

use crate::data::Segment;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Outcome of the unit-root regression on one series.
#[derive(Debug, Clone, PartialEq)]
pub struct AdfResult<F> {
    /// t-ratio of the lagged-level coefficient.
    pub statistic: F,
    /// Approximate p-value, clamped to [1e-4, 0.9999].
    pub p_value: F,
    pub lag_order: usize,
    /// Observations entering the regression: `T − 1 − lag_order`.
    pub n_effective: usize,
}

/// Binary stationarity state of a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityLabel {
    /// `true` (state 1) when the p-value exceeds the threshold.
    pub non_stationary: bool,
    pub threshold_used: f64,
}

impl StationarityLabel {
    pub fn state(&self) -> u8 {
        self.non_stationary as u8
    }
}

/// Least-squares fit with coefficient standard errors.
#[derive(Debug, Clone)]
pub struct OlsFit<F> {
    pub coefficients: Vec<F>,
    pub residuals: Vec<F>,
    pub std_errors: Vec<F>,
}

/// Least squares via Householder QR. `design` is `n×k` with `n > k` and full
/// column rank; standard errors use `s² = RSS/(n−k)`.
pub fn ols_fit<F: Real>(design: &Tensor<F>, response: &[F]) -> Result<OlsFit<F>> {
    let (n, k) = design.dims2()?;
    if response.len() != n {
        return Err(Error::shape(format!(
            "response length {} does not match {} design rows",
            response.len(),
            n
        )));
    }
    if n <= k {
        return Err(Error::shape(format!(
            "need more rows than columns: {}x{}",
            n, k
        )));
    }

    // Working copies: a is reduced in place to R, y accumulates Qᵀy.
    let mut a = design.data().to_vec();
    let mut y = response.to_vec();

    for j in 0..k {
        // Householder reflector for column j below the diagonal.
        let mut norm_sq = F::zero();
        for i in j..n {
            let v = a[i * k + j];
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        if norm == F::zero() {
            continue; // caught by the rank check below
        }
        let ajj = a[j * k + j];
        let alpha = if ajj >= F::zero() { -norm } else { norm };
        let mut v = vec![F::zero(); n - j];
        v[0] = ajj - alpha;
        for i in j + 1..n {
            v[i - j] = a[i * k + j];
        }
        let mut vtv = F::zero();
        for &vi in &v {
            vtv += vi * vi;
        }
        if vtv == F::zero() {
            continue;
        }
        let two = F::of(2.0);
        // apply H = I − 2vvᵀ/vᵀv to remaining columns and to y
        for col in j..k {
            let mut dot = F::zero();
            for i in j..n {
                dot += v[i - j] * a[i * k + col];
            }
            let f = two * dot / vtv;
            for i in j..n {
                a[i * k + col] -= f * v[i - j];
            }
        }
        let mut dot = F::zero();
        for i in j..n {
            dot += v[i - j] * y[i];
        }
        let f = two * dot / vtv;
        for i in j..n {
            y[i] -= f * v[i - j];
        }
        a[j * k + j] = alpha;
        for i in j + 1..n {
            a[i * k + j] = F::zero();
        }
    }

    // rank check on the diagonal of R
    let mut rmax = F::zero();
    for j in 0..k {
        let d = a[j * k + j].abs();
        if d > rmax {
            rmax = d;
        }
    }
    let tol = rmax * F::epsilon() * F::of_usize(n.max(k));
    for j in 0..k {
        if a[j * k + j].abs() <= tol {
            return Err(Error::Singular { column: j });
        }
    }

    // back substitution: R β = Qᵀy
    let mut coef = vec![F::zero(); k];
    for j in (0..k).rev() {
        let mut acc = y[j];
        for m in j + 1..k {
            acc -= a[j * k + m] * coef[m];
        }
        coef[j] = acc / a[j * k + j];
    }

    // residuals from the original design
    let xd = design.data();
    let mut residuals = vec![F::zero(); n];
    let mut rss = F::zero();
    for i in 0..n {
        let mut fit = F::zero();
        for j in 0..k {
            fit += xd[i * k + j] * coef[j];
        }
        let r = response[i] - fit;
        residuals[i] = r;
        rss += r * r;
    }
    let s2 = rss / F::of_usize(n - k);

    // (XᵀX)⁻¹ = R⁻¹R⁻ᵀ; diagonal entries are squared row norms of R⁻¹.
    // Solve R·rinv = I column by column.
    let mut rinv = vec![F::zero(); k * k];
    for col in 0..k {
        for j in (0..=col).rev() {
            let mut acc = if j == col { F::one() } else { F::zero() };
            for m in j + 1..=col {
                acc -= a[j * k + m] * rinv[m * k + col];
            }
            rinv[j * k + col] = acc / a[j * k + j];
        }
    }
    let mut std_errors = vec![F::zero(); k];
    for j in 0..k {
        let mut diag = F::zero();
        for m in j..k {
            let v = rinv[j * k + m];
            diag += v * v;
        }
        std_errors[j] = (s2 * diag).sqrt();
    }

    Ok(OlsFit {
        coefficients: coef,
        residuals,
        std_errors,
    })
}

/// Schwert's rule: `floor(12·(T/100)^{1/4})`.
pub fn schwert_lag(t: usize) -> usize {
    (12.0 * (t as f64 / 100.0).powf(0.25)).floor() as usize
}

// MacKinnon (1994) response-surface coefficients for the approximate
// asymptotic p-value of the constant-only case: p = Φ(poly(stat)), with the
// small-p polynomial used for stat ≤ τ* and the large-p one otherwise.
const TAU_MAX_C: f64 = 2.74;
const TAU_MIN_C: f64 = -18.83;
const TAU_STAR_C: f64 = -1.61;
const TAU_C_SMALL_P: [f64; 3] = [2.1659, 1.4412, 0.038269];
const TAU_C_LARGE_P: [f64; 4] = [1.7339, 0.93202, -0.12745, -0.010368];

/// Clamp range for reported p-values.
pub const P_VALUE_MIN: f64 = 1e-4;
pub const P_VALUE_MAX: f64 = 0.9999;

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Approximate p-value of an ADF statistic (constant-only regression),
/// clamped to `[P_VALUE_MIN, P_VALUE_MAX]`.
pub fn mackinnon_pvalue(stat: f64) -> f64 {
    let raw = if stat > TAU_MAX_C {
        1.0
    } else if stat < TAU_MIN_C {
        0.0
    } else {
        let coefs: &[f64] = if stat <= TAU_STAR_C {
            &TAU_C_SMALL_P
        } else {
            &TAU_C_LARGE_P
        };
        let mut poly = 0.0;
        for &c in coefs.iter().rev() {
            poly = poly * stat + c;
        }
        standard_normal_cdf(poly)
    };
    raw.clamp(P_VALUE_MIN, P_VALUE_MAX)
}

/// Augmented Dickey-Fuller test with constant, no trend. `lag_order`
/// defaults to the Schwert rule.
pub fn adf_test<F: Real>(series: &[F], lag_order: Option<usize>) -> Result<AdfResult<F>> {
    let t_len = series.len();
    let p = lag_order.unwrap_or_else(|| schwert_lag(t_len));
    let min_len = p + 10;
    if t_len < min_len {
        return Err(Error::TooShort {
            len: t_len,
            min: min_len,
        });
    }

    let diff: Vec<F> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let mut dmin = diff[0];
    let mut dmax = diff[0];
    for &d in &diff {
        if d < dmin {
            dmin = d;
        }
        if d > dmax {
            dmax = d;
        }
    }
    let scale = dmax.abs().max(dmin.abs()).max(F::one());
    if dmax - dmin <= scale * F::of(1e-13) {
        return Err(Error::Degenerate(
            "series has (near-)zero variance of first differences".into(),
        ));
    }

    let n = t_len - 1 - p;
    let k = p + 2;
    let mut design = vec![F::zero(); n * k];
    let mut response = vec![F::zero(); n];
    for (row, t) in (p + 1..t_len).enumerate() {
        design[row * k] = F::one();
        design[row * k + 1] = series[t - 1];
        for i in 1..=p {
            design[row * k + 1 + i] = diff[t - 1 - i];
        }
        response[row] = diff[t - 1];
    }
    let fit = ols_fit(&Tensor::new(vec![n, k], design)?, &response)?;
    let statistic = fit.coefficients[1] / fit.std_errors[1];
    let p_value = F::of(mackinnon_pvalue(statistic.as_f64()));
    Ok(AdfResult {
        statistic,
        p_value,
        lag_order: p,
        n_effective: n,
    })
}

/// Per-channel outcome inside a segment assessment.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelAdf<F> {
    Tested(AdfResult<F>),
    /// Channel with no usable variation; counted as a stationary vote.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAssessment<F> {
    pub label: StationarityLabel,
    pub channels: Vec<ChannelAdf<F>>,
}

/// Assess one segment. Multivariate segments take a per-channel majority
/// vote with ties resolved toward non-stationary.
pub fn assess_segment<F: Real>(
    segment: &Segment<F>,
    threshold: f64,
    lag_order: Option<usize>,
) -> Result<SegmentAssessment<F>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "ADF threshold must lie in (0,1), got {}",
            threshold
        )));
    }
    let (t_len, channels) = segment.values.dims2()?;
    let vals = segment.values.data();
    let mut results = Vec::with_capacity(channels);
    let mut non_stationary_votes = 0usize;
    for ch in 0..channels {
        let series: Vec<F> = (0..t_len).map(|t| vals[t * channels + ch]).collect();
        match adf_test(&series, lag_order) {
            Ok(r) => {
                if r.p_value.as_f64() > threshold {
                    non_stationary_votes += 1;
                }
                results.push(ChannelAdf::Tested(r));
            }
            Err(Error::Degenerate(_)) => {
                log::warn!(
                    "segment {}: channel {} has constant differences; counted as stationary",
                    segment.id,
                    ch
                );
                results.push(ChannelAdf::Degenerate);
            }
            Err(e) => return Err(e),
        }
    }
    let label = StationarityLabel {
        non_stationary: 2 * non_stationary_votes >= channels,
        threshold_used: threshold,
    };
    Ok(SegmentAssessment {
        label,
        channels: results,
    })
}

/// Stationary/non-stationary counts for one class; the ratio is undefined
/// (None) when there are no non-stationary members.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatio {
    pub class: usize,
    pub n_stationary: usize,
    pub n_non_stationary: usize,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssessSummary {
    pub n_stationary: usize,
    pub n_non_stationary: usize,
    pub overall_ratio: Option<f64>,
    /// Per-class breakdown, present when the dataset carries labels.
    pub per_class: Vec<ClassRatio>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetAssessment<F> {
    /// One assessment per segment, in input order.
    pub segments: Vec<SegmentAssessment<F>>,
    pub summary: AssessSummary,
}

impl<F> DatasetAssessment<F> {
    pub fn labels(&self) -> Vec<StationarityLabel> {
        self.segments.iter().map(|a| a.label).collect()
    }
}

fn ratio(stationary: usize, non_stationary: usize) -> Option<f64> {
    if non_stationary == 0 {
        None
    } else {
        Some(stationary as f64 / non_stationary as f64)
    }
}

/// Assess every segment and summarize the stationary/non-stationary split,
/// per class when labels are present.
pub fn assess_dataset<F: Real>(
    segments: &[Segment<F>],
    threshold: f64,
    lag_order: Option<usize>,
) -> Result<DatasetAssessment<F>> {
    if segments.is_empty() {
        return Err(Error::config("cannot assess an empty dataset"));
    }
    let mut assessed = Vec::with_capacity(segments.len());
    for seg in segments {
        assessed.push(assess_segment(seg, threshold, lag_order)?);
    }
    let n_non: usize = assessed.iter().filter(|a| a.label.non_stationary).count();
    let n_sta = assessed.len() - n_non;

    let mut per_class = Vec::new();
    if segments.iter().any(|s| s.label.is_some()) {
        let mut classes: Vec<usize> = segments.iter().filter_map(|s| s.label).collect();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let mut sta = 0usize;
            let mut non = 0usize;
            for (seg, a) in segments.iter().zip(&assessed) {
                if seg.label == Some(class) {
                    if a.label.non_stationary {
                        non += 1;
                    } else {
                        sta += 1;
                    }
                }
            }
            per_class.push(ClassRatio {
                class,
                n_stationary: sta,
                n_non_stationary: non,
                ratio: ratio(sta, non),
            });
        }
    }

    Ok(DatasetAssessment {
        segments: assessed,
        summary: AssessSummary {
            n_stationary: n_sta,
            n_non_stationary: n_non,
            overall_ratio: ratio(n_sta, n_non),
            per_class,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn ols_exact_linear_fit() {
        let x: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let fit = ols_fit(&column(&x), &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn ols_intercept_recovers_mean() {
        let design = Tensor::new(vec![5, 1], vec![1.0f64; 5]).unwrap();
        let y = vec![3.5f64; 5];
        let fit = ols_fit(&design, &y).unwrap();
        assert!((fit.coefficients[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 50;
        let k = 3;
        let design = Tensor::from_fn(vec![n, k], |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = ols_fit(&design, &y).unwrap();

        // normal-equation oracle: solve (XᵀX)β = Xᵀy by Gaussian elimination
        let xd = design.data();
        let mut xtx = vec![vec![0.0f64; k]; k];
        let mut xty = vec![0.0f64; k];
        for i in 0..n {
            for a in 0..k {
                xty[a] += xd[i * k + a] * y[i];
                for b in 0..k {
                    xtx[a][b] += xd[i * k + a] * xd[i * k + b];
                }
            }
        }
        for a in 0..k {
            let v = xty[a];
            xtx[a].push(v);
        }
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&r, &s| xtx[r][col].abs().total_cmp(&xtx[s][col].abs()))
                .unwrap();
            xtx.swap(col, piv);
            let d = xtx[col][col];
            for j in col..=k {
                xtx[col][j] /= d;
            }
            for r in 0..k {
                if r != col {
                    let f = xtx[r][col];
                    for j in col..=k {
                        xtx[r][j] -= f * xtx[col][j];
                    }
                }
            }
        }
        for a in 0..k {
            assert!(
                (fit.coefficients[a] - xtx[a][k]).abs() < 1e-8,
                "coef {}: {} vs {}",
                a,
                fit.coefficients[a],
                xtx[a][k]
            );
        }
    }

    #[test]
    fn ols_rank_deficiency_names_column() {
        // column 2 = 2 × column 1
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a: f64 = rng.random_range(-1.0..1.0);
            data.extend_from_slice(&[1.0, a, 2.0 * a]);
        }
        let design = Tensor::new(vec![20, 3], data).unwrap();
        let y = vec![1.0; 20];
        match ols_fit(&design, &y) {
            Err(Error::Singular { column }) => assert_eq!(column, 2),
            other => panic!("expected singularity, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn schwert_rule_values() {
        assert_eq!(schwert_lag(100), 12);
        assert_eq!(schwert_lag(179), 13);
        assert_eq!(schwert_lag(25), 8);
    }

    #[test]
    fn mackinnon_matches_published_criticals() {
        // 1% and 5% critical values of the constant-only case
        assert!((mackinnon_pvalue(-3.43) - 0.01).abs() < 5e-4);
        assert!((mackinnon_pvalue(-2.86) - 0.05).abs() < 5e-4);
        // clamping
        assert_eq!(mackinnon_pvalue(5.0), P_VALUE_MAX);
        assert_eq!(mackinnon_pvalue(-25.0), P_VALUE_MIN);
    }

    fn random_walk(seed: u64, t: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0f64; t];
        for i in 1..t {
            x[i] = x[i - 1] + <f64 as Real>::standard_normal(&mut rng);
        }
        x
    }

    fn ar1(seed: u64, phi: f64, t: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0f64; t];
        x[0] = <f64 as Real>::standard_normal(&mut rng) / (1.0 - phi * phi).sqrt();
        for i in 1..t {
            x[i] = phi * x[i - 1] + <f64 as Real>::standard_normal(&mut rng);
        }
        x
    }

    #[test]
    fn n_effective_matches_contract() {
        let y = random_walk(3, 179);
        let r = adf_test(&y, None).unwrap();
        assert_eq!(r.lag_order, 13);
        assert_eq!(r.n_effective, 179 - 1 - 13);
    }

    #[test]
    fn short_series_errors() {
        let y = vec![1.0f64; 12];
        assert!(matches!(adf_test(&y, Some(5)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn constant_series_is_degenerate() {
        let y = vec![2.5f64; 60];
        assert!(matches!(adf_test(&y, Some(2)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn assess_single_channel_threshold_rule() {
        // stationary AR(1) should land under the threshold, random walk above
        let mut seg = Segment {
            id: 0,
            recording: 0,
            index_in_recording: 0,
            label: None,
            values: column(&ar1(5, 0.3, 179)),
        };
        let a = assess_segment(&seg, 0.01, Some(4)).unwrap();
        assert!(!a.label.non_stationary);

        seg.values = column(&random_walk(5, 179));
        let a = assess_segment(&seg, 0.01, Some(4)).unwrap();
        assert!(a.label.non_stationary);
    }

    #[test]
    fn assess_majority_vote_with_ties_non_stationary() {
        // 3 channels: two random walks (p high), one strong AR (p low) → 1
        let t = 179;
        let rw1 = random_walk(11, t);
        let rw2 = random_walk(12, t);
        let ar = ar1(13, 0.2, t);
        let mut vals = vec![0.0f64; t * 3];
        for i in 0..t {
            vals[i * 3] = rw1[i];
            vals[i * 3 + 1] = rw2[i];
            vals[i * 3 + 2] = ar[i];
        }
        let seg = Segment {
            id: 1,
            recording: 0,
            index_in_recording: 0,
            label: None,
            values: Tensor::new(vec![t, 3], vals).unwrap(),
        };
        let a = assess_segment(&seg, 0.01, Some(4)).unwrap();
        assert!(a.label.non_stationary);

        // 2 channels split 1/1 is a tie → non-stationary
        let mut vals = vec![0.0f64; t * 2];
        for i in 0..t {
            vals[i * 2] = rw1[i];
            vals[i * 2 + 1] = ar[i];
        }
        let seg = Segment {
            id: 2,
            recording: 0,
            index_in_recording: 0,
            label: None,
            values: Tensor::new(vec![t, 2], vals).unwrap(),
        };
        let a = assess_segment(&seg, 0.01, Some(4)).unwrap();
        assert!(a.label.non_stationary);
    }

    #[test]
    fn assess_dataset_summary_ratio_undefined_without_non_stationary() {
        let segs: Vec<Segment<f64>> = (0..4)
            .map(|i| Segment {
                id: i,
                recording: 0,
                index_in_recording: i,
                label: Some(0),
                values: column(&ar1(20 + i as u64, 0.2, 179)),
            })
            .collect();
        let out = assess_dataset(&segs, 0.01, Some(4)).unwrap();
        assert_eq!(out.summary.n_non_stationary, 0);
        assert_eq!(out.summary.overall_ratio, None);
        assert_eq!(out.summary.per_class[0].ratio, None);
    }

    #[test]
    fn threshold_rule_is_monotone() {
        let y = random_walk(77, 179);
        let r = adf_test(&y, None).unwrap();
        let p = r.p_value;
        // raising the threshold must never flip a state from 0 back to 1
        let thresholds = [0.001, 0.01, 0.05, 0.2];
        let states: Vec<bool> = thresholds.iter().map(|&t| p > t).collect();
        for w in states.windows(2) {
            assert!(w[0] || !w[1], "raising threshold flipped 0 to 1");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn adf_statistic_is_scale_invariant(seed in 0u64..1000, scale in 0.001f64..1000.0) {
            let y = random_walk(seed, 120);
            let scaled: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let a = adf_test(&y, Some(6)).unwrap();
            let b = adf_test(&scaled, Some(6)).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() < 1e-8);
        }

        #[test]
        fn adf_statistic_is_shift_invariant(seed in 0u64..1000, shift in -1000.0f64..1000.0) {
            let y = random_walk(seed, 120);
            let shifted: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let a = adf_test(&y, Some(6)).unwrap();
            let b = adf_test(&shifted, Some(6)).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() < 1e-8);
        }
    }

    #[test]
    fn adf_is_deterministic() {
        let y = random_walk(8, 179);
        let a = adf_test(&y, None).unwrap();
        let b = adf_test(&y, None).unwrap();
        assert_eq!(a, b);
    }
}
