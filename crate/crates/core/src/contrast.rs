//! Negative-pair construction and the contrastive objectives.
//!
//! Off-diagonal pairs of a batch are partitioned by stationarity state:
//! cross-state pairs are hard negatives (weight 1), same-state pairs are soft
//! negatives whose repulsion is scaled by a mode-normalized Beta pdf of the
//! normalized temporal distance. Both losses are NT-Xent style: softmax of
//! `exp(sim/τ)` with the positive pair in the numerator, symmetrized over the
//! two view directions and averaged over anchors.
//!
//! The positive term is included in the denominator by default so every
//! anchor has a well-defined loss; `literal_equation_mode` drops it, which
//! errors for anchors without qualifying negatives.

use serde::{Deserialize, Serialize};

use crate::data::SegmentMeta;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stationarity::StationarityLabel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig<F> {
    /// Softmax temperature.
    pub tau: F,
    /// Mixing weight of the two losses: `λ·L_NC + (1−λ)·L_TC`.
    pub lambda: F,
    /// Beta shape parameters of the temporal weight curve; both > 1 so the
    /// mode exists.
    pub alpha: F,
    pub beta: F,
    /// Segment-index distance at which temporal proximity saturates.
    pub horizon: usize,
    pub include_positive_in_denominator: bool,
    /// Reproduce the denominators exactly as typeset (positive excluded).
    pub literal_equation_mode: bool,
}

impl<F: Real> Default for ContrastConfig<F> {
    fn default() -> Self {
        ContrastConfig {
            tau: F::of(0.2),
            lambda: F::of(0.5),
            alpha: F::of(2.0),
            beta: F::of(8.0),
            horizon: 20,
            include_positive_in_denominator: true,
            literal_equation_mode: false,
        }
    }
}

impl<F: Real> ContrastConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= F::zero() {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < F::zero() || self.lambda > F::one() {
            return Err(Error::config(format!(
                "lambda must lie in [0,1], got {}",
                self.lambda
            )));
        }
        if self.alpha <= F::one() || self.beta <= F::one() {
            return Err(Error::config(format!(
                "alpha and beta must exceed 1 so the weight mode exists, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        Ok(())
    }
}

// ───────────────────────── Beta weights ─────────────────────────

/// `ln B(α, β) = ln Γ(α) + ln Γ(β) − ln Γ(α+β)`.
pub fn ln_beta_fn<F: Real>(alpha: F, beta: F) -> F {
    let a = alpha.as_f64();
    let b = beta.as_f64();
    F::of(
        statrs::function::gamma::ln_gamma(a) + statrs::function::gamma::ln_gamma(b)
            - statrs::function::gamma::ln_gamma(a + b),
    )
}

/// The Beta function `B(α, β)`.
pub fn beta_fn<F: Real>(alpha: F, beta: F) -> F {
    ln_beta_fn(alpha, beta).exp()
}

fn ln_beta_pdf<F: Real>(x: F, alpha: F, beta: F) -> F {
    let one = F::one();
    (alpha - one) * x.ln() + (beta - one) * (one - x).ln() - ln_beta_fn(alpha, beta)
}

/// Beta density `x^{α−1}(1−x)^{β−1} / B(α,β)`; zero outside `[0,1]`.
pub fn beta_pdf<F: Real>(x: F, alpha: F, beta: F) -> F {
    if x < F::zero() || x > F::one() {
        return F::zero();
    }
    if x == F::zero() || x == F::one() {
        // α, β > 1 in this crate, so the density vanishes at the boundary
        return F::zero();
    }
    ln_beta_pdf(x, alpha, beta).exp()
}

/// Mode of the Beta density for α, β > 1: `(α−1)/(α+β−2)`.
pub fn beta_mode<F: Real>(alpha: F, beta: F) -> F {
    let one = F::one();
    (alpha - one) / (alpha + beta - one - one)
}

/// Temporal weight: the Beta pdf normalized by its value at the mode, so the
/// maximum weight is exactly 1. Inputs outside `[0,1]` are clamped with a
/// warning.
pub fn beta_weight<F: Real>(delta_norm: F, alpha: F, beta: F) -> Result<F> {
    if alpha <= F::one() || beta <= F::one() {
        return Err(Error::config(format!(
            "beta_weight requires alpha, beta > 1, got ({}, {})",
            alpha, beta
        )));
    }
    let x = if delta_norm < F::zero() || delta_norm > F::one() {
        log::warn!(
            "beta_weight input {} outside [0,1]; clamping",
            delta_norm
        );
        delta_norm.max(F::zero()).min(F::one())
    } else {
        delta_norm
    };
    if x == F::zero() || x == F::one() {
        return Ok(F::zero());
    }
    let mode = beta_mode(alpha, beta);
    Ok((ln_beta_pdf(x, alpha, beta) - ln_beta_pdf(mode, alpha, beta)).exp())
}

// ───────────────────────── pair structure ─────────────────────────

/// Masks and weights over the `B×B` pair grid of a batch. Off-diagonal pairs
/// are partitioned: `nc_mask` holds cross-state hard negatives, `tc_mask`
/// same-state weighted negatives. `weights` carries the Beta weight on the
/// tc support and 1 elsewhere; it is symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStructure<F> {
    pub batch: usize,
    pub nc_mask: Vec<bool>,
    pub tc_mask: Vec<bool>,
    pub weights: Vec<F>,
}

impl<F: Real> PairStructure<F> {
    /// Weighted mask for the hard negatives: 1 on `nc_mask`, else 0.
    pub fn nc_weight_matrix(&self) -> Tensor<F> {
        let b = self.batch;
        Tensor::from_fn(vec![b, b], |i| {
            if self.nc_mask[i] {
                F::one()
            } else {
                F::zero()
            }
        })
    }

    /// Weighted mask for the soft negatives: `w` on `tc_mask`, else 0.
    pub fn tc_weight_matrix(&self) -> Tensor<F> {
        let b = self.batch;
        Tensor::from_fn(vec![b, b], |i| {
            if self.tc_mask[i] {
                self.weights[i]
            } else {
                F::zero()
            }
        })
    }
}

/// Build masks and temporal weights from stationarity states and segment
/// metadata. Same-recording tc pairs get `beta_weight(min(|Δidx|/horizon, 1))`;
/// pairs from different recordings have no temporal relation and stay fully
/// negative (weight 1).
pub fn build_pair_structure<F: Real>(
    labels: &[StationarityLabel],
    meta: &[SegmentMeta],
    cfg: &ContrastConfig<F>,
) -> Result<PairStructure<F>> {
    cfg.validate()?;
    let b = labels.len();
    if b < 2 {
        return Err(Error::config(format!(
            "pair construction needs a batch of at least 2, got {}",
            b
        )));
    }
    if meta.len() != b {
        return Err(Error::shape(format!(
            "{} labels but {} metadata entries",
            b,
            meta.len()
        )));
    }
    let mut nc_mask = vec![false; b * b];
    let mut tc_mask = vec![false; b * b];
    let mut weights = vec![F::one(); b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let idx = i * b + j;
            if labels[i].non_stationary != labels[j].non_stationary {
                nc_mask[idx] = true;
            } else {
                tc_mask[idx] = true;
                if meta[i].recording == meta[j].recording {
                    let d = meta[i]
                        .index_in_recording
                        .abs_diff(meta[j].index_in_recording);
                    let delta = (F::of_usize(d) / F::of_usize(cfg.horizon)).min(F::one());
                    weights[idx] = beta_weight(delta, cfg.alpha, cfg.beta)?;
                }
            }
        }
    }
    Ok(PairStructure {
        batch: b,
        nc_mask,
        tc_mask,
        weights,
    })
}

// ───────────────────────── losses ─────────────────────────

/// Per-component values of the combined loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub total: F,
    pub nc: F,
    pub tc: F,
}

/// Check up front that no anchor has an empty denominator in literal mode.
fn check_literal<F: Real>(weighted_mask: &Tensor<F>, cfg: &ContrastConfig<F>) -> Result<()> {
    if !cfg.literal_equation_mode {
        return Ok(());
    }
    let (b, _) = weighted_mask.dims2()?;
    let d = weighted_mask.data();
    for i in 0..b {
        let mut total = F::zero();
        for j in 0..b {
            total += d[i * b + j];
        }
        if total <= F::zero() {
            return Err(Error::EmptyDenominator { anchor: i });
        }
    }
    Ok(())
}

/// One direction of an NT-Xent-style loss over a similarity matrix whose
/// diagonal holds the positives. Exponents are shifted by `−1/τ` (cosine is
/// bounded by 1) so the exp never overflows; the shift cancels in the ratio.
/// Returns the per-anchor loss vector.
fn direction_loss<F: Real>(
    tape: &mut Tape<F>,
    sim: Var,
    weighted_mask: &Tensor<F>,
    cfg: &ContrastConfig<F>,
) -> Result<Var> {
    let inv_tau = F::one() / cfg.tau;
    let shifted = tape.affine(sim, inv_tau, -inv_tau)?;
    let e = tape.exp(shifted)?;
    let pos = tape.diag(e)?;
    let wneg = tape.mul_const(e, weighted_mask)?;
    let den_neg = tape.row_sum(wneg)?;
    let include_pos = cfg.include_positive_in_denominator && !cfg.literal_equation_mode;
    let den = if include_pos {
        tape.add(den_neg, pos)?
    } else {
        den_neg
    };
    let log_den = tape.log(den)?;
    let log_pos = tape.log(pos)?;
    tape.sub(log_den, log_pos)
}

fn symmetrized_loss<F: Real>(
    tape: &mut Tape<F>,
    sim_ab: Var,
    sim_ba: Var,
    weighted_mask: &Tensor<F>,
    cfg: &ContrastConfig<F>,
) -> Result<Var> {
    check_literal(weighted_mask, cfg)?;
    let la = direction_loss(tape, sim_ab, weighted_mask, cfg)?;
    let lb = direction_loss(tape, sim_ba, weighted_mask, cfg)?;
    let ma = tape.mean(la)?;
    let mb = tape.mean(lb)?;
    let s = tape.add(ma, mb)?;
    tape.affine(s, F::of(0.5), F::zero())
}

/// Hard-negative (cross-state) loss from precomputed similarity matrices.
pub fn nc_loss_from_sims<F: Real>(
    tape: &mut Tape<F>,
    sim_ab: Var,
    sim_ba: Var,
    structure: &PairStructure<F>,
    cfg: &ContrastConfig<F>,
) -> Result<Var> {
    cfg.validate()?;
    symmetrized_loss(tape, sim_ab, sim_ba, &structure.nc_weight_matrix(), cfg)
}

/// Soft-negative (same-state, temporally weighted) loss from precomputed
/// similarity matrices.
pub fn tc_loss_from_sims<F: Real>(
    tape: &mut Tape<F>,
    sim_ab: Var,
    sim_ba: Var,
    structure: &PairStructure<F>,
    cfg: &ContrastConfig<F>,
) -> Result<Var> {
    cfg.validate()?;
    symmetrized_loss(tape, sim_ab, sim_ba, &structure.tc_weight_matrix(), cfg)
}

fn sims<F: Real>(tape: &mut Tape<F>, z_a: Var, z_b: Var) -> Result<(Var, Var)> {
    let ab = tape.cosine_sim_matrix(z_a, z_b)?;
    let ba = tape.cosine_sim_matrix(z_b, z_a)?;
    Ok((ab, ba))
}

/// Non-stationary contrast loss over embeddings `z_a, z_b (B×D)`.
pub fn nc_loss<F: Real>(
    tape: &mut Tape<F>,
    z_a: Var,
    z_b: Var,
    structure: &PairStructure<F>,
    cfg: &ContrastConfig<F>,
) -> Result<Var> {
    let (ab, ba) = sims(tape, z_a, z_b)?;
    nc_loss_from_sims(tape, ab, ba, structure, cfg)
}

/// Temporal contrast loss over embeddings.
pub fn tc_loss<F: Real>(
    tape: &mut Tape<F>,
    z_a: Var,
    z_b: Var,
    structure: &PairStructure<F>,
    cfg: &ContrastConfig<F>,
) -> Result<Var> {
    let (ab, ba) = sims(tape, z_a, z_b)?;
    tc_loss_from_sims(tape, ab, ba, structure, cfg)
}

/// `λ·L_NC + (1−λ)·L_TC`, sharing one set of similarity matrices, with the
/// component values reported for logging.
pub fn combined_loss<F: Real>(
    tape: &mut Tape<F>,
    z_a: Var,
    z_b: Var,
    structure: &PairStructure<F>,
    cfg: &ContrastConfig<F>,
) -> Result<(Var, LossBreakdown<F>)> {
    cfg.validate()?;
    let (ab, ba) = sims(tape, z_a, z_b)?;
    let nc = nc_loss_from_sims(tape, ab, ba, structure, cfg)?;
    let tc = tc_loss_from_sims(tape, ab, ba, structure, cfg)?;
    let nc_part = tape.affine(nc, cfg.lambda, F::zero())?;
    let tc_part = tape.affine(tc, F::one() - cfg.lambda, F::zero())?;
    let total = tape.add(nc_part, tc_part)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item()?,
        nc: tape.value(nc).item()?,
        tc: tape.value(tc).item()?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> ContrastConfig<f64> {
        ContrastConfig {
            tau: 1.0,
            horizon: 16,
            ..ContrastConfig::default()
        }
    }

    fn label(ns: bool) -> StationarityLabel {
        StationarityLabel {
            non_stationary: ns,
            threshold_used: 0.01,
        }
    }

    fn meta(recording: usize, idx: usize) -> SegmentMeta {
        SegmentMeta {
            id: idx,
            recording,
            index_in_recording: idx,
            label: None,
        }
    }

    #[test]
    fn beta_function_factorial_identity() {
        // B(2,8) = 1!·7!/9! = 1/72
        let b = beta_fn(2.0f64, 8.0);
        assert!((b - 1.0 / 72.0).abs() < 1e-12, "B(2,8) = {}", b);
    }

    #[test]
    fn beta_pdf_matches_direct_evaluation_at_mode() {
        // 72 · (1/8) · (7/8)^7
        let expect = 72.0 * 0.125 * 0.875f64.powi(7);
        let got = beta_pdf(0.125f64, 2.0, 8.0);
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
        assert!((expect - 3.5344).abs() < 1e-3);
    }

    #[test]
    fn beta_weight_is_one_at_the_mode_and_zero_at_the_edges() {
        let w = beta_weight(0.125f64, 2.0, 8.0).unwrap();
        assert_eq!(w, 1.0);
        assert_eq!(beta_weight(0.0f64, 2.0, 8.0).unwrap(), 0.0);
        assert_eq!(beta_weight(1.0f64, 2.0, 8.0).unwrap(), 0.0);
    }

    #[test]
    fn beta_weight_requires_shapes_above_one() {
        assert!(beta_weight(0.3f64, 1.0, 8.0).is_err());
        assert!(beta_weight(0.3f64, 2.0, 0.5).is_err());
    }

    #[test]
    fn beta_weight_clamps_out_of_range_input() {
        assert_eq!(beta_weight(-0.5f64, 2.0, 8.0).unwrap(), 0.0);
        assert_eq!(beta_weight(1.5f64, 2.0, 8.0).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn beta_weight_is_unimodal(alpha in 1.1f64..6.0, beta in 1.1f64..40.0) {
            let mode = beta_mode(alpha, beta);
            let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
            let w: Vec<f64> = grid
                .iter()
                .map(|&x| beta_weight(x, alpha, beta).unwrap())
                .collect();
            for i in 0..grid.len() - 1 {
                if grid[i + 1] <= mode {
                    prop_assert!(w[i + 1] > w[i], "not increasing before the mode");
                } else if grid[i] >= mode {
                    prop_assert!(w[i + 1] < w[i], "not decreasing after the mode");
                }
            }
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn masks_partition_off_diagonal(states in proptest::collection::vec(any::<bool>(), 2..12)) {
            let b = states.len();
            let labels: Vec<StationarityLabel> = states.iter().map(|&s| label(s)).collect();
            let metas: Vec<SegmentMeta> = (0..b).map(|i| meta(i / 3, i)).collect();
            let s = build_pair_structure(&labels, &metas, &cfg()).unwrap();
            for i in 0..b {
                for j in 0..b {
                    let idx = i * b + j;
                    if i == j {
                        prop_assert!(!s.nc_mask[idx] && !s.tc_mask[idx]);
                    } else {
                        prop_assert!(s.nc_mask[idx] ^ s.tc_mask[idx]);
                    }
                    prop_assert!((s.weights[idx] - s.weights[j * b + i]).abs() < 1e-15);
                    prop_assert!((0.0..=1.0).contains(&s.weights[idx]));
                }
            }
        }
    }

    #[test]
    fn degenerate_partitions() {
        // all same state: nc empty, tc = all off-diagonal
        let labels = vec![label(false); 3];
        let metas: Vec<SegmentMeta> = (0..3).map(|i| meta(i, 0)).collect();
        let s = build_pair_structure(&labels, &metas, &cfg()).unwrap();
        assert!(s.nc_mask.iter().all(|&m| !m));
        assert_eq!(s.tc_mask.iter().filter(|&&m| m).count(), 6);

        // alternating states, B=2: nc = off-diagonal, tc empty
        let labels = vec![label(false), label(true)];
        let metas: Vec<SegmentMeta> = (0..2).map(|i| meta(i, 0)).collect();
        let s = build_pair_structure(&labels, &metas, &cfg()).unwrap();
        assert_eq!(s.nc_mask.iter().filter(|&&m| m).count(), 2);
        assert!(s.tc_mask.iter().all(|&m| !m));
    }

    #[test]
    fn same_recording_mode_distance_gets_weight_one() {
        // horizon 16, |Δidx| = 2 → delta 1/8 = mode of Beta(2,8)
        let labels = vec![label(true), label(true)];
        let metas = vec![meta(0, 4), meta(0, 6)];
        let s = build_pair_structure(&labels, &metas, &cfg()).unwrap();
        assert_eq!(s.weights[1], 1.0);
        assert_eq!(s.weights[2], 1.0);
    }

    #[test]
    fn cross_recording_tc_pairs_are_fully_negative() {
        let labels = vec![label(true), label(true)];
        let metas = vec![meta(0, 0), meta(1, 0)];
        let s = build_pair_structure(&labels, &metas, &cfg()).unwrap();
        assert_eq!(s.weights[1], 1.0);
        assert!(s.tc_mask[1]);
    }

    /// Identity similarity matrices for the hand fixtures: s_ii = 1, s_ij = 0.
    fn identity_sims(tape: &mut Tape<f64>, b: usize) -> (Var, Var) {
        let eye = Tensor::from_fn(vec![b, b], |i| if i / b == i % b { 1.0 } else { 0.0 });
        let ab = tape.leaf(eye.clone());
        let ba = tape.leaf(eye);
        (ab, ba)
    }

    #[test]
    fn nc_hand_fixture_minus_log_e_over_e_plus_one() {
        let labels = vec![label(false), label(true)];
        let metas = vec![meta(0, 0), meta(1, 0)];
        let c = cfg();
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let mut tape = Tape::new();
        let (ab, ba) = identity_sims(&mut tape, 2);
        let l = nc_loss_from_sims(&mut tape, ab, ba, &s, &c).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn tc_hand_fixture_minus_log_e_over_e_plus_w() {
        let labels = vec![label(true), label(true)];
        let metas = vec![meta(0, 4), meta(0, 7)]; // Δ = 3, horizon 16
        let c = cfg();
        let w = beta_weight(3.0 / 16.0, c.alpha, c.beta).unwrap();
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let mut tape = Tape::new();
        let (ab, ba) = identity_sims(&mut tape, 2);
        let l = tc_loss_from_sims(&mut tape, ab, ba, &s, &c).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + w)).ln();
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn zero_negatives_give_zero_loss_in_default_mode() {
        // same state ⇒ nc has no pairs; nc loss must be exactly 0
        let labels = vec![label(true), label(true)];
        let metas = vec![meta(0, 0), meta(0, 1)];
        let c = cfg();
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let mut tape = Tape::new();
        let (ab, ba) = identity_sims(&mut tape, 2);
        let l = nc_loss_from_sims(&mut tape, ab, ba, &s, &c).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn all_zero_weights_give_zero_tc_loss_in_default_mode() {
        // same recording at distance ≥ horizon ⇒ weight 0
        let labels = vec![label(true), label(true)];
        let metas = vec![meta(0, 0), meta(0, 16)];
        let c = cfg();
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        assert_eq!(s.weights[1], 0.0);
        let mut tape = Tape::new();
        let (ab, ba) = identity_sims(&mut tape, 2);
        let l = tc_loss_from_sims(&mut tape, ab, ba, &s, &c).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn literal_mode_errors_on_empty_denominator() {
        let labels = vec![label(true), label(true)];
        let metas = vec![meta(0, 0), meta(0, 1)];
        let c = ContrastConfig {
            literal_equation_mode: true,
            ..cfg()
        };
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let mut tape = Tape::new();
        let (ab, ba) = identity_sims(&mut tape, 2);
        match nc_loss_from_sims(&mut tape, ab, ba, &s, &c) {
            Err(Error::EmptyDenominator { anchor }) => assert_eq!(anchor, 0),
            other => panic!("expected empty denominator, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn unit_weights_reduce_tc_to_the_unweighted_form() {
        // same-state cross-recording pairs have weight 1; relabeling the
        // states so the same pairs become nc must give the same value.
        let c = cfg();
        let mut rng = crate::rng::stream(&[5]);
        let sim = Tensor::from_fn(vec![2, 2], |_| rng.random_range(-1.0..1.0));

        let tc_labels = vec![label(true), label(true)];
        let nc_labels = vec![label(false), label(true)];
        let metas = vec![meta(0, 0), meta(1, 0)];
        let s_tc = build_pair_structure(&tc_labels, &metas, &c).unwrap();
        let s_nc = build_pair_structure(&nc_labels, &metas, &c).unwrap();

        let mut tape = Tape::new();
        let ab = tape.leaf(sim.clone());
        let ba = tape.leaf(sim.clone());
        let l_tc = tc_loss_from_sims(&mut tape, ab, ba, &s_tc, &c).unwrap();
        let l_nc = nc_loss_from_sims(&mut tape, ab, ba, &s_nc, &c).unwrap();
        assert_eq!(
            tape.value(l_tc).item().unwrap(),
            tape.value(l_nc).item().unwrap()
        );
    }

    #[test]
    fn loss_is_non_negative_in_default_mode() {
        let mut rng = crate::rng::stream(&[17]);
        for trial in 0..20 {
            let b = 4;
            let labels: Vec<StationarityLabel> =
                (0..b).map(|_| label(rng.random_range(0..2) == 1)).collect();
            let metas: Vec<SegmentMeta> = (0..b).map(|i| meta(i / 2, i)).collect();
            let c = cfg();
            let s = build_pair_structure(&labels, &metas, &c).unwrap();
            let mut tape = Tape::new();
            let za = tape.leaf(Tensor::from_fn(vec![b, 3], |_| rng.random_range(-1.0..1.0)));
            let zb = tape.leaf(Tensor::from_fn(vec![b, 3], |_| rng.random_range(-1.0..1.0)));
            let (_, bd) = combined_loss(&mut tape, za, zb, &s, &c).unwrap();
            assert!(bd.nc >= 0.0 && bd.tc >= 0.0 && bd.total >= 0.0, "trial {}", trial);
        }
    }

    #[test]
    fn lambda_endpoints_reduce_exactly() {
        let mut rng = crate::rng::stream(&[23]);
        let b = 4;
        let labels: Vec<StationarityLabel> = vec![label(false), label(true), label(false), label(true)];
        let metas: Vec<SegmentMeta> = (0..b).map(|i| meta(i / 2, i)).collect();
        let za_t = Tensor::from_fn(vec![b, 5], |_| rng.random_range(-1.0..1.0));
        let zb_t = Tensor::from_fn(vec![b, 5], |_| rng.random_range(-1.0..1.0));

        for (lambda, want_nc) in [(1.0, true), (0.0, false)] {
            let c = ContrastConfig { lambda, ..cfg() };
            let s = build_pair_structure(&labels, &metas, &c).unwrap();
            let mut tape = Tape::new();
            let za = tape.leaf(za_t.clone());
            let zb = tape.leaf(zb_t.clone());
            let (total, bd) = combined_loss(&mut tape, za, zb, &s, &c).unwrap();
            let expect = if want_nc { bd.nc } else { bd.tc };
            assert_eq!(tape.value(total).item().unwrap(), expect);
        }

        // λ = 0.5 is the arithmetic mean of the components
        let c = ContrastConfig { lambda: 0.5, ..cfg() };
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let mut tape = Tape::new();
        let za = tape.leaf(za_t);
        let zb = tape.leaf(zb_t);
        let (total, bd) = combined_loss(&mut tape, za, zb, &s, &c).unwrap();
        let mean = 0.5 * (bd.nc + bd.tc);
        assert!((tape.value(total).item().unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn temperature_rescaling_leaves_losses_unchanged() {
        let mut rng = crate::rng::stream(&[31]);
        let b = 4;
        let sim = Tensor::from_fn(vec![b, b], |_| rng.random_range(-1.0..1.0));
        let labels = vec![label(false), label(true), label(true), label(false)];
        let metas: Vec<SegmentMeta> = (0..b).map(|i| meta(i / 2, i)).collect();
        let c1 = cfg();
        let scale = 3.7;
        let c2 = ContrastConfig {
            tau: c1.tau * scale,
            ..c1.clone()
        };
        let s = build_pair_structure(&labels, &metas, &c1).unwrap();

        let mut tape = Tape::new();
        let ab1 = tape.leaf(sim.clone());
        let ba1 = tape.leaf(sim.clone());
        let scaled = Tensor::from_fn(vec![b, b], |i| sim.data()[i] * scale);
        let ab2 = tape.leaf(scaled.clone());
        let ba2 = tape.leaf(scaled);
        let l1 = nc_loss_from_sims(&mut tape, ab1, ba1, &s, &c1).unwrap();
        let l2 = nc_loss_from_sims(&mut tape, ab2, ba2, &s, &c2).unwrap();
        let t1 = tc_loss_from_sims(&mut tape, ab1, ba1, &s, &c1).unwrap();
        let t2 = tc_loss_from_sims(&mut tape, ab2, ba2, &s, &c2).unwrap();
        assert!(
            (tape.value(l1).item().unwrap() - tape.value(l2).item().unwrap()).abs() < 1e-12
        );
        assert!(
            (tape.value(t1).item().unwrap() - tape.value(t2).item().unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn batch_permutation_leaves_the_loss_unchanged() {
        let mut rng = crate::rng::stream(&[37]);
        let b = 5;
        let labels: Vec<StationarityLabel> =
            (0..b).map(|i| label(i % 2 == 0)).collect();
        let metas: Vec<SegmentMeta> = (0..b).map(|i| meta(i / 2, i)).collect();
        let za = Tensor::from_fn(vec![b, 4], |_| rng.random_range(-1.0..1.0));
        let zb = Tensor::from_fn(vec![b, 4], |_| rng.random_range(-1.0..1.0));
        let c = cfg();

        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let mut tape = Tape::new();
        let za_v = tape.leaf(za.clone());
        let zb_v = tape.leaf(zb.clone());
        let (_, bd) = combined_loss(&mut tape, za_v, zb_v, &s, &c).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor<f64>| {
            Tensor::from_fn(vec![b, 4], |i| {
                let (r, c_) = (i / 4, i % 4);
                t.data()[perm[r] * 4 + c_]
            })
        };
        let labels_p: Vec<StationarityLabel> = perm.iter().map(|&i| labels[i]).collect();
        let metas_p: Vec<SegmentMeta> = perm.iter().map(|&i| metas[i]).collect();
        let s_p = build_pair_structure(&labels_p, &metas_p, &c).unwrap();
        let mut tape_p = Tape::new();
        let za_p = tape_p.leaf(permute_rows(&za));
        let zb_p = tape_p.leaf(permute_rows(&zb));
        let (_, bd_p) = combined_loss(&mut tape_p, za_p, zb_p, &s_p, &c).unwrap();

        assert!((bd.total - bd_p.total).abs() < 1e-10);
        assert!((bd.nc - bd_p.nc).abs() < 1e-10);
        assert!((bd.tc - bd_p.tc).abs() < 1e-10);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(&[41]);
        let b = 4;
        let d = 3;
        let labels = vec![label(false), label(true), label(false), label(true)];
        let metas: Vec<SegmentMeta> = (0..b).map(|i| meta(i / 2, i)).collect();
        let c = ContrastConfig { tau: 0.5, ..cfg() };
        let s = build_pair_structure(&labels, &metas, &c).unwrap();
        let za: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zb: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |za_vals: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![b, d], za_vals.to_vec()).unwrap());
            let z = tape.leaf(Tensor::new(vec![b, d], zb.clone()).unwrap());
            let (total, _) = combined_loss(&mut tape, a, z, &s, &c).unwrap();
            tape.value(total).item().unwrap()
        };

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![b, d], za.clone()).unwrap());
        let z = tape.leaf(Tensor::new(vec![b, d], zb.clone()).unwrap());
        let (total, _) = combined_loss(&mut tape, a, z, &s, &c).unwrap();
        tape.backward(total).unwrap();
        let grad = tape.grad(a).to_vec();

        for i in 0..za.len() {
            let h = 1e-5 * za[i].abs().max(1.0);
            let mut plus = za.clone();
            let mut minus = za.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() / fd.abs().max(1.0) < 1e-3,
                "coord {}: ad {} vs fd {}",
                i,
                grad[i],
                fd
            );
        }
    }
}
