//! Utility and privacy metrics.
//!
//! Per eval pair the generator's identity sub-vector is compared with the
//! original prompt (SSIM) and, on the forget side, with a centroid of every
//! forget speaker (FSSIM). AUC treats retain similarities as the positive class.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{centroid, gtf_replace, replace_reference, FilterDecision, ForgetRegistry};
use crate::generator::{forward, GeneratorModel};
use crate::numerics::{cosine_similarity, dist_sq, DenseVector, Rng};
use crate::world::{EvalPair, Partition, SpeakerWorld};

/// Cosine similarity between the output's identity part and the reference.
pub fn ssim(output: &DenseVector, reference: &DenseVector) -> Result<f64> {
    let d_id = reference.len();
    if output.len() <= d_id {
        return Err(Error::DimensionMismatch { expected: d_id + 1, found: output.len() });
    }
    cosine_similarity(&output.as_slice()[..d_id], reference.as_slice())
}

/// `‖output[d_id..] − content‖²`, content-fidelity stand-in for word error rate.
pub fn content_error(output: &DenseVector, content: &DenseVector) -> Result<f64> {
    if output.len() <= content.len() {
        return Err(Error::DimensionMismatch { expected: content.len() + 1, found: output.len() });
    }
    let d_id = output.len() - content.len();
    Ok(dist_sq(&output.as_slice()[d_id..], content.as_slice()))
}

/// `(Σᵢⱼ [aᵢ > bⱼ] + ½[aᵢ = bⱼ]) / (|A|·|B|)` via mid-ranks (Mann–Whitney U).
pub fn auc(retain_sims: &[f64], forget_sims: &[f64]) -> Result<f64> {
    check_auc_inputs(retain_sims, forget_sims)?;
    let n_pos = retain_sims.len();
    let n_neg = forget_sims.len();
    let mut all: Vec<(f64, bool)> =
        retain_sims.iter().map(|&s| (s, true)).chain(forget_sims.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of 1-based mid-ranks of the positive class, kept doubled so every
    // term is an integer.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u128;
        let positives = all[i..=j].iter().filter(|e| e.1).count() as u128;
        doubled_rank_sum += doubled_mid * positives;
        i = j + 1;
    }
    let np = n_pos as u128;
    let doubled_u = doubled_rank_sum - np * (np + 1);
    Ok(doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Direct O(|A|·|B|) evaluation of the AUC definition.
pub fn auc_pairwise(retain_sims: &[f64], forget_sims: &[f64]) -> Result<f64> {
    check_auc_inputs(retain_sims, forget_sims)?;
    let mut doubled: u64 = 0;
    for &a in retain_sims {
        for &b in forget_sims {
            if a > b {
                doubled += 2;
            } else if a == b {
                doubled += 1;
            }
        }
    }
    Ok(doubled as f64 / (2.0 * retain_sims.len() as f64 * forget_sims.len() as f64))
}

fn check_auc_inputs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPool("similarity list"));
    }
    if a.iter().chain(b).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity list"));
    }
    Ok(())
}

/// Mean and maximum similarity of the output identity part to each forget
/// representative.
pub fn fssim(output: &DenseVector, forget_representatives: &[DenseVector]) -> Result<(f64, f64)> {
    let first = forget_representatives.first().ok_or(Error::EmptyPool("forget representatives"))?;
    if output.len() < first.len() {
        return Err(Error::DimensionMismatch { expected: first.len(), found: output.len() });
    }
    let id = &output.as_slice()[..first.len()];
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for rep in forget_representatives {
        let s = cosine_similarity(id, rep.as_slice())?;
        sum += s;
        max = max.max(s);
    }
    Ok((sum / forget_representatives.len() as f64, max))
}

/// Normalized centroid of each forget speaker's test utterances, in forget-id order.
pub fn forget_representatives(world: &SpeakerWorld, partition: &Partition) -> Result<Vec<DenseVector>> {
    partition
        .forget_ids
        .iter()
        .map(|&s| {
            let members: Vec<usize> =
                partition.forget_test.iter().copied().filter(|&u| world.utterances[u].speaker_id == s).collect();
            if members.is_empty() {
                return Err(Error::EmptyPool("forget-test utterances of a forget speaker"));
            }
            centroid(world, &members)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Retain,
    Forget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    None,
    Sf,
    Gtf,
}

/// Filter applied to each reference before generation.
#[derive(Debug, Clone, Copy)]
pub enum Filter<'a> {
    None,
    Sf { registry: &'a ForgetRegistry, max_attempts: usize },
    Gtf,
}

impl Filter<'_> {
    pub fn mode(&self) -> FilterMode {
        match self {
            Filter::None => FilterMode::None,
            Filter::Sf { .. } => FilterMode::Sf,
            Filter::Gtf => FilterMode::Gtf,
        }
    }
}

/// Report-level Max-FSSIM aggregation over forget-side samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaxAggregation {
    #[default]
    MeanOfMax,
    MaxOfMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    #[serde(default)]
    pub max_aggregation: MaxAggregation,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bins: 40, max_aggregation: MaxAggregation::MeanOfMax, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub pair_index: usize,
    pub side: Side,
    /// Prompted utterance.
    pub reference: usize,
    /// Utterance the generator actually saw after filtering.
    pub effective_reference: usize,
    pub content: usize,
    pub ssim: f64,
    pub content_error: f64,
    pub fssim_avg: Option<f64>,
    pub fssim_max: Option<f64>,
    pub decision: FilterDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub retain: usize,
    pub forget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    /// `Σ min(p_retain, p_forget)` over normalized bin counts.
    pub fn overlap_coefficient(&self) -> f64 {
        let nr: usize = self.bins.iter().map(|b| b.retain).sum();
        let nf: usize = self.bins.iter().map(|b| b.forget).sum();
        if nr == 0 || nf == 0 {
            return 0.0;
        }
        self.bins.iter().map(|b| (b.retain as f64 / nr as f64).min(b.forget as f64 / nf as f64)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_forget: usize,
    pub filter: FilterMode,
    pub ssim_retain_mean: f64,
    pub ssim_forget_mean: f64,
    pub content_err_retain: f64,
    pub content_err_forget: f64,
    pub auc: f64,
    pub avg_fssim: f64,
    pub max_fssim: f64,
    pub max_aggregation: MaxAggregation,
    pub filter_seed: u64,
    pub histogram: Histogram,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn side_ssims(&self, side: Side) -> Vec<f64> {
        self.samples.iter().filter(|s| s.side == side).map(|s| s.ssim).collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores every eval pair: retain pairs first, then forget pairs, each in
/// pair order, with one filter stream seeded by `cfg.seed`.
pub fn evaluate(
    model: &GeneratorModel,
    world: &SpeakerWorld,
    partition: &Partition,
    filter: Filter<'_>,
    cfg: &EvalConfig,
    label: &str,
) -> Result<EvalReport> {
    if partition.eval_pairs_retain.is_empty() || partition.eval_pairs_forget.is_empty() {
        return Err(Error::EmptyPool("eval pairs"));
    }
    let reps = forget_representatives(world, partition)?;
    let mut rng = Rng::new(cfg.seed);
    let mut samples = Vec::with_capacity(partition.eval_pairs_retain.len() * 2);
    let sides = [(Side::Retain, &partition.eval_pairs_retain), (Side::Forget, &partition.eval_pairs_forget)];
    for (side, pairs) in sides {
        for (pair_index, &EvalPair { utterance, content }) in pairs.iter().enumerate() {
            let decision = match filter {
                Filter::None => FilterDecision::untouched(),
                Filter::Sf { registry, max_attempts } => {
                    replace_reference(registry, world, partition, utterance, &mut rng, max_attempts)?
                }
                Filter::Gtf => gtf_replace(world, partition, utterance, &mut rng)?,
            };
            let effective = decision.effective(utterance);
            let output = forward(model, world.embedding(effective), world.content(content))?;
            let (fssim_avg, fssim_max) = match side {
                Side::Forget => {
                    let (a, m) = fssim(&output, &reps)?;
                    (Some(a), Some(m))
                }
                Side::Retain => (None, None),
            };
            samples.push(SampleScore {
                pair_index,
                side,
                reference: utterance,
                effective_reference: effective,
                content,
                ssim: ssim(&output, world.embedding(utterance))?,
                content_error: content_error(&output, world.content(content))?,
                fssim_avg,
                fssim_max,
                decision,
            });
        }
    }

    let on = |side: Side| samples.iter().filter(move |s| s.side == side);
    let retain: Vec<f64> = on(Side::Retain).map(|s| s.ssim).collect();
    let forget: Vec<f64> = on(Side::Forget).map(|s| s.ssim).collect();
    let maxes = on(Side::Forget).filter_map(|s| s.fssim_max);
    let max_fssim = match cfg.max_aggregation {
        MaxAggregation::MeanOfMax => mean(maxes),
        MaxAggregation::MaxOfMax => maxes.fold(f64::NEG_INFINITY, f64::max),
    };
    let mut report = EvalReport {
        label: label.into(),
        n_forget: partition.n_forget(),
        filter: filter.mode(),
        ssim_retain_mean: mean(retain.iter().copied()),
        ssim_forget_mean: mean(forget.iter().copied()),
        content_err_retain: mean(on(Side::Retain).map(|s| s.content_error)),
        content_err_forget: mean(on(Side::Forget).map(|s| s.content_error)),
        auc: auc(&retain, &forget)?,
        avg_fssim: mean(on(Side::Forget).filter_map(|s| s.fssim_avg)),
        max_fssim,
        max_aggregation: cfg.max_aggregation,
        filter_seed: cfg.seed,
        histogram: Histogram { bins: Vec::new() },
        samples,
    };
    report.histogram = export_histograms(&report, cfg.bins)?;
    Ok(report)
}

/// Equal-width bins over `[-1, 1]`; the last bin is closed on the right.
pub fn export_histograms(report: &EvalReport, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidParameter("need at least 2 histogram bins".into()));
    }
    let width = 2.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: -1.0 + i as f64 * width,
            right: if i + 1 == bins { 1.0 } else { -1.0 + (i + 1) as f64 * width },
            retain: 0,
            forget: 0,
        })
        .collect();
    for s in &report.samples {
        let idx = libm::floor((s.ssim + 1.0) / width) as isize;
        let idx = idx.clamp(0, bins as isize - 1) as usize;
        match s.side {
            Side::Retain => out[idx].retain += 1,
            Side::Forget => out[idx].forget += 1,
        }
    }
    Ok(Histogram { bins: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};

    fn v(values: &[f64]) -> DenseVector {
        DenseVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn ssim_cases() {
        let reference = v(&[1.0, 2.0]);
        assert!((ssim(&v(&[1.0, 2.0, 9.0]), &reference).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(ssim(&v(&[-2.0, 1.0, 0.0]), &reference).unwrap(), 0.0);
        assert_eq!(ssim(&v(&[0.0, 0.0, 1.0]), &reference), Err(Error::ZeroNorm));
        assert!(ssim(&v(&[1.0, 2.0]), &reference).is_err());
    }

    #[test]
    fn content_error_cases() {
        let c = v(&[1.0, 2.0]);
        assert_eq!(content_error(&v(&[0.3, 1.0, 2.0]), &c).unwrap(), 0.0);
        assert_eq!(content_error(&v(&[0.3, 0.0, 0.0]), &c).unwrap(), 5.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8], &[0.3, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.2], &[0.9, 0.8]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.1, 0.7], &[0.5, 0.1, 0.7]).unwrap(), 0.5);
        // (1 + 1 + 0 + 0.5) / 4
        assert_eq!(auc(&[0.9, 0.4], &[0.6, 0.4]).unwrap(), 0.625);
        assert_eq!(auc_pairwise(&[0.9, 0.4], &[0.6, 0.4]).unwrap(), 0.625);
        assert!(auc(&[], &[0.1]).is_err());
        assert!(auc_pairwise(&[0.1], &[]).is_err());
    }

    #[test]
    fn fssim_cases() {
        let out = v(&[1.0, 0.0, 5.0]);
        let (a, m) = fssim(&out, &[v(&[0.6, 0.8])]).unwrap();
        assert_eq!(a, m);
        let (a, m) = fssim(&v(&[0.0, 0.0, 1.0, 7.0]), &[v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0])]).unwrap();
        assert_eq!((a, m), (0.0, 0.0));
        assert_eq!(fssim(&out, &[]), Err(Error::EmptyPool("forget representatives")));
    }

    fn report_with(ssims: &[(Side, f64)]) -> EvalReport {
        EvalReport {
            label: "t".into(),
            n_forget: 1,
            filter: FilterMode::None,
            ssim_retain_mean: 0.0,
            ssim_forget_mean: 0.0,
            content_err_retain: 0.0,
            content_err_forget: 0.0,
            auc: 0.5,
            avg_fssim: 0.0,
            max_fssim: 0.0,
            max_aggregation: MaxAggregation::MeanOfMax,
            filter_seed: 0,
            histogram: Histogram { bins: Vec::new() },
            samples: ssims
                .iter()
                .enumerate()
                .map(|(i, &(side, ssim))| SampleScore {
                    pair_index: i,
                    side,
                    reference: 0,
                    effective_reference: 0,
                    content: 0,
                    ssim,
                    content_error: 0.0,
                    fssim_avg: None,
                    fssim_max: None,
                    decision: FilterDecision::untouched(),
                })
                .collect(),
        }
    }

    #[test]
    fn histogram_terminal_bin_and_conservation() {
        let r = report_with(&[(Side::Retain, 1.0), (Side::Retain, 1.0), (Side::Forget, 1.0)]);
        let h = export_histograms(&r, 10).unwrap();
        assert_eq!(h.bins.len(), 10);
        assert_eq!(h.bins[9].retain, 2);
        assert_eq!(h.bins[9].forget, 1);
        assert_eq!(h.bins.iter().filter(|b| b.retain + b.forget > 0).count(), 1);
        assert_eq!(h.bins[0].left, -1.0);
        assert_eq!(h.bins[9].right, 1.0);
        let r = report_with(&[(Side::Retain, -1.0), (Side::Forget, 0.0), (Side::Forget, 0.37)]);
        let h = export_histograms(&r, 4).unwrap();
        assert_eq!(h.bins.iter().map(|b| b.retain).sum::<usize>(), 1);
        assert_eq!(h.bins.iter().map(|b| b.forget).sum::<usize>(), 2);
        assert_eq!(h.bins[0].retain, 1);
        assert!(export_histograms(&r, 1).is_err());
    }

    #[test]
    fn overlap_of_identical_sides_is_one() {
        let r = report_with(&[(Side::Retain, 0.2), (Side::Forget, 0.2), (Side::Retain, 0.9), (Side::Forget, 0.9)]);
        let h = export_histograms(&r, 8).unwrap();
        assert!((h.overlap_coefficient() - 1.0).abs() < 1e-15);
    }

    fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid forces ties.
        proptest::collection::vec((0u8..20).prop_map(|k| k as f64 / 19.0), 1..60)
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pairwise(a in tied_scores(), b in tied_scores()) {
            let r = auc(&a, &b).unwrap();
            let p = auc_pairwise(&a, &b).unwrap();
            prop_assert!((r - p).abs() <= 1e-12);
        }

        #[test]
        fn auc_is_antisymmetric(a in tied_scores(), b in tied_scores()) {
            let sum = auc(&a, &b).unwrap() + auc(&b, &a).unwrap();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(a in tied_scores(), b in tied_scores()) {
            let f = |x: f64| libm::exp(3.0 * x) - 2.0;
            let fa: Vec<f64> = a.iter().map(|&x| f(x)).collect();
            let fb: Vec<f64> = b.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(auc(&a, &b).unwrap(), auc(&fa, &fb).unwrap());
        }
    }
}
