//! Inference-time filtering baselines.
//!
//! Speaker filtering (SF) compares a reference against a registry of forget-set
//! embeddings and, when the best match exceeds the threshold, keeps drawing
//! retain utterances until one scores strictly below it. Ground-truth filtering
//! (GTF) swaps exactly the references whose speaker is in the forget set.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, normalize, DenseVector, Rng};
use crate::world::{Partition, SpeakerWorld};

/// Threshold used by the reference verification model.
pub const DEFAULT_THRESHOLD: f64 = 0.86;
pub const DEFAULT_MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrySource {
    ForgetTrain,
    ForgetTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistryMode {
    /// One entry per forget utterance.
    Utterance,
    /// One normalized centroid per forget speaker.
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub speaker_id: usize,
    pub embedding: DenseVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetRegistry {
    entries: Vec<RegistryEntry>,
    threshold: f64,
}

impl ForgetRegistry {
    pub fn new(entries: Vec<RegistryEntry>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidParameter("threshold must be in (0, 1]".into()));
        }
        Ok(Self { entries, threshold })
    }

    pub fn from_partition(
        world: &SpeakerWorld,
        partition: &Partition,
        source: RegistrySource,
        mode: RegistryMode,
        threshold: f64,
    ) -> Result<Self> {
        let pool = match source {
            RegistrySource::ForgetTrain => &partition.forget_train,
            RegistrySource::ForgetTest => &partition.forget_test,
        };
        let entries = match mode {
            RegistryMode::Utterance => pool
                .iter()
                .map(|&u| RegistryEntry {
                    speaker_id: world.utterances[u].speaker_id,
                    embedding: world.embedding(u).clone(),
                })
                .collect(),
            RegistryMode::Centroid => partition
                .forget_ids
                .iter()
                .filter_map(|&s| {
                    let members: Vec<usize> =
                        pool.iter().copied().filter(|&u| world.utterances[u].speaker_id == s).collect();
                    if members.is_empty() {
                        return None;
                    }
                    Some(centroid(world, &members).map(|embedding| RegistryEntry { speaker_id: s, embedding }))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Self::new(entries, threshold)
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        Self::new(self.entries.clone(), threshold)
    }

    /// Best cosine similarity between `reference` and any registry entry.
    pub fn max_similarity(&self, reference: &DenseVector) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::EmptyPool("forget registry"));
        }
        let mut best = f64::NEG_INFINITY;
        for e in &self.entries {
            best = best.max(cosine_similarity(reference.as_slice(), e.embedding.as_slice())?);
        }
        Ok(best)
    }

    /// True when the best match strictly exceeds the threshold.
    pub fn classify(&self, reference: &DenseVector) -> Result<bool> {
        Ok(self.max_similarity(reference)? > self.threshold)
    }
}

/// Normalized mean of the given utterance embeddings.
pub fn centroid(world: &SpeakerWorld, utterances: &[usize]) -> Result<DenseVector> {
    let mut sum = DenseVector::zeros(world.d_id());
    for &u in utterances {
        sum = sum.add(world.embedding(u))?;
    }
    normalize(&sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub classified_forget: bool,
    /// Replacement utterance index, present iff `classified_forget`.
    pub replacement: Option<usize>,
    /// Candidates drawn before a replacement was accepted.
    pub attempts: usize,
}

impl FilterDecision {
    pub fn untouched() -> Self {
        Self { classified_forget: false, replacement: None, attempts: 0 }
    }

    /// The utterance actually used as reference.
    pub fn effective(&self, original: usize) -> usize {
        self.replacement.unwrap_or(original)
    }
}

/// Speaker filtering of the utterance `reference`. Replacement candidates are
/// drawn uniformly from retain-train utterances.
pub fn replace_reference(
    registry: &ForgetRegistry,
    world: &SpeakerWorld,
    partition: &Partition,
    reference: usize,
    rng: &mut Rng,
    max_attempts: usize,
) -> Result<FilterDecision> {
    if partition.retain_train.is_empty() {
        return Err(Error::EmptyPool("retain-train utterances"));
    }
    if !registry.classify(world.embedding(reference))? {
        return Ok(FilterDecision::untouched());
    }
    for attempt in 1..=max_attempts {
        let candidate = partition.retain_train[rng.index(partition.retain_train.len())];
        if registry.max_similarity(world.embedding(candidate))? < registry.threshold {
            return Ok(FilterDecision { classified_forget: true, replacement: Some(candidate), attempts: attempt });
        }
    }
    Err(Error::AttemptsExhausted { threshold: registry.threshold, attempts: max_attempts })
}

/// Ground-truth filtering: forget-speaker references are swapped for a uniform
/// retain-train utterance, retain references pass through.
pub fn gtf_replace(
    world: &SpeakerWorld,
    partition: &Partition,
    reference: usize,
    rng: &mut Rng,
) -> Result<FilterDecision> {
    if partition.retain_train.is_empty() {
        return Err(Error::EmptyPool("retain-train utterances"));
    }
    if !partition.is_forget(world.utterances[reference].speaker_id) {
        return Ok(FilterDecision::untouched());
    }
    let replacement = partition.retain_train[rng.index(partition.retain_train.len())];
    Ok(FilterDecision { classified_forget: true, replacement: Some(replacement), attempts: 1 })
}

/// Equal-error-rate threshold.
///
/// Forget probes should score above the threshold and retain probes at or
/// below it. Every distinct probe score is a candidate; the winner minimizes
/// `|FAR − FRR|`, then `FAR + FRR`, then the threshold itself. All thresholds in
/// `[s_k, s_{k+1})` make identical decisions, so the midpoint of that interval is
/// returned (the gap midpoint for perfectly separated pools).
pub fn calibrate_threshold(
    registry: &ForgetRegistry,
    forget_dev: &[DenseVector],
    retain_dev: &[DenseVector],
) -> Result<f64> {
    if forget_dev.is_empty() || retain_dev.is_empty() {
        return Err(Error::EmptyPool("calibration probes"));
    }
    let forget: Vec<f64> = forget_dev.iter().map(|p| registry.max_similarity(p)).collect::<Result<_>>()?;
    let retain: Vec<f64> = retain_dev.iter().map(|p| registry.max_similarity(p)).collect::<Result<_>>()?;
    eer_threshold(&forget, &retain)
}

/// EER threshold over raw scores; see [`calibrate_threshold`].
pub fn eer_threshold(forget_scores: &[f64], retain_scores: &[f64]) -> Result<f64> {
    if forget_scores.is_empty() || retain_scores.is_empty() {
        return Err(Error::EmptyPool("calibration scores"));
    }
    let mut candidates: Vec<f64> = forget_scores.iter().chain(retain_scores).copied().collect();
    if candidates.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores"));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    if candidates.len() < 2 {
        return Err(Error::Degenerate("all calibration similarities are equal"));
    }
    let mut forget = forget_scores.to_vec();
    let mut retain = retain_scores.to_vec();
    forget.sort_by(f64::total_cmp);
    retain.sort_by(f64::total_cmp);
    let (nf, nr) = (forget.len() as f64, retain.len() as f64);

    let mut best: Option<(usize, f64, f64)> = None;
    for (k, &t) in candidates.iter().enumerate() {
        let far = (retain.len() - retain.partition_point(|&s| s <= t)) as f64 / nr;
        let frr = forget.partition_point(|&s| s <= t) as f64 / nf;
        let key = ((far - frr).abs(), far + frr);
        let better = match best {
            None => true,
            Some((_, gap, total)) => key.0 < gap || (key.0 == gap && key.1 < total),
        };
        if better {
            best = Some((k, key.0, key.1));
        }
    }
    let (k, _, _) = best.expect("candidates nonempty");
    Ok(match candidates.get(k + 1) {
        Some(next) => 0.5 * (candidates[k] + next),
        None => candidates[k],
    })
}

/// `q`-quantile (nearest rank, `0 ≤ q ≤ 1`) of registry similarity over the
/// given probes.
pub fn similarity_quantile(registry: &ForgetRegistry, probes: &[DenseVector], q: f64) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyPool("quantile probes"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter("quantile must be in [0, 1]".into()));
    }
    let mut scores: Vec<f64> = probes.iter().map(|p| registry.max_similarity(p)).collect::<Result<_>>()?;
    scores.sort_by(f64::total_cmp);
    let idx = libm::floor(q * (scores.len() - 1) as f64) as usize;
    Ok(scores[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, partition, WorldParams};

    fn world_and_partition(n_forget: usize) -> (SpeakerWorld, Partition) {
        let params = WorldParams { n_speakers: 60, utt_per_speaker: 10, n_contents: 40, ..WorldParams::default() };
        let world = generate_world(params, 4).unwrap();
        let p = partition(&world, 5, n_forget).unwrap();
        (world, p)
    }

    fn v(values: &[f64]) -> DenseVector {
        DenseVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn classify_basic_cases() {
        let reg = ForgetRegistry::new(
            alloc::vec![RegistryEntry { speaker_id: 0, embedding: v(&[1.0, 0.0, 0.0]) }],
            DEFAULT_THRESHOLD,
        )
        .unwrap();
        assert_eq!(reg.threshold(), 0.86);
        assert!(reg.classify(&v(&[1.0, 0.0, 0.0])).unwrap());
        assert!(!reg.classify(&v(&[0.0, 1.0, 0.0])).unwrap());
        let empty = ForgetRegistry::new(Vec::new(), 0.5).unwrap();
        assert_eq!(empty.classify(&v(&[1.0, 0.0, 0.0])), Err(Error::EmptyPool("forget registry")));
        assert!(ForgetRegistry::new(Vec::new(), 0.0).is_err());
        assert!(ForgetRegistry::new(Vec::new(), 1.5).is_err());
    }

    #[test]
    fn registry_members_are_forget_speakers() {
        let (world, p) = world_and_partition(5);
        for mode in [RegistryMode::Utterance, RegistryMode::Centroid] {
            let reg = ForgetRegistry::from_partition(&world, &p, RegistrySource::ForgetTrain, mode, 0.86).unwrap();
            assert!(reg.entries().iter().all(|e| p.is_forget(e.speaker_id)));
        }
        let reg = ForgetRegistry::from_partition(&world, &p, RegistrySource::ForgetTrain, RegistryMode::Centroid, 0.86)
            .unwrap();
        assert_eq!(reg.entries().len(), 5);
    }

    #[test]
    fn far_retain_reference_is_untouched() {
        let (world, p) = world_and_partition(1);
        let reg =
            ForgetRegistry::from_partition(&world, &p, RegistrySource::ForgetTrain, RegistryMode::Utterance, 0.86)
                .unwrap();
        let far =
            p.retain_test.iter().copied().find(|&u| reg.max_similarity(world.embedding(u)).unwrap() < 0.0).unwrap();
        let d = replace_reference(&reg, &world, &p, far, &mut Rng::new(1), 100).unwrap();
        assert_eq!(d, FilterDecision::untouched());
        assert_eq!(d.effective(far), far);
    }

    #[test]
    fn forget_reference_is_replaced_below_threshold() {
        let (world, p) = world_and_partition(5);
        let reg =
            ForgetRegistry::from_partition(&world, &p, RegistrySource::ForgetTrain, RegistryMode::Utterance, 0.86)
                .unwrap();
        let mut rng = Rng::new(2);
        for &u in &p.forget_test {
            let d = replace_reference(&reg, &world, &p, u, &mut rng, 100).unwrap();
            assert!(d.classified_forget && d.attempts >= 1);
            let r = d.replacement.unwrap();
            assert!(!p.is_forget(world.utterances[r].speaker_id));
            assert!(reg.max_similarity(world.embedding(r)).unwrap() < reg.threshold());
        }
    }

    #[test]
    fn unsatisfiable_threshold_exhausts_attempts() {
        let (world, p) = world_and_partition(1);
        // Every retain-train utterance matches itself with similarity 1.
        let entries = p
            .retain_train
            .iter()
            .chain(&p.forget_train)
            .map(|&u| RegistryEntry {
                speaker_id: world.utterances[u].speaker_id,
                embedding: world.embedding(u).clone(),
            })
            .collect();
        let reg = ForgetRegistry::new(entries, 0.5).unwrap();
        let f = p.forget_test[0];
        assert_eq!(
            replace_reference(&reg, &world, &p, f, &mut Rng::new(3), 25),
            Err(Error::AttemptsExhausted { threshold: 0.5, attempts: 25 })
        );
    }

    #[test]
    fn gtf_is_an_oracle() {
        let (world, p) = world_and_partition(5);
        let mut rng = Rng::new(4);
        for &u in &p.retain_test {
            assert_eq!(gtf_replace(&world, &p, u, &mut rng).unwrap(), FilterDecision::untouched());
        }
        for &u in &p.forget_test {
            let d = gtf_replace(&world, &p, u, &mut rng).unwrap();
            assert!(d.classified_forget);
            assert!(!p.is_forget(world.utterances[d.replacement.unwrap()].speaker_id));
        }
    }

    #[test]
    fn filtering_is_deterministic() {
        let (world, p) = world_and_partition(5);
        let reg = ForgetRegistry::from_partition(&world, &p, RegistrySource::ForgetTrain, RegistryMode::Utterance, 0.3)
            .unwrap();
        let run = |seed| {
            let mut rng = Rng::new(seed);
            p.retain_test
                .iter()
                .map(|&u| replace_reference(&reg, &world, &p, u, &mut rng, 1000).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn eer_separated_pools_return_gap_midpoint() {
        let t = eer_threshold(&[0.9, 0.95, 0.8], &[0.1, 0.3, 0.2]).unwrap();
        assert!((t - 0.55).abs() < 1e-15);
        assert_eq!(
            eer_threshold(&[0.5, 0.5], &[0.5]),
            Err(Error::Degenerate("all calibration similarities are equal"))
        );
        assert!(eer_threshold(&[], &[0.1]).is_err());
    }

    #[test]
    fn eer_matches_exhaustive_sweep() {
        let (world, p) = world_and_partition(15);
        let reg =
            ForgetRegistry::from_partition(&world, &p, RegistrySource::ForgetTrain, RegistryMode::Utterance, 0.86)
                .unwrap();
        let forget: Vec<DenseVector> = p.forget_test.iter().map(|&u| world.embedding(u).clone()).collect();
        let retain: Vec<DenseVector> = p.retain_test.iter().map(|&u| world.embedding(u).clone()).collect();
        let tau = calibrate_threshold(&reg, &forget, &retain).unwrap();
        let fs: Vec<f64> = forget.iter().map(|x| reg.max_similarity(x).unwrap()).collect();
        let rs: Vec<f64> = retain.iter().map(|x| reg.max_similarity(x).unwrap()).collect();
        let rates = |t: f64| {
            let far = rs.iter().filter(|&&s| s > t).count() as f64 / rs.len() as f64;
            let frr = fs.iter().filter(|&&s| s <= t).count() as f64 / fs.len() as f64;
            (far, frr)
        };
        // Brute force: every score and a fine grid, independent of the sorted sweep.
        let mut best_gap = f64::INFINITY;
        for t in fs.iter().chain(&rs).copied().chain((0..=4000).map(|i| -1.0 + i as f64 * 0.0005)) {
            let (far, frr) = rates(t);
            best_gap = best_gap.min((far - frr).abs());
        }
        let (far, frr) = rates(tau);
        assert_eq!((far - frr).abs(), best_gap);
    }

    #[test]
    fn quantile_is_sorted_rank() {
        let reg =
            ForgetRegistry::new(alloc::vec![RegistryEntry { speaker_id: 0, embedding: v(&[1.0, 0.0]) }], 0.5).unwrap();
        let probes = [v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[-1.0, 0.0])];
        assert_eq!(similarity_quantile(&reg, &probes, 0.0).unwrap(), -1.0);
        assert_eq!(similarity_quantile(&reg, &probes, 0.5).unwrap(), 0.0);
        assert_eq!(similarity_quantile(&reg, &probes, 1.0).unwrap(), 1.0);
    }
}
