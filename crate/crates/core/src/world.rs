//! Synthetic speaker universe and the forget/retain partitioning protocol.
//!
//! Speakers are unit vectors drawn uniformly on the sphere. Each utterance is
//! `normalize(identity + ε)` with `ε ~ N(0, noise_std²·I)`. Content vectors play
//! the role of transcripts. Every speaker's utterances and the content pool are
//! split 90:10 into train and test when the world is generated, so the split
//! does not depend on which speakers are later forgotten.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_vector, normalize, DenseVector, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: usize,
    pub identity: DenseVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker_id: usize,
    pub embedding: DenseVector,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Content {
    pub id: usize,
    pub vector: DenseVector,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub n_speakers: usize,
    pub utt_per_speaker: usize,
    pub n_contents: usize,
    pub d_id: usize,
    pub d_content: usize,
    pub noise_std: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self { n_speakers: 500, utt_per_speaker: 20, n_contents: 2000, d_id: 16, d_content: 8, noise_std: 0.05 }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.n_speakers < 2 {
            return bad("n_speakers must be >= 2");
        }
        if self.utt_per_speaker < 10 {
            return bad("utt_per_speaker must be >= 10");
        }
        if self.n_contents < 2 {
            return bad("n_contents must be >= 2");
        }
        if self.d_id == 0 || self.d_content == 0 {
            return bad("embedding dimensions must be >= 1");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be finite and >= 0");
        }
        Ok(())
    }
}

/// Number of held-out items for a pool of `count`: `max(1, floor(count / 10))`.
pub fn test_count(count: usize) -> usize {
    (count / 10).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerWorld {
    pub params: WorldParams,
    pub seed: u64,
    pub speakers: Vec<Speaker>,
    pub utterances: Vec<Utterance>,
    pub contents: Vec<Content>,
}

pub fn generate_world(params: WorldParams, seed: u64) -> Result<SpeakerWorld> {
    params.validate()?;
    let mut id_rng = Rng::for_stage(seed, "identities");
    let mut noise_rng = Rng::for_stage(seed, "utterance-noise");
    let mut content_rng = Rng::for_stage(seed, "contents");
    let mut split_rng = Rng::for_stage(seed, "splits");

    let mut speakers = Vec::with_capacity(params.n_speakers);
    for id in 0..params.n_speakers {
        let identity = loop {
            let raw = gaussian_vector(&mut id_rng, params.d_id, 0.0, 1.0)?;
            if let Ok(unit) = normalize(&raw) {
                break unit;
            }
        };
        speakers.push(Speaker { id, identity });
    }

    let mut utterances = Vec::with_capacity(params.n_speakers * params.utt_per_speaker);
    let n_test = test_count(params.utt_per_speaker);
    let mut order: Vec<usize> = (0..params.utt_per_speaker).collect();
    for speaker in &speakers {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        split_rng.shuffle(&mut order);
        let mut is_test = alloc::vec![false; params.utt_per_speaker];
        order[..n_test].iter().for_each(|&i| is_test[i] = true);
        for test in is_test {
            let embedding = loop {
                let noise = gaussian_vector(&mut noise_rng, params.d_id, 0.0, params.noise_std)?;
                if let Ok(unit) = normalize(&speaker.identity.add(&noise)?) {
                    break unit;
                }
            };
            let split = if test { Split::Test } else { Split::Train };
            utterances.push(Utterance { speaker_id: speaker.id, embedding, split });
        }
    }

    let content_std = 1.0 / libm::sqrt(params.d_content as f64);
    let mut content_order: Vec<usize> = (0..params.n_contents).collect();
    split_rng.shuffle(&mut content_order);
    let mut content_test = alloc::vec![false; params.n_contents];
    content_order[..test_count(params.n_contents)].iter().for_each(|&i| content_test[i] = true);
    let contents = content_test
        .into_iter()
        .enumerate()
        .map(|(id, test)| {
            Ok(Content {
                id,
                vector: gaussian_vector(&mut content_rng, params.d_content, 0.0, content_std)?,
                split: if test { Split::Test } else { Split::Train },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SpeakerWorld { params, seed, speakers, utterances, contents })
}

impl SpeakerWorld {
    pub fn d_id(&self) -> usize {
        self.params.d_id
    }

    pub fn d_content(&self) -> usize {
        self.params.d_content
    }

    pub fn identity_of(&self, utterance: usize) -> &DenseVector {
        &self.speakers[self.utterances[utterance].speaker_id].identity
    }

    pub fn content(&self, index: usize) -> &DenseVector {
        &self.contents[index].vector
    }

    pub fn embedding(&self, utterance: usize) -> &DenseVector {
        &self.utterances[utterance].embedding
    }

    pub fn utterances_with_split(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len()).filter(|&i| self.utterances[i].split == split).collect()
    }

    pub fn contents_with_split(&self, split: Split) -> Vec<usize> {
        (0..self.contents.len()).filter(|&i| self.contents[i].split == split).collect()
    }

    /// Checks the structural invariants of a (possibly deserialized) world.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let p = &self.params;
        let bad = |msg: alloc::string::String| Err(Error::InvalidParameter(msg));
        if self.speakers.len() != p.n_speakers || self.contents.len() != p.n_contents {
            return bad("speaker or content count disagrees with params".into());
        }
        for (i, s) in self.speakers.iter().enumerate() {
            if s.id != i || s.identity.len() != p.d_id || !s.identity.all_finite() {
                return bad(format!("speaker {i} malformed"));
            }
            if (s.identity.norm() - 1.0).abs() > 1e-9 {
                return bad(format!("speaker {i} identity is not unit norm"));
            }
        }
        let mut per_speaker = alloc::vec![0usize; p.n_speakers];
        for (i, u) in self.utterances.iter().enumerate() {
            if u.speaker_id >= p.n_speakers || u.embedding.len() != p.d_id || !u.embedding.all_finite() {
                return bad(format!("utterance {i} malformed"));
            }
            per_speaker[u.speaker_id] += 1;
        }
        if per_speaker.iter().any(|&c| c < p.utt_per_speaker) {
            return bad("a speaker has fewer utterances than utt_per_speaker".into());
        }
        for (i, c) in self.contents.iter().enumerate() {
            if c.id != i || c.vector.len() != p.d_content || !c.vector.all_finite() {
                return bad(format!("content {i} malformed"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub utterance: usize,
    pub content: usize,
}

/// Forget/retain split of a world.
///
/// Index lists refer to `SpeakerWorld::utterances` and `SpeakerWorld::contents`
/// and are kept in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub seed: u64,
    pub forget_ids: Vec<usize>,
    pub retain_ids: Vec<usize>,
    pub forget_train: Vec<usize>,
    pub forget_test: Vec<usize>,
    pub retain_train: Vec<usize>,
    pub retain_test: Vec<usize>,
    pub train_contents: Vec<usize>,
    pub test_contents: Vec<usize>,
    pub eval_pairs_retain: Vec<EvalPair>,
    pub eval_pairs_forget: Vec<EvalPair>,
}

/// Picks `n_forget` speakers uniformly without replacement.
///
/// Forget sets for the same seed are nested: the first `n` speakers of one
/// seeded permutation are forgotten, so the 1-speaker set is contained in the
/// 15-speaker set and so on.
pub fn partition(world: &SpeakerWorld, seed: u64, n_forget: usize) -> Result<Partition> {
    let n = world.speakers.len();
    if n_forget == 0 || n_forget >= n {
        return Err(Error::InvalidParameter(format!("n_forget must be in 1..{n}, got {n_forget}")));
    }
    let mut rng = Rng::for_stage(seed, "forget-speakers");
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut is_forget = alloc::vec![false; n];
    order[..n_forget].iter().for_each(|&s| is_forget[s] = true);

    let forget_ids = (0..n).filter(|&s| is_forget[s]).collect();
    let retain_ids = (0..n).filter(|&s| !is_forget[s]).collect();
    let (mut forget_train, mut forget_test, mut retain_train, mut retain_test) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, u) in world.utterances.iter().enumerate() {
        let bucket = match (is_forget[u.speaker_id], u.split) {
            (true, Split::Train) => &mut forget_train,
            (true, Split::Test) => &mut forget_test,
            (false, Split::Train) => &mut retain_train,
            (false, Split::Test) => &mut retain_test,
        };
        bucket.push(i);
    }

    Ok(Partition {
        seed,
        forget_ids,
        retain_ids,
        forget_train,
        forget_test,
        retain_train,
        retain_test,
        train_contents: world.contents_with_split(Split::Train),
        test_contents: world.contents_with_split(Split::Test),
        eval_pairs_retain: Vec::new(),
        eval_pairs_forget: Vec::new(),
    })
}

/// Pairs every test content once with a random retain-test utterance and once
/// with a random forget-test utterance.
pub fn make_eval_pairs(world: &SpeakerWorld, mut partition: Partition, seed: u64) -> Result<Partition> {
    if partition.forget_test.is_empty() {
        return Err(Error::EmptyPool("forget-test utterances"));
    }
    if partition.retain_test.is_empty() {
        return Err(Error::EmptyPool("retain-test utterances"));
    }
    if partition.test_contents.is_empty() {
        return Err(Error::EmptyPool("test contents"));
    }
    debug_assert!(partition.test_contents.iter().all(|&c| world.contents[c].split == Split::Test));
    let mut rng = Rng::for_stage(seed, "eval-pairs");
    let mut retain = Vec::with_capacity(partition.test_contents.len());
    let mut forget = Vec::with_capacity(partition.test_contents.len());
    for &content in &partition.test_contents {
        let r = partition.retain_test[rng.index(partition.retain_test.len())];
        let f = partition.forget_test[rng.index(partition.forget_test.len())];
        retain.push(EvalPair { utterance: r, content });
        forget.push(EvalPair { utterance: f, content });
    }
    partition.eval_pairs_retain = retain;
    partition.eval_pairs_forget = forget;
    Ok(partition)
}

impl Partition {
    pub fn n_forget(&self) -> usize {
        self.forget_ids.len()
    }

    pub fn is_forget(&self, speaker_id: usize) -> bool {
        self.forget_ids.binary_search(&speaker_id).is_ok()
    }

    /// Every train utterance of every speaker, in world order.
    pub fn all_train(&self) -> Vec<usize> {
        let mut all = Vec::with_capacity(self.forget_train.len() + self.retain_train.len());
        all.extend_from_slice(&self.forget_train);
        all.extend_from_slice(&self.retain_train);
        all.sort_unstable();
        all
    }

    /// Checks partition invariants against its world.
    pub fn validate(&self, world: &SpeakerWorld) -> Result<()> {
        let n = world.speakers.len();
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.forget_ids.is_empty() || self.forget_ids.len() + self.retain_ids.len() != n {
            return bad("forget and retain ids must cover all speakers");
        }
        let mut seen = alloc::vec![0u8; n];
        for &s in self.forget_ids.iter().chain(&self.retain_ids) {
            if s >= n || seen[s] > 0 {
                return bad("speaker id repeated or out of range");
            }
            seen[s] = 1;
        }
        let lists = [
            (&self.forget_train, true, Split::Train),
            (&self.forget_test, true, Split::Test),
            (&self.retain_train, false, Split::Train),
            (&self.retain_test, false, Split::Test),
        ];
        let mut owner = alloc::vec![false; world.utterances.len()];
        for (list, forget, split) in lists {
            for &u in list.iter() {
                let utt = world.utterances.get(u).ok_or(Error::InvalidParameter("utterance index".into()))?;
                if owner[u] || self.is_forget(utt.speaker_id) != forget || utt.split != split {
                    return bad("utterance subsets overlap or disagree with the world");
                }
                owner[u] = true;
            }
        }
        if self.eval_pairs_retain.len() != self.eval_pairs_forget.len() {
            return bad("eval pair lists differ in length");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub utterance: usize,
    pub content: usize,
}

/// Uniform retain-train utterance with a uniform train content.
pub fn sample_training_pair(partition: &Partition, rng: &mut Rng) -> Result<TrainingPair> {
    if partition.retain_train.is_empty() {
        return Err(Error::EmptyPool("retain-train utterances"));
    }
    if partition.train_contents.is_empty() {
        return Err(Error::EmptyPool("train contents"));
    }
    let utterance = partition.retain_train[rng.index(partition.retain_train.len())];
    let content = partition.train_contents[rng.index(partition.train_contents.len())];
    Ok(TrainingPair { utterance, content })
}

/// Uniform forget-train utterance.
pub fn sample_forget_reference(partition: &Partition, rng: &mut Rng) -> Result<usize> {
    if partition.forget_train.is_empty() {
        return Err(Error::EmptyPool("forget-train utterances"));
    }
    Ok(partition.forget_train[rng.index(partition.forget_train.len())])
}
