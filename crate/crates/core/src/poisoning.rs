//! Parameter-modifying baselines: teacher-guided poisoning (TGP), encoder-guided
//! poisoning (EGP) and the triplet augmentation of either.
//!
//! Each training item starts from a retain-train utterance `u_r` and a train
//! content `c`. With probability `p_forget` the student's reference is swapped
//! for a forget-train utterance `u_f` while the target still describes `u_r`:
//! the teacher's output on `(u_r, c)` for TGP, or `u_r ++ c` for EGP. Swapped
//! items may also carry the negative `u_f ++ c` for the triplet hinge
//! `max(‖x − a‖² − ‖x − n‖² + margin, 0)`, anchored at the target.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::generator::{
    adamw_step, l2_into, AdamWConfig, GeneratorModel, Gradients, OptimizerState, SampleRole, SampleTag, Scratch, Trace,
    TrainOutcome,
};
use crate::numerics::{dist_sq, DenseVector, Rng};
use crate::world::{sample_forget_reference, sample_training_pair, Partition, SpeakerWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tgp,
    Egp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonConfig {
    pub method: Method,
    pub use_triplet: bool,
    pub p_forget: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PoisonConfig {
    /// EGP with the triplet term: forget ratio 0.5, margin 0.3, weight 1.0, lr 1e-4.
    fn default() -> Self {
        Self {
            method: Method::Egp,
            use_triplet: true,
            p_forget: 0.5,
            triplet_margin: 0.3,
            triplet_weight: 1.0,
            steps: 10_000,
            lr: 1e-4,
            batch: 32,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if !(0.0..=1.0).contains(&self.p_forget) {
            return bad("p_forget must be in [0, 1]");
        }
        if !(self.triplet_margin >= 0.0) || !self.triplet_margin.is_finite() {
            return bad("triplet_margin must be finite and >= 0");
        }
        if !(self.triplet_weight >= 0.0) || !self.triplet_weight.is_finite() {
            return bad("triplet_weight must be finite and >= 0");
        }
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Short label such as `EGP+Trip.`.
    pub fn label(&self) -> &'static str {
        match (self.method, self.use_triplet) {
            (Method::Tgp, false) => "TGP",
            (Method::Tgp, true) => "TGP+Trip.",
            (Method::Egp, false) => "EGP",
            (Method::Egp, true) => "EGP+Trip.",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatchItem {
    pub student_reference: DenseVector,
    pub teacher_reference: DenseVector,
    pub content: DenseVector,
    pub target: DenseVector,
    pub was_swapped: bool,
    pub negative: Option<DenseVector>,
    pub tag: SampleTag,
}

/// Encoder target: the reference sample's own embedding followed by the content.
pub fn egp_target(world: &SpeakerWorld, reference: usize, content: usize) -> DenseVector {
    world.embedding(reference).concat(world.content(content))
}

/// `max(‖x − a‖² − ‖x − n‖² + margin, 0)` and its gradient in `x`, which is
/// `2(n − a)` where the hinge is strictly positive and zero elsewhere.
pub fn triplet_loss(x: &DenseVector, a: &DenseVector, n: &DenseVector, margin: f64) -> Result<(f64, DenseVector)> {
    check_dim(x.len(), a.len())?;
    check_dim(x.len(), n.len())?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidParameter("margin must be >= 0".into()));
    }
    let mut grad = vec![0.0; x.len()];
    let loss = triplet_into(x.as_slice(), a.as_slice(), n.as_slice(), margin, 1.0, &mut grad);
    Ok((loss, DenseVector::new(grad)?))
}

/// Adds `scale · ∂triplet/∂x` into `out` and returns the hinge value.
#[inline]
fn triplet_into(x: &[f64], a: &[f64], n: &[f64], margin: f64, scale: f64, out: &mut [f64]) -> f64 {
    let hinge = dist_sq(x, a) - dist_sq(x, n) + margin;
    if hinge > 0.0 {
        for ((o, ai), ni) in out.iter_mut().zip(a).zip(n) {
            *o += 2.0 * (ni - ai) * scale;
        }
        hinge
    } else {
        0.0
    }
}

/// Builds poisoning items, reusing a forward buffer for the teacher.
struct ItemBuilder<'a> {
    world: &'a SpeakerWorld,
    partition: &'a Partition,
    cfg: &'a PoisonConfig,
    teacher: &'a GeneratorModel,
    trace: Trace,
    input: Vec<f64>,
}

impl<'a> ItemBuilder<'a> {
    fn new(
        world: &'a SpeakerWorld,
        partition: &'a Partition,
        cfg: &'a PoisonConfig,
        teacher: &'a GeneratorModel,
    ) -> Result<Self> {
        if cfg.p_forget > 0.0 && partition.forget_train.is_empty() {
            return Err(Error::EmptyPool("forget-train utterances"));
        }
        check_dim(world.d_id() + world.d_content(), teacher.input_dim())?;
        Ok(Self { world, partition, cfg, teacher, trace: Trace::default(), input: vec![0.0; teacher.input_dim()] })
    }

    fn build(&mut self, rng: &mut Rng) -> Result<TrainingBatchItem> {
        let pair = sample_training_pair(self.partition, rng)?;
        let swap = rng.uniform() < self.cfg.p_forget;
        let forget = if swap { Some(sample_forget_reference(self.partition, rng)?) } else { None };

        let world = self.world;
        let content = world.content(pair.content).clone();
        let teacher_reference = world.embedding(pair.utterance).clone();
        let target = match self.cfg.method {
            Method::Egp => egp_target(world, pair.utterance, pair.content),
            Method::Tgp => {
                let d_id = world.d_id();
                self.input[..d_id].copy_from_slice(teacher_reference.as_slice());
                self.input[d_id..].copy_from_slice(content.as_slice());
                self.teacher.forward_trace(&self.input, &mut self.trace);
                DenseVector::new(self.trace.output().to_vec())?
            }
        };
        let student_utterance = forget.unwrap_or(pair.utterance);
        let negative = match forget {
            Some(f) if self.cfg.use_triplet => Some(world.embedding(f).concat(&content)),
            _ => None,
        };
        let tag = SampleTag {
            role: if swap { SampleRole::ForgetSwap } else { SampleRole::RetainReference },
            utterance: student_utterance,
            target_utterance: pair.utterance,
            content: pair.content,
        };
        Ok(TrainingBatchItem {
            student_reference: world.embedding(student_utterance).clone(),
            teacher_reference,
            content,
            target,
            was_swapped: swap,
            negative,
            tag,
        })
    }
}

/// Draws one poisoning item. The teacher is only consulted for TGP.
pub fn build_batch_item(
    world: &SpeakerWorld,
    partition: &Partition,
    cfg: &PoisonConfig,
    teacher: &GeneratorModel,
    rng: &mut Rng,
) -> Result<TrainingBatchItem> {
    ItemBuilder::new(world, partition, cfg, teacher)?.build(rng)
}

/// Fine-tunes `student` for `cfg.steps` AdamW steps on the mean over the batch
/// of `‖x − target‖² + triplet_weight · triplet · [swapped]`.
pub fn poison(
    student: GeneratorModel,
    teacher: &GeneratorModel,
    world: &SpeakerWorld,
    partition: &Partition,
    cfg: &PoisonConfig,
) -> Result<TrainOutcome> {
    poison_observed(student, teacher, world, partition, cfg, &mut |_| {})
}

pub fn poison_observed(
    mut student: GeneratorModel,
    teacher: &GeneratorModel,
    world: &SpeakerWorld,
    partition: &Partition,
    cfg: &PoisonConfig,
    observer: &mut dyn FnMut(SampleTag),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dim(teacher.input_dim(), student.input_dim())?;
    check_dim(teacher.output_dim(), student.output_dim())?;
    let mut builder = ItemBuilder::new(world, partition, cfg, teacher)?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = OptimizerState::new(&student, AdamWConfig::with_lr(cfg.lr));
    let mut grads = Gradients::zeros_like(&student);
    let mut trace = Trace::default();
    let mut scratch = Scratch::default();
    let mut input = vec![0.0; student.input_dim()];
    let mut grad_out = vec![0.0; student.output_dim()];
    let d_id = world.d_id();
    let scale = 1.0 / cfg.batch as f64;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        grads.fill_zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let item = builder.build(&mut rng)?;
            observer(item.tag);
            input[..d_id].copy_from_slice(item.student_reference.as_slice());
            input[d_id..].copy_from_slice(item.content.as_slice());
            student.forward_trace(&input, &mut trace);
            grad_out.iter_mut().for_each(|g| *g = 0.0);
            let x = trace.output();
            loss += l2_into(x, item.target.as_slice(), scale, &mut grad_out);
            if let Some(negative) = &item.negative {
                let w = cfg.triplet_weight;
                loss += w * triplet_into(
                    x,
                    item.target.as_slice(),
                    negative.as_slice(),
                    cfg.triplet_margin,
                    w * scale,
                    &mut grad_out,
                );
            }
            student.backward_accumulate(&trace, &grad_out, &mut grads, &mut scratch);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        adamw_step(&mut student, &mut opt, &grads)?;
    }
    Ok(TrainOutcome { model: student, losses })
}
