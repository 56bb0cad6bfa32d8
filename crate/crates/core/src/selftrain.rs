//! Teacher prompt fine-tuning and the teacher/student self-training loop.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapters, AdapterConfig, TunableParams};
use crate::data::{Corpus, Split};
use crate::diffcore::{Graph, Tensor};
use crate::error::{config_err, input_err, Result};
use crate::optim::{AdamW, Optimizer};
use crate::prompting::{apply_template, one_hot, ClozeInstance, Labeled, PromptModel, PromptTemplate};
use crate::reweight::{
    meta_weights_with_grads, reweighted_step, to_weights, PseudoBatch, ReweightConfig, ReweightedBatch,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Teacher fine-tuning only.
    #[serde(rename = "prompt_fn")]
    PromptFn,
    /// Plain self-training: no warmup, uniform weights.
    #[serde(rename = "promptst")]
    PromptSt,
    /// KD warmup followed by meta re-weighted self-training.
    #[default]
    #[serde(rename = "list")]
    List,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PromptFn, Mode::PromptSt, Mode::List];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PromptFn => "prompt_fn",
            Mode::PromptSt => "promptst",
            Mode::List => "list",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown mode `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainConfig {
    /// Set per run by the harness, not read from config files.
    #[serde(skip)]
    pub mode: Mode,
    pub sessions: usize,
    pub student_steps: usize,
    pub warmup_steps: usize,
    pub unlabeled_batch: usize,
    pub labeled_ft_epochs: usize,
    /// Epochs of teacher prompt fine-tuning before the first session.
    pub fn_epochs: usize,
    /// Mini-batch size for all labeled fine-tuning.
    pub fn_batch: usize,
    pub fn_lr: f64,
    pub st_lr: f64,
    #[serde(skip)]
    pub seed: u64,
    pub reweight: ReweightConfig,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::List,
            sessions: 3,
            student_steps: 300,
            warmup_steps: 180,
            unlabeled_batch: 16,
            labeled_ft_epochs: 50,
            fn_epochs: 100,
            fn_batch: 4,
            fn_lr: 1e-3,
            st_lr: 3e-3,
            seed: 1,
            reweight: ReweightConfig::default(),
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.student_steps {
            return Err(config_err!(
                "train.warmup_steps ({}) exceeds train.student_steps ({})",
                self.warmup_steps,
                self.student_steps
            ));
        }
        if self.mode == Mode::List && self.sessions > 0 && self.warmup_steps == 0 {
            return Err(config_err!("mode list needs train.warmup_steps > 0"));
        }
        for (name, v) in [
            ("student_steps", self.student_steps),
            ("unlabeled_batch", self.unlabeled_batch),
            ("labeled_ft_epochs", self.labeled_ft_epochs),
            ("fn_batch", self.fn_batch),
        ] {
            if v == 0 {
                return Err(config_err!("train.{name} must be positive"));
            }
        }
        for (name, v) in [("fn_lr", self.fn_lr), ("st_lr", self.st_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("train.{name} must be positive"));
            }
        }
        self.reweight.validate()
    }

    /// Sessions actually run in this mode.
    pub fn effective_sessions(&self) -> usize {
        if self.mode == Mode::PromptFn {
            0
        } else {
            self.sessions
        }
    }

    /// Warmup steps actually run in this mode.
    pub fn effective_warmup(&self) -> usize {
        if self.mode == Mode::List {
            self.warmup_steps
        } else {
            0
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }
}

/// Seed of the student adapters in session `m` (1-based).
pub fn student_seed(seed: u64, m: usize) -> u64 {
    seed ^ m as u64
}

fn stream(seed: u64, m: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ m as u64);
    rng.set_stream(tag);
    rng
}

const STREAM_FN: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_VAL: u64 = 3;

/// The few-shot labeled set. Every read through [`LabeledSet::items`] is counted.
#[derive(Debug)]
pub struct LabeledSet {
    items: Vec<Labeled>,
    reads: AtomicUsize,
}

impl LabeledSet {
    pub fn new(items: Vec<Labeled>) -> Self {
        Self {
            items,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn items(&self) -> &[Labeled] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.items
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl Clone for LabeledSet {
    fn clone(&self) -> Self {
        Self::new(self.items.clone())
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub labeled: LabeledSet,
    /// Unlabeled instances; their corpus indices are in `unlabeled_index`.
    pub unlabeled: Vec<ClozeInstance>,
    pub unlabeled_index: Vec<usize>,
    pub test: Vec<Labeled>,
}

impl TaskData {
    /// Applies the template to a split, keeping the first `k` labeled examples.
    pub fn from_split(
        corpus: &Corpus,
        split: &Split,
        k: usize,
        template: &PromptTemplate,
        max_len: usize,
    ) -> Result<Self> {
        let cloze = |i: usize| apply_template(template, &corpus.records[i].tokens, None, max_len);
        let labeled = |i: &usize| -> Result<Labeled> {
            Ok(Labeled {
                instance: cloze(*i)?,
                label: corpus.records[*i].gold,
            })
        };
        if split.labeled(k).len() != k {
            return Err(config_err!("split {} has fewer than {k} labeled examples", split.id));
        }
        Ok(Self {
            labeled: LabeledSet::new(split.labeled(k).iter().map(labeled).collect::<Result<_>>()?),
            unlabeled: split.unlabeled.iter().map(|&i| cloze(i)).collect::<Result<_>>()?,
            unlabeled_index: split.unlabeled.clone(),
            test: split.test.iter().map(labeled).collect::<Result<_>>()?,
        })
    }
}

/// Teacher, student and (through the model) the shared frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleParams {
    pub teacher: TunableParams,
    pub student: TunableParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TeacherFn,
    Session,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub phase: Phase,
    pub warmup_kl_end: Option<f64>,
    pub zero_weight_frac: Option<f64>,
    pub labeled_ft_loss: f64,
    pub eval_accuracy: f64,
    /// First student step that read the labeled set.
    pub first_labeled_step: Option<usize>,
    /// First student step that computed meta-weights.
    pub first_meta_step: Option<usize>,
}

/// Hooks into the training loop; all methods default to no-ops.
pub trait Observer {
    fn session_start(&mut self, _m: usize, _teacher: &TunableParams, _student: &TunableParams) {}
    fn step(&mut self, _m: usize, _t: usize, _student: &TunableParams) {}
    fn session_end(&mut self, _m: usize, _roles: &RoleParams, _record: &SessionRecord) {}
}

pub struct NoObserver;
impl Observer for NoObserver {}

fn labeled_loss(model: &PromptModel<'_>, tunable: &TunableParams, batch: &[&Labeled]) -> Result<(f64, Vec<Tensor>)> {
    let inst: Vec<&ClozeInstance> = batch.iter().map(|l| &l.instance).collect();
    let labels: Vec<usize> = batch.iter().map(|l| l.label).collect();
    let target = one_hot(&labels, model.n_labels())?;
    let mut g = Graph::new();
    let tv = tunable.register(&mut g, true);
    let rows = model.loss_rows(&mut g, &tv, &inst, &target)?;
    let loss = g.mean(rows);
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), tunable.collect_grads(&tv, &grads)))
}

/// Prompt fine-tuning with cross-entropy on the label words. Returns the mean
/// loss of the last epoch, or the current loss when `epochs == 0`.
pub fn finetune_labeled(
    model: &PromptModel<'_>,
    tunable: &mut TunableParams,
    labeled: &[Labeled],
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(input_err!("finetune_labeled: empty labeled set"));
    }
    if epochs == 0 {
        let all: Vec<&Labeled> = labeled.iter().collect();
        return Ok(labeled_loss(model, tunable, &all)?.0);
    }
    let mut opt = AdamW::new(lr);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch.max(1)) {
            let b: Vec<&Labeled> = chunk.iter().map(|&i| &labeled[i]).collect();
            let (loss, grads) = labeled_loss(model, tunable, &b)?;
            total += loss * b.len() as f64;
            opt.step(&mut tunable.tensors_mut(), &grads)?;
        }
        last = total / labeled.len() as f64;
    }
    Ok(last)
}

/// Soft pseudo-labels from the teacher.
pub fn pseudo_label(model: &PromptModel<'_>, teacher: &TunableParams, batch: &[ClozeInstance]) -> Result<PseudoBatch> {
    let dists = model.probs(teacher, batch)?;
    PseudoBatch::new(batch.to_vec(), dists)
}

/// Mean `KL(teacher ‖ student)` over the batch with its student gradient.
pub fn kd_loss_and_grad(
    model: &PromptModel<'_>,
    student: &TunableParams,
    teacher: &TunableParams,
    batch: &[ClozeInstance],
) -> Result<(f64, Vec<Tensor>)> {
    let p = model.probs(teacher, batch)?;
    let refs: Vec<&ClozeInstance> = batch.iter().collect();
    let mut g = Graph::new();
    let tv = student.register(&mut g, true);
    let logits = model.label_logits(&mut g, &tv, &refs)?;
    let q = g.softmax_last(logits);
    let pv = g.constant(p);
    let kl = g.kl_divergence(pv, q)?;
    let grads = g.backward(kl)?;
    Ok((g.value(kl).item(), student.collect_grads(&tv, &grads)))
}

/// One warmup step on unlabeled data. Returns the KL before the step.
pub fn kd_warmup_step(
    model: &PromptModel<'_>,
    student: &mut TunableParams,
    teacher: &TunableParams,
    opt: &mut dyn Optimizer,
    batch: &[ClozeInstance],
) -> Result<f64> {
    let (loss, grads) = kd_loss_and_grad(model, student, teacher, batch)?;
    opt.step(&mut student.tensors_mut(), &grads)?;
    Ok(loss)
}

/// One teacher/student session. On return the teacher has been replaced by
/// a copy of the trained student.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    m: usize,
    roles: &mut RoleParams,
    data: &TaskData,
    cfg: &SelfTrainConfig,
    adapter_cfg: &AdapterConfig,
    model: &PromptModel<'_>,
    obs: &mut dyn Observer,
) -> Result<SessionRecord> {
    roles.student = TunableParams {
        adapters: init_adapters(adapter_cfg, &model.encoder.config, student_seed(cfg.seed, m))?,
        head: roles.teacher.head.clone(),
    };
    obs.session_start(m, &roles.teacher, &roles.student);

    let mut opt = AdamW::new(cfg.st_lr);
    let mut urng = stream(cfg.seed, m, STREAM_UNLABELED);
    let mut vrng = stream(cfg.seed, m, STREAM_VAL);
    let n_unlabeled = data.unlabeled.len();
    let bsz = cfg.unlabeled_batch.min(n_unlabeled);
    if bsz == 0 {
        return Err(input_err!("no unlabeled data"));
    }
    let warm = cfg.effective_warmup();
    let mut warmup_kl_end = None;
    let mut zero = 0usize;
    let mut seen = 0usize;
    let mut first_labeled_step = None;
    let mut first_meta_step = None;

    for t in 0..cfg.student_steps {
        let reads_before = data.labeled.reads();
        let batch: Vec<ClozeInstance> = index::sample(&mut urng, n_unlabeled, bsz)
            .into_iter()
            .map(|i| data.unlabeled[i].clone())
            .collect();
        if t < warm {
            let kl = kd_warmup_step(model, &mut roles.student, &roles.teacher, &mut opt, &batch)?;
            warmup_kl_end = Some(kl);
        } else {
            let pb = pseudo_label(model, &roles.teacher, &batch)?;
            if cfg.mode == Mode::List {
                let labeled = data.labeled.items();
                let vn = cfg.reweight.val_batch_size.min(labeled.len());
                let val: Vec<&Labeled> = index::sample(&mut vrng, labeled.len(), vn)
                    .into_iter()
                    .map(|i| &labeled[i])
                    .collect();
                let (u, grads) = meta_weights_with_grads(&pb, &val, model, &roles.student, &cfg.reweight)?;
                first_meta_step.get_or_insert(t);
                let w = to_weights(&u, &cfg.reweight);
                zero += w.data().iter().filter(|&&x| x == 0.0).count();
                seen += w.numel();
                crate::reweight::reweighted_step_from_grads(&w, &grads, &mut roles.student, &mut opt)?;
            } else {
                let n = pb.len();
                let rb = ReweightedBatch::new(pb, Tensor::ones(&[n]))?;
                reweighted_step(&rb, model, &mut roles.student, &mut opt)?;
            }
        }
        if data.labeled.reads() > reads_before {
            first_labeled_step.get_or_insert(t);
        }
        obs.step(m, t, &roles.student);
    }

    let mut frng = stream(cfg.seed, m, STREAM_FN);
    let ft_loss = finetune_labeled(
        model,
        &mut roles.student,
        data.labeled.items(),
        cfg.labeled_ft_epochs,
        cfg.fn_lr,
        cfg.fn_batch,
        &mut frng,
    )?;
    roles.teacher = roles.student.clone();
    let record = SessionRecord {
        session: m,
        phase: Phase::Session,
        warmup_kl_end,
        zero_weight_frac: (seen > 0).then(|| zero as f64 / seen as f64),
        labeled_ft_loss: ft_loss,
        eval_accuracy: model.accuracy(&roles.teacher, &data.test)?,
        first_labeled_step,
        first_meta_step,
    };
    obs.session_end(m, roles, &record);
    Ok(record)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub teacher: TunableParams,
    pub records: Vec<SessionRecord>,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eval_accuracy)
    }
}

/// Teacher prompt fine-tuning followed by the configured sessions.
pub fn run(
    cfg: &SelfTrainConfig,
    adapter_cfg: &AdapterConfig,
    model: &PromptModel<'_>,
    data: &TaskData,
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    cfg.validate()?;
    adapter_cfg.validate(&model.encoder.config)?;
    if data.labeled.is_empty() || data.test.is_empty() {
        return Err(input_err!("run needs labeled and test data"));
    }
    let mut teacher = model.init_tunable(adapter_cfg, cfg.seed)?;
    let mut frng = stream(cfg.seed, 0, STREAM_FN);
    let ft_loss = finetune_labeled(
        model,
        &mut teacher,
        data.labeled.items(),
        cfg.fn_epochs,
        cfg.fn_lr,
        cfg.fn_batch,
        &mut frng,
    )?;
    let mut records = vec![SessionRecord {
        session: 0,
        phase: Phase::TeacherFn,
        warmup_kl_end: None,
        zero_weight_frac: None,
        labeled_ft_loss: ft_loss,
        eval_accuracy: model.accuracy(&teacher, &data.test)?,
        first_labeled_step: None,
        first_meta_step: None,
    }];
    let mut roles = RoleParams {
        student: teacher.clone(),
        teacher,
    };
    for m in 1..=cfg.effective_sessions() {
        records.push(run_session(m, &mut roles, data, cfg, adapter_cfg, model, obs)?);
    }
    Ok(RunOutput {
        teacher: roles.teacher,
        records,
    })
}
