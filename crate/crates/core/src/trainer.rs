//! Supervised and mean-teacher training loops.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc::Receiver;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentPolicy};
use crate::dataset::{self, AudioClip, ClassLabel, ClipLoader, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::model::{self, Checkpoint, NetworkConfig, N_CLASSES};
use crate::nn::loss::{self, KlDirection};
use crate::nn::ops::NormMode;
use crate::nn::optim::{self, OptimizerState};
use crate::nn::{ParameterSet, Scalar, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    MeanTeacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Labeled rows per batch; `None` means half the batch in mean-teacher
    /// mode and the whole batch in supervised mode.
    pub labeled_per_batch: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub consistency_weight: f64,
    pub dropout_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub kl_direction: KlDirection,
    pub augment: AugmentPolicy,
    /// Standardize each log-mel spectrogram to zero mean and unit variance.
    pub normalize_input: bool,
    /// Write real elapsed seconds into metrics; off by default so metric
    /// files are reproducible byte for byte.
    pub record_wall_time: bool,
    /// Evaluate holdout and validation every this many epochs and after the
    /// last one; 0 evaluates only after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            labeled_per_batch: None,
            epochs: 10,
            learning_rate: 1e-3,
            consistency_weight: 1.0,
            dropout_rate: 0.1,
            ema_decay: 0.999,
            seed: 0,
            mode: TrainMode::MeanTeacher,
            kl_direction: KlDirection::TeacherStudent,
            augment: AugmentPolicy::default(),
            normalize_input: true,
            record_wall_time: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn labeled_rows(&self) -> usize {
        match (self.labeled_per_batch, self.mode) {
            (Some(l), _) => l,
            (None, TrainMode::Supervised) => self.batch_size,
            (None, TrainMode::MeanTeacher) => self.batch_size / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labeled_rows();
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if l == 0 || l > self.batch_size {
            return Err(Error::Config(format!(
                "labeled_per_batch {l} must lie in 1..={}",
                self.batch_size
            )));
        }
        if self.mode == TrainMode::Supervised && l != self.batch_size {
            return Err(Error::Config("supervised mode requires labeled_per_batch == batch_size".into()));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(Error::Config("consistency_weight must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Example {
    pub clip: AudioClip,
    pub label: Option<usize>,
    pub word: Option<String>,
    /// Clean features, present when cached.
    pub features: Option<Vec<f32>>,
}

/// Clips of one manifest loaded into memory, with clean features cached
/// for the evaluation splits.
#[derive(Debug)]
pub struct PreparedData {
    pub extractor: FeatureExtractor,
    pub normalize: bool,
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub holdout: Vec<Example>,
    pub validation: Vec<Example>,
    pub noise_bank: Vec<AudioClip>,
}

pub fn featurize(extractor: &FeatureExtractor, clip: &AudioClip, normalize: bool) -> Result<Vec<f32>> {
    let mel = extractor.log_mel(clip)?;
    let v = &mel.values.data;
    if !normalize {
        return Ok(v.iter().map(|&x| x as f32).collect());
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-6);
    Ok(v.iter().map(|&x| ((x - mean) * inv) as f32).collect())
}

impl PreparedData {
    pub fn from_examples(
        extractor: FeatureExtractor,
        normalize: bool,
        mut splits: [Vec<Example>; 4],
        noise_bank: Vec<AudioClip>,
        cache_train: bool,
    ) -> Result<Self> {
        for (i, split) in splits.iter_mut().enumerate() {
            if i >= 2 || cache_train {
                for ex in split.iter_mut() {
                    if ex.features.is_none() {
                        ex.features = Some(featurize(&extractor, &ex.clip, normalize)?);
                    }
                }
            }
        }
        let [labeled, unlabeled, holdout, validation] = splits;
        Ok(Self {
            extractor,
            normalize,
            labeled,
            unlabeled,
            holdout,
            validation,
            noise_bank,
        })
    }

    /// Load every manifest entry under `root`. Training features are cached
    /// when `cache_train` is set (augmentation disabled).
    pub fn load(
        root: &Path,
        manifest: &[ManifestEntry],
        features: &FeatureConfig,
        normalize: bool,
        cache_train: bool,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::new(features.clone())?;
        let mut loader = ClipLoader::new(root, features.sample_rate);
        let mut splits: [Vec<Example>; 4] = Default::default();
        for e in manifest {
            let idx = match e.split {
                Split::TrainLabeled => 0,
                Split::TrainUnlabeled => 1,
                Split::Holdout => 2,
                Split::Validation => 3,
            };
            if idx != 1 && e.label.is_none() {
                return Err(Error::Config(format!("{} in split {} has no label", e.path, e.split.name())));
            }
            splits[idx].push(Example {
                clip: loader.load(e)?,
                label: if idx == 1 { None } else { e.label.map(ClassLabel::code) },
                word: e.word.clone(),
                features: None,
            });
        }
        let noise_bank = dataset::load_noise_bank(root, features.sample_rate)?;
        Self::from_examples(extractor, normalize, splits, noise_bank, cache_train)
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::TrainLabeled => &self.labeled,
            Split::TrainUnlabeled => &self.unlabeled,
            Split::Holdout => &self.holdout,
            Split::Validation => &self.validation,
        }
    }

    pub fn input_shape(&self) -> [usize; 2] {
        let (m, t) = self.extractor.config().output_shape();
        [m, t]
    }

    fn view(&self, ex: &Example, policy: &AugmentPolicy, row_seed: u64) -> Result<Vec<f32>> {
        let spec = augment::sample_augmentation(seed::derive(row_seed, &[0]), policy);
        if spec.is_identity() {
            if let Some(f) = &ex.features {
                return Ok(f.clone());
            }
            return featurize(&self.extractor, &ex.clip, self.normalize);
        }
        let clip = augment::apply(&ex.clip, &spec, seed::derive(row_seed, &[1]), &self.noise_bank);
        featurize(&self.extractor, &clip, self.normalize)
    }
}

// ---------------------------------------------------------------------------
// Minibatches
// ---------------------------------------------------------------------------

/// Labeled rows come first; `labels.len()` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch<T> {
    pub student: Tensor<T>,
    pub teacher: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

/// Build a batch from `labeled` then `unlabeled` example indices (the
/// unlabeled indices point into `data.unlabeled`, or into `data.labeled` when
/// the unlabeled pool is empty). Each row gets two independently augmented
/// views; the teacher view is skipped in supervised mode.
pub fn make_minibatch<T: Scalar>(
    data: &PreparedData,
    labeled: &[usize],
    unlabeled: &[usize],
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<Minibatch<T>> {
    if labeled.is_empty() {
        return Err(Error::Config("minibatch needs at least one labeled sample".into()));
    }
    let unl_pool = if data.unlabeled.is_empty() { &data.labeled } else { &data.unlabeled };
    let rows: Vec<&Example> = labeled
        .iter()
        .map(|&i| &data.labeled[i])
        .chain(unlabeled.iter().map(|&i| &unl_pool[i]))
        .collect();
    let [m, t] = data.input_shape();
    let mut student = Vec::with_capacity(rows.len() * m * t);
    let want_teacher = cfg.mode == TrainMode::MeanTeacher;
    let mut teacher = Vec::with_capacity(if want_teacher { rows.len() * m * t } else { 0 });
    for (r, ex) in rows.iter().enumerate() {
        let s = data.view(ex, &cfg.augment, seed::derive(rng_seed, &[r as u64, 0]))?;
        student.extend(s.into_iter().map(|v| T::of(v as f64)));
        if want_teacher {
            let v = data.view(ex, &cfg.augment, seed::derive(rng_seed, &[r as u64, 1]))?;
            teacher.extend(v.into_iter().map(|v| T::of(v as f64)));
        }
    }
    let shape = [rows.len(), 1, m, t];
    Ok(Minibatch {
        student: Tensor::from_vec(&shape, student)?,
        teacher: if want_teacher { Some(Tensor::from_vec(&shape, teacher)?) } else { None },
        labels: labeled.iter().map(|&i| data.labeled[i].label.unwrap()).collect(),
    })
}

// ---------------------------------------------------------------------------
// One step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub student: ParameterSet<T>,
    pub teacher: ParameterSet<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed epochs and optimizer steps.
    pub epoch: u64,
    pub steps: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: &NetworkConfig, init_seed: u64, learning_rate: f64) -> Result<Self> {
        let student = model::build_network(net, init_seed)?;
        Ok(Self {
            teacher: student.clone(),
            optimizer: OptimizerState::new(&student, learning_rate),
            student,
            epoch: 0,
            steps: 0,
        })
    }

    /// Parameters that count as the trained model in `mode`.
    pub fn model(&self, mode: TrainMode) -> &ParameterSet<T> {
        match mode {
            TrainMode::Supervised => &self.student,
            TrainMode::MeanTeacher => &self.teacher,
        }
    }
}

impl TrainState<f32> {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            teacher: ck.teacher.clone().unwrap_or_else(|| ck.student.clone()),
            optimizer: ck
                .optimizer
                .clone()
                .unwrap_or_else(|| OptimizerState::new(&ck.student, 1e-3)),
            student: ck.student.clone(),
            epoch: ck.epoch,
            steps: ck.rng_step,
        }
    }

    /// Supervised checkpoints leave the teacher out so that
    /// [`Checkpoint::model`] picks the student.
    pub fn to_checkpoint(&self, net: &NetworkConfig, mode: TrainMode, rng_seed: u64) -> Checkpoint {
        Checkpoint {
            config: net.clone(),
            student: self.student.clone(),
            teacher: (mode == TrainMode::MeanTeacher).then(|| self.teacher.clone()),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            rng_seed,
            rng_step: self.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub class_loss: f64,
    pub consistency_loss: f64,
}

/// One optimizer step: supervised cross-entropy on the labeled rows, plus
/// `λ·KL` between teacher and student outputs over all rows in mean-teacher
/// mode; then the student's running statistics and the EMA teacher are
/// updated. `net.dropout_rate` is the live dropout rate.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    net: &NetworkConfig,
    batch: &Minibatch<T>,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<StepLosses> {
    if !state.student.same_schema(&state.teacher) {
        return Err(Error::shape("train_step", "student and teacher schemas differ"));
    }
    let n_lab = batch.labels.len();
    let (logits, cache) = model::forward_with_cache(
        &state.student,
        net,
        &batch.student,
        NormMode::Train,
        seed::derive(rng_seed, &[0]),
    )?;
    let rows: Vec<usize> = (0..n_lab).collect();
    let (class_loss, dlab) = loss::cross_entropy(&logits.select_rows(&rows), &batch.labels)?;
    let mut dlogits = Tensor::zeros(logits.shape());
    dlogits.data_mut()[..dlab.numel()].copy_from_slice(dlab.data());

    let mut consistency_loss = T::zero();
    if cfg.mode == TrainMode::MeanTeacher {
        let views = batch
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Config("mean-teacher batch lacks teacher views".into()))?;
        let t_logits = model::forward_with_cache(&state.teacher, net, views, NormMode::Train, seed::derive(rng_seed, &[1]))?.0;
        let (c, dc) = loss::kl_consistency(&t_logits, &logits, cfg.kl_direction)?;
        consistency_loss = c;
        if cfg.consistency_weight != 0.0 {
            let lam = T::of(cfg.consistency_weight);
            for (d, g) in dlogits.data_mut().iter_mut().zip(dc.data()) {
                *d = *d + lam * *g;
            }
        }
    }
    let total = class_loss + T::of(cfg.consistency_weight) * consistency_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (classification {:?}, consistency {:?})",
            class_loss, consistency_loss
        )));
    }
    let grads = model::backward(&state.student, net, &cache, &dlogits)?;
    optim::adam_step(&mut state.student, &grads, &mut state.optimizer)?;
    if !state.student.all_finite() {
        return Err(Error::NonFinite("student parameters after update".into()));
    }
    model::apply_running_updates(&mut state.student, &cache.running, net.bn_momentum);
    optim::ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
    state.steps += 1;
    Ok(StepLosses {
        class_loss: class_loss.f64(),
        consistency_loss: consistency_loss.f64(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..N_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Fraction of all samples that are misclassified with a true or
    /// predicted class in `classes`.
    pub fn confusion_mass(&self, classes: &[ClassLabel]) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let involved = |c: usize| classes.iter().any(|l| l.code() == c);
        let mut mass = 0;
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                if t != p && (involved(t) || involved(p)) {
                    mass += self.counts[t][p];
                }
            }
        }
        mass as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in ClassLabel::ALL {
            write!(s, ",{}", c.name()).unwrap();
        }
        s.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            s.push_str(ClassLabel::ALL[t].name());
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

const EVAL_CHUNK: usize = 64;

/// Class predictions for feature rows, in eval mode.
pub fn predict(params: &ParameterSet<f32>, net: &NetworkConfig, features: &[&[f32]]) -> Result<Vec<usize>> {
    let [m, t] = net.input_shape;
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * m * t);
        for f in chunk {
            if f.len() != m * t {
                return Err(Error::shape("predict", format!("feature of {} values for input {m}×{t}", f.len())));
            }
            data.extend_from_slice(f);
        }
        let x = Tensor::from_vec(&[chunk.len(), 1, m, t], data)?;
        let logits = model::forward(params, net, &x, NormMode::Eval, 0)?;
        for row in logits.data().chunks(N_CLASSES) {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Accuracy and confusion matrix of `params` on labeled examples with
/// cached clean features.
pub fn evaluate(params: &ParameterSet<f32>, net: &NetworkConfig, examples: &[Example]) -> Result<(f64, ConfusionMatrix)> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let mut feats = Vec::with_capacity(examples.len());
    for ex in examples {
        feats.push(
            ex.features
                .as_deref()
                .ok_or_else(|| Error::Config("evaluation examples need cached features".into()))?,
        );
    }
    let preds = predict(params, net, &feats)?;
    let mut cm = ConfusionMatrix::default();
    for (ex, p) in examples.iter().zip(preds) {
        let label = ex.label.ok_or_else(|| Error::Config("evaluation example without label".into()))?;
        cm.record(label, p);
    }
    Ok((cm.accuracy(), cm))
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub class_loss: f64,
    pub consistency_loss: f64,
    pub holdout_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,class_loss,cons_loss,holdout_acc,val_acc,seconds";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{METRICS_HEADER}\n");
    for m in metrics {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch,
            m.class_loss,
            m.consistency_loss,
            opt(m.holdout_accuracy),
            opt(m.validation_accuracy),
            m.seconds
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Control {
    Continue,
    Stop,
}

/// Messages read between steps.
#[derive(Debug, Clone, PartialEq)]
pub enum LoopCommand {
    Stop,
    SetHyperParams {
        learning_rate: Option<f64>,
        consistency_weight: Option<f64>,
        dropout_rate: Option<f64>,
    },
}

#[derive(Default)]
pub struct Hooks<'a> {
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics, &TrainState<f32>) -> Control>,
    pub commands: Option<&'a Receiver<LoopCommand>>,
}

pub struct LoopOutput {
    pub state: TrainState<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Endless shuffled stream over `0..n`, reshuffled on each pass.
struct IndexStream {
    n: usize,
    base_seed: u64,
    order: Vec<usize>,
    pos: usize,
    cycle: u64,
}

impl IndexStream {
    fn new(n: usize, base_seed: u64) -> Self {
        Self {
            n,
            base_seed,
            order: Vec::new(),
            pos: 0,
            cycle: 0,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut seed::rng(seed::derive(self.base_seed, &[self.cycle])));
                self.cycle += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn steps_per_epoch(cfg: &TrainConfig, n_labeled: usize, n_unlabeled: usize) -> usize {
    let l = cfg.labeled_rows();
    let u = cfg.batch_size - l;
    let lab = n_labeled.div_ceil(l);
    let unl = if u == 0 || cfg.mode == TrainMode::Supervised { 0 } else { n_unlabeled.div_ceil(u) };
    lab.max(unl).max(1)
}

/// Train `cfg.epochs` more epochs from `state`. `net.dropout_rate` is
/// replaced by `cfg.dropout_rate` and the optimizer learning rate by
/// `cfg.learning_rate`, so a resumed member picks up new hyper-parameters.
pub fn train_loop(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    data: &PreparedData,
    mut state: TrainState<f32>,
    mut hooks: Hooks<'_>,
) -> Result<LoopOutput> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let mut net = net.clone();
    net.dropout_rate = cfg.dropout_rate;
    net.validate()?;
    if data.input_shape() != net.input_shape {
        return Err(Error::Config(format!(
            "features are {:?} but the network expects {:?}",
            data.input_shape(),
            net.input_shape
        )));
    }
    if data.labeled.is_empty() {
        return Err(Error::EmptySplit(Split::TrainLabeled.name().into()));
    }
    state.optimizer.learning_rate = cfg.learning_rate;
    let n_lab = cfg.labeled_rows();
    let n_unl = cfg.batch_size - n_lab;
    let unl_len = if data.unlabeled.is_empty() { data.labeled.len() } else { data.unlabeled.len() };
    let steps = steps_per_epoch(&cfg, data.labeled.len(), data.unlabeled.len());
    let mut metrics = Vec::with_capacity(cfg.epochs);

    'epochs: for run_epoch in 0..cfg.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut lab_stream = IndexStream::new(data.labeled.len(), seed::derive(cfg.seed, &[epoch, 0x1ab]));
        let mut unl_stream = IndexStream::new(unl_len, seed::derive(cfg.seed, &[epoch, 0x0e1]));
        let (mut class_sum, mut cons_sum) = (0.0, 0.0);
        let mut done = 0usize;
        for step in 0..steps {
            if let Some(rx) = hooks.commands {
                while let Ok(cmd) = rx.try_recv() {
                    match cmd {
                        LoopCommand::Stop => break 'epochs,
                        LoopCommand::SetHyperParams {
                            learning_rate,
                            consistency_weight,
                            dropout_rate,
                        } => {
                            if let Some(lr) = learning_rate {
                                cfg.learning_rate = lr;
                                state.optimizer.learning_rate = lr;
                            }
                            if let Some(w) = consistency_weight {
                                cfg.consistency_weight = w;
                            }
                            if let Some(d) = dropout_rate {
                                cfg.dropout_rate = d;
                                net.dropout_rate = d;
                            }
                            cfg.validate()?;
                        }
                    }
                }
            }
            let step_seed = seed::derive(cfg.seed, &[epoch, step as u64]);
            let lab = lab_stream.take(n_lab);
            let unl = if cfg.mode == TrainMode::MeanTeacher { unl_stream.take(n_unl) } else { Vec::new() };
            let batch = make_minibatch::<f32>(data, &lab, &unl, &cfg, step_seed)?;
            let losses = train_step(&mut state, &net, &batch, &cfg, seed::derive(step_seed, &[0x57e9])).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged {
                    epoch: epoch as usize,
                    step,
                    detail,
                },
                other => other,
            })?;
            class_sum += losses.class_loss;
            cons_sum += losses.consistency_loss;
            done += 1;
        }
        state.epoch += 1;
        let model = state.model(cfg.mode);
        let due = run_epoch + 1 == cfg.epochs || (cfg.eval_every > 0 && state.epoch % cfg.eval_every as u64 == 0);
        let acc = |ex: &[Example]| -> Result<Option<f64>> {
            if ex.is_empty() || !due {
                Ok(None)
            } else {
                Ok(Some(evaluate(model, &net, ex)?.0))
            }
        };
        let m = EpochMetrics {
            epoch: state.epoch,
            class_loss: class_sum / done.max(1) as f64,
            consistency_loss: cons_sum / done.max(1) as f64,
            holdout_accuracy: acc(&data.holdout)?,
            validation_accuracy: acc(&data.validation)?,
            seconds: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        let control = match hooks.on_epoch.as_mut() {
            Some(f) => f(&m, &state),
            None => Control::Continue,
        };
        metrics.push(m);
        if control == Control::Stop {
            break;
        }
    }
    Ok(LoopOutput { state, metrics })
}
