//! Supervised contrastive training with a cyclic, step-decayed learning rate.
//!
//! Training runs in cycles of `epochs_per_cycle` epochs. Cycle `c` uses
//! `max(initial_lr * decay^c, min_lr)`; training stops after the first cycle
//! that runs at the floor, or earlier if an epoch budget is set. Batches are
//! class-balanced (P classes × Q samples) so every anchor has a positive.
//!
//! All randomness is derived from the seed and the (epoch, batch, slot)
//! coordinates of each draw, which makes a resumed run follow the same
//! trajectory as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::data::{self, PoseSequence, Window};
use crate::model::{self, batch_tensor, Mode, Model, ModelConfig};
use crate::nnkernel::{self, adam_step, AdamState, Checkpoint, ParamStore, Tape, Tensor};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_cycle: usize,
    pub initial_lr: f64,
    pub lr_decay_per_cycle: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    /// Distinct classes per batch (P); `batch_size / P` samples each (Q).
    pub classes_per_batch: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Weight of the auxiliary cross-entropy on the class readout.
    pub aux_ce_weight: f64,
    /// Epoch budget overriding the cycle-based stopping rule.
    pub max_epochs: Option<usize>,
    /// Fail instead of skipping anchors without positives.
    pub strict_positives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_cycle: 100,
            initial_lr: 0.01,
            lr_decay_per_cycle: 0.1,
            min_lr: 1e-5,
            batch_size: 32,
            classes_per_batch: 8,
            temperature: 0.07,
            seed: 0,
            aux_ce_weight: 0.0,
            max_epochs: None,
            strict_positives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs_per_cycle == 0 {
            return bad("epochs_per_cycle must be positive");
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.initial_lr) {
            return bad("need 0 < min_lr <= initial_lr");
        }
        if !(self.lr_decay_per_cycle > 0.0 && self.lr_decay_per_cycle < 1.0) {
            return bad("lr_decay_per_cycle must be in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 || self.classes_per_batch == 0 || self.batch_size % self.classes_per_batch != 0 {
            return bad("batch_size must be a positive multiple of classes_per_batch");
        }
        if self.batch_size / self.classes_per_batch < 2 {
            return bad("each class needs at least two samples per batch");
        }
        if !(self.aux_ce_weight >= 0.0) {
            return bad("aux_ce_weight must be >= 0");
        }
        Ok(())
    }

    pub fn samples_per_class(&self) -> usize {
        self.batch_size / self.classes_per_batch
    }

    fn lr_is_floor(&self, cycle: usize) -> bool {
        self.initial_lr * self.lr_decay_per_cycle.powi(cycle as i32) <= self.min_lr * (1.0 + 1e-9)
    }

    /// Epochs until the first floor-rate cycle has completed.
    pub fn scheduled_epochs(&self) -> usize {
        let mut cycle = 0;
        while !self.lr_is_floor(cycle) {
            cycle += 1;
        }
        (cycle + 1) * self.epochs_per_cycle
    }

    pub fn total_epochs(&self) -> usize {
        self.max_epochs.unwrap_or_else(|| self.scheduled_epochs())
    }
}

/// `max(initial_lr * decay^cycle, min_lr)`.
pub fn lr_schedule(config: &TrainConfig, cycle_index: usize) -> f64 {
    (config.initial_lr * config.lr_decay_per_cycle.powi(cycle_index as i32)).max(config.min_lr)
}

/// Supervised contrastive loss and its gradient with respect to the
/// embeddings `[B, D]`.
///
/// For anchor `i` with positives `P(i)` (same label, excluding `i`):
/// `l_i = -1/|P(i)| Σ_{p∈P(i)} log(exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ))`.
/// The loss is the mean of `l_i` over anchors with at least one positive.
/// Rows are not required to be unit-norm here; see [`supcon_loss`].
pub fn supcon_loss_with_grad(
    embeddings: &Tensor,
    labels: &[usize],
    temperature: f64,
    strict: bool,
) -> Result<(f64, Vec<f64>)> {
    let (b, d) = match *embeddings.shape() {
        [b, d] if b == labels.len() => (b, d),
        ref s => {
            return Err(Error::shape(
                "supcon_loss",
                format!("embeddings {s:?} with {} labels", labels.len()),
            ))
        }
    };
    if b < 2 {
        return Err(Error::shape("supcon_loss", "need at least two samples"));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let z = embeddings.data();
    let row = |i: usize| &z[i * d..(i + 1) * d];
    let mut sim = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            sim[i * b + j] = row(i).iter().zip(row(j)).map(|(x, y)| x * y).sum::<f64>() / temperature;
        }
    }
    let anchors: Vec<(usize, usize)> = (0..b)
        .filter_map(|i| {
            let n_pos = (0..b).filter(|&j| j != i && labels[j] == labels[i]).count();
            if n_pos == 0 {
                None
            } else {
                Some((i, n_pos))
            }
        })
        .collect();
    if anchors.len() < b {
        let missing = (0..b).find(|i| !anchors.iter().any(|a| a.0 == *i)).expect("some anchor");
        if strict {
            return Err(Error::NoPositives { anchor: missing });
        }
        warn!("{} of {b} anchors have no positive; skipped", b - anchors.len());
    }
    if anchors.is_empty() {
        return Err(Error::NoPositives { anchor: 0 });
    }
    let n_anchor = anchors.len() as f64;
    // dL/dsim
    let mut gsim = vec![0.0; b * b];
    let mut loss = 0.0;
    for &(i, n_pos) in &anchors {
        let s = &sim[i * b..(i + 1) * b];
        let max = (0..b).filter(|&a| a != i).map(|a| s[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (s[a] - max).exp()).sum();
        let log_denom = max + denom.ln();
        let mut li = 0.0;
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                li -= s[p] - log_denom;
            }
        }
        loss += li / n_pos as f64;
        for a in 0..b {
            if a == i {
                continue;
            }
            let softmax = (s[a] - log_denom).exp();
            let positive = if labels[a] == labels[i] { 1.0 / n_pos as f64 } else { 0.0 };
            gsim[i * b + a] += (softmax - positive) / n_anchor;
        }
    }
    let mut grad = vec![0.0; b * d];
    for i in 0..b {
        for j in 0..b {
            let g = gsim[i * b + j] / temperature;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                grad[i * d + k] += g * z[j * d + k];
                grad[j * d + k] += g * z[i * d + k];
            }
        }
    }
    Ok((loss / n_anchor, grad))
}

/// Supervised contrastive loss on unit-norm embeddings.
pub fn supcon_loss(embeddings: &Tensor, labels: &[usize], temperature: f64, strict: bool) -> Result<f64> {
    if let [_, d] = *embeddings.shape() {
        for (i, row) in embeddings.data().chunks(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::shape("supcon_loss", format!("row {i} has norm {n}, expected 1")));
            }
        }
    }
    Ok(supcon_loss_with_grad(embeddings, labels, temperature, strict)?.0)
}

/// Mean softmax cross-entropy and its gradient for logits `[B, K]`.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (b, k) = match *logits.shape() {
        [b, k] if b == labels.len() => (b, k),
        ref s => return Err(Error::shape("cross_entropy", format!("logits {s:?}"))),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("cross_entropy", format!("label {bad} >= {k} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * k];
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        for c in 0..k {
            grad[i * k + c] = ((row[c] - lse).exp() - f64::from(u8::from(c == labels[i]))) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// One epoch of class-balanced batches, as indices into `labels`.
///
/// Each batch holds `classes_per_batch` distinct classes with
/// `samples_per_class` samples each. Classes with the most unused samples are
/// preferred so that an epoch of `ceil(N / batch)` batches visits every sample
/// when classes are balanced; short classes are topped up by re-drawing.
pub fn make_batches(
    labels: &[usize],
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < classes_per_batch {
        return Err(Error::InsufficientClasses {
            needed: classes_per_batch,
            available: by_class.len(),
        });
    }
    let batch_size = classes_per_batch * samples_per_class;
    let n_batches = labels.len().div_ceil(batch_size);
    let mut queues: Vec<(usize, Vec<usize>)> = by_class
        .into_iter()
        .map(|(c, mut v)| {
            v.shuffle(rng);
            (c, v)
        })
        .collect();
    let pools: BTreeMap<usize, Vec<usize>> = queues.iter().map(|(c, v)| (*c, v.clone())).collect();
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        // random tie-break, then most remaining first
        queues.shuffle(rng);
        queues.sort_by_key(|(_, q)| std::cmp::Reverse(q.len()));
        let mut batch = Vec::with_capacity(batch_size);
        for (class, queue) in queues.iter_mut().take(classes_per_batch) {
            for _ in 0..samples_per_class {
                let idx = match queue.pop() {
                    Some(i) => i,
                    None => *pools[class].choose(rng).expect("non-empty class"),
                };
                batch.push(idx);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Frame filtering and shaping options shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub filter_low_confidence: bool,
    pub confidence_threshold: f64,
    pub num_frames: usize,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            filter_low_confidence: true,
            confidence_threshold: data::DEFAULT_CONFIDENCE_THRESHOLD,
            num_frames: data::DEFAULT_NUM_FRAMES,
            split_ratios: (0.48, 0.12, 0.40),
            split_seed: 0,
        }
    }
}

/// Filtering and normalisation. Training drops sequences that do not survive;
/// evaluation falls back to the unfiltered frames so every sequence is scored.
pub fn preprocess(seq: &PoseSequence, cfg: &DataConfig, keep_unfiltered: bool) -> Result<PoseSequence> {
    let filtered = if cfg.filter_low_confidence {
        match data::filter_low_confidence(seq, cfg.confidence_threshold) {
            Ok(s) => s,
            Err(Error::EmptySequence(_)) if keep_unfiltered => seq.clone(),
            Err(e) => return Err(e),
        }
    } else {
        seq.clone()
    };
    data::normalize_coordinates(&filtered)
}

/// Everything needed to build and train a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

impl TrainSetup {
    /// The tiny model with a 30-epoch budget and small class-balanced
    /// batches, sized for an 8-subject synthetic corpus on one CPU core.
    pub fn desk(seed: u64) -> Self {
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                initial_lr: 0.003,
                batch_size: 8,
                classes_per_batch: 4,
                seed,
                max_epochs: Some(30),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            augment: AugmentConfig::disabled(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub final_checkpoint: Option<PathBuf>,
    pub dropped_sequences: usize,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Metadata stored alongside parameters in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub setup: TrainSetup,
    /// Subject id per class index.
    pub classes: Vec<String>,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Trained parameters and the configuration needed to use them.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let model = Model::coco(meta.setup.model.clone())?;
        let expected = model.init_params(0);
        for (name, t) in expected.params() {
            match ckpt.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::CorruptCheckpoint(format!("parameter {name} missing or misshapen"))),
            }
        }
        Ok(Self {
            model,
            params: ckpt.params.clone(),
            meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&nnkernel::load_checkpoint(path)?)
    }
}

struct Prepared {
    seq: PoseSequence,
    label: usize,
}

/// Stateful training loop.
pub struct Trainer {
    setup: TrainSetup,
    model: Model,
    params: ParamStore,
    adam: AdamState,
    classes: Vec<String>,
    train: Vec<Prepared>,
    validation: Vec<Prepared>,
    epoch: usize,
    best: Option<(f64, usize, ParamStore)>,
    report: TrainReport,
    out_dir: Option<PathBuf>,
}

const LAST_CHECKPOINT: &str = "last.ckpt";
const BEST_CHECKPOINT: &str = "best.ckpt";

impl Trainer {
    /// Prepares data and initialises parameters. `out_dir`, when given,
    /// receives `last.ckpt`, `best.ckpt`, `train.log` and `report.json`.
    pub fn new(
        mut setup: TrainSetup,
        train: &[PoseSequence],
        validation: &[PoseSequence],
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        setup.train.validate()?;
        setup.augment.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let classes: Vec<String> = data::subjects_of(train).into_iter().collect();
        if setup.model.num_classes == 0 {
            setup.model.num_classes = classes.len();
        }
        let model = Model::coco(setup.model.clone())?;
        let params = model.init_params(setup.train.seed);
        let adam = AdamState::new(setup.train.initial_lr);
        Self::assemble(setup, model, params, adam, classes, train, validation, out_dir)
    }

    /// Continues from a `last.ckpt` written by an earlier run.
    pub fn resume(
        checkpoint: &Checkpoint,
        train: &[PoseSequence],
        validation: &[PoseSequence],
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let trained = TrainedModel::from_checkpoint(checkpoint)?;
        let adam = checkpoint
            .optimizer
            .clone()
            .ok_or_else(|| Error::CorruptCheckpoint("no optimizer state to resume from".into()))?;
        let meta = trained.meta;
        let mut t = Self::assemble(
            meta.setup,
            trained.model,
            trained.params,
            adam,
            meta.classes,
            train,
            validation,
            out_dir,
        )?;
        t.epoch = meta.epoch;
        if let (Some(loss), Some(epoch), Some(dir)) = (meta.best_val_loss, meta.best_epoch, out_dir) {
            let best = TrainedModel::load(&dir.join(BEST_CHECKPOINT))?;
            t.best = Some((loss, epoch, best.params));
        }
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        setup: TrainSetup,
        model: Model,
        params: ParamStore,
        adam: AdamState,
        classes: Vec<String>,
        train: &[PoseSequence],
        validation: &[PoseSequence],
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut dropped = 0;
        let mut prepare = |seqs: &[PoseSequence], strict_classes: bool| -> Result<Vec<Prepared>> {
            let mut out = Vec::new();
            let mut local: BTreeMap<String, usize> = BTreeMap::new();
            for s in seqs {
                let label = match index.get(s.subject_id.as_str()) {
                    Some(&l) => l,
                    None if !strict_classes => {
                        let n = local.len();
                        *local.entry(s.subject_id.clone()).or_insert(n)
                    }
                    None => return Err(Error::Config(format!("unknown training subject {}", s.subject_id))),
                };
                match preprocess(s, &setup.data, false) {
                    Ok(seq) => out.push(Prepared { seq, label }),
                    Err(e @ (Error::EmptySequence(_) | Error::DegenerateSequence(_))) => {
                        warn!("dropping sequence: {e}");
                        dropped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        };
        let train = prepare(train, true)?;
        let validation = prepare(validation, false)?;
        if train.is_empty() {
            return Err(Error::Config("no training sequence survived preprocessing".into()));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            setup,
            model,
            params,
            adam,
            classes,
            train,
            validation,
            epoch: 0,
            best: None,
            report: TrainReport {
                dropped_sequences: dropped,
                ..TrainReport::default()
            },
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    /// Replaces the epoch budget, e.g. to extend a resumed run.
    pub fn set_max_epochs(&mut self, max_epochs: Option<usize>) {
        self.setup.train.max_epochs = max_epochs;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            setup: self.setup.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch,
            best_val_loss: self.best.as_ref().map(|b| b.0),
            best_epoch: self.best.as_ref().map(|b| b.1),
        }
    }

    /// Snapshot of the current state, including optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::to_string(&self.meta()).expect("meta serialises"),
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }

    fn sample(&self, item: &Prepared, epoch: usize, batch: usize, slot: usize) -> Result<PoseSequence> {
        let mut r = rng::derived(self.setup.train.seed, &[epoch as u64, batch as u64, slot as u64]);
        let (aug, _) = augment_pipeline(&item.seq, &self.setup.augment, &mut r);
        let target = self.setup.model.num_frames;
        let window = Window::random(aug.len(), target, &mut r);
        data::fixed_length(&aug, target, window)
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch;
        let cfg = self.setup.train.clone();
        let cycle = epoch / cfg.epochs_per_cycle;
        let lr = lr_schedule(&cfg, cycle);
        self.adam.learning_rate = lr;
        let labels: Vec<usize> = self.train.iter().map(|p| p.label).collect();
        let mut batch_rng = rng::derived(cfg.seed, &[epoch as u64, u64::MAX]);
        let batches = make_batches(&labels, cfg.classes_per_batch, cfg.samples_per_class(), &mut batch_rng)?;
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let samples = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| self.sample(&self.train[i], epoch, bi, slot))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PoseSequence> = samples.iter().collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| self.train[i].label).collect();
            let loss = self
                .step(batch_tensor(&refs)?, &batch_labels)
                .map_err(|e| Error::TrainingDiverged {
                    epoch,
                    source: Box::new(e),
                })?;
            total += loss;
        }
        let loss = total / batches.len() as f64;
        let val_loss = self.validation_loss()?;
        if let Some(v) = val_loss {
            if self.best.as_ref().is_none_or(|b| v < b.0) {
                self.best = Some((v, epoch, self.params.clone()));
                if let Some(dir) = &self.out_dir {
                    let mut ck = self.checkpoint();
                    ck.optimizer = None;
                    nnkernel::save_checkpoint(&ck, &dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        self.epoch += 1;
        let record = EpochRecord {
            epoch,
            cycle,
            learning_rate: lr,
            loss,
            val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        info!("epoch {epoch} cycle {cycle} lr {lr:.1e} loss {loss:.5} val {val_loss:?}");
        if let Some(dir) = &self.out_dir {
            nnkernel::save_checkpoint(&self.checkpoint(), &dir.join(LAST_CHECKPOINT))?;
            let mut log = fs::OpenOptions::new().create(true).append(true).open(dir.join("train.log"))?;
            writeln!(
                log,
                "epoch {epoch} cycle {cycle} lr {lr:e} loss {loss} val_loss {}",
                val_loss.map_or("-".to_string(), |v| v.to_string())
            )?;
        }
        self.report.epochs.push(record.clone());
        Ok(record)
    }

    fn step(&mut self, input: Tensor, labels: &[usize]) -> Result<f64> {
        let cfg = &self.setup.train;
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = self.model.forward(&mut tape, &self.params, x, Mode::Train)?;
        let (loss, grad) = supcon_loss_with_grad(tape.value(out.embedding), labels, cfg.temperature, cfg.strict_positives)?;
        let mut root = tape.loss(out.embedding, loss, grad)?;
        let mut total = loss;
        if cfg.aux_ce_weight > 0.0 {
            if let Some(logits) = out.logits {
                let (ce, g) = cross_entropy_with_grad(tape.value(logits), labels)?;
                let ce_node = tape.loss(logits, ce, g)?;
                let weighted = tape.scale(ce_node, cfg.aux_ce_weight)?;
                root = tape.add(root, weighted)?;
                total += cfg.aux_ce_weight * ce;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        let grads = tape.backward(root)?;
        self.params.zero_grad();
        tape.write_param_grads(&grads, &mut self.params);
        adam_step(&mut self.params, &mut self.adam)?;
        model::update_running_stats(&mut self.params, &out.stats, model::BN_MOMENTUM);
        Ok(total)
    }

    /// Eval-mode contrastive loss over the whole validation set.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.validation.len() < 2 {
            return Ok(None);
        }
        let target = self.setup.model.num_frames;
        let shaped = self
            .validation
            .iter()
            .map(|p| data::fixed_length(&p.seq, target, Window::Centered))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = self.validation.iter().map(|p| p.label).collect();
        let refs: Vec<&PoseSequence> = shaped.iter().collect();
        let emb = embed_batched(&self.model, &self.params, &refs)?;
        match supcon_loss_with_grad(&emb, &labels, self.setup.train.temperature, false) {
            Ok((l, _)) => Ok(Some(l)),
            Err(Error::NoPositives { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Runs the remaining epochs and returns the report and the selected
    /// parameters (best validation loss, or the final ones without
    /// validation data).
    pub fn run(mut self) -> Result<(TrainReport, TrainedModel)> {
        let total = self.setup.train.total_epochs();
        if let Some(dir) = &self.out_dir {
            if self.epoch == 0 {
                nnkernel::save_checkpoint(&self.checkpoint(), &dir.join(LAST_CHECKPOINT))?;
            }
        }
        while self.epoch < total {
            self.run_epoch()?;
        }
        let meta = self.meta();
        let (params, best_epoch) = match self.best.take() {
            Some((_, epoch, params)) => (params, Some(epoch)),
            None => (self.params.clone(), None),
        };
        self.report.best_epoch = best_epoch;
        if let Some(dir) = &self.out_dir {
            let path = dir.join("final.ckpt");
            let ck = Checkpoint {
                meta: serde_json::to_string(&meta)?,
                params: params.clone(),
                optimizer: None,
            };
            nnkernel::save_checkpoint(&ck, &path)?;
            self.report.final_checkpoint = Some(path);
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        }
        Ok((
            self.report,
            TrainedModel {
                model: self.model,
                params,
                meta,
            },
        ))
    }
}

/// Trains from scratch on `train`, selecting by loss on `validation`.
pub fn train(
    setup: &TrainSetup,
    train: &[PoseSequence],
    validation: &[PoseSequence],
    out_dir: Option<&Path>,
) -> Result<(TrainReport, TrainedModel)> {
    Trainer::new(setup.clone(), train, validation, out_dir)?.run()
}

const EMBED_CHUNK: usize = 32;

/// Eval-mode embeddings for equal-length sequences, in chunks.
pub fn embed_batched(model: &Model, params: &ParamStore, seqs: &[&PoseSequence]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut d = model.config().embedding_dim;
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let e = model.embed(params, batch_tensor(chunk)?)?;
        d = e.shape()[1];
        data.extend_from_slice(e.data());
    }
    Tensor::new(vec![seqs.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let mut data: Vec<f64> = (0..b * d).map(|_| r.random_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Tensor::new(vec![b, d], data).unwrap()
    }

    #[test]
    fn lr_schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(&c, 0), 0.01);
        assert!((lr_schedule(&c, 2) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(&c, 9), 1e-5);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let lr = lr_schedule(&c, k);
            assert!(lr <= prev && lr >= c.min_lr);
            prev = lr;
        }
        // 0.01, 1e-3, 1e-4, then one cycle at the 1e-5 floor
        assert_eq!(c.scheduled_epochs(), 400);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig { min_lr: 0.1, ..TrainConfig::default() },
            TrainConfig { temperature: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 30, ..TrainConfig::default() },
            TrainConfig { classes_per_batch: 32, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn supcon_degenerate_pair() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = supcon_loss(&z, &[3, 3], 0.5, true).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn supcon_is_non_negative_and_permutation_invariant() {
        for seed in 0..20 {
            let z = unit_rows(8, 5, seed);
            let labels = [0, 0, 1, 1, 2, 2, 2, 3];
            let l = supcon_loss(&z, &labels, 0.1, false).unwrap();
            assert!(l >= 0.0);
            let perm = [7usize, 3, 5, 0, 6, 1, 2, 4];
            let pz: Vec<f64> = perm.iter().flat_map(|&i| z.row(i).to_vec()).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let lp = supcon_loss(&Tensor::new(vec![8, 5], pz).unwrap(), &pl, 0.1, false).unwrap();
            assert!((l - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn supcon_errors() {
        let z = unit_rows(3, 4, 1);
        assert!(matches!(supcon_loss(&z, &[0, 0, 1], 0.1, true), Err(Error::NoPositives { anchor: 2 })));
        assert!(supcon_loss(&z, &[0, 0, 1], 0.1, false).is_ok());
        let not_unit = Tensor::filled(&[2, 2], 1.0);
        assert!(supcon_loss(&not_unit, &[0, 0], 0.1, false).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (l, g) = cross_entropy_with_grad(&logits, &[1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((g[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn batches_are_class_balanced_and_deterministic() {
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let a = make_batches(&labels, 2, 2, &mut rng::seeded(5)).unwrap();
        let b = make_batches(&labels, 2, 2, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut seen = vec![0; 16];
        for batch in &a {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in batch {
                *counts.entry(labels[i]).or_default() += 1;
                seen[i] += 1;
            }
            assert_eq!(counts.len(), 2);
            assert!(counts.values().all(|&c| c == 2));
        }
        assert!(seen.iter().all(|&c| c >= 1));
        assert!(matches!(
            make_batches(&labels, 5, 2, &mut rng::seeded(0)),
            Err(Error::InsufficientClasses { needed: 5, available: 4 })
        ));
    }

    #[test]
    fn unbalanced_classes_are_topped_up() {
        let labels = [0, 0, 0, 0, 0, 1, 2];
        let batches = make_batches(&labels, 3, 2, &mut rng::seeded(1)).unwrap();
        for b in &batches {
            assert_eq!(b.len(), 6);
            let classes: std::collections::BTreeSet<usize> = b.iter().map(|&i| labels[i]).collect();
            assert_eq!(classes.len(), 3);
        }
    }
}
