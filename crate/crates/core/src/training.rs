//! Joint losses over the two decoders, the two-step partitioned update loop
//! (main objective updates encoder + decoder, auxiliary objective updates the
//! auxiliary decoder), per-epoch model selection, and checkpointing.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{epoch_batches, Dataset, Instance, Vocab};
use crate::decoder::predict_path;
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::metrics;
use crate::model::{EvalOutputs, ForwardOptions, Model};
use crate::optim::AdamState;
use crate::params::Partition;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::{cross_entropy_onehot, kl_divergence, Tensor, EPS_LOG};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Main objective for one instance: per-level cross-entropy on the top-down
/// distributions plus `lambda` times the divergence from the (constant)
/// bottom-up distributions.
pub fn loss_main_value(
    topdown: &[Tensor],
    bottomup: &[Tensor],
    gold: &[usize],
    lambda: f64,
) -> Result<f64> {
    joint_loss_value(topdown, bottomup, gold, lambda)
}

/// Auxiliary objective: the mirror image, cross-entropy on the bottom-up
/// distributions plus divergence from the constant top-down ones.
pub fn loss_aux_value(
    topdown: &[Tensor],
    bottomup: &[Tensor],
    gold: &[usize],
    lambda: f64,
) -> Result<f64> {
    joint_loss_value(bottomup, topdown, gold, lambda)
}

fn joint_loss_value(
    own: &[Tensor],
    partner: &[Tensor],
    gold: &[usize],
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Training(format!("negative loss coefficient {lambda}")));
    }
    if own.len() != gold.len() {
        return Err(Error::Training(format!(
            "{} distributions for {} gold labels",
            own.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (m, dist) in own.iter().enumerate() {
        total += cross_entropy_onehot(dist, gold[m])?;
        if lambda > 0.0 {
            total += lambda * kl_divergence(&partner[m], dist)?;
        }
    }
    Ok(total)
}

/// `-ln(dist[gold])` as a tape node.
pub fn ce_node(tape: &mut Tape, dist: NodeId, gold: usize) -> NodeId {
    let picked = tape.pick(dist, gold);
    let ln = tape.ln_clamped(picked, EPS_LOG);
    tape.scale(ln, -1.0)
}

/// `KL(p || q)` as a tape node. The caller decides whether `p` is detached.
pub fn kl_node(tape: &mut Tape, p: NodeId, q: NodeId) -> NodeId {
    let ln_p = tape.ln_clamped(p, EPS_LOG);
    let ln_q = tape.ln_clamped(q, EPS_LOG);
    let diff = tape.sub(ln_p, ln_q);
    let terms = tape.mul(p, diff);
    tape.sum(terms)
}

/// One instance's objective on the tape. The partner's distributions enter as
/// constants (detached), so gradient flows only into `own`.
pub fn objective_node(
    tape: &mut Tape,
    own: &[NodeId],
    partner: Option<&[NodeId]>,
    gold: &[usize],
    lambda: f64,
) -> NodeId {
    let mut terms = Vec::with_capacity(2 * own.len());
    for (m, &dist) in own.iter().enumerate() {
        terms.push(ce_node(tape, dist, gold[m]));
        if lambda > 0.0 {
            if let Some(partner) = partner {
                let target = tape.detach(partner[m]);
                let kl = kl_node(tape, target, dist);
                terms.push(tape.scale(kl, lambda));
            }
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Fully-coupled loss with no stop-gradients: both cross-entropies plus both
/// divergence directions, every path live. Used by the gradient check, where
/// central differences must see exactly what the backward pass sees.
pub fn coupled_loss_node(
    tape: &mut Tape,
    main: &[NodeId],
    aux: &[NodeId],
    gold: &[usize],
    lambda: f64,
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (m, (&md, &ad)) in main.iter().zip(aux).enumerate() {
        let mut terms = vec![ce_node(tape, md, gold[m]), ce_node(tape, ad, gold[m])];
        if lambda > 0.0 {
            let kl_am = kl_node(tape, ad, md);
            let kl_ma = kl_node(tape, md, ad);
            terms.push(tape.scale(kl_am, lambda));
            terms.push(tape.scale(kl_ma, lambda));
        }
        for t in terms {
            acc = Some(match acc {
                Some(a) => tape.add(a, t),
                None => t,
            });
        }
    }
    acc.expect("at least one level")
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Gradients and loss values for one batch, computed at the pre-update
/// parameters. Applying the two steps is separate so update discipline is
/// observable between them.
pub struct BatchUpdate {
    pub loss_main: f64,
    pub loss_aux: Option<f64>,
    grads_main: Gradients,
    grads_aux: Option<Gradients>,
}

pub struct Trainer {
    pub model: Model,
    run: RunConfig,
    opt_main: AdamState,
    opt_aux: AdamState,
    dropout_rng: ChaCha8Rng,
    /// Mutual learning active: auxiliary decoder trained with nonzero lambda.
    mutual: bool,
}

impl Trainer {
    /// Build a fresh model and optimizers from a normalized run config.
    pub fn new(run: &RunConfig, hierarchy: LabelHierarchy, train_ds: &Dataset) -> Result<Trainer> {
        let run = run.normalized();
        let vocab = Vocab::build(train_ds, run.train.min_count)?;
        let model =
            Model::build(run.model.clone(), run.ablation, hierarchy, vocab, run.seed)?;
        Ok(Self::from_model(run, model))
    }

    pub fn from_model(run: RunConfig, model: Model) -> Trainer {
        let run = run.normalized();
        let mutual = !run.ablation.no_mutual_learning && !run.ablation.multitask_baseline;
        let opt_main = AdamState::new(
            model.params.partition_names(&[Partition::Encoder, Partition::MainDecoder]),
            run.train.learning_rate,
        );
        let aux_partitions: &[Partition] = if run.train.aux_updates_encoder {
            &[Partition::Encoder, Partition::AuxDecoder]
        } else {
            &[Partition::AuxDecoder]
        };
        let opt_aux = AdamState::new(
            model.params.partition_names(aux_partitions),
            run.train.learning_rate,
        );
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(run.seed);
        dropout_rng.set_stream(0xD0);
        Trainer { model, run, opt_main, opt_aux, dropout_rng, mutual }
    }

    pub fn mutual_learning_active(&self) -> bool {
        self.mutual
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    /// Forward one batch and compute both objectives' gradients at the
    /// current parameters.
    pub fn compute_batch(&mut self, batch: &[&Instance]) -> Result<BatchUpdate> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".to_string()));
        }
        if self.run.train.aux_updates_encoder && self.mutual {
            self.compute_batch_live_encoder(batch)
        } else {
            self.compute_batch_detached(batch)
        }
    }

    /// Single forward pass; the auxiliary decoder consumes detached encoder
    /// outputs, so one backward sweep yields both objectives' gradients on
    /// disjoint partitions.
    fn compute_batch_detached(&mut self, batch: &[&Instance]) -> Result<BatchUpdate> {
        let lambda = self.run.train.lambda;
        let mut tape = Tape::new();
        let ctx = self.model.batch_context(&mut tape);
        let opts = ForwardOptions {
            training: true,
            dropout: self.run.train.dropout,
            run_main: true,
            run_aux: self.mutual,
            detach_aux_inputs: true,
            teacher_forcing: self.run.train.teacher_forcing,
        };
        let mut main_losses = Vec::with_capacity(batch.len());
        let mut aux_losses = Vec::with_capacity(batch.len());
        for inst in batch {
            let fwd =
                self.model.forward_instance(&mut tape, &ctx, inst, &opts, &mut self.dropout_rng)?;
            let main = fwd.main.as_ref().expect("main decoder ran");
            let aux = fwd.aux.as_deref();
            main_losses.push(objective_node(&mut tape, main, aux, &inst.gold_path, lambda));
            if let Some(aux) = aux {
                aux_losses.push(objective_node(
                    &mut tape,
                    aux,
                    Some(main),
                    &inst.gold_path,
                    lambda,
                ));
            }
        }
        let root_main = tape.mean_scalars(&main_losses);
        let loss_main = tape.scalar(root_main);
        let (root, loss_aux) = if aux_losses.is_empty() {
            (root_main, None)
        } else {
            let root_aux = tape.mean_scalars(&aux_losses);
            let value = tape.scalar(root_aux);
            (tape.add(root_main, root_aux), Some(value))
        };
        self.check_finite(&tape, loss_main, loss_aux)?;
        let grads = tape.backward(root)?;
        let grads_main =
            split_gradients(&grads, &self.model, &[Partition::Encoder, Partition::MainDecoder]);
        let grads_aux = if loss_aux.is_some() {
            Some(split_gradients(&grads, &self.model, &[Partition::AuxDecoder]))
        } else {
            None
        };
        Ok(BatchUpdate { loss_main, loss_aux, grads_main, grads_aux })
    }

    /// Two forward passes at the same parameters: the auxiliary objective
    /// keeps the encoder live, so its gradients extend into the encoder
    /// partition.
    fn compute_batch_live_encoder(&mut self, batch: &[&Instance]) -> Result<BatchUpdate> {
        let lambda = self.run.train.lambda;
        let mut first = Tape::new();
        let ctx = self.model.batch_context(&mut first);
        let opts = ForwardOptions {
            training: true,
            dropout: self.run.train.dropout,
            run_main: true,
            run_aux: true,
            detach_aux_inputs: true,
            teacher_forcing: self.run.train.teacher_forcing,
        };
        let mut main_losses = Vec::with_capacity(batch.len());
        for inst in batch {
            let fwd =
                self.model.forward_instance(&mut first, &ctx, inst, &opts, &mut self.dropout_rng)?;
            let main = fwd.main.as_ref().expect("main decoder ran");
            main_losses.push(objective_node(
                &mut first,
                main,
                fwd.aux.as_deref(),
                &inst.gold_path,
                lambda,
            ));
        }
        let root_main = first.mean_scalars(&main_losses);
        let loss_main = first.scalar(root_main);
        self.check_finite(&first, loss_main, None)?;
        let grads_main_all = first.backward(root_main)?;
        let grads_main = split_gradients(
            &grads_main_all,
            &self.model,
            &[Partition::Encoder, Partition::MainDecoder],
        );

        let mut second = Tape::new();
        let ctx = self.model.batch_context(&mut second);
        let live_opts = ForwardOptions { detach_aux_inputs: false, ..opts };
        let mut aux_losses = Vec::with_capacity(batch.len());
        for inst in batch {
            let fwd = self.model.forward_instance(
                &mut second,
                &ctx,
                inst,
                &live_opts,
                &mut self.dropout_rng,
            )?;
            let main = fwd.main.as_ref().expect("main decoder ran");
            let aux = fwd.aux.as_ref().expect("auxiliary decoder ran");
            aux_losses.push(objective_node(&mut second, aux, Some(main), &inst.gold_path, lambda));
        }
        let root_aux = second.mean_scalars(&aux_losses);
        let loss_aux = second.scalar(root_aux);
        self.check_finite(&second, loss_aux, None)?;
        let grads_aux_all = second.backward(root_aux)?;
        let grads_aux = split_gradients(
            &grads_aux_all,
            &self.model,
            &[Partition::Encoder, Partition::AuxDecoder],
        );

        Ok(BatchUpdate { loss_main, loss_aux: Some(loss_aux), grads_main, grads_aux: Some(grads_aux) })
    }

    fn check_finite(&self, tape: &Tape, loss_main: f64, loss_aux: Option<f64>) -> Result<()> {
        if let Some(op) = tape.poisoned() {
            return Err(Error::Training(format!(
                "non-finite value produced by op '{op}' (loss_main={loss_main}, loss_aux={loss_aux:?})"
            )));
        }
        if !loss_main.is_finite() || loss_aux.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite loss (loss_main={loss_main}, loss_aux={loss_aux:?})"
            )));
        }
        Ok(())
    }

    /// Step 1: update encoder and main decoder from the main objective.
    pub fn apply_main(&mut self, update: &BatchUpdate) -> Result<()> {
        self.opt_main.step(&mut self.model.params, &update.grads_main)
    }

    /// Step 2: update the auxiliary decoder from its objective.
    pub fn apply_aux(&mut self, update: &BatchUpdate) -> Result<()> {
        if let Some(grads) = &update.grads_aux {
            self.opt_aux.step(&mut self.model.params, grads)?;
        }
        Ok(())
    }

    pub fn train_batch(&mut self, batch: &[&Instance]) -> Result<BatchUpdate> {
        let update = self.compute_batch(batch)?;
        self.apply_main(&update)?;
        self.apply_aux(&update)?;
        Ok(update)
    }

    /// Forward the validation set in eval mode: predictions under the main
    /// scheme, path validity, and the mean per-level divergence between the
    /// two decoders (mutual-learning runs only).
    pub fn validate(&self, dataset: &Dataset) -> Result<ValidationStats> {
        let mut preds = Vec::with_capacity(dataset.len());
        let mut golds = Vec::with_capacity(dataset.len());
        let mut validity = Vec::with_capacity(dataset.len());
        let mut kl_sum = 0.0;
        let opts = ForwardOptions { run_aux: self.mutual, ..ForwardOptions::eval() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in dataset.instances.chunks(64) {
            let mut tape = Tape::new();
            let ctx = self.model.batch_context(&mut tape);
            for inst in chunk {
                let fwd =
                    self.model.forward_instance(&mut tape, &ctx, inst, &opts, &mut rng)?;
                let outs = EvalOutputs::materialize(&self.model, &tape, &fwd);
                let main = outs.main.as_ref().expect("main decoder ran");
                let (path, valid) = predict_path(main, &self.model.hierarchy)?;
                preds.push(path);
                golds.push(inst.gold_path.clone());
                validity.push(valid);
                if let Some(aux) = &outs.aux {
                    let mut inst_kl = 0.0;
                    for (a, m) in aux.dists.iter().zip(&main.dists) {
                        inst_kl += kl_divergence(a, m)?;
                    }
                    kl_sum += inst_kl / main.dists.len() as f64;
                }
            }
        }
        let levels = self.model.num_levels();
        let mut level_accuracy = Vec::with_capacity(levels);
        let mut level_macro_f1 = Vec::with_capacity(levels);
        for m in 1..=levels {
            level_accuracy.push(metrics::accuracy(&preds, &golds, m)?);
            level_macro_f1.push(metrics::macro_f1(
                &preds,
                &golds,
                m,
                self.model.hierarchy.level_size(m),
            )?);
        }
        let mean_accuracy = level_accuracy.iter().sum::<f64>() / levels as f64;
        Ok(ValidationStats {
            level_accuracy,
            level_macro_f1,
            mean_accuracy,
            decoder_agreement_kl: if self.mutual {
                Some(kl_sum / dataset.len().max(1) as f64)
            } else {
                None
            },
        })
    }
}

fn split_gradients(grads: &Gradients, model: &Model, partitions: &[Partition]) -> Gradients {
    let mut out = Gradients::default();
    for (name, tensor) in grads.iter() {
        if partitions.contains(&model.params.partition_of(name)) {
            out.insert(name.clone(), tensor.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationStats {
    pub level_accuracy: Vec<f64>,
    pub level_macro_f1: Vec<f64>,
    pub mean_accuracy: f64,
    pub decoder_agreement_kl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss_main: f64,
    pub train_loss_aux: Option<f64>,
    pub validation: ValidationStats,
    pub is_best: bool,
}

pub struct TrainOutcome {
    pub checkpoint: CheckpointRecord,
    pub log: Vec<EpochMetrics>,
}

/// The full training loop: per batch, gradients for both objectives are
/// computed once, then the two partition updates apply in order; per epoch
/// (or per batch when configured) the validation mean accuracy drives model
/// selection. Deterministic given the config.
pub fn train(
    run: &RunConfig,
    hierarchy: LabelHierarchy,
    train_ds: &Dataset,
    valid_ds: &Dataset,
) -> Result<TrainOutcome> {
    if train_ds.is_empty() || valid_ds.is_empty() {
        return Err(Error::Training("training and validation sets must be nonempty".into()));
    }
    let run = run.normalized();
    let mut trainer = Trainer::new(&run, hierarchy, train_ds)?;
    let mut log: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 1..=run.train.epochs {
        let batches =
            epoch_batches(train_ds.len(), run.train.batch_size, run.seed, epoch);
        let mut main_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut aux_batches = 0usize;
        let mut best_this_epoch = false;
        for batch_indices in &batches {
            let batch: Vec<&Instance> =
                batch_indices.iter().map(|&i| &train_ds.instances[i]).collect();
            let update = trainer.train_batch(&batch).map_err(|e| {
                Error::Training(format!("epoch {epoch}: {e}"))
            })?;
            main_sum += update.loss_main;
            if let Some(a) = update.loss_aux {
                aux_sum += a;
                aux_batches += 1;
            }
            if run.train.per_batch_validation {
                let stats = trainer.validate(valid_ds)?;
                if improves(&best, stats.mean_accuracy) {
                    best = Some((stats.mean_accuracy, epoch, snapshot_model(&trainer.model)));
                    best_this_epoch = true;
                }
            }
        }
        let stats = trainer.validate(valid_ds)?;
        if improves(&best, stats.mean_accuracy) {
            best = Some((stats.mean_accuracy, epoch, snapshot_model(&trainer.model)));
            best_this_epoch = true;
        }
        if best_this_epoch {
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        log.push(EpochMetrics {
            epoch,
            train_loss_main: main_sum / batches.len() as f64,
            train_loss_aux: if aux_batches > 0 {
                Some(aux_sum / aux_batches as f64)
            } else {
                None
            },
            validation: stats,
            is_best: best_this_epoch,
        });
        if let Some(patience) = run.train.patience {
            if epochs_since_best > patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let summary = log
        .iter()
        .rev()
        .find(|m| m.epoch == best_epoch)
        .cloned()
        .unwrap_or_else(|| log.last().cloned().expect("nonempty log"));
    Ok(TrainOutcome {
        checkpoint: CheckpointRecord {
            config: run.clone(),
            epoch: best_epoch,
            summary,
            model: best_model,
        },
        log,
    })
}

fn improves(best: &Option<(f64, usize, Model)>, candidate: f64) -> bool {
    match best {
        Some((score, _, _)) => candidate > *score,
        None => true,
    }
}

fn snapshot_model(model: &Model) -> Model {
    model.with_params(model.params.clone())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"LDSG";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct CheckpointRecord {
    pub config: RunConfig,
    pub epoch: usize,
    pub summary: EpochMetrics,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    epoch: usize,
    summary: EpochMetrics,
    vocab: Vec<String>,
    hierarchy: crate::hierarchy::HierarchyDoc,
}

/// Versioned binary container: magic, format version, JSON metadata block,
/// then length-prefixed named parameter blobs of little-endian f64 values.
pub fn save_checkpoint(record: &CheckpointRecord, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: record.config.clone(),
        epoch: record.epoch,
        summary: record.summary.clone(),
        vocab: record.model.vocab.tokens().to_vec(),
        hierarchy: record.model.hierarchy.to_doc(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(record.model.params.len() as u64).to_le_bytes());
    for param in record.model.params.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.push(param.partition.tag());
        out.extend_from_slice(&(param.tensor.shape().len() as u64).to_le_bytes());
        for &d in param.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(param.tensor.numel() as u64).to_le_bytes());
        for v in param.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct CheckpointReader<R: Read> {
    inner: R,
}

impl<R: Read> CheckpointReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated checkpoint file".to_string()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Load and validate a checkpoint, rebuilding the model and restoring every
/// parameter bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let file = std::fs::File::open(path)?;
    let mut reader = CheckpointReader { inner: std::io::BufReader::new(file) };
    let magic = reader.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes (not a checkpoint)".to_string()));
    }
    let version = reader.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = reader.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&reader.bytes(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("corrupt metadata block: {e}")))?;

    let hierarchy = LabelHierarchy::from_doc(&meta.hierarchy)?;
    let vocab = Vocab::from_tokens(meta.vocab)?;
    let run = meta.config.normalized();
    let mut model =
        Model::build(run.model.clone(), run.ablation, hierarchy, vocab, run.seed)?;

    let count = reader.u64()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = reader.u64()? as usize;
        let name = String::from_utf8(reader.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".to_string()))?;
        let partition = Partition::from_tag(reader.bytes(1)?[0])?;
        let rank = reader.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.u64()? as usize);
        }
        let numel = reader.u64()? as usize;
        let raw = reader.bytes(numel * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !model.params.contains(&name) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{name}'")));
        }
        if model.params.partition_of(&name) != partition {
            return Err(Error::Checkpoint(format!("parameter '{name}' partition mismatch")));
        }
        let target = model.params.get_mut(&name);
        if target.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' shape {:?} does not match expected {:?}",
                shape,
                target.shape()
            )));
        }
        target.values_mut().copy_from_slice(&values);
    }

    Ok(CheckpointRecord { config: meta.config, epoch: meta.epoch, summary: meta.summary, model })
}
