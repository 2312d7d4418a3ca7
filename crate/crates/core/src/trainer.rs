//! Pre-training and fine-tuning loops, evaluation, and checkpoint
//! assembly. Everything is deterministic in the configured seed: data
//! order, masks, views, and projection slices each draw from their own
//! counter-based stream, so a fixed seed fixes the whole loss trajectory.

use std::path::Path;

use crate::array::Array;
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::dsp;
use crate::metrics::{self, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::recording::{Recording, WindowBatch};
use crate::rng::{stream_rng, Stream};
use crate::ssl::{
    self, crop_batch, jepa_pred_loss, mask_patches, mixed_loss, recon_loss, sample_views,
    LossReport, Regime,
};
use crate::tape::Var;
use crate::{Error, Result, Tape};
use rand::seq::SliceRandom;

pub const FINETUNE_EPOCH_CAP: usize = 30;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// `recon`, `lejepa`, `mixed`, or `finetune`.
    pub regime: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub n_slices: usize,
    pub seed: u64,
    pub data_dir: String,
    /// Keep only recordings with this channel count, when set.
    pub montage_filter: Option<usize>,
    pub window_seconds: f64,
    pub mask_ratio: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: "mixed".into(),
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            lambda: 0.5,
            n_slices: 60,
            seed: 0,
            data_dir: String::new(),
            montage_filter: None,
            window_seconds: 5.0,
            mask_ratio: 0.6,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Resolved configuration as the canonical `key = value` echo.
    pub fn echo(&self) -> String {
        let mut kv = KvConfig::new();
        kv.set("regime", &self.regime);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("lambda", self.lambda);
        kv.set("n_slices", self.n_slices);
        kv.set("seed", self.seed);
        kv.set("data_dir", &self.data_dir);
        if let Some(m) = self.montage_filter {
            kv.set("montage", m);
        }
        kv.set("window_seconds", self.window_seconds);
        kv.set("mask_ratio", self.mask_ratio);
        kv.set("patch_len", self.model.patch_len);
        kv.set("embed", self.model.embed);
        kv.set("queries", self.model.queries);
        kv.set("state", self.model.state);
        kv.set("blocks", self.model.blocks);
        kv.render()
    }
}

/// Reads every `*.lum` recording under `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Recording>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "lum"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!(
            "no .lum recordings under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Recording::load(p)).collect()
}

/// Windows + z-scores a set of same-montage recordings into one pooled
/// batch (recordings must already be at 256 Hz).
pub fn pool_windows(
    recs: &[Recording],
    seconds: f64,
    montage_filter: Option<usize>,
) -> Result<WindowBatch> {
    let recs: Vec<&Recording> = recs
        .iter()
        .filter(|r| montage_filter.is_none_or(|c| r.channels() == c))
        .collect();
    if recs.is_empty() {
        return Err(Error::invalid("no recordings match the montage filter".to_string()));
    }
    let montage = recs[0].montage.clone();
    for r in &recs {
        if r.montage != montage {
            return Err(Error::invalid(
                "cannot pool recordings with different montages; use --montage".to_string(),
            ));
        }
    }
    let mut pooled: Option<WindowBatch> = None;
    for r in recs {
        let b = dsp::zscore(&dsp::window(r, seconds)?);
        pooled = Some(match pooled {
            None => b,
            Some(mut acc) => {
                acc.windows.extend_from_slice(&b.windows);
                acc.provenance.extend_from_slice(&b.provenance);
                match (&mut acc.labels, b.labels) {
                    (Some(l), Some(more)) => l.extend_from_slice(&more),
                    (None, None) => {}
                    _ => {
                        return Err(Error::invalid(
                            "mix of labeled and unlabeled recordings".to_string(),
                        ))
                    }
                }
                acc
            }
        });
    }
    Ok(pooled.unwrap())
}

/// Deterministic held-out-subject split: subjects are sorted, and the last
/// `ceil(test_fraction * n)` become the test set.
pub fn split_by_subject(
    recs: Vec<Recording>,
    test_fraction: f64,
) -> (Vec<Recording>, Vec<Recording>) {
    let mut subjects: Vec<String> = recs.iter().map(|r| r.subject.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let n_test = ((subjects.len() as f64 * test_fraction).ceil() as usize)
        .clamp(1, subjects.len().saturating_sub(1).max(1));
    let test_set: Vec<String> = subjects[subjects.len() - n_test..].to_vec();
    let (test, train): (Vec<_>, Vec<_>) = recs
        .into_iter()
        .partition(|r| test_set.contains(&r.subject));
    (train, test)
}

pub struct PretrainOutput {
    pub model: Model,
    pub loss_log: Vec<LossReport>,
    pub checkpoint: Checkpoint,
}

/// Runs the selected self-supervised objective over the pooled windows.
pub fn pretrain(cfg: &TrainConfig, data: &WindowBatch) -> Result<PretrainOutput> {
    let regime = Regime::parse(&cfg.regime)?;
    let model = Model::pretrain(cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut model = model;

    let n = data.batch();
    if n < cfg.batch_size.max(2) {
        return Err(Error::invalid(format!(
            "dataset has {n} windows, need at least the batch size {}",
            cfg.batch_size
        )));
    }
    let steps_per_epoch = n / cfg.batch_size;
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut loss_log = Vec::with_capacity(total_steps as usize);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::DataOrder, epoch as u64));
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = data.subset(chunk);
            let t = Tape::new();
            let bind = model.params.bind(&t);
            let (report, total) = pretrain_losses(cfg, regime, &model, &t, &bind, &batch, step)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretrain step {step}: recon={} jepa={} sigreg={}",
                    report.recon, report.jepa_pred, report.sigreg
                )));
            }
            let store = t.backward(total)?;
            model.params.absorb_grads(&bind, &store);
            opt.step(&mut model.params, AdamW::schedule(step, total_steps));
            loss_log.push(report);
            step += 1;
        }
    }

    let checkpoint = make_checkpoint(&model, &opt, cfg.echo(), step);
    Ok(PretrainOutput {
        model,
        loss_log,
        checkpoint,
    })
}

/// One step's objective assembly. The lambda-weighted branch is only
/// evaluated when the regime calls for it, so `mixed` with lambda = 0
/// computes exactly the reconstruction-only graph.
fn pretrain_losses(
    cfg: &TrainConfig,
    regime: Regime,
    model: &Model,
    t: &Tape,
    bind: &crate::tape::Binding,
    batch: &WindowBatch,
    step: u64,
) -> Result<(LossReport, Var)> {
    let p = model.cfg.patch_len;
    let t_w = batch.window_len;
    let s = t_w / p;
    let b = batch.batch();

    let recon_var = if regime != Regime::Lejepa {
        let plan = mask_patches(b, s, cfg.mask_ratio, cfg.seed, step)?;
        let (pred, grid) = model.reconstruct(t, bind, batch, Some(&plan.flags))?;
        Some(recon_loss(t, pred, &grid.patches, &plan)?)
    } else {
        None
    };

    let jepa_branch = regime == Regime::Lejepa || (regime == Regime::Mixed && cfg.lambda > 0.0);
    let (jepa_var, sig_var) = if jepa_branch {
        let t_global = (3 * t_w / 4) / p * p;
        let t_local = (t_w / 4) / p * p;
        let views = sample_views(t_w, p, t_global, t_local, b, cfg.seed, step)?;
        let mut globals = Vec::with_capacity(ssl::N_GLOBAL);
        for offs in &views.global_offsets {
            let crop = crop_batch(batch, offs, views.global_len)?;
            globals.push(model.embed_pooled(t, bind, &crop)?);
        }
        let mut locals = Vec::with_capacity(ssl::N_LOCAL);
        for offs in &views.local_offsets {
            let crop = crop_batch(batch, offs, views.local_len)?;
            locals.push(model.embed_pooled(t, bind, &crop)?);
        }
        let jepa = jepa_pred_loss(t, &locals, &globals)?;
        let mut all: Vec<Var> = globals;
        all.extend(locals);
        let emb = t.concat(&all, 0)?;
        let sig = ssl::sigreg(t, emb, cfg.n_slices, cfg.seed, step)?;
        (Some(jepa), Some(sig))
    } else {
        (None, None)
    };

    let total = match (recon_var, jepa_var, sig_var) {
        (Some(r), Some(j), Some(sg)) => {
            let reg = t.mul_scalar(t.add(j, sg)?, cfg.lambda)?;
            t.add(r, reg)?
        }
        (Some(r), None, None) => r,
        (None, Some(j), Some(sg)) => t.mul_scalar(t.add(j, sg)?, cfg.lambda)?,
        _ => unreachable!("regime selection covers all branches"),
    };

    let report = mixed_loss(
        recon_var.map(|v| t.scalar_value(v)).transpose()?.unwrap_or(0.0),
        jepa_var.map(|v| t.scalar_value(v)).transpose()?.unwrap_or(0.0),
        sig_var.map(|v| t.scalar_value(v)).transpose()?.unwrap_or(0.0),
        cfg.lambda,
        regime,
    )?;
    Ok((report, total))
}

pub struct FinetuneOutput {
    pub model: Model,
    pub loss_log: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Replaces the decoder with a classifier head and trains everything,
/// initialized from a pre-training checkpoint. Checkpoint tensors under
/// `dec/` are dropped; `head/` parameters start fresh.
pub fn finetune(
    cfg: &TrainConfig,
    init: &Checkpoint,
    data: &WindowBatch,
    classes: usize,
) -> Result<FinetuneOutput> {
    if cfg.epochs > FINETUNE_EPOCH_CAP {
        eprintln!(
            "warning: {} fine-tuning epochs exceeds the usual cap of {FINETUNE_EPOCH_CAP}; proceeding",
            cfg.epochs
        );
    }
    let mut model = Model::classifier(cfg.model, classes, cfg.seed)?;
    restore_params(&mut model, init, &["head/"])?;

    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::invalid("fine-tuning needs labeled windows".to_string()))?;
    let n = data.batch();
    if n < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {n} windows, need at least the batch size {}",
            cfg.batch_size
        )));
    }
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let steps_per_epoch = n / cfg.batch_size;
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut loss_log = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::DataOrder, epoch as u64));
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = data.subset(chunk);
            let batch_labels: Vec<i32> = chunk.iter().map(|&i| labels[i]).collect();
            let t = Tape::new();
            let bind = model.params.bind(&t);
            let logits = model.classify(&t, &bind, &batch)?;
            let loss = model.cross_entropy(&t, logits, &batch_labels)?;
            let value = t.scalar_value(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("finetune step {step}: cross-entropy")));
            }
            let store = t.backward(loss)?;
            model.params.absorb_grads(&bind, &store);
            opt.step(&mut model.params, AdamW::schedule(step, total_steps));
            loss_log.push(value);
            step += 1;
        }
    }
    let checkpoint = make_checkpoint(&model, &opt, cfg.echo(), step);
    Ok(FinetuneOutput {
        model,
        loss_log,
        checkpoint,
    })
}

/// Copies checkpoint tensors into the model by name. Parameters whose
/// prefix appears in `fresh_prefixes` stay at their fresh initialization;
/// everything else must be present with matching dims.
pub fn restore_params(model: &mut Model, ckpt: &Checkpoint, fresh_prefixes: &[&str]) -> Result<()> {
    let mut offending = Vec::new();
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.get(id).name.clone();
        if fresh_prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        match ckpt.get(&name) {
            Some(tensor) if tensor.shape() == model.params.get(id).value.shape() => {
                model.params.get_mut(id).value = tensor.clone();
            }
            Some(tensor) => offending.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                tensor.shape(),
                model.params.get(id).value.shape()
            )),
            None => offending.push(format!("{name}: missing from checkpoint")),
        }
    }
    if !offending.is_empty() {
        return Err(Error::invalid(format!(
            "checkpoint does not fit the model: {}",
            offending.join("; ")
        )));
    }
    Ok(())
}

/// Rebuilds a classifier model from a fine-tuning checkpoint.
pub fn classifier_from_checkpoint(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<Model> {
    let classes = ckpt
        .get("head/out_b")
        .ok_or_else(|| Error::invalid("checkpoint has no classifier head".to_string()))?
        .numel();
    let mut model = Model::classifier(*cfg, classes, 0)?;
    restore_params(&mut model, ckpt, &[])?;
    Ok(model)
}

/// Batched inference: per-window class probabilities.
pub fn predict_probs(model: &Model, data: &WindowBatch) -> Result<Vec<Vec<f64>>> {
    let n = data.batch();
    let mut probs = Vec::with_capacity(n);
    let chunk = 32;
    let mut i = 0;
    while i < n {
        let idx: Vec<usize> = (i..(i + chunk).min(n)).collect();
        let batch = data.subset(&idx);
        let t = Tape::new();
        let bind = model.params.bind(&t);
        let logits = model.classify(&t, &bind, &batch)?;
        let p = t.softmax_last(logits)?;
        let arr = t.to_array(p);
        let k = arr.shape()[1];
        for row in 0..idx.len() {
            probs.push(
                arr.data()[row * k..(row + 1) * k]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            );
        }
        i += chunk;
    }
    Ok(probs)
}

/// Evaluates a classifier on labeled windows.
pub fn evaluate(model: &Model, data: &WindowBatch) -> Result<MetricReport> {
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::invalid("evaluation needs labeled windows".to_string()))?;
    let probs = predict_probs(model, data)?;
    let classes = probs[0].len();
    let preds: Vec<i32> = probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as i32
        })
        .collect();
    let pos_scores: Vec<f64> = probs.iter().map(|p| p.get(1).copied().unwrap_or(0.0)).collect();
    metrics::report(
        &labels,
        &preds,
        (classes == 2).then_some(pos_scores.as_slice()),
        classes,
    )
}

/// Serializes model parameters, optimizer moments and counters.
pub fn make_checkpoint(model: &Model, opt: &AdamW, config_echo: String, step: u64) -> Checkpoint {
    let mut ck = Checkpoint {
        tensors: Vec::new(),
        config_echo,
    };
    for p in model.params.iter() {
        ck.tensors.push((p.name.clone(), p.value.clone()));
    }
    let (m, v) = opt.moments();
    for (p, m) in model.params.iter().zip(m) {
        ck.tensors.push((format!("opt/m/{}", p.name), m.clone()));
    }
    for (p, v) in model.params.iter().zip(v) {
        ck.tensors.push((format!("opt/v/{}", p.name), v.clone()));
    }
    ck.push_scalar("meta/step", step as f64);
    // stream counters are derived from the step, so this is the full rng state
    ck.push_scalar("meta/rng_counter", step as f64);
    ck
}

/// Convenience accessor: parameters only (drops optimizer/meta tensors).
pub fn checkpoint_params(ckpt: &Checkpoint) -> impl Iterator<Item = &(String, Array)> {
    ckpt.tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("opt/") && !n.starts_with("meta/"))
}
