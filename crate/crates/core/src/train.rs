//! Training, evaluation, metrics, and checkpoints.
//!
//! One epoch shuffles the training utterances (seeded), walks them in
//! batches, and minimizes the summed per-target CCC loss over each batch's
//! concatenated frames with RMSprop. After every epoch the devel set is
//! scored (mean per-utterance CCC per target, evaluation mode) and the
//! parameter snapshot with the best mean devel CCC becomes the checkpoint.
//!
//! The prediction-averaging baseline trains five independent single-stream
//! models and averages their per-frame predictions at evaluation time.
//!
//! Everything is deterministic given the config and seed: batch order,
//! dropout masks, and initialization all derive from split RNG streams, and
//! checkpoints serialize f64 values in shortest round-trip notation.

use crate::config::RunConfig;
use crate::ctx::Ctx;
use crate::data::{split, Corpus, FeatureBundle, StreamWidths, Target, STREAM_ORDER};
use crate::error::{Error, Result};
use crate::head::{ccc, ccc_loss_on_tape, standardize_on_tape};
use crate::model::{Model, StrategyKind};
use crate::optim::Rmsprop;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub quiet: bool,
    /// Evaluate CCC on the training set each epoch (first target).
    pub track_train_ccc: bool,
    /// Stop once the tracked train CCC reaches this value.
    pub stop_at_train_ccc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch CCC loss per target.
    pub train_loss: BTreeMap<String, f64>,
    /// Mean per-utterance devel CCC per target.
    pub devel_ccc: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_ccc: Option<f64>,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub learning_rate: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_devel_ccc: BTreeMap<String, f64>,
    pub checkpoint_fnv: String,
    pub wall_clock_s: f64,
}

/// A trained strategy: a single pipeline or the prediction-averaging
/// ensemble of five single-stream models.
pub enum TrainedModel {
    Single(Model),
    Ensemble(Vec<Model>),
}

impl TrainedModel {
    pub fn targets(&self) -> &[Target] {
        match self {
            TrainedModel::Single(m) => &m.targets,
            TrainedModel::Ensemble(ms) => &ms[0].targets,
        }
    }

    pub fn strategy_name(&self) -> String {
        match self {
            TrainedModel::Single(m) => m.kind.name(),
            TrainedModel::Ensemble(_) => StrategyKind::BaselineAve.name(),
        }
    }

    /// Per-frame predictions for one utterance (ensemble: arithmetic mean of
    /// the member predictions).
    pub fn predict(&self, bundle: &FeatureBundle, target: Target) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Single(m) => m.predict(bundle, target),
            TrainedModel::Ensemble(ms) => {
                let mut acc = vec![0.0; bundle.n_frames()];
                for m in ms {
                    for (a, p) in acc.iter_mut().zip(m.predict(bundle, target)?) {
                        *a += p;
                    }
                }
                for a in &mut acc {
                    *a /= ms.len() as f64;
                }
                Ok(acc)
            }
        }
    }

    /// Fused per-frame features for export (ensemble: member mean).
    pub fn fused_features(&self, bundle: &FeatureBundle) -> Result<Tensor> {
        match self {
            TrainedModel::Single(m) => m.fused_features(bundle),
            TrainedModel::Ensemble(ms) => {
                let mut acc = ms[0].fused_features(bundle)?;
                for m in &ms[1..] {
                    let f = m.fused_features(bundle)?;
                    for (a, v) in acc.data_mut().iter_mut().zip(f.data()) {
                        *a += v;
                    }
                }
                let n = ms.len() as f64;
                for a in acc.data_mut() {
                    *a /= n;
                }
                Ok(acc)
            }
        }
    }

    pub fn checksum(&self) -> u64 {
        match self {
            TrainedModel::Single(m) => m.store.checksum(),
            TrainedModel::Ensemble(ms) => ms
                .iter()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, m| {
                    h.rotate_left(7) ^ m.store.checksum()
                }),
        }
    }
}

pub struct RunResult {
    pub model: TrainedModel,
    pub metrics: MetricsRecord,
    pub config: RunConfig,
}

/// Mean per-utterance CCC per target, evaluation mode.
pub fn eval_model(model: &TrainedModel, bundles: &[&FeatureBundle]) -> Result<BTreeMap<String, f64>> {
    if bundles.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let targets = model.targets().to_vec();
    let mut sums: BTreeMap<String, f64> = targets.iter().map(|t| (t.name().to_string(), 0.0)).collect();
    for b in bundles {
        for t in &targets {
            let pred = model.predict(b, *t)?;
            let label = b.label_column(*t);
            *sums.get_mut(t.name()).unwrap() += ccc(&pred, &label)?.ccc;
        }
    }
    for v in sums.values_mut() {
        *v /= bundles.len() as f64;
    }
    Ok(sums)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for v in values {
        s += v;
        n += 1;
    }
    s / n.max(1) as f64
}

/// Select the train/devel bundles for the configured cultures.
pub fn select_bundles<'a>(
    cfg: &RunConfig,
    corpus: &'a Corpus,
) -> Result<(Vec<&'a FeatureBundle>, Vec<&'a FeatureBundle>)> {
    let (train_recs, devel_recs) = split(&corpus.manifest, &cfg.cultures)?;
    let lookup = |id: &str| {
        corpus
            .bundle(id)
            .ok_or_else(|| Error::data(format!("manifest names {id} but it was not loaded")))
    };
    let train: Vec<&FeatureBundle> = train_recs
        .iter()
        .map(|r| lookup(&r.id))
        .collect::<Result<_>>()?;
    let devel: Vec<&FeatureBundle> = devel_recs
        .iter()
        .map(|r| lookup(&r.id))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::data("training split is empty for the selected cultures"));
    }
    if devel.is_empty() {
        return Err(Error::data("devel split is empty for the selected cultures"));
    }
    Ok((train, devel))
}

/// Train one single-pipeline strategy.
fn train_single(
    cfg: &RunConfig,
    widths: &StreamWidths,
    kind: StrategyKind,
    seed: u64,
    train_set: &[&FeatureBundle],
    devel_set: &[&FeatureBundle],
    opts: &TrainOptions,
) -> Result<(Model, MetricsRecord)> {
    let start = std::time::Instant::now();
    let mut model = Model::build_kind(cfg, widths, kind, seed)?;
    let mut opt = Rmsprop::new(&model.store, cfg.learning_rate, cfg.rms_decay, cfg.rms_epsilon)?;
    let targets = model.targets.clone();
    let root = Rng::new(seed);

    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, BTreeMap<String, f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        root.split(1_000 + epoch as u64).shuffle(&mut order);

        let mut loss_sums: BTreeMap<String, f64> = targets.iter().map(|t| (t.name().to_string(), 0.0)).collect();
        let mut batches = 0usize;

        for (batch_ix, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&FeatureBundle> = chunk.iter().map(|&i| train_set[i]).collect();
            let drop_rng = root.split(5_000 + (epoch as u64) * 10_000 + batch_ix as u64);
            let (grads, staged, losses) = {
                let mut c = Ctx::new(&model.store, true, cfg.dropout, drop_rng);
                let out = model.forward_batch(&mut c, &batch)?;
                let mut losses = Vec::with_capacity(targets.len());
                let mut total: Option<crate::tape::NodeId> = None;
                for (ti, t) in targets.iter().enumerate() {
                    let cat = c.tape.concat_rows(&out.preds[ti])?;
                    let labels: Vec<f64> = batch.iter().flat_map(|b| b.label_column(*t)).collect();
                    let n = labels.len();
                    let label_node = c.constant(Tensor::new(vec![n, 1], labels)?);
                    let loss = if cfg.standardize_before_ccc {
                        let ps = standardize_on_tape(&mut c, cat)?;
                        let ls = standardize_on_tape(&mut c, label_node)?;
                        ccc_loss_on_tape(&mut c, ps, ls)?
                    } else {
                        ccc_loss_on_tape(&mut c, cat, label_node)?
                    };
                    losses.push((t.name().to_string(), c.value(loss).data()[0]));
                    total = Some(match total {
                        Some(acc) => c.tape.add(acc, loss)?,
                        None => loss,
                    });
                }
                let total = total.expect("at least one target");
                let grads = c.tape.backward(total)?;
                let pg = c.param_grads(&grads);
                (pg, c.take_staged_buffers(), losses)
            };
            opt.step(&mut model.store, &grads)?;
            for (id, v) in staged {
                model.store.set_value(id, v)?;
            }
            for (name, l) in losses {
                *loss_sums.get_mut(&name).unwrap() += l;
            }
            batches += 1;
        }

        for v in loss_sums.values_mut() {
            *v /= batches.max(1) as f64;
        }

        let single = TrainedModel::Single(model);
        let devel_ccc = eval_model(&single, devel_set)?;
        let train_ccc = if opts.track_train_ccc {
            let first = targets[0];
            let mut s = 0.0;
            for b in train_set {
                let pred = single.predict(b, first)?;
                s += ccc(&pred, &b.label_column(first))?.ccc;
            }
            Some(s / train_set.len() as f64)
        } else {
            None
        };
        model = match single {
            TrainedModel::Single(m) => m,
            _ => unreachable!(),
        };

        let score = mean(devel_ccc.values().copied());
        if best.as_ref().map_or(true, |(b, ..)| score > *b) {
            best = Some((score, epoch, model.store.clone(), devel_ccc.clone()));
        }
        if !opts.quiet {
            let loss_str: Vec<String> = loss_sums.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            let ccc_str: Vec<String> = devel_ccc.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            eprintln!(
                "[{}] epoch {epoch:3}: train loss {} | devel ccc {}",
                kind.name(),
                loss_str.join(" "),
                ccc_str.join(" ")
            );
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sums,
            devel_ccc,
            train_ccc,
        });

        if let (Some(stop), Some(tc)) = (opts.stop_at_train_ccc, train_ccc) {
            if tc >= stop {
                break;
            }
        }
    }

    let (_, best_epoch, best_store, best_devel) = best.expect("at least one epoch ran");
    model.store = best_store;

    let metrics = MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        strategy: kind.name(),
        seed,
        config_hash: format!("{:016x}", cfg.hash()),
        learning_rate: cfg.learning_rate,
        epochs: history,
        best_epoch,
        best_devel_ccc: best_devel,
        checkpoint_fnv: format!("{:016x}", model.store.checksum()),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}

fn member_seed(seed: u64, index: u64) -> u64 {
    // splitmix-style decorrelation of ensemble member seeds
    let mut z = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Train the configured strategy on a corpus.
pub fn train_run(cfg: &RunConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<RunResult> {
    cfg.validate()?;
    let (train_set, devel_set) = select_bundles(cfg, corpus)?;
    let widths = &corpus.manifest.spec.widths;
    let start = std::time::Instant::now();

    match cfg.strategy_kind() {
        StrategyKind::BaselineAve => {
            let mut members = Vec::with_capacity(STREAM_ORDER.len());
            for (i, s) in STREAM_ORDER.iter().enumerate() {
                let (m, _) = train_single(
                    cfg,
                    widths,
                    StrategyKind::SingleFeature(*s),
                    member_seed(cfg.seed, i as u64),
                    &train_set,
                    &devel_set,
                    opts,
                )?;
                members.push(m);
            }
            let model = TrainedModel::Ensemble(members);
            let devel_ccc = eval_model(&model, &devel_set)?;
            let metrics = MetricsRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                strategy: StrategyKind::BaselineAve.name(),
                seed: cfg.seed,
                config_hash: format!("{:016x}", cfg.hash()),
                learning_rate: cfg.learning_rate,
                epochs: Vec::new(),
                best_epoch: cfg.epochs,
                best_devel_ccc: devel_ccc,
                checkpoint_fnv: format!("{:016x}", model.checksum()),
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            Ok(RunResult {
                model,
                metrics,
                config: cfg.clone(),
            })
        }
        kind => {
            let (model, metrics) = train_single(cfg, widths, kind, cfg.seed, &train_set, &devel_set, opts)?;
            Ok(RunResult {
                model: TrainedModel::Single(model),
                metrics,
                config: cfg.clone(),
            })
        }
    }
}

/// Learning-rate sweep: repeat the run for each rate in the configured
/// range and keep the one with the best mean devel CCC.
pub fn train_sweep(
    cfg: &RunConfig,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<(RunResult, Vec<(f64, f64)>)> {
    let rates = cfg.sweep_rates();
    let mut results = Vec::with_capacity(rates.len());
    for lr in &rates {
        let mut c = cfg.clone();
        c.learning_rate = *lr;
        c.lr_sweep = false;
        let r = train_run(&c, corpus, opts)?;
        let score = mean(r.metrics.best_devel_ccc.values().copied());
        results.push((r, score));
    }
    let table: Vec<(f64, f64)> = results
        .iter()
        .map(|(r, s)| (r.config.learning_rate, *s))
        .collect();
    let best = results
        .into_iter()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite scores"))
        .map(|(r, _)| r)
        .expect("at least one rate");
    Ok((best, table))
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMember {
    strategy: String,
    seed: u64,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    config: RunConfig,
    widths: StreamWidths,
    best_epoch: usize,
    devel_ccc: BTreeMap<String, f64>,
    members: Vec<CheckpointMember>,
}

fn dump_store(store: &ParamStore) -> Vec<CheckpointParam> {
    store
        .iter()
        .map(|(_, p)| CheckpointParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            values: p.value.data().to_vec(),
        })
        .collect()
}

fn restore_store(store: &mut ParamStore, params: &[CheckpointParam], what: &str) -> Result<()> {
    if store.len() != params.len() {
        return Err(Error::data(format!(
            "{what}: checkpoint has {} parameters, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for p in params {
        let id = store
            .find(&p.name)
            .ok_or_else(|| Error::data(format!("{what}: unknown parameter {}", p.name)))?;
        store.set_value(id, Tensor::new(p.shape.clone(), p.values.clone())?)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, result: &RunResult, widths: &StreamWidths) -> Result<()> {
    let members = match &result.model {
        TrainedModel::Single(m) => vec![CheckpointMember {
            strategy: m.kind.name(),
            seed: result.config.seed,
            params: dump_store(&m.store),
        }],
        TrainedModel::Ensemble(ms) => ms
            .iter()
            .enumerate()
            .map(|(i, m)| CheckpointMember {
                strategy: m.kind.name(),
                seed: member_seed(result.config.seed, i as u64),
                params: dump_store(&m.store),
            })
            .collect(),
    };
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: result.config.clone(),
        widths: widths.clone(),
        best_epoch: result.metrics.best_epoch,
        devel_ccc: result.metrics.best_devel_ccc.clone(),
        members,
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::data(format!("checkpoint: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainedModel, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::data(format!(
            "{}: checkpoint schema {} unsupported",
            path.display(),
            file.schema_version
        )));
    }
    let cfg = file.config;
    cfg.validate()?;
    let mut models = Vec::with_capacity(file.members.len());
    for member in &file.members {
        let kind = StrategyKind::parse(&member.strategy)?;
        let mut model = Model::build_kind(&cfg, &file.widths, kind, member.seed)?;
        restore_store(&mut model.store, &member.params, &member.strategy)?;
        models.push(model);
    }
    let model = if cfg.strategy_kind() == StrategyKind::BaselineAve {
        TrainedModel::Ensemble(models)
    } else {
        let m = models
            .pop()
            .ok_or_else(|| Error::data("checkpoint has no members"))?;
        TrainedModel::Single(m)
    };
    Ok((model, cfg))
}
