//! Joint pretraining: batch assembly, the weighted objective,
//! optimisation, checkpoints and embedding export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mepoi_numcore::{checkpoint, AdamConfig, Graph, OptimizerState, ParamStore, Scalar, Tensor, Var};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, VisitEncoder, VisitFeatures};
use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::geodata::World;
use crate::pipeline::{Normalizer, Preprocessed};
use crate::prototypes::{info_nce, write_embeddings, Embeddings, Prototypes};
use crate::seed::rng_for;
use crate::seqmodel::{BatchShape, Transformer, TransformerConfig};
use crate::textalign::TextAlign;
use crate::transfer::{kl_loss, DistributionHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
            head_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for laptop-scale runs (d_h = 80, two layers).
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig { scales: 8, time_dim: 16, ..EncoderConfig::default() },
            transformer: TransformerConfig { layers: 2, heads: 4, ffn_dim: 160, window: 32 },
            head_hidden: 256,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.encoder.model_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lambda_anchor: f64,
    pub lambda_sparse: f64,
    pub lambda_text: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Windows per optimisation step.
    pub batch_windows: usize,
    pub clip_norm: f64,
    pub temperature: f64,
    pub anchor_samples: usize,
    pub sparse_samples: usize,
    pub text_samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda_anchor: 1.0,
            lambda_sparse: 1.0,
            lambda_text: 1.0,
            epochs: 20,
            learning_rate: 1e-3,
            batch_windows: 16,
            clip_norm: 1.0,
            temperature: 0.1,
            anchor_samples: 64,
            sparse_samples: 256,
            text_samples: 256,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_anchor, self.lambda_sparse, self.lambda_text].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("pretrain: lambda weights must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_windows == 0 {
            return Err(Error::Config("pretrain: epochs and batch_windows must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("pretrain: learning_rate and temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn uses_distribution_head(&self) -> bool {
        self.lambda_anchor > 0.0 || self.lambda_sparse > 0.0
    }
}

/// Encoder, transformer, prototypes and the optional auxiliary modules
/// over one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: VisitEncoder,
    pub transformer: Transformer,
    pub prototypes: Prototypes,
    pub head: Option<DistributionHead>,
    pub text: Option<TextAlign>,
}

impl<T: Scalar> Model<T> {
    /// Registers parameters in a fixed order so that equal arguments
    /// always yield equal initial values.
    pub fn new(
        config: &ModelConfig,
        poi_ids: &[u32],
        with_head: bool,
        text_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "init", 0);
        let mut store = ParamStore::new();
        let d = config.model_dim();
        let encoder = VisitEncoder::register(&mut store, &config.encoder)?;
        let transformer = Transformer::register(&mut store, &config.transformer, d, &mut rng)?;
        let prototypes = Prototypes::register(&mut store, poi_ids, d, &mut rng)?;
        let head = if with_head {
            Some(DistributionHead::register(
                &mut store,
                d,
                config.head_hidden,
                crate::timebin::HOURS_PER_WEEK,
                &mut rng,
            )?)
        } else {
            None
        };
        let text = match text_dim {
            Some(du) => Some(TextAlign::register(&mut store, d, du, &mut rng)?),
            None => None,
        };
        Ok(Model { config: config.clone(), store, encoder, transformer, prototypes, head, text })
    }

    pub fn embeddings(&self) -> Embeddings<T> {
        Embeddings::from_store(&self.store, &self.prototypes)
    }

    /// Contextualized embeddings `[batch * len, d]` for the given windows.
    pub fn encode_windows(
        &self,
        g: &mut Graph<'_, T>,
        data: &TrainData,
        windows: &[usize],
    ) -> Result<(Var, BatchShape, Vec<Option<usize>>)> {
        let len = windows.iter().map(|&w| data.windows[w].1).max().unwrap_or(0);
        let batch = windows.len();
        let mut rows = Vec::with_capacity(batch * len);
        for &w in windows {
            let (start, n) = data.windows[w];
            rows.extend((0..len).map(|i| (i < n).then_some(start + i)));
        }
        let valid: Vec<bool> = rows.iter().map(Option::is_some).collect();
        let x = self.encoder.assemble(g, &data.features, &rows)?;
        let shape = BatchShape { batch, len };
        let h = self.transformer.encode(g, x, shape, &valid)?;
        Ok((h, shape, rows))
    }
}

/// Everything a training step reads, laid out by prototype row.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub features: VisitFeatures,
    /// Prototype row of each visit; `None` for UNKNOWN.
    pub poi_rows: Vec<Option<usize>>,
    /// `(first visit, length)` of each window.
    pub windows: Vec<(usize, usize)>,
    pub anchors: Vec<(usize, Vec<f64>)>,
    pub sparse: Vec<(usize, Vec<f64>)>,
    /// Text embedding per prototype row.
    pub text: Option<Vec<Vec<f64>>>,
}

impl TrainData {
    pub fn build(
        world: &World,
        bbox: crate::geo::BBox,
        pre: &Preprocessed,
        priors: Option<&BTreeMap<u32, Vec<f64>>>,
        text: Option<Vec<Vec<f64>>>,
        encoder: &EncoderConfig,
        window: usize,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        let index = world.index();
        let norm = Normalizer::new(bbox);
        let mut features = VisitFeatures { loc_dim: encoder.location_dim(), ..Default::default() };
        let mut poi_rows = Vec::new();
        let mut windows = Vec::new();
        for seq in &pre.sequences {
            for chunk in seq.visits.chunks(window) {
                windows.push((poi_rows.len(), chunk.len()));
                for v in chunk {
                    features.push(norm.location(LatLon::new(v.lat, v.lon)), v.t_a, v.t_d, encoder);
                    let row = match v.poi_id {
                        Some(id) => Some(*index.get(&id).ok_or(Error::UnknownPoi(id))?),
                        None => None,
                    };
                    poi_rows.push(row);
                }
            }
        }
        let row_of = |id: u32| index.get(&id).copied().ok_or(Error::UnknownPoi(id));
        let anchors = pre
            .partition
            .anchors
            .iter()
            .map(|&id| {
                let d = pre
                    .distributions
                    .get(&id)
                    .ok_or_else(|| Error::Contract(format!("anchor {id} has no distribution")))?;
                Ok((row_of(id)?, d.bins.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let sparse = match priors {
            Some(p) => pre
                .partition
                .sparse
                .iter()
                .map(|&id| {
                    let bins = p.get(&id).ok_or_else(|| {
                        Error::Contract(format!("no transferred prior for sparse POI {id}; run precompute"))
                    })?;
                    Ok((row_of(id)?, bins.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        if let Some(t) = &text {
            if t.len() != world.len() {
                return Err(Error::Contract(format!(
                    "{} text embeddings for {} POIs",
                    t.len(),
                    world.len()
                )));
            }
        }
        Ok(TrainData { features, poi_rows, windows, anchors, sparse, text })
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.text.as_ref().and_then(|t| t.first()).map(Vec::len)
    }
}

/// Component values of one step. `None` marks a component that was not
/// evaluated (its weight is zero or its inputs are absent).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub contrastive: Option<f64>,
    pub kl_anchor: Option<f64>,
    pub kl_sparse: Option<f64>,
    pub text_align: Option<f64>,
    pub total: f64,
    pub unique_pois: usize,
    pub visits: usize,
}

impl StepRecord {
    /// The weighted sum recomputed from the logged components.
    pub fn recomposed(&self, cfg: &PretrainConfig) -> f64 {
        self.contrastive.unwrap_or(0.0)
            + cfg.lambda_anchor * self.kl_anchor.unwrap_or(0.0)
            + cfg.lambda_sparse * self.kl_sparse.unwrap_or(0.0)
            + cfg.lambda_text * self.text_align.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub contrastive: f64,
    pub kl_anchor: f64,
    pub kl_sparse: f64,
    pub text_align: f64,
    pub total: f64,
    pub steps: usize,
    pub skipped_batches: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub skipped_batches: usize,
    pub seconds: f64,
}

/// Builds the weighted objective for one batch of windows.
pub fn step_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    data: &TrainData,
    windows: &[usize],
    cfg: &PretrainConfig,
    sample_seed: u64,
) -> Result<(Option<Var>, StepRecord)> {
    let mut rec = StepRecord::default();
    let mut rng = rng_for(sample_seed, "aux", 0);
    let z = g.param(model.prototypes.z);
    let mut terms: Vec<(Var, f64)> = Vec::new();

    let (h, _, rows) = model.encode_windows(g, data, windows)?;
    let mut picked = Vec::new();
    let mut targets = Vec::new();
    for (pos, r) in rows.iter().enumerate() {
        if let Some(Some(p)) = r.map(|i| data.poi_rows[i]) {
            picked.push(pos);
            targets.push(p);
        }
    }
    rec.visits = picked.len();
    rec.unique_pois = targets.iter().collect::<std::collections::BTreeSet<_>>().len();
    if !picked.is_empty() {
        let hv = g.gather_rows(h, &picked)?;
        if let Some(l) = info_nce(g, hv, &targets, z, cfg.temperature)? {
            rec.contrastive = Some(g.value(l).item().f());
            terms.push((l, 1.0));
        }
    }

    if let Some(head) = &model.head {
        for (lambda, set, slot, k) in [
            (cfg.lambda_anchor, &data.anchors, &mut rec.kl_anchor, cfg.anchor_samples),
            (cfg.lambda_sparse, &data.sparse, &mut rec.kl_sparse, cfg.sparse_samples),
        ] {
            if lambda > 0.0 && !set.is_empty() && k > 0 {
                let chosen: Vec<usize> = sample(&mut rng, set.len(), k.min(set.len())).into_vec();
                let prow: Vec<usize> = chosen.iter().map(|&i| set[i].0).collect();
                let tg: Vec<&[f64]> = chosen.iter().map(|&i| set[i].1.as_slice()).collect();
                let l = kl_loss(g, head, z, &prow, &tg)?;
                *slot = Some(g.value(l).item().f());
                terms.push((l, lambda));
            }
        }
    }

    if let (Some(ta), Some(text)) = (&model.text, &data.text) {
        if cfg.lambda_text > 0.0 && cfg.text_samples > 0 {
            let n = model.prototypes.len();
            let chosen: Vec<usize> = sample(&mut rng, n, cfg.text_samples.min(n)).into_vec();
            let du = text[0].len();
            let flat: Vec<f64> = chosen.iter().flat_map(|&r| text[r].iter().copied()).collect();
            let zr = g.gather_rows(z, &chosen)?;
            let l = ta.loss(g, zr, Tensor::from_f64(vec![chosen.len(), du], &flat)?)?;
            rec.text_align = Some(g.value(l).item().f());
            terms.push((l, cfg.lambda_text));
        }
    }

    let mut total: Option<Var> = None;
    for (l, w) in terms {
        let t = if w == 1.0 { l } else { g.scale(l, w) };
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    rec.total = total.map_or(0.0, |t| g.value(t).item().f());
    Ok((total, rec))
}

/// Model plus optimiser state and progress counters.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub config: PretrainConfig,
    pub epochs_done: usize,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(AdamConfig::adam(config.learning_rate), &model.store);
        Ok(Trainer { model, optimizer, config, epochs_done: 0, step: 0 })
    }

    /// Fresh model wired for `cfg`: the distribution head only when a KL
    /// weight is positive, the text projection only when text is used.
    pub fn for_data(model_cfg: &ModelConfig, poi_ids: &[u32], data: &TrainData, cfg: PretrainConfig) -> Result<Self> {
        let text_dim = if cfg.lambda_text > 0.0 { data.text_dim() } else { None };
        let model = Model::new(model_cfg, poi_ids, cfg.uses_distribution_head(), text_dim, cfg.seed)?;
        Self::new(model, cfg)
    }

    /// Window order of epoch `epoch` (0-based).
    pub fn epoch_order(&self, data: &TrainData, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..data.windows.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, "epoch", epoch as u64));
        order
    }

    /// One optimisation step over `windows`.
    pub fn train_step(&mut self, data: &TrainData, windows: &[usize]) -> Result<StepRecord> {
        let sample_seed = crate::seed::sub_seed(self.config.seed, "step", self.step);
        let (loss, mut rec, grads) = {
            let mut g = Graph::new(&self.model.store);
            let (loss, rec) = step_loss(&self.model, &mut g, data, windows, &self.config, sample_seed)?;
            let grads = match loss {
                Some(l) => Some(g.backward(l)?),
                None => None,
            };
            (loss, rec, grads)
        };
        rec.epoch = self.epochs_done;
        rec.step = self.step;
        if !rec.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: self.epochs_done, step: self.step as usize });
        }
        if let (Some(_), Some(mut grads)) = (loss, grads) {
            if self.config.clip_norm > 0.0 {
                grads.clip_global_norm(self.config.clip_norm);
            }
            self.optimizer.step(&mut self.model.store, &grads)?;
        }
        self.step += 1;
        Ok(rec)
    }

    pub fn run_epoch(&mut self, data: &TrainData, on_step: &mut dyn FnMut(&StepRecord)) -> Result<EpochRecord> {
        let start = Instant::now();
        let order = self.epoch_order(data, self.epochs_done);
        let mut rec = EpochRecord { epoch: self.epochs_done, ..Default::default() };
        for batch in order.chunks(self.config.batch_windows) {
            let s = self.train_step(data, batch)?;
            on_step(&s);
            if s.contrastive.is_none() {
                rec.skipped_batches += 1;
            }
            rec.contrastive += s.contrastive.unwrap_or(0.0);
            rec.kl_anchor += s.kl_anchor.unwrap_or(0.0);
            rec.kl_sparse += s.kl_sparse.unwrap_or(0.0);
            rec.text_align += s.text_align.unwrap_or(0.0);
            rec.total += s.total;
            rec.steps += 1;
        }
        let n = rec.steps.max(1) as f64;
        rec.contrastive /= n;
        rec.kl_anchor /= n;
        rec.kl_sparse /= n;
        rec.text_align /= n;
        rec.total /= n;
        rec.seconds = start.elapsed().as_secs_f64();
        self.epochs_done += 1;
        Ok(rec)
    }

    /// Runs the remaining epochs. With `checkpoint_dir` the state is
    /// saved after every epoch; a failing epoch leaves the last good
    /// checkpoint in place.
    pub fn fit(
        &mut self,
        data: &TrainData,
        checkpoint_dir: Option<&Path>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainingReport> {
        let start = Instant::now();
        let mut report = TrainingReport::default();
        while self.epochs_done < self.config.epochs {
            let mut steps = Vec::new();
            let rec = self.run_epoch(data, &mut |s| {
                steps.push(s.clone());
                on_step(s);
            })?;
            log::info!(
                "epoch {} total {:.4} contrastive {:.4} anchor {:.4} sparse {:.4} text {:.4}",
                rec.epoch + 1,
                rec.total,
                rec.contrastive,
                rec.kl_anchor,
                rec.kl_sparse,
                rec.text_align
            );
            report.skipped_batches += rec.skipped_batches;
            report.steps.extend(steps);
            report.epochs.push(rec);
            if let Some(dir) = checkpoint_dir {
                self.save(dir)?;
            }
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Writes model and optimiser state to `dir`, replacing any previous
    /// checkpoint only once the new one is complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut all = self.model.store.clone();
        for (i, (_, name, _)) in self.model.store.iter().enumerate() {
            all.add(format!("adam.m.{name}"), self.optimizer.m[i].clone())?;
            all.add(format!("adam.v.{name}"), self.optimizer.v[i].clone())?;
        }
        let meta = serde_json::json!({
            "epochs_done": self.epochs_done,
            "step": self.step,
            "optimizer_step": self.optimizer.step,
            "model": self.model.config,
            "pretrain": self.config,
            "poi_ids": self.model.prototypes.ids,
            "with_head": self.model.head.is_some(),
            "text_dim": self.model.text.map(|_| self.model.store.get(self.model.text.expect("some").w).shape()[1]),
        });
        let tmp = tmp_sibling(dir);
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        checkpoint::save(&tmp, &all, meta)?;
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let (saved, meta) = checkpoint::load::<T>(dir)?;
        let info: CheckpointMeta = serde_json::from_value(meta)?;
        let mut model = Model::<T>::new(&info.model, &info.poi_ids, info.with_head, info.text_dim, info.pretrain.seed)?;
        let mut optimizer = OptimizerState::new(AdamConfig::adam(info.pretrain.learning_rate), &model.store);
        optimizer.step = info.optimizer_step;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let fetch = |key: &str| -> Result<Tensor<T>> {
                let t = saved.get(saved.id(key)?).clone();
                Ok(t)
            };
            let value = fetch(&name)?;
            if value.shape() != model.store.get(id).shape() {
                return Err(Error::Contract(format!("checkpoint tensor `{name}` has shape {:?}", value.shape())));
            }
            *model.store.get_mut(id) = value;
            optimizer.m[id.index()] = fetch(&format!("adam.m.{name}"))?;
            optimizer.v[id.index()] = fetch(&format!("adam.v.{name}"))?;
        }
        Ok(Trainer {
            model,
            optimizer,
            config: info.pretrain,
            epochs_done: info.epochs_done,
            step: info.step,
        })
    }
}

#[derive(Deserialize)]
struct CheckpointMeta {
    epochs_done: usize,
    step: u64,
    optimizer_step: u64,
    model: ModelConfig,
    pretrain: PretrainConfig,
    poi_ids: Vec<u32>,
    with_head: bool,
    text_dim: Option<usize>,
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    dir.with_file_name(name)
}

/// Writes the prototype matrix of a checkpoint, checking its ids
/// against the world.
pub fn export_embeddings<T: Scalar>(checkpoint_dir: &Path, world: &World, out: &Path, csv: bool) -> Result<Embeddings<T>> {
    let trainer = Trainer::<T>::load(checkpoint_dir)?;
    let emb = trainer.model.embeddings();
    if emb.poi_ids != world.ids() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} POI ids that do not match the {} POIs of the world file",
            emb.poi_ids.len(),
            world.len()
        )));
    }
    write_embeddings(out, &emb, csv)?;
    Ok(emb)
}
