//! Training loop: AdamW with warm-restart cosine schedule, per-batch dropout
//! of the dynamic encoder, a FIFO queue of ground embeddings as extra
//! negatives, resumable checkpoints and a JSONL metrics log.

mod augment;
mod config;
mod fixtures;
mod optim;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::contrastive::{info_nce_with_grad, stack_rows, EmbeddingQueue, Temperature};
use crate::encoders::{
    encode_metadata, ground_encoder, normalize_backward, patchify, CrossViewModel, DynamicCache, Embedding,
    GroundEncoder, MetadataEncoding, Module, OverheadCache, PixelNorm,
};
use crate::error::{Error, Result};
use crate::geodata::{read_manifest, GeoSample};

pub use augment::{policy_from_name, AugmentPolicy, Augmenter, Chain, FlipRotate, Identity, Jitter};
pub use config::TrainConfig;
pub use fixtures::{generate_fixture_pairs, FixtureOptions, FixtureSet, LATENT_DIM};
pub use optim::{AdamW, CosineWarmRestarts, Moments};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub meta_used: bool,
}

/// Bernoulli gate deciding, once per batch, whether the dynamic encoder
/// takes part. Open with probability `1 − p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutGate {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl DropoutGate {
    pub fn new(p: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        DropoutGate { p, rng }
    }

    /// Always consumes exactly one draw, whatever `p` is.
    pub fn draw(&mut self) -> bool {
        self.rng.random::<f64>() >= self.p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("corrupt rng state in checkpoint".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything besides model weights needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub optimizer: AdamW,
    pub queue: EmbeddingQueue,
    pub data_rng: ChaCha8Rng,
    pub gate: DropoutGate,
    /// Lowest batch loss seen so far, with its step.
    pub best: Option<(u64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    best: Option<(u64, f64)>,
    data_rng: RngState,
    gate_rng: RngState,
    adam_steps: BTreeMap<String, u64>,
    queue_capacity: usize,
}

struct SampleForward {
    overhead: OverheadCache,
    dynamic: Option<DynamicCache>,
    s: Array1<f64>,
    norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CrossViewModel,
    pub state: TrainState,
    ground: Box<dyn GroundEncoder>,
    augmenter: Augmenter,
    dataset: Vec<GeoSample>,
    targets: Vec<Array1<f64>>,
    metas: Vec<MetadataEncoding>,
    diagnostics_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Vec<GeoSample>) -> Result<Self> {
        config.validate()?;
        let model = CrossViewModel::new(config.encoder_config()?, config.seed)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(3);
        let state = TrainState {
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            optimizer: AdamW::new(config.beta1, config.beta2, config.adam_eps, config.weight_decay),
            queue: EmbeddingQueue::new(config.queue_capacity)?,
            data_rng,
            gate: DropoutGate::new(config.dynamic_dropout, config.seed),
            best: None,
        };
        let mut t = Trainer::assemble(config, model, state, dataset)?;
        if t.config.fit_pixel_norm {
            let size = t.model.input_size();
            let tiles = t
                .dataset
                .iter()
                .map(|s| s.overhead_tile.load().map(|img| crate::encoders::resize_to(&img, size)))
                .collect::<Result<Vec<RgbImage>>>()?;
            t.model.pixel_norm = PixelNorm::fit(&tiles);
        }
        t.state.order = (0..t.dataset.len()).collect();
        t.state.order.shuffle(&mut t.state.data_rng);
        Ok(t)
    }

    fn assemble(config: TrainConfig, model: CrossViewModel, state: TrainState, dataset: Vec<GeoSample>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::domain("training dataset is empty"));
        }
        if config.batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                config.batch_size,
                dataset.len()
            )));
        }
        let ground = ground_encoder(&model.config.ground_adapter, model.dim())?;
        let targets = dataset
            .par_iter()
            .map(|s| Ok(ground.encode(&*s.ground_image.load()?)?.into_values()))
            .collect::<Result<Vec<_>>>()?;
        let metas = dataset.iter().map(|s| encode_metadata(s.location, s.time)).collect();
        let augmenter = Augmenter::new(
            config.augment,
            model.input_size(),
            (config.crop_scale_min, config.crop_scale_max),
            policy_from_name(&config.augment_policy)?,
        );
        Ok(Trainer {
            config,
            model,
            state,
            ground,
            augmenter,
            dataset,
            targets,
            metas,
            diagnostics_dir: None,
        })
    }

    pub fn dataset(&self) -> &[GeoSample] {
        &self.dataset
    }

    pub fn ground(&self) -> &dyn GroundEncoder {
        self.ground.as_ref()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.dataset.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let by_epochs = self.config.epochs as u64 * self.steps_per_epoch();
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn schedule(&self) -> CosineWarmRestarts {
        CosineWarmRestarts {
            base_lr: self.config.lr,
            period: self.config.restart_epochs,
            mult: self.config.restart_mult,
            min_lr: 0.0,
        }
    }

    /// Learning rate in effect for the next step.
    pub fn current_lr(&self) -> f64 {
        self.schedule().lr_at(self.state.step as f64 / self.steps_per_epoch() as f64)
    }

    /// Directory receiving a diagnostic snapshot if a step fails numerically.
    pub fn set_diagnostics_dir(&mut self, dir: Option<PathBuf>) {
        self.diagnostics_dir = dir;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let k = self.config.batch_size;
        if self.state.cursor + k > self.state.order.len() {
            self.state.epoch += 1;
            self.state.order.shuffle(&mut self.state.data_rng);
            self.state.cursor = 0;
        }
        let batch = self.state.order[self.state.cursor..self.state.cursor + k].to_vec();
        self.state.cursor += k;
        batch
    }

    /// Next batch in epoch order, then one optimization step on it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        self.train_step(&batch)
    }

    /// One optimization step on the given dataset indices.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.dataset.len()) {
            return Err(Error::domain(format!("batch index {bad} out of range")));
        }
        let seeds: Vec<u64> = batch.iter().map(|_| self.state.data_rng.random()).collect();
        let gate_open = self.state.gate.draw();
        let meta_used = gate_open && self.config.use_meta && self.model.dynamic.is_some();

        let forwards = {
            let model = &self.model;
            let (dataset, metas, augmenter) = (&self.dataset, &self.metas, &self.augmenter);
            batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| {
                    let tile = augmenter.apply(&*dataset[i].overhead_tile.load()?, seed);
                    let patches = patchify(&tile, &model.config.backbone, &model.pixel_norm)?;
                    let (o_raw, overhead) = model.overhead.forward(&patches);
                    let (v, dynamic) = match (meta_used, &model.dynamic) {
                        (true, Some(d)) => {
                            let (e, cache) = d.forward(&metas[i])?;
                            (o_raw + e, Some(cache))
                        }
                        _ => (o_raw, None),
                    };
                    let norm = v.dot(&v).sqrt();
                    if !(norm.is_finite() && norm > 0.0) {
                        return Err(Error::Numeric(format!("embedding norm {norm} for sample {i}")));
                    }
                    Ok(SampleForward {
                        overhead,
                        dynamic,
                        s: v / norm,
                        norm,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let forwards = match forwards {
            Ok(f) => f,
            Err(e) => return Err(self.diagnose(e)),
        };

        let s = stack_rows(&forwards.iter().map(|f| f.s.clone()).collect::<Vec<_>>())?;
        let g = stack_rows(&batch.iter().map(|&i| self.targets[i].clone()).collect::<Vec<_>>())?;
        let tau = Temperature::from_log(self.model.log_tau);
        let (loss, grad) = match info_nce_with_grad(s.view(), g.view(), &self.state.queue, tau) {
            Ok(r) => r,
            Err(e) => return Err(self.diagnose(e)),
        };

        self.model.zero_grad();
        for (f, d_s) in forwards.iter().zip(grad.d_s.rows()) {
            let dv = normalize_backward(&f.s, f.norm, &d_s.to_owned());
            self.model.overhead.backward(&f.overhead, &dv);
            if let (Some(cache), Some(d)) = (&f.dynamic, &mut self.model.dynamic) {
                d.backward(cache, &dv);
            }
        }

        let lr = self.current_lr();
        let opt = &mut self.state.optimizer;
        self.model.overhead.visit_mut("overhead", &mut |n, p| opt.step(n, p, lr));
        if meta_used {
            if let Some(d) = &mut self.model.dynamic {
                d.visit_mut("dynamic", &mut |n, p| opt.step(n, p, lr));
            }
        }
        let mut log_tau = self.model.log_tau;
        opt.step_scalar("log_tau", &mut log_tau, grad.d_log_tau(tau.tau()), lr);
        self.model.log_tau = Temperature::from_log(log_tau).log_tau();

        self.state.queue.push(g.view())?;
        let record = StepRecord {
            step: self.state.step,
            loss: loss.value,
            lr,
            tau: tau.tau(),
            meta_used,
        };
        self.state.step += 1;
        if self.state.best.is_none_or(|(_, b)| loss.value < b) {
            self.state.best = Some((record.step, loss.value));
        }
        Ok(record)
    }

    fn diagnose(&self, err: Error) -> Error {
        if let (Error::Numeric(msg), Some(dir)) = (&err, &self.diagnostics_dir) {
            let path = dir.join(format!("diagnostic-step{}.ckpt", self.state.step));
            let written = self.to_archive().and_then(|mut a| {
                a.put_meta("error", msg)?;
                a.save(&path)
            });
            if let Err(e) = written {
                tracing::warn!("could not write diagnostic snapshot: {e}");
            } else {
                tracing::error!(path = %path.display(), "numeric failure, snapshot written");
            }
        }
        err
    }

    fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        self.model.write_into(&mut a)?;
        a.put_meta("train_config", &self.config)?;
        let st = &self.state;
        let mut adam_steps = BTreeMap::new();
        for (name, m) in &st.optimizer.state {
            adam_steps.insert(name.clone(), m.t);
            a.tensors.insert(format!("adam.m.{name}"), m.m.clone());
            a.tensors.insert(format!("adam.v.{name}"), m.v.clone());
        }
        let meta = StateMeta {
            step: st.step,
            epoch: st.epoch,
            order: st.order.clone(),
            cursor: st.cursor,
            best: st.best,
            data_rng: RngState::capture(&st.data_rng),
            gate_rng: RngState::capture(&st.gate.rng),
            adam_steps,
            queue_capacity: st.queue.capacity(),
        };
        a.put_meta("train_state", &meta)?;
        if !st.queue.is_empty() {
            a.tensors.insert("queue".into(), st.queue.to_matrix(self.model.dim()));
        }
        Ok(a)
    }

    /// Full resumable checkpoint: model, optimizer moments, queue, RNGs.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Continues a run from `save_checkpoint` output over the same dataset.
    pub fn resume(path: &Path, dataset: Vec<GeoSample>) -> Result<Self> {
        let a = Archive::load(path)?;
        let config: TrainConfig = a.meta("train_config")?;
        let model = CrossViewModel::read_from(&a)?;
        let meta: StateMeta = a.meta("train_state")?;
        let mut optimizer = AdamW::new(config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        for (name, t) in meta.adam_steps {
            let m = a.tensor(&format!("adam.m.{name}"))?.clone();
            let v = a.tensor(&format!("adam.v.{name}"))?.clone();
            optimizer.state.insert(name, Moments { m, v, t });
        }
        let mut queue = EmbeddingQueue::new(meta.queue_capacity)?;
        if let Ok(q) = a.tensor("queue") {
            queue.push(q.view())?;
        }
        let state = TrainState {
            step: meta.step,
            epoch: meta.epoch,
            order: meta.order,
            cursor: meta.cursor,
            optimizer,
            queue,
            data_rng: meta.data_rng.restore()?,
            gate: DropoutGate {
                p: config.dynamic_dropout,
                rng: meta.gate_rng.restore()?,
            },
            best: meta.best,
        };
        if state.order.len() != dataset.len() {
            return Err(Error::Config(format!(
                "checkpoint was trained on {} samples, got {}",
                state.order.len(),
                dataset.len()
            )));
        }
        Trainer::assemble(config, model, state, dataset)
    }

    /// Runs until `total_steps`, logging metrics and checkpoints under `out`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                self.diagnostics_dir = Some(dir.to_path_buf());
                let path = dir.join("metrics.jsonl");
                let file = OpenOptions::new()
                    .create(true)
                    .append(self.state.step > 0)
                    .write(true)
                    .truncate(self.state.step == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(file)))
            }
            None => None,
        };
        let total = self.total_steps();
        let mut history = Vec::new();
        while self.state.step < total {
            let rec = self.step()?;
            if let Some((path, w)) = &mut log {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if rec.step % 50 == 0 {
                tracing::info!(step = rec.step, loss = rec.loss, lr = rec.lr, tau = rec.tau, "train");
            }
            history.push(rec);
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && self.state.step.is_multiple_of(self.config.checkpoint_every) {
                    flush(&mut log)?;
                    self.save_checkpoint(&dir.join("checkpoint.ckpt"))?;
                }
            }
        }
        flush(&mut log)?;
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join("checkpoint.ckpt"))?;
            let mut a = Archive::new();
            self.model.write_into(&mut a)?;
            a.put_meta("train_config", &self.config)?;
            a.save(&dir.join("model.ckpt"))?;
        }
        Ok(history)
    }
}

fn flush(log: &mut Option<(PathBuf, BufWriter<File>)>) -> Result<()> {
    if let Some((path, w)) = log {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(())
}

/// Training samples named by the config: a manifest or a synthetic fixture.
pub fn load_dataset(config: &TrainConfig) -> Result<Vec<GeoSample>> {
    match (&config.manifest, config.fixture_pairs) {
        (Some(path), None) => read_manifest(path),
        (None, Some(n)) => {
            let enc = config.encoder_config()?;
            let opts = FixtureOptions {
                metadata_shift: config.fixture_metadata_shift,
                ground_adapter: enc.ground_adapter.clone(),
                ..FixtureOptions::default()
            };
            Ok(generate_fixture_pairs(n, enc.embed_dim, config.seed, &opts)?.samples)
        }
        (Some(_), Some(_)) => Err(Error::Config("set either manifest or fixture_pairs, not both".into())),
        (None, None) => Err(Error::Config("no dataset: set manifest or fixture_pairs".into())),
    }
}

/// Training configuration recorded in a checkpoint, if it carries one.
pub fn checkpoint_config(path: &Path) -> Result<Option<TrainConfig>> {
    let a = Archive::load(path)?;
    if a.has_meta("train_config") {
        Ok(Some(a.meta("train_config")?))
    } else {
        Ok(None)
    }
}

/// Trains from scratch and returns the trainer holding the final model.
pub fn fit(config: TrainConfig, dataset: Vec<GeoSample>, out: Option<&Path>) -> Result<(Trainer, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config, dataset)?;
    let history = trainer.run(out)?;
    Ok((trainer, history))
}

/// Overhead embeddings (conditioned on each sample's metadata when
/// `use_meta`) and frozen ground embeddings for paired samples.
pub fn embed_pairs(
    model: &CrossViewModel,
    ground: &dyn GroundEncoder,
    samples: &[GeoSample],
    use_meta: bool,
) -> Result<(Vec<Embedding>, Vec<Embedding>)> {
    samples
        .par_iter()
        .map(|s| {
            let tile = model.prepare(&*s.overhead_tile.load()?);
            let meta = use_meta.then(|| encode_metadata(s.location, s.time));
            let o = model.embed(&tile, meta.as_ref())?;
            let g = ground.encode(&*s.ground_image.load()?)?;
            Ok((o, g))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Matrix whose rows are the given embeddings.
pub fn embedding_matrix(embs: &[Embedding]) -> Array2<f64> {
    let d = embs.first().map_or(0, Embedding::dim);
    Array2::from_shape_fn((embs.len(), d), |(i, j)| embs[i].values()[j])
}
