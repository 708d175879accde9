//! Optimization: batch objectives, Adam, the resumable training loop,
//! checkpoints and gradient checking.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_images_on_tape, encode_texts_on_tape, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_split;
use crate::losses::{total_loss, BatchLayout, Classifiers, LossReport, LossWeights, ObjectiveSpec};
use crate::model::{Model, ModelSpec, BOUNDARY, CLASSIFIER_GLOBAL, CLASSIFIER_LOCAL, PHI, THETA};
use crate::numerics::{relative_error, Tape, Tensor};
use crate::params::ParamSet;
use crate::sampling::{BatchPlan, Sampler};
use crate::similarity::{score_batch, MiningVars};

/// Multiplies the learning rate by `factor` every `every_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub losses: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Pairs per batch, half matched and half mismatched.
    pub batch_size: usize,
    pub seed: u64,
    /// Pair each matched pair with one mismatched pair; otherwise use all
    /// cross-identity pairings inside the batch.
    pub balanced: bool,
    /// Include the ranking term on `s_local_neg`.
    pub local_neg_ranking: bool,
    pub max_grad_norm: Option<f64>,
    pub lr_decay: Option<StepDecay>,
    /// Fraction of identities held out for validation.
    pub val_fraction: f64,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            losses: LossWeights::default(),
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 45,
            batch_size: 64,
            seed: 0,
            balanced: true,
            local_neg_ranking: true,
            max_grad_norm: None,
            lr_decay: None,
            val_fraction: 0.1,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size {} must be even and at least 2",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config("max_grad_norm must be positive".into()));
            }
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || !(d.factor.is_finite() && d.factor > 0.0) {
                return Err(Error::Config("lr_decay needs every_epochs >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }

    fn sampler_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
    }

    fn objective(&self) -> (bool, bool) {
        (self.local_neg_ranking, self.model.learnable_boundary)
    }
}

/// Adam first and second moments plus the step count used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            let mut out = ParamSet::new();
            for (name, t) in p.iter() {
                out.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            out
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        let m = state.m.get(name)?;
        let v = state.v.get(name)?;
        if p.len() != g.len() {
            return Err(Error::Dimension(format!("gradient for `{name}` has the wrong size")));
        }
        let mut new_p = Vec::with_capacity(p.len());
        let mut new_m = Vec::with_capacity(p.len());
        let mut new_v = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            new_p.push(p.data()[i] - update);
            new_m.push(mi);
            new_v.push(vi);
        }
        let shape = p.shape().to_vec();
        params.insert(name.clone(), Tensor::new(shape.clone(), new_p)?);
        state.m.insert(name.clone(), Tensor::new(shape.clone(), new_m)?);
        state.v.insert(name.clone(), Tensor::new(shape, new_v)?);
    }
    Ok(())
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        let names: Vec<String> = grads.names().cloned().collect();
        for name in names {
            let g = grads.get(&name).expect("listed").map(|v| v * s);
            grads.insert(name, g);
        }
    }
    norm
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub report: LossReport,
    pub grads: ParamSet,
    /// Closest approach of any differentiable input to a kink.
    pub kink_margin: f64,
}

/// Loss and gradients of the configured objective on one batch.
pub fn batch_objective(
    model: &Model,
    dataset: &Dataset,
    plan: &BatchPlan,
    config: &TrainConfig,
) -> Result<BatchOutcome> {
    batch_objective_with(model, dataset, plan, config, true)
}

/// Loss value only; no gradient bookkeeping.
pub fn batch_loss(model: &Model, dataset: &Dataset, plan: &BatchPlan, config: &TrainConfig) -> Result<f64> {
    Ok(batch_objective_with(model, dataset, plan, config, false)?.report.total)
}

fn batch_objective_with(
    model: &Model,
    dataset: &Dataset,
    plan: &BatchPlan,
    config: &TrainConfig,
    differentiate: bool,
) -> Result<BatchOutcome> {
    let spec = &model.spec;
    let cfg = &spec.encoder;
    let mut image_pos: BTreeMap<usize, usize> = BTreeMap::new();
    let mut text_pos: BTreeMap<usize, usize> = BTreeMap::new();
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut place = |pairs: &[(usize, usize)]| -> Result<Vec<(usize, usize)>> {
        pairs
            .iter()
            .map(|&(i, t)| {
                if i >= dataset.samples.len() || t >= dataset.samples.len() {
                    return Err(Error::Data(format!("batch refers to missing sample ({i}, {t})")));
                }
                let ip = *image_pos.entry(i).or_insert_with(|| {
                    images.push(i);
                    images.len() - 1
                });
                let tp = *text_pos.entry(t).or_insert_with(|| {
                    texts.push(t);
                    texts.len() - 1
                });
                Ok((ip, tp))
            })
            .collect()
    };
    let matched = place(&plan.matched)?;
    let mismatched = place(&plan.mismatched)?;
    let layout = BatchLayout {
        image_identities: images.iter().map(|&i| dataset.samples[i].identity).collect(),
        text_identities: texts.iter().map(|&t| dataset.samples[t].identity).collect(),
        matched,
        mismatched,
    };

    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, differentiate);
    let raw_images: Vec<&Tensor> = images.iter().map(|&i| &dataset.samples[i].image).collect();
    let raw_texts: Vec<(&Tensor, usize)> = texts
        .iter()
        .map(|&t| (&dataset.samples[t].tokens, dataset.samples[t].text_len))
        .collect();
    let enc_images = encode_images_on_tape(&mut tape, &vars, &raw_images, cfg)?;
    let enc_texts = encode_texts_on_tape(&mut tape, &vars, &raw_texts, cfg)?;

    let (local_neg_ranking, learnable) = config.objective();
    let boundary = if learnable { Some(vars.get(BOUNDARY)?) } else { None };
    let mining = if spec.branches.fpm {
        Some(MiningVars {
            theta: vars.get(THETA)?,
            phi: vars.get(PHI)?,
            mask: spec.mining_mask,
            boundary,
        })
    } else {
        None
    };
    let scores = score_batch(&mut tape, &enc_images, &enc_texts, mining, cfg.region_count)?;
    let terms = total_loss(
        &mut tape,
        &scores,
        &enc_images,
        &enc_texts,
        &layout,
        Classifiers {
            global: vars.get(CLASSIFIER_GLOBAL)?,
            local: vars.get(CLASSIFIER_LOCAL)?,
        },
        ObjectiveSpec {
            branches: spec.branches,
            local_neg_ranking,
            boundary,
        },
        &config.losses,
    )?;
    let report = terms.report(&tape);
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!("loss diverged to {}", report.total)));
    }
    let grads = if differentiate {
        let mut g = tape.backward(terms.total)?;
        vars.gradients(&mut g)
    } else {
        ParamSet::new()
    };
    Ok(BatchOutcome {
        report,
        grads,
        kink_margin: tape.kink_margin(),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        learning_rate: f64,
        loss: LossReport,
        boundary: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        boundary: f64,
        /// Validation Recall@K in percent, keyed `r1`, `r5`, `r10`.
        validation: Option<BTreeMap<String, f64>>,
    },
}

/// Resumable, deterministic training state over one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Optimizer steps completed so far.
    pub step: u64,
    sampler: Sampler,
    train: Vec<usize>,
    val: Vec<usize>,
    epoch_cache: Option<(usize, Vec<BatchPlan>)>,
    epoch_losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.seed)?;
        let adam = AdamState::new(&model.params);
        Self::assemble(dataset, config, model, adam, 0)
    }

    /// Continues a run from a checkpoint; the result is bit-identical to a
    /// run that was never interrupted.
    pub fn from_checkpoint(dataset: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = Model::from_params(ckpt.config.model.clone(), ckpt.params)?;
        Self::assemble(dataset, ckpt.config, model, ckpt.adam, ckpt.step)
    }

    fn assemble(
        dataset: &'a Dataset,
        config: TrainConfig,
        model: Model,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        dataset.validate()?;
        let enc = &config.model.encoder;
        let d = &dataset.dims;
        if (enc.region_count, enc.image_raw_dim, enc.text_raw_dim, enc.max_words)
            != (d.region_count, d.image_raw_dim, d.text_raw_dim, d.max_words)
            || enc.identity_count < d.identity_count
        {
            return Err(Error::Config(format!(
                "encoder dimensions do not fit the dataset ({d:?})"
            )));
        }
        let (train, val) = dataset.split_by_identity(config.val_fraction)?;
        let identities = dataset.samples.iter().map(|s| s.identity).collect();
        let sampler = Sampler::new(
            train.clone(),
            identities,
            config.batch_size,
            config.balanced,
            config.sampler_seed(),
        )?;
        Ok(Self {
            dataset,
            config,
            model,
            adam,
            step,
            sampler,
            train,
            val,
            epoch_cache: None,
            epoch_losses: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.batches_per_epoch()) as u64
    }

    /// Epoch of the next step.
    pub fn epoch(&self) -> usize {
        (self.step / self.batches_per_epoch() as u64) as usize
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    fn plan(&mut self, epoch: usize, batch: usize) -> BatchPlan {
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            self.epoch_cache = Some((epoch, self.sampler.epoch(epoch)));
        }
        self.epoch_cache.as_ref().expect("filled").1[batch].clone()
    }

    /// Runs one optimizer step and returns its losses.
    pub fn step_once(&mut self) -> Result<LossReport> {
        let bpe = self.batches_per_epoch();
        let epoch = self.epoch();
        let batch = (self.step % bpe as u64) as usize;
        let plan = self.plan(epoch, batch);
        let outcome = batch_objective(&self.model, self.dataset, &plan, &self.config)?;
        let mut grads = outcome.grads;
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
        }
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.config.learning_rate_at(epoch);
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            lr,
            self.config.beta1,
            self.config.beta2,
            self.config.adam_eps,
        )?;
        self.step += 1;
        self.log.push(LogRecord::Step {
            epoch,
            step: self.step,
            learning_rate: lr,
            loss: outcome.report.clone(),
            boundary: self.model.boundary(),
        });
        self.epoch_losses.push(outcome.report.total);
        if self.step.is_multiple_of(bpe as u64) {
            self.finish_epoch(epoch)?;
        }
        Ok(outcome.report)
    }

    fn finish_epoch(&mut self, epoch: usize) -> Result<()> {
        let n = self.epoch_losses.len().max(1) as f64;
        let mean_loss = self.epoch_losses.drain(..).sum::<f64>() / n;
        let every = self.config.eval_every;
        let due = every > 0 && ((epoch + 1).is_multiple_of(every) || epoch + 1 == self.config.epochs);
        let validation = if due && !self.val.is_empty() {
            let r = evaluate_split(&self.model, self.dataset, &self.val, self.model.fusion())?;
            Some(r.recall_map())
        } else {
            None
        };
        self.log.push(LogRecord::Epoch {
            epoch,
            mean_loss,
            boundary: self.model.boundary(),
            validation,
        });
        Ok(())
    }

    /// Trains until the configured number of epochs is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step_once()?;
        }
        Ok(())
    }

    /// Trains until `step` optimizer steps have been taken (or the run ends).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.step < step && !self.is_finished() {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let bpe = self.batches_per_epoch() as u64;
        Checkpoint {
            config: self.config.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            sampler_seed: self.config.sampler_seed(),
            epoch: self.step / bpe,
            batch_in_epoch: self.step % bpe,
        }
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Trains a fresh model to completion.
pub fn train(dataset: &Dataset, config: TrainConfig) -> Result<(Model, Vec<LogRecord>)> {
    let mut t = Trainer::new(dataset, config)?;
    t.run()?;
    let log = std::mem::take(&mut t.log);
    Ok((t.into_model(), log))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FPMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete resumable training state.
///
/// Binary layout, little-endian: magic, `u32` version, `u64` step, `u64`
/// sampler seed, `u64` epoch, `u64` batch within epoch, `u64` Adam step,
/// `u32` config JSON length and bytes, `u32` tensor count, then per tensor
/// `u32` name length, name, `u32` rank, `u64` dims, `f64` values. Tensors are
/// named `param/…`, `adam.m/…` and `adam.v/…`, in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub adam: AdamState,
    pub step: u64,
    pub sampler_seed: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.step, self.sampler_seed, self.epoch, self.batch_in_epoch, self.adam.t] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let tables = [("param/", &self.params), ("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)];
        let count: usize = tables.iter().map(|(_, p)| p.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, set) in tables {
            for (name, t) in set.iter() {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(&mut r)?;
        let sampler_seed = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let batch_in_epoch = read_u64(&mut r)?;
        let adam_t = read_u64(&mut r)?;
        let config_len = read_u32(&mut r)? as usize;
        let mut config = vec![0u8; config_len.min(r.len())];
        read_exact(&mut r, &mut config)?;
        if config.len() != config_len {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let config: TrainConfig = serde_json::from_slice(&config)?;
        let count = read_u32(&mut r)?;
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(Error::Data("truncated checkpoint".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 2 {
                return Err(Error::Data(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > r.len() {
                return Err(Error::Data("truncated checkpoint".into()));
            }
            let data = (0..n).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Data(format!("tensor `{name}`: {e}")))?;
            if let Some(rest) = name.strip_prefix("param/") {
                params.insert(rest, t);
            } else if let Some(rest) = name.strip_prefix("adam.m/") {
                m.insert(rest, t);
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                v.insert(rest, t);
            } else {
                return Err(Error::Data(format!("unknown tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            params,
            adam: AdamState { m, v, t: adam_t },
            step,
            sampler_seed,
            epoch,
            batch_in_epoch,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Settings for comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter group; groups this small or smaller
    /// are checked in full.
    pub coords_per_group: usize,
    pub tolerance: f64,
    /// Norms below this count as zero when forming relative errors.
    pub floor: f64,
    /// A pass whose inputs come closer than this to a kink is rejected.
    pub min_kink_margin: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_group: 12,
            tolerance: 1e-5,
            floor: 1e-6,
            min_kink_margin: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub coordinates: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_relative_error: f64,
    pub kink_margin: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of the batch objective against central differences
/// for every parameter group.
pub fn gradcheck(
    model: &Model,
    dataset: &Dataset,
    plan: &BatchPlan,
    config: &TrainConfig,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let outcome = batch_objective(model, dataset, plan, config)?;
    if outcome.kink_margin < opts.min_kink_margin {
        return Err(Error::Numerical(format!(
            "evaluation point lies {:.2e} from a kink; resample",
            outcome.kink_margin
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();
    let mut probe = model.clone();
    for (name, value) in model.params.iter() {
        let n = value.len();
        let mut coords: Vec<usize> = if n <= opts.coords_per_group {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_group).into_vec()
        };
        coords.sort_unstable();
        let grad = outcome.grads.get(name)?;
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let x = value.data()[c];
            probe.params.insert(name.clone(), value.with_value(c, x + opts.step));
            let up = batch_loss(&probe, dataset, plan, config)?;
            probe.params.insert(name.clone(), value.with_value(c, x - opts.step));
            let down = batch_loss(&probe, dataset, plan, config)?;
            analytic.push(grad.data()[c]);
            numeric.push((up - down) / (2.0 * opts.step));
        }
        probe.params.insert(name.clone(), value.clone());
        let a = Tensor::vector(analytic.clone())?;
        let b = Tensor::vector(numeric.clone())?;
        groups.push(GroupCheck {
            name: name.clone(),
            coordinates: coords,
            analytic,
            numeric,
            relative_error: relative_error(&a, &b, opts.floor),
        });
    }
    let max_relative_error = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        groups,
        max_relative_error,
        kink_margin: outcome.kink_margin,
        tolerance: opts.tolerance,
        passed: max_relative_error <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_step(x: f64, m: f64, v: f64, t: i32, lr: f64) -> (f64, f64, f64) {
        let g = 2.0 * x;
        let m = 0.9 * m + 0.1 * g;
        let v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        (x - lr * mhat / (vhat.sqrt() + 1e-8), m, v)
    }

    fn one(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![x]).unwrap());
        p
    }

    #[test]
    fn adam_two_steps_on_a_quadratic() {
        let mut params = one(1.0);
        let mut state = AdamState::new(&params);
        let (x1, m1, v1) = quadratic_step(1.0, 0.0, 0.0, 1, 0.001);
        let (x2, _, _) = quadratic_step(x1, m1, v1, 2, 0.001);
        for expected in [x1, x2] {
            let x = params.get("x").unwrap().data()[0];
            adam_step(&mut params, &one(2.0 * x), &mut state, 0.001, 0.9, 0.999, 1e-8).unwrap();
            assert!((params.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
        }
        // The first step moves by almost exactly the learning rate.
        assert!((1.0 - x1 - 0.001).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut params = one(0.7);
        let mut state = AdamState::new(&params);
        for _ in 0..3 {
            adam_step(&mut params, &one(0.0), &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
        }
        assert_eq!(params.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adam_moves_against_the_gradient_sign() {
        for g in [-3.0, -1e-4, 2e-3, 5.0] {
            let mut params = one(0.0);
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &one(g), &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
            let x = params.get("x").unwrap().data()[0];
            assert!(x * g < 0.0);
        }
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::vector(vec![3.0]).unwrap());
        g.insert("b", Tensor::vector(vec![4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g.get("b").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig {
            lr_decay: Some(StepDecay {
                every_epochs: 2,
                factor: 0.5,
            }),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.001);
        assert_eq!(cfg.learning_rate_at(1), 0.001);
        assert_eq!(cfg.learning_rate_at(2), 0.0005);
        assert_eq!(cfg.learning_rate_at(5), 0.00025);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 3, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { beta2: 1.0, ..TrainConfig::default() },
            TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
