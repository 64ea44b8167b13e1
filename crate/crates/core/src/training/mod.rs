//! Two-pass optimization: segmentation pretraining of the feature network,
//! then end-to-end training of the whole model on proposal batches.

mod checkpoint;
mod optim;

pub use checkpoint::{read_manifest, Checkpoint, Manifest, Progress, TensorRecord, FORMAT_VERSION, MANIFEST_FILE, PARAMS_GROUP};
pub use optim::Adam;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfnet::{seg_targets, standardize, BfNetConfig, GridSpec};
use crate::datagen::{image_tensor, load_image, Dataset, DatasetRecord, ProposalRecord};
use crate::error::{Error, Result};
use crate::geometry::{select_top_k, GroundTruth, Proposal};
use crate::losses::{build_targets, loss_cls, loss_res, loss_seg, loss_sup, LossTerms, TrainingTargets};
use crate::netcore::{Ctx, Grads, ParamSet, Tensor};
use crate::r2snet::{HeadOutputs, Model, Sample};
use crate::scalar::{Precision, Scalar, Storable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub k: usize,
    pub grid: GridSpec,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub precision: Precision,
    /// IoU a proposal needs with its matched ground truth to keep that
    /// ground truth's class as its relabel target.
    pub rho_iou: f64,
    pub loss_terms: LossTerms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            k: 30,
            grid: GridSpec::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            precision: Precision::Fast,
            rho_iou: 0.5,
            loss_terms: LossTerms::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.batch_size == 0 || self.k == 0 {
            return Err(Error::Config("batch_size and k must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho_iou) {
            return Err(Error::Config(format!("rho_iou must lie in [0, 1], got {}", self.rho_iou)));
        }
        Ok(())
    }
}

/// Which parameters a pass optimizes and against which loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    /// Feature network only, segmentation loss.
    Bfnet,
    /// Every trainable parameter, refinement loss.
    Full,
}

impl Pass {
    fn prefix(self) -> &'static str {
        match self {
            Pass::Bfnet => "bfnet.",
            Pass::Full => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLoss {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train: f64,
    pub heldout: Option<f64>,
}

/// One standardized training image with its annotations and, for the full
/// pass, the raw detector proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub gts: Vec<GroundTruth<T>>,
    pub proposals: Option<Vec<Proposal<T>>>,
}

/// Renders or decodes, resamples and standardizes the images of `records`,
/// pairing each with its proposal record when `proposals` is given.
pub fn prepare_images<T: Scalar>(
    dataset: &Dataset,
    records: &[DatasetRecord],
    proposals: Option<&[ProposalRecord]>,
    config: &BfNetConfig,
) -> Result<Vec<TrainImage<T>>> {
    let index: HashMap<&str, &ProposalRecord> = proposals.unwrap_or_default().iter().map(|p| (p.image_id.as_str(), p)).collect();
    records
        .par_iter()
        .map(|r| {
            let img = load_image(r, &dataset.base_dir, dataset.classes.len())?;
            let image = standardize(&image_tensor::<T>(&img, config.image_size), config)?;
            Ok(TrainImage {
                id: r.image_id.clone(),
                image,
                gts: r.ground_truths.iter().map(GroundTruth::cast).collect(),
                proposals: index
                    .get(r.image_id.as_str())
                    .map(|p| p.proposals.iter().map(Proposal::cast).collect()),
            })
        })
        .collect()
}

/// Result of a completed pass.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model with the parameters of the best epoch.
    pub model: Model<T>,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
}

/// Resumable state of a training pass.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub pass: Pass,
    pub adam: Adam<T>,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub best: ParamSet<T>,
}

impl<T: Storable> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, pass: Pass) -> Result<Self> {
        config.validate()?;
        if config.k != model.k || config.grid != model.grid {
            return Err(Error::Config(format!(
                "training config (k={}, grid {}x{}) does not match the model (k={}, grid {}x{})",
                config.k, config.grid.width, config.grid.height, model.k, model.grid.width, model.grid.height
            )));
        }
        let adam = Adam::new(&model.params, config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
        let best = model.params.clone();
        Ok(Trainer {
            model,
            config,
            pass,
            adam,
            history: Vec::new(),
            best_epoch: 0,
            best_loss: f64::INFINITY,
            best,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.epochs
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &[TrainImage<T>], heldout: &[TrainImage<T>]) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(train, heldout)?;
        }
        Ok(())
    }

    /// One pass over `train` in a seeded shuffled order, then evaluation on
    /// `heldout`. The best epoch is chosen by held-out loss, or by training
    /// loss when `heldout` is empty.
    pub fn run_epoch(&mut self, train: &[TrainImage<T>], heldout: &[TrainImage<T>]) -> Result<EpochLoss> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if self.pass == Pass::Full {
            for img in train.iter().chain(heldout) {
                if img.proposals.is_none() {
                    return Err(Error::Data(format!("no proposal record for image {:?}", img.id)));
                }
            }
        }
        let epoch = self.epochs_done() + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(self.config.seed, self.pass, epoch)));
        let (mut total, mut weight) = (0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&TrainImage<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let mut grads = Grads::zeros_like(&self.model.params);
            let mut ctx = Ctx::train();
            let loss = match self.pass {
                Pass::Bfnet => seg_batch(&self.model, &batch, Some(&mut grads))?,
                Pass::Full => r2s_batch(&self.model, &batch, &self.config, &mut ctx, Some(&mut grads))?,
            };
            if !loss.is_finite() || !grads.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|i| i.id.as_str()).collect();
                let what = if loss.is_finite() { "gradient" } else { "loss" };
                return Err(Error::Numeric(format!(
                    "non-finite {what} (loss {loss}) in epoch {epoch}, batch {} (images {ids:?})",
                    b + 1
                )));
            }
            self.adam.step(&mut self.model.params, &grads, self.pass.prefix());
            ctx.commit(&mut self.model.params);
            total += loss * batch.len() as f64;
            weight += batch.len();
        }
        let train_loss = total / weight as f64;
        let heldout_loss = if heldout.is_empty() { None } else { Some(self.evaluate(heldout)?) };
        let record = EpochLoss {
            epoch,
            train: train_loss,
            heldout: heldout_loss,
        };
        let score = heldout_loss.unwrap_or(train_loss);
        if score < self.best_loss {
            self.best_loss = score;
            self.best_epoch = epoch;
            self.best = self.model.params.clone();
        }
        self.history.push(record);
        Ok(record)
    }

    /// Mean loss of the current parameters over `images` in eval mode.
    pub fn evaluate(&self, images: &[TrainImage<T>]) -> Result<f64> {
        let (mut total, mut weight) = (0.0, 0usize);
        for chunk in images.chunks(self.config.batch_size) {
            let batch: Vec<&TrainImage<T>> = chunk.iter().collect();
            let loss = match self.pass {
                Pass::Bfnet => seg_batch(&self.model, &batch, None)?,
                Pass::Full => r2s_batch(&self.model, &batch, &self.config, &mut Ctx::eval(), None)?,
            };
            total += loss * batch.len() as f64;
            weight += batch.len();
        }
        Ok(total / weight as f64)
    }

    /// Model carrying the best epoch's parameters.
    pub fn best_model(&self) -> Model<T> {
        Model {
            params: self.best.clone(),
            ..self.model.clone()
        }
    }

    pub fn into_outcome(self) -> TrainOutcome<T> {
        TrainOutcome {
            model: self.best_model(),
            history: self.history,
            best_epoch: self.best_epoch,
        }
    }

    /// Resumable snapshot: current and best parameters plus optimizer state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.manifest.epoch = self.epochs_done();
        ck.manifest.losses = self.history.clone();
        ck.manifest.progress = Some(Progress {
            pass: self.pass,
            config: self.config,
            adam_step: self.adam.step,
            best_epoch: self.best_epoch,
            best_loss: self.best_loss,
        });
        ck.groups.insert("best".into(), self.best.clone());
        ck.groups.insert("adam.m".into(), self.adam.m.clone());
        ck.groups.insert("adam.v".into(), self.adam.v.clone());
        ck
    }

    /// Continues a pass from [`Trainer::checkpoint`] output. `config` may
    /// raise the epoch count but must otherwise match the recorded run.
    pub fn resume(ck: &Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        let progress = ck
            .manifest
            .progress
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint carries no training state to resume".into()))?;
        let recorded = TrainConfig {
            epochs: config.epochs,
            ..progress.config
        };
        if recorded != config {
            return Err(Error::Config("resume configuration differs from the checkpointed run".into()));
        }
        let model = ck.model()?;
        let group = |name: &str| {
            ck.groups
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks the {name} group")))
        };
        let mut trainer = Trainer::new(model, config, progress.pass)?;
        trainer.adam.step = progress.adam_step;
        trainer.adam.m = group("adam.m")?;
        trainer.adam.v = group("adam.v")?;
        trainer.best = group("best")?;
        trainer.best_epoch = progress.best_epoch;
        trainer.best_loss = progress.best_loss;
        trainer.history = ck.manifest.losses.clone();
        for set in [&trainer.adam.m, &trainer.adam.v, &trainer.best] {
            let same = set.len() == trainer.model.params.len()
                && set
                    .iter()
                    .zip(trainer.model.params.iter())
                    .all(|((_, a, ea), (_, b, eb))| a == b && ea.tensor.shape() == eb.tensor.shape());
            if !same {
                return Err(Error::Integrity("optimizer state does not match the model parameters".into()));
            }
        }
        Ok(trainer)
    }
}

/// Pretrains the feature network on the segmentation task. Mask layers are
/// frozen and everything outside the feature network is left untouched.
pub fn pretrain_bfnet<T: Storable>(
    model: Model<T>,
    train: &[TrainImage<T>],
    heldout: &[TrainImage<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, *config, Pass::Bfnet)?;
    trainer.run(train, heldout)?;
    Ok(trainer.into_outcome())
}

/// Trains every trainable parameter against the enabled refinement terms.
pub fn train_r2snet<T: Storable>(
    model: Model<T>,
    train: &[TrainImage<T>],
    heldout: &[TrainImage<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, *config, Pass::Full)?;
    trainer.run(train, heldout)?;
    Ok(trainer.into_outcome())
}

fn shuffle_seed(seed: u64, pass: Pass, epoch: usize) -> u64 {
    let tag = match pass {
        Pass::Bfnet => 0x6266_6e65_7400_0000,
        Pass::Full => 0x6675_6c6c_0000_0000,
    };
    seed ^ tag ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Mean segmentation loss over a batch; accumulates mean gradients when
/// `grads` is given.
fn seg_batch<T: Scalar>(model: &Model<T>, batch: &[&TrainImage<T>], mut grads: Option<&mut Grads<T>>) -> Result<f64> {
    let bf = &model.net.bfnet;
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for img in batch {
        let (features, cache) = bf.extract_image_features(&model.params, &img.image)?;
        let (probs, seg_cache) = bf.seg_forward(&model.params, &features)?;
        let labels = seg_targets(&img.gts, model.grid);
        let loss = loss_seg(&probs, &labels)?;
        total += loss.value.as_f64();
        if let Some(g) = grads.as_deref_mut() {
            let mut d = loss.grad;
            d.data_mut().iter_mut().for_each(|v| *v *= scale);
            let d_features = bf.seg_backward(&model.params, &seg_cache, &d, g);
            bf.backward_features(&model.params, &cache, &d_features, g);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Top-`k` rows and their targets for one image.
pub fn image_rows<T: Scalar>(model: &Model<T>, img: &TrainImage<T>, rho_iou: f64) -> Result<(Vec<Proposal<T>>, TrainingTargets)> {
    let proposals = img
        .proposals
        .as_deref()
        .ok_or_else(|| Error::Data(format!("no proposal record for image {:?}", img.id)))?;
    let rows = select_top_k(proposals, model.k);
    let real = proposals.len().min(model.k);
    let targets = build_targets(&rows, real, &img.gts, &model.classes, T::lit(rho_iou));
    Ok((rows, targets))
}

/// Refinement loss over a batch, restricted to the enabled terms.
fn r2s_batch<T: Scalar>(
    model: &Model<T>,
    batch: &[&TrainImage<T>],
    config: &TrainConfig,
    ctx: &mut Ctx<T>,
    grads: Option<&mut Grads<T>>,
) -> Result<f64> {
    let prepared = batch
        .iter()
        .map(|img| image_rows(model, img, config.rho_iou))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample<'_, T>> = batch
        .iter()
        .zip(&prepared)
        .map(|(img, (rows, _))| Sample { image: &img.image, rows })
        .collect();
    let targets = TrainingTargets::concat(&prepared.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    let (out, cache) = model.forward(&samples, ctx)?;
    let terms = config.loss_terms;
    let cls = loss_cls(&out.relabel, &targets.classes)?;
    let res = loss_res(&out.rescore, &targets.rescore)?;
    let sup = loss_sup(&out.suppress, &targets.background)?;
    let keep = |on: bool, mut t: Tensor<T>| {
        if !on {
            t.fill(T::zero());
        }
        t
    };
    let mut loss = 0.0;
    for (on, v) in [(terms.cls, cls.value), (terms.res, res.value), (terms.sup, sup.value)] {
        if on {
            loss += v.as_f64();
        }
    }
    if let Some(g) = grads {
        let d = HeadOutputs {
            relabel: keep(terms.cls, cls.grad),
            rescore: keep(terms.res, res.grad),
            suppress: keep(terms.sup, sup.grad),
        };
        model.backward(&cache, &d, g);
    }
    Ok(loss)
}
