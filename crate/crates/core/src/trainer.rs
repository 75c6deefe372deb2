//! Two-stage training: bokeh-loss pretraining of the generator, then joint
//! adversarial refinement against the dual critic.
//!
//! All randomness is derived from `(seed, stage, step)`, so a [`TrainState`]
//! saved at any step resumes bitwise-identically.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::autograd::Graph;
use crate::checkpoint::Archive;
use crate::dataset::{batch_tensors, sample_batch, SamplePair};
use crate::discriminator::{build_discriminator, critic_loss_var, generator_adversarial_var, sample_eps, DiscriminatorConfig, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::generator::{build_generator, forward_var, generator_forward, GeneratorConfig, GeneratorParams};
use crate::imaging::{psnr, ssim, ImageTensor};
use crate::losses::{composite_var, CompositeInputs, ConvFeatureStack, FeatureExtractor, LossReport, LossTerm, LossWeights, Stage};
use crate::optim::{Adam, AdamConfig};
use crate::seeding::{derived_rng, derived_seed, STREAM_GP, STREAM_INIT_CRITIC, STREAM_INIT_GENERATOR};

pub const HISTORY_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub refine_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pretrain_weights: LossWeights,
    pub refine_weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only at stage ends.
    pub checkpoint_every: u64,
    /// Steps per epoch; 0 means one pass over the training pairs.
    pub steps_per_epoch: usize,
    pub crop_size: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Label of the blur-cue source, used only in the arm name.
    pub cue: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 60,
            refine_epochs: 60,
            batch_size: 2,
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            pretrain_weights: LossWeights::PRETRAIN,
            refine_weights: LossWeights::REFINE,
            seed: 0,
            checkpoint_every: 0,
            steps_per_epoch: 0,
            crop_size: crate::dataset::DEFAULT_CROP,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            cue: "depth".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::Config("batch_size and crop_size must be positive".into()));
        }
        self.adam().validate()?;
        self.pretrain_weights.validate()?;
        self.refine_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if !self.crop_size.is_multiple_of(self.generator.stride()) {
            return Err(Error::Config(format!(
                "crop_size {} must be a multiple of the generator stride {}",
                self.crop_size,
                self.generator.stride()
            )));
        }
        if self.refine_epochs > 0 {
            self.discriminator.check_input(self.crop_size, self.crop_size).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    pub fn weights(&self, stage: Stage) -> &LossWeights {
        match stage {
            Stage::Pretrain => &self.pretrain_weights,
            Stage::Refine => &self.refine_weights,
        }
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Refine => self.refine_epochs,
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch as u64
        } else {
            train_len.div_ceil(self.batch_size).max(1) as u64
        }
    }

    /// Experiment label, e.g. `NAFNet8 (GAN/No Bokeh Loss)`.
    pub fn arm_name(&self) -> String {
        let mut tags = Vec::new();
        tags.push(if self.refine_epochs > 0 { "GAN" } else { "No GAN" }.to_string());
        let w = &self.pretrain_weights;
        if w.edgediff == 0.0 && w.backblur == 0.0 && w.foreedge == 0.0 {
            tags.push("No Bokeh Loss".into());
        }
        if self.cue != "depth" {
            tags.push(format!("Cue {}", self.cue));
        }
        format!("NAFNet{} ({})", self.generator.width, tags.join("/"))
    }
}

/// Critic outputs of a refine step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub d_loss: f64,
    pub wasserstein: f64,
    pub gp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossReport,
    pub critic: Option<CriticReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Steps taken in the current stage.
    pub stage_step: u64,
    /// Steps taken over both stages.
    pub step: u64,
    pub seed: u64,
    pub generator: GeneratorParams,
    pub g_opt: Adam,
    pub critic: Option<DiscriminatorParams>,
    pub d_opt: Option<Adam>,
    /// Most recent composite totals, oldest first.
    pub history: VecDeque<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let generator = build_generator(&config.generator, derived_seed(config.seed, STREAM_INIT_GENERATOR, 0))?;
        let g_opt = Adam::new(config.adam(), &generator.store);
        Ok(Self {
            stage: Stage::Pretrain,
            stage_step: 0,
            step: 0,
            seed: config.seed,
            generator,
            g_opt,
            critic: None,
            d_opt: None,
            history: VecDeque::with_capacity(HISTORY_LEN),
        })
    }

    /// Switches to refinement: fresh critic, fresh optimizer moments for both
    /// networks, generator weights unchanged.
    pub fn begin_refine(&mut self, config: &TrainConfig) -> Result<()> {
        let critic = build_discriminator(&config.discriminator, derived_seed(self.seed, STREAM_INIT_CRITIC, 0))?;
        self.d_opt = Some(Adam::new(config.adam(), &critic.store));
        self.critic = Some(critic);
        self.g_opt = Adam::new(config.adam(), &self.generator.store);
        self.stage = Stage::Refine;
        self.stage_step = 0;
        self.history.clear();
        Ok(())
    }

    fn record(&mut self, total: f64) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(total);
    }

    pub fn to_archive(&self, config: &TrainConfig) -> Archive {
        let mut ar = self.generator.to_archive();
        let meta = ar.meta.as_object_mut().expect("object meta");
        meta.insert("kind".into(), json!("train_state"));
        meta.insert("stage".into(), json!(self.stage));
        meta.insert("stage_step".into(), json!(self.stage_step));
        meta.insert("step".into(), json!(self.step));
        meta.insert("run_seed".into(), json!(self.seed));
        meta.insert("history".into(), json!(self.history));
        meta.insert("g_opt_step".into(), json!(self.g_opt.step));
        meta.insert("train".into(), serde_json::to_value(config).expect("config serializes"));
        self.g_opt.put(&mut ar, "g_opt/");
        if let (Some(c), Some(o)) = (&self.critic, &self.d_opt) {
            ar.meta["discriminator"] = serde_json::to_value(&c.config).expect("config serializes");
            ar.meta["d_opt_step"] = json!(o.step);
            ar.put_store("critic/", &c.store);
            o.put(&mut ar, "d_opt/");
        }
        ar
    }

    pub fn from_archive(ar: &Archive, config: &TrainConfig) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("training checkpoint lacks {what}"));
        if ar.meta["kind"] != "train_state" {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let generator = GeneratorParams::from_archive(ar)?;
        if generator.config != config.generator {
            return Err(Error::Checkpoint("checkpoint generator config differs from the run config".into()));
        }
        let stage: Stage = serde_json::from_value(ar.meta["stage"].clone()).map_err(|_| bad("stage"))?;
        let u = |k: &str| ar.meta[k].as_u64().ok_or_else(|| bad(k));
        let history: VecDeque<f64> = serde_json::from_value(ar.meta["history"].clone()).map_err(|_| bad("history"))?;
        let g_opt = Adam::take(ar, "g_opt/", config.adam(), u("g_opt_step")?, &generator.store)?;
        let (critic, d_opt) = if stage == Stage::Refine {
            let dc: DiscriminatorConfig =
                serde_json::from_value(ar.meta["discriminator"].clone()).map_err(|_| bad("discriminator config"))?;
            let store = ar.take_store("critic/");
            if !build_discriminator(&dc, 0)?.store.same_layout(&store) {
                return Err(Error::Checkpoint("critic arrays do not match the recorded config".into()));
            }
            let opt = Adam::take(ar, "d_opt/", config.adam(), u("d_opt_step")?, &store)?;
            (Some(DiscriminatorParams { config: dc, store }), Some(opt))
        } else {
            (None, None)
        };
        Ok(Self {
            stage,
            stage_step: u("stage_step")?,
            step: u("step")?,
            seed: u("run_seed")?,
            generator,
            g_opt,
            critic,
            d_opt,
            history,
        })
    }

    pub fn save(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        self.to_archive(config).save(path)
    }

    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, config)
    }
}

fn non_finite(term: &str, state: &TrainState) -> Error {
    Error::NonFinite { term: format!("{} {term}", state.stage), step: state.step }
}

/// Builds the generator composite for `batch` and applies one Adam update.
fn generator_update(
    state: &mut TrainState,
    batch: &[SamplePair],
    config: &TrainConfig,
    features: &dyn FeatureExtractor,
) -> Result<LossReport> {
    let stage = state.stage;
    let t = batch_tensors(batch)?;
    let mut g = Graph::new();
    let gp = state.generator.store.bind(&mut g, true);
    let cond = g.constant(t.cond);
    let output = forward_var(&mut g, &state.generator.config, &gp, cond);
    let inputs = CompositeInputs {
        input: g.constant(t.input),
        output,
        target: g.constant(t.target),
        mask: g.constant(t.mask),
    };
    let weights = config.weights(stage);
    let adv = match (&state.critic, stage) {
        (Some(critic), Stage::Refine) if weights.adv > 0.0 => {
            let cp = critic.store.bind(&mut g, false);
            Some(generator_adversarial_var(&mut g, &critic.config, &cp, output))
        }
        _ => None,
    };
    let lg = composite_var(&mut g, stage, inputs, adv, weights, features)?;
    let report = lg.report(&g);
    if let Some(term) = report.non_finite_term() {
        return Err(non_finite(term, state));
    }
    let grads = gp.gradients(&g, &g.backward(lg.total));
    if !grads.all_finite() {
        return Err(non_finite("generator gradient", state));
    }
    state.g_opt.update(&mut state.generator.store, &grads)?;
    Ok(report)
}

pub fn pretrain_step(
    state: &mut TrainState,
    batch: &[SamplePair],
    config: &TrainConfig,
    features: &dyn FeatureExtractor,
) -> Result<StepReport> {
    if state.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain_step called outside the pretrain stage".into()));
    }
    let losses = generator_update(state, batch, config, features)?;
    state.record(losses.total);
    state.stage_step += 1;
    state.step += 1;
    Ok(StepReport { losses, critic: None })
}

/// One critic update on the current generator's outputs, then one generator
/// update against the updated critic.
pub fn refine_step(
    state: &mut TrainState,
    batch: &[SamplePair],
    config: &TrainConfig,
    features: &dyn FeatureExtractor,
) -> Result<StepReport> {
    if state.stage != Stage::Refine || state.critic.is_none() {
        return Err(Error::Config("refine_step needs the refine stage with an initialized critic".into()));
    }
    let t = batch_tensors(batch)?;
    let fake = {
        let mut g = Graph::new();
        let gp = state.generator.store.bind(&mut g, false);
        let cond = g.constant(t.cond.clone());
        let out = forward_var(&mut g, &state.generator.config, &gp, cond);
        g.value(out).clone()
    };
    let eps = sample_eps(batch.len(), &mut derived_rng(state.seed, STREAM_GP, state.stage_step));
    let critic_report = {
        let critic = state.critic.as_mut().expect("checked above");
        let mut g = Graph::new();
        let cp = critic.store.bind(&mut g, true);
        let l = critic_loss_var(&mut g, &critic.config, &cp, &fake, &t.target, &eps)?;
        let report = CriticReport {
            d_loss: g.value(l.d_loss).item(),
            wasserstein: g.value(l.wasserstein).item(),
            gp: g.value(l.gp).item(),
        };
        for (name, v) in [("gp", report.gp), ("d_loss", report.d_loss)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: format!("refine {name}"), step: state.step });
            }
        }
        let grads = cp.gradients(&g, &g.backward(l.d_loss));
        if !grads.all_finite() {
            return Err(Error::NonFinite { term: "refine critic gradient".into(), step: state.step });
        }
        state.d_opt.as_mut().expect("critic optimizer").update(&mut critic.store, &grads)?;
        report
    };
    let losses = generator_update(state, batch, config, features)?;
    state.record(losses.total);
    state.stage_step += 1;
    state.step += 1;
    Ok(StepReport { losses, critic: Some(critic_report) })
}

/// Mean metrics of clamped inference outputs over a set of pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the unprocessed input against the target.
    pub identity_psnr: f64,
}

/// Largest centred window whose sides are multiples of `stride`.
pub fn stride_crop(pair: &SamplePair, stride: usize) -> Result<SamplePair> {
    let (h, w) = pair.dims();
    let (ch, cw) = (h / stride * stride, w / stride * stride);
    if ch == 0 || cw == 0 {
        return Err(Error::DimensionTooSmall(format!("{}: {h}x{w} is smaller than stride {stride}", pair.id)));
    }
    pair.crop((h - ch) / 2, (w - cw) / 2, ch, cw)
}

pub fn predict(generator: &GeneratorParams, pair: &SamplePair) -> Result<ImageTensor> {
    let x = crate::generator::assemble_input(&pair.input, &pair.mask)?;
    generator_forward(generator, &x)
}

/// PSNR values are averaged in dB; identical pairs contribute `+inf`.
pub fn validate(generator: &GeneratorParams, pairs: &[SamplePair]) -> Result<Validation> {
    if pairs.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let (mut p, mut s, mut id) = (0.0, 0.0, 0.0);
    for pair in pairs {
        let pair = stride_crop(pair, generator.config.stride())?;
        let out = predict(generator, &pair)?;
        p += psnr(&out, &pair.target)?;
        s += ssim(&out, &pair.target)?;
        id += psnr(&pair.input, &pair.target)?;
    }
    let n = pairs.len() as f64;
    Ok(Validation { psnr: p / n, ssim: s / n, identity_psnr: id / n })
}

/// Training and validation pairs.
pub struct TrainData {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub validations: Vec<(Stage, u64, Validation)>,
    pub state: TrainState,
}

struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    fn write(&mut self, record: Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

fn step_record(arm: &str, state: &TrainState, epoch: u64, r: &StepReport) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), json!("step"));
    m.insert("arm".into(), json!(arm));
    m.insert("stage".into(), json!(r.losses.stage));
    m.insert("step".into(), json!(state.step));
    m.insert("stage_step".into(), json!(state.stage_step));
    m.insert("epoch".into(), json!(epoch));
    m.insert("total".into(), json!(r.losses.total));
    for term in LossTerm::ALL {
        if let Some(v) = r.losses.value(term) {
            m.insert(term.name().into(), json!(v));
        }
    }
    if let Some(c) = r.critic {
        m.insert("d_loss".into(), json!(c.d_loss));
        m.insert("wasserstein".into(), json!(c.wasserstein));
        m.insert("gp".into(), json!(c.gp));
    }
    Value::Object(m)
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(null)
    }
}

/// Options for [`run_training`] beyond the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this training checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in total (both stages); used to simulate
    /// interruptions.
    pub max_steps: Option<u64>,
}

/// Runs (or resumes) both stages, writing `metrics.jsonl` and checkpoints
/// under `out_dir`.
pub fn run_training(config: &TrainConfig, data: &TrainData, out_dir: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut state = match &opts.resume {
        Some(p) => TrainState::load(p, config)?,
        None => TrainState::new(config)?,
    };
    let mut log = MetricsLog::open(&metrics_path, opts.resume.is_some())?;
    let arm = config.arm_name();
    let features = ConvFeatureStack::default_rgb();
    let per_epoch = config.steps_per_epoch(data.train.len());
    let pretrain_path = ck_dir.join("pretrain_final.blg");
    let final_path = ck_dir.join("final.blg");
    let mut checkpoints = Vec::new();
    let mut validations = Vec::new();
    if opts.resume.is_none() {
        log.write(json!({"kind": "start", "arm": arm, "seed": config.seed, "steps_per_epoch": per_epoch}))?;
        info!("training arm {arm}, {per_epoch} steps per epoch");
    }

    for stage in [Stage::Pretrain, Stage::Refine] {
        if stage == Stage::Refine && state.stage == Stage::Pretrain {
            if !pretrain_path.exists() {
                state.save(config, &pretrain_path)?;
                checkpoints.push(pretrain_path.clone());
            }
            if config.refine_epochs == 0 {
                break;
            }
            // The refine stage starts from the stored stage-1 weights.
            let handoff = TrainState::load(&pretrain_path, config)?;
            state.generator = handoff.generator;
            state.begin_refine(config)?;
            log.write(json!({"kind": "handoff", "arm": arm, "step": state.step, "from": "checkpoints/pretrain_final.blg"}))?;
        }
        if state.stage != stage {
            continue;
        }
        let total = per_epoch * config.epochs(stage) as u64;
        while state.stage_step < total {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                return finish(state, config, &final_path, pretrain_path, metrics_path, checkpoints, validations, false);
            }
            let epoch = state.stage_step / per_epoch;
            let batch = sample_batch(&data.train, config.crop_size, stage_seed(config.seed, stage), config.batch_size, state.stage_step)?;
            let report = match stage {
                Stage::Pretrain => pretrain_step(&mut state, &batch, config, &features)?,
                Stage::Refine => refine_step(&mut state, &batch, config, &features)?,
            };
            log.write(step_record(&arm, &state, epoch, &report))?;
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                let p = ck_dir.join(format!("step-{:08}.blg", state.step));
                state.save(config, &p)?;
                checkpoints.push(p);
            }
            if state.stage_step % per_epoch == 0 && !data.val.is_empty() {
                let v = validate(&state.generator, &data.val)?;
                log.write(json!({
                    "kind": "val", "arm": arm, "stage": stage, "epoch": epoch + 1, "step": state.step,
                    "psnr": finite_or_null(v.psnr), "ssim": v.ssim, "identity_psnr": finite_or_null(v.identity_psnr),
                }))?;
                info!("{stage} epoch {}: val psnr {:.3} ssim {:.4}", epoch + 1, v.psnr, v.ssim);
                validations.push((stage, epoch + 1, v));
            }
        }
    }
    finish(state, config, &final_path, pretrain_path, metrics_path, checkpoints, validations, true)
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => seed,
        Stage::Refine => derived_seed(seed, crate::seeding::STREAM_ORDER, u64::MAX),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    state: TrainState,
    config: &TrainConfig,
    final_path: &Path,
    pretrain_checkpoint: PathBuf,
    metrics: PathBuf,
    mut checkpoints: Vec<PathBuf>,
    validations: Vec<(Stage, u64, Validation)>,
    complete: bool,
) -> Result<TrainOutcome> {
    let final_checkpoint = if complete {
        final_path.to_path_buf()
    } else {
        final_path.with_file_name(format!("interrupted-{:08}.blg", state.step))
    };
    state.save(config, &final_checkpoint)?;
    checkpoints.push(final_checkpoint.clone());
    Ok(TrainOutcome { final_checkpoint, pretrain_checkpoint, metrics, checkpoints, validations, state })
}
