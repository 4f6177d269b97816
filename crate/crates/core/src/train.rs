//! Two-stage training. Stage 1 fits the projectors against the frozen
//! backbone; Stage 2 continues with the projectors and LoRA adapters
//! together. The text-only baseline reuses the Stage 2 path with atomic
//! user/item tokens and no projectors.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::nanolm::init_lora;
use crate::prompts::{
    render, truncate_history, RenderedPrompt, Task, TemplateSet, Vocabulary, UNSEEN_TEMPLATE_ID,
};
use crate::recommender::Recommender;
use crate::rng;

const BATCH_STREAM: u64 = 0x7a_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_rank() -> usize {
    4
}

fn default_alpha() -> f64 {
    8.0
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: default_rank(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::max_history")]
    pub max_history: usize,
    /// Stage 2 only. Absent means rank 4, alpha 8.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

mod defaults {
    pub fn steps() -> usize {
        1000
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn learning_rate() -> f64 {
        3e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
    pub fn max_history() -> usize {
        crate::prompts::DEFAULT_MAX_HISTORY
    }
}

impl StageConfig {
    pub fn new(stage: u8) -> Self {
        StageConfig {
            stage,
            steps: defaults::steps(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
            seed: 0,
            max_history: defaults::max_history(),
            lora: None,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("stage {} config: {m}", self.stage)));
        match self.stage {
            1 if self.lora.is_some() => return fail("LoRA settings are not allowed in stage 1"),
            1 | 2 => {}
            _ => return fail("stage must be 1 or 2"),
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        if self.max_history == 0 {
            return fail("max_history must be at least 1");
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 || !(l.alpha.is_finite() && l.alpha > 0.0) {
                return fail("LoRA rank and alpha must be positive");
            }
        }
        Ok(())
    }

    pub fn lora_settings(&self) -> LoraConfig {
        self.lora.clone().unwrap_or_default()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: ArrayD::zeros(shape),
            v: ArrayD::zeros(shape),
        }
    }
}

/// One bias-corrected Adam update. `step` is 1-based.
pub fn adam_step(
    mut param: ArrayViewMutD<f64>,
    grad: ArrayViewD<f64>,
    moments: &mut Moments,
    cfg: &AdamConfig,
    step: usize,
) -> Result<()> {
    if param.shape() != grad.shape() || moments.m.shape() != grad.shape() {
        return Err(Error::Shape {
            what: "adam update",
            expected: format!("{:?}", param.shape()),
            got: format!("{:?}", grad.shape()),
        });
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    ndarray::Zip::from(&mut param)
        .and(&grad)
        .and(&mut moments.m)
        .and(&mut moments.v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        });
    Ok(())
}

/// Which parameter groups a stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Stage1,
    Stage2,
    Baseline,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Stage1 => "1",
            Phase::Stage2 => "2",
            Phase::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Recommender,
    pub phase: Phase,
    /// One entry per trainable tensor, in [`trainable_tensors`] order.
    pub moments: Vec<Moments>,
    /// Completed optimizer steps in this phase.
    pub step: usize,
}

fn trainable_grads(
    phase: Phase,
    g: &crate::recommender::ExampleGradients,
) -> Vec<ArrayViewD<'_, f64>> {
    let mut out = Vec::new();
    if phase != Phase::Baseline {
        if let Some(p) = &g.projectors {
            out.extend(p.tensors().into_iter().map(|(_, t)| t));
        }
    }
    if phase != Phase::Stage1 {
        if let Some(l) = &g.lora {
            out.extend(l.tensors().into_iter().map(|(_, t)| t));
        }
    }
    out
}

/// Trainable tensors for a phase: projectors first, then LoRA.
pub fn trainable_tensors(
    model: &mut Recommender,
    phase: Phase,
) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
    let mut out = Vec::new();
    if phase != Phase::Baseline {
        if let Some(e) = model.embedding.as_mut() {
            out.extend(e.projectors.tensors_mut());
        }
    }
    if phase != Phase::Stage1 {
        if let Some(l) = model.lora.as_mut() {
            out.extend(l.tensors_mut());
        }
    }
    out
}

impl TrainState {
    fn new(mut model: Recommender, phase: Phase) -> Result<Self> {
        let moments: Vec<Moments> = trainable_tensors(&mut model, phase)
            .iter()
            .map(|(_, t)| Moments::zeros(t.shape()))
            .collect();
        if moments.is_empty() {
            return Err(Error::invalid("nothing to train in this phase"));
        }
        Ok(TrainState {
            model,
            phase,
            moments,
            step: 0,
        })
    }

    /// Stage 1 trains only the projectors; the model must have no adapters.
    pub fn stage1(model: Recommender) -> Result<Self> {
        if model.embedding.is_none() || model.lora.is_some() {
            return Err(Error::invalid(
                "stage 1 needs projectors and no LoRA adapters",
            ));
        }
        Self::new(model, Phase::Stage1)
    }

    /// Stage 2 attaches fresh adapters to a Stage 1 model and starts a fresh
    /// optimizer.
    pub fn stage2(mut model: Recommender, cfg: &StageConfig) -> Result<Self> {
        if model.embedding.is_none() {
            return Err(Error::invalid(
                "stage 2 needs a stage 1 model with projectors",
            ));
        }
        let l = cfg.lora_settings();
        model.lora = Some(init_lora(
            &model.backbone.config,
            l.rank,
            l.alpha,
            cfg.seed,
        )?);
        Self::new(model, Phase::Stage2)
    }

    /// Text-only baseline: adapters on the backbone, atomic ids in prompts.
    pub fn baseline(mut model: Recommender, cfg: &StageConfig) -> Result<Self> {
        if model.embedding.is_some() {
            return Err(Error::invalid("the text-only baseline takes no projectors"));
        }
        if model.vocab.n_user_tokens() == 0 {
            return Err(Error::invalid(
                "the text-only baseline needs user tokens in the vocabulary",
            ));
        }
        let l = cfg.lora_settings();
        model.lora = Some(init_lora(
            &model.backbone.config,
            l.rank,
            l.alpha,
            cfg.seed,
        )?);
        Self::new(model, Phase::Baseline)
    }
}

/// Task of a training step: even steps Sequential, odd steps Straightforward.
pub fn step_task(step: usize) -> Task {
    if step.is_multiple_of(2) {
        Task::Sequential
    } else {
        Task::Straightforward
    }
}

/// Renders one training batch. Users are drawn uniformly (Sequential needs
/// at least two train items) and templates uniformly from the seen set. The
/// target is the last train item, the history the train items before it.
pub fn build_batch(
    split: &DatasetSplit,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    cfg: &StageConfig,
    step: usize,
) -> Result<Vec<RenderedPrompt>> {
    let task = step_task(step);
    let eligible: Vec<usize> = (0..split.n_users())
        .filter(|&u| task == Task::Straightforward || split.users[u].train_items.len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "no users eligible for {task} training"
        )));
    }
    let mut r = rng::stream(cfg.seed, BATCH_STREAM + step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let user = eligible[r.random_range(0..eligible.len())];
            let template = templates.get(task, r.random_range(0..UNSEEN_TEMPLATE_ID))?;
            let train = &split.users[user].train_items;
            let (&target, before) = train.split_last().expect("train history is non-empty");
            render(
                template,
                vocab,
                user,
                truncate_history(before, cfg.max_history),
                target,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: &'static str,
    pub task: String,
    pub loss: f64,
}

/// One optimizer step on `batch`. Per-example gradients are computed in
/// parallel and summed in batch order.
pub fn train_step(
    state: &mut TrainState,
    batch: &[RenderedPrompt],
    cfg: &StageConfig,
) -> Result<f64> {
    let phase = state.phase;
    let per_example = batch
        .par_iter()
        .map(|p| state.model.example_gradients(p, false))
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut sums: Vec<ArrayD<f64>> = state
        .moments
        .iter()
        .map(|m| ArrayD::zeros(m.m.shape()))
        .collect();
    for g in &per_example {
        loss += g.loss;
        let grads = trainable_grads(phase, g);
        if grads.len() != sums.len() {
            return Err(Error::invalid(
                "gradient groups do not match the trainable set",
            ));
        }
        for (s, t) in sums.iter_mut().zip(grads) {
            *s += &t;
        }
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}",
            state.step
        )));
    }
    let adam = cfg.adam();
    let t = state.step + 1;
    let params = trainable_tensors(&mut state.model, phase);
    for (((_, p), g), m) in params.into_iter().zip(&sums).zip(state.moments.iter_mut()) {
        adam_step(p, (g / n).view(), m, &adam, t)?;
    }
    state.step = t;
    Ok(loss)
}

/// Runs `cfg.steps` steps. `observe` sees each log record together with the
/// state after that step, and may write checkpoints.
pub fn run_stage(
    state: &mut TrainState,
    split: &DatasetSplit,
    templates: &TemplateSet,
    cfg: &StageConfig,
    mut observe: impl FnMut(&LogRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let expected = match state.phase {
        Phase::Stage1 => 1,
        Phase::Stage2 | Phase::Baseline => 2,
    };
    if cfg.stage != expected {
        return Err(Error::invalid(format!(
            "phase {} runs with a stage {expected} config, got stage {}",
            state.phase.label(),
            cfg.stage
        )));
    }
    for _ in 0..cfg.steps {
        let step = state.step;
        let batch = build_batch(split, templates, &state.model.vocab, cfg, step)?;
        let loss = train_step(state, &batch, cfg)?;
        let record = LogRecord {
            step,
            stage: state.phase.label(),
            task: step_task(step).to_string(),
            loss,
        };
        log::debug!("stage {} step {step} loss {loss:.5}", record.stage);
        observe(&record, state)?;
    }
    Ok(())
}

pub fn train_stage1(
    model: Recommender,
    split: &DatasetSplit,
    templates: &TemplateSet,
    cfg: &StageConfig,
    observe: impl FnMut(&LogRecord, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::stage1(model)?;
    run_stage(&mut state, split, templates, cfg, observe)?;
    Ok(state)
}

pub fn train_stage2(
    stage1_model: Recommender,
    split: &DatasetSplit,
    templates: &TemplateSet,
    cfg: &StageConfig,
    observe: impl FnMut(&LogRecord, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::stage2(stage1_model, cfg)?;
    run_stage(&mut state, split, templates, cfg, observe)?;
    Ok(state)
}

pub fn train_baseline(
    model: Recommender,
    split: &DatasetSplit,
    templates: &TemplateSet,
    cfg: &StageConfig,
    observe: impl FnMut(&LogRecord, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::baseline(model, cfg)?;
    run_stage(&mut state, split, templates, cfg, observe)?;
    Ok(state)
}
