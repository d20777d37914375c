//! Optimizer, the epoch loop with early stopping, and the training regimes:
//! shuffled baselines (full data, Old half, Recent half) and incremental
//! fine-tuning over chronologically ordered periods.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{halve_training, period_groups, Corpus, Document, Period, PeriodGroup, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::{validation_macro_f1, EvalOptions};
use crate::model::{attach_adapter, attach_lora, bce_loss, init_model, targets_matrix, ModelConfig, ModelState};
use crate::rng;
use crate::strategies::Strategy;
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    /// Learning rate used for fine-tuning a pretrained encoder. Far too small
    /// for the from-scratch model here, kept for configuration parity.
    pub fn pretrained_preset() -> Self {
        AdamWConfig {
            lr: 2e-5,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, model: &ModelState) -> Self {
        let m = model.params().zeros_like();
        OptimizerState {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    /// True when the moments are laid out for `model`'s tensors.
    fn fits(&self, model: &ModelState) -> bool {
        self.m.len() == model.params().len()
            && model
                .params()
                .iter()
                .all(|(name, p)| self.m.get(name).is_some_and(|m| m.tensor.shape() == p.tensor.shape()))
    }
}

/// One AdamW update with decoupled weight decay. Frozen tensors are left
/// untouched and bias tensors are not decayed.
pub fn adamw_step(opt: &mut OptimizerState, model: &mut ModelState, grads: &ParamSet) -> Result<()> {
    if !opt.fits(model) {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match the model's tensors".into(),
        ));
    }
    for (name, p) in model.params().iter() {
        if p.trainable {
            let g = grads.tensor(name)?;
            if g.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{name}` has shape {:?}, tensor {:?}",
                    g.shape(),
                    p.tensor.shape()
                )));
            }
        }
    }
    opt.step += 1;
    let c = opt.config.clone();
    let t = opt.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (m_all, v_all) = (&mut opt.m, &mut opt.v);
    for (name, p) in model.params_mut().iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.tensor(name)?;
        let m = m_all.tensor_mut(name)?.data_mut();
        let v = v_all.tensor_mut(name)?.data_mut();
        let decay = if p.is_bias { 0.0 } else { c.weight_decay };
        for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *theta -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + decay * *theta);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Epochs before this one (1-based) are never selected as best.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub optimizer: AdamWConfig,
    pub eval: EvalOptions,
    /// Keep optimizer moments across incremental periods.
    pub carry_optimizer: bool,
    /// Periods with fewer documents are merged into the next one.
    pub min_docs_per_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 20,
            patience: 3,
            warmup_epochs: 0,
            batch_size: 32,
            shuffle_seed: 0,
            optimizer: AdamWConfig::default(),
            eval: EvalOptions::default(),
            carry_optimizer: false,
            min_docs_per_period: 1,
        }
    }
}

impl TrainConfig {
    /// Defaults for incremental fine-tuning: three warm-up epochs.
    pub fn incremental() -> Self {
        TrainConfig {
            warmup_epochs: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 || self.warmup_epochs >= self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "need warmup_epochs ({}) < max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a metric to maximize.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    warmup: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, warmup: usize) -> Self {
        EarlyStopper {
            patience,
            warmup,
            best: None,
            stale: 0,
        }
    }

    /// Records the metric of 1-based `epoch`. Warm-up epochs are ignored;
    /// afterwards only a strict improvement resets the patience counter.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if epoch < self.warmup {
            return StopDecision::Continue;
        }
        match self.best {
            Some((_, best)) if metric <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean strategy penalty over the epoch's batches.
    pub penalty: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: ModelState,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub log: Vec<EpochLog>,
}

/// Trains `model` on `train` with per-epoch validation, returning the best
/// snapshot at or after the warm-up epoch.
pub fn fit_period<T: Borrow<Document>, V: Borrow<Document>>(
    model: ModelState,
    train: &[T],
    val: &[V],
    config: &TrainConfig,
    strategy: Option<&mut Strategy>,
) -> Result<TrainedModel> {
    let mut opt = None;
    fit_with_optimizer(model, train, val, config, strategy, &mut opt)
}

fn fit_with_optimizer<T: Borrow<Document>, V: Borrow<Document>>(
    mut model: ModelState,
    train: &[T],
    val: &[V],
    config: &TrainConfig,
    mut strategy: Option<&mut Strategy>,
    optimizer: &mut Option<OptimizerState>,
) -> Result<TrainedModel> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut opt = match optimizer.take() {
        Some(o) if config.carry_optimizer && o.fits(&model) => o,
        _ => OptimizerState::new(config.optimizer.clone(), &model),
    };
    let n_labels = model.config().n_labels;
    let mut rng = rng::seeded(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopper::new(config.patience, config.warmup_epochs);
    let mut best: Option<ModelState> = None;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut penalty_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<&Document> = chunk.iter().map(|&i| train[i].borrow()).collect();
            let replay = strategy
                .as_deref_mut()
                .and_then(|s| s.replay_batch(config.batch_size));
            if let Some(extra) = &replay {
                batch.extend(extra.iter());
            }
            let (logits, cache) = model.forward(&batch)?;
            let (loss, dz) = bce_loss(&logits, &targets_matrix(&batch, n_labels))?;
            let mut grads = model.backward(&cache, &dz)?;
            let mut penalty = 0.0;
            if let Some(s) = strategy.as_deref_mut() {
                penalty = s.add_penalty(&model, &mut grads, config.batch_size)?;
                s.transform_gradients(&model, &mut grads, config.batch_size)?;
            }
            if !(loss + penalty).is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective became {} in epoch {epoch}",
                    loss + penalty
                )));
            }
            adamw_step(&mut opt, &mut model, &grads)?;
            loss_sum += loss;
            penalty_sum += penalty;
            batches += 1;
        }
        let metric = validation_macro_f1(&model, val, config.eval)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            penalty: penalty_sum / batches as f64,
            val_macro_f1: metric,
        });
        match stopper.observe(epoch, metric) {
            StopDecision::Improved => best = Some(model.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    *optimizer = Some(opt);
    let (best_epoch, best_val_metric) = stopper.best().expect("warmup < max_epochs");
    Ok(TrainedModel {
        model: best.expect("best snapshot recorded with best epoch"),
        best_epoch,
        best_val_metric,
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineVariant {
    Full,
    Old,
    Recent,
}

/// Trains a fresh model on the (whole, older half, or recent half) training
/// bucket of `plan`, validating on its validation bucket.
pub fn train_baseline(
    corpus: &Corpus,
    plan: &SplitPlan,
    variant: BaselineVariant,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let train = plan.train_docs(corpus);
    let val = plan.val_docs(corpus);
    baseline_on(&train, &val, variant, model_config, config)
}

pub(crate) fn baseline_on(
    train: &[&Document],
    val: &[&Document],
    variant: BaselineVariant,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let docs = match variant {
        BaselineVariant::Full => train,
        BaselineVariant::Old => halve_training(train)?.0,
        BaselineVariant::Recent => halve_training(train)?.1,
    };
    fit_period(init_model(model_config)?, docs, val, config, None)
}

/// Parameter expansion applied once the first period has been learned.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Expansion {
    #[default]
    None,
    Lora {
        rank: usize,
        alpha: f64,
        targets: Vec<String>,
    },
    Adapter {
        reduction: usize,
    },
}

impl Expansion {
    fn apply(&self, model: &ModelState) -> Result<ModelState> {
        match self {
            Expansion::None => Ok(model.clone()),
            Expansion::Lora {
                rank,
                alpha,
                targets,
            } => {
                let targets: Vec<&str> = targets.iter().map(String::as_str).collect();
                attach_lora(model, &targets, *rank, *alpha)
            }
            Expansion::Adapter { reduction } => attach_adapter(model, *reduction),
        }
    }
}

/// The best model of one incremental period.
#[derive(Clone, Debug)]
pub struct PeriodResult {
    pub period: Period,
    pub n_docs: usize,
    pub trained: TrainedModel,
}

/// Incremental fine-tuning state: each new period starts from the previous
/// period's best model, and the strategy persists across periods.
#[derive(Clone, Debug)]
pub struct IftChain {
    model_config: ModelConfig,
    config: TrainConfig,
    strategy: Option<Strategy>,
    expansion: Expansion,
    history: Vec<PeriodGroup>,
    optimizer: Option<OptimizerState>,
    current: Option<ModelState>,
    results: Vec<PeriodResult>,
}

impl IftChain {
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        strategy: Option<Strategy>,
        expansion: Expansion,
    ) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        Ok(IftChain {
            model_config,
            config,
            strategy,
            expansion,
            history: Vec::new(),
            optimizer: None,
            current: None,
            results: Vec::new(),
        })
    }

    /// Shuffle seed of the `ordinal`-th period. The first period uses the
    /// configured seed unchanged, so a one-period chain matches a baseline.
    fn period_seed(&self, ordinal: usize) -> u64 {
        if ordinal == 0 {
            self.config.shuffle_seed
        } else {
            rng::derive_seed(self.config.shuffle_seed, ordinal as u64)
        }
    }

    /// Runs one fit on `group`, which must be later than every period seen.
    pub fn fit_group<V: Borrow<Document>>(&mut self, group: PeriodGroup, val: &[V]) -> Result<&PeriodResult> {
        if let Some(last) = self.history.last() {
            if group.period <= last.period {
                return Err(Error::InvalidArgument(format!(
                    "period {} does not follow period {}",
                    group.period, last.period
                )));
            }
        }
        let ordinal = self.history.len();
        let start = match (&self.current, ordinal) {
            (None, _) => init_model(&self.model_config)?,
            (Some(m), 1) => self.expansion.apply(m)?,
            (Some(m), _) => m.clone(),
        };
        let mut config = self.config.clone();
        config.shuffle_seed = self.period_seed(ordinal);
        self.history.push(group);
        let group = self.history.last().expect("just pushed");
        if let Some(s) = self.strategy.as_mut() {
            s.begin_period(&self.history)?;
        }
        let trained = fit_with_optimizer(
            start,
            &group.docs,
            val,
            &config,
            self.strategy.as_mut(),
            &mut self.optimizer,
        )?;
        if let Some(s) = self.strategy.as_mut() {
            s.end_period(&trained.model, group)?;
        }
        self.current = Some(trained.model.clone());
        self.results.push(PeriodResult {
            period: group.period,
            n_docs: group.docs.len(),
            trained,
        });
        Ok(self.results.last().expect("just pushed"))
    }

    pub fn model(&self) -> Option<&ModelState> {
        self.current.as_ref()
    }

    pub fn results(&self) -> &[PeriodResult] {
        &self.results
    }

    pub fn strategy(&self) -> Option<&Strategy> {
        self.strategy.as_ref()
    }

    pub fn periods(&self) -> Vec<Period> {
        self.history.iter().map(|g| g.period).collect()
    }
}

#[derive(Clone, Debug)]
pub struct IftOutcome {
    /// Best model of the final period.
    pub trained: TrainedModel,
    pub periods: Vec<PeriodResult>,
}

/// Incremental fine-tuning over the training periods of `plan` in ascending
/// order, one fit per period, each validated on the plan's validation bucket.
pub fn train_ift(
    corpus: &Corpus,
    plan: &SplitPlan,
    model_config: &ModelConfig,
    config: &TrainConfig,
    strategy: Option<Strategy>,
    expansion: &Expansion,
) -> Result<IftOutcome> {
    let train = plan.train_docs(corpus);
    let val = plan.val_docs(corpus);
    ift_on(&train, &val, model_config, config, strategy, expansion)
}

pub(crate) fn ift_on(
    train: &[&Document],
    val: &[&Document],
    model_config: &ModelConfig,
    config: &TrainConfig,
    strategy: Option<Strategy>,
    expansion: &Expansion,
) -> Result<IftOutcome> {
    let groups = period_groups(train, config.min_docs_per_period);
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no training periods".into()));
    }
    let mut chain = IftChain::new(model_config.clone(), config.clone(), strategy, expansion.clone())?;
    for group in groups {
        chain.fit_group(group, val)?;
    }
    let periods = chain.results;
    Ok(IftOutcome {
        trained: periods.last().expect("at least one period").trained.clone(),
        periods,
    })
}
