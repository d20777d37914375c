//! Continual-learning and temporal-invariant training strategies.
//!
//! Every strategy plugs into the same per-step hooks of the training loop:
//! it may add a penalty (with its gradient), supply replay documents,
//! rewrite the gradient, and observe period boundaries. A strategy whose
//! strength is zero or whose memory is empty leaves training untouched.

use std::borrow::Borrow;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::{sliding_windows, Corpus, Document, DomainWindow, Period, PeriodGroup};
use crate::error::{Error, Result};
use crate::model::{bce_loss, extract_features, sigmoid, targets_matrix, ModelState};
use crate::rng::{self, Rng};
use crate::tensor::{ParamSet, Tensor};

// ---------------------------------------------------------------------------
// EWC

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    /// Decay applied to the accumulated Fisher diagonal at each period.
    pub gamma: f64,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig {
            lambda: 0.5,
            gamma: 1.0,
        }
    }
}

/// Online EWC: anchor parameters and an accumulated diagonal Fisher.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    pub lambda: f64,
    pub gamma: f64,
    pub anchor: Option<ParamSet>,
    pub fisher: Option<ParamSet>,
}

impl EwcState {
    pub fn new(config: &EwcConfig) -> Self {
        EwcState {
            lambda: config.lambda,
            gamma: config.gamma,
            anchor: None,
            fisher: None,
        }
    }
}

/// `(λ/2)·Σ F·(θ − θ*)²` over the model's trainable tensors, and its
/// gradient `λ·F·(θ − θ*)`. Zero before the first anchor.
pub fn ewc_penalty(model: &ModelState, state: &EwcState) -> Result<(f64, ParamSet)> {
    let mut grads = model.params().zeros_like();
    let (Some(anchor), Some(fisher)) = (&state.anchor, &state.fisher) else {
        return Ok((0.0, grads));
    };
    let mut penalty = 0.0;
    for (name, p) in model.params().iter().filter(|(_, p)| p.trainable) {
        let (Some(a), Some(f)) = (anchor.get(name), fisher.get(name)) else {
            continue;
        };
        if a.tensor.shape() != p.tensor.shape() || f.tensor.shape() != p.tensor.shape() {
            return Err(Error::ShapeMismatch(format!("EWC state for `{name}`")));
        }
        let g = grads.tensor_mut(name)?.data_mut();
        for (((gi, &theta), &star), &fi) in g
            .iter_mut()
            .zip(p.tensor.data())
            .zip(a.tensor.data())
            .zip(f.tensor.data())
        {
            let diff = theta - star;
            penalty += fi * diff * diff;
            *gi = state.lambda * fi * diff;
        }
    }
    Ok((0.5 * state.lambda * penalty, grads))
}

/// Mean over documents of the squared per-document BCE gradient.
pub fn empirical_fisher<T: Borrow<Document>>(model: &ModelState, docs: &[T]) -> Result<ParamSet> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("Fisher estimate needs documents".into()));
    }
    let n_labels = model.config().n_labels;
    let mut fisher = model.params().zeros_like();
    for doc in docs {
        let one = [doc.borrow()];
        let (logits, cache) = model.forward(&one)?;
        let (_, dz) = bce_loss(&logits, &targets_matrix(&one, n_labels))?;
        let grads = model.backward(&cache, &dz)?;
        for (name, g) in grads.iter() {
            let f = fisher.tensor_mut(name)?.data_mut();
            for (fi, gi) in f.iter_mut().zip(g.tensor.data()) {
                *fi += gi * gi;
            }
        }
    }
    fisher.scale(1.0 / docs.len() as f64);
    Ok(fisher)
}

/// `F ← γ·F + F_new`, then re-anchor at the current parameters.
pub fn ewc_end_period<T: Borrow<Document>>(
    model: &ModelState,
    docs: &[T],
    state: &mut EwcState,
) -> Result<()> {
    let fresh = empirical_fisher(model, docs)?;
    let accumulated = match state.fisher.take() {
        Some(mut old) if same_layout(&old, &fresh) => {
            old.scale(state.gamma);
            old.add_assign(&fresh)?;
            old
        }
        _ => fresh,
    };
    state.fisher = Some(accumulated);
    state.anchor = Some(model.params().clone());
    Ok(())
}

fn same_layout(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((na, pa), (nb, pb))| na == nb && pa.tensor.shape() == pb.tensor.shape())
}

// ---------------------------------------------------------------------------
// Replay memory

#[derive(Clone, Debug, PartialEq)]
pub struct StoredItem {
    pub doc: Document,
    pub period: Period,
}

/// Document memory: growing (no capacity) or reservoir-sampled (capacity).
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<StoredItem>,
    capacity: Option<usize>,
    seen_count: u64,
    rng: Rng,
}

impl ReplayBuffer {
    pub fn growing(seed: u64) -> Self {
        ReplayBuffer {
            items: Vec::new(),
            capacity: None,
            seen_count: 0,
            rng: rng::seeded(seed),
        }
    }

    pub fn with_capacity(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity: Some(capacity),
            ..Self::growing(seed)
        }
    }

    pub fn items(&self) -> &[StoredItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    /// Appends without eviction, honoring the capacity if one is set.
    pub fn push(&mut self, item: StoredItem) {
        self.seen_count += 1;
        if self.capacity.is_none_or(|c| self.items.len() < c) {
            self.items.push(item);
        }
    }

    /// Reservoir sampling: after `n` insertions every inserted item is held
    /// with probability `capacity / n`.
    pub fn reservoir_insert(&mut self, item: StoredItem) {
        use rand::Rng as _;
        self.seen_count += 1;
        let capacity = self.capacity.unwrap_or(usize::MAX);
        if self.items.len() < capacity {
            self.items.push(item);
            return;
        }
        let slot = self.rng.gen_range(0..self.seen_count);
        if slot < capacity as u64 {
            self.items[slot as usize] = item;
        }
    }

    /// Uniform sample without replacement of up to `n` stored documents.
    pub fn sample(&mut self, n: usize) -> Vec<Document> {
        let n = n.min(self.items.len());
        if n == 0 {
            return Vec::new();
        }
        index::sample(&mut self.rng, self.items.len(), n)
            .into_iter()
            .map(|i| self.items[i].doc.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErConfig {
    /// Replay cadence in optimizer steps.
    pub replay_every: u64,
    /// Share of each finished period copied into memory.
    pub fraction: f64,
    pub capacity: Option<usize>,
    /// Replay batch size; the training batch size when unset.
    pub batch_size: Option<usize>,
}

impl Default for ErConfig {
    fn default() -> Self {
        ErConfig {
            replay_every: 10,
            fraction: 1.0,
            capacity: None,
            batch_size: None,
        }
    }
}

/// Replay batch for 1-based step `step` if it is a multiple of `every`.
pub fn er_step(step: u64, buffer: &mut ReplayBuffer, every: u64, batch_size: usize) -> Option<Vec<Document>> {
    if every == 0 || step == 0 || step % every != 0 || buffer.is_empty() {
        return None;
    }
    Some(buffer.sample(batch_size))
}

/// Stores `round(fraction · n)` of the period's documents, chosen with the
/// buffer's seeded generator and kept in their original order.
pub fn er_end_period<T: Borrow<Document>>(
    buffer: &mut ReplayBuffer,
    docs: &[T],
    fraction: f64,
    period: Period,
) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "replay fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let keep = ((fraction * docs.len() as f64).round() as usize).min(docs.len());
    let mut chosen: Vec<usize> = if keep == docs.len() {
        (0..keep).collect()
    } else {
        index::sample(&mut buffer.rng, docs.len(), keep).into_vec()
    };
    chosen.sort_unstable();
    for i in chosen {
        buffer.push(StoredItem {
            doc: docs[i].borrow().clone(),
            period,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// A-GEM

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgemConfig {
    pub capacity: usize,
    /// Reference batch size; the training batch size when unset.
    pub batch_size: Option<usize>,
}

impl Default for AgemConfig {
    fn default() -> Self {
        AgemConfig {
            capacity: 1000,
            batch_size: None,
        }
    }
}

/// Projects `g` so that it does not oppose the memory gradient `g_ref`.
pub fn agem_project(g: &[f64], g_ref: &[f64]) -> Result<Vec<f64>> {
    if g.len() != g_ref.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient of length {} vs reference of length {}",
            g.len(),
            g_ref.len()
        )));
    }
    let dot: f64 = g.iter().zip(g_ref).map(|(a, b)| a * b).sum();
    let ref_sq: f64 = g_ref.iter().map(|b| b * b).sum();
    if dot >= 0.0 || ref_sq == 0.0 {
        return Ok(g.to_vec());
    }
    let coef = dot / ref_sq;
    Ok(g.iter().zip(g_ref).map(|(a, b)| a - coef * b).collect())
}

// ---------------------------------------------------------------------------
// Temporal-invariant objectives

/// DeepCORAL alignment over all unordered domain pairs:
/// `λ · mean_pairs(‖μ_s − μ_t‖² + ‖C_s − C_t‖²_F / (4h²))`.
/// Returns the penalty and its gradient with respect to each feature matrix.
pub fn coral_penalty(features: &[Tensor], lambda: f64) -> Result<(f64, Vec<Tensor>)> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument("CORAL needs at least 2 domains".into()));
    }
    let h = features[0].cols();
    for f in features {
        if f.shape().len() != 2 || f.cols() != h || f.rows() == 0 {
            return Err(Error::ShapeMismatch(
                "CORAL domains need non-empty matrices of equal width".into(),
            ));
        }
    }
    let stats: Vec<(Vec<f64>, Vec<f64>)> = features.iter().map(mean_and_covariance).collect();
    let pairs = features.len() * (features.len() - 1) / 2;
    let cov_weight = 1.0 / (4.0 * (h * h) as f64);
    let mut total = 0.0;
    // accumulated ∂/∂μ and ∂/∂C per domain
    let mut d_mean = vec![vec![0.0; h]; features.len()];
    let mut d_cov = vec![vec![0.0; h * h]; features.len()];
    for s in 0..features.len() {
        for t in s + 1..features.len() {
            for i in 0..h {
                let diff = stats[s].0[i] - stats[t].0[i];
                total += diff * diff;
                d_mean[s][i] += 2.0 * diff;
                d_mean[t][i] -= 2.0 * diff;
            }
            for i in 0..h * h {
                let diff = stats[s].1[i] - stats[t].1[i];
                total += cov_weight * diff * diff;
                d_cov[s][i] += 2.0 * cov_weight * diff;
                d_cov[t][i] -= 2.0 * cov_weight * diff;
            }
        }
    }
    let scale = lambda / pairs as f64;
    let grads = features
        .iter()
        .enumerate()
        .map(|(e, x)| {
            let n = x.rows();
            let mut g = Tensor::zeros(x.shape());
            let mu = &stats[e].0;
            for r in 0..n {
                let row = x.row(r);
                let out = g.row_mut(r);
                for i in 0..h {
                    out[i] += scale * d_mean[e][i] / n as f64;
                }
                if n > 1 {
                    // ∂C/∂x_r contracted with symmetric G: (2/(n−1))·G·(x_r − μ)
                    for i in 0..h {
                        let mut acc = 0.0;
                        for j in 0..h {
                            acc += d_cov[e][i * h + j] * (row[j] - mu[j]);
                        }
                        out[i] += scale * 2.0 * acc / (n - 1) as f64;
                    }
                }
            }
            g
        })
        .collect();
    Ok((scale * total, grads))
}

/// Column means and the (n−1)-normalized covariance (zero when n = 1).
fn mean_and_covariance(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, h) = (x.rows(), x.cols());
    let mut mu = vec![0.0; h];
    for r in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; h * h];
    if n > 1 {
        for r in 0..n {
            let row = x.row(r);
            for i in 0..h {
                for j in 0..h {
                    cov[i * h + j] += (row[i] - mu[i]) * (row[j] - mu[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    }
    (mu, cov)
}

/// IRMv1 penalty: for each domain, the derivative of its mean BCE with
/// respect to a scalar multiplier `w` on the logits at `w = 1`, squared and
/// averaged over domains. Gradients are with respect to the logits.
pub fn irm_penalty(logits: &[Tensor], targets: &[Tensor], lambda: f64) -> Result<(f64, Vec<Tensor>)> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("IRM needs at least one domain".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit matrices for {} target matrices",
            logits.len(),
            targets.len()
        )));
    }
    let domains = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(targets) {
        if z.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} vs targets {:?}",
                z.shape(),
                y.shape()
            )));
        }
        let count = z.len().max(1) as f64;
        let d: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&zi, &yi)| zi * (sigmoid(zi) - yi))
            .sum::<f64>()
            / count;
        total += d * d;
        let mut g = Tensor::zeros(z.shape());
        for ((gi, &zi), &yi) in g.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
            let s = sigmoid(zi);
            let dd = ((s - yi) + zi * s * (1.0 - s)) / count;
            *gi = lambda * 2.0 * d * dd / domains;
        }
        grads.push(g);
    }
    Ok((lambda * total / domains, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDroState {
    pub q: Vec<f64>,
    pub eta: f64,
}

impl GroupDroState {
    pub fn uniform(domains: usize, eta: f64) -> Self {
        GroupDroState {
            q: vec![1.0 / domains as f64; domains],
            eta,
        }
    }
}

/// Exponentiated-gradient step `q_e ← q_e·exp(η·L_e)` (renormalized), then
/// the reweighted loss `Σ q_e·L_e`.
pub fn groupdro_update(losses: &[f64], state: &mut GroupDroState) -> Result<f64> {
    if losses.len() != state.q.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} losses for {} domain weights",
            losses.len(),
            state.q.len()
        )));
    }
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("domain loss {l}")));
    }
    // Shifting by the max loss keeps exp() in range; it cancels on renormalizing.
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (q, &l) in state.q.iter_mut().zip(losses) {
        *q *= (state.eta * (l - max)).exp();
        z += *q;
    }
    state.q.iter_mut().for_each(|q| *q /= z);
    Ok(state.q.iter().zip(losses).map(|(q, l)| q * l).sum())
}

/// One uniformly sampled batch from each selected period of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub window: DomainWindow,
    pub batches: Vec<(Period, Vec<Document>)>,
}

/// The `domains_per_window` most recent periods of the window.
pub fn select_domains(window: &DomainWindow, domains_per_window: usize) -> Vec<Period> {
    let n = window.periods.len();
    window.periods[n.saturating_sub(domains_per_window)..].to_vec()
}

fn sample_batch(rng: &mut Rng, docs: &[&Document], batch_size: usize) -> Vec<Document> {
    let n = batch_size.min(docs.len());
    let mut picked = index::sample(rng, docs.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| docs[i].clone()).collect()
}

pub fn make_domain_batches(
    corpus: &Corpus,
    window: &DomainWindow,
    domains_per_window: usize,
    batch_size: usize,
    seed: u64,
) -> Result<DomainBatch> {
    if domains_per_window == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "domains_per_window and batch_size must be >= 1".into(),
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut batches = Vec::new();
    for period in select_domains(window, domains_per_window) {
        let docs = corpus.docs_at(period);
        if docs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "window period {period} has no documents"
            )));
        }
        batches.push((period, sample_batch(&mut rng, &docs, batch_size)));
    }
    Ok(DomainBatch {
        window: window.clone(),
        batches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_len: usize,
    pub domains_per_window: usize,
    /// Per-domain batch size; the training batch size when unset.
    pub batch_size: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_len: 5,
            domains_per_window: 3,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InvariantObjective {
    Coral { lambda: f64 },
    Irm { lambda: f64 },
    /// `weight` scales the reweighted domain loss added to the task loss.
    GroupDro { eta: f64, weight: f64 },
}

impl InvariantObjective {
    fn is_active(&self) -> bool {
        match *self {
            InvariantObjective::Coral { lambda } | InvariantObjective::Irm { lambda } => lambda != 0.0,
            InvariantObjective::GroupDro { weight, .. } => weight != 0.0,
        }
    }

    fn min_domains(&self) -> usize {
        match self {
            InvariantObjective::Coral { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InvariantState {
    pub objective: InvariantObjective,
    pub window: WindowConfig,
    domains: Vec<PeriodGroup>,
    current_window: Option<DomainWindow>,
    dro: Option<GroupDroState>,
    rng: Rng,
}

impl InvariantState {
    pub fn new(objective: InvariantObjective, window: WindowConfig, seed: u64) -> Self {
        InvariantState {
            objective,
            window,
            domains: Vec::new(),
            current_window: None,
            dro: None,
            rng: rng::seeded(seed),
        }
    }

    pub fn current_window(&self) -> Option<&DomainWindow> {
        self.current_window.as_ref()
    }

    pub fn domain_periods(&self) -> Vec<Period> {
        self.domains.iter().map(|g| g.period).collect()
    }

    pub fn dro_weights(&self) -> Option<&[f64]> {
        self.dro.as_ref().map(|d| d.q.as_slice())
    }

    /// Anchors the window at the newest of `history`.
    fn begin_period(&mut self, history: &[PeriodGroup]) -> Result<()> {
        self.domains.clear();
        self.current_window = None;
        if history.is_empty() {
            return Ok(());
        }
        let len = self.window.window_len.max(1).min(history.len());
        let periods: Vec<Period> = history.iter().map(|g| g.period).collect();
        let window = sliding_windows(&periods, len)?
            .pop()
            .expect("at least one window");
        let chosen = select_domains(&window, self.window.domains_per_window);
        self.domains = history
            .iter()
            .filter(|g| chosen.contains(&g.period))
            .cloned()
            .collect();
        if let InvariantObjective::GroupDro { eta, .. } = self.objective {
            self.dro = Some(GroupDroState::uniform(self.domains.len(), eta));
        }
        self.current_window = Some(window);
        Ok(())
    }

    fn contribute(&mut self, model: &ModelState, grads: &mut ParamSet, batch_size: usize) -> Result<f64> {
        if !self.objective.is_active() || self.domains.len() < self.objective.min_domains() {
            return Ok(0.0);
        }
        let size = self.window.batch_size.unwrap_or(batch_size).max(1);
        let n_labels = model.config().n_labels;
        let mut forwards = Vec::with_capacity(self.domains.len());
        for group in &self.domains {
            let refs: Vec<&Document> = group.docs.iter().collect();
            let batch = sample_batch(&mut self.rng, &refs, size);
            let (logits, cache) = model.forward(&batch)?;
            forwards.push((batch, logits, cache));
        }
        match self.objective {
            InvariantObjective::Coral { lambda } => {
                let feats: Vec<Tensor> = forwards.iter().map(|f| extract_features(&f.2)).collect();
                let (penalty, dfeats) = coral_penalty(&feats, lambda)?;
                for ((_, logits, cache), df) in forwards.iter().zip(&dfeats) {
                    let zero = Tensor::zeros(logits.shape());
                    grads.add_assign(&model.backward_with_features(cache, &zero, Some(df))?)?;
                }
                Ok(penalty)
            }
            InvariantObjective::Irm { lambda } => {
                let logits: Vec<Tensor> = forwards.iter().map(|f| f.1.clone()).collect();
                let targets: Vec<Tensor> = forwards
                    .iter()
                    .map(|f| targets_matrix(&f.0, n_labels))
                    .collect();
                let (penalty, dlogits) = irm_penalty(&logits, &targets, lambda)?;
                for ((_, _, cache), dz) in forwards.iter().zip(&dlogits) {
                    grads.add_assign(&model.backward(cache, dz)?)?;
                }
                Ok(penalty)
            }
            InvariantObjective::GroupDro { weight, .. } => {
                let mut losses = Vec::with_capacity(forwards.len());
                let mut dzs = Vec::with_capacity(forwards.len());
                for (batch, logits, _) in &forwards {
                    let (l, dz) = bce_loss(logits, &targets_matrix(batch, n_labels))?;
                    losses.push(l);
                    dzs.push(dz);
                }
                let state = self.dro.as_mut().expect("GroupDRO state set at period start");
                let weighted = groupdro_update(&losses, state)?;
                for (((_, _, cache), mut dz), &q) in forwards.iter().zip(dzs).zip(&state.q) {
                    dz.scale(weight * q);
                    grads.add_assign(&model.backward(cache, &dz)?)?;
                }
                Ok(weight * weighted)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Uniform strategy interface

#[derive(Clone, Debug)]
pub enum Strategy {
    Ewc(EwcState),
    Replay {
        buffer: ReplayBuffer,
        config: ErConfig,
        step: u64,
    },
    Agem {
        buffer: ReplayBuffer,
        batch_size: Option<usize>,
    },
    Invariant(InvariantState),
}

impl Strategy {
    pub fn ewc(config: &EwcConfig) -> Self {
        Strategy::Ewc(EwcState::new(config))
    }

    pub fn replay(config: &ErConfig, seed: u64) -> Self {
        let buffer = match config.capacity {
            Some(c) => ReplayBuffer::with_capacity(c, seed),
            None => ReplayBuffer::growing(seed),
        };
        Strategy::Replay {
            buffer,
            config: config.clone(),
            step: 0,
        }
    }

    pub fn agem(config: &AgemConfig, seed: u64) -> Self {
        Strategy::Agem {
            buffer: ReplayBuffer::with_capacity(config.capacity, seed),
            batch_size: config.batch_size,
        }
    }

    pub fn invariant(objective: InvariantObjective, window: &WindowConfig, seed: u64) -> Self {
        Strategy::Invariant(InvariantState::new(objective, window.clone(), seed))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ewc(_) => "ewc",
            Strategy::Replay { .. } => "er",
            Strategy::Agem { .. } => "agem",
            Strategy::Invariant(s) => match s.objective {
                InvariantObjective::Coral { .. } => "coral",
                InvariantObjective::Irm { .. } => "irm",
                InvariantObjective::GroupDro { .. } => "groupdro",
            },
        }
    }

    /// Called before training on the last group of `history`.
    pub fn begin_period(&mut self, history: &[PeriodGroup]) -> Result<()> {
        match self {
            Strategy::Invariant(s) => s.begin_period(history),
            _ => Ok(()),
        }
    }

    /// Documents to train on alongside the current batch, if any.
    pub fn replay_batch(&mut self, batch_size: usize) -> Option<Vec<Document>> {
        match self {
            Strategy::Replay {
                buffer,
                config,
                step,
            } => {
                *step += 1;
                er_step(
                    *step,
                    buffer,
                    config.replay_every,
                    config.batch_size.unwrap_or(batch_size),
                )
            }
            _ => None,
        }
    }

    /// Adds penalty gradients to `grads`; returns the penalty value.
    pub fn add_penalty(&mut self, model: &ModelState, grads: &mut ParamSet, batch_size: usize) -> Result<f64> {
        match self {
            Strategy::Ewc(state) => {
                if state.lambda == 0.0 || state.anchor.is_none() {
                    return Ok(0.0);
                }
                let (penalty, g) = ewc_penalty(model, state)?;
                grads.add_assign(&g)?;
                Ok(penalty)
            }
            Strategy::Invariant(state) => state.contribute(model, grads, batch_size),
            _ => Ok(0.0),
        }
    }

    /// Rewrites the step gradient in place (A-GEM projection).
    pub fn transform_gradients(&mut self, model: &ModelState, grads: &mut ParamSet, batch_size: usize) -> Result<()> {
        let Strategy::Agem {
            buffer,
            batch_size: ref_size,
        } = self
        else {
            return Ok(());
        };
        if buffer.is_empty() {
            return Ok(());
        }
        let memory = buffer.sample(ref_size.unwrap_or(batch_size));
        let (logits, cache) = model.forward(&memory)?;
        let (_, dz) = bce_loss(&logits, &targets_matrix(&memory, model.config().n_labels))?;
        let reference = model.backward(&cache, &dz)?;
        let projected = agem_project(&grads.flatten_trainable(), &reference.flatten_trainable())?;
        grads.unflatten_trainable(&projected)
    }

    /// Called with the final model of a period and that period's documents.
    pub fn end_period(&mut self, model: &ModelState, group: &PeriodGroup) -> Result<()> {
        match self {
            Strategy::Ewc(state) => {
                if state.lambda == 0.0 {
                    return Ok(());
                }
                ewc_end_period(model, &group.docs, state)
            }
            Strategy::Replay { buffer, config, .. } => {
                er_end_period(buffer, &group.docs, config.fraction, group.period)
            }
            Strategy::Agem { buffer, .. } => {
                for doc in &group.docs {
                    buffer.reservoir_insert(StoredItem {
                        doc: doc.clone(),
                        period: group.period,
                    });
                }
                Ok(())
            }
            Strategy::Invariant(_) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_drift_corpus, SynthParams};
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use std::collections::{BTreeMap, BTreeSet};

    fn doc(id: &str, t: Period, tokens: &[(usize, u32)], labels: &[usize]) -> Document {
        Document {
            id: id.into(),
            timestamp: t,
            token_counts: tokens.iter().copied().collect::<BTreeMap<_, _>>(),
            labels: labels.iter().copied().collect::<BTreeSet<_>>(),
        }
    }

    fn single_param_state(theta: f64) -> ModelState {
        let config = ModelConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            n_labels: 1,
            ..ModelConfig::new(1, 1)
        };
        let mut model = init_model(&config).unwrap();
        for (name, p) in model.params_mut().iter_mut() {
            p.trainable = name == "b_out";
        }
        model.params_mut().tensor_mut("b_out").unwrap().data_mut()[0] = theta;
        model
    }

    #[test]
    fn ewc_penalty_values() {
        let model = single_param_state(3.0);
        let mut anchor = model.params().clone();
        anchor.tensor_mut("b_out").unwrap().data_mut()[0] = 0.0;
        let mut fisher = model.params().zeros_like();
        fisher.tensor_mut("b_out").unwrap().data_mut()[0] = 2.0;
        let state = EwcState {
            lambda: 0.5,
            gamma: 1.0,
            anchor: Some(anchor),
            fisher: Some(fisher.clone()),
        };
        let (penalty, grads) = ewc_penalty(&model, &state).unwrap();
        assert!((penalty - 4.5).abs() < 1e-15);
        assert!((grads.tensor("b_out").unwrap().data()[0] - 3.0).abs() < 1e-15);

        let at_anchor = EwcState {
            anchor: Some(model.params().clone()),
            ..state.clone()
        };
        let (p, g) = ewc_penalty(&model, &at_anchor).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.flatten_trainable().iter().all(|&x| x == 0.0));

        let no_importance = EwcState {
            fisher: Some(model.params().zeros_like()),
            ..state
        };
        assert_eq!(ewc_penalty(&model, &no_importance).unwrap().0, 0.0);
        assert_eq!(ewc_penalty(&model, &EwcState::new(&EwcConfig::default())).unwrap().0, 0.0);
    }

    #[test]
    fn fisher_is_squared_gradient() {
        // Only b_out trainable: ∂L/∂b = σ(z) − y with one label.
        let model = single_param_state(0.0);
        let d = doc("a", 1, &[(0, 1)], &[]);
        let (logits, _) = model.forward(&[&d]).unwrap();
        let g = sigmoid(logits.data()[0]);
        let f = empirical_fisher(&model, &[&d]).unwrap();
        assert!((f.tensor("b_out").unwrap().data()[0] - g * g).abs() < 1e-15);
        assert!(f.tensor("w1").unwrap().data().iter().all(|&x| x == 0.0));

        // Force the gradient to 0.4: σ(z) − y = 0.4 with y = 0 → z = logit(0.4).
        let mut m = model.clone();
        let target = (0.4f64 / 0.6).ln();
        let shift = target - logits.data()[0];
        m.params_mut().tensor_mut("b_out").unwrap().data_mut()[0] += shift;
        let f = empirical_fisher(&m, &[&d]).unwrap();
        assert!((f.tensor("b_out").unwrap().data()[0] - 0.16).abs() < 1e-12);
    }

    #[test]
    fn fisher_accumulates_online() {
        let corpus = synth_drift_corpus(&SynthParams {
            n_periods: 1,
            docs_per_period: 5,
            vocab_size: 20,
            n_labels: 2,
            drift_rate: 0.0,
            seed: 0,
        })
        .unwrap();
        let model = init_model(&ModelConfig::new(20, 2)).unwrap();
        let docs = corpus.documents();
        let mut state = EwcState::new(&EwcConfig::default());
        ewc_end_period(&model, docs, &mut state).unwrap();
        let first = state.fisher.clone().unwrap();
        ewc_end_period(&model, docs, &mut state).unwrap();
        let second = state.fisher.clone().unwrap();
        for ((_, a), (_, b)) in first.iter().zip(second.iter()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
                assert!(*x >= 0.0);
            }
        }
        assert!(ewc_end_period(&model, &[] as &[Document], &mut state).is_err());
    }

    #[test]
    fn saturated_model_has_zero_fisher() {
        let model = single_param_state(0.0);
        let d = doc("a", 1, &[(0, 1)], &[]);
        let mut m = model.clone();
        m.params_mut().tensor_mut("b_out").unwrap().data_mut()[0] = -1e4;
        let f = empirical_fisher(&m, &[&d]).unwrap();
        assert!(f.flatten_trainable().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn replay_cadence() {
        let mut empty = ReplayBuffer::growing(0);
        assert!((1..=30).all(|s| er_step(s, &mut empty, 10, 4).is_none()));
        let mut buffer = ReplayBuffer::growing(0);
        er_end_period(&mut buffer, &[doc("a", 1, &[(0, 1)], &[0])], 1.0, 1).unwrap();
        let fired: Vec<u64> = (1..=30)
            .filter(|&s| er_step(s, &mut buffer, 10, 4).is_some())
            .collect();
        assert_eq!(fired, vec![10, 20, 30]);
    }

    #[test]
    fn replay_memory_grows() {
        let mut buffer = ReplayBuffer::growing(3);
        let period = |p: Period, n: usize| -> Vec<Document> {
            (0..n).map(|i| doc(&format!("{p}-{i}"), p, &[(0, 1)], &[0])).collect()
        };
        er_end_period(&mut buffer, &period(1, 7), 1.0, 1).unwrap();
        er_end_period(&mut buffer, &period(2, 5), 1.0, 2).unwrap();
        assert_eq!(buffer.len(), 12);
        assert!(buffer.items()[..7].iter().all(|it| it.period == 1));
        assert!(buffer.items()[7..].iter().all(|it| it.period == 2));

        let docs = period(3, 100);
        let mut a = ReplayBuffer::growing(9);
        let mut b = ReplayBuffer::growing(9);
        er_end_period(&mut a, &docs, 0.1, 3).unwrap();
        er_end_period(&mut b, &docs, 0.1, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.items(), b.items());
        assert!(er_end_period(&mut a, &docs, 1.5, 3).is_err());
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buffer = ReplayBuffer::growing(5);
        let docs: Vec<Document> = (0..20).map(|i| doc(&i.to_string(), 1, &[(0, 1)], &[0])).collect();
        er_end_period(&mut buffer, &docs, 1.0, 1).unwrap();
        let draws = 100_000;
        let batch = 4;
        let mut counts = BTreeMap::<String, u64>::new();
        for _ in 0..draws {
            let sample = buffer.sample(batch);
            assert_eq!(sample.len(), batch);
            for d in sample {
                *counts.entry(d.id).or_insert(0) += 1;
            }
        }
        let p = batch as f64 / 20.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert_eq!(counts.len(), 20);
        for (id, c) in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{id}: {c} vs {mean}±{sigma}");
        }
    }

    #[test]
    fn reservoir_edges() {
        let item = |i: usize| StoredItem {
            doc: doc(&i.to_string(), 0, &[], &[]),
            period: 0,
        };
        let mut buf = ReplayBuffer::with_capacity(5, 1);
        for i in 0..5 {
            buf.reservoir_insert(item(i));
        }
        let ids: Vec<&str> = buf.items().iter().map(|it| it.doc.id.as_str()).collect();
        assert_eq!(ids, vec!["0", "1", "2", "3", "4"]);
        for i in 5..50 {
            buf.reservoir_insert(item(i));
            assert_eq!(buf.len(), 5);
        }
        assert_eq!(buf.seen_count(), 50);

        let mut one = ReplayBuffer::with_capacity(1, 2);
        for i in 0..20 {
            one.reservoir_insert(item(i));
            assert_eq!(one.len(), 1);
        }
        let mut none = ReplayBuffer::with_capacity(0, 2);
        none.reservoir_insert(item(0));
        assert!(none.is_empty());
    }

    #[test]
    fn agem_cases() {
        assert_eq!(agem_project(&[1.0, 2.0], &[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let g = agem_project(&[1.0, 0.0], &[-1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
        assert_eq!(g[0] * -1.0 + g[1], 0.0);
        assert_eq!(agem_project(&[1.0, 1.0], &[-1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(agem_project(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert!(agem_project(&[1.0], &[1.0, 1.0]).is_err());
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn coral_cases() {
        let x = mat(&[&[0.1, 0.4], &[0.3, -0.2], &[1.0, 0.0]]);
        let (p, g) = coral_penalty(&[x.clone(), x.clone(), x], 0.001).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

        let (p, _) = coral_penalty(&[mat(&[&[1.0, 2.0]]), mat(&[&[0.0, 4.0]])], 0.001).unwrap();
        assert!((p - 0.001 * 5.0).abs() < 1e-15);

        let (p, _) = coral_penalty(&[mat(&[&[0.0], &[2.0]]), mat(&[&[1.0], &[1.0]])], 0.001).unwrap();
        assert!((p - 0.001).abs() < 1e-15);

        assert!(coral_penalty(&[mat(&[&[1.0]])], 0.001).is_err());
    }

    #[test]
    fn irm_cases() {
        let zeros = Tensor::zeros(&[2, 3]);
        let y = mat(&[&[1., 0., 1.], &[0., 0., 1.]]);
        let (p, g) = irm_penalty(&[zeros], &[y], 1.0).unwrap();
        assert_eq!(p, 0.0);
        assert!(g[0].data().iter().all(|&v| v == 0.0));

        let (p, _) = irm_penalty(&[mat(&[&[40.0]])], &[mat(&[&[1.0]])], 1.0).unwrap();
        assert!(p < 1e-20);

        let (p, _) = irm_penalty(&[mat(&[&[1.0]])], &[mat(&[&[0.0]])], 1.0).unwrap();
        let d = 1.0 / (1.0 + (-1f64).exp());
        assert!((p - d * d).abs() < 1e-15);
        assert!((p - 0.5345).abs() < 1e-4);
        assert!(irm_penalty(&[], &[], 1.0).is_err());
    }

    #[test]
    fn groupdro_cases() {
        let mut s = GroupDroState::uniform(3, 0.7);
        groupdro_update(&[0.4, 0.4, 0.4], &mut s).unwrap();
        for q in &s.q {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut s = GroupDroState::uniform(2, 0.0);
        groupdro_update(&[5.0, 0.1], &mut s).unwrap();
        assert_eq!(s.q, vec![0.5, 0.5]);

        let mut s = GroupDroState::uniform(2, 1.0);
        let weighted = groupdro_update(&[1.0, 0.0], &mut s).unwrap();
        let e = std::f64::consts::E;
        assert!((s.q[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.q[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((weighted - e / (e + 1.0)).abs() < 1e-15);
        assert!(groupdro_update(&[f64::NAN, 0.0], &mut s).is_err());
    }

    #[test]
    fn domain_batches() {
        let corpus = synth_drift_corpus(&SynthParams {
            n_periods: 6,
            docs_per_period: 10,
            vocab_size: 30,
            n_labels: 2,
            drift_rate: 0.5,
            seed: 1,
        })
        .unwrap();
        let windows = sliding_windows(&corpus.periods(), 5).unwrap();
        let b = make_domain_batches(&corpus, &windows[1], 3, 4, 7).unwrap();
        let periods: Vec<Period> = b.batches.iter().map(|(p, _)| *p).collect();
        assert_eq!(periods, vec![4, 5, 6]);
        for (p, docs) in &b.batches {
            assert_eq!(docs.len(), 4);
            assert!(docs.iter().all(|d| d.timestamp == *p));
        }
        assert_eq!(b, make_domain_batches(&corpus, &windows[1], 3, 4, 7).unwrap());
        let three = DomainWindow {
            window_id: 0,
            periods: vec![1, 2, 3],
        };
        assert_eq!(make_domain_batches(&corpus, &three, 3, 2, 0).unwrap().batches.len(), 3);
        let missing = DomainWindow {
            window_id: 0,
            periods: vec![98, 99],
        };
        assert!(make_domain_batches(&corpus, &missing, 3, 2, 0).is_err());
    }

    fn vec_strategy(len: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, len)
    }

    proptest! {
        #[test]
        fn agem_output_respects_constraint(
            (g, r) in proptest::strategy::Strategy::prop_flat_map(1usize..10, |n| (vec_strategy(n), vec_strategy(n))),
        ) {
            let out = agem_project(&g, &r).unwrap();
            let dot: f64 = out.iter().zip(&r).map(|(a, b)| a * b).sum();
            prop_assert!(dot >= -1e-12);
        }

        #[test]
        fn groupdro_stays_on_simplex(
            losses in proptest::collection::vec(proptest::collection::vec(0.0f64..20.0, 4), 1..20),
            eta in 0.0f64..5.0,
        ) {
            let mut s = GroupDroState::uniform(4, eta);
            for l in losses {
                groupdro_update(&l, &mut s).unwrap();
                prop_assert!((s.q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(s.q.iter().all(|&q| q > 0.0));
            }
        }

        #[test]
        fn ewc_penalty_nonnegative(theta in -3.0f64..3.0, f in 0.0f64..5.0) {
            let model = single_param_state(theta);
            let mut fisher = model.params().zeros_like();
            fisher.tensor_mut("b_out").unwrap().data_mut()[0] = f;
            let state = EwcState {
                lambda: 0.5,
                gamma: 1.0,
                anchor: Some(model.params().zeros_like()),
                fisher: Some(fisher),
            };
            let (p, _) = ewc_penalty(&model, &state).unwrap();
            prop_assert!(p >= 0.0);
            prop_assert_eq!(p == 0.0, f == 0.0 || theta == 0.0);
        }
    }
}
