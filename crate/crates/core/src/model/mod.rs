//! A small multi-label text classifier with a label-wise attention head.
//!
//! Each token occurrence is encoded as `φ(W₁ᵀ e_tok + b₁)` (optionally passed
//! through a residual bottleneck adapter). Every label owns an attention
//! query that pools the token vectors of a document, with token counts
//! acting as multiplicities inside the softmax, and a linear output unit on
//! top of the pooled representation. All gradients are computed in closed
//! form.
//!
//! LoRA expansions replace a frozen matrix `W` by `W + (alpha/r)·B·A` inside
//! the forward pass; only `A` and `B` are trained.

mod checkpoint;

use std::borrow::Borrow;
use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamSet, Tensor};

pub const EMBEDDING: &str = "embedding";
pub const W1: &str = "w1";
pub const B1: &str = "b1";
pub const QUERY: &str = "query";
pub const W_OUT: &str = "w_out";
pub const B_OUT: &str = "b_out";
pub const ADAPTER_DOWN: &str = "adapter.down";
pub const ADAPTER_DOWN_BIAS: &str = "adapter.down_bias";
pub const ADAPTER_UP: &str = "adapter.up";
pub const ADAPTER_UP_BIAS: &str = "adapter.up_bias";

/// Matrices that may carry a LoRA expansion.
pub const LORA_TARGETS: [&str; 4] = [EMBEDDING, W1, QUERY, W_OUT];

pub fn lora_a_name(target: &str) -> String {
    format!("lora.{target}.a")
}

pub fn lora_b_name(target: &str) -> String {
    format!("lora.{target}.b")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation and the activation.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - out * out,
            Nonlinearity::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_labels: usize,
    pub use_label_attention: bool,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_labels: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 16,
            n_labels,
            use_label_attention: true,
            nonlinearity: Nonlinearity::Tanh,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_labels", self.n_labels),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub reduction: usize,
    pub bottleneck: usize,
}

/// Bottleneck width for a hidden size and reduction factor.
pub fn adapter_bottleneck(hidden_dim: usize, reduction: usize) -> usize {
    (hidden_dim / reduction.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamSet,
    lora: Option<LoraSpec>,
    adapter: Option<AdapterSpec>,
    version: u64,
}

fn uniform(rng: &mut rng::Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape matches generated length")
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Deterministic initialization: scaled uniform weights, zero biases.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let ModelConfig {
        vocab_size: v,
        embed_dim: d,
        hidden_dim: h,
        n_labels: n,
        ..
    } = *config;
    let mut rng = rng::seeded(config.seed);
    let mut params = ParamSet::new();
    params.insert(EMBEDDING, uniform(&mut rng, &[v, d], 1.0), true, false);
    params.insert(W1, uniform(&mut rng, &[d, h], glorot(d, h)), true, false);
    params.insert(B1, Tensor::zeros(&[h]), true, true);
    params.insert(QUERY, uniform(&mut rng, &[n, h], glorot(h, 1)), true, false);
    params.insert(W_OUT, uniform(&mut rng, &[n, h], glorot(h, 1)), true, false);
    params.insert(B_OUT, Tensor::zeros(&[n]), true, true);
    Ok(ModelState {
        config: config.clone(),
        params,
        lora: None,
        adapter: None,
        version: 0,
    })
}

impl ModelState {
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamSet,
        lora: Option<LoraSpec>,
        adapter: Option<AdapterSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let model = ModelState {
            config,
            params,
            lora,
            adapter,
            version: 0,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (v, d, h, n) = (c.vocab_size, c.embed_dim, c.hidden_dim, c.n_labels);
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            (EMBEDDING.into(), vec![v, d]),
            (W1.into(), vec![d, h]),
            (B1.into(), vec![h]),
            (QUERY.into(), vec![n, h]),
            (W_OUT.into(), vec![n, h]),
            (B_OUT.into(), vec![n]),
        ];
        if let Some(lora) = &self.lora {
            for target in &lora.targets {
                let shape = self.params.tensor(target)?.shape().to_vec();
                expected.push((lora_a_name(target), vec![lora.rank, shape[1]]));
                expected.push((lora_b_name(target), vec![shape[0], lora.rank]));
            }
        }
        if let Some(adapter) = &self.adapter {
            let k = adapter.bottleneck;
            expected.push((ADAPTER_DOWN.into(), vec![k, h]));
            expected.push((ADAPTER_DOWN_BIAS.into(), vec![k]));
            expected.push((ADAPTER_UP.into(), vec![h, k]));
            expected.push((ADAPTER_UP_BIAS.into(), vec![h]));
        }
        if expected.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} tensors, configuration implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let actual = self.params.tensor(&name)?.shape();
            if actual != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` has shape {actual:?}, expected {shape:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    pub fn lora(&self) -> Option<&LoraSpec> {
        self.lora.as_ref()
    }

    pub fn adapter(&self) -> Option<&AdapterSpec> {
        self.adapter.as_ref()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn freeze_all(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.trainable = false;
        }
    }

    /// Logits for a batch of documents.
    pub fn forward<T: Borrow<Document>>(&self, batch: &[T]) -> Result<(Tensor, ForwardCache)> {
        let entries: Vec<Vec<(usize, f64)>> = batch
            .iter()
            .map(|d| {
                d.borrow()
                    .token_counts
                    .iter()
                    .map(|(&t, &c)| (t, c as f64))
                    .collect()
            })
            .collect();
        self.forward_entries(&entries)
    }

    /// Forward pass over explicit `(token, multiplicity)` lists; a token may
    /// appear more than once.
    pub fn forward_entries(&self, batch: &[Vec<(usize, f64)>]) -> Result<(Tensor, ForwardCache)> {
        let c = &self.config;
        for entries in batch {
            if let Some(&(t, _)) = entries.iter().find(|(t, _)| *t >= c.vocab_size) {
                return Err(Error::IdOutOfRange {
                    kind: "token",
                    id: t,
                    size: c.vocab_size,
                });
            }
        }
        let effective = self.effective_weights()?;
        let w = Weights::new(self, &effective)?;
        let mut logits = Tensor::zeros(&[batch.len(), c.n_labels]);
        let docs = batch
            .iter()
            .enumerate()
            .map(|(b, entries)| self.forward_doc(&w, entries, logits.row_mut(b)))
            .collect();
        let cache = ForwardCache {
            docs,
            logits: logits.clone(),
            effective,
            version: self.version,
            hidden_dim: c.hidden_dim,
            n_labels: c.n_labels,
        };
        Ok((logits, cache))
    }

    /// Base matrices with their LoRA update folded in, for each target.
    fn effective_weights(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        if let Some(lora) = &self.lora {
            for target in &lora.targets {
                let base = self.params.tensor(target)?;
                let a = self.params.tensor(&lora_a_name(target))?;
                let b = self.params.tensor(&lora_b_name(target))?;
                let mut delta = b.matmul(a)?;
                delta.scale(lora.scale());
                let mut eff = base.clone();
                eff.add_assign(&delta)?;
                out.insert(target.clone(), eff);
            }
        }
        Ok(out)
    }

    fn forward_doc(&self, w: &Weights, entries: &[(usize, f64)], logits: &mut [f64]) -> DocCache {
        let c = &self.config;
        let (d, h, n) = (c.embed_dim, c.hidden_dim, c.n_labels);
        let phi = c.nonlinearity;
        let m = entries.len();
        let k = w.adapter.as_ref().map_or(0, |a| a.down.rows());

        let mut pre = vec![0.0; m * h];
        let mut u = vec![0.0; m * h];
        let mut a_pre = vec![0.0; m * k];
        let mut a_act = vec![0.0; m * k];
        let mut v = vec![0.0; m * h];
        for (j, &(token, _)) in entries.iter().enumerate() {
            let x = w.embedding.row(token);
            let pre_j = &mut pre[j * h..(j + 1) * h];
            pre_j.copy_from_slice(w.b1.data());
            for (p, &xp) in x.iter().enumerate().take(d) {
                for (o, wv) in pre_j.iter_mut().zip(w.w1.row(p)) {
                    *o += xp * wv;
                }
            }
            for i in 0..h {
                u[j * h + i] = phi.apply(pre[j * h + i]);
            }
            let v_j = &mut v[j * h..(j + 1) * h];
            v_j.copy_from_slice(&u[j * h..(j + 1) * h]);
            if let Some(ad) = &w.adapter {
                let u_j = &u[j * h..(j + 1) * h];
                for q in 0..k {
                    let s = ad.down_bias.data()[q] + dot(ad.down.row(q), u_j);
                    a_pre[j * k + q] = s;
                    a_act[j * k + q] = phi.apply(s);
                }
                let act = &a_act[j * k..(j + 1) * k];
                for (i, vi) in v_j.iter_mut().enumerate() {
                    *vi += ad.up_bias.data()[i] + dot(ad.up.row(i), act);
                }
            }
        }

        let mut attn = vec![0.0; n * m];
        let mut reps = vec![0.0; n * h];
        let total_count: f64 = entries.iter().map(|e| e.1).sum();
        for l in 0..n {
            let weights = &mut attn[l * m..(l + 1) * m];
            if m > 0 {
                if c.use_label_attention {
                    let q = w.query.row(l);
                    for j in 0..m {
                        weights[j] = dot(q, &v[j * h..(j + 1) * h]);
                    }
                    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (wj, e) in weights.iter_mut().zip(entries) {
                        *wj = e.1 * (*wj - max).exp();
                        z += *wj;
                    }
                    weights.iter_mut().for_each(|x| *x /= z);
                } else {
                    for (wj, e) in weights.iter_mut().zip(entries) {
                        *wj = e.1 / total_count;
                    }
                }
            }
            let rep = &mut reps[l * h..(l + 1) * h];
            for (j, &a) in weights.iter().enumerate() {
                for (r, vi) in rep.iter_mut().zip(&v[j * h..(j + 1) * h]) {
                    *r += a * vi;
                }
            }
            logits[l] = dot(w.w_out.row(l), rep) + w.b_out.data()[l];
        }

        DocCache {
            tokens: entries.iter().map(|e| e.0).collect(),
            pre,
            u,
            a_pre,
            a_act,
            v,
            attn,
            reps,
        }
    }

    /// Exact gradients of a scalar loss given `∂loss/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<ParamSet> {
        self.backward_with_features(cache, dlogits, None)
    }

    /// Like [`ModelState::backward`], additionally propagating a gradient
    /// on the per-document features of [`extract_features`].
    pub fn backward_with_features(
        &self,
        cache: &ForwardCache,
        dlogits: &Tensor,
        dfeatures: Option<&Tensor>,
    ) -> Result<ParamSet> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                model: self.version,
            });
        }
        let c = &self.config;
        let (b, n, h) = (cache.docs.len(), c.n_labels, c.hidden_dim);
        if dlogits.shape() != [b, n] {
            return Err(Error::ShapeMismatch(format!(
                "dlogits {:?}, expected [{b}, {n}]",
                dlogits.shape()
            )));
        }
        if let Some(df) = dfeatures {
            if df.shape() != [b, h] {
                return Err(Error::ShapeMismatch(format!(
                    "dfeatures {:?}, expected [{b}, {h}]",
                    df.shape()
                )));
            }
        }
        let w = Weights::new(self, &cache.effective)?;
        let lora_targets: Vec<&str> = self
            .lora
            .as_ref()
            .map(|l| l.targets.iter().map(String::as_str).collect())
            .unwrap_or_default();
        let wants = |name: &str| -> bool {
            self.params.get(name).is_some_and(|p| p.trainable) || lora_targets.contains(&name)
        };
        let need = Needs {
            embedding: wants(EMBEDDING),
        };

        let mut grads = self.params.zeros_like();
        let mut g = BaseGrads::new(c, w.adapter.as_ref().map_or(0, |a| a.down.rows()));
        for (i, doc) in cache.docs.iter().enumerate() {
            let dfeat = dfeatures.map(|t| t.row(i));
            self.backward_doc(&w, doc, dlogits.row(i), dfeat, &need, &mut g);
        }

        fn put(grads: &mut ParamSet, name: &str, t: Tensor) -> Result<()> {
            *grads.tensor_mut(name)? = t;
            Ok(())
        }
        put(&mut grads, EMBEDDING, g.embedding)?;
        put(&mut grads, W1, g.w1)?;
        put(&mut grads, B1, g.b1)?;
        put(&mut grads, QUERY, g.query)?;
        put(&mut grads, W_OUT, g.w_out)?;
        put(&mut grads, B_OUT, g.b_out)?;
        if let Some(ad) = g.adapter {
            put(&mut grads, ADAPTER_DOWN, ad.down)?;
            put(&mut grads, ADAPTER_DOWN_BIAS, ad.down_bias)?;
            put(&mut grads, ADAPTER_UP, ad.up)?;
            put(&mut grads, ADAPTER_UP_BIAS, ad.up_bias)?;
        }
        if let Some(lora) = &self.lora {
            let scale = lora.scale();
            for target in &lora.targets {
                let g_eff = grads.tensor(target)?.clone();
                let a = self.params.tensor(&lora_a_name(target))?;
                let bm = self.params.tensor(&lora_b_name(target))?;
                let mut db = g_eff.matmul(&a.transpose())?;
                db.scale(scale);
                let mut da = bm.transpose().matmul(&g_eff)?;
                da.scale(scale);
                put(&mut grads, &lora_b_name(target), db)?;
                put(&mut grads, &lora_a_name(target), da)?;
            }
        }
        for (_, p) in grads.iter_mut() {
            if !p.trainable {
                p.tensor.fill(0.0);
            }
        }
        Ok(grads)
    }

    fn backward_doc(
        &self,
        w: &Weights,
        doc: &DocCache,
        dz: &[f64],
        dfeat: Option<&[f64]>,
        need: &Needs,
        g: &mut BaseGrads,
    ) {
        let c = &self.config;
        let (d, h, n) = (c.embed_dim, c.hidden_dim, c.n_labels);
        let phi = c.nonlinearity;
        let m = doc.tokens.len();
        let k = w.adapter.as_ref().map_or(0, |a| a.down.rows());

        let mut dv = vec![0.0; m * h];
        let mut drep = vec![0.0; h];
        let mut dattn = vec![0.0; m];
        for l in 0..n {
            let rep = &doc.reps[l * h..(l + 1) * h];
            let wl = w.w_out.row(l);
            for (gw, r) in g.w_out.row_mut(l).iter_mut().zip(rep) {
                *gw += dz[l] * r;
            }
            g.b_out.data_mut()[l] += dz[l];
            for i in 0..h {
                drep[i] = dz[l] * wl[i];
            }
            if let Some(df) = dfeat {
                for i in 0..h {
                    drep[i] += df[i] / n as f64;
                }
            }
            let attn = &doc.attn[l * m..(l + 1) * m];
            for j in 0..m {
                let v_j = &doc.v[j * h..(j + 1) * h];
                dattn[j] = dot(&drep, v_j);
                for (o, r) in dv[j * h..(j + 1) * h].iter_mut().zip(&drep) {
                    *o += attn[j] * r;
                }
            }
            if c.use_label_attention {
                let weighted: f64 = attn.iter().zip(&dattn).map(|(a, da)| a * da).sum();
                let q = w.query.row(l);
                for j in 0..m {
                    let ds = attn[j] * (dattn[j] - weighted);
                    let v_j = &doc.v[j * h..(j + 1) * h];
                    for (gq, vi) in g.query.row_mut(l).iter_mut().zip(v_j) {
                        *gq += ds * vi;
                    }
                    for (o, qi) in dv[j * h..(j + 1) * h].iter_mut().zip(q) {
                        *o += ds * qi;
                    }
                }
            }
        }

        let mut du = dv;
        if let (Some(ad), Some(gad)) = (&w.adapter, g.adapter.as_mut()) {
            let mut dapre = vec![0.0; k];
            for j in 0..m {
                let dv_j: Vec<f64> = du[j * h..(j + 1) * h].to_vec();
                let act = &doc.a_act[j * k..(j + 1) * k];
                let u_j = &doc.u[j * h..(j + 1) * h];
                for i in 0..h {
                    for (gu, a) in gad.up.row_mut(i).iter_mut().zip(act) {
                        *gu += dv_j[i] * a;
                    }
                    gad.up_bias.data_mut()[i] += dv_j[i];
                }
                for q in 0..k {
                    let mut da = 0.0;
                    for i in 0..h {
                        da += ad.up.at(i, q) * dv_j[i];
                    }
                    dapre[q] = da * phi.derivative(doc.a_pre[j * k + q], act[q]);
                }
                for q in 0..k {
                    for (gd, ui) in gad.down.row_mut(q).iter_mut().zip(u_j) {
                        *gd += dapre[q] * ui;
                    }
                    gad.down_bias.data_mut()[q] += dapre[q];
                    for (o, dw) in du[j * h..(j + 1) * h].iter_mut().zip(ad.down.row(q)) {
                        *o += dapre[q] * dw;
                    }
                }
            }
        }

        let mut dpre = vec![0.0; h];
        for (j, &token) in doc.tokens.iter().enumerate() {
            for i in 0..h {
                dpre[i] = du[j * h + i] * phi.derivative(doc.pre[j * h + i], doc.u[j * h + i]);
            }
            let x = w.embedding.row(token);
            for p in 0..d {
                for (gw, dp) in g.w1.row_mut(p).iter_mut().zip(&dpre) {
                    *gw += x[p] * dp;
                }
            }
            for (gb, dp) in g.b1.data_mut().iter_mut().zip(&dpre) {
                *gb += dp;
            }
            if need.embedding {
                for p in 0..d {
                    g.embedding.row_mut(token)[p] += dot(w.w1.row(p), &dpre);
                }
            }
        }
    }

    /// Sigmoid probabilities for a batch.
    pub fn predict_proba<T: Borrow<Document>>(&self, docs: &[T]) -> Result<Tensor> {
        let (mut logits, _) = self.forward(docs)?;
        logits.data_mut().iter_mut().for_each(|z| *z = sigmoid(*z));
        Ok(logits)
    }
}

struct Needs {
    embedding: bool,
}

struct AdapterWeights<'a> {
    down: &'a Tensor,
    down_bias: &'a Tensor,
    up: &'a Tensor,
    up_bias: &'a Tensor,
}

struct Weights<'a> {
    embedding: &'a Tensor,
    w1: &'a Tensor,
    b1: &'a Tensor,
    query: &'a Tensor,
    w_out: &'a Tensor,
    b_out: &'a Tensor,
    adapter: Option<AdapterWeights<'a>>,
}

impl<'a> Weights<'a> {
    fn new(model: &'a ModelState, effective: &'a BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<&'a Tensor> {
            match effective.get(name) {
                Some(t) => Ok(t),
                None => model.params.tensor(name),
            }
        };
        let adapter = if model.adapter.is_some() {
            Some(AdapterWeights {
                down: get(ADAPTER_DOWN)?,
                down_bias: get(ADAPTER_DOWN_BIAS)?,
                up: get(ADAPTER_UP)?,
                up_bias: get(ADAPTER_UP_BIAS)?,
            })
        } else {
            None
        };
        Ok(Weights {
            embedding: get(EMBEDDING)?,
            w1: get(W1)?,
            b1: get(B1)?,
            query: get(QUERY)?,
            w_out: get(W_OUT)?,
            b_out: get(B_OUT)?,
            adapter,
        })
    }
}

struct AdapterGrads {
    down: Tensor,
    down_bias: Tensor,
    up: Tensor,
    up_bias: Tensor,
}

struct BaseGrads {
    embedding: Tensor,
    w1: Tensor,
    b1: Tensor,
    query: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    adapter: Option<AdapterGrads>,
}

impl BaseGrads {
    fn new(c: &ModelConfig, bottleneck: usize) -> Self {
        let (v, d, h, n) = (c.vocab_size, c.embed_dim, c.hidden_dim, c.n_labels);
        BaseGrads {
            embedding: Tensor::zeros(&[v, d]),
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            query: Tensor::zeros(&[n, h]),
            w_out: Tensor::zeros(&[n, h]),
            b_out: Tensor::zeros(&[n]),
            adapter: (bottleneck > 0).then(|| AdapterGrads {
                down: Tensor::zeros(&[bottleneck, h]),
                down_bias: Tensor::zeros(&[bottleneck]),
                up: Tensor::zeros(&[h, bottleneck]),
                up_bias: Tensor::zeros(&[h]),
            }),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
struct DocCache {
    tokens: Vec<usize>,
    pre: Vec<f64>,
    u: Vec<f64>,
    a_pre: Vec<f64>,
    a_act: Vec<f64>,
    v: Vec<f64>,
    /// `n_labels × tokens`, row per label.
    attn: Vec<f64>,
    /// `n_labels × hidden_dim`.
    reps: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    docs: Vec<DocCache>,
    logits: Tensor,
    effective: BTreeMap<String, Tensor>,
    version: u64,
    hidden_dim: usize,
    n_labels: usize,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Attention weights of `label` over the token entries of document `doc`.
    pub fn attention(&self, doc: usize, label: usize) -> &[f64] {
        let d = &self.docs[doc];
        let m = d.tokens.len();
        &d.attn[label * m..(label + 1) * m]
    }

    pub fn label_representation(&self, doc: usize, label: usize) -> &[f64] {
        let h = self.hidden_dim;
        &self.docs[doc].reps[label * h..(label + 1) * h]
    }
}

/// Mean over labels of the label representations, one row per document.
pub fn extract_features(cache: &ForwardCache) -> Tensor {
    let (h, n) = (cache.hidden_dim, cache.n_labels);
    let mut out = Tensor::zeros(&[cache.docs.len(), h]);
    for (i, doc) in cache.docs.iter().enumerate() {
        let row = out.row_mut(i);
        for l in 0..n {
            for (o, r) in row.iter_mut().zip(&doc.reps[l * h..(l + 1) * h]) {
                *o += r;
            }
        }
        row.iter_mut().for_each(|x| *x /= n as f64);
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy with logits and its gradient.
pub fn bce_loss(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let count = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &z), &y) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(targets.data())
    {
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        loss += softplus(z) - y * z;
        *g = (sigmoid(z) - y) / count;
    }
    Ok((loss / count, grad))
}

/// Binary target matrix (documents × labels).
pub fn targets_matrix<T: Borrow<Document>>(docs: &[T], n_labels: usize) -> Tensor {
    let mut t = Tensor::zeros(&[docs.len(), n_labels]);
    for (i, doc) in docs.iter().enumerate() {
        for &l in &doc.borrow().labels {
            if l < n_labels {
                t.row_mut(i)[l] = 1.0;
            }
        }
    }
    t
}

/// Freezes the model and adds trainable low-rank factors to each target.
pub fn attach_lora(model: &ModelState, targets: &[&str], rank: usize, alpha: f64) -> Result<ModelState> {
    if model.lora.is_some() {
        return Err(Error::InvalidArgument("model already carries LoRA factors".into()));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("LoRA rank must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("LoRA needs at least one target".into()));
    }
    let mut out = model.clone();
    out.freeze_all();
    let mut rng = rng::seeded(rng::derive_seed(model.config.seed, 0x10BA));
    for &target in targets {
        if !LORA_TARGETS.contains(&target) {
            return Err(Error::InvalidArgument(format!(
                "`{target}` cannot carry a LoRA expansion"
            )));
        }
        let shape = model.params.tensor(target)?.shape().to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        if rank > rows.min(cols) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} exceeds min dimension of `{target}` ({rows}x{cols})"
            )));
        }
        let a = uniform(&mut rng, &[rank, cols], 1.0 / (cols as f64).sqrt());
        out.params.insert(&lora_a_name(target), a, true, false);
        out.params
            .insert(&lora_b_name(target), Tensor::zeros(&[rows, rank]), true, false);
    }
    out.lora = Some(LoraSpec {
        rank,
        alpha,
        targets: targets.iter().map(|t| t.to_string()).collect(),
    });
    out.version += 1;
    Ok(out)
}

/// Freezes the model and inserts a residual bottleneck adapter after the
/// encoder nonlinearity. The up-projection starts at zero.
pub fn attach_adapter(model: &ModelState, reduction: usize) -> Result<ModelState> {
    if reduction < 1 {
        return Err(Error::InvalidArgument("adapter reduction must be >= 1".into()));
    }
    if model.adapter.is_some() {
        return Err(Error::InvalidArgument("model already carries an adapter".into()));
    }
    let h = model.config.hidden_dim;
    let k = adapter_bottleneck(h, reduction);
    let mut out = model.clone();
    out.freeze_all();
    let mut rng = rng::seeded(rng::derive_seed(model.config.seed, 0xADA));
    out.params
        .insert(ADAPTER_DOWN, uniform(&mut rng, &[k, h], glorot(h, k)), true, false);
    out.params
        .insert(ADAPTER_DOWN_BIAS, Tensor::zeros(&[k]), true, true);
    out.params.insert(ADAPTER_UP, Tensor::zeros(&[h, k]), true, false);
    out.params
        .insert(ADAPTER_UP_BIAS, Tensor::zeros(&[h]), true, true);
    out.adapter = Some(AdapterSpec {
        reduction,
        bottleneck: k,
    });
    out.version += 1;
    Ok(out)
}

#[cfg(test)]
mod tests;
