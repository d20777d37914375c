use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalOptions, Scores};
use crate::corpus::{period_groups, stream_splits, Corpus, Document, Period, SplitPlan};
use crate::error::{Error, Result};
use crate::method::{MethodSpec, Regime};
use crate::model::{ModelConfig, ModelState, Nonlinearity};
use crate::rng::derive_seed;
use crate::train::{baseline_on, ift_on, EpochLog, IftChain, TrainConfig};

pub const RESULTS_CSV_HEADER: &str = "method,seed,split,period,macro_f1,micro_f1,mrp";

/// Split ids used in records.
pub const SPLIT_TEST: &str = "test";
pub const SPLIT_TEST_PERIOD: &str = "test-period";
pub const SPLIT_STREAM: &str = "stream";

/// Architecture settings; vocabulary and label counts come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub use_label_attention: bool,
    pub nonlinearity: Nonlinearity,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1);
        ModelSettings {
            embed_dim: c.embed_dim,
            hidden_dim: c.hidden_dim,
            use_label_attention: c.use_label_attention,
            nonlinearity: c.nonlinearity,
        }
    }
}

impl ModelSettings {
    pub fn config_for(&self, corpus: &Corpus, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: corpus.vocab_size(),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            n_labels: corpus.n_labels(),
            use_label_attention: self.use_label_attention,
            nonlinearity: self.nonlinearity,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub model: ModelSettings,
    /// Training settings shared by all methods. `warmup_epochs` applies to
    /// the baselines; incremental methods use `ift_warmup_epochs`.
    pub train: TrainConfig,
    pub ift_warmup_epochs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            ift_warmup_epochs: TrainConfig::incremental().warmup_epochs,
        }
    }
}

/// Seeds derived from a run seed: model init, shuffling, strategy.
pub fn cell_seeds(seed: u64) -> (u64, u64, u64) {
    (derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3))
}

impl ProtocolConfig {
    pub fn train_config(&self, method: &MethodSpec, seed: u64) -> TrainConfig {
        let mut c = self.train.clone();
        c.shuffle_seed = cell_seeds(seed).1;
        if method.regime() == Regime::Incremental {
            c.warmup_epochs = self.ift_warmup_epochs;
        }
        c
    }

    pub fn validate(&self, methods: &[MethodSpec]) -> Result<()> {
        self.train.validate()?;
        TrainConfig {
            warmup_epochs: self.ift_warmup_epochs,
            ..self.train.clone()
        }
        .validate()?;
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be >= 1".into()));
        }
        methods.iter().try_for_each(MethodSpec::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub seed: u64,
    pub split: String,
    /// The tested period; empty for a whole multi-period test bucket.
    pub period: Option<Period>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub mrp: f64,
}

impl MetricRecord {
    fn new(method: &str, seed: u64, split: &str, period: Option<Period>, s: Scores) -> Self {
        MetricRecord {
            method: method.into(),
            seed,
            split: split.into(),
            period,
            macro_f1: s.macro_f1,
            micro_f1: s.micro_f1,
            mrp: s.mrp,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.split,
            self.period.map(|p| p.to_string()).unwrap_or_default(),
            self.macro_f1,
            self.micro_f1,
            self.mrp
        )
    }

    /// Records that enter the aggregates (per-period breakdowns do not).
    pub fn is_primary(&self) -> bool {
        self.split != SPLIT_TEST_PERIOD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for one value.
    pub std: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MetricSummary {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MetricSummary { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n: usize,
    pub macro_f1: MetricSummary,
    pub micro_f1: MetricSummary,
    pub mrp: MetricSummary,
}

/// Mean and standard deviation per method over its primary records, methods
/// in order of first appearance.
pub fn aggregate(records: &[MetricRecord]) -> Vec<Aggregate> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records.iter().filter(|r| r.is_primary()) {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let rows: Vec<&MetricRecord> = records
                .iter()
                .filter(|r| r.is_primary() && r.method == m)
                .collect();
            let col = |f: fn(&MetricRecord) -> f64| -> MetricSummary {
                MetricSummary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            Aggregate {
                method: m.into(),
                n: rows.len(),
                macro_f1: col(|r| r.macro_f1),
                micro_f1: col(|r| r.micro_f1),
                mrp: col(|r| r.mrp),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl ResultTable {
    pub fn from_records(records: Vec<MetricRecord>) -> Self {
        let aggregates = aggregate(&records);
        ResultTable { records, aggregates }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(RESULTS_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }
}

/// One line of a cell's training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLogEntry {
    /// Training period (incremental) or stream step (baselines).
    pub period: Period,
    #[serde(flatten)]
    pub epoch: EpochLog,
}

/// Everything one (method, seed) cell produces.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub method: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    /// Best model per training period or stream step.
    pub checkpoints: Vec<(Period, ModelState)>,
    pub log: Vec<CellLogEntry>,
}

impl CellOutput {
    fn new(method: &MethodSpec, seed: u64) -> Self {
        CellOutput {
            method: method.name().into(),
            seed,
            records: Vec::new(),
            checkpoints: Vec::new(),
            log: Vec::new(),
        }
    }

    fn push_log(&mut self, period: Period, log: &[EpochLog]) {
        self.log.extend(log.iter().map(|e| CellLogEntry {
            period,
            epoch: e.clone(),
        }));
    }
}

/// Scores a period on its own; `None` when no document has a label to rank.
fn score_period(model: &ModelState, docs: &[&Document], options: EvalOptions) -> Result<Option<Scores>> {
    match evaluate(model, docs, options) {
        Ok(s) => Ok(Some(s)),
        Err(Error::NoPositiveDocuments) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains `method` on the fixed split and scores the whole test bucket plus
/// every test period separately.
pub fn run_fix_cell(
    corpus: &Corpus,
    plan: &SplitPlan,
    method: &MethodSpec,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<CellOutput> {
    let (model_seed, _, strategy_seed) = cell_seeds(seed);
    let model_config = config.model.config_for(corpus, model_seed);
    let train_config = config.train_config(method, seed);
    let train = plan.train_docs(corpus);
    let val = plan.val_docs(corpus);
    let mut out = CellOutput::new(method, seed);
    let model = match method.regime() {
        Regime::Baseline(variant) => {
            let trained = baseline_on(&train, &val, variant, &model_config, &train_config)?;
            let last = *plan.train_periods.last().expect("non-empty train bucket");
            out.push_log(last, &trained.log);
            out.checkpoints.push((last, trained.model.clone()));
            trained.model
        }
        Regime::Incremental => {
            let outcome = ift_on(
                &train,
                &val,
                &model_config,
                &train_config,
                method.strategy(strategy_seed),
                &method.expansion(&model_config),
            )?;
            for p in &outcome.periods {
                out.push_log(p.period, &p.trained.log);
                out.checkpoints.push((p.period, p.trained.model.clone()));
            }
            outcome.trained.model
        }
    };
    let options = train_config.eval;
    let scores = evaluate(&model, &plan.test_docs(corpus), options)?;
    out.records
        .push(MetricRecord::new(method.name(), seed, SPLIT_TEST, None, scores));
    for &p in &plan.test_periods {
        if let Some(s) = score_period(&model, &corpus.docs_at(p), options)? {
            out.records
                .push(MetricRecord::new(method.name(), seed, SPLIT_TEST_PERIOD, Some(p), s));
        }
    }
    Ok(out)
}

/// Runs `method` over consecutive stream plans. Baselines retrain from
/// scratch at every step; incremental methods extend one chain by exactly
/// one period per step after covering the periods of the first step.
pub fn run_stream_cell(
    corpus: &Corpus,
    plans: &[SplitPlan],
    method: &MethodSpec,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<CellOutput> {
    let (model_seed, _, strategy_seed) = cell_seeds(seed);
    let model_config = config.model.config_for(corpus, model_seed);
    let train_config = config.train_config(method, seed);
    let options = train_config.eval;
    let mut out = CellOutput::new(method, seed);
    let mut chain = match method.regime() {
        Regime::Incremental => Some(IftChain::new(
            model_config.clone(),
            train_config.clone(),
            method.strategy(strategy_seed),
            method.expansion(&model_config),
        )?),
        Regime::Baseline(_) => None,
    };
    for (step, plan) in plans.iter().enumerate() {
        let t = *plan.val_periods.last().expect("stream plan validates on one period");
        let val = plan.val_docs(corpus);
        let model = match (&mut chain, method.regime()) {
            (Some(chain), _) => {
                let groups = if step == 0 {
                    period_groups(&plan.train_docs(corpus), train_config.min_docs_per_period)
                } else {
                    period_groups(&corpus.docs_at(t), 1)
                };
                for group in groups {
                    let r = chain.fit_group(group, &val)?;
                    out.log.extend(r.trained.log.iter().map(|e| CellLogEntry {
                        period: r.period,
                        epoch: e.clone(),
                    }));
                    out.checkpoints.push((r.period, r.trained.model.clone()));
                }
                chain.model().expect("chain trained").clone()
            }
            (None, Regime::Baseline(variant)) => {
                let trained = baseline_on(&plan.train_docs(corpus), &val, variant, &model_config, &train_config)?;
                out.push_log(t, &trained.log);
                out.checkpoints.push((t, trained.model.clone()));
                trained.model
            }
            (None, Regime::Incremental) => unreachable!("incremental methods own a chain"),
        };
        let tested = *plan.test_periods.first().expect("stream plan tests one period");
        let scores = evaluate(&model, &plan.test_docs(corpus), options)?;
        out.records
            .push(MetricRecord::new(method.name(), seed, SPLIT_STREAM, Some(tested), scores));
    }
    Ok(out)
}

/// Every method × seed on one fixed split.
pub fn run_eval_fix(
    corpus: &Corpus,
    plan: &SplitPlan,
    methods: &[MethodSpec],
    config: &ProtocolConfig,
    seeds: &[u64],
) -> Result<ResultTable> {
    config.validate(methods)?;
    let mut records = Vec::new();
    for method in methods {
        for &seed in seeds {
            records.extend(run_fix_cell(corpus, plan, method, config, seed)?.records);
        }
    }
    Ok(ResultTable::from_records(records))
}

/// Every method × seed over the stream plans starting at `start`.
pub fn run_eval_stream(
    corpus: &Corpus,
    start: Period,
    methods: &[MethodSpec],
    config: &ProtocolConfig,
    seeds: &[u64],
) -> Result<ResultTable> {
    config.validate(methods)?;
    let plans = stream_splits(corpus, start)?;
    let mut records = Vec::new();
    for method in methods {
        for &seed in seeds {
            records.extend(run_stream_cell(corpus, &plans, method, config, seed)?.records);
        }
    }
    Ok(ResultTable::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chronological_split, synth_drift_corpus, SynthParams};

    fn rec(method: &str, seed: u64, v: f64) -> MetricRecord {
        MetricRecord {
            method: method.into(),
            seed,
            split: SPLIT_TEST.into(),
            period: None,
            macro_f1: v,
            micro_f1: v / 2.0,
            mrp: 1.0 - v,
        }
    }

    #[test]
    fn summary_statistics() {
        let s = MetricSummary::of(&[0.2, 0.4, 0.6]);
        assert!((s.mean - 0.4).abs() < 1e-15);
        assert!((s.std - 0.2).abs() < 1e-15);
        assert_eq!(MetricSummary::of(&[0.7, 0.7]).std, 0.0);
        assert_eq!(MetricSummary::of(&[0.3]).std, 0.0);
    }

    #[test]
    fn aggregates_group_by_method_in_order() {
        let mut records = vec![rec("b", 0, 0.5), rec("a", 0, 0.1), rec("b", 1, 0.7)];
        records.push(MetricRecord {
            split: SPLIT_TEST_PERIOD.into(),
            period: Some(3),
            ..rec("a", 0, 0.9)
        });
        let table = ResultTable::from_records(records);
        let names: Vec<&str> = table.aggregates.iter().map(|a| a.method.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(table.aggregates[0].n, 2);
        assert!((table.aggregates[0].macro_f1.mean - 0.6).abs() < 1e-15);
        assert_eq!(table.aggregates[1].n, 1);
        assert_eq!(table.aggregates[1].macro_f1.mean, 0.1);
    }

    #[test]
    fn csv_layout() {
        let table = ResultTable::from_records(vec![
            rec("ift", 3, 0.5),
            MetricRecord {
                split: SPLIT_STREAM.into(),
                period: Some(4),
                ..rec("er", 1, 0.25)
            },
        ]);
        assert_eq!(
            table.to_csv(),
            "method,seed,split,period,macro_f1,micro_f1,mrp\n\
             ift,3,test,,0.5,0.25,0.5\n\
             er,1,stream,4,0.25,0.125,0.75\n"
        );
    }

    fn tiny() -> (Corpus, ProtocolConfig) {
        let corpus = synth_drift_corpus(&SynthParams {
            n_periods: 4,
            docs_per_period: 24,
            vocab_size: 40,
            n_labels: 3,
            drift_rate: 0.5,
            seed: 1,
        })
        .unwrap();
        let mut config = ProtocolConfig::default();
        config.model.embed_dim = 4;
        config.model.hidden_dim = 4;
        config.train.max_epochs = 4;
        config.train.batch_size = 8;
        config.ift_warmup_epochs = 1;
        (corpus, config)
    }

    #[test]
    fn eval_fix_counts() {
        let (corpus, config) = tiny();
        let plan = chronological_split(&corpus, 2, 3).unwrap();
        let methods = [MethodSpec::BaselineFull, MethodSpec::Ift];
        let table = run_eval_fix(&corpus, &plan, &methods, &config, &[0, 1, 2]).unwrap();
        let primary = table.records.iter().filter(|r| r.is_primary()).count();
        assert_eq!(primary, 6);
        assert_eq!(table.records.len(), 6 * 2);
        assert_eq!(table.aggregates.len(), 2);
        for r in &table.records {
            for v in [r.macro_f1, r.micro_f1, r.mrp] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn stream_cells_follow_the_regime() {
        let (corpus, config) = tiny();
        let plans = stream_splits(&corpus, 2).unwrap();
        let ift = run_stream_cell(&corpus, &plans, &MethodSpec::Ift, &config, 5).unwrap();
        let periods: Vec<Period> = ift.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(periods, [1, 2, 3]);
        let tested: Vec<Option<Period>> = ift.records.iter().map(|r| r.period).collect();
        assert_eq!(tested, [Some(3), Some(4)]);
        let base = run_stream_cell(&corpus, &plans, &MethodSpec::BaselineFull, &config, 5).unwrap();
        let steps: Vec<Period> = base.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(steps, [2, 3]);
        assert_eq!(base.records.len(), 2);
    }
}
