use std::collections::BTreeMap;

use serde::Serialize;
use tdrift_core::corpus::{chronological_split, stream_splits, Corpus, Document, Period, SplitKind, SplitPlan};

use crate::config::{ExperimentConfig, ProtocolSpec};
use crate::error::CliError;

/// The plans a protocol evaluates: one for a fixed split, one per step for
/// a stream.
pub fn plans_for(corpus: &Corpus, protocol: ProtocolSpec) -> Result<Vec<SplitPlan>, CliError> {
    Ok(match protocol {
        ProtocolSpec::EvalFix { t1, t2 } => vec![chronological_split(corpus, t1, t2)?],
        ProtocolSpec::EvalStream { start } => stream_splits(corpus, start)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketSummary {
    pub docs: usize,
    pub periods: BTreeMap<Period, usize>,
}

impl BucketSummary {
    fn of(docs: &[&Document]) -> Self {
        let mut periods = BTreeMap::new();
        for d in docs {
            *periods.entry(d.timestamp).or_insert(0) += 1;
        }
        BucketSummary {
            docs: docs.len(),
            periods,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanSummary {
    pub kind: SplitKind,
    pub train: BucketSummary,
    pub val: BucketSummary,
    pub test: BucketSummary,
}

pub fn cmd_split(config: &ExperimentConfig) -> Result<Vec<PlanSummary>, CliError> {
    let corpus = config.corpus.load()?;
    Ok(plans_for(&corpus, config.protocol)?
        .iter()
        .map(|plan| PlanSummary {
            kind: plan.kind,
            train: BucketSummary::of(&plan.train_docs(&corpus)),
            val: BucketSummary::of(&plan.val_docs(&corpus)),
            test: BucketSummary::of(&plan.test_docs(&corpus)),
        })
        .collect())
}
