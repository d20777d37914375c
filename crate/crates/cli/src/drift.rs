use serde::Serialize;
use tdrift_core::corpus::SplitKind;
use tdrift_core::drift::{divergence_report, DivergenceReport};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::split::plans_for;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftEntry {
    pub kind: SplitKind,
    #[serde(flatten)]
    pub report: DivergenceReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DriftOutput {
    pub reports: Vec<DriftEntry>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl DriftOutput {
    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", DivergenceReport::CSV_HEADER);
        for e in &self.reports {
            let step = match e.kind {
                SplitKind::EvalFix => String::new(),
                SplitKind::EvalStreamStep { t } => t.to_string(),
            };
            out.push_str(&format!("{step},{}\n", e.report.csv_row()));
        }
        out
    }
}

pub fn cmd_drift(config: &ExperimentConfig) -> Result<DriftOutput, CliError> {
    let corpus = config.corpus.load()?;
    let mut out = DriftOutput::default();
    for plan in plans_for(&corpus, config.protocol)? {
        let report = divergence_report(&corpus, &plan, config.drift_smoothing)?;
        for (half, v) in [("old", report.jsd_old_xy), ("recent", report.jsd_recent_xy)] {
            if v.is_none() {
                out.warnings.push(format!(
                    "{:?}: no label occurs in both the {half} half and the test data; x|y divergence omitted",
                    plan.kind
                ));
            }
        }
        out.reports.push(DriftEntry { kind: plan.kind, report });
    }
    Ok(out)
}
