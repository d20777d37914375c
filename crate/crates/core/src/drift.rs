//! Vocabulary drift between document sets, measured with Jensen-Shannon
//! divergence (natural log, so scores lie in `[0, ln 2]`).

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{halve_training, Corpus, Document, SplitPlan};
use crate::error::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabDistribution {
    pub probs: Vec<f64>,
    pub smoothing: f64,
}

impl VocabDistribution {
    /// Wraps an explicit probability vector, checking it is a distribution.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        check_normalized(&probs)?;
        Ok(VocabDistribution {
            probs,
            smoothing: 0.0,
        })
    }
}

fn check_normalized(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Token-frequency distribution with additive smoothing `alpha`.
pub fn vocab_distribution<T: Borrow<Document>>(
    docs: &[T],
    vocab_size: usize,
    alpha: f64,
) -> Result<VocabDistribution> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smoothing must be finite and >= 0, got {alpha}"
        )));
    }
    if vocab_size == 0 {
        return Err(Error::InvalidArgument("vocabulary is empty".into()));
    }
    let mut counts = vec![0u64; vocab_size];
    for doc in docs {
        for (&token, &count) in &doc.borrow().token_counts {
            let slot = counts.get_mut(token).ok_or(Error::IdOutOfRange {
                kind: "token",
                id: token,
                size: vocab_size,
            })?;
            *slot += count as u64;
        }
    }
    let total: u64 = counts.iter().sum();
    let denom = total as f64 + alpha * vocab_size as f64;
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "no tokens and no smoothing: distribution undefined".into(),
        ));
    }
    Ok(VocabDistribution {
        probs: counts.iter().map(|&c| (c as f64 + alpha) / denom).collect(),
        smoothing: alpha,
    })
}

/// `½·KL(p‖m) + ½·KL(q‖m)` with `m = ½(p + q)`.
pub fn js_divergence(p: &VocabDistribution, q: &VocabDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} and {}",
            p.probs.len(),
            q.probs.len()
        )));
    }
    check_normalized(&p.probs)?;
    check_normalized(&q.probs)?;
    // Each coordinate's contribution is computed symmetrically in (a, b) so
    // that swapping the arguments yields the same bits.
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        total += 0.5 * (kl_term(a, m) + kl_term(b, m));
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

fn kl_term(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x * (x / m).ln()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDivergence {
    pub per_label: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Per-label divergence of the vocabulary of documents carrying each label.
/// Labels absent from either side are left out of the mean.
pub fn conditional_divergence<A: Borrow<Document>, B: Borrow<Document>>(
    split_a: &[A],
    split_b: &[B],
    vocab_size: usize,
    alpha: f64,
) -> Result<ConditionalDivergence> {
    let labels_of = |docs: &mut dyn Iterator<Item = &Document>| -> BTreeSet<usize> {
        docs.flat_map(|d| d.labels.iter().copied()).collect()
    };
    let in_a = labels_of(&mut split_a.iter().map(Borrow::borrow));
    let in_b = labels_of(&mut split_b.iter().map(Borrow::borrow));
    let shared: Vec<usize> = in_a.intersection(&in_b).copied().collect();
    if shared.is_empty() {
        return Err(Error::NoSharedLabels);
    }
    let mut per_label = BTreeMap::new();
    for label in shared {
        let a: Vec<&Document> = split_a
            .iter()
            .map(Borrow::borrow)
            .filter(|d| d.labels.contains(&label))
            .collect();
        let b: Vec<&Document> = split_b
            .iter()
            .map(Borrow::borrow)
            .filter(|d| d.labels.contains(&label))
            .collect();
        let pa = vocab_distribution(&a, vocab_size, alpha)?;
        let pb = vocab_distribution(&b, vocab_size, alpha)?;
        per_label.insert(label, js_divergence(&pa, &pb)?);
    }
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(ConditionalDivergence { per_label, mean })
}

/// Old/Recent halves of the training data, each compared with the test
/// data, marginally (`x`) and per label (`x|y`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub jsd_old_x: f64,
    pub jsd_recent_x: f64,
    /// `None` when no label occurs in both the half and the test data.
    pub jsd_old_xy: Option<f64>,
    pub jsd_recent_xy: Option<f64>,
}

impl DivergenceReport {
    pub const CSV_HEADER: &'static str = "old_x,recent_x,old_xy,recent_xy";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{},{}",
            self.jsd_old_x,
            self.jsd_recent_x,
            opt(self.jsd_old_xy),
            opt(self.jsd_recent_xy)
        )
    }
}

pub fn divergence_report(corpus: &Corpus, plan: &SplitPlan, alpha: f64) -> Result<DivergenceReport> {
    let train = plan.train_docs(corpus);
    let test = plan.test_docs(corpus);
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidSplit(
            "divergence report needs non-empty train and test buckets".into(),
        ));
    }
    let (old, recent) = halve_training(&train)?;
    let vocab = corpus.vocab_size();
    let test_dist = vocab_distribution(&test, vocab, alpha)?;
    let marginal = |half: &[&Document]| -> Result<f64> {
        js_divergence(&vocab_distribution(half, vocab, alpha)?, &test_dist)
    };
    let conditional = |half: &[&Document]| -> Result<Option<f64>> {
        match conditional_divergence(half, &test, vocab, alpha) {
            Ok(c) => Ok(Some(c.mean)),
            Err(Error::NoSharedLabels) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(DivergenceReport {
        jsd_old_x: marginal(old)?,
        jsd_recent_x: marginal(recent)?,
        jsd_old_xy: conditional(old)?,
        jsd_recent_xy: conditional(recent)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chronological_split, synth_drift_corpus, SynthParams};
    use proptest::prelude::*;

    fn doc(tokens: &[(usize, u32)], labels: &[usize]) -> Document {
        Document {
            id: String::new(),
            timestamp: 0,
            token_counts: tokens.iter().copied().collect(),
            labels: labels.iter().copied().collect(),
        }
    }

    fn dist(p: &[f64]) -> VocabDistribution {
        VocabDistribution::from_probs(p.to_vec()).unwrap()
    }

    /// Independent evaluation of the four KL terms with log2 converted back.
    fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
        let kl = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&m)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, mm)| a * (a.log2() - mm.log2()))
                .sum::<f64>()
        };
        (kl(p) + kl(q)) / 2.0 * std::f64::consts::LN_2
    }

    #[test]
    fn direct_counts() {
        let d = vocab_distribution(&[doc(&[(0, 2), (1, 2)], &[])], 2, 0.0).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
        let d = vocab_distribution::<Document>(&[], 4, 1.0).unwrap();
        assert_eq!(d.probs, vec![0.25; 4]);
        let d = vocab_distribution(&[doc(&[(0, 3)], &[]), doc(&[(1, 1)], &[])], 2, 0.0).unwrap();
        assert_eq!(d.probs, vec![0.75, 0.25]);
        assert!(vocab_distribution::<Document>(&[], 4, 0.0).is_err());
    }

    #[test]
    fn jsd_worked_values() {
        assert_eq!(js_divergence(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7])).unwrap(), 0.0);
        let max = js_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert!((max - std::f64::consts::LN_2).abs() < 1e-12);
        let v = js_divergence(&dist(&[0.5, 0.5]), &dist(&[0.9, 0.1])).unwrap();
        let oracle = jsd_oracle(&[0.5, 0.5], &[0.9, 0.1]);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.1018).abs() < 1e-4, "{v}");
    }

    #[test]
    fn jsd_errors() {
        assert!(matches!(
            js_divergence(&dist(&[1.0]), &dist(&[0.5, 0.5])),
            Err(Error::ShapeMismatch(_))
        ));
        let bad = VocabDistribution {
            probs: vec![0.5, 0.6],
            smoothing: 0.0,
        };
        assert!(matches!(
            js_divergence(&bad, &dist(&[0.5, 0.5])),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn conditional_rules() {
        let a = vec![doc(&[(0, 1), (1, 3)], &[0]), doc(&[(2, 2)], &[1, 2])];
        let same = conditional_divergence(&a, &a, 3, 0.0).unwrap();
        assert!(same.per_label.values().all(|&v| v == 0.0));
        assert_eq!(same.mean, 0.0);

        // Label 2 only on side a: excluded.
        let b = vec![doc(&[(0, 2), (1, 2)], &[0]), doc(&[(1, 1), (2, 1)], &[1])];
        let c = conditional_divergence(&a, &b, 3, 0.0).unwrap();
        assert_eq!(c.per_label.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        let l0 = jsd_oracle(&[0.25, 0.75, 0.0], &[0.5, 0.5, 0.0]);
        let l1 = jsd_oracle(&[0.0, 0.0, 1.0], &[0.0, 0.5, 0.5]);
        assert!((c.per_label[&0] - l0).abs() < 1e-12);
        assert!((c.per_label[&1] - l1).abs() < 1e-12);
        assert!((c.mean - (l0 + l1) / 2.0).abs() < 1e-12);

        let disjoint = vec![doc(&[(0, 1)], &[5])];
        assert!(matches!(
            conditional_divergence(&a, &disjoint, 3, 0.0),
            Err(Error::NoSharedLabels)
        ));
    }

    fn synth(drift_rate: f64, docs_per_period: usize) -> Corpus {
        synth_drift_corpus(&SynthParams {
            n_periods: 10,
            docs_per_period,
            vocab_size: 500,
            n_labels: 6,
            drift_rate,
            seed: 11,
        })
        .unwrap()
    }

    fn first_last_jsd(corpus: &Corpus) -> f64 {
        let periods = corpus.periods();
        let first = corpus.docs_at(periods[0]);
        let last = corpus.docs_at(*periods.last().unwrap());
        let v = corpus.vocab_size();
        js_divergence(
            &vocab_distribution(&first, v, 0.0).unwrap(),
            &vocab_distribution(&last, v, 0.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn stronger_drift_diverges_more() {
        let low = first_last_jsd(&synth(0.2, 200));
        let high = first_last_jsd(&synth(0.8, 200));
        assert!(high > low, "{high} <= {low}");
    }

    #[test]
    fn no_drift_vanishes_with_sample_size() {
        let small = first_last_jsd(&synth(0.0, 50));
        let large = first_last_jsd(&synth(0.0, 1000));
        assert!(large < small);
        assert!(large < 0.02, "{large}");
    }

    #[test]
    fn divergence_grows_with_period_distance() {
        let corpus = synth(0.9, 400);
        let periods = corpus.periods();
        let v = corpus.vocab_size();
        let base = vocab_distribution(&corpus.docs_at(periods[0]), v, 0.0).unwrap();
        let series: Vec<f64> = periods[1..]
            .iter()
            .map(|&p| {
                js_divergence(&base, &vocab_distribution(&corpus.docs_at(p), v, 0.0).unwrap())
                    .unwrap()
            })
            .collect();
        assert!(series.windows(2).all(|w| w[1] >= w[0]), "{series:?}");
    }

    #[test]
    fn report_orders_recent_below_old() {
        let corpus = synth(0.8, 200);
        let plan = chronological_split(&corpus, 8, 9).unwrap();
        let r = divergence_report(&corpus, &plan, 0.0).unwrap();
        assert!(r.jsd_recent_x < r.jsd_old_x, "{r:?}");
        for v in [
            r.jsd_old_x,
            r.jsd_recent_x,
            r.jsd_old_xy.unwrap(),
            r.jsd_recent_xy.unwrap(),
        ] {
            assert!((0.0..=std::f64::consts::LN_2).contains(&v));
        }

        let flat = synth(0.0, 1000);
        let plan = chronological_split(&flat, 8, 9).unwrap();
        let r = divergence_report(&flat, &plan, 0.0).unwrap();
        assert!((r.jsd_old_x - r.jsd_recent_x).abs() < 0.02, "{r:?}");
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_filter_map("zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded((p, q) in (1usize..8).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            let (p, q) = (dist(&p), dist(&q));
            let pq = js_divergence(&p, &q).unwrap();
            let qp = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(pq.to_bits(), qp.to_bits());
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&pq));
            prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn conditional_mean_within_range(seed in 0u64..50) {
            let corpus = synth_drift_corpus(&SynthParams {
                n_periods: 2, docs_per_period: 30, vocab_size: 40, n_labels: 4,
                drift_rate: 1.0, seed,
            }).unwrap();
            let a = corpus.docs_at(1);
            let b = corpus.docs_at(2);
            let c = conditional_divergence(&a, &b, 40, 0.0).unwrap();
            let lo = c.per_label.values().copied().fold(f64::INFINITY, f64::min);
            let hi = c.per_label.values().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c.mean >= lo - 1e-15 && c.mean <= hi + 1e-15);
        }
    }
}
