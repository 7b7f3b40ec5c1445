//! Evaluation metrics: leave-one-out consensus VQA accuracy and Average
//! Normalized Levenshtein Similarity, plus the underlying edit distance.
//!
//! Both item metrics normalize strings the same way: lowercase, trim, and
//! collapse internal whitespace. Full official answer preprocessing
//! (article stripping, punctuation maps) is deliberately out of scope.

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimal number of single-character insertions, deletions, and
/// substitutions transforming `a` into `b`. Two-row dynamic program over
/// unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// ANLS item score: the best per-reference normalized similarity, floored
/// to zero below `tau`.
pub fn anls_item(prediction: &str, references: &[String], tau: f64) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract(
            "anls_item needs at least one reference".into(),
        ));
    }
    let pred = normalize_answer(prediction);
    let mut best = 0.0f64;
    for r in references {
        let r = normalize_answer(r);
        let s = if pred.is_empty() && r.is_empty() {
            1.0
        } else {
            let denom = pred.chars().count().max(r.chars().count()) as f64;
            1.0 - levenshtein(&pred, &r) as f64 / denom
        };
        let s = if s >= tau { s } else { 0.0 };
        best = best.max(s);
    }
    Ok(best)
}

/// Leave-one-out consensus accuracy over exactly 10 reference answers:
/// the mean over annotators of `min(1, matches-among-the-other-9 / 3)`.
pub fn vqa_accuracy_item(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.len() != 10 {
        return Err(Error::Contract(format!(
            "vqa_accuracy_item needs exactly 10 answers, got {}",
            answers.len()
        )));
    }
    let pred = normalize_answer(prediction);
    let norm: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
    let mut total = 0.0;
    for i in 0..10 {
        let matches = norm
            .iter()
            .enumerate()
            .filter(|(j, a)| *j != i && **a == pred)
            .count();
        total += (matches as f64 / 3.0).min(1.0);
    }
    Ok(total / 10.0)
}

/// One model prediction joined to a dataset item by question id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemScore {
    pub question_id: String,
    pub accuracy: f64,
    pub anls: f64,
}

/// Aggregate report over a prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub empty: bool,
    pub mean_accuracy: f64,
    pub mean_anls: f64,
    pub items: Vec<ItemScore>,
}

/// ANLS floor threshold used throughout.
pub const ANLS_TAU: f64 = 0.5;

/// Score predictions against a bare list of QA items.
///
/// Per-item scoring may run in parallel; items are merged back in input
/// order and the means are reduced sequentially, so the report bytes do not
/// depend on the thread count.
pub fn evaluate_items(
    predictions: &[Prediction],
    items: &[crate::corpus::QAItem],
) -> Result<EvalReport> {
    let by_qid: std::collections::BTreeMap<&str, &crate::corpus::QAItem> = items
        .iter()
        .map(|i| (i.question_id.as_str(), i))
        .collect();
    let score_one = |p: &Prediction| -> Result<ItemScore> {
        let item = by_qid.get(p.question_id.as_str()).ok_or_else(|| {
            Error::Integrity(format!("prediction for unknown question_id {}", p.question_id))
        })?;
        Ok(ItemScore {
            question_id: p.question_id.clone(),
            accuracy: vqa_accuracy_item(&p.answer, &item.answers)?,
            anls: anls_item(&p.answer, &item.answers, ANLS_TAU)?,
        })
    };

    #[cfg(feature = "parallel")]
    let items: Result<Vec<ItemScore>> = predictions.par_iter().map(score_one).collect();
    #[cfg(not(feature = "parallel"))]
    let items: Result<Vec<ItemScore>> = predictions.iter().map(score_one).collect();
    let items = items?;

    let n = items.len();
    let (mut acc, mut anls) = (0.0, 0.0);
    for s in &items {
        acc += s.accuracy;
        anls += s.anls;
    }
    Ok(EvalReport {
        n_items: n,
        empty: n == 0,
        mean_accuracy: if n == 0 { 0.0 } else { acc / n as f64 },
        mean_anls: if n == 0 { 0.0 } else { anls / n as f64 },
        items,
    })
}

/// Score every prediction against its dataset item.
pub fn evaluate(predictions: &[Prediction], dataset: &Dataset) -> Result<EvalReport> {
    evaluate_items(predictions, &dataset.items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-table DP oracle, recursion-free but structurally distinct from
    /// the two-row implementation.
    fn dp_table_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            t[i][0] = i;
        }
        for j in 0..=b.len() {
            t[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                t[i][j] = (t[i - 1][j - 1] + cost)
                    .min(t[i - 1][j] + 1)
                    .min(t[i][j - 1] + 1);
            }
        }
        t[a.len()][b.len()]
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("kitten", "sitting"), dp_table_oracle("kitten", "sitting"));
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn levenshtein_matches_oracle_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
                let len = rng.gen_range(0..10);
                (0..len).map(|_| (b'a' + rng.gen_range(0..4)) as char).collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(levenshtein(&a, &b), dp_table_oracle(&a, &b), "{a:?} {b:?}");
        }
    }

    fn refs(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn anls_exact_match() {
        assert_eq!(anls_item("stop", &refs(&["stop"]), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn anls_threshold_floors_to_zero() {
        // levenshtein("hello","hop") = 4, s = 1 - 4/5 = 0.2 < 0.5.
        assert_eq!(dp_table_oracle("hello", "hop"), 4);
        assert_eq!(anls_item("hello", &refs(&["hop"]), 0.5).unwrap(), 0.0);
        // levenshtein("hello","help") = 2 by the DP oracle, so that pair
        // sits above the threshold: s = 1 - 2/5 = 0.6.
        assert_eq!(dp_table_oracle("hello", "help"), 2);
        assert_eq!(anls_item("hello", &refs(&["help"]), 0.5).unwrap(), 0.6);
    }

    #[test]
    fn anls_max_over_references() {
        assert_eq!(
            anls_item("stop sign", &refs(&["go", "stop sign"]), 0.5).unwrap(),
            1.0
        );
    }

    #[test]
    fn anls_empty_reference_list_errors() {
        assert!(matches!(
            anls_item("x", &[], 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn anls_both_empty_scores_one() {
        assert_eq!(anls_item("  ", &refs(&[""]), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn vqa_accuracy_saturation_and_zero() {
        let all = refs(&["stop"; 10]);
        assert_eq!(vqa_accuracy_item("stop", &all).unwrap(), 1.0);
        assert_eq!(vqa_accuracy_item("go", &all).unwrap(), 0.0);
    }

    #[test]
    fn vqa_accuracy_three_of_ten() {
        // Enumerating the 10 leave-one-out subsets: the 3 matching
        // annotators each see 2 other matches (2/3), the 7 others see 3
        // (capped at 1): (3*(2/3) + 7*1)/10 = 0.9.
        let mut answers = refs(&["stop", "stop", "stop"]);
        answers.extend(refs(&["go", "left", "right", "up", "down", "red", "blue"]));
        assert_eq!(vqa_accuracy_item("stop", &answers).unwrap(), 0.9);
    }

    #[test]
    fn vqa_accuracy_wrong_count_errors() {
        assert!(matches!(
            vqa_accuracy_item("x", &refs(&["a", "b"])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("  Stop   Sign "), "stop sign");
        assert_eq!(
            vqa_accuracy_item("  STOP ", &refs(&["stop"; 10])).unwrap(),
            1.0
        );
        assert_eq!(
            anls_item("StOp\tsign", &refs(&["stop  sign"]), 0.5).unwrap(),
            1.0
        );
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(
            a in "[a-c]{0,8}", b in "[a-c]{0,8}", c in "[a-c]{0,8}"
        ) {
            let dab = levenshtein(&a, &b);
            let dba = levenshtein(&b, &a);
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(dab == 0, a == b);
            let dac = levenshtein(&a, &c);
            let dcb = levenshtein(&c, &b);
            prop_assert!(dab <= dac + dcb);
        }

        #[test]
        fn anls_monotone_in_tau(p in "[a-c ]{0,6}", r in "[a-c ]{0,6}") {
            let hi = anls_item(&p, &refs(&[&r]), 0.7).unwrap();
            let lo = anls_item(&p, &refs(&[&r]), 0.3).unwrap();
            prop_assert!(lo >= hi);
            prop_assert!((0.0..=1.0).contains(&lo));
            prop_assert!((0.0..=1.0).contains(&hi));
        }

        #[test]
        fn item_scores_case_and_whitespace_invariant(w in "[a-z]{1,6}") {
            let shouted = format!("  {} ", w.to_uppercase());
            let answers = refs(&[w.as_str(); 10]);
            prop_assert_eq!(
                vqa_accuracy_item(&shouted, &answers).unwrap(),
                vqa_accuracy_item(&w, &answers).unwrap()
            );
            prop_assert_eq!(
                anls_item(&shouted, &answers, 0.5).unwrap(),
                anls_item(&w, &answers, 0.5).unwrap()
            );
        }
    }
}
