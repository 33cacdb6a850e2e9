//! Leave-one-out ranking evaluation against sampled negatives.
//!
//! For each user the held-out item is ranked among `num_negatives` items
//! the user never interacted with. Ties count against the held-out item.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentedSequence;
use crate::dataset::{pad_truncate, SplitCorpus};
use crate::encoder::{last_hidden, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::dot;

pub const DEFAULT_NEGATIVES: usize = 100;
/// Cut-off for Recall and NDCG.
pub const TOP_K: usize = 5;

/// Scores candidate items given a user's (chronological) context.
pub trait Scorer {
    /// `candidates[0]` is the held-out item during evaluation.
    fn score(&self, context: &[u32], candidates: &[u32]) -> Result<Vec<f64>>;
}

impl Scorer for ModelParams {
    fn score(&self, context: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        let window = pad_truncate(context, self.config().max_len);
        let hidden = last_hidden(&window, self)?;
        let vocab = self.config().vocab_size;
        candidates
            .iter()
            .map(|&c| {
                if c == 0 || c as usize > vocab {
                    Err(Error::ItemOutOfRange { id: c, vocab_size: vocab })
                } else {
                    Ok(dot(&hidden, self.item_embeddings.row(c as usize)))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedCase {
    pub user_id: u32,
    /// 1-based rank of the held-out item among all candidates.
    pub rank: usize,
    /// Length of the user's training sequence before augmentation.
    pub original_seq_len: usize,
}

/// `count` distinct items drawn uniformly from `1..=vocab_size`, avoiding
/// everything in `history` and `ground_truth`.
pub fn sample_negatives<R: Rng + ?Sized>(history: &[u32], ground_truth: u32, vocab_size: usize, count: usize, rng: &mut R) -> Result<Vec<u32>> {
    if vocab_size <= count + history.len() {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} items cannot supply {count} negatives for a history of {}",
            history.len()
        )));
    }
    let mut seen: HashSet<u32> = history.iter().copied().collect();
    seen.insert(ground_truth);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let candidate = rng.random_range(1..=vocab_size as u32);
        if seen.insert(candidate) {
            out.push(candidate);
        }
    }
    Ok(out)
}

/// `1 + |{ i > 0 : scores[i] >= scores[0] }|`. A non-finite truth score ranks last.
pub fn rank_of(scores: &[f64]) -> usize {
    let truth = scores[0];
    if truth.is_nan() {
        return scores.len();
    }
    1 + scores[1..].iter().filter(|&&s| s >= truth || s.is_nan()).count()
}

pub fn rank_candidates<S: Scorer + ?Sized>(scorer: &S, context: &[u32], ground_truth: u32, negatives: &[u32]) -> Result<usize> {
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(ground_truth);
    candidates.extend_from_slice(negatives);
    let scores = scorer.score(context, &candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Shape(format!("{} scores for {} candidates", scores.len(), candidates.len())));
    }
    Ok(rank_of(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub cases: usize,
    pub recall_at_5: f64,
    pub ndcg_at_5: f64,
    pub mrr: f64,
}

impl Metrics {
    fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Metrics::default();
        for rank in ranks {
            m.cases += 1;
            if rank <= TOP_K {
                m.recall_at_5 += 1.0;
                m.ndcg_at_5 += 1.0 / ((rank + 1) as f64).log2();
            }
            m.mrr += 1.0 / rank as f64;
        }
        if m.cases > 0 {
            let n = m.cases as f64;
            m.recall_at_5 /= n;
            m.ndcg_at_5 /= n;
            m.mrr /= n;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LengthBucket {
    /// 1 to 7 items
    Short,
    /// 8 to 19 items
    Medium,
    /// 20 or more
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long];

    pub fn of(len: usize) -> Self {
        match len {
            0..=7 => LengthBucket::Short,
            8..=19 => LengthBucket::Medium,
            _ => LengthBucket::Long,
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthBucket::Short => "1-7",
            LengthBucket::Medium => "8-19",
            LengthBucket::Long => "20+",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub buckets: BTreeMap<LengthBucket, Metrics>,
    /// Metrics per original training length; the case counts form the
    /// length histogram.
    pub per_length: BTreeMap<usize, Metrics>,
}

pub fn compute_metrics(cases: &[RankedCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::NoCases);
    }
    let overall = Metrics::from_ranks(cases.iter().map(|c| c.rank));
    let buckets = LengthBucket::ALL
        .into_iter()
        .map(|b| {
            let ranks = cases.iter().filter(|c| LengthBucket::of(c.original_seq_len) == b).map(|c| c.rank);
            (b, Metrics::from_ranks(ranks))
        })
        .collect();
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in cases {
        by_len.entry(c.original_seq_len).or_default().push(c.rank);
    }
    let per_length = by_len.into_iter().map(|(len, ranks)| (len, Metrics::from_ranks(ranks))).collect();
    Ok(EvalReport {
        overall,
        buckets,
        per_length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub num_negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_negatives: DEFAULT_NEGATIVES,
            seed: 2021,
        }
    }
}

/// Negatives for one user. Each user has its own stream, so results do not
/// depend on evaluation order.
pub fn user_negatives(corpus: &SplitCorpus, idx: usize, split: EvalSplit, vocab_size: usize, config: &EvalConfig) -> Result<Vec<u32>> {
    let salt = match split {
        EvalSplit::Valid => 0x0056_414c_4944_u64,
        EvalSplit::Test => 0x5445_5354u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ salt);
    rng.set_stream(idx as u64);
    let truth = match split {
        EvalSplit::Valid => corpus.valid_target[idx],
        EvalSplit::Test => corpus.test_target[idx],
    };
    sample_negatives(&corpus.full_sequence(idx), truth, vocab_size, config.num_negatives, &mut rng)
}

/// Ranks every user's held-out item.
///
/// The context is the training sequence (or its augmented form, when
/// `contexts` is given); for the test split the validation item is appended.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    split: EvalSplit,
    corpus: &SplitCorpus,
    contexts: Option<&[AugmentedSequence]>,
    vocab_size: usize,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if let Some(ctx) = contexts {
        if ctx.len() != corpus.len() {
            return Err(Error::Shape(format!("{} contexts for {} users", ctx.len(), corpus.len())));
        }
    }
    let mut cases = Vec::with_capacity(corpus.len());
    for idx in 0..corpus.len() {
        let train = &corpus.train[idx];
        let mut context = match contexts {
            Some(ctx) => {
                if ctx[idx].user_id != train.user_id || ctx[idx].original() != train.items.as_slice() {
                    return Err(Error::Shape(format!("context {idx} does not match user {}", train.user_id)));
                }
                ctx[idx].items.clone()
            }
            None => train.items.clone(),
        };
        let truth = match split {
            EvalSplit::Valid => corpus.valid_target[idx],
            EvalSplit::Test => {
                context.push(corpus.valid_target[idx]);
                corpus.test_target[idx]
            }
        };
        let negatives = user_negatives(corpus, idx, split, vocab_size, config)?;
        cases.push(RankedCase {
            user_id: train.user_id,
            rank: rank_candidates(scorer, &context, truth, &negatives)?,
            original_seq_len: train.items.len(),
        });
    }
    compute_metrics(&cases)
}

/// `metric,value,bucket` rows for the overall report and each length bucket.
pub fn write_report_csv<W: Write>(report: &EvalReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "metric,value,bucket")?;
    let mut rows = |m: &Metrics, bucket: &str| -> std::io::Result<()> {
        writeln!(w, "recall@5,{},{bucket}", m.recall_at_5)?;
        writeln!(w, "ndcg@5,{},{bucket}", m.ndcg_at_5)?;
        writeln!(w, "mrr,{},{bucket}", m.mrr)?;
        writeln!(w, "cases,{},{bucket}", m.cases)
    };
    rows(&report.overall, "all")?;
    for (bucket, m) in &report.buckets {
        rows(m, &bucket.to_string())?;
    }
    Ok(())
}

/// `length,case_count,recall@5` per original training length.
pub fn write_per_length_csv<W: Write>(report: &EvalReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "length,case_count,recall@5")?;
    for (len, m) in &report.per_length {
        writeln!(w, "{len},{},{}", m.cases, m.recall_at_5)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_leave_one_out, Sequence};
    use crate::encoder::ModelConfig;

    fn case(rank: usize, len: usize) -> RankedCase {
        RankedCase {
            user_id: 0,
            rank,
            original_seq_len: len,
        }
    }

    #[test]
    fn single_rank_one() {
        let r = compute_metrics(&[case(1, 3)]).unwrap().overall;
        assert_eq!((r.recall_at_5, r.ndcg_at_5, r.mrr), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_rank_three() {
        let r = compute_metrics(&[case(3, 3)]).unwrap().overall;
        assert_eq!(r.recall_at_5, 1.0);
        assert!((r.ndcg_at_5 - 0.5).abs() < 1e-15);
        assert!((r.mrr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ranks_one_and_six() {
        let r = compute_metrics(&[case(1, 3), case(6, 3)]).unwrap().overall;
        assert_eq!(r.recall_at_5, 0.5);
        assert_eq!(r.ndcg_at_5, 0.5);
        assert!((r.mrr - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn empty_cases_error() {
        assert!(matches!(compute_metrics(&[]), Err(Error::NoCases)));
    }

    #[test]
    fn buckets_partition_cases() {
        let cases = [case(1, 1), case(2, 7), case(3, 8), case(9, 19), case(4, 20), case(50, 300)];
        let r = compute_metrics(&cases).unwrap();
        let counts: Vec<usize> = r.buckets.values().map(|m| m.cases).collect();
        assert_eq!(counts, vec![2, 2, 2]);
        assert_eq!(r.per_length.len(), 6);
        assert_eq!(r.buckets[&LengthBucket::Medium].recall_at_5, 0.5);
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_of(&[2.0, 1.0, 0.5, -3.0]), 1);
        assert_eq!(rank_of(&[0.0; 101]), 101);
        assert_eq!(rank_of(&[1.0, 2.0, 1.0, 0.0]), 3);
        assert_eq!(rank_of(&[f64::NAN, 1.0, 2.0]), 3);
    }

    #[test]
    fn toy_model_rank_matches_hand_sorted_dot_products() {
        // zero layers, hidden = e[last] + pos[last] = (1, 0)
        let mut p = ModelParams::zeros(ModelConfig::new(5, 2, 2, 0, 1)).unwrap();
        let table = [[0.0, 0.0], [1.0, 0.0], [0.2, 5.0], [-1.0, 0.0], [0.7, 0.0], [3.0, 0.0]];
        for (r, row) in table.iter().enumerate() {
            p.item_embeddings.row_mut(r).copy_from_slice(row);
        }
        p.item_embeddings.row_mut(1).copy_from_slice(&[0.0, 0.0]);
        p.position_embeddings.row_mut(1).copy_from_slice(&[1.0, 0.0]);
        // context [1] -> hidden (1, 0): scores item2 0.2, item3 -1, item4 0.7, item5 3
        assert_eq!(rank_candidates(&p, &[1], 4, &[2, 3, 5]).unwrap(), 2);
        assert_eq!(rank_candidates(&p, &[1], 5, &[2, 3, 4]).unwrap(), 1);
        assert_eq!(rank_candidates(&p, &[1], 3, &[2, 4, 5]).unwrap(), 4);
    }

    #[test]
    fn negatives_are_distinct_and_avoid_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let history: Vec<u32> = (1..=50).collect();
        for _ in 0..10_000 {
            let negs = sample_negatives(&history[..7], 9, 120, 100, &mut rng).unwrap();
            let set: HashSet<u32> = negs.iter().copied().collect();
            assert_eq!(set.len(), 100);
            assert!(negs.iter().all(|n| !history[..7].contains(n) && *n != 9 && (1..=120).contains(n)));
        }
    }

    #[test]
    fn small_vocabulary_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_negatives(&[1, 2, 3], 3, 103, 100, &mut rng), Err(Error::Config(_))));
        assert!(sample_negatives(&[1, 2, 3], 3, 104, 100, &mut rng).is_ok());
    }

    fn corpus(users: usize, vocab: u32) -> SplitCorpus {
        let seqs: Vec<Sequence> = (0..users)
            .map(|u| Sequence {
                user_id: u as u32,
                items: (0..(3 + u % 9)).map(|i| ((u * 7 + i * 3) as u32 % vocab) + 1).collect(),
            })
            .collect();
        split_leave_one_out(&seqs)
    }

    struct Oracle;

    impl Scorer for Oracle {
        fn score(&self, _: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
            Ok((0..candidates.len()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect())
        }
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let c = corpus(40, 300);
        let r = evaluate(&Oracle, EvalSplit::Test, &c, None, 300, &EvalConfig::default()).unwrap();
        assert_eq!((r.overall.recall_at_5, r.overall.ndcg_at_5, r.overall.mrr), (1.0, 1.0, 1.0));
        assert_eq!(r.overall.cases, 40);
    }

    #[test]
    fn seeded_negatives_repeat() {
        let c = corpus(5, 300);
        let cfg = EvalConfig::default();
        for idx in 0..5 {
            assert_eq!(
                user_negatives(&c, idx, EvalSplit::Test, 300, &cfg).unwrap(),
                user_negatives(&c, idx, EvalSplit::Test, 300, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn evaluation_is_pure_and_uses_contexts() {
        let c = corpus(20, 200);
        let cfg = ModelConfig::new(200, 8, 6, 1, 2);
        let p = ModelParams::init(cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a = evaluate(&p, EvalSplit::Valid, &c, None, 200, &EvalConfig::default()).unwrap();
        let b = evaluate(&p, EvalSplit::Valid, &c, None, 200, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);

        let mut ctx: Vec<AugmentedSequence> = c.train.iter().map(AugmentedSequence::unchanged).collect();
        assert_eq!(evaluate(&p, EvalSplit::Valid, &c, Some(&ctx), 200, &EvalConfig::default()).unwrap(), a);
        ctx[3].items[0] = 199;
        assert!(evaluate(&p, EvalSplit::Valid, &c, Some(&ctx), 200, &EvalConfig::default()).is_err());
    }

    #[test]
    fn report_csvs() {
        let r = compute_metrics(&[case(1, 2), case(6, 9)]).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,value,bucket\nrecall@5,0.5,all\nndcg@5,0.5,all\n"));
        assert!(text.contains("recall@5,0,8-19\n") || text.contains("recall@5,0,8-19"));
        let mut buf = Vec::new();
        write_per_length_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "length,case_count,recall@5\n2,1,1\n9,1,0\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metric_laws(ranks in prop::collection::vec(1usize..=101, 1..50), which in 0usize..50) {
                let cases: Vec<RankedCase> = ranks.iter().map(|&r| case(r, r % 30 + 1)).collect();
                let r = compute_metrics(&cases).unwrap();
                let o = r.overall;
                prop_assert!(o.recall_at_5 >= o.ndcg_at_5);
                prop_assert!(o.mrr > 0.0 && o.mrr <= 1.0);
                prop_assert_eq!(o.mrr == 1.0, ranks.iter().all(|&r| r == 1));
                prop_assert_eq!(r.buckets.values().map(|m| m.cases).sum::<usize>(), cases.len());

                // improving a single rank never hurts
                let i = which % cases.len();
                let mut better = cases.clone();
                better[i].rank = (better[i].rank - 1).max(1);
                let b = compute_metrics(&better).unwrap().overall;
                prop_assert!(b.recall_at_5 >= o.recall_at_5);
                prop_assert!(b.ndcg_at_5 >= o.ndcg_at_5);
                prop_assert!(b.mrr >= o.mrr);
            }
        }
    }
}
