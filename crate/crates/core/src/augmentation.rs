//! Pseudo-prior item generation for short sequences.
//!
//! A reverse-trained model reads a sequence back to front and proposes the
//! item that preceded it. Prepending that item and asking again yields the
//! next one further back, `k` times in total.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{pad_truncate, parse_id_list, write_id_list, Sequence};
use crate::encoder::{score_items, ModelParams};
use crate::error::{Error, Result};

/// How an item is drawn from the model's scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Highest-scoring item, lowest id on ties.
    Greedy,
    /// Softmax sampling at the given temperature, seeded per user.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Pseudo-prior items per short sequence.
    pub k: usize,
    /// Sequences of length `<= m` are augmented.
    pub m: usize,
    pub decoding: Decoding,
}

impl AugmentConfig {
    pub fn new(k: usize, m: usize) -> Self {
        AugmentConfig {
            k,
            m,
            decoding: Decoding::Greedy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("short-sequence threshold M must be >= 1".into()));
        }
        if let Decoding::Sample { temperature, .. } = self.decoding {
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(Error::Config(format!("sampling temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSequence {
    pub user_id: u32,
    /// Pseudo-prior items followed by the original sequence.
    pub items: Vec<u32>,
    pub prefix_len: usize,
}

impl AugmentedSequence {
    pub fn unchanged(seq: &Sequence) -> Self {
        AugmentedSequence {
            user_id: seq.user_id,
            items: seq.items.clone(),
            prefix_len: 0,
        }
    }

    pub fn original(&self) -> &[u32] {
        &self.items[self.prefix_len..]
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(scores: &[f64], decoding: Decoding, rng: Option<&mut R>) -> u32 {
    let idx = match (decoding, rng) {
        (Decoding::Sample { temperature, .. }, Some(rng)) => {
            let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
            let probs = crate::numerics::softmax(&scaled);
            let mut u: f64 = rng.random();
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                if u < *p {
                    pick = i;
                    break;
                }
                u -= p;
            }
            pick
        }
        _ => argmax(scores),
    };
    idx as u32 + 1
}

fn scores_after(params: &ModelParams, context: &[u32]) -> Result<Vec<f64>> {
    let window = pad_truncate(context, params.config().max_len);
    let hidden = crate::encoder::last_hidden(&window, params)?;
    Ok(score_items(&hidden, params))
}

/// Greedy next item after `items` under a forward-trained model.
pub fn predict_next(params: &ModelParams, items: &[u32]) -> Result<u32> {
    let scores = scores_after(params, items)?;
    Ok(draw::<ChaCha8Rng>(&scores, Decoding::Greedy, None))
}

/// Greedy prior item of `items` under a reverse-trained model.
pub fn generate_prior_item(params: &ModelParams, items: &[u32]) -> Result<u32> {
    let reversed: Vec<u32> = items.iter().rev().copied().collect();
    predict_next(params, &reversed)
}

fn augment_with(params: &ModelParams, seq: &Sequence, k: usize, decoding: Decoding) -> Result<AugmentedSequence> {
    let mut rng = match decoding {
        Decoding::Sample { seed, .. } => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(seq.user_id as u64);
            Some(r)
        }
        Decoding::Greedy => None,
    };
    // built back to front: reversed[0] is the last real item
    let mut reversed: Vec<u32> = seq.items.iter().rev().copied().collect();
    for _ in 0..k {
        let scores = scores_after(params, &reversed)?;
        reversed.push(draw(&scores, decoding, rng.as_mut()));
    }
    reversed.reverse();
    Ok(AugmentedSequence {
        user_id: seq.user_id,
        items: reversed,
        prefix_len: k,
    })
}

/// Prepends `k` recursively generated pseudo-prior items to `seq`.
pub fn augment_sequence(params: &ModelParams, seq: &Sequence, k: usize) -> Result<AugmentedSequence> {
    augment_with(params, seq, k, Decoding::Greedy)
}

/// Augments every sequence of length `<= m`; longer ones pass through.
pub fn augment_corpus(params: &ModelParams, corpus: &[Sequence], config: &AugmentConfig) -> Result<Vec<AugmentedSequence>> {
    config.validate()?;
    corpus
        .iter()
        .map(|seq| {
            if seq.items.len() <= config.m && config.k > 0 {
                augment_with(params, seq, config.k, config.decoding)
            } else {
                Ok(AugmentedSequence::unchanged(seq))
            }
        })
        .collect()
}

/// `user_id<TAB>prefix_len<TAB>comma-separated ids` per line.
pub fn write_augmented<W: Write>(seqs: &[AugmentedSequence], mut w: W) -> std::io::Result<()> {
    for s in seqs {
        write!(w, "{}\t{}\t", s.user_id, s.prefix_len)?;
        write_id_list(&mut w, &s.items)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_augmented<R: BufRead>(reader: R) -> Result<Vec<AugmentedSequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::Ingest)?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format {
            what: "augmented corpus",
            line: i + 1,
            reason,
        };
        let mut cols = line.splitn(3, '\t');
        let (Some(user), Some(prefix), Some(items)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad("expected three tab-separated columns".into()));
        };
        let seq = AugmentedSequence {
            user_id: user.parse().map_err(|e| bad(format!("bad user id: {e}")))?,
            prefix_len: prefix.parse().map_err(|e| bad(format!("bad prefix length: {e}")))?,
            items: parse_id_list(items).map_err(bad)?,
        };
        if seq.prefix_len > seq.items.len() {
            return Err(bad("prefix longer than sequence".into()));
        }
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    /// Zero-layer model whose hidden state always points along axis 0 and
    /// item `a` has the largest component there.
    fn rigged(a: usize) -> ModelParams {
        let mut p = ModelParams::zeros(ModelConfig::new(5, 2, 6, 0, 1)).unwrap();
        for v in 1..=5 {
            p.item_embeddings[(v, 0)] = 0.1 * v as f64;
            p.item_embeddings[(v, 1)] = 0.0;
        }
        p.item_embeddings[(a, 0)] = 10.0;
        for t in 0..6 {
            p.position_embeddings[(t, 0)] = 100.0;
        }
        p
    }

    #[test]
    fn rigged_model_always_proposes_a() {
        // hidden = e[last] + pos; dominated by the 100 on axis 0, so the
        // largest axis-0 embedding (item 3 at 10.0) wins every time
        let p = rigged(3);
        for seq in [vec![1u32], vec![5, 4, 2], vec![3, 3]] {
            assert_eq!(generate_prior_item(&p, &seq).unwrap(), 3);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = rigged(2);
        assert_eq!(generate_prior_item(&p, &[1, 4]).unwrap(), generate_prior_item(&p, &[1, 4]).unwrap());
    }

    #[test]
    fn k_zero_is_identity() {
        let p = rigged(1);
        let seq = Sequence { user_id: 4, items: vec![2, 5] };
        let out = augment_sequence(&p, &seq, 0).unwrap();
        assert_eq!(out, AugmentedSequence::unchanged(&seq));
    }

    #[test]
    fn prefix_is_prepended_and_suffix_kept() {
        let p = rigged(4);
        let seq = Sequence { user_id: 0, items: vec![1, 2, 5] };
        let out = augment_sequence(&p, &seq, 3).unwrap();
        assert_eq!(out.items.len(), 6);
        assert_eq!(out.original(), &[1, 2, 5]);
        assert_eq!(&out.items[..3], &[4, 4, 4]);
        let two = augment_sequence(&p, &seq, 2).unwrap();
        assert_eq!(two.items, vec![4, 4, 1, 2, 5]);
    }

    #[test]
    fn each_pseudo_item_conditions_on_the_ones_after_it() {
        use rand::SeedableRng;
        let cfg = ModelConfig::new(9, 4, 5, 1, 1);
        let p = ModelParams::init(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let seq = Sequence { user_id: 0, items: vec![3, 7] };
        let out = augment_sequence(&p, &seq, 4).unwrap();
        for j in 0..4 {
            assert_eq!(out.items[j], generate_prior_item(&p, &out.items[j + 1..]).unwrap());
        }
    }

    #[test]
    fn corpus_respects_threshold() {
        let p = rigged(5);
        let corpus = vec![
            Sequence { user_id: 0, items: vec![1, 2, 3] },
            Sequence { user_id: 1, items: (0..25).map(|i| i % 5 + 1).collect() },
        ];
        let out = augment_corpus(&p, &corpus, &AugmentConfig::new(15, 18)).unwrap();
        assert_eq!(out[0].items.len(), 18);
        assert_eq!(out[0].prefix_len, 15);
        assert_eq!(out[1].items.len(), 25);
        assert_eq!(out[1].prefix_len, 0);
        assert_eq!(out[1].items, corpus[1].items);

        let none = augment_corpus(&p, &corpus, &AugmentConfig::new(15, 2)).unwrap();
        assert!(none.iter().zip(&corpus).all(|(a, s)| a.items == s.items && a.prefix_len == 0));
    }

    #[test]
    fn phones_configuration_lengthens_short_sequence() {
        let p = rigged(2);
        let corpus = vec![Sequence { user_id: 0, items: vec![1, 3, 5, 4, 1] }];
        let out = augment_corpus(&p, &corpus, &AugmentConfig::new(17, 18)).unwrap();
        assert_eq!(out[0].items.len(), 22);
        assert_eq!(out[0].original(), &corpus[0].items[..]);
    }

    #[test]
    fn sampled_decoding_is_seeded() {
        let p = rigged(2);
        let cfg = AugmentConfig {
            k: 4,
            m: 10,
            decoding: Decoding::Sample { temperature: 50.0, seed: 3 },
        };
        let corpus = vec![Sequence { user_id: 7, items: vec![1, 2] }];
        let a = augment_corpus(&p, &corpus, &cfg).unwrap();
        assert_eq!(a, augment_corpus(&p, &corpus, &cfg).unwrap());
        assert_eq!(a[0].original(), &[1, 2]);
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(AugmentConfig::new(1, 0).validate().is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let seqs = vec![
            AugmentedSequence { user_id: 0, items: vec![9, 8, 1, 2], prefix_len: 2 },
            AugmentedSequence { user_id: 1, items: vec![3], prefix_len: 0 },
        ];
        let mut buf = Vec::new();
        write_augmented(&seqs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0\t2\t9,8,1,2\n1\t0\t3\n");
        assert_eq!(read_augmented(buf.as_slice()).unwrap(), seqs);
        assert!(read_augmented("0\t5\t1,2\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::SeedableRng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn suffix_and_length_laws(
                seqs in prop::collection::vec(prop::collection::vec(1u32..=12, 1..12), 1..6),
                k in 0usize..5,
                m in 1usize..10,
                seed in 0u64..1000,
            ) {
                let cfg = ModelConfig::new(12, 4, 6, 1, 2);
                let params = ModelParams::init(cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let before = params.clone();
                let corpus: Vec<Sequence> = seqs.into_iter().enumerate()
                    .map(|(u, items)| Sequence { user_id: u as u32, items }).collect();
                let out = augment_corpus(&params, &corpus, &AugmentConfig::new(k, m)).unwrap();
                prop_assert_eq!(&params, &before);
                for (a, s) in out.iter().zip(&corpus) {
                    prop_assert_eq!(a.original(), &s.items[..]);
                    let extra = if s.items.len() <= m { k } else { 0 };
                    prop_assert_eq!(a.items.len(), s.items.len() + extra);
                    prop_assert!(a.items.iter().all(|&v| (1..=12).contains(&v)));
                }
            }
        }
    }
}
