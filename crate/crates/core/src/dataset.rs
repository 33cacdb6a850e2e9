//! Interaction ingestion, per-user sequences and the leave-one-out split.
//!
//! Raw logs are treated as implicit feedback: every record is a positive
//! interaction and any rating column is dropped. Items receive dense ids
//! starting at 1 in order of first appearance; id 0 is the padding id.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use log::warn;

use crate::error::{Error, Result};

/// Padding id. Never assigned to a real item.
pub const PAD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Record layout of a raw interaction stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputFormat {
    /// One JSON object per line. Field names default to the Amazon review
    /// dump layout.
    JsonLines {
        user_field: String,
        item_field: String,
        time_field: String,
    },
    /// `user<TAB>item<TAB>timestamp`; trailing columns are ignored.
    Tsv,
}

impl InputFormat {
    pub fn amazon() -> Self {
        InputFormat::JsonLines {
            user_field: "reviewerID".into(),
            item_field: "asin".into(),
            time_field: "unixReviewTime".into(),
        }
    }
}

impl Default for InputFormat {
    fn default() -> Self {
        Self::amazon()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedInteractions {
    pub interactions: Vec<Interaction>,
    /// Lines that could not be turned into an interaction. Blank lines are
    /// not counted.
    pub malformed: usize,
}

/// Parses a line-oriented interaction stream.
///
/// Malformed lines are skipped and counted; more than half of the non-blank
/// lines being malformed is fatal.
pub fn parse_interactions<R: BufRead>(reader: R, format: &InputFormat) -> Result<ParsedInteractions> {
    let mut out = ParsedInteractions::default();
    let mut total = 0usize;
    let mut first_bad: Option<(usize, String)> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::Ingest)?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line, format) {
            Ok(interaction) => out.interactions.push(interaction),
            Err(reason) => {
                out.malformed += 1;
                if first_bad.is_none() {
                    first_bad = Some((lineno + 1, reason));
                }
            }
        }
    }

    if out.malformed * 2 > total {
        let (first_bad, reason) = first_bad.unwrap_or_default();
        return Err(Error::TooManyMalformed {
            malformed: out.malformed,
            total,
            first_bad,
            reason,
        });
    }
    if out.malformed > 0 {
        warn!("skipped {} malformed lines of {}", out.malformed, total);
    }
    Ok(out)
}

/// Opens `path` (transparently gunzipping `*.gz`) and parses it.
pub fn read_interactions(path: &Path, format: &InputFormat) -> Result<ParsedInteractions> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|ext| ext == "gz") {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_interactions(BufReader::with_capacity(1 << 16, reader), format)
}

fn parse_line(line: &str, format: &InputFormat) -> std::result::Result<Interaction, String> {
    let (user, item, timestamp) = match format {
        InputFormat::Tsv => {
            let mut cols = line.split('\t');
            let user = cols.next().unwrap_or_default();
            let item = cols.next().ok_or("missing item column")?;
            let ts = cols.next().ok_or("missing timestamp column")?;
            let ts: i64 = ts
                .trim()
                .parse()
                .map_err(|e| format!("bad timestamp {ts:?}: {e}"))?;
            (user.trim().to_owned(), item.trim().to_owned(), ts)
        }
        InputFormat::JsonLines {
            user_field,
            item_field,
            time_field,
        } => {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
            let field = |name: &str| {
                value
                    .get(name)
                    .ok_or_else(|| format!("missing field {name:?}"))
            };
            let user = field(user_field)?
                .as_str()
                .ok_or_else(|| format!("{user_field:?} is not a string"))?;
            let item = field(item_field)?
                .as_str()
                .ok_or_else(|| format!("{item_field:?} is not a string"))?;
            let ts = field(time_field)?
                .as_i64()
                .ok_or_else(|| format!("{time_field:?} is not an integer"))?;
            (user.to_owned(), item.to_owned(), ts)
        }
    };
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(Interaction {
        user,
        item,
        timestamp,
    })
}

/// Bijection between raw item strings and dense ids `1..=len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    item_to_id: HashMap<String, u32>,
    // Index 0 is the padding slot and holds an empty string.
    id_to_item: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            item_to_id: HashMap::new(),
            id_to_item: vec![String::new()],
        }
    }

    /// Returns the id of `item`, assigning the next free id on first sight.
    pub fn intern(&mut self, item: &str) -> u32 {
        if let Some(&id) = self.item_to_id.get(item) {
            return id;
        }
        let id = self.id_to_item.len() as u32;
        self.id_to_item.push(item.to_owned());
        self.item_to_id.insert(item.to_owned(), id);
        id
    }

    pub fn id(&self, item: &str) -> Option<u32> {
        self.item_to_id.get(item).copied()
    }

    pub fn item(&self, id: u32) -> Option<&str> {
        if id == PAD {
            return None;
        }
        self.id_to_item.get(id as usize).map(String::as_str)
    }

    /// Number of real items (excludes padding).
    pub fn len(&self) -> usize {
        self.id_to_item.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.id_to_item
            .iter()
            .enumerate()
            .skip(1)
            .map(|(id, s)| (s.as_str(), id as u32))
    }

    /// Writes `raw_id<TAB>dense_id` lines in id order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (raw, id) in self.iter() {
            writeln!(w, "{raw}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(Error::Ingest)?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Format {
                what: "vocabulary",
                line: i + 1,
                reason,
            };
            let (raw, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad("expected raw_id<TAB>dense_id".into()))?;
            let id: u32 = id.parse().map_err(|e| bad(format!("bad id: {e}")))?;
            let assigned = vocab.intern(raw);
            if assigned != id {
                return Err(bad(format!("ids must be dense and ordered, expected {assigned} got {id}")));
            }
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub user_id: u32,
    pub items: Vec<u32>,
}

/// Groups interactions per user and orders each history by timestamp.
///
/// Users and items get dense ids in order of first appearance in the input.
/// Equal timestamps keep their input order.
pub fn build_sequences(interactions: &[Interaction]) -> Result<(Vec<Sequence>, Vocabulary)> {
    if interactions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab = Vocabulary::new();
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut events: Vec<Vec<(i64, u32)>> = Vec::new();

    for it in interactions {
        let item = vocab.intern(&it.item);
        let next = events.len();
        let slot = *user_index.entry(it.user.as_str()).or_insert(next);
        if slot == next {
            events.push(Vec::new());
        }
        events[slot].push((it.timestamp, item));
    }

    let sequences = events
        .into_iter()
        .enumerate()
        .map(|(user_id, mut evs)| {
            // stable: ties keep input order
            evs.sort_by_key(|&(ts, _)| ts);
            Sequence {
                user_id: user_id as u32,
                items: evs.into_iter().map(|(_, item)| item).collect(),
            }
        })
        .collect();
    Ok((sequences, vocab))
}

/// Leave-one-out split. Index `i` of every field refers to the same user.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: Vec<Sequence>,
    pub valid_target: Vec<u32>,
    pub test_target: Vec<u32>,
    /// Users dropped for having fewer than three interactions.
    pub excluded: usize,
}

impl SplitCorpus {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// The user's complete history: train prefix, validation item, test item.
    pub fn full_sequence(&self, idx: usize) -> Vec<u32> {
        let mut items = self.train[idx].items.clone();
        items.push(self.valid_target[idx]);
        items.push(self.test_target[idx]);
        items
    }
}

pub fn split_leave_one_out(sequences: &[Sequence]) -> SplitCorpus {
    let mut split = SplitCorpus::default();
    for seq in sequences {
        let len = seq.items.len();
        if len < 3 {
            split.excluded += 1;
            continue;
        }
        split.train.push(Sequence {
            user_id: seq.user_id,
            items: seq.items[..len - 2].to_vec(),
        });
        split.valid_target.push(seq.items[len - 2]);
        split.test_target.push(seq.items[len - 1]);
    }
    if split.excluded > 0 {
        warn!("excluded {} sequences shorter than 3 items", split.excluded);
    }
    split
}

/// Fixed-length window: keeps the last `n` items and left-pads with [`PAD`].
pub fn pad_truncate(items: &[u32], n: usize) -> Vec<u32> {
    let keep = items.len().min(n);
    let mut out = vec![PAD; n - keep];
    out.extend_from_slice(&items[items.len() - keep..]);
    out
}

/// Writes `user_id<TAB>comma-separated ids`, one sequence per line.
pub fn write_sequences<W: Write>(sequences: &[Sequence], mut w: W) -> std::io::Result<()> {
    for seq in sequences {
        write!(w, "{}\t", seq.user_id)?;
        write_id_list(&mut w, &seq.items)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_sequences<R: BufRead>(reader: R) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::Ingest)?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format {
            what: "sequence file",
            line: i + 1,
            reason,
        };
        let (user, items) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected user<TAB>items".into()))?;
        out.push(Sequence {
            user_id: user.parse().map_err(|e| bad(format!("bad user id: {e}")))?,
            items: parse_id_list(items).map_err(bad)?,
        });
    }
    Ok(out)
}

pub(crate) fn write_id_list<W: Write>(w: &mut W, ids: &[u32]) -> std::io::Result<()> {
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{id}")?;
    }
    Ok(())
}

pub(crate) fn parse_id_list(s: &str) -> std::result::Result<Vec<u32>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.parse::<u32>().map_err(|e| format!("bad item id {t:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "u1\ti1\t10\nu1\ti2\t20\nu2\ti1\t5\n";

    fn tsv(s: &str) -> Vec<Interaction> {
        parse_interactions(s.as_bytes(), &InputFormat::Tsv)
            .unwrap()
            .interactions
    }

    #[test]
    fn empty_stream_parses_to_nothing() {
        let parsed = parse_interactions("".as_bytes(), &InputFormat::Tsv).unwrap();
        assert!(parsed.interactions.is_empty());
        assert_eq!(parsed.malformed, 0);
    }

    #[test]
    fn tsv_fixture() {
        let got = tsv(FIXTURE);
        let want = [("u1", "i1", 10), ("u1", "i2", 20), ("u2", "i1", 5)];
        assert_eq!(got.len(), 3);
        for (it, (u, i, t)) in got.iter().zip(want) {
            assert_eq!((it.user.as_str(), it.item.as_str(), it.timestamp), (u, i, t));
        }
    }

    #[test]
    fn json_lines_drop_rating() {
        let raw = r#"{"reviewerID":"A1","asin":"B9","overall":5.0,"unixReviewTime":1391040000}
{"reviewerID":"A2","asin":"B8","overall":1.0,"unixReviewTime":1391040001}"#;
        let parsed = parse_interactions(raw.as_bytes(), &InputFormat::amazon()).unwrap();
        assert_eq!(parsed.interactions.len(), 2);
        assert_eq!(parsed.interactions[0].item, "B9");
        assert_eq!(parsed.interactions[1].timestamp, 1391040001);
    }

    #[test]
    fn custom_json_field_names() {
        let fmt = InputFormat::JsonLines {
            user_field: "u".into(),
            item_field: "i".into(),
            time_field: "t".into(),
        };
        let parsed = parse_interactions(r#"{"u":"x","i":"y","t":3}"#.as_bytes(), &fmt).unwrap();
        assert_eq!(parsed.interactions[0].user, "x");
    }

    #[test]
    fn malformed_lines_counted_then_fatal_past_half() {
        let parsed = parse_interactions("a\tb\t1\nbroken\na\tc\t2\n".as_bytes(), &InputFormat::Tsv).unwrap();
        assert_eq!(parsed.interactions.len(), 2);
        assert_eq!(parsed.malformed, 1);

        let err = parse_interactions("a\tb\t1\nbroken\nx\ty\t-4\n".as_bytes(), &InputFormat::Tsv).unwrap_err();
        match err {
            Error::TooManyMalformed { malformed, total, first_bad, .. } => {
                assert_eq!((malformed, total, first_bad), (2, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exactly_half_malformed_is_tolerated() {
        let parsed = parse_interactions("a\tb\t1\nbroken\n".as_bytes(), &InputFormat::Tsv).unwrap();
        assert_eq!(parsed.malformed, 1);
    }

    #[test]
    fn unreadable_stream_is_fatal() {
        let bytes: &[u8] = &[0xff, 0xfe, b'\n'];
        let err = parse_interactions(bytes, &InputFormat::Tsv).unwrap_err();
        assert!(matches!(err, Error::Ingest(_)));
    }

    #[test]
    fn sequences_from_fixture() {
        let (seqs, vocab) = build_sequences(&tsv(FIXTURE)).unwrap();
        assert_eq!(vocab.id("i1"), Some(1));
        assert_eq!(vocab.id("i2"), Some(2));
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].items, vec![1, 2]);
        assert_eq!(seqs[1].items, vec![1]);
    }

    #[test]
    fn timestamps_sort_and_ties_are_stable() {
        let (seqs, vocab) = build_sequences(&tsv("u\tc\t30\nu\ta\t10\nu\tx\t20\nu\ty\t20\n")).unwrap();
        let names: Vec<_> = seqs[0].items.iter().map(|&i| vocab.item(i).unwrap()).collect();
        assert_eq!(names, ["a", "x", "y", "c"]);
    }

    #[test]
    fn empty_interactions_rejected() {
        assert!(matches!(build_sequences(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn leave_one_out() {
        let seqs = vec![
            Sequence { user_id: 0, items: vec![1, 2, 3, 4, 5] },
            Sequence { user_id: 1, items: vec![1, 2, 3] },
            Sequence { user_id: 2, items: vec![7, 8] },
        ];
        let split = split_leave_one_out(&seqs);
        assert_eq!(split.train[0].items, vec![1, 2, 3]);
        assert_eq!((split.valid_target[0], split.test_target[0]), (4, 5));
        assert_eq!(split.train[1].items, vec![1]);
        assert_eq!((split.valid_target[1], split.test_target[1]), (2, 3));
        assert_eq!(split.excluded, 1);
        assert_eq!(split.full_sequence(0), seqs[0].items);
    }

    #[test]
    fn pad_and_truncate() {
        assert_eq!(pad_truncate(&[7, 8, 9], 5), vec![0, 0, 7, 8, 9]);
        let long: Vec<u32> = (1..=120).collect();
        assert_eq!(pad_truncate(&long, 100), (21..=120).collect::<Vec<_>>());
        assert_eq!(pad_truncate(&[4, 5], 2), vec![4, 5]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let (_, vocab) = build_sequences(&tsv(FIXTURE)).unwrap();
        let mut buf = Vec::new();
        vocab.write_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "i1\t1\ni2\t2\n");
        assert_eq!(Vocabulary::read_tsv(buf.as_slice()).unwrap(), vocab);
        assert!(Vocabulary::read_tsv("a\t2\n".as_bytes()).is_err());
    }

    #[test]
    fn sequence_file_round_trip() {
        let seqs = vec![
            Sequence { user_id: 3, items: vec![1, 2] },
            Sequence { user_id: 9, items: vec![5] },
        ];
        let mut buf = Vec::new();
        write_sequences(&seqs, &mut buf).unwrap();
        assert_eq!(read_sequences(buf.as_slice()).unwrap(), seqs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn vocab_is_a_bijection(items in prop::collection::vec("[a-z]{1,4}", 1..60)) {
                let mut vocab = Vocabulary::new();
                for s in &items {
                    vocab.intern(s);
                }
                for s in &items {
                    let id = vocab.id(s).unwrap();
                    prop_assert!(id >= 1 && id as usize <= vocab.len());
                    prop_assert_eq!(vocab.item(id), Some(s.as_str()));
                }
            }

            #[test]
            fn split_concatenation_restores_sequence(
                seqs in prop::collection::vec(prop::collection::vec(1u32..50, 3..20), 1..20)
            ) {
                let seqs: Vec<Sequence> = seqs.into_iter().enumerate()
                    .map(|(u, items)| Sequence { user_id: u as u32, items }).collect();
                let split = split_leave_one_out(&seqs);
                for (i, seq) in seqs.iter().enumerate() {
                    prop_assert_eq!(split.full_sequence(i), seq.items.clone());
                }
            }

            #[test]
            fn pad_truncate_shape(items in prop::collection::vec(1u32..30, 0..40), n in 1usize..25) {
                let w = pad_truncate(&items, n);
                prop_assert_eq!(w.len(), n);
                let real: Vec<u32> = w.iter().copied().filter(|&id| id != PAD).collect();
                let keep = items.len().min(n);
                prop_assert_eq!(&real[..], &items[items.len() - keep..]);
            }
        }
    }
}
