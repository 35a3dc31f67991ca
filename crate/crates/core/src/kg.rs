//! Vocabulary, triples, dataset splits and negative sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Bidirectional name/index maps for entities and relations. Indices are dense
/// and assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<S: AsRef<str>>(entities: &[S], relations: &[S]) -> Result<Self> {
        let mut vocab = Self::new();
        for name in entities {
            if vocab.entity(name.as_ref()).is_some() {
                return Err(Error::Format(format!(
                    "duplicate entity name {:?}",
                    name.as_ref()
                )));
            }
            vocab.intern_entity(name.as_ref());
        }
        for name in relations {
            if vocab.relation(name.as_ref()).is_some() {
                return Err(Error::Format(format!(
                    "duplicate relation name {:?}",
                    name.as_ref()
                )));
            }
            vocab.intern_relation(name.as_ref());
        }
        Ok(vocab)
    }

    pub fn intern_entity(&mut self, name: &str) -> usize {
        intern(&mut self.entity_names, &mut self.entity_index, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        intern(&mut self.relation_names, &mut self.relation_index, name)
    }

    pub fn entity(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn require_entity(&self, name: &str) -> Result<usize> {
        self.entity(name).ok_or_else(|| Error::UnknownName {
            kind: "entity",
            name: name.to_owned(),
        })
    }

    pub fn require_relation(&self, name: &str) -> Result<usize> {
        self.relation(name).ok_or_else(|| Error::UnknownName {
            kind: "relation",
            name: name.to_owned(),
        })
    }

    pub fn entity_name(&self, index: usize) -> &str {
        &self.entity_names[index]
    }

    pub fn relation_name(&self, index: usize) -> &str {
        &self.relation_names[index]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&i) = index.get(name) {
        return i;
    }
    let i = names.len();
    names.push(name.to_owned());
    index.insert(name.to_owned(), i);
    i
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self { head, relation, tail }
    }
}

/// Which position of a triple gets replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Head,
    Tail,
    Relation,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Head => "head",
            Slot::Tail => "tail",
            Slot::Relation => "relation",
        }
    }

    fn replace(self, triple: Triple, value: usize) -> Triple {
        match self {
            Slot::Head => Triple {
                head: value,
                ..triple
            },
            Slot::Tail => Triple {
                tail: value,
                ..triple
            },
            Slot::Relation => Triple {
                relation: value,
                ..triple
            },
        }
    }

    fn current(self, triple: Triple) -> usize {
        match self {
            Slot::Head => triple.head,
            Slot::Tail => triple.tail,
            Slot::Relation => triple.relation,
        }
    }
}

/// Parses tab-separated triples, extending `vocab` in place.
pub fn load_triples(path: impl AsRef<Path>, vocab: &mut Vocabulary) -> Result<Vec<Triple>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(BufReader::new(file), path, vocab)
}

pub fn parse_triples<R: BufRead>(reader: R, path: &Path, vocab: &mut Vocabulary) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: line_no,
                message: "empty field".to_owned(),
            });
        }
        let head = vocab.intern_entity(fields[0]);
        let relation = vocab.intern_relation(fields[1]);
        let tail = vocab.intern_entity(fields[2]);
        triples.push(Triple::new(head, relation, tail));
    }
    Ok(triples)
}

pub fn format_triples(triples: &[Triple], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(vocab.entity_name(t.head));
        out.push('\t');
        out.push_str(vocab.relation_name(t.relation));
        out.push('\t');
        out.push_str(vocab.entity_name(t.tail));
        out.push('\n');
    }
    out
}

/// Train/valid/test splits plus the set of every known true triple.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    all_true: HashSet<Triple>,
}

impl Dataset {
    /// Fails if a triple occurs in two different splits or references an
    /// index outside the vocabulary.
    pub fn new(vocab: Vocabulary, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Result<Self> {
        let (ne, nr) = (vocab.num_entities(), vocab.num_relations());
        let mut all_true = HashSet::new();
        for split in [&train, &valid, &test] {
            let mut seen_here = HashSet::new();
            for &t in split {
                if t.head >= ne || t.tail >= ne || t.relation >= nr {
                    return Err(Error::Format(format!(
                        "triple ({}, {}, {}) out of vocabulary range",
                        t.head, t.relation, t.tail
                    )));
                }
                if seen_here.insert(t) && !all_true.insert(t) {
                    return Err(Error::OverlappingSplits {
                        h: t.head,
                        r: t.relation,
                        t: t.tail,
                    });
                }
            }
        }
        Ok(Self {
            vocab,
            train,
            valid,
            test,
            all_true,
        })
    }

    /// Loads the three splits in train, valid, test order so that indices are
    /// reproducible given the same files. `vocab` may be pre-seeded.
    pub fn load(
        train: impl AsRef<Path>,
        valid: impl AsRef<Path>,
        test: impl AsRef<Path>,
        mut vocab: Vocabulary,
    ) -> Result<Self> {
        let train = load_triples(train, &mut vocab)?;
        let valid = load_triples(valid, &mut vocab)?;
        let test = load_triples(test, &mut vocab)?;
        Self::new(vocab, train, valid, test)
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn is_true(&self, triple: &Triple) -> bool {
        self.all_true.contains(triple)
    }

    pub fn all_true(&self) -> &HashSet<Triple> {
        &self.all_true
    }

    /// Replaces the chosen slot with a uniformly drawn different value such
    /// that the result is not a known true triple.
    pub fn corrupt<R: Rng + ?Sized>(&self, triple: Triple, slot: Slot, rng: &mut R) -> Result<Triple> {
        corrupt(
            triple,
            slot,
            self.num_entities(),
            self.num_relations(),
            &self.all_true,
            rng,
        )
    }

    /// Slots that admit at least one replacement value.
    pub fn corruptible_slots(&self) -> Vec<Slot> {
        let mut slots = Vec::with_capacity(3);
        if self.num_entities() >= 2 {
            slots.push(Slot::Head);
            slots.push(Slot::Tail);
        }
        if self.num_relations() >= 2 {
            slots.push(Slot::Relation);
        }
        slots
    }

    /// Pairs a positive with one negative, choosing the slot uniformly among
    /// the corruptible ones. If the drawn slot is exhausted the remaining
    /// slots are tried in order.
    pub fn negative_for<R: Rng + ?Sized>(&self, positive: Triple, rng: &mut R) -> Result<Triple> {
        let slots = self.corruptible_slots();
        if slots.is_empty() {
            return Err(Error::SamplingExhausted {
                h: positive.head,
                r: positive.relation,
                t: positive.tail,
                slot: "any",
            });
        }
        let first = rng.random_range(0..slots.len());
        let mut last_err = None;
        for k in 0..slots.len() {
            let slot = slots[(first + k) % slots.len()];
            match self.corrupt(positive, slot, rng) {
                Ok(neg) => return Ok(neg),
                Err(e @ Error::SamplingExhausted { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one slot was tried"))
    }
}

/// Rejection attempts before falling back to enumerating the candidates.
const REJECTION_ATTEMPTS: usize = 32;

pub fn corrupt<R: Rng + ?Sized>(
    triple: Triple,
    slot: Slot,
    num_entities: usize,
    num_relations: usize,
    all_true: &HashSet<Triple>,
    rng: &mut R,
) -> Result<Triple> {
    let domain = match slot {
        Slot::Head | Slot::Tail => num_entities,
        Slot::Relation => num_relations,
    };
    let exhausted = || Error::SamplingExhausted {
        h: triple.head,
        r: triple.relation,
        t: triple.tail,
        slot: slot.name(),
    };
    let current = slot.current(triple);
    if domain < 2 {
        return Err(exhausted());
    }
    // Uniform over the other domain-1 values: draw from 0..domain-1 and skip
    // past the current value.
    let draw = |rng: &mut R| {
        let v = rng.random_range(0..domain - 1);
        if v >= current {
            v + 1
        } else {
            v
        }
    };
    for _ in 0..REJECTION_ATTEMPTS.min(domain) {
        let candidate = slot.replace(triple, draw(rng));
        if !all_true.contains(&candidate) {
            return Ok(candidate);
        }
    }
    let candidates: Vec<Triple> = (0..domain)
        .filter(|&v| v != current)
        .map(|v| slot.replace(triple, v))
        .filter(|c| !all_true.contains(c))
        .collect();
    if candidates.is_empty() {
        return Err(exhausted());
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// One epoch of training pairs: the training split in shuffled order, each
/// positive paired with one corruption, chunked into batches.
pub fn epoch_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<(Triple, Triple)>>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let positive = dataset.train[i];
            batch.push((positive, dataset.negative_for(positive, rng)?));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn parse(text: &str, vocab: &mut Vocabulary) -> Result<Vec<Triple>> {
        parse_triples(Cursor::new(text), Path::new("mem"), vocab)
    }

    fn tiny() -> Dataset {
        let mut vocab = Vocabulary::new();
        let train = parse("a\tlikes\tb\n", &mut vocab).unwrap();
        Dataset::new(vocab, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn single_line_first_seen_indexing() {
        let mut vocab = Vocabulary::new();
        let triples = parse("a\tlikes\tb\n", &mut vocab).unwrap();
        assert_eq!(triples, vec![Triple::new(0, 0, 1)]);
        assert_eq!(vocab.entity_names(), &["a", "b"]);
        assert_eq!(vocab.relation_names(), &["likes"]);
    }

    #[test]
    fn loader_keeps_duplicates_dataset_dedups() {
        let mut vocab = Vocabulary::new();
        let triples = parse("a\tlikes\tb\na\tlikes\tb\n", &mut vocab).unwrap();
        assert_eq!(triples.len(), 2);
        assert_eq!(triples[0], triples[1]);
        let ds = Dataset::new(vocab, triples, vec![], vec![]).unwrap();
        assert_eq!(ds.all_true().len(), 1);
        assert_eq!(ds.train.len(), 2);
    }

    #[test]
    fn arity_violation_reports_line() {
        let mut vocab = Vocabulary::new();
        match parse("a\tlikes\n", &mut vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("\n\na\tb\tc\nx\ty\n", &mut vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn blank_lines_and_whitespace() {
        let mut vocab = Vocabulary::new();
        let triples = parse("\n  a \t likes\tb  \n\n", &mut vocab).unwrap();
        assert_eq!(triples, vec![Triple::new(0, 0, 1)]);
        assert_eq!(vocab.entity(" a "), None);
        assert_eq!(vocab.entity("a"), Some(0));
        assert!(parse("", &mut Vocabulary::new()).unwrap().is_empty());
    }

    #[test]
    fn lookup_roundtrip() {
        let mut vocab = Vocabulary::new();
        parse("x\tr\ty\ny\ts\tz\n", &mut vocab).unwrap();
        for i in 0..vocab.num_entities() {
            assert_eq!(vocab.entity(vocab.entity_name(i)), Some(i));
        }
        for i in 0..vocab.num_relations() {
            assert_eq!(vocab.relation(vocab.relation_name(i)), Some(i));
        }
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut vocab = Vocabulary::new();
        let a = parse("a\tr\tb\n", &mut vocab).unwrap();
        let err = Dataset::new(vocab, a.clone(), a, vec![]).unwrap_err();
        assert!(matches!(err, Error::OverlappingSplits { .. }));
    }

    #[test]
    fn forced_tail_and_head_candidates() {
        let ds = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = Triple::new(0, 0, 1);
        assert_eq!(
            ds.corrupt(pos, Slot::Tail, &mut rng).unwrap(),
            Triple::new(0, 0, 0)
        );
        assert_eq!(
            ds.corrupt(pos, Slot::Head, &mut rng).unwrap(),
            Triple::new(1, 0, 1)
        );
    }

    #[test]
    fn complete_graph_is_exhausted() {
        let mut vocab = Vocabulary::new();
        let all = parse("a\tr\ta\na\tr\tb\nb\tr\ta\nb\tr\tb\n", &mut vocab).unwrap();
        let ds = Dataset::new(vocab, all, vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &t in &ds.train {
            for slot in [Slot::Head, Slot::Tail, Slot::Relation] {
                assert!(matches!(
                    ds.corrupt(t, slot, &mut rng),
                    Err(Error::SamplingExhausted { .. })
                ));
            }
            assert!(ds.negative_for(t, &mut rng).is_err());
        }
    }

    #[test]
    fn exhaustive_epoch_and_counting() {
        let mut vocab = Vocabulary::new();
        let train = parse("a\tr\tb\nb\tr\tc\nc\tr\td\n", &mut vocab).unwrap();
        let ds = Dataset::new(vocab, train, vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let epoch = epoch_batches(&ds, ds.train.len(), &mut rng).unwrap();
        assert_eq!(epoch.len(), 1);
        let mut seen: Vec<Triple> = epoch[0].iter().map(|p| p.0).collect();
        seen.sort();
        let mut expected = ds.train.clone();
        expected.sort();
        assert_eq!(seen, expected);

        let mut counts = HashMap::new();
        let mut pairs = 0;
        for _ in 0..3 {
            for batch in epoch_batches(&ds, 1, &mut rng).unwrap() {
                assert_eq!(batch.len(), 1);
                pairs += 1;
                *counts.entry(batch[0].0).or_insert(0) += 1;
            }
        }
        assert_eq!(pairs, 9);
        assert!(counts.values().all(|&c| c == 3));
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut vocab = Vocabulary::new();
        let train = parse("a\tr\tb\nb\tr\tc\nc\ts\td\nd\ts\ta\n", &mut vocab).unwrap();
        let ds = Dataset::new(vocab, train, vec![], vec![]).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..5)
                .map(|_| epoch_batches(&ds, 3, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
