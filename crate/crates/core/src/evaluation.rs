//! Entity prediction, triple classification, attention inspection and the
//! image-space regularity probe.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{Dataset, Slot, Triple};
use crate::matrix::Matrix;
use crate::model::{
    all_entity_ibr, encode_entity, entity_ibr, residual, translation_distance, AggregationMode, FeatureStore,
    ModelParams, Norm,
};

/// Which entity representation scores a triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoringMode {
    Sbr,
    Ibr,
    /// `alpha * d_SBR + (1 - alpha) * d_IBR`.
    Union(f64),
}

impl ScoringMode {
    pub fn union(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(ScoringMode::Union(alpha))
        } else {
            Err(Error::Config(format!("union weight {alpha} outside [0, 1]")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoringMode::Sbr => "sbr",
            ScoringMode::Ibr => "ibr",
            ScoringMode::Union(_) => "union",
        }
    }

    fn needs_images(&self) -> bool {
        !matches!(self, ScoringMode::Sbr | ScoringMode::Union(1.0))
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Precomputed entity representations for fast repeated scoring.
pub struct Scorer<'a> {
    params: &'a ModelParams,
    images: Option<Matrix>,
    mode: ScoringMode,
    norm: Norm,
}

impl<'a> Scorer<'a> {
    pub fn new(
        params: &'a ModelParams,
        store: Option<&FeatureStore>,
        aggregation: AggregationMode,
        mode: ScoringMode,
        norm: Norm,
    ) -> Result<Self> {
        let images = if mode.needs_images() {
            let store = store.ok_or(Error::MissingFeatures { entity: 0 })?;
            Some(all_entity_ibr(params, store, aggregation)?)
        } else {
            None
        };
        Ok(Self {
            params,
            images,
            mode,
            norm,
        })
    }

    pub fn score(&self, triple: Triple) -> f64 {
        let r = self.params.relations.row(triple.relation);
        let sbr = || {
            translation_distance(
                self.params.entities.row(triple.head),
                r,
                self.params.entities.row(triple.tail),
                self.norm,
            )
        };
        let ibr = || {
            let img = self.images.as_ref().expect("image representations precomputed");
            translation_distance(img.row(triple.head), r, img.row(triple.tail), self.norm)
        };
        match self.mode {
            ScoringMode::Sbr => sbr(),
            ScoringMode::Ibr => ibr(),
            ScoringMode::Union(1.0) => sbr(),
            ScoringMode::Union(0.0) => ibr(),
            ScoringMode::Union(alpha) => alpha * sbr() + (1.0 - alpha) * ibr(),
        }
    }
}

/// Dissimilarity `||h + r - t||` of one triple under `mode`.
#[allow(clippy::too_many_arguments)]
pub fn dissimilarity(
    head: usize,
    relation: usize,
    tail: usize,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    aggregation: AggregationMode,
    mode: ScoringMode,
    norm: Norm,
) -> Result<f64> {
    let r = params.relations.row(relation);
    let sbr = || translation_distance(params.entities.row(head), r, params.entities.row(tail), norm);
    let ibr = || -> Result<f64> {
        let store = store.ok_or(Error::MissingFeatures { entity: head })?;
        let h = entity_ibr(head, params, store, aggregation)?;
        let t = entity_ibr(tail, params, store, aggregation)?;
        Ok(translation_distance(&h, r, &t, norm))
    };
    Ok(match mode {
        ScoringMode::Sbr => sbr(),
        ScoringMode::Ibr => ibr()?,
        ScoringMode::Union(1.0) => sbr(),
        ScoringMode::Union(0.0) => ibr()?,
        ScoringMode::Union(alpha) => alpha * sbr() + (1.0 - alpha) * ibr()?,
    })
}

/// Which test-triple positions are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlotSelection {
    Head,
    Tail,
    #[default]
    Both,
}

impl SlotSelection {
    fn slots(self) -> &'static [Slot] {
        match self {
            SlotSelection::Head => &[Slot::Head],
            SlotSelection::Tail => &[Slot::Tail],
            SlotSelection::Both => &[Slot::Head, Slot::Tail],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankRecord {
    pub triple: Triple,
    pub slot: Slot,
    pub raw: usize,
    pub filter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub mean_rank: f64,
    pub hits_at_10: f64,
    pub count: usize,
}

impl RankMetrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let (mut sum, mut hits, mut count) = (0.0, 0usize, 0usize);
        for r in ranks {
            sum += r as f64;
            hits += usize::from(r <= 10);
            count += 1;
        }
        let n = count.max(1) as f64;
        Self {
            mean_rank: sum / n,
            hits_at_10: hits as f64 / n,
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkPredReport {
    pub mode: ScoringMode,
    pub raw: RankMetrics,
    pub filter: RankMetrics,
    pub ranks: Vec<RankRecord>,
}

impl LinkPredReport {
    pub fn key_values(&self) -> String {
        let m = self.mode.name();
        format!(
            "metric.{m}.raw.mean_rank={}\nmetric.{m}.raw.hits_at_10={}\n\
             metric.{m}.filter.mean_rank={}\nmetric.{m}.filter.hits_at_10={}\n",
            self.raw.mean_rank, self.raw.hits_at_10, self.filter.mean_rank, self.filter.hits_at_10
        )
    }

    pub fn table(&self) -> String {
        format!(
            "mode   setting  mean_rank  hits@10\n\
             {:<6} raw      {:>9.2}  {:>7.4}\n\
             {:<6} filter   {:>9.2}  {:>7.4}\n",
            self.mode.name(),
            self.raw.mean_rank,
            self.raw.hits_at_10,
            self.mode.name(),
            self.filter.mean_rank,
            self.filter.hits_at_10,
        )
    }
}

/// Raw and filtered rank of the true entity for one test triple and slot.
/// Ties with the true score do not count against it.
pub fn rank_triple(scorer: &Scorer<'_>, dataset: &Dataset, triple: Triple, slot: Slot) -> RankRecord {
    let truth = scorer.score(triple);
    let (mut raw, mut filter) = (1, 1);
    for e in 0..dataset.num_entities() {
        let candidate = match slot {
            Slot::Head if e != triple.head => Triple { head: e, ..triple },
            Slot::Tail if e != triple.tail => Triple { tail: e, ..triple },
            _ => continue,
        };
        if scorer.score(candidate) < truth {
            raw += 1;
            if !dataset.is_true(&candidate) {
                filter += 1;
            }
        }
    }
    RankRecord {
        triple,
        slot,
        raw,
        filter,
    }
}

/// Ranks every test triple against all entity substitutions.
#[allow(clippy::too_many_arguments)]
pub fn predict_entities(
    dataset: &Dataset,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    aggregation: AggregationMode,
    mode: ScoringMode,
    norm: Norm,
    slots: SlotSelection,
) -> Result<LinkPredReport> {
    if dataset.test.is_empty() {
        return Err(Error::Config("test split is empty".to_owned()));
    }
    params.check_finite()?;
    let scorer = Scorer::new(params, store, aggregation, mode, norm)?;
    let ranks: Vec<RankRecord> = dataset
        .test
        .par_iter()
        .flat_map_iter(|&t| slots.slots().iter().map(move |&s| (t, s)))
        .map(|(t, s)| rank_triple(&scorer, dataset, t, s))
        .collect();
    Ok(LinkPredReport {
        mode,
        raw: RankMetrics::from_ranks(ranks.iter().map(|r| r.raw)),
        filter: RankMetrics::from_ranks(ranks.iter().map(|r| r.filter)),
        ranks,
    })
}

/// One negative per positive by replacing the head or the tail (even odds)
/// with an entity that does not form a known true triple.
pub fn classification_negatives<R: Rng + ?Sized>(
    positives: &[Triple],
    dataset: &Dataset,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    positives
        .iter()
        .map(|&t| {
            let (first, second) = if rng.random_bool(0.5) {
                (Slot::Head, Slot::Tail)
            } else {
                (Slot::Tail, Slot::Head)
            };
            match dataset.corrupt(t, first, rng) {
                Err(Error::SamplingExhausted { .. }) => dataset.corrupt(t, second, rng),
                other => other,
            }
        })
        .collect()
}

/// Threshold maximizing accuracy when `score <= threshold` predicts positive.
/// Candidates are one below the minimum, the midpoints between consecutive
/// distinct scores and one above the maximum; ties keep the smallest.
/// Returns `(threshold, accuracy)`.
pub fn best_threshold(scored: &[(f64, bool)]) -> (f64, f64) {
    if scored.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len() as f64;
    let total_neg = sorted.iter().filter(|s| !s.1).count();

    // Threshold below everything: all predicted negative.
    let mut best = (sorted[0].0 - 1.0, total_neg as f64 / n);
    let (mut pos_le, mut neg_le) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            if sorted[i].1 {
                pos_le += 1;
            } else {
                neg_le += 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() {
            0.5 * (value + sorted[i].0)
        } else {
            value + 1.0
        };
        let acc = (pos_le + total_neg - neg_le) as f64 / n;
        if acc > best.1 {
            best = (threshold, acc);
        }
    }
    best
}

pub fn threshold_accuracy(scored: &[(f64, bool)], threshold: f64) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let correct = scored
        .iter()
        .filter(|&&(s, label)| (s <= threshold) == label)
        .count();
    correct as f64 / scored.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub mode: ScoringMode,
    /// Per-relation thresholds tuned on validation.
    pub thresholds: BTreeMap<usize, f64>,
    /// Used for relations that have no validation triples.
    pub global_threshold: f64,
    pub validation_accuracy: f64,
    pub accuracy: f64,
}

impl ClassifyReport {
    pub fn key_values(&self, relation_name: impl Fn(usize) -> String) -> String {
        let m = self.mode.name();
        let mut out = format!(
            "metric.{m}.classify.accuracy={}\nmetric.{m}.classify.validation_accuracy={}\n",
            self.accuracy, self.validation_accuracy
        );
        for (&r, &d) in &self.thresholds {
            out.push_str(&format!("threshold.{}={}\n", relation_name(r), d));
        }
        out.push_str(&format!("threshold.global={}\n", self.global_threshold));
        out
    }
}

fn check_balanced(pos: &[Triple], neg: &[Triple], split: &str) -> Result<()> {
    let mut counts: BTreeMap<usize, i64> = BTreeMap::new();
    for t in pos {
        *counts.entry(t.relation).or_default() += 1;
    }
    for t in neg {
        *counts.entry(t.relation).or_default() -= 1;
    }
    if let Some((r, _)) = counts.iter().find(|(_, &c)| c != 0) {
        return Err(Error::Config(format!(
            "{split}: relation {r} has different numbers of positive and negative triples"
        )));
    }
    Ok(())
}

/// Tunes one threshold per relation on validation, then reports test
/// accuracy with the thresholds frozen.
#[allow(clippy::too_many_arguments)]
pub fn classify_triples(
    valid_pos: &[Triple],
    valid_neg: &[Triple],
    test_pos: &[Triple],
    test_neg: &[Triple],
    params: &ModelParams,
    store: Option<&FeatureStore>,
    aggregation: AggregationMode,
    mode: ScoringMode,
    norm: Norm,
) -> Result<ClassifyReport> {
    check_balanced(valid_pos, valid_neg, "validation")?;
    check_balanced(test_pos, test_neg, "test")?;
    params.check_finite()?;
    let scorer = Scorer::new(params, store, aggregation, mode, norm)?;
    let label = |pos: &[Triple], neg: &[Triple]| -> Vec<(Triple, f64, bool)> {
        pos.iter()
            .map(|&t| (t, true))
            .chain(neg.iter().map(|&t| (t, false)))
            .map(|(t, l)| (t, scorer.score(t), l))
            .collect()
    };
    let valid = label(valid_pos, valid_neg);
    let test = label(test_pos, test_neg);

    let mut by_relation: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for &(t, s, l) in &valid {
        by_relation.entry(t.relation).or_default().push((s, l));
    }
    let all_valid: Vec<(f64, bool)> = valid.iter().map(|&(_, s, l)| (s, l)).collect();
    let (global_threshold, _) = best_threshold(&all_valid);
    let thresholds: BTreeMap<usize, f64> = by_relation
        .iter()
        .map(|(&r, scored)| (r, best_threshold(scored).0))
        .collect();
    let threshold_for = |r: usize| thresholds.get(&r).copied().unwrap_or(global_threshold);
    let accuracy_of = |rows: &[(Triple, f64, bool)]| {
        if rows.is_empty() {
            return 0.0;
        }
        let correct = rows
            .iter()
            .filter(|&&(t, s, l)| (s <= threshold_for(t.relation)) == l)
            .count();
        correct as f64 / rows.len() as f64
    };
    Ok(ClassifyReport {
        mode,
        validation_accuracy: accuracy_of(&valid),
        accuracy: accuracy_of(&test),
        thresholds,
        global_threshold,
    })
}

/// Attention weights of an entity's images, highest first.
pub fn inspect_attention(
    entity: usize,
    params: &ModelParams,
    store: &FeatureStore,
) -> Result<Vec<(usize, f64)>> {
    let enc = encode_entity(entity, params, store, AggregationMode::Att)?;
    let mut ranked: Vec<(usize, f64)> = enc.weights.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Ranks relations by `||(e_I(a) - e_I(b)) - r||`, closest first.
pub fn regularity_probe(
    a: usize,
    b: usize,
    params: &ModelParams,
    store: &FeatureStore,
    aggregation: AggregationMode,
    norm: Norm,
) -> Result<Vec<(usize, f64)>> {
    let ea = entity_ibr(a, params, store, aggregation)?;
    let eb = entity_ibr(b, params, store, aggregation)?;
    let zero = vec![0.0; ea.len()];
    let diff = residual(&ea, &zero, &eb);
    let mut ranked: Vec<(usize, f64)> = (0..params.num_relations())
        .map(|r| {
            (
                r,
                translation_distance(&diff, &zero, params.relations.row(r), norm),
            )
        })
        .collect();
    ranked.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Vocabulary;
    use crate::model::Norm;

    fn dataset(ne: usize, nr: usize, train: Vec<Triple>, test: Vec<Triple>) -> Dataset {
        let e: Vec<String> = (0..ne).map(|i| format!("e{i}")).collect();
        let r: Vec<String> = (0..nr).map(|i| format!("r{i}")).collect();
        Dataset::new(Vocabulary::from_names(&e, &r).unwrap(), train, vec![], test).unwrap()
    }

    fn store_for(params: &ModelParams) -> FeatureStore {
        let mut s = FeatureStore::new(params.image_dim());
        for e in 0..params.num_entities() {
            s.insert(e, vec![vec![0.0; params.image_dim()]]).unwrap();
        }
        s
    }

    #[test]
    fn single_entity_ranks_are_one() {
        let ds = dataset(1, 1, vec![], vec![Triple::new(0, 0, 0)]);
        let params = ModelParams::zeros(1, 1, 2, 2);
        let rep = predict_entities(
            &ds,
            &params,
            None,
            AggregationMode::Att,
            ScoringMode::Sbr,
            Norm::L1,
            SlotSelection::Both,
        )
        .unwrap();
        assert_eq!(rep.raw.mean_rank, 1.0);
        assert_eq!(rep.filter.hits_at_10, 1.0);
        assert_eq!(rep.ranks.len(), 2);
    }

    #[test]
    fn union_endpoints_and_zero_params() {
        let mut params = ModelParams::zeros(3, 1, 2, 2);
        params.entities.row_mut(1).copy_from_slice(&[0.3, -0.2]);
        params.projection = Matrix::identity(2);
        let mut store = store_for(&params);
        store.insert(2, vec![vec![1.0, 0.5]]).unwrap();
        let score = |mode| {
            dissimilarity(
                1,
                0,
                2,
                &params,
                Some(&store),
                AggregationMode::Att,
                mode,
                Norm::L1,
            )
            .unwrap()
        };
        assert_eq!(score(ScoringMode::Union(1.0)), score(ScoringMode::Sbr));
        assert_eq!(score(ScoringMode::Union(0.0)), score(ScoringMode::Ibr));
        assert!(ScoringMode::union(1.5).is_err());

        let zero = ModelParams::zeros(3, 1, 2, 2);
        let zstore = store_for(&zero);
        for mode in [ScoringMode::Sbr, ScoringMode::Ibr, ScoringMode::Union(0.5)] {
            assert_eq!(
                dissimilarity(
                    0,
                    0,
                    1,
                    &zero,
                    Some(&zstore),
                    AggregationMode::Att,
                    mode,
                    Norm::L2
                )
                .unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn threshold_search_cases() {
        let (d, acc) = best_threshold(&[(1.0, true), (2.0, true), (3.0, false), (4.0, false)]);
        assert_eq!((d, acc), (2.5, 1.0));
        let (d, acc) = best_threshold(&[(2.0, true), (2.0, false), (2.0, true), (2.0, false)]);
        assert_eq!(acc, 0.5);
        assert_eq!(d, 1.0, "ties keep the smallest candidate");
    }

    #[test]
    fn classify_separated_and_degenerate() {
        // One relation, entity 0 at origin: score(h, 0, t) = ||e_h - e_t||.
        let mut params = ModelParams::zeros(4, 1, 1, 1);
        params.entities[(1, 0)] = 0.1;
        params.entities[(2, 0)] = 0.9;
        params.entities[(3, 0)] = 1.0;
        let pos = vec![Triple::new(0, 0, 1), Triple::new(1, 0, 0)];
        let neg = vec![Triple::new(0, 0, 2), Triple::new(3, 0, 0)];
        let rep = classify_triples(
            &pos,
            &neg,
            &pos,
            &neg,
            &params,
            None,
            AggregationMode::Att,
            ScoringMode::Sbr,
            Norm::L1,
        )
        .unwrap();
        assert_eq!(rep.accuracy, 1.0);

        let flat = ModelParams::zeros(4, 1, 1, 1);
        let rep = classify_triples(
            &pos,
            &neg,
            &pos,
            &neg,
            &flat,
            None,
            AggregationMode::Att,
            ScoringMode::Sbr,
            Norm::L1,
        )
        .unwrap();
        assert_eq!(rep.accuracy, 0.5);

        assert!(classify_triples(
            &pos,
            &neg[..1],
            &pos,
            &neg,
            &params,
            None,
            AggregationMode::Att,
            ScoringMode::Sbr,
            Norm::L1
        )
        .is_err());
    }

    #[test]
    fn unseen_relation_uses_global_threshold() {
        let mut params = ModelParams::zeros(3, 2, 1, 1);
        params.entities[(1, 0)] = 0.1;
        params.entities[(2, 0)] = 1.0;
        let vpos = vec![Triple::new(0, 0, 1)];
        let vneg = vec![Triple::new(0, 0, 2)];
        let tpos = vec![Triple::new(0, 1, 1)];
        let tneg = vec![Triple::new(0, 1, 2)];
        let rep = classify_triples(
            &vpos,
            &vneg,
            &tpos,
            &tneg,
            &params,
            None,
            AggregationMode::Att,
            ScoringMode::Sbr,
            Norm::L1,
        )
        .unwrap();
        assert!(!rep.thresholds.contains_key(&1));
        assert_eq!(rep.accuracy, 1.0);
    }

    #[test]
    fn attention_inspection_cases() {
        let mut params = ModelParams::zeros(1, 1, 2, 2);
        params.projection = Matrix::identity(2);
        params.entities.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        let mut store = FeatureStore::new(2);
        store.insert(0, vec![vec![0.5, 0.5]]).unwrap();
        assert_eq!(inspect_attention(0, &params, &store).unwrap(), vec![(0, 1.0)]);
        store.insert(0, vec![vec![0.2, 0.1]; 3]).unwrap();
        let w = inspect_attention(0, &params, &store).unwrap();
        assert!(w.iter().all(|&(_, x)| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(w.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        store.insert(0, vec![vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(inspect_attention(0, &params, &store).unwrap()[0].0, 1);
    }

    #[test]
    fn regularity_probe_cases() {
        let mut params = ModelParams::zeros(2, 3, 2, 2);
        params.relations.row_mut(0).copy_from_slice(&[0.5, 0.5]);
        params.relations.row_mut(1).copy_from_slice(&[0.1, 0.0]);
        params.relations.row_mut(2).copy_from_slice(&[0.3, 0.0]);
        let store = store_for(&params);
        let ranked = regularity_probe(0, 0, &params, &store, AggregationMode::Att, Norm::L1).unwrap();
        assert_eq!(ranked.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 0]);

        let one = ModelParams::zeros(2, 1, 2, 2);
        let ranked = regularity_probe(0, 1, &one, &store_for(&one), AggregationMode::Att, Norm::L2).unwrap();
        assert_eq!(ranked[0].0, 0);
    }
}
