//! Synthetic knowledge graphs with planted translational structure and image
//! features derived from the hidden entity vectors.
//!
//! Entities are random unit vectors, relations random vectors of norm 0.5.
//! Each relation picks distinct heads uniformly and links every head to the
//! entity nearest to `head + relation` (the head itself excluded). An
//! informative image of an entity is `A e + noise` with `A` a fixed matrix of
//! orthonormal columns; noise images are isotropic Gaussians with the same
//! expected norm, so only their direction gives them away.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_features, write_names};
use crate::kg::{format_triples, Dataset, Triple, Vocabulary};
use crate::matrix::{axpy, dot, l2_norm, Matrix};
use crate::model::FeatureStore;

pub const RELATION_NORM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub entity_dim: usize,
    pub image_dim: usize,
    pub triples_per_relation: usize,
    pub images_per_entity: usize,
    pub noise_images_per_entity: usize,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 50,
            n_relations: 5,
            entity_dim: 16,
            image_dim: 64,
            triples_per_relation: 40,
            images_per_entity: 4,
            noise_images_per_entity: 1,
            feature_noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_entities,
            self.n_relations,
            self.entity_dim,
            self.image_dim,
            self.triples_per_relation,
            self.images_per_entity,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(
                "synthetic counts and dimensions must be at least 1".to_owned(),
            ));
        }
        if self.image_dim < self.entity_dim {
            return Err(Error::Config(format!(
                "image_dim {} must be at least entity_dim {}",
                self.image_dim, self.entity_dim
            )));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(Error::Config(
                "feature_noise_sigma must be finite and non-negative".to_owned(),
            ));
        }
        Ok(())
    }
}

/// The hidden geometry a synthetic KG was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub entities: Matrix,
    pub relations: Matrix,
    /// `d_i x d_s` with orthonormal columns.
    pub mixing: Matrix,
    /// Positions of the noise images in each entity's image list.
    pub noise_images: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// Entity nearest to `head + relation`, excluding `head`.
    pub fn planted_tail(&self, head: usize, relation: usize) -> usize {
        let target: Vec<f64> = self
            .entities
            .row(head)
            .iter()
            .zip(self.relations.row(relation))
            .map(|(h, r)| h + r)
            .collect();
        let mut best = (usize::MAX, f64::INFINITY);
        for e in (0..self.entities.rows()).filter(|&e| e != head) {
            let d: f64 = self
                .entities
                .row(e)
                .iter()
                .zip(&target)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d < best.1 {
                best = (e, d);
            }
        }
        best.0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let row = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for e in 0..self.entities.rows() {
            let _ = writeln!(out, "entity\t{e}\t{}", row(self.entities.row(e)));
        }
        for r in 0..self.relations.rows() {
            let _ = writeln!(out, "relation\t{r}\t{}", row(self.relations.row(r)));
        }
        for (e, noise) in self.noise_images.iter().enumerate() {
            if !noise.is_empty() {
                let idx = noise.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
                let _ = writeln!(out, "noise_images\t{e}\t{idx}");
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub features: FeatureStore,
    pub truth: GroundTruth,
}

impl SynthOutput {
    /// Writes triple files, vocabularies, the feature store and the
    /// ground-truth sidecar into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab = &self.dataset.vocab;
        for (name, split) in [
            ("train.txt", &self.dataset.train),
            ("valid.txt", &self.dataset.valid),
            ("test.txt", &self.dataset.test),
        ] {
            write_atomic(dir.join(name), format_triples(split, vocab).as_bytes())?;
        }
        write_names(dir.join("entities.txt"), vocab.entity_names())?;
        write_names(dir.join("relations.txt"), vocab.relation_names())?;
        write_features(dir.join("features.bin"), &self.features)?;
        write_atomic(dir.join("ground_truth.txt"), self.truth.to_text().as_bytes())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = gaussian_vec(dim, rng);
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `rows x cols` matrix with orthonormal columns (Gram-Schmidt on Gaussians).
fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian_vec(rows, rng);
        for b in &basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
        let n = l2_norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

/// Splits `triples` into train/valid/test (80/10/10) so that every entity of a
/// held-out triple still occurs in training.
fn split<R: Rng + ?Sized>(mut triples: Vec<Triple>, rng: &mut R) -> (Vec<Triple>, Vec<Triple>, Vec<Triple>) {
    triples.shuffle(rng);
    let held_target = triples.len() / 10;
    let mut degree = std::collections::HashMap::<usize, usize>::new();
    for t in &triples {
        *degree.entry(t.head).or_default() += 1;
        *degree.entry(t.tail).or_default() += 1;
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in triples {
        let removable = if t.head == t.tail {
            degree[&t.head] > 2
        } else {
            degree[&t.head] > 1 && degree[&t.tail] > 1
        };
        let target = if test.len() < held_target {
            Some(&mut test)
        } else if valid.len() < held_target {
            Some(&mut valid)
        } else {
            None
        };
        match target {
            Some(split) if removable => {
                *degree.get_mut(&t.head).unwrap() -= 1;
                *degree.get_mut(&t.tail).unwrap() -= 1;
                split.push(t);
            }
            _ => train.push(t),
        }
    }
    (train, valid, test)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ne, nr, ds, di) = (cfg.n_entities, cfg.n_relations, cfg.entity_dim, cfg.image_dim);

    let mut entities = Matrix::zeros(ne, ds);
    for e in 0..ne {
        entities
            .row_mut(e)
            .copy_from_slice(&random_direction(ds, &mut rng));
    }
    let mut relations = Matrix::zeros(nr, ds);
    for r in 0..nr {
        let dir = random_direction(ds, &mut rng);
        for (x, d) in relations.row_mut(r).iter_mut().zip(dir) {
            *x = RELATION_NORM * d;
        }
    }
    let mixing = orthonormal_columns(di, ds, &mut rng);
    let mut truth = GroundTruth {
        entities,
        relations,
        mixing,
        noise_images: vec![Vec::new(); ne],
    };

    // One triple per distinct head and relation; the tail excludes the head.
    let available = if ne >= 2 { ne } else { 0 };
    let mut triples = Vec::with_capacity(nr * cfg.triples_per_relation);
    let mut seen = HashSet::new();
    for r in 0..nr {
        if cfg.triples_per_relation > available {
            return Err(Error::GenerationShortfall {
                relation: r,
                requested: cfg.triples_per_relation,
                available,
            });
        }
        let mut heads: Vec<usize> = (0..ne).collect();
        heads.shuffle(&mut rng);
        for &h in &heads[..cfg.triples_per_relation] {
            let t = Triple::new(h, r, truth.planted_tail(h, r));
            if seen.insert(t) {
                triples.push(t);
            }
        }
    }

    let (train, valid, test) = split(triples, &mut rng);
    let names: Vec<String> = (0..ne).map(|i| format!("e{i}")).collect();
    let rel_names: Vec<String> = (0..nr).map(|i| format!("r{i}")).collect();
    let vocab = Vocabulary::from_names(&names, &rel_names)?;
    let dataset = Dataset::new(vocab, train, valid, test)?;

    let sigma = cfg.feature_noise_sigma;
    let noise_scale = ((1.0 + di as f64 * sigma * sigma) / di as f64).sqrt();
    let mut features = FeatureStore::new(di);
    for e in 0..ne {
        let clean = truth.mixing.mul_vec(truth.entities.row(e));
        let mut images: Vec<(bool, Vec<f64>)> = Vec::new();
        for _ in 0..cfg.images_per_entity {
            let img = clean
                .iter()
                .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            images.push((false, img));
        }
        for _ in 0..cfg.noise_images_per_entity {
            let img = gaussian_vec(di, &mut rng)
                .into_iter()
                .map(|x| noise_scale * x)
                .collect();
            images.push((true, img));
        }
        images.shuffle(&mut rng);
        truth.noise_images[e] = images
            .iter()
            .enumerate()
            .filter(|(_, (noise, _))| *noise)
            .map(|(i, _)| i)
            .collect();
        // Rounded to the f32 precision of the feature file so that a written
        // store reads back identical.
        let images = images
            .into_iter()
            .map(|(_, v)| v.into_iter().map(|x| x as f32 as f64).collect())
            .collect();
        features.insert(e, images)?;
    }

    Ok(SynthOutput {
        dataset,
        features,
        truth,
    })
}

/// Reassigns whole image lists across entities by a random permutation.
pub fn shuffle_entity_features<R: Rng + ?Sized>(store: &FeatureStore, rng: &mut R) -> FeatureStore {
    let entities: Vec<usize> = store.iter().map(|(e, _)| e).collect();
    let mut targets = entities.clone();
    targets.shuffle(rng);
    let mut out = FeatureStore::new(store.dim());
    for (&src, &dst) in entities.iter().zip(&targets) {
        let images = store.get(src).expect("listed entity has images").to_vec();
        out.insert(dst, images)
            .expect("images were valid in the source store");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let out = generate(&SynthConfig::default()).unwrap();
        let ds = &out.dataset;
        assert_eq!(ds.num_entities(), 50);
        assert_eq!(ds.num_relations(), 5);
        assert_eq!(ds.all_true().len(), 200);
        assert_eq!(ds.test.len(), 20);
        assert_eq!(ds.valid.len(), 20);
        assert_eq!(ds.train.len(), 160);
        assert_eq!(out.features.entity_count(), 50);
        for (e, imgs) in out.features.iter() {
            assert_eq!(imgs.len(), 5);
            assert_eq!(out.truth.noise_images[e].len(), 1);
        }
    }

    #[test]
    fn triples_follow_the_argmin_rule() {
        let out = generate(&SynthConfig::default()).unwrap();
        for t in out.dataset.all_true() {
            assert_ne!(t.head, t.tail);
            assert_eq!(out.truth.planted_tail(t.head, t.relation), t.tail);
        }
    }

    #[test]
    fn no_cold_start_entities() {
        for seed in 0..5 {
            let out = generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let ds = &out.dataset;
            let seen: HashSet<usize> = ds.train.iter().flat_map(|t| [t.head, t.tail]).collect();
            for t in ds.valid.iter().chain(&ds.test) {
                assert!(seen.contains(&t.head) && seen.contains(&t.tail));
            }
        }
    }

    #[test]
    fn noiseless_features_are_exact_images() {
        let out = generate(&SynthConfig {
            noise_images_per_entity: 0,
            feature_noise_sigma: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let mtm_is_identity = {
            let a = &out.truth.mixing;
            (0..a.cols()).all(|i| {
                (0..a.cols()).all(|j| {
                    let c: f64 = (0..a.rows()).map(|k| a[(k, i)] * a[(k, j)]).sum();
                    (c - f64::from(u8::from(i == j))).abs() < 1e-12
                })
            })
        };
        assert!(mtm_is_identity);
        for (e, imgs) in out.features.iter() {
            let clean: Vec<f64> = out
                .truth
                .mixing
                .mul_vec(out.truth.entities.row(e))
                .into_iter()
                .map(|x| x as f32 as f64)
                .collect();
            for img in imgs {
                assert_eq!(img, &clean);
            }
        }
    }

    #[test]
    fn shortfall_is_reported() {
        let cfg = SynthConfig {
            n_entities: 2,
            n_relations: 1,
            triples_per_relation: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate(&cfg),
            Err(Error::GenerationShortfall { available: 2, .. })
        ));
        let ok = generate(&SynthConfig {
            triples_per_relation: 2,
            ..cfg
        })
        .unwrap();
        assert_eq!(ok.dataset.all_true().len(), 2);
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.dataset.train, b.dataset.train);
        assert_eq!(a.features, b.features);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn shuffled_features_keep_the_multiset() {
        let out = generate(&SynthConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shuffled = shuffle_entity_features(&out.features, &mut rng);
        assert_eq!(shuffled.entity_count(), out.features.entity_count());
        let moved = (0..50)
            .filter(|&e| shuffled.get(e) != out.features.get(e))
            .count();
        assert!(moved > 40);
    }
}
