//! Model parameters and every differentiable quantity of the joint model:
//! image projection, instance attention, multi-instance aggregation and the
//! four-term translational energy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

/// Vector norm used for every translational residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => dot(v, v).sqrt(),
        }
    }

    /// Writes the (sub)gradient of the norm at `v` into `out`. Uses
    /// `sign(0) = 0` for L1 and the zero vector at the origin for L2.
    pub fn gradient_into(self, v: &[f64], out: &mut [f64]) {
        match self {
            Norm::L1 => {
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            Norm::L2 => {
                let n = dot(v, v).sqrt();
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = if n > 0.0 { x / n } else { 0.0 };
                }
            }
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm {other:?} (expected l1|l2)"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

/// How the projected image vectors of one entity are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    /// Attention-weighted sum.
    #[default]
    Att,
    /// Plain mean.
    Avg,
    /// The single image with the highest attention weight.
    Max,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [AggregationMode::Att, AggregationMode::Avg, AggregationMode::Max];
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "att" => Ok(AggregationMode::Att),
            "avg" => Ok(AggregationMode::Avg),
            "max" => Ok(AggregationMode::Max),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?} (expected att|avg|max)"
            ))),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Att => "att",
            AggregationMode::Avg => "avg",
            AggregationMode::Max => "max",
        })
    }
}

/// Fixed image feature vectors per entity. Entities without a record have an
/// empty list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    images: Vec<Vec<Vec<f64>>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            images: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sets the image list of `entity`, replacing any previous one.
    pub fn insert(&mut self, entity: usize, images: Vec<Vec<f64>>) -> Result<()> {
        if images.is_empty() {
            return Err(Error::MissingFeatures { entity });
        }
        if let Some(bad) = images.iter().find(|v| v.len() != self.dim) {
            return Err(Error::Dimension(format!(
                "entity {entity}: feature of length {} in a store of dimension {}",
                bad.len(),
                self.dim
            )));
        }
        if images.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("image feature of entity {entity}")));
        }
        if self.images.len() <= entity {
            self.images.resize_with(entity + 1, Vec::new);
        }
        self.images[entity] = images;
        Ok(())
    }

    pub fn get(&self, entity: usize) -> Option<&[Vec<f64>]> {
        self.images
            .get(entity)
            .filter(|imgs| !imgs.is_empty())
            .map(Vec::as_slice)
    }

    pub fn require(&self, entity: usize) -> Result<&[Vec<f64>]> {
        self.get(entity).ok_or(Error::MissingFeatures { entity })
    }

    /// Entities with at least one image, ascending.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[Vec<f64>])> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, imgs)| !imgs.is_empty())
            .map(|(e, imgs)| (e, imgs.as_slice()))
    }

    pub fn entity_count(&self) -> usize {
        self.iter().count()
    }

    /// Checks that entities `0..num_entities` all have features and that no
    /// list exceeds `max_images`.
    pub fn validate(&self, num_entities: usize, max_images: usize) -> Result<()> {
        for entity in 0..num_entities {
            let n = self.require(entity)?.len();
            if n > max_images {
                return Err(Error::Config(format!(
                    "entity {entity} has {n} images, more than the limit of {max_images}"
                )));
            }
        }
        Ok(())
    }

    /// Keeps at most `max_images` per entity, in stored order.
    pub fn truncate(&mut self, max_images: usize) {
        for imgs in &mut self.images {
            imgs.truncate(max_images.max(1));
        }
    }
}

/// Structure-based entity embeddings (`|E| x d_s`), relation embeddings
/// (`|R| x d_s`) and the shared image projection (`d_s x d_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub entities: Matrix,
    pub relations: Matrix,
    pub projection: Matrix,
}

impl ModelParams {
    pub fn zeros(num_entities: usize, num_relations: usize, entity_dim: usize, image_dim: usize) -> Self {
        Self {
            entities: Matrix::zeros(num_entities, entity_dim),
            relations: Matrix::zeros(num_relations, entity_dim),
            projection: Matrix::zeros(entity_dim, image_dim),
        }
    }

    /// Uniform `±6/√d_s` for embeddings (rows then clamped to the unit ball)
    /// and uniform `±6/√d_i` for the projection.
    pub fn random<R: Rng + ?Sized>(
        num_entities: usize,
        num_relations: usize,
        entity_dim: usize,
        image_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(num_entities, num_relations, entity_dim, image_dim);
        let bound = 6.0 / (entity_dim as f64).sqrt();
        for x in params.entities.as_mut_slice() {
            *x = rng.random_range(-bound..=bound);
        }
        for x in params.relations.as_mut_slice() {
            *x = rng.random_range(-bound..=bound);
        }
        params.randomize_projection(rng);
        params.entities.clamp_row_norms();
        params.relations.clamp_row_norms();
        params
    }

    pub fn randomize_projection<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = 6.0 / (self.image_dim().max(1) as f64).sqrt();
        for x in self.projection.as_mut_slice() {
            *x = rng.random_range(-bound..=bound);
        }
    }

    pub fn entity_dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite() && self.projection.is_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".to_owned()))
        }
    }
}

/// Maps an image feature into entity space: `M · f`.
pub fn project(projection: &Matrix, feature: &[f64]) -> Vec<f64> {
    projection.mul_vec(feature)
}

/// Softmax over `p_i · e_S`, with the max logit subtracted before
/// exponentiation.
pub fn attention(projected: &[Vec<f64>], structure: &[f64]) -> Vec<f64> {
    assert!(!projected.is_empty(), "attention over an empty image list");
    let logits: Vec<f64> = projected.iter().map(|p| dot(p, structure)).collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest weight; the lowest index wins ties.
pub fn argmax(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate().skip(1) {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Pools projected image vectors into one image-based representation.
pub fn aggregate(projected: &[Vec<f64>], structure: &[f64], mode: AggregationMode) -> Vec<f64> {
    let weights = attention(projected, structure);
    pool(projected, &weights, mode)
}

fn pool(projected: &[Vec<f64>], weights: &[f64], mode: AggregationMode) -> Vec<f64> {
    let dim = projected[0].len();
    match mode {
        AggregationMode::Att => {
            let mut out = vec![0.0; dim];
            for (p, &w) in projected.iter().zip(weights) {
                axpy(w, p, &mut out);
            }
            out
        }
        AggregationMode::Avg => {
            let mut out = vec![0.0; dim];
            for p in projected {
                axpy(1.0, p, &mut out);
            }
            let n = projected.len() as f64;
            out.iter_mut().for_each(|x| *x /= n);
            out
        }
        AggregationMode::Max => projected[argmax(weights)].clone(),
    }
}

/// Forward pass of the image encoder for one entity, kept for backprop.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    pub projected: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub aggregated: Vec<f64>,
}

pub fn encode_entity(
    entity: usize,
    params: &ModelParams,
    store: &FeatureStore,
    mode: AggregationMode,
) -> Result<ImageEncoding> {
    let features = store.require(entity)?;
    if store.dim() != params.image_dim() {
        return Err(Error::Dimension(format!(
            "features have dimension {} but the projection expects {}",
            store.dim(),
            params.image_dim()
        )));
    }
    let projected: Vec<Vec<f64>> = features.iter().map(|f| project(&params.projection, f)).collect();
    let weights = attention(&projected, params.entities.row(entity));
    let aggregated = pool(&projected, &weights, mode);
    Ok(ImageEncoding {
        projected,
        weights,
        aggregated,
    })
}

/// Aggregated image-based representation of `entity`.
pub fn entity_ibr(
    entity: usize,
    params: &ModelParams,
    store: &FeatureStore,
    mode: AggregationMode,
) -> Result<Vec<f64>> {
    Ok(encode_entity(entity, params, store, mode)?.aggregated)
}

/// Image-based representations for entities `0..|E|`.
pub fn all_entity_ibr(params: &ModelParams, store: &FeatureStore, mode: AggregationMode) -> Result<Matrix> {
    let mut out = Matrix::zeros(params.num_entities(), params.entity_dim());
    for e in 0..params.num_entities() {
        let v = entity_ibr(e, params, store, mode)?;
        out.row_mut(e).copy_from_slice(&v);
    }
    Ok(out)
}

/// `head + relation - tail`.
pub fn residual(head: &[f64], relation: &[f64], tail: &[f64]) -> Vec<f64> {
    head.iter()
        .zip(relation)
        .zip(tail)
        .map(|((h, r), t)| h + r - t)
        .collect()
}

pub fn translation_distance(head: &[f64], relation: &[f64], tail: &[f64], norm: Norm) -> f64 {
    norm.of(&residual(head, relation, tail))
}

/// The four energy terms of a triple and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub total: f64,
    pub ss: f64,
    pub si: f64,
    pub is: f64,
    pub ii: f64,
}

/// `E_SS + E_SI + E_IS + E_II` for `(head, relation, tail)`.
pub fn energy(
    head: usize,
    relation: usize,
    tail: usize,
    params: &ModelParams,
    store: &FeatureStore,
    mode: AggregationMode,
    norm: Norm,
) -> Result<EnergyTerms> {
    let h_img = entity_ibr(head, params, store, mode)?;
    let t_img = entity_ibr(tail, params, store, mode)?;
    Ok(energy_from_parts(
        params.entities.row(head),
        &h_img,
        params.relations.row(relation),
        params.entities.row(tail),
        &t_img,
        norm,
    ))
}

pub(crate) fn energy_from_parts(
    h_s: &[f64],
    h_i: &[f64],
    r: &[f64],
    t_s: &[f64],
    t_i: &[f64],
    norm: Norm,
) -> EnergyTerms {
    let ss = translation_distance(h_s, r, t_s, norm);
    let si = translation_distance(h_s, r, t_i, norm);
    let is = translation_distance(h_i, r, t_s, norm);
    let ii = translation_distance(h_i, r, t_i, norm);
    EnergyTerms {
        total: ss + si + is + ii,
        ss,
        si,
        is,
        ii,
    }
}

/// Structure-only energy `||h + r - t||`.
pub fn transe_energy(head: usize, relation: usize, tail: usize, params: &ModelParams, norm: Norm) -> f64 {
    translation_distance(
        params.entities.row(head),
        params.relations.row(relation),
        params.entities.row(tail),
        norm,
    )
}
