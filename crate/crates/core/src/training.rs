//! Margin ranking objective, analytic gradients and the mini-batch SGD loop.
//!
//! The loss of one (positive, negative) pair is
//! `max(0, margin + E(pos) - E(neg))`. Its gradient is derived by hand through
//! the four translational residuals, the pooling of projected images and,
//! for attention pooling, the softmax weights (including the path into the
//! structure embedding unless `attention_detached` is set).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{InitStrategy, ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::io::load_checkpoint;
use crate::kg::{epoch_batches, Dataset, Triple};
use crate::matrix::{axpy, dot, Matrix};
use crate::model::{
    argmax, encode_entity, energy, residual, transe_energy, AggregationMode, FeatureStore, ImageEncoding,
    ModelParams,
};

/// Pairs per gradient work unit. Fixed so that the reduction order does not
/// depend on the number of threads.
const CHUNK_PAIRS: usize = 16;

/// Energy of a triple under the configured model.
pub fn triple_energy(
    triple: Triple,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
) -> Result<f64> {
    match cfg.model {
        ModelKind::Transe => Ok(transe_energy(
            triple.head,
            triple.relation,
            triple.tail,
            params,
            cfg.norm,
        )),
        ModelKind::Ikrl => {
            let store = store.ok_or(Error::MissingFeatures { entity: triple.head })?;
            Ok(energy(
                triple.head,
                triple.relation,
                triple.tail,
                params,
                store,
                cfg.aggregation,
                cfg.norm,
            )?
            .total)
        }
    }
}

/// Hinge loss `max(0, margin + E(pos) - E(neg))`.
pub fn pair_loss(
    pos: Triple,
    neg: Triple,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let gap = cfg.margin + triple_energy(pos, params, store, cfg)? - triple_energy(neg, params, store, cfg)?;
    Ok(gap.max(0.0))
}

/// Gradient of a sum of pair losses. Only touched embedding rows are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entities: BTreeMap<usize, Vec<f64>>,
    pub relations: BTreeMap<usize, Vec<f64>>,
    /// `None` for the structure-only model.
    pub projection: Option<Matrix>,
}

impl Gradients {
    pub fn zeros(params: &ModelParams, model: ModelKind) -> Self {
        Self {
            entities: BTreeMap::new(),
            relations: BTreeMap::new(),
            projection: match model {
                ModelKind::Ikrl => Some(Matrix::zeros(params.entity_dim(), params.image_dim())),
                ModelKind::Transe => None,
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        let rows_zero = |m: &BTreeMap<usize, Vec<f64>>| m.values().flatten().all(|&x| x == 0.0);
        rows_zero(&self.entities)
            && rows_zero(&self.relations)
            && self
                .projection
                .as_ref()
                .is_none_or(|m| m.as_slice().iter().all(|&x| x == 0.0))
    }

    fn entity_row(&mut self, entity: usize, dim: usize) -> &mut Vec<f64> {
        self.entities.entry(entity).or_insert_with(|| vec![0.0; dim])
    }

    fn relation_row(&mut self, relation: usize, dim: usize) -> &mut Vec<f64> {
        self.relations.entry(relation).or_insert_with(|| vec![0.0; dim])
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (&e, g) in &other.entities {
            let dim = g.len();
            axpy(1.0, g, self.entity_row(e, dim));
        }
        for (&r, g) in &other.relations {
            let dim = g.len();
            axpy(1.0, g, self.relation_row(r, dim));
        }
        if let (Some(mine), Some(theirs)) = (self.projection.as_mut(), other.projection.as_ref()) {
            mine.add_scaled(1.0, theirs);
        }
    }

    /// Dense entity gradient, mostly for tests.
    pub fn entity_matrix(&self, num_entities: usize, dim: usize) -> Matrix {
        let mut m = Matrix::zeros(num_entities, dim);
        for (&e, g) in &self.entities {
            m.row_mut(e).copy_from_slice(g);
        }
        m
    }

    pub fn relation_matrix(&self, num_relations: usize, dim: usize) -> Matrix {
        let mut m = Matrix::zeros(num_relations, dim);
        for (&r, g) in &self.relations {
            m.row_mut(r).copy_from_slice(g);
        }
        m
    }
}

/// Analytic gradient of [`pair_loss`]. Exactly zero when the margin is met.
pub fn gradients(
    pos: Triple,
    neg: Triple,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros(params, cfg.model);
    accumulate_pair(pos, neg, params, store, cfg, &mut grads)?;
    Ok(grads)
}

/// Adds the gradient of one pair into `grads` and returns its loss.
fn accumulate_pair(
    pos: Triple,
    neg: Triple,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
    grads: &mut Gradients,
) -> Result<f64> {
    let loss = pair_loss(pos, neg, params, store, cfg)?;
    if loss > 0.0 {
        accumulate_triple(pos, 1.0, params, store, cfg, grads)?;
        accumulate_triple(neg, -1.0, params, store, cfg, grads)?;
    }
    Ok(loss)
}

fn accumulate_triple(
    triple: Triple,
    sign: f64,
    params: &ModelParams,
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
    grads: &mut Gradients,
) -> Result<()> {
    let dim = params.entity_dim();
    let (h, r, t) = (triple.head, triple.relation, triple.tail);
    let h_s = params.entities.row(h);
    let t_s = params.entities.row(t);
    let rel = params.relations.row(r);

    let norm_grad = |res: Vec<f64>| {
        let mut g = vec![0.0; res.len()];
        cfg.norm.gradient_into(&res, &mut g);
        g
    };
    let g_ss = norm_grad(residual(h_s, rel, t_s));

    if cfg.model == ModelKind::Transe {
        axpy(sign, &g_ss, grads.entity_row(h, dim));
        axpy(-sign, &g_ss, grads.entity_row(t, dim));
        axpy(sign, &g_ss, grads.relation_row(r, dim));
        return Ok(());
    }

    let store = store.ok_or(Error::MissingFeatures { entity: h })?;
    let h_enc = encode_entity(h, params, store, cfg.aggregation)?;
    let t_enc = encode_entity(t, params, store, cfg.aggregation)?;
    let g_si = norm_grad(residual(h_s, rel, &t_enc.aggregated));
    let g_is = norm_grad(residual(&h_enc.aggregated, rel, t_s));
    let g_ii = norm_grad(residual(&h_enc.aggregated, rel, &t_enc.aggregated));

    let mut d_h_s = vec![0.0; dim];
    let mut d_t_s = vec![0.0; dim];
    let mut d_rel = vec![0.0; dim];
    let mut d_h_i = vec![0.0; dim];
    let mut d_t_i = vec![0.0; dim];
    for k in 0..dim {
        d_h_s[k] = sign * (g_ss[k] + g_si[k]);
        d_t_s[k] = -sign * (g_ss[k] + g_is[k]);
        d_rel[k] = sign * (g_ss[k] + g_si[k] + g_is[k] + g_ii[k]);
        d_h_i[k] = sign * (g_is[k] + g_ii[k]);
        d_t_i[k] = -sign * (g_si[k] + g_ii[k]);
    }
    axpy(1.0, &d_h_s, grads.entity_row(h, dim));
    axpy(1.0, &d_t_s, grads.entity_row(t, dim));
    axpy(1.0, &d_rel, grads.relation_row(r, dim));

    for (entity, enc, upstream) in [(h, &h_enc, &d_h_i), (t, &t_enc, &d_t_i)] {
        let mut d_struct = vec![0.0; dim];
        let d_proj = grads
            .projection
            .as_mut()
            .expect("joint model carries a projection gradient");
        backprop_image(
            enc,
            store.require(entity)?,
            params.entities.row(entity),
            upstream,
            cfg.aggregation,
            cfg.attention_detached,
            d_proj,
            &mut d_struct,
        );
        if !cfg.attention_detached && cfg.aggregation == AggregationMode::Att {
            axpy(1.0, &d_struct, grads.entity_row(entity, dim));
        }
    }
    Ok(())
}

/// Pushes `upstream = dL/de_I` back through pooling and projection.
///
/// Attention: with `s_i = p_i · e_S`, `w = softmax(s)`, `e_I = Σ w_i p_i` and
/// `c_i = upstream · p_i`, the logit gradient is `w_i (c_i - Σ_j w_j c_j)`,
/// so `dL/dp_i = w_i upstream + ds_i e_S` and `dL/de_S = Σ ds_i p_i`.
#[allow(clippy::too_many_arguments)]
fn backprop_image(
    enc: &ImageEncoding,
    features: &[Vec<f64>],
    structure: &[f64],
    upstream: &[f64],
    mode: AggregationMode,
    detached: bool,
    d_proj: &mut Matrix,
    d_struct: &mut [f64],
) {
    match mode {
        AggregationMode::Avg => {
            let scale = 1.0 / features.len() as f64;
            for f in features {
                d_proj.add_outer(scale, upstream, f);
            }
        }
        AggregationMode::Max => {
            let k = argmax(&enc.weights);
            d_proj.add_outer(1.0, upstream, &features[k]);
        }
        AggregationMode::Att => {
            let c: Vec<f64> = enc.projected.iter().map(|p| dot(upstream, p)).collect();
            let c_bar: f64 = enc.weights.iter().zip(&c).map(|(w, ci)| w * ci).sum();
            for (i, f) in features.iter().enumerate() {
                let w = enc.weights[i];
                let ds = w * (c[i] - c_bar);
                d_proj.add_outer(w, upstream, f);
                d_proj.add_outer(ds, structure, f);
                if !detached {
                    axpy(ds, &enc.projected[i], d_struct);
                }
            }
        }
    }
}

/// Plain SGD step followed by projecting every embedding row onto the unit
/// ball.
pub fn apply_update(params: &mut ModelParams, grads: &Gradients, learning_rate: f64) {
    for (&e, g) in &grads.entities {
        axpy(-learning_rate, g, params.entities.row_mut(e));
    }
    for (&r, g) in &grads.relations {
        axpy(-learning_rate, g, params.relations.row_mut(r));
    }
    if let Some(g) = &grads.projection {
        params.projection.add_scaled(-learning_rate, g);
    }
    params.entities.clamp_row_norms();
    params.relations.clamp_row_norms();
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Set by callers that persist the final parameters.
    pub checkpoint: Option<std::path::PathBuf>,
}

impl TrainReport {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Trains the joint model.
pub fn train(
    dataset: &Dataset,
    store: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_with_progress(dataset, Some(store), cfg, |_| {})
}

/// Trains the structure-only baseline; `cfg.model` is ignored.
pub fn train_transe(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let cfg = TrainConfig {
        model: ModelKind::Transe,
        ..cfg.clone()
    };
    train_with_progress(dataset, None, &cfg, |_| {})
}

/// Initial parameters for `cfg`, drawn from `rng` or loaded from a checkpoint.
pub fn initialize(dataset: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let (ne, nr) = (dataset.num_entities(), dataset.num_relations());
    let mut params = ModelParams::random(ne, nr, cfg.entity_dim, cfg.image_dim, rng);
    if let InitStrategy::Pretrained(path) = &cfg.init {
        let warm = load_checkpoint(path)?;
        if warm.num_entities() != ne || warm.num_relations() != nr || warm.entity_dim() != cfg.entity_dim {
            return Err(Error::Dimension(format!(
                "checkpoint {} has {}x{} entities and {} relations; expected {}x{} and {}",
                path.display(),
                warm.num_entities(),
                warm.entity_dim(),
                warm.num_relations(),
                ne,
                cfg.entity_dim,
                nr
            )));
        }
        warm.check_finite()?;
        params.entities = warm.entities;
        params.relations = warm.relations;
        params.entities.clamp_row_norms();
        params.relations.clamp_row_norms();
    }
    if cfg.model == ModelKind::Transe {
        params.projection = Matrix::zeros(cfg.entity_dim, cfg.image_dim);
    }
    Ok(params)
}

/// The SGD loop. `on_epoch` is called after every epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".to_owned()));
    }
    if cfg.model == ModelKind::Ikrl {
        let store = store.ok_or(Error::MissingFeatures { entity: 0 })?;
        if store.dim() != cfg.image_dim {
            return Err(Error::Dimension(format!(
                "features have dimension {} but image_dim is {}",
                store.dim(),
                cfg.image_dim
            )));
        }
        store.validate(dataset.num_entities(), cfg.max_images)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = initialize(dataset, cfg, &mut rng)?;
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let learning_rate = cfg.learning_rate(epoch);
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for batch in epoch_batches(dataset, cfg.batch_size, &mut rng)? {
            let partials: Vec<Result<(Gradients, f64)>> = batch
                .par_chunks(CHUNK_PAIRS)
                .map(|chunk| {
                    let mut grads = Gradients::zeros(&params, cfg.model);
                    let mut loss = 0.0;
                    for &(pos, neg) in chunk {
                        loss += accumulate_pair(pos, neg, &params, store, cfg, &mut grads)?;
                    }
                    Ok((grads, loss))
                })
                .collect();
            let mut total = Gradients::zeros(&params, cfg.model);
            for partial in partials {
                let (grads, loss) = partial?;
                total.merge(&grads);
                loss_sum += loss;
            }
            pairs += batch.len();
            apply_update(&mut params, &total, learning_rate);
        }
        let mean_loss = loss_sum / pairs as f64;
        if !mean_loss.is_finite() || !params.is_finite() {
            return Err(Error::NonFinite(format!("training diverged in epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            learning_rate,
            mean_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok((params, report))
}
