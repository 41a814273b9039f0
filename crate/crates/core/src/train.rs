//! Training loops for every method in the baseline roster, plus embedding
//! export. The analysis drivers and the CLI both run through these.
//!
//! Methods: `old` (cross-entropy on the old class split), `new-independent`
//! (cross-entropy on everything), `bct` (influence loss through the frozen
//! old head), `bct-pad` (same with the head zero-padded onto extra
//! dimensions), `contrast` (cross-entropy plus the regression-alleviating
//! term), `bt2` (the two-block model with its paired objectives), and
//! `upper-bound` (no training; concatenates two frozen models).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::grad::{
    optimizer_step, Graph, GraphError, NodeId, OptimizerState, ParamMap, NORMALIZE_EPS,
};
use crate::linalg::{normalize_with_floor, DenseMatrix};
use crate::losses::{
    batch_mean, bct_loss, bt2_new_loss, bt2_old_loss, contrast_loss, cross_entropy, head_node,
    LossConfig, LossError,
};
use crate::model::{
    pad_old_head, Bt2Config, Bt2Model, Checkpoint, ClassifierHead, EmbedderModel, EmbeddingModel,
    ModelError, UpperBoundConfig, UpperBoundModel,
};
use crate::par;
use crate::retrieval::EmbeddingRecord;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training-divergence error at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        /// The model as of the last step that produced finite numbers.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// How an epoch/batch loop ended.
enum LoopEnd {
    Completed,
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

/// Applies the last-good parameters to the finished model and converts a
/// divergence into the error that carries the preserved checkpoint.
fn finish_training(end: LoopEnd, model: EmbeddingModel) -> Result<EmbeddingModel, TrainError> {
    match end {
        LoopEnd::Completed => Ok(model),
        LoopEnd::Diverged {
            epoch,
            step,
            detail,
        } => Err(TrainError::Diverged {
            epoch,
            step,
            detail,
            last_good: Box::new(model.to_checkpoint()),
        }),
    }
}

/// Optimizer family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    SgdMomentum,
    AdaptiveMoments,
}

impl OptimizerChoice {
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "sgd-momentum" => Ok(OptimizerChoice::SgdMomentum),
            "adaptive-moments" => Ok(OptimizerChoice::AdaptiveMoments),
            other => Err(TrainError::Config(format!(
                "unknown optimizer '{other}' (expected sgd-momentum or adaptive-moments)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerChoice::SgdMomentum => "sgd-momentum",
            OptimizerChoice::AdaptiveMoments => "adaptive-moments",
        }
    }
}

/// Optimization and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 25,
            batch_size: 32,
            optimizer: OptimizerChoice::AdaptiveMoments,
            momentum: 0.9,
            seed: 0,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    fn optimizer_state(&self) -> OptimizerState {
        match self.optimizer {
            OptimizerChoice::SgdMomentum => {
                OptimizerState::sgd_momentum(self.learning_rate, self.momentum)
            }
            OptimizerChoice::AdaptiveMoments => OptimizerState::default_adaptive(self.learning_rate),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding-shape settings shared by the method roster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimsConfig {
    /// Independent-new embedding dimension.
    pub m: usize,
    /// Old embedding dimension.
    pub n: usize,
    /// Extra dimensions of the two-block model (and of the padded head).
    pub d: usize,
    /// Norm given to the first block's output.
    pub c_scale: f64,
    /// Weight on the new component of the upper-bound concatenation.
    pub upper_c: f64,
    pub cls_on_final: bool,
}

impl Default for DimsConfig {
    fn default() -> Self {
        DimsConfig {
            m: 16,
            n: 16,
            d: 4,
            c_scale: 2.0,
            upper_c: 2.0,
            cls_on_final: false,
        }
    }
}

impl DimsConfig {
    pub fn bt2_config(&self) -> Bt2Config {
        Bt2Config {
            m: self.m,
            n: self.n,
            d: self.d,
            c_scale: self.c_scale,
            cls_on_final: self.cls_on_final,
        }
    }
}

/// The method roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Old,
    NewIndependent,
    Bct,
    BctPad,
    Contrast,
    Bt2,
    UpperBound,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Old,
        Method::NewIndependent,
        Method::Bct,
        Method::BctPad,
        Method::Contrast,
        Method::Bt2,
        Method::UpperBound,
    ];

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "old" => Ok(Method::Old),
            "new-independent" => Ok(Method::NewIndependent),
            "bct" => Ok(Method::Bct),
            "bct-pad" => Ok(Method::BctPad),
            "contrast" => Ok(Method::Contrast),
            "bt2" => Ok(Method::Bt2),
            "upper-bound" => Ok(Method::UpperBound),
            other => Err(TrainError::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Old => "old",
            Method::NewIndependent => "new-independent",
            Method::Bct => "bct",
            Method::BctPad => "bct-pad",
            Method::Contrast => "contrast",
            Method::Bt2 => "bt2",
            Method::UpperBound => "upper-bound",
        }
    }

    pub fn needs_old(&self) -> bool {
        matches!(
            self,
            Method::Bct | Method::BctPad | Method::Contrast | Method::Bt2 | Method::UpperBound
        )
    }

    pub fn needs_new_independent(&self) -> bool {
        matches!(self, Method::Bt2 | Method::UpperBound)
    }
}

/// A frozen classifier over a model's output embedding, when the model has
/// one: plain embedders always do; the two-block model only when it
/// classified on its final representation.
pub fn old_head_for(model: &EmbeddingModel) -> Option<ClassifierHead> {
    match model {
        EmbeddingModel::Embedder(m) => Some(m.head.frozen_copy()),
        EmbeddingModel::Bt2(m) if m.cfg.cls_on_final => Some(m.head_phi3.frozen_copy()),
        _ => None,
    }
}

fn unit_embed(model: &EmbeddingModel, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let raw = model.embed(x)?;
    Ok(normalize_with_floor(&DenseMatrix::column(&raw), NORMALIZE_EPS)
        .data()
        .to_vec())
}

/// Unit-normalized embeddings of every sample, in dataset order.
fn precompute_targets(
    model: &EmbeddingModel,
    data: &Dataset,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let out: Vec<Result<Vec<f64>, ModelError>> =
        par::map_ordered(&data.samples, |(x, _)| unit_embed(model, x));
    out.into_iter()
        .map(|r| r.map_err(TrainError::from))
        .collect()
}

/// Generic epoch/batch loop: shuffles sample indices per epoch, builds one
/// loss graph per batch, and applies the optimizer. On divergence the loop
/// stops and `params` keeps the last values that produced finite numbers
/// (the optimizer validates gradients before mutating anything).
fn run_training<F>(
    params: &mut ParamMap,
    tcfg: &TrainConfig,
    n_samples: usize,
    mut build_batch_loss: F,
) -> Result<LoopEnd, TrainError>
where
    F: FnMut(&mut Graph, &ParamMap, &[usize]) -> Result<NodeId, TrainError>,
{
    tcfg.validate()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    shuffle_rng.set_stream(1);
    let mut optimizer = tcfg.optimizer_state();

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut shuffle_rng);
        for (step, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let loss = build_batch_loss(&mut g, params, batch)?;
            let loss_value = g.value(loss).at(0, 0);
            if !loss_value.is_finite() {
                return Ok(LoopEnd::Diverged {
                    epoch,
                    step,
                    detail: format!("loss became {loss_value}"),
                });
            }
            g.backward(loss)?;
            let grads = g.param_grads()?;
            match optimizer_step(&mut optimizer, params, &grads) {
                Ok(()) => {}
                Err(GraphError::Divergence(param)) => {
                    return Ok(LoopEnd::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite gradient for parameter '{param}'"),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(LoopEnd::Completed)
}

fn sample_input(g: &mut Graph, idx: usize, x: &[f64]) -> NodeId {
    g.input(&format!("x{idx}"), DenseMatrix::column(x))
}

/// Plain cross-entropy embedder at the given embedding size.
pub fn train_embedder(
    data: &Dataset,
    embed_dim: usize,
    tcfg: &TrainConfig,
) -> Result<EmbeddingModel, TrainError> {
    let input_dim = data.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = EmbedderModel::init(input_dim, tcfg.hidden, embed_dim, data.class_count, &mut rng);

    let mut params = ParamMap::new();
    model.collect_params(&mut params);

    let end = run_training(&mut params, tcfg, data.len(), |g, params, batch| {
        let backbone = model.backbone.graph_params(g, "backbone", params, true)?;
        let head = head_node(g, "head.w", &model.head, params)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let (x, y) = &data.samples[i];
            let xin = sample_input(g, i, x);
            let emb = backbone.apply(g, xin)?;
            losses.push(cross_entropy(g, &head, emb, *y)?);
        }
        Ok(batch_mean(g, &losses)?)
    })?;

    model.set_params(&params)?;
    finish_training(end, EmbeddingModel::Embedder(model))
}

/// Influence-loss training against a frozen old model; `pad` grows the
/// embedding by `dims.d` and zero-pads the old head accordingly.
pub fn train_bct(
    data: &Dataset,
    old: &EmbeddingModel,
    pad: bool,
    dims: &DimsConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
) -> Result<EmbeddingModel, TrainError> {
    lcfg.validate()?;
    let old_head = old_head_for(old).ok_or_else(|| {
        TrainError::Config("the old model exposes no classifier head for the influence loss".into())
    })?;
    let old_dim = old.output_dim();
    let embed_dim = if pad { old_dim + dims.d } else { old_dim };
    let old_head = pad_old_head(&old_head, embed_dim)?;
    let old_classes = old_head.classes();

    let input_dim = data.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = EmbedderModel::init(input_dim, tcfg.hidden, embed_dim, data.class_count, &mut rng);

    let mut params = ParamMap::new();
    model.collect_params(&mut params);

    let end = run_training(&mut params, tcfg, data.len(), |g, params, batch| {
        let backbone = model.backbone.graph_params(g, "backbone", params, true)?;
        let head_new = head_node(g, "head.w", &model.head, params)?;
        let head_old = head_node(g, "old_head.w", &old_head, params)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let (x, y) = &data.samples[i];
            let xin = sample_input(g, i, x);
            let emb = backbone.apply(g, xin)?;
            // the influence term only applies to classes the old head knows
            let loss = if *y < old_classes {
                bct_loss(g, emb, &head_new, &head_old, *y, lcfg)?
            } else {
                cross_entropy(g, &head_new, emb, *y)?
            };
            losses.push(loss);
        }
        Ok(batch_mean(g, &losses)?)
    })?;

    model.set_params(&params)?;
    finish_training(end, EmbeddingModel::Embedder(model))
}

/// Cross-entropy plus the contrast regularizer against frozen old
/// embeddings.
pub fn train_contrast(
    data: &Dataset,
    old: &EmbeddingModel,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
) -> Result<EmbeddingModel, TrainError> {
    lcfg.validate()?;
    let old_targets = precompute_targets(old, data)?;
    let embed_dim = old.output_dim();

    let input_dim = data.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = EmbedderModel::init(input_dim, tcfg.hidden, embed_dim, data.class_count, &mut rng);

    let mut params = ParamMap::new();
    model.collect_params(&mut params);

    let end = run_training(&mut params, tcfg, data.len(), |g, params, batch| {
        let backbone = model.backbone.graph_params(g, "backbone", params, true)?;
        let head = head_node(g, "head.w", &model.head, params)?;
        let mut ce_losses = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        let mut new_nodes = Vec::with_capacity(batch.len());
        let mut old_nodes = Vec::with_capacity(batch.len());
        for &i in batch {
            let (x, y) = &data.samples[i];
            let xin = sample_input(g, i, x);
            let emb = backbone.apply(g, xin)?;
            ce_losses.push(cross_entropy(g, &head, emb, *y)?);
            labels.push(*y);
            new_nodes.push(g.l2_normalize(emb)?);
            old_nodes.push(g.input(&format!("old{i}"), DenseMatrix::column(&old_targets[i])));
        }
        let ce = batch_mean(g, &ce_losses)?;
        if batch.len() < 2 || lcfg.lambda == 0.0 {
            return Ok(ce);
        }
        let contrast = contrast_loss(g, &labels, &new_nodes, &old_nodes, lcfg)?;
        let weighted = g.scale(contrast, lcfg.lambda);
        Ok(g.add(ce, weighted)?)
    })?;

    model.set_params(&params)?;
    finish_training(end, EmbeddingModel::Embedder(model))
}

/// The two-block model trained to mimic a frozen independent model on the
/// front slice while matching the frozen old model on the compatible prefix.
pub fn train_bt2(
    data: &Dataset,
    old: &EmbeddingModel,
    new_independent: &EmbeddingModel,
    dims: &DimsConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
) -> Result<EmbeddingModel, TrainError> {
    lcfg.validate()?;
    let cfg = dims.bt2_config();
    cfg.validate()?;
    if old.output_dim() != cfg.n {
        return Err(TrainError::Config(format!(
            "old model embeds to {} dimensions but n = {}",
            old.output_dim(),
            cfg.n
        )));
    }
    if new_independent.output_dim() != cfg.m {
        return Err(TrainError::Config(format!(
            "independent new model embeds to {} dimensions but m = {}",
            new_independent.output_dim(),
            cfg.m
        )));
    }

    let old_head = old_head_for(old);
    let old_classes = old_head.as_ref().map_or(0, |h| h.classes());
    let old_targets = precompute_targets(old, data)?;
    let new_targets = precompute_targets(new_independent, data)?;

    let input_dim = data.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Bt2Model::init(cfg, input_dim, tcfg.hidden, data.class_count, &mut rng)?;

    let mut params = ParamMap::new();
    model.collect_params(&mut params);

    let end = run_training(&mut params, tcfg, data.len(), |g, params, batch| {
        let shared = model.graph_shared(g, params)?;
        let head_phi3 = crate::losses::HeadNode {
            w: shared.head_phi3_w,
            classes: model.head_phi3.classes(),
            frozen: false,
        };
        let head_old = match &old_head {
            Some(h) => head_node(g, "old_head.w", h, params)?,
            None => {
                // placeholder so the cosine-only loss still has a frozen
                // head argument; lambda2 = 0 keeps it out of the graph
                let w = g.input("old_head.unused", DenseMatrix::zeros(1, cfg.n));
                crate::losses::HeadNode {
                    w,
                    classes: 1,
                    frozen: true,
                }
            }
        };
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let (x, y) = &data.samples[i];
            let xin = sample_input(g, i, x);
            let trace = model.graph_sample(g, &shared, xin)?;
            let new_target = g.input(
                &format!("newt{i}"),
                DenseMatrix::column(&new_targets[i]),
            );
            let ce_phi = if cfg.cls_on_final {
                g.l2_normalize(trace.phi_new)?
            } else {
                trace.phi3
            };
            let new_loss =
                bt2_new_loss(g, trace.phi3, ce_phi, &head_phi3, new_target, *y, lcfg)?;

            let old_target = g.input(
                &format!("oldt{i}"),
                DenseMatrix::column(&old_targets[i]),
            );
            // the old-head classification term only applies when the head
            // exists and knows the sample's class
            let old_loss = if old_head.is_some() && *y < old_classes {
                bt2_old_loss(g, trace.phi5, &head_old, old_target, *y, lcfg)?
            } else {
                let cosine_only = LossConfig {
                    lambda2: 0.0,
                    ..*lcfg
                };
                bt2_old_loss(g, trace.phi5, &head_old, old_target, 0, &cosine_only)?
            };
            losses.push(g.add(new_loss, old_loss)?);
        }
        Ok(batch_mean(g, &losses)?)
    })?;

    model.set_params(&params)?;
    finish_training(end, EmbeddingModel::Bt2(Box::new(model)))
}

/// No training: the frozen old and independent models concatenated.
pub fn compose_upper_bound(
    old: &EmbeddingModel,
    new_independent: &EmbeddingModel,
    upper_c: f64,
) -> Result<EmbeddingModel, TrainError> {
    let cfg = UpperBoundConfig::new(upper_c)?;
    let (EmbeddingModel::Embedder(o), EmbeddingModel::Embedder(n)) = (old, new_independent) else {
        return Err(TrainError::Config(
            "the upper-bound composition takes two plain embedder checkpoints".into(),
        ));
    };
    Ok(EmbeddingModel::UpperBound(Box::new(UpperBoundModel {
        old: o.clone(),
        new: n.clone(),
        cfg,
    })))
}

/// Dispatches one method. `data` is the method's training split (already the
/// old subset for `old`); dependency models must be present per
/// [`Method::needs_old`] and [`Method::needs_new_independent`].
pub fn train_method(
    method: Method,
    data: &Dataset,
    old: Option<&EmbeddingModel>,
    new_independent: Option<&EmbeddingModel>,
    dims: &DimsConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
) -> Result<EmbeddingModel, TrainError> {
    let old = match (method.needs_old(), old) {
        (true, None) => {
            return Err(TrainError::Config(format!(
                "method '{}' requires an old-model checkpoint",
                method.name()
            )))
        }
        (_, o) => o,
    };
    let new_ind = match (method.needs_new_independent(), new_independent) {
        (true, None) => {
            return Err(TrainError::Config(format!(
                "method '{}' requires a new-independent checkpoint",
                method.name()
            )))
        }
        (_, n) => n,
    };
    match method {
        Method::Old => train_embedder(data, dims.n, tcfg),
        Method::NewIndependent => train_embedder(data, dims.m, tcfg),
        Method::Bct => train_bct(data, old.unwrap(), false, dims, lcfg, tcfg),
        Method::BctPad => train_bct(data, old.unwrap(), true, dims, lcfg, tcfg),
        Method::Contrast => train_contrast(data, old.unwrap(), lcfg, tcfg),
        Method::Bt2 => train_bt2(data, old.unwrap(), new_ind.unwrap(), dims, lcfg, tcfg),
        Method::UpperBound => compose_upper_bound(old.unwrap(), new_ind.unwrap(), dims.upper_c),
    }
}

/// Embeds every sample of a dataset; record ids are row indices, so files
/// produced from the same dataset align across models.
pub fn embed_dataset(
    model: &EmbeddingModel,
    data: &Dataset,
    tag: &str,
) -> Result<Vec<EmbeddingRecord>, TrainError> {
    let prepared = model.prepared()?;
    let rows: Vec<Result<Vec<f64>, ModelError>> =
        par::map_ordered(&data.samples, |(x, _)| prepared.embed(x));
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        records.push(EmbeddingRecord {
            id: i as u64,
            label: data.samples[i].1 as u32,
            vector: row?,
            model_tag: tag.to_string(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split_old_new, SyntheticSpec};
    use crate::model::{encode_checkpoint, EmbeddingModel};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            per_class: 30,
            feature_dim: 8,
            separation: 4.0,
            seed: 5,
        }
    }

    fn tiny_dims() -> DimsConfig {
        DimsConfig {
            m: 6,
            n: 6,
            d: 2,
            ..Default::default()
        }
    }

    fn tiny_tcfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            hidden: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let data = gen_synthetic(&tiny_spec()).unwrap().train;
        let trained = train_embedder(&data, 6, &tiny_tcfg(3, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fresh = EmbedderModel::init(8, 16, 6, 4, &mut rng);
        assert_eq!(
            encode_checkpoint(&trained.to_checkpoint()),
            encode_checkpoint(&EmbeddingModel::Embedder(fresh).to_checkpoint())
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = gen_synthetic(&tiny_spec()).unwrap().train;
        let a = train_embedder(&data, 6, &tiny_tcfg(7, 2)).unwrap();
        let b = train_embedder(&data, 6, &tiny_tcfg(7, 2)).unwrap();
        assert_eq!(
            encode_checkpoint(&a.to_checkpoint()),
            encode_checkpoint(&b.to_checkpoint())
        );
    }

    #[test]
    fn training_reduces_loss() {
        let data = gen_synthetic(&tiny_spec()).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            ..tiny_tcfg(11, 30)
        };
        let model = train_embedder(&data.train, 6, &tcfg).unwrap();
        // classify validation samples through the trained head
        let EmbeddingModel::Embedder(em) = &model else {
            panic!()
        };
        let mut correct = 0;
        for (x, y) in &data.val.samples {
            let emb = em.backbone.forward(x).unwrap();
            let logits = em.head.logits(&emb).unwrap();
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if pred == *y {
                correct += 1;
            }
        }
        let acc = correct as f64 / data.val.len() as f64;
        assert!(acc > 0.8, "validation accuracy {acc}");
    }

    #[test]
    fn method_dependency_validation() {
        let data = gen_synthetic(&tiny_spec()).unwrap().train;
        let dims = tiny_dims();
        let err = train_method(
            Method::Bct,
            &data,
            None,
            None,
            &dims,
            &LossConfig::default(),
            &tiny_tcfg(1, 1),
        );
        assert!(matches!(err, Err(TrainError::Config(_))));
        let err = train_method(
            Method::UpperBound,
            &data,
            None,
            None,
            &dims,
            &LossConfig::default(),
            &tiny_tcfg(1, 1),
        );
        assert!(matches!(err, Err(TrainError::Config(_))));
    }

    #[test]
    fn full_roster_trains_and_embeds() {
        let data = gen_synthetic(&tiny_spec()).unwrap();
        let (old_split, full) = split_old_new(&data.train, 0.5).unwrap();
        let dims = tiny_dims();
        let lcfg = LossConfig::default();

        let old = train_method(
            Method::Old,
            &old_split,
            None,
            None,
            &dims,
            &lcfg,
            &tiny_tcfg(21, 2),
        )
        .unwrap();
        let new_ind = train_method(
            Method::NewIndependent,
            &full,
            None,
            None,
            &dims,
            &lcfg,
            &tiny_tcfg(22, 2),
        )
        .unwrap();

        for method in [
            Method::Bct,
            Method::BctPad,
            Method::Contrast,
            Method::Bt2,
            Method::UpperBound,
        ] {
            let model = train_method(
                method,
                &full,
                Some(&old),
                Some(&new_ind),
                &dims,
                &lcfg,
                &tiny_tcfg(23, 2),
            )
            .unwrap();
            let expected_dim = match method {
                Method::Bct | Method::Contrast => dims.n,
                Method::BctPad => dims.n + dims.d,
                Method::Bt2 => dims.m + dims.d,
                Method::UpperBound => dims.n + dims.m,
                _ => unreachable!(),
            };
            assert_eq!(model.output_dim(), expected_dim, "{}", method.name());
            let records = embed_dataset(&model, &data.val, method.name()).unwrap();
            assert_eq!(records.len(), data.val.len());
            assert!(records
                .iter()
                .all(|r| r.vector.len() == expected_dim && r.vector.iter().all(|v| v.is_finite())));
            // round trip through the checkpoint preserves behavior
            let restored =
                EmbeddingModel::from_checkpoint(&model.to_checkpoint()).unwrap();
            let x = &data.val.samples[0].0;
            assert_eq!(restored.embed(x).unwrap(), model.embed(x).unwrap());
        }
    }

    #[test]
    fn divergence_preserves_last_good_checkpoint() {
        let data = gen_synthetic(&tiny_spec()).unwrap().train;
        let tcfg = TrainConfig {
            learning_rate: 1e308,
            optimizer: OptimizerChoice::SgdMomentum,
            ..tiny_tcfg(41, 10)
        };
        match train_embedder(&data, 6, &tcfg) {
            Err(TrainError::Diverged { last_good, .. }) => {
                // the preserved checkpoint holds finite tensors and decodes
                let bytes = encode_checkpoint(&last_good);
                let back = crate::model::decode_checkpoint(&bytes).unwrap();
                assert_eq!(back, *last_good);
                EmbeddingModel::from_checkpoint(&back).unwrap();
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bt2_dimension_mismatch_is_rejected() {
        let data = gen_synthetic(&tiny_spec()).unwrap().train;
        let old = train_embedder(&data, 5, &tiny_tcfg(31, 0)).unwrap();
        let new_ind = train_embedder(&data, 6, &tiny_tcfg(32, 0)).unwrap();
        let err = train_bt2(
            &data,
            &old,
            &new_ind,
            &tiny_dims(),
            &LossConfig::default(),
            &tiny_tcfg(33, 1),
        );
        assert!(matches!(err, Err(TrainError::Config(_))));
    }
}
