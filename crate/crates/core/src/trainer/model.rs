//! Model parameters, the combined training objective, and scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compgraph::{
    build_graph, classify, comp_scores, init_node_features, normalize_adjacency, propagate, CompositionGraph,
    PropagationWeights,
};
use crate::error::{contract_err, Error, Result};
use crate::evalzsl::ScoreMatrix;
use crate::independence::{independence_loss, one_hot, HsicConfig};
use crate::numgrad::{GradientReport, Tape, Tensor, Var};
use crate::protolayer::{
    ce_loss, cluster_cost, compat_scores, extract_features, mean_pool, patches, separation_cost, similarity_map,
    softmax_pool, FeatureExtractor, PrimitiveKind, PrototypeSet,
};
use crate::synthdata::{derive_seed, CompositionalLabel, PrimitiveVocab, SplitData, Splits, CHANNELS};

use super::config::TrainConfig;

/// Output widths of the first two conv stages; the third is `proto_dim`.
pub const STAGE_WIDTHS: [usize; 2] = [32, 64];
/// Batches smaller than this skip the independence term.
pub const MIN_HSIC_BATCH: usize = 8;
/// Evaluation batch size; fixed so scores do not depend on caller batching.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: FeatureExtractor,
    pub attr_protos: PrototypeSet,
    pub obj_protos: PrototypeSet,
    pub propagation: PropagationWeights,
    /// `[C, C]`, applied to the pooled feature when present.
    pub projection: Option<Tensor>,
}

impl Model {
    pub fn init(cfg: &TrainConfig, vocab: &PrimitiveVocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1417]));
        let c = cfg.proto_dim;
        let backbone = FeatureExtractor::init(CHANNELS, &[STAGE_WIDTHS[0], STAGE_WIDTHS[1], c], &mut rng);
        let attr_protos = PrototypeSet::init(vocab.n_attr(), c, PrimitiveKind::Attribute, &mut rng);
        let obj_protos = PrototypeSet::init(vocab.n_obj(), c, PrimitiveKind::Object, &mut rng);
        let propagation = PropagationWeights::init(c, cfg.graph_hidden, c, &mut rng);
        let projection = cfg.projection.then(|| PropagationWeights::init(c, c, c, &mut rng).theta1);
        Model { backbone, attr_protos, obj_protos, propagation, projection }
    }

    /// Every tensor with a stable name, backbone first.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.backbone.stages.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &s.weight));
            out.push((format!("backbone.{i}.bias"), &s.bias));
        }
        out.push(("attr_protos".into(), &self.attr_protos.prototypes));
        out.push(("obj_protos".into(), &self.obj_protos.prototypes));
        out.push(("theta1".into(), &self.propagation.theta1));
        out.push(("theta2".into(), &self.propagation.theta2));
        if let Some(p) = &self.projection {
            out.push(("projection".into(), p));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.backbone.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.attr_protos.prototypes);
        out.push(&mut self.obj_protos.prototypes);
        out.push(&mut self.propagation.theta1);
        out.push(&mut self.propagation.theta2);
        if let Some(p) = &mut self.projection {
            out.push(p);
        }
        out
    }

    pub fn n_backbone_params(&self) -> usize {
        2 * self.backbone.stages.len()
    }

    /// Rebuilds a model from tensors in [`Model::named_params`] order.
    pub fn from_params(tensors: Vec<Tensor>, n_stages: usize) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut next = |what: &str| it.next().ok_or_else(|| contract_err!("missing parameter {what}"));
        let mut stages = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            let weight = next("backbone weight")?;
            let bias = next("backbone bias")?;
            stages.push(crate::protolayer::ConvStage { weight, bias });
        }
        let attr_protos = PrototypeSet { prototypes: next("attr_protos")?, kind: PrimitiveKind::Attribute };
        let obj_protos = PrototypeSet { prototypes: next("obj_protos")?, kind: PrimitiveKind::Object };
        let propagation = PropagationWeights { theta1: next("theta1")?, theta2: next("theta2")? };
        let projection = next("projection").ok();
        Ok(Model { backbone: FeatureExtractor { stages }, attr_protos, obj_protos, propagation, projection })
    }
}

/// Label space shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct LabelSpace {
    pub vocab: PrimitiveVocab,
    /// All compositions in index order `attr * |O| + obj`.
    pub comps: Vec<CompositionalLabel>,
    pub unseen: Vec<bool>,
    /// Composition indices of the seen classes, ascending.
    pub seen_idx: Vec<usize>,
    pub graph: CompositionGraph,
    pub a_norm: Tensor,
}

impl LabelSpace {
    pub fn new(vocab: &PrimitiveVocab, splits: &Splits) -> Result<Self> {
        let comps = vocab.all_compositions();
        let n_obj = vocab.n_obj();
        let unseen: Vec<bool> = comps.iter().map(|&c| splits.is_unseen(c)).collect();
        let seen_idx = splits.seen.iter().map(|c| c.index(n_obj)).collect();
        let graph = build_graph(vocab, &comps)?;
        let a_norm = normalize_adjacency(&graph);
        Ok(LabelSpace { vocab: vocab.clone(), comps, unseen, seen_idx, graph, a_norm })
    }

    /// Position of composition `c` among the seen classes.
    fn seen_position(&self, c: CompositionalLabel) -> Result<usize> {
        let y = c.index(self.vocab.n_obj());
        self.seen_idx
            .binary_search(&y)
            .map_err(|_| contract_err!("training label {} is not a seen composition", self.vocab.comp_name(c)))
    }
}

/// Per-batch loss terms, already weighted; zero when switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce_attr: f64,
    pub ce_obj: f64,
    pub ce_comp: f64,
    pub hsic: f64,
    pub clst: f64,
    pub sep: f64,
    pub total: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("ce_attr", self.ce_attr),
            ("ce_obj", self.ce_obj),
            ("ce_comp", self.ce_comp),
            ("hsic", self.hsic),
            ("clst", self.clst),
            ("sep", self.sep),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.named().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::Numerical(format!("loss component {name} is {v}"))),
            None => Ok(()),
        }
    }

    pub fn add_scaled(&mut self, o: &LossComponents, w: f64) {
        self.ce_attr += w * o.ce_attr;
        self.ce_obj += w * o.ce_obj;
        self.ce_comp += w * o.ce_comp;
        self.hsic += w * o.hsic;
        self.clst += w * o.clst;
        self.sep += w * o.sep;
        self.total += w * o.total;
    }
}

/// Result of one forward/backward pass over a batch.
pub struct StepOutput {
    pub losses: LossComponents,
    /// Gradients in `params_mut` order; backbone entries are zero when frozen.
    pub grads: Vec<Tensor>,
    /// Correct seen-composition predictions in the batch.
    pub correct: usize,
}

/// Puts the model on the tape; backbone as constants unless `finetune`.
fn model_vars(tape: &mut Tape, model: &Model, finetune: bool) -> (Vec<(Var, Var)>, Vec<Var>) {
    let stages = model.backbone.to_tape(tape, finetune);
    let mut vars: Vec<Var> = stages.iter().flat_map(|&(w, b)| [w, b]).collect();
    vars.push(tape.param(model.attr_protos.prototypes.clone()));
    vars.push(tape.param(model.obj_protos.prototypes.clone()));
    vars.push(tape.param(model.propagation.theta1.clone()));
    vars.push(tape.param(model.propagation.theta2.clone()));
    if let Some(p) = &model.projection {
        vars.push(tape.param(p.clone()));
    }
    (stages, vars)
}

/// Total loss, its named weighted parts, and the seen-composition logits.
pub type LossGraph = (Var, Vec<(&'static str, Var)>, Var);

/// Builds the weighted objective for a training batch on `tape`.
///
/// `vars` follows `params_mut` order. Returns the total and its weighted parts.
pub fn build_loss(
    tape: &mut Tape,
    cfg: &TrainConfig,
    space: &LabelSpace,
    stages: &[(Var, Var)],
    vars: &[Var],
    images: Var,
    labels: &[CompositionalLabel],
) -> Result<LossGraph> {
    let ns = stages.len() * 2;
    let (pa, po, t1, t2) = (vars[ns], vars[ns + 1], vars[ns + 2], vars[ns + 3]);
    let proj = vars.get(ns + 4).copied();
    let a_lab: Vec<usize> = labels.iter().map(|c| c.attr).collect();
    let o_lab: Vec<usize> = labels.iter().map(|c| c.obj).collect();
    let c_lab = labels.iter().map(|&c| space.seen_position(c)).collect::<Result<Vec<_>>>()?;

    let fm = extract_features(tape, images, stages)?;
    let x = patches(tape, fm)?;
    let sim_a = similarity_map(tape, x, pa)?;
    let sim_o = similarity_map(tape, x, po)?;
    let mut parts: Vec<(&'static str, Var)> = Vec::new();
    let weighted = |tape: &mut Tape, parts: &mut Vec<(&'static str, Var)>, name, w: f64, v: Var| -> Result<()> {
        let s = tape.scale(v, w)?;
        parts.push((name, s));
        Ok(())
    };

    if cfg.ce_attr_weight > 0.0 {
        let s = compat_scores(tape, sim_a)?;
        let l = ce_loss(tape, s, &a_lab)?;
        weighted(tape, &mut parts, "ce_attr", cfg.ce_attr_weight, l)?;
    }
    if cfg.ce_obj_weight > 0.0 {
        let s = compat_scores(tape, sim_o)?;
        let l = ce_loss(tape, s, &o_lab)?;
        weighted(tape, &mut parts, "ce_obj", cfg.ce_obj_weight, l)?;
    }

    let mut pooled = mean_pool(tape, x)?;
    if let Some(p) = proj {
        pooled = tape.matmul(pooled, p)?;
    }
    let nodes = init_node_features(tape, &space.graph, pa, po)?;
    let a_norm = tape.constant(space.a_norm.clone());
    let cp = propagate(tape, &space.graph, nodes, a_norm, t1, t2)?;
    let cp_seen = tape.gather_rows(cp, &space.seen_idx)?;
    let logits = comp_scores(tape, cp_seen, pooled)?;
    if cfg.ce_comp_weight > 0.0 {
        let l = ce_loss(tape, logits, &c_lab)?;
        weighted(tape, &mut parts, "ce_comp", cfg.ce_comp_weight, l)?;
    }

    let lambda = cfg.effective_lambda();
    if lambda > 0.0 && labels.len() >= MIN_HSIC_BATCH {
        let z_a = softmax_pool(tape, sim_a, x, &a_lab)?;
        let z_o = softmax_pool(tape, sim_o, x, &o_lab)?;
        let hc = HsicConfig { lambda, normalize: cfg.hsic_normalize };
        let a1 = one_hot(&a_lab, space.vocab.n_attr())?;
        let o1 = one_hot(&o_lab, space.vocab.n_obj())?;
        let l = independence_loss(tape, z_a, z_o, &a1, &o1, &hc)?;
        parts.push(("hsic", l));
    }
    if cfg.clst_weight > 0.0 {
        let ca = cluster_cost(tape, x, pa, &a_lab)?;
        let co = cluster_cost(tape, x, po, &o_lab)?;
        let l = tape.add(ca, co)?;
        weighted(tape, &mut parts, "clst", cfg.clst_weight, l)?;
    }
    if cfg.sep_weight > 0.0 {
        let l = separation_cost(tape, x, po, &o_lab)?;
        weighted(tape, &mut parts, "sep", cfg.sep_weight, l)?;
    }

    let mut total = match parts.first() {
        Some(&(_, v)) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &(_, v) in parts.iter().skip(1) {
        total = tape.add(total, v)?;
    }
    Ok((total, parts, logits))
}

/// Forward and backward over one training batch.
pub fn train_step(
    model: &Model,
    cfg: &TrainConfig,
    space: &LabelSpace,
    images: Tensor,
    labels: &[CompositionalLabel],
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let (stages, vars) = model_vars(&mut tape, model, cfg.finetune);
    let img = tape.constant(images);
    let (total, parts, logits) = build_loss(&mut tape, cfg, space, &stages, &vars, img, labels)?;

    let mut losses = LossComponents::default();
    for &(name, v) in &parts {
        let x = tape.value(v).item()?;
        match name {
            "ce_attr" => losses.ce_attr = x,
            "ce_obj" => losses.ce_obj = x,
            "ce_comp" => losses.ce_comp = x,
            "hsic" => losses.hsic = x,
            "clst" => losses.clst = x,
            _ => losses.sep = x,
        }
    }
    losses.total = tape.value(total).item()?;
    losses.check_finite()?;

    let report: GradientReport = tape.backward(total)?;
    let grads = vars
        .iter()
        .map(|&v| match report.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        })
        .collect();
    let lv = tape.value(logits);
    let k = lv.cols();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(n, &c)| space.seen_position(c).ok() == Some(classify(&lv.data()[n * k..(n + 1) * k])))
        .count();
    Ok(StepOutput { losses, grads, correct })
}

/// Scores every sample of `data` against all compositions.
pub fn score_matrix(model: &Model, space: &LabelSpace, data: &SplitData) -> Result<ScoreMatrix> {
    let n_obj = space.vocab.n_obj();
    if let Some(c) = data.labels.iter().find(|c| c.attr >= space.vocab.n_attr() || c.obj >= n_obj) {
        return Err(contract_err!("label ({}, {}) outside the checkpoint's label space", c.attr, c.obj));
    }
    let k = space.comps.len();
    let mut scores = Vec::with_capacity(data.len() * k);

    let mut tape = Tape::new();
    let stages = model.backbone.to_tape(&mut tape, false);
    let pa = tape.constant(model.attr_protos.prototypes.clone());
    let po = tape.constant(model.obj_protos.prototypes.clone());
    let t1 = tape.constant(model.propagation.theta1.clone());
    let t2 = tape.constant(model.propagation.theta2.clone());
    let proj = model.projection.as_ref().map(|p| tape.constant(p.clone()));
    let nodes = init_node_features(&mut tape, &space.graph, pa, po)?;
    let a_norm = tape.constant(space.a_norm.clone());
    let cp = propagate(&mut tape, &space.graph, nodes, a_norm, t1, t2)?;

    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut t = tape.clone();
        let img = t.constant(data.batch(chunk));
        let fm = extract_features(&mut t, img, &stages)?;
        let x = patches(&mut t, fm)?;
        let mut pooled = mean_pool(&mut t, x)?;
        if let Some(p) = proj {
            pooled = t.matmul(pooled, p)?;
        }
        let s = comp_scores(&mut t, cp, pooled)?;
        scores.extend_from_slice(t.value(s).data());
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite composition score for sample {}", i / k)));
    }
    let labels = data.labels.iter().map(|c| c.index(n_obj)).collect();
    ScoreMatrix::new(Tensor::new(&[data.len(), k], scores)?, labels, space.unseen.clone())
}

/// Softmax-pooled attribute embeddings `[N, C]` for every sample.
pub fn attribute_embeddings(model: &Model, data: &SplitData) -> Result<Tensor> {
    let c = model.attr_protos.dim();
    let mut out = Vec::with_capacity(data.len() * c);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut t = Tape::new();
        let stages = model.backbone.to_tape(&mut t, false);
        let pa = t.constant(model.attr_protos.prototypes.clone());
        let img = t.constant(data.batch(chunk));
        let fm = extract_features(&mut t, img, &stages)?;
        let x = patches(&mut t, fm)?;
        let sim = similarity_map(&mut t, x, pa)?;
        let a_lab: Vec<usize> = chunk.iter().map(|&i| data.labels[i].attr).collect();
        let z = softmax_pool(&mut t, sim, x, &a_lab)?;
        out.extend_from_slice(t.value(z).data());
    }
    Tensor::new(&[data.len(), c], out)
}
