//! Stochastic gradient ascent on the log-posterior.
//!
//! Each sampled adoption (u, i) updates the user vector, every category node
//! that competed at some level of the app's choice path (vectors and biases),
//! and every binary-tree node on the app's route inside its subcategory.
//! Nothing else is touched, so the cost per step is the summed fan-out along
//! the path plus the binary-tree depth.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::AdoptionDataset;
use crate::error::{Error, Result};
use crate::hsoftmax::{HsForest, HsStrategy};
use crate::ids::{AppId, HsNodeId, NodeId, UserId};
use crate::model::{sigmoid, softmax, Model, ModelParams};
use crate::taxonomy::CategoryTree;

/// What the iteration counter in the learning-rate schedule counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealUnit {
    #[default]
    Epoch,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Annealing constant: lr_t = lr · nu / (nu + t − 1).
    pub nu: f64,
    pub max_iter: usize,
    /// Standard deviation of the tree prior.
    pub sigma: f64,
    pub seed: u64,
    pub init_std: f64,
    pub l2_user: f64,
    pub l2_hs: f64,
    /// Multiplier on the tree-prior terms; 1 applies them as written.
    pub prior_weight: f64,
    /// Stop once the relative change of the objective between epochs drops below this.
    pub convergence_tol: f64,
    pub hs_strategy: HsStrategy,
    pub anneal: AnnealUnit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 20,
            lr: 0.05,
            nu: 50.0,
            max_iter: 50,
            sigma: 1.0,
            seed: 42,
            init_std: 0.1,
            l2_user: 0.1,
            l2_hs: 0.02,
            prior_weight: 0.01,
            convergence_tol: 1e-5,
            hs_strategy: HsStrategy::Balanced,
            anneal: AnnealUnit::Epoch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad("nu must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter (epochs) must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be non-negative");
        }
        if !(self.l2_user >= 0.0 && self.l2_hs >= 0.0 && self.prior_weight >= 0.0) {
            return bad("regularization weights must be non-negative");
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return bad("convergence_tol must be non-negative");
        }
        Ok(())
    }

    /// Learning rate for 1-based iteration `n_iter`.
    pub fn anneal_lr(&self, n_iter: usize) -> f64 {
        anneal_lr(self.lr, self.nu, n_iter)
    }
}

/// lr · nu / (nu + n_iter − 1), with `n_iter` counted from 1.
pub fn anneal_lr(lr: f64, nu: f64, n_iter: usize) -> f64 {
    debug_assert!(n_iter >= 1);
    lr * nu / (nu + n_iter as f64 - 1.0)
}

/// Gaussian initialization of all vectors (users, then category nodes, then
/// binary-tree nodes); biases start at zero.
pub fn init_params(
    config: &TrainConfig,
    n_users: usize,
    tree: &CategoryTree,
    forest: &HsForest,
) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::zeros(config.dim, n_users, tree.num_internal(), forest.num_nodes(), config.sigma);
    if config.init_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for v in params.user.iter_mut().chain(params.node_vec.iter_mut()).chain(params.hs_vec.iter_mut()) {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrad {
    pub node: NodeId,
    pub vec: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsGrad {
    pub node: HsNodeId,
    pub vec: Vec<f64>,
    pub bias: f64,
}

/// Gradient of one instance's objective, restricted to the blocks it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGradient {
    pub user: Vec<f64>,
    /// Every member of every choice set along the path, level by level.
    pub nodes: Vec<NodeGrad>,
    /// One entry per binary-tree step, root first.
    pub hs: Vec<HsGrad>,
}

impl InstanceGradient {
    /// Parameter blocks (vector plus bias counted once) this instance updates.
    pub fn touched(&self) -> usize {
        1 + self.nodes.len() + self.hs.len()
    }
}

/// Derivative of the (weighted) tree prior with respect to q_z.
fn prior_grad(model: &Model, z: NodeId, weight: f64, out: &mut [f64]) {
    if weight == 0.0 {
        return;
    }
    let tree = &model.tree;
    let p = &model.params;
    let scale = weight / (p.sigma * p.sigma);
    let q = p.node(tree.internal_slot(z).expect("internal node"));
    match tree.parent(z).expect("known node") {
        None => {
            for (o, a) in out.iter_mut().zip(q) {
                *o -= scale * a;
            }
        }
        Some(parent) => {
            let qp = p.node(tree.internal_slot(parent).expect("internal parent"));
            for ((o, a), b) in out.iter_mut().zip(q).zip(qp) {
                *o -= scale * (a - b);
            }
        }
    }
    for &c in tree.children(z).expect("known node") {
        if let Some(slot) = tree.internal_slot(c).filter(|_| tree.is_active(c)) {
            let qc = p.node(slot);
            for ((o, a), b) in out.iter_mut().zip(q).zip(qc) {
                *o -= scale * (a - b);
            }
        }
    }
}

/// Full gradient of the per-instance objective
/// ln Pr(i|u) + w · ln prior − (l2_user/2)‖p_u‖² − (l2_hs/2)Σ‖q_n‖²
/// with respect to every block the instance touches.
pub fn instance_gradient(model: &Model, u: UserId, i: AppId, cfg: &TrainConfig) -> Result<InstanceGradient> {
    model.check_user(u)?;
    let tree = &model.tree;
    let params = &model.params;
    let k = params.dim;
    let path = tree.choice_path(i)?;
    let hs_path = model.forest.hs_path(i)?;
    let pu = params.user(u);

    let mut user = vec![0.0; k];
    let mut nodes = Vec::new();
    for &z in path.decisions() {
        let set = tree.competitors(z)?;
        let probs = softmax(&model.set_affinities(u, set));
        for (&c, prob) in set.iter().zip(probs) {
            let coef = if c == z { 1.0 } else { 0.0 } - prob;
            let slot = tree.internal_slot(c).expect("choice sets hold internal nodes");
            let qc = params.node(slot);
            for (g, q) in user.iter_mut().zip(qc) {
                *g += coef * q;
            }
            let mut vec: Vec<f64> = pu.iter().map(|x| coef * x).collect();
            prior_grad(model, c, cfg.prior_weight, &mut vec);
            nodes.push(NodeGrad { node: c, vec, bias: coef });
        }
    }

    let mut hs = Vec::with_capacity(hs_path.len());
    for step in &hs_path.steps {
        let qn = params.hs(step.node);
        let coef = step.dir.indicator() - sigmoid(model.hs_score(u, step.node));
        for (g, q) in user.iter_mut().zip(qn) {
            *g += coef * q;
        }
        let vec = pu.iter().zip(qn).map(|(x, q)| coef * x - cfg.l2_hs * q).collect();
        hs.push(HsGrad { node: step.node, vec, bias: coef });
    }

    if cfg.l2_user != 0.0 {
        for (g, x) in user.iter_mut().zip(pu) {
            *g -= cfg.l2_user * x;
        }
    }
    Ok(InstanceGradient { user, nodes, hs })
}

/// ∂O/∂p_u for instance (u, i).
pub fn grad_user(model: &Model, u: UserId, i: AppId, cfg: &TrainConfig) -> Result<Vec<f64>> {
    Ok(instance_gradient(model, u, i, cfg)?.user)
}

/// (∂O/∂q_z, ∂O/∂b_z) for a node on the choice path or competing with one.
pub fn grad_category_node(model: &Model, u: UserId, i: AppId, z: NodeId, cfg: &TrainConfig) -> Result<(Vec<f64>, f64)> {
    let g = instance_gradient(model, u, i, cfg)?;
    g.nodes
        .into_iter()
        .find(|n| n.node == z)
        .map(|n| (n.vec, n.bias))
        .ok_or_else(|| Error::NodeNotInCompetingSet(model.tree.key_of(z).to_string()))
}

/// (∂O/∂q_n, ∂O/∂b_n) for the binary-tree node at 0-based `step` of the app's route.
pub fn grad_hs_node(model: &Model, u: UserId, i: AppId, step: usize, cfg: &TrainConfig) -> Result<(Vec<f64>, f64)> {
    let len = model.forest.hs_path(i)?.len();
    if step >= len {
        return Err(Error::IndexOutOfPath { index: step, len });
    }
    let g = instance_gradient(model, u, i, cfg)?;
    let h = &g.hs[step];
    Ok((h.vec.clone(), h.bias))
}

/// One ascent step Θ ← Θ + lr·∇ on instance (u, i). All gradients are taken
/// at the pre-step parameters. Returns the number of blocks updated.
pub fn sgd_step(model: &mut Model, u: UserId, i: AppId, lr: f64, cfg: &TrainConfig) -> Result<usize> {
    let g = instance_gradient(model, u, i, cfg)?;
    apply_gradient(model, u, &g, lr);
    Ok(g.touched())
}

fn apply_gradient(model: &mut Model, u: UserId, g: &InstanceGradient, lr: f64) {
    let Model { tree, params, .. } = model;
    for (p, d) in params.user_mut(u).iter_mut().zip(&g.user) {
        *p += lr * d;
    }
    for n in &g.nodes {
        let slot = tree.internal_slot(n.node).expect("internal node");
        for (p, d) in params.node_mut(slot).iter_mut().zip(&n.vec) {
            *p += lr * d;
        }
        params.node_bias[slot] += lr * n.bias;
    }
    for h in &g.hs {
        for (p, d) in params.hs_mut(h.node).iter_mut().zip(&h.vec) {
            *p += lr * d;
        }
        params.hs_bias[h.node.index()] += lr * h.bias;
    }
}

/// The training objective: Σ ln Pr(i|u) + w·ln prior minus the optional L2 terms.
pub fn objective(model: &Model, data: &AdoptionDataset, cfg: &TrainConfig) -> Result<f64> {
    let per_user: Vec<Result<f64>> = (0..data.n_users())
        .into_par_iter()
        .map(|u| {
            let u = UserId::from(u);
            let apps = data.adopted(u);
            if apps.is_empty() {
                return Ok(0.0);
            }
            let logp = model.log_probs_all(u)?;
            Ok(apps.iter().map(|a| logp[a.index()]).sum())
        })
        .collect();
    let mut total = 0.0;
    for r in per_user {
        total += r?;
    }
    total += cfg.prior_weight * model.log_prior();
    let p = &model.params;
    if cfg.l2_user != 0.0 {
        total -= 0.5 * cfg.l2_user * p.user.iter().map(|x| x * x).sum::<f64>();
    }
    if cfg.l2_hs != 0.0 {
        total -= 0.5 * cfg.l2_hs * p.hs_vec.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_objective: f64,
    /// Objective after each completed epoch.
    pub objectives: Vec<f64>,
    /// Mean ‖∂O/∂p_u‖ over the epoch's steps.
    pub mean_user_grad_norm: Vec<f64>,
    /// Parameter blocks updated per epoch.
    pub touches: Vec<u64>,
    pub converged: bool,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.objectives.len()
    }

    pub fn final_objective(&self) -> f64 {
        self.objectives.last().copied().unwrap_or(self.initial_objective)
    }
}

/// Builds the binary-tree forest, initializes and runs epochs of shuffled
/// ascent steps until `max_iter` or convergence.
pub fn train(data: &AdoptionDataset, tree: &CategoryTree, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if data.n_obs() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let counts = data.app_counts();
    let forest = HsForest::build(tree, cfg.hs_strategy, Some(&counts))?;
    let params = init_params(cfg, data.n_users(), tree, &forest)?;
    let mut model = Model::new(tree.clone(), forest, params)?;
    let report = fit(&mut model, data, cfg)?;
    Ok((model, report))
}

/// Runs the epoch loop on an already initialized model.
pub fn fit(model: &mut Model, data: &AdoptionDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.n_obs() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut instances: Vec<(UserId, AppId)> = data.instances().collect();

    let mut report = TrainReport { initial_objective: objective(model, data, cfg)?, ..TrainReport::default() };
    let mut prev = report.initial_objective;
    let mut step = 0usize;
    for epoch in 1..=cfg.max_iter {
        instances.shuffle(&mut rng);
        let mut touches = 0u64;
        let mut norm_sum = 0.0;
        for &(u, i) in &instances {
            step += 1;
            let lr = match cfg.anneal {
                AnnealUnit::Epoch => cfg.anneal_lr(epoch),
                AnnealUnit::Instance => cfg.anneal_lr(step),
            };
            let g = instance_gradient(model, u, i, cfg)?;
            norm_sum += g.user.iter().map(|x| x * x).sum::<f64>().sqrt();
            touches += g.touched() as u64;
            apply_gradient(model, u, &g, lr);
        }
        let obj = objective(model, data, cfg)?;
        if !obj.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        report.objectives.push(obj);
        report.mean_user_grad_norm.push(norm_sum / instances.len() as f64);
        report.touches.push(touches);
        let rel = (obj - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = obj;
        if rel < cfg.convergence_tol {
            report.converged = true;
            break;
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
