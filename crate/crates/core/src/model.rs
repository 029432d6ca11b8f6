//! Parameters of the structural choice model and every probability it defines.
//!
//! A user reaches an app by a cascade of decisions: at each category level a
//! softmax over the competing children, then inside the final subcategory a
//! sequence of sigmoid left/right decisions down a binary tree. The log of the
//! product of those step probabilities is the score used for ranking.

use serde::{Deserialize, Serialize};

use crate::dataio::AdoptionDataset;
use crate::error::{Error, Result};
use crate::hsoftmax::{Direction, HsForest};
use crate::ids::{AppId, HsNodeId, NodeId, UserId};
use crate::taxonomy::CategoryTree;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln σ(x), accurate for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Learnable values: user vectors, one vector and bias per taxonomy internal
/// node, one vector and bias per binary-tree internal node. Apps carry none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    /// Standard deviation of the Gaussian tree prior.
    pub sigma: f64,
    pub user: Vec<f64>,
    pub node_vec: Vec<f64>,
    pub node_bias: Vec<f64>,
    pub hs_vec: Vec<f64>,
    pub hs_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize, n_users: usize, n_internal: usize, n_hs: usize, sigma: f64) -> Self {
        ModelParams {
            dim,
            sigma,
            user: vec![0.0; n_users * dim],
            node_vec: vec![0.0; n_internal * dim],
            node_bias: vec![0.0; n_internal],
            hs_vec: vec![0.0; n_hs * dim],
            hs_bias: vec![0.0; n_hs],
        }
    }

    pub fn n_users(&self) -> usize {
        self.user.len() / self.dim
    }

    #[inline]
    pub fn user(&self, u: UserId) -> &[f64] {
        let k = self.dim;
        &self.user[u.index() * k..(u.index() + 1) * k]
    }

    #[inline]
    pub fn user_mut(&mut self, u: UserId) -> &mut [f64] {
        let k = self.dim;
        &mut self.user[u.index() * k..(u.index() + 1) * k]
    }

    #[inline]
    pub fn node(&self, slot: usize) -> &[f64] {
        &self.node_vec[slot * self.dim..(slot + 1) * self.dim]
    }

    #[inline]
    pub fn node_mut(&mut self, slot: usize) -> &mut [f64] {
        let k = self.dim;
        &mut self.node_vec[slot * k..(slot + 1) * k]
    }

    #[inline]
    pub fn hs(&self, n: HsNodeId) -> &[f64] {
        &self.hs_vec[n.index() * self.dim..(n.index() + 1) * self.dim]
    }

    #[inline]
    pub fn hs_mut(&mut self, n: HsNodeId) -> &mut [f64] {
        let k = self.dim;
        &mut self.hs_vec[n.index() * k..(n.index() + 1) * k]
    }

    pub fn is_finite(&self) -> bool {
        [&self.user, &self.node_vec, &self.node_bias, &self.hs_vec, &self.hs_bias]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Taxonomy, binary-tree forest and parameters bundled together.
#[derive(Debug, Clone)]
pub struct Model {
    pub tree: CategoryTree,
    pub forest: HsForest,
    pub params: ModelParams,
}

impl Model {
    pub fn new(tree: CategoryTree, forest: HsForest, params: ModelParams) -> Result<Self> {
        let expected = (
            tree.num_internal() * params.dim,
            tree.num_internal(),
            forest.num_nodes() * params.dim,
            forest.num_nodes(),
        );
        let found = (params.node_vec.len(), params.node_bias.len(), params.hs_vec.len(), params.hs_bias.len());
        if params.dim == 0 || expected != found || !params.user.len().is_multiple_of(params.dim) {
            return Err(Error::InvalidConfig(format!(
                "parameter shapes {found:?} do not match the taxonomy {expected:?}"
            )));
        }
        Ok(Model { tree, forest, params })
    }

    pub fn n_users(&self) -> usize {
        self.params.n_users()
    }

    pub fn check_user(&self, u: UserId) -> Result<()> {
        if u.index() < self.n_users() {
            Ok(())
        } else {
            Err(Error::UnknownUser(u.to_string()))
        }
    }

    pub fn node_slot(&self, z: NodeId) -> Result<usize> {
        self.tree.internal_slot(z).ok_or_else(|| Error::UnknownNode(z.to_string()))
    }

    #[inline]
    pub(crate) fn affinity_slot(&self, u: UserId, slot: usize) -> f64 {
        self.params.node_bias[slot] + dot(self.params.user(u), self.params.node(slot))
    }

    #[inline]
    pub(crate) fn hs_score(&self, u: UserId, n: HsNodeId) -> f64 {
        self.params.hs_bias[n.index()] + dot(self.params.user(u), self.params.hs(n))
    }

    /// b_z + ⟨p_u, q_z⟩.
    pub fn affinity_node(&self, u: UserId, z: NodeId) -> Result<f64> {
        self.check_user(u)?;
        let slot = self.node_slot(z)?;
        Ok(self.affinity_slot(u, slot))
    }

    /// b_n + ⟨p_u, q_n⟩ for a binary-tree node.
    pub fn affinity_hs(&self, u: UserId, n: HsNodeId) -> Result<f64> {
        self.check_user(u)?;
        if n.index() >= self.forest.num_nodes() {
            return Err(Error::UnknownNode(format!("hs:{n}")));
        }
        Ok(self.hs_score(u, n))
    }

    /// Affinities of every member of a choice set, in set order.
    pub(crate) fn set_affinities(&self, u: UserId, set: &[NodeId]) -> Vec<f64> {
        set.iter()
            .map(|&c| {
                let slot = self.tree.internal_slot(c).expect("choice sets hold internal nodes");
                self.affinity_slot(u, slot)
            })
            .collect()
    }

    /// ln Pr(z | u, parent(z)).
    pub fn log_step_prob_category(&self, u: UserId, z: NodeId) -> Result<f64> {
        self.check_user(u)?;
        self.node_slot(z)?;
        let set = self.tree.competitors(z)?;
        let pos = set
            .iter()
            .position(|&c| c == z)
            .ok_or_else(|| Error::NodeNotInCompetingSet(self.tree.key_of(z).to_string()))?;
        let scores = self.set_affinities(u, set);
        Ok(scores[pos] - log_sum_exp(&scores))
    }

    pub fn step_prob_category(&self, u: UserId, z: NodeId) -> Result<f64> {
        self.log_step_prob_category(u, z).map(f64::exp)
    }

    /// σ(s · y) with s = +1 for left and −1 for right.
    pub fn step_prob_hs(&self, u: UserId, n: HsNodeId, dir: Direction) -> Result<f64> {
        Ok(sigmoid(dir.sign() * self.affinity_hs(u, n)?))
    }

    pub fn log_app_prob_hs(&self, u: UserId, app: AppId) -> Result<f64> {
        self.check_user(u)?;
        let path = self.forest.hs_path(app)?;
        Ok(path.steps.iter().map(|s| log_sigmoid(s.dir.sign() * self.hs_score(u, s.node))).sum())
    }

    /// Probability of the app within its subcategory; 1 for a lone app.
    pub fn app_prob_hs(&self, u: UserId, app: AppId) -> Result<f64> {
        self.log_app_prob_hs(u, app).map(f64::exp)
    }

    /// ln Pr(app | u): category decisions along the choice path plus the
    /// binary-tree decisions inside the subcategory.
    pub fn path_prob(&self, u: UserId, app: AppId) -> Result<f64> {
        let path = self.tree.choice_path(app)?;
        let mut total = self.log_app_prob_hs(u, app)?;
        for &z in path.decisions() {
            total += self.log_step_prob_category(u, z)?;
        }
        Ok(total)
    }

    /// Log-probabilities of every app for `u`, indexed by app id, computed in
    /// one top-down sweep that scores each node once.
    pub fn log_probs_all(&self, u: UserId) -> Result<Vec<f64>> {
        self.check_user(u)?;
        let mut out = vec![f64::NEG_INFINITY; self.tree.num_apps()];
        let mut stack = vec![(self.tree.root(), 0.0f64)];
        while let Some((z, base)) = stack.pop() {
            if let Some(hs) = self.forest.tree_of(z) {
                let scores: Vec<f64> = (0..hs.num_internal() as u32)
                    .map(|local| {
                        let n = self.forest.global_id(z, local).expect("tree registered");
                        self.hs_score(u, n)
                    })
                    .collect();
                for (app, route) in hs.local_paths() {
                    out[app.index()] =
                        base + route.iter().map(|&(n, d)| log_sigmoid(d.sign() * scores[n as usize])).sum::<f64>();
                }
                continue;
            }
            let set = self.tree.choice_set(z);
            if set.is_empty() {
                continue;
            }
            let scores = self.set_affinities(u, set);
            let norm = log_sum_exp(&scores);
            for (&c, s) in set.iter().zip(&scores) {
                stack.push((c, base + s - norm));
            }
        }
        Ok(out)
    }

    /// Gaussian tree prior with Θ-independent constants dropped:
    /// −‖q_root‖²/2σ² − Σ_{z≠root} ‖q_z − q_parent(z)‖²/2σ², over active nodes.
    pub fn log_prior(&self) -> f64 {
        self.tree.internal_nodes().iter().filter(|&&z| self.tree.is_active(z)).map(|&z| self.log_prior_edge(z)).sum()
    }

    /// The single prior term that ties `z` to its parent (or to 0 at the root).
    pub fn log_prior_edge(&self, z: NodeId) -> f64 {
        let s2 = self.params.sigma * self.params.sigma;
        let slot = self.tree.internal_slot(z).expect("internal node");
        let q = self.params.node(slot);
        let sq: f64 = match self.tree.parent(z).expect("known node") {
            None => q.iter().map(|x| x * x).sum(),
            Some(p) => {
                let qp = self.params.node(self.tree.internal_slot(p).expect("internal parent"));
                q.iter().zip(qp).map(|(a, b)| (a - b) * (a - b)).sum()
            }
        };
        -sq / (2.0 * s2)
    }

    /// Σ over adoptions of ln Pr(i|u) plus the tree prior.
    pub fn log_posterior(&self, data: &AdoptionDataset) -> Result<f64> {
        if data.n_obs() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut ll = 0.0;
        for (u, i) in data.instances() {
            ll += self.path_prob(u, i)?;
        }
        Ok(ll + self.log_prior())
    }

    /// Every app ranked by log-probability, best first, ties by app id.
    /// Apps in `exclude` are left out.
    pub fn score_all(&self, u: UserId, exclude: Option<&[AppId]>) -> Result<Vec<(AppId, f64)>> {
        let logp = self.log_probs_all(u)?;
        Ok(rank_scores(&logp, exclude.unwrap_or(&[])))
    }
}

/// Sorts `(app, score)` descending by score with ascending app id on ties.
pub fn rank_scores(scores: &[f64], exclude: &[AppId]) -> Vec<(AppId, f64)> {
    let mut skip = vec![false; scores.len()];
    for a in exclude {
        if let Some(s) = skip.get_mut(a.index()) {
            *s = true;
        }
    }
    let mut ranked: Vec<(AppId, f64)> =
        scores.iter().enumerate().filter(|(i, _)| !skip[*i]).map(|(i, &s)| (AppId::from(i), s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// One vector and bias per app. Used by the flat baselines and as the
/// exact-softmax reference for the binary-tree approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub dim: usize,
    pub user: Vec<f64>,
    pub item: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FlatParams {
    pub fn zeros(dim: usize, n_users: usize, n_apps: usize) -> Self {
        FlatParams { dim, user: vec![0.0; n_users * dim], item: vec![0.0; n_apps * dim], bias: vec![0.0; n_apps] }
    }

    pub fn n_users(&self) -> usize {
        self.user.len() / self.dim
    }

    pub fn n_apps(&self) -> usize {
        self.bias.len()
    }

    #[inline]
    pub fn user(&self, u: UserId) -> &[f64] {
        &self.user[u.index() * self.dim..(u.index() + 1) * self.dim]
    }

    #[inline]
    pub fn user_mut(&mut self, u: UserId) -> &mut [f64] {
        let k = self.dim;
        &mut self.user[u.index() * k..(u.index() + 1) * k]
    }

    #[inline]
    pub fn item(&self, i: AppId) -> &[f64] {
        &self.item[i.index() * self.dim..(i.index() + 1) * self.dim]
    }

    #[inline]
    pub fn item_mut(&mut self, i: AppId) -> &mut [f64] {
        let k = self.dim;
        &mut self.item[i.index() * k..(i.index() + 1) * k]
    }

    /// p_u·q_i + b_i.
    #[inline]
    pub fn score(&self, u: UserId, i: AppId) -> f64 {
        self.bias[i.index()] + dot(self.user(u), self.item(i))
    }

    pub fn check_user(&self, u: UserId) -> Result<()> {
        if u.index() < self.n_users() {
            Ok(())
        } else {
            Err(Error::UnknownUser(u.to_string()))
        }
    }
}

/// Exact softmax of `u`'s per-app scores over `apps`.
pub fn app_prob_exact(flat: &FlatParams, u: UserId, apps: &[AppId]) -> Result<Vec<f64>> {
    if apps.is_empty() {
        return Err(Error::EmptySubcategory);
    }
    flat.check_user(u)?;
    if let Some(a) = apps.iter().find(|a| a.index() >= flat.n_apps()) {
        return Err(Error::UnknownApp(a.to_string()));
    }
    let scores: Vec<f64> = apps.iter().map(|&i| flat.score(u, i)).collect();
    Ok(softmax(&scores))
}
