//! Flat latent-factor baselines: LLFM, PMF with negatives, BPR and CCF.
//!
//! All four score an app as p_u·q_i + b_i and are trained by plain SGD with
//! the same annealing schedule and Gaussian initialization as the structural
//! model. Every objective is written here as a loss to minimize; BPR's
//! criterion is maximized by minimizing its negative.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{AdoptionDataset, FlatKind};
use crate::error::{Error, Result};
use crate::ids::{AppId, UserId};
use crate::model::{log_sigmoid, rank_scores, sigmoid, softmax, FlatParams};
use crate::training::{anneal_lr, AnnealUnit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub dim: usize,
    pub lr: f64,
    pub nu: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub init_std: f64,
    pub lambda_u: f64,
    pub lambda_i: f64,
    pub lambda_b: f64,
    /// Negatives drawn per positive for PMF-Neg and CCF.
    pub neg_per_pos: usize,
    /// PMF-Neg only: draw negatives once and reuse them every epoch.
    pub freeze_negatives: bool,
    pub anneal: AnnealUnit,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            dim: 20,
            lr: 0.05,
            nu: 50.0,
            max_iter: 50,
            seed: 42,
            init_std: 0.1,
            lambda_u: 0.01,
            lambda_i: 0.01,
            lambda_b: 0.01,
            neg_per_pos: 5,
            freeze_negatives: false,
            anneal: AnnealUnit::Epoch,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad("lr and nu must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter (epochs) must be at least 1");
        }
        if self.neg_per_pos == 0 {
            return bad("neg_per_pos must be at least 1");
        }
        if !(self.init_std >= 0.0 && self.lambda_u >= 0.0 && self.lambda_i >= 0.0 && self.lambda_b >= 0.0) {
            return bad("init_std and regularization weights must be non-negative");
        }
        Ok(())
    }
}

/// Up to `count` distinct apps drawn uniformly from those `u` has not adopted.
/// When fewer than `count` remain, all of them are returned.
pub fn negative_sample<R: Rng>(data: &AdoptionDataset, u: UserId, count: usize, rng: &mut R) -> Result<Vec<AppId>> {
    let adopted = data.adopted(u);
    let available = data.n_apps() - adopted.len();
    if available == 0 {
        return Err(Error::UserHasAdoptedEverything(data.users().key(u).to_string()));
    }
    if available <= count {
        return Ok((0..data.n_apps()).map(AppId::from).filter(|a| adopted.binary_search(a).is_err()).collect());
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = AppId::from(rng.random_range(0..data.n_apps()));
        if adopted.binary_search(&a).is_err() && !out.contains(&a) {
            out.push(a);
        }
    }
    Ok(out)
}

/// One training example: a positive app plus the sampled alternatives
/// (none for LLFM, one for BPR, the offer-set extras for CCF).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatInstance {
    pub user: UserId,
    pub pos: AppId,
    pub negs: Vec<AppId>,
}

/// Loss gradient over the blocks one instance touches.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad {
    pub user: Vec<f64>,
    pub items: Vec<(AppId, Vec<f64>, f64)>,
}

fn reg(p: &FlatParams, inst: &FlatInstance, cfg: &BaselineConfig) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut r = cfg.lambda_u * sq(p.user(inst.user));
    for &j in std::iter::once(&inst.pos).chain(&inst.negs) {
        r += cfg.lambda_i * sq(p.item(j)) + cfg.lambda_b * p.bias[j.index()].powi(2);
    }
    r
}

/// The instance's loss, including the L2 terms of the blocks it touches.
pub fn instance_loss(kind: FlatKind, p: &FlatParams, inst: &FlatInstance, cfg: &BaselineConfig) -> f64 {
    let u = inst.user;
    let s_pos = p.score(u, inst.pos);
    let data = match kind {
        FlatKind::Llfm => -log_sigmoid(s_pos),
        FlatKind::PmfNeg => (1.0 - s_pos).powi(2) + inst.negs.iter().map(|&j| p.score(u, j).powi(2)).sum::<f64>(),
        FlatKind::Bpr => -log_sigmoid(s_pos - p.score(u, inst.negs[0])),
        FlatKind::Ccf => {
            let scores: Vec<f64> = std::iter::once(s_pos).chain(inst.negs.iter().map(|&j| p.score(u, j))).collect();
            crate::model::log_sum_exp(&scores) - s_pos
        }
    };
    data + reg(p, inst, cfg)
}

/// ∂loss/∂score for the positive and each alternative.
fn score_coefs(kind: FlatKind, p: &FlatParams, inst: &FlatInstance) -> Vec<f64> {
    let u = inst.user;
    let s_pos = p.score(u, inst.pos);
    match kind {
        FlatKind::Llfm => vec![sigmoid(s_pos) - 1.0],
        FlatKind::PmfNeg => {
            std::iter::once(2.0 * (s_pos - 1.0)).chain(inst.negs.iter().map(|&j| 2.0 * p.score(u, j))).collect()
        }
        FlatKind::Bpr => {
            let g = -sigmoid(-(s_pos - p.score(u, inst.negs[0])));
            vec![g, -g]
        }
        FlatKind::Ccf => {
            let scores: Vec<f64> = std::iter::once(s_pos).chain(inst.negs.iter().map(|&j| p.score(u, j))).collect();
            let mut probs = softmax(&scores);
            probs[0] -= 1.0;
            probs
        }
    }
}

pub fn instance_grad(kind: FlatKind, p: &FlatParams, inst: &FlatInstance, cfg: &BaselineConfig) -> FlatGrad {
    let pu = p.user(inst.user);
    let coefs = score_coefs(kind, p, inst);
    let mut user: Vec<f64> = pu.iter().map(|x| 2.0 * cfg.lambda_u * x).collect();
    let mut items = Vec::with_capacity(coefs.len());
    for (&j, &c) in std::iter::once(&inst.pos).chain(&inst.negs).zip(&coefs) {
        let qj = p.item(j);
        for (g, q) in user.iter_mut().zip(qj) {
            *g += c * q;
        }
        let vec = pu.iter().zip(qj).map(|(x, q)| c * x + 2.0 * cfg.lambda_i * q).collect();
        items.push((j, vec, c + 2.0 * cfg.lambda_b * p.bias[j.index()]));
    }
    FlatGrad { user, items }
}

fn apply(p: &mut FlatParams, u: UserId, g: &FlatGrad, lr: f64) {
    for (x, d) in p.user_mut(u).iter_mut().zip(&g.user) {
        *x -= lr * d;
    }
    for (j, vec, b) in &g.items {
        for (x, d) in p.item_mut(*j).iter_mut().zip(vec) {
            *x -= lr * d;
        }
        p.bias[j.index()] -= lr * b;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Mean instance loss over each epoch, measured before each update.
    pub epoch_loss: Vec<f64>,
}

pub fn init_flat(cfg: &BaselineConfig, n_users: usize, n_apps: usize) -> Result<FlatParams> {
    let mut p = FlatParams::zeros(cfg.dim, n_users, n_apps);
    if cfg.init_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for v in p.user.iter_mut().chain(p.item.iter_mut()) {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(p)
}

pub fn train_baseline(
    kind: FlatKind,
    data: &AdoptionDataset,
    cfg: &BaselineConfig,
) -> Result<(FlatParams, BaselineReport)> {
    cfg.validate()?;
    if data.n_obs() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let mut params = init_flat(cfg, data.n_users(), data.n_apps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<(UserId, AppId)> = data.instances().collect();

    let n_negs = match kind {
        FlatKind::Llfm => 0,
        FlatKind::Bpr => 1,
        FlatKind::PmfNeg | FlatKind::Ccf => cfg.neg_per_pos,
    };
    let frozen: Option<Vec<Vec<AppId>>> = if kind == FlatKind::PmfNeg && cfg.freeze_negatives {
        Some(order.iter().map(|&(u, _)| negative_sample(data, u, n_negs, &mut rng)).collect::<Result<_>>()?)
    } else {
        None
    };
    // Frozen negatives are stored per original instance position.
    let mut positions: Vec<usize> = (0..order.len()).collect();

    let mut report = BaselineReport::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.max_iter {
        positions.shuffle(&mut rng);
        let mut total = 0.0;
        for &pos in &positions {
            step += 1;
            let (u, i) = order[pos];
            let negs = match (&frozen, n_negs) {
                (Some(f), _) => f[pos].clone(),
                (None, 0) => Vec::new(),
                (None, n) => negative_sample(data, u, n, &mut rng)?,
            };
            let inst = FlatInstance { user: u, pos: i, negs };
            total += instance_loss(kind, &params, &inst, cfg);
            let lr = match cfg.anneal {
                AnnealUnit::Epoch => anneal_lr(cfg.lr, cfg.nu, epoch),
                AnnealUnit::Instance => anneal_lr(cfg.lr, cfg.nu, step),
            };
            let g = instance_grad(kind, &params, &inst, cfg);
            apply(&mut params, u, &g, lr);
        }
        let mean = total / positions.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        report.epoch_loss.push(mean);
    }
    order.clear();
    Ok((params, report))
}

pub fn train_llfm(data: &AdoptionDataset, cfg: &BaselineConfig) -> Result<FlatParams> {
    train_baseline(FlatKind::Llfm, data, cfg).map(|r| r.0)
}

pub fn train_pmf_neg(data: &AdoptionDataset, cfg: &BaselineConfig) -> Result<FlatParams> {
    train_baseline(FlatKind::PmfNeg, data, cfg).map(|r| r.0)
}

pub fn train_bpr(data: &AdoptionDataset, cfg: &BaselineConfig) -> Result<FlatParams> {
    train_baseline(FlatKind::Bpr, data, cfg).map(|r| r.0)
}

pub fn train_ccf(data: &AdoptionDataset, cfg: &BaselineConfig) -> Result<FlatParams> {
    train_baseline(FlatKind::Ccf, data, cfg).map(|r| r.0)
}

/// Every app ranked by p_u·q_i + b_i, best first, ties by app id.
pub fn score_flat(p: &FlatParams, u: UserId, exclude: Option<&[AppId]>) -> Result<Vec<(AppId, f64)>> {
    p.check_user(u)?;
    let scores: Vec<f64> = (0..p.n_apps()).map(|i| p.score(u, AppId::from(i))).collect();
    Ok(rank_scores(&scores, exclude.unwrap_or(&[])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::UserIndex;

    fn data(n_apps: usize, adopted: Vec<Vec<u32>>) -> AdoptionDataset {
        let users = UserIndex::from_keys((0..adopted.len()).map(|u| format!("u{u}")));
        let per_user = adopted.into_iter().map(|v| v.into_iter().map(AppId).collect()).collect();
        AdoptionDataset::new(users, n_apps, per_user).unwrap()
    }

    #[test]
    fn negatives_avoid_adoptions() {
        let d = data(6, vec![vec![0, 1, 2, 3, 4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(negative_sample(&d, UserId(0), 1, &mut rng).unwrap(), vec![AppId(5)]);

        let d = data(50, vec![vec![1, 7, 9, 30]]);
        for _ in 0..100 {
            let negs = negative_sample(&d, UserId(0), 5, &mut rng).unwrap();
            assert_eq!(negs.len(), 5);
            assert!(negs.iter().all(|a| !d.has_adopted(UserId(0), *a)));
            let mut uniq = negs.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 5);
        }

        let full = data(2, vec![vec![0, 1]]);
        assert!(matches!(negative_sample(&full, UserId(0), 1, &mut rng), Err(Error::UserHasAdoptedEverything(_))));
    }

    #[test]
    fn ccf_with_two_items_is_logistic() {
        let mut p = FlatParams::zeros(2, 1, 2);
        p.user.copy_from_slice(&[0.3, -0.2]);
        p.item.copy_from_slice(&[0.5, 1.0, -0.7, 0.1]);
        p.bias.copy_from_slice(&[0.2, -0.4]);
        let cfg = BaselineConfig { lambda_u: 0.0, lambda_i: 0.0, lambda_b: 0.0, ..Default::default() };
        let inst = FlatInstance { user: UserId(0), pos: AppId(0), negs: vec![AppId(1)] };
        let diff = p.score(UserId(0), AppId(0)) - p.score(UserId(0), AppId(1));
        let ccf = instance_loss(FlatKind::Ccf, &p, &inst, &cfg);
        assert!((ccf - (1.0 + (-diff).exp()).ln()).abs() < 1e-12);
        assert!(ccf >= 0.0);
        // BPR's pairwise term is the same quantity; swapping i and j negates the difference.
        let bpr = instance_loss(FlatKind::Bpr, &p, &inst, &cfg);
        assert!((bpr - ccf).abs() < 1e-12);
        let swapped = FlatInstance { user: UserId(0), pos: AppId(1), negs: vec![AppId(0)] };
        let bpr_swapped = instance_loss(FlatKind::Bpr, &p, &swapped, &cfg);
        assert!((-(-bpr).exp_m1().abs().ln() + 0.0).is_finite());
        assert!(((-bpr).exp() + (-bpr_swapped).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_flat_ties_and_shift() {
        let mut p = FlatParams::zeros(2, 1, 4);
        let order: Vec<u32> = score_flat(&p, UserId(0), None).unwrap().iter().map(|x| x.0 .0).collect();
        assert_eq!(order, [0, 1, 2, 3]);
        p.bias.copy_from_slice(&[0.1, 0.5, -0.2, 0.3]);
        let before: Vec<AppId> = score_flat(&p, UserId(0), None).unwrap().iter().map(|x| x.0).collect();
        p.bias.iter_mut().for_each(|b| *b += 10.0);
        let after: Vec<AppId> = score_flat(&p, UserId(0), None).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(before, after);
        assert_eq!(before[0], AppId(1));
        assert!(matches!(score_flat(&p, UserId(3), None), Err(Error::UnknownUser(_))));
    }
}
