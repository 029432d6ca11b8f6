//! Central finite-difference checks of every analytic gradient, on random
//! taxonomies and random parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{instance_grad, instance_loss, BaselineConfig, FlatInstance};
use crate::dataio::FlatKind;
use crate::error::Result;
use crate::hsoftmax::{HsForest, HsStrategy};
use crate::ids::{AppId, NodeId, UserId};
use crate::model::{FlatParams, Model, ModelParams};
use crate::taxonomy::{CategoryTree, NodeKind, TaxonomyEntry};
use crate::training::{instance_gradient, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random (parameters, instance) draws per gradient family.
    pub probes: usize,
    pub step: f64,
    pub max_dim: usize,
    pub max_apps: usize,
    pub max_levels: usize,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 1, probes: 100, step: 1e-5, max_dim: 8, max_apps: 30, max_levels: 3, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub name: String,
    pub probes: usize,
    pub checks: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub families: Vec<FamilyResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.families.iter().map(|f| f.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-6).
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-6)
}

/// Central difference of `f` along every coordinate that `get` exposes.
fn numeric<T>(
    target: &mut T,
    len: usize,
    h: f64,
    get: impl Fn(&mut T) -> &mut [f64],
    f: impl Fn(&T) -> f64,
) -> Vec<f64> {
    (0..len)
        .map(|j| {
            let orig = get(target)[j];
            get(target)[j] = orig + h;
            let up = f(target);
            get(target)[j] = orig - h;
            let down = f(target);
            get(target)[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A random taxonomy with `1..=max_levels` category levels and at most
/// `max_apps` apps. Occasionally includes an empty category.
pub fn random_taxonomy<R: Rng>(rng: &mut R, max_levels: usize, max_apps: usize) -> Result<CategoryTree> {
    let levels = rng.random_range(1..=max_levels.max(1));
    let mut entries = vec![TaxonomyEntry::new("r", None, NodeKind::Internal, "root")];
    let mut frontier = vec!["r".to_string()];
    for level in 1..levels {
        let mut next = Vec::new();
        for parent in &frontier {
            for c in 0..rng.random_range(1..=3) {
                let key = format!("{parent}.{c}");
                entries.push(TaxonomyEntry::new(&key, Some(parent), NodeKind::Internal, format!("level {level}")));
                next.push(key);
            }
        }
        frontier = next;
    }
    let mut budget = max_apps.max(1);
    let mut app = 0usize;
    for (s, sub) in frontier.iter().enumerate() {
        if budget == 0 {
            break;
        }
        // Keep at least one app for the first subcategory so the tree has apps.
        if s > 0 && rng.random_bool(0.1) {
            continue;
        }
        let n = rng.random_range(1..=budget.min(8));
        budget -= n;
        for _ in 0..n {
            entries.push(TaxonomyEntry::new(format!("a{app}"), Some(sub), NodeKind::App, "app"));
            app += 1;
        }
    }
    CategoryTree::build(&entries)
}

/// A model over `tree` with every parameter drawn from N(0, scale²).
pub fn random_model<R: Rng>(
    rng: &mut R,
    tree: CategoryTree,
    dim: usize,
    n_users: usize,
    sigma: f64,
    strategy: HsStrategy,
    scale: f64,
) -> Result<Model> {
    let freq: Vec<u64> = (0..tree.num_apps()).map(|_| rng.random_range(1..50)).collect();
    let forest = HsForest::build(&tree, strategy, Some(&freq))?;
    let mut p = ModelParams::zeros(dim, n_users, tree.num_internal(), forest.num_nodes(), sigma);
    let normal = Normal::new(0.0, scale).expect("finite scale");
    for v in p
        .user
        .iter_mut()
        .chain(p.node_vec.iter_mut())
        .chain(p.node_bias.iter_mut())
        .chain(p.hs_vec.iter_mut())
        .chain(p.hs_bias.iter_mut())
    {
        *v = normal.sample(rng);
    }
    Model::new(tree, forest, p)
}

/// The part of the per-instance objective that depends on category node `z`.
fn local_category_objective(m: &Model, u: UserId, i: AppId, z: NodeId, cfg: &TrainConfig) -> f64 {
    let mut prior = m.log_prior_edge(z);
    for &c in m.tree.children(z).expect("known node") {
        if m.tree.internal_slot(c).is_some() && m.tree.is_active(c) {
            prior += m.log_prior_edge(c);
        }
    }
    m.path_prob(u, i).expect("valid instance") + cfg.prior_weight * prior
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn structural_family(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<FamilyResult>> {
    let h = opts.step;
    let mut user = FamilyResult::new("user vector");
    let mut cat_vec = FamilyResult::new("category vector");
    let mut cat_bias = FamilyResult::new("category bias");
    let mut hs_vec = FamilyResult::new("binary-tree vector");
    let mut hs_bias = FamilyResult::new("binary-tree bias");

    for probe in 0..opts.probes {
        let tree = random_taxonomy(rng, opts.max_levels, opts.max_apps)?;
        let dim = rng.random_range(1..=opts.max_dim.max(1));
        let sigma = rng.random_range(0.5..2.0);
        let strategy = if probe % 2 == 0 { HsStrategy::Balanced } else { HsStrategy::Huffman };
        let mut model = random_model(rng, tree, dim, 3, sigma, strategy, 0.5)?;
        let cfg = TrainConfig {
            sigma,
            prior_weight: rng.random_range(0.0..2.0),
            l2_user: rng.random_range(0.0..0.1),
            l2_hs: rng.random_range(0.0..0.1),
            ..TrainConfig::default()
        };
        let u = UserId(rng.random_range(0..3));
        let i = AppId(rng.random_range(0..model.tree.num_apps() as u32));
        let g = instance_gradient(&model, u, i, &cfg)?;

        let num = numeric(
            &mut model,
            dim,
            h,
            |m| m.params.user_mut(u),
            |m| m.path_prob(u, i).expect("valid instance") - 0.5 * cfg.l2_user * sq(m.params.user(u)),
        );
        user.record(rel_error(&g.user, &num));

        for ng in &g.nodes {
            let slot = model.tree.internal_slot(ng.node).expect("internal");
            let z = ng.node;
            let num = numeric(
                &mut model,
                dim,
                h,
                |m| m.params.node_mut(slot),
                |m| local_category_objective(m, u, i, z, &cfg),
            );
            cat_vec.record(rel_error(&ng.vec, &num));
            let num = numeric(
                &mut model,
                1,
                h,
                |m| &mut m.params.node_bias[slot..slot + 1],
                |m| m.path_prob(u, i).expect("valid instance"),
            );
            cat_bias.record(rel_error(&[ng.bias], &num));
        }

        for hg in &g.hs {
            let n = hg.node;
            let num = numeric(
                &mut model,
                dim,
                h,
                |m| m.params.hs_mut(n),
                |m| m.path_prob(u, i).expect("valid instance") - 0.5 * cfg.l2_hs * sq(m.params.hs(n)),
            );
            hs_vec.record(rel_error(&hg.vec, &num));
            let b = n.index();
            let num = numeric(
                &mut model,
                1,
                h,
                |m| &mut m.params.hs_bias[b..b + 1],
                |m| m.path_prob(u, i).expect("valid instance"),
            );
            hs_bias.record(rel_error(&[hg.bias], &num));
        }
        for f in [&mut user, &mut cat_vec, &mut cat_bias, &mut hs_vec, &mut hs_bias] {
            f.probes += 1;
        }
    }
    Ok(vec![user, cat_vec, cat_bias, hs_vec, hs_bias])
}

fn baseline_family(kind: FlatKind, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> FamilyResult {
    let h = opts.step;
    let mut fam = FamilyResult::new(kind.as_str());
    let normal = Normal::new(0.0, 0.5).expect("finite scale");
    for _ in 0..opts.probes {
        let n_apps = rng.random_range(2..=opts.max_apps.max(2));
        let dim = rng.random_range(1..=opts.max_dim.max(1));
        let mut p = FlatParams::zeros(dim, 2, n_apps);
        for v in p.user.iter_mut().chain(p.item.iter_mut()).chain(p.bias.iter_mut()) {
            *v = normal.sample(rng);
        }
        let cfg = BaselineConfig {
            lambda_u: rng.random_range(0.0..0.1),
            lambda_i: rng.random_range(0.0..0.1),
            lambda_b: rng.random_range(0.0..0.1),
            ..BaselineConfig::default()
        };
        let mut apps: Vec<AppId> = (0..n_apps as u32).map(AppId).collect();
        apps.shuffle(rng);
        let n_negs = match kind {
            FlatKind::Llfm => 0,
            FlatKind::Bpr => 1,
            FlatKind::PmfNeg | FlatKind::Ccf => rng.random_range(1..=(n_apps - 1).min(5)),
        };
        let inst = FlatInstance { user: UserId(rng.random_range(0..2)), pos: apps[0], negs: apps[1..=n_negs].to_vec() };
        let g = instance_grad(kind, &p, &inst, &cfg);
        let loss = |p: &FlatParams| instance_loss(kind, p, &inst, &cfg);
        let u = inst.user;
        fam.record(rel_error(&g.user, &numeric(&mut p, dim, h, |p| p.user_mut(u), loss)));
        for (j, vec, bias) in &g.items {
            let j = *j;
            fam.record(rel_error(vec, &numeric(&mut p, dim, h, |p| p.item_mut(j), loss)));
            let b = j.index();
            fam.record(rel_error(&[*bias], &numeric(&mut p, 1, h, |p| &mut p.bias[b..b + 1], loss)));
        }
        fam.probes += 1;
    }
    fam
}

impl FamilyResult {
    fn new(name: &str) -> Self {
        FamilyResult { name: name.to_string(), probes: 0, checks: 0, max_rel_error: 0.0 }
    }

    fn record(&mut self, err: f64) {
        self.checks += 1;
        // NaN must fail the check rather than vanish in a max.
        self.max_rel_error = if err.is_nan() { f64::INFINITY } else { self.max_rel_error.max(err) };
    }
}

/// Runs every family and reports the worst relative error of each.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut families = structural_family(opts, &mut rng)?;
    for kind in FlatKind::ALL {
        families.push(baseline_family(kind, opts, &mut rng));
    }
    Ok(GradcheckReport { families, tolerance: opts.tolerance })
}
