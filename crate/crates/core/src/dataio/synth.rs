use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AdoptionDataset;
use crate::error::{Error, Result};
use crate::hsoftmax::{HsForest, HsStrategy};
use crate::ids::{AppId, UserId, UserIndex};
use crate::model::{Model, ModelParams};
use crate::taxonomy::{CategoryTree, NodeKind, TaxonomyEntry};

/// Shape and randomness of a planted-model dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_users: usize,
    /// Number of children per internal node at each category level below the root.
    pub fanouts: Vec<usize>,
    pub apps_per_subcategory: usize,
    pub adoptions_per_user: usize,
    pub dim: usize,
    pub seed: u64,
    /// Standard deviation of planted vectors, biases and tree steps.
    pub scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_users: 1000,
            fanouts: vec![5, 4],
            apps_per_subcategory: 25,
            adoptions_per_user: 40,
            dim: 20,
            seed: 7,
            scale: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn num_apps(&self) -> usize {
        self.fanouts.iter().product::<usize>() * self.apps_per_subcategory
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInfeasible(m));
        if self.num_users == 0 || self.apps_per_subcategory == 0 || self.adoptions_per_user == 0 || self.dim == 0 {
            return bad("users, apps per subcategory, adoptions and dim must all be at least 1".into());
        }
        if self.fanouts.contains(&0) {
            return bad("fan-outs must be at least 1".into());
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return bad("scale must be a non-negative number".into());
        }
        if self.adoptions_per_user > self.num_apps() {
            return bad(format!("{} adoptions per user but only {} apps", self.adoptions_per_user, self.num_apps()));
        }
        Ok(())
    }

    fn taxonomy(&self) -> Result<CategoryTree> {
        let mut entries = vec![TaxonomyEntry::new("root", None, NodeKind::Internal, "All apps")];
        let mut next_app = 0usize;
        self.grow("root", "", 0, &mut entries, &mut next_app);
        CategoryTree::build(&entries)
    }

    fn grow(&self, key: &str, label: &str, level: usize, out: &mut Vec<TaxonomyEntry>, next_app: &mut usize) {
        match self.fanouts.get(level) {
            Some(&fan) => {
                for c in 0..fan {
                    let child_label = if label.is_empty() { c.to_string() } else { format!("{label}.{c}") };
                    let child = format!("c{child_label}");
                    out.push(TaxonomyEntry::new(
                        &child,
                        Some(key),
                        NodeKind::Internal,
                        format!("Category {child_label}"),
                    ));
                    self.grow(&child, &child_label, level + 1, out, next_app);
                }
            }
            None => {
                for _ in 0..self.apps_per_subcategory {
                    let app = format!("a{next_app}");
                    out.push(TaxonomyEntry::new(&app, Some(key), NodeKind::App, format!("App {next_app}")));
                    *next_app += 1;
                }
            }
        }
    }
}

/// A generated taxonomy, the adoptions sampled from it and the model they were sampled from.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub tree: CategoryTree,
    pub dataset: AdoptionDataset,
    pub planted: Model,
}

/// Draws planted parameters (category vectors as a Gaussian random walk down
/// the tree) and samples each user's adoptions without replacement from the
/// model's own Pr(app | user).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let tree = spec.taxonomy()?;
    let forest = HsForest::build(&tree, HsStrategy::Balanced, None)?;
    let mut params = ModelParams::zeros(spec.dim, spec.num_users, tree.num_internal(), forest.num_nodes(), 1.0);

    if spec.scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.scale).expect("validated scale");
        let mut draw = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        draw(&mut params.user);
        // Parents precede children in load order, so one pass walks the tree.
        for &z in tree.internal_nodes() {
            let slot = tree.internal_slot(z).expect("internal");
            let base = match tree.parent(z)? {
                Some(p) => params.node(tree.internal_slot(p).expect("internal")).to_vec(),
                None => vec![0.0; spec.dim],
            };
            let mut step = vec![0.0; spec.dim];
            draw(&mut step);
            for ((q, b), s) in params.node_mut(slot).iter_mut().zip(&base).zip(&step) {
                *q = b + s;
            }
        }
        draw(&mut params.node_bias);
        draw(&mut params.hs_vec);
        draw(&mut params.hs_bias);
    }
    let planted = Model::new(tree.clone(), forest, params)?;

    let per_user: Vec<Result<Vec<AppId>>> = (0..spec.num_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(u as u64 + 1);
            let probs: Vec<f64> = planted.log_probs_all(UserId::from(u))?.into_iter().map(f64::exp).collect();
            Ok(sample_without_replacement(probs, spec.adoptions_per_user, &mut rng))
        })
        .collect();
    let per_user = per_user.into_iter().collect::<Result<Vec<_>>>()?;

    let users = UserIndex::from_keys((0..spec.num_users).map(|u| format!("u{u}")));
    let dataset = AdoptionDataset::new(users, tree.num_apps(), per_user)?;
    Ok(SynthData { tree, dataset, planted })
}

/// Repeated categorical draws, renormalizing over the apps not yet taken.
pub(crate) fn sample_without_replacement<R: Rng>(mut weights: Vec<f64>, count: usize, rng: &mut R) -> Vec<AppId> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let mut pick = None;
        if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
        }
        // All remaining mass underflowed: fall back to the first untaken app.
        let i = pick.unwrap_or_else(|| {
            (0..weights.len())
                .find(|i| !out.contains(&AppId::from(*i)))
                .expect("count never exceeds the number of apps")
        });
        weights[i] = 0.0;
        out.push(AppId::from(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_users: 30,
            fanouts: vec![2, 2],
            apps_per_subcategory: 5,
            adoptions_per_user: 6,
            dim: 4,
            seed: 11,
            scale: 0.8,
        }
    }

    #[test]
    fn shape_and_cardinality() {
        let d = generate_synthetic(&small()).unwrap();
        assert_eq!(d.tree.num_apps(), 20);
        assert_eq!(d.tree.depth(), 3);
        for u in 0..30 {
            assert_eq!(d.dataset.adopted(UserId(u)).len(), 6);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.planted.params, b.planted.params);
    }

    #[test]
    fn infeasible_specs() {
        let too_many = SynthSpec { adoptions_per_user: 21, ..small() };
        assert!(matches!(generate_synthetic(&too_many), Err(Error::SpecInfeasible(_))));
        let zero_fan = SynthSpec { fanouts: vec![2, 0], ..small() };
        assert!(matches!(generate_synthetic(&zero_fan), Err(Error::SpecInfeasible(_))));
    }

    #[test]
    fn sampling_takes_every_app_once_when_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut got = sample_without_replacement(vec![0.5, 0.0, 0.25, 0.25], 4, &mut rng);
        got.sort();
        assert_eq!(got, (0..4).map(AppId).collect::<Vec<_>>());
    }
}
