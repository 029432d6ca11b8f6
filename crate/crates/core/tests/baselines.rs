use std::time::Instant;

use treechoice::baselines::{instance_loss, score_flat, train_baseline, BaselineConfig, FlatInstance};
use treechoice::dataio::{generate_synthetic, AdoptionDataset, FlatKind, SynthSpec};
use treechoice::evaluation::{split, SplitSpec};
use treechoice::gradcheck::{run_gradcheck, GradcheckOptions};
use treechoice::{AppId, UserId, UserIndex};

fn planted() -> (AdoptionDataset, AdoptionDataset) {
    let d = generate_synthetic(&SynthSpec {
        num_users: 300,
        fanouts: vec![3, 2],
        apps_per_subcategory: 10,
        adoptions_per_user: 15,
        dim: 5,
        seed: 13,
        scale: 0.8,
    })
    .unwrap();
    split(&d.dataset, &SplitSpec::default()).unwrap()
}

fn cfg() -> BaselineConfig {
    BaselineConfig { dim: 5, max_iter: 15, ..BaselineConfig::default() }
}

#[test]
fn finite_difference_suite_passes_quickly() {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(report.passed(), "{report:#?}");
    assert!(report.families.iter().all(|f| f.probes >= 100));
    assert_eq!(report.families.len(), 9);
    assert!(secs < 10.0, "{secs}s");
}

#[test]
fn losses_fall_and_runs_repeat() {
    let (train, _) = planted();
    for kind in FlatKind::ALL {
        let (a, report) = train_baseline(kind, &train, &cfg()).unwrap();
        let first = report.epoch_loss[0];
        let last = *report.epoch_loss.last().unwrap();
        assert!(last < first, "{kind}: {first} -> {last}");
        let (b, _) = train_baseline(kind, &train, &cfg()).unwrap();
        assert_eq!(a, b, "{kind} is not deterministic");
    }
}

#[test]
fn heavy_regularization_shrinks_everything() {
    let (train, _) = planted();
    for kind in FlatKind::ALL {
        let strong = BaselineConfig { lambda_u: 10.0, lambda_i: 10.0, lambda_b: 10.0, lr: 0.04, ..cfg() };
        let (p, _) = train_baseline(kind, &train, &strong).unwrap();
        let (free, _) = train_baseline(kind, &train, &cfg()).unwrap();
        let max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max(&p.user) < 1e-2 * max(&free.user), "{kind}");
        assert!(max(&p.item) < 1e-2 * max(&free.item), "{kind}");
    }
}

#[test]
fn pmf_fits_a_separable_toy_exactly() {
    let d = AdoptionDataset::new(UserIndex::from_keys(["u"]), 2, vec![vec![AppId(0)]]).unwrap();
    let c = BaselineConfig {
        dim: 2,
        lr: 0.1,
        nu: 1e9,
        max_iter: 3000,
        neg_per_pos: 1,
        lambda_u: 0.0,
        lambda_i: 0.0,
        lambda_b: 0.0,
        ..BaselineConfig::default()
    };
    let (p, _) = train_baseline(FlatKind::PmfNeg, &d, &c).unwrap();
    assert!((p.score(UserId(0), AppId(0)) - 1.0).abs() < 1e-6);
    assert!(p.score(UserId(0), AppId(1)).abs() < 1e-6);
}

#[test]
fn bpr_ranks_held_out_apps_above_chance() {
    let (train, test) = planted();
    let (p, _) = train_baseline(FlatKind::Bpr, &train, &cfg()).unwrap();
    let mut auc_sum = 0.0;
    let mut users = 0;
    for u in 0..train.n_users() {
        let u = UserId::from(u);
        let pos = test.adopted(u);
        if pos.is_empty() {
            continue;
        }
        let neg: Vec<AppId> =
            (0..train.n_apps()).map(AppId::from).filter(|a| !train.has_adopted(u, *a) && !pos.contains(a)).collect();
        let mut wins = 0.0;
        for &i in pos {
            for &j in &neg {
                let (si, sj) = (p.score(u, i), p.score(u, j));
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        auc_sum += wins / (pos.len() * neg.len()) as f64;
        users += 1;
    }
    let auc = auc_sum / users as f64;
    assert!(auc > 0.5, "AUC {auc}");
}

#[test]
fn ccf_loss_is_non_negative_and_scoring_excludes() {
    let (train, _) = planted();
    let (p, _) = train_baseline(FlatKind::Ccf, &train, &cfg()).unwrap();
    let c = BaselineConfig::default();
    for u in 0..20 {
        let inst = FlatInstance { user: UserId(u), pos: AppId(u), negs: vec![AppId(u + 1), AppId(u + 2)] };
        assert!(instance_loss(FlatKind::Ccf, &p, &inst, &c) >= 0.0);
    }
    let u = UserId(0);
    let ranked = score_flat(&p, u, Some(train.adopted(u))).unwrap();
    assert_eq!(ranked.len(), train.n_apps() - train.adopted(u).len());
    assert!(ranked.iter().all(|(a, _)| !train.has_adopted(u, *a)));
    assert!(ranked.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
}
