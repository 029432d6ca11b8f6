use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treechoice::dataio::AdoptionDataset;
use treechoice::evaluation::{ap_at_n, evaluate, ndcg_at_n, precision_recall_at_n, user_metrics, EvalOptions, Scorer};
use treechoice::model::rank_scores;
use treechoice::{AppId, Result, UserId, UserIndex};

/// Straight-line metric formulas, written without sharing any helper.
fn oracle(rec: &[u32], test: &[u32], n: usize, beta: f64) -> [f64; 5] {
    let top = &rec[..n.min(rec.len())];
    let mut hits = 0.0;
    for a in top {
        if test.contains(a) {
            hits += 1.0;
        }
    }
    let p = hits / n as f64;
    let r = hits / test.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { (1.0 + beta * beta) * p * r / (beta * beta * p + r) };
    let mut ap = 0.0;
    let mut seen = 0.0;
    for (k, a) in top.iter().enumerate() {
        if test.contains(a) {
            seen += 1.0;
            ap += seen / (k as f64 + 1.0);
        }
    }
    ap /= n.min(test.len()) as f64;
    let mut dcg = 0.0;
    for (k, a) in top.iter().enumerate() {
        let rel = if test.contains(a) { 1.0 } else { 0.0 };
        dcg += (2f64.powf(rel) - 1.0) / (k as f64 + 2.0).log2();
    }
    let mut idcg = 0.0;
    for k in 0..n.min(test.len()) {
        idcg += 1.0 / (k as f64 + 2.0).log2();
    }
    [p, r, f, ap, dcg / idcg]
}

fn ids(v: &[u32]) -> Vec<AppId> {
    v.iter().map(|&x| AppId(x)).collect()
}

/// Scores from a fixed table, one row per user.
struct Table(Vec<Vec<f64>>);

impl Scorer for Table {
    fn n_users(&self) -> usize {
        self.0.len()
    }

    fn rank(&self, u: UserId, exclude: &[AppId]) -> Result<Vec<(AppId, f64)>> {
        Ok(rank_scores(&self.0[u.index()], exclude))
    }
}

fn random_case(rng: &mut ChaCha8Rng, n_apps: u32) -> (Vec<u32>, Vec<u32>) {
    let mut apps: Vec<u32> = (0..n_apps).collect();
    apps.shuffle(rng);
    let n_test = rng.random_range(1..=8);
    let mut test: Vec<u32> = (0..n_apps).collect();
    test.shuffle(rng);
    test.truncate(n_test);
    (apps, test)
}

#[test]
fn metrics_match_the_oracle_on_random_users() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let opts = EvalOptions::default();
    for _ in 0..50 {
        let (rec, test) = random_case(&mut rng, 30);
        let got = user_metrics(&ids(&rec), &ids(&test), &opts).unwrap();
        for (ci, &n) in opts.cutoffs.iter().enumerate() {
            let want = oracle(&rec, &test, n, opts.beta);
            for m in 0..5 {
                assert!((got[ci][m] - want[m]).abs() < 1e-12, "metric {m} at N={n}");
            }
        }
    }
}

#[test]
fn report_matches_oracle_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let n_users = 50;
    let n_apps = 40;
    let scores: Vec<Vec<f64>> =
        (0..n_users).map(|_| (0..n_apps).map(|_| rng.random_range(0..5) as f64).collect()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for _ in 0..n_users {
        let mut apps: Vec<u32> = (0..n_apps as u32).collect();
        apps.shuffle(&mut rng);
        let n_tr = rng.random_range(0..6);
        let n_te = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..6) };
        train.push(ids(&apps[..n_tr]));
        test.push(ids(&apps[n_tr..n_tr + n_te]));
    }
    let users = UserIndex::from_keys((0..n_users).map(|u| format!("u{u}")));
    let tr = AdoptionDataset::new(users.clone(), n_apps, train.clone()).unwrap();
    let te = AdoptionDataset::new(users, n_apps, test.clone()).unwrap();
    let opts = EvalOptions::default();
    let report = evaluate(&Table(scores.clone()), "table", &tr, &te, &opts).unwrap();

    let mut sums = [[0.0; 5]; 4];
    let mut evaluated = 0;
    for u in 0..n_users {
        if test[u].is_empty() {
            continue;
        }
        evaluated += 1;
        // Independent ranking: sort by score descending, then id.
        let mut order: Vec<u32> = (0..n_apps as u32).filter(|a| !train[u].contains(&AppId(*a))).collect();
        order.sort_by(|&a, &b| scores[u][b as usize].partial_cmp(&scores[u][a as usize]).unwrap().then(a.cmp(&b)));
        let t: Vec<u32> = test[u].iter().map(|a| a.0).collect();
        for (ci, &n) in opts.cutoffs.iter().enumerate() {
            let m = oracle(&order, &t, n, opts.beta);
            for k in 0..5 {
                sums[ci][k] += m[k];
            }
        }
    }
    assert_eq!(report.evaluated_users, evaluated);
    assert_eq!(report.evaluated_users + report.skipped_users, n_users);
    assert_eq!(report.rows.len(), 5 * 4);
    for (ci, &n) in opts.cutoffs.iter().enumerate() {
        for (k, name) in ["precision", "recall", "f_beta", "map", "ndcg"].iter().enumerate() {
            let want = sums[ci][k] / evaluated as f64;
            assert!((report.value(name, n).unwrap() - want).abs() < 1e-12, "{name}@{n}");
        }
    }
}

#[test]
fn oracle_scorer_is_perfect_and_random_scorer_is_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let n_users = 2000;
    let n_apps = 50usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for _ in 0..n_users {
        let mut apps: Vec<u32> = (0..n_apps as u32).collect();
        apps.shuffle(&mut rng);
        train.push(ids(&apps[..8]));
        test.push(ids(&apps[8..10]));
    }
    let users = UserIndex::from_keys((0..n_users).map(|u| format!("u{u}")));
    let tr = AdoptionDataset::new(users.clone(), n_apps, train).unwrap();
    let te = AdoptionDataset::new(users, n_apps, test).unwrap();

    let perfect: Vec<Vec<f64>> = (0..n_users)
        .map(|u| (0..n_apps).map(|a| te.has_adopted(UserId::from(u), AppId::from(a)) as u8 as f64).collect())
        .collect();
    let r = evaluate(&Table(perfect), "oracle", &tr, &te, &EvalOptions::default()).unwrap();
    assert_eq!(r.value("precision", 1), Some(1.0));
    assert_eq!(r.value("ndcg", 3), Some(1.0));

    let random: Vec<Vec<f64>> = (0..n_users).map(|_| (0..n_apps).map(|_| rng.random()).collect()).collect();
    let r = evaluate(&Table(random), "random", &tr, &te, &EvalOptions::default()).unwrap();
    // 2 held-out apps among 42 candidates.
    let chance = 2.0 / 42.0;
    let se = (chance * (1.0 - chance) / (10.0 * n_users as f64)).sqrt();
    let p10 = r.value("precision", 10).unwrap();
    assert!((p10 - chance).abs() < 4.0 * se, "{p10} vs {chance}");
}

#[test]
fn user_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let n_users = 30;
    let n_apps = 20;
    let scores: Vec<Vec<f64>> = (0..n_users).map(|_| (0..n_apps).map(|_| rng.random()).collect()).collect();
    let tests: Vec<Vec<AppId>> = (0..n_users)
        .map(|_| {
            let mut a: Vec<u32> = (0..n_apps as u32).collect();
            a.shuffle(&mut rng);
            ids(&a[..3])
        })
        .collect();
    let mut perm: Vec<usize> = (0..n_users).collect();
    perm.shuffle(&mut rng);
    let build = |order: &[usize]| {
        let users = UserIndex::from_keys(order.iter().map(|u| format!("u{u}")));
        let te =
            AdoptionDataset::new(users.clone(), n_apps, order.iter().map(|&u| tests[u].clone()).collect()).unwrap();
        let tr = AdoptionDataset::new(users, n_apps, vec![Vec::new(); n_users]).unwrap();
        let table = Table(order.iter().map(|&u| scores[u].clone()).collect());
        evaluate(&table, "t", &tr, &te, &EvalOptions::default()).unwrap()
    };
    let a = build(&(0..n_users).collect::<Vec<_>>());
    let b = build(&perm);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x.value - y.value).abs() < 1e-12);
    }
}

fn case() -> impl Strategy<Value = (Vec<u32>, Vec<u32>, usize)> {
    (1usize..=12, 1usize..=20).prop_flat_map(|(n_test, n)| {
        (
            Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(),
            proptest::sample::subsequence((0u32..30).collect::<Vec<_>>(), n_test),
            Just(n),
        )
    })
}

proptest! {
    #[test]
    fn hit_counts_agree((rec, test, n) in case()) {
        let (p, r) = precision_recall_at_n(&ids(&rec), &ids(&test), n).unwrap();
        let hits = rec[..n].iter().filter(|a| test.contains(a)).count() as f64;
        prop_assert!((p * n as f64 - hits).abs() < 1e-9);
        prop_assert!((r * test.len() as f64 - hits).abs() < 1e-9);
    }

    #[test]
    fn ap_is_bounded_and_drops_when_a_hit_moves_down((rec, test, n) in case(), k in 0usize..29) {
        let ap = ap_at_n(&ids(&rec), &ids(&test), n).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        if test.contains(&rec[k]) && !test.contains(&rec[k + 1]) {
            let mut worse = rec.clone();
            worse.swap(k, k + 1);
            prop_assert!(ap_at_n(&ids(&worse), &ids(&test), n).unwrap() <= ap + 1e-12);
        }
    }

    #[test]
    fn ndcg_is_one_exactly_for_ideal_lists((rec, test, n) in case()) {
        let nd = ndcg_at_n(&ids(&rec), &ids(&test), n).unwrap();
        let ideal = rec[..n.min(test.len())].iter().all(|a| test.contains(a));
        prop_assert_eq!((nd - 1.0).abs() < 1e-12, ideal);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
    }
}
