use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treechoice::dataio::{generate_synthetic, SynthSpec};
use treechoice::evaluation::{mean_test_log_prob, split, SplitSpec};
use treechoice::gradcheck::{random_model, random_taxonomy};
use treechoice::hsoftmax::HsStrategy;
use treechoice::training::{grad_hs_node, grad_user, init_params, objective, sgd_step, train, TrainConfig};
use treechoice::{AppId, Model, NodeId, UserId};

fn no_reg() -> TrainConfig {
    TrainConfig { prior_weight: 0.0, l2_user: 0.0, l2_hs: 0.0, ..TrainConfig::default() }
}

fn expected_touches(m: &Model, i: AppId) -> usize {
    let path = m.tree.choice_path(i).unwrap();
    let cats: usize =
        path.decisions().iter().map(|&z| m.tree.choice_set(m.tree.parent(z).unwrap().unwrap()).len()).sum();
    cats + m.forest.hs_path(i).unwrap().len() + 1
}

#[test]
fn touch_count_matches_fanouts_and_locality_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = TrainConfig::default();
    let mut checked = 0;
    while checked < 1000 {
        let tree = random_taxonomy(&mut rng, 3, 60).unwrap();
        let mut m = random_model(&mut rng, tree, 4, 3, 1.0, HsStrategy::Huffman, 0.5).unwrap();
        for _ in 0..50 {
            let u = UserId(rng.random_range(0..3));
            let i = AppId(rng.random_range(0..m.tree.num_apps() as u32));
            let before = m.params.clone();
            let touched = sgd_step(&mut m, u, i, 0.1, &cfg).unwrap();
            assert_eq!(touched, expected_touches(&m, i));

            // Exhaustive diff: only documented blocks may change.
            let k = m.params.dim;
            for v in 0..3u32 {
                let changed = before.user(UserId(v)) != m.params.user(UserId(v));
                assert!(!changed || UserId(v) == u);
            }
            let path = m.tree.choice_path(i).unwrap();
            let allowed: Vec<NodeId> = path
                .decisions()
                .iter()
                .flat_map(|&z| m.tree.choice_set(m.tree.parent(z).unwrap().unwrap()).to_vec())
                .collect();
            let mut changed_blocks = 1;
            for &z in m.tree.internal_nodes() {
                let s = m.tree.internal_slot(z).unwrap();
                let changed = before.node(s) != m.params.node(s) || before.node_bias[s] != m.params.node_bias[s];
                assert!(!changed || allowed.contains(&z), "node {z} changed");
                changed_blocks += changed as usize;
            }
            let hs: Vec<usize> = m.forest.hs_path(i).unwrap().steps.iter().map(|s| s.node.index()).collect();
            for n in 0..m.forest.num_nodes() {
                let changed = before.hs_vec[n * k..(n + 1) * k] != m.params.hs_vec[n * k..(n + 1) * k]
                    || before.hs_bias[n] != m.params.hs_bias[n];
                assert!(!changed || hs.contains(&n), "hs node {n} changed");
                changed_blocks += changed as usize;
            }
            assert_eq!(changed_blocks, touched);
            checked += 1;
        }
    }
}

#[test]
fn repeated_steps_raise_the_instance_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tree = random_taxonomy(&mut rng, 3, 30).unwrap();
    let mut m = random_model(&mut rng, tree, 6, 1, 1.0, HsStrategy::Balanced, 0.5).unwrap();
    let i = AppId(0);
    let mut last = m.path_prob(UserId(0), i).unwrap();
    for _ in 0..100 {
        sgd_step(&mut m, UserId(0), i, 0.01, &no_reg()).unwrap();
        let now = m.path_prob(UserId(0), i).unwrap();
        assert!(now > last);
        last = now;
    }
}

#[test]
fn gradient_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tree = random_taxonomy(&mut rng, 2, 8).unwrap();
    let mut m = random_model(&mut rng, tree, 3, 1, 1.0, HsStrategy::Balanced, 0.5).unwrap();
    m.params.hs_vec.iter_mut().for_each(|x| *x = 0.0);
    m.params.hs_bias.iter_mut().for_each(|x| *x = 0.0);
    let pu = m.params.user(UserId(0)).to_vec();
    for a in 0..m.tree.num_apps() {
        let app = AppId::from(a);
        for (step, s) in m.forest.hs_path(app).unwrap().steps.clone().iter().enumerate() {
            let (g, b) = grad_hs_node(&m, UserId(0), app, step, &no_reg()).unwrap();
            let half = if s.dir.indicator() == 1.0 { 0.5 } else { -0.5 };
            assert_eq!(b, half);
            for (x, p) in g.iter().zip(&pu) {
                assert!((x - half * p).abs() < 1e-15);
            }
        }
    }
    // Identical category vectors and zero binary-tree vectors: nothing to learn for p_u.
    let first = m.params.node(0).to_vec();
    for s in 0..m.tree.num_internal() {
        m.params.node_mut(s).copy_from_slice(&first);
    }
    for a in 0..m.tree.num_apps() {
        let g = grad_user(&m, UserId(0), AppId::from(a), &no_reg()).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12), "{g:?}");
    }
}

#[test]
fn init_is_deterministic_and_has_the_requested_spread() {
    let d = generate_synthetic(&SynthSpec {
        num_users: 10,
        fanouts: vec![3],
        apps_per_subcategory: 4,
        adoptions_per_user: 3,
        dim: 4,
        seed: 1,
        scale: 0.5,
    })
    .unwrap();
    let cfg = TrainConfig::default();
    let a = init_params(&cfg, 5000, &d.tree, &d.planted.forest).unwrap();
    let b = init_params(&cfg, 5000, &d.tree, &d.planted.forest).unwrap();
    assert_eq!(a, b);
    let n = a.user.len() as f64;
    assert!(n >= 1e5);
    let mean = a.user.iter().sum::<f64>() / n;
    let var = a.user.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = 0.1 / n.sqrt();
    let se_std = 0.1 / (2.0 * n).sqrt();
    assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var.sqrt() - 0.1).abs() < 3.0 * se_std, "std {}", var.sqrt());
    assert!(a.node_bias.iter().chain(&a.hs_bias).all(|&x| x == 0.0));

    let zero = init_params(&TrainConfig { init_std: 0.0, ..cfg }, 3, &d.tree, &d.planted.forest).unwrap();
    assert!(zero.user.iter().chain(&zero.node_vec).chain(&zero.hs_vec).all(|&x| x == 0.0));
}

fn small_synth() -> treechoice::dataio::SynthData {
    generate_synthetic(&SynthSpec {
        num_users: 200,
        fanouts: vec![3, 2],
        apps_per_subcategory: 8,
        adoptions_per_user: 12,
        dim: 6,
        seed: 3,
        scale: 0.8,
    })
    .unwrap()
}

#[test]
fn training_improves_objective_and_held_out_likelihood() {
    let d = small_synth();
    let (tr, te) = split(&d.dataset, &SplitSpec::default()).unwrap();
    let cfg = TrainConfig { dim: 6, max_iter: 20, ..TrainConfig::default() };
    let (m, report) = train(&tr, &d.tree, &cfg).unwrap();
    assert!(report.final_objective() > report.initial_objective);
    assert_eq!(report.objectives.len(), report.epochs());
    assert!((objective(&m, &tr, &cfg).unwrap() - report.final_objective()).abs() < 1e-6);

    // Zero parameters give every choice uniform odds.
    let mut zero = m.clone();
    let z = &mut zero.params;
    for v in [&mut z.user, &mut z.node_vec, &mut z.node_bias, &mut z.hs_vec, &mut z.hs_bias] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    let base = mean_test_log_prob(&zero, &te).unwrap();
    assert!(mean_test_log_prob(&m, &te).unwrap() > base);

    let (again, _) = train(&tr, &d.tree, &cfg).unwrap();
    assert_eq!(again.params, m.params);
}

fn mean_edge_length(m: &Model) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for &z in m.tree.internal_nodes() {
        if let Some(p) = m.tree.parent(z).unwrap() {
            let q = m.params.node(m.tree.internal_slot(z).unwrap());
            let qp = m.params.node(m.tree.internal_slot(p).unwrap());
            total += q.iter().zip(qp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn small_sigma_pulls_children_onto_parents() {
    let d = small_synth();
    let run = |sigma: f64| {
        let cfg = TrainConfig {
            dim: 6,
            sigma,
            lr: 1e-7,
            prior_weight: 1.0,
            max_iter: 3,
            convergence_tol: 0.0,
            ..TrainConfig::default()
        };
        mean_edge_length(&train(&d.dataset, &d.tree, &cfg).unwrap().0)
    };
    let tight = run(1e-3);
    let loose = run(10.0);
    assert!(tight < loose, "{tight} vs {loose}");
}
