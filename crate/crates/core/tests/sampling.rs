//! Goodness-of-fit checks for the negative sampler and the synthetic generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treechoice::baselines::negative_sample;
use treechoice::dataio::{generate_synthetic, AdoptionDataset, SynthSpec};
use treechoice::{AppId, UserId, UserIndex};

/// Upper 1% point of χ² with `df` degrees of freedom (Wilson–Hilferty).
fn chi2_crit_01(df: usize) -> f64 {
    let k = df as f64;
    let z = 2.326_347_874;
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

fn chi2(counts: &[u64], expected: &[f64]) -> f64 {
    counts.iter().zip(expected).map(|(&c, &e)| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn negatives_are_uniform_over_unadopted_apps() {
    let adopted: Vec<AppId> = (0..50).step_by(5).map(AppId).collect();
    let d = AdoptionDataset::new(UserIndex::from_keys(["u"]), 50, vec![adopted.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts = vec![0u64; 50];
    let draws = 100_000;
    for _ in 0..draws / 4 {
        for a in negative_sample(&d, UserId(0), 4, &mut rng).unwrap() {
            counts[a.index()] += 1;
        }
    }
    for a in &adopted {
        assert_eq!(counts[a.index()], 0);
    }
    let kept: Vec<u64> = (0..50).filter(|a| a % 5 != 0).map(|a| counts[a]).collect();
    let expected = vec![draws as f64 / kept.len() as f64; kept.len()];
    let stat = chi2(&kept, &expected);
    assert!(stat < chi2_crit_01(kept.len() - 1), "χ² = {stat}");
}

#[test]
fn generator_samples_the_planted_distribution() {
    // With zero-scale parameters every binary decision is a coin flip, so a
    // 3-app subcategory splits 1/4, 1/4, 1/2 under the balanced tree.
    let spec = SynthSpec {
        num_users: 20_000,
        fanouts: vec![2],
        apps_per_subcategory: 3,
        adoptions_per_user: 1,
        dim: 2,
        seed: 9,
        scale: 0.0,
    };
    let d = generate_synthetic(&spec).unwrap();
    let counts = d.dataset.app_counts();
    let p = [0.125, 0.125, 0.25, 0.125, 0.125, 0.25];
    let expected: Vec<f64> = p.iter().map(|x| x * spec.num_users as f64).collect();
    let stat = chi2(&counts, &expected);
    assert!(stat < chi2_crit_01(5), "χ² = {stat}, counts {counts:?}");
}

#[test]
fn generator_follows_a_nonzero_planted_model() {
    let spec = SynthSpec {
        num_users: 4000,
        fanouts: vec![2, 2],
        apps_per_subcategory: 3,
        adoptions_per_user: 1,
        dim: 3,
        seed: 21,
        scale: 0.7,
    };
    let d = generate_synthetic(&spec).unwrap();
    // Pool users into cells of expected count: sum of each user's Pr(app).
    let mut expected = vec![0.0; d.tree.num_apps()];
    for u in 0..spec.num_users {
        for (a, lp) in d.planted.log_probs_all(UserId::from(u)).unwrap().iter().enumerate() {
            expected[a] += lp.exp();
        }
    }
    let stat = chi2(&d.dataset.app_counts(), &expected);
    assert!(stat < chi2_crit_01(expected.len() - 1), "χ² = {stat}");
}
