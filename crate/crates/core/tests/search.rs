mod common;

use common::{toy_domain, toy_supernet};
use nfts_core::episodes::{Episode, EpisodeShape, Range, Split};
use nfts_core::rng;
use nfts_core::search::*;
use nfts_core::{LayerDecision, PathEncoding};
use proptest::prelude::*;

fn episodes(n: usize, noise: f64, seed: u64) -> Vec<Episode<f64>> {
    let d = toy_domain("toy", noise, seed);
    let shape = EpisodeShape {
        ways: Range::new(3, 5),
        shots: Range::new(1, 3),
        n_query: 5,
    };
    let mut r = rng::stream(seed, &["episodes".into()]);
    (0..n).map(|_| shape.sample(&d, Split::Train, &mut r).unwrap()).collect()
}

fn ft(epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        eta1: 0.1,
        eta2: 0.05,
    }
}

fn small_search(seed: u64) -> SearchConfig {
    SearchConfig {
        population_size: 8,
        top_m: 3,
        generations: 5,
        finetune_epochs: 3,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_the_supernet_clone() {
    let net = toy_supernet(1);
    let ep = &episodes(1, 0.3, 1)[0];
    let p = PathEncoding::all_ones(3);
    let tuned = finetune_on_support(&net, &p, &ep.support_x, &ep.support_y, &ft(0)).unwrap();
    assert_eq!(tuned, net.clone_path_params(&p).unwrap());
}

#[test]
fn fine_tuning_lowers_support_loss() {
    let net = toy_supernet(2);
    let ep = &episodes(1, 0.5, 2)[0];
    for p in [PathEncoding::all_ones(3), PathEncoding::uniform(3, LayerDecision::ADAPTER)] {
        let before = net.clone_path_params(&p).unwrap();
        let after = finetune_on_support(&net, &p, &ep.support_x, &ep.support_y, &ft(20)).unwrap();
        let l0 = support_loss(&net, &p, &before, &ep.support_x, &ep.support_y).unwrap();
        let l1 = support_loss(&net, &p, &after, &ep.support_x, &ep.support_y).unwrap();
        assert!(l1 < l0, "{p}: {l0} -> {l1}");
    }
}

#[test]
fn fine_tuning_leaves_the_supernet_alone() {
    let net = toy_supernet(3);
    let snapshot = net.clone();
    let ep = &episodes(1, 0.5, 3)[0];
    finetune_on_support(&net, &PathEncoding::all_ones(3), &ep.support_x, &ep.support_y, &ft(5)).unwrap();
    assert_eq!(net, snapshot);
}

#[test]
fn frozen_path_has_nothing_to_tune() {
    let net = toy_supernet(4);
    let ep = &episodes(1, 0.5, 4)[0];
    let tuned = finetune_on_support(&net, &PathEncoding::all_zero(3), &ep.support_x, &ep.support_y, &ft(10)).unwrap();
    assert!(tuned.is_empty());
}

#[test]
fn separable_episodes_score_perfect_fitness() {
    let net = toy_supernet(5);
    let eps = episodes(4, 0.0, 5);
    for p in [PathEncoding::all_zero(3), PathEncoding::all_ones(3)] {
        assert_eq!(evaluate_fitness(&net, &p, &eps, &ft(3)).unwrap(), 1.0);
    }
}

#[test]
fn fitness_needs_episodes() {
    let net = toy_supernet(5);
    assert!(evaluate_fitness(&net, &PathEncoding::all_zero(3), &[], &ft(1)).is_err());
}

#[test]
fn selection_breaks_ties_by_shortlist_order() {
    let net = toy_supernet(6);
    let ep = &episodes(1, 0.5, 6)[0];
    let p = PathEncoding::uniform(3, LayerDecision::ADAPTER);
    let list = vec![p.clone(), p.clone(), p];
    let s = test_time_select(&net, &list, &ep.support_x, &ep.support_y, &ft(5)).unwrap();
    assert_eq!(s.index, 0);
    assert!(s.losses.iter().all(|&l| l == s.losses[0]));
}

#[test]
fn selection_prefers_the_adaptable_path() {
    let net = toy_supernet(7);
    let ep = &episodes(1, 0.8, 7)[0];
    let list = vec![PathEncoding::all_zero(3), PathEncoding::all_ones(3)];
    let s = test_time_select(&net, &list, &ep.support_x, &ep.support_y, &ft(30)).unwrap();
    assert_eq!(s.index, 1, "losses {:?}", s.losses);
    assert!(test_time_select(&net, &[], &ep.support_x, &ep.support_y, &ft(1)).is_err());
}

#[test]
fn search_config_validation() {
    let base = small_search(0);
    assert!(base.validate().is_ok());
    for bad in [
        SearchConfig { population_size: 1, top_m: 1, ..base.clone() },
        SearchConfig { top_m: 0, ..base.clone() },
        SearchConfig { top_m: 8, ..base.clone() },
        SearchConfig { mutation_rate: 1.5, ..base.clone() },
        SearchConfig { diversity_t: -0.1, ..base.clone() },
        SearchConfig { shortlist_n: 0, ..base.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn recombination_of_identical_parents() {
    let mut r = rng::stream(0, &["recombine".into()]);
    let p = PathEncoding::parse("101100").unwrap();
    assert_eq!(recombine(&p, &p, 0.0, &mut r), p);
    let flipped = recombine(&p, &p, 1.0, &mut r);
    assert!(flipped.bits().iter().zip(p.bits()).all(|(a, b)| a != b));
}

#[test]
fn children_inherit_parent_bits_without_mutation() {
    let mut r = rng::stream(1, &["recombine".into()]);
    let a = PathEncoding::parse("110000").unwrap();
    let b = PathEncoding::parse("000011").unwrap();
    for _ in 0..50 {
        let c = recombine(&a, &b, 0.0, &mut r);
        for i in 0..6 {
            assert!(c.bits()[i] == a.bits()[i] || c.bits()[i] == b.bits()[i]);
        }
    }
}

#[test]
fn fixed_episode_search_is_elitist() {
    let net = toy_supernet(8);
    let source = FixedEpisodes(episodes(3, 1.0, 8));
    for seed in 0..3 {
        let cfg = SearchConfig {
            convergence_window: 0,
            ..small_search(seed)
        };
        let h = evolve_with(&net, &source, &cfg).unwrap();
        assert_eq!(h.generations().len(), cfg.generations);
        for w in h.generations().windows(2) {
            assert!(w[1].best >= w[0].best, "seed {seed}: {} then {}", w[0].best, w[1].best);
        }
        for g in h.generations() {
            assert_eq!(g.population.len(), cfg.population_size);
        }
    }
}

#[test]
fn search_is_deterministic() {
    let net = toy_supernet(9);
    let d = [toy_domain("a", 0.6, 1), toy_domain("b", 0.9, 2)];
    let cfg = SearchConfig {
        shape: EpisodeShape {
            ways: Range::new(3, 5),
            shots: Range::new(1, 2),
            n_query: 4,
        },
        ..small_search(4)
    };
    let h1 = evolve(&net, &d, &cfg).unwrap();
    let h2 = evolve(&net, &d, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(h1.evaluations().len(), cfg.population_size * h1.generations().len());
}

#[test]
fn flat_fitness_converges_early() {
    let net = toy_supernet(10);
    // noiseless episodes: every path scores 1
    let source = FixedEpisodes(episodes(2, 0.0, 10));
    let cfg = SearchConfig {
        generations: 20,
        ..small_search(1)
    };
    let h = evolve_with(&net, &source, &cfg).unwrap();
    assert_eq!(h.generations().len(), 1 + cfg.convergence_window);
}

#[test]
fn history_keeps_the_best_fitness_per_path() {
    let p = PathEncoding::parse("1100").unwrap();
    let mut h = SearchHistory::new();
    for (g, f) in [(0, 0.4), (1, 0.9), (2, 0.6)] {
        h.push(FitnessRecord {
            path: p.clone(),
            fitness: f,
            generation: g,
        });
    }
    assert_eq!(h.len(), 1);
    assert_eq!(h.evaluations().len(), 3);
    assert_eq!(h.records()[0].fitness, 0.9);
    assert_eq!(h.records()[0].generation, 1);
}

#[test]
fn shortlist_degenerate_threshold_and_underfill() {
    let mut h = SearchHistory::new();
    for (bits, f) in [("1100", 0.9), ("1101", 0.8), ("0011", 0.7)] {
        h.push(FitnessRecord {
            path: PathEncoding::parse(bits).unwrap(),
            fitness: f,
            generation: 0,
        });
    }
    let top = select_shortlist(&h, 2, 0.0).unwrap();
    assert_eq!(top.paths(), vec![PathEncoding::parse("1100").unwrap(), PathEncoding::parse("1101").unwrap()]);
    assert!(!top.underfilled);
    // 1100 vs 1101 are too close at 0.4; 0011 is orthogonal to 1100
    let diverse = select_shortlist(&h, 3, 0.4).unwrap();
    assert_eq!(diverse.len(), 2);
    assert!(diverse.underfilled);
    assert!(select_shortlist(&SearchHistory::new(), 3, 0.4).is_err());
}

#[test]
fn shortlist_text_round_trip() {
    let list = Shortlist {
        entries: vec![
            ShortlistEntry {
                path: PathEncoding::parse("101010").unwrap(),
                fitness: 0.1 + 0.2,
            },
            ShortlistEntry {
                path: PathEncoding::parse("000111").unwrap(),
                fitness: 0.25,
            },
        ],
        underfilled: false,
    };
    assert_eq!(Shortlist::parse(&format!("# comment\n{}", list.to_text())).unwrap(), list);
    assert!(Shortlist::parse("# only comments\n").is_err());
    assert!(Shortlist::parse("1010\n").is_err());
}

fn arb_history() -> impl Strategy<Value = SearchHistory> {
    proptest::collection::vec((0u32..64, 0u32..20, 0usize..4), 1..60).prop_map(|rows| {
        let mut h = SearchHistory::new();
        for (code, f, g) in rows {
            let bits = (0..6).map(|i| code >> i & 1 == 1).collect();
            h.push(FitnessRecord {
                path: PathEncoding::from_bits(bits).unwrap(),
                fitness: f as f64 / 20.0,
                generation: g,
            });
        }
        h
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn shortlist_is_diverse_and_greedy(h in arb_history(), n in 1usize..6, t_step in 0usize..=10) {
        let t = t_step as f64 / 10.0;
        let list = select_shortlist(&h, n, t).unwrap();
        let chosen = list.paths();
        prop_assert!(chosen.len() <= n);
        prop_assert_eq!(list.underfilled, chosen.len() < n);
        for i in 0..chosen.len() {
            for j in 0..i {
                prop_assert!(chosen[i].cosine_distance(&chosen[j]) >= t);
            }
        }
        // the best path always makes the list
        let records = h.records();
        prop_assert_eq!(&chosen[0], &records[0].path);
        // every skipped path that ranks above the last pick clashes with a
        // pick ranked above it
        let last = records.iter().position(|r| &r.path == chosen.last().unwrap()).unwrap();
        for (rank, r) in records.iter().enumerate().take(last) {
            if chosen.contains(&r.path) {
                continue;
            }
            let clash = records[..rank]
                .iter()
                .any(|q| chosen.contains(&q.path) && q.path.cosine_distance(&r.path) < t);
            prop_assert!(clash, "path {} was skipped without a conflict", r.path);
        }
        // fitness never increases down the list
        for w in list.entries.windows(2) {
            prop_assert!(w[0].fitness >= w[1].fitness);
        }
    }
}

fn toy_shape() -> EpisodeShape {
    EpisodeShape {
        ways: Range::new(3, 4),
        shots: Range::new(1, 2),
        n_query: 3,
    }
}

#[test]
fn zero_training_episodes_leave_the_net_untouched() {
    let mut net = toy_supernet(12);
    let before = net.to_bytes(0);
    let cfg = TrainConfig {
        episodes_total: 0,
        eta1: 0.1,
        eta2: 0.1,
        shape: toy_shape(),
        seed: 0,
    };
    assert!(supernet_train(&mut net, &[toy_domain("a", 0.5, 1)], &cfg).unwrap().is_empty());
    assert_eq!(net.to_bytes(0), before);
}

#[test]
fn training_rejects_bad_step_sizes() {
    let mut net = toy_supernet(12);
    let cfg = TrainConfig {
        episodes_total: 1,
        eta1: 0.0,
        eta2: 0.1,
        shape: toy_shape(),
        seed: 0,
    };
    assert!(supernet_train(&mut net, &[toy_domain("a", 0.5, 1)], &cfg).is_err());
}

#[test]
fn training_step_follows_the_finite_difference_gradient() {
    use common::{path_loss, Split as Rows};
    use nfts_core::grad::ParamLookup;
    use nfts_core::Tensor;
    use rand::Rng;

    let domains = [toy_domain("a", 0.5, 1)];
    let (eta1, eta2) = (0.1, 0.05);
    let mut checked = 0;
    for seed in 0..6u64 {
        let net0 = toy_supernet(13);
        let mut net = net0.clone();
        let cfg = TrainConfig {
            episodes_total: 1,
            eta1,
            eta2,
            shape: toy_shape(),
            seed,
        };
        let steps = supernet_train(&mut net, &domains, &cfg).unwrap();
        let p = &steps[0].path;
        if p.is_all_zero() {
            assert_eq!(net, net0);
            continue;
        }
        // replay the documented stream: domain, episode, path
        let mut r = rng::stream(seed, &["supernet-train".into(), 0usize.into()]);
        let _ = r.random_range(0..domains.len());
        let ep = toy_shape().sample(&domains[0], Split::Train, &mut r).unwrap();
        let x = Tensor::concat_rows(&[&ep.support_x, &ep.query_x]).unwrap();
        let rows = Rows::new(ep.support_y.clone(), ep.query_y.clone());

        let before = net0.clone_path_params(p).unwrap();
        let mut after = net.clone_path_params(p).unwrap();
        let ids: Vec<_> = before.adapters.iter().chain(before.finetuned.iter()).map(|b| b.id).collect();
        let adapter_ids: Vec<_> = before.adapters.iter().map(|b| b.id).collect();
        for id in ids {
            let eta = if adapter_ids.contains(&id) { eta1 } else { eta2 };
            let b0 = before.adapters.get(id).or_else(|| before.finetuned.get(id)).unwrap();
            for c in 0..b0.value.len() {
                let eps = 1e-6;
                let mut probe = before.clone();
                probe.block_mut(id).unwrap().value.data_mut()[c] += eps;
                let up = path_loss(&net0, p, &probe, &x, &rows);
                probe.block_mut(id).unwrap().value.data_mut()[c] -= 2.0 * eps;
                let down = path_loss(&net0, p, &probe, &x, &rows);
                let expected = -eta * (up - down) / (2.0 * eps);
                let actual = after.block_mut(id).unwrap().value.data()[c] - b0.value.data()[c];
                let rel = (actual - expected).abs() / actual.abs().max(expected.abs()).max(1e-3 * eta);
                assert!(rel < 1e-4, "seed {seed} path {p} {id:?}[{c}]: {actual} vs {expected}");
                checked += 1;
            }
        }
        // φ is never written
        assert!(net.phi_blocks().eq(net0.phi_blocks()));
    }
    assert!(checked > 0);
}

#[test]
fn meta_test_leaves_checkpoint_bytes_alone() {
    let net = toy_supernet(14);
    let before = net.to_bytes(7);
    let ep = &episodes(1, 0.5, 14)[0];
    let list = vec![PathEncoding::all_ones(3), PathEncoding::parse("100100").unwrap()];
    test_time_select(&net, &list, &ep.support_x, &ep.support_y, &ft(5)).unwrap();
    evaluate_episode(&net, &list[1], ep, &ft(5)).unwrap();
    assert_eq!(net.to_bytes(7), before);
}

#[test]
fn fitness_is_the_mean_episode_accuracy() {
    let net = toy_supernet(15);
    let eps = episodes(2, 1.5, 15);
    let p = PathEncoding::parse("110010").unwrap();
    let a = evaluate_episode(&net, &p, &eps[0], &ft(4)).unwrap().accuracy;
    let b = evaluate_episode(&net, &p, &eps[1], &ft(4)).unwrap().accuracy;
    assert_eq!(evaluate_fitness(&net, &p, &eps, &ft(4)).unwrap(), (a + b) / 2.0);
}

/// Greedy diversity filter written against raw bit vectors.
fn greedy_oracle(rows: &[(&str, f64)], n: usize, t: f64) -> Vec<String> {
    let cos = |a: &str, b: &str| {
        let x: Vec<f64> = a.chars().map(|c| if c == '1' { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = b.chars().map(|c| if c == '1' { 1.0 } else { 0.0 }).collect();
        let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            1.0
        } else {
            1.0 - dot / (nx * ny)
        }
    };
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut picked: Vec<String> = Vec::new();
    for (bits, _) in sorted {
        if picked.len() < n && picked.iter().all(|q| cos(q, bits) >= t - 1e-12) {
            picked.push(bits.to_string());
        }
    }
    picked
}

#[test]
fn crafted_history_matches_greedy_oracle() {
    // distances from 111100: 111000 → 0.134, 110011 → 0.5, 000011 → 1, 111110 → 0.087;
    // 000011 is only 0.293 from 110011, so it misses the T=0.4 cut
    let rows = [
        ("111100", 0.90),
        ("111000", 0.88),
        ("111110", 0.85),
        ("110011", 0.80),
        ("000011", 0.70),
    ];
    let mut h = SearchHistory::new();
    for (g, (bits, f)) in rows.iter().enumerate() {
        h.push(FitnessRecord {
            path: PathEncoding::parse(bits).unwrap(),
            fitness: *f,
            generation: g,
        });
    }
    for (n, t) in [(1, 0.4), (3, 0.4), (5, 0.0), (5, 0.1), (4, 0.6), (2, 1.0)] {
        let got: Vec<String> = select_shortlist(&h, n, t).unwrap().paths().iter().map(|p| p.to_bit_string()).collect();
        assert_eq!(got, greedy_oracle(&rows, n, t), "n={n} t={t}");
    }
    let three: Vec<String> = select_shortlist(&h, 3, 0.4).unwrap().paths().iter().map(|p| p.to_bit_string()).collect();
    assert_eq!(three, ["111100", "110011"]);
}
