use fdgnn::agent::chunk_range;
use fdgnn::gcnn::{self, init_params, Activation, InitScheme, LayerSpec, ParamSet};
use fdgnn::graph::{build_shift, generate_ba, generate_er, metropolis_weights, Graph, ShiftVariant};
use fdgnn::netsim::{build_round_plan, table_round_count, Strategy};
use fdgnn::optim::{consensus_round, consensus_rounds};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, dense: bool, seed: u64) -> Graph {
    if dense {
        generate_er(n, 0.3, seed).unwrap()
    } else {
        generate_ba(n, 2, seed).unwrap()
    }
}

fn random_values(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect()
}

fn mean(values: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; values[0].len()];
    for v in values {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    m.iter().map(|x| x / values.len() as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metropolis_rows_sum_to_one_and_are_symmetric(n in 3usize..50, dense in any::<bool>(), seed in 0u64..10_000) {
        let g = random_graph(n, dense, seed);
        let w = metropolis_weights(&g).unwrap();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w.get(i, j)).sum();
            prop_assert!((row - 1.0).abs() <= 1e-12);
            for j in 0..n {
                prop_assert_eq!(w.get(i, j), w.get(j, i));
                prop_assert!(w.get(i, j) >= 0.0);
                if i != j && !g.has_edge(i, j) {
                    prop_assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn consensus_round_preserves_mean(n in 3usize..50, dense in any::<bool>(), seed in 0u64..10_000) {
        let g = random_graph(n, dense, seed);
        let w = metropolis_weights(&g).unwrap();
        let x = random_values(n, 4, seed);
        let y = consensus_round(&x, &w).unwrap();
        for (a, b) in mean(&x).iter().zip(mean(&y)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn consensus_reaches_mean(n in 3usize..=50, dense in any::<bool>(), seed in 0u64..10_000) {
        let g = random_graph(n, dense, seed);
        let w = metropolis_weights(&g).unwrap();
        let x = random_values(n, 3, seed ^ 7);
        let target = mean(&x);
        let y = consensus_rounds(&x, &w, 500).unwrap();
        for v in &y {
            for (a, b) in v.iter().zip(&target) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant(n in 3usize..12, seed in 0u64..10_000, variant_idx in 0usize..4) {
        let g = generate_ba(n, 2, seed).unwrap();
        let variant = ShiftVariant::ALL[variant_idx];
        let specs = LayerSpec::chain(&[3, 4, 2, 1], Activation::leaky());
        let params = init_params(&specs, InitScheme::GlorotUniform, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let gp = Graph::from_edges(n, g.edges().into_iter().map(|(i, j)| (perm[i], perm[j]))).unwrap();
        let mut xp = DMatrix::zeros(n, 3);
        for i in 0..n {
            xp.set_row(perm[i], &x.row(i));
        }
        let (y, _) = gcnn::forward(&params, &build_shift(&g, variant).unwrap(), &x).unwrap();
        let (yp, _) = gcnn::forward(&params, &build_shift(&gp, variant).unwrap(), &xp).unwrap();
        for i in 0..n {
            prop_assert!((y[i] - yp[perm[i]]).abs() <= 1e-12 * (1.0 + y[i].abs()));
        }
    }

    #[test]
    fn flatten_round_trips(widths in prop::collection::vec(1usize..6, 1..4), seed in 0u64..10_000) {
        let mut w = widths.clone();
        w.push(1);
        let specs = LayerSpec::chain(&w, Activation::Tanh);
        let params = init_params(&specs, InitScheme::GlorotUniform, seed).unwrap();
        let flat = params.flatten();
        prop_assert_eq!(flat.len(), gcnn::param_count(&specs));
        let back = ParamSet::unflatten(&specs, &flat).unwrap();
        prop_assert_eq!(&back, &params);
        let json = params.to_checkpoint_json().unwrap();
        prop_assert_eq!(ParamSet::from_checkpoint_json(&json).unwrap(), params);
    }

    #[test]
    fn chunks_tile_the_vector(len in 0usize..500, count in 1usize..60) {
        let mut next = 0;
        for k in 0..count {
            let r = chunk_range(len, k, count);
            prop_assert_eq!(r.start, next.min(len));
            prop_assert!(r.len() <= len.div_ceil(count));
            next = r.end;
        }
        prop_assert_eq!(next, len);
    }
}

#[test]
fn plan_lengths_match_closed_forms() {
    for l in 1..=4 {
        for b in 1..=10 {
            for k in 1..=5 {
                for s in Strategy::ALL {
                    let plan = build_round_plan(l, b, k, s).unwrap();
                    plan.validate().unwrap();
                    assert_eq!(plan.round_count(), table_round_count(s, l, b, k), "{s} L={l} B={b} K={k}");
                }
            }
        }
    }
}

#[test]
fn cost_table_examples() {
    let row = |l, b, k| -> Vec<usize> { Strategy::ALL.iter().map(|&s| table_round_count(s, l, b, k)).collect() };
    assert_eq!(row(2, 100, 1), vec![200, 400, 301, 202, 201]);
    assert_eq!(row(3, 10, 5), vec![30, 100, 55, 37, 32]);
    assert_eq!(table_round_count(Strategy::PiggybackDo, 2, 1, 1), 3);
}
