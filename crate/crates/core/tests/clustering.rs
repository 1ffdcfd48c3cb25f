use curate_core::clustering::{
    graph_densities, graph_density_select, kcenter_from, kcenter_greedy, kmeans, sq_dist, GraphDensityParams,
    KMeansParams,
};
use curate_core::embedding::EmbeddingMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
    let dim = rows[0].len();
    EmbeddingMatrix::from_points(dim, (0..rows.len() as u64).collect(), rows).unwrap()
}

fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn blobs(per: usize, centres: &[[f64; 2]], spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in centres {
        for _ in 0..per {
            out.push(vec![
                c[0] + rng.random_range(-spread..spread),
                c[1] + rng.random_range(-spread..spread),
            ]);
        }
    }
    out
}

fn sse(rows: &[Vec<f64>], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for &i in members {
        for d in 0..dim {
            mean[d] += rows[i][d] / members.len() as f64;
        }
    }
    members.iter().map(|&i| sq_dist(&rows[i], &mean)).sum()
}

#[test]
fn two_blobs_match_the_exhaustive_optimum() {
    let rows = blobs(6, &[[0.0, 0.0], [5.0, 5.0]], 0.8, 3);
    let n = rows.len();
    let mut best = (f64::INFINITY, 0u32);
    // Point 0 is fixed in side A, so each bipartition is visited once.
    for mask in 1u32..(1 << (n - 1)) {
        let a: Vec<usize> = std::iter::once(0).chain((1..n).filter(|i| mask & (1 << (i - 1)) == 0)).collect();
        let b: Vec<usize> = (1..n).filter(|i| mask & (1 << (i - 1)) != 0).collect();
        let cost = sse(&rows, &a) + sse(&rows, &b);
        if cost < best.0 {
            best = (cost, mask);
        }
    }
    let model = kmeans(&points(rows.clone()), &KMeansParams::new(2)).unwrap();
    assert!((model.inertia - best.0).abs() <= 1e-9 * best.0);
    let planted: Vec<bool> = (0..n).map(|i| i >= 6).collect();
    let got: Vec<bool> = model.assignment.iter().map(|&c| c != model.assignment[0]).collect();
    assert_eq!(got, planted);
}

#[test]
fn inertia_matches_recomputation() {
    let rows = random_points(300, 5, 11);
    let emb = points(rows);
    let model = kmeans(&emb, &KMeansParams::new(7)).unwrap();
    let again = model.recompute_inertia(&emb);
    assert!((model.inertia - again).abs() <= 1e-6 * again);
    assert!(model.sizes().iter().all(|s| *s > 0));
}

#[test]
fn deterministic_across_thread_pools_and_serial_path() {
    let emb = points(random_points(9000, 6, 5));
    let mut params = KMeansParams::new(12);
    params.seed = 9;
    params.parallel = false;
    let reference = kmeans(&emb, &params).unwrap();
    params.parallel = true;
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let model = pool.install(|| kmeans(&emb, &params)).unwrap();
        assert_eq!(model, reference, "{threads} threads");
    }
}

#[test]
fn seed_changes_initialization_only_through_the_seed() {
    let emb = points(random_points(200, 3, 1));
    let mut p = KMeansParams::new(5);
    let a = kmeans(&emb, &p).unwrap();
    assert_eq!(a, kmeans(&emb, &p).unwrap());
    p.seed = 1;
    let b = kmeans(&emb, &p).unwrap();
    assert_eq!(b, kmeans(&emb, &p).unwrap());
}

fn covering_radius(rows: &[Vec<f64>], centres: &[usize]) -> f64 {
    rows.iter()
        .map(|r| centres.iter().map(|&c| sq_dist(r, &rows[c])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
        .sqrt()
}

#[test]
fn kcenter_greedy_against_all_three_subsets() {
    for seed in 0..20 {
        let rows = random_points(8, 2, 100 + seed);
        let emb = points(rows.clone());
        let first = (seed % 8) as usize;
        let picks: Vec<usize> = kcenter_from(&emb, 3, first).unwrap().iter().map(|&id| id as usize).collect();
        assert_eq!(picks[0], first);

        // Each pick is the farthest remaining point from the picks before it.
        for step in 1..3 {
            let gap = |i: usize| picks[..step].iter().map(|&c| sq_dist(&rows[i], &rows[c])).fold(f64::INFINITY, f64::min);
            let best = (0..8).filter(|i| !picks[..step].contains(i)).map(gap).fold(0.0, f64::max);
            assert_eq!(gap(picks[step]), best);
        }

        // Farthest-first covers within twice the optimal 3-center radius.
        let mut opt = f64::INFINITY;
        for a in 0..8 {
            for b in a + 1..8 {
                for c in b + 1..8 {
                    opt = opt.min(covering_radius(&rows, &[a, b, c]));
                }
            }
        }
        assert!(covering_radius(&rows, &picks) <= 2.0 * opt + 1e-12);
    }
}

#[test]
fn kcenter_is_not_max_min_optimal() {
    // p, a, b form an equilateral triangle; q sits just beyond the a-b arc and is picked second.
    let deg = std::f64::consts::PI / 180.0;
    let rows = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![(60.0 * deg).cos(), (60.0 * deg).sin()],
        vec![1.01 * (30.0 * deg).cos(), 1.01 * (30.0 * deg).sin()],
    ];
    let picks = kcenter_from(&points(rows.clone()), 3, 0).unwrap();
    assert_eq!(picks[1], 3);
    let min_pair = |s: &[usize]| {
        let mut m = f64::INFINITY;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                m = m.min(sq_dist(&rows[s[i]], &rows[s[j]]).sqrt());
            }
        }
        m
    };
    let greedy: Vec<usize> = picks.iter().map(|&i| i as usize).collect();
    assert!(min_pair(&greedy) < min_pair(&[0, 1, 2]));
}

#[test]
fn kcenter_seed_is_reproducible() {
    let emb = points(random_points(50, 4, 2));
    assert_eq!(kcenter_greedy(&emb, 10, 3).unwrap(), kcenter_greedy(&emb, 10, 3).unwrap());
}

/// Pairwise reference: kNN by full sort, mutual edges, Gaussian weights, damped greedy.
fn graph_density_oracle(rows: &[Vec<f64>], knn: usize, gamma: f64, count: usize) -> (Vec<f64>, Vec<usize>) {
    let n = rows.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| sq_dist(&rows[i], &rows[a]).total_cmp(&sq_dist(&rows[i], &rows[b])).then(a.cmp(&b)));
            others.truncate(knn);
            others
        })
        .collect();
    let w = |i: usize, j: usize| -> f64 {
        if neighbours[i].contains(&j) && neighbours[j].contains(&i) {
            (-gamma * sq_dist(&rows[i], &rows[j])).exp()
        } else {
            0.0
        }
    };
    let initial: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| w(i, j)).sum()).collect();
    let mut density = initial.clone();
    let mut picks = Vec::new();
    for _ in 0..count {
        let mut best = usize::MAX;
        for i in 0..n {
            if picks.contains(&i) {
                continue;
            }
            if best == usize::MAX || density[i] > density[best] {
                best = i;
            }
        }
        picks.push(best);
        for j in 0..n {
            if j != best && w(best, j) > 0.0 {
                density[j] *= 1.0 - w(best, j);
            }
        }
    }
    (initial, picks)
}

#[test]
fn graph_density_matches_pairwise_oracle() {
    for seed in 0..10u64 {
        let rows = random_points(40, 3, 500 + seed);
        let emb = points(rows.clone());
        let params = GraphDensityParams { knn: 1 + (seed as usize % 7), gamma: 0.5 + seed as f64 };
        let (initial, picks) = graph_density_oracle(&rows, params.knn, params.gamma, 15);
        let got = graph_densities(&emb, &params).unwrap();
        for (a, b) in got.iter().zip(&initial) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let sel: Vec<usize> = graph_density_select(&emb, 15, &params).unwrap().iter().map(|&i| i as usize).collect();
        assert_eq!(sel, picks);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inertia_never_increases(seed in 0u64..10_000, n in 10usize..200, k in 1usize..10, dim in 1usize..6) {
        let k = k.min(n);
        let emb = points(random_points(n, dim, seed));
        let mut p = KMeansParams::new(k);
        p.seed = seed;
        let model = kmeans(&emb, &p).unwrap();
        for w in model.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
        prop_assert_eq!(model.assignment.len(), n);
        prop_assert!(model.assignment.iter().all(|&c| c < k));
        prop_assert!(model.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn kcenter_picks_are_distinct(seed in 0u64..1000, n in 2usize..60, count in 1usize..60) {
        let count = count.min(n);
        let emb = points(random_points(n, 2, seed));
        let picks = kcenter_greedy(&emb, count, seed).unwrap();
        let uniq: std::collections::HashSet<u64> = picks.iter().copied().collect();
        prop_assert_eq!(uniq.len(), count);
    }
}
