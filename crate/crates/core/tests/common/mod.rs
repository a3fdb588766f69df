//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;

/// Score, reversed move codes and pairs of a complete path.
type Candidate = (f64, Vec<u8>, Vec<(usize, usize)>);

/// Best monotone path by exhaustive enumeration. Among equal scores the
/// path whose moves, read from the end backwards, are lexicographically
/// smallest under diagonal < (+1,0) < (0,+1) wins.
pub fn brute_force_dtw(s: &Array2<f64>) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = s.dim();
    let mut best: Option<Candidate> = None;
    let mut path = vec![(0, 0)];
    let mut moves = Vec::new();
    walk(s, n, m, &mut path, &mut moves, &mut best);
    let (score, _, pairs) = best.expect("at least one path");
    (score, pairs)
}

fn walk(
    s: &Array2<f64>,
    n: usize,
    m: usize,
    path: &mut Vec<(usize, usize)>,
    moves: &mut Vec<u8>,
    best: &mut Option<Candidate>,
) {
    let (i, j) = *path.last().unwrap();
    if (i, j) == (n - 1, m - 1) {
        let score: f64 = path.iter().map(|&p| s[[p.0, p.1]]).sum();
        let key: Vec<u8> = moves.iter().rev().copied().collect();
        let better = match best {
            None => true,
            Some((b, k, _)) => score > *b || (score == *b && key < *k),
        };
        if better {
            *best = Some((score, key, path.clone()));
        }
        return;
    }
    for (code, (di, dj)) in [(0u8, (1, 1)), (1, (1, 0)), (2, (0, 1))] {
        let (ni, nj) = (i + di, j + dj);
        if ni < n && nj < m {
            path.push((ni, nj));
            moves.push(code);
            walk(s, n, m, path, moves, best);
            path.pop();
            moves.pop();
        }
    }
}

/// Plain (non-log) Sinkhorn scaling on `exp(C / eps)` with uniform
/// marginals, iterated to a fixed point.
pub fn scaling_oracle(c: &Array2<f64>, eps: f64) -> Array2<f64> {
    let (n, m) = c.dim();
    let k = c.mapv(|x| (x / eps).exp());
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    for _ in 0..100_000 {
        for i in 0..n {
            u[i] = a / (0..m).map(|j| k[[i, j]] * v[j]).sum::<f64>();
        }
        for j in 0..m {
            v[j] = b / (0..n).map(|i| k[[i, j]] * u[i]).sum::<f64>();
        }
        let worst = (0..n)
            .map(|i| ((0..m).map(|j| u[i] * k[[i, j]] * v[j]).sum::<f64>() - a).abs())
            .fold(0.0, f64::max);
        if worst < 1e-15 {
            break;
        }
    }
    Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j])
}

/// L-infinity distance of a plan's marginals from uniform.
pub fn marginal_violation(t: &Array2<f64>) -> f64 {
    let (n, m) = t.dim();
    let rows = t.rows().into_iter().map(|r| (r.sum() - 1.0 / n as f64).abs());
    let cols = t.columns().into_iter().map(|c| (c.sum() - 1.0 / m as f64).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Entries drawn from {0, 0.25, ..., 1} so that sums are exact and ties
/// between paths are common.
pub fn quantized(rng: &mut impl rand::Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random_range(0..=4) as f64 / 4.0)
}
