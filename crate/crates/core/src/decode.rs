//! Tree decoding from arc scores.
//!
//! `scores[i][j]` is the score of head `j` (0 = root, `1..=n` tokens) for
//! token `i + 1`. Decoding first tries the per-token argmax; if that is
//! not a single-root tree it falls back to the maximum spanning
//! arborescence with exactly one root attachment.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Heads are 1-based token indices with 0 for the root; `heads[i]` is the
/// head of token `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Check heads for range, self loops and cycles; with `single_root`, also
/// that exactly one token attaches to the root.
pub fn check_heads(heads: &[usize], single_root: bool) -> Result<()> {
    let n = heads.len();
    for (i, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(Error::invalid(format!("token {} has head {h} beyond {n}", i + 1)));
        }
        if h == i + 1 {
            return Err(Error::invalid(format!("token {} heads itself", i + 1)));
        }
    }
    if single_root {
        let roots = heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::invalid(format!("{roots} root attachments")));
        }
    }
    // Every token must reach the root.
    let mut state = vec![0u8; n + 1]; // 0 unseen, 1 on path, 2 reaches root
    state[0] = 2;
    for start in 1..=n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v - 1];
        }
        if state[v] == 1 {
            return Err(Error::invalid(format!("cycle through token {v}")));
        }
        for p in path {
            state[p] = 2;
        }
    }
    Ok(())
}

pub fn tree_score(scores: ArrayView2<f64>, heads: &[usize]) -> f64 {
    heads.iter().enumerate().map(|(i, &h)| scores[[i, h]]).sum()
}

fn greedy(scores: ArrayView2<f64>) -> Vec<usize> {
    let n = scores.nrows();
    (0..n)
        .map(|i| {
            let mut best = if i == 0 { 1 } else { 0 };
            for j in 0..=n {
                if j != i + 1 && scores[[i, j]] > scores[[i, best]] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Chu-Liu/Edmonds on a dense `w[head][dep]` matrix over `m` nodes with
/// node 0 as root. Returns `head[v]` for every node (`head[0] = 0`).
fn chu_liu_edmonds(w: &[Vec<f64>]) -> Vec<usize> {
    let m = w.len();
    let mut head = vec![0usize; m];
    for v in 1..m {
        let mut best = usize::MAX;
        for u in 0..m {
            if u != v && (best == usize::MAX || w[u][v] > w[best][v]) {
                best = u;
            }
        }
        head[v] = best;
    }
    // Find a cycle among the chosen arcs.
    let mut color = vec![0u8; m];
    color[0] = 2;
    let mut cycle: Option<Vec<usize>> = None;
    'outer: for start in 1..m {
        let mut path = Vec::new();
        let mut v = start;
        while color[v] == 0 {
            color[v] = 1;
            path.push(v);
            v = head[v];
        }
        if color[v] == 1 {
            let pos = path.iter().position(|&p| p == v).expect("on path");
            cycle = Some(path[pos..].to_vec());
            break 'outer;
        }
        for p in path {
            color[p] = 2;
        }
    }
    let Some(cycle) = cycle else { return head };

    let mut in_cycle = vec![false; m];
    for &c in &cycle {
        in_cycle[c] = true;
    }
    // New node numbering: non-cycle nodes keep their order, the cycle
    // becomes the last node.
    let mut new_id = vec![0usize; m];
    let mut old_of = Vec::new();
    for v in 0..m {
        if !in_cycle[v] {
            new_id[v] = old_of.len();
            old_of.push(v);
        }
    }
    let c = old_of.len();
    let mm = c + 1;
    let neg = f64::NEG_INFINITY;
    let mut w2 = vec![vec![neg; mm]; mm];
    // For arcs into the cycle: which cycle node they enter.
    let mut enter = vec![usize::MAX; mm];
    // For arcs out of the cycle: which cycle node they leave from.
    let mut leave = vec![usize::MAX; mm];
    for u in 0..m {
        if in_cycle[u] {
            continue;
        }
        for v in 0..m {
            if in_cycle[v] || u == v {
                continue;
            }
            w2[new_id[u]][new_id[v]] = w[u][v];
        }
        for &v in &cycle {
            let s = w[u][v] - w[head[v]][v];
            if enter[new_id[u]] == usize::MAX || s > w2[new_id[u]][c] {
                w2[new_id[u]][c] = s;
                enter[new_id[u]] = v;
            }
        }
    }
    for x in 0..m {
        if in_cycle[x] {
            continue;
        }
        for &v in &cycle {
            if leave[new_id[x]] == usize::MAX || w[v][x] > w2[c][new_id[x]] {
                w2[c][new_id[x]] = w[v][x];
                leave[new_id[x]] = v;
            }
        }
    }
    let sub = chu_liu_edmonds(&w2);
    let mut result = head.clone();
    for nv in 1..mm {
        let nh = sub[nv];
        if nv == c {
            let u = old_of[nh];
            result[enter[nh]] = u;
        } else {
            let v = old_of[nv];
            result[v] = if nh == c { leave[nv] } else { old_of[nh] };
        }
    }
    result
}

/// Best single-root tree by running the arborescence search once per
/// choice of root token.
pub fn mst_single_root(scores: ArrayView2<f64>) -> Vec<usize> {
    let n = scores.nrows();
    let neg = f64::NEG_INFINITY;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for root in 1..=n {
        let mut w = vec![vec![neg; n + 1]; n + 1];
        for d in 1..=n {
            for h in 0..=n {
                if h != d && (h != 0 || d == root) {
                    w[h][d] = scores[[d - 1, h]];
                }
            }
        }
        let heads: Vec<usize> = chu_liu_edmonds(&w)[1..].to_vec();
        let s = tree_score(scores, &heads);
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, heads));
        }
    }
    best.expect("n >= 1").1
}

/// Heads for an `n × (n+1)` score matrix; always a single-root tree.
pub fn decode_heads(scores: ArrayView2<f64>) -> Result<Vec<usize>> {
    let (n, m) = scores.dim();
    if n == 0 || m != n + 1 {
        return Err(Error::Shape(format!("arc scores of shape {n}x{m}")));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let g = greedy(scores);
    if check_heads(&g, true).is_ok() {
        return Ok(g);
    }
    Ok(mst_single_root(scores))
}

/// Decode heads, then take the best label at each chosen arc.
/// `label_scores_for(heads)` returns an `n × R` matrix.
pub fn decode_tree<F>(scores: ArrayView2<f64>, label_scores_for: F) -> Result<DependencyTree>
where
    F: FnOnce(&[usize]) -> Result<ndarray::Array2<f64>>,
{
    let heads = decode_heads(scores)?;
    let ls = label_scores_for(&heads)?;
    let labels = ls
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (r, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = r;
                }
            }
            best
        })
        .collect();
    Ok(DependencyTree { heads, labels })
}
