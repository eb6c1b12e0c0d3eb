//! Brute-force reference implementations used by the property and acceptance
//! suites. They follow the rules literally and share no code with the kernels.
#![allow(dead_code, clippy::needless_range_loop)]

use napmat_core::vit::{AttentionMap, KeyTensor};
use napmat_core::TokenBatch;

/// Triple loop over heads, queries and tokens.
pub fn received_attention(attn: &AttentionMap) -> Vec<Vec<f64>> {
    let (n, h) = (attn.tokens(), attn.heads());
    (0..attn.batch())
        .map(|b| {
            (1..n)
                .map(|i| {
                    let mut s = 0.0;
                    for head in 0..h {
                        for q in 0..n {
                            s += attn.get(b, head, q, i);
                        }
                    }
                    s / (h * n) as f64
                })
                .collect()
        })
        .collect()
}

/// Shift-and-sum with an explicitly built kernel.
pub fn neighbor_awareness(r: &[f64], radius: usize) -> Vec<f64> {
    let r_i = radius as i64;
    let norm: f64 = (-r_i..=r_i).map(|u| 1.0 / (u.abs() as f64 + 1.0)).sum();
    let mut out = vec![0.0; r.len()];
    for d in -r_i..=r_i {
        let w = (1.0 / (d.abs() as f64 + 1.0)) / norm;
        for (i, o) in out.iter_mut().enumerate() {
            let j = i as i64 + d;
            if j >= 0 && (j as usize) < r.len() {
                *o += w * r[j as usize];
            }
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] / na) * (b[k] / nb);
    }
    s
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// The unique `r`-subset whose members all beat every non-member
/// (higher score, or equal score and lower index).
pub fn dominant_subset(scores: &[f64], r: usize) -> Vec<usize> {
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let found: Vec<Vec<usize>> = subsets(scores.len(), r)
        .into_iter()
        .filter(|s| {
            (0..scores.len())
                .filter(|i| !s.contains(i))
                .all(|out| s.iter().all(|&inn| beats(inn, out)))
        })
        .collect();
    assert_eq!(found.len(), 1, "selection rule must pick exactly one subset");
    found.into_iter().next().unwrap()
}

/// Output batch for explicit groups of absolute token indices per sample.
/// Members are averaged by size in ascending index order.
pub fn apply_groups(tokens: &TokenBatch, groups: &[Vec<Vec<usize>>]) -> TokenBatch {
    let p = tokens.protected();
    let tail = tokens.fused_tail();
    let dim = tokens.dim();
    let len = p + groups[0].len() + usize::from(tail);
    let (mut f, mut s, mut prov) = (Vec::new(), Vec::new(), Vec::new());
    for (b, sample) in groups.iter().enumerate() {
        let mut push = |idx: &[usize]| {
            if idx.len() == 1 {
                f.extend_from_slice(tokens.token(b, idx[0]));
                s.push(tokens.size(b, idx[0]));
                prov.push(tokens.provenance(b, idx[0]).to_vec());
                return;
            }
            let mut acc = vec![0.0; dim];
            let mut total = 0.0;
            let mut cells = Vec::new();
            for &i in idx {
                for c in 0..dim {
                    acc[c] += tokens.size(b, i) * tokens.token(b, i)[c];
                }
                total += tokens.size(b, i);
                cells.extend_from_slice(tokens.provenance(b, i));
            }
            for a in acc.iter_mut() {
                *a /= total;
            }
            cells.sort();
            f.extend_from_slice(&acc);
            s.push(total);
            prov.push(cells);
        };
        for i in 0..p {
            push(&[i]);
        }
        for g in sample {
            let mut g = g.clone();
            g.sort();
            push(&g);
        }
        if tail {
            push(&[tokens.len() - 1]);
        }
    }
    TokenBatch::from_parts(tokens.batch(), len, dim, p, f, s, prov, tail).unwrap()
}

/// Adjacent merging by enumeration: score every neighboring pair of raw
/// features, pick the dominant `r`-subset, join chosen pairs into connected
/// components with union-find and average each component.
pub fn mat_by_enumeration(tokens: &TokenBatch, r: usize) -> TokenBatch {
    let p = tokens.protected();
    let m = tokens.len() - p - usize::from(tokens.fused_tail());
    let groups: Vec<Vec<Vec<usize>>> = (0..tokens.batch())
        .map(|b| {
            let scores: Vec<f64> = (0..m - 1)
                .map(|j| cosine(tokens.token(b, p + j), tokens.token(b, p + j + 1)))
                .collect();
            let chosen = dominant_subset(&scores, r);
            let mut parent: Vec<usize> = (0..m).collect();
            fn find(parent: &mut Vec<usize>, x: usize) -> usize {
                if parent[x] != x {
                    let root = find(parent, parent[x]);
                    parent[x] = root;
                }
                parent[x]
            }
            for &j in &chosen {
                let (a, c) = (find(&mut parent, j), find(&mut parent, j + 1));
                let (lo, hi) = (a.min(c), a.max(c));
                parent[hi] = lo;
            }
            let mut comps: Vec<Vec<usize>> = Vec::new();
            for j in 0..m {
                let root = find(&mut parent, j);
                match comps.iter_mut().find(|c| c[0] == p + root) {
                    Some(c) => c.push(p + j),
                    None => comps.push(vec![p + j]),
                }
            }
            comps.sort_by_key(|c| c[0]);
            comps
        })
        .collect();
    apply_groups(tokens, &groups)
}

/// Bipartite matching by enumeration with sets alternating in sequence order:
/// try every A->B assignment and keep the one in which no A token could pick a
/// strictly better (or equally good, lower-indexed) partner; then merge the
/// dominant `r` edges.
pub fn bsm_by_enumeration(tokens: &TokenBatch, keys: &KeyTensor, r: usize) -> TokenBatch {
    let p = tokens.protected();
    let m = tokens.len() - p - usize::from(tokens.fused_tail());
    let groups: Vec<Vec<Vec<usize>>> = (0..tokens.batch())
        .map(|b| {
            let mean_key = |i: usize| -> Vec<f64> {
                let mut v = vec![0.0; keys.head_dim()];
                for h in 0..keys.heads() {
                    for (o, x) in v.iter_mut().zip(keys.key(b, h, i)) {
                        *o += x;
                    }
                }
                v.iter().map(|x| x / keys.heads() as f64).collect()
            };
            let set_a: Vec<usize> = (0..m).step_by(2).map(|j| p + j).collect();
            let set_b: Vec<usize> = (1..m).step_by(2).map(|j| p + j).collect();
            let sim = |a: usize, c: usize| cosine(&mean_key(a), &mean_key(c));
            let total = set_b.len().pow(set_a.len() as u32);
            let mut best: Option<Vec<usize>> = None;
            for code in 0..total {
                let mut c = code;
                let assign: Vec<usize> = set_a
                    .iter()
                    .map(|_| {
                        let pick = set_b[c % set_b.len()];
                        c /= set_b.len();
                        pick
                    })
                    .collect();
                let optimal = set_a.iter().zip(&assign).all(|(&a, &dst)| {
                    set_b.iter().all(|&o| sim(a, dst) > sim(a, o) || (sim(a, dst) == sim(a, o) && dst <= o))
                });
                if optimal {
                    assert!(best.is_none(), "unique optimal assignment");
                    best = Some(assign);
                }
            }
            let assign = best.unwrap();
            let edge: Vec<f64> = set_a.iter().zip(&assign).map(|(&a, &d)| sim(a, d)).collect();
            let chosen = dominant_subset(&edge, r);
            let sources: Vec<usize> = chosen.iter().map(|&k| set_a[k]).collect();
            (p..p + m)
                .filter(|i| !sources.contains(i))
                .map(|i| {
                    let mut g = vec![i];
                    for &k in &chosen {
                        if assign[k] == i {
                            g.push(set_a[k]);
                        }
                    }
                    g
                })
                .collect()
        })
        .collect();
    apply_groups(tokens, &groups)
}

/// Manhattan distance between positions `k` and `k + radius`, averaged, by
/// direct enumeration over a perm given as linear cells.
pub fn locality(perm: &[(usize, usize)], radius: usize) -> f64 {
    let mut total = 0usize;
    let mut count = 0usize;
    for k in 0..perm.len() - radius {
        let (a, b) = (perm[k], perm[k + radius]);
        total += a.0.abs_diff(b.0) + a.1.abs_diff(b.1);
        count += 1;
    }
    total as f64 / count as f64
}
