//! Brute-force tree edit distance: minimum cost over every valid Tai mapping.

use super::ConstTree;
use rand::Rng;

struct Flat {
    labels: Vec<String>,
    /// Preorder interval `[start, end)` of each node's subtree.
    end: Vec<usize>,
}

fn flatten(t: &ConstTree) -> Flat {
    fn go(t: &ConstTree, f: &mut Flat) {
        let i = f.labels.len();
        f.labels.push(t.label.clone());
        f.end.push(0);
        for c in &t.children {
            go(c, f);
        }
        f.end[i] = f.labels.len();
    }
    let mut f = Flat { labels: Vec::new(), end: Vec::new() };
    go(t, &mut f);
    f
}

fn ancestor(f: &Flat, a: usize, b: usize) -> bool {
    a < b && b < f.end[a]
}

fn left_of(f: &Flat, a: usize, b: usize) -> bool {
    a < b && !ancestor(f, a, b)
}

pub fn tai_distance(t1: &ConstTree, t2: &ConstTree) -> usize {
    let (a, b) = (flatten(t1), flatten(t2));
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; b.labels.len()];
    let mut best = usize::MAX;
    search(&a, &b, 0, &mut pairs, &mut used, &mut best);
    best
}

fn search(a: &Flat, b: &Flat, i: usize, pairs: &mut Vec<(usize, usize)>, used: &mut [bool], best: &mut usize) {
    if i == a.labels.len() {
        let k = pairs.len();
        let relabel = pairs.iter().filter(|&&(x, y)| a.labels[x] != b.labels[y]).count();
        *best = (*best).min(relabel + a.labels.len() - k + b.labels.len() - k);
        return;
    }
    search(a, b, i + 1, pairs, used, best);
    for j in 0..b.labels.len() {
        if used[j] {
            continue;
        }
        let ok = pairs.iter().all(|&(x, y)| {
            ancestor(a, x, i) == ancestor(b, y, j)
                && ancestor(a, i, x) == ancestor(b, j, y)
                && left_of(a, x, i) == left_of(b, y, j)
                && left_of(a, i, x) == left_of(b, j, y)
        });
        if ok {
            used[j] = true;
            pairs.push((i, j));
            search(a, b, i + 1, pairs, used, best);
            pairs.pop();
            used[j] = false;
        }
    }
}

/// Random ordered tree with at most `max_nodes` nodes over labels `a`, `b`, `c`.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize) -> ConstTree {
    let n = rng.gen_range(1..=max_nodes);
    let label = |rng: &mut dyn rand::RngCore| ["a", "b", "c"][rng.gen_range(0..3)].to_string();
    // Attach node k to a random earlier node, then build children lists in order.
    let mut parent = vec![usize::MAX; n];
    for (k, p) in parent.iter_mut().enumerate().skip(1) {
        *p = rng.gen_range(0..k);
    }
    let labels: Vec<String> = (0..n).map(|_| label(rng)).collect();
    fn build(k: usize, parent: &[usize], labels: &[String]) -> ConstTree {
        let children = (0..parent.len()).filter(|&c| parent[c] == k).map(|c| build(c, parent, labels)).collect();
        ConstTree::node(labels[k].clone(), children)
    }
    build(0, &parent, &labels)
}
