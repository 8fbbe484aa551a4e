//! Tolerance-limited boundary correspondence.
//!
//! Predicted and ground-truth boundary pixels are matched one-to-one. Only
//! pairs within the distance tolerance are candidates; among all maximum
//! matchings the one with the smallest total distance is chosen. The solver is
//! the primal-dual successive-shortest-path method: a multi-source Dijkstra
//! on reduced costs sets potentials, then a maximal set of vertex-disjoint
//! zero-reduced-cost augmenting paths is applied. Costs are integers
//! (micro-pixels) so tight edges are detected exactly.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

const UNMATCHED: usize = usize::MAX;
const COST_SCALE: f64 = 1e6;

/// Bipartite candidate graph: `adj[l]` lists `(r, cost)`.
struct Graph {
    right: usize,
    adj: Vec<Vec<(usize, i64)>>,
}

/// Pairing found by [`min_cost_max_matching`]: `left[l]` is the right partner
/// of `l` or `None`, and likewise for `right`.
pub struct Matching {
    pub left: Vec<Option<usize>>,
    pub right: Vec<Option<usize>>,
    pub cost: i64,
}

fn solve(g: &Graph) -> Matching {
    let nl = g.adj.len();
    let nr = g.right;
    let mut mate_l = vec![UNMATCHED; nl];
    let mut mate_r = vec![UNMATCHED; nr];
    // potentials: left in 0..nl, right in nl..nl+nr
    let mut pot = vec![0i64; nl + nr];
    let cost_of = |l: usize, r: usize| g.adj[l].iter().find(|&&(rr, _)| rr == r).map(|&(_, c)| c);

    loop {
        // Dijkstra from every free left vertex over the residual graph
        let inf = i64::MAX;
        let mut dist = vec![inf; nl + nr];
        let mut parent = vec![UNMATCHED; nl + nr];
        let mut nearest = UNMATCHED;
        let mut heap = BinaryHeap::new();
        for l in 0..nl {
            if mate_l[l] == UNMATCHED && !g.adj[l].is_empty() {
                dist[l] = 0;
                heap.push(Reverse((0i64, l)));
            }
        }
        let mut target = inf;
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] || d > target {
                continue;
            }
            if u < nl {
                for &(r, c) in &g.adj[u] {
                    if mate_l[u] == r {
                        continue;
                    }
                    let v = nl + r;
                    let nd = d + c + pot[u] - pot[v];
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                        heap.push(Reverse((nd, v)));
                    }
                }
            } else {
                let r = u - nl;
                if mate_r[r] == UNMATCHED {
                    if d < target {
                        target = d;
                        nearest = r;
                    }
                    continue;
                }
                let l = mate_r[r];
                let c = cost_of(l, r).expect("matched pair is a candidate");
                let nd = d - c + pot[u] - pot[l];
                if nd < dist[l] {
                    dist[l] = nd;
                    parent[l] = u;
                    heap.push(Reverse((nd, l)));
                }
            }
        }
        if target == inf {
            break;
        }
        for (p, &d) in pot.iter_mut().zip(&dist) {
            *p += d.min(target);
        }

        // augment along vertex-disjoint tight paths
        let mut augmented = 0;
        let mut dead = vec![false; nl + nr];
        for start in 0..nl {
            if mate_l[start] != UNMATCHED || dist[start] != 0 || g.adj[start].is_empty() {
                continue;
            }
            // iterative DFS: stack of (left vertex, next edge index)
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            let mut path: Vec<usize> = Vec::new();
            dead[start] = true;
            let mut found = false;
            while let Some(&mut (l, ref mut next)) = stack.last_mut() {
                let mut advanced = false;
                while *next < g.adj[l].len() {
                    let (r, c) = g.adj[l][*next];
                    *next += 1;
                    let v = nl + r;
                    if dead[v] || mate_l[l] == r || c + pot[l] - pot[v] != 0 {
                        continue;
                    }
                    dead[v] = true;
                    if mate_r[r] == UNMATCHED {
                        path.push(r);
                        found = true;
                        break;
                    }
                    let l2 = mate_r[r];
                    let back = cost_of(l2, r).expect("matched pair is a candidate");
                    if dead[l2] || -back + pot[v] - pot[l2] != 0 {
                        continue;
                    }
                    dead[l2] = true;
                    path.push(r);
                    stack.push((l2, 0));
                    advanced = true;
                    break;
                }
                if found {
                    break;
                }
                if !advanced {
                    stack.pop();
                    path.pop();
                }
            }
            if found {
                augmented += 1;
                // path[i] is the right vertex reached from stack[i].0
                for (i, &(l, _)) in stack.iter().enumerate() {
                    let r = path[i];
                    mate_l[l] = r;
                    mate_r[r] = l;
                }
            }
        }
        if augmented == 0 {
            // zero-cost cycles can starve the search; the shortest-path tree
            // always holds one augmenting path
            let mut r = nearest;
            loop {
                let l = parent[nl + r];
                let prev = mate_l[l];
                mate_l[l] = r;
                mate_r[r] = l;
                if prev == UNMATCHED {
                    break;
                }
                r = prev;
            }
        }
    }

    let cost = (0..nl)
        .filter(|&l| mate_l[l] != UNMATCHED)
        .map(|l| cost_of(l, mate_l[l]).expect("matched pair is a candidate"))
        .sum();
    Matching {
        left: mate_l.iter().map(|&r| (r != UNMATCHED).then_some(r)).collect(),
        right: mate_r.iter().map(|&l| (l != UNMATCHED).then_some(l)).collect(),
        cost,
    }
}

/// Maximum-cardinality matching of minimum total cost. `edges[l]` lists
/// `(r, cost)` with `r < right` and nonnegative costs.
pub fn min_cost_max_matching(right: usize, edges: Vec<Vec<(usize, i64)>>) -> Matching {
    assert!(
        edges.iter().flatten().all(|&(r, c)| r < right && c >= 0),
        "candidate edges must point at valid right vertices with nonnegative cost"
    );
    solve(&Graph { right, adj: edges })
}

fn pixels(map: &[bool], w: usize) -> Vec<(usize, usize)> {
    map.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| (i / w, i % w)).collect()
}

/// Matches boundary pixels of `pred` and `gt` (both row-major `h x w`) that
/// lie within `max_dist` pixels. Returns per-pixel flags: which predicted
/// pixels and which ground-truth pixels are matched.
pub fn correspond(pred: &[bool], gt: &[bool], h: usize, w: usize, max_dist: f64) -> (Vec<bool>, Vec<bool>) {
    assert!(pred.len() == h * w && gt.len() == h * w, "maps must be {h}x{w}");
    let p = pixels(pred, w);
    let g = pixels(gt, w);
    let mut gt_index = vec![UNMATCHED; h * w];
    for (k, &(y, x)) in g.iter().enumerate() {
        gt_index[y * w + x] = k;
    }
    let reach = max_dist.floor() as isize;
    let edges: Vec<Vec<(usize, i64)>> = p
        .iter()
        .map(|&(y, x)| {
            let mut out = Vec::new();
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d = ((dy * dy + dx * dx) as f64).sqrt();
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if d > max_dist || ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let k = gt_index[ny as usize * w + nx as usize];
                    if k != UNMATCHED {
                        out.push((k, (d * COST_SCALE).round() as i64));
                    }
                }
            }
            out
        })
        .collect();
    let m = min_cost_max_matching(g.len(), edges);
    let mut pred_hit = vec![false; h * w];
    let mut gt_hit = vec![false; h * w];
    for (k, partner) in m.left.iter().enumerate() {
        if partner.is_some() {
            let (y, x) = p[k];
            pred_hit[y * w + x] = true;
        }
    }
    for (k, partner) in m.right.iter().enumerate() {
        if partner.is_some() {
            let (y, x) = g[k];
            gt_hit[y * w + x] = true;
        }
    }
    (pred_hit, gt_hit)
}
