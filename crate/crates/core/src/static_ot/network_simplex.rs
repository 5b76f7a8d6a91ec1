//! Primal network simplex for dense transportation problems.
//!
//! Sources and sinks are joined by a complete bipartite arc set with costs
//! evaluated on demand. The initial basis routes every supply and demand
//! through an artificial root with a prohibitive cost, which makes the
//! starting tree strongly feasible; the leaving-arc rule keeps it so, which
//! rules out cycling on degenerate pivots.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct TransportSolution {
    /// `(source, sink, mass)` for every basic arc with positive flow.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    /// pred arc points from the node to its parent
    Up,
    /// pred arc points from the parent to the node
    Down,
}

/// Solves `min sum c_ij x_ij` over couplings of `supply` and `demand`.
///
/// Both marginals must be strictly positive and have equal totals up to
/// rounding.
pub(crate) fn solve<C>(supply: &[f64], demand: &[f64], cost: C, max_pivots: usize) -> Result<TransportSolution>
where
    C: Fn(usize, usize) -> f64,
{
    let (n0, n1) = (supply.len(), demand.len());
    if n0 == 0 || n1 == 0 {
        return Ok(TransportSolution {
            flows: Vec::new(),
            cost: 0.0,
        });
    }
    let nodes = n0 + n1;
    let root = nodes;
    let real_arcs = n0 * n1;
    let mut max_cost: f64 = 0.0;
    for i in 0..n0 {
        for j in 0..n1 {
            max_cost = max_cost.max(cost(i, j).abs());
        }
    }
    let art_cost = (max_cost + 1.0) * nodes as f64;
    let arc_cost = |a: usize| -> f64 {
        if a < real_arcs {
            cost(a / n1, a % n1)
        } else {
            art_cost
        }
    };
    // tail and head; node ids: sources 0..n0, sinks n0..n0+n1, root
    let ends = |a: usize| -> (usize, usize) {
        if a < real_arcs {
            (a / n1, n0 + a % n1)
        } else {
            let v = a - real_arcs;
            if v < n0 {
                (v, root)
            } else {
                (root, v)
            }
        }
    };

    let mut parent = vec![usize::MAX; nodes + 1];
    let mut pred = vec![usize::MAX; nodes + 1];
    let mut dir = vec![Dir::Up; nodes + 1];
    let mut flow = vec![0.0; nodes + 1];
    let mut depth = vec![0usize; nodes + 1];
    let mut pot = vec![0.0; nodes + 1];
    // tree adjacency: arc ids incident to each node
    let mut tree_adj: Vec<Vec<usize>> = vec![Vec::new(); nodes + 1];
    for v in 0..nodes {
        let a = real_arcs + v;
        parent[v] = root;
        pred[v] = a;
        depth[v] = 1;
        tree_adj[v].push(a);
        tree_adj[root].push(a);
        if v < n0 {
            dir[v] = Dir::Up;
            flow[v] = supply[v];
            pot[v] = -art_cost;
        } else {
            dir[v] = Dir::Down;
            flow[v] = demand[v - n0];
            pot[v] = art_cost;
        }
    }

    let scale_tol = 1e-12 * (max_cost + 1.0);
    let block = ((real_arcs as f64).sqrt().ceil() as usize).max(10);
    let mut next_arc = 0usize;
    let mut pivots = 0usize;
    // entering-arc search by blocks
    loop {
        let mut best = usize::MAX;
        let mut best_rc = -scale_tol;
        let mut scanned = 0usize;
        let mut in_block = 0usize;
        while scanned < real_arcs {
            let a = next_arc;
            next_arc += 1;
            if next_arc == real_arcs {
                next_arc = 0;
            }
            scanned += 1;
            in_block += 1;
            let (i, jn) = (a / n1, n0 + a % n1);
            let rc = arc_cost(a) + pot[i] - pot[jn];
            if rc < best_rc {
                best_rc = rc;
                best = a;
            }
            if in_block == block {
                if best != usize::MAX {
                    break;
                }
                in_block = 0;
            }
        }
        if best == usize::MAX {
            break;
        }
        if pivots >= max_pivots {
            return Err(Error::NonConvergence {
                iterations: pivots,
                residual: -best_rc,
                detail: "network simplex pivot limit".into(),
            });
        }
        pivots += 1;

        let (first, second) = ends(best);
        // join node
        let (mut x, mut y) = (first, second);
        while x != y {
            if depth[x] >= depth[y] {
                x = parent[x];
            } else {
                y = parent[y];
            }
        }
        let join = x;
        // leaving arc (strongly feasible rule)
        let mut delta = f64::INFINITY;
        let mut out_node = usize::MAX;
        let mut u = first;
        while u != join {
            if dir[u] == Dir::Up && flow[u] < delta {
                delta = flow[u];
                out_node = u;
            }
            u = parent[u];
        }
        let mut u = second;
        while u != join {
            if dir[u] == Dir::Down && flow[u] <= delta {
                delta = flow[u];
                out_node = u;
            }
            u = parent[u];
        }
        if out_node == usize::MAX {
            return Err(Error::NonConvergence {
                iterations: pivots,
                residual: f64::INFINITY,
                detail: "unbounded transportation cycle".into(),
            });
        }
        // augment
        if delta > 0.0 {
            let mut u = first;
            while u != join {
                flow[u] += if dir[u] == Dir::Up { -delta } else { delta };
                u = parent[u];
            }
            let mut u = second;
            while u != join {
                flow[u] += if dir[u] == Dir::Down { -delta } else { delta };
                u = parent[u];
            }
        }
        // swap arcs in the tree
        let leaving = pred[out_node];
        let (lt, lh) = ends(leaving);
        tree_adj[lt].retain(|&a| a != leaving);
        tree_adj[lh].retain(|&a| a != leaving);
        tree_adj[first].push(best);
        tree_adj[second].push(best);
        // flows of tree arcs keyed by arc before re-rooting
        let mut arc_flow: Vec<(usize, f64)> = Vec::with_capacity(nodes);
        for v in 0..nodes {
            if pred[v] != leaving {
                arc_flow.push((pred[v], flow[v]));
            }
        }
        arc_flow.push((best, delta));
        rebuild_tree(
            root,
            &tree_adj,
            &arc_flow,
            &ends,
            &arc_cost,
            &mut parent,
            &mut pred,
            &mut dir,
            &mut flow,
            &mut depth,
            &mut pot,
        );
    }

    let mut flows = Vec::new();
    let mut total = 0.0;
    for v in 0..nodes {
        let a = pred[v];
        if a < real_arcs {
            if flow[v] > 0.0 {
                let (i, j) = (a / n1, a % n1);
                flows.push((i, j, flow[v]));
                total += flow[v] * cost(i, j);
            }
        } else if flow[v] > 1e-9 {
            return Err(Error::NonConvergence {
                iterations: pivots,
                residual: flow[v],
                detail: "artificial arc carries flow at optimum (unbalanced marginals)".into(),
            });
        }
    }
    flows.sort_by_key(|a| (a.0, a.1));
    Ok(TransportSolution {
        flows,
        cost: total,
    })
}

#[allow(clippy::too_many_arguments)]
fn rebuild_tree<E, K>(
    root: usize,
    tree_adj: &[Vec<usize>],
    arc_flow: &[(usize, f64)],
    ends: &E,
    arc_cost: &K,
    parent: &mut [usize],
    pred: &mut [usize],
    dir: &mut [Dir],
    flow: &mut [f64],
    depth: &mut [usize],
    pot: &mut [f64],
) where
    E: Fn(usize) -> (usize, usize),
    K: Fn(usize) -> f64,
{
    let flow_of: std::collections::HashMap<usize, f64> = arc_flow.iter().cloned().collect();
    let n = parent.len();
    let mut seen = vec![false; n];
    let mut queue = Vec::with_capacity(n);
    queue.push(root);
    seen[root] = true;
    parent[root] = usize::MAX;
    depth[root] = 0;
    pot[root] = 0.0;
    let mut head = 0;
    while head < queue.len() {
        let u = queue[head];
        head += 1;
        for &a in &tree_adj[u] {
            let (t, h) = ends(a);
            let v = if t == u { h } else { t };
            if seen[v] {
                continue;
            }
            seen[v] = true;
            parent[v] = u;
            pred[v] = a;
            depth[v] = depth[u] + 1;
            flow[v] = flow_of[&a];
            if t == v {
                dir[v] = Dir::Up;
                pot[v] = pot[u] - arc_cost(a);
            } else {
                dir[v] = Dir::Down;
                pot[v] = pot[u] + arc_cost(a);
            }
            queue.push(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive search over vertices is impractical; compare against the
    /// northwest-corner rule on a cost that makes it optimal (Monge).
    #[test]
    fn monge_cost_matches_monotone_coupling() {
        let a = [0.2, 0.3, 0.1, 0.4];
        let b = [0.25, 0.25, 0.25, 0.25];
        let x = [0.0_f64, 1.0, 2.5, 3.0];
        let y = [0.5_f64, 1.5, 2.0, 4.0];
        let sol = solve(&a, &b, |i, j| (x[i] - y[j]).powi(2), 10_000).unwrap();
        // northwest corner
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (a[0], b[0]);
        let mut expected = 0.0;
        while i < 4 && j < 4 {
            let m = ra.min(rb);
            expected += m * (x[i] - y[j]).powi(2);
            ra -= m;
            rb -= m;
            if ra <= 1e-15 {
                i += 1;
                if i < 4 {
                    ra = a[i];
                }
            }
            if rb <= 1e-15 {
                j += 1;
                if j < 4 {
                    rb = b[j];
                }
            }
        }
        assert!((sol.cost - expected).abs() < 1e-14);
    }

    #[test]
    fn assignment_problem() {
        // permutation costs; optimum picks the anti-diagonal
        let c = [[4.0, 3.0, 1.0], [3.0, 1.0, 3.0], [1.0, 3.0, 4.0]];
        let w = [1.0 / 3.0; 3];
        let sol = solve(&w, &w, |i, j| c[i][j], 1000).unwrap();
        assert!((sol.cost - 1.0).abs() < 1e-14);
        let mut row = [0.0; 3];
        let mut col = [0.0; 3];
        for &(i, j, m) in &sol.flows {
            row[i] += m;
            col[j] += m;
        }
        for k in 0..3 {
            assert!((row[k] - w[k]).abs() < 1e-15 && (col[k] - w[k]).abs() < 1e-15);
        }
    }
}
