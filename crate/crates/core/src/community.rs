//! Modularity-based community detection.
//!
//! Two-phase heuristic: greedy local moving of single nodes between
//! communities, then aggregation of each community into a super node, repeated
//! until no move improves modularity. After the multilevel phase converges, a
//! local-moving pass on the original nodes is run from the final partition; if
//! it moves anything the multilevel phase restarts from there. The procedure
//! therefore only stops once no single-node move (into a neighbouring or an
//! empty community) increases `Q`.
//!
//! Such a partition can still be a poor local optimum on small graphs (an
//! eight-node path settles into two halves instead of three blocks), so the
//! heuristic is run from several visit orders drawn from the seed and the
//! partition with the highest `Q` is kept.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SocialGraph;

/// Strict-improvement threshold for a single move.
const GAIN_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 1_000;
/// Independent runs of the heuristic per call.
const RESTARTS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    /// Community of each node, dense ids from 0 in order of first appearance.
    pub labels: Vec<usize>,
    pub community_count: usize,
    /// `None` for an edgeless graph, where modularity is undefined.
    pub modularity: Option<f64>,
    /// Modularity of the flattened partition after every pass.
    pub trace: Vec<f64>,
}

impl CommunityAssignment {
    pub fn same_community(&self, a: usize, b: usize) -> bool {
        self.labels[a] == self.labels[b]
    }

    /// Writes `user_id,community_id` rows.
    pub fn write_csv(&self, path: &Path, user_ids: &[String]) -> Result<()> {
        if user_ids.len() != self.labels.len() {
            return Err(Error::Dimension {
                expected: self.labels.len(),
                got: user_ids.len(),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user_id", "community_id"])?;
        for (id, c) in user_ids.iter().zip(&self.labels) {
            w.write_record([id.as_str(), &c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `Q = (1/2m) Σ_ij [a_ij − d_i d_j / 2m] δ(c_i, c_j)`, evaluated through
/// per-community edge and degree totals.
pub fn modularity(graph: &SocialGraph, labels: &[usize]) -> Result<f64> {
    if labels.len() != graph.node_count() {
        return Err(Error::Dimension {
            expected: graph.node_count(),
            got: labels.len(),
        });
    }
    let m = graph.edge_count() as f64;
    if m == 0.0 {
        return Err(Error::param("modularity is undefined on an edgeless graph"));
    }
    let k = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for v in 0..graph.node_count() {
        degree[labels[v]] += graph.degree(v) as f64;
    }
    for (a, b) in graph.edges() {
        if labels[a] == labels[b] {
            internal[labels[a]] += 1.0;
        }
    }
    let two_m = 2.0 * m;
    Ok(internal
        .iter()
        .zip(&degree)
        .map(|(&l, &d)| l / m - (d / two_m) * (d / two_m))
        .sum())
}

/// Weighted graph over super nodes. `adj[i]` holds `(j, w)` with `w` the
/// number of ordered original node pairs joining `i` and `j`; the self entry
/// is twice the internal edge count.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    strength: Vec<f64>,
    two_m: f64,
}

impl LevelGraph {
    fn from_social(graph: &SocialGraph) -> Self {
        let adj: Vec<Vec<(usize, f64)>> = (0..graph.node_count())
            .map(|v| graph.neighbors(v).iter().map(|&u| (u, 1.0)).collect())
            .collect();
        let strength: Vec<f64> = adj.iter().map(|l| l.iter().map(|e| e.1).sum()).collect();
        let two_m = strength.iter().sum();
        LevelGraph {
            adj,
            strength,
            two_m,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    /// Collapses each community (dense labels `0..k`) into one node.
    fn aggregate(&self, labels: &[usize], k: usize) -> Self {
        let mut groups = vec![Vec::new(); k];
        for (i, &c) in labels.iter().enumerate() {
            groups[c].push(i);
        }
        let mut acc = vec![0.0; k];
        let mut touched = Vec::new();
        let mut adj = Vec::with_capacity(k);
        for group in &groups {
            for &i in group {
                for &(j, w) in &self.adj[i] {
                    let cj = labels[j];
                    if acc[cj] == 0.0 {
                        touched.push(cj);
                    }
                    acc[cj] += w;
                }
            }
            touched.sort_unstable();
            adj.push(touched.iter().map(|&c| (c, acc[c])).collect::<Vec<_>>());
            for &c in &touched {
                acc[c] = 0.0;
            }
            touched.clear();
        }
        let mut strength = vec![0.0; k];
        for (i, s) in self.strength.iter().enumerate() {
            strength[labels[i]] += s;
        }
        LevelGraph {
            adj,
            strength,
            two_m: self.two_m,
        }
    }
}

/// Greedy single-node moves until a full sweep changes nothing. Returns
/// whether any node moved.
fn local_moving(g: &LevelGraph, labels: &mut [usize], rng: &mut ChaCha8Rng) -> bool {
    let n = g.len();
    let mut total = vec![0.0; n];
    for i in 0..n {
        total[labels[i]] += g.strength[i];
    }
    let mut members = vec![0usize; n];
    for &c in labels.iter() {
        members[c] += 1;
    }
    let mut empty: BTreeSet<usize> = (0..n).filter(|&c| members[c] == 0).collect();

    let mut link = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut any_move = false;

    for _ in 0..MAX_SWEEPS {
        order.shuffle(rng);
        let mut moved = false;
        for &i in &order {
            let ki = g.strength[i];
            if ki == 0.0 {
                continue;
            }
            let ci = labels[i];
            for &(j, w) in &g.adj[i] {
                if j == i {
                    continue;
                }
                let cj = labels[j];
                if !seen[cj] {
                    seen[cj] = true;
                    touched.push(cj);
                }
                link[cj] += w;
            }
            total[ci] -= ki;
            members[ci] -= 1;

            let scale = ki / g.two_m;
            let stay = link[ci] - total[ci] * scale;
            touched.sort_unstable();
            let mut best = ci;
            let mut best_gain = f64::NEG_INFINITY;
            for &c in &touched {
                if c == ci {
                    continue;
                }
                let gain = link[c] - total[c] * scale;
                if gain > best_gain {
                    best_gain = gain;
                    best = c;
                }
            }
            // An empty community is always available when i is not alone.
            if members[ci] > 0 {
                if let Some(&e) = empty.iter().next() {
                    if 0.0 > best_gain {
                        best_gain = 0.0;
                        best = e;
                    }
                }
            }
            let target = if best_gain > stay + GAIN_TOL * ki.max(1.0) {
                best
            } else {
                ci
            };

            if members[ci] == 0 && target != ci {
                empty.insert(ci);
            }
            if target != ci {
                empty.remove(&target);
                moved = true;
            }
            labels[i] = target;
            total[target] += ki;
            members[target] += 1;

            for &c in &touched {
                link[c] = 0.0;
                seen[c] = false;
            }
            touched.clear();
        }
        if !moved {
            break;
        }
        any_move = true;
    }
    any_move
}

/// Relabels to dense ids in order of first appearance; returns the count.
fn renumber(labels: &mut [usize]) -> usize {
    let mut map = vec![usize::MAX; labels.len().max(1)];
    let mut next = 0;
    for c in labels.iter_mut() {
        if *c >= map.len() {
            map.resize(*c + 1, usize::MAX);
        }
        if map[*c] == usize::MAX {
            map[*c] = next;
            next += 1;
        }
        *c = map[*c];
    }
    next
}

/// Detects communities by modularity maximisation (resolution 1). Node visit
/// order is shuffled per sweep from `seed`; equal gains go to the lowest
/// community id. The returned `trace` is the per-pass `Q` of the kept run.
pub fn detect_communities(graph: &SocialGraph, seed: u64) -> CommunityAssignment {
    let n = graph.node_count();
    if graph.edge_count() == 0 {
        return CommunityAssignment {
            labels: (0..n).collect(),
            community_count: n,
            modularity: None,
            trace: Vec::new(),
        };
    }
    let base = LevelGraph::from_social(graph);
    let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
    for run in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run);
        let (labels, trace) = multilevel(graph, &base, &mut rng);
        let better = best.as_ref().is_none_or(|(_, t)| trace.last() > t.last());
        if better {
            best = Some((labels, trace));
        }
    }
    let (mut membership, trace) = best.expect("at least one run");
    let community_count = renumber(&mut membership);
    let modularity = Some(modularity(graph, &membership).expect("graph has edges"));
    CommunityAssignment {
        labels: membership,
        community_count,
        modularity,
        trace,
    }
}

/// One run of the two-phase heuristic; returns the partition and `Q` after
/// every pass.
fn multilevel(
    graph: &SocialGraph,
    base: &LevelGraph,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<f64>) {
    let n = graph.node_count();
    let q = |labels: &[usize]| modularity(graph, labels).expect("graph has edges");

    let mut membership: Vec<usize> = (0..n).collect();
    let mut trace = vec![q(&membership)];

    loop {
        let mut k = renumber(&mut membership);
        let mut level = base.aggregate(&membership, k);
        loop {
            let mut labels: Vec<usize> = (0..level.len()).collect();
            if !local_moving(&level, &mut labels, rng) {
                break;
            }
            k = renumber(&mut labels);
            for c in membership.iter_mut() {
                *c = labels[*c];
            }
            trace.push(q(&membership));
            level = level.aggregate(&labels, k);
        }

        let mut refined = membership.clone();
        if !local_moving(base, &mut refined, rng) {
            break;
        }
        renumber(&mut refined);
        membership = refined;
        trace.push(q(&membership));
    }
    (membership, trace)
}
