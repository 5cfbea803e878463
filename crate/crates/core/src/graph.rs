//! Undirected, unweighted friendship graph and the primitives the kernels and
//! baselines are built on.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric 0/1 adjacency over `n` users, stored as sorted neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocialGraph {
    adj: Vec<Vec<usize>>,
    edges: usize,
}

/// How rows of the transition matrix are formed for users without friends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedPolicy {
    /// A degree-0 node is an error.
    Reject,
    /// A degree-0 node's row becomes the uniform distribution over all nodes.
    Teleport,
}

impl SocialGraph {
    /// Builds a graph from an edge list. Duplicate and reversed pairs collapse
    /// into a single undirected edge; self-loops are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Reference(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::param(format!("self-loop on node {a}")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut edges = 0;
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
            edges += list.len();
        }
        Ok(SocialGraph {
            adj,
            edges: edges / 2,
        })
    }

    pub fn empty(n: usize) -> Self {
        SocialGraph {
            adj: vec![Vec::new(); n],
            edges: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adj.iter().map(Vec::len).collect()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    /// Each undirected edge once, as `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut a = DMatrix::zeros(n, n);
        for (i, list) in self.adj.iter().enumerate() {
            for &j in list {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Row-stochastic single-step transition matrix `p_ij = a_ij / d_i`.
    pub fn transition_matrix(&self, policy: IsolatedPolicy) -> Result<DMatrix<f64>> {
        let n = self.node_count();
        let mut p = DMatrix::zeros(n, n);
        for (i, list) in self.adj.iter().enumerate() {
            if list.is_empty() {
                match policy {
                    IsolatedPolicy::Reject => {
                        return Err(Error::param(format!(
                            "node {i} has no neighbours; transition row undefined"
                        )))
                    }
                    IsolatedPolicy::Teleport => {
                        let w = 1.0 / n as f64;
                        for j in 0..n {
                            p[(i, j)] = w;
                        }
                    }
                }
            } else {
                let w = 1.0 / list.len() as f64;
                for &j in list {
                    p[(i, j)] = w;
                }
            }
        }
        Ok(p)
    }

    /// Combinatorial Laplacian `L = D − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut l = DMatrix::zeros(n, n);
        for (i, list) in self.adj.iter().enumerate() {
            l[(i, i)] = list.len() as f64;
            for &j in list {
                l[(i, j)] = -1.0;
            }
        }
        l
    }

    /// Users at shortest-path distance exactly `i` from `source`, for
    /// `i = 1..=max_level`. Element `i - 1` of the result holds level `i`.
    pub fn bfs_levels(&self, source: usize, max_level: usize) -> Result<Vec<Vec<usize>>> {
        if source >= self.node_count() {
            return Err(Error::Reference(format!("unknown source node {source}")));
        }
        if max_level == 0 {
            return Err(Error::param("max_level must be at least 1"));
        }
        let mut dist = vec![usize::MAX; self.node_count()];
        let mut levels = vec![Vec::new(); max_level];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v];
            if dv == max_level {
                continue;
            }
            for &u in &self.adj[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dv + 1;
                    levels[dv].push(u);
                    queue.push_back(u);
                }
            }
        }
        for level in levels.iter_mut() {
            level.sort_unstable();
        }
        Ok(levels)
    }

    pub fn friend_count_bin(&self, v: usize) -> FriendBin {
        FriendBin::from_degree(self.degree(v))
    }
}

/// Friend-count groups used in the per-degree breakdown. Boundaries are
/// disjoint: `[1,5]`, `[6,10]`, `[11,20]`, `[21,50]`, `[51,∞)`; degree 0 is
/// kept apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FriendBin {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1-5")]
    UpTo5,
    #[serde(rename = "6-10")]
    UpTo10,
    #[serde(rename = "11-20")]
    UpTo20,
    #[serde(rename = "21-50")]
    UpTo50,
    #[serde(rename = ">50")]
    Over50,
}

impl FriendBin {
    pub const ALL: [FriendBin; 6] = [
        FriendBin::Zero,
        FriendBin::UpTo5,
        FriendBin::UpTo10,
        FriendBin::UpTo20,
        FriendBin::UpTo50,
        FriendBin::Over50,
    ];

    pub fn from_degree(degree: usize) -> Self {
        match degree {
            0 => FriendBin::Zero,
            1..=5 => FriendBin::UpTo5,
            6..=10 => FriendBin::UpTo10,
            11..=20 => FriendBin::UpTo20,
            21..=50 => FriendBin::UpTo50,
            _ => FriendBin::Over50,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FriendBin::Zero => "0",
            FriendBin::UpTo5 => "1-5",
            FriendBin::UpTo10 => "6-10",
            FriendBin::UpTo20 => "11-20",
            FriendBin::UpTo50 => "21-50",
            FriendBin::Over50 => ">50",
        }
    }
}

impl fmt::Display for FriendBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> SocialGraph {
        SocialGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap()
    }

    fn triangle() -> SocialGraph {
        SocialGraph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = SocialGraph::from_edges(2, [(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0), &[1]);
    }

    #[test]
    fn self_loop_rejected() {
        assert!(SocialGraph::from_edges(2, [(1, 1)]).is_err());
    }

    #[test]
    fn transition_single_edge() {
        let g = SocialGraph::from_edges(2, [(0, 1)]).unwrap();
        let p = g.transition_matrix(IsolatedPolicy::Reject).unwrap();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn transition_triangle() {
        let p = triangle()
            .transition_matrix(IsolatedPolicy::Reject)
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert_eq!(p[(i, j)], want);
            }
        }
    }

    #[test]
    fn transition_star() {
        let g = SocialGraph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        let p = g.transition_matrix(IsolatedPolicy::Reject).unwrap();
        for leaf in 1..4 {
            assert!((p[(0, leaf)] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(p[(leaf, 0)], 1.0);
            assert_eq!(p.row(leaf).sum(), 1.0);
        }
        assert_eq!(p[(0, 0)], 0.0);
    }

    #[test]
    fn isolated_node_policies() {
        let g = SocialGraph::from_edges(3, [(0, 1)]).unwrap();
        assert!(g.transition_matrix(IsolatedPolicy::Reject).is_err());
        let p = g.transition_matrix(IsolatedPolicy::Teleport).unwrap();
        for j in 0..3 {
            assert!((p[(2, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn laplacian_examples() {
        let g = SocialGraph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(
            g.laplacian(),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
        assert_eq!(SocialGraph::empty(3).laplacian(), DMatrix::zeros(3, 3));
        let l = triangle().laplacian();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l[(i, j)], if i == j { 2.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn bfs_on_path() {
        let levels = path3().bfs_levels(0, 3).unwrap();
        assert_eq!(levels[0], vec![1]);
        assert_eq!(levels[1], vec![2]);
        assert!(levels[2].is_empty());
    }

    #[test]
    fn bfs_singleton_component() {
        let g = SocialGraph::from_edges(4, [(0, 1), (1, 2)]).unwrap();
        let levels = g.bfs_levels(3, 4).unwrap();
        assert!(levels.iter().all(Vec::is_empty));
    }

    #[test]
    fn bfs_rejects_unknown_source() {
        assert!(matches!(path3().bfs_levels(7, 2), Err(Error::Reference(_))));
    }

    #[test]
    fn friend_bins() {
        assert_eq!(FriendBin::from_degree(5), FriendBin::UpTo5);
        assert_eq!(FriendBin::from_degree(81), FriendBin::Over50);
        assert_eq!(FriendBin::from_degree(21), FriendBin::UpTo50);
        assert_eq!(FriendBin::from_degree(20), FriendBin::UpTo20);
        assert_eq!(FriendBin::from_degree(6), FriendBin::UpTo10);
        assert_eq!(FriendBin::from_degree(0), FriendBin::Zero);
        assert_eq!(FriendBin::UpTo50.label(), "21-50");
    }

    fn floyd_warshall(g: &SocialGraph) -> Vec<Vec<usize>> {
        let n = g.node_count();
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
            for &j in g.neighbors(i) {
                d[i][j] = 1;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    fn check_against_oracle(g: &SocialGraph) {
        let d = floyd_warshall(g);
        let n = g.node_count();
        for s in 0..n {
            let levels = g.bfs_levels(s, n).unwrap();
            for (idx, level) in levels.iter().enumerate() {
                let want: Vec<usize> = (0..n).filter(|&v| d[s][v] == idx + 1).collect();
                assert_eq!(level, &want, "source {s} level {}", idx + 1);
            }
        }
    }

    #[test]
    fn bfs_bridged_triangles_matches_floyd_warshall() {
        let g =
            SocialGraph::from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)])
                .unwrap();
        check_against_oracle(&g);
    }

    fn arb_graph() -> impl Strategy<Value = SocialGraph> {
        (2usize..=12).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..30).prop_map(move |pairs| {
                SocialGraph::from_edges(n, pairs.into_iter().filter(|(a, b)| a != b)).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn bfs_agrees_with_all_pairs_oracle(g in arb_graph()) {
            check_against_oracle(&g);
        }

        #[test]
        fn transition_rows_are_stochastic(g in arb_graph()) {
            let p = g.transition_matrix(IsolatedPolicy::Teleport).unwrap();
            for i in 0..g.node_count() {
                prop_assert!((p.row(i).sum() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn laplacian_annihilates_ones(g in arb_graph()) {
            let l = g.laplacian();
            let ones = nalgebra::DVector::from_element(g.node_count(), 1.0);
            prop_assert!((&l * ones).amax() == 0.0);
            prop_assert_eq!(l.transpose(), l);
        }
    }
}
