//! Users, items, ratings, profiles and friendships; CSV ingestion, fold
//! assignment and the seeded synthetic generator.

mod io;
mod ratings;
mod synthetic;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::WrittenRows;
pub use io::{load_dataset, DatasetPaths, LoadOptions};
pub use ratings::{RatingMask, RatingMatrix, MAX_RATING, MIN_RATING};
pub use synthetic::{generate_synthetic, generate_with_communities, SyntheticParams};

use crate::error::{Error, Result};
use crate::graph::SocialGraph;

/// Profile tokens of one user, `attribute=value` for demographics.
pub type TokenSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    users: Vec<String>,
    items: Vec<String>,
    ratings: RatingMatrix,
    graph: SocialGraph,
    demographics: Vec<TokenSet>,
    claims: Vec<TokenSet>,
    user_index: HashMap<String, usize>,
}

impl Dataset {
    /// Assembles a dataset, checking that every index set lines up.
    pub fn new(
        users: Vec<String>,
        items: Vec<String>,
        ratings: RatingMatrix,
        graph: SocialGraph,
        demographics: Vec<TokenSet>,
        claims: Vec<TokenSet>,
    ) -> Result<Self> {
        let n = users.len();
        for (what, got) in [
            ("rating rows", ratings.user_count()),
            ("graph nodes", graph.node_count()),
            ("demographic profiles", demographics.len()),
            ("claim profiles", claims.len()),
        ] {
            if got != n {
                return Err(Error::param(format!("{what}: {got} entries for {n} users")));
            }
        }
        if ratings.item_count() != items.len() {
            return Err(Error::Dimension {
                expected: items.len(),
                got: ratings.item_count(),
            });
        }
        let mut user_index = HashMap::with_capacity(n);
        for (k, id) in users.iter().enumerate() {
            if user_index.insert(id.clone(), k).is_some() {
                return Err(Error::param(format!("duplicate user id {id}")));
            }
        }
        Ok(Dataset {
            users,
            items,
            ratings,
            graph,
            demographics,
            claims,
            user_index,
        })
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn ratings(&self) -> &RatingMatrix {
        &self.ratings
    }

    pub fn graph(&self) -> &SocialGraph {
        &self.graph
    }

    pub fn demographics(&self) -> &[TokenSet] {
        &self.demographics
    }

    pub fn claims(&self) -> &[TokenSet] {
        &self.claims
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    /// Content hash over every field, used to key on-disk kernel caches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for u in &self.users {
            h.update(u.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for i in &self.items {
            h.update(i.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for (u, i, r) in self.ratings.iter() {
            h.update((u as u64).to_le_bytes());
            h.update((i as u64).to_le_bytes());
            h.update(r.to_le_bytes());
        }
        h.update([1]);
        for (a, b) in self.graph.edges() {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        for profiles in [&self.demographics, &self.claims] {
            h.update([1]);
            for (u, set) in profiles.iter().enumerate() {
                for t in set {
                    h.update((u as u64).to_le_bytes());
                    h.update(t.as_bytes());
                    h.update([0]);
                }
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// User-level partition into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, user: usize) -> usize {
        self.fold_of[user]
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&u| self.fold_of[u] == fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Uniform random partition of the users into `k` folds whose sizes differ by
/// at most one.
pub fn split_folds(user_count: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > user_count {
        return Err(Error::param(format!(
            "fold count {k} must lie in [2, {user_count}]"
        )));
    }
    let mut order: Vec<usize> = (0..user_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; user_count];
    for (pos, &u) in order.iter().enumerate() {
        fold_of[u] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}
