//! Seeded generator for datasets with planted community, friend-influence and
//! user-bias structure.
//!
//! Generation steps:
//!
//! 1. every user joins one of `n_communities` uniformly at random;
//! 2. degree targets follow a truncated discrete power law on
//!    `[1, k_max]`, whose exponent is calibrated so the expected degree equals
//!    `mean_degree`; stubs are paired configuration-model style, most of them
//!    inside the user's community; stubs lost to self-loops and multi-edges
//!    are re-paired for a few rounds, and users left without a friend are
//!    attached to a community peer;
//! 3. demographic and claim tokens are drawn with a community-dependent bias;
//! 4. the latent preference of user `u` for item `w` is the fixed point of
//!    `p_u = strength · θ_{c(u), w} + b_u + s · mean_{v ∈ N(u)} p_v`,
//!    where `θ` is a per-community taste vector, `b_u` a personal bias and `s`
//!    the influence strength;
//! 5. each user rates a random subset of items; the observed rating is
//!    `global_mean + p_uw + noise`, clamped to `[1, 10]`.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Dataset, RatingMatrix, TokenSet, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use crate::graph::SocialGraph;

/// Share of a user's edge stubs paired inside their own community.
const INTRA_COMMUNITY_SHARE: f64 = 0.85;

const GENRES: [&str; 10] = [
    "action",
    "comedy",
    "drama",
    "romance",
    "thriller",
    "horror",
    "animation",
    "documentary",
    "scifi",
    "crime",
];
const AGE_BANDS: [&str; 4] = ["18-24", "25-34", "35-44", "45+"];
const CITIES: [&str; 8] = [
    "beijing",
    "shanghai",
    "guangzhou",
    "shenzhen",
    "hongkong",
    "chengdu",
    "wuhan",
    "nanjing",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_users: usize,
    pub n_items: usize,
    pub mean_degree: f64,
    pub n_communities: usize,
    /// Weight `s ∈ [0, 1)` of the friends' average in a user's preference.
    pub influence_strength: f64,
    /// Scale of the per-community item tastes.
    pub community_strength: f64,
    pub noise_std: f64,
    pub ratings_per_user_mean: f64,
    pub seed: u64,
    /// Standard deviation of the per-user rating bias.
    pub bias_std: f64,
    /// Centre of the rating scale before clamping.
    pub global_mean: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_users: 500,
            n_items: 50,
            mean_degree: 8.0,
            n_communities: 5,
            influence_strength: 0.5,
            community_strength: 1.0,
            noise_std: 0.7,
            ratings_per_user_mean: 10.0,
            seed: 1,
            bias_std: 1.0,
            global_mean: 7.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_communities == 0 {
            return fail("n_users, n_items and n_communities must be at least 1".into());
        }
        if !(self.mean_degree >= 1.0) || self.mean_degree >= self.n_users as f64 {
            return fail(format!(
                "mean_degree {} must lie in [1, n_users = {})",
                self.mean_degree, self.n_users
            ));
        }
        if !(0.0..1.0).contains(&self.influence_strength) {
            return fail(format!(
                "influence_strength {} must lie in [0, 1)",
                self.influence_strength
            ));
        }
        for (name, v) in [
            ("community_strength", self.community_strength),
            ("noise_std", self.noise_std),
            ("bias_std", self.bias_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.ratings_per_user_mean >= 1.0) {
            return fail("ratings_per_user_mean must be at least 1".into());
        }
        if !self.global_mean.is_finite() {
            return fail("global_mean must be finite".into());
        }
        Ok(())
    }

    /// Largest degree the power law may produce.
    pub fn max_degree(&self) -> usize {
        let floor = (2.0 * self.mean_degree).ceil() as usize;
        (self.n_users / 10).max(floor).min(self.n_users - 1).max(1)
    }
}

fn power_law_mean(exponent: f64, k_max: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=k_max {
        let w = (k as f64).powf(-exponent);
        num += k as f64 * w;
        den += w;
    }
    num / den
}

/// Exponent in `[0, 10]` whose truncated power law on `[1, k_max]` has the
/// requested mean, by bisection (the mean decreases with the exponent).
fn calibrate_exponent(mean: f64, k_max: usize) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 10.0_f64);
    if power_law_mean(lo, k_max) <= mean {
        return lo;
    }
    if power_law_mean(hi, k_max) >= mean {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if power_law_mean(mid, k_max) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn sample_degrees(p: &SyntheticParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k_max = p.max_degree();
    let exponent = calibrate_exponent(p.mean_degree, k_max);
    let mut cdf = Vec::with_capacity(k_max);
    let mut acc = 0.0;
    for k in 1..=k_max {
        acc += (k as f64).powf(-exponent);
        cdf.push(acc);
    }
    (0..p.n_users)
        .map(|_| {
            let x = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c < x).min(k_max - 1) + 1
        })
        .collect()
}

/// Shuffles and pairs stubs, keeping pairs that are neither self-loops nor
/// already present in `seen`.
fn pair_stubs(
    stubs: &mut Vec<usize>,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<(usize, usize)>,
    degree: &mut [usize],
) {
    use rand::seq::SliceRandom;
    stubs.shuffle(rng);
    for pair in stubs.chunks_exact(2) {
        let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
        if a != b && seen.insert((a, b)) {
            degree[a] += 1;
            degree[b] += 1;
        }
    }
    stubs.clear();
}

/// Stubs re-pairing rounds for degree lost to rejected pairs.
const REPAIR_ROUNDS: usize = 10;

fn build_graph(
    p: &SyntheticParams,
    community: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<SocialGraph> {
    let n = p.n_users;
    let target = sample_degrees(p, rng);
    let mut seen = HashSet::new();
    let mut degree = vec![0usize; n];
    let mut intra: Vec<Vec<usize>> = vec![Vec::new(); p.n_communities];
    let mut inter = Vec::new();
    for round in 0..=REPAIR_ROUNDS {
        for u in 0..n {
            for _ in degree[u]..target[u] {
                if p.n_communities == 1 || rng.random::<f64>() < INTRA_COMMUNITY_SHARE {
                    intra[community[u]].push(u);
                } else {
                    inter.push(u);
                }
            }
        }
        if round > 0 && intra.iter().all(Vec::is_empty) && inter.is_empty() {
            break;
        }
        for stubs in intra.iter_mut() {
            pair_stubs(stubs, rng, &mut seen, &mut degree);
        }
        pair_stubs(&mut inter, rng, &mut seen, &mut degree);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); p.n_communities];
    for (u, &c) in community.iter().enumerate() {
        members[c].push(u);
    }
    for u in 0..n {
        if degree[u] > 0 {
            continue;
        }
        let peers = &members[community[u]];
        let v = if peers.len() > 1 {
            loop {
                let v = peers[rng.random_range(0..peers.len())];
                if v != u {
                    break v;
                }
            }
        } else {
            let v = rng.random_range(0..n - 1);
            if v >= u {
                v + 1
            } else {
                v
            }
        };
        seen.insert((u.min(v), u.max(v)));
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut edges: Vec<(usize, usize)> = seen.into_iter().collect();
    edges.sort_unstable();
    SocialGraph::from_edges(n, edges)
}

/// Picks from `options`, favouring `preferred` with probability `bias`.
fn biased_pick<'a>(
    options: &[&'a str],
    preferred: usize,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> &'a str {
    if rng.random::<f64>() < bias {
        options[preferred % options.len()]
    } else {
        options[rng.random_range(0..options.len())]
    }
}

fn profiles(
    p: &SyntheticParams,
    community: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenSet>, Vec<TokenSet>) {
    let mut demographics = Vec::with_capacity(p.n_users);
    let mut claims = Vec::with_capacity(p.n_users);
    for &c in community {
        let mut d = TokenSet::new();
        let gender = if rng.random::<bool>() { "F" } else { "M" };
        d.insert(format!("gender={gender}"));
        d.insert(format!("age={}", biased_pick(&AGE_BANDS, c, 0.5, rng)));
        d.insert(format!("city={}", biased_pick(&CITIES, c * 3, 0.6, rng)));
        demographics.push(d);

        let mut cl = TokenSet::new();
        let count = rng.random_range(1..=3);
        for k in 0..count {
            cl.insert(biased_pick(&GENRES, 2 * c + k % 2, 0.6, rng).to_string());
        }
        claims.push(cl);
    }
    (demographics, claims)
}

/// Fixed point of `p = base + s·W p` with `W` the row-normalised
/// adjacency, one column of `base` per item.
fn propagate(graph: &SocialGraph, base: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    let mut p = base.to_vec();
    if s == 0.0 {
        return p;
    }
    let n = graph.node_count();
    let mut next = p.clone();
    for _ in 0..2_000 {
        let mut delta: f64 = 0.0;
        for u in 0..n {
            let nb = graph.neighbors(u);
            for w in 0..base[u].len() {
                let social = if nb.is_empty() {
                    p[u][w]
                } else {
                    nb.iter().map(|&v| p[v][w]).sum::<f64>() / nb.len() as f64
                };
                let v = base[u][w] + s * social;
                delta = delta.max((v - p[u][w]).abs());
                next[u][w] = v;
            }
        }
        std::mem::swap(&mut p, &mut next);
        if delta < 1e-12 {
            break;
        }
    }
    p
}

pub fn generate_synthetic(params: &SyntheticParams) -> Result<Dataset> {
    generate_with_communities(params).map(|(d, _)| d)
}

/// Same as [`generate_synthetic`], also returning the planted community of
/// every user.
pub fn generate_with_communities(params: &SyntheticParams) -> Result<(Dataset, Vec<usize>)> {
    params.validate()?;
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.n_users;

    let community: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..p.n_communities))
        .collect();
    let graph = build_graph(p, &community, &mut rng)?;
    let (demographics, claims) = profiles(p, &community, &mut rng);

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let taste: Vec<Vec<f64>> = (0..p.n_communities)
        .map(|_| {
            (0..p.n_items)
                .map(|_| std_normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let bias: Vec<f64> = (0..n)
        .map(|_| p.bias_std * std_normal.sample(&mut rng))
        .collect();
    let base: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            taste[community[u]]
                .iter()
                .map(|t| p.community_strength * t + bias[u])
                .collect()
        })
        .collect();
    let latent = propagate(&graph, &base, p.influence_strength);

    let extra = p.ratings_per_user_mean - 1.0;
    let poisson = (extra > 0.0).then(|| Poisson::new(extra).expect("positive rate"));
    let mut entries = Vec::new();
    for u in 0..n {
        let count = 1 + poisson.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        let count = count.min(p.n_items);
        let mut chosen = index::sample(&mut rng, p.n_items, count).into_vec();
        chosen.sort_unstable();
        for w in chosen {
            let noise = p.noise_std * std_normal.sample(&mut rng);
            let r = (p.global_mean + latent[u][w] + noise).clamp(MIN_RATING, MAX_RATING);
            entries.push((u, w, r));
        }
    }

    let users = (0..n).map(|u| format!("u{u}")).collect();
    let items = (0..p.n_items).map(|w| format!("m{w}")).collect();
    let ratings = RatingMatrix::new(n, p.n_items, entries)?;
    let d = Dataset::new(users, items, ratings, graph, demographics, claims)?;
    Ok((d, community))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(xs: &[(f64, f64)]) -> f64 {
        let n = xs.len() as f64;
        let (mx, my) = xs
            .iter()
            .fold((0.0, 0.0), |a, &(x, y)| (a.0 + x / n, a.1 + y / n));
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for &(x, y) in xs {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    /// Both orientations of every friend pair, over co-rated items.
    fn friend_rating_pairs(d: &Dataset) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (a, b) in d.graph().edges() {
            for &(w, ra) in d.ratings().user_ratings(a) {
                if let Some(rb) = d.ratings().get(b, w) {
                    out.push((ra, rb));
                    out.push((rb, ra));
                }
            }
        }
        out
    }

    #[test]
    fn deterministic_given_seed() {
        let p = SyntheticParams {
            n_users: 120,
            ..SyntheticParams::default()
        };
        let a = generate_synthetic(&p).unwrap();
        let b = generate_synthetic(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate_synthetic(&SyntheticParams { seed: 2, ..p }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn every_user_has_a_friend_and_valid_ratings() {
        let d = generate_synthetic(&SyntheticParams::default()).unwrap();
        assert!((0..d.user_count()).all(|u| d.graph().degree(u) >= 1));
        assert!(d
            .ratings()
            .iter()
            .all(|(_, _, r)| (1.0..=10.0).contains(&r)));
        assert!((0..d.user_count()).all(|u| !d.ratings().user_ratings(u).is_empty()));
        let mean_deg = 2.0 * d.graph().edge_count() as f64 / d.user_count() as f64;
        assert!((mean_deg - 8.0).abs() < 1.5, "mean degree {mean_deg}");
    }

    #[test]
    fn no_structure_means_uncorrelated_friends() {
        let p = SyntheticParams {
            n_users: 500,
            influence_strength: 0.0,
            community_strength: 0.0,
            noise_std: 1.0,
            ratings_per_user_mean: 15.0,
            seed: 17,
            ..SyntheticParams::default()
        };
        let d = generate_synthetic(&p).unwrap();
        let pairs = friend_rating_pairs(&d);
        assert!(pairs.len() > 1_000);
        let r = pearson(&pairs);
        assert!(r.abs() < 0.1, "friend correlation {r}");
    }

    #[test]
    fn influence_correlates_friends() {
        let p = SyntheticParams {
            influence_strength: 0.8,
            community_strength: 0.0,
            ratings_per_user_mean: 15.0,
            seed: 17,
            ..SyntheticParams::default()
        };
        let d = generate_synthetic(&p).unwrap();
        let r = pearson(&friend_rating_pairs(&d));
        assert!(r > 0.1, "friend correlation {r}");
    }

    #[test]
    fn strong_communities_dominate_variance() {
        let p = SyntheticParams {
            n_users: 300,
            n_communities: 2,
            community_strength: 6.0,
            influence_strength: 0.0,
            noise_std: 0.0,
            bias_std: 0.3,
            global_mean: 5.5,
            seed: 5,
            ..SyntheticParams::default()
        };
        let (d, community) = generate_with_communities(&p).unwrap();
        let (mut within, mut between) = (0.0, 0.0);
        for w in 0..d.item_count() {
            let mut groups = vec![Vec::new(); 2];
            for &(u, r) in d.ratings().item_ratings(w) {
                groups[community[u]].push(r);
            }
            if groups.iter().any(|g| g.len() < 2) {
                continue;
            }
            let all: Vec<f64> = groups.iter().flatten().copied().collect();
            let grand = all.iter().sum::<f64>() / all.len() as f64;
            for g in &groups {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                within += g.iter().map(|r| (r - m).powi(2)).sum::<f64>();
                between += g.len() as f64 * (m - grand).powi(2);
            }
        }
        assert!(within < 0.1 * between, "within {within} between {between}");
    }

    #[test]
    fn rejects_infeasible_parameters() {
        let bad = [
            SyntheticParams {
                n_users: 0,
                ..SyntheticParams::default()
            },
            SyntheticParams {
                n_users: 10,
                mean_degree: 10.0,
                ..SyntheticParams::default()
            },
            SyntheticParams {
                influence_strength: 1.0,
                ..SyntheticParams::default()
            },
            SyntheticParams {
                noise_std: -1.0,
                ..SyntheticParams::default()
            },
        ];
        for p in bad {
            assert!(matches!(generate_synthetic(&p), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn exponent_calibration_hits_mean() {
        for target in [1.5, 4.0, 8.0, 14.16] {
            let e = calibrate_exponent(target, 60);
            assert!((power_law_mean(e, 60) - target).abs() < 1e-6);
        }
    }
}
