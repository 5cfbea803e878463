//! Neighbourhood and collaborative-filtering comparison methods.
//!
//! Every predictor reads a rating matrix holding only the ratings it may
//! see. When no estimate can be formed the configured [`Fallback`] is used
//! and the prediction is marked as such.

use serde::{Deserialize, Serialize};

use crate::dataset::RatingMatrix;
use crate::error::{Error, Result};
use crate::graph::SocialGraph;

/// Deepest friendship level multi-level influence may use.
pub const MAX_MNI_LEVEL: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    GlobalMean,
    ItemMean,
    UserMean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Damping of the multi-level neighbour influence.
    pub alpha_mni: f64,
    pub max_level: usize,
    /// Divide by the total weight of the levels that had raters.
    pub normalize_mni: bool,
    pub fallback: Fallback,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            alpha_mni: 0.5,
            max_level: 3,
            normalize_mni: false,
            fallback: Fallback::GlobalMean,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_mni > 0.0 && self.alpha_mni < 1.0) {
            return Err(Error::param(format!(
                "MNI damping {} must lie in (0, 1)",
                self.alpha_mni
            )));
        }
        if !(1..=MAX_MNI_LEVEL).contains(&self.max_level) {
            return Err(Error::param(format!(
                "MNI level {} must lie in [1, {MAX_MNI_LEVEL}]",
                self.max_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Estimate(f64),
    /// The method had nothing to go on; this is the fallback value.
    Fallback(f64),
    /// No estimate and no usable fallback.
    Missing,
}

impl Prediction {
    pub fn value(self) -> Option<f64> {
        match self {
            Prediction::Estimate(v) | Prediction::Fallback(v) => Some(v),
            Prediction::Missing => None,
        }
    }

    pub fn is_estimate(self) -> bool {
        matches!(self, Prediction::Estimate(_))
    }
}

/// Resolves a missing estimate through `fallback`. `own` holds the target
/// user's visible ratings.
pub fn apply_fallback(
    estimate: Option<f64>,
    fallback: Fallback,
    ratings: &RatingMatrix,
    own: &[(usize, f64)],
    item: usize,
) -> Prediction {
    if let Some(v) = estimate {
        return Prediction::Estimate(v);
    }
    let value = match fallback {
        Fallback::GlobalMean => ratings.global_mean(),
        Fallback::ItemMean => ratings.item_mean(item),
        Fallback::UserMean => mean_of(own),
        Fallback::None => None,
    };
    value.map_or(Prediction::Missing, Prediction::Fallback)
}

fn mean_of(r: &[(usize, f64)]) -> Option<f64> {
    (!r.is_empty()).then(|| r.iter().map(|e| e.1).sum::<f64>() / r.len() as f64)
}

/// Mean rating on `item` among the given users who rated it.
fn level_mean(users: &[usize], ratings: &RatingMatrix, item: usize) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for &u in users {
        if let Some(r) = ratings.get(u, item) {
            sum += r;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean of the friends' ratings on `item`.
pub fn predict_ni(
    graph: &SocialGraph,
    ratings: &RatingMatrix,
    user: usize,
    item: usize,
    fallback: Fallback,
) -> Prediction {
    let est = level_mean(graph.neighbors(user), ratings, item);
    apply_fallback(est, fallback, ratings, ratings.user_ratings(user), item)
}

/// `Σ_i α^i R_i` over the levels `i ≤ k` whose users rated the item, with
/// `R_i` the mean rating at shortest-path distance `i`. Normalisation divides
/// by `Σ α^i` over the same levels.
pub fn mni_estimate(
    levels: &[Vec<usize>],
    ratings: &RatingMatrix,
    item: usize,
    alpha: f64,
    k: usize,
    normalize: bool,
) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut weight = 1.0;
    for level in levels.iter().take(k) {
        weight *= alpha;
        if let Some(r) = level_mean(level, ratings, item) {
            num += weight * r;
            den += weight;
        }
    }
    if den == 0.0 {
        None
    } else if normalize {
        Some(num / den)
    } else {
        Some(num)
    }
}

pub fn predict_mni(
    graph: &SocialGraph,
    ratings: &RatingMatrix,
    user: usize,
    item: usize,
    config: &BaselineConfig,
) -> Result<Prediction> {
    config.validate()?;
    let levels = graph.bfs_levels(user, config.max_level)?;
    let est = mni_estimate(
        &levels,
        ratings,
        item,
        config.alpha_mni,
        config.max_level,
        config.normalize_mni,
    );
    Ok(apply_fallback(
        est,
        config.fallback,
        ratings,
        ratings.user_ratings(user),
        item,
    ))
}

/// `Σ_u Sim(v,u) R_{u,w} / Σ_u |Sim(v,u)|` over the other raters of `item`.
pub fn predict_cf(
    sim: impl Fn(usize) -> f64,
    ratings: &RatingMatrix,
    user: usize,
    item: usize,
    fallback: Fallback,
) -> Prediction {
    let (mut num, mut den) = (0.0, 0.0);
    for &(u, r) in ratings.item_ratings(item) {
        if u == user {
            continue;
        }
        let s = sim(u);
        num += s * r;
        den += s.abs();
    }
    let est = (den > 0.0).then(|| num / den);
    apply_fallback(est, fallback, ratings, ratings.user_ratings(user), item)
}

/// Pearson correlation over co-rated items of two sorted rating lists; 0 with
/// fewer than two co-rated items or no variance.
pub fn pearson(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                xs.push(a[i].1);
                ys.push(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn pearson_similarity(ratings: &RatingMatrix, u: usize, v: usize) -> f64 {
    pearson(ratings.user_ratings(u), ratings.user_ratings(v))
}

/// `m_v + Σ_u Sim(v,u)(R_{u,w} − m_u) / Σ_u |Sim(v,u)|`. `own` holds the
/// target user's visible ratings, from which `m_v` is taken.
pub fn predict_ucf_bias(
    sim: impl Fn(usize) -> f64,
    ratings: &RatingMatrix,
    own: &[(usize, f64)],
    user: usize,
    item: usize,
    fallback: Fallback,
) -> Prediction {
    let est = mean_of(own).and_then(|mv| {
        let (mut num, mut den) = (0.0, 0.0);
        for &(u, r) in ratings.item_ratings(item) {
            if u == user {
                continue;
            }
            let Some(mu) = ratings.user_mean(u) else {
                continue;
            };
            let s = sim(u);
            num += s * (r - mu);
            den += s.abs();
        }
        (den > 0.0).then(|| mv + num / den)
    });
    apply_fallback(est, fallback, ratings, own, item)
}
