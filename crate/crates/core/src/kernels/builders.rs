use nalgebra::DMatrix;

use super::{KernelLabel, KernelMatrix};
use crate::community::CommunityAssignment;
use crate::dataset::{RatingMask, RatingMatrix, TokenSet};
use crate::error::{Error, Result};
use crate::graph::{IsolatedPolicy, SocialGraph};

/// Eigenvalues below this fraction of the largest are treated as zero when
/// pseudo-inverting the Laplacian.
const PINV_CUTOFF: f64 = 1e-10;

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Random walk with restart from every user: `R = (1−α)(I − αP̃ᵀ)⁻¹`, column
/// `i` holding the stationary visiting distribution of walks restarting at
/// `i`. The kernel compares these impact distributions, `K = RᵀR`.
pub fn impact_distribution_kernel(
    graph: &SocialGraph,
    alpha: f64,
    policy: IsolatedPolicy,
) -> Result<KernelMatrix> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("damping {alpha} must lie in (0, 1)")));
    }
    let n = graph.node_count();
    let p = graph.transition_matrix(policy)?;
    let system = DMatrix::identity(n, n) - p.transpose() * alpha;
    let rhs = DMatrix::identity(n, n) * (1.0 - alpha);
    let lu = system.lu();
    let r = lu.solve(&rhs).ok_or_else(|| {
        let u = lu.u();
        let diag = u.diagonal().map(f64::abs);
        Error::Numerical(format!(
            "random-walk system is singular (|U| diagonal range {:e}..{:e})",
            diag.min(),
            diag.max()
        ))
    })?;
    Ok(KernelMatrix::new(
        KernelLabel::Id,
        symmetrize(r.tr_mul(&r)),
        false,
    ))
}

/// Moore–Penrose pseudo-inverse of the Laplacian, `K = (D − A)⁺`, through a
/// symmetric eigendecomposition.
pub fn commute_time_kernel(graph: &SocialGraph) -> KernelMatrix {
    let n = graph.node_count();
    let eig = graph.laplacian().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_CUTOFF * lmax;
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let inv = if lmax > 0.0 && lambda > cutoff {
            1.0 / lambda
        } else {
            0.0
        };
        scaled.column_mut(k).scale_mut(inv);
    }
    let pinv = if n == 0 {
        DMatrix::zeros(0, 0)
    } else {
        &scaled * eig.eigenvectors.transpose()
    };
    KernelMatrix::new(KernelLabel::Ct, symmetrize(pinv), false)
}

/// 1 for users in the same community, 0 otherwise.
pub fn community_kernel(assignment: &CommunityAssignment, n: usize) -> Result<KernelMatrix> {
    if assignment.labels.len() < n {
        return Err(Error::Reference(format!(
            "community assignment covers {} of {n} users",
            assignment.labels.len()
        )));
    }
    let labels = &assignment.labels;
    let m = DMatrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 });
    Ok(KernelMatrix::new(KernelLabel::Com, m, true))
}

/// Set cosine `|s_i ∩ s_j| / √(|s_i| |s_j|)` over sorted item lists. Users
/// with an empty set get zero off-diagonal entries and a unit diagonal.
fn set_cosine<T: Ord>(sets: &[Vec<T>], label: KernelLabel) -> KernelMatrix {
    let n = sets.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0;
        if sets[i].is_empty() {
            continue;
        }
        for j in (i + 1)..n {
            if sets[j].is_empty() {
                continue;
            }
            let shared = sorted_intersection(&sets[i], &sets[j]);
            if shared > 0 {
                let v = shared as f64 / ((sets[i].len() * sets[j].len()) as f64).sqrt();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    KernelMatrix::new(label, m, true)
}

fn sorted_intersection<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// Token-overlap kernel over per-user token sets (demographic or claim
/// profiles).
pub fn token_overlap(profiles: &[TokenSet], n: usize, label: KernelLabel) -> Result<KernelMatrix> {
    if profiles.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: profiles.len(),
        });
    }
    let sets: Vec<Vec<&String>> = profiles.iter().map(|s| s.iter().collect()).collect();
    Ok(set_cosine(&sets, label))
}

pub fn demographic_kernel(demographics: &[TokenSet], n: usize) -> Result<KernelMatrix> {
    token_overlap(demographics, n, KernelLabel::Dem)
}

pub fn claim_kernel(claims: &[TokenSet], n: usize) -> Result<KernelMatrix> {
    token_overlap(claims, n, KernelLabel::Cla)
}

fn check_users(ratings: &RatingMatrix, n: usize) -> Result<()> {
    if ratings.user_count() != n {
        return Err(Error::Dimension {
            expected: n,
            got: ratings.user_count(),
        });
    }
    Ok(())
}

/// Rated-item overlap `|v_i ∩ v_j| / √(|v_i| |v_j|)`. Masked entries are
/// removed from the histories first.
pub fn action_overlap_kernel(
    ratings: &RatingMatrix,
    n: usize,
    mask: Option<&RatingMask>,
) -> Result<KernelMatrix> {
    check_users(ratings, n)?;
    let sets: Vec<Vec<usize>> = (0..n)
        .map(|u| {
            ratings
                .user_ratings(u)
                .iter()
                .map(|e| e.0)
                .filter(|&i| mask.is_none_or(|m| !m.contains(u, i)))
                .collect()
        })
        .collect();
    Ok(set_cosine(&sets, KernelLabel::Act1))
}

/// Mean rating of every user after masking, with the global mean standing in
/// for users left without ratings.
pub(crate) fn masked_user_means(
    ratings: &RatingMatrix,
    n: usize,
    mask: Option<&RatingMask>,
) -> Vec<f64> {
    let mut sums = vec![(0.0, 0usize); n];
    let (mut total, mut count) = (0.0, 0usize);
    for (u, i, r) in ratings.iter() {
        if mask.is_some_and(|m| m.contains(u, i)) {
            continue;
        }
        sums[u].0 += r;
        sums[u].1 += 1;
        total += r;
        count += 1;
    }
    let global = if count > 0 {
        total / count as f64
    } else {
        0.5 * (crate::dataset::MIN_RATING + crate::dataset::MAX_RATING)
    };
    sums.iter()
        .map(|&(s, c)| if c > 0 { s / c as f64 } else { global })
        .collect()
}

/// RBF on mean ratings, `exp(−(m_i − m_j)² / 2σ²)`.
pub fn rating_bias_kernel(
    ratings: &RatingMatrix,
    n: usize,
    sigma: f64,
    mask: Option<&RatingMask>,
) -> Result<KernelMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("RBF width {sigma} must be positive")));
    }
    check_users(ratings, n)?;
    let means = masked_user_means(ratings, n, mask);
    let denom = 2.0 * sigma * sigma;
    let m = DMatrix::from_fn(n, n, |i, j| {
        let d = means[i] - means[j];
        (-d * d / denom).exp()
    });
    Ok(KernelMatrix::new(KernelLabel::Act2, m, true))
}

pub fn all_ones_kernel(n: usize) -> Result<KernelMatrix> {
    if n == 0 {
        return Err(Error::param("all-ones kernel needs at least one user"));
    }
    Ok(KernelMatrix::new(
        KernelLabel::Ones,
        DMatrix::from_element(n, n, 1.0),
        true,
    ))
}
