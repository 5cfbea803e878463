use std::collections::HashSet;

use crate::error::{Error, Result};

/// Sparse user × item rating matrix on the 1–10 scale.
///
/// Entries are stored twice, per user (sorted by item) and per item (sorted by
/// user), so both the rating history `v_i` of a user and the raters of an item
/// are cheap to enumerate.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    by_user: Vec<Vec<(usize, f64)>>,
    by_item: Vec<Vec<(usize, f64)>>,
    len: usize,
}

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 10.0;

impl RatingMatrix {
    /// Builds the matrix from `(user, item, rating)` triples. Duplicate
    /// `(user, item)` pairs and ratings outside `[1, 10]` are errors.
    pub fn new(
        n_users: usize,
        n_items: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_item = vec![Vec::new(); n_items];
        let mut len = 0;
        for (u, i, r) in entries {
            if u >= n_users || i >= n_items {
                return Err(Error::Reference(format!(
                    "rating ({u}, {i}) outside a {n_users} x {n_items} matrix"
                )));
            }
            if !(MIN_RATING..=MAX_RATING).contains(&r) {
                return Err(Error::param(format!(
                    "rating {r} for ({u}, {i}) outside [1, 10]"
                )));
            }
            by_user[u].push((i, r));
            by_item[i].push((u, r));
            len += 1;
        }
        for (u, list) in by_user.iter_mut().enumerate() {
            list.sort_by_key(|e| e.0);
            if let Some(w) = list.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::param(format!(
                    "duplicate rating for user {u} on item {}",
                    w[0].0
                )));
            }
        }
        for list in by_item.iter_mut() {
            list.sort_by_key(|e| e.0);
        }
        Ok(RatingMatrix {
            by_user,
            by_item,
            len,
        })
    }

    pub fn user_count(&self) -> usize {
        self.by_user.len()
    }

    pub fn item_count(&self) -> usize {
        self.by_item.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        let list = &self.by_user[user];
        list.binary_search_by_key(&item, |e| e.0)
            .ok()
            .map(|k| list[k].1)
    }

    /// `(item, rating)` pairs of one user, sorted by item.
    pub fn user_ratings(&self, user: usize) -> &[(usize, f64)] {
        &self.by_user[user]
    }

    /// `(user, rating)` pairs of one item, sorted by user.
    pub fn item_ratings(&self, item: usize) -> &[(usize, f64)] {
        &self.by_item[item]
    }

    /// `m_i`, defined only for users with at least one rating.
    pub fn user_mean(&self, user: usize) -> Option<f64> {
        let list = &self.by_user[user];
        if list.is_empty() {
            None
        } else {
            Some(list.iter().map(|e| e.1).sum::<f64>() / list.len() as f64)
        }
    }

    pub fn item_mean(&self, item: usize) -> Option<f64> {
        let list = &self.by_item[item];
        if list.is_empty() {
            None
        } else {
            Some(list.iter().map(|e| e.1).sum::<f64>() / list.len() as f64)
        }
    }

    pub fn global_mean(&self) -> Option<f64> {
        if self.len == 0 {
            return None;
        }
        let sum: f64 = self.by_user.iter().flatten().map(|e| e.1).sum();
        Some(sum / self.len as f64)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.by_user
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().map(move |&(i, r)| (u, i, r)))
    }

    /// Copy with every masked entry removed.
    pub fn without(&self, mask: &RatingMask) -> RatingMatrix {
        let entries = self.iter().filter(|&(u, i, _)| !mask.contains(u, i));
        RatingMatrix::new(self.user_count(), self.item_count(), entries)
            .expect("subset of a valid matrix is valid")
    }
}

/// Set of `(user, item)` entries hidden from a computation. Whole users can be
/// hidden at once.
#[derive(Debug, Clone, Default)]
pub struct RatingMask {
    users: HashSet<usize>,
    pairs: HashSet<(usize, usize)>,
}

impl RatingMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_users(users: impl IntoIterator<Item = usize>) -> Self {
        RatingMask {
            users: users.into_iter().collect(),
            pairs: HashSet::new(),
        }
    }

    pub fn with_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        RatingMask {
            users: HashSet::new(),
            pairs: pairs.into_iter().collect(),
        }
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.users.contains(&user) || self.pairs.contains(&(user, item))
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.pairs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RatingMatrix {
        RatingMatrix::new(3, 3, [(0, 0, 8.0), (0, 2, 6.0), (1, 0, 4.0), (2, 1, 10.0)]).unwrap()
    }

    #[test]
    fn means_and_lookups() {
        let r = sample();
        assert_eq!(r.len(), 4);
        assert_eq!(r.get(0, 2), Some(6.0));
        assert_eq!(r.get(1, 2), None);
        assert_eq!(r.user_mean(0), Some(7.0));
        assert_eq!(r.item_mean(0), Some(6.0));
        assert_eq!(r.global_mean(), Some(7.0));
        assert_eq!(r.item_ratings(0), &[(0, 8.0), (1, 4.0)]);
    }

    #[test]
    fn user_without_ratings_has_no_mean() {
        let r = RatingMatrix::new(2, 1, [(0, 0, 5.0)]).unwrap();
        assert_eq!(r.user_mean(1), None);
        assert!(r.user_ratings(1).is_empty());
    }

    #[test]
    fn rejects_duplicates_and_range() {
        assert!(RatingMatrix::new(1, 1, [(0, 0, 5.0), (0, 0, 6.0)]).is_err());
        assert!(RatingMatrix::new(1, 1, [(0, 0, 11.0)]).is_err());
        assert!(RatingMatrix::new(1, 1, [(0, 0, 0.5)]).is_err());
    }

    #[test]
    fn masking() {
        let r = sample();
        let m = r.without(&RatingMask::with_users([0]));
        assert!(m.user_ratings(0).is_empty());
        assert_eq!(m.len(), 2);
        let m = r.without(&RatingMask::with_pairs([(0, 2)]));
        assert_eq!(m.user_ratings(0), &[(0, 8.0)]);
    }
}
