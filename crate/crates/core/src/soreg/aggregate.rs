//! Threshold aggregation of item gradients.
//!
//! The seller only ever opens the sum of gradients for an item once at least
//! `threshold` distinct users have contributed, so no single user's gradient
//! is revealed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use super::EncryptedGradient;
use crate::error::AggregationError;
use crate::paillier::PublicKey;

/// Accumulates per-item contributions until enough distinct users sent one.
#[derive(Debug, Clone)]
pub struct ThresholdPool<G> {
    threshold: usize,
    pending: BTreeMap<usize, (G, BTreeSet<usize>)>,
}

impl<G> ThresholdPool<G> {
    /// `threshold` must be at least 2.
    pub fn new(threshold: usize) -> Result<Self, AggregationError> {
        if threshold < 2 {
            return Err(AggregationError::Threshold(threshold));
        }
        Ok(ThresholdPool { threshold, pending: BTreeMap::new() })
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Adds `user`'s contribution for `item`. Returns the combined value and the
    /// contributor count once the threshold is reached; the item's pool is then reset.
    pub fn submit<E>(
        &mut self,
        item: usize,
        user: usize,
        g: G,
        combine: impl FnOnce(&mut G, G) -> Result<(), E>,
    ) -> Result<Option<(G, usize)>, E> {
        match self.pending.remove(&item) {
            None => {
                self.pending.insert(item, (g, BTreeSet::from([user])));
            }
            Some((mut acc, mut users)) => {
                combine(&mut acc, g)?;
                users.insert(user);
                self.pending.insert(item, (acc, users));
            }
        }
        let ready = self.pending.get(&item).is_some_and(|(_, users)| users.len() >= self.threshold);
        if ready {
            let (acc, users) = self.pending.remove(&item).expect("present");
            return Ok(Some((acc, users.len())));
        }
        Ok(None)
    }

    /// Items with contributions still waiting for the threshold.
    pub fn pending_items(&self) -> Vec<usize> {
        self.pending.keys().copied().collect()
    }

    /// Distinct contributors currently pooled for `item`.
    pub fn contributors(&self, item: usize) -> usize {
        self.pending.get(&item).map_or(0, |(_, u)| u.len())
    }
}

/// Encrypted gradient aggregation for one seller.
#[derive(Debug, Clone)]
pub struct GradientAggregator {
    pk: PublicKey,
    pool: ThresholdPool<EncryptedGradient>,
}

impl GradientAggregator {
    pub fn new(pk: PublicKey, threshold: usize) -> Result<Self, AggregationError> {
        Ok(GradientAggregator { pk, pool: ThresholdPool::new(threshold)? })
    }

    /// Pools one user's encrypted gradient for `item`. Returns the encrypted
    /// sum once enough distinct users contributed.
    pub fn submit(
        &mut self,
        user: usize,
        item: usize,
        grad: EncryptedGradient,
    ) -> Result<Option<EncryptedGradient>, AggregationError> {
        let pk = &self.pk;
        let out = self.pool.submit(item, user, grad, |acc, g| {
            acc.add_assign(&g, pk).map_err(|_| AggregationError::Mismatch(item))
        })?;
        Ok(out.map(|(g, _)| g))
    }

    pub fn pool(&self) -> &ThresholdPool<EncryptedGradient> {
        &self.pool
    }
}

/// Aggregator shared between concurrently running user sessions.
pub type SharedAggregator = Arc<Mutex<GradientAggregator>>;

/// One user's gradients for a set of items, in the order of `items`.
#[derive(Debug, Clone)]
pub struct Contribution {
    pub user: usize,
    pub items: Vec<usize>,
    pub grads: Vec<EncryptedGradient>,
}

/// Sums contributions that all cover the same items. Returns `None` when
/// fewer than `threshold` distinct users contributed.
pub fn aggregate_item_gradients(
    pk: &PublicKey,
    threshold: usize,
    contributions: &[Contribution],
) -> Result<Option<Vec<EncryptedGradient>>, AggregationError> {
    if threshold < 2 {
        return Err(AggregationError::Threshold(threshold));
    }
    let first = contributions.first().ok_or(AggregationError::Empty)?;
    for c in contributions {
        if c.items != first.items {
            return Err(AggregationError::MixedItems);
        }
        if c.grads.len() != c.items.len() {
            return Err(AggregationError::Mismatch(c.items.first().copied().unwrap_or(0)));
        }
    }
    let users: BTreeSet<usize> = contributions.iter().map(|c| c.user).collect();
    if users.len() < threshold {
        return Ok(None);
    }
    let mut acc = first.grads.clone();
    for c in &contributions[1..] {
        for ((a, g), &item) in acc.iter_mut().zip(&c.grads).zip(&c.items) {
            a.add_assign(g, pk).map_err(|_| AggregationError::Mismatch(item))?;
        }
    }
    Ok(Some(acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn add(a: &mut f64, b: f64) -> Result<(), ()> {
        *a += b;
        Ok(())
    }

    #[test]
    fn releases_at_threshold() {
        let mut p = ThresholdPool::new(2).unwrap();
        assert_eq!(p.submit(7, 1, 1.5, add).unwrap(), None);
        assert_eq!(p.contributors(7), 1);
        assert_eq!(p.submit(7, 2, 2.0, add).unwrap(), Some((3.5, 2)));
        assert!(p.pending_items().is_empty());
    }

    #[test]
    fn repeat_user_is_not_distinct() {
        let mut p = ThresholdPool::new(2).unwrap();
        assert_eq!(p.submit(0, 1, 1.0, add).unwrap(), None);
        assert_eq!(p.submit(0, 1, 1.0, add).unwrap(), None);
        assert_eq!(p.submit(0, 3, 1.0, add).unwrap(), Some((3.0, 2)));
    }

    #[test]
    fn items_are_independent() {
        let mut p = ThresholdPool::new(2).unwrap();
        assert_eq!(p.submit(0, 1, 1.0, add).unwrap(), None);
        assert_eq!(p.submit(1, 2, 1.0, add).unwrap(), None);
        assert_eq!(p.pending_items(), vec![0, 1]);
    }

    #[test]
    fn threshold_below_two_rejected() {
        assert!(ThresholdPool::<f64>::new(1).is_err());
        assert!(ThresholdPool::<f64>::new(0).is_err());
    }
}
