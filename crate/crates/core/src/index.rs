//! BK-tree over perceptual hashes for Hamming range queries.

use alloc::vec::Vec;

use crate::phash::{hamming, PerceptualHash};

#[derive(Debug, Clone)]
struct Node<T> {
    hash: PerceptualHash,
    item: T,
    /// (distance to this node, child node index)
    children: Vec<(u32, usize)>,
}

/// Metric tree keyed by Hamming distance.
///
/// Inserts take `&mut self`; a built tree can be queried from many threads.
#[derive(Debug, Clone)]
pub struct BkTree<T> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for BkTree<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<T> BkTree<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn insert(&mut self, hash: PerceptualHash, item: T) {
        let new_index = self.nodes.len();
        if self.nodes.is_empty() {
            self.nodes.push(Node {
                hash,
                item,
                children: Vec::new(),
            });
            return;
        }
        let mut current = 0;
        loop {
            let d = hamming(self.nodes[current].hash, hash);
            match self.nodes[current].children.iter().find(|(cd, _)| *cd == d) {
                Some(&(_, child)) => current = child,
                None => {
                    self.nodes[current].children.push((d, new_index));
                    break;
                }
            }
        }
        self.nodes.push(Node {
            hash,
            item,
            children: Vec::new(),
        });
    }

    /// Every stored item within `radius` of `hash`, with its distance.
    pub fn within(&self, hash: PerceptualHash, radius: u32) -> Vec<(&T, u32)> {
        let mut found = Vec::new();
        if self.nodes.is_empty() {
            return found;
        }
        let mut stack = alloc::vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            let d = hamming(node.hash, hash);
            if d <= radius {
                found.push((&node.item, d));
            }
            let lo = d.saturating_sub(radius);
            let hi = d + radius;
            stack.extend(
                node.children
                    .iter()
                    .filter(|(cd, _)| *cd >= lo && *cd <= hi)
                    .map(|(_, c)| *c),
            );
        }
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn range_query_matches_linear_scan(
            hashes in proptest::collection::vec(any::<u64>(), 0..200),
            flips in proptest::collection::vec(0u32..64, 0..200),
            query in any::<u64>(),
            radius in 0u32..20,
        ) {
            // Mix in near neighbours of the query so small radii return something.
            let mut all: Vec<u64> = hashes.clone();
            all.extend(flips.iter().map(|b| query ^ (1u64 << b) ^ (1u64 << ((b * 7) % 64))));
            let mut tree = BkTree::new();
            for (i, h) in all.iter().enumerate() {
                tree.insert(PerceptualHash(*h), i);
            }
            let mut got: Vec<usize> = tree.within(PerceptualHash(query), radius).into_iter().map(|(i, _)| *i).collect();
            got.sort_unstable();
            let want: Vec<usize> = all
                .iter()
                .enumerate()
                .filter(|(_, h)| (*h ^ query).count_ones() <= radius)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn duplicates_are_all_returned() {
        let mut tree = BkTree::new();
        for i in 0..5 {
            tree.insert(PerceptualHash(42), i);
        }
        assert_eq!(tree.within(PerceptualHash(42), 0).len(), 5);
        assert!(tree.within(PerceptualHash(43), 0).is_empty());
    }
}
