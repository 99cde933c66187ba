//! Level-wise Apriori frequent-itemset mining.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrequentItemset<T> {
    /// Sorted, distinct items.
    pub items: Vec<T>,
    /// Indices of the transactions containing every item.
    pub transactions: Vec<usize>,
}

impl<T> FrequentItemset<T> {
    pub fn support(&self) -> usize {
        self.transactions.len()
    }
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Every itemset with support >= `min_support` (and at most `max_len` items, if
/// given), ordered by size and then lexicographically.
///
/// Candidates of size k+1 join two frequent k-sets sharing their first k-1
/// items and are pruned unless every k-subset is frequent; support is counted
/// by intersecting transaction-id lists.
pub fn apriori<T: Ord + Clone>(
    transactions: &[BTreeSet<T>],
    min_support: usize,
    max_len: Option<usize>,
) -> Vec<FrequentItemset<T>> {
    let min_support = min_support.max(1);
    let max_len = max_len.unwrap_or(usize::MAX);
    if max_len == 0 {
        return Vec::new();
    }
    let mut tids: BTreeMap<&T, Vec<usize>> = BTreeMap::new();
    for (t, items) in transactions.iter().enumerate() {
        for item in items {
            tids.entry(item).or_default().push(t);
        }
    }
    let mut level: Vec<FrequentItemset<T>> = tids
        .into_iter()
        .filter(|(_, t)| t.len() >= min_support)
        .map(|(item, t)| FrequentItemset {
            items: vec![item.clone()],
            transactions: t,
        })
        .collect();
    let mut out = Vec::new();
    let mut k = 1;
    while !level.is_empty() {
        let frequent: BTreeSet<&[T]> = level.iter().map(|s| s.items.as_slice()).collect();
        let mut next = Vec::new();
        if k < max_len {
            for i in 0..level.len() {
                for j in i + 1..level.len() {
                    let (a, b) = (&level[i].items, &level[j].items);
                    if a[..k - 1] != b[..k - 1] {
                        // Level is sorted, so no later j shares a's prefix.
                        break;
                    }
                    let mut cand = a.clone();
                    cand.push(b[k - 1].clone());
                    let all_subsets_frequent = (0..cand.len() - 2).all(|drop| {
                        let sub: Vec<T> = cand
                            .iter()
                            .enumerate()
                            .filter(|(x, _)| *x != drop)
                            .map(|(_, v)| v.clone())
                            .collect();
                        frequent.contains(sub.as_slice())
                    });
                    if !all_subsets_frequent {
                        continue;
                    }
                    let t = intersect(&level[i].transactions, &level[j].transactions);
                    if t.len() >= min_support {
                        next.push(FrequentItemset {
                            items: cand,
                            transactions: t,
                        });
                    }
                }
            }
        }
        out.append(&mut level);
        level = next;
        k += 1;
    }
    out
}
