//! Average-linkage (UPGMA) agglomerative clustering and dendrogram cuts.

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Full merge sequence over `points`. Leaves are clusters `0..n`; the i-th
/// merge creates cluster `n + i`. Equal distances merge the lexicographically
/// smallest `(low id, high id)` pair first.
pub(crate) fn average_linkage(dist: &[Vec<f64>]) -> Vec<Merge> {
    let n = dist.len();
    // active cluster id -> (size, row of distances keyed by active index)
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut next = n;
    while ids.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let (lo, hi) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                let cand = (d[i][j], lo, hi, i, j);
                let better = match best {
                    None => true,
                    Some(b) => (cand.0, cand.1, cand.2) < (b.0, b.1, b.2),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (height, lo, hi, i, j) = best.expect("at least two clusters");
        merges.push(Merge { a: lo, b: hi, height });
        let (si, sj) = (sizes[i] as f64, sizes[j] as f64);
        // fold j into i, then drop j
        for k in 0..ids.len() {
            if k != i && k != j {
                let v = (si * d[i][k] + sj * d[j][k]) / (si + sj);
                d[i][k] = v;
                d[k][i] = v;
            }
        }
        ids[i] = next;
        sizes[i] += sizes[j];
        next += 1;
        ids.remove(j);
        sizes.remove(j);
        d.remove(j);
        for row in d.iter_mut() {
            row.remove(j);
        }
    }
    merges
}

/// Partition labels after applying every merge with `height <= threshold`.
/// Labels are dense and numbered in order of each group's smallest leaf.
pub(crate) fn cut(merges: &[Merge], n: usize, threshold: f64) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n + merges.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, m) in merges.iter().enumerate() {
        if m.height <= threshold {
            let node = n + i;
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = node;
            parent[rb] = node;
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut root_label = std::collections::HashMap::new();
    for leaf in 0..n {
        let r = find(&mut parent, leaf);
        let next = root_label.len();
        labels[leaf] = *root_label.entry(r).or_insert(next);
    }
    labels
}
