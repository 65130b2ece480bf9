//! Bottom-up hierarchical model averaging.
//!
//! Every group mixes its previous GMP with the count-weighted mean of its
//! children: `gmp <- (1 - gamma) * gmp + gamma * sum_i (N_i / N) * gmp_i`.
//! Level-1 groups treat each member agent's current parameters as a child
//! of count 1. Levels are swept in ascending order so each parent sees the
//! freshly updated child GMPs; children are reduced in ascending id order.

use crate::error::{Error, Result};
use crate::hierarchy::{GroupNode, Hierarchy};
use crate::model::ModelParams;

/// One averaging step for a single group.
pub fn update_group_gmp(node: &GroupNode, children: &[(&ModelParams, usize)], gamma: f64) -> Result<ModelParams> {
    let total: usize = children.iter().map(|c| c.1).sum();
    if total != node.member_count {
        return Err(Error::CountMismatch { node: node.id, children: total, node_count: node.member_count });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("gamma", "must lie in [0, 1]"));
    }
    let dim = node.gmp.dim();
    let mut out = node.gmp.clone();
    out.iter_mut().for_each(|v| *v *= 1.0 - gamma);
    for (gmp, count) in children {
        gmp.check_dim(dim)?;
        out.axpy(gamma * (*count as f64 / total as f64), gmp);
    }
    debug_assert!(within_hull(&out, &node.gmp, children), "GMP update left the convex hull at node {}", node.id);
    Ok(out)
}

/// Coordinate-wise bound: every entry lies within the range spanned by the
/// old GMP and the child GMPs (with a few ulps of slack for rounding).
pub fn within_hull(updated: &[f64], old: &[f64], children: &[(&ModelParams, usize)]) -> bool {
    updated.iter().enumerate().all(|(i, &v)| {
        let (mut lo, mut hi) = (old[i], old[i]);
        for (c, _) in children {
            lo = lo.min(c[i]);
            hi = hi.max(c[i]);
        }
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        v >= lo - slack && v <= hi + slack
    })
}

/// Sweeps every level bottom-up, updating each node exactly once.
/// `params[a]` holds agent `a`'s current parameters.
pub fn update_all_levels(h: &mut Hierarchy, params: &[ModelParams], gamma: f64) -> Result<()> {
    for k in 1..=h.num_levels() {
        for id in h.level_nodes(k) {
            let node = h.node(id).expect("listed node");
            let updated = if k == 1 {
                let kids = node
                    .children
                    .iter()
                    .map(|&a| params.get(a).map(|p| (p, 1)).ok_or(Error::UnknownAgent(a)))
                    .collect::<Result<Vec<_>>>()?;
                update_group_gmp(node, &kids, gamma)?
            } else {
                let kids: Vec<(&ModelParams, usize)> = node
                    .children
                    .iter()
                    .map(|c| {
                        let child = h.node(*c).expect("child node");
                        (&child.gmp, child.member_count)
                    })
                    .collect();
                update_group_gmp(node, &kids, gamma)?
            };
            h.node_mut(id).expect("listed node").gmp = updated;
        }
    }
    Ok(())
}
