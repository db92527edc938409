use super::stats::{class_histogram, long_tailedness_ratio};
use super::LabeledGraph;
use crate::error::{Error, Result};

const TOLERANCE: f64 = 1e-9;

/// Removes nodes from the tail classes until `Ratio_LT(p) <= target_ratio`.
///
/// Classes are ranked by size; the top 20% (at least one) are kept intact.
/// Each round removes one node from every tail class that still holds more
/// than one node, picking the lowest current degree (ties to the lower id).
/// Incident edges go with the node. Masks are dropped.
pub fn downsample_classes(g: &LabeledGraph, target_ratio: f64, p: f64) -> Result<LabeledGraph> {
    let hist = class_histogram(g, None)?;
    let mut ratio = long_tailedness_ratio(&hist, p)?;
    if ratio <= target_ratio + TOLERANCE {
        return Ok(g.clone().set_masks_unchecked(None));
    }

    let t = hist.num_classes();
    let head = ((t as f64 * 0.2).round() as usize).max(1);
    let tail: Vec<usize> = hist.classes()[head..].to_vec();

    let neighbors = g.neighbors();
    let mut degree: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let mut alive = vec![true; g.num_nodes()];
    let mut per_class = vec![0usize; g.num_classes()];
    let mut members = vec![Vec::new(); g.num_classes()];
    for (i, l) in g.labels().iter().enumerate() {
        if let Some(c) = *l {
            per_class[c] += 1;
            members[c].push(i);
        }
    }

    while ratio > target_ratio + TOLERANCE {
        let mut removed_any = false;
        for &c in &tail {
            if per_class[c] <= 1 {
                continue;
            }
            let victim = members[c]
                .iter()
                .copied()
                .filter(|&v| alive[v])
                .min_by_key(|&v| (degree[v], v))
                .expect("class has live members");
            alive[victim] = false;
            per_class[c] -= 1;
            for &u in &neighbors[victim] {
                if alive[u] {
                    degree[u] -= 1;
                }
            }
            removed_any = true;
        }
        if !removed_any {
            return Err(Error::UnreachableTarget {
                target: target_ratio,
                best: ratio,
            });
        }
        let h = super::ClassHistogram::from_counts(&per_class)?;
        ratio = long_tailedness_ratio(&h, p)?;
    }
    g.retain_nodes(&alive)
}
