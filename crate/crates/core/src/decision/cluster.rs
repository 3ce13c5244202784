use crate::model::{Cluster, ClusterPartition};

/// Largest `(max - min) / min` a cluster may span.
pub const DEFAULT_CLUSTER_SPREAD: f64 = 0.20;

/// Agglomerative complete-linkage clustering of workers by predicted
/// iteration time. Merging stops once every candidate merge would produce a
/// cluster whose relative spread exceeds `max_spread`. Clusters come back
/// ordered by ascending max time, members ascending by worker id.
pub fn cluster_by_time(times: &[f64], max_spread: f64) -> ClusterPartition {
    // Each working cluster is (members, min time, max time).
    let mut groups: Vec<(Vec<usize>, f64, f64)> = times.iter().enumerate().map(|(i, &t)| (vec![i], t, t)).collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let lo = groups[a].1.min(groups[b].1);
                let hi = groups[a].2.max(groups[b].2);
                if !within(lo, hi, max_spread) {
                    continue;
                }
                // complete linkage in one dimension is the span of the union
                let dist = hi - lo;
                if best.is_none_or(|(d, _, _)| dist < d) {
                    best = Some((dist, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let (members, lo, hi) = groups.remove(b);
        let g = &mut groups[a];
        g.0.extend(members);
        g.1 = g.1.min(lo);
        g.2 = g.2.max(hi);
    }

    let mut clusters: Vec<Cluster> = groups
        .into_iter()
        .map(|(mut workers, _, max_time)| {
            workers.sort_unstable();
            Cluster { workers, max_time }
        })
        .collect();
    clusters.sort_by(|x, y| x.max_time.total_cmp(&y.max_time).then(x.workers[0].cmp(&y.workers[0])));
    ClusterPartition { clusters }
}

fn within(lo: f64, hi: f64, max_spread: f64) -> bool {
    if hi == lo {
        return true;
    }
    lo > 0.0 && (hi - lo) / lo <= max_spread
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let p = cluster_by_time(&[1.0, 1.05, 1.1], DEFAULT_CLUSTER_SPREAD);
        assert_eq!(p.clusters.len(), 1);
        assert_eq!(p.clusters[0].workers, vec![0, 1, 2]);
        assert_eq!(p.clusters[0].max_time, 1.1);

        let p = cluster_by_time(&[1.0, 1.0, 5.0], DEFAULT_CLUSTER_SPREAD);
        assert_eq!(p.clusters.len(), 2);
        assert_eq!(p.clusters[0].workers, vec![0, 1]);
        assert_eq!(p.clusters[1].workers, vec![2]);

        let p = cluster_by_time(&[1.0], DEFAULT_CLUSTER_SPREAD);
        assert_eq!(p.clusters.len(), 1);
        assert_eq!(p.clusters[0].workers, vec![0]);
    }

    #[test]
    fn closest_pair_merges_first() {
        // 1.0 and 1.19 fit together, but 1.19 pairs with 1.3 more tightly and
        // the three cannot share a cluster.
        let p = cluster_by_time(&[1.0, 1.19, 1.3], DEFAULT_CLUSTER_SPREAD);
        assert_eq!(p.clusters.len(), 2);
        assert_eq!(p.clusters[0].workers, vec![0]);
        assert_eq!(p.clusters[1].workers, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn output_is_an_ordered_bounded_partition(times in prop::collection::vec(0.05f64..20.0, 1..24)) {
            let p = cluster_by_time(&times, DEFAULT_CLUSTER_SPREAD);
            p.check(times.len()).unwrap();
            for c in &p.clusters {
                let lo = c.workers.iter().map(|&w| times[w]).fold(f64::INFINITY, f64::min);
                let hi = c.workers.iter().map(|&w| times[w]).fold(0.0, f64::max);
                prop_assert_eq!(hi, c.max_time);
                prop_assert!((hi - lo) / lo <= DEFAULT_CLUSTER_SPREAD);
            }
            // no two clusters could still merge
            for (i, a) in p.clusters.iter().enumerate() {
                for b in &p.clusters[i + 1..] {
                    let all: Vec<f64> = a.workers.iter().chain(&b.workers).map(|&w| times[w]).collect();
                    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = all.iter().cloned().fold(0.0, f64::max);
                    prop_assert!((hi - lo) / lo > DEFAULT_CLUSTER_SPREAD);
                }
            }
        }
    }
}
