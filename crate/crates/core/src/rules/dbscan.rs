//! Density clustering with a pinned visiting order.

use super::euclidean_distance_unchecked as dist;

/// Cluster id per point, or `None` for noise.
pub type Assignment = Vec<Option<usize>>;

/// DBSCAN over `points`.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// strictly closer than `eps`. Points are visited in index order; a border point
/// reachable from several clusters joins the first one discovered.
pub fn dbscan(points: &[&[f64]], eps: f64, min_pts: usize) -> Assignment {
    let n = points.len();
    let neighbours = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist(points[i], points[j]) < eps).collect() };

    let mut assignment: Assignment = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbours(i);
        if seeds.len() < min_pts {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        assignment[i] = Some(cluster);
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(j) = queue.pop_front() {
            if assignment[j].is_none() {
                assignment[j] = Some(cluster);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb = neighbours(j);
            if nb.len() >= min_pts {
                queue.extend(nb.into_iter().filter(|&q| !visited[q] || assignment[q].is_none()));
            }
        }
    }
    assignment
}

/// Median over all points of the distance to the `min_pts`-th nearest
/// neighbour (the point itself counted as the first).
pub fn auto_eps(points: &[&[f64]], min_pts: usize) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let k = min_pts.clamp(1, n) - 1;
    let mut kd: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).map(|j| dist(points[i], points[j])).collect();
            d.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
            d[k]
        })
        .collect();
    kd.sort_by(f64::total_cmp);
    super::percentile(&kd, 50.0)
}
