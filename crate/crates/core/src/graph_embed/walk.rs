use rand::Rng;

use crate::knowledge::KnowledgeGraph;

/// Truncated uniform random walk of at most `length` vertices.
///
/// Stops early when the current vertex has no neighbors.
pub fn random_walk<R: Rng + ?Sized>(g: &KnowledgeGraph, start: usize, length: usize, rng: &mut R) -> Vec<usize> {
    let mut walk = Vec::with_capacity(length);
    if length == 0 {
        return walk;
    }
    walk.push(start);
    let mut current = start;
    while walk.len() < length {
        let nbrs = g.neighbors(current);
        if nbrs.is_empty() {
            break;
        }
        current = nbrs[rng.gen_range(0..nbrs.len())];
        walk.push(current);
    }
    walk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            (0..n).map(|i| format!("v{i}")).collect(),
            edges.iter().map(|&(a, b)| (a, b, "is/adjacent/to".to_string())).collect(),
            &[0],
        )
        .unwrap()
    }

    #[test]
    fn isolated_vertex_walk_is_singleton() {
        let g = graph(2, &[]);
        assert_eq!(random_walk(&g, 0, 5, &mut rng::stream(0, &[])), vec![0]);
    }

    #[test]
    fn path_graph_walk_is_forced() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(random_walk(&g, 0, 3, &mut rng::stream(0, &[])), vec![0, 1, 0]);
    }

    #[test]
    fn triangle_neighbors_are_uniform() {
        // Chi-square over transitions out of every vertex, 1 dof per vertex.
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)]);
        let mut counts = [[0u64; 3]; 3];
        let mut r = rng::stream(42, &[]);
        for _ in 0..10_000 {
            let w = random_walk(&g, 0, 100, &mut r);
            assert_eq!(w.len(), 100);
            for p in w.windows(2) {
                counts[p[0]][p[1]] += 1;
            }
        }
        for (v, row) in counts.iter().enumerate() {
            assert_eq!(row[v], 0);
            let total = (row.iter().sum::<u64>()) as f64;
            for (u, &c) in row.iter().enumerate() {
                if u != v {
                    let frac = c as f64 / total;
                    assert!((frac - 0.5).abs() < 0.02, "{v}->{u}: {frac}");
                }
            }
            let expected = total / 2.0;
            let chi2: f64 = row
                .iter()
                .enumerate()
                .filter(|&(u, _)| u != v)
                .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
                .sum();
            // 99.9th percentile of chi-square with 1 dof.
            assert!(chi2 < 10.83, "chi2 {chi2}");
        }
    }
}
