use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::GraphEmbedError;

/// Binary coding tree over the vertices for hierarchical softmax.
///
/// Internal nodes are numbered in creation order, so the root is always
/// `leaf_count - 2`. Each leaf stores its root-to-leaf path of internal nodes
/// and the branch taken at each one (`false` = left, `true` = right).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTree {
    codes: Vec<Vec<bool>>,
    paths: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeRef {
    Leaf(usize),
    Inner(usize),
}

impl HuffmanTree {
    /// Standard Huffman construction. Equal weights are broken by creation
    /// order: leaves by vertex index, then internal nodes as they are made.
    pub fn build(weights: &[u64]) -> Result<Self, GraphEmbedError> {
        let n = weights.len();
        if n < 2 {
            return Err(GraphEmbedError::TooFewVertices(n));
        }
        // (weight, tie-break order, node)
        let mut heap: BinaryHeap<Reverse<(u64, usize, usize)>> = weights.iter().enumerate().map(|(i, &w)| Reverse((w, i, i))).collect();
        // children[k] = (left, right) of internal node k
        let mut children: Vec<(NodeRef, NodeRef)> = Vec::with_capacity(n - 1);
        let as_ref = |id: usize| if id < n { NodeRef::Leaf(id) } else { NodeRef::Inner(id - n) };
        while heap.len() > 1 {
            let Reverse((w1, _, a)) = heap.pop().expect("len > 1");
            let Reverse((w2, _, b)) = heap.pop().expect("len > 1");
            let id = n + children.len();
            children.push((as_ref(a), as_ref(b)));
            heap.push(Reverse((w1 + w2, id, id)));
        }
        let mut codes = vec![Vec::new(); n];
        let mut paths = vec![Vec::new(); n];
        let root = n - 2;
        let mut stack = vec![(root, Vec::<usize>::new(), Vec::<bool>::new())];
        while let Some((node, path, code)) = stack.pop() {
            let (left, right) = children[node];
            for (child, bit) in [(left, false), (right, true)] {
                let mut p = path.clone();
                p.push(node);
                let mut c = code.clone();
                c.push(bit);
                match child {
                    NodeRef::Leaf(v) => {
                        codes[v] = c;
                        paths[v] = p;
                    }
                    NodeRef::Inner(k) => stack.push((k, p, c)),
                }
            }
        }
        Ok(Self { codes, paths })
    }

    pub fn leaf_count(&self) -> usize {
        self.codes.len()
    }

    pub fn inner_count(&self) -> usize {
        self.codes.len() - 1
    }

    pub fn code(&self, leaf: usize) -> &[bool] {
        &self.codes[leaf]
    }

    pub fn path(&self, leaf: usize) -> &[usize] {
        &self.paths[leaf]
    }

    /// Same tree with leaf `v` moved to `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let n = self.leaf_count();
        let mut codes = vec![Vec::new(); n];
        let mut paths = vec![Vec::new(); n];
        for v in 0..n {
            codes[perm[v]] = self.codes[v].clone();
            paths[perm[v]] = self.paths[v].clone();
        }
        Self { codes, paths }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn too_few_vertices() {
        assert_eq!(HuffmanTree::build(&[3]), Err(GraphEmbedError::TooFewVertices(1)));
    }

    #[test]
    fn balanced_for_equal_weights() {
        let t = HuffmanTree::build(&[1, 1, 1, 1]).unwrap();
        for v in 0..4 {
            assert_eq!(t.code(v).len(), 2);
        }
    }

    #[test]
    fn heavy_leaf_gets_shortest_code() {
        let t = HuffmanTree::build(&[8, 1, 1, 1]).unwrap();
        let lens: Vec<usize> = (0..4).map(|v| t.code(v).len()).collect();
        assert_eq!(lens[0], 1);
        assert!(lens[1..].iter().all(|&l| l > 1));
    }

    #[test]
    fn two_leaves_share_root() {
        let t = HuffmanTree::build(&[5, 5]).unwrap();
        assert_eq!(t.path(0), &[0]);
        assert_eq!(t.path(1), &[0]);
        assert_ne!(t.code(0), t.code(1));
    }

    proptest! {
        #[test]
        fn prefix_free_and_kraft(weights in proptest::collection::vec(1u64..50, 2..40)) {
            let t = HuffmanTree::build(&weights).unwrap();
            let n = weights.len();
            prop_assert_eq!(t.inner_count(), n - 1);
            let mut kraft = 0.0;
            for v in 0..n {
                prop_assert_eq!(t.code(v).len(), t.path(v).len());
                prop_assert_eq!(t.path(v)[0], n - 2);
                kraft += 0.5f64.powi(t.code(v).len() as i32);
                for u in 0..n {
                    if u != v {
                        let (a, b) = (t.code(v), t.code(u));
                        prop_assert!(!(a.len() <= b.len() && &b[..a.len()] == a));
                    }
                }
            }
            // A full binary tree meets Kraft with equality.
            prop_assert!(kraft <= 1.0 + 1e-12);
            prop_assert!((kraft - 1.0).abs() < 1e-12);
        }
    }
}
