//! Per-patient temporally directed code graph.
//!
//! Nodes are (code, non-empty bucket) pairs; a code recurring over time
//! appears as a distinct node in each bucket. Edges run from every node
//! of one non-empty bucket to every node of the next, so the edge set is
//! a union of complete bipartite blocks and never needs materializing:
//! the graph stores per-bucket node ranges plus the gap between
//! consecutive non-empty buckets, and anything that walks edges iterates
//! bucket pairs. That keeps storage at O(|V|) and message passing at one
//! pass per bucket pair.

use serde::{Deserialize, Serialize};

use crate::bucket::BucketMatrix;

/// One graph node: a code observed in a specific non-empty bucket, with
/// its occurrence count there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub code_id: usize,
    pub bucket: usize,
    pub frequency: u32,
}

/// Temporally directed DAG for one patient.
///
/// `nodes` is sorted by (bucket, code), which makes storage order a
/// topological order; `spans[i]` is the contiguous node-index range of
/// the i-th non-empty bucket; `gaps[i]` is the bucket-index difference
/// between non-empty buckets i and i+1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcdGraph {
    nodes: Vec<GraphNode>,
    spans: Vec<std::ops::Range<usize>>,
    buckets: Vec<usize>,
    gaps: Vec<usize>,
}

/// Exact structural counts used by dataset reports and the complexity
/// counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub n_edges: u64,
    pub n_buckets: usize,
    pub mean_gap: f64,
    pub max_in_degree: usize,
}

impl IcdGraph {
    /// Build the graph from a bucketized matrix. Node order is canonical
    /// (bucket, then code), so equal matrices always build equal graphs.
    pub fn build(matrix: &BucketMatrix) -> Self {
        let mut nodes = Vec::with_capacity(matrix.nnz());
        let mut spans: Vec<std::ops::Range<usize>> = Vec::new();
        let mut buckets: Vec<usize> = Vec::new();
        for (bucket, code_id, frequency) in matrix.iter() {
            if buckets.last() != Some(&bucket) {
                buckets.push(bucket);
                spans.push(nodes.len()..nodes.len());
            }
            nodes.push(GraphNode { code_id, bucket, frequency });
            spans.last_mut().expect("span pushed above").end = nodes.len();
        }
        let gaps = buckets.windows(2).map(|w| w[1] - w[0]).collect();
        Self { nodes, spans, buckets, gaps }
    }

    /// All nodes in canonical (bucket, code) order.
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// Node-index ranges of the non-empty buckets, chronological.
    pub fn spans(&self) -> &[std::ops::Range<usize>] {
        &self.spans
    }

    /// Bucket indices of the non-empty buckets, chronological.
    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    /// Gap (in bucket units) between consecutive non-empty buckets;
    /// `gaps()[i]` separates bucket i from bucket i+1.
    pub fn gaps(&self) -> &[usize] {
        &self.gaps
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Edge count without materializing edges: the sum over consecutive
    /// bucket pairs of the product of their node counts.
    pub fn n_edges(&self) -> u64 {
        self.spans
            .windows(2)
            .map(|w| w[0].len() as u64 * w[1].len() as u64)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Assemble a graph from raw parts, bypassing canonical ordering.
    /// Only for tests that need to permute node order within a bucket.
    #[cfg(test)]
    pub(crate) fn from_parts(
        nodes: Vec<GraphNode>,
        spans: Vec<std::ops::Range<usize>>,
        buckets: Vec<usize>,
        gaps: Vec<usize>,
    ) -> Self {
        Self { nodes, spans, buckets, gaps }
    }

    pub fn stats(&self) -> GraphStats {
        let k = self.spans.len();
        GraphStats {
            n_nodes: self.n_nodes(),
            n_edges: self.n_edges(),
            n_buckets: k,
            mean_gap: if k <= 1 {
                0.0
            } else {
                self.gaps.iter().sum::<usize>() as f64 / self.gaps.len() as f64
            },
            max_in_degree: self
                .spans
                .iter()
                .take(k.saturating_sub(1))
                .map(std::ops::Range::len)
                .max()
                .unwrap_or(0),
        }
    }
}

/// Serializable layout for debugging and interchange. Edges are implied
/// by the bucket structure and never written.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphDump {
    pub version: u32,
    pub tau: i64,
    pub buckets: Vec<BucketDump>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BucketDump {
    pub bucket_index: usize,
    pub nodes: Vec<NodeDump>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodeDump {
    pub code_id: usize,
    pub frequency: u32,
}

impl GraphDump {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn from_graph(graph: &IcdGraph, tau: i64) -> Self {
        Self {
            version: Self::FORMAT_VERSION,
            tau,
            buckets: graph
                .buckets()
                .iter()
                .zip(graph.spans())
                .map(|(&bucket_index, span)| BucketDump {
                    bucket_index,
                    nodes: graph.nodes()[span.clone()]
                        .iter()
                        .map(|n| NodeDump { code_id: n.code_id, frequency: n.frequency })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::bucketize;
    use crate::codec::CodeVocab;
    use crate::cohort::{CohortRecord, Visit};
    use proptest::prelude::*;

    fn vocab() -> CodeVocab {
        CodeVocab::build((0..26).map(|i| format!("{}01", (b'A' + i as u8) as char))).unwrap()
    }

    fn graph_from_days(visits: Vec<(i64, Vec<&str>)>) -> IcdGraph {
        let r = CohortRecord::new(
            "p".into(),
            0,
            1095,
            visits
                .into_iter()
                .map(|(d, codes)| Visit {
                    day_offset: d,
                    codes: codes.into_iter().map(String::from).collect(),
                })
                .collect(),
        )
        .unwrap();
        IcdGraph::build(&bucketize(&r, &vocab(), 7, 1095).unwrap())
    }

    #[test]
    fn bipartite_edges_between_consecutive_buckets() {
        // Bucket 0 holds {A01, B01}; bucket 1 holds {C01}.
        let g = graph_from_days(vec![(0, vec!["A01", "B01"]), (7, vec!["C01"])]);
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.gaps(), &[1]);
    }

    #[test]
    fn single_bucket_has_no_edges() {
        let g = graph_from_days(vec![(0, vec!["A01", "B01", "C01"])]);
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 0);
        assert!(g.gaps().is_empty());
    }

    #[test]
    fn empty_graph() {
        let g = graph_from_days(vec![]);
        assert!(g.is_empty());
        let s = g.stats();
        assert_eq!(s.n_nodes, 0);
        assert_eq!(s.n_edges, 0);
        assert_eq!(s.n_buckets, 0);
        assert_eq!(s.mean_gap, 0.0);
        assert_eq!(s.max_in_degree, 0);
    }

    #[test]
    fn stats_mean_gap() {
        // Buckets 2 and 5: three nodes, gap 3.
        let g = graph_from_days(vec![(15, vec!["A01", "B01"]), (35, vec!["C01"])]);
        assert_eq!(g.buckets(), &[2, 5]);
        let s = g.stats();
        assert_eq!(s.mean_gap, 3.0);
        assert_eq!(s.max_in_degree, 2);
    }

    #[test]
    fn recurring_code_becomes_distinct_nodes() {
        let g = graph_from_days(vec![(0, vec!["A01"]), (7, vec!["A01"]), (14, vec!["A01"])]);
        assert_eq!(g.n_nodes(), 3);
        assert!(g.nodes().iter().all(|n| n.code_id == 0));
        assert_eq!(g.n_edges(), 2);
    }

    prop_compose! {
        fn arb_matrix()(
            cells in proptest::collection::btree_map(
                (0usize..12, 0usize..10),
                1u32..5,
                0..30,
            )
        ) -> BucketMatrix {
            // Recover a matrix through the public path: one visit per
            // (bucket, code) cell repetition under tau = 1.
            let mut visits: Vec<Visit> = Vec::new();
            let mut days: Vec<(i64, Vec<String>)> = Vec::new();
            for ((bucket, code), f) in cells {
                let day = bucket as i64;
                let code = format!("{}01", (b'A' + code as u8) as char);
                match days.iter_mut().find(|(d, _)| *d == day) {
                    Some((_, codes)) => codes.extend(std::iter::repeat(code).take(f as usize)),
                    None => days.push((day, vec![code; f as usize])),
                }
            }
            days.sort_by_key(|(d, _)| *d);
            for (day_offset, codes) in days {
                visits.push(Visit { day_offset, codes });
            }
            let r = CohortRecord::new("p".into(), 0, 1095, visits).unwrap();
            bucketize(&r, &vocab(), 1, 12).unwrap()
        }
    }

    proptest! {
        // Oracle: |V| and |E| recomputed from a dense reconstruction.
        #[test]
        fn counts_match_dense_recomputation(m in arb_matrix()) {
            let g = IcdGraph::build(&m);
            let mut dense = vec![vec![0u32; m.n_buckets()]; m.n_codes()];
            for (b, c, f) in m.iter() {
                dense[c][b] = f;
            }
            let mut bucket_sizes: Vec<usize> = Vec::new();
            for b in 0..m.n_buckets() {
                let size = (0..m.n_codes()).filter(|&c| dense[c][b] > 0).count();
                if size > 0 {
                    bucket_sizes.push(size);
                }
            }
            let n_nodes: usize = bucket_sizes.iter().sum();
            let n_edges: u64 = bucket_sizes.windows(2).map(|w| (w[0] * w[1]) as u64).sum();
            prop_assert_eq!(g.n_nodes(), n_nodes);
            prop_assert_eq!(g.n_nodes(), m.nnz());
            prop_assert_eq!(g.n_edges(), n_edges);
        }

        // Storage order is a topological order: every implied edge goes
        // from a lower span to a higher one, and in-degrees are exactly
        // the size of the predecessor bucket.
        #[test]
        fn topological_and_in_degree(m in arb_matrix()) {
            let g = IcdGraph::build(&m);
            let spans = g.spans();
            for w in spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            // Brute-force in-degree tally over implied edges.
            let mut in_degree = vec![0usize; g.n_nodes()];
            for w in spans.windows(2) {
                for target in w[1].clone() {
                    in_degree[target] += w[0].len();
                }
            }
            if let Some(first) = spans.first() {
                for i in first.clone() {
                    prop_assert_eq!(in_degree[i], 0);
                }
            }
            for (i, w) in spans.windows(2).enumerate() {
                for target in w[1].clone() {
                    prop_assert_eq!(in_degree[target], spans[i].len());
                }
            }
            let brute_max = in_degree.iter().copied().max().unwrap_or(0);
            prop_assert_eq!(g.stats().max_in_degree, brute_max);
        }

        // Gaps are the differences of non-empty bucket indices and are
        // always at least one.
        #[test]
        fn gaps_are_positive_bucket_differences(m in arb_matrix()) {
            let g = IcdGraph::build(&m);
            prop_assert_eq!(g.gaps().len(), g.buckets().len().saturating_sub(1));
            for (i, &gap) in g.gaps().iter().enumerate() {
                prop_assert!(gap >= 1);
                prop_assert_eq!(gap, g.buckets()[i + 1] - g.buckets()[i]);
            }
        }
    }
}
