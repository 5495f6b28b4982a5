use super::Graph;

/// Directed message index over a [`Graph`], optionally with self-loops.
///
/// Entry `e` carries a message from `source(e) = j` to `target(e) = i`.
/// Entries are grouped by target and sorted by source within each group, so
/// the self-loop `(i, i)` sits at its sorted position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    num_nodes: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    self_loops: bool,
}

impl Adjacency {
    pub fn new(graph: &Graph, self_loops: bool) -> Self {
        let v = graph.num_nodes();
        let mut offsets = Vec::with_capacity(v + 1);
        let mut sources = Vec::with_capacity(graph.num_directed() + if self_loops { v } else { 0 });
        let mut targets = Vec::with_capacity(sources.capacity());
        offsets.push(0);
        for i in 0..v {
            let mut placed = !self_loops;
            for &j in graph.neighbors(i) {
                if !placed && j > i {
                    sources.push(i);
                    targets.push(i);
                    placed = true;
                }
                sources.push(j);
                targets.push(i);
            }
            if !placed {
                sources.push(i);
                targets.push(i);
            }
            offsets.push(sources.len());
        }
        Adjacency { num_nodes: v, offsets, sources, targets, self_loops }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_entries(&self) -> usize {
        self.sources.len()
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    /// Entry range whose target is `i`.
    #[inline]
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn source(&self, e: usize) -> usize {
        self.sources[e]
    }

    #[inline]
    pub fn target(&self, e: usize) -> usize {
        self.targets[e]
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Size of the aggregation set of node `i`.
    pub fn group_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::path_graph;

    #[test]
    fn self_loops_sorted_in_place() {
        let g = path_graph(3).unwrap();
        let a = Adjacency::new(&g, true);
        assert_eq!(a.num_entries(), 7);
        let row1: Vec<_> = a.range(1).map(|e| a.source(e)).collect();
        assert_eq!(row1, vec![0, 1, 2]);
        let row2: Vec<_> = a.range(2).map(|e| a.source(e)).collect();
        assert_eq!(row2, vec![1, 2]);
        let plain = Adjacency::new(&g, false);
        assert_eq!(plain.num_entries(), 4);
        assert!(plain.range(1).all(|e| plain.target(e) == 1));
    }
}
