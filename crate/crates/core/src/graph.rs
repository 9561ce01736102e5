//! Strongly connected components over implicit directed graphs.

/// Component labelling of a directed graph.
#[derive(Debug, Clone)]
pub struct Components {
    /// `component[v]` is the component id of vertex `v`.
    pub component: Vec<usize>,
    /// Number of components.
    pub count: usize,
    /// `closed[c]` is true when no edge leaves component `c`.
    pub closed: Vec<bool>,
}

impl Components {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &c in &self.component {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn closed_ids(&self) -> Vec<usize> {
        (0..self.count).filter(|&c| self.closed[c]).collect()
    }
}

/// Tarjan's algorithm without recursion.
///
/// `successors(v, buf)` must append the out-neighbours of `v` to `buf`.
/// Component ids are assigned in the order components are completed, which
/// is a reverse topological order of the condensation.
pub fn strongly_connected<F>(n: usize, mut successors: F) -> Components
where
    F: FnMut(usize, &mut Vec<usize>),
{
    const UNSEEN: usize = usize::MAX;
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut component = vec![UNSEEN; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut adj: Vec<Vec<usize>> = Vec::new();
    // (vertex, position in its adjacency list)
    let mut call: Vec<(usize, usize)> = Vec::new();
    let mut next_index = 0;
    let mut count = 0;
    let mut buf = Vec::new();

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        call.push((root, 0));
        while let Some(&(v, pos)) = call.last() {
            if pos == 0 && index[v] == UNSEEN {
                index[v] = next_index;
                low[v] = next_index;
                next_index += 1;
                stack.push(v);
                on_stack[v] = true;
                buf.clear();
                successors(v, &mut buf);
                adj.push(std::mem::take(&mut buf));
            }
            let depth = call.len() - 1;
            let edges = &adj[depth];
            if pos < edges.len() {
                let w = edges[pos];
                call[depth].1 += 1;
                if index[w] == UNSEEN {
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            if low[v] == index[v] {
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    component[w] = count;
                    if w == v {
                        break;
                    }
                }
                count += 1;
            }
            call.pop();
            buf = adj.pop().unwrap_or_default();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
        }
    }

    let mut closed = vec![true; count];
    for v in 0..n {
        buf.clear();
        successors(v, &mut buf);
        for &w in &buf {
            if component[w] != component[v] {
                closed[component[v]] = false;
            }
        }
    }
    Components {
        component,
        count,
        closed,
    }
}
