//! Compressed sparse row storage for stochastic matrices.

/// Row-major sparse matrix: row `r` owns `targets[offsets[r]..offsets[r+1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    probs: Vec<f64>,
}

impl SparseRows {
    /// Concatenates already-merged rows.
    pub fn from_rows<I>(rows: I) -> Self
    where
        I: IntoIterator<Item = Vec<(u32, f64)>>,
    {
        let mut out = SparseRows {
            offsets: vec![0],
            targets: Vec::new(),
            probs: Vec::new(),
        };
        for row in rows {
            out.push_row(&row);
        }
        out
    }

    pub(crate) fn with_capacity(rows: usize, nnz: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        SparseRows {
            offsets,
            targets: Vec::with_capacity(nnz),
            probs: Vec::with_capacity(nnz),
        }
    }

    pub(crate) fn push_row(&mut self, row: &[(u32, f64)]) {
        for &(t, p) in row {
            self.targets.push(t);
            self.probs.push(p);
        }
        self.offsets.push(self.targets.len());
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        (&self.targets[lo..hi], &self.probs[lo..hi])
    }

    /// `sum_j P[r, j] * v[j]`.
    #[inline]
    pub fn dot(&self, r: usize, v: &[f64]) -> f64 {
        let (t, p) = self.row(r);
        t.iter().zip(p).map(|(&j, &pj)| pj * v[j as usize]).sum()
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    /// Transpose, assuming `cols` columns. Entries within a row stay in row order.
    pub fn transpose(&self, cols: usize) -> SparseRows {
        let mut counts = vec![0usize; cols + 1];
        for &t in &self.targets {
            counts[t as usize + 1] += 1;
        }
        for j in 0..cols {
            counts[j + 1] += counts[j];
        }
        let offsets = counts.clone();
        let mut next = counts;
        let mut targets = vec![0u32; self.nnz()];
        let mut probs = vec![0.0; self.nnz()];
        for r in 0..self.num_rows() {
            let (t, p) = self.row(r);
            for (&j, &pj) in t.iter().zip(p) {
                let slot = next[j as usize];
                targets[slot] = r as u32;
                probs[slot] = pj;
                next[j as usize] += 1;
            }
        }
        SparseRows {
            offsets,
            targets,
            probs,
        }
    }
}

/// Sorts `(target, prob)` pairs by target and sums duplicates in place.
///
/// The sort is stable, so for equal targets the summation order is the input order.
pub fn merge_duplicates(entries: &mut Vec<(u32, f64)>) {
    entries.sort_by_key(|e| e.0);
    let mut w = 0;
    for r in 0..entries.len() {
        if w > 0 && entries[w - 1].0 == entries[r].0 {
            entries[w - 1].1 += entries[r].1;
        } else {
            entries[w] = entries[r];
            w += 1;
        }
    }
    entries.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_sums_in_input_order() {
        let mut e = vec![(3, 0.25), (1, 0.5), (3, 0.125), (1, 0.125)];
        merge_duplicates(&mut e);
        assert_eq!(e, vec![(1, 0.625), (3, 0.375)]);
    }

    #[test]
    fn transpose_roundtrip() {
        let m = SparseRows::from_rows(vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(0, 0.2), (1, 0.8)]]);
        let t = m.transpose(3);
        assert_eq!(t.row(0), (&[0u32, 2][..], &[0.5, 0.2][..]));
        assert_eq!(t.transpose(3), m);
        assert_eq!(m.dot(2, &[1.0, 2.0, 3.0]), 0.2 + 1.6);
    }
}
