/// Boolean attention mask, `rows x cols`, row-major. `true` means attended.
///
/// Columns `[0, cache_len)` address cache slots; the remaining columns
/// address the block itself in layout order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Plain causal mask for a block of `n` tokens after `cache_len` cached
    /// slots: row `i` attends the whole cache and block tokens `0..=i`.
    pub fn causal(cache_len: usize, n: usize) -> Self {
        let mut m = AttentionMask::new(n, cache_len + n);
        for i in 0..n {
            for c in 0..=cache_len + i {
                m.set(i, c, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, attended: bool) {
        self.bits[row * self.cols + col] = attended;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.cols..(row + 1) * self.cols]
    }

    /// Insert `count` columns before column `at`, attended in every row.
    pub fn insert_attended_columns(&mut self, at: usize, count: usize) {
        assert!(at <= self.cols, "insertion point beyond mask width");
        if count == 0 {
            return;
        }
        let new_cols = self.cols + count;
        let mut bits = Vec::with_capacity(self.rows * new_cols);
        for r in 0..self.rows {
            let row = self.row(r);
            bits.extend_from_slice(&row[..at]);
            bits.extend(std::iter::repeat_n(true, count));
            bits.extend_from_slice(&row[at..]);
        }
        self.cols = new_cols;
        self.bits = bits;
    }

    /// Raw row-major bits.
    pub fn as_bits(&self) -> &[bool] {
        &self.bits
    }
}
