use super::NnError;

/// Square visibility matrix: `get(i, j)` is true when query token `i` may
/// attend to key token `j`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BoolMask {
    n: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn new(n: usize) -> Self {
        Self { n, bits: vec![false; n * n] }
    }

    pub fn full(n: usize) -> Self {
        Self { n, bits: vec![true; n * n] }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::new(n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every bit set in `other` is also set in `self`.
    pub fn contains(&self, other: &BoolMask) -> bool {
        self.n == other.n && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// Every query row must see at least one key.
    pub fn validate(&self) -> Result<(), NnError> {
        for i in 0..self.n {
            if !self.row(i).iter().any(|&b| b) {
                return Err(NnError::EmptyMaskRow { row: i });
            }
        }
        Ok(())
    }

    /// Rows for a subset of tokens, keeping their relative order.
    pub fn restrict(&self, keep: &[usize]) -> BoolMask {
        let mut m = BoolMask::new(keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                m.set(a, b, self.get(i, j));
            }
        }
        m
    }
}
