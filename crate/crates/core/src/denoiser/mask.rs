use std::ops::Range;

/// Block-diagonal attention mask: position `i` may attend to `j` only when
/// both fall in the same run of `k` consecutive frames. The last block is
/// shorter when `k` does not divide the length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    size: usize,
    k: usize,
    matrix: Vec<u8>,
}

impl SegmentMask {
    pub fn new(size: usize, k: usize) -> Self {
        assert!(size >= 1 && k >= 1, "mask needs positive size and block");
        let mut matrix = vec![0u8; size * size];
        for i in 0..size {
            for j in 0..size {
                matrix[i * size + j] = (i / k == j / k) as u8;
            }
        }
        Self { size, k, matrix }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn blocks(&self) -> usize {
        self.size.div_ceil(self.k)
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.matrix[i * self.size + j] != 0
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.matrix[i * self.size..(i + 1) * self.size]
    }

    /// The contiguous run of keys row `i` may attend to.
    #[inline]
    pub fn block_range(&self, i: usize) -> Range<usize> {
        let start = (i / self.k) * self.k;
        start..(start + self.k).min(self.size)
    }

    pub fn ones(&self) -> usize {
        self.matrix.iter().map(|&v| v as usize).sum()
    }
}

/// Builds the `L x L` segment mask with block size `k`.
pub fn build_mask(len: usize, k: usize) -> SegmentMask {
    SegmentMask::new(len, k)
}
