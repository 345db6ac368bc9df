//! Dense row-major image planes with an arbitrary number of channels.

use crate::float::Float;

/// `h x w x c` image stored row-major, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    data: Vec<T>,
    h: usize,
    w: usize,
    c: usize,
}

impl<T: Float> Image<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { data: vec![T::zero(); h * w * c], h, w, c }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w * c, "image buffer size mismatch");
        Self { data, h, w, c }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        (row * self.w + col) * self.c
    }

    /// Channel slice at one pixel.
    #[inline]
    pub fn px(&self, row: usize, col: usize) -> &[T] {
        let i = self.idx(row, col);
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn px_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let i = self.idx(row, col);
        &mut self.data[i..i + self.c]
    }

    /// Scalar accessor for single-channel images.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.c, 1);
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: T) {
        debug_assert_eq!(self.c, 1);
        self.data[row * self.w + col] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U: Float>(&self, other: &Image<U>) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Row-disjoint mutable tile views: splits the buffer into horizontal
    /// bands of `rows_per_band` rows for parallel writers.
    pub fn row_bands_mut(&mut self, rows_per_band: usize) -> Vec<&mut [T]> {
        self.data.chunks_mut(rows_per_band * self.w * self.c).collect()
    }
}
