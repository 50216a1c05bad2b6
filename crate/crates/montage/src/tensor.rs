//! Dense row-major tensor of f64 values.

/// N-dimensional dense array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length must match shape"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row slice of a (C, H, W) tensor.
    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        let start = (c * h + y) * w;
        &self.data[start..start + w]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        let start = (c * h + y) * w;
        &mut self.data[start..start + w]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_address_chw_layout() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect());
        assert_eq!(t.row(0, 0), &[0.0, 1.0, 2.0]);
        assert_eq!(t.row(1, 1), &[9.0, 10.0, 11.0]);
        assert_eq!(t.at3(1, 0, 2), 8.0);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        Tensor::new(vec![2, 2], vec![0.0; 5]);
    }
}
