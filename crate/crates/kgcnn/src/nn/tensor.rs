use crate::error::{Error, Result};

/// N x H x W x C activation tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor4 { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_data(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::shape(format!(
                "tensor data length {} != {n}x{h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        (self.n, self.h, self.w, self.c) == (other.n, other.h, other.w, other.c)
    }
}
