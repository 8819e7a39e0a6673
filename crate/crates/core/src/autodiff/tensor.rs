/// Channel count plus spatial extent: `[c, nx, ny, nz]`.
pub type Shape4 = [usize; 4];

pub const SCALAR: Shape4 = [1, 1, 1, 1];

/// Dense channel-major grid. Each channel is laid out x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape4,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor {
            shape,
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: SCALAR,
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        spatial(self.shape)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = voxels(self.shape);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = voxels(self.shape);
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == SCALAR
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn numel(shape: Shape4) -> usize {
    shape.iter().product()
}

pub fn voxels(shape: Shape4) -> usize {
    shape[1] * shape[2] * shape[3]
}

pub fn spatial(shape: Shape4) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

/// Sum in a fixed pairwise tree order, independent of how the caller
/// chunks the work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for &v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
