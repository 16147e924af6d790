use crate::netir::TensorShape;

/// Dense activation tensor in `[channel][row][col]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data` does not match `shape`.
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Self {
        assert_eq!(shape.numel(), data.len(), "tensor data does not match shape {shape}");
        Self { shape, data }
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: TensorShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: TensorShape::vector(data.len()),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }
}
