use super::{NumericsError, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad_enabled: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidArgument {
                op: "tensor",
                reason: format!("shape must be non-empty with positive dims, got {shape:?}"),
            });
        }
        let product: usize = shape.iter().product();
        if product != values.len() {
            return Err(NumericsError::ShapeMismatch {
                product,
                len: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad_enabled: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad_enabled: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    /// Marks this tensor as a leaf whose gradient should be reported.
    pub fn requires_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(NumericsError::LengthMismatch {
                what: "grad",
                got: grad.len(),
                expected: self.values.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Interprets the tensor as a matrix. Vectors are single rows.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::InvalidArgument {
                op: "dims2",
                reason: format!("expected rank 1 or 2, got {other:?}"),
            }),
        }
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("row: matrix tensor");
        &self.values[r * c..(r + 1) * c]
    }
}
