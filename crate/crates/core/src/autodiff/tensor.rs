//! Dense 64-bit float payloads for graph nodes.

/// Shape of a node payload. Matrices are row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, Shape::Scalar)
    }
}

/// Dense array of f64 with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: Shape::Vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor { shape: Shape::Matrix(rows, cols), data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Tensor { shape, data: vec![v; shape.len()] }
    }

    /// One-hot vector of length `n` with a 1 at `idx`.
    pub fn one_hot(n: usize, idx: usize) -> Self {
        let mut data = vec![0.0; n];
        data[idx] = 1.0;
        Tensor { shape: Shape::Vector(n), data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar tensor; panics on non-scalar shapes.
    pub fn as_scalar(&self) -> f64 {
        assert!(self.shape.is_scalar(), "as_scalar on {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Matrix element (row, col); panics unless the tensor is a matrix.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        match self.shape {
            Shape::Matrix(_, cols) => self.data[r * cols + c],
            _ => panic!("at2 on {:?}", self.shape),
        }
    }

    /// Row `r` of a matrix as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        match self.shape {
            Shape::Matrix(_, cols) => &self.data[r * cols..(r + 1) * cols],
            _ => panic!("row on {:?}", self.shape),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit-level equality (shape and every f64 bit pattern).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
