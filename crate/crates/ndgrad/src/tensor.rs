use crate::error::{GradError, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GradError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(GradError::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                actual: delta.len(),
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    /// Number of rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(GradError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copy without gradient state.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Result shape of broadcasting `a` against `b` (numpy rules, aligned on trailing axes).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(GradError::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat output indices to flat input indices under broadcasting.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Input is a single element.
    Scalar,
    /// Input shape is a suffix of the output shape: index = i % len.
    Tile(usize),
    /// Input is `[rows, 1]` against `[rows, cols]`: index = i / cols.
    Column(usize),
    General { out_shape: Vec<usize>, strides: Vec<usize> },
}

impl Broadcast {
    pub(crate) fn plan(input: &[usize], out: &[usize]) -> Self {
        let in_len: usize = input.iter().product();
        let out_len: usize = out.iter().product();
        if input == out || in_len == out_len {
            return Broadcast::Same;
        }
        if in_len == 1 {
            return Broadcast::Scalar;
        }
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if out.ends_with(&trimmed) {
            return Broadcast::Tile(in_len);
        }
        if out.len() == 2 && trimmed.len() == 2 && trimmed[0] == out[0] && trimmed[1] == 1 {
            return Broadcast::Column(out[1]);
        }
        let n = out.len();
        let mut strides = vec![0; n];
        let mut stride = 1;
        for i in (0..n).rev() {
            let k = i as isize - (n as isize - input.len() as isize);
            if k >= 0 {
                let d = input[k as usize];
                if d != 1 {
                    strides[i] = stride;
                }
                stride *= d;
            }
        }
        Broadcast::General {
            out_shape: out.to_vec(),
            strides,
        }
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Tile(len) => i % len,
            Broadcast::Column(cols) => i / cols,
            Broadcast::General { out_shape, strides } => {
                let mut rem = i;
                let mut idx = 0;
                for d in (0..out_shape.len()).rev() {
                    let coord = rem % out_shape[d];
                    rem /= out_shape[d];
                    idx += coord * strides[d];
                }
                idx
            }
        }
    }
}
