//! Dense-network numerical kernel.
//!
//! [`Tensor`] is a row-major `f64` array. The free functions in this module
//! ([`dense_forward`], [`relu`], [`gru_forward`], [`sum_pool`]) evaluate single
//! vectors directly; [`tape::Tape`] evaluates batched rows while recording the
//! operations needed for reverse-mode gradients.

pub mod adam;
pub mod checkpoint;
pub mod init;
mod kernels;
pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use init::{glorot_uniform, init_dense, init_gru};
pub use tape::{Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", format!("row of length {} in a {cols}-column matrix", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)`; a vector is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [] => (1, 1),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Affine layer `y = W x + b` with `W` stored as `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Tensor::zeros(&[output, input]), b: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.dims2().1
    }

    pub fn output_dim(&self) -> usize {
        self.w.dims2().0
    }
}

/// GRU cell; `w_*` act on the input (`hidden x in`), `u_*` on the previous state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, input]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Self { w_z: w(), w_r: w(), w_h: w(), u_z: u(), u_r: u(), u_h: u(), b_z: b(), b_r: b(), b_h: b() }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.dims2().1
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.dims2().0
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64], op: &'static str) -> Result<Vec<f64>> {
    let (out, inp) = w.dims2();
    if x.len() != inp {
        return Err(Error::shape(op, format!("input of length {} for a {out}x{inp} weight", x.len())));
    }
    let mut y: Vec<f64> = (0..out).map(|j| w.row(j).iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    if let Some(b) = b {
        if b.len() != out {
            return Err(Error::shape(op, format!("bias of length {} for {out} outputs", b.len())));
        }
        y.iter_mut().zip(b.data()).for_each(|(y, b)| *y += b);
    }
    Ok(y)
}

pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    affine(&layer.w, Some(&layer.b), x, "dense_forward")
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One GRU step:
///
/// ```text
/// z = sigmoid(W_z x + U_z h + b_z)
/// r = sigmoid(W_r x + U_r h + b_r)
/// c = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * c
/// ```
pub fn gru_forward(cell: &GruCell, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    let hidden = cell.hidden_dim();
    if h_prev.len() != hidden {
        return Err(Error::shape("gru_forward", format!("state of length {} for hidden size {hidden}", h_prev.len())));
    }
    let pre = |w, u, b, h: &[f64]| -> Result<Vec<f64>> {
        let a = affine(w, Some(b), x, "gru_forward")?;
        let c = affine(u, None, h, "gru_forward")?;
        Ok(a.iter().zip(&c).map(|(a, c)| a + c).collect())
    };
    let z: Vec<f64> = pre(&cell.w_z, &cell.u_z, &cell.b_z, h_prev)?.into_iter().map(sigmoid).collect();
    let r: Vec<f64> = pre(&cell.w_r, &cell.u_r, &cell.b_r, h_prev)?.into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let cand: Vec<f64> = pre(&cell.w_h, &cell.u_h, &cell.b_h, &rh)?.into_iter().map(f64::tanh).collect();
    Ok((0..hidden).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i]).collect())
}

/// Elementwise sum; an empty list yields the zero vector of `width`.
pub fn sum_pool(vectors: &[Vec<f64>], width: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; width];
    for v in vectors {
        if v.len() != width {
            return Err(Error::shape("sum_pool", format!("vector of length {} in a width-{width} pool", v.len())));
        }
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    Ok(out)
}
