use rand::Rng;

use super::{DenseLayer, GruCell, Tensor};

/// Uniform(-a, a) entries with `a = sqrt(6 / (fan_in + fan_out))`, shaped `fan_out x fan_in`.
pub fn glorot_uniform<R: Rng>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("shape")
}

pub fn init_dense<R: Rng>(input: usize, output: usize, rng: &mut R) -> DenseLayer {
    DenseLayer { w: glorot_uniform(output, input, rng), b: Tensor::zeros(&[output]) }
}

/// Glorot-uniform input and recurrent weights, zero biases.
pub fn init_gru<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> GruCell {
    let mut cell = GruCell::zeros(input, hidden);
    cell.w_z = glorot_uniform(hidden, input, rng);
    cell.w_r = glorot_uniform(hidden, input, rng);
    cell.w_h = glorot_uniform(hidden, input, rng);
    cell.u_z = glorot_uniform(hidden, hidden, rng);
    cell.u_r = glorot_uniform(hidden, hidden, rng);
    cell.u_h = glorot_uniform(hidden, hidden, rng);
    cell
}
