//! Fully connected layer `y = W x + b` with `W` stored row-major `out × in`.

pub fn dense_forward(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates parameter gradients and returns `dL/dx`.
pub fn dense_backward(weight: &[f64], x: &[f64], d_out: &[f64], d_weight: &mut [f64], d_bias: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut d_x = vec![0.0; n_in];
    for (o, g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let d_row = &mut d_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            d_row[i] += g * x[i];
            d_x[i] += g * row[i];
        }
    }
    d_x
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
