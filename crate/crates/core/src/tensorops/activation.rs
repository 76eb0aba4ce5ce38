use crate::error::Result;
use crate::tensorops::Tensor;

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the forward *output*.
pub fn relu_backward(grad: &Tensor, output: &Tensor) -> Result<Tensor> {
    grad.zip_map(output, "relu_backward", |g, y| if y > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through the logistic function given the forward *output*.
pub fn sigmoid_backward(grad: &Tensor, output: &Tensor) -> Result<Tensor> {
    grad.zip_map(output, "sigmoid_backward", |g, y| g * y * (1.0 - y))
}
