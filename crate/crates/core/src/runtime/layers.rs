//! Forward kernels for each layer kind.

use super::Tensor;
use crate::netir::{LayerKind, TensorShape, Weights};

pub(crate) fn conv2d(
    input: &Tensor,
    w: &Weights,
    out_shape: TensorShape,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Tensor {
    let in_s = input.shape;
    let mut out = Tensor::zeros(out_shape);
    let k2 = kernel * kernel;
    for co in 0..out_shape.channels {
        let w_co = &w.kernel[co * in_s.channels * k2..(co + 1) * in_s.channels * k2];
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut acc = w.bias[co];
                for ci in 0..in_s.channels {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= in_s.height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= in_s.width as isize {
                                continue;
                            }
                            acc += w_co[(ci * kernel + ky) * kernel + kx] * input.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.data[(co * out_shape.height + oy) * out_shape.width + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn dense(input: &Tensor, w: &Weights, out_features: usize) -> Tensor {
    let n_in = input.len();
    let data = (0..out_features)
        .map(|o| {
            let row = &w.kernel[o * n_in..(o + 1) * n_in];
            w.bias[o] + row.iter().zip(&input.data).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::vector(data)
}

pub(crate) fn relu(input: &Tensor) -> Tensor {
    Tensor::new(input.shape, input.data.iter().map(|&v| v.max(0.0)).collect())
}

pub(crate) fn maxpool(input: &Tensor, out_shape: TensorShape, kernel: usize, stride: usize) -> Tensor {
    let mut out = Tensor::zeros(out_shape);
    for c in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(input.at(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                out.data[(c * out_shape.height + oy) * out_shape.width + ox] = m;
            }
        }
    }
    out
}

pub(crate) fn global_avg_pool(input: &Tensor) -> Tensor {
    let hw = input.shape.spatial();
    let data = input
        .data
        .chunks(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::vector(data)
}

/// Softmax over all elements, with max subtraction.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Evaluates a non-stochastic node. Dropout nodes are handled by the caller.
pub(crate) fn forward(kind: &LayerKind, input: &Tensor, weights: Option<&Weights>, out_shape: TensorShape) -> Tensor {
    match *kind {
        LayerKind::Input => input.clone(),
        LayerKind::Conv2D {
            kernel,
            stride,
            padding,
            ..
        } => conv2d(
            input,
            weights.expect("weights checked"),
            out_shape,
            kernel,
            stride,
            padding,
        ),
        LayerKind::Dense { out_features } => dense(input, weights.expect("weights checked"), out_features),
        LayerKind::ReLU => relu(input),
        LayerKind::MaxPool { kernel, stride } => maxpool(input, out_shape, kernel, stride),
        LayerKind::GlobalAvgPool => global_avg_pool(input),
        LayerKind::Softmax => Tensor::new(input.shape, softmax(&input.data)),
        LayerKind::ExitHead { .. } => Tensor::new(out_shape, softmax(&input.data)),
        LayerKind::McDropout { .. } => unreachable!("dropout evaluated through its mask"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_with_padding_matches_hand_values() {
        // 1x3x3 input, single 3x3 all-ones kernel, padding 1: each output is
        // the sum of the in-bounds neighbourhood.
        let input = Tensor::new(TensorShape::new(1, 3, 3), (1..=9).map(f64::from).collect());
        let w = Weights {
            kernel: vec![1.0; 9],
            bias: vec![0.5],
        };
        let out = conv2d(&input, &w, TensorShape::new(1, 3, 3), 3, 1, 1);
        let expected = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0];
        let got: Vec<f64> = out.data.iter().map(|v| v - 0.5).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn strided_pool() {
        let input = Tensor::new(TensorShape::new(1, 4, 4), (0..16).map(f64::from).collect());
        let out = maxpool(&input, TensorShape::new(1, 2, 2), 2, 2);
        assert_eq!(out.data, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let p = softmax(&[1000.0, 1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - p[1]).abs() < 1e-15);
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn gap_averages_each_channel() {
        let input = Tensor::new(TensorShape::new(2, 1, 2), vec![1.0, 3.0, -2.0, 2.0]);
        assert_eq!(global_avg_pool(&input).data, vec![2.0, 0.0]);
    }
}
