//! Small random models and tensors shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::{LayerKind, LayerNode, ModelGraph};
use crate::layers::ConvSpec;
use crate::tensor::Tensor;

pub fn uniform(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn gaussian(shape: &[usize], seed: u64, std: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect(),
    )
    .unwrap()
}

pub fn conv(id: &str, input: &str, spec: ConvSpec, seed: u64) -> LayerNode {
    let fan_in = spec.patch_len() as f32;
    LayerNode::new(id, LayerKind::Conv2d, &[input])
        .with_conv(spec)
        .with_param(
            "weight",
            gaussian(&spec.weight_shape(), seed, (2.0 / fan_in).sqrt()),
        )
        .with_param("bias", gaussian(&[spec.out_channels], seed + 1, 0.1))
}

pub fn fc(id: &str, input: &str, n_in: usize, n_out: usize, seed: u64) -> LayerNode {
    LayerNode::new(id, LayerKind::Fc, &[input])
        .with_param(
            "weight",
            gaussian(&[n_out, n_in], seed, (2.0 / n_in as f32).sqrt()),
        )
        .with_param("bias", gaussian(&[n_out], seed + 1, 0.1))
}

pub fn bn(id: &str, input: &str, channels: usize, seed: u64) -> LayerNode {
    LayerNode::new(id, LayerKind::BatchNorm2d { eps: 1e-5 }, &[input])
        .with_param("gamma", uniform(&[channels], seed, 0.5, 1.5))
        .with_param("beta", uniform(&[channels], seed + 1, -0.3, 0.3))
        .with_param("mean", uniform(&[channels], seed + 2, -0.2, 0.2))
        .with_param("var", uniform(&[channels], seed + 3, 0.3, 2.0))
}

pub fn op(id: &str, kind: LayerKind, inputs: &[&str]) -> LayerNode {
    LayerNode::new(id, kind, inputs)
}

/// conv-bn-relu, conv-bn, residual add, relu, pool, flatten, fc on `[2, 6, 6]` inputs.
pub fn tiny_cnn(seed: u64) -> ModelGraph {
    let nodes = vec![
        conv("conv1", "input", ConvSpec::new(2, 4, 3, 1, 1), seed),
        bn("bn1", "conv1", 4, seed + 10),
        op("relu1", LayerKind::Relu, &["bn1"]),
        conv("conv2", "relu1", ConvSpec::new(4, 4, 3, 1, 1), seed + 20),
        bn("bn2", "conv2", 4, seed + 30),
        op("add", LayerKind::Add, &["relu1", "bn2"]),
        op("relu2", LayerKind::Relu, &["add"]),
        op("pool", LayerKind::AvgPool { kernel: 2 }, &["relu2"]),
        op("flat", LayerKind::Flatten, &["pool"]),
        fc("fc", "flat", 36, 5, seed + 40),
    ];
    ModelGraph::new(vec![2, 6, 6], nodes, "fc").unwrap()
}

/// fc-relu-fc on 8 features.
pub fn tiny_mlp(seed: u64) -> ModelGraph {
    let nodes = vec![
        fc("fc1", "input", 8, 16, seed),
        op("relu", LayerKind::Relu, &["fc1"]),
        fc("fc2", "relu", 16, 4, seed + 10),
    ];
    ModelGraph::new(vec![8], nodes, "fc2").unwrap()
}
