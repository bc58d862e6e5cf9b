//! Ready-made model specs: the CIFAR-10 student/teacher pair, the two
//! VGG variants used for Tiny-ImageNet-scale inputs, and a plain MLP for
//! small synthetic benchmarks.

use crate::layers::{InputShape, LayerSpec, ModelSpec};

fn conv3(channels: usize) -> LayerSpec {
    // 3x3 filters keep their spatial extent ("same" padding); the
    // published parameter counts force this choice.
    LayerSpec::Conv2d {
        channels,
        filter: [3, 3],
        pad: 1,
    }
}

/// 5-layer CIFAR-10 student: three conv/pool stages then a 128-unit
/// hidden layer. 161,130 trainable parameters.
pub fn cifar_student() -> ModelSpec {
    ModelSpec {
        input: InputShape::Image([3, 32, 32]),
        classes: 10,
        layers: vec![
            conv3(32),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            conv3(32),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            conv3(64),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Linear { units: 128 },
            LayerSpec::Relu,
            LayerSpec::Linear { units: 10 },
        ],
    }
}

/// 8-layer CIFAR-10 teacher: five batch-normalized conv layers (pooling
/// after the first, second and fifth) and a 512-128 classifier head with
/// dropout. 1,256,106 trainable parameters.
pub fn cifar_teacher(dropout_rate: f64) -> ModelSpec {
    ModelSpec {
        input: InputShape::Image([3, 32, 32]),
        classes: 10,
        layers: vec![
            conv3(32),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            conv3(32),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            conv3(64),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
            conv3(64),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
            conv3(128),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Linear { units: 512 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: dropout_rate },
            LayerSpec::Linear { units: 128 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: dropout_rate },
            LayerSpec::Linear { units: 10 },
        ],
    }
}

/// Stage widths per VGG variant; `0` marks a pooling step.
const VGG11_PLAN: &[usize] = &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0];
const VGG19_PLAN: &[usize] = &[
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
];

fn vgg(plan: &[usize], batchnorm: bool, hw: usize, classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for &step in plan {
        if step == 0 {
            layers.push(LayerSpec::MaxPool2x2);
        } else {
            layers.push(conv3(step));
            if batchnorm {
                layers.push(LayerSpec::Batchnorm2d);
            }
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::Flatten);
    for _ in 0..2 {
        layers.push(LayerSpec::Linear { units: 4096 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: 0.5 });
    }
    layers.push(LayerSpec::Linear { units: classes });
    ModelSpec {
        input: InputShape::Image([3, hw, hw]),
        classes,
        layers,
    }
}

/// VGG11 sized for 64x64 inputs and 200 classes: 35,213,896 parameters.
pub fn vgg11(hw: usize, classes: usize) -> ModelSpec {
    vgg(VGG11_PLAN, false, hw, classes)
}

/// VGG19 with batch normalization, same head: 46,028,808 parameters.
pub fn vgg19_bn(hw: usize, classes: usize) -> ModelSpec {
    vgg(VGG19_PLAN, true, hw, classes)
}

/// Fully-connected ReLU network for synthetic desk-scale experiments.
pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for &units in hidden {
        layers.push(LayerSpec::Linear { units });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Linear { units: classes });
    ModelSpec {
        input: InputShape::Flat(input_dim),
        classes,
        layers,
    }
}
