//! Backbone graphs with the classification layer removed. Parameter names
//! match the torchvision state dicts so exported weights load by name.

use solis_nn::{
    AdaptiveAvgPool2d, AvgPool2d, BatchNorm2d, Concat, Conv2d, DenseConcat, Dropout, Flatten,
    MaxPool2d, Module, Relu, Residual, Sequential,
};

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize, bias: bool) -> Conv2d {
    Conv2d::square(i, o, k, s, p, bias)
}

fn bn(c: usize) -> BatchNorm2d {
    BatchNorm2d::new(c, 1e-5)
}

/// Three conv blocks and a global average pool; 64 features.
pub fn tinycnn() -> Module {
    let mut features = Sequential::new();
    let mut idx = 0;
    let mut c_in = 3;
    for c in [8, 16, 64] {
        features = features
            .push(idx.to_string(), conv(c_in, c, 3, 1, 1, false))
            .push((idx + 1).to_string(), bn(c))
            .push((idx + 2).to_string(), Relu::new())
            .push((idx + 3).to_string(), MaxPool2d::new(2, 2, 0));
        idx += 4;
        c_in = c;
    }
    Sequential::new()
        .push("features", features)
        .push("avgpool", AdaptiveAvgPool2d::new(1, 1))
        .then(Flatten::new())
        .into()
}

/// VGG-11 with batch norm; features are the 4096-wide penultimate layer.
pub fn vgg11_bn() -> Module {
    let cfg: [Option<usize>; 13] = [
        Some(64),
        None,
        Some(128),
        None,
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        None,
    ];
    let mut features = Sequential::new();
    let mut idx = 0;
    let mut c_in = 3;
    for entry in cfg {
        match entry {
            Some(c) => {
                features = features
                    .push(idx.to_string(), conv(c_in, c, 3, 1, 1, true))
                    .push((idx + 1).to_string(), bn(c))
                    .push((idx + 2).to_string(), Relu::new());
                idx += 3;
                c_in = c;
            }
            None => {
                features = features.push(idx.to_string(), MaxPool2d::new(2, 2, 0));
                idx += 1;
            }
        }
    }
    let classifier = Sequential::new()
        .push("0", solis_nn::Linear::new(512 * 7 * 7, 4096))
        .push("1", Relu::new())
        .push("2", Dropout::new(0.5))
        .push("3", solis_nn::Linear::new(4096, 4096))
        .push("4", Relu::new())
        .push("5", Dropout::new(0.5));
    Sequential::new()
        .push("features", features)
        .push("avgpool", AdaptiveAvgPool2d::new(7, 7))
        .then(Flatten::new())
        .push("classifier", classifier)
        .into()
}

fn basic_block(c_in: usize, c_out: usize, stride: usize) -> Module {
    let body = Sequential::new()
        .push("conv1", conv(c_in, c_out, 3, stride, 1, false))
        .push("bn1", bn(c_out))
        .push("relu", Relu::new())
        .push("conv2", conv(c_out, c_out, 3, 1, 1, false))
        .push("bn2", bn(c_out));
    let shortcut = (stride != 1 || c_in != c_out).then(|| {
        Sequential::new()
            .push("0", conv(c_in, c_out, 1, stride, 0, false))
            .push("1", bn(c_out))
            .into()
    });
    Sequential::new()
        .then(Residual::new(body, shortcut.map(|m| ("downsample", m))))
        .then(Relu::new())
        .into()
}

/// ResNet-18; 512 features.
pub fn resnet18() -> Module {
    let mut net = Sequential::new()
        .push("conv1", conv(3, 64, 7, 2, 3, false))
        .push("bn1", bn(64))
        .push("relu", Relu::new())
        .push("maxpool", MaxPool2d::new(3, 2, 1));
    let mut c_in = 64;
    for (i, c) in [64, 128, 256, 512].into_iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let layer = Sequential::new()
            .push("0", basic_block(c_in, c, stride))
            .push("1", basic_block(c, c, 1));
        net = net.push(format!("layer{}", i + 1), layer);
        c_in = c;
    }
    net.push("avgpool", AdaptiveAvgPool2d::new(1, 1))
        .then(Flatten::new())
        .into()
}

/// DenseNet-121 (growth 32, bottleneck 4); 1024 features.
pub fn densenet121() -> Module {
    let growth = 32;
    let mut features = Sequential::new()
        .push("conv0", conv(3, 64, 7, 2, 3, false))
        .push("norm0", bn(64))
        .push("relu0", Relu::new())
        .push("pool0", MaxPool2d::new(3, 2, 1));
    let mut c = 64;
    for (b, layers) in [6, 12, 24, 16].into_iter().enumerate() {
        let mut block = Sequential::new();
        for l in 0..layers {
            let body = Sequential::new()
                .push("norm1", bn(c))
                .push("relu1", Relu::new())
                .push("conv1", conv(c, 4 * growth, 1, 1, 0, false))
                .push("norm2", bn(4 * growth))
                .push("relu2", Relu::new())
                .push("conv2", conv(4 * growth, growth, 3, 1, 1, false));
            block = block.push(format!("denselayer{}", l + 1), DenseConcat::new(body));
            c += growth;
        }
        features = features.push(format!("denseblock{}", b + 1), block);
        if b < 3 {
            let transition = Sequential::new()
                .push("norm", bn(c))
                .push("relu", Relu::new())
                .push("conv", conv(c, c / 2, 1, 1, 0, false))
                .push("pool", AvgPool2d::new(2, 2, 0));
            features = features.push(format!("transition{}", b + 1), transition);
            c /= 2;
        }
    }
    features = features.push("norm5", bn(c));
    Sequential::new()
        .push("features", features)
        .then(Relu::new())
        .push("avgpool", AdaptiveAvgPool2d::new(1, 1))
        .then(Flatten::new())
        .into()
}

/// Conv (no bias) + batch norm (eps 1e-3) + ReLU.
fn basic_conv(
    name: &str,
    i: usize,
    o: usize,
    k: [usize; 2],
    s: usize,
    p: [usize; 2],
) -> (String, Module) {
    let m = Sequential::new()
        .push("conv", Conv2d::new(i, o, k, [s, s], p, false))
        .push("bn", BatchNorm2d::new(o, 1e-3))
        .then(Relu::new());
    (name.to_string(), m.into())
}

fn sq(name: &str, i: usize, o: usize, k: usize, s: usize, p: usize) -> (String, Module) {
    basic_conv(name, i, o, [k, k], s, [p, p])
}

fn chain(parts: Vec<(String, Module)>) -> (String, Module) {
    (String::new(), Sequential { children: parts }.into())
}

fn avg_pool_branch(i: usize, o: usize) -> (String, Module) {
    chain(vec![
        (String::new(), AvgPool2d::new(3, 1, 1).into()),
        sq("branch_pool", i, o, 1, 1, 0),
    ])
}

fn max_pool_branch() -> (String, Module) {
    (String::new(), MaxPool2d::new(3, 2, 0).into())
}

fn inception_a(i: usize, pool: usize) -> Module {
    Concat::new(vec![
        chain(vec![sq("branch1x1", i, 64, 1, 1, 0)]),
        chain(vec![
            sq("branch5x5_1", i, 48, 1, 1, 0),
            sq("branch5x5_2", 48, 64, 5, 1, 2),
        ]),
        chain(vec![
            sq("branch3x3dbl_1", i, 64, 1, 1, 0),
            sq("branch3x3dbl_2", 64, 96, 3, 1, 1),
            sq("branch3x3dbl_3", 96, 96, 3, 1, 1),
        ]),
        avg_pool_branch(i, pool),
    ])
    .into()
}

fn inception_b(i: usize) -> Module {
    Concat::new(vec![
        chain(vec![sq("branch3x3", i, 384, 3, 2, 0)]),
        chain(vec![
            sq("branch3x3dbl_1", i, 64, 1, 1, 0),
            sq("branch3x3dbl_2", 64, 96, 3, 1, 1),
            sq("branch3x3dbl_3", 96, 96, 3, 2, 0),
        ]),
        max_pool_branch(),
    ])
    .into()
}

fn inception_c(i: usize, c7: usize) -> Module {
    let row = |n: &str, a, b| basic_conv(n, a, b, [1, 7], 1, [0, 3]);
    let col = |n: &str, a, b| basic_conv(n, a, b, [7, 1], 1, [3, 0]);
    Concat::new(vec![
        chain(vec![sq("branch1x1", i, 192, 1, 1, 0)]),
        chain(vec![
            sq("branch7x7_1", i, c7, 1, 1, 0),
            row("branch7x7_2", c7, c7),
            col("branch7x7_3", c7, 192),
        ]),
        chain(vec![
            sq("branch7x7dbl_1", i, c7, 1, 1, 0),
            col("branch7x7dbl_2", c7, c7),
            row("branch7x7dbl_3", c7, c7),
            col("branch7x7dbl_4", c7, c7),
            row("branch7x7dbl_5", c7, 192),
        ]),
        avg_pool_branch(i, 192),
    ])
    .into()
}

fn inception_d(i: usize) -> Module {
    Concat::new(vec![
        chain(vec![
            sq("branch3x3_1", i, 192, 1, 1, 0),
            sq("branch3x3_2", 192, 320, 3, 2, 0),
        ]),
        chain(vec![
            sq("branch7x7x3_1", i, 192, 1, 1, 0),
            basic_conv("branch7x7x3_2", 192, 192, [1, 7], 1, [0, 3]),
            basic_conv("branch7x7x3_3", 192, 192, [7, 1], 1, [3, 0]),
            sq("branch7x7x3_4", 192, 192, 3, 2, 0),
        ]),
        max_pool_branch(),
    ])
    .into()
}

fn inception_e(i: usize) -> Module {
    let split = |a: &str, b: &str, c: usize| {
        (
            String::new(),
            Concat::new(vec![
                chain(vec![basic_conv(a, c, 384, [1, 3], 1, [0, 1])]),
                chain(vec![basic_conv(b, c, 384, [3, 1], 1, [1, 0])]),
            ])
            .into(),
        )
    };
    Concat::new(vec![
        chain(vec![sq("branch1x1", i, 320, 1, 1, 0)]),
        chain(vec![
            sq("branch3x3_1", i, 384, 1, 1, 0),
            split("branch3x3_2a", "branch3x3_2b", 384),
        ]),
        chain(vec![
            sq("branch3x3dbl_1", i, 448, 1, 1, 0),
            sq("branch3x3dbl_2", 448, 384, 3, 1, 1),
            split("branch3x3dbl_3a", "branch3x3dbl_3b", 384),
        ]),
        avg_pool_branch(i, 192),
    ])
    .into()
}

/// Inception-v3 without the auxiliary classifier; 2048 features.
pub fn inception_v3() -> Module {
    let stem = [
        sq("Conv2d_1a_3x3", 3, 32, 3, 2, 0),
        sq("Conv2d_2a_3x3", 32, 32, 3, 1, 0),
        sq("Conv2d_2b_3x3", 32, 64, 3, 1, 1),
        ("maxpool1".to_string(), MaxPool2d::new(3, 2, 0).into()),
        sq("Conv2d_3b_1x1", 64, 80, 1, 1, 0),
        sq("Conv2d_4a_3x3", 80, 192, 3, 1, 0),
        ("maxpool2".to_string(), MaxPool2d::new(3, 2, 0).into()),
    ];
    let mut net = Sequential {
        children: stem.into_iter().collect(),
    };
    net = net
        .push("Mixed_5b", inception_a(192, 32))
        .push("Mixed_5c", inception_a(256, 64))
        .push("Mixed_5d", inception_a(288, 64))
        .push("Mixed_6a", inception_b(288))
        .push("Mixed_6b", inception_c(768, 128))
        .push("Mixed_6c", inception_c(768, 160))
        .push("Mixed_6d", inception_c(768, 160))
        .push("Mixed_6e", inception_c(768, 192))
        .push("Mixed_7a", inception_d(768))
        .push("Mixed_7b", inception_e(1280))
        .push("Mixed_7c", inception_e(2048))
        .push("avgpool", AdaptiveAvgPool2d::new(1, 1))
        .push("dropout", Dropout::new(0.5))
        .then(Flatten::new());
    net.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference totals are the torchvision models' parameter counts minus
    // their final classification layer (and, for Inception-v3, minus the
    // auxiliary classifier).
    #[test]
    fn parameter_counts_match_reference_models() {
        assert_eq!(resnet18().param_count(), 11_689_512 - 513_000);
        assert_eq!(vgg11_bn().param_count(), 132_868_840 - 4_097_000);
        assert_eq!(densenet121().param_count(), 7_978_856 - 1_025_000);
        assert_eq!(
            inception_v3().param_count(),
            27_161_264 - 2_049_000 - 3_326_696
        );
    }

    #[test]
    fn feature_widths() {
        assert_eq!(tinycnn().out_dims([3, 64, 64]).unwrap(), [64, 1, 1]);
        assert_eq!(resnet18().out_dims([3, 224, 224]).unwrap(), [512, 1, 1]);
        assert_eq!(vgg11_bn().out_dims([3, 224, 224]).unwrap(), [4096, 1, 1]);
        assert_eq!(densenet121().out_dims([3, 299, 299]).unwrap(), [1024, 1, 1]);
        assert_eq!(
            inception_v3().out_dims([3, 224, 224]).unwrap(),
            [2048, 1, 1]
        );
        assert_eq!(
            inception_v3().out_dims([3, 299, 299]).unwrap(),
            [2048, 1, 1]
        );
    }

    #[test]
    fn names_follow_torchvision() {
        let names = |m: Module| {
            m.named_params()
                .into_iter()
                .map(|(n, _)| n)
                .collect::<Vec<_>>()
        };
        let r = names(resnet18());
        assert_eq!(r[0], "conv1.weight");
        assert!(r.contains(&"layer2.0.downsample.0.weight".to_string()));
        assert!(r.contains(&"layer4.1.bn2.bias".to_string()));
        let d = names(densenet121());
        assert!(d.contains(&"features.denseblock3.denselayer24.conv2.weight".to_string()));
        assert!(d.contains(&"features.transition1.conv.weight".to_string()));
        assert_eq!(d.last().unwrap(), "features.norm5.bias");
        let i = names(inception_v3());
        assert!(i.contains(&"Mixed_7c.branch3x3dbl_3b.bn.weight".to_string()));
        assert!(i.contains(&"Mixed_5b.branch_pool.conv.weight".to_string()));
        let v = names(vgg11_bn());
        assert!(v.contains(&"features.25.weight".to_string()));
        assert!(v.contains(&"classifier.3.bias".to_string()));
    }
}
