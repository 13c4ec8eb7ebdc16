//! Frozen convolutional feature extractors without their classification top.
//!
//! Layer names and parameter keys follow the Keras application models, so an
//! `.npz` of ImageNet weights exported from Keras (see
//! `tools/export_keras_weights.py`) loads by name.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureShape, Graph, GraphBuilder, Network, NodeId, Padding, ParamStore, Trace};

/// Environment variable naming a directory of `<arch>_notop.npz` files.
pub const WEIGHTS_DIR_ENV: &str = "SLR_WEIGHTS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// ResNet-50 in its pre-activation (v2) form.
    Resnet50,
    Inceptionv3,
    Xception,
    Vgg16,
    /// Two-convolution extractor for desk-scale runs; random weights only.
    Tiny,
}

impl Architecture {
    pub const IMAGENET: [Architecture; 4] = [
        Architecture::Resnet50,
        Architecture::Inceptionv3,
        Architecture::Xception,
        Architecture::Vgg16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Resnet50 => "resnet50",
            Architecture::Inceptionv3 => "inceptionv3",
            Architecture::Xception => "xception",
            Architecture::Vgg16 => "vgg16",
            Architecture::Tiny => "tiny",
        }
    }

    /// Smallest spatial input the architecture accepts.
    pub fn min_input_side(self) -> usize {
        match self {
            Architecture::Resnet50 | Architecture::Vgg16 => 32,
            Architecture::Inceptionv3 => 75,
            Architecture::Xception => 71,
            Architecture::Tiny => 15,
        }
    }

    /// The layer graph for an input of the given shape.
    pub fn graph(self, input: FeatureShape, preprocessing: Preprocessing) -> Result<Graph> {
        let side = input.height.min(input.width);
        if side < self.min_input_side() {
            let min = self.min_input_side();
            return Err(Error::Config(format!(
                "{} needs inputs of at least {min}x{min}, got {}x{}",
                self.name(),
                input.height,
                input.width
            )));
        }
        if input.channels != 3 {
            return Err(Error::Config(format!(
                "{} expects 3 input channels, got {}",
                self.name(),
                input.channels
            )));
        }
        let mut b = GraphBuilder::new(input);
        let mut x = b.input();
        if preprocessing == Preprocessing::Canonical {
            x = canonical_preprocess(&mut b, x, self);
        }
        let out = match self {
            Architecture::Resnet50 => resnet50_v2(&mut b, x),
            Architecture::Inceptionv3 => inception_v3(&mut b, x),
            Architecture::Xception => xception(&mut b, x),
            Architecture::Vgg16 => vgg16(&mut b, x),
            Architecture::Tiny => tiny(&mut b, x),
        };
        b.finish(out)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet50" => Ok(Architecture::Resnet50),
            "inceptionv3" => Ok(Architecture::Inceptionv3),
            "xception" => Ok(Architecture::Xception),
            "vgg16" => Ok(Architecture::Vgg16),
            "tiny" => Ok(Architecture::Tiny),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected resnet50, inceptionv3, xception, vgg16 or tiny)"
            ))),
        }
    }
}

/// Where backbone parameters come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weights {
    /// ImageNet weights from an `.npz` file. Without a path the file
    /// `$SLR_WEIGHTS_DIR/<arch>_notop.npz` is used.
    Imagenet {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    /// Explicitly requested random initialisation, reproducible by seed.
    Random { seed: u64 },
}

impl Default for Weights {
    fn default() -> Self {
        Weights::Imagenet { path: None }
    }
}

/// Input scaling applied inside the backbone. Images always arrive in
/// `[0, 1]`; `Canonical` adds the architecture's own ImageNet preprocessing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    #[default]
    Unit,
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    pub include_top: bool,
    pub weights: Weights,
    pub trainable: bool,
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub preprocessing: Preprocessing,
}

impl BackboneSpec {
    pub fn new(architecture: Architecture, weights: Weights) -> Self {
        Self {
            architecture,
            include_top: false,
            weights,
            trainable: false,
            input_shape: [75, 75, 3],
            preprocessing: Preprocessing::Unit,
        }
    }

    pub fn input(&self) -> FeatureShape {
        let [h, w, c] = self.input_shape;
        FeatureShape::new(h, w, c)
    }

    pub fn graph(&self) -> Result<Graph> {
        if self.include_top {
            return Err(Error::Config("backbones are always built without their top".into()));
        }
        if self.trainable {
            return Err(Error::Config("backbone layers are always frozen".into()));
        }
        self.architecture.graph(self.input(), self.preprocessing)
    }

    fn resolve_weights_path(&self, path: &Option<PathBuf>) -> Result<PathBuf> {
        let arch = self.architecture;
        let candidate = match path {
            Some(p) => p.clone(),
            None => {
                let dir = std::env::var_os(WEIGHTS_DIR_ENV).ok_or_else(|| Error::WeightsUnavailable {
                    architecture: arch.name().into(),
                    detail: format!(
                        "no weights path given and {WEIGHTS_DIR_ENV} is not set; export them with \
                         crates/core/tools/export_keras_weights.py or request random weights explicitly"
                    ),
                })?;
                PathBuf::from(dir).join(format!("{}_notop.npz", arch.name()))
            }
        };
        if !candidate.is_file() {
            return Err(Error::WeightsUnavailable {
                architecture: arch.name().into(),
                detail: format!("{} does not exist", candidate.display()),
            });
        }
        Ok(candidate)
    }
}

/// A frozen feature extractor. Nothing here is mutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    network: Network,
}

/// Instantiates the backbone, loading or generating its parameters.
pub fn build_backbone(spec: &BackboneSpec) -> Result<Backbone> {
    let graph = spec.graph()?;
    let params = match &spec.weights {
        Weights::Random { seed } => graph.init_params(&mut ChaCha8Rng::seed_from_u64(*seed)),
        Weights::Imagenet { path } => {
            if spec.architecture == Architecture::Tiny {
                return Err(Error::WeightsUnavailable {
                    architecture: "tiny".into(),
                    detail: "the desk-scale extractor has no pretrained weights".into(),
                });
            }
            let path = spec.resolve_weights_path(path)?;
            ParamStore::load_npz(&path).map_err(|e| Error::WeightsUnavailable {
                architecture: spec.architecture.name().into(),
                detail: e.to_string(),
            })?
        }
    };
    let network = Network::new(graph, &params)?;
    Ok(Backbone {
        spec: spec.clone(),
        network,
    })
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.network.graph().input_shape()
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.network.graph().output_shape()
    }

    pub fn param_count(&self) -> usize {
        self.network.scalar_count()
    }

    pub fn features(&self, image: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.network.forward(image)
    }

    pub fn features_batch(&self, images: ArrayView4<f64>) -> Result<Array4<f64>> {
        self.network.forward_batch(images)
    }

    pub fn trace(&self, image: ArrayView3<f64>) -> Result<Trace> {
        self.network.forward_trace(image)
    }

    pub fn input_gradient(&self, trace: &Trace, grad_features: Array3<f64>) -> Result<Array3<f64>> {
        self.network.input_gradient(trace, grad_features)
    }
}

fn canonical_preprocess(b: &mut GraphBuilder, x: NodeId, arch: Architecture) -> NodeId {
    match arch {
        // "caffe" mode: RGB -> BGR on the 0..255 scale, ImageNet mean removed
        Architecture::Vgg16 => b.preprocess(x, vec![2, 1, 0], vec![255.0; 3], vec![-103.939, -116.779, -123.68]),
        // "tf" mode: scale to [-1, 1]
        _ => b.preprocess(x, vec![0, 1, 2], vec![2.0; 3], vec![-1.0; 3]),
    }
}

fn vgg16(b: &mut GraphBuilder, mut x: NodeId) -> NodeId {
    let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    for (i, &(filters, convs)) in blocks.iter().enumerate() {
        let block = i + 1;
        for j in 1..=convs {
            let name = format!("block{block}_conv{j}");
            x = b.conv(&name, x, filters, (3, 3), (1, 1), Padding::Same, true);
            x = b.relu(format!("{name}_relu"), x);
        }
        x = b.max_pool(format!("block{block}_pool"), x, (2, 2), (2, 2), Padding::Valid);
    }
    x
}

const RESNET_BN_EPS: f64 = 1.001e-5;

fn resnet_block_v2(
    b: &mut GraphBuilder,
    x: NodeId,
    filters: usize,
    stride: usize,
    conv_shortcut: bool,
    name: &str,
) -> NodeId {
    let preact = b.batch_norm(format!("{name}_preact_bn"), x, RESNET_BN_EPS, true, true);
    let preact = b.relu(format!("{name}_preact_relu"), preact);
    let shortcut = if conv_shortcut {
        b.conv(
            format!("{name}_0_conv"),
            preact,
            4 * filters,
            (1, 1),
            (stride, stride),
            Padding::Valid,
            true,
        )
    } else if stride > 1 {
        let pool = b.auto_name("max_pooling2d");
        b.max_pool(pool, x, (1, 1), (stride, stride), Padding::Valid)
    } else {
        x
    };
    let y = b.conv(
        format!("{name}_1_conv"),
        preact,
        filters,
        (1, 1),
        (1, 1),
        Padding::Valid,
        false,
    );
    let y = b.batch_norm(format!("{name}_1_bn"), y, RESNET_BN_EPS, true, true);
    let y = b.relu(format!("{name}_1_relu"), y);
    let y = b.zero_pad(format!("{name}_2_pad"), y, (1, 1, 1, 1));
    let y = b.conv(
        format!("{name}_2_conv"),
        y,
        filters,
        (3, 3),
        (stride, stride),
        Padding::Valid,
        false,
    );
    let y = b.batch_norm(format!("{name}_2_bn"), y, RESNET_BN_EPS, true, true);
    let y = b.relu(format!("{name}_2_relu"), y);
    let y = b.conv(
        format!("{name}_3_conv"),
        y,
        4 * filters,
        (1, 1),
        (1, 1),
        Padding::Valid,
        true,
    );
    b.add(format!("{name}_out"), &[shortcut, y])
}

fn resnet_stack_v2(
    b: &mut GraphBuilder,
    mut x: NodeId,
    filters: usize,
    blocks: usize,
    stride1: usize,
    name: &str,
) -> NodeId {
    x = resnet_block_v2(b, x, filters, 1, true, &format!("{name}_block1"));
    for i in 2..blocks {
        x = resnet_block_v2(b, x, filters, 1, false, &format!("{name}_block{i}"));
    }
    resnet_block_v2(b, x, filters, stride1, false, &format!("{name}_block{blocks}"))
}

fn resnet50_v2(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    let x = b.zero_pad("conv1_pad", x, (3, 3, 3, 3));
    let x = b.conv("conv1_conv", x, 64, (7, 7), (2, 2), Padding::Valid, true);
    let x = b.zero_pad("pool1_pad", x, (1, 1, 1, 1));
    let x = b.max_pool("pool1_pool", x, (3, 3), (2, 2), Padding::Valid);
    let x = resnet_stack_v2(b, x, 64, 3, 2, "conv2");
    let x = resnet_stack_v2(b, x, 128, 4, 2, "conv3");
    let x = resnet_stack_v2(b, x, 256, 6, 2, "conv4");
    let x = resnet_stack_v2(b, x, 512, 3, 1, "conv5");
    let x = b.batch_norm("post_bn", x, RESNET_BN_EPS, true, true);
    b.relu("post_relu", x)
}

const KERAS_BN_EPS: f64 = 1e-3;

/// Conv (no bias) + BN without scale + ReLU, Inception's basic unit.
fn conv_bn(
    b: &mut GraphBuilder,
    x: NodeId,
    filters: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
) -> NodeId {
    let conv = b.auto_name("conv2d");
    let bn = b.auto_name("batch_normalization");
    let act = b.auto_name("activation");
    let y = b.conv(conv, x, filters, kernel, (stride, stride), padding, false);
    let y = b.batch_norm(bn, y, KERAS_BN_EPS, true, false);
    b.relu(act, y)
}

fn avg_branch(b: &mut GraphBuilder, x: NodeId, filters: usize) -> NodeId {
    let name = b.auto_name("average_pooling2d");
    let p = b.avg_pool(name, x, (3, 3), (1, 1), Padding::Same);
    conv_bn(b, p, filters, (1, 1), 1, Padding::Same)
}

fn inception_v3(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    use Padding::{Same, Valid};
    let x = conv_bn(b, x, 32, (3, 3), 2, Valid);
    let x = conv_bn(b, x, 32, (3, 3), 1, Valid);
    let x = conv_bn(b, x, 64, (3, 3), 1, Same);
    let pool = b.auto_name("max_pooling2d");
    let x = b.max_pool(pool, x, (3, 3), (2, 2), Valid);
    let x = conv_bn(b, x, 80, (1, 1), 1, Valid);
    let x = conv_bn(b, x, 192, (3, 3), 1, Valid);
    let pool = b.auto_name("max_pooling2d");
    let mut x = b.max_pool(pool, x, (3, 3), (2, 2), Valid);

    // mixed 0..2
    for (i, pool_filters) in [32, 64, 64].into_iter().enumerate() {
        let b1 = conv_bn(b, x, 64, (1, 1), 1, Same);
        let b5 = conv_bn(b, x, 48, (1, 1), 1, Same);
        let b5 = conv_bn(b, b5, 64, (5, 5), 1, Same);
        let b3 = conv_bn(b, x, 64, (1, 1), 1, Same);
        let b3 = conv_bn(b, b3, 96, (3, 3), 1, Same);
        let b3 = conv_bn(b, b3, 96, (3, 3), 1, Same);
        let bp = avg_branch(b, x, pool_filters);
        x = b.concat(format!("mixed{i}"), &[b1, b5, b3, bp]);
    }

    // mixed 3
    let b3 = conv_bn(b, x, 384, (3, 3), 2, Valid);
    let bd = conv_bn(b, x, 64, (1, 1), 1, Same);
    let bd = conv_bn(b, bd, 96, (3, 3), 1, Same);
    let bd = conv_bn(b, bd, 96, (3, 3), 2, Valid);
    let pool = b.auto_name("max_pooling2d");
    let bp = b.max_pool(pool, x, (3, 3), (2, 2), Valid);
    x = b.concat("mixed3", &[b3, bd, bp]);

    // mixed 4..7
    for (i, width) in [128, 160, 160, 192].into_iter().enumerate() {
        let b1 = conv_bn(b, x, 192, (1, 1), 1, Same);
        let b7 = conv_bn(b, x, width, (1, 1), 1, Same);
        let b7 = conv_bn(b, b7, width, (1, 7), 1, Same);
        let b7 = conv_bn(b, b7, 192, (7, 1), 1, Same);
        let bd = conv_bn(b, x, width, (1, 1), 1, Same);
        let bd = conv_bn(b, bd, width, (7, 1), 1, Same);
        let bd = conv_bn(b, bd, width, (1, 7), 1, Same);
        let bd = conv_bn(b, bd, width, (7, 1), 1, Same);
        let bd = conv_bn(b, bd, 192, (1, 7), 1, Same);
        let bp = avg_branch(b, x, 192);
        x = b.concat(format!("mixed{}", 4 + i), &[b1, b7, bd, bp]);
    }

    // mixed 8
    let b3 = conv_bn(b, x, 192, (1, 1), 1, Same);
    let b3 = conv_bn(b, b3, 320, (3, 3), 2, Valid);
    let b7 = conv_bn(b, x, 192, (1, 1), 1, Same);
    let b7 = conv_bn(b, b7, 192, (1, 7), 1, Same);
    let b7 = conv_bn(b, b7, 192, (7, 1), 1, Same);
    let b7 = conv_bn(b, b7, 192, (3, 3), 2, Valid);
    let pool = b.auto_name("max_pooling2d");
    let bp = b.max_pool(pool, x, (3, 3), (2, 2), Valid);
    x = b.concat("mixed8", &[b3, b7, bp]);

    // mixed 9, 10
    for i in 0..2 {
        let b1 = conv_bn(b, x, 320, (1, 1), 1, Same);
        let b3 = conv_bn(b, x, 384, (1, 1), 1, Same);
        let b3a = conv_bn(b, b3, 384, (1, 3), 1, Same);
        let b3b = conv_bn(b, b3, 384, (3, 1), 1, Same);
        let b3 = b.concat(format!("mixed9_{i}"), &[b3a, b3b]);
        let bd = conv_bn(b, x, 448, (1, 1), 1, Same);
        let bd = conv_bn(b, bd, 384, (3, 3), 1, Same);
        let bda = conv_bn(b, bd, 384, (1, 3), 1, Same);
        let bdb = conv_bn(b, bd, 384, (3, 1), 1, Same);
        let cat = b.auto_name("concatenate");
        let bd = b.concat(cat, &[bda, bdb]);
        let bp = avg_branch(b, x, 192);
        x = b.concat(format!("mixed{}", 9 + i), &[b1, b3, bd, bp]);
    }
    x
}

fn xception_residual(b: &mut GraphBuilder, x: NodeId, filters: usize) -> NodeId {
    let conv = b.auto_name("conv2d");
    let bn = b.auto_name("batch_normalization");
    let r = b.conv(conv, x, filters, (1, 1), (2, 2), Padding::Same, false);
    b.batch_norm(bn, r, KERAS_BN_EPS, true, true)
}

fn sep_bn(b: &mut GraphBuilder, x: NodeId, filters: usize, name: &str) -> NodeId {
    let y = b.separable(name, x, filters, (3, 3), Padding::Same, false);
    b.batch_norm(format!("{name}_bn"), y, KERAS_BN_EPS, true, true)
}

fn xception(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    let x = b.conv("block1_conv1", x, 32, (3, 3), (2, 2), Padding::Valid, false);
    let x = b.batch_norm("block1_conv1_bn", x, KERAS_BN_EPS, true, true);
    let x = b.relu("block1_conv1_act", x);
    let x = b.conv("block1_conv2", x, 64, (3, 3), (1, 1), Padding::Valid, false);
    let x = b.batch_norm("block1_conv2_bn", x, KERAS_BN_EPS, true, true);
    let mut x = b.relu("block1_conv2_act", x);

    // entry flow: blocks 2..4; block 2 has no leading activation
    for (block, filters) in [(2usize, 128usize), (3, 256), (4, 728)] {
        let residual = xception_residual(b, x, filters);
        let mut y = x;
        if block > 2 {
            y = b.relu(format!("block{block}_sepconv1_act"), y);
        }
        y = sep_bn(b, y, filters, &format!("block{block}_sepconv1"));
        y = b.relu(format!("block{block}_sepconv2_act"), y);
        y = sep_bn(b, y, filters, &format!("block{block}_sepconv2"));
        y = b.max_pool(format!("block{block}_pool"), y, (3, 3), (2, 2), Padding::Same);
        let add = b.auto_name("add");
        x = b.add(add, &[y, residual]);
    }

    // middle flow
    for block in 5..13 {
        let residual = x;
        let mut y = x;
        for k in 1..=3 {
            y = b.relu(format!("block{block}_sepconv{k}_act"), y);
            y = sep_bn(b, y, 728, &format!("block{block}_sepconv{k}"));
        }
        let add = b.auto_name("add");
        x = b.add(add, &[y, residual]);
    }

    // exit flow
    let residual = xception_residual(b, x, 1024);
    let y = b.relu("block13_sepconv1_act", x);
    let y = sep_bn(b, y, 728, "block13_sepconv1");
    let y = b.relu("block13_sepconv2_act", y);
    let y = sep_bn(b, y, 1024, "block13_sepconv2");
    let y = b.max_pool("block13_pool", y, (3, 3), (2, 2), Padding::Same);
    let add = b.auto_name("add");
    let x = b.add(add, &[y, residual]);

    let x = sep_bn(b, x, 1536, "block14_sepconv1");
    let x = b.relu("block14_sepconv1_act", x);
    let x = sep_bn(b, x, 2048, "block14_sepconv2");
    b.relu("block14_sepconv2_act", x)
}

fn tiny(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    let x = b.conv("conv1", x, 8, (3, 3), (2, 2), Padding::Valid, true);
    let x = b.relu("conv1_relu", x);
    let x = b.max_pool("pool1", x, (2, 2), (2, 2), Padding::Valid);
    let x = b.conv("conv2", x, 16, (3, 3), (2, 2), Padding::Valid, true);
    let x = b.relu("conv2_relu", x);
    b.max_pool("pool2", x, (2, 2), (2, 2), Padding::Valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape_and_count(arch: Architecture) -> (FeatureShape, usize) {
        let g = arch.graph(FeatureShape::new(75, 75, 3), Preprocessing::Unit).unwrap();
        (g.output_shape(), g.param_count())
    }

    // Output shapes and parameter totals measured on the Keras application
    // models (include_top=False, input 75x75x3).
    #[test]
    fn resnet50_matches_keras_v2() {
        assert_eq!(
            shape_and_count(Architecture::Resnet50),
            (FeatureShape::new(3, 3, 2048), 23_564_800)
        );
    }

    #[test]
    fn inception_matches_keras() {
        assert_eq!(
            shape_and_count(Architecture::Inceptionv3),
            (FeatureShape::new(1, 1, 2048), 21_802_784)
        );
    }

    #[test]
    fn xception_matches_keras() {
        assert_eq!(
            shape_and_count(Architecture::Xception),
            (FeatureShape::new(3, 3, 2048), 20_861_480)
        );
    }

    #[test]
    fn vgg16_matches_keras() {
        assert_eq!(
            shape_and_count(Architecture::Vgg16),
            (FeatureShape::new(2, 2, 512), 14_714_688)
        );
    }

    #[test]
    fn tiny_shape() {
        assert_eq!(shape_and_count(Architecture::Tiny).0, FeatureShape::new(4, 4, 16));
    }

    #[test]
    fn unknown_architecture_is_config_error() {
        let err = "alexnet".parse::<Architecture>().unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let err = Architecture::Inceptionv3
            .graph(FeatureShape::new(64, 64, 3), Preprocessing::Unit)
            .unwrap_err();
        assert!(err.to_string().contains("75x75"), "{err}");
    }

    #[test]
    fn missing_pretrained_weights_never_fall_back() {
        let spec = BackboneSpec::new(
            Architecture::Vgg16,
            Weights::Imagenet {
                path: Some("/nonexistent/vgg16_notop.npz".into()),
            },
        );
        let err = build_backbone(&spec).unwrap_err();
        assert!(matches!(err, Error::WeightsUnavailable { .. }), "{err}");
    }

    #[test]
    fn frozen_flags_are_enforced() {
        let mut spec = BackboneSpec::new(Architecture::Tiny, Weights::Random { seed: 0 });
        spec.trainable = true;
        assert!(build_backbone(&spec).is_err());
        spec.trainable = false;
        spec.include_top = true;
        assert!(build_backbone(&spec).is_err());
    }

    #[test]
    fn canonical_preprocessing_adds_no_parameters() {
        let unit = Architecture::Vgg16
            .graph(FeatureShape::new(75, 75, 3), Preprocessing::Unit)
            .unwrap();
        let canon = Architecture::Vgg16
            .graph(FeatureShape::new(75, 75, 3), Preprocessing::Canonical)
            .unwrap();
        assert_eq!(unit.param_count(), canon.param_count());
        assert_eq!(unit.output_shape(), canon.output_shape());
    }

    #[test]
    fn random_weights_are_reproducible() {
        let spec = BackboneSpec::new(Architecture::Tiny, Weights::Random { seed: 9 });
        assert_eq!(build_backbone(&spec).unwrap(), build_backbone(&spec).unwrap());
    }
}
