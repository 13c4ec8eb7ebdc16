//! Full-backbone agreement with Keras. Needs archives written by
//! `tools/export_keras_weights.py --reference` in `$SLR_WEIGHTS_DIR`, so it
//! is ignored by default:
//!
//! ```text
//! SLR_WEIGHTS_DIR=/tmp/kw cargo test -p slr-core --test pretrained_reference -- --ignored
//! ```

use std::path::PathBuf;

use ndarray::Array3;
use slr_core::model::{build_backbone, Architecture, BackboneSpec, Weights, WEIGHTS_DIR_ENV};
use slr_core::nn::ParamStore;

fn check(arch: Architecture) {
    let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) else {
        panic!("{WEIGHTS_DIR_ENV} must point at exported weights");
    };
    let path = PathBuf::from(dir).join(format!("{arch}_notop.npz"));
    let store = ParamStore::load_npz(&path).unwrap();
    let input: Array3<f64> = store
        .get("input")
        .expect("reference input")
        .clone()
        .into_dimensionality()
        .unwrap();
    let expected: Array3<f64> = store
        .get("output")
        .expect("reference output")
        .clone()
        .into_dimensionality()
        .unwrap();

    let spec = BackboneSpec::new(arch, Weights::Imagenet { path: Some(path) });
    let backbone = build_backbone(&spec).unwrap();
    let got = backbone.features(input.view()).unwrap();
    assert_eq!(got.dim(), expected.dim());
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let worst = got
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max);
    assert!(
        worst < 1e-8,
        "{arch}: max deviation {worst} relative to output scale {scale}"
    );
}

#[test]
#[ignore]
fn resnet50_matches_keras() {
    check(Architecture::Resnet50);
}

#[test]
#[ignore]
fn inceptionv3_matches_keras() {
    check(Architecture::Inceptionv3);
}

#[test]
#[ignore]
fn xception_matches_keras() {
    check(Architecture::Xception);
}

#[test]
#[ignore]
fn vgg16_matches_keras() {
    check(Architecture::Vgg16);
}
