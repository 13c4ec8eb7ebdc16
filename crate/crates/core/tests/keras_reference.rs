//! Layer semantics checked against a Keras-computed reference
//! (`fixtures/gen_keras_ops.py`).

use std::path::Path;

use ndarray::Array3;
use slr_core::nn::{FeatureShape, GraphBuilder, Network, Padding, ParamStore};

#[test]
fn small_graph_matches_keras_output() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/keras_ops.npz");
    let store = ParamStore::load_npz(&path).unwrap();

    let mut b = GraphBuilder::new(FeatureShape::new(10, 9, 3));
    let inp = b.input();
    let x = b.zero_pad("pad", inp, (1, 2, 0, 1));
    let x = b.conv("conv_same", x, 6, (3, 3), (2, 2), Padding::Same, true);
    let x = b.batch_norm("bn", x, 1e-3, true, true);
    let x = b.relu("relu", x);
    let a = b.separable("sep", x, 6, (3, 3), Padding::Same, false);
    let a = b.batch_norm("bn_noscale", a, 1e-3, true, false);
    let p = b.conv("pointwise", x, 6, (1, 1), (1, 1), Padding::Valid, false);
    let x = b.add("add", &[a, p]);
    let x = b.max_pool("maxpool", x, (3, 3), (2, 2), Padding::Same);
    let c = b.avg_pool("avgpool", x, (3, 3), (1, 1), Padding::Same);
    let d = b.conv("conv_valid", x, 4, (2, 3), (1, 2), Padding::Valid, true);
    let d = b.zero_pad("pad2", d, (0, 1, 1, 1));
    let out = b.concat("cat", &[c, d]);
    let graph = b.finish(out).unwrap();
    assert_eq!(graph.output_shape(), FeatureShape::new(4, 3, 10));

    let net = Network::new(graph, &store).unwrap();
    let input: Array3<f64> = store.get("input").unwrap().clone().into_dimensionality().unwrap();
    let expected: Array3<f64> = store.get("output").unwrap().clone().into_dimensionality().unwrap();
    let got = net.forward(input.view()).unwrap();
    let worst = got
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "max relative deviation {worst}");
}
