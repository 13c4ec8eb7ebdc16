//! A small NHWC inference engine for frozen convolutional backbones.
//!
//! Every operation works on a single sample laid out as `(height, width,
//! channels)`. Besides the forward pass each op provides the gradient with
//! respect to its input, which is all that attribution needs: backbone
//! parameters never receive gradients.

mod conv;
mod graph;
mod params;
mod pool;

pub use conv::{conv2d, conv2d_input_grad, depthwise2d, depthwise2d_input_grad};
pub use graph::{FeatureShape, Graph, GraphBuilder, Init, Network, Node, NodeId, Op, ParamSpec, Trace};
pub use params::{ParamStore, ParamTensor};
pub use pool::{avg_pool, avg_pool_input_grad, max_pool, max_pool_input_grad};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding rule, with TensorFlow semantics for `Same`: the output has
/// `ceil(in / stride)` positions and any odd padding goes to the bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Resolved sliding-window geometry along one spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeometry {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_before: usize,
    pub output: usize,
}

impl AxisGeometry {
    pub fn new(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        match padding {
            Padding::Valid => {
                if input < kernel {
                    return Err(Error::Shape(format!(
                        "window {kernel} larger than input extent {input}"
                    )));
                }
                Ok(Self {
                    input,
                    kernel,
                    stride,
                    pad_before: 0,
                    output: (input - kernel) / stride + 1,
                })
            }
            Padding::Same => {
                if input == 0 {
                    return Err(Error::Shape("empty input extent".into()));
                }
                let output = input.div_ceil(stride);
                let needed = (output - 1) * stride + kernel;
                let total = needed.saturating_sub(input);
                Ok(Self {
                    input,
                    kernel,
                    stride,
                    pad_before: total / 2,
                    output,
                })
            }
        }
    }

    /// Input coordinate touched by output `o` at kernel tap `k`, if not padding.
    #[inline]
    pub fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad_before as isize;
        (pos >= 0 && (pos as usize) < self.input).then_some(pos as usize)
    }
}

/// Both spatial axes of a window operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub rows: AxisGeometry,
    pub cols: AxisGeometry,
}

impl Window {
    pub fn new(
        input: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        Ok(Self {
            rows: AxisGeometry::new(input.0, kernel.0, stride.0, padding)?,
            cols: AxisGeometry::new(input.1, kernel.1, stride.1, padding)?,
        })
    }

    pub fn output(&self) -> (usize, usize) {
        (self.rows.output, self.cols.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_tensorflow() {
        // 75 / 2 -> 38 outputs, needs 2 pad, split 1/1
        let g = AxisGeometry::new(75, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.output, g.pad_before), (38, 1));
        // even input, stride 2, kernel 3: one pad, all of it after
        let g = AxisGeometry::new(4, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.output, g.pad_before), (2, 0));
        let g = AxisGeometry::new(5, 1, 2, Padding::Same).unwrap();
        assert_eq!((g.output, g.pad_before), (3, 0));
    }

    #[test]
    fn valid_padding_floors() {
        let g = AxisGeometry::new(75, 3, 2, Padding::Valid).unwrap();
        assert_eq!(g.output, 37);
        assert!(AxisGeometry::new(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn source_skips_padding() {
        let g = AxisGeometry::new(4, 3, 1, Padding::Same).unwrap();
        assert_eq!(g.source(0, 0), None);
        assert_eq!(g.source(0, 1), Some(0));
        assert_eq!(g.source(3, 2), None);
    }
}
