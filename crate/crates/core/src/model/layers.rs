//! Shapes and analytic costs of the layer types the network uses.
//!
//! FLOP convention: a multiply-add is two operations, each bias add is one,
//! every ReLU or elementwise sum output is one, and max pooling costs one
//! comparison per input element. Reshapes, permutes, concatenation and
//! nearest-neighbour upsampling are free.

/// A convolution-like layer with learned weight and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Square kernel, weight `[cout, cin, k, k]`.
    Conv2d { cin: usize, cout: usize, k: usize },
    /// Weight `[cin, cout, k, k]`, used with stride `k`.
    ConvTranspose2d { cin: usize, cout: usize, k: usize },
    /// Cubic kernel, weight `[cout, cin, k, k, k]`.
    Conv3d { cin: usize, cout: usize, k: usize },
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv2d { cin, cout, k } => vec![cout, cin, k, k],
            LayerSpec::ConvTranspose2d { cin, cout, k } => vec![cin, cout, k, k],
            LayerSpec::Conv3d { cin, cout, k } => vec![cout, cin, k, k, k],
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { cout, .. }
            | LayerSpec::ConvTranspose2d { cout, .. }
            | LayerSpec::Conv3d { cout, .. } => cout,
        }
    }

    pub fn params(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels()
    }

    /// Fan-in used for initialization: inputs feeding one output element.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { cin, k, .. } => cin * k * k,
            // kernel == stride: each output sees exactly one tap per input channel.
            LayerSpec::ConvTranspose2d { cin, .. } => cin,
            LayerSpec::Conv3d { cin, k, .. } => cin * k * k * k,
        }
    }

    /// FLOPs for one sample whose *output* has `out_spatial` positions.
    pub fn flops(&self, out_spatial: u64) -> u64 {
        let out_elems = out_spatial * self.out_channels() as u64;
        match *self {
            LayerSpec::Conv2d { cin, k, .. } => 2 * out_elems * (cin * k * k) as u64 + out_elems,
            // Each output element receives one tap from every input channel.
            LayerSpec::ConvTranspose2d { cin, .. } => 2 * out_elems * cin as u64 + out_elems,
            LayerSpec::Conv3d { cin, k, .. } => {
                2 * out_elems * (cin * k * k * k) as u64 + out_elems
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_params() {
        assert_eq!(
            LayerSpec::Conv2d {
                cin: 4,
                cout: 8,
                k: 3
            }
            .params(),
            296
        );
        assert_eq!(
            LayerSpec::ConvTranspose2d {
                cin: 4,
                cout: 4,
                k: 2
            }
            .params(),
            4 * 4 * 4 + 4
        );
        assert_eq!(
            LayerSpec::Conv3d {
                cin: 8,
                cout: 8,
                k: 3
            }
            .params(),
            8 * 8 * 27 + 8
        );
    }

    #[test]
    fn unit_conv_flops() {
        assert_eq!(
            LayerSpec::Conv2d {
                cin: 1,
                cout: 1,
                k: 1
            }
            .flops(4),
            12
        );
    }
}
