use crate::error::Result;
use crate::tensor::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxpool, maxpool_backward, relu,
    relu_backward, GradTape, NetworkParams, Padding, Tensor,
};

/// One step of a feed-forward chain. `layer` indexes into the owning [`NetworkParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Conv { layer: usize, stride: usize, padding: Padding },
    Relu,
    MaxPool { window: usize, stride: usize },
    Fc { layer: usize },
    Reshape { height: usize, width: usize, channels: usize },
}

/// Inputs seen by every op during a forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub ops: Vec<Op>,
}

impl Sequential {
    pub fn new(ops: Vec<Op>) -> Self {
        Sequential { ops }
    }

    pub fn forward(&self, params: &NetworkParams, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for op in &self.ops {
            x = apply(op, params, &x)?;
        }
        Ok(x)
    }

    pub fn forward_traced(&self, params: &NetworkParams, input: &Tensor) -> Result<(Tensor, Trace)> {
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut x = input.clone();
        for op in &self.ops {
            let next = apply(op, params, &x)?;
            inputs.push(x);
            x = next;
        }
        Ok((x, Trace { inputs }))
    }

    /// Backpropagates `upstream` through the chain, accumulating parameter gradients into
    /// `grads` (one tape per layer of `params`). Returns the gradient with respect to the input.
    pub fn backward(
        &self,
        params: &NetworkParams,
        trace: &Trace,
        upstream: Tensor,
        grads: &mut [GradTape],
    ) -> Result<Tensor> {
        let mut g = upstream;
        for (op, input) in self.ops.iter().zip(&trace.inputs).rev() {
            g = match *op {
                Op::Conv { layer, stride, padding } => {
                    let (gi, tape) = conv2d_backward(input, params.layer(layer), stride, padding, &g)?;
                    grads[layer].accumulate(&tape);
                    gi
                }
                Op::Relu => relu_backward(input, &g)?,
                Op::MaxPool { window, stride } => maxpool_backward(input, window, stride, &g)?,
                Op::Fc { layer } => {
                    let (gi, tape) = fully_connected_backward(input, params.layer(layer), &g)?;
                    grads[layer].accumulate(&tape);
                    gi
                }
                Op::Reshape { .. } => Tensor::new(input.height(), input.width(), input.channels(), g.into_data())?,
            };
        }
        Ok(g)
    }
}

fn apply(op: &Op, params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    match *op {
        Op::Conv { layer, stride, padding } => conv2d(x, params.layer(layer), stride, padding),
        Op::Relu => Ok(relu(x)),
        Op::MaxPool { window, stride } => maxpool(x, window, stride),
        Op::Fc { layer } => fully_connected(x, params.layer(layer)),
        Op::Reshape {
            height,
            width,
            channels,
        } => Tensor::new(height, width, channels, x.data().to_vec()),
    }
}
