//! Minimal reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] records primitive ops in execution order; [`Tape::backward`]
//! traverses the record in exact reverse, accumulating gradients. Values
//! are addressed by opaque [`Value`] handles. Any op that produces a
//! non-finite number is a hard error naming the op.

mod ops;

#[allow(unused_imports)]
pub use ops::*;

use crate::error::{Error, Result};

/// Dense n-dimensional value. `grad` is a side slot used for model
/// parameters, populated from the tape after a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::precondition(format!(
                "tensor: {} values do not fill shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, values: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], values: vec![v], grad: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Backward rule of one recorded op: given the output, the gradient
/// flowing into the output, and the input values, produce one gradient
/// buffer per input.
pub trait TapeOp {
    fn name(&self) -> &'static str;
    fn backward(&self, out: &Tensor, out_grad: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn TapeOp>>,
}

/// Record of executed primitive ops; topological order is execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an input (leaf) value.
    pub fn leaf(&mut self, value: Tensor) -> Value {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None });
        Value(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an op node after checking every output value is finite.
    pub fn push_op(
        &mut self,
        inputs: &[Value],
        value: Tensor,
        op: Box<dyn TapeOp>,
    ) -> Result<Value> {
        if let Some(bad) = value.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("op `{}` produced {bad}", op.name())));
        }
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: Some(op),
        });
        Ok(Value(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar node. Gradients are recomputed from
    /// scratch on every call.
    pub fn backward(&mut self, from: Value) -> Result<()> {
        if !self.nodes[from.0].value.is_scalar() {
            return Err(Error::precondition(
                "backward: source node must be scalar".to_string(),
            ));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[from.0][0] = 1.0;

        for i in (0..=from.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let input_values: Vec<&Tensor> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let contributions = op.backward(&node.value, &self.grads[i], &input_values);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (k, contribution) in contributions.into_iter().enumerate() {
                let j = self.nodes[i].inputs[k];
                if let Some(bad) = contribution.iter().find(|g| !g.is_finite()) {
                    let name = self.nodes[i].op.as_ref().unwrap().name();
                    return Err(Error::numeric(format!(
                        "backward of `{name}` produced {bad}"
                    )));
                }
                for (dst, src) in self.grads[j].iter_mut().zip(contribution.iter()) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer of a node after [`Tape::backward`].
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).map(|g| g.as_slice())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}
