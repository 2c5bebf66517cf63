//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op as a node whose index is larger than
//! the indices of its inputs, so the tape is acyclic and its index order is a
//! topological order. [`Graph::backward`] walks it once in reverse, applying
//! each op's vector-Jacobian product. Nodes none of whose inputs require a
//! gradient are stored as constants and never visited.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, attention, conv, linear as lin, loss, norm, shape, ConvParams, NormLayout};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    #[default]
    Direct,
    Im2col,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: ConvParams,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        eps: T,
    },
    Gelu(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddTrailing {
        x: Var,
        bias: Var,
    },
    ScaleChannels {
        x: Var,
        gamma: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum(Var),
    ToTokens {
        x: Var,
        h: usize,
        w: usize,
    },
    ConcatSeq {
        a: Var,
        b: Var,
        split: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
    conv_algo: ConvAlgo,
    warnings: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that tracks gradients for trainable parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
            conv_algo: ConvAlgo::Direct,
            warnings: Vec::new(),
        }
    }

    /// A graph in which nothing requires a gradient.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A free leaf that receives a gradient (for inputs under test).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Register a named parameter. Registering the same name twice returns the
    /// original node, so tied weights share one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push_leaf(value.clone(), trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let y = match self.conv_algo {
            ConvAlgo::Direct => ops::conv2d(x, w, b, params)?,
            ConvAlgo::Im2col => ops::conv2d_im2col(x, w, b, params)?,
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
            &inputs,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, layout: NormLayout, eps: T) -> Result<Var> {
        let y = norm::layer_norm(self.value(x), layout, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let layout = NormLayout::channels(self.value(x).shape())?;
        self.layer_norm(x, gamma, beta, layout, eps)
    }

    pub fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let layout = NormLayout::last(self.value(x).shape())?;
        self.layer_norm(x, gamma, beta, layout, eps)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = lin::linear(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(y, Op::Linear { x, weight, bias }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_trailing(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = shape::add_trailing(self.value(x), self.value(bias))?;
        Ok(self.push(y, Op::AddTrailing { x, bias }, &[x, bias]))
    }

    pub fn scale_channels(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let y = shape::scale_channels(self.value(x), self.value(gamma))?;
        Ok(self.push(y, Op::ScaleChannels { x, gamma }, &[x, gamma]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).scale(factor);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = shape::to_tokens(xv)?;
        let (h, w) = (xv.dim(2), xv.dim(3));
        Ok(self.push(y, Op::ToTokens { x, h, w }, &[x]))
    }

    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = shape::concat_seq(self.value(a), self.value(b))?;
        let split = self.value(a).dim(1);
        Ok(self.push(y, Op::ConcatSeq { a, b, split }, &[a, b]))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let y = shape::gather_rows(self.value(table), ids, lead)?;
        Ok(self.push(
            y,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let y = attention::causal_attention(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(y, Op::Attention { q, k, v, heads }, &[q, k, v]))
    }

    /// Masked mean cross-entropy of `[..., V]` logits. An all-masked input
    /// yields zero and records a warning.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let ce = loss::softmax_cross_entropy(self.value(logits), targets, mask)?;
        if ce.all_masked {
            self.warnings
                .push("cross_entropy: every position is masked; loss defined as 0".into());
        }
        Ok(self.push(
            Tensor::scalar(ce.loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if out.requires_grad {
            grads[output.0] = Some(Tensor::ones(out.value.shape()));
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, op: &Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            } => {
                let need = [rg(*input), rg(*weight), bias.is_some_and(rg)];
                let cg = conv::conv2d_backward(self.value(*input), self.value(*weight), &g, *params, need)?;
                if let Some(t) = cg.input {
                    self.accumulate(grads, *input, t)?;
                }
                if let Some(t) = cg.weight {
                    self.accumulate(grads, *weight, t)?;
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, t)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                eps,
            } => {
                let ng = norm::layer_norm_backward(self.value(*x), *layout, self.value(*gamma), *eps, &g);
                self.accumulate(grads, *x, ng.input)?;
                self.accumulate(grads, *gamma, ng.gamma)?;
                self.accumulate(grads, *beta, ng.beta)?;
            }
            Op::Gelu(x) => {
                let gx = ops::activation::gelu_backward(self.value(*x), &g);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Linear { x, weight, bias } => {
                let need = [rg(*x), rg(*weight), bias.is_some_and(rg)];
                let lg = lin::linear_backward(self.value(*x), self.value(*weight), &g, need);
                if let Some(t) = lg.input {
                    self.accumulate(grads, *x, t)?;
                }
                if let Some(t) = lg.weight {
                    self.accumulate(grads, *weight, t)?;
                }
                if let (Some(b), Some(t)) = (bias, lg.bias) {
                    self.accumulate(grads, *b, t)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g)?;
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddTrailing { x, bias } => {
                if rg(*bias) {
                    let gb = shape::add_trailing_backward(self.value(*bias).shape(), &g);
                    self.accumulate(grads, *bias, gb)?;
                }
                self.accumulate(grads, *x, g)?;
            }
            Op::ScaleChannels { x, gamma } => {
                let (gx, gg) = shape::scale_channels_backward(self.value(*x), self.value(*gamma), &g);
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *gamma, gg)?;
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.scale(*factor))?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, gx)?;
            }
            Op::ToTokens { x, h, w } => {
                self.accumulate(grads, *x, shape::from_tokens(&g, *h, *w))?;
            }
            Op::ConcatSeq { a, b, split } => {
                let (ga, gb) = shape::split_seq(&g, *split);
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Gather { table, ids } => {
                let gt = shape::gather_rows_backward(self.value(*table).shape(), ids, &g);
                self.accumulate(grads, *table, gt)?;
            }
            Op::Attention { q, k, v, heads } => {
                let ag = attention::causal_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    &g,
                );
                self.accumulate(grads, *q, ag.q)?;
                self.accumulate(grads, *k, ag.k)?;
                self.accumulate(grads, *v, ag.v)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let gl = loss::softmax_cross_entropy_backward(self.value(*logits), targets, mask, g.item());
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter, if it was on the tape and reachable.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    pub fn take_param(&mut self, name: &str) -> Option<Tensor<T>> {
        let v = *self.params.get(name)?;
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn on_tape(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }
}
