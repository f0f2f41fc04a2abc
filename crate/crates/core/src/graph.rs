//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each node stores its value
//! eagerly together with the operation that produced it, so the graph can be
//! re-evaluated after a leaf changes ([`Graph::forward_eval`]) and walked
//! backwards in creation order ([`Graph::backward`]). Node ids are indices
//! into the tape, which makes creation order a topological order.

use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::{Element, IntTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics of a training-mode batchnorm call, used to update the
/// running estimates outside the graph.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n - 1`) variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op<F: Element> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    WeightedSum(NodeId, Tensor<F>),
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: NodeId,
        indices: IntTensor,
    },
    MaxUnpool {
        x: NodeId,
        pool: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        count: usize,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Tensor<F>,
    },
    SoftmaxCe {
        logits: NodeId,
        target: IntTensor,
        probs: Tensor<F>,
    },
    Bilinear {
        x: NodeId,
        factor: usize,
    },
}

impl<F: Element> Op<F> {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::WeightedSum(a, _)
            | Op::Relu(a)
            | Op::MaxPool { x: a, .. }
            | Op::Dropout { x: a, .. }
            | Op::SoftmaxCe { logits: a, .. }
            | Op::Bilinear { x: a, .. } => vec![*a],
            Op::MaxUnpool { x, pool } => vec![*x, *pool],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

fn get<F: Element>(nodes: &[Node<F>], id: NodeId) -> Result<&Tensor<F>> {
    nodes
        .get(id.0)
        .map(|n| &n.value)
        .ok_or_else(|| Error::GraphCorruption(format!("dangling node id {}", id.0)))
}

fn relu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Computes the value of `op` from earlier nodes, refreshing any state the
/// op saves for its backward rule.
fn run<F: Element>(op: &mut Op<F>, nodes: &[Node<F>]) -> Result<Tensor<F>> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::Add(a, b) => get(nodes, *a)?.zip_map(get(nodes, *b)?, |x, y| x + y)?,
        Op::Mul(a, b) => get(nodes, *a)?.zip_map(get(nodes, *b)?, |x, y| x * y)?,
        Op::Scale(a, c) => {
            let c = *c;
            get(nodes, *a)?.map(|v| v * c)
        }
        Op::Sum(a) => Tensor::scalar(get(nodes, *a)?.sum()),
        Op::WeightedSum(a, w) => Tensor::scalar(get(nodes, *a)?.dot(w)?),
        Op::Relu(a) => relu(get(nodes, *a)?),
        Op::Conv2d { x, w, b, stride, pad } => {
            let bias = b.map(|b| get(nodes, b)).transpose()?;
            kernels::conv2d(get(nodes, *x)?, get(nodes, *w)?, bias, *stride, *pad)?
        }
        Op::ConvTranspose2d { x, w, b, stride, pad } => {
            let bias = b.map(|b| get(nodes, b)).transpose()?;
            kernels::conv_transpose2d(get(nodes, *x)?, get(nodes, *w)?, bias, *stride, *pad)?
        }
        Op::MaxPool { x, indices } => {
            let (out, idx) = kernels::maxpool2x2(get(nodes, *x)?)?;
            *indices = idx;
            out
        }
        Op::MaxUnpool { x, pool } => {
            let pool_node = nodes
                .get(pool.0)
                .ok_or_else(|| Error::GraphCorruption(format!("dangling node id {}", pool.0)))?;
            let (indices, source) = match &pool_node.op {
                Op::MaxPool { indices, x } => (indices, *x),
                _ => return Err(Error::GraphCorruption("unpool must reference a max-pool node".into())),
            };
            let shape = get(nodes, source)?.shape().to_vec();
            kernels::max_unpool2x2(get(nodes, *x)?, indices, &shape)?
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean,
            inv_std,
            count,
        } => {
            let xv = get(nodes, *x)?;
            let (m, v, c) = kernels::channel_stats(xv)?;
            if c < 2 {
                return Err(invalid!("training-mode batchnorm needs at least 2 values per channel"));
            }
            *inv_std = v.iter().map(|v| 1.0 / (v + *eps).sqrt()).collect();
            *mean = m;
            *count = c;
            kernels::affine_normalize(xv, mean, inv_std, get(nodes, *gamma)?, get(nodes, *beta)?)?
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => kernels::affine_normalize(get(nodes, *x)?, mean, inv_std, get(nodes, *gamma)?, get(nodes, *beta)?)?,
        Op::Dropout { x, mask } => get(nodes, *x)?.zip_map(mask, |a, m| a * m)?,
        Op::SoftmaxCe { logits, target, probs } => {
            let (loss, p) = kernels::softmax_ce(get(nodes, *logits)?, target)?;
            *probs = p;
            Tensor::scalar(loss)
        }
        Op::Bilinear { x, factor } => kernels::bilinear_upsample(get(nodes, *x)?, *factor)?,
    };
    if !out.all_finite() {
        return Err(Error::Numeric("operation produced a non-finite value".into()));
    }
    Ok(out)
}

/// Observer of the gradient leaving a ReLU backward rule.
pub type ReluHook<'a, F> = &'a mut dyn FnMut(NodeId, &Tensor<F>);

/// Options for a backward pass.
#[derive(Default)]
pub struct BackwardOptions<'a, F: Element> {
    /// Guided mode: every ReLU also zeroes negative incoming gradients.
    pub guided: bool,
    /// Called with the gradient leaving every ReLU backward rule.
    pub relu_hook: Option<ReluHook<'a, F>>,
}

/// Result of a backward pass: `d loss / d node` for every node that requires
/// a gradient.
#[derive(Clone, Debug)]
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of `id`, zero when `id` requires a gradient but is not on a
    /// path to the loss. `None` for nodes that do not require gradients.
    pub fn get(&self, id: NodeId) -> Option<Tensor<F>> {
        if !*self.requires.get(id.0)? {
            return None;
        }
        Some(
            self.grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0])),
        )
    }

    /// Gradient of `id`, zero-filled if none was produced.
    pub fn wrt(&self, id: NodeId) -> Tensor<F> {
        self.grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<F> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn accumulate<F: Element>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::GraphCorruption(format!("dangling node id {}", id.0)));
        }
        Ok(())
    }

    fn push(&mut self, mut op: Op<F>) -> Result<NodeId> {
        let parents = op.parents();
        for &p in &parents {
            self.check(p)?;
        }
        let value = run(&mut op, &self.nodes)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<F>> {
        get(&self.nodes, id)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(|n| n.requires_grad)
    }

    /// Replace the value of a leaf. Dependent nodes keep stale values until
    /// [`Graph::forward_eval`] runs.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<F>) -> Result<()> {
        self.check(id)?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(invalid!("only leaves can be assigned"));
        }
        node.value.expect_same_shape(&value)?;
        node.value = value;
        Ok(())
    }

    /// Pooling indices recorded by a max-pool node.
    pub fn pool_indices(&self, id: NodeId) -> Option<&IntTensor> {
        match &self.nodes.get(id.0)?.op {
            Op::MaxPool { indices, .. } => Some(indices),
            _ => None,
        }
    }

    /// Softmax probabilities recorded by a cross-entropy node.
    pub fn softmax_probs(&self, id: NodeId) -> Option<&Tensor<F>> {
        match &self.nodes.get(id.0)?.op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Re-evaluates every non-leaf node up to `output` in creation order and
    /// returns its value. Dropout masks are reused, so re-evaluation with
    /// unchanged leaves is bit-identical.
    pub fn forward_eval(&mut self, output: NodeId) -> Result<Tensor<F>> {
        self.check(output)?;
        for i in 0..=output.0 {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(p) = node.op.parents().into_iter().find(|p| p.0 >= i) {
                return Err(Error::GraphCorruption(format!(
                    "node {i} references node {} that is not computed before it",
                    p.0
                )));
            }
            node.value = run(&mut node.op, before)?;
        }
        Ok(self.nodes[output.0].value.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    /// `Σ a_i · weights_i` with constant weights.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor<F>) -> Result<NodeId> {
        self.push(Op::WeightedSum(a, weights))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed convolution with weights `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push(Op::ConvTranspose2d { x, w, b, stride, pad })
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MaxPool {
            x,
            indices: IntTensor::zeros(&[1]),
        })
    }

    /// Scatters `x` into the positions recorded by the max-pool node `pool`.
    pub fn max_unpool2x2(&mut self, x: NodeId, pool: NodeId) -> Result<NodeId> {
        self.push(Op::MaxUnpool { x, pool })
    }

    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        if eps <= 0.0 {
            return Err(invalid!("batchnorm epsilon must be positive"));
        }
        let id = self.push(Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean: vec![],
            inv_std: vec![],
            count: 0,
        })?;
        let Op::BatchNormTrain {
            mean, inv_std, count, ..
        } = &self.nodes[id.0].op
        else {
            unreachable!()
        };
        let n = *count as f64;
        let var = inv_std
            .iter()
            .map(|s| (1.0 / (s * s) - eps).max(0.0) * n / (n - 1.0))
            .collect();
        Ok((
            id,
            BatchStats {
                mean: mean.clone(),
                var,
            },
        ))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(invalid!("batchnorm epsilon must be positive"));
        }
        running_mean.expect_same_shape(running_var)?;
        let mean = running_mean.data().iter().map(|v| v.as_f64()).collect();
        let inv_std = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
            .collect();
        self.push(Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        })
    }

    /// Inverted dropout: units kept with probability `1 - rate` and scaled
    /// by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid!("dropout rate must be in [0, 1), got {rate}"));
        }
        let shape = self.value(x)?.shape().to_vec();
        let keep = 1.0 - rate;
        let scale = F::of_f64(1.0 / keep);
        let mask = if rate == 0.0 {
            Tensor::full(&shape, F::one())
        } else {
            Tensor::from_fn(&shape, |_| if rng.bernoulli(keep) { scale } else { F::zero() })
        };
        self.push(Op::Dropout { x, mask })
    }

    /// Mean per-pixel softmax cross-entropy; probabilities are available
    /// through [`Graph::softmax_probs`].
    pub fn softmax_ce(&mut self, logits: NodeId, target: IntTensor) -> Result<NodeId> {
        self.push(Op::SoftmaxCe {
            logits,
            target,
            probs: Tensor::zeros(&[1]),
        })
    }

    pub fn bilinear_upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::Bilinear { x, factor })
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        self.backward_with(loss, BackwardOptions::default())
    }

    pub fn backward_with(&self, loss: NodeId, mut opts: BackwardOptions<'_, F>) -> Result<Gradients<F>> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(invalid!("loss must be scalar, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(NodeId(i), &g, &mut grads, &mut opts)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn backward_op(
        &self,
        id: NodeId,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        opts: &mut BackwardOptions<'_, F>,
    ) -> Result<()> {
        let wants = |n: NodeId| self.nodes[n.0].requires_grad;
        let val = |n: NodeId| &self.nodes[n.0].value;
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c))?;
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()))?,
            Op::WeightedSum(a, w) => {
                let s = g.item();
                accumulate(grads, *a, w.map(|v| v * s))?
            }
            Op::Relu(a) => {
                let guided = opts.guided;
                let gi = val(*a).zip_map(g, |x, gv| {
                    if x > F::zero() && (!guided || gv > F::zero()) {
                        gv
                    } else {
                        F::zero()
                    }
                })?;
                if let Some(hook) = opts.relu_hook.as_mut() {
                    hook(id, &gi);
                }
                accumulate(grads, *a, gi)?;
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, wants(*x))?;
                if let Some(gx) = cg.input {
                    accumulate(grads, *x, gx)?;
                }
                if wants(*w) {
                    accumulate(grads, *w, cg.weight)?;
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    accumulate(grads, b, cg.bias)?;
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let cg = kernels::conv_transpose2d_backward(val(*x), val(*w), g, *stride, *pad, wants(*x))?;
                if let Some(gx) = cg.input {
                    accumulate(grads, *x, gx)?;
                }
                if wants(*w) {
                    accumulate(grads, *w, cg.weight)?;
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    accumulate(grads, b, cg.bias)?;
                }
            }
            Op::MaxPool { x, indices } => {
                accumulate(grads, *x, kernels::max_unpool2x2(g, indices, val(*x).shape())?)?;
            }
            Op::MaxUnpool { x, pool } => {
                let indices = self
                    .pool_indices(*pool)
                    .ok_or_else(|| Error::GraphCorruption("unpool lost its pool node".into()))?;
                if wants(*x) {
                    accumulate(grads, *x, kernels::gather_windows(g, indices)?)?;
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                count,
                ..
            } => {
                let (sum_g, sum_gx) = kernels::bn_reductions(val(*x), g, mean, inv_std)?;
                if wants(*x) {
                    let gx = kernels::bn_train_input_grad(val(*x), g, val(*gamma), mean, inv_std, &sum_g, &sum_gx, *count)?;
                    accumulate(grads, *x, gx)?;
                }
                self.bn_param_grads(*gamma, *beta, &sum_g, &sum_gx, grads)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (sum_g, sum_gx) = kernels::bn_reductions(val(*x), g, mean, inv_std)?;
                if wants(*x) {
                    accumulate(grads, *x, kernels::bn_eval_input_grad(g, val(*gamma), inv_std)?)?;
                }
                self.bn_param_grads(*gamma, *beta, &sum_g, &sum_gx, grads)?;
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, g.zip_map(mask, |a, m| a * m)?)?,
            Op::SoftmaxCe { logits, target, probs } => {
                accumulate(grads, *logits, kernels::softmax_ce_grad(probs, target, g.item()))?
            }
            Op::Bilinear { x, factor } => {
                accumulate(grads, *x, kernels::bilinear_upsample_backward(g, val(*x).shape(), *factor)?)?
            }
        }
        Ok(())
    }

    fn bn_param_grads(
        &self,
        gamma: NodeId,
        beta: NodeId,
        sum_g: &[f64],
        sum_gx: &[f64],
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let to_tensor = |v: &[f64]| Tensor::new(&[v.len()], v.iter().map(|&x| F::of_f64(x)).collect());
        if self.nodes[gamma.0].requires_grad {
            accumulate(grads, gamma, to_tensor(sum_gx)?)?;
        }
        if self.nodes[beta.0].requires_grad {
            accumulate(grads, beta, to_tensor(sum_g)?)?;
        }
        Ok(())
    }
}
