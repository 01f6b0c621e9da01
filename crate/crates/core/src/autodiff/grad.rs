use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{compute, higher_order_enabled, with_recording, Op, Tensor, TensorId, View};
use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(0);

/// Topologically ordered list of the graph nodes reachable from a root.
pub struct Tape {
    nodes: Vec<Tensor>,
    generation: u64,
}

impl Tape {
    /// Collects every gradient-tracking tensor the root depends on, inputs
    /// before consumers.
    pub fn record(root: &Tensor) -> Tape {
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Tape {
            nodes,
            generation: GENERATION.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    /// Operation kinds in tape order (leaves report `"leaf"`).
    pub fn kinds(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.node().map_or("leaf", |n| n.op.kind()))
            .collect()
    }

    /// Re-evaluates every node from the stored leaf values and checks each
    /// result against the recorded output, bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut values: HashMap<TensorId, (Vec<f64>, Vec<usize>)> = HashMap::new();
        for t in &self.nodes {
            let Some(node) = t.node() else {
                continue;
            };
            let views: Vec<View<'_>> = node
                .inputs
                .iter()
                .map(|i| match values.get(&i.id()) {
                    Some((d, s)) => View { data: d, shape: s },
                    None => View::of(i),
                })
                .collect();
            let (data, shape) = compute(&node.op, &views)?;
            let same = shape == t.shape()
                && data
                    .iter()
                    .zip(t.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
            values.insert(t.id(), (data, shape));
        }
        Ok(true)
    }
}

/// Gradients keyed by the tensor they were taken with respect to.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    /// Gradient for `t`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Gradient of a scalar loss with respect to every gradient-tracking leaf.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    let map = propagate(loss, None, false)?;
    Ok(Gradients { map })
}

/// Gradients of `loss` with respect to `params` as plain (detached) values.
pub fn grad(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut map = propagate(loss, Some(params), false)?;
    Ok(params
        .iter()
        .map(|p| map.remove(&p.id()).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Gradients of `loss` with respect to `params` that are themselves recorded
/// on the graph, so expressions of them can be differentiated again.
pub fn grad_graph(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>> {
    if !higher_order_enabled() {
        return Err(Error::Autodiff(
            "higher-order differentiation is disabled; use first-order MAML".into(),
        ));
    }
    let mut map = propagate(loss, Some(params), true)?;
    Ok(params
        .iter()
        .map(|p| map.remove(&p.id()).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

fn propagate(
    loss: &Tensor,
    targets: Option<&[Tensor]>,
    create_graph: bool,
) -> Result<HashMap<TensorId, Tensor>> {
    if loss.numel() != 1 {
        return Err(Error::Autodiff(format!(
            "loss must be a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Autodiff(
            "loss is detached from every gradient-tracking tensor".into(),
        ));
    }
    let tape = Tape::record(loss);
    let target_ids: Option<HashSet<TensorId>> =
        targets.map(|ts| ts.iter().map(Tensor::id).collect());

    // Which nodes lead to a requested leaf.
    let mut reaches: HashSet<TensorId> = HashSet::new();
    for t in tape.nodes() {
        let hit = match t.node() {
            None => target_ids.as_ref().is_none_or(|ids| ids.contains(&t.id())),
            Some(node) => node.inputs.iter().any(|i| reaches.contains(&i.id())),
        };
        if hit {
            reaches.insert(t.id());
        }
    }

    with_recording(create_graph, || {
        let mut grads: HashMap<TensorId, Tensor> = HashMap::new();
        grads.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
        for t in tape.nodes().iter().rev() {
            let Some(node) = t.node() else {
                continue;
            };
            if !reaches.contains(&t.id()) {
                continue;
            }
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| reaches.contains(&i.id()))
                .collect();
            let input_grads = vjp(&node.op, &node.inputs, t, &g, &needs)?;
            for ((input, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (true, Some(gi)) = (*need, gi) else {
                    continue;
                };
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                grads.insert(input.id(), acc);
            }
        }
        // Interior gradients were consumed above; only leaves remain.
        Ok(grads)
    })
}

/// Constant mask tensor with `f(x)` per element of `x`.
fn mask(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.data().iter().map(|&v| f(v)).collect(), x.shape())
        .expect("mask keeps shape")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Vector-Jacobian product of one primitive, expressed with tensor ops so it
/// can itself be recorded.
fn vjp(
    op: &Op,
    inputs: &[Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let a = &inputs[0];
    let only = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), Some(g.neg())]),
        Op::Mul => {
            let b = &inputs[1];
            Ok(vec![
                if needs[0] { Some(g.mul(b)?) } else { None },
                if needs[1] { Some(g.mul(a)?) } else { None },
            ])
        }
        Op::Scale(c) => only(Ok(g.scale(*c))),
        Op::Shift(_) => only(Ok(g.clone())),
        &Op::Matmul { ta, tb } => {
            let b = &inputs[1];
            let da = if !needs[0] {
                None
            } else if ta {
                Some(b.matmul_t(g, tb, true)?)
            } else {
                Some(g.matmul_t(b, false, !tb)?)
            };
            let db = if !needs[1] {
                None
            } else if tb {
                Some(g.matmul_t(a, true, ta)?)
            } else {
                Some(a.matmul_t(g, !ta, false)?)
            };
            Ok(vec![da, db])
        }
        Op::Transpose => only(g.t()),
        Op::Reshape(_) => only(g.reshape(a.shape())),
        Op::Permute(p) => only(g.permute(&inverse_perm(p))),
        Op::BroadcastTo(_) => only(g.sum_to(a.shape())),
        Op::SumTo(_) => only(g.broadcast_to(a.shape())),
        Op::Sum => only(g.broadcast_to(a.shape())),
        Op::Mean => only(Ok(g.broadcast_to(a.shape())?.scale(1.0 / a.numel() as f64))),
        Op::Relu => only(g.mul(&mask(a, |x| if x > 0.0 { 1.0 } else { 0.0 }))),
        Op::LeakyRelu(s) => only(g.mul(&mask(a, |x| if x > 0.0 { 1.0 } else { *s }))),
        Op::Exp => only(g.mul(out)),
        Op::Log => only(g.mul(&a.recip())),
        // σ' = σ(1 − σ)
        Op::Sigmoid => only(g.mul(&out.mul(&out.neg().shift(1.0))?)),
        Op::Square => only(g.mul(&a.scale(2.0))),
        Op::Sqrt => only(g.mul(&out.recip().scale(0.5))),
        // d(1/x) = −1/x²
        Op::Recip => only(g.mul(&out.square().neg())),
        Op::ClampMin(m) => only(g.mul(&mask(a, |x| if x > *m { 1.0 } else { 0.0 }))),
        Op::Softmax(axis) => {
            // y ⊙ (g − Σ_axis g ⊙ y)
            let gy = g.mul(out)?;
            let s = gy.sum_axis(*axis)?.broadcast_to(out.shape())?;
            only(out.mul(&g.sub(&s)?))
        }
        Op::Im2col(geom) => only(g.col2im(geom)),
        Op::Col2im(geom) => only(g.im2col(geom)),
    }
}
