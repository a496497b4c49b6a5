//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Every differentiable quantity in the crate is a [`Tensor`]: an immutable
//! n-dimensional array plus an optional record of the operation that produced
//! it. Operations build a DAG; [`Tensor::backward`] replays it in reverse
//! topological order and accumulates adjoints into each node that lies on a
//! path to a gradient-requiring leaf.
//!
//! All arithmetic is 64-bit. Graphs are single-threaded and ephemeral: a
//! training step builds fresh leaf tensors from the parameter store, runs
//! forward, calls backward, and drops the graph.

mod io;
mod norm;
mod ops;
mod optim;

pub use io::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use norm::{bn_restore, bn_snapshot, normalize_to_stats, BatchNorm};
pub use optim::{Adam, AdamConfig, Leaves, ParamEntry, ParamId, ParamStore};

pub(crate) use ops::im2col;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Adjoint function: given the output adjoint, produce one optional adjoint
/// contribution per parent (None for parents off the gradient path).
pub(crate) type Vjp = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Inner {
    id: u64,
    value: ArrayD<f64>,
    needs_grad: bool,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

/// Dense array of 64-bit reals participating in reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("needs_grad", &self.inner.needs_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(
        value: ArrayD<f64>,
        needs_grad: bool,
        parents: Vec<Tensor>,
        vjp: Option<Vjp>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                needs_grad,
                grad: RefCell::new(None),
                parents,
                vjp,
            }),
        }
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(value: ArrayD<f64>) -> Tensor {
        Tensor::from_parts(value, true, Vec::new(), None)
    }

    /// Leaf excluded from differentiation (frozen weights, data, masks).
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::from_parts(value, false, Vec::new(), None)
    }

    /// 0-dimensional constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// 0-dimensional gradient-requiring leaf.
    pub fn scalar_param(v: f64) -> Tensor {
        Tensor::param(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| Error::shape(format!("from_vec: {e}")))?;
        Ok(Tensor::constant(arr))
    }

    /// New node produced by an operation. Drops the vjp when no parent is on
    /// a gradient path, so dead subgraphs cost nothing at backward time.
    pub(crate) fn op(value: ArrayD<f64>, parents: Vec<Tensor>, vjp: Vjp) -> Tensor {
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        let vjp = if needs { Some(vjp) } else { None };
        Tensor::from_parts(value, needs, parents, vjp)
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.inner.value.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Accumulated gradient, if backward has visited this node.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Same value, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.value.clone())
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of {} elements",
                self.numel()
            )));
        }
        Ok(*self.inner.value.iter().next().expect("nonempty"))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// lies on a path from the loss to a gradient-requiring leaf, visiting
    /// each node exactly once in reverse topological order.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.needs_grad {
            return Err(Error::Contract(
                "backward on a tensor with no gradient path".into(),
            ));
        }
        let tape = Tape::record(self);
        let seed = ArrayD::from_elem(self.inner.value.raw_dim(), 1.0);
        *self.inner.grad.borrow_mut() = Some(seed);
        for node in tape.nodes.iter().rev() {
            let out_grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            let vjp = match &node.inner.vjp {
                Some(v) => v,
                None => continue,
            };
            let contributions = vjp(&out_grad);
            debug_assert_eq!(contributions.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !parent.inner.needs_grad {
                    continue;
                }
                debug_assert_eq!(c.shape(), parent.shape(), "adjoint shape mismatch");
                let mut slot = parent.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &c,
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the operations reachable from a root.
///
/// Replaying adjoints over `nodes` in reverse visits each node exactly once,
/// parents always after all of their consumers.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Record the subgraph reachable from `root` that sits on a gradient
    /// path, in topological order (parents before consumers).
    pub fn record(root: &Tensor) -> Tape {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // Iterative DFS with an explicit phase marker to get post-order.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) || !node.inner.needs_grad {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                stack.push((p.clone(), false));
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must be a pure, RNG-free scalar function of its arguments, evaluated
/// at a point farther than `h` from any non-smooth point (ReLU kinks, abs
/// kinks, ties inside min/max selections). Returns the maximum over all
/// coordinates of `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn grad_check<F>(f: F, params: &[ArrayD<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::Parameter("grad_check: h must be positive".into()));
    }
    let leaves: Vec<Tensor> = params.iter().map(|p| Tensor::param(p.clone())).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .unwrap_or_else(|| ArrayD::zeros(l.value().raw_dim()))
        })
        .collect();

    let eval = |arrays: &[ArrayD<f64>]| -> Result<f64> {
        let leaves: Vec<Tensor> = arrays.iter().map(|a| Tensor::param(a.clone())).collect();
        f(&leaves)?.item()
    };

    let mut max_rel = 0.0f64;
    let mut point: Vec<ArrayD<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for idx in 0..param.len() {
            let orig = param.as_slice().expect("standard layout")[idx];
            point[pi].as_slice_mut().unwrap()[idx] = orig + h;
            let fp = eval(&point)?;
            point[pi].as_slice_mut().unwrap()[idx] = orig - h;
            let fm = eval(&point)?;
            point[pi].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::param(arr1(v).into_dyn())
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = t1(&[1.0, -2.0, 3.0]);
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), arr1(&[1.0, 1.0, 1.0]).into_dyn());
    }

    #[test]
    fn backward_square_at_three() {
        let x = t1(&[3.0]);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), arr1(&[6.0]).into_dyn());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t1(&[1.0, 2.0]);
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        // loss = sum(x*x + 3x) -> grad = 2x + 3
        let x = t1(&[1.5, -0.5]);
        let a = x.mul(&x).unwrap();
        let b = x.mul_scalar(3.0);
        let loss = a.add(&b).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[[0]] - 6.0).abs() < 1e-12);
        assert!((g[[1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tape_visits_each_node_once() {
        let x = t1(&[1.0, 2.0]);
        let y = x.mul(&x).unwrap();
        let z = y.add(&y).unwrap(); // y appears twice as parent
        let loss = z.sum_all();
        let tape = Tape::record(&loss);
        // x, y, z, loss -> 4 distinct nodes despite the diamond.
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |p| Ok(p[0].mul(&p[0])?.sum_all()),
            &[arr1(&[3.0]).into_dyn()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn grad_check_sigmoid_affine() {
        // f = sum(sigmoid(w*x + b)) over a tiny affine map.
        let w = ndarray::Array::from_shape_vec((2, 3), vec![0.3, -0.7, 0.2, 0.5, 0.1, -0.4])
            .unwrap()
            .into_dyn();
        let x = ndarray::Array::from_shape_vec((3, 2), vec![0.2, -0.1, 0.7, 0.4, -0.3, 0.6])
            .unwrap()
            .into_dyn();
        let err = grad_check(
            |p| Ok(p[0].matmul(&p[1])?.sigmoid().sum_all()),
            &[w, x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = t1(&[2.0]);
        let d = x.mul(&x).unwrap().detach();
        let loss = x.mul(&d).unwrap().sum_all();
        loss.backward().unwrap();
        // d treated as constant 4 -> grad = 4, not 3x^2 = 12.
        assert!((x.grad().unwrap()[[0]] - 4.0).abs() < 1e-12);
    }
}
