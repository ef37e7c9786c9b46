//! Reverse-mode tape. One implicit tape per thread; operations append
//! nodes whenever a differentiable value is involved, and `backward`
//! replays them once in reverse topological order.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

use super::ops::{accumulate, Op};
use super::tensor::{pack_node, unpack_node, Tensor};
use super::NumError;

pub(crate) struct Node {
    pub op: Op,
    /// Grad targets aligned with the op's input slots; `None` for inputs
    /// that do not receive gradients (plain constants).
    pub inputs: Vec<Option<u32>>,
}

pub(crate) struct Tape {
    pub id: u32,
    pub nodes: Vec<Node>,
}

// Tape ids are globally unique so a tensor created under one tape can never
// be mistaken for a node of another (including tapes on other threads).
static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape {
        id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
        nodes: Vec::new(),
    });
    static GRAD_OFF: Cell<u32> = const { Cell::new(0) };
}

/// Drops all recorded nodes and starts a fresh tape generation. Tensors
/// recorded earlier silently become constants.
pub fn reset_tape() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
        t.nodes.clear();
    });
}

/// Number of nodes on the active tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

pub fn is_grad_enabled() -> bool {
    GRAD_OFF.with(|g| g.get() == 0)
}

/// Runs `f` with recording disabled (nestable).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_OFF.with(|g| g.set(g.get() + 1));
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_OFF.with(|g| g.set(g.get() - 1));
        }
    }
    let _guard = Guard;
    f()
}

/// Records `op` if recording is enabled and any input participates in
/// differentiation. Leaves are registered on first use.
pub(crate) fn record(op: Op, inputs: &[&Tensor], out: &Tensor) {
    if !is_grad_enabled() {
        return;
    }
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        let tid = tape.id;
        let involved = inputs.iter().any(|i| {
            i.requires_grad() || matches!(unpack_node(i.node_packed()), Some((id, _)) if id == tid)
        });
        if !involved {
            return;
        }
        let slots: Vec<Option<u32>> = inputs
            .iter()
            .map(|i| match unpack_node(i.node_packed()) {
                Some((id, idx)) if id == tid => Some(idx),
                _ if i.requires_grad() => {
                    let idx = tape.nodes.len() as u32;
                    tape.nodes.push(Node { op: Op::Leaf, inputs: vec![] });
                    i.set_node(pack_node(tid, idx));
                    Some(idx)
                }
                _ => None,
            })
            .collect();
        let idx = tape.nodes.len() as u32;
        tape.nodes.push(Node { op, inputs: slots });
        out.set_node(pack_node(tid, idx));
    });
}

/// Gradient map produced by [`backward`]: node id → gradient tensor.
pub struct Gradients {
    tape_id: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` was on the tape
    /// and gradient flowed to it.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        match unpack_node(t.node_packed()) {
            Some((id, idx)) if id == self.tape_id => self.grads.get(idx as usize)?.as_ref(),
            _ => None,
        }
    }

    /// Gradient by raw node id.
    pub fn by_node(&self, idx: u32) -> Option<&Tensor> {
        self.grads.get(idx as usize)?.as_ref()
    }

    pub fn tape_id(&self) -> u32 {
        self.tape_id
    }
}

/// Reverse sweep from a scalar loss. Every reachable `requires_grad` leaf
/// ends up with a gradient of its own shape; fan-out accumulates additively.
pub fn backward(loss: &Tensor) -> Result<Gradients, NumError> {
    if loss.numel() != 1 {
        return Err(NumError::NonScalarLoss(loss.shape().to_vec()));
    }
    let (tid, loss_idx) = TAPE.with(|t| {
        let tape = t.borrow();
        match unpack_node(loss.node_packed()) {
            Some((id, idx)) if id == tape.id && (idx as usize) < tape.nodes.len() => {
                Ok((id, idx as usize))
            }
            _ => Err(NumError::DetachedLoss),
        }
    })?;

    no_grad(|| {
        TAPE.with(|t| {
            let tape = t.borrow();
            let mut grads: Vec<Option<Tensor>> = vec![None; tape.nodes.len()];
            grads[loss_idx] = Some(Tensor::ones(loss.shape()));
            for i in (0..=loss_idx).rev() {
                let node = &tape.nodes[i];
                if matches!(node.op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[i].clone() else { continue };
                let input_grads = node.op.vjp(&g);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (slot, gin) in node.inputs.iter().zip(input_grads) {
                    if let (Some(j), Some(gin)) = (slot, gin) {
                        let j = *j as usize;
                        grads[j] = Some(match grads[j].take() {
                            Some(prev) => accumulate(&prev, &gin),
                            None => gin,
                        });
                    }
                }
            }
            Ok(Gradients { tape_id: tid, grads })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        reset_tape();
        let x = t1(&[1.0, 2.0, 3.0]).with_grad();
        let loss = ops::sum_all(&x).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_gradient() {
        reset_tape();
        let x = t1(&[1.0, 2.0, 3.0]).with_grad();
        let loss = ops::sum_all(&ops::mul(&x, &x).unwrap()).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates() {
        reset_tape();
        let x = t1(&[3.0]).with_grad();
        let z = ops::add(&x, &x).unwrap();
        let loss = ops::sum_all(&z).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        reset_tape();
        let x = t1(&[1.0, 2.0]).with_grad();
        let y = ops::mul(&x, &x).unwrap();
        assert!(matches!(backward(&y), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        reset_tape();
        let x = t1(&[1.0]);
        // x does not require grad, so nothing was recorded
        let y = ops::sum_all(&x).unwrap();
        assert!(matches!(backward(&y), Err(NumError::DetachedLoss)));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        reset_tape();
        let x = t1(&[1.0, 2.0]).with_grad();
        let before = tape_len();
        let _ = no_grad(|| ops::mul(&x, &x).unwrap());
        assert_eq!(tape_len(), before);
    }

    #[test]
    fn constants_get_no_gradient() {
        reset_tape();
        let x = t1(&[2.0]).with_grad();
        let c = t1(&[5.0]);
        let loss = ops::sum_all(&ops::mul(&x, &c).unwrap()).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[5.0]);
        assert!(g.get(&c).is_none());
    }

    #[test]
    fn stale_tensors_become_constants() {
        reset_tape();
        let x = t1(&[2.0]).with_grad();
        let y = ops::mul(&x, &x).unwrap();
        reset_tape();
        // y carries a node handle from the dead tape; using it must not panic
        // and must not leak gradient back to x.
        let z = t1(&[1.0]).with_grad();
        let loss = ops::sum_all(&ops::mul(&y, &z).unwrap()).unwrap();
        let g = backward(&loss).unwrap();
        assert!(g.get(&x).is_none());
        assert_eq!(g.get(&z).unwrap().data(), &[4.0]);
    }
}
