//! Dense row-major tensors with optional tape participation.
//!
//! Values are held as `f64` internally. In the default 32-bit mode every
//! freshly produced buffer is rounded to the nearest `f32` value, so all
//! observable numbers are exactly representable in single precision (and
//! checkpoints, which store `f32`, round-trip bit-exactly). Switching to
//! 64-bit mode skips the rounding step; it exists so gradient checks can
//! reach tight tolerances on the same code path.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::NumError;

/// Floating-point width of all tensor arithmetic on the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatMode {
    /// Default: every produced value is rounded to the nearest `f32`.
    F32,
    /// Full double precision, used by gradient checking.
    F64,
}

thread_local! {
    static FLOAT_MODE: Cell<FloatMode> = const { Cell::new(FloatMode::F32) };
}

pub fn float_mode() -> FloatMode {
    FLOAT_MODE.with(|m| m.get())
}

pub fn set_float_mode(mode: FloatMode) {
    FLOAT_MODE.with(|m| m.set(mode));
}

/// Runs `f` with the given float mode, restoring the previous mode afterwards.
pub fn with_float_mode<R>(mode: FloatMode, f: impl FnOnce() -> R) -> R {
    let prev = float_mode();
    set_float_mode(mode);
    let out = f();
    set_float_mode(prev);
    out
}

/// Rounds a freshly computed buffer according to the active float mode.
pub(crate) fn finalize(mut data: Vec<f64>) -> Vec<f64> {
    if float_mode() == FloatMode::F32 {
        for x in data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
    data
}

/// Encodes (tape id, node index + 1); zero means "not on any tape".
pub(crate) const NODE_NONE: u64 = 0;

pub(crate) fn pack_node(tape_id: u32, index: u32) -> u64 {
    ((tape_id as u64) << 32) | (index as u64 + 1)
}

pub(crate) fn unpack_node(packed: u64) -> Option<(u32, u32)> {
    if packed == NODE_NONE {
        None
    } else {
        Some(((packed >> 32) as u32, (packed & 0xffff_ffff) as u32 - 1))
    }
}

/// Dense n-dimensional array. Cloning is cheap (shared storage); all
/// operations produce new tensors, data is never mutated in place.
#[derive(Clone)]
pub struct Tensor {
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    // Shared across clones so every copy of a value maps to the same tape
    // node; reset whenever the value is rebuilt.
    node: Arc<AtomicU64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NumError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::BadBuffer { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self::from_parts(shape.to_vec(), finalize(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: Arc::new(shape),
            data: Arc::new(data),
            requires_grad: false,
            node: Arc::new(AtomicU64::new(NODE_NONE)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), finalize(vec![value; numel]))
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], finalize(vec![value]))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks this value as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same data, detached from any tape and from gradient tracking.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: Arc::new(AtomicU64::new(NODE_NONE)),
        }
    }

    pub(crate) fn node_packed(&self) -> u64 {
        self.node.load(Ordering::Relaxed)
    }

    pub(crate) fn set_node(&self, packed: u64) {
        self.node.store(packed, Ordering::Relaxed);
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        if self.requires_grad {
            write!(f, " grad")?;
        }
        Ok(())
    }
}
