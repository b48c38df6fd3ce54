//! Dense tensor type with reverse-mode automatic differentiation.
//!
//! Tensors are plain row-major buffers (N,C,H,W layout for image data).
//! Differentiable ops record nodes on a [`Tape`]; `Tape::backward` walks the
//! nodes in strict reverse append order, accumulating gradients additively
//! into every `requires_grad` leaf reachable from the root.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

pub mod ops;

/// Scalar element type: f32 for training, f64 for gradient checking.
pub trait Elem: num_traits::Float + fmt::Debug + 'static {
    /// Row-major C[m,n] += A[m,k] * B[k,n] (beta=1) or overwrite (beta=0).
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn from_usize(v: usize) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
}

impl Elem for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Elem for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("degenerate batch: batch norm in train mode needs at least 2 values per channel")]
    DegenerateBatch,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

/// Shared handle to a dense array. Cloning is cheap (reference count bump);
/// all clones view the same data and gradient buffer.
pub struct Tensor<T: Elem>(Rc<RefCell<TensorData<T>>>);

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.borrow();
        write!(f, "Tensor{:?}(requires_grad={})", d.shape, d.requires_grad)
    }
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DimensionMismatch(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(RefCell::new(TensorData {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }))))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); numel]).unwrap()
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).unwrap()
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value]).unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.0.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.borrow().data.clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.borrow();
        assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        d.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        let mut d = self.0.borrow_mut();
        d.requires_grad = v;
        if !v {
            d.grad = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrite the values in place (shape must match). Used by the optimizer.
    pub fn set_data(&self, new: &[T]) {
        let mut d = self.0.borrow_mut();
        assert_eq!(d.data.len(), new.len(), "set_data length mismatch");
        d.data.copy_from_slice(new);
    }

    pub fn map_data(&self, f: impl FnMut(&mut T)) {
        self.0.borrow_mut().data.iter_mut().for_each(f);
    }

    /// Accumulate into the gradient buffer. No-op when requires_grad is false,
    /// so leaves that opted out never receive a buffer.
    pub fn accumulate_grad(&self, delta: &[T]) {
        let mut d = self.0.borrow_mut();
        if !d.requires_grad {
            return;
        }
        assert_eq!(d.data.len(), delta.len(), "gradient length mismatch");
        match &mut d.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    /// Whether two handles view the same underlying buffer.
    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

struct Node<T: Elem> {
    output: Tensor<T>,
    backward: Box<dyn Fn(&[T])>,
}

/// Append-only record of differentiable operations for one forward pass.
/// Confined to a single thread; create a fresh tape per training step.
#[derive(Default)]
pub struct Tape<T: Elem> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(&self, output: Tensor<T>, backward: Box<dyn Fn(&[T])>) {
        self.nodes.borrow_mut().push(Node { output, backward });
    }

    /// Reverse-mode sweep from a scalar root. Each node runs exactly once, in
    /// reverse append order; nodes whose output never received a gradient are
    /// skipped (unreachable from the root). Repeated calls accumulate.
    pub fn backward(&self, root: &Tensor<T>) -> Result<(), TensorError> {
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape()));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        root.accumulate_grad(&[T::one()]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let out_grad = node.output.grad();
            if let Some(g) = out_grad {
                (node.backward)(&g);
            }
        }
        Ok(())
    }

    /// Drop intermediate gradients so a second forward/backward starts clean.
    pub fn clear_intermediate_grads(&self, keep: impl Fn(&Tensor<T>) -> bool) {
        for node in self.nodes.borrow().iter() {
            if !keep(&node.output) {
                node.output.zero_grad();
            }
        }
    }
}

/// Forward/backward mode: train records batch statistics and mutates
/// batch-norm buffers, eval is pure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Execution context threaded through every op and block.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Elem> {
    pub tape: Option<&'a Tape<T>>,
    pub mode: Mode,
}

impl<'a, T: Elem> Ctx<'a, T> {
    pub fn train(tape: &'a Tape<T>) -> Self {
        Ctx { tape: Some(tape), mode: Mode::Train }
    }

    pub fn eval() -> Self {
        Ctx { tape: None, mode: Mode::Eval }
    }
}

/// Record `backward` for `out` when a tape is active and any input needs a
/// gradient. Marks the output as requiring grad so the sweep reaches it.
pub(crate) fn maybe_record<T: Elem>(
    ctx: &Ctx<'_, T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    backward: impl Fn(&[T]) + 'static,
) {
    if let Some(tape) = ctx.tape {
        if inputs.iter().any(|t| t.requires_grad()) {
            out.set_requires_grad(true);
            tape.push(out.clone(), Box::new(backward));
        }
    }
}
