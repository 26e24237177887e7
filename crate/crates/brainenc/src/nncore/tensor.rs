//! Dense row-major tensors forming an implicit reverse-mode tape.
//!
//! Every op produces a fresh immutable node holding its output buffer,
//! references to its parents and a backward closure; the linked graph is
//! the tape. Parameters and plain values are leaf nodes. Nodes whose
//! inputs carry no gradient drop their parent links, so frozen-model
//! inference builds no graph at all.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::precision;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-parent gradients produced by a node's backward closure.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Inner, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Plain value; carries no gradient.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, data, false)
    }

    /// Trainable leaf. Data is stored exactly as given; under mixed-half
    /// training the optimizer rewrites it through `round_half`.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, data, true)
    }

    /// Activation entering the graph; storage-rounded in mixed-half mode.
    pub fn input(shape: Vec<usize>, mut data: Vec<f64>) -> Tensor {
        precision::quantize_store(&mut data);
        Tensor::leaf(shape, data, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Same values, detached from the tape. Gradient flow stops here.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Detached copy rounded to the nearest binary16 values.
    pub fn round_half(&self) -> Tensor {
        let mut data = self.data().to_vec();
        precision::round_half_slice(&mut data);
        Tensor::from_vec(self.shape().to_vec(), data)
    }

    pub fn has_nonfinite(&self) -> bool {
        self.data().iter().any(|v| !v.is_finite())
    }
}

/// Shape-only node sharing the parent's buffer (no copy, no re-rounding).
pub(crate) fn reshape_shared(x: &Tensor, shape: Vec<usize>) -> Tensor {
    let requires_grad = x.requires_grad();
    let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
        (
            vec![x.clone()],
            Some(Box::new(|_, g: &[f64]| vec![Some(g.to_vec())])),
        )
    } else {
        (Vec::new(), None)
    };
    Tensor {
        inner: Arc::new(Inner {
            id: next_id(),
            shape,
            data: Arc::clone(&x.inner.data),
            requires_grad,
            parents,
            backward,
        }),
    }
}

/// Build an op node. Output storage passes through the precision hook; the
/// parent links and backward closure are kept only when a gradient can flow.
pub(crate) fn make_node(
    shape: Vec<usize>,
    mut data: Vec<f64>,
    parents: Vec<Tensor>,
    backward: BackwardFn,
) -> Tensor {
    let numel: usize = shape.iter().product();
    debug_assert_eq!(numel, data.len());
    precision::quantize_store(&mut data);
    let requires_grad = parents.iter().any(|p| p.requires_grad());
    let (parents, backward) = if requires_grad {
        (parents, Some(backward))
    } else {
        (Vec::new(), None)
    };
    Tensor {
        inner: Arc::new(Inner {
            id: next_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            parents,
            backward,
        }),
    }
}
