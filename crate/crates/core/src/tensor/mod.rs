//! Minimal dense tensor engine: row-major f32 buffers, a Wengert tape for
//! reverse-mode gradients, and the handful of forward ops the fusion network
//! needs. Reductions accumulate in f64 so gradient checks stay stable at
//! desk scale; forward results are bit-identical across runs for identical
//! inputs.

mod checkpoint;
mod ops;
mod optim;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC};
pub use optim::sgd_step;
pub use tape::Tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Identity used by the tape to recognize tensors across ops. Values never
/// influence any numeric result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

/// Dense N-dimensional array. The value buffer is immutable once written;
/// clones share it. The gradient slot is shared between clones so a backward
/// pass populates every handle of the same parameter.
#[derive(Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    grad: Arc<Mutex<Option<Vec<f32>>>>,
    requires_grad: bool,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape, self.requires_grad
        )
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            grad: Arc::new(Mutex::new(None)),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: consistent by construction")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::from_vec(vec![1], vec![value]).expect("scalar")
    }

    /// Glorot-uniform initialized parameter: U(-a, a) with a = sqrt(6/(fan_in+fan_out)).
    pub fn glorot<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        let mut t = Tensor::from_vec(shape, data).expect("glorot: consistent by construction");
        t.requires_grad = true;
        t
    }

    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Snapshot of the gradient buffer, if populated.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.grad.lock().expect("grad lock").clone()
    }

    /// Removes and returns the gradient buffer.
    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.grad.lock().expect("grad lock").take()
    }

    pub fn clear_grad(&self) {
        *self.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// In-place update of the value buffer. Clones of this tensor made before
    /// the call keep observing the old values; the id is retired so stale tape
    /// entries can never alias the new contents.
    pub(crate) fn update_data(&mut self, f: impl FnOnce(&mut [f32])) {
        let buf: &mut Vec<f32> = Arc::make_mut(&mut self.data);
        f(buf.as_mut_slice());
        self.id = fresh_id();
    }

    /// Replaces the buffer with new contents of identical shape.
    pub fn assign(&mut self, data: Vec<f32>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "assign",
                format!("expected {} elements, got {}", self.numel(), data.len()),
            ));
        }
        self.update_data(|d| d.copy_from_slice(&data));
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named trainable parameters of a model, in a stable order. The order defines
/// the checkpoint layout and the sgd update sequence.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot index.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Loads values by name; every stored parameter must be present with a
    /// matching shape.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        for (name, tensor) in self.entries.iter_mut() {
            let rec = records
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| Error::data(format!("checkpoint is missing parameter `{name}`")))?;
            if rec.shape != tensor.shape {
                return Err(Error::data(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    rec.shape, tensor.shape
                )));
            }
            tensor.assign(rec.data.clone())?;
        }
        Ok(())
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);
