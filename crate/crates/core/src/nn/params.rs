use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every parameter and buffer of one model plus the optimizer step.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    /// Adam steps taken so far; shared by all parameters.
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Float> ParamStore<T> {
    pub fn new(init_seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            step: 0,
            rng: seed::rng(init_seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copy of this store in another precision, optimizer state included.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor::new(p.value.shape.clone(), conv(&p.value.data)),
                    grad: conv(&p.grad),
                    m: conv(&p.m),
                    v: conv(&p.v),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: Tensor::new(b.value.shape.clone(), conv(&b.value.data)),
                })
                .collect(),
            step: self.step,
            rng: self.rng.clone(),
        }
    }
}
