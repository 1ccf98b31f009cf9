//! Dense ReLU network with a single sigmoid output, generic over the float
//! type so the same code runs training (f32) and gradient checks (f64).

use std::ops::MulAssign;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;
use rand::Rng;

pub trait Scalar: Float + LinalgScalar + ScalarOperand + MulAssign + Send + Sync + std::fmt::Debug {}
impl<T: Float + LinalgScalar + ScalarOperand + MulAssign + Send + Sync + std::fmt::Debug> Scalar for T {}

fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `inputs × outputs`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { w: Array2::zeros((inputs, outputs)), b: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("expected {expected} input features, got {got}")]
pub struct DimensionError {
    pub expected: usize,
    pub got: usize,
}

/// Activations kept for the backward pass.
pub struct Trace<T> {
    /// Input of each layer, after dropout.
    inputs: Vec<Array2<T>>,
    /// Pre-activation of each hidden layer.
    hidden: Vec<Array2<T>>,
    /// Scaled keep-masks, one per layer input, when dropout was active.
    masks: Vec<Option<Array2<T>>>,
    pub logits: Array1<T>,
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of one logit, stable for large |z|.
pub fn bce_with_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self { layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() }
    }

    /// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(sizes);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            layer.w.mapv_inplace(|_| cast(rng.random_range(-bound..bound)));
            layer.b.mapv_inplace(|_| cast(rng.random_range(-bound..bound)));
        }
        net
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, Layer::inputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check(&self, x: &ArrayView2<T>) -> Result<(), DimensionError> {
        if x.ncols() != self.input_size() {
            return Err(DimensionError { expected: self.input_size(), got: x.ncols() });
        }
        Ok(())
    }

    /// Forward pass over a batch (rows are samples). With `dropout` set, every
    /// layer input is masked with drop probability `p` and rescaled by
    /// `1/(1-p)`.
    pub fn forward_trace<R: Rng>(
        &self,
        x: ArrayView2<T>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<Trace<T>, DimensionError> {
        self.check(&x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n - 1);
        let mut masks = Vec::with_capacity(n);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mask = match dropout.as_mut() {
                Some((p, rng)) if *p > 0.0 => {
                    let keep: T = cast(1.0 / (1.0 - *p));
                    let cut = (*p * 4294967296.0) as u64;
                    let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                        if u64::from(rng.next_u32()) < cut {
                            T::zero()
                        } else {
                            keep
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            let z = a.dot(&layer.w) + &layer.b;
            inputs.push(a);
            masks.push(mask);
            if i + 1 == n {
                let logits = z.index_axis(Axis(1), 0).to_owned();
                return Ok(Trace { inputs, hidden, masks, logits });
            }
            a = z.mapv(|v| v.max(T::zero()));
            hidden.push(z);
        }
        unreachable!("network has at least one layer")
    }

    pub fn logits(&self, x: ArrayView2<T>) -> Result<Array1<T>, DimensionError> {
        Ok(self.forward_trace::<rand::rngs::ThreadRng>(x, None)?.logits)
    }

    /// Evaluation-mode probabilities; dropout is never applied.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array1<T>, DimensionError> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }

    pub fn predict_one(&self, x: &[T]) -> Result<T, DimensionError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict(view)?[0])
    }

    /// Mean BCE over the batch and its gradient with respect to every
    /// parameter.
    pub fn backward(&self, trace: &Trace<T>, y: ArrayView1<T>) -> (T, Mlp<T>) {
        let batch: T = cast(y.len() as f64);
        let loss = Zip::from(&trace.logits)
            .and(&y)
            .fold(T::zero(), |acc, &z, &t| acc + bce_with_logit(z, t))
            / batch;
        let mut delta = Zip::from(&trace.logits)
            .and(&y)
            .map_collect(|&z, &t| (sigmoid(z) - t) / batch)
            .insert_axis(Axis(1));
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = trace.inputs[i].t().dot(&delta).as_standard_layout().into_owned();
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { w: gw, b: gb });
            if i == 0 {
                break;
            }
            let mut upstream = delta.dot(&self.layers[i].w.t());
            if let Some(m) = &trace.masks[i] {
                upstream *= m;
            }
            Zip::from(&mut upstream).and(&trace.hidden[i - 1]).for_each(|g, &z| {
                if z <= T::zero() {
                    *g = T::zero();
                }
            });
            delta = upstream;
        }
        grads.reverse();
        (loss, Mlp { layers: grads })
    }

    /// Mean BCE without dropout.
    pub fn loss(&self, x: ArrayView2<T>, y: ArrayView1<T>) -> Result<T, DimensionError> {
        let z = self.logits(x)?;
        let batch: T = cast(y.len() as f64);
        Ok(Zip::from(&z).and(&y).fold(T::zero(), |acc, &z, &t| acc + bce_with_logit(z, t)) / batch)
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[T]) {
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = it.next().expect("parameter count"));
        }
    }
}

/// AdamW with the update order of the common reference implementation:
/// decay, then the bias-corrected moment step.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Mlp<T>,
    v: Mlp<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shape_of: &Mlp<T>, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = std::iter::once(shape_of.input_size()).chain(shape_of.layers.iter().map(Layer::outputs)).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Mlp::zeros(&sizes),
            v: Mlp::zeros(&sizes),
        }
    }

    pub fn update(&mut self, net: &mut Mlp<T>, grads: &Mlp<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1: T = cast(1.0 - b1.powi(self.step));
        let c2: T = cast(1.0 - b2.powi(self.step));
        let (b1, b2): (T, T) = (cast(b1), cast(b2));
        let lr: T = cast(self.lr);
        let decay: T = cast(1.0 - self.lr * self.weight_decay);
        let eps: T = cast(self.eps);
        let one = T::one();
        let step = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p * decay - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for (((p, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.m.layers).zip(&mut self.v.layers) {
            step(slice_mut(&mut p.w), slice(&g.w), slice_mut(&mut m.w), slice_mut(&mut v.w));
            step(slice_mut(&mut p.b), slice(&g.b), slice_mut(&mut m.b), slice_mut(&mut v.b));
        }
    }
}

fn slice<T, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> &[T] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut<T, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are contiguous")
}
