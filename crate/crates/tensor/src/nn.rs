//! Named parameters and the two layer types everything else is built from.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{mismatch, Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                tensor,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Replaces values from `(name, tensor)` pairs, checking names and shapes.
    pub fn load(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, tensor) in entries {
            let p = self.get_mut(&name)?;
            if p.tensor.shape() != tensor.shape() {
                return Err(mismatch(
                    "load",
                    format!("{name}: {:?} vs {:?}", p.tensor.shape(), tensor.shape()),
                ));
            }
            p.tensor = tensor;
        }
        Ok(())
    }
}

/// Parameters bound onto one graph. Each parameter becomes a leaf on first
/// use; later uses share the leaf so gradients accumulate.
pub struct Bound<'g, 'p, T: Real> {
    graph: &'g Graph<T>,
    params: &'p ParamSet<T>,
    vars: RefCell<HashMap<String, Var<'g, T>>>,
}

impl<'g, 'p, T: Real> Bound<'g, 'p, T> {
    pub fn new(graph: &'g Graph<T>, params: &'p ParamSet<T>) -> Self {
        Self {
            graph,
            params,
            vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn var(&self, name: &str) -> Result<Var<'g, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let p = self.params.get(name)?;
        let v = if p.trainable {
            self.graph.leaf(p.tensor.clone())?
        } else {
            self.graph.constant(p.tensor.clone())?
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every trainable parameter, in parameter order; parameters
    /// that were never used get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        let vars = self.vars.borrow();
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let g = match vars.get(&p.name) {
                    Some(v) => grads.wrt(*v),
                    None => Tensor::zeros(p.tensor.shape()),
                };
                (p.name.clone(), g)
            })
            .collect()
    }
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

/// Fully connected layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = format!("{name}.weight");
        params.insert(&weight, uniform(&[inputs, outputs], bound, rng), true)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            params.insert(&b, uniform(&[outputs], bound, rng), true)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let last = *shape.last().ok_or_else(|| mismatch("linear", "scalar input"))?;
        if last != self.inputs {
            return Err(mismatch("linear", format!("{shape:?} into {} inputs", self.inputs)));
        }
        let rows = x.value().len() / last;
        let y = x.reshape(&[rows, last])?.matmul(p.var(&self.weight)?)?;
        let y = match &self.bias {
            Some(b) => y.add(p.var(b)?)?,
            None => y,
        };
        let mut out = shape;
        *out.last_mut().expect("non-empty") = self.outputs;
        y.reshape(&out)
    }
}

/// 2-D convolution layer, `[b, h, w, ci] -> [b, h', w', co]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = inputs * kernel * kernel;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = format!("{name}.weight");
        params.insert(&weight, uniform(&[kernel, kernel, inputs, outputs], bound, rng), true)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            params.insert(&b, uniform(&[outputs], bound, rng), true)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            inputs,
            outputs,
        })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let bias = match &self.bias {
            Some(b) => Some(p.var(b)?),
            None => None,
        };
        x.conv2d(p.var(&self.weight)?, bias, self.stride, self.pad)
    }
}

/// Sets every value of a parameter, e.g. to zero-initialise an output head.
pub fn fill<T: Real>(params: &mut ParamSet<T>, name: &str, value: f64) -> Result<()> {
    let p = params.get_mut(name)?;
    p.tensor = Tensor::full(p.tensor.shape(), T::of(value));
    Ok(())
}

/// Scales every value of a parameter.
pub fn rescale<T: Real>(params: &mut ParamSet<T>, name: &str, factor: f64) -> Result<()> {
    let p = params.get_mut(name)?;
    p.tensor = p.tensor.map(|x| x * T::of(factor));
    Ok(())
}
