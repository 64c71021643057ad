use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{build_layer, Layer, LayerSpec, Mode};
use crate::nn::shape::param_count;
use crate::nn::tensor::{Param, Tensor};

/// One row of an architecture summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    /// `Kind-index`, numbered from 1 like the usual model summaries.
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

/// Walks the shape chain without allocating any weights.
pub fn summarize(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<LayerSummary>> {
    let mut shape = input_shape.to_vec();
    let mut rows = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        shape = spec.output_shape(&shape).map_err(|e| {
            e.context(format!("layer {} ({}-{})", i, spec.kind_name(), i + 1))
        })?;
        rows.push(LayerSummary {
            name: format!("{}-{}", spec.kind_name(), i + 1),
            output_shape: shape.clone(),
            params: param_count(spec),
        });
    }
    Ok(rows)
}

/// A sequential stack of layers.
pub struct Network {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Box<dyn Layer>>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            layers: self.layers.iter().map(|l| l.clone_box()).collect(),
        }
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("specs", &self.specs)
            .field("input_shape", &self.input_shape)
            .finish()
    }
}

impl Network {
    /// Builds and initialises the layers; `input_shape` excludes the batch.
    pub fn new(specs: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let summary = summarize(&specs, &input_shape)?;
        let output_shape = summary
            .last()
            .map(|s| s.output_shape.clone())
            .unwrap_or_else(|| input_shape.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|s| build_layer(s, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            specs,
            input_shape,
            output_shape,
            layers,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn summary(&self) -> Vec<LayerSummary> {
        summarize(&self.specs, &self.input_shape).expect("validated at construction")
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(param_count).sum()
    }

    /// Runs the batch `[B, ..input_shape]` through every layer.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if input.shape().len() != self.input_shape.len() + 1
            || input.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::Dimension(format!(
                "network expects [B, {:?}], got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut x = input.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            x = layer
                .forward(&x, mode)
                .map_err(|e| e.context(format!("layer {i} ({})", self.specs[i].kind_name())))?;
        }
        Ok(x)
    }

    /// Backpropagates `grad_output`, accumulating parameter gradients.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let mut g = grad_output.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer
                .backward(&g)
                .map_err(|e| e.context(format!("layer {i} ({})", self.specs[i].kind_name())))?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Parameters and running statistics tagged with their layer index.
    pub fn state_tensors(&self) -> Vec<(usize, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state().into_iter().map(move |t| (i, t)))
            .collect()
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(usize, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.state_mut().into_iter().map(move |t| (i, t)))
            .collect()
    }

    /// Re-seeds dropout masks so repeated train-mode passes are reproducible.
    pub fn reseed_dropout(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.reseed(seed.wrapping_add(i as u64));
        }
    }
}
