use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Batchnorm,
    Relu,
    SoftmaxHead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: usize,
    pub output: usize,
    /// Expose this layer's output as a feature tap.
    #[serde(default)]
    pub tap: bool,
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            input,
            output,
            tap: false,
        }
    }

    pub fn batchnorm(width: usize) -> Self {
        Self {
            kind: LayerKind::Batchnorm,
            input: width,
            output: width,
            tap: false,
        }
    }

    pub fn relu(width: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            input: width,
            output: width,
            tap: false,
        }
    }

    pub fn softmax_head(classes: usize) -> Self {
        Self {
            kind: LayerKind::SoftmaxHead,
            input: classes,
            output: classes,
            tap: false,
        }
    }

    pub fn tapped(mut self) -> Self {
        self.tap = true;
        self
    }
}

#[derive(Deserialize)]
struct ModelSpecDef {
    layers: Vec<LayerSpec>,
}

/// Validated network description. Activation `0` is the input and
/// activation `l + 1` is the output of layer `l`; the softmax head is the
/// identity on logits, so the last activation holds the logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDef")]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
}

impl TryFrom<ModelSpecDef> for ModelSpec {
    type Error = Error;

    fn try_from(def: ModelSpecDef) -> Result<Self> {
        ModelSpec::new(def.layers)
    }
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::config(format!("layer {i} has zero width")));
            }
            if l.kind != LayerKind::Dense && l.input != l.output {
                return Err(Error::config(format!(
                    "layer {i} ({:?}) must preserve width",
                    l.kind
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output,
                    i + 1,
                    pair[1].input
                )));
            }
        }
        let heads = layers
            .iter()
            .filter(|l| l.kind == LayerKind::SoftmaxHead)
            .count();
        if heads != 1 || layers.last().map(|l| l.kind) != Some(LayerKind::SoftmaxHead) {
            return Err(Error::config(
                "model needs exactly one softmax head, placed last",
            ));
        }
        if !layers.iter().any(|l| l.kind == LayerKind::Batchnorm) {
            return Err(Error::config("model needs at least one batchnorm layer"));
        }
        Ok(Self { layers })
    }

    /// `input → dense → batchnorm → relu → … → dense → softmax`. The first
    /// dense output and every relu output are tapped.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            let dense = LayerSpec::dense(width, h);
            layers.push(if i == 0 { dense.tapped() } else { dense });
            layers.push(LayerSpec::batchnorm(h));
            layers.push(LayerSpec::relu(h).tapped());
            width = h;
        }
        layers.push(LayerSpec::dense(width, classes));
        layers.push(LayerSpec::softmax_head(classes));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn batchnorm_layers(&self) -> Vec<usize> {
        self.indices_of(LayerKind::Batchnorm)
    }

    pub fn tapped_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].tap)
            .collect()
    }

    pub fn is_tapped(&self, layer: usize) -> bool {
        self.layers.get(layer).is_some_and(|l| l.tap)
    }

    fn indices_of(&self, kind: LayerKind) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind == kind)
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn unchecked(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }
}
