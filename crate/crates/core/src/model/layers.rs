//! Building blocks. Each block owns the ids of its parameters, which are
//! registered in the model's [`ParamStore`] under `<prefix>/...` names.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::{ColumnKind, ExampleBatch, FeatureSchema};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Softmax => g.softmax(x),
        }
    }
}

/// Glorot-uniform weights, zero bias.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Ok(Dense {
            w: store.insert(format!("{name}/w"), Tensor::matrix(input, output, w)?, true)?,
            b: store.insert(format!("{name}/b"), Tensor::zeros(1, output), true)?,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        g.dense(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Stack of dense layers, ReLU between layers, `last` after the final one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub last: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        last: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "{name}: invalid layer sizes {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, rng, &format!("{name}/l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, last })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            let act = if i + 1 == n {
                self.last
            } else {
                Activation::Relu
            };
            x = act.apply(g, x)?;
        }
        Ok(x)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::params).collect()
    }
}

/// Two-layer ReLU MLP producing an `H`-dim representation.
pub fn expert(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    input: usize,
    hidden: &[usize],
) -> Result<Mlp> {
    let dims: Vec<usize> = std::iter::once(input)
        .chain(hidden.iter().copied())
        .collect();
    Mlp::new(store, rng, name, &dims, Activation::Relu)
}

/// Hidden ReLU layers then a sigmoid scalar.
pub fn tower(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    input: usize,
    hidden: &[usize],
) -> Result<Mlp> {
    let dims: Vec<usize> = std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    Mlp::new(store, rng, name, &dims, Activation::Sigmoid)
}

/// One dense layer with a row-wise softmax over `components`.
pub fn gate(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    input: usize,
    components: usize,
) -> Result<Mlp> {
    Mlp::new(store, rng, name, &[input, components], Activation::Softmax)
}

/// Categorical embedding tables plus pass-through standardized continuous
/// features: `x_o = [emb_1, ..., emb_m, cont]`.
#[derive(Clone, Debug)]
pub struct EmbeddingNetwork {
    pub tables: Vec<ParamId>,
    pub n_continuous: usize,
    pub output_dim: usize,
}

impl EmbeddingNetwork {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        schema: &FeatureSchema,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut tables = Vec::new();
        for col in schema.categorical() {
            let ColumnKind::Categorical {
                vocabulary,
                embedding_dim,
            } = &col.kind
            else {
                unreachable!()
            };
            let data = (0..vocabulary.len() * embedding_dim)
                .map(|_| normal.sample(rng))
                .collect();
            tables.push(store.insert(
                format!("{prefix}/{}", col.name),
                Tensor::matrix(vocabulary.len(), *embedding_dim, data)?,
                true,
            )?);
        }
        Ok(EmbeddingNetwork {
            tables,
            n_continuous: schema.continuous().count(),
            output_dim: schema.input_dim(),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &ExampleBatch) -> Result<Var> {
        if batch.categorical_ids.len() != self.tables.len()
            || batch.continuous.cols() != self.n_continuous
        {
            return Err(Error::shape(
                "embedding",
                format!(
                    "batch has {} categorical / {} continuous columns, network expects {} / {}",
                    batch.categorical_ids.len(),
                    batch.continuous.cols(),
                    self.tables.len(),
                    self.n_continuous
                ),
            ));
        }
        let mut parts = Vec::with_capacity(self.tables.len() + 1);
        for (table, ids) in self.tables.iter().zip(&batch.categorical_ids) {
            let t = g.param(store, *table)?;
            parts.push(g.gather(t, ids)?);
        }
        if self.n_continuous > 0 {
            parts.push(g.input(batch.continuous.clone())?);
        }
        g.concat(&parts)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.tables.clone()
    }
}

/// `[1, H]` task embedding initialized around the all-ones vector.
pub fn task_embedding(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    h: usize,
) -> Result<ParamId> {
    let normal = Normal::new(1.0, 0.1).expect("valid normal");
    let data = (0..h).map(|_| normal.sample(rng)).collect();
    store.insert(name, Tensor::matrix(1, h, data)?, true)
}
