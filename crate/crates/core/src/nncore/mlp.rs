use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

pub const MLP_SCHEMA_VERSION: u32 = 1;

/// Feed-forward network: tanh on hidden layers, identity on the output.
///
/// Weights are stored `in × out` so a batch `x` (rows are items) maps to
/// `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array2<f64>>,
}

/// Tape handles for the parameters of one [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    /// Gradients in the same order as [`Mlp::params`].
    pub fn collect(&self, grads: &Gradients) -> Vec<Array2<f64>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [grads.wrt(*w), grads.wrt(*b)])
            .collect()
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Shape(format!(
            "network widths {widths:?} need at least two non-zero layers"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                rng.random_range(-limit..=limit)
            }));
            biases.push(Array2::zeros((1, w[1])));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            weights: widths
                .windows(2)
                .map(|w| Array2::zeros((w[0], w[1])))
                .collect(),
            biases: widths
                .windows(2)
                .map(|w| Array2::zeros((1, w[1])))
                .collect(),
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("one bias vector per weight matrix".into()));
        }
        let mut widths = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *widths.last().unwrap() || b.len() != w.ncols() {
                return Err(Error::Shape(format!("layer {l} shapes are inconsistent")));
            }
            widths.push(w.ncols());
        }
        check_widths(&widths)?;
        let biases = biases
            .into_iter()
            .map(|b| Array2::from_shape_vec((1, b.len()), b).expect("row vector"))
            .collect();
        let net = Self {
            widths,
            weights,
            biases,
        };
        if net
            .params()
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array2<f64> {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.biases[layer]
    }

    /// Parameters in layer order: `W0, b0, W1, b1, …`.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for a network expecting {}",
                input.len(),
                self.input_dim()
            )));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        Ok(self.forward_batch(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch with {} columns for a network expecting {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Batch outputs together with their derivative with respect to input
    /// column `col`.
    pub fn forward_batch_with_tangent(
        &self,
        x: &Array2<f64>,
        col: usize,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.input_dim() || col >= self.input_dim() {
            return Err(Error::Shape("tangent column outside the input".into()));
        }
        let last = self.layers() - 1;
        let rows = x.nrows();
        let mut h = x.dot(&self.weights[0]) + &self.biases[0];
        let mut dh = self.weights[0]
            .row(col)
            .broadcast((rows, self.widths[1]))
            .expect("row broadcast")
            .to_owned();
        for l in 0..=last {
            if l > 0 {
                h = h.dot(&self.weights[l]) + &self.biases[l];
                dh = dh.dot(&self.weights[l]);
            }
            if l < last {
                h.mapv_inplace(f64::tanh);
                ndarray::Zip::from(&mut dh)
                    .and(&h)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
            }
        }
        Ok((h, dh))
    }

    /// Places the parameters on `tape` as leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Recorded forward pass.
    pub fn forward_tape(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let last = vars.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let pre = tape.matmul(h, vars.weights[l]);
            h = tape.add_row(pre, vars.biases[l]);
            if l < last {
                h = tape.tanh(h);
            }
            check_finite(tape, h, l)?;
        }
        Ok(h)
    }

    /// Recorded forward pass plus the derivative of the outputs with respect
    /// to input column `col`, itself built from tape operations so it can be
    /// differentiated again.
    pub fn forward_tape_with_tangent(
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        col: usize,
    ) -> Result<(Var, Var)> {
        let last = vars.weights.len() - 1;
        let rows = tape.value(x).nrows();
        let mut h = x;
        let mut dh = x;
        for l in 0..=last {
            let pre = tape.matmul(h, vars.weights[l]);
            h = tape.add_row(pre, vars.biases[l]);
            dh = if l == 0 {
                tape.row_broadcast(vars.weights[0], col, rows)
            } else {
                tape.matmul(dh, vars.weights[l])
            };
            if l < last {
                h = tape.tanh(h);
                let slope = tape.tanh_deriv(h);
                dh = tape.mul(slope, dh);
            }
            check_finite(tape, h, l)?;
        }
        Ok((h, dh))
    }

    /// Mean-batch loss and its exact gradient with respect to every
    /// parameter. `loss` receives the network outputs and must return a 1×1 node.
    pub fn gradient(
        &self,
        inputs: &Array2<f64>,
        loss: impl FnOnce(&mut Tape, Var) -> Var,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(
                "batch width does not match the network".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.leaf(inputs.clone());
        let out = Self::forward_tape(&mut tape, &vars, x)?;
        let l = loss(&mut tape, out);
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        let grads = tape.backward(l);
        Ok((value, vars.collect(&grads)))
    }

    pub fn to_document(&self) -> MlpDocument {
        MlpDocument {
            schema_version: MLP_SCHEMA_VERSION,
            widths: self.widths.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.iter().copied().collect())
                .collect(),
        }
    }

    pub fn from_document(doc: &MlpDocument) -> Result<Self> {
        if doc.schema_version != MLP_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported network schema version {}",
                doc.schema_version
            )));
        }
        check_widths(&doc.widths)?;
        if doc.weights.len() != doc.widths.len() - 1 {
            return Err(Error::Data("weight count does not match widths".into()));
        }
        let weights = doc
            .widths
            .windows(2)
            .zip(&doc.weights)
            .map(|(w, flat)| {
                Array2::from_shape_vec((w[0], w[1]), flat.clone())
                    .map_err(|_| Error::Data("weight matrix has the wrong size".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(weights, doc.biases.clone()).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(s)?)
    }
}

fn check_finite(tape: &Tape, v: Var, layer: usize) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite activation in layer {layer}"
        )))
    }
}

/// Versioned persistence format: weights are row-major `in × out` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDocument {
    pub schema_version: u32,
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}
