//! Small dense networks trained with Adam.

mod tape;

use std::io::{self, Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tape::{log_softmax_rows, softmax_rows, Gradients, Graph, Var};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("input has {found} features, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl MlpSpec {
    /// Two hidden layers of 64 units.
    pub fn standard(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            hidden: vec![64, 64],
            output,
            activation,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input];
        d.extend(&self.hidden);
        d.push(self.output);
        d
    }
}

/// Fully connected network. Parameters alternate weight `(in, out)` and
/// bias `(1, out)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Array2<f64>>,
}

impl Mlp {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let dims = spec.dims();
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                rng.random_range(-bound..bound)
            }));
            params.push(Array2::from_shape_fn((1, w[1]), |_| {
                rng.random_range(-bound..bound)
            }));
        }
        Self { spec, params }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let dims = spec.dims();
        let params = dims
            .windows(2)
            .flat_map(|w| [Array2::zeros((w[0], w[1])), Array2::zeros((1, w[1]))])
            .collect();
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Array2<f64>>) -> Result<Self, NnError> {
        let expect = Self::zeros(spec.clone());
        if expect.params.len() != params.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, got {}",
                expect.params.len(),
                params.len()
            )));
        }
        for (e, p) in expect.params.iter().zip(&params) {
            if e.dim() != p.dim() {
                return Err(NnError::ShapeMismatch {
                    left: e.dim(),
                    right: p.dim(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    fn activate(&self, x: &Array2<f64>) -> Array2<f64> {
        match self.spec.activation {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Tanh => x.mapv(f64::tanh),
        }
    }

    /// Forward pass without recording a graph.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.spec.input {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input,
                found: x.ncols(),
            });
        }
        let layers = self.params.len() / 2;
        let mut h = x.clone();
        for l in 0..layers {
            h = h.dot(&self.params[2 * l]) + &self.params[2 * l + 1];
            if l + 1 < layers {
                h = self.activate(&h);
            }
        }
        Ok(h)
    }

    /// Registers the parameters on `g` and records a forward pass. Returns
    /// the output node and the parameter nodes in [`Mlp::params`] order.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>), NnError> {
        let (_, cols) = g.shape(x);
        if cols != self.spec.input {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input,
                found: cols,
            });
        }
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let layers = vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = g.matmul(h, vars[2 * l])?;
            h = g.add(h, vars[2 * l + 1])?;
            if l + 1 < layers {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok((h, vars))
    }

    const MAGIC: &'static [u8; 4] = b"SLNN";
    const VERSION: u32 = 1;

    /// Writes magic, version, activation, layer sizes, then every parameter
    /// as little-endian `f64` in row-major order.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&[match self.spec.activation {
            Activation::Relu => 0u8,
            Activation::Tanh => 1u8,
        }])?;
        let dims = self.spec.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            for v in p.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, NnError> {
        let bad = |e: io::Error| NnError::Checkpoint(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::MAGIC {
            return Err(NnError::Checkpoint("wrong magic bytes".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(bad)?;
        let version = u32::from_le_bytes(u32buf);
        if version != Self::VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut act = [0u8; 1];
        r.read_exact(&mut act).map_err(bad)?;
        let activation = match act[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => {
                return Err(NnError::Checkpoint(format!(
                    "unknown activation tag {other}"
                )))
            }
        };
        r.read_exact(&mut u32buf).map_err(bad)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        if n < 2 {
            return Err(NnError::Checkpoint("need at least two layer sizes".into()));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32buf).map_err(bad)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let spec = MlpSpec {
            input: dims[0],
            hidden: dims[1..n - 1].to_vec(),
            output: dims[n - 1],
            activation,
        };
        let mut net = Self::zeros(spec);
        let mut f64buf = [0u8; 8];
        for p in net.params.iter_mut() {
            for v in p.iter_mut() {
                r.read_exact(&mut f64buf).map_err(bad)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(net)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, params: &[Array2<f64>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn adam_step(
        &mut self,
        params: &mut [Array2<f64>],
        grads: &[Array2<f64>],
    ) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                left: (self.m.len(), 0),
                right: (grads.len(), 0),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dim() != m.dim() || g.dim() != m.dim() {
                return Err(NnError::ShapeMismatch {
                    left: m.dim(),
                    right: g.dim(),
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let net = Mlp::zeros(MlpSpec::standard(3, 2, Activation::Relu));
        assert_eq!(
            net.predict(&array![[1.0, 2.0, 3.0]]).unwrap(),
            Array2::zeros((1, 2))
        );
    }

    #[test]
    fn single_linear_unit() {
        let spec = MlpSpec {
            input: 1,
            hidden: vec![],
            output: 1,
            activation: Activation::Tanh,
        };
        let net = Mlp::from_params(spec, vec![array![[2.5]], array![[-1.0]]]).unwrap();
        assert_eq!(net.predict(&array![[4.0]]).unwrap()[[0, 0]], 9.0);
    }

    #[test]
    fn graph_forward_matches_predict() {
        let net = Mlp::new(MlpSpec::standard(4, 3, Activation::Tanh), &mut rng());
        let x = array![[0.1, -0.2, 0.3, 0.4], [1.0, 0.0, -1.0, 0.5]];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, vars) = net.forward(&mut g, xv).unwrap();
        assert_eq!(vars.len(), 6);
        assert_eq!(g.value(out), &net.predict(&x).unwrap());
        assert!(net.predict(&array![[1.0]]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::new(MlpSpec::standard(5, 2, Activation::Relu), &mut rng());
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SLNN");
        let back = Mlp::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        buf[0] = b'X';
        assert!(Mlp::read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![array![[1.0, 2.0]]];
        let mut adam = AdamState::new(0.001, &p);
        adam.adam_step(&mut p, &[Array2::zeros((1, 2))]).unwrap();
        assert_eq!(p[0], array![[1.0, 2.0]]);
        assert!(adam.adam_step(&mut p, &[Array2::zeros((2, 1))]).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![array![[0.0, 0.0]]];
        let mut adam = AdamState::new(0.01, &p);
        let g = array![[0.5, -2.0]];
        adam.adam_step(&mut p, std::slice::from_ref(&g)).unwrap();
        for (x, gv) in p[0].iter().zip(g.iter()) {
            let expect = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_moves_lr_per_step() {
        let mut p = vec![array![[0.0]]];
        let mut adam = AdamState::new(0.001, &p);
        for _ in 0..1000 {
            adam.adam_step(&mut p, &[array![[3.0]]]).unwrap();
        }
        assert!((p[0][[0, 0]] + 1.0).abs() < 1e-6);
    }
}
