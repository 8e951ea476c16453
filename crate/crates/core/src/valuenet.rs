//! Value-function parameterizations.
//!
//! A value function exposes `phi(t, z)` and its state gradient as tape
//! expressions. The gradient is assembled from the analytic backward pass of
//! the network, written in tape primitives, so that a later reverse sweep
//! differentiates it with respect to the parameters.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Shape, Tape, Tensor};

/// Parameter nodes placed on a tape by [`ValueFunction::bind`].
#[derive(Clone, Debug)]
pub struct Binding {
    pub theta: NodeId,
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn new(theta: NodeId, nodes: Vec<NodeId>) -> Self {
        Self { theta, nodes }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

pub trait ValueFunction: Send + Sync {
    fn state_dim(&self) -> usize;

    fn param_count(&self) -> usize;

    /// Current parameters.
    fn params(&self) -> &[f64];

    /// Splits the flat parameter node `theta` into whatever the evaluation
    /// needs. Called once per tape.
    fn bind(&self, tape: &mut Tape, theta: NodeId) -> Result<Binding>;

    fn phi(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId) -> Result<NodeId>;

    /// State gradient `grad_z phi(t, z)`, a vector node of length `n`.
    fn grad_z(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId) -> Result<NodeId>;
}

/// Fully connected tanh network `phi(t, z)` with input `[t; z]`.
///
/// Parameters are laid out layer by layer: the row-major weight matrix
/// (`out x in`) followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNetwork {
    widths: Vec<usize>,
    theta: Vec<f64>,
    seed: u64,
}

pub fn param_count_for(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "network widths must have at least two positive entries, got {widths:?}"
        )));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::InvalidParameter(format!(
            "value network output width must be 1, got {}",
            widths.last().unwrap()
        )));
    }
    Ok(())
}

impl ValueNetwork {
    /// Default architecture for a state of dimension `n`.
    pub fn default_widths(n: usize) -> Vec<usize> {
        vec![1 + n, 64, 64, 1]
    }

    /// Fan-based uniform initialization: weights in `[-a, a]` with
    /// `a = sqrt(6 / (in + out))`, zero biases.
    pub fn new(widths: Vec<usize>, seed: u64) -> Result<Self> {
        check_widths(&widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(param_count_for(&widths));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            theta.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)));
            theta.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { widths, theta, seed })
    }

    pub fn from_params(widths: Vec<usize>, theta: Vec<f64>, seed: u64) -> Result<Self> {
        check_widths(&widths)?;
        let p = param_count_for(&widths);
        if theta.len() != p {
            return Err(Error::Dimension { what: "parameter vector", expected: p, got: theta.len() });
        }
        Ok(Self { widths, theta, seed })
    }

    /// Network with every weight and bias zero except the output bias.
    pub fn constant(widths: Vec<usize>, bias: f64) -> Result<Self> {
        let p = param_count_for(&widths);
        let mut theta = vec![0.0; p];
        theta[p - 1] = bias;
        Self::from_params(widths, theta, 0)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Dimension { what: "parameter vector", expected: self.theta.len(), got: theta.len() });
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Per-layer `(W, b)` views of the flat parameters.
    pub fn layers(&self) -> Vec<(DMatrix<f64>, Vec<f64>)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let weights = DMatrix::from_row_slice(o, i, &self.theta[off..off + o * i]);
                off += o * i;
                let bias = self.theta[off..off + o].to_vec();
                off += o;
                (weights, bias)
            })
            .collect()
    }

    /// Inverse of [`ValueNetwork::layers`].
    pub fn from_layers(layers: &[(DMatrix<f64>, Vec<f64>)], seed: u64) -> Result<Self> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        let mut theta = Vec::new();
        for (k, (w, b)) in layers.iter().enumerate() {
            if k == 0 {
                widths.push(w.ncols());
            } else if w.ncols() != widths[k] {
                return Err(Error::Dimension { what: "layer input width", expected: widths[k], got: w.ncols() });
            }
            if b.len() != w.nrows() {
                return Err(Error::Dimension { what: "bias length", expected: w.nrows(), got: b.len() });
            }
            widths.push(w.nrows());
            for r in 0..w.nrows() {
                theta.extend(w.row(r).iter());
            }
            theta.extend_from_slice(b);
        }
        Self::from_params(widths, theta, seed)
    }

    fn check_z(&self, tape: &Tape, z: NodeId) -> Result<()> {
        let got = tape.shape(z).numel();
        if got != self.state_dim() {
            return Err(Error::Dimension { what: "state", expected: self.state_dim(), got });
        }
        Ok(())
    }

    fn input(&self, tape: &mut Tape, t: f64, z: NodeId) -> Result<NodeId> {
        self.check_z(tape, z)?;
        let tn = tape.scalar(t);
        Ok(tape.concat(&[tn, z])?)
    }

    /// Hidden activations `a_1..a_{L-1}` for input `a0`.
    fn hidden(&self, tape: &mut Tape, binding: &Binding, a0: NodeId) -> Result<Vec<NodeId>> {
        let nl = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(nl - 1);
        let mut a = a0;
        for l in 0..nl - 1 {
            let (w, b) = (binding.nodes[2 * l], binding.nodes[2 * l + 1]);
            let pre = tape.matmul(w, a)?;
            let pre = tape.add(pre, b)?;
            a = tape.tanh(pre);
            acts.push(a);
        }
        Ok(acts)
    }

    // -- plain evaluation -------------------------------------------------

    /// `phi(t, z)` without a tape.
    pub fn phi_value(&self, t: f64, z: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let theta = tape.constant(Tensor::vector(self.theta.clone()));
        let binding = self.bind(&mut tape, theta)?;
        let zn = tape.vector(z.to_vec());
        let out = self.phi(&mut tape, &binding, t, zn)?;
        Ok(tape.value(out).item())
    }

    /// `grad_z phi(t, z)` without a tape.
    pub fn grad_z_value(&self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let theta = tape.constant(Tensor::vector(self.theta.clone()));
        let binding = self.bind(&mut tape, theta)?;
        let zn = tape.vector(z.to_vec());
        let out = self.grad_z(&mut tape, &binding, t, zn)?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl ValueFunction for ValueNetwork {
    fn state_dim(&self) -> usize {
        self.widths[0] - 1
    }

    fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn bind(&self, tape: &mut Tape, theta: NodeId) -> Result<Binding> {
        let got = tape.shape(theta).numel();
        if got != self.theta.len() {
            return Err(Error::Dimension { what: "parameter vector", expected: self.theta.len(), got });
        }
        let mut nodes = Vec::with_capacity(2 * (self.widths.len() - 1));
        let mut off = 0;
        for w in self.widths.windows(2) {
            let (i, o) = (w[0], w[1]);
            let flat = tape.slice(theta, off, o * i)?;
            nodes.push(tape.reshape(flat, Shape::Matrix(o, i))?);
            off += o * i;
            nodes.push(tape.slice(theta, off, o)?);
            off += o;
        }
        Ok(Binding::new(theta, nodes))
    }

    fn phi(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId) -> Result<NodeId> {
        let a0 = self.input(tape, t, z)?;
        let acts = self.hidden(tape, binding, a0)?;
        let last = *acts.last().unwrap_or(&a0);
        let nl = self.widths.len() - 1;
        let (w, b) = (binding.nodes[2 * (nl - 1)], binding.nodes[2 * (nl - 1) + 1]);
        let out = tape.matmul(w, last)?;
        let out = tape.add(out, b)?;
        Ok(tape.reshape(out, Shape::Scalar)?)
    }

    fn grad_z(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId) -> Result<NodeId> {
        let a0 = self.input(tape, t, z)?;
        let acts = self.hidden(tape, binding, a0)?;
        let nl = self.widths.len() - 1;
        // d phi / d a_{L-1} is the single row of the output weights
        let w_out = binding.nodes[2 * (nl - 1)];
        let mut delta = tape.reshape(w_out, Shape::Vector(self.widths[nl - 1]))?;
        for l in (0..nl - 1).rev() {
            let a = acts[l];
            let sq = tape.square(a);
            let neg = tape.neg(sq);
            let dtanh = tape.offset(neg, 1.0);
            let s = tape.mul(delta, dtanh)?;
            delta = tape.matmul_t(binding.nodes[2 * l], s)?;
        }
        Ok(tape.slice(delta, 1, self.state_dim())?)
    }
}

/// Quadratic value function `phi(t, z) = 1/2 z^T P(t) z` with `P` tabulated
/// on a uniform grid; it has no trainable parameters.
#[derive(Clone, Debug)]
pub struct QuadraticValue {
    dt: f64,
    values: Vec<DMatrix<f64>>,
}

impl QuadraticValue {
    /// `values[k]` is `P(k * dt)`.
    pub fn new(dt: f64, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.is_empty() || dt <= 0.0 {
            return Err(Error::InvalidParameter(
                "quadratic value needs a positive step and at least one matrix".into(),
            ));
        }
        Ok(Self { dt, values })
    }

    fn matrix_at(&self, t: f64) -> &DMatrix<f64> {
        let k = (t / self.dt).round().max(0.0) as usize;
        &self.values[k.min(self.values.len() - 1)]
    }

    fn p_node(&self, tape: &mut Tape, t: f64) -> NodeId {
        tape.constant(Tensor::from_matrix(self.matrix_at(t)))
    }
}

impl ValueFunction for QuadraticValue {
    fn state_dim(&self) -> usize {
        self.values[0].nrows()
    }

    fn param_count(&self) -> usize {
        0
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn bind(&self, _tape: &mut Tape, theta: NodeId) -> Result<Binding> {
        Ok(Binding::new(theta, Vec::new()))
    }

    fn phi(&self, tape: &mut Tape, _binding: &Binding, t: f64, z: NodeId) -> Result<NodeId> {
        let p = self.p_node(tape, t);
        let pz = tape.matmul(p, z)?;
        let q = tape.dot(z, pz)?;
        Ok(tape.scale(q, 0.5))
    }

    fn grad_z(&self, tape: &mut Tape, _binding: &Binding, t: f64, z: NodeId) -> Result<NodeId> {
        let p = self.p_node(tape, t);
        Ok(tape.matmul(p, z)?)
    }
}

// -- checkpoint file --------------------------------------------------------

const MAGIC: &[u8; 8] = b"JFBVNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `net` as: magic, format version (u32), seed (u64), width count
/// (u32), widths (u64 each), parameter count (u64), parameters (f64). All
/// little-endian.
pub fn write_checkpoint(net: &ValueNetwork, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&net.seed.to_le_bytes())?;
    out.write_all(&(net.widths.len() as u32).to_le_bytes())?;
    for &w in &net.widths {
        out.write_all(&(w as u64).to_le_bytes())?;
    }
    out.write_all(&(net.theta.len() as u64).to_le_bytes())?;
    for v in &net.theta {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ValueNetwork> {
    let magic: [u8; 8] = read_array(&mut input)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let seed = u64::from_le_bytes(read_array(&mut input)?);
    let nw = u32::from_le_bytes(read_array(&mut input)?) as usize;
    if nw > 1024 {
        return Err(Error::Checkpoint(format!("implausible width count {nw}")));
    }
    let widths = (0..nw)
        .map(|_| read_array::<8>(&mut input).map(|b| u64::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let p = u64::from_le_bytes(read_array(&mut input)?) as usize;
    if p != param_count_for(&widths) {
        return Err(Error::Checkpoint(format!("parameter count {p} does not match widths {widths:?}")));
    }
    let theta = (0..p).map(|_| read_array::<8>(&mut input).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    ValueNetwork::from_params(widths, theta, seed)
}

pub fn save_checkpoint(net: &ValueNetwork, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(net, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<ValueNetwork> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    /// Independent forward pass straight from the layer matrices.
    fn reference_phi(net: &ValueNetwork, t: f64, z: &[f64]) -> f64 {
        let mut a: Vec<f64> = std::iter::once(t).chain(z.iter().copied()).collect();
        let layers = net.layers();
        for (k, (w, b)) in layers.iter().enumerate() {
            let mut next = b.clone();
            for (r, out) in next.iter_mut().enumerate() {
                *out += (0..w.ncols()).map(|c| w[(r, c)] * a[c]).sum::<f64>();
            }
            if k + 1 < layers.len() {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = next;
        }
        a[0]
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> (f64, Vec<f64>) {
        (rng.gen_range(0.0..1.0), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn zero_network_is_its_output_bias() {
        let net = ValueNetwork::constant(vec![4, 8, 8, 1], 1.25).unwrap();
        assert_eq!(net.phi_value(0.3, &[1.0, -2.0, 0.5]).unwrap(), 1.25);
        assert_eq!(net.grad_z_value(0.3, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_linear_layer() {
        // phi = w . (t, z) + b
        let net = ValueNetwork::from_params(vec![3, 1], vec![0.5, -1.0, 2.0, 0.25], 0).unwrap();
        let phi = net.phi_value(2.0, &[1.0, 3.0]).unwrap();
        assert!((phi - (1.0 - 1.0 + 6.0 + 0.25)).abs() < 1e-15);
        for z in [[0.0, 0.0], [5.0, -1.0]] {
            assert_eq!(net.grad_z_value(0.7, &z).unwrap(), vec![-1.0, 2.0]);
        }
    }

    #[test]
    fn matches_reference_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let net = ValueNetwork::new(vec![4, 16, 8, 1], seed).unwrap();
            let (t, z) = random_point(&mut rng, 3);
            let a = net.phi_value(t, &z).unwrap();
            let b = reference_phi(&net, t, &z);
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn state_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for trial in 0..100 {
            let net = ValueNetwork::new(vec![4, 12, 12, 1], trial).unwrap();
            let (t, z) = random_point(&mut rng, 3);
            let g = net.grad_z_value(t, &z).unwrap();
            let fd: Vec<f64> = (0..3)
                .map(|i| {
                    let mut zp = z.clone();
                    zp[i] += h;
                    let mut zm = z.clone();
                    zm[i] -= h;
                    (reference_phi(&net, t, &zp) - reference_phi(&net, t, &zm)) / (2.0 * h)
                })
                .collect();
            let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            assert!(err / scale <= 1e-6, "trial {trial}: {}", err / scale);
        }
    }

    /// d/dtheta <c, grad_z phi> against finite differences in theta.
    #[test]
    fn gradient_of_state_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let widths = vec![3, 6, 5, 1];
        for seed in 0..5 {
            let net = ValueNetwork::new(widths.clone(), seed).unwrap();
            let (t, z) = random_point(&mut rng, 2);
            let c = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];

            let mut tape = Tape::new();
            let theta = tape.leaf(Tensor::vector(net.params().to_vec()));
            let binding = net.bind(&mut tape, theta).unwrap();
            let zn = tape.vector(z.clone());
            let g = net.grad_z(&mut tape, &binding, t, zn).unwrap();
            let dtheta = tape.vjp(g, &[theta], Tensor::vector(c.clone())).unwrap().remove(0);

            let inner = |theta: &[f64]| {
                let n = ValueNetwork::from_params(widths.clone(), theta.to_vec(), 0).unwrap();
                let g = n.grad_z_value(t, &z).unwrap();
                g[0] * c[0] + g[1] * c[1]
            };
            let h = 1e-6;
            let mut fd = Vec::new();
            for i in 0..net.param_count() {
                let mut tp = net.params().to_vec();
                tp[i] += h;
                let mut tm = net.params().to_vec();
                tm[i] -= h;
                fd.push((inner(&tp) - inner(&tm)) / (2.0 * h));
            }
            let err: f64 = dtheta.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / scale <= 1e-5, "seed {seed}: {}", err / scale);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = ValueNetwork::new(vec![3, 4, 1], 0).unwrap();
        assert!(matches!(net.phi_value(0.0, &[1.0]), Err(Error::Dimension { what: "state", expected: 2, got: 1 })));
        assert!(ValueNetwork::new(vec![3, 4, 2], 0).is_err());
    }

    #[test]
    fn parameter_count_and_default_widths() {
        let net = ValueNetwork::new(ValueNetwork::default_widths(12), 1).unwrap();
        assert_eq!(net.widths(), &[13, 64, 64, 1]);
        assert_eq!(net.param_count(), 14 * 64 + 65 * 64 + 65);
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let a = ValueNetwork::new(vec![3, 10, 1], 42).unwrap();
        let b = ValueNetwork::new(vec![3, 10, 1], 42).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 13.0).sqrt();
        for (w, bias) in a.layers().iter().take(1) {
            assert!(w.iter().all(|v| v.abs() <= bound));
            assert!(bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn quadratic_value_gradient() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let v = QuadraticValue::new(0.5, vec![p.clone(), p * 2.0]).unwrap();
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(vec![]));
        let b = v.bind(&mut tape, theta).unwrap();
        let z = tape.vector(vec![1.0, -1.0]);
        let g = v.grad_z(&mut tape, &b, 0.5, z).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, -4.0]);
        let phi = v.phi(&mut tape, &b, 0.0, z).unwrap();
        assert_eq!(tape.value(phi).item(), 1.5);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let net = ValueNetwork::new(vec![2, 3, 1], 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_and_checkpoint_round_trip(seed in 0u64..1000, h in 1usize..6) {
            let net = ValueNetwork::new(vec![3, h, h + 1, 1], seed).unwrap();
            let rebuilt = ValueNetwork::from_layers(&net.layers(), seed).unwrap();
            prop_assert_eq!(&rebuilt, &net);
            let mut buf = Vec::new();
            write_checkpoint(&net, &mut buf).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
