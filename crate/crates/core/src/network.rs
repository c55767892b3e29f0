//! Fully connected tanh networks with input-derivative propagation.
//!
//! Hidden layers use `tanh`; the output layer is affine. Input derivatives are
//! pushed forward layer by layer: with `z = W a + b`,
//!
//! ```text
//! a'  = tanh'(z) * (W a')
//! a'' = tanh''(z) * (W a')^2 + tanh'(z) * (W a'')
//! ```
//!
//! seeded with `a' = e_i`, `a'' = 0` for each input coordinate `i`. Every
//! quantity is a tape node, so residuals assembled from a [`DerivBundle`] can
//! be differentiated with respect to both parameters and inputs.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "atpinn-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases of an MLP. `weights[l]` is `(sizes[l+1], sizes[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("an MLP needs at least an input and an output layer"));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid(format!("zero-width layer in {layer_sizes:?}")));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::invalid("the output layer must have width 1"));
    }
    Ok(())
}

/// `input_dim, width x hidden, 1`.
pub fn layer_sizes(input_dim: usize, hidden_layers: usize, width: usize) -> Vec<usize> {
    let mut sizes = vec![input_dim];
    sizes.extend(std::iter::repeat_n(width, hidden_layers));
    sizes.push(1);
    sizes
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Tensor::matrix(fan_out, fan_in, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|p| Tensor::zeros(&[p[1], p[0]]))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| Tensor::zeros(&[n])).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(layer_sizes: Vec<usize>, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let n = layer_sizes.len() - 1;
        if weights.len() != n || biases.len() != n {
            return Err(Error::invalid("weight/bias count does not match layer sizes"));
        }
        for l in 0..n {
            let (fi, fo) = (layer_sizes[l], layer_sizes[l + 1]);
            if weights[l].shape() != [fo, fi] {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    lhs: vec![fo, fi],
                    rhs: weights[l].shape().to_vec(),
                });
            }
            if biases[l].shape() != [fo] {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    lhs: vec![fo],
                    rhs: biases[l].shape().to_vec(),
                });
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// All parameters flattened in [`MlpParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid("flat parameter length mismatch"));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> Result<ParamNodes> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut weights_t = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wid = tape.leaf(w.clone(), requires_grad)?;
            let bid = tape.leaf(b.clone().reshape(vec![1, b.len()])?, requires_grad)?;
            weights_t.push(tape.transpose(wid)?);
            weights.push(wid);
            biases.push(bid);
        }
        Ok(ParamNodes {
            input_dim: self.input_dim(),
            weights,
            weights_t,
            biases,
        })
    }

    /// Plain batch evaluation, `points` is `(n, input_dim)`.
    pub fn predict(&self, points: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let nodes = self.to_tape(&mut tape, false)?;
        let x = tape.constant(points.clone())?;
        let u = forward(&mut tape, &nodes, x)?;
        Ok(tape.value(u).data().to_vec())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "layers {}", sizes.join(" "));
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let _ = writeln!(out, "weight {l} {} {}", w.rows(), w.cols());
            for r in 0..w.rows() {
                let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
            let _ = writeln!(out, "bias {l} {}", b.len());
            let row: Vec<String> = b.data().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config(format!("checkpoint line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(0, &format!("missing {what}")));

        let (ln, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(ln, "not an MLP checkpoint"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(ln, "missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(ln, &format!("unsupported version {version}")));
        }

        let (ln, layers) = next("layers")?;
        let mut parts = layers.split_whitespace();
        if parts.next() != Some("layers") {
            return Err(bad(ln, "expected `layers`"));
        }
        let sizes: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| bad(ln, "bad layer size")))
            .collect::<Result<_>>()?;
        validate_sizes(&sizes)?;

        let parse_row = |ln: usize, line: &str, expect: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| bad(ln, "bad number")))
                .collect::<Result<_>>()?;
            if vals.len() != expect {
                return Err(bad(ln, &format!("expected {expect} values, got {}", vals.len())));
            }
            Ok(vals)
        };

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fi, fo) = (sizes[l], sizes[l + 1]);
            let (ln, head) = next("weight header")?;
            if head != format!("weight {l} {fo} {fi}") {
                return Err(bad(ln, "unexpected weight header"));
            }
            let mut data = Vec::with_capacity(fo * fi);
            for _ in 0..fo {
                let (ln, row) = next("weight row")?;
                data.extend(parse_row(ln, row, fi)?);
            }
            weights.push(Tensor::matrix(fo, fi, data)?);
            let (ln, head) = next("bias header")?;
            if head != format!("bias {l} {fo}") {
                return Err(bad(ln, "unexpected bias header"));
            }
            let (ln, row) = next("bias row")?;
            biases.push(Tensor::vector(parse_row(ln, row, fo)?));
        }
        Self::from_parts(sizes, weights, biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    input_dim: usize,
    weights: Vec<NodeId>,
    weights_t: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl ParamNodes {
    pub fn weight(&self, layer: usize) -> NodeId {
        self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> NodeId {
        self.biases[layer]
    }

    /// Parameter leaves in [`MlpParams::tensors`] order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }
}

/// `u` and its pure input derivatives for a batch, each an `(n, 1)` node.
#[derive(Debug, Clone)]
pub struct DerivBundle {
    pub u: NodeId,
    /// `du[i]` is `du/dx_i`.
    pub du: Vec<NodeId>,
    /// `d2u[i]` is `d2u/dx_i^2`, present for requested coordinates.
    pub d2u: Vec<Option<NodeId>>,
}

impl DerivBundle {
    pub fn d2(&self, i: usize) -> Result<NodeId> {
        self.d2u
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::invalid(format!("second derivative {i} was not requested")))
    }
}

fn check_input(tape: &Tape, params: &ParamNodes, x: NodeId) -> Result<usize> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[1] != params.input_dim {
        return Err(Error::ShapeMismatch {
            op: "network input",
            lhs: vec![params.input_dim],
            rhs: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

/// Network output for the `(n, input_dim)` batch `x`; returns an `(n, 1)` node.
pub fn forward(tape: &mut Tape, params: &ParamNodes, x: NodeId) -> Result<NodeId> {
    check_input(tape, params, x)?;
    let last = params.num_layers() - 1;
    let mut a = x;
    for l in 0..=last {
        let z = tape.matmul(a, params.weights_t[l])?;
        let z = tape.add(z, params.biases[l])?;
        a = if l == last { z } else { tape.tanh(z)? };
    }
    Ok(a)
}

/// Output plus first and second derivatives for every input coordinate.
pub fn forward_with_derivs(tape: &mut Tape, params: &ParamNodes, x: NodeId) -> Result<DerivBundle> {
    let all = vec![true; params.input_dim];
    forward_with_selected_derivs(tape, params, x, &all)
}

/// Like [`forward_with_derivs`], but second derivatives only where
/// `second[i]` is set. First derivatives are always produced.
pub fn forward_with_selected_derivs(
    tape: &mut Tape,
    params: &ParamNodes,
    x: NodeId,
    second: &[bool],
) -> Result<DerivBundle> {
    check_input(tape, params, x)?;
    let dim = params.input_dim;
    if second.len() != dim {
        return Err(Error::invalid("second-derivative mask length must equal input dim"));
    }
    let last = params.num_layers() - 1;
    let one = tape.constant(Tensor::scalar(1.0))?;

    let mut a = x;
    // Per-coordinate derivative channels; `None` second derivative means zero.
    let mut da: Vec<NodeId> = Vec::with_capacity(dim);
    let mut d2a: Vec<Option<NodeId>> = vec![None; dim];

    for l in 0..=last {
        let wt = params.weights_t[l];
        let z = tape.matmul(a, wt)?;
        let z = tape.add(z, params.biases[l])?;

        // Linear images of the incoming derivative channels.
        let mut p = Vec::with_capacity(dim);
        let mut q = Vec::with_capacity(dim);
        for i in 0..dim {
            if l == 0 {
                // W e_i is column i of W, broadcast over the batch as a row.
                let col = tape.column(params.weights[l], i)?;
                p.push(tape.transpose(col)?);
                q.push(None);
            } else {
                p.push(tape.matmul(da[i], wt)?);
                q.push(match d2a[i] {
                    Some(d) if second[i] => Some(tape.matmul(d, wt)?),
                    _ => None,
                });
            }
        }

        if l == last {
            let n = tape.value(z).rows();
            let mut du = Vec::with_capacity(dim);
            let mut d2u = Vec::with_capacity(dim);
            for i in 0..dim {
                du.push(broadcast_rows(tape, p[i], n)?);
                d2u.push(if second[i] {
                    Some(match q[i] {
                        Some(qi) => qi,
                        None => tape.constant(Tensor::zeros(&[n, 1]))?,
                    })
                } else {
                    None
                });
            }
            return Ok(DerivBundle { u: z, du, d2u });
        }

        let t = tape.tanh(z)?;
        let t2 = tape.square(t)?;
        let s = tape.sub(one, t2)?; // tanh'
        let st = tape.mul(s, t)?;
        let s2 = tape.scale(st, -2.0)?; // tanh''

        let mut next_da = Vec::with_capacity(dim);
        let mut next_d2a = Vec::with_capacity(dim);
        for i in 0..dim {
            next_da.push(tape.mul(s, p[i])?);
            if second[i] {
                let p2 = tape.square(p[i])?;
                let curv = tape.mul(s2, p2)?;
                next_d2a.push(Some(match q[i] {
                    Some(qi) => {
                        let sq = tape.mul(s, qi)?;
                        tape.add(curv, sq)?
                    }
                    None => curv,
                }));
            } else {
                next_d2a.push(None);
            }
        }
        a = t;
        da = next_da;
        d2a = next_d2a;
    }
    unreachable!("loop returns at the output layer")
}

/// Expand a `[1, 1]` node to `[n, 1]`; other shapes pass through.
fn broadcast_rows(tape: &mut Tape, id: NodeId, n: usize) -> Result<NodeId> {
    if tape.value(id).rows() == n {
        return Ok(id);
    }
    let ones = tape.constant(Tensor::filled(&[n, 1], 1.0))?;
    tape.mul(ones, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shapes() {
        let sizes = layer_sizes(2, 8, 20);
        let p = MlpParams::init(&sizes, 7).unwrap();
        assert_eq!(p.num_layers(), 9);
        assert_eq!(p.weights()[0].shape(), &[20, 2]);
        for w in &p.weights()[1..8] {
            assert_eq!(w.shape(), &[20, 20]);
        }
        assert_eq!(p.weights()[8].shape(), &[1, 20]);
        assert!(p.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        let bound = (6.0f64 / 22.0).sqrt();
        assert!(p.weights()[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic() {
        let sizes = layer_sizes(2, 3, 5);
        assert_eq!(MlpParams::init(&sizes, 11).unwrap(), MlpParams::init(&sizes, 11).unwrap());
        assert_ne!(MlpParams::init(&sizes, 11).unwrap(), MlpParams::init(&sizes, 12).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(MlpParams::init(&[2, 0, 1], 0).is_err());
        assert!(MlpParams::init(&[], 0).is_err());
        assert!(MlpParams::init(&[2], 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&layer_sizes(2, 3, 4)).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 5.0]]).unwrap();
        assert_eq!(p.predict(&x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = MlpParams::init(&layer_sizes(2, 1, 3), 0).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.1]]).unwrap();
        assert!(p.predict(&x).is_err());
    }

    #[test]
    fn one_unit_network_matches_hand_derivatives() {
        // u = v * tanh(w x + c)
        let (w, c, v) = (0.7, -0.2, 1.3);
        let p = MlpParams::from_parts(
            vec![1, 1, 1],
            vec![
                Tensor::matrix(1, 1, vec![w]).unwrap(),
                Tensor::matrix(1, 1, vec![v]).unwrap(),
            ],
            vec![Tensor::vector(vec![c]), Tensor::vector(vec![0.0])],
        )
        .unwrap();
        let xs = [-1.0, 0.0, 0.4];
        let mut tape = Tape::new();
        let nodes = p.to_tape(&mut tape, false).unwrap();
        let x = tape
            .constant(Tensor::matrix(3, 1, xs.to_vec()).unwrap())
            .unwrap();
        let b = forward_with_derivs(&mut tape, &nodes, x).unwrap();
        for (k, &xv) in xs.iter().enumerate() {
            let th = (w * xv + c).tanh();
            let sech2 = 1.0 - th * th;
            let u = v * th;
            let du = v * w * sech2;
            let d2u = v * w * w * (-2.0 * th * sech2);
            assert!((tape.value(b.u).data()[k] - u).abs() < 1e-15);
            assert!((tape.value(b.du[0]).data()[k] - du).abs() < 1e-15);
            assert!((tape.value(b.d2(0).unwrap()).data()[k] - d2u).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_network_has_zero_derivatives() {
        let mut p = MlpParams::init(&layer_sizes(2, 2, 4), 3).unwrap();
        let last = p.num_layers() - 1;
        p.weights_mut()[last].data_mut().fill(0.0);
        p.biases_mut()[last].data_mut()[0] = 0.25;
        let mut tape = Tape::new();
        let nodes = p.to_tape(&mut tape, false).unwrap();
        let x = tape
            .constant(Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.5, 0.9]]).unwrap())
            .unwrap();
        let b = forward_with_derivs(&mut tape, &nodes, x).unwrap();
        assert_eq!(tape.value(b.u).data(), &[0.25, 0.25]);
        for i in 0..2 {
            assert!(tape.value(b.du[i]).data().iter().all(|&v| v == 0.0));
            assert!(tape.value(b.d2(i).unwrap()).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = MlpParams::init(&layer_sizes(2, 2, 3), 5).unwrap();
        let text = p.to_checkpoint_string();
        assert!(text.starts_with("atpinn-mlp 1\nlayers 2 3 3 1\n"));
        assert_eq!(MlpParams::from_checkpoint_str(&text).unwrap(), p);
        assert!(MlpParams::from_checkpoint_str("atpinn-mlp 2\n").is_err());
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(MlpParams::from_checkpoint_str(&truncated).is_err());
    }
}
