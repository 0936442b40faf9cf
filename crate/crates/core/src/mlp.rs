//! Dense feed-forward networks with exact reverse-mode gradients and exact
//! input Jacobians.
//!
//! All computation works on layer slices (`&[Layer]`), so a split network's
//! early part `f_e` and late part `f_{e-l}` are plain sub-slices of one
//! storage vector and compose bit-for-bit to the full forward pass.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{dot, read_f64s, read_u32, Matrix};
use crate::rng::Rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPC";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given pre-activation `x` and output `y`. ReLU uses 0 at `x == 0`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    #[inline]
    pub fn second_derivative(self, _x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * y * (1.0 - y * y),
            _ => 0.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidNetwork(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `d_out x d_in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dims("Layer::new", weight.rows(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform on `[-sqrt(6/(d_in+d_out)), +sqrt(6/(d_in+d_out))]`, zero bias.
    pub fn glorot(d_in: usize, d_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let r = (6.0 / (d_in + d_out) as f64).sqrt();
        Self {
            weight: rng.uniform_matrix(d_out, d_in, -r, r),
            bias: vec![0.0; d_out],
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Pre-activation `W x + b` for a column batch.
    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = self.weight.matmul(x)?;
        for (i, b) in self.bias.iter().enumerate() {
            a.row_mut(i).iter_mut().for_each(|v| *v += b);
        }
        Ok(a)
    }
}

/// Checks that a layer stack chains and is non-empty.
pub fn validate_stack(layers: &[Layer]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidNetwork("empty layer stack".into()));
    }
    for (l, pair) in layers.windows(2).enumerate() {
        if pair[0].d_out() != pair[1].d_in() {
            return Err(Error::InvalidNetwork(format!(
                "layer {} outputs {} but layer {} expects {}",
                l,
                pair[0].d_out(),
                l + 1,
                pair[1].d_in()
            )));
        }
    }
    for (l, layer) in layers.iter().enumerate() {
        if layer.bias.len() != layer.d_out() {
            return Err(Error::InvalidNetwork(format!("layer {l} bias length mismatch")));
        }
    }
    Ok(())
}

/// Builds `dims.len() - 1` Glorot-initialized layers.
pub fn init_stack(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Vec<Layer>> {
    if dims.len() < 2 || activations.len() != dims.len() - 1 {
        return Err(Error::InvalidNetwork(format!(
            "{} dims need {} activations, got {}",
            dims.len(),
            dims.len().saturating_sub(1),
            activations.len()
        )));
    }
    Ok(dims
        .windows(2)
        .zip(activations)
        .map(|(d, &a)| Layer::glorot(d[0], d[1], a, rng))
        .collect())
}

pub fn input_dim(layers: &[Layer]) -> usize {
    layers.first().map_or(0, Layer::d_in)
}

pub fn output_dim(layers: &[Layer]) -> usize {
    layers.last().map_or(0, Layer::d_out)
}

/// Pre- and post-activations of every layer for one batch.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.post.last().unwrap_or(&self.input)
    }
}

pub fn forward_trace(layers: &[Layer], x: &Matrix) -> Result<Trace> {
    if x.rows() != input_dim(layers) {
        return Err(Error::dims("forward", input_dim(layers), x.rows()));
    }
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(layers.len());
    for layer in layers {
        let a = layer.affine(post.last().unwrap_or(x))?;
        let mut h = a.clone();
        if layer.activation != Activation::Identity {
            h.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
        }
        pre.push(a);
        post.push(h);
    }
    Ok(Trace {
        input: x.clone(),
        pre,
        post,
    })
}

/// All per-layer outputs; the last entry is `f(X)`.
pub fn forward(layers: &[Layer], x: &Matrix) -> Result<Vec<Matrix>> {
    forward_trace(layers, x).map(|t| t.post)
}

/// Final output only.
pub fn output(layers: &[Layer], x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    if x.rows() != input_dim(layers) {
        return Err(Error::dims("forward", input_dim(layers), x.rows()));
    }
    for layer in layers {
        h = layer.affine(&h)?;
        if layer.activation != Activation::Identity {
            h.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradient with the same shapes as the layers it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrad {
    pub fn zeros_like(layers: &[Layer]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.d_out(), l.d_in()),
                    bias: vec![0.0; l.d_out()],
                })
                .collect(),
        }
    }

    pub fn is_congruent(&self, layers: &[Layer]) -> bool {
        self.layers.len() == layers.len()
            && self
                .layers
                .iter()
                .zip(layers)
                .all(|(g, l)| g.weight.shape() == l.weight.shape() && g.bias.len() == l.bias.len())
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &ParamGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(c, &b.weight);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += c * y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.layers {
            g.weight.scale_in_place(c);
            g.bias.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &self.layers {
            v.extend_from_slice(g.weight.as_slice());
            v.extend_from_slice(&g.bias);
        }
        v
    }

    pub fn from_flat(layers: &[Layer], v: &[f64]) -> Result<Self> {
        let mut g = ParamGrad::zeros_like(layers);
        let mut it = v.iter();
        let mut count = 0;
        for lg in &mut g.layers {
            for x in lg.weight.as_mut_slice().iter_mut().chain(lg.bias.iter_mut()) {
                *x = *it.next().ok_or_else(|| Error::dims("ParamGrad::from_flat", count + 1, v.len()))?;
                count += 1;
            }
        }
        if count != v.len() {
            return Err(Error::dims("ParamGrad::from_flat", count, v.len()));
        }
        Ok(g)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.is_finite() && g.bias.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn param_count(layers: &[Layer]) -> usize {
    layers.iter().map(Layer::param_count).sum()
}

pub fn flatten_params(layers: &[Layer]) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_count(layers));
    for l in layers {
        v.extend_from_slice(l.weight.as_slice());
        v.extend_from_slice(&l.bias);
    }
    v
}

pub fn assign_params(layers: &mut [Layer], v: &[f64]) -> Result<()> {
    if v.len() != param_count(layers) {
        return Err(Error::dims("assign_params", param_count(layers), v.len()));
    }
    let mut it = v.iter();
    for l in layers.iter_mut() {
        for x in l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()) {
            *x = *it.next().unwrap();
        }
    }
    Ok(())
}

/// `layers -= lr * grad`.
pub fn apply_gradient(layers: &mut [Layer], grad: &ParamGrad, lr: f64) {
    debug_assert!(grad.is_congruent(layers));
    for (l, g) in layers.iter_mut().zip(&grad.layers) {
        l.weight.axpy(-lr, &g.weight);
        l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
    }
}

pub fn params_finite(layers: &[Layer]) -> bool {
    layers
        .iter()
        .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
}

/// Gradients of `<upstream, f(X)>` with respect to all parameters and to `X`.
pub fn backprop(layers: &[Layer], x: &Matrix, upstream: &Matrix) -> Result<(ParamGrad, Matrix)> {
    let trace = forward_trace(layers, x)?;
    backprop_trace(layers, &trace, upstream)
}

pub fn backprop_trace(layers: &[Layer], trace: &Trace, upstream: &Matrix) -> Result<(ParamGrad, Matrix)> {
    if upstream.shape() != trace.output().shape() {
        return Err(Error::dims(
            "backprop",
            format!("{:?}", trace.output().shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = upstream.clone();
    for (l, layer) in layers.iter().enumerate().rev() {
        if layer.activation != Activation::Identity {
            let (a, h) = (&trace.pre[l], &trace.post[l]);
            for ((gv, &av), &hv) in g.as_mut_slice().iter_mut().zip(a.as_slice()).zip(h.as_slice()) {
                *gv *= layer.activation.derivative(av, hv);
            }
        }
        let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        let weight = g.matmul_nt(input)?;
        let bias = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
        grads.push(LayerGrad { weight, bias });
        g = layer.weight.matmul_tn(&g)?;
    }
    grads.reverse();
    Ok((ParamGrad { layers: grads }, g))
}

/// Exact Jacobian `d f(z) / d z` at a single point, `d_out x d_in`.
pub fn jacobian(layers: &[Layer], z: &[f64]) -> Result<Matrix> {
    Ok(jacobian_trace(layers, z)?.jacobian)
}

/// Forward tangent pass at one point, kept for a later pullback.
pub(crate) struct JacobianTrace {
    /// pre-activations per layer
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    /// `P_l = W_l J_{l-1}` per layer
    partial: Vec<Matrix>,
    /// `J_{l-1}` per layer; `None` is the identity at the input
    tangents: Vec<Option<Matrix>>,
    pub(crate) jacobian: Matrix,
}

pub(crate) fn jacobian_trace(layers: &[Layer], z: &[f64]) -> Result<JacobianTrace> {
    if z.len() != input_dim(layers) {
        return Err(Error::dims("jacobian", input_dim(layers), z.len()));
    }
    let mut h = z.to_vec();
    let mut j: Option<Matrix> = None;
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len());
    let mut partial = Vec::with_capacity(layers.len());
    let mut tangents = Vec::with_capacity(layers.len() + 1);
    for layer in layers {
        let mut a = layer.weight.matvec(&h)?;
        a.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
        let out: Vec<f64> = a.iter().map(|&v| layer.activation.apply(v)).collect();
        let p = match &j {
            Some(j) => layer.weight.matmul(j)?,
            None => layer.weight.clone(),
        };
        let mut next = p.clone();
        if layer.activation != Activation::Identity {
            for (i, (&av, &hv)) in a.iter().zip(&out).enumerate() {
                let d = layer.activation.derivative(av, hv);
                next.row_mut(i).iter_mut().for_each(|v| *v *= d);
            }
        }
        tangents.push(std::mem::replace(&mut j, Some(next)));
        partial.push(p);
        pre.push(a);
        h = out.clone();
        post.push(out);
    }
    Ok(JacobianTrace {
        pre,
        post,
        partial,
        tangents,
        jacobian: j.expect("validated stacks are non-empty"),
    })
}

/// Parameter gradient of `<b, J(z)>` where `J` is the input Jacobian at `z`
/// and `b` is held constant: reverse mode over the forward tangent pass.
pub fn jacobian_pullback(layers: &[Layer], z: &[f64], b: &Matrix) -> Result<ParamGrad> {
    let tr = jacobian_trace(layers, z)?;
    jacobian_pullback_trace(layers, z, &tr, b)
}

/// Jacobian at `z` plus the pullback of a cotangent built from it, sharing
/// one tangent pass.
pub fn jacobian_with_pullback<F>(layers: &[Layer], z: &[f64], cotangent: F) -> Result<(Matrix, ParamGrad)>
where
    F: FnOnce(&Matrix) -> Result<Matrix>,
{
    let tr = jacobian_trace(layers, z)?;
    let b = cotangent(&tr.jacobian)?;
    let g = jacobian_pullback_trace(layers, z, &tr, &b)?;
    Ok((tr.jacobian, g))
}

pub(crate) fn jacobian_pullback_trace(layers: &[Layer], z: &[f64], tr: &JacobianTrace, b: &Matrix) -> Result<ParamGrad> {
    if b.shape() != tr.jacobian.shape() {
        return Err(Error::dims(
            "jacobian_pullback",
            format!("{:?}", tr.jacobian.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut grads = Vec::with_capacity(layers.len());
    // adjoint of J_l and of h_l
    let mut j_bar = b.clone();
    let mut h_bar = vec![0.0; output_dim(layers)];
    for (l, layer) in layers.iter().enumerate().rev() {
        let a = &tr.pre[l];
        let hl = &tr.post[l];
        let p = &tr.partial[l];
        let d_in = layer.d_in();
        // J_l = diag(s'(a)) P_l
        let mut p_bar = j_bar;
        let mut a_bar = vec![0.0; layer.d_out()];
        for i in 0..layer.d_out() {
            let d1 = layer.activation.derivative(a[i], hl[i]);
            let d2 = layer.activation.second_derivative(a[i], hl[i]);
            if d2 != 0.0 {
                a_bar[i] += d2 * dot(p_bar.row(i), p.row(i));
            }
            a_bar[i] += d1 * h_bar[i];
            if d1 != 1.0 {
                p_bar.row_mut(i).iter_mut().for_each(|v| *v *= d1);
            }
        }
        // P_l = W_l J_{l-1};  a_l = W_l h_{l-1} + b_l
        let h_prev: &[f64] = if l == 0 { z } else { &tr.post[l - 1] };
        let mut w_bar = match &tr.tangents[l] {
            Some(j_prev) => p_bar.matmul_nt(j_prev)?,
            None => p_bar.clone(),
        };
        for (i, &ab) in a_bar.iter().enumerate() {
            if ab != 0.0 {
                w_bar.row_mut(i).iter_mut().zip(h_prev).for_each(|(w, &h)| *w += ab * h);
            }
        }
        grads.push(LayerGrad {
            weight: w_bar,
            bias: a_bar.clone(),
        });
        j_bar = layer.weight.matmul_tn(&p_bar)?;
        h_bar = layer.weight.matvec_t(&a_bar)?;
        debug_assert_eq!(h_bar.len(), d_in);
    }
    grads.reverse();
    Ok(ParamGrad { layers: grads })
}

/// A validated network with an early/late split: `f = f_{e-l} . f_e`, where
/// `f_e` is `layers[..split_index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    split_index: usize,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, split_index: usize) -> Result<Self> {
        validate_stack(&layers)?;
        if split_index == 0 || split_index >= layers.len() {
            return Err(Error::InvalidNetwork(format!(
                "split_index {split_index} must lie in 1..{}",
                layers.len()
            )));
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::InvalidNetwork("final layer must use the identity activation".into()));
        }
        Ok(Self { layers, split_index })
    }

    /// Glorot-initialized network; hidden layers use `hidden`, the last layer
    /// is linear. `split_index` defaults to half the layer count.
    pub fn random(dims: &[usize], hidden: Activation, split_index: Option<usize>, rng: &mut Rng) -> Result<Self> {
        let n_layers = dims.len().saturating_sub(1);
        let mut acts = vec![hidden; n_layers];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        let layers = init_stack(dims, &acts, rng)?;
        Self::new(layers, split_index.unwrap_or(n_layers / 2))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn set_split_index(&mut self, split_index: usize) -> Result<()> {
        if split_index == 0 || split_index >= self.layers.len() {
            return Err(Error::InvalidNetwork(format!("split_index {split_index} out of range")));
        }
        self.split_index = split_index;
        Ok(())
    }

    pub fn split(&self) -> (&[Layer], &[Layer]) {
        self.layers.split_at(self.split_index)
    }

    pub fn early(&self) -> &[Layer] {
        &self.layers[..self.split_index]
    }

    pub fn late(&self) -> &[Layer] {
        &self.layers[self.split_index..]
    }

    /// Mutable access to `f_{e-l}` only; `f_e` cannot be reached through this.
    pub fn late_mut(&mut self) -> &mut [Layer] {
        &mut self.layers[self.split_index..]
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        input_dim(&self.layers)
    }

    pub fn early_dim(&self) -> usize {
        output_dim(self.early())
    }

    pub fn output_dim(&self) -> usize {
        output_dim(&self.layers)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        forward(&self.layers, x)
    }

    /// `(f_e(X), f(X))`.
    pub fn early_and_last(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let e = output(self.early(), x)?;
        let l = output(self.late(), &e)?;
        Ok((e, l))
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_stack(w, &self.layers, self.split_index)
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let (layers, split) = read_stack(r)?;
        Mlp::new(layers, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_stack(path, &self.layers, self.split_index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (layers, split) = load_stack(path)?;
        Mlp::new(layers, split)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("in-memory write");
        buf
    }
}

/// Checkpoint layout: `"MLPC"`, `u32` layer count, then per layer `u32 d_out`,
/// `u32 d_in`, `u8` activation tag, `d_out*d_in` weights and `d_out` biases as
/// little-endian `f64`, then a trailing `u32 split_index` (0 for unsplit
/// stacks such as projection heads).
pub fn write_stack(w: &mut impl Write, layers: &[Layer], split_index: usize) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l.d_out() as u32).to_le_bytes())?;
        w.write_all(&(l.d_in() as u32).to_le_bytes())?;
        w.write_all(&[l.activation.tag()])?;
        for v in l.weight.as_slice().iter().chain(&l.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(split_index as u32).to_le_bytes())
}

pub fn read_stack(r: &mut impl Read) -> Result<(Vec<Layer>, usize)> {
    let bad = |reason: String| Error::Format {
        path: "<checkpoint>".into(),
        reason,
    };
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("missing MLPC magic".into()));
    }
    let n = read_u32(r).map_err(io)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let d_out = read_u32(r).map_err(io)? as usize;
        let d_in = read_u32(r).map_err(io)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io)?;
        let activation = Activation::from_tag(tag[0]).ok_or_else(|| bad(format!("bad activation tag {}", tag[0])))?;
        let weights = read_f64s(r, d_out * d_in).map_err(io)?;
        let bias = read_f64s(r, d_out).map_err(io)?;
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint bias".into()));
        }
        layers.push(Layer::new(Matrix::from_vec(d_out, d_in, weights)?, bias, activation)?);
    }
    let split = read_u32(r).map_err(io)? as usize;
    validate_stack(&layers)?;
    Ok((layers, split))
}

pub fn save_stack(path: impl AsRef<Path>, layers: &[Layer], split_index: usize) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_stack(&mut buf, layers, split_index).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<(Vec<Layer>, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_stack(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let l = Layer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| i as f64 - j as f64);
        assert_eq!(output(&[l], &x).unwrap(), x);
    }

    #[test]
    fn relu_clamps_negative() {
        let l = Layer::new(Matrix::identity(2), vec![0.0; 2], Activation::Relu).unwrap();
        assert_eq!(output(&[l], &col(&[-1.0, 2.0])).unwrap(), col(&[0.0, 2.0]));
    }

    #[test]
    fn linear_layer_gradients() {
        let mut rng = Rng::new(3);
        let l = Layer::glorot(3, 2, Activation::Identity, &mut rng);
        let x = rng.normal_matrix(3, 5);
        let g = rng.normal_matrix(2, 5);
        let (pg, _) = backprop(std::slice::from_ref(&l), &x, &g).unwrap();
        let expect_w = g.matmul(&x.transpose()).unwrap();
        assert!(pg.layers[0].weight.max_abs_diff(&expect_w) < 1e-14);
        for i in 0..2 {
            let s: f64 = g.row(i).iter().sum();
            assert!((pg.layers[0].bias[i] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let first = Layer::new(Matrix::identity(2), vec![-10.0, -10.0], Activation::Relu).unwrap();
        let second = Layer::new(Matrix::from_diag(&[2.0, 3.0]), vec![0.0; 2], Activation::Identity).unwrap();
        let layers = vec![first, second];
        let x = col(&[1.0, -2.0]);
        let (pg, gx) = backprop(&layers, &x, &col(&[1.0, 1.0])).unwrap();
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
        assert!(pg.layers[0].weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(pg.layers[0].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_jacobian_is_weight() {
        let mut rng = Rng::new(8);
        let mut l = Layer::glorot(3, 4, Activation::Identity, &mut rng);
        l.bias = vec![0.3, -0.1, 2.0, 0.0];
        let j = jacobian(std::slice::from_ref(&l), &[0.2, -0.7, 1.1]).unwrap();
        assert_eq!(j, l.weight);
    }

    #[test]
    fn inactive_relu_rows_are_zero() {
        let l = Layer::new(Matrix::identity(2), vec![0.0; 2], Activation::Relu).unwrap();
        let j = jacobian(&[l], &[-1.0, 3.0]).unwrap();
        assert_eq!(j.row(0), &[0.0, 0.0]);
        assert_eq!(j.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        let l = Layer::new(Matrix::identity(1), vec![0.0], Activation::Relu).unwrap();
        assert_eq!(jacobian(&[l], &[0.0]).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn split_compose_is_bit_identical() {
        let mut rng = Rng::new(11);
        let net = Mlp::random(&[5, 7, 6, 4, 3], Activation::Relu, None, &mut rng).unwrap();
        assert_eq!(net.split_index(), 2);
        let x = rng.normal_matrix(5, 9);
        let full = output(net.layers(), &x).unwrap();
        for s in 1..4 {
            let mut n2 = net.clone();
            n2.set_split_index(s).unwrap();
            let (e, l) = n2.early_and_last(&x).unwrap();
            assert_eq!(l, full);
            assert_eq!(e, n2.forward(&x).unwrap()[s - 1]);
        }
    }

    #[test]
    fn perturbing_late_leaves_early_untouched() {
        let mut rng = Rng::new(12);
        let mut net = Mlp::random(&[4, 6, 5, 2], Activation::Tanh, Some(1), &mut rng).unwrap();
        let x = rng.normal_matrix(4, 3);
        let (e0, l0) = net.early_and_last(&x).unwrap();
        let before = net.early().to_vec();
        for l in net.late_mut() {
            l.weight.scale_in_place(1.5);
        }
        let (e1, l1) = net.early_and_last(&x).unwrap();
        assert_eq!(e0, e1);
        assert_ne!(l0, l1);
        assert_eq!(before.as_slice(), net.early());
    }

    #[test]
    fn invalid_networks_rejected() {
        let mut rng = Rng::new(1);
        let l1 = Layer::glorot(3, 4, Activation::Relu, &mut rng);
        let l2 = Layer::glorot(5, 2, Activation::Identity, &mut rng);
        assert!(Mlp::new(vec![l1.clone(), l2], 1).is_err());
        let l3 = Layer::glorot(4, 2, Activation::Relu, &mut rng);
        assert!(Mlp::new(vec![l1.clone(), l3.clone()], 1).is_err());
        let l4 = Layer::glorot(4, 2, Activation::Identity, &mut rng);
        assert!(Mlp::new(vec![l1.clone(), l4.clone()], 0).is_err());
        assert!(Mlp::new(vec![l1, l4], 2).is_err());
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mut rng = Rng::new(2);
        let net = Mlp::random(&[3, 4, 2], Activation::Relu, None, &mut rng).unwrap();
        assert!(matches!(net.forward(&Matrix::zeros(2, 1)), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            backprop(net.layers(), &Matrix::zeros(3, 2), &Matrix::zeros(2, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(jacobian(net.late(), &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Mlp::read_checkpoint(&mut &b"MLPX"[..]).is_err());
        let mut rng = Rng::new(4);
        let net = Mlp::random(&[3, 4, 2], Activation::Relu, None, &mut rng).unwrap();
        let bytes = net.to_bytes();
        assert!(Mlp::read_checkpoint(&mut &bytes[..bytes.len() - 3]).is_err());
        assert_eq!(Mlp::read_checkpoint(&mut bytes.as_slice()).unwrap(), net);
    }
}
