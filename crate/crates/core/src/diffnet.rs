//! Sequential dense networks with a hand-written reverse pass.
//!
//! Batches are row-major `(n, dim)` matrices, one sample per row. Weights are
//! stored `(out_dim, in_dim)`. A forward pass returns a [`Tape`] holding the
//! activations that [`Mlp::backward`] needs; gradients are accumulated into a
//! shape-congruent [`GradAccum`] with an explicit sign, so that the positive
//! and negative phases of contrastive divergence share one accumulator.
//!
//! Every batch reduction sums rows in index order inside a single task, so the
//! results do not depend on how many threads rayon happens to use.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{dot, Real};
use crate::tensor::Tensor;

/// Below this many multiply-adds a layer runs on the calling thread.
const PAR_MIN_WORK: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative written in terms of the activation's output. The relu kink
    /// gets derivative 0.
    #[inline]
    pub fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths and activations of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(in_dim: usize, layers: impl IntoIterator<Item = (usize, Activation)>) -> Self {
        let (layer_dims, activations) = layers.into_iter().unzip();
        Self {
            in_dim,
            layer_dims,
            activations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.activations.len() != self.layer_dims.len() {
            return Err(Error::Config(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.layer_dims.len()
            )));
        }
        if self.in_dim == 0 || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "zero dimension in network spec {self}"
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn out_dim(&self) -> usize {
        self.layer_dims.last().copied().unwrap_or(0)
    }

    pub fn layer_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_dim
        } else {
            self.layer_dims[layer - 1]
        }
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.layer_dims[l] * (self.layer_in_dim(l) + 1))
            .sum()
    }

    /// Shapes of the parameter tensors in storage order `w0, b0, w1, b1, ...`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        (0..self.num_layers())
            .flat_map(|l| {
                let out = self.layer_dims[l];
                [vec![out, self.layer_in_dim(l)], vec![out]]
            })
            .collect()
    }

    /// Compact layer description, e.g. `32:relu,784:identity`.
    pub fn layers_string(&self) -> String {
        self.layer_dims
            .iter()
            .zip(&self.activations)
            .map(|(d, a)| format!("{d}:{a}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Inverse of [`MlpSpec::layers_string`].
    pub fn parse_layers(in_dim: usize, layers: &str) -> Result<Self> {
        let mut parsed = Vec::new();
        for part in layers.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (dim, act) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad layer `{part}`, want dim:activation")))?;
            let dim = dim
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer width `{dim}`")))?;
            parsed.push((dim, act.trim().parse()?));
        }
        let spec = Self::new(in_dim, parsed);
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> [{}]", self.in_dim, self.layers_string())
    }
}

/// Sign applied when accumulating a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Sign::Positive => v,
            Sign::Negative => -v,
        }
    }
}

/// Activations cached by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Tensor<T>>,
    /// Network output, kept only when the last activation needs it.
    output: Option<Tensor<T>>,
}

impl<T: Real> Tape<T> {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    /// `w0, b0, w1, b1, ...`
    params: Vec<Tensor<T>>,
}

impl<T: Real> Mlp<T> {
    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    ///
    /// Draws are made in `f64` and rounded, so an `f32` network is the
    /// rounded copy of the `f64` network with the same seed.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for l in 0..spec.num_layers() {
            let (out, fan_in) = (spec.layer_dims[l], spec.layer_in_dim(l));
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..out * fan_in)
                .map(|_| T::lit(rng.random_range(-bound..=bound)))
                .collect();
            params.push(Tensor::matrix(out, fan_in, w)?);
            params.push(Tensor::zeros(&[out]));
        }
        Ok(Self { spec, params })
    }

    /// Builds a network from explicit parameters, checking every shape.
    pub fn from_params(spec: MlpSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(shape_err!(
                "network {spec} has {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            ));
        }
        for (i, (want, got)) in shapes.iter().zip(&params).enumerate() {
            if want.as_slice() != got.shape() {
                return Err(shape_err!(
                    "parameter {i} of {spec}: expected shape {want:?}, got {:?}",
                    got.shape()
                ));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor<T> {
        &self.params[2 * layer + 1]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Output only, no tape.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_cols(self.spec.in_dim, "network input")?;
        let mut act = self.layer_forward(0, x);
        for l in 1..self.spec.num_layers() {
            act = self.layer_forward(l, &act);
        }
        Ok(act)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        x.expect_cols(self.spec.in_dim, "network input")?;
        let layers = self.spec.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        inputs.push(x.clone());
        for l in 0..layers - 1 {
            let next = self.layer_forward(l, &inputs[l]);
            inputs.push(next);
        }
        let output = self.layer_forward(layers - 1, &inputs[layers - 1]);
        let keep = self.spec.activations[layers - 1] != Activation::Identity;
        let tape = Tape {
            inputs,
            output: keep.then(|| output.clone()),
        };
        Ok((output, tape))
    }

    fn layer_forward(&self, layer: usize, input: &Tensor<T>) -> Tensor<T> {
        let (w, b) = (self.weight(layer), self.bias(layer));
        let act = self.spec.activations[layer];
        let (n, in_dim, out_dim) = (input.rows(), w.shape()[1], w.shape()[0]);
        let wt = transpose(w.data(), out_dim, in_dim);
        let mut out = Tensor::zeros(&[n, out_dim]);
        // bias + Σ_i x_i W[:, i], accumulated column by column
        let fill = |r: usize, row: &mut [T]| {
            row.copy_from_slice(b.data());
            for (i, &xi) in input.row(r).iter().enumerate() {
                for (y, &wi) in row.iter_mut().zip(&wt[i * out_dim..(i + 1) * out_dim]) {
                    *y = *y + xi * wi;
                }
            }
            for y in row.iter_mut() {
                *y = act.apply(*y);
            }
        };
        if n * in_dim * out_dim >= PAR_MIN_WORK {
            out.data_mut()
                .par_chunks_mut(out_dim)
                .enumerate()
                .for_each(|(r, row)| fill(r, row));
        } else {
            out.data_mut()
                .chunks_mut(out_dim)
                .enumerate()
                .for_each(|(r, row)| fill(r, row));
        }
        out
    }

    /// Reverse pass: `accum += sign * d(output . upstream)/d(params)`, summed
    /// over batch rows. Returns the gradient with respect to the input batch.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        upstream: &Tensor<T>,
        accum: &mut GradAccum<T>,
        sign: Sign,
    ) -> Result<Tensor<T>> {
        self.backward_impl(tape, upstream, accum, sign, true)
            .map(|d| d.expect("input gradient requested"))
    }

    /// As [`Self::backward`], without forming the input gradient.
    pub fn accumulate(&self, tape: &Tape<T>, upstream: &Tensor<T>, accum: &mut GradAccum<T>, sign: Sign) -> Result<()> {
        self.backward_impl(tape, upstream, accum, sign, false).map(|_| ())
    }

    fn backward_impl(
        &self,
        tape: &Tape<T>,
        upstream: &Tensor<T>,
        accum: &mut GradAccum<T>,
        sign: Sign,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let n = tape.batch_size();
        if upstream.shape() != [n, self.spec.out_dim()] {
            return Err(shape_err!(
                "upstream gradient shape {:?}, expected [{n}, {}]",
                upstream.shape(),
                self.spec.out_dim()
            ));
        }
        if tape.inputs.len() != self.spec.num_layers() {
            return Err(shape_err!("tape does not belong to network {}", self.spec));
        }
        accum.check_congruent(self)?;

        let last = self.spec.num_layers() - 1;
        let mut delta = upstream.clone();
        for l in (0..=last).rev() {
            let act = self.spec.activations[l];
            if act != Activation::Identity {
                let out = if l == last {
                    tape.output
                        .as_ref()
                        .ok_or_else(|| shape_err!("tape is missing the network output"))?
                } else {
                    &tape.inputs[l + 1]
                };
                for (d, y) in delta.data_mut().iter_mut().zip(out.data()) {
                    *d = *d * act.grad_from_output(*y);
                }
            }
            let input = &tape.inputs[l];
            let (gw, gb) = accum.layer_slots_mut(l);
            accumulate_layer_grads(&delta, input, gw, gb, sign);
            if l == 0 && !input_grad {
                accum.sample_count += n;
                return Ok(None);
            }
            delta = self.propagate(l, &delta);
        }
        accum.sample_count += n;
        Ok(Some(delta))
    }

    /// `delta_in[r][i] = sum_o delta[r][o] * W[o][i]`
    fn propagate(&self, layer: usize, delta: &Tensor<T>) -> Tensor<T> {
        let w = self.weight(layer);
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let n = delta.rows();
        let wd = w.data();
        let mut prev = Tensor::zeros(&[n, in_dim]);
        let fill = |r: usize, row: &mut [T]| {
            for (o, &d) in delta.row(r).iter().enumerate() {
                let wr = &wd[o * in_dim..(o + 1) * in_dim];
                for (p, wi) in row.iter_mut().zip(wr) {
                    *p = *p + d * *wi;
                }
            }
        };
        if n * in_dim * out_dim >= PAR_MIN_WORK {
            prev.data_mut()
                .par_chunks_mut(in_dim)
                .enumerate()
                .for_each(|(r, row)| fill(r, row));
        } else {
            prev.data_mut()
                .chunks_mut(in_dim)
                .enumerate()
                .for_each(|(r, row)| fill(r, row));
        }
        prev
    }
}

/// Row-major `rows × cols` to row-major `cols × rows`.
fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// `gw[o][i] += sign * sum_r delta[r][o] x[r][i]`, `gb[o] += sign * sum_r delta[r][o]`.
fn accumulate_layer_grads<T: Real>(
    delta: &Tensor<T>,
    input: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
    sign: Sign,
) {
    let (n, out_dim, in_dim) = (delta.rows(), delta.cols(), input.cols());
    // batch index innermost for both operands
    let dt = transpose(delta.data(), n, out_dim);
    let xt = transpose(input.data(), n, in_dim);
    let row_grad = |o: usize, gw_row: &mut [T], gb_o: &mut T| {
        let d = &dt[o * n..(o + 1) * n];
        for (i, g) in gw_row.iter_mut().enumerate() {
            *g = *g + sign.apply(dot(d, &xt[i * n..(i + 1) * n]));
        }
        let sb = d.iter().fold(T::zero(), |s, &v| s + v);
        *gb_o = *gb_o + sign.apply(sb);
    };
    if n * in_dim * out_dim >= PAR_MIN_WORK {
        gw.data_mut()
            .par_chunks_mut(in_dim)
            .zip(gb.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(o, (gw_row, gb_o))| row_grad(o, gw_row, gb_o));
    } else {
        let rows = gw.data_mut().chunks_mut(in_dim).zip(gb.data_mut().iter_mut());
        for (o, (gw_row, gb_o)) in rows.enumerate() {
            row_grad(o, gw_row, gb_o);
        }
    }
}

/// Parameter-shaped gradient accumulator for one [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum<T> {
    slots: Vec<Tensor<T>>,
    sample_count: usize,
}

impl<T: Real> GradAccum<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            slots: mlp.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            sample_count: 0,
        }
    }

    pub fn zeros_for_spec(spec: &MlpSpec) -> Self {
        Self {
            slots: spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
            sample_count: 0,
        }
    }

    pub fn slots(&self) -> &[Tensor<T>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.slots
    }

    /// Rows pushed through `backward` into this accumulator, either sign.
    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    fn layer_slots_mut(&mut self, layer: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let (w, b) = self.slots[2 * layer..2 * layer + 2].split_at_mut(1);
        (&mut w[0], &mut b[0])
    }

    fn check_congruent(&self, mlp: &Mlp<T>) -> Result<()> {
        let same = self.slots.len() == mlp.params.len()
            && self
                .slots
                .iter()
                .zip(&mlp.params)
                .all(|(g, p)| g.shape() == p.shape());
        if same {
            Ok(())
        } else {
            Err(shape_err!("gradient accumulator does not match network {}", mlp.spec))
        }
    }

    /// Adds another accumulator (e.g. from a disjoint batch shard).
    pub fn merge(&mut self, other: &GradAccum<T>) -> Result<()> {
        if self.slots.len() != other.slots.len()
            || self.slots.iter().zip(&other.slots).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(shape_err!("cannot merge gradient accumulators of different shapes"));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for s in &mut self.slots {
            for v in s.data_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            s.data_mut().fill(T::zero());
        }
        self.sample_count = 0;
    }

    pub fn norm(&self) -> f64 {
        self.slots.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.data().iter())
            .fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(Tensor::is_finite)
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slots.iter().flat_map(|s| s.data().iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn init_respects_bound_and_zero_bias() {
        let spec = MlpSpec::new(3, [(2, Activation::Identity)]);
        let mlp = Mlp::<f64>::init(spec.clone(), 7).unwrap();
        let bound = 1.0 / 3f64.sqrt();
        assert!(mlp.weight(0).data().iter().all(|w| w.abs() <= bound));
        assert_eq!(mlp.bias(0).data(), &[0.0, 0.0]);
        assert_eq!(mlp, Mlp::<f64>::init(spec, 7).unwrap());
    }

    #[test]
    fn init_layer_shapes() {
        let spec = MlpSpec::new(10, [(32, Activation::Relu), (784, Activation::Identity)]);
        let mlp = Mlp::<f32>::init(spec, 0).unwrap();
        assert_eq!(mlp.weight(0).shape(), &[32, 10]);
        assert_eq!(mlp.weight(1).shape(), &[784, 32]);
        assert_eq!(mlp.bias(1).shape(), &[784]);
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let spec = MlpSpec::new(3, [(0, Activation::Relu)]);
        assert!(matches!(Mlp::<f32>::init(spec, 1), Err(Error::Config(_))));
        let spec = MlpSpec {
            in_dim: 3,
            layer_dims: vec![2, 2],
            activations: vec![Activation::Relu],
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(2, [(2, Activation::Identity)]);
        let mlp = Mlp::from_params(
            spec,
            vec![tensor(2, 2, &[1.0, 0.0, 0.0, 1.0]), Tensor::zeros(&[2])],
        )
        .unwrap();
        let (y, _) = mlp.forward(&tensor(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clips_negative_preactivation() {
        let spec = MlpSpec::new(2, [(2, Activation::Relu)]);
        let mlp = Mlp::from_params(
            spec,
            vec![tensor(2, 2, &[1.0, 0.0, 0.0, 1.0]), Tensor::zeros(&[2])],
        )
        .unwrap();
        let (y, _) = mlp.forward(&tensor(1, 2, &[-1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::<f64>::init(MlpSpec::new(3, [(2, Activation::Tanh)]), 0).unwrap();
        assert!(matches!(
            mlp.forward(&tensor(1, 2, &[1.0, 2.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn affine_layer_gradient_is_outer_product() {
        let spec = MlpSpec::new(3, [(2, Activation::Identity)]);
        let mlp = Mlp::<f64>::init(spec, 3).unwrap();
        let x = tensor(1, 3, &[0.5, -1.0, 2.0]);
        let u = tensor(1, 2, &[3.0, -2.0]);
        let (_, tape) = mlp.forward(&x).unwrap();
        let mut acc = GradAccum::zeros_like(&mlp);
        let gx = mlp.backward(&tape, &u, &mut acc, Sign::Positive).unwrap();
        assert_eq!(
            acc.slots()[0].data(),
            &[1.5, -3.0, 6.0, -1.0, 2.0, -4.0]
        );
        assert_eq!(acc.slots()[1].data(), &[3.0, -2.0]);
        // dx = W^T u
        let w = mlp.weight(0).data();
        for i in 0..3 {
            let want = 3.0 * w[i] - 2.0 * w[3 + i];
            assert!((gx.data()[i] - want).abs() < 1e-15);
        }
        assert_eq!(acc.sample_count(), 1);
    }

    #[test]
    fn opposite_signs_cancel() {
        let spec = MlpSpec::new(4, [(5, Activation::Relu), (3, Activation::Tanh)]);
        let mlp = Mlp::<f64>::init(spec, 11).unwrap();
        let x = tensor(2, 4, &[0.1, -0.3, 0.7, 1.2, -2.0, 0.4, 0.0, 0.9]);
        let u = tensor(2, 3, &[1.0, -0.5, 0.25, 0.3, 0.2, -1.0]);
        let (_, tape) = mlp.forward(&x).unwrap();
        let mut acc = GradAccum::zeros_like(&mlp);
        mlp.backward(&tape, &u, &mut acc, Sign::Positive).unwrap();
        mlp.backward(&tape, &u, &mut acc, Sign::Negative).unwrap();
        assert!(acc.max_abs() < 1e-6);
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let mlp = Mlp::<f64>::init(MlpSpec::new(2, [(3, Activation::Tanh)]), 0).unwrap();
        let (_, tape) = mlp.forward(&tensor(2, 2, &[0.0; 4])).unwrap();
        let mut acc = GradAccum::zeros_like(&mlp);
        let bad = tensor(1, 3, &[0.0; 3]);
        assert!(matches!(
            mlp.backward(&tape, &bad, &mut acc, Sign::Positive),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn spec_string_round_trip() {
        let spec = MlpSpec::new(10, [(32, Activation::Relu), (784, Activation::Identity)]);
        assert_eq!(spec.layers_string(), "32:relu,784:identity");
        assert_eq!(MlpSpec::parse_layers(10, &spec.layers_string()).unwrap(), spec);
        assert!(MlpSpec::parse_layers(10, "32:softmax").is_err());
    }
}
