//! Row-wise primitives over `n × d` matrices. A batch of images is stacked
//! as consecutive groups of `k` rows; everything here except batch
//! normalization treats rows independently or per group.

use rand::Rng;

use super::gemm::{matmul, matmul_a_bt, matmul_at_b};
use super::params::{Grads, ParamBuilder, ParamId, ParamRole, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode plus the running-statistics updates produced in
/// training mode. Updates are applied by [`Ctx::commit`], so a training
/// forward never mutates parameters behind the caller's back.
#[derive(Debug)]
pub struct Ctx<T> {
    train: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Ctx<T> {
    pub fn train() -> Self {
        Ctx {
            train: true,
            updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Ctx {
            train: false,
            updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn commit(self, params: &mut ParamSet<T>) {
        for (id, t) in self.updates {
            *params.get_mut(id) = t;
        }
    }
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the activation output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(out: &[T], grad: &mut [T]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Row-wise affine map `y = x·W + b`, `W` stored `d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.he_uniform("weight", &[d_in, d_out], d_in);
        let b = bias.then(|| pb.constant("bias", &[d_out], 0.0, ParamRole::Trainable));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.cols() != self.d_in {
            return Err(Error::dim(format!(
                "linear expects {} input columns, got shape {:?}",
                self.d_in,
                x.shape()
            )));
        }
        let n = x.rows();
        let mut y = matmul(x.data(), p.get(self.w).data(), n, self.d_in, self.d_out);
        if let Some(b) = self.b {
            let bias = p.get(b).data();
            for row in y.chunks_mut(self.d_out) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += *bv;
                }
            }
        }
        Tensor::from_vec(&[n, self.d_out], y)
    }

    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>, dy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let n = x.rows();
        let dw = matmul_at_b(x.data(), dy.data(), n, self.d_in, self.d_out);
        for (a, b) in g.get_mut(self.w).data_mut().iter_mut().zip(&dw) {
            *a += *b;
        }
        if let Some(b) = self.b {
            let gb = g.get_mut(b).data_mut();
            for row in dy.data().chunks(self.d_out) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += *v;
                }
            }
        }
        let dx = matmul_a_bt(dy.data(), p.get(self.w).data(), n, self.d_out, self.d_in);
        Tensor::from_vec(&[n, self.d_in], dx).expect("shape")
    }
}

/// Batch normalization over the rows of an `n × d` matrix.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl BatchNorm {
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, dim: usize) -> Self {
        BatchNorm {
            gamma: pb.constant("gamma", &[dim], 1.0, ParamRole::Trainable),
            beta: pb.constant("beta", &[dim], 0.0, ParamRole::Trainable),
            running_mean: pb.constant("running_mean", &[dim], 0.0, ParamRole::Buffer),
            running_var: pb.constant("running_var", &[dim], 1.0, ParamRole::Buffer),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>, ctx: &mut Ctx<T>) -> (Tensor<T>, BnCache<T>) {
        let (n, d) = (x.rows(), self.dim);
        let eps = T::lit(BN_EPS);
        let (mean, var) = if ctx.train {
            let mut mean = vec![T::zero(); d];
            for row in x.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += *v;
                }
            }
            let nf = T::lit(n as f64);
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![T::zero(); d];
            for row in x.data().chunks(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let c = *v - *m;
                    *s += c * c;
                }
            }
            var.iter_mut().for_each(|s| *s /= nf);

            let mom = T::lit(BN_MOMENTUM);
            let unbias = if n > 1 { nf / T::lit((n - 1) as f64) } else { T::one() };
            let rm: Vec<T> = p
                .get(self.running_mean)
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, m)| (T::one() - mom) * *r + mom * *m)
                .collect();
            let rv: Vec<T> = p
                .get(self.running_var)
                .data()
                .iter()
                .zip(&var)
                .map(|(r, v)| (T::one() - mom) * *r + mom * *v * unbias)
                .collect();
            ctx.updates.push((self.running_mean, Tensor::from_vec(&[d], rm).expect("shape")));
            ctx.updates.push((self.running_var, Tensor::from_vec(&[d], rv).expect("shape")));
            (mean, var)
        } else {
            (p.get(self.running_mean).data().to_vec(), p.get(self.running_var).data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gamma = p.get(self.gamma).data();
        let beta = p.get(self.beta).data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n * d);
        for row in x.data().chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                y.push(gamma[j] * h + beta[j]);
            }
        }
        (
            Tensor::from_vec(&[n, d], y).expect("shape"),
            BnCache {
                xhat: Tensor::from_vec(&[n, d], xhat).expect("shape"),
                inv_std,
                train: ctx.train,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, cache: &BnCache<T>, dy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let d = self.dim;
        let n = dy.rows();
        let gamma = p.get(self.gamma).data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for (dr, hr) in dy.data().chunks(d).zip(cache.xhat.data().chunks(d)) {
            for j in 0..d {
                dgamma[j] += dr[j] * hr[j];
                dbeta[j] += dr[j];
            }
        }
        for (a, v) in g.get_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *a += *v;
        }
        for (a, v) in g.get_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *a += *v;
        }
        let mut dx = Vec::with_capacity(n * d);
        if cache.train {
            // dx = γ·σ⁻¹/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
            let nf = T::lit(n as f64);
            for (dr, hr) in dy.data().chunks(d).zip(cache.xhat.data().chunks(d)) {
                for j in 0..d {
                    let s = gamma[j] * cache.inv_std[j] / nf;
                    dx.push(s * (nf * dr[j] - dbeta[j] - hr[j] * dgamma[j]));
                }
            }
        } else {
            for dr in dy.data().chunks(d) {
                for j in 0..d {
                    dx.push(dr[j] * gamma[j] * cache.inv_std[j]);
                }
            }
        }
        Tensor::from_vec(&[n, d], dx).expect("shape")
    }
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

/// Per-row MLP with the same weights applied to every row. Hidden layers
/// are linear → batchnorm → ReLU.
#[derive(Debug, Clone)]
pub struct SharedMlp {
    pub layers: Vec<MlpLayer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
    bn: Vec<Option<BnCache<T>>>,
    outputs: Vec<Tensor<T>>,
}

impl SharedMlp {
    /// `dims = [d_in, h_1, …, d_out]`. With `plain_last`, the final layer is
    /// a bare linear map (used before a softmax).
    pub fn build<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, dims: &[usize], batchnorm: bool, plain_last: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let plain = plain_last && i == dims.len() - 2;
            let use_bn = batchnorm && !plain;
            layers.push(pb.scoped(&format!("{i}"), |pb| {
                // bias is redundant in front of batchnorm
                let linear = pb.scoped("linear", |pb| Linear::build(pb, dims[i], dims[i + 1], !use_bn));
                let bn = use_bn.then(|| pb.scoped("bn", |pb| BatchNorm::build(pb, dims[i + 1])));
                MlpLayer { linear, bn, relu: !plain }
            }));
        }
        SharedMlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].linear.d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").linear.d_out
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>, ctx: &mut Ctx<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            bn: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layer.linear.forward(p, &h)?;
            let bn_cache = layer.bn.as_ref().map(|bn| {
                let (y, c) = bn.forward(p, &z, ctx);
                z = y;
                c
            });
            if layer.relu {
                relu_inplace(z.data_mut());
            }
            cache.inputs.push(std::mem::replace(&mut h, z.clone()));
            cache.bn.push(bn_cache);
            cache.outputs.push(z);
        }
        Ok((h, cache))
    }

    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, cache: &MlpCache<T>, dy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                relu_backward_inplace(cache.outputs[i].data(), d.data_mut());
            }
            if let (Some(bn), Some(c)) = (&layer.bn, &cache.bn[i]) {
                d = bn.backward(p, c, &d, g);
            }
            d = layer.linear.backward(p, &cache.inputs[i], &d, g);
        }
        d
    }
}

/// Row-wise softmax with max shift.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.maxv(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Gradient of a row softmax given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.cols();
    let mut dx = dy.clone();
    for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
        let s: T = dr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
        for (d, yv) in dr.iter_mut().zip(yr) {
            *d = *yv * (*d - s);
        }
    }
    dx
}

/// Column-wise maximum over each consecutive group of `group` rows:
/// `(n·group) × g → n × g`. Also returns the winning row per output entry
/// (lowest index on ties).
pub fn max_over_rows<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (rows, g) = (x.rows(), x.cols());
    if group == 0 || rows % group != 0 {
        return Err(Error::dim(format!("{rows} rows do not split into groups of {group}")));
    }
    let n = rows / group;
    let mut out = Vec::with_capacity(n * g);
    let mut arg = Vec::with_capacity(n * g);
    for b in 0..n {
        for j in 0..g {
            let mut best = b * group;
            for r in b * group + 1..(b + 1) * group {
                if x.data()[r * g + j] > x.data()[best * g + j] {
                    best = r;
                }
            }
            out.push(x.data()[best * g + j]);
            arg.push(best);
        }
    }
    Ok((Tensor::from_vec(&[n, g], out)?, arg))
}

pub fn max_over_rows_backward<T: Scalar>(arg: &[usize], dy: &Tensor<T>, rows: usize) -> Tensor<T> {
    let g = dy.cols();
    let mut dx = Tensor::zeros(&[rows, g]);
    for (i, (&r, &v)) in arg.iter().zip(dy.data()).enumerate() {
        let j = i % g;
        dx.data_mut()[r * g + j] += v;
    }
    dx
}

/// Appends group `b`'s global row to each of its `group` local rows.
pub fn broadcast_concat<T: Scalar>(local: &Tensor<T>, global: &Tensor<T>, group: usize) -> Tensor<T> {
    let (n, l, g) = (local.rows(), local.cols(), global.cols());
    let mut out = Vec::with_capacity(n * (l + g));
    for i in 0..n {
        out.extend_from_slice(local.row(i));
        out.extend_from_slice(global.row(i / group));
    }
    Tensor::from_vec(&[n, l + g], out).expect("shape")
}

pub fn broadcast_concat_backward<T: Scalar>(d: &Tensor<T>, l: usize, group: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c) = (d.rows(), d.cols());
    let g = c - l;
    let mut dl = Vec::with_capacity(n * l);
    let mut dg = Tensor::zeros(&[n / group, g]);
    for i in 0..n {
        let row = d.row(i);
        dl.extend_from_slice(&row[..l]);
        for (a, v) in dg.row_mut(i / group).iter_mut().zip(&row[l..]) {
            *a += *v;
        }
    }
    (Tensor::from_vec(&[n, l], dl).expect("shape"), dg)
}

/// Row-wise concatenation `[a ‖ b]`.
pub fn hconcat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rows() != b.rows() {
        return Err(Error::dim(format!("cannot concatenate {} and {} rows", a.rows(), b.rows())));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.rows() {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::from_vec(&[a.rows(), a.cols() + b.cols()], out)
}

pub fn hconcat_backward<T: Scalar>(d: &Tensor<T>, split: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c) = (d.rows(), d.cols());
    let mut a = Vec::with_capacity(n * split);
    let mut b = Vec::with_capacity(n * (c - split));
    for i in 0..n {
        a.extend_from_slice(&d.row(i)[..split]);
        b.extend_from_slice(&d.row(i)[split..]);
    }
    (
        Tensor::from_vec(&[n, split], a).expect("shape"),
        Tensor::from_vec(&[n, c - split], b).expect("shape"),
    )
}
