//! Parameter containers, layer initialisation and weight directories.
//!
//! A weight directory holds one ATNS file per parameter plus a
//! `manifest.json` naming the architecture, seed and (for denoisers) the
//! noise schedule.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::atns;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }
}

/// Ordered, named model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<S>>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn bind_constants<'t>(&self, tape: &'t Tape<S>) -> Vec<Var<'t, S>> {
        self.values.iter().map(|v| tape.constant_shared(Arc::clone(v))).collect()
    }

    pub fn bind_leaves<'t>(&self, tape: &'t Tape<S>) -> Vec<Var<'t, S>> {
        self.values.iter().map(|v| tape.leaf_shared(Arc::clone(v))).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    pub fn set(&mut self, i: usize, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::set",
                detail: format!("{:?} vs {:?}", value.shape(), self.values[i].shape()),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    /// Checks names and shapes against a reference layout.
    pub fn matches_layout(&self, other: &ParamSet<S>) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

fn gaussian<S: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::of(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("finite gaussian init")
}

/// Conv weight `[cout, cin, k, k]` with std `gain / sqrt(fan_in)` and zero bias.
pub fn init_conv<S: Scalar, R: Rng + ?Sized>(spec: ConvSpec, gain: f64, rng: &mut R) -> (Tensor<S>, Tensor<S>) {
    let fan_in = (spec.cin * spec.k * spec.k) as f64;
    let w = gaussian(vec![spec.cout, spec.cin, spec.k, spec.k], gain / fan_in.sqrt(), rng);
    (w, Tensor::zeros(vec![spec.cout]))
}

/// Linear weight `[inp, out]` with std `gain / sqrt(inp)` and zero bias.
pub fn init_linear<S: Scalar, R: Rng + ?Sized>(inp: usize, out: usize, gain: f64, rng: &mut R) -> (Tensor<S>, Tensor<S>) {
    let w = gaussian(vec![inp, out], gain / (inp as f64).sqrt(), rng);
    (w, Tensor::zeros(vec![out]))
}

/// `conv -> bias` using bound parameter handles `(weight, bias)`.
pub fn conv<'t, S: Scalar>(x: &Var<'t, S>, spec: ConvSpec, w: &Var<'t, S>, b: &Var<'t, S>) -> Result<Var<'t, S>> {
    x.conv2d(w, Some(b), spec.stride, spec.pad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub architecture: String,
    pub seed: u64,
    pub params: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn param_file(name: &str) -> String {
    format!("{name}.atns")
}

pub fn save_weights<S: Scalar>(dir: impl AsRef<Path>, manifest: &WeightManifest, params: &ParamSet<S>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if manifest.params != params.names() {
        return Err(Error::Config("manifest parameter list does not match the model".into()));
    }
    for (name, t) in params.iter() {
        atns::write(dir.join(param_file(name)), t)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_weights<S: Scalar>(dir: impl AsRef<Path>) -> Result<(WeightManifest, ParamSet<S>)> {
    let dir = dir.as_ref();
    let manifest: WeightManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut params = ParamSet::new();
    for name in &manifest.params {
        let t = atns::decode_as(&fs::read(dir.join(param_file(name)))?)?;
        params.push(name.clone(), t);
    }
    Ok((manifest, params))
}

/// Adam over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = Vec::with_capacity(p.numel());
            for (j, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
                let gv = gv.f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let upd = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                next.push(S::of(pv.f64() - upd));
            }
            params.set(i, Tensor::new(p.shape().to_vec(), next)?)?;
        }
        Ok(())
    }
}

/// Mean loss and mean parameter gradient over `n` samples. Each sample gets
/// its own tape; samples run in parallel and are reduced in index order, so
/// the result does not depend on the thread count.
pub fn batch_gradients<S: Scalar>(
    params: &ParamSet<S>,
    n: usize,
    loss: impl for<'t> Fn(usize, &'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>> + Sync,
) -> Result<(f64, Vec<Tensor<S>>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample: Vec<(f64, Vec<Tensor<S>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let tape = Tape::new();
            let p = params.bind_leaves(&tape);
            let root = loss(i, &tape, &p)?;
            let value = root.value().item()?.f64();
            Ok((value, tape.backward(root, &p)?))
        })
        .collect::<Result<_>>()?;
    let inv = S::of(1.0 / n as f64);
    let mut iter = per_sample.into_iter();
    let (mut total_loss, mut total) = iter.next().expect("n > 0");
    for (l, g) in iter {
        total_loss += l;
        total = total.iter().zip(&g).map(|(a, b)| a.add(b)).collect::<Result<_>>()?;
    }
    let grads = total.iter().map(|g| g.scale(inv)).collect::<Result<_>>()?;
    Ok((total_loss / n as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn weights_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (w, b) = init_conv::<f32, _>(ConvSpec::new(3, 4, 3, 1, 1), 1.0, &mut rng);
        let mut ps = ParamSet::new();
        ps.push("c.w", w);
        ps.push("c.b", b);
        let manifest = WeightManifest {
            architecture: "test".into(),
            seed: 3,
            params: ps.names().to_vec(),
            schedule: None,
            extra: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        save_weights(dir.path(), &manifest, &ps).unwrap();
        let (m2, p2) = load_weights::<f32>(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert!(p2.matches_layout(&ps));
        for i in 0..ps.len() {
            assert_eq!(p2.get(i), ps.get(i));
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let tape = Tape::new();
            let p = ps.bind_leaves(&tape);
            let loss = p[0].mul(&p[0]).unwrap().sum().unwrap();
            let g = tape.backward(loss, &p).unwrap();
            opt.step(&mut ps, &g).unwrap();
        }
        assert!(ps.get(0).max_abs() < 1e-2);
    }
}
