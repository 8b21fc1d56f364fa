//! The network: per-feature tokenizer, attention encoder with a split
//! Gaussian latent, a three-layer decoder and independent classifier heads.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::N_OUTCOMES;
use crate::error::{Error, MathError, MathResult, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{SelfAttention, Tokenize};
use crate::rng;
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: usize,
    pub token_dim: usize,
    pub attention_blocks: usize,
    /// Width of the group-invariant latent `z1`.
    pub invariant_dim: usize,
    /// Width of the group-specific latent `z2`.
    pub specific_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub head_hidden: usize,
    pub outcomes: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 663,
            token_dim: 2,
            attention_blocks: 2,
            invariant_dim: 16,
            specific_dim: 16,
            enc_hidden: 64,
            dec_hidden: 64,
            head_hidden: 16,
            outcomes: N_OUTCOMES,
            groups: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.invariant_dim + self.specific_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.features,
            self.token_dim,
            self.invariant_dim,
            self.specific_dim,
            self.enc_hidden,
            self.dec_hidden,
            self.head_hidden,
            self.outcomes,
            self.groups,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model: all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, k, d) = (self.features, self.token_dim, self.latent_dim());
        let mut out = vec![
            ("tokenizer.weight".to_string(), vec![f, k]),
            ("tokenizer.bias".to_string(), vec![f, k]),
        ];
        for b in 0..self.attention_blocks {
            for m in ["query", "key", "value", "output"] {
                out.push((format!("attention{b}.{m}"), vec![k, k]));
            }
            out.push((format!("attention{b}.ff.weight"), vec![k, k]));
            out.push((format!("attention{b}.ff.bias"), vec![1, k]));
        }
        let mut dense = |name: String, i: usize, o: usize| {
            out.push((format!("{name}.weight"), vec![i, o]));
            out.push((format!("{name}.bias"), vec![1, o]));
        };
        dense("encoder.hidden".into(), f * k, self.enc_hidden);
        dense("encoder.mu".into(), self.enc_hidden, d);
        dense("encoder.logvar".into(), self.enc_hidden, d);
        dense("decoder.0".into(), d, self.dec_hidden);
        dense("decoder.1".into(), self.dec_hidden, self.dec_hidden);
        dense("decoder.2".into(), self.dec_hidden, f);
        for c in 0..self.outcomes {
            dense(format!("head{c}.0"), d, self.head_hidden);
            dense(format!("head{c}.1"), self.head_hidden, self.head_hidden);
            dense(format!("head{c}.2"), self.head_hidden, 1);
        }
        out
    }
}

/// All learnable tensors, ordered as in [`ModelConfig::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, &[0x1417]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in cfg.layout() {
            let n: usize = shape.iter().product();
            let is_bias = name.ends_with("bias");
            let data = if is_bias {
                vec![0.0; n]
            } else {
                let bound = init_bound(&name, &shape);
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            };
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config: cfg.clone(),
            names,
            tensors,
        })
    }

    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if layout.len() != named.len() {
            return Err(Error::Value(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        for ((lname, lshape), (name, t)) in layout.iter().zip(&named) {
            if lname != name || lshape.as_slice() != t.shape() {
                return Err(Error::Value(format!(
                    "parameter `{name}` {:?} does not match expected `{lname}` {lshape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config: cfg.clone(),
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Value(format!("unknown parameter `{name}`")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::Value(format!("shape mismatch for `{name}`")));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

fn init_bound(name: &str, shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = if name.starts_with("tokenizer") {
        // each feature is its own 1 → k map
        (1, shape[1])
    } else {
        (shape[0], shape[1])
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Parameter leaves of one forward pass.
pub struct Bound {
    ids: Vec<NodeId>,
    cfg: ModelConfig,
}

struct Dense {
    w: NodeId,
    b: NodeId,
}

impl Bound {
    /// Loads every parameter into `g`; `trainable` decides whether they
    /// receive gradients.
    pub fn new(g: &mut Graph, params: &Parameters, trainable: bool) -> Self {
        let ids = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self {
            ids,
            cfg: params.config.clone(),
        }
    }

    /// Wraps leaves already in the graph, one per tensor of
    /// [`ModelConfig::layout`] in order.
    pub fn from_ids(ids: Vec<NodeId>, cfg: &ModelConfig) -> MathResult<Self> {
        let expected = cfg.layout().len();
        if ids.len() != expected {
            return Err(MathError::Dimension(format!(
                "{} parameter nodes for a layout of {expected}",
                ids.len()
            )));
        }
        Ok(Self {
            ids,
            cfg: cfg.clone(),
        })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn block_base(&self, b: usize) -> usize {
        2 + 6 * b
    }

    fn dense_at(&self, i: usize) -> Dense {
        Dense {
            w: self.ids[i],
            b: self.ids[i + 1],
        }
    }

    fn encoder_base(&self) -> usize {
        self.block_base(self.cfg.attention_blocks)
    }

    fn decoder_base(&self) -> usize {
        self.encoder_base() + 6
    }

    fn head_base(&self, c: usize) -> usize {
        self.decoder_base() + 6 + 6 * c
    }

    pub fn tokenize(&self, g: &mut Graph, x: NodeId) -> MathResult<NodeId> {
        g.custom(Arc::new(Tokenize), &[x, self.ids[0], self.ids[1]])
    }

    /// Attention stack, flatten, hidden layer; returns the hidden activation.
    fn encoder_trunk(&self, g: &mut Graph, x: NodeId) -> MathResult<NodeId> {
        let (n, nf) = g.value(x).dims2()?;
        let k = self.cfg.token_dim;
        let mut h = self.tokenize(g, x)?;
        for b in 0..self.cfg.attention_blocks {
            let base = self.block_base(b);
            let ws = &self.ids[base..base + 4];
            let att = g.custom(
                Arc::new(SelfAttention),
                &[h, ws[0], ws[1], ws[2], ws[3]],
            )?;
            let h1 = g.add(h, att)?;
            let flat = g.reshape(h1, vec![n * nf, k])?;
            let ff = dense(g, flat, &self.dense_at(base + 4))?;
            let ff = g.relu(ff)?;
            let h2 = g.add(flat, ff)?;
            h = g.reshape(h2, vec![n, nf, k])?;
        }
        let flat = g.reshape(h, vec![n, nf * k])?;
        let hidden = dense(g, flat, &self.dense_at(self.encoder_base()))?;
        g.relu(hidden)
    }

    /// Posterior parameters and a reparameterized sample `z = μ + e^{½ℓ}·ε`.
    pub fn encode(&self, g: &mut Graph, x: NodeId, eps: NodeId) -> MathResult<EncoderNodes> {
        let hidden = self.encoder_trunk(g, x)?;
        let base = self.encoder_base();
        let mu = dense(g, hidden, &self.dense_at(base + 2))?;
        let raw_lv = dense(g, hidden, &self.dense_at(base + 4))?;
        let logvar = g.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX)?;
        if g.shape(eps) != g.shape(mu) {
            return Err(MathError::Dimension(format!(
                "eps {:?} vs latent {:?}",
                g.shape(eps),
                g.shape(mu)
            )));
        }
        let half = g.scale(logvar, 0.5)?;
        let std = g.exp(half)?;
        let noise = g.mul(std, eps)?;
        let z = g.add(mu, noise)?;
        let d1 = self.cfg.invariant_dim;
        let d = self.cfg.latent_dim();
        let z1 = g.slice_cols(z, 0, d1)?;
        let z2 = g.slice_cols(z, d1, d)?;
        Ok(EncoderNodes {
            mu,
            logvar,
            z,
            z1,
            z2,
        })
    }

    pub fn decode(&self, g: &mut Graph, z: NodeId) -> MathResult<NodeId> {
        let base = self.decoder_base();
        let h = dense(g, z, &self.dense_at(base))?;
        let h = g.relu(h)?;
        let h = dense(g, h, &self.dense_at(base + 2))?;
        let h = g.relu(h)?;
        dense(g, h, &self.dense_at(base + 4))
    }

    /// One logit column per outcome.
    pub fn predict_heads(&self, g: &mut Graph, latent: NodeId) -> MathResult<NodeId> {
        let cols = (0..self.cfg.outcomes)
            .map(|c| self.head_logit(g, latent, c))
            .collect::<MathResult<Vec<_>>>()?;
        g.concat_cols(&cols)
    }

    pub fn head_logit(&self, g: &mut Graph, latent: NodeId, c: usize) -> MathResult<NodeId> {
        let base = self.head_base(c);
        let h = dense(g, latent, &self.dense_at(base))?;
        let h = g.relu(h)?;
        let h = dense(g, h, &self.dense_at(base + 2))?;
        let h = g.relu(h)?;
        dense(g, h, &self.dense_at(base + 4))
    }
}

fn dense(g: &mut Graph, x: NodeId, layer: &Dense) -> MathResult<NodeId> {
    let xw = g.matmul(x, layer.w)?;
    g.add(xw, layer.b)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub z1: NodeId,
    pub z2: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

fn check_input(x: &Tensor, params: &Parameters) -> MathResult<()> {
    let (_, nf) = x.dims2()?;
    if nf != params.config.features {
        return Err(MathError::Dimension(format!(
            "input has {nf} features, model expects {}",
            params.config.features
        )));
    }
    Ok(())
}

pub fn tokenize(x: &Tensor, params: &Parameters) -> MathResult<Tensor> {
    check_input(x, params)?;
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let xi = g.constant(x.clone());
    let t = bound.tokenize(&mut g, xi)?;
    Ok(g.value(t).clone())
}

pub fn encode(x: &Tensor, params: &Parameters, eps: &Tensor) -> MathResult<EncoderOutput> {
    check_input(x, params)?;
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let xi = g.constant(x.clone());
    let ei = g.constant(eps.clone());
    let e = bound.encode(&mut g, xi, ei)?;
    Ok(EncoderOutput {
        mu: g.value(e.mu).clone(),
        logvar: g.value(e.logvar).clone(),
        z: g.value(e.z).clone(),
        z1: g.value(e.z1).clone(),
        z2: g.value(e.z2).clone(),
    })
}

/// Posterior means only (ε = 0).
pub fn encode_mean(x: &Tensor, params: &Parameters) -> MathResult<Tensor> {
    let (n, _) = x.dims2()?;
    let eps = Tensor::zeros(&[n, params.config.latent_dim()]);
    Ok(encode(x, params, &eps)?.mu)
}

pub fn decode(z: &Tensor, params: &Parameters) -> MathResult<Tensor> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let zi = g.constant(z.clone());
    let out = bound.decode(&mut g, zi)?;
    Ok(g.value(out).clone())
}

pub fn predict_heads(latent: &Tensor, params: &Parameters) -> MathResult<Tensor> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let li = g.constant(latent.clone());
    let out = bound.predict_heads(&mut g, li)?;
    Ok(g.value(out).clone())
}

/// Outcome probabilities from posterior means, evaluated in chunks of rows.
pub fn predict_proba(x: &Tensor, params: &Parameters) -> MathResult<Tensor> {
    const CHUNK: usize = 256;
    let (n, _) = x.dims2()?;
    let c = params.config.outcomes;
    let chunks: Vec<MathResult<Vec<f64>>> = crate::exec::map_indexed(n.div_ceil(CHUNK), |ci| {
        let rows: Vec<usize> = (ci * CHUNK..((ci + 1) * CHUNK).min(n)).collect();
        let xs = x.select_rows(&rows)?;
        let mu = encode_mean(&xs, params)?;
        let logits = predict_heads(&mu, params)?;
        Ok(logits.data().iter().map(|&l| crate::graph::sigmoid(l)).collect())
    });
    let mut data = Vec::with_capacity(n * c);
    for ch in chunks {
        data.extend(ch?);
    }
    Tensor::new(vec![n, c], data)
}

/// Posterior means for many rows, chunked.
pub fn encode_mean_batched(x: &Tensor, params: &Parameters) -> MathResult<Tensor> {
    const CHUNK: usize = 256;
    let (n, _) = x.dims2()?;
    let chunks: Vec<MathResult<Tensor>> = crate::exec::map_indexed(n.div_ceil(CHUNK), |ci| {
        let rows: Vec<usize> = (ci * CHUNK..((ci + 1) * CHUNK).min(n)).collect();
        encode_mean(&x.select_rows(&rows)?, params)
    });
    let mut data = Vec::with_capacity(n * params.config.latent_dim());
    for ch in chunks {
        data.extend_from_slice(ch?.data());
    }
    Tensor::new(vec![n, params.config.latent_dim()], data)
}

/// Standard-normal draws for the reparameterization, keyed on a stream path.
pub fn draw_eps(rows: usize, dim: usize, seed: u64, tags: &[u64]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, tags);
    let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::from_parts_unchecked(vec![rows, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check_many;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            features: 5,
            token_dim: 2,
            attention_blocks: 2,
            invariant_dim: 2,
            specific_dim: 3,
            enc_hidden: 6,
            dec_hidden: 4,
            head_hidden: 3,
            outcomes: N_OUTCOMES,
            groups: 2,
            seed: 3,
        }
    }

    /// Zero biases put ReLUs exactly on their kink; finite differences need
    /// a generic point.
    pub(crate) fn with_random_biases(mut p: Parameters, seed: u64) -> Parameters {
        let mut r = rng::stream(seed, &[]);
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            if name.ends_with("bias") {
                let data = (0..t.len()).map(|_| r.gen_range(-0.3..0.3)).collect();
                *t = Tensor::new(t.shape().to_vec(), data).unwrap();
            }
        }
        p
    }

    fn batch(n: usize, nf: usize) -> Tensor {
        let data = (0..n * nf)
            .map(|i| ((i * 37 % 23) as f64 / 23.0 - 0.5) * 2.0)
            .collect();
        Tensor::matrix(n, nf, data).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases() {
        let cfg = tiny_config();
        let a = Parameters::init(&cfg).unwrap();
        let b = Parameters::init(&cfg).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.names().iter().zip(a.tensors()) {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = init_bound(name, t.shape());
                assert!(t.max_abs() <= bound, "{name}");
            }
        }
    }

    #[test]
    fn tokenize_linearity() {
        let cfg = tiny_config();
        let p = Parameters::init(&cfg).unwrap();
        let x = batch(2, 5);
        let x2 = x.map(|v| 2.0 * v).unwrap();
        let t1 = tokenize(&x, &p).unwrap();
        let t2 = tokenize(&x2, &p).unwrap();
        let zero = tokenize(&Tensor::zeros(&[2, 5]), &p).unwrap();
        for i in 0..t1.len() {
            let a = t1.data()[i] - zero.data()[i];
            let b = t2.data()[i] - zero.data()[i];
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_shapes_and_reparameterization_identity() {
        let cfg = tiny_config();
        let p = Parameters::init(&cfg).unwrap();
        let x = batch(4, 5);
        let out = encode(&x, &p, &Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(out.mu.shape(), &[4, 5]);
        assert_eq!(out.logvar.shape(), &[4, 5]);
        assert_eq!(out.z, out.mu);
        assert_eq!(out.z1.shape(), &[4, 2]);
        assert_eq!(out.z2.shape(), &[4, 3]);
        for i in 0..4 {
            let joined: Vec<f64> = [out.z1.row(i), out.z2.row(i)].concat();
            assert_eq!(joined.as_slice(), out.z.row(i));
        }
        assert!(encode(&x, &p, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn encode_is_row_independent() {
        let cfg = tiny_config();
        let p = Parameters::init(&cfg).unwrap();
        let x = batch(4, 5);
        let eps = draw_eps(4, 5, 1, &[0]);
        let perm = [2usize, 0, 3, 1];
        let a = encode(&x, &p, &eps).unwrap();
        let b = encode(
            &x.select_rows(&perm).unwrap(),
            &p,
            &eps.select_rows(&perm).unwrap(),
        )
        .unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..5 {
                assert!((b.z.get2(new, j) - a.z.get2(old, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_with_zero_weights_returns_final_bias() {
        let cfg = tiny_config();
        let mut p = Parameters::init(&cfg).unwrap();
        for name in p.names().to_vec() {
            if name.starts_with("decoder") {
                let t = p.get(&name).unwrap();
                let fill = if name == "decoder.2.bias" { 0.7 } else { 0.0 };
                let z = Tensor::filled(t.shape(), fill);
                p.replace(&name, z).unwrap();
            }
        }
        let xhat = decode(&batch(3, 5), &p).unwrap();
        assert_eq!(xhat.shape(), &[3, 5]);
        assert!(xhat.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn heads_are_independent() {
        let cfg = tiny_config();
        let mut p = Parameters::init(&cfg).unwrap();
        let z = batch(3, 5);
        let before = predict_heads(&z, &p).unwrap();
        assert_eq!(before.shape(), &[3, N_OUTCOMES]);
        let t = p.get("head3.2.bias").unwrap().map(|v| v + 1.5).unwrap();
        p.replace("head3.2.bias", t).unwrap();
        let after = predict_heads(&z, &p).unwrap();
        for i in 0..3 {
            for c in 0..N_OUTCOMES {
                let changed = (after.get2(i, c) - before.get2(i, c)).abs() > 0.0;
                assert_eq!(changed, c == 3);
            }
        }
        let probs = after.map(crate::graph::sigmoid).unwrap();
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let p = with_random_biases(Parameters::init(&cfg).unwrap(), 4);
        let x = batch(8, 5);
        let eps = draw_eps(8, 5, 9, &[1]);
        let mut all = p.tensors().to_vec();
        all.push(x);
        let n_params = p.tensors().len();
        let r = gradient_check_many(
            |g, ids| {
                let bound = Bound {
                    ids: ids[..n_params].to_vec(),
                    cfg: cfg.clone(),
                };
                let e = g.constant(eps.clone());
                let enc = bound.encode(g, ids[n_params], e)?;
                let xhat = bound.decode(g, enc.z)?;
                let logits = bound.predict_heads(g, enc.z)?;
                let s1 = g.tanh(xhat)?;
                let s1 = g.sum(s1)?;
                let s2 = g.sigmoid(logits)?;
                let s2 = g.sum(s2)?;
                let s3 = g.square(enc.logvar)?;
                let s3 = g.sum(s3)?;
                let t = g.add(s1, s2)?;
                g.add(t, s3)
            },
            &all,
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }
}
