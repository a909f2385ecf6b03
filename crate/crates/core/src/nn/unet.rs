//! Time-conditioned encoder-decoder noise predictor.
//!
//! Layout for `depth = L` levels with `c_l = base_channels * 2^l`:
//!
//! ```text
//! t -> sinusoid(time_embed_dim) -> fc1 -> silu -> fc2 = emb
//! x -> conv_in(1 -> c_0)
//! for l in 0..L:   h = enc[l](h, emb); skip[l] = h; if l < L-1 { h = down[l](pool(h)) }
//! for l in L-2..0: h = dec[l](concat(up(h), skip[l]), emb)
//! eps = conv_out(silu(h))
//! ```
//!
//! Each residual block is `conv(silu(x)) + proj(silu(emb)) -> conv(silu(.))`
//! plus a (1x1-projected when channel counts differ) identity path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamStore, Var};
use super::tensor::{Real, Tensor};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub normalization: Normalization,
}

impl NetworkConfig {
    /// Three levels, 32 base channels: trains on 64x64 phantoms on a CPU.
    pub fn desk() -> Self {
        NetworkConfig {
            base_channels: 32,
            depth: 3,
            time_embed_dim: 64,
            activation: Activation::Silu,
            normalization: Normalization::None,
        }
    }

    /// Wider and deeper preset intended for 512x512 b-scans.
    pub fn paper_scale() -> Self {
        NetworkConfig {
            base_channels: 64,
            depth: 5,
            time_embed_dim: 256,
            ..Self::desk()
        }
    }

    /// A few thousand parameters; for gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            base_channels: 4,
            depth: 2,
            time_embed_dim: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.time_embed_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Contract(format!(
                "input {height}x{width} must be nonzero multiples of {m}"
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Interleaved sinusoidal embedding `[sin(t f_0), cos(t f_0), sin(t f_1), ...]`
/// with geometric frequencies `f_i = 10000^(-i / (dim / 2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    weight: usize,
    bias: usize,
    kernel: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlockIds {
    conv1: ConvIds,
    time: LinearIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
}

#[derive(Debug, Clone)]
struct Layout {
    fc1: LinearIds,
    fc2: LinearIds,
    conv_in: ConvIds,
    enc: Vec<ResBlockIds>,
    down: Vec<ConvIds>,
    dec: Vec<ResBlockIds>,
    conv_out: ConvIds,
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all arrays.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl<T: Real> ParamStore<T> for ParamSet<T> {
    fn param(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    fn param_count(&self) -> usize {
        self.tensors.len()
    }
}

struct Builder<'r, T> {
    params: ParamSet<T>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, shape: [usize; 4], bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    T::from_f64(self.rng.random_range(-bound..bound))
                } else {
                    T::zero()
                }
            })
            .collect();
        self.params.names.push(name);
        self.params.tensors.push(Tensor::from_vec(shape, data));
        self.params.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> ConvIds {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        ConvIds {
            weight: self.add(format!("{name}.weight"), [cout, fan_in, 1, 1], bound),
            bias: self.add(format!("{name}.bias"), [cout, 1, 1, 1], 0.0),
            kernel,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIds {
        let bound = 1.0 / (din as f64).sqrt();
        LinearIds {
            weight: self.add(format!("{name}.weight"), [dout, din, 1, 1], bound),
            bias: self.add(format!("{name}.bias"), [dout, 1, 1, 1], 0.0),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlockIds {
        ResBlockIds {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            time: self.linear(&format!("{name}.time"), temb, cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
        }
    }
}

/// The noise-prediction network `eps_theta(x_t, t)`.
#[derive(Debug, Clone)]
pub struct EpsNet<T: Real = f32> {
    config: NetworkConfig,
    params: ParamSet<T>,
    layout: Layout,
}

/// Single-precision network used for training and denoising.
pub type EpsilonPredictor = EpsNet<f32>;

impl<T: Real> EpsNet<T> {
    /// Randomly initialised network; the initialisation is a pure function of
    /// `(config, seed)`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet {
                names: Vec::new(),
                tensors: Vec::new(),
            },
            rng: &mut rng,
        };
        let d = config.time_embed_dim;
        let fc1 = b.linear("time.fc1", d, d);
        let fc2 = b.linear("time.fc2", d, d);
        let conv_in = b.conv("conv_in", 1, config.channels(0), 3);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..config.depth {
            let c = config.channels(l);
            enc.push(b.res_block(&format!("enc{l}"), c, c, d));
            if l + 1 < config.depth {
                down.push(b.conv(&format!("down{l}"), c, config.channels(l + 1), 3));
            }
        }
        let mut dec = Vec::new();
        for l in 0..config.depth - 1 {
            let c = config.channels(l);
            let cin = config.channels(l + 1) + c;
            dec.push(b.res_block(&format!("dec{l}"), cin, c, d));
        }
        let conv_out = b.conv("conv_out", config.channels(0), 1, 3);
        let params = b.params;
        Ok(EpsNet {
            config,
            params,
            layout: Layout {
                fc1,
                fc2,
                conv_in,
                enc,
                down,
                dec,
                conv_out,
            },
        })
    }

    /// Rebuild from stored arrays; names and shapes must match the layout
    /// implied by `config`.
    pub fn from_named(config: NetworkConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if named.len() != net.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter arrays, found {}",
                net.params.len(),
                named.len()
            )));
        }
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            if name != net.params.names[i] || tensor.shape() != net.params.tensors[i].shape() {
                return Err(Error::Contract(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    net.params.names[i],
                    net.params.tensors[i].shape(),
                    tensor.shape()
                )));
            }
            net.params.tensors[i] = tensor;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn cast<U: Real>(&self) -> EpsNet<U> {
        EpsNet {
            config: self.config,
            params: ParamSet {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
            layout: self.layout.clone(),
        }
    }

    fn embed(&self, ts: &[usize]) -> Result<Tensor<T>> {
        let d = self.config.time_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            data.extend(time_embedding(t, d)?.into_iter().map(T::from_f64));
        }
        Ok(Tensor::from_vec([ts.len(), d, 1, 1], data))
    }

    fn build<'g>(
        &'g self,
        g: &mut Graph<'g, T, ParamSet<T>>,
        x: &Tensor<T>,
        ts: &[usize],
    ) -> Result<Var> {
        let [n, c, h, w] = x.shape();
        if c != 1 {
            return Err(Error::Contract(format!("expected 1 channel, got {c}")));
        }
        if ts.len() != n {
            return Err(Error::Contract(format!("{} step indices for batch of {n}", ts.len())));
        }
        self.config.check_input(h, w)?;

        let l = &self.layout;
        let emb = g.input(self.embed(ts)?);
        let emb = linear(g, emb, l.fc1);
        let emb = g.silu(emb);
        let emb = linear(g, emb, l.fc2);
        let emb = g.silu(emb);

        let xi = g.input(x.clone());
        let mut hcur = conv(g, xi, l.conv_in);
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in 0..self.config.depth {
            hcur = res_block(g, hcur, emb, l.enc[level]);
            skips.push(hcur);
            if level + 1 < self.config.depth {
                let pooled = g.avg_pool2(hcur);
                hcur = conv(g, pooled, l.down[level]);
            }
        }
        for level in (0..self.config.depth - 1).rev() {
            let up = g.upsample2(hcur);
            let cat = g.concat(up, skips[level]);
            hcur = res_block(g, cat, emb, l.dec[level]);
        }
        let act = g.silu(hcur);
        Ok(conv(g, act, l.conv_out))
    }

    /// Batched forward pass on `[n, 1, h, w]` with one step per item.
    pub fn forward_tensor(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, x, ts)?;
        Ok(g.value(out).clone())
    }

    /// Weighted noise-regression loss and its parameter gradients:
    /// `loss = sum_n w_n * sum_p (eps_hat - eps)^2 / (n * pixels)`.
    pub fn loss_and_grads(
        &self,
        xt: &Tensor<T>,
        ts: &[usize],
        eps: &Tensor<T>,
        weights: &[f64],
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        if eps.shape() != xt.shape() || weights.len() != xt.batch() {
            return Err(Error::Contract("loss target/weight shape mismatch".into()));
        }
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, xt, ts)?;
        let pred = g.value(out);
        let per_item = pred.item_len();
        let denom = (xt.batch() * per_item) as f64;
        let mut loss = 0.0;
        let mut seed = Vec::with_capacity(pred.len());
        for (i, (p, e)) in pred.data().chunks(per_item).zip(eps.data().chunks(per_item)).enumerate() {
            let wi = weights[i];
            let scale = T::from_f64(2.0 * wi / denom);
            let mut sq = 0.0;
            for (&a, &b) in p.iter().zip(e) {
                let d = a - b;
                sq += d.as_f64() * d.as_f64();
                seed.push(d * scale);
            }
            loss += wi * sq / denom;
        }
        let grads = g.backward(out, Tensor::from_vec(pred.shape(), seed));
        Ok((loss, grads))
    }
}

fn conv<'g, T: Real>(g: &mut Graph<'g, T, ParamSet<T>>, x: Var, ids: ConvIds) -> Var {
    let (w, b) = (g.param(ids.weight), g.param(ids.bias));
    g.conv2d(x, w, b, ids.kernel)
}

fn linear<'g, T: Real>(g: &mut Graph<'g, T, ParamSet<T>>, x: Var, ids: LinearIds) -> Var {
    let (w, b) = (g.param(ids.weight), g.param(ids.bias));
    g.linear(x, w, b)
}

fn res_block<'g, T: Real>(g: &mut Graph<'g, T, ParamSet<T>>, x: Var, emb: Var, ids: ResBlockIds) -> Var {
    let a = g.silu(x);
    let a = conv(g, a, ids.conv1);
    let tb = linear(g, emb, ids.time);
    let a = g.channel_bias(a, tb);
    let a = g.silu(a);
    let a = conv(g, a, ids.conv2);
    let skip = match ids.skip {
        Some(s) => conv(g, x, s),
        None => x,
    };
    g.add(skip, a)
}

pub fn images_to_tensor<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(Error::Contract("images in a batch must share a shape".into()));
        }
        data.extend(img.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::from_vec([images.len(), 1, h, w], data))
}

pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Vec<Image> {
    let [n, c, h, w] = t.shape();
    debug_assert_eq!(c, 1);
    (0..n)
        .map(|i| {
            let data = t.item(i).iter().map(|v| v.as_f64() as f32).collect();
            Image::from_vec(h, w, data).expect("shape matches")
        })
        .collect()
}

impl NoisePredictor for EpsNet<f32> {
    fn predict(&self, xt: &Image, t: usize) -> Result<Image> {
        Ok(self.predict_batch(std::slice::from_ref(xt), &[t])?.remove(0))
    }

    fn predict_batch(&self, xs: &[Image], ts: &[usize]) -> Result<Vec<Image>> {
        let x = images_to_tensor::<f32>(xs)?;
        Ok(tensor_to_images(&self.forward_tensor(&x, ts)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_properties() {
        assert!(time_embedding(3, 7).is_err());
        let zero = time_embedding(0, 8).unwrap();
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = time_embedding(57, 64).unwrap();
        assert_eq!(e.len(), 64);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn tiny_parameter_count() {
        let net = EpsNet::<f64>::new(NetworkConfig::tiny(), 0).unwrap();
        let count = net.parameter_count();
        assert!(count <= 5000, "{count}");
        assert_eq!(count, net.params().tensors().iter().map(|t| t.len()).sum::<usize>());
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = EpsNet::<f32>::new(NetworkConfig::tiny(), 0).unwrap();
        let x = Tensor::zeros([1, 1, 6, 7]);
        assert!(matches!(net.forward_tensor(&x, &[1]), Err(Error::Contract(_))));
        let x = Tensor::zeros([2, 1, 8, 8]);
        assert!(net.forward_tensor(&x, &[1]).is_err());
        let mut cfg = NetworkConfig::tiny();
        cfg.time_embed_dim = 7;
        assert!(EpsNet::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn from_named_rejects_mismatch() {
        let net = EpsNet::<f32>::new(NetworkConfig::tiny(), 1).unwrap();
        let mut named: Vec<_> = net
            .params()
            .names()
            .iter()
            .cloned()
            .zip(net.params().tensors().iter().cloned())
            .collect();
        let ok = EpsNet::from_named(NetworkConfig::tiny(), named.clone()).unwrap();
        assert_eq!(ok.params(), net.params());
        named[0].0 = "bogus".into();
        assert!(EpsNet::from_named(NetworkConfig::tiny(), named).is_err());
    }
}
