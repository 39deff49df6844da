//! Fully connected ReLU network with identity output (logits).
//!
//! Parameters are stored flat: for each layer, the weight matrix
//! (`out × in`, row-major) followed by the bias vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{LogitMatrix, Matrix};
use crate::ops::softmax_into;

pub const MLP_MAGIC: [u8; 4] = *b"MLP1";
const MLP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[l]` the output of layer `l` (post-ReLU
    /// for hidden layers, logits for the last).
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl MlpNet {
    /// He-normal weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut params = Vec::with_capacity(Self::count_params(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let expected = Self::count_params(sizes);
        if params.len() != expected {
            return Err(Error::shape(format!(
                "network needs {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes {sizes:?} must list input and output widths, all positive"
            )));
        }
        Ok(())
    }

    fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.input_dim());
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let mut out: Vec<f64> = w
                .chunks_exact(fan_in)
                .zip(b)
                .map(|(row, &bias)| bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
            off += fan_in * fan_out + fan_out;
        }
        ForwardCache { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    /// Logits for every row of `features`.
    pub fn logits(&self, features: &Matrix) -> Result<LogitMatrix> {
        if features.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "features have {} columns, network expects {}",
                features.cols(),
                self.input_dim()
            )));
        }
        let k = self.output_dim();
        let mut data = Vec::with_capacity(features.rows() * k);
        for x in features.row_iter() {
            data.extend(self.forward(x));
        }
        let m = Matrix::new(features.rows(), k, data)
            .map_err(|_| Error::Numeric("network produced non-finite logits".into()))?;
        LogitMatrix::new(m)
    }

    /// Adds `∂L/∂θ` to `grad` given `∂L/∂logits` for one cached sample.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dlogits.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &cache.acts[l];
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for ((row, &d), gbias) in gw.chunks_exact_mut(fan_in).zip(&delta).zip(gb.iter_mut()) {
                *gbias += d;
                if d != 0.0 {
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l > 0 {
                let w = &self.params[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for (row, &d) in w.chunks_exact(fan_in).zip(&delta) {
                    if d != 0.0 {
                        for (p, &wv) in prev.iter_mut().zip(row) {
                            *p += d * wv;
                        }
                    }
                }
                // ReLU mask from the post-activation values of layer l.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Cross-entropy of softmax(logits) against a (possibly unnormalised)
    /// soft target `t`, returning the loss and writing `∂/∂logits`, which is
    /// `(Σ t) p − t`.
    pub fn soft_ce_grad(logits: &[f64], target: &[f64], dlogits: &mut [f64]) -> f64 {
        softmax_into(logits, dlogits);
        let lse = crate::ops::log_sum_exp(logits);
        let mass: f64 = target.iter().sum();
        let mut loss = 0.0;
        for ((d, &t), &z) in dlogits.iter_mut().zip(target).zip(logits) {
            if t != 0.0 {
                loss -= t * (z - lse);
            }
            *d = mass * *d - t;
        }
        loss
    }

    /// Copy with every parameter rounded through `f32`, matching what the
    /// binary format stores.
    pub fn quantized(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            params: self.params.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * (self.sizes.len() + self.params.len()));
        out.extend_from_slice(&MLP_MAGIC);
        out.extend_from_slice(&MLP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        push_f32s(&mut out, &self.params)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, MLP_MAGIC)?;
        let version = r.u32()?;
        if version != MLP_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let layers = r.u32()? as usize;
        if !(2..=64).contains(&layers) {
            return Err(Error::shape(format!("implausible layer count {layers}")));
        }
        let sizes = (0..layers)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        Self::check_sizes(&sizes)?;
        let params = r.f32s(Self::count_params(&sizes))?;
        r.finish()?;
        Self::from_params(&sizes, params)
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, vals: &[f64]) -> Result<()> {
    for &v in vals {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Numeric(format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Little-endian cursor with truncation checks.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: 4,
                found: bytes.len() as u64,
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        Ok(Self { bytes, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            }),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::shape("size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::shape(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
