//! Randomly initialised feature extractors and classifiers.
//!
//! A network is a stack of hidden [`Layer`]s followed by a dense head. The
//! embedding is the flattened output of the last hidden layer; logits add the
//! head. Hidden layers are
//!
//! - `ConvPool`: 3×3 same-padded convolution, bias, ReLU, 2×2 average pool;
//! - `Dense`: affine map followed by ReLU.
//!
//! There are no normalisation layers.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "width")]
pub enum Layer {
    ConvPool(usize),
    Dense(usize),
}

/// Layer stack for `[C, H, W]` inputs and `num_classes` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

impl Arch {
    /// Two conv blocks of width 32 and a dense embedding of 64.
    pub fn convnet(input: [usize; 3], num_classes: usize) -> Self {
        Self::build(input, num_classes, vec![Layer::ConvPool(32), Layer::ConvPool(32), Layer::Dense(64)])
    }

    pub fn mlp(input: [usize; 3], num_classes: usize) -> Self {
        Self::build(input, num_classes, vec![Layer::Dense(128), Layer::Dense(128)])
    }

    pub fn deep_conv(input: [usize; 3], num_classes: usize) -> Self {
        Self::build(
            input,
            num_classes,
            vec![Layer::ConvPool(32), Layer::ConvPool(32), Layer::ConvPool(32), Layer::Dense(64)],
        )
    }

    pub fn wide_conv(input: [usize; 3], num_classes: usize) -> Self {
        Self::build(input, num_classes, vec![Layer::ConvPool(64), Layer::ConvPool(64), Layer::Dense(64)])
    }

    /// Looks up `convnet`, `mlp`, `deep_conv` or `wide_conv`.
    pub fn preset(name: &str, input: [usize; 3], num_classes: usize) -> Result<Self> {
        match name {
            "convnet" => Ok(Self::convnet(input, num_classes)),
            "mlp" => Ok(Self::mlp(input, num_classes)),
            "deep_conv" => Ok(Self::deep_conv(input, num_classes)),
            "wide_conv" => Ok(Self::wide_conv(input, num_classes)),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }

    fn build(input: [usize; 3], num_classes: usize, layers: Vec<Layer>) -> Self {
        Self { input, layers, num_classes }
    }

    /// Shapes of every parameter tensor, in storage order, plus the embedding
    /// width. Fails when the layers do not compose.
    pub fn param_shapes(&self) -> Result<(Vec<Vec<usize>>, usize)> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "arch needs positive input and class counts, got {:?} and {}",
                self.input, self.num_classes
            )));
        }
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::ConvPool(width) => {
                    if flat.is_some() {
                        return Err(Error::Config(format!("layer {i}: convolution after a dense layer")));
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Config(format!("layer {i}: cannot pool a {h}x{w} map")));
                    }
                    if width == 0 {
                        return Err(Error::Config(format!("layer {i}: zero width")));
                    }
                    shapes.push(vec![width, c, KERNEL, KERNEL]);
                    shapes.push(vec![width]);
                    c = width;
                    h /= 2;
                    w /= 2;
                }
                Layer::Dense(width) => {
                    if width == 0 {
                        return Err(Error::Config(format!("layer {i}: zero width")));
                    }
                    let fan_in = flat.unwrap_or(c * h * w);
                    shapes.push(vec![fan_in, width]);
                    shapes.push(vec![width]);
                    flat = Some(width);
                }
            }
        }
        let embed_dim = flat.unwrap_or(c * h * w);
        shapes.push(vec![embed_dim, self.num_classes]);
        shapes.push(vec![self.num_classes]);
        Ok((shapes, embed_dim))
    }
}

/// Weights and biases of a network, in layer order, head last.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Arch,
    pub tensors: Vec<Tensor>,
    pub embed_dim: usize,
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        _ => shape[0],
    }
}

/// Kaiming-normal weights (`std = √(2 / fan_in)`) and zero biases.
pub fn init_network(arch: &Arch, seed: u64) -> Result<NetworkParams> {
    let (shapes, embed_dim) = arch.param_shapes()?;
    let mut rng = rng::stream(seed, rng::WEIGHTS);
    let tensors = shapes
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Ok(Tensor::zeros(&shape));
            }
            let std = (2.0 / fan_in(&shape) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Ok(Tensor::new(shape, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkParams { arch: arch.clone(), tensors, embed_dim })
}

impl NetworkParams {
    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.arch.input {
            return Err(Error::Config(format!(
                "batch shape {s:?} does not match arch input {:?}",
                self.arch.input
            )));
        }
        Ok(())
    }

    /// Penultimate activations `[B, embed_dim]` of `x: [B, C, H, W]`.
    pub fn embed_on(&self, tape: &Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        let mut flat = false;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            h = match layer {
                Layer::ConvPool(_) => {
                    let y = tape.conv2d(h, w, false)?;
                    let y = tape.add_bias(y, b)?;
                    let y = tape.relu(y)?;
                    tape.avg_pool2(y)?
                }
                Layer::Dense(_) => {
                    if !flat {
                        h = tape.flatten(h)?;
                        flat = true;
                    }
                    let y = tape.matmul(h, w)?;
                    let y = tape.add_bias(y, b)?;
                    tape.relu(y)?
                }
            };
        }
        if !flat {
            h = tape.flatten(h)?;
        }
        Ok(h)
    }

    /// Class scores `[B, num_classes]`.
    pub fn logits_on(&self, tape: &Tape, params: &[Var], x: Var) -> Result<Var> {
        let e = self.embed_on(tape, params, x)?;
        let n = params.len();
        let y = tape.matmul(e, params[n - 2])?;
        Ok(tape.add_bias(y, params[n - 1])?)
    }

    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let e = self.embed_on(&tape, &params, x)?;
        Ok((*tape.value(e)).clone())
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let z = self.logits_on(&tape, &params, x)?;
        Ok((*tape.value(z)).clone())
    }

    /// Arg-max class per row, processed in chunks of `chunk` examples.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let k = self.arch.num_classes;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let z = self.logits(&images.rows(start, len)?)?;
            for row in z.data().chunks(k) {
                // first maximum wins
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                out.push(best);
            }
            start += len;
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let arch = serde_json::to_vec(&self.arch)?;
        let mut out = Vec::new();
        out.write_all(FDDP_MAGIC)?;
        out.write_u32::<LittleEndian>(FDDP_VERSION)?;
        out.write_u32::<LittleEndian>(arch.len() as u32)?;
        out.write_all(&arch)?;
        out.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            out.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("FDDP: {what}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != FDDP_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != FDDP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut arch = vec![0u8; len];
        r.read_exact(&mut arch).map_err(|_| bad("truncated arch"))?;
        let arch: Arch = serde_json::from_slice(&arch)?;
        let (shapes, embed_dim) = arch.param_shapes()?;
        let count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        if count != shapes.len() {
            return Err(bad(&format!("{count} tensors, arch needs {}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for want in shapes {
            let nd = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated tensor"))? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated tensor"))? as usize);
            }
            if shape != want {
                return Err(bad(&format!("tensor shape {shape:?}, arch needs {want:?}")));
            }
            let mut data = vec![0.0; shape.iter().product()];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated tensor"))?;
            tensors.push(Tensor::new(shape, data)?);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { arch, tensors, embed_dim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const FDDP_MAGIC: &[u8; 4] = b"FDDP";
pub const FDDP_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn small() -> Arch {
        Arch::build([2, 8, 8], 3, vec![Layer::ConvPool(4), Layer::Dense(6)])
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_network(&Arch::convnet([3, 16, 16], 5), 4).unwrap();
        let b = init_network(&Arch::convnet([3, 16, 16], 5), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embed_dim, 64);
        for t in a.tensors.iter().filter(|t| t.ndim() == 1) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let c = init_network(&Arch::convnet([3, 16, 16], 5), 5).unwrap();
        assert_ne!(a.tensors[0], c.tensors[0]);
    }

    #[test]
    fn weight_scale_follows_fan_in() {
        let p = init_network(&Arch::convnet([3, 16, 16], 5), 0).unwrap();
        for t in p.tensors.iter().filter(|t| t.ndim() > 1) {
            let fi = fan_in(t.shape());
            if fi < 64 {
                continue;
            }
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let want = (2.0 / fi as f64).sqrt();
            assert!((sd / want - 1.0).abs() < 0.2, "fan_in {fi}: sd {sd} vs {want}");
        }
    }

    #[test]
    fn non_composing_arch_is_rejected() {
        let odd = Arch::build([1, 6, 6], 2, vec![Layer::ConvPool(4), Layer::ConvPool(4)]);
        assert!(init_network(&odd, 0).is_err());
        let conv_after_dense = Arch::build([1, 8, 8], 2, vec![Layer::Dense(4), Layer::ConvPool(4)]);
        assert!(init_network(&conv_after_dense, 0).is_err());
        assert!(Arch::preset("resnet", [1, 8, 8], 2).is_err());
    }

    #[test]
    fn embedding_is_batch_independent() {
        let p = init_network(&small(), 1).unwrap();
        let row: Vec<f64> = (0..128).map(|i| (i as f64 * 0.13).sin().abs()).collect();
        let one = p.embed(&Tensor::new(vec![1, 2, 8, 8], row.clone()).unwrap()).unwrap();
        let two = p
            .embed(&Tensor::new(vec![2, 2, 8, 8], [row.clone(), row].concat()).unwrap())
            .unwrap();
        assert_eq!(one.shape(), &[1, 6]);
        assert_eq!(&two.data()[..6], one.data());
        assert_eq!(&two.data()[6..], one.data());
        let zero = p.embed(&Tensor::zeros(&[1, 2, 8, 8])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(p.embed(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = init_network(&small(), 2).unwrap();
        let x: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let x = Tensor::new(vec![2, 2, 8, 8], x).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let params = p.bind(tape, false);
                let e = p.embed_on(tape, &params, x).map_err(into_tensor)?;
                tape.sum_all(e)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let p = init_network(&small(), 3).unwrap();
        let x: Vec<f64> = (0..256).map(|i| ((i * 17 % 31) as f64) / 31.0).collect();
        let x = Tensor::new(vec![2, 2, 8, 8], x).unwrap();
        let mut onehot = vec![0.0; 6];
        onehot[1] = 1.0;
        onehot[5] = 1.0;
        let t = Tensor::new(vec![2, 3], onehot).unwrap();
        for which in [0, 2, 4] {
            let err = finite_diff_check(
                |tape, w| {
                    let mut params = p.bind(tape, false);
                    params[which] = w;
                    let xv = tape.constant(x.clone());
                    let z = p.logits_on(tape, &params, xv).map_err(into_tensor)?;
                    let tv = tape.constant(t.clone());
                    tape.softmax_cross_entropy(z, tv)
                },
                &p.tensors[which],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "tensor {which}: {err}");
        }
    }

    #[test]
    fn logits_rows_and_argmax() {
        let p = init_network(&small(), 5).unwrap();
        let x = Tensor::full(&[3, 2, 8, 8], 0.5);
        let z = p.logits(&x).unwrap();
        assert_eq!(z.shape(), &[3, 3]);
        let pred = p.predict(&x, 2).unwrap();
        assert_eq!(pred.len(), 3);
        let row = &z.data()[..3];
        let shifted: Vec<f64> = row.iter().map(|v| v + 7.5).collect();
        let arg = |r: &[f64]| r.iter().enumerate().fold(0, |b, (j, &v)| if v > r[b] { j } else { b });
        assert_eq!(arg(row), arg(&shifted));
        assert_eq!(pred[0], arg(row));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_network(&Arch::mlp([1, 8, 8], 4), 9).unwrap();
        let bytes = p.encode().unwrap();
        assert_eq!(&bytes[..4], b"FDDP");
        assert_eq!(NetworkParams::decode(&bytes).unwrap(), p);
        assert!(NetworkParams::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    fn into_tensor(e: Error) -> crate::TensorError {
        match e {
            Error::Tensor(t) => t,
            other => crate::TensorError::Internal(other.to_string()),
        }
    }
}
