//! Trainable embedding network and classifier head.
//!
//! Two reference backbones: `conv_small` (two 3x3 conv + pool stages into a
//! linear embedding) and `mlp`. Parameters are named tensors; checkpoints
//! serialize them to a little-endian binary format with a magic header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RandomSource;

const CHECKPOINT_MAGIC: &[u8; 4] = b"UMFL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    ConvSmall,
    Mlp,
}

impl Arch {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "conv_small" => Ok(Arch::ConvSmall),
            "mlp" => Ok(Arch::Mlp),
            other => {
                Err(Error::config(format!("model.arch: expected conv_small|mlp, got `{other}`")))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::config(format!(
                "model.embedding_dim: must be >= 2, got {}",
                self.embedding_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes: must be >= 1".to_string()));
        }
        if self.arch == Arch::ConvSmall && (self.input_h % 4 != 0 || self.input_w % 4 != 0) {
            return Err(Error::config(format!(
                "model.input: conv_small needs H and W divisible by 4, got {}x{}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    fn flat_input(&self) -> usize {
        self.input_h * self.input_w * self.input_c
    }

    /// Width of the flattened feature map feeding the embedding layer.
    fn conv_flat(&self) -> usize {
        16 * (self.input_h / 4) * (self.input_w / 4)
    }

    /// Parameter names and shapes, in binding order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embedding_dim;
        let mut specs = match self.arch {
            Arch::ConvSmall => vec![
                ("conv1.w".to_string(), vec![8, self.input_c, 3, 3]),
                ("conv1.b".to_string(), vec![8]),
                ("conv2.w".to_string(), vec![16, 8, 3, 3]),
                ("conv2.b".to_string(), vec![16]),
                ("embed.w".to_string(), vec![self.conv_flat(), d]),
                ("embed.b".to_string(), vec![d]),
            ],
            Arch::Mlp => vec![
                ("fc1.w".to_string(), vec![self.flat_input(), 64]),
                ("fc1.b".to_string(), vec![64]),
                ("fc2.w".to_string(), vec![64, 64]),
                ("fc2.b".to_string(), vec![64]),
                ("embed.w".to_string(), vec![64, d]),
                ("embed.b".to_string(), vec![d]),
            ],
        };
        specs.push(("cls.w".to_string(), vec![d, self.num_classes]));
        specs.push(("cls.b".to_string(), vec![self.num_classes]));
        specs
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
}

/// fan-in for he_uniform: product of all non-output dimensions.
fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3], // conv kernels: cin * kh * kw
        2 => shape[0],                       // linear: in x out
        _ => shape.iter().product(),
    }
}

impl Model {
    /// he_uniform weights, zero biases, drawn in parameter order.
    pub fn init<R: RandomSource>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        for (name, shape) in cfg.param_specs() {
            let n: usize = shape.iter().product();
            let values = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let limit = (6.0 / fan_in(&shape) as f64).sqrt();
                (0..n).map(|_| rng.uniform_f64(-limit, limit)).collect::<Result<_>>()?
            };
            params.push(Param { name, tensor: Tensor::new(shape, values)? });
        }
        Ok(Self { cfg, params })
    }

    /// All-zero parameters; mostly useful in tests.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg
            .param_specs()
            .into_iter()
            .map(|(name, shape)| Param { name, tensor: Tensor::zeros(shape) })
            .collect();
        Ok(Self { cfg, params })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Packs images into an `n x c x h x w` input tensor.
    pub fn images_to_input(&self, images: &[&Image]) -> Result<Tensor> {
        let (h, w, c) = (self.cfg.input_h, self.cfg.input_w, self.cfg.input_c);
        let mut values = vec![0.0; images.len() * c * h * w];
        for (n, img) in images.iter().enumerate() {
            if img.height != h || img.width != w || img.channels != c {
                return Err(Error::precondition(format!(
                    "model: image {n} is {}x{}x{}, expected {h}x{w}x{c}",
                    img.height, img.width, img.channels
                )));
            }
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        values[((n * c + ci) * h + y) * w + x] = img.get(y, x, ci);
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), c, h, w], values)
    }

    /// Inserts all parameters as tape leaves, in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let leaves = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let names = self.params.iter().map(|p| p.name.clone()).collect();
        BoundModel { cfg: self.cfg.clone(), names, leaves }
    }

    /// Embeds images without keeping gradients; returns one row per image.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf(self.images_to_input(images)?);
        let z = bound.embed(&mut tape, input)?;
        let t = tape.value(z);
        let d = t.shape[1];
        Ok(t.values.chunks_exact(d).map(|r| r.to_vec()).collect())
    }

    /// Copies tape gradients into each parameter's grad slot.
    pub fn capture_grads(&mut self, tape: &Tape, bound: &BoundModel) -> Result<()> {
        for (param, &leaf) in self.params.iter_mut().zip(bound.leaves.iter()) {
            let g = tape
                .grad(leaf)
                .ok_or_else(|| Error::precondition("capture_grads: run backward first".to_string()))?;
            param.tensor.grad = Some(g.to_vec());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.tensor.shape.len() as u64).to_le_bytes());
            for &dim in &p.tensor.shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in &p.tensor.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Loads a checkpoint into a model of the given config; rejects an
    /// unknown version and any name/shape mismatch.
    pub fn load(path: &Path, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;

        let magic = take(&mut bytes.as_slice(), &mut pos, 4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint: bad magic bytes".to_string()));
        }
        let version = u32::from_le_bytes(
            take(&mut bytes.as_slice(), &mut pos, 4, "version")?.try_into().unwrap(),
        );
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint: unknown format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }

        let mut params = Vec::new();
        while pos < bytes.len() {
            let name_len = read_u64(&bytes, &mut pos, "name length")? as usize;
            let name_bytes = take(&mut bytes.as_slice(), &mut pos, name_len, "name")?;
            let name = String::from_utf8(name_bytes.to_vec())
                .map_err(|_| Error::format("checkpoint: parameter name is not UTF-8".to_string()))?;
            let rank = read_u64(&bytes, &mut pos, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&bytes, &mut pos, "dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = take(&mut bytes.as_slice(), &mut pos, 8, "values")?;
                values.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            params.push(Param { name, tensor: Tensor::new(shape, values)? });
        }

        let specs = cfg.param_specs();
        if params.len() != specs.len() {
            return Err(Error::format(format!(
                "checkpoint: {} parameters, model expects {}",
                params.len(),
                specs.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(specs.iter()) {
            if &p.name != name || &p.tensor.shape != shape {
                return Err(Error::format(format!(
                    "checkpoint: parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name, p.tensor.shape
                )));
            }
        }
        Ok(Self { cfg, params })
    }
}

fn take<'a>(bytes: &mut &'a [u8], pos: &mut usize, n: usize, field: &str) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(Error::format(format!("checkpoint: truncated reading {field}")));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u64(bytes: &[u8], pos: &mut usize, field: &str) -> Result<u64> {
    let raw = take(&mut &bytes[..], pos, 8, field)?;
    Ok(u64::from_le_bytes(raw.try_into().unwrap()))
}

/// Model parameters inserted into one tape.
pub struct BoundModel {
    cfg: ModelConfig,
    names: Vec<String>,
    pub leaves: Vec<Value>,
}

impl BoundModel {
    fn leaf(&self, name: &str) -> Value {
        let idx = self.names.iter().position(|n| n == name).unwrap();
        self.leaves[idx]
    }

    /// phi: images -> N x D embeddings.
    pub fn embed(&self, tape: &mut Tape, input: Value) -> Result<Value> {
        match self.cfg.arch {
            Arch::ConvSmall => {
                let c1 = tape.conv2d(input, self.leaf("conv1.w"), self.leaf("conv1.b"))?;
                let r1 = tape.relu(c1)?;
                let p1 = tape.avgpool2d(r1)?;
                let c2 = tape.conv2d(p1, self.leaf("conv2.w"), self.leaf("conv2.b"))?;
                let r2 = tape.relu(c2)?;
                let p2 = tape.avgpool2d(r2)?;
                let flat = tape.flatten(p2)?;
                let proj = tape.matmul(flat, self.leaf("embed.w"))?;
                tape.add_bias(proj, self.leaf("embed.b"))
            }
            Arch::Mlp => {
                let flat = tape.flatten(input)?;
                let h1 = tape.matmul(flat, self.leaf("fc1.w"))?;
                let h1 = tape.add_bias(h1, self.leaf("fc1.b"))?;
                let h1 = tape.relu(h1)?;
                let h2 = tape.matmul(h1, self.leaf("fc2.w"))?;
                let h2 = tape.add_bias(h2, self.leaf("fc2.b"))?;
                let h2 = tape.relu(h2)?;
                let proj = tape.matmul(h2, self.leaf("embed.w"))?;
                tape.add_bias(proj, self.leaf("embed.b"))
            }
        }
    }

    /// Single linear layer on the embedding: N x D -> N x num_classes.
    pub fn classify(&self, tape: &mut Tape, embeddings: Value) -> Result<Value> {
        let logits = tape.matmul(embeddings, self.leaf("cls.w"))?;
        tape.add_bias(logits, self.leaf("cls.b"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn cfg48() -> ModelConfig {
        ModelConfig {
            arch: Arch::ConvSmall,
            embedding_dim: 32,
            num_classes: 10,
            input_h: 48,
            input_w: 24,
            input_c: 3,
        }
    }

    #[test]
    fn conv_small_shapes_flow_through() {
        // 48x24x3 -> two 2x2 pools -> 16 * 12 * 6 = 1152 flat features.
        let cfg = cfg48();
        assert_eq!(cfg.conv_flat(), 1152);
        let model = Model::init(cfg, &mut SplitMix64::new(1)).unwrap();
        let img = Image::filled(48, 24, 3, 0.3).unwrap();
        let z = model.embed_images(&[&img, &img]).unwrap();
        assert_eq!(z.len(), 2);
        assert_eq!(z[0].len(), 32);
        // Identical inputs embed identically.
        assert_eq!(z[0], z[1]);
    }

    #[test]
    fn zero_parameters_embed_to_zero() {
        let model = Model::zeros(cfg48()).unwrap();
        let img = Image::filled(48, 24, 3, 0.9).unwrap();
        let z = model.embed_images(&[&img]).unwrap();
        assert!(z[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let model = Model::zeros(cfg48()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let emb = tape.leaf(Tensor::new(vec![1, 32], vec![0.25; 32]).unwrap());
        let logits = bound.classify(&mut tape, emb).unwrap();
        assert!(tape.value(logits).values.iter().all(|&v| v == 0.0));
        let loss = tape.softmax_cross_entropy(logits, &[3]).unwrap();
        assert!((tape.value(loss).item() - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(cfg48(), &mut SplitMix64::new(5)).unwrap();
        let b = Model::init(cfg48(), &mut SplitMix64::new(5)).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.tensor.values, pb.tensor.values);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::init(cfg48(), &mut SplitMix64::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.umfl");
        model.save(&path).unwrap();
        let back = Model::load(&path, cfg48()).unwrap();
        for (a, b) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.values, b.tensor.values);
        }
        // Saving the loaded model reproduces the file byte-for-byte.
        let path2 = dir.path().join("model2.umfl");
        back.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_version_and_shape_mismatch() {
        let model = Model::init(cfg48(), &mut SplitMix64::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.umfl");
        model.save(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99; // version
        let bad = dir.path().join("bad.umfl");
        fs::write(&bad, &bytes).unwrap();
        let err = Model::load(&bad, cfg48()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let mut other = cfg48();
        other.embedding_dim = 16;
        let err = Model::load(&path, other).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }

    #[test]
    fn mlp_arch_runs() {
        let cfg = ModelConfig {
            arch: Arch::Mlp,
            embedding_dim: 8,
            num_classes: 4,
            input_h: 6,
            input_w: 5,
            input_c: 3,
        };
        let model = Model::init(cfg, &mut SplitMix64::new(2)).unwrap();
        let img = Image::filled(6, 5, 3, 0.5).unwrap();
        let z = model.embed_images(&[&img]).unwrap();
        assert_eq!(z[0].len(), 8);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model = Model::zeros(cfg48()).unwrap();
        let img = Image::filled(24, 24, 3, 0.5).unwrap();
        assert!(model.embed_images(&[&img]).is_err());
    }
}
