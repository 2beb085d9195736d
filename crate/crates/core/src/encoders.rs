//! Frozen semantic backbones: image pyramid features plus a sentence vector.
//!
//! `toy` is a fixed-seed random convolution stack with a bag-of-tokens text
//! encoder and needs no files. `pretrained` and `alternate` are adapters over
//! an external weight file (see [`WEIGHTS_ENV`]); they implement the shape
//! contract of a large vision-language encoder and are never vendored.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Init, ParamId, ParamStore, Tape, Tensor};

/// Directory holding pretrained adapter weight files.
pub const WEIGHTS_ENV: &str = "TABLETOP_WEIGHTS";
pub const TOY_GOAL_DIM: usize = 64;
const TOY_SEED: u64 = 0x70_79;
const TOY_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Bottleneck grid plus skip features ordered from input side to bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub bottleneck: Tensor<f32>,
    pub pyramid: Vec<Tensor<f32>>,
}

pub trait SemanticBackbone: Send + Sync {
    fn name(&self) -> &str;
    fn goal_dim(&self) -> usize;
    /// `rgb` is `H x W x 3` in `[0, 1]`.
    fn encode_image(&self, rgb: &Tensor<f32>) -> Result<ImageFeatures>;
    fn encode_text(&self, instruction: &str) -> Result<Vec<f32>>;
    /// Digest of every frozen parameter.
    fn checksum(&self) -> String;
}

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn token_seed(tok: &str, salt: u64) -> u64 {
    let d = Sha256::digest(tok.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) ^ salt
}

fn check_rgb(rgb: &Tensor<f32>) -> Result<()> {
    if rgb.c != 3 || rgb.h == 0 || rgb.w == 0 {
        return Err(Error::Shape(format!("expected H x W x 3 color, got {:?}", rgb.shape())));
    }
    Ok(())
}

/// Randomly initialised, never trained convolution stack.
pub struct ToyBackbone {
    params: ParamStore<f32>,
    layers: Vec<(ParamId, ParamId)>,
}

impl ToyBackbone {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let layers = TOY_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let w = params.add(format!("toy.conv{i}.w"), &[3, 3, cin, c], Init::He { fan_in: 9 * cin }, &mut rng);
                let b = params.add(format!("toy.conv{i}.b"), &[c], Init::Zeros, &mut rng);
                cin = c;
                (w, b)
            })
            .collect();
        Self { params, layers }
    }
}

impl Default for ToyBackbone {
    fn default() -> Self {
        Self::new()
    }
}

impl SemanticBackbone for ToyBackbone {
    fn name(&self) -> &str {
        "toy"
    }

    fn goal_dim(&self) -> usize {
        TOY_GOAL_DIM
    }

    fn encode_image(&self, rgb: &Tensor<f32>) -> Result<ImageFeatures> {
        check_rgb(rgb)?;
        let mut tape = Tape::new(&self.params);
        let centered = Tensor {
            data: rgb.data.iter().map(|x| 2.0 * x - 1.0).collect(),
            ..*rgb
        };
        let mut x = tape.input(centered);
        let mut levels = Vec::new();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let y = tape.conv(x, w, b, ConvSpec::new(3, TOY_WIDTHS[i]).stride(2))?;
            x = tape.relu(y);
            levels.push(tape.take_value(x));
        }
        let bottleneck = levels.pop().expect("four levels");
        Ok(ImageFeatures {
            bottleneck,
            pyramid: levels,
        })
    }

    fn encode_text(&self, instruction: &str) -> Result<Vec<f32>> {
        let toks = tokens(instruction);
        if toks.is_empty() {
            return Err(Error::Domain("instruction is empty".into()));
        }
        let mut g = vec![0.0f64; TOY_GOAL_DIM];
        for t in &toks {
            let mut rng = ChaCha8Rng::seed_from_u64(token_seed(t, TOY_SEED));
            for x in g.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += z;
            }
        }
        let n = toks.len() as f64;
        Ok(g.into_iter().map(|x| (x / n) as f32).collect())
    }

    fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// Header of an adapter weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterHeader {
    pub image_dim: usize,
    pub text_dim: usize,
    /// Square input side the image is resized to.
    pub input: usize,
    /// Patch side; the bottleneck is `input / patch` on a side.
    pub patch: usize,
    /// Hashed token buckets in the text table.
    pub vocab: usize,
}

/// Patch-projection adapter honouring a large encoder's output contract.
///
/// File layout: `b"TTW1"`, `u32` header length, JSON [`AdapterHeader`], then
/// little-endian `f32` arrays: image projection `3 x image_dim`, image bias
/// `image_dim`, text table `vocab x text_dim`.
pub struct AdapterBackbone {
    name: &'static str,
    header: AdapterHeader,
    image_w: Vec<f32>,
    image_b: Vec<f32>,
    text: Vec<f32>,
    digest: String,
}

/// Expected shapes for a named adapter.
pub fn adapter_contract(name: &str) -> Result<(&'static str, AdapterHeader)> {
    let (file, image_dim, text_dim) = match name {
        "pretrained" => ("vl_adapter.ttw", 2048, 1024),
        "alternate" => ("cls_text_adapter.ttw", 2048, 768),
        other => return Err(Error::Config(format!("no adapter named {other}"))),
    };
    Ok((
        file,
        AdapterHeader {
            image_dim,
            text_dim,
            input: 224,
            patch: 32,
            vocab: 512,
        },
    ))
}

impl AdapterBackbone {
    /// Load from `$TABLETOP_WEIGHTS/<file>`.
    pub fn from_env(name: &str) -> Result<Self> {
        let (file, _) = adapter_contract(name)?;
        let dir = std::env::var_os(WEIGHTS_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::Config(format!(
                "backbone {name} needs weight file {file}; set {WEIGHTS_ENV} to the directory containing it"
            ))
        })?;
        Self::load(name, &dir.join(file))
    }

    pub fn load(name: &str, path: &Path) -> Result<Self> {
        let (file, want) = adapter_contract(name)?;
        if !path.exists() {
            return Err(Error::Config(format!(
                "backbone {name} needs weight file {file}, not found at {}",
                path.display()
            )));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..4] != b"TTW1" {
            return Err(Error::Serde(format!("{} is not an adapter weight file", path.display())));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header: AdapterHeader = serde_json::from_slice(bytes.get(8..8 + n).unwrap_or(&[]))?;
        if header != want {
            return Err(Error::Config(format!("{file}: header {header:?} does not match {want:?}")));
        }
        let vals: Vec<f32> = bytes[8 + n..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (a, b, t) = (3 * header.image_dim, header.image_dim, header.vocab * header.text_dim);
        if vals.len() != a + b + t {
            return Err(Error::Shape(format!("{file}: expected {} values, found {}", a + b + t, vals.len())));
        }
        Ok(Self {
            name: if name == "pretrained" { "pretrained" } else { "alternate" },
            header,
            image_w: vals[..a].to_vec(),
            image_b: vals[a..a + b].to_vec(),
            text: vals[a + b..].to_vec(),
            digest: hex::encode(Sha256::digest(&bytes)),
        })
    }

    /// Write a randomly initialised weight file matching the contract.
    pub fn write_random(name: &str, path: &Path, seed: u64) -> Result<()> {
        let (_, h) = adapter_contract(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = b"TTW1".to_vec();
        let head = serde_json::to_vec(&h)?;
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        for _ in 0..(4 * h.image_dim + h.vocab * h.text_dim) {
            let z: f32 = StandardNormal.sample(&mut rng);
            out.extend_from_slice(&(z * 0.1).to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Mean color of `f x f` blocks of a square image.
fn block_means(img: &Tensor<f32>, f: usize) -> Tensor<f32> {
    let (h, w) = (img.h / f, img.w / f);
    let mut out = Tensor::zeros(h, w, img.c);
    let s = 1.0 / (f * f) as f32;
    for u in 0..h * f {
        for v in 0..w * f {
            for ch in 0..img.c {
                out.data[((u / f) * w + v / f) * img.c + ch] += img.at(u, v, ch) * s;
            }
        }
    }
    out
}

impl SemanticBackbone for AdapterBackbone {
    fn name(&self) -> &str {
        self.name
    }

    fn goal_dim(&self) -> usize {
        self.header.text_dim
    }

    fn encode_image(&self, rgb: &Tensor<f32>) -> Result<ImageFeatures> {
        check_rgb(rgb)?;
        let n = self.header.input;
        let mut resized = Tensor::zeros(n, n, 3);
        for u in 0..n {
            for v in 0..n {
                for ch in 0..3 {
                    resized.data[(u * n + v) * 3 + ch] = rgb.at(u * rgb.h / n, v * rgb.w / n, ch);
                }
            }
        }
        let patch = block_means(&resized, self.header.patch);
        let d = self.header.image_dim;
        let mut bottleneck = Tensor::zeros(patch.h, patch.w, d);
        for p in 0..patch.h * patch.w {
            for j in 0..d {
                let mut s = self.image_b[j];
                for ch in 0..3 {
                    s += patch.data[p * 3 + ch] * self.image_w[ch * d + j];
                }
                bottleneck.data[p * d + j] = s.max(0.0);
            }
        }
        let pyramid = [4, 8, 16].iter().map(|&f| block_means(&resized, f)).collect();
        Ok(ImageFeatures { bottleneck, pyramid })
    }

    fn encode_text(&self, instruction: &str) -> Result<Vec<f32>> {
        let toks = tokens(instruction);
        if toks.is_empty() {
            return Err(Error::Domain("instruction is empty".into()));
        }
        let d = self.header.text_dim;
        let mut g = vec![0.0f32; d];
        for t in &toks {
            let row = (token_seed(t, 0) % self.header.vocab as u64) as usize;
            for (x, y) in g.iter_mut().zip(&self.text[row * d..(row + 1) * d]) {
                *x += y / toks.len() as f32;
            }
        }
        Ok(g)
    }

    fn checksum(&self) -> String {
        self.digest.clone()
    }
}

/// Registered backbone by name: `toy`, `pretrained` or `alternate`.
pub fn backbone(name: &str) -> Result<Arc<dyn SemanticBackbone>> {
    match name {
        "toy" => Ok(Arc::new(ToyBackbone::new())),
        "pretrained" | "alternate" => Ok(Arc::new(AdapterBackbone::from_env(name)?)),
        other => Err(Error::Config(format!(
            "unknown backbone {other}; expected toy, pretrained or alternate"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{observe, sample_instance, Split, TaskName};
    use crate::geometry::WorkspaceFrame;

    fn rgb_of(obs: &crate::geometry::Observation) -> Tensor<f32> {
        Tensor::from_vec(obs.frame.height, obs.frame.width, 3, obs.color.clone()).unwrap()
    }

    #[test]
    fn toy_is_deterministic_and_shaped() {
        let inst = sample_instance(TaskName::PutBlocksInBowls, Split::Seen, 0, &WorkspaceFrame::standard()).unwrap();
        let rgb = rgb_of(&observe(&inst.state, &inst.goal.frame));
        let b = ToyBackbone::new();
        let f1 = b.encode_image(&rgb).unwrap();
        let f2 = ToyBackbone::new().encode_image(&rgb).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.bottleneck.shape(), (8, 8, 64));
        let dims: Vec<_> = f1.pyramid.iter().map(|t| t.shape()).collect();
        assert_eq!(dims, [(64, 64, 16), (32, 32, 32), (16, 16, 64)]);
    }

    #[test]
    fn toy_features_see_color() {
        let inst = sample_instance(TaskName::PutBlocksInBowls, Split::Seen, 0, &WorkspaceFrame::standard()).unwrap();
        let mut recolored = inst.state.clone();
        let o = recolored.objects.iter_mut().find(|o| o.graspable).unwrap();
        o.rgb = [1.0 - o.rgb[0], 1.0 - o.rgb[1], o.rgb[2]];
        let b = ToyBackbone::new();
        let a = b.encode_image(&rgb_of(&observe(&inst.state, &inst.goal.frame))).unwrap();
        let c = b.encode_image(&rgb_of(&observe(&recolored, &inst.goal.frame))).unwrap();
        let dist: f32 = a.bottleneck.data.iter().zip(&c.bottleneck.data).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn toy_text_bag_of_tokens() {
        let b = ToyBackbone::new();
        let a = b.encode_text("put the red block in the blue bowl").unwrap();
        assert_eq!(a.len(), TOY_GOAL_DIM);
        assert_eq!(a, b.encode_text("put the red block in the blue bowl").unwrap());
        assert_ne!(a, b.encode_text("put the pink block in the blue bowl").unwrap());
        // order-insensitive by design
        assert_eq!(a, b.encode_text("blue the red block in the put bowl").unwrap());
        assert!(matches!(b.encode_text("  "), Err(Error::Domain(_))));
    }

    #[test]
    fn missing_adapter_weights_name_the_file() {
        let d = tempfile::tempdir().unwrap();
        let err = AdapterBackbone::load("pretrained", &d.path().join("vl_adapter.ttw")).err().unwrap();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("vl_adapter.ttw"), "{msg}");
        assert!(matches!(backbone("resnet"), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_shape_contract() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("vl_adapter.ttw");
        AdapterBackbone::write_random("pretrained", &path, 1).unwrap();
        let a = AdapterBackbone::load("pretrained", &path).unwrap();
        let rgb = Tensor::from_vec(128, 128, 3, vec![0.5; 128 * 128 * 3]).unwrap();
        let f = a.encode_image(&rgb).unwrap();
        assert_eq!(f.bottleneck.shape(), (7, 7, 2048));
        let sides: Vec<_> = f.pyramid.iter().map(|t| t.h).collect();
        assert_eq!(sides, [56, 28, 14]);
        assert_eq!(a.encode_text("pack the red box").unwrap().len(), 1024);
        assert!(AdapterBackbone::load("alternate", &path).is_err());
    }
}
