//! Depth-image autoencoder: dataset collection, training, frozen encoder.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use deskpick_nn::checkpoint::{self, DType, NamedTensor};
use deskpick_nn::{Activation, Adam, ConvGeom, LayerSpec, Network, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSpec;
use crate::env::{Episode, EpisodeConfig, RewardMode, SimSettings, Task};
use crate::sim::{DepthImage, PixelLabel, IMAGE_SIZE};
use crate::{Error, Result};

pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Linear depth normalization; filtered pixels take `background`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNorm {
    pub min: f64,
    pub max: f64,
    pub background: f64,
}

impl Default for DepthNorm {
    /// `max` is the plane depth seen from the highest spawn pose (16 cm + camera offset).
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 0.21,
            background: 1.0,
        }
    }
}

impl DepthNorm {
    pub fn apply(&self, depth: f64) -> f64 {
        ((depth - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

/// Keeps object pixels only, normalized to `[0, 1]`.
pub fn filter_depth(img: &DepthImage, norm: &DepthNorm) -> Vec<f64> {
    img.depth
        .iter()
        .zip(&img.labels)
        .zip(&img.invalid)
        .map(|((&d, l), &bad)| match l {
            PixelLabel::Object(_) if !bad => norm.apply(d),
            _ => norm.background,
        })
        .collect()
}

/// Pixelwise `|original − reconstruction|`.
pub fn error_image(original: &[f64], reconstruction: &[f64]) -> Vec<f64> {
    original
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b).abs())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub channels: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            channels: [8, 16, 32],
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl EncoderConfig {
    fn geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Spatial sizes after each conv layer.
    fn sizes(&self) -> Result<[usize; 4]> {
        let g = self.geom();
        let mut s = [IMAGE_SIZE; 4];
        for i in 0..3 {
            s[i + 1] = g
                .conv_out(s[i])
                .ok_or_else(|| Error::Config(format!("encoder conv {i} does not fit a {}px input", s[i])))?;
        }
        Ok(s)
    }

    pub fn encoder_specs(&self) -> Result<Vec<LayerSpec>> {
        let s = self.sizes()?;
        let c = self.channels;
        let g = self.geom();
        let act = Activation::LeakyRelu;
        Ok(vec![
            LayerSpec::conv(1, c[0], g, act),
            LayerSpec::conv(c[0], c[1], g, act),
            LayerSpec::conv(c[1], c[2], g, act),
            LayerSpec::dense(c[2] * s[3] * s[3], self.latent_dim, Activation::Identity),
        ])
    }

    pub fn decoder_specs(&self) -> Result<Vec<LayerSpec>> {
        let s = self.sizes()?;
        let c = self.channels;
        let g = self.geom();
        let act = Activation::LeakyRelu;
        for (i, pair) in s.windows(2).enumerate() {
            if g.transpose_out(pair[1]) != Some(pair[0]) {
                return Err(Error::Config(format!(
                    "decoder layer {i} cannot mirror {} -> {}",
                    pair[1], pair[0]
                )));
            }
        }
        Ok(vec![
            LayerSpec::dense(self.latent_dim, c[2] * s[3] * s[3], act),
            LayerSpec::reshape(&[c[2], s[3], s[3]]),
            LayerSpec::conv_transpose(c[2], c[1], g, act),
            LayerSpec::conv_transpose(c[1], c[0], g, act),
            LayerSpec::conv_transpose(c[0], 1, g, Activation::Identity),
        ])
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub encoder: Network,
    pub decoder: Network,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Network::build("encoder", &[1, IMAGE_SIZE, IMAGE_SIZE], &config.encoder_specs()?, &mut store, rng)?;
        let decoder = Network::build("decoder", &[config.latent_dim], &config.decoder_specs()?, &mut store, rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        let z = self.encoder.infer(&self.store, batch)?;
        Ok(self.decoder.infer(&self.store, &z)?)
    }

    /// Mean squared reconstruction error per pixel over `images`.
    pub fn loss(&self, data: &ImageDataset, indices: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in indices.chunks(128) {
            let x = data.batch(chunk);
            let y = self.reconstruct(&x)?;
            total += x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total / (indices.len() * PIXELS) as f64)
    }

    /// Freezes the encoder half, with latent statistics taken over `indices`.
    pub fn freeze(&self, data: &ImageDataset, indices: &[usize]) -> Result<FrozenEncoder> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::build(
            "encoder",
            &[1, IMAGE_SIZE, IMAGE_SIZE],
            &self.config.encoder_specs()?,
            &mut store,
            &mut rng,
        )?;
        store.copy_values_from(&self.store)?;
        let d = self.config.latent_dim;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for chunk in indices.chunks(128) {
            let z = net.infer(&store, &data.batch(chunk))?;
            for row in z.data().chunks(d) {
                for k in 0..d {
                    sum[k] += row[k];
                    sq[k] += row[k] * row[k];
                }
            }
        }
        let n = indices.len().max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(FrozenEncoder {
            config: self.config.clone(),
            norm: data.norm,
            net,
            store,
            latent_mean: mean,
            latent_std: std,
        })
    }
}

/// Filtered depth images stored as `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub norm: DepthNorm,
    pub pixels: Vec<f32>,
}

const DATASET_MAGIC: &[u8; 4] = b"DPDS";
const DATASET_VERSION: u32 = 1;

impl ImageDataset {
    pub fn new(norm: DepthNorm) -> Self {
        Self {
            norm,
            pixels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / PIXELS
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn push(&mut self, image: &[f64]) {
        assert_eq!(image.len(), PIXELS);
        self.pixels.extend(image.iter().map(|&p| p as f32));
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        self.pixels[i * PIXELS..(i + 1) * PIXELS]
            .iter()
            .map(|&p| p as f64)
            .collect()
    }

    /// `[n, 1, 64, 64]` batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend(self.pixels[i * PIXELS..(i + 1) * PIXELS].iter().map(|&p| p as f64));
        }
        Tensor::new(vec![indices.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data)
    }

    /// Seeded 90/10 train/held-out split.
    pub fn split(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = (self.len() / 10).max(usize::from(self.len() > 1));
        let train = idx.split_off(held);
        (train, idx)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(IMAGE_SIZE as u32).to_le_bytes())?;
        w.write_all(&(IMAGE_SIZE as u32).to_le_bytes())?;
        for v in [self.norm.min, self.norm.max, self.norm.background] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in &self.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if &b4 != DATASET_MAGIC {
            return Err(Error::Format("not an image dataset".into()));
        }
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut dims = [0u32; 2];
        for d in &mut dims {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4);
        }
        if dims != [IMAGE_SIZE as u32; 2] {
            return Err(Error::Format(format!("dataset images are {dims:?}, expected 64x64")));
        }
        let mut norm = [0.0; 3];
        for v in &mut norm {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let mut raw = vec![0u8; count * PIXELS * 4];
        r.read_exact(&mut raw)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            norm: DepthNorm {
                min: norm[0],
                max: norm[1],
                background: norm[2],
            },
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Runs uniform-random simplified-task episodes, recording every view.
///
/// Each episode draws its workspace from a uniformly random curriculum step.
pub fn collect_dataset(
    n_images: usize,
    seed: u64,
    settings: &SimSettings,
    curriculum: &CurriculumSpec,
    norm: DepthNorm,
) -> Result<ImageDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ImageDataset::new(norm);
    while data.len() < n_images {
        let lambda: f64 = rng.random_range(0.0..=1.0);
        let ws = curriculum.params_at(lambda)?;
        let cfg = EpisodeConfig::new(ws, RewardMode::Sparse, Task::Simplified);
        let mut ep = Episode::new(cfg, *settings, rng.random());
        loop {
            data.push(&filter_depth(&settings.camera.render(&ep.scene), &norm));
            if data.len() >= n_images || ep.done {
                break;
            }
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            ep.step(&a)?;
        }
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr: 2e-4,
            batch: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

/// Adam on the per-pixel mean squared reconstruction error.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    data: &ImageDataset,
    train: &[usize],
    heldout: &[usize],
    cfg: &AeTrainConfig,
) -> Result<AeReport> {
    if train.is_empty() {
        return Err(Error::Config("autoencoder training set is empty".into()));
    }
    let adam = Adam::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = |ae: &Autoencoder| -> Result<f64> {
        ae.loss(data, if heldout.is_empty() { train } else { heldout })
    };
    let heldout_initial = eval(ae)?;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let x = tape.constant(data.batch(chunk));
            let z = ae.encoder.forward(&tape, &ae.store, x)?;
            let y = ae.decoder.forward(&tape, &ae.store, z)?;
            let loss = tape.mean(tape.square(tape.sub(y, x)));
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Diverged(format!("autoencoder loss {l} at epoch {epoch}")));
            }
            ae.store.zero_grad();
            tape.backward_into(loss, &mut ae.store)?;
            adam.step_all(&mut ae.store)?;
            sum += l * chunk.len() as f64;
        }
        epoch_loss.push(sum / order.len() as f64);
    }
    Ok(AeReport {
        epoch_loss,
        heldout_initial,
        heldout_final: eval(ae)?,
    })
}

/// Encoder weights plus the affine latent standardization used for observations.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub config: EncoderConfig,
    pub norm: DepthNorm,
    net: Network,
    store: ParamStore,
    latent_mean: Vec<f64>,
    latent_std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    format: u32,
    config: EncoderConfig,
    norm: DepthNorm,
}

impl FrozenEncoder {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Raw encoder output for a `[n, 1, 64, 64]` batch.
    pub fn raw_batch(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.net.infer(&self.store, batch)?)
    }

    /// Standardized latent of one filtered image.
    pub fn encode(&self, image: &[f64]) -> Vec<f64> {
        let x = Tensor::new(vec![1, 1, IMAGE_SIZE, IMAGE_SIZE], image.to_vec());
        let z = self.net.infer(&self.store, &x).expect("image shape is fixed");
        z.data()
            .iter()
            .zip(self.latent_mean.iter().zip(&self.latent_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn try_encode(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != PIXELS {
            return Err(Error::Format(format!(
                "encoder expects {PIXELS} pixels, got {}",
                image.len()
            )));
        }
        Ok(self.encode(image))
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (weights).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let manifest = EncoderManifest {
            format: 1,
            config: self.config.clone(),
            norm: self.norm,
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut entries = self.store.to_entries(DType::F64);
        let d = self.latent_dim();
        for (name, v) in [("latent.mean", &self.latent_mean), ("latent.std", &self.latent_std)] {
            entries.push(NamedTensor {
                name: name.into(),
                dtype: DType::F64,
                tensor: Tensor::new(vec![d], v.clone()),
            });
        }
        let mut w = BufWriter::new(File::create(stem.with_extension("bin"))?);
        checkpoint::write_tensors(&mut w, &entries)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: EncoderManifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        if manifest.format != 1 {
            return Err(Error::Format(format!("unsupported encoder manifest {}", manifest.format)));
        }
        let entries = checkpoint::read_tensors(BufReader::new(File::open(stem.with_extension("bin"))?))?;
        let mut store = ParamStore::new();
        let net = Network::build(
            "encoder",
            &[1, IMAGE_SIZE, IMAGE_SIZE],
            &manifest.config.encoder_specs()?,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        store.load_entries(&entries)?;
        let find = |name: &str| -> Result<Vec<f64>> {
            entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.tensor.data().to_vec())
                .ok_or_else(|| Error::Format(format!("encoder checkpoint lacks {name}")))
        };
        Ok(Self {
            latent_mean: find("latent.mean")?,
            latent_std: find("latent.std")?,
            config: manifest.config,
            norm: manifest.norm,
            net,
            store,
        })
    }

    /// SHA-256 over the weight file contents as written by [`FrozenEncoder::save`].
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.store.save(&mut buf, DType::F64).expect("in-memory write");
        for v in self.latent_mean.iter().chain(&self.latent_std) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        hex::encode(Sha256::digest(&buf))
    }

    /// An untrained encoder with identity latent statistics, for tests and smoke runs.
    pub fn untrained(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(
            "encoder",
            &[1, IMAGE_SIZE, IMAGE_SIZE],
            &config.encoder_specs()?,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        let d = config.latent_dim;
        Ok(Self {
            config,
            norm: DepthNorm::default(),
            net,
            store,
            latent_mean: vec![0.0; d],
            latent_std: vec![1.0; d],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Footprint, RigidObject, Scene};

    #[test]
    fn filter_keeps_objects_only() {
        let mut s = Scene::empty(0.2, 0.05);
        s.gripper.width = 0.0;
        s.objects.push(RigidObject {
            id: 0,
            footprint: Footprint::Disc { radius: 0.01 },
            height: 0.02,
            x: 0.0,
            y: 0.02,
            z: 0.0,
            yaw: 0.0,
            attached: false,
        });
        let img = crate::sim::Camera::default().render(&s);
        let f = filter_depth(&img, &DepthNorm::default());
        for (k, l) in img.labels.iter().enumerate() {
            match l {
                PixelLabel::Object(_) => assert!((f[k] - 0.08 / 0.21).abs() < 1e-12),
                _ => assert_eq!(f[k], 1.0),
            }
        }
        assert!(f.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let settings = SimSettings::default();
        let spec = CurriculumSpec::default();
        let a = collect_dataset(7, 3, &settings, &spec, DepthNorm::default()).unwrap();
        let b = collect_dataset(7, 3, &settings, &spec, DepthNorm::default()).unwrap();
        assert_eq!(a.len(), 7);
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write(&mut ba).unwrap();
        b.write(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(ImageDataset::read(ba.as_slice()).unwrap(), a);
        let one = collect_dataset(1, 3, &settings, &spec, DepthNorm::default()).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn encoder_shapes() {
        let cfg = EncoderConfig::default();
        let ae = Autoencoder::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ae.encoder.output_shape(), &[32]);
        assert_eq!(ae.decoder.output_shape(), &[1, 64, 64]);
        let enc = FrozenEncoder::untrained(cfg, 0).unwrap();
        let img = vec![1.0; PIXELS];
        assert_eq!(enc.encode(&img).len(), 32);
        assert_eq!(enc.encode(&img), enc.encode(&img));
        assert!(enc.try_encode(&img[..10]).is_err());
    }

    #[test]
    fn zero_epochs_leave_weights() {
        let mut ae = Autoencoder::new(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut data = ImageDataset::new(DepthNorm::default());
        data.push(&vec![1.0; PIXELS]);
        let before = ae.store.flat_values(&ae.encoder.param_ids());
        let cfg = AeTrainConfig { epochs: 0, ..Default::default() };
        let r = train_autoencoder(&mut ae, &data, &[0], &[], &cfg).unwrap();
        assert!(r.epoch_loss.is_empty());
        assert_eq!(r.heldout_initial, r.heldout_final);
        assert_eq!(before, ae.store.flat_values(&ae.encoder.param_ids()));
    }

    #[test]
    fn save_load_encoder() {
        let enc = FrozenEncoder::untrained(EncoderConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("enc");
        enc.save(&stem).unwrap();
        let back = FrozenEncoder::load(&stem).unwrap();
        assert_eq!(enc.fingerprint(), back.fingerprint());
        let img: Vec<f64> = (0..PIXELS).map(|i| (i % 7) as f64 / 7.0).collect();
        assert_eq!(enc.encode(&img), back.encode(&img));
    }
}
