//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic  b"PDCVITCK"
//! u32    format version (1)
//! u64    config length, then that many bytes of key=value text
//! [u8;32] shuffle/dropout rng seed, u128 rng word position
//! u64    adam step count
//! u64    tensor count
//! per tensor: u32 name length, name bytes, u32 rank, u64 dims…, f64 values…
//! ```
//! Tensor values are raw f64 bits, so a load reproduces parameters exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use pdcvit_core::adam::{Adam, AdamConfig};
use pdcvit_core::model::{ModelConfig, PdcVitModel};
use pdcvit_core::pdc::Variant;
use pdcvit_core::vit::VitConfig;
use pdcvit_core::Tensor;

use crate::config::{ConfigMap, ConfigWriter};
use crate::error::{Error, Result};
use crate::train::{TrainConfig, VitPreset};

const MAGIC: &[u8; 8] = b"PDCVITCK";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub model: PdcVitModel,
    pub classes: Vec<String>,
    pub train: TrainConfig,
    pub adam: Adam,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn config_text(ckpt: &Checkpoint) -> String {
    let mc = &ckpt.model.config;
    let vc = &mc.vit;
    let tc = &ckpt.train;
    let mut w = ConfigWriter::default();
    w.set("variant", mc.variant.name());
    w.set("image_size", mc.image_size);
    w.set("branch_channels", mc.branch_channels);
    w.set("classes", ckpt.classes.join(","));
    w.set("patch_size", vc.patch_size);
    w.set("dim", vc.dim);
    w.set("depth", vc.depth);
    w.set("heads", vc.heads);
    w.set("mlp_dim", vc.mlp_dim);
    w.set("dropout", vc.dropout);
    w.set("emb_dropout", vc.emb_dropout);
    w.set("preset", tc.preset.name());
    w.set("lr", tc.lr);
    w.set("batch_size", tc.batch_size);
    w.set("epochs", tc.epochs);
    w.set("seed", tc.seed);
    w.set("crop", tc.crop);
    w.set("val_fraction", tc.val_fraction);
    w.set("beta1", ckpt.adam.config.beta1);
    w.set("beta2", ckpt.adam.config.beta2);
    w.set("adam_eps", ckpt.adam.config.eps);
    w.finish()
}

struct ParsedConfig {
    model: ModelConfig,
    classes: Vec<String>,
    train: TrainConfig,
    adam: AdamConfig,
}

fn parse_config(text: &str) -> Result<ParsedConfig> {
    let mut cfg = ConfigMap::parse(text)?;
    let need = |o: Option<String>, key: &str| {
        o.ok_or_else(|| Error::Checkpoint(format!("config missing key '{key}'")))
    };
    let variant_name = need(cfg.take_str("variant"), "variant")?;
    let variant = Variant::parse(&variant_name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant '{variant_name}'")))?;
    let classes: Vec<String> = need(cfg.take_str("classes"), "classes")?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let vit = VitConfig {
        patch_size: req(&mut cfg, "patch_size")?,
        dim: req(&mut cfg, "dim")?,
        depth: req(&mut cfg, "depth")?,
        heads: req(&mut cfg, "heads")?,
        mlp_dim: req(&mut cfg, "mlp_dim")?,
        dropout: req(&mut cfg, "dropout")?,
        emb_dropout: req(&mut cfg, "emb_dropout")?,
        num_classes: classes.len(),
    };
    let model = ModelConfig::new(variant, req(&mut cfg, "image_size")?, req(&mut cfg, "branch_channels")?, vit);
    let preset_name = need(cfg.take_str("preset"), "preset")?;
    let train = TrainConfig {
        lr: req(&mut cfg, "lr")?,
        batch_size: req(&mut cfg, "batch_size")?,
        epochs: req(&mut cfg, "epochs")?,
        seed: req(&mut cfg, "seed")?,
        variant,
        preset: VitPreset::parse(&preset_name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown preset '{preset_name}'")))?,
        branch_channels: model.branch_channels,
        crop: req(&mut cfg, "crop")?,
        val_fraction: req(&mut cfg, "val_fraction")?,
        stop_at_test_accuracy: None,
    };
    let adam = AdamConfig {
        lr: train.lr,
        beta1: req(&mut cfg, "beta1")?,
        beta2: req(&mut cfg, "beta2")?,
        eps: req(&mut cfg, "adam_eps")?,
    };
    cfg.ensure_consumed()
        .map_err(|e| Error::Checkpoint(format!("unexpected checkpoint config: {e}")))?;
    Ok(ParsedConfig { model, classes, train, adam })
}

fn req<T: std::str::FromStr>(cfg: &mut ConfigMap, key: &str) -> Result<T> {
    cfg.take_parse::<T>(key)?
        .ok_or_else(|| Error::Checkpoint(format!("config missing key '{key}'")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = config_text(self);
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(config.as_bytes())?;
        w.write_all(&self.rng_seed)?;
        w.write_all(&self.rng_word_pos.to_le_bytes())?;
        w.write_all(&self.adam.step_count().to_le_bytes())?;

        let named = self.model.named_params();
        let (m, v) = self.adam.moments();
        let n_tensors = named.len() * 3;
        w.write_all(&(n_tensors as u64).to_le_bytes())?;
        for (i, (name, tensor)) in named.iter().enumerate() {
            write_tensor(&mut w, name, tensor.shape(), tensor.data())?;
            write_tensor(&mut w, &format!("adam.m.{name}"), tensor.shape(), &m[i])?;
            write_tensor(&mut w, &format!("adam.v.{name}"), tensor.shape(), &v[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_len = read_u64(&mut r)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)?;
        let config = String::from_utf8(config_bytes)
            .map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let parsed = parse_config(&config)?;

        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let mut pos_bytes = [0u8; 16];
        r.read_exact(&mut pos_bytes)?;
        let rng_word_pos = u128::from_le_bytes(pos_bytes);
        let adam_step = read_u64(&mut r)?;

        let n_tensors = read_u64(&mut r)? as usize;
        let mut records: std::collections::BTreeMap<String, Tensor> = Default::default();
        for _ in 0..n_tensors {
            let (name, tensor) = read_tensor(&mut r)?;
            records.insert(name, tensor);
        }

        // Rebuild the model deterministically and overwrite every parameter.
        let mut model = PdcVitModel::init(parsed.model, parsed.train.seed)?;
        let mut m_state = Vec::new();
        let mut v_state = Vec::new();
        for (name, tensor) in model.named_params_mut() {
            let stored = records
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if stored.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': shape {:?} vs expected {:?}",
                    stored.shape(),
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(stored.data());
            let m = records
                .remove(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor 'adam.m.{name}'")))?;
            let v = records
                .remove(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor 'adam.v.{name}'")))?;
            m_state.push(m.data().to_vec());
            v_state.push(v.data().to_vec());
        }
        if !records.is_empty() {
            let extra: Vec<String> = records.keys().cloned().collect();
            return Err(Error::Checkpoint(format!("unexpected tensors: {}", extra.join(", "))));
        }
        let adam = Adam::from_state(parsed.adam, adam_step, m_state, v_state);
        Ok(Checkpoint {
            model,
            classes: parsed.classes,
            train: parsed.train,
            adam,
            rng_seed,
            rng_word_pos,
        })
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for d in shape {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0f64; numel];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    let tensor = Tensor::from_vec(&shape, data)
        .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
    Ok((name, tensor))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_checkpoint() -> Checkpoint {
        let train = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 11,
            preset: VitPreset::Desk,
            ..TrainConfig::default()
        };
        let classes: Vec<String> = (0..4).map(|i| format!("cam{i:02}")).collect();
        let model_cfg = train.model_config(16, classes.len()).unwrap();
        let model = PdcVitModel::init(model_cfg, train.seed).unwrap();
        let params = model.named_params();
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| *t).collect();
        let adam = Adam::new(AdamConfig::with_lr(train.lr), &refs);
        Checkpoint {
            model,
            classes,
            train,
            adam,
            rng_seed: [7u8; 32],
            rng_word_pos: 99,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = small_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.classes, ckpt.classes);
        assert_eq!(back.rng_seed, ckpt.rng_seed);
        assert_eq!(back.rng_word_pos, 99);
        assert_eq!(back.adam.step_count(), 0);
        let a = ckpt.model.named_params();
        let b = back.model.named_params();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape(), "{na}");
            // Bit-exact round trip.
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na}");
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxx").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
