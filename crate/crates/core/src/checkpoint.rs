//! Named-tensor checkpoint archive.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic "AVCK" | version | manifest_len | manifest (UTF-8 key=value lines)
//! num_params | num_buffers
//! per tensor: name_len | name | ndim | dims... | data (little-endian f32)
//! ```
//!
//! Values are stored as 32-bit floats; in-memory training stays in f64, so a
//! round trip quantizes parameters to f32 precision.

use crate::error::{Error, Result};
use crate::netbuilder::{ArchKind, InitSpec, NetworkInstance, SkeletonConfig};
use crate::nn::ParamStore;
use crate::triggergen::{GeneratorConfig, GeneratorInstance};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, value: &ArrayD<f64>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, value.ndim() as u32);
    for &d in value.shape() {
        put_u32(out, d as u32);
    }
    for &v in value.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (needed {n} more)",
                self.path, self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: tensor name not UTF-8", self.path)))?;
        let ndim = self.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = self.take(4 * count)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("{}: tensor {name}: {e}", self.path)))?;
        Ok((name, arr))
    }
}

fn encode(manifest: &BTreeMap<String, String>, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let manifest_text: String =
        manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, manifest_text.len() as u32);
    out.extend_from_slice(manifest_text.as_bytes());
    put_u32(&mut out, store.params().len() as u32);
    put_u32(&mut out, store.buffers().len() as u32);
    for t in store.params() {
        put_tensor(&mut out, &t.name, &t.value);
    }
    for t in store.buffers() {
        put_tensor(&mut out, &t.name, &t.value);
    }
    out
}

type Manifest = BTreeMap<String, String>;
type NamedTensors = Vec<(String, ArrayD<f64>)>;

fn decode(bytes: &[u8], path: &Path) -> Result<(Manifest, NamedTensors, usize)> {
    let mut r = Reader { bytes, at: 0, path: path.display().to_string() };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let manifest_len = r.u32()? as usize;
    let manifest_text = String::from_utf8(r.take(manifest_len)?.to_vec())
        .map_err(|_| Error::Checkpoint(format!("{}: manifest not UTF-8", path.display())))?;
    let mut manifest = BTreeMap::new();
    for line in manifest_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.insert(k.to_string(), v.to_string());
        }
    }
    let num_params = r.u32()? as usize;
    let num_buffers = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(num_params + num_buffers);
    for _ in 0..num_params + num_buffers {
        tensors.push(r.tensor()?);
    }
    Ok((manifest, tensors, num_params))
}

/// Overwrite a store's tensors from an archive; names and shapes must match
/// the freshly built instance exactly.
fn load_into(
    store: &mut ParamStore,
    tensors: &[(String, ArrayD<f64>)],
    num_params: usize,
    path: &Path,
) -> Result<()> {
    if store.params().len() != num_params || store.buffers().len() != tensors.len() - num_params {
        return Err(Error::Checkpoint(format!(
            "{}: tensor counts do not match the rebuilt model",
            path.display()
        )));
    }
    for (i, (name, value)) in tensors.iter().enumerate() {
        let slot = if i < num_params {
            store.param_mut(crate::nn::ParamId(i))
        } else {
            store.buffer_mut(crate::nn::BufId(i - num_params))
        };
        if &slot.name != name {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {i} named {name}, expected {}",
                path.display(),
                slot.name
            )));
        }
        if slot.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} has shape {:?}, expected {:?}",
                path.display(),
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value.clone();
    }
    Ok(())
}

fn manifest_field<'m>(manifest: &'m BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'m str> {
    manifest
        .get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing manifest key {key}", path.display())))
}

fn parse_field<T: std::str::FromStr>(
    manifest: &BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    manifest_field(manifest, key, path)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("{}: bad manifest value for {key}", path.display())))
}

fn skeleton_manifest(skel: &SkeletonConfig, manifest: &mut BTreeMap<String, String>) {
    manifest.insert("skeleton.stages".into(), skel.stages.to_string());
    manifest.insert("skeleton.cells_per_stage".into(), skel.cells_per_stage.to_string());
    manifest.insert("skeleton.base_width".into(), skel.base_width.to_string());
    manifest.insert("skeleton.input_h".into(), skel.input_shape.0.to_string());
    manifest.insert("skeleton.input_w".into(), skel.input_shape.1.to_string());
    manifest.insert("skeleton.input_c".into(), skel.input_shape.2.to_string());
    manifest.insert("skeleton.num_classes".into(), skel.num_classes.to_string());
}

fn skeleton_from_manifest(m: &BTreeMap<String, String>, path: &Path) -> Result<SkeletonConfig> {
    Ok(SkeletonConfig {
        stages: parse_field(m, "skeleton.stages", path)?,
        cells_per_stage: parse_field(m, "skeleton.cells_per_stage", path)?,
        base_width: parse_field(m, "skeleton.base_width", path)?,
        input_shape: (
            parse_field(m, "skeleton.input_h", path)?,
            parse_field(m, "skeleton.input_w", path)?,
            parse_field(m, "skeleton.input_c", path)?,
        ),
        num_classes: parse_field(m, "skeleton.num_classes", path)?,
    })
}

/// Write a model checkpoint.
pub fn save_network(path: &Path, net: &NetworkInstance) -> Result<()> {
    let mut manifest = BTreeMap::new();
    match net.kind() {
        ArchKind::Cell(arch) => {
            manifest.insert("kind".into(), "cell".into());
            manifest.insert("arch".into(), arch.to_string());
        }
        ArchKind::ResidualBaseline => {
            manifest.insert("kind".into(), "baseline".into());
        }
    }
    skeleton_manifest(net.skeleton(), &mut manifest);
    manifest.insert("init.seed".into(), net.init_spec().seed.to_string());
    manifest.insert("init.gain".into(), format!("{}", net.init_spec().gain));
    let bytes = encode(&manifest, net.store());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuild a model from its checkpoint.
pub fn load_network(path: &Path) -> Result<NetworkInstance> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (manifest, tensors, num_params) = decode(&bytes, path)?;
    let skel = skeleton_from_manifest(&manifest, path)?;
    let init = InitSpec {
        family: crate::netbuilder::InitFamily::FanInGaussian,
        gain: parse_field(&manifest, "init.gain", path)?,
        seed: parse_field(&manifest, "init.seed", path)?,
    };
    let mut net = match manifest_field(&manifest, "kind", path)? {
        "cell" => {
            let arch = crate::archspace::ArchSpec::parse(manifest_field(&manifest, "arch", path)?)?;
            NetworkInstance::build_network(arch, skel, init)?
        }
        "baseline" => NetworkInstance::build_residual_baseline(skel, init)?,
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unknown model kind {other}",
                path.display()
            )))
        }
    };
    load_into(net.store_mut(), &tensors, num_params, path)?;
    Ok(net)
}

/// Write a generator checkpoint; the two networks land in one archive with
/// `mask.` / `mark.` name prefixes and a manifest field naming them.
pub fn save_generator(path: &Path, gen: &GeneratorInstance) -> Result<()> {
    let cfg = gen.config();
    let mut manifest = BTreeMap::new();
    manifest.insert("kind".into(), "generator".into());
    manifest.insert("networks".into(), "mask,mark".into());
    manifest.insert(
        "generator.widths".into(),
        cfg.encoder_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.insert("generator.middle".into(), cfg.middle_width.to_string());
    manifest.insert("generator.input_h".into(), cfg.input_shape.0.to_string());
    manifest.insert("generator.input_w".into(), cfg.input_shape.1.to_string());
    manifest.insert("generator.pooling".into(), cfg.pooling_stages.to_string());
    manifest.insert("init.seed".into(), gen.init_spec().seed.to_string());
    manifest.insert("init.gain".into(), format!("{}", gen.init_spec().gain));
    manifest.insert("frozen_mask".into(), gen.frozen_mask.to_string());

    // merge both stores under one namespace
    let mut merged = ParamStore::new();
    for t in gen.mask_store().params() {
        merged.add_param(format!("mask.{}", t.name), t.value.clone());
    }
    for t in gen.mark_store().params() {
        merged.add_param(format!("mark.{}", t.name), t.value.clone());
    }
    for t in gen.mask_store().buffers() {
        merged.add_buffer(format!("mask.{}", t.name), t.value.clone());
    }
    for t in gen.mark_store().buffers() {
        merged.add_buffer(format!("mark.{}", t.name), t.value.clone());
    }
    let bytes = encode(&manifest, &merged);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuild a generator from its checkpoint.
pub fn load_generator(path: &Path) -> Result<GeneratorInstance> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (manifest, tensors, num_params) = decode(&bytes, path)?;
    if manifest_field(&manifest, "kind", path)? != "generator" {
        return Err(Error::Checkpoint(format!(
            "{}: not a generator checkpoint",
            path.display()
        )));
    }
    let widths: Vec<usize> = manifest_field(&manifest, "generator.widths", path)?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("{}: bad width", path.display()))))
        .collect::<Result<_>>()?;
    let cfg = GeneratorConfig {
        input_shape: (
            parse_field(&manifest, "generator.input_h", path)?,
            parse_field(&manifest, "generator.input_w", path)?,
            3,
        ),
        encoder_widths: widths,
        middle_width: parse_field(&manifest, "generator.middle", path)?,
        pooling_stages: parse_field(&manifest, "generator.pooling", path)?,
    };
    let init = InitSpec {
        family: crate::netbuilder::InitFamily::FanInGaussian,
        gain: parse_field(&manifest, "init.gain", path)?,
        seed: parse_field(&manifest, "init.seed", path)?,
    };
    let mut gen = GeneratorInstance::build(cfg, init)?;
    gen.frozen_mask = parse_field(&manifest, "frozen_mask", path)?;

    // split the namespace back onto the two stores
    let strip = |name: &str, prefix: &str| -> Option<String> {
        name.strip_prefix(prefix).map(|s| s.to_string())
    };
    let mut mask_params = Vec::new();
    let mut mark_params = Vec::new();
    let mut mask_bufs = Vec::new();
    let mut mark_bufs = Vec::new();
    for (i, (name, value)) in tensors.iter().enumerate() {
        let is_param = i < num_params;
        if let Some(n) = strip(name, "mask.") {
            if is_param {
                mask_params.push((n, value.clone()));
            } else {
                mask_bufs.push((n, value.clone()));
            }
        } else if let Some(n) = strip(name, "mark.") {
            if is_param {
                mark_params.push((n, value.clone()));
            } else {
                mark_bufs.push((n, value.clone()));
            }
        } else {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} belongs to neither network",
                path.display()
            )));
        }
    }
    let assign = |store: &mut ParamStore,
                  params: Vec<(String, ArrayD<f64>)>,
                  bufs: Vec<(String, ArrayD<f64>)>|
     -> Result<()> {
        let mut merged = params;
        let split = merged.len();
        merged.extend(bufs);
        load_into(store, &merged, split, path)
    };
    assign(gen.mask_store_mut(), mask_params, mask_bufs)?;
    assign(gen.mark_store_mut(), mark_params, mark_bufs)?;
    Ok(gen)
}
