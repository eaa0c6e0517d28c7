//! `NBM1` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NBM1"  version:u32
//! header_len:u32  header:utf8          (key = value lines: spec and position)
//! n_arrays:u32
//! repeated: name_len:u32 name:utf8 dtype:u8 ndim:u32 dims:u64*ndim payload
//! fnv1a64 of every preceding byte:u64
//! ```
//!
//! Arrays are the parameters of the three networks (`mu.0.weight`, ...)
//! followed by the Adam moments (`adam.m.mu.0.weight`, ...).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nbm::{DType, GradAccum, Mlp, MlpSpec, ModelGrads, NbmModel, NbmSpec, Network, OptState, Real, Tensor};

use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"NBM1";
pub const VERSION: u32 = 1;

/// Model plus everything needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: NbmModel<T>,
    pub opt: OptState<T>,
    pub step: u64,
    pub epoch: u64,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn spec(&self) -> &NbmSpec {
        match self {
            AnyCheckpoint::F32(c) => c.model.spec(),
            AnyCheckpoint::F64(c) => c.model.spec(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyCheckpoint::F32(_) => DType::F32,
            AnyCheckpoint::F64(_) => DType::F64,
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn param_name(net: Network, i: usize) -> String {
    let kind = if i % 2 == 0 { "weight" } else { "bias" };
    format!("{}.{}.{kind}", net.key(), i / 2)
}

fn header_text<T: Real>(c: &Checkpoint<T>) -> String {
    let s = c.model.spec();
    let mut h = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(h, "{k} = {v}");
    };
    kv("n_x", &s.n_x);
    kv("n_y", &s.n_y);
    kv("n_h", &s.n_h);
    kv("visible", &s.visible_kind);
    kv("tanh_bias", &s.tanh_bias);
    kv("scale_weights", &s.scale_weights);
    kv("mu", &s.mu_spec.layers_string());
    kv("logp", &s.logp_spec.layers_string());
    kv("w", &s.w_spec.layers_string());
    kv("dtype", &T::DTYPE.name());
    kv("step", &c.step);
    kv("epoch", &c.epoch);
    kv("adam_t", &c.opt.t);
    h
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Real>(c: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let header = header_text(c);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    let mut arrays: Vec<(String, &Tensor<T>)> = Vec::new();
    for net in Network::ALL {
        for (i, p) in c.model.net(net).params().iter().enumerate() {
            arrays.push((param_name(net, i), p));
        }
    }
    for (moment, grads) in [("m", &c.opt.m), ("v", &c.opt.v)] {
        for net in Network::ALL {
            for (i, p) in grads.get(net).slots().iter().enumerate() {
                arrays.push((format!("adam.{moment}.{}", param_name(net, i)), p));
            }
        }
    }
    put_u32(&mut out, arrays.len() as u32);
    for (name, t) in arrays {
        put_array(&mut out, &name, t);
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Writes through a temporary file so a crash never leaves half a checkpoint.
pub fn save<T: Real>(path: &Path, c: &Checkpoint<T>) -> Result<(), CliError> {
    let tmp = path.with_extension("nbm.tmp");
    fs::write(&tmp, encode(c))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AnyCheckpoint, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self) -> Result<&'a str, CliError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("string is not UTF-8"))
    }
}

struct RawArray<'a> {
    dtype: DType,
    shape: Vec<usize>,
    payload: &'a [u8],
}

pub fn decode(bytes: &[u8]) -> Result<AnyCheckpoint, CliError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("not an NBM1 checkpoint (bad magic)"));
    }
    if bytes.len() < 16 {
        return Err(bad("truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header = parse_header(r.utf8()?)?;
    let n = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..n {
        let name = r.utf8()?.to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| bad(format!("array {name}: unknown dtype {tag}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("huge array"))?;
        let payload = r.take(count.checked_mul(dtype.size()).ok_or_else(|| bad("huge array"))?)?;
        if arrays.insert(name.clone(), RawArray { dtype, shape, payload }).is_some() {
            return Err(bad(format!("duplicate array {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes before checksum"));
    }
    match header.dtype {
        DType::F32 => build::<f32>(&header, arrays).map(AnyCheckpoint::F32),
        DType::F64 => build::<f64>(&header, arrays).map(AnyCheckpoint::F64),
    }
}

struct Header {
    spec: NbmSpec,
    dtype: DType,
    step: u64,
    epoch: u64,
    adam_t: u64,
}

fn parse_header(text: &str) -> Result<Header, CliError> {
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`")));
    let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(format!("header `{k}` is not an integer")));
    let flag = |k: &str| get(k)?.parse::<bool>().map_err(|_| bad(format!("header `{k}` is not a bool")));
    let n_x = num("n_x")? as usize;
    let layers = |k: &str| MlpSpec::parse_layers(n_x, get(k)?).map_err(|e| bad(format!("header `{k}`: {e}")));
    let spec = NbmSpec {
        n_x,
        n_y: num("n_y")? as usize,
        n_h: num("n_h")? as usize,
        visible_kind: get("visible")?.parse().map_err(|e| bad(format!("{e}")))?,
        mu_spec: layers("mu")?,
        logp_spec: layers("logp")?,
        w_spec: layers("w")?,
        tanh_bias: flag("tanh_bias")?,
        scale_weights: flag("scale_weights")?,
    };
    spec.validate().map_err(|e| bad(format!("stored spec is invalid: {e}")))?;
    let dtype = match get("dtype")? {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(bad(format!("unknown dtype `{other}`"))),
    };
    Ok(Header {
        spec,
        dtype,
        step: num("step")?,
        epoch: num("epoch")?,
        adam_t: num("adam_t")?,
    })
}

fn take_tensor<T: Real>(
    arrays: &mut BTreeMap<String, RawArray<'_>>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<T>, CliError> {
    let a = arrays.remove(name).ok_or_else(|| bad(format!("missing array {name}")))?;
    if a.dtype != T::DTYPE {
        return Err(bad(format!("array {name} is {}, expected {}", a.dtype.name(), T::DTYPE.name())));
    }
    if a.shape != shape {
        return Err(bad(format!("array {name} has shape {:?}, expected {shape:?}", a.shape)));
    }
    let data = a.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data).map_err(|e| bad(e.to_string()))
}

fn build<T: Real>(h: &Header, mut arrays: BTreeMap<String, RawArray<'_>>) -> Result<Checkpoint<T>, CliError> {
    let mut nets = Vec::new();
    for net in Network::ALL {
        let spec = h.spec.net_spec(net).clone();
        let params = spec
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| take_tensor(&mut arrays, &param_name(net, i), s))
            .collect::<Result<Vec<_>, _>>()?;
        nets.push(Mlp::from_params(spec, params).map_err(|e| bad(e.to_string()))?);
    }
    let w = nets.pop().unwrap();
    let logp = nets.pop().unwrap();
    let mu = nets.pop().unwrap();
    let model = NbmModel::from_parts(h.spec.clone(), mu, logp, w).map_err(|e| bad(e.to_string()))?;
    let mut opt = OptState::new(&model);
    opt.t = h.adam_t;
    for (moment, grads) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        fill_moments(&mut arrays, moment, grads)?;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(bad(format!("unexpected array {extra}")));
    }
    Ok(Checkpoint {
        model,
        opt,
        step: h.step,
        epoch: h.epoch,
    })
}

fn fill_moments<T: Real>(
    arrays: &mut BTreeMap<String, RawArray<'_>>,
    moment: &str,
    grads: &mut ModelGrads<T>,
) -> Result<(), CliError> {
    for net in Network::ALL {
        let acc: &mut GradAccum<T> = grads.get_mut(net);
        for (i, slot) in acc.slots_mut().iter_mut().enumerate() {
            let shape = slot.shape().to_vec();
            *slot = take_tensor(arrays, &format!("adam.{moment}.{}", param_name(net, i)), &shape)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nbm::VisibleKind;

    fn sample() -> Checkpoint<f64> {
        let model = NbmModel::init(NbmSpec::standard(2, 3, 2, VisibleKind::Gaussian, 4), 7).unwrap();
        let mut opt = OptState::new(&model);
        opt.t = 5;
        for s in opt.m.get_mut(Network::Weights).slots_mut() {
            s.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.25);
        }
        Checkpoint {
            model,
            opt,
            step: 12,
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let AnyCheckpoint::F64(back) = decode(&encode(&c)).unwrap() else {
            panic!("wrong dtype");
        };
        assert_eq!(back.model.flatten(), c.model.flatten());
        assert_eq!(back.opt, c.opt);
        assert_eq!((back.step, back.epoch), (12, 3));
        assert_eq!(back.model.spec(), c.model.spec());
    }

    #[test]
    fn f32_round_trip() {
        let c = sample();
        let c32 = Checkpoint {
            model: c.model.cast::<f32>(),
            opt: OptState::new(&c.model.cast::<f32>()),
            step: 1,
            epoch: 0,
        };
        let AnyCheckpoint::F32(back) = decode(&encode(&c32)).unwrap() else {
            panic!("wrong dtype");
        };
        assert_eq!(back.model.flatten(), c32.model.flatten());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode(&flipped), Err(CliError::Checkpoint(m)) if m.contains("checksum")));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(CliError::Checkpoint(m)) if m.contains("magic")));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        let n = bytes.len() - 8;
        let sum = fnv1a64(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        let e = decode(&bytes).unwrap_err();
        assert!(e.to_string().contains("version"));
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
