//! Versioned binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "FCNZ" | version u16 | flags u16 (bit 0 quantized, bit 1 pruned)
//! config: seed u64 | n u32 | n × (filters u32, taps u32, activation u8, bias u8)
//! layers: n u32 | per layer: in_channels u32, taps u32, activation u8, bias u8, filters u32
//!         per filter: id u32, channels u32, channels × input u32, packed mask bits
//! raw payload:       per layer: weights f32 (filter → channel → tap), then biases f32
//! quantized payload: scope u8 | codebooks u32 | per codebook: len u32, len × f32
//!                    per layer: codebook u32 (u32::MAX = none)
//!                    index bytes u64 | one bit-packed stream of every layer's indices
//!                    per layer: biases f32
//! ```
//!
//! Weights are stored as `f32`; models built by this crate keep their
//! parameters on the `f32` grid, so loading reproduces them bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fcn::{Activation, ConvLayer, FcnConfig, FcnModel, Filter, LayerSpec};
use crate::kmeans::Codebook;
use crate::quantization::{QuantScope, QuantizedLayer, QuantizedModel};

pub const MAGIC: &[u8; 4] = b"FCNZ";
pub const FORMAT_VERSION: u16 = 1;
pub const FLAG_QUANTIZED: u16 = 1;
pub const FLAG_PRUNED: u16 = 2;
const NO_CODEBOOK: u32 = u32::MAX;

/// Appends values of arbitrary width (≤ 32 bits) least-significant bit first.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: u32, width: u32) -> Result<()> {
        if width > 32 || (width < 32 && u64::from(value) >> width != 0) {
            return Err(Error::Parameter(format!(
                "index {value} does not fit in {width} bits"
            )));
        }
        for b in 0..width {
            let byte = (self.bits / 8) as usize;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                self.bytes[byte] |= 1 << (self.bits % 8);
            }
            self.bits += 1;
        }
        Ok(())
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit: 0 }
    }

    pub fn read(&mut self, width: u32) -> Result<u32> {
        if width > 32 {
            return Err(Error::Parameter(format!("bit width {width} exceeds 32")));
        }
        if self.bit + u64::from(width) > self.bytes.len() as u64 * 8 {
            return Err(Error::Format("index stream truncated".into()));
        }
        let mut v = 0u32;
        for b in 0..width {
            let byte = self.bytes[(self.bit / 8) as usize];
            if (byte >> (self.bit % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            self.bit += 1;
        }
        Ok(v)
    }
}

/// Packs `indices` at `bit_width` bits each, LSB first, zero-padding the last byte.
pub fn pack_indices(indices: &[u32], bit_width: u32) -> Result<Vec<u8>> {
    let mut w = BitWriter::new();
    for &i in indices {
        w.push(i, bit_width)?;
    }
    Ok(w.into_bytes())
}

pub fn unpack_indices(bytes: &[u8], bit_width: u32, count: usize) -> Result<Vec<u32>> {
    let mut r = BitReader::new(bytes);
    (0..count).map(|_| r.read(bit_width)).collect()
}

/// Anything a model file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Raw(FcnModel),
    Quantized(QuantizedModel),
}

impl StoredModel {
    /// The model with any quantization expanded to full precision.
    pub fn to_model(&self) -> Result<FcnModel> {
        match self {
            StoredModel::Raw(m) => Ok(m.clone()),
            StoredModel::Quantized(q) => crate::quantization::dequantize(q),
        }
    }
}

fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}
fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    }
}

fn activation_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Tanh),
        1 => Ok(Activation::Identity),
        c => Err(Error::Format(format!("unknown activation code {c}"))),
    }
}

fn is_pruned(model: &FcnModel) -> bool {
    model.masked_channels() > 0
        || model.layers.iter().zip(&model.config.layers).any(|(l, spec)| {
            l.filters.len() != spec.filters
                || l.filters.iter().any(|f| f.inputs.len() != l.in_channels)
        })
}

fn write_structure(out: &mut Vec<u8>, model: &FcnModel, flags: u16) -> Result<()> {
    out.extend_from_slice(MAGIC);
    put_u16(out, FORMAT_VERSION);
    put_u16(out, flags);
    put_u64(out, model.config.seed);
    put_u32(out, model.config.layers.len());
    for s in &model.config.layers {
        put_u32(out, s.filters);
        put_u32(out, s.taps);
        put_u8(out, activation_code(s.activation));
        put_u8(out, u8::from(s.bias));
    }
    put_u32(out, model.layers.len());
    for l in &model.layers {
        put_u32(out, l.in_channels);
        put_u32(out, l.taps);
        put_u8(out, activation_code(l.activation));
        put_u8(out, u8::from(l.has_bias));
        put_u32(out, l.filters.len());
        for f in &l.filters {
            put_u32(out, f.id);
            put_u32(out, f.inputs.len());
            for &i in &f.inputs {
                put_u32(out, i);
            }
            let mask: Vec<u32> = f.active.iter().map(|&a| u32::from(a)).collect();
            out.extend(pack_indices(&mask, 1)?);
        }
    }
    Ok(())
}

fn write_biases(out: &mut Vec<u8>, l: &ConvLayer) {
    if l.has_bias {
        for f in &l.filters {
            put_f32(out, f.bias);
        }
    }
}

/// Serialises a full-precision model.
pub fn model_to_bytes(model: &FcnModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    let flags = if is_pruned(model) { FLAG_PRUNED } else { 0 };
    write_structure(&mut out, model, flags)?;
    for l in &model.layers {
        for f in &l.filters {
            for &w in &f.weights {
                put_f32(&mut out, w);
            }
        }
        write_biases(&mut out, l);
    }
    Ok(out)
}

/// Serialises a quantized model; the index stream is packed across layers
/// without per-layer padding.
pub fn quantized_to_bytes(q: &QuantizedModel) -> Result<Vec<u8>> {
    q.skeleton.validate()?;
    if q.layers.len() != q.skeleton.layers.len() {
        return Err(Error::Integrity("layer count differs from skeleton".into()));
    }
    let mut out = Vec::new();
    let mut flags = FLAG_QUANTIZED;
    if is_pruned(&q.skeleton) {
        flags |= FLAG_PRUNED;
    }
    write_structure(&mut out, &q.skeleton, flags)?;
    put_u8(
        &mut out,
        match q.scope {
            QuantScope::PerLayer => 0,
            QuantScope::Global => 1,
        },
    );
    put_u32(&mut out, q.codebooks.len());
    for cb in &q.codebooks {
        put_u32(&mut out, cb.len());
        for &c in cb.centroids() {
            put_f32(&mut out, c);
        }
    }
    let mut stream = BitWriter::new();
    for ql in &q.layers {
        match ql.codebook {
            Some(i) => {
                let cb = q.codebooks.get(i).ok_or_else(|| {
                    Error::Integrity(format!("codebook {i} does not exist"))
                })?;
                put_u32(&mut out, i);
                for &idx in &ql.indices {
                    if idx as usize >= cb.len() {
                        return Err(Error::Integrity(format!(
                            "index {idx} outside codebook of {}",
                            cb.len()
                        )));
                    }
                    stream.push(idx, cb.bit_width())?;
                }
            }
            None => {
                if !ql.indices.is_empty() {
                    return Err(Error::Integrity("indices without a codebook".into()));
                }
                out.extend_from_slice(&NO_CODEBOOK.to_le_bytes());
            }
        }
    }
    let bytes = stream.into_bytes();
    put_u64(&mut out, bytes.len() as u64);
    out.extend_from_slice(&bytes);
    for l in &q.skeleton.layers {
        write_biases(&mut out, l);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("invalid flag byte {b}"))),
        }
    }
    /// Length prefix, bounded by what the remaining bytes could describe.
    fn count(&mut self, min_bytes_each: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_bytes_each) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("implausible count {n}")));
        }
        Ok(n)
    }
}

/// Skeleton (all weights zero) plus the flags word.
fn read_structure(r: &mut Reader<'_>) -> Result<(FcnModel, u16)> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an FCNZ model file".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let flags = r.u16()?;
    if flags & !(FLAG_QUANTIZED | FLAG_PRUNED) != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    let seed = r.u64()?;
    let n_specs = r.count(10)?;
    let mut specs = Vec::with_capacity(n_specs);
    for _ in 0..n_specs {
        let filters = r.usize()?;
        let taps = r.usize()?;
        let activation = activation_from(r.u8()?)?;
        let bias = r.bool()?;
        specs.push(LayerSpec::new(filters, taps, activation, bias));
    }
    let n_layers = r.count(14)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_channels = r.usize()?;
        let taps = r.usize()?;
        let activation = activation_from(r.u8()?)?;
        let has_bias = r.bool()?;
        let n_filters = r.count(8)?;
        let mut filters = Vec::with_capacity(n_filters);
        for _ in 0..n_filters {
            let id = r.usize()?;
            let n_ch = r.count(4)?;
            let inputs = (0..n_ch).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let mask = unpack_indices(r.take(n_ch.div_ceil(8))?, 1, n_ch)?;
            filters.push(Filter {
                id,
                inputs,
                weights: vec![0.0; n_ch * taps],
                active: mask.into_iter().map(|b| b == 1).collect(),
                bias: 0.0,
            });
        }
        layers.push(ConvLayer {
            in_channels,
            taps,
            activation,
            has_bias,
            filters,
        });
    }
    let model = FcnModel {
        layers,
        config: FcnConfig {
            layers: specs,
            seed,
        },
    };
    model.validate()?;
    Ok((model, flags))
}

fn read_biases(r: &mut Reader<'_>, l: &mut ConvLayer) -> Result<()> {
    if l.has_bias {
        for f in &mut l.filters {
            f.bias = r.f32()?;
        }
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<StoredModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (mut model, flags) = read_structure(&mut r)?;
    let stored = if flags & FLAG_QUANTIZED == 0 {
        for l in &mut model.layers {
            for f in &mut l.filters {
                for w in &mut f.weights {
                    *w = r.f32()?;
                }
            }
            read_biases(&mut r, l)?;
        }
        model.validate()?;
        StoredModel::Raw(model)
    } else {
        let scope = match r.u8()? {
            0 => QuantScope::PerLayer,
            1 => QuantScope::Global,
            s => return Err(Error::Format(format!("unknown scope code {s}"))),
        };
        let n_cb = r.count(4)?;
        let mut codebooks = Vec::with_capacity(n_cb);
        for _ in 0..n_cb {
            let len = r.count(4)?;
            let c = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            codebooks.push(Codebook::new(c).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut refs = Vec::with_capacity(model.layers.len());
        for _ in 0..model.layers.len() {
            let i = r.u32()?;
            refs.push(if i == NO_CODEBOOK {
                None
            } else if (i as usize) < codebooks.len() {
                Some(i as usize)
            } else {
                return Err(Error::Format(format!("codebook reference {i} out of range")));
            });
        }
        let n_bytes = r.u64()?;
        let n_bytes = usize::try_from(n_bytes)
            .map_err(|_| Error::Format("index stream too long".into()))?;
        let mut bits = BitReader::new(r.take(n_bytes)?);
        let mut qlayers = Vec::with_capacity(model.layers.len());
        for (l, cb) in model.layers.iter().zip(refs) {
            let count: usize = l.filters.iter().map(|f| f.active_channels() * l.taps).sum();
            let indices = match cb {
                Some(i) => {
                    let width = codebooks[i].bit_width();
                    (0..count).map(|_| bits.read(width)).collect::<Result<Vec<_>>>()?
                }
                None if count == 0 => Vec::new(),
                None => return Err(Error::Format("active weights without a codebook".into())),
            };
            qlayers.push(QuantizedLayer {
                codebook: cb,
                indices,
            });
        }
        for l in &mut model.layers {
            read_biases(&mut r, l)?;
        }
        StoredModel::Quantized(QuantizedModel {
            skeleton: model,
            scope,
            codebooks,
            layers: qlayers,
        })
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(stored)
}

pub fn to_bytes(model: &StoredModel) -> Result<Vec<u8>> {
    match model {
        StoredModel::Raw(m) => model_to_bytes(m),
        StoredModel::Quantized(q) => quantized_to_bytes(q),
    }
}

pub fn save(model: &StoredModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<StoredModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
