//! Binary containers: `.scmd` module files and `.sctr` trace files.
//!
//! Both are little-endian with a 4-byte magic, a u16 version, and a trailing
//! CRC32 (IEEE) over every preceding byte. Readers validate magic, version,
//! and CRC before trusting any length field, and bounds-check every read, so
//! corrupted or truncated input yields a `FormatError` instead of a panic.
//!
//! Module layout after the common header (`"SCMD"`, version, u8 kind,
//! u32 input_len, u32 output_len, u32 layer_count), per layer:
//! u8 kind tag, u32 hyper-word count, that many u32 hyper words, u8
//! trainable, u64 parameter byte length, then the raw f32 parameters
//! (kernels/weights then bias; batch norm stores gamma, beta, running mean,
//! running variance).
//!
//! Trace layout after the common header (`"SCTR"`, version): u8 role,
//! u8 has_key, u8 key_byte, u32 trace count, u32 trace length, u32 desync
//! threshold, the plaintext bytes, then all samples as f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::forge::{Role, TraceSet};
use crate::layer::{Activation, Layer, LayerKind, LayerSpec, RunningStats, Shape};
use crate::module::{ModuleGraph, ModuleKind};
use crate::ops::PadMode;
use crate::tensor::{ParamId, Parameter, Tensor};

pub const MODULE_MAGIC: &[u8; 4] = b"SCMD";
pub const TRACE_MAGIC: &[u8; 4] = b"SCTR";
pub const FORMAT_VERSION: u16 = 1;

/// Upper bound on structural counts; anything bigger is a malformed file,
/// not a real model.
const MAX_LAYERS: u32 = 4096;
const MAX_HYPERS: u32 = 16;

// ---------------------------------------------------------------- writing

pub fn serialize_module(module: &ModuleGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODULE_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    out.push(module_kind_tag(module.kind));
    put_u32(&mut out, module.input_len as u32);
    put_u32(&mut out, module.output_len as u32);
    put_u32(&mut out, module.layers.len() as u32);
    for layer in &module.layers {
        out.push(layer_kind_tag(layer.spec.kind));
        let hypers = layer_hypers(layer);
        put_u32(&mut out, hypers.len() as u32);
        for h in hypers {
            put_u32(&mut out, h);
        }
        out.push(layer.trainable() as u8);
        let values = layer_values(layer);
        put_u64(&mut out, (values.len() * 4) as u64);
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn write_module(module: &ModuleGraph, path: &Path) -> Result<()> {
    Ok(fs::write(path, serialize_module(module))?)
}

pub fn read_module(path: &Path) -> Result<ModuleGraph> {
    deserialize_module(&fs::read(path)?)
}

pub fn serialize_traces(set: &TraceSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    out.push(match set.role {
        Role::Profiling => 0,
        Role::Attack => 1,
    });
    out.push(set.key.is_some() as u8);
    out.push(set.key.unwrap_or(0));
    put_u32(&mut out, set.n_traces as u32);
    put_u32(&mut out, set.trace_len as u32);
    put_u32(&mut out, set.desync_threshold);
    out.extend_from_slice(&set.plaintexts);
    for &s in &set.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn write_traces(set: &TraceSet, path: &Path) -> Result<()> {
    Ok(fs::write(path, serialize_traces(set))?)
}

pub fn read_traces(path: &Path) -> Result<TraceSet> {
    deserialize_traces(&fs::read(path)?)
}

// ---------------------------------------------------------------- reading

pub fn deserialize_module(bytes: &[u8]) -> Result<ModuleGraph> {
    let mut r = check_envelope(bytes, MODULE_MAGIC)?;
    let kind = module_kind_from(r.u8()?, r.pos - 1)?;
    let input_len = r.u32()? as usize;
    let output_len = r.u32()? as usize;
    let layer_count = r.u32()?;
    if layer_count == 0 || layer_count > MAX_LAYERS {
        return Err(Error::format(r.pos - 4, format!("implausible layer count {layer_count}")));
    }
    if input_len == 0 {
        return Err(Error::format(7, "zero input length".to_string()));
    }

    let mut layers = Vec::with_capacity(layer_count as usize);
    let mut shape = Shape::Flat(input_len);
    let mut next_id = 0u32;
    for i in 0..layer_count {
        let tag_pos = r.pos;
        let tag = r.u8()?;
        let hyper_count = r.u32()?;
        if hyper_count > MAX_HYPERS {
            return Err(Error::format(r.pos - 4, format!("implausible hyper count {hyper_count}")));
        }
        let mut hypers = Vec::with_capacity(hyper_count as usize);
        for _ in 0..hyper_count {
            hypers.push(r.u32()?);
        }
        let trainable = r.u8()? != 0;
        let byte_len = r.u64()?;
        if byte_len % 4 != 0 || byte_len > (r.remaining() as u64) {
            return Err(Error::format(
                r.pos - 8,
                format!("parameter block of {byte_len} bytes does not fit the file"),
            ));
        }
        let mut values = Vec::with_capacity((byte_len / 4) as usize);
        for _ in 0..byte_len / 4 {
            values.push(f32::from_le_bytes(r.array()?) as f64);
        }

        let spec = spec_from_wire(tag, &hypers, tag_pos)?;
        let expected_in = wire_in_extent(&spec, &hypers);
        let layer = rebuild_layer(spec, shape, &values, trainable, &mut next_id, tag_pos)?;
        if let Some(want) = expected_in {
            let (c, _) = match layer.in_shape {
                Shape::Flat(n) => (1, n),
                Shape::Spatial { channels, len } => (channels, len),
            };
            let got = match layer.spec.kind {
                LayerKind::Dense => layer.in_shape.elements(),
                _ => c,
            };
            if got != want as usize {
                return Err(Error::format(
                    tag_pos,
                    format!("layer {i} expects input extent {want}, chain gives {got}"),
                ));
            }
        }
        shape = layer.out_shape;
        layers.push(layer);
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos, format!("{} unexpected trailing bytes", r.remaining())));
    }
    if shape.elements() != output_len {
        return Err(Error::format(
            11,
            format!("header claims output length {output_len}, layers give {}", shape.elements()),
        ));
    }
    Ok(ModuleGraph {
        kind,
        input_len,
        output_len,
        layers,
    })
}

pub fn deserialize_traces(bytes: &[u8]) -> Result<TraceSet> {
    let mut r = check_envelope(bytes, TRACE_MAGIC)?;
    let role = match r.u8()? {
        0 => Role::Profiling,
        1 => Role::Attack,
        other => return Err(Error::format(r.pos - 1, format!("unknown role tag {other}"))),
    };
    let has_key = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::format(r.pos - 1, format!("bad key flag {other}"))),
    };
    let key_byte = r.u8()?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let desync = r.u32()?;
    if n == 0 || m == 0 {
        return Err(Error::format(r.pos - 8, "empty trace set".to_string()));
    }
    let need = (n as u64) + (n as u64) * (m as u64) * 4;
    if need != r.remaining() as u64 {
        return Err(Error::format(
            r.pos,
            format!("payload needs {need} bytes, file has {}", r.remaining()),
        ));
    }
    let plaintexts = r.bytes(n)?.to_vec();
    let mut samples = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        samples.push(f32::from_le_bytes(r.array()?));
    }
    Ok(TraceSet {
        role,
        key: has_key.then_some(key_byte),
        n_traces: n,
        trace_len: m,
        desync_threshold: desync,
        plaintexts,
        samples,
    })
}

/// Magic, version, and CRC checks shared by both containers. Returns a
/// reader positioned after the version field, with the CRC word excluded.
fn check_envelope<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<ByteReader<'a>> {
    if bytes.len() < 10 {
        return Err(Error::format(bytes.len(), "file too short for header".to_string()));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(0, format!("bad magic (expected {:?})", std::str::from_utf8(magic).unwrap())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            bytes.len() - 4,
            format!("crc mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    Ok(ByteReader { buf: body, pos: 6 })
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!("need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

// ------------------------------------------------------------- wire tables

fn module_kind_tag(kind: ModuleKind) -> u8 {
    match kind {
        ModuleKind::Encoder => 0,
        ModuleKind::Decoder => 1,
        ModuleKind::Classifier => 2,
    }
}

fn module_kind_from(tag: u8, offset: usize) -> Result<ModuleKind> {
    match tag {
        0 => Ok(ModuleKind::Encoder),
        1 => Ok(ModuleKind::Decoder),
        2 => Ok(ModuleKind::Classifier),
        other => Err(Error::format(offset, format!("unknown module kind {other}"))),
    }
}

fn layer_kind_tag(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv1D => 0,
        LayerKind::TransposedConv1D => 1,
        LayerKind::AvgPool1D => 2,
        LayerKind::Dense => 3,
        LayerKind::BatchNorm => 4,
        LayerKind::Flatten => 5,
        LayerKind::Activation => 6,
        LayerKind::Reshape => 7,
    }
}

fn activation_tag(a: Activation) -> u32 {
    match a {
        Activation::None => 0,
        Activation::Selu => 1,
        Activation::Sigmoid => 2,
        Activation::Softmax => 3,
    }
}

fn activation_from(tag: u32, offset: usize) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::None),
        1 => Ok(Activation::Selu),
        2 => Ok(Activation::Sigmoid),
        3 => Ok(Activation::Softmax),
        other => Err(Error::format(offset, format!("unknown activation tag {other}"))),
    }
}

fn pad_tag(p: PadMode) -> u32 {
    match p {
        PadMode::Same => 0,
        PadMode::Valid => 1,
    }
}

fn pad_from(tag: u32, offset: usize) -> Result<PadMode> {
    match tag {
        0 => Ok(PadMode::Same),
        1 => Ok(PadMode::Valid),
        other => Err(Error::format(offset, format!("unknown padding tag {other}"))),
    }
}

fn layer_hypers(layer: &Layer) -> Vec<u32> {
    let s = &layer.spec;
    let in_channels = match layer.in_shape {
        Shape::Flat(_) => 1,
        Shape::Spatial { channels, .. } => channels,
    } as u32;
    match s.kind {
        LayerKind::Conv1D => vec![
            s.kernel_count as u32,
            s.kernel_len as u32,
            s.dilation_rate as u32,
            s.stride as u32,
            pad_tag(s.padding),
            activation_tag(s.activation),
            in_channels,
        ],
        LayerKind::TransposedConv1D => vec![
            s.kernel_count as u32,
            s.kernel_len as u32,
            s.stride as u32,
            pad_tag(s.padding),
            activation_tag(s.activation),
            in_channels,
        ],
        LayerKind::AvgPool1D => vec![s.kernel_len as u32, s.stride as u32],
        LayerKind::Dense => vec![
            s.units as u32,
            layer.in_shape.elements() as u32,
            activation_tag(s.activation),
        ],
        LayerKind::BatchNorm => vec![match layer.in_shape {
            Shape::Flat(n) => n as u32,
            Shape::Spatial { channels, .. } => channels as u32,
        }],
        LayerKind::Flatten => vec![],
        LayerKind::Activation => vec![activation_tag(s.activation)],
        LayerKind::Reshape => vec![s.channels as u32],
    }
}

/// Parameter values in serialization order, including batch-norm running
/// stats.
fn layer_values(layer: &Layer) -> Vec<f64> {
    let mut out: Vec<f64> = layer
        .params
        .iter()
        .flat_map(|p| p.tensor.data().iter().copied())
        .collect();
    if let Some(stats) = &layer.running {
        out.extend_from_slice(&stats.mean);
        out.extend_from_slice(&stats.var);
    }
    out
}

fn spec_from_wire(tag: u8, hypers: &[u32], offset: usize) -> Result<LayerSpec> {
    let need = |n: usize| -> Result<()> {
        if hypers.len() != n {
            Err(Error::format(
                offset,
                format!("layer tag {tag} carries {} hyper words, expected {n}", hypers.len()),
            ))
        } else {
            Ok(())
        }
    };
    let positive = |v: u32, what: &str| -> Result<usize> {
        if v == 0 {
            Err(Error::format(offset, format!("{what} must be positive")))
        } else {
            Ok(v as usize)
        }
    };
    match tag {
        0 => {
            need(7)?;
            Ok(LayerSpec {
                kind: LayerKind::Conv1D,
                kernel_count: positive(hypers[0], "kernel count")?,
                kernel_len: positive(hypers[1], "kernel length")?,
                dilation_rate: positive(hypers[2], "dilation rate")?,
                stride: positive(hypers[3], "stride")?,
                padding: pad_from(hypers[4], offset)?,
                activation: activation_from(hypers[5], offset)?,
                ..Default::default()
            })
        }
        1 => {
            need(6)?;
            Ok(LayerSpec {
                kind: LayerKind::TransposedConv1D,
                kernel_count: positive(hypers[0], "kernel count")?,
                kernel_len: positive(hypers[1], "kernel length")?,
                stride: positive(hypers[2], "stride")?,
                padding: pad_from(hypers[3], offset)?,
                activation: activation_from(hypers[4], offset)?,
                ..Default::default()
            })
        }
        2 => {
            need(2)?;
            Ok(LayerSpec {
                kind: LayerKind::AvgPool1D,
                kernel_len: positive(hypers[0], "pool window")?,
                stride: positive(hypers[1], "stride")?,
                ..Default::default()
            })
        }
        3 => {
            need(3)?;
            Ok(LayerSpec {
                kind: LayerKind::Dense,
                units: positive(hypers[0], "units")?,
                activation: activation_from(hypers[2], offset)?,
                ..Default::default()
            })
        }
        4 => {
            need(1)?;
            Ok(LayerSpec::batch_norm())
        }
        5 => {
            need(0)?;
            Ok(LayerSpec::flatten())
        }
        6 => {
            need(1)?;
            Ok(LayerSpec::activation(activation_from(hypers[0], offset)?))
        }
        7 => {
            need(1)?;
            Ok(LayerSpec::reshape(positive(hypers[0], "channels")?))
        }
        other => Err(Error::format(offset, format!("unknown layer kind tag {other}"))),
    }
}

/// The wire word that must match the rebuilt shape chain, when the kind
/// carries one (conv input channels, dense input features, BN channels).
fn wire_in_extent(spec: &LayerSpec, hypers: &[u32]) -> Option<u32> {
    match spec.kind {
        LayerKind::Conv1D => Some(hypers[6]),
        LayerKind::TransposedConv1D => Some(hypers[5]),
        LayerKind::Dense => Some(hypers[1]),
        LayerKind::BatchNorm => Some(hypers[0]),
        _ => None,
    }
}

fn rebuild_layer(
    spec: LayerSpec,
    in_shape: Shape,
    values: &[f64],
    trainable: bool,
    next_id: &mut u32,
    offset: usize,
) -> Result<Layer> {
    let out_shape = Layer::infer_shape(&spec, in_shape).map_err(|e| match e {
        Error::Format { .. } => e,
        other => Error::format(offset, other.to_string()),
    })?;
    let mut take_id = || {
        let id = ParamId(*next_id);
        *next_id += 1;
        id
    };
    let (c_in, _) = match in_shape {
        Shape::Flat(n) => (1usize, n),
        Shape::Spatial { channels, len } => (channels, len),
    };
    let mut params = Vec::new();
    let mut running = None;
    let mut cursor = 0usize;
    let mut take = |n: usize, shape: Vec<usize>, cursor: &mut usize| -> Result<Tensor> {
        if *cursor + n > values.len() {
            return Err(Error::format(
                offset,
                format!("parameter block too short: need {n} more values", ),
            ));
        }
        let t = Tensor::new(shape, values[*cursor..*cursor + n].to_vec())?;
        *cursor += n;
        Ok(t)
    };
    match spec.kind {
        LayerKind::Conv1D => {
            let (co, k) = (spec.kernel_count, spec.kernel_len);
            params.push(Parameter::new(take_id(), take(co * c_in * k, vec![co, c_in, k], &mut cursor)?));
            params.push(Parameter::new(take_id(), take(co, vec![co], &mut cursor)?));
        }
        LayerKind::TransposedConv1D => {
            let (co, k) = (spec.kernel_count, spec.kernel_len);
            params.push(Parameter::new(take_id(), take(c_in * co * k, vec![c_in, co, k], &mut cursor)?));
            params.push(Parameter::new(take_id(), take(co, vec![co], &mut cursor)?));
        }
        LayerKind::Dense => {
            let f = in_shape.elements();
            let u = spec.units;
            params.push(Parameter::new(take_id(), take(u * f, vec![u, f], &mut cursor)?));
            params.push(Parameter::new(take_id(), take(u, vec![u], &mut cursor)?));
        }
        LayerKind::BatchNorm => {
            let c = match in_shape {
                Shape::Flat(n) => n,
                Shape::Spatial { channels, .. } => channels,
            };
            params.push(Parameter::new(take_id(), take(c, vec![c], &mut cursor)?));
            params.push(Parameter::new(take_id(), take(c, vec![c], &mut cursor)?));
            let mean = take(c, vec![c], &mut cursor)?;
            let var = take(c, vec![c], &mut cursor)?;
            running = Some(RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            });
        }
        LayerKind::AvgPool1D | LayerKind::Flatten | LayerKind::Activation | LayerKind::Reshape => {}
    }
    if cursor != values.len() {
        return Err(Error::format(
            offset,
            format!("parameter block has {} excess values", values.len() - cursor),
        ));
    }
    let mut layer = Layer {
        spec,
        params,
        running,
        in_shape,
        out_shape,
    };
    layer.set_trainable(trainable);
    Ok(layer)
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{generate, GenConfig};
    use crate::presets::Arch;

    fn sample_set() -> TraceSet {
        generate(
            &GenConfig {
                key: 0x11,
                n_traces: 16,
                trace_len: 50,
                leak_positions: vec![10],
                amplitude: 0.25,
                noise_sigma: 0.02,
                desync_threshold: 5,
                role: Role::Attack,
            },
            8,
        )
        .unwrap()
    }

    #[test]
    fn module_round_trip_is_byte_stable_and_output_identical() {
        let net = Arch::Tiny.build(100, 1e-3, 3).unwrap();
        for module in [&net.encoder, &net.decoder, &net.classifier] {
            let bytes = serialize_module(module);
            let back = deserialize_module(&bytes).unwrap();
            assert_eq!(serialize_module(&back), bytes);

            let x = Tensor::new(
                vec![2, module.input_len],
                (0..2 * module.input_len).map(|i| (i as f64 * 0.013).sin().abs()).collect(),
            )
            .unwrap();
            let a = module.infer(&x).unwrap();
            let b = back.infer(&x).unwrap();
            assert_eq!(a.data(), b.data(), "round-trip changed {:?} outputs", module.kind);
        }
    }

    #[test]
    fn module_header_fields_survive() {
        let net = Arch::Tiny.build(100, 1e-3, 4).unwrap();
        let bytes = serialize_module(&net.classifier);
        let back = deserialize_module(&bytes).unwrap();
        assert_eq!(back.kind, ModuleKind::Classifier);
        assert_eq!(back.input_len, 64);
        assert_eq!(back.output_len, 256);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let net = Arch::Tiny.build(100, 1e-3, 5).unwrap();
        let mut bytes = serialize_module(&net.encoder);
        bytes[0] = b'X';
        match deserialize_module(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let set = sample_set();
        let mut bytes = serialize_traces(&set);
        let n = bytes.len();
        bytes[n / 2] ^= 0x5a;
        assert!(matches!(deserialize_traces(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_is_rejected_at_every_length() {
        let set = sample_set();
        let bytes = serialize_traces(&set);
        for cut in [0, 1, 5, 9, 17, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(deserialize_traces(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut} did not error"
            );
        }
    }

    #[test]
    fn trace_round_trip_preserves_everything() {
        let set = sample_set();
        let bytes = serialize_traces(&set);
        let back = deserialize_traces(&bytes).unwrap();
        assert_eq!(back.samples, set.samples);
        assert_eq!(back.plaintexts, set.plaintexts);
        assert_eq!(back.key, set.key);
        assert_eq!(back.role, set.role);
        assert_eq!(back.desync_threshold, set.desync_threshold);
        assert_eq!(serialize_traces(&back), bytes);
    }

    #[test]
    fn trainable_flags_round_trip() {
        let net = Arch::Tiny.build(100, 1e-3, 6).unwrap();
        let mut classifier = net.classifier;
        crate::network::apply_lock(&mut classifier, crate::network::SharingProtocol::ConvLock).unwrap();
        let back = deserialize_module(&serialize_module(&classifier)).unwrap();
        for (a, b) in classifier.layers.iter().zip(&back.layers) {
            assert_eq!(a.trainable(), b.trainable());
        }
    }
}
