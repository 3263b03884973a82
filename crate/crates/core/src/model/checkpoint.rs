//! Binary checkpoint files. The byte layout is documented in
//! `docs/checkpoint-format.md`; every multi-byte value is little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

use super::{Mcrcnn, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Freshly initialized, never trained.
    Init,
    Bcnn,
    Scnn,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Init => 0,
            Phase::Bcnn => 1,
            Phase::Scnn => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Phase::Init),
            1 => Ok(Phase::Bcnn),
            2 => Ok(Phase::Scnn),
            _ => Err(Error::MalformedCheckpoint(format!("unknown phase code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingMeta {
    pub phase: Phase,
    pub epoch: u32,
    pub best_loss: f64,
    pub seed: u64,
}

impl TrainingMeta {
    pub fn untrained(seed: u64) -> Self {
        TrainingMeta {
            phase: Phase::Init,
            epoch: 0,
            best_loss: f64::INFINITY,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Mcrcnn,
    pub meta: TrainingMeta,
    pub adam: Option<AdamState>,
}

/// Header and record table of a checkpoint, read without building a model.
#[derive(Clone, Debug)]
pub struct CheckpointSummary {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    /// `(name, shape, trainable)` per parameter record.
    pub params: Vec<(String, Shape, bool)>,
    /// `(layer name, channels)` per running-statistics record.
    pub running: Vec<(String, usize)>,
    pub has_optimizer: bool,
}

impl CheckpointSummary {
    /// Sum of the element counts of all parameter records.
    pub fn stored_values(&self) -> usize {
        self.params.iter().map(|(_, s, _)| s.len()).sum()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit the u32 checkpoint field")))?;
        self.u32(v);
        Ok(())
    }
    fn name(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {s}")))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) {
        self.0.reserve(4 * v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn flag(&mut self, what: &'static str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::MalformedCheckpoint(format!("{what}: flag byte {b}"))),
        }
    }
    fn name(&mut self, what: &'static str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::MalformedCheckpoint(format!("{what}: name is not UTF-8")))
    }
    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) -> Result<()> {
    for v in [
        c.input_channels,
        c.backbone_width,
        c.bcnn_deep_layers,
        c.scnn_deep_layers,
        c.norm_interval,
        c.kernel_size,
        c.rpm_width,
        c.pool_window,
    ] {
        w.usize(v)?;
    }
    w.usize(c.rpm_dilations.len())?;
    for &d in &c.rpm_dilations {
        w.usize(d)?;
    }
    w.f64(c.rpm_dropout_rate);
    w.f64(c.bn_momentum);
    w.f64(c.norm_epsilon);
    Ok(())
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    const W: &str = "model config";
    let mut c = ModelConfig {
        input_channels: r.usize(W)?,
        backbone_width: r.usize(W)?,
        bcnn_deep_layers: r.usize(W)?,
        scnn_deep_layers: r.usize(W)?,
        norm_interval: r.usize(W)?,
        kernel_size: r.usize(W)?,
        rpm_width: r.usize(W)?,
        pool_window: r.usize(W)?,
        ..ModelConfig::default()
    };
    let k = r.usize(W)?;
    c.rpm_dilations = (0..k).map(|_| r.usize(W)).collect::<Result<_>>()?;
    c.rpm_dropout_rate = r.f64(W)?;
    c.bn_momentum = r.f64(W)?;
    c.norm_epsilon = r.f64(W)?;
    c.validate()
        .map_err(|e| Error::MalformedCheckpoint(format!("stored config is invalid: {e}")))?;
    Ok(c)
}

/// Serializes `model`, its metadata and optionally the optimizer state.
pub fn encode_checkpoint(model: &Mcrcnn, meta: &TrainingMeta, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_config(&mut w, model.config())?;

    w.u8(meta.phase.code());
    w.u32(meta.epoch);
    w.f64(meta.best_loss);
    w.u64(meta.seed);

    w.usize(model.params().len())?;
    for p in model.params().iter() {
        w.name(p.name())?;
        w.u8(p.trainable as u8);
        for d in p.value().shape().dims() {
            w.usize(d)?;
        }
        w.f32s(p.value().data());
    }

    w.usize(model.running_slice().len())?;
    for (name, rs) in model.running_stats() {
        w.name(name)?;
        w.u8(rs.initialized as u8);
        w.usize(rs.channels())?;
        w.f32s(&rs.mean);
        w.f32s(&rs.var);
    }

    match adam {
        None => w.u8(0),
        Some(a) => {
            a.check_compatible(model.params())?;
            w.u8(1);
            w.u64(a.t);
            w.f64(a.learning_rate);
            w.f64(a.beta1);
            w.f64(a.beta2);
            w.f64(a.eps);
            for (m, v) in a.m.iter().zip(&a.v) {
                w.f32s(m.data());
                w.f32s(v.data());
            }
        }
    }
    Ok(w.0)
}

/// Step count, `[lr, beta1, beta2, eps]` and `(m, v)` per parameter.
type AdamRecord = (u64, [f64; 4], Vec<(Vec<f32>, Vec<f32>)>);

struct Decoded {
    summary: CheckpointSummary,
    values: Vec<Vec<f32>>,
    running: Vec<RunningStats>,
    adam: Option<AdamRecord>,
}

fn decode(buf: &[u8]) -> Result<Decoded> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let config = read_config(&mut r)?;
    let meta = TrainingMeta {
        phase: Phase::from_code(r.u8("training metadata")?)?,
        epoch: r.u32("training metadata")?,
        best_loss: r.f64("training metadata")?,
        seed: r.u64("training metadata")?,
    };

    let count = r.usize("parameter count")?;
    let mut params = Vec::with_capacity(count.min(4096));
    let mut values = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name("parameter name")?;
        let trainable = r.flag("parameter trainable flag")?;
        let mut d = [0usize; 4];
        for x in &mut d {
            *x = r.usize("parameter shape")?;
        }
        let shape = Shape::from(d);
        values.push(r.f32s(shape.len(), "parameter data")?);
        params.push((name, shape, trainable));
    }

    let count = r.usize("running statistics count")?;
    let mut running_names = Vec::new();
    let mut running = Vec::new();
    for _ in 0..count {
        let name = r.name("running statistics name")?;
        let initialized = r.flag("running statistics flag")?;
        let c = r.usize("running statistics channels")?;
        let mean = r.f32s(c, "running mean")?;
        let var = r.f32s(c, "running variance")?;
        running_names.push((name, c));
        running.push(RunningStats { mean, var, initialized });
    }

    let adam = if r.flag("optimizer flag")? {
        let t = r.u64("optimizer state")?;
        let h = [
            r.f64("optimizer state")?,
            r.f64("optimizer state")?,
            r.f64("optimizer state")?,
            r.f64("optimizer state")?,
        ];
        let moments = params
            .iter()
            .map(|(_, s, _)| Ok((r.f32s(s.len(), "optimizer moments")?, r.f32s(s.len(), "optimizer moments")?)))
            .collect::<Result<Vec<_>>>()?;
        Some((t, h, moments))
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Decoded {
        summary: CheckpointSummary {
            version,
            config,
            meta,
            params,
            running: running_names,
            has_optimizer: adam.is_some(),
        },
        values,
        running,
        adam,
    })
}

/// Rebuilds a model from encoded checkpoint bytes.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let d = decode(buf)?;
    let s = &d.summary;
    let mut model = Mcrcnn::build(s.config.clone(), &mut Rng::new(s.meta.seed))?;
    if model.params().len() != s.params.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} parameter records, config implies {}",
            s.params.len(),
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for ((id, (name, shape, trainable)), data) in ids.into_iter().zip(&s.params).zip(d.values) {
        let p = model.params_mut().get_mut(id);
        if p.name() != name || p.value().shape() != *shape {
            return Err(Error::MalformedCheckpoint(format!(
                "record `{name}` {shape} does not match model parameter `{}` {}",
                p.name(),
                p.value().shape()
            )));
        }
        p.set_value(Tensor::new(*shape, data)?)?;
        p.trainable = *trainable;
    }
    if model.running_names().len() != s.running.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} running-statistics records, config implies {}",
            s.running.len(),
            model.running_names().len()
        )));
    }
    for (i, ((name, c), stats)) in s.running.iter().zip(d.running).enumerate() {
        if model.running_names()[i] != *name || model.running_slice()[i].channels() != *c {
            return Err(Error::MalformedCheckpoint(format!(
                "running statistics `{name}` do not match layer `{}`",
                model.running_names()[i]
            )));
        }
        model.set_running(i, stats);
    }
    let adam = d.adam.map(|(t, [lr, b1, b2, eps], moments)| {
        let (m, v) = moments
            .into_iter()
            .zip(&s.params)
            .map(|((m, v), (_, shape, _))| {
                (Tensor::from_parts(*shape, m), Tensor::from_parts(*shape, v))
            })
            .unzip();
        AdamState {
            m,
            v,
            t,
            beta1: b1,
            beta2: b2,
            eps,
            learning_rate: lr,
        }
    });
    model.seed = s.meta.seed;
    Ok(Checkpoint {
        model,
        meta: d.summary.meta,
        adam,
    })
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, model: &Mcrcnn, meta: &TrainingMeta, adam: Option<&AdamState>) -> Result<()> {
    let bytes = encode_checkpoint(model, meta, adam)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Parses the header and record table only.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::ops::Mode;

    fn trained_ish() -> Mcrcnn {
        let mut m = Mcrcnn::build(ModelConfig::reduced(4, 3, 2), &mut Rng::new(9)).unwrap();
        let mut g = Graph::<f32>::new();
        let p = g.bind(m.params());
        let f = g.input(Tensor::from_fn([2, 3, 8, 8], |[n, c, y, x]| ((n + c * y + x) % 5) as f32 / 5.0));
        m.bcnn_forward(&mut g, &p, f, Mode::Train).unwrap();
        m
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = trained_ish();
        let meta = TrainingMeta {
            phase: Phase::Bcnn,
            epoch: 3,
            best_loss: 0.125,
            seed: 9,
        };
        let mut adam = AdamState::new(m.params(), 1e-3);
        adam.t = 7;
        adam.m[0].data_mut()[0] = 0.5;
        let bytes = encode_checkpoint(&m, &meta, Some(&adam)).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.adam.as_ref(), Some(&adam));
        for (a, b) in m.params().iter().zip(ck.model.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert!(a.value().bitwise_eq(b.value()));
        }
        for ((_, a), (_, b)) in m.running_stats().zip(ck.model.running_stats()) {
            assert_eq!(a, b);
        }
        assert_eq!(ck.model.config(), m.config());
        assert_eq!(encode_checkpoint(&ck.model, &ck.meta, ck.adam.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_headers_have_distinct_errors() {
        let m = trained_ish();
        let bytes = encode_checkpoint(&m, &TrainingMeta::untrained(1), None).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated(_))), "cut at {cut}");
        }

        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode_checkpoint(&bad), Err(Error::MalformedCheckpoint(_))));
    }

    #[test]
    fn trainable_flags_survive() {
        let mut m = trained_ish();
        m.set_stage_trainable(super::super::Stage::Bcnn, false);
        let ck = decode_checkpoint(&encode_checkpoint(&m, &TrainingMeta::untrained(0), None).unwrap()).unwrap();
        for (a, b) in m.params().iter().zip(ck.model.params().iter()) {
            assert_eq!(a.trainable, b.trainable);
        }
    }

    #[test]
    fn file_roundtrip_and_inspect() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = trained_ish();
        save_checkpoint(&path, &m, &TrainingMeta::untrained(9), None).unwrap();
        let s = inspect_checkpoint(&path).unwrap();
        assert_eq!(s.stored_values(), m.params().iter().map(|p| p.value().len()).sum::<usize>());
        assert!(!s.has_optimizer);
        assert!(matches!(load_checkpoint(&dir.path().join("none.ckpt")), Err(Error::Io { .. })));
    }
}
