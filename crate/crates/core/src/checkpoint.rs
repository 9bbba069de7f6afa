//! Binary checkpoints: config, vocabulary, mel statistics, parameters and
//! optionally the optimizer moments, sealed with a trailing SHA-256.

use std::path::Path;

use mixtts_tensor::{Adam, Matrix, Scalar};
use sha2::{Digest, Sha256};

use crate::config::{hex, ModelConfig};
use crate::corpus::{MelStats, PhonemeVocab};
use crate::error::{io_err, Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"MIXTTSCK";
const VERSION: u32 = 1;

/// Width in bytes of the stored scalars.
fn scalar_tag<F: Scalar>() -> u8 {
    std::mem::size_of::<F>() as u8
}

pub struct Checkpoint<F: Scalar> {
    pub model: Model<F>,
    pub step: u64,
    pub adam: Option<Adam<F>>,
}

struct Writer {
    buf: Vec<u8>,
    tag: u8,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn matrix<F: Scalar>(&mut self, m: &Matrix<F>) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for v in m.as_slice() {
            if self.tag == 4 {
                self.buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                self.f64(v.f64());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    tag: u8,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn matrix<F: Scalar>(&mut self) -> Result<Matrix<F>> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            let v = if self.tag == 4 { f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64 } else { self.f64()? };
            data.push(F::c(v));
        }
        Ok(Matrix::from_vec(r, c, data))
    }
}

pub fn checkpoint_bytes<F: Scalar>(model: &Model<F>, adam: Option<&Adam<F>>, step: u64) -> Vec<u8> {
    let tag = scalar_tag::<F>();
    let mut w = Writer { buf: Vec::new(), tag };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(tag);
    w.buf.extend_from_slice(&model.config.fingerprint());
    w.u64(step);
    w.str(&model.config.canonical_text());
    w.str(&model.vocab.to_line());
    w.u64(model.mel_stats.mean.len() as u64);
    for (m, s) in model.mel_stats.mean.iter().zip(&model.mel_stats.std) {
        w.f64(*m);
        w.f64(*s);
    }
    w.u8(model.postnet.initialized as u8);
    w.u64(model.store.len() as u64);
    for (_, p) in model.store.iter() {
        w.str(&p.name);
        w.matrix(&p.value);
    }
    match adam {
        Some(a) => {
            w.u8(1);
            w.u64(a.step);
            for (m, v) in a.m.iter().zip(&a.v) {
                w.matrix(m);
                w.matrix(v);
            }
        }
        None => w.u8(0),
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, model: &Model<F>, adam: Option<&Adam<F>>, step: u64) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, adam, step);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Decodes a checkpoint. With `expected`, the stored config fingerprint must
/// match it. Scalars are converted to `F` whatever width they were saved at.
pub fn parse_checkpoint<F: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<F>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: MAGIC.len(), tag: 0 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.tag = r.u8()?;
    if r.tag != 4 && r.tag != 8 {
        return Err(Error::Checkpoint(format!("bad scalar width {}", r.tag)));
    }
    let fp: [u8; 32] = r.take(32)?.try_into().unwrap();
    if let Some(cfg) = expected {
        if cfg.fingerprint() != fp {
            return Err(Error::Fingerprint { expected: cfg.fingerprint_hex(), found: hex(&fp) });
        }
    }
    let step = r.u64()?;
    let config: ModelConfig = toml::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    if config.fingerprint() != fp {
        return Err(Error::Checkpoint("stored config does not match its fingerprint".into()));
    }
    let vocab = PhonemeVocab::from_line(&r.str()?)?;
    let n = r.u64()? as usize;
    let mut stats = MelStats { mean: Vec::with_capacity(n), std: Vec::with_capacity(n) };
    for _ in 0..n {
        stats.mean.push(r.f64()?);
        stats.std.push(r.f64()?);
    }
    let initialized = r.u8()? != 0;

    let mut model = Model::<F>::new(&config, vocab, 0)?;
    model.mel_stats = stats;
    model.postnet.initialized = initialized;
    let count = r.u64()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{count} parameters stored, model has {}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.str()?;
        let m = r.matrix::<F>()?;
        let id = model.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let dst = model.store.get_mut(id);
        if (dst.rows(), dst.cols()) != (m.rows(), m.cols()) {
            return Err(Error::Checkpoint(format!("{name}: stored {}x{}, expected {}x{}", m.rows(), m.cols(), dst.rows(), dst.cols())));
        }
        *dst = m;
    }
    let adam = if r.u8()? == 1 {
        let mut a = Adam::new(&model.store, 0.9, 0.98, 1e-9);
        a.step = r.u64()?;
        for i in 0..count {
            a.m[i] = r.matrix()?;
            a.v[i] = r.matrix()?;
        }
        Some(a)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { model, step, adam })
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy_vocab;

    fn micro() -> Model<f64> {
        Model::new(&ModelConfig::micro(), toy_vocab(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact_in_f64() {
        let mut m = micro();
        m.mel_stats.mean = vec![0.5; 80];
        m.mel_stats.std = vec![2.0; 80];
        let adam = Adam::new(&m.store, 0.9, 0.98, 1e-9);
        let bytes = checkpoint_bytes(&m, Some(&adam), 17);
        let ck = parse_checkpoint::<f64>(&bytes, Some(&m.config)).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.model.mel_stats, m.mel_stats);
        for (id, p) in m.store.iter() {
            assert_eq!(ck.model.store.get(id), &p.value, "{}", p.name);
        }
        assert!(ck.adam.is_some());
    }

    #[test]
    fn corruption_and_mismatch_detected() {
        let m = micro();
        let mut bytes = checkpoint_bytes(&m, None, 1);
        let other = ModelConfig::toy();
        assert!(matches!(parse_checkpoint::<f64>(&bytes, Some(&other)), Err(Error::Fingerprint { .. })));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(parse_checkpoint::<f64>(&bytes, None), Err(Error::Checksum)));
    }
}
