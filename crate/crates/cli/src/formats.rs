//! Little-endian binary formats: packed image datasets and checkpoints.

use std::path::Path;

use batr_core::numcore::{ParamStore, Tensor};
use batr_core::vit::ImageBatch;
use batr_core::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"BFST";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bounds-checked little-endian reader over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_dataset(data: &ImageBatch) -> Result<Vec<u8>> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::dataset("cannot pack an unlabeled batch"))?;
    let (c, h, w) = data.dims();
    let mut out = Vec::with_capacity(28 + data.pixels().len() * 4 + labels.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, data.len() as u32, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, &label) in labels.iter().enumerate() {
        let label = u16::try_from(label).map_err(|_| Error::dataset(format!("label {label} does not fit 16 bits")))?;
        out.extend_from_slice(&label.to_le_bytes());
        for &p in data.image(i) {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ImageBatch> {
    let bad = |m: String| Error::dataset(m);
    let mut r = Reader::new(bytes);
    let magic = r.take(4).map_err(bad)?;
    if magic != DATASET_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"BFST\"")));
    }
    let version = r.u32().map_err(bad)?;
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported dataset version {version}")));
    }
    let [count, h, w, c] = [r.u32(), r.u32(), r.u32(), r.u32()].map(|v| v.map(|v| v as usize));
    let (count, h, w, c) = (count.map_err(bad)?, h.map_err(bad)?, w.map_err(bad)?, c.map_err(bad)?);
    let per = c * h * w;
    let expected = count.checked_mul(2 + 4 * per).and_then(|n| n.checked_add(24));
    if expected != Some(bytes.len()) {
        return Err(bad(format!(
            "header declares {count} records of {c}x{h}x{w}, file holds {} bytes",
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * per);
    for i in 0..count {
        labels.push(r.u16().map_err(bad)? as usize);
        let px = r.f32s(per).map_err(bad)?;
        if let Some(v) = px.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(bad(format!("record {i}: pixel {v} outside [0,1]")));
        }
        pixels.extend(px);
    }
    debug_assert!(r.done());
    let t = Tensor::new(vec![count, c, h, w], pixels).map_err(|e| bad(e.to_string()))?;
    ImageBatch::new(t, Some(labels)).map_err(|e| bad(e.to_string()))
}

pub fn save_dataset(path: &Path, data: &ImageBatch) -> Result<()> {
    write_file(path, &encode_dataset(data)?)
}

pub fn load_dataset(path: &Path) -> Result<ImageBatch> {
    decode_dataset(&read_file(path)?).map_err(|e| match e {
        Error::Dataset(m) => Error::dataset(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Named tensors plus the configuration hash and seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::param(format!("{name}: dimension {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::checkpoint(path, m);
        let mut r = Reader::new(bytes);
        let magic = r.take(4).map_err(bad)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected \"BCKP\"")));
        }
        let version = r.u32().map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32).map_err(bad)?.try_into().unwrap();
        let seed = r.u64().map_err(bad)?;
        let count = r.u32().map_err(bad)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32().map_err(bad)? as usize;
            let name = std::str::from_utf8(r.take(len).map_err(bad)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32().map_err(bad)? as usize;
            if rank > 8 {
                return Err(bad(format!("{name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().map_err(bad)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let data = r.f32s(n).map_err(bad)?;
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            if params.contains(&name) {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
            params.insert(name, t);
        }
        if !r.done() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    /// Loads `path`; a hash differing from `expected` is an error unless
    /// `allow_mismatch` is set, in which case it is only logged.
    pub fn load(path: &Path, expected: &[u8; 32], allow_mismatch: bool) -> Result<Self> {
        if !path.exists() {
            return Err(Error::checkpoint(path, "file not found"));
        }
        let ck = Self::decode(&read_file(path)?, path)?;
        if &ck.config_hash != expected {
            let msg = format!(
                "config hash {} does not match the current configuration {}",
                hex(&ck.config_hash),
                hex(expected)
            );
            if !allow_mismatch {
                return Err(Error::checkpoint(path, format!("{msg}; pass --allow-config-mismatch to load anyway")));
            }
            log::warn!("{}: {msg}", path.display());
        }
        Ok(ck)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
