//! Flat binary container for named `f64` arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "METADAPT"
//! version      u32      1
//! classes      u32      M
//! clusters     u32      K
//! iteration    u64
//! kind         u32 length + UTF-8
//! entries      u32 count, then per entry:
//!                u32 name length + UTF-8 name
//!                u32 rank, rank × u64 extents
//! payload      every entry's values as f64, in manifest order
//! ```
//!
//! Datasets, centroids and model checkpoints all use it; `kind` tells them
//! apart.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"METADAPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub classes: u32,
    pub clusters: u32,
    pub iteration: u64,
    entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: impl Into<String>, classes: usize, clusters: usize) -> Self {
        Container {
            kind: kind.into(),
            classes: classes as u32,
            clusters: clusters as u32,
            iteration: 0,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "entry {name}");
        assert!(self.get(&name).is_none(), "duplicate entry {name}");
        self.entries.push(Entry {
            name,
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entry `name`, failing with a format error that names `path`.
    pub fn require(&self, name: &str, path: &Path) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing entry {name}"),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&self.clusters.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Container> {
        let fail = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| fail("truncated header"))? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header"))?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let classes = r.u32().ok_or_else(|| fail("truncated header"))?;
        let clusters = r.u32().ok_or_else(|| fail("truncated header"))?;
        let iteration = r.u64().ok_or_else(|| fail("truncated header"))?;
        let kind = r.string().ok_or_else(|| fail("bad kind"))?;
        let count = r.u32().ok_or_else(|| fail("truncated manifest"))? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string().ok_or_else(|| fail("bad entry name"))?;
            let rank = r.u32().ok_or_else(|| fail("truncated manifest"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| fail("truncated manifest"))? as usize);
            }
            manifest.push((name, shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r
                .take(n * 8)
                .ok_or_else(|| fail(&format!("truncated payload for {name}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Container {
            kind,
            classes,
            clusters,
            iteration,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    what: "container file".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Container::from_bytes(&bytes, path)
    }

    /// Reads `path` and checks its kind.
    pub fn read_kind(path: &Path, kind: &str) -> Result<Container> {
        let c = Container::read(path)?;
        if c.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected a {kind} file, found {}", c.kind),
            });
        }
        Ok(c)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}
