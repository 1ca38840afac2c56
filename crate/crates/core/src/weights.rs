//! Versioned container for model and transfer-bundle files: a text manifest
//! followed by named sections of little-endian `f64` arrays.
//!
//! ```text
//! actpred-weights <version>
//! kind <kind>
//! meta <key> <value>            (repeated)
//! list <name> <count>           followed by <count> lines
//! sections <k>
//! section <name> <rows> <cols>  followed by rows*cols*8 bytes and '\n'
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Matrix;

pub const MAGIC: &str = "actpred-weights";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub lists: Vec<(String, Vec<String>)>,
    pub sections: Vec<(String, Matrix)>,
}

impl WeightFile {
    pub fn new(kind: &str) -> WeightFile {
        WeightFile {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::format(&self.kind, 0, format!("missing meta '{key}'")))
    }

    pub fn list(&self, name: &str) -> Option<&[String]> {
        self.lists.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_slice())
    }

    pub fn section(&self, name: &str) -> Option<&Matrix> {
        self.sections.iter().find(|(k, _)| k == name).map(|(_, m)| m)
    }

    pub fn take_section(&mut self, name: &str) -> Result<Matrix> {
        let i = self
            .sections
            .iter()
            .position(|(k, _)| k == name)
            .ok_or_else(|| Error::format(&self.kind, 0, format!("missing section '{name}'")))?;
        Ok(self.sections.remove(i).1)
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, items) in &self.lists {
            out.push_str(&format!("list {name} {}\n", items.len()));
            for it in items {
                out.push_str(it);
                out.push('\n');
            }
        }
        out.push_str(&format!("sections {}\n", self.sections.len()));
        let mut bytes = out.into_bytes();
        for (name, m) in &self.sections {
            bytes.extend_from_slice(format!("section {name} {} {}\n", m.rows, m.cols).as_bytes());
            for x in &m.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            bytes.push(b'\n');
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<WeightFile> {
        let mut r = Reader { bytes, pos: 0, line: 0, origin };
        let head = r.line()?;
        let version = head
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| r.err("not a weights file"))?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported format version {version}")));
        }
        let kind = r.line()?.strip_prefix("kind ").ok_or_else(|| r.err("expected 'kind'"))?.to_string();
        let mut wf = WeightFile::new(&kind);
        loop {
            let l = r.line()?;
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                wf.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("list ") {
                let (name, n) = rest.rsplit_once(' ').ok_or_else(|| r.err("bad list header"))?;
                let n: usize = n.parse().map_err(|_| r.err("bad list length"))?;
                let items = (0..n).map(|_| r.line().map(str::to_string)).collect::<Result<_>>()?;
                wf.lists.push((name.to_string(), items));
            } else if let Some(n) = l.strip_prefix("sections ") {
                let n: usize = n.parse().map_err(|_| r.err("bad section count"))?;
                for _ in 0..n {
                    let h = r.line()?;
                    let parts: Vec<&str> = h.split(' ').collect();
                    let (name, rows, cols) = match parts.as_slice() {
                        ["section", name, rows, cols] => (
                            name.to_string(),
                            rows.parse::<usize>().map_err(|_| r.err("bad rows"))?,
                            cols.parse::<usize>().map_err(|_| r.err("bad cols"))?,
                        ),
                        _ => return Err(r.err("expected 'section <name> <rows> <cols>'")),
                    };
                    let data = r.floats(rows * cols)?;
                    wf.sections.push((name, Matrix::from_vec(rows, cols, data)));
                }
                break;
            } else {
                return Err(r.err(&format!("unexpected line '{l}'")));
            }
        }
        Ok(wf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<WeightFile> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::format(self.origin, self.line, msg)
    }

    fn line(&mut self) -> Result<&'a str> {
        self.line += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| self.err("invalid utf-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n * 8 + 1;
        if self.bytes.len() < self.pos + need || self.bytes[self.pos + n * 8] != b'\n' {
            return Err(self.err("truncated section data"));
        }
        let data = self.bytes[self.pos..self.pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos += need;
        Ok(data)
    }
}
