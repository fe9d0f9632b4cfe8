//! Side effects available to guest code: printing and file access.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::sync::{Arc, Mutex};

use super::state::ResourceTag;

pub trait ResourceHost {
    /// Opens a file in this process.
    fn open(&mut self, path: &str) -> Result<ResourceTag, String>;

    /// Opens a file in the process a debugging session came from.
    fn open_remote(&mut self, path: &str) -> Result<ResourceTag, String> {
        Err(format!("cannot open {path}: no remote origin"))
    }

    /// Reads up to `len` bytes at `offset`. An empty result means end of file.
    fn read_at(&mut self, tag: ResourceTag, offset: u64, len: usize) -> Result<Vec<u8>, String>;

    fn at_end(&mut self, tag: ResourceTag, offset: u64) -> Result<bool, String> {
        Ok(self.read_at(tag, offset, 1)?.is_empty())
    }

    fn close(&mut self, tag: ResourceTag);

    fn print(&mut self, line: &str);
}

/// An open local file, shareable between threads.
#[derive(Debug, Clone)]
pub struct OpenFile {
    pub path: String,
    pub file: Arc<Mutex<File>>,
    pub size: u64,
}

impl OpenFile {
    pub fn read_at(&self, offset: u64, len: usize) -> std::io::Result<Vec<u8>> {
        let mut f = self.file.lock().expect("file lock");
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = Vec::with_capacity(len.min(1 << 20));
        f.by_ref().take(len as u64).read_to_end(&mut buf)?;
        Ok(buf)
    }
}

#[derive(Debug, Default)]
struct LocalFilesInner {
    files: HashMap<ResourceTag, OpenFile>,
    next_tag: ResourceTag,
    output: Vec<String>,
    opened: u64,
}

/// Host backed by the local file system. Clones share the same table.
#[derive(Debug, Clone, Default)]
pub struct LocalFiles {
    inner: Arc<Mutex<LocalFilesInner>>,
    echo: bool,
}

impl LocalFiles {
    pub fn new() -> LocalFiles {
        LocalFiles::default()
    }

    /// Also writes printed lines to stdout.
    pub fn echoing() -> LocalFiles {
        LocalFiles { echo: true, ..LocalFiles::default() }
    }

    pub fn file(&self, tag: ResourceTag) -> Option<OpenFile> {
        self.inner.lock().expect("host lock").files.get(&tag).cloned()
    }

    pub fn output(&self) -> Vec<String> {
        self.inner.lock().expect("host lock").output.clone()
    }

    /// Number of files opened since creation.
    pub fn opened_count(&self) -> u64 {
        self.inner.lock().expect("host lock").opened
    }
}

impl ResourceHost for LocalFiles {
    fn open(&mut self, path: &str) -> Result<ResourceTag, String> {
        let file = File::open(path).map_err(|e| format!("cannot open {path}: {e}"))?;
        let size = file.metadata().map_err(|e| e.to_string())?.len();
        let mut inner = self.inner.lock().expect("host lock");
        inner.next_tag += 1;
        let tag = inner.next_tag;
        inner.opened += 1;
        inner.files.insert(tag, OpenFile { path: path.to_string(), file: Arc::new(Mutex::new(file)), size });
        Ok(tag)
    }

    fn read_at(&mut self, tag: ResourceTag, offset: u64, len: usize) -> Result<Vec<u8>, String> {
        let f = self.file(tag).ok_or_else(|| format!("stream {tag} is not open"))?;
        f.read_at(offset, len).map_err(|e| e.to_string())
    }

    fn at_end(&mut self, tag: ResourceTag, offset: u64) -> Result<bool, String> {
        let f = self.file(tag).ok_or_else(|| format!("stream {tag} is not open"))?;
        Ok(offset >= f.size)
    }

    fn close(&mut self, tag: ResourceTag) {
        self.inner.lock().expect("host lock").files.remove(&tag);
    }

    fn print(&mut self, line: &str) {
        if self.echo {
            println!("{line}");
        }
        self.inner.lock().expect("host lock").output.push(line.to_string());
    }
}

/// Host with no file access; prints are collected.
#[derive(Debug, Default, Clone)]
pub struct NoFiles {
    pub output: Vec<String>,
}

impl ResourceHost for NoFiles {
    fn open(&mut self, path: &str) -> Result<ResourceTag, String> {
        Err(format!("cannot open {path}: file access disabled"))
    }

    fn read_at(&mut self, tag: ResourceTag, _: u64, _: usize) -> Result<Vec<u8>, String> {
        Err(format!("stream {tag} is not open"))
    }

    fn close(&mut self, _: ResourceTag) {}

    fn print(&mut self, line: &str) {
        self.output.push(line.to_string());
    }
}

/// Bytes as a guest string, one char per byte.
pub fn latin1(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}
