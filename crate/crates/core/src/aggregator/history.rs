//! File-backed log of decrypted answers for batch analytics.
//!
//! Layout under the root directory: `q<query_id>/<hour>.log` holds
//! `u32`-length-prefixed serialized messages, `q<query_id>/<hour>.idx` holds
//! `(timestamp u64, offset u64)` pairs pointing into the log. Both are only
//! ever appended to.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;

use crate::transport::PlainMessage;

const HOUR_MS: u64 = 3_600_000;
const INDEX_ENTRY: usize = 16;
const BUF: usize = 1 << 16;

struct Segment {
    log: BufWriter<File>,
    idx: BufWriter<File>,
    offset: u64,
}

pub struct HistoricalStore {
    root: PathBuf,
    open: HashMap<(u64, u64), Segment>,
}

/// Messages read back from the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoricalRead {
    pub messages: Vec<PlainMessage>,
    /// Index entries in the range before sampling.
    pub candidates: u64,
    /// Entries that failed to decode.
    pub corrupt: u64,
}

impl HistoricalStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(HistoricalStore {
            root,
            open: HashMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn query_dir(&self, query_id: u64) -> PathBuf {
        self.root.join(format!("q{query_id}"))
    }

    pub fn append(&mut self, msg: &PlainMessage) -> io::Result<()> {
        let key = (msg.query_id, msg.timestamp_ms / HOUR_MS);
        if !self.open.contains_key(&key) {
            let dir = self.query_dir(key.0);
            fs::create_dir_all(&dir)?;
            let open = |ext: &str| {
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(format!("{}.{ext}", key.1)))
            };
            let log = open("log")?;
            let offset = log.metadata()?.len();
            self.open.insert(
                key,
                Segment {
                    log: BufWriter::new(log),
                    idx: BufWriter::new(open("idx")?),
                    offset,
                },
            );
        }
        let seg = self.open.get_mut(&key).unwrap();
        let bytes = msg.to_bytes();
        seg.log.write_all(&(bytes.len() as u32).to_be_bytes())?;
        seg.log.write_all(&bytes)?;
        seg.idx.write_all(&msg.timestamp_ms.to_be_bytes())?;
        seg.idx.write_all(&seg.offset.to_be_bytes())?;
        seg.offset += 4 + bytes.len() as u64;
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        for seg in self.open.values_mut() {
            seg.log.flush()?;
            seg.idx.flush()?;
        }
        Ok(())
    }

    /// Hours stored for a query, ascending.
    fn hours(&self, query_id: u64) -> io::Result<Vec<u64>> {
        let dir = self.query_dir(query_id);
        if !dir.exists() {
            return Ok(vec![]);
        }
        let mut hours: Vec<u64> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".idx")?.parse().ok()
            })
            .collect();
        hours.sort_unstable();
        Ok(hours)
    }

    /// Messages with timestamps in `[from, to)`, each kept independently with
    /// probability `sampling`. The coin is flipped on the index, so skipped
    /// messages are never decoded. Output is in timestamp order.
    pub fn read_range<R: Rng + ?Sized>(
        &mut self,
        query_id: u64,
        from_ms: u64,
        to_ms: u64,
        sampling: f64,
        rng: &mut R,
    ) -> io::Result<HistoricalRead> {
        self.flush()?;
        let mut out = HistoricalRead::default();
        let dir = self.query_dir(query_id);
        for hour in self.hours(query_id)? {
            if (hour + 1) * HOUR_MS <= from_ms || hour * HOUR_MS >= to_ms {
                continue;
            }
            let mut idx = BufReader::with_capacity(BUF, File::open(dir.join(format!("{hour}.idx")))?);
            let mut log = BufReader::with_capacity(BUF, File::open(dir.join(format!("{hour}.log")))?);
            let mut pos = Some(0u64);
            let mut entry = [0u8; INDEX_ENTRY];
            let mut body = Vec::new();
            loop {
                match idx.read_exact(&mut entry) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(e),
                }
                let ts = u64::from_be_bytes(entry[..8].try_into().unwrap());
                if !(from_ms..to_ms).contains(&ts) {
                    continue;
                }
                out.candidates += 1;
                if sampling < 1.0 && rng.gen::<f64>() >= sampling {
                    continue;
                }
                let off = u64::from_be_bytes(entry[8..].try_into().unwrap());
                match read_record(&mut log, &mut pos, off, &mut body).map(|()| PlainMessage::from_bytes(&body)) {
                    Ok(Ok(m)) => out.messages.push(m),
                    _ => {
                        pos = None;
                        warn!("historical store: bad record at {hour}.log+{off}");
                        out.corrupt += 1;
                    }
                }
            }
        }
        out.messages.sort_by_key(|m| m.timestamp_ms);
        Ok(out)
    }
}

/// Reads the length-prefixed record at `off`. `pos` is the reader's current
/// offset, or `None` after an error left it unknown.
fn read_record(log: &mut BufReader<File>, pos: &mut Option<u64>, off: u64, body: &mut Vec<u8>) -> io::Result<()> {
    match *pos {
        Some(p) if p == off => {}
        Some(p) => log.seek_relative(off as i64 - p as i64)?,
        None => {
            log.seek(SeekFrom::Start(off))?;
        }
    }
    let mut len = [0u8; 4];
    log.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    body.resize(len, 0);
    log.read_exact(body)?;
    *pos = Some(off + 4 + len as u64);
    Ok(())
}

impl Drop for HistoricalStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
