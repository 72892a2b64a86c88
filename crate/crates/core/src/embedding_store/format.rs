//! Little-endian embedding file reader and writer.
//!
//! Layout:
//! - magic: `b"OCLE"`
//! - version: u32 (= 1)
//! - dim: u32
//! - count: u64
//! - then `count` records of `label: i32` followed by `dim × f32`

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingRecord, StoreError};

pub const MAGIC: [u8; 4] = *b"OCLE";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 4 + 8;

/// Size in bytes of one record with the given dimension.
pub fn record_len(dim: usize) -> u64 {
    4 + 4 * dim as u64
}

/// Parsed file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub dim: usize,
    pub count: u64,
}

impl FileHeader {
    pub fn expected_file_len(&self) -> u64 {
        HEADER_LEN + self.count * record_len(self.dim)
    }
}

/// Writes `records` to `path`. All records must share one dimension.
pub fn write_embedding_file(
    records: &[EmbeddingRecord],
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let first = records.first().ok_or(StoreError::EmptyDataset)?;
    let dim = first.vector.len();
    if dim == 0 {
        return Err(StoreError::ZeroDimension);
    }
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != dim {
            return Err(StoreError::DimensionMismatch {
                record: i as u64,
                expected: dim,
                got: r.vector.len(),
            });
        }
        if r.label > i32::MAX as u32 {
            return Err(StoreError::LabelOverflow { record: i as u64, label: r.label });
        }
    }
    let dim_u32 = u32::try_from(dim).map_err(|_| StoreError::ZeroDimension)?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&dim_u32.to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        out.write_all(&(r.label as i32).to_le_bytes())?;
        for v in &r.vector {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader. Holds one record's worth of bytes plus the underlying
/// buffered reader; never materializes the file.
pub struct EmbeddingReader<R> {
    src: R,
    header: FileHeader,
    next_index: u64,
    scratch: Vec<u8>,
    failed: bool,
}

impl EmbeddingReader<BufReader<File>> {
    /// Opens a file and checks its length against the header before any
    /// record is produced.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let file = File::open(path.as_ref())?;
        let actual_len = file.metadata()?.len();
        let reader = Self::new(BufReader::new(file))?;
        check_length(&reader.header, actual_len)?;
        Ok(reader)
    }
}

fn check_length(header: &FileHeader, actual_len: u64) -> Result<(), StoreError> {
    let expected = header.expected_file_len();
    if actual_len == expected {
        return Ok(());
    }
    if actual_len > expected {
        return Err(StoreError::TrailingBytes { expected_len: expected, actual_len });
    }
    let body = actual_len.saturating_sub(HEADER_LEN);
    let rec = record_len(header.dim);
    let whole = body / rec;
    if !body.is_multiple_of(rec) {
        Err(StoreError::TruncatedRecord { offset: HEADER_LEN + whole * rec, record: whole })
    } else {
        Err(StoreError::Truncated { expected: header.count, got: whole })
    }
}

impl<R: Read> EmbeddingReader<R> {
    /// Wraps any byte source. Truncation is detected lazily when the source
    /// runs dry.
    pub fn new(mut src: R) -> Result<Self, StoreError> {
        let mut head = [0u8; HEADER_LEN as usize];
        read_full(&mut src, &mut head).map_err(|e| match e {
            ReadFail::Short(_) => StoreError::BadHeader("file shorter than header".into()),
            ReadFail::Io(e) => StoreError::Io(e),
        })?;
        if head[0..4] != MAGIC {
            return Err(StoreError::BadMagic([head[0], head[1], head[2], head[3]]));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
        Ok(Self {
            src,
            header: FileHeader { dim, count },
            next_index: 0,
            scratch: vec![0u8; record_len(dim) as usize],
            failed: false,
        })
    }

    pub fn header(&self) -> FileHeader {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn len(&self) -> u64 {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    fn read_record(&mut self) -> Result<EmbeddingRecord, StoreError> {
        let index = self.next_index;
        let offset = HEADER_LEN + index * record_len(self.header.dim);
        match read_full(&mut self.src, &mut self.scratch) {
            Ok(()) => {}
            Err(ReadFail::Short(0)) => {
                return Err(StoreError::Truncated { expected: self.header.count, got: index })
            }
            Err(ReadFail::Short(_)) => {
                return Err(StoreError::TruncatedRecord { offset, record: index })
            }
            Err(ReadFail::Io(e)) => return Err(StoreError::Io(e)),
        }
        let label = i32::from_le_bytes(self.scratch[0..4].try_into().unwrap());
        if label < 0 {
            return Err(StoreError::NegativeLabel { record: index, label });
        }
        let mut vector = Vec::with_capacity(self.header.dim);
        for (j, chunk) in self.scratch[4..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(StoreError::NonFinite {
                    record: index,
                    component: j,
                    offset: offset + 4 + 4 * j as u64,
                });
            }
            vector.push(v);
        }
        Ok(EmbeddingRecord { vector, label: label as u32 })
    }
}

impl<R: Read> Iterator for EmbeddingReader<R> {
    type Item = Result<EmbeddingRecord, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_index >= self.header.count {
            return None;
        }
        let out = self.read_record();
        match out {
            Ok(_) => self.next_index += 1,
            Err(_) => self.failed = true,
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.header.count - self.next_index) as usize;
        (0, Some(left))
    }
}

/// Opens `path` and returns the lazy record stream.
pub fn read_embedding_stream(
    path: impl AsRef<Path>,
) -> Result<EmbeddingReader<BufReader<File>>, StoreError> {
    EmbeddingReader::open(path)
}

enum ReadFail {
    /// Source ended after this many bytes of the requested chunk.
    Short(usize),
    Io(io::Error),
}

fn read_full(src: &mut impl Read, buf: &mut [u8]) -> Result<(), ReadFail> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => return Err(ReadFail::Short(filled)),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadFail::Io(e)),
        }
    }
    Ok(())
}
