use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Action, ActionType, Corpus, Interest, Pin, Surface, UserTimeline};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SQR1";
pub const CORPUS_MAGIC: &[u8; 4] = b"SQC1";
const VERSION: u32 = 1;

fn write_timeline<W: Write>(w: &mut Writer<W>, tl: &UserTimeline) -> Result<()> {
    let n_mix = u16::try_from(tl.interest_mixture.len())
        .map_err(|_| Error::Precondition(format!("user {} has too many mixture entries", tl.user_id)))?;
    let n_actions = u32::try_from(tl.actions.len())
        .map_err(|_| Error::Precondition(format!("user {} has too many actions", tl.user_id)))?;
    w.u64(tl.user_id)?;
    w.u16(n_mix)?;
    for (id, weight) in &tl.interest_mixture {
        w.u32(*id)?;
        w.f32(*weight)?;
    }
    w.u32(n_actions)?;
    for a in &tl.actions {
        w.u64(a.pin_id)?;
        w.i64(a.timestamp)?;
        w.u8(a.action_type.code())?;
        w.u8(a.surface.code())?;
        w.f32(a.duration)?;
    }
    Ok(())
}

/// Writes timelines, one record per user.
pub fn write_dataset(path: &Path, timelines: &[UserTimeline]) -> Result<()> {
    let count = u32::try_from(timelines.len()).map_err(|_| Error::Precondition("too many users".into()))?;
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(DATASET_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(count)?;
    for tl in timelines {
        write_timeline(&mut w, tl)?;
    }
    w.finish()?;
    Ok(())
}

/// Streaming cursor over a dataset file; yields one timeline at a time.
pub struct DatasetReader<R: Read> {
    reader: Reader<R>,
    count: u32,
    next: u32,
    failed: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut reader = Reader::new(inner);
        reader.magic(DATASET_MAGIC)?;
        let version = reader.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let count = reader.u32()?;
        Ok(DatasetReader {
            reader,
            count,
            next: 0,
            failed: false,
        })
    }

    /// Number of records announced by the header.
    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn read_record(&mut self) -> Result<UserTimeline> {
        let r = &mut self.reader;
        r.set_record(Some(self.next as u64));
        let user_id = r.u64()?;
        let n_mix = r.u16()?;
        let mut interest_mixture = Vec::with_capacity(n_mix as usize);
        for _ in 0..n_mix {
            interest_mixture.push((r.u32()?, r.f32()?));
        }
        let n_actions = r.u32()?;
        let mut actions = Vec::with_capacity((n_actions as usize).min(1 << 16));
        for _ in 0..n_actions {
            actions.push(Action {
                pin_id: r.u64()?,
                timestamp: r.i64()?,
                action_type: ActionType::from_code(r.u8()?),
                surface: Surface::from_code(r.u8()?),
                duration: r.f32()?,
            });
        }
        Ok(UserTimeline {
            user_id,
            interest_mixture,
            actions,
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<UserTimeline>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next == self.count {
            self.failed = true;
            self.reader.set_record(None);
            return self.reader.expect_eof().err().map(Err);
        }
        let item = self.read_record();
        self.failed = item.is_err();
        self.next += 1;
        Some(item)
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<UserTimeline>> {
    DatasetReader::open(path)?.collect()
}

/// Writes interests and pins: header, `u32` interest count, `u32` dimension,
/// interests as `(u32 id, f32 x d)`, `u32` pin count, pins as
/// `(u64 id, u32 interest_id, f64 popularity, f32 x d)`.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let d = corpus
        .interests
        .first()
        .map_or(corpus.d_pin(), |i| i.centroid.len());
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(CORPUS_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(corpus.interests.len() as u32)?;
    w.u32(d as u32)?;
    for i in &corpus.interests {
        if i.centroid.len() != d {
            return Err(Error::shape(format!("interest {} has dimension {}", i.id, i.centroid.len())));
        }
        w.u32(i.id)?;
        w.f32s(&i.centroid)?;
    }
    w.u32(corpus.pins.len() as u32)?;
    for p in &corpus.pins {
        if p.embedding.len() != d {
            return Err(Error::shape(format!("pin {} has dimension {}", p.id, p.embedding.len())));
        }
        w.u64(p.id)?;
        w.u32(p.interest_id)?;
        w.f64(p.popularity)?;
        w.f32s(&p.embedding)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(CORPUS_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let n_interests = r.u32()?;
    let d = r.u32()? as usize;
    let mut interests = Vec::with_capacity((n_interests as usize).min(1 << 16));
    for i in 0..n_interests {
        r.set_record(Some(i as u64));
        interests.push(Interest {
            id: r.u32()?,
            centroid: r.f32s(d)?,
        });
    }
    r.set_record(None);
    let n_pins = r.u32()?;
    let mut pins = Vec::with_capacity((n_pins as usize).min(1 << 20));
    for i in 0..n_pins {
        r.set_record(Some(i as u64));
        let id = r.u64()?;
        if id != i as u64 {
            return Err(r.error(format!("pin id {id} out of order")));
        }
        pins.push(Pin {
            id,
            interest_id: r.u32()?,
            popularity: r.f64()?,
            embedding: r.f32s(d)?,
        });
    }
    r.set_record(None);
    r.expect_eof()?;
    Ok(Corpus { interests, pins })
}
