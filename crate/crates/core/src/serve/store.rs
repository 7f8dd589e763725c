use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::corpus::{Action, Corpus, UserTimeline, SECONDS_PER_DAY};
use crate::encoding::encode_actions;
use crate::error::{Error, Result};
use crate::model::Model;

const STORE_MAGIC: &[u8; 4] = b"SQE1";
const STORE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoreRecord {
    pub embedding: Vec<f32>,
    pub as_of: i64,
    pub model_version: u32,
}

/// One embedding per user, keyed by user id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub records: BTreeMap<u64, StoreRecord>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> EmbeddingStore {
        EmbeddingStore {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, user_id: u64) -> Option<&StoreRecord> {
        self.records.get(&user_id)
    }

    /// Takes each delta record unless the stored one is strictly newer.
    /// Users missing from the delta keep their old record.
    pub fn merge(&self, delta: &EmbeddingStore) -> Result<EmbeddingStore> {
        if !self.is_empty() && !delta.is_empty() && self.dim != delta.dim {
            return Err(Error::shape(format!("store dim {} vs delta dim {}", self.dim, delta.dim)));
        }
        let mut out = self.clone();
        if out.is_empty() {
            out.dim = delta.dim;
        }
        for (user, rec) in &delta.records {
            match out.records.get(user) {
                Some(old) if old.as_of > rec.as_of => {}
                _ => {
                    out.records.insert(*user, rec.clone());
                }
            }
        }
        Ok(out)
    }

    /// Users whose record was produced at or after `t`.
    pub fn updated_since(&self, t: i64) -> Vec<u64> {
        self.records
            .iter()
            .filter(|(_, r)| r.as_of >= t)
            .map(|(u, _)| *u)
            .collect()
    }

    /// Fails if any record was produced by a different model.
    pub fn check_version(&self, expected: u32) -> Result<()> {
        match self.records.values().find(|r| r.model_version != expected) {
            Some(r) => Err(Error::VersionMismatch {
                expected,
                found: r.model_version,
            }),
            None => Ok(()),
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out);
        w.bytes(STORE_MAGIC)?;
        w.u32(STORE_VERSION)?;
        w.u32(self.dim as u32)?;
        w.u32(self.records.len() as u32)?;
        for (user, rec) in &self.records {
            w.u64(*user)?;
            w.i64(rec.as_of)?;
            w.u32(rec.model_version)?;
            w.f32s(&rec.embedding)?;
        }
        w.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.write_to(Vec::new()).expect("writing to memory")
    }

    pub fn read_from<R: Read>(input: R) -> Result<EmbeddingStore> {
        let mut r = Reader::new(input);
        r.magic(STORE_MAGIC)?;
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(r.error(format!("unsupported store version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as u64;
        let mut records = BTreeMap::new();
        let mut last = None;
        for i in 0..count {
            r.set_record(Some(i));
            let user = r.u64()?;
            if last.is_some_and(|l| l >= user) {
                return Err(r.error("user ids not strictly ascending"));
            }
            last = Some(user);
            let as_of = r.i64()?;
            let model_version = r.u32()?;
            let embedding = r.f32s(dim)?;
            records.insert(
                user,
                StoreRecord {
                    embedding,
                    as_of,
                    model_version,
                },
            );
        }
        r.set_record(None);
        r.expect_eof()?;
        Ok(EmbeddingStore { dim, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = self.write_to(BufWriter::new(File::create(path)?))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingStore> {
        EmbeddingStore::read_from(BufReader::new(File::open(path)?))
    }
}

/// Result of an inference run plus the users it touched.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOutcome {
    pub store: EmbeddingStore,
    pub updated: Vec<u64>,
    /// Active users with nothing encodable; their old record is kept.
    pub skipped: Vec<u64>,
}

/// Embedding of the user's most recent encodable actions, or `None` when
/// nothing survives encoding.
pub fn embed_user(model: &Model, corpus: &Corpus, actions: &[Action]) -> Result<Option<Vec<f32>>> {
    match encode_actions(actions, &model.config().encoder, corpus) {
        Ok(seq) => {
            let e = model.user_embeddings(&[&seq])?;
            Ok(Some(e.row(0).iter().map(|v| *v as f32).collect()))
        }
        Err(Error::EmptySequence) => Ok(None),
        Err(e) => Err(e),
    }
}

fn output_dim(model: &Model) -> usize {
    model.config().transformer.output_dim
}

/// Recomputes users with an action in `[day_boundary - 1d, day_boundary)`
/// from everything before the boundary, then merges over `prev`.
pub fn incremental_infer(
    model: &Model,
    corpus: &Corpus,
    prev: &EmbeddingStore,
    timelines: &[UserTimeline],
    day_boundary: i64,
) -> Result<InferOutcome> {
    let version = model.version();
    prev.check_version(version)?;
    if !prev.is_empty() && prev.dim != output_dim(model) {
        return Err(Error::shape(format!("store dim {} vs model {}", prev.dim, output_dim(model))));
    }
    let mut delta = EmbeddingStore::new(output_dim(model));
    let mut updated = Vec::new();
    let mut skipped = Vec::new();
    for tl in timelines {
        let end = tl.start_at(day_boundary);
        let active = tl.start_at(day_boundary - SECONDS_PER_DAY) < end;
        if !active {
            continue;
        }
        match embed_user(model, corpus, &tl.actions[..end])? {
            Some(embedding) => {
                delta.records.insert(
                    tl.user_id,
                    StoreRecord {
                        embedding,
                        as_of: day_boundary,
                        model_version: version,
                    },
                );
                updated.push(tl.user_id);
            }
            None => skipped.push(tl.user_id),
        }
    }
    updated.sort_unstable();
    skipped.sort_unstable();
    Ok(InferOutcome {
        store: prev.merge(&delta)?,
        updated,
        skipped,
    })
}

/// From-scratch equivalent of running `incremental_infer` for every day
/// boundary `first, first + 1d, ..., last` starting from an empty store.
pub fn full_infer(
    model: &Model,
    corpus: &Corpus,
    timelines: &[UserTimeline],
    first_boundary: i64,
    last_boundary: i64,
) -> Result<InferOutcome> {
    let day = SECONDS_PER_DAY;
    if last_boundary < first_boundary || (last_boundary - first_boundary) % day != 0 {
        return Err(Error::Precondition(
            "last boundary must be a whole number of days after the first".into(),
        ));
    }
    let version = model.version();
    let mut store = EmbeddingStore::new(output_dim(model));
    let mut updated = Vec::new();
    let mut skipped = Vec::new();
    for tl in timelines {
        let end = tl.start_at(last_boundary);
        if end == 0 || tl.actions[end - 1].timestamp < first_boundary - day {
            continue;
        }
        // latest boundary whose preceding day contains the last action
        let ts = tl.actions[end - 1].timestamp;
        let b = first_boundary + ((ts - first_boundary).div_euclid(day) + 1) * day;
        let end = tl.start_at(b);
        // encodability only grows with more actions, so earlier days fail too
        match embed_user(model, corpus, &tl.actions[..end])? {
            Some(embedding) => {
                store.records.insert(
                    tl.user_id,
                    StoreRecord {
                        embedding,
                        as_of: b,
                        model_version: version,
                    },
                );
                updated.push(tl.user_id);
            }
            None => skipped.push(tl.user_id),
        }
    }
    updated.sort_unstable();
    skipped.sort_unstable();
    Ok(InferOutcome {
        store,
        updated,
        skipped,
    })
}

/// Replaces the records of `users` with a from-scratch recomputation over
/// the pipeline's day range. Used to recover from corrupted inputs.
pub fn recompute_users(
    model: &Model,
    corpus: &Corpus,
    store: &EmbeddingStore,
    timelines: &[UserTimeline],
    users: &[u64],
    first_boundary: i64,
    last_boundary: i64,
) -> Result<InferOutcome> {
    let wanted: HashSet<u64> = users.iter().copied().collect();
    let subset: Vec<UserTimeline> = timelines
        .iter()
        .filter(|t| wanted.contains(&t.user_id))
        .cloned()
        .collect();
    let fresh = full_infer(model, corpus, &subset, first_boundary, last_boundary)?;
    let mut out = store.clone();
    if out.is_empty() {
        out.dim = fresh.store.dim;
    }
    for u in &wanted {
        out.records.remove(u);
    }
    out.records.extend(fresh.store.records);
    Ok(InferOutcome {
        store: out,
        updated: fresh.updated,
        skipped: fresh.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, synth_timelines, CorpusConfig, EPOCH_START};
    use crate::encoding::EncoderConfig;
    use crate::model::{ModelConfig, TransformerConfig};

    fn setup() -> (Model, Corpus, Vec<UserTimeline>) {
        let cc = CorpusConfig {
            n_pins: 200,
            n_users: 30,
            n_interests: 5,
            d_pin: 8,
            timeline_span_days: 40,
            ..CorpusConfig::default()
        };
        let corpus = synth_corpus(&cc).unwrap();
        let timelines = synth_timelines(&cc, &corpus).unwrap();
        let mc = ModelConfig {
            d_pin: 8,
            encoder: EncoderConfig {
                max_len: 8,
                ..EncoderConfig::default()
            },
            transformer: TransformerConfig {
                layers: 1,
                hidden: 16,
                heads: 2,
                output_dim: 8,
                pin_hidden: 16,
                ..TransformerConfig::default()
            },
        };
        (Model::new(mc, 1).unwrap(), corpus, timelines)
    }

    fn record(v: f32, as_of: i64) -> StoreRecord {
        StoreRecord {
            embedding: vec![v, 0.0],
            as_of,
            model_version: 7,
        }
    }

    #[test]
    fn merge_falls_back_and_is_idempotent() {
        let mut a = EmbeddingStore::new(2);
        a.records.insert(1, record(1.0, 10));
        a.records.insert(2, record(2.0, 10));
        let mut d = EmbeddingStore::new(2);
        d.records.insert(2, record(3.0, 20));
        d.records.insert(3, record(4.0, 20));
        let once = a.merge(&d).unwrap();
        assert_eq!(once.merge(&d).unwrap(), once);
        assert_eq!(once.get(1), a.get(1));
        assert_eq!(once.get(2).unwrap().as_of, 20);
        assert_eq!(once.len(), 3);
        // an older delta never rolls a record back
        let mut stale = EmbeddingStore::new(2);
        stale.records.insert(2, record(9.0, 5));
        assert_eq!(once.merge(&stale).unwrap(), once);
    }

    #[test]
    fn store_round_trip_and_corruption() {
        let mut a = EmbeddingStore::new(2);
        a.records.insert(4, record(0.5, -3));
        a.records.insert(9, record(-0.5, 8));
        let bytes = a.to_bytes();
        assert_eq!(EmbeddingStore::read_from(&bytes[..]).unwrap(), a);
        assert_eq!(bytes.len(), 16 + 2 * (8 + 8 + 4 + 8));
        let err = EmbeddingStore::read_from(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Decode { record: Some(1), .. }), "{err}");
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let (model, corpus, timelines) = setup();
        let mut prev = EmbeddingStore::new(8);
        prev.records.insert(0, StoreRecord {
            embedding: vec![0.0; 8],
            as_of: 0,
            model_version: model.version().wrapping_add(1),
        });
        let err = incremental_infer(&model, &corpus, &prev, &timelines, EPOCH_START).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { .. }));
    }

    #[test]
    fn quiet_day_leaves_the_store_alone() {
        let (model, corpus, timelines) = setup();
        let b = EPOCH_START + 30 * SECONDS_PER_DAY;
        let prev = full_infer(&model, &corpus, &timelines, b, b).unwrap().store;
        let far = EPOCH_START + 400 * SECONDS_PER_DAY;
        let out = incremental_infer(&model, &corpus, &prev, &timelines, far).unwrap();
        assert!(out.updated.is_empty());
        assert_eq!(out.store.to_bytes(), prev.to_bytes());
    }

    #[test]
    fn incremental_days_equal_full_inference() {
        let (model, corpus, timelines) = setup();
        let first = EPOCH_START + 20 * SECONDS_PER_DAY;
        let mut store = EmbeddingStore::new(8);
        for k in 0..10 {
            let b = first + k * SECONDS_PER_DAY;
            let before = store.clone();
            let out = incremental_infer(&model, &corpus, &store, &timelines, b).unwrap();
            for (u, r) in &before.records {
                if !out.updated.contains(u) {
                    assert_eq!(out.store.get(*u), Some(r));
                } else {
                    assert_eq!(out.store.get(*u).unwrap().as_of, b);
                }
            }
            store = out.store;
        }
        let full = full_infer(&model, &corpus, &timelines, first, first + 9 * SECONDS_PER_DAY).unwrap();
        assert!(!store.is_empty());
        assert_eq!(store.to_bytes(), full.store.to_bytes());
        for r in store.records.values() {
            let n: f64 = r.embedding.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn unencodable_active_user_is_skipped_and_kept() {
        let (model, corpus, mut timelines) = setup();
        let b = EPOCH_START + 30 * SECONDS_PER_DAY;
        let prev = full_infer(&model, &corpus, &timelines, b, b).unwrap().store;
        let user = timelines[0].user_id;
        timelines[0].actions = vec![Action {
            pin_id: 1 << 40,
            timestamp: b + 10,
            action_type: crate::corpus::ActionType::Repin,
            surface: crate::corpus::Surface::Homefeed,
            duration: 0.0,
        }];
        let out = incremental_infer(&model, &corpus, &prev, &timelines[..1], b + SECONDS_PER_DAY).unwrap();
        assert_eq!(out.skipped, vec![user]);
        assert_eq!(out.store.get(user), prev.get(user));
    }
}
