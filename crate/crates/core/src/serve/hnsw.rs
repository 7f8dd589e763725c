use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::StoreRecord;
use crate::codec::{Reader, Writer};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::{embed_corpus, exact_search};
use crate::model::Model;
use crate::rng::{self, tag};
use crate::tensor::Matrix;

const INDEX_MAGIC: &[u8; 4] = b"SQH1";
const INDEX_VERSION: u32 = 1;
const MAX_LEVEL: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnswConfig {
    pub m_links: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        HnswConfig {
            m_links: 16,
            ef_construction: 200,
            ef_search: 100,
            seed: 0,
        }
    }
}

impl HnswConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_links < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::config("m_links must be >= 2 and ef values positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    d: f64,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        // node order equals pin id order
        self.d.total_cmp(&o.d).then(self.node.cmp(&o.node))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Layered proximity graph over pin embeddings (Euclidean distance).
#[derive(Clone, Debug, PartialEq)]
pub struct HnswIndex {
    pub config: HnswConfig,
    pub model_version: u32,
    dim: usize,
    /// Ascending.
    pin_ids: Vec<u64>,
    /// Row-major, f32-representable values.
    vectors: Vec<f64>,
    /// `links[node][layer]`
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

struct Visited {
    stamp: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Visited {
        Visited {
            stamp: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch += 1;
        if self.epoch == u32::MAX {
            self.stamp.fill(0);
            self.epoch = 1;
        }
    }

    /// True if newly visited.
    fn visit(&mut self, i: u32) -> bool {
        let s = &mut self.stamp[i as usize];
        if *s == self.epoch {
            false
        } else {
            *s = self.epoch;
            true
        }
    }
}

impl HnswIndex {
    pub fn len(&self) -> usize {
        self.pin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pin_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pin_ids(&self) -> &[u64] {
        &self.pin_ids
    }

    /// Stored vectors as a matrix, one row per pin in id order.
    pub fn vectors(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.vectors.clone())
    }

    pub fn level_of(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.config.m_links
        } else {
            self.config.m_links
        }
    }

    fn vec(&self, i: u32) -> &[f64] {
        &self.vectors[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    fn dist(&self, q: &[f64], i: u32) -> f64 {
        q.iter().zip(self.vec(i)).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Builds the graph over `embeddings` (one row per id). Values are
    /// rounded to f32 so a saved index reloads identically.
    pub fn build(ids: &[u64], embeddings: &Matrix, model_version: u32, config: HnswConfig) -> Result<HnswIndex> {
        config.validate()?;
        if ids.len() != embeddings.rows() {
            return Err(Error::shape(format!("{} ids for {} rows", ids.len(), embeddings.rows())));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::Precondition("duplicate pin id".into()));
        }
        let dim = embeddings.cols();
        let mut vectors = Vec::with_capacity(ids.len() * dim);
        for &i in &order {
            vectors.extend(embeddings.row(i).iter().map(|v| *v as f32 as f64));
        }
        let mut index = HnswIndex {
            config,
            model_version,
            dim,
            pin_ids: order.iter().map(|&i| ids[i]).collect(),
            vectors,
            links: Vec::with_capacity(ids.len()),
            entry: None,
        };
        let mut rng = rng::stream(index.config.seed, &[tag::HNSW]);
        let ml = 1.0 / (index.config.m_links as f64).ln();
        let mut visited = Visited::new(ids.len());
        for i in 0..ids.len() {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL);
            index.insert(i as u32, level, &mut visited);
        }
        index.repair_layer0(&mut visited);
        Ok(index)
    }

    fn search_layer(&self, q: &[f64], entries: &[Cand], ef: usize, layer: usize, visited: &mut Visited) -> Vec<Cand> {
        visited.reset();
        let mut cands: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for e in entries {
            if visited.visit(e.node) {
                cands.push(Reverse(*e));
                best.push(*e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = cands.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            for &n in &self.links[c.node as usize][layer] {
                if !visited.visit(n) {
                    continue;
                }
                let cand = Cand { d: self.dist(q, n), node: n };
                if best.len() < ef || cand < *best.peek().expect("non-empty") {
                    cands.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Diversity heuristic, topped up with the closest pruned candidates.
    fn select(&self, sorted: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let q = self.vec(c.node);
            if kept.iter().all(|k| self.dist(q, k.node) > c.d) {
                kept.push(*c);
            } else {
                pruned.push(*c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|c| c.node).collect()
    }

    fn insert(&mut self, i: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(i);
            return;
        };
        let q: Vec<f64> = self.vec(i).to_vec();
        let top = self.level_of(entry as usize);
        let mut eps = vec![Cand { d: self.dist(&q, entry), node: entry }];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(&q, &eps, 1, layer, visited);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.config.ef_construction, layer, visited);
            let neighbors = self.select(&found, self.config.m_links);
            for &n in &neighbors {
                self.links[n as usize][layer].push(i);
                if self.links[n as usize][layer].len() > self.cap(layer) {
                    self.shrink(n, layer);
                }
            }
            self.links[i as usize][layer] = neighbors;
            eps = found;
        }
        if level > top {
            self.entry = Some(i);
        }
    }

    fn shrink(&mut self, n: u32, layer: usize) {
        let base: Vec<f64> = self.vec(n).to_vec();
        let mut cands: Vec<Cand> = self.links[n as usize][layer]
            .iter()
            .map(|&o| Cand { d: self.dist(&base, o), node: o })
            .collect();
        cands.sort();
        self.links[n as usize][layer] = self.select(&cands, self.cap(layer));
    }

    fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let Some(e) = self.entry else { return seen };
        let mut queue = VecDeque::from([e]);
        seen[e as usize] = true;
        while let Some(c) = queue.pop_front() {
            for &n in &self.links[c as usize][0] {
                if !seen[n as usize] {
                    seen[n as usize] = true;
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    /// Links each unreachable node from its nearest reachable node that
    /// still has room at layer 0.
    fn repair_layer0(&mut self, visited: &mut Visited) {
        loop {
            let seen = self.reachable();
            let Some(lost) = seen.iter().position(|s| !s) else { return };
            let q: Vec<f64> = self.vec(lost as u32).to_vec();
            let entry = self.entry.expect("non-empty graph");
            let found = self.search_layer(&q, &[Cand { d: self.dist(&q, entry), node: entry }], self.config.ef_construction, 0, visited);
            let cap = self.cap(0);
            let host = found
                .iter()
                .map(|c| c.node)
                .find(|&n| seen[n as usize] && self.links[n as usize][0].len() < cap)
                .or_else(|| {
                    let mut all: Vec<Cand> = (0..self.len() as u32)
                        .filter(|&n| seen[n as usize] && self.links[n as usize][0].len() < cap)
                        .map(|n| Cand { d: self.dist(&q, n), node: n })
                        .collect();
                    all.sort();
                    all.first().map(|c| c.node)
                });
            match host {
                Some(h) => self.links[h as usize][0].push(lost as u32),
                None => {
                    // every reachable node is full: displace the host's farthest link
                    let h = found.iter().map(|c| c.node).find(|&n| seen[n as usize]).unwrap_or(entry);
                    let list = &mut self.links[h as usize][0];
                    list.pop();
                    list.push(lost as u32);
                }
            }
        }
    }

    /// True if every node is reachable from the entry point at layer 0 and
    /// no list exceeds its cap.
    pub fn check_invariants(&self) -> bool {
        let caps_ok = self
            .links
            .iter()
            .all(|layers| layers.iter().enumerate().all(|(l, v)| v.len() <= self.cap(l)));
        caps_ok && self.reachable().iter().all(|s| *s)
    }

    /// Approximate top-`k` as `(pin_id, distance)` ascending, ties by pin id.
    /// `k` at or above the index size returns every pin.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
        if q.len() != self.dim {
            return Err(Error::shape(format!("query dim {} vs index {}", q.len(), self.dim)));
        }
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        if k >= self.len() {
            return Ok(exact_search(&self.pin_ids, &self.vectors(), q, k));
        }
        let entry = self.entry.expect("non-empty index");
        let mut visited = Visited::new(self.len());
        let mut eps = vec![Cand { d: self.dist(q, entry), node: entry }];
        for layer in (1..=self.level_of(entry as usize)).rev() {
            eps = self.search_layer(q, &eps, 1, layer, &mut visited);
        }
        let found = self.search_layer(q, &eps, self.config.ef_search.max(k), 0, &mut visited);
        Ok(found
            .into_iter()
            .take(k)
            .map(|c| (self.pin_ids[c.node as usize], c.d.sqrt()))
            .collect())
    }

    /// Query with a stored user embedding; the record must come from the
    /// same model as the index.
    pub fn query_record(&self, record: &StoreRecord, k: usize) -> Result<Vec<(u64, f64)>> {
        if record.model_version != self.model_version {
            return Err(Error::VersionMismatch {
                expected: self.model_version,
                found: record.model_version,
            });
        }
        let q: Vec<f64> = record.embedding.iter().map(|v| *v as f64).collect();
        self.query(&q, k)
    }

    /// Embeds every corpus pin with the pin tower and builds the graph.
    pub fn build_for_model(model: &Model, corpus: &Corpus, config: HnswConfig) -> Result<HnswIndex> {
        let emb = embed_corpus(model, corpus)?;
        let ids: Vec<u64> = corpus.pins.iter().map(|p| p.id).collect();
        HnswIndex::build(&ids, &emb, model.version(), config)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out);
        w.bytes(INDEX_MAGIC)?;
        w.u32(INDEX_VERSION)?;
        w.u32(self.model_version)?;
        w.u32(self.dim as u32)?;
        w.u32(self.config.m_links as u32)?;
        w.u32(self.config.ef_construction as u32)?;
        w.u32(self.config.ef_search as u32)?;
        w.u64(self.config.seed)?;
        w.u32(self.len() as u32)?;
        w.u32(self.entry.unwrap_or(u32::MAX))?;
        for i in 0..self.len() {
            w.u64(self.pin_ids[i])?;
            for v in self.vec(i as u32) {
                w.f32(*v as f32)?;
            }
            w.u32(self.links[i].len() as u32)?;
            for layer in &self.links[i] {
                w.u32(layer.len() as u32)?;
                for n in layer {
                    w.u32(*n)?;
                }
            }
        }
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<HnswIndex> {
        let mut r = Reader::new(input);
        r.magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.error(format!("unsupported index version {version}")));
        }
        let model_version = r.u32()?;
        let dim = r.u32()? as usize;
        let config = HnswConfig {
            m_links: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
            seed: r.u64()?,
        };
        let n = r.u32()? as usize;
        let entry = match r.u32()? {
            u32::MAX => None,
            e if (e as usize) < n => Some(e),
            e => return Err(r.error(format!("entry point {e} out of range"))),
        };
        let mut pin_ids = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        let mut links = Vec::with_capacity(n);
        for i in 0..n {
            r.set_record(Some(i as u64));
            pin_ids.push(r.u64()?);
            vectors.extend(r.f32s(dim)?.into_iter().map(|v| v as f64));
            let layers = r.u32()? as usize;
            if layers == 0 || layers > MAX_LEVEL + 1 {
                return Err(r.error(format!("bad layer count {layers}")));
            }
            let mut node = Vec::with_capacity(layers);
            for _ in 0..layers {
                let c = r.u32()? as usize;
                if c > 2 * config.m_links {
                    return Err(r.error("neighbor list over capacity"));
                }
                let mut list = Vec::with_capacity(c);
                for _ in 0..c {
                    let v = r.u32()?;
                    if v as usize >= n {
                        return Err(r.error(format!("neighbor {v} out of range")));
                    }
                    list.push(v);
                }
                node.push(list);
            }
            links.push(node);
        }
        r.set_record(None);
        r.expect_eof()?;
        Ok(HnswIndex {
            config,
            model_version,
            dim,
            pin_ids,
            vectors,
            links,
            entry,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = self.write_to(BufWriter::new(File::create(path)?))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HnswIndex> {
        HnswIndex::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::normalize_in_place;

    fn random_unit(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = rng::stream(seed, &[]);
        let mut m = Matrix::zeros(n, d);
        for r in 0..n {
            for v in m.row_mut(r) {
                *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            }
            normalize_in_place(m.row_mut(r));
        }
        m
    }

    #[test]
    fn single_pin() {
        let emb = Matrix::from_rows(&[vec![0.6, 0.8]]);
        let idx = HnswIndex::build(&[42], &emb, 1, HnswConfig::default()).unwrap();
        assert!(idx.check_invariants());
        assert_eq!(idx.query(&[-1.0, 0.0], 1).unwrap()[0].0, 42);
        assert_eq!(idx.query(&[-1.0, 0.0], 5).unwrap().len(), 1);
    }

    #[test]
    fn empty_index_is_valid() {
        let idx = HnswIndex::build(&[], &Matrix::zeros(0, 3), 1, HnswConfig::default()).unwrap();
        assert!(idx.is_empty() && idx.check_invariants());
        let back = HnswIndex::read_from(&idx.write_to(Vec::new()).unwrap()[..]).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn deterministic_and_round_trips() {
        let emb = random_unit(500, 8, 1);
        let ids: Vec<u64> = (0..500).map(|i| 1000 - i).collect();
        let a = HnswIndex::build(&ids, &emb, 3, HnswConfig::default()).unwrap();
        let b = HnswIndex::build(&ids, &emb, 3, HnswConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.check_invariants());
        let bytes = a.write_to(Vec::new()).unwrap();
        assert_eq!(HnswIndex::read_from(&bytes[..]).unwrap(), a);
        let err = HnswIndex::read_from(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }));
    }

    #[test]
    fn stored_vector_ranks_first_and_full_k_is_a_permutation() {
        let emb = random_unit(300, 6, 2);
        let ids: Vec<u64> = (0..300).collect();
        let idx = HnswIndex::build(&ids, &emb, 0, HnswConfig::default()).unwrap();
        let v = idx.vectors();
        for r in [0, 17, 299] {
            assert_eq!(idx.query(v.row(r), 3).unwrap()[0].0, r as u64);
        }
        let mut all: Vec<u64> = idx.query(v.row(0), 300).unwrap().into_iter().map(|x| x.0).collect();
        all.sort_unstable();
        assert_eq!(all, ids);
    }

    #[test]
    fn results_sorted_with_id_ties() {
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let idx = HnswIndex::build(&[9, 3, 5, 1], &emb, 0, HnswConfig::default()).unwrap();
        let got = idx.query(&[1.0, 0.0], 2).unwrap();
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 9]);
    }

    #[test]
    fn mismatched_record_is_refused() {
        let emb = random_unit(10, 4, 3);
        let idx = HnswIndex::build(&(0..10).collect::<Vec<_>>(), &emb, 5, HnswConfig::default()).unwrap();
        let rec = StoreRecord {
            embedding: vec![1.0, 0.0, 0.0, 0.0],
            as_of: 0,
            model_version: 6,
        };
        assert!(matches!(idx.query_record(&rec, 3), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn recall_against_exact_search() {
        let n = 2000;
        let emb = random_unit(n, 16, 4);
        let ids: Vec<u64> = (0..n as u64).collect();
        let idx = HnswIndex::build(&ids, &emb, 0, HnswConfig::default()).unwrap();
        assert!(idx.check_invariants());
        let qs = random_unit(200, 16, 5);
        let v = idx.vectors();
        let mut hit = 0;
        for r in 0..qs.rows() {
            let truth: Vec<u64> = exact_search(&ids, &v, qs.row(r), 10).into_iter().map(|x| x.0).collect();
            let got = idx.query(qs.row(r), 10).unwrap();
            assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
            hit += got.iter().filter(|x| truth.contains(&x.0)).count();
        }
        let recall = hit as f64 / (10 * qs.rows()) as f64;
        assert!(recall >= 0.95, "{recall}");
    }
}
