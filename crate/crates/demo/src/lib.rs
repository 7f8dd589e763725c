//! Browser bindings for a few self-contained pieces of `seqrec`: the time
//! features fed to the user tower, count-min sketch log-probabilities used to
//! correct in-batch negatives, and HNSW recall against exact search.
//!
//! Every export returns a JSON string; failures come back as
//! `{"error": "..."}` so the page has a single code path.

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use seqrec::corpus::{synth_corpus, CorpusConfig};
use seqrec::encoding::{default_absolute_periods, encode_time};
use seqrec::eval::exact_search;
use seqrec::loss::CountMinSketch;
use seqrec::rng::{self, tag};
use seqrec::serve::{HnswConfig, HnswIndex};
use seqrec::tensor::Matrix;

pub const MAX_INSERTS: u32 = 1_000_000;
pub const MAX_PINS: u32 = 20_000;

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn period_label(secs: f64) -> String {
    const DAY: f64 = 86_400.0;
    if secs >= DAY {
        format!("{}d", secs / DAY)
    } else if secs >= 3600.0 {
        format!("{}h", secs / 3600.0)
    } else {
        format!("{}m", secs / 60.0)
    }
}

/// Cosine and sine per default absolute period for a time of `seconds`,
/// with zero phase, plus `log(1 + t)`.
#[wasm_bindgen]
pub fn time_features(seconds: f64) -> String {
    respond((|| {
        let periods = default_absolute_periods();
        let phase = vec![0.0; 2 * periods.len()];
        let f = encode_time(seconds, &periods, &phase).map_err(|e| e.to_string())?;
        let rows: Vec<Value> = periods
            .iter()
            .enumerate()
            .map(|(i, p)| json!({ "period": period_label(*p), "cos": f[2 * i], "sin": f[2 * i + 1] }))
            .collect();
        Ok(json!({ "seconds": seconds, "periods": rows, "log1p": f[f.len() - 1] }))
    })())
}

/// Streams `inserts` Zipf(`exponent`) draws over `items` ids into a
/// `width x depth` sketch and compares estimates with exact counts for the
/// `top` most frequent ids.
#[wasm_bindgen]
pub fn sketch_stream(width: u32, depth: u32, items: u32, exponent: f64, inserts: u32, top: u32, seed: u64) -> String {
    respond((|| {
        if width == 0 || depth == 0 || items == 0 {
            return Err("width, depth and items must be positive".to_string());
        }
        if inserts == 0 || inserts > MAX_INSERTS {
            return Err(format!("inserts must be in 1..={MAX_INSERTS}"));
        }
        let zipf = Zipf::new(items as f64, exponent).map_err(|e| e.to_string())?;
        let mut rng = rng::stream(seed, &[tag::CMS]);
        let mut sketch = CountMinSketch::new(width as usize, depth as usize, seed);
        let mut truth = vec![0u64; items as usize];
        for _ in 0..inserts {
            let id = zipf.sample(&mut rng) as u64 - 1;
            truth[id as usize] += 1;
            sketch.update(id);
        }
        let total = sketch.total() as f64;
        let mut over = 0u64;
        let mut exact = 0usize;
        for (id, t) in truth.iter().enumerate() {
            let e = sketch.estimate(id as u64);
            over = over.max(e - t);
            exact += (e == *t) as usize;
        }
        let mut order: Vec<usize> = (0..truth.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(truth[i]), i));
        let rows: Vec<Value> = order
            .iter()
            .take(top as usize)
            .map(|&i| {
                let e = sketch.estimate(i as u64);
                json!({
                    "id": i,
                    "count": truth[i],
                    "estimate": e,
                    "log_q": (e as f64 / total).ln(),
                    "true_log_q": if truth[i] > 0 { Some((truth[i] as f64 / total).ln()) } else { None },
                })
            })
            .collect();
        Ok(json!({
            "total": sketch.total(),
            "max_overestimate": over,
            "exact_fraction": exact as f64 / truth.len() as f64,
            "rows": rows,
        }))
    })())
}

/// Builds an HNSW index over a synthetic corpus of `pins` embeddings and
/// reports recall@`k` against exact search for `queries` random unit vectors.
#[wasm_bindgen]
pub fn hnsw_recall(pins: u32, dim: u32, m_links: u32, ef_search: u32, k: u32, queries: u32, seed: u64) -> String {
    respond((|| {
        if pins == 0 || pins > MAX_PINS {
            return Err(format!("pins must be in 1..={MAX_PINS}"));
        }
        if k == 0 || queries == 0 || dim == 0 {
            return Err("dim, k and queries must be positive".to_string());
        }
        let cfg = CorpusConfig {
            n_pins: pins as usize,
            n_users: 1,
            n_interests: 50.min(pins as usize),
            d_pin: dim as usize,
            seed,
            ..CorpusConfig::default()
        };
        let corpus = synth_corpus(&cfg).map_err(|e| e.to_string())?;
        let ids: Vec<u64> = corpus.pins.iter().map(|p| p.id).collect();
        let rows: Vec<Vec<f64>> = corpus
            .pins
            .iter()
            .map(|p| p.embedding.iter().map(|x| *x as f64).collect())
            .collect();
        let emb = Matrix::from_rows(&rows);
        let config = HnswConfig {
            m_links: m_links as usize,
            ef_construction: 100,
            ef_search: ef_search as usize,
            seed,
        };
        let index = HnswIndex::build(&ids, &emb, 0, config).map_err(|e| e.to_string())?;
        let exact_vectors = index.vectors();
        let mut rng = rng::stream(seed, &[tag::SAMPLE]);
        let k = k as usize;
        let mut hits = 0usize;
        let mut expected = 0usize;
        for _ in 0..queries {
            let mut q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            seqrec::tensor::normalize_in_place(&mut q);
            let truth: Vec<u64> = exact_search(index.pin_ids(), &exact_vectors, &q, k)
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            let got = index.query(&q, k).map_err(|e| e.to_string())?;
            hits += got.iter().filter(|(id, _)| truth.contains(id)).count();
            expected += truth.len();
        }
        let levels = (0..index.len()).map(|n| index.level_of(n)).max().unwrap_or(0);
        Ok(json!({
            "pins": index.len(),
            "levels": levels + 1,
            "recall": hits as f64 / expected as f64,
            "queries": queries,
            "k": k,
        }))
    })())
}
