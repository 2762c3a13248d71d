//! Embedding stores, exhaustive cosine retrieval and two-channel score fusion.
//!
//! Stored and query vectors are unit-norm, so a dot product is the cosine.
//! Rankings are by descending score with ties broken by ascending id.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imageops::GrayImage;
use crate::repvgg::RepVggNet;
use crate::simsiam::SimSiamModel;
use crate::supervised::embed_supervised;
use crate::tensor::{Checkpoint, Module};

/// Tolerance on `|v| = 1` for stored vectors.
pub const STORE_NORM_TOL: f64 = 1e-9;
/// Tolerance on `|q| = 1` for query vectors.
pub const QUERY_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Unsupervised,
    Supervised,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Unsupervised => "unsupervised",
            Source::Supervised => "supervised",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Source::Unsupervised),
            "supervised" => Ok(Source::Supervised),
            other => Err(Error::Store(format!("unknown source tag `{other}`"))),
        }
    }
}

/// Anything that maps an image to a unit vector.
pub trait Encoder {
    fn source(&self) -> Source;
    fn embed(&self, img: &GrayImage) -> Result<Vec<f64>>;
    /// Hex digest of the encoder's parameters.
    fn checksum(&self) -> String;
}

/// FNV-1a over the checkpoint serialization of a module's parameters.
pub fn module_checksum(m: &dyn Module) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in Checkpoint::from_module(m).to_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Encoder for SimSiamModel {
    fn source(&self) -> Source {
        Source::Unsupervised
    }

    fn embed(&self, img: &GrayImage) -> Result<Vec<f64>> {
        SimSiamModel::embed(self, img)
    }

    fn checksum(&self) -> String {
        module_checksum(self)
    }
}

impl Encoder for RepVggNet {
    fn source(&self) -> Source {
        Source::Supervised
    }

    fn embed(&self, img: &GrayImage) -> Result<Vec<f64>> {
        embed_supervised(self, img)
    }

    fn checksum(&self) -> String {
        module_checksum(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Option<usize>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    source: Source,
    encoder: Option<String>,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(Error::Store(format!("invalid id {id:?}")));
    }
    Ok(())
}

impl FeatureStore {
    pub fn new(dim: usize, source: Source, encoder: Option<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Store("dimension must be >= 1".into()));
        }
        if let Some(e) = &encoder {
            if e.is_empty() || e.contains(char::is_whitespace) {
                return Err(Error::Store(format!("invalid encoder checksum {e:?}")));
            }
        }
        Ok(Self {
            dim,
            source,
            encoder,
            records: Vec::new(),
            by_id: HashMap::new(),
        })
    }

    /// Appends a record, enforcing dimension, unit norm and id uniqueness.
    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        validate_id(&record.id)?;
        if record.vector.len() != self.dim {
            return Err(Error::shape(
                "dim",
                format!(
                    "record `{}` has {} components, store has {}",
                    record.id,
                    record.vector.len(),
                    self.dim
                ),
            ));
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Store(format!(
                "record `{}` has a non-finite component",
                record.id
            )));
        }
        let n = norm(&record.vector);
        if (n - 1.0).abs() > STORE_NORM_TOL {
            return Err(Error::Store(format!(
                "record `{}` has norm {n}, expected 1",
                record.id
            )));
        }
        if self.by_id.contains_key(&record.id) {
            return Err(Error::Store(format!("duplicate id `{}`", record.id)));
        }
        self.by_id.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn encoder(&self) -> Option<&str> {
        self.encoder.as_deref()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Fails unless `encoder` produced this store (when the store records a
    /// checksum) and has the right source.
    pub fn check_encoder(&self, encoder: &dyn Encoder) -> Result<()> {
        if encoder.source() != self.source {
            return Err(Error::Store(format!(
                "store holds {} embeddings but the encoder is {}",
                self.source,
                encoder.source()
            )));
        }
        if let Some(expected) = &self.encoder {
            let got = encoder.checksum();
            if &got != expected {
                return Err(Error::Store(format!(
                    "encoder checksum {got} does not match store ({expected})"
                )));
            }
        }
        Ok(())
    }
}

/// An image to be indexed.
#[derive(Debug, Clone, Copy)]
pub struct StoreItem<'a> {
    pub id: &'a str,
    pub label: Option<usize>,
    pub image: &'a GrayImage,
}

/// Embeds every item in input order. `dim` is the declared dimension, used
/// as-is for an empty input.
pub fn build_store(
    items: &[StoreItem<'_>],
    encoder: &dyn Encoder,
    source: Source,
    dim: usize,
) -> Result<FeatureStore> {
    if encoder.source() != source {
        return Err(Error::Store(format!(
            "a {} encoder cannot build a {source} store",
            encoder.source()
        )));
    }
    let mut store = FeatureStore::new(dim, source, Some(encoder.checksum()))?;
    for item in items {
        let vector = encoder.embed(item.image)?;
        if vector.len() != dim {
            return Err(Error::shape(
                "dim",
                format!(
                    "image `{}` embedded to {} components, expected {dim}",
                    item.id,
                    vector.len()
                ),
            ));
        }
        store.push(EmbeddingRecord {
            id: item.id.to_string(),
            label: item.label,
            vector,
        })?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of unit vectors clipped to the cosine range, so rounding
/// never pushes a score past ±1. A zero score is always +0.0, so that the
/// id tie-break applies between orthogonal records.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0) + 0.0
}

fn check_query(store: &FeatureStore, q: &[f64], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    if q.len() != store.dim {
        return Err(Error::shape(
            "dim",
            format!("query has {} components, store has {}", q.len(), store.dim),
        ));
    }
    let n = norm(q);
    if !n.is_finite() || (n - 1.0).abs() > QUERY_NORM_TOL {
        return Err(Error::InvalidParam(format!("query norm {n} is not 1")));
    }
    Ok(())
}

fn ranking_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Top-`k` records by cosine with `q`.
pub fn query(store: &FeatureStore, q: &[f64], k: usize) -> Result<Vec<Hit>> {
    check_query(store, q, k)?;
    let mut hits: Vec<Hit> = store
        .records
        .iter()
        .map(|r| Hit {
            id: r.id.clone(),
            score: cosine(q, &r.vector),
        })
        .collect();
    hits.sort_by(|a, b| ranking_order((a.score, &a.id), (b.score, &b.id)));
    hits.truncate(k);
    Ok(hits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    w_unsup: f64,
    w_sup: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w_unsup: 0.5,
            w_sup: 0.5,
        }
    }
}

impl FusionWeights {
    pub fn new(w_unsup: f64, w_sup: f64) -> Result<Self> {
        if !(w_unsup >= 0.0 && w_sup >= 0.0) || !w_unsup.is_finite() || !w_sup.is_finite() {
            return Err(Error::InvalidParam(format!(
                "fusion weights must be >= 0, got ({w_unsup}, {w_sup})"
            )));
        }
        if (w_unsup + w_sup - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!(
                "fusion weights must sum to 1, got {}",
                w_unsup + w_sup
            )));
        }
        Ok(Self { w_unsup, w_sup })
    }

    /// `(w, 1 − w)`.
    pub fn unsup(w_unsup: f64) -> Result<Self> {
        Self::new(w_unsup, 1.0 - w_unsup)
    }

    pub fn w_unsup(&self) -> f64 {
        self.w_unsup
    }

    pub fn w_sup(&self) -> f64 {
        self.w_sup
    }
}

/// `w_unsup·s_u + w_sup·s_s`, clipped into `[min, max]` of the inputs so the
/// convex-combination bound survives rounding.
pub fn fuse_scores(s_unsup: f64, s_sup: f64, w: FusionWeights) -> Result<f64> {
    for (name, s) in [("unsupervised", s_unsup), ("supervised", s_sup)] {
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::InvalidParam(format!(
                "{name} score {s} outside [-1, 1]"
            )));
        }
    }
    let fused = w.w_unsup * s_unsup + w.w_sup * s_sup;
    Ok(fused.clamp(s_unsup.min(s_sup), s_unsup.max(s_sup)) + 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedHit {
    pub id: String,
    pub score: f64,
    pub s_unsup: f64,
    pub s_sup: f64,
}

/// Fails with the symmetric difference when the stores index different ids.
pub fn check_same_ids(a: &FeatureStore, b: &FeatureStore) -> Result<()> {
    let ia: BTreeSet<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
    let ib: BTreeSet<&str> = b.records.iter().map(|r| r.id.as_str()).collect();
    let diff: Vec<&str> = ia.symmetric_difference(&ib).copied().collect();
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Store(format!(
            "stores index different ids; symmetric difference: {}",
            diff.join(", ")
        )))
    }
}

/// Ranks every id by fused score, given already-embedded queries.
pub fn fused_query(
    q_unsup: &[f64],
    q_sup: &[f64],
    store_u: &FeatureStore,
    store_s: &FeatureStore,
    w: FusionWeights,
    k: usize,
) -> Result<Vec<FusedHit>> {
    check_query(store_u, q_unsup, k)?;
    check_query(store_s, q_sup, k)?;
    check_same_ids(store_u, store_s)?;
    let mut hits = store_u
        .records
        .iter()
        .map(|r| {
            let s_unsup = cosine(q_unsup, &r.vector);
            let s_sup = cosine(q_sup, &store_s.get(&r.id).expect("id sets match").vector);
            Ok(FusedHit {
                id: r.id.clone(),
                score: fuse_scores(s_unsup, s_sup, w)?,
                s_unsup,
                s_sup,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| ranking_order((a.score, &a.id), (b.score, &b.id)));
    hits.truncate(k);
    Ok(hits)
}

/// Embeds `img` with both encoders (after checking each matches its store)
/// and runs [`fused_query`].
pub fn fused_query_image(
    img: &GrayImage,
    enc_u: &dyn Encoder,
    enc_s: &dyn Encoder,
    store_u: &FeatureStore,
    store_s: &FeatureStore,
    w: FusionWeights,
    k: usize,
) -> Result<Vec<FusedHit>> {
    store_u.check_encoder(enc_u)?;
    store_s.check_encoder(enc_s)?;
    fused_query(
        &enc_u.embed(img)?,
        &enc_s.embed(img)?,
        store_u,
        store_s,
        w,
        k,
    )
}

const STORE_MAGIC: &str = "GLYPHSTORE";

pub fn store_to_string(store: &FeatureStore) -> String {
    let mut out = format!("{STORE_MAGIC} v1 dim={} source={}", store.dim, store.source);
    if let Some(e) = &store.encoder {
        out.push_str(&format!(" encoder={e}"));
    }
    out.push('\n');
    for r in &store.records {
        out.push_str(&r.id);
        out.push('\t');
        match r.label {
            Some(l) => out.push_str(&l.to_string()),
            None => out.push('-'),
        }
        out.push('\t');
        let values: Vec<String> = r.vector.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&values.join(","));
        out.push('\n');
    }
    out
}

pub fn store_from_str(text: &str) -> Result<FeatureStore> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Store("empty store file".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(STORE_MAGIC) || fields.next() != Some("v1") {
        return Err(Error::Store(format!("bad header {header:?}")));
    }
    let (mut dim, mut source, mut encoder) = (None, None, None);
    for f in fields {
        match f.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::Store(format!("bad dim `{v}`")))?,
                )
            }
            Some(("source", v)) => source = Some(v.parse::<Source>()?),
            Some(("encoder", v)) => encoder = Some(v.to_string()),
            _ => return Err(Error::Store(format!("unexpected header field `{f}`"))),
        }
    }
    let dim = dim.ok_or_else(|| Error::Store("header lacks dim".into()))?;
    let source = source.ok_or_else(|| Error::Store("header lacks source".into()))?;
    let mut store = FeatureStore::new(dim, source, encoder)?;
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let bad = |msg: String| Error::Store(format!("line {line_no}: {msg}"));
        let parts: Vec<&str> = line.split('\t').collect();
        let [id, label, values] = parts[..] else {
            return Err(bad(format!(
                "expected 3 tab-separated fields, found {}",
                parts.len()
            )));
        };
        let label = match label {
            "-" => None,
            l => Some(l.parse().map_err(|_| bad(format!("bad label `{l}`")))?),
        };
        let vector = values
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("bad value `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        store
            .push(EmbeddingRecord {
                id: id.to_string(),
                label,
                vector,
            })
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store_to_string(store)).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    store_from_str(&text)
}
