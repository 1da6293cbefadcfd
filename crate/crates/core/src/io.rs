//! Dataset loaders and the binary targets and checkpoint formats.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, LabelMap, NormStats};
use crate::diff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::knn::NeighborTargets;
use crate::models::ModelConfig;
use crate::train::{Checkpoint, CHECKPOINT_VERSION};

pub const TARGETS_MAGIC: &[u8; 5] = b"KNNT1";
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"KNNSEQ1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Libsvm,
}

impl Format {
    /// `.csv` is CSV; anything else is read as libsvm.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Libsvm,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "libsvm" | "svmlight" => Ok(Format::Libsvm),
            _ => Err(Error::Usage(format!("unknown dataset format {s}; expected csv or libsvm"))),
        }
    }
}

/// Parsed rows before label remapping.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub features: Vec<f64>,
    pub dim: usize,
    pub raw_labels: Vec<i64>,
    /// Per-row line numbers, for error messages raised after parsing.
    pub lines: Vec<usize>,
    pub origins: Option<Vec<String>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.raw_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_labels.is_empty()
    }

    /// Remaps labels to `0..C` in ascending order of the original values.
    pub fn into_dataset(self) -> Result<Dataset> {
        let map = LabelMap::from_labels(&self.raw_labels);
        self.into_dataset_with(&map, "")
    }

    /// Remaps labels through an existing mapping; unseen labels are errors.
    pub fn into_dataset_with(self, map: &LabelMap, path: &str) -> Result<Dataset> {
        let labels = self
            .raw_labels
            .iter()
            .zip(&self.lines)
            .map(|(&raw, &line)| {
                map.encode(raw).ok_or_else(|| Error::Parse {
                    path: path.to_string(),
                    line,
                    msg: format!("label {raw} is not one of the known classes {:?}", map.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.features, self.dim, labels, map.clone())
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_label(path: &Path, line: usize, s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        _ => Err(parse_err(path, line, format!("label {s:?} is not an integer"))),
    }
}

fn parse_value(path: &Path, line: usize, column: &str, s: &str) -> Result<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, line, format!("column {column}: {s:?} is not a finite number"))),
    }
}

/// Reads a CSV file with a header row, an integer `label` column, an optional
/// `origin` column and numeric feature columns.
pub fn read_csv(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(path, 1, "empty file"));
    }
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| parse_err(path, 1, "header has no `label` column"))?;
    let origin_col = headers.iter().position(|h| h == "origin");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != origin_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(parse_err(path, 1, "header has no feature columns"));
    }
    let mut table = Table {
        features: Vec::new(),
        dim: feature_cols.len(),
        raw_labels: Vec::new(),
        lines: Vec::new(),
        origins: origin_col.map(|_| Vec::new()),
    };
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        table.raw_labels.push(parse_label(path, line, &record[label_col])?);
        for &c in &feature_cols {
            table.features.push(parse_value(path, line, &headers[c], &record[c])?);
        }
        if let (Some(col), Some(origins)) = (origin_col, table.origins.as_mut()) {
            origins.push(record[col].to_string());
        }
        table.lines.push(line);
    }
    if table.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(table)
}

/// Reads sparse `label index:value ...` lines with 1-based indices. The
/// dimension is `dim` when given, else the largest index seen.
pub fn read_libsvm(path: &Path, dim: Option<usize>) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut raw_labels = Vec::new();
    let mut lines = Vec::new();
    let mut max_index = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = tokens.next().unwrap_or_default();
        raw_labels.push(parse_label(path, line, label)?);
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, line, format!("expected index:value, found {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .ok()
                .filter(|i| *i >= 1)
                .ok_or_else(|| parse_err(path, line, format!("feature index {idx:?} is not a positive integer")))?;
            if let Some(d) = dim.filter(|d| idx > *d) {
                return Err(parse_err(path, line, format!("feature index {idx} exceeds dimension {d}")));
            }
            max_index = max_index.max(idx);
            row.push((idx - 1, parse_value(path, line, &idx.to_string(), val)?));
        }
        rows.push(row);
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "empty file"));
    }
    let dim = dim.unwrap_or(max_index);
    if dim == 0 {
        return Err(parse_err(path, 1, "no feature values"));
    }
    let mut features = vec![0.0; rows.len() * dim];
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            features[r * dim + c] = v;
        }
    }
    Ok(Table {
        features,
        dim,
        raw_labels,
        lines,
        origins: None,
    })
}

pub fn read_table(path: &Path, format: Format, dim: Option<usize>) -> Result<Table> {
    match format {
        Format::Csv => read_csv(path),
        Format::Libsvm => read_libsvm(path, dim),
    }
}

/// Loads a dataset and remaps its labels to `0..C` in sorted order.
pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    read_table(path, format, None)?.into_dataset()
}

/// Loads a dataset whose labels and dimension must agree with `map` and `dim`.
pub fn load_dataset_with(path: &Path, format: Format, map: &LabelMap, dim: usize) -> Result<Dataset> {
    let table = read_table(path, format, Some(dim))?;
    if table.dim != dim {
        return Err(parse_err(path, 1, format!("expected {dim} features, found {}", table.dim)));
    }
    table.into_dataset_with(map, &path.display().to_string())
}

/// Writes rows with their original label values and optional origin tags.
pub fn write_csv(path: &Path, data: &Dataset, origins: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    if origins.is_some() {
        header.push("origin".into());
    }
    let csv_err = |e: csv::Error| Error::Format {
        what: "csv",
        msg: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.label_map().decode(data.label(i)).to_string());
        if let Some(o) = origins {
            rec.push(o[i].clone());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        what: "csv",
        msg: e.to_string(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn label_map(&mut self, map: &LabelMap) {
        self.u64(map.0.len());
        for &v in &map.0 {
            self.i64(v);
        }
    }

    fn norm(&mut self, norm: &NormStats) {
        self.u64(norm.dim());
        self.f64s(&norm.mean);
        self.f64s(&norm.std);
    }
}

struct Decoder<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(what: &'static str, buf: &'a [u8], magic: &[u8]) -> Result<Self> {
        if !buf.starts_with(magic) {
            return Err(Error::Format {
                what,
                msg: format!("missing magic {}", String::from_utf8_lossy(magic)),
            });
        }
        Ok(Decoder {
            what,
            buf,
            pos: magic.len(),
        })
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            what: self.what,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|end| *end <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!("truncated at byte {}", self.pos)),
        }
    }

    fn word(&mut self) -> Result<[u8; 8]> {
        Ok(self.take(8)?.try_into().expect("8-byte slice"))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.word()?);
        usize::try_from(v).or_else(|_| self.fail(format!("count {v} overflows")))
    }

    /// A count whose payload of `width` bytes each must still fit in the buffer.
    fn count(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(width) > self.buf.len() - self.pos {
            return self.fail(format!("count {n} exceeds the remaining bytes"));
        }
        Ok(n)
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.word()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).map_or(usize::MAX, |b| b))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).or_else(|_| self.fail("string is not UTF-8"))
    }

    fn label_map(&mut self) -> Result<LabelMap> {
        let c = self.count(8)?;
        Ok(LabelMap((0..c).map(|_| self.i64()).collect::<Result<_>>()?))
    }

    fn norm(&mut self) -> Result<NormStats> {
        let d = self.count(16)?;
        let mean = self.f64s(d)?;
        let std = self.f64s(d)?;
        Ok(NormStats { mean, std })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Neighbor targets with the label mapping and normalization they were built under.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetsFile {
    pub targets: NeighborTargets,
    pub label_map: LabelMap,
    pub norm: NormStats,
}

impl TargetsFile {
    /// Exact file size for the given header fields.
    pub fn byte_len(k: usize, d: usize, n: usize, classes: usize) -> usize {
        TARGETS_MAGIC.len() + 8 * 4 + 8 * classes + 16 * d + 8 * n * (2 * k + k * d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.targets;
        let (k, d, n) = (t.k(), t.dim(), t.len());
        let mut e = Encoder(Vec::with_capacity(Self::byte_len(k, d, n, self.label_map.classes())));
        e.0.extend_from_slice(TARGETS_MAGIC);
        e.u64(k);
        e.u64(d);
        e.u64(n);
        e.u64(self.label_map.classes());
        for &v in &self.label_map.0 {
            e.i64(v);
        }
        e.f64s(&self.norm.mean);
        e.f64s(&self.norm.std);
        for i in 0..n {
            for &l in t.labels_of(i) {
                e.u64(l);
            }
            e.f64s(t.vectors_of(i));
            e.f64s(t.distances_of(i));
        }
        e.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Decoder::new("targets", buf, TARGETS_MAGIC)?;
        let (k, d, n, c) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        if k == 0 || d == 0 {
            return r.fail(format!("header has K={k}, d={d}"));
        }
        let expected = [k, d, n, c]
            .iter()
            .try_fold(1usize, |acc, v| acc.checked_mul((*v).max(1)))
            .map(|_| Self::byte_len(k, d, n, c));
        if expected != Some(buf.len()) {
            return r.fail(format!("header K={k}, d={d}, N={n}, C={c} does not match file size {}", buf.len()));
        }
        let label_map = LabelMap((0..c).map(|_| r.i64()).collect::<Result<_>>()?);
        let norm = NormStats {
            mean: r.f64s(d)?,
            std: r.f64s(d)?,
        };
        let mut labels = Vec::with_capacity(n * k);
        let mut vectors = Vec::with_capacity(n * k * d);
        let mut distances = Vec::with_capacity(n * k);
        for i in 0..n {
            for _ in 0..k {
                let l = r.u64()?;
                if l >= c {
                    return r.fail(format!("sample {i}: class {l} outside 0..{c}"));
                }
                labels.push(l);
            }
            vectors.extend(r.f64s(k * d)?);
            distances.extend(r.f64s(k)?);
        }
        r.finish()?;
        Ok(TargetsFile {
            targets: NeighborTargets::from_parts(k, d, labels, vectors, distances)?,
            label_map,
            norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut e = Encoder(CHECKPOINT_MAGIC.to_vec());
    e.u64(ckpt.version as usize);
    e.str(ckpt.kind().tag());
    let config = serde_json::to_string(&ckpt.config).map_err(|err| Error::Format {
        what: "checkpoint",
        msg: err.to_string(),
    })?;
    e.str(&config);
    e.label_map(&ckpt.label_map);
    e.norm(&ckpt.norm);
    e.u64(ckpt.params.len());
    for (_, p) in ckpt.params.iter() {
        e.str(&p.name);
        e.u64(p.trainable as usize);
        e.u64(p.value.shape().len());
        for &s in p.value.shape() {
            e.u64(s);
        }
        e.f64s(p.value.data());
    }
    Ok(e.0)
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Decoder::new("checkpoint", buf, CHECKPOINT_MAGIC)?;
    let version = r.u64()?;
    if version != CHECKPOINT_VERSION as usize {
        return r.fail(format!("unsupported version {version}"));
    }
    let tag = r.str()?;
    let config: ModelConfig = serde_json::from_str(&r.str()?).or_else(|err| r.fail(err.to_string()))?;
    if config.kind.tag() != tag {
        return r.fail(format!("kind tag {tag} disagrees with config kind {}", config.kind));
    }
    let label_map = r.label_map()?;
    let norm = r.norm()?;
    let count = r.count(8)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let trainable = match r.u64()? {
            0 => false,
            1 => true,
            v => return r.fail(format!("parameter {name}: bad trainable flag {v}")),
        };
        let rank = r.count(8)?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let size = shape
            .iter()
            .try_fold(1usize, |a, s| a.checked_mul(*s))
            .map_or_else(|| r.fail(format!("parameter {name}: shape overflows")), Ok)?;
        let value = Tensor::new(shape, r.f64s(size)?)?;
        if trainable {
            params.add(&name, value)?;
        } else {
            params.add_state(&name, value)?;
        }
    }
    r.finish()?;
    let ckpt = Checkpoint {
        version: version as u32,
        config,
        label_map,
        norm,
        params,
    };
    ckpt.model()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
