//! Domain types and on-disk formats: voxel response series, word timelines,
//! and per-TR embedding series.
//!
//! The binary format is deliberately plain: a JSON manifest next to a raw
//! row-major little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::all_finite;

/// TR-major matrix of voxel responses with uniform acquisition times.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriSeries {
    data: Array2<f64>,
    tr_seconds: f64,
    t0: f64,
    voxel_ids: Vec<i64>,
}

impl FmriSeries {
    pub fn new(data: Array2<f64>, tr_seconds: f64, t0: f64, voxel_ids: Vec<i64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Validation("fMRI series must be at least 1 x 1".into()));
        }
        if !(tr_seconds > 0.0) {
            return Err(Error::Validation(format!("tr_seconds must be positive, got {tr_seconds}")));
        }
        if voxel_ids.len() != data.ncols() {
            return Err(Error::Shape(format!(
                "{} voxel ids for {} columns",
                voxel_ids.len(),
                data.ncols()
            )));
        }
        let mut seen = voxel_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("voxel ids must be unique".into()));
        }
        if !all_finite(&data) {
            return Err(Error::Validation("fMRI data contains non-finite values".into()));
        }
        Ok(Self {
            data,
            tr_seconds,
            t0,
            voxel_ids,
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn n_trs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.ncols()
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr_seconds
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn voxel_ids(&self) -> &[i64] {
        &self.voxel_ids
    }

    /// Acquisition time of row `i`: exactly `t0 + i * tr_seconds`.
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.tr_seconds
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_trs()).map(|i| self.time(i)).collect()
    }

    /// New series holding only the requested voxel ids, in the given order.
    pub fn select_voxels(&self, ids: &[i64]) -> Result<Self> {
        let mut cols = Vec::with_capacity(ids.len());
        for id in ids {
            let col = self
                .voxel_ids
                .iter()
                .position(|v| v == id)
                .ok_or_else(|| Error::Shape(format!("voxel id {id} not present in series")))?;
            cols.push(col);
        }
        let mut data = Array2::zeros((self.n_trs(), ids.len()));
        for (j, &col) in cols.iter().enumerate() {
            data.column_mut(j).assign(&self.data.column(col));
        }
        FmriSeries::new(data, self.tr_seconds, self.t0, ids.to_vec())
    }

    /// Contiguous TR range `[from, to)` as a new series; `t0` shifts with it.
    pub fn slice_trs(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.n_trs() {
            return Err(Error::Argument(format!(
                "invalid TR range {from}..{to} for {} TRs",
                self.n_trs()
            )));
        }
        FmriSeries::new(
            self.data.slice(s![from..to, ..]).to_owned(),
            self.tr_seconds,
            self.time(from),
            self.voxel_ids.clone(),
        )
    }
}

/// Ordered (token, time) pairs; tokens are lowercase and punctuation-free.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTimeline {
    entries: Vec<(String, f64)>,
}

/// Lowercases and removes punctuation characters; may return an empty string.
pub fn normalize_token(raw: &str) -> String {
    raw.trim()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(|c| c.to_lowercase())
        .filter(|c| !c.is_whitespace())
        .collect()
}

impl WordTimeline {
    /// Builds a timeline from already-normalized entries, checking invariants.
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        for (token, time) in &entries {
            if token.is_empty() {
                return Err(Error::Validation("empty token in timeline".into()));
            }
            if token.chars().any(|c| c.is_ascii_punctuation()) {
                return Err(Error::Validation(format!("token '{token}' contains punctuation")));
            }
            if !time.is_finite() {
                return Err(Error::Validation("non-finite word time".into()));
            }
        }
        if entries.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(Error::Validation("word times must be non-decreasing".into()));
        }
        Ok(Self { entries })
    }

    /// Normalizes raw (word, time) pairs: lowercase, strip punctuation, drop
    /// entries that become empty; then validates ordering on what is kept.
    pub fn from_raw<I: IntoIterator<Item = (String, f64)>>(raw: I) -> Result<Self> {
        let entries: Vec<(String, f64)> = raw
            .into_iter()
            .map(|(w, t)| (normalize_token(&w), t))
            .filter(|(w, _)| !w.is_empty())
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(w, _)| w.as_str())
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, t)| *t)
    }
}

/// Per-TR semantic vectors aligned to acquisition times.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeries {
    vectors: Array2<f64>,
    times: Vec<f64>,
    delayed: bool,
}

impl EmbeddingSeries {
    pub fn new(vectors: Array2<f64>, times: Vec<f64>, delayed: bool) -> Result<Self> {
        if vectors.nrows() != times.len() {
            return Err(Error::Shape(format!(
                "{} rows vs {} times",
                vectors.nrows(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("embedding times must be strictly increasing".into()));
        }
        if !all_finite(&vectors) {
            return Err(Error::Validation("embedding series contains non-finite values".into()));
        }
        Ok(Self {
            vectors,
            times,
            delayed,
        })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn delayed(&self) -> bool {
        self.delayed
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the row whose time is nearest to `t` (earlier row on ties).
    pub fn nearest_row(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &ti) in self.times.iter().enumerate() {
            let d = (ti - t).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.len() {
            return Err(Error::Argument(format!(
                "invalid row range {from}..{to} for {} rows",
                self.len()
            )));
        }
        EmbeddingSeries::new(
            self.vectors.slice(s![from..to, ..]).to_owned(),
            self.times[from..to].to_vec(),
            self.delayed,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FmriManifest {
    m: usize,
    v: usize,
    tr_seconds: f64,
    t0: f64,
    voxel_ids: Vec<i64>,
    blob: String,
}

fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "blob {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn write_f32_blob(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob)
}

/// Loads an fMRI series from a JSON manifest plus raw f32 blob.
pub fn load_fmri(manifest_path: &Path) -> Result<FmriSeries> {
    let raw = fs::read(manifest_path)?;
    let manifest: FmriManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("bad fMRI manifest: {e}")))?;
    let data = read_f32_blob(&blob_path(manifest_path, &manifest.blob), manifest.m * manifest.v)?;
    let data = Array2::from_shape_vec((manifest.m, manifest.v), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    FmriSeries::new(data, manifest.tr_seconds, manifest.t0, manifest.voxel_ids)
}

/// Writes `fmri.json`-style manifest at `manifest_path` and the f32 blob
/// alongside it (same stem, `.f32` extension).
pub fn save_fmri(series: &FmriSeries, manifest_path: &Path) -> Result<()> {
    if let Some(parent) = manifest_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let blob = manifest_path
        .with_extension("f32")
        .file_name()
        .unwrap()
        .to_string_lossy()
        .into_owned();
    let manifest = FmriManifest {
        m: series.n_trs(),
        v: series.n_voxels(),
        tr_seconds: series.tr_seconds(),
        t0: series.t0(),
        voxel_ids: series.voxel_ids().to_vec(),
        blob: blob.clone(),
    };
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    write_f32_blob(&blob_path(manifest_path, &blob), series.data())
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingManifest {
    m: usize,
    d: usize,
    tr_seconds: f64,
    t0: f64,
    delayed: bool,
    blob: String,
}

/// Loads an embedding series persisted on a uniform TR grid.
pub fn load_embeddings(manifest_path: &Path) -> Result<EmbeddingSeries> {
    let raw = fs::read(manifest_path)?;
    let manifest: EmbeddingManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("bad embedding manifest: {e}")))?;
    let data = read_f32_blob(&blob_path(manifest_path, &manifest.blob), manifest.m * manifest.d)?;
    let vectors = Array2::from_shape_vec((manifest.m, manifest.d), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    let times = (0..manifest.m)
        .map(|i| manifest.t0 + i as f64 * manifest.tr_seconds)
        .collect();
    EmbeddingSeries::new(vectors, times, manifest.delayed)
}

/// Persists an embedding series; requires a uniform time grid.
pub fn save_embeddings(series: &EmbeddingSeries, manifest_path: &Path) -> Result<()> {
    if let Some(parent) = manifest_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let times = series.times();
    if times.is_empty() {
        return Err(Error::Argument("cannot persist empty embedding series".into()));
    }
    let tr = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    for w in times.windows(2) {
        if ((w[1] - w[0]) - tr).abs() > 1e-9 {
            return Err(Error::Argument("embedding series is not on a uniform grid".into()));
        }
    }
    let blob = manifest_path
        .with_extension("f32")
        .file_name()
        .unwrap()
        .to_string_lossy()
        .into_owned();
    let manifest = EmbeddingManifest {
        m: series.len(),
        d: series.dim(),
        tr_seconds: tr,
        t0: times[0],
        delayed: series.delayed(),
        blob: blob.clone(),
    };
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    write_f32_blob(&blob_path(manifest_path, &blob), series.vectors())
}

#[derive(Debug, Serialize, Deserialize)]
struct TimelineLine {
    word: String,
    time: f64,
}

/// Loads a JSON-lines word timeline: one `{"word": ..., "time": ...}` per line.
pub fn load_timeline(path: &Path) -> Result<WordTimeline> {
    let text = fs::read_to_string(path)?;
    let mut raw = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TimelineLine = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        raw.push((parsed.word, parsed.time));
    }
    WordTimeline::from_raw(raw)
}

pub fn save_timeline(timeline: &WordTimeline, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for (word, time) in timeline.entries() {
        out.push_str(&serde_json::to_string(&TimelineLine {
            word: word.clone(),
            time: *time,
        })?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_manifest(dir: &Path, m: usize, v: usize, tr: f64, t0: f64, blob_len: usize) -> PathBuf {
        let ids: Vec<i64> = (0..v as i64).collect();
        let manifest = serde_json::json!({
            "m": m, "v": v, "tr_seconds": tr, "t0": t0,
            "voxel_ids": ids, "blob": "fmri.f32"
        });
        let path = dir.join("fmri.json");
        fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        let bytes: Vec<u8> = (0..blob_len).flat_map(|i| (i as f32 * 0.5).to_le_bytes()).collect();
        fs::write(dir.join("fmri.f32"), bytes).unwrap();
        path
    }

    #[test]
    fn load_fmri_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 3, 4, 2.0, 0.0, 12);
        let series = load_fmri(&path).unwrap();
        assert_eq!(series.data().dim(), (3, 4));
        assert_eq!(series.times(), vec![0.0, 2.0, 4.0]);
        // row 145 would sit at t0 + 145 * TR
        assert_eq!(series.t0() + 145.0 * series.tr_seconds(), 290.0);
    }

    #[test]
    fn load_fmri_wrong_blob_len_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 3, 4, 2.0, 0.0, 11);
        assert!(matches!(load_fmri(&path), Err(Error::Format(_))));
    }

    #[test]
    fn load_fmri_rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 1, 2, 2.0, 0.0, 2);
        let mut bytes = vec![];
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(dir.path().join("fmri.f32"), bytes).unwrap();
        assert!(matches!(load_fmri(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn fmri_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let series = FmriSeries::new(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.5]],
            2.0,
            1.0,
            vec![10, 20],
        )
        .unwrap();
        let path = dir.path().join("fmri.json");
        save_fmri(&series, &path).unwrap();
        let back = load_fmri(&path).unwrap();
        assert_eq!(series, back);
    }

    #[test]
    fn duplicate_voxel_ids_rejected() {
        let err = FmriSeries::new(array![[1.0, 2.0]], 2.0, 0.0, vec![1, 1]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn timeline_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(
            &path,
            "{\"word\":\"Hello,\",\"time\":1.0}\n{\"word\":\"...\",\"time\":2.0}\n{\"word\":\"World\",\"time\":3.0}\n",
        )
        .unwrap();
        let tl = load_timeline(&path).unwrap();
        assert_eq!(
            tl.entries(),
            &[("hello".to_string(), 1.0), ("world".to_string(), 3.0)]
        );
    }

    #[test]
    fn timeline_decreasing_times_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(
            &path,
            "{\"word\":\"a\",\"time\":1.0}\n{\"word\":\"b\",\"time\":0.5}\n",
        )
        .unwrap();
        assert!(matches!(load_timeline(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn timeline_malformed_json_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "{\"word\": \"a\", \"time\"").unwrap();
        assert!(matches!(load_timeline(&path), Err(Error::Format(_))));
    }

    #[test]
    fn timeline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tl = WordTimeline::new(vec![("abc".into(), 0.5), ("de".into(), 0.5), ("f".into(), 2.0)]).unwrap();
        let path = dir.path().join("t.jsonl");
        save_timeline(&tl, &path).unwrap();
        assert_eq!(load_timeline(&path).unwrap(), tl);
    }

    #[test]
    fn embeddings_round_trip_uniform_grid() {
        let dir = tempfile::tempdir().unwrap();
        let es = EmbeddingSeries::new(array![[1.0, 2.0], [3.0, 4.0]], vec![0.0, 2.0], false).unwrap();
        let path = dir.path().join("emb.json");
        save_embeddings(&es, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.times(), es.times());
        assert_eq!(back.vectors(), es.vectors());
        assert!(!back.delayed());
    }

    #[test]
    fn nearest_row_prefers_earlier_on_tie() {
        let es = EmbeddingSeries::new(array![[1.0], [2.0], [3.0]], vec![0.0, 2.0, 4.0], false).unwrap();
        assert_eq!(es.nearest_row(1.0), 0);
        assert_eq!(es.nearest_row(1.1), 1);
        assert_eq!(es.nearest_row(-5.0), 0);
        assert_eq!(es.nearest_row(9.0), 2);
    }
}
