//! The `EMOF` feature store.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "EMOF" | version | n | k | d_a | d_v | d_l | layer_ids[k] | manifest_len
//! manifest (UTF-8 TSV: sample_id, label_name_or_dash, split)
//! acoustic f32[n*k*d_a] | visual f32[n*d_v] | lexical f32[n*d_l]
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::binio::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::label::EmotionLabel;
use crate::numcore::Tensor2;

pub const STORE_MAGIC: &[u8; 4] = b"EMOF";
pub const STORE_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "sample_id\tlabel\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub id: String,
    pub label: Option<EmotionLabel>,
    pub split: Split,
}

/// One sample: its k-layer acoustic stack, visual and lexical vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: Option<EmotionLabel>,
    pub split: Split,
    /// `k` rows of `d_a` values.
    pub acoustic: Vec<Vec<f32>>,
    pub visual: Vec<f32>,
    pub lexical: Vec<f32>,
}

/// In-memory feature store. Blocks keep the on-disk `f32` values; batches are
/// widened to `f64` when handed to the models.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    k: usize,
    d_a: usize,
    d_v: usize,
    d_l: usize,
    layer_ids: Vec<u32>,
    samples: Vec<SampleMeta>,
    acoustic: Vec<f32>,
    visual: Vec<f32>,
    lexical: Vec<f32>,
}

impl FeatureStore {
    pub fn new(layer_ids: Vec<u32>, d_a: usize, d_v: usize, d_l: usize) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(Error::Config("acoustic stack needs at least one layer".into()));
        }
        for (name, d) in [("d_a", d_a), ("d_v", d_v), ("d_l", d_l)] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(Self {
            k: layer_ids.len(),
            d_a,
            d_v,
            d_l,
            layer_ids,
            samples: Vec::new(),
            acoustic: Vec::new(),
            visual: Vec::new(),
            lexical: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_l(&self) -> usize {
        self.d_l
    }

    pub fn layer_ids(&self) -> &[u32] {
        &self.layer_ids
    }

    pub fn samples(&self) -> &[SampleMeta] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &SampleMeta {
        &self.samples[i]
    }

    pub fn push(&mut self, rec: FeatureRecord) -> Result<()> {
        if rec.id.is_empty() || rec.id.contains(['\t', '\n', '\r']) {
            return Err(Error::Data(format!("invalid sample id {:?}", rec.id)));
        }
        if rec.acoustic.len() != self.k {
            return Err(Error::dim("push acoustic layers", self.k, rec.acoustic.len()));
        }
        if let Some(row) = rec.acoustic.iter().find(|r| r.len() != self.d_a) {
            return Err(Error::dim("push acoustic", self.d_a, row.len()));
        }
        if rec.visual.len() != self.d_v {
            return Err(Error::dim("push visual", self.d_v, rec.visual.len()));
        }
        if rec.lexical.len() != self.d_l {
            return Err(Error::dim("push lexical", self.d_l, rec.lexical.len()));
        }
        if rec.split == Split::Labeled && rec.label.is_none() {
            return Err(Error::Data(format!("labeled sample {} has no label", rec.id)));
        }
        if rec.split == Split::Unlabeled && rec.label.is_some() {
            return Err(Error::Data(format!("unlabeled sample {} carries a label", rec.id)));
        }
        let finite = rec
            .acoustic
            .iter()
            .flatten()
            .chain(&rec.visual)
            .chain(&rec.lexical)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Data(format!("sample {} has non-finite features", rec.id)));
        }
        for row in &rec.acoustic {
            self.acoustic.extend_from_slice(row);
        }
        self.visual.extend_from_slice(&rec.visual);
        self.lexical.extend_from_slice(&rec.lexical);
        self.samples.push(SampleMeta {
            id: rec.id,
            label: rec.label,
            split: rec.split,
        });
        Ok(())
    }

    pub fn acoustic_layer(&self, i: usize, layer: usize) -> &[f32] {
        let start = (i * self.k + layer) * self.d_a;
        &self.acoustic[start..start + self.d_a]
    }

    pub fn visual(&self, i: usize) -> &[f32] {
        &self.visual[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn lexical(&self, i: usize) -> &[f32] {
        &self.lexical[i * self.d_l..(i + 1) * self.d_l]
    }

    pub fn record(&self, i: usize) -> FeatureRecord {
        let meta = &self.samples[i];
        FeatureRecord {
            id: meta.id.clone(),
            label: meta.label,
            split: meta.split,
            acoustic: (0..self.k).map(|l| self.acoustic_layer(i, l).to_vec()).collect(),
            visual: self.visual(i).to_vec(),
            lexical: self.lexical(i).to_vec(),
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Indices of every sample carrying a label, regardless of split.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].split == Split::Labeled)
            .collect()
    }

    pub fn ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.samples[i].id.clone()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<Option<EmotionLabel>> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Layer `layer` of the acoustic stack for the given samples, `B x d_a`.
    pub fn acoustic_layer_batch(&self, idx: &[usize], layer: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.d_a);
        for (r, &i) in idx.iter().enumerate() {
            widen_into(out.row_mut(r), self.acoustic_layer(i, layer));
        }
        out
    }

    /// All `k` acoustic layers for the given samples.
    pub fn acoustic_batch(&self, idx: &[usize]) -> Vec<Tensor2> {
        (0..self.k).map(|l| self.acoustic_layer_batch(idx, l)).collect()
    }

    pub fn visual_batch(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.d_v);
        for (r, &i) in idx.iter().enumerate() {
            widen_into(out.row_mut(r), self.visual(i));
        }
        out
    }

    pub fn lexical_batch(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.d_l);
        for (r, &i) in idx.iter().enumerate() {
            widen_into(out.row_mut(r), self.lexical(i));
        }
        out
    }

    /// Per-class counts over the samples that carry a label.
    pub fn class_histogram(&self) -> [usize; crate::NUM_CLASSES] {
        let mut h = [0; crate::NUM_CLASSES];
        for s in &self.samples {
            if let Some(l) = s.label {
                h[l.ordinal()] += 1;
            }
        }
        h
    }

    /// Equality including the bit patterns of every stored float.
    pub fn bitwise_eq(&self, other: &FeatureStore) -> bool {
        fn bits(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.k == other.k
            && self.d_a == other.d_a
            && self.d_v == other.d_v
            && self.d_l == other.d_l
            && self.layer_ids == other.layer_ids
            && self.samples == other.samples
            && bits(&self.acoustic, &other.acoustic)
            && bits(&self.visual, &other.visual)
            && bits(&self.lexical, &other.lexical)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for s in &self.samples {
            let label = s.label.map_or("-", EmotionLabel::name);
            manifest.push_str(&format!("{}\t{}\t{}\n", s.id, label, s.split));
        }

        let mut out = Vec::with_capacity(
            64 + manifest.len() + 4 * (self.acoustic.len() + self.visual.len() + self.lexical.len()),
        );
        out.extend_from_slice(STORE_MAGIC);
        put_u32(&mut out, STORE_VERSION);
        put_u32(&mut out, to_u32(self.len(), "n")?);
        put_u32(&mut out, to_u32(self.k, "k")?);
        put_u32(&mut out, to_u32(self.d_a, "d_a")?);
        put_u32(&mut out, to_u32(self.d_v, "d_v")?);
        put_u32(&mut out, to_u32(self.d_l, "d_l")?);
        for &id in &self.layer_ids {
            put_u32(&mut out, id);
        }
        put_u32(&mut out, to_u32(manifest.len(), "manifest length")?);
        out.extend_from_slice(manifest.as_bytes());
        put_f32s(&mut out, &self.acoustic);
        put_f32s(&mut out, &self.visual);
        put_f32s(&mut out, &self.lexical);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r.bytes(4, "magic")?;
        if magic != STORE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected \"EMOF\""
            )));
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature store version {version} (expected {STORE_VERSION})"
            )));
        }
        let n = r.u32("n")? as usize;
        let k = r.u32("k")? as usize;
        let d_a = r.u32("d_a")? as usize;
        let d_v = r.u32("d_v")? as usize;
        let d_l = r.u32("d_l")? as usize;
        let layer_ids = (0..k)
            .map(|_| r.u32("layer_ids"))
            .collect::<Result<Vec<_>>>()?;
        let manifest_len = r.u32("manifest length")? as usize;
        let manifest_at = r.offset();
        let manifest = r.bytes(manifest_len, "manifest")?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| Error::Corruption {
            offset: manifest_at,
            reason: "manifest is not valid UTF-8".into(),
        })?;
        let samples = parse_manifest(manifest, n)?;

        let acoustic = r.f32s(n * k * d_a, "acoustic block")?;
        let visual = r.f32s(n * d_v, "visual block")?;
        let lexical = r.f32s(n * d_l, "lexical block")?;
        r.expect_end()?;

        let store = Self {
            k,
            d_a,
            d_v,
            d_l,
            layer_ids,
            samples,
            acoustic,
            visual,
            lexical,
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_a == 0 || self.d_v == 0 || self.d_l == 0 {
            return Err(Error::Format("zero dimension in header".into()));
        }
        for s in &self.samples {
            if s.split == Split::Labeled && s.label.is_none() {
                return Err(Error::Data(format!("labeled sample {} has no label", s.id)));
            }
        }
        let all_finite = self
            .acoustic
            .iter()
            .chain(&self.visual)
            .chain(&self.lexical)
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::Data("feature blocks contain non-finite values".into()));
        }
        Ok(())
    }
}

fn widen_into(dst: &mut [f64], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = f64::from(s);
    }
}

fn parse_manifest(text: &str, n: usize) -> Result<Vec<SampleMeta>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "manifest header mismatch: {other:?}"
            )))
        }
    }
    let mut samples = Vec::with_capacity(n);
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format(format!(
                "manifest row {row} has {} columns, expected 3",
                cols.len()
            )));
        }
        let label = match cols[1] {
            "-" => None,
            name => Some(name.parse::<EmotionLabel>()?),
        };
        samples.push(SampleMeta {
            id: cols[0].to_string(),
            label,
            split: cols[2].parse()?,
        });
    }
    if samples.len() != n {
        return Err(Error::Format(format!(
            "manifest lists {} samples, header says {n}",
            samples.len()
        )));
    }
    Ok(samples)
}

pub fn write_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = store.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a whole store; nothing is returned unless every block parses.
pub fn read_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureStore::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store() -> FeatureStore {
        let mut s = FeatureStore::new(vec![16, 17], 3, 2, 2).unwrap();
        for i in 0..4 {
            let x = i as f32;
            s.push(FeatureRecord {
                id: format!("s{i}"),
                label: if i < 3 { EmotionLabel::from_ordinal(i) } else { None },
                split: if i < 3 { Split::Labeled } else { Split::Unlabeled },
                acoustic: vec![vec![x, -x, 0.5], vec![1.0, 2.0, x * 0.25]],
                visual: vec![x, 1.0],
                lexical: vec![-1.0, x],
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = tiny_store();
        let back = FeatureStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert!(back.bitwise_eq(&s));
        assert_eq!(back.acoustic_layer(2, 1), &[1.0, 2.0, 0.5]);
    }

    #[test]
    fn empty_store_round_trips() {
        let s = FeatureStore::new(vec![1], 2, 2, 2).unwrap();
        let back = FeatureStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert!(back.is_empty());
        assert!(back.bitwise_eq(&s));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = tiny_store().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(FeatureStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let mut bytes = tiny_store().to_bytes().unwrap();
        bytes[4] = 9;
        let err = FeatureStore::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = tiny_store().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match FeatureStore::from_bytes(cut) {
            Err(Error::Corruption { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = tiny_store().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            FeatureStore::from_bytes(&bytes),
            Err(Error::Corruption { .. })
        ));
    }

    #[test]
    fn manifest_uses_label_names() {
        let bytes = tiny_store().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("s1\tanger\tlabeled\n"));
        assert!(text.contains("s3\t-\tunlabeled\n"));
    }

    #[test]
    fn push_validates_shapes_and_labels() {
        let mut s = FeatureStore::new(vec![1], 2, 2, 2).unwrap();
        let rec = FeatureRecord {
            id: "a".into(),
            label: None,
            split: Split::Labeled,
            acoustic: vec![vec![0.0, 0.0]],
            visual: vec![0.0, 0.0],
            lexical: vec![0.0, 0.0],
        };
        assert!(matches!(s.push(rec.clone()), Err(Error::Data(_))));
        let mut bad = rec;
        bad.label = Some(EmotionLabel::Anger);
        bad.visual = vec![0.0];
        assert!(matches!(s.push(bad), Err(Error::Dimension { .. })));
    }
}
